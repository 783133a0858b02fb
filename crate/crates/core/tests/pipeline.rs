use echo_imager::experiments::{mle, sample, MleOptions};
use echo_imager::fisher::{classical_fi, FiOptions};
use echo_imager::fock::{amp_kraus, echo_clicks, loss_kraus, twin_beam_cutoff};
use echo_imager::modes::{coherence_matrix, parity_eigenmodes, ModeBasis, MutualCoherenceMatrix, Scene};
use echo_imager::protocols::{fock_probe, twin_beam_echo, NoiseConfig};
use echo_imager::{Arm, Outcome};

fn diag(v: &[f64]) -> MutualCoherenceMatrix {
    MutualCoherenceMatrix::diagonal(v)
}

// Two sources at ±y in a Gaussian PSF: the odd HG modes carry e^{-q} sinh q of the
// brightness, the even modes e^{-q} cosh q, with q = y²/2σ².
fn parity_oracle(d: f64, sigma: f64, eps: f64) -> (f64, f64) {
    let q = (d / 2.0).powi(2) / (2.0 * sigma * sigma);
    (eps * (-q).exp() * q.cosh(), eps * (-q).exp() * q.sinh())
}

#[test]
fn scene_parity_rates_match_overlap_series() {
    for (d, sigma) in [(0.05, 1.0), (0.2, 1.0), (0.3, 2.0), (1.0, 1.0)] {
        let eps = 0.01;
        let gamma = coherence_matrix(&Scene::two_point(d, sigma, eps, 0.0).unwrap(), &ModeBasis::hermite_gauss(sigma, 30)).unwrap();
        let modes = parity_eigenmodes(&gamma).unwrap();
        let (plus, minus) = parity_oracle(d, sigma, eps);
        assert!((modes.plus - plus).abs() < 1e-12, "d={d}: {} vs {plus}", modes.plus);
        assert!((modes.minus - minus).abs() < 1e-12, "d={d}: {} vs {minus}", modes.minus);
    }
}

#[test]
fn echo_click_rates_match_fock_space_evolution() {
    let none = NoiseConfig::none();
    for r in [0.3f64, 1.0, 1.5] {
        let g = 1e-4f64;
        let cutoff = twin_beam_cutoff(r, 1e-10);
        let emit = echo_clicks(r, cutoff, &amp_kraus(g.exp(), cutoff).unwrap()).unwrap();
        let absorb = echo_clicks(r, cutoff, &loss_kraus((-g).exp(), cutoff).unwrap()).unwrap();
        let model = twin_beam_echo(&diag(&[g]), &diag(&[g]), &[r], &none).unwrap();
        let signal = model.signal.probability(&Outcome::Click { arm: Arm::Signal, mode: 0 });
        let idler = model.idler.probability(&Outcome::Click { arm: Arm::Idler, mode: 0 });
        let tol = 20.0 * g * g * r.cosh().powi(4);
        assert!((emit.signal - signal).abs() < tol, "r={r}: {} vs {signal}", emit.signal);
        assert!((absorb.idler - idler).abs() < tol, "r={r}: {} vs {idler}", absorb.idler);
        assert!((emit.vacuum + emit.signal + emit.idler - 1.0).abs() < 1e-6);
    }
}

#[test]
fn fock_probe_estimates_emission_rate() {
    let none = NoiseConfig::none();
    let (up, down, n) = (0.004, 0.002, 3);
    let model = |t: &[f64]| fock_probe(&diag(&[up]), &diag(&[t[0]]), &[n], &none);
    let truth = model(&[down]).unwrap();
    let trials = 2_000_000u64;
    let fi = classical_fi(|t| model(&[t]), down, FiOptions::full()).unwrap().value;
    let sd = 1.0 / (trials as f64 * fi).sqrt();
    for seed in 0..4 {
        let batch = sample(&truth, trials, seed).unwrap();
        let fit = mle(&batch, &model, &[(1e-6, 0.05)], MleOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.estimate[0] - down).abs() < 5.0 * sd, "seed {seed}: {} vs {down} (sd {sd})", fit.estimate[0]);
    }
    // (n+1) photons stimulate emission: F ≈ (n+1)/Γ↓ per trial.
    assert!((fi * down / (n as f64 + 1.0) - 1.0).abs() < 0.02, "{fi}");
}
