//! Monte-Carlo sampling, maximum-likelihood estimation, Cramér–Rao comparisons,
//! separation sweeps and echo verification.

use std::collections::BTreeMap;
use std::time::Instant;

use log::warn;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{CountDistribution, Outcome};
use crate::error::{Error, Result};
use crate::fisher::{classical_fi, fisher_matrix, FiOptions};
use crate::fock::{amp_kraus, echo_clicks, loss_kraus, twin_beam_cutoff};
use crate::gaussian::{echo_sequence, eta_from_rates, exact_interaction, ThermalPerturbation};
use crate::linalg::{loglog_slope, max_abs, sym_norm, CMatrix, RMatrix};
use crate::modes::{ModeBasis, PixelGrid, Scene};
use crate::protocols::{direct_detection_trial, spade, NoiseConfig, ProbeConfig};

/// Generator used for every random draw; recorded in reports.
pub const RNG_ALGORITHM: &str = "ChaCha8";

/// Independent stream `stream` of the master seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Outcome counts from M repetitions of a one-step channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialBatch {
    pub outcomes: Vec<Outcome>,
    pub counts: Vec<u64>,
    pub trials: u64,
    pub seed: u64,
}

impl TrialBatch {
    pub fn count(&self, outcome: &Outcome) -> u64 {
        self.outcomes.iter().position(|o| o == outcome).map_or(0, |i| self.counts[i])
    }

    pub fn labelled(&self) -> BTreeMap<String, u64> {
        self.outcomes.iter().zip(&self.counts).map(|(o, c)| (o.to_string(), *c)).collect()
    }
}

/// Multinomial draw of `trials` outcomes, deterministic given `seed`.
pub fn sample(dist: &CountDistribution, trials: u64, seed: u64) -> Result<TrialBatch> {
    sample_with(dist, trials, seed, &mut rng_for(seed, 0))
}

/// Multinomial draw by sequential binomials; `seed` is only recorded.
pub fn sample_with(dist: &CountDistribution, trials: u64, seed: u64, rng: &mut impl Rng) -> Result<TrialBatch> {
    if trials == 0 {
        return Err(Error::param("trials", "must be ≥ 1"));
    }
    let p = &dist.probabilities;
    let last = p
        .iter()
        .rposition(|v| *v > 0.0)
        .ok_or_else(|| Error::Numerical("distribution has no mass".into()))?;
    let mut counts = vec![0u64; p.len()];
    let mut left = trials;
    let mut mass: f64 = p.iter().sum();
    for i in 0..last {
        if left == 0 {
            break;
        }
        let q = if mass > 0.0 { (p[i] / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = Binomial::new(left, q).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng);
        counts[i] = k;
        left -= k;
        mass -= p[i];
    }
    counts[last] = left;
    Ok(TrialBatch { outcomes: dist.outcomes.clone(), counts, trials, seed })
}

/// Parametric family of count distributions.
pub type Model<'a> = dyn Fn(&[f64]) -> Result<CountDistribution> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    /// Convergence tolerance on parameters, relative to the bound widths.
    pub xtol: f64,
    pub max_iter: usize,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions { xtol: 1e-10, max_iter: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub estimate: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `Σ nᵢ ln pᵢ`; −∞ when an observed outcome has zero probability.
pub fn log_likelihood(counts: &[f64], dist: &CountDistribution) -> f64 {
    counts
        .iter()
        .zip(&dist.probabilities)
        .filter(|(n, _)| **n > 0.0)
        .map(|(n, p)| if *p > 0.0 { n * p.ln() } else { f64::NEG_INFINITY })
        .sum()
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::param("bounds", "need at least one parameter"));
    }
    if bounds.iter().any(|(a, b)| !(b > a) || !a.is_finite() || !b.is_finite()) {
        return Err(Error::param("bounds", "each interval needs finite lo < hi"));
    }
    Ok(())
}

/// Maximum-likelihood fit on possibly fractional counts: golden-section search for
/// one parameter, Nelder–Mead in the unit-scaled box otherwise.
pub fn mle_counts(outcomes: &[Outcome], counts: &[f64], model: &Model, bounds: &[(f64, f64)], opts: MleOptions) -> Result<MleFit> {
    check_bounds(bounds)?;
    if outcomes.len() != counts.len() {
        return Err(Error::Dimension("counts and outcomes differ in length".into()));
    }
    let mid: Vec<f64> = bounds.iter().map(|(a, b)| 0.5 * (a + b)).collect();
    let probe = model(&mid)?;
    if probe.outcomes != outcomes {
        return Err(Error::Dimension("model outcomes do not match the counts".into()));
    }
    let ll = |theta: &[f64]| model(theta).map_or(f64::NEG_INFINITY, |d| log_likelihood(counts, &d));
    let fit = if bounds.len() == 1 {
        golden_section(|x| ll(&[x]), bounds[0], opts)
    } else {
        nelder_mead(&ll, bounds, opts)
    };
    if !fit.converged {
        warn!("maximum likelihood did not converge after {} iterations", fit.iterations);
    }
    Ok(fit)
}

pub fn mle(batch: &TrialBatch, model: &Model, bounds: &[(f64, f64)], opts: MleOptions) -> Result<MleFit> {
    let counts: Vec<f64> = batch.counts.iter().map(|c| *c as f64).collect();
    mle_counts(&batch.outcomes, &counts, model, bounds, opts)
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

fn golden_section(f: impl Fn(f64) -> f64, (lo, hi): (f64, f64), opts: MleOptions) -> MleFit {
    let (mut a, mut b) = (lo, hi);
    let tol = opts.xtol * (hi - lo);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut it = 0;
    while b - a > tol && it < opts.max_iter {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        it += 1;
    }
    let x = 0.5 * (a + b);
    let mut best = (x, f(x));
    for e in [lo, hi] {
        let fe = f(e);
        if fe > best.1 {
            best = (e, fe);
        }
    }
    MleFit { estimate: vec![best.0], log_likelihood: best.1, iterations: it, converged: b - a <= tol }
}

fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, bounds: &[(f64, f64)], opts: MleOptions) -> MleFit {
    let n = bounds.len();
    let to_theta = |u: &[f64]| -> Vec<f64> {
        u.iter().zip(bounds).map(|(v, (a, b))| a + v.clamp(0.0, 1.0) * (b - a)).collect()
    };
    let cost = |u: &[f64]| -f(&to_theta(u));
    let mut simplex: Vec<Vec<f64>> = vec![vec![0.5; n]];
    for i in 0..n {
        let mut v = vec![0.5; n];
        v[i] += 0.2;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| cost(v)).collect();
    let mut it = 0;
    let mut converged = false;
    while it < opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if size < opts.xtol && (vals[n] - vals[0]).abs() <= 1e-12 * (1.0 + vals[0].abs()) {
            converged = true;
            break;
        }
        it += 1;
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = cost(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = cost(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let xc = if fr < vals[n] { along(-0.5) } else { along(0.5) };
            let fcv = cost(&xc);
            if fcv < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fcv;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k])).collect();
                    vals[i] = cost(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap_or(0);
    MleFit { estimate: to_theta(&simplex[best]), log_likelihood: -vals[best], iterations: it, converged }
}

/// Repeated sample-and-fit runs at fixed truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationPlan {
    pub trials: u64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for ReplicationPlan {
    fn default() -> Self {
        ReplicationPlan { trials: 1_000_000, replications: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub parameters: Vec<String>,
    pub truth: Vec<f64>,
    pub estimates: Vec<f64>,
    pub sample_variance: Vec<f64>,
    /// Diagonal of (M·F)⁻¹ with the per-trial FI over all outcomes.
    pub crb: Vec<f64>,
    pub bias: Vec<f64>,
    pub fisher: Vec<f64>,
    pub trials: u64,
    pub replications: usize,
    pub seed: u64,
    pub rng: String,
    pub non_converged: usize,
    pub runtime_s: f64,
    pub samples: Vec<Vec<f64>>,
}

impl EstimationReport {
    /// sample variance / CRB per parameter.
    pub fn efficiency(&self) -> Vec<f64> {
        self.sample_variance.iter().zip(&self.crb).map(|(v, c)| v / c).collect()
    }

    /// |bias| < 3·√(variance/replications) for every parameter.
    pub fn bias_consistent(&self) -> bool {
        self.bias
            .iter()
            .zip(&self.sample_variance)
            .all(|(b, v)| b.abs() < 3.0 * (v / self.replications as f64).sqrt())
    }
}

pub fn replicate(model: &Model, truth: &[f64], bounds: &[(f64, f64)], plan: ReplicationPlan, opts: MleOptions) -> Result<EstimationReport> {
    check_bounds(bounds)?;
    if truth.len() != bounds.len() {
        return Err(Error::Dimension("truth and bounds differ in length".into()));
    }
    if plan.replications < 2 {
        return Err(Error::param("replications", "need at least 2 for a variance"));
    }
    if plan.trials == 0 {
        return Err(Error::param("trials", "must be ≥ 1"));
    }
    let start = Instant::now();
    let dist = model(truth)?;
    let fits: Vec<MleFit> = (0..plan.replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng_for(plan.seed, rep as u64);
            let batch = sample_with(&dist, plan.trials, plan.seed, &mut rng)?;
            mle(&batch, model, bounds, opts)
        })
        .collect::<Result<_>>()?;
    let fm = fisher_matrix(model, truth, FiOptions::full())?;
    let total = fm.matrix.clone() * plan.trials as f64;
    let crb: Vec<f64> = match total.clone().try_inverse() {
        Some(inv) if fm.condition_number().is_finite() => (0..truth.len()).map(|i| inv[(i, i)]).collect(),
        _ => vec![f64::INFINITY; truth.len()],
    };
    let k = truth.len();
    let reps = plan.replications as f64;
    let mean: Vec<f64> = (0..k).map(|i| fits.iter().map(|f| f.estimate[i]).sum::<f64>() / reps).collect();
    let var: Vec<f64> = (0..k)
        .map(|i| fits.iter().map(|f| (f.estimate[i] - mean[i]).powi(2)).sum::<f64>() / (reps - 1.0))
        .collect();
    Ok(EstimationReport {
        parameters: dist.parameters.clone(),
        truth: truth.to_vec(),
        bias: mean.iter().zip(truth).map(|(m, t)| m - t).collect(),
        estimates: mean,
        sample_variance: var,
        crb,
        fisher: (0..k).map(|i| fm.matrix[(i, i)]).collect(),
        trials: plan.trials,
        replications: plan.replications,
        seed: plan.seed,
        rng: RNG_ALGORITHM.to_string(),
        non_converged: fits.iter().filter(|f| !f.converged).count(),
        runtime_s: start.elapsed().as_secs_f64(),
        samples: fits.into_iter().map(|f| f.estimate).collect(),
    })
}

/// Measurement used to resolve two incoherent point sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Direct,
    Spade,
    Echo,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::Spade => "spade",
            Strategy::Echo => "echo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub emission: f64,
    pub sigma: f64,
    /// Probe for the echo strategy.
    pub probe: ProbeConfig,
    pub truncation: usize,
    pub pixels_per_sigma: usize,
    pub half_width: f64,
    pub plan: ReplicationPlan,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            emission: 0.01,
            sigma: 1.0,
            probe: ProbeConfig::twin_beam(1.0),
            truncation: 8,
            pixels_per_sigma: 20,
            half_width: 6.0,
            plan: ReplicationPlan { trials: 1_000_000, replications: 0, seed: 0 },
        }
    }
}

/// Emission-readout amplification of a probe in the first odd mode.
pub fn probe_gain(probe: &ProbeConfig) -> Result<f64> {
    let pick = |v: &[f64]| v.get(1).or(v.first()).copied().unwrap_or(0.0);
    match probe {
        ProbeConfig::TwinBeamEcho { squeeze_r } | ProbeConfig::SingleModeSqzEcho { squeeze_r } => {
            Ok(pick(squeeze_r).cosh().powi(2))
        }
        ProbeConfig::Fock { fock_n } => Ok(fock_n.get(1).or(fock_n.first()).map_or(1.0, |n| *n as f64 + 1.0)),
        ProbeConfig::Vacuum => Ok(1.0),
        ProbeConfig::Coherent { .. } => Err(Error::Unsupported("coherent probes have no click model".into())),
    }
}

/// Per-trial leading-order FI for the separation d/σ.
pub fn analytic_separation_fi(strategy: Strategy, s: f64, settings: &SweepSettings) -> Result<f64> {
    let e = settings.emission;
    Ok(match strategy {
        Strategy::Direct => e * s * s / 2.0,
        Strategy::Spade => e / 2.0,
        Strategy::Echo => e * probe_gain(&settings.probe)? / 2.0,
    })
}

/// Per-trial count model in the separation d/σ.
pub fn separation_model(strategy: Strategy, settings: &SweepSettings) -> Result<Box<Model<'static>>> {
    let (e, sigma) = (settings.emission, settings.sigma);
    let none = NoiseConfig::none();
    Ok(match strategy {
        Strategy::Direct => {
            let grid = PixelGrid::around_psf(sigma, settings.half_width, settings.pixels_per_sigma)?;
            Box::new(move |t: &[f64]| direct_detection_trial(&Scene::two_point(t[0] * sigma, sigma, e, 0.0)?, &grid))
        }
        Strategy::Spade | Strategy::Echo => {
            let probe = if strategy == Strategy::Spade { ProbeConfig::Vacuum } else { settings.probe.clone() };
            probe_gain(&probe)?;
            let basis = ModeBasis::hermite_gauss(sigma, settings.truncation);
            Box::new(move |t: &[f64]| spade(&Scene::two_point(t[0] * sigma, sigma, e, 0.0)?, &basis, &probe, &none))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d_over_sigma: f64,
    pub strategy: Strategy,
    pub fi_analytic: f64,
    pub fi_numeric: f64,
    pub mle_variance: f64,
    pub crb: f64,
}

/// Per-d analytic and numeric FI, plus Monte-Carlo MLE variance when the plan has
/// replications (NaN otherwise).
pub fn rayleigh_sweep(strategy: Strategy, d_grid: &[f64], settings: &SweepSettings) -> Result<Vec<SweepRow>> {
    if d_grid.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(Error::param("d_grid", "separations must be positive"));
    }
    let model = separation_model(strategy, settings)?;
    let hi = d_grid.iter().copied().fold(0.0, f64::max) * 4.0 + 1.0;
    d_grid
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let fi = classical_fi(|t| model(&[t]), d, FiOptions::default())?.value;
            let crb = 1.0 / (settings.plan.trials as f64 * fi);
            let mle_variance = if settings.plan.replications >= 2 {
                let plan = ReplicationPlan { seed: settings.plan.seed.wrapping_add(i as u64), ..settings.plan };
                replicate(model.as_ref(), &[d], &[(0.0, hi)], plan, MleOptions::default())?.sample_variance[0]
            } else {
                f64::NAN
            };
            Ok(SweepRow {
                d_over_sigma: d,
                strategy,
                fi_analytic: analytic_separation_fi(strategy, d, settings)?,
                fi_numeric: fi,
                mle_variance,
                crb,
            })
        })
        .collect()
}

/// Log-log slope of numeric FI against d/σ.
pub fn fitted_exponent(rows: &[SweepRow]) -> f64 {
    let d: Vec<f64> = rows.iter().map(|r| r.d_over_sigma).collect();
    let f: Vec<f64> = rows.iter().map(|r| r.fi_numeric).collect();
    loglog_slope(&d, &f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EchoVerifyOptions {
    pub samples: usize,
    pub pairs: usize,
    pub max_norm: f64,
    pub r_max: f64,
    pub seed: u64,
    /// Twin-beam population allowed above the oracle cutoff.
    pub leak_tol: f64,
}

impl Default for EchoVerifyOptions {
    fn default() -> Self {
        EchoVerifyOptions { samples: 50, pairs: 2, max_norm: 0.01, r_max: 2.0, seed: 0, leak_tol: 1e-14 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoVerifySample {
    pub r: Vec<f64>,
    pub phi: Vec<f64>,
    pub norm_up: f64,
    pub norm_down: f64,
    /// Linearised propagation against the closed-form blocks.
    pub first_order_discrepancy: f64,
    /// max |Σ₃ − I − 2δY| for the exact channel at η and η/2.
    pub residual: f64,
    pub residual_half: f64,
    pub oracle_rates: (f64, f64),
    pub oracle_cutoff: usize,
    /// max click-probability deviation of the Fock oracle at the rates and half the rates.
    pub oracle_residual: f64,
    pub oracle_residual_half: f64,
}

impl EchoVerifySample {
    pub fn ratio(&self) -> f64 {
        self.residual / self.residual_half
    }

    pub fn oracle_ratio(&self) -> f64 {
        self.oracle_residual / self.oracle_residual_half
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoVerifyReport {
    pub samples: Vec<EchoVerifySample>,
    /// Closed form with r = 0 against the bare channel.
    pub zero_squeezing_residual: f64,
    /// Absorption-only signal block and emission-only idler block (both should vanish).
    pub block_leakage: f64,
    pub seed: u64,
    pub rng: String,
}

impl EchoVerifyReport {
    pub fn max_first_order_discrepancy(&self) -> f64 {
        self.samples.iter().map(|s| s.first_order_discrepancy).fold(0.0, f64::max)
    }

    pub fn ratio_range(&self) -> (f64, f64) {
        range(self.samples.iter().map(|s| s.ratio()))
    }

    pub fn oracle_ratio_range(&self) -> (f64, f64) {
        range(self.samples.iter().map(|s| s.oracle_ratio()))
    }
}

fn range(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn random_eta(rng: &mut impl Rng, k: usize, norm: f64) -> RMatrix {
    let a = CMatrix::from_fn(k, k, |_, _| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let eta = eta_from_rates(&(&a * a.adjoint()));
    let n = sym_norm(&eta);
    eta * (norm / n)
}

fn gaussian_residual(r: &[f64], phi: &[f64], up: &RMatrix, down: &RMatrix) -> Result<f64> {
    let ch = exact_interaction(up, down, r.len())?;
    let (st, _) = echo_sequence(r, phi, &ch)?;
    let closed = ThermalPerturbation::closed_form(r, phi, up, down);
    let n = st.cov.nrows();
    Ok(max_abs(&(&st.cov - RMatrix::identity(n, n) - closed.full() * 2.0)))
}

fn oracle_residual(r: f64, up: f64, down: f64, cutoff: usize) -> Result<f64> {
    let ch = loss_kraus((-up).exp(), cutoff)?.then_restricted(&amp_kraus(down.exp(), cutoff)?, 1)?;
    let clicks = echo_clicks(r, cutoff, &ch)?;
    Ok((clicks.signal - down * r.cosh().powi(2)).abs().max((clicks.idler - up * r.sinh().powi(2)).abs()))
}

/// Random echo configurations checked against the closed-form first-order blocks,
/// with the quadratic scaling of the exact-channel residual and of a Fock oracle.
pub fn echo_verify(opts: EchoVerifyOptions) -> Result<EchoVerifyReport> {
    if opts.samples == 0 || opts.pairs == 0 {
        return Err(Error::param("samples", "need at least one sample and one pair"));
    }
    if !(opts.max_norm > 0.0) || !(opts.r_max >= 0.0) {
        return Err(Error::param("max_norm", "norm bound must be positive and r_max ≥ 0"));
    }
    let k = opts.pairs;
    let samples: Vec<EchoVerifySample> = (0..opts.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(opts.seed, i as u64);
            let r: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=opts.r_max)).collect();
            let phi: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            let norm_up = opts.max_norm * rng.gen_range(0.5..=1.0);
            let norm_down = opts.max_norm * rng.gen_range(0.5..=1.0);
            let up = random_eta(&mut rng, k, norm_up);
            let down = random_eta(&mut rng, k, norm_down);
            let lin = ThermalPerturbation::linearized(&r, &phi, &up, &down)?;
            let closed = ThermalPerturbation::closed_form(&r, &phi, &up, &down);
            let residual = gaussian_residual(&r, &phi, &up, &down)?;
            let residual_half = gaussian_residual(&r, &phi, &(&up * 0.5), &(&down * 0.5))?;
            let (gu, gd) = (up[(0, 0)], down[(0, 0)]);
            let cutoff = twin_beam_cutoff(r[0], opts.leak_tol);
            Ok(EchoVerifySample {
                first_order_discrepancy: lin.max_discrepancy(&closed),
                residual,
                residual_half,
                oracle_rates: (gu, gd),
                oracle_cutoff: cutoff,
                oracle_residual: oracle_residual(r[0], gu, gd, cutoff)?,
                oracle_residual_half: oracle_residual(r[0], gu / 2.0, gd / 2.0, cutoff)?,
                r,
                phi,
                norm_up,
                norm_down,
            })
        })
        .collect::<Result<_>>()?;

    let mut rng = rng_for(opts.seed, opts.samples as u64);
    let up = random_eta(&mut rng, k, opts.max_norm);
    let down = random_eta(&mut rng, k, opts.max_norm);
    let zeros = vec![0.0; k];
    let bare = crate::gaussian::perturbative_interaction(&up, &down, k)?;
    let (st, _) = echo_sequence(&zeros, &zeros, &bare)?;
    let closed = ThermalPerturbation::closed_form(&zeros, &zeros, &up, &down);
    let n = st.cov.nrows();
    let zero_squeezing_residual = max_abs(&(&st.cov - RMatrix::identity(n, n) - closed.full() * 2.0));
    let z = RMatrix::zeros(2 * k, 2 * k);
    let rr = vec![0.8; k];
    let abs = ThermalPerturbation::linearized(&rr, &zeros, &up, &z)?;
    let emi = ThermalPerturbation::linearized(&rr, &zeros, &z, &down)?;
    let block_leakage = max_abs(&abs.signal_block).max(max_abs(&emi.idler_block));
    Ok(EchoVerifyReport { samples, zero_squeezing_residual, block_leakage, seed: opts.seed, rng: RNG_ALGORITHM.to_string() })
}

/// Mean and unbiased variance.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Expected counts `M·p` as a fractional batch for noiseless fits.
pub fn expected_counts(dist: &CountDistribution, trials: u64) -> Vec<f64> {
    dist.probabilities.iter().map(|p| p * trials as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::Arm;
    use crate::modes::MutualCoherenceMatrix;
    use crate::protocols::twin_beam_echo;
    use proptest::prelude::*;
    use super::Strategy;

    fn coin(p: f64) -> CountDistribution {
        CountDistribution::new(vec![Outcome::Pixel(0), Outcome::Pixel(1)], vec![p, 1.0 - p], vec!["p".into()], None).unwrap()
    }

    #[test]
    fn single_outcome_takes_everything() {
        let d = CountDistribution::new(vec![Outcome::NoClick], vec![1.0], vec![], None).unwrap();
        assert_eq!(sample(&d, 1234, 7).unwrap().counts, vec![1234]);
        assert!(sample(&d, 0, 7).is_err());
    }

    #[test]
    fn fair_coin_concentrates() {
        let m = 1_000_000u64;
        let b = sample(&coin(0.5), m, 3).unwrap();
        let sd = (m as f64 * 0.25).sqrt();
        assert!((b.counts[0] as f64 - 5e5).abs() < 5.0 * sd);
        assert_eq!(b.counts.iter().sum::<u64>(), m);
    }

    #[test]
    fn replay_is_identical() {
        let d = coin(0.3);
        assert_eq!(sample(&d, 10_000, 42).unwrap(), sample(&d, 10_000, 42).unwrap());
        assert_ne!(sample(&d, 10_000, 42).unwrap().counts, sample(&d, 10_000, 43).unwrap().counts);
    }

    #[test]
    fn noiseless_counts_recover_truth() {
        let settings = SweepSettings::default();
        let model = separation_model(Strategy::Spade, &settings).unwrap();
        let dist = model(&[0.1]).unwrap();
        let counts: Vec<f64> = expected_counts(&dist, 10_000_000);
        let fit = mle_counts(&dist.outcomes, &counts, model.as_ref(), &[(0.0, 1.0)], MleOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.estimate[0] - 0.1).abs() < 1e-7, "{fit:?}");
    }

    fn echo_model(t: &[f64]) -> Result<CountDistribution> {
        twin_beam_echo(
            &MutualCoherenceMatrix::diagonal(&[t[0]]),
            &MutualCoherenceMatrix::diagonal(&[t[1]]),
            &[1.0],
            &NoiseConfig::none(),
        )?
        .joint()
    }

    #[test]
    fn noiseless_two_parameter_fit() {
        let dist = echo_model(&[0.01, 0.02]).unwrap();
        let counts: Vec<f64> = expected_counts(&dist, 1_000_000);
        let fit = mle_counts(&dist.outcomes, &counts, &echo_model, &[(1e-4, 0.05), (1e-4, 0.05)], MleOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.estimate[0] - 0.01).abs() < 1e-7 && (fit.estimate[1] - 0.02).abs() < 1e-7, "{fit:?}");
    }

    #[test]
    fn simultaneous_echo_estimates_saturate_crb() {
        let plan = ReplicationPlan { trials: 1_000_000, replications: 200, seed: 11 };
        let rep = replicate(&echo_model, &[0.01, 0.01], &[(1e-4, 0.05), (1e-4, 0.05)], plan, MleOptions::default()).unwrap();
        for e in rep.efficiency() {
            assert!((0.8..=1.25).contains(&e), "{rep:?}");
        }
        assert!(rep.bias_consistent());
        assert_eq!(rep.non_converged, 0);
        let joint = echo_model(&[0.01, 0.01]).unwrap();
        assert!(joint.probability(&Outcome::Click { arm: Arm::Idler, mode: 0 }) > 0.0);
    }

    #[test]
    fn replications_are_reproducible() {
        let plan = ReplicationPlan { trials: 100_000, replications: 8, seed: 5 };
        let model = |t: &[f64]| Ok(coin(t[0]));
        let a = replicate(&model, &[0.3], &[(0.0, 1.0)], plan, MleOptions::default()).unwrap();
        let b = replicate(&model, &[0.3], &[(0.0, 1.0)], plan, MleOptions::default()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.rng, "ChaCha8");
        assert!(a.sample_variance[0] >= 0.0);
    }

    #[test]
    fn sweep_fi_shapes() {
        let settings = SweepSettings::default();
        let grid = [0.02, 0.04, 0.08];
        let direct = rayleigh_sweep(Strategy::Direct, &grid, &settings).unwrap();
        let r1 = direct[1].fi_numeric / direct[0].fi_numeric;
        let r2 = direct[2].fi_numeric / direct[0].fi_numeric;
        assert!((r1 - 4.0).abs() < 0.05 && (r2 - 16.0).abs() < 0.2, "{r1} {r2}");
        for row in &direct {
            assert!((row.fi_numeric / row.fi_analytic - 1.0).abs() < 0.02, "{row:?}");
            assert!(row.mle_variance.is_nan());
        }
        let spade = rayleigh_sweep(Strategy::Spade, &grid, &settings).unwrap();
        for row in &spade {
            assert!((row.fi_numeric / 0.005 - 1.0).abs() < 0.01, "{row:?}");
        }
        let echo = rayleigh_sweep(Strategy::Echo, &grid, &settings).unwrap();
        for row in &echo {
            assert!((row.fi_numeric / (0.01 * 1f64.cosh().powi(2) / 2.0) - 1.0).abs() < 0.01, "{row:?}");
        }
        assert!(fitted_exponent(&spade).abs() < 0.05);
    }

    #[test]
    fn sweep_rejects_bad_grid() {
        assert!(rayleigh_sweep(Strategy::Spade, &[0.0], &SweepSettings::default()).is_err());
    }

    #[test]
    fn small_echo_verification() {
        let rep = echo_verify(EchoVerifyOptions { samples: 4, r_max: 1.0, ..Default::default() }).unwrap();
        assert!(rep.max_first_order_discrepancy() < 1e-12);
        assert!(rep.zero_squeezing_residual < 1e-3);
        assert!(rep.block_leakage < 1e-15);
        let (lo, hi) = rep.ratio_range();
        assert!(lo > 3.2 && hi < 4.8, "{lo} {hi}");
        let (lo, hi) = rep.oracle_ratio_range();
        assert!(lo > 3.2 && hi < 4.8, "{lo} {hi}");
    }

    proptest! {
        #[test]
        fn counts_sum_to_trials(p in 0.0..1.0f64, m in 1u64..100_000, seed in any::<u64>()) {
            let b = sample(&coin(p), m, seed).unwrap();
            prop_assert_eq!(b.counts.iter().sum::<u64>(), m);
        }
    }
}
