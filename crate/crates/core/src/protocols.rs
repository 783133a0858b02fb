//! Probe/measurement protocols in the first-order click model.
//!
//! Each mode yields at most one excitation change per trial. Distributions are
//! multinomials over {no click, click in mode k} with the no-click outcome as the
//! reference. Off-diagonal rate entries are ignored under mode-diagonal counting.

use std::sync::atomic::{AtomicBool, Ordering};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::distribution::{Arm, CountDistribution, Outcome};
use crate::error::{Error, Result};
use crate::modes::{absorption_matrix, coherence_matrix, ModeBasis, MutualCoherenceMatrix, PixelGrid, Scene};

/// Upper bound on the total click probability of a first-order distribution.
pub const PERTURBATIVE_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeConfig {
    /// Per-mode squeezing; a single value applies to every mode.
    TwinBeamEcho { squeeze_r: Vec<f64> },
    Fock { fock_n: Vec<usize> },
    SingleModeSqzEcho { squeeze_r: Vec<f64> },
    /// Complex amplitudes as `[re, im]`.
    Coherent { coherent_amp: Vec<[f64; 2]> },
    Vacuum,
}

fn broadcast<T: Copy>(v: &[T], k: usize, name: &str) -> Result<Vec<T>> {
    match v.len() {
        1 => Ok(vec![v[0]; k]),
        n if n == k => Ok(v.to_vec()),
        n => Err(Error::param(name, format!("{n} values for {k} modes"))),
    }
}

impl ProbeConfig {
    pub fn twin_beam(r: f64) -> Self {
        ProbeConfig::TwinBeamEcho { squeeze_r: vec![r] }
    }

    pub fn fock(n: usize) -> Self {
        ProbeConfig::Fock { fock_n: vec![n] }
    }

    pub fn single_mode_sqz(r: f64) -> Self {
        ProbeConfig::SingleModeSqzEcho { squeeze_r: vec![r] }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ProbeConfig::TwinBeamEcho { .. } => "twin_beam_echo",
            ProbeConfig::Fock { .. } => "fock",
            ProbeConfig::SingleModeSqzEcho { .. } => "single_mode_sqz_echo",
            ProbeConfig::Coherent { .. } => "coherent",
            ProbeConfig::Vacuum => "vacuum",
        }
    }

    pub fn validate(&self, modes: usize) -> Result<()> {
        match self {
            ProbeConfig::TwinBeamEcho { squeeze_r } | ProbeConfig::SingleModeSqzEcho { squeeze_r } => {
                if squeeze_r.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                    return Err(Error::param("squeeze_r", "must be finite and ≥ 0"));
                }
                broadcast(squeeze_r, modes, "squeeze_r").map(|_| ())
            }
            ProbeConfig::Fock { fock_n } => broadcast(fock_n, modes, "fock_n").map(|_| ()),
            ProbeConfig::Coherent { coherent_amp } => {
                if coherent_amp.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::param("coherent_amp", "must be finite"));
                }
                broadcast(coherent_amp, modes, "coherent_amp").map(|_| ())
            }
            ProbeConfig::Vacuum => Ok(()),
        }
    }

    /// Mean signal photon number N_S summed over `modes` modes.
    pub fn mean_photons(&self, modes: usize) -> Result<f64> {
        Ok(match self {
            ProbeConfig::TwinBeamEcho { squeeze_r } | ProbeConfig::SingleModeSqzEcho { squeeze_r } => {
                broadcast(squeeze_r, modes, "squeeze_r")?.iter().map(|r| r.sinh().powi(2)).sum()
            }
            ProbeConfig::Fock { fock_n } => broadcast(fock_n, modes, "fock_n")?.iter().map(|n| *n as f64).sum(),
            ProbeConfig::Coherent { coherent_amp } => {
                broadcast(coherent_amp, modes, "coherent_amp")?.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum()
            }
            ProbeConfig::Vacuum => 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSector {
    #[default]
    Signal,
    Idler,
}

/// Weak loss, heating and additive noise, uniform over modes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(default)]
    pub kappa_loss: f64,
    #[serde(default)]
    pub kappa_heat: f64,
    #[serde(default)]
    pub kappa_agn: f64,
    #[serde(default)]
    pub sector: NoiseSector,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("kappa_loss", self.kappa_loss), ("kappa_heat", self.kappa_heat), ("kappa_agn", self.kappa_agn)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("{v} must be ≥ 0")));
            }
            if v > 0.1 {
                warn!("{name} = {v} is not small; first-order noise routing may be inaccurate");
            }
        }
        Ok(())
    }

    /// Effective (absorption-like, emission-like) rates added on the noisy sector.
    fn rates(&self) -> (f64, f64) {
        (self.kappa_loss + self.kappa_agn, self.kappa_heat + self.kappa_agn)
    }

    fn is_zero(&self) -> bool {
        self.kappa_loss == 0.0 && self.kappa_heat == 0.0 && self.kappa_agn == 0.0
    }
}

fn check_rates(gamma_up: &MutualCoherenceMatrix, gamma_down: &MutualCoherenceMatrix) -> Result<usize> {
    if gamma_up.len() != gamma_down.len() {
        return Err(Error::Dimension(format!(
            "absorption matrix has {} modes, emission matrix {}",
            gamma_up.len(),
            gamma_down.len()
        )));
    }
    Ok(gamma_up.len())
}

fn check_perturbative(total: f64, what: &str) -> Result<()> {
    if total >= PERTURBATIVE_LIMIT {
        return Err(Error::Perturbative(format!("{what} click probability {total:.3} is not small")));
    }
    Ok(())
}

/// Signal and idler click distributions of a twin-beam echo.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinBeamOutput {
    pub signal: CountDistribution,
    pub idler: CountDistribution,
}

impl TwinBeamOutput {
    /// Joint record {no click, signal k, idler k}; coincidences are second order.
    pub fn joint(&self) -> Result<CountDistribution> {
        let clicks = self
            .signal
            .iter()
            .chain(self.idler.iter())
            .filter(|(o, _)| **o != Outcome::NoClick)
            .map(|(o, p)| (o.clone(), p))
            .collect();
        CountDistribution::with_reference(Outcome::NoClick, clicks, &["gamma_up", "gamma_down"])
    }
}

pub fn twin_beam_echo(
    gamma_up: &MutualCoherenceMatrix,
    gamma_down: &MutualCoherenceMatrix,
    r: &[f64],
    noise: &NoiseConfig,
) -> Result<TwinBeamOutput> {
    let k = check_rates(gamma_up, gamma_down)?;
    noise.validate()?;
    let r = broadcast(r, k, "squeeze_r")?;
    let (up, down) = (gamma_up.diag(), gamma_down.diag());
    let (nl, nh) = noise.rates();
    let mut sig = Vec::with_capacity(k);
    let mut idl = Vec::with_capacity(k);
    for m in 0..k {
        let (c2, s2) = (r[m].cosh().powi(2), r[m].sinh().powi(2));
        let (mut ps, mut pi) = (down[m] * c2, up[m] * s2);
        match noise.sector {
            NoiseSector::Signal => {
                ps += nh * c2;
                pi += nl * s2;
            }
            NoiseSector::Idler => {
                ps += nl * s2;
                pi += nh * c2;
            }
        }
        sig.push((Outcome::Click { arm: Arm::Signal, mode: m }, ps));
        idl.push((Outcome::Click { arm: Arm::Idler, mode: m }, pi));
    }
    check_perturbative(sig.iter().map(|c| c.1).sum::<f64>(), "signal")?;
    check_perturbative(idl.iter().map(|c| c.1).sum::<f64>(), "idler")?;
    Ok(TwinBeamOutput {
        signal: CountDistribution::with_reference(Outcome::NoClick, sig, &["gamma_down"])?,
        idler: CountDistribution::with_reference(Outcome::NoClick, idl, &["gamma_up"])?,
    })
}

/// Number-resolved readout of a structured Fock probe: each mode moves to n−1 or n+1.
pub fn fock_probe(
    gamma_up: &MutualCoherenceMatrix,
    gamma_down: &MutualCoherenceMatrix,
    n: &[usize],
    noise: &NoiseConfig,
) -> Result<CountDistribution> {
    let k = check_rates(gamma_up, gamma_down)?;
    noise.validate()?;
    if noise.sector == NoiseSector::Idler && !noise.is_zero() {
        return Err(Error::Unsupported("Fock probes have no idler sector".into()));
    }
    let n = broadcast(n, k, "fock_n")?;
    let (up, down) = (gamma_up.diag(), gamma_down.diag());
    let (nl, nh) = noise.rates();
    let mut clicks = Vec::with_capacity(2 * k);
    for m in 0..k {
        let nf = n[m] as f64;
        if n[m] > 0 {
            clicks.push((Outcome::Number { mode: m, n: n[m] - 1 }, nf * (up[m] + nl)));
        }
        clicks.push((Outcome::Number { mode: m, n: n[m] + 1 }, (nf + 1.0) * (down[m] + nh)));
    }
    check_perturbative(clicks.iter().map(|c| c.1).sum(), "Fock probe")?;
    CountDistribution::with_reference(Outcome::NoClick, clicks, &["gamma_up", "gamma_down"])
}

/// Single-mode squeezing echo: absorption and emission land in the same single-excitation outcome.
pub fn single_mode_sqz_echo(
    gamma_up: &MutualCoherenceMatrix,
    gamma_down: &MutualCoherenceMatrix,
    r: &[f64],
    noise: &NoiseConfig,
) -> Result<CountDistribution> {
    let k = check_rates(gamma_up, gamma_down)?;
    noise.validate()?;
    let r = broadcast(r, k, "squeeze_r")?;
    let (up, down) = (gamma_up.diag(), gamma_down.diag());
    let (nl, nh) = noise.rates();
    let clicks: Vec<(Outcome, f64)> = (0..k)
        .map(|m| {
            let (c2, s2) = (r[m].cosh().powi(2), r[m].sinh().powi(2));
            (Outcome::Click { arm: Arm::Probe, mode: m }, (up[m] + nl) * s2 + (down[m] + nh) * c2)
        })
        .collect();
    check_perturbative(clicks.iter().map(|c| c.1).sum(), "squeezed-vacuum echo")?;
    CountDistribution::with_reference(Outcome::NoClick, clicks, &["gamma_up", "gamma_down"])
}

/// Passive photon counting: emission only.
pub fn vacuum_probe(gamma_down: &MutualCoherenceMatrix, noise: &NoiseConfig) -> Result<CountDistribution> {
    noise.validate()?;
    let (_, nh) = noise.rates();
    let clicks: Vec<(Outcome, f64)> = gamma_down
        .diag()
        .iter()
        .enumerate()
        .map(|(m, g)| (Outcome::Click { arm: Arm::Signal, mode: m }, g + nh))
        .collect();
    check_perturbative(clicks.iter().map(|c| c.1).sum(), "passive")?;
    CountDistribution::with_reference(Outcome::NoClick, clicks, &["gamma_down"])
}

/// Click distribution of `probe` for given absorption/emission matrices.
pub fn probe_distribution(
    gamma_up: &MutualCoherenceMatrix,
    gamma_down: &MutualCoherenceMatrix,
    probe: &ProbeConfig,
    noise: &NoiseConfig,
) -> Result<CountDistribution> {
    probe.validate(gamma_down.len())?;
    match probe {
        ProbeConfig::TwinBeamEcho { squeeze_r } => twin_beam_echo(gamma_up, gamma_down, squeeze_r, noise)?.joint(),
        ProbeConfig::Fock { fock_n } => fock_probe(gamma_up, gamma_down, fock_n, noise),
        ProbeConfig::SingleModeSqzEcho { squeeze_r } => single_mode_sqz_echo(gamma_up, gamma_down, squeeze_r, noise),
        ProbeConfig::Vacuum => vacuum_probe(gamma_down, noise),
        ProbeConfig::Coherent { .. } => Err(Error::Unsupported(
            "coherent probes have no first-order click model; use the Gaussian mean-term bound".into(),
        )),
    }
}

/// Photon counting in a structured mode basis (SPADE), with an optional quantum probe.
pub fn spade(scene: &Scene, basis: &ModeBasis, probe: &ProbeConfig, noise: &NoiseConfig) -> Result<CountDistribution> {
    if !matches!(basis, ModeBasis::HermiteGauss { .. }) {
        return Err(Error::Unsupported("mode sorting requires a Hermite–Gauss basis".into()));
    }
    if !scene.centroid_known {
        return Err(Error::Unsupported("misaligned (unknown-centroid) mode sorting".into()));
    }
    let up = absorption_matrix(scene, basis)?;
    let down = coherence_matrix(scene, basis)?;
    probe_distribution(&up, &down, probe, noise)
}

/// Per-photon intensity distribution over pixels, normalised on the grid.
pub fn direct_detection(scene: &Scene, grid: &PixelGrid) -> Result<CountDistribution> {
    scene.validate()?;
    let per_sigma = grid.pixels_per_sigma(scene.sigma());
    static WARNED: AtomicBool = AtomicBool::new(false);
    if per_sigma < 20.0 - 1e-9 && !WARNED.swap(true, Ordering::Relaxed) {
        warn!("pixel grid has {per_sigma:.1} pixels per σ (< 20)");
    }
    let w = scene.pixel_intensities(grid);
    let deficit = 1.0 - w.iter().sum::<f64>();
    if deficit > 1e-3 {
        warn!("pixel grid captures only {:.4} of the image (deficit {deficit:.2e})", 1.0 - deficit);
    }
    let outcomes = (0..grid.len()).map(Outcome::Pixel).collect();
    CountDistribution::from_weights(outcomes, w, &["separation"])
}

/// Per-trial pixel distribution: ε spread over pixels plus the no-click reference.
pub fn direct_detection_trial(scene: &Scene, grid: &PixelGrid) -> Result<CountDistribution> {
    let per_photon = direct_detection(scene, grid)?;
    let clicks = per_photon.iter().map(|(o, p)| (o.clone(), scene.emission * p)).collect();
    CountDistribution::with_reference(Outcome::NoClick, clicks, &["separation"])
}

/// Pixelwise echo images with conjugate-point pairing u ↔ −u.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoImages {
    pub signal: Vec<f64>,
    pub idler: Vec<f64>,
}

/// `r_u`, `gamma_up`, `gamma_down` are per-pixel on a grid symmetric about 0,
/// so pixel j is paired with pixel n−1−j.
pub fn conventional_echo(r_u: &[f64], gamma_up: &[f64], gamma_down: &[f64]) -> Result<EchoImages> {
    let n = gamma_down.len();
    if gamma_up.len() != n {
        return Err(Error::Dimension("absorption and emission images differ in size".into()));
    }
    let r = broadcast(r_u, n, "squeeze_r")?;
    let signal = (0..n).map(|j| r[j].cosh().powi(2) * gamma_down[j]).collect();
    let idler = (0..n).map(|j| r[n - 1 - j].sinh().powi(2) * gamma_up[n - 1 - j]).collect();
    Ok(EchoImages { signal, idler })
}

/// Echo images of a scene on a symmetric pixel grid.
pub fn conventional_echo_scene(scene: &Scene, grid: &PixelGrid, r_u: &[f64]) -> Result<EchoImages> {
    let lo = grid.edges[0];
    let hi = grid.edges[grid.edges.len() - 1];
    if (lo + hi).abs() > 1e-9 * (hi - lo) {
        return Err(Error::param("grid", "conjugate-point pairing needs a grid symmetric about 0"));
    }
    let shape = scene.pixel_intensities(grid);
    let down: Vec<f64> = shape.iter().map(|p| scene.emission * p).collect();
    let up: Vec<f64> = shape.iter().map(|p| scene.total_absorption() * p).collect();
    conventional_echo(r_u, &up, &down)
}

/// Balanced (Γ↑ = Γ↓) random-displacement estimation with a twin-beam echo.
pub fn displacement_echo(gamma_up: f64, gamma_down: f64, r: f64) -> Result<CountDistribution> {
    if !(gamma_up >= 0.0 && gamma_down >= 0.0) {
        return Err(Error::param("gamma", "rates must be ≥ 0"));
    }
    if (gamma_up - gamma_down).abs() > 1e-12 * gamma_up.max(gamma_down) {
        return Err(Error::param("gamma", "displacement echo needs balanced rates; use twin_beam_echo"));
    }
    let g = gamma_down;
    let clicks = vec![
        (Outcome::Click { arm: Arm::Signal, mode: 0 }, g * r.cosh().powi(2)),
        (Outcome::Click { arm: Arm::Idler, mode: 0 }, g * r.sinh().powi(2)),
    ];
    check_perturbative(g * (r.cosh().powi(2) + r.sinh().powi(2)), "displacement echo")?;
    CountDistribution::with_reference(Outcome::NoClick, clicks, &["gamma"])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseProbe {
    TwinBeamEcho,
    Fock,
    SqueezedVacuum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    Loss,
    Heating,
    Additive,
}

pub const NOISE_PROBES: [NoiseProbe; 3] = [NoiseProbe::TwinBeamEcho, NoiseProbe::Fock, NoiseProbe::SqueezedVacuum];
pub const NOISE_SOURCES: [NoiseSource; 3] = [NoiseSource::Loss, NoiseSource::Heating, NoiseSource::Additive];

/// First-order sensitivity of the absorption and fluorescence observables to one noise source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCell {
    pub probe: NoiseProbe,
    pub source: NoiseSource,
    pub d_absorption: f64,
    pub d_fluorescence: f64,
}

impl NoiseCell {
    pub fn absorption_robust(&self) -> bool {
        self.d_absorption.abs() < 1e-12
    }

    pub fn fluorescence_robust(&self) -> bool {
        self.d_fluorescence.abs() < 1e-12
    }
}

/// Single-mode setting for the noise study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseStudy {
    pub gamma_up: f64,
    pub gamma_down: f64,
    pub squeeze_r: f64,
    pub fock_n: usize,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_step() -> f64 {
    1e-3
}

impl Default for NoiseStudy {
    fn default() -> Self {
        NoiseStudy { gamma_up: 0.01, gamma_down: 0.01, squeeze_r: 1.0, fock_n: 1, step: default_step() }
    }
}

/// (absorption observable, fluorescence observable) of a probe.
fn observables(study: &NoiseStudy, probe: NoiseProbe, noise: &NoiseConfig) -> Result<(f64, f64)> {
    let up = MutualCoherenceMatrix::diagonal(&[study.gamma_up]);
    let down = MutualCoherenceMatrix::diagonal(&[study.gamma_down]);
    Ok(match probe {
        NoiseProbe::TwinBeamEcho => {
            let out = twin_beam_echo(&up, &down, &[study.squeeze_r], noise)?;
            (out.idler.click_probability(), out.signal.click_probability())
        }
        NoiseProbe::Fock => {
            let d = fock_probe(&up, &down, &[study.fock_n], noise)?;
            let n = study.fock_n;
            let lower = if n > 0 { d.probability(&Outcome::Number { mode: 0, n: n - 1 }) } else { 0.0 };
            (lower, d.probability(&Outcome::Number { mode: 0, n: n + 1 }))
        }
        NoiseProbe::SqueezedVacuum => {
            let p = single_mode_sqz_echo(&up, &down, &[study.squeeze_r], noise)?.click_probability();
            (p, p)
        }
    })
}

/// 3 probes × 3 noise sources matrix of forward-difference derivatives.
pub fn noise_derivative_matrix(study: &NoiseStudy) -> Result<Vec<NoiseCell>> {
    if !(study.step > 0.0) {
        return Err(Error::param("step", "must be positive"));
    }
    let mut cells = Vec::with_capacity(9);
    for probe in NOISE_PROBES {
        let base = observables(study, probe, &NoiseConfig::none())?;
        for source in NOISE_SOURCES {
            let mut noise = NoiseConfig::none();
            match source {
                NoiseSource::Loss => noise.kappa_loss = study.step,
                NoiseSource::Heating => noise.kappa_heat = study.step,
                NoiseSource::Additive => noise.kappa_agn = study.step,
            }
            let shifted = observables(study, probe, &noise)?;
            cells.push(NoiseCell {
                probe,
                source,
                d_absorption: (shifted.0 - base.0) / study.step,
                d_fluorescence: (shifted.1 - base.1) / study.step,
            });
        }
    }
    Ok(cells)
}
