//! Classical and quantum Fisher information: finite-difference FI of count
//! distributions, closed-form reference bounds, and the task/probe bound grid.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::distribution::CountDistribution;
use crate::error::{Error, Result};
use crate::fock::{agn_channel, amp_kraus, loss_kraus, qfi_numeric, FockDensityMatrix, KrausChannel};
use crate::linalg::{sym_eigenvalues, RMatrix};
use crate::modes::{parity_eigenvalues, ModeBasis, MutualCoherenceMatrix, Scene};
use crate::protocols::{displacement_echo, fock_probe, spade, twin_beam_echo, NoiseConfig, ProbeConfig};

/// Outcomes below this probability are excluded from FI sums.
pub const MIN_PROBABILITY: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMethod {
    Analytic,
    FiniteDifference,
    NumericQfi,
}

/// Which outcomes enter the FI sum.
///
/// `LeadingOrder` drops the reference (no-click) outcome, whose contribution is
/// higher order in the rates; it matches the first-order closed forms exactly.
/// `Full` sums over every outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherConvention {
    #[default]
    LeadingOrder,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub value: f64,
    pub method: FisherMethod,
    pub error_estimate: f64,
    /// Probability mass of outcomes excluded as below [`MIN_PROBABILITY`].
    pub dropped_mass: f64,
}

impl FisherResult {
    pub fn analytic(value: f64) -> Self {
        FisherResult { value, method: FisherMethod::Analytic, error_estimate: 0.0, dropped_mass: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FiOptions {
    pub convention: FisherConvention,
    /// Step override; default `max(1e−3|θ|, 1e−6)`.
    pub dtheta: Option<f64>,
}

impl FiOptions {
    pub fn full() -> Self {
        FiOptions { convention: FisherConvention::Full, dtheta: None }
    }
}

fn default_step(theta: f64) -> f64 {
    (1e-3 * theta.abs()).max(1e-6)
}

fn same_support(a: &CountDistribution, b: &CountDistribution) -> Result<()> {
    if a.outcomes != b.outcomes {
        return Err(Error::Numerical("outcome set changes with the parameter".into()));
    }
    Ok(())
}

/// Central-difference derivative of every outcome probability, Richardson extrapolated.
/// Returns (D_richardson, D_h).
fn derivatives(
    dist_fn: &dyn Fn(f64) -> Result<CountDistribution>,
    theta: f64,
    h: f64,
    centre: &CountDistribution,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (p1, m1) = (dist_fn(theta + h)?, dist_fn(theta - h)?);
    let (p2, m2) = (dist_fn(theta + 2.0 * h)?, dist_fn(theta - 2.0 * h)?);
    for d in [&p1, &m1, &p2, &m2] {
        same_support(centre, d)?;
    }
    let n = centre.len();
    let dh: Vec<f64> = (0..n).map(|i| (p1.probabilities[i] - m1.probabilities[i]) / (2.0 * h)).collect();
    let d2h: Vec<f64> = (0..n).map(|i| (p2.probabilities[i] - m2.probabilities[i]) / (4.0 * h)).collect();
    let rich = (0..n).map(|i| (4.0 * dh[i] - d2h[i]) / 3.0).collect();
    Ok((rich, dh))
}

fn included(centre: &CountDistribution, convention: FisherConvention) -> (Vec<usize>, f64) {
    let mut keep = Vec::new();
    let mut dropped = 0.0;
    for (i, &p) in centre.probabilities.iter().enumerate() {
        if convention == FisherConvention::LeadingOrder && Some(i) == centre.reference {
            continue;
        }
        if p < MIN_PROBABILITY {
            dropped += p;
            continue;
        }
        keep.push(i);
    }
    (keep, dropped)
}

/// Per-trial classical FI `Σ (∂p)²/p` of a one-parameter family.
pub fn classical_fi(
    dist_fn: impl Fn(f64) -> Result<CountDistribution>,
    theta: f64,
    opts: FiOptions,
) -> Result<FisherResult> {
    let h = opts.dtheta.unwrap_or_else(|| default_step(theta));
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("dtheta", "must be positive"));
    }
    let centre = dist_fn(theta)?;
    let (rich, dh) = derivatives(&dist_fn, theta, h, &centre)?;
    let (keep, dropped) = included(&centre, opts.convention);
    let fi = |d: &[f64]| keep.iter().map(|&i| d[i] * d[i] / centre.probabilities[i]).sum::<f64>();
    let value = fi(&rich);
    Ok(FisherResult {
        value,
        method: FisherMethod::FiniteDifference,
        error_estimate: (value - fi(&dh)).abs(),
        dropped_mass: dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub matrix: RMatrix,
    pub dropped_mass: f64,
}

impl FisherMatrix {
    /// λ_max / λ_min; infinite when the smallest eigenvalue is not positive.
    pub fn condition_number(&self) -> f64 {
        let ev = sym_eigenvalues(&self.matrix);
        let (lo, hi) = (ev[0], ev[ev.len() - 1]);
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Number of eigenvalues above `rel_tol × λ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let ev = sym_eigenvalues(&self.matrix);
        let hi = ev.iter().copied().fold(0.0, f64::max);
        ev.iter().filter(|l| **l > rel_tol * hi).count()
    }
}

/// Multiparameter FI `F_ij = Σ ∂_i p ∂_j p / p`.
pub fn fisher_matrix(
    dist_fn: impl Fn(&[f64]) -> Result<CountDistribution>,
    theta: &[f64],
    opts: FiOptions,
) -> Result<FisherMatrix> {
    let centre = dist_fn(theta)?;
    let (keep, dropped) = included(&centre, opts.convention);
    let mut grads = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = opts.dtheta.unwrap_or_else(|| default_step(theta[i]));
        let along = |t: f64| {
            let mut th = theta.to_vec();
            th[i] = t;
            dist_fn(&th)
        };
        grads.push(derivatives(&along, theta[i], h, &centre)?.0);
    }
    let n = theta.len();
    let m = RMatrix::from_fn(n, n, |a, b| {
        keep.iter().map(|&x| grads[a][x] * grads[b][x] / centre.probabilities[x]).sum()
    });
    Ok(FisherMatrix { matrix: (&m + m.transpose()) * 0.5, dropped_mass: dropped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Loss,
    Amp,
    Agn,
    SubdiffFluor,
    SubdiffAbs,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Loss, Task::Amp, Task::Agn, Task::SubdiffFluor, Task::SubdiffAbs];

    pub fn label(&self) -> &'static str {
        match self {
            Task::Loss => "loss",
            Task::Amp => "amp",
            Task::Agn => "agn",
            Task::SubdiffFluor => "subdiff_fluor",
            Task::SubdiffAbs => "subdiff_abs",
        }
    }

    /// Name of the estimated parameter.
    pub fn parameter(&self) -> &'static str {
        match self {
            Task::Loss => "gamma_loss",
            Task::Amp => "gamma_amp",
            Task::Agn => "gamma_agn",
            Task::SubdiffFluor | Task::SubdiffAbs => "separation",
        }
    }

    pub fn is_imaging(&self) -> bool {
        matches!(self, Task::SubdiffFluor | Task::SubdiffAbs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeClass {
    Optimal,
    Coherent,
    Vacuum,
}

impl ProbeClass {
    pub fn label(&self) -> &'static str {
        match self {
            ProbeClass::Optimal => "optimal",
            ProbeClass::Coherent => "coherent",
            ProbeClass::Vacuum => "vacuum",
        }
    }
}

/// Task/probe pairs with a tabulated perturbative bound.
pub const TABLE1_ROWS: [(Task, ProbeClass); 11] = [
    (Task::Loss, ProbeClass::Optimal),
    (Task::Loss, ProbeClass::Coherent),
    (Task::Amp, ProbeClass::Optimal),
    (Task::Amp, ProbeClass::Coherent),
    (Task::Agn, ProbeClass::Optimal),
    (Task::Agn, ProbeClass::Coherent),
    (Task::SubdiffFluor, ProbeClass::Optimal),
    (Task::SubdiffFluor, ProbeClass::Vacuum),
    (Task::SubdiffFluor, ProbeClass::Coherent),
    (Task::SubdiffAbs, ProbeClass::Optimal),
    (Task::SubdiffAbs, ProbeClass::Coherent),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Params {
    /// Mean probe photon number N_S.
    pub n_s: f64,
    /// γ for channel tasks; ε (fluorescence) or γ↑ (absorption) for imaging tasks.
    pub rate: f64,
    /// Separation d/σ for imaging tasks.
    pub separation: f64,
}

impl Table1Params {
    pub fn new(n_s: f64, rate: f64) -> Self {
        Table1Params { n_s, rate, separation: 0.1 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.n_s >= 0.0 && self.n_s.is_finite()) {
            return Err(Error::param("n_s", "must be ≥ 0"));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::param("rate", "must be positive"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::param("separation", "must be positive"));
        }
        Ok(())
    }
}

/// Perturbative closed-form bound for a task/probe pair.
pub fn table1_reference(task: Task, probe: ProbeClass, p: &Table1Params) -> Result<f64> {
    p.validate()?;
    let (n, g, s) = (p.n_s, p.rate, p.separation);
    Ok(match (task, probe) {
        (Task::Loss, ProbeClass::Optimal) => n / g,
        (Task::Loss, ProbeClass::Coherent) => (1.0 - g) * n,
        (Task::Amp, ProbeClass::Optimal) => (1.0 + n) / g,
        (Task::Amp, ProbeClass::Coherent) => 1.0 / g + (1.0 - g) * n,
        (Task::Agn, ProbeClass::Optimal) => (1.0 + 2.0 * n) / g,
        (Task::Agn, ProbeClass::Coherent) => 1.0 / g,
        (Task::SubdiffFluor, ProbeClass::Optimal) => g * (1.0 + n) / 2.0,
        (Task::SubdiffFluor, ProbeClass::Vacuum) => g / 2.0,
        (Task::SubdiffFluor, ProbeClass::Coherent) => g / 2.0 + n * g * g * s * s / 16.0,
        (Task::SubdiffAbs, ProbeClass::Optimal) => n * g,
        (Task::SubdiffAbs, ProbeClass::Coherent) => n * g * g * s * s / 4.0,
        _ => {
            return Err(Error::Unsupported(format!(
                "no tabulated bound for {} with a {} probe",
                task.label(),
                probe.label()
            )))
        }
    })
}

/// Non-perturbative QFI of a number-state probe for pure loss (η = e^{−γ}) or gain (G = e^{γ}).
pub fn exact_channel_qfi(task: Task, gamma: f64, n_s: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::param("gamma", "must be positive"));
    }
    if !(n_s >= 0.0) {
        return Err(Error::param("n_s", "must be ≥ 0"));
    }
    match task {
        Task::Loss => Ok(n_s * (-gamma).exp() / (1.0 - (-gamma).exp())),
        Task::Amp => Ok((1.0 + n_s) * gamma.exp() / (gamma.exp() - 1.0)),
        _ => Err(Error::Unsupported(format!("no exact channel QFI for {}", task.label()))),
    }
}

/// Exact coherent-state QFIs for loss, gain and additive noise, with |α|² = `n_s`.
pub fn coherent_baselines(task: Task, gamma: f64, n_s: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::param("gamma", "must be positive"));
    }
    let e = gamma.exp();
    match task {
        Task::Loss => Ok((-gamma).exp() * n_s),
        Task::Amp => Ok(e / (e - 1.0) + e * n_s / (2.0 * e - 1.0)),
        Task::Agn => Ok(1.0 / (gamma * (1.0 + gamma))),
        _ => Err(Error::Unsupported(format!("no coherent baseline for {}", task.label()))),
    }
}

/// Mean-displacement term `2 ∂μᵀ Σ⁻¹ ∂μ` of a Gaussian state's QFI.
pub fn gaussian_mean_qfi(dmu: &DVector<f64>, sigma: &RMatrix) -> Result<f64> {
    if sigma.nrows() != dmu.len() || sigma.ncols() != dmu.len() {
        return Err(Error::Dimension("mean derivative and covariance sizes differ".into()));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositive { context: "covariance in mean QFI".into(), min_eigenvalue: sym_eigenvalues(sigma)[0] })?;
    Ok(2.0 * dmu.dot(&chol.solve(dmu)))
}

fn single_mode(g: f64) -> MutualCoherenceMatrix {
    MutualCoherenceMatrix::diagonal(&[g])
}

fn squeeze_for(n_s: f64) -> f64 {
    n_s.sqrt().asinh()
}

/// HG truncation used for imaging rows.
pub const TABLE1_TRUNCATION: usize = 12;

fn imaging_scene(task: Task, s: f64, rate: f64) -> Result<Scene> {
    match task {
        Task::SubdiffFluor => Scene::two_point(s, 1.0, rate, 0.0),
        _ => Scene::two_point(s, 1.0, 0.0, rate),
    }
}

/// Classical FI achieved by a first-order protocol: twin-beam echo, or a Fock probe
/// when `n_fock` is given. `n_s` sets the twin-beam squeezing via N_S = sinh²r.
pub fn protocol_fi(task: Task, p: &Table1Params, n_fock: Option<usize>) -> Result<f64> {
    p.validate()?;
    let none = NoiseConfig::none();
    let r = squeeze_for(p.n_s);
    let opts = FiOptions::default();
    let fi = match (task, n_fock) {
        (Task::Loss, None) => classical_fi(|g| Ok(twin_beam_echo(&single_mode(g), &single_mode(0.0), &[r], &none)?.idler), p.rate, opts),
        (Task::Amp, None) => classical_fi(|g| Ok(twin_beam_echo(&single_mode(0.0), &single_mode(g), &[r], &none)?.signal), p.rate, opts),
        (Task::Agn, None) => classical_fi(|g| displacement_echo(g, g, r), p.rate, opts),
        (Task::Loss, Some(n)) => classical_fi(|g| fock_probe(&single_mode(g), &single_mode(0.0), &[n], &none), p.rate, opts),
        (Task::Amp, Some(n)) => classical_fi(|g| fock_probe(&single_mode(0.0), &single_mode(g), &[n], &none), p.rate, opts),
        (Task::Agn, Some(n)) => classical_fi(|g| fock_probe(&single_mode(g), &single_mode(g), &[n], &none), p.rate, opts),
        (Task::SubdiffFluor | Task::SubdiffAbs, _) => {
            let probe = match n_fock {
                Some(n) => ProbeConfig::fock(n),
                None => ProbeConfig::twin_beam(r),
            };
            let basis = ModeBasis::hermite_gauss(1.0, TABLE1_TRUNCATION);
            classical_fi(|s| spade(&imaging_scene(task, s, p.rate)?, &basis, &probe, &none), p.separation, opts)
        }
    }?;
    Ok(fi.value)
}

/// Coherent-probe value: Gaussian mean term plus the vacuum (N_S = 0) protocol term.
pub fn coherent_fi(task: Task, p: &Table1Params) -> Result<f64> {
    p.validate()?;
    let (n, g, s) = (p.n_s, p.rate, p.separation);
    let mu0 = (2.0 * n).sqrt();
    let mu = |scale_dot: f64| DVector::from_vec(vec![scale_dot * mu0, 0.0]);
    let eye = RMatrix::identity(2, 2);
    let vacuum = Table1Params { n_s: 0.0, ..*p };
    let mean = match task {
        Task::Loss => gaussian_mean_qfi(&mu(-0.5 * (-g / 2.0).exp()), &eye)?,
        Task::Amp => {
            let gain = g.exp();
            gaussian_mean_qfi(&mu(0.5 * (g / 2.0).exp()), &(eye * (2.0 * gain - 1.0)))?
        }
        Task::Agn => 0.0,
        Task::SubdiffFluor => {
            let minus = parity_eigenvalues(s, g).1;
            let d_minus = g * s * (-s * s / 4.0).exp() / 4.0;
            let gain = 1.0 + minus;
            gaussian_mean_qfi(&mu(d_minus / (2.0 * gain.sqrt())), &(eye * (2.0 * gain - 1.0)))?
        }
        Task::SubdiffAbs => {
            let total = 2.0 * g;
            let minus = parity_eigenvalues(s, total).1;
            let d_minus = total * s * (-s * s / 4.0).exp() / 4.0;
            let eta = 1.0 - minus;
            gaussian_mean_qfi(&mu(-d_minus / (2.0 * eta.sqrt())), &eye)?
        }
    };
    let vac = match task {
        Task::Loss | Task::SubdiffAbs => 0.0,
        _ => protocol_fi(task, &vacuum, None)?,
    };
    Ok(mean + vac)
}

fn probe_state(class: ProbeClass, n_s: f64, cutoff: usize) -> Result<FockDensityMatrix> {
    match class {
        ProbeClass::Optimal => FockDensityMatrix::number(&[n_s.round() as usize], cutoff),
        ProbeClass::Coherent => FockDensityMatrix::coherent(&[Complex64::new(n_s.sqrt(), 0.0)], cutoff),
        ProbeClass::Vacuum => FockDensityMatrix::vacuum(1, cutoff),
    }
}

fn oracle_cutoff(class: ProbeClass, n_s: f64) -> usize {
    match class {
        ProbeClass::Coherent => (n_s + 12.0 * n_s.sqrt() + 30.0).ceil() as usize,
        _ => n_s.round() as usize + 24,
    }
}

/// Numerical QFI of a single-mode Fock (optimal), coherent or vacuum probe through
/// the exact channel. Imaging tasks use the antisymmetric parity mode with rate Γ₋(s).
pub fn oracle_qfi(task: Task, class: ProbeClass, p: &Table1Params) -> Result<FisherResult> {
    p.validate()?;
    let cutoff = oracle_cutoff(class, p.n_s);
    let input = probe_state(class, p.n_s, cutoff)?;
    let channel = |t: f64| -> Result<KrausChannel> {
        match task {
            Task::Loss => loss_kraus((-t).exp(), cutoff),
            Task::Amp => amp_kraus(t.exp(), cutoff),
            Task::Agn => agn_channel(t, cutoff),
            Task::SubdiffFluor => amp_kraus(parity_eigenvalues(t, p.rate).1.exp(), cutoff),
            Task::SubdiffAbs => loss_kraus((-parity_eigenvalues(t, 2.0 * p.rate).1).exp(), cutoff),
        }
    };
    let (theta, step) = if task.is_imaging() { (p.separation, Some(0.01 * p.separation)) } else { (p.rate, None) };
    let q = qfi_numeric(|t| channel(t)?.apply(&input, 0), theta, step)?;
    Ok(FisherResult { value: q.value, method: FisherMethod::NumericQfi, error_estimate: q.error, dropped_mass: input.leakage() })
}

/// One task/probe entry of the bound grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub task: Task,
    pub probe: ProbeClass,
    pub n_s: f64,
    pub rate: f64,
    pub separation: f64,
    pub reference: f64,
    /// Twin-beam/displacement echo FI (optimal and vacuum rows) or mean + vacuum term (coherent rows).
    pub achieved: f64,
    /// Fock-probe FI for optimal rows with integer N_S.
    pub achieved_fock: Option<f64>,
    pub oracle_qfi: Option<f64>,
    pub oracle_error: Option<f64>,
}

impl Table1Row {
    pub fn ratio(&self) -> f64 {
        self.achieved / self.reference
    }

    pub fn fock_ratio(&self) -> Option<f64> {
        self.achieved_fock.map(|f| f / self.reference)
    }
}

pub fn table1_row(task: Task, probe: ProbeClass, p: &Table1Params, with_oracle: bool) -> Result<Table1Row> {
    let reference = table1_reference(task, probe, p)?;
    let integer_ns = (p.n_s - p.n_s.round()).abs() < 1e-12;
    let (achieved, achieved_fock) = match probe {
        ProbeClass::Optimal => (
            protocol_fi(task, p, None)?,
            if integer_ns { Some(protocol_fi(task, p, Some(p.n_s.round() as usize))?) } else { None },
        ),
        ProbeClass::Vacuum => (protocol_fi(task, &Table1Params { n_s: 0.0, ..*p }, None)?, None),
        ProbeClass::Coherent => (coherent_fi(task, p)?, None),
    };
    let oracle = if with_oracle && (probe != ProbeClass::Optimal || integer_ns) {
        Some(oracle_qfi(task, probe, p)?)
    } else {
        None
    };
    Ok(Table1Row {
        task,
        probe,
        n_s: p.n_s,
        rate: p.rate,
        separation: p.separation,
        reference,
        achieved,
        achieved_fock,
        oracle_qfi: oracle.map(|o| o.value),
        oracle_error: oracle.map(|o| o.error_estimate),
    })
}

/// Every tabulated task/probe pair for each (N_S, rate) combination.
pub fn table1_grid(n_s: &[f64], rates: &[f64], separation: f64, with_oracle: bool) -> Result<Vec<Table1Row>> {
    let mut rows = Vec::new();
    for &n in n_s {
        for &g in rates {
            let p = Table1Params { n_s: n, rate: g, separation };
            for (task, probe) in TABLE1_ROWS {
                rows.push(table1_row(task, probe, &p, with_oracle)?);
            }
        }
    }
    Ok(rows)
}
