//! Gaussian covariance engine: two-mode squeezers, interaction channels and the
//! twin-beam echo in the covariance-matrix picture.
//!
//! Conventions: quadratures are interleaved `(q1, p1, q2, p2, …)`, the vacuum
//! covariance is the identity, and in echo layouts the idler modes occupy the
//! first block with the signal modes in the second.

use log::warn;
use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{
    asymmetry, combine, max_abs, min_herm_eigenvalue, min_sym_eigenvalue, omega, sym_function,
    sym_norm, CMatrix, RMatrix,
};
use crate::modes::MutualCoherenceMatrix;

pub const SYMPLECTIC_TOL: f64 = 1e-10;
pub const PHYSICALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticMatrix {
    entries: RMatrix,
    modes: usize,
}

impl SymplecticMatrix {
    pub fn new(entries: RMatrix) -> Result<Self> {
        let n = entries.nrows();
        if n != entries.ncols() || !n.is_multiple_of(2) {
            return Err(Error::Dimension(format!("symplectic matrix must be 2M×2M, got {}×{}", n, entries.ncols())));
        }
        let s = SymplecticMatrix { entries, modes: n / 2 };
        let dev = s.symplectic_deviation();
        if dev > SYMPLECTIC_TOL * (1.0 + max_abs(&s.entries).powi(2)) {
            return Err(Error::param("entries", format!("S Ω Sᵀ deviates from Ω by {dev:e}")));
        }
        Ok(s)
    }

    pub fn identity(modes: usize) -> Self {
        SymplecticMatrix { entries: RMatrix::identity(2 * modes, 2 * modes), modes }
    }

    pub fn entries(&self) -> &RMatrix {
        &self.entries
    }

    pub fn mode_count(&self) -> usize {
        self.modes
    }

    /// max |S Ω Sᵀ − Ω|
    pub fn symplectic_deviation(&self) -> f64 {
        let w = omega(self.modes);
        max_abs(&(&self.entries * &w * self.entries.transpose() - w))
    }

    /// S⁻¹ = −Ω Sᵀ Ω
    pub fn inverse(&self) -> Self {
        let w = omega(self.modes);
        SymplecticMatrix { entries: -(&w * self.entries.transpose() * &w), modes: self.modes }
    }

    pub fn compose(&self, other: &SymplecticMatrix) -> Result<Self> {
        if self.modes != other.modes {
            return Err(Error::Dimension("composing symplectic matrices of different size".into()));
        }
        Ok(SymplecticMatrix { entries: &self.entries * &other.entries, modes: self.modes })
    }

    pub fn as_channel(&self) -> GaussianChannel {
        GaussianChannel { x: self.entries.clone(), y: RMatrix::zeros(2 * self.modes, 2 * self.modes) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    pub mean: DVector<f64>,
    pub cov: RMatrix,
}

impl CovarianceState {
    pub fn new(mean: DVector<f64>, cov: RMatrix) -> Result<Self> {
        let n = cov.nrows();
        if n != cov.ncols() || !n.is_multiple_of(2) || mean.len() != n {
            return Err(Error::Dimension(format!(
                "mean length {} and covariance {}×{} are inconsistent",
                mean.len(),
                n,
                cov.ncols()
            )));
        }
        let asym = asymmetry(&cov);
        if asym > 1e-12 * (1.0 + max_abs(&cov)) {
            return Err(Error::param("cov", format!("not symmetric (deviation {asym:e})")));
        }
        let st = CovarianceState { mean, cov };
        let min = st.physicality();
        if min < -PHYSICALITY_TOL * (1.0 + max_abs(&st.cov)) {
            return Err(Error::NotPositive { context: "cov + iΩ".into(), min_eigenvalue: min });
        }
        Ok(st)
    }

    pub fn vacuum(modes: usize) -> Self {
        CovarianceState { mean: DVector::zeros(2 * modes), cov: RMatrix::identity(2 * modes, 2 * modes) }
    }

    /// Product of coherent states; q = √2 Re α, p = √2 Im α.
    pub fn coherent(alphas: &[Complex64]) -> Self {
        let mut st = Self::vacuum(alphas.len());
        for (k, a) in alphas.iter().enumerate() {
            st.mean[2 * k] = std::f64::consts::SQRT_2 * a.re;
            st.mean[2 * k + 1] = std::f64::consts::SQRT_2 * a.im;
        }
        st
    }

    /// Product of thermal states with the given mean photon numbers.
    pub fn thermal(nbar: &[f64]) -> Self {
        let mut st = Self::vacuum(nbar.len());
        for (k, n) in nbar.iter().enumerate() {
            st.cov[(2 * k, 2 * k)] = 1.0 + 2.0 * n;
            st.cov[(2 * k + 1, 2 * k + 1)] = 1.0 + 2.0 * n;
        }
        st
    }

    pub fn mode_count(&self) -> usize {
        self.mean.len() / 2
    }

    /// Smallest eigenvalue of cov + iΩ.
    pub fn physicality(&self) -> f64 {
        let w = omega(self.mode_count());
        min_herm_eigenvalue(&combine(&self.cov, &w))
    }

    /// Mean photon number of each mode.
    pub fn photon_numbers(&self) -> Vec<f64> {
        (0..self.mode_count())
            .map(|k| {
                let q = self.mean[2 * k];
                let p = self.mean[2 * k + 1];
                (self.cov[(2 * k, 2 * k)] + self.cov[(2 * k + 1, 2 * k + 1)] - 2.0) / 4.0 + (q * q + p * p) / 2.0
            })
            .collect()
    }
}

/// Σ → X Σ Xᵀ + Y, μ → X μ.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianChannel {
    pub x: RMatrix,
    pub y: RMatrix,
}

impl GaussianChannel {
    pub fn new(x: RMatrix, y: RMatrix) -> Result<Self> {
        if x.shape() != y.shape() || x.nrows() != x.ncols() || !x.nrows().is_multiple_of(2) {
            return Err(Error::Dimension(format!("X is {:?}, Y is {:?}", x.shape(), y.shape())));
        }
        if asymmetry(&y) > 1e-12 * (1.0 + max_abs(&y)) {
            return Err(Error::param("y", "noise matrix must be symmetric"));
        }
        Ok(GaussianChannel { x, y })
    }

    pub fn identity(modes: usize) -> Self {
        GaussianChannel { x: RMatrix::identity(2 * modes, 2 * modes), y: RMatrix::zeros(2 * modes, 2 * modes) }
    }

    /// Pure loss with transmissivity η on every mode.
    pub fn pure_loss(eta: f64, modes: usize) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::param("eta", format!("transmissivity must lie in (0, 1], got {eta}")));
        }
        let id = RMatrix::identity(2 * modes, 2 * modes);
        Ok(GaussianChannel { x: &id * eta.sqrt(), y: &id * (1.0 - eta) })
    }

    /// Quantum-limited amplifier with gain G on every mode.
    pub fn amplifier(gain: f64, modes: usize) -> Result<Self> {
        if !(gain >= 1.0) {
            return Err(Error::param("gain", format!("gain must be ≥ 1, got {gain}")));
        }
        let id = RMatrix::identity(2 * modes, 2 * modes);
        Ok(GaussianChannel { x: &id * gain.sqrt(), y: &id * (gain - 1.0) })
    }

    /// Additive Gaussian noise adding `gamma` mean photons per mode.
    pub fn additive_noise(gamma: f64, modes: usize) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::param("gamma", "added noise must be non-negative"));
        }
        let id = RMatrix::identity(2 * modes, 2 * modes);
        Ok(GaussianChannel { x: id.clone(), y: id * (2.0 * gamma) })
    }

    pub fn mode_count(&self) -> usize {
        self.x.nrows() / 2
    }

    /// `other` applied after `self`.
    pub fn then(&self, other: &GaussianChannel) -> Result<Self> {
        if self.x.shape() != other.x.shape() {
            return Err(Error::Dimension("composing channels of different size".into()));
        }
        Ok(GaussianChannel {
            x: &other.x * &self.x,
            y: &other.x * &self.y * other.x.transpose() + &other.y,
        })
    }

    /// Smallest eigenvalue of Y + iΩ − i X Ω Xᵀ; non-negative for CP channels.
    pub fn complete_positivity(&self) -> f64 {
        let w = omega(self.mode_count());
        let im = &w - &self.x * &w * self.x.transpose();
        min_herm_eigenvalue(&combine(&self.y, &im))
    }

    pub fn is_cp(&self) -> bool {
        self.complete_positivity() >= -PHYSICALITY_TOL
    }

    /// Embed a channel on the signal block of an idler-first layout.
    pub fn on_signal_block(&self, idler_modes: usize) -> Self {
        let n = 2 * idler_modes;
        let m = self.x.nrows();
        let mut x = RMatrix::identity(n + m, n + m);
        let mut y = RMatrix::zeros(n + m, n + m);
        x.view_mut((n, n), (m, m)).copy_from(&self.x);
        y.view_mut((n, n), (m, m)).copy_from(&self.y);
        GaussianChannel { x, y }
    }
}

pub fn apply_channel(ch: &GaussianChannel, st: &CovarianceState) -> Result<CovarianceState> {
    if ch.x.nrows() != st.cov.nrows() {
        return Err(Error::Dimension(format!(
            "channel acts on {} modes, state has {}",
            ch.mode_count(),
            st.mode_count()
        )));
    }
    let cov = &ch.x * &st.cov * ch.x.transpose() + &ch.y;
    Ok(CovarianceState { mean: &ch.x * &st.mean, cov: (&cov + cov.transpose()) * 0.5 })
}

/// R(φ) = [[cos φ, sin φ], [sin φ, −cos φ]]
fn reflection(phi: f64) -> [[f64; 2]; 2] {
    let (s, c) = phi.sin_cos();
    [[c, s], [s, -c]]
}

/// α = ⊕ cosh(r_i) I₂ and β = ⊕ sinh(r_i) R(φ_i).
pub fn squeezer_blocks(r: &[f64], phi: &[f64]) -> (RMatrix, RMatrix) {
    let m = r.len();
    let mut alpha = RMatrix::zeros(2 * m, 2 * m);
    let mut beta = RMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        let rot = reflection(phi[i]);
        alpha[(2 * i, 2 * i)] = r[i].cosh();
        alpha[(2 * i + 1, 2 * i + 1)] = r[i].cosh();
        for a in 0..2 {
            for b in 0..2 {
                beta[(2 * i + a, 2 * i + b)] = r[i].sinh() * rot[a][b];
            }
        }
    }
    (alpha, beta)
}

/// Pairwise two-mode squeezer [[α, β], [β, α]] on `pairs` idler–signal pairs.
pub fn two_mode_squeezer(r: &[f64], phi: &[f64], pairs: usize) -> Result<SymplecticMatrix> {
    if r.len() != pairs || phi.len() != pairs {
        return Err(Error::Dimension(format!(
            "{} squeezing values and {} phases for {} pairs",
            r.len(),
            phi.len(),
            pairs
        )));
    }
    if r.iter().chain(phi).any(|v| !v.is_finite()) {
        return Err(Error::param("r", "squeezing parameters must be finite"));
    }
    let (alpha, beta) = squeezer_blocks(r, phi);
    let n = 2 * pairs;
    let mut s = RMatrix::zeros(2 * n, 2 * n);
    s.view_mut((0, 0), (n, n)).copy_from(&alpha);
    s.view_mut((n, n), (n, n)).copy_from(&alpha);
    s.view_mut((0, n), (n, n)).copy_from(&beta);
    s.view_mut((n, 0), (n, n)).copy_from(&beta);
    Ok(SymplecticMatrix { entries: s, modes: 2 * pairs })
}

fn check_eta(name: &str, eta: &RMatrix) -> Result<()> {
    if eta.nrows() != eta.ncols() || !eta.nrows().is_multiple_of(2) {
        return Err(Error::Dimension(format!("{name} must be 2M×2M")));
    }
    if asymmetry(eta) > 1e-12 * (1.0 + max_abs(eta)) {
        return Err(Error::param(name, "must be symmetric"));
    }
    let min = min_sym_eigenvalue(eta);
    if min < -1e-12 * (1.0 + max_abs(eta)) {
        return Err(Error::NotPositive { context: name.to_string(), min_eigenvalue: min });
    }
    if sym_norm(eta) > 0.1 {
        warn!("{name} has norm {:.3}; first-order treatment may be inaccurate", sym_norm(eta));
    }
    Ok(())
}

/// First-order interaction on the signal modes: X = I + (η↓ − η↑)/2, Y = η↓ + η↑.
///
/// `eta_up`/`eta_down` are signal-quadrature matrices; the idler block is untouched.
pub fn perturbative_interaction(eta_up: &RMatrix, eta_down: &RMatrix, idler_modes: usize) -> Result<GaussianChannel> {
    check_eta("eta_up", eta_up)?;
    check_eta("eta_down", eta_down)?;
    if eta_up.shape() != eta_down.shape() {
        return Err(Error::Dimension("eta_up and eta_down differ in size".into()));
    }
    let m = eta_up.nrows();
    let x = RMatrix::identity(m, m) + (eta_down - eta_up) * 0.5;
    let y = eta_down + eta_up;
    Ok(GaussianChannel { x, y }.on_signal_block(idler_modes))
}

/// Exact counterpart of [`perturbative_interaction`]: multimode loss exp(−η↑/2)
/// followed by a quantum-limited amplifier exp(η↓/2).
pub fn exact_interaction(eta_up: &RMatrix, eta_down: &RMatrix, idler_modes: usize) -> Result<GaussianChannel> {
    check_eta("eta_up", eta_up)?;
    check_eta("eta_down", eta_down)?;
    let m = eta_up.nrows();
    let id = RMatrix::identity(m, m);
    let xl = sym_function(eta_up, |v| (-v / 2.0).exp());
    let loss = GaussianChannel { y: &id - &xl * xl.transpose(), x: xl };
    let xa = sym_function(eta_down, |v| (v / 2.0).exp());
    let amp = GaussianChannel { y: &xa * xa.transpose() - &id, x: xa };
    Ok(loss.then(&amp)?.on_signal_block(idler_modes))
}

/// Quadrature noise matrix of a Hermitian rate matrix Γ (mode basis).
///
/// With γ = Γᵀ: Y_{qᵢqⱼ} = Y_{pᵢpⱼ} = Re γᵢⱼ, Y_{qᵢpⱼ} = Im γᵢⱼ, Y_{pᵢqⱼ} = −Im γᵢⱼ.
pub fn eta_from_rates(gamma: &CMatrix) -> RMatrix {
    let k = gamma.nrows();
    let mut eta = RMatrix::zeros(2 * k, 2 * k);
    for i in 0..k {
        for j in 0..k {
            let g = gamma[(j, i)];
            eta[(2 * i, 2 * j)] = g.re;
            eta[(2 * i + 1, 2 * j + 1)] = g.re;
            eta[(2 * i, 2 * j + 1)] = g.im;
            eta[(2 * i + 1, 2 * j)] = -g.im;
        }
    }
    eta
}

/// δY_th = (Σ₃ − I)/2 split into idler, signal and cross blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalPerturbation {
    pub idler_block: RMatrix,
    pub signal_block: RMatrix,
    /// Signal rows, idler columns.
    pub cross_block: RMatrix,
    pub alpha: RMatrix,
    pub beta: RMatrix,
}

impl ThermalPerturbation {
    pub fn from_delta(delta: &RMatrix, alpha: RMatrix, beta: RMatrix) -> Self {
        let n = alpha.nrows();
        ThermalPerturbation {
            idler_block: delta.view((0, 0), (n, n)).into_owned(),
            signal_block: delta.view((n, n), (n, n)).into_owned(),
            cross_block: delta.view((n, 0), (n, n)).into_owned(),
            alpha,
            beta,
        }
    }

    /// Closed-form first-order blocks: idler βη↑β, signal αη↓α, cross −½α(η↑+η↓)β.
    pub fn closed_form(r: &[f64], phi: &[f64], eta_up: &RMatrix, eta_down: &RMatrix) -> Self {
        let (alpha, beta) = squeezer_blocks(r, phi);
        let y = eta_up + eta_down;
        ThermalPerturbation {
            idler_block: &beta * eta_up * &beta,
            signal_block: &alpha * eta_down * &alpha,
            cross_block: -(&alpha * y * &beta) * 0.5,
            alpha,
            beta,
        }
    }

    /// First-order δY obtained by propagating the linearised channel through the
    /// squeezers numerically, without using the block algebra.
    pub fn linearized(r: &[f64], phi: &[f64], eta_up: &RMatrix, eta_down: &RMatrix) -> Result<Self> {
        let pairs = r.len();
        let s = two_mode_squeezer(r, phi, pairs)?;
        let sinv = s.inverse();
        let ch = perturbative_interaction(eta_up, eta_down, pairs)?;
        let n = 4 * pairs;
        let d = &ch.x - RMatrix::identity(n, n);
        let sigma1 = s.entries() * s.entries().transpose();
        let first = &d * &sigma1 + &sigma1 * d.transpose() + &ch.y;
        let delta = sinv.entries() * first * sinv.entries().transpose() * 0.5;
        let (alpha, beta) = squeezer_blocks(r, phi);
        Ok(Self::from_delta(&delta, alpha, beta))
    }

    pub fn full(&self) -> RMatrix {
        let n = self.alpha.nrows();
        let mut m = RMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.idler_block);
        m.view_mut((n, n), (n, n)).copy_from(&self.signal_block);
        m.view_mut((n, 0), (n, n)).copy_from(&self.cross_block);
        m.view_mut((0, n), (n, n)).copy_from(&self.cross_block.transpose());
        m
    }

    /// Largest block discrepancy against another decomposition.
    pub fn max_discrepancy(&self, other: &ThermalPerturbation) -> f64 {
        max_abs(&(&self.idler_block - &other.idler_block))
            .max(max_abs(&(&self.signal_block - &other.signal_block)))
            .max(max_abs(&(&self.cross_block - &other.cross_block)))
    }
}

/// Squeeze, interact, unsqueeze: Σ₃ = S⁻¹(X S Sᵀ Xᵀ + Y)S⁻ᵀ from the vacuum.
pub fn echo_sequence(r: &[f64], phi: &[f64], interaction: &GaussianChannel) -> Result<(CovarianceState, ThermalPerturbation)> {
    let pairs = r.len();
    let n = 2 * pairs;
    if interaction.x.nrows() != 2 * n {
        return Err(Error::Dimension(format!(
            "interaction acts on {} modes, echo has {}",
            interaction.mode_count(),
            2 * pairs
        )));
    }
    let id = RMatrix::identity(n, n);
    let touches_idler = max_abs(&(interaction.x.view((0, 0), (n, n)) - &id)) > 0.0
        || max_abs(&interaction.x.view((0, n), (n, n)).into_owned()) > 0.0
        || max_abs(&interaction.x.view((n, 0), (n, n)).into_owned()) > 0.0
        || max_abs(&interaction.y.view((0, 0), (n, n)).into_owned()) > 0.0
        || max_abs(&interaction.y.view((0, n), (n, n)).into_owned()) > 0.0;
    if touches_idler {
        return Err(Error::param("interaction", "must act on the signal block only"));
    }
    let s = two_mode_squeezer(r, phi, pairs)?;
    let st1 = apply_channel(&s.as_channel(), &CovarianceState::vacuum(2 * pairs))?;
    let st2 = apply_channel(interaction, &st1)?;
    let st3 = apply_channel(&s.inverse().as_channel(), &st2)?;
    let delta = (&st3.cov - RMatrix::identity(2 * n, 2 * n)) * 0.5;
    let (alpha, beta) = squeezer_blocks(r, phi);
    Ok((st3.clone(), ThermalPerturbation::from_delta(&delta, alpha, beta)))
}

/// Ladder-operator content of a near-vacuum state: returns (1 − tr γ, γ) with
/// γᵢⱼ = ⟨aᵢ†aⱼ⟩.
pub fn single_photon_decompose(st: &CovarianceState) -> Result<(f64, MutualCoherenceMatrix)> {
    if st.mean.iter().any(|v| *v != 0.0) {
        return Err(Error::param("mean", "single-photon decomposition needs a zero-mean state"));
    }
    let m = st.mode_count();
    let y = (&st.cov - RMatrix::identity(2 * m, 2 * m)) * 0.5;
    if min_sym_eigenvalue(&y) < -1e-12 {
        return Err(Error::NotPositive { context: "cov − I".into(), min_eigenvalue: min_sym_eigenvalue(&y) });
    }
    if sym_norm(&y) > 0.1 {
        warn!("cov − I has norm {:.3}; the single-photon picture is approximate", sym_norm(&y));
    }
    let mut gamma = CMatrix::zeros(m, m);
    let mut anomalous = 0.0_f64;
    for i in 0..m {
        for j in 0..m {
            let qq = y[(2 * i, 2 * j)];
            let pp = y[(2 * i + 1, 2 * j + 1)];
            let qp = y[(2 * i, 2 * j + 1)];
            let pq = y[(2 * i + 1, 2 * j)];
            gamma[(i, j)] = Complex64::new(0.5 * (qq + pp), 0.5 * (qp - pq));
            anomalous = anomalous.max(Complex64::new(0.5 * (qq - pp), 0.5 * (qp + pq)).norm());
        }
    }
    if anomalous > 1e-8 {
        return Err(Error::Perturbative(format!(
            "squeezed residual ⟨aa⟩ = {anomalous:e} exceeds 1e-8"
        )));
    }
    let weight = 1.0 - gamma.trace().re;
    Ok((weight, MutualCoherenceMatrix::new(gamma)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complexify;
    use proptest::prelude::*;

    fn random_rates(k: usize, seed: u64, scale: f64) -> CMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_fn(k, k, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let g = &a * a.adjoint();
        let norm = crate::linalg::herm_eigenvalues(&g).last().copied().unwrap();
        g * Complex64::new(scale / norm, 0.0)
    }

    #[test]
    fn zero_squeezing_is_identity() {
        let s = two_mode_squeezer(&[0.0], &[0.0], 1).unwrap();
        assert!(max_abs(&(s.entries() - RMatrix::identity(4, 4))) < 1e-15);
    }

    #[test]
    fn unit_squeezing_blocks() {
        let s = two_mode_squeezer(&[1.0], &[0.0], 1).unwrap();
        let e = s.entries();
        assert!((e[(0, 0)] - 1.0_f64.cosh()).abs() < 1e-15);
        assert!((e[(1, 1)] - 1.543_080_634_815_243_7).abs() < 1e-12);
        assert!((e[(0, 2)] - 1.0_f64.sinh()).abs() < 1e-15);
        assert!((e[(1, 3)] + 1.0_f64.sinh()).abs() < 1e-15);
    }

    #[test]
    fn squeezer_block_identities() {
        let (a, b) = squeezer_blocks(&[0.3, 1.7], &[0.4, 2.0]);
        let n = a.nrows();
        assert!(max_abs(&(a.transpose() * &a - b.transpose() * &b - RMatrix::identity(n, n))) < 1e-12);
        assert!(max_abs(&(a.transpose() * &b - b.transpose() * &a)) < 1e-12);
    }

    #[test]
    fn squeezer_rejects_mismatched_lengths() {
        assert!(matches!(two_mode_squeezer(&[0.1, 0.2], &[0.0], 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn vacuum_is_fixed_by_loss_and_identity() {
        let vac = CovarianceState::vacuum(2);
        let out = apply_channel(&GaussianChannel::identity(2), &vac).unwrap();
        assert_eq!(out, vac);
        let out = apply_channel(&GaussianChannel::pure_loss(0.3, 2).unwrap(), &vac).unwrap();
        assert!(max_abs(&(out.cov - RMatrix::identity(4, 4))) < 1e-15);
    }

    #[test]
    fn amplified_coherent_state_is_displaced_thermal() {
        let g = 1.3;
        let st = CovarianceState::coherent(&[Complex64::new(0.7, -0.2)]);
        let out = apply_channel(&GaussianChannel::amplifier(g, 1).unwrap(), &st).unwrap();
        assert!(max_abs(&(&out.cov - RMatrix::identity(2, 2) * (2.0 * g - 1.0))) < 1e-14);
        assert!((out.mean[0] - g.sqrt() * st.mean[0]).abs() < 1e-14);
        assert!((out.mean[1] - g.sqrt() * st.mean[1]).abs() < 1e-14);
        assert!((out.photon_numbers()[0] - (g * 0.53 + g - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn exact_channels_are_cp_and_perturbative_may_not_be() {
        assert!(GaussianChannel::pure_loss(0.9, 1).unwrap().is_cp());
        assert!(GaussianChannel::amplifier(1.1, 1).unwrap().is_cp());
        assert!(GaussianChannel::additive_noise(0.1, 1).unwrap().is_cp());
        let eta = RMatrix::identity(2, 2) * 0.05;
        let p = perturbative_interaction(&RMatrix::zeros(2, 2), &eta, 0).unwrap();
        assert!(p.complete_positivity() < 0.0);
    }

    #[test]
    fn perturbative_interaction_formula() {
        let z = RMatrix::zeros(2, 2);
        let id = perturbative_interaction(&z, &z, 1).unwrap();
        assert_eq!(id, GaussianChannel::identity(2));
        let ch = perturbative_interaction(&(RMatrix::identity(2, 2) * 0.01), &z, 1).unwrap();
        assert!((ch.x[(2, 2)] - 0.995).abs() < 1e-15);
        assert!((ch.x[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((ch.y[(3, 3)] - 0.01).abs() < 1e-15);
        assert_eq!(ch.y[(0, 0)], 0.0);
    }

    #[test]
    fn perturbative_interaction_rejects_non_psd() {
        let bad = RMatrix::from_diagonal(&DVector::from_vec(vec![0.01, -0.01]));
        assert!(matches!(
            perturbative_interaction(&bad, &RMatrix::zeros(2, 2), 1),
            Err(Error::NotPositive { .. })
        ));
    }

    #[test]
    fn echo_without_squeezing_is_bare_channel() {
        let eta = eta_from_rates(&random_rates(2, 3, 0.01));
        let ch = perturbative_interaction(&RMatrix::zeros(4, 4), &eta, 2).unwrap();
        let (st, _) = echo_sequence(&[0.0, 0.0], &[0.0, 0.0], &ch).unwrap();
        let mut expect = RMatrix::identity(8, 8);
        let mut sig = expect.view_mut((4, 4), (4, 4));
        sig += &eta * 2.0;
        let resid = max_abs(&(st.cov - expect));
        assert!(resid <= sym_norm(&eta).powi(2), "residual {resid:e}");
    }

    #[test]
    fn absorption_excites_only_idlers_and_emission_only_signals() {
        let eta = eta_from_rates(&random_rates(2, 5, 1e-4));
        let z = RMatrix::zeros(4, 4);
        let r = [0.8, 0.8];
        let phi = [0.0, 0.0];
        let abs = ThermalPerturbation::linearized(&r, &phi, &eta, &z).unwrap();
        assert!(max_abs(&abs.signal_block) < 1e-15);
        assert!(max_abs(&(&abs.idler_block - &abs.beta * &eta * &abs.beta)) < 1e-15);
        let emi = ThermalPerturbation::linearized(&r, &phi, &z, &eta).unwrap();
        assert!(max_abs(&emi.idler_block) < 1e-15);
        assert!(max_abs(&(&emi.signal_block - &emi.alpha * &eta * &emi.alpha)) < 1e-15);
    }

    #[test]
    fn echo_residual_is_second_order() {
        let up = eta_from_rates(&random_rates(1, 11, 1e-3));
        let down = eta_from_rates(&random_rates(1, 12, 2e-3));
        let ch = perturbative_interaction(&up, &down, 1).unwrap();
        let (st, extracted) = echo_sequence(&[0.6], &[0.3], &ch).unwrap();
        let closed = ThermalPerturbation::closed_form(&[0.6], &[0.3], &up, &down);
        let resid = max_abs(&(st.cov - RMatrix::identity(4, 4) - closed.full() * 2.0));
        assert!(resid < 1e-5, "{resid:e}");
        assert!(extracted.max_discrepancy(&closed) < 1e-5);
    }

    #[test]
    fn decompose_vacuum_and_thermal() {
        let (w, g) = single_photon_decompose(&CovarianceState::vacuum(2)).unwrap();
        assert_eq!(w, 1.0);
        assert_eq!(crate::linalg::max_abs_c(g.entries()), 0.0);
        let (w, g) = single_photon_decompose(&CovarianceState::thermal(&[0.003])).unwrap();
        assert!((g.entries()[(0, 0)].re - 0.003).abs() < 1e-16);
        assert!((w - 0.997).abs() < 1e-15);
    }

    #[test]
    fn decompose_recovers_rates() {
        let gamma = random_rates(3, 9, 0.01);
        let eta = eta_from_rates(&gamma);
        let st = CovarianceState::new(DVector::zeros(6), RMatrix::identity(6, 6) + &eta * 2.0).unwrap();
        let (_, g) = single_photon_decompose(&st).unwrap();
        assert!(crate::linalg::max_abs_c(&(g.entries() - gamma.transpose())) < 1e-15);
    }

    #[test]
    fn decompose_rejects_squeezing() {
        let mut cov = RMatrix::identity(2, 2);
        cov[(0, 0)] = 1.03;
        cov[(1, 1)] = 1.01;
        let st = CovarianceState::new(DVector::zeros(2), cov).unwrap();
        assert!(matches!(single_photon_decompose(&st), Err(Error::Perturbative(_))));
    }

    #[test]
    fn echoed_signal_rates_are_amplified() {
        let eps = 1e-7;
        let r = 0.9_f64;
        let down = complexify(&RMatrix::from_diagonal(&DVector::from_vec(vec![eps, eps])));
        let ch = perturbative_interaction(&RMatrix::zeros(4, 4), &eta_from_rates(&down), 2).unwrap();
        let (st, _) = echo_sequence(&[r, r], &[0.0, 0.0], &ch).unwrap();
        let signal = CovarianceState::new(
            DVector::zeros(4),
            st.cov.view((4, 4), (4, 4)).into_owned(),
        )
        .unwrap();
        let (_, g) = single_photon_decompose(&signal).unwrap();
        for k in 0..2 {
            let rel = g.entries()[(k, k)].re / (eps * r.cosh().powi(2)) - 1.0;
            assert!(rel.abs() < 1e-5, "{rel:e}");
        }
    }

    proptest! {
        #[test]
        fn squeezers_are_symplectic(r in proptest::collection::vec(-2.0f64..2.0, 1..4), seed in 0u64..1000) {
            let phi: Vec<f64> = r.iter().enumerate().map(|(i, _)| ((seed as f64) * 0.37 + i as f64) % std::f64::consts::TAU).collect();
            let s = two_mode_squeezer(&r, &phi, r.len()).unwrap();
            prop_assert!(s.symplectic_deviation() < 1e-10);
            let inv = s.inverse();
            prop_assert!(inv.symplectic_deviation() < 1e-10);
            let prod = s.compose(&inv).unwrap();
            prop_assert!(max_abs(&(prod.entries() - RMatrix::identity(4 * r.len(), 4 * r.len()))) < 1e-10);
        }

        #[test]
        fn closed_form_matches_linearized_propagation(r in 0.0f64..2.0, phi in 0.0f64..std::f64::consts::TAU, seed in 0u64..500) {
            let up = eta_from_rates(&random_rates(2, seed, 0.01));
            let down = eta_from_rates(&random_rates(2, seed + 1000, 0.01));
            let rr = [r, 0.5 * r];
            let pp = [phi, 0.0];
            let lin = ThermalPerturbation::linearized(&rr, &pp, &up, &down).unwrap();
            let closed = ThermalPerturbation::closed_form(&rr, &pp, &up, &down);
            let scale = r.cosh().powi(2);
            prop_assert!(lin.max_discrepancy(&closed) < 1e-12 * scale);
            prop_assert!(min_sym_eigenvalue(&closed.signal_block) > -1e-10);
            prop_assert!(min_sym_eigenvalue(&closed.idler_block) > -1e-10);
        }

        #[test]
        fn pure_emission_cross_block(r in 0.0f64..2.0, seed in 0u64..500) {
            let eta = eta_from_rates(&random_rates(1, seed, 0.01));
            let lin = ThermalPerturbation::linearized(&[r], &[0.0], &RMatrix::zeros(2, 2), &eta).unwrap();
            let expect = -(&lin.alpha * &eta * &lin.beta) * 0.5;
            prop_assert!(max_abs(&(&lin.cross_block - expect)) < 1e-12);
        }
    }
}
