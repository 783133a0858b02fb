//! Truncated Fock-space density matrices, exact Kraus channels and the
//! first-order structured map. Used as a brute-force oracle for the
//! Gaussian and click-model engines.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::distribution::{CountDistribution, Outcome};
use crate::error::{Error, Result};
use crate::linalg::{herm_eigenvalues, max_abs_c, non_hermiticity, CMatrix, RMatrix};
use crate::modes::MutualCoherenceMatrix;

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const NEGATIVE_TOL: f64 = 1e-10;

/// Mode index of the idler in two-mode echo states.
pub const IDLER: usize = 0;
/// Mode index of the signal in two-mode echo states.
pub const SIGNAL: usize = 1;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

fn re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

fn binomial(n: usize, k: usize) -> f64 {
    (ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    modes: usize,
    cutoff: usize,
}

impl Layout {
    fn levels(&self) -> usize {
        self.cutoff + 1
    }

    fn dim(&self) -> usize {
        self.levels().pow(self.modes as u32)
    }

    fn stride(&self, mode: usize) -> usize {
        self.levels().pow((self.modes - 1 - mode) as u32)
    }

    fn occupation(&self, index: usize, mode: usize) -> usize {
        (index / self.stride(mode)) % self.levels()
    }

    fn occupations(&self, mode: usize) -> Vec<usize> {
        (0..self.dim()).map(|i| self.occupation(i, mode)).collect()
    }
}

/// Density matrix on `modes` modes, each truncated at `cutoff` photons.
///
/// Basis index ordering is row-major in the occupation tuple, mode 0 most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct FockDensityMatrix {
    modes: usize,
    cutoff: usize,
    rho: CMatrix,
}

impl FockDensityMatrix {
    /// Validated constructor: Hermitian, eigenvalues ≥ −1e−10, trace ≤ 1.
    pub fn new(modes: usize, cutoff: usize, rho: CMatrix) -> Result<Self> {
        let st = Self::from_parts(modes, cutoff, rho)?;
        let dev = non_hermiticity(&st.rho);
        if dev > HERMITIAN_TOL {
            return Err(Error::NotHermitian { context: "density matrix".into(), deviation: dev });
        }
        let min = st.min_eigenvalue();
        if min < -NEGATIVE_TOL {
            return Err(Error::NotPositive { context: "density matrix".into(), min_eigenvalue: min });
        }
        if st.trace() > 1.0 + NEGATIVE_TOL {
            return Err(Error::Numerical(format!("trace {} exceeds 1", st.trace())));
        }
        Ok(st)
    }

    fn from_parts(modes: usize, cutoff: usize, rho: CMatrix) -> Result<Self> {
        if modes == 0 || cutoff == 0 {
            return Err(Error::param("cutoff", "need at least one mode and cutoff ≥ 1"));
        }
        let dim = Layout { modes, cutoff }.dim();
        if rho.nrows() != dim || rho.ncols() != dim {
            return Err(Error::Dimension(format!(
                "{}x{} matrix for {modes} modes at cutoff {cutoff} (need {dim})",
                rho.nrows(),
                rho.ncols()
            )));
        }
        Ok(FockDensityMatrix { modes, cutoff, rho })
    }

    pub fn vacuum(modes: usize, cutoff: usize) -> Result<Self> {
        Self::number(&vec![0; modes], cutoff)
    }

    pub fn number(ns: &[usize], cutoff: usize) -> Result<Self> {
        if let Some(n) = ns.iter().find(|n| **n > cutoff) {
            return Err(Error::param("n", format!("{n} exceeds cutoff {cutoff}")));
        }
        let lay = Layout { modes: ns.len(), cutoff };
        let mut rho = CMatrix::zeros(lay.dim(), lay.dim());
        let idx: usize = ns.iter().enumerate().map(|(m, n)| n * lay.stride(m)).sum();
        rho[(idx, idx)] = re(1.0);
        Self::from_parts(ns.len(), cutoff, rho)
    }

    /// `|ψ⟩⟨ψ|` for amplitudes on the full product basis. Norm below 1 is kept as leakage.
    pub fn pure(modes: usize, cutoff: usize, psi: &DVector<Complex64>) -> Result<Self> {
        let norm = psi.norm_squared();
        if norm > 1.0 + NEGATIVE_TOL {
            return Err(Error::param("psi", format!("norm² {norm} exceeds 1")));
        }
        Self::from_parts(modes, cutoff, psi * psi.adjoint())
    }

    /// Product of truncated coherent states.
    pub fn coherent(alphas: &[Complex64], cutoff: usize) -> Result<Self> {
        let mut psi = DVector::from_element(1, re(1.0));
        for a in alphas {
            let mut v = DVector::zeros(cutoff + 1);
            let mut amp = re((-0.5 * a.norm_sqr()).exp());
            for n in 0..=cutoff {
                if n > 0 {
                    amp *= a / (n as f64).sqrt();
                }
                v[n] = amp;
            }
            psi = psi.kronecker(&v);
        }
        Self::pure(alphas.len(), cutoff, &psi)
    }

    /// Product of truncated thermal states with mean photon numbers `nbar`.
    pub fn thermal(nbar: &[f64], cutoff: usize) -> Result<Self> {
        let mut diag = DVector::from_element(1, 1.0);
        for &nb in nbar {
            if !(nb >= 0.0) {
                return Err(Error::param("nbar", "must be ≥ 0"));
            }
            let q = nb / (1.0 + nb);
            let v = DVector::from_fn(cutoff + 1, |n, _| q.powi(n as i32) / (1.0 + nb));
            diag = diag.kronecker(&v);
        }
        Self::from_parts(nbar.len(), cutoff, CMatrix::from_diagonal(&diag.map(re)))
    }

    fn layout(&self) -> Layout {
        Layout { modes: self.modes, cutoff: self.cutoff }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub fn index_of(&self, ns: &[usize]) -> Result<usize> {
        if ns.len() != self.modes || ns.iter().any(|n| *n > self.cutoff) {
            return Err(Error::Dimension(format!("occupation {ns:?} not in the truncated space")));
        }
        let lay = self.layout();
        Ok(ns.iter().enumerate().map(|(m, n)| n * lay.stride(m)).sum())
    }

    pub fn occupations(&self, index: usize) -> Vec<usize> {
        let lay = self.layout();
        (0..self.modes).map(|m| lay.occupation(index, m)).collect()
    }

    /// Population of a basis state.
    pub fn population(&self, ns: &[usize]) -> Result<f64> {
        let i = self.index_of(ns)?;
        Ok(self.rho[(i, i)].re)
    }

    pub fn trace(&self) -> f64 {
        self.rho.diagonal().iter().map(|z| z.re).sum()
    }

    /// Population missing from the truncated space.
    pub fn leakage(&self) -> f64 {
        (1.0 - self.trace()).max(0.0)
    }

    pub fn mean_photons(&self, mode: usize) -> f64 {
        let lay = self.layout();
        (0..self.dim()).map(|i| lay.occupation(i, mode) as f64 * self.rho[(i, i)].re).sum()
    }

    pub fn non_hermiticity(&self) -> f64 {
        non_hermiticity(&self.rho)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        herm_eigenvalues(&self.rho).first().copied().unwrap_or(0.0)
    }

    /// Checks the state invariants with an explicit truncation leakage budget.
    pub fn validate(&self, leak_tol: f64) -> Result<()> {
        let dev = self.non_hermiticity();
        if dev > HERMITIAN_TOL {
            return Err(Error::NotHermitian { context: "density matrix".into(), deviation: dev });
        }
        let tr = self.trace();
        if tr > 1.0 + NEGATIVE_TOL || tr < 1.0 - leak_tol {
            return Err(Error::Numerical(format!("trace {tr} outside [1 - {leak_tol:e}, 1]")));
        }
        let min = self.min_eigenvalue();
        if min < -NEGATIVE_TOL {
            return Err(Error::NotPositive { context: "density matrix".into(), min_eigenvalue: min });
        }
        Ok(())
    }

    /// Clips eigenvalues in [−1e−10, 0) to zero and restores the trace.
    pub fn regularized(&self) -> Result<Self> {
        let tr = self.trace();
        let h = (&self.rho + self.rho.adjoint()) * re(0.5);
        let eig = SymmetricEigen::new(h);
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -NEGATIVE_TOL {
            return Err(Error::NotPositive { context: "density matrix".into(), min_eigenvalue: min });
        }
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        let mut rho = &eig.eigenvectors * CMatrix::from_diagonal(&clipped.map(re)) * eig.eigenvectors.adjoint();
        let new_tr: f64 = clipped.sum();
        if new_tr > 0.0 {
            rho *= re(tr / new_tr);
        }
        Self::from_parts(self.modes, self.cutoff, rho)
    }
}

/// Single-mode operator `|m⟩ → c_m |m + shift⟩`; components leaving the truncated
/// space are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOperator {
    pub shift: isize,
    pub coefficients: Vec<f64>,
}

impl ShiftOperator {
    fn target(&self, m: usize) -> Option<(usize, f64)> {
        let t = m as isize + self.shift;
        let c = self.coefficients[m];
        (t >= 0 && (t as usize) < self.coefficients.len() && c != 0.0).then_some((t as usize, c))
    }

    pub fn dense(&self) -> RMatrix {
        let n = self.coefficients.len();
        let mut k = RMatrix::zeros(n, n);
        for m in 0..n {
            if let Some((t, c)) = self.target(m) {
                k[(t, m)] = c;
            }
        }
        k
    }

    /// `next ∘ self`.
    fn then(&self, next: &ShiftOperator) -> ShiftOperator {
        let coefficients = (0..self.coefficients.len())
            .map(|m| self.target(m).and_then(|(t, c)| next.target(t).map(|(_, d)| c * d)).unwrap_or(0.0))
            .collect();
        ShiftOperator { shift: self.shift + next.shift, coefficients }
    }

    fn is_zero(&self) -> bool {
        (0..self.coefficients.len()).all(|m| self.target(m).is_none())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelLabel {
    Loss { eta: f64 },
    Amplifier { gain: f64 },
    AdditiveNoise { gamma: f64 },
    Composite(Vec<ChannelLabel>),
}

/// Single-mode channel in operator-sum form, applied to one mode at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct KrausChannel {
    pub label: ChannelLabel,
    cutoff: usize,
    operators: Vec<ShiftOperator>,
}

pub fn loss_kraus(eta: f64, n_max: usize) -> Result<KrausChannel> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::param("eta", format!("{eta} not in (0, 1]")));
    }
    let ops = (0..=n_max)
        .map(|n| ShiftOperator {
            shift: -(n as isize),
            coefficients: (0..=n_max)
                .map(|m| {
                    if m < n {
                        0.0
                    } else {
                        binomial(m, n).sqrt() * (1.0 - eta).powf(n as f64 / 2.0) * eta.powf((m - n) as f64 / 2.0)
                    }
                })
                .collect(),
        })
        .collect();
    Ok(KrausChannel::from_ops(ChannelLabel::Loss { eta }, n_max, ops))
}

pub fn amp_kraus(gain: f64, n_max: usize) -> Result<KrausChannel> {
    if !(gain >= 1.0 && gain.is_finite()) {
        return Err(Error::param("gain", format!("{gain} < 1")));
    }
    static WARNED: AtomicBool = AtomicBool::new(false);
    if (gain - 1.0) * n_max as f64 > 0.1 && !WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("amplifier gain {gain} is not perturbative at cutoff {n_max} (further warnings suppressed)");
    }
    let q = (gain - 1.0) / gain;
    let ops = (0..=n_max)
        .map(|n| ShiftOperator {
            shift: n as isize,
            coefficients: (0..=n_max)
                .map(|m| gain.powf(-0.5 - m as f64 / 2.0) * q.powf(n as f64 / 2.0) * binomial(m + n, n).sqrt())
                .collect(),
        })
        .collect();
    Ok(KrausChannel::from_ops(ChannelLabel::Amplifier { gain }, n_max, ops))
}

/// Additive Gaussian noise: loss at `1/(1+γ)` followed by gain `1+γ`.
pub fn agn_channel(gamma: f64, n_max: usize) -> Result<KrausChannel> {
    if !(gamma >= 0.0) {
        return Err(Error::param("gamma_agn", "must be ≥ 0"));
    }
    let composed = loss_kraus(1.0 / (1.0 + gamma), n_max)?.then(&amp_kraus(1.0 + gamma, n_max)?)?;
    Ok(KrausChannel { label: ChannelLabel::AdditiveNoise { gamma }, ..composed })
}

impl KrausChannel {
    fn from_ops(label: ChannelLabel, cutoff: usize, ops: Vec<ShiftOperator>) -> Self {
        let operators = ops.into_iter().filter(|o| !o.is_zero()).collect();
        KrausChannel { label, cutoff, operators }
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn shift_operators(&self) -> &[ShiftOperator] {
        &self.operators
    }

    /// Dense matrix of operator `i` on the truncated single-mode space.
    pub fn operator(&self, i: usize) -> CMatrix {
        self.operators[i].dense().map(re)
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &KrausChannel) -> Result<KrausChannel> {
        if next.cutoff != self.cutoff {
            return Err(Error::Dimension("channel cutoffs differ".into()));
        }
        let ops = self.operators.iter().flat_map(|a| next.operators.iter().map(move |b| a.then(b))).collect();
        Ok(KrausChannel::from_ops(
            ChannelLabel::Composite(vec![self.label.clone(), next.label.clone()]),
            self.cutoff,
            ops,
        ))
    }

    /// As [`KrausChannel::then`], keeping only composite operators that change the
    /// photon number by at most `max_shift`. The result is not trace preserving; it
    /// serves outcome amplitudes near the input sector.
    pub fn then_restricted(&self, next: &KrausChannel, max_shift: usize) -> Result<KrausChannel> {
        if next.cutoff != self.cutoff {
            return Err(Error::Dimension("channel cutoffs differ".into()));
        }
        let ops = self
            .operators
            .iter()
            .flat_map(|a| {
                next.operators
                    .iter()
                    .filter(move |b| (a.shift + b.shift).unsigned_abs() <= max_shift)
                    .map(move |b| a.then(b))
            })
            .collect();
        Ok(KrausChannel::from_ops(
            ChannelLabel::Composite(vec![self.label.clone(), next.label.clone()]),
            self.cutoff,
            ops,
        ))
    }

    /// `max_m |Σ_n ⟨m|K_n†K_n|m⟩ − 1|` over inputs `m ≤ max_input`.
    pub fn completeness_deviation(&self, max_input: usize) -> f64 {
        (0..=max_input.min(self.cutoff))
            .map(|m| {
                let s: f64 = self.operators.iter().filter_map(|o| o.target(m)).map(|(_, c)| c * c).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Applies the channel to mode `mode` (identity elsewhere).
    pub fn apply(&self, rho: &FockDensityMatrix, mode: usize) -> Result<FockDensityMatrix> {
        if mode >= rho.modes {
            return Err(Error::Dimension(format!("mode {mode} of a {}-mode state", rho.modes)));
        }
        if rho.cutoff != self.cutoff {
            return Err(Error::Dimension("state and channel cutoffs differ".into()));
        }
        let lay = rho.layout();
        let occ = lay.occupations(mode);
        let stride = lay.stride(mode) as isize;
        let dim = lay.dim();
        let mut out = CMatrix::zeros(dim, dim);
        for op in &self.operators {
            let active: Vec<(usize, usize, f64)> = (0..dim)
                .filter_map(|i| {
                    op.target(occ[i]).map(|(t, c)| {
                        let ti = i as isize + (t as isize - occ[i] as isize) * stride;
                        (i, ti as usize, c)
                    })
                })
                .collect();
            for &(j, tj, cj) in &active {
                for &(i, ti, ci) in &active {
                    let v = rho.rho[(i, j)];
                    if v != ZERO {
                        out[(ti, tj)] += v * (ci * cj);
                    }
                }
            }
        }
        FockDensityMatrix::from_parts(rho.modes, rho.cutoff, out)
    }
}

fn lower_left(m: &CMatrix, lay: Layout, mode: usize) -> CMatrix {
    let (stride, dim) = (lay.stride(mode), lay.dim());
    let mut out = CMatrix::zeros(dim, dim);
    for s in 0..dim {
        let n = lay.occupation(s, mode);
        if n > 0 {
            let f = (n as f64).sqrt();
            for c in 0..dim {
                out[(s - stride, c)] = m[(s, c)] * f;
            }
        }
    }
    out
}

fn raise_left(m: &CMatrix, lay: Layout, mode: usize) -> CMatrix {
    let (stride, dim) = (lay.stride(mode), lay.dim());
    let mut out = CMatrix::zeros(dim, dim);
    for s in 0..dim {
        let n = lay.occupation(s, mode);
        if n < lay.cutoff {
            let f = ((n + 1) as f64).sqrt();
            for c in 0..dim {
                out[(s + stride, c)] = m[(s, c)] * f;
            }
        }
    }
    out
}

fn lower_right(m: &CMatrix, lay: Layout, mode: usize) -> CMatrix {
    let (stride, dim) = (lay.stride(mode), lay.dim());
    let mut out = CMatrix::zeros(dim, dim);
    for c in 0..dim {
        let n = lay.occupation(c, mode);
        if n > 0 {
            let f = (n as f64).sqrt();
            for r in 0..dim {
                out[(r, c)] = m[(r, c - stride)] * f;
            }
        }
    }
    out
}

fn raise_right(m: &CMatrix, lay: Layout, mode: usize) -> CMatrix {
    let (stride, dim) = (lay.stride(mode), lay.dim());
    let mut out = CMatrix::zeros(dim, dim);
    for c in 0..dim {
        let n = lay.occupation(c, mode);
        if n < lay.cutoff {
            let f = ((n + 1) as f64).sqrt();
            for r in 0..dim {
                out[(r, c)] = m[(r, c + stride)] * f;
            }
        }
    }
    out
}

/// First-order structured map. Entry `k` of the rate matrices refers to state mode `modes[k]`.
pub fn apply_grandfather(
    rho: &FockDensityMatrix,
    gamma_up: &MutualCoherenceMatrix,
    gamma_down: &MutualCoherenceMatrix,
    modes: &[usize],
) -> Result<FockDensityMatrix> {
    let k = modes.len();
    if gamma_up.len() != k || gamma_down.len() != k {
        return Err(Error::Dimension(format!(
            "rate matrices {}x{} / {}x{} for {k} modes",
            gamma_up.len(),
            gamma_up.len(),
            gamma_down.len(),
            gamma_down.len()
        )));
    }
    if let Some(m) = modes.iter().find(|m| **m >= rho.modes) {
        return Err(Error::Dimension(format!("mode {m} of a {}-mode state", rho.modes)));
    }
    let lay = rho.layout();
    let load: f64 = (0..k)
        .map(|i| {
            let n = rho.mean_photons(modes[i]);
            gamma_up.get(i, i).re * n + gamma_down.get(i, i).re * (n + 1.0)
        })
        .sum();
    if load > 0.1 {
        log::warn!("first-order map outside perturbative regime (load {load:.3})");
    }
    let lowered: Vec<CMatrix> = modes.iter().map(|&m| lower_left(&rho.rho, lay, m)).collect();
    let raised: Vec<CMatrix> = modes.iter().map(|&m| raise_left(&rho.rho, lay, m)).collect();
    let mut out = rho.rho.clone();
    for l in 0..k {
        for j in 0..k {
            let (ml, mj) = (modes[l], modes[j]);
            let g = gamma_up.get(l, j);
            if g != ZERO {
                let a = &lowered[j];
                let term = raise_right(a, lay, ml)
                    - (raise_left(a, lay, ml) + raise_left(&lowered[l], lay, mj).adjoint()) * re(0.5);
                out += term * g;
            }
            let g = gamma_down.get(l, j);
            if g != ZERO {
                let c = &raised[l];
                let term = lower_right(c, lay, mj)
                    - (lower_left(c, lay, mj) + lower_left(&raised[j], lay, ml).adjoint()) * re(0.5);
                out += term * g;
            }
        }
    }
    let sym = (&out + out.adjoint()) * re(0.5);
    FockDensityMatrix::from_parts(rho.modes, rho.cutoff, sym)
}

/// Squeezer block on the sector with signal − idler = `d`; element m is
/// |m, m + d⟩ for d ≥ 0 and |m − d, m⟩ otherwise.
fn squeezer_sector(r: f64, cutoff: usize, d: isize) -> (Vec<usize>, RMatrix) {
    let lv = cutoff + 1;
    let a = d.unsigned_abs();
    let len = cutoff + 1 - a;
    let idx: Vec<usize> = (0..len)
        .map(|m| if d >= 0 { m * lv + m + a } else { (m + a) * lv + m })
        .collect();
    let mut g = RMatrix::zeros(len, len);
    for m in 0..len.saturating_sub(1) {
        let v = r * (((m + 1) * (m + 1 + a)) as f64).sqrt();
        g[(m + 1, m)] = v;
        g[(m, m + 1)] = -v;
    }
    (idx, g.exp())
}

/// `exp[r(a†e† − ae)]` on two modes, stored block-wise per photon-number difference.
#[derive(Debug, Clone)]
pub struct TwoModeSqueezer {
    r: f64,
    cutoff: usize,
    sectors: Vec<(Vec<usize>, RMatrix)>,
}

impl TwoModeSqueezer {
    pub fn new(r: f64, cutoff: usize) -> Result<Self> {
        if !r.is_finite() {
            return Err(Error::param("r", "must be finite"));
        }
        if cutoff == 0 {
            return Err(Error::param("cutoff", "must be ≥ 1"));
        }
        let sectors = (-(cutoff as isize)..=(cutoff as isize)).map(|d| squeezer_sector(r, cutoff, d)).collect();
        Ok(TwoModeSqueezer { r, cutoff, sectors })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn inverse(&self) -> Self {
        TwoModeSqueezer {
            r: -self.r,
            cutoff: self.cutoff,
            sectors: self.sectors.iter().map(|(i, u)| (i.clone(), u.transpose())).collect(),
        }
    }

    pub fn dense(&self) -> CMatrix {
        let dim = (self.cutoff + 1).pow(2);
        let mut u = CMatrix::zeros(dim, dim);
        for (idx, block) in &self.sectors {
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    u[(i, j)] = re(block[(a, b)]);
                }
            }
        }
        u
    }

    /// `max |U†U − I|`, a floating-point diagnostic.
    pub fn unitarity_deviation(&self) -> f64 {
        let u = self.dense();
        let n = u.nrows();
        max_abs_c(&(u.adjoint() * &u - CMatrix::identity(n, n)))
    }

    /// Population of the ideal twin-beam state lost above the cutoff.
    pub fn vacuum_leakage(&self) -> f64 {
        self.r.tanh().powi(2 * (self.cutoff as i32 + 1))
    }

    /// `U ρ U†`.
    pub fn apply(&self, rho: &FockDensityMatrix) -> Result<FockDensityMatrix> {
        if rho.modes != 2 || rho.cutoff != self.cutoff {
            return Err(Error::Dimension("squeezer needs a two-mode state at the same cutoff".into()));
        }
        let dim = rho.dim();
        let mut t = CMatrix::zeros(dim, dim);
        for (idx, block) in &self.sectors {
            for c in 0..dim {
                for (a, &i) in idx.iter().enumerate() {
                    let mut s = ZERO;
                    for (b, &j) in idx.iter().enumerate() {
                        s += rho.rho[(j, c)] * block[(a, b)];
                    }
                    t[(i, c)] = s;
                }
            }
        }
        let mut out = CMatrix::zeros(dim, dim);
        for (idx, block) in &self.sectors {
            for (a, &i) in idx.iter().enumerate() {
                for r in 0..dim {
                    let mut s = ZERO;
                    for (b, &j) in idx.iter().enumerate() {
                        s += t[(r, j)] * block[(a, b)];
                    }
                    out[(r, i)] = s;
                }
            }
        }
        FockDensityMatrix::from_parts(2, self.cutoff, out)
    }
}

pub fn two_mode_squeeze_unitary(r: f64, n_max: usize) -> Result<CMatrix> {
    Ok(TwoModeSqueezer::new(r, n_max)?.dense())
}

/// `exp[(r/2)(a² − a†²)]` on a single truncated mode, as a dense real matrix.
pub fn single_mode_squeeze_unitary(r: f64, n_max: usize) -> Result<RMatrix> {
    if !r.is_finite() {
        return Err(Error::param("r", "must be finite"));
    }
    let mut g = RMatrix::zeros(n_max + 1, n_max + 1);
    for m in 0..n_max.saturating_sub(1) {
        let v = 0.5 * r * (((m + 1) * (m + 2)) as f64).sqrt();
        g[(m + 2, m)] = -v;
        g[(m, m + 2)] = v;
    }
    Ok(g.exp())
}

/// `U ρ U†` for a real single-mode unitary acting on a one-mode state.
pub fn apply_single_mode(u: &RMatrix, rho: &FockDensityMatrix) -> Result<FockDensityMatrix> {
    if rho.modes != 1 || u.nrows() != rho.dim() {
        return Err(Error::Dimension("single-mode unitary needs a one-mode state of matching cutoff".into()));
    }
    let uc = u.map(re);
    FockDensityMatrix::from_parts(1, rho.cutoff, &uc * &rho.rho * uc.transpose())
}

/// Smallest cutoff whose twin-beam population above it is at most `tol`.
pub fn twin_beam_cutoff(r: f64, tol: f64) -> usize {
    let t = r.abs().tanh();
    if t == 0.0 {
        return 2;
    }
    let n = (tol.ln() / (2.0 * t.ln())).ceil() as usize;
    n.saturating_sub(1).max(2)
}

/// `|00⟩ → U(r) → middle → U(−r)` on (idler, signal).
pub fn echo_oracle(
    r: f64,
    cutoff: usize,
    middle: impl FnOnce(&FockDensityMatrix) -> Result<FockDensityMatrix>,
) -> Result<FockDensityMatrix> {
    let u = TwoModeSqueezer::new(r, cutoff)?;
    let squeezed = u.apply(&FockDensityMatrix::vacuum(2, cutoff)?)?;
    u.inverse().apply(&middle(&squeezed)?)
}

/// Echo outcome probabilities for vacuum, one signal photon and one idler photon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoClicks {
    pub vacuum: f64,
    pub signal: f64,
    pub idler: f64,
}

/// [`echo_oracle`] restricted to a single-mode signal channel, evaluated on pure
/// trajectories: each Kraus operator moves the twin-beam state into one photon
/// difference sector, so only three squeezer blocks are needed and large cutoffs
/// stay cheap.
pub fn echo_clicks(r: f64, cutoff: usize, channel: &KrausChannel) -> Result<EchoClicks> {
    if channel.cutoff() != cutoff {
        return Err(Error::Dimension("channel cutoff differs from echo cutoff".into()));
    }
    if cutoff < 2 {
        return Err(Error::param("cutoff", "must be ≥ 2"));
    }
    let blocks: Vec<RMatrix> = (-1..=1).map(|d| squeezer_sector(r, cutoff, d).1).collect();
    let psi: Vec<f64> = blocks[1].column(0).iter().copied().collect();
    let mut out = EchoClicks { vacuum: 0.0, signal: 0.0, idler: 0.0 };
    for op in channel.shift_operators() {
        let (u, slot) = match op.shift {
            0 => (&blocks[1], &mut out.vacuum),
            1 => (&blocks[2], &mut out.signal),
            -1 => (&blocks[0], &mut out.idler),
            _ => continue,
        };
        let amp: f64 = (0..=cutoff)
            .filter_map(|m| {
                let pos = if op.shift >= 0 { m } else { m.checked_sub(1)? };
                (pos < u.nrows()).then(|| u[(pos, 0)] * op.coefficients[m] * psi[m])
            })
            .sum();
        *slot += amp * amp;
    }
    Ok(out)
}

fn components(a: &CMatrix, b: &CMatrix) -> Vec<Vec<usize>> {
    let n = a.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let tol = 1e-300;
    for j in 0..n {
        for i in 0..j {
            if a[(i, j)].norm() > tol || b[(i, j)].norm() > tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// `Tr √(√ρ σ √ρ)`, computed per connected block on the support of ρ.
pub fn root_fidelity(rho: &FockDensityMatrix, sigma: &FockDensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::Dimension("fidelity between states of different size".into()));
    }
    let (a, b) = (&rho.rho, &sigma.rho);
    let mut total = 0.0;
    for comp in components(a, b) {
        if comp.len() == 1 {
            let (p, q) = (a[(comp[0], comp[0])].re, b[(comp[0], comp[0])].re);
            if p < -NEGATIVE_TOL || q < -NEGATIVE_TOL {
                return Err(Error::NotPositive { context: "fidelity input".into(), min_eigenvalue: p.min(q) });
            }
            total += (p.max(0.0) * q.max(0.0)).sqrt();
            continue;
        }
        let k = comp.len();
        let ra = CMatrix::from_fn(k, k, |i, j| a[(comp[i], comp[j])]);
        let rb = CMatrix::from_fn(k, k, |i, j| b[(comp[i], comp[j])]);
        let eig = SymmetricEigen::new((&ra + ra.adjoint()) * re(0.5));
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -NEGATIVE_TOL {
            return Err(Error::NotPositive { context: "fidelity input".into(), min_eigenvalue: min });
        }
        let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..k).filter(|&i| eig.eigenvalues[i] > 1e-13 * max.max(1e-300)).collect();
        if keep.is_empty() {
            continue;
        }
        let v = CMatrix::from_fn(k, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])]);
        let sq = CMatrix::from_diagonal(&DVector::from_iterator(keep.len(), keep.iter().map(|&i| re(eig.eigenvalues[i].sqrt()))));
        let m = &sq * v.adjoint() * rb * &v * &sq;
        for mu in herm_eigenvalues(&m) {
            if mu < -NEGATIVE_TOL {
                return Err(Error::NotPositive { context: "fidelity input".into(), min_eigenvalue: mu });
            }
            total += mu.max(0.0).sqrt();
        }
    }
    Ok(total)
}

/// Uhlmann fidelity `(Tr √(√ρ σ √ρ))²`.
pub fn fidelity(rho: &FockDensityMatrix, sigma: &FockDensityMatrix) -> Result<f64> {
    Ok(root_fidelity(rho, sigma)?.powi(2))
}

/// Sum of absolute eigenvalues of a Hermitian matrix.
pub fn trace_norm(m: &CMatrix) -> f64 {
    herm_eigenvalues(m).iter().map(|x| x.abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QfiEstimate {
    pub value: f64,
    /// `|Q(h) − Q(2h)|`, an upper estimate of the discretization error.
    pub error: f64,
    pub step: f64,
}

/// Fidelity-based quantum Fisher information with a Richardson step check.
/// States are renormalised, so mass leaked past the cutoff carries no information.
pub fn qfi_numeric(
    rho_fn: impl Fn(f64) -> Result<FockDensityMatrix>,
    theta: f64,
    dtheta: Option<f64>,
) -> Result<QfiEstimate> {
    let h = dtheta.unwrap_or_else(|| (1e-3 * theta.abs()).max(1e-6));
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("dtheta", "must be positive"));
    }
    let q = |step: f64| -> Result<f64> {
        let (a, b) = (rho_fn(theta - step / 2.0)?, rho_fn(theta + step / 2.0)?);
        let f = root_fidelity(&a, &b)? / (a.trace() * b.trace()).sqrt();
        Ok(8.0 * (1.0 - f) / (step * step))
    };
    let (q1, q2) = (q(h)?, q(2.0 * h)?);
    let value = (4.0 * q1 - q2) / 3.0;
    let error = (q1 - q2).abs();
    if error > 0.01 * value.abs().max(1e-12) {
        log::warn!("qfi step check failed: Q(h)={q1}, Q(2h)={q2}");
    }
    Ok(QfiEstimate { value, error, step: h })
}

/// Joint photon-number distribution of `modes`. Mass missing from the truncated
/// space is reported as `truncated`.
pub fn measure_counts(rho: &FockDensityMatrix, modes: &[usize]) -> Result<CountDistribution> {
    if modes.is_empty() {
        return Err(Error::param("modes", "empty mode subset"));
    }
    for (i, m) in modes.iter().enumerate() {
        if *m >= rho.modes || modes[..i].contains(m) {
            return Err(Error::param("modes", format!("invalid or repeated mode {m}")));
        }
    }
    let lay = rho.layout();
    let mut acc: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for i in 0..rho.dim() {
        let p = rho.rho[(i, i)].re;
        if p < -NEGATIVE_TOL {
            return Err(Error::NotPositive { context: "population".into(), min_eigenvalue: p });
        }
        let key: Vec<usize> = modes.iter().map(|&m| lay.occupation(i, m)).collect();
        *acc.entry(key).or_default() += p.max(0.0);
    }
    let total: f64 = acc.values().sum();
    if total > 1.0 + NEGATIVE_TOL {
        return Err(Error::Numerical(format!("populations sum to {total}")));
    }
    let (outcomes, probs) = acc.into_iter().map(|(k, p)| (Outcome::Photons(k), p)).unzip();
    CountDistribution::with_truncation(outcomes, probs, vec![], None, (1.0 - total).max(0.0))
}

/// Mutual information (nats) between the two halves of a two-mode count distribution.
pub fn mutual_information(dist: &CountDistribution) -> Result<f64> {
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (o, p) in dist.iter() {
        match o {
            Outcome::Photons(ns) if ns.len() == 2 => *joint.entry((ns[0], ns[1])).or_default() += p,
            _ => return Err(Error::Unsupported("mutual information needs two-mode photon counts".into())),
        }
    }
    let total: f64 = joint.values().sum();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&(a, b), &p) in &joint {
        *pa.entry(a).or_default() += p / total;
        *pb.entry(b).or_default() += p / total;
    }
    Ok(joint
        .iter()
        .filter(|(_, p)| **p > 0.0)
        .map(|(&(a, b), &p)| {
            let p = p / total;
            p * (p / (pa[&a] * pb[&b])).ln()
        })
        .sum())
}
