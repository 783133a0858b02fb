//! Point-spread function and Hermite–Gauss mode algebra.
//!
//! The PSF amplitude is φ(u) = (πσ²)^{-1/4} exp(−u²/2σ²) and the HG modes are its
//! excitations, ψₖ(u) = (πσ²)^{-1/4} (2ᵏk!)^{-1/2} Hₖ(u/σ) exp(−u²/2σ²). In this
//! width convention a source displaced by y expands as
//! φ(u − y) = Σₖ cₖ(y) ψₖ(u) with cₖ(y) = (2ᵏk!)^{-1/2} (y/σ)ᵏ exp(−y²/4σ²).

use std::sync::OnceLock;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::linalg::{complexify, herm_eigenvalues, max_abs_c, non_hermiticity, CMatrix, RMatrix};

const FRAC_PI_M4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}

/// Normalised Hermite functions hₖ(ξ) = (2ᵏk!√π)^{-1/2} Hₖ(ξ) e^{−ξ²/2}, k < n.
pub fn hermite_functions(n: usize, xi: f64) -> Vec<f64> {
    let mut h = Vec::with_capacity(n);
    if n == 0 {
        return h;
    }
    h.push(FRAC_PI_M4 * (-xi * xi / 2.0).exp());
    if n > 1 {
        h.push(std::f64::consts::SQRT_2 * xi * h[0]);
    }
    for k in 1..n.saturating_sub(1) {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * xi * h[k] - (kf / (kf + 1.0)).sqrt() * h[k - 1];
        h.push(next);
    }
    h
}

/// HG mode ψₖ(u) of width σ.
pub fn hg_mode(k: usize, sigma: f64, u: f64) -> f64 {
    hermite_functions(k + 1, u / sigma)[k] / sigma.sqrt()
}

/// All HG modes ψ₀..ψ_{n−1} at `u`.
pub fn hg_modes(n: usize, sigma: f64, u: f64) -> Vec<f64> {
    let s = sigma.sqrt();
    hermite_functions(n, u / sigma).into_iter().map(|h| h / s).collect()
}

/// Gauss–Hermite rule for ∫ e^{−x²} f(x) dx.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// wᵢ e^{xᵢ²}, for integrands that carry their own Gaussian factor.
    pub scaled_weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        // Golub–Welsch nodes, polished by Newton; weights from the recurrence so
        // that tail weights keep full relative precision.
        let jac = RMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                ((i.max(j)) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut guesses = crate::linalg::sym_eigenvalues(&jac);
        guesses.reverse();
        let nf = n as f64;
        let eval = |z: f64| {
            let mut p1 = FRAC_PI_M4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            (p1, (2.0 * nf).sqrt() * p2)
        };
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut scaled = Vec::with_capacity(n);
        for g in guesses {
            let mut z = g;
            for _ in 0..4 {
                let (p, dp) = eval(z);
                let step = p / dp;
                z -= step;
                if step.abs() <= 1e-16 * z.abs().max(1.0) {
                    break;
                }
            }
            let (_, dp) = eval(z);
            let w = 2.0 / (dp * dp);
            nodes.push(z);
            weights.push(w);
            scaled.push((w.ln() + z * z).exp());
        }
        GaussHermite { nodes, weights, scaled_weights: scaled }
    }

    /// The 200-node rule used for all mode integrals.
    pub fn standard() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(200))
    }

    /// ∫ f(u) du with nodes scaled to width σ; `f` must decay like a Gaussian.
    pub fn integrate(&self, sigma: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.scaled_weights)
            .map(|(x, w)| w * f(sigma * x))
            .sum::<f64>()
            * sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPsf {
    pub sigma: f64,
}

impl GaussianPsf {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param("sigma", format!("PSF width must be positive, got {sigma}")));
        }
        Ok(GaussianPsf { sigma })
    }

    pub fn amplitude(&self, u: f64) -> f64 {
        hg_mode(0, self.sigma, u)
    }

    pub fn intensity(&self, u: f64) -> f64 {
        self.amplitude(u).powi(2)
    }

    /// ∫_lo^hi φ(u − a) φ(u − b) du in closed form.
    pub fn overlap_on_interval(&self, a: f64, b: f64, lo: f64, hi: f64) -> f64 {
        let s = self.sigma;
        let m = 0.5 * (a + b);
        (-(a - b).powi(2) / (4.0 * s * s)).exp() * 0.5 * (erf((hi - m) / s) - erf((lo - m) / s))
    }

    /// ∫_lo^hi φ(u − x) du.
    pub fn amplitude_on_interval(&self, x: f64, lo: f64, hi: f64) -> f64 {
        let s = self.sigma;
        let r2 = std::f64::consts::SQRT_2 * s;
        FRAC_PI_M4 * s.sqrt() * (std::f64::consts::PI / 2.0).sqrt() * (erf((hi - x) / r2) - erf((lo - x) / r2))
    }
}

/// HG expansion coefficients c₀..c_{K−1} of the PSF displaced by `y`.
pub fn displaced_psf_coeffs(y: f64, sigma: f64, k: usize) -> Vec<f64> {
    let t = y / sigma;
    let mut c = Vec::with_capacity(k);
    if k == 0 {
        return c;
    }
    c.push((-t * t / 4.0).exp());
    for j in 1..k {
        let prev = c[j - 1];
        c.push(prev * t / (2.0 * j as f64).sqrt());
    }
    c
}

/// 1 − Σ_{k<K} cₖ²(y): truncation loss of the expansion.
pub fn completeness_residual(y: f64, sigma: f64, k: usize) -> f64 {
    1.0 - displaced_psf_coeffs(y, sigma, k).iter().map(|c| c * c).sum::<f64>()
}

/// Uniform pixel grid on the collection plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub edges: Vec<f64>,
}

impl PixelGrid {
    pub fn uniform(lo: f64, hi: f64, pixels: usize) -> Result<Self> {
        if !(hi > lo) || pixels == 0 {
            return Err(Error::param("grid", "need hi > lo and at least one pixel"));
        }
        let dx = (hi - lo) / pixels as f64;
        Ok(PixelGrid { edges: (0..=pixels).map(|i| lo + dx * i as f64).collect() })
    }

    /// ±`half_width`·σ with `per_sigma` pixels per σ.
    pub fn around_psf(sigma: f64, half_width: f64, per_sigma: usize) -> Result<Self> {
        let n = (2.0 * half_width * per_sigma as f64).round() as usize;
        Self::uniform(-half_width * sigma, half_width * sigma, n)
    }

    /// Default grid: 20 pixels per σ over ±6σ, far beyond the 99.9% energy width of ψ₀.
    pub fn default_for(sigma: f64) -> Self {
        Self::around_psf(sigma, 6.0, 20).expect("valid default grid")
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn width(&self, j: usize) -> f64 {
        self.edges[j + 1] - self.edges[j]
    }

    pub fn pixels_per_sigma(&self, sigma: f64) -> f64 {
        let w = self.edges.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        sigma / w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeBasis {
    /// ψ₀..ψ_{K−1}.
    HermiteGauss { sigma: f64, truncation: usize },
    /// Normalised indicator functions of each pixel.
    Pixel { sigma: f64, grid: PixelGrid },
    /// Sampled functions on a uniform grid (Riemann quadrature).
    Custom { sigma: f64, grid: Vec<f64>, functions: Vec<Vec<f64>> },
}

impl ModeBasis {
    pub fn hermite_gauss(sigma: f64, truncation: usize) -> Self {
        ModeBasis::HermiteGauss { sigma, truncation }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            ModeBasis::HermiteGauss { sigma, .. } | ModeBasis::Pixel { sigma, .. } | ModeBasis::Custom { sigma, .. } => *sigma,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ModeBasis::HermiteGauss { truncation, .. } => *truncation,
            ModeBasis::Pixel { grid, .. } => grid.len(),
            ModeBasis::Custom { functions, .. } => functions.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gram matrix ⟨ψᵢ|ψⱼ⟩ by quadrature.
    pub fn gram(&self) -> RMatrix {
        let k = self.len();
        match self {
            ModeBasis::HermiteGauss { sigma, truncation } => {
                let gh = GaussHermite::standard();
                let mut g = RMatrix::zeros(k, k);
                for (x, w) in gh.nodes.iter().zip(&gh.scaled_weights) {
                    let psi = hg_modes(*truncation, *sigma, sigma * x);
                    for i in 0..k {
                        for j in 0..k {
                            g[(i, j)] += w * psi[i] * psi[j] * sigma;
                        }
                    }
                }
                g
            }
            ModeBasis::Pixel { .. } => RMatrix::identity(k, k),
            ModeBasis::Custom { grid, functions, .. } => {
                let du = grid_step(grid);
                RMatrix::from_fn(k, k, |i, j| {
                    functions[i].iter().zip(&functions[j]).map(|(a, b)| a * b).sum::<f64>() * du
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        GaussianPsf::new(self.sigma())?;
        if self.is_empty() {
            return Err(Error::param("basis", "basis has no modes"));
        }
        if let ModeBasis::Custom { grid, functions, .. } = self {
            if functions.iter().any(|f| f.len() != grid.len()) {
                return Err(Error::Dimension("custom mode samples must match the grid".into()));
            }
        }
        let g = self.gram();
        let dev = crate::linalg::max_abs(&(&g - RMatrix::identity(g.nrows(), g.ncols())));
        if dev > 1e-8 {
            return Err(Error::param("basis", format!("not orthonormal (Gram deviation {dev:e})")));
        }
        Ok(())
    }

    /// Projections ⟨ψⱼ|φ(· − x)⟩ of a displaced PSF onto the basis.
    pub fn psf_projection(&self, x: f64) -> Vec<f64> {
        match self {
            ModeBasis::HermiteGauss { sigma, truncation } => displaced_psf_coeffs(x, *sigma, *truncation),
            ModeBasis::Pixel { sigma, grid } => {
                let psf = GaussianPsf { sigma: *sigma };
                (0..grid.len())
                    .map(|j| psf.amplitude_on_interval(x, grid.edges[j], grid.edges[j + 1]) / grid.width(j).sqrt())
                    .collect()
            }
            ModeBasis::Custom { sigma, grid, functions } => {
                let psf = GaussianPsf { sigma: *sigma };
                let du = grid_step(grid);
                functions
                    .iter()
                    .map(|f| f.iter().zip(grid).map(|(v, u)| v * psf.amplitude(u - x)).sum::<f64>() * du)
                    .collect()
            }
        }
    }
}

fn grid_step(grid: &[f64]) -> f64 {
    if grid.len() < 2 {
        1.0
    } else {
        (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSource {
    pub position: f64,
    pub weight: f64,
}

/// A 1-D scene of point emitters/absorbers seen through a Gaussian PSF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub sources: Vec<PointSource>,
    pub psf: GaussianPsf,
    /// Total emission rate ε, shared among sources by weight.
    pub emission: f64,
    /// Absorption rate γ↑ of each point absorber (for equal weights).
    pub absorption: f64,
    /// Pairwise emission correlation C ∈ [0, 1].
    pub correlation: f64,
    pub centroid_known: bool,
}

impl Scene {
    pub fn new(sources: Vec<PointSource>, sigma: f64, emission: f64, absorption: f64) -> Result<Self> {
        let s = Scene {
            sources,
            psf: GaussianPsf::new(sigma)?,
            emission,
            absorption,
            correlation: 0.0,
            centroid_known: true,
        };
        s.validate()?;
        Ok(s)
    }

    /// Two equal sources at ±d/2.
    pub fn two_point(d: f64, sigma: f64, emission: f64, absorption: f64) -> Result<Self> {
        let src = vec![
            PointSource { position: d / 2.0, weight: 0.5 },
            PointSource { position: -d / 2.0, weight: 0.5 },
        ];
        Self::new(src, sigma, emission, absorption)
    }

    pub fn with_correlation(mut self, c: f64) -> Result<Self> {
        self.correlation = c;
        self.validate()?;
        Ok(self)
    }

    pub fn sigma(&self) -> f64 {
        self.psf.sigma
    }

    pub fn validate(&self) -> Result<()> {
        GaussianPsf::new(self.psf.sigma)?;
        if self.sources.is_empty() {
            return Err(Error::param("sources", "scene needs at least one source"));
        }
        if self.sources.iter().any(|s| !(s.weight >= 0.0) || !s.position.is_finite()) {
            return Err(Error::param("sources", "weights must be ≥ 0 and positions finite"));
        }
        let total: f64 = self.sources.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param("sources", format!("weights sum to {total}, expected 1")));
        }
        if !(self.emission >= 0.0) || !(self.absorption >= 0.0) {
            return Err(Error::param("emission", "rates must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::param("correlation", "must lie in [0, 1]"));
        }
        if self.emission >= 0.5 || self.absorption * self.sources.len() as f64 >= 0.5 {
            warn!("scene rates are not small; the first-order channel may be inaccurate");
        }
        Ok(())
    }

    /// Separation of a two-source scene.
    pub fn separation(&self) -> Option<f64> {
        (self.sources.len() == 2).then(|| (self.sources[0].position - self.sources[1].position).abs())
    }

    fn pair_weight(&self, a: usize, b: usize) -> f64 {
        let c = if a == b { 1.0 } else { self.correlation };
        c * (self.sources[a].weight * self.sources[b].weight).sqrt()
    }

    /// Γ(u, u') for a total rate `rate`.
    pub fn kernel(&self, rate: f64) -> impl Fn(f64, f64) -> f64 + '_ {
        move |u, v| {
            let mut acc = 0.0;
            for a in 0..self.sources.len() {
                for b in 0..self.sources.len() {
                    let w = self.pair_weight(a, b);
                    if w != 0.0 {
                        acc += w * self.psf.amplitude(u - self.sources[a].position) * self.psf.amplitude(v - self.sources[b].position);
                    }
                }
            }
            rate * acc
        }
    }

    /// Total absorption rate γ↑ × number of sources.
    pub fn total_absorption(&self) -> f64 {
        self.absorption * self.sources.len() as f64
    }

    /// Γ(u, u) integrated over each pixel, per unit total rate.
    pub fn pixel_intensities(&self, grid: &PixelGrid) -> Vec<f64> {
        (0..grid.len())
            .map(|j| {
                let (lo, hi) = (grid.edges[j], grid.edges[j + 1]);
                let mut acc = 0.0;
                for a in 0..self.sources.len() {
                    for b in 0..self.sources.len() {
                        let w = self.pair_weight(a, b);
                        if w != 0.0 {
                            acc += w * self.psf.overlap_on_interval(self.sources[a].position, self.sources[b].position, lo, hi);
                        }
                    }
                }
                acc
            })
            .collect()
    }
}

/// Hermitian rate matrix Γ^[Ψ] in a structured mode basis.
#[derive(Debug, Clone, PartialEq)]
pub struct MutualCoherenceMatrix {
    entries: CMatrix,
}

impl MutualCoherenceMatrix {
    pub fn new(entries: CMatrix) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::Dimension("coherence matrix must be square".into()));
        }
        let dev = non_hermiticity(&entries);
        if dev > 1e-12 * (1.0 + max_abs_c(&entries)) {
            return Err(Error::NotHermitian { context: "coherence matrix".into(), deviation: dev });
        }
        Ok(MutualCoherenceMatrix { entries })
    }

    pub fn from_real(m: RMatrix) -> Result<Self> {
        Self::new(complexify(&m))
    }

    pub fn diagonal(rates: &[f64]) -> Self {
        MutualCoherenceMatrix {
            entries: complexify(&RMatrix::from_diagonal(&DVector::from_column_slice(rates))),
        }
    }

    pub fn zeros(k: usize) -> Self {
        MutualCoherenceMatrix { entries: CMatrix::zeros(k, k) }
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, l: usize, k: usize) -> Complex64 {
        self.entries[(l, k)]
    }

    /// Diagonal rates Γₖₖ.
    pub fn diag(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.entries[(k, k)].re).collect()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        herm_eigenvalues(&self.entries).first().copied().unwrap_or(0.0)
    }

    pub fn check_psd(&self) -> Result<()> {
        let min = self.min_eigenvalue();
        if min < -1e-10 {
            return Err(Error::NotPositive { context: "coherence matrix".into(), min_eigenvalue: min });
        }
        Ok(())
    }

    pub fn real_part(&self) -> RMatrix {
        self.entries.map(|z| z.re)
    }

    pub fn scaled(&self, f: f64) -> Self {
        MutualCoherenceMatrix { entries: &self.entries * Complex64::new(f, 0.0) }
    }
}

fn check_basis(scene: &Scene, basis: &ModeBasis) -> Result<()> {
    scene.validate()?;
    let (a, b) = (scene.sigma(), basis.sigma());
    if (a - b).abs() > 1e-12 * a.max(b) {
        return Err(Error::param("basis", format!("basis width {b} does not match PSF width {a}")));
    }
    Ok(())
}

fn scene_matrix(scene: &Scene, basis: &ModeBasis, rate: f64) -> Result<MutualCoherenceMatrix> {
    check_basis(scene, basis)?;
    let k = basis.len();
    let proj: Vec<Vec<f64>> = scene.sources.iter().map(|s| basis.psf_projection(s.position)).collect();
    let mut g = RMatrix::zeros(k, k);
    for a in 0..proj.len() {
        for b in 0..proj.len() {
            let w = rate * scene.pair_weight(a, b);
            if w == 0.0 {
                continue;
            }
            for l in 0..k {
                for m in 0..k {
                    g[(l, m)] += w * proj[a][l] * proj[b][m];
                }
            }
        }
    }
    let g = (&g + g.transpose()) * 0.5;
    MutualCoherenceMatrix::from_real(g)
}

/// Emission coherence Γ↓^[Ψ] of a scene.
pub fn coherence_matrix(scene: &Scene, basis: &ModeBasis) -> Result<MutualCoherenceMatrix> {
    scene_matrix(scene, basis, scene.emission)
}

/// Absorption matrix Γ↑^[Ψ] of a scene (each point absorber at rate γ↑).
pub fn absorption_matrix(scene: &Scene, basis: &ModeBasis) -> Result<MutualCoherenceMatrix> {
    scene_matrix(scene, basis, scene.total_absorption())
}

/// Project a collection-plane kernel Γ(u, u') onto an HG basis by 2-D Gauss–Hermite quadrature.
pub fn project_kernel_hg(kernel: impl Fn(f64, f64) -> f64, sigma: f64, truncation: usize) -> RMatrix {
    let gh = GaussHermite::standard();
    let n = gh.nodes.len();
    let u: Vec<f64> = gh.nodes.iter().map(|x| sigma * x).collect();
    let psi = RMatrix::from_fn(n, truncation, |i, k| hg_modes(k + 1, sigma, u[i])[k] * gh.scaled_weights[i] * sigma);
    let kmat = RMatrix::from_fn(n, n, |i, j| kernel(u[i], u[j]));
    psi.transpose() * kmat * psi
}

/// Emission coherence of a scene by direct quadrature of Γ(u, u').
pub fn coherence_matrix_quadrature(scene: &Scene, truncation: usize) -> Result<MutualCoherenceMatrix> {
    scene.validate()?;
    let m = project_kernel_hg(scene.kernel(scene.emission), scene.sigma(), truncation);
    MutualCoherenceMatrix::from_real((&m + m.transpose()) * 0.5)
}

/// Collection-plane propagator K(x, u).
#[derive(Debug, Clone, PartialEq)]
pub enum Propagator {
    /// Shift-invariant PSF substitution K(x, u) = φ(u − x).
    Psf(GaussianPsf),
    /// Far-field Fourier kernel e^{−2πi x u / L}/√L; unitary on DFT-conjugate grids.
    Fraunhofer { length: f64 },
    /// Raw samples, rows indexed by x and columns by u.
    Sampled(CMatrix),
}

impl Propagator {
    pub fn matrix(&self, x: &[f64], u: &[f64]) -> Result<CMatrix> {
        match self {
            Propagator::Psf(psf) => Ok(CMatrix::from_fn(x.len(), u.len(), |i, a| Complex64::new(psf.amplitude(u[a] - x[i]), 0.0))),
            Propagator::Fraunhofer { length } => {
                let norm = 1.0 / length.sqrt();
                Ok(CMatrix::from_fn(x.len(), u.len(), |i, a| {
                    Complex64::from_polar(norm, -2.0 * std::f64::consts::PI * x[i] * u[a] / length)
                }))
            }
            Propagator::Sampled(m) => {
                if m.nrows() != x.len() || m.ncols() != u.len() {
                    return Err(Error::Dimension(format!(
                        "sampled propagator is {}×{}, grids are {}×{}",
                        m.nrows(),
                        m.ncols(),
                        x.len(),
                        u.len()
                    )));
                }
                Ok(m.clone())
            }
        }
    }
}

/// Γ(u, u') = ∬ γ(x, x') K(x, u) K*(x', u') dx dx' on uniform grids.
pub fn propagate_kernel(gamma_xx: &CMatrix, x: &[f64], u: &[f64], prop: &Propagator) -> Result<CMatrix> {
    if gamma_xx.nrows() != x.len() || gamma_xx.ncols() != x.len() {
        return Err(Error::Dimension(format!(
            "emitter kernel is {}×{}, grid has {} points",
            gamma_xx.nrows(),
            gamma_xx.ncols(),
            x.len()
        )));
    }
    let dx = grid_step(x);
    let k = prop.matrix(x, u)?;
    let out = k.transpose() * gamma_xx * k.conjugate() * Complex64::new(dx * dx, 0.0);
    Ok((&out + out.adjoint()) * Complex64::new(0.5, 0.0))
}

/// Emitter-plane kernel of a scene's point sources placed on grid points.
pub fn point_source_kernel(scene: &Scene, x: &[f64]) -> Result<CMatrix> {
    let dx = grid_step(x);
    let idx: Vec<usize> = scene
        .sources
        .iter()
        .map(|s| {
            x.iter()
                .position(|g| (g - s.position).abs() < 1e-9 * dx)
                .ok_or_else(|| Error::param("grid", format!("source at {} is not on the emitter grid", s.position)))
        })
        .collect::<Result<_>>()?;
    let mut g = CMatrix::zeros(x.len(), x.len());
    for a in 0..idx.len() {
        for b in 0..idx.len() {
            g[(idx[a], idx[b])] += Complex64::new(scene.emission * scene.pair_weight(a, b) / (dx * dx), 0.0);
        }
    }
    Ok(g)
}

/// Σ_u K(x, u) K*(x', u) du dx, which is the identity for a unitary kernel.
pub fn discrete_unitarity(prop: &Propagator, x: &[f64], u: &[f64]) -> Result<CMatrix> {
    let k = prop.matrix(x, u)?;
    let (dx, du) = (grid_step(x), grid_step(u));
    Ok(&k * k.adjoint() * Complex64::new(dx * du, 0.0))
}

/// Symmetric/antisymmetric eigen-decomposition of a centred two-point coherence matrix.
#[derive(Debug, Clone)]
pub struct ParityModes {
    pub plus: f64,
    pub minus: f64,
    pub v_plus: DVector<f64>,
    pub v_minus: DVector<f64>,
}

pub fn parity_eigenmodes(gamma: &MutualCoherenceMatrix) -> Result<ParityModes> {
    if crate::linalg::max_abs(&gamma.entries().map(|z| z.im)) > 1e-14 {
        return Err(Error::Unsupported("complex coherence in parity decomposition".into()));
    }
    let re = gamma.real_part();
    let k = re.nrows();
    let eig = SymmetricEigen::new(re.clone());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let trace = gamma.trace().abs().max(f64::MIN_POSITIVE);
    if k > 2 && eig.eigenvalues[order[2]].abs() > 1e-10 * trace {
        return Err(Error::param("gamma", "coherence matrix has rank > 2: not a two-point scene"));
    }
    let parity_weight = |v: &DVector<f64>, odd: bool| -> f64 {
        v.iter().enumerate().filter(|(i, _)| (i % 2 == 1) == odd).map(|(_, x)| x * x).sum()
    };
    let v0 = eig.eigenvectors.column(order[0]).into_owned();
    let v1 = if k > 1 { eig.eigenvectors.column(order[1]).into_owned() } else { DVector::zeros(1) };
    let (l0, l1) = (eig.eigenvalues[order[0]], if k > 1 { eig.eigenvalues[order[1]] } else { 0.0 });
    let (plus, minus, vp, vm) = if parity_weight(&v0, true) < 0.5 { (l0, l1, v0, v1) } else { (l1, l0, v1, v0) };
    if minus.abs() <= 1e-15 * trace {
        let mut odd = DVector::zeros(k);
        if k > 1 {
            odd[1] = 1.0;
        }
        return Ok(ParityModes { plus, minus: 0.0, v_plus: vp, v_minus: odd });
    }
    if parity_weight(&vp, true) > 1e-8 || parity_weight(&vm, false) > 1e-8 {
        return Err(Error::param("gamma", "eigenmodes lack definite parity: scene is not centred"));
    }
    Ok(ParityModes { plus, minus, v_plus: vp, v_minus: vm })
}

/// Exact Γ± = rate(1 ± e^{−s²/4})/2 for two sources at ±d/2, s = d/σ.
pub fn parity_eigenvalues(s: f64, rate: f64) -> (f64, f64) {
    let o = (-s * s / 4.0).exp();
    (rate * (1.0 + o) / 2.0, rate * (1.0 - o) / 2.0)
}

/// Eigenvalues (Λ₊, Λ₋) of the even {ψ₀, ψ₂} block built from the coefficients
/// kept to order s²: Γ₀₀ = ε(1 − s²/8), Γ₀₂ = εs²/(8√2), Γ₂₂ = 0.
pub fn even_subspace_digression(s: f64, rate: f64) -> (f64, f64) {
    let a = rate * (1.0 - s * s / 8.0);
    let b = rate * s * s / (8.0 * std::f64::consts::SQRT_2);
    let disc = (a * a + 4.0 * b * b).sqrt();
    let minus = -2.0 * b * b / (a + disc);
    (a - minus, minus)
}

/// Eigenvalues of the exact {ψ₀, ψ₂} block of a centred two-point scene.
pub fn even_subspace_exact(s: f64, rate: f64) -> (f64, f64) {
    let c = displaced_psf_coeffs(s / 2.0, 1.0, 3);
    let m = DMatrix::from_row_slice(2, 2, &[c[0] * c[0], c[0] * c[2], c[2] * c[0], c[2] * c[2]]) * rate;
    let ev = crate::linalg::sym_eigenvalues(&m);
    (ev[1], ev[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use proptest::prelude::*;

    #[test]
    fn fundamental_mode_at_origin() {
        assert!((hg_mode(0, 1.0, 0.0) - FRAC_PI_M4).abs() < 1e-15);
        assert!((FRAC_PI_M4 - std::f64::consts::PI.powf(-0.25)).abs() < 1e-15);
        assert_eq!(hg_mode(1, 1.0, 0.0), 0.0);
    }

    #[test]
    fn hermite_functions_match_explicit_polynomials() {
        let xi = 0.7_f64;
        let g = (-xi * xi / 2.0).exp() * FRAC_PI_M4;
        let h = hermite_functions(4, xi);
        let explicit = [
            g,
            g * 2.0 * xi / 2.0_f64.sqrt(),
            g * (4.0 * xi * xi - 2.0) / 8.0_f64.sqrt(),
            g * (8.0 * xi.powi(3) - 12.0 * xi) / 48.0_f64.sqrt(),
        ];
        for k in 0..4 {
            assert!((h[k] - explicit[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        let gh = GaussHermite::standard();
        let m0: f64 = gh.weights.iter().sum();
        assert!((m0 - std::f64::consts::PI.sqrt()).abs() < 1e-12);
        let m2: f64 = gh.nodes.iter().zip(&gh.weights).map(|(x, w)| w * x * x).sum();
        assert!((m2 - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-12);
        let gauss = gh.integrate(1.0, |u| (-u * u).exp());
        assert!((gauss - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn psf_is_normalised_and_modes_orthonormal() {
        let psf = GaussianPsf::new(1.3).unwrap();
        let norm = GaussHermite::standard().integrate(1.3, |u| psf.intensity(u));
        assert!((norm - 1.0).abs() < 1e-8);
        let g = ModeBasis::hermite_gauss(1.3, 12).gram();
        assert!(max_abs(&(&g - RMatrix::identity(12, 12))) < 1e-8);
        assert!(g[(2, 0)].abs() < 1e-8);
        assert!(GaussianPsf::new(0.0).is_err());
    }

    #[test]
    fn displaced_coefficients() {
        let c = displaced_psf_coeffs(0.0, 1.0, 4);
        assert_eq!(c, vec![1.0, 0.0, 0.0, 0.0]);
        let c = displaced_psf_coeffs(1.0, 1.0, 2);
        assert!((c[0] - (-0.25_f64).exp()).abs() < 1e-15);
        assert!((c[0] - 0.7788).abs() < 1e-4);
        assert!((c[1] - (-0.25_f64).exp() / 2.0_f64.sqrt()).abs() < 1e-15);
        assert!((c[1] - 0.5507).abs() < 1e-4);
        assert!(completeness_residual(1.0, 1.0, 20).abs() < 1e-10);
    }

    #[test]
    fn coefficients_are_overlaps_with_displaced_psf() {
        let sigma = 0.8;
        let psf = GaussianPsf::new(sigma).unwrap();
        for &y in &[0.05, 0.4, 1.1] {
            let c = displaced_psf_coeffs(y, sigma, 8);
            for (k, ck) in c.iter().enumerate() {
                let q = GaussHermite::standard().integrate(sigma, |u| hg_mode(k, sigma, u) * psf.amplitude(u - y));
                assert!((q - ck).abs() < 1e-10, "k={k} y={y}: {q} vs {ck}");
            }
        }
    }

    #[test]
    fn two_point_coherence_values() {
        let (eps, s) = (0.01, 0.1);
        let scene = Scene::two_point(s, 1.0, eps, 0.0).unwrap();
        let g = coherence_matrix(&scene, &ModeBasis::hermite_gauss(1.0, 10)).unwrap();
        assert!((g.get(0, 0).re - eps * (1.0 - s * s / 8.0)).abs() < s.powi(4) * eps);
        assert!((g.get(0, 0).re - 0.0099875).abs() < 1e-8);
        assert!((g.get(1, 1).re / 1.25e-5 - 1.0).abs() < 2e-3);
        assert!((g.get(0, 2).re / 8.84e-6 - 1.0).abs() < 2e-3);
        for l in 0..10 {
            for k in 0..10 {
                let v = g.get(l, k).re;
                if (l + k) % 2 == 1 {
                    assert!(v.abs() < 1e-12);
                } else {
                    let p = (k + l) as i32;
                    let fk: f64 = (1..=k).map(|i| i as f64).product();
                    let fl: f64 = (1..=l).map(|i| i as f64).product();
                    let expect = eps * (-s * s / 8.0).exp() * (s / 2.0).powi(p) / (2f64.powi(p) * fk * fl).sqrt();
                    assert!((v - expect).abs() < 1e-15 + 1e-12 * expect);
                }
            }
        }
    }

    #[test]
    fn coincident_sources_fill_fundamental_mode() {
        let scene = Scene::two_point(0.0, 1.0, 0.02, 0.0).unwrap();
        let g = coherence_matrix(&scene, &ModeBasis::hermite_gauss(1.0, 5)).unwrap();
        let mut e = CMatrix::zeros(5, 5);
        e[(0, 0)] = Complex64::new(0.02, 0.0);
        assert!(max_abs_c(&(g.entries() - e)) < 1e-18);
    }

    #[test]
    fn basis_width_mismatch_is_rejected() {
        let scene = Scene::two_point(0.1, 1.0, 0.01, 0.0).unwrap();
        assert!(coherence_matrix(&scene, &ModeBasis::hermite_gauss(2.0, 4)).is_err());
    }

    #[test]
    fn asymmetric_scene_matches_quadrature() {
        let src = vec![
            PointSource { position: -0.4, weight: 0.2 },
            PointSource { position: 0.1, weight: 0.5 },
            PointSource { position: 0.7, weight: 0.3 },
        ];
        let scene = Scene::new(src, 1.0, 0.01, 0.0).unwrap();
        let closed = coherence_matrix(&scene, &ModeBasis::hermite_gauss(1.0, 10)).unwrap();
        let quad = coherence_matrix_quadrature(&scene, 10).unwrap();
        assert!(max_abs_c(&(closed.entries() - quad.entries())) < 1e-8);
        let corr = scene.with_correlation(0.6).unwrap();
        let closed = coherence_matrix(&corr, &ModeBasis::hermite_gauss(1.0, 10)).unwrap();
        let quad = coherence_matrix_quadrature(&corr, 10).unwrap();
        assert!(max_abs_c(&(closed.entries() - quad.entries())) < 1e-8);
    }

    #[test]
    fn closed_form_matches_quadrature_across_separations() {
        for &s in &[0.01, 0.1, 1.0] {
            let scene = Scene::two_point(s * 1.5, 1.5, 0.01, 0.0).unwrap();
            let closed = coherence_matrix(&scene, &ModeBasis::hermite_gauss(1.5, 12)).unwrap();
            let quad = coherence_matrix_quadrature(&scene, 12).unwrap();
            assert!(max_abs_c(&(closed.entries() - quad.entries())) < 1e-8, "s={s}");
        }
    }

    #[test]
    fn trace_approaches_brightness() {
        for &s in &[0.0, 0.1, 0.3, 0.5] {
            let scene = Scene::two_point(s, 1.0, 0.01, 0.0).unwrap();
            let g = coherence_matrix(&scene, &ModeBasis::hermite_gauss(1.0, 20)).unwrap();
            assert!((g.trace() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn pixel_basis_coherence_is_consistent() {
        let scene = Scene::two_point(0.3, 1.0, 0.01, 0.0).unwrap();
        let basis = ModeBasis::Pixel { sigma: 1.0, grid: PixelGrid::default_for(1.0) };
        basis.validate().unwrap();
        let g = coherence_matrix(&scene, &basis).unwrap();
        g.check_psd().unwrap();
        assert!((g.trace() - 0.01).abs() < 1e-4);
    }

    #[test]
    fn custom_basis_reproduces_hg() {
        let grid: Vec<f64> = (0..2001).map(|i| -10.0 + 0.01 * i as f64).collect();
        let functions: Vec<Vec<f64>> = (0..4).map(|k| grid.iter().map(|u| hg_mode(k, 1.0, *u)).collect()).collect();
        let basis = ModeBasis::Custom { sigma: 1.0, grid, functions };
        basis.validate().unwrap();
        let scene = Scene::two_point(0.5, 1.0, 0.01, 0.0).unwrap();
        let a = coherence_matrix(&scene, &basis).unwrap();
        let b = coherence_matrix(&scene, &ModeBasis::hermite_gauss(1.0, 4)).unwrap();
        assert!(max_abs_c(&(a.entries() - b.entries())) < 1e-10);
    }

    fn uniform(lo: f64, step: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + step * i as f64).collect()
    }

    #[test]
    fn single_source_propagates_to_psf_outer_product() {
        let x = uniform(-1.0, 0.1, 21);
        let u = uniform(-3.0, 0.25, 25);
        let scene = Scene::new(vec![PointSource { position: 0.0, weight: 1.0 }], 1.0, 0.02, 0.0).unwrap();
        let gx = point_source_kernel(&scene, &x).unwrap();
        let out = propagate_kernel(&gx, &x, &u, &Propagator::Psf(scene.psf)).unwrap();
        let expect = CMatrix::from_fn(u.len(), u.len(), |a, b| Complex64::new(0.02 * scene.psf.amplitude(u[a]) * scene.psf.amplitude(u[b]), 0.0));
        assert!(max_abs_c(&(out - expect)) < 1e-15);
    }

    #[test]
    fn two_sources_propagate_to_two_point_kernel() {
        let x = uniform(-1.0, 0.1, 21);
        let u = uniform(-3.0, 0.25, 25);
        let scene = Scene::two_point(0.6, 1.0, 0.01, 0.0).unwrap();
        let gx = point_source_kernel(&scene, &x).unwrap();
        let out = propagate_kernel(&gx, &x, &u, &Propagator::Psf(scene.psf)).unwrap();
        let k = scene.kernel(0.01);
        let phi = |v: f64| scene.psf.amplitude(v);
        for a in 0..u.len() {
            for b in 0..u.len() {
                let lit = 0.005 * (phi(u[a] - 0.3) * phi(u[b] - 0.3) + phi(u[a] + 0.3) * phi(u[b] + 0.3));
                assert!((out[(a, b)].re - lit).abs() < 1e-15);
                assert!((k(u[a], u[b]) - lit).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fully_correlated_pair_is_rank_one() {
        let x = uniform(-1.0, 0.1, 21);
        let u = uniform(-4.0, 0.2, 41);
        let scene = Scene::two_point(0.6, 1.0, 0.01, 0.0).unwrap().with_correlation(1.0).unwrap();
        let gx = point_source_kernel(&scene, &x).unwrap();
        let out = propagate_kernel(&gx, &x, &u, &Propagator::Psf(scene.psf)).unwrap();
        let ev = herm_eigenvalues(&out);
        assert!(ev[0].abs() < 1e-10);
        assert!(ev[ev.len() - 2].abs() < 1e-10);
        assert!(ev[ev.len() - 1] > 1e-3);
    }

    #[test]
    fn fraunhofer_kernel_is_unitary_on_conjugate_grids() {
        let n = 32;
        let length = 4.0;
        let dx = 0.25;
        let du = length / (n as f64 * dx);
        let x = uniform(0.0, dx, n);
        let u = uniform(0.0, du, n);
        let m = discrete_unitarity(&Propagator::Fraunhofer { length }, &x, &u).unwrap();
        assert!(max_abs_c(&(m - CMatrix::identity(n, n))) < 1e-12);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let x = uniform(-1.0, 0.1, 21);
        assert!(matches!(
            propagate_kernel(&CMatrix::zeros(3, 3), &x, &x, &Propagator::Fraunhofer { length: 1.0 }),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn parity_modes_of_two_point_scene() {
        let (s, eps) = (0.05, 0.01);
        let scene = Scene::two_point(s, 1.0, eps, 0.0).unwrap();
        let g = coherence_matrix(&scene, &ModeBasis::hermite_gauss(1.0, 16)).unwrap();
        let p = parity_eigenmodes(&g).unwrap();
        let (plus, minus) = parity_eigenvalues(s, eps);
        assert!((p.plus - plus).abs() < 1e-14);
        assert!((p.minus - minus).abs() < 1e-14);
        assert!((p.minus / eps / (s * s / 8.0) - 1.0).abs() < s * s);
        assert!((p.minus / eps - 3.125e-4).abs() < 1e-6);
        let zero = coherence_matrix(&Scene::two_point(0.0, 1.0, eps, 0.0).unwrap(), &ModeBasis::hermite_gauss(1.0, 6)).unwrap();
        assert_eq!(parity_eigenmodes(&zero).unwrap().minus, 0.0);
    }

    #[test]
    fn absorption_antisymmetric_rate() {
        let (s, gu) = (0.04, 0.01);
        let scene = Scene::two_point(s, 1.0, 0.0, gu).unwrap();
        let g = absorption_matrix(&scene, &ModeBasis::hermite_gauss(1.0, 16)).unwrap();
        let p = parity_eigenmodes(&g).unwrap();
        assert!((p.minus / (gu * s * s / 4.0) - 1.0).abs() < s * s);
        assert!((g.get(1, 1).re / (gu * s * s / 4.0) - 1.0).abs() < s * s);
    }

    #[test]
    fn parity_rejects_other_scenes() {
        let src = vec![
            PointSource { position: -0.4, weight: 0.3 },
            PointSource { position: 0.1, weight: 0.3 },
            PointSource { position: 0.7, weight: 0.4 },
        ];
        let scene = Scene::new(src, 1.0, 0.01, 0.0).unwrap();
        let g = coherence_matrix(&scene, &ModeBasis::hermite_gauss(1.0, 10)).unwrap();
        assert!(parity_eigenmodes(&g).is_err());
    }

    #[test]
    fn even_block_digression_scales_as_fourth_power() {
        let (lp, _) = even_subspace_digression(0.05, 0.01);
        assert!((lp / (0.01 * (1.0 - 0.05f64.powi(2) / 8.0)) - 1.0).abs() < 1e-4);
        let s: Vec<f64> = (0..10).map(|i| 0.01 * 10f64.powf(i as f64 / 9.0)).collect();
        let l: Vec<f64> = s.iter().map(|v| even_subspace_digression(*v, 0.01).1.abs()).collect();
        assert!((crate::linalg::loglog_slope(&s, &l) - 4.0).abs() < 0.01);
        let (ep, em) = even_subspace_exact(0.05, 0.01);
        assert!(em.abs() < 1e-18);
        assert!((ep - 0.01 * (-0.05f64.powi(2) / 8.0).exp() * (1.0 + 0.05f64.powi(4) / 128.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn parity_selection_rule(s in 0.0f64..2.0, eps in 0.0f64..0.4) {
            let scene = Scene::two_point(s, 1.0, eps, 0.0).unwrap();
            let g = coherence_matrix(&scene, &ModeBasis::hermite_gauss(1.0, 12)).unwrap();
            for l in 0..12 {
                for k in 0..12 {
                    if (l + k) % 2 == 1 {
                        prop_assert!(g.get(l, k).norm() <= 1e-12);
                    }
                }
            }
            prop_assert!(g.min_eigenvalue() > -1e-10);
        }

        #[test]
        fn coefficients_are_normalised(y in -3.0f64..3.0) {
            prop_assert!(completeness_residual(y, 1.0, 40).abs() < 1e-10);
        }
    }
}
