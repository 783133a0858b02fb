//! Small dense linear-algebra helpers shared by the engines.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

pub type RMatrix = DMatrix<f64>;
pub type CMatrix = DMatrix<Complex64>;

/// Block-diagonal symplectic form for `modes` modes, interleaved (q, p) ordering.
pub fn omega(modes: usize) -> RMatrix {
    let mut w = RMatrix::zeros(2 * modes, 2 * modes);
    for k in 0..modes {
        w[(2 * k, 2 * k + 1)] = 1.0;
        w[(2 * k + 1, 2 * k)] = -1.0;
    }
    w
}

pub fn max_abs(m: &RMatrix) -> f64 {
    m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

pub fn max_abs_c(m: &CMatrix) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.norm()))
}

pub fn asymmetry(m: &RMatrix) -> f64 {
    max_abs(&(m - m.transpose()))
}

pub fn non_hermiticity(m: &CMatrix) -> f64 {
    max_abs_c(&(m - m.adjoint()))
}

/// Eigenvalues of a real symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &RMatrix) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn herm_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_sym_eigenvalue(m: &RMatrix) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn min_herm_eigenvalue(m: &CMatrix) -> f64 {
    herm_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Spectral norm of a real symmetric matrix.
pub fn sym_norm(m: &RMatrix) -> f64 {
    sym_eigenvalues(m).iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// Lift a real matrix to complex.
pub fn complexify(m: &RMatrix) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

/// `re + i·im` as a complex matrix.
pub fn combine(re: &RMatrix, im: &RMatrix) -> CMatrix {
    re.zip_map(im, Complex64::new)
}

/// Apply `f` to the eigenvalues of a real symmetric matrix.
pub fn sym_function(m: &RMatrix, f: impl Fn(f64) -> f64) -> RMatrix {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = RMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
