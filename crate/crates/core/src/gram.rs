//! Trace-normalized RBF Gram matrices and their spectra.
//!
//! Every estimator in the crate works on a [`NormalizedGram`]: an `N x N`
//! symmetric positive-semidefinite kernel matrix divided by its trace, so that
//! its eigenvalues form a probability vector.

use nalgebra::{DMatrix, Dim, Matrix, Storage};

use crate::error::{invalid_data, invalid_param, Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const CLAMP_RENORM_TOL: f64 = 1e-12;

/// A symmetric kernel matrix with unit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGram {
    matrix: DMatrix<f64>,
    source_sigma: Option<f64>,
}

impl NormalizedGram {
    /// Trace-normalizes an arbitrary symmetric kernel matrix.
    pub fn from_kernel(kernel: DMatrix<f64>) -> Result<Self> {
        if !kernel.is_square() || kernel.nrows() < 2 {
            return Err(invalid_param(format!(
                "kernel must be square with N >= 2, got {}x{}",
                kernel.nrows(),
                kernel.ncols()
            )));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(invalid_data("kernel contains non-finite entries"));
        }
        let asym = max_asymmetry(&kernel);
        let scale = kernel.amax().max(f64::MIN_POSITIVE);
        if asym > SYMMETRY_TOL * scale {
            return Err(invalid_data(format!("kernel not symmetric (max |k_ij - k_ji| = {asym:e})")));
        }
        let trace = kernel.trace();
        if !(trace > 0.0) {
            return Err(invalid_data(format!("kernel trace must be positive, got {trace}")));
        }
        Ok(Self { matrix: kernel / trace, source_sigma: None })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// Kernel width the matrix was built with; `None` for products and
    /// externally supplied kernels.
    pub fn source_sigma(&self) -> Option<f64> {
        self.source_sigma
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Gaussian kernel Gram matrix over the rows of `samples`, trace-normalized.
///
/// Entry `(i, j)` before normalization is `exp(-||x_i - x_j||^2 / (2 sigma^2))`,
/// so the unnormalized trace is `N` and every normalized diagonal entry is `1/N`.
/// Accepts a single column (one neuron) or an `N x d` block (a whole layer).
pub fn rbf_gram<C, S>(samples: &Matrix<f64, nalgebra::Dyn, C, S>, sigma: f64) -> Result<NormalizedGram>
where
    C: Dim,
    S: Storage<f64, nalgebra::Dyn, C>,
{
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid_param(format!("kernel width must be positive and finite, got {sigma}")));
    }
    let n = samples.nrows();
    let d = samples.ncols();
    if n < 2 {
        return Err(invalid_param(format!("need at least 2 samples, got {n}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(invalid_data("samples contain non-finite values"));
    }

    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let diag = 1.0 / n as f64;
    let mut out = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = diag;
        for i in (j + 1)..n {
            let mut sq = 0.0;
            for c in 0..d {
                let delta = samples[(i, c)] - samples[(j, c)];
                sq += delta * delta;
            }
            let v = (-sq * inv_two_var).exp() * diag;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(NormalizedGram { matrix: out, source_sigma: Some(sigma) })
}

/// Entry-wise product of two Gram matrices, re-normalized to unit trace.
pub fn hadamard_joint(a: &NormalizedGram, b: &NormalizedGram) -> Result<NormalizedGram> {
    if a.size() != b.size() {
        return Err(invalid_param(format!("Gram size mismatch: {} vs {}", a.size(), b.size())));
    }
    let product = a.matrix.component_mul(&b.matrix);
    let trace = product.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::Numerical(format!("Hadamard product has trace {trace}")));
    }
    Ok(NormalizedGram { matrix: product / trace, source_sigma: None })
}

/// Eigenvalues of a normalized Gram matrix in descending order.
///
/// Negative eigenvalues (floating-point noise on a PSD matrix) are clamped to
/// zero; when clamping moves the sum by more than `1e-12` the spectrum is
/// rescaled to sum to one.
pub fn sym_eigenvalues(g: &NormalizedGram) -> Result<Vec<f64>> {
    let raw = g.matrix.symmetric_eigenvalues();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(eigen_diagnostics(&g.matrix)));
    }
    let raw_sum: f64 = raw.iter().sum();
    let mut spectrum: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    let clamped_sum: f64 = spectrum.iter().sum();
    if (clamped_sum - raw_sum).abs() > CLAMP_RENORM_TOL {
        if !(clamped_sum > 0.0) {
            return Err(Error::Numerical(eigen_diagnostics(&g.matrix)));
        }
        spectrum.iter_mut().for_each(|v| *v /= clamped_sum);
    }
    spectrum.sort_by(|x, y| y.total_cmp(x));
    Ok(spectrum)
}

fn eigen_diagnostics(m: &DMatrix<f64>) -> String {
    let diag = m.diagonal();
    format!(
        "symmetric eigensolver failed on {n}x{n} matrix (trace {tr:e}, frobenius {fro:e}, \
         diag range [{dmin:e}, {dmax:e}], max asymmetry {asym:e})",
        n = m.nrows(),
        tr = m.trace(),
        fro = m.norm(),
        dmin = diag.min(),
        dmax = diag.max(),
        asym = max_asymmetry(m),
    )
}
