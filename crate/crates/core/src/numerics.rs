//! Dense complex linear algebra kernels shared by the channel model and the
//! inference code.
//!
//! Matrices are plain `nalgebra` column-major `DMatrix<Complex64>`. Covariance
//! matrices are kept Hermitian by calling [`hermitize`] after every update.
//! Large products go through `matrixmultiply::zgemm`, which is several times
//! faster than the generic complex product in `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Eigenvalues below this are treated as a modeling error by [`psd_sqrt`].
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Relative pivot threshold used when deciding whether a factorization
/// "failed" numerically.
const PIVOT_TOLERANCE: f64 = 1e-13;

/// Size below which the blocked Hermitian inverse falls back to a plain
/// Cholesky inverse.
const BLOCK_LEAF: usize = 48;

/// `S <- (S + S^H) / 2`.
pub fn hermitize(s: &mut CMatrix) {
    let n = s.nrows();
    debug_assert_eq!(n, s.ncols());
    for j in 0..n {
        s[(j, j)].im = 0.0;
        for i in (j + 1)..n {
            let avg = (s[(i, j)] + s[(j, i)].conj()) * 0.5;
            s[(i, j)] = avg;
            s[(j, i)] = avg.conj();
        }
    }
}

pub fn hermitized(mut s: CMatrix) -> CMatrix {
    hermitize(&mut s);
    s
}

fn gemm(a: &CMatrix, b: &CMatrix) -> CMatrix {
    use matrixmultiply::CGemmOption;

    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    assert_eq!(k, b.nrows(), "inner dimensions of matrix product differ");
    let mut c = CMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: `Complex64` is `repr(C)` with layout `[f64; 2]`; the pointers and
    // column-major strides describe exactly the storage of `a`, `b` and `c`,
    // and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::zgemm(
            CGemmOption::Standard,
            CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            1,
            m as isize,
            b.as_ptr() as *const [f64; 2],
            1,
            k as isize,
            [0.0, 0.0],
            c.as_mut_ptr() as *mut [f64; 2],
            1,
            m as isize,
        );
    }
    c
}

/// `A B`
pub fn matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    gemm(a, b)
}

/// `A B^H`
pub fn matmul_adj(a: &CMatrix, b: &CMatrix) -> CMatrix {
    gemm(a, &b.adjoint())
}

/// `A^H B`
pub fn adj_matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    gemm(&a.adjoint(), b)
}

/// Zero-order Bessel function of the first kind.
///
/// Power series up to |x| < 12, Hankel asymptotic expansion beyond.
pub fn bessel_j0(x: f64) -> f64 {
    let x = x.abs();
    if x < 12.0 {
        let q = -(x * x) / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= q / (k * k);
            sum += term;
            if term.abs() < 1e-17 * sum.abs().max(1e-300) && k > 2.0 {
                break;
            }
            k += 1.0;
            if k > 200.0 {
                break;
            }
        }
        sum
    } else {
        // u_k = a_k(0) / x^k with a_k(0) = prod_j (-(2j-1)^2) / (k! 8^k)
        let mut p = 1.0;
        let mut q = 0.0;
        let mut u: f64 = 1.0;
        let mut last = f64::INFINITY;
        for k in 1..60 {
            let odd = (2 * k - 1) as f64;
            u *= -(odd * odd) / (k as f64 * 8.0 * x);
            if u.abs() >= last || u.abs() < 1e-18 {
                break;
            }
            last = u.abs();
            // P takes even k with sign (-1)^(k/2), Q odd k with sign (-1)^((k-1)/2).
            let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
            if k % 2 == 0 {
                p += sign * u;
            } else {
                q += sign * u;
            }
        }
        let w = x - std::f64::consts::FRAC_PI_4;
        (2.0 / (std::f64::consts::PI * x)).sqrt() * (p * w.cos() - q * w.sin())
    }
}

/// Hermitian square root of a PSD matrix via eigendecomposition.
///
/// Eigenvalues in `[-1e-9, 0)` are clipped to zero; anything more negative is
/// rejected.
pub fn psd_sqrt(s: &CMatrix) -> Result<CMatrix> {
    if s.nrows() != s.ncols() {
        return Err(Error::Dimension(format!(
            "psd_sqrt needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let eig = SymmetricEigen::new(hermitized(s.clone()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let root = lambda.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(root);
    }
    Ok(hermitized(matmul_adj(&scaled, &eig.eigenvectors)))
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(s: &CMatrix) -> f64 {
    SymmetricEigen::new(hermitized(s.clone()))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Vector of i.i.d. CN(0, 1) entries.
pub fn standard_cn<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CVector {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    CVector::from_fn(dim, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * scale, im * scale)
    })
}

/// Circularly symmetric complex Gaussian sampler with a precomputed root.
#[derive(Debug, Clone)]
pub struct CnSampler {
    root: CMatrix,
}

impl CnSampler {
    pub fn new(cov: &CMatrix) -> Result<Self> {
        Ok(Self { root: psd_sqrt(cov)? })
    }

    pub fn dim(&self) -> usize {
        self.root.nrows()
    }

    /// Draws `mean + B z` with `z ~ CN(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &CVector, rng: &mut R) -> CVector {
        let z = standard_cn(self.dim(), rng);
        mean + &self.root * z
    }
}

/// One draw from `CN(mean, cov)`.
pub fn sample_cn<R: Rng + ?Sized>(mean: &CVector, cov: &CMatrix, rng: &mut R) -> Result<CVector> {
    if mean.len() != cov.nrows() {
        return Err(Error::Dimension(format!(
            "mean has length {}, covariance is {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    Ok(CnSampler::new(cov)?.sample(mean, rng))
}

fn max_abs_diag(s: &CMatrix) -> f64 {
    s.diagonal().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn cholesky_leaf_inverse(s: &CMatrix, pivot_floor: f64) -> Option<CMatrix> {
    let chol = Cholesky::new(s.clone())?;
    let l = chol.l_dirty();
    if (0..s.nrows()).any(|i| {
        let p = l[(i, i)].re;
        !(p * p > pivot_floor)
    }) {
        return None;
    }
    Some(chol.inverse())
}

/// Inverse of a Hermitian positive definite matrix by recursive 2x2 block
/// elimination. Returns `None` if any Schur complement is not numerically PD.
fn hpd_inverse(s: &CMatrix, pivot_floor: f64) -> Option<CMatrix> {
    let n = s.nrows();
    if n <= BLOCK_LEAF {
        return cholesky_leaf_inverse(s, pivot_floor);
    }
    let n1 = n / 2;
    let n2 = n - n1;
    let a = s.view((0, 0), (n1, n1)).into_owned();
    let b = s.view((0, n1), (n1, n2)).into_owned();
    let d = s.view((n1, n1), (n2, n2)).into_owned();

    let a_inv = hpd_inverse(&a, pivot_floor)?;
    let x = matmul(&a_inv, &b);
    let schur = hermitized(d - adj_matmul(&b, &x));
    let schur_inv = hpd_inverse(&schur, pivot_floor)?;
    let y = matmul(&x, &schur_inv);
    let top_left = a_inv + matmul_adj(&y, &x);

    let mut out = CMatrix::zeros(n, n);
    out.view_mut((0, 0), (n1, n1)).copy_from(&top_left);
    out.view_mut((0, n1), (n1, n2)).copy_from(&(-&y));
    out.view_mut((n1, 0), (n2, n1)).copy_from(&(-y.adjoint()));
    out.view_mut((n1, n1), (n2, n2)).copy_from(&schur_inv);
    hermitize(&mut out);
    if out.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Some(out)
    } else {
        None
    }
}

fn lu_inverse(s: &CMatrix) -> Option<CMatrix> {
    let lu = s.clone().lu();
    let u = lu.u();
    let diag: Vec<f64> = u.diagonal().iter().map(|z| z.norm()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 || diag.iter().any(|&d| !(d > PIVOT_TOLERANCE * max)) {
        return None;
    }
    let inv = lu.try_inverse()?;
    if inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Some(hermitized(inv))
    } else {
        None
    }
}

/// Result of [`hermitian_inverse`].
#[derive(Debug, Clone)]
pub struct HermitianInverse {
    pub inverse: CMatrix,
    /// Jitter added to the diagonal before factorizing.
    pub jitter: f64,
    /// Whether the (jittered) input factored as positive definite.
    pub positive_definite: bool,
}

/// Inverse of a Hermitian matrix with a two-stage jitter policy.
///
/// First tries `S` as is (Cholesky, then LU for indefinite input); if both
/// factorizations fail, retries once with `S + 1e-9 * trace(S)/dim * I`.
pub fn hermitian_inverse(s: &CMatrix) -> Result<HermitianInverse> {
    let n = s.nrows();
    if n != s.ncols() {
        return Err(Error::Dimension(format!("cannot invert a {}x{} matrix", n, s.ncols())));
    }
    if n == 0 {
        return Ok(HermitianInverse { inverse: CMatrix::zeros(0, 0), jitter: 0.0, positive_definite: true });
    }
    let base = hermitized(s.clone());
    let max_jitter = 1e-9 * (base.trace().re / n as f64).abs();
    for jitter in [0.0, max_jitter] {
        let mut m = base.clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[(i, i)].re += jitter;
            }
        }
        let floor = PIVOT_TOLERANCE * max_abs_diag(&m);
        if let Some(inverse) = hpd_inverse(&m, floor) {
            return Ok(HermitianInverse { inverse, jitter, positive_definite: true });
        }
        if let Some(inverse) = lu_inverse(&m) {
            return Ok(HermitianInverse { inverse, jitter, positive_definite: false });
        }
        if max_jitter == 0.0 {
            break;
        }
    }
    Err(Error::Singular { jitter: max_jitter })
}

/// Hermitian inverse with the jitter policy of [`hermitian_inverse`].
pub fn regularized_inverse(s: &CMatrix) -> Result<CMatrix> {
    hermitian_inverse(s).map(|r| r.inverse)
}

/// `log det S` for Hermitian positive definite `S`.
pub fn log_det_hpd(s: &CMatrix) -> Result<f64> {
    let chol = Cholesky::new(hermitized(s.clone())).ok_or(Error::Singular { jitter: 0.0 })?;
    let l = chol.l_dirty();
    Ok((0..s.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum())
}

/// `log CN(x | mean, cov)` for Hermitian positive definite `cov`.
pub fn cn_log_density(x: &CVector, mean: &CVector, cov: &CMatrix) -> Result<f64> {
    let chol = Cholesky::new(hermitized(cov.clone())).ok_or(Error::Singular { jitter: 0.0 })?;
    let d = x - mean;
    let sol = chol.solve(&d);
    let quad = d.dotc(&sol).re;
    let l = chol.l_dirty();
    let log_det: f64 = (0..cov.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum();
    Ok(-quad - log_det - cov.nrows() as f64 * std::f64::consts::PI.ln())
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

/// Real diagonal matrix.
pub fn diag_real(values: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(values.len(), values.iter().map(|&v| Complex64::new(v, 0.0))))
}

pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn max_abs_diff_vec(a: &CVector, b: &CVector) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn is_finite(m: &CMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}
