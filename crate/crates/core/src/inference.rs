//! Gaussian message-passing kernels for joint channel estimation and symbol
//! detection.
//!
//! Beliefs over the stacked channel `h_t` are complex Gaussians in
//! moment form; observation factors are kept in natural form
//! `(eta, Lambda)` because their covariance may be singular. `Lambda` is
//! only ever added to or subtracted from a precision, never inverted alone.

use num_complex::Complex64;

use crate::channel::{unvec, ChannelModel};
use crate::error::{Error, Result};
use crate::frame::{apply_s, apply_s_adjoint, cov_s_adjoint, s_adjoint_x_s, s_cov_s_adjoint, Constellation};
use crate::numerics::{
    hermitian_inverse, hermitized, matmul, matmul_adj, min_eigenvalue, regularized_inverse, CMatrix, CVector,
};

/// Largest number of symbol vectors the exact kernels will enumerate.
pub const ENUMERATION_LIMIT: usize = 4096;

/// Eigenvalue below which a cavity is reported as collapsed.
pub const COLLAPSE_TOLERANCE: f64 = 1e-6;

/// Complex Gaussian `CN(mean, cov)` over the stacked channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: CVector,
    pub cov: CMatrix,
}

impl GaussianBelief {
    pub fn new(mean: CVector, cov: CMatrix) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Observation factor in natural parameters: `eta = Lambda m^O`, `Lambda = (V^O)^{-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsFactorNat {
    pub eta: CVector,
    pub lambda: CMatrix,
}

impl ObsFactorNat {
    /// The flat factor.
    pub fn zero(dim: usize) -> Self {
        Self { eta: CVector::zeros(dim), lambda: CMatrix::zeros(dim, dim) }
    }
}

/// Output of a moment-matching step.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub posterior: GaussianBelief,
    /// `(d log Z / d m)^H`
    pub grad_m: CVector,
    /// `(d log Z / d V)^T`
    pub grad_v: CMatrix,
    /// Normalizer `Z_t` (may underflow to zero for large `M`; see `log_evidence`).
    pub evidence: f64,
    pub log_evidence: f64,
    /// Posterior symbol pmf indexed like [`Constellation::candidate`].
    pub symbol_pmf: Option<Vec<f64>>,
}

/// Gain matrices of one smoother step.
#[derive(Debug, Clone)]
pub struct SmootherGain {
    /// `F_t = Q + A V^R_t A^H`
    pub f: CMatrix,
    /// `J_t = V^R_t A^H F_t^{-1}`
    pub j: CMatrix,
}

/// Per-candidate quantities of the evidence `Z_t`.
#[derive(Debug, Clone)]
pub struct EvidenceTerms {
    /// `log CN(y | S m, Sigma)`
    pub log_density: f64,
    /// `Sigma = S V S^H + R_w`
    pub sigma: CMatrix,
    /// `zeta = y - S m`
    pub zeta: CVector,
    /// `Sigma^{-1}`
    pub sigma_inv: CMatrix,
}

impl EvidenceTerms {
    pub fn density(&self) -> f64 {
        self.log_density.exp()
    }
}

fn check_dims(cavity: &GaussianBelief, s: &CVector, y: &CVector) -> Result<usize> {
    let antennas = y.len();
    if antennas == 0 || cavity.dim() != antennas * s.len() || cavity.cov.shape() != (cavity.dim(), cavity.dim()) {
        return Err(Error::Dimension(format!(
            "belief of dimension {} does not match M = {} and K = {}",
            cavity.dim(),
            antennas,
            s.len()
        )));
    }
    Ok(antennas)
}

/// `m^F = A m^R`, `V^F = A V^R A^H + Q`.
pub fn predict(prev: &GaussianBelief, model: &ChannelModel) -> GaussianBelief {
    GaussianBelief { mean: model.apply_a(&prev.mean), cov: model.propagate_cov(&prev.cov) }
}

/// `Sigma`, `zeta` and `log CN(y | S m, Sigma)` for one symbol vector.
pub fn evidence_terms(cavity: &GaussianBelief, s: &CVector, y: &CVector, rw: &CMatrix) -> Result<EvidenceTerms> {
    let antennas = check_dims(cavity, s, y)?;
    let sigma = hermitized(s_cov_s_adjoint(s, &cavity.cov, antennas) + rw);
    let zeta = y - apply_s(s, &cavity.mean, antennas);
    let chol = nalgebra::Cholesky::new(sigma.clone()).ok_or(Error::Singular { jitter: 0.0 })?;
    let l = chol.l_dirty();
    let log_det: f64 = (0..antennas).map(|i| 2.0 * l[(i, i)].re.ln()).sum();
    let sigma_inv = hermitized(chol.inverse());
    let quad = zeta.dotc(&(&sigma_inv * &zeta)).re;
    let log_density = -quad - log_det - antennas as f64 * std::f64::consts::PI.ln();
    Ok(EvidenceTerms { log_density, sigma, zeta, sigma_inv })
}

fn posterior_from_gradients(cavity: &GaussianBelief, grad_m: &CVector, grad_v: &CMatrix) -> GaussianBelief {
    let mean = &cavity.mean + &cavity.cov * grad_m;
    let inner = grad_m * grad_m.adjoint() - grad_v;
    let cov = hermitized(&cavity.cov - matmul(&matmul(&cavity.cov, &inner), &cavity.cov));
    GaussianBelief { mean, cov }
}

/// Exact moment matching of `sum_s p(s) CN(h | m, V) CN(y | S h, R_w)` by
/// enumerating every symbol vector.
pub fn moment_match_exact(
    cavity: &GaussianBelief,
    prior_pmf: &[f64],
    constellation: &Constellation,
    y: &CVector,
    rw: &CMatrix,
) -> Result<MatchResult> {
    let antennas = y.len();
    let users = cavity.dim() / antennas.max(1);
    let candidates = constellation.candidate_count(users).unwrap_or(usize::MAX);
    if candidates > ENUMERATION_LIMIT {
        return Err(Error::EnumerationGuard { candidates, limit: ENUMERATION_LIMIT });
    }
    if prior_pmf.len() != candidates {
        return Err(Error::Dimension(format!("prior has {} entries, expected {candidates}", prior_pmf.len())));
    }

    struct Term {
        log_weight: f64,
        grad_m: CVector,
        grad_v: CMatrix,
    }
    let mut terms = Vec::with_capacity(candidates);
    for (idx, &p) in prior_pmf.iter().enumerate() {
        if p <= 0.0 {
            terms.push(None);
            continue;
        }
        let s = constellation.symbols(&constellation.candidate(idx, users));
        let ev = evidence_terms(cavity, &s, y, rw)?;
        let whitened = &ev.sigma_inv * &ev.zeta;
        let d = &whitened * whitened.adjoint() - &ev.sigma_inv;
        terms.push(Some(Term {
            log_weight: p.ln() + ev.log_density,
            grad_m: apply_s_adjoint(&s, &whitened),
            grad_v: s_adjoint_x_s(&s, &d),
        }));
    }
    let max_log = terms
        .iter()
        .flatten()
        .map(|t| t.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max_log.is_finite() {
        return Err(Error::Dimension("symbol prior has no mass".into()));
    }
    let total: f64 = terms.iter().flatten().map(|t| (t.log_weight - max_log).exp()).sum();
    let log_evidence = max_log + total.ln();

    let n = cavity.dim();
    let mut grad_m = CVector::zeros(n);
    let mut grad_v = CMatrix::zeros(n, n);
    let mut pmf = vec![0.0; candidates];
    for (idx, term) in terms.iter().enumerate() {
        if let Some(t) = term {
            let r = (t.log_weight - log_evidence).exp();
            pmf[idx] = r;
            grad_m.axpy(Complex64::new(r, 0.0), &t.grad_m, Complex64::new(1.0, 0.0));
            grad_v += &t.grad_v * Complex64::new(r, 0.0);
        }
    }
    let grad_v = hermitized(grad_v);
    let posterior = posterior_from_gradients(cavity, &grad_m, &grad_v);
    Ok(MatchResult {
        posterior,
        grad_m,
        grad_v,
        evidence: log_evidence.exp(),
        log_evidence,
        symbol_pmf: Some(pmf),
    })
}

/// Moment matching with the evidence sum collapsed onto a single symbol
/// vector (a hard decision or a known pilot).
pub fn moment_match_hard(cavity: &GaussianBelief, s_hat: &CVector, y: &CVector, rw: &CMatrix) -> Result<MatchResult> {
    let antennas = check_dims(cavity, s_hat, y)?;
    let ev = evidence_terms(cavity, s_hat, y, rw)?;
    let whitened = &ev.sigma_inv * &ev.zeta;
    let outer = &whitened * whitened.adjoint();
    // grad_V = S^H D S
    let d = &outer - &ev.sigma_inv;
    let grad_m = apply_s_adjoint(s_hat, &whitened);
    let grad_v = hermitized(s_adjoint_x_s(s_hat, &d));

    // grad_m grad_m^H - grad_V = S^H (outer - D) S; apply it through
    // W = V S^H so the update costs O(n^2 M) instead of O(n^3).
    let middle = hermitized(&outer - &d);
    let w = cov_s_adjoint(&cavity.cov, s_hat, antennas);
    let mean = &cavity.mean + &cavity.cov * &grad_m;
    let cov = hermitized(&cavity.cov - matmul_adj(&matmul(&w, &middle), &w));
    Ok(MatchResult {
        posterior: GaussianBelief { mean, cov },
        grad_m,
        grad_v,
        evidence: ev.log_density.exp(),
        log_evidence: ev.log_density,
        symbol_pmf: None,
    })
}

/// `log Z` for a symbol prior (helper for finite differences).
fn log_evidence(
    cavity: &GaussianBelief,
    prior_pmf: &[f64],
    constellation: &Constellation,
    y: &CVector,
    rw: &CMatrix,
) -> Result<f64> {
    let antennas = y.len();
    let users = cavity.dim() / antennas;
    let mut logs = Vec::new();
    for (idx, &p) in prior_pmf.iter().enumerate() {
        if p > 0.0 {
            let s = constellation.symbols(&constellation.candidate(idx, users));
            logs.push(p.ln() + evidence_terms(cavity, &s, y, rw)?.log_density);
        }
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// Largest deviation between the analytic gradients of `log Z` returned by
/// [`moment_match_exact`] and central finite differences.
///
/// The mean is perturbed along each real and imaginary coordinate; the
/// covariance along a Hermitian basis. With `f = log Z`,
/// `grad_m[j] = (df/dRe m_j + i df/dIm m_j) / 2` and, for Hermitian `E`,
/// `df(V + eE)/de = tr(grad_V E)`.
pub fn gradcheck(
    cavity: &GaussianBelief,
    prior_pmf: &[f64],
    constellation: &Constellation,
    y: &CVector,
    rw: &CMatrix,
) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let analytic = moment_match_exact(cavity, prior_pmf, constellation, y, rw)?;
    let f = |b: &GaussianBelief| log_evidence(b, prior_pmf, constellation, y, rw);
    let n = cavity.dim();
    let mut worst: f64 = 0.0;

    for j in 0..n {
        let mut partial = [0.0; 2];
        for (axis, dir) in [Complex64::new(STEP, 0.0), Complex64::new(0.0, STEP)].into_iter().enumerate() {
            let mut plus = cavity.clone();
            plus.mean[j] += dir;
            let mut minus = cavity.clone();
            minus.mean[j] -= dir;
            partial[axis] = (f(&plus)? - f(&minus)?) / (2.0 * STEP);
        }
        let fd = Complex64::new(partial[0], partial[1]) * 0.5;
        worst = worst.max((fd - analytic.grad_m[j]).norm());
    }

    let g = &analytic.grad_v;
    for i in 0..n {
        for j in i..n {
            let directions: Vec<(CMatrix, f64)> = if i == j {
                let mut e = CMatrix::zeros(n, n);
                e[(i, i)] = Complex64::new(1.0, 0.0);
                vec![(e, g[(i, i)].re)]
            } else {
                let mut sym = CMatrix::zeros(n, n);
                sym[(i, j)] = Complex64::new(1.0, 0.0);
                sym[(j, i)] = Complex64::new(1.0, 0.0);
                let mut skew = CMatrix::zeros(n, n);
                skew[(i, j)] = Complex64::new(0.0, 1.0);
                skew[(j, i)] = Complex64::new(0.0, -1.0);
                vec![(sym, 2.0 * g[(i, j)].re), (skew, 2.0 * g[(i, j)].im)]
            };
            for (e, expected) in directions {
                let mut plus = cavity.clone();
                plus.cov += &e * Complex64::new(STEP, 0.0);
                let mut minus = cavity.clone();
                minus.cov -= &e * Complex64::new(STEP, 0.0);
                let fd = (f(&plus)? - f(&minus)?) / (2.0 * STEP);
                worst = worst.max((fd - expected).abs());
            }
        }
    }
    Ok(worst)
}

/// Linear MMSE estimate `x = (H^H R_w^{-1} H + E_s^{-1} I)^{-1} H^H R_w^{-1} y`
/// followed by a per-user nearest-point decision.
pub fn detect_mmse(h: &CMatrix, y: &CVector, rw: &CMatrix, constellation: &Constellation) -> Result<Vec<usize>> {
    if h.nrows() != y.len() || rw.shape() != (y.len(), y.len()) {
        return Err(Error::Dimension(format!(
            "H is {}x{}, y has length {}",
            h.nrows(),
            h.ncols(),
            y.len()
        )));
    }
    let rw_chol = nalgebra::Cholesky::new(hermitized(rw.clone())).ok_or(Error::Singular { jitter: 0.0 })?;
    let rw_inv_h = rw_chol.solve(h);
    let mut gram = hermitized(h.adjoint() * &rw_inv_h);
    let ridge = 1.0 / constellation.energy;
    for k in 0..gram.nrows() {
        gram[(k, k)].re += ridge;
    }
    let rhs = rw_inv_h.adjoint() * y;
    let x = match nalgebra::Cholesky::new(gram.clone()) {
        Some(chol) => chol.solve(&rhs),
        None => regularized_inverse(&gram)? * rhs,
    };
    Ok(x.iter().map(|&xk| constellation.nearest(xk)).collect())
}

/// Exhaustive maximizer of `CN(y | S m, S V S^H + R_w)` over all symbol
/// vectors; ties go to the lowest candidate number.
pub fn detect_ml(cavity: &GaussianBelief, y: &CVector, rw: &CMatrix, constellation: &Constellation) -> Result<Vec<usize>> {
    let antennas = y.len();
    let users = cavity.dim() / antennas.max(1);
    let candidates = constellation.candidate_count(users).unwrap_or(usize::MAX);
    if candidates > ENUMERATION_LIMIT {
        return Err(Error::EnumerationGuard { candidates, limit: ENUMERATION_LIMIT });
    }
    let mut best = 0;
    let mut best_log = f64::NEG_INFINITY;
    for idx in 0..candidates {
        let s = constellation.symbols(&constellation.candidate(idx, users));
        let log_density = evidence_terms(cavity, &s, y, rw)?.log_density;
        if log_density > best_log {
            best_log = log_density;
            best = idx;
        }
    }
    Ok(constellation.candidate(best, users))
}

/// Observation factor from posterior and cavity precisions.
pub fn factor_from_precisions(
    posterior: &GaussianBelief,
    posterior_precision: &CMatrix,
    cavity: &GaussianBelief,
    cavity_precision: &CMatrix,
) -> ObsFactorNat {
    ObsFactorNat {
        eta: posterior_precision * &posterior.mean - cavity_precision * &cavity.mean,
        lambda: hermitized(posterior_precision - cavity_precision),
    }
}

/// `eta = V^{-1} m - (V^O)^{-1} m^O`, `Lambda = V^{-1} - (V^O)^{-1}`.
pub fn obs_factor_from(posterior: &GaussianBelief, cavity: &GaussianBelief) -> Result<ObsFactorNat> {
    let posterior_precision = regularized_inverse(&posterior.cov)?;
    let cavity_precision = regularized_inverse(&cavity.cov)?;
    Ok(factor_from_precisions(posterior, &posterior_precision, cavity, &cavity_precision))
}

/// Cavity `q / q^O` given the posterior precision; also returns the cavity
/// precision `V^{-1} - Lambda`.
pub fn obs_cavity_with_precision(
    posterior: &GaussianBelief,
    posterior_precision: &CMatrix,
    factor: &ObsFactorNat,
) -> Result<(GaussianBelief, CMatrix)> {
    let precision = hermitized(posterior_precision - &factor.lambda);
    let inv = hermitian_inverse(&precision)?;
    if !inv.positive_definite {
        let min_eigenvalue = min_eigenvalue(&inv.inverse);
        if min_eigenvalue < -COLLAPSE_TOLERANCE {
            return Err(Error::CavityCollapse { min_eigenvalue });
        }
    }
    let cov = inv.inverse;
    let mean = &cov * (posterior_precision * &posterior.mean - &factor.eta);
    Ok((GaussianBelief { mean, cov }, precision))
}

/// Observation factor left by a hard-decision (or pilot) update:
/// `eta = S^H R_w^{-1} y`, `Lambda = S^H R_w^{-1} S`.
pub fn hard_factor(s: &CVector, y: &CVector, rw_inv: &CMatrix) -> ObsFactorNat {
    ObsFactorNat { eta: apply_s_adjoint(s, &(rw_inv * y)), lambda: hermitized(s_adjoint_x_s(s, rw_inv)) }
}

/// Removes a [`hard_factor`] from a belief by a rank-`M` downdate:
/// `V^O = V + V S^H (R_w - S V S^H)^{-1} S V`,
/// `m^O = m + V^O S^H R_w^{-1} (S m - y)`.
pub fn obs_cavity_hard(
    posterior: &GaussianBelief,
    s: &CVector,
    y: &CVector,
    rw: &CMatrix,
    rw_inv: &CMatrix,
) -> Result<GaussianBelief> {
    let antennas = check_dims(posterior, s, y)?;
    let w = cov_s_adjoint(&posterior.cov, s, antennas);
    let gap = hermitized(rw - s_cov_s_adjoint(s, &posterior.cov, antennas));
    let inv = hermitian_inverse(&gap)?;
    if !inv.positive_definite {
        return Err(Error::CavityCollapse { min_eigenvalue: min_eigenvalue(&gap) });
    }
    let cov = hermitized(&posterior.cov + matmul_adj(&matmul(&w, &inv.inverse), &w));
    let residual = rw_inv * (apply_s(s, &posterior.mean, antennas) - y);
    let mean = &posterior.mean + &cov * apply_s_adjoint(s, &residual);
    Ok(GaussianBelief { mean, cov })
}

/// `V^O = (V^{-1} - Lambda)^{-1}`, `m^O = V^O (V^{-1} m - eta)`.
pub fn obs_cavity(posterior: &GaussianBelief, factor: &ObsFactorNat) -> Result<GaussianBelief> {
    let posterior_precision = regularized_inverse(&posterior.cov)?;
    obs_cavity_with_precision(posterior, &posterior_precision, factor).map(|(b, _)| b)
}

/// Combines a forward message with an observation factor given the forward
/// precision: `V^R = (P^F + Lambda)^{-1}`, `m^R = V^R (P^F m^F + eta)`.
pub fn combine_fr_with_precision(
    forward: &GaussianBelief,
    forward_precision: &CMatrix,
    factor: &ObsFactorNat,
) -> Result<GaussianBelief> {
    let precision = hermitized(forward_precision + &factor.lambda);
    let inv = hermitian_inverse(&precision)?;
    if !inv.positive_definite {
        let min_eigenvalue = min_eigenvalue(&inv.inverse);
        if min_eigenvalue < -COLLAPSE_TOLERANCE {
            return Err(Error::CavityCollapse { min_eigenvalue });
        }
    }
    let cov = inv.inverse;
    let mean = &cov * (forward_precision * &forward.mean + &factor.eta);
    Ok(GaussianBelief { mean, cov })
}

/// `V^R = ((V^F)^{-1} + Lambda)^{-1}`, `m^R = V^R ((V^F)^{-1} m^F + eta)`.
pub fn combine_fr(forward: &GaussianBelief, factor: &ObsFactorNat) -> Result<GaussianBelief> {
    let forward_precision = regularized_inverse(&forward.cov)?;
    combine_fr_with_precision(forward, &forward_precision, factor)
}

/// One backward smoother step:
/// `F = Q + A V^R A^H`, `J = V^R A^H F^{-1}`,
/// `m = m^R + J (m_{t+1} - A m^R)`, `V = V^R + J (V_{t+1} - F) J^H`.
pub fn smooth_step(
    current: &GaussianBelief,
    next_posterior: &GaussianBelief,
    model: &ChannelModel,
) -> Result<(GaussianBelief, SmootherGain)> {
    if current.dim() != model.dim() || next_posterior.dim() != model.dim() {
        return Err(Error::Dimension("smoother beliefs do not match the model dimension".into()));
    }
    let f = model.propagate_cov(&current.cov);
    let f_inv = regularized_inverse(&f)?;
    let j = matmul(&model.right_apply_a(&current.cov), &f_inv);
    let mean = &current.mean + &j * (&next_posterior.mean - model.apply_a(&current.mean));
    let cov = hermitized(&current.cov + matmul_adj(&matmul(&j, &(&next_posterior.cov - &f)), &j));
    Ok((GaussianBelief { mean, cov }, SmootherGain { f, j }))
}

/// `H^O = unvec(m^O)` for the MMSE detector.
pub fn mean_as_matrix(belief: &GaussianBelief, antennas: usize) -> CMatrix {
    unvec(&belief.mean, antennas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::build_model;
    use crate::config::SystemConfig;
    use crate::frame::{make_constellation, materialize_s};
    use crate::numerics::{diag_real, identity, max_abs_diff, max_abs_diff_vec, standard_cn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_hpd(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> CMatrix {
        let g = CMatrix::from_fn(n, n, |_, _| standard_cn(1, rng)[0]);
        hermitized((matmul_adj(&g, &g) + identity(n)) * Complex64::new(scale / n as f64, 0.0))
    }

    fn random_belief(n: usize, rng: &mut ChaCha8Rng) -> GaussianBelief {
        GaussianBelief::new(standard_cn(n, rng), random_hpd(n, 1.0, rng))
    }

    fn scalar(v: f64) -> CMatrix {
        diag_real(&[v])
    }

    fn cvec(values: &[f64]) -> CVector {
        CVector::from_iterator(values.len(), values.iter().map(|&v| Complex64::new(v, 0.0)))
    }

    fn model(antennas: usize, users: usize, doppler: f64) -> ChannelModel {
        build_model(&SystemConfig { antennas, users, pilot_len: users, doppler, rho: 0.3, ..SystemConfig::desk() })
            .unwrap()
    }

    #[test]
    fn predict_examples() {
        let static_model = model(2, 1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_belief(2, &mut rng);
        let p = predict(&b, &static_model);
        assert!(max_abs_diff_vec(&p.mean, &b.mean) < 1e-15);
        assert!(max_abs_diff(&p.cov, &b.cov) < 1e-15);

        let m = model(2, 2, 0.05);
        let a = m.ar_coeffs[0];
        let unit = GaussianBelief::new(CVector::zeros(4), identity(4));
        let p = predict(&unit, &m);
        let expected = identity(4) * Complex64::new(a * a, 0.0) + &m.rh * Complex64::new(1.0 - a * a, 0.0);
        assert!(max_abs_diff(&p.cov, &expected) < 1e-12);

        let mut b = GaussianBelief::new(CVector::zeros(4), m.rh.clone());
        for _ in 0..50 {
            b = predict(&b, &m);
        }
        assert!(max_abs_diff(&b.cov, &m.rh) < 1e-10);
    }

    #[test]
    fn evidence_at_zero_covariance() {
        let s = cvec(&[1.0, -1.0]);
        let cavity = GaussianBelief::new(cvec(&[0.3, 0.1, -0.2, 0.5]), CMatrix::zeros(4, 4));
        let y = apply_s(&s, &cavity.mean, 2);
        let ev = evidence_terms(&cavity, &s, &y, &identity(2)).unwrap();
        assert!((ev.density() - std::f64::consts::PI.powi(-2)).abs() < 1e-14);
    }

    #[test]
    fn evidence_matches_dense_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = make_constellation(4, 1.0).unwrap();
        for _ in 0..20 {
            let cavity = random_belief(4, &mut rng);
            let s = c.symbols(&[1, 3]);
            let y = standard_cn(2, &mut rng);
            let rw = random_hpd(2, 2.0, &mut rng) + identity(2);
            let ev = evidence_terms(&cavity, &s, &y, &rw).unwrap();
            let dense = materialize_s(&s, 2);
            let sigma = &dense * &cavity.cov * dense.adjoint() + &rw;
            let zeta = &y - &dense * &cavity.mean;
            let sigma_inv = sigma.clone().try_inverse().unwrap();
            let det = sigma.determinant().re;
            let expected = -(zeta.adjoint() * sigma_inv * &zeta)[(0, 0)].re - det.ln() - 2.0 * std::f64::consts::PI.ln();
            assert!((ev.log_density - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn single_symbol_prior_is_a_kalman_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = make_constellation(4, 1.0).unwrap();
        let (m, k) = (2, 2);
        for _ in 0..20 {
            let cavity = random_belief(m * k, &mut rng);
            let y = standard_cn(m, &mut rng);
            let rw = random_hpd(m, 1.0, &mut rng) + identity(m);
            let idx = 9;
            let mut prior = vec![0.0; 16];
            prior[idx] = 1.0;
            let s = c.symbols(&c.candidate(idx, k));
            let exact = moment_match_exact(&cavity, &prior, &c, &y, &rw).unwrap();
            let hard = moment_match_hard(&cavity, &s, &y, &rw).unwrap();

            // textbook update with the dense observation matrix
            let h = materialize_s(&s, m);
            let innov = &h * &cavity.cov * h.adjoint() + &rw;
            let gain = &cavity.cov * h.adjoint() * innov.try_inverse().unwrap();
            let mean = &cavity.mean + &gain * (&y - &h * &cavity.mean);
            let cov = &cavity.cov - &gain * &h * &cavity.cov;

            for r in [&exact, &hard] {
                assert!(max_abs_diff_vec(&r.posterior.mean, &mean) < 1e-8);
                assert!(max_abs_diff(&r.posterior.cov, &cov) < 1e-8);
            }
            assert!(max_abs_diff(&exact.grad_v, &hard.grad_v) < 1e-10);
            assert!((exact.log_evidence - hard.log_evidence).abs() < 1e-10);
            let pmf = exact.symbol_pmf.unwrap();
            assert!((pmf[idx] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_instance_has_uniform_symbol_posterior() {
        let c = make_constellation(4, 1.0).unwrap();
        let cavity = GaussianBelief::new(CVector::zeros(2), identity(2));
        let r = moment_match_exact(&cavity, &[0.25; 4], &c, &CVector::zeros(2), &identity(2)).unwrap();
        let pmf = r.symbol_pmf.unwrap();
        for p in &pmf {
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert!(r.evidence > 0.0);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_guard() {
        let c = make_constellation(4, 1.0).unwrap();
        let cavity = GaussianBelief::new(CVector::zeros(7), identity(7));
        let err = moment_match_exact(&cavity, &[], &c, &CVector::zeros(1), &identity(1)).unwrap_err();
        assert!(matches!(err, Error::EnumerationGuard { candidates: 16384, .. }));
        assert!(detect_ml(&cavity, &CVector::zeros(1), &identity(1), &c).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = make_constellation(4, 1.0).unwrap();
        for users in [1, 2] {
            let n = 2 * users;
            let count = c.candidate_count(users).unwrap();
            for _ in 0..5 {
                let cavity = random_belief(n, &mut rng);
                let y = standard_cn(2, &mut rng);
                let rw = random_hpd(2, 1.0, &mut rng) + identity(2);
                let uniform = vec![1.0 / count as f64; count];
                assert!(gradcheck(&cavity, &uniform, &c, &y, &rw).unwrap() < 1e-4);
                let mut pilot = vec![0.0; count];
                pilot[count - 1] = 1.0;
                assert!(gradcheck(&cavity, &pilot, &c, &y, &rw).unwrap() < 1e-4);
            }
        }
    }

    #[test]
    fn zero_cavity_covariance_keeps_the_mean() {
        let c = make_constellation(4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cavity = GaussianBelief::new(standard_cn(2, &mut rng), CMatrix::zeros(2, 2));
        let y = standard_cn(2, &mut rng);
        let r = moment_match_exact(&cavity, &[0.25; 4], &c, &y, &identity(2)).unwrap();
        assert!(max_abs_diff_vec(&r.posterior.mean, &cavity.mean) < 1e-15);
        assert!(r.posterior.cov.iter().all(|z| z.norm() < 1e-15));
        assert!(gradcheck(&cavity, &[0.25; 4], &c, &y, &identity(2)).unwrap() < 1e-4);
    }

    #[test]
    fn mmse_recovers_symbols_in_the_noiseless_limit() {
        let c = make_constellation(4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let truth: Vec<usize> = (0..4).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect();
            let s = c.symbols(&truth);
            let h = identity(4);
            let y = &h * &s;
            let rw = identity(4) * Complex64::new(1e-9, 0.0);
            assert_eq!(detect_mmse(&h, &y, &rw, &c).unwrap(), truth);
        }
    }

    #[test]
    fn mmse_ties_go_to_lowest_index() {
        let c = make_constellation(4, 1.0).unwrap();
        // x = 0 exactly: every point is equidistant
        let h = identity(1);
        let d = detect_mmse(&h, &CVector::zeros(1), &identity(1), &c).unwrap();
        assert_eq!(d, vec![0]);
    }

    #[test]
    fn mmse_is_error_free_at_high_snr() {
        let c = make_constellation(4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (m, k) = (16, 4);
        let rw = identity(m) * Complex64::new(0.01, 0.0);
        let mut errors = 0;
        for _ in 0..100 {
            let h = CMatrix::from_fn(m, k, |_, _| standard_cn(1, &mut rng)[0]);
            let truth: Vec<usize> = (0..k).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect();
            let y = &h * c.symbols(&truth) + standard_cn(m, &mut rng) * Complex64::new(0.1, 0.0);
            let d = detect_mmse(&h, &y, &rw, &c).unwrap();
            errors += d.iter().zip(&truth).filter(|(a, b)| a != b).count();
        }
        assert_eq!(errors, 0);
    }

    #[test]
    fn ml_detection() {
        let c = make_constellation(4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, k) = (2, 2);
        for _ in 0..10 {
            let truth = vec![rand::Rng::random_range(&mut rng, 0..4), rand::Rng::random_range(&mut rng, 0..4)];
            let cavity = GaussianBelief::new(standard_cn(m * k, &mut rng), CMatrix::zeros(m * k, m * k));
            let y = apply_s(&c.symbols(&truth), &cavity.mean, m);
            assert_eq!(detect_ml(&cavity, &y, &identity(m), &c).unwrap(), truth);
        }
        // agrees with a brute-force density table
        for _ in 0..10 {
            let cavity = random_belief(m * k, &mut rng);
            let y = standard_cn(m, &mut rng);
            let rw = identity(m);
            let mut best = (0, f64::NEG_INFINITY);
            for idx in 0..16 {
                let dense = materialize_s(&c.symbols(&c.candidate(idx, k)), m);
                let sigma = &dense * &cavity.cov * dense.adjoint() + &rw;
                let zeta = &y - &dense * &cavity.mean;
                let lp = -(zeta.adjoint() * sigma.clone().try_inverse().unwrap() * &zeta)[(0, 0)].re
                    - sigma.determinant().re.ln();
                if lp > best.1 {
                    best = (idx, lp);
                }
            }
            assert_eq!(detect_ml(&cavity, &y, &rw, &c).unwrap(), c.candidate(best.0, k));
        }
    }

    #[test]
    fn ml_agrees_with_mmse_at_high_snr() {
        let c = make_constellation(4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (m, k) = (8, 2);
        for _ in 0..20 {
            let mean = standard_cn(m * k, &mut rng);
            let cavity = GaussianBelief::new(mean.clone(), identity(m * k) * Complex64::new(1e-4, 0.0));
            let truth = vec![rand::Rng::random_range(&mut rng, 0..4), rand::Rng::random_range(&mut rng, 0..4)];
            let rw = identity(m) * Complex64::new(1e-3, 0.0);
            let y = apply_s(&c.symbols(&truth), &mean, m) + standard_cn(m, &mut rng) * Complex64::new(0.01, 0.0);
            let ml = detect_ml(&cavity, &y, &rw, &c).unwrap();
            let mmse = detect_mmse(&unvec(&mean, m), &y, &rw, &c).unwrap();
            assert_eq!(ml, mmse);
            assert_eq!(ml, truth);
        }
    }

    #[test]
    fn hard_update_never_increases_uncertainty() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let c = make_constellation(4, 1.0).unwrap();
        for _ in 0..20 {
            let cavity = random_belief(6, &mut rng);
            let s = c.symbols(&[0, 2]);
            let y = standard_cn(3, &mut rng);
            let rw = identity(3);
            let post = moment_match_hard(&cavity, &s, &y, &rw).unwrap().posterior;
            assert!(min_eigenvalue(&(&cavity.cov - &post.cov)) > -1e-9);
        }
    }

    #[test]
    fn factor_scalar_examples() {
        let cavity = GaussianBelief::new(cvec(&[0.0]), scalar(1.0));
        let posterior = GaussianBelief::new(cvec(&[1.0]), scalar(0.5));
        let f = obs_factor_from(&posterior, &cavity).unwrap();
        assert!((f.lambda[(0, 0)].re - 1.0).abs() < 1e-14);
        assert!((f.eta[0].re - 2.0).abs() < 1e-14);
        let back = obs_cavity(&posterior, &f).unwrap();
        assert!((back.cov[(0, 0)].re - 1.0).abs() < 1e-14);
        assert!(back.mean[0].norm() < 1e-14);

        let same = obs_factor_from(&cavity, &cavity).unwrap();
        assert!(same.lambda.norm() < 1e-15 && same.eta.norm() < 1e-15);
        let unchanged = obs_cavity(&posterior, &ObsFactorNat::zero(1)).unwrap();
        assert!(max_abs_diff(&unchanged.cov, &posterior.cov) < 1e-15);

        let forward = GaussianBelief::new(cvec(&[0.0]), scalar(1.0));
        let factor = ObsFactorNat { eta: cvec(&[2.0]), lambda: scalar(1.0) };
        let r = combine_fr(&forward, &factor).unwrap();
        assert!((r.cov[(0, 0)].re - 0.5).abs() < 1e-14);
        assert!((r.mean[0].re - 1.0).abs() < 1e-14);
        let r = combine_fr(&forward, &ObsFactorNat::zero(1)).unwrap();
        assert_eq!(r, forward);
    }

    #[test]
    fn hard_factor_matches_the_moment_matched_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let c = make_constellation(4, 1.0).unwrap();
        for _ in 0..20 {
            let cavity = random_belief(6, &mut rng);
            let s = c.symbols(&[3, 1]);
            let y = standard_cn(3, &mut rng);
            let rw = random_hpd(3, 1.0, &mut rng) + identity(3);
            let rw_inv = regularized_inverse(&rw).unwrap();
            let post = moment_match_hard(&cavity, &s, &y, &rw).unwrap().posterior;
            let generic = obs_factor_from(&post, &cavity).unwrap();
            let closed = hard_factor(&s, &y, &rw_inv);
            assert!(max_abs_diff(&generic.lambda, &closed.lambda) < 1e-8);
            assert!(max_abs_diff_vec(&generic.eta, &closed.eta) < 1e-8);
            let back = obs_cavity_hard(&post, &s, &y, &rw, &rw_inv).unwrap();
            assert!(max_abs_diff(&back.cov, &cavity.cov) < 1e-8);
            assert!(max_abs_diff_vec(&back.mean, &cavity.mean) < 1e-8);
            let fr = combine_fr(&cavity, &closed).unwrap();
            assert!(max_abs_diff(&fr.cov, &post.cov) < 1e-8);
            assert!(max_abs_diff_vec(&fr.mean, &post.mean) < 1e-8);
        }
    }

    #[test]
    fn cavity_collapse_is_reported() {
        let posterior = GaussianBelief::new(cvec(&[0.0]), scalar(1.0));
        let factor = ObsFactorNat { eta: cvec(&[0.0]), lambda: scalar(3.0) };
        assert!(matches!(obs_cavity(&posterior, &factor), Err(Error::CavityCollapse { .. })));
    }

    #[test]
    fn factor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let cavity = random_belief(4, &mut rng);
            let s = cvec(&[1.0, -1.0]);
            let y = standard_cn(2, &mut rng);
            let post = moment_match_hard(&cavity, &s, &y, &identity(2)).unwrap().posterior;
            let f = obs_factor_from(&post, &cavity).unwrap();
            let back = obs_cavity(&post, &f).unwrap();
            assert!(max_abs_diff_vec(&back.mean, &cavity.mean) < 1e-8);
            assert!(max_abs_diff(&back.cov, &cavity.cov) < 1e-8);
        }
    }

    #[test]
    fn smoother_fixed_point_and_static_limit() {
        let m = model(2, 2, 0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let current = random_belief(4, &mut rng);
        let next = GaussianBelief::new(m.apply_a(&current.mean), m.propagate_cov(&current.cov));
        let (out, gain) = smooth_step(&current, &next, &m).unwrap();
        assert!(max_abs_diff_vec(&out.mean, &current.mean) < 1e-12);
        assert!(max_abs_diff(&out.cov, &current.cov) < 1e-12);
        assert!(min_eigenvalue(&gain.f) > 0.0);

        let frozen = model(2, 2, 0.0);
        let next = random_belief(4, &mut rng);
        let (out, gain) = smooth_step(&current, &next, &frozen).unwrap();
        assert!(max_abs_diff(&gain.j, &identity(4)) < 1e-10);
        assert!(max_abs_diff_vec(&out.mean, &next.mean) < 1e-10);
        assert!(max_abs_diff(&out.cov, &next.cov) < 1e-10);
    }

    #[test]
    fn smoother_reduces_uncertainty_when_next_is_tighter() {
        let m = model(2, 2, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let current = random_belief(4, &mut rng);
            let f = m.propagate_cov(&current.cov);
            // V_{t+1} = F - (something PSD) keeps V_{t+1} <= F
            let shrink = random_hpd(4, 0.05, &mut rng);
            let next_cov = hermitized(&f - matmul(&matmul(&f, &shrink), &f) * Complex64::new(0.5, 0.0));
            if min_eigenvalue(&next_cov) <= 0.0 {
                continue;
            }
            let next = GaussianBelief::new(standard_cn(4, &mut rng), next_cov);
            let (out, _) = smooth_step(&current, &next, &m).unwrap();
            assert!(out.cov.trace().re <= current.cov.trace().re + 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn exact_match_pmf_is_normalized(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = make_constellation(4, 1.0).unwrap();
            let cavity = random_belief(4, &mut rng);
            let y = standard_cn(2, &mut rng) * Complex64::new(3.0, 0.0);
            let r = moment_match_exact(&cavity, &[1.0 / 16.0; 16], &c, &y, &identity(2)).unwrap();
            let pmf = r.symbol_pmf.unwrap();
            proptest::prop_assert!(pmf.iter().all(|&p| (0.0..=1.0).contains(&p)));
            proptest::prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            proptest::prop_assert!(r.evidence > 0.0);
            proptest::prop_assert!(max_abs_diff(&r.posterior.cov, &r.posterior.cov.adjoint()) < 1e-10);
            proptest::prop_assert!(min_eigenvalue(&r.posterior.cov) > -1e-6);
        }
    }
}
