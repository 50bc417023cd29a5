//! Spatio-temporal channel model and ground-truth channel simulation.
//!
//! The stacked channel `h_t = vec(H_t)` has length `M K`; entry `n` belongs to
//! user `n / M` (zero-based) and antenna `n % M`. It evolves as
//! `h_t = A h_{t-1} + v_t` with `v_t ~ CN(0, Q)`.

use std::io::{BufRead, BufReader, Read, Write};

use num_complex::Complex64;
use rand::Rng;

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::numerics::{bessel_j0, hermitized, matmul, max_abs_diff, psd_sqrt, CMatrix, CVector, CnSampler};

/// Large-scale gains seen by the target base station (cell 0).
#[derive(Debug, Clone, PartialEq)]
pub struct CellGains {
    /// `beta[i][k]`: gain of user `k` in cell `i`.
    pub beta: Vec<Vec<f64>>,
}

impl CellGains {
    /// Unit gains in the target cell, `a` for every user of every other cell.
    pub fn uniform(cells: usize, users: usize, cross_gain: f64) -> Self {
        let beta = (0..cells)
            .map(|i| vec![if i == 0 { 1.0 } else { cross_gain }; users])
            .collect();
        Self { beta }
    }

    pub fn cells(&self) -> usize {
        self.beta.len()
    }

    pub fn users(&self) -> usize {
        self.beta.first().map_or(0, Vec::len)
    }
}

/// Exponential (Kac-Murdock-Szego) correlation: entry `(m, n)` is `rho^|m-n|`.
pub fn build_spatial_corr(antennas: usize, rho: f64) -> Result<CMatrix> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("spatial correlation rho must lie in [0, 1), got {rho}")));
    }
    Ok(CMatrix::from_fn(antennas, antennas, |m, n| {
        let lag = m.abs_diff(n) as i32;
        Complex64::new(if lag == 0 { 1.0 } else { rho.powi(lag) }, 0.0)
    }))
}

/// Aggregate disturbance covariance `R_w = E_s sum_{i != 0} sum_k beta_ik R_ik + I`.
///
/// `corr[i][k]` is the spatial correlation of user `k` in cell `i`; entries for
/// the target cell are ignored.
pub fn build_rw(energy: f64, gains: &CellGains, corr: &[Vec<CMatrix>]) -> Result<CMatrix> {
    if corr.len() != gains.cells() {
        return Err(Error::Dimension(format!(
            "{} cells of correlation matrices for {} cells of gains",
            corr.len(),
            gains.cells()
        )));
    }
    let antennas = corr
        .iter()
        .flatten()
        .next()
        .map(|r| r.nrows())
        .ok_or_else(|| Error::Dimension("no correlation matrices".into()))?;
    let mut rw = CMatrix::identity(antennas, antennas);
    for (i, (cell_gains, cell_corr)) in gains.beta.iter().zip(corr).enumerate().skip(1) {
        if cell_corr.len() != cell_gains.len() {
            return Err(Error::Dimension(format!("cell {i}: gains and correlations differ in length")));
        }
        for (&beta, r) in cell_gains.iter().zip(cell_corr) {
            if r.shape() != (antennas, antennas) {
                return Err(Error::Dimension(format!("cell {i}: correlation matrix is not {antennas}x{antennas}")));
            }
            rw += r * Complex64::new(energy * beta, 0.0);
        }
    }
    Ok(hermitized(rw))
}

/// Statistical model of the target cell's channel as seen by its base station.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub antennas: usize,
    pub users: usize,
    /// Per-user spatial correlation `R_k` (M x M, unit diagonal).
    pub spatial_corr: Vec<CMatrix>,
    /// Per-user large-scale gain `beta_k`.
    pub gains: Vec<f64>,
    /// Normalized Doppler per stacked coefficient.
    pub doppler: Vec<f64>,
    /// AR(1) coefficients `a_n` (diagonal of `A`).
    pub ar_coeffs: Vec<f64>,
    /// Innovation variances `1 - a_n^2` (diagonal of `Q_v`).
    pub innovation_var: Vec<f64>,
    /// `blockdiag(beta_1 R_1, ..., beta_K R_K)`.
    pub rh: CMatrix,
    /// `R_h^{1/2} Q_v R_h^{1/2}`.
    pub q: CMatrix,
    /// Aggregate disturbance covariance at the target base station.
    pub rw: CMatrix,
    /// Average symbol energy (linear).
    pub energy: f64,
    prior_sampler: CnSampler,
    innovation_sampler: CnSampler,
    disturbance_sampler: CnSampler,
}

impl ChannelModel {
    /// Assembles a model from its ingredients. `doppler` holds one normalized
    /// Doppler shift per stacked coefficient.
    pub fn from_parts(
        spatial_corr: Vec<CMatrix>,
        gains: Vec<f64>,
        doppler: Vec<f64>,
        rw: CMatrix,
        energy: f64,
    ) -> Result<Self> {
        let users = spatial_corr.len();
        if users == 0 || gains.len() != users {
            return Err(Error::Dimension("need one gain per spatial correlation matrix".into()));
        }
        let antennas = spatial_corr[0].nrows();
        let dim = antennas * users;
        if doppler.len() != dim {
            return Err(Error::Dimension(format!("need {dim} Doppler values, got {}", doppler.len())));
        }
        if rw.shape() != (antennas, antennas) {
            return Err(Error::Dimension(format!("R_w must be {antennas}x{antennas}")));
        }
        let mut rh = CMatrix::zeros(dim, dim);
        for (k, (r, &beta)) in spatial_corr.iter().zip(&gains).enumerate() {
            if r.shape() != (antennas, antennas) {
                return Err(Error::Dimension(format!("R_{k} is not {antennas}x{antennas}")));
            }
            rh.view_mut((k * antennas, k * antennas), (antennas, antennas))
                .copy_from(&(r * Complex64::new(beta, 0.0)));
        }
        let ar_coeffs: Vec<f64> = doppler
            .iter()
            .map(|&fd| bessel_j0(2.0 * std::f64::consts::PI * fd))
            .collect();
        let innovation_var: Vec<f64> = ar_coeffs.iter().map(|a| 1.0 - a * a).collect();

        let rh_root = psd_sqrt(&rh)?;
        let mut scaled = rh_root.clone();
        for (j, &s2) in innovation_var.iter().enumerate() {
            scaled.column_mut(j).scale_mut(s2);
        }
        let q = hermitized(matmul(&scaled, &rh_root));

        let model = Self {
            antennas,
            users,
            spatial_corr,
            gains,
            doppler,
            innovation_sampler: CnSampler::new(&q)?,
            prior_sampler: CnSampler::new(&rh)?,
            disturbance_sampler: CnSampler::new(&rw)?,
            ar_coeffs,
            innovation_var,
            rh,
            q,
            rw,
            energy,
        };
        if model.has_common_ar_coeff() {
            let residual = model.stationarity_residual();
            let scale = model.rh.iter().map(|z| z.norm()).fold(1.0, f64::max);
            if residual > 1e-10 * scale {
                return Err(Error::Config(format!("model is not stationary: residual {residual:e}")));
            }
        }
        Ok(model)
    }

    /// Stacked dimension `M K`.
    pub fn dim(&self) -> usize {
        self.antennas * self.users
    }

    pub fn has_common_ar_coeff(&self) -> bool {
        self.ar_coeffs.windows(2).all(|w| w[0] == w[1])
    }

    /// `max |A R_h A^H + Q - R_h|`.
    pub fn stationarity_residual(&self) -> f64 {
        let lhs = self.propagate_cov(&self.rh);
        max_abs_diff(&lhs, &self.rh)
    }

    /// `A x`
    pub fn apply_a(&self, x: &CVector) -> CVector {
        CVector::from_iterator(x.len(), x.iter().zip(&self.ar_coeffs).map(|(z, &a)| z * a))
    }

    /// `A V A^H + Q`
    pub fn propagate_cov(&self, v: &CMatrix) -> CMatrix {
        let n = self.dim();
        let mut out = CMatrix::from_fn(n, n, |i, j| v[(i, j)] * (self.ar_coeffs[i] * self.ar_coeffs[j]));
        out += &self.q;
        hermitized(out)
    }

    /// `V A^H` (A is real diagonal, so this scales columns).
    pub fn right_apply_a(&self, v: &CMatrix) -> CMatrix {
        let mut out = v.clone();
        for (j, &a) in self.ar_coeffs.iter().enumerate() {
            out.column_mut(j).scale_mut(a);
        }
        out
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> CVector {
        self.prior_sampler.sample(&CVector::zeros(self.dim()), rng)
    }

    pub fn sample_innovation<R: Rng + ?Sized>(&self, rng: &mut R) -> CVector {
        self.innovation_sampler.sample(&CVector::zeros(self.dim()), rng)
    }

    pub fn sample_disturbance<R: Rng + ?Sized>(&self, rng: &mut R) -> CVector {
        self.disturbance_sampler.sample(&CVector::zeros(self.antennas), rng)
    }
}

/// Builds the target-cell model for a scenario: all users share `rho` and
/// `f_d`, target gains are 1 and neighbour gains are `a`.
pub fn build_model(cfg: &SystemConfig) -> Result<ChannelModel> {
    let r = build_spatial_corr(cfg.antennas, cfg.rho)?;
    let gains = CellGains::uniform(cfg.cells, cfg.users, cfg.cross_gain);
    let corr: Vec<Vec<CMatrix>> = (0..cfg.cells).map(|_| vec![r.clone(); cfg.users]).collect();
    let rw = build_rw(cfg.energy(), &gains, &corr)?;
    ChannelModel::from_parts(
        vec![r; cfg.users],
        gains.beta[0].clone(),
        vec![cfg.doppler; cfg.antennas * cfg.users],
        rw,
        cfg.energy(),
    )
}

/// Channel realisation `h_1, ..., h_T` of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTrace {
    pub states: Vec<CVector>,
}

impl ChannelTrace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `H_t` as an `M x K` matrix.
    pub fn matrix(&self, t: usize, antennas: usize) -> CMatrix {
        unvec(&self.states[t], antennas)
    }

    pub fn scaled(mut self, amplitude: f64) -> Self {
        for h in &mut self.states {
            *h *= Complex64::new(amplitude, 0.0);
        }
        self
    }
}

/// Inverse of the column-stacking `vec` operation.
pub fn unvec(h: &CVector, rows: usize) -> CMatrix {
    let cols = h.len() / rows;
    CMatrix::from_column_slice(rows, cols, h.as_slice())
}

/// Simulates `h_t = A h_{t-1} + v_t`, `t = 1..T`, from `h_0 ~ CN(0, R_h)`.
pub fn simulate_trace<R: Rng + ?Sized>(model: &ChannelModel, frame_len: usize, rng: &mut R) -> ChannelTrace {
    let mut h = model.sample_prior(rng);
    let mut states = Vec::with_capacity(frame_len);
    for _ in 0..frame_len {
        h = model.apply_a(&h) + model.sample_innovation(rng);
        states.push(h.clone());
    }
    ChannelTrace { states }
}

/// Header fields of the textual trace format.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub antennas: usize,
    pub users: usize,
    pub frame_len: usize,
    pub doppler: f64,
    pub rho: f64,
}

/// Writes a trace as text: a `# M=.. K=.. T=.. f_d=.. rho=..` header, then one
/// line per time step with real and imaginary parts interleaved.
pub fn write_trace<W: Write>(out: &mut W, header: &TraceHeader, trace: &ChannelTrace) -> Result<()> {
    writeln!(
        out,
        "# M={} K={} T={} f_d={} rho={}",
        header.antennas, header.users, header.frame_len, header.doppler, header.rho
    )?;
    for h in &trace.states {
        let line: Vec<String> = h.iter().flat_map(|z| [format!("{:e}", z.re), format!("{:e}", z.im)]).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<(TraceHeader, ChannelTrace)> {
    let mut lines = BufReader::new(input).lines();
    let first = lines.next().ok_or_else(|| Error::Config("empty trace file".into()))??;
    let body = first
        .strip_prefix('#')
        .ok_or_else(|| Error::Config("trace header must start with '#'".into()))?;
    let mut header = TraceHeader { antennas: 0, users: 0, frame_len: 0, doppler: 0.0, rho: 0.0 };
    for field in body.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad header field '{field}'")))?;
        let bad = || Error::Config(format!("bad value in header field '{field}'"));
        match key {
            "M" => header.antennas = value.parse().map_err(|_| bad())?,
            "K" => header.users = value.parse().map_err(|_| bad())?,
            "T" => header.frame_len = value.parse().map_err(|_| bad())?,
            "f_d" => header.doppler = value.parse().map_err(|_| bad())?,
            "rho" => header.rho = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown header field '{key}'"))),
        }
    }
    let dim = header.antennas * header.users;
    let mut states = Vec::with_capacity(header.frame_len);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| Error::Config(format!("bad trace value '{v}': {e}"))))
            .collect::<Result<_>>()?;
        if values.len() != 2 * dim {
            return Err(Error::Dimension(format!("trace line has {} values, expected {}", values.len(), 2 * dim)));
        }
        states.push(CVector::from_iterator(dim, values.chunks(2).map(|c| Complex64::new(c[0], c[1]))));
    }
    if states.len() != header.frame_len {
        return Err(Error::Dimension(format!("trace has {} lines, header says {}", states.len(), header.frame_len)));
    }
    Ok((header, ChannelTrace { states }))
}
