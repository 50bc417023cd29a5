//! Constellations, pilot design, frame assembly and observation synthesis.
//!
//! The stacked observation model is `y_t = S_t h_t + w_t` with
//! `S_t = s_t^T (x) I_M`. `S_t` is never materialized: the helpers at the
//! bottom of this module apply it through the block structure of `h_t`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::channel::{ChannelModel, ChannelTrace};
use crate::config::{InterferenceMode, PilotDesign};
use crate::error::{Error, Result};
use crate::numerics::{standard_cn, CMatrix, CVector, ONE, ZERO};

/// Symbol indices into a constellation, `K x T` (one column per time step).
pub type SymbolMatrix = DMatrix<usize>;

/// PSK constellation with average energy `E_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub points: Vec<Complex64>,
    pub energy: f64,
}

/// `order`-PSK with points `sqrt(E_s) exp(j pi (2m + 1) / order)`. Order 4 is
/// QPSK, `sqrt(E_s / 2) (+-1 +- j)`, listed in Gray order
/// (00, 01, 11, 10 going around the circle).
pub fn make_constellation(order: usize, energy: f64) -> Result<Constellation> {
    if !matches!(order, 2 | 4 | 8 | 16) {
        return Err(Error::Config(format!("unsupported constellation order {order}")));
    }
    if !(energy > 0.0 && energy.is_finite()) {
        return Err(Error::Config(format!("symbol energy must be positive, got {energy}")));
    }
    let amp = energy.sqrt();
    let points = if order == 4 {
        let a = (energy / 2.0).sqrt();
        vec![
            Complex64::new(a, a),
            Complex64::new(-a, a),
            Complex64::new(-a, -a),
            Complex64::new(a, -a),
        ]
    } else {
        (0..order)
            .map(|m| Complex64::from_polar(amp, std::f64::consts::PI * (2 * m + 1) as f64 / order as f64))
            .collect()
    };
    Ok(Constellation { points, energy })
}

impl Constellation {
    pub fn order(&self) -> usize {
        self.points.len()
    }

    /// Index of the nearest point; ties go to the lowest index.
    pub fn nearest(&self, x: Complex64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (x - p).norm_sqr();
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        best
    }

    pub fn symbols(&self, indices: &[usize]) -> CVector {
        CVector::from_iterator(indices.len(), indices.iter().map(|&i| self.points[i]))
    }

    /// Decodes a mixed-radix candidate number into a symbol-index vector
    /// (user 0 is the least significant digit).
    pub fn candidate(&self, mut number: usize, users: usize) -> Vec<usize> {
        let q = self.order();
        (0..users)
            .map(|_| {
                let d = number % q;
                number /= q;
                d
            })
            .collect()
    }

    /// `order^users`, or `None` on overflow.
    pub fn candidate_count(&self, users: usize) -> Option<usize> {
        self.order().checked_pow(users as u32)
    }
}

/// Sylvester Hadamard matrix of size `n` (a power of two), entries +-1.
pub fn sylvester_hadamard(n: usize) -> Result<DMatrix<i8>> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("Hadamard size must be a power of two, got {n}")));
    }
    let mut h = DMatrix::from_element(1, 1, 1i8);
    while h.nrows() < n {
        let m = h.nrows();
        let mut next = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..m {
            for j in 0..m {
                let v = h[(i, j)];
                next[(i, j)] = v;
                next[(i, j + m)] = v;
                next[(i + m, j)] = v;
                next[(i + m, j + m)] = -v;
            }
        }
        h = next;
    }
    Ok(h)
}

/// Pilot matrix `P` (`K x T_p`).
///
/// * `Hadamard`: first `K` rows of the `T_p x T_p` Sylvester matrix mapped to
///   `+-sqrt(E_s / 2) (1 + j)`; needs `T_p` in `{K, 2K}` and `K` a power of 2.
/// * `Dft`: first `K` rows of a `T_p`-point DFT scaled to energy `E_s`.
/// * `Random`: i.i.d. constellation points.
pub fn make_pilots<R: Rng + ?Sized>(
    users: usize,
    pilot_len: usize,
    constellation: &Constellation,
    design: PilotDesign,
    rng: &mut R,
) -> Result<CMatrix> {
    match design {
        PilotDesign::Random => {
            let idx = random_data(users, pilot_len, constellation, rng);
            Ok(idx.map(|i| constellation.points[i]))
        }
        _ => orthogonal_pilots(users, pilot_len, constellation, design),
    }
}

fn orthogonal_pilots(users: usize, pilot_len: usize, constellation: &Constellation, design: PilotDesign) -> Result<CMatrix> {
    let es = constellation.energy;
    match design {
        PilotDesign::Hadamard => {
            if !users.is_power_of_two() {
                return Err(Error::Config(format!("Hadamard pilots need K to be a power of two, got {users}")));
            }
            if pilot_len != users && pilot_len != 2 * users {
                return Err(Error::Config(format!("Hadamard pilots need T_p in {{K, 2K}}, got {pilot_len}")));
            }
            let h = sylvester_hadamard(pilot_len)?;
            let base = Complex64::new(1.0, 1.0) * (es / 2.0).sqrt();
            Ok(CMatrix::from_fn(users, pilot_len, |k, t| base * f64::from(h[(k, t)])))
        }
        PilotDesign::Dft => {
            if pilot_len < users {
                return Err(Error::Config(format!("DFT pilots need T_p >= K, got T_p = {pilot_len}")));
            }
            let rot = Complex64::from_polar(es.sqrt(), std::f64::consts::FRAC_PI_4);
            Ok(CMatrix::from_fn(users, pilot_len, |k, t| {
                let phase = -2.0 * std::f64::consts::PI * ((k * t) % pilot_len) as f64 / pilot_len as f64;
                rot * Complex64::from_polar(1.0, phase)
            }))
        }
        PilotDesign::Random => unreachable!("random pilots are drawn by make_pilots"),
    }
}

/// Orthogonal pilots; falls back to the DFT design when `K` is not a power of two.
pub fn hadamard_pilots(users: usize, pilot_len: usize, constellation: &Constellation) -> Result<CMatrix> {
    let design = if users.is_power_of_two() { PilotDesign::Hadamard } else { PilotDesign::Dft };
    orthogonal_pilots(users, pilot_len, constellation, design)
}

/// I.i.d. uniform symbol indices, `K x T_d`.
pub fn random_data<R: Rng + ?Sized>(
    users: usize,
    data_len: usize,
    constellation: &Constellation,
    rng: &mut R,
) -> SymbolMatrix {
    let q = constellation.order();
    SymbolMatrix::from_fn(users, data_len, |_, _| rng.random_range(0..q))
}

/// Transmitted frame of one cell: `T_p` pilots followed by `T_d` data symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// `K x T_p` pilot symbols.
    pub pilots: CMatrix,
    /// `K x T_d` data symbol indices.
    pub data: SymbolMatrix,
    /// `K x T` transmitted symbols (pilots then data).
    pub symbols: CMatrix,
}

impl Frame {
    pub fn new(pilots: CMatrix, data: SymbolMatrix, constellation: &Constellation) -> Result<Self> {
        if pilots.nrows() != data.nrows() {
            return Err(Error::Dimension(format!(
                "pilots have {} users, data {}",
                pilots.nrows(),
                data.nrows()
            )));
        }
        let users = pilots.nrows();
        let tp = pilots.ncols();
        let td = data.ncols();
        let symbols = CMatrix::from_fn(users, tp + td, |k, t| {
            if t < tp {
                pilots[(k, t)]
            } else {
                constellation.points[data[(k, t - tp)]]
            }
        });
        Ok(Self { pilots, data, symbols })
    }

    /// Frame made only of random symbols (used for neighbour cells).
    pub fn random<R: Rng + ?Sized>(users: usize, frame_len: usize, constellation: &Constellation, rng: &mut R) -> Self {
        let data = random_data(users, frame_len, constellation, rng);
        Self::new(CMatrix::zeros(users, 0), data, constellation).expect("shapes agree by construction")
    }

    pub fn pilot_len(&self) -> usize {
        self.pilots.ncols()
    }

    pub fn data_len(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.symbols.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.ncols() == 0
    }

    pub fn users(&self) -> usize {
        self.symbols.nrows()
    }

    /// `s_t` (zero-based `t`).
    pub fn symbol_vector(&self, t: usize) -> CVector {
        self.symbols.column(t).into_owned()
    }

    /// All `T` symbol vectors treated as known pilots.
    pub fn all_symbol_vectors(&self) -> Vec<CVector> {
        (0..self.len()).map(|t| self.symbol_vector(t)).collect()
    }
}

/// Received vectors `y_1, ..., y_T` at the target base station.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub y: Vec<CVector>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Synthesizes the received signal of the target cell (index 0).
///
/// * `Explicit`: `y_t = sum_i H_{0i}(t) s_i(t) + w'_t` with `w'_t ~ CN(0, I)`.
///   `traces[i]` must already carry the large-scale gain of cell `i`.
/// * `Gaussian`: `y_t = H_{00}(t) s_0(t) + w_t` with `w_t ~ CN(0, R_w)`;
///   traces and frames of other cells are ignored.
pub fn observe<R: Rng + ?Sized>(
    traces: &[ChannelTrace],
    frames: &[Frame],
    model: &ChannelModel,
    mode: InterferenceMode,
    rng: &mut R,
) -> Result<ObservationSet> {
    let signal = noiseless_signal(traces, frames, model, mode)?;
    let y = signal
        .into_iter()
        .map(|s| match mode {
            InterferenceMode::Explicit => s + standard_cn(model.antennas, rng),
            InterferenceMode::Gaussian => s + model.sample_disturbance(rng),
        })
        .collect();
    Ok(ObservationSet { y })
}

/// The noise-free part of [`observe`].
pub fn noiseless_signal(
    traces: &[ChannelTrace],
    frames: &[Frame],
    model: &ChannelModel,
    mode: InterferenceMode,
) -> Result<Vec<CVector>> {
    if traces.is_empty() || traces.len() != frames.len() {
        return Err(Error::Dimension(format!("{} traces for {} frames", traces.len(), frames.len())));
    }
    let frame_len = frames[0].len();
    let cells = match mode {
        InterferenceMode::Explicit => traces.len(),
        InterferenceMode::Gaussian => 1,
    };
    for (i, (trace, frame)) in traces.iter().zip(frames).enumerate().take(cells) {
        if trace.len() != frame_len || frame.len() != frame_len {
            return Err(Error::Dimension(format!("cell {i}: trace or frame length differs from {frame_len}")));
        }
        if frame.users() != model.users || trace.states.iter().any(|h| h.len() != model.dim()) {
            return Err(Error::Dimension(format!("cell {i}: dimensions do not match the model")));
        }
    }
    Ok((0..frame_len)
        .map(|t| {
            let mut y = CVector::zeros(model.antennas);
            for (trace, frame) in traces.iter().zip(frames).take(cells) {
                y += apply_s(&frame.symbol_vector(t), &trace.states[t], model.antennas);
            }
            y
        })
        .collect())
}

/// `S h = H s` where `H = unvec(h)`.
pub fn apply_s(s: &CVector, h: &CVector, antennas: usize) -> CVector {
    let mut out = CVector::zeros(antennas);
    for (k, &sk) in s.iter().enumerate() {
        out.axpy(sk, &h.rows(k * antennas, antennas), ONE);
    }
    out
}

/// `S^H x`: block `k` is `conj(s_k) x`.
pub fn apply_s_adjoint(s: &CVector, x: &CVector) -> CVector {
    let m = x.len();
    let mut out = CVector::zeros(m * s.len());
    for (k, &sk) in s.iter().enumerate() {
        out.rows_mut(k * m, m).copy_from(&(x * sk.conj()));
    }
    out
}

/// `V S^H` (`MK x M`): `sum_k conj(s_k) V[:, block k]`.
pub fn cov_s_adjoint(v: &CMatrix, s: &CVector, antennas: usize) -> CMatrix {
    let mut out = CMatrix::zeros(v.nrows(), antennas);
    for (k, &sk) in s.iter().enumerate() {
        out += v.columns(k * antennas, antennas) * sk.conj();
    }
    out
}

/// `S V S^H` (`M x M`) computed as `sum_k s_k (V S^H)[block k, :]`.
pub fn s_cov_s_adjoint(s: &CVector, v: &CMatrix, antennas: usize) -> CMatrix {
    let vsh = cov_s_adjoint(v, s, antennas);
    let mut out = CMatrix::zeros(antennas, antennas);
    for (k, &sk) in s.iter().enumerate() {
        out += vsh.rows(k * antennas, antennas) * sk;
    }
    out
}

/// `S^H X S = (conj(s) s^T) (x) X` (`MK x MK`).
pub fn s_adjoint_x_s(s: &CVector, x: &CMatrix) -> CMatrix {
    let m = x.nrows();
    let users = s.len();
    let mut out = CMatrix::zeros(m * users, m * users);
    for (k, &sk) in s.iter().enumerate() {
        for (l, &sl) in s.iter().enumerate() {
            out.view_mut((k * m, l * m), (m, m)).copy_from(&(x * (sk.conj() * sl)));
        }
    }
    out
}

/// Dense `S = s^T (x) I_M`, for tests and reference computations only.
pub fn materialize_s(s: &CVector, antennas: usize) -> CMatrix {
    let mut out = CMatrix::from_element(antennas, antennas * s.len(), ZERO);
    for (k, &sk) in s.iter().enumerate() {
        for m in 0..antennas {
            out[(m, k * antennas + m)] = sk;
        }
    }
    out
}
