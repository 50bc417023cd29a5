//! Receiver drivers: KF-M, KS-M, EP, the training-mode baselines KF-TM and
//! KS-TM, and the perfect-CSI MMSE detector.
//!
//! Time is zero-based here: step `t` of a frame of length `T` is
//! `0..T`, pilots occupy `0..T_p` and data `T_p..T`.

use crate::channel::{unvec, ChannelModel, ChannelTrace};
use crate::config::{ConvergenceMetric, Detector, SystemConfig};
use crate::error::{Error, Result};
use crate::frame::{Constellation, SymbolMatrix};
use crate::inference::{
    detect_ml, detect_mmse, hard_factor, moment_match_hard, obs_cavity_hard, predict, smooth_step, GaussianBelief,
    ObsFactorNat,
};
use crate::numerics::{regularized_inverse, CMatrix, CVector};

/// Everything a receiver knows about one frame.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a ChannelModel,
    pub constellation: &'a Constellation,
    /// Known symbols, `K x T_p`.
    pub pilots: &'a CMatrix,
    /// `y_1, ..., y_T`
    pub observations: &'a [CVector],
}

impl Problem<'_> {
    pub fn frame_len(&self) -> usize {
        self.observations.len()
    }

    pub fn pilot_len(&self) -> usize {
        self.pilots.ncols()
    }

    pub fn data_len(&self) -> usize {
        self.frame_len() - self.pilot_len()
    }

    fn validate(&self) -> Result<()> {
        let model = self.model;
        if self.pilots.nrows() != model.users {
            return Err(Error::Dimension(format!("pilots have {} rows, K = {}", self.pilots.nrows(), model.users)));
        }
        if self.pilot_len() > self.frame_len() {
            return Err(Error::Dimension(format!(
                "{} pilots for a frame of length {}",
                self.pilot_len(),
                self.frame_len()
            )));
        }
        if self.observations.iter().any(|y| y.len() != model.antennas) {
            return Err(Error::Dimension("observation length differs from M".into()));
        }
        Ok(())
    }
}

/// Receiver-side options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverSettings {
    pub detector: Detector,
    pub max_iterations: usize,
    pub epsilon: f64,
    pub convergence_metric: ConvergenceMetric,
}

impl From<&SystemConfig> for ReceiverSettings {
    fn from(cfg: &SystemConfig) -> Self {
        Self {
            detector: cfg.detector,
            max_iterations: cfg.max_iterations,
            epsilon: cfg.epsilon,
            convergence_metric: cfg.convergence_metric,
        }
    }
}

impl Default for ReceiverSettings {
    fn default() -> Self {
        (&SystemConfig::desk()).into()
    }
}

#[derive(Debug, Clone)]
pub struct ReceiverOutput {
    /// `h_hat_t` for every step; empty for receivers that do not estimate the channel.
    pub channel_means: Vec<CVector>,
    pub channel_covs: Option<Vec<CMatrix>>,
    /// `K x T_d` symbol indices.
    pub decisions: SymbolMatrix,
    pub iterations_used: usize,
    pub converged: bool,
    /// Relative mean change after each EP iteration.
    pub diagnostics: Vec<f64>,
}

/// Working state of the EP receiver, indexed by time step.
///
/// Every observation factor comes from a single-symbol update, so it is
/// stored through the symbol vector that produced it; [`EpState::factor`]
/// gives its natural parameters.
#[derive(Debug, Clone)]
pub struct EpState {
    pub forward: Vec<GaussianBelief>,
    pub posterior: Vec<GaussianBelief>,
    /// `q^{\R}_t`: forward message combined with the observation factor.
    pub reverse: Vec<GaussianBelief>,
    /// Symbol vector behind the observation factor at each step.
    pub factor_symbols: Vec<CVector>,
    /// Latest decisions at data steps (empty at pilot steps).
    pub decisions: Vec<Vec<usize>>,
    pub iteration: usize,
    rw_inv: CMatrix,
}

fn initial_belief(model: &ChannelModel) -> GaussianBelief {
    GaussianBelief::new(CVector::zeros(model.dim()), model.rh.clone())
}

fn detect(problem: &Problem, settings: &ReceiverSettings, belief: &GaussianBelief, y: &CVector) -> Result<Vec<usize>> {
    let model = problem.model;
    match settings.detector {
        Detector::Mmse => detect_mmse(&unvec(&belief.mean, model.antennas), y, &model.rw, problem.constellation),
        Detector::Ml => detect_ml(belief, y, &model.rw, problem.constellation),
    }
}

/// Symbol vector used at step `t`: the known pilot or a fresh decision.
fn symbols_at(
    problem: &Problem,
    settings: &ReceiverSettings,
    t: usize,
    cavity: &GaussianBelief,
) -> Result<(CVector, Option<Vec<usize>>)> {
    if t < problem.pilot_len() {
        Ok((problem.pilots.column(t).into_owned(), None))
    } else {
        let d = detect(problem, settings, cavity, &problem.observations[t])?;
        Ok((problem.constellation.symbols(&d), Some(d)))
    }
}

fn decision_matrix(users: usize, per_step: &[Vec<usize>]) -> SymbolMatrix {
    SymbolMatrix::from_fn(users, per_step.len(), |k, t| per_step[t][k])
}

struct ForwardPass {
    forward: Vec<GaussianBelief>,
    posterior: Vec<GaussianBelief>,
    data_decisions: Vec<Vec<usize>>,
}

/// The KF-M recursion: predict, decide on the prediction, update with the
/// decided (or known) symbols.
fn forward_pass(problem: &Problem, settings: &ReceiverSettings) -> Result<ForwardPass> {
    problem.validate()?;
    let model = problem.model;
    let frame_len = problem.frame_len();
    let mut forward = Vec::with_capacity(frame_len);
    let mut posterior = Vec::with_capacity(frame_len);
    let mut data_decisions = Vec::with_capacity(problem.data_len());
    let mut prev = initial_belief(model);
    for t in 0..frame_len {
        let cavity = predict(&prev, model);
        let (s, decision) = symbols_at(problem, settings, t, &cavity)?;
        let post = moment_match_hard(&cavity, &s, &problem.observations[t], &model.rw)?.posterior;
        if let Some(d) = decision {
            data_decisions.push(d);
        }
        forward.push(cavity);
        prev = post.clone();
        posterior.push(post);
    }
    Ok(ForwardPass { forward, posterior, data_decisions })
}

/// Backward RTS recursion over filtered beliefs.
fn smooth_all(filtered: &[GaussianBelief], model: &ChannelModel) -> Result<Vec<GaussianBelief>> {
    let mut out: Vec<GaussianBelief> = filtered.to_vec();
    for t in (0..filtered.len().saturating_sub(1)).rev() {
        let (smoothed, _) = smooth_step(&filtered[t], &out[t + 1], model)?;
        out[t] = smoothed;
    }
    Ok(out)
}

fn split(beliefs: Vec<GaussianBelief>) -> (Vec<CVector>, Vec<CMatrix>) {
    beliefs.into_iter().map(|b| (b.mean, b.cov)).unzip()
}

pub fn run_kf_m(problem: &Problem, settings: &ReceiverSettings) -> Result<ReceiverOutput> {
    let pass = forward_pass(problem, settings)?;
    let (means, covs) = split(pass.posterior);
    Ok(ReceiverOutput {
        channel_means: means,
        channel_covs: Some(covs),
        decisions: decision_matrix(problem.model.users, &pass.data_decisions),
        iterations_used: 1,
        converged: true,
        diagnostics: Vec::new(),
    })
}

/// KF-M followed by a pure backward smoothing pass and re-detection from the
/// smoothed beliefs.
pub fn run_ks_m(problem: &Problem, settings: &ReceiverSettings) -> Result<ReceiverOutput> {
    let pass = forward_pass(problem, settings)?;
    let smoothed = smooth_all(&pass.posterior, problem.model)?;
    let decisions = (problem.pilot_len()..problem.frame_len())
        .map(|t| detect(problem, settings, &smoothed[t], &problem.observations[t]))
        .collect::<Result<Vec<_>>>()?;
    let (means, covs) = split(smoothed);
    Ok(ReceiverOutput {
        channel_means: means,
        channel_covs: Some(covs),
        decisions: decision_matrix(problem.model.users, &decisions),
        iterations_used: 1,
        converged: true,
        diagnostics: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    Filter,
    Smoother,
}

/// Kalman filter or RTS smoother with every symbol of the frame known.
pub fn run_training(
    model: &ChannelModel,
    constellation: &Constellation,
    known_symbols: &CMatrix,
    observations: &[CVector],
    mode: TrainingMode,
) -> Result<ReceiverOutput> {
    if known_symbols.ncols() != observations.len() {
        return Err(Error::Dimension(format!(
            "training needs T = {} known symbol vectors, got {}",
            observations.len(),
            known_symbols.ncols()
        )));
    }
    let problem = Problem { model, constellation, pilots: known_symbols, observations };
    let pass = forward_pass(&problem, &ReceiverSettings::default())?;
    let beliefs = match mode {
        TrainingMode::Filter => pass.posterior,
        TrainingMode::Smoother => smooth_all(&pass.posterior, model)?,
    };
    let (means, covs) = split(beliefs);
    Ok(ReceiverOutput {
        channel_means: means,
        channel_covs: Some(covs),
        decisions: SymbolMatrix::zeros(model.users, 0),
        iterations_used: 1,
        converged: true,
        diagnostics: Vec::new(),
    })
}

/// MMSE detection with the true channel.
pub fn run_pcsi(
    model: &ChannelModel,
    constellation: &Constellation,
    truth: &ChannelTrace,
    observations: &[CVector],
    pilot_len: usize,
) -> Result<ReceiverOutput> {
    if truth.len() != observations.len() || pilot_len > observations.len() {
        return Err(Error::Dimension("trace, observations and pilot length disagree".into()));
    }
    let decisions = (pilot_len..observations.len())
        .map(|t| detect_mmse(&truth.matrix(t, model.antennas), &observations[t], &model.rw, constellation))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReceiverOutput {
        channel_means: Vec::new(),
        channel_covs: None,
        decisions: decision_matrix(model.users, &decisions),
        iterations_used: 0,
        converged: true,
        diagnostics: Vec::new(),
    })
}

fn relative_change(current: &[GaussianBelief], previous: &[CVector], metric: ConvergenceMetric) -> f64 {
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else if num > 0.0 { f64::INFINITY } else { 0.0 };
    match metric {
        ConvergenceMetric::Stacked => {
            let (num, den) = current.iter().zip(previous).fold((0.0, 0.0), |(n, d), (c, p)| {
                (n + (&c.mean - p).norm_squared(), d + p.norm_squared())
            });
            ratio(num.sqrt(), den.sqrt())
        }
        ConvergenceMetric::PerStepMax => current
            .iter()
            .zip(previous)
            .map(|(c, p)| ratio((&c.mean - p).norm(), p.norm()))
            .fold(0.0, f64::max),
    }
}

impl EpState {
    /// State after the initial KF-M pass.
    fn from_forward(problem: &Problem, settings: &ReceiverSettings) -> Result<Self> {
        let pass = forward_pass(problem, settings)?;
        let pilots = problem.pilot_len();
        let mut factor_symbols = Vec::with_capacity(problem.frame_len());
        let mut decisions = Vec::with_capacity(problem.frame_len());
        for t in 0..problem.frame_len() {
            if t < pilots {
                factor_symbols.push(problem.pilots.column(t).into_owned());
                decisions.push(Vec::new());
            } else {
                let d = pass.data_decisions[t - pilots].clone();
                factor_symbols.push(problem.constellation.symbols(&d));
                decisions.push(d);
            }
        }
        Ok(Self {
            reverse: pass.posterior.clone(),
            forward: pass.forward,
            posterior: pass.posterior,
            factor_symbols,
            decisions,
            iteration: 0,
            rw_inv: regularized_inverse(&problem.model.rw)?,
        })
    }

    /// Natural parameters of the observation factor at step `t`.
    pub fn factor(&self, t: usize, observations: &[CVector]) -> ObsFactorNat {
        hard_factor(&self.factor_symbols[t], &observations[t], &self.rw_inv)
    }

    fn filtering_pass(&mut self, problem: &Problem) -> Result<()> {
        let model = problem.model;
        let mut prev = initial_belief(model);
        for t in 0..self.factor_symbols.len() {
            let fwd = predict(&prev, model);
            // combining with a single-symbol factor is a Kalman update
            let rev = moment_match_hard(&fwd, &self.factor_symbols[t], &problem.observations[t], &model.rw)?.posterior;
            self.forward[t] = fwd;
            prev = rev.clone();
            self.reverse[t] = rev;
        }
        Ok(())
    }

    fn smoothing_pass(&mut self, problem: &Problem, settings: &ReceiverSettings) -> Result<()> {
        let model = problem.model;
        let frame_len = self.factor_symbols.len();
        for t in (0..frame_len).rev() {
            let smoothed = if t + 1 == frame_len {
                self.reverse[t].clone()
            } else {
                smooth_step(&self.reverse[t], &self.posterior[t + 1], model)?.0
            };
            let y = &problem.observations[t];
            let cavity = obs_cavity_hard(&smoothed, &self.factor_symbols[t], y, &model.rw, &self.rw_inv)?;
            let (s, decision) = symbols_at(problem, settings, t, &cavity)?;
            self.posterior[t] = moment_match_hard(&cavity, &s, y, &model.rw)?.posterior;
            self.factor_symbols[t] = s;
            if let Some(d) = decision {
                self.decisions[t] = d;
            }
        }
        Ok(())
    }
}

/// Semi-blind EP: KF-M initialization, then alternating filtering and
/// smoothing passes with hard-decision moment matching until the relative
/// change of the means drops below `epsilon` or `max_iterations` is reached.
pub fn run_ep(problem: &Problem, settings: &ReceiverSettings) -> Result<ReceiverOutput> {
    run_ep_with_state(problem, settings).map(|(out, _)| out)
}

/// [`run_ep`] that also returns the final [`EpState`].
pub fn run_ep_with_state(problem: &Problem, settings: &ReceiverSettings) -> Result<(ReceiverOutput, EpState)> {
    if settings.max_iterations == 0 || !(settings.epsilon > 0.0) {
        return Err(Error::Config("EP needs n >= 1 and epsilon > 0".into()));
    }
    let mut state = EpState::from_forward(problem, settings)?;
    let mut previous: Vec<CVector> = state.posterior.iter().map(|b| b.mean.clone()).collect();
    let mut diagnostics = Vec::new();
    let mut converged = false;
    for i in 1..=settings.max_iterations {
        state.iteration = i;
        if i > 1 {
            state.filtering_pass(problem)?;
        }
        state.smoothing_pass(problem, settings)?;
        let change = relative_change(&state.posterior, &previous, settings.convergence_metric);
        diagnostics.push(change);
        previous = state.posterior.iter().map(|b| b.mean.clone()).collect();
        if change < settings.epsilon {
            converged = true;
            break;
        }
    }
    let decisions = decision_matrix(problem.model.users, &state.decisions[problem.pilot_len()..]);
    let (means, covs) = split(state.posterior.clone());
    let out = ReceiverOutput {
        channel_means: means,
        channel_covs: Some(covs),
        decisions,
        iterations_used: state.iteration,
        converged,
        diagnostics,
    };
    Ok((out, state))
}
