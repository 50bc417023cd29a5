//! Scenario configuration shared by every stage of a simulation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotDesign {
    Hadamard,
    Dft,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterferenceMode {
    /// Neighbour-cell channels and symbols are simulated and summed.
    Explicit,
    /// The aggregate disturbance is drawn directly from CN(0, R_w).
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Mmse,
    Ml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceMetric {
    /// Relative change of the means stacked over the whole frame.
    Stacked,
    /// Largest per-time-step relative change.
    PerStepMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    KfM,
    KsM,
    Ep,
    KfTm,
    KsTm,
    Pcsi,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] =
        [Algorithm::KfM, Algorithm::KsM, Algorithm::Ep, Algorithm::KfTm, Algorithm::KsTm, Algorithm::Pcsi];

    /// Label used in CSV output and figure legends.
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::KfM => "KF-M",
            Algorithm::KsM => "KS-M",
            Algorithm::Ep => "EP",
            Algorithm::KfTm => "KF-TM",
            Algorithm::KsTm => "KS-TM",
            Algorithm::Pcsi => "PCSI",
        }
    }

    /// Whether the algorithm produces channel estimates.
    pub fn estimates_channel(self) -> bool {
        self != Algorithm::Pcsi
    }

    /// Whether the algorithm produces data decisions.
    pub fn detects(self) -> bool {
        !matches!(self, Algorithm::KfTm | Algorithm::KsTm)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.trim().to_ascii_lowercase().replace('-', "_");
        match key.as_str() {
            "kf_m" => Ok(Algorithm::KfM),
            "ks_m" => Ok(Algorithm::KsM),
            "ep" => Ok(Algorithm::Ep),
            "kf_tm" => Ok(Algorithm::KfTm),
            "ks_tm" => Ok(Algorithm::KsTm),
            "pcsi" => Ok(Algorithm::Pcsi),
            _ => Err(Error::Config(format!("unknown algorithm '{s}'"))),
        }
    }
}

/// All scenario parameters. Field names in the JSON file follow the usual
/// symbols (`L`, `K`, `M`, `T_p`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "L")]
    pub cells: usize,
    #[serde(rename = "K")]
    pub users: usize,
    #[serde(rename = "M")]
    pub antennas: usize,
    #[serde(rename = "T_p")]
    pub pilot_len: usize,
    #[serde(rename = "T_d")]
    pub data_len: usize,
    #[serde(rename = "E_s_db")]
    pub energy_db: f64,
    /// Cross gain of neighbour-cell users towards the target base station.
    #[serde(rename = "a")]
    pub cross_gain: f64,
    #[serde(rename = "rho")]
    pub rho: f64,
    /// Normalized maximum Doppler shift.
    #[serde(rename = "f_d")]
    pub doppler: f64,
    /// Maximum number of EP iterations.
    #[serde(rename = "n")]
    pub max_iterations: usize,
    #[serde(rename = "epsilon")]
    pub epsilon: f64,
    pub pilot_design: PilotDesign,
    pub interference_mode: InterferenceMode,
    pub detector: Detector,
    pub convergence_metric: ConvergenceMetric,
    pub algorithms: Vec<Algorithm>,
    pub trials: usize,
    pub master_seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SystemConfig {
    /// Reduced-scale profile used for tests and quick sweeps.
    pub fn desk() -> Self {
        Self {
            cells: 4,
            users: 4,
            antennas: 32,
            pilot_len: 4,
            data_len: 32,
            energy_db: 0.0,
            cross_gain: 0.1,
            rho: 0.0,
            doppler: 0.01,
            max_iterations: 10,
            epsilon: 1e-6,
            pilot_design: PilotDesign::Hadamard,
            interference_mode: InterferenceMode::Explicit,
            detector: Detector::Mmse,
            convergence_metric: ConvergenceMetric::Stacked,
            algorithms: Algorithm::ALL.to_vec(),
            trials: 50,
            master_seed: 1,
        }
    }

    /// Full-scale profile (K = 8, T_p = 8, T_d = 64).
    pub fn paper() -> Self {
        Self {
            users: 8,
            antennas: 64,
            pilot_len: 8,
            data_len: 64,
            ..Self::desk()
        }
    }

    pub fn frame_len(&self) -> usize {
        self.pilot_len + self.data_len
    }

    /// Average symbol energy on a linear scale.
    pub fn energy(&self) -> f64 {
        10f64.powf(self.energy_db / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("L", self.cells),
            ("K", self.users),
            ("M", self.antennas),
            ("T_p", self.pilot_len),
            ("n", self.max_iterations),
            ("trials", self.trials),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.cross_gain) {
            return Err(Error::Config(format!("a must lie in [0, 1], got {}", self.cross_gain)));
        }
        if !(self.doppler >= 0.0 && self.doppler.is_finite()) {
            return Err(Error::Config(format!("f_d must be non-negative, got {}", self.doppler)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !self.energy_db.is_finite() {
            return Err(Error::Config("E_s_db must be finite".into()));
        }
        if self.pilot_design != PilotDesign::Random && self.pilot_len < self.users {
            return Err(Error::Config(format!(
                "orthogonal pilots need T_p >= K (T_p = {}, K = {})",
                self.pilot_len, self.users
            )));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms selected".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: SystemConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Sets a sweepable field by name.
    pub fn set_field(&mut self, name: &str, value: f64) -> Result<()> {
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{name} needs a non-negative integer, got {v}")))
            }
        };
        match name {
            "M" => self.antennas = as_count(value)?,
            "a" => self.cross_gain = value,
            "T_d" => self.data_len = as_count(value)?,
            "f_d" => self.doppler = value,
            "rho" => self.rho = value,
            "T_p" => self.pilot_len = as_count(value)?,
            _ => return Err(Error::Config(format!("unknown sweep field '{name}'"))),
        }
        Ok(())
    }
}
