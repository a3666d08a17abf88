//! Experiment configuration (TOML). Unknown keys are rejected everywhere;
//! parse errors carry the line and column of the offending entry.

use std::path::{Path, PathBuf};

use grumpc_core::closed_loop::ReferenceChange;
use grumpc_core::fhocp::SolverOptions;
use grumpc_core::observer::GainMode;
use grumpc_core::plant::{ExcitationSpec, FourTankParams};
use grumpc_core::training::{Optimizer, SplitSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// A number or the keyword `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr {
    Value(f64),
    Keyword(Auto),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auto {
    Auto,
}

impl AutoOr {
    pub fn value(self) -> Option<f64> {
        match self {
            AutoOr::Value(v) => Some(v),
            AutoOr::Keyword(_) => None,
        }
    }
}

impl Default for AutoOr {
    fn default() -> Self {
        AutoOr::Keyword(Auto::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationConfig {
    pub levels: usize,
    /// Samples per held level.
    pub hold: usize,
    pub length: usize,
    /// Amplitude range per channel; the plant's input bounds when absent.
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// Flows whose steady state is the initial plant state; half of the
    /// upper input bound when absent.
    pub initial_flows: Option<[f64; 2]>,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            hold: 10,
            length: 20000,
            lower: None,
            upper: None,
            initial_flows: None,
        }
    }
}

/// Training hyper-parameters; the seed comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub hidden: usize,
    pub subsequence_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub washout: usize,
    pub penalty_weight: f64,
    pub margin: f64,
    pub clip_norm: f64,
    pub init_scale: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            hidden: d.hidden,
            subsequence_len: d.subsequence_len,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            washout: d.washout,
            penalty_weight: d.penalty_weight,
            margin: d.margin,
            clip_norm: d.clip_norm,
            init_scale: d.init_scale,
            optimizer: d.optimizer,
        }
    }
}

impl TrainingConfig {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden,
            subsequence_len: self.subsequence_len,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            washout: self.washout,
            penalty_weight: self.penalty_weight,
            margin: self.margin,
            clip_norm: self.clip_norm,
            init_scale: self.init_scale,
            optimizer: self.optimizer,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverConfig {
    pub mode: GainMode,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            mode: GainMode::OpenLoop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Diagonal of Q; a single entry is repeated over the state dimension.
    pub q_diag: Vec<f64>,
    /// Diagonal of R; a single entry is repeated over the input dimension.
    pub r_diag: Vec<f64>,
    #[serde(default)]
    pub s: AutoOr,
    pub e_o_0: f64,
    #[serde(default)]
    pub w_bar_y: AutoOr,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    FourTank,
    /// The identified GRU itself, with optional bounded output noise.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub steps: usize,
    #[serde(default = "default_plant_kind")]
    pub plant: PlantKind,
    /// Steady-state flows the four-tank plant starts from.
    pub initial_flows: [f64; 2],
    /// Bound on the injected output disturbance for the model plant
    /// (normalized units).
    #[serde(default)]
    pub noise: f64,
}

fn default_plant_kind() -> PlantKind {
    PlantKind::FourTank
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub plant: FourTankParams,
    #[serde(default)]
    pub excitation: ExcitationConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub observer: ObserverConfig,
    pub mpc: MpcConfig,
    pub simulation: SimulationConfig,
    pub references: Vec<ReferenceChange>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Schema(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Schema(m) => CliError::Schema(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Schema(format!("config: {m}")));
        self.plant
            .validate()
            .map_err(|e| CliError::Schema(format!("config [plant]: {e}")))?;
        if self.excitation.length == 0 {
            return bad("[excitation] length is zero, so there is no data to generate".into());
        }
        self.excitation_spec()
            .validate()
            .map_err(|e| CliError::Schema(format!("config [excitation]: {e}")))?;
        if self.mpc.horizon == 0 {
            return bad("[mpc] horizon must be at least 1".into());
        }
        if self.mpc.q_diag.is_empty() || self.mpc.r_diag.is_empty() {
            return bad("[mpc] q_diag and r_diag must not be empty".into());
        }
        if !(self.mpc.e_o_0 >= 0.0) {
            return bad("[mpc] e_o_0 must be nonnegative".into());
        }
        if self.simulation.steps == 0 {
            return bad("[simulation] steps must be at least 1".into());
        }
        if !(self.simulation.noise >= 0.0) {
            return bad("[simulation] noise must be nonnegative".into());
        }
        match self.references.first() {
            Some(r) if r.start == 0 => {}
            _ => return bad("the first [[references]] entry must start at step 0".into()),
        }
        if self.references.windows(2).any(|w| w[1].start <= w[0].start) {
            return bad("[[references]] start steps must increase".into());
        }
        if self.references.iter().any(|r| r.y_bar.len() != 2) {
            return bad("[[references]] y_bar must have two entries (h1, h2)".into());
        }
        Ok(())
    }

    pub fn excitation_spec(&self) -> ExcitationSpec {
        ExcitationSpec {
            levels: self.excitation.levels,
            hold: self.excitation.hold,
            lower: self
                .excitation
                .lower
                .clone()
                .unwrap_or_else(|| self.plant.q_min.to_vec()),
            upper: self
                .excitation
                .upper
                .clone()
                .unwrap_or_else(|| self.plant.q_max.to_vec()),
            seed: self.seed,
            length: self.excitation.length,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        self.training.to_core(self.seed)
    }

    /// Repeats a one-entry diagonal to `dim`.
    pub fn diagonal(list: &[f64], dim: usize, name: &str) -> CliResult<Vec<f64>> {
        match list.len() {
            1 => Ok(vec![list[0]; dim]),
            l if l == dim => Ok(list.to_vec()),
            l => Err(CliError::Schema(format!(
                "config: [mpc] {name} has {l} entries, expected 1 or {dim}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[mpc]
horizon = 5
q_diag = [1.0]
r_diag = [0.01]
e_o_0 = 0.02

[simulation]
steps = 10
initial_flows = [4.5e-4, 5.5e-4]

[[references]]
start = 0
y_bar = [0.6, 0.6]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.mpc.s, AutoOr::default());
        assert_eq!(c.mpc.w_bar_y.value(), None);
        assert_eq!(c.excitation_spec().upper, vec![9.05e-4, 11.1e-4]);
        assert_eq!(c.plant, FourTankParams::default());
        assert_eq!(c.observer.mode, GainMode::OpenLoop);
    }

    #[test]
    fn overrides_and_keywords() {
        let text = MINIMAL.replace("e_o_0 = 0.02", "e_o_0 = 0.02\ns = 3.5\nw_bar_y = \"auto\"");
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.mpc.s.value(), Some(3.5));
        assert_eq!(c.mpc.w_bar_y.value(), None);
        assert!(ExperimentConfig::parse(&MINIMAL.replace("e_o_0 = 0.02", "e_o_0 = 0.02\ns = \"big\"")).is_err());
    }

    #[test]
    fn unknown_key_is_reported_with_its_line() {
        let text = MINIMAL.replace("horizon = 5", "horizon = 5\nhorizn = 6");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        assert!(err.contains("horizn"), "{err}");
    }

    #[test]
    fn semantic_errors() {
        for (from, to) in [
            ("horizon = 5", "horizon = 0"),
            ("start = 0", "start = 3"),
            ("steps = 10", "steps = 0"),
            ("y_bar = [0.6, 0.6]", "y_bar = [0.6]"),
        ] {
            let e = ExperimentConfig::parse(&MINIMAL.replace(from, to)).unwrap_err();
            assert_eq!(e.exit_code(), 3, "{to}: {e}");
        }
        let zero = format!("{MINIMAL}\n[excitation]\nlength = 0\n");
        assert!(ExperimentConfig::parse(&zero)
            .unwrap_err()
            .to_string()
            .contains("no data"));
    }

    #[test]
    fn diagonal_broadcast() {
        assert_eq!(ExperimentConfig::diagonal(&[2.0], 3, "q").unwrap(), vec![2.0; 3]);
        assert_eq!(ExperimentConfig::diagonal(&[1.0, 2.0], 2, "q").unwrap(), vec![1.0, 2.0]);
        assert!(ExperimentConfig::diagonal(&[1.0, 2.0], 3, "q").is_err());
    }
}
