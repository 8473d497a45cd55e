//! Experiment configuration: TOML sections, per-family defaults, scenario
//! strings, and the validation that runs before any allocation.

use crate::error::{Error, Result};
use crate::model::ModelFamily;
use crate::numeric::{OptimizerConfig, OptimizerKind};
use crate::spread::SpreadConfig;
use crate::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root for run directories.
pub const RUNS_DIR_VAR: &str = "TRANSFQMIX_RUNS";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Output root; falls back to $TRANSFQMIX_RUNS, then "runs".
    pub out: Option<PathBuf>,
    /// Blank wall-clock columns and force single-threaded collection so two
    /// runs with one seed produce byte-identical artifacts.
    pub deterministic: bool,
    /// "spread:<n>".
    pub scenario: String,
    pub model: ModelFamily,
    /// Include the IS_SELF / IS_AGENT binary columns in entity observations.
    pub graph_feats: bool,
    /// Optional run-directory name; defaults to "<model>_<scenario>_s<seed>".
    pub name: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out: None,
            deterministic: false,
            scenario: "spread:3".into(),
            model: ModelFamily::Transfqmix,
            graph_feats: true,
            name: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub total_env_steps: u64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Target-network sync cadence, in collected episodes.
    pub target_update_interval: u64,
    pub gamma: f64,
    /// None picks the family default: 0.6 for transformer agents, 0 for RNN.
    pub td_lambda: Option<f64>,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub epsilon_anneal_steps: u64,
    /// None picks the family default: adam for transformer agents, rmsprop
    /// for RNN agents.
    pub optimizer: Option<OptimizerKind>,
    /// None picks the family default: 1e-3 with adam, 5e-4 with rmsprop.
    pub learning_rate: Option<f64>,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Online argmax with target evaluation; false restores max-over-target.
    pub double_q: bool,
    /// Let mixer gradients flow into the agents' hidden rows.
    pub mixer_to_agent_grads: bool,
    /// Metrics cadence in env steps.
    pub log_interval: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            total_env_steps: 500_000,
            buffer_capacity: 5000,
            batch_size: 32,
            target_update_interval: 200,
            gamma: 0.99,
            td_lambda: None,
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            epsilon_anneal_steps: 100_000,
            optimizer: None,
            learning_rate: None,
            grad_clip: 10.0,
            double_q: true,
            mixer_to_agent_grads: true,
            log_interval: 5000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Greedy-evaluation cadence in env steps.
    pub interval: u64,
    /// Episodes per in-training evaluation.
    pub episodes: usize,
    /// Episodes for final tables and transfer grids.
    pub final_episodes: usize,
    /// Fine-tuning restarts the epsilon anneal from this value.
    pub fine_tune_epsilon_start: f64,
    /// Continue the epsilon anneal across curriculum stages instead of
    /// restarting it each stage.
    pub curriculum_continue_epsilon: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            interval: 40_000,
            episodes: 30,
            final_episodes: 1000,
            fine_tune_epsilon_start: 1.0,
            curriculum_continue_epsilon: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub train: TrainSection,
    pub transformer: TransformerConfig,
    pub spread: SpreadConfig,
    pub eval: EvalSection,
}

/// Concrete training hyperparameters after family defaults are applied.
#[derive(Clone, Copy, Debug)]
pub struct TrainParams {
    pub total_env_steps: u64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub target_update_interval: u64,
    pub gamma: f64,
    pub td_lambda: f64,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub epsilon_anneal_steps: u64,
    pub optimizer: OptimizerConfig,
    pub double_q: bool,
    pub mixer_to_agent_grads: bool,
    pub log_interval: u64,
}

/// Parses "spread:<n>" into the agent count.
pub fn parse_scenario(s: &str) -> Result<usize> {
    let rest = s
        .strip_prefix("spread:")
        .ok_or_else(|| Error::config(format!("scenario '{s}' is not of the form spread:<n>")))?;
    let n: usize = rest
        .parse()
        .map_err(|_| Error::config(format!("scenario '{s}' has a non-numeric team size")))?;
    if n < 2 {
        return Err(Error::config(format!(
            "scenario '{s}' needs at least 2 agents"
        )));
    }
    Ok(n)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Copies the scenario's team size into the spread section and checks
    /// every invariant. Call after any override lands.
    pub fn finalize(&mut self) -> Result<()> {
        self.spread.n = parse_scenario(&self.run.scenario)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        parse_scenario(&self.run.scenario)?;
        self.spread.validate()?;
        self.transformer.validate()?;
        let t = &self.train;
        if !(0.0..1.0).contains(&t.gamma) {
            return Err(Error::config(format!("gamma {} outside [0,1)", t.gamma)));
        }
        if let Some(l) = t.td_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(format!("td_lambda {l} outside [0,1]")));
            }
        }
        if t.epsilon_finish > t.epsilon_start {
            return Err(Error::config(format!(
                "epsilon_finish {} exceeds epsilon_start {}",
                t.epsilon_finish, t.epsilon_start
            )));
        }
        if !(0.0..=1.0).contains(&t.epsilon_start) || !(0.0..=1.0).contains(&t.epsilon_finish) {
            return Err(Error::config("epsilon bounds must lie in [0,1]"));
        }
        if t.epsilon_anneal_steps == 0 {
            return Err(Error::config("epsilon_anneal_steps must be positive"));
        }
        if t.batch_size == 0 || t.batch_size > t.buffer_capacity {
            return Err(Error::config(format!(
                "batch_size {} must be in [1, buffer_capacity {}]",
                t.batch_size, t.buffer_capacity
            )));
        }
        if t.target_update_interval == 0 {
            return Err(Error::config("target_update_interval must be positive"));
        }
        if t.log_interval == 0 {
            return Err(Error::config("log_interval must be positive"));
        }
        if let Some(lr) = t.learning_rate {
            if lr <= 0.0 {
                return Err(Error::config(format!("learning_rate {lr} must be positive")));
            }
        }
        if t.grad_clip < 0.0 {
            return Err(Error::config("grad_clip must be non-negative"));
        }
        if self.eval.interval == 0 || self.eval.episodes == 0 || self.eval.final_episodes == 0 {
            return Err(Error::config("eval cadence and episode counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval.fine_tune_epsilon_start) {
            return Err(Error::config("fine_tune_epsilon_start must lie in [0,1]"));
        }
        Ok(())
    }

    /// Training hyperparameters with family defaults filled in. Transformer
    /// agents train with adam at 1e-3 and lambda 0.6; RNN agents keep the
    /// original rmsprop at 5e-4 with lambda 0.
    pub fn train_params(&self) -> TrainParams {
        let transformer_agents = self.run.model.uses_transformer_agent();
        let kind = self.train.optimizer.unwrap_or(if transformer_agents {
            OptimizerKind::Adam
        } else {
            OptimizerKind::RmsProp
        });
        let lr = self.train.learning_rate.unwrap_or(match kind {
            OptimizerKind::Adam => 1e-3,
            OptimizerKind::RmsProp => 5e-4,
        });
        let optimizer = match kind {
            OptimizerKind::Adam => OptimizerConfig::adam(lr, self.train.grad_clip),
            OptimizerKind::RmsProp => OptimizerConfig::rmsprop(lr, self.train.grad_clip),
        };
        TrainParams {
            total_env_steps: self.train.total_env_steps,
            buffer_capacity: self.train.buffer_capacity,
            batch_size: self.train.batch_size,
            target_update_interval: self.train.target_update_interval,
            gamma: self.train.gamma,
            td_lambda: self
                .train
                .td_lambda
                .unwrap_or(if transformer_agents { 0.6 } else { 0.0 }),
            epsilon_start: self.train.epsilon_start,
            epsilon_finish: self.train.epsilon_finish,
            epsilon_anneal_steps: self.train.epsilon_anneal_steps,
            optimizer,
            double_q: self.train.double_q,
            mixer_to_agent_grads: self.train.mixer_to_agent_grads,
            log_interval: self.train.log_interval,
        }
    }

    /// Output root: explicit config, then $TRANSFQMIX_RUNS, then ./runs.
    pub fn output_root(&self) -> PathBuf {
        if let Some(out) = &self.run.out {
            return out.clone();
        }
        if let Ok(v) = std::env::var(RUNS_DIR_VAR) {
            if !v.is_empty() {
                return PathBuf::from(v);
            }
        }
        PathBuf::from("runs")
    }

    /// Directory name for this run under the output root.
    pub fn run_name(&self) -> String {
        self.run.name.clone().unwrap_or_else(|| {
            format!(
                "{}_{}_s{}",
                self.run.model,
                self.run.scenario.replace(':', ""),
                self.run.seed
            )
        })
    }

    /// The four baseline variants derived from this config, for `ablate`.
    pub fn ablation_configs(&self) -> Vec<ExperimentConfig> {
        crate::model::ABLATION_FAMILIES
            .iter()
            .map(|&fam| {
                let mut c = self.clone();
                c.run.model = fam;
                c.run.name = None;
                c
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.finalize().unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.run.seed, cfg.run.seed);
        assert_eq!(back.train.batch_size, 32);
        assert_eq!(back.train.total_env_steps, 500_000);
        assert_eq!(back.eval.interval, 40_000);
        assert_eq!(back.spread.n, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[train]\nbatch_size = 8\nmystery_knob = 3\n";
        let err = ExperimentConfig::from_toml_str(text);
        assert!(err.is_err(), "unknown keys must fail loudly");
        let text2 = "[cheese]\nkind = \"brie\"\n";
        assert!(ExperimentConfig::from_toml_str(text2).is_err());
    }

    #[test]
    fn scenario_strings_parse() {
        assert_eq!(parse_scenario("spread:3").unwrap(), 3);
        assert_eq!(parse_scenario("spread:8").unwrap(), 8);
        assert!(parse_scenario("spread:1").is_err());
        assert!(parse_scenario("spread:x").is_err());
        assert!(parse_scenario("tag:3").is_err());
    }

    #[test]
    fn finalize_propagates_team_size() {
        let mut cfg = ExperimentConfig::default();
        cfg.run.scenario = "spread:6".into();
        cfg.finalize().unwrap();
        assert_eq!(cfg.spread.n, 6);
    }

    #[test]
    fn family_defaults_split_by_agent_kind() {
        let mut cfg = ExperimentConfig::default();
        cfg.run.model = ModelFamily::Transfqmix;
        let p = cfg.train_params();
        assert_eq!(p.optimizer.kind, OptimizerKind::Adam);
        assert_eq!(p.optimizer.lr, 1e-3);
        assert_eq!(p.td_lambda, 0.6);

        cfg.run.model = ModelFamily::Qmix;
        let p = cfg.train_params();
        assert_eq!(p.optimizer.kind, OptimizerKind::RmsProp);
        assert_eq!(p.optimizer.lr, 5e-4);
        assert_eq!(p.td_lambda, 0.0);

        cfg.run.model = ModelFamily::QmixTransformerMixer;
        assert_eq!(cfg.train_params().optimizer.kind, OptimizerKind::RmsProp);

        cfg.run.model = ModelFamily::TransformerAgents;
        assert_eq!(cfg.train_params().optimizer.kind, OptimizerKind::Adam);

        cfg.train.optimizer = Some(OptimizerKind::Adam);
        cfg.train.learning_rate = Some(2e-4);
        cfg.run.model = ModelFamily::Qmix;
        let p = cfg.train_params();
        assert_eq!(p.optimizer.kind, OptimizerKind::Adam, "explicit keys win");
        assert_eq!(p.optimizer.lr, 2e-4);
    }

    #[test]
    fn invalid_settings_are_rejected_with_reasons() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.gamma = 1.0;
        assert!(cfg.validate().is_err(), "gamma must stay below 1");

        let mut cfg = ExperimentConfig::default();
        cfg.train.td_lambda = Some(1.5);
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.train.epsilon_finish = 0.9;
        cfg.train.epsilon_start = 0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.train.batch_size = 9999;
        cfg.train.buffer_capacity = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_expands_to_four_baselines() {
        let cfg = ExperimentConfig::default();
        let combos = cfg.ablation_configs();
        assert_eq!(combos.len(), 4);
        let fams: Vec<String> = combos.iter().map(|c| c.run.model.to_string()).collect();
        assert_eq!(
            fams,
            vec![
                "qmix",
                "qmix_graph_state",
                "qmix_transformer_mixer",
                "transformer_agents"
            ]
        );
        for c in &combos {
            assert_eq!(c.run.seed, cfg.run.seed, "seed shared across the grid");
        }
    }
}
