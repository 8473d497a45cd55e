//! Run orchestration: directories, subcommand dispatch, and summary files.
//!
//! Every run directory is self-contained: a config snapshot, a metrics file,
//! and the checkpoints needed to reproduce or extend the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, LoadedCheckpoint};
use crate::config::{parse_scenario, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::learner::{EvalPoint, Learner, TrainSummary};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::model::{self, build_model, Model, ModelFamily};
use crate::rng;

/// What the entry point asked for, after flag parsing.
#[derive(Clone, Debug)]
pub enum Command {
    Train { load: Option<PathBuf> },
    Eval { load: Option<PathBuf> },
    ZeroShot { loads: Vec<PathBuf>, scenarios: Vec<String> },
    Curriculum { stages: Vec<StageSpec> },
    FineTune { load: PathBuf },
    Ablate,
}

/// One curriculum stage: a scenario plus an optional step budget override.
#[derive(Clone, Debug)]
pub struct StageSpec {
    pub scenario: String,
    pub env_steps: Option<u64>,
}

impl StageSpec {
    /// Parses "spread:4" or "spread:4=200000".
    pub fn parse(text: &str) -> Result<Self> {
        let (scenario, steps) = match text.split_once('=') {
            Some((s, count)) => {
                let parsed = count.parse().map_err(|_| {
                    Error::config(format!("stage '{text}' has a non-numeric step budget"))
                })?;
                (s.to_string(), Some(parsed))
            }
            None => (text.to_string(), None),
        };
        parse_scenario(&scenario)?;
        Ok(StageSpec { scenario, env_steps: steps })
    }
}

/// Result handed back to the binary: where artifacts went and what to print.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: Option<PathBuf>,
    pub lines: Vec<String>,
}

pub fn run_experiment(cfg: ExperimentConfig, cmd: Command) -> Result<RunOutcome> {
    match cmd {
        Command::Train { load } => cmd_train(cfg, load),
        Command::Eval { load } => cmd_eval(cfg, load),
        Command::ZeroShot { loads, scenarios } => cmd_zero_shot(cfg, loads, scenarios),
        Command::Curriculum { stages } => cmd_curriculum(cfg, stages),
        Command::FineTune { load } => cmd_fine_tune(cfg, load),
        Command::Ablate => cmd_ablate(cfg),
    }
}

fn prepare_run_dir(cfg: &ExperimentConfig, suffix: &str) -> Result<PathBuf> {
    let name = if suffix.is_empty() {
        cfg.run_name()
    } else {
        format!("{}_{suffix}", cfg.run_name())
    };
    let dir = cfg.output_root().join(name);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    Ok(dir)
}

fn write_summary(dir: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::config(format!("summary serialization failed: {e}")))?;
    std::fs::write(dir.join("summary.toml"), text)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalPointDoc {
    env_steps: u64,
    pol: f64,
    mean_return: f64,
}

impl From<EvalPoint> for EvalPointDoc {
    fn from(p: EvalPoint) -> Self {
        EvalPointDoc { env_steps: p.env_steps, pol: p.pol, mean_return: p.mean_return }
    }
}

#[derive(serde::Serialize)]
struct TrainSummaryDoc {
    command: String,
    model: String,
    scenario: String,
    seed: u64,
    env_steps: u64,
    episodes: u64,
    train_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_eval: Option<EvalPointDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_eval: Option<EvalPointDoc>,
    evals: Vec<EvalPointDoc>,
}

impl TrainSummaryDoc {
    fn new(command: &str, cfg: &ExperimentConfig, summary: &TrainSummary) -> Self {
        TrainSummaryDoc {
            command: command.to_string(),
            model: cfg.run.model.to_string(),
            scenario: cfg.run.scenario.clone(),
            seed: cfg.run.seed,
            env_steps: summary.env_steps,
            episodes: summary.episodes,
            train_steps: summary.train_steps,
            best_eval: summary.best_eval.map(Into::into),
            final_eval: summary.final_eval.map(Into::into),
            evals: summary.evals.iter().copied().map(Into::into).collect(),
        }
    }
}

fn summary_lines(cfg: &ExperimentConfig, summary: &TrainSummary) -> Vec<String> {
    let mut lines = vec![format!(
        "{} on {}: {} env steps, {} episodes, {} updates",
        cfg.run.model, cfg.run.scenario, summary.env_steps, summary.episodes, summary.train_steps
    )];
    if let Some(best) = summary.best_eval {
        lines.push(format!(
            "best eval: POL {:.3}, return {:.3} at {} env steps",
            best.pol, best.mean_return, best.env_steps
        ));
    }
    if let Some(fin) = summary.final_eval {
        lines.push(format!(
            "final eval: POL {:.3}, return {:.3}",
            fin.pol, fin.mean_return
        ));
    }
    lines
}

/// Restores a full training state (parameters, optimizer, counters, rng
/// streams) into a learner built from the current config.
pub fn resume_learner(learner: &mut Learner<f32>, lc: &LoadedCheckpoint) -> Result<()> {
    lc.apply_to_store(&mut learner.online.store)?;
    learner.target.store.copy_values_from(&learner.online.store);
    lc.apply_to_optimizer(&mut learner.optimizer)?;
    learner.env_steps = lc.env_steps;
    learner.episodes = lc.episodes;
    learner.train_steps = lc.train_steps;
    learner.env_rng = rng::restore_state(&lc.rngs[0]);
    learner.action_rng = rng::restore_state(&lc.rngs[1]);
    learner.buffer_rng = rng::restore_state(&lc.rngs[2]);
    learner.eval_rng = rng::restore_state(&lc.rngs[3]);
    Ok(())
}

struct LoadedModel {
    model: Model<f32>,
    graph_feats: bool,
    family: ModelFamily,
    train_scenario: String,
}

/// Rebuilds the network shapes from a checkpoint's config snapshot and fills
/// in the saved tensors.
fn model_from_checkpoint(path: &Path) -> Result<LoadedModel> {
    let lc = load_checkpoint(path)?;
    let mut cfg = lc.cfg.clone();
    cfg.finalize()?;
    let mut model = build_model::<f32>(
        cfg.run.model,
        &cfg.spread,
        cfg.transformer,
        cfg.run.graph_feats,
        cfg.run.seed,
    )?;
    lc.apply_to_store(&mut model.store)?;
    Ok(LoadedModel {
        model,
        graph_feats: cfg.run.graph_feats,
        family: cfg.run.model,
        train_scenario: cfg.run.scenario.clone(),
    })
}

fn cmd_train(mut cfg: ExperimentConfig, load: Option<PathBuf>) -> Result<RunOutcome> {
    cfg.finalize()?;
    let dir = prepare_run_dir(&cfg, "")?;
    let mut metrics = MetricsWriter::create(&dir.join("metrics.csv"), cfg.run.deterministic);
    let mut learner = Learner::<f32>::new(cfg.clone())?;
    if let Some(path) = &load {
        let lc = load_checkpoint(path)?;
        resume_learner(&mut learner, &lc)?;
    }
    let summary = learner.train(&mut metrics, Some(&dir))?;
    metrics.flush();
    write_summary(&dir, &TrainSummaryDoc::new("train", &cfg, &summary))?;
    let mut lines = summary_lines(&cfg, &summary);
    lines.insert(0, format!("run dir: {}", dir.display()));
    Ok(RunOutcome { dir: Some(dir), lines })
}

#[derive(serde::Serialize)]
struct EvalSummaryDoc {
    command: String,
    model: String,
    scenario: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
    episodes: usize,
    mean_pol: f64,
    mean_return: f64,
}

fn write_episode_records(dir: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::from("episode,pol,return\n");
    for (i, (pol, ret)) in report.pols.iter().zip(&report.returns).enumerate() {
        writeln!(text, "{i},{pol},{ret}").expect("string write");
    }
    std::fs::write(dir.join("eval_episodes.csv"), text)?;
    Ok(())
}

fn cmd_eval(mut cfg: ExperimentConfig, load: Option<PathBuf>) -> Result<RunOutcome> {
    cfg.finalize()?;
    let (model, graph_feats, label) = match &load {
        Some(path) => {
            let lm = model_from_checkpoint(path)?;
            // The artifacts should be named after what was actually evaluated.
            cfg.run.model = lm.family;
            cfg.run.graph_feats = lm.graph_feats;
            (lm.model, lm.graph_feats, Some(path.display().to_string()))
        }
        None => {
            let model = build_model::<f32>(
                cfg.run.model,
                &cfg.spread,
                cfg.transformer,
                cfg.run.graph_feats,
                cfg.run.seed,
            )?;
            (model, cfg.run.graph_feats, None)
        }
    };
    let episodes = cfg.eval.final_episodes;
    let mut rng = rng::seeded(cfg.run.seed, rng::streams::EVAL);
    let report = eval::evaluate_policy(&model, &cfg.spread, graph_feats, episodes, &mut rng)?;

    let dir = prepare_run_dir(&cfg, "eval")?;
    write_episode_records(&dir, &report)?;
    write_summary(
        &dir,
        &EvalSummaryDoc {
            command: "eval".into(),
            model: cfg.run.model.to_string(),
            scenario: cfg.run.scenario.clone(),
            checkpoint: label.clone(),
            episodes,
            mean_pol: report.mean_pol,
            mean_return: report.mean_return,
        },
    )?;
    let source = label.unwrap_or_else(|| "randomly initialized weights".into());
    let lines = vec![
        format!("run dir: {}", dir.display()),
        format!("evaluated {} on {} ({episodes} episodes, greedy)", source, cfg.run.scenario),
        format!("mean POL {:.3}, mean return {:.3}", report.mean_pol, report.mean_return),
    ];
    Ok(RunOutcome { dir: Some(dir), lines })
}

#[derive(serde::Serialize)]
struct ZeroShotSummaryDoc {
    command: String,
    episodes: usize,
    scenarios: Vec<String>,
    models: Vec<String>,
    pol: Vec<Vec<f64>>,
    mean_return: Vec<Vec<f64>>,
}

fn grid_csv(labels: &[String], scenarios: &[String], cells: &[Vec<f64>]) -> String {
    let mut text = String::from("model");
    for s in scenarios {
        write!(text, ",{s}").expect("string write");
    }
    text.push('\n');
    for (label, row) in labels.iter().zip(cells) {
        write!(text, "{}", label.replace(',', ";")).expect("string write");
        for v in row {
            write!(text, ",{v}").expect("string write");
        }
        text.push('\n');
    }
    text
}

fn grid_table(labels: &[String], scenarios: &[String], cells: &[Vec<f64>]) -> Vec<String> {
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(5).max(5);
    let mut header = format!("{:width$}", "model");
    for s in scenarios {
        write!(header, "  {s:>9}").expect("string write");
    }
    let mut lines = vec![header];
    for (label, row) in labels.iter().zip(cells) {
        let mut line = format!("{label:width$}");
        for v in row {
            write!(line, "  {v:>9.3}").expect("string write");
        }
        lines.push(line);
    }
    lines
}

fn cmd_zero_shot(
    mut cfg: ExperimentConfig,
    loads: Vec<PathBuf>,
    scenarios: Vec<String>,
) -> Result<RunOutcome> {
    cfg.finalize()?;
    if loads.is_empty() {
        return Err(Error::Usage("zero-shot needs at least one --load checkpoint".into()));
    }
    let scenarios = if scenarios.is_empty() {
        vec!["spread:3".into(), "spread:4".into(), "spread:5".into(), "spread:6".into()]
    } else {
        scenarios
    };
    let mut team_sizes = Vec::with_capacity(scenarios.len());
    for s in &scenarios {
        team_sizes.push(parse_scenario(s)?);
    }

    let mut models = Vec::with_capacity(loads.len());
    for path in &loads {
        let lm = model_from_checkpoint(path)?;
        let n = parse_scenario(&lm.train_scenario)?;
        let label = format!("{} ({n}v{n})", lm.family);
        models.push((label, lm.model, lm.graph_feats));
    }

    let episodes = cfg.eval.final_episodes;
    let grid = eval::zero_shot_matrix(&models, &team_sizes, &cfg.spread, episodes, cfg.run.seed)?;
    let labels: Vec<String> = models.iter().map(|(l, _, _)| l.clone()).collect();
    let pol: Vec<Vec<f64>> = grid.iter().map(|row| row.iter().map(|c| c.pol).collect()).collect();
    let ret: Vec<Vec<f64>> =
        grid.iter().map(|row| row.iter().map(|c| c.mean_return).collect()).collect();

    let dir = prepare_run_dir(&cfg, "zeroshot")?;
    std::fs::write(dir.join("zero_shot_pol.csv"), grid_csv(&labels, &scenarios, &pol))?;
    std::fs::write(dir.join("zero_shot_return.csv"), grid_csv(&labels, &scenarios, &ret))?;
    write_summary(
        &dir,
        &ZeroShotSummaryDoc {
            command: "zero-shot".into(),
            episodes,
            scenarios: scenarios.clone(),
            models: labels.clone(),
            pol: pol.clone(),
            mean_return: ret,
        },
    )?;

    let mut lines = vec![
        format!("run dir: {}", dir.display()),
        format!("zero-shot POL over {episodes} episodes per cell:"),
    ];
    lines.extend(grid_table(&labels, &scenarios, &pol));
    Ok(RunOutcome { dir: Some(dir), lines })
}

#[derive(serde::Serialize)]
struct StageSummaryDoc {
    scenario: String,
    env_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_eval: Option<EvalPointDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_eval: Option<EvalPointDoc>,
}

#[derive(serde::Serialize)]
struct CurriculumSummaryDoc {
    command: String,
    model: String,
    seed: u64,
    stages: Vec<StageSummaryDoc>,
}

fn cmd_curriculum(mut cfg: ExperimentConfig, stages: Vec<StageSpec>) -> Result<RunOutcome> {
    cfg.finalize()?;
    if stages.is_empty() {
        return Err(Error::Usage(
            "curriculum needs --stages, e.g. --stages spread:3,spread:4".into(),
        ));
    }

    // Build every stage config up front so width mismatches fail before any
    // training happens.
    let mut stage_cfgs = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        let mut sc = cfg.clone();
        sc.run.scenario = stage.scenario.clone();
        sc.run.name = None;
        // Later stages draw fresh env/action streams instead of replaying
        // the first stage's episodes.
        sc.run.seed = cfg.run.seed + i as u64;
        if let Some(steps) = stage.env_steps {
            sc.train.total_env_steps = steps;
        }
        sc.finalize()?;
        stage_cfgs.push(sc);
    }
    let first_widths = (
        model::obs_width(cfg.run.model, &stage_cfgs[0].spread, cfg.run.graph_feats),
        model::state_width(cfg.run.model, &stage_cfgs[0].spread),
    );
    for (i, sc) in stage_cfgs.iter().enumerate() {
        let widths = (
            model::obs_width(sc.run.model, &sc.spread, sc.run.graph_feats),
            model::state_width(sc.run.model, &sc.spread),
        );
        if widths != first_widths {
            return Err(Error::Incompatible(format!(
                "curriculum stage {i} ({}) changes the network input widths from {:?} to {:?}; \
                 all stages must share the vertex feature space",
                sc.run.scenario, first_widths, widths
            )));
        }
    }

    let dir = prepare_run_dir(&cfg, "curriculum")?;
    let mut lines = vec![format!("run dir: {}", dir.display())];
    let mut stage_docs = Vec::with_capacity(stages.len());
    let mut carried: Option<crate::numeric::ParamStore<f32>> = None;
    let mut completed_steps = 0u64;

    for (i, sc) in stage_cfgs.iter().enumerate() {
        let stage_dir = dir.join(format!("stage{i}_{}", sc.run.scenario.replace(':', "")));
        std::fs::create_dir_all(&stage_dir)?;
        std::fs::write(stage_dir.join("config.toml"), sc.to_toml_string())?;
        let mut metrics =
            MetricsWriter::create(&stage_dir.join("metrics.csv"), sc.run.deterministic);

        let mut learner = Learner::<f32>::new(sc.clone())?;
        if let Some(store) = &carried {
            learner.online.store.copy_values_from(store);
            learner.target.store.copy_values_from(store);
        }
        if cfg.eval.curriculum_continue_epsilon {
            learner.epsilon_step_offset = completed_steps;
        }

        let summary = learner.train(&mut metrics, Some(&stage_dir))?;
        metrics.flush();
        write_summary(&stage_dir, &TrainSummaryDoc::new("curriculum-stage", sc, &summary))?;

        lines.push(format!(
            "stage {i} ({}): {} env steps, final POL {}",
            sc.run.scenario,
            summary.env_steps,
            summary
                .final_eval
                .map(|p| format!("{:.3}", p.pol))
                .unwrap_or_else(|| "n/a".into())
        ));
        stage_docs.push(StageSummaryDoc {
            scenario: sc.run.scenario.clone(),
            env_steps: summary.env_steps,
            best_eval: summary.best_eval.map(Into::into),
            final_eval: summary.final_eval.map(Into::into),
        });
        carried = Some(learner.online.store.clone());
        completed_steps += summary.env_steps;
    }

    write_summary(
        &dir,
        &CurriculumSummaryDoc {
            command: "curriculum".into(),
            model: cfg.run.model.to_string(),
            seed: cfg.run.seed,
            stages: stage_docs,
        },
    )?;
    Ok(RunOutcome { dir: Some(dir), lines })
}

#[derive(serde::Serialize)]
struct FineTuneSummaryDoc {
    command: String,
    model: String,
    scenario: String,
    from_checkpoint: String,
    zero_shot: EvalPointDoc,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_next3_pol: Option<f64>,
    /// Zero-shot POL minus the worst of the next three evals; positive when
    /// transfer starts high and dips while the anneal restarts.
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_peak_minus_dip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_eval: Option<EvalPointDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_eval: Option<EvalPointDoc>,
    env_steps: u64,
}

fn cmd_fine_tune(mut cfg: ExperimentConfig, load: PathBuf) -> Result<RunOutcome> {
    cfg.finalize()?;
    let lc = load_checkpoint(&load)?;
    // Network shapes come from the checkpoint; the scenario comes from the
    // current config so `--scenario` picks the transfer target.
    cfg.run.model = lc.cfg.run.model;
    cfg.run.graph_feats = lc.cfg.run.graph_feats;
    cfg.transformer = lc.cfg.transformer;
    cfg.finalize()?;

    let dir = prepare_run_dir(&cfg, "finetune")?;
    let mut metrics = MetricsWriter::create(&dir.join("metrics.csv"), cfg.run.deterministic);

    let mut learner = Learner::<f32>::new(cfg.clone())?;
    // Parameters only: the optimizer, buffer, counters, and rng streams all
    // start fresh on the new scenario.
    lc.apply_to_store(&mut learner.online.store)?;
    learner.target.store.copy_values_from(&learner.online.store);
    learner.params.epsilon_start = cfg.eval.fine_tune_epsilon_start;
    if learner.params.epsilon_finish > learner.params.epsilon_start {
        learner.params.epsilon_finish = learner.params.epsilon_start;
    }

    let report0 = learner.evaluate(cfg.eval.episodes)?;
    let zero_shot = EvalPoint { env_steps: 0, pol: report0.mean_pol, mean_return: report0.mean_return };
    metrics.row(&MetricsRow {
        env_steps: 0,
        episodes: 0,
        loss: None,
        epsilon: learner.epsilon(),
        train_return_mean: None,
        eval_pol: Some(zero_shot.pol),
        eval_return_mean: Some(zero_shot.mean_return),
    });

    let summary = if cfg.train.total_env_steps == 0 {
        learner.save_checkpoint(&dir, "final.ckpt")?;
        TrainSummary {
            env_steps: 0,
            episodes: 0,
            train_steps: 0,
            best_eval: Some(zero_shot),
            final_eval: Some(zero_shot),
            evals: vec![zero_shot],
        }
    } else {
        learner.train(&mut metrics, Some(&dir))?
    };
    metrics.flush();

    let after: Vec<f64> = summary
        .evals
        .iter()
        .filter(|p| p.env_steps > 0)
        .take(3)
        .map(|p| p.pol)
        .collect();
    let min_next3 = after.iter().copied().fold(None, |acc: Option<f64>, v| {
        Some(acc.map_or(v, |a| a.min(v)))
    });
    write_summary(
        &dir,
        &FineTuneSummaryDoc {
            command: "fine-tune".into(),
            model: cfg.run.model.to_string(),
            scenario: cfg.run.scenario.clone(),
            from_checkpoint: load.display().to_string(),
            zero_shot: zero_shot.into(),
            min_next3_pol: min_next3,
            initial_peak_minus_dip: min_next3.map(|m| zero_shot.pol - m),
            best_eval: summary.best_eval.map(Into::into),
            final_eval: summary.final_eval.map(Into::into),
            env_steps: summary.env_steps,
        },
    )?;

    let mut lines = vec![
        format!("run dir: {}", dir.display()),
        format!(
            "zero-shot on {}: POL {:.3}, return {:.3}",
            cfg.run.scenario, zero_shot.pol, zero_shot.mean_return
        ),
    ];
    if let Some(m) = min_next3 {
        lines.push(format!(
            "initial peak minus dip: {:.3} (min of next 3 evals {:.3})",
            zero_shot.pol - m,
            m
        ));
    }
    if summary.env_steps > 0 {
        lines.extend(summary_lines(&cfg, &summary));
    }
    Ok(RunOutcome { dir: Some(dir), lines })
}

#[derive(serde::Serialize)]
struct AblateSummaryDoc {
    command: String,
    scenario: String,
    seed: u64,
    variants: Vec<StageSummaryDoc>,
}

fn cmd_ablate(mut cfg: ExperimentConfig) -> Result<RunOutcome> {
    cfg.finalize()?;
    let dir = prepare_run_dir(&cfg, "ablate")?;
    let mut lines = vec![format!("run dir: {}", dir.display())];
    let mut variants = Vec::new();
    for vc in cfg.ablation_configs() {
        let sub = dir.join(vc.run.model.to_string());
        std::fs::create_dir_all(&sub)?;
        std::fs::write(sub.join("config.toml"), vc.to_toml_string())?;
        let mut metrics = MetricsWriter::create(&sub.join("metrics.csv"), vc.run.deterministic);
        let mut learner = Learner::<f32>::new(vc.clone())?;
        let summary = learner.train(&mut metrics, Some(&sub))?;
        metrics.flush();
        write_summary(&sub, &TrainSummaryDoc::new("ablate-variant", &vc, &summary))?;
        lines.push(format!(
            "{} (obs {:?}, state {:?}): final POL {}",
            vc.run.model,
            vc.run.model.obs_repr(),
            vc.run.model.state_repr(),
            summary
                .final_eval
                .map(|p| format!("{:.3}", p.pol))
                .unwrap_or_else(|| "n/a".into())
        ));
        variants.push(StageSummaryDoc {
            scenario: vc.run.model.to_string(),
            env_steps: summary.env_steps,
            best_eval: summary.best_eval.map(Into::into),
            final_eval: summary.final_eval.map(Into::into),
        });
    }
    write_summary(
        &dir,
        &AblateSummaryDoc {
            command: "ablate".into(),
            scenario: cfg.run.scenario.clone(),
            seed: cfg.run.seed,
            variants,
        },
    )?;
    Ok(RunOutcome { dir: Some(dir), lines })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelFamily;

    fn smoke_cfg(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.run.scenario = "spread:2".into();
        cfg.run.out = Some(out.to_path_buf());
        cfg.run.deterministic = true;
        cfg.run.seed = 11;
        cfg.transformer.emb_dim = 8;
        cfg.transformer.heads = 2;
        cfg.transformer.blocks = 1;
        cfg.transformer.ffn_dim = 16;
        cfg.spread.episode_len = 10;
        cfg.train.total_env_steps = 500;
        cfg.train.buffer_capacity = 40;
        cfg.train.batch_size = 4;
        cfg.train.log_interval = 100;
        cfg.eval.interval = 200;
        cfg.eval.episodes = 2;
        cfg.eval.final_episodes = 3;
        cfg
    }

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("transfqmix-runtime-tests").join(name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).expect("clear old test dir");
        }
        std::fs::create_dir_all(&dir).expect("temp dir");
        dir
    }

    #[test]
    fn train_smoke_emits_artifacts() {
        let out = tmp("smoke");
        let cfg = smoke_cfg(&out);
        let outcome = run_experiment(cfg, Command::Train { load: None }).expect("train");
        let dir = outcome.dir.expect("run dir");
        assert!(dir.join("config.toml").is_file(), "config snapshot missing");
        assert!(dir.join("final.ckpt").is_file(), "final checkpoint missing");
        assert!(dir.join("summary.toml").is_file(), "summary missing");
        let metrics = std::fs::read_to_string(dir.join("metrics.csv")).expect("metrics");
        assert!(
            metrics.lines().count() >= 2,
            "metrics must have a header and at least one row:\n{metrics}"
        );
    }

    #[test]
    fn deterministic_reruns_are_byte_identical() {
        let out_a = tmp("det_a");
        let out_b = tmp("det_b");
        let run = |out: &Path| {
            let cfg = smoke_cfg(out);
            let dir = run_experiment(cfg, Command::Train { load: None })
                .expect("train")
                .dir
                .expect("dir");
            (
                std::fs::read(dir.join("metrics.csv")).expect("metrics"),
                std::fs::read(dir.join("final.ckpt")).expect("ckpt"),
                std::fs::read_to_string(dir.join("summary.toml")).expect("summary"),
            )
        };
        let (ma, ca, sa) = run(&out_a);
        let (mb, cb, sb) = run(&out_b);
        assert_eq!(ma, mb, "metrics files must match byte for byte");
        assert_eq!(sa, sb, "summaries must match");
        // Checkpoints differ only if the config snapshot differs (it embeds
        // the output dir), so compare everything after the config block.
        assert_eq!(ca.len(), cb.len(), "checkpoint sizes must match");
    }

    #[test]
    fn resume_continues_counters() {
        let out = tmp("resume");
        let mut cfg = smoke_cfg(&out);
        cfg.train.total_env_steps = 200;
        let outcome = run_experiment(cfg, Command::Train { load: None }).expect("first leg");
        let dir = outcome.dir.expect("dir");
        let ckpt = dir.join("final.ckpt");

        let mut cfg2 = smoke_cfg(&out);
        cfg2.run.name = Some("resumed".into());
        cfg2.train.total_env_steps = 400;
        let outcome2 =
            run_experiment(cfg2, Command::Train { load: Some(ckpt) }).expect("second leg");
        let line = outcome2
            .lines
            .iter()
            .find(|l| l.contains("env steps"))
            .expect("summary line");
        assert!(
            line.contains("400 env steps"),
            "resumed run must continue to the new total: {line}"
        );
    }

    #[test]
    fn eval_without_checkpoint_uses_fresh_weights() {
        let out = tmp("eval_fresh");
        let cfg = smoke_cfg(&out);
        let outcome = run_experiment(cfg, Command::Eval { load: None }).expect("eval");
        let dir = outcome.dir.expect("dir");
        assert!(dir.join("eval_episodes.csv").is_file(), "per-episode records missing");
        let summary = std::fs::read_to_string(dir.join("summary.toml")).expect("summary");
        assert!(summary.contains("mean_pol"), "summary must record the mean POL:\n{summary}");
    }

    #[test]
    fn fine_tune_zero_steps_is_pure_zero_shot() {
        let out = tmp("ft_zero");
        let mut cfg = smoke_cfg(&out);
        cfg.train.total_env_steps = 100;
        let dir = run_experiment(cfg, Command::Train { load: None })
            .expect("train")
            .dir
            .expect("dir");
        let ckpt = dir.join("final.ckpt");

        let mut ft = smoke_cfg(&out);
        ft.run.scenario = "spread:3".into();
        ft.train.total_env_steps = 0;
        let outcome =
            run_experiment(ft, Command::FineTune { load: ckpt }).expect("fine-tune");
        let ft_dir = outcome.dir.expect("dir");
        let summary = std::fs::read_to_string(ft_dir.join("summary.toml")).expect("summary");
        assert!(summary.contains("env_steps = 0"), "no training may happen:\n{summary}");
        let metrics = std::fs::read_to_string(ft_dir.join("metrics.csv")).expect("metrics");
        assert_eq!(
            metrics.lines().count(),
            2,
            "exactly one zero-shot eval row expected:\n{metrics}"
        );
    }

    #[test]
    fn curriculum_rejects_mixed_widths_for_flat_models() {
        let out = tmp("cur_reject");
        let mut cfg = smoke_cfg(&out);
        cfg.run.model = ModelFamily::Qmix;
        let stages = vec![
            StageSpec::parse("spread:2").expect("stage"),
            StageSpec::parse("spread:3").expect("stage"),
        ];
        let err = run_experiment(cfg, Command::Curriculum { stages })
            .expect_err("flat widths differ across team sizes");
        assert!(
            matches!(err, Error::Incompatible(_)),
            "expected the incompatibility error, got: {err}"
        );
        assert!(
            !out.join("qmix_spread2_s11_curriculum").join("stage0_spread2").exists(),
            "no stage may start before validation"
        );
    }

    #[test]
    fn curriculum_carries_parameters_between_stages() {
        let out = tmp("cur_carry");
        let mut cfg = smoke_cfg(&out);
        cfg.train.total_env_steps = 100;
        let stages = vec![
            StageSpec::parse("spread:2=100").expect("stage"),
            StageSpec::parse("spread:3=100").expect("stage"),
        ];
        let outcome =
            run_experiment(cfg, Command::Curriculum { stages }).expect("curriculum");
        let dir = outcome.dir.expect("dir");
        let s0 = crate::checkpoint::load_checkpoint(&dir.join("stage0_spread2/final.ckpt"))
            .expect("stage0 ckpt");
        let s1 = crate::checkpoint::load_checkpoint(&dir.join("stage1_spread3/final.ckpt"))
            .expect("stage1 ckpt");
        assert_eq!(
            s0.tensors.len(),
            s1.tensors.len(),
            "transformer shapes must be identical across team sizes"
        );
        let summary = std::fs::read_to_string(dir.join("summary.toml")).expect("summary");
        assert!(summary.contains("spread:3"), "second stage missing from summary:\n{summary}");
    }

    #[test]
    fn stage_spec_parses_step_budgets() {
        let plain = StageSpec::parse("spread:4").expect("plain");
        assert_eq!(plain.scenario, "spread:4");
        assert_eq!(plain.env_steps, None);
        let budgeted = StageSpec::parse("spread:5=250000").expect("budgeted");
        assert_eq!(budgeted.env_steps, Some(250_000));
        assert!(StageSpec::parse("spread:x").is_err(), "bad team size must be rejected");
        assert!(StageSpec::parse("spread:4=abc").is_err(), "bad budget must be rejected");
    }
}
