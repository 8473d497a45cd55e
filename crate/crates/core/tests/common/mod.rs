//! Helpers shared by the integration suites: finite-difference gradient
//! checks and discovery of trained-run artifacts.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transfqmix_core::agent::{agent_step_bwd, agent_step_fwd, register_transf_agent};
use transfqmix_core::baseline::{
    hypernet_mixer_bwd, hypernet_mixer_fwd, register_hypernet_mixer, register_rnn_agent,
    rnn_step_bwd, rnn_step_fwd,
};
use transfqmix_core::checkpoint::load_checkpoint;
use transfqmix_core::config::{ExperimentConfig, RUNS_DIR_VAR};
use transfqmix_core::learner::{collect_episode, compute_loss_and_grads, LossOpts};
use transfqmix_core::mixer::{init_recurrent, mixer_step_bwd, mixer_step_fwd, register_transf_mixer};
use transfqmix_core::model::{build_model, Model, ModelFamily};
use transfqmix_core::numeric::{Matrix, ParamId, ParamStore};
use transfqmix_core::transformer::TransformerConfig;

pub const GRAD_H: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs());
    if denom < 1e-7 {
        0.0
    } else {
        (analytic - fd).abs() / denom
    }
}

pub fn dot(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn sample_coords(
    store: &ParamStore<f64>,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Vec<(ParamId, usize)> {
    let sizes: Vec<(ParamId, usize)> = store.iter().map(|(id, _, v)| (id, v.len())).collect();
    (0..count)
        .map(|_| {
            let (id, len) = sizes[rng.gen_range(0..sizes.len())];
            (id, rng.gen_range(0..len))
        })
        .collect()
}

/// Runs central differences at the sampled coordinates against the analytic
/// gradients already sitting in the store. Returns the worst relative error
/// with the name of the parameter it came from.
pub fn check_coords(
    store: &mut ParamStore<f64>,
    coords: &[(ParamId, usize)],
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> (f64, String) {
    let mut worst = (0.0_f64, String::new());
    for &(id, i) in coords {
        let analytic = store.grad(id).data()[i];
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + GRAD_H;
        let plus = loss(store);
        store.value_mut(id).data_mut()[i] = orig - GRAD_H;
        let minus = loss(store);
        store.value_mut(id).data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * GRAD_H);
        let err = rel_err(analytic, fd);
        if err > worst.0 {
            worst = (
                err,
                format!("{}[{i}] analytic {analytic:.3e} fd {fd:.3e}", store.name(id)),
            );
        }
    }
    worst
}

pub fn tiny_tf(rng: &mut ChaCha8Rng) -> TransformerConfig {
    let heads = rng.gen_range(1..=2);
    TransformerConfig {
        emb_dim: heads * rng.gen_range(3..=5),
        heads,
        blocks: rng.gen_range(1..=2),
        ffn_dim: rng.gen_range(6..=14),
        ..TransformerConfig::default()
    }
}

/// Transformer agent step: objective sums weighted q, next-hidden, and
/// entity-embedding outputs so every output path carries gradient.
pub fn transf_agent_worst(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tf = tiny_tf(&mut rng);
    let h = tf.emb_dim;
    let ow = rng.gen_range(2..=5);
    let na = rng.gen_range(2..=5);
    let graphs = rng.gen_range(1..=3);
    let k = rng.gen_range(2..=4);
    let entity_head = seed % 2 == 0;

    let mut store = ParamStore::<f64>::new();
    let p = register_transf_agent(&mut store, "agent", tf, ow, na, entity_head, &mut rng).unwrap();
    let obs = Matrix::<f64>::uniform(graphs * k, ow, 1.0, &mut rng);
    let hidden = Matrix::<f64>::uniform(graphs, h, 1.0, &mut rng);
    let cq = Matrix::<f64>::uniform(graphs, na, 1.0, &mut rng);
    let ch = Matrix::<f64>::uniform(graphs, h, 1.0, &mut rng);
    let ce = Matrix::<f64>::uniform(graphs * k, h, 1.0, &mut rng);

    store.zero_grads();
    let (_, cache) = agent_step_fwd(&store, &p, &obs, &hidden);
    agent_step_bwd(&mut store, &p, cache, &cq, Some(&ch), Some(&ce));

    let coords = sample_coords(&store, &mut rng, 8);
    check_coords(&mut store, &coords, |s| {
        let (out, _) = agent_step_fwd(s, &p, &obs, &hidden);
        dot(&out.q, &cq) + dot(&out.hidden, &ch) + dot(&out.entity_embeddings, &ce)
    })
}

/// Transformer mixer step: objective covers q_tot and the recurrent rows.
pub fn transf_mixer_worst(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tf = tiny_tf(&mut rng);
    let h = tf.emb_dim;
    let sw = rng.gen_range(2..=5);
    let n = rng.gen_range(2..=3);
    let graphs = rng.gen_range(1..=3);
    let k = rng.gen_range(2..=4);
    let hw = if seed % 2 == 0 { h } else { h + 3 };

    let mut store = ParamStore::<f64>::new();
    let p = register_transf_mixer(&mut store, "mixer", tf, sw, hw, &mut rng).unwrap();
    let qa = Matrix::<f64>::uniform(graphs, n, 1.0, &mut rng);
    let hidden = Matrix::<f64>::uniform(graphs * n, hw, 1.0, &mut rng);
    let state = Matrix::<f64>::uniform(graphs * k, sw, 1.0, &mut rng);
    let rec = init_recurrent::<f64>(graphs, h);
    let cq = Matrix::<f64>::uniform(graphs, 1, 1.0, &mut rng);
    let cr = Matrix::<f64>::uniform(graphs * 3, h, 1.0, &mut rng);

    store.zero_grads();
    let (_, cache) = mixer_step_fwd(&store, &p, &qa, &hidden, &state, &rec);
    mixer_step_bwd(&mut store, &p, cache, &cq, Some(&cr));

    let coords = sample_coords(&store, &mut rng, 8);
    check_coords(&mut store, &coords, |s| {
        let (out, _) = mixer_step_fwd(s, &p, &qa, &hidden, &state, &rec);
        dot(&out.q_tot, &cq) + dot(&out.recurrent, &cr)
    })
}

pub fn hypernet_mixer_worst(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sw = rng.gen_range(2..=8);
    let n = rng.gen_range(2..=4);
    let graphs = rng.gen_range(1..=3);
    let embed = rng.gen_range(2..=6);
    let hyper = rng.gen_range(2..=6);

    let mut store = ParamStore::<f64>::new();
    let p = register_hypernet_mixer(&mut store, "mixer", sw, n, embed, hyper, &mut rng).unwrap();
    let qa = Matrix::<f64>::uniform(graphs, n, 1.0, &mut rng);
    let state = Matrix::<f64>::uniform(graphs, sw, 1.0, &mut rng);
    let cq = Matrix::<f64>::uniform(graphs, 1, 1.0, &mut rng);

    store.zero_grads();
    let (_, cache) = hypernet_mixer_fwd(&store, &p, &qa, &state);
    hypernet_mixer_bwd(&mut store, &p, cache, &cq);

    let coords = sample_coords(&store, &mut rng, 8);
    check_coords(&mut store, &coords, |s| {
        let (q_tot, _) = hypernet_mixer_fwd(s, &p, &qa, &state);
        dot(&q_tot, &cq)
    })
}

pub fn rnn_agent_worst(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let iw = rng.gen_range(3..=8);
    let na = rng.gen_range(2..=5);
    let hidden_w = rng.gen_range(3..=8);
    let rows = rng.gen_range(1..=4);

    let mut store = ParamStore::<f64>::new();
    let p = register_rnn_agent(&mut store, "agent", iw, na, hidden_w, &mut rng).unwrap();
    let obs = Matrix::<f64>::uniform(rows, iw, 1.0, &mut rng);
    let hidden = Matrix::<f64>::uniform(rows, hidden_w, 1.0, &mut rng);
    let cq = Matrix::<f64>::uniform(rows, na, 1.0, &mut rng);
    let ch = Matrix::<f64>::uniform(rows, hidden_w, 1.0, &mut rng);

    store.zero_grads();
    let (_, _, cache) = rnn_step_fwd(&store, &p, &obs, &hidden);
    rnn_step_bwd(&mut store, &p, cache, &cq, Some(&ch));

    let coords = sample_coords(&store, &mut rng, 8);
    check_coords(&mut store, &coords, |s| {
        let (q, h_next, _) = rnn_step_fwd(s, &p, &obs, &hidden);
        dot(&q, &cq) + dot(&h_next, &ch)
    })
}

/// Full training loss on 2-agent, 3-step episodes collected from the real
/// environment, checked through both networks end to end.
pub fn full_loss_worst(seed: u64, family: ModelFamily) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toml = r#"
[run]
scenario = "spread:2"
seed = 3

[spread]
episode_len = 3

[transformer]
emb_dim = 6
heads = 2
blocks = 1
ffn_dim = 8
"#;
    let mut cfg = ExperimentConfig::from_toml_str(toml).unwrap();
    cfg.finalize().unwrap();
    let spread = cfg.spread;
    let tf = cfg.transformer;
    let graph_feats = cfg.run.graph_feats;

    let mut online = build_model::<f64>(family, &spread, tf, graph_feats, seed).unwrap();
    let target = build_model::<f64>(family, &spread, tf, graph_feats, seed + 1).unwrap();

    let mut env_rng = ChaCha8Rng::seed_from_u64(seed + 10);
    let mut act_rng = ChaCha8Rng::seed_from_u64(seed + 20);
    let eps: Vec<_> = (0..2)
        .map(|_| {
            collect_episode(&online, &spread, graph_feats, 0.7, &mut env_rng, &mut act_rng)
                .unwrap()
        })
        .collect();
    let batch: Vec<&_> = eps.iter().collect();

    let opts = LossOpts {
        gamma: 0.9,
        lambda: if seed % 2 == 0 { 0.6 } else { 0.0 },
        double_q: seed % 3 != 0,
        mixer_to_agent_grads: true,
    };

    online.store.zero_grads();
    compute_loss_and_grads(&mut online, &target, &batch, &opts).unwrap();

    let coords = sample_coords(&online.store, &mut rng, 6);
    let mut worst = (0.0_f64, String::new());
    for &(id, i) in &coords {
        let analytic = online.store.grad(id).data()[i];
        let orig = online.store.value(id).data()[i];
        online.store.value_mut(id).data_mut()[i] = orig + GRAD_H;
        online.store.zero_grads();
        let plus = compute_loss_and_grads(&mut online, &target, &batch, &opts).unwrap();
        online.store.value_mut(id).data_mut()[i] = orig - GRAD_H;
        online.store.zero_grads();
        let minus = compute_loss_and_grads(&mut online, &target, &batch, &opts).unwrap();
        online.store.value_mut(id).data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * GRAD_H);
        let err = rel_err(analytic, fd);
        if err > worst.0 {
            worst = (
                err,
                format!(
                    "{}[{i}] analytic {analytic:.3e} fd {fd:.3e}",
                    online.store.name(id)
                ),
            );
        }
    }
    worst
}

/// Root directory holding finished training runs; the env var the CLI honors
/// wins, otherwise the workspace-level runs directory.
pub fn runs_root() -> PathBuf {
    if let Ok(v) = std::env::var(RUNS_DIR_VAR) {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../runs")
}

/// Directory of one 3v3 training run, following the runtime's naming scheme.
pub fn run_dir(model: &str, seed: u64) -> PathBuf {
    runs_root().join(format!("{model}_spread3_s{seed}"))
}

/// Reads one POL value out of a run's summary file, e.g. ("best_eval", "pol").
pub fn summary_pol(dir: &Path, section: &str) -> Result<f64, String> {
    let path = dir.join("summary.toml");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let value: toml::Value = text
        .parse()
        .map_err(|e| format!("cannot parse {}: {e}", path.display()))?;
    value
        .get(section)
        .and_then(|s| s.get("pol"))
        .and_then(toml::Value::as_float)
        .ok_or_else(|| format!("{} has no {section}.pol", path.display()))
}

/// Mean of one POL field over several seeds of a model's 3v3 runs.
pub fn mean_pol_over_seeds(model: &str, seeds: &[u64], section: &str) -> Result<f64, String> {
    let mut total = 0.0;
    for &s in seeds {
        total += summary_pol(&run_dir(model, s), section)?;
    }
    Ok(total / seeds.len() as f64)
}

/// Rebuilds a model from a checkpoint file, restoring only its parameters.
pub fn model_from_checkpoint(path: &Path) -> Result<(Model<f32>, ExperimentConfig), String> {
    let lc = load_checkpoint(path).map_err(|e| e.to_string())?;
    let cfg = lc.cfg.clone();
    let mut model = build_model::<f32>(
        cfg.run.model,
        &cfg.spread,
        cfg.transformer,
        cfg.run.graph_feats,
        cfg.run.seed,
    )
    .map_err(|e| e.to_string())?;
    lc.apply_to_store(&mut model.store).map_err(|e| e.to_string())?;
    Ok((model, cfg))
}

/// Fails with a launch hint when expected run directories are missing.
pub fn require_checkpoints(pairs: &[(&str, u64)]) -> Result<(), String> {
    let missing: Vec<String> = pairs
        .iter()
        .filter(|(m, s)| !run_dir(m, *s).join("best.ckpt").exists())
        .map(|(m, s)| run_dir(m, *s).display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(format!(
            "missing trained runs: {}. Train them first (see README) or point {} at a \
             directory holding them.",
            missing.join(", "),
            RUNS_DIR_VAR
        ))
    }
}
