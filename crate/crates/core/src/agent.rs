//! Decentralized transformer agent: encodes [hidden, entity embeddings],
//! reads action values from the transformed hidden row, and carries that row
//! across time as its recurrent state.
//!
//! All step functions take a batch of graphs at once (one graph per agent per
//! episode); parameters are shared, so batching is just row stacking.

use crate::error::{Error, Result};
use crate::numeric::ops::{linear_bwd, linear_fwd, LinearCache};
use crate::numeric::{Matrix, ParamId, ParamStore, Scalar};
use crate::transformer::{
    encode_bwd, encode_fwd, register_encoder, EncodeCache, EncoderParams, GraphBatch,
    TransformerConfig,
};
use rand::Rng;

#[derive(Clone)]
pub struct TransfAgentParams {
    /// Entity feature embedding, obs_width x emb_dim, no bias.
    pub emb: ParamId,
    pub encoder: EncoderParams,
    /// Action head, emb_dim x n_actions.
    pub head: ParamId,
    /// Entity-action head, emb_dim x 1; only for tasks with entity-targeted actions.
    pub entity_head: Option<ParamId>,
    pub obs_width: usize,
    pub n_actions: usize,
}

pub fn register_transf_agent<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    cfg: TransformerConfig,
    obs_width: usize,
    n_actions: usize,
    entity_actions: bool,
    rng: &mut impl Rng,
) -> Result<TransfAgentParams> {
    if obs_width == 0 || n_actions == 0 {
        return Err(Error::config("agent needs positive obs width and action count"));
    }
    let h = cfg.emb_dim;
    let emb = store.register(
        format!("{prefix}.emb"),
        Matrix::glorot(obs_width, h, rng),
    )?;
    let encoder = register_encoder(store, &format!("{prefix}.enc"), cfg, rng)?;
    let head = store.register(
        format!("{prefix}.head"),
        Matrix::glorot(h, n_actions, rng),
    )?;
    let entity_head = if entity_actions {
        Some(store.register(format!("{prefix}.entity_head"), Matrix::glorot(h, 1, rng))?)
    } else {
        None
    };
    Ok(TransfAgentParams {
        emb,
        encoder,
        head,
        entity_head,
        obs_width,
        n_actions,
    })
}

/// Zero hidden rows for `graphs` agent instances.
pub fn init_hidden<S: Scalar>(graphs: usize, h: usize) -> Matrix<S> {
    Matrix::zeros(graphs, h)
}

pub struct AgentStepOut<S> {
    /// graphs x n_actions.
    pub q: Matrix<S>,
    /// graphs x emb_dim; the transformed hidden row, carried to the next step.
    pub hidden: Matrix<S>,
    /// (graphs * k) x emb_dim transformed entity rows, for decoupled heads.
    pub entity_embeddings: Matrix<S>,
}

pub struct AgentStepCache<S> {
    emb: LinearCache<S>,
    encode: EncodeCache<S>,
    head: LinearCache<S>,
    graphs: usize,
    k: usize,
}

/// One recurrent step. `obs` stacks each graph's k entity rows; `hidden` has
/// one row per graph.
pub fn agent_step_fwd<S: Scalar>(
    store: &ParamStore<S>,
    params: &TransfAgentParams,
    obs: &Matrix<S>,
    hidden: &Matrix<S>,
) -> (AgentStepOut<S>, AgentStepCache<S>) {
    let graphs = hidden.rows();
    assert!(graphs > 0, "empty agent batch");
    assert_eq!(
        obs.rows() % graphs,
        0,
        "obs rows {} do not stack evenly over {} graphs",
        obs.rows(),
        graphs
    );
    let k = obs.rows() / graphs;
    assert_eq!(obs.cols(), params.obs_width, "obs width mismatch");
    let h = store.value(params.emb).cols();
    assert_eq!(hidden.cols(), h, "hidden width mismatch");

    let (entity_emb, emb_cache) = linear_fwd(store, obs, params.emb, None);
    let verts = k + 1;
    let mut x = Matrix::zeros(graphs * verts, h);
    for g in 0..graphs {
        x.row_mut(g * verts).copy_from_slice(hidden.row(g));
        for e in 0..k {
            x.row_mut(g * verts + 1 + e)
                .copy_from_slice(entity_emb.row(g * k + e));
        }
    }
    let gb = GraphBatch::new(graphs, verts);
    let (xt, encode_cache) = encode_fwd(store, &x, &params.encoder, gb);

    let mut new_hidden = Matrix::zeros(graphs, h);
    let mut out_entities = Matrix::zeros(graphs * k, h);
    for g in 0..graphs {
        new_hidden.row_mut(g).copy_from_slice(xt.row(g * verts));
        for e in 0..k {
            out_entities
                .row_mut(g * k + e)
                .copy_from_slice(xt.row(g * verts + 1 + e));
        }
    }
    let (q, head_cache) = linear_fwd(store, &new_hidden, params.head, None);
    (
        AgentStepOut {
            q,
            hidden: new_hidden,
            entity_embeddings: out_entities,
        },
        AgentStepCache {
            emb: emb_cache,
            encode: encode_cache,
            head: head_cache,
            graphs,
            k,
        },
    )
}

/// Backward through one step. `dq` is the gradient on the q outputs;
/// `dhidden_out` collects everything else flowing into the new hidden row
/// (the next step's input gradient plus the mixer's). Returns the gradient
/// w.r.t. the incoming hidden rows.
pub fn agent_step_bwd<S: Scalar>(
    store: &mut ParamStore<S>,
    params: &TransfAgentParams,
    cache: AgentStepCache<S>,
    dq: &Matrix<S>,
    dhidden_out: Option<&Matrix<S>>,
    dentity: Option<&Matrix<S>>,
) -> Matrix<S> {
    let graphs = cache.graphs;
    let k = cache.k;
    let verts = k + 1;
    let mut dhidden_new = linear_bwd(store, cache.head, dq);
    if let Some(extra) = dhidden_out {
        dhidden_new.add_assign(extra);
    }
    let h = dhidden_new.cols();
    let mut dxt = Matrix::zeros(graphs * verts, h);
    for g in 0..graphs {
        dxt.row_mut(g * verts).copy_from_slice(dhidden_new.row(g));
    }
    if let Some(de) = dentity {
        for g in 0..graphs {
            for e in 0..k {
                dxt.row_mut(g * verts + 1 + e).copy_from_slice(de.row(g * k + e));
            }
        }
    }
    let dx = encode_bwd(store, cache.encode, &params.encoder, &dxt);
    let mut dhidden_prev = Matrix::zeros(graphs, h);
    let mut dentity_emb = Matrix::zeros(graphs * k, h);
    for g in 0..graphs {
        dhidden_prev.row_mut(g).copy_from_slice(dx.row(g * verts));
        for e in 0..k {
            dentity_emb
                .row_mut(g * k + e)
                .copy_from_slice(dx.row(g * verts + 1 + e));
        }
    }
    let _dobs = linear_bwd(store, cache.emb, &dentity_emb);
    dhidden_prev
}

/// Q-values for entity-targeted actions: one scalar per requested entity row.
pub fn decoupled_q_values<S: Scalar>(
    store: &ParamStore<S>,
    entity_embeddings: &Matrix<S>,
    targets: &[usize],
    entity_head: ParamId,
) -> Result<Vec<S>> {
    let w = store.value(entity_head);
    assert_eq!(w.cols(), 1, "entity head must be h x 1");
    assert_eq!(w.rows(), entity_embeddings.cols(), "entity head width mismatch");
    let mut out = Vec::with_capacity(targets.len());
    for &t in targets {
        if t >= entity_embeddings.rows() {
            return Err(Error::Usage(format!(
                "entity index {t} out of range for {} embeddings",
                entity_embeddings.rows()
            )));
        }
        let row = entity_embeddings.row(t);
        let q: S = row.iter().zip(w.data()).map(|(&e, &w)| e * w).sum();
        out.push(q);
    }
    Ok(out)
}

/// Epsilon-greedy over the available actions; greedy ties break toward the
/// lowest index and unavailable actions are never selected.
pub fn select_action<S: Scalar>(
    q: &[S],
    available: &[bool],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    assert_eq!(q.len(), available.len(), "mask length mismatch");
    let avail_count = available.iter().filter(|&&a| a).count();
    if avail_count == 0 {
        return Err(Error::Usage("no available actions".into()));
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let pick = rng.gen_range(0..avail_count);
        let mut seen = 0;
        for (i, &a) in available.iter().enumerate() {
            if a {
                if seen == pick {
                    return Ok(i);
                }
                seen += 1;
            }
        }
        unreachable!("available count changed mid-selection");
    }
    let mut best = usize::MAX;
    let mut best_q = S::neg_infinity();
    for (i, (&qi, &a)) in q.iter().zip(available).enumerate() {
        if a && qi > best_q {
            best_q = qi;
            best = i;
        }
    }
    Ok(best)
}
