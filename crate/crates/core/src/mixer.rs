//! Centralized transformer mixer: transforms [agent hiddens, recurrent
//! weight-seed rows, embedded state entities] and reads the monotonic mixing
//! weights out of the transformed rows.
//!
//! Per graph, vertex layout is [n agent hidden rows | w_b1 | w_W2 | w_b2 |
//! k state rows]. The mixing weights pass through abs (W1, W2) and relu (b2),
//! so Q_tot is non-decreasing in every agent's chosen value; the three weight
//! rows are carried to the next step pre-activation.

use crate::error::{Error, Result};
use crate::numeric::ops::{linear_bwd, linear_fwd, LinearCache};
use crate::numeric::{Matrix, ParamId, ParamStore, Scalar};
use crate::transformer::{
    encode_bwd, encode_fwd, register_encoder, EncodeCache, EncoderParams, GraphBatch,
    TransformerConfig,
};
use rand::Rng;

/// Weight-seed rows per graph: b1, W2, b2.
pub const REC_ROWS: usize = 3;

#[derive(Clone)]
pub struct TransfMixerParams {
    /// State feature embedding, state_width x emb_dim, no bias.
    pub emb: ParamId,
    pub encoder: EncoderParams,
    /// emb_dim x 1 projection producing the scalar b2.
    pub scalar_proj: ParamId,
    /// Optional projection for incoming agent hidden rows whose width differs
    /// from emb_dim (RNN agents paired with this mixer).
    pub hidden_proj: Option<ParamId>,
    pub state_width: usize,
}

pub fn register_transf_mixer<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    cfg: TransformerConfig,
    state_width: usize,
    agent_hidden_width: usize,
    rng: &mut impl Rng,
) -> Result<TransfMixerParams> {
    if state_width == 0 {
        return Err(Error::config("mixer needs a positive state width"));
    }
    let h = cfg.emb_dim;
    let emb = store.register(
        format!("{prefix}.emb"),
        Matrix::glorot(state_width, h, rng),
    )?;
    let encoder = register_encoder(store, &format!("{prefix}.enc"), cfg, rng)?;
    let scalar_proj = store.register(format!("{prefix}.scalar_proj"), Matrix::glorot(h, 1, rng))?;
    let hidden_proj = if agent_hidden_width != h {
        Some(store.register(
            format!("{prefix}.hidden_proj"),
            Matrix::glorot(agent_hidden_width, h, rng),
        )?)
    } else {
        None
    };
    Ok(TransfMixerParams {
        emb,
        encoder,
        scalar_proj,
        hidden_proj,
        state_width,
    })
}

/// Zero weight-seed rows for `graphs` mixer instances.
pub fn init_recurrent<S: Scalar>(graphs: usize, h: usize) -> Matrix<S> {
    Matrix::zeros(graphs * REC_ROWS, h)
}

pub struct MixerStepOut<S> {
    /// graphs x 1 joint action values.
    pub q_tot: Matrix<S>,
    /// (graphs * 3) x emb_dim pre-activation weight rows for the next step.
    pub recurrent: Matrix<S>,
}

pub struct MixerStepCache<S> {
    hproj: Option<LinearCache<S>>,
    emb: LinearCache<S>,
    encode: EncodeCache<S>,
    /// Transformed graph rows, pre-activation.
    xt: Matrix<S>,
    qa: Matrix<S>,
    /// Per graph: y = qa * W1 + b1 (1 x h each, stacked).
    y: Matrix<S>,
    /// Per graph: pre-relu b2 scalar.
    b2_pre: Vec<S>,
    n: usize,
    k: usize,
    graphs: usize,
    hidden_width: usize,
}

fn sign_or_zero<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// One mixer step over a batch of graphs.
///
/// `qa`: graphs x n chosen agent values. `hidden`: (graphs*n) x hidden_width
/// agent hidden rows. `state`: (graphs*k) x state_width entity rows.
/// `recurrent`: (graphs*3) x emb_dim carried weight-seed rows.
pub fn mixer_step_fwd<S: Scalar>(
    store: &ParamStore<S>,
    params: &TransfMixerParams,
    qa: &Matrix<S>,
    hidden: &Matrix<S>,
    state: &Matrix<S>,
    recurrent: &Matrix<S>,
) -> (MixerStepOut<S>, MixerStepCache<S>) {
    let graphs = qa.rows();
    let n = qa.cols();
    assert!(graphs > 0 && n > 0, "empty mixer batch");
    assert_eq!(hidden.rows(), graphs * n, "hidden rows must be graphs * n");
    assert_eq!(recurrent.rows(), graphs * REC_ROWS, "recurrent rows must be graphs * 3");
    assert_eq!(state.cols(), params.state_width, "state width mismatch");
    assert_eq!(state.rows() % graphs, 0, "state rows must stack evenly");
    let k = state.rows() / graphs;
    let h = store.value(params.emb).cols();
    let hidden_width = hidden.cols();

    let (hid, hproj_cache) = match params.hidden_proj {
        Some(p) => {
            let (hp, c) = linear_fwd(store, hidden, p, None);
            (hp, Some(c))
        }
        None => {
            assert_eq!(hidden_width, h, "hidden width must match emb_dim without a projection");
            (hidden.clone(), None)
        }
    };
    let (state_emb, emb_cache) = linear_fwd(store, state, params.emb, None);

    let verts = n + REC_ROWS + k;
    let mut x = Matrix::zeros(graphs * verts, h);
    for g in 0..graphs {
        let base = g * verts;
        for a in 0..n {
            x.row_mut(base + a).copy_from_slice(hid.row(g * n + a));
        }
        for r in 0..REC_ROWS {
            x.row_mut(base + n + r)
                .copy_from_slice(recurrent.row(g * REC_ROWS + r));
        }
        for e in 0..k {
            x.row_mut(base + n + REC_ROWS + e)
                .copy_from_slice(state_emb.row(g * k + e));
        }
    }
    let gb = GraphBatch::new(graphs, verts);
    let (xt, encode_cache) = encode_fwd(store, &x, &params.encoder, gb);

    let proj = store.value(params.scalar_proj);
    let mut q_tot = Matrix::zeros(graphs, 1);
    let mut new_rec = Matrix::zeros(graphs * REC_ROWS, h);
    let mut y_all = Matrix::zeros(graphs, h);
    let mut b2_pre = Vec::with_capacity(graphs);
    for g in 0..graphs {
        let base = g * verts;
        // y = qa * |W1| + b1, with W1 rows read from the transformed graph
        let y = y_all.row_mut(g);
        y.copy_from_slice(xt.row(base + n));
        for a in 0..n {
            let w1_row = xt.row(base + a);
            let qa_val = qa.get(g, a);
            for (yv, &w) in y.iter_mut().zip(w1_row) {
                *yv += qa_val * w.abs();
            }
        }
        let w2_row = xt.row(base + n + 1);
        let mut total: S = y
            .iter()
            .zip(w2_row)
            .map(|(&yv, &w)| yv * w.abs())
            .sum();
        let b2_row = xt.row(base + n + 2);
        let pre: S = b2_row.iter().zip(proj.data()).map(|(&a, &b)| a * b).sum();
        b2_pre.push(pre);
        total += pre.max(S::zero());
        q_tot.set(g, 0, total);
        for r in 0..REC_ROWS {
            new_rec
                .row_mut(g * REC_ROWS + r)
                .copy_from_slice(xt.row(base + n + r));
        }
    }
    (
        MixerStepOut {
            q_tot,
            recurrent: new_rec,
        },
        MixerStepCache {
            hproj: hproj_cache,
            emb: emb_cache,
            encode: encode_cache,
            xt,
            qa: qa.clone(),
            y: y_all,
            b2_pre,
            n,
            k,
            graphs,
            hidden_width,
        },
    )
}

pub struct MixerGrads<S> {
    /// graphs x n gradient on the chosen agent values.
    pub d_qa: Matrix<S>,
    /// (graphs*n) x hidden_width gradient into the agent hidden rows.
    pub d_hidden: Matrix<S>,
    /// (graphs*3) x emb_dim gradient on the incoming recurrent rows.
    pub d_recurrent: Matrix<S>,
}

/// Backward through one mixer step. `d_qtot` is graphs x 1; `d_rec_out`
/// carries the gradient arriving at the emitted recurrent rows from step t+1.
pub fn mixer_step_bwd<S: Scalar>(
    store: &mut ParamStore<S>,
    params: &TransfMixerParams,
    cache: MixerStepCache<S>,
    d_qtot: &Matrix<S>,
    d_rec_out: Option<&Matrix<S>>,
) -> MixerGrads<S> {
    let MixerStepCache {
        hproj,
        emb,
        encode,
        xt,
        qa,
        y,
        b2_pre,
        n,
        k,
        graphs,
        hidden_width,
    } = cache;
    assert_eq!(d_qtot.shape(), (graphs, 1), "d_qtot shape mismatch");
    let h = xt.cols();
    let verts = n + REC_ROWS + k;
    let proj = store.value(params.scalar_proj).clone();

    let mut dxt = Matrix::zeros(graphs * verts, h);
    let mut d_qa = Matrix::zeros(graphs, n);
    let mut d_proj = Matrix::zeros(h, 1);
    for g in 0..graphs {
        let base = g * verts;
        let go = d_qtot.get(g, 0);
        let w2_row = xt.row(base + n + 1);
        let y_row = y.row(g);
        // dW2 and dy from q_tot = y . |W2| + relu(b2_pre)
        {
            let d_w2_target = dxt.row_mut(base + n + 1);
            for j in 0..h {
                d_w2_target[j] += go * y_row[j] * sign_or_zero(w2_row[j]);
            }
        }
        if b2_pre[g] > S::zero() {
            let b2_row = xt.row(base + n + 2);
            for j in 0..h {
                d_proj.data_mut()[j] += go * b2_row[j];
            }
            let d_b2_target = dxt.row_mut(base + n + 2);
            for (d, &p) in d_b2_target.iter_mut().zip(proj.data()) {
                *d += go * p;
            }
        }
        // dy = go * |W2|; feeds b1 directly and W1 rows through qa
        let mut dy = vec![S::zero(); h];
        for j in 0..h {
            dy[j] = go * w2_row[j].abs();
        }
        {
            let d_b1_target = dxt.row_mut(base + n);
            for (d, &v) in d_b1_target.iter_mut().zip(&dy) {
                *d += v;
            }
        }
        for a in 0..n {
            let w1_row = xt.row(base + a);
            let mut acc = S::zero();
            for j in 0..h {
                acc += dy[j] * w1_row[j].abs();
            }
            d_qa.set(g, a, acc);
            let qa_val = qa.get(g, a);
            let d_w1_target = dxt.row_mut(base + a);
            for j in 0..h {
                d_w1_target[j] += dy[j] * qa_val * sign_or_zero(w1_row[j]);
            }
        }
        if let Some(dr) = d_rec_out {
            for r in 0..REC_ROWS {
                let src = dr.row(g * REC_ROWS + r);
                let dst = dxt.row_mut(base + n + r);
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
    store.add_grad(params.scalar_proj, &d_proj);

    let dx = encode_bwd(store, encode, &params.encoder, &dxt);

    let mut d_hid = Matrix::zeros(graphs * n, h);
    let mut d_recurrent = Matrix::zeros(graphs * REC_ROWS, h);
    let mut d_state_emb = Matrix::zeros(graphs * k, h);
    for g in 0..graphs {
        let base = g * verts;
        for a in 0..n {
            d_hid.row_mut(g * n + a).copy_from_slice(dx.row(base + a));
        }
        for r in 0..REC_ROWS {
            d_recurrent
                .row_mut(g * REC_ROWS + r)
                .copy_from_slice(dx.row(base + n + r));
        }
        for e in 0..k {
            d_state_emb
                .row_mut(g * k + e)
                .copy_from_slice(dx.row(base + n + REC_ROWS + e));
        }
    }
    let _dstate = linear_bwd(store, emb, &d_state_emb);
    let d_hidden = match hproj {
        Some(c) => linear_bwd(store, c, &d_hid),
        None => {
            debug_assert_eq!(hidden_width, h);
            d_hid
        }
    };
    MixerGrads {
        d_qa,
        d_hidden,
        d_recurrent,
    }
}
