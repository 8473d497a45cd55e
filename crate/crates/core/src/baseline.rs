//! QMix baseline networks: a recurrent agent fed flat observation vectors and
//! a mixer whose weights come from state-conditioned hypernetworks.

use crate::error::{Error, Result};
use crate::numeric::ops::{linear_bwd, linear_fwd, relu_bwd, relu_fwd, LinearCache, ReluCache};
use crate::numeric::{Matrix, ParamId, ParamStore, Scalar};
use rand::Rng;

pub const RNN_HIDDEN: usize = 64;
pub const HYPER_HIDDEN: usize = 64;
pub const MIX_EMBED: usize = 32;

#[derive(Clone)]
pub struct RnnAgentParams {
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    /// Update gate.
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    /// Reset gate.
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    /// Candidate.
    pub wn: ParamId,
    pub un: ParamId,
    pub bn: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub input_width: usize,
    pub n_actions: usize,
    pub hidden: usize,
}

pub fn register_rnn_agent<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    input_width: usize,
    n_actions: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<RnnAgentParams> {
    if input_width == 0 || n_actions == 0 || hidden == 0 {
        return Err(Error::config("rnn agent dimensions must be positive"));
    }
    let mut reg = |name: &str, m: Matrix<S>| store.register(format!("{prefix}.{name}"), m);
    Ok(RnnAgentParams {
        enc_w: reg("enc.w", Matrix::glorot(input_width, hidden, rng))?,
        enc_b: reg("enc.b", Matrix::zeros(1, hidden))?,
        wz: reg("gru.wz", Matrix::glorot(hidden, hidden, rng))?,
        uz: reg("gru.uz", Matrix::glorot(hidden, hidden, rng))?,
        bz: reg("gru.bz", Matrix::zeros(1, hidden))?,
        wr: reg("gru.wr", Matrix::glorot(hidden, hidden, rng))?,
        ur: reg("gru.ur", Matrix::glorot(hidden, hidden, rng))?,
        br: reg("gru.br", Matrix::zeros(1, hidden))?,
        wn: reg("gru.wn", Matrix::glorot(hidden, hidden, rng))?,
        un: reg("gru.un", Matrix::glorot(hidden, hidden, rng))?,
        bn: reg("gru.bn", Matrix::zeros(1, hidden))?,
        head_w: reg("head.w", Matrix::glorot(hidden, n_actions, rng))?,
        head_b: reg("head.b", Matrix::zeros(1, n_actions))?,
        input_width,
        n_actions,
        hidden,
    })
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub struct RnnStepCache<S> {
    enc: LinearCache<S>,
    enc_relu: ReluCache<S>,
    /// Encoded input, prev hidden, and the gate activations the backward needs.
    e: Matrix<S>,
    h_prev: Matrix<S>,
    r: Matrix<S>,
    z: Matrix<S>,
    c: Matrix<S>,
    /// h_prev * Un, the reset-gated candidate input.
    hn: Matrix<S>,
    head: LinearCache<S>,
}

/// One recurrent step for a batch of flat observations (one row per agent
/// instance): relu encoder, gated recurrent update, linear q head.
pub fn rnn_step_fwd<S: Scalar>(
    store: &ParamStore<S>,
    p: &RnnAgentParams,
    obs: &Matrix<S>,
    hidden: &Matrix<S>,
) -> (Matrix<S>, Matrix<S>, RnnStepCache<S>) {
    assert_eq!(obs.cols(), p.input_width, "rnn obs width mismatch");
    assert_eq!(hidden.cols(), p.hidden, "rnn hidden width mismatch");
    assert_eq!(obs.rows(), hidden.rows(), "one obs row per hidden row");

    let (pre_e, enc) = linear_fwd(store, obs, p.enc_w, Some(p.enc_b));
    let (e, enc_relu) = relu_fwd(&pre_e);

    let mut az = e.matmul(store.value(p.wz));
    az.add_assign(&hidden.matmul(store.value(p.uz)));
    az.add_bias_row(store.value(p.bz));
    let z = az.map(sigmoid);

    let mut ar = e.matmul(store.value(p.wr));
    ar.add_assign(&hidden.matmul(store.value(p.ur)));
    ar.add_bias_row(store.value(p.br));
    let r = ar.map(sigmoid);

    let hn = hidden.matmul(store.value(p.un));
    let mut an = e.matmul(store.value(p.wn));
    for i in 0..an.rows() {
        let arow = an.row_mut(i);
        let rrow = &r.data()[i * r.cols()..(i + 1) * r.cols()];
        let hrow = &hn.data()[i * hn.cols()..(i + 1) * hn.cols()];
        for ((a, &rv), &hv) in arow.iter_mut().zip(rrow).zip(hrow) {
            *a += rv * hv;
        }
    }
    an.add_bias_row(store.value(p.bn));
    let c = an.map(|v| v.tanh());

    let mut h_new = Matrix::zeros(hidden.rows(), p.hidden);
    for i in 0..h_new.len() {
        let zv = z.data()[i];
        h_new.data_mut()[i] = (S::one() - zv) * c.data()[i] + zv * hidden.data()[i];
    }

    let (q, head) = linear_fwd(store, &h_new, p.head_w, Some(p.head_b));
    let cache = RnnStepCache {
        enc,
        enc_relu,
        e,
        h_prev: hidden.clone(),
        r,
        z,
        c,
        hn,
        head,
    };
    (q, h_new, cache)
}

/// Backward through one recurrent step; returns the gradient w.r.t. the
/// incoming hidden rows.
pub fn rnn_step_bwd<S: Scalar>(
    store: &mut ParamStore<S>,
    p: &RnnAgentParams,
    cache: RnnStepCache<S>,
    dq: &Matrix<S>,
    dhidden_out: Option<&Matrix<S>>,
) -> Matrix<S> {
    let mut dh_new = linear_bwd(store, cache.head, dq);
    if let Some(extra) = dhidden_out {
        dh_new.add_assign(extra);
    }
    let one = S::one();
    let rows = dh_new.rows();
    let cols = dh_new.cols();

    let mut dc = Matrix::zeros(rows, cols);
    let mut dz = Matrix::zeros(rows, cols);
    let mut dh_prev = Matrix::zeros(rows, cols);
    for i in 0..rows * cols {
        let d = dh_new.data()[i];
        let zv = cache.z.data()[i];
        let cv = cache.c.data()[i];
        let hv = cache.h_prev.data()[i];
        dc.data_mut()[i] = d * (one - zv);
        dz.data_mut()[i] = d * (hv - cv);
        dh_prev.data_mut()[i] = d * zv;
    }

    // candidate: c = tanh(e Wn + r .* (h Un) + bn)
    let mut dan = Matrix::zeros(rows, cols);
    for i in 0..rows * cols {
        let cv = cache.c.data()[i];
        dan.data_mut()[i] = dc.data()[i] * (one - cv * cv);
    }
    let mut de = dan.matmul_nt(store.value(p.wn));
    store.add_grad(p.wn, &cache.e.matmul_tn(&dan));
    store.add_grad(p.bn, &dan.col_sums());
    let mut dr = Matrix::zeros(rows, cols);
    let mut dhn = Matrix::zeros(rows, cols);
    for i in 0..rows * cols {
        dr.data_mut()[i] = dan.data()[i] * cache.hn.data()[i];
        dhn.data_mut()[i] = dan.data()[i] * cache.r.data()[i];
    }
    store.add_grad(p.un, &cache.h_prev.matmul_tn(&dhn));
    dh_prev.add_assign(&dhn.matmul_nt(store.value(p.un)));

    // reset gate: r = sigmoid(ar)
    let mut dar = Matrix::zeros(rows, cols);
    for i in 0..rows * cols {
        let rv = cache.r.data()[i];
        dar.data_mut()[i] = dr.data()[i] * rv * (one - rv);
    }
    store.add_grad(p.wr, &cache.e.matmul_tn(&dar));
    store.add_grad(p.ur, &cache.h_prev.matmul_tn(&dar));
    store.add_grad(p.br, &dar.col_sums());
    de.add_assign(&dar.matmul_nt(store.value(p.wr)));
    dh_prev.add_assign(&dar.matmul_nt(store.value(p.ur)));

    // update gate: z = sigmoid(az)
    let mut daz = Matrix::zeros(rows, cols);
    for i in 0..rows * cols {
        let zv = cache.z.data()[i];
        daz.data_mut()[i] = dz.data()[i] * zv * (one - zv);
    }
    store.add_grad(p.wz, &cache.e.matmul_tn(&daz));
    store.add_grad(p.uz, &cache.h_prev.matmul_tn(&daz));
    store.add_grad(p.bz, &daz.col_sums());
    de.add_assign(&daz.matmul_nt(store.value(p.wz)));
    dh_prev.add_assign(&daz.matmul_nt(store.value(p.uz)));

    let d_pre_e = relu_bwd(cache.enc_relu, &de);
    let _dobs = linear_bwd(store, cache.enc, &d_pre_e);
    dh_prev
}

#[derive(Clone)]
pub struct HypernetMixerParams {
    /// W1 hypernetwork: state -> hidden -> n*embed, through abs.
    pub w1_l1: ParamId,
    pub w1_l1b: ParamId,
    pub w1_l2: ParamId,
    pub w1_l2b: ParamId,
    /// b1 hypernetwork: single linear layer, state -> embed.
    pub b1_w: ParamId,
    pub b1_b: ParamId,
    /// W2 hypernetwork: state -> hidden -> embed, through abs.
    pub w2_l1: ParamId,
    pub w2_l1b: ParamId,
    pub w2_l2: ParamId,
    pub w2_l2b: ParamId,
    /// b2 hypernetwork: state -> hidden -> 1, relu hidden.
    pub b2_l1: ParamId,
    pub b2_l1b: ParamId,
    pub b2_l2: ParamId,
    pub b2_l2b: ParamId,
    pub state_width: usize,
    pub n_agents: usize,
    pub embed: usize,
}

pub fn register_hypernet_mixer<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    state_width: usize,
    n_agents: usize,
    embed: usize,
    hyper_hidden: usize,
    rng: &mut impl Rng,
) -> Result<HypernetMixerParams> {
    if state_width == 0 || n_agents == 0 || embed == 0 || hyper_hidden == 0 {
        return Err(Error::config("hypernet mixer dimensions must be positive"));
    }
    let mut reg = |name: &str, m: Matrix<S>| store.register(format!("{prefix}.{name}"), m);
    Ok(HypernetMixerParams {
        w1_l1: reg("hyp_w1.l1.w", Matrix::glorot(state_width, hyper_hidden, rng))?,
        w1_l1b: reg("hyp_w1.l1.b", Matrix::zeros(1, hyper_hidden))?,
        w1_l2: reg("hyp_w1.l2.w", Matrix::glorot(hyper_hidden, n_agents * embed, rng))?,
        w1_l2b: reg("hyp_w1.l2.b", Matrix::zeros(1, n_agents * embed))?,
        b1_w: reg("hyp_b1.w", Matrix::glorot(state_width, embed, rng))?,
        b1_b: reg("hyp_b1.b", Matrix::zeros(1, embed))?,
        w2_l1: reg("hyp_w2.l1.w", Matrix::glorot(state_width, hyper_hidden, rng))?,
        w2_l1b: reg("hyp_w2.l1.b", Matrix::zeros(1, hyper_hidden))?,
        w2_l2: reg("hyp_w2.l2.w", Matrix::glorot(hyper_hidden, embed, rng))?,
        w2_l2b: reg("hyp_w2.l2.b", Matrix::zeros(1, embed))?,
        b2_l1: reg("hyp_b2.l1.w", Matrix::glorot(state_width, hyper_hidden, rng))?,
        b2_l1b: reg("hyp_b2.l1.b", Matrix::zeros(1, hyper_hidden))?,
        b2_l2: reg("hyp_b2.l2.w", Matrix::glorot(hyper_hidden, 1, rng))?,
        b2_l2b: reg("hyp_b2.l2.b", Matrix::zeros(1, 1))?,
        state_width,
        n_agents,
        embed,
    })
}

pub struct HypernetMixerCache<S> {
    w1_l1: LinearCache<S>,
    w1_relu: ReluCache<S>,
    w1_l2: LinearCache<S>,
    b1: LinearCache<S>,
    w2_l1: LinearCache<S>,
    w2_relu: ReluCache<S>,
    w2_l2: LinearCache<S>,
    b2_l1: LinearCache<S>,
    b2_relu: ReluCache<S>,
    b2_l2: LinearCache<S>,
    /// Pre-abs hypernetwork outputs.
    w1_pre: Matrix<S>,
    w2_pre: Matrix<S>,
    /// y = qa * |W1| + b1, per graph.
    y: Matrix<S>,
    qa: Matrix<S>,
}

/// Mixes chosen agent values under hypernetwork-generated monotonic weights.
/// `qa` is graphs x n, `state` is graphs x state_width.
pub fn hypernet_mixer_fwd<S: Scalar>(
    store: &ParamStore<S>,
    p: &HypernetMixerParams,
    qa: &Matrix<S>,
    state: &Matrix<S>,
) -> (Matrix<S>, HypernetMixerCache<S>) {
    let graphs = qa.rows();
    let n = p.n_agents;
    let embed = p.embed;
    assert_eq!(qa.cols(), n, "qa width must equal the registered agent count");
    assert_eq!(state.cols(), p.state_width, "state width mismatch");
    assert_eq!(state.rows(), graphs, "one state row per graph");

    let (w1_h_pre, w1_l1) = linear_fwd(store, state, p.w1_l1, Some(p.w1_l1b));
    let (w1_h, w1_relu) = relu_fwd(&w1_h_pre);
    let (w1_pre, w1_l2) = linear_fwd(store, &w1_h, p.w1_l2, Some(p.w1_l2b));

    let (b1, b1_cache) = linear_fwd(store, state, p.b1_w, Some(p.b1_b));

    let (w2_h_pre, w2_l1) = linear_fwd(store, state, p.w2_l1, Some(p.w2_l1b));
    let (w2_h, w2_relu) = relu_fwd(&w2_h_pre);
    let (w2_pre, w2_l2) = linear_fwd(store, &w2_h, p.w2_l2, Some(p.w2_l2b));

    let (b2_h_pre, b2_l1) = linear_fwd(store, state, p.b2_l1, Some(p.b2_l1b));
    let (b2_h, b2_relu) = relu_fwd(&b2_h_pre);
    let (b2, b2_l2) = linear_fwd(store, &b2_h, p.b2_l2, Some(p.b2_l2b));

    let mut y = b1.clone();
    let mut q_tot = Matrix::zeros(graphs, 1);
    for g in 0..graphs {
        let w1_row = w1_pre.row(g);
        {
            let yrow = y.row_mut(g);
            for a in 0..n {
                let qv = qa.get(g, a);
                let wrow = &w1_row[a * embed..(a + 1) * embed];
                for (yv, &w) in yrow.iter_mut().zip(wrow) {
                    *yv += qv * w.abs();
                }
            }
        }
        let total: S = y
            .row(g)
            .iter()
            .zip(w2_pre.row(g))
            .map(|(&yv, &w)| yv * w.abs())
            .sum::<S>()
            + b2.get(g, 0);
        q_tot.set(g, 0, total);
    }
    (
        q_tot,
        HypernetMixerCache {
            w1_l1,
            w1_relu,
            w1_l2,
            b1: b1_cache,
            w2_l1,
            w2_relu,
            w2_l2,
            b2_l1,
            b2_relu,
            b2_l2,
            w1_pre,
            w2_pre,
            y,
            qa: qa.clone(),
        },
    )
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

/// Backward through the hypernet mixer; returns the gradient on `qa`.
/// State gradients stop here (the state is an environment input).
pub fn hypernet_mixer_bwd<S: Scalar>(
    store: &mut ParamStore<S>,
    p: &HypernetMixerParams,
    cache: HypernetMixerCache<S>,
    d_qtot: &Matrix<S>,
) -> Matrix<S> {
    let graphs = d_qtot.rows();
    let n = p.n_agents;
    let embed = p.embed;
    let mut d_qa = Matrix::zeros(graphs, n);
    let mut d_w1_pre = Matrix::zeros(graphs, n * embed);
    let mut d_w2_pre = Matrix::zeros(graphs, embed);
    let mut d_b1 = Matrix::zeros(graphs, embed);
    let mut d_b2 = Matrix::zeros(graphs, 1);
    for g in 0..graphs {
        let go = d_qtot.get(g, 0);
        d_b2.set(g, 0, go);
        let w2_row = cache.w2_pre.row(g);
        let y_row = cache.y.row(g);
        {
            let dw2 = d_w2_pre.row_mut(g);
            for j in 0..embed {
                dw2[j] = go * y_row[j] * sign_or_zero(w2_row[j]);
            }
        }
        let mut dy = vec![S::zero(); embed];
        for j in 0..embed {
            dy[j] = go * w2_row[j].abs();
        }
        d_b1.row_mut(g).copy_from_slice(&dy);
        let w1_row = cache.w1_pre.row(g);
        for a in 0..n {
            let wrow = &w1_row[a * embed..(a + 1) * embed];
            let mut acc = S::zero();
            for j in 0..embed {
                acc += dy[j] * wrow[j].abs();
            }
            d_qa.set(g, a, acc);
            let qv = cache.qa.get(g, a);
            let dw1 = d_w1_pre.row_mut(g);
            for j in 0..embed {
                dw1[a * embed + j] = dy[j] * qv * sign_or_zero(wrow[j]);
            }
        }
    }

    let d_w1_h = linear_bwd(store, cache.w1_l2, &d_w1_pre);
    let d_w1_h_pre = relu_bwd(cache.w1_relu, &d_w1_h);
    let _ = linear_bwd(store, cache.w1_l1, &d_w1_h_pre);

    let _ = linear_bwd(store, cache.b1, &d_b1);

    let d_w2_h = linear_bwd(store, cache.w2_l2, &d_w2_pre);
    let d_w2_h_pre = relu_bwd(cache.w2_relu, &d_w2_h);
    let _ = linear_bwd(store, cache.w2_l1, &d_w2_h_pre);

    let d_b2_h = linear_bwd(store, cache.b2_l2, &d_b2);
    let d_b2_h_pre = relu_bwd(cache.b2_relu, &d_b2_h);
    let _ = linear_bwd(store, cache.b2_l1, &d_b2_h_pre);

    d_qa
}
