//! Graph transformer encoder shared by the agent and mixer networks.
//!
//! Input is a batch of same-shape vertex graphs stacked row-wise into one
//! (graphs * verts) x emb_dim matrix. Self-attention runs block-diagonally
//! per graph; every other layer is row-local, so batched results are bitwise
//! identical to running graphs one at a time. There are no positional
//! encodings: vertex order carries no meaning and outputs are permutation
//! equivariant.

use crate::error::{Error, Result};
use crate::numeric::ops::{
    layer_norm_rows_bwd, layer_norm_rows_fwd, linear_bwd, linear_fwd, relu_bwd, relu_fwd,
    LayerNormCache, LinearCache, ReluCache,
};
use crate::numeric::{Matrix, ParamId, ParamStore, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// Residual add, then norm (the default).
    Post,
    /// Norm, then sublayer, then residual add.
    Pre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// Scores divided by sqrt(emb_dim / heads).
    HeadDim,
    /// Scores divided by sqrt(vertex count).
    VertexCount,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub emb_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    /// Kept for config compatibility; training uses 0 and inference ignores it.
    pub dropout: f64,
    pub norm: NormPlacement,
    pub attn_scale: AttnScale,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            emb_dim: 32,
            heads: 4,
            blocks: 2,
            ffn_dim: 192,
            dropout: 0.0,
            norm: NormPlacement::Post,
            attn_scale: AttnScale::HeadDim,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.heads == 0 || self.blocks == 0 || self.ffn_dim == 0 {
            return Err(Error::config("transformer dimensions must be positive"));
        }
        if self.emb_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "emb_dim {} must be divisible by heads {}",
                self.emb_dim, self.heads
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::config("dropout is fixed at 0"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.emb_dim / self.heads
    }

    /// Scalar parameters in one encoder built from this config.
    pub fn encoder_param_count(&self) -> usize {
        let h = self.emb_dim;
        let f = self.ffn_dim;
        let attn = 3 * h * h + h * h;
        let ffn = h * f + f + f * h + h;
        let norms = 4 * h;
        self.blocks * (attn + ffn + norms)
    }
}

/// Batch of same-shape graphs stacked row-wise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphBatch {
    pub graphs: usize,
    pub verts: usize,
}

impl GraphBatch {
    pub fn new(graphs: usize, verts: usize) -> Self {
        GraphBatch { graphs, verts }
    }

    pub fn rows(&self) -> usize {
        self.graphs * self.verts
    }
}

#[derive(Clone)]
pub struct BlockParams {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_shift: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_shift: ParamId,
}

#[derive(Clone)]
pub struct EncoderParams {
    pub cfg: TransformerConfig,
    pub blocks: Vec<BlockParams>,
}

/// Registers all encoder parameters under `prefix`.
pub fn register_encoder<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    cfg: TransformerConfig,
    rng: &mut impl rand::Rng,
) -> Result<EncoderParams> {
    cfg.validate()?;
    let h = cfg.emb_dim;
    let dk = cfg.head_dim();
    let f = cfg.ffn_dim;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let p = |tail: String| format!("{prefix}.block{b}.{tail}");
        let mut wq = Vec::with_capacity(cfg.heads);
        let mut wk = Vec::with_capacity(cfg.heads);
        let mut wv = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            wq.push(store.register(p(format!("head{head}.wq")), Matrix::glorot(h, dk, rng))?);
            wk.push(store.register(p(format!("head{head}.wk")), Matrix::glorot(h, dk, rng))?);
            wv.push(store.register(p(format!("head{head}.wv")), Matrix::glorot(h, dk, rng))?);
        }
        blocks.push(BlockParams {
            wq,
            wk,
            wv,
            wo: store.register(p("wo".into()), Matrix::glorot(h, h, rng))?,
            ln1_gain: store.register(p("ln1.gain".into()), Matrix::filled(1, h, S::one()))?,
            ln1_shift: store.register(p("ln1.shift".into()), Matrix::zeros(1, h))?,
            ff1_w: store.register(p("ffn.w1".into()), Matrix::glorot(h, f, rng))?,
            ff1_b: store.register(p("ffn.b1".into()), Matrix::zeros(1, f))?,
            ff2_w: store.register(p("ffn.w2".into()), Matrix::glorot(f, h, rng))?,
            ff2_b: store.register(p("ffn.b2".into()), Matrix::zeros(1, h))?,
            ln2_gain: store.register(p("ln2.gain".into()), Matrix::filled(1, h, S::one()))?,
            ln2_shift: store.register(p("ln2.shift".into()), Matrix::zeros(1, h))?,
        });
    }
    Ok(EncoderParams { cfg, blocks })
}

struct HeadCache<S> {
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    /// Softmaxed attention weights; row g*verts + i holds vertex i's weights
    /// over graph g's vertices.
    attn: Matrix<S>,
}

pub struct MhsaCache<S> {
    x: Matrix<S>,
    heads: Vec<HeadCache<S>>,
    concat: Matrix<S>,
    gb: GraphBatch,
    scale: S,
}

fn attn_scale<S: Scalar>(cfg: &TransformerConfig, gb: GraphBatch) -> S {
    let denom = match cfg.attn_scale {
        AttnScale::HeadDim => cfg.head_dim() as f64,
        AttnScale::VertexCount => gb.verts as f64,
    };
    S::from_f64(1.0 / denom.sqrt())
}

/// Multi-head self-attention over each graph in the batch.
pub fn mhsa_fwd<S: Scalar>(
    store: &ParamStore<S>,
    x: &Matrix<S>,
    block: &BlockParams,
    cfg: &TransformerConfig,
    gb: GraphBatch,
) -> (Matrix<S>, MhsaCache<S>) {
    let h = cfg.emb_dim;
    let dk = cfg.head_dim();
    let v = gb.verts;
    assert_eq!(x.rows(), gb.rows(), "input rows must be graphs * verts");
    assert_eq!(x.cols(), h, "input width must be emb_dim");
    let scale = attn_scale(cfg, gb);

    let mut concat = Matrix::zeros(x.rows(), h);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut row = vec![S::zero(); v];
    for head in 0..cfg.heads {
        let q = x.matmul(store.value(block.wq[head]));
        let k = x.matmul(store.value(block.wk[head]));
        let val = x.matmul(store.value(block.wv[head]));
        let mut attn = Matrix::zeros(gb.rows(), v);
        let col0 = head * dk;
        for g in 0..gb.graphs {
            let r0 = g * v;
            for i in 0..v {
                let qi = q.row(r0 + i);
                // scores for vertex i over the graph, with max subtraction
                let mut max = S::neg_infinity();
                for (j, rj) in row.iter_mut().enumerate() {
                    let kj = k.row(r0 + j);
                    let dot: S = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    *rj = dot * scale;
                    max = max.max(*rj);
                }
                let mut sum = S::zero();
                for rj in row.iter_mut() {
                    *rj = (*rj - max).exp();
                    sum += *rj;
                }
                let inv = S::one() / sum;
                let arow = attn.row_mut(r0 + i);
                for (a, rj) in arow.iter_mut().zip(&row) {
                    *a = *rj * inv;
                }
                // weighted sum of value rows into this head's columns
                let out = &mut concat.row_mut(r0 + i)[col0..col0 + dk];
                for (j, &w) in arow.iter().enumerate() {
                    let vj = val.row(r0 + j);
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }
        heads.push(HeadCache { q, k, v: val, attn });
    }
    let y = concat.matmul(store.value(block.wo));
    let cache = MhsaCache {
        x: x.clone(),
        heads,
        concat,
        gb,
        scale,
    };
    (y, cache)
}

/// Backward through multi-head self-attention; accumulates weight gradients
/// and returns the gradient w.r.t. the input rows.
pub fn mhsa_bwd<S: Scalar>(
    store: &mut ParamStore<S>,
    cache: MhsaCache<S>,
    block: &BlockParams,
    dy: &Matrix<S>,
) -> Matrix<S> {
    let gb = cache.gb;
    let v = gb.verts;
    let dk = cache.heads[0].q.cols();
    let scale = cache.scale;

    let dwo = cache.concat.matmul_tn(dy);
    store.add_grad(block.wo, &dwo);
    let dconcat = dy.matmul_nt(store.value(block.wo));

    let mut dx = Matrix::zeros(cache.x.rows(), cache.x.cols());
    let mut da = Matrix::zeros(v, v);
    for (head, hc) in cache.heads.iter().enumerate() {
        let dout = dconcat.slice_cols(head * dk, dk);
        let mut dq = Matrix::zeros(gb.rows(), dk);
        let mut dk_m = Matrix::zeros(gb.rows(), dk);
        let mut dv = Matrix::zeros(gb.rows(), dk);
        for g in 0..gb.graphs {
            let r0 = g * v;
            // dV and dA from dout, then dS through the softmax, then dQ/dK
            for i in 0..v {
                let doi = dout.row(r0 + i);
                let ai = hc.attn.row(r0 + i);
                let dar = da.row_mut(i);
                for (j, &w) in ai.iter().enumerate() {
                    let vj = hc.v.row(r0 + j);
                    let dvj = dv.row_mut(r0 + j);
                    let mut dot = S::zero();
                    for ((dvc, &doc), &vc) in dvj.iter_mut().zip(doi).zip(vj) {
                        *dvc += w * doc;
                        dot += doc * vc;
                    }
                    dar[j] = dot;
                }
            }
            for i in 0..v {
                let ai = hc.attn.row(r0 + i);
                let dai = da.row(i);
                let dot: S = ai.iter().zip(dai).map(|(&a, &b)| a * b).sum();
                let qi = hc.q.row(r0 + i);
                // ds_ij folded with the score scale
                for j in 0..v {
                    let ds = ai[j] * (dai[j] - dot) * scale;
                    let kj = hc.k.row(r0 + j);
                    let dqi = dq.row_mut(r0 + i);
                    for (dqc, &kc) in dqi.iter_mut().zip(kj) {
                        *dqc += ds * kc;
                    }
                    let dkj = dk_m.row_mut(r0 + j);
                    for (dkc, &qc) in dkj.iter_mut().zip(qi) {
                        *dkc += ds * qc;
                    }
                }
            }
        }
        let dwq = cache.x.matmul_tn(&dq);
        let dwk = cache.x.matmul_tn(&dk_m);
        let dwv = cache.x.matmul_tn(&dv);
        store.add_grad(block.wq[head], &dwq);
        store.add_grad(block.wk[head], &dwk);
        store.add_grad(block.wv[head], &dwv);
        dx.add_assign(&dq.matmul_nt(store.value(block.wq[head])));
        dx.add_assign(&dk_m.matmul_nt(store.value(block.wk[head])));
        dx.add_assign(&dv.matmul_nt(store.value(block.wv[head])));
    }
    dx
}

pub enum BlockCache<S> {
    Post {
        mhsa: MhsaCache<S>,
        ln1: LayerNormCache<S>,
        ff1: LinearCache<S>,
        relu: ReluCache<S>,
        ff2: LinearCache<S>,
        ln2: LayerNormCache<S>,
    },
    Pre {
        ln1: LayerNormCache<S>,
        mhsa: MhsaCache<S>,
        ln2: LayerNormCache<S>,
        ff1: LinearCache<S>,
        relu: ReluCache<S>,
        ff2: LinearCache<S>,
    },
}

pub fn block_fwd<S: Scalar>(
    store: &ParamStore<S>,
    x: &Matrix<S>,
    block: &BlockParams,
    cfg: &TransformerConfig,
    gb: GraphBatch,
) -> (Matrix<S>, BlockCache<S>) {
    match cfg.norm {
        NormPlacement::Post => {
            let (a, mhsa) = mhsa_fwd(store, x, block, cfg, gb);
            let mut res1 = x.clone();
            res1.add_assign(&a);
            let (n1, ln1) = layer_norm_rows_fwd(store, &res1, block.ln1_gain, block.ln1_shift);
            let (f1, ff1) = linear_fwd(store, &n1, block.ff1_w, Some(block.ff1_b));
            let (r, relu) = relu_fwd(&f1);
            let (f2, ff2) = linear_fwd(store, &r, block.ff2_w, Some(block.ff2_b));
            let mut res2 = n1;
            res2.add_assign(&f2);
            let (y, ln2) = layer_norm_rows_fwd(store, &res2, block.ln2_gain, block.ln2_shift);
            (
                y,
                BlockCache::Post {
                    mhsa,
                    ln1,
                    ff1,
                    relu,
                    ff2,
                    ln2,
                },
            )
        }
        NormPlacement::Pre => {
            let (n1, ln1) = layer_norm_rows_fwd(store, x, block.ln1_gain, block.ln1_shift);
            let (a, mhsa) = mhsa_fwd(store, &n1, block, cfg, gb);
            let mut y_mid = x.clone();
            y_mid.add_assign(&a);
            let (n2, ln2) = layer_norm_rows_fwd(store, &y_mid, block.ln2_gain, block.ln2_shift);
            let (f1, ff1) = linear_fwd(store, &n2, block.ff1_w, Some(block.ff1_b));
            let (r, relu) = relu_fwd(&f1);
            let (f2, ff2) = linear_fwd(store, &r, block.ff2_w, Some(block.ff2_b));
            let mut y = y_mid;
            y.add_assign(&f2);
            (
                y,
                BlockCache::Pre {
                    ln1,
                    mhsa,
                    ln2,
                    ff1,
                    relu,
                    ff2,
                },
            )
        }
    }
}

pub fn block_bwd<S: Scalar>(
    store: &mut ParamStore<S>,
    cache: BlockCache<S>,
    block: &BlockParams,
    dy: &Matrix<S>,
) -> Matrix<S> {
    match cache {
        BlockCache::Post {
            mhsa,
            ln1,
            ff1,
            relu,
            ff2,
            ln2,
        } => {
            let dres2 = layer_norm_rows_bwd(store, ln2, dy);
            let dr = linear_bwd(store, ff2, &dres2);
            let df1 = relu_bwd(relu, &dr);
            let mut dn1 = linear_bwd(store, ff1, &df1);
            dn1.add_assign(&dres2);
            let dres1 = layer_norm_rows_bwd(store, ln1, &dn1);
            let mut dx = mhsa_bwd(store, mhsa, block, &dres1);
            dx.add_assign(&dres1);
            dx
        }
        BlockCache::Pre {
            ln1,
            mhsa,
            ln2,
            ff1,
            relu,
            ff2,
        } => {
            let dr = linear_bwd(store, ff2, dy);
            let df1 = relu_bwd(relu, &dr);
            let dn2 = linear_bwd(store, ff1, &df1);
            let mut dy_mid = layer_norm_rows_bwd(store, ln2, &dn2);
            dy_mid.add_assign(dy);
            let dn1 = mhsa_bwd(store, mhsa, block, &dy_mid);
            let mut dx = layer_norm_rows_bwd(store, ln1, &dn1);
            dx.add_assign(&dy_mid);
            dx
        }
    }
}

pub struct EncodeCache<S> {
    blocks: Vec<BlockCache<S>>,
}

/// Runs the full encoder stack.
pub fn encode_fwd<S: Scalar>(
    store: &ParamStore<S>,
    x: &Matrix<S>,
    enc: &EncoderParams,
    gb: GraphBatch,
) -> (Matrix<S>, EncodeCache<S>) {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(enc.blocks.len());
    for block in &enc.blocks {
        let (next, cache) = block_fwd(store, &cur, block, &enc.cfg, gb);
        caches.push(cache);
        cur = next;
    }
    (cur, EncodeCache { blocks: caches })
}

pub fn encode_bwd<S: Scalar>(
    store: &mut ParamStore<S>,
    cache: EncodeCache<S>,
    enc: &EncoderParams,
    dy: &Matrix<S>,
) -> Matrix<S> {
    let mut grad = dy.clone();
    for (cache, block) in cache.blocks.into_iter().zip(&enc.blocks).rev() {
        grad = block_bwd(store, cache, block, &grad);
    }
    grad
}
