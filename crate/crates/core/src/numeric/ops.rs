//! Primitive layers as forward/backward pairs.
//!
//! Each forward returns its output plus a cache holding exactly what the
//! matching backward needs. Caches are consumed by value, so a backward pass
//! cannot run twice or against the wrong forward.

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row reduction with eight partial accumulators so it vectorizes.
fn tree_sum_by<S: Scalar>(xs: &[S], f: impl Fn(S) -> S) -> S {
    let mut acc = [S::zero(); 8];
    let mut it = xs.chunks_exact(8);
    for c in it.by_ref() {
        for t in 0..8 {
            acc[t] += f(c[t]);
        }
    }
    let mut tail = S::zero();
    for &v in it.remainder() {
        tail += f(v);
    }
    let lo = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let hi = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (lo + hi) + tail
}

fn tree_dot<S: Scalar>(xs: &[S], ys: &[S]) -> S {
    debug_assert_eq!(xs.len(), ys.len());
    let mut acc = [S::zero(); 8];
    let mut xi = xs.chunks_exact(8);
    let mut yi = ys.chunks_exact(8);
    for (cx, cy) in xi.by_ref().zip(yi.by_ref()) {
        for t in 0..8 {
            acc[t] += cx[t] * cy[t];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in xi.remainder().iter().zip(yi.remainder()) {
        tail += x * y;
    }
    let lo = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let hi = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (lo + hi) + tail
}

/// y = x * W (+ b). `w` is in x cols x out, `b` is 1 x out.
pub fn linear_fwd<S: Scalar>(
    store: &ParamStore<S>,
    x: &Matrix<S>,
    w: ParamId,
    b: Option<ParamId>,
) -> (Matrix<S>, LinearCache<S>) {
    let mut y = x.matmul(store.value(w));
    if let Some(b) = b {
        y.add_bias_row(store.value(b));
    }
    (
        y,
        LinearCache {
            x: x.clone(),
            w,
            b,
        },
    )
}

pub struct LinearCache<S> {
    x: Matrix<S>,
    w: ParamId,
    b: Option<ParamId>,
}

/// Accumulates dW (and db) into the store and returns dx.
pub fn linear_bwd<S: Scalar>(
    store: &mut ParamStore<S>,
    cache: LinearCache<S>,
    dy: &Matrix<S>,
) -> Matrix<S> {
    let dw = cache.x.matmul_tn(dy);
    store.add_grad(cache.w, &dw);
    if let Some(b) = cache.b {
        let db = dy.col_sums();
        store.add_grad(b, &db);
    }
    dy.matmul_nt(store.value(cache.w))
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows_fwd<S: Scalar>(x: &Matrix<S>) -> (Matrix<S>, SoftmaxCache<S>) {
    let mut y = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let out = y.row_mut(i);
        let mut sum = S::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = S::one() / sum;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
    let cache = SoftmaxCache { y: y.clone() };
    (y, cache)
}

pub struct SoftmaxCache<S> {
    y: Matrix<S>,
}

/// dx_i = y_i * (dy_i - sum_j dy_j y_j), per row.
pub fn softmax_rows_bwd<S: Scalar>(cache: SoftmaxCache<S>, dy: &Matrix<S>) -> Matrix<S> {
    let y = &cache.y;
    assert_eq!(y.shape(), dy.shape(), "softmax backward shape mismatch");
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dyr = dy.row(i);
        let dot: S = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        let out = dx.row_mut(i);
        for ((o, &yv), &dv) in out.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dv - dot);
        }
    }
    dx
}

/// Per-row layer norm with learned gain/shift (each 1 x cols).
pub fn layer_norm_rows_fwd<S: Scalar>(
    store: &ParamStore<S>,
    x: &Matrix<S>,
    gain: ParamId,
    shift: ParamId,
) -> (Matrix<S>, LayerNormCache<S>) {
    let eps = S::from_f64(LAYER_NORM_EPS);
    let cols = x.cols();
    let inv_n = S::one() / S::from_f64(cols as f64);
    let g = store.value(gain);
    let b = store.value(shift);
    assert_eq!(g.shape(), (1, cols), "layer norm gain width mismatch");
    assert_eq!(b.shape(), (1, cols), "layer norm shift width mismatch");
    let mut y = Matrix::zeros(x.rows(), cols);
    let mut xhat = Matrix::zeros(x.rows(), cols);
    let mut inv_std = vec![S::zero(); x.rows()];
    let grow = g.row(0);
    let brow = b.row(0);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean: S = tree_sum_by(row, |v| v) * inv_n;
        let var: S = tree_sum_by(row, |v| {
            let d = v - mean;
            d * d
        }) * inv_n;
        let istd = S::one() / (var + eps).sqrt();
        inv_std[i] = istd;
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * istd;
        }
        let yr = y.row_mut(i);
        for (((o, &xv), &gv), &bv) in yr.iter_mut().zip(xh.iter()).zip(grow).zip(brow) {
            *o = xv * gv + bv;
        }
    }
    (
        y,
        LayerNormCache {
            xhat,
            inv_std,
            gain,
            shift,
        },
    )
}

pub struct LayerNormCache<S> {
    xhat: Matrix<S>,
    inv_std: Vec<S>,
    gain: ParamId,
    shift: ParamId,
}

pub fn layer_norm_rows_bwd<S: Scalar>(
    store: &mut ParamStore<S>,
    cache: LayerNormCache<S>,
    dy: &Matrix<S>,
) -> Matrix<S> {
    let xhat = &cache.xhat;
    assert_eq!(xhat.shape(), dy.shape(), "layer norm backward shape mismatch");
    let cols = xhat.cols();
    let inv_n = S::one() / S::from_f64(cols as f64);
    let mut dgain = Matrix::zeros(1, cols);
    let mut dshift = Matrix::zeros(1, cols);
    let mut dx = Matrix::zeros(xhat.rows(), cols);
    let g = store.value(cache.gain).clone();
    let grow = g.row(0);
    let mut dxh = vec![S::zero(); cols];
    {
        let dgrow = dgain.row_mut(0);
        let dsrow = dshift.row_mut(0);
        for i in 0..xhat.rows() {
            let xh = xhat.row(i);
            let dyr = dy.row(i);
            for (((dg, ds), &dv), &xv) in
                dgrow.iter_mut().zip(dsrow.iter_mut()).zip(dyr).zip(xh)
            {
                *dg += dv * xv;
                *ds += dv;
            }
            for ((o, &dv), &gv) in dxh.iter_mut().zip(dyr).zip(grow) {
                *o = dv * gv;
            }
            let mean_dxhat = tree_sum_by(&dxh, |v| v) * inv_n;
            let mean_dxhat_xhat = tree_dot(&dxh, xh) * inv_n;
            let istd = cache.inv_std[i];
            let out = dx.row_mut(i);
            for ((o, &dh), &xv) in out.iter_mut().zip(dxh.iter()).zip(xh) {
                *o = istd * (dh - mean_dxhat - xv * mean_dxhat_xhat);
            }
        }
    }
    store.add_grad(cache.gain, &dgain);
    store.add_grad(cache.shift, &dshift);
    dx
}

pub fn relu_fwd<S: Scalar>(x: &Matrix<S>) -> (Matrix<S>, ReluCache<S>) {
    let y = x.map(|v| v.max(S::zero()));
    let cache = ReluCache { y: y.clone() };
    (y, cache)
}

pub struct ReluCache<S> {
    y: Matrix<S>,
}

pub fn relu_bwd<S: Scalar>(cache: ReluCache<S>, dy: &Matrix<S>) -> Matrix<S> {
    assert_eq!(cache.y.shape(), dy.shape(), "relu backward shape mismatch");
    let mut dx = dy.clone();
    for (d, &y) in dx.data_mut().iter_mut().zip(cache.y.data()) {
        if y <= S::zero() {
            *d = S::zero();
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Matrix::from_rows(&[vec![1.0_f64, 2.0, 3.0], vec![-5.0, 0.0, 5.0]]);
        let (y, _) = softmax_rows_fwd(&x);
        for i in 0..2 {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = Matrix::from_rows(&[vec![1.0_f64, 2.0, 3.0]]);
        let shifted = x.map(|v| v + 1000.0);
        let (a, _) = softmax_rows_fwd(&x);
        let (b, _) = softmax_rows_fwd(&shifted);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12, "softmax must not overflow on large inputs");
        }
    }

    #[test]
    fn uniform_row_softmax_is_uniform() {
        let x = Matrix::from_rows(&[vec![0.7_f64; 5]]);
        let (y, _) = softmax_rows_fwd(&x);
        for &v in y.row(0) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zeroes_mean_and_unit_variance() {
        let mut ps = ParamStore::<f64>::new();
        let g = ps.register("g", Matrix::filled(1, 4, 1.0)).unwrap();
        let b = ps.register("b", Matrix::zeros(1, 4)).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let (y, _) = layer_norm_rows_fwd(&ps, &x, g, b);
        let mean: f64 = y.row(0).iter().sum::<f64>() / 4.0;
        let var: f64 = y.row(0).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4, "var {var} should be ~1 up to eps");
    }

    #[test]
    fn relu_clamps_negatives_and_passes_grad_for_positives() {
        let x = Matrix::from_rows(&[vec![-1.0_f64, 0.0, 2.0]]);
        let (y, cache) = relu_fwd(&x);
        assert_eq!(y.row(0), &[0.0, 0.0, 2.0]);
        let dy = Matrix::from_rows(&[vec![5.0, 5.0, 5.0]]);
        let dx = relu_bwd(cache, &dy);
        assert_eq!(dx.row(0), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn linear_applies_bias_per_row() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps
            .register("w", Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]))
            .unwrap();
        let b = ps.register("b", Matrix::from_rows(&[vec![10.0, 20.0]])).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let (y, _) = linear_fwd(&ps, &x, w, Some(b));
        assert_eq!(y.row(0), &[11.0, 22.0]);
        assert_eq!(y.row(1), &[13.0, 24.0]);
    }
}
