//! Central-difference gradient estimation for checking the analytic backward
//! passes. Meant to run at f64 on small networks.

use super::matrix::Matrix;
use super::params::ParamStore;
use super::scalar::Scalar;

/// Numeric gradient of `loss` w.r.t. every parameter, in registration order.
///
/// Perturbs one scalar at a time by +-h and evaluates the loss closure, so the
/// closure must be a pure function of the store's parameter values.
pub fn finite_diff_gradient<S: Scalar>(
    store: &mut ParamStore<S>,
    h: S,
    mut loss: impl FnMut(&ParamStore<S>) -> S,
) -> Vec<Matrix<S>> {
    let two_h = h + h;
    let n = store.len();
    let mut grads = Vec::with_capacity(n);
    for idx in 0..n {
        let id = super::params::param_id_for_index(idx);
        let (rows, cols) = store.value(id).shape();
        let mut g = Matrix::zeros(rows, cols);
        for k in 0..rows * cols {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = loss(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = loss(store);
            store.value_mut(id).data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / two_h;
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between analytic and numeric gradients.
///
/// Entries where both magnitudes are below `floor` are skipped as noise.
pub fn max_relative_error<S: Scalar>(
    analytic: &[Matrix<S>],
    numeric: &[Matrix<S>],
    floor: f64,
) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient list length mismatch");
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let av = av.to_f64();
            let nv = nv.to_f64();
            let scale = av.abs().max(nv.abs());
            if scale < floor {
                continue;
            }
            let err = (av - nv).abs() / scale;
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
