//! Central-difference verification of the analytic gradients, from single
//! network steps up to the full training loss on small episodes.

mod common;

use common::{
    full_loss_worst, hypernet_mixer_worst, rnn_agent_worst, transf_agent_worst,
    transf_mixer_worst, GRAD_TOL,
};

#[test]
fn transformer_agent_step_gradients_match_finite_differences() {
    for seed in 0..30 {
        let (err, at) = transf_agent_worst(seed);
        assert!(err < GRAD_TOL, "agent config {seed}: rel err {err:.3e} at {at}");
    }
}

#[test]
fn transformer_mixer_step_gradients_match_finite_differences() {
    for seed in 100..125 {
        let (err, at) = transf_mixer_worst(seed);
        assert!(err < GRAD_TOL, "mixer config {seed}: rel err {err:.3e} at {at}");
    }
}

#[test]
fn hypernet_mixer_gradients_match_finite_differences() {
    for seed in 200..215 {
        let (err, at) = hypernet_mixer_worst(seed);
        assert!(err < GRAD_TOL, "hypernet config {seed}: rel err {err:.3e} at {at}");
    }
}

#[test]
fn rnn_agent_gradients_match_finite_differences() {
    for seed in 300..315 {
        let (err, at) = rnn_agent_worst(seed);
        assert!(err < GRAD_TOL, "rnn config {seed}: rel err {err:.3e} at {at}");
    }
}

#[test]
fn full_loss_gradients_match_finite_differences_for_every_family() {
    use transfqmix_core::model::ALL_FAMILIES;
    for (i, family) in ALL_FAMILIES.into_iter().enumerate() {
        for s in 0..3 {
            let seed = 400 + (i as u64) * 10 + s;
            let (err, at) = full_loss_worst(seed, family);
            assert!(
                err < GRAD_TOL,
                "full loss {family} seed {seed}: rel err {err:.3e} at {at}"
            );
        }
    }
}
