//! Model families: which agent network and mixer a run trains, and the
//! observation and state representations each combination consumes.

use crate::agent::{
    agent_step_bwd, agent_step_fwd, register_transf_agent, AgentStepCache, TransfAgentParams,
};
use crate::baseline::{
    hypernet_mixer_bwd, hypernet_mixer_fwd, register_hypernet_mixer, register_rnn_agent,
    rnn_step_bwd, rnn_step_fwd, HypernetMixerCache, HypernetMixerParams, RnnAgentParams,
    RnnStepCache, HYPER_HIDDEN, MIX_EMBED, RNN_HIDDEN,
};
use crate::error::{Error, Result};
use crate::mixer::{
    init_recurrent, mixer_step_bwd, mixer_step_fwd, register_transf_mixer, MixerStepCache,
    TransfMixerParams, REC_ROWS,
};
use crate::numeric::{Matrix, ParamStore, Scalar};
use crate::rng::{seeded, streams};
use crate::spread::{SpreadConfig, ACTIONS};
use crate::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The trainable architectures. `TransfQmix` is the full transformer stack;
/// the rest swap one side back to the QMix baseline parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Transfqmix,
    Qmix,
    QmixGraphState,
    QmixTransformerMixer,
    TransformerAgents,
}

pub const ALL_FAMILIES: [ModelFamily; 5] = [
    ModelFamily::Transfqmix,
    ModelFamily::Qmix,
    ModelFamily::QmixGraphState,
    ModelFamily::QmixTransformerMixer,
    ModelFamily::TransformerAgents,
];

/// The four baseline combinations the `ablate` command sweeps.
pub const ABLATION_FAMILIES: [ModelFamily; 4] = [
    ModelFamily::Qmix,
    ModelFamily::QmixGraphState,
    ModelFamily::QmixTransformerMixer,
    ModelFamily::TransformerAgents,
];

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Transfqmix => "transfqmix",
            ModelFamily::Qmix => "qmix",
            ModelFamily::QmixGraphState => "qmix_graph_state",
            ModelFamily::QmixTransformerMixer => "qmix_transformer_mixer",
            ModelFamily::TransformerAgents => "transformer_agents",
        })
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "transfqmix" => ModelFamily::Transfqmix,
            "qmix" => ModelFamily::Qmix,
            "qmix_graph_state" => ModelFamily::QmixGraphState,
            "qmix_transformer_mixer" => ModelFamily::QmixTransformerMixer,
            "transformer_agents" => ModelFamily::TransformerAgents,
            other => {
                return Err(Error::Usage(format!(
                    "unknown model family '{other}' (expected transfqmix, qmix, \
                     qmix_graph_state, qmix_transformer_mixer, or transformer_agents)"
                )))
            }
        })
    }
}

/// How each agent sees the world: one feature row per entity, or the flat
/// position/velocity vector the original QMix agents consume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsRepr {
    Graph,
    Legacy,
}

/// How the mixer sees the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateRepr {
    Graph,
    LegacyFlat,
    GraphFlat,
}

impl ModelFamily {
    pub fn obs_repr(self) -> ObsRepr {
        match self {
            ModelFamily::Transfqmix | ModelFamily::TransformerAgents => ObsRepr::Graph,
            _ => ObsRepr::Legacy,
        }
    }

    pub fn state_repr(self) -> StateRepr {
        match self {
            ModelFamily::Transfqmix | ModelFamily::QmixTransformerMixer => StateRepr::Graph,
            ModelFamily::Qmix => StateRepr::LegacyFlat,
            ModelFamily::QmixGraphState | ModelFamily::TransformerAgents => StateRepr::GraphFlat,
        }
    }

    pub fn uses_transformer_agent(self) -> bool {
        matches!(self.obs_repr(), ObsRepr::Graph)
    }

    pub fn uses_transformer_mixer(self) -> bool {
        matches!(self.state_repr(), StateRepr::Graph)
    }
}

/// Per-agent observation width: columns of the graph rows, or the full flat
/// vector length.
pub fn obs_width(family: ModelFamily, spread: &SpreadConfig, graph_feats: bool) -> usize {
    match family.obs_repr() {
        ObsRepr::Graph => SpreadConfig::obs_width(graph_feats),
        ObsRepr::Legacy => spread.legacy_obs_width(),
    }
}

/// State width: columns of the graph rows, or the flat vector length.
pub fn state_width(family: ModelFamily, spread: &SpreadConfig) -> usize {
    match family.state_repr() {
        StateRepr::Graph => SpreadConfig::STATE_WIDTH,
        StateRepr::LegacyFlat => spread.legacy_state_width(),
        StateRepr::GraphFlat => spread.entities() * SpreadConfig::STATE_WIDTH,
    }
}

pub enum AgentNet {
    Transf(TransfAgentParams),
    Rnn(RnnAgentParams),
}

pub enum MixerNet {
    Transf(TransfMixerParams),
    Hypernet(HypernetMixerParams),
}

pub enum AgentCache<S> {
    Transf(AgentStepCache<S>),
    Rnn(RnnStepCache<S>),
}

pub enum MixerCache<S> {
    Transf(MixerStepCache<S>),
    Hypernet(HypernetMixerCache<S>),
}

pub struct MixerBackward<S> {
    pub d_qa: Matrix<S>,
    /// Present only when the mixer reads the agent hidden rows.
    pub d_hidden: Option<Matrix<S>>,
    /// Present only when the mixer carries recurrent rows.
    pub d_recurrent: Option<Matrix<S>>,
}

impl AgentNet {
    pub fn hidden_width(&self) -> usize {
        match self {
            AgentNet::Transf(p) => p.encoder.cfg.emb_dim,
            AgentNet::Rnn(p) => p.hidden,
        }
    }

    /// Rows each graph contributes to the stacked observation matrix.
    pub fn obs_rows_per_graph(&self, entities: usize) -> usize {
        match self {
            AgentNet::Transf(_) => entities,
            AgentNet::Rnn(_) => 1,
        }
    }

    pub fn init_hidden<S: Scalar>(&self, graphs: usize) -> Matrix<S> {
        Matrix::zeros(graphs, self.hidden_width())
    }

    /// One step over a stacked batch: obs is (graphs*rows_per_graph) x width,
    /// hidden is graphs x hidden_width. Returns q, the next hidden, and the
    /// cache the backward pass consumes.
    pub fn step_fwd<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        obs: &Matrix<S>,
        hidden: &Matrix<S>,
    ) -> (Matrix<S>, Matrix<S>, AgentCache<S>) {
        match self {
            AgentNet::Transf(p) => {
                let (out, cache) = agent_step_fwd(store, p, obs, hidden);
                (out.q, out.hidden, AgentCache::Transf(cache))
            }
            AgentNet::Rnn(p) => {
                let (q, h, cache) = rnn_step_fwd(store, p, obs, hidden);
                (q, h, AgentCache::Rnn(cache))
            }
        }
    }

    /// Backward through one step; returns the gradient on the incoming hidden.
    pub fn step_bwd<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        cache: AgentCache<S>,
        dq: &Matrix<S>,
        dhidden_out: Option<&Matrix<S>>,
    ) -> Matrix<S> {
        match (self, cache) {
            (AgentNet::Transf(p), AgentCache::Transf(c)) => {
                agent_step_bwd(store, p, c, dq, dhidden_out, None)
            }
            (AgentNet::Rnn(p), AgentCache::Rnn(c)) => rnn_step_bwd(store, p, c, dq, dhidden_out),
            _ => unreachable!("agent cache kind mismatch"),
        }
    }
}

impl MixerNet {
    /// Recurrent rows per graph carried between mixer steps.
    pub fn rec_rows(&self) -> usize {
        match self {
            MixerNet::Transf(_) => REC_ROWS,
            MixerNet::Hypernet(_) => 0,
        }
    }

    pub fn init_recurrent<S: Scalar>(&self, graphs: usize) -> Matrix<S> {
        match self {
            MixerNet::Transf(p) => init_recurrent(graphs, p.encoder.cfg.emb_dim),
            MixerNet::Hypernet(_) => Matrix::zeros(0, 1),
        }
    }

    /// One mixing step. `qa` is graphs x n chosen values, `hidden` is the
    /// stacked agent hidden rows, `state` is the stacked state rows, and
    /// `recurrent` carries this mixer's rows from the previous step.
    pub fn step_fwd<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        qa: &Matrix<S>,
        hidden: &Matrix<S>,
        state: &Matrix<S>,
        recurrent: &Matrix<S>,
    ) -> (Matrix<S>, Matrix<S>, MixerCache<S>) {
        match self {
            MixerNet::Transf(p) => {
                let (out, cache) = mixer_step_fwd(store, p, qa, hidden, state, recurrent);
                (out.q_tot, out.recurrent, MixerCache::Transf(cache))
            }
            MixerNet::Hypernet(p) => {
                let (q_tot, cache) = hypernet_mixer_fwd(store, p, qa, state);
                (q_tot, Matrix::zeros(0, 1), MixerCache::Hypernet(cache))
            }
        }
    }

    pub fn step_bwd<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        cache: MixerCache<S>,
        d_qtot: &Matrix<S>,
        d_rec_out: Option<&Matrix<S>>,
    ) -> MixerBackward<S> {
        match (self, cache) {
            (MixerNet::Transf(p), MixerCache::Transf(c)) => {
                let grads = mixer_step_bwd(store, p, c, d_qtot, d_rec_out);
                MixerBackward {
                    d_qa: grads.d_qa,
                    d_hidden: Some(grads.d_hidden),
                    d_recurrent: Some(grads.d_recurrent),
                }
            }
            (MixerNet::Hypernet(p), MixerCache::Hypernet(c)) => {
                let d_qa = hypernet_mixer_bwd(store, p, c, d_qtot);
                MixerBackward {
                    d_qa,
                    d_hidden: None,
                    d_recurrent: None,
                }
            }
            _ => unreachable!("mixer cache kind mismatch"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelDims {
    pub n_agents: usize,
    pub entities: usize,
    pub n_actions: usize,
    pub obs_width: usize,
    pub state_width: usize,
    pub agent_hidden: usize,
}

/// One complete set of networks sharing a parameter store.
pub struct Model<S> {
    pub store: ParamStore<S>,
    pub agent: AgentNet,
    pub mixer: MixerNet,
    pub family: ModelFamily,
    pub dims: ModelDims,
}

/// Builds agent and mixer networks for a family, registering everything in a
/// fresh store under the "agent." and "mixer." prefixes.
pub fn build_model<S: Scalar>(
    family: ModelFamily,
    spread: &SpreadConfig,
    tf: TransformerConfig,
    graph_feats: bool,
    seed: u64,
) -> Result<Model<S>> {
    spread.validate()?;
    tf.validate()?;
    let mut store = ParamStore::<S>::new();
    let mut rng = seeded(seed, streams::INIT);
    let ow = obs_width(family, spread, graph_feats);
    let sw = state_width(family, spread);

    let agent = match family.obs_repr() {
        ObsRepr::Graph => AgentNet::Transf(register_transf_agent(
            &mut store, "agent", tf, ow, ACTIONS, false, &mut rng,
        )?),
        ObsRepr::Legacy => AgentNet::Rnn(register_rnn_agent(
            &mut store, "agent", ow, ACTIONS, RNN_HIDDEN, &mut rng,
        )?),
    };
    let agent_hidden = agent.hidden_width();

    let mixer = match family.state_repr() {
        StateRepr::Graph => MixerNet::Transf(register_transf_mixer(
            &mut store,
            "mixer",
            tf,
            sw,
            agent_hidden,
            &mut rng,
        )?),
        StateRepr::LegacyFlat | StateRepr::GraphFlat => MixerNet::Hypernet(
            register_hypernet_mixer(&mut store, "mixer", sw, spread.n, MIX_EMBED, HYPER_HIDDEN, &mut rng)?,
        ),
    };

    Ok(Model {
        store,
        agent,
        mixer,
        family,
        dims: ModelDims {
            n_agents: spread.n,
            entities: spread.entities(),
            n_actions: ACTIONS,
            obs_width: ow,
            state_width: sw,
            agent_hidden,
        },
    })
}

/// Scalar parameter counts split by network, keyed off the registration prefix.
pub fn param_split<S: Scalar>(store: &ParamStore<S>) -> (usize, usize) {
    let mut agent = 0;
    let mut mixer = 0;
    for (_, name, value) in store.iter() {
        if name.starts_with("agent.") {
            agent += value.len();
        } else if name.starts_with("mixer.") {
            mixer += value.len();
        }
    }
    (agent, mixer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spread3() -> SpreadConfig {
        SpreadConfig::default()
    }

    #[test]
    fn family_names_round_trip() {
        for fam in ALL_FAMILIES {
            let parsed: ModelFamily = fam.to_string().parse().unwrap();
            assert_eq!(parsed, fam, "display and parse must agree for {fam}");
        }
        assert!("mystery".parse::<ModelFamily>().is_err());
    }

    #[test]
    fn representation_dispatch() {
        let s = spread3();
        assert_eq!(obs_width(ModelFamily::Transfqmix, &s, true), 4);
        assert_eq!(obs_width(ModelFamily::Transfqmix, &s, false), 2);
        assert_eq!(obs_width(ModelFamily::Qmix, &s, true), 14);
        assert_eq!(state_width(ModelFamily::Transfqmix, &s), 5);
        assert_eq!(state_width(ModelFamily::Qmix, &s), 42);
        assert_eq!(state_width(ModelFamily::QmixGraphState, &s), 30);
        assert_eq!(state_width(ModelFamily::TransformerAgents, &s), 30);
        assert_eq!(state_width(ModelFamily::QmixTransformerMixer, &s), 5);
    }

    #[test]
    fn all_families_build_and_forward() {
        let s = spread3();
        let tf = TransformerConfig::default();
        for fam in ALL_FAMILIES {
            let model = build_model::<f32>(fam, &s, tf, true, 9).unwrap();
            let graphs = 2;
            let obs_rows = model.agent.obs_rows_per_graph(s.entities());
            let mut rng = seeded(10, streams::INIT);
            let obs = Matrix::uniform(graphs * s.n * obs_rows, model.dims.obs_width, 1.0, &mut rng);
            let hidden = model.agent.init_hidden::<f32>(graphs * s.n);
            let (q, h_new, _) = model.agent.step_fwd(&model.store, &obs, &hidden);
            assert_eq!(q.shape(), (graphs * s.n, ACTIONS), "{fam} q shape");
            assert_eq!(h_new.shape(), (graphs * s.n, model.dims.agent_hidden));

            let state_rows = match fam.state_repr() {
                StateRepr::Graph => graphs * s.entities(),
                _ => graphs,
            };
            let state = Matrix::uniform(state_rows, model.dims.state_width, 1.0, &mut rng);
            let qa = Matrix::uniform(graphs, s.n, 1.0, &mut rng);
            let rec = model.mixer.init_recurrent::<f32>(graphs);
            let (q_tot, rec_out, _) =
                model.mixer.step_fwd(&model.store, &qa, &h_new, &state, &rec);
            assert_eq!(q_tot.shape(), (graphs, 1), "{fam} q_tot shape");
            assert_eq!(rec_out.rows(), graphs * model.mixer.rec_rows());
            assert!(q_tot.data().iter().all(|v| v.is_finite()), "{fam} finite q_tot");
        }
    }

    #[test]
    fn transformer_counts_sit_in_band_and_ignore_team_size() {
        let tf = TransformerConfig::default();
        let m3 = build_model::<f32>(ModelFamily::Transfqmix, &spread3(), tf, true, 3).unwrap();
        let (agent3, mixer3) = param_split(&m3.store);
        for (label, count) in [("agent", agent3), ("mixer", mixer3)] {
            assert!(
                (30_000..=80_000).contains(&count),
                "{label} parameter count {count} outside [30k, 80k]"
            );
        }
        let s6 = SpreadConfig {
            n: 6,
            ..SpreadConfig::default()
        };
        let m6 = build_model::<f32>(ModelFamily::Transfqmix, &s6, tf, true, 3).unwrap();
        let (agent6, mixer6) = param_split(&m6.store);
        assert_eq!(agent3, agent6, "transformer agent size must not depend on n");
        assert_eq!(mixer3, mixer6, "transformer mixer size must not depend on n");
    }

    #[test]
    fn baseline_counts_grow_with_team_size() {
        let tf = TransformerConfig::default();
        let m3 = build_model::<f32>(ModelFamily::Qmix, &spread3(), tf, true, 3).unwrap();
        let s6 = SpreadConfig {
            n: 6,
            ..SpreadConfig::default()
        };
        let m6 = build_model::<f32>(ModelFamily::Qmix, &s6, tf, true, 3).unwrap();
        let (a3, x3) = param_split(&m3.store);
        let (a6, x6) = param_split(&m6.store);
        assert!(a6 > a3, "rnn agent must grow with n: {a3} vs {a6}");
        assert!(x6 > x3, "hypernet mixer must grow with n: {x3} vs {x6}");
        assert_eq!(a3, 26_053);
        assert_eq!(x3, 18_017);
    }

    #[test]
    fn hybrid_family_bridges_hidden_width() {
        let tf = TransformerConfig::default();
        let m = build_model::<f32>(ModelFamily::QmixTransformerMixer, &spread3(), tf, true, 4)
            .unwrap();
        match (&m.agent, &m.mixer) {
            (AgentNet::Rnn(a), MixerNet::Transf(mix)) => {
                assert_eq!(a.hidden, 64);
                assert!(mix.hidden_proj.is_some(), "64-wide hidden must be projected to 32");
            }
            _ => panic!("family built the wrong network kinds"),
        }
    }
}
