//! From-scratch 2-D particle Spread task: n agents must cover n landmarks.
//!
//! Physics follows the classic multi-agent particle conventions (velocity
//! damping, force-scaled discrete moves, unbounded world). Observations and
//! the global state are entity graphs; the scalar metric is the fraction of
//! landmarks with an agent within a distance threshold.

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpreadConfig {
    /// Agent count; landmark count is the same.
    pub n: usize,
    pub episode_len: usize,
    pub dt: f64,
    pub damping: f64,
    pub agent_radius: f64,
    pub action_force: f64,
    pub collision_penalty: f64,
    pub pol_threshold: f64,
    /// Positions are drawn uniformly from [-init_extent, init_extent]^2.
    pub init_extent: f64,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        SpreadConfig {
            n: 3,
            episode_len: 25,
            dt: 0.1,
            damping: 0.25,
            agent_radius: 0.15,
            action_force: 5.0,
            collision_penalty: 1.0,
            pol_threshold: 0.3,
            init_extent: 1.0,
        }
    }
}

impl SpreadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config("spread needs at least 2 agents"));
        }
        if self.episode_len == 0 {
            return Err(Error::config("episode_len must be positive"));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("damping", self.damping),
            ("agent_radius", self.agent_radius),
            ("action_force", self.action_force),
            ("pol_threshold", self.pol_threshold),
            ("init_extent", self.init_extent),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("spread.{name} must be positive, got {v}")));
            }
        }
        if self.collision_penalty < 0.0 {
            return Err(Error::config("collision_penalty must be non-negative"));
        }
        Ok(())
    }

    /// Entity count k = agents + landmarks.
    pub fn entities(&self) -> usize {
        2 * self.n
    }

    /// Observation feature width: [rel_x, rel_y, IS_SELF, IS_AGENT], or just
    /// the positions when the binary graph features are stripped.
    pub fn obs_width(graph_feats: bool) -> usize {
        if graph_feats {
            4
        } else {
            2
        }
    }

    /// State feature width: [pos_x, pos_y, vel_x, vel_y, IS_AGENT].
    pub const STATE_WIDTH: usize = 5;

    /// Legacy flat observation width: self vel + self pos + landmark offsets
    /// + other-agent offsets.
    pub fn legacy_obs_width(&self) -> usize {
        4 + 2 * self.n + 2 * (self.n - 1)
    }

    /// Legacy flat state width: all agents' legacy observations concatenated.
    pub fn legacy_state_width(&self) -> usize {
        self.n * self.legacy_obs_width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Noop,
    Left,
    Right,
    Up,
    Down,
}

pub const ACTIONS: usize = 5;

impl Action {
    pub fn from_index(i: usize) -> Result<Action> {
        Ok(match i {
            0 => Action::Noop,
            1 => Action::Left,
            2 => Action::Right,
            3 => Action::Up,
            4 => Action::Down,
            _ => return Err(Error::Usage(format!("action index {i} out of range"))),
        })
    }

    pub fn index(self) -> usize {
        match self {
            Action::Noop => 0,
            Action::Left => 1,
            Action::Right => 2,
            Action::Up => 3,
            Action::Down => 4,
        }
    }

    fn direction(self) -> [f64; 2] {
        match self {
            Action::Noop => [0.0, 0.0],
            Action::Left => [-1.0, 0.0],
            Action::Right => [1.0, 0.0],
            Action::Up => [0.0, 1.0],
            Action::Down => [0.0, -1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub agent_pos: Vec<[f64; 2]>,
    pub agent_vel: Vec<[f64; 2]>,
    pub landmark_pos: Vec<[f64; 2]>,
    pub step_index: usize,
}

#[derive(Clone, Debug)]
pub struct SpreadEnv {
    pub cfg: SpreadConfig,
    pub world: WorldState,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

impl SpreadEnv {
    pub fn reset(cfg: SpreadConfig, rng: &mut impl Rng) -> Result<SpreadEnv> {
        cfg.validate()?;
        let e = cfg.init_extent;
        let draw = |rng: &mut dyn FnMut() -> f64| -> Vec<[f64; 2]> {
            (0..cfg.n).map(|_| [rng(), rng()]).collect()
        };
        let mut sample = || rng.gen_range(-e..=e);
        let agent_pos = draw(&mut sample);
        let landmark_pos = draw(&mut sample);
        Ok(SpreadEnv {
            cfg,
            world: WorldState {
                agent_pos,
                agent_vel: vec![[0.0, 0.0]; cfg.n],
                landmark_pos,
                step_index: 0,
            },
        })
    }

    pub fn n(&self) -> usize {
        self.cfg.n
    }

    pub fn done(&self) -> bool {
        self.world.step_index >= self.cfg.episode_len
    }

    /// Advances the world one tick under the joint action.
    pub fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome> {
        if self.done() {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        if joint_action.len() != self.cfg.n {
            return Err(Error::config(format!(
                "joint action has {} entries for {} agents",
                joint_action.len(),
                self.cfg.n
            )));
        }
        let dt = self.cfg.dt;
        let keep = 1.0 - self.cfg.damping;
        for (i, action) in joint_action.iter().enumerate() {
            let dir = action.direction();
            let vel = &mut self.world.agent_vel[i];
            vel[0] = vel[0] * keep + dir[0] * self.cfg.action_force * dt;
            vel[1] = vel[1] * keep + dir[1] * self.cfg.action_force * dt;
            let pos = &mut self.world.agent_pos[i];
            pos[0] += vel[0] * dt;
            pos[1] += vel[1] * dt;
        }
        self.world.step_index += 1;
        let reward = self.reward();
        Ok(StepOutcome {
            reward,
            done: self.done(),
        })
    }

    /// Negative sum of each landmark's distance to its closest agent, minus
    /// the collision penalty per overlapping unordered agent pair.
    pub fn reward(&self) -> f64 {
        let mut total = 0.0;
        for &lm in &self.world.landmark_pos {
            let min = self
                .world
                .agent_pos
                .iter()
                .map(|&a| dist(a, lm))
                .fold(f64::INFINITY, f64::min);
            total -= min;
        }
        let touch = 2.0 * self.cfg.agent_radius;
        for i in 0..self.cfg.n {
            for j in i + 1..self.cfg.n {
                if dist(self.world.agent_pos[i], self.world.agent_pos[j]) < touch {
                    total -= self.cfg.collision_penalty;
                }
            }
        }
        total
    }

    /// Fraction of landmarks that have at least one agent within `threshold`.
    pub fn percent_occupied_landmarks(&self, threshold: f64) -> f64 {
        assert!(threshold > 0.0, "pol threshold must be positive");
        let covered = self
            .world
            .landmark_pos
            .iter()
            .filter(|&&lm| {
                self.world
                    .agent_pos
                    .iter()
                    .any(|&a| dist(a, lm) < threshold)
            })
            .count();
        covered as f64 / self.cfg.n as f64
    }

    /// Entity-graph observation for one agent: k rows of
    /// [rel_x, rel_y, IS_SELF, IS_AGENT], agents first then landmarks.
    /// With `graph_feats` off the two binary columns are stripped.
    pub fn observation_matrix<S: Scalar>(&self, agent_index: usize, graph_feats: bool) -> Matrix<S> {
        assert!(agent_index < self.cfg.n, "agent index out of range");
        let z = SpreadConfig::obs_width(graph_feats);
        let k = self.cfg.entities();
        let me = self.world.agent_pos[agent_index];
        let mut out = Matrix::zeros(k, z);
        for (row, &pos) in self
            .world
            .agent_pos
            .iter()
            .chain(self.world.landmark_pos.iter())
            .enumerate()
        {
            let r = out.row_mut(row);
            r[0] = S::from_f64(pos[0] - me[0]);
            r[1] = S::from_f64(pos[1] - me[1]);
            if graph_feats {
                if row == agent_index {
                    r[2] = S::one();
                }
                if row < self.cfg.n {
                    r[3] = S::one();
                }
            }
        }
        out
    }

    /// Global state graph: k rows of [pos_x, pos_y, vel_x, vel_y, IS_AGENT].
    pub fn state_matrix<S: Scalar>(&self) -> Matrix<S> {
        let k = self.cfg.entities();
        let mut out = Matrix::zeros(k, SpreadConfig::STATE_WIDTH);
        for i in 0..self.cfg.n {
            let r = out.row_mut(i);
            r[0] = S::from_f64(self.world.agent_pos[i][0]);
            r[1] = S::from_f64(self.world.agent_pos[i][1]);
            r[2] = S::from_f64(self.world.agent_vel[i][0]);
            r[3] = S::from_f64(self.world.agent_vel[i][1]);
            r[4] = S::one();
        }
        for (i, &lm) in self.world.landmark_pos.iter().enumerate() {
            let r = out.row_mut(self.cfg.n + i);
            r[0] = S::from_f64(lm[0]);
            r[1] = S::from_f64(lm[1]);
        }
        out
    }

    /// Classic flat observation vector: [self_vel, self_pos, landmark offsets,
    /// other-agent offsets], offsets relative to the observing agent.
    pub fn legacy_observation<S: Scalar>(&self, agent_index: usize) -> Matrix<S> {
        assert!(agent_index < self.cfg.n, "agent index out of range");
        let me = self.world.agent_pos[agent_index];
        let vel = self.world.agent_vel[agent_index];
        let mut row = Vec::with_capacity(self.cfg.legacy_obs_width());
        row.push(S::from_f64(vel[0]));
        row.push(S::from_f64(vel[1]));
        row.push(S::from_f64(me[0]));
        row.push(S::from_f64(me[1]));
        for &lm in &self.world.landmark_pos {
            row.push(S::from_f64(lm[0] - me[0]));
            row.push(S::from_f64(lm[1] - me[1]));
        }
        for (i, &other) in self.world.agent_pos.iter().enumerate() {
            if i != agent_index {
                row.push(S::from_f64(other[0] - me[0]));
                row.push(S::from_f64(other[1] - me[1]));
            }
        }
        Matrix::from_vec(1, row.len(), row)
    }

    /// Classic flat state: all agents' legacy observations concatenated.
    pub fn legacy_state<S: Scalar>(&self) -> Matrix<S> {
        let w = self.cfg.legacy_obs_width();
        let mut data = Vec::with_capacity(self.cfg.n * w);
        for a in 0..self.cfg.n {
            data.extend_from_slice(self.legacy_observation::<S>(a).data());
        }
        Matrix::from_vec(1, self.cfg.n * w, data)
    }

    /// All actions are always available in Spread.
    pub fn available_actions(&self) -> Vec<bool> {
        vec![true; ACTIONS]
    }
}
