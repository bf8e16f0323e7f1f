//! Two small deterministic control tasks with scripted experts.
//!
//! * `bimodal`: a point agent starting at the origin must reach one of two
//!   goals, `(-1, 1)` or `(1, 1)`. The expert picks a goal per episode by a
//!   fair coin, and the observation does not reveal which.
//! * `pushblock`: a point pusher must shove a disc-shaped block onto the goal
//!   `(1, 0)`. Contact is resolved by kinematic projection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DeterministicRng;

/// Per-step actions executed per policy query.
pub const CHUNK_LEN: usize = 4;
pub const STEP_ACTION_DIM: usize = 2;
pub const CHUNK_DIM: usize = CHUNK_LEN * STEP_ACTION_DIM;

pub const SUCCESS_RADIUS: f64 = 0.1;
pub const CONTACT_DISTANCE: f64 = 0.15;
const START_JITTER: f64 = 0.05;
const BIMODAL_GOALS: [[f64; 2]; 2] = [[-1.0, 1.0], [1.0, 1.0]];
const BIMODAL_BOX: f64 = 0.2;
const PUSH_GOAL: [f64; 2] = [1.0, 0.0];
const PUSH_BOX: f64 = 0.1;
const STAGING_OFFSET: f64 = 0.25;
const STAGING_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Bimodal,
    Pushblock,
}

impl EnvId {
    pub fn horizon(self) -> usize {
        match self {
            EnvId::Bimodal => 30,
            EnvId::Pushblock => 60,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvId::Bimodal => 2,
            EnvId::Pushblock => 4,
        }
    }

    pub fn action_box(self) -> f64 {
        match self {
            EnvId::Bimodal => BIMODAL_BOX,
            EnvId::Pushblock => PUSH_BOX,
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvId::Bimodal => "bimodal",
            EnvId::Pushblock => "pushblock",
        })
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bimodal" => Ok(EnvId::Bimodal),
            "pushblock" => Ok(EnvId::Pushblock),
            other => Err(Error::invalid(format!("unknown environment `{other}`"))),
        }
    }
}

/// Latent expert choice, fixed for a whole episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertMode {
    Left,
    Right,
    /// The push script has a single mode.
    Script,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub env: EnvId,
    /// Bimodal: `[x, y]`. PushBlock: `[pusher_x, pusher_y, block_x, block_y]`.
    pub state: Vec<f64>,
    pub step: usize,
    pub terminal: bool,
}

fn clamp_box(v: [f64; 2], bound: f64) -> [f64; 2] {
    [v[0].clamp(-bound, bound), v[1].clamp(-bound, bound)]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn reset(env: EnvId, rng: &mut DeterministicRng) -> EnvState {
    let mut jitter = || rng.uniform_range(-START_JITTER, START_JITTER);
    let state = match env {
        EnvId::Bimodal => vec![jitter(), jitter()],
        EnvId::Pushblock => {
            let (bx, by) = (jitter(), jitter());
            let (px, py) = (-0.5 + jitter(), jitter());
            vec![px, py, bx, by]
        }
    };
    EnvState {
        env,
        state,
        step: 0,
        terminal: false,
    }
}

/// Fair coin for the bimodal goal; the push script has one mode.
pub fn choose_mode(env: EnvId, rng: &mut DeterministicRng) -> ExpertMode {
    match env {
        EnvId::Bimodal => {
            if rng.coin() {
                ExpertMode::Left
            } else {
                ExpertMode::Right
            }
        }
        EnvId::Pushblock => ExpertMode::Script,
    }
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        self.state.clone()
    }

    fn pusher(&self) -> [f64; 2] {
        [self.state[0], self.state[1]]
    }

    fn block(&self) -> [f64; 2] {
        [self.state[2], self.state[3]]
    }

    pub fn success(&self) -> bool {
        match self.env {
            EnvId::Bimodal => {
                let p = [self.state[0], self.state[1]];
                BIMODAL_GOALS.iter().any(|&g| dist(p, g) < SUCCESS_RADIUS)
            }
            EnvId::Pushblock => dist(self.block(), PUSH_GOAL) < SUCCESS_RADIUS,
        }
    }

    /// Pusher-to-block centre distance (PushBlock only).
    pub fn gap(&self) -> f64 {
        dist(self.pusher(), self.block())
    }

    /// Applies one clamped per-step action.
    pub fn step(&mut self, action: &[f64]) -> Result<()> {
        if self.terminal {
            return Err(Error::State("step called on a terminal state".into()));
        }
        if action.len() != STEP_ACTION_DIM || action.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("step: bad action {action:?}")));
        }
        let a = clamp_box([action[0], action[1]], self.env.action_box());
        match self.env {
            EnvId::Bimodal => {
                self.state[0] += a[0];
                self.state[1] += a[1];
            }
            EnvId::Pushblock => {
                self.state[0] += a[0];
                self.state[1] += a[1];
                let (p, b) = (self.pusher(), self.block());
                let d = dist(p, b);
                if d < CONTACT_DISTANCE {
                    // Push the block out along the contact normal; fall back to
                    // the motion direction if the centres coincide.
                    let (nx, ny) = if d > 0.0 {
                        ((b[0] - p[0]) / d, (b[1] - p[1]) / d)
                    } else {
                        let n = a[0].hypot(a[1]).max(f64::MIN_POSITIVE);
                        (a[0] / n, a[1] / n)
                    };
                    self.state[2] = p[0] + CONTACT_DISTANCE * nx;
                    self.state[3] = p[1] + CONTACT_DISTANCE * ny;
                }
            }
        }
        self.step += 1;
        self.terminal = self.success() || self.step >= self.env.horizon();
        Ok(())
    }

    /// The scripted expert's next per-step action.
    pub fn expert_action(&self, mode: ExpertMode) -> Result<[f64; 2]> {
        if self.terminal {
            return Err(Error::State("expert queried on a terminal state".into()));
        }
        let bound = self.env.action_box();
        match (self.env, mode) {
            (EnvId::Bimodal, ExpertMode::Left | ExpertMode::Right) => {
                let g = BIMODAL_GOALS[usize::from(mode == ExpertMode::Right)];
                Ok(clamp_box([g[0] - self.state[0], g[1] - self.state[1]], bound))
            }
            (EnvId::Pushblock, ExpertMode::Script) => Ok(self.push_script()),
            (env, mode) => Err(Error::invalid(format!("mode {mode:?} does not apply to {env}"))),
        }
    }

    /// Approach a staging point behind the block, then push toward the goal.
    ///
    /// The pusher counts as lined up while it is within the staging tolerance
    /// of the segment running from the staging point to the contact point
    /// behind the block; pushing keeps it on that segment.
    fn push_script(&self) -> [f64; 2] {
        let (p, b) = (self.pusher(), self.block());
        let to_goal = [PUSH_GOAL[0] - b[0], PUSH_GOAL[1] - b[1]];
        let remaining = to_goal[0].hypot(to_goal[1]);
        let u = if remaining > 0.0 {
            [to_goal[0] / remaining, to_goal[1] / remaining]
        } else {
            [1.0, 0.0]
        };
        let staging = [b[0] - STAGING_OFFSET * u[0], b[1] - STAGING_OFFSET * u[1]];
        let contact = [b[0] - CONTACT_DISTANCE * u[0], b[1] - CONTACT_DISTANCE * u[1]];
        let target = if segment_distance(p, staging, contact) <= STAGING_TOLERANCE {
            let push = remaining.min(PUSH_BOX);
            [contact[0] + push * u[0], contact[1] + push * u[1]]
        } else {
            staging
        };
        clamp_box([target[0] - p[0], target[1] - p[1]], PUSH_BOX)
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// One expert pair: the observation at a chunk start and the next
/// [`CHUNK_LEN`] expert actions, flattened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub episode: usize,
    /// Index of the chunk's first step within its episode.
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct ExpertEpisode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<[f64; 2]>,
    pub mode: ExpertMode,
    pub success: bool,
}

/// Rolls out the scripted expert from a reset drawn from `rng`.
pub fn expert_episode(env: EnvId, rng: &mut DeterministicRng) -> Result<ExpertEpisode> {
    let mut state = reset(env, rng);
    let mode = choose_mode(env, rng);
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    while !state.terminal {
        let a = state.expert_action(mode)?;
        observations.push(state.observation());
        actions.push(a);
        state.step(&a)?;
    }
    Ok(ExpertEpisode {
        observations,
        actions,
        mode,
        success: state.success(),
    })
}

/// Stride-1 action chunks from expert rollouts; tails repeat the final action.
/// Episode `e` uses the stream `DeterministicRng::derive(seed, e)`.
pub fn generate_demos(env: EnvId, episodes: usize, seed: u64) -> Result<Vec<Demonstration>> {
    if episodes == 0 {
        return Err(Error::invalid("generate_demos: need at least one episode"));
    }
    let mut demos = Vec::new();
    for e in 0..episodes {
        let mut rng = DeterministicRng::derive(seed, e as u64);
        let ep = expert_episode(env, &mut rng)?;
        demos.extend(chunk_episode(&ep, e));
    }
    Ok(demos)
}

pub fn chunk_episode(ep: &ExpertEpisode, episode: usize) -> Vec<Demonstration> {
    let n = ep.actions.len();
    (0..n)
        .map(|k| {
            let action = (k..k + CHUNK_LEN)
                .flat_map(|j| ep.actions[j.min(n - 1)])
                .collect();
            Demonstration {
                obs: ep.observations[k].clone(),
                action,
                episode,
                t: k,
            }
        })
        .collect()
}

/// Which bimodal goal a chunk heads toward, judged by its first step.
pub fn chunk_mode(action: &[f64]) -> ExpertMode {
    if action[0] < 0.0 {
        ExpertMode::Left
    } else {
        ExpertMode::Right
    }
}
