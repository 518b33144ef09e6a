//! Synthetic 2-D pick-and-place environment.
//!
//! An agent moves on the unit square, grasps a point object and carries it to
//! a goal. Observations are two 2-channel 8x8 views (a global view and an
//! agent-centered crop, channels = object and goal); the object's position is
//! deliberately absent from the proprio vector, so policies must localize it
//! visually. State dynamics run in f64 regardless of the dataset profile.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{DataDims, DemoDataset, Role, Trajectory, Transition, DESK_DIMS};
use crate::util::derive_seed;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    /// Maximum episode length; stepping past it is an error.
    pub horizon: usize,
    /// Position change per unit action component per step.
    pub step_gain: f64,
    /// Grasp reach and also the success radius around the goal.
    pub grasp_radius: f64,
    /// Minimum pairwise distance between agent, object and goal at reset.
    pub min_separation: f64,
    /// Half-width of the agent-centered camera window.
    pub crop_half_width: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 40,
            step_gain: 0.08,
            grasp_radius: 0.05,
            min_separation: 0.2,
            crop_half_width: 0.25,
        }
    }
}

/// Full simulator state. `object_held` implies the gripper is closed and the
/// object rides at the agent position; [`Env::step`] maintains the
/// implication.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub agent_pos: [f64; 2],
    pub agent_vel: [f64; 2],
    pub object_pos: [f64; 2],
    pub goal_pos: [f64; 2],
    pub gripper_closed: bool,
    pub object_held: bool,
    pub step_index: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvError {
    EpisodeOver { step: usize, horizon: usize },
}

impl fmt::Display for EnvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvError::EpisodeOver { step, horizon } => {
                write!(f, "episode over: step {step} at horizon {horizon}")
            }
        }
    }
}

impl std::error::Error for EnvError {}

#[derive(Debug, Clone, Default)]
pub struct Env {
    pub cfg: EnvConfig,
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Self {
        Env { cfg }
    }

    /// Deterministic initial state: agent, object and goal drawn uniformly on
    /// the unit square, redrawn together until all pairwise distances reach
    /// `min_separation`.
    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "env-reset", 0));
        loop {
            let agent = [rng.gen::<f64>(), rng.gen::<f64>()];
            let object = [rng.gen::<f64>(), rng.gen::<f64>()];
            let goal = [rng.gen::<f64>(), rng.gen::<f64>()];
            let sep = self.cfg.min_separation;
            if dist(agent, object) >= sep && dist(agent, goal) >= sep && dist(object, goal) >= sep
            {
                return EnvState {
                    agent_pos: agent,
                    agent_vel: [0.0, 0.0],
                    object_pos: object,
                    goal_pos: goal,
                    gripper_closed: false,
                    object_held: false,
                    step_index: 0,
                    horizon: self.cfg.horizon,
                };
            }
        }
    }

    /// Applies one action: clamp components to [-1, 1], move the agent by
    /// `step_gain` times the move components (clamped to the unit square), a
    /// held object follows, then the gripper command (third component > 0
    /// closes). Closing within `grasp_radius` of a free object grasps it;
    /// opening while holding releases it in place.
    pub fn step(&self, state: &EnvState, action: [f64; 3]) -> Result<EnvState, EnvError> {
        if state.step_index >= state.horizon {
            return Err(EnvError::EpisodeOver {
                step: state.step_index,
                horizon: state.horizon,
            });
        }
        let mut next = state.clone();
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let close_cmd = action[2].clamp(-1.0, 1.0) > 0.0;

        let nx = (state.agent_pos[0] + self.cfg.step_gain * ax).clamp(0.0, 1.0);
        let ny = (state.agent_pos[1] + self.cfg.step_gain * ay).clamp(0.0, 1.0);
        next.agent_vel = [nx - state.agent_pos[0], ny - state.agent_pos[1]];
        next.agent_pos = [nx, ny];
        let was_closed = state.gripper_closed;
        next.gripper_closed = close_cmd;
        if state.object_held {
            if close_cmd {
                next.object_pos = next.agent_pos;
            } else {
                next.object_held = false; // release in place, before this step's motion
            }
        } else if close_cmd
            && !was_closed
            && dist(next.agent_pos, next.object_pos) <= self.cfg.grasp_radius
        {
            next.object_held = true;
            next.object_pos = next.agent_pos;
        }

        next.step_index = state.step_index + 1;
        Ok(next)
    }

    /// Success: the object rests within `grasp_radius` of the goal and is not
    /// held.
    pub fn is_success(&self, state: &EnvState) -> bool {
        !state.object_held && dist(state.object_pos, state.goal_pos) <= self.cfg.grasp_radius
    }

    /// Renders the observation pair and the proprio vector.
    ///
    /// Camera 0 covers the unit square, camera 1 a `2 * crop_half_width` wide
    /// window centered on the agent. Channel 0 is the object, channel 1 the
    /// goal. Points are splatted bilinearly over cell centers, so a point
    /// exactly at a cell center lights exactly that cell with 1. A held
    /// object sits at the crop center and spreads evenly over the four
    /// central cells. Proprio: agent x/y, velocity x/y, gripper flag,
    /// goal x/y, held flag.
    pub fn render_obs<S: Scalar>(&self, state: &EnvState) -> (Vec<S>, Vec<S>) {
        let d = DESK_DIMS.obs;
        let (h, w) = (d.height, d.width);
        let mut obs = vec![S::zero(); d.flat()];
        let plane = h * w;

        // camera 0: global frame
        splat(&mut obs[0..plane], state.object_pos, [0.0, 0.0], 1.0, h, w);
        splat(&mut obs[plane..2 * plane], state.goal_pos, [0.0, 0.0], 1.0, h, w);

        // camera 1: agent-centered crop
        let half = self.cfg.crop_half_width;
        let org = [state.agent_pos[0] - half, state.agent_pos[1] - half];
        let span = 2.0 * half;
        splat(&mut obs[2 * plane..3 * plane], state.object_pos, org, span, h, w);
        splat(&mut obs[3 * plane..4 * plane], state.goal_pos, org, span, h, w);

        let flag = |b: bool| if b { S::one() } else { S::zero() };
        let proprio = vec![
            S::from_f64(state.agent_pos[0]),
            S::from_f64(state.agent_pos[1]),
            S::from_f64(state.agent_vel[0]),
            S::from_f64(state.agent_vel[1]),
            flag(state.gripper_closed),
            S::from_f64(state.goal_pos[0]),
            S::from_f64(state.goal_pos[1]),
            flag(state.object_held),
        ];
        (obs, proprio)
    }

    /// Runs one episode and returns it as a trajectory. The episode stops at
    /// success or at the horizon; `success` on the result is the environment's
    /// own verdict on the final state. Actions are recorded after clamping,
    /// exactly as the dynamics saw them.
    pub fn rollout<S: Scalar, P: Policy + ?Sized>(
        &self,
        policy: &mut P,
        seed: u64,
        tag: &str,
    ) -> Trajectory<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "env-policy", 0));
        let mut state = self.reset(seed);
        policy.begin_episode(&mut rng);
        let mut transitions = Vec::new();
        while state.step_index < state.horizon && !self.is_success(&state) {
            let (obs, proprio) = self.render_obs::<S>(&state);
            let raw = policy.act(&state, &mut rng);
            let action = [
                raw[0].clamp(-1.0, 1.0),
                raw[1].clamp(-1.0, 1.0),
                raw[2].clamp(-1.0, 1.0),
            ];
            transitions.push(Transition {
                obs,
                proprio,
                action: action.iter().map(|v| S::from_f64(*v)).collect(),
            });
            state = self.step(&state, action).expect("stepped within horizon");
        }
        Trajectory {
            transitions,
            success: self.is_success(&state),
            source_tag: tag.to_string(),
            episode_seed: seed,
        }
    }

    /// Success rate over `episodes` rollouts seeded from `seed`.
    pub fn evaluate<P: Policy + ?Sized>(&self, policy: &mut P, episodes: usize, seed: u64) -> f64 {
        let mut successes = 0usize;
        for ep in 0..episodes {
            let traj: Trajectory<f64> =
                self.rollout(policy, derive_seed(seed, "eval-episode", ep as u64), "eval");
            if traj.success {
                successes += 1;
            }
        }
        successes as f64 / episodes as f64
    }

    /// Generates a dataset of `episodes` rollouts with one policy.
    pub fn collect<S: Scalar, P: Policy + ?Sized>(
        &self,
        policy: &mut P,
        episodes: usize,
        seed: u64,
        tag: &str,
        role: Role,
        generator: String,
    ) -> Result<DemoDataset<S>, crate::datamodel::DataError> {
        let mut trajectories = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let t = self.rollout::<S, P>(policy, derive_seed(seed, "collect-episode", ep as u64), tag);
            if role == Role::Expert && !t.success {
                continue; // expert datasets keep only successful episodes
            }
            trajectories.push(t);
        }
        let meta = crate::datamodel::DatasetMeta {
            dtype: S::DTYPE,
            role,
            dims: self.dims(),
            generator,
            seed,
        };
        DemoDataset::new(trajectories, role, meta)
    }

    pub fn dims(&self) -> DataDims {
        DESK_DIMS
    }
}

/// Bilinear point splat onto an h x w grid whose cells cover
/// [org, org + span]^2, cell centers at (org + (j + 0.5) * span / w). Weight
/// falling outside the grid is dropped.
fn splat<S: Scalar>(plane: &mut [S], p: [f64; 2], org: [f64; 2], span: f64, h: usize, w: usize) {
    let u = (p[0] - org[0]) / span * w as f64 - 0.5;
    let v = (p[1] - org[1]) / span * h as f64 - 0.5;
    let j0 = u.floor();
    let i0 = v.floor();
    let fu = u - j0;
    let fv = v - i0;
    let contributions = [
        (i0, j0, (1.0 - fu) * (1.0 - fv)),
        (i0, j0 + 1.0, fu * (1.0 - fv)),
        (i0 + 1.0, j0, (1.0 - fu) * fv),
        (i0 + 1.0, j0 + 1.0, fu * fv),
    ];
    for (ci, cj, weight) in contributions {
        if ci >= 0.0 && cj >= 0.0 && (ci as usize) < h && (cj as usize) < w && weight > 0.0 {
            let idx = ci as usize * w + cj as usize;
            plane[idx] += S::from_f64(weight);
        }
    }
}

/// A demonstration policy. `begin_episode` clears per-episode state (like a
/// sampled wrong target); `act` may draw noise from the rollout's stream.
pub trait Policy {
    fn begin_episode(&mut self, rng: &mut ChaCha8Rng);
    fn act(&mut self, state: &EnvState, rng: &mut ChaCha8Rng) -> [f64; 3];
}

/// Uniform random actions; the floor baseline.
#[derive(Debug, Clone, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn begin_episode(&mut self, _rng: &mut ChaCha8Rng) {}

    fn act(&mut self, _state: &EnvState, rng: &mut ChaCha8Rng) -> [f64; 3] {
        [
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        ]
    }
}

/// Degradation knobs for the scripted demonstrator. All zeros is the expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelKnobs {
    /// Std-dev of Gaussian noise added to the move components.
    pub noise_scale: f64,
    /// Per-step probability of taking a random move instead of the scripted
    /// one (gripper command preserved).
    pub detour_prob: f64,
    /// Per-episode probability of delivering to a random fake goal.
    pub wrong_target_prob: f64,
}

/// A named knob setting together with the success rate measured at
/// calibration time (500 episodes, seed 1000).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLevel {
    pub name: &'static str,
    pub knobs: LevelKnobs,
    pub calibrated_success: f64,
}

/// Scripted pick-and-place with controllable imperfections: approach the
/// object with the gripper open, close on it, carry to the (possibly fake)
/// goal, release. After a wrong delivery it stubbornly re-delivers to the
/// same fake goal, so those episodes fail rather than self-correct.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub knobs: LevelKnobs,
    fake_goal: Option<[f64; 2]>,
    cfg: EnvConfig,
}

impl ScriptedPolicy {
    pub fn new(knobs: LevelKnobs) -> Self {
        ScriptedPolicy {
            knobs,
            fake_goal: None,
            cfg: EnvConfig::default(),
        }
    }

    pub fn with_env_config(mut self, cfg: EnvConfig) -> Self {
        self.cfg = cfg;
        self
    }

    fn toward(&self, from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
        [
            ((to[0] - from[0]) / self.cfg.step_gain).clamp(-1.0, 1.0),
            ((to[1] - from[1]) / self.cfg.step_gain).clamp(-1.0, 1.0),
        ]
    }
}

impl Policy for ScriptedPolicy {
    fn begin_episode(&mut self, rng: &mut ChaCha8Rng) {
        self.fake_goal = None;
        if self.knobs.wrong_target_prob > 0.0 && rng.gen::<f64>() < self.knobs.wrong_target_prob {
            // A fake goal well away from the real one, so a wrong delivery
            // can never count as success.
            loop {
                let g = [rng.gen::<f64>(), rng.gen::<f64>()];
                if dist(g, [0.5, 0.5]) <= 0.7 {
                    // keep inside a reachable disk; resample degenerate draws
                    self.fake_goal = Some(g);
                    break;
                }
            }
        }
    }

    fn act(&mut self, state: &EnvState, rng: &mut ChaCha8Rng) -> [f64; 3] {
        // Fake goals too close to the real goal are re-sampled lazily here
        // because begin_episode does not see the state.
        if let Some(fg) = self.fake_goal {
            if dist(fg, state.goal_pos) < 2.5 * self.cfg.grasp_radius {
                let mut g = fg;
                while dist(g, state.goal_pos) < 2.5 * self.cfg.grasp_radius {
                    g = [rng.gen::<f64>(), rng.gen::<f64>()];
                }
                self.fake_goal = Some(g);
            }
        }

        let close_enough = 0.6 * self.cfg.grasp_radius;
        let grip_hold = if state.object_held { 1.0 } else { -1.0 };
        if self.knobs.detour_prob > 0.0 && rng.gen::<f64>() < self.knobs.detour_prob {
            return [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), grip_hold];
        }

        let (mut mv, grip) = if state.object_held {
            let target = self.fake_goal.unwrap_or(state.goal_pos);
            if dist(state.agent_pos, target) > close_enough {
                (self.toward(state.agent_pos, target), 1.0)
            } else {
                ([0.0, 0.0], -1.0) // release
            }
        } else if dist(state.agent_pos, state.object_pos) > close_enough {
            (self.toward(state.agent_pos, state.object_pos), -1.0)
        } else {
            // In reach with the gripper open: close it. If a failed grasp
            // left it closed, open first so the next close is a transition.
            if state.gripper_closed {
                ([0.0, 0.0], -1.0)
            } else {
                ([0.0, 0.0], 1.0)
            }
        };

        if self.knobs.noise_scale > 0.0 {
            let normal = Normal::new(0.0, self.knobs.noise_scale).expect("positive std");
            mv[0] += normal.sample(rng);
            mv[1] += normal.sample(rng);
        }
        [mv[0], mv[1], grip]
    }
}

/// Calibrated demonstrator presets. Names encode the approximate success
/// rate; `expert` is the clean scripted policy. Knob values were fit against
/// 500-episode measurements and the stored rates are re-verified by tests.
pub const PRESETS: &[PolicyLevel] = &[
    PolicyLevel {
        name: "expert",
        knobs: LevelKnobs {
            noise_scale: 0.0,
            detour_prob: 0.0,
            wrong_target_prob: 0.0,
        },
        calibrated_success: 1.0,
    },
    PolicyLevel {
        name: "level00",
        knobs: LevelKnobs {
            noise_scale: 0.2,
            detour_prob: 0.1,
            wrong_target_prob: 1.0,
        },
        calibrated_success: 0.0,
    },
    PolicyLevel {
        name: "level023",
        knobs: LevelKnobs {
            noise_scale: 0.35,
            detour_prob: 0.25,
            wrong_target_prob: 0.70,
        },
        calibrated_success: 0.23,
    },
    PolicyLevel {
        name: "level044",
        knobs: LevelKnobs {
            noise_scale: 0.3,
            detour_prob: 0.2,
            wrong_target_prob: 0.54,
        },
        calibrated_success: 0.44,
    },
    PolicyLevel {
        name: "level045",
        knobs: LevelKnobs {
            noise_scale: 0.25,
            detour_prob: 0.15,
            wrong_target_prob: 0.54,
        },
        calibrated_success: 0.45,
    },
    PolicyLevel {
        name: "level060",
        knobs: LevelKnobs {
            noise_scale: 0.2,
            detour_prob: 0.12,
            wrong_target_prob: 0.40,
        },
        calibrated_success: 0.60,
    },
    PolicyLevel {
        name: "level086",
        knobs: LevelKnobs {
            noise_scale: 0.12,
            detour_prob: 0.06,
            wrong_target_prob: 0.14,
        },
        calibrated_success: 0.86,
    },
    PolicyLevel {
        name: "level090",
        knobs: LevelKnobs {
            noise_scale: 0.1,
            detour_prob: 0.05,
            wrong_target_prob: 0.10,
        },
        calibrated_success: 0.90,
    },
];

pub fn preset(name: &str) -> Option<&'static PolicyLevel> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against the uniform
/// CDF on [0, 1].
pub fn ks_uniform_statistic(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in samples.iter().enumerate() {
        let lo = i as f64 / n;
        let hi = (i as f64 + 1.0) / n;
        d = d.max((x - lo).abs()).max((hi - x).abs());
    }
    d
}

/// KS critical value at significance `alpha` for sample size n (asymptotic).
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    ((-(alpha / 2.0).ln()) / 2.0).sqrt() / (n as f64).sqrt()
}
