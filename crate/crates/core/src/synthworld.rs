//! Families of related synthetic goal-reaching games.
//!
//! Every game shares the same goal semantics: a point moves toward a goal and
//! earns reward 1 on the frame it arrives. Games differ in appearance and in
//! dynamics (step size, action noise). A game's appearance is a rotation of a
//! canonical linear map from latent state to observation, plus distractor
//! channels whose per-game mean acts as a background.
//!
//! Seeds are split into independent streams: dynamics draws depend only on the
//! generation seed, appearance draws only on `appearance_seed` (and the
//! generation seed for distractor noise). Changing the appearance of a game
//! therefore leaves its latent trajectories and rewards untouched.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived, tag};
use crate::trajectory::Episode;

/// Seed of the canonical appearance every game's map is a perturbation of.
const CANONICAL_APPEARANCE_SEED: u64 = 0x5eed_a11e;
/// Latent coordinates are divided by this before the affine map so that
/// observations stay O(1).
const LATENT_SCALE: f64 = 10.0;
const MAX_CONDITION: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSpec {
    pub game_id: String,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    #[serde(default = "default_obs_dim")]
    pub obs_dim: usize,
    pub appearance_seed: u64,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub action_noise: f64,
    #[serde(default = "default_episode_len_max")]
    pub episode_len_max: usize,
    #[serde(default = "default_start_range")]
    pub start_distance_range: (f64, f64),
    #[serde(default = "default_distractor_std")]
    pub distractor_std: f64,
    /// Start every episode in the positive orthant around the goal instead
    /// of in a uniformly random direction.
    #[serde(default = "default_one_sided")]
    pub one_sided: bool,
    /// Goals are drawn uniformly from `[-goal_range, goal_range]^state_dim`.
    #[serde(default)]
    pub goal_range: f64,
    /// Relative size of this game's perturbation of the shared canonical
    /// appearance map.
    #[serde(default = "default_appearance_jitter")]
    pub appearance_jitter: f64,
}

fn default_state_dim() -> usize {
    1
}
fn default_obs_dim() -> usize {
    6
}
fn default_step_size() -> f64 {
    1.0
}
fn default_episode_len_max() -> usize {
    200
}
fn default_start_range() -> (f64, f64) {
    (2.0, 30.0)
}
fn default_distractor_std() -> f64 {
    1.0
}
fn default_one_sided() -> bool {
    true
}
fn default_appearance_jitter() -> f64 {
    0.5
}

impl GameSpec {
    pub fn new(game_id: impl Into<String>, appearance_seed: u64) -> Self {
        GameSpec {
            game_id: game_id.into(),
            state_dim: default_state_dim(),
            obs_dim: default_obs_dim(),
            appearance_seed,
            step_size: default_step_size(),
            action_noise: 0.0,
            episode_len_max: default_episode_len_max(),
            start_distance_range: default_start_range(),
            distractor_std: default_distractor_std(),
            one_sided: default_one_sided(),
            goal_range: 0.0,
            appearance_jitter: default_appearance_jitter(),
        }
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_action_noise(mut self, noise: f64) -> Self {
        self.action_noise = noise;
        self
    }

    pub fn with_start_distance(mut self, min: f64, max: f64) -> Self {
        self.start_distance_range = (min, max);
        self
    }

    pub fn with_obs_dim(mut self, obs_dim: usize) -> Self {
        self.obs_dim = obs_dim;
        self
    }

    pub fn with_one_sided(mut self, one_sided: bool) -> Self {
        self.one_sided = one_sided;
        self
    }

    pub fn with_goal_range(mut self, range: f64) -> Self {
        self.goal_range = range;
        self
    }

    pub fn with_appearance_jitter(mut self, jitter: f64) -> Self {
        self.appearance_jitter = jitter;
        self
    }

    pub fn with_episode_len_max(mut self, len: usize) -> Self {
        self.episode_len_max = len;
        self
    }

    /// Size of the informative block: position and goal.
    pub fn latent_dim(&self) -> usize {
        2 * self.state_dim
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("data.games[{}].{f}", self.game_id);
        if self.state_dim == 0 {
            return Err(Error::config(field("state_dim"), "must be at least 1"));
        }
        if self.obs_dim < self.latent_dim() {
            return Err(Error::config(
                field("obs_dim"),
                format!("must be at least 2 * state_dim = {}", self.latent_dim()),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(field("step_size"), "must be positive"));
        }
        if !(self.action_noise >= 0.0 && self.action_noise.is_finite()) {
            return Err(Error::config(field("action_noise"), "must be non-negative"));
        }
        if self.episode_len_max < 2 {
            return Err(Error::config(field("episode_len_max"), "must be at least 2"));
        }
        let (lo, hi) = self.start_distance_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(field("start_distance_range"), "need 0 <= min <= max"));
        }
        if !(self.goal_range >= 0.0 && self.goal_range.is_finite()) {
            return Err(Error::config(field("goal_range"), "must be non-negative"));
        }
        if !(self.appearance_jitter >= 0.0 && self.appearance_jitter.is_finite()) {
            return Err(Error::config(field("appearance_jitter"), "must be non-negative"));
        }
        if !(self.distractor_std >= 0.0 && self.distractor_std.is_finite()) {
            return Err(Error::config(field("distractor_std"), "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub position: Vec<f64>,
    pub goal: Vec<f64>,
    pub steps_elapsed: usize,
}

impl WorldState {
    pub fn distance(&self) -> f64 {
        self.position
            .iter()
            .zip(&self.goal)
            .map(|(p, g)| (p - g) * (p - g))
            .sum::<f64>()
            .sqrt()
    }
}

/// Latent-to-observation map of one game.
#[derive(Debug, Clone)]
pub struct Appearance {
    matrix: DMatrix<f64>,
    /// Per-game mean of every distractor channel.
    background: Vec<f64>,
}

impl Appearance {
    /// `Q * canonical`, where `Q` is the orthogonal factor of
    /// `I + jitter * G` for Gaussian `G` drawn from the appearance seed. The
    /// canonical map is shared by all games and has condition number below 10.
    pub fn from_seed(latent_dim: usize, n_distractors: usize, appearance_seed: u64, jitter: f64) -> Self {
        let mut canon = derived(CANONICAL_APPEARANCE_SEED, tag::APPEARANCE, 0);
        let base = loop {
            let m = DMatrix::from_fn(latent_dim, latent_dim, |_, _| canon.sample::<f64, _>(StandardNormal));
            if condition_number(&m) < MAX_CONDITION {
                break m;
            }
        };
        let mut rng = derived(appearance_seed, tag::APPEARANCE, 1);
        let g = DMatrix::from_fn(latent_dim, latent_dim, |_, _| jitter * rng.sample::<f64, _>(StandardNormal));
        let qr = (DMatrix::identity(latent_dim, latent_dim) + g).qr();
        let mut rotation = qr.q();
        let r = qr.r();
        for c in 0..latent_dim {
            if r[(c, c)] < 0.0 {
                rotation.column_mut(c).neg_mut();
            }
        }
        let matrix = rotation * base;
        let background = (0..n_distractors).map(|_| rng.sample(StandardNormal)).collect();
        Appearance { matrix, background }
    }

    pub fn condition_number(&self) -> f64 {
        condition_number(&self.matrix)
    }

    fn apply(&self, latent: &[f64], out: &mut Vec<f64>) {
        let k = latent.len();
        for r in 0..k {
            let mut acc = 0.0;
            for c in 0..k {
                acc += self.matrix[(r, c)] * latent[c] / LATENT_SCALE;
            }
            out.push(acc);
        }
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Generate `n_episodes` episodes of `spec`.
pub fn generate_dataset(spec: &GameSpec, n_episodes: usize, seed: u64) -> Vec<Episode> {
    generate_with_latents(spec, n_episodes, seed)
        .into_iter()
        .map(|(episode, _)| episode)
        .collect()
}

/// Episodes together with the latent state behind every frame.
pub fn generate_with_latents(spec: &GameSpec, n_episodes: usize, seed: u64) -> Vec<(Episode, Vec<WorldState>)> {
    spec.validate().expect("invalid game spec");
    let appearance = Appearance::from_seed(
        spec.latent_dim(),
        spec.obs_dim - spec.latent_dim(),
        spec.appearance_seed,
        spec.appearance_jitter,
    );
    (0..n_episodes)
        .map(|i| generate_episode(spec, &appearance, seed, i as u64))
        .collect()
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn generate_episode(spec: &GameSpec, appearance: &Appearance, seed: u64, index: u64) -> (Episode, Vec<WorldState>) {
    let mut dynamics = derived(seed, tag::DYNAMICS, index);
    let mut distractors = derived(spec.appearance_seed ^ seed.rotate_left(17), tag::DISTRACTOR, index);
    let d = spec.state_dim;
    let goal: Vec<f64> = (0..d).map(|_| dynamics.random_range(-spec.goal_range..=spec.goal_range)).collect();
    let mut direction = unit_vector(d, &mut dynamics);
    if spec.one_sided {
        direction.iter_mut().for_each(|x| *x = x.abs());
    }
    let (lo, hi) = spec.start_distance_range;
    let start_distance = dynamics.random_range(lo..=hi);
    let mut position: Vec<f64> = goal.iter().zip(&direction).map(|(g, u)| g + u * start_distance).collect();

    let mut observations = Vec::new();
    let mut rewards = Vec::new();
    let mut states = Vec::new();
    loop {
        let state = WorldState {
            position: position.clone(),
            goal: goal.clone(),
            steps_elapsed: states.len(),
        };
        let distance = state.distance();
        let at_goal = distance <= spec.step_size / 2.0;

        let mut obs = Vec::with_capacity(spec.obs_dim);
        let latent: Vec<f64> = position.iter().chain(&goal).copied().collect();
        appearance.apply(&latent, &mut obs);
        for mean in &appearance.background {
            let z: f64 = distractors.sample(StandardNormal);
            obs.push(mean + spec.distractor_std * z);
        }
        observations.push(obs);
        rewards.push(if at_goal { 1.0 } else { 0.0 });
        states.push(state);
        if at_goal || states.len() == spec.episode_len_max {
            break;
        }

        let step = spec.step_size.min(distance);
        for k in 0..d {
            let toward = if distance > 0.0 { (goal[k] - position[k]) / distance } else { 0.0 };
            let noise: f64 = dynamics.sample(StandardNormal);
            position[k] += toward * step + spec.action_noise * noise;
        }
    }
    let episode = Episode::new(spec.game_id.clone(), observations, rewards).expect("generator emits aligned frames");
    (episode, states)
}

/// Discounted value of a frame at latent distance `d` from the goal under
/// the noiseless scripted policy: `gamma^n` where `n` is the number of moves
/// until the distance drops to `step_size / 2` or below.
pub fn ground_truth_value(spec: &GameSpec, distance: f64, gamma: f64) -> f64 {
    assert!(distance >= 0.0, "distance must be non-negative");
    let s = spec.step_size;
    let moves = if distance <= s / 2.0 {
        0
    } else {
        (distance / s - 0.5).ceil() as usize
    };
    // repeated multiplication mirrors the backward value recursion bit for bit
    let mut v = 1.0;
    for _ in 0..moves {
        v *= gamma;
    }
    v
}
