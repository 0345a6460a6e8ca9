//! Contrastive index samplers.
//!
//! * VEP pairs a value-constrained triplet from game `x` with a value-matched
//!   triplet from game `y`.
//! * TCN draws the positive within a fixed margin of the anchor.
//! * SOM draws the positive at a truncated-geometric offset after the anchor.
//! * VIP draws a window and uses its start and end as anchor and positive,
//!   with interior frames as negatives.
//!
//! All samplers are pure functions of the dataset, the config and the random
//! source, so identical seeds replay identical streams.

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived, tag};
use crate::tensor::Tensor;
use crate::trajectory::{SubTrajectory, TrajectoryDataset, ValueEntry};

/// Anchor, positive and negative frame indices within one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletIndex {
    pub game_id: String,
    pub trajectory: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl TripletIndex {
    pub fn new(game_id: impl Into<String>, trajectory: usize, t: Triple) -> Self {
        TripletIndex {
            game_id: game_id.into(),
            trajectory,
            anchor: t.anchor,
            positive: t.positive,
            negative: t.negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VepConfig {
    /// Distance threshold as a fraction of the sampled trajectory's length.
    pub d_thresh_frac: f64,
    pub v_thresh: f64,
    pub max_retries: usize,
}

impl Default for VepConfig {
    fn default() -> Self {
        VepConfig {
            d_thresh_frac: 0.2,
            v_thresh: 0.01,
            max_retries: 100,
        }
    }
}

impl VepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_thresh_frac > 0.0 && self.d_thresh_frac <= 1.0) {
            return Err(Error::config("sampler.vep.d_thresh_frac", "must lie in (0, 1]"));
        }
        if !(self.v_thresh > 0.0) {
            return Err(Error::config("sampler.vep.v_thresh", "must be positive"));
        }
        if self.max_retries == 0 {
            return Err(Error::config("sampler.vep.max_retries", "must be at least 1"));
        }
        Ok(())
    }

    /// `ceil(d_thresh_frac * len)`; positives satisfy `j - i < d_thresh`.
    pub fn d_thresh(&self, len: usize) -> usize {
        (self.d_thresh_frac * len as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub margin_steps: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig { margin_steps: 4 }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin_steps == 0 {
            return Err(Error::config("sampler.tcn.margin_steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SomConfig {
    pub gamma: f64,
    /// Upper bound on the offset. `None` uses the remaining trajectory length.
    pub horizon: Option<usize>,
}

impl Default for SomConfig {
    fn default() -> Self {
        SomConfig {
            gamma: 0.1,
            horizon: None,
        }
    }
}

impl SomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("sampler.som.gamma", "must lie in (0, 1)"));
        }
        if self.horizon == Some(0) {
            return Err(Error::config("sampler.som.horizon", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VipConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub n_negatives: usize,
}

impl Default for VipConfig {
    fn default() -> Self {
        VipConfig {
            min_len: 10,
            max_len: 50,
            n_negatives: 4,
        }
    }
}

impl VipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::config("sampler.vip.min_len", "need 2 <= min_len <= max_len"));
        }
        if self.n_negatives == 0 {
            return Err(Error::config("sampler.vip.n_negatives", "must be at least 1"));
        }
        Ok(())
    }
}

/// Restrict a closest-value query to frames `start..=end` of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub trajectory: usize,
    pub start: usize,
    pub end: usize,
}

/// The indexed frame of `game` whose value is closest to `target`.
///
/// Ties are broken by `(trajectory, frame)` ascending.
pub fn find_closest_by_value(
    dataset: &TrajectoryDataset,
    game: &str,
    target: f64,
    restrict: Option<Window>,
) -> Result<ValueEntry> {
    match restrict {
        None => closest_in_index(dataset.value_index(game)?, target)
            .ok_or_else(|| Error::Lookup(format!("game `{game}` has no indexed frames"))),
        Some(w) => {
            let trajs = dataset.trajectories(game)?;
            let traj = trajs.get(w.trajectory).ok_or_else(|| {
                Error::Lookup(format!("game `{game}` has no trajectory {}", w.trajectory))
            })?;
            if w.start > w.end || w.end >= traj.len() {
                return Err(Error::Lookup(format!(
                    "window {}..={} is empty or outside trajectory {} of length {}",
                    w.start,
                    w.end,
                    w.trajectory,
                    traj.len()
                )));
            }
            Ok(closest_in_window(traj, w, target))
        }
    }
}

fn closest_in_window(traj: &SubTrajectory, w: Window, target: f64) -> ValueEntry {
    let mut best = w.start;
    let mut best_dist = (traj.values[best] - target).abs();
    for frame in w.start + 1..=w.end {
        let d = (traj.values[frame] - target).abs();
        if d < best_dist {
            best = frame;
            best_dist = d;
        }
    }
    ValueEntry {
        value: traj.values[best],
        trajectory: w.trajectory,
        frame: best,
    }
}

/// Binary search on a value-sorted index, then widen over every entry that
/// ties the best distance so the `(trajectory, frame)` tie-break is exact.
fn closest_in_index(index: &[ValueEntry], target: f64) -> Option<ValueEntry> {
    if index.is_empty() {
        return None;
    }
    let split = index.partition_point(|e| e.value < target);
    let dist = |i: usize| (index[i].value - target).abs();
    let best_dist = match (split.checked_sub(1), (split < index.len()).then_some(split)) {
        (Some(lo), Some(hi)) => dist(lo).min(dist(hi)),
        (Some(lo), None) => dist(lo),
        (None, Some(hi)) => dist(hi),
        (None, None) => unreachable!(),
    };
    let mut best: Option<ValueEntry> = None;
    let mut consider = |e: ValueEntry| {
        if best.is_none_or(|b| e.key() < b.key()) {
            best = Some(e);
        }
    };
    let mut i = split;
    while i > 0 && dist(i - 1) == best_dist {
        i -= 1;
        consider(index[i]);
    }
    let mut i = split;
    while i < index.len() && dist(i) == best_dist {
        consider(index[i]);
        i += 1;
    }
    best
}

/// Uniform draw over `k` in `0..len` with `|k - anchor| > |positive - anchor|`.
pub fn sample_negative(len: usize, anchor: usize, positive: usize, rng: &mut impl Rng) -> Option<usize> {
    let gap = anchor.abs_diff(positive);
    let left = anchor.saturating_sub(gap);
    let right_start = anchor + gap + 1;
    let right = len.saturating_sub(right_start);
    let total = left + right;
    if total == 0 {
        return None;
    }
    let r = rng.random_range(0..total);
    Some(if r < left { r } else { right_start + (r - left) })
}

/// Draw a VEP triplet pair: a value-constrained triplet in `game_x` and a
/// value-matched triplet in `game_y`.
///
/// The whole pair is redrawn when either side is infeasible, up to
/// `cfg.max_retries` times.
pub fn sample_vep_pair(
    dataset: &TrajectoryDataset,
    game_x: &str,
    game_y: &str,
    cfg: &VepConfig,
    rng: &mut impl Rng,
) -> Result<(TripletIndex, TripletIndex)> {
    cfg.validate()?;
    let trajs_x = dataset.trajectories(game_x)?;
    let trajs_y = dataset.trajectories(game_y)?;
    // a feasible x-side triple needs three frames and d_thresh >= 2
    let eligible: Vec<usize> = trajs_x
        .iter()
        .enumerate()
        .filter(|(_, t)| t.len() >= 3 && cfg.d_thresh(t.len()) >= 2)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::sampling(
            game_x,
            "no trajectory is long enough for the distance threshold",
        ));
    }

    let mut last_failure = (game_x, "value threshold never satisfied");
    for _ in 0..cfg.max_retries {
        let tx = eligible[rng.random_range(0..eligible.len())];
        let traj = &trajs_x[tx];
        let len = traj.len();
        let d = cfg.d_thresh(len);
        let i = rng.random_range(0..len - 1);
        let j = rng.random_range(i + 1..=(i + d - 1).min(len - 1));
        let (vi, vj) = (traj.values[i], traj.values[j]);
        if (vi - vj).abs() >= cfg.v_thresh {
            last_failure = (game_x, "value threshold never satisfied");
            continue;
        }
        let Some(k) = sample_negative(len, i, j, rng) else {
            last_failure = (game_x, "no negative farther than the positive");
            continue;
        };

        let anchor_y = find_closest_by_value(dataset, game_y, vi, None)?;
        let ty = anchor_y.trajectory;
        let traj_y = &trajs_y[ty];
        let iy = anchor_y.frame;
        let last = (iy + cfg.d_thresh(traj_y.len()).saturating_sub(1)).min(traj_y.len() - 1);
        if last <= iy {
            last_failure = (game_y, "value-matched anchor has no positive within the distance threshold");
            continue;
        }
        let target = anchor_y.value + (vj - vi).abs();
        let window = Window {
            trajectory: ty,
            start: iy + 1,
            end: last,
        };
        let jy = closest_in_window(traj_y, window, target).frame;
        let Some(ky) = sample_negative(traj_y.len(), iy, jy, rng) else {
            last_failure = (game_y, "no negative farther than the value-matched positive");
            continue;
        };

        let x = TripletIndex::new(game_x, tx, Triple { anchor: i, positive: j, negative: k });
        let y = TripletIndex::new(game_y, ty, Triple { anchor: iy, positive: jy, negative: ky });
        return Ok((x, y));
    }
    Err(Error::sampling(
        last_failure.0,
        format!("{} after {} retries", last_failure.1, cfg.max_retries),
    ))
}

/// TCN triplet: positive within `margin_steps` of the anchor on either side,
/// negative strictly farther from the anchor than the positive.
pub fn sample_tcn(trajectory: &SubTrajectory, cfg: &TcnConfig, rng: &mut impl Rng) -> Result<Triple> {
    cfg.validate()?;
    let len = trajectory.len();
    let reach = |a: usize| a.max(len.saturating_sub(1 + a));
    let anchors: Vec<usize> = (0..len).filter(|&a| reach(a) >= 2).collect();
    if anchors.is_empty() {
        return Err(Error::sampling(
            &trajectory.game_id,
            format!("trajectory of length {len} admits no TCN triplet"),
        ));
    }
    let anchor = anchors[rng.random_range(0..anchors.len())];
    let max_gap = cfg.margin_steps.min(reach(anchor) - 1);
    let positives: Vec<usize> = (anchor.saturating_sub(max_gap)..=(anchor + max_gap).min(len - 1))
        .filter(|&p| p != anchor)
        .collect();
    let positive = positives[rng.random_range(0..positives.len())];
    let negative = sample_negative(len, anchor, positive, rng).ok_or_else(|| {
        Error::sampling(&trajectory.game_id, "trajectory too short for the drawn positive")
    })?;
    Ok(Triple {
        anchor,
        positive,
        negative,
    })
}

/// Offset `dt` in `1..=horizon` with `P(dt) = (1 - g) g^(dt - 1) / (1 - g^horizon)`.
pub fn sample_som_offset(gamma: f64, horizon: usize, rng: &mut impl Rng) -> usize {
    assert!(horizon >= 1, "SOM horizon must be at least 1");
    if horizon == 1 {
        return 1;
    }
    let mass = 1.0 - gamma.powi(horizon as i32);
    let u: f64 = rng.random::<f64>() * mass;
    let mut cumulative = 0.0;
    let mut p = 1.0 - gamma;
    for dt in 1..horizon {
        cumulative += p;
        if u < cumulative {
            return dt;
        }
        p *= gamma;
    }
    horizon
}

/// SOM anchor/positive pair. The anchor is uniform over every frame except
/// the last; the positive follows it by a truncated-geometric offset.
pub fn sample_som_pair(trajectory: &SubTrajectory, cfg: &SomConfig, rng: &mut impl Rng) -> Result<(usize, usize)> {
    cfg.validate()?;
    let len = trajectory.len();
    if len < 2 {
        return Err(Error::sampling(&trajectory.game_id, "SOM needs a trajectory of length >= 2"));
    }
    let anchor = rng.random_range(0..len - 1);
    let remaining = len - 1 - anchor;
    let horizon = cfg.horizon.map_or(remaining, |h| h.min(remaining));
    Ok((anchor, anchor + sample_som_offset(cfg.gamma, horizon, rng)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VipSample {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// VIP window sample: start frame as anchor, end frame as positive, interior
/// frames as negatives (all of them when fewer than `n_negatives`).
pub fn sample_vip(
    trajectory: &SubTrajectory,
    cfg: &VipConfig,
    n_negatives: usize,
    rng: &mut impl Rng,
) -> Result<VipSample> {
    cfg.validate()?;
    let len = trajectory.len();
    if len < cfg.min_len {
        return Err(Error::sampling(
            &trajectory.game_id,
            format!("trajectory of length {len} is shorter than min_len {}", cfg.min_len),
        ));
    }
    let window_len = rng.random_range(cfg.min_len..=cfg.max_len.min(len));
    let start = rng.random_range(0..=len - window_len);
    let end = start + window_len - 1;
    let interior = window_len - 2;
    let negatives = if interior <= n_negatives {
        (start + 1..end).collect()
    } else {
        index::sample(rng, interior, n_negatives)
            .into_iter()
            .map(|o| start + 1 + o)
            .collect()
    };
    Ok(VipSample {
        anchor: start,
        positive: end,
        negatives,
    })
}

/// VEP batch of observations laid out as `[B, 2, obs_dim]`; axis 1 is the
/// game pair `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTripletBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub negatives: Tensor,
    pub triplets: Vec<(TripletIndex, TripletIndex)>,
    /// Seed each pair was sampled with.
    pub item_seeds: Vec<u64>,
}

impl PairedTripletBatch {
    pub fn batch_size(&self) -> usize {
        self.triplets.len()
    }

    /// Reshape each array to `[2B, obs_dim]`: row `2b` is game `x` of pair
    /// `b`, row `2b + 1` is game `y`.
    pub fn fold(&self) -> Result<(Tensor, Tensor, Tensor)> {
        let f = |t: &Tensor| fold(t.clone());
        Ok((f(&self.anchors)?, f(&self.positives)?, f(&self.negatives)?))
    }
}

pub fn fold(t: Tensor) -> Result<Tensor> {
    match *t.shape() {
        [b, 2, d] => t.reshape(vec![2 * b, d]),
        _ => Err(Error::Dimension(format!("cannot fold shape {:?}", t.shape()))),
    }
}

pub fn unfold(t: Tensor) -> Result<Tensor> {
    match *t.shape() {
        [n, d] if n % 2 == 0 => t.reshape(vec![n / 2, 2, d]),
        _ => Err(Error::Dimension(format!("cannot unfold shape {:?}", t.shape()))),
    }
}

/// Sample one VEP pair per `(game_x, game_y)` entry and gather observations.
///
/// A base seed is drawn from `rng`; pair `b` is sampled from its own stream
/// derived from `(base, b)`.
pub fn assemble_batch(
    dataset: &TrajectoryDataset,
    pairs: &[(String, String)],
    cfg: &VepConfig,
    rng: &mut impl RngCore,
) -> Result<PairedTripletBatch> {
    if pairs.is_empty() {
        return Err(Error::Usage("batch needs at least one game pair".into()));
    }
    let base = rng.next_u64();
    let d = dataset.obs_dim;
    let b = pairs.len();
    let mut anchors = Vec::with_capacity(b * 2 * d);
    let mut positives = Vec::with_capacity(b * 2 * d);
    let mut negatives = Vec::with_capacity(b * 2 * d);
    let mut triplets = Vec::with_capacity(b);
    let mut item_seeds = Vec::with_capacity(b);
    for (item, (gx, gy)) in pairs.iter().enumerate() {
        let seed = derive_seed(base, tag::BATCH_ITEM, item as u64);
        let mut item_rng = crate::rng::seeded(seed);
        let (tx, ty) = sample_vep_pair(dataset, gx, gy, cfg, &mut item_rng)?;
        for t in [&tx, &ty] {
            let traj = &dataset.trajectories(&t.game_id)?[t.trajectory];
            anchors.extend_from_slice(traj.observation(t.anchor));
            positives.extend_from_slice(traj.observation(t.positive));
            negatives.extend_from_slice(traj.observation(t.negative));
        }
        triplets.push((tx, ty));
        item_seeds.push(seed);
    }
    let shape = vec![b, 2, d];
    Ok(PairedTripletBatch {
        anchors: Tensor::new(shape.clone(), anchors)?,
        positives: Tensor::new(shape.clone(), positives)?,
        negatives: Tensor::new(shape, negatives)?,
        triplets,
        item_seeds,
    })
}

/// Stream of per-item generators for parallel-safe sampling.
pub fn item_rng(base: u64, item: usize) -> crate::rng::Rng {
    derived(base, tag::BATCH_ITEM, item as u64)
}
