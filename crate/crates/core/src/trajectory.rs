//! Offline episodes, goal-based segmentation and discounted value labels.
//!
//! An episode is split at every frame whose reward exceeds the goal threshold.
//! Each resulting sub-trajectory ends on its goal frame, and every frame is
//! labeled with the discounted return up to and including that goal frame.
//! Frames after the last goal event carry no goal and are dropped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub game_id: String,
    pub frames: Vec<Frame>,
}

/// One line of an episode file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub game_id: String,
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Episode {
    /// Build an episode from parallel observation and reward sequences.
    pub fn new(game_id: impl Into<String>, observations: Vec<Vec<f64>>, rewards: Vec<f64>) -> Result<Self> {
        let game_id = game_id.into();
        if observations.len() != rewards.len() {
            return Err(Error::Dimension(format!(
                "episode of game `{game_id}` has {} observations but {} rewards",
                observations.len(),
                rewards.len()
            )));
        }
        if observations.is_empty() {
            return Err(Error::Dimension(format!("episode of game `{game_id}` has no frames")));
        }
        let frames = observations
            .into_iter()
            .zip(rewards)
            .enumerate()
            .map(|(timestep, (observation, reward))| Frame {
                observation,
                reward,
                timestep,
            })
            .collect();
        Ok(Episode { game_id, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.observation.len())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.reward).collect()
    }

    pub fn to_record(&self) -> EpisodeRecord {
        EpisodeRecord {
            game_id: self.game_id.clone(),
            observations: self.frames.iter().map(|f| f.observation.clone()).collect(),
            rewards: self.rewards(),
        }
    }
}

/// Inclusive frame span `[start, end]` of a sub-trajectory in its source episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceSpan {
    pub episode: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubTrajectory {
    pub game_id: String,
    pub frames: Vec<Frame>,
    pub values: Vec<f64>,
    pub source_span: SourceSpan,
}

impl SubTrajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.reward).collect()
    }

    pub fn observation(&self, frame: usize) -> &[f64] {
        &self.frames[frame].observation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueConfig {
    pub gamma: f64,
    /// Rewards strictly above this mark a goal frame.
    pub reward_threshold: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig {
            gamma: 0.99,
            reward_threshold: 0.0,
        }
    }
}

impl ValueConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !self.reward_threshold.is_finite() {
            return Err(Error::config("value.reward_threshold", "must be finite"));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("value.gamma", format!("must lie in (0, 1], got {gamma}")))
    }
}

/// Discounted return of every step: `v[T] = r[T]`, `v[t] = r[t] + gamma * v[t + 1]`.
pub fn compute_values(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if rewards.is_empty() {
        return Err(Error::Dimension("cannot label an empty reward sequence".into()));
    }
    let mut values = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        running = if t + 1 == rewards.len() { r } else { r + gamma * running };
        values[t] = running;
    }
    Ok(values)
}

/// Split an episode into goal-terminated sub-trajectories with value labels.
///
/// `episode_index` is only recorded in each [`SourceSpan`].
pub fn segment_episode(episode: &Episode, episode_index: usize, cfg: &ValueConfig) -> Result<Vec<SubTrajectory>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut start = 0;
    for (t, frame) in episode.frames.iter().enumerate() {
        if frame.reward > cfg.reward_threshold {
            let frames = episode.frames[start..=t].to_vec();
            let rewards: Vec<f64> = frames.iter().map(|f| f.reward).collect();
            let values = compute_values(&rewards, cfg.gamma)?;
            out.push(SubTrajectory {
                game_id: episode.game_id.clone(),
                frames,
                values,
                source_span: SourceSpan {
                    episode: episode_index,
                    start,
                    end: t,
                },
            });
            start = t + 1;
        }
    }
    Ok(out)
}

/// One frame in a game's value index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEntry {
    pub value: f64,
    pub trajectory: usize,
    pub frame: usize,
}

impl ValueEntry {
    pub(crate) fn key(&self) -> (usize, usize) {
        (self.trajectory, self.frame)
    }
}

/// Segmented, value-labeled trajectories grouped by game. Immutable once built.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub games: BTreeMap<String, Vec<SubTrajectory>>,
    pub obs_dim: usize,
    value_index: BTreeMap<String, Vec<ValueEntry>>,
}

impl TrajectoryDataset {
    pub fn game_ids(&self) -> impl Iterator<Item = &str> {
        self.games.keys().map(String::as_str)
    }

    pub fn trajectories(&self, game: &str) -> Result<&[SubTrajectory]> {
        self.games
            .get(game)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("game `{game}` is not in the dataset")))
    }

    /// Entries sorted ascending by value, ties by `(trajectory, frame)`.
    pub fn value_index(&self, game: &str) -> Result<&[ValueEntry]> {
        self.value_index
            .get(game)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("game `{game}` is not in the dataset")))
    }

    pub fn total_frames(&self) -> usize {
        self.value_index.values().map(Vec::len).sum()
    }
}

fn build_value_index(trajectories: &[SubTrajectory]) -> Vec<ValueEntry> {
    let mut index: Vec<ValueEntry> = trajectories
        .iter()
        .enumerate()
        .flat_map(|(trajectory, traj)| {
            traj.values.iter().enumerate().map(move |(frame, &value)| ValueEntry {
                value,
                trajectory,
                frame,
            })
        })
        .collect();
    index.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.key().cmp(&b.key())));
    index
}

/// Segment every episode, group by game and index values for closest-value lookup.
///
/// Games whose episodes contain no goal event are left out. Fails with
/// [`Error::EmptyDataset`] when nothing survives segmentation.
pub fn build_dataset(episodes: &[Episode], cfg: &ValueConfig) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let obs_dim = episodes.first().map_or(0, Episode::obs_dim);
    let mut games: BTreeMap<String, Vec<SubTrajectory>> = BTreeMap::new();
    for (i, episode) in episodes.iter().enumerate() {
        if let Some(bad) = episode.frames.iter().find(|f| f.observation.len() != obs_dim) {
            return Err(Error::Dimension(format!(
                "episode {i} (game `{}`) has a {}-dim observation at timestep {}, expected {obs_dim}",
                episode.game_id,
                bad.observation.len(),
                bad.timestep
            )));
        }
        let subs = segment_episode(episode, i, cfg)?;
        if !subs.is_empty() {
            games.entry(episode.game_id.clone()).or_default().extend(subs);
        }
    }
    if games.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let value_index = games
        .iter()
        .map(|(game, trajs)| (game.clone(), build_value_index(trajs)))
        .collect();
    Ok(TrajectoryDataset {
        games,
        obs_dim,
        value_index,
    })
}

/// Read an episode file: one JSON record per line, blank lines ignored.
pub fn load_episodes(path: impl AsRef<Path>, expected_obs_dim: Option<usize>) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_episodes(BufReader::new(file), expected_obs_dim).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_episodes(reader: impl BufRead, expected_obs_dim: Option<usize>) -> Result<Vec<Episode>> {
    let mut episodes = Vec::new();
    let mut obs_dim = expected_obs_dim;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<episode stream>", e))?;
        let line_no = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let index = episodes.len();
        if record.observations.len() != record.rewards.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "{} observations but {} rewards",
                    record.observations.len(),
                    record.rewards.len()
                ),
            });
        }
        if record.rewards.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "episode has no frames".into(),
            });
        }
        let non_finite = record.rewards.iter().chain(record.observations.iter().flatten()).any(|x| !x.is_finite());
        if non_finite {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite number".into(),
            });
        }
        let expected = *obs_dim.get_or_insert(record.observations[0].len());
        if let Some((t, obs)) = record.observations.iter().enumerate().find(|(_, o)| o.len() != expected) {
            return Err(Error::Dimension(format!(
                "episode {index} (line {line_no}) has a {}-dim observation at timestep {t}, expected {expected}",
                obs.len()
            )));
        }
        episodes.push(Episode::new(record.game_id, record.observations, record.rewards)?);
    }
    Ok(episodes)
}

pub fn write_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for episode in episodes {
        let line = serde_json::to_string(&episode.to_record()).expect("episode records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn episode(game: &str, rewards: &[f64]) -> Episode {
        let obs = (0..rewards.len()).map(|t| vec![t as f64, 1.0]).collect();
        Episode::new(game, obs, rewards.to_vec()).unwrap()
    }

    /// Brute-force double loop: v[t] = sum_k gamma^(k - t) r[k].
    fn brute_force_values(rewards: &[f64], gamma: f64) -> Vec<f64> {
        (0..rewards.len())
            .map(|t| (t..rewards.len()).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum())
            .collect()
    }

    #[test]
    fn values_small_examples() {
        assert_eq!(compute_values(&[0.0, 0.0, 1.0], 0.5).unwrap(), vec![0.25, 0.5, 1.0]);
        assert_eq!(compute_values(&[0.0, 1.0], 1.0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn values_reject_bad_gamma() {
        for g in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(compute_values(&[1.0], g), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn values_match_brute_force() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(11);
        for _ in 0..1000 {
            let len = rng.random_range(1..=60);
            let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = compute_values(&rewards, 0.99).unwrap();
            let slow = brute_force_values(&rewards, 0.99);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn segmentation_examples() {
        let cfg = ValueConfig::default();
        let subs = segment_episode(&episode("g", &[0.0, 0.0, 1.0, 0.0, 1.0]), 0, &cfg).unwrap();
        let spans: Vec<_> = subs.iter().map(|s| (s.source_span.start, s.source_span.end)).collect();
        assert_eq!(spans, vec![(0, 2), (3, 4)]);

        assert!(segment_episode(&episode("g", &[0.0, 0.0, 0.0]), 0, &cfg).unwrap().is_empty());

        let subs = segment_episode(&episode("g", &[1.0, 1.0]), 0, &cfg).unwrap();
        assert_eq!(subs.len(), 2);
        assert!(subs.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn segmentation_drops_tail_after_last_goal() {
        let subs = segment_episode(&episode("g", &[0.0, 1.0, 0.0, 0.0]), 3, &ValueConfig::default()).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].source_span, SourceSpan { episode: 3, start: 0, end: 1 });
    }

    #[test]
    fn dataset_counts() {
        let ds = build_dataset(&[episode("a", &[0.0, 1.0, 0.0, 1.0])], &ValueConfig::default()).unwrap();
        assert_eq!(ds.trajectories("a").unwrap().len(), 2);
        assert_eq!(ds.value_index("a").unwrap().len(), 4);

        let ds = build_dataset(
            &[episode("a", &[0.0, 1.0]), episode("b", &[0.0, 0.0, 1.0])],
            &ValueConfig::default(),
        )
        .unwrap();
        assert_eq!(ds.games.len(), 2);
        assert_eq!(ds.value_index("a").unwrap().len(), 2);
        assert_eq!(ds.value_index("b").unwrap().len(), 3);
        assert!(matches!(ds.value_index("c"), Err(Error::Lookup(_))));
    }

    #[test]
    fn dataset_without_goals_is_an_error() {
        let err = build_dataset(&[episode("a", &[0.0, 0.0])], &ValueConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
        assert!(matches!(build_dataset(&[], &ValueConfig::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn reading_examples() {
        let ok = "{\"game_id\":\"a\",\"observations\":[[1,2],[3,4],[5,6]],\"rewards\":[0,0,1]}\n\
                  \n\
                  {\"game_id\":\"b\",\"observations\":[[0,0],[0,0],[0,0],[0,0],[0,0]],\"rewards\":[0,0,0,0,1]}\n";
        let eps = read_episodes(ok.as_bytes(), None).unwrap();
        assert_eq!(eps.iter().map(Episode::len).collect::<Vec<_>>(), vec![3, 5]);
        assert_eq!(eps[1].frames[4].timestep, 4);

        assert!(read_episodes("".as_bytes(), None).unwrap().is_empty());

        let bad = "{\"game_id\":\"a\",\"observations\":[[1,2]],\"rewards\":[0]}\nnot json\n";
        assert!(matches!(read_episodes(bad.as_bytes(), None), Err(Error::Parse { line: 2, .. })));

        let mismatch = "{\"game_id\":\"a\",\"observations\":[[1,2,3,4,5]],\"rewards\":[0]}\n\
                        {\"game_id\":\"a\",\"observations\":[[1,2,3,4,5],[1,2,3,4]],\"rewards\":[0,1]}\n";
        match read_episodes(mismatch.as_bytes(), None) {
            Err(Error::Dimension(msg)) => assert!(msg.starts_with("episode 1 "), "{msg}"),
            other => panic!("expected dimension error, got {other:?}"),
        }
        assert!(matches!(read_episodes(ok.as_bytes(), Some(3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn sparse_values_increase_toward_goal() {
        let mut rewards = vec![0.0; 40];
        rewards[39] = 1.0;
        let v = compute_values(&rewards, 0.97).unwrap();
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn segmentation_partitions_prefix(rewards in proptest::collection::vec(prop_oneof![3 => Just(0.0), 1 => Just(1.0), 1 => -1.0..1.0f64], 1..80)) {
            let ep = episode("g", &rewards);
            let cfg = ValueConfig::default();
            let subs = segment_episode(&ep, 0, &cfg).unwrap();
            let last_goal = rewards.iter().rposition(|&r| r > 0.0);
            match last_goal {
                None => prop_assert!(subs.is_empty()),
                Some(last) => {
                    let mut next = 0;
                    for s in &subs {
                        prop_assert_eq!(s.source_span.start, next);
                        prop_assert!(s.frames.last().unwrap().reward > 0.0);
                        prop_assert_eq!(s.values.len(), s.frames.len());
                        prop_assert_eq!(&s.frames[..], &ep.frames[s.source_span.start..=s.source_span.end]);
                        next = s.source_span.end + 1;
                    }
                    prop_assert_eq!(next, last + 1);
                }
            }
            for s in &subs {
                let r = s.rewards();
                for t in 0..s.len() - 1 {
                    prop_assert_eq!(s.values[t], r[t] + cfg.gamma * s.values[t + 1]);
                }
                prop_assert_eq!(compute_values(&r, cfg.gamma).unwrap(), s.values.clone());
            }
        }

        #[test]
        fn value_index_is_sorted_and_complete(rewards in proptest::collection::vec(prop_oneof![Just(0.0), 0.0..2.0f64], 1..120)) {
            let eps = vec![episode("g", &rewards), episode("g", &rewards[..rewards.len() / 2 + 1])];
            let Ok(ds) = build_dataset(&eps, &ValueConfig { gamma: 0.9, reward_threshold: 0.5 }) else {
                return Ok(());
            };
            let index = ds.value_index("g").unwrap();
            let total: usize = ds.trajectories("g").unwrap().iter().map(SubTrajectory::len).sum();
            prop_assert_eq!(index.len(), total);
            let mut resorted = index.to_vec();
            resorted.sort_by(|a, b| a.value.partial_cmp(&b.value).unwrap().then((a.trajectory, a.frame).cmp(&(b.trajectory, b.frame))));
            prop_assert_eq!(resorted, index.to_vec());
        }
    }
}
