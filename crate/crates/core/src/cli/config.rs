//! Run configuration file: parsing, defaults, path resolution and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::loss::LossConfig;
use crate::optim::OptimConfig;
use crate::rng::{derive_seed, tag};
use crate::synthworld::{generate_dataset, GameSpec};
use crate::train::{SamplerConfig, Schedule};
use crate::trajectory::{build_dataset, load_episodes, Episode, TrajectoryDataset, ValueConfig};

/// Default hidden width and embedding size when `encoder.layer_sizes` is omitted.
const DEFAULT_HIDDEN: usize = 64;
const DEFAULT_EMBEDDING: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Episode files (JSON lines). Take precedence over `games`.
    pub paths: Vec<PathBuf>,
    /// Synthetic games, generated in memory when `paths` is empty.
    pub games: Vec<GameSpec>,
    pub n_episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            paths: Vec::new(),
            games: Vec::new(),
            n_episodes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// Full layer list including the input size. Empty means
    /// `[obs_dim, 64, 16]`.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            layer_sizes: Vec::new(),
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub value: ValueConfig,
    pub sampler: SamplerConfig,
    pub encoder: EncoderSection,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: Schedule,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parse JSON text. Errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "(root)".to_string() } else { path }, e.into_inner().to_string())
        })
    }

    /// Read a config file and resolve relative data paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.data.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.data.paths.iter().enumerate() {
            if !p.is_file() {
                return Err(Error::config(
                    format!("data.paths[{i}]"),
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        for (i, g) in self.data.games.iter().enumerate() {
            g.validate().map_err(|e| Error::config(format!("data.games[{i}]"), e.to_string()))?;
        }
        self.value.validate()?;
        self.sampler.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        if self.schedule.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn has_data(&self) -> bool {
        !self.data.paths.is_empty() || !self.data.games.is_empty()
    }

    /// Seed used to generate episodes of the `index`-th synthetic game.
    pub fn game_seed(&self, index: usize) -> u64 {
        derive_seed(self.schedule.seed, tag::DYNAMICS, index as u64)
    }

    /// Episodes from files, or generated from the synthetic game specs.
    pub fn episodes(&self) -> Result<Vec<Episode>> {
        if !self.data.paths.is_empty() {
            let mut out: Vec<Episode> = Vec::new();
            for p in &self.data.paths {
                let expected = out.first().map(Episode::obs_dim);
                out.extend(load_episodes(p, expected)?);
            }
            return Ok(out);
        }
        if self.data.games.is_empty() {
            return Err(Error::config("data", "needs `paths` or `games`"));
        }
        Ok(self
            .data
            .games
            .iter()
            .enumerate()
            .flat_map(|(i, g)| generate_dataset(g, self.data.n_episodes, self.game_seed(i)))
            .collect())
    }

    pub fn dataset(&self) -> Result<TrajectoryDataset> {
        build_dataset(&self.episodes()?, &self.value)
    }

    /// Fill defaults that depend on the data: encoder layer sizes and the
    /// loss kind implied by the sampler.
    pub fn resolve(&mut self, obs_dim: usize) -> Result<()> {
        if self.encoder.layer_sizes.is_empty() {
            self.encoder.layer_sizes = vec![obs_dim, DEFAULT_HIDDEN, DEFAULT_EMBEDDING];
        }
        if self.encoder.layer_sizes[0] != obs_dim {
            return Err(Error::config(
                "encoder.layer_sizes",
                format!("input size {} does not match observation size {obs_dim}", self.encoder.layer_sizes[0]),
            ));
        }
        if self.loss.kind.is_none() {
            self.loss.kind = Some(self.sampler.kind.default_loss());
        }
        self.encoder_config().validate().map_err(|e| Error::config("encoder", e.to_string()))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::new(
            self.encoder.layer_sizes.clone(),
            self.encoder.activation,
            derive_seed(self.schedule.seed, tag::INIT, 0),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
