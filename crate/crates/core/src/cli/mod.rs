//! Command-line entry point: `gen`, `pretrain`, `eval` and `report`.
//!
//! Every command takes a JSON run config, writes its artifacts under
//! `--out`, echoes the fully resolved config as `config.json` and lists
//! what it wrote in `manifest.json`.

mod config;
mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{DataConfig, EncoderSection, RunConfig};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{embed_dataset, evaluate, read_report, write_report, AlignmentReport, EncoderEcho, ReportFormat};
use crate::synthworld::generate_dataset;
use crate::train::{pretrain, read_checkpoint, write_checkpoint, write_metrics_csv};
use crate::trajectory::write_episodes;

#[derive(Debug, Parser)]
#[command(name = "valign", version, about = "Value-aligned contrastive pretraining on offline trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic episodes, one JSON-lines file per game.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder and write its checkpoint and per-step metrics.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate cross-game alignment of a checkpoint (or a random encoder).
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "random_baseline", conflicts_with = "random_baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        random_baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge report files into one CSV and one SVG bar chart per metric.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<RunConfig>,
    pub seed: Option<u64>,
    /// Artifact name to path; every path exists when the command succeeds.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub tool_version: String,
    pub wall_clock_ms: u64,
    pub threads: usize,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Usage(_) | Error::Dimension(_) => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::EmptyDataset => 4,
        Error::SamplingFailure { .. } => 5,
        Error::Divergence { .. } => 6,
        Error::CheckpointMismatch(_) => 7,
        Error::SchemaMismatch { .. } => 8,
        Error::Lookup(_) | Error::Numeric(_) | Error::UndefinedCorrelation(_) => 1,
    }
}

fn threads() -> Result<usize> {
    match std::env::var("VALIGN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config("VALIGN_THREADS", format!("expected a positive integer, got `{v}`"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Run {
    command: &'static str,
    out: PathBuf,
    started: Instant,
    threads: usize,
    artifacts: BTreeMap<String, PathBuf>,
}

impl Run {
    fn start(command: &'static str, out: &Path) -> Result<Self> {
        let threads = threads()?;
        create_dir(out)?;
        Ok(Run {
            command,
            out: out.to_path_buf(),
            started: Instant::now(),
            threads,
            artifacts: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, key: impl Into<String>, path: PathBuf) {
        self.artifacts.insert(key.into(), path);
    }

    fn echo_config(&mut self, cfg: &RunConfig) -> Result<()> {
        let path = self.path("config.json");
        write_text(&path, &cfg.to_json())?;
        self.record("config", path);
        Ok(())
    }

    fn finish(mut self, cfg: Option<RunConfig>) -> Result<RunManifest> {
        let path = self.path("manifest.json");
        self.record("manifest", path.clone());
        let manifest = RunManifest {
            command: self.command.to_string(),
            seed: cfg.as_ref().map(|c| c.schedule.seed),
            config: cfg,
            artifacts: self.artifacts,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_ms: self.started.elapsed().as_millis() as u64,
            threads: self.threads,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_text(&path, &text)?;
        Ok(manifest)
    }
}

fn game_file_name(game: &str) -> String {
    let safe: String = game
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.jsonl")
}

pub fn cmd_gen(config: &Path, out: &Path) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(config)?;
    if cfg.data.games.is_empty() {
        return Err(Error::config("data.games", "`gen` needs at least one synthetic game"));
    }
    let mut ids = BTreeSet::new();
    for (i, g) in cfg.data.games.iter().enumerate() {
        if !ids.insert(game_file_name(&g.game_id)) {
            return Err(Error::config(format!("data.games[{i}].game_id"), "duplicate game id"));
        }
    }
    let mut run = Run::start("gen", out)?;
    let mut paths = Vec::new();
    for (i, game) in cfg.data.games.iter().enumerate() {
        let episodes = generate_dataset(game, cfg.data.n_episodes, cfg.game_seed(i));
        let path = run.path(&game_file_name(&game.game_id));
        write_episodes(&path, &episodes)?;
        run.record(format!("episodes/{}", game.game_id), path.clone());
        paths.push(fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?);
    }
    // The echo points at the generated files so downstream commands can reuse it.
    cfg.data.paths = paths;
    run.echo_config(&cfg)?;
    run.finish(Some(cfg))
}

pub fn cmd_pretrain(config: &Path, out: &Path) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(config)?;
    let dataset = cfg.dataset()?;
    cfg.resolve(dataset.obs_dim)?;
    let mut run = Run::start("pretrain", out)?;
    run.echo_config(&cfg)?;
    let enc = cfg.encoder_config();
    let output = pretrain(&dataset, &cfg.sampler, &enc, &cfg.loss, &cfg.optim, &cfg.schedule)?;
    let ckpt = run.path("checkpoint.json");
    write_checkpoint(&ckpt, &enc, &output.params)?;
    run.record("checkpoint", ckpt);
    let metrics = run.path("metrics.csv");
    write_metrics_csv(&metrics, &output.log)?;
    run.record("metrics", metrics);
    run.finish(Some(cfg))
}

pub fn cmd_eval(config: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(config)?;
    let dataset = cfg.dataset()?;
    cfg.resolve(dataset.obs_dim)?;
    let enc = cfg.encoder_config();
    let (params, method) = match checkpoint {
        Some(path) => {
            let (stored, params) = read_checkpoint(path)?;
            if stored.layer_sizes != enc.layer_sizes || stored.activation != enc.activation {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint has layers {:?} ({:?}), config has {:?} ({:?})",
                    stored.layer_sizes, stored.activation, enc.layer_sizes, enc.activation
                )));
            }
            (params, cfg.sampler.kind.name().to_string())
        }
        None => (EncoderParams::init(&enc)?, "random".to_string()),
    };
    let mut run = Run::start("eval", out)?;
    run.echo_config(&cfg)?;
    let embedded = embed_dataset(&dataset, &params, &enc)?;
    let echo = EncoderEcho {
        method,
        layer_sizes: enc.layer_sizes.clone(),
        activation: enc.activation,
        checkpoint: checkpoint.map(|p| p.display().to_string()),
    };
    let report = evaluate(&embedded, &cfg.eval, echo, cfg.schedule.seed)?;
    let path = run.path("report.json");
    write_report(&report, &path, ReportFormat::Json)?;
    run.record("report", path);
    run.finish(Some(cfg))
}

/// Merged CSV of several reports. Retrieval columns are the union of every
/// report's `k` values; missing cells are empty.
pub fn merged_csv(reports: &[AlignmentReport]) -> String {
    let ks: BTreeSet<usize> = reports.iter().flat_map(|r| r.metrics.retrieval_at_k.keys().copied()).collect();
    let mut header = vec!["method".to_string(), "spearman_rho".to_string()];
    header.extend(ks.iter().map(|k| format!("retrieval_at_{k}")));
    header.extend(
        ["probe_r2_within", "probe_r2_transfer", "n_pairs", "n_queries", "seed"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut out = header.join(",") + "\n";
    for r in reports {
        let m = &r.metrics;
        let mut row = vec![r.encoder.method.clone(), m.spearman_rho.to_string()];
        row.extend(ks.iter().map(|k| m.retrieval_at_k.get(k).map(f64::to_string).unwrap_or_default()));
        row.push(m.probe_r2_within.to_string());
        row.push(m.probe_r2_transfer.to_string());
        row.push(r.sampling.n_pairs.to_string());
        row.push(r.sampling.n_queries.to_string());
        row.push(r.sampling.seed.to_string());
        out += &(row.join(",") + "\n");
    }
    out
}

pub fn cmd_report(reports: &[PathBuf], out: &Path) -> Result<RunManifest> {
    if reports.is_empty() {
        return Err(Error::Usage("`report` needs at least one report file".into()));
    }
    let loaded = reports.iter().map(read_report).collect::<Result<Vec<_>>>()?;
    let mut run = Run::start("report", out)?;
    let csv = run.path("report.csv");
    write_text(&csv, &merged_csv(&loaded))?;
    run.record("csv", csv);

    let mut series: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for r in &loaded {
        let m = &r.metrics;
        let label = &r.encoder.method;
        let mut push = |name: String, v: f64| series.entry(name).or_default().push((label.clone(), v));
        push("spearman_rho".into(), m.spearman_rho);
        for (k, v) in &m.retrieval_at_k {
            push(format!("retrieval_at_{k}"), *v);
        }
        push("probe_r2_within".into(), m.probe_r2_within);
        push("probe_r2_transfer".into(), m.probe_r2_transfer);
    }
    for (name, bars) in &series {
        let path = run.path(&format!("{name}.svg"));
        write_text(&path, &svg::bar_chart(name, bars))?;
        run.record(format!("plot/{name}"), path);
    }
    run.finish(None)
}

pub fn run(cli: Cli) -> Result<RunManifest> {
    match cli.command {
        Command::Gen { config, out } => cmd_gen(&config, &out),
        Command::Pretrain { config, out } => cmd_pretrain(&config, &out),
        Command::Eval {
            config,
            checkpoint,
            random_baseline: _,
            out,
        } => cmd_eval(&config, checkpoint.as_deref(), &out),
        Command::Report { reports, out } => cmd_report(&reports, &out),
    }
}
