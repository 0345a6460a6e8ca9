//! Frozen-encoder evaluation of cross-game value alignment.
//!
//! Three views of the same question, "are states of equal value embedded
//! close together regardless of game?":
//!
//! * [`cross_game_alignment`]: rank correlation between embedding distance
//!   and value gap over random cross-game frame pairs.
//! * [`retrieval_at_k`]: how often a frame's nearest cross-game neighbors
//!   carry a value within `v_tol` of its own.
//! * [`value_probe`]: closed-form ridge regression from embeddings to values,
//!   fit on one game and scored on held-out trajectories and on another game.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_forward, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::rng::{derived, tag};
use crate::tensor::{sq_dist, Tensor};
use crate::trajectory::TrajectoryDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct GameEmbedding {
    /// `[N_g, D]`
    pub embeddings: Tensor,
    pub values: Vec<f64>,
    /// `(trajectory, frame)` of every row.
    pub provenance: Vec<(usize, usize)>,
}

impl GameEmbedding {
    pub fn new(embeddings: Tensor, values: Vec<f64>, provenance: Vec<(usize, usize)>) -> Result<Self> {
        let (rows, _) = embeddings.dims2()?;
        if rows != values.len() || rows != provenance.len() {
            return Err(Error::Dimension(format!(
                "{rows} embeddings, {} values, {} provenance entries",
                values.len(),
                provenance.len()
            )));
        }
        Ok(GameEmbedding {
            embeddings,
            values,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDataset {
    pub games: BTreeMap<String, GameEmbedding>,
    pub encoder: Option<EncoderConfig>,
}

impl EmbeddedDataset {
    pub fn game(&self, game: &str) -> Result<&GameEmbedding> {
        self.games
            .get(game)
            .ok_or_else(|| Error::Lookup(format!("game `{game}` was not embedded")))
    }
}

/// Embed every frame of every sub-trajectory.
pub fn embed_dataset(dataset: &TrajectoryDataset, params: &EncoderParams, cfg: &EncoderConfig) -> Result<EmbeddedDataset> {
    if cfg.input_dim() != dataset.obs_dim {
        return Err(Error::Dimension(format!(
            "encoder input size {} does not match observation size {}",
            cfg.input_dim(),
            dataset.obs_dim
        )));
    }
    let mut games = BTreeMap::new();
    for (game, trajs) in &dataset.games {
        let mut rows = Vec::new();
        let mut values = Vec::new();
        let mut provenance = Vec::new();
        for (t, traj) in trajs.iter().enumerate() {
            for (f, frame) in traj.frames.iter().enumerate() {
                rows.push(frame.observation.as_slice());
                values.push(traj.values[f]);
                provenance.push((t, f));
            }
        }
        let (emb, _) = encode_forward(params, cfg, &Tensor::from_rows(&rows)?)?;
        games.insert(game.clone(), GameEmbedding::new(emb, values, provenance)?);
    }
    Ok(EmbeddedDataset {
        games,
        encoder: Some(cfg.clone()),
    })
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Dimension(format!(
            "spearman needs two equal-length vectors of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("an input vector is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation between embedding distance and value gap over
/// `n_pairs` random `(x, y)` frame pairs.
pub fn cross_game_alignment(ed: &EmbeddedDataset, game_x: &str, game_y: &str, n_pairs: usize, seed: u64) -> Result<f64> {
    if n_pairs < 100 {
        return Err(Error::Usage(format!("n_pairs must be at least 100, got {n_pairs}")));
    }
    let (gx, gy) = (ed.game(game_x)?, ed.game(game_y)?);
    if gx.is_empty() || gy.is_empty() {
        return Err(Error::Lookup("cannot pair frames of an empty game".into()));
    }
    let mut rng = derived(seed, tag::BATCH_ITEM, 0);
    let mut dist = Vec::with_capacity(n_pairs);
    let mut gap = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = rng.random_range(0..gx.len());
        let b = rng.random_range(0..gy.len());
        dist.push(sq_dist(gx.embeddings.row(a), gy.embeddings.row(b)).sqrt());
        gap.push((gx.values[a] - gy.values[b]).abs());
    }
    spearman(&dist, &gap)
}

/// Indices of the `k` rows of `pool` nearest to `query`, ties by row order.
fn nearest(pool: &Tensor, query: &[f64], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = pool.rows().enumerate().map(|(i, r)| (sq_dist(r, query), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Fraction of random `x` query frames whose `k` nearest `y` embeddings
/// include one with value within `v_tol` of the query's.
#[allow(clippy::too_many_arguments)]
pub fn retrieval_at_k(
    ed: &EmbeddedDataset,
    game_x: &str,
    game_y: &str,
    k: usize,
    v_tol: f64,
    n_queries: usize,
    seed: u64,
) -> Result<f64> {
    let (gx, gy) = (ed.game(game_x)?, ed.game(game_y)?);
    if k == 0 || gy.len() < k {
        return Err(Error::Usage(format!("k = {k} needs 1 <= k <= {} frames in `{game_y}`", gy.len())));
    }
    if n_queries == 0 || gx.is_empty() {
        return Err(Error::Usage("retrieval needs at least one query frame".into()));
    }
    let mut rng = derived(seed, tag::BATCH_ITEM, 1);
    let mut hits = 0usize;
    for _ in 0..n_queries {
        let q = rng.random_range(0..gx.len());
        let vq = gx.values[q];
        if nearest(&gy.embeddings, gx.embeddings.row(q), k)
            .into_iter()
            .any(|n| (gy.values[n] - vq).abs() <= v_tol)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_queries as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub r2_within: f64,
    pub r2_transfer: f64,
}

/// Ridge fit with an unpenalized bias. Returns `(weights, bias)`.
fn ridge_fit(x: &Tensor, y: &[f64], lambda: f64) -> Result<(DVector<f64>, f64)> {
    let (n, d) = x.dims2()?;
    let xm = DMatrix::from_row_slice(n, d, x.data());
    let x_mean = xm.row_mean();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut xc = xm;
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut gram = xc.transpose() * &xc;
    let singular = || Error::Numeric("normal matrix is singular; use a ridge penalty lambda > 0".into());
    if lambda == 0.0 {
        let eig = gram.clone().symmetric_eigenvalues();
        let max = eig.iter().copied().fold(0.0, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min <= 1e-12 * max {
            return Err(singular());
        }
    }
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let w = gram.cholesky().ok_or_else(singular)?.solve(&rhs);
    let bias = y_mean - (x_mean * &w)[(0, 0)];
    Ok((w, bias))
}

fn predict(x: &Tensor, w: &DVector<f64>, bias: f64) -> Vec<f64> {
    x.rows().map(|r| bias + r.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>()).collect()
}

/// Coefficient of determination.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Numeric("r-squared is undefined for a constant target".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let data: Vec<&[f64]> = rows.iter().map(|&r| t.row(r)).collect();
    if data.is_empty() {
        return Tensor::new(vec![0, t.shape()[1]], Vec::new());
    }
    Tensor::from_rows(&data)
}

/// Ridge probe from embeddings to values. Fit on 80% of `train_game`'s
/// trajectories (seeded split), score on the held-out 20% and on all of
/// `test_game`.
pub fn value_probe(ed: &EmbeddedDataset, train_game: &str, test_game: &str, lambda: f64, seed: u64) -> Result<ProbeResult> {
    if !(lambda >= 0.0) {
        return Err(Error::Usage("ridge lambda must be non-negative".into()));
    }
    let train = ed.game(train_game)?;
    let test = ed.game(test_game)?;
    let mut ids: Vec<usize> = train.provenance.iter().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::Usage(format!(
            "`{train_game}` needs at least two trajectories for a held-out split"
        )));
    }
    ids.shuffle(&mut derived(seed, tag::PROBE_SPLIT, 0));
    let n_held = ((ids.len() as f64 * 0.2).round() as usize).clamp(1, ids.len() - 1);
    let held: BTreeSet<usize> = ids[..n_held].iter().copied().collect();
    let (held_rows, fit_rows): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&r| held.contains(&train.provenance[r].0));

    let fit_x = select_rows(&train.embeddings, &fit_rows)?;
    let fit_y: Vec<f64> = fit_rows.iter().map(|&r| train.values[r]).collect();
    let (w, bias) = ridge_fit(&fit_x, &fit_y, lambda)?;

    let held_x = select_rows(&train.embeddings, &held_rows)?;
    let held_y: Vec<f64> = held_rows.iter().map(|&r| train.values[r]).collect();
    let r2_within = r_squared(&predict(&held_x, &w, bias), &held_y)?;
    let r2_transfer = r_squared(&predict(&test.embeddings, &w, bias), &test.values)?;
    Ok(ProbeResult { r2_within, r2_transfer })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `(x, y)` pairs; the probe fits on `x` and transfers to `y`. Empty means
    /// every ordered pair of distinct games.
    pub game_pairs: Vec<(String, String)>,
    pub k_list: Vec<usize>,
    pub v_tol: f64,
    pub n_pairs: usize,
    pub n_queries: usize,
    pub ridge_lambda: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            game_pairs: Vec::new(),
            k_list: vec![1, 5],
            v_tol: 0.01,
            n_pairs: 10_000,
            n_queries: 1000,
            ridge_lambda: 1e-3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::config("eval.k_list", "needs at least one k >= 1"));
        }
        if !(self.v_tol >= 0.0) {
            return Err(Error::config("eval.v_tol", "must be non-negative"));
        }
        if self.n_pairs < 100 {
            return Err(Error::config("eval.n_pairs", "must be at least 100"));
        }
        if self.n_queries == 0 {
            return Err(Error::config("eval.n_queries", "must be at least 1"));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(Error::config("eval.ridge_lambda", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderEcho {
    /// Pretraining method, or `random` for an untrained baseline.
    pub method: String,
    pub layer_sizes: Vec<usize>,
    pub activation: crate::encoder::Activation,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub spearman_rho: f64,
    pub retrieval_at_k: BTreeMap<usize, f64>,
    pub probe_r2_within: f64,
    pub probe_r2_transfer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingEcho {
    pub n_pairs: usize,
    pub n_queries: usize,
    pub seed: u64,
    pub v_tol: f64,
    pub ridge_lambda: f64,
    pub game_pairs: Vec<(String, String)>,
    /// Embedded frames per game.
    pub frame_counts: BTreeMap<String, usize>,
}

/// Metrics averaged over the evaluated game pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentReport {
    pub encoder: EncoderEcho,
    pub metrics: Metrics,
    pub sampling: SamplingEcho,
}

fn resolve_pairs(ed: &EmbeddedDataset, pairs: &[(String, String)]) -> Vec<(String, String)> {
    if !pairs.is_empty() {
        return pairs.to_vec();
    }
    let games: Vec<&String> = ed.games.keys().collect();
    let mut out = Vec::new();
    for x in &games {
        for y in &games {
            if x != y {
                out.push(((*x).clone(), (*y).clone()));
            }
        }
    }
    out
}

/// Run every metric on every pair and average.
pub fn evaluate(ed: &EmbeddedDataset, cfg: &EvalConfig, encoder: EncoderEcho, seed: u64) -> Result<AlignmentReport> {
    cfg.validate()?;
    let pairs = resolve_pairs(ed, &cfg.game_pairs);
    if pairs.is_empty() {
        return Err(Error::config("eval.game_pairs", "need at least two games or an explicit pair"));
    }
    let n = pairs.len() as f64;
    let mut rho = 0.0;
    let mut within = 0.0;
    let mut transfer = 0.0;
    let mut retrieval: BTreeMap<usize, f64> = cfg.k_list.iter().map(|&k| (k, 0.0)).collect();
    for (x, y) in &pairs {
        rho += cross_game_alignment(ed, x, y, cfg.n_pairs, seed)? / n;
        for (&k, acc) in retrieval.iter_mut() {
            *acc += retrieval_at_k(ed, x, y, k, cfg.v_tol, cfg.n_queries, seed)? / n;
        }
        let probe = value_probe(ed, x, y, cfg.ridge_lambda, seed)?;
        within += probe.r2_within / n;
        transfer += probe.r2_transfer / n;
    }
    Ok(AlignmentReport {
        encoder,
        metrics: Metrics {
            spearman_rho: rho,
            retrieval_at_k: retrieval,
            probe_r2_within: within,
            probe_r2_transfer: transfer,
        },
        sampling: SamplingEcho {
            n_pairs: cfg.n_pairs,
            n_queries: cfg.n_queries,
            seed,
            v_tol: cfg.v_tol,
            ridge_lambda: cfg.ridge_lambda,
            game_pairs: pairs,
            frame_counts: ed.games.iter().map(|(g, e)| (g.clone(), e.len())).collect(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl AlignmentReport {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["method".to_string(), "spearman_rho".to_string()];
        h.extend(self.metrics.retrieval_at_k.keys().map(|k| format!("retrieval_at_{k}")));
        h.extend(
            ["probe_r2_within", "probe_r2_transfer", "n_pairs", "n_queries", "seed"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let m = &self.metrics;
        let mut r = vec![self.encoder.method.clone(), m.spearman_rho.to_string()];
        r.extend(m.retrieval_at_k.values().map(f64::to_string));
        r.push(m.probe_r2_within.to_string());
        r.push(m.probe_r2_transfer.to_string());
        r.push(self.sampling.n_pairs.to_string());
        r.push(self.sampling.n_queries.to_string());
        r.push(self.sampling.seed.to_string());
        r
    }
}

pub fn write_report(report: &AlignmentReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ReportFormat::Csv => format!("{}\n{}\n", report.csv_header().join(","), report.csv_row().join(",")),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<AlignmentReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Activation;
    use crate::rng::seeded;

    /// Game whose 1-D embedding equals its value, one trajectory per `chunk` frames.
    fn value_game(values: &[f64], chunk: usize) -> GameEmbedding {
        let emb = Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap();
        let prov = (0..values.len()).map(|i| (i / chunk, i % chunk)).collect();
        GameEmbedding::new(emb, values.to_vec(), prov).unwrap()
    }

    fn two_games(x: GameEmbedding, y: GameEmbedding) -> EmbeddedDataset {
        EmbeddedDataset {
            games: [("x".to_string(), x), ("y".to_string(), y)].into_iter().collect(),
            encoder: None,
        }
    }

    fn values(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        // ranks (1,2,3,4) vs (1,3,2,4): 1 - 6*2/(4*15) = 0.8
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(spearman(&x, &[2.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(spearman(&x, &x[..3]).is_err());
    }

    #[test]
    fn spearman_ties_use_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_is_invariant_under_monotone_maps() {
        let x = values(50, 1);
        let y = values(50, 2);
        let base = spearman(&x, &y).unwrap();
        let fx: Vec<f64> = x.iter().map(|v| (3.0 * v).exp()).collect();
        let fy: Vec<f64> = y.iter().map(|v| v.powi(3) - 7.0).collect();
        assert!((spearman(&fx, &fy).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn alignment_is_perfect_when_embedding_is_value() {
        let ed = two_games(value_game(&values(300, 3), 30), value_game(&values(200, 4), 20));
        let rho = cross_game_alignment(&ed, "x", "y", 2000, 7).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        assert_eq!(rho, cross_game_alignment(&ed, "x", "y", 2000, 7).unwrap());
        assert!(cross_game_alignment(&ed, "x", "y", 99, 7).is_err());
    }

    #[test]
    fn alignment_of_noise_is_near_zero() {
        let mut rng = seeded(12);
        let mut game = |n: usize| {
            let emb = Tensor::new(vec![n, 4], (0..4 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            GameEmbedding::new(emb, vals, (0..n).map(|i| (i, 0)).collect()).unwrap()
        };
        let ed = two_games(game(2000), game(2000));
        let rho = cross_game_alignment(&ed, "x", "y", 10_000, 1).unwrap();
        assert!(rho.abs() < 0.05, "{rho}");
    }

    #[test]
    fn retrieval_examples() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let ed = two_games(value_game(&v, 10), value_game(&v, 10));
        assert_eq!(retrieval_at_k(&ed, "x", "y", 1, 0.0, 500, 3).unwrap(), 1.0);

        let noise = GameEmbedding::new(
            Tensor::new(vec![100, 1], values(100, 9)).unwrap(),
            v.clone(),
            (0..100).map(|i| (i, 0)).collect(),
        )
        .unwrap();
        let ed = two_games(noise, value_game(&v, 10));
        assert_eq!(retrieval_at_k(&ed, "x", "y", 1, 1.0, 200, 3).unwrap(), 1.0);
        let mut last = 0.0;
        for k in [1, 2, 5, 10] {
            let r = retrieval_at_k(&ed, "x", "y", k, 0.02, 300, 3).unwrap();
            assert!(r >= last);
            last = r;
        }
        let mut last = 0.0;
        for tol in [0.0, 0.01, 0.05, 0.2] {
            let r = retrieval_at_k(&ed, "x", "y", 3, tol, 300, 3).unwrap();
            assert!(r >= last);
            last = r;
        }
        assert!(retrieval_at_k(&ed, "x", "y", 101, 0.0, 10, 0).is_err());
    }

    #[test]
    fn probe_examples() {
        let ed = two_games(value_game(&values(200, 5), 20), value_game(&values(100, 6), 10));
        let p = value_probe(&ed, "x", "y", 0.0, 1).unwrap();
        assert!((p.r2_within - 1.0).abs() < 1e-12);
        assert!((p.r2_transfer - 1.0).abs() < 1e-12);

        // affine target
        let v = values(200, 8);
        let emb = Tensor::new(vec![200, 2], v.iter().flat_map(|x| [x * 2.0, 1.0 - x]).collect()).unwrap();
        let affine: Vec<f64> = v.iter().map(|x| 3.0 * x - 0.5).collect();
        let g = GameEmbedding::new(emb, affine, (0..200).map(|i| (i / 20, i % 20)).collect()).unwrap();
        let ed2 = two_games(g.clone(), g);
        // rank-deficient 2-D embedding with lambda 0 is singular
        assert!(matches!(value_probe(&ed2, "x", "y", 0.0, 1), Err(Error::Numeric(_))));
        assert!(value_probe(&ed2, "x", "y", 1e-9, 1).unwrap().r2_within > 1.0 - 1e-6);

        let constant = GameEmbedding::new(
            Tensor::new(vec![200, 1], vec![0.5; 200]).unwrap(),
            values(200, 5),
            (0..200).map(|i| (i / 20, i % 20)).collect(),
        )
        .unwrap();
        let ed3 = two_games(constant, value_game(&values(100, 6), 10));
        assert!(matches!(value_probe(&ed3, "x", "y", 0.0, 1), Err(Error::Numeric(_))));
        let p = value_probe(&ed3, "x", "y", 1.0, 1).unwrap();
        assert!(p.r2_within <= 0.0 && p.r2_transfer <= 0.0);
    }

    #[test]
    fn huge_ridge_predicts_training_mean() {
        let ed = two_games(value_game(&values(200, 5), 20), value_game(&values(100, 6), 10));
        let p = value_probe(&ed, "x", "y", 1e9, 4).unwrap();
        // oracle: r2 of the constant train-mean predictor on the same split
        let x = &ed.games["x"];
        let mut ids: Vec<usize> = (0..10).collect();
        ids.shuffle(&mut derived(4, tag::PROBE_SPLIT, 0));
        let held: BTreeSet<usize> = ids[..2].iter().copied().collect();
        let (h, f): (Vec<usize>, Vec<usize>) = (0..200).partition(|&r| held.contains(&x.provenance[r].0));
        let mean = f.iter().map(|&r| x.values[r]).sum::<f64>() / f.len() as f64;
        let target: Vec<f64> = h.iter().map(|&r| x.values[r]).collect();
        let baseline = r_squared(&vec![mean; target.len()], &target).unwrap();
        assert!((p.r2_within - baseline).abs() < 1e-6, "{} vs {baseline}", p.r2_within);
        assert!(p.r2_within <= 1e-6);
    }

    fn sample_report() -> AlignmentReport {
        let ed = two_games(value_game(&values(200, 5), 20), value_game(&values(150, 6), 15));
        let echo = EncoderEcho {
            method: "vep".into(),
            layer_sizes: vec![1, 1],
            activation: Activation::Tanh,
            checkpoint: None,
        };
        let cfg = EvalConfig {
            n_pairs: 500,
            n_queries: 100,
            ..EvalConfig::default()
        };
        evaluate(&ed, &cfg, echo, 3).unwrap()
    }

    #[test]
    fn report_roundtrip_and_csv() {
        let report = sample_report();
        assert_eq!(report.sampling.game_pairs.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("r.json");
        write_report(&report, &json, ReportFormat::Json).unwrap();
        assert_eq!(read_report(&json).unwrap(), report);

        let csv = dir.path().join("r.csv");
        write_report(&report, &csv, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("method,spearman_rho,retrieval_at_1,retrieval_at_5,"));
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }

    #[test]
    fn report_json_matches_schema() {
        let value = serde_json::to_value(sample_report()).unwrap();
        let obj = value.as_object().unwrap();
        let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
        assert_eq!(keys, BTreeSet::from(["encoder", "metrics", "sampling"]));
        let metrics = obj["metrics"].as_object().unwrap();
        for k in ["spearman_rho", "probe_r2_within", "probe_r2_transfer"] {
            assert!(metrics[k].is_number(), "{k}");
        }
        let rho = metrics["spearman_rho"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&rho));
        let retrieval = metrics["retrieval_at_k"].as_object().unwrap();
        assert!(!retrieval.is_empty());
        for (k, v) in retrieval {
            assert!(k.parse::<usize>().is_ok());
            assert!((0.0..=1.0).contains(&v.as_f64().unwrap()));
        }
        let sampling = obj["sampling"].as_object().unwrap();
        for k in ["n_pairs", "n_queries", "seed"] {
            assert!(sampling[k].is_u64(), "{k}");
        }
        assert!(obj["encoder"]["method"].is_string());
        assert!(obj["encoder"]["layer_sizes"].is_array());
    }

    #[test]
    fn wrong_schema_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\"metrics\": {}}").unwrap();
        assert!(matches!(read_report(&path), Err(Error::SchemaMismatch { .. })));
    }
}
