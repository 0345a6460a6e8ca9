//! Pretraining loop, metrics log and parameter checkpoints.
//!
//! Every step samples a batch with the configured sampler, embeds all
//! referenced observations in one forward pass, evaluates the paired loss,
//! backpropagates and applies one Adam update. Randomness comes from a single
//! ChaCha stream seeded by `schedule.seed`, so runs are bit-reproducible.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::encoder::{backward, encode_forward, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::loss::{infonce_loss, triplet_loss, LossConfig, LossKind};
use crate::optim::{adam_step, OptimConfig, OptimState};
use crate::rng::seeded;
use crate::samplers::{
    assemble_batch, item_rng, sample_som_pair, sample_tcn, sample_vip, SomConfig, TcnConfig, VepConfig, VipConfig,
};
use crate::tensor::Tensor;
use crate::trajectory::TrajectoryDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Vep,
    Tcn,
    Som,
    Vip,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [SamplerKind::Vep, SamplerKind::Tcn, SamplerKind::Som, SamplerKind::Vip];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Vep => "vep",
            SamplerKind::Tcn => "tcn",
            SamplerKind::Som => "som",
            SamplerKind::Vip => "vip",
        }
    }

    /// vep and tcn train on triplets, som and vip on InfoNCE.
    pub fn default_loss(self) -> LossKind {
        match self {
            SamplerKind::Vep | SamplerKind::Tcn => LossKind::Triplet,
            SamplerKind::Som | SamplerKind::Vip => LossKind::Infonce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub vep: VepConfig,
    pub tcn: TcnConfig,
    pub som: SomConfig,
    pub vip: VipConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Vep,
            vep: VepConfig::default(),
            tcn: TcnConfig::default(),
            som: SomConfig::default(),
            vip: VipConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SamplerKind::Vep => self.vep.validate(),
            SamplerKind::Tcn => self.tcn.validate(),
            SamplerKind::Som => self.som.validate(),
            SamplerKind::Vip => self.vip.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// VEP game pairs `(x, y)`; empty means every ordered pair of distinct games.
    pub game_pairs: Vec<(String, String)>,
    /// Fill the `wall_ms` metrics column. Off by default so logs stay
    /// byte-identical across reruns.
    pub record_wall_time: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            steps: 2000,
            batch_size: 32,
            seed: 0,
            game_pairs: Vec::new(),
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: EncoderParams,
    pub log: Vec<StepMetrics>,
}

/// Observations referenced by one step plus the row indices each loss slot uses.
struct RowPlan {
    obs: Vec<Vec<f64>>,
    anchors: Vec<usize>,
    positives: Vec<usize>,
    /// `anchors.len()` rows of `M` indices each.
    negatives: Vec<Vec<usize>>,
}

impl RowPlan {
    fn new() -> Self {
        RowPlan {
            obs: Vec::new(),
            anchors: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
        }
    }

    fn push_obs(&mut self, o: &[f64]) -> usize {
        self.obs.push(o.to_vec());
        self.obs.len() - 1
    }
}

/// Games and their trajectory ids that can feed a sampler.
fn eligible(dataset: &TrajectoryDataset, min_len: usize) -> Vec<(String, Vec<usize>)> {
    dataset
        .games
        .iter()
        .filter_map(|(g, trajs)| {
            let ids: Vec<usize> = (0..trajs.len()).filter(|&i| trajs[i].len() >= min_len).collect();
            (!ids.is_empty()).then(|| (g.clone(), ids))
        })
        .collect()
}

fn default_pairs(dataset: &TrajectoryDataset) -> Vec<(String, String)> {
    let games: Vec<&str> = dataset.game_ids().collect();
    if games.len() == 1 {
        return vec![(games[0].to_string(), games[0].to_string())];
    }
    let mut pairs = Vec::new();
    for x in &games {
        for y in &games {
            if x != y {
                pairs.push((x.to_string(), y.to_string()));
            }
        }
    }
    pairs
}

struct Planner<'a> {
    dataset: &'a TrajectoryDataset,
    sampler: &'a SamplerConfig,
    batch_size: usize,
    pairs: Vec<(String, String)>,
    pool: Vec<(String, Vec<usize>)>,
    vip_negatives: usize,
}

impl<'a> Planner<'a> {
    fn new(dataset: &'a TrajectoryDataset, sampler: &'a SamplerConfig, schedule: &Schedule) -> Result<Self> {
        let min_len = match sampler.kind {
            SamplerKind::Vep => 3,
            SamplerKind::Tcn => 3,
            SamplerKind::Som => 2,
            SamplerKind::Vip => sampler.vip.min_len,
        };
        let pool = eligible(dataset, min_len);
        if pool.is_empty() {
            let game = dataset.game_ids().next().unwrap_or_default().to_string();
            return Err(Error::sampling(
                game,
                format!("no trajectory of length >= {min_len} for the {} sampler", sampler.kind.name()),
            ));
        }
        let pairs = if schedule.game_pairs.is_empty() {
            default_pairs(dataset)
        } else {
            for (x, y) in &schedule.game_pairs {
                dataset.trajectories(x)?;
                dataset.trajectories(y)?;
            }
            schedule.game_pairs.clone()
        };
        let vip_negatives = sampler.vip.n_negatives.min(sampler.vip.min_len.saturating_sub(2));
        if sampler.kind == SamplerKind::Vip && vip_negatives == 0 {
            return Err(Error::config(
                "sampler.vip.min_len",
                "VIP training needs windows with at least one interior frame (min_len >= 3)",
            ));
        }
        if sampler.kind == SamplerKind::Som && schedule.batch_size < 2 {
            return Err(Error::config(
                "schedule.batch_size",
                "SOM uses the other rows as negatives and needs batch_size >= 2",
            ));
        }
        Ok(Planner {
            dataset,
            sampler,
            batch_size: schedule.batch_size,
            pairs,
            pool,
            vip_negatives,
        })
    }

    fn pick<'p>(&'p self, rng: &mut impl Rng) -> (&'p str, usize) {
        let (game, ids) = &self.pool[rng.random_range(0..self.pool.len())];
        (game, ids[rng.random_range(0..ids.len())])
    }

    fn plan(&self, rng: &mut impl RngCore) -> Result<RowPlan> {
        let mut plan = RowPlan::new();
        let b = self.batch_size;
        match self.sampler.kind {
            SamplerKind::Vep => {
                let pairs: Vec<(String, String)> = (0..b)
                    .map(|_| self.pairs[rng.random_range(0..self.pairs.len())].clone())
                    .collect();
                let batch = assemble_batch(self.dataset, &pairs, &self.sampler.vep, rng)?;
                let (a, p, n) = batch.fold()?;
                for r in 0..a.shape()[0] {
                    let ia = plan.push_obs(a.row(r));
                    let ip = plan.push_obs(p.row(r));
                    let ineg = plan.push_obs(n.row(r));
                    plan.anchors.push(ia);
                    plan.positives.push(ip);
                    plan.negatives.push(vec![ineg]);
                }
            }
            SamplerKind::Tcn | SamplerKind::Som | SamplerKind::Vip => {
                let base = rng.next_u64();
                for item in 0..b {
                    let mut irng = item_rng(base, item);
                    let (game, tid) = self.pick(&mut irng);
                    let traj = &self.dataset.games[game][tid];
                    let (anchor, positive, negs) = match self.sampler.kind {
                        SamplerKind::Tcn => {
                            let t = sample_tcn(traj, &self.sampler.tcn, &mut irng)?;
                            (t.anchor, t.positive, vec![t.negative])
                        }
                        SamplerKind::Som => {
                            let (a, p) = sample_som_pair(traj, &self.sampler.som, &mut irng)?;
                            (a, p, Vec::new())
                        }
                        _ => {
                            let s = sample_vip(traj, &self.sampler.vip, self.vip_negatives, &mut irng)?;
                            (s.anchor, s.positive, s.negatives)
                        }
                    };
                    let ia = plan.push_obs(traj.observation(anchor));
                    let ip = plan.push_obs(traj.observation(positive));
                    let ineg = negs.iter().map(|&k| plan.push_obs(traj.observation(k))).collect();
                    plan.anchors.push(ia);
                    plan.positives.push(ip);
                    plan.negatives.push(ineg);
                }
                if self.sampler.kind == SamplerKind::Som {
                    // other rows' positives serve as negatives
                    let positives = plan.positives.clone();
                    for (r, negs) in plan.negatives.iter_mut().enumerate() {
                        *negs = positives.iter().enumerate().filter(|&(o, _)| o != r).map(|(_, &p)| p).collect();
                    }
                }
            }
        }
        Ok(plan)
    }
}

fn gather(emb: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (_, d) = emb.dims2()?;
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(emb.row(r));
    }
    Tensor::new(vec![rows.len(), d], data)
}

fn scatter_add(target: &mut Tensor, rows: &[usize], grads: &Tensor) {
    let d = target.shape()[1];
    for (i, &r) in rows.iter().enumerate() {
        let src = &grads.data()[i * d..(i + 1) * d];
        for (t, s) in target.row_mut(r).iter_mut().zip(src) {
            *t += s;
        }
    }
}

/// Loss and embedding gradients for one planned batch.
fn loss_and_grad(plan: &RowPlan, emb: &Tensor, kind: LossKind, cfg: &LossConfig) -> Result<(f64, Tensor)> {
    let mut grad = Tensor::zeros(emb.shape().to_vec());
    let anchors = gather(emb, &plan.anchors)?;
    let positives = gather(emb, &plan.positives)?;
    let m = plan.negatives.first().map_or(0, Vec::len);
    if plan.negatives.iter().any(|n| n.len() != m) || m == 0 {
        return Err(Error::Usage("every batch row needs the same positive number of negatives".into()));
    }
    let loss = match kind {
        LossKind::Triplet => {
            let first: Vec<usize> = plan.negatives.iter().map(|n| n[0]).collect();
            let negatives = gather(emb, &first)?;
            let out = triplet_loss(&anchors, &positives, &negatives, cfg.epsilon)?;
            scatter_add(&mut grad, &first, &out.grad_negative);
            scatter_add(&mut grad, &plan.anchors, &out.grad_anchor);
            scatter_add(&mut grad, &plan.positives, &out.grad_positive);
            out.loss
        }
        LossKind::Infonce => {
            let flat: Vec<usize> = plan.negatives.iter().flatten().copied().collect();
            let d = emb.shape()[1];
            let negatives = gather(emb, &flat)?.reshape(vec![plan.anchors.len(), m, d])?;
            let out = infonce_loss(&anchors, &positives, &negatives, cfg.tau)?;
            let gn = out.grad_negatives.reshape(vec![flat.len(), d])?;
            scatter_add(&mut grad, &plan.anchors, &out.grad_anchor);
            scatter_add(&mut grad, &plan.positives, &out.grad_positive);
            scatter_add(&mut grad, &flat, &gn);
            out.loss
        }
    };
    Ok((loss, grad))
}

/// Run `schedule.steps` optimization steps from the encoder's initial
/// parameters.
pub fn pretrain(
    dataset: &TrajectoryDataset,
    sampler: &SamplerConfig,
    encoder: &EncoderConfig,
    loss: &LossConfig,
    optim: &OptimConfig,
    schedule: &Schedule,
) -> Result<PretrainOutput> {
    let params = EncoderParams::init(encoder)?;
    pretrain_from(params, dataset, sampler, encoder, loss, optim, schedule)
}

pub fn pretrain_from(
    mut params: EncoderParams,
    dataset: &TrajectoryDataset,
    sampler: &SamplerConfig,
    encoder: &EncoderConfig,
    loss: &LossConfig,
    optim: &OptimConfig,
    schedule: &Schedule,
) -> Result<PretrainOutput> {
    sampler.validate()?;
    loss.validate()?;
    encoder.validate()?;
    if encoder.input_dim() != dataset.obs_dim {
        return Err(Error::config(
            "encoder.layer_sizes",
            format!(
                "input size {} does not match observation size {}",
                encoder.input_dim(),
                dataset.obs_dim
            ),
        ));
    }
    if schedule.batch_size == 0 {
        return Err(Error::config("schedule.batch_size", "must be at least 1"));
    }
    let kind = loss.kind.unwrap_or(sampler.kind.default_loss());
    if sampler.kind == SamplerKind::Som && kind == LossKind::Triplet {
        return Err(Error::config("loss.kind", "SOM pairs carry no negative; use infonce"));
    }
    let mut state = OptimState::new(*optim, params.len())?;
    let mut log = Vec::with_capacity(schedule.steps as usize);
    if schedule.steps == 0 {
        return Ok(PretrainOutput { params, log });
    }
    let planner = Planner::new(dataset, sampler, schedule)?;
    let mut rng = seeded(schedule.seed);
    let started = Instant::now();
    for step in 0..schedule.steps {
        let plan = planner.plan(&mut rng)?;
        let batch = Tensor::from_rows(&plan.obs)?;
        let (emb, cache) = encode_forward(&params, encoder, &batch)?;
        let (value, upstream) = loss_and_grad(&plan, &emb, kind, loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                detail: format!("loss is {value}"),
            });
        }
        let grads = backward(&params, encoder, &cache, &upstream)?;
        let grad_norm = grads.norm();
        adam_step(params.flat_mut(), grads.flat(), &mut state)?;
        if !params.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                detail: "parameters became non-finite".into(),
            });
        }
        log.push(StepMetrics {
            step: step + 1,
            loss: value,
            grad_norm,
            wall_ms: if schedule.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }
    Ok(PretrainOutput { params, log })
}

/// Mean loss over the first and last `window` steps.
pub fn trailing_means(log: &[StepMetrics], window: usize) -> Option<(f64, f64)> {
    if log.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[StepMetrics]| s.iter().map(|m| m.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..window]), mean(&log[log.len() - window..])))
}

pub fn write_metrics_csv(path: impl AsRef<Path>, log: &[StepMetrics]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "step,loss,grad_norm,wall_ms").map_err(io)?;
    for m in log {
        writeln!(w, "{},{},{},{}", m.step, m.loss, m.grad_norm, m.wall_ms).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    encoder: EncoderConfig,
    layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLayer {
    /// `[out, in]`
    weight_shape: [usize; 2],
    weights: Vec<f64>,
    bias: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "valign-encoder-v1";

/// JSON checkpoint with the encoder config echo and row-major layer data.
/// Floats are written in shortest round-trip form, so reading back is bit-exact.
pub fn write_checkpoint(path: impl AsRef<Path>, cfg: &EncoderConfig, params: &EncoderParams) -> Result<()> {
    let path = path.as_ref();
    if params.layer_sizes() != cfg.layer_sizes.as_slice() {
        return Err(Error::CheckpointMismatch(format!(
            "parameters have layer sizes {:?}, config says {:?}",
            params.layer_sizes(),
            cfg.layer_sizes
        )));
    }
    let layers = (0..cfg.n_layers())
        .map(|l| CheckpointLayer {
            weight_shape: [cfg.layer_sizes[l + 1], cfg.layer_sizes[l]],
            weights: params.weights(l).to_vec(),
            bias: params.bias(l).to_vec(),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        encoder: cfg.clone(),
        layers,
    };
    let text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderConfig, EncoderParams)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::CheckpointMismatch(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::CheckpointMismatch(format!("unknown format `{}`", file.format)));
    }
    file.encoder
        .validate()
        .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    let sizes = &file.encoder.layer_sizes;
    if file.layers.len() != sizes.len() - 1 {
        return Err(Error::CheckpointMismatch(format!(
            "{} layers stored, config describes {}",
            file.layers.len(),
            sizes.len() - 1
        )));
    }
    let mut params = EncoderParams::zeros(sizes);
    for (l, layer) in file.layers.iter().enumerate() {
        let shape = [sizes[l + 1], sizes[l]];
        if layer.weight_shape != shape || layer.weights.len() != shape[0] * shape[1] || layer.bias.len() != shape[0] {
            return Err(Error::CheckpointMismatch(format!("layer {l} has inconsistent shapes")));
        }
        params.weights_mut(l).copy_from_slice(&layer.weights);
        params.bias_mut(l).copy_from_slice(&layer.bias);
    }
    Ok((file.encoder, params))
}
