//! Finite-difference verification of the full encoder + loss gradient.

use rand::Rng;

use crate::encoder::{backward, encode_forward, min_abs_preactivation, Activation, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::loss::{infonce_loss, triplet_loss, LossConfig, LossKind};
use crate::rng::{derive_seed, derived, tag};
use crate::tensor::{sq_dist, Tensor};

/// Rows per trial.
const ROWS: usize = 3;
/// Negatives per row for InfoNCE trials.
const NEGATIVES: usize = 3;
/// Step of the five-point central-difference stencil.
const STEP: f64 = 1e-3;
/// Inputs are redrawn until every relu pre-activation and triplet hinge is at
/// least this far from its kink.
const KINK_MARGIN: f64 = 1e-2;
/// Denominator floor for relative error, so gradients that vanish on both
/// sides compare as equal instead of dividing noise by zero.
const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub tolerance: f64,
    /// Max relative error over all parameters, one entry per trial.
    pub max_rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn failures(&self) -> usize {
        self.max_rel_errors.iter().filter(|&&e| !(e < self.tolerance)).count()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Instance {
    batch: Tensor,
    anchors: Vec<usize>,
    positives: Vec<usize>,
    /// `[ROWS, m]`
    negatives: Vec<usize>,
    m: usize,
}

impl Instance {
    fn random(input_dim: usize, m: usize, rng: &mut impl Rng) -> Self {
        let n_rows = ROWS * (2 + m);
        let data = (0..n_rows * input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Instance {
            batch: Tensor::new(vec![n_rows, input_dim], data).expect("sized above"),
            anchors: (0..ROWS).collect(),
            positives: (ROWS..2 * ROWS).collect(),
            negatives: (2 * ROWS..n_rows).collect(),
            m,
        }
    }
}

fn gather(emb: &Tensor, rows: &[usize]) -> Tensor {
    let d = emb.shape()[1];
    let data = rows.iter().flat_map(|&r| emb.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data).expect("gathered rows")
}

fn scatter(target: &mut Tensor, rows: &[usize], grads: &Tensor) {
    let d = target.shape()[1];
    for (i, &r) in rows.iter().enumerate() {
        for (t, g) in target.row_mut(r).iter_mut().zip(&grads.data()[i * d..(i + 1) * d]) {
            *t += g;
        }
    }
}

/// Loss and embedding gradient of one instance.
fn evaluate(inst: &Instance, emb: &Tensor, kind: LossKind, cfg: &LossConfig) -> Result<(f64, Tensor)> {
    let d = emb.shape()[1];
    let a = gather(emb, &inst.anchors);
    let p = gather(emb, &inst.positives);
    let n = gather(emb, &inst.negatives);
    let mut grad = Tensor::zeros(emb.shape().to_vec());
    let loss = match kind {
        LossKind::Triplet => {
            let out = triplet_loss(&a, &p, &n, cfg.epsilon)?;
            scatter(&mut grad, &inst.anchors, &out.grad_anchor);
            scatter(&mut grad, &inst.positives, &out.grad_positive);
            scatter(&mut grad, &inst.negatives, &out.grad_negative);
            out.loss
        }
        LossKind::Infonce => {
            let n = n.reshape(vec![ROWS, inst.m, d])?;
            let out = infonce_loss(&a, &p, &n, cfg.tau)?;
            scatter(&mut grad, &inst.anchors, &out.grad_anchor);
            scatter(&mut grad, &inst.positives, &out.grad_positive);
            let gn = out.grad_negatives.reshape(vec![ROWS * inst.m, d])?;
            scatter(&mut grad, &inst.negatives, &gn);
            out.loss
        }
    };
    Ok((loss, grad))
}

fn near_kink(inst: &Instance, emb: &Tensor, kind: LossKind, cfg: &LossConfig) -> bool {
    kind == LossKind::Triplet
        && (0..ROWS).any(|r| {
            let a = emb.row(inst.anchors[r]);
            let h = sq_dist(a, emb.row(inst.positives[r])) - sq_dist(a, emb.row(inst.negatives[r])) + cfg.epsilon;
            h.abs() < KINK_MARGIN
        })
}

/// Compare analytic parameter gradients of `loss(encoder(x))` against central
/// finite differences on `trials` random small instances.
///
/// Failures are reported, never raised.
pub fn grad_check(encoder: &EncoderConfig, loss: &LossConfig, trials: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    encoder.validate()?;
    loss.validate()?;
    let kind = loss.kind.unwrap_or(LossKind::Triplet);
    let m = match kind {
        LossKind::Triplet => 1,
        LossKind::Infonce => NEGATIVES,
    };
    let mut max_rel_errors = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = derived(seed, tag::GRAD_CHECK, trial as u64);
        let cfg = EncoderConfig {
            init_seed: derive_seed(seed, tag::INIT, trial as u64),
            ..encoder.clone()
        };
        let mut params = EncoderParams::init(&cfg)?;
        for b in 0..cfg.n_layers() {
            for x in params.bias_mut(b) {
                *x = rng.random_range(-0.1..0.1);
            }
        }
        let (inst, emb, cache) = loop {
            let inst = Instance::random(cfg.input_dim(), m, &mut rng);
            let (emb, cache) = encode_forward(&params, &cfg, &inst.batch)?;
            let relu_ok = cfg.activation != Activation::Relu || min_abs_preactivation(&cache) >= KINK_MARGIN;
            if relu_ok && !near_kink(&inst, &emb, kind, loss) {
                break (inst, emb, cache);
            }
        };
        let (_, upstream) = evaluate(&inst, &emb, kind, loss)?;
        let analytic = backward(&params, &cfg, &cache, &upstream)?;

        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let original = params.flat()[i];
            let mut at = |offset: f64| -> Result<f64> {
                params.flat_mut()[i] = original + offset;
                Ok(evaluate(&inst, &encode_forward(&params, &cfg, &inst.batch)?.0, kind, loss)?.0)
            };
            let (p1, m1) = (at(STEP)?, at(-STEP)?);
            let (p2, m2) = (at(2.0 * STEP)?, at(-2.0 * STEP)?);
            params.flat_mut()[i] = original;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STEP);
            worst = worst.max(relative_error(analytic.flat()[i], numeric));
        }
        max_rel_errors.push(worst);
    }
    Ok(GradCheckReport {
        loss: kind,
        tolerance,
        max_rel_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_triplet_is_exact() {
        let enc = EncoderConfig::new(vec![4, 3], Activation::Tanh, 0);
        let report = grad_check(&enc, &LossConfig::default(), 10, 1e-6, 1).unwrap();
        assert!(report.passed(), "{:?}", report.max_rel_errors);
    }

    #[test]
    fn relu_infonce_two_hidden_layers() {
        let enc = EncoderConfig::new(vec![4, 6, 5, 3], Activation::Relu, 0);
        let loss = LossConfig {
            kind: Some(LossKind::Infonce),
            ..LossConfig::default()
        };
        let report = grad_check(&enc, &loss, 10, 1e-4, 2).unwrap();
        assert!(report.passed(), "{:?}", report.max_rel_errors);
    }

    #[test]
    fn noise_floor_tolerance_is_flagged() {
        let enc = EncoderConfig::new(vec![4, 6, 5, 3], Activation::Tanh, 0);
        let report = grad_check(&enc, &LossConfig::default(), 5, 1e-12, 3).unwrap();
        assert!(!report.passed());
        assert!(report.failures() > 0);
    }
}
