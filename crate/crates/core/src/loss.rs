//! Contrastive losses on embeddings, with exact gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Infonce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// `None` picks the loss paired with the sampler.
    pub kind: Option<LossKind>,
    /// Triplet hinge margin.
    pub epsilon: f64,
    /// InfoNCE similarity temperature.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: None,
            epsilon: 0.5,
            tau: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("loss.epsilon", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("loss.tau", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_anchor: Tensor,
    pub grad_positive: Tensor,
    pub grad_negative: Tensor,
}

/// Mean over rows of `max(0, |a - p|^2 - |a - n|^2 + epsilon)`.
///
/// At the hinge kink the zero branch is taken.
pub fn triplet_loss(anchor: &Tensor, positive: &Tensor, negative: &Tensor, epsilon: f64) -> Result<TripletOutput> {
    let (rows, dim) = anchor.dims2()?;
    if positive.shape() != anchor.shape() || negative.shape() != anchor.shape() {
        return Err(Error::Dimension(format!(
            "triplet shapes differ: {:?}, {:?}, {:?}",
            anchor.shape(),
            positive.shape(),
            negative.shape()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config("loss.epsilon", "must be positive"));
    }
    let mut ga = Tensor::zeros(vec![rows, dim]);
    let mut gp = Tensor::zeros(vec![rows, dim]);
    let mut gn = Tensor::zeros(vec![rows, dim]);
    if rows == 0 {
        return Ok(TripletOutput {
            loss: 0.0,
            grad_anchor: ga,
            grad_positive: gp,
            grad_negative: gn,
        });
    }
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    for r in 0..rows {
        let (a, p, n) = (anchor.row(r), positive.row(r), negative.row(r));
        let hinge = sq_dist(a, p) - sq_dist(a, n) + epsilon;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        let (ga_r, gp_r, gn_r) = (ga.row_mut(r), gp.row_mut(r), gn.row_mut(r));
        for k in 0..dim {
            ga_r[k] = 2.0 * scale * (n[k] - p[k]);
            gp_r[k] = -2.0 * scale * (a[k] - p[k]);
        }
        for k in 0..dim {
            gn_r[k] = 2.0 * scale * (a[k] - n[k]);
        }
    }
    Ok(TripletOutput {
        loss: loss * scale,
        grad_anchor: ga,
        grad_positive: gp,
        grad_negative: gn,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_anchor: Tensor,
    pub grad_positive: Tensor,
    pub grad_negatives: Tensor,
}

/// Mean over rows of `-log(S(a, p) / mean_m S(a, g_m))` with
/// `S(u, v) = exp(-|u - v|^2 / tau)`.
///
/// `negatives` has shape `[N, M, D]`.
pub fn infonce_loss(anchor: &Tensor, positive: &Tensor, negatives: &Tensor, tau: f64) -> Result<InfoNceOutput> {
    let (rows, dim) = anchor.dims2()?;
    if positive.shape() != anchor.shape() {
        return Err(Error::Dimension(format!(
            "anchor {:?} and positive {:?} differ",
            anchor.shape(),
            positive.shape()
        )));
    }
    let m = match *negatives.shape() {
        [n, m, d] if n == rows && d == dim && m >= 1 => m,
        _ => {
            return Err(Error::Dimension(format!(
                "negatives must be [{rows}, M >= 1, {dim}], got {:?}",
                negatives.shape()
            )))
        }
    };
    if !(tau > 0.0) {
        return Err(Error::config("loss.tau", "must be positive"));
    }
    let mut ga = Tensor::zeros(vec![rows, dim]);
    let mut gp = Tensor::zeros(vec![rows, dim]);
    let mut gn = Tensor::zeros(vec![rows, m, dim]);
    if rows == 0 {
        return Ok(InfoNceOutput {
            loss: 0.0,
            grad_anchor: ga,
            grad_positive: gp,
            grad_negatives: gn,
        });
    }
    let scale = 1.0 / rows as f64;
    let c = 2.0 * scale / tau;
    let mut loss = 0.0;
    let mut logits = vec![0.0; m];
    for r in 0..rows {
        let a = anchor.row(r);
        let p = positive.row(r);
        let negs = negatives.row(r);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = -sq_dist(a, &negs[j * dim..(j + 1) * dim]) / tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_mean_exp = max + sum.ln() - (m as f64).ln();
        loss += sq_dist(a, p) / tau + log_mean_exp;

        let mut grad_a: Vec<f64> = a.iter().zip(p).map(|(x, y)| c * (x - y)).collect();
        let gp_r = gp.row_mut(r);
        for k in 0..dim {
            gp_r[k] = -grad_a[k];
        }
        let gn_r = gn.row_mut(r);
        for j in 0..m {
            let w = (logits[j] - max).exp() / sum;
            let g = &negs[j * dim..(j + 1) * dim];
            for k in 0..dim {
                let term = c * w * (a[k] - g[k]);
                gn_r[j * dim + k] = term;
                grad_a[k] -= term;
            }
        }
        ga.row_mut(r).copy_from_slice(&grad_a);
    }
    Ok(InfoNceOutput {
        loss: loss * scale,
        grad_anchor: ga,
        grad_positive: gp,
        grad_negatives: gn,
    })
}
