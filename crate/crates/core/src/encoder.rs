//! Multilayer perceptron encoder with a hand-written backward pass.
//!
//! Parameters live in one flat buffer so the optimizer can treat them as a
//! single vector. Layer `l` stores its `[out, in]` weight matrix row-major,
//! followed by its `out` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// `[obs_dim, hidden..., embedding_dim]`.
    pub layer_sizes: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl EncoderConfig {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, init_seed: u64) -> Self {
        EncoderConfig {
            layer_sizes,
            activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("encoder.layer_sizes", "need at least input and output sizes"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("encoder.layer_sizes", "sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated layer sizes")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layer_sizes: Vec<usize>,
    data: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        let n = layer_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        EncoderParams {
            layer_sizes: layer_sizes.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Glorot-uniform weights (He-uniform for relu), zero biases.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = EncoderParams::zeros(&cfg.layer_sizes);
        let mut rng = derived(cfg.init_seed, tag::INIT, 0);
        for l in 0..cfg.n_layers() {
            let (fan_in, fan_out) = (cfg.layer_sizes[l], cfg.layer_sizes[l + 1]);
            let scale = match cfg.activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            for w in params.weights_mut(l) {
                *w = rng.random_range(-scale..scale);
            }
        }
        Ok(params)
    }

    pub fn from_flat(layer_sizes: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected = EncoderParams::zeros(layer_sizes).data.len();
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "layer sizes {layer_sizes:?} need {expected} parameters, got {}",
                data.len()
            )));
        }
        Ok(EncoderParams {
            layer_sizes: layer_sizes.to_vec(),
            data,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index of the first parameter of `layer`.
    fn offset(&self, layer: usize) -> usize {
        self.layer_sizes[..=layer]
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum::<usize>()
    }

    fn span(&self, layer: usize) -> (usize, usize, usize) {
        let start = self.offset(layer);
        let (inp, out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        (start, start + inp * out, start + inp * out + out)
    }

    /// `[out, in]` row-major weight matrix of `layer`.
    pub fn weights(&self, layer: usize) -> &[f64] {
        let (s, b, _) = self.span(layer);
        &self.data[s..b]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let (s, b, _) = self.span(layer);
        &mut self.data[s..b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b, e) = self.span(layer);
        &self.data[b..e]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b, e) = self.span(layer);
        &mut self.data[b..e]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn fingerprint(&self) -> u64 {
        self.data
            .iter()
            .fold(self.data.len() as u64, |h, x| crate::rng::derive_seed(h, 0, x.to_bits()))
    }
}

/// Activations saved by [`encode_forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_sizes: Vec<usize>,
    params_fingerprint: u64,
    rows: usize,
    /// Input to every layer; `inputs[0]` is the batch.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    preacts: Vec<Vec<f64>>,
}

fn check_params(params: &EncoderParams, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    if params.layer_sizes != cfg.layer_sizes {
        return Err(Error::Dimension(format!(
            "parameters have layer sizes {:?}, config expects {:?}",
            params.layer_sizes, cfg.layer_sizes
        )));
    }
    Ok(())
}

/// Embed every row of `batch` (`[N, obs_dim]`) into `[N, D]`.
pub fn encode_forward(params: &EncoderParams, cfg: &EncoderConfig, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
    check_params(params, cfg)?;
    let (rows, dim) = batch.dims2()?;
    if dim != cfg.input_dim() {
        return Err(Error::Dimension(format!(
            "batch has {dim} features, encoder expects {}",
            cfg.input_dim()
        )));
    }
    let n_layers = cfg.n_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut preacts = Vec::with_capacity(n_layers - 1);
    let mut current = batch.data().to_vec();
    for l in 0..n_layers {
        let (inp, out) = (cfg.layer_sizes[l], cfg.layer_sizes[l + 1]);
        let w = params.weights(l);
        let b = params.bias(l);
        let mut z = vec![0.0; rows * out];
        for r in 0..rows {
            let x = &current[r * inp..(r + 1) * inp];
            let zr = &mut z[r * out..(r + 1) * out];
            for (o, zo) in zr.iter_mut().enumerate() {
                let wo = &w[o * inp..(o + 1) * inp];
                *zo = b[o] + wo.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        let next = if l + 1 < n_layers {
            let a: Vec<f64> = z.iter().map(|&v| cfg.activation.apply(v)).collect();
            preacts.push(z);
            a
        } else {
            z
        };
        inputs.push(std::mem::replace(&mut current, next));
    }
    let cache = ForwardCache {
        layer_sizes: cfg.layer_sizes.clone(),
        params_fingerprint: params.fingerprint(),
        rows,
        inputs,
        preacts,
    };
    Ok((Tensor::new(vec![rows, cfg.embedding_dim()], current)?, cache))
}

/// Parameter gradients given the loss gradient on the embeddings.
pub fn backward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    cache: &ForwardCache,
    upstream: &Tensor,
) -> Result<EncoderParams> {
    check_params(params, cfg)?;
    if cache.layer_sizes != cfg.layer_sizes || cache.params_fingerprint != params.fingerprint() {
        return Err(Error::Usage(
            "forward cache was produced by different parameters; rerun encode_forward".into(),
        ));
    }
    if upstream.shape() != [cache.rows, cfg.embedding_dim()] {
        return Err(Error::Usage(format!(
            "upstream gradient has shape {:?}, forward produced [{}, {}]",
            upstream.shape(),
            cache.rows,
            cfg.embedding_dim()
        )));
    }
    let rows = cache.rows;
    let mut grads = EncoderParams::zeros(&cfg.layer_sizes);
    let mut delta = upstream.data().to_vec();
    for l in (0..cfg.n_layers()).rev() {
        let (inp, out) = (cfg.layer_sizes[l], cfg.layer_sizes[l + 1]);
        let x = &cache.inputs[l];
        {
            let gw = grads.weights_mut(l);
            for r in 0..rows {
                let xr = &x[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let d = delta[r * out + o];
                    if d != 0.0 {
                        for (g, xi) in gw[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                            *g += d * xi;
                        }
                    }
                }
            }
        }
        {
            let gb = grads.bias_mut(l);
            for r in 0..rows {
                for o in 0..out {
                    gb[o] += delta[r * out + o];
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = params.weights(l);
        let z = &cache.preacts[l - 1];
        let mut prev = vec![0.0; rows * inp];
        for r in 0..rows {
            for o in 0..out {
                let d = delta[r * out + o];
                if d != 0.0 {
                    for (p, wi) in prev[r * inp..(r + 1) * inp].iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *p += d * wi;
                    }
                }
            }
        }
        for ((p, &zi), &ai) in prev.iter_mut().zip(z).zip(x) {
            *p *= cfg.activation.derivative(zi, ai);
        }
        delta = prev;
    }
    Ok(grads)
}

/// Smallest |pre-activation| seen in a forward pass. Finite-difference checks
/// through relu are only meaningful well away from zero.
pub fn min_abs_preactivation(cache: &ForwardCache) -> f64 {
    cache
        .preacts
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_batch(rows: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_embeddings() {
        let cfg = EncoderConfig::new(vec![3, 5, 2], Activation::Tanh, 0);
        let params = EncoderParams::zeros(&cfg.layer_sizes);
        let (emb, _) = encode_forward(&params, &cfg, &random_batch(4, 3, 1)).unwrap();
        assert!(emb.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let cfg = EncoderConfig::new(vec![3, 3], Activation::Relu, 0);
        let mut params = EncoderParams::zeros(&cfg.layer_sizes);
        for i in 0..3 {
            params.weights_mut(0)[i * 3 + i] = 1.0;
        }
        let batch = random_batch(5, 3, 2);
        let (emb, _) = encode_forward(&params, &cfg, &batch).unwrap();
        assert_eq!(emb, batch);
    }

    #[test]
    fn rows_do_not_interact() {
        let cfg = EncoderConfig::new(vec![4, 8, 8, 3], Activation::Relu, 17);
        let params = EncoderParams::init(&cfg).unwrap();
        let batch = random_batch(8, 4, 3);
        let (all, _) = encode_forward(&params, &cfg, &batch).unwrap();
        let single = Tensor::new(vec![1, 4], batch.row(5).to_vec()).unwrap();
        let (one, _) = encode_forward(&params, &cfg, &single).unwrap();
        assert_eq!(one.row(0), all.row(5));
    }

    #[test]
    fn shape_and_cache_errors() {
        let cfg = EncoderConfig::new(vec![4, 3], Activation::Tanh, 0);
        let mut params = EncoderParams::init(&cfg).unwrap();
        assert!(matches!(
            encode_forward(&params, &cfg, &random_batch(2, 5, 0)),
            Err(Error::Dimension(_))
        ));
        let (emb, cache) = encode_forward(&params, &cfg, &random_batch(2, 4, 0)).unwrap();
        let wrong = Tensor::zeros(vec![3, 3]);
        assert!(matches!(backward(&params, &cfg, &cache, &wrong), Err(Error::Usage(_))));
        params.flat_mut()[0] += 1.0;
        let up = Tensor::zeros(emb.shape().to_vec());
        assert!(matches!(backward(&params, &cfg, &cache, &up), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = EncoderConfig::new(vec![4, 6, 3], Activation::Tanh, 5);
        let params = EncoderParams::init(&cfg).unwrap();
        let (emb, cache) = encode_forward(&params, &cfg, &random_batch(3, 4, 0)).unwrap();
        let grads = backward(&params, &cfg, &cache, &Tensor::zeros(emb.shape().to_vec())).unwrap();
        assert!(grads.flat().iter().all(|&g| g == 0.0));
    }

    /// Linear encoder `y = W x + b` with loss `0.5 * sum ||y - t||^2` has
    /// gradient `(W X^T + b 1^T - T^T) [X, 1]`, the normal-equation residual.
    #[test]
    fn linear_quadratic_gradient_matches_closed_form() {
        let cfg = EncoderConfig::new(vec![3, 2], Activation::Tanh, 8);
        let params = EncoderParams::init(&cfg).unwrap();
        let x = random_batch(6, 3, 10);
        let t = random_batch(6, 2, 11);
        let (y, cache) = encode_forward(&params, &cfg, &x).unwrap();
        let residual: Vec<f64> = y.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
        let upstream = Tensor::new(vec![6, 2], residual.clone()).unwrap();
        let grads = backward(&params, &cfg, &cache, &upstream).unwrap();

        let w = params.weights(0);
        let b = params.bias(0);
        for o in 0..2 {
            let mut gb = 0.0;
            let mut gw = [0.0; 3];
            for r in 0..6 {
                let xr = x.row(r);
                let pred = b[o] + (0..3).map(|i| w[o * 3 + i] * xr[i]).sum::<f64>();
                let res = pred - t.row(r)[o];
                gb += res;
                for i in 0..3 {
                    gw[i] += res * xr[i];
                }
            }
            assert!((grads.bias(0)[o] - gb).abs() < 1e-12);
            for i in 0..3 {
                assert!((grads.weights(0)[o * 3 + i] - gw[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_layout() {
        let p = EncoderParams::zeros(&[3, 4, 2]);
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(p.weights(1).len(), 8);
        assert_eq!(p.bias(1).len(), 2);
        assert!(EncoderParams::from_flat(&[3, 4, 2], vec![0.0; 25]).is_err());
    }
}
