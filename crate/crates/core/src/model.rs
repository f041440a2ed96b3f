//! A small MLP with frozen weights and attachable per-layer tuners.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tuner::{Method, TunerCache, TunerConfig, TunerState, Trainable};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: Matrix,
    bias: Vec<f64>,
    pub activation: Activation,
    pub tuner: Option<TunerState>,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::shape(
                "Layer",
                format!("bias of length {} for {} outputs", bias.len(), weight.cols()),
            ));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("Layer bias"));
        }
        Ok(Self {
            weight,
            bias,
            activation,
            tuner: None,
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// The weight and bias the layer currently computes with.
    pub fn effective(&self) -> Result<(Matrix, Vec<f64>)> {
        match &self.tuner {
            Some(t) => Ok((t.effective_weight(&self.weight)?, t.effective_bias(&self.bias))),
            None => Ok((self.weight.clone(), self.bias.clone())),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    pre: Matrix,
    tuner: Option<TunerCache>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    pub seed: u64,
}

impl Model {
    pub fn new(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(
                    "Model",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].output_dim(),
                        i + 1,
                        pair[1].input_dim()
                    ),
                ));
            }
        }
        Ok(Self { layers, seed })
    }

    /// Random MLP over `widths`: `N(0, 2/fan_in)` weights, zero biases, ReLU on
    /// every layer but the last.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], seed: u64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid MLP widths {widths:?}")));
        }
        let depth = widths.len() - 1;
        let layers = (0..depth)
            .map(|i| {
                let (n, m) = (widths[i], widths[i + 1]);
                let w = Matrix::random_normal(n, m, (2.0 / n as f64).sqrt(), rng);
                let act = if i + 1 == depth { Activation::Identity } else { Activation::Relu };
                Layer::new(w, vec![0.0; m], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Attaches a fresh `method` state to every layer, replacing existing ones.
    pub fn attach_all<R: Rng + ?Sized>(&mut self, method: Method, config: &TunerConfig, rng: &mut R) -> Result<()> {
        for layer in &mut self.layers {
            layer.tuner = Some(TunerState::attach(method, &layer.weight, &layer.bias, config, rng)?);
        }
        Ok(())
    }

    pub fn attach<R: Rng + ?Sized>(&mut self, layer: usize, method: Method, config: &TunerConfig, rng: &mut R) -> Result<()> {
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidConfig(format!("no layer {layer}")))?;
        l.tuner = Some(TunerState::attach(method, &l.weight, &l.bias, config, rng)?);
        Ok(())
    }

    pub fn detach_all(&mut self) {
        for layer in &mut self.layers {
            layer.tuner = None;
        }
    }

    /// Folds every tuner into the frozen weights and detaches it.
    pub fn merge(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if layer.tuner.is_some() {
                let (w, b) = layer.effective()?;
                layer.weight = w;
                layer.bias = b;
                layer.tuner = None;
            }
        }
        Ok(())
    }

    /// Hash of every frozen weight and bias bit pattern.
    pub fn frozen_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            layer.weight.shape().hash(&mut h);
            for v in layer.weight.as_slice().iter().chain(&layer.bias) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn frozen_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.rows() * l.weight.cols() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if let Some(first) = self.layers.first() {
            if x.cols() != first.input_dim() {
                return Err(Error::shape(
                    "forward",
                    format!("input has {} columns, model expects {}", x.cols(), first.input_dim()),
                ));
            }
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (pre, tuner) = match &layer.tuner {
                Some(t) => {
                    let (z, c) = t.forward(&h, &layer.weight, &layer.bias)?;
                    (z, Some(c))
                }
                None => (h.matmul(&layer.weight)?.add_row_vector(&layer.bias)?, None),
            };
            let out = layer.activation.apply(&pre);
            caches.push(LayerCache { input: h, pre, tuner });
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                layers: caches,
                fingerprint: self.structure_fingerprint(),
            },
        ))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    fn structure_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            layer.weight.shape().hash(&mut h);
            match &layer.tuner {
                Some(t) => t.param_names().hash(&mut h),
                None => 0u8.hash(&mut h),
            }
        }
        h.finish()
    }

    /// Gradients of every trainable tensor given `∂L/∂output`, ordered like
    /// [`Model::params`]. Frozen weights receive none.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<Vec<Vec<f64>>> {
        if cache.layers.len() != self.layers.len() || cache.fingerprint != self.structure_fingerprint() {
            return Err(Error::CacheMismatch("forward cache does not belong to this model".into()));
        }
        let mut grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        let mut upstream = d_out.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            if upstream.shape() != c.pre.shape() {
                return Err(Error::shape("backward", "upstream gradient does not match the layer output"));
            }
            let dz = layer.activation.backprop(&c.pre, &upstream);
            match (&layer.tuner, &c.tuner) {
                (Some(t), Some(tc)) => {
                    let (g, dx) = t.backward(&c.input, &layer.weight, tc, &dz)?;
                    grads.push(g);
                    upstream = dx;
                }
                (None, None) => {
                    grads.push(Vec::new());
                    upstream = dz.matmul_t(&layer.weight)?;
                }
                _ => return Err(Error::CacheMismatch("tuner attached or detached after forward".into())),
            }
        }
        Ok(grads.into_iter().rev().flatten().collect())
    }

    /// Smallest distance of any ReLU input in the pass to its kink.
    pub fn kink_margin(&self, cache: &ForwardCache) -> f64 {
        self.layers
            .iter()
            .zip(&cache.layers)
            .map(|(l, c)| {
                let tuner = match (&l.tuner, &c.tuner) {
                    (Some(t), Some(tc)) => t.kink_margin(tc),
                    _ => f64::INFINITY,
                };
                l.activation.kink_margin(&c.pre).min(tuner)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// `layer{i}.{name}` for every trainable tensor.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tuner
                    .iter()
                    .flat_map(|t| t.param_names())
                    .map(move |n| format!("layer{i}.{n}"))
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tuner.iter().flat_map(|t| t.params())).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tuner.iter_mut().flat_map(|t| t.params_mut()))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params_snapshot(&self) -> Vec<Vec<f64>> {
        self.params().into_iter().map(<[f64]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_depth_is_identity() {
        let model = Model::new(Vec::new(), 0).unwrap();
        let x = Matrix::random_normal(3, 4, 1.0, &mut rng(1));
        let (y, cache) = model.forward(&x).unwrap();
        assert_eq!(y, x);
        assert!(model.backward(&cache, &x).unwrap().is_empty());
    }

    #[test]
    fn single_linear_layer() {
        let mut g = rng(2);
        let w = Matrix::random_normal(4, 3, 1.0, &mut g);
        let model = Model::new(vec![Layer::new(w.clone(), vec![0.0; 3], Activation::Identity).unwrap()], 0).unwrap();
        let x = Matrix::random_normal(5, 4, 1.0, &mut g);
        assert_eq!(model.predict(&x).unwrap(), x.matmul(&w).unwrap());
    }

    #[test]
    fn lora_layer_matches_manual() {
        let mut g = rng(3);
        let w = Matrix::random_normal(4, 3, 1.0, &mut g);
        let mut model = Model::new(vec![Layer::new(w.clone(), vec![0.0; 3], Activation::Identity).unwrap()], 0).unwrap();
        let cfg = TunerConfig { rank: 2, scale: 0.7, ..TunerConfig::default() };
        model.attach_all(Method::LoRA, &cfg, &mut g).unwrap();
        for p in model.params_mut() {
            for v in p.iter_mut() {
                *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut g);
            }
        }
        let (a, b) = match &model.layers()[0].tuner {
            Some(TunerState::Extension(e)) => (e.a.clone(), e.b.clone()),
            _ => unreachable!(),
        };
        let x = Matrix::random_normal(5, 4, 1.0, &mut g);
        let manual = x.matmul(&w.add(&a.matmul(&b).unwrap().scale(0.7)).unwrap()).unwrap();
        assert!(model.predict(&x).unwrap().max_abs_diff(&manual) <= 1e-12);
    }

    #[test]
    fn fresh_tuners_preserve_outputs() {
        let mut g = rng(4);
        let base = Model::mlp(&[5, 8, 6, 3], 0, &mut g).unwrap();
        let x = Matrix::random_normal(7, 5, 1.0, &mut g);
        let y0 = base.predict(&x).unwrap();
        for m in Method::ALL {
            let mut model = base.clone();
            model.attach_all(m, &TunerConfig { rank: 2, ..TunerConfig::default() }, &mut g).unwrap();
            assert!(model.predict(&x).unwrap().max_abs_diff(&y0) <= 1e-10, "{m}");
            assert_eq!(model.frozen_fingerprint(), base.frozen_fingerprint());
        }
    }

    #[test]
    fn zero_loss_gradient_is_zero() {
        let mut g = rng(5);
        let mut model = Model::mlp(&[4, 6, 2], 0, &mut g).unwrap();
        model.attach_all(Method::FLoRA, &TunerConfig { rank: 2, ..TunerConfig::default() }, &mut g).unwrap();
        let x = Matrix::random_normal(3, 4, 1.0, &mut g);
        let (y, cache) = model.forward(&x).unwrap();
        let grads = model.backward(&cache, &Matrix::zeros(y.rows(), y.cols())).unwrap();
        assert_eq!(grads.len(), model.params().len());
        assert!(grads.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut g = rng(6);
        let mut model = Model::mlp(&[4, 6, 2], 0, &mut g).unwrap();
        let x = Matrix::random_normal(3, 4, 1.0, &mut g);
        let (y, cache) = model.forward(&x).unwrap();
        model.attach_all(Method::LoRA, &TunerConfig { rank: 2, ..TunerConfig::default() }, &mut g).unwrap();
        assert!(matches!(model.backward(&cache, &y), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn chained_dimensions_are_checked() {
        let a = Layer::new(Matrix::zeros(3, 4), vec![0.0; 4], Activation::Relu).unwrap();
        let b = Layer::new(Matrix::zeros(5, 2), vec![0.0; 2], Activation::Relu).unwrap();
        assert!(Model::new(vec![a, b], 0).is_err());
    }

    #[test]
    fn dora_magnitude_gradient_one_column() {
        // n = 2, m = 1: φ = μ (w + a b) / ‖w + a b‖, loss = c · φ
        let w = Matrix::from_rows(&[&[0.6], &[-0.3]]);
        let layer = Layer::new(w.clone(), vec![0.0], Activation::Identity).unwrap();
        let mut model = Model::new(vec![layer], 0).unwrap();
        let mut g = rng(7);
        model.attach(0, Method::DoRA, &TunerConfig { rank: 1, ..TunerConfig::default() }, &mut g).unwrap();
        let (a0, a1, b, mu) = (0.2, 0.5, 0.4, 1.3);
        {
            let mut p = model.params_mut();
            p[0].copy_from_slice(&[a0, a1]);
            p[1].copy_from_slice(&[b]);
            p[2].copy_from_slice(&[mu]);
        }
        let x = Matrix::from_rows(&[&[1.5, -2.0]]);
        let (_, cache) = model.forward(&x).unwrap();
        let grads = model.backward(&cache, &Matrix::from_rows(&[&[1.0]])).unwrap();
        let v = [0.6 + a0 * b, -0.3 + a1 * b];
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let expected = (1.5 * v[0] - 2.0 * v[1]) / norm;
        assert!((grads[2][0] - expected).abs() <= 1e-12);
    }
}
