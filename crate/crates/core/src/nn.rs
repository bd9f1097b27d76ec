//! Small fully-connected networks with hand-written backprop.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::to_string_precise;
use crate::logitcore::LogitVector;
use crate::rng::{self, streams};

pub const CHECKPOINT_FORMAT_VERSION: i64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Layer widths from input dimension to class count, the hidden activation
/// and the init seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let s = Self {
            layer_sizes,
            activation,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(
                "layer_sizes needs at least an input and an output size".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec("layer sizes must be > 0".into()));
        }
        if self.output_dim() < 2 {
            return Err(Error::InvalidSpec("output size (class count) must be >= 2".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// One affine map. `w` is `out x in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            w: vec![vec![0.0; fan_in]; fan_out],
            b: vec![0.0; fan_out],
        }
    }

    fn fan_in(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().flatten().chain(self.b.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().flatten().chain(self.b.iter_mut())
    }
}

/// Parameter gradients, laid out exactly like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.b.len(), l.fan_in()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for p in l.params_mut() {
                *p *= s;
            }
        }
    }

    fn matches(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.b.len() == l.b.len()
                    && g.w.len() == l.w.len()
                    && g.w.iter().zip(&l.w).all(|(a, b)| a.len() == b.len())
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. Weights are drawn layer by layer
    /// in row-major order from the init sub-stream of `spec.seed`.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::substream(spec.seed, streams::INIT);
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Layer::zeros(fan_out, fan_in);
                for w in layer.w.iter_mut().flatten() {
                    *w = rng.random_range(-limit..=limit);
                }
                layer
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Build from explicit parameters, checking shapes against the spec.
    pub fn from_parts(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layer_sizes.len() - 1 {
            return Err(Error::Shape(format!(
                "spec has {} layers, got {}",
                spec.layer_sizes.len() - 1,
                layers.len()
            )));
        }
        for (i, (layer, pair)) in layers.iter().zip(spec.layer_sizes.windows(2)).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            if layer.w.len() != fan_out
                || layer.b.len() != fan_out
                || layer.w.iter().any(|r| r.len() != fan_in)
            {
                return Err(Error::Shape(format!(
                    "layer {i} does not have shape {fan_out}x{fan_in}"
                )));
            }
            if layer.params().any(|p| !p.is_finite()) {
                return Err(Error::Shape(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.params().count()).sum()
    }

    /// All parameters, layer by layer, weights row-major then biases.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for p in self.layers.iter_mut().flat_map(Layer::params_mut) {
            *p = *it.next().expect("length checked");
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Pre-activations of every layer; the last one is the logits.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h: Vec<f64> = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.affine(&h);
            if i + 1 < self.layers.len() {
                h = a.iter().map(|&v| self.spec.activation.apply(v)).collect();
            }
            pre.push(a);
        }
        pre
    }

    pub fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).pop().expect("at least one layer"))
    }

    pub fn forward(&self, x: &[f64]) -> Result<LogitVector> {
        LogitVector::new(self.forward_raw(x)?)
    }

    /// Adds `scale * d(d_logits . f(x)) / d theta` into `grads`.
    pub fn accumulate_backward(
        &self,
        x: &[f64],
        d_logits: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.check_input(x)?;
        let pre = self.trace(x);
        self.backprop_trace(x, &pre, d_logits, scale, grads)
    }

    /// One forward pass, a caller-supplied loss on the logits, and the
    /// backward pass of that loss scaled by `scale` into `grads`.
    pub fn backprop_with<T>(
        &self,
        x: &[f64],
        scale: f64,
        grads: &mut Gradients,
        loss: impl FnOnce(&LogitVector) -> Result<(T, Vec<f64>)>,
    ) -> Result<T> {
        self.check_input(x)?;
        let pre = self.trace(x);
        let logits = LogitVector::new(pre.last().expect("at least one layer").clone())?;
        let (value, d_logits) = loss(&logits)?;
        self.backprop_trace(x, &pre, &d_logits, scale, grads)?;
        Ok(value)
    }

    fn backprop_trace(
        &self,
        x: &[f64],
        pre: &[Vec<f64>],
        d_logits: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        if d_logits.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "d_logits has length {}, network outputs {}",
                d_logits.len(),
                self.output_dim()
            )));
        }
        if !grads.matches(self) {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }
        let act = self.spec.activation;
        let mut delta: Vec<f64> = d_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let input: Vec<f64> = if i == 0 {
                x.to_vec()
            } else {
                pre[i - 1].iter().map(|&v| act.apply(v)).collect()
            };
            let g = &mut grads.layers[i];
            for (r, d) in delta.iter().enumerate() {
                let sd = scale * d;
                for (gw, xin) in g.w[r].iter_mut().zip(&input) {
                    *gw += sd * xin;
                }
                g.b[r] += sd;
            }
            if i > 0 {
                let layer = &self.layers[i];
                let mut next = vec![0.0; layer.fan_in()];
                for (row, d) in layer.w.iter().zip(&delta) {
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
                for (n, p) in next.iter_mut().zip(&pre[i - 1]) {
                    *n *= act.derivative(*p);
                }
                delta = next;
            }
        }
        Ok(())
    }

    /// Gradient of `d_logits . f(x)` with respect to every parameter.
    pub fn backward(&self, x: &[f64], d_logits: &[f64]) -> Result<Gradients> {
        let mut g = Gradients::zeros_like(self);
        self.accumulate_backward(x, d_logits, 1.0, &mut g)?;
        Ok(g)
    }

    /// `theta <- theta - lr * g`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate must be >= 0, got {lr}")));
        }
        if !grads.matches(self) {
            return Err(Error::Shape("gradients do not match network".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, gp) in layer.params_mut().zip(g.params()) {
                *p -= lr * gp;
            }
        }
        Ok(())
    }
}

/// SGD with optional heavy-ball momentum. With `momentum == 0` every step is
/// exactly [`Mlp::sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) -> Result<()> {
        if self.momentum == 0.0 {
            return net.sgd_step(grads, lr);
        }
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
        if !v.matches(net) || !grads.matches(net) {
            return Err(Error::Shape("gradients do not match network".into()));
        }
        for (vl, gl) in v.layers.iter_mut().zip(&grads.layers) {
            for (vp, gp) in vl.params_mut().zip(gl.params()) {
                *vp = self.momentum * *vp + gp;
            }
        }
        net.sgd_step(v, lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: i64,
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl Checkpoint {
    pub fn of(net: &Mlp) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec: net.spec.clone(),
            layers: net.layers.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(to_string_precise(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        let version = value
            .get("format_version")
            .ok_or_else(|| Error::MalformedCheckpoint("missing format_version".into()))?
            .as_i64()
            .ok_or_else(|| Error::MalformedCheckpoint("format_version is not an integer".into()))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::MalformedCheckpoint(e.to_string()))
    }

    pub fn into_mlp(self) -> Result<Mlp> {
        Mlp::from_parts(self.spec, self.layers).map_err(|e| Error::MalformedCheckpoint(e.to_string()))
    }
}

pub fn save_checkpoint(net: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, Checkpoint::of(net).to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Mlp> {
    let text = fs::read_to_string(path)?;
    Checkpoint::from_json(&text)?.into_mlp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize], seed: u64) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), Activation::Tanh, seed).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, 0).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu, 0).is_err());
        assert!(MlpSpec::new(vec![3, 1], Activation::Relu, 0).is_err());
        assert!(MlpSpec::new(vec![3, 4, 2], Activation::Relu, 0).is_ok());
    }

    #[test]
    fn init_shape_bias_and_determinism() {
        let s = spec(&[2, 3], 11);
        let a = Mlp::init(&s).unwrap();
        assert_eq!(a.layers[0].w.len(), 3);
        assert_eq!(a.layers[0].w[0].len(), 2);
        assert_eq!(a.layers[0].b, vec![0.0; 3]);
        let b = Mlp::init(&s).unwrap();
        let bits = |m: &Mlp| m.parameters().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a.parameters(), Mlp::init(&spec(&[2, 3], 12)).unwrap().parameters());
        let limit = (6.0f64 / 5.0).sqrt();
        assert!(a.parameters().iter().all(|p| p.abs() <= limit));
    }

    #[test]
    fn identity_net_passes_input_through() {
        let s = spec(&[3, 3], 0);
        let mut w = vec![vec![0.0; 3]; 3];
        for (i, row) in w.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let net = Mlp::from_parts(s, vec![Layer { w, b: vec![0.0; 3] }]).unwrap();
        assert_eq!(net.forward(&[0.5, -2.0, 7.0]).unwrap().values(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn zero_net_gives_zero_logits() {
        let mut net = Mlp::init(&spec(&[4, 5, 3], 3)).unwrap();
        net.set_parameters(&vec![0.0; net.num_params()]).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap().values(), &[0.0; 3]);
    }

    #[test]
    fn forward_shape_error() {
        let net = Mlp::init(&spec(&[4, 3], 3)).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(net.backward(&[1.0; 4], &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_zero_and_linear_closed_form() {
        let net = Mlp::init(&spec(&[3, 5, 2], 9)).unwrap();
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));

        let net = Mlp::init(&spec(&[3, 2], 9)).unwrap();
        let x = [0.1, -0.2, 0.3];
        let d = [2.0, -1.5];
        let g = net.backward(&x, &d).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(g.layers[0].w[r][c], d[r] * x[c]);
            }
            assert_eq!(g.layers[0].b[r], d[r]);
        }
    }

    #[test]
    fn sgd_step_examples() {
        let mut net = Mlp::init(&spec(&[2, 2], 1)).unwrap();
        let before = net.clone();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].b[0] = 2.0;
        net.sgd_step(&g, 0.0).unwrap();
        assert_eq!(net, before);
        net.sgd_step(&g, 0.5).unwrap();
        assert_eq!(net.layers[0].b[0], before.layers[0].b[0] - 1.0);
        assert!(net.sgd_step(&g, -1.0).is_err());
        let other = Mlp::init(&spec(&[2, 3, 2], 1)).unwrap();
        assert!(net.sgd_step(&Gradients::zeros_like(&other), 0.1).is_err());
    }

    #[test]
    fn momentum_zero_matches_plain_sgd() {
        let net0 = Mlp::init(&spec(&[3, 4, 2], 5)).unwrap();
        let g = net0.backward(&[1.0, 0.5, -0.5], &[0.3, -0.3]).unwrap();
        let mut a = net0.clone();
        let mut b = net0.clone();
        let mut opt = Sgd::new(0.0);
        for _ in 0..3 {
            opt.step(&mut a, &g, 0.1).unwrap();
            b.sgd_step(&g, 0.1).unwrap();
        }
        assert_eq!(a, b);

        let mut c = net0.clone();
        let mut opt = Sgd::new(0.9);
        opt.step(&mut c, &g, 0.1).unwrap();
        opt.step(&mut c, &g, 0.1).unwrap();
        // second step moves by lr * (0.9 g + g)
        let expected = net0.layers[0].b[0] - 0.1 * g.layers[0].b[0] - 0.1 * 1.9 * g.layers[0].b[0];
        assert!((c.layers[0].b[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_errors() {
        let net = Mlp::init(&spec(&[2, 3, 2], 4)).unwrap();
        let text = Checkpoint::of(&net).to_json().unwrap();
        assert!(matches!(
            Checkpoint::from_json(&text[..text.len() / 2]),
            Err(Error::MalformedCheckpoint(_))
        ));
        let wrong = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        assert!(matches!(
            Checkpoint::from_json(&wrong),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        let mut ck = Checkpoint::of(&net);
        ck.layers[1].b.pop();
        let text = ck.to_json().unwrap();
        assert!(matches!(
            Checkpoint::from_json(&text).unwrap().into_mlp(),
            Err(Error::MalformedCheckpoint(_))
        ));
    }
}
