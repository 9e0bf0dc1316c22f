//! Shallow feed-forward encoder mapping raw features to embeddings, with
//! hand-written backpropagation and momentum SGD.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::linalg::{axpy, dot, sq_dist, Matrix};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TQEN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation. The relu kink takes slope 0.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
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

    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        Ok(match c {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            _ => return Err(Error::Format(format!("unknown activation code {c}"))),
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(arg_err!("unknown activation {s:?}")),
        }
    }
}

/// One affine layer `act(W x + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Gradient (or momentum buffer) with the same shape as a [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &Layer) -> Self {
        Self {
            weight: Matrix::zeros(layer.output_dim(), layer.input_dim()),
            bias: vec![0.0; layer.output_dim()],
        }
    }

    fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

/// Encoder weights plus the momentum-SGD state that updates them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layers: Vec<Layer>,
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<LayerGrad>,
}

/// Intermediate values kept by [`EncoderParams::forward_cached`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; the final entry is the output.
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.inputs.last().expect("cache holds at least the input")
    }

    /// Smallest |pre-activation| over relu layers, used to stay clear of kinks
    /// in gradient checks. `None` when no layer is a relu.
    pub fn min_relu_margin(&self, layers: &[Layer]) -> Option<f64> {
        layers
            .iter()
            .zip(&self.pre_activations)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, p)| p.as_slice().iter().map(|v| v.abs()))
            .reduce(f64::min)
    }
}

impl EncoderParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    ///
    /// `dims` lists the layer widths from input to embedding, so an encoder with
    /// `L` layers takes `L + 1` dims and `L` activations.
    pub fn init(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 || activations.len() + 1 != dims.len() {
            return Err(arg_err!(
                "need L+1 dims for L activations, got {} dims and {} activations",
                dims.len(),
                activations.len()
            ));
        }
        if dims.contains(&0) {
            return Err(arg_err!("layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).unwrap(),
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers, 1e-3, 0.9)
    }

    pub fn from_layers(layers: Vec<Layer>, learning_rate: f64, momentum: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(arg_err!("encoder needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(arg_err!("layer {i} bias length does not match its output width"));
            }
            if !(l.weight.all_finite() && l.bias.iter().all(|v| v.is_finite())) {
                return Err(arg_err!("layer {i} has non-finite parameters"));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(arg_err!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                ));
            }
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(arg_err!("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(arg_err!("momentum must lie in [0, 1), got {momentum}"));
        }
        let velocity = layers.iter().map(LayerGrad::zeros_like).collect();
        Ok(Self {
            layers,
            learning_rate,
            momentum,
            velocity,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.inputs.pop().unwrap())
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(arg_err!(
                "input has {} columns, encoder expects {}",
                x.cols(),
                self.input_dim()
            ));
        }
        let mut inputs = vec![x.clone()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = inputs.last().unwrap();
            let mut pre = Matrix::zeros(input.rows(), layer.output_dim());
            for r in 0..input.rows() {
                let xr = input.row(r);
                for (o, out) in pre.row_mut(r).iter_mut().enumerate() {
                    *out = dot(layer.weight.row(o), xr) + layer.bias[o];
                }
            }
            let mut post = pre.clone();
            post.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            pre_activations.push(pre);
            inputs.push(post);
        }
        Ok(ForwardCache {
            inputs,
            pre_activations,
        })
    }

    /// Backpropagates `upstream = dLoss/dOutput` (one row per input row) to
    /// parameter gradients.
    pub fn param_gradients(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Vec<LayerGrad>> {
        let out = cache.output();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(arg_err!("upstream gradient shape does not match the encoder output"));
        }
        let mut grads: Vec<LayerGrad> = self.layers.iter().map(LayerGrad::zeros_like).collect();
        let mut delta = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let pre = &cache.pre_activations[l];
            for (d, p) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *d *= layer.activation.derivative(*p);
            }
            let input = &cache.inputs[l];
            let g = &mut grads[l];
            for r in 0..delta.rows() {
                let dr = delta.row(r);
                let xr = input.row(r);
                for (o, &dv) in dr.iter().enumerate() {
                    if dv != 0.0 {
                        axpy(dv, xr, g.weight.row_mut(o));
                        g.bias[o] += dv;
                    }
                }
            }
            if l > 0 {
                let mut next = Matrix::zeros(delta.rows(), layer.input_dim());
                for r in 0..delta.rows() {
                    let nr = next.row_mut(r);
                    for (o, &dv) in delta.row(r).iter().enumerate() {
                        if dv != 0.0 {
                            axpy(dv, layer.weight.row(o), nr);
                        }
                    }
                }
                delta = next;
            }
        }
        Ok(grads)
    }

    /// One momentum-SGD step: `v = momentum * v + g`, `theta -= lr * v`.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, grads: &[LayerGrad]) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(arg_err!("gradient has {} layers, encoder has {}", grads.len(), self.layers.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Training(format!("non-finite gradient in layer {i}")));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((layer, vel), g) in self.layers.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, v), gv) in layer
                .weight
                .as_mut_slice()
                .iter_mut()
                .zip(vel.weight.as_mut_slice())
                .zip(g.weight.as_slice())
            {
                *v = mu * *v + gv;
                *w -= lr * *v;
            }
            for ((b, v), gv) in layer.bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
                *v = mu * *v + gv;
                *b -= lr * *v;
            }
        }
        if self.layers.iter().any(|l| !(l.weight.all_finite() && l.bias.iter().all(|v| v.is_finite()))) {
            return Err(Error::Training("parameters became non-finite after the update".into()));
        }
        Ok(())
    }

    /// Forward, backprop of the supplied embedding gradients, then [`step`](Self::step).
    pub fn backward_and_step(&mut self, x: &Matrix, upstream: &Matrix) -> Result<()> {
        let cache = self.forward_cached(x)?;
        let grads = self.param_gradients(&cache, upstream)?;
        self.step(&grads)
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum();
        if flat.len() != total {
            return Err(arg_err!("expected {total} parameters, got {}", flat.len()));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }

    /// Checkpoint layout: magic, version, layer count, then `(in, out,
    /// activation)` per layer as `u32`, then every layer's weights (row-major)
    /// and biases as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            for v in [l.input_dim() as u32, l.output_dim() as u32, l.activation.code()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.flat_params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad encoder checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n_layers = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (i, o, a) = (r.u32()? as usize, r.u32()? as usize, Activation::from_code(r.u32()?)?);
            shapes.push((i, o, a));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, o, activation) in shapes {
            let w = (0..i * o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let bias = (0..o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(Layer {
                weight: Matrix::from_vec(o, i, w)?,
                bias,
                activation,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in encoder checkpoint".into()));
        }
        Self::from_layers(layers, 1e-3, 0.9).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Signed hinge argument `delta - |za - zn|^2 + |za - zp|^2`; the triplet is
/// hard when this is strictly positive.
#[inline]
pub fn hinge_argument(za: &[f64], zp: &[f64], zn: &[f64], delta: f64) -> f64 {
    delta - sq_dist(za, zn) + sq_dist(za, zp)
}

/// `max(0, delta - |za - zn|^2 + |za - zp|^2)`
#[inline]
pub fn triplet_loss(za: &[f64], zp: &[f64], zn: &[f64], delta: f64) -> f64 {
    hinge_argument(za, zp, zn, delta).max(0.0)
}

/// Reconstructions of the three triplet members under the current codes.
#[derive(Debug, Clone, Copy)]
pub struct QuantTargets<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

/// Gradient of one triplet's joint loss with respect to each member's embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Gradient of `L_i + lambda * q_i` with codebooks and codes held fixed, where
/// `q_i` sums the squared reconstruction residuals of the three members.
/// `targets` may be omitted when `lambda` is zero.
pub fn loss_grad_embeddings(
    za: &[f64],
    zp: &[f64],
    zn: &[f64],
    delta: f64,
    lambda: f64,
    targets: Option<QuantTargets<'_>>,
) -> TripletGrad {
    let d = za.len();
    let mut g = TripletGrad {
        anchor: vec![0.0; d],
        positive: vec![0.0; d],
        negative: vec![0.0; d],
    };
    if hinge_argument(za, zp, zn, delta) > 0.0 {
        for k in 0..d {
            g.anchor[k] = 2.0 * (zn[k] - zp[k]);
            g.positive[k] = -2.0 * (za[k] - zp[k]);
            g.negative[k] = 2.0 * (za[k] - zn[k]);
        }
    }
    if lambda != 0.0 {
        if let Some(t) = targets {
            for (out, (z, r)) in [
                (&mut g.anchor, (za, t.anchor)),
                (&mut g.positive, (zp, t.positive)),
                (&mut g.negative, (zn, t.negative)),
            ] {
                for k in 0..d {
                    out[k] += 2.0 * lambda * (z[k] - r[k]);
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(n: usize, act: Activation) -> Layer {
        Layer {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
            activation: act,
        }
    }

    #[test]
    fn identity_and_relu_forward() {
        let x = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let id = EncoderParams::from_layers(vec![identity_layer(2, Activation::Identity)], 0.1, 0.0).unwrap();
        assert_eq!(id.forward(&x).unwrap().as_slice(), &[1.0, 2.0]);
        let relu = EncoderParams::from_layers(vec![identity_layer(2, Activation::Relu)], 0.1, 0.0).unwrap();
        let x = Matrix::from_vec(1, 2, vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu.forward(&x).unwrap().as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let enc = EncoderParams::init(&[3, 2], &[Activation::Identity], 0).unwrap();
        assert!(enc.forward(&Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn init_rejects_broken_chain() {
        assert!(EncoderParams::init(&[3], &[], 0).is_err());
        assert!(EncoderParams::init(&[3, 2], &[Activation::Relu, Activation::Relu], 0).is_err());
        let bad = vec![
            identity_layer(2, Activation::Identity),
            identity_layer(3, Activation::Identity),
        ];
        assert!(EncoderParams::from_layers(bad, 0.1, 0.0).is_err());
    }

    #[test]
    fn triplet_loss_examples() {
        let z = [0.0, 0.0];
        assert_eq!(triplet_loss(&z, &z, &z, 1.0), 1.0);
        assert_eq!(triplet_loss(&[0., 0.], &[1., 0.], &[3., 0.], 1.0), 0.0);
        assert_eq!(triplet_loss(&[0., 0.], &[2., 0.], &[1., 0.], 0.5), 3.5);
    }

    #[test]
    fn inactive_triplet_has_zero_gradient() {
        let g = loss_grad_embeddings(&[0., 0.], &[1., 0.], &[3., 0.], 1.0, 0.0, None);
        assert!(g.anchor.iter().chain(&g.positive).chain(&g.negative).all(|&v| v == 0.0));
    }

    #[test]
    fn exact_reconstruction_adds_nothing() {
        let (za, zp, zn) = ([0., 0.], [1., 0.], [3., 0.]);
        let t = QuantTargets {
            anchor: &za,
            positive: &zp,
            negative: &zn,
        };
        let g = loss_grad_embeddings(&za, &zp, &zn, 1.0, 1.0, Some(t));
        assert!(g.anchor.iter().chain(&g.positive).chain(&g.negative).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut enc = EncoderParams::init(&[3, 4, 2], &[Activation::Tanh, Activation::Identity], 5).unwrap();
        let before = enc.clone();
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        for _ in 0..3 {
            enc.backward_and_step(&x, &Matrix::zeros(2, 2)).unwrap();
        }
        assert_eq!(enc.layers(), before.layers());
    }

    #[test]
    fn momentum_second_step_is_1_9x() {
        let mut enc = EncoderParams::from_layers(vec![identity_layer(1, Activation::Identity)], 0.1, 0.9).unwrap();
        let g = vec![LayerGrad {
            weight: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![0.0],
        }];
        let w0 = enc.layers()[0].weight[(0, 0)];
        enc.step(&g).unwrap();
        let w1 = enc.layers()[0].weight[(0, 0)];
        enc.step(&g).unwrap();
        let w2 = enc.layers()[0].weight[(0, 0)];
        let ratio = (w2 - w1) / (w1 - w0);
        assert!((ratio - 1.9).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn non_finite_gradient_is_training_error() {
        let mut enc = EncoderParams::from_layers(vec![identity_layer(1, Activation::Identity)], 0.1, 0.0).unwrap();
        let before = enc.clone();
        let g = vec![LayerGrad {
            weight: Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap(),
            bias: vec![0.0],
        }];
        assert!(matches!(enc.step(&g), Err(Error::Training(_))));
        assert_eq!(enc, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = EncoderParams::init(&[5, 3, 2], &[Activation::Relu, Activation::Tanh], 9).unwrap();
        let back = EncoderParams::from_bytes(&enc.to_bytes()).unwrap();
        assert_eq!(back.layers(), enc.layers());
        let mut truncated = enc.to_bytes();
        truncated.pop();
        assert!(EncoderParams::from_bytes(&truncated).is_err());
    }
}
