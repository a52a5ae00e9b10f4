//! The warm-start network: a small fully-convolutional trunk feeding two
//! branches whose outputs meet in a subtractive-ReLU sigmoid head
//! `sigma(relu(d) - relu(u))`. The net is trained with Adam on a
//! Laplace-weighted squared error against scaled membrane states, with
//! gradients derived by hand through the sigmoid, ReLU gates, and the
//! convolution adjoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::storage;
use crate::tensor::{correlate, kernel_grad, transposed_convolve, ConvGeometry, Tensor4};

/// Affine map between raw membrane states and the `[0, 1]` training range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub t_min: f64,
    pub t_max: f64,
}

impl ScaleRange {
    pub fn identity() -> Self {
        ScaleRange { t_min: 0.0, t_max: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > self.t_min) {
            return Err(Error::Config(format!(
                "degenerate scaling: t_max {} <= t_min {}",
                self.t_max, self.t_min
            )));
        }
        Ok(())
    }

    /// Global min/max over a set of state tensors.
    pub fn from_states<'a>(states: impl IntoIterator<Item = &'a Tensor4>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in states {
            let (a, b) = s.min_max();
            lo = lo.min(a);
            hi = hi.max(b);
        }
        let range = ScaleRange { t_min: lo, t_max: hi };
        range.validate()?;
        Ok(range)
    }
}

/// `(states - t_min) / (t_max - t_min)`.
pub fn scale_targets(states: &Tensor4, scaling: &ScaleRange) -> Result<Tensor4> {
    scaling.validate()?;
    let span = scaling.t_max - scaling.t_min;
    Ok(states.map(|v| (v - scaling.t_min) / span))
}

/// Exact inverse of [`scale_targets`].
pub fn descale(scaled: &Tensor4, scaling: &ScaleRange) -> Result<Tensor4> {
    scaling.validate()?;
    let span = scaling.t_max - scaling.t_min;
    Ok(scaled.map(|v| scaling.t_min + v * span))
}

/// One convolution layer (Same padding).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// `[out_channels, in_channels, k, k]`.
    pub weights: Tensor4,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub relu: bool,
}

impl ConvLayer {
    fn zeros(spec: &LayerSpec) -> Self {
        ConvLayer {
            weights: Tensor4::zeros([spec.out_ch, spec.in_ch, spec.kernel, spec.kernel]),
            bias: vec![0.0; spec.out_ch],
            stride: spec.stride,
            relu: spec.relu,
        }
    }

    fn geom(&self) -> ConvGeometry {
        let [_, _, kh, kw] = self.weights.dims();
        ConvGeometry::same(kh, kw, self.stride, self.stride).expect("layer geometry")
    }

    fn spec(&self) -> LayerSpec {
        let [out_ch, in_ch, kernel, _] = self.weights.dims();
        LayerSpec {
            in_ch,
            out_ch,
            kernel,
            stride: self.stride,
            relu: self.relu,
        }
    }

    fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut out = correlate(input, &self.weights, &self.geom())?;
        let [b, m, h, w] = out.dims();
        let plane = h * w;
        let data = out.data_mut();
        for bi in 0..b {
            for c in 0..m {
                let base = (bi * m + c) * plane;
                for v in &mut data[base..base + plane] {
                    *v += self.bias[c];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

/// Layer stack description; both branches share `branch`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub trunk: Vec<LayerSpec>,
    pub branch: Vec<LayerSpec>,
}

impl ArchSpec {
    fn layer(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, relu: bool) -> LayerSpec {
        LayerSpec { in_ch, out_ch, kernel, stride, relu }
    }

    /// Default preset: three 3x3 trunk layers at 64 channels, branches
    /// 64 -> 32 -> features with the code-space stride on the last layer.
    pub fn small(input_channels: usize, features: usize, stride: usize) -> Self {
        ArchSpec {
            trunk: vec![
                Self::layer(input_channels, 64, 3, 1, true),
                Self::layer(64, 64, 3, 1, true),
                Self::layer(64, 64, 3, 1, true),
            ],
            branch: vec![
                Self::layer(64, 32, 3, 1, true),
                Self::layer(32, features, 3, stride, false),
            ],
        }
    }

    /// Two trunk layers at 64 channels.
    pub fn small3(input_channels: usize, features: usize, stride: usize) -> Self {
        ArchSpec {
            trunk: vec![
                Self::layer(input_channels, 64, 3, 1, true),
                Self::layer(64, 64, 3, 1, true),
            ],
            branch: vec![
                Self::layer(64, 32, 3, 1, true),
                Self::layer(32, features, 3, stride, false),
            ],
        }
    }

    /// Two trunk layers at 32 channels; the smallest preset that still
    /// learns useful states at desk scale.
    pub fn small4(input_channels: usize, features: usize, stride: usize) -> Self {
        ArchSpec {
            trunk: vec![
                Self::layer(input_channels, 32, 3, 1, true),
                Self::layer(32, 32, 3, 1, true),
            ],
            branch: vec![
                Self::layer(32, 16, 3, 1, true),
                Self::layer(16, features, 3, stride, false),
            ],
        }
    }

    pub fn by_name(name: &str, input_channels: usize, features: usize, stride: usize) -> Result<Self> {
        match name {
            "small" => Ok(Self::small(input_channels, features, stride)),
            "small3" => Ok(Self::small3(input_channels, features, stride)),
            "small4" => Ok(Self::small4(input_channels, features, stride)),
            other => Err(Error::Config(format!(
                "unknown architecture preset '{other}' (small, small3, small4)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() || self.branch.is_empty() {
            return Err(Error::Config("architecture needs trunk and branch layers".into()));
        }
        let chain = |layers: &[LayerSpec], mut prev: usize| -> Result<usize> {
            for l in layers {
                if l.in_ch != prev {
                    return Err(Error::Config(format!(
                        "layer expects {} input channels, got {prev}",
                        l.in_ch
                    )));
                }
                if l.kernel == 0 || l.stride == 0 {
                    return Err(Error::Config("kernel and stride must be >= 1".into()));
                }
                prev = l.out_ch;
            }
            Ok(prev)
        };
        let trunk_out = chain(&self.trunk, self.trunk[0].in_ch)?;
        chain(&self.branch, trunk_out)?;
        for l in &self.trunk {
            if l.stride != 1 {
                return Err(Error::Config("trunk layers must keep stride 1".into()));
            }
        }
        for l in &self.branch[..self.branch.len() - 1] {
            if l.stride != 1 {
                return Err(Error::Config("only the last branch layer may stride".into()));
            }
        }
        Ok(())
    }
}

/// Fully-convolutional predictor of scaled membrane states.
#[derive(Debug, Clone)]
pub struct PredictorModel {
    pub trunk: Vec<ConvLayer>,
    pub branch_down: Vec<ConvLayer>,
    pub branch_up: Vec<ConvLayer>,
    pub scaling: ScaleRange,
    /// Image channels plus the constant-lambda channel.
    pub input_channels: usize,
}

impl PredictorModel {
    /// Builds a zero-weight model from an architecture description.
    pub fn from_arch(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        Ok(PredictorModel {
            trunk: arch.trunk.iter().map(ConvLayer::zeros).collect(),
            branch_down: arch.branch.iter().map(ConvLayer::zeros).collect(),
            branch_up: arch.branch.iter().map(ConvLayer::zeros).collect(),
            scaling: ScaleRange::identity(),
            input_channels: arch.trunk[0].in_ch,
        })
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            trunk: self.trunk.iter().map(|l| l.spec()).collect(),
            branch: self.branch_down.iter().map(|l| l.spec()).collect(),
        }
    }

    pub fn features(&self) -> usize {
        self.branch_down.last().map(|l| l.weights.dims()[0]).unwrap_or(0)
    }

    /// The code-space stride of the branch output layer.
    pub fn output_stride(&self) -> usize {
        self.branch_down.last().map(|l| l.stride).unwrap_or(1)
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        self.trunk
            .iter_mut()
            .chain(self.branch_down.iter_mut())
            .chain(self.branch_up.iter_mut())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trunk
            .iter()
            .chain(&self.branch_down)
            .chain(&self.branch_up)
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Writes all weight tensors into one container plus a JSON sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = Vec::new();
        for layer in self.trunk.iter().chain(&self.branch_down).chain(&self.branch_up) {
            tensors.push(layer.weights.clone());
            tensors.push(Tensor4::from_vec(
                [1, 1, 1, layer.bias.len()],
                layer.bias.clone(),
            )?);
        }
        storage::write_tensor_seq(path, &tensors)?;
        let sidecar = ModelSidecar {
            arch: self.arch(),
            scaling: self.scaling,
            input_channels: self.input_channels,
        };
        storage::write_json(path.with_extension("json"), &sidecar)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: ModelSidecar = storage::read_json(path.with_extension("json"))?;
        let mut model = PredictorModel::from_arch(&sidecar.arch)?;
        model.scaling = sidecar.scaling;
        model.input_channels = sidecar.input_channels;
        let tensors = storage::read_tensor_seq(path)?;
        let mut it = tensors.into_iter();
        for layer in model.layers_mut() {
            let weights = it
                .next()
                .ok_or_else(|| Error::Format("model container is missing weight tensors".into()))?;
            if weights.dims() != layer.weights.dims() {
                return Err(Error::Format(format!(
                    "stored weights {:?} do not match architecture {:?}",
                    weights.dims(),
                    layer.weights.dims()
                )));
            }
            let bias = it
                .next()
                .ok_or_else(|| Error::Format("model container is missing bias tensors".into()))?;
            if bias.len() != layer.bias.len() {
                return Err(Error::Format("stored bias length mismatch".into()));
            }
            layer.weights = weights;
            layer.bias = bias.into_vec();
        }
        if it.next().is_some() {
            return Err(Error::Format("model container holds extra tensors".into()));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    arch: ArchSpec,
    scaling: ScaleRange,
    input_channels: usize,
}

/// Re-draws every weight from `N(0, std^2)`, zeroing each with probability
/// `sparsity`; biases are zeroed. Deterministic for a fixed seed.
pub fn sparse_init(
    mut model: PredictorModel,
    sparsity: f64,
    std: f64,
    seed: u64,
) -> Result<PredictorModel> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config("sparsity must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).map_err(|_| Error::Config("std must be finite".into()))?;
    for layer in model.layers_mut() {
        for w in layer.weights.data_mut() {
            *w = normal.sample(&mut rng);
        }
        for w in layer.weights.data_mut() {
            if rng.random::<f64>() <= sparsity {
                *w = 0.0;
            }
        }
        for b in &mut layer.bias {
            *b = 0.0;
        }
    }
    Ok(model)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn append_lambda_channel(image: &Tensor4, lambda: f64) -> Tensor4 {
    let [b, c, h, w] = image.dims();
    let mut out = Tensor4::zeros([b, c + 1, h, w]);
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(bi, ch, y, x) = image.at(bi, ch, y, x);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(bi, c, y, x) = lambda;
            }
        }
    }
    out
}

struct LayerCache {
    input: Tensor4,
    /// Convolution output plus bias, before any ReLU.
    preact: Tensor4,
}

struct ForwardCache {
    trunk: Vec<LayerCache>,
    down: Vec<LayerCache>,
    up: Vec<LayerCache>,
    down_out: Tensor4,
    up_out: Tensor4,
    out: Tensor4,
}

fn run_stack(layers: &[ConvLayer], input: &Tensor4, caches: &mut Vec<LayerCache>) -> Result<Tensor4> {
    let mut z = input.clone();
    for layer in layers {
        let preact = layer.forward(&z)?;
        let activated = if layer.relu {
            preact.map(|v| v.max(0.0))
        } else {
            preact.clone()
        };
        caches.push(LayerCache { input: z, preact });
        z = activated;
    }
    Ok(z)
}

fn forward_cached(model: &PredictorModel, image: &Tensor4, lambda: f64) -> Result<ForwardCache> {
    let [_, c, _, _] = image.dims();
    if c + 1 != model.input_channels {
        return Err(Error::shape(
            "predictor_forward",
            format!(
                "image has {c} channels; model expects {} (+1 lambda channel)",
                model.input_channels - 1
            ),
        ));
    }
    let z0 = append_lambda_channel(image, lambda);
    let mut trunk_caches = Vec::with_capacity(model.trunk.len());
    let trunk_out = run_stack(&model.trunk, &z0, &mut trunk_caches)?;
    let mut down_caches = Vec::with_capacity(model.branch_down.len());
    let down_out = run_stack(&model.branch_down, &trunk_out, &mut down_caches)?;
    let mut up_caches = Vec::with_capacity(model.branch_up.len());
    let up_out = run_stack(&model.branch_up, &trunk_out, &mut up_caches)?;
    if down_out.dims() != up_out.dims() {
        return Err(Error::shape(
            "predictor_forward",
            format!("branch dims {:?} vs {:?}", down_out.dims(), up_out.dims()),
        ));
    }
    let out = down_out
        .zip_map(&up_out, |d, u| sigmoid(d.max(0.0) - u.max(0.0)))
        .expect("same dims");
    Ok(ForwardCache {
        trunk: trunk_caches,
        down: down_caches,
        up: up_caches,
        down_out,
        up_out,
        out,
    })
}

/// Runs the network: appends the constant-lambda channel, the trunk, both
/// branches, and the subtractive-ReLU sigmoid head. Output values lie in
/// `(0, 1)` with code-space dims `ceil(H/stride) x ceil(W/stride)`.
pub fn forward(model: &PredictorModel, image: &Tensor4, lambda: f64) -> Result<Tensor4> {
    Ok(forward_cached(model, image, lambda)?.out)
}

/// Laplace-weighted squared error:
/// `(1/N) sum (o - t)^2 / (1 + epsilon + gamma |t|)`.
pub fn laplace_weighted_loss(out: &Tensor4, target: &Tensor4, gamma: f64, epsilon: f64) -> Result<f64> {
    if out.dims() != target.dims() {
        return Err(Error::shape(
            "laplace_weighted_loss",
            format!("dims {:?} vs {:?}", out.dims(), target.dims()),
        ));
    }
    let n = out.len().max(1) as f64;
    Ok(out
        .data()
        .iter()
        .zip(target.data())
        .map(|(&o, &t)| (o - t) * (o - t) / (1.0 + epsilon + gamma * t.abs()))
        .sum::<f64>()
        / n)
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

/// Gradients for every parameter group of the model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub trunk: Vec<LayerGrad>,
    pub branch_down: Vec<LayerGrad>,
    pub branch_up: Vec<LayerGrad>,
}

impl ModelGrads {
    pub fn zeros_like(model: &PredictorModel) -> Self {
        let zero = |layers: &[ConvLayer]| {
            layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Tensor4::zeros(l.weights.dims()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect()
        };
        ModelGrads {
            trunk: zero(&model.trunk),
            branch_down: zero(&model.branch_down),
            branch_up: zero(&model.branch_up),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        let add = |dst: &mut Vec<LayerGrad>, src: &Vec<LayerGrad>| {
            for (d, s) in dst.iter_mut().zip(src) {
                d.weights.add_scaled(&s.weights, 1.0).expect("same dims");
                for (db, sb) in d.bias.iter_mut().zip(&s.bias) {
                    *db += sb;
                }
            }
        };
        add(&mut self.trunk, &other.trunk);
        add(&mut self.branch_down, &other.branch_down);
        add(&mut self.branch_up, &other.branch_up);
    }

    pub fn scale(&mut self, s: f64) {
        for g in self
            .trunk
            .iter_mut()
            .chain(self.branch_down.iter_mut())
            .chain(self.branch_up.iter_mut())
        {
            g.weights.scale(s);
            for b in &mut g.bias {
                *b *= s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.trunk
            .iter()
            .chain(&self.branch_down)
            .chain(&self.branch_up)
            .map(|g| {
                g.weights
                    .max_abs()
                    .max(g.bias.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            })
            .fold(0.0, f64::max)
    }
}

fn relu_gate(grad: &Tensor4, preact: &Tensor4) -> Tensor4 {
    grad.zip_map(preact, |g, p| if p > 0.0 { g } else { 0.0 })
        .expect("same dims")
}

/// Backpropagates `grad` (w.r.t. the stack output) through `layers`,
/// filling `grads` and returning the gradient w.r.t. the stack input.
fn backprop_stack(
    layers: &[ConvLayer],
    caches: &[LayerCache],
    grads: &mut [LayerGrad],
    mut grad: Tensor4,
    need_input_grad: bool,
) -> Result<Tensor4> {
    for idx in (0..layers.len()).rev() {
        let layer = &layers[idx];
        let cache = &caches[idx];
        if layer.relu {
            grad = relu_gate(&grad, &cache.preact);
        }
        // Bias gradient: sum over batch and spatial positions.
        let [b, m, h, w] = grad.dims();
        let plane = h * w;
        for bi in 0..b {
            for c in 0..m {
                let base = (bi * m + c) * plane;
                grads[idx].bias[c] += grad.data()[base..base + plane].iter().sum::<f64>();
            }
        }
        let geom = layer.geom();
        let wgrad = kernel_grad(&cache.input, &grad, &geom, cache.input.dims()[1])?;
        grads[idx].weights.add_scaled(&wgrad, 1.0)?;
        if idx > 0 || need_input_grad {
            let [_, _, ih, iw] = cache.input.dims();
            grad = transposed_convolve(&grad, &layer.weights, &geom, ih, iw)?;
        }
    }
    Ok(grad)
}

/// Loss and exact parameter gradients for one `(image, lambda, target)`
/// sample. The target must already be scaled to `[0, 1]`.
pub fn backward(
    model: &PredictorModel,
    image: &Tensor4,
    lambda: f64,
    target: &Tensor4,
    gamma: f64,
    epsilon: f64,
) -> Result<(f64, ModelGrads)> {
    let cache = forward_cached(model, image, lambda)?;
    let loss = laplace_weighted_loss(&cache.out, target, gamma, epsilon)?;
    let mut grads = ModelGrads::zeros_like(model);

    let n = cache.out.len().max(1) as f64;
    // d(loss)/d(pre-sigmoid): weighted error times sigmoid'.
    let dz = cache
        .out
        .zip_map(target, |o, t| {
            2.0 * (o - t) / (n * (1.0 + epsilon + gamma * t.abs())) * o * (1.0 - o)
        })
        .expect("same dims");
    let d_down = relu_gate(&dz, &cache.down_out);
    let mut d_up = relu_gate(&dz, &cache.up_out);
    d_up.scale(-1.0);

    let g_down = backprop_stack(
        &model.branch_down,
        &cache.down,
        &mut grads.branch_down,
        d_down,
        true,
    )?;
    let g_up = backprop_stack(&model.branch_up, &cache.up, &mut grads.branch_up, d_up, true)?;
    let mut g_trunk = g_down;
    g_trunk.add_scaled(&g_up, 1.0)?;
    backprop_stack(&model.trunk, &cache.trunk, &mut grads.trunk, g_trunk, false)?;
    Ok((loss, grads))
}

/// Predicts a warm-start membrane state: de-scaled network output, shaped
/// like the companion dictionary's code space.
pub fn warm_start(model: &PredictorModel, image: &Tensor4, lambda: f64) -> Result<Tensor4> {
    let out = forward(model, image, lambda)?;
    descale(&out, &model.scaling)
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_gamma_loss")]
    pub gamma_loss: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub seed: u64,
    #[serde(default = "default_init_sparsity")]
    pub init_sparsity: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_gamma_loss() -> f64 {
    3.0
}

fn default_epsilon() -> f64 {
    1e-6
}

fn default_init_sparsity() -> f64 {
    0.9
}

fn default_init_std() -> f64 {
    0.01
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.gamma_loss < 0.0 {
            return Err(Error::Config("gamma_loss must be >= 0".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training sample: normalized image, its sparsity level, and the
/// `[0, 1]`-scaled target states.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor4,
    pub lambda: f64,
    pub target: Tensor4,
}

/// Per-epoch train/validation losses.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

struct Adam {
    m: ModelGrads,
    v: ModelGrads,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &PredictorModel) -> Self {
        Adam {
            m: ModelGrads::zeros_like(model),
            v: ModelGrads::zeros_like(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut PredictorModel, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let groups_g = grads
            .trunk
            .iter()
            .chain(&grads.branch_down)
            .chain(&grads.branch_up);
        let groups_m = self
            .m
            .trunk
            .iter_mut()
            .chain(self.m.branch_down.iter_mut())
            .chain(self.m.branch_up.iter_mut());
        let groups_v = self
            .v
            .trunk
            .iter_mut()
            .chain(self.v.branch_down.iter_mut())
            .chain(self.v.branch_up.iter_mut());
        let mut params: Vec<&mut ConvLayer> = model
            .trunk
            .iter_mut()
            .chain(model.branch_down.iter_mut())
            .chain(model.branch_up.iter_mut())
            .collect();
        for (((g, m), v), layer) in groups_g.zip(groups_m).zip(groups_v).zip(params.iter_mut()) {
            let wd = layer.weights.data_mut();
            let gd = g.weights.data();
            let md = m.weights.data_mut();
            let vd = v.weights.data_mut();
            for i in 0..wd.len() {
                md[i] = Self::BETA1 * md[i] + (1.0 - Self::BETA1) * gd[i];
                vd[i] = Self::BETA2 * vd[i] + (1.0 - Self::BETA2) * gd[i] * gd[i];
                wd[i] -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + Self::EPS);
            }
            for i in 0..layer.bias.len() {
                m.bias[i] = Self::BETA1 * m.bias[i] + (1.0 - Self::BETA1) * g.bias[i];
                v.bias[i] = Self::BETA2 * v.bias[i] + (1.0 - Self::BETA2) * g.bias[i] * g.bias[i];
                layer.bias[i] -= lr * (m.bias[i] / bc1) / ((v.bias[i] / bc2).sqrt() + Self::EPS);
            }
        }
    }
}

fn mean_loss(model: &PredictorModel, samples: &[&TrainSample], gamma: f64, epsilon: f64) -> Result<f64> {
    let losses: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let out = forward(model, &s.image, s.lambda)?;
            laplace_weighted_loss(&out, &s.target, gamma, epsilon)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains with Adam on the Laplace-weighted loss.
///
/// The model is sparse-initialized from `config`, 1% of the data (at least
/// one sample when the dataset has two or more) is held out for validation,
/// and the parameters with the best validation loss are returned. Per-batch
/// sample gradients are computed in parallel and reduced in sample order, so
/// runs are deterministic for a fixed seed regardless of thread count.
pub fn train_predictor(
    model: PredictorModel,
    dataset: &[TrainSample],
    config: &TrainConfig,
) -> Result<(PredictorModel, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut model = sparse_init(model, config.init_sparsity, config.init_std, config.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7ea1);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    shuffle(&mut indices, &mut rng);
    let val_count = if dataset.len() >= 2 {
        ((dataset.len() as f64 * 0.01).round() as usize).clamp(1, dataset.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = indices.split_at(val_count);
    let val: Vec<&TrainSample> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let mut train: Vec<usize> = train_idx.to_vec();

    let mut adam = Adam::new(&model);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, PredictorModel)> = None;

    for epoch in 0..config.epochs {
        shuffle(&mut train, &mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_no, batch) in train.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<(f64, ModelGrads)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &dataset[i];
                    backward(&model, &s.image, s.lambda, &s.target, config.gamma_loss, config.epsilon)
                })
                .collect();
            let mut grads = ModelGrads::zeros_like(&model);
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        op: "train_predictor",
                        iteration: epoch * 1_000_000 + batch_no,
                    });
                }
                batch_loss += loss;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model, &grads, config.lr);
            epoch_loss += batch_loss;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            mean_loss(&model, &val, config.gamma_loss, config.epsilon)?
        };
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            history.best_epoch = epoch;
        }
    }
    let final_model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((final_model, history))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
