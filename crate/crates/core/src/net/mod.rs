//! Ranking-based full-reference quality network.
//!
//! One siamese branch scores a `(reference, distorted)` patch pair: its input
//! is the channel concatenation of `R − D` and `D`, followed by conv blocks
//! (conv, leaky-ReLU, 2× average downsampling), global average pooling and a
//! dense score head with a single output. Two branch evaluations give the
//! preference probability `p = sigmoid(s1 − s2)`.

mod accounting;
pub mod checkpoint;

pub use accounting::{count_flops, count_params, layer_flops};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{check_leaves, sigmoid, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Geometry, Patch};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "none",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "leaky" => Ok(Activation::LeakyRelu),
            other => Err(Error::data(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
    /// 2×2 average downsampling after the activation (conv layers only).
    pub downsample: bool,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv2d { kernel, .. } => {
                vec![self.out_channels, self.in_channels, kernel, kernel]
            }
            LayerKind::Dense => vec![self.out_channels, self.in_channels],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. })
    }
}

/// Ordered layer chain plus the patch geometry one branch consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Geometry of a single reference or distorted patch.
    pub patch: Geometry,
    pub layers: Vec<LayerSpec>,
}

/// Spatial extent of a conv layer's output before and after downsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvExtent {
    pub out_height: usize,
    pub out_width: usize,
    pub pooled_height: usize,
    pub pooled_width: usize,
}

impl NetworkSpec {
    /// Channels entering the first layer: `R − D` stacked on `D`.
    pub fn input_channels(&self) -> usize {
        2 * self.patch.channels
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Output extents for every conv layer (None for dense layers).
    pub fn conv_extents(&self) -> Result<Vec<Option<ConvExtent>>> {
        let (mut h, mut w) = (self.patch.height, self.patch.width);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                } => {
                    if stride == 0 || kernel == 0 {
                        return Err(Error::config(format!(
                            "layer {}: kernel and stride must be positive",
                            layer.name
                        )));
                    }
                    if kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(Error::config(format!(
                            "layer {}: kernel {kernel} larger than padded input {}x{}",
                            layer.name,
                            h + 2 * padding,
                            w + 2 * padding
                        )));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    let (ph, pw) = if layer.downsample {
                        if oh < 2 || ow < 2 {
                            return Err(Error::config(format!(
                                "layer {}: {oh}x{ow} map too small to downsample",
                                layer.name
                            )));
                        }
                        (oh / 2, ow / 2)
                    } else {
                        (oh, ow)
                    };
                    out.push(Some(ConvExtent {
                        out_height: oh,
                        out_width: ow,
                        pooled_height: ph,
                        pooled_width: pw,
                    }));
                    h = ph;
                    w = pw;
                }
                LayerKind::Dense => out.push(None),
            }
        }
        Ok(out)
    }

    /// Features entering the first dense layer.
    fn dense_input_features(&self, idx: usize) -> usize {
        match self.layers[..idx].last() {
            Some(prev) => prev.out_channels,
            // Dense-only network: flattened input.
            None => self.input_channels() * self.patch.height * self.patch.width,
        }
    }

    /// Every structural problem with the chain; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.patch.is_empty() {
            v.push(format!("degenerate patch geometry {}", self.patch));
        }
        if self.layers.is_empty() {
            v.push("network has no layers".into());
            return v;
        }
        let mut seen_dense = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_channels == 0 || layer.out_channels == 0 {
                v.push(format!("layer {} has a zero channel count", layer.name));
            }
            if self.layers[..i].iter().any(|l| l.name == layer.name) {
                v.push(format!("duplicate layer name {}", layer.name));
            }
            match layer.kind {
                LayerKind::Conv2d { .. } if seen_dense => {
                    v.push(format!("conv layer {} follows a dense layer", layer.name));
                }
                LayerKind::Conv2d { .. } => {}
                LayerKind::Dense => {
                    if layer.downsample {
                        v.push(format!("dense layer {} cannot downsample", layer.name));
                    }
                    seen_dense = true;
                }
            }
            let expected = if i == 0 {
                if layer.is_conv() {
                    self.input_channels()
                } else {
                    self.dense_input_features(0)
                }
            } else {
                self.layers[i - 1].out_channels
            };
            if layer.in_channels != expected {
                let producer = if i == 0 {
                    "network input".to_string()
                } else {
                    format!("layer {}", self.layers[i - 1].name)
                };
                v.push(format!(
                    "layer {} expects {} input channels but {producer} provides {expected}",
                    layer.name, layer.in_channels
                ));
            }
        }
        let last = self.layers.last().expect("non-empty");
        if last.is_conv() || last.out_channels != 1 || last.activation != Activation::Identity {
            v.push(format!(
                "layer {} is not a single linear scalar score head",
                last.name
            ));
        }
        if let Err(e) = self.conv_extents() {
            v.push(e.to_string());
        }
        v
    }

    pub fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Structure(v.join("; ")))
        }
    }
}

/// Weight and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All trainable tensors of a network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    layers: Vec<LayerParams<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new(layers: Vec<LayerParams<T>>) -> Self {
        ParameterSet { layers }
    }

    /// Zero-initialized parameters shaped for `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParameterSet {
            layers: spec
                .layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    weight: Tensor::zeros(l.weight_shape()),
                    bias: Tensor::zeros(vec![l.out_channels]),
                })
                .collect(),
        }
    }

    /// Uniform `±sqrt(6/(fan_in+fan_out))` weights, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let receptive = match l.kind {
                    LayerKind::Conv2d { kernel, .. } => kernel * kernel,
                    LayerKind::Dense => 1,
                };
                let fan_in = l.in_channels * receptive;
                let fan_out = l.out_channels * receptive;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..l.weight_len())
                    .map(|_| T::lit(rng.random_range(-bound..bound)))
                    .collect();
                LayerParams {
                    name: l.name.clone(),
                    weight: Tensor::new(l.weight_shape(), data).expect("shape from spec"),
                    bias: Tensor::zeros(vec![l.out_channels]),
                }
            })
            .collect();
        ParameterSet { layers }
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// Flat tensor list: weight, bias per layer.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Inverse of [`ParameterSet::tensors`].
    pub fn from_tensors(template: &ParameterSet<T>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != 2 * template.layers.len() {
            return Err(Error::shape("tensor list does not match parameter layout"));
        }
        let mut it = tensors.into_iter();
        let layers = template
            .layers
            .iter()
            .map(|l| {
                let weight = it.next().expect("counted");
                let bias = it.next().expect("counted");
                if weight.shape() != l.weight.shape() || bias.shape() != l.bias.shape() {
                    return Err(Error::shape(format!("layer {} reshaped", l.name)));
                }
                Ok(LayerParams {
                    name: l.name.clone(),
                    weight,
                    bias,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParameterSet { layers })
    }

    /// ℓ1 norm of the weights (biases are not penalized).
    pub fn weight_l1(&self) -> f64 {
        self.layers.iter().map(|l| l.weight.l1_norm()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// SHA-256 over the little-endian bytes of every tensor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update(l.name.as_bytes());
            for t in [&l.weight, &l.bias] {
                for v in t.data() {
                    h.update(v.as_f64().to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    /// Checks one entry per spec layer with matching shapes.
    pub fn check_against(&self, spec: &NetworkSpec) -> Vec<String> {
        let mut v = Vec::new();
        if self.layers.len() != spec.layers.len() {
            v.push(format!(
                "{} parameter entries for {} layers",
                self.layers.len(),
                spec.layers.len()
            ));
        }
        for (l, p) in spec.layers.iter().zip(&self.layers) {
            if l.name != p.name {
                v.push(format!("parameter entry {} where layer {} expected", p.name, l.name));
            }
            if p.weight.shape() != l.weight_shape().as_slice() {
                v.push(format!(
                    "layer {} weight shape {:?}, spec needs {:?}",
                    l.name,
                    p.weight.shape(),
                    l.weight_shape()
                ));
            }
            if p.bias.shape() != [l.out_channels] {
                v.push(format!(
                    "layer {} bias shape {:?}, spec needs [{}]",
                    l.name,
                    p.bias.shape(),
                    l.out_channels
                ));
            }
        }
        v
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Teacher topology knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityNetConfig {
    /// Geometry of a single frame patch.
    pub patch: Geometry,
    /// Frames stacked into channels (1 = single-frame patches).
    pub frames: usize,
    pub conv_widths: Vec<usize>,
    pub head_width: usize,
    pub kernel: usize,
    pub width_multiplier: f64,
    pub seed: u64,
}

impl Default for QualityNetConfig {
    fn default() -> Self {
        QualityNetConfig {
            patch: Geometry::new(1, 64, 64),
            frames: 1,
            conv_widths: vec![32, 64, 128],
            head_width: 64,
            kernel: 3,
            width_multiplier: 1.0,
            seed: 0,
        }
    }
}

impl QualityNetConfig {
    pub fn spec(&self) -> Result<NetworkSpec> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::config(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.frames == 0 {
            return Err(Error::config("frames must be at least 1"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel must be odd, got {}", self.kernel)));
        }
        let scaled = |w: usize| ((w as f64 * self.width_multiplier).round() as usize).max(1);
        let patch = Geometry::new(
            self.patch.channels * self.frames,
            self.patch.height,
            self.patch.width,
        );
        if patch.is_empty() {
            return Err(Error::config(format!("degenerate patch geometry {patch}")));
        }
        let mut layers = Vec::new();
        let mut in_ch = 2 * patch.channels;
        for (i, &w) in self.conv_widths.iter().enumerate() {
            let out = scaled(w);
            layers.push(LayerSpec {
                name: format!("conv{}", i + 1),
                kind: LayerKind::Conv2d {
                    kernel: self.kernel,
                    stride: 1,
                    padding: self.kernel / 2,
                },
                in_channels: in_ch,
                out_channels: out,
                activation: Activation::LeakyRelu,
                downsample: true,
            });
            in_ch = out;
        }
        if layers.is_empty() {
            in_ch *= patch.height * patch.width;
        }
        let head = scaled(self.head_width);
        layers.push(LayerSpec {
            name: "fc1".into(),
            kind: LayerKind::Dense,
            in_channels: in_ch,
            out_channels: head,
            activation: Activation::LeakyRelu,
            downsample: false,
        });
        layers.push(LayerSpec {
            name: "score".into(),
            kind: LayerKind::Dense,
            in_channels: head,
            out_channels: 1,
            activation: Activation::Identity,
            downsample: false,
        });
        let spec = NetworkSpec { patch, layers };
        spec.conv_extents()?;
        spec.check().map_err(|e| Error::config(e.to_string()))?;
        Ok(spec)
    }
}

/// Builds the teacher spec and its seeded initial parameters.
pub fn build_teacher<T: Real>(config: &QualityNetConfig) -> Result<(NetworkSpec, ParameterSet<T>)> {
    let spec = config.spec()?;
    let params = ParameterSet::init(&spec, config.seed);
    Ok((spec, params))
}

/// Tape handles of a [`ParameterSet`] in layer order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(Var, Var)>,
}

impl BoundParams {
    /// Places parameters on the tape; `trainable = false` binds them as constants.
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ParameterSet<T>, trainable: bool) -> Self {
        let vars = params
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone(), trainable),
                    tape.leaf(l.bias.clone(), trainable),
                )
            })
            .collect();
        BoundParams { vars }
    }

    pub fn from_vars(vars: Vec<(Var, Var)>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[(Var, Var)] {
        &self.vars
    }

    /// Gradients after [`Tape::backward`], in [`ParameterSet::tensors`] order.
    /// Unreached parameters get zero gradients.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .map(|v| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
            })
            .collect()
    }
}

/// Finite-difference check of `loss` with respect to every tensor in
/// `params`, on up to `coords_per_tensor` random coordinates each.
pub fn gradient_check<F>(
    params: &ParameterSet<f64>,
    coords_per_tensor: usize,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    let leaves: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    check_leaves(&leaves, coords_per_tensor, seed, |tape, vars| {
        let bound = BoundParams::from_vars(vars.chunks(2).map(|c| (c[0], c[1])).collect());
        loss(tape, &bound)
    })
}

/// `[N,C,H,W]` tensor from same-geometry patches.
pub fn patches_tensor<T: Real>(patches: &[&Patch]) -> Result<Tensor<T>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::shape("empty patch batch"))?
        .geometry();
    let mut data = Vec::with_capacity(first.len() * patches.len());
    for p in patches {
        if p.geometry() != first {
            return Err(Error::shape(format!(
                "patch {} in a batch of {first}",
                p.geometry()
            )));
        }
        data.extend(p.data().iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(
        vec![patches.len(), first.channels, first.height, first.width],
        data,
    )
}

/// Scores `[N,C,H,W]` reference/distorted batches; returns `[N,1]`.
pub fn branch_scores<T: Real>(
    tape: &mut Tape<T>,
    spec: &NetworkSpec,
    params: &BoundParams,
    refs: Var,
    dists: Var,
) -> Result<Var> {
    if params.vars.len() != spec.layers.len() {
        return Err(Error::Structure(format!(
            "{} bound layers for a {}-layer spec",
            params.vars.len(),
            spec.layers.len()
        )));
    }
    let rs = tape.shape(refs);
    let expected = [spec.patch.channels, spec.patch.height, spec.patch.width];
    if rs.len() != 4 || rs[1..] != expected {
        return Err(Error::shape(format!(
            "branch input {rs:?} does not match patch geometry {}",
            spec.patch
        )));
    }
    let batch = rs[0];
    let diff = tape.sub(refs, dists)?;
    let mut x = tape.concat_channels(diff, dists)?;
    let slope = T::lit(LEAKY_SLOPE);
    let mut spatial = true;
    for (layer, &(w, b)) in spec.layers.iter().zip(&params.vars) {
        x = match layer.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => tape.conv2d(x, w, b, stride, padding)?,
            LayerKind::Dense => {
                if spatial {
                    x = if spec.layers[0].is_conv() {
                        tape.global_avg_pool(x)?
                    } else {
                        let flat = tape.value(x).len() / batch;
                        tape.reshape(x, vec![batch, flat])?
                    };
                    spatial = false;
                }
                tape.dense(x, w, b)?
            }
        };
        x = match layer.activation {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, slope),
        };
        if layer.downsample {
            x = tape.avg_pool2(x)?;
        }
    }
    Ok(x)
}

fn check_geometry(spec: &NetworkSpec, p: &Patch) -> Result<()> {
    if p.geometry() != spec.patch {
        return Err(Error::shape(format!(
            "patch {} does not match network geometry {}",
            p.geometry(),
            spec.patch
        )));
    }
    Ok(())
}

const SCORE_CHUNK: usize = 256;

/// Batched `quality_score` over aligned reference/distorted lists.
pub fn score_patches<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    refs: &[&Patch],
    dists: &[&Patch],
) -> Result<Vec<f64>> {
    if refs.len() != dists.len() {
        return Err(Error::shape(format!(
            "{} references for {} distorted patches",
            refs.len(),
            dists.len()
        )));
    }
    for p in refs.iter().chain(dists) {
        check_geometry(spec, p)?;
    }
    let mut scores = Vec::with_capacity(refs.len());
    for (rc, dc) in refs.chunks(SCORE_CHUNK).zip(dists.chunks(SCORE_CHUNK)) {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let r = tape.constant(patches_tensor(rc)?);
        let d = tape.constant(patches_tensor(dc)?);
        let s = branch_scores(&mut tape, spec, &bound, r, d)?;
        scores.extend(tape.value(s).data().iter().map(|v| v.as_f64()));
    }
    Ok(scores)
}

/// Predicted quality of `distorted` relative to `reference`; higher is better.
pub fn quality_score<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    reference: &Patch,
    distorted: &Patch,
) -> Result<f64> {
    Ok(score_patches(spec, params, &[reference], &[distorted])?[0])
}

/// Probability that the first pair has the higher quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferencePrediction {
    pub p: f64,
    pub s1: f64,
    pub s2: f64,
}

impl PreferencePrediction {
    pub fn from_scores(s1: f64, s2: f64) -> Self {
        PreferencePrediction {
            p: sigmoid(s1 - s2),
            s1,
            s2,
        }
    }
}

pub fn forward_pair<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    r1: &Patch,
    d1: &Patch,
    r2: &Patch,
    d2: &Patch,
) -> Result<PreferencePrediction> {
    for p in [r1, d1, r2, d2] {
        check_geometry(spec, p)?;
    }
    let s1 = quality_score(spec, params, r1, d1)?;
    let s2 = quality_score(spec, params, r2, d2)?;
    Ok(PreferencePrediction::from_scores(s1, s2))
}

/// Tape outputs of a batched pair forward.
#[derive(Debug, Clone, Copy)]
pub struct PairForward {
    /// `[B,1]` first-pair scores.
    pub s1: Var,
    /// `[B,1]` second-pair scores.
    pub s2: Var,
    /// `[B,1]` preference probabilities.
    pub p: Var,
}

/// Siamese forward of `B` instances with both pairs in one batch of `2B`.
pub fn pair_forward<T: Real>(
    tape: &mut Tape<T>,
    spec: &NetworkSpec,
    params: &BoundParams,
    r1: &[&Patch],
    d1: &[&Patch],
    r2: &[&Patch],
    d2: &[&Patch],
) -> Result<PairForward> {
    let b = r1.len();
    if b == 0 || d1.len() != b || r2.len() != b || d2.len() != b {
        return Err(Error::shape("pair batch lists must share a positive length"));
    }
    let refs: Vec<&Patch> = r1.iter().chain(r2).copied().collect();
    let dists: Vec<&Patch> = d1.iter().chain(d2).copied().collect();
    for p in refs.iter().chain(&dists) {
        check_geometry(spec, p)?;
    }
    let r = tape.constant(patches_tensor(&refs)?);
    let d = tape.constant(patches_tensor(&dists)?);
    let scores = branch_scores(tape, spec, params, r, d)?;
    let s1 = tape.slice_rows(scores, 0, b)?;
    let s2 = tape.slice_rows(scores, b, b)?;
    let diff = tape.sub(s1, s2)?;
    let p = tape.sigmoid(diff);
    Ok(PairForward { s1, s2, p })
}

/// Grid sampler for co-located patches in a frame sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSampler {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Consecutive frames stacked into one patch.
    pub frames: usize,
}

impl PatchSampler {
    /// Non-overlapping tiling for `spec`'s patch size.
    pub fn tiling(spec: &NetworkSpec, frames: usize) -> Self {
        PatchSampler {
            height: spec.patch.height,
            width: spec.patch.width,
            stride: spec.patch.height.min(spec.patch.width),
            frames: frames.max(1),
        }
    }

    /// Co-located `(reference, distorted)` patch pairs.
    pub fn sample(&self, refs: &[Patch], dists: &[Patch]) -> Result<Vec<(Patch, Patch)>> {
        if refs.len() != dists.len() {
            return Err(Error::shape("reference and distorted sequences differ in length"));
        }
        if self.stride == 0 || self.frames == 0 {
            return Err(Error::config("sampler stride and frames must be positive"));
        }
        let mut out = Vec::new();
        let windows = refs.len() / self.frames;
        for t in 0..windows {
            let rf = &refs[t * self.frames..(t + 1) * self.frames];
            let df = &dists[t * self.frames..(t + 1) * self.frames];
            let g = rf[0].geometry();
            for f in rf.iter().chain(df) {
                if f.geometry() != g {
                    return Err(Error::shape("frames in a sequence differ in geometry"));
                }
            }
            if g.height < self.height || g.width < self.width {
                continue;
            }
            let mut top = 0;
            while top + self.height <= g.height {
                let mut left = 0;
                while left + self.width <= g.width {
                    let crop = |frames: &[Patch]| -> Result<Patch> {
                        let parts = frames
                            .iter()
                            .map(|f| f.crop(top, left, self.height, self.width))
                            .collect::<Result<Vec<_>>>()?;
                        Patch::stack(&parts.iter().collect::<Vec<_>>())
                    };
                    out.push((crop(rf)?, crop(df)?));
                    left += self.stride;
                }
                top += self.stride;
            }
        }
        Ok(out)
    }
}

/// Mean patch score over sampled co-located patches.
pub fn sequence_quality<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    refs: &[Patch],
    dists: &[Patch],
    sampler: &PatchSampler,
) -> Result<f64> {
    let pairs = sampler.sample(refs, dists)?;
    if pairs.is_empty() {
        return Err(Error::data("sequence yields no patches"));
    }
    let r: Vec<&Patch> = pairs.iter().map(|(r, _)| r).collect();
    let d: Vec<&Patch> = pairs.iter().map(|(_, d)| d).collect();
    let scores = score_patches(spec, params, &r, &d)?;
    Ok(mean(&scores))
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> QualityNetConfig {
        QualityNetConfig {
            patch: Geometry::new(1, 8, 8),
            conv_widths: vec![4, 6],
            head_width: 5,
            seed: 3,
            ..Default::default()
        }
    }

    fn random_patch(g: Geometry, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch::new(g, (0..g.len()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn zero_multiplier_is_rejected() {
        let cfg = QualityNetConfig {
            width_multiplier: 0.0,
            ..Default::default()
        };
        assert!(matches!(build_teacher::<f32>(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_larger_than_patch_is_rejected() {
        let cfg = QualityNetConfig {
            patch: Geometry::new(1, 2, 2),
            kernel: 7,
            ..Default::default()
        };
        assert!(matches!(cfg.spec(), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_builds_match() {
        let (_, a) = build_teacher::<f32>(&small_config()).unwrap();
        let (_, b) = build_teacher::<f32>(&small_config()).unwrap();
        assert_eq!(a, b);
        let (_, c) = build_teacher::<f32>(&QualityNetConfig {
            seed: 4,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identical_pairs_give_half() {
        let (spec, params) = build_teacher::<f32>(&small_config()).unwrap();
        let r = random_patch(spec.patch, 1);
        let d = random_patch(spec.patch, 2);
        let pred = forward_pair(&spec, &params, &r, &d, &r, &d).unwrap();
        assert_eq!(pred.p, 0.5);
    }

    #[test]
    fn geometry_mismatch_is_shape_error() {
        let (spec, params) = build_teacher::<f32>(&small_config()).unwrap();
        let r = random_patch(Geometry::new(1, 8, 9), 1);
        assert!(matches!(
            quality_score(&spec, &params, &r, &r),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sampler_tiles_frames() {
        let frame = random_patch(Geometry::new(1, 16, 16), 9);
        let sampler = PatchSampler {
            height: 8,
            width: 8,
            stride: 8,
            frames: 1,
        };
        let pairs = sampler.sample(std::slice::from_ref(&frame), std::slice::from_ref(&frame)).unwrap();
        assert_eq!(pairs.len(), 4);
        let stacked = PatchSampler {
            frames: 2,
            ..sampler
        };
        let f = random_patch(Geometry::new(1, 8, 8), 1);
        let pairs = stacked
            .sample(&[f.clone(), f.clone()], &[f.clone(), f])
            .unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0.geometry(), Geometry::new(2, 8, 8));
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let (spec, params) = build_teacher::<f32>(&small_config()).unwrap();
        let sampler = PatchSampler::tiling(&spec, 1);
        assert!(sequence_quality(&spec, &params, &[], &[], &sampler).is_err());
    }

    #[test]
    fn violations_name_both_layers() {
        let (mut spec, _) = build_teacher::<f32>(&small_config()).unwrap();
        spec.layers[1].in_channels = 5;
        let v = spec.violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("conv2") && v[0].contains("conv1"), "{v:?}");
    }
}
