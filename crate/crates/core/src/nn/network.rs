//! Multi-scale residual up-sampling segmentation network.
//!
//! The encoder runs `levels` down-sampling steps. Each step is a "same"
//! convolution with ReLU followed by a stride-2 3³ convolution with ReLU;
//! channel count doubles per level. The encoder feature at every level `ℓ`
//! (including the full-resolution one) is then up-sampled on its own branch
//! back to full resolution through `ℓ` transposed convolutions, each followed
//! by a residual block `t + relu(conv(t))`. Every branch ends in a 1³
//! convolution and a softmax, and the `levels + 1` probability maps are
//! averaged into the final segmentation.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    conv_down, conv_down_backward, conv_point, conv_point_backward, conv_same, conv_same_backward, conv_up,
    conv_up_backward, relu_backward_in_place, relu_in_place, softmax, Tensor,
};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ProbMap, Volume, DEFAULT_CLASSES};
use crate::weighting::WeightMap;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Number of stride-2 down-sampling steps.
    pub levels: usize,
    pub base_channels: usize,
    /// Kernel edge of the stride-1 convolutions (odd).
    pub kernel_size: usize,
    pub classes: usize,
    /// Edge length of the cubic training patch.
    pub patch_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            kernel_size: 3,
            classes: DEFAULT_CLASSES,
            patch_size: 32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        self.check_extent(self.patch_size)
    }

    /// Extents a network with this config can process: multiples of `2^levels`.
    pub fn alignment(&self) -> usize {
        1 << self.levels
    }

    pub fn check_extent(&self, extent: usize) -> Result<()> {
        let a = self.alignment();
        if extent == 0 || !extent.is_multiple_of(a) {
            return Err(Error::Config(format!(
                "extent {extent} is not a positive multiple of 2^{} = {a}",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Stride-1 convolution with "same" zero padding.
    Same { kernel: usize },
    /// 3³ convolution with stride 2.
    Down,
    /// 2³ transposed convolution with stride 2.
    Up,
    /// 1³ convolution.
    Point,
}

impl LayerKind {
    pub fn weight_len(self, cin: usize, cout: usize) -> usize {
        cin * cout
            * match self {
                LayerKind::Same { kernel } => kernel * kernel * kernel,
                LayerKind::Down => 27,
                LayerKind::Up => 8,
                LayerKind::Point => 1,
            }
    }

    fn fan_in(self, cin: usize) -> usize {
        self.weight_len(cin, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub id: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        match self.kind {
            LayerKind::Same { kernel } => conv_same(input, &self.weight, &self.bias, self.cout, kernel),
            LayerKind::Down => conv_down(input, &self.weight, &self.bias, self.cout),
            LayerKind::Up => conv_up(input, &self.weight, &self.bias, self.cout),
            LayerKind::Point => conv_point(input, &self.weight, &self.bias, self.cout),
        }
    }

    fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grad: &mut LayerGrad<T>,
        want_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (gw, gb) = (&mut grad.weight, &mut grad.bias);
        match self.kind {
            LayerKind::Same { kernel } => {
                conv_same_backward(input, grad_out, &self.weight, kernel, gw, gb, want_input_grad)
            }
            LayerKind::Down => conv_down_backward(input, grad_out, &self.weight, gw, gb, want_input_grad),
            LayerKind::Up => Some(conv_up_backward(input, grad_out, &self.weight, gw, gb)),
            LayerKind::Point => Some(conv_point_backward(input, grad_out, &self.weight, gw, gb)),
        }
    }
}

/// Layer positions within [`NetworkParams::layers`].
#[derive(Clone, Debug, PartialEq)]
struct Topology {
    enc_conv: Vec<usize>,
    enc_down: Vec<usize>,
    /// Per branch: `(up, residual)` pairs from coarse to fine, then the head.
    branches: Vec<(Vec<(usize, usize)>, usize)>,
}

/// Layer table in canonical order: `(id, kind, cin, cout)`.
pub fn architecture(config: &NetworkConfig) -> Vec<(String, LayerKind, usize, usize)> {
    let same = LayerKind::Same {
        kernel: config.kernel_size,
    };
    let mut out = Vec::new();
    for level in 0..=config.levels {
        let cin = if level == 0 { 1 } else { config.channels(level) };
        out.push((format!("enc{level}.conv"), same, cin, config.channels(level)));
        if level < config.levels {
            out.push((
                format!("enc{level}.down"),
                LayerKind::Down,
                config.channels(level),
                config.channels(level + 1),
            ));
        }
    }
    for branch in 0..=config.levels {
        for j in (1..=branch).rev() {
            out.push((format!("dec{branch}.up{j}"), LayerKind::Up, config.channels(j), config.channels(j - 1)));
            out.push((
                format!("dec{branch}.res{}", j - 1),
                same,
                config.channels(j - 1),
                config.channels(j - 1),
            ));
        }
        out.push((format!("dec{branch}.head"), LayerKind::Point, config.channels(0), config.classes));
    }
    out
}

fn topology(config: &NetworkConfig) -> Topology {
    let mut idx = 0;
    let mut next = || {
        idx += 1;
        idx - 1
    };
    let mut enc_conv = Vec::new();
    let mut enc_down = Vec::new();
    for level in 0..=config.levels {
        enc_conv.push(next());
        if level < config.levels {
            enc_down.push(next());
        }
    }
    let mut branches = Vec::new();
    for branch in 0..=config.levels {
        let steps = (1..=branch).rev().map(|_| (next(), next())).collect();
        branches.push((steps, next()));
    }
    Topology {
        enc_conv,
        enc_down,
        branches,
    }
}

/// All trainable tensors, in [`architecture`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    config: NetworkConfig,
    pub layers: Vec<Layer<T>>,
    topology: Topology,
}

impl<T: Scalar> NetworkParams<T> {
    /// He-normal kernels (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::seeding::stream(seed, crate::seeding::STREAM_INIT);
        let layers = architecture(config)
            .into_iter()
            .map(|(id, kind, cin, cout)| {
                let std = (2.0 / kind.fan_in(cin) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let weight = (0..kind.weight_len(cin, cout)).map(|_| T::of(normal.sample(&mut rng))).collect();
                Layer {
                    id,
                    kind,
                    cin,
                    cout,
                    weight,
                    bias: vec![T::zero(); cout],
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
            topology: topology(config),
        })
    }

    /// Assembles parameters from explicit layers, checking them against `config`.
    pub fn from_layers(config: &NetworkConfig, layers: Vec<Layer<T>>) -> Result<Self> {
        config.validate()?;
        let arch = architecture(config);
        if arch.len() != layers.len() {
            return Err(Error::Config(format!(
                "expected {} layers, got {}",
                arch.len(),
                layers.len()
            )));
        }
        for ((id, kind, cin, cout), l) in arch.iter().zip(&layers) {
            if &l.id != id || l.kind != *kind || l.cin != *cin || l.cout != *cout {
                return Err(Error::Config(format!("layer `{}` does not match expected `{id}`", l.id)));
            }
            if l.weight.len() != kind.weight_len(*cin, *cout) || l.bias.len() != *cout {
                return Err(Error::Config(format!("layer `{id}` has wrong tensor sizes")));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!("layer `{id}` holds non-finite values")));
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
            topology: topology(config),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    id: l.id.clone(),
                    kind: l.kind,
                    cin: l.cin,
                    cout: l.cout,
                    weight: l.weight.iter().map(|v| U::of(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            topology: self.topology.clone(),
        }
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![T::zero(); l.weight.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    /// Runs the network on a single-channel input of any extent that is a
    /// multiple of `2^levels` along every axis.
    pub fn forward_tensor(&self, input: Tensor<T>) -> Result<ForwardTrace<T>> {
        if input.channels != 1 {
            return Err(Error::Shape(format!("expected 1 input channel, got {}", input.channels)));
        }
        for &e in &input.shape {
            self.config.check_extent(e).map_err(|_| {
                Error::Shape(format!(
                    "input shape {:?} not divisible by {}",
                    input.shape,
                    self.config.alignment()
                ))
            })?;
        }
        let top = &self.topology;
        let levels = self.config.levels;
        let mut enc = Vec::with_capacity(levels + 1);
        let mut down = Vec::with_capacity(levels);
        for level in 0..=levels {
            let src = if level == 0 { &input } else { &down[level - 1] };
            let mut h = self.layers[top.enc_conv[level]].forward(src);
            relu_in_place(&mut h);
            if level < levels {
                let mut a = self.layers[top.enc_down[level]].forward(&h);
                relu_in_place(&mut a);
                down.push(a);
            }
            enc.push(h);
        }
        let mut branches = Vec::with_capacity(levels + 1);
        let mut scale_probs = Vec::with_capacity(levels + 1);
        for (level, (steps, head)) in top.branches.iter().enumerate() {
            let mut trace = BranchTrace {
                steps: Vec::with_capacity(steps.len()),
                head_input: None,
            };
            let mut y: Option<Tensor<T>> = None;
            for &(up, res) in steps {
                let src = y.as_ref().unwrap_or(&enc[level]);
                let t = self.layers[up].forward(src);
                let mut r = self.layers[res].forward(&t);
                relu_in_place(&mut r);
                let mut next = t.clone();
                next.add_assign(&r);
                trace.steps.push(StepTrace { t, r });
                y = Some(next);
            }
            let logits = self.layers[*head].forward(y.as_ref().unwrap_or(&enc[level]));
            scale_probs.push(softmax(&logits));
            trace.head_input = y;
            branches.push(trace);
        }
        let scale = T::one() / T::of((levels + 1) as f64);
        let mut final_probs = scale_probs[0].clone();
        for p in &scale_probs[1..] {
            final_probs.add_assign(p);
        }
        final_probs.data.iter_mut().for_each(|v| *v = *v * scale);
        Ok(ForwardTrace {
            input,
            enc,
            down,
            branches,
            scale_probs,
            final_probs,
        })
    }

    pub fn forward(&self, patch: &Volume) -> Result<ForwardTrace<T>> {
        let s = self.config.patch_size;
        if patch.shape() != [s, s, s] {
            return Err(Error::Shape(format!(
                "patch shape {:?} does not match configured {s}³",
                patch.shape()
            )));
        }
        self.forward_tensor(volume_tensor(patch))
    }

    /// Weighted categorical cross-entropy of the averaged map and its gradient.
    ///
    /// `loss = Σ w(v) · -ln p(v, label(v)) / Σ w(v)`.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        labels: &LabelVolume,
        weights: &WeightMap,
    ) -> Result<(Gradients<T>, f64)> {
        self.backward_with(trace, labels, weights, 0.0)
    }

    /// Like [`backward`](Self::backward), plus `scale_weight` times the mean
    /// of the same loss taken on each per-scale map.
    ///
    /// Through the average, a branch that confidently predicts the wrong
    /// class receives a gradient scaled by its own tiny probability and
    /// cannot recover; the per-scale term gives it the usual `p - y` signal.
    pub fn backward_with(
        &self,
        trace: &ForwardTrace<T>,
        labels: &LabelVolume,
        weights: &WeightMap,
        scale_weight: f64,
    ) -> Result<(Gradients<T>, f64)> {
        if !(scale_weight >= 0.0 && scale_weight.is_finite()) {
            return Err(Error::Config(format!("scale loss weight {scale_weight} must be finite and non-negative")));
        }
        let shape = trace.final_probs.shape;
        if labels.shape() != shape || weights.shape() != shape {
            return Err(Error::Shape(format!(
                "labels {:?} / weights {:?} vs prediction {:?}",
                labels.shape(),
                weights.shape(),
                shape
            )));
        }
        labels.validate_labels(self.config.classes)?;
        let total: f64 = weights.data().iter().map(|&w| w as f64).sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateBatch);
        }
        let levels = self.config.levels;
        let n = trace.final_probs.voxels();
        let tiny = T::min_positive_value();
        let inv_total = T::of(1.0 / total);
        let branch_share = T::of(1.0 / (levels + 1) as f64);

        // d loss / d p_final(v, label) = -w / (W p); every branch map receives
        // that divided by the branch count.
        let mut loss = 0.0f64;
        let mut g = vec![T::zero(); n];
        for v in 0..n {
            let w = weights.data()[v];
            if w == 0.0 {
                continue;
            }
            let c = labels.data()[v] as usize;
            let p = trace.final_probs.channel(c)[v].max(tiny);
            loss += w as f64 * -p.as_f64().ln();
            g[v] = -T::of(w as f64) * inv_total / p * branch_share;
        }
        loss /= total;

        let top = &self.topology;
        let mut grads = self.zero_grads();
        let mut enc_grad: Vec<Option<Tensor<T>>> = vec![None; levels + 1];
        let scale_share = scale_weight / (levels + 1) as f64;
        for (level, (steps, head)) in top.branches.iter().enumerate() {
            let probs = &trace.scale_probs[level];
            let classes = probs.channels;
            let mut dlogits = Tensor::zeros(classes, probs.shape);
            let mut scale_loss = 0.0f64;
            for v in 0..n {
                if g[v] == T::zero() {
                    continue;
                }
                let y = labels.data()[v] as usize;
                let py = probs.channel(y)[v];
                let direct = T::of(scale_share * weights.data()[v] as f64) * inv_total;
                if scale_share > 0.0 {
                    scale_loss += weights.data()[v] as f64 * -py.max(tiny).as_f64().ln();
                }
                for c in 0..classes {
                    let pc = probs.data[c * n + v];
                    let delta = if c == y { T::one() } else { T::zero() };
                    dlogits.data[c * n + v] = g[v] * pc * (delta - py) + direct * (pc - delta);
                }
            }
            loss += scale_share * scale_loss / total;
            let branch = &trace.branches[level];
            let head_input = branch.head_input.as_ref().unwrap_or(&trace.enc[level]);
            let mut dy = self.layers[*head]
                .backward(head_input, &dlogits, &mut grads.layers[*head], true)
                .expect("input grad requested");
            // Walk the up-sampling steps from fine back to coarse.
            for (k, &(up, res)) in steps.iter().enumerate().rev() {
                let step = &branch.steps[k];
                let mut dr = dy.clone();
                relu_backward_in_place(&mut dr, &step.r);
                let dt_res = self.layers[res]
                    .backward(&step.t, &dr, &mut grads.layers[res], true)
                    .expect("input grad requested");
                dy.add_assign(&dt_res);
                let coarser;
                let up_input = if k == 0 {
                    &trace.enc[level]
                } else {
                    coarser = branch.steps[k - 1].sum();
                    &coarser
                };
                dy = self.layers[up]
                    .backward(up_input, &dy, &mut grads.layers[up], true)
                    .expect("input grad requested");
            }
            enc_grad[level] = Some(dy);
        }

        let mut carry: Option<Tensor<T>> = None;
        for level in (0..=levels).rev() {
            let mut dh = enc_grad[level].take().expect("every level has a branch");
            if let Some(c) = carry.take() {
                dh.add_assign(&c);
            }
            relu_backward_in_place(&mut dh, &trace.enc[level]);
            let src = if level == 0 { &trace.input } else { &trace.down[level - 1] };
            let conv = top.enc_conv[level];
            let da = self.layers[conv].backward(src, &dh, &mut grads.layers[conv], level > 0);
            if let Some(mut da) = da {
                relu_backward_in_place(&mut da, &trace.down[level - 1]);
                let d = top.enc_down[level - 1];
                carry = self.layers[d].backward(&trace.enc[level - 1], &da, &mut grads.layers[d], true);
            }
        }
        Ok((grads, loss))
    }
}

/// Copies a volume into a single-channel tensor.
pub fn volume_tensor<T: Scalar>(v: &Volume) -> Tensor<T> {
    Tensor::from_vec(1, v.shape(), v.data().iter().map(|&x| T::of(x as f64)).collect())
}

#[derive(Clone, Debug)]
struct StepTrace<T> {
    /// Transposed-convolution output.
    t: Tensor<T>,
    /// `relu(conv(t))`.
    r: Tensor<T>,
}

impl<T: Scalar> StepTrace<T> {
    fn sum(&self) -> Tensor<T> {
        let mut s = self.t.clone();
        s.add_assign(&self.r);
        s
    }
}

#[derive(Clone, Debug)]
struct BranchTrace<T> {
    steps: Vec<StepTrace<T>>,
    head_input: Option<Tensor<T>>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    input: Tensor<T>,
    enc: Vec<Tensor<T>>,
    down: Vec<Tensor<T>>,
    branches: Vec<BranchTrace<T>>,
    scale_probs: Vec<Tensor<T>>,
    final_probs: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn final_probs(&self) -> &Tensor<T> {
        &self.final_probs
    }

    /// One map per resolution level, finest first.
    pub fn scale_probs(&self) -> &[Tensor<T>] {
        &self.scale_probs
    }

    pub fn into_final(self) -> Tensor<T> {
        self.final_probs
    }

    pub fn prob_map(&self) -> ProbMap {
        tensor_prob_map(&self.final_probs)
    }
}

pub fn tensor_prob_map<T: Scalar>(t: &Tensor<T>) -> ProbMap {
    ProbMap::from_raw(t.shape, t.channels, t.data.iter().map(|v| v.as_f64() as f32).collect())
        .expect("tensor sizes agree")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients mirroring [`NetworkParams::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weight.iter_mut().zip(&b.weight).chain(a.bias.iter_mut().zip(&b.bias)) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            for x in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *x = *x * s;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

type Span = (i64, i64);

fn span_same(s: Span, kernel: usize) -> Span {
    let p = (kernel / 2) as i64;
    (s.0 - p, s.1 + p)
}

fn span_down(s: Span) -> Span {
    (2 * s.0 - 1, 2 * s.1 + 1)
}

fn span_up(s: Span) -> Span {
    (s.0.div_euclid(2), s.1.div_euclid(2))
}

/// Input span feeding a span of one layer's output, for each layer kind.
fn span_through(kind: LayerKind, s: Span) -> Span {
    match kind {
        LayerKind::Same { kernel } => span_same(s, kernel),
        LayerKind::Down => span_down(s),
        LayerKind::Up => span_up(s),
        LayerKind::Point => s,
    }
}

fn halo_over_phases(period: usize, input_span: impl Fn(i64) -> Span) -> usize {
    (0..period as i64)
        .map(|v| {
            let (lo, hi) = input_span(v);
            (v - lo).max(hi - v)
        })
        .max()
        .unwrap_or(0)
        .max(0) as usize
}

/// Receptive half-width of a stack of resolution-preserving layers.
pub fn stack_halo(stack: &[LayerKind]) -> usize {
    debug_assert!(stack.iter().all(|k| matches!(k, LayerKind::Same { .. } | LayerKind::Point)));
    halo_over_phases(1, |v| stack.iter().rev().fold((v, v), |s, &k| span_through(k, s)))
}

/// Largest distance (in voxels, along any axis) between an output voxel and
/// an input voxel it depends on, over all stride phases.
pub fn receptive_halo(config: &NetworkConfig) -> usize {
    let k = config.kernel_size;
    let encoder = |level: usize, mut s: Span| {
        for l in (0..=level).rev() {
            s = span_same(s, k);
            if l > 0 {
                s = span_down(s);
            }
        }
        s
    };
    halo_over_phases(1 << config.levels, |v| {
        let mut lo = v;
        let mut hi = v;
        for branch in 0..=config.levels {
            let mut s = (v, v);
            for _ in 0..branch {
                s = span_up(span_same(s, k));
            }
            let (a, b) = encoder(branch, s);
            lo = lo.min(a);
            hi = hi.max(b);
        }
        (lo, hi)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            levels: 1,
            base_channels: 2,
            kernel_size: 3,
            classes: 4,
            patch_size: 8,
        }
    }

    #[test]
    fn parameter_count_formula() {
        assert_eq!(LayerKind::Same { kernel: 3 }.weight_len(1, 8) + 8, 224);
        let cfg = tiny_config();
        let p = NetworkParams::<f32>::init(&cfg, 1).unwrap();
        let expect: usize = architecture(&cfg)
            .iter()
            .map(|(_, k, ci, co)| k.weight_len(*ci, *co) + co)
            .sum();
        assert_eq!(p.param_count(), expect);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = NetworkConfig::default();
        let a = NetworkParams::<f32>::init(&cfg, 7).unwrap();
        let b = NetworkParams::<f32>::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, NetworkParams::<f32>::init(&cfg, 8).unwrap());
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn misaligned_patch_is_config_error() {
        let cfg = NetworkConfig {
            patch_size: 20,
            ..NetworkConfig::default()
        };
        assert!(matches!(NetworkParams::<f32>::init(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let cfg = NetworkConfig::default();
        let p = NetworkParams::<f32>::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vol = Volume::new(Grid::from_fn([32; 3], |_, _, _| rng.random_range(-1.0..1.0)), [1.0; 3]).unwrap();
        let trace = p.forward(&vol).unwrap();
        assert_eq!(trace.scale_probs().len(), cfg.levels + 1);
        let probs = trace.prob_map();
        assert_eq!(probs.shape(), [32; 3]);
        assert_eq!(probs.classes(), 4);
        probs.check_normalized().unwrap();
        // Final map is the plain mean of the per-scale maps.
        let n = trace.scale_probs().len() as f32;
        for i in (0..trace.final_probs().data.len()).step_by(97) {
            let mean: f32 = trace.scale_probs().iter().map(|t| t.data[i]).sum::<f32>() / n;
            assert!((mean - trace.final_probs().data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_patch_shape_is_rejected() {
        let p = NetworkParams::<f32>::init(&tiny_config(), 3).unwrap();
        let vol = Volume::new(Grid::filled([16; 3], 0.0), [1.0; 3]).unwrap();
        assert!(matches!(p.forward(&vol), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_parameters_give_uniform_output() {
        let cfg = tiny_config();
        let mut p = NetworkParams::<f32>::init(&cfg, 3).unwrap();
        for l in &mut p.layers {
            l.weight.iter_mut().for_each(|v| *v = 0.0);
        }
        let vol = Volume::new(Grid::from_fn([8; 3], |x, _, _| x as f32), [1.0; 3]).unwrap();
        let trace = p.forward(&vol).unwrap();
        assert!(trace.final_probs().data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn uniform_output_loss_is_ln_classes() {
        let cfg = tiny_config();
        let mut p = NetworkParams::<f64>::init(&cfg, 3).unwrap();
        for l in &mut p.layers {
            l.weight.iter_mut().for_each(|v| *v = 0.0);
        }
        let vol = Volume::new(Grid::filled([8; 3], 1.0), [1.0; 3]).unwrap();
        let trace = p.forward(&vol).unwrap();
        let labels = Grid::from_fn([8; 3], |x, y, _| ((x + y) % 4) as u8);
        let weights = Grid::filled([8; 3], 1.0f32);
        let (_, loss) = p.backward(&trace, &labels, &weights).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_output_has_zero_loss_and_gradient() {
        let cfg = tiny_config();
        let mut p = NetworkParams::<f32>::init(&cfg, 3).unwrap();
        for l in &mut p.layers {
            l.weight.iter_mut().for_each(|v| *v = 0.0);
            if l.kind == LayerKind::Point {
                l.bias = vec![0.0, 200.0, 0.0, 0.0];
            }
        }
        let vol = Volume::new(Grid::filled([8; 3], 0.5), [1.0; 3]).unwrap();
        let trace = p.forward(&vol).unwrap();
        let labels = Grid::filled([8; 3], 1u8);
        let weights = Grid::filled([8; 3], 2.0f32);
        let (grads, loss) = p.backward(&trace, &labels, &weights).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let p = NetworkParams::<f32>::init(&tiny_config(), 3).unwrap();
        let vol = Volume::new(Grid::filled([8; 3], 0.5), [1.0; 3]).unwrap();
        let trace = p.forward(&vol).unwrap();
        let err = p.backward(&trace, &Grid::filled([8; 3], 0u8), &Grid::filled([8; 3], 0.0f32));
        assert!(matches!(err, Err(Error::DegenerateBatch)));
    }

    #[test]
    fn zero_weight_voxels_do_not_contribute() {
        let cfg = tiny_config();
        let p = NetworkParams::<f64>::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vol = Volume::new(Grid::from_fn([8; 3], |_, _, _| rng.random_range(-1.0..1.0)), [1.0; 3]).unwrap();
        let trace = p.forward(&vol).unwrap();
        let labels = Grid::from_fn([8; 3], |x, _, z| ((x + z) % 4) as u8);
        let mut weights = Grid::from_fn([8; 3], |x, _, _| if x < 4 { 1.0f32 } else { 0.0 });
        let (g1, l1) = p.backward(&trace, &labels, &weights).unwrap();
        // Changing labels where the weight is zero changes nothing.
        let mut relabelled = labels.clone();
        for z in 0..8 {
            for y in 0..8 {
                for x in 4..8 {
                    relabelled.set(x, y, z, 3);
                }
            }
        }
        let (g2, l2) = p.backward(&trace, &relabelled, &weights).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        weights.data_mut()[0] = 0.0;
        let (_, l3) = p.backward(&trace, &labels, &weights).unwrap();
        assert_ne!(l1, l3);
    }

    #[test]
    fn halo_of_simple_stacks() {
        let c3 = LayerKind::Same { kernel: 3 };
        assert_eq!(stack_halo(&[c3]), 1);
        assert_eq!(stack_halo(&[c3, c3]), 2);
        assert_eq!(stack_halo(&[c3, LayerKind::Point]), 1);
        assert_eq!(stack_halo(&[c3, LayerKind::Same { kernel: 5 }]), 3);
    }
}
