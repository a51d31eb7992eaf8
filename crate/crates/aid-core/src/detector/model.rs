//! Detector parameters, forward pass and hand-wired backward pass.
//!
//! Activations flow batched in channel-major layout so each convolution is a
//! single GEMM per batch; per-image tensors are materialized only at the
//! loss/weighting boundary. The backward pass mirrors the forward wiring
//! exactly and accumulates into [`ModelGrads`], which lists parameters in the
//! same order as [`DetectorModel::named_params`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DetectorError, DetectorSpec, FPNFeatures, HeadLevel, HeadOutputs};
use crate::rng::{rng_for, stream};
use crate::tensor::{math, Conv2d, ConvGrad, Feat, Tensor};

/// Per-image, per-level gradients with respect to the head outputs:
/// `d_cls`/`d_obj` are in logit space, `d_reg` with respect to the positive
/// box distances (the softplus chain is applied during assembly).
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub d_cls: Tensor,
    pub d_reg: Tensor,
    pub d_obj: Tensor,
}

impl HeadGrad {
    pub fn zeros(num_classes: usize, h: usize, w: usize) -> Self {
        HeadGrad {
            d_cls: Tensor::zeros(num_classes, h, w),
            d_reg: Tensor::zeros(4, h, w),
            d_obj: Tensor::zeros(1, h, w),
        }
    }
}

/// Intermediate activations of one batched forward pass.
pub struct ForwardTrace {
    input: Feat,
    backbone_out: Vec<Feat>,
    p_levels: Vec<Feat>,
    head_raw: Vec<Feat>,
    num_classes: usize,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.n
    }

    /// FPN feature tensor of one image at one level.
    pub fn features(&self, level: usize, image: usize) -> Tensor {
        self.p_levels[level].image(image)
    }

    /// Batched raw-head gradient for one level assembled from per-image
    /// output-space gradients.
    pub fn assemble_head_grad(&self, level: usize, per_image: &[HeadGrad]) -> Feat {
        let raw = &self.head_raw[level];
        assert_eq!(per_image.len(), raw.n);
        let c = self.num_classes;
        let mut out = Feat::zeros(raw.c, raw.n, raw.h, raw.w);
        for (n, g) in per_image.iter().enumerate() {
            assert!(g.d_cls.c == c && g.d_cls.h == raw.h && g.d_cls.w == raw.w);
            for ci in 0..c {
                for y in 0..raw.h {
                    for x in 0..raw.w {
                        let i = out.idx(ci, n, y, x);
                        out.data[i] = g.d_cls.get(ci, y, x);
                    }
                }
            }
            for ci in 0..4 {
                for y in 0..raw.h {
                    for x in 0..raw.w {
                        let z = raw.data[raw.idx(c + ci, n, y, x)];
                        let i = out.idx(c + ci, n, y, x);
                        // d(softplus)/dz = sigmoid(z)
                        out.data[i] = g.d_reg.get(ci, y, x) * math::sigmoid(z);
                    }
                }
            }
            for y in 0..raw.h {
                for x in 0..raw.w {
                    let i = out.idx(c + 4, n, y, x);
                    out.data[i] = g.d_obj.get(0, y, x);
                }
            }
        }
        out
    }
}

/// Gradient buffers for every parameter of a [`DetectorModel`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub backbone: Vec<ConvGrad>,
    pub laterals: Vec<ConvGrad>,
    pub head: ConvGrad,
}

/// Anchor-free FPN detector.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    spec: DetectorSpec,
    backbone: Vec<Conv2d>,
    laterals: Vec<Conv2d>,
    head: Conv2d,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; keeps the dependency surface small.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

impl DetectorModel {
    /// Seeded He-style initialization. Classification and objectness biases
    /// start at a low-foreground prior so focal/BCE losses do not explode on
    /// the first batches.
    pub fn init(spec: DetectorSpec, seed: u64) -> Result<Self, DetectorError> {
        spec.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let num_stages = spec.max_stride().trailing_zeros() as usize;
        let mut backbone = Vec::with_capacity(num_stages);
        let mut c_prev = 3;
        for stage in 0..num_stages {
            let stride = 1usize << (stage + 1);
            let c_out = spec.backbone_channels(stride);
            let mut conv = Conv2d::new(c_prev, c_out, 3, 2, 1);
            let std = (2.0 / (c_prev * 9) as f64).sqrt();
            for v in &mut conv.weight {
                *v = normal(&mut rng, std);
            }
            backbone.push(conv);
            c_prev = c_out;
        }
        let mut laterals = Vec::with_capacity(spec.num_levels());
        for &stride in &spec.fpn_strides {
            let c_in = spec.backbone_channels(stride);
            let mut conv = Conv2d::new(c_in, spec.fpn_channels, 1, 1, 0);
            let std = (1.0 / c_in as f64).sqrt();
            for v in &mut conv.weight {
                *v = normal(&mut rng, std);
            }
            laterals.push(conv);
        }
        let mut head = Conv2d::new(spec.fpn_channels, spec.num_classes + 5, 3, 1, 1);
        for v in &mut head.weight {
            *v = normal(&mut rng, 0.01);
        }
        let prior = -((1.0 - 0.01f64) / 0.01).ln();
        for (i, b) in head.bias.iter_mut().enumerate() {
            if i < spec.num_classes || i == spec.num_classes + 4 {
                *b = prior;
            }
        }
        Ok(DetectorModel { spec, backbone, laterals, head })
    }

    /// Rebuild a model from stored parameter arrays (checkpoint loading).
    pub(crate) fn from_parts(
        spec: DetectorSpec,
        backbone: Vec<Conv2d>,
        laterals: Vec<Conv2d>,
        head: Conv2d,
    ) -> Self {
        DetectorModel { spec, backbone, laterals, head }
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub(crate) fn backbone_layers(&self) -> &[Conv2d] {
        &self.backbone
    }

    pub(crate) fn lateral_layers(&self) -> &[Conv2d] {
        &self.laterals
    }

    pub(crate) fn head_layer(&self) -> &Conv2d {
        &self.head
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            backbone: self.backbone.iter().map(Conv2d::zero_grad).collect(),
            laterals: self.laterals.iter().map(Conv2d::zero_grad).collect(),
            head: self.head.zero_grad(),
        }
    }

    /// (name, values) pairs in canonical order.
    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &c.weight));
            out.push((format!("backbone.{i}.bias"), &c.bias));
        }
        for (i, c) in self.laterals.iter().enumerate() {
            out.push((format!("lateral.{i}.weight"), &c.weight));
            out.push((format!("lateral.{i}.bias"), &c.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable views of every parameter array, in canonical order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, c) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), c.weight.as_mut_slice()));
            out.push((format!("backbone.{i}.bias"), c.bias.as_mut_slice()));
        }
        for (i, c) in self.laterals.iter_mut().enumerate() {
            out.push((format!("lateral.{i}.weight"), c.weight.as_mut_slice()));
            out.push((format!("lateral.{i}.bias"), c.bias.as_mut_slice()));
        }
        out.push(("head.weight".into(), self.head.weight.as_mut_slice()));
        out.push(("head.bias".into(), self.head.bias.as_mut_slice()));
        out
    }

    /// Mutable parameter slices, paired 1:1 with the corresponding gradient
    /// slices from `ModelGrads` and tagged with whether weight decay applies
    /// (biases are excluded).
    pub fn params_with_grads<'a>(
        &'a mut self,
        grads: &'a ModelGrads,
    ) -> Vec<(&'a mut [f64], &'a [f64], bool)> {
        let mut out: Vec<(&mut [f64], &[f64], bool)> = Vec::new();
        for (c, g) in self.backbone.iter_mut().zip(&grads.backbone) {
            out.push((&mut c.weight, &g.dw, true));
            out.push((&mut c.bias, &g.db, false));
        }
        for (c, g) in self.laterals.iter_mut().zip(&grads.laterals) {
            out.push((&mut c.weight, &g.dw, true));
            out.push((&mut c.bias, &g.db, false));
        }
        out.push((&mut self.head.weight, &grads.head.dw, true));
        out.push((&mut self.head.bias, &grads.head.db, false));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.len()).sum()
    }

    fn pad_image(&self, pixels: &Tensor) -> Result<Tensor, DetectorError> {
        if pixels.c != 3 {
            return Err(DetectorError::ShapeMismatch(format!(
                "expected 3 input channels, got {}",
                pixels.c
            )));
        }
        if pixels.h == 0 || pixels.w == 0 {
            return Err(DetectorError::ShapeMismatch("empty image".into()));
        }
        let s = self.spec.max_stride();
        let ph = pixels.h.div_ceil(s) * s;
        let pw = pixels.w.div_ceil(s) * s;
        if ph == pixels.h && pw == pixels.w {
            return Ok(pixels.clone());
        }
        let mut padded = Tensor::zeros(3, ph, pw);
        for c in 0..3 {
            for y in 0..pixels.h {
                for x in 0..pixels.w {
                    padded.set(c, y, x, pixels.get(c, y, x));
                }
            }
        }
        Ok(padded)
    }

    /// Forward pass over one image.
    pub fn forward(&self, pixels: &Tensor) -> Result<(FPNFeatures, HeadOutputs), DetectorError> {
        let (_, mut outs) = self.forward_batch_traced(&[pixels])?;
        Ok(outs.pop().expect("one image in, one out"))
    }

    /// Forward a batch, retaining activations for a subsequent backward pass.
    pub fn forward_batch_traced(
        &self,
        images: &[&Tensor],
    ) -> Result<(ForwardTrace, Vec<(FPNFeatures, HeadOutputs)>), DetectorError> {
        assert!(!images.is_empty(), "empty batch");
        let padded: Vec<Tensor> =
            images.iter().map(|t| self.pad_image(t)).collect::<Result<_, _>>()?;
        let (h0, w0) = (padded[0].h, padded[0].w);
        if padded.iter().any(|t| t.h != h0 || t.w != w0) {
            return Err(DetectorError::ShapeMismatch("mixed image sizes in one batch".into()));
        }
        let input = Feat::from_images(&padded);

        let mut backbone_out: Vec<Feat> = Vec::with_capacity(self.backbone.len());
        let mut x = &input;
        for conv in &self.backbone {
            let y = conv.forward(x).relu();
            backbone_out.push(y);
            x = backbone_out.last().expect("just pushed");
        }

        // Top-down FPN merge.
        let taps: Vec<usize> =
            self.spec.fpn_strides.iter().map(|s| s.trailing_zeros() as usize - 1).collect();
        let nl = self.spec.num_levels();
        let mut p_levels: Vec<Option<Feat>> = vec![None; nl];
        for l in (0..nl).rev() {
            let mut p = self.laterals[l].forward(&backbone_out[taps[l]]);
            if l + 1 < nl {
                let ratio = self.spec.fpn_strides[l + 1] / self.spec.fpn_strides[l];
                let up = p_levels[l + 1].as_ref().expect("filled in reverse order").upsample_nearest(ratio);
                p.add_inplace(&up);
            }
            p_levels[l] = Some(p);
        }
        let p_levels: Vec<Feat> = p_levels.into_iter().map(|p| p.expect("all levels filled")).collect();

        let head_raw: Vec<Feat> = p_levels.iter().map(|p| self.head.forward(p)).collect();

        let trace = ForwardTrace {
            input,
            backbone_out,
            p_levels,
            head_raw,
            num_classes: self.spec.num_classes,
        };
        let outputs = self.split_outputs(&trace);
        Ok((trace, outputs))
    }

    /// Forward a batch without keeping a trace (teacher / inference path).
    pub fn forward_batch(
        &self,
        images: &[&Tensor],
    ) -> Result<Vec<(FPNFeatures, HeadOutputs)>, DetectorError> {
        let (_, outs) = self.forward_batch_traced(images)?;
        Ok(outs)
    }

    fn split_outputs(&self, trace: &ForwardTrace) -> Vec<(FPNFeatures, HeadOutputs)> {
        let c = self.spec.num_classes;
        let n = trace.input.n;
        (0..n)
            .map(|ni| {
                let mut levels = Vec::with_capacity(self.spec.num_levels());
                let mut feats = Vec::with_capacity(self.spec.num_levels());
                for (l, raw) in trace.head_raw.iter().enumerate() {
                    let (h, w) = (raw.h, raw.w);
                    let mut cls = Tensor::zeros(c, h, w);
                    let mut reg = Tensor::zeros(4, h, w);
                    let mut obj = Tensor::zeros(1, h, w);
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                cls.set(ci, y, x, raw.data[raw.idx(ci, ni, y, x)]);
                            }
                        }
                    }
                    for ci in 0..4 {
                        for y in 0..h {
                            for x in 0..w {
                                reg.set(ci, y, x, math::softplus(raw.data[raw.idx(c + ci, ni, y, x)]));
                            }
                        }
                    }
                    for y in 0..h {
                        for x in 0..w {
                            obj.set(0, y, x, raw.data[raw.idx(c + 4, ni, y, x)]);
                        }
                    }
                    levels.push(HeadLevel {
                        stride: self.spec.fpn_strides[l],
                        cls_logits: cls,
                        box_distances: reg,
                        obj_logits: obj,
                    });
                    feats.push(trace.p_levels[l].image(ni));
                }
                (FPNFeatures { levels: feats }, HeadOutputs { levels })
            })
            .collect()
    }

    /// Backward pass. `d_head` carries per-level batched gradients in raw head
    /// space (see [`ForwardTrace::assemble_head_grad`]); `d_features` optionally
    /// adds gradients flowing directly into the FPN feature maps (feature
    /// distillation). Accumulates into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_head: &[Feat],
        d_features: Option<&[Feat]>,
        grads: &mut ModelGrads,
    ) {
        let nl = self.spec.num_levels();
        assert_eq!(d_head.len(), nl);
        let taps: Vec<usize> =
            self.spec.fpn_strides.iter().map(|s| s.trailing_zeros() as usize - 1).collect();

        // Head (shared across levels).
        let mut d_p: Vec<Feat> = Vec::with_capacity(nl);
        for l in 0..nl {
            let mut d = self.head.backward(&trace.p_levels[l], &d_head[l], &mut grads.head);
            if let Some(extra) = d_features {
                d.add_inplace(&extra[l]);
            }
            d_p.push(d);
        }

        // FPN top-down merge adjoint: p[l] = lateral[l] + up(p[l+1]).
        let mut d_backbone: Vec<Option<Feat>> = vec![None; self.backbone.len()];
        for l in 0..nl {
            if l + 1 < nl {
                let ratio = self.spec.fpn_strides[l + 1] / self.spec.fpn_strides[l];
                let down = d_p[l].downsample_sum(ratio);
                d_p[l + 1].add_inplace(&down);
            }
            let d_tap =
                self.laterals[l].backward(&trace.backbone_out[taps[l]], &d_p[l], &mut grads.laterals[l]);
            match &mut d_backbone[taps[l]] {
                Some(acc) => acc.add_inplace(&d_tap),
                slot => *slot = Some(d_tap),
            }
        }

        // Backbone chain.
        let mut carry: Option<Feat> = None;
        for i in (0..self.backbone.len()).rev() {
            let mut d_out = match (carry.take(), d_backbone[i].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_inplace(&b);
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("deepest stage always receives gradient"),
            };
            d_out = Feat::relu_backward(&trace.backbone_out[i], &d_out);
            let x = if i == 0 { &trace.input } else { &trace.backbone_out[i - 1] };
            let dx = self.backbone[i].backward(x, &d_out, &mut grads.backbone[i]);
            if i > 0 {
                carry = Some(dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_spec() -> DetectorSpec {
        DetectorSpec {
            width_multiplier: 0.25,
            num_classes: 2,
            fpn_strides: vec![4, 8],
            fpn_channels: 16,
        }
    }

    #[test]
    fn level_shapes_match_spec() {
        let spec = DetectorSpec::new(1.0, 3);
        let model = DetectorModel::init(spec, 0).unwrap();
        let img = Tensor::zeros(3, 64, 64);
        let (feats, heads) = model.forward(&img).unwrap();
        let dims: Vec<(usize, usize)> = feats.levels.iter().map(|t| (t.h, t.w)).collect();
        assert_eq!(dims, vec![(8, 8), (4, 4), (2, 2)]);
        for (lvl, head) in heads.levels.iter().enumerate() {
            assert_eq!(head.cls_logits.c, 3);
            assert_eq!(head.box_distances.c, 4);
            assert_eq!((head.cls_logits.h, head.cls_logits.w), dims[lvl]);
        }
    }

    #[test]
    fn zero_weight_model_is_constant_per_class() {
        let spec = micro_spec();
        let mut model = DetectorModel::init(spec, 1).unwrap();
        for conv in &mut model.backbone {
            conv.weight.iter_mut().for_each(|v| *v = 0.0);
            conv.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        for conv in &mut model.laterals {
            conv.weight.iter_mut().for_each(|v| *v = 0.0);
        }
        model.head.weight.iter_mut().for_each(|v| *v = 0.0);
        let mut img = Tensor::zeros(3, 16, 16);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        let (_, heads) = model.forward(&img).unwrap();
        for level in &heads.levels {
            for c in 0..level.cls_logits.c {
                let plane = level.cls_logits.channel(c);
                assert!(plane.iter().all(|&v| v == plane[0]));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DetectorModel::init(micro_spec(), 7).unwrap();
        let mut img = Tensor::zeros(3, 16, 16);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f64 / 1000.0;
        }
        let (f1, h1) = model.forward(&img).unwrap();
        let (f2, h2) = model.forward(&img).unwrap();
        for (a, b) in f1.levels.iter().zip(&f2.levels) {
            assert_eq!(a.data, b.data);
        }
        for (a, b) in h1.levels.iter().zip(&h2.levels) {
            assert_eq!(a.cls_logits.data, b.cls_logits.data);
            assert_eq!(a.box_distances.data, b.box_distances.data);
            assert_eq!(a.obj_logits.data, b.obj_logits.data);
        }
    }

    #[test]
    fn micro_model_is_small() {
        let model = DetectorModel::init(micro_spec(), 0).unwrap();
        assert!(model.param_count() <= 2000, "micro model has {} params", model.param_count());
    }

    #[test]
    fn odd_sizes_are_padded() {
        let model = DetectorModel::init(micro_spec(), 0).unwrap();
        let img = Tensor::zeros(3, 13, 10);
        let (feats, _) = model.forward(&img).unwrap();
        // padded to 16x16 -> strides [4, 8] give 4x4 and 2x2
        assert_eq!((feats.levels[0].h, feats.levels[0].w), (4, 4));
        assert_eq!((feats.levels[1].h, feats.levels[1].w), (2, 2));
    }

    #[test]
    fn rejects_bad_channel_count() {
        let model = DetectorModel::init(micro_spec(), 0).unwrap();
        let img = Tensor::zeros(1, 16, 16);
        assert!(matches!(model.forward(&img), Err(DetectorError::ShapeMismatch(_))));
    }
}
