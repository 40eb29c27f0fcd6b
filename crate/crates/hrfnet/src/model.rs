//! The HRFNet network: shallow full-resolution and deep downsampled
//! branches over RGB and noise-residual inputs, intra- then
//! cross-modality fusion, ASPP context, and a decoder that restores the
//! full-resolution two-class logit map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ValueId};
use crate::nn::{
    apply_stat_updates, Act, BasicBlock, BatchNorm2d, Bneck, BufferStore, Conv2d, Ctx, Init,
    ParamStore, StatUpdate,
};
use crate::ops::act::softmax2_tampered;
use crate::ops::pad::{pad_amounts, reflect_pad};
use crate::ops::resize::bilinear;
use crate::srm::{self, FilterBank};
use crate::tensor::Tensor;

/// One inverted-residual block of the shallow backbone.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BneckSpec {
    pub kernel: usize,
    pub expand: usize,
    pub out: usize,
    pub stride: usize,
    pub se: bool,
}

/// Shallow (lightweight) backbone: stride-2 stem plus inverted-residual
/// blocks, truncated at overall stride 8.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShallowSpec {
    pub stem_channels: usize,
    pub blocks: Vec<BneckSpec>,
    /// Index of the block whose output is the stride-4 low-level tap.
    pub low_level_index: usize,
}

impl ShallowSpec {
    /// MobileNet-v3 layout up to and including its stride-8 stage.
    pub fn mobilenet_v3_truncated() -> ShallowSpec {
        let b = |kernel, expand, out, stride, se| BneckSpec { kernel, expand, out, stride, se };
        ShallowSpec {
            stem_channels: 16,
            blocks: vec![
                b(3, 16, 16, 1, false),
                b(3, 64, 24, 2, false),
                b(3, 72, 24, 1, false),
                b(5, 72, 40, 2, true),
                b(5, 120, 40, 1, true),
                b(5, 120, 40, 1, true),
            ],
            low_level_index: 2,
        }
    }

    fn stride_after(&self, block_index: usize) -> usize {
        2 * self.blocks[..=block_index]
            .iter()
            .map(|b| b.stride)
            .product::<usize>()
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.out)
    }

    pub fn low_level_channels(&self) -> usize {
        self.blocks[self.low_level_index].out
    }
}

/// Deep backbone: residual stages at overall stride 32.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DeepSpec {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
}

impl DeepSpec {
    /// The 18-layer configuration: 4 stages of two basic blocks each.
    pub fn resnet18() -> DeepSpec {
        DeepSpec {
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
        }
    }

    pub fn output_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.stem_channels)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub full_res: (usize, usize),
    pub deep_input_size: (usize, usize),
    pub shallow_backbone: ShallowSpec,
    pub deep_backbone: DeepSpec,
    pub srm_channels: usize,
    pub fusion_channels: usize,
    pub aspp_rates: Vec<usize>,
    pub num_classes: usize,
    pub width_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            full_res: (1000, 1000),
            deep_input_size: (224, 224),
            shallow_backbone: ShallowSpec::mobilenet_v3_truncated(),
            deep_backbone: DeepSpec::resnet18(),
            srm_channels: 9,
            fusion_channels: 128,
            aspp_rates: vec![1, 6, 12, 18],
            num_classes: 2,
            width_multiplier: 1.0,
        }
    }
}

impl ModelConfig {
    /// Spatial dims actually processed: `full_res` reflect-padded up to
    /// the next multiple of 32.
    pub fn padded_res(&self) -> (usize, usize) {
        (self.full_res.0.div_ceil(32) * 32, self.full_res.1.div_ceil(32) * 32)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.num_classes != 2 {
            return cfg(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return cfg(format!("width_multiplier must be > 0, got {}", self.width_multiplier));
        }
        if self.full_res.0 == 0 || self.full_res.1 == 0 {
            return cfg("full_res dims must be positive".into());
        }
        let (h, w) = self.deep_input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return cfg(format!("deep_input_size must be positive multiples of 32, got {h}x{w}"));
        }
        let (ph, pw) = self.padded_res();
        if h > ph || w > pw {
            return cfg(format!(
                "deep_input_size {h}x{w} exceeds the padded full resolution {ph}x{pw}"
            ));
        }
        if self.srm_channels == 0 || self.srm_channels % 3 != 0 {
            return cfg(format!(
                "srm_channels must be a positive multiple of 3, got {}",
                self.srm_channels
            ));
        }
        if self.fusion_channels == 0 {
            return cfg("fusion_channels must be positive".into());
        }
        if self.aspp_rates.is_empty() {
            return cfg("aspp_rates must be non-empty".into());
        }
        let feat = (ph / 8).min(pw / 8);
        for &r in &self.aspp_rates {
            if r == 0 {
                return cfg("aspp_rates must be >= 1".into());
            }
            if r > feat {
                return cfg(format!(
                    "aspp rate {r} exceeds the {feat}-pixel feature extent at stride 8"
                ));
            }
        }
        let sb = &self.shallow_backbone;
        if sb.blocks.is_empty() || sb.stem_channels == 0 {
            return cfg("shallow_backbone must have a stem and at least one block".into());
        }
        for b in &sb.blocks {
            if b.kernel % 2 == 0 || b.kernel == 0 || !(1..=2).contains(&b.stride) || b.expand == 0 || b.out == 0 {
                return cfg("shallow_backbone block has invalid kernel/stride/width".into());
            }
        }
        if sb.low_level_index >= sb.blocks.len() {
            return cfg("shallow_backbone low_level_index out of range".into());
        }
        if sb.stride_after(sb.low_level_index) != 4 {
            return cfg("shallow_backbone low-level tap must sit at stride 4".into());
        }
        if sb.stride_after(sb.blocks.len() - 1) != 8 {
            return cfg("shallow_backbone must end at overall stride 8".into());
        }
        let db = &self.deep_backbone;
        if db.stage_channels.len() != db.blocks_per_stage.len() {
            return cfg("deep_backbone stage_channels and blocks_per_stage lengths differ".into());
        }
        // stem stride 2, pool stride 2, then one stride-2 stage transition each
        if db.stage_channels.len() != 4 {
            return cfg("deep_backbone needs exactly 4 stages for overall stride 32".into());
        }
        if db.stem_channels == 0
            || db.stage_channels.iter().any(|&c| c == 0)
            || db.blocks_per_stage.iter().any(|&n| n == 0)
        {
            return cfg("deep_backbone widths and block counts must be positive".into());
        }
        Ok(())
    }

    /// Channel width after the desk-scale multiplier, floored at 8.
    pub fn scaled(&self, channels: usize) -> usize {
        (((channels as f64) * self.width_multiplier).round() as usize).max(8)
    }
}

/// A feature tensor plus its spatial reduction factor relative to the
/// input of the branch that produced it.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

/// Concatenate two feature maps along channels, bilinearly resizing the
/// spatially smaller one to the larger one's dims first. `a`'s channels
/// come first. Output stride is the finer (smaller) of the two.
pub fn fuse(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let (ah, aw) = (a.data.h(), a.data.w());
    let (bh, bw) = (b.data.h(), b.data.w());
    let (th, tw) = if ah * aw >= bh * bw { (ah, aw) } else { (bh, bw) };
    let ra = if (ah, aw) == (th, tw) { a.data.clone() } else { bilinear(&a.data, th, tw) };
    let rb = if (bh, bw) == (th, tw) { b.data.clone() } else { bilinear(&b.data, th, tw) };
    let [n, ca, _, _] = ra.shape();
    let cb = rb.c();
    let mut out = Tensor::zeros([n, ca + cb, th, tw]);
    let plane = th * tw;
    for ni in 0..n {
        let dst = &mut out.data_mut()[ni * (ca + cb) * plane..];
        dst[..ca * plane].copy_from_slice(&ra.data()[ni * ca * plane..(ni + 1) * ca * plane]);
        dst[ca * plane..(ca + cb) * plane]
            .copy_from_slice(&rb.data()[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    FeatureMap {
        data: out,
        stride: a.stride.min(b.stride),
    }
}

struct MobileBackbone {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<Bneck>,
    low_level_index: usize,
}

impl MobileBackbone {
    fn build(init: &mut Init, name: &str, in_channels: usize, cfg: &ModelConfig) -> Self {
        let spec = &cfg.shallow_backbone;
        let stem_c = cfg.scaled(spec.stem_channels);
        let stem = Conv2d::new(init, &format!("{name}.stem"), in_channels, stem_c, 3, 2, 1, 1, false);
        let stem_bn = BatchNorm2d::new(init, &format!("{name}.stem_bn"), stem_c);
        let mut blocks = Vec::new();
        let mut prev = stem_c;
        for (i, b) in spec.blocks.iter().enumerate() {
            let expand = cfg.scaled(b.expand);
            let out = cfg.scaled(b.out);
            blocks.push(Bneck::new(
                init,
                &format!("{name}.block{i}"),
                prev,
                expand.max(prev),
                out,
                b.kernel,
                b.stride,
                b.se,
                Act::Relu,
            ));
            prev = out;
        }
        MobileBackbone {
            stem,
            stem_bn,
            blocks,
            low_level_index: spec.low_level_index,
        }
    }

    /// Returns (stride-4 low-level tap, stride-8 output).
    fn forward(&self, cx: &mut Ctx, x: ValueId) -> (ValueId, ValueId) {
        let mut h = self.stem.forward(cx, x);
        h = self.stem_bn.forward(cx, h);
        h = cx.g.hardswish(h);
        let mut low = h;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(cx, h);
            if i == self.low_level_index {
                low = h;
            }
        }
        (low, h)
    }
}

struct ResNetBackbone {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
}

impl ResNetBackbone {
    fn build(init: &mut Init, name: &str, in_channels: usize, cfg: &ModelConfig) -> Self {
        let spec = &cfg.deep_backbone;
        let stem_c = cfg.scaled(spec.stem_channels);
        let stem = Conv2d::new(init, &format!("{name}.stem"), in_channels, stem_c, 7, 2, 1, 1, false);
        let stem_bn = BatchNorm2d::new(init, &format!("{name}.stem_bn"), stem_c);
        let mut stages = Vec::new();
        let mut prev = stem_c;
        for (si, (&ch, &nb)) in spec
            .stage_channels
            .iter()
            .zip(&spec.blocks_per_stage)
            .enumerate()
        {
            let out = cfg.scaled(ch);
            let mut stage = Vec::new();
            for bi in 0..nb {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                stage.push(BasicBlock::new(
                    init,
                    &format!("{name}.stage{si}.block{bi}"),
                    prev,
                    out,
                    stride,
                ));
                prev = out;
            }
            stages.push(stage);
        }
        ResNetBackbone { stem, stem_bn, stages }
    }

    fn forward(&self, cx: &mut Ctx, x: ValueId) -> ValueId {
        let mut h = self.stem.forward(cx, x);
        h = self.stem_bn.forward(cx, h);
        h = cx.g.relu(h);
        h = cx.g.max_pool(h, 3, 2, 1);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(cx, h);
            }
        }
        h
    }
}

/// conv-relu-conv projection of a fused intra-modality feature down to
/// the fusion width.
struct RefineHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl RefineHead {
    fn build(init: &mut Init, name: &str, in_channels: usize, out_channels: usize) -> Self {
        RefineHead {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), in_channels, out_channels, 3, 1, 1, 1, true),
            conv2: Conv2d::new(init, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1, 1, true),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: ValueId) -> ValueId {
        let h = self.conv1.forward(cx, x);
        let h = cx.g.relu(h);
        self.conv2.forward(cx, h)
    }
}

struct Aspp {
    branches: Vec<(Conv2d, BatchNorm2d)>,
    pool_conv: Conv2d,
    pool_bn: BatchNorm2d,
    project: Conv2d,
    project_bn: BatchNorm2d,
}

impl Aspp {
    fn build(init: &mut Init, name: &str, in_channels: usize, out_channels: usize, rates: &[usize]) -> Self {
        let mut branches = Vec::new();
        for (i, &rate) in rates.iter().enumerate() {
            // rate 1 degenerates to the canonical 1x1 branch
            let (kernel, dilation) = if rate == 1 { (1, 1) } else { (3, rate) };
            branches.push((
                Conv2d::new(
                    init,
                    &format!("{name}.branch{i}"),
                    in_channels,
                    out_channels,
                    kernel,
                    1,
                    dilation,
                    1,
                    false,
                ),
                BatchNorm2d::new(init, &format!("{name}.branch{i}_bn"), out_channels),
            ));
        }
        Aspp {
            branches,
            pool_conv: Conv2d::new(init, &format!("{name}.pool"), in_channels, out_channels, 1, 1, 1, 1, false),
            pool_bn: BatchNorm2d::new(init, &format!("{name}.pool_bn"), out_channels),
            project: Conv2d::new(
                init,
                &format!("{name}.project"),
                out_channels * (rates.len() + 1),
                out_channels,
                1,
                1,
                1,
                1,
                false,
            ),
            project_bn: BatchNorm2d::new(init, &format!("{name}.project_bn"), out_channels),
        }
    }

    fn branch_count(&self) -> usize {
        self.branches.len() + 1
    }

    fn forward(&self, cx: &mut Ctx, x: ValueId) -> ValueId {
        let (h, w) = (cx.g.value(x).h(), cx.g.value(x).w());
        let mut outs = Vec::new();
        for (conv, bn) in &self.branches {
            let b = conv.forward(cx, x);
            let b = bn.forward(cx, b);
            outs.push(cx.g.relu(b));
        }
        let p = cx.g.global_avg_pool(x);
        let p = self.pool_conv.forward(cx, p);
        let p = self.pool_bn.forward(cx, p);
        let p = cx.g.relu(p);
        outs.push(cx.g.resize_bilinear(p, h, w));
        let cat = cx.g.concat_channels(&outs);
        let y = self.project.forward(cx, cat);
        let y = self.project_bn.forward(cx, y);
        cx.g.relu(y)
    }
}

struct Decoder {
    low_project: Conv2d,
    low_bn: BatchNorm2d,
    refine1: Conv2d,
    refine1_bn: BatchNorm2d,
    refine2: Conv2d,
    refine2_bn: BatchNorm2d,
    classifier: Conv2d,
}

impl Decoder {
    fn build(
        init: &mut Init,
        name: &str,
        context_channels: usize,
        low_channels: usize,
        num_classes: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let low_proj = cfg.scaled(48);
        let width = context_channels;
        Decoder {
            low_project: Conv2d::new(init, &format!("{name}.low"), low_channels, low_proj, 1, 1, 1, 1, false),
            low_bn: BatchNorm2d::new(init, &format!("{name}.low_bn"), low_proj),
            refine1: Conv2d::new(
                init,
                &format!("{name}.refine1"),
                context_channels + low_proj,
                width,
                3,
                1,
                1,
                1,
                false,
            ),
            refine1_bn: BatchNorm2d::new(init, &format!("{name}.refine1_bn"), width),
            refine2: Conv2d::new(init, &format!("{name}.refine2"), width, width, 3, 1, 1, 1, false),
            refine2_bn: BatchNorm2d::new(init, &format!("{name}.refine2_bn"), width),
            classifier: Conv2d::new(init, &format!("{name}.cls"), width, num_classes, 1, 1, 1, 1, true),
        }
    }

    fn forward(&self, cx: &mut Ctx, context: ValueId, low: ValueId, out_h: usize, out_w: usize) -> ValueId {
        let (lh, lw) = (cx.g.value(low).h(), cx.g.value(low).w());
        let up = cx.g.resize_bilinear(context, lh, lw);
        let lp = self.low_project.forward(cx, low);
        let lp = self.low_bn.forward(cx, lp);
        let lp = cx.g.relu(lp);
        let cat = cx.g.concat_channels(&[up, lp]);
        let h = self.refine1.forward(cx, cat);
        let h = self.refine1_bn.forward(cx, h);
        let h = cx.g.relu(h);
        let h = self.refine2.forward(cx, h);
        let h = self.refine2_bn.forward(cx, h);
        let h = cx.g.relu(h);
        let logits = self.classifier.forward(cx, h);
        cx.g.resize_bilinear(logits, out_h, out_w)
    }
}

/// Intermediate activations captured by [`HrfNet::forward_debug`].
pub struct DebugMaps {
    pub residual: Tensor,
    pub shallow_rgb: FeatureMap,
    pub low_level: FeatureMap,
    pub deep_rgb: FeatureMap,
    pub shallow_srm: FeatureMap,
    pub deep_srm: FeatureMap,
    pub rgb_refined: FeatureMap,
    pub srm_refined: FeatureMap,
    pub fused: FeatureMap,
    pub context: FeatureMap,
    pub logits: Tensor,
}

/// Result of a training-mode forward/backward pass.
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
    pub stat_updates: Vec<StatUpdate>,
}

pub struct HrfNet {
    config: ModelConfig,
    bank: FilterBank,
    params: ParamStore,
    buffers: BufferStore,
    seed: u64,
    shallow_rgb: MobileBackbone,
    shallow_srm: MobileBackbone,
    deep_rgb: ResNetBackbone,
    deep_srm: ResNetBackbone,
    refine_rgb: RefineHead,
    refine_srm: RefineHead,
    aspp: Aspp,
    decoder: Decoder,
}

impl HrfNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<HrfNet> {
        HrfNet::with_filter_bank(config, FilterBank::standard(), seed)
    }

    pub fn with_filter_bank(config: ModelConfig, bank: FilterBank, seed: u64) -> Result<HrfNet> {
        config.validate()?;
        bank.validate()?;
        if bank.residual_channels() != config.srm_channels {
            return Err(Error::Config(format!(
                "srm_channels {} does not match the filter bank's {} residual channels",
                config.srm_channels,
                bank.residual_channels()
            )));
        }
        let mut params = ParamStore::default();
        let mut buffers = BufferStore::default();
        let mut init = Init::new(&mut params, &mut buffers, seed);
        let cf = config.scaled(config.fusion_channels);
        let shallow_out = config.scaled(config.shallow_backbone.output_channels());
        let deep_out = config.scaled(config.deep_backbone.output_channels());
        let low_ch = config.scaled(config.shallow_backbone.low_level_channels());
        let shallow_rgb = MobileBackbone::build(&mut init, "shallow_rgb", 3, &config);
        let shallow_srm = MobileBackbone::build(&mut init, "shallow_srm", config.srm_channels, &config);
        let deep_rgb = ResNetBackbone::build(&mut init, "deep_rgb", 3, &config);
        let deep_srm = ResNetBackbone::build(&mut init, "deep_srm", config.srm_channels, &config);
        let refine_rgb = RefineHead::build(&mut init, "refine_rgb", shallow_out + deep_out, cf);
        let refine_srm = RefineHead::build(&mut init, "refine_srm", shallow_out + deep_out, cf);
        let aspp = Aspp::build(&mut init, "aspp", 2 * cf, cf, &config.aspp_rates);
        let decoder = Decoder::build(&mut init, "decoder", cf, low_ch, config.num_classes, &config);
        Ok(HrfNet {
            config,
            bank,
            params,
            buffers,
            seed,
            shallow_rgb,
            shallow_srm,
            deep_rgb,
            deep_srm,
            refine_rgb,
            refine_srm,
            aspp,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &BufferStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BufferStore {
        &mut self.buffers
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn aspp_branch_count(&self) -> usize {
        self.aspp.branch_count()
    }

    /// Zero the weights of every SRM-branch layer (shallow, deep, and
    /// refine), leaving the RGB pathway untouched.
    pub fn ablate_srm_branches(&mut self) {
        for prefix in ["shallow_srm.", "deep_srm.", "refine_srm.conv1", "refine_srm.conv2.weight"] {
            self.params.zero_prefixed(prefix);
        }
    }

    /// Check and split the raw input, producing the padded RGB tensor,
    /// the padded residual tensor, and their downsampled deep-branch
    /// counterparts. `image` holds raw 0..255 intensities.
    fn prepare_inputs(&self, image: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        if image.c() != 3 {
            return Err(Error::Channels { expected: 3, got: image.c() });
        }
        if (image.h(), image.w()) != self.config.full_res {
            return Err(Error::Shape(format!(
                "input {}x{} does not match the configured full resolution {}x{}",
                image.h(),
                image.w(),
                self.config.full_res.0,
                self.config.full_res.1
            )));
        }
        if !image.is_finite() {
            return Err(Error::Numeric("non-finite input image".into()));
        }
        let (top, bottom) = pad_amounts(image.h(), 32);
        let (left, right) = pad_amounts(image.w(), 32);
        let padded = reflect_pad(image, top, bottom, left, right);
        let rgb = padded.scale(1.0 / 255.0);
        let residual = srm::apply(&padded, &self.bank)?;
        let (dh, dw) = self.config.deep_input_size;
        let rgb_deep = srm::downsample(&rgb, dh, dw)?;
        let residual_deep = srm::downsample(&residual, dh, dw)?;
        Ok((rgb, residual, rgb_deep, residual_deep))
    }

    fn assemble(
        &self,
        cx: &mut Ctx,
        rgb: Tensor,
        residual: Tensor,
        rgb_deep: Tensor,
        residual_deep: Tensor,
        out_h: usize,
        out_w: usize,
    ) -> AssembledGraph {
        let (ph, pw) = (rgb.h(), rgb.w());
        let x_rgb = cx.g.input(rgb);
        let x_srm = cx.g.input(residual);
        let x_rgb_deep = cx.g.input(rgb_deep);
        let x_srm_deep = cx.g.input(residual_deep);
        let (low, s_rgb) = self.shallow_rgb.forward(cx, x_rgb);
        let (_, s_srm) = self.shallow_srm.forward(cx, x_srm);
        let d_rgb = self.deep_rgb.forward(cx, x_rgb_deep);
        let d_srm = self.deep_srm.forward(cx, x_srm_deep);
        let rgb_fused = fuse_values(cx, s_rgb, d_rgb);
        let srm_fused = fuse_values(cx, s_srm, d_srm);
        let rgb_refined = self.refine_rgb.forward(cx, rgb_fused);
        let srm_refined = self.refine_srm.forward(cx, srm_fused);
        let fused = cx.g.concat_channels(&[rgb_refined, srm_refined]);
        let context = self.aspp.forward(cx, fused);
        let padded_logits = self.decoder.forward(cx, context, low, ph, pw);
        let logits = cx.g.center_crop(padded_logits, out_h, out_w);
        AssembledGraph {
            low,
            s_rgb,
            s_srm,
            d_rgb,
            d_srm,
            rgb_refined,
            srm_refined,
            fused,
            context,
            logits,
        }
    }

    /// Full forward pass in evaluation mode, producing a 2-channel logit
    /// map at the input resolution.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (rgb, residual, rgb_deep, residual_deep) = self.prepare_inputs(image)?;
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.params, &self.buffers, false);
        let parts = self.assemble(&mut cx, rgb, residual, rgb_deep, residual_deep, image.h(), image.w());
        let logits = g.value(parts.logits).clone();
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Evaluation-mode forward pass that also returns named intermediate
    /// feature maps for inspection.
    pub fn forward_debug(&self, image: &Tensor) -> Result<DebugMaps> {
        let (rgb, residual, rgb_deep, residual_deep) = self.prepare_inputs(image)?;
        let residual_copy = residual.clone();
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.params, &self.buffers, false);
        let parts = self.assemble(&mut cx, rgb, residual, rgb_deep, residual_deep, image.h(), image.w());
        let fm = |id: ValueId, stride: usize| FeatureMap { data: g.value(id).clone(), stride };
        Ok(DebugMaps {
            residual: residual_copy,
            shallow_rgb: fm(parts.s_rgb, 8),
            low_level: fm(parts.low, 4),
            deep_rgb: fm(parts.d_rgb, 32),
            shallow_srm: fm(parts.s_srm, 8),
            deep_srm: fm(parts.d_srm, 32),
            rgb_refined: fm(parts.rgb_refined, 8),
            srm_refined: fm(parts.srm_refined, 8),
            fused: fm(parts.fused, 8),
            context: fm(parts.context, 8),
            logits: g.value(parts.logits).clone(),
        })
    }

    /// Tampered-class probability map plus thresholded binary mask.
    pub fn predict_mask(&self, image: &Tensor, threshold: f64) -> Result<(Tensor, Tensor)> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Parameter(format!(
                "threshold must lie in (0, 1), got {threshold}"
            )));
        }
        let logits = self.forward(image)?;
        let prob = softmax2_tampered(&logits);
        let mask = prob.map(|p| if p >= threshold { 1.0 } else { 0.0 });
        Ok((prob, mask))
    }

    /// Training-mode forward pass returning the weighted cross-entropy
    /// loss only. Batch-norm statistics come from the batch, matching
    /// [`HrfNet::loss_and_grads`], so finite differences of this function
    /// validate that one's gradients.
    pub fn loss_only(&self, images: &Tensor, masks: &Tensor, tampered_weight: f64) -> Result<f64> {
        let (loss, _) = self.train_forward(images, masks, tampered_weight, false)?;
        Ok(loss.loss)
    }

    /// Training-mode forward/backward pass.
    pub fn loss_and_grads(
        &self,
        images: &Tensor,
        masks: &Tensor,
        tampered_weight: f64,
    ) -> Result<LossOutput> {
        let (out, _) = self.train_forward(images, masks, tampered_weight, true)?;
        Ok(out)
    }

    fn train_forward(
        &self,
        images: &Tensor,
        masks: &Tensor,
        tampered_weight: f64,
        with_grads: bool,
    ) -> Result<(LossOutput, ())> {
        if masks.shape() != [images.n(), 1, images.h(), images.w()] {
            return Err(Error::Shape(format!(
                "mask shape {:?} does not match images {:?}",
                masks.shape(),
                images.shape()
            )));
        }
        if !(tampered_weight.is_finite() && tampered_weight > 0.0) {
            return Err(Error::Parameter(format!(
                "tampered_weight must be positive, got {tampered_weight}"
            )));
        }
        let (rgb, residual, rgb_deep, residual_deep) = self.prepare_inputs(images)?;
        let mut g = if with_grads { Graph::recording() } else { Graph::inference() };
        let mut cx = Ctx::new(&mut g, &self.params, &self.buffers, true);
        let parts = self.assemble(&mut cx, rgb, residual, rgb_deep, residual_deep, images.h(), images.w());
        let stat_updates = std::mem::take(&mut cx.stat_updates);
        let loss_id = g.weighted_ce(parts.logits, masks, tampered_weight);
        let loss = g.value(loss_id).data()[0];
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {loss}")));
        }
        let grads = if with_grads {
            g.backward(loss_id, self.params.len()).into_vec()
        } else {
            Vec::new()
        };
        Ok((LossOutput { loss, grads, stat_updates }, ()))
    }

    /// Fold deferred batch-norm statistics into the running buffers.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        apply_stat_updates(&mut self.buffers, updates, 0.1);
    }
}

struct AssembledGraph {
    low: ValueId,
    s_rgb: ValueId,
    s_srm: ValueId,
    d_rgb: ValueId,
    d_srm: ValueId,
    rgb_refined: ValueId,
    srm_refined: ValueId,
    fused: ValueId,
    context: ValueId,
    logits: ValueId,
}

/// Graph-level twin of [`fuse`]: resize the smaller map, concatenate.
fn fuse_values(cx: &mut Ctx, a: ValueId, b: ValueId) -> ValueId {
    let (ah, aw) = (cx.g.value(a).h(), cx.g.value(a).w());
    let (bh, bw) = (cx.g.value(b).h(), cx.g.value(b).w());
    let (th, tw) = if ah * aw >= bh * bw { (ah, aw) } else { (bh, bw) };
    let ra = if (ah, aw) == (th, tw) { a } else { cx.g.resize_bilinear(a, th, tw) };
    let rb = if (bh, bw) == (th, tw) { b } else { cx.g.resize_bilinear(b, th, tw) };
    cx.g.concat_channels(&[ra, rb])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(res: usize) -> ModelConfig {
        ModelConfig {
            full_res: (res, res),
            deep_input_size: (32, 32),
            width_multiplier: 0.05,
            fusion_channels: 8,
            aspp_rates: vec![1, 2],
            ..ModelConfig::default()
        }
    }

    pub(crate) fn random_image(n: usize, res: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * res * res)
            .map(|_| rng.random_range(0.0..255.0))
            .collect();
        Tensor::new([n, 3, res, res], data)
    }

    #[test]
    fn default_config_validates() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().padded_res(), (1024, 1024));
    }

    #[test]
    fn config_rejections() {
        let mut c = ModelConfig::default();
        c.num_classes = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.deep_input_size = (100, 96);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config(64);
        c.aspp_rates = vec![1, 18];
        // 64 -> stride-8 extent 8, rate 18 cannot fit
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.width_multiplier = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shape_contract_and_determinism() {
        let model = HrfNet::new(tiny_config(64), 7).unwrap();
        let img = random_image(1, 64, 0);
        let a = model.forward(&img).unwrap();
        assert_eq!(a.shape(), [1, 2, 64, 64]);
        assert!(a.is_finite());
        let b = model.forward(&img).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fuse_resizes_smaller_and_concatenates() {
        let a = FeatureMap { data: Tensor::filled([1, 4, 16, 16], 1.0), stride: 8 };
        let b = FeatureMap { data: Tensor::filled([1, 6, 2, 2], 2.0), stride: 32 };
        let f = fuse(&a, &b);
        assert_eq!(f.data.shape(), [1, 10, 16, 16]);
        assert_eq!(f.stride, 8);
        assert_eq!(f.data.at(0, 0, 3, 3), 1.0);
        assert_eq!(f.data.at(0, 4, 3, 3), 2.0);
        // argument order permutes the blocks, multiset unchanged
        let g = fuse(&b, &a);
        assert_eq!(g.data.shape(), [1, 10, 16, 16]);
        assert_eq!(g.data.at(0, 0, 5, 5), 2.0);
        let mut fs: Vec<u64> = f.data.data().iter().map(|v| v.to_bits()).collect();
        let mut gs: Vec<u64> = g.data.data().iter().map(|v| v.to_bits()).collect();
        fs.sort_unstable();
        gs.sort_unstable();
        assert_eq!(fs, gs);
        // self-fusion duplicates channels
        let s = fuse(&a, &a);
        assert_eq!(s.data.c(), 8);
        assert_eq!(s.data.at(0, 0, 0, 0), s.data.at(0, 4, 0, 0));
    }

    #[test]
    fn predict_mask_threshold_half_matches_argmax() {
        let model = HrfNet::new(tiny_config(64), 3).unwrap();
        let img = random_image(1, 64, 5);
        let logits = model.forward(&img).unwrap();
        let (prob, mask) = model.predict_mask(&img, 0.5).unwrap();
        for i in 0..64 * 64 {
            assert!(prob.data()[i] >= 0.0 && prob.data()[i] <= 1.0);
            let argmax = (logits.data()[64 * 64 + i] >= logits.data()[i]) as usize as f64;
            assert_eq!(mask.data()[i], argmax);
        }
        assert!(matches!(model.predict_mask(&img, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(model.predict_mask(&img, 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn ablated_srm_branch_reduces_to_bias_constants() {
        let mut model = HrfNet::new(tiny_config(64), 11).unwrap();
        model.ablate_srm_branches();
        let img = random_image(1, 64, 9);
        let dbg = model.forward_debug(&img).unwrap();
        // the second refine conv's weight is zero, so the SRM refined map
        // must be exactly its bias, broadcast over space
        let bias_pid = (0..model.params().len())
            .find(|&pid| model.params().name(pid) == "refine_srm.conv2.bias")
            .unwrap();
        let bias = model.params().get(bias_pid).clone();
        let m = &dbg.srm_refined.data;
        for c in 0..m.c() {
            for y in 0..m.h() {
                for x in 0..m.w() {
                    assert_eq!(m.at(0, c, y, x), bias.data()[c]);
                }
            }
        }
    }

    #[test]
    fn seed_controls_initialization() {
        let a = HrfNet::new(tiny_config(64), 1).unwrap();
        let b = HrfNet::new(tiny_config(64), 1).unwrap();
        let c = HrfNet::new(tiny_config(64), 2).unwrap();
        let w = |m: &HrfNet| m.params().get(0).data().to_vec();
        assert_eq!(w(&a), w(&b));
        assert_ne!(w(&a), w(&c));
    }

    #[test]
    fn aspp_branch_count_matches_rates() {
        let model = HrfNet::new(tiny_config(64), 0).unwrap();
        assert_eq!(model.aspp_branch_count(), 3); // rates [1,2] + pooled
        let full = ModelConfig::default();
        assert_eq!(full.aspp_rates.len() + 1, 5);
    }

    #[test]
    fn loss_decreases_under_gradient_step() {
        let model = HrfNet::new(tiny_config(64), 21).unwrap();
        let img = random_image(2, 64, 13);
        let mut mask = Tensor::zeros([2, 1, 64, 64]);
        for i in 0..64 * 64 / 2 {
            mask.data_mut()[i] = 1.0;
        }
        let out = model.loss_and_grads(&img, &mask, 10.0).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
        assert!(out.stat_updates.len() > 0);
        // every parameter with a gradient is finite
        for g in out.grads.iter().flatten() {
            assert!(g.is_finite());
        }
        // a small step along the negative gradient lowers the loss
        let mut stepped = HrfNet::new(tiny_config(64), 21).unwrap();
        for (pid, g) in out.grads.iter().enumerate() {
            if let Some(g) = g {
                let updated = stepped.params().get(pid).sub(&g.scale(1e-3));
                stepped.params_mut().set(pid, updated);
            }
        }
        let after = stepped.loss_only(&img, &mask, 10.0).unwrap();
        assert!(after < out.loss, "loss {} -> {}", out.loss, after);
    }

    #[test]
    fn rejects_wrong_input_shapes() {
        let model = HrfNet::new(tiny_config(64), 0).unwrap();
        let wrong_res = random_image(1, 96, 0);
        assert!(matches!(model.forward(&wrong_res), Err(Error::Shape(_))));
        let wrong_ch = Tensor::zeros([1, 4, 64, 64]);
        assert!(matches!(model.forward(&wrong_ch), Err(Error::Channels { .. })));
    }
}
