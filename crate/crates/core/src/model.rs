//! The foreground-aware two-branch network.
//!
//! A shared low-level stem feeds two residual branches with independent
//! weights. The foreground branch output F drives a target enhancement
//! module (TEM) that produces a soft foreground mask Zf; F is gated by Zf
//! and the background branch output B by 1 - Zf. Horizontal pyramid pooling
//! heads classify person identity on the gated foreground and camera
//! identity on the gated background. A target attention loss suppresses
//! spatially-normalized foreground responses in predicted-background cells
//! and vice versa.

use std::collections::HashSet;

use crate::ops::{self, BatchNorm2dParams, Conv2dParams};
use crate::optim::ParamSet;
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

/// HPP scale set: 1 + 2 + 4 + 8 = 15 stripes.
pub const HPP_SCALES: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TalVariant {
    None,
    V1,
    V2,
    Full,
}

impl TalVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown tal variant `{other}` (expected none|v1|v2|full)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::V1 => "v1",
            Self::V2 => "v2",
            Self::Full => "full",
        }
    }
}

/// Component switches mirroring the ablation rows, plus the TEM channel
/// count k and the per-stripe embedding width.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub enable_tem: bool,
    pub enable_background_branch: bool,
    pub enable_interaction: bool,
    pub tal_variant: TalVariant,
    pub enable_hpp: bool,
    pub k: usize,
    pub embed_dim: usize,
}

impl AblationConfig {
    /// Everything on: the full architecture.
    pub fn full() -> Self {
        Self {
            enable_tem: true,
            enable_background_branch: true,
            enable_interaction: true,
            tal_variant: TalVariant::Full,
            enable_hpp: true,
            k: 256,
            embed_dim: 64,
        }
    }

    /// Plain backbone + global average pooling + person classifier.
    pub fn baseline() -> Self {
        Self {
            enable_tem: false,
            enable_background_branch: false,
            enable_interaction: false,
            tal_variant: TalVariant::None,
            enable_hpp: false,
            k: 256,
            embed_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("attention channel count k must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if (self.enable_interaction || self.tal_variant != TalVariant::None)
            && !self.enable_background_branch
        {
            return Err(Error::Config(
                "interaction and target attention loss require the background branch".into(),
            ));
        }
        if (self.enable_interaction || self.tal_variant != TalVariant::None) && !self.enable_tem {
            return Err(Error::Config(
                "interaction and target attention loss require the attention module".into(),
            ));
        }
        Ok(())
    }

    pub fn stripe_count(&self) -> usize {
        if self.enable_hpp {
            HPP_SCALES.iter().sum()
        } else {
            1
        }
    }

    pub fn scales(&self) -> Vec<usize> {
        if self.enable_hpp {
            HPP_SCALES.to_vec()
        } else {
            vec![1]
        }
    }
}

/// Backbone geometry and label-space sizes.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub n_persons: usize,
    pub n_cameras: usize,
    pub stem_channels: usize,
    pub branch_mid_channels: usize,
    pub branch_out_channels: usize,
    /// Stride of the last branch stage: 1 keeps the final resolution
    /// (desk geometry, total stride 8); 2 halves it once more (paper
    /// geometry, total stride 16).
    pub final_stage_stride: usize,
    pub ablation: AblationConfig,
}

impl ModelConfig {
    /// Desk geometry: 128x48 input, total stride 8, 64-dim embeddings.
    pub fn desk(n_persons: usize, n_cameras: usize) -> Self {
        Self {
            in_channels: 3,
            input_h: 128,
            input_w: 48,
            n_persons,
            n_cameras,
            stem_channels: 64,
            branch_mid_channels: 128,
            branch_out_channels: 256,
            final_stage_stride: 1,
            ablation: AblationConfig::full(),
        }
    }

    /// Paper geometry: 384x128 input, total stride 16, 256-dim embeddings.
    pub fn paper(n_persons: usize, n_cameras: usize) -> Self {
        let mut cfg = Self::desk(n_persons, n_cameras);
        cfg.input_h = 384;
        cfg.input_w = 128;
        cfg.final_stage_stride = 2;
        cfg.ablation.embed_dim = 256;
        cfg
    }

    pub fn total_stride(&self) -> usize {
        2 * 2 * 2 * self.final_stage_stride
    }

    /// Spatial size of F and B.
    pub fn feature_hw(&self) -> (usize, usize) {
        (
            self.input_h / self.total_stride(),
            self.input_w / self.total_stride(),
        )
    }

    pub fn descriptor_len(&self) -> usize {
        self.ablation.stripe_count() * self.ablation.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        let stride = self.total_stride();
        if self.input_h % stride != 0 || self.input_w % stride != 0 {
            return Err(Error::Geometry(format!(
                "input {}x{} not divisible by total stride {stride}",
                self.input_h, self.input_w
            )));
        }
        let (hf, _) = self.feature_hw();
        if self.ablation.enable_hpp && hf < 8 {
            return Err(Error::Geometry(format!(
                "pyramid pooling needs feature height >= 8, got {hf}"
            )));
        }
        if self.n_persons == 0 || self.n_cameras == 0 {
            return Err(Error::Config("need at least one person and one camera".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct ConvBn {
    conv: Conv2dParams,
    bn: BatchNorm2dParams,
}

impl ConvBn {
    fn init(rng: &mut SplitMix64, out_ch: usize, in_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            conv: Conv2dParams::he_init(rng, out_ch, in_ch, kernel, stride, pad, false),
            bn: BatchNorm2dParams::new(out_ch),
        }
    }

    fn forward(&self, g: &mut Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = ops::conv2d(g, x, &self.conv)?;
        ops::batch_norm2d(g, &y, &self.bn, training)
    }

    fn register(&self, ps: &mut ParamSet, prefix: &str) {
        push_conv(ps, &format!("{prefix}.conv"), &self.conv);
        push_bn(ps, &format!("{prefix}.bn"), &self.bn);
    }
}

/// Two 3x3 conv+BN layers with a projected shortcut when shape changes;
/// ends in ReLU, so stage outputs are nonnegative.
#[derive(Clone)]
struct ResidualBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    fn init(rng: &mut SplitMix64, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let conv1 = ConvBn::init(rng, out_ch, in_ch, 3, stride, 1);
        let conv2 = ConvBn::init(rng, out_ch, out_ch, 3, 1, 1);
        let shortcut =
            (stride != 1 || in_ch != out_ch).then(|| ConvBn::init(rng, out_ch, in_ch, 1, stride, 0));
        Self {
            conv1,
            conv2,
            shortcut,
        }
    }

    fn forward(&self, g: &mut Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = self.conv1.forward(g, x, training)?;
        let y = ops::relu(g, &y)?;
        let y = self.conv2.forward(g, &y, training)?;
        let sc = match &self.shortcut {
            Some(p) => p.forward(g, x, training)?,
            None => x.clone(),
        };
        let s = ops::add(g, &y, &sc)?;
        ops::relu(g, &s)
    }

    fn register(&self, ps: &mut ParamSet, prefix: &str) {
        self.conv1.register(ps, &format!("{prefix}.conv1"));
        self.conv2.register(ps, &format!("{prefix}.conv2"));
        if let Some(sc) = &self.shortcut {
            sc.register(ps, &format!("{prefix}.shortcut"));
        }
    }
}

/// Target enhancement module: 1x1/256 + 3x3/128 conv blocks (BN+ReLU each)
/// and a bare 1x1 head producing k raw attention channels.
#[derive(Clone)]
pub struct TemParams {
    block1: ConvBn,
    block2: ConvBn,
    pub head: Conv2dParams,
    pub k: usize,
}

impl TemParams {
    pub fn init(rng: &mut SplitMix64, in_ch: usize, k: usize) -> Self {
        Self {
            block1: ConvBn::init(rng, 256, in_ch, 1, 1, 0),
            block2: ConvBn::init(rng, 128, 256, 3, 1, 1),
            head: Conv2dParams::he_init(rng, k, 128, 1, 1, 0, true),
            k,
        }
    }

    /// Copy sharing every tensor except the head weight.
    pub fn with_head_weight(&self, weight: Tensor) -> Result<Self> {
        let mut out = self.clone();
        out.head = Conv2dParams::new(weight, self.head.bias.clone(), 1, 0)?;
        Ok(out)
    }

    /// Shifts both BN offsets so block activations are mostly positive;
    /// finite-difference probes then stay clear of the relu kink.
    pub fn bias_away_from_relu_kink(&self, shift: f32) {
        for bn in [&self.block1.bn, &self.block2.bn] {
            let n = bn.beta.numel();
            bn.beta.copy_from(&vec![shift; n]);
        }
    }

    fn register(&self, ps: &mut ParamSet, prefix: &str) {
        self.block1.register(ps, &format!("{prefix}.b1"));
        self.block2.register(ps, &format!("{prefix}.b2"));
        push_conv(ps, &format!("{prefix}.head"), &self.head);
    }
}

/// Per-stripe embedding (linear -> BN, D dims) and classifier.
#[derive(Clone)]
struct StripeHead {
    embed_w: Tensor,
    embed_b: Tensor,
    embed_bn: BatchNorm2dParams,
    cls_w: Tensor,
    cls_b: Tensor,
}

impl StripeHead {
    fn init(rng: &mut SplitMix64, in_dim: usize, embed_dim: usize, n_classes: usize) -> Self {
        let xavier = (2.0 / (in_dim + embed_dim) as f64).sqrt();
        let embed_w = Tensor::param(
            vec![embed_dim, in_dim],
            (0..embed_dim * in_dim)
                .map(|_| (rng.gaussian() * xavier) as f32)
                .collect(),
        );
        let embed_b = Tensor::param(vec![embed_dim], vec![0.0; embed_dim]);
        // classifiers start near zero so the initial loss is ~ln(n_classes)
        let cls_w = Tensor::param(
            vec![n_classes, embed_dim],
            (0..n_classes * embed_dim)
                .map(|_| (rng.gaussian() * 0.001) as f32)
                .collect(),
        );
        let cls_b = Tensor::param(vec![n_classes], vec![0.0; n_classes]);
        Self {
            embed_w,
            embed_b,
            embed_bn: BatchNorm2dParams::new(embed_dim),
            cls_w,
            cls_b,
        }
    }

    /// Returns (embedded [N,D], logits [N,K]).
    fn forward(&self, g: &mut Graph, pooled: &Tensor, training: bool) -> Result<(Tensor, Tensor)> {
        let n = pooled.shape()[0];
        let d = self.embed_w.shape()[0];
        let e = ops::linear(g, pooled, &self.embed_w, &self.embed_b)?;
        let e4 = ops::reshape(g, &e, vec![n, d, 1, 1])?;
        let eb = ops::batch_norm2d(g, &e4, &self.embed_bn, training)?;
        let e2 = ops::reshape(g, &eb, vec![n, d])?;
        let logits = ops::linear(g, &e2, &self.cls_w, &self.cls_b)?;
        Ok((e2, logits))
    }

    fn register(&self, ps: &mut ParamSet, prefix: &str) {
        ps.push(format!("{prefix}.embed.weight"), self.embed_w.clone(), true);
        ps.push(format!("{prefix}.embed.bias"), self.embed_b.clone(), true);
        push_bn(ps, &format!("{prefix}.embed.bn"), &self.embed_bn);
        ps.push(format!("{prefix}.cls.weight"), self.cls_w.clone(), true);
        ps.push(format!("{prefix}.cls.bias"), self.cls_b.clone(), true);
    }
}

/// All stripe heads of one branch, in fixed scale-major order.
#[derive(Clone)]
pub struct BranchHeads {
    scales: Vec<usize>,
    stripes: Vec<StripeHead>,
}

impl BranchHeads {
    fn init(
        rng: &mut SplitMix64,
        scales: &[usize],
        in_dim: usize,
        embed_dim: usize,
        n_classes: usize,
    ) -> Self {
        let total: usize = scales.iter().sum();
        let stripes = (0..total)
            .map(|_| StripeHead::init(rng, in_dim, embed_dim, n_classes))
            .collect();
        Self {
            scales: scales.to_vec(),
            stripes,
        }
    }

    fn register(&self, ps: &mut ParamSet, prefix: &str) {
        let mut idx = 0;
        for scale in &self.scales {
            for s in 0..*scale {
                self.stripes[idx].register(ps, &format!("{prefix}.sc{scale}.st{s}"));
                idx += 1;
            }
        }
    }
}

fn push_conv(ps: &mut ParamSet, prefix: &str, conv: &Conv2dParams) {
    ps.push(format!("{prefix}.weight"), conv.weight.clone(), true);
    if let Some(b) = &conv.bias {
        ps.push(format!("{prefix}.bias"), b.clone(), true);
    }
}

fn push_bn(ps: &mut ParamSet, prefix: &str, bn: &BatchNorm2dParams) {
    ps.push(format!("{prefix}.gamma"), bn.gamma.clone(), true);
    ps.push(format!("{prefix}.beta"), bn.beta.clone(), true);
    ps.push(format!("{prefix}.running_mean"), bn.running_mean.clone(), false);
    ps.push(format!("{prefix}.running_var"), bn.running_var.clone(), false);
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

/// All learnable state of the network.
#[derive(Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    stem_conv: ConvBn,
    stem_stage: ResidualBlock,
    fg_stage1: ResidualBlock,
    fg_stage2: ResidualBlock,
    bg_stage1: Option<ResidualBlock>,
    bg_stage2: Option<ResidualBlock>,
    pub tem: Option<TemParams>,
    fg_heads: BranchHeads,
    bg_heads: Option<BranchHeads>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let a = &config.ablation;
        let stem_conv = ConvBn::init(&mut rng, config.stem_channels, config.in_channels, 7, 2, 3);
        let stem_stage =
            ResidualBlock::init(&mut rng, config.stem_channels, config.stem_channels, 2);
        let fg_stage1 = ResidualBlock::init(
            &mut rng,
            config.stem_channels,
            config.branch_mid_channels,
            2,
        );
        let fg_stage2 = ResidualBlock::init(
            &mut rng,
            config.branch_mid_channels,
            config.branch_out_channels,
            config.final_stage_stride,
        );
        // equal shapes, independent storage
        let (bg_stage1, bg_stage2) = if a.enable_background_branch {
            (
                Some(ResidualBlock::init(
                    &mut rng,
                    config.stem_channels,
                    config.branch_mid_channels,
                    2,
                )),
                Some(ResidualBlock::init(
                    &mut rng,
                    config.branch_mid_channels,
                    config.branch_out_channels,
                    config.final_stage_stride,
                )),
            )
        } else {
            (None, None)
        };
        let tem = a
            .enable_tem
            .then(|| TemParams::init(&mut rng, config.branch_out_channels, a.k));
        let scales = a.scales();
        let fg_heads = BranchHeads::init(
            &mut rng,
            &scales,
            config.branch_out_channels,
            a.embed_dim,
            config.n_persons,
        );
        let bg_heads = a.enable_background_branch.then(|| {
            BranchHeads::init(
                &mut rng,
                &scales,
                config.branch_out_channels,
                a.embed_dim,
                config.n_cameras,
            )
        });
        Ok(Self {
            config,
            stem_conv,
            stem_stage,
            fg_stage1,
            fg_stage2,
            bg_stage1,
            bg_stage2,
            tem,
            fg_heads,
            bg_heads,
        })
    }

    /// Named view of every tensor, ordered by construction.
    pub fn param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.stem_conv.register(&mut ps, "stem");
        self.stem_stage.register(&mut ps, "stem.res");
        self.fg_stage1.register(&mut ps, "fg_branch.s1");
        self.fg_stage2.register(&mut ps, "fg_branch.s2");
        if let Some(b) = &self.bg_stage1 {
            b.register(&mut ps, "bg_branch.s1");
        }
        if let Some(b) = &self.bg_stage2 {
            b.register(&mut ps, "bg_branch.s2");
        }
        if let Some(t) = &self.tem {
            t.register(&mut ps, "tem");
        }
        self.fg_heads.register(&mut ps, "fg_heads");
        if let Some(h) = &self.bg_heads {
            h.register(&mut ps, "bg_heads");
        }
        ps
    }

    /// Ids of every tensor belonging to the background branch or its heads.
    pub fn bg_param_ids(&self) -> HashSet<u64> {
        self.param_set()
            .iter()
            .filter(|e| e.name.starts_with("bg_branch.") || e.name.starts_with("bg_heads."))
            .map(|e| e.tensor.id())
            .collect()
    }

    /// Copy sharing every tensor except the TEM head weight (for gradient
    /// checks of the full objective with respect to those weights).
    pub fn with_tem_head_weight(&self, weight: Tensor) -> Result<Self> {
        let tem = self
            .tem
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no attention module".into()))?;
        let mut out = self.clone();
        out.tem = Some(tem.with_head_weight(weight)?);
        Ok(out)
    }

    fn stem_forward(&self, g: &mut Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = self.stem_conv.forward(g, x, training)?;
        let y = ops::relu(g, &y)?;
        self.stem_stage.forward(g, &y, training)
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor, training: bool) -> Result<ForwardOutputs> {
        model_forward(g, x, self, training)
    }

    /// Foreground-only pass for descriptor extraction; the background
    /// branch is never executed here.
    pub fn forward_inference(&self, g: &mut Graph, x: &Tensor) -> Result<InferenceOutputs> {
        let low = self.stem_forward(g, x, false)?;
        let f = self.fg_stage1.forward(g, &low, false)?;
        let f = self.fg_stage2.forward(g, &f, false)?;
        let zf = match &self.tem {
            Some(tem) => Some(tem_forward(g, &f, tem, false)?),
            None => None,
        };
        let gated = match &zf {
            Some(zf) => ops::broadcast_mul(g, &f, zf)?,
            None => f.clone(),
        };
        let (_, descriptor) = hpp_heads(g, &gated, &self.fg_heads, false)?;
        Ok(InferenceOutputs {
            descriptor,
            fg_mask: zf,
        })
    }
}

/// One full forward pass: maps, mask, gated maps, per-stripe logits,
/// concatenated descriptor.
pub struct ForwardOutputs {
    pub fg_features: Tensor,
    pub bg_features: Option<Tensor>,
    pub fg_mask: Option<Tensor>,
    pub fg_gated: Tensor,
    pub bg_gated: Option<Tensor>,
    pub fg_logits: Vec<Tensor>,
    pub bg_logits: Option<Vec<Tensor>>,
    pub descriptor: Tensor,
}

/// Descriptor-extraction outputs (foreground path only).
pub struct InferenceOutputs {
    pub descriptor: Tensor,
    pub fg_mask: Option<Tensor>,
}

/// Zf = sigmoid(mean over the k raw attention channels); strictly in (0,1).
pub fn tem_forward(g: &mut Graph, f: &Tensor, tem: &TemParams, training: bool) -> Result<Tensor> {
    let y = tem.block1.forward(g, f, training)?;
    let y = ops::relu(g, &y)?;
    let y = tem.block2.forward(g, &y, training)?;
    let y = ops::relu(g, &y)?;
    let zraw = ops::conv2d(g, &y, &tem.head)?;
    let zmean = ops::channel_mean(g, &zraw)?;
    ops::sigmoid(g, &zmean)
}

/// Fg = F (.) Zf always; Bg = B (.) (1 - Zf) under interaction, else B.
pub fn gate_features(
    g: &mut Graph,
    f: &Tensor,
    b: Option<&Tensor>,
    zf: &Tensor,
    enable_interaction: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let fg = ops::broadcast_mul(g, f, zf)?;
    let bg = match b {
        Some(b) if enable_interaction => {
            let zb = ops::one_minus(g, zf)?;
            Some(ops::broadcast_mul(g, b, &zb)?)
        }
        Some(b) => Some(b.clone()),
        None => None,
    };
    Ok((fg, bg))
}

/// Target attention loss over raw branch features and the soft mask.
pub fn target_attention_loss(
    g: &mut Graph,
    f: &Tensor,
    b: &Tensor,
    zf: &Tensor,
    variant: TalVariant,
) -> Result<Tensor> {
    if f.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "target_attention_loss",
            expected: f.shape(),
            got: b.shape(),
        });
    }
    match variant {
        TalVariant::None => Ok(Tensor::scalar(0.0)),
        TalVariant::V1 => {
            let s = ops::add(g, f, b)?;
            ops::mean_all(g, &s)
        }
        TalVariant::V2 => {
            let zb = ops::one_minus(g, zf)?;
            let t1 = ops::broadcast_mul(g, f, &zb)?;
            let t2 = ops::broadcast_mul(g, b, zf)?;
            let s = ops::add(g, &t1, &t2)?;
            ops::mean_all(g, &s)
        }
        TalVariant::Full => {
            let f_l2 = ops::spatial_l2_normalize(g, f, 1e-12)?;
            let b_l2 = ops::spatial_l2_normalize(g, b, 1e-12)?;
            let zb = ops::one_minus(g, zf)?;
            let t1 = ops::broadcast_mul(g, &f_l2, &zb)?;
            let t2 = ops::broadcast_mul(g, &b_l2, zf)?;
            let s = ops::add(g, &t1, &t2)?;
            ops::mean_all(g, &s)
        }
    }
}

/// Pools the gated map at every scale, embeds and classifies each stripe;
/// returns per-stripe logits and the concatenated descriptor.
pub fn hpp_heads(
    g: &mut Graph,
    gated: &Tensor,
    heads: &BranchHeads,
    training: bool,
) -> Result<(Vec<Tensor>, Tensor)> {
    let shape = gated.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "hpp_heads",
            expected: vec![0, 0, 0, 0],
            got: shape,
        });
    }
    let h = shape[2];
    let max_scale = heads.scales.iter().copied().max().unwrap_or(1);
    if h < max_scale {
        return Err(Error::Geometry(format!(
            "feature height {h} too small for {max_scale} stripes"
        )));
    }
    let mut logits = Vec::with_capacity(heads.stripes.len());
    let mut embedded = Vec::with_capacity(heads.stripes.len());
    let mut idx = 0;
    for &scale in &heads.scales {
        let pooled = ops::stripe_avg_pool(g, gated, scale)?;
        for s in 0..scale {
            let v = ops::stripe_at(g, &pooled, s)?;
            let (e, l) = heads.stripes[idx].forward(g, &v, training)?;
            embedded.push(e);
            logits.push(l);
            idx += 1;
        }
    }
    let descriptor = ops::concat_cols(g, &embedded)?;
    Ok((logits, descriptor))
}

/// Full forward pass honoring the ablation switches.
pub fn model_forward(
    g: &mut Graph,
    x: &Tensor,
    params: &ModelParams,
    training: bool,
) -> Result<ForwardOutputs> {
    let cfg = &params.config;
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            context: "model_forward input",
            expected: vec![0, cfg.in_channels, cfg.input_h, cfg.input_w],
            got: shape,
        });
    }
    let stride = cfg.total_stride();
    if shape[2] % stride != 0 || shape[3] % stride != 0 {
        return Err(Error::Geometry(format!(
            "input {}x{} not divisible by total stride {stride}",
            shape[2], shape[3]
        )));
    }

    let low = params.stem_forward(g, x, training)?;
    let f = params.fg_stage1.forward(g, &low, training)?;
    let f = params.fg_stage2.forward(g, &f, training)?;
    let b = match (&params.bg_stage1, &params.bg_stage2) {
        (Some(s1), Some(s2)) => {
            let y = s1.forward(g, &low, training)?;
            Some(s2.forward(g, &y, training)?)
        }
        _ => None,
    };

    let zf = match &params.tem {
        Some(tem) => Some(tem_forward(g, &f, tem, training)?),
        None => None,
    };
    let (fg_gated, bg_gated) = match &zf {
        Some(zf) => gate_features(g, &f, b.as_ref(), zf, cfg.ablation.enable_interaction)?,
        None => (f.clone(), b.clone()),
    };

    let (fg_logits, descriptor) = hpp_heads(g, &fg_gated, &params.fg_heads, training)?;
    let bg_logits = match (&bg_gated, &params.bg_heads) {
        (Some(bg), Some(heads)) => Some(hpp_heads(g, bg, heads, training)?.0),
        _ => None,
    };

    Ok(ForwardOutputs {
        fg_features: f,
        bg_features: b,
        fg_mask: zf,
        fg_gated,
        bg_gated,
        fg_logits,
        bg_logits,
        descriptor,
    })
}

/// Loss components: total, foreground, background, target attention.
pub struct LossTerms {
    pub total: Tensor,
    pub fg: Tensor,
    pub bg: Tensor,
    pub tal: Tensor,
}

fn mean_stripe_ce(g: &mut Graph, logits: &[Tensor], targets: &[usize]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for l in logits {
        let ce = ops::softmax_cross_entropy(g, l, targets)?;
        acc = Some(match acc {
            Some(a) => ops::add(g, &a, &ce)?,
            None => ce,
        });
    }
    let acc = acc.ok_or_else(|| Error::Contract("no stripe logits".into()))?;
    ops::scale(g, &acc, 1.0 / logits.len() as f32)
}

/// L = (Lf + Lb)/2 + Lt; stripe losses are averaged so the magnitude is
/// invariant to the pyramid being enabled.
pub fn overall_loss(
    g: &mut Graph,
    outputs: &ForwardOutputs,
    person_ids: &[usize],
    camera_ids: &[usize],
    ablation: &AblationConfig,
) -> Result<LossTerms> {
    let fg = mean_stripe_ce(g, &outputs.fg_logits, person_ids)?;
    let (bg, half) = match &outputs.bg_logits {
        Some(logits) => {
            let bg = mean_stripe_ce(g, logits, camera_ids)?;
            let s = ops::add(g, &fg, &bg)?;
            (bg, ops::scale(g, &s, 0.5)?)
        }
        None => (Tensor::scalar(0.0), ops::scale(g, &fg, 0.5)?),
    };
    let tal = match (ablation.tal_variant, &outputs.bg_features, &outputs.fg_mask) {
        (TalVariant::None, _, _) => Tensor::scalar(0.0),
        (v, Some(b), Some(zf)) => target_attention_loss(g, &outputs.fg_features, b, zf, v)?,
        _ => {
            return Err(Error::Contract(
                "target attention loss needs background features and the soft mask".into(),
            ))
        }
    };
    let total = if ablation.tal_variant == TalVariant::None {
        half
    } else {
        ops::add(g, &half, &tal)?
    };
    Ok(LossTerms { total, fg, bg, tal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward_pass;

    fn tiny_config(ablation: AblationConfig) -> ModelConfig {
        let mut cfg = ModelConfig::desk(4, 3);
        cfg.input_h = 64;
        cfg.input_w = 16;
        cfg.ablation = ablation;
        cfg.ablation.k = 8;
        cfg.ablation.embed_dim = 8;
        cfg
    }

    fn random_batch(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let len = n * cfg.in_channels * cfg.input_h * cfg.input_w;
        Tensor::new(
            vec![n, cfg.in_channels, cfg.input_h, cfg.input_w],
            (0..len).map(|_| rng.next_f64() as f32).collect(),
        )
    }

    #[test]
    fn desk_geometry_shapes() {
        let cfg = ModelConfig::desk(4, 3);
        assert_eq!(cfg.feature_hw(), (16, 6));
        assert_eq!(cfg.descriptor_len(), 15 * 64);
        let params = ModelParams::init(cfg.clone(), 1).unwrap();
        let x = random_batch(2, &cfg, 7);
        let mut g = Graph::inference();
        let out = params.forward(&mut g, &x, false).unwrap();
        assert_eq!(out.fg_features.shape(), vec![2, 256, 16, 6]);
        assert_eq!(out.fg_mask.as_ref().unwrap().shape(), vec![2, 1, 16, 6]);
        assert_eq!(out.descriptor.shape(), vec![2, 960]);
        assert_eq!(out.fg_logits.len(), 15);
    }

    #[test]
    fn paper_geometry_shapes() {
        let cfg = ModelConfig::paper(4, 3);
        assert_eq!(cfg.feature_hw(), (24, 8));
        assert_eq!(cfg.descriptor_len(), 3840);
    }

    #[test]
    fn mask_is_strictly_inside_unit_interval() {
        let cfg = tiny_config(AblationConfig::full());
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let x = random_batch(2, &cfg, 5);
        let mut g = Graph::inference();
        let out = params.forward(&mut g, &x, false).unwrap();
        let zf = out.fg_mask.unwrap();
        for v in zf.values().iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn background_disabled_drops_bg_outputs() {
        let mut ab = AblationConfig::full();
        ab.enable_background_branch = false;
        ab.enable_interaction = false;
        ab.tal_variant = TalVariant::None;
        let cfg = tiny_config(ab);
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let x = random_batch(2, &cfg, 5);
        let mut g = Graph::inference();
        let out = params.forward(&mut g, &x, false).unwrap();
        assert!(out.bg_features.is_none());
        assert!(out.bg_gated.is_none());
        assert!(out.bg_logits.is_none());
        assert!(out.fg_mask.is_some()); // Fg still gated by Zf
    }

    #[test]
    fn interaction_off_keeps_bg_bitwise_identical() {
        let mut g = Graph::new();
        let f = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let zf = Tensor::new(vec![1, 1, 2, 2], vec![0.5, 1.0, 0.0, 1.0]);
        let (fg, bg) = gate_features(&mut g, &f, Some(&b), &zf, false).unwrap();
        assert_eq!(fg.to_vec(), vec![0.5, 2.0, 0.0, 4.0]);
        assert_eq!(bg.unwrap().to_vec(), b.to_vec());

        // saturated mask: Fg = F, Bg = 0 under interaction
        let ones = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let (fg, bg) = gate_features(&mut g, &f, Some(&b), &ones, true).unwrap();
        assert_eq!(fg.to_vec(), f.to_vec());
        assert!(bg.unwrap().to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tal_hand_computed_example() {
        let mut g = Graph::new();
        let f = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]);
        let b = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]);
        let zf = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]);
        let loss = target_attention_loss(&mut g, &f, &b, &zf, TalVariant::Full).unwrap();
        assert!((loss.item() - 0.6).abs() < 1e-6, "got {}", loss.item());
    }

    #[test]
    fn tal_vanishes_on_perfect_separation() {
        let mut g = Graph::new();
        let eps = 1e-3f32;
        let f = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]);
        let b = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]);
        let zf = Tensor::new(vec![1, 1, 1, 2], vec![1.0 - eps, eps]);
        let loss = target_attention_loss(&mut g, &f, &b, &zf, TalVariant::Full).unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() < 0.05, "got {}", loss.item());
    }

    #[test]
    fn tal_none_is_exactly_zero_without_gradient() {
        let mut g = Graph::new();
        let f = Tensor::param(vec![1, 1, 1, 2], vec![1.0, 0.0]);
        let b = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]);
        let zf = Tensor::new(vec![1, 1, 1, 2], vec![0.9, 0.1]);
        let loss = target_attention_loss(&mut g, &f, &b, &zf, TalVariant::None).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert!(!loss.requires_grad());
    }

    #[test]
    fn tal_variants_differ() {
        let mut g = Graph::new();
        let f = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]);
        let b = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]);
        let zf = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]);
        let v1 = target_attention_loss(&mut g, &f, &b, &zf, TalVariant::V1).unwrap();
        // avg of F+B entries: (4 + 4)/2 = 4
        assert!((v1.item() - 4.0).abs() < 1e-6);
        let v2 = target_attention_loss(&mut g, &f, &b, &zf, TalVariant::V2).unwrap();
        // avg of F*(1-Zf)+B*Zf = ((1.5+0.5)+(2.0+0))/2 = 2
        assert!((v2.item() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn overall_loss_combines_halved_ce_terms() {
        let mut g = Graph::new();
        let fg = Tensor::scalar(2.0);
        let bg = Tensor::scalar(1.0);
        let tal = Tensor::scalar(0.5);
        let s = ops::add(&mut g, &fg, &bg).unwrap();
        let half = ops::scale(&mut g, &s, 0.5).unwrap();
        let total = ops::add(&mut g, &half, &tal).unwrap();
        assert!((total.item() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn overall_loss_without_background_reports_zero_bg() {
        let mut ab = AblationConfig::full();
        ab.enable_background_branch = false;
        ab.enable_interaction = false;
        ab.tal_variant = TalVariant::None;
        let cfg = tiny_config(ab);
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let x = random_batch(2, &cfg, 5);
        let mut g = Graph::new();
        let out = params.forward(&mut g, &x, true).unwrap();
        let losses = overall_loss(&mut g, &out, &[0, 1], &[0, 0], &cfg.ablation).unwrap();
        assert_eq!(losses.bg.item(), 0.0);
        assert_eq!(losses.tal.item(), 0.0);
        let want = 0.5 * losses.fg.item();
        assert!((losses.total.item() - want).abs() < 1e-6);
    }

    #[test]
    fn gating_idempotence_under_all_ones_map() {
        let cfg = tiny_config(AblationConfig::full());
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let x = random_batch(2, &cfg, 5);
        let mut g = Graph::inference();
        let out = params.forward(&mut g, &x, false).unwrap();
        let shape = out.fg_gated.shape();
        let ones = Tensor::full(vec![shape[0], 1, shape[2], shape[3]], 1.0);
        let again = ops::broadcast_mul(&mut g, &out.fg_gated, &ones).unwrap();
        assert_eq!(again.to_vec(), out.fg_gated.to_vec());
    }

    #[test]
    fn interaction_routes_bg_loss_gradient_into_tem() {
        for ia in [false, true] {
            let mut ab = AblationConfig::full();
            ab.enable_interaction = ia;
            ab.tal_variant = TalVariant::None;
            let cfg = tiny_config(ab);
            let params = ModelParams::init(cfg.clone(), 9).unwrap();
            let x = random_batch(2, &cfg, 11);
            let mut g = Graph::new();
            let out = params.forward(&mut g, &x, true).unwrap();
            let bg = mean_stripe_ce(&mut g, out.bg_logits.as_ref().unwrap(), &[0, 1]).unwrap();
            backward_pass(&mut g, &bg).unwrap();
            let head_grad = params.tem.as_ref().unwrap().head.weight.grad().unwrap();
            let max_abs = head_grad.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if ia {
                assert!(max_abs > 1e-8, "interaction on: expected TEM gradient, got {max_abs}");
            } else {
                assert_eq!(max_abs, 0.0, "interaction off: TEM must not see bg loss");
            }
        }
    }

    #[test]
    fn zero_attention_head_gives_uniform_half_mask() {
        let cfg = tiny_config(AblationConfig::full());
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let tem = params.tem.as_ref().unwrap();
        tem.head.weight.copy_from(&vec![0.0; tem.head.weight.numel()]);
        if let Some(b) = &tem.head.bias {
            b.copy_from(&vec![0.0; b.numel()]);
        }
        let x = random_batch(2, &cfg, 5);
        let mut g = Graph::inference();
        let out = params.forward(&mut g, &x, false).unwrap();
        for v in out.fg_mask.unwrap().values().iter() {
            assert!((*v - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_mean_then_sigmoid_arithmetic() {
        // a location with raw channels (2.0, 0.0) averages to 1.0
        let mut g = Graph::new();
        let zraw = Tensor::new(vec![1, 2, 1, 1], vec![2.0, 0.0]);
        let zmean = ops::channel_mean(&mut g, &zraw).unwrap();
        let zf = ops::sigmoid(&mut g, &zmean).unwrap();
        assert!((zf.to_vec()[0] - 0.731059).abs() < 1e-5);
    }

    #[test]
    fn descriptor_length_tracks_hpp_switch() {
        for hpp in [true, false] {
            let mut ab = AblationConfig::full();
            ab.enable_hpp = hpp;
            let cfg = tiny_config(ab);
            let params = ModelParams::init(cfg.clone(), 3).unwrap();
            let x = random_batch(2, &cfg, 5);
            let mut g = Graph::inference();
            let out = params.forward(&mut g, &x, false).unwrap();
            let want = if hpp { 15 * 8 } else { 8 };
            assert_eq!(out.descriptor.shape(), vec![2, want]);
        }
    }

    #[test]
    fn ablation_constraints_are_enforced() {
        let mut ab = AblationConfig::full();
        ab.enable_background_branch = false;
        assert!(ab.validate().is_err());

        let mut ab = AblationConfig::baseline();
        ab.tal_variant = TalVariant::Full;
        assert!(ab.validate().is_err());
    }

    #[test]
    fn branches_have_identical_shapes_but_independent_storage() {
        let cfg = tiny_config(AblationConfig::full());
        let params = ModelParams::init(cfg, 3).unwrap();
        let ps = params.param_set();
        let fg: Vec<_> = ps.iter().filter(|e| e.name.starts_with("fg_branch.")).collect();
        let bg: Vec<_> = ps.iter().filter(|e| e.name.starts_with("bg_branch.")).collect();
        assert_eq!(fg.len(), bg.len());
        for (f, b) in fg.iter().zip(&bg) {
            assert_eq!(f.tensor.shape(), b.tensor.shape());
            assert_ne!(f.tensor.id(), b.tensor.id());
        }
    }
}
