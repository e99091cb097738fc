//! Image-restoration host network.
//!
//! A small U-shaped encoder/decoder: stride-2 convolutions downsample,
//! nearest-neighbor upsampling plus convolution brings features back up,
//! and each skip connection is routed through its own [`PipModule`]
//! before being concatenated into the decoder. Channel counts double per
//! scale; prompt grids halve. The network output is a residual on top of
//! the input image, with the final write convolution zero-initialized so
//! an untrained model is an exact identity.
//!
//! Skips are indexed by scale `s = 0 .. levels−2`; scale `levels−1` is
//! the bottleneck. Input height and width must be divisible by
//! `2^(levels−1)`.

use crate::graph::{Bound, Graph, Var};
use crate::num::Scalar;
use crate::params::{ParamId, ParamStore};
use crate::pip::{PipConfig, PipModule};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;

// ── configuration ──

/// Shape and wiring knobs for the host network.
#[derive(Debug, Clone)]
pub struct UNetConfig {
    /// Resolution scales, bottleneck included (≥ 2). Skips live at scales
    /// `0 .. levels−2`.
    pub levels: usize,
    /// Channels at scale 0, doubling each scale down.
    pub base_channels: usize,
    /// Residual conv blocks per encoder/decoder stage.
    pub blocks_per_level: usize,
    /// Image channels (3 for RGB).
    pub in_channels: usize,
    /// Task count for every prompt instance.
    pub tasks: usize,
    /// Prompt grid side at the first skip, halving per scale (min 1).
    pub prompt_spatial: usize,
    /// Prompt wiring variant `a`–`e` applied to every instance.
    pub variant: char,
    /// Minimum pairwise bank angle for the spread loss (radians).
    pub theta_thre: f64,
    /// Skip the prompt modules entirely (plain U-Net, no prompt params).
    pub pip_bypass: bool,
    /// Optional per-skip tweaks to the derived prompt configs; empty means
    /// every skip uses the derived defaults, otherwise one entry per skip.
    pub pip_overrides: Vec<PipOverride>,
}

/// Per-skip adjustments applied on top of the derived prompt config.
/// `None` fields keep the derived value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipOverride {
    /// Replacement top-m ratio list for the sparsified feature attention.
    pub m_ratios: Option<Vec<f64>>,
    /// Replacement hidden-width multiplier for the gated feed-forward.
    pub expansion: Option<usize>,
}

impl UNetConfig {
    pub fn new(tasks: usize) -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 16,
            blocks_per_level: 2,
            in_channels: 3,
            tasks,
            prompt_spatial: 16,
            variant: 'e',
            theta_thre: std::f64::consts::FRAC_PI_2,
            pip_bypass: false,
            pip_overrides: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config("levels must be at least 2".into()));
        }
        if self.base_channels == 0 || self.blocks_per_level == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel and block counts must be positive".into()));
        }
        if self.tasks == 0 {
            return Err(Error::Config("task count must be positive".into()));
        }
        if self.prompt_spatial == 0 {
            return Err(Error::Config("prompt_spatial must be positive".into()));
        }
        if !self.pip_overrides.is_empty() && self.pip_overrides.len() != self.levels - 1 {
            return Err(Error::Config(format!(
                "pip_overrides must have one entry per skip ({}), got {}",
                self.levels - 1,
                self.pip_overrides.len()
            )));
        }
        Ok(())
    }

    /// Channels at scale `s`.
    pub fn channels_at(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Prompt dimensions for each skip: channels follow the scale,
    /// spatial side halves per scale.
    pub fn pip_configs(&self) -> Result<Vec<PipConfig>> {
        self.validate()?;
        (0..self.levels - 1)
            .map(|s| {
                let side = (self.prompt_spatial >> s).max(1);
                let mut cfg =
                    PipConfig::new(self.tasks, self.channels_at(s), side, side, self.channels_at(s))
                        .with_variant(self.variant)?;
                cfg.theta_thre = self.theta_thre;
                if let Some(ov) = self.pip_overrides.get(s) {
                    if let Some(ratios) = &ov.m_ratios {
                        cfg.m_ratios = ratios.clone();
                    }
                    if let Some(exp) = ov.expansion {
                        cfg.expansion = exp;
                    }
                }
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

// ── building blocks ──

/// Shape-preserving residual block: `x + conv₂(gelu(LN(conv₁ x)))`.
struct ConvBlock {
    w1: ParamId,
    b1: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ConvBlock {
    fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        ch: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (ch as f64 * 9.0)).sqrt();
        ConvBlock {
            w1: store.add(format!("{prefix}.w1"), Tensor::randn(vec![ch, ch, 3, 3], std, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![ch])),
            ln_g: store.add(format!("{prefix}.ln_g"), Tensor::full(vec![ch], T::one())),
            ln_b: store.add(format!("{prefix}.ln_b"), Tensor::zeros(vec![ch])),
            w2: store.add(format!("{prefix}.w2"), Tensor::randn(vec![ch, ch, 3, 3], std, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![ch])),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, x: Var) -> Result<Var> {
        let c1 = g.conv3x3(x, bd[self.w1], Some(bd[self.b1]), 1)?;
        let ln = g.layernorm_chw(c1, bd[self.ln_g], bd[self.ln_b])?;
        let act = g.gelu(ln)?;
        let c2 = g.conv3x3(act, bd[self.w2], Some(bd[self.b2]), 1)?;
        g.add(x, c2)
    }
}

/// Plain conv3x3 weight/bias pair.
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        zero_init: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (cin as f64 * 9.0)).sqrt();
        let w = if zero_init {
            Tensor::zeros(vec![cout, cin, 3, 3])
        } else {
            Tensor::randn(vec![cout, cin, 3, 3], std, rng)
        };
        Conv {
            w: store.add(format!("{prefix}.w"), w),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![cout])),
        }
    }
}

/// 1×1 fuse of concatenated decoder features.
struct Fuse {
    w: ParamId,
    b: ParamId,
}

impl Fuse {
    fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / cin as f64).sqrt();
        Fuse {
            w: store.add(format!("{prefix}.w"), Tensor::randn(vec![cout, cin], std, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![cout])),
        }
    }
}

// ── the network ──

/// U-shaped restoration network with one prompt module per skip.
pub struct UNet {
    pub cfg: UNetConfig,
    stem: Conv,
    enc_blocks: Vec<Vec<ConvBlock>>,
    downs: Vec<Conv>,
    mid_blocks: Vec<ConvBlock>,
    ups: Vec<Conv>,
    fuses: Vec<Fuse>,
    dec_blocks: Vec<Vec<ConvBlock>>,
    head: Conv,
    /// One prompt instance per skip (empty when bypassed).
    pub pips: Vec<PipModule>,
}

impl UNet {
    /// Register all parameters under `prefix` and return the wired model.
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: UNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let skips = cfg.levels - 1;
        let stem = Conv::create(store, &format!("{prefix}.stem"), cfg.in_channels, cfg.channels_at(0), false, rng);
        let mut enc_blocks = Vec::with_capacity(skips);
        let mut downs = Vec::with_capacity(skips);
        for s in 0..skips {
            let ch = cfg.channels_at(s);
            enc_blocks.push(
                (0..cfg.blocks_per_level)
                    .map(|i| ConvBlock::create(store, &format!("{prefix}.enc{s}.block{i}"), ch, rng))
                    .collect(),
            );
            downs.push(Conv::create(
                store,
                &format!("{prefix}.down{s}"),
                ch,
                cfg.channels_at(s + 1),
                false,
                rng,
            ));
        }
        let mid_ch = cfg.channels_at(cfg.levels - 1);
        let mid_blocks = (0..cfg.blocks_per_level)
            .map(|i| ConvBlock::create(store, &format!("{prefix}.mid.block{i}"), mid_ch, rng))
            .collect();
        let mut ups = Vec::with_capacity(skips);
        let mut fuses = Vec::with_capacity(skips);
        let mut dec_blocks = Vec::with_capacity(skips);
        for s in (0..skips).rev() {
            let ch = cfg.channels_at(s);
            ups.push(Conv::create(store, &format!("{prefix}.up{s}"), cfg.channels_at(s + 1), ch, false, rng));
            fuses.push(Fuse::create(store, &format!("{prefix}.fuse{s}"), 2 * ch, ch, rng));
            dec_blocks.push(
                (0..cfg.blocks_per_level)
                    .map(|i| ConvBlock::create(store, &format!("{prefix}.dec{s}.block{i}"), ch, rng))
                    .collect(),
            );
        }
        let head =
            Conv::create(store, &format!("{prefix}.head"), cfg.channels_at(0), cfg.in_channels, true, rng);
        let pips = if cfg.pip_bypass {
            Vec::new()
        } else {
            cfg.pip_configs()?
                .into_iter()
                .enumerate()
                .map(|(s, pc)| PipModule::create(store, &format!("{prefix}.pip{s}"), pc, rng))
                .collect::<Result<_>>()?
        };
        Ok(UNet { cfg, stem, enc_blocks, downs, mid_blocks, ups, fuses, dec_blocks, head, pips })
    }

    /// Restore an image `[in_channels, H, W]` under task weights ω.
    /// `clamp01` pins the result to the displayable range — evaluation
    /// only, training needs the raw residual for gradient flow.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bd: &Bound,
        x: Var,
        omega: &Tensor<T>,
        clamp01: bool,
    ) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != self.cfg.in_channels {
            return Err(Error::shape(
                "unet_forward",
                format!("expected [{}, H, W] input, got {:?}", self.cfg.in_channels, xs),
            ));
        }
        let stride = 1usize << (self.cfg.levels - 1);
        if xs[1] % stride != 0 || xs[2] % stride != 0 {
            return Err(Error::invalid(
                "unet_forward",
                format!("spatial dims {}×{} must be divisible by {stride}", xs[1], xs[2]),
            ));
        }
        let skips_n = self.cfg.levels - 1;

        let mut feat = g.conv3x3(x, bd[self.stem.w], Some(bd[self.stem.b]), 1)?;
        let mut skips: Vec<(Var, usize, usize)> = Vec::with_capacity(skips_n);
        for s in 0..skips_n {
            for block in &self.enc_blocks[s] {
                feat = block.apply(g, bd, feat)?;
            }
            let sh = g.shape(feat).to_vec();
            skips.push((feat, sh[1], sh[2]));
            feat = g.conv3x3(feat, bd[self.downs[s].w], Some(bd[self.downs[s].b]), 2)?;
        }
        for block in &self.mid_blocks {
            feat = block.apply(g, bd, feat)?;
        }
        for (i, s) in (0..skips_n).rev().enumerate() {
            let (skip, sh, sw) = skips[s];
            let upsampled = g.nearest_upsample(feat, sh, sw)?;
            let up = g.conv3x3(upsampled, bd[self.ups[i].w], Some(bd[self.ups[i].b]), 1)?;
            let routed = if self.cfg.pip_bypass {
                skip
            } else {
                self.pips[s].forward(g, bd, skip, omega)?
            };
            let cat = g.concat_channels(&[routed, up])?;
            let fused = g.conv1x1(cat, bd[self.fuses[i].w], Some(bd[self.fuses[i].b]))?;
            feat = fused;
            for block in &self.dec_blocks[i] {
                feat = block.apply(g, bd, feat)?;
            }
        }
        let residual = g.conv3x3(feat, bd[self.head.w], Some(bd[self.head.b]), 1)?;
        let out = g.add(x, residual)?;
        if clamp01 {
            g.clamp(out, T::zero(), T::one())
        } else {
            Ok(out)
        }
    }

    /// Mean spread loss over all prompt instances (zero when bypassed).
    pub fn spread_loss<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound) -> Result<Var> {
        if self.pips.is_empty() {
            return g.input_from(vec![1], vec![T::zero()]);
        }
        let mut acc: Option<Var> = None;
        for pip in &self.pips {
            let l = pip.spread_loss(g, bd)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        let total = acc.expect("at least one instance");
        g.mul_const(total, crate::num::fl(1.0 / self.pips.len() as f64))
    }
}

// ── parameter census ──

/// One line of the parameter report.
#[derive(Debug, Clone)]
pub struct CensusRow {
    pub group: String,
    pub elements: usize,
}

/// Parameter counts grouped by the name segment after `prefix`, plus the
/// prompt-machinery share relative to the plain backbone.
pub fn param_census<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> (Vec<CensusRow>, f64) {
    let mut rows: Vec<CensusRow> = Vec::new();
    let full = format!("{prefix}.");
    for (name, tensor) in store.iter() {
        let rest = name.strip_prefix(&full).unwrap_or(name);
        let group = rest.split('.').next().unwrap_or(rest).to_string();
        match rows.iter_mut().find(|r| r.group == group) {
            Some(row) => row.elements += tensor.numel(),
            None => rows.push(CensusRow { group, elements: tensor.numel() }),
        }
    }
    let prompt: usize = rows.iter().filter(|r| r.group.starts_with("pip")).map(|r| r.elements).sum();
    let backbone: usize = rows.iter().filter(|r| !r.group.starts_with("pip")).map(|r| r.elements).sum();
    let overhead_pct = if backbone > 0 { 100.0 * prompt as f64 / backbone as f64 } else { 0.0 };
    (rows, overhead_pct)
}

// ── gradient-check case ──

/// Whole-network finite-difference case at composite tolerance: a tiny
/// two-scale model, every parameter perturbed.
///
/// The check region is deliberately well-conditioned: prompts are scaled
/// up from their training-time initialization and the zero head is
/// randomized. Tiny prompts put layernorm denominators near zero, where
/// the curvature of `1/√(var+ε)` outruns any finite-difference step; that
/// is a property of the probe point, not of the backward pass.
pub fn composite_check_cases() -> Vec<crate::gradcheck::Case> {
    use crate::gradcheck::{randin_range, Case, TOL_COMPOSITE};
    use crate::rng::{chacha, Stream};

    let mut store = ParamStore::<f64>::new();
    let mut rng = chacha(7710, Stream::Init, 0);
    let mut cfg = UNetConfig::new(2);
    cfg.levels = 2;
    cfg.base_channels = 4;
    cfg.blocks_per_level = 1;
    cfg.prompt_spatial = 2;
    let model = UNet::create(&mut store, "chk.unet", cfg, &mut rng).expect("valid config");
    let head_w = store.find("chk.unet.head.w").expect("head exists");
    let head_shape = store.get(head_w).shape().to_vec();
    *store.get_mut(head_w) = Tensor::randn(head_shape, 0.3, &mut rng).with_grad();
    for name in ["chk.unet.pip0.bank", "chk.unet.pip0.basic"] {
        let id = store.find(name).expect("prompt tensors exist");
        for v in store.get_mut(id).data_mut() {
            *v *= 25.0;
        }
    }
    let x = store.add("chk.x", randin_range(&[3, 4, 4], 0.05, 0.95, 7711));
    let omega = Tensor::<f64>::new(vec![2], vec![0.0, 1.0]).expect("length 2");
    vec![Case::module("restoration_net", TOL_COMPOSITE, store, move |g, bd| {
        let y = model.forward(g, bd, bd[x], &omega, false)?;
        crate::gradcheck::project(g, y, 7712)
    })]
}

// ── tests ──
