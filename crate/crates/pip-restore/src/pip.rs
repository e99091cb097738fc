//! Prompt-driven feature modulation.
//!
//! A [`PipModule`] owns two kinds of learnable prompts: a bank of per-task
//! direction vectors and a spatial base prompt. A weight vector ω selects
//! (or blends) a bank row; the selected direction is imprinted with pooled
//! feature statistics to form a task-conditioned prompt, which interacts
//! with the base prompt through transposed cross attention and a gated
//! feed-forward block. The merged prompt then modulates the host feature
//! map through a second, optionally sparsified, cross attention.
//!
//! Attention here is channel-to-channel ("transposed"): queries and keys
//! are flattened per channel and the attention map is `[channels ×
//! channels]`, scaled by `1/√(h·w)`.
//!
//! The bank is kept directionally spread by [`ddl_loss`], which penalizes
//! any pair of bank rows whose angle falls below a threshold.

use crate::graph::{Bound, Graph, Var};
use crate::num::{fl, Scalar};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;

/// Large negative pre-softmax sentinel: finite in `f32`, yet far enough
/// down that `exp` underflows to exactly zero after max subtraction.
const MASK_SENTINEL: f64 = -1e30;

/// Division guard for cosine similarity denominators.
const COS_EPS: f64 = 1e-8;

/// Cosine clamp margin keeping `acos` gradients finite at 0 and π.
const COS_MARGIN: f64 = 1e-7;

// ── configuration ──

/// Dimensions and wiring switches for one prompt module instance.
#[derive(Debug, Clone)]
pub struct PipConfig {
    /// Number of task direction vectors in the bank.
    pub tasks: usize,
    /// Prompt channel count c.
    pub channels: usize,
    /// Prompt spatial height h.
    pub height: usize,
    /// Prompt spatial width w.
    pub width: usize,
    /// Channel count C of the host feature map this instance modulates.
    pub feat_channels: usize,
    /// Minimum pairwise bank angle enforced by the spread loss (radians).
    pub theta_thre: f64,
    /// Top-m fractions for the sparsified feature attention.
    pub m_ratios: Vec<f64>,
    /// Feed-forward channel expansion factor.
    pub expansion: usize,
    /// Use the task-conditioned prompt (key/value side).
    pub enable_d: bool,
    /// Use the base prompt (query side and residual).
    pub enable_b: bool,
    /// Sparsify the feature attention with per-row top-m masks.
    pub enable_selective: bool,
}

impl PipConfig {
    /// Full wiring with default threshold (90°), ratios, and expansion.
    pub fn new(tasks: usize, channels: usize, height: usize, width: usize, feat_channels: usize) -> Self {
        PipConfig {
            tasks,
            channels,
            height,
            width,
            feat_channels,
            theta_thre: std::f64::consts::FRAC_PI_2,
            m_ratios: vec![0.5, 2.0 / 3.0, 0.75, 0.8],
            expansion: 2,
            enable_d: true,
            enable_b: true,
            enable_selective: true,
        }
    }

    /// Select one of the five studied wirings:
    /// `a` task prompt only, `b` base prompt only, `c` both without
    /// sparsified attention, `d` base prompt with sparsified attention,
    /// `e` everything on.
    pub fn with_variant(mut self, tag: char) -> Result<Self> {
        let (d, b, s) = match tag {
            'a' => (true, false, false),
            'b' => (false, true, false),
            'c' => (true, true, false),
            'd' => (false, true, true),
            'e' => (true, true, true),
            other => {
                return Err(Error::Config(format!("unknown prompt variant '{other}', expected a-e")))
            }
        };
        self.enable_d = d;
        self.enable_b = b;
        self.enable_selective = s;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("prompt dims must be positive".into()));
        }
        if self.feat_channels == 0 {
            return Err(Error::Config("feature channel count must be positive".into()));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.theta_thre) {
            return Err(Error::Config("theta_thre must lie in [0, pi]".into()));
        }
        if self.m_ratios.is_empty() {
            return Err(Error::Config("m_ratios must not be empty".into()));
        }
        if self.m_ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config("m_ratios must lie in (0, 1]".into()));
        }
        if !self.enable_d && !self.enable_b {
            return Err(Error::Config("at least one prompt source must be enabled".into()));
        }
        if self.expansion == 0 {
            return Err(Error::Config("expansion must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-ratio mask cardinalities for a `C×C` attention map.
    pub fn m_values(&self) -> Vec<usize> {
        let c = self.feat_channels;
        self.m_ratios
            .iter()
            .map(|&r| (((r * c as f64).round() as usize).max(1)).min(c))
            .collect()
    }
}

// ── free operations ──

/// Per-row top-m binary mask of a `[R, C]` score matrix: exactly `m` ones
/// per row on the largest entries, ties resolved toward the lower column
/// index. Not differentiable — callers treat it as a constant.
pub fn topm_mask<T: Scalar>(scores: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(Error::shape("topm_mask", format!("expected rank-2 scores, got rank {}", shape.len())));
    }
    let (rows, cols) = (shape[0], shape[1]);
    if m < 1 || m > cols {
        return Err(Error::invalid("topm_mask", format!("m = {m} outside [1, {cols}]")));
    }
    let mut mask = vec![T::zero(); rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = &scores.data()[r * cols..(r + 1) * cols];
        order.clear();
        order.extend(0..cols);
        // Descending by score; equal scores keep ascending column order.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("scores are finite").then(a.cmp(&b)));
        for &c in order.iter().take(m) {
            mask[r * cols + c] = T::one();
        }
    }
    Tensor::new(vec![rows, cols], mask)
}

/// Mean hinge penalty pushing every pair of bank rows at least
/// `theta_thre` radians apart. `bank` is `[T, c]`; returns a scalar node.
/// With fewer than two rows the spread is undefined and the loss is a
/// constant zero.
pub fn ddl_loss<T: Scalar>(g: &mut Graph<T>, bank: Var, theta_thre: f64) -> Result<Var> {
    let shape = g.shape(bank).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("ddl_loss", format!("expected rank-2 bank, got rank {}", shape.len())));
    }
    let t = shape[0];
    if t < 2 {
        return g.input_from(vec![1], vec![T::zero()]);
    }
    let rows: Vec<Var> = (0..t).map(|i| g.row(bank, i)).collect::<Result<_>>()?;
    let norms: Vec<Var> = rows
        .iter()
        .map(|&r| {
            let sq = g.mul(r, r)?;
            let s = g.sum(sq)?;
            g.sqrt(s)
        })
        .collect::<Result<_>>()?;
    let mut acc: Option<Var> = None;
    for i in 0..t {
        for j in (i + 1)..t {
            let prod = g.mul(rows[i], rows[j])?;
            let dot = g.sum(prod)?;
            let nn = g.mul(norms[i], norms[j])?;
            let denom = g.max_const(nn, fl(COS_EPS))?;
            let cos_raw = g.div(dot, denom)?;
            let cos = g.clamp(cos_raw, fl(-1.0 + COS_MARGIN), fl(1.0 - COS_MARGIN))?;
            let theta = g.acos(cos)?;
            let neg = g.mul_const(theta, fl(-1.0))?;
            let gap = g.add_const(neg, fl(theta_thre))?;
            let pen = g.max_const(gap, T::zero())?;
            acc = Some(match acc {
                Some(a) => g.add(a, pen)?,
                None => pen,
            });
        }
    }
    let total = acc.expect("t >= 2 yields at least one pair");
    g.mul_const(total, fl(2.0 / (t as f64 * (t - 1) as f64)))
}

/// Pairwise angles between bank rows in degrees, computed directly from
/// tensor data (reporting only, no graph). Returns `(i, j, angle)` for all
/// `i < j`.
pub fn pairwise_angles_deg<T: Scalar>(bank: &Tensor<T>) -> Result<Vec<(usize, usize, f64)>> {
    let shape = bank.shape();
    if shape.len() != 2 {
        return Err(Error::shape("pairwise_angles", "expected rank-2 bank"));
    }
    let (t, c) = (shape[0], shape[1]);
    let row = |i: usize| -> Vec<f64> {
        bank.data()[i * c..(i + 1) * c].iter().map(|v| v.to_f64_lossy()).collect()
    };
    let mut out = Vec::new();
    for i in 0..t {
        let ri = row(i);
        let ni = ri.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in (i + 1)..t {
            let rj = row(j);
            let nj = rj.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = ri.iter().zip(&rj).map(|(a, b)| a * b).sum();
            let cos = (dot / (ni * nj).max(COS_EPS)).clamp(-1.0, 1.0);
            out.push((i, j, cos.acos().to_degrees()));
        }
    }
    Ok(out)
}

/// Channel-to-channel cross attention: flatten spatial dims, form the
/// `[c, c]` map `softmax(Q·Kᵀ/√n)` with `n = h·w`, and apply it to V.
pub fn transposed_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (c, h, w) = attention_dims(g, q, k, v)?;
    let n = h * w;
    let qf = g.reshape(q, vec![c, n])?;
    let kf = g.reshape(k, vec![c, n])?;
    let vf = g.reshape(v, vec![c, n])?;
    let logits = g.matmul_nt(qf, kf)?;
    let scaled = g.mul_const(logits, fl(1.0 / (n as f64).sqrt()))?;
    let a = g.softmax_rows(scaled)?;
    let out = g.matmul(a, vf)?;
    g.reshape(out, vec![c, h, w])
}

/// Sparsified channel attention: one top-m mask per ratio is applied to
/// the shared attention logits (masked entries pinned to a large negative
/// sentinel so they are exactly zero after softmax), each masked result is
/// scaled by its learnable scalar, and the branches are summed. Masks are
/// recomputed from the current logits each call and act as constants in
/// the backward pass, so gradients flow only through surviving entries.
pub fn selective_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    m_values: &[usize],
    scales: &[Var],
) -> Result<Var> {
    if m_values.is_empty() {
        return Err(Error::invalid("selective_attention", "mask cardinality list is empty"));
    }
    if m_values.len() != scales.len() {
        return Err(Error::invalid(
            "selective_attention",
            format!("{} mask sizes vs {} scales", m_values.len(), scales.len()),
        ));
    }
    let (c, h, w) = attention_dims(g, q, k, v)?;
    let n = h * w;
    let qf = g.reshape(q, vec![c, n])?;
    let kf = g.reshape(k, vec![c, n])?;
    let vf = g.reshape(v, vec![c, n])?;
    let logits = g.matmul_nt(qf, kf)?;
    let scaled = g.mul_const(logits, fl(1.0 / (n as f64).sqrt()))?;
    let score_snapshot = g.tensor(scaled);
    let mut acc: Option<Var> = None;
    for (&m, &scale) in m_values.iter().zip(scales) {
        let mask = topm_mask(&score_snapshot, m)?;
        let sentinel: Vec<T> = mask
            .data()
            .iter()
            .map(|&kept| if kept == T::one() { T::zero() } else { fl(MASK_SENTINEL) })
            .collect();
        let mask_v = g.input(&mask)?;
        let sent_v = g.input_from(vec![c, c], sentinel)?;
        let kept = g.mul(scaled, mask_v)?;
        let masked = g.add(kept, sent_v)?;
        let a = g.softmax_rows(masked)?;
        let out = g.matmul(a, vf)?;
        let scaled_out = g.scale_by(out, scale)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, scaled_out)?,
            None => scaled_out,
        });
    }
    let sum = acc.expect("at least one ratio");
    g.reshape(sum, vec![c, h, w])
}

fn attention_dims<T: Scalar>(g: &Graph<T>, q: Var, k: Var, v: Var) -> Result<(usize, usize, usize)> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 3 {
        return Err(Error::shape("attention", format!("expected rank-3 operands, got rank {}", qs.len())));
    }
    if g.shape(k) != qs.as_slice() || g.shape(v) != qs.as_slice() {
        return Err(Error::shape("attention", "q, k, v shapes must match"));
    }
    Ok((qs[0], qs[1], qs[2]))
}

// ── parameter bundles ──

/// layernorm → 1×1 conv → depthwise 3×3 conv, the projection chain used
/// for every attention role.
struct Chain {
    ln_g: ParamId,
    ln_b: ParamId,
    w: ParamId,
    b: ParamId,
    dw: ParamId,
    db: ParamId,
}

impl Chain {
    fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        ch: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv_std = (2.0 / ch as f64).sqrt();
        let dw_std = (2.0 / 9.0f64).sqrt();
        Chain {
            ln_g: store.add(format!("{prefix}.ln_g"), Tensor::full(vec![ch], T::one())),
            ln_b: store.add(format!("{prefix}.ln_b"), Tensor::zeros(vec![ch])),
            w: store.add(format!("{prefix}.w"), Tensor::randn(vec![ch, ch], conv_std, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![ch])),
            dw: store.add(format!("{prefix}.dw"), Tensor::randn(vec![ch, 3, 3], dw_std, rng)),
            db: store.add(format!("{prefix}.db"), Tensor::zeros(vec![ch])),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, x: Var) -> Result<Var> {
        let ln = g.layernorm_chw(x, bd[self.ln_g], bd[self.ln_b])?;
        let p = g.conv1x1(ln, bd[self.w], Some(bd[self.b]))?;
        g.dwconv3x3(p, bd[self.dw], Some(bd[self.db]))
    }
}

/// Gated feed-forward block with internal residual:
/// `x + W_out(gelu(branch₁(LN x)) ⊙ branch₂(LN x))`, each branch a 1×1
/// expansion conv followed by a depthwise 3×3.
struct Ffn {
    ln_g: ParamId,
    ln_b: ParamId,
    b1_w: ParamId,
    b1_b: ParamId,
    b1_dw: ParamId,
    b1_db: ParamId,
    b2_w: ParamId,
    b2_b: ParamId,
    b2_dw: ParamId,
    b2_db: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Ffn {
    fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        ch: usize,
        expansion: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let wide = ch * expansion;
        let conv_std = (2.0 / ch as f64).sqrt();
        let out_std = (2.0 / wide as f64).sqrt();
        let dw_std = (2.0 / 9.0f64).sqrt();
        Ffn {
            ln_g: store.add(format!("{prefix}.ln_g"), Tensor::full(vec![ch], T::one())),
            ln_b: store.add(format!("{prefix}.ln_b"), Tensor::zeros(vec![ch])),
            b1_w: store.add(format!("{prefix}.b1_w"), Tensor::randn(vec![wide, ch], conv_std, rng)),
            b1_b: store.add(format!("{prefix}.b1_b"), Tensor::zeros(vec![wide])),
            b1_dw: store.add(format!("{prefix}.b1_dw"), Tensor::randn(vec![wide, 3, 3], dw_std, rng)),
            b1_db: store.add(format!("{prefix}.b1_db"), Tensor::zeros(vec![wide])),
            b2_w: store.add(format!("{prefix}.b2_w"), Tensor::randn(vec![wide, ch], conv_std, rng)),
            b2_b: store.add(format!("{prefix}.b2_b"), Tensor::zeros(vec![wide])),
            b2_dw: store.add(format!("{prefix}.b2_dw"), Tensor::randn(vec![wide, 3, 3], dw_std, rng)),
            b2_db: store.add(format!("{prefix}.b2_db"), Tensor::zeros(vec![wide])),
            out_w: store.add(format!("{prefix}.out_w"), Tensor::randn(vec![ch, wide], out_std, rng)),
            out_b: store.add(format!("{prefix}.out_b"), Tensor::zeros(vec![ch])),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, x: Var) -> Result<Var> {
        let ln = g.layernorm_chw(x, bd[self.ln_g], bd[self.ln_b])?;
        let p1 = g.conv1x1(ln, bd[self.b1_w], Some(bd[self.b1_b]))?;
        let d1 = g.dwconv3x3(p1, bd[self.b1_dw], Some(bd[self.b1_db]))?;
        let gated = g.gelu(d1)?;
        let p2 = g.conv1x1(ln, bd[self.b2_w], Some(bd[self.b2_b]))?;
        let d2 = g.dwconv3x3(p2, bd[self.b2_dw], Some(bd[self.b2_db]))?;
        let prod = g.mul(gated, d2)?;
        let proj = g.conv1x1(prod, bd[self.out_w], Some(bd[self.out_b]))?;
        g.add(x, proj)
    }
}

// ── the module ──

/// One prompt-modulation instance: prompts, projection chains, and the
/// two attention stages, all parameters registered under a name prefix.
pub struct PipModule {
    pub cfg: PipConfig,
    /// `[tasks, c]` bank of task direction vectors.
    pub bank: ParamId,
    /// `[c, h, w]` base prompt.
    pub basic: ParamId,
    align_w: ParamId,
    align_b: ParamId,
    p2p_q: Chain,
    p2p_k: Chain,
    p2p_v: Chain,
    p2p_ffn: Ffn,
    proj_w: ParamId,
    proj_b: ParamId,
    p2f_q: Chain,
    p2f_k: Chain,
    p2f_v: Chain,
    p2f_ffn: Ffn,
    scales: Vec<ParamId>,
}

impl PipModule {
    /// Register all parameters under `prefix` and return the wired module.
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: PipConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, cap) = (cfg.channels, cfg.feat_channels);
        let bank = store.add(format!("{prefix}.bank"), Tensor::randn(vec![cfg.tasks, c], 0.02, rng));
        let basic = store.add(
            format!("{prefix}.basic"),
            Tensor::randn(vec![c, cfg.height, cfg.width], 0.02, rng),
        );
        let align_std = (2.0 / cap as f64).sqrt();
        let align_w = store.add(format!("{prefix}.align.w"), Tensor::randn(vec![c, cap], align_std, rng));
        let align_b = store.add(format!("{prefix}.align.b"), Tensor::zeros(vec![c]));
        let p2p_q = Chain::create(store, &format!("{prefix}.p2p.q"), c, rng);
        let p2p_k = Chain::create(store, &format!("{prefix}.p2p.k"), c, rng);
        let p2p_v = Chain::create(store, &format!("{prefix}.p2p.v"), c, rng);
        let p2p_ffn = Ffn::create(store, &format!("{prefix}.p2p.ffn"), c, cfg.expansion, rng);
        let proj_std = (2.0 / c as f64).sqrt();
        let proj_w = store.add(format!("{prefix}.p2f.proj.w"), Tensor::randn(vec![cap, c], proj_std, rng));
        let proj_b = store.add(format!("{prefix}.p2f.proj.b"), Tensor::zeros(vec![cap]));
        let p2f_q = Chain::create(store, &format!("{prefix}.p2f.q"), cap, rng);
        let p2f_k = Chain::create(store, &format!("{prefix}.p2f.k"), cap, rng);
        let p2f_v = Chain::create(store, &format!("{prefix}.p2f.v"), cap, rng);
        let p2f_ffn = Ffn::create(store, &format!("{prefix}.p2f.ffn"), cap, cfg.expansion, rng);
        let scale_init = fl::<T>(1.0 / cfg.m_ratios.len() as f64);
        let scales = (0..cfg.m_ratios.len())
            .map(|i| store.add(format!("{prefix}.p2f.scale{i}"), Tensor::full(vec![1], scale_init)))
            .collect();
        Ok(PipModule {
            cfg,
            bank,
            basic,
            align_w,
            align_b,
            p2p_q,
            p2p_k,
            p2p_v,
            p2p_ffn,
            proj_w,
            proj_b,
            p2f_q,
            p2f_k,
            p2f_v,
            p2f_ffn,
            scales,
        })
    }

    /// Project the host feature map to prompt channels and resample it to
    /// the prompt grid (average-pool when shrinking, nearest otherwise).
    fn align_feature<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, z: Var) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        let (h, w) = (self.cfg.height, self.cfg.width);
        let projected = g.conv1x1(z, bd[self.align_w], Some(bd[self.align_b]))?;
        if zs[1] >= h && zs[2] >= w {
            g.adaptive_avg_pool(projected, h, w)
        } else {
            g.nearest_upsample(projected, h, w)
        }
    }

    /// Blend bank rows with ω (`v = Σ_t ω_t · d_t`). One-hot ω selects a
    /// row bit-exactly.
    fn combine<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, omega: &Tensor<T>) -> Result<Var> {
        if omega.shape() != [self.cfg.tasks] {
            return Err(Error::shape(
                "pip_forward",
                format!("omega length {} vs {} tasks", omega.numel(), self.cfg.tasks),
            ));
        }
        let om = g.input_from(vec![1, self.cfg.tasks], omega.data().to_vec())?;
        let mixed = g.matmul(om, bd[self.bank])?;
        g.reshape(mixed, vec![self.cfg.channels])
    }

    /// Full pass: build the task-conditioned prompt, merge it with the
    /// base prompt, and modulate the feature map `z` (`[C, H, W]`),
    /// returning a tensor of the same shape.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bd: &Bound,
        z: Var,
        omega: &Tensor<T>,
    ) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 3 || zs[0] != self.cfg.feat_channels {
            return Err(Error::shape(
                "pip_forward",
                format!("expected [{}, H, W] features, got {:?}", self.cfg.feat_channels, zs),
            ));
        }
        let (h, w) = (self.cfg.height, self.cfg.width);

        // Task-conditioned prompt: selected direction ⊙ pooled statistics,
        // broadcast over the prompt grid.
        let aligned = self.align_feature(g, bd, z)?;
        let direction = self.combine(g, bd, omega)?;
        let pooled = g.global_avg_pool(aligned)?;
        let imprint = g.mul(direction, pooled)?;
        let dhat = g.broadcast_chw(imprint, h, w)?;

        // Prompt-to-prompt stage.
        let src_b = if self.cfg.enable_b { bd[self.basic] } else { dhat };
        let src_d = if self.cfg.enable_d { dhat } else { bd[self.basic] };
        let q = self.p2p_q.apply(g, bd, src_b)?;
        let k = self.p2p_k.apply(g, bd, src_d)?;
        let v = self.p2p_v.apply(g, bd, src_d)?;
        let att = transposed_attention(g, q, k, v)?;
        let merged = g.add(src_b, att)?;
        let u = self.p2p_ffn.apply(g, bd, merged)?;

        // Prompt-to-feature stage at the host resolution.
        let u_up = g.nearest_upsample(u, zs[1], zs[2])?;
        let u_feat = g.conv1x1(u_up, bd[self.proj_w], Some(bd[self.proj_b]))?;
        let qz = self.p2f_q.apply(g, bd, z)?;
        let ku = self.p2f_k.apply(g, bd, u_feat)?;
        let vu = self.p2f_v.apply(g, bd, u_feat)?;
        let att_s = if self.cfg.enable_selective {
            let scale_vars: Vec<Var> = self.scales.iter().map(|&id| bd[id]).collect();
            selective_attention(g, qz, ku, vu, &self.cfg.m_values(), &scale_vars)?
        } else {
            transposed_attention(g, qz, ku, vu)?
        };
        let mixed = g.add(z, att_s)?;
        self.p2f_ffn.apply(g, bd, mixed)
    }

    /// Spread loss over this instance's bank.
    pub fn spread_loss<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound) -> Result<Var> {
        ddl_loss(g, bd[self.bank], self.cfg.theta_thre)
    }
}

// ── gradient-check cases ──

/// Composite finite-difference cases for the blocks above (checked at the
/// relaxed composite tolerance).
pub fn composite_check_cases() -> Vec<crate::gradcheck::Case> {
    use crate::gradcheck::{randin, Case, TOL_COMPOSITE};
    use crate::rng::{chacha, Stream};

    let mut cases = Vec::new();

    // layernorm → 1×1 conv → depthwise chain as one block.
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = chacha(7100, Stream::Init, 0);
        let chain = Chain::create(&mut store, "chk.chain", 2, &mut rng);
        let x = store.add("chk.x", randin(&[2, 3, 3], 7101));
        cases.push(Case::module("qkv_chain", TOL_COMPOSITE, store, move |g, bd| {
            let y = chain.apply(g, bd, bd[x])?;
            crate::gradcheck::project(g, y, 7102)
        }));
    }

    // Gated feed-forward block.
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = chacha(7200, Stream::Init, 0);
        let ffn = Ffn::create(&mut store, "chk.ffn", 2, 2, &mut rng);
        let x = store.add("chk.x", randin(&[2, 3, 3], 7201));
        cases.push(Case::module("gated_ffn", TOL_COMPOSITE, store, move |g, bd| {
            let y = ffn.apply(g, bd, bd[x])?;
            crate::gradcheck::project(g, y, 7202)
        }));
    }

    // Plain channel attention over three loose operands.
    cases.push(Case::new(
        "channel_attention",
        TOL_COMPOSITE,
        vec![randin(&[3, 2, 2], 7301), randin(&[3, 2, 2], 7302), randin(&[3, 2, 2], 7303)],
        |g, v| {
            let y = transposed_attention(g, v[0], v[1], v[2])?;
            crate::gradcheck::project(g, y, 7304)
        },
    ));

    // Sparsified attention including its learnable branch scales.
    cases.push(Case::new(
        "selective_attention",
        TOL_COMPOSITE,
        vec![
            randin(&[3, 2, 2], 7401),
            randin(&[3, 2, 2], 7402),
            randin(&[3, 2, 2], 7403),
            randin(&[1], 7404),
            randin(&[1], 7405),
        ],
        |g, v| {
            let y = selective_attention(g, v[0], v[1], v[2], &[1, 2], &[v[3], v[4]])?;
            crate::gradcheck::project(g, y, 7406)
        },
    ));

    // Bank spread loss.
    cases.push(Case::new("spread_loss", TOL_COMPOSITE, vec![randin(&[3, 4], 7501)], |g, v| {
        ddl_loss(g, v[0], 1.9)
    }));

    // A whole module end to end, every parameter perturbed.
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = chacha(7600, Stream::Init, 0);
        let cfg = PipConfig::new(2, 4, 4, 4, 4);
        let module = PipModule::create(&mut store, "chk.pip", cfg, &mut rng).expect("valid config");
        let z = store.add("chk.z", randin(&[4, 8, 8], 7601));
        let omega = Tensor::<f64>::new(vec![2], vec![1.0, 0.0]).expect("length 2");
        cases.push(Case::module("prompt_module", TOL_COMPOSITE, store, move |g, bd| {
            let y = module.forward(g, bd, bd[z], &omega)?;
            crate::gradcheck::project(g, y, 7602)
        }));
    }

    cases
}

// ── tests ──
