//! Convolutions, pooling and spatial resampling on `[C,H,W]` maps.
//!
//! Three convolution flavours cover everything the models need: pointwise
//! (`1×1`), full `3×3` (stride 1 or 2, zero padding 1) and depthwise `3×3`.
//! Inner loops run over contiguous row slices (saxpy / dot patterns).

use super::{Graph, Op, Var};
use crate::error::Error;
use crate::num::Scalar;
use crate::tensor::fmt_shape;
use crate::Result;

/// Valid output range along one axis for a 3-tap kernel offset `k ∈ {0,1,2}`
/// with padding 1 and the given stride: all `o` with
/// `0 ≤ s·o + k − 1 < in_size`.
fn tap_range(k: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let s = stride as i64;
    let off = k as i64 - 1;
    let lo = (-off + s - 1).div_euclid(s).max(0) as usize;
    let hi = (((in_size as i64 - 1 - off).div_euclid(s)) + 1).clamp(0, out_size as i64) as usize;
    (lo, hi.max(lo))
}

impl<T: Scalar> Graph<T> {
    fn check_chw(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape(op, format!("want rank-3 [C,H,W], got {}", fmt_shape(s))));
        }
        Ok((s[0], s[1], s[2]))
    }

    // ── pointwise convolution ────────────────────────────────────────────

    /// `1×1` convolution: per-pixel channel mixing, `w` is `[Cout, Cin]`,
    /// optional bias `[Cout]`. Equivalent to a matmul over flattened
    /// spatial positions.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, h, wd) = self.check_chw("conv1x1", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != cin {
            return Err(Error::shape(
                "conv1x1",
                format!("weight must be [Cout, {cin}], got {}", fmt_shape(&ws)),
            ));
        }
        let cout = ws[0];
        self.check_bias("conv1x1", b, cout)?;
        let hw = h * wd;
        let xd = &self.nodes[x.idx()].data;
        let wv = &self.nodes[w.idx()].data;
        let mut out = vec![T::zero(); cout * hw];
        if let Some(bv) = b {
            let bd = &self.nodes[bv.idx()].data;
            for (co, orow) in out.chunks_mut(hw).enumerate() {
                orow.fill(bd[co]);
            }
        }
        for (co, orow) in out.chunks_mut(hw).enumerate() {
            for ci in 0..cin {
                let k = wv[co * cin + ci];
                let xrow = &xd[ci * hw..(ci + 1) * hw];
                for (o, &xv) in orow.iter_mut().zip(xrow.iter()) {
                    *o += k * xv;
                }
            }
        }
        let req = self.req(x) || self.req(w) || b.map_or(false, |bv| self.req(bv));
        self.push("conv1x1", vec![cout, h, wd], out, req, Op::Conv1x1 { x, w, b })
    }

    pub(super) fn bw_conv1x1(&mut self, x: Var, w: Var, b: Option<Var>, gout: &[T]) {
        let (cin, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let cout = self.shape(w)[0];
        let hw = h * wd;
        if let Some(bv) = b {
            if self.req(bv) {
                let mut gb = self.take_grad_buf(bv);
                for co in 0..cout {
                    let mut acc = T::zero();
                    for &g in &gout[co * hw..(co + 1) * hw] {
                        acc += g;
                    }
                    gb[co] += acc;
                }
                self.put_grad(bv, gb);
            }
        }
        if self.req(w) {
            let mut gw = self.take_grad_buf(w);
            {
                let xd = &self.nodes[x.idx()].data;
                for co in 0..cout {
                    let grow = &gout[co * hw..(co + 1) * hw];
                    for ci in 0..cin {
                        let xrow = &xd[ci * hw..(ci + 1) * hw];
                        let mut acc = T::zero();
                        for (&g, &xv) in grow.iter().zip(xrow.iter()) {
                            acc += g * xv;
                        }
                        gw[co * cin + ci] += acc;
                    }
                }
            }
            self.put_grad(w, gw);
        }
        if self.req(x) {
            let mut gx = self.take_grad_buf(x);
            {
                let wv = &self.nodes[w.idx()].data;
                for co in 0..cout {
                    let grow = &gout[co * hw..(co + 1) * hw];
                    for ci in 0..cin {
                        let k = wv[co * cin + ci];
                        let gxrow = &mut gx[ci * hw..(ci + 1) * hw];
                        for (gxv, &g) in gxrow.iter_mut().zip(grow.iter()) {
                            *gxv += k * g;
                        }
                    }
                }
            }
            self.put_grad(x, gx);
        }
    }

    // ── full 3×3 convolution ─────────────────────────────────────────────

    /// Full `3×3` convolution, zero padding 1, stride 1 or 2. `w` is
    /// `[Cout, Cin, 3, 3]`, optional bias `[Cout]`. Output spatial size is
    /// `floor((n − 1)/stride) + 1`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (cin, h, wd) = self.check_chw("conv3x3", x)?;
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("conv3x3", format!("stride must be 1 or 2, got {stride}")));
        }
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape(
                "conv3x3",
                format!("weight must be [Cout, {cin}, 3, 3], got {}", fmt_shape(&ws)),
            ));
        }
        let cout = ws[0];
        self.check_bias("conv3x3", b, cout)?;
        let (oh, ow) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let xd = &self.nodes[x.idx()].data;
        let wv = &self.nodes[w.idx()].data;
        let mut out = vec![T::zero(); cout * oh * ow];
        if let Some(bv) = b {
            let bd = &self.nodes[bv.idx()].data;
            for (co, oplane) in out.chunks_mut(oh * ow).enumerate() {
                oplane.fill(bd[co]);
            }
        }
        for co in 0..cout {
            for ci in 0..cin {
                let kern = &wv[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                let xplane = &xd[ci * h * wd..(ci + 1) * h * wd];
                let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, stride, h, oh);
                    for kx in 0..3 {
                        let k = kern[ky * 3 + kx];
                        let (x0, x1) = tap_range(kx, stride, wd, ow);
                        if x1 <= x0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let yi = (stride * y + ky) as i64 - 1;
                            let xrow = &xplane[yi as usize * wd..(yi as usize + 1) * wd];
                            let orow = &mut oplane[y * ow + x0..y * ow + x1];
                            if stride == 1 {
                                let xi0 = (x0 + kx) - 1;
                                for (o, &xv) in orow.iter_mut().zip(xrow[xi0..].iter()) {
                                    *o += k * xv;
                                }
                            } else {
                                for (i, o) in orow.iter_mut().enumerate() {
                                    let xi = 2 * (x0 + i) + kx - 1;
                                    *o += k * xrow[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        let req = self.req(x) || self.req(w) || b.map_or(false, |bv| self.req(bv));
        self.push("conv3x3", vec![cout, oh, ow], out, req, Op::Conv3x3 { x, w, b, stride })
    }

    pub(super) fn bw_conv3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, out: Var, gout: &[T]) {
        let (cin, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let cout = self.shape(w)[0];
        let (oh, ow) = (self.shape(out)[1], self.shape(out)[2]);
        if let Some(bv) = b {
            if self.req(bv) {
                let mut gb = self.take_grad_buf(bv);
                for co in 0..cout {
                    let mut acc = T::zero();
                    for &g in &gout[co * oh * ow..(co + 1) * oh * ow] {
                        acc += g;
                    }
                    gb[co] += acc;
                }
                self.put_grad(bv, gb);
            }
        }
        if self.req(w) {
            let mut gw = self.take_grad_buf(w);
            {
                let xd = &self.nodes[x.idx()].data;
                for co in 0..cout {
                    let gplane = &gout[co * oh * ow..(co + 1) * oh * ow];
                    for ci in 0..cin {
                        let xplane = &xd[ci * h * wd..(ci + 1) * h * wd];
                        for ky in 0..3 {
                            let (y0, y1) = tap_range(ky, stride, h, oh);
                            for kx in 0..3 {
                                let (x0, x1) = tap_range(kx, stride, wd, ow);
                                let mut acc = T::zero();
                                for y in y0..y1 {
                                    let yi = stride * y + ky - 1;
                                    let xrow = &xplane[yi * wd..(yi + 1) * wd];
                                    let grow = &gplane[y * ow + x0..y * ow + x1];
                                    if stride == 1 {
                                        let xi0 = (x0 + kx) - 1;
                                        for (&g, &xv) in grow.iter().zip(xrow[xi0..].iter()) {
                                            acc += g * xv;
                                        }
                                    } else {
                                        for (i, &g) in grow.iter().enumerate() {
                                            acc += g * xrow[2 * (x0 + i) + kx - 1];
                                        }
                                    }
                                }
                                gw[(co * cin + ci) * 9 + ky * 3 + kx] += acc;
                            }
                        }
                    }
                }
            }
            self.put_grad(w, gw);
        }
        if self.req(x) {
            let mut gx = self.take_grad_buf(x);
            {
                let wv = &self.nodes[w.idx()].data;
                for co in 0..cout {
                    let gplane = &gout[co * oh * ow..(co + 1) * oh * ow];
                    for ci in 0..cin {
                        let kern = &wv[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                        let gxplane = &mut gx[ci * h * wd..(ci + 1) * h * wd];
                        for ky in 0..3 {
                            let (y0, y1) = tap_range(ky, stride, h, oh);
                            for kx in 0..3 {
                                let k = kern[ky * 3 + kx];
                                let (x0, x1) = tap_range(kx, stride, wd, ow);
                                if x1 <= x0 {
                                    continue;
                                }
                                for y in y0..y1 {
                                    let yi = stride * y + ky - 1;
                                    let grow = &gplane[y * ow + x0..y * ow + x1];
                                    if stride == 1 {
                                        let xi0 = (x0 + kx) - 1;
                                        let gxrow = &mut gxplane[yi * wd + xi0..yi * wd + xi0 + (x1 - x0)];
                                        for (gxv, &g) in gxrow.iter_mut().zip(grow.iter()) {
                                            *gxv += k * g;
                                        }
                                    } else {
                                        for (i, &g) in grow.iter().enumerate() {
                                            gxplane[yi * wd + 2 * (x0 + i) + kx - 1] += k * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            self.put_grad(x, gx);
        }
    }

    // ── depthwise 3×3 convolution ────────────────────────────────────────

    /// Depthwise `3×3` convolution, zero padding 1, stride 1: channel `c` of
    /// the output only sees channel `c` of the input. `w` is `[C, 3, 3]`,
    /// optional bias `[C]`.
    pub fn dwconv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (c, h, wd) = self.check_chw("dwconv3x3", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != c || ws[1] != 3 || ws[2] != 3 {
            return Err(Error::shape(
                "dwconv3x3",
                format!("weight must be [{c}, 3, 3], got {}", fmt_shape(&ws)),
            ));
        }
        self.check_bias("dwconv3x3", b, c)?;
        let hw = h * wd;
        let xd = &self.nodes[x.idx()].data;
        let wv = &self.nodes[w.idx()].data;
        let mut out = vec![T::zero(); c * hw];
        if let Some(bv) = b {
            let bd = &self.nodes[bv.idx()].data;
            for (ch, oplane) in out.chunks_mut(hw).enumerate() {
                oplane.fill(bd[ch]);
            }
        }
        for ch in 0..c {
            let kern = &wv[ch * 9..ch * 9 + 9];
            let xplane = &xd[ch * hw..(ch + 1) * hw];
            let oplane = &mut out[ch * hw..(ch + 1) * hw];
            for ky in 0..3 {
                let (y0, y1) = tap_range(ky, 1, h, h);
                for kx in 0..3 {
                    let k = kern[ky * 3 + kx];
                    let (x0, x1) = tap_range(kx, 1, wd, wd);
                    if x1 <= x0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let yi = y + ky - 1;
                        let xi0 = (x0 + kx) - 1;
                        let xrow = &xplane[yi * wd + xi0..yi * wd + xi0 + (x1 - x0)];
                        let orow = &mut oplane[y * wd + x0..y * wd + x1];
                        for (o, &xv) in orow.iter_mut().zip(xrow.iter()) {
                            *o += k * xv;
                        }
                    }
                }
            }
        }
        let req = self.req(x) || self.req(w) || b.map_or(false, |bv| self.req(bv));
        self.push("dwconv3x3", vec![c, h, wd], out, req, Op::DwConv3x3 { x, w, b })
    }

    pub(super) fn bw_dwconv3x3(&mut self, x: Var, w: Var, b: Option<Var>, gout: &[T]) {
        let (c, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let hw = h * wd;
        if let Some(bv) = b {
            if self.req(bv) {
                let mut gb = self.take_grad_buf(bv);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for &g in &gout[ch * hw..(ch + 1) * hw] {
                        acc += g;
                    }
                    gb[ch] += acc;
                }
                self.put_grad(bv, gb);
            }
        }
        if self.req(w) {
            let mut gw = self.take_grad_buf(w);
            {
                let xd = &self.nodes[x.idx()].data;
                for ch in 0..c {
                    let xplane = &xd[ch * hw..(ch + 1) * hw];
                    let gplane = &gout[ch * hw..(ch + 1) * hw];
                    for ky in 0..3 {
                        let (y0, y1) = tap_range(ky, 1, h, h);
                        for kx in 0..3 {
                            let (x0, x1) = tap_range(kx, 1, wd, wd);
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let yi = y + ky - 1;
                                let xi0 = (x0 + kx) - 1;
                                let xrow = &xplane[yi * wd + xi0..yi * wd + xi0 + (x1 - x0)];
                                let grow = &gplane[y * wd + x0..y * wd + x1];
                                for (&g, &xv) in grow.iter().zip(xrow.iter()) {
                                    acc += g * xv;
                                }
                            }
                            gw[ch * 9 + ky * 3 + kx] += acc;
                        }
                    }
                }
            }
            self.put_grad(w, gw);
        }
        if self.req(x) {
            let mut gx = self.take_grad_buf(x);
            {
                let wv = &self.nodes[w.idx()].data;
                for ch in 0..c {
                    let kern = &wv[ch * 9..ch * 9 + 9];
                    let gxplane = &mut gx[ch * hw..(ch + 1) * hw];
                    let gplane = &gout[ch * hw..(ch + 1) * hw];
                    for ky in 0..3 {
                        let (y0, y1) = tap_range(ky, 1, h, h);
                        for kx in 0..3 {
                            let k = kern[ky * 3 + kx];
                            let (x0, x1) = tap_range(kx, 1, wd, wd);
                            if x1 <= x0 {
                                continue;
                            }
                            for y in y0..y1 {
                                let yi = y + ky - 1;
                                let xi0 = (x0 + kx) - 1;
                                let gxrow = &mut gxplane[yi * wd + xi0..yi * wd + xi0 + (x1 - x0)];
                                let grow = &gplane[y * wd + x0..y * wd + x1];
                                for (gxv, &g) in gxrow.iter_mut().zip(grow.iter()) {
                                    *gxv += k * g;
                                }
                            }
                        }
                    }
                }
            }
            self.put_grad(x, gx);
        }
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(bv) = b {
            if self.shape(bv) != [cout] {
                return Err(Error::shape(
                    op,
                    format!("bias must be [{cout}], got {}", fmt_shape(self.shape(bv))),
                ));
            }
        }
        Ok(())
    }

    // ── pooling and resampling ───────────────────────────────────────────

    /// Mean over all spatial positions: `[C,H,W] → [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.check_chw("global_avg_pool", x)?;
        let hw = h * w;
        let inv = T::one() / T::of_f64(hw as f64);
        let xd = &self.nodes[x.idx()].data;
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let mut acc = T::zero();
            for &v in &xd[ch * hw..(ch + 1) * hw] {
                acc += v;
            }
            out.push(acc * inv);
        }
        let req = self.req(x);
        self.push("global_avg_pool", vec![c], out, req, Op::GlobalAvgPool(x))
    }

    pub(super) fn bw_global_avg_pool(&mut self, x: Var, gout: &[T]) {
        if !self.req(x) {
            return;
        }
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let hw = h * w;
        let inv = T::one() / T::of_f64(hw as f64);
        let mut gx = self.take_grad_buf(x);
        for ch in 0..c {
            let g = gout[ch] * inv;
            for gv in &mut gx[ch * hw..(ch + 1) * hw] {
                *gv += g;
            }
        }
        self.put_grad(x, gx);
    }

    /// Adaptive average pooling down to `oh × ow`: output cell `(i,j)`
    /// averages input rows `⌊i·H/oh⌋ .. ⌈(i+1)·H/oh⌉` (same for columns), so
    /// cells tile the input with near-equal bins. Downsampling only.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.check_chw("adaptive_avg_pool", x)?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::invalid(
                "adaptive_avg_pool",
                format!("target {oh}×{ow} invalid for input {h}×{w} (downsample only)"),
            ));
        }
        let xd = &self.nodes[x.idx()].data;
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let xplane = &xd[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                let (ys, ye) = bin_bounds(oy, h, oh);
                for ox in 0..ow {
                    let (xs, xe) = bin_bounds(ox, w, ow);
                    // Sum rows first, then combine row partials: keeps exact
                    // round-trips at integer ratios and is slightly more
                    // accurate in general.
                    let mut total = T::zero();
                    for y in ys..ye {
                        let mut rowsum = T::zero();
                        for &v in &xplane[y * w + xs..y * w + xe] {
                            rowsum += v;
                        }
                        total += rowsum;
                    }
                    let area = T::of_f64(((ye - ys) * (xe - xs)) as f64);
                    out[ch * oh * ow + oy * ow + ox] = total / area;
                }
            }
        }
        let req = self.req(x);
        self.push("adaptive_avg_pool", vec![c, oh, ow], out, req, Op::AdaptiveAvgPool(x))
    }

    pub(super) fn bw_adaptive_avg_pool(&mut self, x: Var, out: Var, gout: &[T]) {
        if !self.req(x) {
            return;
        }
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (oh, ow) = (self.shape(out)[1], self.shape(out)[2]);
        let mut gx = self.take_grad_buf(x);
        for ch in 0..c {
            let gxplane = &mut gx[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                let (ys, ye) = bin_bounds(oy, h, oh);
                for ox in 0..ow {
                    let (xs, xe) = bin_bounds(ox, w, ow);
                    let area = T::of_f64(((ye - ys) * (xe - xs)) as f64);
                    let g = gout[ch * oh * ow + oy * ow + ox] / area;
                    for y in ys..ye {
                        for gv in &mut gxplane[y * w + xs..y * w + xe] {
                            *gv += g;
                        }
                    }
                }
            }
        }
        self.put_grad(x, gx);
    }

    /// Nearest-neighbour resampling to `oh × ow`: output `(i,j)` copies
    /// input `(⌊i·H/oh⌋, ⌊j·W/ow⌋)`. At integer upsampling ratios this is an
    /// exact repeat; gradient sums over all copies of a source pixel.
    pub fn nearest_upsample(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.check_chw("nearest_upsample", x)?;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("nearest_upsample", "target size must be ≥ 1".to_string()));
        }
        let xd = &self.nodes[x.idx()].data;
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let xplane = &xd[ch * h * w..(ch + 1) * h * w];
            let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                let sy = oy * h / oh;
                let xrow = &xplane[sy * w..(sy + 1) * w];
                let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                for (ox, o) in orow.iter_mut().enumerate() {
                    *o = xrow[ox * w / ow];
                }
            }
        }
        let req = self.req(x);
        self.push("nearest_upsample", vec![c, oh, ow], out, req, Op::NearestUpsample(x))
    }

    pub(super) fn bw_nearest_upsample(&mut self, x: Var, out: Var, gout: &[T]) {
        if !self.req(x) {
            return;
        }
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (oh, ow) = (self.shape(out)[1], self.shape(out)[2]);
        let mut gx = self.take_grad_buf(x);
        for ch in 0..c {
            let gxplane = &mut gx[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                let sy = oy * h / oh;
                let grow = &gout[ch * oh * ow + oy * ow..ch * oh * ow + (oy + 1) * ow];
                for (ox, &g) in grow.iter().enumerate() {
                    gxplane[sy * w + ox * w / ow] += g;
                }
            }
        }
        self.put_grad(x, gx);
    }

    /// Broadcast a channel vector `[C]` over a spatial grid: `[C] → [C,h,w]`.
    /// Gradient sums over the grid per channel.
    pub fn broadcast_chw(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(v).to_vec();
        if s.len() != 1 {
            return Err(Error::shape(
                "broadcast_chw",
                format!("want rank-1 [C], got {}", fmt_shape(&s)),
            ));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("broadcast_chw", "grid must be ≥ 1×1".to_string()));
        }
        let c = s[0];
        let vd = &self.nodes[v.idx()].data;
        let mut out = vec![T::zero(); c * h * w];
        for (ch, oplane) in out.chunks_mut(h * w).enumerate() {
            oplane.fill(vd[ch]);
        }
        let req = self.req(v);
        self.push("broadcast_chw", vec![c, h, w], out, req, Op::BroadcastChw(v))
    }

    pub(super) fn bw_broadcast_chw(&mut self, v: Var, out: Var, gout: &[T]) {
        if !self.req(v) {
            return;
        }
        let (c, hw) = (self.shape(out)[0], self.shape(out)[1] * self.shape(out)[2]);
        let mut gv = self.take_grad_buf(v);
        for ch in 0..c {
            let mut acc = T::zero();
            for &g in &gout[ch * hw..(ch + 1) * hw] {
                acc += g;
            }
            gv[ch] += acc;
        }
        self.put_grad(v, gv);
    }
}

/// Input range `[start, end)` covered by output bin `i` of `n` over `len`.
fn bin_bounds(i: usize, len: usize, n: usize) -> (usize, usize) {
    let start = i * len / n;
    let end = ((i + 1) * len + n - 1) / n;
    (start, end)
}
