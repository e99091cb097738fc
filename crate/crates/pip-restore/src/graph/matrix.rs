//! Matrix products, row softmax, cross-entropy and channel layernorm.
//!
//! All loops are arranged so the innermost traversal is over contiguous
//! memory (dot products of rows, or saxpy into rows) — that is what lets
//! LLVM vectorize them.

use super::{Graph, Op, Var};
use crate::error::Error;
use crate::num::Scalar;
use crate::tensor::fmt_shape;
use crate::Result;

impl<T: Scalar> Graph<T> {
    // ── matmul ───────────────────────────────────────────────────────────

    /// `[M,K] · [K,N] → [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("want [M,K]·[K,N], got {} · {}", fmt_shape(&sa), fmt_shape(&sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ad = &self.nodes[a.idx()].data;
        let bd = &self.nodes[b.idx()].data;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o = *o + av * bv;
                }
            }
        }
        let req = self.req(a) || self.req(b);
        self.push("matmul", vec![m, n], out, req, Op::Matmul(a, b))
    }

    pub(super) fn bw_matmul(&mut self, a: Var, b: Var, gout: &[T]) {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        if self.req(a) {
            // dA[i,k] = Σ_n gout[i,n]·B[k,n]  (dot of contiguous rows)
            let mut ga = self.take_grad_buf(a);
            {
                let bd = &self.nodes[b.idx()].data;
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    let garow = &mut ga[i * k..(i + 1) * k];
                    for (kk, gv) in garow.iter_mut().enumerate() {
                        let brow = &bd[kk * n..(kk + 1) * n];
                        let mut acc = T::zero();
                        for (&g, &bv) in grow.iter().zip(brow.iter()) {
                            acc += g * bv;
                        }
                        *gv += acc;
                    }
                }
            }
            self.put_grad(a, ga);
        }
        if self.req(b) {
            // dB[k,n] = Σ_m A[m,k]·gout[m,n]  (saxpy into rows of dB)
            let mut gb = self.take_grad_buf(b);
            {
                let ad = &self.nodes[a.idx()].data;
                for i in 0..m {
                    let arow = &ad[i * k..(i + 1) * k];
                    let grow = &gout[i * n..(i + 1) * n];
                    for (kk, &av) in arow.iter().enumerate() {
                        let gbrow = &mut gb[kk * n..(kk + 1) * n];
                        for (gbv, &g) in gbrow.iter_mut().zip(grow.iter()) {
                            *gbv += av * g;
                        }
                    }
                }
            }
            self.put_grad(b, gb);
        }
    }

    /// `[M,K] · [N,K]ᵀ → [M,N]` — both operands row-major, second transposed
    /// on the fly. Every inner loop is a contiguous dot product.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(
                "matmul_nt",
                format!("want [M,K]·[N,K]ᵀ, got {} · {}", fmt_shape(&sa), fmt_shape(&sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let ad = &self.nodes[a.idx()].data;
        let bd = &self.nodes[b.idx()].data;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&av, &bv) in arow.iter().zip(brow.iter()) {
                    acc += av * bv;
                }
                out[i * n + j] = acc;
            }
        }
        let req = self.req(a) || self.req(b);
        self.push("matmul_nt", vec![m, n], out, req, Op::MatmulNT(a, b))
    }

    pub(super) fn bw_matmul_nt(&mut self, a: Var, b: Var, gout: &[T]) {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[0];
        if self.req(a) {
            // dA[i,:] += Σ_j gout[i,j]·B[j,:]
            let mut ga = self.take_grad_buf(a);
            {
                let bd = &self.nodes[b.idx()].data;
                for i in 0..m {
                    let garow = &mut ga[i * k..(i + 1) * k];
                    for j in 0..n {
                        let g = gout[i * n + j];
                        let brow = &bd[j * k..(j + 1) * k];
                        for (gv, &bv) in garow.iter_mut().zip(brow.iter()) {
                            *gv += g * bv;
                        }
                    }
                }
            }
            self.put_grad(a, ga);
        }
        if self.req(b) {
            // dB[j,:] += Σ_i gout[i,j]·A[i,:]
            let mut gb = self.take_grad_buf(b);
            {
                let ad = &self.nodes[a.idx()].data;
                for i in 0..m {
                    let arow = &ad[i * k..(i + 1) * k];
                    for j in 0..n {
                        let g = gout[i * n + j];
                        let gbrow = &mut gb[j * k..(j + 1) * k];
                        for (gv, &av) in gbrow.iter_mut().zip(arow.iter()) {
                            *gv += g * av;
                        }
                    }
                }
            }
            self.put_grad(b, gb);
        }
    }

    // ── softmax over the last axis ───────────────────────────────────────

    /// Numerically-stable softmax over the last axis (max subtraction).
    /// A row of equal values maps to the uniform distribution.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("softmax", "want rank ≥ 1, got scalar".to_string()));
        }
        let l = *shape.last().unwrap();
        let xd = &self.nodes[x.idx()].data;
        let mut out = vec![T::zero(); xd.len()];
        for (orow, xrow) in out.chunks_mut(l).zip(xd.chunks(l)) {
            let mx = xrow.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (o, &v) in orow.iter_mut().zip(xrow.iter()) {
                let e = (v - mx).exp();
                *o = e;
                denom += e;
            }
            for o in orow.iter_mut() {
                *o = *o / denom;
            }
        }
        let req = self.req(x);
        self.push("softmax", shape, out, req, Op::SoftmaxRows(x))
    }

    pub(super) fn bw_softmax_rows(&mut self, x: Var, out: Var, gout: &[T]) {
        if !self.req(x) {
            return;
        }
        let l = *self.shape(out).last().unwrap();
        let mut gx = self.take_grad_buf(x);
        {
            let p = &self.nodes[out.idx()].data;
            for ((gxrow, prow), grow) in gx.chunks_mut(l).zip(p.chunks(l)).zip(gout.chunks(l)) {
                let mut dot = T::zero();
                for (&pv, &gv) in prow.iter().zip(grow.iter()) {
                    dot += pv * gv;
                }
                for ((gx_i, &p_i), &g_i) in gxrow.iter_mut().zip(prow.iter()).zip(grow.iter()) {
                    *gx_i += p_i * (g_i - dot);
                }
            }
        }
        self.put_grad(x, gx);
    }

    // ── cross-entropy from logits ────────────────────────────────────────

    /// `−log softmax(x)[label]` for a 1-D logit vector, computed via a
    /// stable log-sum-exp. Backward is the classic `p − onehot`.
    pub fn cross_entropy_logits(&mut self, x: Var, label: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 {
            return Err(Error::shape(
                "cross_entropy",
                format!("want rank-1 logits, got {}", fmt_shape(&shape)),
            ));
        }
        if label >= shape[0] {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {label} out of range for {} classes", shape[0]),
            ));
        }
        let xd = &self.nodes[x.idx()].data;
        let mx = xd.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        let mut probs = vec![T::zero(); xd.len()];
        for (p, &v) in probs.iter_mut().zip(xd.iter()) {
            let e = (v - mx).exp();
            *p = e;
            denom += e;
        }
        for p in probs.iter_mut() {
            *p = *p / denom;
        }
        let loss = denom.ln() + mx - xd[label];
        let req = self.req(x);
        self.push("cross_entropy", vec![], vec![loss], req, Op::CrossEntropyLogits { x, label, probs })
    }

    pub(super) fn bw_cross_entropy(&mut self, x: Var, label: usize, probs: &[T], gout: &[T]) {
        if !self.req(x) {
            return;
        }
        let mut gx = self.take_grad_buf(x);
        for (i, (gv, &p)) in gx.iter_mut().zip(probs.iter()).enumerate() {
            let onehot = if i == label { T::one() } else { T::zero() };
            *gv += gout[0] * (p - onehot);
        }
        self.put_grad(x, gx);
    }

    // ── layernorm across channels ────────────────────────────────────────

    /// Layer normalization of a `[C,H,W]` map across the channel axis,
    /// independently at every spatial position: for each (h,w),
    /// `y_c = γ_c·(x_c − μ)/√(σ² + ε) + β_c` with biased variance over C.
    pub fn layernorm_chw(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(
                "layernorm",
                format!("want rank-3 [C,H,W], got {}", fmt_shape(&shape)),
            ));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "layernorm",
                    format!("{name} must be [{c}], got {}", fmt_shape(self.shape(v))),
                ));
            }
        }
        let eps = T::of_f64(EPS);
        let inv_c = T::one() / T::of_f64(c as f64);
        let xd = &self.nodes[x.idx()].data;
        let gd = &self.nodes[gamma.idx()].data;
        let bd = &self.nodes[beta.idx()].data;
        let mut out = vec![T::zero(); xd.len()];
        let mut mean = vec![T::zero(); hw];
        let mut rstd = vec![T::zero(); hw];
        for p in 0..hw {
            let mut mu = T::zero();
            for ch in 0..c {
                mu += xd[ch * hw + p];
            }
            mu = mu * inv_c;
            let mut var = T::zero();
            for ch in 0..c {
                let d = xd[ch * hw + p] - mu;
                var += d * d;
            }
            var = var * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            mean[p] = mu;
            rstd[p] = rs;
            for ch in 0..c {
                out[ch * hw + p] = gd[ch] * (xd[ch * hw + p] - mu) * rs + bd[ch];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        self.push("layernorm", shape, out, req, Op::LayerNormChw { x, gamma, beta, mean, rstd })
    }

    pub(super) fn bw_layernorm_chw(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        rstd: &[T],
        gout: &[T],
    ) {
        let shape = self.shape(x).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let inv_c = T::one() / T::of_f64(c as f64);
        if self.req(gamma) {
            let mut gg = self.take_grad_buf(gamma);
            {
                let xd = &self.nodes[x.idx()].data;
                for ch in 0..c {
                    let mut acc = T::zero();
                    for p in 0..hw {
                        let xhat = (xd[ch * hw + p] - mean[p]) * rstd[p];
                        acc += gout[ch * hw + p] * xhat;
                    }
                    gg[ch] += acc;
                }
            }
            self.put_grad(gamma, gg);
        }
        if self.req(beta) {
            let mut gb = self.take_grad_buf(beta);
            for ch in 0..c {
                let mut acc = T::zero();
                for p in 0..hw {
                    acc += gout[ch * hw + p];
                }
                gb[ch] += acc;
            }
            self.put_grad(beta, gb);
        }
        if self.req(x) {
            let mut gx = self.take_grad_buf(x);
            {
                let xd = &self.nodes[x.idx()].data;
                let gd = &self.nodes[gamma.idx()].data;
                // Per position: gx = rstd·(gγ̂ − mean(gγ̂) − x̂·mean(gγ̂·x̂))
                // where gγ̂_c = γ_c·gout_c and x̂ is the normalized input.
                for p in 0..hw {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for ch in 0..c {
                        let xhat = (xd[ch * hw + p] - mean[p]) * rstd[p];
                        let gy = gd[ch] * gout[ch * hw + p];
                        sum_g += gy;
                        sum_gx += gy * xhat;
                    }
                    sum_g = sum_g * inv_c;
                    sum_gx = sum_gx * inv_c;
                    for ch in 0..c {
                        let xhat = (xd[ch * hw + p] - mean[p]) * rstd[p];
                        let gy = gd[ch] * gout[ch * hw + p];
                        gx[ch * hw + p] += rstd[p] * (gy - sum_g - xhat * sum_gx);
                    }
                }
            }
            self.put_grad(x, gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn assert_close(actual: &[f32], expected: &[f32], tol: f32) {
        assert_eq!(actual.len(), expected.len());
        for (i, (&a, &e)) in actual.iter().zip(expected.iter()).enumerate() {
            assert!((a - e).abs() <= tol, "element {i}: {a} vs {e}");
        }
    }

    #[test]
    fn matmul_2x3_3x2() {
        let mut g = Graph::<f32>::new();
        let a = g.input(&t32(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = g.input(&t32(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[58.0, 64.0, 139.0, 154.0]);
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g = Graph::<f32>::new();
        let a = g.input(&t32(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        // b is [2,3]; matmul_nt(a, b) = a · bᵀ.
        let b = g.input(&t32(&[2, 3], &[1.0, 0.0, 1.0, 0.5, 0.5, 0.5])).unwrap();
        let c = g.matmul_nt(a, b).unwrap();
        assert_eq!(g.value(c), &[4.0, 3.0, 10.0, 7.5]);
    }

    #[test]
    fn matmul_grads_by_hand() {
        // loss = sum(A·B) with A=[1,2;3,4], B=[5,6;7,8].
        // dA[i,k] = Σ_n B[k,n] → rows [11, 15]; dB[k,n] = Σ_m A[m,k] → [4,4;6,6].
        let mut g = Graph::<f32>::new();
        let mut store = ParamStore::new();
        let pa = store.add("a", t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let pb = store.add("b", t32(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let a = g.param(&store, pa).unwrap();
        let b = g.param(&store, pb).unwrap();
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad(pa).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.param_grad(pb).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_basics() {
        let mut g = Graph::<f32>::new();
        let x = g.input(&t32(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 1000.0, 999.0])).unwrap();
        let p = g.softmax_rows(x).unwrap();
        let v = g.value(p);
        // Equal logits → uniform; huge logits stay finite (max subtraction).
        assert_close(&v[0..3], &[1.0 / 3.0; 3], 1e-6);
        let s1: f32 = v[3..6].iter().sum();
        assert!((s1 - 1.0).abs() < 1e-6);
        assert!(v[3] > v[5]);
    }

    #[test]
    fn softmax_gradient_sums_to_zero_per_row() {
        let mut g = Graph::<f32>::new();
        let mut store = ParamStore::new();
        let px = store.add("x", t32(&[1, 4], &[0.2, -1.0, 0.7, 0.0]));
        let x = g.param(&store, px).unwrap();
        let p = g.softmax_rows(x).unwrap();
        // Weighted sum picks asymmetric weights to get a non-trivial grad.
        let wts = g.input(&t32(&[1, 4], &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let picked = g.mul(p, wts).unwrap();
        let loss = g.sum(picked).unwrap();
        g.backward(loss).unwrap();
        let gx = g.param_grad(px).unwrap();
        let total: f32 = gx.iter().sum();
        assert!(total.abs() < 1e-6, "softmax grad rows must sum to 0, got {total}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f32>::new();
        let mut store = ParamStore::new();
        let px = store.add("x", t32(&[4], &[0.0; 4]));
        let x = g.param(&store, px).unwrap();
        let l = g.cross_entropy_logits(x, 2).unwrap();
        assert_close(g.value(l), &[4.0f32.ln()], 1e-6);
        g.backward(l).unwrap();
        let gx = g.param_grad(px).unwrap();
        assert_close(gx, &[0.25, 0.25, -0.75, 0.25], 1e-6);
        assert!(g.cross_entropy_logits(x, 4).is_err());
    }

    #[test]
    fn layernorm_constant_input_gives_beta() {
        // Constant across channels → normalized value 0 → output = β.
        let mut g = Graph::<f32>::new();
        let x = g.input(&t32(&[3, 1, 2], &[0.7; 6])).unwrap();
        let gamma = g.input(&t32(&[3], &[1.0; 3])).unwrap();
        let beta = g.input(&t32(&[3], &[0.1, 0.2, 0.3])).unwrap();
        let y = g.layernorm_chw(x, gamma, beta).unwrap();
        assert_close(g.value(y), &[0.1, 0.1, 0.2, 0.2, 0.3, 0.3], 1e-6);
    }

    #[test]
    fn layernorm_normalizes_each_position() {
        let mut g = Graph::<f32>::new();
        let x = g.input(&t32(&[2, 1, 1], &[1.0, 3.0])).unwrap();
        let gamma = g.input(&t32(&[2], &[1.0, 1.0])).unwrap();
        let beta = g.input(&t32(&[2], &[0.0, 0.0])).unwrap();
        let y = g.layernorm_chw(x, gamma, beta).unwrap();
        // μ=2, σ=1 → normalized to ±1 (up to the ε in the denominator).
        assert_close(g.value(y), &[-1.0, 1.0], 1e-3);
    }
}
