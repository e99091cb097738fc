//! Full-reference image quality metrics: PSNR and single-scale SSIM.
//!
//! Both metrics take `[C, H, W]` image tensors and do their arithmetic in
//! `f64` regardless of the storage scalar. SSIM is computed on luminance
//! (the channel mean) with an 11×11 Gaussian window over valid positions
//! only, which keeps the value independent of any padding convention.

use crate::error::Error;
use crate::num::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// PSNR ceiling reported for (near-)identical images, in dB.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB: `10·log10(max_val² / MSE)`.
///
/// Identical images (MSE = 0, or small enough that the formula would exceed
/// the ceiling) report [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.data().is_empty() {
        return Err(Error::shape("psnr", "empty image"));
    }
    let mut se = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64_lossy() - y.to_f64_lossy();
        se += d * d;
    }
    let mse = se / a.data().len() as f64;
    let db = 10.0 * (max_val * max_val / mse).log10();
    if db.is_finite() && db < PSNR_CAP_DB {
        Ok(db)
    } else {
        Ok(PSNR_CAP_DB)
    }
}

/// Single-scale SSIM on luminance with Gaussian-weighted local statistics.
///
/// `window` must be odd and no larger than either spatial dimension. Local
/// means, variances and covariance are accumulated under a normalized
/// Gaussian window (`sigma`), and the standard two-factor form
///
/// ```text
/// SSIM = mean over valid positions of
///        (2·μa·μb + C1)(2·σab + C2) / ((μa² + μb² + C1)(σa² + σb² + C2))
/// ```
///
/// is averaged over all positions where the window fits entirely inside the
/// image. `C1 = (k1·max_val)²`, `C2 = (k2·max_val)²`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim_with(a, b, 11, 1.5, 0.01, 0.03, 1.0)
}

/// [`ssim`] with every parameter explicit.
pub fn ssim_with<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    window: usize,
    sigma: f64,
    k1: f64,
    k2: f64,
    max_val: f64,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim",
            format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.shape().len() != 3 {
        return Err(Error::shape("ssim", format!("expected [C,H,W], got {:?}", a.shape())));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid("ssim", format!("window must be odd, got {window}")));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < window || w < window {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}×{w} smaller than {window}×{window} window"),
        ));
    }

    let la = luminance(a, c, h, w);
    let lb = luminance(b, c, h, w);
    let k = gaussian_window(window, sigma);

    let c1 = (k1 * max_val) * (k1 * max_val);
    let c2 = (k2 * max_val) * (k2 * max_val);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=(h - window) {
        for x0 in 0..=(w - window) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for ky in 0..window {
                for kx in 0..window {
                    let wgt = k[ky * window + kx];
                    let av = la[(y0 + ky) * w + (x0 + kx)];
                    let bv = lb[(y0 + ky) * w + (x0 + kx)];
                    mu_a += wgt * av;
                    mu_b += wgt * bv;
                    saa += wgt * av * av;
                    sbb += wgt * bv * bv;
                    sab += wgt * av * bv;
                }
            }
            let var_a = saa - mu_a * mu_a;
            let var_b = sbb - mu_b * mu_b;
            let cov = sab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Channel-mean luminance plane as `f64`.
fn luminance<T: Scalar>(img: &Tensor<T>, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    let plane = h * w;
    for ch in 0..c {
        for i in 0..plane {
            out[i] += img.data()[ch * plane + i].to_f64_lossy();
        }
    }
    let inv = 1.0 / c as f64;
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// Normalized 2-D Gaussian window, row-major `window × window`.
fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let mut k = vec![0.0f64; window * window];
    let mut sum = 0.0;
    for y in 0..window {
        for x in 0..window {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            k[y * window + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

// ── per-task aggregation ──

/// One aggregated row of a quality table.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityRow {
    /// Task name the row aggregates over.
    pub task: String,
    /// Mean PSNR in dB.
    pub psnr_db: f64,
    /// Mean SSIM.
    pub ssim: f64,
    /// Number of image pairs aggregated.
    pub count: usize,
}

/// Running per-task accumulator for (PSNR, SSIM) pairs.
#[derive(Debug, Default)]
pub struct QualityReport {
    rows: Vec<(String, f64, f64, usize)>,
}

impl QualityReport {
    /// Empty report.
    pub fn new() -> Self {
        Self::default()
    }

    /// Record one image pair's metrics under `task`.
    pub fn record(&mut self, task: &str, psnr_db: f64, ssim: f64) {
        match self.rows.iter_mut().find(|(t, _, _, _)| t == task) {
            Some((_, p, s, n)) => {
                *p += psnr_db;
                *s += ssim;
                *n += 1;
            }
            None => self.rows.push((task.to_string(), psnr_db, ssim, 1)),
        }
    }

    /// Mean rows in first-recorded task order.
    pub fn rows(&self) -> Vec<QualityRow> {
        self.rows
            .iter()
            .map(|(t, p, s, n)| QualityRow {
                task: t.clone(),
                psnr_db: p / *n as f64,
                ssim: s / *n as f64,
                count: *n,
            })
            .collect()
    }

    /// Mean PSNR for one task, if recorded.
    pub fn task_psnr(&self, task: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(t, _, _, _)| t == task)
            .map(|(_, p, _, n)| p / *n as f64)
    }

    /// Aligned text table.
    pub fn format_table(&self) -> String {
        let mut out = String::from("task            psnr_db   ssim      n\n");
        for r in self.rows() {
            out.push_str(&format!(
                "{:<15} {:>7.2}   {:.4}   {:>4}\n",
                r.task, r.psnr_db, r.ssim, r.count
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{chacha, Stream};
    use rand::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn filled(shape: &[usize], v: f32) -> Tensor<f32> {
        Tensor::full(shape.to_vec(), v)
    }

    // ── psnr ──

    #[test]
    fn identical_images_hit_the_cap() {
        let a = filled(&[3, 16, 16], 0.37);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn uniform_error_tenth_gives_twenty_db() {
        let a = Tensor::<f64>::full(vec![3, 16, 16], 0.3);
        let b = Tensor::<f64>::full(vec![3, 16, 16], 0.4);
        assert_close(psnr(&a, &b, 1.0).unwrap(), 20.0, 1e-9);
    }

    #[test]
    fn uniform_error_twentieth_gives_about_26_db() {
        let a = Tensor::<f64>::full(vec![3, 16, 16], 0.50);
        let b = Tensor::<f64>::full(vec![3, 16, 16], 0.55);
        assert_close(psnr(&a, &b, 1.0).unwrap(), 26.020599913279625, 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = filled(&[3, 16, 16], 0.5);
        let b = filled(&[3, 16, 17], 0.5);
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_as_noise_grows() {
        let mut rng = chacha(31, Stream::Init, 0);
        let clean: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.2..0.8)).collect();
        let clean = Tensor::new(vec![3, 32, 32], clean).unwrap();
        let mut last = f64::INFINITY;
        for (i, sigma) in [5.0f64, 15.0, 25.0, 50.0].into_iter().enumerate() {
            let mut nrng = chacha(31, Stream::Init, 1 + i as u64);
            let noisy: Vec<f32> = clean
                .data()
                .iter()
                .map(|&v| v + (sigma / 255.0) as f32 * sample_normal(&mut nrng))
                .collect();
            let noisy = Tensor::new(vec![3, 32, 32], noisy).unwrap();
            let db = psnr(&clean, &noisy, 1.0).unwrap();
            assert!(db < last, "psnr must fall as sigma grows: {db} !< {last}");
            last = db;
        }
    }

    fn sample_normal(rng: &mut impl Rng) -> f32 {
        use rand_distr::{Distribution, StandardNormal};
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    }

    // ── ssim ──

    #[test]
    fn ssim_of_image_with_itself_is_exactly_one() {
        let mut rng = chacha(32, Stream::Init, 0);
        let data: Vec<f32> = (0..3 * 20 * 20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = Tensor::new(vec![3, 20, 20], data).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn constant_images_match_the_closed_form() {
        let a = filled(&[3, 16, 16], 0.2);
        let b = filled(&[3, 16, 16], 0.8);
        let c1 = 0.01f64 * 0.01;
        // Constant images: variances and covariance vanish, the second factor
        // collapses to C2/C2 = 1, leaving the mean-comparison factor alone.
        let expect = (2.0 * 0.2 * 0.8 + c1) / (0.2 * 0.2 + 0.8 * 0.8 + c1);
        let got = ssim(&a, &b).unwrap();
        assert_close(got, expect, 1e-6);
        assert_close(got, 0.4716, 2e-3);
    }

    #[test]
    fn ssim_is_symmetric() {
        for seed in 0..5u64 {
            let mut rng = chacha(seed, Stream::Init, 40);
            let x: Vec<f32> = (0..3 * 15 * 18).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y: Vec<f32> = (0..3 * 15 * 18).map(|_| rng.gen_range(0.0..1.0)).collect();
            let a = Tensor::new(vec![3, 15, 18], x).unwrap();
            let b = Tensor::new(vec![3, 15, 18], y).unwrap();
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert_close(ab, ba, 1e-9);
            assert!(ab.abs() <= 1.0, "|ssim| must stay within 1, got {ab}");
        }
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let a = filled(&[3, 10, 16], 0.5);
        let b = filled(&[3, 10, 16], 0.5);
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        let a = filled(&[3, 16, 16], 0.5);
        let b = filled(&[1, 16, 16], 0.5);
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn noisier_image_scores_lower_ssim() {
        let mut rng = chacha(33, Stream::Init, 0);
        let mut base = vec![0.0f32; 3 * 24 * 24];
        for (i, v) in base.iter_mut().enumerate() {
            let x = (i % 24) as f32 / 24.0;
            *v = 0.3 + 0.4 * x + rng.gen_range(-0.02..0.02);
        }
        let clean = Tensor::new(vec![3, 24, 24], base.clone()).unwrap();
        let small: Vec<f32> = base.iter().map(|&v| v + 0.05 * sample_normal(&mut rng)).collect();
        let large: Vec<f32> = base.iter().map(|&v| v + 0.20 * sample_normal(&mut rng)).collect();
        let s_small = ssim(&clean, &Tensor::new(vec![3, 24, 24], small).unwrap()).unwrap();
        let s_large = ssim(&clean, &Tensor::new(vec![3, 24, 24], large).unwrap()).unwrap();
        assert!(s_small > s_large, "{s_small} !> {s_large}");
    }

    // ── aggregation ──

    #[test]
    fn report_averages_per_task() {
        let mut rep = QualityReport::new();
        rep.record("noise", 20.0, 0.8);
        rep.record("noise", 22.0, 0.9);
        rep.record("rain", 30.0, 0.95);
        let rows = rep.rows();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].task, "noise");
        assert_close(rows[0].psnr_db, 21.0, 1e-12);
        assert_close(rows[0].ssim, 0.85, 1e-12);
        assert_eq!(rows[0].count, 2);
        assert_close(rep.task_psnr("rain").unwrap(), 30.0, 1e-12);
        assert!(rep.task_psnr("haze").is_none());
        let table = rep.format_table();
        assert!(table.contains("noise"));
        assert!(table.contains("rain"));
    }
}
