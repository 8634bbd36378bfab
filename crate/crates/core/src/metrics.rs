//! Bit accuracy, PSNR and SSIM on tensors in `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{ImageTensor, TENSOR_RANGE};
use crate::payload::BitTensor;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Side of the optional Gaussian SSIM window.
pub const GAUSSIAN_WINDOW: usize = 11;
pub const GAUSSIAN_SIGMA: f64 = 1.5;

pub fn bit_accuracy(decoded: &BitTensor, truth: &BitTensor) -> Result<f64> {
    if decoded.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "decoded {:?} vs truth {:?}",
            decoded.shape(),
            truth.shape()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Shape("empty bit tensors".into()));
    }
    let same = decoded
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / truth.len() as f64)
}

pub fn mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    x.same_shape(y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / x.data().len() as f64)
}

/// PSNR in dB with peak-to-peak range 2. Identical images give `+inf`.
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (TENSOR_RANGE).log10() - 10.0 * m.log10())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimWindow {
    /// Whole-image statistics per channel.
    #[default]
    Global,
    /// Mean over 11x11 Gaussian windows (sigma 1.5), valid positions only.
    Gaussian,
}

fn ssim_terms(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * TENSOR_RANGE).powi(2);
    let c2 = (SSIM_K2 * TENSOR_RANGE).powi(2);
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn ssim_global_plane(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let mx = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (&p, &q) in a.iter().zip(b) {
        let dx = p as f64 - mx;
        let dy = q as f64 - my;
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    ssim_terms(mx, my, vx / n, vy / n, cov / n)
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (GAUSSIAN_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..GAUSSIAN_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter of a `w x h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn ssim_gaussian_plane(a: &[f32], b: &[f32], w: usize, h: usize) -> f64 {
    let k = gaussian_kernel();
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mx, ow, oh) = filter_valid(&a, w, h, &k);
    let (my, ..) = filter_valid(&b, w, h, &k);
    let (sxx, ..) = filter_valid(&prod(&a, &a), w, h, &k);
    let (syy, ..) = filter_valid(&prod(&b, &b), w, h, &k);
    let (sxy, ..) = filter_valid(&prod(&a, &b), w, h, &k);
    let total: f64 = (0..ow * oh)
        .map(|i| {
            ssim_terms(
                mx[i],
                my[i],
                sxx[i] - mx[i] * mx[i],
                syy[i] - my[i] * my[i],
                sxy[i] - mx[i] * my[i],
            )
        })
        .sum();
    total / (ow * oh) as f64
}

/// Global-statistics SSIM averaged over the three channels.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    ssim_with(x, y, SsimWindow::Global)
}

pub fn ssim_with(x: &ImageTensor, y: &ImageTensor, window: SsimWindow) -> Result<f64> {
    x.same_shape(y)?;
    let (w, h) = (x.width(), x.height());
    if window == SsimWindow::Gaussian && (w < GAUSSIAN_WINDOW || h < GAUSSIAN_WINDOW) {
        return Err(Error::Argument(format!(
            "windowed SSIM needs at least {GAUSSIAN_WINDOW}x{GAUSSIAN_WINDOW}, got {w}x{h}"
        )));
    }
    let total: f64 = (0..3)
        .map(|c| match window {
            SsimWindow::Global => ssim_global_plane(x.plane(c), y.plane(c)),
            SsimWindow::Gaussian => ssim_gaussian_plane(x.plane(c), y.plane(c), w, h),
        })
        .sum();
    Ok(total / 3.0)
}

/// Averages over a test set. `psnr` is `None` exactly when every pair was
/// identical, in which case `psnr_infinite` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Bits per pixel.
    pub rs_bpp: f64,
    /// Decibels.
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub n_images: usize,
}

impl MetricsReport {
    /// Builds a report from per-image values; PSNR is averaged over finite
    /// entries only when at least one exists.
    pub fn from_parts(
        accuracy: f64,
        data_depth: usize,
        psnrs: &[f64],
        ssims: &[f64],
    ) -> Result<Self> {
        if psnrs.is_empty() || psnrs.len() != ssims.len() {
            return Err(Error::Argument(
                "metrics need one PSNR and SSIM per image".into(),
            ));
        }
        let finite: Vec<f64> = psnrs.iter().copied().filter(|v| v.is_finite()).collect();
        let psnr = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        Ok(Self {
            accuracy,
            rs_bpp: crate::payload::rs_bpp(accuracy, data_depth)?,
            psnr,
            psnr_infinite: psnr.is_none(),
            ssim: ssims.iter().sum::<f64>() / ssims.len() as f64,
            n_images: psnrs.len(),
        })
    }

    /// PSNR with the infinite sentinel restored.
    pub fn psnr_db(&self) -> f64 {
        self.psnr.unwrap_or(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payload::random_bits;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(
            w,
            h,
            (0..3 * w * h).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        )
        .unwrap()
    }

    fn constant(w: usize, h: usize, v: f32) -> ImageTensor {
        ImageTensor::new(w, h, vec![v; 3 * w * h]).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let a = random_bits(2, 8, 8, 1).unwrap();
        assert_eq!(bit_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&a.complement(), &a).unwrap(), 0.0);
        let big_a = random_bits(1, 1000, 1000, 2).unwrap();
        let big_b = random_bits(1, 1000, 1000, 3).unwrap();
        let acc = bit_accuracy(&big_a, &big_b).unwrap();
        assert!((acc - 0.5).abs() <= 0.003, "{acc}");
        let c = random_bits(1, 8, 8, 1).unwrap();
        assert!(matches!(bit_accuracy(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_examples() {
        let x = random_image(9, 7, 4);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let p = psnr(&constant(1, 1, 1.0), &constant(1, 1, -1.0)).unwrap();
        assert!(p.abs() < 1e-12, "{p}");
        assert!(matches!(
            psnr(&x, &random_image(7, 9, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ssim_examples() {
        let x = random_image(16, 12, 5);
        let y = random_image(16, 12, 6);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!((ssim_with(&x, &x, SsimWindow::Gaussian).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim_with(
            &random_image(8, 8, 1),
            &random_image(8, 8, 2),
            SsimWindow::Gaussian
        )
        .is_err());
    }

    #[test]
    fn gaussian_window_on_uniform_shift_matches_global() {
        // Constant planes make every window identical to the whole image.
        let x = constant(12, 12, 0.2);
        let y = constant(12, 12, -0.3);
        let g = ssim(&x, &y).unwrap();
        let w = ssim_with(&x, &y, SsimWindow::Gaussian).unwrap();
        assert!((g - w).abs() < 1e-9, "{g} {w}");
    }

    #[test]
    fn report_handles_identical_images() {
        let r = MetricsReport::from_parts(1.0, 2, &[f64::INFINITY, f64::INFINITY], &[1.0, 1.0])
            .unwrap();
        assert!(r.psnr_infinite && r.psnr.is_none());
        assert_eq!(r.psnr_db(), f64::INFINITY);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr\":null"));
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
        let r = MetricsReport::from_parts(0.75, 2, &[30.0, 40.0], &[0.9, 0.8]).unwrap();
        assert_eq!(r.psnr, Some(35.0));
        assert_eq!(r.rs_bpp, 1.0);
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_mse(seed in 0u64..1000, a in 0.01f32..0.4, b in 0.01f32..0.4) {
            prop_assume!((a - b).abs() > 1e-3);
            let x = random_image(8, 8, seed).data().iter().map(|v| v * 0.5).collect::<Vec<_>>();
            let x = ImageTensor::new(8, 8, x).unwrap();
            let shift = |d: f32| ImageTensor::new(8, 8, x.data().iter().map(|v| v + d).collect()).unwrap();
            let (pa, pb) = (psnr(&x, &shift(a)).unwrap(), psnr(&x, &shift(b)).unwrap());
            prop_assert_eq!(a < b, pa > pb);
        }

        #[test]
        fn ssim_bounded_and_reflexive(seed in 0u64..1000) {
            let x = random_image(8, 8, seed);
            let y = random_image(8, 8, seed + 1);
            let s = ssim(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((ssim(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn accuracy_complements_sum_to_one(seed in 0u64..1000) {
            let a = random_bits(2, 8, 8, seed).unwrap();
            let b = random_bits(2, 8, 8, seed + 7).unwrap();
            let s = bit_accuracy(&a, &b).unwrap() + bit_accuracy(&a, &b.complement()).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
