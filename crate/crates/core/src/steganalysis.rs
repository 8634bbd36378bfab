//! Classical LSB steganalysis: the chi-square pair-of-values attack, sample
//! pair analysis, RS analysis, their unweighted fusion, and ROC scoring.
//!
//! Every detector works per colour channel on the raw bytes and averages the
//! three channel estimates, so permuting R, G and B never changes a score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::imagery::RgbImage;

/// Fused score above which an image is called a stego image.
pub const VERDICT_THRESHOLD: f64 = 0.2;
/// Minimum expected count of a chi-square category; sparser pairs are merged.
pub const CHI_MIN_EXPECTED: f64 = 4.0;
/// Flipping mask for RS analysis, applied to horizontal groups of four.
pub const RS_MASK: [bool; 4] = [false, true, true, false];
/// Smallest `width * height` accepted by sample pairs and RS analysis.
pub const MIN_PAIR_PIXELS: usize = 256;
/// Smallest `width * height` accepted by the chi-square attack.
pub const MIN_CHI_PIXELS: usize = 64;

/// Conditions under which a detector fell back to a defined default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    /// Fewer than two populated chi-square categories.
    ChiSquareDegenerate,
    /// No pair statistics to solve for an embedding rate.
    SamplePairsDegenerate,
    /// The RS quadratic had no real root.
    RsNoRealRoot,
}

/// A detector output together with the channels that needed a fallback.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub warning: Option<Warning>,
}

impl Estimate {
    fn from_channels(values: [(f64, bool); 3], warning: Warning) -> Self {
        Self {
            value: values.iter().map(|v| v.0).sum::<f64>() / 3.0,
            warning: values.iter().any(|v| v.1).then_some(warning),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    /// Probability of embedding from the pair-of-values test.
    pub chi_square: f64,
    /// Estimated embedding rate.
    pub sample_pairs: f64,
    /// Estimated embedding rate.
    pub rs_analysis: f64,
    pub fused: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<Warning>,
}

impl DetectorScore {
    pub fn is_stego(&self, threshold: f64) -> bool {
        self.fused > threshold
    }
}

fn lsb_path(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Writes `bits` into the least significant bits of the channel bytes visited
/// along a pseudorandom path drawn from `seed`.
pub fn lsb_embed(img: &RgbImage, bits: &[u8], seed: u64) -> Result<RgbImage> {
    let capacity = img.pixels().len();
    if bits.len() > capacity {
        return Err(Error::Capacity {
            requested: bits.len().div_ceil(8),
            max_bytes: capacity / 8,
        });
    }
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return Err(Error::Argument(format!("bit value {b}")));
    }
    let mut out = img.clone();
    let px = out.pixels_mut();
    for (&i, &b) in lsb_path(capacity, seed).iter().zip(bits) {
        px[i] = (px[i] & !1) | b;
    }
    Ok(out)
}

/// Reads `n` bits back along the path of [`lsb_embed`].
pub fn lsb_extract(img: &RgbImage, n: usize, seed: u64) -> Result<Vec<u8>> {
    let px = img.pixels();
    if n > px.len() {
        return Err(Error::Capacity {
            requested: n.div_ceil(8),
            max_bytes: px.len() / 8,
        });
    }
    Ok(lsb_path(px.len(), seed)
        .iter()
        .take(n)
        .map(|&i| px[i] & 1)
        .collect())
}

fn channels(img: &RgbImage) -> [Vec<u8>; 3] {
    [img.channel(0), img.channel(1), img.channel(2)]
}

fn chi_square_channel(values: &[u8]) -> (f64, bool) {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let mut cats: Vec<(f64, f64)> = Vec::new();
    let (mut obs, mut exp) = (0.0, 0.0);
    for pair in hist.chunks_exact(2) {
        obs += pair[0] as f64;
        exp += (pair[0] + pair[1]) as f64 / 2.0;
        if exp >= CHI_MIN_EXPECTED {
            cats.push((obs, exp));
            obs = 0.0;
            exp = 0.0;
        }
    }
    if exp > 0.0 {
        match cats.last_mut() {
            Some(last) => {
                last.0 += obs;
                last.1 += exp;
            }
            None => cats.push((obs, exp)),
        }
    }
    if cats.len() < 2 {
        return (0.0, true);
    }
    let stat: f64 = cats.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dist = ChiSquared::new((cats.len() - 1) as f64).expect("positive degrees of freedom");
    (dist.sf(stat).clamp(0.0, 1.0), false)
}

/// Pair-of-values test: under full LSB replacement the counts of `2i` and
/// `2i + 1` equalize, so a small chi-square statistic (large p-value) signals
/// embedding. Returns the p-value averaged over channels.
pub fn chi_square_attack(img: &RgbImage) -> Result<Estimate> {
    if img.width() * img.height() < MIN_CHI_PIXELS {
        return Err(Error::Argument(format!(
            "chi-square attack needs at least {MIN_CHI_PIXELS} pixels"
        )));
    }
    let [r, g, b] = channels(img);
    Ok(Estimate::from_channels(
        [
            chi_square_channel(&r),
            chi_square_channel(&g),
            chi_square_channel(&b),
        ],
        Warning::ChiSquareDegenerate,
    ))
}

/// Root of `a x^2 + b x + c` with the smallest magnitude, if any is real.
fn smallest_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a.abs() < 1e-12 {
        return (b.abs() >= 1e-12).then(|| -c / b);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let (r1, r2) = ((-b + s) / (2.0 * a), (-b - s) / (2.0 * a));
    Some(if r1.abs() <= r2.abs() { r1 } else { r2 })
}

fn sample_pairs_channel(values: &[u8], width: usize) -> (f64, bool) {
    let (mut x, mut y, mut z, mut w, mut p) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for row in values.chunks_exact(width) {
        for pair in row.windows(2) {
            let (u, v) = (pair[0], pair[1]);
            p += 1;
            if u == v {
                z += 1;
                continue;
            }
            if (v % 2 == 0) == (u < v) {
                x += 1;
            } else {
                y += 1;
                if u / 2 == v / 2 {
                    w += 1;
                }
            }
        }
    }
    let a = (w + z) as f64 / 2.0;
    let b = 2.0 * x as f64 - p as f64;
    let c = y as f64 - x as f64;
    if a == 0.0 && b == 0.0 {
        return (0.0, true);
    }
    // Near full embedding the two roots meet; a slightly negative
    // discriminant is read as that double root.
    let root = smallest_root(a, b, c).unwrap_or(-b / (2.0 * a));
    if root.is_finite() {
        (root.clamp(0.0, 1.0), false)
    } else {
        (0.0, true)
    }
}

/// Sample pair analysis over horizontally adjacent pixels. Returns the
/// estimated fraction of bytes carrying message bits.
pub fn sample_pairs(img: &RgbImage) -> Result<Estimate> {
    if img.width() * img.height() < MIN_PAIR_PIXELS || img.width() < 2 {
        return Err(Error::Argument(format!(
            "sample pairs needs at least {MIN_PAIR_PIXELS} pixels"
        )));
    }
    let w = img.width();
    let [r, g, b] = channels(img);
    Ok(Estimate::from_channels(
        [
            sample_pairs_channel(&r, w),
            sample_pairs_channel(&g, w),
            sample_pairs_channel(&b, w),
        ],
        Warning::SamplePairsDegenerate,
    ))
}

fn flip_pos(v: i16) -> i16 {
    v ^ 1
}

fn flip_neg(v: i16) -> i16 {
    ((v + 1) ^ 1) - 1
}

fn smoothness(g: &[i16; 4]) -> i32 {
    g.windows(2).map(|p| (p[1] - p[0]).abs() as i32).sum()
}

/// Regular minus singular group fractions under the positive mask, its
/// standard error, and the same difference under the negative mask.
fn rs_counts(values: &[u8], width: usize, invert: bool) -> (f64, f64, f64) {
    let (mut dm, mut dn, mut changed, mut groups) = (0i64, 0i64, 0i64, 0i64);
    for row in values.chunks_exact(width) {
        for chunk in row.chunks_exact(4) {
            let mut g = [0i16; 4];
            for (d, &s) in g.iter_mut().zip(chunk) {
                *d = if invert { (s ^ 1) as i16 } else { s as i16 };
            }
            let f0 = smoothness(&g);
            let mut pos = g;
            let mut neg = g;
            for k in 0..4 {
                if RS_MASK[k] {
                    pos[k] = flip_pos(g[k]);
                    neg[k] = flip_neg(g[k]);
                }
            }
            let sm = (smoothness(&pos) - f0).signum() as i64;
            dm += sm;
            changed += sm.abs();
            dn += (smoothness(&neg) - f0).signum() as i64;
            groups += 1;
        }
    }
    let n = groups.max(1) as f64;
    let d = dm as f64 / n;
    let se = ((changed as f64 / n - d * d).max(0.0) / n).sqrt();
    (d, se, dn as f64 / n)
}

/// Standard errors within which a balanced positive mask counts as a fully
/// randomized LSB plane.
const RS_SATURATION_SE: f64 = 3.0;

fn rs_channel(values: &[u8], width: usize) -> (f64, bool) {
    let (d0, se0, n0) = rs_counts(values, width, false);
    let (d1, se1, n1) = rs_counts(values, width, true);
    if d0.abs() <= RS_SATURATION_SE * se0 && d1.abs() <= RS_SATURATION_SE * se1 {
        return (1.0, false);
    }
    let a = 2.0 * (d1 + d0);
    let b = n0 - n1 - d1 - 3.0 * d0;
    let c = d0 - n0;
    match smallest_root(a, b, c) {
        Some(z) if (z - 0.5).abs() > 1e-12 && z.is_finite() => {
            ((z / (z - 0.5)).clamp(0.0, 1.0), false)
        }
        Some(_) => (1.0, false),
        None => (0.0, true),
    }
}

/// RS analysis with the `[0, 1, 1, 0]` mask on horizontal groups of four.
/// Returns the estimated fraction of bytes carrying message bits.
pub fn rs_analysis(img: &RgbImage) -> Result<Estimate> {
    if img.width() * img.height() < MIN_PAIR_PIXELS || img.width() < 4 {
        return Err(Error::Argument(format!(
            "RS analysis needs at least {MIN_PAIR_PIXELS} pixels and width 4"
        )));
    }
    let w = img.width();
    let [r, g, b] = channels(img);
    Ok(Estimate::from_channels(
        [rs_channel(&r, w), rs_channel(&g, w), rs_channel(&b, w)],
        Warning::RsNoRealRoot,
    ))
}

/// Unweighted mean of the detector outputs, each clamped to `[0, 1]`.
pub fn fuse(chi_square: f64, sample_pairs: f64, rs_analysis: f64) -> f64 {
    [chi_square, sample_pairs, rs_analysis]
        .iter()
        .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
        .sum::<f64>()
        / 3.0
}

/// Runs all three detectors on one image.
pub fn score_image(img: &RgbImage) -> Result<DetectorScore> {
    let chi = chi_square_attack(img)?;
    let spa = sample_pairs(img)?;
    let rs = rs_analysis(img)?;
    let warnings = [&chi, &spa, &rs].iter().filter_map(|e| e.warning).collect();
    Ok(DetectorScore {
        fused: fuse(chi.value, spa.value, rs.value),
        chi_square: chi.value,
        sample_pairs: spa.value,
        rs_analysis: rs.value,
        warnings,
    })
}

/// Threshold sweep from the highest pooled score down. Point `i` classifies
/// every score `>= thresholds[i]` as stego; the curve starts at `(0, 0)` with an
/// infinite threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auroc: f64,
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows under a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for ((t, f), p) in self.thresholds.iter().zip(&self.fpr).zip(&self.tpr) {
            out.push_str(&format!("{t},{f},{p}\n"));
        }
        out
    }
}

fn check_scores(cover: &[f64], stego: &[f64]) -> Result<()> {
    if cover.is_empty() || stego.is_empty() {
        return Err(Error::Argument(
            "ROC needs at least one cover and one stego score".into(),
        ));
    }
    if cover.iter().chain(stego).any(|v| v.is_nan()) {
        return Err(Error::Argument("NaN detector score".into()));
    }
    Ok(())
}

/// ROC curve with trapezoidal area. The area is accumulated in integer pair
/// counts, so tied scores contribute one half exactly as in [`mann_whitney`].
pub fn auroc(cover: &[f64], stego: &[f64]) -> Result<RocCurve> {
    check_scores(cover, stego)?;
    let mut pooled: Vec<(f64, bool)> = cover
        .iter()
        .map(|&s| (s, false))
        .chain(stego.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (stego.len() as u64, cover.len() as u64);
    let mut thresholds = vec![f64::INFINITY];
    let (mut tpr, mut fpr) = (vec![0.0], vec![0.0]);
    let (mut tp, mut fp, mut twice_area) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < pooled.len() && pooled[i].0 == t {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        thresholds.push(t);
        tpr.push(tp as f64 / np as f64);
        fpr.push(fp as f64 / nn as f64);
    }
    Ok(RocCurve {
        thresholds,
        tpr,
        fpr,
        auroc: twice_area as f64 / (2 * np * nn) as f64,
    })
}

/// Probability that a random stego score exceeds a random cover score, ties
/// counting one half, by direct pairwise comparison.
pub fn mann_whitney(cover: &[f64], stego: &[f64]) -> Result<f64> {
    check_scores(cover, stego)?;
    let mut twice_u = 0u64;
    for s in stego {
        for c in cover {
            twice_u += match s.total_cmp(c) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Ok(twice_u as f64 / (2 * cover.len() * stego.len()) as f64)
}

/// Per-image scores for a cover and a stego corpus and the ROC of the fused
/// score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub covers: Vec<DetectorScore>,
    pub stegos: Vec<DetectorScore>,
    pub roc: RocCurve,
}

pub fn detect_corpus(covers: &[RgbImage], stegos: &[RgbImage]) -> Result<DetectorReport> {
    let covers = covers.iter().map(score_image).collect::<Result<Vec<_>>>()?;
    let stegos = stegos.iter().map(score_image).collect::<Result<Vec<_>>>()?;
    let fused = |s: &[DetectorScore]| s.iter().map(|d| d.fused).collect::<Vec<_>>();
    let roc = auroc(&fused(&covers), &fused(&stegos))?;
    Ok(DetectorReport {
        covers,
        stegos,
        roc,
    })
}
