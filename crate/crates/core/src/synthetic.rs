//! Procedural cover images.
//!
//! A scene is multi-octave value noise for luminance and colour, a handful of
//! soft-edged discs and bars, and Gaussian sensor noise. The result is then
//! captured at a lower tonal precision and contrast-stretched to the full
//! byte range, which leaves the comb-shaped histograms typical of edited
//! photographs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imagery::{save_image, RgbImage, MIN_SIDE};

const OCTAVES: usize = 5;
const SEED_STRIDE: u64 = 0x5851_F42D_4C95_7F2D;

/// Smooth noise in roughly `[-1, 1]`: bilinear interpolation of random grids
/// whose amplitude halves with every octave.
fn value_noise(w: usize, h: usize, base_cells: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; w * h];
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    for o in 0..OCTAVES {
        let cells = base_cells << o;
        let gw = cells + 2;
        let grid: Vec<f32> = (0..gw * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (sx, sy) = (cells as f32 / w as f32, cells as f32 / h as f32);
        for y in 0..h {
            let fy = y as f32 * sy;
            let (iy, ty) = (fy as usize, fy.fract());
            let ty = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..w {
                let fx = x as f32 * sx;
                let (ix, tx) = (fx as usize, fx.fract());
                let tx = tx * tx * (3.0 - 2.0 * tx);
                let g = |i: usize, j: usize| grid[j * gw + i];
                let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
                let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
                out[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        total += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

enum Shape {
    Disc {
        cx: f32,
        cy: f32,
        r: f32,
    },
    Bar {
        cx: f32,
        cy: f32,
        nx: f32,
        ny: f32,
        half: f32,
    },
}

impl Shape {
    /// Signed distance in pixels, negative inside.
    fn distance(&self, x: f32, y: f32) -> f32 {
        match *self {
            Shape::Disc { cx, cy, r } => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r,
            Shape::Bar {
                cx,
                cy,
                nx,
                ny,
                half,
            } => ((x - cx) * nx + (y - cy) * ny).abs() - half,
        }
    }
}

/// One cover image of the given size, fully determined by `seed`.
pub fn synth_cover(width: usize, height: usize, seed: u64) -> Result<RgbImage> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::Argument(format!(
            "synthetic covers must be at least {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = width * height;
    let cells = rng.gen_range(2..=4);
    let lum = value_noise(width, height, cells, &mut rng);
    let chroma = [
        value_noise(width, height, 2, &mut rng),
        value_noise(width, height, 2, &mut rng),
    ];
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let chroma_gain = rng.gen_range(0.05..0.25);
    let contrast = rng.gen_range(0.3..0.6);
    let mut rgb = vec![0.0f32; 3 * n];
    for i in 0..n {
        let tint = [
            chroma[0][i],
            -0.5 * (chroma[0][i] + chroma[1][i]),
            chroma[1][i],
        ];
        for c in 0..3 {
            rgb[3 * i + c] = base[c] + contrast * lum[i] + chroma_gain * tint[c];
        }
    }

    let side = width.min(height) as f32;
    for _ in 0..rng.gen_range(2..7) {
        let (cx, cy) = (
            rng.gen_range(0.0..width as f32),
            rng.gen_range(0.0..height as f32),
        );
        let shape = if rng.gen_bool(0.6) {
            Shape::Disc {
                cx,
                cy,
                r: rng.gen_range(0.05..0.3) * side,
            }
        } else {
            let a: f32 = rng.gen_range(0.0..std::f32::consts::PI);
            Shape::Bar {
                cx,
                cy,
                nx: a.cos(),
                ny: a.sin(),
                half: rng.gen_range(0.02..0.1) * side,
            }
        };
        let colour: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        let alpha = rng.gen_range(0.4..0.9);
        let soft = rng.gen_range(0.7..3.0);
        for y in 0..height {
            for x in 0..width {
                let d = shape.distance(x as f32 + 0.5, y as f32 + 0.5);
                let cover = alpha * (0.5 - d / soft).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let i = 3 * (y * width + x);
                    for c in 0..3 {
                        rgb[i + c] += cover * (colour[c] - rgb[i + c]);
                    }
                }
            }
        }
    }

    let levels = rng.gen_range(120..=200) as f32;
    let sigma = rng.gen_range(0.5..2.0) / levels;
    let noise = Normal::new(0.0f32, sigma).expect("finite sigma");
    let (lo, hi) = rgb
        .iter()
        .fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-3);
    let pixels = rgb
        .iter()
        .map(|&v| {
            let captured = ((v - lo) / span + noise.sample(&mut rng)).clamp(0.0, 1.0);
            let q = (captured * (levels - 1.0)).round();
            (q * 255.0 / (levels - 1.0)).round() as u8
        })
        .collect();
    RgbImage::new(width, height, pixels)
}

/// `n` covers with independent seeds derived from `seed`.
pub fn synth_corpus(n: usize, width: usize, height: usize, seed: u64) -> Result<Vec<RgbImage>> {
    (0..n as u64)
        .map(|i| synth_cover(width, height, seed ^ (i + 1).wrapping_mul(SEED_STRIDE)))
        .collect()
}

/// Writes `<root>/train/*.png` and `<root>/test/*.png` with disjoint seeds.
pub fn write_dataset(
    root: impl AsRef<Path>,
    n_train: usize,
    n_test: usize,
    size: usize,
    seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    let all = synth_corpus(n_train + n_test, size, size, seed)?;
    for (dir, imgs) in [("train", &all[..n_train]), ("test", &all[n_train..])] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, img) in imgs.iter().enumerate() {
            save_image(img, d.join(format!("{i:05}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::DatasetSplit;

    #[test]
    fn covers_are_deterministic_and_distinct() {
        let a = synth_cover(40, 24, 9).unwrap();
        assert_eq!(a, synth_cover(40, 24, 9).unwrap());
        assert_ne!(a, synth_cover(40, 24, 10).unwrap());
        assert_eq!((a.width(), a.height()), (40, 24));
        let corpus = synth_corpus(3, 16, 16, 1).unwrap();
        assert_ne!(corpus[0], corpus[1]);
        assert!(synth_cover(4, 16, 0).is_err());
    }

    #[test]
    fn covers_use_most_of_the_byte_range() {
        let img = synth_cover(64, 64, 3).unwrap();
        let (lo, hi) = img
            .pixels()
            .iter()
            .fold((255u8, 0u8), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(lo < 40 && hi > 215, "{lo}..{hi}");
    }

    #[test]
    fn dataset_layout_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 3, 2, 16, 4).unwrap();
        let split = DatasetSplit::from_root(dir.path(), 16).unwrap();
        assert_eq!(split.train_paths.len(), 3);
        assert_eq!(split.test_paths.len(), 2);
        let train = split.load_train().unwrap();
        assert!(!split.load_test().unwrap().contains(&train[0]));
    }
}
