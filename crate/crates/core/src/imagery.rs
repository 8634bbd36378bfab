//! Image storage, the byte <-> `[-1, 1]` tensor mapping, augmentation and the
//! on-disk dataset layout.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ExtendedColorType, ImageError, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Bytes-per-level scale of the normalization map `v = byte / 127.5 - 1`.
pub const NORM_SCALE: f32 = 127.5;
/// Offset of the normalization map.
pub const NORM_OFFSET: f32 = -1.0;
/// Dynamic range of normalized data, used as the PSNR scale factor.
pub const TENSOR_RANGE: f64 = 2.0;
/// Smallest side length the networks are applied to.
pub const MIN_SIDE: usize = 8;

/// 8-bit RGB raster, row-major, interleaved `RGBRGB...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel `c` as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.pixels.iter().skip(c).step_by(3).copied().collect()
    }

    /// Copy of the `size`x`size` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::Argument(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Self::new(w, h, pixels)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                pixels.extend_from_slice(&self.get(x, y));
            }
        }
        Self {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

/// Planar float image (`3 x H x W`) in the normalized range `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "3x{height}x{width} tensor needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "3x{}x{} vs 3x{}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

fn map_image_error(path: &Path, err: ImageError) -> Error {
    match err {
        ImageError::IoError(e) => Error::io(path, e),
        // A short read shows up as a decoding error; treat it as the I/O
        // failure it is.
        ImageError::Decoding(d)
            if d.to_string().to_ascii_lowercase().contains("eof")
                || d.to_string().to_ascii_lowercase().contains("end of")
                || d.to_string().to_ascii_lowercase().contains("truncat") =>
        {
            Error::io(
                path,
                std::io::Error::new(ErrorKind::UnexpectedEof, d.to_string()),
            )
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a PNG as 8-bit RGB. Alpha is dropped, palettes are expanded; grey and
/// 16-bit rasters are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| map_image_error(path, e))?;
    if format != ImageFormat::Png {
        return Err(Error::Format(format!(
            "{}: only lossless PNG is supported, found {format:?}",
            path.display()
        )));
    }
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| map_image_error(path, e))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(img) => img,
        DynamicImage::ImageRgba8(img) => DynamicImage::ImageRgba8(img).to_rgb8(),
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8-bit RGB(A), found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    RgbImage::new(w as usize, h as usize, rgb.into_raw())
}

/// Writes `img` as an 8-bit RGB PNG, replacing any existing file.
pub fn save_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer_with_format(
        path,
        &img.pixels,
        img.width as u32,
        img.height as u32,
        ExtendedColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| map_image_error(path, e))
}

/// `byte / 127.5 - 1`, re-laid out as channel planes.
pub fn to_tensor(img: &RgbImage) -> ImageTensor {
    let n = img.width * img.height;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / NORM_SCALE + NORM_OFFSET;
        }
    }
    ImageTensor {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Quantizes back to bytes: clamp to `[-1, 1]`, then `round((v + 1) * 127.5)`.
pub fn from_tensor(t: &ImageTensor) -> Result<RgbImage> {
    let n = t.width * t.height;
    let mut pixels = vec![0u8; 3 * n];
    for c in 0..3 {
        for (i, &v) in t.plane(c).iter().enumerate() {
            if v.is_nan() {
                return Err(Error::Numeric(format!("NaN at channel {c}, pixel {i}")));
            }
            let v = v.clamp(-1.0, 1.0);
            pixels[i * 3 + c] = ((v - NORM_OFFSET) * NORM_SCALE).round() as u8;
        }
    }
    RgbImage::new(t.width, t.height, pixels)
}

/// Random `crop`x`crop` window followed by a horizontal flip with
/// probability 0.5, all drawn from `seed`.
pub fn augment(img: &RgbImage, crop: usize, seed: u64) -> Result<RgbImage> {
    if crop == 0 || crop > img.width.min(img.height) {
        return Err(Error::Argument(format!(
            "crop {crop} does not fit a {}x{} image",
            img.width, img.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.gen_range(0..=img.width - crop);
    let y0 = rng.gen_range(0..=img.height - crop);
    let flip = rng.gen_bool(0.5);
    let out = img.crop(x0, y0, crop, crop)?;
    Ok(if flip { out.flip_horizontal() } else { out })
}

/// Train/test file lists following the `<root>/train/*.png`,
/// `<root>/test/*.png` layout.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    pub crop_size: usize,
}

/// PNG files directly inside `dir`, sorted by path.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetSplit {
    pub fn from_root(root: impl AsRef<Path>, crop_size: usize) -> Result<Self> {
        let root = root.as_ref();
        let train_paths = list_pngs(&root.join("train"))?;
        let test_paths = list_pngs(&root.join("test"))?;
        let split = Self {
            train_paths,
            test_paths,
            crop_size,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_paths.is_empty() || self.test_paths.is_empty() {
            return Err(Error::Argument(format!(
                "dataset needs train and test images, found {} and {}",
                self.train_paths.len(),
                self.test_paths.len()
            )));
        }
        let canon = |p: &PathBuf| p.canonicalize().unwrap_or_else(|_| p.clone());
        let train: std::collections::HashSet<_> = self.train_paths.iter().map(canon).collect();
        if let Some(dup) = self.test_paths.iter().find(|p| train.contains(&canon(p))) {
            return Err(Error::Argument(format!(
                "{} is in both train and test",
                dup.display()
            )));
        }
        Ok(())
    }

    pub fn load_train(&self) -> Result<Vec<RgbImage>> {
        self.train_paths.iter().map(load_image).collect()
    }

    pub fn load_test(&self) -> Result<Vec<RgbImage>> {
        self.test_paths.iter().map(load_image).collect()
    }
}
