//! `WeightStore` and its versioned binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "SFGMODEL"
//! version      u32       FORMAT_VERSION
//! meta_len     u32
//! metadata     meta_len bytes of UTF-8 JSON (ModelMetadata)
//! array_count  u32
//! array*       u16 name_len, name, u8 ndim, ndim x u32 dims, f32 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{ConvBlockParams, BN_EPSILON, BN_MOMENTUM, KERNEL_AREA, LEAKY_SLOPE};
use super::nets::{Critic, Decoder, Encoder, Variant};
use super::tensor::Scalar;
use crate::error::{Error, Result};
use crate::imagery::{NORM_OFFSET, NORM_SCALE};
use crate::payload::RsCodeParams;

pub const MAGIC: &[u8; 8] = b"SFGMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

/// Held-out quality recorded when the model was saved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredQuality {
    /// Bit accuracy after PNG quantization.
    pub accuracy: f64,
    /// Bit accuracy on the unquantized stego tensor.
    pub accuracy_pre_quant: f64,
    /// Worst fraction of corrupted bytes in any 255-byte block.
    pub symbol_error_rate: f64,
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub variant: Variant,
    pub data_depth: usize,
    pub leaky_slope: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub normalization: Normalization,
    pub rs_code: RsCodeParams,
    #[serde(default)]
    pub measured: Option<MeasuredQuality>,
}

/// Parameters of one encoder variant, the decoder and the critic.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T = f32> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub critic: Critic<T>,
    pub format_version: u32,
    /// Default code used by encode/decode when no override is given.
    pub rs_code: RsCodeParams,
    pub measured: Option<MeasuredQuality>,
}

impl<T: Scalar> WeightStore<T> {
    /// Freshly initialized networks drawn from `seed`.
    pub fn new(variant: Variant, data_depth: usize, seed: u64) -> Result<Self> {
        if data_depth == 0 {
            return Err(Error::Argument("data depth must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: Encoder::new(variant, data_depth, &mut rng),
            decoder: Decoder::new(data_depth, &mut rng),
            critic: Critic::new(&mut rng),
            format_version: FORMAT_VERSION,
            rs_code: RsCodeParams::default(),
            measured: None,
        })
    }

    pub fn variant(&self) -> Variant {
        self.encoder.variant
    }

    pub fn data_depth(&self) -> usize {
        self.encoder.data_depth
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.critic.validate()?;
        if self.decoder.data_depth != self.encoder.data_depth {
            return Err(Error::Shape(format!(
                "encoder depth {} vs decoder depth {}",
                self.encoder.data_depth, self.decoder.data_depth
            )));
        }
        self.rs_code.validate()
    }

    pub fn metadata(&self) -> ModelMetadata {
        ModelMetadata {
            variant: self.variant(),
            data_depth: self.data_depth(),
            leaky_slope: LEAKY_SLOPE,
            bn_epsilon: BN_EPSILON,
            bn_momentum: BN_MOMENTUM,
            normalization: Normalization {
                scale: NORM_SCALE as f64,
                offset: NORM_OFFSET as f64,
            },
            rs_code: self.rs_code,
            measured: self.measured,
        }
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            critic: self.critic.cast(),
            format_version: self.format_version,
            rs_code: self.rs_code,
            measured: self.measured,
        }
    }

    /// `(name, block)` pairs in container order.
    fn named_blocks(&self) -> Vec<(String, &ConvBlockParams<T>)> {
        let mut out = Vec::new();
        for (net, blocks) in [
            ("encoder", &self.encoder.blocks),
            ("decoder", &self.decoder.blocks),
            ("critic", &self.critic.blocks),
        ] {
            for (i, b) in blocks.iter().enumerate() {
                out.push((format!("{net}.{i}"), b));
            }
        }
        out
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlockParams<T>> {
        self.encoder
            .blocks
            .iter_mut()
            .chain(self.decoder.blocks.iter_mut())
            .chain(self.critic.blocks.iter_mut())
    }
}

struct Array {
    name: String,
    dims: Vec<u32>,
    values: Vec<f32>,
}

fn block_arrays(prefix: &str, b: &ConvBlockParams<f32>) -> Vec<Array> {
    let mut out = vec![
        Array {
            name: format!("{prefix}.kernel"),
            dims: vec![b.out_channels as u32, b.in_channels as u32, 3, 3],
            values: b.kernel.clone(),
        },
        Array {
            name: format!("{prefix}.bias"),
            dims: vec![b.out_channels as u32],
            values: b.bias.clone(),
        },
    ];
    if !b.terminal {
        for (suffix, v) in [
            ("bn_gamma", &b.bn_gamma),
            ("bn_beta", &b.bn_beta),
            ("bn_running_mean", &b.bn_running_mean),
            ("bn_running_var", &b.bn_running_var),
        ] {
            out.push(Array {
                name: format!("{prefix}.{suffix}"),
                dims: vec![b.out_channels as u32],
                values: v.clone(),
            });
        }
    }
    out
}

impl WeightStore<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = serde_json::to_vec(&self.metadata())
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let arrays: Vec<Array> = self
            .named_blocks()
            .iter()
            .flat_map(|(name, b)| block_arrays(name, b))
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in &arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.dims.len() as u8);
            for d in &a.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a model container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "container version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: ModelMetadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let expect = |what: &str, got: f64, want: f64| {
            if (got - want).abs() > 1e-12 {
                Err(Error::Format(format!(
                    "{what} {got} unsupported (expected {want})"
                )))
            } else {
                Ok(())
            }
        };
        expect("leaky slope", meta.leaky_slope, LEAKY_SLOPE)?;
        expect("batch-norm epsilon", meta.bn_epsilon, BN_EPSILON)?;
        expect(
            "normalization scale",
            meta.normalization.scale,
            NORM_SCALE as f64,
        )?;
        expect(
            "normalization offset",
            meta.normalization.offset,
            NORM_OFFSET as f64,
        )?;
        if meta.data_depth == 0 {
            return Err(Error::Format("data depth 0".into()));
        }

        let mut store = WeightStore::<f32>::new(meta.variant, meta.data_depth, 0)?;
        store.rs_code = meta.rs_code;
        store.measured = meta.measured;
        store.format_version = version;

        let count = r.u32()? as usize;
        let mut arrays = std::collections::HashMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len = dims.iter().map(|&d| d as usize).product::<usize>();
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::Format("array too large".into()))?,
            )?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if arrays.insert(name.clone(), (dims, values)).is_some() {
                return Err(Error::Format(format!("duplicate array {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last array",
                bytes.len() - r.pos
            )));
        }

        let names: Vec<String> = store.named_blocks().into_iter().map(|(n, _)| n).collect();
        for (prefix, block) in names.iter().zip(store.blocks_mut()) {
            let wanted = block_arrays(prefix, block);
            for want in wanted {
                let (dims, values) = arrays
                    .remove(&want.name)
                    .ok_or_else(|| Error::Format(format!("missing array {}", want.name)))?;
                if dims != want.dims {
                    return Err(Error::Format(format!(
                        "{} has shape {dims:?}, expected {:?}",
                        want.name, want.dims
                    )));
                }
                let suffix = want.name.rsplit('.').next().unwrap();
                let slot = match suffix {
                    "kernel" => &mut block.kernel,
                    "bias" => &mut block.bias,
                    "bn_gamma" => &mut block.bn_gamma,
                    "bn_beta" => &mut block.bn_beta,
                    "bn_running_mean" => &mut block.bn_running_mean,
                    _ => &mut block.bn_running_var,
                };
                *slot = values;
            }
            debug_assert_eq!(
                block.kernel.len(),
                block.in_channels * block.out_channels * KERNEL_AREA
            );
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Format(format!("unexpected array {extra}")));
        }
        store.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "container truncated at byte {} (wanted {n} more)",
                self.pos
            ))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_weights(w: &WeightStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = w.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    WeightStore::from_bytes(&bytes)
}
