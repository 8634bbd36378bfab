//! Encoder, decoder and critic networks with hand-written backward passes.
//!
//! Tensors are `N x C x H x W`, row-major within each plane, the same
//! planar order as [`ImageTensor`] and [`BitTensor`].

pub mod block;
pub mod conv;
pub mod gradcheck;
pub mod nets;
pub mod store;
pub mod tensor;

pub use block::{conv_block, BlockGrads, ConvBlockParams, Mode};
pub use nets::{Critic, Decoder, Encoder, NetCache, NetGrads, Variant, WIDTH};
pub use store::{load_weights, save_weights, MeasuredQuality, ModelMetadata, WeightStore};
pub use tensor::{adaptive_mean_pool, concat_depth, split_depth, Scalar, Tensor4};

use crate::error::{Error, Result};
use crate::imagery::ImageTensor;
use crate::payload::BitTensor;

/// Stacks images of one size into a batch.
pub fn batch_images(images: &[&ImageTensor]) -> Result<Tensor4> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        first.same_shape(img)?;
        data.extend_from_slice(img.data());
    }
    Tensor4::from_vec(images.len(), 3, h, w, data)
}

/// Stacks bit tensors of one shape into a `{0, 1}` batch.
pub fn batch_bits(bits: &[&BitTensor]) -> Result<Tensor4> {
    let first = bits
        .first()
        .ok_or_else(|| Error::Shape("empty message batch".into()))?;
    let (d, h, w) = first.shape();
    let mut data = Vec::with_capacity(bits.len() * d * h * w);
    for b in bits {
        if b.shape() != (d, h, w) {
            return Err(Error::Shape(format!(
                "message {:?} vs {:?}",
                b.shape(),
                (d, h, w)
            )));
        }
        data.extend(b.as_f32());
    }
    Tensor4::from_vec(bits.len(), d, h, w, data)
}

/// Splits a 3-channel batch back into images.
pub fn unbatch_images(x: &Tensor4) -> Result<Vec<ImageTensor>> {
    if x.c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", x.c)));
    }
    (0..x.n)
        .map(|i| ImageTensor::new(x.w, x.h, x.item(i).to_vec()))
        .collect()
}

/// Hard bit decisions: a logit above zero is a 1, zero itself is a 0.
pub fn logits_to_bits(logits: &Tensor4, i: usize) -> Result<BitTensor> {
    let data = logits.item(i).iter().map(|&v| u8::from(v > 0.0)).collect();
    BitTensor::new(logits.c, logits.h, logits.w, data)
}

/// Runs the encoder. Train mode normalizes with batch statistics but leaves
/// the stored running statistics untouched.
pub fn encode<T: Scalar>(
    cover: &Tensor4<T>,
    msg: &Tensor4<T>,
    w: &WeightStore<T>,
    mode: Mode,
) -> Result<Tensor4<T>> {
    Ok(w.encoder.forward(cover, msg, mode)?.0)
}

/// Decoder logits, `N x D x H x W`.
pub fn decode<T: Scalar>(stego: &Tensor4<T>, w: &WeightStore<T>, mode: Mode) -> Result<Tensor4<T>> {
    Ok(w.decoder.forward(stego, mode)?.0)
}

/// One realness score per image.
pub fn critic_score<T: Scalar>(img: &Tensor4<T>, w: &WeightStore<T>, mode: Mode) -> Result<Vec<T>> {
    Ok(w.critic.forward(img, mode)?.0)
}
