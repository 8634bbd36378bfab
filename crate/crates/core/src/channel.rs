//! End-to-end message channel: bytes in, stego image out, and back.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imagery::{from_tensor, load_image, save_image, to_tensor, RgbImage, MIN_SIDE};
use crate::networks::{
    batch_bits, batch_images, logits_to_bits, unbatch_images, Mode, WeightStore,
};
use crate::payload::{max_payload_bytes, pack, unpack, RsCodeParams};

fn check_size(img: &RgbImage) -> Result<()> {
    if img.width() < MIN_SIDE || img.height() < MIN_SIDE {
        return Err(Error::Argument(format!(
            "images must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Explicit code if given, otherwise the one stored with the model.
pub fn code_for(weights: &WeightStore, code: Option<RsCodeParams>) -> Result<RsCodeParams> {
    let code = code.unwrap_or(weights.rs_code);
    code.validate()?;
    Ok(code)
}

/// Largest message in bytes that fits a `width x height` cover.
pub fn capacity(weights: &WeightStore, width: usize, height: usize, code: RsCodeParams) -> usize {
    max_payload_bytes(code, weights.data_depth(), height, width)
}

/// Hides `message` in `cover`. The returned image is already quantized to
/// bytes, exactly what a PNG file will hold.
pub fn embed(
    weights: &WeightStore,
    cover: &RgbImage,
    message: &[u8],
    code: RsCodeParams,
    fill_seed: u64,
) -> Result<RgbImage> {
    check_size(cover)?;
    let (h, w) = (cover.height(), cover.width());
    let bits = pack(message, code, weights.data_depth(), h, w, fill_seed)?;
    let stego = weights.encoder.forward(
        &batch_images(&[&to_tensor(cover)])?,
        &batch_bits(&[&bits])?,
        Mode::Eval,
    )?;
    from_tensor(&unbatch_images(&stego.0)?.remove(0))
}

/// Recovers the message hidden by [`embed`].
pub fn extract(weights: &WeightStore, stego: &RgbImage, code: RsCodeParams) -> Result<Vec<u8>> {
    check_size(stego)?;
    let logits = weights
        .decoder
        .forward(&batch_images(&[&to_tensor(stego)])?, Mode::Eval)?
        .0;
    unpack(&logits_to_bits(&logits, 0)?, code)
}

/// [`embed`] between PNG files.
pub fn embed_file(
    weights: &WeightStore,
    cover: impl AsRef<Path>,
    message: &[u8],
    out: impl AsRef<Path>,
    code: RsCodeParams,
    fill_seed: u64,
) -> Result<RgbImage> {
    let stego = embed(weights, &load_image(cover)?, message, code, fill_seed)?;
    save_image(&stego, out)?;
    Ok(stego)
}

/// [`extract`] from a PNG file.
pub fn extract_file(
    weights: &WeightStore,
    stego: impl AsRef<Path>,
    code: RsCodeParams,
) -> Result<Vec<u8>> {
    extract(weights, &load_image(stego)?, code)
}
