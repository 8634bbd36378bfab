//! Message framing for the neural channel.
//!
//! A message travels as `header ‖ data`, Reed-Solomon encoded block by block
//! ([`reed_solomon`]), XOR-whitened with a fixed LFSR keystream, serialized
//! MSB-first and laid out depth-major into a [`BitTensor`]. Slack capacity is
//! filled with seeded random bits. FORMAT.md at the repository root is the
//! normative description.

pub mod gf256;
pub mod reed_solomon;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use reed_solomon::{rs_decode, rs_encode, ReedSolomon, RsCodeParams, HEADER_LEN};

use crate::error::{Error, Result};

/// Binary tensor of shape `D x H x W`, stored plane by plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BitTensor {
    pub fn new(depth: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "bit tensor dimensions must be positive, got {depth}x{height}x{width}"
            )));
        }
        if data.len() != depth * height * width {
            return Err(Error::Shape(format!(
                "{depth}x{height}x{width} bit tensor needs {} entries, got {}",
                depth * height * width,
                data.len()
            )));
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::Argument("bit tensor entries must be 0 or 1".into()));
        }
        Ok(Self {
            depth,
            height,
            width,
            data,
        })
    }

    pub fn zeros(depth: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(depth, height, width, vec![0; depth * height * width])
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|b| b ^ 1).collect(),
            ..*self
        }
    }

    /// Bit at stream position `i` of the depth-major layout: all `D` bits of
    /// pixel (0, 0), then pixel (0, 1), and so on in row-major order.
    fn stream_index(&self, i: usize) -> usize {
        let plane = self.height * self.width;
        (i % self.depth) * plane + i / self.depth
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| b as f32).collect()
    }
}

/// Fills a buffer with fair bits drawn from a seeded ChaCha8 stream.
fn fill_random_bits(rng: &mut ChaCha8Rng, out: &mut [u8]) {
    for chunk in out.chunks_mut(64) {
        let mut word = rng.next_u64();
        for b in chunk {
            *b = (word & 1) as u8;
            word >>= 1;
        }
    }
}

/// `D x H x W` i.i.d. Bernoulli(0.5) bits.
pub fn random_bits(depth: usize, height: usize, width: usize, seed: u64) -> Result<BitTensor> {
    let mut data = vec![0u8; depth * height * width];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fill_random_bits(&mut rng, &mut data);
    BitTensor::new(depth, height, width, data)
}

const WHITENING_SEED: u16 = 0xACE1;
const WHITENING_TAPS: u16 = 0xB400;

/// XORs `bytes` with the keystream of a 16-bit Galois LFSR
/// (taps 0xB400, state 0xACE1, one output bit per shift, MSB-first bytes).
/// The keystream restarts at every call, so applying it twice is the identity.
pub fn whiten(bytes: &mut [u8]) {
    let mut state = WHITENING_SEED;
    for b in bytes {
        let mut key = 0u8;
        for _ in 0..8 {
            let bit = (state & 1) as u8;
            state >>= 1;
            if bit == 1 {
                state ^= WHITENING_TAPS;
            }
            key = (key << 1) | bit;
        }
        *b ^= key;
    }
}

/// Largest message, in bytes, that [`pack`] accepts for the given shape.
pub fn max_payload_bytes(params: RsCodeParams, depth: usize, height: usize, width: usize) -> usize {
    let blocks = depth * height * width / 8 / params.n;
    (blocks * params.k).saturating_sub(HEADER_LEN)
}

/// Serializes `message` into a `D x H x W` bit tensor. `fill_seed` drives the
/// random bits placed after the coded stream.
pub fn pack(
    message: &[u8],
    params: RsCodeParams,
    depth: usize,
    height: usize,
    width: usize,
    fill_seed: u64,
) -> Result<BitTensor> {
    params.validate()?;
    if depth == 0 || height == 0 || width == 0 {
        return Err(Error::Argument("pack needs positive dimensions".into()));
    }
    let available_blocks = depth * height * width / 8 / params.n;
    if params.blocks_for(message.len()) > available_blocks {
        return Err(Error::Capacity {
            requested: message.len(),
            max_bytes: max_payload_bytes(params, depth, height, width),
        });
    }
    let mut coded = rs_encode(message, params)?;
    whiten(&mut coded);

    let mut tensor = BitTensor::zeros(depth, height, width)?;
    let total = tensor.len();
    let mut stream = vec![0u8; total];
    for (i, byte) in coded.iter().enumerate() {
        for bit in 0..8 {
            stream[i * 8 + bit] = (byte >> (7 - bit)) & 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fill_seed);
    fill_random_bits(&mut rng, &mut stream[coded.len() * 8..]);
    for (i, &b) in stream.iter().enumerate() {
        let idx = tensor.stream_index(i);
        tensor.data[idx] = b;
    }
    Ok(tensor)
}

/// Reads the whole-byte prefix of the depth-major bit stream.
pub fn stream_bytes(bits: &BitTensor) -> Vec<u8> {
    let nbytes = bits.len() / 8;
    (0..nbytes)
        .map(|i| {
            (0..8).fold(0u8, |acc, bit| {
                (acc << 1) | bits.data[bits.stream_index(i * 8 + bit)]
            })
        })
        .collect()
}

/// Fraction of differing bytes in each full `block_len`-byte block of the
/// two bit streams.
pub fn block_symbol_error_rates(
    decoded: &BitTensor,
    truth: &BitTensor,
    block_len: usize,
) -> Result<Vec<f64>> {
    if decoded.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "decoded {:?} vs truth {:?}",
            decoded.shape(),
            truth.shape()
        )));
    }
    if block_len == 0 {
        return Err(Error::Argument("block length must be positive".into()));
    }
    let a = stream_bytes(decoded);
    let b = stream_bytes(truth);
    Ok(a.chunks_exact(block_len)
        .zip(b.chunks_exact(block_len))
        .map(|(x, y)| x.iter().zip(y).filter(|(p, q)| p != q).count() as f64 / block_len as f64)
        .collect())
}

/// Inverse of [`pack`]. Fails with [`Error::DecodeFailure`] when the header
/// block cannot be corrected or claims more blocks than the tensor holds.
pub fn unpack(bits: &BitTensor, params: RsCodeParams) -> Result<Vec<u8>> {
    let code = ReedSolomon::new(params)?;
    let mut bytes = stream_bytes(bits);
    let available_blocks = bytes.len() / params.n;
    if available_blocks == 0 {
        return Err(Error::Shape(format!(
            "{} bits cannot hold a single {}-symbol block",
            bits.len(),
            params.n
        )));
    }
    bytes.truncate(available_blocks * params.n);
    whiten(&mut bytes);

    let mut first = bytes[..params.n].to_vec();
    code.decode_block(&mut first)
        .map_err(|e| Error::DecodeFailure(format!("header block: {e}")))?;
    let len = reed_solomon::parse_header(&first[..params.k], available_blocks * params.k)?;
    let blocks = params.blocks_for(len);
    rs_decode(&bytes[..blocks * params.n], params)
}

/// Reed-Solomon bits per pixel, `(2 * accuracy - 1) * D` floored at zero.
pub fn rs_bpp(accuracy: f64, depth: usize) -> Result<f64> {
    if depth < 1 {
        return Err(Error::Argument("data depth must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::Argument(format!(
            "accuracy {accuracy} outside [0, 1]"
        )));
    }
    Ok(((2.0 * accuracy - 1.0) * depth as f64).max(0.0))
}

/// Safety margin applied to a measured error rate when picking a code.
pub const CODE_MARGIN: f64 = 0.5;

/// Smallest parity budget ever chosen, so every block can flag some damage.
pub const MIN_CORRECTABLE: usize = 1;

/// Picks a length-255 code whose correction capacity covers an error rate of
/// `p_est * (1 + margin)` symbols per block.
pub fn choose_code(p_est: f64, margin: f64) -> Result<RsCodeParams> {
    if !(0.0..0.5).contains(&p_est) || p_est.is_nan() {
        return Err(Error::Argument(format!(
            "error rate {p_est} outside [0, 0.5)"
        )));
    }
    if margin < 0.0 || !margin.is_finite() {
        return Err(Error::Argument(format!("margin {margin} must be >= 0")));
    }
    let n = 255usize;
    let needed = (n as f64 * p_est * (1.0 + margin)).ceil() as usize;
    let t = needed.max(MIN_CORRECTABLE);
    if 2 * t >= n {
        return Err(Error::Argument(format!(
            "correcting {t} of {n} symbols per block is beyond any RS code; \
             use a lower data depth"
        )));
    }
    RsCodeParams::new(n, n - 2 * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn block_symbol_errors_count_bytes_not_bits() {
        let truth = random_bits(8, 32, 32, 3).unwrap();
        let mut data = truth.data().to_vec();
        // Stream bits 0 and 1 share byte 0; stream bit 8 * 130 is in block 0,
        // stream bit 8 * 300 in block 1.
        for i in [0, 1, 8 * 130, 8 * 300] {
            data[truth.stream_index(i)] ^= 1;
        }
        let decoded = BitTensor::new(8, 32, 32, data).unwrap();
        let rates = block_symbol_error_rates(&decoded, &truth, 255).unwrap();
        assert_eq!(rates, vec![2.0 / 255.0, 1.0 / 255.0, 0.0, 0.0]);
        assert_eq!(
            block_symbol_error_rates(&truth, &truth, 255).unwrap(),
            vec![0.0; 4]
        );
        let rates = block_symbol_error_rates(&decoded, &truth, 100).unwrap();
        assert_eq!(rates[3], 0.01);
    }

    #[test]
    fn random_bits_deterministic_and_fair() {
        let a = random_bits(4, 500, 500, 9).unwrap();
        assert_eq!(a, random_bits(4, 500, 500, 9).unwrap());
        assert_eq!(a.shape(), (4, 500, 500));
        let ones: usize = a.data().iter().map(|&b| b as usize).sum();
        let mean = ones as f64 / a.len() as f64;
        assert!((0.497..=0.503).contains(&mean), "mean {mean}");
        assert_ne!(a, random_bits(4, 500, 500, 10).unwrap());
    }

    #[test]
    fn whitening_is_an_involution() {
        let mut buf: Vec<u8> = (0..600).map(|i| i as u8).collect();
        let orig = buf.clone();
        whiten(&mut buf);
        assert_ne!(buf, orig);
        whiten(&mut buf);
        assert_eq!(buf, orig);
        let mut zeros = [0u8; 4];
        whiten(&mut zeros);
        // first keystream bytes, documented in FORMAT.md
        assert_eq!(zeros, [0x87, 0x23, 0x46, 0xDC]);
    }

    #[test]
    fn worked_example_from_format_doc() {
        let mut coded = rs_encode(b"hi", RsCodeParams::new(10, 6).unwrap()).unwrap();
        assert_eq!(
            coded,
            [0x00, 0x00, 0x00, 0x02, 0x68, 0x69, 0xEB, 0x5E, 0x69, 0x63]
        );
        whiten(&mut coded);
        assert_eq!(
            coded,
            [0x87, 0x23, 0x46, 0xDE, 0xD8, 0xB4, 0x05, 0xA6, 0x94, 0xA0]
        );
    }

    #[test]
    fn depth_major_layout() {
        let params = RsCodeParams::new(8, 6).unwrap();
        let t = pack(&[0xFF, 0x00], params, 2, 8, 8, 0).unwrap();
        let mut coded = rs_encode(&[0xFF, 0x00], params).unwrap();
        whiten(&mut coded);
        // first byte of the stream, MSB first: pixel 0 holds bits 0 and 1 at depths 0 and 1
        let bit = |d: usize, p: usize| t.data()[d * 64 + p];
        for i in 0..8 {
            assert_eq!(bit(i % 2, i / 2), (coded[0] >> (7 - i)) & 1);
        }
    }

    #[test]
    fn oversize_message_reports_capacity() {
        let params = RsCodeParams::new(255, 223).unwrap();
        let cap = max_payload_bytes(params, 1, 128, 128);
        // 16384 bits = 2048 bytes = 8 whole blocks
        assert_eq!(cap, 8 * 223 - 4);
        assert!(pack(&vec![1; cap], params, 1, 128, 128, 0).is_ok());
        match pack(&vec![1; cap + 1], params, 1, 128, 128, 0) {
            Err(Error::Capacity {
                max_bytes,
                requested,
            }) => {
                assert_eq!(max_bytes, cap);
                assert_eq!(requested, cap + 1);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn capacity_count_matches_brute_force() {
        for &(n, k) in &[(255, 223), (255, 253), (64, 32), (15, 11)] {
            let params = RsCodeParams::new(n, k).unwrap();
            for &(d, h, w) in &[(1, 16, 16), (3, 32, 17), (6, 40, 40)] {
                let cap = max_payload_bytes(params, d, h, w);
                let brute = (0..=d * h * w / 8)
                    .rev()
                    .find(|&len| pack(&vec![0; len], params, d, h, w, 1).is_ok());
                if let Some(brute) = brute {
                    assert_eq!(cap, brute, "({n},{k}) {d}x{h}x{w}");
                }
            }
        }
    }

    #[test]
    fn all_zero_tensor_fails_to_unpack() {
        let params = RsCodeParams::default();
        let zeros = BitTensor::zeros(1, 64, 64).unwrap();
        assert!(matches!(
            unpack(&zeros, params),
            Err(Error::DecodeFailure(_))
        ));
        let ones = zeros.complement();
        assert!(matches!(
            unpack(&ones, params),
            Err(Error::DecodeFailure(_))
        ));
    }

    fn flip_trials(p: f64, trials: u64, seed: u64) -> (usize, usize) {
        let params = RsCodeParams::new(255, 223).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut ok, mut flagged) = (0, 0);
        for trial in 0..trials {
            let cap = max_payload_bytes(params, 3, 64, 64);
            let msg: Vec<u8> = (0..rng.gen_range(0..=cap)).map(|_| rng.gen()).collect();
            let packed = pack(&msg, params, 3, 64, 64, trial).unwrap();
            let mut data = packed.data().to_vec();
            for b in data.iter_mut() {
                if rng.gen_bool(p) {
                    *b ^= 1;
                }
            }
            let noisy = BitTensor::new(3, 64, 64, data).unwrap();
            match unpack(&noisy, params) {
                Ok(m) if m == msg => ok += 1,
                Err(Error::DecodeFailure(_)) => flagged += 1,
                _ => {}
            }
        }
        (ok, flagged)
    }

    #[test]
    fn survives_sparse_bit_flips() {
        // 0.25% bit errors -> ~2% byte errors, ~5 per block against t = 16
        let (ok, _) = flip_trials(0.0025, 100, 3);
        assert!(ok >= 99, "{ok}/100 recovered");
    }

    #[test]
    fn one_percent_bit_flips_overwhelm_byte_symbols_but_are_flagged() {
        // 1% bit errors corrupt 1 - 0.99^8 = 7.7% of bytes, ~19.7 per block > t = 16
        let (ok, flagged) = flip_trials(0.01, 100, 4);
        assert!(ok < 50, "{ok}/100 unexpectedly recovered");
        assert!(
            ok + flagged >= 99,
            "{} silent miscorrections",
            100 - ok - flagged
        );
    }

    #[test]
    fn rs_bpp_values() {
        assert!((rs_bpp(0.87, 6).unwrap() - 4.44).abs() < 1e-12);
        assert!((rs_bpp(0.67, 6).unwrap() - 2.04).abs() < 1e-12);
        assert_eq!(rs_bpp(0.5, 3).unwrap(), 0.0);
        assert_eq!(rs_bpp(1.0, 4).unwrap(), 4.0);
        assert_eq!(rs_bpp(0.2, 4).unwrap(), 0.0);
        assert!(rs_bpp(0.9, 0).is_err());
        assert!(rs_bpp(1.1, 1).is_err());
    }

    #[test]
    fn choose_code_examples() {
        assert_eq!(
            choose_code(0.0, 0.5).unwrap(),
            RsCodeParams { n: 255, k: 253 }
        );
        let p = choose_code(0.05, 0.5).unwrap();
        // ceil(255 * 0.075) = 20
        assert_eq!(p.correctable(), 20);
        assert_eq!(p.k, 215);
        assert!(matches!(choose_code(0.45, 1.0), Err(Error::Argument(_))));
        assert!(choose_code(0.5, 0.0).is_err());
        assert!(choose_code(-0.1, 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn noiseless_pack_unpack(len_frac in 0.0f64..=1.0, seed in any::<u64>(), k in 100usize..=253) {
            let params = RsCodeParams::new(255, k).unwrap();
            let cap = max_payload_bytes(params, 2, 48, 48);
            let len = (cap as f64 * len_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let msg: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let packed = pack(&msg, params, 2, 48, 48, seed).unwrap();
            prop_assert_eq!(unpack(&packed, params).unwrap(), msg);
        }

        #[test]
        fn rs_bpp_monotone_and_linear(a in 0.5f64..=1.0, b in 0.5f64..=1.0, d in 1usize..=8) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(rs_bpp(lo, d).unwrap() <= rs_bpp(hi, d).unwrap());
            let one = rs_bpp(a, 1).unwrap();
            prop_assert!((rs_bpp(a, d).unwrap() - one * d as f64).abs() < 1e-12);
        }
    }
}
