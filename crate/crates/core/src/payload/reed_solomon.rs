//! Systematic Reed-Solomon block code over GF(256).
//!
//! Generator roots are `alpha^1 .. alpha^(n-k)`; codewords are data symbols
//! followed by parity, highest-degree coefficient first. Shortened codes
//! (`n < 255`) are supported.

use serde::{Deserialize, Serialize};

use super::gf256::{self, alpha_pow, eval_asc, eval_desc};
use crate::error::{Error, Result};

/// Bytes of big-endian payload length carried in front of every message.
pub const HEADER_LEN: usize = 4;

/// `(n, k)` parameters of a Reed-Solomon code over GF(256).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RsCodeParams {
    pub n: usize,
    pub k: usize,
}

impl RsCodeParams {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        let p = Self { n, k };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n > 255 || self.k == 0 || self.k > self.n {
            return Err(Error::Argument(format!(
                "invalid RS code ({}, {}): need 1 <= k <= n <= 255",
                self.n, self.k
            )));
        }
        Ok(())
    }

    pub fn parity(&self) -> usize {
        self.n - self.k
    }

    /// Symbol errors correctable per block.
    pub fn correctable(&self) -> usize {
        self.parity() / 2
    }

    /// Number of blocks needed for a message of `len` bytes (header included).
    pub fn blocks_for(&self, len: usize) -> usize {
        (len + HEADER_LEN).div_ceil(self.k)
    }
}

impl Default for RsCodeParams {
    fn default() -> Self {
        Self { n: 255, k: 223 }
    }
}

fn generator_poly(nsym: usize) -> Vec<u8> {
    // highest degree first
    let mut g = vec![1u8];
    for i in 1..=nsym {
        let root = alpha_pow(i as i64);
        let mut next = vec![0u8; g.len() + 1];
        for (j, &c) in g.iter().enumerate() {
            next[j] ^= c;
            next[j + 1] ^= gf256::mul(c, root);
        }
        g = next;
    }
    g
}

/// Block encoder/decoder for one `(n, k)` code.
#[derive(Clone, Debug)]
pub struct ReedSolomon {
    params: RsCodeParams,
    generator: Vec<u8>,
}

impl ReedSolomon {
    pub fn new(params: RsCodeParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            generator: generator_poly(params.parity()),
        })
    }

    pub fn params(&self) -> RsCodeParams {
        self.params
    }

    /// Appends `n - k` parity symbols to exactly `k` data symbols.
    pub fn encode_block(&self, data: &[u8]) -> Vec<u8> {
        assert_eq!(data.len(), self.params.k, "block must hold k symbols");
        let nsym = self.params.parity();
        let mut out = Vec::with_capacity(self.params.n);
        out.extend_from_slice(data);
        if nsym == 0 {
            return out;
        }
        // long division of data * x^nsym by the monic generator
        let mut rem = vec![0u8; nsym];
        for &d in data {
            let factor = d ^ rem[0];
            rem.rotate_left(1);
            rem[nsym - 1] = 0;
            if factor != 0 {
                for (r, &g) in rem.iter_mut().zip(&self.generator[1..]) {
                    *r ^= gf256::mul(g, factor);
                }
            }
        }
        out.extend_from_slice(&rem);
        out
    }

    fn syndromes(&self, block: &[u8]) -> Vec<u8> {
        (1..=self.params.parity())
            .map(|i| eval_desc(block, alpha_pow(i as i64)))
            .collect()
    }

    /// Corrects up to `(n - k) / 2` symbol errors in place and returns the
    /// number fixed. Beyond that the decoder reports failure when the error
    /// pattern is detectable; patterns that land within distance `t` of
    /// another codeword are miscorrected.
    pub fn decode_block(&self, block: &mut [u8]) -> Result<usize> {
        let n = self.params.n;
        if block.len() != n {
            return Err(Error::Argument(format!(
                "block has {} symbols, expected {n}",
                block.len()
            )));
        }
        let nsym = self.params.parity();
        let synd = self.syndromes(block);
        if synd.iter().all(|&s| s == 0) {
            return Ok(0);
        }

        // Berlekamp-Massey, polynomials lowest degree first
        let mut lambda = vec![1u8];
        let mut prev = vec![1u8];
        let mut l = 0usize;
        let mut shift = 1usize;
        let mut prev_disc = 1u8;
        for r in 0..nsym {
            let mut disc = synd[r];
            for i in 1..=l.min(lambda.len() - 1) {
                disc ^= gf256::mul(lambda[i], synd[r - i]);
            }
            if disc == 0 {
                shift += 1;
                continue;
            }
            let coef = gf256::div(disc, prev_disc);
            let mut next = lambda.clone();
            if next.len() < prev.len() + shift {
                next.resize(prev.len() + shift, 0);
            }
            for (i, &p) in prev.iter().enumerate() {
                next[i + shift] ^= gf256::mul(coef, p);
            }
            if 2 * l <= r {
                prev = std::mem::replace(&mut lambda, next);
                l = r + 1 - l;
                prev_disc = disc;
                shift = 1;
            } else {
                lambda = next;
                shift += 1;
            }
        }
        while lambda.len() > 1 && *lambda.last().unwrap() == 0 {
            lambda.pop();
        }
        let errors = lambda.len() - 1;
        if errors != l || 2 * errors > nsym {
            return Err(Error::DecodeFailure(format!(
                "error locator degree {errors} exceeds correction capacity {}",
                nsym / 2
            )));
        }

        // Chien search over the n valid positions
        let mut positions = Vec::with_capacity(errors);
        for j in 0..n {
            let power = (n - 1 - j) as i64;
            if eval_asc(&lambda, alpha_pow(-power)) == 0 {
                positions.push(j);
            }
        }
        if positions.len() != errors {
            return Err(Error::DecodeFailure(format!(
                "found {} locator roots for {errors} errors",
                positions.len()
            )));
        }

        // Forney: e = omega(X^-1) / lambda'(X^-1) for first root alpha^1
        let mut omega = vec![0u8; nsym];
        for (i, &s) in synd.iter().enumerate() {
            for (j, &c) in lambda.iter().enumerate() {
                if i + j < nsym {
                    omega[i + j] ^= gf256::mul(s, c);
                }
            }
        }
        let derivative: Vec<u8> = lambda
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &c)| if i % 2 == 1 { c } else { 0 })
            .collect();
        for &j in &positions {
            let x_inv = alpha_pow(-((n - 1 - j) as i64));
            let denom = eval_asc(&derivative, x_inv);
            if denom == 0 {
                return Err(Error::DecodeFailure("singular error evaluator".into()));
            }
            block[j] ^= gf256::div(eval_asc(&omega, x_inv), denom);
        }
        if self.syndromes(block).iter().any(|&s| s != 0) {
            return Err(Error::DecodeFailure(
                "residual syndrome after correction".into(),
            ));
        }
        Ok(errors)
    }
}

/// Frames `data` with its 4-byte big-endian length, zero-pads to whole
/// `k`-symbol blocks and encodes each block to `n` symbols.
pub fn rs_encode(data: &[u8], params: RsCodeParams) -> Result<Vec<u8>> {
    let code = ReedSolomon::new(params)?;
    let len = u32::try_from(data.len())
        .map_err(|_| Error::Argument("message longer than 4 GiB".into()))?;
    let blocks = params.blocks_for(data.len());
    let mut framed = Vec::with_capacity(blocks * params.k);
    framed.extend_from_slice(&len.to_be_bytes());
    framed.extend_from_slice(data);
    framed.resize(blocks * params.k, 0);
    let mut out = Vec::with_capacity(blocks * params.n);
    for chunk in framed.chunks_exact(params.k) {
        out.extend(code.encode_block(chunk));
    }
    Ok(out)
}

/// Reads the length header out of decoded data symbols.
pub(crate) fn parse_header(data: &[u8], available: usize) -> Result<usize> {
    let len = u32::from_be_bytes(data[..HEADER_LEN].try_into().unwrap()) as usize;
    if len + HEADER_LEN > available {
        return Err(Error::DecodeFailure(format!(
            "header claims {len} bytes but only {} fit",
            available.saturating_sub(HEADER_LEN)
        )));
    }
    Ok(len)
}

/// Inverse of [`rs_encode`]: corrects every block, then strips the header and
/// padding.
pub fn rs_decode(codeword: &[u8], params: RsCodeParams) -> Result<Vec<u8>> {
    let code = ReedSolomon::new(params)?;
    if codeword.is_empty() || !codeword.len().is_multiple_of(params.n) {
        return Err(Error::Argument(format!(
            "codeword length {} is not a positive multiple of n = {}",
            codeword.len(),
            params.n
        )));
    }
    let mut data = Vec::with_capacity(codeword.len() / params.n * params.k);
    for (i, chunk) in codeword.chunks_exact(params.n).enumerate() {
        let mut block = chunk.to_vec();
        code.decode_block(&mut block)
            .map_err(|e| Error::DecodeFailure(format!("block {i}: {e}")))?;
        data.extend_from_slice(&block[..params.k]);
    }
    if data.len() < HEADER_LEN {
        return Err(Error::DecodeFailure("no room for length header".into()));
    }
    let len = parse_header(&data, data.len())?;
    Ok(data[HEADER_LEN..HEADER_LEN + len].to_vec())
}
