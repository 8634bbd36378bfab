//! Central finite-difference oracle for the hand-written backward passes.
//!
//! Every check runs in `f64`, perturbs a random sample of entries of every
//! trainable vector (and of the input, where the backward pass exposes an
//! input gradient) and compares against the analytic result with
//! `|analytic - numeric| <= ATOL + RTOL * |numeric|`. The loss is a random
//! linear read-out of the network output, so only forward passes feed the
//! numeric side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{BlockGrads, ConvBlockParams, Mode};
use super::nets::{Critic, Decoder, Encoder, Variant};
use super::tensor::Tensor4;

pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-5;
const STEP: f64 = 1e-6;
/// Entries sampled per parameter vector.
const SAMPLES: usize = 12;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    /// Largest `|a - n| / (ATOL + RTOL |n|)`; at most 1 when the check passes.
    pub worst_ratio: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_ratio <= 1.0
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs();
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(err);
        let ratio = err / (ATOL + RTOL * numeric.abs());
        if ratio.is_nan() {
            self.worst_ratio = f64::INFINITY;
        } else {
            self.worst_ratio = self.worst_ratio.max(ratio);
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.worst_ratio = self.worst_ratio.max(other.worst_ratio);
    }
}

pub fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * c * h * w)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor4::from_vec(n, c, h, w, data).unwrap()
}

fn random_bits_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * c * h * w)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    Tensor4::from_vec(n, c, h, w, data).unwrap()
}

fn readout(out: &[f64], weights: &[f64]) -> f64 {
    out.iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Gives batch-norm parameters and running statistics non-trivial values.
fn perturb_bn<R: Rng>(blocks: &mut [ConvBlockParams<f64>], rng: &mut R) {
    for b in blocks.iter_mut().filter(|b| !b.terminal) {
        for v in b.bn_gamma.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in b.bn_beta.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        for v in b.bn_running_mean.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        for v in b.bn_running_var.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in b.bias.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
}

/// Compares sampled entries of every trainable vector against central
/// differences of `loss`.
fn check_params<R: Rng>(
    blocks: &mut [ConvBlockParams<f64>],
    analytic: &[BlockGrads<f64>],
    rng: &mut R,
    loss: impl Fn(&[ConvBlockParams<f64>]) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for bi in 0..blocks.len() {
        for ti in 0..4 {
            let len = blocks[bi].trainable()[ti].len();
            if len == 0 {
                continue;
            }
            let picks: Vec<usize> = if len <= SAMPLES {
                (0..len).collect()
            } else {
                rand::seq::index::sample(rng, len, SAMPLES).into_vec()
            };
            for j in picks {
                let orig = blocks[bi].trainable()[ti][j];
                blocks[bi].trainable_mut()[ti][j] = orig + STEP;
                let up = loss(blocks);
                blocks[bi].trainable_mut()[ti][j] = orig - STEP;
                let down = loss(blocks);
                blocks[bi].trainable_mut()[ti][j] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                report.record(analytic[bi].slices()[ti][j], numeric);
            }
        }
    }
    report
}

fn check_input<R: Rng>(
    x: &Tensor4<f64>,
    analytic: &Tensor4<f64>,
    rng: &mut R,
    loss: impl Fn(&Tensor4<f64>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut x = x.clone();
    for j in rand::seq::index::sample(rng, x.data.len(), (SAMPLES * 4).min(x.data.len())) {
        let orig = x.data[j];
        x.data[j] = orig + STEP;
        let up = loss(&x);
        x.data[j] = orig - STEP;
        let down = loss(&x);
        x.data[j] = orig;
        report.record(analytic.data[j], (up - down) / (2.0 * STEP));
    }
    report
}

/// Single block, parameters and input.
pub fn check_block(
    p: &ConvBlockParams<f64>,
    x: &Tensor4<f64>,
    mode: Mode,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, cache) = p.forward(x.clone(), mode).unwrap();
    let r = random_tensor(out.n, out.c, out.h, out.w, seed ^ 0x5EED);
    let (grads, dx) = p.backward(&cache, &r, true, true);
    let mut blocks = vec![p.clone()];
    let mut report = check_params(&mut blocks, &[grads.unwrap()], &mut rng, |b| {
        readout(&b[0].forward(x.clone(), mode).unwrap().0.data, &r.data)
    });
    report.merge(check_input(x, &dx.unwrap(), &mut rng, |xx| {
        readout(&p.forward(xx.clone(), mode).unwrap().0.data, &r.data)
    }));
    report
}

/// Encoder parameters under a train-mode forward pass.
pub fn check_encoder(variant: Variant, depth: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Encoder::<f64>::new(variant, depth, &mut rng);
    perturb_bn(&mut enc.blocks, &mut rng);
    let (n, h, w) = (2, 8, 8);
    let cover = random_tensor(n, 3, h, w, seed + 1);
    let msg = random_bits_tensor(n, depth, h, w, seed + 2);
    let (_, cache) = enc.forward(&cover, &msg, Mode::Train).unwrap();
    let r = random_tensor(n, 3, h, w, seed + 3);
    let grads = enc.backward(&cache, &r);
    let template = enc.clone();
    check_params(&mut enc.blocks, &grads, &mut rng, |b| {
        let e = Encoder {
            blocks: b.to_vec(),
            ..template.clone()
        };
        readout(
            &e.forward(&cover, &msg, Mode::Train).unwrap().0.data,
            &r.data,
        )
    })
}

/// Decoder parameters and stego-input gradient.
pub fn check_decoder(depth: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dec = Decoder::<f64>::new(depth, &mut rng);
    perturb_bn(&mut dec.blocks, &mut rng);
    let stego = random_tensor(2, 3, 8, 8, seed + 1);
    let (out, cache) = dec.forward(&stego, Mode::Train).unwrap();
    let r = random_tensor(out.n, out.c, out.h, out.w, seed + 2);
    let (grads, dx) = dec.backward(&cache, &r, true);
    let template = dec.clone();
    let mut report = check_params(&mut dec.blocks, &grads, &mut rng, |b| {
        let d = Decoder {
            blocks: b.to_vec(),
            ..template.clone()
        };
        readout(&d.forward(&stego, Mode::Train).unwrap().0.data, &r.data)
    });
    report.merge(check_input(&stego, &dx.unwrap(), &mut rng, |x| {
        readout(&template.forward(x, Mode::Train).unwrap().0.data, &r.data)
    }));
    report
}

/// Critic parameters and image-input gradient.
pub fn check_critic(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut critic = Critic::<f64>::new(&mut rng);
    perturb_bn(&mut critic.blocks, &mut rng);
    let img = random_tensor(3, 3, 8, 8, seed + 1);
    let r: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, cache) = critic.forward(&img, Mode::Train).unwrap();
    let (grads, dx) = critic.backward(&cache, &r, true, true);
    let template = critic.clone();
    let mut report = check_params(&mut critic.blocks, &grads.unwrap(), &mut rng, |b| {
        let c = Critic { blocks: b.to_vec() };
        readout(&c.forward(&img, Mode::Train).unwrap().0, &r)
    });
    report.merge(check_input(&img, &dx.unwrap(), &mut rng, |x| {
        readout(&template.forward(x, Mode::Train).unwrap().0, &r)
    }));
    report
}
