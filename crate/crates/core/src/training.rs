//! Adversarial training: encoder and decoder against a weight-clipped critic.
//!
//! Each batch gets one critic update followed by one encoder/decoder update.
//! The stego batch produced by the encoder is shared by both updates.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{augment, from_tensor, to_tensor, DatasetSplit, RgbImage};
use crate::metrics::{psnr, ssim, MetricsReport};
use crate::networks::{
    batch_bits, batch_images, logits_to_bits, save_weights, ConvBlockParams, Critic,
    MeasuredQuality, Mode, NetGrads, Tensor4, Variant, WeightStore,
};
use crate::payload::{block_symbol_error_rates, choose_code, random_bits, BitTensor, CODE_MARGIN};

/// Reed-Solomon block length used when measuring symbol error rates.
pub const SYMBOL_BLOCK: usize = 255;
const EVAL_SALT: u64 = 0x0E7A_1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Global L2 bound on the encoder+decoder gradient.
    pub grad_norm_clip: f64,
    /// Critic parameters are clamped to `[-c, c]` after every update.
    pub critic_weight_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub data_depth: usize,
    pub variant: Variant,
    pub seed: u64,
    pub crop_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            grad_norm_clip: 0.25,
            critic_weight_clip: 0.1,
            epochs: 32,
            batch_size: 4,
            data_depth: 1,
            variant: Variant::Dense,
            seed: 0,
            crop_size: 128,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning rate", self.learning_rate)?;
        positive("gradient norm clip", self.grad_norm_clip)?;
        positive("critic weight clip", self.critic_weight_clip)?;
        positive("adam eps", self.adam_eps)?;
        for (name, b) in [
            ("adam beta1", self.adam_beta1),
            ("adam beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Argument(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.data_depth == 0 {
            return Err(Error::Argument(
                "epochs, batch size and data depth must be at least 1".into(),
            ));
        }
        if self.crop_size < crate::imagery::MIN_SIDE {
            return Err(Error::Argument(format!(
                "crop size {} below minimum {}",
                self.crop_size,
                crate::imagery::MIN_SIDE
            )));
        }
        Ok(())
    }
}

/// Losses and diagnostics of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    /// Decoding cross-entropy.
    pub l_d: f64,
    /// Image MSE.
    pub l_s: f64,
    /// Mean critic score of the stego batch.
    pub l_r: f64,
    /// Critic Wasserstein loss before the critic update.
    pub l_c: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
    pub critic_max_abs_weight: f64,
}

impl LossRecord {
    fn is_finite(&self) -> bool {
        [self.l_d, self.l_s, self.l_r, self.l_c, self.grad_norm]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn same_shape(a: &Tensor4, b: &Tensor4, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy from logits and its gradient.
fn decoding_loss_grad(logits: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    same_shape(logits, target, "logits vs target")?;
    let n = logits.data.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .data
        .iter()
        .zip(&target.data)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            let sig = 1.0 / (1.0 + (-x).exp());
            ((sig - y) / n) as f32
        })
        .collect();
    Ok((
        loss / n,
        Tensor4::from_vec(logits.n, logits.c, logits.h, logits.w, grad)?,
    ))
}

pub fn decoding_loss(logits: &Tensor4, target: &Tensor4) -> Result<f64> {
    Ok(decoding_loss_grad(logits, target)?.0)
}

fn similarity_loss_grad(cover: &Tensor4, stego: &Tensor4) -> Result<(f64, Tensor4)> {
    same_shape(cover, stego, "cover vs stego")?;
    let n = cover.data.len() as f64;
    let mut loss = 0.0;
    let grad = stego
        .data
        .iter()
        .zip(&cover.data)
        .map(|(&s, &c)| {
            let d = s as f64 - c as f64;
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok((
        loss / n,
        Tensor4::from_vec(stego.n, stego.c, stego.h, stego.w, grad)?,
    ))
}

pub fn similarity_loss(cover: &Tensor4, stego: &Tensor4) -> Result<f64> {
    Ok(similarity_loss_grad(cover, stego)?.0)
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

pub fn realness_loss(stego: &Tensor4, critic: &Critic, mode: Mode) -> Result<f64> {
    Ok(mean(&critic.forward(stego, mode)?.0))
}

/// Mean critic score on covers minus mean score on stegos.
pub fn critic_loss(cover: &Tensor4, stego: &Tensor4, critic: &Critic, mode: Mode) -> Result<f64> {
    same_shape(cover, stego, "cover vs stego")?;
    Ok(mean(&critic.forward(cover, mode)?.0) - mean(&critic.forward(stego, mode)?.0))
}

pub fn bit_accuracy_from_logits(logits: &Tensor4, target: &Tensor4) -> Result<f64> {
    same_shape(logits, target, "logits vs target")?;
    let hits = logits
        .data
        .iter()
        .zip(&target.data)
        .filter(|(&x, &y)| (x > 0.0) == (y > 0.5))
        .count();
    Ok(hits as f64 / logits.data.len() as f64)
}

/// Adam with one moment pair per parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f32>>, grads: &[&[f32]]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter and gradient lists differ"
        );
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                p[i] -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

fn params_mut(blocks: &mut [ConvBlockParams]) -> impl Iterator<Item = &mut Vec<f32>> {
    blocks.iter_mut().flat_map(|b| b.trainable_mut())
}

fn grad_slices(g: &NetGrads<f32>) -> impl Iterator<Item = &[f32]> {
    g.iter().flat_map(|b| b.slices())
}

fn add_grads(acc: &mut NetGrads<f32>, other: &NetGrads<f32>) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.slices_mut().into_iter().zip(b.slices()) {
            for (p, q) in x.iter_mut().zip(y) {
                *p += q;
            }
        }
    }
}

fn global_norm(grads: &[&NetGrads<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| grad_slices(g))
        .flat_map(|s| s.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

fn scale_grads(g: &mut NetGrads<f32>, s: f32) {
    for b in g.iter_mut() {
        for v in b.slices_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
}

pub fn max_abs_weight(critic: &Critic) -> f64 {
    critic
        .blocks
        .iter()
        .flat_map(|b| b.trainable())
        .flat_map(|s| s.iter())
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()))
}

/// Largest `f32` not above `v`, so clamped weights satisfy the bound
/// exactly when compared in `f64`.
fn f32_at_most(v: f64) -> f32 {
    let c = v as f32;
    if c as f64 > v {
        f32::from_bits(c.to_bits() - 1)
    } else {
        c
    }
}

/// Optimizer state plus the weights being trained.
pub struct Trainer {
    pub weights: WeightStore,
    pub config: TrainConfig,
    critic_opt: Adam,
    gen_opt: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weights = WeightStore::new(config.variant, config.data_depth, config.seed)?;
        Self::with_weights(weights, config)
    }

    pub fn with_weights(weights: WeightStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        if weights.data_depth() != config.data_depth || weights.variant() != config.variant {
            return Err(Error::Argument(format!(
                "weights are {} D={}, config asks for {} D={}",
                weights.variant(),
                weights.data_depth(),
                config.variant,
                config.data_depth
            )));
        }
        let adam = || {
            Adam::new(
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            )
        };
        Ok(Self {
            critic_opt: adam(),
            gen_opt: adam(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7A1A_5EED),
            weights,
            config,
            epoch: 0,
            step: 0,
        })
    }

    fn fresh_messages(&mut self, n: usize, h: usize, w: usize) -> Result<Tensor4> {
        let d = self.config.data_depth;
        let bits: Vec<BitTensor> = (0..n)
            .map(|_| random_bits(d, h, w, self.rng.next_u64()))
            .collect::<Result<_>>()?;
        batch_bits(&bits.iter().collect::<Vec<_>>())
    }

    fn diverged(&self, record: &LossRecord, detail: &str) -> Error {
        Error::Training {
            epoch: self.epoch,
            step: self.step,
            detail: format!(
                "{detail}; record {}",
                serde_json::to_string(record).unwrap_or_default()
            ),
        }
    }

    /// One critic update then one encoder/decoder update on `covers`, with
    /// a fresh random message per image.
    pub fn train_step(&mut self, covers: &Tensor4) -> Result<LossRecord> {
        if covers.c != 3 {
            return Err(Error::Shape(format!(
                "covers need 3 channels, got {}",
                covers.c
            )));
        }
        let msg = self.fresh_messages(covers.n, covers.h, covers.w)?;
        let n = covers.n as f32;
        let cfg = self.config.clone();
        let w = &mut self.weights;

        let (stego, enc_cache) = w.encoder.forward(covers, &msg, Mode::Train)?;

        let (cover_scores, cover_cache) = w.critic.forward(covers, Mode::Train)?;
        let (stego_scores, stego_cache) = w.critic.forward(&stego, Mode::Train)?;
        let l_c = mean(&cover_scores) - mean(&stego_scores);
        let (g_cover, _) = w
            .critic
            .backward(&cover_cache, &vec![1.0 / n; covers.n], true, false);
        let (g_stego, _) = w
            .critic
            .backward(&stego_cache, &vec![-1.0 / n; covers.n], true, false);
        let mut critic_grads = g_cover.unwrap();
        add_grads(&mut critic_grads, &g_stego.unwrap());
        let slices: Vec<&[f32]> = grad_slices(&critic_grads).collect();
        self.critic_opt
            .step(params_mut(&mut w.critic.blocks).collect(), &slices);
        let clip = f32_at_most(cfg.critic_weight_clip);
        for p in params_mut(&mut w.critic.blocks) {
            p.iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
        }
        w.critic.commit_stats(&cover_cache);
        w.critic.commit_stats(&stego_cache);

        let (logits, dec_cache) = w.decoder.forward(&stego, Mode::Train)?;
        let (l_d, d_logits) = decoding_loss_grad(&logits, &msg)?;
        let accuracy = bit_accuracy_from_logits(&logits, &msg)?;
        let (l_s, mut d_stego) = similarity_loss_grad(covers, &stego)?;
        let (real_scores, real_cache) = w.critic.forward(&stego, Mode::Train)?;
        let l_r = mean(&real_scores);
        let (_, d_real) = w
            .critic
            .backward(&real_cache, &vec![1.0 / n; covers.n], false, true);
        d_stego.add_assign(&d_real.unwrap());
        let (mut dec_grads, d_dec) = w.decoder.backward(&dec_cache, &d_logits, true);
        d_stego.add_assign(&d_dec.unwrap());
        let mut enc_grads = w.encoder.backward(&enc_cache, &d_stego);

        let grad_norm = global_norm(&[&enc_grads, &dec_grads]);
        if grad_norm > cfg.grad_norm_clip {
            let s = (cfg.grad_norm_clip / grad_norm) as f32;
            scale_grads(&mut enc_grads, s);
            scale_grads(&mut dec_grads, s);
        }
        let grad_norm_clipped = global_norm(&[&enc_grads, &dec_grads]);

        let record = LossRecord {
            epoch: self.epoch,
            step: self.step,
            l_d,
            l_s,
            l_r,
            l_c,
            accuracy,
            grad_norm,
            grad_norm_clipped,
            critic_max_abs_weight: max_abs_weight(&w.critic),
        };
        if !record.is_finite() {
            return Err(self.diverged(&record, "non-finite loss or gradient"));
        }

        let slices: Vec<&[f32]> = grad_slices(&enc_grads)
            .chain(grad_slices(&dec_grads))
            .collect();
        let params: Vec<&mut Vec<f32>> = params_mut(&mut w.encoder.blocks)
            .chain(params_mut(&mut w.decoder.blocks))
            .collect();
        self.gen_opt.step(params, &slices);
        w.encoder.commit_stats(&enc_cache);
        w.decoder.commit_stats(&dec_cache);
        self.step += 1;
        Ok(record)
    }

    /// One pass over `images` in a seeded order, each augmented afresh.
    pub fn train_epoch(&mut self, images: &[RgbImage]) -> Result<Vec<LossRecord>> {
        if images.is_empty() {
            return Err(Error::Argument("no training images".into()));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.rng);
        let mut records = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let crops: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let seed = self.rng.next_u64();
                    augment(&images[i], self.config.crop_size, seed).map(|c| to_tensor(&c))
                })
                .collect::<Result<_>>()?;
            let batch = batch_images(&crops.iter().collect::<Vec<_>>())?;
            records.push(self.train_step(&batch)?);
        }
        self.epoch += 1;
        Ok(records)
    }
}

/// Held-out quality of a model on whole images in eval mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Metrics on the quantized stego images.
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub accuracy_pre_quant: f64,
    pub psnr_pre_quant: Option<f64>,
    /// Worst fraction of wrong bytes in any 255-byte block of the bit stream.
    pub symbol_error_rate: f64,
    pub mean_symbol_error_rate: f64,
}

impl EvalReport {
    pub fn measured(&self) -> MeasuredQuality {
        MeasuredQuality {
            accuracy: self.metrics.accuracy,
            accuracy_pre_quant: self.accuracy_pre_quant,
            symbol_error_rate: self.symbol_error_rate,
            psnr: self.metrics.psnr,
            ssim: self.metrics.ssim,
            n_images: self.metrics.n_images,
        }
    }
}

/// Byte error rates per block; short streams count as one block.
fn symbol_rates(decoded: &BitTensor, truth: &BitTensor) -> Result<Vec<f64>> {
    let rates = block_symbol_error_rates(decoded, truth, SYMBOL_BLOCK)?;
    if !rates.is_empty() {
        return Ok(rates);
    }
    let len = decoded.len() / 8;
    if len == 0 {
        return Ok(Vec::new());
    }
    block_symbol_error_rates(decoded, truth, len)
}

/// Hides a seeded random message in every image, quantizes the stego image
/// to 8 bits and decodes it again.
pub fn evaluate(weights: &WeightStore, images: &[RgbImage], seed: u64) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Argument("no evaluation images".into()));
    }
    let d = weights.data_depth();
    let (mut hits, mut hits_pre, mut total) = (0usize, 0usize, 0usize);
    let (mut psnrs, mut psnrs_pre, mut ssims, mut rates) = (vec![], vec![], vec![], vec![]);
    for (i, img) in images.iter().enumerate() {
        let cover = to_tensor(img);
        let (h, w) = (img.height(), img.width());
        let truth = random_bits(
            d,
            h,
            w,
            seed ^ EVAL_SALT ^ (i as u64).wrapping_mul(0x9E37_79B9),
        )?;
        let stego = weights
            .encoder
            .forward(
                &batch_images(&[&cover])?,
                &batch_bits(&[&truth])?,
                Mode::Eval,
            )?
            .0;
        let stego_img = crate::networks::unbatch_images(&stego)?.remove(0);
        let quantized = to_tensor(&from_tensor(&stego_img)?);

        let pre = logits_to_bits(&weights.decoder.forward(&stego, Mode::Eval)?.0, 0)?;
        let post = logits_to_bits(
            &weights
                .decoder
                .forward(&batch_images(&[&quantized])?, Mode::Eval)?
                .0,
            0,
        )?;
        let count = |b: &BitTensor| {
            b.data()
                .iter()
                .zip(truth.data())
                .filter(|(a, b)| a == b)
                .count()
        };
        hits += count(&post);
        hits_pre += count(&pre);
        total += truth.len();
        psnrs.push(psnr(&cover, &quantized)?);
        psnrs_pre.push(psnr(&cover, &stego_img)?);
        ssims.push(ssim(&cover, &quantized)?);
        rates.extend(symbol_rates(&post, &truth)?);
    }
    let accuracy = hits as f64 / total as f64;
    let pre = MetricsReport::from_parts(hits_pre as f64 / total as f64, d, &psnrs_pre, &ssims)?;
    Ok(EvalReport {
        metrics: MetricsReport::from_parts(accuracy, d, &psnrs, &ssims)?,
        accuracy_pre_quant: pre.accuracy,
        psnr_pre_quant: pre.psnr,
        symbol_error_rate: rates.iter().copied().fold(0.0, f64::max),
        mean_symbol_error_rate: if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        },
    })
}

/// Stores the held-out quality in the model and derives its default code from
/// the measured symbol error rate. A rate too high for any code keeps the
/// previous default.
pub fn record_quality(weights: &mut WeightStore, eval: &EvalReport) {
    weights.measured = Some(eval.measured());
    match choose_code(eval.symbol_error_rate, CODE_MARGIN) {
        Ok(code) => weights.rs_code = code,
        Err(e) => log::warn!("keeping code {:?}: {e}", weights.rs_code),
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub l_d: f64,
    pub l_s: f64,
    pub l_r: f64,
    pub l_c: f64,
    pub train_accuracy: f64,
    pub eval: EvalReport,
    pub wall_seconds: f64,
}

pub struct FitOutcome {
    /// Weights from the epoch with the best held-out accuracy.
    pub best: WeightStore,
    pub best_epoch: usize,
    pub last: WeightStore,
    pub log: Vec<EpochLog>,
}

/// Where [`fit_images`] writes its artifacts.
#[derive(Default)]
pub struct FitSinks<'a> {
    /// Best-accuracy checkpoint, rewritten whenever held-out accuracy improves.
    pub checkpoint: Option<&'a Path>,
    /// One JSON object per epoch, newline separated.
    pub log: Option<&'a mut dyn Write>,
}

pub fn fit(split: &DatasetSplit, config: &TrainConfig, sinks: FitSinks<'_>) -> Result<FitOutcome> {
    split.validate()?;
    let config = TrainConfig {
        crop_size: split.crop_size,
        ..config.clone()
    };
    fit_images(&split.load_train()?, &split.load_test()?, &config, sinks)
}

pub fn fit_images(
    train: &[RgbImage],
    test: &[RgbImage],
    config: &TrainConfig,
    mut sinks: FitSinks<'_>,
) -> Result<FitOutcome> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Argument(
            "training needs non-empty train and test sets".into(),
        ));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, WeightStore)> = None;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let records = trainer.train_epoch(train)?;
        let eval = evaluate(&trainer.weights, test, config.seed)?;
        let avg =
            |f: fn(&LossRecord) -> f64| records.iter().map(f).sum::<f64>() / records.len() as f64;
        let entry = EpochLog {
            epoch,
            steps: records.len(),
            l_d: avg(|r| r.l_d),
            l_s: avg(|r| r.l_s),
            l_r: avg(|r| r.l_r),
            l_c: avg(|r| r.l_c),
            train_accuracy: avg(|r| r.accuracy),
            eval,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: l_d {:.4} l_s {:.5} acc {:.4} psnr {:?} ({:.1}s)",
            entry.l_d,
            entry.l_s,
            entry.eval.metrics.accuracy,
            entry.eval.metrics.psnr,
            entry.wall_seconds
        );
        if let Some(out) = sinks.log.as_mut() {
            let line = serde_json::to_string(&entry).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        let acc = entry.eval.metrics.accuracy;
        if best.as_ref().is_none_or(|(_, a, _)| acc > *a) {
            let mut snapshot = trainer.weights.clone();
            record_quality(&mut snapshot, &entry.eval);
            if let Some(path) = sinks.checkpoint {
                save_weights(&snapshot, path)?;
            }
            best = Some((epoch, acc, snapshot));
        }
        log.push(entry);
    }
    let (best_epoch, _, best) = best.expect("at least one epoch");
    let mut last = trainer.weights;
    if let Some(entry) = log.last() {
        record_quality(&mut last, &entry.eval);
    }
    Ok(FitOutcome {
        best,
        best_epoch,
        last,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::critic_score;
    use crate::networks::gradcheck::random_tensor;

    fn tiny_images(n: usize, side: usize, seed: u64) -> Vec<RgbImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let base = (rng.next_u32() % 200) as usize;
                let pixels = (0..side * side * 3)
                    .map(|i| {
                        ((base + (i / 3) % side * 2 + (rng.next_u32() % 16) as usize) % 256) as u8
                    })
                    .collect();
                RgbImage::new(side, side, pixels).unwrap()
            })
            .collect()
    }

    fn batch(n: usize, side: usize, seed: u64) -> Tensor4 {
        random_tensor(n, 3, side, side, seed).cast()
    }

    #[test]
    fn decoding_loss_examples() {
        let target = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let good = Tensor4::from_vec(1, 1, 2, 2, vec![20.0, -20.0, 20.0, -20.0]).unwrap();
        assert!(decoding_loss(&good, &target).unwrap() < 1e-8);
        let zero = Tensor4::zeros(1, 1, 2, 2);
        assert!((decoding_loss(&zero, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let perm = [2, 3, 0, 1];
        let logits = Tensor4::from_vec(1, 1, 2, 2, vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let p = |t: &Tensor4| {
            Tensor4::from_vec(1, 1, 2, 2, perm.iter().map(|&i| t.data[i]).collect()).unwrap()
        };
        let a = decoding_loss(&logits, &target).unwrap();
        let b = decoding_loss(&p(&logits), &p(&target)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(
            decoding_loss(&zero, &Tensor4::zeros(1, 2, 2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn similarity_loss_examples() {
        let x = batch(2, 8, 1);
        assert_eq!(similarity_loss(&x, &x).unwrap(), 0.0);
        let lo = Tensor4::from_vec(1, 3, 4, 4, vec![-1.0; 48]).unwrap();
        let hi = Tensor4::from_vec(1, 3, 4, 4, vec![1.0; 48]).unwrap();
        assert_eq!(similarity_loss(&lo, &hi).unwrap(), 4.0);
        let y = batch(2, 8, 2);
        let r1: Vec<f32> = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(a, b)| a + 0.1 * b)
            .collect();
        let r2: Vec<f32> = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(a, b)| a + 0.2 * b)
            .collect();
        let l1 = similarity_loss(&x, &Tensor4::from_vec(2, 3, 8, 8, r1).unwrap()).unwrap();
        let l2 = similarity_loss(&x, &Tensor4::from_vec(2, 3, 8, 8, r2).unwrap()).unwrap();
        assert!((l2 / l1 - 4.0).abs() < 1e-4, "{}", l2 / l1);
    }

    fn zero_critic(w: &mut WeightStore) {
        let last = w.critic.blocks.last_mut().unwrap();
        last.kernel.iter_mut().for_each(|v| *v = 0.0);
        last.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn critic_losses_examples() {
        let mut w = WeightStore::<f32>::new(Variant::Basic, 1, 3).unwrap();
        let x = batch(3, 8, 4);
        let y = batch(3, 8, 5);
        let scores = critic_score(&y, &w, Mode::Eval).unwrap();
        let r = realness_loss(&y, &w.critic, Mode::Eval).unwrap();
        assert!((r - mean(&scores)).abs() < 1e-9);
        assert_eq!(critic_loss(&x, &x, &w.critic, Mode::Eval).unwrap(), 0.0);

        // A critic whose score is the mean of the red channel.
        let mut linear = w.clone();
        for b in linear.critic.blocks.iter_mut() {
            b.kernel.iter_mut().for_each(|v| *v = 0.0);
            b.bias.iter_mut().for_each(|v| *v = 0.0);
            b.bn_gamma.iter_mut().for_each(|v| *v = 1.0);
            b.bn_beta.iter_mut().for_each(|v| *v = 0.0);
            b.bn_running_mean.iter_mut().for_each(|v| *v = 0.0);
            b.bn_running_var.iter_mut().for_each(|v| *v = 1.0 - 1e-5);
            b.kernel[4] = 1.0;
        }
        let dark = Tensor4::from_vec(2, 3, 8, 8, vec![0.2; 384]).unwrap();
        let bright = Tensor4::from_vec(2, 3, 8, 8, vec![0.6; 384]).unwrap();
        let l = critic_loss(&dark, &bright, &linear.critic, Mode::Eval).unwrap();
        assert!((l - (0.2 - 0.6)).abs() < 1e-5, "{l}");

        zero_critic(&mut w);
        assert_eq!(realness_loss(&y, &w.critic, Mode::Eval).unwrap(), 0.0);
        assert_eq!(critic_loss(&x, &y, &w.critic, Mode::Eval).unwrap(), 0.0);
    }

    #[test]
    fn realness_gradient_reaches_encoder() {
        let w = WeightStore::<f32>::new(Variant::Dense, 1, 8).unwrap();
        let x = batch(2, 8, 9);
        let m = random_tensor(2, 1, 8, 8, 10)
            .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
            .cast();
        let (s, cache) = w.encoder.forward(&x, &m, Mode::Train).unwrap();
        let (_, rc) = w.critic.forward(&s, Mode::Train).unwrap();
        let (_, ds) = w.critic.backward(&rc, &[0.5, 0.5], false, true);
        let g = w.encoder.backward(&cache, &ds.unwrap());
        assert!(global_norm(&[&g]) > 0.0);
    }

    #[test]
    fn clip_bound_never_rounds_up() {
        for v in [0.1, 0.25, 1.0 / 3.0, 0.5] {
            let c = f32_at_most(v);
            assert!(c as f64 <= v);
            assert!(f32::from_bits(c.to_bits() + 1) as f64 > v);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0f32, -2.0, 0.5];
        let g = [0.3f32, -4.0, 0.0];
        let mut opt = Adam::new(1e-2, 0.9, 0.999, 1e-8);
        opt.step(vec![&mut p], &[&g]);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn step_respects_clips_and_is_deterministic() {
        let cfg = TrainConfig {
            crop_size: 16,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(cfg.clone()).unwrap();
            (0..3)
                .map(|i| t.train_step(&batch(2, 16, 20 + i)).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run();
        for r in &a {
            assert!(r.critic_max_abs_weight <= 0.1);
            assert!(r.grad_norm_clipped <= 0.25 + 1e-6);
            assert!(r.l_d >= 0.0 && r.l_s >= 0.0);
            assert!((0.0..=1.0).contains(&r.accuracy));
        }
        assert_eq!(a, run());
    }

    #[test]
    fn non_finite_input_is_a_training_error() {
        let mut t = Trainer::new(TrainConfig {
            crop_size: 8,
            ..TrainConfig::default()
        })
        .unwrap();
        let mut x = batch(2, 8, 1);
        x.data[5] = f32::NAN;
        assert!(matches!(t.train_step(&x), Err(Error::Training { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                critic_weight_clip: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                crop_size: 4,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn smoke_fit_writes_checkpoint_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("best.sfg");
        let train = tiny_images(8, 24, 1);
        let test = tiny_images(2, 16, 2);
        let cfg = TrainConfig {
            epochs: 1,
            crop_size: 16,
            data_depth: 1,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let out = fit_images(
            &train,
            &test,
            &cfg,
            FitSinks {
                checkpoint: Some(&ckpt),
                log: Some(&mut log),
            },
        )
        .unwrap();
        assert_eq!(out.log.len(), 1);
        let e = &out.log[0];
        assert!(e.l_d.is_finite() && e.l_s.is_finite() && e.l_r.is_finite() && e.l_c.is_finite());
        let loaded = crate::networks::load_weights(&ckpt).unwrap();
        assert_eq!(loaded, out.best);
        let line: EpochLog =
            serde_json::from_slice(log.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(line.epoch, 0);
        assert!(fit_images(&[], &test, &cfg, FitSinks::default()).is_err());
    }
}
