//! The convolutional block: 3x3 convolution (stride 1, zero padding 1),
//! then leaky ReLU and batch normalization unless the block is terminal.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{self, Geometry};
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const KERNEL_AREA: usize = 9;

/// Batch-norm behaviour: batch statistics in `Train`, running statistics in
/// `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Learned state of one block. Terminal blocks carry no batch-norm vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub terminal: bool,
    /// `out x in x 3 x 3`, row-major.
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub bn_running_mean: Vec<T>,
    pub bn_running_var: Vec<T>,
}

/// Gradients of the trainable parts of a block, same layout as the params.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads<T = f32> {
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
}

impl<T: Scalar> BlockGrads<T> {
    pub fn slices(&self) -> [&[T]; 4] {
        [&self.kernel, &self.bias, &self.bn_gamma, &self.bn_beta]
    }

    pub fn slices_mut(&mut self) -> [&mut Vec<T>; 4] {
        [
            &mut self.kernel,
            &mut self.bias,
            &mut self.bn_gamma,
            &mut self.bn_beta,
        ]
    }
}

/// What the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache<T = f32> {
    input: Tensor4<T>,
    /// Leaky ReLU output (non-terminal blocks only).
    activated: Option<Tensor4<T>>,
    mean: Vec<T>,
    inv_std: Vec<T>,
    /// Unbiased batch variance, for the running estimate.
    unbiased_var: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> ConvBlockParams<T> {
    /// All-zero kernel and bias, identity batch norm.
    pub fn zeros(in_channels: usize, out_channels: usize, terminal: bool) -> Self {
        let bn = |v: f64| {
            if terminal {
                Vec::new()
            } else {
                vec![T::from_f64(v); out_channels]
            }
        };
        Self {
            in_channels,
            out_channels,
            terminal,
            kernel: vec![T::zero(); out_channels * in_channels * KERNEL_AREA],
            bias: vec![T::zero(); out_channels],
            bn_gamma: bn(1.0),
            bn_beta: bn(0.0),
            bn_running_mean: bn(0.0),
            bn_running_var: bn(1.0),
        }
    }

    /// Kaiming fan-in normal kernels (leaky-ReLU gain for hidden blocks, unit
    /// gain for terminal ones), zero bias, gamma 1, beta 0.
    pub fn init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        terminal: bool,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(in_channels, out_channels, terminal);
        let fan_in = (in_channels * KERNEL_AREA) as f64;
        let gain = if terminal {
            1.0
        } else {
            (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
        };
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).unwrap();
        for k in p.kernel.iter_mut() {
            *k = T::from_f64(normal.sample(rng));
        }
        p
    }

    pub fn zero_grads(&self) -> BlockGrads<T> {
        BlockGrads {
            kernel: vec![T::zero(); self.kernel.len()],
            bias: vec![T::zero(); self.bias.len()],
            bn_gamma: vec![T::zero(); self.bn_gamma.len()],
            bn_beta: vec![T::zero(); self.bn_beta.len()],
        }
    }

    /// Trainable vectors in a fixed order matching [`BlockGrads::slices`].
    pub fn trainable(&self) -> [&[T]; 4] {
        [&self.kernel, &self.bias, &self.bn_gamma, &self.bn_beta]
    }

    pub fn trainable_mut(&mut self) -> [&mut Vec<T>; 4] {
        [
            &mut self.kernel,
            &mut self.bias,
            &mut self.bn_gamma,
            &mut self.bn_beta,
        ]
    }

    pub fn cast<U: Scalar>(&self) -> ConvBlockParams<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        ConvBlockParams {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            terminal: self.terminal,
            kernel: c(&self.kernel),
            bias: c(&self.bias),
            bn_gamma: c(&self.bn_gamma),
            bn_beta: c(&self.bn_beta),
            bn_running_mean: c(&self.bn_running_mean),
            bn_running_var: c(&self.bn_running_var),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bn_len = if self.terminal { 0 } else { self.out_channels };
        let ok = self.kernel.len() == self.out_channels * self.in_channels * KERNEL_AREA
            && self.bias.len() == self.out_channels
            && self.bn_gamma.len() == bn_len
            && self.bn_beta.len() == bn_len
            && self.bn_running_mean.len() == bn_len
            && self.bn_running_var.len() == bn_len;
        if !ok {
            return Err(Error::Shape(format!(
                "inconsistent parameter lengths for {}->{} block",
                self.in_channels, self.out_channels
            )));
        }
        if self
            .bn_running_var
            .iter()
            .any(|&v| v.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater))
        {
            return Err(Error::Numeric("running variance must be positive".into()));
        }
        Ok(())
    }

    /// Forward pass. Train mode normalizes with batch statistics; those are
    /// kept in the cache and folded into the running estimates by
    /// [`ConvBlockParams::commit_stats`].
    pub fn forward(&self, x: Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, BlockCache<T>)> {
        if x.c != self.in_channels {
            return Err(Error::Shape(format!(
                "block expects {} input channels, got {}",
                self.in_channels, x.c
            )));
        }
        let (n, h, w) = (x.n, x.h, x.w);
        let hw = h * w;
        let cin = self.in_channels;
        let cout = self.out_channels;
        let g = PadGeom::new(h, w);
        let mut z = Tensor4::zeros(n, cout, h, w);
        let mut xp = Vec::new();
        let mut zp = vec![T::zero(); cout * g.span];
        let taps = g.taps();
        let geo = Geometry {
            taps: &taps,
            span: g.span,
        };
        for i in 0..n {
            g.pad(x.item(i), cin, &mut xp);
            conv::correlate(
                &xp,
                g.plane,
                cin,
                &self.kernel,
                Some(&self.bias),
                cout,
                geo,
                &mut zp,
                g.span,
            );
            g.crop_span(&zp, cout, z.item_mut(i));
        }
        if self.terminal {
            let cache = BlockCache {
                input: x,
                activated: None,
                mean: Vec::new(),
                inv_std: Vec::new(),
                unbiased_var: Vec::new(),
                mode,
            };
            return Ok((z, cache));
        }

        let slope = T::from_f64(LEAKY_SLOPE);
        for v in z.data.iter_mut() {
            *v = *v * if *v < T::zero() { slope } else { T::one() };
        }
        let activated = z;
        let eps = T::from_f64(BN_EPSILON);
        let count = n * hw;
        let (mean, var, unbiased_var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); cout];
                let mut var = vec![T::zero(); cout];
                for c in 0..cout {
                    let planes = || (0..n).map(|i| activated.plane(i, c));
                    let mu = planes().map(|p| lane_sum(p, |v| v)).sum::<f64>() / count as f64;
                    let ss = planes()
                        .map(|p| lane_sum(p, |v| (v - mu) * (v - mu)))
                        .sum::<f64>();
                    mean[c] = T::from_f64(mu);
                    var[c] = T::from_f64(ss / count as f64);
                }
                let unbiased = if count > 1 {
                    let f = T::from_f64(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                (mean, var, unbiased)
            }
            Mode::Eval => (
                self.bn_running_mean.clone(),
                self.bn_running_var.clone(),
                Vec::new(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = activated.clone();

        for i in 0..n {
            let item = out.item_mut(i);
            for (c, plane) in item.chunks_exact_mut(hw).enumerate() {
                let scale = self.bn_gamma[c] * inv_std[c];
                let shift = self.bn_beta[c] - mean[c] * scale;
                for v in plane {
                    *v = *v * scale + shift;
                }
            }
        }
        let cache = BlockCache {
            input: x,
            activated: Some(activated),
            mean,
            inv_std,
            unbiased_var,
            mode,
        };
        Ok((out, cache))
    }

    /// Exponential moving update of the running statistics from a train-mode
    /// forward pass. No-op for eval caches and terminal blocks.
    pub fn commit_stats(&mut self, cache: &BlockCache<T>) {
        if self.terminal || cache.mode != Mode::Train {
            return;
        }
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for c in 0..self.out_channels {
            self.bn_running_mean[c] = keep * self.bn_running_mean[c] + m * cache.mean[c];
            self.bn_running_var[c] = keep * self.bn_running_var[c] + m * cache.unbiased_var[c];
        }
    }

    /// Backward pass. Returns parameter gradients and/or the gradient with
    /// respect to the block input, as requested.
    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        d_out: &Tensor4<T>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<BlockGrads<T>>, Option<Tensor4<T>>) {
        let x = &cache.input;
        let (n, h, w) = (x.n, x.h, x.w);
        let hw = h * w;
        let cout = self.out_channels;
        assert_eq!(d_out.shape(), [n, cout, h, w], "gradient shape mismatch");

        let mut grads = want_params.then(|| self.zero_grads());
        // gradient at the convolution output
        let dz = match &cache.activated {
            None => d_out.clone(),
            Some(act) => {
                let mut dy = Tensor4::zeros(n, cout, h, w);
                let count = T::from_f64((n * hw) as f64);
                for c in 0..cout {
                    let (mu, istd, gamma) = (cache.mean[c], cache.inv_std[c], self.bn_gamma[c]);
                    let (mu64, istd64) = (Scalar::to_f64(mu), Scalar::to_f64(istd));
                    let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
                    for i in 0..n {
                        let (g, a) = (d_out.plane(i, c), act.plane(i, c));
                        sum_d += lane_sum(g, |v| v);
                        sum_dx += lane_dot(g, a, |g, a| g * (a - mu64) * istd64);
                    }
                    let (sum_d, sum_dx) = (T::from_f64(sum_d), T::from_f64(sum_dx));
                    if let Some(g) = grads.as_mut() {
                        g.bn_gamma[c] = sum_dx;
                        g.bn_beta[c] = sum_d;
                    }
                    let start = |i: usize| (i * cout + c) * hw;
                    for i in 0..n {
                        let dst = &mut dy.data[start(i)..start(i) + hw];
                        let src = d_out.plane(i, c);
                        let a = act.plane(i, c);
                        match cache.mode {
                            Mode::Train => {
                                let k = gamma * istd / count;
                                for j in 0..hw {
                                    let xhat = (a[j] - mu) * istd;
                                    dst[j] = k * (count * src[j] - sum_d - xhat * sum_dx);
                                }
                            }
                            Mode::Eval => {
                                let k = gamma * istd;
                                for j in 0..hw {
                                    dst[j] = k * src[j];
                                }
                            }
                        }
                    }
                }
                let slope = T::from_f64(LEAKY_SLOPE);
                for (d, &a) in dy.data.iter_mut().zip(&act.data) {
                    *d = *d * if a > T::zero() { T::one() } else { slope };
                }
                dy
            }
        };

        let cin = self.in_channels;
        let g = PadGeom::new(h, w);
        let taps = g.taps();
        // dz sits 2 * pw + 2 into planes long enough for every tap of a
        // full padded plane, so the input gradient is a correlation of it
        // with the flipped, transposed kernel
        let lead = taps[KERNEL_AREA - 1];
        let dz_stride = g.plane + lead;
        let mut dzp = vec![T::zero(); cout * dz_stride];
        let flipped: Vec<T> = if want_input {
            let mut f = vec![T::zero(); self.kernel.len()];
            for o in 0..cout {
                for c in 0..cin {
                    for k in 0..KERNEL_AREA {
                        f[(c * cout + o) * KERNEL_AREA + k] =
                            self.kernel[(o * cin + c) * KERNEL_AREA + KERNEL_AREA - 1 - k];
                    }
                }
            }
            f
        } else {
            Vec::new()
        };
        let mut xp = Vec::new();
        let mut dxp = vec![T::zero(); if want_input { cin * g.plane } else { 0 }];
        let mut dx = want_input.then(|| Tensor4::zeros(n, cin, h, w));
        for i in 0..n {
            let dzi = dz.item(i);
            for o in 0..cout {
                g.spread_span(
                    &dzi[o * hw..(o + 1) * hw],
                    1,
                    &mut dzp[o * dz_stride + lead..][..g.span],
                );
            }
            if let Some(gr) = grads.as_mut() {
                for (c, plane) in dzi.chunks_exact(hw).enumerate() {
                    gr.bias[c] = gr.bias[c] + plane.iter().copied().sum::<T>();
                }
                g.pad(x.item(i), cin, &mut xp);
                let geo = Geometry {
                    taps: &taps,
                    span: g.span,
                };
                conv::weight_grad(
                    &dzp[lead..],
                    dz_stride,
                    cout,
                    &xp,
                    g.plane,
                    cin,
                    geo,
                    &mut gr.kernel,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let geo = Geometry {
                    taps: &taps,
                    span: g.plane,
                };
                conv::correlate(
                    &dzp, dz_stride, cout, &flipped, None, cin, geo, &mut dxp, g.plane,
                );
                g.unpad(&dxp, cin, dx.item_mut(i));
            }
        }
        (grads, dx)
    }
}

/// Geometry of the zero-padded layout used by the convolution.
///
/// Each `H x W` plane is stored as `(H + 2) x (W + 2)` with a zero border,
/// planes back to back, plus two trailing zeros. The output of tap
/// `(ky, kx)` for all pixels is then the contiguous run of `H * (W + 2)`
/// entries starting `ky * (W + 2) + kx` into each plane; the two extra
/// columns per row are discarded.
struct PadGeom {
    h: usize,
    w: usize,
    pw: usize,
    plane: usize,
    span: usize,
}

impl PadGeom {
    fn new(h: usize, w: usize) -> Self {
        let pw = w + 2;
        Self {
            h,
            w,
            pw,
            plane: (h + 2) * pw,
            span: h * pw,
        }
    }

    fn taps(&self) -> [usize; KERNEL_AREA] {
        std::array::from_fn(|k| (k / 3) * self.pw + k % 3)
    }

    fn pad<T: Scalar>(&self, x: &[T], channels: usize, out: &mut Vec<T>) {
        out.clear();
        out.resize(channels * self.plane + 2, T::zero());
        for c in 0..channels {
            for y in 0..self.h {
                let src = &x[(c * self.h + y) * self.w..][..self.w];
                out[c * self.plane + (y + 1) * self.pw + 1..][..self.w].copy_from_slice(src);
            }
        }
    }

    fn unpad<T: Scalar>(&self, xp: &[T], channels: usize, out: &mut [T]) {
        for c in 0..channels {
            for y in 0..self.h {
                out[(c * self.h + y) * self.w..][..self.w]
                    .copy_from_slice(&xp[c * self.plane + (y + 1) * self.pw + 1..][..self.w]);
            }
        }
    }

    /// Drops the two junk columns of every row of a span-layout result.
    fn crop_span<T: Scalar>(&self, zp: &[T], channels: usize, out: &mut [T]) {
        for c in 0..channels {
            for y in 0..self.h {
                out[(c * self.h + y) * self.w..][..self.w]
                    .copy_from_slice(&zp[c * self.span + y * self.pw..][..self.w]);
            }
        }
    }

    /// Inverse of [`PadGeom::crop_span`], zeroing the junk columns.
    fn spread_span<T: Scalar>(&self, z: &[T], channels: usize, out: &mut [T]) {
        for c in 0..channels {
            for y in 0..self.h {
                let row = &mut out[c * self.span + y * self.pw..][..self.pw];
                row[..self.w].copy_from_slice(&z[(c * self.h + y) * self.w..][..self.w]);
                row[self.w..].fill(T::zero());
            }
        }
    }
}

/// Sum of `f` over `xs` in `f64`, eight independent lanes wide.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut chunks = xs.chunks_exact(8);
    for ch in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += f(Scalar::to_f64(v));
        }
    }
    let tail: f64 = chunks
        .remainder()
        .iter()
        .map(|&v| f(Scalar::to_f64(v)))
        .sum();
    acc.iter().sum::<f64>() + tail
}

fn lane_dot<T: Scalar>(xs: &[T], ys: &[T], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let (mut cx, mut cy) = (xs.chunks_exact(8), ys.chunks_exact(8));
    for (a8, b8) in (&mut cx).zip(&mut cy) {
        for j in 0..8 {
            acc[j] += f(Scalar::to_f64(a8[j]), Scalar::to_f64(b8[j]));
        }
    }
    let tail: f64 = cx
        .remainder()
        .iter()
        .zip(cy.remainder())
        .map(|(&a, &b)| f(Scalar::to_f64(a), Scalar::to_f64(b)))
        .sum();
    acc.iter().sum::<f64>() + tail
}

/// Runs one block and, in train mode, updates its running statistics.
pub fn conv_block<T: Scalar>(
    x: &Tensor4<T>,
    p: &mut ConvBlockParams<T>,
    mode: Mode,
) -> Result<Tensor4<T>> {
    let (out, cache) = p.forward(x.clone(), mode)?;
    p.commit_stats(&cache);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::gradcheck::{check_block, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor4<f64>, p: &ConvBlockParams<f64>) -> Tensor4<f64> {
        let mut out = Tensor4::zeros(x.n, p.out_channels, x.h, x.w);
        for i in 0..x.n {
            for o in 0..p.out_channels {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut s = p.bias[o];
                        for c in 0..p.in_channels {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize
                                    {
                                        continue;
                                    }
                                    let v = x.plane(i, c)[sy as usize * x.w + sx as usize];
                                    s += v * p.kernel[((o * p.in_channels + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out.data[((i * p.out_channels + o) * x.h + y) * x.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn terminal_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ConvBlockParams::<f64>::init(3, 5, true, &mut rng);
        p.bias
            .iter_mut()
            .enumerate()
            .for_each(|(i, b)| *b = i as f64 * 0.1);
        let x = random_tensor(2, 3, 6, 7, 2);
        let (out, _) = p.forward(x.clone(), Mode::Eval).unwrap();
        let want = naive_conv(&x, &p);
        for (a, b) in out.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_keeps_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConvBlockParams::<f32>::init(3, 32, false, &mut rng);
        let x = random_tensor(1, 3, 8, 8, 4).cast::<f32>();
        let (out, _) = p.forward(x, Mode::Train).unwrap();
        assert_eq!(out.shape(), [1, 32, 8, 8]);
    }

    #[test]
    fn zero_terminal_block_gives_zero() {
        let p = ConvBlockParams::<f32>::zeros(4, 3, true);
        let x = random_tensor(2, 4, 5, 5, 5).cast::<f32>();
        let (out, _) = p.forward(x, Mode::Eval).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let p = ConvBlockParams::<f32>::zeros(4, 3, false);
        let x = Tensor4::<f32>::zeros(1, 3, 4, 4);
        assert!(matches!(p.forward(x, Mode::Train), Err(Error::Shape(_))));
    }

    #[test]
    fn train_mode_normalizes_and_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ConvBlockParams::<f64>::init(2, 4, false, &mut rng);
        let x = random_tensor(3, 2, 5, 5, 7);
        let out = conv_block(&x, &mut p, Mode::Train).unwrap();
        for c in 0..4 {
            let vals: Vec<f64> = (0..3).flat_map(|i| out.plane(i, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
            assert!(p.bn_running_mean[c] != 0.0);
            assert!(p.bn_running_var[c] != 1.0);
        }
        // eval mode leaves statistics untouched
        let before = p.clone();
        conv_block(&x, &mut p, Mode::Eval).unwrap();
        assert_eq!(before, p);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (terminal, mode, seed) in [
            (true, Mode::Train, 10),
            (false, Mode::Train, 11),
            (false, Mode::Eval, 12),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ConvBlockParams::<f64>::init(3, 4, terminal, &mut rng);
            if !terminal {
                for c in 0..4 {
                    p.bn_gamma[c] = 0.5 + 0.25 * c as f64;
                    p.bn_beta[c] = 0.1 * c as f64;
                    p.bn_running_mean[c] = 0.05 * c as f64;
                    p.bn_running_var[c] = 0.5 + 0.1 * c as f64;
                }
            }
            let x = random_tensor(2, 3, 4, 4, seed + 100);
            let report = check_block(&p, &x, mode, seed + 200);
            assert!(report.passed(), "{terminal} {mode:?}: {report:?}");
        }
    }
}
