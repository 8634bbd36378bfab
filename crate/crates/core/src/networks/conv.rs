//! Direct 3x3 correlation kernels on flat, zero-padded planes.
//!
//! All kernels address the input as `x[c * x_stride + p + taps[k]]`, so a
//! tap is a constant offset into a plane. The caller arranges the padding.
//! The `f32` kernels are register-blocked over output channels and positions
//! and tiled over positions so the touched part of every plane stays in cache.

use super::tensor::Scalar;

/// Positions per cache tile.
const TILE: usize = 1024;
pub(crate) const TAPS: usize = 9;

/// Tap offsets and the number of output positions per plane.
#[derive(Clone, Copy, Debug)]
pub struct Geometry<'a> {
    pub taps: &'a [usize; TAPS],
    pub span: usize,
}

fn check_input<T>(x: &[T], stride: usize, planes: usize, g: Geometry<'_>) {
    assert!(planes > 0 && g.span > 0);
    let reach = g.span + g.taps.iter().max().unwrap();
    assert!(
        x.len() >= (planes - 1) * stride + reach,
        "correlation input too short"
    );
}

#[allow(clippy::too_many_arguments)]
fn check_correlate<T>(
    x: &[T],
    x_stride: usize,
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: Geometry<'_>,
    out: &[T],
    out_stride: usize,
) {
    check_input(x, x_stride, cin, g);
    assert!(cout > 0);
    assert_eq!(w.len(), cout * cin * TAPS);
    assert!(bias.is_none_or(|b| b.len() == cout));
    assert!(out.len() >= (cout - 1) * out_stride + g.span);
}

#[allow(clippy::too_many_arguments)]
fn check_weight_grad<T>(
    dz: &[T],
    dz_stride: usize,
    cout: usize,
    x: &[T],
    x_stride: usize,
    cin: usize,
    g: Geometry<'_>,
    dw: &[T],
) {
    check_input(x, x_stride, cin, g);
    assert!(cout > 0 && dz.len() >= (cout - 1) * dz_stride + g.span);
    assert_eq!(dw.len(), cout * cin * TAPS);
}

/// `out[o][p] = bias[o] + sum_{c,k} w[o][c][k] * x[c][p + taps[k]]` for
/// `p` in `from..to`, with `w` laid out `cout x cin x 9`.
#[allow(clippy::too_many_arguments)]
fn correlate_range<T: Scalar>(
    x: &[T],
    x_stride: usize,
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    taps: &[usize; TAPS],
    (from, to): (usize, usize),
    out: &mut [T],
    out_stride: usize,
) {
    let cin9 = cin * TAPS;
    for o in 0..cout {
        let row = &mut out[o * out_stride..];
        row[from..to].fill(bias.map_or(T::zero(), |b| b[o]));
        for c in 0..cin {
            let xc = &x[c * x_stride..];
            for (k, &t) in taps.iter().enumerate() {
                let wv = w[o * cin9 + c * TAPS + k];
                for (r, &v) in row[from..to].iter_mut().zip(&xc[from + t..to + t]) {
                    *r = *r + wv * v;
                }
            }
        }
    }
}

/// `dw[o][c][k] += sum_p dz[o][p] * x[c][p + taps[k]]` for `p` in `from..to`.
#[allow(clippy::too_many_arguments)]
fn weight_grad_range<T: Scalar>(
    dz: &[T],
    dz_stride: usize,
    cout: usize,
    x: &[T],
    x_stride: usize,
    cin: usize,
    taps: &[usize; TAPS],
    (from, to): (usize, usize),
    dw: &mut [T],
) {
    for o in 0..cout {
        let d = &dz[o * dz_stride + from..o * dz_stride + to];
        for c in 0..cin {
            let xc = &x[c * x_stride..];
            for (k, &t) in taps.iter().enumerate() {
                let s = d
                    .iter()
                    .zip(&xc[from + t..to + t])
                    .fold(T::zero(), |s, (&a, &b)| s + a * b);
                let idx = (o * cin + c) * TAPS + k;
                dw[idx] = dw[idx] + s;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate<T: Scalar>(
    x: &[T],
    x_stride: usize,
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: Geometry<'_>,
    out: &mut [T],
    out_stride: usize,
) {
    T::correlate_kernel(x, x_stride, cin, w, bias, cout, g, out, out_stride);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad<T: Scalar>(
    dz: &[T],
    dz_stride: usize,
    cout: usize,
    x: &[T],
    x_stride: usize,
    cin: usize,
    g: Geometry<'_>,
    dw: &mut [T],
) {
    T::weight_grad_kernel(dz, dz_stride, cout, x, x_stride, cin, g, dw);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_portable<T: Scalar>(
    x: &[T],
    x_stride: usize,
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: Geometry<'_>,
    out: &mut [T],
    out_stride: usize,
) {
    check_correlate(x, x_stride, cin, w, bias, cout, g, out, out_stride);
    let mut t0 = 0;
    while t0 < g.span {
        let t1 = (t0 + TILE).min(g.span);
        correlate_range(
            x,
            x_stride,
            cin,
            w,
            bias,
            cout,
            g.taps,
            (t0, t1),
            out,
            out_stride,
        );
        t0 = t1;
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad_portable<T: Scalar>(
    dz: &[T],
    dz_stride: usize,
    cout: usize,
    x: &[T],
    x_stride: usize,
    cin: usize,
    g: Geometry<'_>,
    dw: &mut [T],
) {
    check_weight_grad(dz, dz_stride, cout, x, x_stride, cin, g, dw);
    let mut t0 = 0;
    while t0 < g.span {
        let t1 = (t0 + TILE).min(g.span);
        weight_grad_range(dz, dz_stride, cout, x, x_stride, cin, g.taps, (t0, t1), dw);
        t0 = t1;
    }
}

/// Weights regrouped as `[block][c][k][oi]` for blocks of `ob` output
/// channels, zero rows past `cout`.
fn pack_weights(w: &[f32], cout: usize, cin: usize, ob: usize) -> Vec<f32> {
    let cin9 = cin * TAPS;
    let mut wp = vec![0.0; cout.div_ceil(ob) * cin9 * ob];
    for o in 0..cout {
        for ck in 0..cin9 {
            wp[((o / ob) * cin9 + ck) * ob + o % ob] = w[o * cin9 + ck];
        }
    }
    wp
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::*;
    use std::arch::x86_64::*;

    macro_rules! unroll_taps {
        ($k:ident => $body:block) => {{
            {
                const $k: usize = 0;
                $body
            }
            {
                const $k: usize = 1;
                $body
            }
            {
                const $k: usize = 2;
                $body
            }
            {
                const $k: usize = 3;
                $body
            }
            {
                const $k: usize = 4;
                $body
            }
            {
                const $k: usize = 5;
                $body
            }
            {
                const $k: usize = 6;
                $body
            }
            {
                const $k: usize = 7;
                $body
            }
            {
                const $k: usize = 8;
                $body
            }
        }};
    }

    macro_rules! kernels {
        (
            $corr:ident, $wgrad:ident, $feat:literal, $v:ty, $lanes:literal,
            ob = $ob:literal, nv = $nv:literal, wob = $wob:literal,
            $zero:ident, $load:ident, $store:ident, $set1:ident, $fma:ident
        ) => {
            #[allow(clippy::too_many_arguments)]
            #[target_feature(enable = $feat)]
            pub(super) fn $corr(
                x: &[f32],
                x_stride: usize,
                cin: usize,
                w: &[f32],
                bias: Option<&[f32]>,
                cout: usize,
                g: Geometry<'_>,
                out: &mut [f32],
                out_stride: usize,
            ) {
                const OB: usize = $ob;
                const PB: usize = $lanes * $nv;
                const STEP: usize = TILE / PB * PB;
                check_correlate(x, x_stride, cin, w, bias, cout, g, out, out_stride);
                let wp = pack_weights(w, cout, cin, OB);
                let cin9 = cin * TAPS;
                let taps = *g.taps;
                let full = g.span / PB * PB;
                let mut t0 = 0;
                while t0 < full {
                    let t1 = (t0 + STEP).min(full);
                    let mut p = t0;
                    while p < t1 {
                        for b in 0..cout.div_ceil(OB) {
                            let rows = OB.min(cout - b * OB);
                            let wb = &wp[b * cin9 * OB..][..cin9 * OB];
                            let mut acc = [[$zero(); $nv]; OB];
                            if let Some(bias) = bias {
                                for (oi, a) in acc.iter_mut().enumerate().take(rows) {
                                    *a = [$set1(bias[b * OB + oi]); $nv];
                                }
                            }
                            // SAFETY: the checks above guarantee every plane
                            // holds `span` positions past each tap, and
                            // `p + PB <= span`; `wb` holds `cin * 9 * OB`
                            // weights.
                            unsafe {
                                let mut xts: [*const f32; TAPS] =
                                    std::array::from_fn(|k| x.as_ptr().wrapping_add(p + taps[k]));
                                let mut wc = wb.as_ptr();
                                for _ in 0..cin {
                                    for (k, xt) in xts.iter_mut().enumerate() {
                                        let xs: [$v; $nv] = std::array::from_fn(|j| $load(xt.wrapping_add(j * $lanes)));
                                        for (oi, a) in acc.iter_mut().enumerate() {
                                            let wv = $set1(*wc.wrapping_add(k * OB + oi));
                                            for j in 0..$nv {
                                                a[j] = $fma(wv, xs[j], a[j]);
                                            }
                                        }
                                        *xt = xt.wrapping_add(x_stride);
                                    }
                                    wc = wc.wrapping_add(TAPS * OB);
                                }
                                for (oi, a) in acc.iter().enumerate().take(rows) {
                                    let dst = out.as_mut_ptr().add((b * OB + oi) * out_stride + p);
                                    for (j, v) in a.iter().enumerate() {
                                        $store(dst.wrapping_add(j * $lanes), *v);
                                    }
                                }
                            }
                        }
                        p += PB;
                    }
                    t0 = t1;
                }
                if full < g.span {
                    correlate_range(x, x_stride, cin, w, bias, cout, &taps, (full, g.span), out, out_stride);
                }
            }

            #[allow(clippy::too_many_arguments)]
            #[target_feature(enable = $feat)]
            pub(super) fn $wgrad(
                dz: &[f32],
                dz_stride: usize,
                cout: usize,
                x: &[f32],
                x_stride: usize,
                cin: usize,
                g: Geometry<'_>,
                dw: &mut [f32],
            ) {
                const OB: usize = $wob;
                check_weight_grad(dz, dz_stride, cout, x, x_stride, cin, g, dw);
                let taps = *g.taps;
                const _: () = assert!(TILE % $lanes == 0);
                let full = g.span / $lanes * $lanes;
                let mut t0 = 0;
                while t0 < full {
                    let t1 = (t0 + TILE).min(full);
                    for c in 0..cin {
                        let mut ob = 0;
                        while ob < cout {
                            let rows = OB.min(cout - ob);
                            let mut acc = [[$zero(); TAPS]; OB];
                            // SAFETY: as for the correlation, with `p + lanes
                            // <= span`; rows past `cout` reread the last row.
                            unsafe {
                                let xc = x.as_ptr().add(c * x_stride);
                                let xts: [*const f32; TAPS] = std::array::from_fn(|k| xc.add(taps[k]));
                                let dps: [*const f32; OB] =
                                    std::array::from_fn(|oi| dz.as_ptr().add((ob + oi.min(rows - 1)) * dz_stride));
                                let mut p = t0;
                                while p < t1 {
                                    let ds: [$v; OB] = std::array::from_fn(|oi| $load(dps[oi].wrapping_add(p)));
                                    unroll_taps!(K => {
                                        let xk = $load(xts[K].wrapping_add(p));
                                        for (a, &d) in acc.iter_mut().zip(&ds) {
                                            a[K] = $fma(d, xk, a[K]);
                                        }
                                    });
                                    p = p.wrapping_add($lanes);
                                }
                            }
                            let mut lanes = [[[0.0f32; $lanes]; TAPS]; OB];
                            for (a, l) in acc.iter().zip(lanes.iter_mut()) {
                                for (v, lk) in a.iter().zip(l.iter_mut()) {
                                    // SAFETY: `lk` holds one vector.
                                    unsafe { $store(lk.as_mut_ptr(), *v) };
                                }
                            }
                            for (oi, l) in lanes.iter().enumerate().take(rows) {
                                for (k, lk) in l.iter().enumerate() {
                                    dw[((ob + oi) * cin + c) * TAPS + k] += lk.iter().sum::<f32>();
                                }
                            }
                            ob += OB;
                        }
                    }
                    t0 = t1;
                }
                if full < g.span {
                    weight_grad_range(dz, dz_stride, cout, x, x_stride, cin, &taps, (full, g.span), dw);
                }
            }
        };
    }

    kernels!(
        correlate_avx512,
        weight_grad_avx512,
        "avx512f,avx512vl,avx2,fma",
        __m512,
        16,
        ob = 8,
        nv = 3,
        wob = 3,
        _mm512_setzero_ps,
        _mm512_loadu_ps,
        _mm512_storeu_ps,
        _mm512_set1_ps,
        _mm512_fmadd_ps
    );

    kernels!(
        correlate_avx2,
        weight_grad_avx2,
        "avx2,fma",
        __m256,
        8,
        ob = 4,
        nv = 3,
        wob = 1,
        _mm256_setzero_ps,
        _mm256_loadu_ps,
        _mm256_storeu_ps,
        _mm256_set1_ps,
        _mm256_fmadd_ps
    );
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Isa {
    Avx512,
    Avx2,
    Portable,
}

fn isa() -> Isa {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        if has!("avx512f") && has!("avx512vl") && has!("avx2") && has!("fma") {
            return Isa::Avx512;
        }
        if has!("avx2") && has!("fma") {
            return Isa::Avx2;
        }
    }
    Isa::Portable
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_f32(
    x: &[f32],
    x_stride: usize,
    cin: usize,
    w: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    g: Geometry<'_>,
    out: &mut [f32],
    out_stride: usize,
) {
    match isa() {
        // SAFETY: the required CPU features were detected at runtime.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe {
            x86::correlate_avx512(x, x_stride, cin, w, bias, cout, g, out, out_stride)
        },
        // SAFETY: as above.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe {
            x86::correlate_avx2(x, x_stride, cin, w, bias, cout, g, out, out_stride)
        },
        _ => correlate_portable(x, x_stride, cin, w, bias, cout, g, out, out_stride),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad_f32(
    dz: &[f32],
    dz_stride: usize,
    cout: usize,
    x: &[f32],
    x_stride: usize,
    cin: usize,
    g: Geometry<'_>,
    dw: &mut [f32],
) {
    match isa() {
        // SAFETY: the required CPU features were detected at runtime.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe {
            x86::weight_grad_avx512(dz, dz_stride, cout, x, x_stride, cin, g, dw)
        },
        // SAFETY: as above.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { x86::weight_grad_avx2(dz, dz_stride, cout, x, x_stride, cin, g, dw) },
        _ => weight_grad_portable(dz, dz_stride, cout, x, x_stride, cin, g, dw),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    type Corr =
        fn(&[f32], usize, usize, &[f32], Option<&[f32]>, usize, Geometry<'_>, &mut [f32], usize);
    type Wgrad = fn(&[f32], usize, usize, &[f32], usize, usize, Geometry<'_>, &mut [f32]);

    fn kernels() -> Vec<(&'static str, Corr, Wgrad)> {
        let mut k: Vec<(&'static str, Corr, Wgrad)> = vec![(
            "portable",
            correlate_portable::<f32>,
            weight_grad_portable::<f32>,
        )];
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::is_x86_feature_detected as has;
            if has!("avx2") && has!("fma") {
                k.push((
                    "avx2",
                    |a, b, c, d, e, f, g, h, i| unsafe {
                        x86::correlate_avx2(a, b, c, d, e, f, g, h, i)
                    },
                    |a, b, c, d, e, f, g, h| unsafe {
                        x86::weight_grad_avx2(a, b, c, d, e, f, g, h)
                    },
                ));
            }
            if has!("avx512f") && has!("avx512vl") && has!("avx2") && has!("fma") {
                k.push((
                    "avx512",
                    |a, b, c, d, e, f, g, h, i| unsafe {
                        x86::correlate_avx512(a, b, c, d, e, f, g, h, i)
                    },
                    |a, b, c, d, e, f, g, h| unsafe {
                        x86::weight_grad_avx512(a, b, c, d, e, f, g, h)
                    },
                ));
            }
        }
        k
    }

    #[test]
    fn kernels_match_naive_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let taps = [0, 1, 2, 40, 41, 42, 80, 81, 82];
        for (cin, cout, span) in [
            (3, 32, 1500),
            (33, 32, 2100),
            (7, 3, 1030),
            (5, 1, 77),
            (32, 5, 2049),
            (2, 9, 5),
        ] {
            let xs = span + 90;
            let x = rand_vec(cin * xs, &mut rng);
            let w = rand_vec(cout * cin * 9, &mut rng);
            let bias = rand_vec(cout, &mut rng);
            let dz = rand_vec(cout * span, &mut rng);
            let g = Geometry { taps: &taps, span };

            let mut want_out = vec![0.0f64; cout * span];
            let mut want_dw = vec![0.0f64; cout * cin * 9];
            for o in 0..cout {
                for p in 0..span {
                    let mut s = bias[o] as f64;
                    for c in 0..cin {
                        for k in 0..9 {
                            let xv = x[c * xs + p + taps[k]] as f64;
                            s += w[(o * cin + c) * 9 + k] as f64 * xv;
                            want_dw[(o * cin + c) * 9 + k] += dz[o * span + p] as f64 * xv;
                        }
                    }
                    want_out[o * span + p] = s;
                }
            }

            for (name, corr, wgrad) in kernels() {
                let mut out = vec![0.0f32; cout * span];
                corr(&x, xs, cin, &w, Some(&bias), cout, g, &mut out, span);
                for (a, b) in out.iter().zip(&want_out) {
                    assert!(
                        (*a as f64 - b).abs() < 1e-3,
                        "{name} {cin} {cout} {span}: {a} vs {b}"
                    );
                }
                let mut dw = vec![0.0f32; cout * cin * 9];
                wgrad(&dz, span, cout, &x, xs, cin, g, &mut dw);
                for (a, b) in dw.iter().zip(&want_dw) {
                    assert!(
                        (*a as f64 - b).abs() < 1e-3 * (1.0 + b.abs()),
                        "{name}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "too short")]
    fn short_input_is_rejected() {
        let taps = [0, 1, 2, 10, 11, 12, 20, 21, 22];
        let x = vec![0.0f32; 50];
        let mut out = vec![0.0f32; 40];
        correlate(
            &x,
            40,
            1,
            &[0.0; 9],
            None,
            1,
            Geometry {
                taps: &taps,
                span: 40,
            },
            &mut out,
            40,
        );
    }
}
