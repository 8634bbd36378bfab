use num_traits::Float;

use super::conv::{self, Geometry};
use crate::error::{Error, Result};

/// Floating point element type of the network engine. `f32` is used for
/// training and inference; `f64` backs the finite-difference gradient checks.
pub trait Scalar:
    Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    fn correlate_kernel(
        x: &[Self],
        x_stride: usize,
        cin: usize,
        w: &[Self],
        bias: Option<&[Self]>,
        cout: usize,
        g: Geometry<'_>,
        out: &mut [Self],
        out_stride: usize,
    ) {
        conv::correlate_portable(x, x_stride, cin, w, bias, cout, g, out, out_stride)
    }

    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    fn weight_grad_kernel(
        dz: &[Self],
        dz_stride: usize,
        cout: usize,
        x: &[Self],
        x_stride: usize,
        cin: usize,
        g: Geometry<'_>,
        dw: &mut [Self],
    ) {
        conv::weight_grad_portable(dz, dz_stride, cout, x, x_stride, cin, g, dw)
    }

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    fn to_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).unwrap()
    }
}

macro_rules! impl_scalar {
    ($t:ty $(, $extra:item)*) => {
        impl Scalar for $t {
            $($extra)*
        }
    };
}

impl_scalar!(
    f32,
    fn correlate_kernel(
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
        conv::correlate_f32(x, x_stride, cin, w, bias, cout, g, out, out_stride)
    },
    fn weight_grad_kernel(
        dz: &[f32],
        dz_stride: usize,
        cout: usize,
        x: &[f32],
        x_stride: usize,
        cin: usize,
        g: Geometry<'_>,
        dw: &mut [f32],
    ) {
        conv::weight_grad_f32(dz, dz_stride, cout, x, x_stride, cin, g, dw)
    }
);
impl_scalar!(f64);

/// Dense `N x C x H x W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "{n}x{c}x{h}x{w} tensor needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        if n == 0 {
            return Err(Error::Shape("batch must hold at least one item".into()));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    /// Slice holding every channel of batch item `i`.
    pub fn item(&self, i: usize) -> &[T] {
        let len = self.c * self.plane_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.c * self.plane_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn plane(&self, i: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (i * self.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch items `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.c * self.plane_len());
        for &i in idx {
            data.extend_from_slice(self.item(i));
        }
        Self {
            n: idx.len(),
            data,
            ..*self
        }
    }

    /// Stacks batches with matching `C x H x W`.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.c, p.h, p.w) != (first.c, first.h, first.w) {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            n += p.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            n,
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        })
    }
}

/// Concatenation along the channel axis, preserving input order.
pub fn concat_depth<T: Scalar>(xs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let (n, h, w) = (first.n, first.h, first.w);
    for x in xs {
        if (x.n, x.h, x.w) != (n, h, w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                x.shape(),
                first.shape()
            )));
        }
    }
    let c: usize = xs.iter().map(|x| x.c).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for x in xs {
            data.extend_from_slice(x.item(i));
        }
    }
    Ok(Tensor4 { n, c, h, w, data })
}

/// Splits a channel-concatenated tensor back into pieces of the given depths.
pub fn split_depth<T: Scalar>(x: &Tensor4<T>, depths: &[usize]) -> Vec<Tensor4<T>> {
    assert_eq!(
        depths.iter().sum::<usize>(),
        x.c,
        "split depths must cover the input"
    );
    let p = x.plane_len();
    let mut out: Vec<Tensor4<T>> = depths
        .iter()
        .map(|&c| Tensor4 {
            n: x.n,
            c,
            h: x.h,
            w: x.w,
            data: Vec::with_capacity(x.n * c * p),
        })
        .collect();
    for i in 0..x.n {
        let mut offset = 0;
        let item = x.item(i);
        for (part, &c) in out.iter_mut().zip(depths) {
            part.data
                .extend_from_slice(&item[offset * p..(offset + c) * p]);
            offset += c;
        }
    }
    out
}

/// Per image, per channel spatial mean: `N x C`, row-major.
pub fn adaptive_mean_pool<T: Scalar>(x: &Tensor4<T>) -> Vec<T> {
    let p = T::from_f64(x.plane_len() as f64);
    (0..x.n)
        .flat_map(|i| (0..x.c).map(move |c| (i, c)))
        .map(|(i, c)| x.plane(i, c).iter().copied().sum::<T>() / p)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    #[test]
    fn concat_counts_and_order() {
        let a = random(2, 32, 4, 4, 1);
        let m = random(2, 3, 4, 4, 2);
        let cat = concat_depth(&[&a, &m]).unwrap();
        assert_eq!(cat.c, 35);
        assert_eq!(cat.plane(1, 32), m.plane(1, 0));
        assert_eq!(cat.plane(1, 5), a.plane(1, 5));
        let b = random(2, 32, 4, 4, 3);
        assert_eq!(concat_depth(&[&a, &b, &m]).unwrap().c, 64 + 3);
        assert_eq!(concat_depth(&[&a]).unwrap(), a);
        let parts = split_depth(&cat, &[32, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], m);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = random(1, 2, 4, 4, 1);
        let b = random(1, 2, 4, 5, 2);
        assert!(matches!(concat_depth(&[&a, &b]), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_pool_cases() {
        let c = Tensor4::from_vec(1, 2, 3, 3, vec![0.75; 18]).unwrap();
        assert_eq!(adaptive_mean_pool(&c), vec![0.75, 0.75]);
        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let t = Tensor4::from_vec(1, 1, 4, 4, checker).unwrap();
        assert_eq!(adaptive_mean_pool(&t), vec![0.5]);
        let r = random(3, 4, 5, 6, 9);
        let pooled = adaptive_mean_pool(&r);
        for i in 0..3 {
            for c in 0..4 {
                let mut s = 0.0;
                for y in 0..5 {
                    for x in 0..6 {
                        s += r.data[((i * 4 + c) * 5 + y) * 6 + x];
                    }
                }
                assert!((pooled[i * 4 + c] - s / 30.0).abs() < 1e-6);
            }
        }
    }
}
