//! Encoder variants, decoder and critic assembled from convolutional blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{BlockCache, BlockGrads, ConvBlockParams, Mode};
use super::tensor::{concat_depth, split_depth, Scalar, Tensor4};
use crate::error::{Error, Result};

/// Hidden width of every block.
pub const WIDTH: usize = 32;

/// Encoder connectivity pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Basic,
    Residual,
    Dense,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(Variant::Basic),
            "residual" => Ok(Variant::Residual),
            "dense" => Ok(Variant::Dense),
            other => Err(Error::Argument(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Basic => "basic",
            Variant::Residual => "residual",
            Variant::Dense => "dense",
        })
    }
}

/// `(in, out, terminal)` for each block of a network.
pub type Layout = Vec<(usize, usize, bool)>;

pub fn encoder_layout(variant: Variant, depth: usize) -> Layout {
    let head = vec![(3, WIDTH, false), (WIDTH + depth, WIDTH, false)];
    let tail = match variant {
        Variant::Basic | Variant::Residual => vec![(WIDTH, WIDTH, false), (WIDTH, 3, true)],
        Variant::Dense => vec![
            (2 * WIDTH + depth, WIDTH, false),
            (3 * WIDTH + depth, 3, true),
        ],
    };
    head.into_iter().chain(tail).collect()
}

pub fn decoder_layout(depth: usize) -> Layout {
    vec![
        (3, WIDTH, false),
        (WIDTH, WIDTH, false),
        (2 * WIDTH, WIDTH, false),
        (3 * WIDTH, depth, true),
    ]
}

pub fn critic_layout() -> Layout {
    vec![
        (3, WIDTH, false),
        (WIDTH, WIDTH, false),
        (WIDTH, WIDTH, false),
        (WIDTH, 1, true),
    ]
}

fn build<T: Scalar, R: Rng>(layout: &Layout, rng: &mut R) -> Vec<ConvBlockParams<T>> {
    layout
        .iter()
        .map(|&(i, o, t)| ConvBlockParams::init(i, o, t, rng))
        .collect()
}

fn check_layout<T: Scalar>(
    blocks: &[ConvBlockParams<T>],
    layout: &Layout,
    what: &str,
) -> Result<()> {
    if blocks.len() != layout.len() {
        return Err(Error::Shape(format!(
            "{what} needs {} blocks, got {}",
            layout.len(),
            blocks.len()
        )));
    }
    for (i, (b, &(cin, cout, term))) in blocks.iter().zip(layout).enumerate() {
        if (b.in_channels, b.out_channels, b.terminal) != (cin, cout, term) {
            return Err(Error::Shape(format!(
                "{what} block {i} is {}->{} (terminal {}), expected {cin}->{cout} (terminal {term})",
                b.in_channels, b.out_channels, b.terminal
            )));
        }
        b.validate()?;
    }
    Ok(())
}

/// Gradients for every block of one network, in block order.
pub type NetGrads<T> = Vec<BlockGrads<T>>;

/// Saved activations of one network forward pass.
#[derive(Clone, Debug)]
pub struct NetCache<T> {
    blocks: Vec<BlockCache<T>>,
    h: usize,
    w: usize,
}

fn commit<T: Scalar>(blocks: &mut [ConvBlockParams<T>], cache: &NetCache<T>) {
    for (b, c) in blocks.iter_mut().zip(&cache.blocks) {
        b.commit_stats(c);
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor4<T>, other: &Tensor4<T>) {
    acc.add_assign(other);
}

/// The encoder: cover image and message in, stego image out.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T = f32> {
    pub variant: Variant,
    pub data_depth: usize,
    pub blocks: Vec<ConvBlockParams<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng>(variant: Variant, data_depth: usize, rng: &mut R) -> Self {
        Self {
            variant,
            data_depth,
            blocks: build(&encoder_layout(variant, data_depth), rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_layout(
            &self.blocks,
            &encoder_layout(self.variant, self.data_depth),
            "encoder",
        )
    }

    pub fn forward(
        &self,
        cover: &Tensor4<T>,
        msg: &Tensor4<T>,
        mode: Mode,
    ) -> Result<(Tensor4<T>, NetCache<T>)> {
        if cover.c != 3 {
            return Err(Error::Shape(format!(
                "cover must have 3 channels, got {}",
                cover.c
            )));
        }
        if msg.c != self.data_depth || (msg.n, msg.h, msg.w) != (cover.n, cover.h, cover.w) {
            return Err(Error::Shape(format!(
                "message {:?} does not match cover {:?} at depth {}",
                msg.shape(),
                cover.shape(),
                self.data_depth
            )));
        }
        let b = &self.blocks;
        let (a, ca) = b[0].forward(cover.clone(), mode)?;
        let (bt, cb) = b[1].forward(concat_depth(&[&a, msg])?, mode)?;
        let (out, c2, c3) = match self.variant {
            Variant::Basic | Variant::Residual => {
                let (h, c2) = b[2].forward(bt, mode)?;
                let (mut e, c3) = b[3].forward(h, mode)?;
                if self.variant == Variant::Residual {
                    add_into(&mut e, cover);
                }
                (e, c2, c3)
            }
            Variant::Dense => {
                let (c, c2) = b[2].forward(concat_depth(&[&a, &bt, msg])?, mode)?;
                let (mut d, c3) = b[3].forward(concat_depth(&[&a, &bt, &c, msg])?, mode)?;
                add_into(&mut d, cover);
                (d, c2, c3)
            }
        };
        let (h, w) = (cover.h, cover.w);
        Ok((
            out,
            NetCache {
                blocks: vec![ca, cb, c2, c3],
                h,
                w,
            },
        ))
    }

    /// Parameter gradients for an upstream gradient on the stego output.
    pub fn backward(&self, cache: &NetCache<T>, d_out: &Tensor4<T>) -> NetGrads<T> {
        let b = &self.blocks;
        let c = &cache.blocks;
        let dd = self.data_depth;
        let (g3, d3) = b[3].backward(&c[3], d_out, true, true);
        let d3 = d3.unwrap();
        let (g2, da, db) = match self.variant {
            Variant::Basic | Variant::Residual => {
                let (g2, d2) = b[2].backward(&c[2], &d3, true, true);
                let db = d2.unwrap();
                let da = Tensor4::zeros(db.n, WIDTH, db.h, db.w);
                (g2, da, db)
            }
            Variant::Dense => {
                let parts = split_depth(&d3, &[WIDTH, WIDTH, WIDTH, dd]);
                let [mut da, mut db, dc, _]: [Tensor4<T>; 4] = parts.try_into().unwrap();
                let (g2, d2) = b[2].backward(&c[2], &dc, true, true);
                let parts = split_depth(&d2.unwrap(), &[WIDTH, WIDTH, dd]);
                add_into(&mut da, &parts[0]);
                add_into(&mut db, &parts[1]);
                (g2, da, db)
            }
        };
        let (g1, d1) = b[1].backward(&c[1], &db, true, true);
        let mut da = da;
        add_into(&mut da, &split_depth(&d1.unwrap(), &[WIDTH, dd])[0]);
        let (g0, _) = b[0].backward(&c[0], &da, true, false);
        vec![g0.unwrap(), g1.unwrap(), g2.unwrap(), g3.unwrap()]
    }

    pub fn commit_stats(&mut self, cache: &NetCache<T>) {
        commit(&mut self.blocks, cache);
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            variant: self.variant,
            data_depth: self.data_depth,
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
        }
    }
}

/// The decoder: stego image in, `D` logit planes out.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T = f32> {
    pub data_depth: usize,
    pub blocks: Vec<ConvBlockParams<T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng>(data_depth: usize, rng: &mut R) -> Self {
        Self {
            data_depth,
            blocks: build(&decoder_layout(data_depth), rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_layout(&self.blocks, &decoder_layout(self.data_depth), "decoder")
    }

    pub fn forward(&self, stego: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, NetCache<T>)> {
        if stego.c != 3 {
            return Err(Error::Shape(format!(
                "stego must have 3 channels, got {}",
                stego.c
            )));
        }
        let b = &self.blocks;
        let (a, ca) = b[0].forward(stego.clone(), mode)?;
        let (bt, cb) = b[1].forward(a.clone(), mode)?;
        let (c, cc) = b[2].forward(concat_depth(&[&a, &bt])?, mode)?;
        let (out, cd) = b[3].forward(concat_depth(&[&a, &bt, &c])?, mode)?;
        Ok((
            out,
            NetCache {
                blocks: vec![ca, cb, cc, cd],
                h: stego.h,
                w: stego.w,
            },
        ))
    }

    /// Parameter gradients, plus the gradient on the stego input when asked.
    pub fn backward(
        &self,
        cache: &NetCache<T>,
        d_logits: &Tensor4<T>,
        want_input: bool,
    ) -> (NetGrads<T>, Option<Tensor4<T>>) {
        let b = &self.blocks;
        let c = &cache.blocks;
        let (g3, d3) = b[3].backward(&c[3], d_logits, true, true);
        let [mut da, mut db, dc]: [Tensor4<T>; 3] =
            split_depth(&d3.unwrap(), &[WIDTH, WIDTH, WIDTH])
                .try_into()
                .unwrap();
        let (g2, d2) = b[2].backward(&c[2], &dc, true, true);
        let parts = split_depth(&d2.unwrap(), &[WIDTH, WIDTH]);
        add_into(&mut da, &parts[0]);
        add_into(&mut db, &parts[1]);
        let (g1, d1) = b[1].backward(&c[1], &db, true, true);
        add_into(&mut da, &d1.unwrap());
        let (g0, d0) = b[0].backward(&c[0], &da, true, want_input);
        (vec![g0.unwrap(), g1.unwrap(), g2.unwrap(), g3.unwrap()], d0)
    }

    pub fn commit_stats(&mut self, cache: &NetCache<T>) {
        commit(&mut self.blocks, cache);
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            data_depth: self.data_depth,
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
        }
    }
}

/// The critic: one realness score per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic<T = f32> {
    pub blocks: Vec<ConvBlockParams<T>>,
}

impl<T: Scalar> Critic<T> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        Self {
            blocks: build(&critic_layout(), rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_layout(&self.blocks, &critic_layout(), "critic")
    }

    pub fn forward(&self, img: &Tensor4<T>, mode: Mode) -> Result<(Vec<T>, NetCache<T>)> {
        if img.c != 3 {
            return Err(Error::Shape(format!(
                "critic input must have 3 channels, got {}",
                img.c
            )));
        }
        let mut caches = Vec::with_capacity(4);
        let mut x = img.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(x, mode)?;
            caches.push(c);
            x = y;
        }
        let scores = super::tensor::adaptive_mean_pool(&x);
        Ok((
            scores,
            NetCache {
                blocks: caches,
                h: img.h,
                w: img.w,
            },
        ))
    }

    /// Backpropagates `d_scores` (one entry per image). Parameter gradients
    /// and the input gradient are each computed only on request.
    pub fn backward(
        &self,
        cache: &NetCache<T>,
        d_scores: &[T],
        want_params: bool,
        want_input: bool,
    ) -> (Option<NetGrads<T>>, Option<Tensor4<T>>) {
        let n = d_scores.len();
        let inv = T::one() / T::from_f64((cache.h * cache.w) as f64);
        let mut d = Tensor4::zeros(n, 1, cache.h, cache.w);
        for (i, &g) in d_scores.iter().enumerate() {
            d.item_mut(i).fill(g * inv);
        }
        let mut grads = Vec::with_capacity(4);
        for (idx, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let need_dx = idx > 0 || want_input;
            if !want_params && !need_dx {
                break;
            }
            let (g, dx) = b.backward(c, &d, want_params, need_dx);
            if let Some(g) = g {
                grads.push(g);
            }
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
        grads.reverse();
        let grads = want_params.then_some(grads);
        let dx = if want_input { Some(d) } else { None };
        (grads, dx)
    }

    pub fn commit_stats(&mut self, cache: &NetCache<T>) {
        commit(&mut self.blocks, cache);
    }

    pub fn cast<U: Scalar>(&self) -> Critic<U> {
        Critic {
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
        }
    }
}
