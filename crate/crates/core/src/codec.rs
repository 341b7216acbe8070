//! Lossless space-to-depth latent codec.
//!
//! Latent channel `(ch·f + dy)·f + dx` at cell `(r, c)` holds pixel
//! `(r·f + dy, c·f + dx)` of image channel `ch`, so every latent cell
//! corresponds to exactly one `f×f` pixel block.

use crate::error::{dim_err, Result};
use crate::image::Image;
use crate::tensor::{Elem, Tensor};

pub const DEFAULT_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Codec {
    pub factor: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self { factor: DEFAULT_FACTOR }
    }
}

impl Codec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(dim_err!("codec factor must be positive"));
        }
        Ok(Self { factor })
    }

    pub fn channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn latent_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.factor;
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(dim_err!("image {h}x{w} not divisible by codec factor {f}"));
        }
        Ok((h / f, w / f))
    }

    pub fn encode<T: Elem>(&self, img: &Image) -> Result<Tensor<T>> {
        let (h, w) = img.dims();
        let (lh, lw) = self.latent_dims(h, w)?;
        let f = self.factor;
        let mut out = vec![T::zero(); self.channels() * lh * lw];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let lc = (ch * f + y % f) * f + x % f;
                    out[(lc * lh + y / f) * lw + x / f] = T::of(img.get(ch, y, x) as f64);
                }
            }
        }
        Tensor::new(&[self.channels(), lh, lw], out)
    }

    pub fn decode<T: Elem>(&self, z: &Tensor<T>) -> Result<Image> {
        let (c, lh, lw) = z.chw()?;
        if c != self.channels() {
            return Err(dim_err!("latent has {c} channels, codec expects {}", self.channels()));
        }
        let f = self.factor;
        let (h, w) = (lh * f, lw * f);
        let mut out = Image::filled(h, w, [0.0; 3]);
        let d = z.data();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let lc = (ch * f + y % f) * f + x % f;
                    out.set(ch, y, x, d[(lc * lh + y / f) * lw + x / f].as_f64() as f32);
                }
            }
        }
        Ok(out)
    }
}
