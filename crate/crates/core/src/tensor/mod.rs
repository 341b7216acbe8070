//! Dense tensors with reverse-mode differentiation.
//!
//! All model code is generic over [`Elem`] so the same graph can run in
//! `f32` for training and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
pub mod gradcheck;
mod elem;
pub mod ops;
mod params;
mod tape;
mod value;

pub use elem::{gemm, Elem};
pub use params::{reduce_grads, AdamW, Bindings, GradMap, Param, ParamStore};
pub use tape::{bilinear_taps, concat, nearest_index, resample, Gradients, Tap, Tape, Var};
pub use value::Tensor;

/// Bilinear resize of a plain `[c,h,w]` tensor, outside any tape.
pub fn bilinear_resize<T: Elem>(x: &Tensor<T>, ho: usize, wo: usize) -> crate::Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if ho == 0 || wo == 0 {
        return Err(crate::error::dim_err!("resize target must be at least 1x1"));
    }
    if (h, w) == (ho, wo) {
        return Ok(x.clone());
    }
    let rows = bilinear_taps::<T>(h, ho);
    let cols = bilinear_taps::<T>(w, wo);
    Tensor::new(&[c, ho, wo], resample(x.data(), (c, h, w), &rows, &cols))
}

#[cfg(test)]
mod tests;
