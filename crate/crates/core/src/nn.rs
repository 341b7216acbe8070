//! Parameter initialization and the small layers shared by the networks.

use rand::Rng;

use crate::error::Result;
use crate::mask::Mask;
use crate::tensor::ops::channel_linear;
use crate::tensor::{Bindings, Elem, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with std `1/√fan_in`.
    Fan,
    Zero,
}

pub fn init_conv<T: Elem>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    init: Init,
    rng: &mut impl Rng,
) -> Result<()> {
    let shape = [cout, cin, k, k];
    match init {
        Init::Fan => store.insert_normal(&format!("{name}.w"), &shape, 1.0 / ((cin * k * k) as f64).sqrt(), rng)?,
        Init::Zero => store.insert_const(&format!("{name}.w"), &shape, 0.0)?,
    }
    store.insert_const(&format!("{name}.b"), &[cout], 0.0)
}

/// Channel-axis linear map `[d_in, d_out]`, optionally with bias.
pub fn init_linear<T: Elem>(
    store: &mut ParamStore<T>,
    name: &str,
    din: usize,
    dout: usize,
    bias: bool,
    init: Init,
    rng: &mut impl Rng,
) -> Result<()> {
    match init {
        Init::Fan => store.insert_normal(&format!("{name}.w"), &[din, dout], 1.0 / (din as f64).sqrt(), rng)?,
        Init::Zero => store.insert_const(&format!("{name}.w"), &[din, dout], 0.0)?,
    }
    if bias {
        store.insert_const(&format!("{name}.b"), &[dout], 0.0)?;
    }
    Ok(())
}

pub fn init_norm<T: Elem>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<()> {
    store.insert_const(&format!("{name}.g"), &[c], 1.0)?;
    store.insert_const(&format!("{name}.b"), &[c], 0.0)
}

pub fn conv<'t, T: Elem>(b: &Bindings<'t, '_, T>, name: &str, x: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
    x.conv2d(b.get(&format!("{name}.w"))?, Some(b.get(&format!("{name}.b"))?), stride, pad)
}

pub fn chan_linear<'t, T: Elem>(b: &Bindings<'t, '_, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let bias_name = format!("{name}.b");
    let bias = if b.has(&bias_name) { Some(b.get(&bias_name)?) } else { None };
    channel_linear(x, b.get(&format!("{name}.w"))?, bias)
}

pub fn norm<'t, T: Elem>(b: &Bindings<'t, '_, T>, name: &str, x: Var<'t, T>, groups: usize) -> Result<Var<'t, T>> {
    x.group_norm(b.get(&format!("{name}.g"))?, b.get(&format!("{name}.b"))?, groups, 1e-5)
}

/// Largest group count ≤ `want` dividing `c`.
pub fn groups_for(c: usize, want: usize) -> usize {
    (1..=want.min(c)).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

/// A mask repeated over `d` channels, as a `[d, h, w]` tensor.
pub fn mask_channels<T: Elem>(m: &Mask, d: usize) -> Tensor<T> {
    let n = m.cells().len();
    Tensor::from_fn(&[d, m.height(), m.width()], |i| T::of(m.cells()[i % n] as f64))
}

/// `x ⊙ m` with `m` broadcast over the channels of `x`.
pub fn apply_mask<'t, T: Elem>(x: Var<'t, T>, m: &Mask) -> Result<Var<'t, T>> {
    let (c, _, _) = x.chw()?;
    x.mul(x.tape().constant(mask_channels(m, c)))
}
