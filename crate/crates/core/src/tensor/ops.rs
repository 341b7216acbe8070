//! Layers built from tape primitives.

use super::{Elem, Var};
use crate::error::{dim_err, Error, Result};

/// `y = x·w + b` for `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
pub fn linear<'t, T: Elem>(x: Var<'t, T>, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add_row_bias(b),
        None => Ok(y),
    }
}

/// Applies `w: [d_in, d_out]` along the channel axis of `x: [d_in, h, w]`.
pub fn channel_linear<'t, T: Elem>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let (c, h, wd) = x.chw()?;
    let ws = w.shape();
    if ws.len() != 2 || ws[0] != c {
        return Err(dim_err!("channel weight {ws:?} for {c} input channels"));
    }
    let flat = x.reshape(&[c, h * wd])?;
    let y = w.matmul_t(flat, true, false)?.reshape(&[ws[1], h, wd])?;
    match b {
        Some(b) => y.add_channel_bias(b),
        None => Ok(y),
    }
}

/// Single-head scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
pub fn attention<'t, T: Elem>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(dim_err!("attention operands must be rank 2"));
    }
    if ks[0] == 0 || vs[0] == 0 {
        return Err(Error::Contract("attention over an empty context".into()));
    }
    if qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(dim_err!("attention shapes q{qs:?} k{ks:?} v{vs:?}"));
    }
    let scores = q.matmul_t(k, false, true)?.scale(1.0 / (qs[1] as f64).sqrt())?;
    scores.softmax_rows()?.matmul(v)
}

/// `[c, h, w]` → `[h·w, c]` token matrix.
pub fn to_tokens<T: Elem>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    let (c, h, w) = x.chw()?;
    x.reshape(&[c, h * w])?.transpose()
}

/// `[h·w, c]` token matrix → `[c, h, w]`.
pub fn from_tokens<T: Elem>(x: Var<'_, T>, h: usize, w: usize) -> Result<Var<'_, T>> {
    let s = x.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(dim_err!("token matrix {s:?} does not cover {h}x{w}"));
    }
    x.transpose()?.reshape(&[s[1], h, w])
}

pub fn mse<'t, T: Elem>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    a.sub(b)?.square()?.mean()
}
