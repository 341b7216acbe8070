//! Condition injection: addition into UNet feature maps and the
//! cross-attention baselines.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::ops::{attention, channel_linear, linear, to_tokens};
use crate::tensor::{Elem, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InjectionMode {
    AddInCA,
    AddInConv,
    CrossAttn,
    MultiCrossAttn,
    CrossAttnPlusAddInCA,
    CrossAttnPlusAddInConv,
    HierarchyAddInCA,
}

impl InjectionMode {
    pub const ALL: [InjectionMode; 7] = [
        InjectionMode::CrossAttn,
        InjectionMode::MultiCrossAttn,
        InjectionMode::CrossAttnPlusAddInCA,
        InjectionMode::CrossAttnPlusAddInConv,
        InjectionMode::AddInConv,
        InjectionMode::HierarchyAddInCA,
        InjectionMode::AddInCA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InjectionMode::AddInCA => "add-in-ca",
            InjectionMode::AddInConv => "add-in-conv",
            InjectionMode::CrossAttn => "cross-attn",
            InjectionMode::MultiCrossAttn => "multi-cross-attn",
            InjectionMode::CrossAttnPlusAddInCA => "cross-attn+add-in-ca",
            InjectionMode::CrossAttnPlusAddInConv => "cross-attn+add-in-conv",
            InjectionMode::HierarchyAddInCA => "hierarchy+add-in-ca",
        }
    }

    /// Addition after the attention output projection.
    pub fn adds_in_attention(self) -> bool {
        matches!(
            self,
            InjectionMode::AddInCA | InjectionMode::CrossAttnPlusAddInCA | InjectionMode::HierarchyAddInCA
        )
    }

    /// Addition between the two convolutions of every residual block.
    pub fn adds_in_conv(self) -> bool {
        matches!(self, InjectionMode::AddInConv | InjectionMode::CrossAttnPlusAddInConv)
    }

    /// Decoupled cross-attention onto the condition tokens.
    pub fn cross_attends(self) -> bool {
        matches!(
            self,
            InjectionMode::CrossAttn | InjectionMode::CrossAttnPlusAddInCA | InjectionMode::CrossAttnPlusAddInConv
        )
    }

    pub fn per_part(self) -> bool {
        self == InjectionMode::MultiCrossAttn
    }

    pub fn hierarchical(self) -> bool {
        self == InjectionMode::HierarchyAddInCA
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown injection mode {s:?}")))
    }
}

/// Resampling used by Inter(·).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

impl FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Interp::Bilinear),
            "nearest" => Ok(Interp::Nearest),
            _ => Err(Error::Config(format!("unknown interpolation {s:?}"))),
        }
    }
}

impl fmt::Display for Interp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interp::Bilinear => "bilinear",
            Interp::Nearest => "nearest",
        })
    }
}

/// Z' = Z + λ · Inter(Linear(C)) with a bias-free `w: [d_C, c_Z]`.
pub fn add_inject<'t, T: Elem>(z: Var<'t, T>, c: Var<'t, T>, w: Var<'t, T>, lambda: f64, interp: Interp) -> Result<Var<'t, T>> {
    if lambda == 0.0 {
        return Ok(z);
    }
    let (_, h, wd) = z.chw()?;
    let projected = channel_linear(c, w, None)?;
    let (_, ch, cw) = projected.chw()?;
    let resized = if (ch, cw) == (h, wd) {
        projected
    } else {
        match interp {
            Interp::Bilinear => projected.resize(h, wd)?,
            Interp::Nearest => projected.resize_nearest(h, wd)?,
        }
    };
    z.add(resized.scale(lambda)?)
}

/// Key/value projections for one cross-attention branch.
#[derive(Clone, Copy)]
pub struct CrossWeights<'t, T: Elem> {
    pub wk: Var<'t, T>,
    pub wv: Var<'t, T>,
}

/// base + λ · Attention(q, ctx·W_k, ctx·W_v), with `ctx` a `[d_C, h, w]` map
/// flattened to tokens.
pub fn cross_attn_inject<'t, T: Elem>(
    q: Var<'t, T>,
    base: Var<'t, T>,
    ctx: Var<'t, T>,
    w: CrossWeights<'t, T>,
    lambda: f64,
) -> Result<Var<'t, T>> {
    if lambda == 0.0 {
        return Ok(base);
    }
    let tokens = to_tokens(ctx)?;
    let cross = attention(q, linear(tokens, w.wk, None)?, linear(tokens, w.wv, None)?)?;
    base.add(cross.scale(lambda)?)
}

/// base + λ · Σᵢ Attention(q, Cᵢ·W_kⁱ, Cᵢ·W_vⁱ) over the four part slots.
pub fn multi_cross_attn_inject<'t, T: Elem>(
    q: Var<'t, T>,
    base: Var<'t, T>,
    parts: &[Var<'t, T>],
    weights: &[CrossWeights<'t, T>],
    lambda: f64,
) -> Result<Var<'t, T>> {
    if parts.len() != 4 || weights.len() != 4 {
        return Err(Error::Contract(format!(
            "multi cross-attention needs 4 part slots, got {} maps and {} weight sets",
            parts.len(),
            weights.len()
        )));
    }
    if lambda == 0.0 {
        return Ok(base);
    }
    let mut acc: Option<Var<'t, T>> = None;
    for (c, w) in parts.iter().zip(weights) {
        let tokens = to_tokens(*c)?;
        let term = attention(q, linear(tokens, w.wk, None)?, linear(tokens, w.wv, None)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    base.add(acc.expect("four slots").scale(lambda)?)
}
