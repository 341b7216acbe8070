//! Binary region masks and the four-slot part mask set.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Elem, Tensor};

/// Inclusive cell rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Rect {
    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    cells: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, cells: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || cells.len() != h * w {
            return Err(dim_err!("mask {h}x{w} with {} cells", cells.len()));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::Data("mask cells must be 0 or 1".into()));
        }
        Ok(Self { h, w, cells })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, cells: vec![0; h * w] }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self { h, w, cells: vec![1; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                cells.push(f(r, c) as u8);
            }
        }
        Self { h, w, cells }
    }

    /// All-zero mask with `rect` set.
    pub fn rect(h: usize, w: usize, rect: Rect) -> Self {
        Self::from_fn(h, w, |r, c| r >= rect.r0 && r <= rect.r1 && c >= rect.c0 && c <= rect.c1)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.w + c] == 1
    }

    pub fn count(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|&c| c == 0)
    }

    pub fn complement(&self) -> Self {
        Self { h: self.h, w: self.w, cells: self.cells.iter().map(|&c| 1 - c).collect() }
    }

    fn zip(&self, other: &Self, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(dim_err!("mask {:?} vs {:?}", self.dims(), other.dims()));
        }
        let cells = self.cells.iter().zip(&other.cells).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { h: self.h, w: self.w, cells })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a | b)
    }

    pub fn intersects(&self, other: &Self) -> Result<bool> {
        Ok(!self.and(other)?.is_empty())
    }

    /// Block downsampling: a cell is set when at least half of its block is.
    pub fn downsample(&self, ho: usize, wo: usize) -> Result<Self> {
        if ho == 0 || wo == 0 || ho > self.h || wo > self.w || !self.h.is_multiple_of(ho) || !self.w.is_multiple_of(wo) {
            return Err(dim_err!("cannot downsample {}x{} mask to {ho}x{wo}", self.h, self.w));
        }
        let (bh, bw) = (self.h / ho, self.w / wo);
        let block = bh * bw;
        Ok(Self::from_fn(ho, wo, |r, c| {
            let mut n = 0;
            for y in r * bh..(r + 1) * bh {
                n += self.cells[y * self.w + c * bw..y * self.w + (c + 1) * bw]
                    .iter()
                    .map(|&v| v as usize)
                    .sum::<usize>();
            }
            2 * n >= block
        }))
    }

    pub fn bbox(&self) -> Result<Rect> {
        let mut rect: Option<Rect> = None;
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) {
                    rect = Some(match rect {
                        None => Rect { r0: r, r1: r, c0: c, c1: c },
                        Some(b) => Rect { r0: b.r0, r1: r, c0: b.c0.min(c), c1: b.c1.max(c) },
                    });
                }
            }
        }
        rect.ok_or_else(|| Error::EmptyRegion("bounding box of an empty mask".into()))
    }

    /// `[1, h, w]` tensor of 0/1 values.
    pub fn to_tensor<T: Elem>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.h, self.w], |i| T::of(self.cells[i] as f64))
    }
}

/// Cellwise complement product of the three part masks.
pub fn remaining_mask(eyes: &Mask, nose: &Mask, mouth: &Mask) -> Result<Mask> {
    check_disjoint(&[("eyes", eyes), ("nose", nose), ("mouth", mouth)])?;
    eyes.complement().and(&nose.complement())?.and(&mouth.complement())
}

fn check_disjoint(parts: &[(&str, &Mask)]) -> Result<()> {
    for (i, (na, a)) in parts.iter().enumerate() {
        for (nb, b) in &parts[i + 1..] {
            if a.intersects(b)? {
                return Err(Error::Overlap(format!("{na} and {nb}")));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Eyes,
    Nose,
    Mouth,
    Remain,
}

impl Part {
    /// Slot order used throughout.
    pub const ALL: [Part; 4] = [Part::Eyes, Part::Nose, Part::Mouth, Part::Remain];
    /// Parts that can be swapped.
    pub const SWAPPABLE: [Part; 3] = [Part::Eyes, Part::Nose, Part::Mouth];

    pub fn name(self) -> &'static str {
        match self {
            Part::Eyes => "eyes",
            Part::Nose => "nose",
            Part::Mouth => "mouth",
            Part::Remain => "remain",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Part {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Part::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown part {s:?}")))
    }
}

/// Eyes, nose, mouth and the remaining region; always a partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartMaskSet {
    masks: [Mask; 4],
}

impl PartMaskSet {
    /// Validates disjointness and derives the remaining region.
    pub fn new(eyes: Mask, nose: Mask, mouth: Mask) -> Result<Self> {
        let remain = remaining_mask(&eyes, &nose, &mouth)?;
        Ok(Self { masks: [eyes, nose, mouth, remain] })
    }

    /// Accepts an explicit remain mask, which must equal the complement product.
    pub fn with_remain(eyes: Mask, nose: Mask, mouth: Mask, remain: Mask) -> Result<Self> {
        let set = Self::new(eyes, nose, mouth)?;
        if set.masks[3] != remain {
            return Err(Error::Data("remain mask is not the complement of the part masks".into()));
        }
        Ok(set)
    }

    pub fn get(&self, part: Part) -> &Mask {
        &self.masks[part.index()]
    }

    pub fn masks(&self) -> &[Mask; 4] {
        &self.masks
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks[0].dims()
    }

    /// Union of eyes, nose and mouth.
    pub fn parts_union(&self) -> Mask {
        self.masks[3].complement()
    }

    /// The remaining region on a coarser grid, taken as the complement
    /// product of the downsampled part masks so the result still tiles.
    /// Parts are majority-voted; a block split evenly between two parts goes
    /// to the earlier one in slot order.
    pub fn downsample(&self, ho: usize, wo: usize) -> Result<Self> {
        let [e, n, m, _] = &self.masks;
        let e = e.downsample(ho, wo)?;
        let n = n.downsample(ho, wo)?.and(&e.complement())?;
        let m = m.downsample(ho, wo)?.and(&e.complement())?.and(&n.complement())?;
        Self::new(e, n, m)
    }
}
