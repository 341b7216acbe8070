//! Mask-based fusion: transplanting source part features into the target's
//! slots and aggregating the slots into the condition map.

use rand::Rng;

use crate::encoder::PartFeatures;
use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::mask::{Mask, Part};
use crate::nn::{self, Init};
use crate::tensor::{Bindings, Elem, ParamStore, Var};

/// A source image and its mask for one part.
#[derive(Clone, Debug, PartialEq)]
pub struct PartSource {
    pub image: Image,
    pub mask: Mask,
}

/// Which parts to replace and from where. The remain slot has no entry and
/// so can never be replaced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SwapSpec {
    pub eyes: Option<PartSource>,
    pub nose: Option<PartSource>,
    pub mouth: Option<PartSource>,
}

impl SwapSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn get(&self, part: Part) -> Option<&PartSource> {
        match part {
            Part::Eyes => self.eyes.as_ref(),
            Part::Nose => self.nose.as_ref(),
            Part::Mouth => self.mouth.as_ref(),
            Part::Remain => None,
        }
    }

    pub fn set(&mut self, part: Part, src: PartSource) -> Result<()> {
        match part {
            Part::Eyes => self.eyes = Some(src),
            Part::Nose => self.nose = Some(src),
            Part::Mouth => self.mouth = Some(src),
            Part::Remain => return Err(Error::Contract("the remain slot cannot be replaced".into())),
        }
        Ok(())
    }

    pub fn replaced(&self) -> Vec<Part> {
        Part::SWAPPABLE.into_iter().filter(|&p| self.get(p).is_some()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for part in self.replaced() {
            let src = self.get(part).expect("replaced part");
            src.image.check_mask(&src.mask)?;
            if src.mask.is_empty() {
                return Err(Error::EmptyRegion(format!("source mask for {part} is empty")));
            }
        }
        Ok(())
    }
}

/// Encoded source features for one replaced slot, on the feature grid.
#[derive(Clone, Copy)]
pub struct SourceFeature<'t, 'm, T: Elem> {
    pub feat: Var<'t, T>,
    pub mask: &'m Mask,
}

/// Resizes the bbox of `m_src` in `f_src` onto the bbox of `m_tgt`, zero
/// elsewhere, then masks by `m_tgt`.
pub fn region_resize_g<'t, T: Elem>(f_src: Var<'t, T>, m_src: &Mask, m_tgt: &Mask) -> Result<Var<'t, T>> {
    let (_, h, w) = f_src.chw()?;
    if m_src.dims() != (h, w) {
        return Err(dim_err!("source mask {:?} on a {h}x{w} feature grid", m_src.dims()));
    }
    let (th, tw) = m_tgt.dims();
    let bs = m_src.bbox()?;
    let bt = m_tgt.bbox()?;
    let crop = f_src.crop(bs.r0, bs.c0, bs.height(), bs.width())?;
    let fitted = crop.resize(bt.height(), bt.width())?;
    nn::apply_mask(fitted.place(th, tw, bt.r0, bt.c0)?, m_tgt)
}

/// Replaces the slots that have a source: f' = f ⊙ M̄ + G(f_s ⊙ M_s, M_s → M).
/// Other slots are returned unchanged.
pub fn transplant<'t, T: Elem>(
    target: &PartFeatures<'t, T>,
    sources: &[Option<SourceFeature<'t, '_, T>>; 3],
) -> Result<PartFeatures<'t, T>> {
    let tshape = target.feats[0].shape();
    let mut feats = target.feats;
    for (k, src) in sources.iter().enumerate() {
        let Some(src) = src else { continue };
        if src.feat.shape() != tshape {
            return Err(dim_err!("source features {:?} vs target {:?}", src.feat.shape(), tshape));
        }
        let m_t = target.masks.masks()[k].clone();
        let kept = nn::apply_mask(feats[k], &m_t.complement())?;
        let moved = region_resize_g(nn::apply_mask(src.feat, src.mask)?, src.mask, &m_t)?;
        feats[k] = kept.add(moved)?;
    }
    Ok(PartFeatures { feats, masks: target.masks.clone() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Width of the condition map.
    pub dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { dim: 32 }
    }
}

pub fn init<T: Elem>(store: &mut ParamStore<T>, d_in: usize, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<()> {
    nn::init_linear(store, "fuse.fc1", d_in, 2 * d_in, true, Init::Fan, rng)?;
    nn::init_linear(store, "fuse.fc2", 2 * d_in, cfg.dim, true, Init::Fan, rng)
}

/// Per-cell MLP along the channel axis.
pub fn mlp<'t, T: Elem>(b: &Bindings<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let h = nn::chan_linear(b, "fuse.fc1", x)?.silu()?;
    nn::chan_linear(b, "fuse.fc2", h)
}

/// Σᵢ fᵢ ⊙ Mᵢ over the four slots.
pub fn mosaic<'t, T: Elem>(fused: &PartFeatures<'t, T>) -> Result<Var<'t, T>> {
    let mut acc: Option<Var<'t, T>> = None;
    for (f, m) in fused.feats.iter().zip(fused.masks.masks()) {
        let term = nn::apply_mask(*f, m)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc.expect("four slots"))
}

/// C = MLP(Σᵢ fᵢ ⊙ Mᵢ).
pub fn aggregate<'t, T: Elem>(b: &Bindings<'t, '_, T>, fused: &PartFeatures<'t, T>) -> Result<Var<'t, T>> {
    mlp(b, mosaic(fused)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{PartMaskSet, Rect};
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rect(r0: usize, r1: usize, c0: usize, c1: usize) -> Rect {
        Rect { r0, r1, c0, c1 }
    }

    #[test]
    fn g_same_mask_is_masking() {
        let tape = Tape::<f64>::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::from_fn(&[3, 6, 6], |_| rng.gen());
        let m = Mask::from_fn(6, 6, |r, c| (1..4).contains(&r) && (2..5).contains(&c) && r + c != 5);
        let out = region_resize_g(tape.constant(f.clone()), &m, &m).unwrap().value();
        for (i, v) in out.data().iter().enumerate() {
            let want = if m.cells()[i % 36] == 1 { f.data()[i] } else { 0.0 };
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn g_constant_region_examples() {
        let tape = Tape::<f64>::inference();
        let ms = Mask::rect(8, 8, rect(0, 1, 0, 1));
        let mt = Mask::rect(8, 8, rect(4, 6, 3, 5));
        let f = Tensor::from_fn(&[1, 8, 8], |i| if ms.cells()[i] == 1 { 5.0 } else { -1.0 });
        let out = region_resize_g(tape.constant(f), &ms, &mt).unwrap().value();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, if mt.cells()[i] == 1 { 5.0 } else { 0.0 });
        }
        let zero = region_resize_g(tape.constant(Tensor::zeros(&[2, 8, 8])), &ms, &mt).unwrap().value();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            region_resize_g(tape.constant(Tensor::zeros(&[1, 8, 8])), &Mask::zeros(8, 8), &mt),
            Err(Error::EmptyRegion(_))
        ));
    }

    fn features<'t>(tape: &'t Tape<f64>, vals: [f64; 4], masks: PartMaskSet) -> PartFeatures<'t, f64> {
        let (h, w) = masks.dims();
        PartFeatures { feats: vals.map(|v| tape.constant(Tensor::full(&[1, h, w], v))), masks }
    }

    #[test]
    fn transplant_examples() {
        let tape = Tape::<f64>::inference();
        let mouth = Mask::rect(4, 4, rect(2, 3, 1, 2));
        let masks = PartMaskSet::new(Mask::rect(4, 4, rect(0, 0, 0, 3)), Mask::zeros(4, 4), mouth.clone()).unwrap();
        let target = features(&tape, [1.0; 4], masks);

        let kept = transplant(&target, &[None, None, None]).unwrap();
        for k in 0..4 {
            assert_eq!(kept.feats[k].value(), target.feats[k].value());
        }

        let src_mask = Mask::rect(4, 4, rect(0, 1, 0, 1));
        let src = tape.constant(Tensor::full(&[1, 4, 4], 5.0));
        let out = transplant(&target, &[None, None, Some(SourceFeature { feat: src, mask: &src_mask })]).unwrap();
        let v = out.feats[2].value();
        for i in 0..16 {
            assert_eq!(v.data()[i], if mouth.cells()[i] == 1 { 5.0 } else { 1.0 });
        }
        for k in [0, 1, 3] {
            assert_eq!(out.feats[k].value(), target.feats[k].value());
        }

        let wrong = tape.constant(Tensor::full(&[2, 4, 4], 5.0));
        assert!(transplant(&target, &[None, None, Some(SourceFeature { feat: wrong, mask: &src_mask })]).is_err());
    }

    fn identity_mlp(d: usize) -> ParamStore<f64> {
        // fc1 = [I; -I] and fc2 = [I, -I] with SiLU(x) − SiLU(−x) = x
        let mut s = ParamStore::new();
        let fc1 = Tensor::from_fn(&[d, 2 * d], |i| {
            let (r, c) = (i / (2 * d), i % (2 * d));
            if c == r { 1.0 } else if c == r + d { -1.0 } else { 0.0 }
        });
        let fc2 = Tensor::from_fn(&[2 * d, d], |i| {
            let (r, c) = (i / d, i % d);
            if r == c { 1.0 } else if r == c + d { -1.0 } else { 0.0 }
        });
        s.insert("fuse.fc1.w", fc1).unwrap();
        s.insert("fuse.fc1.b", Tensor::zeros(&[2 * d])).unwrap();
        s.insert("fuse.fc2.w", fc2).unwrap();
        s.insert("fuse.fc2.b", Tensor::zeros(&[d])).unwrap();
        s
    }

    #[test]
    fn aggregate_examples() {
        let tape = Tape::<f64>::inference();
        let s = identity_mlp(1);
        let b = Bindings::new(&tape, &s, false);
        let eyes = Mask::from_fn(4, 4, |r, _| r < 2);
        let masks = PartMaskSet::new(eyes.clone(), Mask::zeros(4, 4), Mask::zeros(4, 4)).unwrap();
        let c = aggregate(&b, &features(&tape, [2.0, 7.0, 7.0, 3.0], masks.clone())).unwrap().value();
        for i in 0..16 {
            let want = if eyes.cells()[i] == 1 { 2.0 } else { 3.0 };
            assert!((c.data()[i] - want).abs() < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rs = ParamStore::new();
        init(&mut rs, 1, &FusionConfig { dim: 3 }, &mut rng).unwrap();
        rs.set("fuse.fc1.b", Tensor::from_fn(&[2], |i| i as f64 - 0.5)).unwrap();
        let b = Bindings::new(&tape, &rs, false);
        let c0 = aggregate(&b, &features(&tape, [0.0; 4], masks)).unwrap().value();
        for ch in c0.data().chunks(16) {
            assert!(ch.iter().all(|&v| v == ch[0]));
        }
    }

    #[test]
    fn mosaic_ignores_slot_order() {
        let tape = Tape::<f64>::inference();
        let masks = PartMaskSet::new(
            Mask::rect(4, 4, rect(0, 0, 0, 3)),
            Mask::rect(4, 4, rect(1, 2, 1, 2)),
            Mask::rect(4, 4, rect(3, 3, 0, 3)),
        )
        .unwrap();
        let pf = features(&tape, [1.0, 2.0, 3.0, 4.0], masks);
        let a = mosaic(&pf).unwrap().value();
        let sum = pf.feats.iter().zip(pf.masks.masks()).rev().fold(Tensor::zeros(&[1, 4, 4]), |acc, (f, m)| {
            acc.zip_map(&nn::apply_mask(*f, m).unwrap().value(), |x, y| x + y).unwrap()
        });
        assert_eq!(a, sum);
    }
}
