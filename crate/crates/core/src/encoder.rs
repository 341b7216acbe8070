//! Part image encoder: patch embedding followed by residual conv blocks,
//! returning spatial feature maps (no pooling).

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::mask::{Mask, Part, PartMaskSet};
use crate::nn::{self, Init};
use crate::tensor::{concat, Bindings, Elem, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub patch: usize,
    pub dim: usize,
    /// Nominal depth N; the encoder output is block N−1.
    pub blocks: usize,
    pub hierarchical: bool,
    /// 1-based block indices concatenated in hierarchical mode.
    pub taps: Vec<usize>,
    pub groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch: 4, dim: 32, blocks: 4, hierarchical: false, taps: vec![1, 2, 3], groups: 8 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 {
            return Err(Error::Config("encoder.patch and encoder.dim must be positive".into()));
        }
        if self.blocks < 2 {
            return Err(Error::Config("encoder.blocks must be at least 2".into()));
        }
        if self.hierarchical {
            if self.taps.is_empty() {
                return Err(Error::Config("encoder.taps is empty".into()));
            }
            if let Some(&t) = self.taps.iter().find(|&&t| t == 0 || t > self.blocks) {
                return Err(Error::Config(format!("encoder tap {t} outside 1..={}", self.blocks)));
            }
        }
        Ok(())
    }

    pub fn penultimate(&self) -> usize {
        self.blocks - 1
    }

    /// Number of blocks that are actually evaluated.
    pub fn depth(&self) -> usize {
        let deepest_tap = if self.hierarchical { self.taps.iter().copied().max().unwrap_or(0) } else { 0 };
        self.penultimate().max(deepest_tap)
    }

    pub fn out_channels(&self) -> usize {
        if self.hierarchical {
            self.dim * self.taps.len()
        } else {
            self.dim
        }
    }

    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.patch) || !w.is_multiple_of(self.patch) {
            return Err(dim_err!("image {h}x{w} not divisible by encoder patch {}", self.patch));
        }
        Ok((h / self.patch, w / self.patch))
    }
}

pub fn init<T: Elem>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    nn::init_conv(store, "enc.patch", 3, cfg.dim, cfg.patch, Init::Fan, rng)?;
    for i in 1..=cfg.depth() {
        nn::init_norm(store, &format!("enc.block{i}.norm"), cfg.dim)?;
        nn::init_conv(store, &format!("enc.block{i}.conv"), cfg.dim, cfg.dim, 3, Init::Fan, rng)?;
    }
    Ok(())
}

/// Outputs of blocks 1..=depth.
fn block_outputs<'t, T: Elem>(b: &Bindings<'t, '_, T>, cfg: &EncoderConfig, img: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
    let mut x = nn::conv(b, "enc.patch", img, cfg.patch, 0)?;
    let groups = nn::groups_for(cfg.dim, cfg.groups);
    let mut outs = Vec::with_capacity(cfg.depth());
    for i in 1..=cfg.depth() {
        let h = nn::norm(b, &format!("enc.block{i}.norm"), x, groups)?.silu()?;
        x = x.add(nn::conv(b, &format!("enc.block{i}.conv"), h, 1, 1)?)?;
        outs.push(x);
    }
    Ok(outs)
}

fn check_input<T: Elem>(img: Var<'_, T>, m: &Mask) -> Result<()> {
    let (c, h, w) = img.chw()?;
    if c != 3 || (h, w) != m.dims() {
        return Err(dim_err!("encoder input [{c},{h},{w}] with mask {:?}", m.dims()));
    }
    Ok(())
}

/// φ(I ⊙ m): the penultimate block's feature map.
pub fn encode_part<'t, T: Elem>(b: &Bindings<'t, '_, T>, cfg: &EncoderConfig, img: Var<'t, T>, m: &Mask) -> Result<Var<'t, T>> {
    check_input(img, m)?;
    let outs = block_outputs(b, cfg, nn::apply_mask(img, m)?)?;
    Ok(outs[cfg.penultimate() - 1])
}

/// Channel concatenation of the tapped block outputs of φ(I ⊙ m).
pub fn hierarchical_encode<'t, T: Elem>(
    b: &Bindings<'t, '_, T>,
    cfg: &EncoderConfig,
    img: Var<'t, T>,
    m: &Mask,
) -> Result<Var<'t, T>> {
    if !cfg.hierarchical {
        return Err(Error::Config("hierarchical_encode needs encoder.hierarchical = true".into()));
    }
    cfg.validate()?;
    check_input(img, m)?;
    let outs = block_outputs(b, cfg, nn::apply_mask(img, m)?)?;
    let taps: Vec<_> = cfg.taps.iter().map(|&t| outs[t - 1]).collect();
    concat(&taps)
}

/// Encoder entry point honoring `cfg.hierarchical`.
pub fn encode<'t, T: Elem>(b: &Bindings<'t, '_, T>, cfg: &EncoderConfig, img: Var<'t, T>, m: &Mask) -> Result<Var<'t, T>> {
    if cfg.hierarchical {
        hierarchical_encode(b, cfg, img, m)
    } else {
        encode_part(b, cfg, img, m)
    }
}

/// Per-slot feature maps with their feature-grid masks (slot order eyes,
/// nose, mouth, remain).
#[derive(Clone)]
pub struct PartFeatures<'t, T: Elem> {
    pub feats: [Var<'t, T>; 4],
    pub masks: PartMaskSet,
}

impl<'t, T: Elem> PartFeatures<'t, T> {
    pub fn get(&self, part: Part) -> Var<'t, T> {
        self.feats[part.index()]
    }
}

pub fn decompose<'t, T: Elem>(
    b: &Bindings<'t, '_, T>,
    cfg: &EncoderConfig,
    img: Var<'t, T>,
    masks: &PartMaskSet,
) -> Result<PartFeatures<'t, T>> {
    let (h, w) = masks.dims();
    let (gh, gw) = cfg.grid(h, w)?;
    let feats = [
        encode(b, cfg, img, masks.get(Part::Eyes))?,
        encode(b, cfg, img, masks.get(Part::Nose))?,
        encode(b, cfg, img, masks.get(Part::Mouth))?,
        encode(b, cfg, img, masks.get(Part::Remain))?,
    ];
    Ok(PartFeatures { feats, masks: masks.downsample(gh, gw)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &EncoderConfig) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init(&mut s, cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        s
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.gen())
    }

    fn small() -> EncoderConfig {
        EncoderConfig { dim: 8, groups: 2, ..Default::default() }
    }

    #[test]
    fn masking_commutes_with_encoding() {
        let cfg = small();
        let s = setup(&cfg);
        let tape = Tape::inference();
        let b = Bindings::new(&tape, &s, false);
        let img = random_image(16, 16, 3);
        let m = Mask::from_fn(16, 16, |r, c| r > 3 && c < 9);
        let pre = Tensor::from_fn(&[3, 16, 16], |i| if m.cells()[i % 256] == 1 { img.data()[i] } else { 0.0 });
        let a = encode_part(&b, &cfg, tape.constant(img), &m).unwrap().value();
        let c = encode_part(&b, &cfg, tape.constant(pre), &m).unwrap().value();
        assert_eq!(a, c);
        assert_eq!(a.shape(), &[8, 4, 4]);
    }

    #[test]
    fn out_of_mask_pixels_have_no_influence() {
        let cfg = small();
        let s = setup(&cfg);
        let m = Mask::from_fn(16, 16, |r, _| r < 8);
        let run = |img: Tensor<f64>| {
            let tape = Tape::inference();
            let b = Bindings::new(&tape, &s, false);
            encode_part(&b, &cfg, tape.constant(img), &m).unwrap().value()
        };
        let img = random_image(16, 16, 4);
        let mut other = img.clone();
        for ch in 0..3 {
            other.data_mut()[(ch * 16 + 12) * 16 + 5] = 7.0;
        }
        assert_eq!(run(img.clone()), run(other));
        assert_eq!(run(img.clone()), run(img));
    }

    #[test]
    fn output_grid_follows_patch() {
        let cfg = EncoderConfig::default();
        let s = setup(&cfg);
        let tape = Tape::<f64>::inference();
        let b = Bindings::new(&tape, &s, false);
        let f = encode_part(&b, &cfg, tape.constant(random_image(64, 64, 5)), &Mask::ones(64, 64)).unwrap();
        assert_eq!(f.shape(), vec![32, 16, 16]);
    }

    #[test]
    fn hierarchical_examples() {
        let cfg = EncoderConfig { hierarchical: true, ..Default::default() };
        assert_eq!(cfg.out_channels(), 96);
        let s = setup(&cfg);
        let tape = Tape::<f64>::inference();
        let b = Bindings::new(&tape, &s, false);
        let img = tape.constant(random_image(32, 32, 6));
        let m = Mask::ones(32, 32);
        let f = hierarchical_encode(&b, &cfg, img, &m).unwrap();
        assert_eq!(f.shape(), vec![96, 8, 8]);

        let single = EncoderConfig { taps: vec![3], ..cfg.clone() };
        let plain = EncoderConfig { hierarchical: false, ..cfg.clone() };
        let a = hierarchical_encode(&b, &single, img, &m).unwrap().value();
        let p = encode_part(&b, &plain, img, &m).unwrap().value();
        assert_eq!(a, p);

        let bad = EncoderConfig { taps: vec![5], ..cfg };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn decompose_shapes_and_partition() {
        let cfg = small();
        let s = setup(&cfg);
        let tape = Tape::<f64>::inference();
        let b = Bindings::new(&tape, &s, false);
        let r = crate::synth::render(&crate::synth::sample_identity(2), 32).unwrap();
        let pf = decompose(&b, &cfg, tape.constant(r.image.to_tensor()), &r.masks).unwrap();
        for f in &pf.feats {
            assert_eq!(f.shape(), vec![8, 8, 8]);
        }
        let total: usize = pf.masks.masks().iter().map(|m| m.count()).sum();
        assert_eq!(total, 64);
    }

    #[test]
    fn gradient_check() {
        let cfg = EncoderConfig { dim: 4, groups: 2, blocks: 3, ..Default::default() };
        let s = setup(&cfg);
        let m = Mask::from_fn(8, 8, |r, c| r + c < 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = crate::tensor::gradcheck::check_store(
            &s,
            &[random_image(8, 8, 9)],
            |b, x| encode_part(b, &cfg, x[0], &m)?.square()?.mean(),
            1e-5,
            Some(6),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
