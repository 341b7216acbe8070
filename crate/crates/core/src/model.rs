//! The full part-swap model: encoder, fusion MLP and denoising UNet over a
//! space-to-depth latent, plus checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::Codec;
use crate::config::RunConfig;
use crate::diffusion::{DdimConfig, EpsModel, NoiseSchedule};
use crate::encoder::{self, EncoderConfig};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{self, FusionConfig, SourceFeature, SwapSpec};
use crate::image::Image;
use crate::injection::InjectionMode;
use crate::mask::{Mask, Part, PartMaskSet};
use crate::tensor::{checkpoint, Bindings, Elem, ParamStore, Tape, Tensor, Var};
use crate::unet::{self, Condition, DenoiseInput, UNetConfig};

const CONFIG_KEY: &str = "meta.config";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub codec: Codec,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub unet: UNetConfig,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ModelConfig {
    pub fn from_run(c: &RunConfig) -> Result<Self> {
        let mode: InjectionMode = c.get("inject.mode")?.parse()?;
        let encoder = EncoderConfig {
            patch: c.usize("encoder.patch")?,
            dim: c.usize("encoder.dim")?,
            blocks: c.usize("encoder.blocks")?,
            hierarchical: c.bool("encoder.hierarchical")? || mode.hierarchical(),
            taps: c.list("encoder.taps")?,
            groups: c.usize("unet.groups")?,
        };
        let codec = Codec::new(c.usize("codec.factor")?).map_err(|e| Error::Config(e.to_string()))?;
        let fusion = FusionConfig { dim: c.usize("fusion.dim")? };
        let timesteps = c.usize("diffusion.T")?;
        let unet = UNetConfig {
            base: c.usize("unet.base")?,
            mult: c.list("unet.mult")?,
            attn_levels: c.list("unet.attn_levels")?,
            groups: c.usize("unet.groups")?,
            time_dim: c.usize("unet.time_dim")?,
            latent_channels: codec.channels(),
            cond_dim: fusion.dim,
            mode,
            lambda: c.f64("inject.lambda")?,
            interp: c.get("inject.interp")?.parse()?,
            timesteps,
        };
        let cfg = Self {
            image_size: c.usize("data.size")?,
            codec,
            encoder,
            fusion,
            unet,
            timesteps,
            beta_start: c.f64("diffusion.beta_start")?,
            beta_end: c.f64("diffusion.beta_end")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.unet.validate()?;
        let n = self.image_size;
        let lat = self.codec.latent_dims(n, n).map_err(|e| Error::Config(e.to_string()))?;
        let grid = self.encoder.grid(n, n).map_err(|e| Error::Config(e.to_string()))?;
        let div = 1 << (self.unet.levels() - 1);
        if lat.0 % div != 0 {
            return Err(Error::Config(format!("latent side {} not divisible by {div}", lat.0)));
        }
        if grid.0 == 0 {
            return Err(Error::Config("empty encoder grid".into()));
        }
        if self.fusion.dim == 0 {
            return Err(Error::Config("fusion.dim must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / self.codec.factor
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_side();
        [self.codec.channels(), s, s]
    }

    pub fn feature_side(&self) -> usize {
        self.image_size / self.encoder.patch
    }
}

pub fn ddim_config(c: &RunConfig) -> Result<DdimConfig> {
    Ok(DdimConfig { steps: c.usize("ddim.steps")?, seed: c.u64("ddim.seed")?, invert_iters: c.usize("ddim.invert_iters")? })
}

/// Model parameters together with the configuration that shapes them.
#[derive(Clone, Debug)]
pub struct Model {
    pub run: RunConfig,
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn new(run: &RunConfig) -> Result<Self> {
        let cfg = ModelConfig::from_run(run)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.u64("seed")?);
        let store = init_store(&cfg, &mut rng)?;
        Ok(Self { run: run.clone(), cfg, store })
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        let mut tensors = checkpoint::store_tensors(&self.store, with_optimizer)?;
        let text = self.run.render();
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        tensors.push((CONFIG_KEY.into(), Tensor::new(&[bytes.len()], bytes)?));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        checkpoint::write(path, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut tensors = checkpoint::read(path)?;
        let pos = tensors
            .iter()
            .position(|(n, _)| n == CONFIG_KEY)
            .ok_or_else(|| Error::Data(format!("{}: checkpoint carries no configuration", path.display())))?;
        let (_, t) = tensors.swap_remove(pos);
        let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
        let text = String::from_utf8(bytes).map_err(|_| Error::Data("checkpoint configuration is not UTF-8".into()))?;
        let run = RunConfig::parse(&text).map_err(|e| Error::Data(format!("checkpoint configuration: {e}")))?;
        let mut model = Self::new(&run)?;
        checkpoint::load_into(&mut model.store, tensors)?;
        Ok(model)
    }

    /// Applies overrides that leave the architecture alone (`inject.lambda`,
    /// `ddim.*`, `fix.*`, `eval.*`, `train.*`); other keys are rejected.
    pub fn override_key(&mut self, key: &str, value: &str) -> Result<()> {
        let allowed = key == "inject.lambda" || ["ddim.", "fix.", "eval.", "train."].iter().any(|p| key.starts_with(p));
        if !allowed {
            return Err(Error::Config(format!("{key} cannot be changed on a trained model")));
        }
        self.run.set(key, value)?;
        self.cfg = ModelConfig::from_run(&self.run)?;
        Ok(())
    }
}

pub fn init_store<T: Elem>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    encoder::init(&mut store, &cfg.encoder, rng)?;
    fusion::init(&mut store, cfg.encoder.out_channels(), &cfg.fusion, rng)?;
    unet::init(&mut store, &cfg.unet, rng)?;
    Ok(store)
}

/// `2·codec(img) − 1`.
pub fn to_latent<T: Elem>(codec: &Codec, img: &Image) -> Result<Tensor<T>> {
    let two = T::of(2.0);
    Ok(codec.encode::<T>(img)?.map(|v| two * v - T::one()))
}

/// Inverse of [`to_latent`], clamped to the unit range.
pub fn from_latent<T: Elem>(codec: &Codec, z: &Tensor<T>) -> Result<Image> {
    let half = T::of(0.5);
    let img = codec.decode(&z.map(|v| (v + T::one()) * half))?;
    let (h, w) = img.dims();
    Image::new(h, w, img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Masked-image latent and keep mask for a target at latent resolution.
pub struct DenoiseContext<T> {
    pub x_m: Tensor<T>,
    pub keep: Tensor<T>,
    pub keep_mask: Mask,
}

pub fn denoise_context<T: Elem>(cfg: &ModelConfig, target: &Image, masks: &PartMaskSet) -> Result<DenoiseContext<T>> {
    target.check_mask(masks.get(Part::Remain))?;
    let remain = target.masked(masks.get(Part::Remain))?;
    let x_m = to_latent(&cfg.codec, &remain)?;
    let s = cfg.latent_side();
    let keep_mask = masks.parts_union().downsample(s, s)?;
    Ok(DenoiseContext { x_m, keep: keep_mask.to_tensor(), keep_mask })
}

/// A source part already encoded and its feature-grid mask.
pub struct EncodedSource<'t, T: Elem> {
    pub feat: Var<'t, T>,
    pub mask: Mask,
}

/// Builds the condition signals from the target decomposition and the
/// per-part sources in `spec`.
pub fn condition<'t, T: Elem>(
    b: &Bindings<'t, '_, T>,
    cfg: &ModelConfig,
    target: &Image,
    masks: &PartMaskSet,
    spec: &SwapSpec,
) -> Result<Condition<'t, T>> {
    spec.validate()?;
    if target.dims() != (cfg.image_size, cfg.image_size) {
        return Err(dim_err!("target {:?} for a {}px model", target.dims(), cfg.image_size));
    }
    let tape = b.tape();
    let fs = cfg.feature_side();
    let mut sources: Vec<Option<EncodedSource<'t, T>>> = Vec::with_capacity(3);
    for part in Part::SWAPPABLE {
        sources.push(match spec.get(part) {
            None => None,
            Some(src) => {
                if src.image.dims() != target.dims() {
                    return Err(dim_err!("{part} source {:?} vs target {:?}", src.image.dims(), target.dims()));
                }
                let feat = encoder::encode(b, &cfg.encoder, tape.constant(src.image.to_tensor()), &src.mask)?;
                let mask = src.mask.downsample(fs, fs)?;
                if mask.is_empty() {
                    return Err(Error::EmptyRegion(format!("{part} source mask vanishes on the {fs}x{fs} feature grid")));
                }
                Some(EncodedSource { feat, mask })
            }
        });
    }
    condition_from_features(b, cfg, tape.constant(target.to_tensor()), masks, &sources)
}

/// [`condition`] with the target image on the tape and sources pre-encoded.
pub fn condition_from_features<'t, T: Elem>(
    b: &Bindings<'t, '_, T>,
    cfg: &ModelConfig,
    target: Var<'t, T>,
    masks: &PartMaskSet,
    sources: &[Option<EncodedSource<'t, T>>],
) -> Result<Condition<'t, T>> {
    let decomposed = encoder::decompose(b, &cfg.encoder, target, masks)?;
    for (k, part) in Part::SWAPPABLE.iter().enumerate() {
        if sources.get(k).is_some_and(Option::is_some) && decomposed.masks.get(*part).is_empty() {
            return Err(Error::EmptyRegion(format!("target {part} mask vanishes on the feature grid")));
        }
    }
    let refs: [Option<SourceFeature<'t, '_, T>>; 3] =
        std::array::from_fn(|k| sources.get(k).and_then(|s| s.as_ref()).map(|s| SourceFeature { feat: s.feat, mask: &s.mask }));
    let fused = fusion::transplant(&decomposed, &refs)?;
    let mode = cfg.unet.mode;
    let map = if mode.per_part() { None } else { Some(fusion::aggregate(b, &fused)?) };
    let parts = if mode.per_part() {
        let mut out = Vec::with_capacity(4);
        for (f, m) in fused.feats.iter().zip(fused.masks.masks()) {
            out.push(fusion::mlp(b, crate::nn::apply_mask(*f, m)?)?);
        }
        Some([out[0], out[1], out[2], out[3]])
    } else {
        None
    };
    Ok(Condition { map, parts })
}

/// Condition values detached from any tape.
#[derive(Clone, Debug)]
pub struct ConditionValues<T> {
    pub map: Option<Tensor<T>>,
    pub parts: Option<[Tensor<T>; 4]>,
}

impl<T: Elem> ConditionValues<T> {
    pub fn of(c: &Condition<'_, T>) -> Self {
        Self { map: c.map.map(|v| v.value()), parts: c.parts.map(|p| p.map(|v| v.value())) }
    }

    pub fn on<'t>(&self, tape: &'t Tape<T>) -> Condition<'t, T> {
        Condition {
            map: self.map.as_ref().map(|m| tape.constant(m.clone())),
            parts: self.parts.as_ref().map(|p| p.clone().map(|t| tape.constant(t))),
        }
    }
}

/// ε_θ with the conditioning of one swap bound; implements [`EpsModel`].
pub struct BoundModel<'a, T: Elem> {
    pub cfg: &'a ModelConfig,
    pub store: &'a ParamStore<T>,
    pub ctx: DenoiseContext<T>,
    pub cond: ConditionValues<T>,
}

impl<'a, T: Elem> BoundModel<'a, T> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore<T>, target: &Image, masks: &PartMaskSet, spec: &SwapSpec) -> Result<Self> {
        let tape = Tape::inference();
        let b = Bindings::new(&tape, store, false);
        let cond = ConditionValues::of(&condition(&b, cfg, target, masks, spec)?);
        Ok(Self { cfg, store, ctx: denoise_context(cfg, target, masks)?, cond })
    }
}

impl<T: Elem> EpsModel<T> for BoundModel<'_, T> {
    fn predict(&self, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let b = Bindings::new(&tape, self.store, false);
        let input = DenoiseInput {
            x_m: tape.constant(self.ctx.x_m.clone()),
            keep: tape.constant(self.ctx.keep.clone()),
            z_t: tape.constant(z.clone()),
            t,
            cond: self.cond.on(&tape),
        };
        Ok(unet::forward(&b, &self.cfg.unet, &input)?.0.value())
    }
}
