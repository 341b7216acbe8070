//! Joint training of encoder, fusion MLP and UNet on the ε-prediction loss.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{Corpus, Sample};
use crate::diffusion::{add_noise, gaussian, NoiseSchedule};
use crate::encoder;
use crate::error::{Error, Result};
use crate::mask::Part;
use crate::model::{condition_from_features, denoise_context, to_latent, EncodedSource, Model, ModelConfig};
use crate::tensor::ops::mse;
use crate::tensor::{reduce_grads, AdamW, Bindings, Elem, GradMap, ParamStore, Tape, Tensor, Var};
use crate::unet::{self, DenoiseInput};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub replace_prob: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub holdout: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn from_run(c: &RunConfig) -> Result<Self> {
        let cfg = Self {
            steps: c.u64("train.steps")?,
            batch: c.usize("train.batch")?,
            lr: c.f64("train.lr")?,
            warmup: c.u64("train.warmup")?,
            weight_decay: c.f64("train.weight_decay")?,
            replace_prob: c.f64("train.replace_prob")?,
            log_every: c.u64("train.log_every")?.max(1),
            checkpoint_every: c.u64("train.checkpoint_every")?,
            holdout: c.u64("data.holdout")?,
            seed: c.u64("seed")?,
        };
        if cfg.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.replace_prob) {
            return Err(Error::Config("train.replace_prob must lie in [0, 1]".into()));
        }
        if cfg.lr <= 0.0 || cfg.weight_decay < 0.0 {
            return Err(Error::Config("train.lr must be positive and train.weight_decay non-negative".into()));
        }
        Ok(cfg)
    }

    /// Linear warmup, then cosine decay to a tenth of the peak rate.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let p = ((step - self.warmup) as f64 / span).min(1.0);
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

/// One training example: indices into the corpus samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub target: usize,
    /// Reference view per swappable part; `None` keeps the target's own part.
    pub sources: [Option<usize>; 3],
    pub t: usize,
    pub noise_seed: u64,
}

pub fn train_ids(corpus: &Corpus, holdout: u64) -> Vec<u64> {
    (0..corpus.identities() as u64).filter(|&id| id < holdout).collect()
}

/// Deterministic batch for `step`: targets from `ids`, each part replaced by
/// another view of the same identity with probability `replace_prob`.
pub fn draw_batch(corpus: &Corpus, ids: &[u64], cfg: &TrainConfig, timesteps: usize, step: u64) -> Result<Vec<Example>> {
    if ids.is_empty() {
        return Err(Error::Contract("no training identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ step.wrapping_mul(0xd134_2543_de82_ef95) ^ 0x7a11);
    let views = corpus.views;
    Ok((0..cfg.batch)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            let view = rng.gen_range(0..views);
            let target = id as usize * views + view;
            let sources = std::array::from_fn(|_| {
                if rng.gen_bool(cfg.replace_prob) {
                    let other = if views > 1 { (view + rng.gen_range(1..views)) % views } else { view };
                    Some(id as usize * views + other)
                } else {
                    None
                }
            });
            Example { target, sources, t: rng.gen_range(0..timesteps), noise_seed: rng.gen() }
        })
        .collect())
}

/// ‖ε − ε_θ(z_t, t, x_m, keep, C)‖² averaged over latent cells.
#[allow(clippy::too_many_arguments)]
pub fn example_loss<'t, T: Elem>(
    b: &Bindings<'t, '_, T>,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    target: &Sample,
    sources: [Option<&Sample>; 3],
    t: usize,
    eps: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let tape = b.tape();
    let fs = cfg.feature_side();
    let mut encoded = Vec::with_capacity(3);
    for (part, src) in Part::SWAPPABLE.into_iter().zip(sources) {
        encoded.push(match src {
            Some(s) => {
                let mask = s.masks.get(part);
                let small = mask.downsample(fs, fs)?;
                if small.is_empty() {
                    None
                } else {
                    let feat = encoder::encode(b, &cfg.encoder, tape.constant(s.image.to_tensor()), mask)?;
                    Some(EncodedSource { feat, mask: small })
                }
            }
            None => None,
        });
    }
    let cond = condition_from_features(b, cfg, tape.constant(target.image.to_tensor()), &target.masks, &encoded)?;
    let ctx = denoise_context::<T>(cfg, &target.image, &target.masks)?;
    let z0 = to_latent::<T>(&cfg.codec, &target.image)?;
    let zt = add_noise(&z0, t, eps, schedule)?;
    let input = DenoiseInput {
        x_m: tape.constant(ctx.x_m),
        keep: tape.constant(ctx.keep),
        z_t: tape.constant(zt),
        t,
        cond,
    };
    let (pred, _) = unet::forward(b, &cfg.unet, &input)?;
    mse(pred, tape.constant(eps.clone()))
}

fn example_grads<T: Elem>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    corpus: &Corpus,
    ex: &Example,
) -> Result<(f64, GradMap<T>)> {
    let tape = Tape::new();
    let b = Bindings::new(&tape, store, true);
    let sources = ex.sources.map(|s| s.map(|i| &corpus.samples[i]));
    let eps = gaussian::<T>(&cfg.latent_shape(), ex.noise_seed);
    let loss = example_loss(&b, cfg, schedule, &corpus.samples[ex.target], sources, ex.t, &eps)?;
    let value = loss.value().data()[0].as_f64();
    let mut g = tape.backward(loss)?;
    Ok((value, b.collect(&mut g)))
}

/// Mean-loss gradient over `batch`, with zeros for parameters the batch
/// did not reach.
pub fn batch_grads<T: Elem>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    corpus: &Corpus,
    batch: &[Example],
) -> Result<(f64, GradMap<T>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let results: Vec<(f64, GradMap<T>)> = batch
        .par_iter()
        .map(|ex| example_grads(store, cfg, schedule, corpus, ex))
        .collect::<Result<_>>()?;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    let mut grads = reduce_grads(results.into_iter().map(|r| r.1).collect(), 1.0 / batch.len() as f64);
    for (name, p) in store.iter() {
        grads.entry(name.to_string()).or_insert_with(|| vec![T::zero(); p.value.numel()]);
    }
    Ok((loss, grads))
}

pub struct Trainer<'a> {
    pub model: &'a mut Model,
    pub corpus: &'a Corpus,
    pub cfg: TrainConfig,
    schedule: NoiseSchedule,
    ids: Vec<u64>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, corpus: &'a Corpus) -> Result<Self> {
        let cfg = TrainConfig::from_run(&model.run)?;
        if corpus.size != model.cfg.image_size {
            return Err(Error::Data(format!("corpus is {}px, model expects {}px", corpus.size, model.cfg.image_size)));
        }
        let ids = train_ids(corpus, cfg.holdout);
        if ids.is_empty() {
            return Err(Error::Data(format!("no identities below data.holdout = {}", cfg.holdout)));
        }
        let schedule = model.cfg.schedule()?;
        Ok(Self { model, corpus, cfg, schedule, ids })
    }

    /// One optimizer step at the model's current step counter.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.model.store.step();
        let batch = draw_batch(self.corpus, &self.ids, &self.cfg, self.schedule.len(), step)?;
        let (loss, grads) = batch_grads(&self.model.store, &self.model.cfg, &self.schedule, self.corpus, &batch)?;
        let opt = AdamW { lr: self.cfg.lr_at(step), weight_decay: self.cfg.weight_decay, ..AdamW::default() };
        self.model.store.adamw_step(&grads, &opt)?;
        Ok(loss)
    }

    /// Trains up to `train.steps`, writing `step<TAB>loss<TAB>lr` lines to
    /// `log` and checkpoints (with optimizer state) to `out`.
    pub fn run(&mut self, out: Option<&Path>, log: &mut dyn Write) -> Result<Vec<f64>> {
        let io = |e: std::io::Error| Error::io("<loss log>", e);
        if self.model.store.step() == 0 {
            writeln!(log, "step\tloss\tlr").map_err(io)?;
        }
        let mut losses = Vec::new();
        while self.model.store.step() < self.cfg.steps {
            let step = self.model.store.step();
            let loss = self.step()?;
            losses.push(loss);
            if step.is_multiple_of(self.cfg.log_every) || step + 1 == self.cfg.steps {
                writeln!(log, "{step}\t{loss:.6}\t{:.6e}", self.cfg.lr_at(step)).map_err(io)?;
            }
            let done = step + 1;
            if let Some(path) = out {
                if self.cfg.checkpoint_every > 0 && done.is_multiple_of(self.cfg.checkpoint_every) && done < self.cfg.steps {
                    self.model.save(path, true)?;
                }
            }
        }
        if let Some(path) = out {
            self.model.save(path, true)?;
        }
        log.flush().map_err(io)?;
        Ok(losses)
    }
}
