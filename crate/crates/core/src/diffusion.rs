//! Variance-preserving noise schedule, deterministic DDIM sampling and
//! inversion, and skin-region latent replacement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::mask::Mask;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion.T must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}")));
        }
        let mut alpha = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for s in 0..steps {
            let frac = if steps == 1 { 0.0 } else { s as f64 / (steps - 1) as f64 };
            prod *= 1.0 - (beta_start + (beta_end - beta_start) * frac);
            let a = prod.sqrt();
            alpha.push(a);
            sigma.push((1.0 - a * a).sqrt());
        }
        Ok(Self { alpha, sigma })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Contract(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1000, 1e-4, 2e-2).expect("default schedule")
    }
}

fn axpby<T: Elem>(a: f64, x: &Tensor<T>, b: f64, y: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b) = (T::of(a), T::of(b));
    x.zip_map(y, |u, v| a * u + b * v)
}

/// z_t = α_t·z₀ + σ_t·ε.
pub fn add_noise<T: Elem>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, s: &NoiseSchedule) -> Result<Tensor<T>> {
    s.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(dim_err!("add_noise shapes {:?} and {:?}", z0.shape(), eps.shape()));
    }
    axpby(s.alpha(t), z0, s.sigma(t), eps)
}

/// Standard-normal tensor drawn from `seed`.
pub fn gaussian<T: Elem>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(StandardNormal.sample(&mut rng)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DdimConfig {
    pub steps: usize,
    pub seed: u64,
    /// Fixed-point refinements per inversion step.
    pub invert_iters: usize,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self { steps: 50, seed: 0, invert_iters: 3 }
    }
}

impl DdimConfig {
    /// Ascending sampling timesteps `t_i = (i+1)·T/steps − 1`.
    pub fn timesteps(&self, s: &NoiseSchedule) -> Result<Vec<usize>> {
        if self.steps == 0 || self.steps > s.len() {
            return Err(Error::Config(format!("ddim.steps must be in 1..={}, got {}", s.len(), self.steps)));
        }
        Ok((0..self.steps).map(|i| (i + 1) * s.len() / self.steps - 1).collect())
    }
}

/// An ε-predictor with all conditioning already bound.
pub trait EpsModel<T: Elem> {
    fn predict(&self, z: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Elem, F: Fn(&Tensor<T>, usize) -> Result<Tensor<T>>> EpsModel<T> for F {
    fn predict(&self, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(z, t)
    }
}

/// Predicts ε = 0.
pub struct ZeroPredictor;

impl<T: Elem> EpsModel<T> for ZeroPredictor {
    fn predict(&self, z: &Tensor<T>, _t: usize) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(z.shape()))
    }
}

/// The exact posterior-mean ε for data `z₀ ~ N(0, s²)`:
/// ε̂ = σ_t·z / (α_t²s² + σ_t²).
pub struct LinearStub {
    pub schedule: NoiseSchedule,
    pub data_var: f64,
}

impl<T: Elem> EpsModel<T> for LinearStub {
    fn predict(&self, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.schedule.check(t)?;
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        let k = T::of(s / (a * a * self.data_var + s * s));
        Ok(z.map(|v| k * v))
    }
}

fn predict_checked<T: Elem>(model: &dyn EpsModel<T>, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let eps = model.predict(z, t)?;
    if eps.shape() != z.shape() {
        return Err(dim_err!("predictor returned {:?} for latent {:?}", eps.shape(), z.shape()));
    }
    if !eps.is_finite() {
        return Err(Error::Numeric(format!("non-finite ε prediction at t={t}")));
    }
    Ok(eps)
}

/// One η=0 DDIM update from `(a_from, s_from)` to `(a_to, s_to)`.
fn ddim_update<T: Elem>(z: &Tensor<T>, eps: &Tensor<T>, from: (f64, f64), to: (f64, f64)) -> Result<Tensor<T>> {
    let z0 = axpby(1.0 / from.0, z, -from.1 / from.0, eps)?;
    axpby(to.0, &z0, to.1, eps)
}

/// Runs the sampler from `z_t` at the last timestep down to a clean latent.
/// `hook(k, i, z)` fires before the k-th step (0-based), which evaluates
/// timestep index `i`.
pub fn ddim_sample_with<T: Elem>(
    model: &dyn EpsModel<T>,
    z_start: Tensor<T>,
    s: &NoiseSchedule,
    cfg: &DdimConfig,
    mut hook: impl FnMut(usize, usize, &mut Tensor<T>) -> Result<()>,
) -> Result<Tensor<T>> {
    let ts = cfg.timesteps(s)?;
    let mut z = z_start;
    for (k, i) in (0..ts.len()).rev().enumerate() {
        hook(k, i, &mut z)?;
        let t = ts[i];
        let eps = predict_checked(model, &z, t)?;
        let to = if i == 0 { (1.0, 0.0) } else { (s.alpha(ts[i - 1]), s.sigma(ts[i - 1])) };
        z = ddim_update(&z, &eps, (s.alpha(t), s.sigma(t)), to)?;
    }
    Ok(z)
}

pub fn ddim_sample<T: Elem>(model: &dyn EpsModel<T>, z_start: Tensor<T>, s: &NoiseSchedule, cfg: &DdimConfig) -> Result<Tensor<T>> {
    ddim_sample_with(model, z_start, s, cfg, |_, _, _| Ok(()))
}

/// Samples from seeded Gaussian noise of the given latent shape.
pub fn ddim_sample_seeded<T: Elem>(model: &dyn EpsModel<T>, shape: &[usize], s: &NoiseSchedule, cfg: &DdimConfig) -> Result<Tensor<T>> {
    ddim_sample(model, gaussian(shape, cfg.seed), s, cfg)
}

/// Inversion trajectory: entry `i` is the latent at sampling timestep `t_i`.
///
/// Each step solves `z_i = update(z_{i-1}, ε(z_i, t_i))` for `z_i`, starting
/// from ε evaluated on `z_{i-1}` and refining `invert_iters` times, so that
/// the sampler's step from `z_i` lands back on `z_{i-1}`.
pub fn ddim_invert_trajectory<T: Elem>(
    model: &dyn EpsModel<T>,
    z0: &Tensor<T>,
    s: &NoiseSchedule,
    cfg: &DdimConfig,
) -> Result<Vec<Tensor<T>>> {
    let ts = cfg.timesteps(s)?;
    let mut out = Vec::with_capacity(ts.len());
    let mut z = z0.clone();
    let mut from = (1.0, 0.0);
    for &t in &ts {
        let to = (s.alpha(t), s.sigma(t));
        let mut next = ddim_update(&z, &predict_checked(model, &z, t)?, from, to)?;
        for _ in 0..cfg.invert_iters {
            next = ddim_update(&z, &predict_checked(model, &next, t)?, from, to)?;
        }
        z = next;
        out.push(z.clone());
        from = to;
    }
    Ok(out)
}

pub fn ddim_invert<T: Elem>(model: &dyn EpsModel<T>, z0: &Tensor<T>, s: &NoiseSchedule, cfg: &DdimConfig) -> Result<Tensor<T>> {
    Ok(ddim_invert_trajectory(model, z0, s, cfg)?.pop().expect("at least one step"))
}

/// Samples from `z_start` while, for the first `n` steps, overwriting the
/// latent cells inside `skin` with the target's inverted trajectory.
pub fn skin_latent_replace<T: Elem>(
    model: &dyn EpsModel<T>,
    z_start: Tensor<T>,
    target_traj: &[Tensor<T>],
    skin: &Mask,
    n: usize,
    s: &NoiseSchedule,
    cfg: &DdimConfig,
) -> Result<Tensor<T>> {
    if n > cfg.steps {
        return Err(Error::Contract(format!("fix threshold {n} exceeds {} steps", cfg.steps)));
    }
    if target_traj.len() != cfg.steps {
        return Err(Error::Contract(format!("trajectory has {} latents for {} steps", target_traj.len(), cfg.steps)));
    }
    let (_, h, w) = z_start.chw()?;
    if skin.dims() != (h, w) {
        return Err(dim_err!("skin mask {:?} for latent {h}x{w}", skin.dims()));
    }
    let plane = h * w;
    ddim_sample_with(model, z_start, s, cfg, |k, i, z| {
        if k < n {
            let src = &target_traj[i];
            if src.shape() != z.shape() {
                return Err(dim_err!("trajectory latent {:?} vs {:?}", src.shape(), z.shape()));
            }
            for (j, v) in z.data_mut().iter_mut().enumerate() {
                if skin.cells()[j % plane] == 1 {
                    *v = src.data()[j];
                }
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        assert!((s.alpha(0) - (1.0f64 - 1e-4).sqrt()).abs() < 1e-15);
        assert!(s.sigma(0) < 0.011);
        for t in 1..1000 {
            assert!(s.alpha(t) <= s.alpha(t - 1));
            assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
        }
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha(999) - prod.sqrt()).abs() < 1e-12);
        assert!(NoiseSchedule::new(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let eps = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let zt = add_noise(&z0, 0, &Tensor::zeros(&[2, 3, 3]), &s).unwrap();
        assert!(zt.max_abs_diff(&z0.map(|v| v * s.alpha(0))) == 0.0);
        let zt = add_noise(&z0, 0, &eps, &s).unwrap();
        assert!(zt.max_abs_diff(&z0) < 0.02);
        let zt = add_noise(&z0, 400, &eps, &s).unwrap();
        for j in 0..18 {
            let want = s.alpha(400) * z0.data()[j] + s.sigma(400) * eps.data()[j];
            assert!((zt.data()[j] - want).abs() < 1e-15);
        }
        assert!(add_noise(&z0, 0, &Tensor::zeros(&[2, 9]), &s).is_err());
    }

    #[test]
    fn timesteps_cover_the_schedule() {
        let s = NoiseSchedule::default();
        let ts = DdimConfig::default().timesteps(&s).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[1], ts[49]), (19, 39, 999));
        assert!(DdimConfig { steps: 1001, ..Default::default() }.timesteps(&s).is_err());
    }

    #[test]
    fn oracle_predictor_recovers_in_one_step() {
        let s = NoiseSchedule::default();
        let cfg = DdimConfig { steps: 1, ..Default::default() };
        let z0 = gaussian::<f64>(&[3, 4, 4], 5);
        let eps = gaussian::<f64>(&[3, 4, 4], 6);
        let zt = add_noise(&z0, 999, &eps, &s).unwrap();
        let oracle = |_: &Tensor<f64>, _t: usize| Ok(eps.clone());
        let out = ddim_sample(&oracle, zt, &s, &cfg).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-6);
    }

    #[test]
    fn zero_predictor_trajectory() {
        let s = NoiseSchedule::default();
        let cfg = DdimConfig::default();
        let out = ddim_sample_seeded::<f64>(&ZeroPredictor, &[2, 2, 2], &s, &cfg).unwrap();
        let zt = gaussian::<f64>(&[2, 2, 2], 0);
        let want = zt.map(|v| v / s.alpha(999));
        assert!(out.max_abs_diff(&want) < 1e-12);
        let inv = ddim_invert(&ZeroPredictor, &want, &s, &cfg).unwrap();
        assert!(inv.max_abs_diff(&zt) < 1e-6);
    }

    #[test]
    fn linear_stub_matches_scalar_recursion() {
        let s = NoiseSchedule::default();
        let cfg = DdimConfig::default();
        let stub = LinearStub { schedule: s.clone(), data_var: 0.5 };
        let zt = gaussian::<f64>(&[1, 3, 3], 9);
        let out = ddim_sample(&stub, zt.clone(), &s, &cfg).unwrap();
        let ts: Vec<usize> = (1..=50).map(|i| i * 20 - 1).collect();
        for (j, &v0) in zt.data().iter().enumerate() {
            let mut z = v0;
            for i in (0..50).rev() {
                let (a, sg) = (s.alpha(ts[i]), s.sigma(ts[i]));
                let e = sg * z / (a * a * 0.5 + sg * sg);
                let x0 = (z - sg * e) / a;
                z = if i == 0 { x0 } else { s.alpha(ts[i - 1]) * x0 + s.sigma(ts[i - 1]) * e };
            }
            assert!((out.data()[j] - z).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_stub_round_trip() {
        let s = NoiseSchedule::default();
        let cfg = DdimConfig::default();
        let stub = LinearStub { schedule: s.clone(), data_var: 0.25 };
        let z0 = gaussian::<f64>(&[2, 4, 4], 10).map(|v| 0.5 * v);
        let zt = ddim_invert(&stub, &z0, &s, &cfg).unwrap();
        let back = ddim_sample(&stub, zt, &s, &cfg).unwrap();
        let mae = back.zip_map(&z0, |a, b| (a - b).abs()).unwrap().sum() / 32.0;
        assert!(mae < 1e-3, "{mae}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = NoiseSchedule::default();
        let cfg = DdimConfig { steps: 20, seed: 3, ..Default::default() };
        let stub = LinearStub { schedule: s.clone(), data_var: 1.0 };
        let a = ddim_sample_seeded::<f32>(&stub, &[4, 4, 4], &s, &cfg).unwrap();
        let b = ddim_sample_seeded::<f32>(&stub, &[4, 4, 4], &s, &cfg).unwrap();
        assert_eq!(a, b);
        let c = ddim_sample_seeded::<f32>(&stub, &[4, 4, 4], &s, &DdimConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn skin_replace_examples() {
        let s = NoiseSchedule::default();
        let cfg = DdimConfig { steps: 10, seed: 1, ..Default::default() };
        let stub = LinearStub { schedule: s.clone(), data_var: 0.5 };
        let zt = gaussian::<f64>(&[2, 4, 4], 1);
        let target = gaussian::<f64>(&[2, 4, 4], 2).map(|v| 0.6 * v);
        let traj = ddim_invert_trajectory(&stub, &target, &s, &cfg).unwrap();
        let skin = Mask::from_fn(4, 4, |r, _| r < 2);

        let plain = ddim_sample(&stub, zt.clone(), &s, &cfg).unwrap();
        let n0 = skin_latent_replace(&stub, zt.clone(), &traj, &skin, 0, &s, &cfg).unwrap();
        assert_eq!(plain, n0);

        let full = skin_latent_replace(&stub, zt.clone(), &traj, &Mask::ones(4, 4), 10, &s, &cfg).unwrap();
        let mae = full.zip_map(&target, |a, b| (a - b).abs()).unwrap().sum() / 32.0;
        assert!(mae < 1e-3, "{mae}");

        // the stub acts per cell, so cells outside the mask follow the plain run
        let part = skin_latent_replace(&stub, zt, &traj, &skin, 10, &s, &cfg).unwrap();
        for j in 0..32 {
            if j % 16 >= 8 {
                assert_eq!(part.data()[j], plain.data()[j]);
            } else {
                assert!((part.data()[j] - target.data()[j]).abs() < 1e-2);
            }
        }
        assert!(skin_latent_replace(&stub, gaussian(&[2, 4, 4], 1), &traj, &skin, 11, &s, &cfg).is_err());
    }
}
