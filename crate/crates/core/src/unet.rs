//! Latent denoising UNet conditioned on the masked-image latent, the keep
//! mask and the fused condition map.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::injection::{self, CrossWeights, InjectionMode, Interp};
use crate::nn::{self, Init};
use crate::tensor::ops::{attention, from_tokens, linear, to_tokens};
use crate::tensor::{concat, Bindings, Elem, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub base: usize,
    pub mult: Vec<usize>,
    /// Levels (0 = full latent resolution) carrying an attention block.
    pub attn_levels: Vec<usize>,
    pub groups: usize,
    pub time_dim: usize,
    pub latent_channels: usize,
    pub cond_dim: usize,
    pub mode: InjectionMode,
    pub lambda: f64,
    pub interp: Interp,
    pub timesteps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base: 32,
            mult: vec![1, 2, 4],
            attn_levels: vec![0, 1, 2],
            groups: 8,
            time_dim: 32,
            latent_channels: 48,
            cond_dim: 32,
            mode: InjectionMode::AddInCA,
            lambda: 1.0,
            interp: Interp::Bilinear,
            timesteps: 1000,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mult.len() < 2 {
            return Err(Error::Config("unet needs at least 2 levels".into()));
        }
        if self.base == 0 || self.mult.contains(&0) || self.latent_channels == 0 || self.cond_dim == 0 {
            return Err(Error::Config("unet widths must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("unet.time_dim must be even and positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("inject.lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if let Some(l) = self.attn_levels.iter().find(|&&l| l >= self.mult.len()) {
            return Err(Error::Config(format!("attention level {l} outside 0..{}", self.mult.len())));
        }
        if (self.mode.adds_in_attention() || self.mode.cross_attends() || self.mode.per_part()) && self.attn_levels.is_empty() {
            return Err(Error::Config(format!("injection mode {} needs at least one attention level", self.mode)));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.mult.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base * self.mult[level]
    }

    fn temb_width(&self) -> usize {
        4 * self.base
    }

    fn has_attn(&self, level: usize) -> bool {
        self.attn_levels.contains(&level)
    }

    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }
}

pub fn init<T: Elem>(store: &mut ParamStore<T>, cfg: &UNetConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let te = cfg.temb_width();
    nn::init_linear(store, "unet.temb.fc1", cfg.time_dim, te, true, Init::Fan, rng)?;
    nn::init_linear(store, "unet.temb.fc2", te, te, true, Init::Fan, rng)?;
    nn::init_conv(store, "unet.in", cfg.input_channels(), cfg.base, 3, Init::Fan, rng)?;
    let mut cin = cfg.base;
    for l in 0..cfg.levels() {
        let c = cfg.channels(l);
        init_res(store, cfg, &format!("unet.down{l}"), cin, c, rng)?;
        if l + 1 < cfg.levels() {
            nn::init_conv(store, &format!("unet.ds{l}"), c, c, 2, Init::Fan, rng)?;
        }
        cin = c;
    }
    for l in (0..cfg.levels()).rev() {
        let c = cfg.channels(l);
        let cin = if l + 1 == cfg.levels() { c } else { 2 * c };
        init_res(store, cfg, &format!("unet.up{l}"), cin, c, rng)?;
        if cfg.has_attn(l) {
            init_attn(store, cfg, &format!("unet.attn{l}"), c, rng)?;
        }
        if l > 0 {
            nn::init_conv(store, &format!("unet.us{l}"), c, cfg.channels(l - 1), 3, Init::Fan, rng)?;
        }
    }
    nn::init_norm(store, "unet.out.norm", cfg.base)?;
    nn::init_conv(store, "unet.out.conv", cfg.base, cfg.latent_channels, 3, Init::Zero, rng)?;
    nn::init_linear(store, "unet.gate", te, cfg.latent_channels, false, Init::Zero, rng)?;
    store.insert_const("unet.gate.b", &[cfg.latent_channels], 1.0)
}

fn init_res<T: Elem>(store: &mut ParamStore<T>, cfg: &UNetConfig, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    nn::init_norm(store, &format!("{name}.norm1"), cin)?;
    nn::init_conv(store, &format!("{name}.conv1"), cin, cout, 3, Init::Fan, rng)?;
    nn::init_linear(store, &format!("{name}.temb"), cfg.temb_width(), cout, true, Init::Fan, rng)?;
    nn::init_norm(store, &format!("{name}.norm2"), cout)?;
    nn::init_conv(store, &format!("{name}.conv2"), cout, cout, 3, Init::Zero, rng)?;
    if cin != cout {
        nn::init_conv(store, &format!("{name}.skip"), cin, cout, 1, Init::Fan, rng)?;
    }
    if cfg.mode.adds_in_conv() {
        nn::init_linear(store, &format!("{name}.inject"), cfg.cond_dim, cout, false, Init::Fan, rng)?;
    }
    Ok(())
}

fn init_attn<T: Elem>(store: &mut ParamStore<T>, cfg: &UNetConfig, name: &str, c: usize, rng: &mut impl Rng) -> Result<()> {
    nn::init_norm(store, &format!("{name}.norm"), c)?;
    for p in ["q", "k", "v"] {
        nn::init_linear(store, &format!("{name}.{p}"), c, c, true, Init::Fan, rng)?;
    }
    nn::init_linear(store, &format!("{name}.o"), c, c, true, Init::Zero, rng)?;
    if cfg.mode.cross_attends() {
        nn::init_linear(store, &format!("{name}.ck"), cfg.cond_dim, c, false, Init::Fan, rng)?;
        nn::init_linear(store, &format!("{name}.cv"), cfg.cond_dim, c, false, Init::Fan, rng)?;
    }
    if cfg.mode.per_part() {
        for i in 0..4 {
            nn::init_linear(store, &format!("{name}.ck{i}"), cfg.cond_dim, c, false, Init::Fan, rng)?;
            nn::init_linear(store, &format!("{name}.cv{i}"), cfg.cond_dim, c, false, Init::Fan, rng)?;
        }
    }
    if cfg.mode.adds_in_attention() {
        nn::init_linear(store, &format!("{name}.inject"), cfg.cond_dim, c, false, Init::Fan, rng)?;
    }
    Ok(())
}

/// Interleaved sinusoidal embedding: `e[2i] = sin(t·ωᵢ)`, `e[2i+1] = cos(t·ωᵢ)`
/// with `ωᵢ = 10000^(−2i/dim)`.
pub fn time_embed<T: Elem>(t: usize, dim: usize, timesteps: usize) -> Result<Tensor<T>> {
    if t >= timesteps {
        return Err(Error::Contract(format!("timestep {t} outside 0..{timesteps}")));
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(dim_err!("time embedding width {dim} must be even"));
    }
    let data = (0..dim)
        .map(|j| {
            let i = j / 2;
            let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
            let a = t as f64 * w;
            T::of(if j % 2 == 0 { a.sin() } else { a.cos() })
        })
        .collect();
    Tensor::new(&[dim], data)
}

/// Conv(Concat(x_m, keep, z_t)) to the UNet base width.
pub fn concat_adjust<'t, T: Elem>(b: &Bindings<'t, '_, T>, x_m: Var<'t, T>, keep: Var<'t, T>, z_t: Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, h, w) = z_t.chw()?;
    let (_, kh, kw) = keep.chw()?;
    let (_, mh, mw) = x_m.chw()?;
    if (kh, kw) != (h, w) || (mh, mw) != (h, w) || keep.shape()[0] != 1 {
        return Err(dim_err!("concat inputs x_m {:?}, keep {:?}, z_t {:?}", x_m.shape(), keep.shape(), z_t.shape()));
    }
    nn::conv(b, "unet.in", concat(&[x_m, keep, z_t])?, 1, 1)
}

/// Condition signals: the aggregated map C and, for the per-part baseline,
/// the four part maps Cᵢ.
#[derive(Clone, Copy)]
pub struct Condition<'t, T: Elem> {
    pub map: Option<Var<'t, T>>,
    pub parts: Option<[Var<'t, T>; 4]>,
}

impl<'t, T: Elem> Condition<'t, T> {
    fn map(&self) -> Result<Var<'t, T>> {
        self.map.ok_or_else(|| Error::Contract("injection mode needs the aggregated condition map".into()))
    }

    fn parts(&self) -> Result<[Var<'t, T>; 4]> {
        self.parts.ok_or_else(|| Error::Contract("multi cross-attention needs per-part condition maps".into()))
    }
}

#[derive(Clone, Copy)]
pub struct DenoiseInput<'t, T: Elem> {
    pub x_m: Var<'t, T>,
    pub keep: Var<'t, T>,
    pub z_t: Var<'t, T>,
    pub t: usize,
    pub cond: Condition<'t, T>,
}

struct Ctx<'a, 't, 'p, T: Elem> {
    b: &'a Bindings<'t, 'p, T>,
    cfg: &'a UNetConfig,
    cond: Condition<'t, T>,
    temb: Var<'t, T>,
    sites: usize,
}

impl<'t, T: Elem> Ctx<'_, 't, '_, T> {
    fn injecting(&self) -> bool {
        self.cfg.lambda != 0.0
    }

    fn res(&mut self, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (b, cfg) = (self.b, self.cfg);
        let cin = x.shape()[0];
        let h = nn::norm(b, &format!("{name}.norm1"), x, nn::groups_for(cin, cfg.groups))?.silu()?;
        let mut h = nn::conv(b, &format!("{name}.conv1"), h, 1, 1)?;
        let cout = h.shape()[0];
        let tb = linear(self.temb, b.get(&format!("{name}.temb.w"))?, Some(b.get(&format!("{name}.temb.b"))?))?;
        h = h.add_channel_bias(tb.reshape(&[cout])?)?;
        if cfg.mode.adds_in_conv() && self.injecting() {
            h = injection::add_inject(h, self.cond.map()?, b.get(&format!("{name}.inject.w"))?, cfg.lambda, cfg.interp)?;
            self.sites += 1;
        }
        let h = nn::norm(b, &format!("{name}.norm2"), h, nn::groups_for(cout, cfg.groups))?.silu()?;
        let h = nn::conv(b, &format!("{name}.conv2"), h, 1, 1)?;
        let skip = if b.has(&format!("{name}.skip.w")) { nn::conv(b, &format!("{name}.skip"), x, 1, 0)? } else { x };
        skip.add(h)
    }

    fn attn(&mut self, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (b, cfg) = (self.b, self.cfg);
        let (c, h, w) = x.chw()?;
        let tokens = to_tokens(nn::norm(b, &format!("{name}.norm"), x, nn::groups_for(c, cfg.groups))?)?;
        let proj = |p: &str| linear(tokens, b.get(&format!("{name}.{p}.w"))?, Some(b.get(&format!("{name}.{p}.b"))?));
        let q = proj("q")?;
        let mut a = attention(q, proj("k")?, proj("v")?)?;
        let weights = |suffix: &str| -> Result<CrossWeights<'t, T>> {
            Ok(CrossWeights { wk: b.get(&format!("{name}.ck{suffix}.w"))?, wv: b.get(&format!("{name}.cv{suffix}.w"))? })
        };
        if self.injecting() {
            if cfg.mode.cross_attends() {
                a = injection::cross_attn_inject(q, a, self.cond.map()?, weights("")?, cfg.lambda)?;
                self.sites += 1;
            } else if cfg.mode.per_part() {
                let ws = [weights("0")?, weights("1")?, weights("2")?, weights("3")?];
                a = injection::multi_cross_attn_inject(q, a, &self.cond.parts()?, &ws, cfg.lambda)?;
                self.sites += 1;
            }
        }
        let mut o = from_tokens(linear(a, b.get(&format!("{name}.o.w"))?, Some(b.get(&format!("{name}.o.b"))?))?, h, w)?;
        if cfg.mode.adds_in_attention() && self.injecting() {
            o = injection::add_inject(o, self.cond.map()?, b.get(&format!("{name}.inject.w"))?, cfg.lambda, cfg.interp)?;
            self.sites += 1;
        }
        x.add(o)
    }
}

/// ε̂ = ε_θ(z_t, t, x_m, keep, C) and the number of injection sites that fired.
pub fn forward<'t, T: Elem>(b: &Bindings<'t, '_, T>, cfg: &UNetConfig, input: &DenoiseInput<'t, T>) -> Result<(Var<'t, T>, usize)> {
    let (_, h, w) = input.z_t.chw()?;
    let div = 1 << (cfg.levels() - 1);
    if h % div != 0 || w % div != 0 {
        return Err(dim_err!("latent {h}x{w} not divisible by {div} for {} levels", cfg.levels()));
    }
    let tape = b.tape();
    let e = tape.constant(time_embed::<T>(input.t, cfg.time_dim, cfg.timesteps)?.reshape(&[1, cfg.time_dim])?);
    let e = linear(e, b.get("unet.temb.fc1.w")?, Some(b.get("unet.temb.fc1.b")?))?.silu()?;
    let e = linear(e, b.get("unet.temb.fc2.w")?, Some(b.get("unet.temb.fc2.b")?))?;
    let mut ctx = Ctx { b, cfg, cond: input.cond, temb: e.silu()?, sites: 0 };

    let mut x = concat_adjust(b, input.x_m, input.keep, input.z_t)?;
    let mut skips = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        let s = ctx.res(&format!("unet.down{l}"), x)?;
        skips.push(s);
        if l + 1 < cfg.levels() {
            x = nn::conv(b, &format!("unet.ds{l}"), s, 2, 0)?;
        }
    }
    let mut x = skips[cfg.levels() - 1];
    for l in (0..cfg.levels()).rev() {
        if l + 1 < cfg.levels() {
            x = concat(&[x, skips[l]])?;
        }
        x = ctx.res(&format!("unet.up{l}"), x)?;
        if cfg.has_attn(l) {
            x = ctx.attn(&format!("unet.attn{l}"), x)?;
        }
        if l > 0 {
            let (_, xh, xw) = x.chw()?;
            x = nn::conv(b, &format!("unet.us{l}"), x.resize(2 * xh, 2 * xw)?, 1, 1)?;
        }
    }
    let x = nn::norm(b, "unet.out.norm", x, nn::groups_for(cfg.base, cfg.groups))?.silu()?;
    let head = nn::conv(b, "unet.out.conv", x, 1, 1)?;
    // The latent is wider than the base width, so z_t also reaches the
    // output directly through a per-channel gate γ(t).
    let gate = linear(ctx.temb, b.get("unet.gate.w")?, Some(b.get("unet.gate.b")?))?;
    let spread = tape.constant(Tensor::full(&[h * w, 1], T::one())).matmul(gate)?;
    let gated = from_tokens(to_tokens(input.z_t)?.mul(spread)?, h, w)?;
    Ok((head.add(gated)?, ctx.sites))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(mode: InjectionMode) -> UNetConfig {
        UNetConfig {
            base: 8,
            mult: vec![1, 2],
            attn_levels: vec![0, 1],
            groups: 2,
            time_dim: 8,
            latent_channels: 3,
            cond_dim: 4,
            mode,
            ..Default::default()
        }
    }

    /// Parameters with every tensor randomized so no path is gated by a zero init.
    fn random_store(cfg: &UNetConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init(&mut s, cfg, &mut rng).unwrap();
        let names: Vec<String> = s.names().map(String::from).collect();
        for n in names {
            let shape = s.get(&n).unwrap().shape().to_vec();
            s.set(&n, Tensor::from_fn(&shape, |_| rng.gen_range(-0.4..0.4))).unwrap();
        }
        s
    }

    fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    struct Inputs {
        x_m: Tensor<f64>,
        keep: Tensor<f64>,
        z: Tensor<f64>,
        c: Tensor<f64>,
        parts: [Tensor<f64>; 4],
    }

    fn inputs(cfg: &UNetConfig, n: usize, seed: u64) -> Inputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lc = cfg.latent_channels;
        Inputs {
            x_m: rand_t(&[lc, n, n], &mut rng),
            keep: Tensor::from_fn(&[1, n, n], |i| (i / n + i % n).is_multiple_of(3) as u8 as f64),
            z: rand_t(&[lc, n, n], &mut rng),
            c: rand_t(&[cfg.cond_dim, n, n], &mut rng),
            parts: std::array::from_fn(|_| rand_t(&[cfg.cond_dim, n, n], &mut rng)),
        }
    }

    fn run(cfg: &UNetConfig, s: &ParamStore<f64>, inp: &Inputs, t: usize) -> (Tensor<f64>, usize) {
        let tape = Tape::inference();
        let b = Bindings::new(&tape, s, false);
        let parts = inp.parts.clone().map(|p| tape.constant(p));
        let di = DenoiseInput {
            x_m: tape.constant(inp.x_m.clone()),
            keep: tape.constant(inp.keep.clone()),
            z_t: tape.constant(inp.z.clone()),
            t,
            cond: Condition { map: Some(tape.constant(inp.c.clone())), parts: Some(parts) },
        };
        let (out, n) = forward(&b, cfg, &di).unwrap();
        (out.value(), n)
    }

    #[test]
    fn time_embed_examples() {
        let e = time_embed::<f64>(0, 8, 1000).unwrap();
        for (j, v) in e.data().iter().enumerate() {
            assert_eq!(*v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        let e = time_embed::<f64>(1, 4, 1000).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in e.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let all: Vec<_> = (0..1000).map(|t| time_embed::<f64>(t, 32, 1000).unwrap()).collect();
        for t in 1..1000 {
            assert_ne!(all[t], all[t - 1]);
        }
        assert!(matches!(time_embed::<f64>(1000, 8, 1000), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_adjust_examples() {
        let cfg = tiny(InjectionMode::AddInCA);
        assert_eq!(cfg.input_channels(), 7);
        let mut s = random_store(&cfg, 1);
        s.set("unet.in.w", Tensor::zeros(&[8, 7, 3, 3])).unwrap();
        s.set("unet.in.b", Tensor::from_fn(&[8], |i| i as f64)).unwrap();
        let tape = Tape::inference();
        let b = Bindings::new(&tape, &s, false);
        let inp = inputs(&cfg, 4, 2);
        let out = concat_adjust(&b, tape.constant(inp.x_m.clone()), tape.constant(inp.keep.clone()), tape.constant(inp.z.clone()))
            .unwrap()
            .value();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, (i / 16) as f64);
        }
        let bad = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(
            concat_adjust(&b, tape.constant(inp.x_m), bad, tape.constant(inp.z)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn output_shape_and_sites_for_every_mode() {
        for mode in InjectionMode::ALL {
            let cfg = tiny(mode);
            let s = random_store(&cfg, 3);
            let inp = inputs(&cfg, 8, 4);
            let (out, sites) = run(&cfg, &s, &inp, 17);
            assert_eq!(out.shape(), &[3, 8, 8], "{mode}");
            let expect = match mode {
                InjectionMode::AddInCA | InjectionMode::HierarchyAddInCA => 2,
                InjectionMode::AddInConv => 4,
                InjectionMode::CrossAttn | InjectionMode::MultiCrossAttn => 2,
                InjectionMode::CrossAttnPlusAddInCA => 4,
                InjectionMode::CrossAttnPlusAddInConv => 6,
            };
            assert_eq!(sites, expect, "{mode}");
        }
    }

    #[test]
    fn lambda_zero_matches_zero_condition() {
        for mode in [InjectionMode::AddInCA, InjectionMode::AddInConv, InjectionMode::CrossAttnPlusAddInConv] {
            let cfg = UNetConfig { lambda: 0.0, ..tiny(mode) };
            let s = random_store(&cfg, 5);
            let mut inp = inputs(&cfg, 8, 6);
            let (a, sites) = run(&cfg, &s, &inp, 100);
            assert_eq!(sites, 0);
            inp.c = Tensor::zeros(inp.c.shape());
            let (b, _) = run(&cfg, &s, &inp, 100);
            assert_eq!(a, b);
            if !mode.cross_attends() {
                let on = UNetConfig { lambda: 1.0, ..cfg.clone() };
                assert_eq!(run(&on, &s, &inp, 100).0, a);
            }
        }
    }

    #[test]
    fn condition_changes_output_when_injecting() {
        let cfg = tiny(InjectionMode::AddInCA);
        let s = random_store(&cfg, 7);
        let mut inp = inputs(&cfg, 8, 8);
        let (a, _) = run(&cfg, &s, &inp, 10);
        inp.c = inp.c.map(|v| v * 2.0);
        assert!(run(&cfg, &s, &inp, 10).0.max_abs_diff(&a) > 1e-6);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(InjectionMode::CrossAttnPlusAddInCA);
        let s = random_store(&cfg, 9);
        let inp = inputs(&cfg, 8, 10);
        assert_eq!(run(&cfg, &s, &inp, 999), run(&cfg, &s, &inp, 999));
    }

    #[test]
    fn default_init_predicts_noisy_latent() {
        let cfg = UNetConfig::default();
        let mut s = ParamStore::<f32>::new();
        init(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::inference();
        let b = Bindings::new(&tape, &s, false);
        let z = tape.constant(Tensor::full(&[48, 16, 16], 0.3));
        let c = tape.constant(Tensor::full(&[32, 16, 16], 0.1));
        let di = DenoiseInput {
            x_m: z,
            keep: tape.constant(Tensor::zeros(&[1, 16, 16])),
            z_t: z,
            t: 5,
            cond: Condition { map: Some(c), parts: None },
        };
        let (out, sites) = forward(&b, &cfg, &di).unwrap();
        assert_eq!(out.shape(), vec![48, 16, 16]);
        assert!(out.value().data().iter().all(|v| *v == 0.3));
        assert_eq!(sites, 3);
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig { mult: vec![1], ..Default::default() }.validate().is_err());
        assert!(UNetConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(UNetConfig { attn_levels: vec![3], ..Default::default() }.validate().is_err());
        assert!(UNetConfig { attn_levels: vec![], ..Default::default() }.validate().is_err());
        assert!(UNetConfig { attn_levels: vec![], mode: InjectionMode::AddInConv, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn gradient_check() {
        let cfg = UNetConfig {
            attn_levels: vec![1],
            latent_channels: 3,
            mode: InjectionMode::CrossAttnPlusAddInCA,
            ..tiny(InjectionMode::AddInCA)
        };
        let s = random_store(&cfg, 11);
        let inp = inputs(&cfg, 16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let report = crate::tensor::gradcheck::check_store(
            &s,
            &[inp.x_m, inp.z, inp.c],
            |b, x| {
                let keep = b.tape().constant(inp.keep.clone());
                let di = DenoiseInput { x_m: x[0], keep, z_t: x[1], t: 321, cond: Condition { map: Some(x[2]), parts: None } };
                forward(b, &cfg, &di)?.0.square()?.mean()
            },
            1e-5,
            Some(4),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
