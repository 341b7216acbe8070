//! Central finite-difference gradient checks in `f64`.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the adjoint code it checks.

use rand::seq::index::sample;
use rand::Rng;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{attention, channel_linear, linear};
use super::{concat, Bindings, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` builds a scalar loss from leaves made of `inputs`. At most
/// `max_coords` coordinates per input are probed (all when `None`).
pub fn check<F, R>(inputs: &[Tensor<f64>], f: F, step: f64, max_coords: Option<usize>, rng: &mut R) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    R: Rng,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let g = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| g.get(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        Ok(loss.value().data()[0])
    };
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// [`check`] over every parameter of `store` plus `extra` inputs. `f`
/// receives bindings that resolve parameter names to the probed leaves.
pub fn check_store<F, R>(
    store: &ParamStore<f64>,
    extra: &[Tensor<f64>],
    f: F,
    step: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bindings<'t, '_, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    R: Rng,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).cloned().expect("listed name")).collect();
    inputs.extend_from_slice(extra);
    let np = names.len();
    check(
        &inputs,
        |tape, vars| {
            let b = Bindings::from_vars(tape, names.iter().cloned().zip(vars[..np].iter().copied()));
            f(&b, &vars[np..])
        },
        step,
        max_coords,
        rng,
    )
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// One check per differentiable primitive, with random inputs drawn from
/// `seed`. Returns the worst relative error per primitive.
pub fn primitive_cases(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>, rng: &mut ChaCha8Rng| {
        let r = check(&inputs, f, DEFAULT_STEP, None, rng)?;
        out.push((name, r.max_rel_err));
        Ok::<(), crate::Error>(())
    };
    // a fixed random projection turns any output into a scalar with generic gradients
    fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let p = tape.constant(Tensor::from_fn(&y.shape(), |_| r.gen_range(-1.0..1.0)));
        y.mul(p)?.sum()
    }
    let s = seed;
    let r = &mut rng;
    let ins = vec![randn(&[3, 4], r), randn(&[4, 2], r), randn(&[2], r)];
    run("linear", ins, &|tp, v| project(tp, linear(v[0], v[1], Some(v[2]))?, s), r)?;
    let ins = vec![randn(&[2, 5, 5], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)];
    run("conv2d", ins, &|tp, v| project(tp, v[0].conv2d(v[1], Some(v[2]), 2, 1)?, s), r)?;
    let ins = vec![randn(&[3, 4], r), randn(&[5, 4], r), randn(&[5, 4], r)];
    run("attention", ins, &|tp, v| project(tp, attention(v[0], v[1], v[2])?, s), r)?;
    let ins = vec![randn(&[2, 3, 4], r)];
    run("bilinear_resize", ins, &|tp, v| project(tp, v[0].resize(5, 3)?, s), r)?;
    let ins = vec![randn(&[4, 3, 3], r), randn(&[4], r), randn(&[4], r)];
    run("group_norm", ins, &|tp, v| project(tp, v[0].group_norm(v[1], v[2], 2, 1e-5)?, s), r)?;
    let ins = vec![randn(&[2, 6], r)];
    run("silu", ins, &|tp, v| project(tp, v[0].scale(2.0)?.silu()?, s), r)?;
    let ins = vec![randn(&[3, 4], r), randn(&[3, 4], r)];
    run("mul_sub_square", ins, &|_, v| v[0].mul(v[1])?.sub(v[1])?.square()?.mean(), r)?;
    let ins = vec![randn(&[3, 2, 2], r), randn(&[3, 2], r)];
    run("channel_linear", ins, &|tp, v| project(tp, channel_linear(v[0], v[1], None)?, s), r)?;
    let ins = vec![randn(&[2, 4, 5], r), randn(&[1, 4, 5], r)];
    run("concat_crop_place", ins, &|tp, v| {
        let c = concat(&[v[0], v[1]])?;
        project(tp, c.crop(1, 1, 2, 3)?.place(4, 6, 2, 2)?, s)
    }, r)?;
    let ins = vec![randn(&[2, 3], r), randn(&[3], r)];
    run("transpose_bias", ins, &|tp, v| project(tp, v[0].transpose()?.reshape(&[2, 3])?.add_row_bias(v[1])?, s), r)?;
    Ok(out)
}

