use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Elem, Gradients, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};

pub type GradMap<T> = BTreeMap<String, Vec<T>>;

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Named parameters with their AdamW moment estimates.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let n = value.numel();
        self.params.insert(
            name,
            Param {
                value,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        );
        Ok(())
    }

    /// Inserts a tensor drawn from `N(0, std²)`.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| T::of(normal.sample(rng)));
        self.insert(name, t)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::of(v)))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(dim_err!("parameter {name}: shape {:?} vs {:?}", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            m: conv(&p.m),
                            v: conv(&p.v),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }

    /// One decoupled-weight-decay Adam update. Every parameter must have a
    /// gradient of matching size.
    pub fn adamw_step(&mut self, grads: &GradMap<T>, opt: &AdamW) -> Result<()> {
        for (name, p) in &self.params {
            match grads.get(name) {
                None => return Err(Error::Contract(format!("missing gradient for {name}"))),
                Some(g) if g.len() != p.value.numel() => {
                    return Err(dim_err!("gradient for {name} has {} entries, expected {}", g.len(), p.value.numel()))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - opt.beta1.powf(t);
        let bc2 = 1.0 - opt.beta2.powf(t);
        let (b1, b2) = (T::of(opt.beta1), T::of(opt.beta2));
        let decay = T::of(1.0 - opt.lr * opt.weight_decay);
        for (name, p) in self.params.iter_mut() {
            let g = &grads[name];
            let vals = p.value.data_mut();
            for i in 0..vals.len() {
                p.m[i] = b1 * p.m[i] + (T::one() - b1) * g[i];
                p.v[i] = b2 * p.v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = p.m[i].as_f64() / bc1;
                let vhat = p.v[i].as_f64() / bc2;
                vals[i] = vals[i] * decay - T::of(opt.lr * mhat / (vhat.sqrt() + opt.eps));
            }
        }
        Ok(())
    }
}

/// Lazily places parameters from a store onto a tape.
pub struct Bindings<'t, 'p, T: Elem> {
    tape: &'t Tape<T>,
    store: Option<&'p ParamStore<T>>,
    bound: RefCell<BTreeMap<String, Var<'t, T>>>,
    trainable: bool,
}

impl<'t, 'p, T: Elem> Bindings<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, store: &'p ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            store: Some(store),
            bound: RefCell::new(BTreeMap::new()),
            trainable,
        }
    }

    /// Bindings over vars that already live on `tape`.
    pub fn from_vars(tape: &'t Tape<T>, vars: impl IntoIterator<Item = (String, Var<'t, T>)>) -> Self {
        Self {
            tape,
            store: None,
            bound: RefCell::new(vars.into_iter().collect()),
            trainable: true,
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self
            .store
            .and_then(|s| s.get(name))
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?
            .clone();
        let v = self.tape.leaf(value, self.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.borrow().contains_key(name) || self.store.is_some_and(|s| s.get(name).is_some())
    }

    /// Gradients for every bound parameter; unreachable ones read as zero.
    pub fn collect(&self, grads: &mut Gradients<T>) -> GradMap<T> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| vec![T::zero(); v.numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Sums gradient maps in iteration order, then scales by `scale`.
pub fn reduce_grads<T: Elem>(maps: Vec<GradMap<T>>, scale: f64) -> GradMap<T> {
    let mut out: GradMap<T> = BTreeMap::new();
    for m in maps {
        for (k, g) in m {
            match out.get_mut(&k) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => {
                    out.insert(k, g);
                }
            }
        }
    }
    let s = T::of(scale);
    for g in out.values_mut() {
        for v in g.iter_mut() {
            *v *= s;
        }
    }
    out
}
