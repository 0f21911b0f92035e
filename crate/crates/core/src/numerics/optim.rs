//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::graph::{Gradients, Graph, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f64> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn from_map(params: BTreeMap<String, Tensor<T>>) -> Self {
        Self { params }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values of every
    /// parameter whose name starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Loads every parameter into `g`. Names accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let v = if trainable(name) {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    /// Gradients of every differentiable bound parameter.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, &v)| g.requires_grad(v))
            .map(|(name, &v)| (name.clone(), grads.wrt(g, v)))
            .collect()
    }
}

/// Adds `b` into `a` key by key.
pub fn accumulate_grads<T: Scalar>(a: &mut BTreeMap<String, Tensor<T>>, b: BTreeMap<String, Tensor<T>>) {
    for (k, v) in b {
        match a.get_mut(&k) {
            Some(t) => {
                for (x, y) in t.data_mut().iter_mut().zip(v.data()) {
                    *x = *x + *y;
                }
            }
            None => {
                a.insert(k, v);
            }
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f64> {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Returns
    /// the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adam" });
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let cfg = &self.config;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let lr = cfg.lr;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.numel()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * T::from_f64(clip);
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = mi.as_f64() / bc1;
                let vhat = vi.as_f64() / bc2;
                *x = *x - T::from_f64(lr * mhat / (vhat.sqrt() + cfg.eps));
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            clip_norm: None,
            ..Default::default()
        });
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = ps.bind(&mut g, |_| true).unwrap();
            let l = g.sum_sq(b.get("w").unwrap()).unwrap();
            let grads = g.backward(l).unwrap();
            opt.step(&mut ps, &b.grads(&g, &grads)).unwrap();
        }
        assert!(ps.get("w").unwrap().data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn prefix_hash_ignores_other_prefixes() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("video.a", Tensor::scalar(1.0));
        ps.insert("audio.a", Tensor::scalar(1.0));
        let h = ps.hash_prefix("video.");
        ps.insert("audio.a", Tensor::scalar(2.0));
        assert_eq!(h, ps.hash_prefix("video."));
        ps.insert("video.a", Tensor::scalar(2.0));
        assert_ne!(h, ps.hash_prefix("video."));
    }
}
