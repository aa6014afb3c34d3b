//! Named parameter blocks, the Adam optimizer and the momentum (EMA) update.

use std::collections::BTreeMap;

use crate::error::{GaitError, Result};

/// A dense row-major block of 64-bit values with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(GaitError::ShapeMismatch(format!(
                "shape {shape:?} holds {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered collection of named tensors. Iteration order is the name order,
/// which fixes the layout of checkpoints and the order of reductions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.blocks.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.blocks
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter block {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.blocks
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter block {name}"))
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self.get(name).data
    }

    pub fn data_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self.get_mut(name).data
    }

    /// Mutable access to two distinct blocks at once (weight and bias).
    pub fn pair_mut(&mut self, a: &str, b: &str) -> (&mut [f64], &mut [f64]) {
        let (mut ra, mut rb) = (None, None);
        for (k, v) in self.blocks.iter_mut() {
            if k == a {
                ra = Some(&mut v.data[..]);
            } else if k == b {
                rb = Some(&mut v.data[..]);
            }
        }
        (
            ra.unwrap_or_else(|| panic!("missing parameter block {a}")),
            rb.unwrap_or_else(|| panic!("missing parameter block {b}")),
        )
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.blocks.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.blocks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.blocks.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.blocks.keys()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.blocks.values().map(Tensor::len).sum()
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            blocks: self
                .blocks
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
                .collect(),
        }
    }

    /// Blocks whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        ParamStore {
            blocks: self
                .blocks
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts every block of `other`, replacing existing names.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.blocks.insert(k.clone(), v.clone());
        }
    }

    /// Elementwise `self += other`; both must have identical layouts.
    pub fn add_assign(&mut self, other: &ParamStore) {
        for (name, t) in self.blocks.iter_mut() {
            let o = other.get(name);
            for (a, b) in t.data.iter_mut().zip(&o.data) {
                *a += *b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.blocks.values_mut() {
            for v in t.data.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(GaitError::ShapeMismatch(format!(
                "{} blocks vs {} blocks",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (name, t) in &self.blocks {
            match other.blocks.get(name) {
                Some(o) if o.shape == t.shape => {}
                Some(o) => {
                    return Err(GaitError::ShapeMismatch(format!(
                        "{name}: {:?} vs {:?}",
                        t.shape, o.shape
                    )))
                }
                None => {
                    return Err(GaitError::ShapeMismatch(format!("{name} missing")));
                }
            }
        }
        Ok(())
    }
}

/// Sums per-sample gradient stores in slice order.
pub fn ordered_sum(parts: Vec<ParamStore>) -> Option<ParamStore> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next()?;
    for part in iter {
        acc.add_assign(&part);
    }
    Some(acc)
}

/// `target <- tau * target + (1 - tau) * online` for every target block; each
/// must have an online counterpart of the same shape.
pub fn ema_blocks(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    for (name, t) in target.iter_mut() {
        let Some(o) = online.try_get(name) else {
            return Err(GaitError::ShapeMismatch(format!(
                "{name} has no online counterpart"
            )));
        };
        if o.shape != t.shape {
            return Err(GaitError::ShapeMismatch(format!(
                "{name}: target {:?} vs online {:?}",
                t.shape, o.shape
            )));
        }
        if tau == 1.0 {
            continue;
        }
        if tau == 0.0 {
            t.data.copy_from_slice(&o.data);
            continue;
        }
        for (a, b) in t.data.iter_mut().zip(&o.data) {
            *a = tau * *a + (1.0 - tau) * *b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Blocks absent from `grads` are skipped.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            if !params.contains(name) {
                continue;
            }
            let p = params.data_mut(name);
            let m = self.m.data_mut(name);
            let v = self.v.data_mut(name);
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
