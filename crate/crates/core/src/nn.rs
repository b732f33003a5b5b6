//! Named parameter storage, dense layers and the Adam optimizer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Versioned key to tensor map holding every learnable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        match self.tensors.get(name) {
            Some(t) => Ok(t),
            None => bail!(Incompatible, "missing parameter `{name}`"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Adds a dense layer `name.weight` (`fan_in x fan_out`) and `name.bias`.
    /// Weights are He-uniform; `zero` produces an all-zero layer.
    pub fn add_dense(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut ChaCha8Rng) {
        let mut w = Tensor::zeros(fan_in, fan_out);
        if !zero {
            let bound = libm::sqrt(6.0 / fan_in as f64);
            for x in w.data_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
        self.insert(format!("{name}.weight"), w);
        self.insert(format!("{name}.bias"), Tensor::zeros(1, fan_out));
    }

    /// Places every parameter on `tape`. Trainable parameters become
    /// variables, otherwise constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.variable(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Checks that `other` has exactly the same keys and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            bail!(Incompatible, "parameter count {} differs from expected {}", other.len(), self.len());
        }
        for (k, t) in &self.tensors {
            match other.tensors.get(k) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => bail!(
                    Incompatible,
                    "parameter `{k}` has shape {:?}, expected {:?}",
                    o.shape(),
                    t.shape()
                ),
                None => bail!(Incompatible, "missing parameter `{k}`"),
            }
        }
        Ok(())
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects the gradient of every bound parameter, zero when the
    /// parameter did not influence the root.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = match grads.get(*v) {
                    Some(g) => g.clone(),
                    None => {
                        let (r, c) = tape.value(*v).shape();
                        Tensor::zeros(r, c)
                    }
                };
                (k.clone(), g)
            })
            .collect()
    }
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// `x W + b` for the layer registered under `name`.
pub fn dense(tape: &mut Tape, b: &Bindings, name: &str, x: Var) -> Var {
    let w = b.var(&format!("{name}.weight"));
    let bias = b.var(&format!("{name}.bias"));
    let h = tape.matmul(x, w);
    tape.add_row(h, bias)
}

/// Stack of dense layers `name.0`, `name.1`, ... with ReLU between them.
/// The last layer is followed by a ReLU only when `relu_last` is set.
pub fn mlp(tape: &mut Tape, b: &Bindings, name: &str, layers: usize, x: Var, relu_last: bool) -> Var {
    let mut h = x;
    for i in 0..layers {
        h = dense(tape, b, &format!("{name}.{i}"), h);
        if i + 1 < layers || relu_last {
            h = tape.relu(h);
        }
    }
    h
}

/// Registers the layers used by [`mlp`] for the given widths.
pub fn add_mlp(store: &mut ParamStore, name: &str, widths: &[usize], zero_last: bool, rng: &mut ChaCha8Rng) {
    let n = widths.len() - 1;
    for i in 0..n {
        store.add_dense(&format!("{name}.{i}"), widths[i], widths[i + 1], zero_last && i + 1 == n, rng);
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    libm::sqrt(grads.values().map(Tensor::sum_squares).sum())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: ParamStore,
    pub second: ParamStore,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (k, t) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(t.rows(), t.cols()));
            }
            z
        };
        Self {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (name, g) in grads {
            let (Some(p), Some(m), Some(v)) = (
                params.get_mut(name),
                self.first.get_mut(name),
                self.second.get_mut(name),
            ) else {
                bail!(Incompatible, "optimizer has no state for `{name}`");
            };
            if p.shape() != g.shape() {
                bail!(Argument, "gradient shape mismatch for `{}`", name.to_string());
            }
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fresh_adam_step_moves_against_gradient_sign() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_vec(1, 3, alloc::vec![0.5, -0.5, 2.0]).unwrap());
        let mut opt = Adam::new(&p);
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::from_vec(1, 3, alloc::vec![3.0, -0.01, 0.0]).unwrap());
        opt.update(&mut p, &g, 0.1).unwrap();
        let d = p.get("a").unwrap().data();
        // First bias-corrected step has magnitude ~lr regardless of gradient scale.
        assert!((d[0] - 0.4).abs() < 1e-6);
        assert!((d[1] - -0.4).abs() < 1e-4);
        assert_eq!(d[2], 2.0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        p.add_dense("l", 3, 4, false, &mut rng);
        let before = p.clone();
        let mut opt = Adam::new(&p);
        let mut g = BTreeMap::new();
        for (k, t) in p.iter() {
            g.insert(k.clone(), Tensor::full(t.rows(), t.cols(), 1.0));
        }
        opt.update(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::from_vec(1, 2, alloc::vec![3.0, 4.0]).unwrap());
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
