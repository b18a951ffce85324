//! Named parameter sets, weight initialization, and the Adam optimizer.

use std::collections::BTreeMap;

use crate::artifact::{ArrayMap, NamedArray};
use crate::autograd::{Gradients, Graph, Var};
use crate::error::{LdpError, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Gaussian-initialized tensor with standard deviation `sqrt(gain / fan_in)`.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut RandomSource) {
        let std = (gain / fan_in as f64).sqrt();
        let mut t = rng.normal_tensor(shape);
        t.data_mut().iter_mut().for_each(|v| *v *= std);
        self.insert(name, t);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.params.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone()))).collect(),
        }
    }

    /// Registers every parameter as a constant (no weight gradients are computed).
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.params.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    pub fn round_to_f32(&mut self) {
        self.params.values_mut().for_each(Tensor::round_to_f32);
    }

    /// Writes each parameter under `prefix + name`.
    pub fn write_arrays(&self, prefix: &str, out: &mut ArrayMap) {
        for (k, t) in &self.params {
            out.insert(format!("{prefix}{k}"), NamedArray::from_tensor(t));
        }
    }

    /// Reads back every array whose name starts with `prefix`.
    pub fn read_arrays(prefix: &str, arrays: &ArrayMap) -> Self {
        Self {
            params: arrays
                .iter()
                .filter_map(|(k, a)| k.strip_prefix(prefix).map(|n| (n.to_string(), a.to_tensor())))
                .collect(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `reference`.
    pub fn check_layout(&self, reference: &ParamStore, what: &str) -> Result<()> {
        for (k, t) in &reference.params {
            match self.params.get(k) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(LdpError::Shape(format!(
                        "{what}: parameter {k:?} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(LdpError::Shape(format!("{what}: missing parameter {k:?}"))),
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(LdpError::Shape(format!("{what}: unexpected parameter {extra:?}")));
        }
        if !self.all_finite() {
            return Err(LdpError::NonFinite(what.to_string()));
        }
        Ok(())
    }
}

/// Parameters registered on one graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    /// Gradient per parameter name (zeros for unused parameters).
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.get_or_zeros(*v))).collect()
    }

    pub fn conv(&self, x: Var<'g>, name: &str, stride: usize, pad: usize) -> Var<'g> {
        x.conv2d(self.get(&format!("{name}.w")), Some(self.get(&format!("{name}.b"))), stride, pad)
    }

    pub fn conv_t(&self, x: Var<'g>, name: &str, stride: usize, pad: usize) -> Var<'g> {
        x.conv_transpose2d(self.get(&format!("{name}.w")), Some(self.get(&format!("{name}.b"))), stride, pad)
    }

    pub fn linear(&self, x: Var<'g>, name: &str) -> Var<'g> {
        x.linear(self.get(&format!("{name}.w")), self.get(&format!("{name}.b")))
    }
}

/// Layer helpers that register `<name>.w` / `<name>.b`.
impl ParamStore {
    pub fn add_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut RandomSource) {
        self.init_normal(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, 2.0, rng);
        self.init_zeros(&format!("{name}.b"), &[cout]);
    }

    pub fn add_conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut RandomSource) {
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        self.init_normal(&format!("{name}.w"), &[cin, cout, k, k], fan_in, 2.0, rng);
        self.init_zeros(&format!("{name}.b"), &[cout]);
    }

    pub fn add_linear(&mut self, name: &str, nin: usize, nout: usize, rng: &mut RandomSource) {
        self.init_normal(&format!("{name}.w"), &[nout, nin], nin, 1.0, rng);
        self.init_zeros(&format!("{name}.b"), &[nout]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(LdpError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name:?}"));
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}
