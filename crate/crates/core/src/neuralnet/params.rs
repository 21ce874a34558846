use rand::Rng;

use super::graph::{BnUpdate, Graph, Mode, Padding, Var};
use super::tensor::{Real, Tensor};
use super::{NnError, Result};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// False for buffers such as batchnorm running statistics.
    pub trainable: bool,
    /// Frozen parameters keep `trainable` but take no gradient.
    pub requires_grad: bool,
}

impl<T> Param<T> {
    pub fn takes_grad(&self) -> bool {
        self.trainable && self.requires_grad
    }
}

/// Named parameters and buffers of a network, addressed by insertion index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> usize {
        self.params.push(Param { name: name.into(), value, trainable, requires_grad: true });
        self.params.len() - 1
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn set_requires_grad(&mut self, id: usize, on: bool) {
        self.params[id].requires_grad = on;
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Commits batch statistics to the running buffers:
    /// `running ← (1 − m)·running + m·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::from_f64(BN_MOMENTUM);
        for u in updates {
            for (id, batch) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
                for (r, &b) in self.params[id].value.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                    requires_grad: p.requires_grad,
                })
                .collect(),
        }
    }

    /// Overwrites values by name from `(name, tensor)` pairs; every stored
    /// parameter must be present with a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "{}: checkpoint {:?} vs model {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

/// Convolution layer: He-uniform weights, zero bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: Padding,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<T> = (0..cout * fan_in).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::new(vec![cout, cin, k, k], w).expect("shape"), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]), true);
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm2d {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![c], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![c]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![c]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(vec![c], T::one()), false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batchnorm(x, gamma, beta, None)?;
                let (mean, var) = stats.expect("batch statistics");
                g.record_bn_update(BnUpdate { mean_id: self.running_mean, var_id: self.running_var, mean, var });
                Ok(y)
            }
            Mode::Eval => {
                let running = (
                    store.get(self.running_mean).value.data(),
                    store.get(self.running_var).value.data(),
                );
                Ok(g.batchnorm(x, gamma, beta, Some(running))?.0)
            }
        }
    }
}

/// `conv → ReLU → batchnorm`.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, 1, Padding::uniform(1), rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = g.relu(y);
        self.bn.forward(g, store, y, mode)
    }
}
