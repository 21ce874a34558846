use super::params::ParamStore;
use super::tensor::Real;
use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adadelta { lr: f64, rho: f64, eps: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Adamax { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr, momentum: 0.0 }
    }

    pub fn adadelta() -> Self {
        Self::Adadelta { lr: 1.0, rho: 0.9, eps: 1e-6 }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adamax(lr: f64) -> Self {
        Self::Adamax { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Parses `sgd`, `adadelta`, `adam` or `adamax` with learning rate `lr`.
    pub fn parse(name: &str, lr: f64) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "sgd" => Self::sgd(lr),
            "adadelta" => Self::Adadelta { lr, rho: 0.9, eps: 1e-6 },
            "adam" => Self::adam(lr),
            "adamax" => Self::adamax(lr),
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adadelta { .. } => "adadelta",
            Self::Adam { .. } => "adam",
            Self::Adamax { .. } => "adamax",
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr, .. } | Self::Adadelta { lr, .. } | Self::Adam { lr, .. } | Self::Adamax { lr, .. } => lr,
        }
    }
}

/// Optimizer hyperparameters plus per-parameter slots. Slot `a` holds the
/// momentum / first moment / squared-gradient accumulator, slot `b` the
/// second moment / squared-update accumulator.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub kind: Optimizer,
    pub t: u64,
    slots: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: Optimizer) -> Self {
        Self { kind, t: 0, slots: Vec::new() }
    }

    /// Applies one update to every parameter listed in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(usize, Vec<T>)]) -> Result<()> {
        for (id, g) in grads {
            let n = store.get(*id).value.numel();
            if g.len() != n {
                return Err(NnError::ShapeMismatch(format!(
                    "gradient of {} has {} values, parameter has {n}",
                    store.get(*id).name,
                    g.len()
                )));
            }
        }
        self.t += 1;
        let t = self.t as f64;
        for (id, g) in grads {
            if *id >= self.slots.len() {
                self.slots.resize_with(id + 1, || None);
            }
            let p = store.get_mut(*id).value.data_mut();
            let (a, b) = self.slots[*id].get_or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            let f = T::from_f64;
            match self.kind {
                Optimizer::Sgd { lr, momentum } => {
                    for i in 0..p.len() {
                        if momentum == 0.0 {
                            p[i] -= f(lr) * g[i];
                        } else {
                            a[i] = f(momentum) * a[i] + g[i];
                            p[i] -= f(lr) * a[i];
                        }
                    }
                }
                Optimizer::Adadelta { lr, rho, eps } => {
                    for i in 0..p.len() {
                        a[i] = f(rho) * a[i] + f(1.0 - rho) * g[i] * g[i];
                        let dx = ((b[i] + f(eps)).sqrt() / (a[i] + f(eps)).sqrt()) * g[i];
                        b[i] = f(rho) * b[i] + f(1.0 - rho) * dx * dx;
                        p[i] -= f(lr) * dx;
                    }
                }
                Optimizer::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for i in 0..p.len() {
                        a[i] = f(beta1) * a[i] + f(1.0 - beta1) * g[i];
                        b[i] = f(beta2) * b[i] + f(1.0 - beta2) * g[i] * g[i];
                        let mhat = a[i] / f(c1);
                        let vhat = b[i] / f(c2);
                        p[i] -= f(lr) * mhat / (vhat.sqrt() + f(eps));
                    }
                }
                Optimizer::Adamax { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powf(t);
                    for i in 0..p.len() {
                        a[i] = f(beta1) * a[i] + f(1.0 - beta1) * g[i];
                        b[i] = (f(beta2) * b[i]).max(g[i].abs());
                        p[i] -= f(lr / c1) * a[i] / (b[i] + f(eps));
                    }
                }
            }
        }
        Ok(())
    }
}
