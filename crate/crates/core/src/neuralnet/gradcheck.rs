use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step relative to `max(1, |θ|)`.
    pub rel_step: f64,
    /// Denominator floor of the relative error, so that vanishing gradients
    /// are compared absolutely.
    pub abs_floor: f64,
    /// Entries probed per parameter; `None` probes all of them.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { rel_step: 1e-5, abs_floor: 1e-6, max_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Largest relative error per checked parameter.
    pub per_param: Vec<(String, f64)>,
    pub worst: Option<GradCheckEntry>,
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences, for every parameter that takes gradients.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(&mut g, store)?;
        Ok(g.value(v).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, entries_checked: 0, per_param: Vec::new(), worst: None };
    for (id, analytic) in &grads.params {
        let n = analytic.len();
        let idx: Vec<usize> = match cfg.max_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut worst_here = 0.0f64;
        for i in idx {
            let theta = store.get(*id).value.data()[i];
            let h = cfg.rel_step * theta.abs().max(1.0);
            store.get_mut(*id).value.data_mut()[i] = theta + h;
            let up = eval(store)?;
            store.get_mut(*id).value.data_mut()[i] = theta - h;
            let down = eval(store)?;
            store.get_mut(*id).value.data_mut()[i] = theta;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(analytic[i], numeric, cfg.abs_floor);
            report.entries_checked += 1;
            worst_here = worst_here.max(e);
            if e >= report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some(GradCheckEntry {
                    param: store.get(*id).name.clone(),
                    index: i,
                    analytic: analytic[i],
                    numeric,
                    rel_error: e,
                });
            }
        }
        report.per_param.push((store.get(*id).name.clone(), worst_here));
    }
    Ok(report)
}
