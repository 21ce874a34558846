use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{Inputs, Network};
use super::{Result, VddNetError};
use crate::dataset::{Sample, PLANE_ROLES};
use crate::neuralnet::{store_tensors, Graph, Mode, Optimizer, OptimizerState, Tensor};
use crate::raster::ChannelRole;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub validation_every: usize,
    /// Validation uses the first `val_limit` validation samples.
    pub val_limit: usize,
    pub class_weights: Option<[f32; 4]>,
    pub seed: u64,
    /// Where to write the parameters if the loss diverges.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30000,
            batch_size: 5,
            optimizer: Optimizer::sgd(0.1),
            validation_every: 10,
            val_limit: 20,
            class_weights: None,
            seed: 0,
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub best_iteration: usize,
    pub best_val_loss: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("iteration,train_loss,val_loss,val_acc\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.iteration, r.train_loss, r.val_loss, r.val_acc));
    }
    s
}

/// Stacks samples into network inputs (RGB and NIR / 255, depth as {0,1})
/// and flat labels.
pub fn batch_inputs(samples: &[&Sample]) -> Result<(Inputs<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| VddNetError::EmptyDataset("empty batch".into()))?;
    let (w, h) = first.size();
    let hw = (w * h) as usize;
    let n = samples.len();
    let mut rgb = vec![0f32; n * 3 * hw];
    let mut nir = vec![0f32; n * hw];
    let mut depth = vec![0f32; n * hw];
    let mut labels = Vec::with_capacity(n * hw);
    for (b, s) in samples.iter().enumerate() {
        if s.size() != (w, h) || s.planes.roles() != PLANE_ROLES {
            return Err(VddNetError::DimensionMismatch(format!(
                "sample {} is {:?} with roles {:?}",
                s.provenance,
                s.size(),
                s.planes.roles()
            )));
        }
        let d = s.planes.data();
        for p in 0..hw {
            let px = &d[p * 5..p * 5 + 5];
            for c in 0..3 {
                rgb[(b * 3 + c) * hw + p] = px[c] / 255.0;
            }
            nir[b * hw + p] = px[3] / 255.0;
            depth[b * hw + p] = if px[4] > 0.5 { 1.0 } else { 0.0 };
        }
        debug_assert_eq!(s.labels.roles(), [ChannelRole::Label]);
        labels.extend(s.labels.data().iter().map(|&v| v as u8));
    }
    let (h, w) = (h as usize, w as usize);
    Ok((
        Inputs {
            rgb: Tensor::new(vec![n, 3, h, w], rgb)?,
            nir: Tensor::new(vec![n, 1, h, w], nir)?,
            depth: Tensor::new(vec![n, 1, h, w], depth)?,
        },
        labels,
    ))
}

/// Mean loss and pixel accuracy in inference mode.
fn evaluate(net: &Network<f32>, samples: &[&Sample], batch: usize, weights: Option<&[f32]>) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut total) = (0.0f64, 0u64, 0u64);
    for chunk in samples.chunks(batch.max(1)) {
        let (x, labels) = batch_inputs(chunk)?;
        let mut g = Graph::new();
        let logits = net.forward(&mut g, &x, Mode::Eval)?;
        let l = g.cross_entropy(logits, &labels, weights)?;
        loss += g.value(l).data()[0] as f64 * chunk.len() as f64;
        let (n, c, h, w) = g.value(logits).dims4()?;
        let hw = h * w;
        let z = g.value(logits).data();
        for b in 0..n {
            for p in 0..hw {
                let mut best = 0;
                for k in 1..c {
                    if z[(b * c + k) * hw + p] > z[(b * c + best) * hw + p] {
                        best = k;
                    }
                }
                correct += (best == labels[b * hw + p] as usize) as u64;
                total += 1;
            }
        }
    }
    Ok((loss / samples.len() as f64, correct as f64 / total as f64))
}

/// Mini-batch training. Each iteration draws `batch_size` training samples
/// uniformly with replacement; validation runs every `validation_every`
/// iterations and after the last one. The parameters with the lowest
/// validation loss are restored at the end.
pub fn train(net: &mut Network<f32>, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(VddNetError::EmptyDataset("no training samples".into()));
    }
    if val.is_empty() {
        return Err(VddNetError::EmptyDataset("no validation samples".into()));
    }
    if cfg.iterations == 0 || cfg.batch_size == 0 || cfg.validation_every == 0 {
        return Err(VddNetError::InvalidSpec("iterations, batch size and validation cadence must be positive".into()));
    }
    let weights = cfg.class_weights.map(|w| w.to_vec());
    let val_set: Vec<&Sample> = val.iter().take(cfg.val_limit.max(1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, net.params.clone());
    let (mut acc_loss, mut acc_n) = (0.0f64, 0usize);
    for it in 1..=cfg.iterations {
        let batch: Vec<&Sample> = (0..cfg.batch_size).map(|_| &train[rng.random_range(0..train.len())]).collect();
        let (x, labels) = batch_inputs(&batch)?;
        let mut g = Graph::new();
        let logits = net.forward(&mut g, &x, Mode::Train)?;
        let loss = g.cross_entropy(logits, &labels, weights.as_deref())?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            let dump = cfg.dump_dir.as_ref().map(|d| d.join(format!("diverged_{it}.vddw")));
            if let Some(path) = &dump {
                // best effort: the divergence is the error being reported
                let _ = std::fs::create_dir_all(path.parent().unwrap_or(path));
                let _ = crate::neuralnet::save_checkpoint(path, &store_tensors(&net.params, &[]));
            }
            return Err(VddNetError::DivergedLoss { iteration: it, dump });
        }
        let grads = g.backward(loss)?;
        opt.step(&mut net.params, &grads.params)?;
        net.params.apply_bn_updates(&g.take_bn_updates());
        acc_loss += lv as f64;
        acc_n += 1;
        if it % cfg.validation_every == 0 || it == cfg.iterations {
            let (val_loss, val_acc) = evaluate(net, &val_set, cfg.batch_size, weights.as_deref())?;
            history.push(HistoryRow { iteration: it, train_loss: acc_loss / acc_n as f64, val_loss, val_acc });
            (acc_loss, acc_n) = (0.0, 0);
            if val_loss < best.0 {
                best = (val_loss, it, net.params.clone());
            }
        }
    }
    let (best_val_loss, best_iteration, params) = best;
    if best_val_loss.is_finite() {
        net.params = params;
    }
    Ok(TrainOutcome { history, best_iteration, best_val_loss })
}
