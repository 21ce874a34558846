//! Acceptance run: every criterion at its stated tolerance and time budget,
//! one PASS/FAIL line each. Numeric arguments select a subset, e.g.
//! `cargo test -p vdd-cli --test acceptance -- 1 2 10`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::Matrix3;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use vdd_cli::config::RunConfig;
use vdd_cli::pipeline::run_pipeline;
use vdd_core::dataset::{extract_patches, split, ClassId, Sample, SourceScene};
use vdd_core::depthmap::{build_depth_map, mask_iou, otsu_threshold, DEFAULT_KERNEL};
use vdd_core::evaluation::{metrics_from_confusion, windowed_confusion, ConfusionMatrix};
use vdd_core::neuralnet::{
    decode_checkpoint, encode_checkpoint, grad_check, BatchNorm2d, Conv2d, GradCheckConfig, Graph, Mode, NnError,
    Padding, ParamStore, Tensor, Var,
};
use vdd_core::raster::{decode_raster, encode_raster, ChannelRole, GeoRef, MultiRaster};
use vdd_core::registration::{apply_h, dlt, estimate_homography_points, refine_iteratively, Correspondence, Point2};
use vdd_core::registration::{RansacParams, RefineParams};
use vdd_core::synthvine::{generate_scene, GroundPalette, SceneConfig};
use vdd_core::vddnet::{
    batch_inputs, build_vddnet, segment_orthophoto, train, Arch, Inputs, Network, TrainConfig, VddNetError,
    VddNetSpec,
};

type Verdict = Result<String, String>;

/// Appends the offending items, if any.
fn listing<T: std::fmt::Debug>(items: &[T]) -> String {
    if items.is_empty() {
        String::new()
    } else {
        format!("; offending {items:?}")
    }
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

/// Published per-class (recall, precision, F1) for shadow, ground, healthy
/// and diseased, in percent, per architecture.
const PUBLISHED: [(&str, [[f64; 3]; 4]); 5] = [
    ("VddNet", [[94.88, 94.89, 94.88], [94.84, 95.11, 94.97], [87.96, 94.84, 91.27], [90.13, 95.19, 92.59]]),
    ("SegNet", [[94.97, 94.60, 94.79], [95.16, 94.99, 95.07], [90.14, 94.81, 92.42], [83.45, 95.00, 88.85]]),
    ("U-Net", [[95.09, 94.70, 94.90], [94.99, 95.07, 95.03], [89.09, 94.74, 91.83], [78.27, 94.90, 85.78]]),
    ("DeepLabV3+", [[94.90, 94.68, 94.79], [95.21, 94.90, 95.06], [88.78, 95.16, 91.86], [61.78, 94.98, 74.87]]),
    ("PSPNet", [[95.07, 94.25, 94.66], [94.94, 87.29, 90.95], [60.54, 95.04, 73.96], [71.70, 94.75, 81.63]]),
];

/// Confusion matrix whose one-vs-rest recall and precision for `class` are
/// exactly `r / 10⁴` and `p / 10⁴`: TP = r·p, FN = p·10⁴ − TP, FP = r·10⁴ − TP.
fn matrix_with(class: usize, r: u64, p: u64) -> ConfusionMatrix {
    let tp = r * p;
    let other = (class + 1) % 4;
    let mut cm = ConfusionMatrix::default();
    cm.counts[class][class] = tp;
    cm.counts[class][other] = p * 10_000 - tp;
    cm.counts[other][class] = r * 10_000 - tp;
    cm.counts[other][other] = 1_000_000;
    cm
}

fn metric_arithmetic() -> Verdict {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (arch, rows) in PUBLISHED {
        for (class, [rec, pre, f1]) in rows.iter().enumerate() {
            let cm = matrix_with(class, (rec * 100.0).round() as u64, (pre * 100.0).round() as u64);
            let m = metrics_from_confusion(&cm).map_err(|e| e.to_string())?.per_class[class];
            let exact = (m.recall.unwrap() - rec / 100.0).abs() < 1e-12 && (m.precision.unwrap() - pre / 100.0).abs() < 1e-12;
            let got = m.f1.unwrap() * 100.0;
            let d = (got - f1).abs();
            worst = worst.max(d);
            if !exact || d > 0.01 {
                failures.push(format!("{arch}/{}: {got:.4} vs {f1}", ClassId::ALL[class]));
            }
        }
    }
    check(failures.is_empty(), format!("20 checks, max |ΔF1| {worst:.4} pts{}", listing(&failures)))
}

// ---------------------------------------------------------------- 2

fn f1_is_dice() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for i in 0..1000 {
        let mut cm = ConfusionMatrix::default();
        // some matrices with empty rows and columns
        let sparse = i % 10 == 0;
        for r in 0..4 {
            for c in 0..4 {
                cm.counts[r][c] = if sparse && rng.random_bool(0.5) { 0 } else { rng.random_range(0..1u64 << 20) };
            }
        }
        if cm.total() == 0 {
            cm.counts[0][0] = 1;
        }
        let m = metrics_from_confusion(&cm).map_err(|e| e.to_string())?;
        for k in 0..4 {
            let tp: u64 = cm.counts[k][k];
            let fn_: u64 = (0..4).filter(|&c| c != k).map(|c| cm.counts[k][c]).sum();
            let fp: u64 = (0..4).filter(|&r| r != k).map(|r| cm.counts[r][k]).sum();
            // harmonic mean of R = tp/(tp+fn) and P = tp/(tp+fp) as an exact
            // rational: 2·R·P / (R + P) = 2tp² / (tp·(2tp + fp + fn))
            let want = if tp == 0 {
                (fp + fn_ > 0).then_some(0.0)
            } else {
                let num = 2 * (tp as u128) * (tp as u128);
                let den = tp as u128 * (2 * tp + fp + fn_) as u128;
                // both below 2⁵³, so the quotient is the correctly rounded value
                Some(num as f64 / den as f64)
            };
            let dice_form = (tp + fp + fn_ > 0).then(|| (2 * tp) as f64 / (fp + 2 * tp + fn_) as f64);
            let got = m.per_class[k].f1;
            if got.map(f64::to_bits) != want.map(f64::to_bits) || got.map(f64::to_bits) != dice_form.map(f64::to_bits) {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("1000 matrices × 4 classes, {mismatches} bitwise mismatches"))
}

// ---------------------------------------------------------------- 3

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn coeffs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn max_error<F>(store: &mut ParamStore<f64>, loss: F) -> Result<f64, String>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> vdd_core::neuralnet::Result<Var>,
{
    let report = grad_check(store, loss, &GradCheckConfig::default()).map_err(|e| e.to_string())?;
    if report.entries_checked == 0 {
        return Err("no entries checked".into());
    }
    Ok(report.max_rel_error)
}

fn nn(e: VddNetError) -> NnError {
    match e {
        VddNetError::Nn(e) => e,
        other => NnError::ShapeMismatch(other.to_string()),
    }
}

fn gradient_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut per_op: Vec<(&str, f64)> = Vec::new();

    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(vec![2, 2, 5, 6], &mut rng), true);
    let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, Padding::uniform(1), &mut rng);
    let strided = Conv2d::new(&mut store, "s", 3, 2, 2, 2, Padding { top: 0, bottom: 1, left: 0, right: 0 }, &mut rng);
    let w = coeffs(2 * 2 * 3 * 3, &mut rng);
    per_op.push((
        "conv2d",
        max_error(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = conv.forward(g, s, xv)?;
            let y = strided.forward(g, s, y)?;
            g.weighted_sum(y, &w)
        })?,
    ));

    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(vec![2, 3, 3, 3], &mut rng), true);
    let w = coeffs(54, &mut rng);
    per_op.push((
        "relu",
        max_error(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = g.relu(xv);
            g.weighted_sum(y, &w)
        })?,
    ));

    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(vec![3, 2, 3, 3], &mut rng), true);
    let bn = BatchNorm2d::new(&mut store, "bn", 2);
    store.get_mut(bn.gamma).value = rand_tensor(vec![2], &mut rng);
    store.get_mut(bn.beta).value = rand_tensor(vec![2], &mut rng);
    store.get_mut(bn.running_var).value = Tensor::new(vec![2], vec![0.7, 1.9]).unwrap();
    let w = coeffs(54, &mut rng);
    for (name, mode) in [("batchnorm/train", Mode::Train), ("batchnorm/eval", Mode::Eval)] {
        per_op.push((
            name,
            max_error(&mut store, |g, s| {
                let xv = g.param(s, x);
                let y = bn.forward(g, s, xv, mode)?;
                g.weighted_sum(y, &w)
            })?,
        ));
    }

    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(vec![2, 2, 5, 4], &mut rng), true);
    let w = coeffs(2 * 2 * 3 * 2, &mut rng);
    per_op.push((
        "maxpool2x2",
        max_error(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = g.maxpool2x2(xv)?;
            g.weighted_sum(y, &w)
        })?,
    ));

    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(vec![2, 2, 3, 2], &mut rng), true);
    let w = coeffs(96, &mut rng);
    per_op.push((
        "upsample2x",
        max_error(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = g.upsample2x(xv)?;
            g.weighted_sum(y, &w)
        })?,
    ));

    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(vec![2, 1, 2, 3], &mut rng), true);
    let b = store.add("b", rand_tensor(vec![2, 3, 2, 3], &mut rng), true);
    let w = coeffs(2 * 7 * 6, &mut rng);
    per_op.push((
        "concat",
        max_error(&mut store, |g, s| {
            let (av, bv) = (g.param(s, a), g.param(s, b));
            let y = g.concat_channels(&[bv, av, bv])?;
            g.weighted_sum(y, &w)
        })?,
    ));

    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(vec![2, 4, 2, 3], &mut rng), true);
    let w = coeffs(48, &mut rng);
    per_op.push((
        "softmax",
        max_error(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = g.softmax_channels(xv)?;
            g.weighted_sum(y, &w)
        })?,
    ));

    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(vec![2, 4, 3, 3], &mut rng), true);
    let labels: Vec<u8> = (0..18).map(|_| rng.random_range(0..4)).collect();
    for (name, weights) in [("cross_entropy", None), ("cross_entropy/weighted", Some(vec![1.0, 2.5, 0.5, 3.0]))] {
        per_op.push((
            name,
            max_error(&mut store, |g, s| {
                let xv = g.param(s, x);
                g.cross_entropy(xv, &labels, weights.as_deref())
            })?,
        ));
    }

    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(vec![1, 2, 2, 2], &mut rng), true);
    let w = coeffs(8, &mut rng);
    per_op.push((
        "weighted_sum",
        max_error(&mut store, |g, s| {
            let xv = g.param(s, x);
            g.weighted_sum(xv, &w)
        })?,
    ));

    // two-stage VddNet, every parameter entry probed; continuous depth keeps
    // batch-normalised activations off the ReLU kink, which binary inputs can
    // hit exactly through repeated values
    let net = Network::<f64>::new(Arch::VddNet, VddNetSpec::new(2, 2), 3).map_err(|e| e.to_string())?;
    let inputs = Inputs {
        rgb: Tensor::new(vec![2, 3, 8, 8], (0..384).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
        nir: Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
        depth: Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
    };
    let labels: Vec<u8> = (0..128).map(|_| rng.random_range(0..4)).collect();
    let mut store = net.params.clone();
    let whole = max_error(&mut store, |g, s| {
        let mut n = net.clone();
        n.params = s.clone();
        let logits = n.forward(g, &inputs, Mode::Train).map_err(nn)?;
        g.cross_entropy(logits, &labels, None)
    })?;

    let worst_op = per_op.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<_> = per_op.iter().filter(|(_, e)| *e >= 1e-4).collect();
    check(
        failing.is_empty() && whole < 1e-3,
        format!(
            "{} op checks, worst {} {:.2e} (< 1e-4); mini-VddNet ({} params) {:.2e} (< 1e-3){}",
            per_op.len(),
            worst_op.0,
            worst_op.1,
            net.trainable_count(),
            whole,
            listing(&failing)
        ),
    )
}

// ---------------------------------------------------------------- 4

fn shape_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = build_vddnet(VddNetSpec::default(), 0).map_err(|e| e.to_string())?;
    let hw = 256 * 256;
    let inputs = Inputs {
        rgb: Tensor::new(vec![1, 3, 256, 256], (0..3 * hw).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
        nir: Tensor::new(vec![1, 1, 256, 256], (0..hw).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
        depth: Tensor::new(vec![1, 1, 256, 256], (0..hw).map(|_| rng.random_range(0..2) as f32).collect()).unwrap(),
    };
    let probs = net.predict(&inputs).map_err(|e| e.to_string())?;
    let d = probs.data();
    let worst = (0..hw).map(|p| ((0..4).map(|c| d[c * hw + p] as f64).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let in_range = d.iter().all(|&v| (0.0..=1.0).contains(&v));
    check(
        probs.shape() == [1, 4, 256, 256] && worst <= 1e-5 && in_range,
        format!("output {:?}, max |Σp − 1| {worst:.2e}", probs.shape()),
    )
}

// ---------------------------------------------------------------- 5

/// Homography sending the square's corners to corners displaced by up to
/// `frac` of its side.
fn random_projective(rng: &mut ChaCha8Rng, size: f64, frac: f64) -> Matrix3<f64> {
    let corners = [(0.0, 0.0), (size, 0.0), (size, size), (0.0, size)];
    let pairs: Vec<Correspondence> = corners
        .iter()
        .map(|&(x, y)| Correspondence {
            src: Point2::new(x, y),
            dst: Point2::new(x + rng.random_range(-frac..frac) * size, y + rng.random_range(-frac..frac) * size),
        })
        .collect();
    dlt(&pairs, &[0, 1, 2, 3]).unwrap()
}

fn registration_recovery() -> Verdict {
    let size = 512.0;
    let n = 200;
    let noise = Normal::new(0.0, 1.0).unwrap();
    let (mut accurate, mut monotone, mut refined, mut errors) = (0, 0, 0, Vec::new());
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let truth = random_projective(&mut rng, size, 0.2);
        let outliers = rng.random_range(0..=(n * 2 / 5));
        let src: Vec<Point2> =
            (0..n).map(|_| Point2::new(rng.random_range(0.0..size), rng.random_range(0.0..size))).collect();
        let pairs: Vec<Correspondence> = src
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let dst = if i < outliers {
                    Point2::new(rng.random_range(0.0..size), rng.random_range(0.0..size))
                } else {
                    let q = apply_h(&truth, p);
                    Point2::new(q.x + noise.sample(&mut rng), q.y + noise.sample(&mut rng))
                };
                Correspondence { src: p, dst }
            })
            .collect();
        let params = RansacParams { seed, ..Default::default() };
        let result = estimate_homography_points(&pairs, &params)
            .and_then(|h0| refine_iteratively(&h0, &pairs, &RefineParams::default()));
        let r = match result {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        // estimated vs true mapping of the clean (non-outlier) points
        let clean = &src[outliers..];
        let mse = clean.iter().map(|&p| apply_h(&r.homography.h, p).dist(apply_h(&truth, p)).powi(2)).sum::<f64>()
            / clean.len() as f64;
        let rmse = mse.sqrt();
        worst = worst.max(rmse);
        accurate += (rmse < 0.5) as usize;
        monotone += r.rmse_history.windows(2).all(|w| w[1] <= w[0]) as usize;
        refined += (r.rmse_history.len() > 1) as usize;
    }
    check(
        accurate >= 95 && monotone == 100,
        format!("RMSE < 0.5 px in {accurate}/100 (worst {worst:.3}), non-increasing history {monotone}/100, refinement accepted an iterate in {refined}{}", listing(&errors)),
    )
}

// ---------------------------------------------------------------- 6

/// Exhaustive Otsu: every threshold, class statistics recomputed from the
/// pixel list, compared as exact rationals. Ties go to the lowest level.
fn exhaustive_otsu(values: &[u8]) -> Option<u8> {
    let mut best: Option<(u8, u128, u128)> = None;
    for t in 0..=255u8 {
        let (mut n0, mut n1, mut s0, mut s1) = (0i128, 0i128, 0i128, 0i128);
        for &v in values {
            if v <= t {
                n0 += 1;
                s0 += v as i128;
            } else {
                n1 += 1;
                s1 += v as i128;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // between-class variance ∝ (s0·n1 − s1·n0)² / (n0·n1)
        let d = (s0 * n1 - s1 * n0).unsigned_abs();
        let (num, den) = (d * d, (n0 * n1) as u128);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.map(|b| b.0)
}

fn depth_fidelity() -> Verdict {
    let mut ious = Vec::new();
    for seed in 0..20 {
        let cfg = SceneConfig { terrain_amplitude: 2.0, canopy_height: 0.8, seed, ..Default::default() };
        let scene = generate_scene(&cfg).map_err(|e| e.to_string())?;
        let d = build_depth_map(&scene.dsm, DEFAULT_KERNEL).map_err(|e| e.to_string())?;
        ious.push(mask_iou(&d.mask, &scene.canopy_mask));
    }
    let min_iou = ious.iter().cloned().fold(1.0, f64::min);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut disagreements = 0;
    for i in 0..1000 {
        let (w, h) = (rng.random_range(1..48u32), rng.random_range(1..48u32));
        let n = (w * h) as usize;
        let values: Vec<u8> = match i % 4 {
            0 => (0..n).map(|_| rng.random_range(0..=255)).collect(),
            1 => {
                let (a, b) = (rng.random_range(0..128u8), rng.random_range(128..=255u8));
                (0..n)
                    .map(|_| {
                        let c = if rng.random_bool(0.5) { a } else { b };
                        c.saturating_add(rng.random_range(0..20)).saturating_sub(10)
                    })
                    .collect()
            }
            // few distinct levels, which produces ties
            2 => {
                let levels: Vec<u8> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..=255)).collect();
                (0..n).map(|_| levels[rng.random_range(0..levels.len())]).collect()
            }
            _ => vec![rng.random_range(0..=255); n],
        };
        let img = MultiRaster::from_plane(w, h, ChannelRole::Depth, values.iter().map(|&v| v as f32).collect())
            .map_err(|e| e.to_string())?;
        let r = otsu_threshold(&img).map_err(|e| e.to_string())?;
        let agree = match exhaustive_otsu(&values) {
            Some(t) => !r.degenerate && r.threshold == t,
            None => r.degenerate,
        };
        disagreements += (!agree) as usize;
    }
    check(
        min_iou >= 0.90 && disagreements == 0,
        format!("min IoU {min_iou:.4} over 20 DSMs; Otsu disagrees with oracle on {disagreements}/1000"),
    )
}

// ---------------------------------------------------------------- 7

fn ablation_scene(seed: u64) -> Result<(vdd_core::synthvine::SyntheticScene, MultiRaster), String> {
    // green ground with the canopy signature; no shadows, whose geometry
    // would otherwise reveal the rows
    let cfg = SceneConfig { ground_palette: GroundPalette::Green, shadow_fraction: 0.0, seed, ..Default::default() };
    let scene = generate_scene(&cfg).map_err(|e| e.to_string())?;
    let mask = build_depth_map(&scene.dsm, DEFAULT_KERNEL).map_err(|e| e.to_string())?.mask;
    Ok((scene, mask))
}

fn depth_ablation() -> Verdict {
    let window = SceneConfig::default().row_width as u32;
    let (train_scene, train_mask) = ablation_scene(1)?;
    let (test_scene, test_mask) = ablation_scene(2)?;
    let src = SourceScene::new(&train_scene.rgb, &train_scene.nir, &train_mask, &train_scene.labels)
        .map_err(|e| e.to_string())?;
    let data = split(extract_patches(&src, 64, 0.5).map_err(|e| e.to_string())?, 0.2, 0).map_err(|e| e.to_string())?;
    let healthy = ClassId::Healthy as usize;
    let mut f1 = Vec::new();
    for channels_in in [4, 5] {
        let mut net = Network::<f32>::new(Arch::Baseline { channels_in }, VddNetSpec::new(2, 8), 0)
            .map_err(|e| e.to_string())?;
        let cfg = TrainConfig { iterations: 2000, batch_size: 8, validation_every: 100, ..Default::default() };
        train(&mut net, &data.train, &data.val, &cfg).map_err(|e| e.to_string())?;
        let seg = segment_orthophoto(&net, &test_scene.rgb, &test_scene.nir, &test_mask, 256).map_err(|e| e.to_string())?;
        let cm = windowed_confusion(&seg.labels, &test_scene.labels, window).map_err(|e| e.to_string())?;
        let m = metrics_from_confusion(&cm).map_err(|e| e.to_string())?;
        f1.push(m.per_class[healthy].f1.unwrap_or(0.0) * 100.0);
    }
    let margin = f1[1] - f1[0];
    check(
        margin >= 5.0,
        format!("healthy F1 without depth {:.2}, with depth {:.2}, margin {margin:.2} pts (≥ 5)", f1[0], f1[1]),
    )
}

// ---------------------------------------------------------------- 8

fn demo_run() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = RunConfig::demo();
        cfg.output_dir = out.clone();
        let report = run_pipeline(&cfg).map_err(|e| e.to_string())?;
        let kept = dir.path().join(name);
        std::fs::rename(&out, &kept).map_err(|e| e.to_string())?;
        runs.push((report.report.accuracy, kept));
    }
    let mut differing = Vec::new();
    for f in ["metrics.csv", "labels.vddr", "model.vddw", "history.csv", "manifest.txt"] {
        let a = std::fs::read(runs[0].1.join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(runs[1].1.join(f)).map_err(|e| e.to_string())?;
        if a != b {
            differing.push(f);
        }
    }
    let acc = runs[0].0 * 100.0;
    check(
        acc >= 85.0 && differing.is_empty() && runs[0].0 == runs[1].0,
        format!("held-out grapevine-scale accuracy {acc:.2}% (≥ 85), artifacts differing between runs {differing:?}"),
    )
}

// ---------------------------------------------------------------- 9

fn overfit() -> Verdict {
    let scene = generate_scene(&SceneConfig::default()).map_err(|e| e.to_string())?;
    let mask = build_depth_map(&scene.dsm, DEFAULT_KERNEL).map_err(|e| e.to_string())?.mask;
    let src = SourceScene::new(&scene.rgb, &scene.nir, &mask, &scene.labels).map_err(|e| e.to_string())?;
    let set: Vec<Sample> = extract_patches(&src, 64, 0.0).map_err(|e| e.to_string())?.into_iter().step_by(6).take(10).collect();
    let mut net = build_vddnet(VddNetSpec::new(2, 8), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { iterations: 500, batch_size: 5, validation_every: 50, val_limit: 10, ..Default::default() };
    train(&mut net, &set, &set, &cfg).map_err(|e| e.to_string())?;
    let refs: Vec<&Sample> = set.iter().collect();
    let (inputs, labels) = batch_inputs(&refs).map_err(|e| e.to_string())?;
    let probs = net.predict(&inputs).map_err(|e| e.to_string())?;
    let hw = 64 * 64;
    let d = probs.data();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let (b, p) = (i / hw, i % hw);
            let argmax = (0..4).max_by(|&a, &c| d[(b * 4 + a) * hw + p].total_cmp(&d[(b * 4 + c) * hw + p])).unwrap();
            argmax == l as usize
        })
        .count();
    let acc = correct as f64 / labels.len() as f64 * 100.0;
    check(acc >= 99.0, format!("{} patches, pixel accuracy {acc:.2}% after 500 iterations (≥ 99)", set.len()))
}

// ---------------------------------------------------------------- 10

fn arb_role() -> impl Strategy<Value = ChannelRole> {
    prop_oneof![
        Just(ChannelRole::Red),
        Just(ChannelRole::Green),
        Just(ChannelRole::Blue),
        Just(ChannelRole::Nir),
        Just(ChannelRole::Dsm),
        Just(ChannelRole::Depth),
        Just(ChannelRole::Label),
        Just(ChannelRole::Unspecified),
        (0u8..=239).prop_map(ChannelRole::Prob),
    ]
}

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite())
}

fn arb_raster() -> impl Strategy<Value = MultiRaster> {
    (1u32..24, 1u32..24, prop::collection::vec(arb_role(), 1..6), any::<Option<(f64, f64, f64)>>())
        .prop_flat_map(|(w, h, roles, geo)| {
            let n = (w * h) as usize * roles.len();
            (Just((w, h, roles, geo)), prop::collection::vec(finite_f32(), n))
        })
        .prop_map(|((w, h, roles, geo), data)| {
            let r = MultiRaster::new(w, h, roles, data).unwrap();
            match geo {
                Some((origin_x, origin_y, pixel_size)) => r.with_georef(GeoRef { origin_x, origin_y, pixel_size }),
                None => r,
            }
        })
}

fn arb_tensors() -> impl Strategy<Value = Vec<(String, Vec<usize>, Vec<u32>)>> {
    prop::collection::vec(
        ("[a-z][a-z0-9._]{0,20}", prop::collection::vec(1usize..5, 0..4)).prop_flat_map(|(name, shape)| {
            let n = shape.iter().product::<usize>();
            (Just(name), Just(shape), prop::collection::vec(any::<u32>(), n))
        }),
        0..6,
    )
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn format_round_trips() -> Verdict {
    let mut runner = TestRunner::new_with_rng(
        PropConfig { cases: 256, ..PropConfig::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner
        .run(&arb_raster(), |r| {
            let bytes = encode_raster(&r);
            let back = decode_raster(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(bits(back.data()), bits(r.data()));
            prop_assert_eq!((back.width(), back.height(), back.roles()), (r.width(), r.height(), r.roles()));
            prop_assert_eq!(
                back.georef().map(|g| [g.origin_x.to_bits(), g.origin_y.to_bits(), g.pixel_size.to_bits()]),
                r.georef().map(|g| [g.origin_x.to_bits(), g.origin_y.to_bits(), g.pixel_size.to_bits()])
            );
            prop_assert_eq!(encode_raster(&back), bytes);
            Ok(())
        })
        .map_err(|e| format!("VDDR: {e}"))?;
    runner
        .run(&arb_tensors(), |spec| {
            let tensors: Vec<(String, Tensor<f32>)> = spec
                .iter()
                .map(|(n, s, d)| (n.clone(), Tensor::new(s.clone(), d.iter().map(|&b| f32::from_bits(b)).collect()).unwrap()))
                .collect();
            let bytes = encode_checkpoint(&tensors);
            let back = decode_checkpoint(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back.len(), tensors.len());
            for ((an, at), (bn, bt)) in tensors.iter().zip(&back) {
                prop_assert_eq!(an, bn);
                prop_assert_eq!(at.shape(), bt.shape());
                prop_assert_eq!(bits(at.data()), bits(bt.data()));
            }
            prop_assert_eq!(encode_checkpoint(&back), bytes);
            Ok(())
        })
        .map_err(|e| format!("VDDW: {e}"))?;
    Ok("256 rasters and 256 checkpoints, all bitwise identical after decode and re-encode".into())
}

// ----------------------------------------------------------------

type Criterion = (u32, &'static str, u64, fn() -> Verdict);

const CRITERIA: [Criterion; 10] = [
    (1, "metric arithmetic", 1, metric_arithmetic),
    (2, "F1 equals Dice", 1, f1_is_dice),
    (3, "gradient correctness", 120, gradient_checks),
    (4, "architecture shape contract", 10, shape_contract),
    (5, "registration recovery", 60, registration_recovery),
    (6, "depth-map fidelity", 60, depth_fidelity),
    (7, "depth ablation", 15 * 60, depth_ablation),
    (8, "end-to-end demo run", 10 * 60, demo_run),
    (9, "overfit sanity", 3 * 60, overfit),
    (10, "format round trips", 10, format_round_trips),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, budget, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let verdict = run();
        let elapsed = start.elapsed();
        let within = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match verdict {
            Ok(d) => (within, d),
            Err(d) => (false, d),
        };
        let timing = format!("{:.1}s of {budget}s{}", elapsed.as_secs_f64(), if within { "" } else { ", over budget" });
        println!("{} {id:>2} {name}: {detail} [{timing}]", if pass { "PASS" } else { "FAIL" });
        failed += (!pass) as usize;
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
