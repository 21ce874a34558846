//! Grapevine-scale scoring: label maps are compared window by window, each
//! window reduced to its dominant class.

use thiserror::Error;

use crate::dataset::ClassId;
use crate::raster::MultiRaster;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("window must be at least 1 pixel")]
    BadWindow,
    #[error("label value {0} is not a class id")]
    LabelOutOfRange(f32),
}

pub type Result<T> = std::result::Result<T, EvaluationError>;

pub const DEFAULT_WINDOW: u32 = 64;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    /// One-vs-rest `(tp, fp, fn, tn)` for `class`.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[class][class];
        let fp = (0..4).filter(|&r| r != class).map(|r| self.counts[r][class]).sum();
        let fn_ = (0..4).filter(|&c| c != class).map(|c| self.counts[class][c]).sum();
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }
}

fn class_of(v: f32) -> Result<usize> {
    ClassId::from_value(v).map(|c| c as usize).map_err(|_| EvaluationError::LabelOutOfRange(v))
}

/// Most frequent class, ties to the lowest class index.
fn mode(counts: &[u64; 4]) -> usize {
    let mut best = 0;
    for c in 1..4 {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

/// Non-overlapping `window × window` grid including partial right/bottom
/// windows; each window adds one count at (truth mode, prediction mode).
pub fn windowed_confusion(pred: &MultiRaster, truth: &MultiRaster, window: u32) -> Result<ConfusionMatrix> {
    if window == 0 {
        return Err(EvaluationError::BadWindow);
    }
    if !pred.same_dims(truth) || pred.channels() != 1 || truth.channels() != 1 {
        return Err(EvaluationError::DimensionMismatch(format!(
            "pred {}x{}x{}, truth {}x{}x{}",
            pred.width(),
            pred.height(),
            pred.channels(),
            truth.width(),
            truth.height(),
            truth.channels()
        )));
    }
    let (w, h) = (pred.width(), pred.height());
    let mut cm = ConfusionMatrix::default();
    for y0 in (0..h).step_by(window as usize) {
        for x0 in (0..w).step_by(window as usize) {
            let (mut ct, mut cp) = ([0u64; 4], [0u64; 4]);
            for y in y0..(y0 + window).min(h) {
                for x in x0..(x0 + window).min(w) {
                    ct[class_of(truth.get(x, y, 0))?] += 1;
                    cp[class_of(pred.get(x, y, 0))?] += 1;
                }
            }
            cm.counts[mode(&ct)][mode(&cp)] += 1;
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class: ClassId,
    /// `None` when the ratio is 0/0.
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    /// Windows whose truth is this class.
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub per_class: [ClassMetrics; 4],
    pub accuracy: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean of recall and precision.
pub fn harmonic_f1(recall: f64, precision: f64) -> f64 {
    if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    }
}

/// Dice coefficient `2TP / (FP + 2TP + FN)`.
pub fn dice(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    ratio(2 * tp, fp + 2 * tp + fn_)
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(EvaluationError::EmptyMatrix);
    }
    let per_class = ClassId::ALL.map(|class| {
        let (tp, fp, fn_, _) = cm.one_vs_rest(class as usize);
        ClassMetrics {
            class,
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
            f1: dice(tp, fp, fn_),
            support: tp + fn_,
        }
    });
    Ok(MetricReport { per_class, accuracy: cm.trace() as f64 / total as f64, total })
}

/// Signed differences `b − a`; a cell is `None` when either side is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportDelta {
    /// Recall, precision and F1 delta per class.
    pub per_class: [[Option<f64>; 3]; 4],
    pub support: [i64; 4],
    pub accuracy: f64,
}

pub fn compare_reports(a: &MetricReport, b: &MetricReport) -> ReportDelta {
    let d = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| y - x);
    let mut per_class = [[None; 3]; 4];
    let mut support = [0i64; 4];
    for i in 0..4 {
        let (ca, cb) = (&a.per_class[i], &b.per_class[i]);
        per_class[i] = [d(ca.recall, cb.recall), d(ca.precision, cb.precision), d(ca.f1, cb.f1)];
        support[i] = cb.support as i64 - ca.support as i64;
    }
    ReportDelta { per_class, support, accuracy: b.accuracy - a.accuracy }
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "NA".into())
}

/// `class,recall,precision,f1,support` rows in percent, then `global,accuracy`.
pub fn report_csv(r: &MetricReport) -> String {
    let mut s = String::from("class,recall,precision,f1,support\n");
    for m in &r.per_class {
        s.push_str(&format!("{},{},{},{},{}\n", m.class, pct(m.recall), pct(m.precision), pct(m.f1), m.support));
    }
    s.push_str(&format!("global,{}\n", pct(Some(r.accuracy))));
    s
}
