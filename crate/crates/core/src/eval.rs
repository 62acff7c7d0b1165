//! Evaluation metrics: MAPE on deviation bases, security-class accuracy,
//! error histograms and constraint statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{gate_residuals, kc_residuals_with, Gate, KcWeights};
use crate::model::{classify_security, ModelError, Prediction, SecurityThresholds, OUTPUTS};
use crate::sim::{FrequencyMetrics, OUTPUT_NAMES};

/// Smallest base per output: rocof Hz/s, nadir deviation Hz, t_nadir s,
/// f_ss deviation Hz, and the two power deviations in pu.
pub const MAPE_FLOORS: [f64; OUTPUTS] = [0.01, 0.01, 0.1, 0.01, 0.001, 0.001];

/// Describes the error base; written into every report.
pub const MAPE_DEFINITION: &str = "mean over samples of |pred - label| / max(|label - base|, floor) x 100; \
base = f_N for f_nadir and f_ss, 0 otherwise; overall = mean of the six outputs";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} predictions, {1} labels")]
    LengthMismatch(usize, usize),
    #[error("floors must be positive")]
    InvalidFloors,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn bases(f_n: f64) -> [f64; OUTPUTS] {
    [0.0, f_n, 0.0, f_n, 0.0, 0.0]
}

/// Signed relative errors in percent, one row per sample.
pub fn relative_errors(
    preds: &[FrequencyMetrics],
    labels: &[FrequencyMetrics],
    f_n: f64,
    floors: &[f64; OUTPUTS],
) -> Result<Vec<[f64; OUTPUTS]>> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if floors.iter().any(|f| !(*f > 0.0)) {
        return Err(EvalError::InvalidFloors);
    }
    let base = bases(f_n);
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            let (p, l) = (p.to_array(), l.to_array());
            let mut e = [0.0; OUTPUTS];
            for o in 0..OUTPUTS {
                e[o] = (p[o] - l[o]) / (l[o] - base[o]).abs().max(floors[o]) * 100.0;
            }
            e
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub per_output: [f64; OUTPUTS],
    pub overall: f64,
}

pub fn mape(preds: &[FrequencyMetrics], labels: &[FrequencyMetrics], f_n: f64, floors: &[f64; OUTPUTS]) -> Result<Mape> {
    let errs = relative_errors(preds, labels, f_n, floors)?;
    let n = errs.len() as f64;
    let mut per_output = [0.0; OUTPUTS];
    for e in &errs {
        for o in 0..OUTPUTS {
            per_output[o] += e[o].abs() / n;
        }
    }
    Ok(Mape { per_output, overall: per_output.iter().sum::<f64>() / OUTPUTS as f64 })
}

/// Fixed-edge histogram whose first and last bins are open-ended, so every
/// finite value lands in a bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize, values: impl IntoIterator<Item = f64>) -> Self {
        let bins = bins.max(1);
        let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let k = ((v - lo) / (hi - lo) * bins as f64).floor();
            let k = if k.is_nan() { 0 } else { k.clamp(0.0, (bins - 1) as f64) as usize };
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub n_samples: usize,
    pub mape_definition: String,
    pub mape_overall: f64,
    pub mape_per_output: [f64; OUTPUTS],
    pub class_accuracy: f64,
    /// Rows are oracle classes, columns predicted (secure, warning, insecure).
    pub confusion_matrix: [[usize; 3]; 3],
    /// Per-sample mean signed relative error over the six outputs, percent.
    pub error_histogram: Histogram,
    /// Share of preliminary outputs the gate routes to the corrector.
    pub gate_rate: f64,
    pub mean_kc_loss: f64,
    /// Mean signed relative error per output, percent.
    pub mean_error: [f64; OUTPUTS],
    /// Mean over outputs of |mean_error|.
    pub bias: f64,
}

pub fn accuracy_from_confusion(c: &[[usize; 3]; 3]) -> f64 {
    let total: usize = c.iter().flatten().sum();
    let hit: usize = (0..3).map(|i| c[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

pub struct EvalSettings {
    pub thresholds: SecurityThresholds,
    pub kc_weights: KcWeights,
    pub floors: [f64; OUTPUTS],
    pub f_n: f64,
}

impl EvalSettings {
    pub fn new(f_n: f64) -> Self {
        Self { thresholds: SecurityThresholds::default(), kc_weights: KcWeights::default(), floors: MAPE_FLOORS, f_n }
    }
}

pub fn evaluate(
    kind: &str,
    preds: &[Prediction],
    labels: &[FrequencyMetrics],
    ctxs: &[crate::constraints::ConstraintContext],
    s: &EvalSettings,
) -> Result<EvalReport> {
    if ctxs.len() != preds.len() {
        return Err(EvalError::LengthMismatch(preds.len(), ctxs.len()));
    }
    let metrics: Vec<FrequencyMetrics> = preds.iter().map(|p| p.metrics).collect();
    let errs = relative_errors(&metrics, labels, s.f_n, &s.floors)?;
    let m = mape(&metrics, labels, s.f_n, &s.floors)?;
    let n = preds.len() as f64;
    let mut confusion = [[0usize; 3]; 3];
    for (p, l) in metrics.iter().zip(labels) {
        let truth = classify_security(l, &s.thresholds, s.f_n)?;
        let got = classify_security(p, &s.thresholds, s.f_n)?;
        confusion[truth.index()][got.index()] += 1;
    }
    let mut mean_error = [0.0; OUTPUTS];
    for e in &errs {
        for o in 0..OUTPUTS {
            mean_error[o] += e[o] / n;
        }
    }
    let w = &s.kc_weights;
    let mut routed = 0usize;
    let mut kc = 0.0;
    for (p, c) in preds.iter().zip(ctxs) {
        if gate_residuals(&kc_residuals_with(&p.preliminary, c, w.floor), w) == Gate::RouteToCn {
            routed += 1;
        }
        let r = kc_residuals_with(&p.metrics, c, w.floor).as_array();
        kc += (0..3).map(|j| w.alpha[j] * r[j] * r[j]).sum::<f64>() / n;
    }
    Ok(EvalReport {
        kind: kind.to_string(),
        n_samples: preds.len(),
        mape_definition: MAPE_DEFINITION.to_string(),
        mape_overall: m.overall,
        mape_per_output: m.per_output,
        class_accuracy: accuracy_from_confusion(&confusion),
        confusion_matrix: confusion,
        error_histogram: Histogram::new(-50.0, 50.0, 20, errs.iter().map(|e| e.iter().sum::<f64>() / OUTPUTS as f64)),
        gate_rate: routed as f64 / n,
        mean_kc_loss: kc,
        mean_error,
        bias: mean_error.iter().map(|e| e.abs()).sum::<f64>() / OUTPUTS as f64,
    })
}

/// One CSV line per report.
pub fn reports_to_csv(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from("run,kind,n_samples,mape_overall");
    for name in OUTPUT_NAMES {
        s.push_str(&format!(",mape_{name}"));
    }
    s.push_str(",class_accuracy,gate_rate,mean_kc_loss,bias\n");
    for (run, r) in rows {
        s.push_str(&format!("{run},{},{},{}", r.kind, r.n_samples, r.mape_overall));
        for v in r.mape_per_output {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{},{},{},{}\n", r.class_accuracy, r.gate_rate, r.mean_kc_loss, r.bias));
    }
    s
}
