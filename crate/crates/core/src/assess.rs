//! Pre-fault screening of one operating condition against a fault list.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintResiduals;
use crate::dataset::{build_sample, ConditionSpec, FaultSpec, SampleInput};
use crate::grid::{build_adjacency, FaultKind, NodeId, ValidatedGrid};
use crate::model::{classify_security, PredictionSource, SecurityClass, SecurityThresholds};
use crate::sim::{FrequencyMetrics, OUTPUT_NAMES};
use crate::train::{Predictor, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessRow {
    pub fault_id: usize,
    pub location: NodeId,
    pub kind: FaultKind,
    pub delta_p: f64,
    pub metrics: Option<FrequencyMetrics>,
    pub residuals: Option<ConstraintResiduals>,
    pub provenance: Option<PredictionSource>,
    pub class: Option<SecurityClass>,
    /// Why the fault could not be assessed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessTable {
    pub condition_id: usize,
    pub rows: Vec<AssessRow>,
    pub elapsed_seconds: f64,
}

impl AssessTable {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition_id,fault_id,location,kind,delta_p");
        for n in OUTPUT_NAMES {
            s.push(',');
            s.push_str(n);
        }
        s.push_str(",e1,e2,e3,provenance,class,error\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}", self.condition_id, r.fault_id, r.location, r.kind.as_str(), r.delta_p));
            match r.metrics {
                Some(m) => m.to_array().iter().for_each(|v| s.push_str(&format!(",{v}"))),
                None => s.push_str(",,,,,,"),
            }
            match r.residuals {
                Some(e) => s.push_str(&format!(",{},{},{}", e.e1, e.e2, e.e3)),
                None => s.push_str(",,,"),
            }
            s.push_str(&format!(
                ",{},{},{}\n",
                r.provenance.map_or("", |p| p.as_str()),
                r.class.map_or("", |c| c.as_str()),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        s
    }
}

/// Predicts and classifies every fault under one condition. Faults that
/// cannot be applied get a row with `error` set; the rest are predicted
/// in one batch.
pub fn assess(
    predictor: &Predictor,
    base: &ValidatedGrid,
    condition: &ConditionSpec,
    faults: &[FaultSpec],
    thresholds: &SecurityThresholds,
) -> Result<AssessTable, TrainError> {
    let start = Instant::now();
    thresholds.validate()?;
    let grid = condition.materialize(base).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let adjacency = Arc::new(build_adjacency(&grid));
    let mut rows = Vec::with_capacity(faults.len());
    let mut samples: Vec<(usize, SampleInput)> = Vec::new();
    for f in faults {
        let built = f.resolve(&grid).and_then(|ev| {
            let s = build_sample(&grid, &condition.voltages, condition.renewable_penetration, &ev, adjacency.clone())?;
            Ok((ev, s))
        });
        let (delta_p, error) = match built {
            Ok((ev, s)) => {
                samples.push((rows.len(), s));
                (ev.delta_p, None)
            }
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        rows.push(AssessRow {
            fault_id: f.id,
            location: f.location,
            kind: f.kind,
            delta_p,
            metrics: None,
            residuals: None,
            provenance: None,
            class: None,
            error,
        });
    }
    if !samples.is_empty() {
        let refs: Vec<&SampleInput> = samples.iter().map(|(_, s)| s).collect();
        let preds = predictor.predict(&refs)?;
        for ((row, _), p) in samples.iter().zip(preds) {
            let r = &mut rows[*row];
            r.class = Some(classify_security(&p.metrics, thresholds, grid.f_n())?);
            r.metrics = Some(p.metrics);
            r.residuals = Some(p.residuals);
            r.provenance = Some(p.provenance);
        }
    }
    Ok(AssessTable { condition_id: condition.id, rows, elapsed_seconds: start.elapsed().as_secs_f64() })
}
