use fsa_core::assess::assess;
use fsa_core::constraints::KcWeights;
use fsa_core::dataset::{BenchmarkConfig, Scenario};
use fsa_core::model::SecurityThresholds;
use fsa_core::sim::SimConfig;
use fsa_core::train::Predictor;

fn scenario() -> Scenario {
    let cfg = BenchmarkConfig {
        n_buses: 12,
        n_gen: 5,
        levels: vec![0.4, 0.5],
        conditions_per_level: 1,
        generalization_conditions: 1,
        n_faults: 8,
        sim: SimConfig { dt: 0.02, ..SimConfig::default() },
        ..BenchmarkConfig::default()
    };
    Scenario::build(&cfg).unwrap()
}

fn knowledge() -> Predictor {
    Predictor::Knowledge { kc_weights: KcWeights::default() }
}

#[test]
fn every_fault_gets_a_classified_row() {
    let s = scenario();
    let t = assess(&knowledge(), &s.grid, &s.conditions[0], &s.faults, &SecurityThresholds::default()).unwrap();
    assert_eq!(t.condition_id, s.conditions[0].id);
    assert_eq!(t.rows.len(), s.faults.len());
    assert_eq!(t.failed_rows(), 0);
    for (row, f) in t.rows.iter().zip(&s.faults) {
        assert_eq!(row.fault_id, f.id);
        assert!(row.delta_p.is_finite());
        assert!(row.metrics.is_some() && row.class.is_some() && row.residuals.is_some());
    }
    assert_eq!(t.to_csv().lines().count(), s.faults.len() + 1);
}

#[test]
fn unknown_location_is_reported_per_row() {
    let s = scenario();
    let mut faults = s.faults.clone();
    faults[1].location = 99_999;
    let t = assess(&knowledge(), &s.grid, &s.conditions[0], &faults, &SecurityThresholds::default()).unwrap();
    assert_eq!(t.failed_rows(), 1);
    let bad = &t.rows[1];
    assert!(bad.error.is_some());
    assert!(bad.metrics.is_none() && bad.class.is_none());
    assert!(t.rows[0].error.is_none());
    let csv = t.to_csv();
    assert_eq!(csv.lines().count(), faults.len() + 1);
    let header_cols = csv.lines().next().unwrap().split(',').count();
    assert!(csv.lines().all(|l| l.split(',').count() == header_cols));
}

#[test]
fn empty_fault_list_gives_empty_table() {
    let s = scenario();
    let t = assess(&knowledge(), &s.grid, &s.conditions[0], &[], &SecurityThresholds::default()).unwrap();
    assert!(t.rows.is_empty());
    assert_eq!(t.to_csv().lines().count(), 1);
}

#[test]
fn inverted_thresholds_are_rejected() {
    let s = scenario();
    let mut th = SecurityThresholds::default();
    std::mem::swap(&mut th.warning, &mut th.insecure);
    assert!(assess(&knowledge(), &s.grid, &s.conditions[0], &s.faults, &th).is_err());
}
