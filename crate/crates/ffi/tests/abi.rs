use std::ffi::{CStr, CString};
use std::ptr;

use fsa_core::asfr::{asfr_predict, AggregatedParams};
use fsa_core::dataset::{BenchmarkConfig, Scenario};
use fsa_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fsa_last_error()) }.to_string_lossy().into_owned()
}

fn small_scenario() -> Scenario {
    let cfg = BenchmarkConfig { conditions_per_level: 1, generalization_conditions: 1, ..BenchmarkConfig::default() };
    Scenario::build(&cfg).unwrap()
}

#[test]
fn closed_form_matches_the_library() {
    let agg = FsaAggregate { h_syn: 4.0, h_vir: 1.0, d: 1.0, r_inv: 20.0, t_r: 8.0, f_h: 0.3 };
    let mut out = FsaMetrics::default();
    assert_eq!(unsafe { fsa_asfr_predict(&agg, 0.1, 50.0, &mut out) }, FsaStatus::Ok);
    let want = asfr_predict(&AggregatedParams::new(4.0, 1.0, 1.0, 20.0, 8.0, 0.3).unwrap(), 0.1, 50.0).unwrap();
    assert_eq!(out.values, want.to_array());

    let mut class = FsaClass::Unassessed;
    assert_eq!(unsafe { fsa_classify(&out, 50.0, &mut class) }, FsaStatus::Ok);
    assert_ne!(class, FsaClass::Unassessed);
}

#[test]
fn errors_come_back_as_codes() {
    let bad = FsaAggregate { h_syn: -1.0, h_vir: 0.0, d: 1.0, r_inv: 20.0, t_r: 8.0, f_h: 0.3 };
    let mut out = FsaMetrics::default();
    assert_eq!(unsafe { fsa_asfr_predict(&bad, 0.1, 50.0, &mut out) }, FsaStatus::Validation);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { fsa_asfr_predict(ptr::null(), 0.1, 50.0, &mut out) }, FsaStatus::NullPointer);
    assert!(last_error().contains("null"));

    let mut p = ptr::null_mut();
    let junk = CString::new("{not json").unwrap();
    assert_eq!(unsafe { fsa_predictor_from_json(junk.as_ptr(), &mut p) }, FsaStatus::Parse);
    assert!(p.is_null());

    let mut g = ptr::null_mut();
    let empty = CString::new(r#"{"version":1,"f_n":50.0,"s_base":100.0,"nodes":[],"edges":[]}"#).unwrap();
    let status = unsafe { fsa_grid_from_json(empty.as_ptr(), &mut g) };
    assert!(matches!(status, FsaStatus::Validation | FsaStatus::Parse), "{status:?}");
    assert!(g.is_null());

    let mut row = std::mem::MaybeUninit::<FsaRow>::uninit();
    assert_eq!(unsafe { fsa_table_row(ptr::null(), 0, row.as_mut_ptr()) }, FsaStatus::NullPointer);
    assert_eq!(unsafe { fsa_table_len(ptr::null()) }, 0);
}

#[test]
fn assess_through_handles() {
    let sc = small_scenario();
    let grid_json = CString::new(sc.grid.spec().to_json()).unwrap();
    let cond = CString::new(serde_json::to_string(&sc.conditions[0]).unwrap()).unwrap();
    let mut faults = sc.faults[..5].to_vec();
    faults[4].location = 9999;
    let faults = CString::new(serde_json::to_string(&faults).unwrap()).unwrap();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(fsa_predictor_knowledge(&mut p), FsaStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(fsa_grid_from_json(grid_json.as_ptr(), &mut g), FsaStatus::Ok, "{}", last_error());
        let mut t = ptr::null_mut();
        assert_eq!(fsa_assess(p, g, cond.as_ptr(), faults.as_ptr(), &mut t), FsaStatus::Ok, "{}", last_error());
        assert_eq!(fsa_table_len(t), 5);
        assert!(fsa_table_elapsed(t) >= 0.0);
        let mut row = std::mem::MaybeUninit::<FsaRow>::uninit();
        for i in 0..4 {
            assert_eq!(fsa_table_row(t, i, row.as_mut_ptr()), FsaStatus::Ok);
            let r = row.assume_init();
            assert_eq!(r.ok, 1);
            assert_ne!(r.security_class, FsaClass::Unassessed);
            assert!(r.metrics.values.iter().all(|v| v.is_finite()));
            assert_eq!(r.corrected, 0);
        }
        assert_eq!(fsa_table_row(t, 4, row.as_mut_ptr()), FsaStatus::Ok);
        let r = row.assume_init();
        assert_eq!(r.ok, 0);
        assert_eq!(r.security_class, FsaClass::Unassessed);
        assert_eq!(fsa_table_row(t, 5, row.as_mut_ptr()), FsaStatus::OutOfRange);
        let csv = fsa_table_csv(t);
        assert!(!csv.is_null());
        assert_eq!(CStr::from_ptr(csv).to_str().unwrap().lines().count(), 6);
        fsa_string_free(csv);
        fsa_table_free(t);
        fsa_grid_free(g);
        fsa_predictor_free(p);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(fsa_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_generated_and_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fsa.h")).unwrap();
    for name in [
        "fsa_version",
        "fsa_last_error",
        "fsa_asfr_predict",
        "fsa_predictor_from_json",
        "fsa_grid_from_json",
        "fsa_assess",
        "fsa_table_row",
        "fsa_table_free",
        "typedef struct FsaPredictor FsaPredictor",
        "FSA_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
