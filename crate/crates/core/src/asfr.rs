//! Aggregated system frequency response: a single-machine reheat reduction of
//! the whole grid with closed-form indicators, plus Monte Carlo sampling of
//! knowledge labels over widened parameter ranges.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{NodeKind, ValidatedGrid};
use crate::sim::{FrequencyMetrics, Provenance};

pub type KnowledgeLabel = FrequencyMetrics;

#[derive(Debug, Error)]
pub enum AsfrError {
    #[error("aggregate inertia must be positive")]
    ZeroInertia,
    #[error("grid has no synchronous machine")]
    NoSynchronousMachine,
    #[error("invalid aggregate parameter: {0}")]
    InvalidParameter(String),
    #[error("nadir time evaluated to {0}; branch selection failed")]
    NegativeNadirTime(f64),
    #[error("invalid sample count {0}")]
    InvalidCount(usize),
    #[error("invalid knowledge ranges: {0}")]
    InvalidRanges(String),
    #[error("knowledge csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatedParams {
    pub h: f64,
    pub h_syn: f64,
    pub h_vir: f64,
    pub d: f64,
    pub r_inv: f64,
    pub t_r: f64,
    pub f_h: f64,
    pub omega_n: f64,
    pub zeta: f64,
    /// Damped natural frequency; zero when the response is overdamped.
    pub omega_r: f64,
    pub b: f64,
}

impl AggregatedParams {
    /// Builds the aggregate and its derived second-order quantities.
    pub fn new(h_syn: f64, h_vir: f64, d: f64, r_inv: f64, t_r: f64, f_h: f64) -> Result<Self, AsfrError> {
        let h = h_syn + h_vir;
        if !(h > 0.0) || h_syn < 0.0 || h_vir < 0.0 {
            return Err(AsfrError::ZeroInertia);
        }
        let finite = [d, r_inv, t_r, f_h].iter().all(|v| v.is_finite());
        if !finite || d < 0.0 || r_inv < 0.0 || !(t_r > 0.0) || !(0.0..=1.0).contains(&f_h) {
            return Err(AsfrError::InvalidParameter(format!(
                "d={d}, r_inv={r_inv}, t_r={t_r}, f_h={f_h}"
            )));
        }
        if !(d + r_inv > 0.0) {
            return Err(AsfrError::InvalidParameter("d + r_inv must be positive".into()));
        }
        let omega_n = ((d + r_inv) / (2.0 * h * t_r)).sqrt();
        let zeta = (d * t_r + 2.0 * h + f_h * t_r * r_inv) / (2.0 * (d + r_inv)) * omega_n;
        let omega_r = if zeta < 1.0 { omega_n * (1.0 - zeta * zeta).sqrt() } else { 0.0 };
        let b2 = 1.0 - 2.0 * zeta * omega_n * t_r + omega_n * omega_n * t_r * t_r;
        Ok(Self {
            h,
            h_syn,
            h_vir,
            d,
            r_inv,
            t_r,
            f_h,
            omega_n,
            zeta,
            omega_r,
            b: b2.max(0.0).sqrt(),
        })
    }

    pub fn is_overdamped(&self) -> bool {
        self.zeta >= 1.0
    }

    /// Damping attributed to governor-equipped synchronous units.
    pub fn d_eq_syn(&self) -> f64 {
        self.d + self.r_inv
    }

    /// The same aggregate with the reheat time constant scaled by
    /// `1 + fraction`, i.e. a knowledge source with parametric error.
    pub fn with_t_r_error(&self, fraction: f64) -> Result<Self, AsfrError> {
        Self::new(self.h_syn, self.h_vir, self.d, self.r_inv, self.t_r * (1.0 + fraction), self.f_h)
    }
}

/// Collapses a grid into its aggregate. Damping sums the synchronous D_i
/// only (load damping is not part of the reduction). T_R and F_H are
/// regulation-weighted over governed thermal units; a grid regulated purely
/// by hydro units uses T_R = ½·T_w (weighted) and F_H = 0.
pub fn aggregate_params(grid: &ValidatedGrid) -> Result<AggregatedParams, AsfrError> {
    let mut h_syn = 0.0;
    let mut h_vir = 0.0;
    let mut d = 0.0;
    let mut r_inv = 0.0;
    let (mut thermal_w, mut t_r, mut f_h) = (0.0, 0.0, 0.0);
    let (mut hydro_w, mut t_h) = (0.0, 0.0);
    let mut any_sync = false;
    for node in grid.nodes() {
        let Some(g) = node.gen_params.as_ref() else { continue };
        match node.kind {
            NodeKind::RenewableGen => h_vir += g.h_vir,
            NodeKind::ThermalGen | NodeKind::HydroGen => {
                any_sync = true;
                h_syn += g.h;
                d += g.d;
                let w = g.regulation();
                r_inv += w;
                if node.kind == NodeKind::ThermalGen {
                    thermal_w += w;
                    t_r += w * g.t_r;
                    f_h += w * g.f_h;
                } else {
                    hydro_w += w;
                    t_h += w * 0.5 * g.t_w;
                }
            }
            _ => {}
        }
    }
    if !any_sync {
        return Err(AsfrError::NoSynchronousMachine);
    }
    let (t_r, f_h) = if thermal_w > 0.0 {
        (t_r / thermal_w, f_h / thermal_w)
    } else if hydro_w > 0.0 {
        (t_h / hydro_w, 0.0)
    } else {
        // No regulation: the reheat pole cancels, any positive T_R works.
        (1.0, 0.0)
    };
    AggregatedParams::new(h_syn, h_vir, d, r_inv, t_r, f_h)
}

/// Step response y(t)/Δf_ss of the aggregate for the overdamped or
/// critically damped case.
fn overdamped_shape(agg: &AggregatedParams, t: f64) -> f64 {
    let a = agg.zeta * agg.omega_n;
    let c = agg.omega_n * agg.omega_n * agg.t_r;
    let beta = agg.omega_n * (agg.zeta * agg.zeta - 1.0).max(0.0).sqrt();
    let g = if beta * t < 1e-8 {
        1.0 + (a - c) * t
    } else {
        (beta * t).cosh() + (a - c) / beta * (beta * t).sinh()
    };
    1.0 - (-a * t).exp() * g
}

/// (t_nadir, nadir deviation / steady deviation) without oscillation.
fn overdamped_nadir(agg: &AggregatedParams) -> Result<(f64, f64), AsfrError> {
    let a = agg.zeta * agg.omega_n;
    let beta = agg.omega_n * (agg.zeta * agg.zeta - 1.0).max(0.0).sqrt();
    let overshoot = a * agg.t_r > 1.0 && agg.b > 0.0;
    if overshoot {
        let t = if beta * agg.t_r < 1e-9 {
            agg.t_r / (a * agg.t_r - 1.0)
        } else {
            (agg.t_r * beta / (a * agg.t_r - 1.0)).atanh() / beta
        };
        if !(t > 0.0) || !t.is_finite() {
            return Err(AsfrError::NegativeNadirTime(t));
        }
        return Ok((t, overdamped_shape(agg, t)));
    }
    // Monotone approach: the extremum is the settling value; report the
    // first time the response comes within 0.1% of it.
    let target = 1.0 - 1e-3;
    let mut hi = 1.0 / agg.omega_n.max(1e-6);
    while overdamped_shape(agg, hi) < target {
        hi *= 2.0;
        if hi > 1e9 {
            return Err(AsfrError::NegativeNadirTime(f64::INFINITY));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if overdamped_shape(agg, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((hi, 1.0))
}

/// Closed-form indicators of the aggregate for a step imbalance `delta_p`.
pub fn asfr_predict(agg: &AggregatedParams, delta_p: f64, f_n: f64) -> Result<KnowledgeLabel, AsfrError> {
    if delta_p == 0.0 {
        return Ok(FrequencyMetrics::nominal(f_n));
    }
    if !delta_p.is_finite() {
        return Err(AsfrError::InvalidParameter(format!("delta_p = {delta_p}")));
    }
    let rocof = -delta_p * f_n / (2.0 * agg.h);
    let ss = delta_p / (agg.d + agg.r_inv);
    let (t_nadir, ratio) = if agg.zeta < 1.0 {
        let wr = agg.omega_r;
        let mut t = (agg.t_r * wr).atan2(agg.t_r * agg.zeta * agg.omega_n - 1.0) / wr;
        if t <= 0.0 {
            t += std::f64::consts::PI / wr;
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(AsfrError::NegativeNadirTime(t));
        }
        (t, 1.0 + agg.b * (-agg.zeta * agg.omega_n * t).exp())
    } else {
        overdamped_nadir(agg)?
    };
    Ok(FrequencyMetrics {
        rocof_max: rocof,
        f_nadir: f_n - ss * ratio * f_n,
        t_nadir,
        f_ss: f_n - ss * f_n,
        dp0_syn: delta_p * agg.h_syn / agg.h,
        dpinf_syn: (agg.d + agg.r_inv) * ss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub actual: (f64, f64),
    pub expanded: (f64, f64),
}

impl ParamRange {
    pub const fn new(actual: (f64, f64), expanded: (f64, f64)) -> Self {
        Self { actual, expanded }
    }

    fn check(&self, name: &str) -> Result<(), AsfrError> {
        let (a0, a1) = self.actual;
        let (e0, e1) = self.expanded;
        let ok = a0 < a1 && e0 < e1 && e0 <= a0 && a1 <= e1 && (e0 < a0 || a1 < e1);
        if ok && [a0, a1, e0, e1].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(AsfrError::InvalidRanges(format!(
                "{name}: expanded {:?} must strictly contain actual {:?}",
                self.expanded, self.actual
            )))
        }
    }

    fn pick(&self, expanded: bool) -> (f64, f64) {
        if expanded {
            self.expanded
        } else {
            self.actual
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRanges {
    pub h: ParamRange,
    pub d: ParamRange,
    pub r_inv: ParamRange,
    pub t_r: ParamRange,
    pub f_h: ParamRange,
    pub h_vir_fraction: ParamRange,
    pub delta_p: ParamRange,
}

impl Default for KnowledgeRanges {
    fn default() -> Self {
        Self {
            h: ParamRange::new((2.0, 8.0), (1.0, 15.0)),
            d: ParamRange::new((0.5, 1.5), (0.2, 3.0)),
            r_inv: ParamRange::new((10.0, 30.0), (5.0, 60.0)),
            t_r: ParamRange::new((6.0, 10.0), (3.0, 20.0)),
            f_h: ParamRange::new((0.2, 0.4), (0.1, 0.6)),
            h_vir_fraction: ParamRange::new((0.0, 0.3), (0.0, 0.5)),
            delta_p: ParamRange::new((0.01, 0.15), (0.005, 0.3)),
        }
    }
}

impl KnowledgeRanges {
    pub fn validate(&self) -> Result<(), AsfrError> {
        self.h.check("h")?;
        self.d.check("d")?;
        self.r_inv.check("r_inv")?;
        self.t_r.check("t_r")?;
        self.f_h.check("f_h")?;
        self.h_vir_fraction.check("h_vir_fraction")?;
        self.delta_p.check("delta_p")?;
        if self.f_h.expanded.0 < 0.0 || self.f_h.expanded.1 > 1.0 {
            return Err(AsfrError::InvalidRanges("f_h must stay inside [0, 1]".into()));
        }
        if self.h_vir_fraction.expanded.0 < 0.0 || self.h_vir_fraction.expanded.1 >= 1.0 {
            return Err(AsfrError::InvalidRanges("h_vir_fraction must stay inside [0, 1)".into()));
        }
        if self.h.expanded.0 <= 0.0 || self.t_r.expanded.0 <= 0.0 || self.delta_p.expanded.0 <= 0.0 {
            return Err(AsfrError::InvalidRanges("h, t_r and delta_p must stay positive".into()));
        }
        Ok(())
    }
}

/// Settings for Monte Carlo knowledge generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeSampler {
    pub ranges: KnowledgeRanges,
    /// Draw from the expanded ranges (pretraining) or the actual ones.
    pub expanded: bool,
    /// Share of records whose imbalance is a surplus (negative delta_p).
    pub surplus_fraction: f64,
    /// Relative error applied to T_R when computing labels; the recorded
    /// t_r feature keeps the drawn value.
    pub t_r_error: f64,
}

impl Default for KnowledgeSampler {
    fn default() -> Self {
        Self { ranges: KnowledgeRanges::default(), expanded: true, surplus_fraction: 0.2, t_r_error: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub h: f64,
    pub h_syn: f64,
    pub h_vir: f64,
    pub d: f64,
    pub r_inv: f64,
    pub t_r: f64,
    pub f_h: f64,
    pub delta_p: f64,
    pub label: KnowledgeLabel,
    pub provenance: Provenance,
}

impl KnowledgeRecord {
    pub fn aggregate(&self) -> Result<AggregatedParams, AsfrError> {
        AggregatedParams::new(self.h_syn, self.h_vir, self.d, self.r_inv, self.t_r, self.f_h)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeDataset {
    pub f_n: f64,
    pub records: Vec<KnowledgeRecord>,
}

pub const KNOWLEDGE_COLUMNS: [&str; 15] = [
    "h", "h_syn", "h_vir", "d", "r_inv", "t_r", "f_h", "delta_p", "rocof_max", "f_nadir", "t_nadir", "f_ss",
    "dp0_syn", "dpinf_syn", "provenance",
];

impl KnowledgeDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AsfrError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(KNOWLEDGE_COLUMNS)?;
        for r in &self.records {
            let mut row: Vec<String> = [r.h, r.h_syn, r.h_vir, r.d, r.r_inv, r.t_r, r.f_h, r.delta_p]
                .iter()
                .chain(r.label.to_array().iter())
                .map(|v| v.to_string())
                .collect();
            row.push(r.provenance.as_str().to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf8 csv")
    }

    pub fn read_csv<R: Read>(input: R, f_n: f64) -> Result<Self, AsfrError> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != KNOWLEDGE_COLUMNS {
            return Err(AsfrError::InvalidParameter(format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for row in r.records() {
            let row = row?;
            let mut v = [0.0; 14];
            for (slot, field) in v.iter_mut().zip(row.iter()) {
                *slot = field
                    .parse()
                    .map_err(|_| AsfrError::InvalidParameter(format!("bad number {field:?}")))?;
            }
            let provenance = Provenance::parse(&row[14])
                .ok_or_else(|| AsfrError::InvalidParameter(format!("bad provenance {:?}", &row[14])))?;
            records.push(KnowledgeRecord {
                h: v[0],
                h_syn: v[1],
                h_vir: v[2],
                d: v[3],
                r_inv: v[4],
                t_r: v[5],
                f_h: v[6],
                delta_p: v[7],
                label: FrequencyMetrics::from_slice(&v[8..14]),
                provenance,
            });
        }
        Ok(Self { f_n, records })
    }
}

fn uniform(rng: &mut ChaCha20Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn sample_one(s: &KnowledgeSampler, seed: u64, index: usize, f_n: f64) -> Result<KnowledgeRecord, AsfrError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let e = s.expanded;
    let h = uniform(&mut rng, s.ranges.h.pick(e));
    let frac = uniform(&mut rng, s.ranges.h_vir_fraction.pick(e));
    let d = uniform(&mut rng, s.ranges.d.pick(e));
    let r_inv = uniform(&mut rng, s.ranges.r_inv.pick(e));
    let t_r = uniform(&mut rng, s.ranges.t_r.pick(e));
    let f_h = uniform(&mut rng, s.ranges.f_h.pick(e));
    let mut delta_p = uniform(&mut rng, s.ranges.delta_p.pick(e));
    if rng.gen::<f64>() < s.surplus_fraction {
        delta_p = -delta_p;
    }
    let h_vir = h * frac;
    let h_syn = h - h_vir;
    let agg = AggregatedParams::new(h_syn, h_vir, d, r_inv, t_r, f_h)?;
    let label_agg = if s.t_r_error != 0.0 { agg.with_t_r_error(s.t_r_error)? } else { agg };
    Ok(KnowledgeRecord {
        h,
        h_syn,
        h_vir,
        d,
        r_inv,
        t_r,
        f_h,
        delta_p,
        label: asfr_predict(&label_agg, delta_p, f_n)?,
        provenance: Provenance::Knowledge,
    })
}

/// Draws `n` parameter sets i.i.d. uniform and labels them analytically.
/// Each record has its own seed stream, so the result does not depend on
/// how the work is split across threads.
pub fn sample_knowledge_dataset(
    sampler: &KnowledgeSampler,
    n: usize,
    seed: u64,
    f_n: f64,
) -> Result<KnowledgeDataset, AsfrError> {
    if n == 0 {
        return Err(AsfrError::InvalidCount(n));
    }
    sampler.ranges.validate()?;
    if !(0.0..=0.5).contains(&sampler.t_r_error) {
        return Err(AsfrError::InvalidParameter(format!("t_r_error {} outside [0, 0.5]", sampler.t_r_error)));
    }
    let records = (0..n)
        .into_par_iter()
        .map(|i| sample_one(sampler, seed, i, f_n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(KnowledgeDataset { f_n, records })
}

/// Serial reference implementation, used to check parallel determinism.
pub fn sample_knowledge_dataset_serial(
    sampler: &KnowledgeSampler,
    n: usize,
    seed: u64,
    f_n: f64,
) -> Result<KnowledgeDataset, AsfrError> {
    if n == 0 {
        return Err(AsfrError::InvalidCount(n));
    }
    sampler.ranges.validate()?;
    let records = (0..n).map(|i| sample_one(sampler, seed, i, f_n)).collect::<Result<Vec<_>, _>>()?;
    Ok(KnowledgeDataset { f_n, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::*;
    use crate::grid::{validate_grid, GridSpec};
    use proptest::prelude::*;

    fn example() -> AggregatedParams {
        AggregatedParams::new(5.0, 0.0, 1.0, 20.0, 8.0, 0.3).unwrap()
    }

    // Values below were evaluated by hand from the closed forms.
    #[test]
    fn single_machine_aggregate() {
        let grid = validate_grid(chain()).unwrap();
        let a = aggregate_params(&grid).unwrap();
        assert_eq!((a.h, a.h_syn, a.h_vir), (5.0, 5.0, 0.0));
        assert!((a.r_inv - 20.0).abs() < 1e-12);
        assert!((a.omega_n - (21.0f64 / 80.0).sqrt()).abs() < 1e-12);
        assert!((a.omega_n - 0.5123).abs() < 1e-4);
        assert!((a.zeta - 0.805).abs() < 1e-3);
        assert!((a.omega_r - 0.304).abs() < 1e-3);
        assert!((a.b - 3.347).abs() < 1e-3);
        // b² collapses to T_R r_inv (1 − F_H) / 2H.
        assert!((a.b * a.b - 8.0 * 20.0 * 0.7 / 10.0).abs() < 1e-9);
    }

    #[test]
    fn two_machines_double_totals() {
        let mut spec = chain();
        let mut second = spec.nodes[0].clone();
        second.id = 3;
        spec.nodes.push(second);
        spec.edges.push(crate::grid::Edge(3, 1, 10.0));
        let a = aggregate_params(&validate_grid(spec).unwrap()).unwrap();
        assert_eq!(a.h, 10.0);
        assert!((a.r_inv - 40.0).abs() < 1e-12);
        let expected = ((2.0 + 40.0) / (2.0 * 10.0 * 8.0f64)).sqrt();
        assert!((a.omega_n - expected).abs() < 1e-12);
        assert!((a.omega_n - example().omega_n).abs() < 1e-12);
    }

    #[test]
    fn virtual_inertia_adds_to_total() {
        let mut spec: GridSpec = chain();
        let mut g = thermal(0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        g.has_governor = false;
        g.h_vir = 2.0;
        spec.nodes[1] = gen_node(1, NodeKind::RenewableGen, g);
        let a = aggregate_params(&validate_grid(spec).unwrap()).unwrap();
        assert_eq!((a.h, a.h_syn, a.h_vir), (7.0, 5.0, 2.0));
    }

    #[test]
    fn worked_example_indicators() {
        let m = asfr_predict(&example(), 0.1, 50.0).unwrap();
        assert!((m.rocof_max + 0.5).abs() < 1e-12);
        assert!((m.f_ss - (50.0 - 0.1 / 21.0 * 50.0)).abs() < 1e-12);
        assert!((m.f_ss - 49.762).abs() < 1e-3);
        assert!((m.t_nadir - 2.676).abs() < 5e-3);
        assert!((m.f_nadir - 49.498).abs() < 2e-3);
        assert!((m.dpinf_syn - 0.1).abs() < 1e-15);
        assert!((m.dp0_syn - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_disturbance_is_nominal() {
        assert_eq!(asfr_predict(&example(), 0.0, 50.0).unwrap(), FrequencyMetrics::nominal(50.0));
    }

    #[test]
    fn t_r_error_leaves_rate_and_settling_alone() {
        let base = asfr_predict(&example(), 0.1, 50.0).unwrap();
        let err = asfr_predict(&example().with_t_r_error(0.35).unwrap(), 0.1, 50.0).unwrap();
        assert_eq!(base.rocof_max, err.rocof_max);
        assert_eq!(base.f_ss, err.f_ss);
        assert!(err.t_nadir != base.t_nadir && err.f_nadir != base.f_nadir);
        let mut last = 0.0;
        for k in 1..=7 {
            let shifted = asfr_predict(&example().with_t_r_error(0.05 * k as f64).unwrap(), 0.1, 50.0).unwrap();
            let gap = (shifted.t_nadir - base.t_nadir).abs();
            assert!(gap > last);
            last = gap;
        }
    }

        #[test]
    fn overdamped_branch_finds_stationary_point() {
        let agg = AggregatedParams::new(1.0, 0.0, 3.0, 5.0, 3.0, 0.6).unwrap();
        assert!(agg.is_overdamped());
        let (t, ratio) = overdamped_nadir(&agg).unwrap();
        assert!(ratio > 1.0);
        let h = 1e-5;
        let slope = (overdamped_shape(&agg, t + h) - overdamped_shape(&agg, t - h)) / (2.0 * h);
        assert!(slope.abs() < 1e-6);
        let m = asfr_predict(&agg, 0.1, 50.0).unwrap();
        assert!(m.t_nadir > 0.0 && m.f_nadir < m.f_ss);

        // Without regulation the response is first order and never overshoots.
        let flat = AggregatedParams::new(4.0, 0.0, 2.0, 0.0, 8.0, 0.3).unwrap();
        assert!(flat.is_overdamped());
        let m = asfr_predict(&flat, 0.1, 50.0).unwrap();
        assert_eq!(m.f_nadir, m.f_ss);
        let tau = 2.0 * 4.0 / 2.0;
        assert!((m.t_nadir - tau * 1000f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn knowledge_sampling_guards_and_determinism() {
        let s = KnowledgeSampler::default();
        assert!(matches!(sample_knowledge_dataset(&s, 0, 1, 50.0), Err(AsfrError::InvalidCount(0))));
        let a = sample_knowledge_dataset(&s, 1000, 42, 50.0).unwrap();
        let b = sample_knowledge_dataset(&s, 1000, 42, 50.0).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        let serial = sample_knowledge_dataset_serial(&s, 1000, 42, 50.0).unwrap();
        assert_eq!(a.to_csv_string(), serial.to_csv_string());
        let back = KnowledgeDataset::read_csv(a.to_csv_string().as_bytes(), 50.0).unwrap();
        assert_eq!(back, a);
        assert!(a.to_csv_string().starts_with(&KNOWLEDGE_COLUMNS.join(",")));
    }

    #[test]
    fn expanded_samples_cover_beyond_actual() {
        let s = KnowledgeSampler { surplus_fraction: 0.0, ..KnowledgeSampler::default() };
        let data = sample_knowledge_dataset(&s, 10_000, 9, 50.0).unwrap();
        let r = s.ranges;
        let check = |vals: Vec<f64>, range: ParamRange| {
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo >= range.expanded.0 && hi <= range.expanded.1);
            if range.expanded.0 < range.actual.0 {
                assert!(lo < range.actual.0);
            }
            assert!(hi > range.actual.1);
        };
        check(data.records.iter().map(|x| x.h).collect(), r.h);
        check(data.records.iter().map(|x| x.d).collect(), r.d);
        check(data.records.iter().map(|x| x.r_inv).collect(), r.r_inv);
        check(data.records.iter().map(|x| x.t_r).collect(), r.t_r);
        check(data.records.iter().map(|x| x.f_h).collect(), r.f_h);
        check(data.records.iter().map(|x| x.delta_p).collect(), r.delta_p);
    }

    #[test]
    fn ranges_must_strictly_widen() {
        let mut r = KnowledgeRanges::default();
        r.h.expanded = r.h.actual;
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn aggregate_invariants(h in 2.0f64..8.0, frac in 0.0f64..0.3, d in 0.5f64..1.5,
                                r in 10.0f64..30.0, t_r in 6.0f64..10.0, f_h in 0.2f64..0.4,
                                dp in 0.01f64..0.15) {
            let a = AggregatedParams::new(h * (1.0 - frac), h * frac, d, r, t_r, f_h).unwrap();
            prop_assert!((a.h - a.h_syn - a.h_vir).abs() < 1e-12);
            let wn2 = (d + r) / (2.0 * a.h * t_r);
            prop_assert!((a.omega_n * a.omega_n - wn2).abs() <= 1e-12 * wn2);
            if a.zeta < 1.0 {
                let m = asfr_predict(&a, dp, 50.0).unwrap();
                prop_assert!(m.f_nadir <= m.f_ss && m.f_ss <= 50.0);
                prop_assert!(m.t_nadir > 0.0 && m.t_nadir < std::f64::consts::PI / a.omega_r);
                prop_assert!((m.dpinf_syn - dp).abs() <= 1e-12);
            }
        }

        #[test]
        fn predictions_are_monotone(h in 1.0f64..14.0, r in 5.0f64..59.0) {
            let lo = AggregatedParams::new(h, 0.0, 1.0, r, 8.0, 0.3).unwrap();
            let more_h = AggregatedParams::new(h + 1.0, 0.0, 1.0, r, 8.0, 0.3).unwrap();
            let more_r = AggregatedParams::new(h, 0.0, 1.0, r + 1.0, 8.0, 0.3).unwrap();
            let base = asfr_predict(&lo, 0.1, 50.0).unwrap();
            prop_assert!(asfr_predict(&more_h, 0.1, 50.0).unwrap().rocof_max.abs() < base.rocof_max.abs());
            prop_assert!(50.0 - asfr_predict(&more_r, 0.1, 50.0).unwrap().f_ss < 50.0 - base.f_ss);
        }
    }
}
