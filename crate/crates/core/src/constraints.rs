//! Physical consistency relations among the six indicators: inertial power
//! balance, the pre-nadir parabola and quasi-steady power balance. Provides
//! relative residuals, the weighted constraint loss and the retain/correct
//! gate used at inference time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{NodeId, NodeKind, ValidatedGrid};
use crate::sim::{windowed_rocof, FrequencyMetrics, SimConfig, Trajectory};

/// Denominator floor for relative residuals, in the residual's own unit.
pub const DEFAULT_FLOOR: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("constraint context requires h_syn > 0 and d_eq_syn > 0 (got {0}, {1})")]
    InvalidContext(f64, f64),
    #[error("kc weights must be non-negative with a positive gate threshold")]
    InvalidWeights,
    #[error("batch is empty or lengths differ")]
    BatchShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintContext {
    pub h_syn: f64,
    /// Σ (D_i + K_mi/R_i) over governor-equipped synchronous units.
    pub d_eq_syn: f64,
    pub f_n: f64,
}

impl ConstraintContext {
    pub fn new(h_syn: f64, d_eq_syn: f64, f_n: f64) -> Result<Self, ConstraintError> {
        if !(h_syn > 0.0 && d_eq_syn > 0.0 && f_n > 0.0) {
            return Err(ConstraintError::InvalidContext(h_syn, d_eq_syn));
        }
        Ok(Self { h_syn, d_eq_syn, f_n })
    }

    /// Context of a (post-fault) grid.
    pub fn from_grid(grid: &ValidatedGrid) -> Result<Self, ConstraintError> {
        let d_eq: f64 = grid
            .nodes()
            .iter()
            .filter(|n| n.kind.is_synchronous())
            .filter_map(|n| n.gen_params.as_ref())
            .filter(|g| g.has_governor)
            .map(|g| g.d + g.regulation())
            .sum();
        Self::new(grid.h_syn_total(), d_eq, grid.f_n())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
}

impl ConstraintResiduals {
    pub fn as_array(&self) -> [f64; 3] {
        [self.e1, self.e2, self.e3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KcWeights {
    pub alpha: [f64; 3],
    pub epsilon_gate: f64,
    pub floor: f64,
}

impl Default for KcWeights {
    fn default() -> Self {
        Self { alpha: [1.0, 0.2, 1.0], epsilon_gate: 0.05, floor: DEFAULT_FLOOR }
    }
}

impl KcWeights {
    pub fn validate(&self) -> Result<(), ConstraintError> {
        let ok = self.alpha.iter().all(|a| *a >= 0.0 && a.is_finite())
            && self.epsilon_gate > 0.0
            && self.floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ConstraintError::InvalidWeights)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Retain,
    RouteToCn,
}

/// Relative residuals with the default floor.
pub fn kc_residuals(pred: &FrequencyMetrics, ctx: &ConstraintContext) -> ConstraintResiduals {
    kc_residuals_with(pred, ctx, DEFAULT_FLOOR)
}

/// Relative residuals. Signs follow the deviation so that surplus events
/// are handled by the same expressions:
///
/// * e1 = (ΔP₀ − 2·H_syn·(−RoCoF)/f_N) / max(|ΔP₀|, δ)
/// * e2 = (Δf_nadir − ½·(−RoCoF)·t_nadir) / max(|Δf_nadir|, δ), Δf_nadir = f_N − f_nadir
/// * e3 = (ΔP_∞ − D_eq,syn·(f_N − f_ss)/f_N) / max(|ΔP_∞|, δ)
pub fn kc_residuals_with(pred: &FrequencyMetrics, ctx: &ConstraintContext, floor: f64) -> ConstraintResiduals {
    let f_n = ctx.f_n;
    let e1 = (pred.dp0_syn + 2.0 * ctx.h_syn * pred.rocof_max / f_n) / pred.dp0_syn.abs().max(floor);
    let dn = f_n - pred.f_nadir;
    let e2 = (dn + 0.5 * pred.rocof_max * pred.t_nadir) / dn.abs().max(floor);
    let dss = (f_n - pred.f_ss) / f_n;
    let e3 = (pred.dpinf_syn - ctx.d_eq_syn * dss) / pred.dpinf_syn.abs().max(floor);
    ConstraintResiduals { e1, e2, e3 }
}

/// Σ_j α_j e_j² for one sample together with its gradient with respect to
/// the six physical outputs (order of [`FrequencyMetrics::to_array`]).
pub fn kc_term_with_grad(x: &[f64; 6], ctx: &ConstraintContext, w: &KcWeights) -> (f64, [f64; 6]) {
    let [rocof, f_nadir, t_nadir, f_ss, p0, pinf] = *x;
    let f_n = ctx.f_n;
    let floor = w.floor;
    let ramp = |v: f64| if v.abs() > floor { v.signum() } else { 0.0 };
    let mut g = [0.0; 6];

    let d1 = p0.abs().max(floor);
    let n1 = p0 + 2.0 * ctx.h_syn * rocof / f_n;
    let e1 = n1 / d1;
    let c1 = 2.0 * w.alpha[0] * e1;
    g[0] += c1 * 2.0 * ctx.h_syn / (f_n * d1);
    g[4] += c1 * (1.0 / d1 - n1 * ramp(p0) / (d1 * d1));

    let dn = f_n - f_nadir;
    let d2 = dn.abs().max(floor);
    let n2 = dn + 0.5 * rocof * t_nadir;
    let e2 = n2 / d2;
    let c2 = 2.0 * w.alpha[1] * e2;
    g[0] += c2 * 0.5 * t_nadir / d2;
    g[2] += c2 * 0.5 * rocof / d2;
    // dΔf_nadir/df_nadir = −1
    g[1] += c2 * (-1.0 / d2 + n2 * ramp(dn) / (d2 * d2));

    let dss = (f_n - f_ss) / f_n;
    let d3 = pinf.abs().max(floor);
    let n3 = pinf - ctx.d_eq_syn * dss;
    let e3 = n3 / d3;
    let c3 = 2.0 * w.alpha[2] * e3;
    g[3] += c3 * ctx.d_eq_syn / (f_n * d3);
    g[5] += c3 * (1.0 / d3 - n3 * ramp(pinf) / (d3 * d3));

    let value = w.alpha[0] * e1 * e1 + w.alpha[1] * e2 * e2 + w.alpha[2] * e3 * e3;
    (value, g)
}

fn weighted_sq(r: &ConstraintResiduals, w: &KcWeights) -> [f64; 3] {
    let e = r.as_array();
    [w.alpha[0] * e[0] * e[0], w.alpha[1] * e[1] * e[1], w.alpha[2] * e[2] * e[2]]
}

/// Σ_i Σ_j α_j e_ij² over a batch of predictions.
pub fn kc_loss(
    preds: &[FrequencyMetrics],
    ctxs: &[ConstraintContext],
    weights: &KcWeights,
) -> Result<f64, ConstraintError> {
    if preds.is_empty() || preds.len() != ctxs.len() {
        return Err(ConstraintError::BatchShape);
    }
    Ok(preds
        .iter()
        .zip(ctxs)
        .map(|(p, c)| weighted_sq(&kc_residuals_with(p, c, weights.floor), weights).iter().sum::<f64>())
        .sum())
}

/// Retain iff every weighted squared residual is within the threshold.
pub fn kc_gate(pred: &FrequencyMetrics, ctx: &ConstraintContext, weights: &KcWeights) -> Gate {
    gate_residuals(&kc_residuals_with(pred, ctx, weights.floor), weights)
}

pub fn gate_residuals(r: &ConstraintResiduals, weights: &KcWeights) -> Gate {
    let worst = weighted_sq(r, weights).into_iter().fold(0.0f64, f64::max);
    if worst <= weights.epsilon_gate {
        Gate::Retain
    } else {
        Gate::RouteToCn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InertialResidual {
    pub id: NodeId,
    /// Machine's own windowed extremal slope, Hz/s.
    pub rocof: f64,
    /// Electrical output deviation at the window midpoint, per-unit.
    pub dp0: f64,
    /// (dp0 − 2·H_i·(−rocof)/f_N) / max(|dp0|, δ).
    pub residual: f64,
}

/// Per-machine inertial power balance measured on an oracle trajectory.
pub fn per_generator_inertial_check(traj: &Trajectory, grid: &ValidatedGrid, cfg: &SimConfig) -> Vec<InertialResidual> {
    let first = traj.times.partition_point(|&t| t < traj.t_apply - 1e-9);
    traj.machine_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| {
            grid.index_of(**id).is_some_and(|i| matches!(grid.node(i).kind, NodeKind::ThermalGen | NodeKind::HydroGen))
        })
        .map(|(m, &id)| {
            let (k, w, slope) = windowed_rocof(&traj.per_machine_dfreq[m], first, cfg);
            let p_e = &traj.per_machine_p_e[m];
            let p0 = traj.p_e_initial[m];
            let dp0 = if w % 2 == 0 {
                p_e[k + w / 2] - p0
            } else {
                0.5 * (p_e[k + w / 2] + p_e[k + w / 2 + 1]) - p0
            };
            let residual = (dp0 + 2.0 * traj.machine_h[m] * slope / traj.f_n) / dp0.abs().max(DEFAULT_FLOOR);
            InertialResidual { id, rocof: slope, dp0, residual }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asfr::{asfr_predict, AggregatedParams};
    use crate::grid::fixtures::*;
    use crate::grid::{validate_grid, Edge, FaultEvent, FaultKind, GridSpec};
    use crate::sim::{extract_metrics, simulate};
    use proptest::prelude::*;

    fn ctx_for(a: &AggregatedParams) -> ConstraintContext {
        ConstraintContext::new(a.h_syn, a.d_eq_syn(), 50.0).unwrap()
    }

    fn example() -> (FrequencyMetrics, ConstraintContext) {
        let a = AggregatedParams::new(5.0, 0.0, 1.0, 20.0, 8.0, 0.3).unwrap();
        (asfr_predict(&a, 0.1, 50.0).unwrap(), ctx_for(&a))
    }

    #[test]
    fn closed_form_satisfies_balance_relations() {
        let (m, ctx) = example();
        let r = kc_residuals(&m, &ctx);
        assert!(r.e1.abs() < 1e-9 && r.e3.abs() < 1e-9);
        // Δf_nadir ≈ 0.502 Hz against ½·0.5·2.68 ≈ 0.67 Hz.
        assert!((r.e2 + 0.333).abs() < 0.01, "e2 = {}", r.e2);
    }

    #[test]
    fn doubled_inertial_power_gives_half_residual() {
        let (mut m, ctx) = example();
        m.dp0_syn *= 2.0;
        assert!((kc_residuals(&m, &ctx).e1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let (m, ctx) = example();
        let w = KcWeights { alpha: [1.0, 0.0, 1.0], ..KcWeights::default() };
        assert!(kc_loss(&[m], &[ctx], &w).unwrap() < 1e-18);
        let mut off = m;
        // e1 = 0.1 exactly: raise dp0 so that (dp0 − 0.1)/dp0 = 0.1.
        off.dp0_syn = 0.1 / 0.9;
        let unit = KcWeights { alpha: [1.0, 1.0, 1.0], ..KcWeights::default() };
        let e2 = kc_residuals(&off, &ctx).e2;
        let loss = kc_loss(&[off], &[ctx], &unit).unwrap();
        assert!((loss - e2 * e2 - 0.01).abs() < 1e-12);
        let double = KcWeights { alpha: [2.0, 2.0, 2.0], ..unit };
        assert!((kc_loss(&[off], &[ctx], &double).unwrap() - 2.0 * loss).abs() < 1e-12);
        assert_eq!(kc_loss(&[], &[], &unit), Err(ConstraintError::BatchShape));
    }

    #[test]
    fn gate_examples() {
        let w = KcWeights::default();
        let zero = ConstraintResiduals { e1: 0.0, e2: 0.0, e3: 0.0 };
        assert_eq!(gate_residuals(&zero, &w), Gate::Retain);
        let bad = ConstraintResiduals { e1: 1.0, ..zero };
        assert_eq!(gate_residuals(&bad, &w), Gate::RouteToCn);
        let edge = KcWeights { alpha: [1.0, 1.0, 1.0], epsilon_gate: 0.25, floor: DEFAULT_FLOOR };
        let at = ConstraintResiduals { e1: 0.5, ..zero };
        assert_eq!(gate_residuals(&at, &edge), Gate::Retain);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let (m, ctx) = example();
        let w = KcWeights::default();
        let mut x = m.to_array();
        x[4] *= 1.3;
        x[1] -= 0.05;
        x[5] *= 0.8;
        let (_, g) = kc_term_with_grad(&x, &ctx, &w);
        for i in 0..6 {
            let h = 1e-6 * x[i].abs().max(1e-3);
            let mut up = x;
            up[i] += h;
            let mut dn = x;
            dn[i] -= h;
            let fd = (kc_term_with_grad(&up, &ctx, &w).0 - kc_term_with_grad(&dn, &ctx, &w).0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "output {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn single_machine_inertial_check_matches_system_residual() {
        let grid = validate_grid(chain()).unwrap();
        let cfg = SimConfig::default();
        let fault = FaultEvent { location: 2, kind: FaultKind::DcBlocking, delta_p: 0.1, t_apply: 0.0 };
        let traj = simulate(&grid, &fault, &cfg).unwrap();
        let m = extract_metrics(&traj, &cfg, &grid).unwrap();
        let ctx = ConstraintContext::from_grid(&grid).unwrap();
        let per = per_generator_inertial_check(&traj, &grid, &cfg);
        assert_eq!(per.len(), 1);
        assert!((per[0].residual - kc_residuals(&m, &ctx).e1).abs() < 1e-12);
    }

    #[test]
    fn symmetric_machines_get_equal_residuals() {
        let g = thermal(3.0, 1.0, 0.05, 8.0, 0.3, 0.3);
        let spec = GridSpec {
            version: 1,
            f_n: 50.0,
            s_base: 100.0,
            nodes: vec![
                gen_node(0, NodeKind::ThermalGen, g.clone()),
                gen_node(1, NodeKind::ThermalGen, g),
                load_node(2, 0.6),
            ],
            edges: vec![Edge(0, 2, 5.0), Edge(1, 2, 5.0)],
        };
        let grid = validate_grid(spec).unwrap();
        let cfg = SimConfig::default();
        let fault = FaultEvent { location: 2, kind: FaultKind::DcBlocking, delta_p: 0.08, t_apply: 0.0 };
        let traj = simulate(&grid, &fault, &cfg).unwrap();
        let per = per_generator_inertial_check(&traj, &grid, &cfg);
        assert!((per[0].residual - per[1].residual).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn closed_form_identities_hold(h in 1.0f64..15.0, frac in 0.0f64..0.5, d in 0.2f64..3.0,
                                       r in 5.0f64..60.0, t_r in 3.0f64..20.0, f_h in 0.1f64..0.6,
                                       dp in 0.005f64..0.3, surplus in proptest::bool::ANY) {
            let a = AggregatedParams::new(h * (1.0 - frac), h * frac, d, r, t_r, f_h).unwrap();
            let dp = if surplus { -dp } else { dp };
            let m = asfr_predict(&a, dp, 50.0).unwrap();
            let res = kc_residuals(&m, &ctx_for(&a));
            prop_assert!(res.e1.abs() < 1e-9 && res.e3.abs() < 1e-9);
        }

        #[test]
        fn loss_is_non_negative_and_gate_scale_consistent(e in proptest::array::uniform3(-2.0f64..2.0),
                                                          c in 0.1f64..10.0) {
            let r = ConstraintResiduals { e1: e[0], e2: e[1], e3: e[2] };
            let w = KcWeights::default();
            let scaled = KcWeights { alpha: w.alpha.map(|a| a * c), epsilon_gate: w.epsilon_gate * c, ..w };
            prop_assert_eq!(gate_residuals(&r, &w), gate_residuals(&r, &scaled));
            prop_assert!(weighted_sq(&r, &w).iter().all(|v| *v >= 0.0));
        }
    }
}
