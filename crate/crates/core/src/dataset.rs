//! Synthetic benchmark: random grids, operating conditions across renewable
//! penetration levels, anticipated-fault sets, oracle labeling and splits.
//!
//! On disk a dataset is a directory holding `manifest.json`,
//! `grid_<id>.json`, `adjacency_<id>.csv`, `conditions.json`, `faults.json`
//! and `records.csv`. See [`RECORD_SCHEMA_VERSION`] for the record layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asfr::{aggregate_params, AsfrError, KnowledgeRanges};
use crate::constraints::{ConstraintContext, ConstraintError};
use crate::grid::{
    build_adjacency, validate_grid, AdjacencyMatrix, Edge, FaultEvent, FaultKind, GeneratorParams, GridError, GridSpec,
    LoadParams, NodeId, NodeKind, NodeSpec, ValidatedGrid, GRID_SCHEMA_VERSION,
};
use crate::sim::{label, FrequencyMetrics, Provenance, SimConfig, SimError, OUTPUT_NAMES};

/// Bumped whenever the records.csv column layout changes.
pub const RECORD_SCHEMA_VERSION: u32 = 1;

pub const NODE_FEATURES: usize = 5;
pub const GLOBAL_FEATURES: usize = 9;
pub const NODE_FEATURE_NAMES: [&str; NODE_FEATURES] = ["p_inj", "q_inj", "v_mag", "fault_indicator", "fault_delta_p"];
pub const GLOBAL_FEATURE_NAMES: [&str; GLOBAL_FEATURES] =
    ["h", "h_syn", "h_vir", "d", "r_inv", "t_r", "f_h", "renewable_penetration", "delta_p_total"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("infeasible generator mix: {0}")]
    InfeasibleMix(String),
    #[error("dispatch infeasible: {0}")]
    DispatchInfeasible(String),
    #[error("no admissible location for {0}")]
    NoAdmissibleLocation(&'static str),
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("knowledge: {0}")]
    Asfr(#[from] AsfrError),
    #[error("constraint context: {0}")]
    Constraint(#[from] ConstraintError),
    #[error("dataset file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Middle half of an actual parameter range.
fn central(range: (f64, f64)) -> (f64, f64) {
    let q = 0.25 * (range.1 - range.0);
    (range.0 + q, range.1 - q)
}

/// Power factor of every load and the reactive share of generator output.
const GEN_Q_RATIO: f64 = 0.2;

/// Builds a connected random grid. `mix` gives the thermal, hydro and
/// renewable shares of the `n_gen` units. System-level inertia, damping,
/// regulation and turbine parameters are drawn from the central half of the
/// actual knowledge ranges and split across the synchronous units. Every
/// tenth bus (at least one, if a spare bus exists) is a DC terminal junction;
/// the rest carry load totalling 1 per-unit.
pub fn generate_benchmark_grid(n_buses: usize, n_gen: usize, mix: [f64; 3], seed: u64) -> Result<GridSpec> {
    if mix.iter().any(|m| !(0.0..=1.0).contains(m)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InfeasibleMix(format!("shares {mix:?} must be in [0, 1] and sum to 1")));
    }
    if n_gen == 0 || n_gen >= n_buses {
        return Err(DatasetError::InfeasibleMix(format!("{n_gen} generators on {n_buses} buses leaves no load bus")));
    }
    let n_thermal = (mix[0] * n_gen as f64).round() as usize;
    let n_hydro = ((mix[1] * n_gen as f64).round() as usize).min(n_gen - n_thermal);
    let n_renew = n_gen - n_thermal - n_hydro;
    let n_sync = n_thermal + n_hydro;
    if n_sync == 0 {
        return Err(DatasetError::InfeasibleMix("at least one synchronous unit is required".into()));
    }

    let mut rng = rng_for(seed, 0);
    let mut order: Vec<usize> = (0..n_buses).collect();
    order.shuffle(&mut rng);
    let spare = n_buses - n_gen;
    let n_dc = if spare >= 2 { (n_buses / 10).max(1).min(spare - 1) } else { 0 };

    let ranges = KnowledgeRanges::default();
    let pick = |rng: &mut ChaCha20Rng, r: (f64, f64)| {
        let (lo, hi) = central(r);
        uniform(rng, lo, hi)
    };
    let h_sys = pick(&mut rng, ranges.h.actual);
    let d_sys = pick(&mut rng, ranges.d.actual);
    let r_inv_sys = pick(&mut rng, ranges.r_inv.actual);
    let weights: Vec<f64> = (0..n_sync).map(|_| uniform(&mut rng, 0.7, 1.3)).collect();
    let wsum: f64 = weights.iter().sum();

    let mut kinds = vec![NodeKind::Load; n_buses];
    for (slot, &bus) in order.iter().enumerate() {
        kinds[bus] = if slot < n_thermal {
            NodeKind::ThermalGen
        } else if slot < n_sync {
            NodeKind::HydroGen
        } else if slot < n_gen {
            NodeKind::RenewableGen
        } else if slot < n_gen + n_dc {
            NodeKind::Junction
        } else {
            NodeKind::Load
        };
    }

    let n_load = kinds.iter().filter(|k| **k == NodeKind::Load).count();
    let load_w: Vec<f64> = (0..n_load).map(|_| uniform(&mut rng, 0.5, 1.5)).collect();
    let load_sum: f64 = load_w.iter().sum();
    let base_pen = 0.5;

    let mut nodes = Vec::with_capacity(n_buses);
    let (mut sync_k, mut load_k) = (0, 0);
    for (bus, kind) in kinds.iter().enumerate() {
        let id = bus as NodeId;
        let node = match kind {
            NodeKind::ThermalGen | NodeKind::HydroGen => {
                let w = weights[sync_k] / wsum;
                sync_k += 1;
                let thermal = *kind == NodeKind::ThermalGen;
                let t_w = if thermal { 0.0 } else { uniform(&mut rng, 1.0, 2.0) };
                // The turbine zero feeds +2K·Δf straight through to P_m, which
                // undamps the swing modes of a droop-only hydro unit unless
                // 2K < D; cap K well inside that and inside H/(2·T_w).
                let r_inv = if thermal {
                    r_inv_sys * w
                } else {
                    (r_inv_sys * w).min(0.5 * h_sys * w / t_w).min(0.4 * d_sys * w)
                };
                let g = GeneratorParams {
                    h: h_sys * w,
                    d: d_sys * w,
                    r: 1.0 / r_inv,
                    k_m: 1.0,
                    f_h: if thermal { uniform(&mut rng, ranges.f_h.actual.0, ranges.f_h.actual.1) } else { 0.0 },
                    t_r: if thermal { uniform(&mut rng, ranges.t_r.actual.0, ranges.t_r.actual.1) } else { 0.0 },
                    t_w,
                    h_vir: 0.0,
                    p_set: (1.0 - base_pen) * w,
                    has_governor: true,
                };
                NodeSpec { id, kind: *kind, gen_params: Some(g), load_params: None }
            }
            NodeKind::RenewableGen => {
                let g = GeneratorParams {
                    h: 0.0,
                    d: 0.0,
                    r: 1.0,
                    k_m: 1.0,
                    f_h: 0.0,
                    t_r: 0.0,
                    t_w: 0.0,
                    h_vir: 0.0,
                    p_set: base_pen / n_renew as f64,
                    has_governor: false,
                };
                NodeSpec { id, kind: *kind, gen_params: Some(g), load_params: None }
            }
            NodeKind::Load => {
                let p = load_w[load_k] / load_sum;
                load_k += 1;
                let pf = uniform(&mut rng, 0.9, 0.98);
                let q = p * (1.0 - pf * pf).sqrt() / pf;
                NodeSpec { id, kind: *kind, gen_params: None, load_params: Some(LoadParams { p_load: p, q_load: q }) }
            }
            NodeKind::Junction => NodeSpec { id, kind: *kind, gen_params: None, load_params: None },
        };
        nodes.push(node);
    }

    // Random spanning tree over the shuffled order, then extra chords.
    let mut edges = Vec::new();
    let mut present = std::collections::BTreeSet::new();
    for k in 1..n_buses {
        let parent = order[rng.gen_range(0..k)];
        let (a, b) = (order[k].min(parent), order[k].max(parent));
        present.insert((a, b));
        edges.push(Edge(a as NodeId, b as NodeId, uniform(&mut rng, 5.0, 20.0)));
    }
    let extra = n_buses / 2;
    let mut attempts = 0;
    while edges.len() < n_buses - 1 + extra && attempts < 100 * n_buses {
        attempts += 1;
        let (i, j) = (rng.gen_range(0..n_buses), rng.gen_range(0..n_buses));
        let (a, b) = (i.min(j), i.max(j));
        if a == b || !present.insert((a, b)) {
            continue;
        }
        edges.push(Edge(a as NodeId, b as NodeId, uniform(&mut rng, 5.0, 20.0)));
    }

    let spec = GridSpec { version: GRID_SCHEMA_VERSION, f_n: 50.0, s_base: 1000.0, nodes, edges };
    validate_grid(spec.clone())?;
    Ok(spec)
}

/// One operating point of a base grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub id: usize,
    pub grid_id: usize,
    pub renewable_penetration: f64,
    pub load_scale: f64,
    /// (node, p_load, q_load) for every load bus.
    pub loads: Vec<(NodeId, f64, f64)>,
    /// (node, p_set) for every generator.
    pub dispatch: Vec<(NodeId, f64)>,
    /// (node, factor) scaling H, D and 1/R of each synchronous unit, i.e.
    /// how much of the plant is committed.
    pub commitment: Vec<(NodeId, f64)>,
    /// Total emulated inertia of the renewable fleet in seconds.
    pub h_vir_level: f64,
    /// Bus voltage magnitudes used as node features.
    pub voltages: Vec<f64>,
}

impl ConditionSpec {
    /// Applies the condition to its base grid.
    pub fn materialize(&self, base: &ValidatedGrid) -> Result<ValidatedGrid> {
        let loads: BTreeMap<NodeId, (f64, f64)> = self.loads.iter().map(|&(id, p, q)| (id, (p, q))).collect();
        let dispatch: BTreeMap<NodeId, f64> = self.dispatch.iter().copied().collect();
        let commit: BTreeMap<NodeId, f64> = self.commitment.iter().copied().collect();
        let renew_total: f64 = base
            .nodes()
            .iter()
            .filter(|n| n.kind == NodeKind::RenewableGen)
            .map(|n| dispatch.get(&n.id).copied().unwrap_or(0.0))
            .sum();
        let mut nodes = base.nodes().to_vec();
        for node in &mut nodes {
            if let Some(l) = node.load_params.as_mut() {
                let &(p, q) = loads
                    .get(&node.id)
                    .ok_or_else(|| DatasetError::Config(format!("condition {} misses load {}", self.id, node.id)))?;
                l.p_load = p;
                l.q_load = q;
            }
            let Some(g) = node.gen_params.as_mut() else { continue };
            g.p_set = *dispatch
                .get(&node.id)
                .ok_or_else(|| DatasetError::Config(format!("condition {} misses dispatch of {}", self.id, node.id)))?;
            if node.kind.is_synchronous() {
                let c = commit.get(&node.id).copied().unwrap_or(1.0);
                g.h *= c;
                g.d *= c;
                g.r /= c;
            } else if renew_total > 0.0 {
                g.h_vir = self.h_vir_level * g.p_set / renew_total;
            } else {
                g.h_vir = 0.0;
            }
        }
        Ok(base.with_nodes(nodes)?)
    }
}

/// Samples `n_per_level` balanced operating points per penetration level.
/// Each condition has its own seed stream keyed by (level index, k).
pub fn generate_conditions(
    grid: &ValidatedGrid,
    grid_id: usize,
    penetration_levels: &[f64],
    n_per_level: usize,
    seed: u64,
    first_id: usize,
) -> Result<Vec<ConditionSpec>> {
    if penetration_levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(DatasetError::Config(format!("penetration levels {penetration_levels:?} outside [0, 1]")));
    }
    let sync: Vec<&NodeSpec> = grid.nodes().iter().filter(|n| n.kind.is_synchronous()).collect();
    let renew: Vec<&NodeSpec> = grid.nodes().iter().filter(|n| n.kind == NodeKind::RenewableGen).collect();
    let base_sync_p: f64 = sync.iter().map(|n| n.p_set()).sum();
    let mut out = Vec::with_capacity(penetration_levels.len() * n_per_level);
    for (li, &level) in penetration_levels.iter().enumerate() {
        if level > 0.0 && renew.is_empty() {
            return Err(DatasetError::DispatchInfeasible(format!("level {level} needs renewable units")));
        }
        if level >= 1.0 {
            return Err(DatasetError::DispatchInfeasible("the synchronous fleet cannot be fully displaced".into()));
        }
        for k in 0..n_per_level {
            let mut rng = rng_for(seed, ((li as u64) << 32) | k as u64);
            let load_scale = uniform(&mut rng, 0.9, 1.1);
            let loads: Vec<(NodeId, f64, f64)> = grid
                .nodes()
                .iter()
                .filter_map(|n| n.load_params.map(|l| (n.id, l)))
                .map(|(id, l)| {
                    let s = load_scale * uniform(&mut rng, 0.95, 1.05);
                    (id, l.p_load * s, l.q_load * s)
                })
                .collect();
            let total_load: f64 = loads.iter().map(|l| l.1).sum();

            // Committed plant shrinks as renewables displace it.
            let c = (1.0 - level) / 0.5 * uniform(&mut rng, 0.9, 1.1);
            let commitment: Vec<(NodeId, f64)> =
                sync.iter().map(|n| (n.id, c * uniform(&mut rng, 0.95, 1.05))).collect();
            let sync_w: Vec<f64> =
                sync.iter().zip(&commitment).map(|(n, (_, ci))| n.p_set() / base_sync_p * ci).collect();
            let sw: f64 = sync_w.iter().sum();
            let renew_w: Vec<f64> = renew.iter().map(|_| uniform(&mut rng, 0.5, 1.5)).collect();
            let rw: f64 = renew_w.iter().sum();
            let sync_total = (1.0 - level) * total_load;
            let renew_total = total_load - sync_total;
            let mut dispatch: Vec<(NodeId, f64)> =
                sync.iter().zip(&sync_w).map(|(n, w)| (n.id, sync_total * w / sw)).collect();
            dispatch.extend(renew.iter().zip(&renew_w).map(|(n, w)| (n.id, renew_total * w / rw)));
            dispatch.sort_by_key(|d| d.0);

            let h_syn: f64 = sync.iter().zip(&commitment).map(|(n, (_, ci))| n.gen_params.as_ref().map_or(0.0, |g| g.h) * ci).sum();
            let frac = if level > 0.0 { uniform(&mut rng, 0.05, 0.3) } else { 0.0 };
            let h_vir_level = frac / (1.0 - frac) * h_syn;
            let voltages = (0..grid.len()).map(|_| 1.0 + uniform(&mut rng, -0.02, 0.02)).collect();

            let cond = ConditionSpec {
                id: first_id + out.len(),
                grid_id,
                renewable_penetration: level,
                load_scale,
                loads,
                dispatch,
                commitment,
                h_vir_level,
                voltages,
            };
            let g = cond.materialize(grid)?;
            let imbalance = g.total_generation() - g.total_load();
            if imbalance.abs() > 1e-6 {
                return Err(DatasetError::DispatchInfeasible(format!("condition {} is off by {imbalance}", cond.id)));
            }
            out.push(cond);
        }
    }
    Ok(out)
}

/// A contingency defined on a base grid. Magnitudes of trips and load
/// rejections follow the operating condition they are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub id: usize,
    pub kind: FaultKind,
    pub location: NodeId,
    /// DC blocking: lost infeed in per-unit. Load rejection: rejected share
    /// of the bus load. Generator trip: unused.
    pub magnitude: f64,
}

impl FaultSpec {
    pub fn resolve(&self, grid: &ValidatedGrid) -> Result<FaultEvent> {
        let idx = grid
            .index_of(self.location)
            .ok_or_else(|| DatasetError::Config(format!("fault {} at unknown node {}", self.id, self.location)))?;
        let node = grid.node(idx);
        let delta_p = match self.kind {
            FaultKind::GeneratorTrip => node.p_set(),
            FaultKind::LoadRejection => -self.magnitude * node.p_load(),
            FaultKind::DcBlocking => self.magnitude,
        };
        Ok(FaultEvent { location: self.location, kind: self.kind, delta_p, t_apply: 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultSetConfig {
    /// Lost DC infeed range in per-unit.
    pub dc_range: (f64, f64),
    /// Rejected share of a bus load.
    pub rejection_range: (f64, f64),
    /// Share of the non-trip faults that are load rejections.
    pub rejection_share: f64,
}

impl Default for FaultSetConfig {
    fn default() -> Self {
        Self { dc_range: (0.01, 0.10), rejection_range: (0.3, 1.0), rejection_share: 0.215 }
    }
}

/// Fault templates: one trip per generator first (up to `n`), the rest split
/// between DC blocking at junction buses and load rejection at load buses,
/// locations cycled in a seeded order.
pub fn generate_fault_specs(
    grid: &ValidatedGrid,
    kinds: &[FaultKind],
    n: usize,
    seed: u64,
    cfg: &FaultSetConfig,
) -> Result<Vec<FaultSpec>> {
    if n == 0 {
        return Err(DatasetError::Config("fault count must be at least 1".into()));
    }
    let mut rng = rng_for(seed, 1);
    let of_kind = |k: NodeKind| -> Vec<NodeId> { grid.nodes().iter().filter(|n| n.kind == k).map(|n| n.id).collect() };
    let gens: Vec<NodeId> = grid.nodes().iter().filter(|n| n.kind.is_generator()).map(|n| n.id).collect();
    let mut dc_nodes = of_kind(NodeKind::Junction);
    let mut load_nodes = of_kind(NodeKind::Load);
    dc_nodes.shuffle(&mut rng);
    load_nodes.shuffle(&mut rng);

    let has = |k: FaultKind| kinds.contains(&k);
    let mut out = Vec::with_capacity(n);
    if has(FaultKind::GeneratorTrip) {
        if gens.is_empty() {
            return Err(DatasetError::NoAdmissibleLocation("generator_trip"));
        }
        for &g in gens.iter().take(n) {
            out.push(FaultSpec { id: out.len(), kind: FaultKind::GeneratorTrip, location: g, magnitude: 0.0 });
        }
    }
    let rest = n - out.len();
    let (n_rej, n_dc) = match (has(FaultKind::LoadRejection), has(FaultKind::DcBlocking)) {
        (true, true) => {
            let r = (rest as f64 * cfg.rejection_share).round() as usize;
            (r, rest - r)
        }
        (true, false) => (rest, 0),
        (false, true) => (0, rest),
        (false, false) => (0, 0),
    };
    if out.len() + n_rej + n_dc < n {
        // Only trips requested and fewer units than faults: cycle again.
        for k in out.len()..n {
            out.push(FaultSpec { id: k, kind: FaultKind::GeneratorTrip, location: gens[k % gens.len()], magnitude: 0.0 });
        }
    }
    if n_dc > 0 && dc_nodes.is_empty() {
        return Err(DatasetError::NoAdmissibleLocation("dc_blocking"));
    }
    if n_rej > 0 && load_nodes.is_empty() {
        return Err(DatasetError::NoAdmissibleLocation("load_rejection"));
    }
    for k in 0..n_dc {
        let m = uniform(&mut rng, cfg.dc_range.0, cfg.dc_range.1);
        out.push(FaultSpec { id: out.len(), kind: FaultKind::DcBlocking, location: dc_nodes[k % dc_nodes.len()], magnitude: m });
    }
    for k in 0..n_rej {
        let m = uniform(&mut rng, cfg.rejection_range.0, cfg.rejection_range.1);
        out.push(FaultSpec {
            id: out.len(),
            kind: FaultKind::LoadRejection,
            location: load_nodes[k % load_nodes.len()],
            magnitude: m,
        });
    }
    Ok(out)
}

/// Fault events for one grid; see [`generate_fault_specs`].
pub fn generate_fault_set(
    grid: &ValidatedGrid,
    kinds: &[FaultKind],
    n: usize,
    seed: u64,
    cfg: &FaultSetConfig,
) -> Result<Vec<FaultEvent>> {
    generate_fault_specs(grid, kinds, n, seed, cfg)?.iter().map(|f| f.resolve(grid)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Generalization,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
            Self::Generalization => "generalization",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            "generalization" => Some(Self::Generalization),
            _ => None,
        }
    }
}

/// Model inputs of one (condition, fault) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub adjacency: Arc<AdjacencyMatrix>,
    pub node_features: Vec<[f64; NODE_FEATURES]>,
    pub global_features: [f64; GLOBAL_FEATURES],
    pub ctx: ConstraintContext,
}

/// Builds the model inputs of `fault` under an operating condition. Global
/// features describe the post-fault synchronous fleet; node features the
/// pre-fault operating point.
pub fn build_sample(
    grid: &ValidatedGrid,
    voltages: &[f64],
    penetration: f64,
    fault: &FaultEvent,
    adjacency: Arc<AdjacencyMatrix>,
) -> Result<SampleInput> {
    let fault_idx = fault.check_location(grid)?;
    if voltages.len() != grid.len() || adjacency.n() != grid.len() {
        return Err(DatasetError::Config("voltage or adjacency size differs from the grid".into()));
    }
    let node_features = grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let p_gen = n.p_set();
            let q_load = n.load_params.map_or(0.0, |l| l.q_load);
            let hit = i == fault_idx;
            [
                p_gen - n.p_load(),
                GEN_Q_RATIO * p_gen - q_load,
                voltages[i],
                if hit { 1.0 } else { 0.0 },
                if hit { fault.delta_p } else { 0.0 },
            ]
        })
        .collect();
    let post = grid.post_fault(fault);
    let agg = aggregate_params(&post)?;
    let global_features = [
        agg.h_syn + agg.h_vir,
        agg.h_syn,
        agg.h_vir,
        agg.d,
        agg.r_inv,
        agg.t_r,
        agg.f_h,
        penetration,
        fault.delta_p,
    ];
    Ok(SampleInput { adjacency, node_features, global_features, ctx: ConstraintContext::from_grid(&post)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub record_id: usize,
    pub condition_id: usize,
    pub fault_id: usize,
    pub grid_id: usize,
    pub split: Split,
    pub penetration: f64,
    pub fault: FaultEvent,
    pub input: SampleInput,
    pub label: FrequencyMetrics,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_buses: usize,
    pub n_gen: usize,
    pub mix: [f64; 3],
    pub grid_seed: u64,
    pub condition_seed: u64,
    pub fault_seed: u64,
    pub split_seed: u64,
    pub levels: Vec<f64>,
    pub conditions_per_level: usize,
    pub generalization_levels: Vec<f64>,
    pub generalization_conditions: usize,
    pub n_faults: usize,
    pub faults: FaultSetConfig,
    pub split_ratios: [f64; 3],
    pub sim: SimConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_buses: 30,
            n_gen: 10,
            mix: [0.5, 0.2, 0.3],
            grid_seed: 7,
            condition_seed: 11,
            fault_seed: 13,
            split_seed: 17,
            levels: vec![0.40, 0.45, 0.50, 0.55],
            conditions_per_level: 20,
            generalization_levels: vec![0.60],
            generalization_conditions: 17,
            n_faults: 131,
            faults: FaultSetConfig::default(),
            split_ratios: [0.7, 0.15, 0.15],
            sim: SimConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|r| *r < 0.0) {
            return Err(DatasetError::Config(format!("split ratios {:?} must be non-negative and sum to 1", self.split_ratios)));
        }
        if self.generalization_levels.iter().any(|g| self.levels.iter().any(|l| (l - g).abs() < 1e-12)) {
            return Err(DatasetError::Config("generalization levels overlap the training levels".into()));
        }
        self.sim.validate().map_err(|e| DatasetError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Everything needed to label a benchmark, before simulation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: BenchmarkConfig,
    pub grid: ValidatedGrid,
    pub adjacency: Arc<AdjacencyMatrix>,
    pub conditions: Vec<ConditionSpec>,
    pub faults: Vec<FaultSpec>,
}

impl Scenario {
    pub fn build(config: &BenchmarkConfig) -> Result<Self> {
        config.validate()?;
        let spec = generate_benchmark_grid(config.n_buses, config.n_gen, config.mix, config.grid_seed)?;
        let grid = validate_grid(spec)?;
        Self::from_grid(config, grid)
    }

    pub fn from_grid(config: &BenchmarkConfig, grid: ValidatedGrid) -> Result<Self> {
        let mut conditions =
            generate_conditions(&grid, 0, &config.levels, config.conditions_per_level, config.condition_seed, 0)?;
        let gen = generate_conditions(
            &grid,
            0,
            &config.generalization_levels,
            config.generalization_conditions,
            config.condition_seed ^ 0x5eed,
            conditions.len(),
        )?;
        conditions.extend(gen);
        let kinds = [FaultKind::GeneratorTrip, FaultKind::DcBlocking, FaultKind::LoadRejection];
        let faults = generate_fault_specs(&grid, &kinds, config.n_faults, config.fault_seed, &config.faults)?;
        let adjacency = Arc::new(build_adjacency(&grid));
        Ok(Self { config: config.clone(), grid, adjacency, conditions, faults })
    }

    pub fn is_generalization(&self, cond: &ConditionSpec) -> bool {
        self.config.generalization_levels.iter().any(|g| (g - cond.renewable_penetration).abs() < 1e-12)
    }

    pub fn pair_count(&self) -> usize {
        self.conditions.len() * self.faults.len()
    }

    /// Simulates pair `k` (condition-major order).
    pub fn label_pair(&self, k: usize) -> std::result::Result<(SampleInput, FaultEvent, FrequencyMetrics), String> {
        let cond = &self.conditions[k / self.faults.len()];
        let fspec = &self.faults[k % self.faults.len()];
        let grid = cond.materialize(&self.grid).map_err(|e| e.to_string())?;
        let event = fspec.resolve(&grid).map_err(|e| e.to_string())?;
        let input = build_sample(&grid, &cond.voltages, cond.renewable_penetration, &event, self.adjacency.clone())
            .map_err(|e| e.to_string())?;
        let metrics = label(&grid, &event, &self.config.sim).map_err(|e: SimError| e.to_string())?;
        Ok((input, event, metrics))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub record_schema_version: u32,
    pub generator_version: String,
    pub config: BenchmarkConfig,
    pub counts: BTreeMap<String, usize>,
    pub dropped: Vec<DroppedRecord>,
    pub files: Vec<String>,
    /// SHA-256 of records.csv.
    pub records_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub condition_id: usize,
    pub fault_id: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub manifest: Manifest,
    pub grid: GridSpec,
    pub adjacency: Arc<AdjacencyMatrix>,
    pub conditions: Vec<ConditionSpec>,
    pub faults: Vec<FaultSpec>,
    pub records: Vec<LabeledRecord>,
}

impl LabeledDataset {
    pub fn split(&self, split: Split) -> Vec<&LabeledRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn f_n(&self) -> f64 {
        self.grid.f_n
    }
}

/// Shuffles in-distribution record indices and cuts them by `ratios`.
pub fn assign_splits(n: usize, ratios: [f64; 3], seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, 2));
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Simulates every (condition, fault) pair. `parallel` spreads the pairs
/// over the rayon pool; results are gathered in pair order either way, so
/// both modes give identical datasets.
pub fn label_dataset(scenario: &Scenario, parallel: bool) -> Result<LabeledDataset> {
    let n = scenario.pair_count();
    let results: Vec<_> = if parallel {
        (0..n).into_par_iter().map(|k| scenario.label_pair(k)).collect()
    } else {
        (0..n).map(|k| scenario.label_pair(k)).collect()
    };

    let nf = scenario.faults.len();
    let mut kept = Vec::with_capacity(n);
    let mut dropped = Vec::new();
    for (k, res) in results.into_iter().enumerate() {
        let (ci, fi) = (k / nf, k % nf);
        match res {
            Ok(v) => kept.push((ci, fi, v)),
            Err(error) => dropped.push(DroppedRecord { condition_id: scenario.conditions[ci].id, fault_id: fi, error }),
        }
    }

    let in_dist: Vec<usize> =
        (0..kept.len()).filter(|&i| !scenario.is_generalization(&scenario.conditions[kept[i].0])).collect();
    let cuts = assign_splits(in_dist.len(), scenario.config.split_ratios, scenario.config.split_seed);
    let mut splits = vec![Split::Generalization; kept.len()];
    for (j, &i) in in_dist.iter().enumerate() {
        splits[i] = cuts[j];
    }

    let records: Vec<LabeledRecord> = kept
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(record_id, ((ci, fi, (input, fault, label)), split))| {
            let cond = &scenario.conditions[ci];
            LabeledRecord {
                record_id,
                condition_id: cond.id,
                fault_id: scenario.faults[fi].id,
                grid_id: cond.grid_id,
                split,
                penetration: cond.renewable_penetration,
                fault,
                input,
                label,
                provenance: Provenance::Oracle,
            }
        })
        .collect();

    let mut counts = BTreeMap::new();
    counts.insert("records".to_string(), records.len());
    counts.insert("dropped".to_string(), dropped.len());
    counts.insert("conditions".to_string(), scenario.conditions.len());
    counts.insert("faults".to_string(), scenario.faults.len());
    for s in [Split::Train, Split::Val, Split::Test, Split::Generalization] {
        counts.insert(s.as_str().to_string(), records.iter().filter(|r| r.split == s).count());
    }
    let csv = records_to_csv(&records, scenario.grid.len())?;
    let manifest = Manifest {
        record_schema_version: RECORD_SCHEMA_VERSION,
        generator_version: env!("CARGO_PKG_VERSION").to_string(),
        config: scenario.config.clone(),
        counts,
        dropped,
        files: vec![
            "manifest.json".into(),
            "grid_0.json".into(),
            "adjacency_0.csv".into(),
            "conditions.json".into(),
            "faults.json".into(),
            "records.csv".into(),
        ],
        records_sha256: sha256_hex(csv.as_bytes()),
    };
    Ok(LabeledDataset {
        manifest,
        grid: scenario.grid.spec().clone(),
        adjacency: scenario.adjacency.clone(),
        conditions: scenario.conditions.clone(),
        faults: scenario.faults.clone(),
        records,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn record_header(n_nodes: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "record_id",
        "condition_id",
        "fault_id",
        "grid_id",
        "split",
        "provenance",
        "fault_kind",
        "fault_location",
        "delta_p",
        "penetration",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(GLOBAL_FEATURE_NAMES.iter().map(|s| format!("g_{s}")));
    h.push("ctx_h_syn".into());
    h.push("ctx_d_eq_syn".into());
    h.push("ctx_f_n".into());
    h.extend(OUTPUT_NAMES.iter().map(|s| s.to_string()));
    for i in 0..n_nodes {
        for name in &NODE_FEATURE_NAMES[..3] {
            h.push(format!("{name}_{i}"));
        }
    }
    h
}

/// Serializes records; fault indicator columns are implied by the location.
pub fn records_to_csv(records: &[LabeledRecord], n_nodes: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(record_header(n_nodes))?;
    for r in records {
        let mut row: Vec<String> = vec![
            r.record_id.to_string(),
            r.condition_id.to_string(),
            r.fault_id.to_string(),
            r.grid_id.to_string(),
            r.split.as_str().into(),
            r.provenance.as_str().into(),
            r.fault.kind.as_str().into(),
            r.fault.location.to_string(),
            r.fault.delta_p.to_string(),
            r.penetration.to_string(),
        ];
        row.extend(r.input.global_features.iter().map(f64::to_string));
        row.extend([r.input.ctx.h_syn, r.input.ctx.d_eq_syn, r.input.ctx.f_n].iter().map(f64::to_string));
        row.extend(r.label.to_array().iter().map(f64::to_string));
        for nf in &r.input.node_features {
            row.extend(nf[..3].iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| DatasetError::Io(e.into_error()))?)
        .map_err(|e| DatasetError::Config(e.to_string()))
}

fn format_err(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn parse_records(text: &str, path: &Path, adjacency: &Arc<AdjacencyMatrix>, grid: &ValidatedGrid) -> Result<Vec<LabeledRecord>> {
    let n_nodes = adjacency.n();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != record_header(n_nodes) {
        return Err(format_err(path, "unexpected header"));
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| format_err(path, format!("row {}: bad {what}", line + 1));
        let num = |i: usize| -> Result<f64> { rec[i].parse::<f64>().map_err(|_| bad(&header[i])) };
        let int = |i: usize| -> Result<usize> { rec[i].parse::<usize>().map_err(|_| bad(&header[i])) };
        let split = Split::parse(&rec[4]).ok_or_else(|| bad("split"))?;
        let provenance = Provenance::parse(&rec[5]).ok_or_else(|| bad("provenance"))?;
        let kind = FaultKind::parse(&rec[6]).ok_or_else(|| bad("fault_kind"))?;
        let location: NodeId = rec[7].parse().map_err(|_| bad("fault_location"))?;
        let delta_p = num(8)?;
        let fault = FaultEvent { location, kind, delta_p, t_apply: 0.0 };
        let fault_idx = grid.index_of(location).ok_or_else(|| bad("fault_location"))?;
        let mut global_features = [0.0; GLOBAL_FEATURES];
        for (j, g) in global_features.iter_mut().enumerate() {
            *g = num(10 + j)?;
        }
        let c = 10 + GLOBAL_FEATURES;
        let ctx = ConstraintContext { h_syn: num(c)?, d_eq_syn: num(c + 1)?, f_n: num(c + 2)? };
        let mut lab = [0.0; 6];
        for (j, v) in lab.iter_mut().enumerate() {
            *v = num(c + 3 + j)?;
        }
        let base = c + 9;
        let mut node_features = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let hit = i == fault_idx;
            node_features.push([
                num(base + 3 * i)?,
                num(base + 3 * i + 1)?,
                num(base + 3 * i + 2)?,
                if hit { 1.0 } else { 0.0 },
                if hit { delta_p } else { 0.0 },
            ]);
        }
        out.push(LabeledRecord {
            record_id: int(0)?,
            condition_id: int(1)?,
            fault_id: int(2)?,
            grid_id: int(3)?,
            split,
            penetration: num(9)?,
            fault,
            input: SampleInput { adjacency: adjacency.clone(), node_features, global_features, ctx },
            label: FrequencyMetrics::from_array(lab),
            provenance,
        });
    }
    Ok(out)
}

impl LabeledDataset {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let csv = records_to_csv(&self.records, self.adjacency.n())?;
        fs::write(dir.join("records.csv"), &csv)?;
        fs::write(dir.join("grid_0.json"), self.grid.to_json())?;
        fs::write(dir.join("adjacency_0.csv"), self.adjacency.to_csv())?;
        fs::write(dir.join("conditions.json"), serde_json::to_string_pretty(&self.conditions)?)?;
        fs::write(dir.join("faults.json"), serde_json::to_string_pretty(&self.faults)?)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.record_schema_version != RECORD_SCHEMA_VERSION {
            return Err(format_err(dir, format!("record schema {} unsupported", manifest.record_schema_version)));
        }
        let grid_spec = GridSpec::load(dir.join("grid_0.json"))?;
        let grid = validate_grid(grid_spec.clone())?;
        let adj_path = dir.join("adjacency_0.csv");
        let adjacency =
            Arc::new(AdjacencyMatrix::from_csv(&fs::read_to_string(&adj_path)?).map_err(|e| format_err(&adj_path, e))?);
        if adjacency.n() != grid.len() {
            return Err(format_err(&adj_path, "size differs from the grid"));
        }
        let conditions = serde_json::from_str(&fs::read_to_string(dir.join("conditions.json"))?)?;
        let faults = serde_json::from_str(&fs::read_to_string(dir.join("faults.json"))?)?;
        let rec_path = dir.join("records.csv");
        let text = fs::read_to_string(&rec_path)?;
        if sha256_hex(text.as_bytes()) != manifest.records_sha256 {
            return Err(format_err(&rec_path, "checksum differs from the manifest"));
        }
        let records = parse_records(&text, &rec_path, &adjacency, &grid)?;
        Ok(Self { manifest, grid: grid_spec, adjacency, conditions, faults, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BenchmarkConfig {
        BenchmarkConfig {
            n_buses: 12,
            n_gen: 5,
            levels: vec![0.4, 0.5],
            conditions_per_level: 1,
            generalization_conditions: 1,
            n_faults: 8,
            sim: SimConfig { dt: 0.02, ..SimConfig::default() },
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn benchmark_grid_is_connected_and_reproducible() {
        let a = generate_benchmark_grid(30, 10, [0.5, 0.2, 0.3], 7).unwrap();
        let b = generate_benchmark_grid(30, 10, [0.5, 0.2, 0.3], 7).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let g = validate_grid(a).unwrap();
        assert_eq!(g.len(), 30);
        assert_eq!(g.generator_indices().len(), 10);
        let count = |k: NodeKind| g.nodes().iter().filter(|n| n.kind == k).count();
        assert_eq!((count(NodeKind::ThermalGen), count(NodeKind::HydroGen), count(NodeKind::RenewableGen)), (5, 2, 3));
        assert!((g.total_load() - 1.0).abs() < 1e-12);
        assert!((g.total_generation() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mix_guards() {
        let g = validate_grid(generate_benchmark_grid(12, 4, [1.0, 0.0, 0.0], 1).unwrap()).unwrap();
        assert!(g.nodes().iter().filter(|n| n.kind.is_generator()).all(|n| n.kind == NodeKind::ThermalGen));
        assert!(matches!(generate_benchmark_grid(10, 10, [0.5, 0.2, 0.3], 1), Err(DatasetError::InfeasibleMix(_))));
        assert!(matches!(generate_benchmark_grid(10, 4, [0.5, 0.2, 0.2], 1), Err(DatasetError::InfeasibleMix(_))));
    }

    #[test]
    fn conditions_are_balanced_and_seed_dependent() {
        let g = validate_grid(generate_benchmark_grid(30, 10, [0.5, 0.2, 0.3], 7).unwrap()).unwrap();
        let a = generate_conditions(&g, 0, &[0.0, 0.5], 3, 1, 0).unwrap();
        let b = generate_conditions(&g, 0, &[0.0, 0.5], 3, 2, 0).unwrap();
        for c in &a {
            let m = c.materialize(&g).unwrap();
            assert!((m.total_generation() - m.total_load()).abs() < 1e-6);
            let renew: f64 =
                m.nodes().iter().filter(|n| n.kind == NodeKind::RenewableGen).map(NodeSpec::p_set).sum();
            assert!((renew - c.renewable_penetration * m.total_load()).abs() < 1e-9);
            if c.renewable_penetration == 0.0 {
                assert_eq!(renew, 0.0);
            }
        }
        assert_ne!(a[4].dispatch, b[4].dispatch);
        assert_eq!(a.iter().map(|c| c.dispatch.len()).collect::<Vec<_>>(), b.iter().map(|c| c.dispatch.len()).collect::<Vec<_>>());
    }

    #[test]
    fn fault_sets() {
        let g = validate_grid(generate_benchmark_grid(30, 10, [0.5, 0.2, 0.3], 7).unwrap()).unwrap();
        let cfg = FaultSetConfig::default();
        let trips = generate_fault_set(&g, &[FaultKind::GeneratorTrip], 10, 3, &cfg).unwrap();
        let mut locs: Vec<_> = trips.iter().map(|f| f.location).collect();
        locs.sort_unstable();
        locs.dedup();
        assert_eq!(locs.len(), 10);
        for f in &trips {
            assert_eq!(f.delta_p, g.node(g.index_of(f.location).unwrap()).p_set());
        }
        let all = [FaultKind::GeneratorTrip, FaultKind::DcBlocking, FaultKind::LoadRejection];
        let a = generate_fault_set(&g, &all, 131, 5, &cfg).unwrap();
        assert_eq!(a, generate_fault_set(&g, &all, 131, 5, &cfg).unwrap());
        assert_eq!(a.len(), 131);
        assert!(a.iter().filter(|f| f.kind == FaultKind::LoadRejection).all(|f| f.delta_p < 0.0));
        assert!(a.iter().all(|f| f.validate(&g).is_ok()));
    }

    #[test]
    fn load_rejection_is_an_over_frequency_event() {
        let g = validate_grid(generate_benchmark_grid(30, 10, [0.5, 0.2, 0.3], 7).unwrap()).unwrap();
        let f = generate_fault_set(&g, &[FaultKind::LoadRejection], 1, 5, &FaultSetConfig::default()).unwrap()[0];
        let m = label(&g, &f, &SimConfig::default()).unwrap();
        assert!(m.f_nadir > g.f_n());
        assert!(m.f_nadir >= m.f_ss && m.f_ss > g.f_n());
    }

    #[test]
    fn split_arithmetic() {
        let s = assign_splits(1000, [0.7, 0.15, 0.15], 4);
        let c = |k| s.iter().filter(|x| **x == k).count();
        assert_eq!((c(Split::Train), c(Split::Val), c(Split::Test)), (700, 150, 150));
    }

    #[test]
    fn labeling_cross_product_splits_and_round_trip() {
        let cfg = small_config();
        let sc = Scenario::build(&cfg).unwrap();
        assert_eq!(sc.conditions.len(), 3);
        let ds = label_dataset(&sc, true).unwrap();
        assert_eq!(ds.records.len() + ds.manifest.dropped.len(), 24);
        for r in &ds.records {
            let is_gen = (r.penetration - 0.6).abs() < 1e-12;
            assert_eq!(r.split == Split::Generalization, is_gen);
            let hit: Vec<usize> =
                r.input.node_features.iter().enumerate().filter(|(_, f)| f[3] == 1.0).map(|(i, _)| i).collect();
            assert_eq!(hit, vec![sc.grid.index_of(r.fault.location).unwrap()]);
            assert_eq!(r.input.global_features[8], r.fault.delta_p);
            if r.fault.delta_p > 0.0 {
                let f_n = ds.f_n();
                assert!(r.label.f_nadir <= r.label.f_ss && r.label.f_ss <= f_n && r.label.t_nadir > 0.0);
            }
        }
        let serial = label_dataset(&sc, false).unwrap();
        assert_eq!(serial.manifest, ds.manifest);

        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = LabeledDataset::read(dir.path()).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.conditions, ds.conditions);
    }
}
