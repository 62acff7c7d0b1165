//! Grid domain model shared by every other module: topology, per-unit
//! generator and load records, adjacency construction and centre-of-inertia
//! utilities.
//!
//! All powers are per-unit on `s_base`; inertia constants are seconds on the
//! system base (the schema carries no machine rating, so no rebasing happens
//! at validation). A [`ValidatedGrid`] is immutable and cheap to share.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Schema version written into and required from every grid file.
pub const GRID_SCHEMA_VERSION: u32 = 1;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    ThermalGen,
    HydroGen,
    RenewableGen,
    Load,
    Junction,
}

impl NodeKind {
    pub fn is_generator(self) -> bool {
        matches!(self, Self::ThermalGen | Self::HydroGen | Self::RenewableGen)
    }

    /// Thermal and hydro units carry rotating mass; renewables only emulate it.
    pub fn is_synchronous(self) -> bool {
        matches!(self, Self::ThermalGen | Self::HydroGen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Inertia constant H_i in seconds (zero for renewables).
    pub h: f64,
    /// Damping factor D_i, per-unit.
    pub d: f64,
    /// Droop R_i, per-unit.
    pub r: f64,
    /// Mechanical power gain K_mi.
    pub k_m: f64,
    /// High-pressure turbine fraction F_Hi (thermal only).
    #[serde(default)]
    pub f_h: f64,
    /// Reheat time constant T_Ri in seconds (thermal only).
    #[serde(default)]
    pub t_r: f64,
    /// Water hammer constant T_wi in seconds (hydro only).
    #[serde(default)]
    pub t_w: f64,
    /// Emulated inertia in seconds (renewable only).
    #[serde(default)]
    pub h_vir: f64,
    /// Pre-fault output, per-unit.
    pub p_set: f64,
    pub has_governor: bool,
}

impl GeneratorParams {
    /// Regulation strength K_mi / R_i contributed by a governed unit.
    pub fn regulation(&self) -> f64 {
        if self.has_governor {
            self.k_m / self.r
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadParams {
    pub p_load: f64,
    #[serde(default)]
    pub q_load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_params: Option<GeneratorParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_params: Option<LoadParams>,
}

impl NodeSpec {
    pub fn p_load(&self) -> f64 {
        self.load_params.map_or(0.0, |l| l.p_load)
    }

    pub fn p_set(&self) -> f64 {
        self.gen_params.as_ref().map_or(0.0, |g| g.p_set)
    }
}

/// Branch `[from, to, susceptance]`, serialized as a three-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge(pub NodeId, pub NodeId, pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub version: u32,
    #[serde(rename = "f_N")]
    pub f_n: f64,
    pub s_base: f64,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<Edge>,
}

impl GridSpec {
    pub fn from_json(text: &str) -> Result<Self, GridError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// One broken invariant found while validating a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnsupportedVersion(u32),
    EmptyGrid,
    DuplicateNodeId(NodeId),
    MissingGenParams(NodeId),
    UnexpectedGenParams(NodeId),
    UnknownEdgeEndpoint { edge: usize, node: NodeId },
    SelfLoop { edge: usize, node: NodeId },
    NonPositiveParameter { location: String, parameter: &'static str, value: f64 },
    InvalidParameter { location: String, reason: String },
    DisconnectedGraph { components: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnsupportedVersion(v) => write!(f, "unsupported schema version {v}"),
            Self::EmptyGrid => write!(f, "grid has no nodes"),
            Self::DuplicateNodeId(id) => write!(f, "duplicate node id {id}"),
            Self::MissingGenParams(id) => write!(f, "generator node {id} has no gen_params"),
            Self::UnexpectedGenParams(id) => write!(f, "non-generator node {id} carries gen_params"),
            Self::UnknownEdgeEndpoint { edge, node } => {
                write!(f, "edge #{edge} references unknown node {node}")
            }
            Self::SelfLoop { edge, node } => write!(f, "edge #{edge} is a self-loop on node {node}"),
            Self::NonPositiveParameter { location, parameter, value } => {
                write!(f, "{location}: {parameter} = {value} violates its lower bound")
            }
            Self::InvalidParameter { location, reason } => write!(f, "{location}: {reason}"),
            Self::DisconnectedGraph { components } => {
                write!(f, "graph is disconnected ({components} components)")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid validation failed: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("empty generator set")]
    EmptyGeneratorSet,
    #[error("zero total inertia")]
    ZeroTotalInertia,
    #[error("frequency and inertia sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("fault event invalid: {0}")]
    InvalidFault(String),
    #[error("malformed grid json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl GridError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            Self::Invalid(v) => v,
            _ => &[],
        }
    }
}

/// A grid whose invariants have been checked, with derived indices.
#[derive(Debug, Clone)]
pub struct ValidatedGrid {
    spec: GridSpec,
    index: HashMap<NodeId, usize>,
    neighbors: Vec<Vec<usize>>,
    h_syn: f64,
}

impl ValidatedGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn f_n(&self) -> f64 {
        self.spec.f_n
    }

    pub fn s_base(&self) -> f64 {
        self.spec.s_base
    }

    pub fn len(&self) -> usize {
        self.spec.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.spec.nodes
    }

    pub fn node(&self, idx: usize) -> &NodeSpec {
        &self.spec.nodes[idx]
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Sorted neighbour indices of node `idx`.
    pub fn neighbors(&self, idx: usize) -> &[usize] {
        &self.neighbors[idx]
    }

    /// Total synchronous inertia Σ H_i in seconds.
    pub fn h_syn_total(&self) -> f64 {
        self.h_syn
    }

    /// Indices of thermal and hydro units, in node order.
    pub fn synchronous_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.node(i).kind.is_synchronous()).collect()
    }

    pub fn generator_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.node(i).kind.is_generator()).collect()
    }

    pub fn total_load(&self) -> f64 {
        self.nodes().iter().map(NodeSpec::p_load).sum()
    }

    pub fn total_generation(&self) -> f64 {
        self.nodes().iter().map(NodeSpec::p_set).sum()
    }

    /// The grid after `fault` has taken effect. A tripped unit becomes a
    /// junction; every other fault kind leaves the structure unchanged.
    pub fn post_fault(&self, fault: &FaultEvent) -> ValidatedGrid {
        let mut out = self.clone();
        if fault.kind == FaultKind::GeneratorTrip {
            if let Some(idx) = self.index_of(fault.location) {
                let node = &mut out.spec.nodes[idx];
                if let Some(g) = node.gen_params.take() {
                    if node.kind.is_synchronous() {
                        out.h_syn -= g.h;
                    }
                }
                node.kind = NodeKind::Junction;
            }
        }
        out
    }

    /// Rebuilds the grid with replaced node records; topology must match.
    pub fn with_nodes(&self, nodes: Vec<NodeSpec>) -> Result<ValidatedGrid, GridError> {
        let mut spec = self.spec.clone();
        spec.nodes = nodes;
        validate_grid(spec)
    }
}

fn positive(
    out: &mut Vec<Violation>,
    location: &str,
    parameter: &'static str,
    value: f64,
    strict: bool,
) {
    let ok = value.is_finite() && if strict { value > 0.0 } else { value >= 0.0 };
    if !ok {
        out.push(Violation::NonPositiveParameter {
            location: location.to_string(),
            parameter,
            value,
        });
    }
}

fn check_generator(out: &mut Vec<Violation>, node: &NodeSpec, g: &GeneratorParams) {
    let loc = format!("node {}", node.id);
    positive(out, &loc, "h", g.h, node.kind.is_synchronous());
    positive(out, &loc, "d", g.d, false);
    positive(out, &loc, "k_m", g.k_m, false);
    if g.has_governor {
        positive(out, &loc, "r", g.r, true);
    }
    if !(0.0..=1.0).contains(&g.f_h) {
        out.push(Violation::InvalidParameter {
            location: loc.clone(),
            reason: format!("f_h = {} outside [0, 1]", g.f_h),
        });
    }
    if !g.p_set.is_finite() {
        out.push(Violation::InvalidParameter {
            location: loc.clone(),
            reason: "p_set is not finite".into(),
        });
    }
    match node.kind {
        NodeKind::ThermalGen => positive(out, &loc, "t_r", g.t_r, true),
        NodeKind::HydroGen => positive(out, &loc, "t_w", g.t_w, true),
        NodeKind::RenewableGen => {
            positive(out, &loc, "h_vir", g.h_vir, false);
            if g.h != 0.0 {
                out.push(Violation::InvalidParameter {
                    location: loc.clone(),
                    reason: "renewable units carry no synchronous inertia (h must be 0)".into(),
                });
            }
            if g.has_governor {
                out.push(Violation::InvalidParameter {
                    location: loc.clone(),
                    reason: "renewable units have no droop governor".into(),
                });
            }
        }
        _ => {}
    }
    if node.kind != NodeKind::RenewableGen && g.h_vir != 0.0 {
        out.push(Violation::InvalidParameter {
            location: loc,
            reason: "h_vir is only meaningful for renewable units".into(),
        });
    }
}

/// Checks every invariant of `spec`; returns all violations at once.
pub fn validate_grid(spec: GridSpec) -> Result<ValidatedGrid, GridError> {
    let mut violations = Vec::new();
    if spec.version != GRID_SCHEMA_VERSION {
        violations.push(Violation::UnsupportedVersion(spec.version));
    }
    positive(&mut violations, "grid", "f_N", spec.f_n, true);
    positive(&mut violations, "grid", "s_base", spec.s_base, true);
    if spec.nodes.is_empty() {
        violations.push(Violation::EmptyGrid);
    }

    let mut index = HashMap::with_capacity(spec.nodes.len());
    for (i, node) in spec.nodes.iter().enumerate() {
        if index.insert(node.id, i).is_some() {
            violations.push(Violation::DuplicateNodeId(node.id));
        }
        match (&node.gen_params, node.kind.is_generator()) {
            (None, true) => violations.push(Violation::MissingGenParams(node.id)),
            (Some(_), false) => violations.push(Violation::UnexpectedGenParams(node.id)),
            (Some(g), true) => check_generator(&mut violations, node, g),
            (None, false) => {}
        }
        if let Some(l) = node.load_params {
            positive(&mut violations, &format!("node {}", node.id), "p_load", l.p_load, false);
        }
    }

    let n = spec.nodes.len();
    let mut neighbors = vec![Vec::new(); n];
    let mut endpoints_ok = true;
    for (e, edge) in spec.edges.iter().enumerate() {
        let Edge(a, b, sus) = *edge;
        for id in [a, b] {
            if !index.contains_key(&id) {
                violations.push(Violation::UnknownEdgeEndpoint { edge: e, node: id });
                endpoints_ok = false;
            }
        }
        if a == b {
            violations.push(Violation::SelfLoop { edge: e, node: a });
        }
        positive(&mut violations, &format!("edge #{e} ({a}-{b})"), "susceptance", sus, true);
        if let (Some(&i), Some(&j)) = (index.get(&a), index.get(&b)) {
            if i != j {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }

    if endpoints_ok && n > 0 {
        let components = count_components(&neighbors);
        if components > 1 {
            violations.push(Violation::DisconnectedGraph { components });
        }
    }

    if !violations.is_empty() {
        return Err(GridError::Invalid(violations));
    }
    let h_syn = spec
        .nodes
        .iter()
        .filter(|n| n.kind.is_synchronous())
        .filter_map(|n| n.gen_params.as_ref())
        .map(|g| g.h)
        .sum();
    Ok(ValidatedGrid { spec, index, neighbors, h_syn })
}

fn count_components(neighbors: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; neighbors.len()];
    let mut components = 0;
    let mut queue = VecDeque::new();
    for start in 0..neighbors.len() {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for &v in &neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    components
}

/// Dense binary adjacency, row-major, in node order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: Vec<u8>,
}

impl AdjacencyMatrix {
    /// Builds a symmetric adjacency from index pairs; self-pairs are ignored.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut entries = vec![0u8; n * n];
        for &(i, j) in pairs {
            if i != j {
                entries[i * n + j] = 1;
                entries[j * n + i] = 1;
            }
        }
        Self { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row(i).iter().map(|&a| a as usize).sum()
    }

    /// Neighbour lists in ascending index order.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        (0..self.n)
            .map(|i| (0..self.n).filter(|&j| self.get(i, j) == 1).collect())
            .collect()
    }

    /// Returns P A Pᵀ where node `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut entries = vec![0u8; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                entries[perm[i] * self.n + perm[j]] = self.get(i, j);
            }
        }
        Self { n: self.n, entries }
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn trace(&self) -> usize {
        (0..self.n).map(|i| self.get(i, i) as usize).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.n * self.n * 2);
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|a| a.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let rows: Vec<Vec<u8>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<u8>().map_err(|e| e.to_string()))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err("adjacency csv is not square".into());
        }
        let entries: Vec<u8> = rows.into_iter().flatten().collect();
        if entries.iter().any(|&a| a > 1) {
            return Err("adjacency entries must be 0 or 1".into());
        }
        let adj = Self { n, entries };
        if !adj.is_symmetric() || adj.trace() != 0 {
            return Err("adjacency must be symmetric with zero diagonal".into());
        }
        Ok(adj)
    }
}

/// a_ij = 1 iff an edge joins nodes i and j.
pub fn build_adjacency(grid: &ValidatedGrid) -> AdjacencyMatrix {
    let pairs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|i| grid.neighbors(i).iter().map(move |&j| (i, j)))
        .collect();
    AdjacencyMatrix::from_pairs(grid.len(), &pairs)
}

/// Inertia-weighted mean of generator frequencies, Σ H_i f_i / Σ H_i.
pub fn coi_frequency(freqs: &[f64], inertias: &[f64]) -> Result<f64, GridError> {
    if freqs.len() != inertias.len() {
        return Err(GridError::LengthMismatch(freqs.len(), inertias.len()));
    }
    if freqs.is_empty() {
        return Err(GridError::EmptyGeneratorSet);
    }
    let total: f64 = inertias.iter().sum();
    if inertias.iter().any(|&h| h <= 0.0) || total <= 0.0 {
        return Err(GridError::ZeroTotalInertia);
    }
    let weighted: f64 = freqs.iter().zip(inertias).map(|(f, h)| f * h).sum();
    Ok(weighted / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    DcBlocking,
    GeneratorTrip,
    LoadRejection,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DcBlocking => "dc_blocking",
            Self::GeneratorTrip => "generator_trip",
            Self::LoadRejection => "load_rejection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dc_blocking" => Some(Self::DcBlocking),
            "generator_trip" => Some(Self::GeneratorTrip),
            "load_rejection" => Some(Self::LoadRejection),
            _ => None,
        }
    }
}

/// A step power imbalance; `delta_p > 0` is a generation deficit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub location: NodeId,
    pub kind: FaultKind,
    pub delta_p: f64,
    #[serde(default)]
    pub t_apply: f64,
}

impl FaultEvent {
    /// Structural checks: location exists and admits this fault kind.
    pub fn check_location(&self, grid: &ValidatedGrid) -> Result<usize, GridError> {
        let idx = grid
            .index_of(self.location)
            .ok_or_else(|| GridError::InvalidFault(format!("unknown node {}", self.location)))?;
        if self.kind == FaultKind::GeneratorTrip && !grid.node(idx).kind.is_generator() {
            return Err(GridError::InvalidFault(format!(
                "generator_trip at non-generator node {}",
                self.location
            )));
        }
        if !self.delta_p.is_finite() || !self.t_apply.is_finite() || self.t_apply < 0.0 {
            return Err(GridError::InvalidFault("non-finite delta_p or t_apply".into()));
        }
        Ok(idx)
    }

    /// Full invariant check, including a non-zero imbalance.
    pub fn validate(&self, grid: &ValidatedGrid) -> Result<usize, GridError> {
        let idx = self.check_location(grid)?;
        if self.delta_p == 0.0 {
            return Err(GridError::InvalidFault("delta_p must be non-zero".into()));
        }
        Ok(idx)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn thermal(h: f64, d: f64, r: f64, t_r: f64, f_h: f64, p_set: f64) -> GeneratorParams {
        GeneratorParams {
            h,
            d,
            r,
            k_m: 1.0,
            f_h,
            t_r,
            t_w: 0.0,
            h_vir: 0.0,
            p_set,
            has_governor: true,
        }
    }

    pub fn gen_node(id: NodeId, kind: NodeKind, g: GeneratorParams) -> NodeSpec {
        NodeSpec { id, kind, gen_params: Some(g), load_params: None }
    }

    pub fn load_node(id: NodeId, p: f64) -> NodeSpec {
        NodeSpec {
            id,
            kind: NodeKind::Load,
            gen_params: None,
            load_params: Some(LoadParams { p_load: p, q_load: 0.0 }),
        }
    }

    pub fn junction(id: NodeId) -> NodeSpec {
        NodeSpec { id, kind: NodeKind::Junction, gen_params: None, load_params: None }
    }

    pub fn chain() -> GridSpec {
        GridSpec {
            version: 1,
            f_n: 50.0,
            s_base: 1000.0,
            nodes: vec![
                gen_node(0, NodeKind::ThermalGen, thermal(5.0, 1.0, 0.05, 8.0, 0.3, 0.5)),
                junction(1),
                load_node(2, 0.5),
            ],
            edges: vec![Edge(0, 1, 10.0), Edge(1, 2, 10.0)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chain_validates() {
        let g = validate_grid(chain()).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.h_syn_total(), 5.0);
        assert_eq!(g.neighbors(1), &[0, 2]);
    }

    #[test]
    fn zero_susceptance_is_rejected() {
        let mut spec = chain();
        spec.edges[1].2 = 0.0;
        let err = validate_grid(spec).unwrap_err();
        assert!(matches!(
            err.violations(),
            [Violation::NonPositiveParameter { parameter: "susceptance", .. }]
        ));
        assert!(err.to_string().contains("edge #1"));
    }

    #[test]
    fn disjoint_components_are_rejected() {
        let mut spec = chain();
        spec.nodes.push(junction(3));
        spec.nodes.push(load_node(4, 0.1));
        spec.edges = vec![Edge(0, 1, 5.0), Edge(3, 4, 5.0), Edge(1, 2, 1.0)];
        let err = validate_grid(spec).unwrap_err();
        assert_eq!(err.violations(), &[Violation::DisconnectedGraph { components: 2 }]);

        let two_pairs = GridSpec {
            nodes: vec![junction(0), junction(1), junction(2), junction(3)],
            edges: vec![Edge(0, 1, 1.0), Edge(2, 3, 1.0)],
            ..chain()
        };
        assert!(matches!(
            validate_grid(two_pairs).unwrap_err().violations(),
            [Violation::DisconnectedGraph { components: 2 }]
        ));
    }

    #[test]
    fn every_violation_is_reported() {
        let mut spec = chain();
        spec.nodes[1].id = 0;
        spec.nodes[2].kind = NodeKind::HydroGen;
        spec.edges.push(Edge(0, 9, 1.0));
        let err = validate_grid(spec).unwrap_err();
        let v = err.violations();
        assert!(v.contains(&Violation::DuplicateNodeId(0)));
        assert!(v.contains(&Violation::MissingGenParams(2)));
        assert!(v.contains(&Violation::UnknownEdgeEndpoint { edge: 2, node: 9 }));
    }

    #[test]
    fn renewable_must_not_carry_synchronous_inertia() {
        let mut spec = chain();
        let mut g = thermal(1.0, 0.0, 1.0, 0.0, 0.0, 0.1);
        g.has_governor = false;
        spec.nodes[1] = gen_node(1, NodeKind::RenewableGen, g);
        let err = validate_grid(spec).unwrap_err();
        assert!(err.to_string().contains("synchronous inertia"));
    }

    #[test]
    fn json_round_trip_uses_schema_field_names() {
        let spec = chain();
        let text = spec.to_json();
        assert!(text.contains("\"f_N\": 50.0"));
        assert!(text.contains("\"version\": 1"));
        assert!(text.contains("[\n      0,\n      1,\n      10.0\n    ]"));
        assert_eq!(GridSpec::from_json(&text).unwrap(), spec);
    }

    #[test]
    fn adjacency_examples() {
        assert_eq!(AdjacencyMatrix::from_pairs(2, &[(0, 1)]).row(0), &[0, 1]);
        assert_eq!(AdjacencyMatrix::from_pairs(2, &[(0, 1)]).row(1), &[1, 0]);
        let empty = AdjacencyMatrix::from_pairs(3, &[]);
        assert!((0..3).all(|i| empty.row(i).iter().all(|&a| a == 0)));
        let ring = AdjacencyMatrix::from_pairs(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert!((0..4).all(|i| ring.degree(i) == 2));
        let adj = build_adjacency(&validate_grid(chain()).unwrap());
        assert_eq!(adj.to_csv(), "0,1,0\n1,0,1\n0,1,0\n");
        assert_eq!(AdjacencyMatrix::from_csv(&adj.to_csv()).unwrap(), adj);
    }

    #[test]
    fn coi_examples() {
        assert_eq!(coi_frequency(&[50.0, 50.0, 50.0], &[3.0, 5.0, 7.0]).unwrap(), 50.0);
        assert_eq!(coi_frequency(&[49.0, 51.0], &[1.0, 1.0]).unwrap(), 50.0);
        assert_eq!(coi_frequency(&[49.0, 51.0], &[3.0, 1.0]).unwrap(), 49.5);
        assert!(matches!(coi_frequency(&[], &[]), Err(GridError::EmptyGeneratorSet)));
        assert!(matches!(coi_frequency(&[50.0], &[0.0]), Err(GridError::ZeroTotalInertia)));
    }

    #[test]
    fn fault_checks() {
        let g = validate_grid(chain()).unwrap();
        let trip = FaultEvent { location: 2, kind: FaultKind::GeneratorTrip, delta_p: 0.1, t_apply: 0.0 };
        assert!(trip.validate(&g).is_err());
        let missing = FaultEvent { location: 7, ..trip };
        assert!(missing.check_location(&g).is_err());
        let zero = FaultEvent { location: 1, kind: FaultKind::DcBlocking, delta_p: 0.0, t_apply: 0.0 };
        assert!(zero.check_location(&g).is_ok());
        assert!(zero.validate(&g).is_err());
        let trip_gen = FaultEvent { location: 0, ..trip };
        let post = g.post_fault(&trip_gen);
        assert_eq!(post.h_syn_total(), 0.0);
        assert_eq!(post.node(0).kind, NodeKind::Junction);
    }

    fn arb_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, Vec<usize>)> {
        (2usize..9).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec((0..n, 0..n), 0..(n * 2)),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
    }

    proptest! {
        #[test]
        fn adjacency_symmetric_and_permutation_consistent((n, pairs, perm) in arb_graph()) {
            let a = AdjacencyMatrix::from_pairs(n, &pairs);
            prop_assert!(a.is_symmetric());
            prop_assert_eq!(a.trace(), 0);
            let relabeled: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
            prop_assert_eq!(AdjacencyMatrix::from_pairs(n, &relabeled), a.permuted(&perm));
        }

        #[test]
        fn coi_is_bounded_and_scale_invariant(
            fh in proptest::collection::vec((45.0f64..55.0, 0.01f64..20.0), 1..8),
            c in 0.01f64..100.0,
        ) {
            let (f, h): (Vec<f64>, Vec<f64>) = fh.into_iter().unzip();
            let coi = coi_frequency(&f, &h).unwrap();
            let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(coi >= lo - 1e-12 && coi <= hi + 1e-12);
            let scaled: Vec<f64> = h.iter().map(|x| x * c).collect();
            let coi2 = coi_frequency(&f, &scaled).unwrap();
            prop_assert!((coi - coi2).abs() < 1e-9);
        }
    }
}
