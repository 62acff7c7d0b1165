//! Multi-machine post-fault frequency simulator and indicator extraction.
//!
//! Each synchronous unit integrates the swing equation in Hz with its own
//! governor (reheat thermal or hydro). Machines are coupled through a DC
//! power-flow network Kron-reduced to their internal nodes; disturbances,
//! load damping and emulated inertia enter as bus injections and are
//! distributed through the reduced network. Integration is fixed-step RK4.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FaultEvent, GeneratorParams, GridError, NodeId, NodeKind, ValidatedGrid};

/// Any machine deviating further than this is treated as a blow-up.
pub const DIVERGENCE_HZ: f64 = 10.0;
/// Horizon below which the quasi-steady window is not trustworthy.
pub const MIN_HORIZON: f64 = 150.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Governor dead zone half-width in Hz.
    pub deadband: f64,
    /// Width in Hz over which the governor input ramps from zero to the full
    /// deviation just outside the dead zone. Zero gives a hard step.
    pub deadband_ramp: f64,
    /// Per-unit bound on each governor's output deviation.
    pub governor_limit: f64,
    pub rocof_window: f64,
    pub fss_window: f64,
    pub include_deadband: bool,
    pub include_limits: bool,
    pub include_load_damping: bool,
    /// Load-frequency sensitivity k_L: ΔP_load = k_L·P_load·Δf/f_N.
    pub load_damping: f64,
    /// Susceptance between each machine's internal node and its terminal bus.
    pub internal_susceptance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            horizon: 150.0,
            deadband: 0.05,
            deadband_ramp: 0.01,
            governor_limit: 0.05,
            rocof_window: 0.1,
            fss_window: 10.0,
            include_deadband: true,
            include_limits: true,
            include_load_damping: true,
            load_damping: 1.0,
            internal_susceptance: 0.5,
        }
    }
}

impl SimConfig {
    /// The default configuration with every non-ideal effect switched off,
    /// i.e. the dynamics the aggregated closed form describes.
    pub fn ideal() -> Self {
        Self {
            include_deadband: false,
            include_limits: false,
            include_load_damping: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon >= MIN_HORIZON) {
            return bad(format!("horizon must be at least {MIN_HORIZON} s, got {}", self.horizon));
        }
        if !(self.rocof_window > self.dt) {
            return bad(format!("rocof_window {} must exceed dt {}", self.rocof_window, self.dt));
        }
        if !(self.fss_window >= self.dt && self.fss_window < self.horizon) {
            return bad(format!("fss_window {} must lie in [dt, horizon)", self.fss_window));
        }
        if self.deadband < 0.0 || self.deadband_ramp < 0.0 {
            return bad("deadband and deadband_ramp must be non-negative".into());
        }
        if self.include_limits && !(self.governor_limit > 0.0) {
            return bad("governor_limit must be positive when limits are enabled".into());
        }
        if self.load_damping < 0.0 || !(self.internal_susceptance > 0.0) {
            return bad("load_damping must be >= 0 and internal_susceptance > 0".into());
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    fn samples(&self, window: f64) -> usize {
        ((window / self.dt).round() as usize).max(1)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("numerical divergence at t = {time:.4} s")]
    NumericalDivergence { time: f64 },
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("post-fault grid has no synchronous machine")]
    NoSynchronousMachine,
    #[error("frequency extremum at t = {time:.3} s lies in the last 5% of the horizon")]
    NadirAtHorizon { time: f64 },
}

/// Snapshot of one synchronous machine's state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub id: NodeId,
    pub delta: f64,
    pub dfreq: f64,
    pub governor_states: Vec<f64>,
    /// Mechanical power deviation from the pre-fault set point.
    pub p_m: f64,
    /// Absolute electrical output.
    pub p_e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub f_n: f64,
    pub t_apply: f64,
    pub times: Vec<f64>,
    pub f_coi: Vec<f64>,
    pub machine_ids: Vec<NodeId>,
    pub machine_h: Vec<f64>,
    pub machine_governed: Vec<bool>,
    /// Indexed `[machine][sample]`, Hz deviation from f_N.
    pub per_machine_dfreq: Vec<Vec<f64>>,
    /// Indexed `[machine][sample]`, absolute per-unit electrical output.
    pub per_machine_p_e: Vec<Vec<f64>>,
    pub p_e_initial: Vec<f64>,
    /// Σ over synchronous machines of the electrical output deviation.
    pub syn_power_deviation: Vec<f64>,
    pub final_states: Vec<MachineState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn first_post_fault(&self) -> usize {
        self.times.partition_point(|&t| t < self.t_apply - 1e-9)
    }

    /// Electrical output deviation summed over governor-equipped machines.
    pub fn governed_power_deviation(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (m, p_e) in self.per_machine_p_e.iter().enumerate() {
            if self.machine_governed[m] {
                let p0 = self.p_e_initial[m];
                for (o, p) in out.iter_mut().zip(p_e) {
                    *o += p - p0;
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,f_coi");
        for id in &self.machine_ids {
            write!(out, ",dfreq_{id}").unwrap();
        }
        for id in &self.machine_ids {
            write!(out, ",p_e_{id}").unwrap();
        }
        out.push_str(",syn_dev\n");
        for k in 0..self.len() {
            write!(out, "{},{}", self.times[k], self.f_coi[k]).unwrap();
            for series in self.per_machine_dfreq.iter().chain(&self.per_machine_p_e) {
                write!(out, ",{}", series[k]).unwrap();
            }
            writeln!(out, ",{}", self.syn_power_deviation[k]).unwrap();
        }
        out
    }
}

/// Governor input after the dead zone: zero inside the band, the full
/// deviation beyond `deadband + deadband_ramp`, linear in between.
pub fn deadband_filter(dfreq: f64, cfg: &SimConfig) -> f64 {
    if !cfg.include_deadband {
        return dfreq;
    }
    let excess = dfreq.abs() - cfg.deadband;
    if excess <= 0.0 {
        0.0
    } else if excess >= cfg.deadband_ramp {
        dfreq
    } else {
        dfreq * excess / cfg.deadband_ramp
    }
}

/// One-state governor realisation. `u` is the filtered deviation in per-unit
/// frequency; returns (state derivative, mechanical power deviation).
#[inline]
fn governor_eval(kind: NodeKind, x: f64, u: f64, g: &GeneratorParams, cfg: &SimConfig) -> (f64, f64) {
    if !g.has_governor {
        return (0.0, 0.0);
    }
    let gain = g.k_m / g.r;
    let (dx, pm) = match kind {
        // K(1 + F_H T_R s) / (R(1 + T_R s)) = K/R [F_H + (1 - F_H)/(1 + T_R s)]
        NodeKind::ThermalGen => ((u - x) / g.t_r, -gain * (g.f_h * u + (1.0 - g.f_h) * x)),
        // K(1 - T_w s) / (R(1 + T_w s / 2)) = K/R [-2 + 3/(1 + T_w s / 2)]
        NodeKind::HydroGen => ((u - x) / (0.5 * g.t_w), -gain * (3.0 * x - 2.0 * u)),
        _ => (0.0, 0.0),
    };
    let pm = if cfg.include_limits {
        pm.clamp(-cfg.governor_limit, cfg.governor_limit)
    } else {
        pm
    };
    (dx, pm)
}

/// Time derivatives of a machine's governor states and its current
/// mechanical power deviation (per-unit) for a deviation `dfreq_in` in Hz.
/// `dfreq_in` is taken as already filtered by the dead zone.
pub fn governor_derivatives(
    kind: NodeKind,
    states: &[f64],
    dfreq_in: f64,
    params: &GeneratorParams,
    cfg: &SimConfig,
    f_n: f64,
) -> (Vec<f64>, f64) {
    let mut derivs = vec![0.0; states.len()];
    let x = states.first().copied().unwrap_or(0.0);
    let (dx, pm) = governor_eval(kind, x, dfreq_in / f_n, params, cfg);
    if let Some(d) = derivs.first_mut() {
        *d = dx;
    }
    (derivs, pm)
}

struct Machine {
    id: NodeId,
    kind: NodeKind,
    params: GeneratorParams,
}

/// Linearised network seen from the machines' internal nodes.
struct Network {
    machines: Vec<Machine>,
    /// Reduced synchronising matrix, row-major n_s × n_s.
    b_red: Vec<f64>,
    /// Reduced-network share of a unit injection at the fault bus.
    m_fault: Vec<f64>,
    m_load: Vec<f64>,
    m_vir: Vec<f64>,
    h_syn: f64,
    h_vir: f64,
    p_load: f64,
    f_n: f64,
}

impl Network {
    fn build(grid: &ValidatedGrid, fault_bus: usize, cfg: &SimConfig) -> Result<Self, SimError> {
        let n = grid.len();
        let sync = grid.synchronous_indices();
        let ns = sync.len();
        if ns == 0 {
            return Err(SimError::NoSynchronousMachine);
        }
        let mut b_ll = DMatrix::<f64>::zeros(n, n);
        for e in &grid.spec().edges {
            let i = grid.index_of(e.0).expect("validated endpoint");
            let j = grid.index_of(e.1).expect("validated endpoint");
            b_ll[(i, i)] += e.2;
            b_ll[(j, j)] += e.2;
            b_ll[(i, j)] -= e.2;
            b_ll[(j, i)] -= e.2;
        }
        let b_int = cfg.internal_susceptance;
        let mut b_lg = DMatrix::<f64>::zeros(n, ns);
        for (m, &bus) in sync.iter().enumerate() {
            b_ll[(bus, bus)] += b_int;
            b_lg[(bus, m)] = -b_int;
        }
        let x = b_ll
            .lu()
            .solve(&b_lg)
            .ok_or_else(|| SimError::Config("singular network matrix".into()))?;
        // M = B_gl B_ll⁻¹ = Xᵀ; B_red = B_gg − B_gl X.
        let b_gl = b_lg.transpose();
        let b_red_m = DMatrix::<f64>::identity(ns, ns) * b_int - &b_gl * &x;
        let m = x.transpose();

        let mut load = nalgebra::DVector::<f64>::zeros(n);
        let mut vir = nalgebra::DVector::<f64>::zeros(n);
        for (k, node) in grid.nodes().iter().enumerate() {
            load[k] = node.p_load();
            if node.kind == NodeKind::RenewableGen {
                vir[k] = node.gen_params.as_ref().map_or(0.0, |g| g.h_vir);
            }
        }
        let m_load = &m * &load;
        let m_vir = &m * &vir;
        let machines = sync
            .iter()
            .map(|&i| {
                let node = grid.node(i);
                Machine {
                    id: node.id,
                    kind: node.kind,
                    params: node.gen_params.clone().expect("validated generator"),
                }
            })
            .collect();
        let mut b_red = Vec::with_capacity(ns * ns);
        for r in 0..ns {
            for c in 0..ns {
                b_red.push(b_red_m[(r, c)]);
            }
        }
        Ok(Self {
            machines,
            b_red,
            m_fault: m.column(fault_bus).iter().copied().collect(),
            m_load: m_load.iter().copied().collect(),
            m_vir: m_vir.iter().copied().collect(),
            h_syn: grid.h_syn_total(),
            h_vir: vir.sum(),
            p_load: load.sum(),
            f_n: grid.f_n(),
        })
    }

    fn ns(&self) -> usize {
        self.machines.len()
    }

    /// State layout: [δ (ns), Δf in Hz (ns), governor state (ns)].
    /// Writes derivatives into `dy`, electrical deviations into `pe` and
    /// mechanical deviations into `pm`; returns Δf_COI.
    #[allow(clippy::too_many_arguments)]
    fn rhs(
        &self,
        y: &[f64],
        delta_p: f64,
        cfg: &SimConfig,
        dy: &mut [f64],
        pe: &mut [f64],
        pm: &mut [f64],
    ) -> f64 {
        let ns = self.ns();
        let f_n = self.f_n;
        let (delta, rest) = y.split_at(ns);
        let (dfreq, gov) = rest.split_at(ns);

        let mut coi = 0.0;
        let mut sum_pm = 0.0;
        let mut sum_damp = 0.0;
        for (i, m) in self.machines.iter().enumerate() {
            coi += m.params.h * dfreq[i];
            let u = deadband_filter(dfreq[i], cfg) / f_n;
            let (dx, p) = governor_eval(m.kind, gov[i], u, &m.params, cfg);
            dy[2 * ns + i] = dx;
            pm[i] = p;
            sum_pm += p;
            sum_damp += m.params.d * dfreq[i] / f_n;
        }
        coi /= self.h_syn;

        let relief = if cfg.include_load_damping {
            cfg.load_damping * coi / f_n
        } else {
            0.0
        };
        let s = sum_pm - delta_p - relief * self.p_load - sum_damp;
        let a_coi = s * f_n / (2.0 * (self.h_syn + self.h_vir));
        let vir = 2.0 * a_coi / f_n;

        for (i, m) in self.machines.iter().enumerate() {
            let row = &self.b_red[i * ns..(i + 1) * ns];
            let sync: f64 = row.iter().zip(delta).map(|(b, d)| b * d).sum();
            let p = sync - delta_p * self.m_fault[i] - relief * self.m_load[i] - vir * self.m_vir[i];
            pe[i] = p;
            dy[i] = 2.0 * PI * dfreq[i];
            dy[ns + i] = f_n / (2.0 * m.params.h) * (pm[i] - p - m.params.d * dfreq[i] / f_n);
        }
        coi
    }
}

/// Integrates the post-fault response of `grid` to `fault`.
///
/// A generator trip removes the unit (its node becomes a junction) before
/// the network is built; `delta_p` is always applied as a step injection of
/// `-delta_p` at the fault bus from `t_apply` on.
pub fn simulate(grid: &ValidatedGrid, fault: &FaultEvent, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    let fault_bus = fault.check_location(grid)?;
    if fault.t_apply >= cfg.horizon {
        return Err(SimError::Config(format!(
            "t_apply {} is beyond the horizon {}",
            fault.t_apply, cfg.horizon
        )));
    }
    let post = grid.post_fault(fault);
    let net = Network::build(&post, fault_bus, cfg)?;
    let ns = net.ns();
    let steps = cfg.steps();
    let dt = cfg.dt;
    let f_n = net.f_n;

    let mut times = Vec::with_capacity(steps + 1);
    let mut f_coi = Vec::with_capacity(steps + 1);
    let mut dfreq_series = vec![Vec::with_capacity(steps + 1); ns];
    let mut pe_series = vec![Vec::with_capacity(steps + 1); ns];
    let mut syn_dev = Vec::with_capacity(steps + 1);
    let p_e_initial: Vec<f64> = net.machines.iter().map(|m| m.params.p_set).collect();

    let dp_at = |t: f64| if t >= fault.t_apply { fault.delta_p } else { 0.0 };

    let mut y = vec![0.0; 3 * ns];
    let mut tmp = vec![0.0; 3 * ns];
    let mut k = [vec![0.0; 3 * ns], vec![0.0; 3 * ns], vec![0.0; 3 * ns], vec![0.0; 3 * ns]];
    let mut pe = vec![0.0; ns];
    let mut pm = vec![0.0; ns];
    let mut scratch_pe = vec![0.0; ns];
    let mut scratch_pm = vec![0.0; ns];

    for step in 0..=steps {
        let t = step as f64 * dt;
        let coi = net.rhs(&y, dp_at(t), cfg, &mut k[0], &mut pe, &mut pm);
        times.push(t);
        f_coi.push(f_n + coi);
        let mut total = 0.0;
        for i in 0..ns {
            dfreq_series[i].push(y[ns + i]);
            pe_series[i].push(p_e_initial[i] + pe[i]);
            total += pe[i];
        }
        syn_dev.push(total);
        if step == steps {
            break;
        }

        let [k1, k2, k3, k4] = &mut k;
        for (j, v) in tmp.iter_mut().enumerate() {
            *v = y[j] + 0.5 * dt * k1[j];
        }
        net.rhs(&tmp, dp_at(t + 0.5 * dt), cfg, k2, &mut scratch_pe, &mut scratch_pm);
        for (j, v) in tmp.iter_mut().enumerate() {
            *v = y[j] + 0.5 * dt * k2[j];
        }
        net.rhs(&tmp, dp_at(t + 0.5 * dt), cfg, k3, &mut scratch_pe, &mut scratch_pm);
        for (j, v) in tmp.iter_mut().enumerate() {
            *v = y[j] + dt * k3[j];
        }
        net.rhs(&tmp, dp_at(t + dt), cfg, k4, &mut scratch_pe, &mut scratch_pm);
        for j in 0..3 * ns {
            y[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if y[ns..2 * ns].iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_HZ) {
            return Err(SimError::NumericalDivergence { time: t + dt });
        }
    }

    let final_states = net
        .machines
        .iter()
        .enumerate()
        .map(|(i, m)| MachineState {
            id: m.id,
            delta: y[i],
            dfreq: y[ns + i],
            governor_states: vec![y[2 * ns + i]],
            p_m: pm[i],
            p_e: p_e_initial[i] + pe[i],
        })
        .collect();

    Ok(Trajectory {
        f_n,
        t_apply: fault.t_apply,
        times,
        f_coi,
        machine_ids: net.machines.iter().map(|m| m.id).collect(),
        machine_h: net.machines.iter().map(|m| m.params.h).collect(),
        machine_governed: net.machines.iter().map(|m| m.params.has_governor).collect(),
        per_machine_dfreq: dfreq_series,
        per_machine_p_e: pe_series,
        p_e_initial,
        syn_power_deviation: syn_dev,
        final_states,
    })
}

/// Where a label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    Knowledge,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Knowledge => "knowledge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "oracle" => Some(Self::Oracle),
            "knowledge" => Some(Self::Knowledge),
            _ => None,
        }
    }
}

/// The six frequency-security indicators, in fixed output order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyMetrics {
    /// Signed extremal windowed slope of f_COI, Hz/s.
    pub rocof_max: f64,
    /// Extremal post-fault f_COI, Hz (a zenith for surplus events).
    pub f_nadir: f64,
    /// Seconds after the fault at which the extremum occurs.
    pub t_nadir: f64,
    pub f_ss: f64,
    pub dp0_syn: f64,
    pub dpinf_syn: f64,
}

pub const OUTPUT_NAMES: [&str; 6] = ["rocof_max", "f_nadir", "t_nadir", "f_ss", "dp0_syn", "dpinf_syn"];

impl FrequencyMetrics {
    pub fn to_array(&self) -> [f64; 6] {
        [self.rocof_max, self.f_nadir, self.t_nadir, self.f_ss, self.dp0_syn, self.dpinf_syn]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            rocof_max: v[0],
            f_nadir: v[1],
            t_nadir: v[2],
            f_ss: v[3],
            dp0_syn: v[4],
            dpinf_syn: v[5],
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::from_array([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    /// Undisturbed system: zero rates and powers, nominal frequencies.
    pub fn nominal(f_n: f64) -> Self {
        Self::from_array([0.0, f_n, 0.0, f_n, 0.0, 0.0])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Index of the window start and signed slope with the largest magnitude.
fn max_slope(series: &[f64], first: usize, w: usize, dt: f64) -> (usize, f64) {
    let mut best = (first, 0.0f64);
    for k in first..series.len().saturating_sub(w) {
        let slope = (series[k + w] - series[k]) / (w as f64 * dt);
        if slope.abs() > best.1.abs() {
            best = (k, slope);
        }
    }
    best
}

fn at_window_mid(series: &[f64], start: usize, w: usize) -> f64 {
    if w % 2 == 0 {
        series[start + w / 2]
    } else {
        0.5 * (series[start + w / 2] + series[start + w / 2 + 1])
    }
}

pub(crate) fn windowed_rocof(series: &[f64], first: usize, cfg: &SimConfig) -> (usize, usize, f64) {
    let w = cfg.samples(cfg.rocof_window);
    let (k, slope) = max_slope(series, first, w, cfg.dt);
    (k, w, slope)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Extracts the six indicators from an oracle trajectory.
pub fn extract_metrics(traj: &Trajectory, cfg: &SimConfig, grid: &ValidatedGrid) -> Result<FrequencyMetrics, SimError> {
    if traj.is_empty() {
        return Err(SimError::Config("empty trajectory".into()));
    }
    if (traj.f_n - grid.f_n()).abs() > 1e-12 {
        return Err(SimError::Config("trajectory and grid disagree on f_N".into()));
    }
    let dt = cfg.dt;
    let f_n = traj.f_n;
    let n = traj.len();
    let first = traj.first_post_fault();
    let dev: Vec<f64> = traj.f_coi.iter().map(|f| f - f_n).collect();

    let (k, w, rocof) = windowed_rocof(&traj.f_coi, first, cfg);
    let dp0 = if rocof == 0.0 { 0.0 } else { at_window_mid(&traj.syn_power_deviation, k, w) };

    let tail = cfg.samples(cfg.fss_window).min(n);
    let f_ss = f_n + mean(&dev[n - tail..]);
    let dpinf = mean(&traj.governed_power_deviation()[n - tail..]);

    let (mut kn, mut peak) = (first, 0.0f64);
    for (j, d) in dev.iter().enumerate().skip(first) {
        if d.abs() > peak.abs() {
            kn = j;
            peak = *d;
        }
    }
    let (f_nadir, t_nadir) = if peak == 0.0 {
        (f_n, 0.0)
    } else if (kn as f64) >= 0.95 * (n - 1) as f64 {
        let settled = (peak - (f_ss - f_n)).abs() <= 1e-3 * peak.abs();
        if !settled {
            return Err(SimError::NadirAtHorizon { time: traj.times[kn] });
        }
        // Monotone approach: report the time the deviation first comes
        // within 0.1% of its final extremum.
        let target = (1.0 - 1e-3) * peak.abs();
        let j = (first..n).find(|&j| dev[j].abs() >= target).unwrap_or(kn);
        let t = if j > first {
            let (a, b) = (dev[j - 1].abs(), dev[j].abs());
            traj.times[j - 1] + dt * (target - a) / (b - a)
        } else {
            traj.times[j]
        };
        (f_n + peak, t - traj.t_apply)
    } else if kn > first && kn + 1 < n {
        let (a, b, c) = (dev[kn - 1], dev[kn], dev[kn + 1]);
        let curv = a - 2.0 * b + c;
        let off = if curv != 0.0 { (0.5 * (a - c) / curv).clamp(-0.5, 0.5) } else { 0.0 };
        let value = b - 0.25 * (a - c) * off;
        (f_n + value, traj.times[kn] + off * dt - traj.t_apply)
    } else {
        (f_n + peak, traj.times[kn] - traj.t_apply)
    };

    Ok(FrequencyMetrics {
        rocof_max: rocof,
        f_nadir,
        t_nadir,
        f_ss,
        dp0_syn: dp0,
        dpinf_syn: dpinf,
    })
}

/// Simulates one contingency and extracts its indicators.
pub fn label(grid: &ValidatedGrid, fault: &FaultEvent, cfg: &SimConfig) -> Result<FrequencyMetrics, SimError> {
    let traj = simulate(grid, fault, cfg)?;
    extract_metrics(&traj, cfg, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::*;
    use crate::grid::{coi_frequency, validate_grid, Edge, FaultKind, GridSpec};

    fn single(h: f64, d: f64, governed: bool) -> ValidatedGrid {
        let mut spec = chain();
        let g = spec.nodes[0].gen_params.as_mut().unwrap();
        g.h = h;
        g.d = d;
        g.has_governor = governed;
        validate_grid(spec).unwrap()
    }

    fn deficit(dp: f64) -> FaultEvent {
        FaultEvent { location: 2, kind: FaultKind::DcBlocking, delta_p: dp, t_apply: 0.0 }
    }

    #[test]
    fn balanced_system_stays_at_nominal() {
        let grid = single(5.0, 1.0, true);
        let cfg = SimConfig::default();
        let traj = simulate(&grid, &deficit(0.0), &cfg).unwrap();
        assert!(traj.f_coi.iter().all(|&f| f == 50.0));
        let m = extract_metrics(&traj, &cfg, &grid).unwrap();
        assert_eq!(m, FrequencyMetrics::nominal(50.0));
    }

    #[test]
    fn governor_free_machine_follows_first_order_response() {
        let (h, d, dp, f_n) = (4.0, 2.0, 0.05, 50.0);
        let grid = single(h, d, false);
        let cfg = SimConfig::ideal();
        let traj = simulate(&grid, &deficit(dp), &cfg).unwrap();
        let tau = 2.0 * h / d;
        for (t, f) in traj.times.iter().zip(&traj.f_coi).step_by(997) {
            let exact = -dp * f_n / d * (1.0 - (-t / tau).exp());
            assert!((f - f_n - exact).abs() <= 1e-3 * (dp * f_n / d), "t={t}");
        }
        let m = extract_metrics(&traj, &cfg, &grid).unwrap();
        let expected = f_n - dp * f_n / d;
        assert!(((m.f_ss - f_n) - (expected - f_n)).abs() < 1e-3 * (dp * f_n / d));
    }

    #[test]
    fn single_reheat_machine_matches_aggregate_closed_form() {
        let grid = single(5.0, 1.0, true);
        let cfg = SimConfig::ideal();
        let m = label(&grid, &deficit(0.1), &cfg).unwrap();
        let agg = crate::asfr::aggregate_params(&grid).unwrap();
        let k = crate::asfr::asfr_predict(&agg, 0.1, 50.0).unwrap();
        assert!((m.t_nadir - k.t_nadir).abs() < 0.01 * k.t_nadir);
        assert!(((50.0 - m.f_nadir) - (50.0 - k.f_nadir)).abs() < 0.01 * (50.0 - k.f_nadir));
        let dss = (50.0 - m.f_ss) / 50.0;
        assert!((m.dpinf_syn - 21.0 * dss).abs() < 0.01 * m.dpinf_syn);
    }

    #[test]
    fn thermal_governor_final_value() {
        let g = thermal(5.0, 1.0, 0.05, 8.0, 0.3, 0.5);
        let cfg = SimConfig::ideal();
        let (f_n, df) = (50.0, -0.2);
        let (dx, pm) = governor_derivatives(NodeKind::ThermalGen, &[0.0], 0.0, &g, &cfg, f_n);
        assert_eq!((dx, pm), (vec![0.0], 0.0));
        // Settled state equals the input.
        let u = df / f_n;
        let (dx, pm) = governor_derivatives(NodeKind::ThermalGen, &[u], df, &g, &cfg, f_n);
        assert!(dx[0].abs() < 1e-15);
        assert!((pm - (-g.k_m * df / (g.r * f_n))).abs() < 1e-12);
    }

    #[test]
    fn hydro_governor_has_inverse_initial_response() {
        let mut g = thermal(5.0, 1.0, 0.05, 0.0, 0.0, 0.5);
        g.t_w = 2.0;
        let cfg = SimConfig::ideal();
        let df = -0.2;
        let (_, initial) = governor_derivatives(NodeKind::HydroGen, &[0.0], df, &g, &cfg, 50.0);
        let (_, settled) = governor_derivatives(NodeKind::HydroGen, &[df / 50.0], df, &g, &cfg, 50.0);
        assert!(initial < 0.0 && settled > 0.0);
        assert!((settled - g.k_m * 0.2 / (g.r * 50.0)).abs() < 1e-12);
    }

    #[test]
    fn governor_output_is_clamped() {
        let g = thermal(5.0, 1.0, 0.05, 8.0, 0.3, 0.5);
        let cfg = SimConfig::default();
        let (_, pm) = governor_derivatives(NodeKind::ThermalGen, &[-0.05], -1.0, &g, &cfg, 50.0);
        assert_eq!(pm, cfg.governor_limit);
    }

    #[test]
    fn deadband_filter_shape() {
        let cfg = SimConfig::default();
        assert_eq!(deadband_filter(0.04, &cfg), 0.0);
        assert_eq!(deadband_filter(-0.2, &cfg), -0.2);
        assert!((deadband_filter(0.055, &cfg) - 0.0275).abs() < 1e-12);
    }

    fn two_machine() -> ValidatedGrid {
        let mut h2 = thermal(3.0, 0.5, 0.1, 7.0, 0.25, 0.3);
        h2.t_w = 0.0;
        let spec = GridSpec {
            version: 1,
            f_n: 50.0,
            s_base: 100.0,
            nodes: vec![
                gen_node(0, NodeKind::ThermalGen, thermal(4.0, 1.0, 0.05, 8.0, 0.3, 0.4)),
                gen_node(1, NodeKind::ThermalGen, h2),
                load_node(2, 0.7),
                junction(3),
            ],
            edges: vec![Edge(0, 3, 4.0), Edge(1, 3, 6.0), Edge(3, 2, 8.0)],
        };
        validate_grid(spec).unwrap()
    }

    #[test]
    fn stored_coi_matches_machine_deviations() {
        let grid = two_machine();
        let cfg = SimConfig::default();
        let traj = simulate(&grid, &deficit(0.08), &cfg).unwrap();
        for k in (0..traj.len()).step_by(311) {
            let f: Vec<f64> = traj.per_machine_dfreq.iter().map(|s| s[k] + 50.0).collect();
            let coi = coi_frequency(&f, &traj.machine_h).unwrap();
            assert!((coi - traj.f_coi[k]).abs() < 1e-9);
        }
        assert!((traj.f_coi[0] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn kinetic_energy_tracks_the_imbalance() {
        let mut spec = two_machine().spec().clone();
        for n in &mut spec.nodes {
            if let Some(g) = n.gen_params.as_mut() {
                g.has_governor = false;
                g.d = 0.0;
            }
        }
        let grid = validate_grid(spec).unwrap();
        let cfg = SimConfig::ideal();
        let dp = 0.005;
        let traj = simulate(&grid, &deficit(dp), &cfg).unwrap();
        for k in [10usize, 500, 5000, 15000] {
            let t = traj.times[k];
            let energy: f64 = (0..2)
                .map(|m| 2.0 * traj.machine_h[m] * traj.per_machine_dfreq[m][k] / 50.0)
                .sum();
            assert!((energy + dp * t).abs() < 1e-9 * (1.0 + dp * t), "t={t}");
        }
    }

    #[test]
    fn deadband_never_shrinks_the_excursion() {
        let grid = two_machine();
        let with = SimConfig { include_limits: false, include_load_damping: false, ..SimConfig::default() };
        let without = SimConfig { include_deadband: false, ..with.clone() };
        for dp in [0.02, 0.05, 0.1] {
            let a = label(&grid, &deficit(dp), &with).unwrap();
            let b = label(&grid, &deficit(dp), &without).unwrap();
            assert!(50.0 - a.f_nadir >= 50.0 - b.f_nadir - 1e-12);
        }
    }

    #[test]
    fn surplus_produces_a_zenith() {
        let grid = two_machine();
        let cfg = SimConfig::default();
        let m = label(&grid, &deficit(-0.06), &cfg).unwrap();
        assert!(m.rocof_max > 0.0);
        assert!(m.f_nadir > m.f_ss && m.f_ss > 50.0);
        assert!(m.t_nadir > 0.0);
        assert!(m.dp0_syn < 0.0 && m.dpinf_syn < 0.0);
    }

    #[test]
    fn generator_trip_removes_the_unit() {
        let grid = two_machine();
        let trip = FaultEvent { location: 1, kind: FaultKind::GeneratorTrip, delta_p: 0.3, t_apply: 0.0 };
        let traj = simulate(&grid, &trip, &SimConfig::default()).unwrap();
        assert_eq!(traj.machine_ids, vec![0]);
        let m = extract_metrics(&traj, &SimConfig::default(), &grid).unwrap();
        assert!(m.f_nadir < m.f_ss && m.f_ss < 50.0);
    }

    #[test]
    fn config_errors() {
        let grid = single(5.0, 1.0, true);
        let short = SimConfig { horizon: 20.0, ..SimConfig::default() };
        assert!(matches!(simulate(&grid, &deficit(0.1), &short), Err(SimError::Config(_))));
        let window = SimConfig { rocof_window: 0.005, ..SimConfig::default() };
        assert!(matches!(simulate(&grid, &deficit(0.1), &window), Err(SimError::Config(_))));
        let late = FaultEvent { t_apply: 200.0, ..deficit(0.1) };
        assert!(simulate(&grid, &late, &SimConfig::default()).is_err());
    }

    #[test]
    fn divergence_is_reported_with_time() {
        let grid = single(0.01, 0.0, false);
        let err = simulate(&grid, &deficit(0.5), &SimConfig::ideal()).unwrap_err();
        match err {
            SimError::NumericalDivergence { time } => assert!(time > 0.0 && time < 1.0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_header_lists_machines() {
        let grid = two_machine();
        let traj = simulate(&grid, &deficit(0.02), &SimConfig::default()).unwrap();
        let csv = traj.to_csv();
        assert!(csv.starts_with("time,f_coi,dfreq_0,dfreq_1,p_e_0,p_e_1,syn_dev\n"));
        assert_eq!(csv.lines().count(), traj.len() + 1);
    }
}
