//! Day-ahead dispatch of a generic-energy-storage fleet on a radial feeder,
//! built as one conic program and solved under three uncertainty regimes:
//!
//! * M1 — deterministic: every uncertain parameter at its truncated mean.
//! * M2 — exogenous uncertainty: parameter and availability scenarios are
//!   sampled and every scenario's bound rows are enforced (chance constraint
//!   via the scenario approach).
//! * M3 — M2 plus decision-dependent state-of-charge boundaries: the affine
//!   usage/incentive law shifts each scenario's SOC band, coupling bounds to
//!   the schedule through an accumulated-throughput variable.
//!
//! Scenario copies differ only in their right-hand sides, so the builder
//! materializes one worst-case row per (unit, period, side) — provably the
//! same feasible set — and records both the logical and materialized row
//! counts. Network data carries no sampled uncertainty (load and renewable
//! series are deterministic forecasts), hence the per-scenario network
//! copies coincide and a single copy is kept.
//!
//! The continuous relaxation drops the charge/discharge complementarity
//! product; solutions report the worst product so callers can confirm the
//! relaxation was tight. Branch physics uses the DistFlow second-order-cone
//! relaxation; tightness is checked through the reported cone gaps.

mod scenario;
mod solve;

pub use scenario::{required_scenario_count, sample_fleet_scenario, UnitEnvelope};
pub use solve::{
    solve_dispatch, verify_solution, DispatchSolution, ObjectiveBreakdown, SolveDiagnostics,
    VerificationReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridCase, GridError};
use crate::uncertainty::{UncertaintyError, UncertaintySpec};
use crate::unit::{
    transform_to_ges, GesParams, Horizon, PhysicalParams, PriceSchedule, UnitError,
};

/// Hard ceiling for automatic scenario sizing; the certificate search fails
/// rather than build a problem beyond it.
pub const DEFAULT_SCENARIO_CAP: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid {name} = {value}: {reason}")]
    InvalidConfig {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("certificate requires more than the configured cap of {cap} scenarios")]
    ScenarioCountCap { cap: usize },
    #[error("unit {unit_id}: bus {bus} does not exist in case {case}")]
    UnknownBus {
        unit_id: String,
        bus: usize,
        case: String,
    },
    #[error("{what}: expected {expected} periods, found {found}")]
    HorizonMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{what} for period {t}: series row has {found} entries, case has {expected} nodes")]
    SeriesShape {
        what: &'static str,
        t: usize,
        expected: usize,
        found: usize,
    },
    #[error("solver setup failed: {0}")]
    SolverSetup(String),
}

/// Uncertainty regime selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Deterministic dispatch on mean-valued parameters.
    M1,
    /// Exogenous parameter/availability scenarios enforced jointly.
    M2,
    /// M2 plus decision-coupled state-of-charge boundaries.
    M3,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::M1 => write!(f, "M1"),
            Variant::M2 => write!(f, "M2"),
            Variant::M3 => write!(f, "M3"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Variant::M1),
            "m2" => Ok(Variant::M2),
            "m3" => Ok(Variant::M3),
            other => Err(format!("unknown model variant '{other}' (expected m1|m2|m3)")),
        }
    }
}

/// Outcome class of one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveStatus::Optimal => write!(f, "optimal"),
            SolveStatus::Infeasible => write!(f, "infeasible"),
            SolveStatus::NumericalFailure => write!(f, "numerical-failure"),
        }
    }
}

/// How many scenarios to draw for M2/M3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioCount {
    /// Size via the binomial-tail certificate at (alpha, beta_confidence).
    Auto,
    /// Fixed sample size (must be >= 1).
    Fixed(usize),
}

/// Configuration of one chance-constrained solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcoConfig {
    pub variant: Variant,
    /// Admissible violation probability; 1 - alpha is the security level.
    pub alpha: f64,
    /// Certificate confidence parameter for automatic scenario sizing.
    pub beta_confidence: f64,
    pub scenario_count: ScenarioCount,
    /// Ceiling for automatic scenario sizing.
    pub scenario_cap: usize,
    pub master_seed: u64,
    /// Absolute feasibility tolerance used by verification.
    pub feasibility_tol: f64,
    /// Relative second-order-cone gap accepted as "exact".
    pub cone_gap_tol: f64,
}

impl Default for CcoConfig {
    fn default() -> Self {
        CcoConfig {
            variant: Variant::M1,
            alpha: 0.05,
            beta_confidence: 1e-3,
            scenario_count: ScenarioCount::Auto,
            scenario_cap: DEFAULT_SCENARIO_CAP,
            master_seed: 2024,
            feasibility_tol: 1e-6,
            cone_gap_tol: 1e-4,
        }
    }
}

impl CcoConfig {
    pub fn new(variant: Variant) -> Self {
        CcoConfig {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(DispatchError::InvalidConfig {
                name: "alpha",
                value: self.alpha,
                reason: "must lie strictly inside (0, 1)",
            });
        }
        if !(self.beta_confidence > 0.0 && self.beta_confidence < 1.0) {
            return Err(DispatchError::InvalidConfig {
                name: "beta_confidence",
                value: self.beta_confidence,
                reason: "must lie strictly inside (0, 1)",
            });
        }
        if let ScenarioCount::Fixed(n) = self.scenario_count {
            if n == 0 && self.variant != Variant::M1 {
                return Err(DispatchError::InvalidConfig {
                    name: "scenario_count",
                    value: 0.0,
                    reason: "fixed scenario count must be at least 1",
                });
            }
        }
        for (name, value) in [
            ("feasibility_tol", self.feasibility_tol),
            ("cone_gap_tol", self.cone_gap_tol),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(DispatchError::InvalidConfig {
                    name,
                    value,
                    reason: "tolerance must be a positive finite number",
                });
            }
        }
        Ok(())
    }
}

/// One dispatchable resource: physical parameters, grid connection, and its
/// uncertainty description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FleetUnit {
    pub id: String,
    /// Node id in the grid case where the unit connects.
    pub bus: usize,
    pub params: PhysicalParams,
    #[serde(default = "UncertaintySpec::degenerate")]
    pub uncertainty: UncertaintySpec,
}

impl FleetUnit {
    /// Storage-equivalent parameters before any uncertainty is applied.
    pub fn base_ges(&self, horizon: &Horizon) -> Result<GesParams, UnitError> {
        transform_to_ges(&self.params, horizon)
    }
}

/// Index map from model entities to flat decision-variable positions.
///
/// Blocks in order: charge power, discharge power, state of charge (states
/// 1..=T), accumulated normalized throughput (M3 only), curtailed active and
/// reactive load per node, branch active/reactive flow, squared branch
/// current, squared node voltage, substation active and reactive import.
/// Unit powers are in kW; every network quantity is per-unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarLayout {
    pub n_units: usize,
    pub periods: usize,
    pub n_nodes: usize,
    pub n_branches: usize,
    /// Whether the throughput block exists (M3).
    pub has_throughput: bool,
    pub n_vars: usize,
    off_p_ch: usize,
    off_p_dis: usize,
    off_soc: usize,
    off_dcum: usize,
    off_p_curt: usize,
    off_q_curt: usize,
    off_p_flow: usize,
    off_q_flow: usize,
    off_i_sq: usize,
    off_u_sq: usize,
    off_p_grid: usize,
    off_q_grid: usize,
}

impl VarLayout {
    fn new(
        n_units: usize,
        periods: usize,
        n_nodes: usize,
        n_branches: usize,
        has_throughput: bool,
    ) -> Self {
        let ut = n_units * periods;
        let nt = n_nodes * periods;
        let bt = n_branches * periods;
        let off_p_ch = 0;
        let off_p_dis = off_p_ch + ut;
        let off_soc = off_p_dis + ut;
        let off_dcum = off_soc + ut;
        let off_p_curt = off_dcum + if has_throughput { ut } else { 0 };
        let off_q_curt = off_p_curt + nt;
        let off_p_flow = off_q_curt + nt;
        let off_q_flow = off_p_flow + bt;
        let off_i_sq = off_q_flow + bt;
        let off_u_sq = off_i_sq + bt;
        let off_p_grid = off_u_sq + nt;
        let off_q_grid = off_p_grid + periods;
        VarLayout {
            n_units,
            periods,
            n_nodes,
            n_branches,
            has_throughput,
            n_vars: off_q_grid + periods,
            off_p_ch,
            off_p_dis,
            off_soc,
            off_dcum,
            off_p_curt,
            off_q_curt,
            off_p_flow,
            off_q_flow,
            off_i_sq,
            off_u_sq,
            off_p_grid,
            off_q_grid,
        }
    }

    /// Charging power of `unit` in period `t`, kW.
    pub fn p_ch(&self, unit: usize, t: usize) -> usize {
        self.off_p_ch + unit * self.periods + t
    }

    /// Discharging power of `unit` in period `t`, kW.
    pub fn p_dis(&self, unit: usize, t: usize) -> usize {
        self.off_p_dis + unit * self.periods + t
    }

    /// State of charge of `unit` at the end of period `t` (state index
    /// `t + 1`; the initial state is a constant, not a variable).
    pub fn soc_after(&self, unit: usize, t: usize) -> usize {
        self.off_soc + unit * self.periods + t
    }

    /// Accumulated normalized throughput of `unit` before period `t`.
    /// Panics if the layout has no throughput block.
    pub fn d_cum(&self, unit: usize, t: usize) -> usize {
        assert!(self.has_throughput, "layout has no throughput block");
        self.off_dcum + unit * self.periods + t
    }

    /// Curtailed active load at node index `n`, period `t`, p.u.
    pub fn p_curt(&self, n: usize, t: usize) -> usize {
        self.off_p_curt + n * self.periods + t
    }

    /// Curtailed reactive load at node index `n`, period `t`, p.u.
    pub fn q_curt(&self, n: usize, t: usize) -> usize {
        self.off_q_curt + n * self.periods + t
    }

    /// Sending-end active flow on branch `b`, period `t`, p.u.
    pub fn p_flow(&self, b: usize, t: usize) -> usize {
        self.off_p_flow + b * self.periods + t
    }

    /// Sending-end reactive flow on branch `b`, period `t`, p.u.
    pub fn q_flow(&self, b: usize, t: usize) -> usize {
        self.off_q_flow + b * self.periods + t
    }

    /// Squared current on branch `b`, period `t`, p.u.
    pub fn i_sq(&self, b: usize, t: usize) -> usize {
        self.off_i_sq + b * self.periods + t
    }

    /// Squared voltage at node index `n`, period `t`, p.u.
    pub fn u_sq(&self, n: usize, t: usize) -> usize {
        self.off_u_sq + n * self.periods + t
    }

    /// Substation active import, period `t`, p.u.
    pub fn p_grid(&self, t: usize) -> usize {
        self.off_p_grid + t
    }

    /// Substation reactive import, period `t`, p.u.
    pub fn q_grid(&self, t: usize) -> usize {
        self.off_q_grid + t
    }
}

/// Identity of one constraint row, used for diagnostics and binding lists.
/// Units, nodes, and branches are referenced by their position in the fleet
/// and case vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowTag {
    SocDynamics { unit: usize, t: usize },
    SocTerminal { unit: usize },
    UsageInit { unit: usize },
    UsageRecurrence { unit: usize, t: usize },
    ActiveBalance { node: usize, t: usize },
    ReactiveBalance { node: usize, t: usize },
    CurtailmentRatio { node: usize, t: usize },
    SlackVoltage { t: usize },
    VoltageDrop { branch: usize, t: usize },
    ChargeCapLo { unit: usize, t: usize },
    ChargeCapHi { unit: usize, t: usize },
    DischargeCapLo { unit: usize, t: usize },
    DischargeCapHi { unit: usize, t: usize },
    SocLo { unit: usize, t: usize },
    SocHi { unit: usize, t: usize },
    UsageLo { unit: usize, t: usize },
    UsageHi { unit: usize, t: usize },
    SocBoxLo { unit: usize, t: usize },
    SocBoxHi { unit: usize, t: usize },
    RampUp { unit: usize, t: usize },
    RampDown { unit: usize, t: usize },
    CurtailLo { node: usize, t: usize },
    CurtailHi { node: usize, t: usize },
    CurrentLo { branch: usize, t: usize },
    CurrentHi { branch: usize, t: usize },
    VoltageLo { node: usize, t: usize },
    VoltageHi { node: usize, t: usize },
    GridImportLo { t: usize },
    ConeRow { branch: usize, t: usize, component: u8 },
}

impl std::fmt::Display for RowTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        use RowTag::*;
        match *self {
            SocDynamics { unit, t } => write!(f, "soc_dynamics[unit={unit},t={t}]"),
            SocTerminal { unit } => write!(f, "soc_terminal[unit={unit}]"),
            UsageInit { unit } => write!(f, "usage_init[unit={unit}]"),
            UsageRecurrence { unit, t } => write!(f, "usage_recurrence[unit={unit},t={t}]"),
            ActiveBalance { node, t } => write!(f, "active_balance[node={node},t={t}]"),
            ReactiveBalance { node, t } => write!(f, "reactive_balance[node={node},t={t}]"),
            CurtailmentRatio { node, t } => write!(f, "curtailment_ratio[node={node},t={t}]"),
            SlackVoltage { t } => write!(f, "slack_voltage[t={t}]"),
            VoltageDrop { branch, t } => write!(f, "voltage_drop[branch={branch},t={t}]"),
            ChargeCapLo { unit, t } => write!(f, "charge_cap_lo[unit={unit},t={t}]"),
            ChargeCapHi { unit, t } => write!(f, "charge_cap_hi[unit={unit},t={t}]"),
            DischargeCapLo { unit, t } => write!(f, "discharge_cap_lo[unit={unit},t={t}]"),
            DischargeCapHi { unit, t } => write!(f, "discharge_cap_hi[unit={unit},t={t}]"),
            SocLo { unit, t } => write!(f, "soc_lo[unit={unit},t={t}]"),
            SocHi { unit, t } => write!(f, "soc_hi[unit={unit},t={t}]"),
            UsageLo { unit, t } => write!(f, "usage_lo[unit={unit},t={t}]"),
            UsageHi { unit, t } => write!(f, "usage_hi[unit={unit},t={t}]"),
            SocBoxLo { unit, t } => write!(f, "soc_box_lo[unit={unit},t={t}]"),
            SocBoxHi { unit, t } => write!(f, "soc_box_hi[unit={unit},t={t}]"),
            RampUp { unit, t } => write!(f, "ramp_up[unit={unit},t={t}]"),
            RampDown { unit, t } => write!(f, "ramp_down[unit={unit},t={t}]"),
            CurtailLo { node, t } => write!(f, "curtail_lo[node={node},t={t}]"),
            CurtailHi { node, t } => write!(f, "curtail_hi[node={node},t={t}]"),
            CurrentLo { branch, t } => write!(f, "current_lo[branch={branch},t={t}]"),
            CurrentHi { branch, t } => write!(f, "current_hi[branch={branch},t={t}]"),
            VoltageLo { node, t } => write!(f, "voltage_lo[node={node},t={t}]"),
            VoltageHi { node, t } => write!(f, "voltage_hi[node={node},t={t}]"),
            GridImportLo { t } => write!(f, "grid_import_lo[t={t}]"),
            ConeRow {
                branch,
                t,
                component,
            } => write!(f, "cone_row[branch={branch},t={t},k={component}]"),
        }
    }
}

/// Sparse row block in coordinate form, paired with right-hand sides and one
/// tag per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct Block {
    /// (row, column, value) with rows dense in order of insertion.
    pub(crate) entries: Vec<(usize, usize, f64)>,
    pub(crate) rhs: Vec<f64>,
    pub(crate) tags: Vec<RowTag>,
}

impl Block {
    fn push(&mut self, tag: RowTag, terms: &[(usize, f64)], rhs: f64) {
        let row = self.rhs.len();
        for &(col, val) in terms {
            if val != 0.0 {
                self.entries.push((row, col, val));
            }
        }
        self.rhs.push(rhs);
        self.tags.push(tag);
    }

    pub(crate) fn rows(&self) -> usize {
        self.rhs.len()
    }

    /// `A x - b` for this block.
    pub(crate) fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = self.rhs.iter().map(|b| -b).collect();
        for &(row, col, val) in &self.entries {
            r[row] += val * x[col];
        }
        r
    }
}

/// Row bookkeeping. "Logical" counts are what a naive per-scenario expansion
/// would hold; "materialized" counts are the worst-case-per-row equivalents
/// actually stored. Cap rows count the upper bounds of Eqns-style power
/// limits (the zero lower bounds are scenario-independent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowCounts {
    pub variables: usize,
    pub equality_rows: usize,
    pub inequality_rows: usize,
    /// Second-order-cone blocks (one per branch and period, dimension 4).
    pub cone_blocks: usize,
    pub logical_power_cap_rows: u64,
    pub materialized_power_cap_rows: usize,
    /// Fixed SOC band rows (deterministic bounds or exogenous scenario copies).
    pub logical_soc_band_rows: u64,
    pub materialized_soc_band_rows: usize,
    /// Decision-coupled SOC band rows (M3 only).
    pub logical_usage_band_rows: u64,
    pub materialized_usage_band_rows: usize,
}

/// A fully assembled dispatch problem: index map, constraint blocks in
/// solver-ready form, objective, and the data needed to interpret or verify
/// a solution against it.
#[derive(Debug, Clone)]
pub struct ProblemDescription {
    pub variant: Variant,
    pub horizon: Horizon,
    pub config: CcoConfig,
    pub layout: VarLayout,
    pub counts: RowCounts,
    /// Scenarios represented (0 for the deterministic variant).
    pub scenario_count: usize,
    pub case: GridCase,
    pub prices: PriceSchedule,
    pub fleet: Vec<FleetUnit>,
    /// Mean-realization parameters; these drive the dynamics coefficients.
    pub nominal: Vec<GesParams>,
    /// Worst-case-per-row bound envelopes; these drive the bound rows.
    pub envelopes: Vec<UnitEnvelope>,
    pub(crate) eq: Block,
    pub(crate) ineq: Block,
    /// Cone rows, four per (branch, period) block, rhs identically zero.
    pub(crate) cone: Block,
    pub(crate) objective: Vec<f64>,
}

impl ProblemDescription {
    /// One-paragraph human summary for logs.
    pub fn summary(&self) -> String {
        format!(
            "{} problem: {} vars, {} equalities, {} inequalities, {} cone blocks, \
             {} scenarios (bound rows: {} logical -> {} materialized)",
            self.variant,
            self.counts.variables,
            self.counts.equality_rows,
            self.counts.inequality_rows,
            self.counts.cone_blocks,
            self.scenario_count,
            self.counts.logical_power_cap_rows
                + self.counts.logical_soc_band_rows
                + self.counts.logical_usage_band_rows,
            self.counts.materialized_power_cap_rows
                + self.counts.materialized_soc_band_rows
                + self.counts.materialized_usage_band_rows,
        )
    }
}

/// Reactive/active ratio used to tie curtailed reactive load to curtailed
/// active load at one node and period.
fn curtail_ratio(load_p_kw: f64, load_q_kvar: f64) -> f64 {
    if load_p_kw.abs() > 1e-12 {
        load_q_kvar / load_p_kw
    } else {
        0.0
    }
}

/// Assemble the dispatch problem for `cfg.variant`.
///
/// `case` must carry load series matching `horizon`; renewable injection and
/// reactive load series are optional (zero when absent). The fleet may be
/// empty, in which case this reduces to a pure optimal-power-flow problem.
pub fn build_problem(
    case: &GridCase,
    fleet: &[FleetUnit],
    prices: &PriceSchedule,
    horizon: &Horizon,
    cfg: &CcoConfig,
) -> Result<ProblemDescription, DispatchError> {
    cfg.validate()?;
    prices.validate(horizon)?;
    let t_len = horizon.periods;
    let n_nodes = case.nodes.len();
    if case.periods() != t_len {
        return Err(DispatchError::HorizonMismatch {
            what: "case active-load series",
            expected: t_len,
            found: case.periods(),
        });
    }
    for (what, series) in [
        ("case reactive-load series", &case.load_q_kvar),
        ("case renewable series", &case.res_p_kw),
    ] {
        if !series.is_empty() && series.len() != t_len {
            return Err(DispatchError::HorizonMismatch {
                what,
                expected: t_len,
                found: series.len(),
            });
        }
    }
    for (what, series) in [
        ("case active-load series", &case.load_p_kw),
        ("case reactive-load series", &case.load_q_kvar),
        ("case renewable series", &case.res_p_kw),
    ] {
        for (t, row) in series.iter().enumerate() {
            if row.len() != n_nodes {
                return Err(DispatchError::SeriesShape {
                    what,
                    t,
                    expected: n_nodes,
                    found: row.len(),
                });
            }
        }
    }

    // Branch endpoints resolved to node indices once.
    let mut from_idx = Vec::with_capacity(case.branches.len());
    let mut to_idx = Vec::with_capacity(case.branches.len());
    for b in &case.branches {
        let fi = case
            .node_index(b.from)
            .ok_or(GridError::UnknownBranchEndpoint {
                from: b.from,
                to: b.to,
            })?;
        let ti = case
            .node_index(b.to)
            .ok_or(GridError::UnknownBranchEndpoint {
                from: b.from,
                to: b.to,
            })?;
        from_idx.push(fi);
        to_idx.push(ti);
    }
    let sub = case.substation_index();

    // Units connect at declared buses with validated parameters; the mean
    // realization fixes the dynamics coefficients.
    let mut bus_idx = Vec::with_capacity(fleet.len());
    let mut bases = Vec::with_capacity(fleet.len());
    let mut nominal = Vec::with_capacity(fleet.len());
    for unit in fleet {
        let n = case
            .node_index(unit.bus)
            .ok_or_else(|| DispatchError::UnknownBus {
                unit_id: unit.id.clone(),
                bus: unit.bus,
                case: case.name.clone(),
            })?;
        bus_idx.push(n);
        let base = unit.base_ges(horizon)?;
        let mean =
            crate::uncertainty::mean_exu_realization(&unit.uncertainty, &base, horizon)?.params;
        bases.push(base);
        nominal.push(mean);
    }

    let n_units = fleet.len();
    let scenario_count = match cfg.variant {
        Variant::M1 => 0,
        Variant::M2 | Variant::M3 => match cfg.scenario_count {
            ScenarioCount::Fixed(n) => n,
            ScenarioCount::Auto => {
                // Scenario-dependent rows touch only the per-unit power and
                // SOC variables, so the certificate dimension is 3 per unit
                // and period.
                let d = 3 * t_len * n_units;
                scenario::required_scenario_count_capped(
                    cfg.alpha,
                    cfg.beta_confidence,
                    d,
                    cfg.scenario_cap,
                )?
            }
        },
    };

    let envelopes = match cfg.variant {
        Variant::M1 => scenario::mean_envelopes(fleet, &bases, horizon)?,
        Variant::M2 | Variant::M3 => {
            scenario::collapse_scenarios(fleet, &bases, horizon, cfg.master_seed, scenario_count)
        }
    };

    let has_throughput = cfg.variant == Variant::M3;
    let layout = VarLayout::new(n_units, t_len, n_nodes, case.branches.len(), has_throughput);
    let kwb = case.kw_base();
    let dt = horizon.dt_hours;
    let load_p = |n: usize, t: usize| case.load_p_kw[t][n];
    let load_q = |n: usize, t: usize| {
        if case.load_q_kvar.is_empty() {
            0.0
        } else {
            case.load_q_kvar[t][n]
        }
    };
    let res_p = |n: usize, t: usize| {
        if case.res_p_kw.is_empty() {
            0.0
        } else {
            case.res_p_kw[t][n]
        }
    };

    let mut eq = Block::default();

    // Storage dynamics on nominal parameters: one trajectory per unit. The
    // step from t to t+1 nets self-discharge toward the initial state and the
    // ambient pull for that period.
    for (u, p) in nominal.iter().enumerate() {
        let a_ch = p.eta_ch * dt / p.capacity_kwh;
        let a_dis = dt / (p.capacity_kwh * p.eta_dis);
        let keep = 1.0 - p.self_discharge;
        for t in 0..t_len {
            let pull = p.self_discharge * (p.soc_init - p.ambient_bias[t]);
            if t == 0 {
                eq.push(
                    RowTag::SocDynamics { unit: u, t },
                    &[
                        (layout.soc_after(u, 0), 1.0),
                        (layout.p_ch(u, 0), -a_ch),
                        (layout.p_dis(u, 0), a_dis),
                    ],
                    keep * p.soc_init + pull,
                );
            } else {
                eq.push(
                    RowTag::SocDynamics { unit: u, t },
                    &[
                        (layout.soc_after(u, t), 1.0),
                        (layout.soc_after(u, t - 1), -keep),
                        (layout.p_ch(u, t), -a_ch),
                        (layout.p_dis(u, t), a_dis),
                    ],
                    pull,
                );
            }
        }
        eq.push(
            RowTag::SocTerminal { unit: u },
            &[(layout.soc_after(u, t_len - 1), 1.0)],
            p.soc_init,
        );
    }

    // Accumulated normalized throughput for the decision-coupled bounds:
    // d[0] = 0, d[t] = d[t-1] + (P_ch + P_dis)[t-1] * dt / S.
    if has_throughput {
        for (u, p) in nominal.iter().enumerate() {
            let w = dt / p.capacity_kwh;
            eq.push(
                RowTag::UsageInit { unit: u },
                &[(layout.d_cum(u, 0), 1.0)],
                0.0,
            );
            for t in 1..t_len {
                eq.push(
                    RowTag::UsageRecurrence { unit: u, t },
                    &[
                        (layout.d_cum(u, t), 1.0),
                        (layout.d_cum(u, t - 1), -1.0),
                        (layout.p_ch(u, t - 1), -w),
                        (layout.p_dis(u, t - 1), -w),
                    ],
                    0.0,
                );
            }
        }
    }

    // Nodal power balance. Inflows arrive net of the branch loss carried by
    // the squared-current variable; unit injections convert kW to p.u.
    let mut terms: Vec<(usize, f64)> = Vec::new();
    for t in 0..t_len {
        for n in 0..n_nodes {
            terms.clear();
            for b in 0..case.branches.len() {
                if to_idx[b] == n {
                    terms.push((layout.p_flow(b, t), 1.0));
                    terms.push((layout.i_sq(b, t), -case.branches[b].r_pu));
                }
                if from_idx[b] == n {
                    terms.push((layout.p_flow(b, t), -1.0));
                }
            }
            for (u, &bn) in bus_idx.iter().enumerate() {
                if bn == n {
                    terms.push((layout.p_dis(u, t), 1.0 / kwb));
                    terms.push((layout.p_ch(u, t), -1.0 / kwb));
                }
            }
            if n == sub {
                terms.push((layout.p_grid(t), 1.0));
            }
            terms.push((layout.p_curt(n, t), 1.0));
            eq.push(
                RowTag::ActiveBalance { node: n, t },
                &terms,
                (load_p(n, t) - res_p(n, t)) / kwb,
            );

            terms.clear();
            for b in 0..case.branches.len() {
                if to_idx[b] == n {
                    terms.push((layout.q_flow(b, t), 1.0));
                    terms.push((layout.i_sq(b, t), -case.branches[b].x_pu));
                }
                if from_idx[b] == n {
                    terms.push((layout.q_flow(b, t), -1.0));
                }
            }
            for (u, &bn) in bus_idx.iter().enumerate() {
                if bn == n {
                    // Optional reactive support proportional to net active
                    // output at the declared power factor.
                    if let Some(pf) = nominal[u].power_factor {
                        let tan_phi = (1.0 / (pf * pf) - 1.0).max(0.0).sqrt();
                        if tan_phi > 0.0 {
                            terms.push((layout.p_dis(u, t), tan_phi / kwb));
                            terms.push((layout.p_ch(u, t), -tan_phi / kwb));
                        }
                    }
                }
            }
            if n == sub {
                terms.push((layout.q_grid(t), 1.0));
            }
            terms.push((layout.q_curt(n, t), 1.0));
            eq.push(
                RowTag::ReactiveBalance { node: n, t },
                &terms,
                load_q(n, t) / kwb,
            );

            // Curtailment sheds active and reactive load in the node's
            // power-factor proportion.
            let ratio = curtail_ratio(load_p(n, t), load_q(n, t));
            eq.push(
                RowTag::CurtailmentRatio { node: n, t },
                &[
                    (layout.q_curt(n, t), 1.0),
                    (layout.p_curt(n, t), -ratio),
                ],
                0.0,
            );
        }
        eq.push(
            RowTag::SlackVoltage { t },
            &[(layout.u_sq(sub, t), 1.0)],
            1.0,
        );
        for b in 0..case.branches.len() {
            let br = &case.branches[b];
            eq.push(
                RowTag::VoltageDrop { branch: b, t },
                &[
                    (layout.u_sq(from_idx[b], t), 1.0),
                    (layout.u_sq(to_idx[b], t), -1.0),
                    (layout.i_sq(b, t), br.r_pu * br.r_pu + br.x_pu * br.x_pu),
                    (layout.p_flow(b, t), -2.0 * br.r_pu),
                    (layout.q_flow(b, t), -2.0 * br.x_pu),
                ],
                0.0,
            );
        }
    }

    let mut ineq = Block::default();
    let mut materialized_power_cap_rows = 0usize;
    let mut materialized_soc_band_rows = 0usize;
    let mut materialized_usage_band_rows = 0usize;

    for (u, unit) in fleet.iter().enumerate() {
        let env = &envelopes[u].params;
        let mu = unit.uncertainty.mu_price_expansion;
        let nu = unit.uncertainty.nu_usage_contraction;
        for t in 0..t_len {
            ineq.push(
                RowTag::ChargeCapLo { unit: u, t },
                &[(layout.p_ch(u, t), -1.0)],
                0.0,
            );
            ineq.push(
                RowTag::ChargeCapHi { unit: u, t },
                &[(layout.p_ch(u, t), 1.0)],
                env.p_ch_max_kw[t],
            );
            ineq.push(
                RowTag::DischargeCapLo { unit: u, t },
                &[(layout.p_dis(u, t), -1.0)],
                0.0,
            );
            ineq.push(
                RowTag::DischargeCapHi { unit: u, t },
                &[(layout.p_dis(u, t), 1.0)],
                env.p_dis_max_kw[t],
            );
            materialized_power_cap_rows += 2;
            match cfg.variant {
                Variant::M1 | Variant::M2 => {
                    ineq.push(
                        RowTag::SocLo { unit: u, t },
                        &[(layout.soc_after(u, t), -1.0)],
                        -env.soc_min[t],
                    );
                    ineq.push(
                        RowTag::SocHi { unit: u, t },
                        &[(layout.soc_after(u, t), 1.0)],
                        env.soc_max[t],
                    );
                    materialized_soc_band_rows += 2;
                }
                Variant::M3 => {
                    // Unclipped affine boundary law: the band expands with
                    // the incentive price and contracts with accumulated
                    // throughput. A physical [0, 1] box keeps states real.
                    ineq.push(
                        RowTag::UsageHi { unit: u, t },
                        &[
                            (layout.soc_after(u, t), 1.0),
                            (layout.d_cum(u, t), nu),
                        ],
                        env.soc_max[t] + mu * prices.discharge_rmb_per_kwh[t],
                    );
                    ineq.push(
                        RowTag::UsageLo { unit: u, t },
                        &[
                            (layout.soc_after(u, t), -1.0),
                            (layout.d_cum(u, t), nu),
                        ],
                        -env.soc_min[t] + mu * prices.charge_rmb_per_kwh[t],
                    );
                    ineq.push(
                        RowTag::SocBoxLo { unit: u, t },
                        &[(layout.soc_after(u, t), -1.0)],
                        0.0,
                    );
                    ineq.push(
                        RowTag::SocBoxHi { unit: u, t },
                        &[(layout.soc_after(u, t), 1.0)],
                        1.0,
                    );
                    materialized_usage_band_rows += 2;
                }
            }
        }
        let ramp = (nominal[u].ramp_up_kw_per_h, nominal[u].ramp_down_kw_per_h);
        for t in 1..t_len {
            // Net output ramping: net = P_dis - P_ch.
            if let Some(ru) = ramp.0 {
                ineq.push(
                    RowTag::RampUp { unit: u, t },
                    &[
                        (layout.p_dis(u, t), 1.0),
                        (layout.p_ch(u, t), -1.0),
                        (layout.p_dis(u, t - 1), -1.0),
                        (layout.p_ch(u, t - 1), 1.0),
                    ],
                    ru * dt,
                );
            }
            if let Some(rd) = ramp.1 {
                ineq.push(
                    RowTag::RampDown { unit: u, t },
                    &[
                        (layout.p_dis(u, t), -1.0),
                        (layout.p_ch(u, t), 1.0),
                        (layout.p_dis(u, t - 1), 1.0),
                        (layout.p_ch(u, t - 1), -1.0),
                    ],
                    rd * dt,
                );
            }
        }
    }

    for t in 0..t_len {
        for n in 0..n_nodes {
            ineq.push(
                RowTag::CurtailLo { node: n, t },
                &[(layout.p_curt(n, t), -1.0)],
                0.0,
            );
            ineq.push(
                RowTag::CurtailHi { node: n, t },
                &[(layout.p_curt(n, t), 1.0)],
                load_p(n, t).max(0.0) / kwb,
            );
        }
        for b in 0..case.branches.len() {
            ineq.push(
                RowTag::CurrentLo { branch: b, t },
                &[(layout.i_sq(b, t), -1.0)],
                0.0,
            );
            if case.branches[b].i_max_pu.is_finite() {
                ineq.push(
                    RowTag::CurrentHi { branch: b, t },
                    &[(layout.i_sq(b, t), 1.0)],
                    case.branches[b].i_max_pu,
                );
            }
        }
        for n in 0..n_nodes {
            if n == sub {
                continue;
            }
            let node = &case.nodes[n];
            ineq.push(
                RowTag::VoltageLo { node: n, t },
                &[(layout.u_sq(n, t), -1.0)],
                -node.u_min_pu * node.u_min_pu,
            );
            ineq.push(
                RowTag::VoltageHi { node: n, t },
                &[(layout.u_sq(n, t), 1.0)],
                node.u_max_pu * node.u_max_pu,
            );
        }
        ineq.push(
            RowTag::GridImportLo { t },
            &[(layout.p_grid(t), -1.0)],
            0.0,
        );
    }

    // Second-order-cone blocks linking flow, current, and voltage:
    // (I + U_from, 2P, 2Q, I - U_from) lies in the four-dimensional cone,
    // i.e. I * U_from >= P^2 + Q^2. Rows hold the negated coefficients so
    // the solver slack equals the cone vector itself.
    let mut cone = Block::default();
    for t in 0..t_len {
        for b in 0..case.branches.len() {
            let fi = from_idx[b];
            cone.push(
                RowTag::ConeRow {
                    branch: b,
                    t,
                    component: 0,
                },
                &[(layout.i_sq(b, t), -1.0), (layout.u_sq(fi, t), -1.0)],
                0.0,
            );
            cone.push(
                RowTag::ConeRow {
                    branch: b,
                    t,
                    component: 1,
                },
                &[(layout.p_flow(b, t), -2.0)],
                0.0,
            );
            cone.push(
                RowTag::ConeRow {
                    branch: b,
                    t,
                    component: 2,
                },
                &[(layout.q_flow(b, t), -2.0)],
                0.0,
            );
            cone.push(
                RowTag::ConeRow {
                    branch: b,
                    t,
                    component: 3,
                },
                &[(layout.i_sq(b, t), -1.0), (layout.u_sq(fi, t), 1.0)],
                0.0,
            );
        }
    }

    // Linear objective: curtailment penalty, storage incentives, and grid
    // energy cost, all in RMB over the horizon.
    let mut objective = vec![0.0; layout.n_vars];
    for u in 0..n_units {
        for t in 0..t_len {
            objective[layout.p_ch(u, t)] = prices.charge_rmb_per_kwh[t] * dt;
            objective[layout.p_dis(u, t)] = prices.discharge_rmb_per_kwh[t] * dt;
        }
    }
    for t in 0..t_len {
        for n in 0..n_nodes {
            objective[layout.p_curt(n, t)] = prices.curtailment_rmb_per_kwh * kwb * dt;
        }
        objective[layout.p_grid(t)] = prices.grid_rmb_per_kwh[t] * kwb * dt;
    }

    let per_unit_period = 2u64 * t_len as u64 * n_units as u64;
    let n_logical = match cfg.variant {
        Variant::M1 => 1,
        _ => scenario_count as u64,
    };
    let counts = RowCounts {
        variables: layout.n_vars,
        equality_rows: eq.rows(),
        inequality_rows: ineq.rows(),
        cone_blocks: case.branches.len() * t_len,
        logical_power_cap_rows: per_unit_period * n_logical,
        materialized_power_cap_rows,
        logical_soc_band_rows: match cfg.variant {
            Variant::M3 => 0,
            _ => per_unit_period * n_logical,
        },
        materialized_soc_band_rows,
        logical_usage_band_rows: match cfg.variant {
            Variant::M3 => per_unit_period * n_logical,
            _ => 0,
        },
        materialized_usage_band_rows,
    };

    Ok(ProblemDescription {
        variant: cfg.variant,
        horizon: *horizon,
        config: cfg.clone(),
        layout,
        counts,
        scenario_count,
        case: case.clone(),
        prices: prices.clone(),
        fleet: fleet.to_vec(),
        nominal,
        envelopes,
        eq,
        ineq,
        cone,
        objective,
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::grid::{BranchSpec, NodeSpec, SystemBase};
    use crate::unit::StorageParams;

    /// Two-node feeder with one branch and flat series; loads in kW.
    pub(crate) fn two_bus_case(periods: usize, load_kw: f64, load_kvar: f64) -> GridCase {
        GridCase {
            name: "two-bus".into(),
            base: SystemBase { kv: 12.66, mva: 1.0 },
            substation: 1,
            nodes: vec![
                NodeSpec {
                    id: 1,
                    u_min_pu: 0.90,
                    u_max_pu: 1.10,
                    load_kw: 0.0,
                    load_kvar: 0.0,
                },
                NodeSpec {
                    id: 2,
                    u_min_pu: 0.90,
                    u_max_pu: 1.10,
                    load_kw,
                    load_kvar,
                },
            ],
            branches: vec![BranchSpec {
                from: 1,
                to: 2,
                r_pu: 0.05,
                x_pu: 0.02,
                i_max_pu: 25.0,
            }],
            load_p_kw: vec![vec![0.0, load_kw]; periods],
            load_q_kvar: vec![vec![0.0, load_kvar]; periods],
            res_p_kw: Vec::new(),
        }
    }

    /// Single-bus case: substation only, a pure storage-arbitrage setting.
    pub(crate) fn single_bus_case(load_kw: &[f64]) -> GridCase {
        GridCase {
            name: "single-bus".into(),
            base: SystemBase { kv: 10.0, mva: 1.0 },
            substation: 1,
            nodes: vec![NodeSpec {
                id: 1,
                u_min_pu: 0.95,
                u_max_pu: 1.05,
                load_kw: load_kw.iter().fold(0.0_f64, |m, v| m.max(*v)),
                load_kvar: 0.0,
            }],
            branches: Vec::new(),
            load_p_kw: load_kw.iter().map(|v| vec![*v]).collect(),
            load_q_kvar: load_kw.iter().map(|_| vec![0.0]).collect(),
            res_p_kw: Vec::new(),
        }
    }

    pub(crate) fn battery(
        id: &str,
        bus: usize,
        capacity_kwh: f64,
        p_max_kw: f64,
        soc_init: f64,
    ) -> FleetUnit {
        FleetUnit {
            id: id.into(),
            bus,
            params: PhysicalParams::Bes(StorageParams {
                capacity_kwh,
                p_ch_max_kw: p_max_kw,
                p_dis_max_kw: p_max_kw,
                eta_ch: 0.9,
                eta_dis: 0.9,
                self_discharge: 0.0,
                soc_min: 0.0,
                soc_max: 1.0,
                soc_init,
                ramp_up_kw_per_h: None,
                ramp_down_kw_per_h: None,
            }),
            uncertainty: UncertaintySpec::degenerate(),
        }
    }

    pub(crate) fn flat_prices(periods: usize, grid: &[f64]) -> PriceSchedule {
        assert_eq!(grid.len(), periods);
        PriceSchedule {
            grid_rmb_per_kwh: grid.to_vec(),
            charge_rmb_per_kwh: vec![0.05; periods],
            discharge_rmb_per_kwh: vec![0.05; periods],
            curtailment_rmb_per_kwh: 10.0,
        }
    }
}
