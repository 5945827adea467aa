//! Conic backend adapter, solution extraction, and independent verification.
//!
//! The assembled blocks are handed to an interior-point solver for problems
//! of the form min q'x s.t. Ax + s = b, s in K, with K a product of a zero
//! cone (equalities), a nonnegative cone (inequalities as Ax <= b), and one
//! four-dimensional second-order cone per branch and period. Verification
//! reconstructs the decision vector from the physical solution fields and
//! replays every constraint family independently of the solver.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use serde::{Deserialize, Serialize};

use crate::grid::{cone_gap, distflow_residual, NetworkState};
use crate::unit::{incentive_cost, soc_step, UnitSchedule};

use super::{Block, CcoConfig, DispatchError, ProblemDescription, SolveStatus, Variant};

/// Objective value split into its three cost components, RMB per horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub curtailment_rmb: f64,
    pub incentive_rmb: f64,
    pub grid_energy_rmb: f64,
    pub total_rmb: f64,
}

impl ObjectiveBreakdown {
    fn zero() -> Self {
        ObjectiveBreakdown {
            curtailment_rmb: 0.0,
            incentive_rmb: 0.0,
            grid_energy_rmb: 0.0,
            total_rmb: 0.0,
        }
    }
}

/// Solver-side quality indicators for one dispatch solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// Raw backend termination status.
    pub solver_status: String,
    pub iterations: u32,
    /// Wall-clock seconds; excluded from serialization so artifacts stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub solve_time_s: f64,
    /// Objective as reported by the backend (before recomputation).
    pub solver_objective_rmb: f64,
    /// Worst relative second-order-cone gap over branches and periods.
    pub max_cone_gap_rel: f64,
    /// Worst charge*discharge product over units and periods, kW^2.
    pub max_complementarity_kw2: f64,
    /// Inequality rows at their bound (within the feasibility tolerance).
    pub binding_rows: Vec<String>,
}

/// Result of one dispatch solve in physical units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub variant: Variant,
    pub status: SolveStatus,
    /// Fleet order mirrors the problem's fleet vector.
    pub unit_ids: Vec<String>,
    pub schedules: Vec<UnitSchedule>,
    pub network: NetworkState,
    pub objective: ObjectiveBreakdown,
    pub diagnostics: SolveDiagnostics,
}

fn empty_network(t_len: usize, n_nodes: usize, n_branches: usize) -> NetworkState {
    NetworkState {
        p_flow_pu: vec![vec![0.0; n_branches]; t_len],
        q_flow_pu: vec![vec![0.0; n_branches]; t_len],
        i_sq_pu: vec![vec![0.0; n_branches]; t_len],
        u_sq_pu: vec![vec![0.0; n_nodes]; t_len],
        p_grid_pu: vec![0.0; t_len],
        q_grid_pu: vec![0.0; t_len],
        p_curt_pu: vec![vec![0.0; n_nodes]; t_len],
        q_curt_pu: vec![vec![0.0; n_nodes]; t_len],
    }
}

/// Stack the equality, inequality, and cone blocks into one constraint
/// matrix in the backend's row order.
fn stack_constraints(desc: &ProblemDescription) -> (CscMatrix<f64>, Vec<f64>) {
    let m_eq = desc.eq.rows();
    let m_in = desc.ineq.rows();
    let m = m_eq + m_in + desc.cone.rows();
    let nnz = desc.eq.entries.len() + desc.ineq.entries.len() + desc.cone.entries.len();
    let mut rows = Vec::with_capacity(nnz);
    let mut cols = Vec::with_capacity(nnz);
    let mut vals = Vec::with_capacity(nnz);
    let mut b = Vec::with_capacity(m);
    for (offset, block) in [(0, &desc.eq), (m_eq, &desc.ineq), (m_eq + m_in, &desc.cone)] {
        for &(r, c, v) in &block.entries {
            rows.push(offset + r);
            cols.push(c);
            vals.push(v);
        }
        b.extend_from_slice(&block.rhs);
    }
    (
        CscMatrix::new_from_triplets(m, desc.layout.n_vars, rows, cols, vals),
        b,
    )
}

/// Solve the assembled problem. `cfg` supplies the runtime tolerances; the
/// structural configuration is already baked into `desc`.
///
/// Deterministic: identical descriptions produce identical solutions (the
/// backend is single-threaded and iteration order is fixed).
pub fn solve_dispatch(
    desc: &ProblemDescription,
    cfg: &CcoConfig,
) -> Result<DispatchSolution, DispatchError> {
    cfg.validate()?;
    let (a, b) = stack_constraints(desc);
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if desc.eq.rows() > 0 {
        cones.push(SupportedConeT::ZeroConeT(desc.eq.rows()));
    }
    if desc.ineq.rows() > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(desc.ineq.rows()));
    }
    for _ in 0..desc.counts.cone_blocks {
        cones.push(SupportedConeT::SecondOrderConeT(4));
    }
    let p = CscMatrix::zeros((desc.layout.n_vars, desc.layout.n_vars));
    let settings = DefaultSettings {
        verbose: false,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &desc.objective, &a, &b, &cones, settings);
    solver.solve();
    let raw = &solver.solution;

    let status = match raw.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        _ => SolveStatus::NumericalFailure,
    };

    let layout = &desc.layout;
    let t_len = layout.periods;
    let horizon = &desc.horizon;
    let mut schedules = Vec::with_capacity(layout.n_units);
    let mut network = empty_network(t_len, layout.n_nodes, layout.n_branches);
    let mut objective = ObjectiveBreakdown::zero();
    let mut max_cone_rel = 0.0_f64;
    let mut binding = Vec::new();

    if status == SolveStatus::Optimal {
        let x = &raw.x;
        for u in 0..layout.n_units {
            // Interior-point slack can leave powers a hair below zero; clamp
            // so schedules honor their nonnegativity contract.
            let p_ch_kw: Vec<f64> = (0..t_len).map(|t| x[layout.p_ch(u, t)].max(0.0)).collect();
            let p_dis_kw: Vec<f64> =
                (0..t_len).map(|t| x[layout.p_dis(u, t)].max(0.0)).collect();
            let mut soc = Vec::with_capacity(t_len + 1);
            soc.push(desc.nominal[u].soc_init);
            for t in 0..t_len {
                soc.push(x[layout.soc_after(u, t)]);
            }
            schedules.push(UnitSchedule {
                p_ch_kw,
                p_dis_kw,
                soc,
            });
        }
        for t in 0..t_len {
            for b_i in 0..layout.n_branches {
                network.p_flow_pu[t][b_i] = x[layout.p_flow(b_i, t)];
                network.q_flow_pu[t][b_i] = x[layout.q_flow(b_i, t)];
                network.i_sq_pu[t][b_i] = x[layout.i_sq(b_i, t)];
            }
            for n in 0..layout.n_nodes {
                network.u_sq_pu[t][n] = x[layout.u_sq(n, t)];
                network.p_curt_pu[t][n] = x[layout.p_curt(n, t)];
                network.q_curt_pu[t][n] = x[layout.q_curt(n, t)];
            }
            network.p_grid_pu[t] = x[layout.p_grid(t)];
            network.q_grid_pu[t] = x[layout.q_grid(t)];
        }

        let kwb = desc.case.kw_base();
        let dt = horizon.dt_hours;
        objective.curtailment_rmb = network
            .p_curt_pu
            .iter()
            .flatten()
            .map(|p| p * kwb * dt * desc.prices.curtailment_rmb_per_kwh)
            .sum();
        objective.incentive_rmb = incentive_cost(&schedules, &desc.prices, horizon)?;
        objective.grid_energy_rmb = network
            .p_grid_pu
            .iter()
            .zip(&desc.prices.grid_rmb_per_kwh)
            .map(|(p, c)| p * kwb * dt * c)
            .sum();
        objective.total_rmb =
            objective.curtailment_rmb + objective.incentive_rmb + objective.grid_energy_rmb;

        for t in 0..t_len {
            for b_i in 0..layout.n_branches {
                let gap = cone_gap(&desc.case, &network, b_i, t)?;
                let fi = desc
                    .case
                    .node_index(desc.case.branches[b_i].from)
                    .expect("validated endpoint");
                let denom = (network.i_sq_pu[t][b_i] + network.u_sq_pu[t][fi]).abs().max(1e-9);
                max_cone_rel = max_cone_rel.max(gap / denom);
            }
        }

        // Binding inequality rows, judged by slack against the feasibility
        // tolerance at each row's own scale.
        let slack = desc.ineq.residuals(x);
        for (row, s) in slack.iter().enumerate() {
            let tol = cfg.feasibility_tol * (1.0 + desc.ineq.rhs[row].abs());
            if s.abs() <= tol || *s > 0.0 {
                binding.push(desc.ineq.tags[row].to_string());
            }
        }
    }

    let max_complementarity = schedules
        .iter()
        .map(UnitSchedule::max_complementarity_kw2)
        .fold(0.0, f64::max);

    Ok(DispatchSolution {
        variant: desc.variant,
        status,
        unit_ids: desc.fleet.iter().map(|u| u.id.clone()).collect(),
        schedules,
        network,
        objective,
        diagnostics: SolveDiagnostics {
            solver_status: format!("{:?}", raw.status),
            iterations: raw.iterations,
            solve_time_s: raw.solve_time,
            solver_objective_rmb: if status == SolveStatus::Optimal {
                raw.obj_val
            } else {
                0.0
            },
            max_cone_gap_rel: max_cone_rel,
            max_complementarity_kw2: max_complementarity,
            binding_rows: binding,
        },
    })
}

/// Constraint-by-constraint audit of a solution against its problem.
/// Produced unconditionally; `all_ok` summarizes every check at the
/// problem's tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub max_equality_residual: f64,
    /// Worst positive part of Ax - b over inequality rows.
    pub max_inequality_violation: f64,
    /// Worst relative cone gap (tightness of the branch-flow relaxation).
    pub max_cone_gap_rel: f64,
    /// Most negative cone slack (cone feasibility; 0 when none negative).
    pub max_cone_infeasibility: f64,
    /// Worst branch-physics residual recomputed from the network state.
    pub max_distflow_residual: f64,
    /// Worst gap between stored SOC states and a re-simulated trajectory.
    pub max_soc_dynamics_error: f64,
    /// Worst |SOC_T - SOC_0| over units.
    pub max_terminal_gap: f64,
    pub max_complementarity_kw2: f64,
    /// Schedule entries violating any sampled scenario's bounds (evaluated
    /// against the worst-case envelope, which is equivalent).
    pub in_sample_violations: usize,
    pub curtailment_within_load: bool,
    /// |recomputed objective - solver objective|.
    pub objective_gap_rmb: f64,
    /// Rows whose residual exceeds tolerance, by tag.
    pub flagged_rows: Vec<String>,
    pub warnings: Vec<String>,
    pub all_ok: bool,
}

/// Rebuild the flat decision vector from the solution's physical fields.
/// Returns `None` when the solution shape does not match the problem.
fn reconstruct_x(sol: &DispatchSolution, desc: &ProblemDescription) -> Option<Vec<f64>> {
    let layout = &desc.layout;
    let t_len = layout.periods;
    if sol.schedules.len() != layout.n_units
        || sol.network.u_sq_pu.len() != t_len
        || sol.network.p_flow_pu.len() != t_len
    {
        return None;
    }
    let mut x = vec![0.0; layout.n_vars];
    for (u, sched) in sol.schedules.iter().enumerate() {
        if sched.p_ch_kw.len() != t_len
            || sched.p_dis_kw.len() != t_len
            || sched.soc.len() != t_len + 1
        {
            return None;
        }
        for t in 0..t_len {
            x[layout.p_ch(u, t)] = sched.p_ch_kw[t];
            x[layout.p_dis(u, t)] = sched.p_dis_kw[t];
            x[layout.soc_after(u, t)] = sched.soc[t + 1];
        }
        if layout.has_throughput {
            // Accumulated throughput is affine in the schedule; rebuild it
            // with the same recurrence the rows encode.
            let w = desc.horizon.dt_hours / desc.nominal[u].capacity_kwh;
            let mut d = 0.0;
            x[layout.d_cum(u, 0)] = 0.0;
            for t in 1..t_len {
                d += (sched.p_ch_kw[t - 1] + sched.p_dis_kw[t - 1]) * w;
                x[layout.d_cum(u, t)] = d;
            }
        }
    }
    let net = &sol.network;
    for t in 0..t_len {
        if net.p_flow_pu[t].len() != layout.n_branches || net.u_sq_pu[t].len() != layout.n_nodes {
            return None;
        }
        for b in 0..layout.n_branches {
            x[layout.p_flow(b, t)] = net.p_flow_pu[t][b];
            x[layout.q_flow(b, t)] = net.q_flow_pu[t][b];
            x[layout.i_sq(b, t)] = net.i_sq_pu[t][b];
        }
        for n in 0..layout.n_nodes {
            x[layout.u_sq(n, t)] = net.u_sq_pu[t][n];
            x[layout.p_curt(n, t)] = net.p_curt_pu[t][n];
            x[layout.q_curt(n, t)] = net.q_curt_pu[t][n];
        }
        x[layout.p_grid(t)] = net.p_grid_pu[t];
        x[layout.q_grid(t)] = net.q_grid_pu[t];
    }
    Some(x)
}

fn flag_rows(block: &Block, x: &[f64], tol: f64, equality: bool, out: &mut Vec<String>) -> f64 {
    let mut worst = 0.0_f64;
    for (row, r) in block.residuals(x).iter().enumerate() {
        let v = if equality { r.abs() } else { r.max(0.0) };
        worst = worst.max(v);
        if v > tol * (1.0 + block.rhs[row].abs()) {
            out.push(block.tags[row].to_string());
        }
    }
    worst
}

/// Audit `sol` against `desc`: matrix residuals, branch physics, storage
/// dynamics, cone tightness, complementarity, and scenario-bound coverage.
pub fn verify_solution(sol: &DispatchSolution, desc: &ProblemDescription) -> VerificationReport {
    let tol = desc.config.feasibility_tol;
    let mut warnings = Vec::new();
    let mut flagged = Vec::new();

    let mut report = VerificationReport {
        max_equality_residual: f64::INFINITY,
        max_inequality_violation: f64::INFINITY,
        max_cone_gap_rel: f64::INFINITY,
        max_cone_infeasibility: f64::INFINITY,
        max_distflow_residual: f64::INFINITY,
        max_soc_dynamics_error: f64::INFINITY,
        max_terminal_gap: f64::INFINITY,
        max_complementarity_kw2: f64::INFINITY,
        in_sample_violations: 0,
        curtailment_within_load: false,
        objective_gap_rmb: f64::INFINITY,
        flagged_rows: Vec::new(),
        warnings: Vec::new(),
        all_ok: false,
    };

    let x = match reconstruct_x(sol, desc) {
        Some(x) => x,
        None => {
            report.warnings = vec!["solution shape does not match problem".into()];
            return report;
        }
    };

    report.max_equality_residual = flag_rows(&desc.eq, &x, tol, true, &mut flagged);
    report.max_inequality_violation = flag_rows(&desc.ineq, &x, tol, false, &mut flagged);

    let layout = &desc.layout;
    let t_len = layout.periods;
    let horizon = &desc.horizon;

    // Branch physics and cone tightness from the physical state, not the
    // matrix rows, so these checks stay valid even if assembly were wrong.
    let mut max_df = 0.0_f64;
    let mut max_rel_gap = 0.0_f64;
    let mut max_cone_neg = 0.0_f64;
    for t in 0..t_len {
        for b in 0..layout.n_branches {
            let df = distflow_residual(&desc.case, &sol.network, b, t)
                .map(f64::abs)
                .unwrap_or(f64::INFINITY);
            max_df = max_df.max(df);
            let gap = cone_gap(&desc.case, &sol.network, b, t).unwrap_or(f64::NEG_INFINITY);
            let fi = desc
                .case
                .node_index(desc.case.branches[b].from)
                .expect("validated endpoint");
            let denom = (sol.network.i_sq_pu[t][b] + sol.network.u_sq_pu[t][fi])
                .abs()
                .max(1e-9);
            if gap >= 0.0 {
                max_rel_gap = max_rel_gap.max(gap / denom);
            } else {
                max_cone_neg = max_cone_neg.max(-gap);
            }
        }
    }
    report.max_distflow_residual = max_df;
    report.max_cone_gap_rel = max_rel_gap;
    report.max_cone_infeasibility = max_cone_neg;

    // Storage dynamics replayed step by step on nominal parameters.
    let mut max_dyn = 0.0_f64;
    let mut max_term = 0.0_f64;
    for (u, sched) in sol.schedules.iter().enumerate() {
        let p = &desc.nominal[u];
        let mut soc = p.soc_init;
        max_dyn = max_dyn.max((sched.soc[0] - soc).abs());
        for t in 0..t_len {
            soc = match soc_step(p, horizon, t, soc, sched.p_ch_kw[t], sched.p_dis_kw[t]) {
                Ok(s) => s,
                Err(_) => f64::NAN,
            };
            let err = (sched.soc[t + 1] - soc).abs();
            if err.is_nan() {
                max_dyn = f64::INFINITY;
            } else {
                max_dyn = max_dyn.max(err);
            }
            // Follow the stored trajectory so one bad step does not cascade.
            soc = sched.soc[t + 1];
        }
        max_term = max_term.max((sched.soc[t_len] - p.soc_init).abs());
    }
    report.max_soc_dynamics_error = max_dyn;
    report.max_terminal_gap = max_term;
    report.max_complementarity_kw2 = sol
        .schedules
        .iter()
        .map(UnitSchedule::max_complementarity_kw2)
        .fold(0.0, f64::max);

    // Envelope coverage: by the exact collapse, satisfying the worst case
    // per row is satisfying every sampled scenario.
    let mut violations = 0usize;
    for (u, sched) in sol.schedules.iter().enumerate() {
        let env = &desc.envelopes[u].params;
        let spec = &desc.fleet[u].uncertainty;
        for t in 0..t_len {
            if sched.p_ch_kw[t] > env.p_ch_max_kw[t] + tol {
                violations += 1;
            }
            if sched.p_dis_kw[t] > env.p_dis_max_kw[t] + tol {
                violations += 1;
            }
            let soc = sched.soc[t + 1];
            match desc.variant {
                Variant::M1 | Variant::M2 => {
                    if soc < env.soc_min[t] - tol || soc > env.soc_max[t] + tol {
                        violations += 1;
                    }
                }
                Variant::M3 => {
                    let d = x[layout.d_cum(u, t)];
                    let hi = env.soc_max[t]
                        + spec.mu_price_expansion * desc.prices.discharge_rmb_per_kwh[t]
                        - spec.nu_usage_contraction * d;
                    let lo = env.soc_min[t]
                        - spec.mu_price_expansion * desc.prices.charge_rmb_per_kwh[t]
                        + spec.nu_usage_contraction * d;
                    if soc < lo - tol || soc > hi + tol || soc < -tol || soc > 1.0 + tol {
                        violations += 1;
                    }
                }
            }
        }
    }
    report.in_sample_violations = violations;

    let kwb = desc.case.kw_base();
    let mut curt_ok = true;
    for t in 0..t_len {
        for n in 0..layout.n_nodes {
            let cap = desc.case.load_p_kw[t][n].max(0.0) / kwb;
            let c = sol.network.p_curt_pu[t][n];
            if c < -tol || c > cap + tol {
                curt_ok = false;
            }
        }
    }
    report.curtailment_within_load = curt_ok;
    report.objective_gap_rmb =
        (sol.objective.total_rmb - sol.diagnostics.solver_objective_rmb).abs();

    if report.max_equality_residual > tol {
        warnings.push(format!(
            "equality residual {:.3e} exceeds tolerance",
            report.max_equality_residual
        ));
    }
    if report.max_inequality_violation > tol {
        warnings.push(format!(
            "inequality violation {:.3e} exceeds tolerance",
            report.max_inequality_violation
        ));
    }
    if report.max_cone_gap_rel > desc.config.cone_gap_tol {
        warnings.push(format!(
            "cone relaxation not tight: relative gap {:.3e}",
            report.max_cone_gap_rel
        ));
    }
    if report.max_cone_infeasibility > tol {
        warnings.push(format!(
            "cone constraint violated by {:.3e}",
            report.max_cone_infeasibility
        ));
    }
    if report.max_distflow_residual > tol {
        warnings.push(format!(
            "branch physics residual {:.3e} exceeds tolerance",
            report.max_distflow_residual
        ));
    }
    if report.max_soc_dynamics_error > tol {
        warnings.push(format!(
            "storage dynamics residual {:.3e} exceeds tolerance",
            report.max_soc_dynamics_error
        ));
    }
    if report.max_terminal_gap > tol {
        warnings.push(format!(
            "terminal state misses initial state by {:.3e}",
            report.max_terminal_gap
        ));
    }
    if violations > 0 {
        warnings.push(format!("{violations} in-sample scenario bound violations"));
    }
    if !curt_ok {
        warnings.push("curtailment outside [0, load]".into());
    }
    report.flagged_rows = flagged;
    report.all_ok = warnings.is_empty() && sol.status == SolveStatus::Optimal;
    report.warnings = warnings;
    report
}
