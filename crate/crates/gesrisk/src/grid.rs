//! Radial distribution feeder description and branch-flow identities.
//!
//! A [`GridCase`] couples static topology (nodes, branches, base quantities)
//! with per-period load and renewable series attached later by the pipeline.
//! Electrical state lives in the branch-flow (DistFlow) variable space:
//! squared voltage magnitudes `U`, squared branch currents `I`, and
//! sending-end branch flows `P`, `Q`, all in per unit. Two identities tie a
//! state to the physics:
//!
//! * voltage drop along branch `i -> j`:
//!   `U_i - U_j + (r^2 + x^2) I - 2 (r P + x Q) = 0`;
//! * the rotated-cone relation `I U_i >= P^2 + Q^2`, tracked through
//!   [`cone_gap`], which is zero exactly when the relaxation is tight.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while loading or validating a feeder case.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("failed to read case file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse case file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("substation node {0} is not defined")]
    UnknownSubstation(usize),
    #[error("node id {0} appears more than once")]
    DuplicateNode(usize),
    #[error("branch {from}->{to} references an undefined node")]
    UnknownBranchEndpoint { from: usize, to: usize },
    #[error("branch {from}->{to} is missing impedance data")]
    MissingImpedance { from: usize, to: usize },
    #[error("branch {from}->{to} has invalid impedance r={r} x={x}")]
    InvalidImpedance { from: usize, to: usize, r: f64, x: f64 },
    #[error("branch {from}->{to} has non-positive current limit {limit}")]
    InvalidCurrentLimit { from: usize, to: usize, limit: f64 },
    #[error("node {id} has invalid voltage band [{lo}, {hi}]")]
    InvalidVoltageBand { id: usize, lo: f64, hi: f64 },
    #[error("node {id} has negative load")]
    NegativeLoad { id: usize },
    #[error("a radial feeder over {nodes} nodes needs {} branches, found {branches}", nodes - 1)]
    BranchCountMismatch { nodes: usize, branches: usize },
    #[error("branches form a cycle involving {from}->{to}")]
    CyclicTopology { from: usize, to: usize },
    #[error("node {0} is not connected to the substation")]
    DisconnectedNode(usize),
    #[error("branch index {b} out of range ({branches} branches)")]
    BranchOutOfRange { b: usize, branches: usize },
    #[error("period index {t} out of range ({periods} periods in state)")]
    PeriodOutOfRange { t: usize, periods: usize },
}

/// System base quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemBase {
    /// Line-to-line voltage base, kV.
    pub kv: f64,
    /// Apparent-power base, MVA.
    pub mva: f64,
}

/// One feeder node with its security band and peak load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: usize,
    /// Lower voltage-magnitude limit, p.u.
    pub u_min_pu: f64,
    /// Upper voltage-magnitude limit, p.u.
    pub u_max_pu: f64,
    /// Peak active load, kW; per-period series scale this value.
    #[serde(default)]
    pub load_kw: f64,
    /// Peak reactive load, kvar.
    #[serde(default)]
    pub load_kvar: f64,
}

/// One feeder branch, oriented away from the substation in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
    /// Cap on the squared-current variable, p.u.
    pub i_max_pu: f64,
}

/// Raw branch record as stored on disk; impedances are optional so their
/// absence is reported distinctly from a parse failure.
#[derive(Debug, Deserialize)]
struct BranchRecord {
    from: usize,
    to: usize,
    r_pu: Option<f64>,
    x_pu: Option<f64>,
    i_max_pu: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct CaseRecord {
    #[serde(default)]
    name: String,
    base: SystemBase,
    substation: usize,
    nodes: Vec<NodeSpec>,
    branches: Vec<BranchRecord>,
}

/// Radial feeder case: topology plus (optionally attached) per-period series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub name: String,
    pub base: SystemBase,
    /// Node id of the substation (slack) bus.
    pub substation: usize,
    pub nodes: Vec<NodeSpec>,
    pub branches: Vec<BranchSpec>,
    /// Active load per period and node, kW; `[t][node_index]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub load_p_kw: Vec<Vec<f64>>,
    /// Reactive load per period and node, kvar.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub load_q_kvar: Vec<Vec<f64>>,
    /// Renewable injection per period and node, kW.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub res_p_kw: Vec<Vec<f64>>,
}

impl GridCase {
    /// Power base in kW.
    pub fn kw_base(&self) -> f64 {
        self.base.mva * 1000.0
    }

    /// Position of a node id in `nodes`.
    pub fn node_index(&self, id: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Index of the substation node in `nodes`.
    pub fn substation_index(&self) -> usize {
        self.node_index(self.substation)
            .expect("validated case always contains its substation")
    }

    /// Number of periods in the attached series (0 when none attached).
    pub fn periods(&self) -> usize {
        self.load_p_kw.len()
    }

    /// The packaged 33-bus feeder (12.66 kV, 3715 kW / 2300 kvar peak).
    pub fn bundled_ieee33() -> Self {
        parse_case(include_str!("../cases/ieee33.json"))
            .expect("bundled case must always validate")
    }
}

/// Loads and validates a feeder case from a JSON file.
pub fn load_case<P: AsRef<std::path::Path>>(path: P) -> Result<GridCase, GridError> {
    let text = std::fs::read_to_string(path)?;
    parse_case(&text)
}

/// Parses and validates a feeder case from JSON text.
pub fn parse_case(text: &str) -> Result<GridCase, GridError> {
    let raw: CaseRecord = serde_json::from_str(text)?;
    let mut seen = std::collections::BTreeSet::new();
    for n in &raw.nodes {
        if !seen.insert(n.id) {
            return Err(GridError::DuplicateNode(n.id));
        }
        if !(n.u_min_pu > 0.0 && n.u_min_pu < n.u_max_pu) {
            return Err(GridError::InvalidVoltageBand {
                id: n.id,
                lo: n.u_min_pu,
                hi: n.u_max_pu,
            });
        }
        if n.load_kw < 0.0 || n.load_kvar < 0.0 {
            return Err(GridError::NegativeLoad { id: n.id });
        }
    }
    if !seen.contains(&raw.substation) {
        return Err(GridError::UnknownSubstation(raw.substation));
    }
    if raw.branches.len() + 1 != raw.nodes.len() {
        return Err(GridError::BranchCountMismatch {
            nodes: raw.nodes.len(),
            branches: raw.branches.len(),
        });
    }
    let mut branches = Vec::with_capacity(raw.branches.len());
    for b in &raw.branches {
        if !seen.contains(&b.from) || !seen.contains(&b.to) {
            return Err(GridError::UnknownBranchEndpoint {
                from: b.from,
                to: b.to,
            });
        }
        let (r, x) = match (b.r_pu, b.x_pu) {
            (Some(r), Some(x)) => (r, x),
            _ => {
                return Err(GridError::MissingImpedance {
                    from: b.from,
                    to: b.to,
                })
            }
        };
        if !(r.is_finite() && x.is_finite()) || r < 0.0 || x < 0.0 || (r == 0.0 && x == 0.0) {
            return Err(GridError::InvalidImpedance {
                from: b.from,
                to: b.to,
                r,
                x,
            });
        }
        let i_max = b.i_max_pu.unwrap_or(f64::INFINITY);
        if !(i_max > 0.0) {
            return Err(GridError::InvalidCurrentLimit {
                from: b.from,
                to: b.to,
                limit: i_max,
            });
        }
        branches.push(BranchSpec {
            from: b.from,
            to: b.to,
            r_pu: r,
            x_pu: x,
            i_max_pu: i_max,
        });
    }
    // union-find over node ids: a radial feeder joins a fresh pair per branch
    let ids: Vec<usize> = raw.nodes.iter().map(|n| n.id).collect();
    let index: std::collections::BTreeMap<usize, usize> =
        ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for b in &branches {
        let (fi, ti) = (index[&b.from], index[&b.to]);
        let (rf, rt) = (find(&mut parent, fi), find(&mut parent, ti));
        if rf == rt {
            return Err(GridError::CyclicTopology {
                from: b.from,
                to: b.to,
            });
        }
        parent[rf] = rt;
    }
    let root = find(&mut parent, index[&raw.substation]);
    for (i, id) in ids.iter().enumerate() {
        if find(&mut parent, i) != root {
            return Err(GridError::DisconnectedNode(*id));
        }
    }
    Ok(GridCase {
        name: raw.name,
        base: raw.base,
        substation: raw.substation,
        nodes: raw.nodes,
        branches,
        load_p_kw: Vec::new(),
        load_q_kvar: Vec::new(),
        res_p_kw: Vec::new(),
    })
}

/// Electrical operating state over a horizon, all in per unit.
///
/// Branch-indexed vectors follow `case.branches` order; node-indexed vectors
/// follow `case.nodes` order. Voltages and currents are stored *squared*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    /// Sending-end active flow, `[t][branch]`.
    pub p_flow_pu: Vec<Vec<f64>>,
    /// Sending-end reactive flow, `[t][branch]`.
    pub q_flow_pu: Vec<Vec<f64>>,
    /// Squared branch current, `[t][branch]`.
    pub i_sq_pu: Vec<Vec<f64>>,
    /// Squared node voltage, `[t][node]`.
    pub u_sq_pu: Vec<Vec<f64>>,
    /// Substation active import, `[t]`.
    pub p_grid_pu: Vec<f64>,
    /// Substation reactive import, `[t]`.
    pub q_grid_pu: Vec<f64>,
    /// Curtailed active load, `[t][node]`.
    pub p_curt_pu: Vec<Vec<f64>>,
    /// Curtailed reactive load, `[t][node]`.
    pub q_curt_pu: Vec<Vec<f64>>,
}

impl NetworkState {
    /// Smallest voltage magnitude across nodes and periods, p.u.
    pub fn min_voltage_pu(&self) -> f64 {
        self.u_sq_pu
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, u| m.min(*u))
            .sqrt()
    }

    /// Largest voltage magnitude across nodes and periods, p.u.
    pub fn max_voltage_pu(&self) -> f64 {
        self.u_sq_pu
            .iter()
            .flatten()
            .fold(f64::NEG_INFINITY, |m, u| m.max(*u))
            .sqrt()
    }

    /// Mean voltage magnitude across nodes and periods, p.u.
    pub fn mean_voltage_pu(&self) -> f64 {
        let (sum, n) = self
            .u_sq_pu
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), u| (s + u.sqrt(), n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    /// Total curtailed active energy, kWh, given the case base and step.
    pub fn total_curtailed_kwh(&self, kw_base: f64, dt_hours: f64) -> f64 {
        self.p_curt_pu
            .iter()
            .flatten()
            .map(|p| p * kw_base * dt_hours)
            .sum()
    }

    fn check(&self, case: &GridCase, b: usize, t: usize) -> Result<(), GridError> {
        if b >= case.branches.len() {
            return Err(GridError::BranchOutOfRange {
                b,
                branches: case.branches.len(),
            });
        }
        if t >= self.u_sq_pu.len() {
            return Err(GridError::PeriodOutOfRange {
                t,
                periods: self.u_sq_pu.len(),
            });
        }
        Ok(())
    }
}

/// Residual of the branch voltage-drop identity for branch `b` at period `t`:
/// `U_from - U_to + (r^2 + x^2) I - 2 (r P + x Q)`. Zero on a physical state.
pub fn distflow_residual(
    case: &GridCase,
    state: &NetworkState,
    b: usize,
    t: usize,
) -> Result<f64, GridError> {
    state.check(case, b, t)?;
    let br = &case.branches[b];
    let fi = case.node_index(br.from).expect("validated endpoint");
    let ti = case.node_index(br.to).expect("validated endpoint");
    let (r, x) = (br.r_pu, br.x_pu);
    Ok(state.u_sq_pu[t][fi] - state.u_sq_pu[t][ti]
        + (r * r + x * x) * state.i_sq_pu[t][b]
        - 2.0 * (r * state.p_flow_pu[t][b] + x * state.q_flow_pu[t][b]))
}

/// Slack of the second-order-cone relaxation for branch `b` at period `t`:
///
/// `(I + U_from) - || (2P, 2Q, I - U_from) ||_2`
///
/// Nonnegative on any feasible relaxed state; zero exactly when
/// `I * U_from = P^2 + Q^2`, i.e. when the relaxation is tight.
pub fn cone_gap(
    case: &GridCase,
    state: &NetworkState,
    b: usize,
    t: usize,
) -> Result<f64, GridError> {
    state.check(case, b, t)?;
    let br = &case.branches[b];
    let fi = case.node_index(br.from).expect("validated endpoint");
    let (p, q) = (state.p_flow_pu[t][b], state.q_flow_pu[t][b]);
    let (i, u) = (state.i_sq_pu[t][b], state.u_sq_pu[t][fi]);
    let norm = (4.0 * p * p + 4.0 * q * q + (i - u) * (i - u)).sqrt();
    Ok((i + u) - norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_bus_text(extra: &str) -> String {
        format!(
            r#"{{
  "name": "two-bus",
  "base": {{"kv": 12.66, "mva": 1.0}},
  "substation": 1,
  "nodes": [
    {{"id": 1, "u_min_pu": 0.95, "u_max_pu": 1.05}},
    {{"id": 2, "u_min_pu": 0.95, "u_max_pu": 1.05, "load_kw": 300.0, "load_kvar": 200.0}}
  ],
  "branches": [
    {{"from": 1, "to": 2, "r_pu": 0.05, "x_pu": 0.04, "i_max_pu": 10.0}}{extra}
  ]
}}"#
        )
    }

    fn two_bus_case() -> GridCase {
        parse_case(&two_bus_text("")).unwrap()
    }

    /// Exact DistFlow state for the two-bus case serving (0.3, 0.2) p.u.:
    /// the smaller root of the loss quadratic, frozen from a closed-form
    /// solve of I = (p + rI)^2 + (q + xI)^2 with U1 = 1.
    fn two_bus_state() -> NetworkState {
        let i = 0.13634824156835768;
        let p = 0.3068174120784179;
        let q = 0.20545392966273432;
        let u2 = 0.9534409722095697;
        NetworkState {
            p_flow_pu: vec![vec![p]],
            q_flow_pu: vec![vec![q]],
            i_sq_pu: vec![vec![i]],
            u_sq_pu: vec![vec![1.0, u2]],
            p_grid_pu: vec![p],
            q_grid_pu: vec![q],
            p_curt_pu: vec![vec![0.0, 0.0]],
            q_curt_pu: vec![vec![0.0, 0.0]],
        }
    }

    #[test]
    fn bundled_case_is_the_standard_feeder() {
        let case = GridCase::bundled_ieee33();
        assert_eq!(case.nodes.len(), 33);
        assert_eq!(case.branches.len(), 32);
        assert_eq!(case.substation, 1);
        assert_relative_eq!(case.base.kv, 12.66);
        let total_p: f64 = case.nodes.iter().map(|n| n.load_kw).sum();
        let total_q: f64 = case.nodes.iter().map(|n| n.load_kvar).sum();
        assert_relative_eq!(total_p, 3715.0, max_relative = 1e-12);
        assert_relative_eq!(total_q, 2300.0, max_relative = 1e-12);
        // first branch is 0.0922 + j0.0470 ohm on a 160.2756-ohm base
        assert_relative_eq!(
            case.branches[0].r_pu,
            0.0922 / (12.66 * 12.66),
            max_relative = 1e-12
        );
        // round-trips through serde unchanged
        let text = serde_json::to_string(&case).unwrap();
        let back = parse_case(&text).unwrap();
        assert_eq!(case, back);
    }

    #[test]
    fn validation_rejects_malformed_cases() {
        // branch count
        let mut c: serde_json::Value = serde_json::from_str(&two_bus_text("")).unwrap();
        c["branches"] = serde_json::json!([]);
        assert!(matches!(
            parse_case(&c.to_string()),
            Err(GridError::BranchCountMismatch { nodes: 2, branches: 0 })
        ));
        // cycle: three nodes, edges 1-2, 2-1
        let cyc = r#"{
          "base": {"kv": 12.66, "mva": 1.0}, "substation": 1,
          "nodes": [{"id":1,"u_min_pu":0.95,"u_max_pu":1.05},
                    {"id":2,"u_min_pu":0.95,"u_max_pu":1.05},
                    {"id":3,"u_min_pu":0.95,"u_max_pu":1.05}],
          "branches": [{"from":1,"to":2,"r_pu":0.01,"x_pu":0.01,"i_max_pu":1.0},
                       {"from":2,"to":1,"r_pu":0.01,"x_pu":0.01,"i_max_pu":1.0}]
        }"#;
        assert!(matches!(
            parse_case(cyc),
            Err(GridError::CyclicTopology { .. })
        ));
        // unknown substation
        let mut c: serde_json::Value = serde_json::from_str(&two_bus_text("")).unwrap();
        c["substation"] = serde_json::json!(9);
        assert!(matches!(
            parse_case(&c.to_string()),
            Err(GridError::UnknownSubstation(9))
        ));
        // missing impedance is distinct from a parse error
        let mut c: serde_json::Value = serde_json::from_str(&two_bus_text("")).unwrap();
        c["branches"][0].as_object_mut().unwrap().remove("r_pu");
        assert!(matches!(
            parse_case(&c.to_string()),
            Err(GridError::MissingImpedance { from: 1, to: 2 })
        ));
        // negative resistance
        let mut c: serde_json::Value = serde_json::from_str(&two_bus_text("")).unwrap();
        c["branches"][0]["r_pu"] = serde_json::json!(-0.05);
        assert!(matches!(
            parse_case(&c.to_string()),
            Err(GridError::InvalidImpedance { .. })
        ));
        // unknown endpoint
        let mut c: serde_json::Value = serde_json::from_str(&two_bus_text("")).unwrap();
        c["branches"][0]["to"] = serde_json::json!(7);
        assert!(matches!(
            parse_case(&c.to_string()),
            Err(GridError::UnknownBranchEndpoint { from: 1, to: 7 })
        ));
        // inverted voltage band
        let mut c: serde_json::Value = serde_json::from_str(&two_bus_text("")).unwrap();
        c["nodes"][1]["u_min_pu"] = serde_json::json!(1.2);
        assert!(matches!(
            parse_case(&c.to_string()),
            Err(GridError::InvalidVoltageBand { id: 2, .. })
        ));
        // duplicate node id
        let mut c: serde_json::Value = serde_json::from_str(&two_bus_text("")).unwrap();
        c["nodes"][1]["id"] = serde_json::json!(1);
        assert!(matches!(
            parse_case(&c.to_string()),
            Err(GridError::DuplicateNode(1))
        ));
    }

    #[test]
    fn residual_and_gap_vanish_on_exact_state() {
        let case = two_bus_case();
        let state = two_bus_state();
        assert!(distflow_residual(&case, &state, 0, 0).unwrap().abs() < 1e-12);
        assert!(cone_gap(&case, &state, 0, 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn residual_flags_exactly_the_perturbed_branch_period() {
        let case = two_bus_case();
        let mut state = two_bus_state();
        // widen to two periods, second identical
        state.p_flow_pu.push(state.p_flow_pu[0].clone());
        state.q_flow_pu.push(state.q_flow_pu[0].clone());
        state.i_sq_pu.push(state.i_sq_pu[0].clone());
        state.u_sq_pu.push(state.u_sq_pu[0].clone());
        state.p_curt_pu.push(state.p_curt_pu[0].clone());
        state.q_curt_pu.push(state.q_curt_pu[0].clone());
        // perturb period 1 receiving voltage
        state.u_sq_pu[1][1] += 0.01;
        assert!(distflow_residual(&case, &state, 0, 0).unwrap().abs() < 1e-12);
        assert_relative_eq!(
            distflow_residual(&case, &state, 0, 1).unwrap(),
            -0.01,
            max_relative = 1e-9
        );
    }

    #[test]
    fn cone_gap_matches_frozen_example_and_slack_direction() {
        let case = two_bus_case();
        // P = Q = 1, U = 4, I = 1: gap is 5 - sqrt(17)
        let state = NetworkState {
            p_flow_pu: vec![vec![1.0]],
            q_flow_pu: vec![vec![1.0]],
            i_sq_pu: vec![vec![1.0]],
            u_sq_pu: vec![vec![4.0, 1.0]],
            p_grid_pu: vec![1.0],
            q_grid_pu: vec![1.0],
            p_curt_pu: vec![vec![0.0, 0.0]],
            q_curt_pu: vec![vec![0.0, 0.0]],
        };
        assert_relative_eq!(
            cone_gap(&case, &state, 0, 0).unwrap(),
            0.8768943743823394,
            max_relative = 1e-12
        );
        // inflating current above the exact value opens the gap
        let mut slack = two_bus_state();
        slack.i_sq_pu[0][0] += 0.1;
        assert!(cone_gap(&case, &slack, 0, 0).unwrap() > 0.0);
    }

    #[test]
    fn index_guards_reject_out_of_range_queries() {
        let case = two_bus_case();
        let state = two_bus_state();
        assert!(matches!(
            distflow_residual(&case, &state, 1, 0),
            Err(GridError::BranchOutOfRange { .. })
        ));
        assert!(matches!(
            cone_gap(&case, &state, 0, 3),
            Err(GridError::PeriodOutOfRange { .. })
        ));
    }

    #[test]
    fn state_summaries_cover_voltages_and_curtailment() {
        let state = two_bus_state();
        assert_relative_eq!(state.min_voltage_pu(), 0.9534409722095697f64.sqrt());
        assert_relative_eq!(state.max_voltage_pu(), 1.0);
        let mut with_curt = state.clone();
        with_curt.p_curt_pu[0][1] = 0.05;
        // 0.05 p.u. on a 1000 kW base for one hour
        assert_relative_eq!(with_curt.total_curtailed_kwh(1000.0, 1.0), 50.0);
    }
}
