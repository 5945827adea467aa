//! Physical resource models and their mapping onto generic energy storage.
//!
//! Every flexible resource is described in its native terms
//! ([`PhysicalParams`]) and converted by [`transform_to_ges`] into one common
//! parameter set ([`GesParams`]) obeying a single first-order state equation:
//!
//! ```text
//! SOC[t+1] = (1 - eps) * SOC[t]
//!          + eta_ch * P_ch[t] * dt / S
//!          - P_dis[t] * dt / (S * eta_dis)
//!          + eps * (SOC[0] - beta[t])
//! ```
//!
//! Batteries and EV chargers map onto this form directly. Thermostatically
//! controlled loads (air conditioners) map through a first-order building
//! thermal model: state of charge is the normalized distance of indoor
//! temperature from the hot end of the comfort band, charging is running the
//! compressor above its setpoint-tracking baseline, discharging is backing
//! off from it, and `beta[t]` carries the pull of outdoor temperature
//! relative to its value at the start of the horizon.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by unit-model construction, validation, and simulation.
#[derive(Debug, Error)]
pub enum UnitError {
    #[error("thermal mass R*C must be positive, got {0}")]
    NonPositiveThermalMass(f64),
    #[error("comfort band is degenerate: min {min} >= max {max} degC")]
    DegenerateComfortBand { min: f64, max: f64 },
    #[error("outdoor series has {got} samples, horizon needs {expected}")]
    OutdoorSeriesLength { expected: usize, got: usize },
    #[error("comfort backoff {0} must lie in [0, 0.5)")]
    BackoffOutOfRange(f64),
    #[error("parameter {name} = {value} is invalid: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("series {name} has {got} entries, horizon needs {expected}")]
    SeriesLength {
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("period index {t} out of range for horizon of {periods} periods")]
    PeriodOutOfRange { t: usize, periods: usize },
    #[error("scheduled power must be nonnegative, got charge {p_ch} / discharge {p_dis} kW")]
    NegativeSchedule { p_ch: f64, p_dis: f64 },
}

/// Uniform dispatch horizon: `periods` steps of `dt_hours` each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    /// Number of dispatch periods T.
    pub periods: usize,
    /// Length of one period in hours.
    pub dt_hours: f64,
}

impl Horizon {
    pub fn new(periods: usize, dt_hours: f64) -> Result<Self, UnitError> {
        if periods == 0 {
            return Err(UnitError::InvalidParameter {
                name: "periods",
                value: 0.0,
                reason: "horizon must contain at least one period",
            });
        }
        if !(dt_hours > 0.0) {
            return Err(UnitError::InvalidParameter {
                name: "dt_hours",
                value: dt_hours,
                reason: "period length must be positive",
            });
        }
        Ok(Self { periods, dt_hours })
    }

    /// One-day horizon in hourly steps.
    pub fn hourly_day() -> Self {
        Self {
            periods: 24,
            dt_hours: 1.0,
        }
    }
}

/// Resource class of a flexible unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitKind {
    /// Battery energy storage.
    Bes,
    /// Inverter (variable-speed) air conditioner.
    Iva,
    /// Fixed-frequency air conditioner, duty-cycle averaged.
    Ffa,
    /// Electric vehicle charger with vehicle battery.
    Ev,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::Bes => "bes",
            UnitKind::Iva => "iva",
            UnitKind::Ffa => "ffa",
            UnitKind::Ev => "ev",
        }
    }
}

impl std::str::FromStr for UnitKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bes" => Ok(UnitKind::Bes),
            "iva" => Ok(UnitKind::Iva),
            "ffa" => Ok(UnitKind::Ffa),
            "ev" => Ok(UnitKind::Ev),
            other => Err(format!("unknown unit kind `{other}`")),
        }
    }
}

/// Native parameters of a thermostatically controlled load (air conditioner)
/// under a first-order equivalent-thermal-parameter building model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TclParams {
    /// Equivalent thermal capacitance C, kWh/degC.
    pub thermal_capacity_kwh_per_degc: f64,
    /// Equivalent thermal resistance R, degC/kW.
    pub thermal_resistance_degc_per_kw: f64,
    /// Electric-to-thermal conversion efficiency (COP-like factor).
    pub conversion_efficiency: f64,
    /// Lower edge of the indoor comfort band, degC.
    pub comfort_min_degc: f64,
    /// Upper edge of the indoor comfort band, degC.
    pub comfort_max_degc: f64,
    /// Thermostat setpoint the baseline power tracks, degC.
    pub setpoint_degc: f64,
    /// Compressor electrical rating, kW.
    pub rated_power_kw: f64,
    /// Indoor temperature at the start of the horizon, degC.
    pub initial_indoor_degc: f64,
    /// Hygiene margin keeping the storage band strictly inside the comfort
    /// band, as a fraction of the band width; must lie in [0, 0.5).
    pub comfort_backoff: f64,
    /// Outdoor temperature forecast over the horizon, degC.
    pub outdoor_degc: Vec<f64>,
}

/// Native parameters of a resource that is already a storage device
/// (battery or EV charger + vehicle battery).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageParams {
    /// Usable energy capacity S, kWh.
    pub capacity_kwh: f64,
    /// Maximum charging power, kW.
    pub p_ch_max_kw: f64,
    /// Maximum discharging power, kW.
    pub p_dis_max_kw: f64,
    /// Charging efficiency in (0, 1].
    pub eta_ch: f64,
    /// Discharging efficiency in (0, 1].
    pub eta_dis: f64,
    /// Per-period self-discharge fraction in [0, 1).
    pub self_discharge: f64,
    /// Lowest admissible state of charge.
    pub soc_min: f64,
    /// Highest admissible state of charge.
    pub soc_max: f64,
    /// State of charge at the start of the horizon.
    pub soc_init: f64,
    /// Ramp-up limit on net output, kW per hour.
    pub ramp_up_kw_per_h: Option<f64>,
    /// Ramp-down limit on net output, kW per hour.
    pub ramp_down_kw_per_h: Option<f64>,
}

/// Native description of one flexible unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PhysicalParams {
    Bes(StorageParams),
    Ev(StorageParams),
    Iva(TclParams),
    Ffa(TclParams),
}

impl PhysicalParams {
    pub fn kind(&self) -> UnitKind {
        match self {
            PhysicalParams::Bes(_) => UnitKind::Bes,
            PhysicalParams::Ev(_) => UnitKind::Ev,
            PhysicalParams::Iva(_) => UnitKind::Iva,
            PhysicalParams::Ffa(_) => UnitKind::Ffa,
        }
    }
}

/// Unified generic-energy-storage parameter set over one horizon.
///
/// Per-period vectors all have length T. `soc_min[t]` / `soc_max[t]` bound
/// the state reached at the *end* of period `t` (SOC index `t+1`), and
/// `ambient_bias[t]` is the `beta` consumed by the step from `t` to `t+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GesParams {
    /// Resource class this parameter set was derived from.
    pub kind: UnitKind,
    /// Energy capacity S, kWh.
    pub capacity_kwh: f64,
    /// Charging power ceiling per period, kW.
    pub p_ch_max_kw: Vec<f64>,
    /// Discharging power ceiling per period, kW.
    pub p_dis_max_kw: Vec<f64>,
    /// Lower state-of-charge bound per period (on the end-of-period state).
    pub soc_min: Vec<f64>,
    /// Upper state-of-charge bound per period (on the end-of-period state).
    pub soc_max: Vec<f64>,
    /// Charging efficiency in (0, 1].
    pub eta_ch: f64,
    /// Discharging efficiency in (0, 1].
    pub eta_dis: f64,
    /// Self-discharge fraction per period, eps in [0, 1).
    pub self_discharge: f64,
    /// Ambient pull beta per period; the idle state decays toward
    /// `soc_init - ambient_bias[t]`.
    pub ambient_bias: Vec<f64>,
    /// State of charge at the start of the horizon.
    pub soc_init: f64,
    /// Ramp-up limit on net output (discharge minus charge), kW per hour.
    pub ramp_up_kw_per_h: Option<f64>,
    /// Ramp-down limit on net output, kW per hour.
    pub ramp_down_kw_per_h: Option<f64>,
    /// Power factor for reactive support; `None` disables reactive dispatch.
    pub power_factor: Option<f64>,
}

impl GesParams {
    /// Checks internal consistency against a horizon.
    pub fn validate(&self, horizon: &Horizon) -> Result<(), UnitError> {
        let t = horizon.periods;
        for (name, len) in [
            ("p_ch_max_kw", self.p_ch_max_kw.len()),
            ("p_dis_max_kw", self.p_dis_max_kw.len()),
            ("soc_min", self.soc_min.len()),
            ("soc_max", self.soc_max.len()),
            ("ambient_bias", self.ambient_bias.len()),
        ] {
            if len != t {
                return Err(UnitError::SeriesLength {
                    name,
                    expected: t,
                    got: len,
                });
            }
        }
        if !(self.capacity_kwh > 0.0) {
            return Err(UnitError::InvalidParameter {
                name: "capacity_kwh",
                value: self.capacity_kwh,
                reason: "capacity must be positive",
            });
        }
        for (name, eta) in [("eta_ch", self.eta_ch), ("eta_dis", self.eta_dis)] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(UnitError::InvalidParameter {
                    name,
                    value: eta,
                    reason: "efficiency must lie in (0, 1]",
                });
            }
        }
        if !(0.0..1.0).contains(&self.self_discharge) {
            return Err(UnitError::InvalidParameter {
                name: "self_discharge",
                value: self.self_discharge,
                reason: "self-discharge must lie in [0, 1)",
            });
        }
        if !(0.0..=1.0).contains(&self.soc_init) {
            return Err(UnitError::InvalidParameter {
                name: "soc_init",
                value: self.soc_init,
                reason: "initial state of charge must lie in [0, 1]",
            });
        }
        for k in 0..t {
            let (lo, hi) = (self.soc_min[k], self.soc_max[k]);
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(UnitError::InvalidParameter {
                    name: "soc bounds",
                    value: lo,
                    reason: "bounds must satisfy 0 <= min <= max <= 1",
                });
            }
            if self.p_ch_max_kw[k] < 0.0 || self.p_dis_max_kw[k] < 0.0 {
                return Err(UnitError::InvalidParameter {
                    name: "power ceiling",
                    value: self.p_ch_max_kw[k].min(self.p_dis_max_kw[k]),
                    reason: "power ceilings must be nonnegative",
                });
            }
        }
        for ramp in [self.ramp_up_kw_per_h, self.ramp_down_kw_per_h]
            .into_iter()
            .flatten()
        {
            if !(ramp > 0.0) {
                return Err(UnitError::InvalidParameter {
                    name: "ramp",
                    value: ramp,
                    reason: "ramp limits must be positive when present",
                });
            }
        }
        if let Some(pf) = self.power_factor {
            if !(pf > 0.0 && pf <= 1.0) {
                return Err(UnitError::InvalidParameter {
                    name: "power_factor",
                    value: pf,
                    reason: "power factor must lie in (0, 1]",
                });
            }
        }
        Ok(())
    }
}

/// Dispatch decisions and resulting trajectory for one unit.
///
/// `soc` has length T+1: `soc[0]` is the initial state and `soc[t+1]` the
/// state after period `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSchedule {
    /// Charging power per period, kW (nonnegative).
    pub p_ch_kw: Vec<f64>,
    /// Discharging power per period, kW (nonnegative).
    pub p_dis_kw: Vec<f64>,
    /// State-of-charge trajectory, length T+1.
    pub soc: Vec<f64>,
}

impl UnitSchedule {
    /// All-idle schedule over a horizon, starting from `soc_init`.
    pub fn idle(horizon: &Horizon, soc_init: f64) -> Self {
        Self {
            p_ch_kw: vec![0.0; horizon.periods],
            p_dis_kw: vec![0.0; horizon.periods],
            soc: vec![soc_init; horizon.periods + 1],
        }
    }

    /// Largest simultaneous charge*discharge product, kW^2.
    ///
    /// Simultaneity is penalized by strictly positive incentive prices rather
    /// than forbidden outright, so this is a diagnostic, not an invariant.
    pub fn max_complementarity_kw2(&self) -> f64 {
        self.p_ch_kw
            .iter()
            .zip(&self.p_dis_kw)
            .map(|(c, d)| c * d)
            .fold(0.0, f64::max)
    }

    /// Total energy moved (charge plus discharge), kWh.
    pub fn throughput_kwh(&self, horizon: &Horizon) -> f64 {
        self.p_ch_kw
            .iter()
            .zip(&self.p_dis_kw)
            .map(|(c, d)| (c + d) * horizon.dt_hours)
            .sum()
    }
}

/// Price and incentive schedule over one horizon, RMB per kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSchedule {
    /// Wholesale energy price at the substation, per period.
    pub grid_rmb_per_kwh: Vec<f64>,
    /// Incentive paid per kWh charged, per period.
    pub charge_rmb_per_kwh: Vec<f64>,
    /// Incentive paid per kWh discharged, per period.
    pub discharge_rmb_per_kwh: Vec<f64>,
    /// Penalty per kWh of curtailed load.
    pub curtailment_rmb_per_kwh: f64,
}

impl PriceSchedule {
    pub fn validate(&self, horizon: &Horizon) -> Result<(), UnitError> {
        let t = horizon.periods;
        for (name, len) in [
            ("grid_rmb_per_kwh", self.grid_rmb_per_kwh.len()),
            ("charge_rmb_per_kwh", self.charge_rmb_per_kwh.len()),
            ("discharge_rmb_per_kwh", self.discharge_rmb_per_kwh.len()),
        ] {
            if len != t {
                return Err(UnitError::SeriesLength {
                    name,
                    expected: t,
                    got: len,
                });
            }
        }
        let all_finite = self
            .grid_rmb_per_kwh
            .iter()
            .chain(&self.charge_rmb_per_kwh)
            .chain(&self.discharge_rmb_per_kwh)
            .all(|p| p.is_finite() && *p >= 0.0);
        if !all_finite || !(self.curtailment_rmb_per_kwh.is_finite()
            && self.curtailment_rmb_per_kwh >= 0.0)
        {
            return Err(UnitError::InvalidParameter {
                name: "prices",
                value: f64::NAN,
                reason: "all prices must be finite and nonnegative",
            });
        }
        Ok(())
    }
}

/// Converts a native resource description into generic-energy-storage form.
///
/// Batteries and EV chargers carry their parameters over field by field,
/// broadcasting scalar power limits across the horizon. Air conditioners
/// (both kinds) are discretized from the first-order thermal model:
///
/// * `eps = 1 - exp(-dt / (R * C))`
/// * `S = dt * (T_max - T_min) / (eta * R * eps)`
/// * `SOC_init = (T_max - T_initial) / (T_max - T_min)`
/// * `beta[t] = (T_out[(t+1) mod T] - T_out[0]) / (T_max - T_min)`
/// * baseline compressor power `P_base = clamp((T_out[0] - T_set) / (eta * R), 0, P_rated)`,
///   giving ceilings `p_dis_max = P_base` and `p_ch_max = P_rated - P_base`.
///
/// Charge and discharge are deviations from the *constant* baseline sized at
/// the reference ambient `T_out[0]`; the ambient trajectory relative to that
/// reference is carried entirely by `beta[t]`, which keeps the power
/// ceilings and the drift term in one consistent frame. The comfort band
/// maps onto SOC `[backoff, 1 - backoff]`; charge and discharge efficiencies
/// are unity and ramps are absent for thermal units.
pub fn transform_to_ges(
    params: &PhysicalParams,
    horizon: &Horizon,
) -> Result<GesParams, UnitError> {
    let t = horizon.periods;
    let ges = match params {
        PhysicalParams::Bes(s) | PhysicalParams::Ev(s) => GesParams {
            kind: params.kind(),
            capacity_kwh: s.capacity_kwh,
            p_ch_max_kw: vec![s.p_ch_max_kw; t],
            p_dis_max_kw: vec![s.p_dis_max_kw; t],
            soc_min: vec![s.soc_min; t],
            soc_max: vec![s.soc_max; t],
            eta_ch: s.eta_ch,
            eta_dis: s.eta_dis,
            self_discharge: s.self_discharge,
            ambient_bias: vec![0.0; t],
            soc_init: s.soc_init,
            ramp_up_kw_per_h: s.ramp_up_kw_per_h,
            ramp_down_kw_per_h: s.ramp_down_kw_per_h,
            power_factor: None,
        },
        PhysicalParams::Iva(tcl) | PhysicalParams::Ffa(tcl) => {
            let rc = tcl.thermal_resistance_degc_per_kw * tcl.thermal_capacity_kwh_per_degc;
            if !(rc > 0.0) {
                return Err(UnitError::NonPositiveThermalMass(rc));
            }
            let width = tcl.comfort_max_degc - tcl.comfort_min_degc;
            if !(width > 0.0) {
                return Err(UnitError::DegenerateComfortBand {
                    min: tcl.comfort_min_degc,
                    max: tcl.comfort_max_degc,
                });
            }
            if tcl.outdoor_degc.len() != t {
                return Err(UnitError::OutdoorSeriesLength {
                    expected: t,
                    got: tcl.outdoor_degc.len(),
                });
            }
            if !(0.0..0.5).contains(&tcl.comfort_backoff) {
                return Err(UnitError::BackoffOutOfRange(tcl.comfort_backoff));
            }
            if !(tcl.conversion_efficiency > 0.0) {
                return Err(UnitError::InvalidParameter {
                    name: "conversion_efficiency",
                    value: tcl.conversion_efficiency,
                    reason: "must be positive",
                });
            }
            if !(tcl.rated_power_kw > 0.0) {
                return Err(UnitError::InvalidParameter {
                    name: "rated_power_kw",
                    value: tcl.rated_power_kw,
                    reason: "must be positive",
                });
            }
            let eps = 1.0 - (-horizon.dt_hours / rc).exp();
            let eta = tcl.conversion_efficiency;
            let r = tcl.thermal_resistance_degc_per_kw;
            let capacity = horizon.dt_hours * width / (eta * r * eps);
            let soc_init = (tcl.comfort_max_degc - tcl.initial_indoor_degc) / width;
            if !(0.0..=1.0).contains(&soc_init) {
                return Err(UnitError::InvalidParameter {
                    name: "initial_indoor_degc",
                    value: tcl.initial_indoor_degc,
                    reason: "initial indoor temperature must lie inside the comfort band",
                });
            }
            let t_ref = tcl.outdoor_degc[0];
            let ambient_bias: Vec<f64> = (0..t)
                .map(|k| (tcl.outdoor_degc[(k + 1) % t] - t_ref) / width)
                .collect();
            let baseline =
                ((t_ref - tcl.setpoint_degc) / (eta * r)).clamp(0.0, tcl.rated_power_kw);
            GesParams {
                kind: params.kind(),
                capacity_kwh: capacity,
                p_ch_max_kw: vec![tcl.rated_power_kw - baseline; t],
                p_dis_max_kw: vec![baseline; t],
                soc_min: vec![tcl.comfort_backoff; t],
                soc_max: vec![1.0 - tcl.comfort_backoff; t],
                eta_ch: 1.0,
                eta_dis: 1.0,
                self_discharge: eps,
                ambient_bias,
                soc_init,
                ramp_up_kw_per_h: None,
                ramp_down_kw_per_h: None,
                power_factor: None,
            }
        }
    };
    ges.validate(horizon)?;
    Ok(ges)
}

/// Advances the state of charge across period `t` under the common
/// first-order storage equation.
pub fn soc_step(
    params: &GesParams,
    horizon: &Horizon,
    t: usize,
    soc: f64,
    p_ch_kw: f64,
    p_dis_kw: f64,
) -> Result<f64, UnitError> {
    if t >= horizon.periods {
        return Err(UnitError::PeriodOutOfRange {
            t,
            periods: horizon.periods,
        });
    }
    if p_ch_kw < 0.0 || p_dis_kw < 0.0 {
        return Err(UnitError::NegativeSchedule {
            p_ch: p_ch_kw,
            p_dis: p_dis_kw,
        });
    }
    if !(params.capacity_kwh > 0.0) {
        return Err(UnitError::InvalidParameter {
            name: "capacity_kwh",
            value: params.capacity_kwh,
            reason: "capacity must be positive",
        });
    }
    if !(params.eta_dis > 0.0) {
        return Err(UnitError::InvalidParameter {
            name: "eta_dis",
            value: params.eta_dis,
            reason: "discharge efficiency must be positive",
        });
    }
    let eps = params.self_discharge;
    let s = params.capacity_kwh;
    let dt = horizon.dt_hours;
    Ok((1.0 - eps) * soc + params.eta_ch * p_ch_kw * dt / s - p_dis_kw * dt / (s * params.eta_dis)
        + eps * (params.soc_init - params.ambient_bias[t]))
}

/// Outcome of simulating a fixed schedule against unit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    /// Recomputed state-of-charge trajectory, length T+1.
    pub soc: Vec<f64>,
    /// Worst violation of the per-period bounds (0 when none).
    pub max_bound_violation: f64,
    /// `|SOC[T] - SOC[0]|`.
    pub terminal_gap: f64,
    /// True when no bound violation exceeds the tolerance.
    pub bounds_ok: bool,
    /// True when the trajectory returns to its initial state within tolerance.
    pub terminal_ok: bool,
}

/// Recomputes the trajectory implied by a schedule's powers and checks the
/// state-of-charge bounds and the terminal condition `SOC[T] = SOC[0]`
/// within `tol`.
pub fn simulate_schedule(
    params: &GesParams,
    horizon: &Horizon,
    schedule: &UnitSchedule,
    tol: f64,
) -> Result<SimulationReport, UnitError> {
    params.validate(horizon)?;
    let t_len = horizon.periods;
    for (name, len) in [
        ("p_ch_kw", schedule.p_ch_kw.len()),
        ("p_dis_kw", schedule.p_dis_kw.len()),
    ] {
        if len != t_len {
            return Err(UnitError::SeriesLength {
                name,
                expected: t_len,
                got: len,
            });
        }
    }
    let mut soc = Vec::with_capacity(t_len + 1);
    soc.push(params.soc_init);
    let mut max_violation: f64 = 0.0;
    for t in 0..t_len {
        let next = soc_step(
            params,
            horizon,
            t,
            soc[t],
            schedule.p_ch_kw[t],
            schedule.p_dis_kw[t],
        )?;
        let below = (params.soc_min[t] - next).max(0.0);
        let above = (next - params.soc_max[t]).max(0.0);
        max_violation = max_violation.max(below).max(above);
        soc.push(next);
    }
    let terminal_gap = (soc[t_len] - soc[0]).abs();
    Ok(SimulationReport {
        max_bound_violation: max_violation,
        terminal_gap,
        bounds_ok: max_violation <= tol,
        terminal_ok: terminal_gap <= tol,
        soc,
    })
}

/// Total incentive payout for a fleet of schedules:
/// `sum_units sum_t (P_dis * c_dis[t] + P_ch * c_ch[t]) * dt`.
pub fn incentive_cost(
    schedules: &[UnitSchedule],
    prices: &PriceSchedule,
    horizon: &Horizon,
) -> Result<f64, UnitError> {
    prices.validate(horizon)?;
    let mut total = 0.0;
    for sched in schedules {
        for (name, len) in [
            ("p_ch_kw", sched.p_ch_kw.len()),
            ("p_dis_kw", sched.p_dis_kw.len()),
        ] {
            if len != horizon.periods {
                return Err(UnitError::SeriesLength {
                    name,
                    expected: horizon.periods,
                    got: len,
                });
            }
        }
        for t in 0..horizon.periods {
            total += (sched.p_dis_kw[t] * prices.discharge_rmb_per_kwh[t]
                + sched.p_ch_kw[t] * prices.charge_rmb_per_kwh[t])
                * horizon.dt_hours;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_horizon(periods: usize) -> Horizon {
        Horizon::new(periods, 1.0).unwrap()
    }

    fn plain_storage() -> StorageParams {
        StorageParams {
            capacity_kwh: 10.0,
            p_ch_max_kw: 4.0,
            p_dis_max_kw: 5.0,
            eta_ch: 0.95,
            eta_dis: 0.9,
            self_discharge: 0.01,
            soc_min: 0.1,
            soc_max: 0.9,
            soc_init: 0.5,
            ramp_up_kw_per_h: Some(3.0),
            ramp_down_kw_per_h: Some(2.5),
        }
    }

    fn plain_ges(periods: usize) -> GesParams {
        transform_to_ges(&PhysicalParams::Bes(plain_storage()), &test_horizon(periods)).unwrap()
    }

    #[test]
    fn storage_transform_round_trips_every_field() {
        let s = plain_storage();
        let horizon = test_horizon(4);
        for phys in [
            PhysicalParams::Bes(s.clone()),
            PhysicalParams::Ev(s.clone()),
        ] {
            let g = transform_to_ges(&phys, &horizon).unwrap();
            assert_eq!(g.kind, phys.kind());
            assert_eq!(g.capacity_kwh, s.capacity_kwh);
            assert_eq!(g.p_ch_max_kw, vec![s.p_ch_max_kw; 4]);
            assert_eq!(g.p_dis_max_kw, vec![s.p_dis_max_kw; 4]);
            assert_eq!(g.soc_min, vec![s.soc_min; 4]);
            assert_eq!(g.soc_max, vec![s.soc_max; 4]);
            assert_eq!(g.eta_ch, s.eta_ch);
            assert_eq!(g.eta_dis, s.eta_dis);
            assert_eq!(g.self_discharge, s.self_discharge);
            assert_eq!(g.ambient_bias, vec![0.0; 4]);
            assert_eq!(g.soc_init, s.soc_init);
            assert_eq!(g.ramp_up_kw_per_h, Some(3.0));
            assert_eq!(g.ramp_down_kw_per_h, Some(2.5));
        }
    }

    fn sample_tcl() -> TclParams {
        TclParams {
            thermal_capacity_kwh_per_degc: 1.0,
            thermal_resistance_degc_per_kw: 2.0,
            conversion_efficiency: 0.9,
            comfort_min_degc: 23.0,
            comfort_max_degc: 25.0,
            setpoint_degc: 24.0,
            rated_power_kw: 6.0,
            initial_indoor_degc: 24.0,
            comfort_backoff: 0.05,
            outdoor_degc: vec![26.0, 29.0, 31.0, 27.0],
        }
    }

    #[test]
    fn tcl_transform_matches_hand_computed_values() {
        let horizon = test_horizon(4);
        let g = transform_to_ges(&PhysicalParams::Iva(sample_tcl()), &horizon).unwrap();
        // eps = 1 - exp(-1 / (2 * 1))
        assert_relative_eq!(g.self_discharge, 0.3934693402873666, max_relative = 1e-12);
        // S = 1 * 2 / (0.9 * 2 * eps)
        assert_relative_eq!(g.capacity_kwh, 2.8238823139297757, max_relative = 1e-12);
        // SOC_init = (25 - 24) / 2
        assert_relative_eq!(g.soc_init, 0.5, max_relative = 1e-12);
        // beta references T_out[0] = 26 and wraps cyclically
        let beta: Vec<f64> = vec![1.5, 2.5, 0.5, 0.0];
        for (have, want) in g.ambient_bias.iter().zip(&beta) {
            assert_relative_eq!(have, want, max_relative = 1e-12, epsilon = 1e-12);
        }
        // constant baseline at the reference ambient: (26 - 24) / (0.9 * 2)
        for t in 0..4 {
            assert_relative_eq!(g.p_dis_max_kw[t], 1.1111111111111112, max_relative = 1e-12);
            assert_relative_eq!(g.p_ch_max_kw[t], 4.888888888888889, max_relative = 1e-12);
        }
        assert_eq!(g.soc_min, vec![0.05; 4]);
        assert_eq!(g.soc_max, vec![0.95; 4]);
        assert_eq!(g.eta_ch, 1.0);
        assert_eq!(g.eta_dis, 1.0);
        assert!(g.ramp_up_kw_per_h.is_none());
        // fixed-frequency units share the averaged model
        let f = transform_to_ges(&PhysicalParams::Ffa(sample_tcl()), &horizon).unwrap();
        assert_eq!(f.capacity_kwh, g.capacity_kwh);
        assert_eq!(f.kind, UnitKind::Ffa);
    }

    #[test]
    fn tcl_transform_rejects_bad_inputs() {
        let horizon = test_horizon(4);
        let mut short = sample_tcl();
        short.outdoor_degc.pop();
        assert!(matches!(
            transform_to_ges(&PhysicalParams::Iva(short), &horizon),
            Err(UnitError::OutdoorSeriesLength { expected: 4, got: 3 })
        ));
        let mut flat = sample_tcl();
        flat.comfort_min_degc = flat.comfort_max_degc;
        assert!(matches!(
            transform_to_ges(&PhysicalParams::Iva(flat), &horizon),
            Err(UnitError::DegenerateComfortBand { .. })
        ));
        let mut inert = sample_tcl();
        inert.thermal_capacity_kwh_per_degc = 0.0;
        assert!(matches!(
            transform_to_ges(&PhysicalParams::Iva(inert), &horizon),
            Err(UnitError::NonPositiveThermalMass(_))
        ));
        let mut wide = sample_tcl();
        wide.comfort_backoff = 0.5;
        assert!(matches!(
            transform_to_ges(&PhysicalParams::Iva(wide), &horizon),
            Err(UnitError::BackoffOutOfRange(_))
        ));
    }

    #[test]
    fn soc_step_matches_worked_examples() {
        let horizon = test_horizon(1);
        // lossless charge: eps=0, eta_ch=1, S=10, p_ch=2 -> 0.5 + 0.2
        let mut g = plain_ges(1);
        g.self_discharge = 0.0;
        g.eta_ch = 1.0;
        assert_relative_eq!(
            soc_step(&g, &horizon, 0, 0.5, 2.0, 0.0).unwrap(),
            0.7,
            max_relative = 1e-12
        );
        // idle decay toward the attractor: eps=0.2, soc_init = beta -> 0.8 * 0.5
        let mut g = plain_ges(1);
        g.self_discharge = 0.2;
        g.ambient_bias = vec![g.soc_init];
        assert_relative_eq!(
            soc_step(&g, &horizon, 0, 0.5, 0.0, 0.0).unwrap(),
            0.4,
            max_relative = 1e-12
        );
        // lossy discharge: eta_dis=0.8, S=10, p_dis=2 -> 0.5 - 0.25
        let mut g = plain_ges(1);
        g.self_discharge = 0.0;
        g.eta_dis = 0.8;
        assert_relative_eq!(
            soc_step(&g, &horizon, 0, 0.5, 0.0, 2.0).unwrap(),
            0.25,
            max_relative = 1e-12
        );
    }

    #[test]
    fn soc_step_rejects_bad_calls() {
        let horizon = test_horizon(2);
        let g = plain_ges(2);
        assert!(matches!(
            soc_step(&g, &horizon, 2, 0.5, 0.0, 0.0),
            Err(UnitError::PeriodOutOfRange { .. })
        ));
        assert!(matches!(
            soc_step(&g, &horizon, 0, 0.5, -1.0, 0.0),
            Err(UnitError::NegativeSchedule { .. })
        ));
    }

    #[test]
    fn incentive_cost_matches_worked_example() {
        // 10 kW discharged for one hour at 0.3 RMB/kWh -> 3 RMB
        let horizon = test_horizon(1);
        let prices = PriceSchedule {
            grid_rmb_per_kwh: vec![0.5],
            charge_rmb_per_kwh: vec![0.3],
            discharge_rmb_per_kwh: vec![0.3],
            curtailment_rmb_per_kwh: 10.0,
        };
        let sched = UnitSchedule {
            p_ch_kw: vec![0.0],
            p_dis_kw: vec![10.0],
            soc: vec![0.5, 0.4],
        };
        let cost = incentive_cost(std::slice::from_ref(&sched), &prices, &horizon).unwrap();
        assert_relative_eq!(cost, 3.0, max_relative = 1e-12);
        // empty fleet costs nothing
        assert_eq!(incentive_cost(&[], &prices, &horizon).unwrap(), 0.0);
    }

    #[test]
    fn simulate_schedule_flags_violations_and_terminal_gap() {
        let horizon = test_horizon(2);
        let mut g = plain_ges(2);
        g.self_discharge = 0.0;
        g.eta_ch = 1.0;
        g.eta_dis = 1.0;
        // charge 4 kW then discharge 4 kW: returns to start, stays in bounds
        let ok = UnitSchedule {
            p_ch_kw: vec![4.0, 0.0],
            p_dis_kw: vec![0.0, 4.0],
            soc: vec![],
        };
        let rep = simulate_schedule(&g, &horizon, &ok, 1e-9).unwrap();
        assert!(rep.bounds_ok && rep.terminal_ok);
        assert_relative_eq!(rep.soc[1], 0.9, max_relative = 1e-12);
        // one-way charge breaches nothing but misses the terminal condition
        let drift = UnitSchedule {
            p_ch_kw: vec![4.0, 0.0],
            p_dis_kw: vec![0.0, 0.0],
            soc: vec![],
        };
        let rep = simulate_schedule(&g, &horizon, &drift, 1e-9).unwrap();
        assert!(!rep.terminal_ok);
        assert_relative_eq!(rep.terminal_gap, 0.4, max_relative = 1e-12);
        // over-charge breaches the upper bound by 0.1
        let hot = UnitSchedule {
            p_ch_kw: vec![5.0, 0.0],
            p_dis_kw: vec![0.0, 5.0],
            soc: vec![],
        };
        let rep = simulate_schedule(&g, &horizon, &hot, 1e-9).unwrap();
        assert!(!rep.bounds_ok);
        assert_relative_eq!(rep.max_bound_violation, 0.1, max_relative = 1e-10);
    }

    proptest! {
        /// With zero self-discharge the step conserves energy exactly:
        /// S * (SOC' - SOC) = eta_ch * P_ch * dt - P_dis * dt / eta_dis.
        #[test]
        fn lossless_step_conserves_energy(
            soc in 0.0f64..1.0,
            p_ch in 0.0f64..10.0,
            p_dis in 0.0f64..10.0,
            eta_ch in 0.5f64..1.0,
            eta_dis in 0.5f64..1.0,
            s in 0.5f64..50.0,
        ) {
            let horizon = test_horizon(1);
            let mut g = plain_ges(1);
            g.self_discharge = 0.0;
            g.eta_ch = eta_ch;
            g.eta_dis = eta_dis;
            g.capacity_kwh = s;
            let next = soc_step(&g, &horizon, 0, soc, p_ch, p_dis).unwrap();
            let lhs = s * (next - soc);
            let rhs = eta_ch * p_ch - p_dis / eta_dis;
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        /// The next state is nondecreasing in charge power and nonincreasing
        /// in discharge power.
        #[test]
        fn step_is_monotone_in_powers(
            soc in 0.0f64..1.0,
            p in 0.0f64..5.0,
            extra in 0.0f64..5.0,
            eps in 0.0f64..0.9,
        ) {
            let horizon = test_horizon(1);
            let mut g = plain_ges(1);
            g.self_discharge = eps;
            let base = soc_step(&g, &horizon, 0, soc, p, 0.0).unwrap();
            let more = soc_step(&g, &horizon, 0, soc, p + extra, 0.0).unwrap();
            prop_assert!(more >= base - 1e-12);
            let base_d = soc_step(&g, &horizon, 0, soc, 0.0, p).unwrap();
            let more_d = soc_step(&g, &horizon, 0, soc, 0.0, p + extra).unwrap();
            prop_assert!(more_d <= base_d + 1e-12);
        }

        /// Idle state decays geometrically toward `soc_init - beta`.
        #[test]
        fn idle_state_decays_toward_attractor(
            soc in 0.0f64..1.0,
            eps in 0.01f64..0.99,
            beta in -0.5f64..0.5,
        ) {
            let horizon = test_horizon(1);
            let mut g = plain_ges(1);
            g.self_discharge = eps;
            g.ambient_bias = vec![beta];
            let attractor = g.soc_init - beta;
            let next = soc_step(&g, &horizon, 0, soc, 0.0, 0.0).unwrap();
            let before = (soc - attractor).abs();
            let after = (next - attractor).abs();
            prop_assert!(after <= before + 1e-12);
            prop_assert!((after - (1.0 - eps) * before).abs() <= 1e-9);
        }

        /// Transformed parameters always validate, and TCL self-discharge
        /// stays strictly inside (0, 1).
        #[test]
        fn tcl_transform_yields_valid_params(
            r in 0.5f64..5.0,
            c in 0.2f64..5.0,
            eta in 0.5f64..1.0,
            rated in 2.0f64..10.0,
            dt in 0.1f64..4.0,
        ) {
            let horizon = Horizon::new(3, dt).unwrap();
            let tcl = TclParams {
                thermal_capacity_kwh_per_degc: c,
                thermal_resistance_degc_per_kw: r,
                conversion_efficiency: eta,
                comfort_min_degc: 23.0,
                comfort_max_degc: 25.0,
                setpoint_degc: 24.0,
                rated_power_kw: rated,
                initial_indoor_degc: 24.0,
                comfort_backoff: 0.05,
                outdoor_degc: vec![27.0, 30.0, 28.0],
            };
            let g = transform_to_ges(&PhysicalParams::Iva(tcl), &horizon).unwrap();
            prop_assert!(g.self_discharge > 0.0 && g.self_discharge < 1.0);
            prop_assert!(g.capacity_kwh > 0.0);
            g.validate(&horizon).unwrap();
        }
    }
}
