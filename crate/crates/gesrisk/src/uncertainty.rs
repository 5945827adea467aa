//! Uncertainty model for generic energy storage: exogenous parameter
//! randomness (EXU) and decision-dependent boundary adjustment (EDU).
//!
//! EXU draws follow truncated-normal marginals plus a Bernoulli availability
//! mask. Factors (`capacity_factor`, power-ceiling factors) act
//! multiplicatively once per realization; offsets (`soc_min_offset`,
//! `soc_max_offset`, `ambient_offset`) act additively and independently per
//! period; efficiency marginals, when present, replace the base value
//! outright. A fully degenerate spec reproduces the base parameters bit for
//! bit, so the deterministic model is the zero-variance special case.
//!
//! EDU shifts the admissible state-of-charge band as a response to how the
//! schedule exercises the unit: incentive prices widen it, accumulated
//! throughput tightens it. The adjustment is affine in the schedule before
//! clipping to [0, 1]; bands that cross after clipping are reported as
//! collapsed, never silently repaired.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::unit::{GesParams, Horizon, PriceSchedule, UnitSchedule};

/// Errors raised by uncertainty specification and sampling.
#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("truncation interval is empty: lo {lo} > hi {hi}")]
    EmptyInterval { lo: f64, hi: f64 },
    #[error("marginal {name}: {reason} (value {value})")]
    InvalidMarginal {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("availability probability {0} must lie in [0, 1]")]
    AvailabilityOutOfRange(f64),
    #[error("boundary coefficient {name} = {value} must be finite and nonnegative")]
    InvalidBoundaryCoefficient { name: &'static str, value: f64 },
    #[error("series {name} has {got} entries, horizon needs {expected}")]
    SeriesLength {
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Unit(#[from] crate::unit::UnitError),
}

/// Truncated normal marginal on `[lo, hi]` with location `mean` and scale
/// `std` of the parent normal. `std == 0` or `lo == hi` denotes a point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormal {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncNormal {
    /// Point mass at `x`.
    pub fn point(x: f64) -> Self {
        Self {
            mean: x,
            std: 0.0,
            lo: x,
            hi: x,
        }
    }

    /// Marginal centered at `mean` with scale `std`, truncated to
    /// `mean ± half_width`.
    pub fn centered(mean: f64, std: f64, half_width: f64) -> Self {
        Self {
            mean,
            std,
            lo: mean - half_width,
            hi: mean + half_width,
        }
    }

    pub fn validate(&self, name: &'static str) -> Result<(), UncertaintyError> {
        if !(self.mean.is_finite() && self.std.is_finite() && self.lo.is_finite() && self.hi.is_finite())
        {
            return Err(UncertaintyError::InvalidMarginal {
                name,
                value: self.mean,
                reason: "all fields must be finite",
            });
        }
        if self.lo > self.hi {
            return Err(UncertaintyError::EmptyInterval {
                lo: self.lo,
                hi: self.hi,
            });
        }
        if self.std < 0.0 {
            return Err(UncertaintyError::InvalidMarginal {
                name,
                value: self.std,
                reason: "scale must be nonnegative",
            });
        }
        if self.mean < self.lo || self.mean > self.hi {
            return Err(UncertaintyError::InvalidMarginal {
                name,
                value: self.mean,
                reason: "location must lie inside the truncation interval",
            });
        }
        Ok(())
    }

    /// True when the marginal carries no randomness.
    pub fn is_degenerate(&self) -> bool {
        self.std == 0.0 || self.lo == self.hi
    }

    fn std_normal() -> Normal {
        Normal::new(0.0, 1.0).expect("standard normal")
    }

    /// Maps a uniform draw in [0, 1] through the truncated inverse CDF.
    /// Strictly increasing in `u` for non-degenerate marginals, which is what
    /// lets scenario extremes be folded on the uniforms alone.
    pub fn quantile(&self, u: f64) -> f64 {
        if self.is_degenerate() {
            return self.mean.clamp(self.lo, self.hi);
        }
        let n = Self::std_normal();
        let a = (self.lo - self.mean) / self.std;
        let b = (self.hi - self.mean) / self.std;
        let (ca, cb) = (n.cdf(a), n.cdf(b));
        let span = cb - ca;
        if span <= 0.0 {
            return self.mean.clamp(self.lo, self.hi);
        }
        let x = self.mean + self.std * n.inverse_cdf(ca + u * span);
        x.clamp(self.lo, self.hi)
    }

    /// Exact mean of the truncated distribution.
    pub fn truncated_mean(&self) -> f64 {
        if self.is_degenerate() {
            return self.mean.clamp(self.lo, self.hi);
        }
        let n = Self::std_normal();
        let a = (self.lo - self.mean) / self.std;
        let b = (self.hi - self.mean) / self.std;
        let z = n.cdf(b) - n.cdf(a);
        if z <= 0.0 {
            return 0.5 * (self.lo + self.hi);
        }
        self.mean + self.std * (n.pdf(a) - n.pdf(b)) / z
    }

    /// Exact variance of the truncated distribution.
    pub fn truncated_variance(&self) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        let n = Self::std_normal();
        let a = (self.lo - self.mean) / self.std;
        let b = (self.hi - self.mean) / self.std;
        let z = n.cdf(b) - n.cdf(a);
        if z <= 0.0 {
            return 0.0;
        }
        let ratio = (a * n.pdf(a) - b * n.pdf(b)) / z;
        let shift = (n.pdf(a) - n.pdf(b)) / z;
        self.std * self.std * (1.0 + ratio - shift * shift)
    }

    /// Draws one sample.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.is_degenerate() {
            return self.mean.clamp(self.lo, self.hi);
        }
        self.quantile(rng.gen::<f64>())
    }
}

/// Exogenous-uncertainty specification for one unit, plus the coefficients
/// of the decision-dependent boundary law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    /// Multiplies the energy capacity (degradation / rating error).
    pub capacity_factor: TruncNormal,
    /// Multiplies the whole charging-ceiling series.
    pub p_ch_max_factor: TruncNormal,
    /// Multiplies the whole discharging-ceiling series.
    pub p_dis_max_factor: TruncNormal,
    /// Absolute replacement for the charging efficiency; `None` keeps the
    /// base value deterministic.
    pub eta_ch: Option<TruncNormal>,
    /// Absolute replacement for the discharging efficiency.
    pub eta_dis: Option<TruncNormal>,
    /// Additive per-period offset on the lower state-of-charge bound.
    pub soc_min_offset: TruncNormal,
    /// Additive per-period offset on the upper state-of-charge bound.
    pub soc_max_offset: TruncNormal,
    /// Additive per-period offset on the ambient pull `beta`.
    pub ambient_offset: TruncNormal,
    /// Probability the unit responds at all in a given period.
    pub p_avail: f64,
    /// Boundary widening per unit of incentive price (`mu`).
    pub mu_price_expansion: f64,
    /// Boundary tightening per unit of normalized throughput (`nu`).
    pub nu_usage_contraction: f64,
}

impl UncertaintySpec {
    /// Spec with no randomness and no boundary response: realizations equal
    /// the base parameters exactly.
    pub fn degenerate() -> Self {
        Self {
            capacity_factor: TruncNormal::point(1.0),
            p_ch_max_factor: TruncNormal::point(1.0),
            p_dis_max_factor: TruncNormal::point(1.0),
            eta_ch: None,
            eta_dis: None,
            soc_min_offset: TruncNormal::point(0.0),
            soc_max_offset: TruncNormal::point(0.0),
            ambient_offset: TruncNormal::point(0.0),
            p_avail: 1.0,
            mu_price_expansion: 0.0,
            nu_usage_contraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), UncertaintyError> {
        self.capacity_factor.validate("capacity_factor")?;
        if self.capacity_factor.lo <= 0.0 {
            return Err(UncertaintyError::InvalidMarginal {
                name: "capacity_factor",
                value: self.capacity_factor.lo,
                reason: "capacity factor must stay positive",
            });
        }
        self.p_ch_max_factor.validate("p_ch_max_factor")?;
        self.p_dis_max_factor.validate("p_dis_max_factor")?;
        for (name, factor) in [
            ("p_ch_max_factor", &self.p_ch_max_factor),
            ("p_dis_max_factor", &self.p_dis_max_factor),
        ] {
            if factor.lo < 0.0 {
                return Err(UncertaintyError::InvalidMarginal {
                    name,
                    value: factor.lo,
                    reason: "power factors must be nonnegative",
                });
            }
        }
        for (name, marg) in [("eta_ch", &self.eta_ch), ("eta_dis", &self.eta_dis)] {
            if let Some(m) = marg {
                m.validate(name)?;
                if m.lo <= 0.0 || m.hi > 1.0 {
                    return Err(UncertaintyError::InvalidMarginal {
                        name,
                        value: m.lo,
                        reason: "efficiency marginals must stay inside (0, 1]",
                    });
                }
            }
        }
        self.soc_min_offset.validate("soc_min_offset")?;
        self.soc_max_offset.validate("soc_max_offset")?;
        self.ambient_offset.validate("ambient_offset")?;
        if !(0.0..=1.0).contains(&self.p_avail) {
            return Err(UncertaintyError::AvailabilityOutOfRange(self.p_avail));
        }
        for (name, v) in [
            ("mu_price_expansion", self.mu_price_expansion),
            ("nu_usage_contraction", self.nu_usage_contraction),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(UncertaintyError::InvalidBoundaryCoefficient { name, value: v });
            }
        }
        Ok(())
    }

    /// True when no draw carries randomness and availability is certain.
    pub fn is_degenerate(&self) -> bool {
        self.capacity_factor.is_degenerate()
            && self.p_ch_max_factor.is_degenerate()
            && self.p_dis_max_factor.is_degenerate()
            && self.eta_ch.map_or(true, |m| m.is_degenerate())
            && self.eta_dis.map_or(true, |m| m.is_degenerate())
            && self.soc_min_offset.is_degenerate()
            && self.soc_max_offset.is_degenerate()
            && self.ambient_offset.is_degenerate()
            && (self.p_avail >= 1.0 || self.p_avail <= 0.0)
    }
}

/// One concrete realization of a unit's exogenous uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExuRealization {
    /// Realized parameters. State-of-charge bounds may cross after offsets;
    /// crossing is handled downstream as boundary collapse, so this struct
    /// is intentionally not re-validated.
    pub params: GesParams,
    /// Per-period availability mask.
    pub availability: Vec<bool>,
}

/// Identifies one random draw inside a realization walk. Period-indexed
/// slots repeat `horizon.periods` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DrawSlot {
    CapacityFactor,
    PchFactor,
    PdisFactor,
    EtaCh,
    EtaDis,
    SocMinOffset(usize),
    SocMaxOffset(usize),
    AmbientOffset(usize),
    Availability(usize),
}

/// Outcome passed to a walk sink for each slot, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum DrawOutcome {
    /// Uniform in [0, 1) feeding the slot's truncated-normal quantile.
    Uniform(f64),
    /// Slot is deterministic; no random number was consumed.
    Degenerate,
    /// Availability outcome (consumes a draw only when 0 < p_avail < 1).
    Mask(bool),
}

/// Walks every draw slot of one unit realization in a fixed, documented
/// order, consuming randomness only for non-degenerate slots. Both the
/// materializing sampler and the scenario-extreme folder run through this
/// single walk, which is what guarantees they see identical draws.
pub(crate) fn walk_exu_draws<R: Rng, F: FnMut(DrawSlot, DrawOutcome)>(
    spec: &UncertaintySpec,
    horizon: &Horizon,
    rng: &mut R,
    mut sink: F,
) {
    let scalar = |slot: DrawSlot, marg: Option<&TruncNormal>, sink: &mut F, rng: &mut R| {
        match marg {
            Some(m) if !m.is_degenerate() => sink(slot, DrawOutcome::Uniform(rng.gen::<f64>())),
            _ => sink(slot, DrawOutcome::Degenerate),
        }
    };
    scalar(
        DrawSlot::CapacityFactor,
        Some(&spec.capacity_factor),
        &mut sink,
        rng,
    );
    scalar(DrawSlot::PchFactor, Some(&spec.p_ch_max_factor), &mut sink, rng);
    scalar(
        DrawSlot::PdisFactor,
        Some(&spec.p_dis_max_factor),
        &mut sink,
        rng,
    );
    scalar(DrawSlot::EtaCh, spec.eta_ch.as_ref(), &mut sink, rng);
    scalar(DrawSlot::EtaDis, spec.eta_dis.as_ref(), &mut sink, rng);
    for t in 0..horizon.periods {
        scalar(
            DrawSlot::SocMinOffset(t),
            Some(&spec.soc_min_offset),
            &mut sink,
            rng,
        );
    }
    for t in 0..horizon.periods {
        scalar(
            DrawSlot::SocMaxOffset(t),
            Some(&spec.soc_max_offset),
            &mut sink,
            rng,
        );
    }
    for t in 0..horizon.periods {
        scalar(
            DrawSlot::AmbientOffset(t),
            Some(&spec.ambient_offset),
            &mut sink,
            rng,
        );
    }
    for t in 0..horizon.periods {
        let outcome = if spec.p_avail >= 1.0 {
            DrawOutcome::Mask(true)
        } else if spec.p_avail <= 0.0 {
            DrawOutcome::Mask(false)
        } else {
            DrawOutcome::Mask(rng.gen::<f64>() < spec.p_avail)
        };
        sink(DrawSlot::Availability(t), outcome);
    }
}

/// Materializes one realization from a walk over `rng`.
pub(crate) fn sample_exu_with_rng<R: Rng>(
    spec: &UncertaintySpec,
    base: &GesParams,
    horizon: &Horizon,
    rng: &mut R,
) -> ExuRealization {
    let t_len = horizon.periods;
    let mut params = base.clone();
    let mut availability = vec![true; t_len];
    walk_exu_draws(spec, horizon, rng, |slot, outcome| {
        let value = |marg: &TruncNormal| match outcome {
            DrawOutcome::Uniform(u) => marg.quantile(u),
            _ => marg.mean.clamp(marg.lo, marg.hi),
        };
        match slot {
            DrawSlot::CapacityFactor => {
                params.capacity_kwh = base.capacity_kwh * value(&spec.capacity_factor);
            }
            DrawSlot::PchFactor => {
                let f = value(&spec.p_ch_max_factor);
                for (p, b) in params.p_ch_max_kw.iter_mut().zip(&base.p_ch_max_kw) {
                    *p = b * f;
                }
            }
            DrawSlot::PdisFactor => {
                let f = value(&spec.p_dis_max_factor);
                for (p, b) in params.p_dis_max_kw.iter_mut().zip(&base.p_dis_max_kw) {
                    *p = b * f;
                }
            }
            DrawSlot::EtaCh => {
                if let Some(m) = &spec.eta_ch {
                    params.eta_ch = value(m);
                }
            }
            DrawSlot::EtaDis => {
                if let Some(m) = &spec.eta_dis {
                    params.eta_dis = value(m);
                }
            }
            DrawSlot::SocMinOffset(t) => {
                params.soc_min[t] = (base.soc_min[t] + value(&spec.soc_min_offset)).clamp(0.0, 1.0);
            }
            DrawSlot::SocMaxOffset(t) => {
                params.soc_max[t] = (base.soc_max[t] + value(&spec.soc_max_offset)).clamp(0.0, 1.0);
            }
            DrawSlot::AmbientOffset(t) => {
                params.ambient_bias[t] = base.ambient_bias[t] + value(&spec.ambient_offset);
            }
            DrawSlot::Availability(t) => {
                if let DrawOutcome::Mask(m) = outcome {
                    availability[t] = m;
                }
            }
        }
    });
    ExuRealization {
        params,
        availability,
    }
}

/// Draws one exogenous-uncertainty realization for a unit.
///
/// Deterministic in `(spec, base, horizon, seed)`. Degenerate marginals
/// consume no randomness, and a fully degenerate spec returns the base
/// parameters unchanged.
pub fn sample_exu_realization(
    spec: &UncertaintySpec,
    base: &GesParams,
    horizon: &Horizon,
    seed: u64,
) -> Result<ExuRealization, UncertaintyError> {
    spec.validate()?;
    base.validate(horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_exu_with_rng(spec, base, horizon, &mut rng))
}

/// Mean-valued realization: every marginal replaced by its exact truncated
/// mean, availability certain. This is the deterministic parameter set used
/// by mean-value dispatch.
pub fn mean_exu_realization(
    spec: &UncertaintySpec,
    base: &GesParams,
    horizon: &Horizon,
) -> Result<ExuRealization, UncertaintyError> {
    spec.validate()?;
    base.validate(horizon)?;
    let t_len = horizon.periods;
    let mut params = base.clone();
    params.capacity_kwh = base.capacity_kwh * spec.capacity_factor.truncated_mean();
    let fch = spec.p_ch_max_factor.truncated_mean();
    let fdis = spec.p_dis_max_factor.truncated_mean();
    for (p, b) in params.p_ch_max_kw.iter_mut().zip(&base.p_ch_max_kw) {
        *p = b * fch;
    }
    for (p, b) in params.p_dis_max_kw.iter_mut().zip(&base.p_dis_max_kw) {
        *p = b * fdis;
    }
    if let Some(m) = &spec.eta_ch {
        params.eta_ch = m.truncated_mean();
    }
    if let Some(m) = &spec.eta_dis {
        params.eta_dis = m.truncated_mean();
    }
    let dmin = spec.soc_min_offset.truncated_mean();
    let dmax = spec.soc_max_offset.truncated_mean();
    let damb = spec.ambient_offset.truncated_mean();
    for t in 0..t_len {
        params.soc_min[t] = (base.soc_min[t] + dmin).clamp(0.0, 1.0);
        params.soc_max[t] = (base.soc_max[t] + dmax).clamp(0.0, 1.0);
        params.ambient_bias[t] = base.ambient_bias[t] + damb;
    }
    Ok(ExuRealization {
        params,
        availability: vec![true; t_len],
    })
}

/// Decision-adjusted state-of-charge boundaries for one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EduBounds {
    /// Affine law evaluated without clipping (may leave [0, 1]).
    pub unclipped_min: Vec<f64>,
    pub unclipped_max: Vec<f64>,
    /// Law clipped into [0, 1]; this is what replay enforces.
    pub clipped_min: Vec<f64>,
    pub clipped_max: Vec<f64>,
    /// Periods where the clipped band crossed (min > max). Reported, never
    /// repaired.
    pub collapsed: Vec<bool>,
    /// Normalized cumulative throughput `D[t]` entering the law (throughput
    /// of periods strictly before `t`, in units of capacity).
    pub throughput_norm: Vec<f64>,
}

/// Applies the decision-dependent boundary law to a fixed schedule:
///
/// ```text
/// D[t]      = sum_{tau < t} (P_ch[tau] + P_dis[tau]) * dt / S
/// max'[t]   = soc_max[t] + mu * c_dis[t] - nu * D[t]
/// min'[t]   = soc_min[t] - mu * c_ch[t]  + nu * D[t]
/// ```
///
/// followed by clipping into [0, 1]. With `mu = nu = 0` the bounds are
/// returned unchanged.
pub fn apply_edu_boundaries(
    params: &GesParams,
    schedule: &UnitSchedule,
    prices: &PriceSchedule,
    spec: &UncertaintySpec,
    horizon: &Horizon,
) -> Result<EduBounds, UncertaintyError> {
    spec.validate()?;
    prices.validate(horizon)?;
    let t_len = horizon.periods;
    for (name, len) in [
        ("p_ch_kw", schedule.p_ch_kw.len()),
        ("p_dis_kw", schedule.p_dis_kw.len()),
        ("soc_min", params.soc_min.len()),
        ("soc_max", params.soc_max.len()),
    ] {
        if len != t_len {
            return Err(UncertaintyError::SeriesLength {
                name,
                expected: t_len,
                got: len,
            });
        }
    }
    if !(params.capacity_kwh > 0.0) {
        return Err(UncertaintyError::InvalidMarginal {
            name: "capacity_kwh",
            value: params.capacity_kwh,
            reason: "capacity must be positive",
        });
    }
    let mu = spec.mu_price_expansion;
    let nu = spec.nu_usage_contraction;
    let mut d = vec![0.0; t_len];
    for t in 1..t_len {
        d[t] = d[t - 1]
            + (schedule.p_ch_kw[t - 1] + schedule.p_dis_kw[t - 1]) * horizon.dt_hours
                / params.capacity_kwh;
    }
    let mut out = EduBounds {
        unclipped_min: Vec::with_capacity(t_len),
        unclipped_max: Vec::with_capacity(t_len),
        clipped_min: Vec::with_capacity(t_len),
        clipped_max: Vec::with_capacity(t_len),
        collapsed: Vec::with_capacity(t_len),
        throughput_norm: d,
    };
    for t in 0..t_len {
        let raw_max =
            params.soc_max[t] + mu * prices.discharge_rmb_per_kwh[t] - nu * out.throughput_norm[t];
        let raw_min =
            params.soc_min[t] - mu * prices.charge_rmb_per_kwh[t] + nu * out.throughput_norm[t];
        let cmax = raw_max.clamp(0.0, 1.0);
        let cmin = raw_min.clamp(0.0, 1.0);
        out.unclipped_max.push(raw_max);
        out.unclipped_min.push(raw_min);
        out.clipped_max.push(cmax);
        out.clipped_min.push(cmin);
        out.collapsed.push(cmin > cmax);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unit::{transform_to_ges, PhysicalParams, StorageParams, UnitKind};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn horizon(periods: usize) -> Horizon {
        Horizon::new(periods, 1.0).unwrap()
    }

    fn base_params(periods: usize) -> GesParams {
        let storage = StorageParams {
            capacity_kwh: 8.0,
            p_ch_max_kw: 3.0,
            p_dis_max_kw: 4.0,
            eta_ch: 0.95,
            eta_dis: 0.9,
            self_discharge: 0.02,
            soc_min: 0.1,
            soc_max: 0.9,
            soc_init: 0.5,
            ramp_up_kw_per_h: None,
            ramp_down_kw_per_h: None,
        };
        transform_to_ges(&PhysicalParams::Bes(storage), &horizon(periods)).unwrap()
    }

    fn flat_prices(periods: usize) -> PriceSchedule {
        PriceSchedule {
            grid_rmb_per_kwh: vec![0.6; periods],
            charge_rmb_per_kwh: vec![0.3; periods],
            discharge_rmb_per_kwh: vec![0.3; periods],
            curtailment_rmb_per_kwh: 10.0,
        }
    }

    #[test]
    fn truncated_moments_match_closed_form() {
        // symmetric truncation keeps the location
        let sym = TruncNormal {
            mean: 0.9,
            std: 0.05,
            lo: 0.8,
            hi: 1.0,
        };
        assert_relative_eq!(sym.truncated_mean(), 0.9, max_relative = 1e-12);
        assert_relative_eq!(
            sym.truncated_variance().sqrt(),
            0.043981283051711985,
            max_relative = 1e-10
        );
        // asymmetric truncation shifts the mean toward the long side
        let asym = TruncNormal {
            mean: 0.9,
            std: 0.05,
            lo: 0.85,
            hi: 1.0,
        };
        assert_relative_eq!(asym.truncated_mean(), 0.9114818589545665, max_relative = 1e-10);
        assert_relative_eq!(
            asym.truncated_variance(),
            0.0012994063480288357,
            max_relative = 1e-10
        );
        // point mass
        let point = TruncNormal::point(0.4);
        assert_eq!(point.truncated_mean(), 0.4);
        assert_eq!(point.truncated_variance(), 0.0);
    }

    #[test]
    fn sampling_respects_support_and_moments() {
        let marg = TruncNormal {
            mean: 0.9,
            std: 0.05,
            lo: 0.8,
            hi: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| marg.sample(&mut rng)).collect();
        assert!(draws.iter().all(|x| (0.8..=1.0).contains(x)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = (marg.truncated_variance() / n as f64).sqrt();
        assert!(
            (mean - marg.truncated_mean()).abs() <= 3.5 * se,
            "sample mean {mean} vs exact {}",
            marg.truncated_mean()
        );
        let var = draws
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        assert_relative_eq!(var, marg.truncated_variance(), max_relative = 0.1);
    }

    #[test]
    fn quantile_is_monotone_and_hits_support_ends() {
        let marg = TruncNormal {
            mean: 0.0,
            std: 1.0,
            lo: -2.0,
            hi: 3.0,
        };
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let u = i as f64 / 100.0;
            let x = marg.quantile(u);
            assert!(x >= prev);
            assert!((-2.0..=3.0).contains(&x));
            prev = x;
        }
        assert_relative_eq!(marg.quantile(0.0), -2.0, epsilon = 1e-6);
        assert_relative_eq!(marg.quantile(1.0), 3.0, epsilon = 1e-6);
    }

    #[test]
    fn empty_interval_is_rejected() {
        let bad = TruncNormal {
            mean: 0.5,
            std: 0.1,
            lo: 1.0,
            hi: 0.0,
        };
        assert!(matches!(
            bad.validate("x"),
            Err(UncertaintyError::EmptyInterval { .. })
        ));
        let mut spec = UncertaintySpec::degenerate();
        spec.soc_min_offset = bad;
        let base = base_params(2);
        assert!(sample_exu_realization(&spec, &base, &horizon(2), 1).is_err());
    }

    #[test]
    fn degenerate_spec_reproduces_base_bitwise() {
        let base = base_params(3);
        let spec = UncertaintySpec::degenerate();
        let real = sample_exu_realization(&spec, &base, &horizon(3), 99).unwrap();
        assert_eq!(real.params, base);
        assert_eq!(real.availability, vec![true; 3]);
        // mean-valued realization agrees as well
        let mean = mean_exu_realization(&spec, &base, &horizon(3)).unwrap();
        assert_eq!(mean.params, base);
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let base = base_params(4);
        let mut spec = UncertaintySpec::degenerate();
        spec.soc_min_offset = TruncNormal::centered(0.0, 0.02, 0.05);
        spec.soc_max_offset = TruncNormal::centered(0.0, 0.02, 0.05);
        spec.capacity_factor = TruncNormal {
            mean: 1.0,
            std: 0.05,
            lo: 0.8,
            hi: 1.2,
        };
        spec.p_avail = 0.7;
        let a = sample_exu_realization(&spec, &base, &horizon(4), 1234).unwrap();
        let b = sample_exu_realization(&spec, &base, &horizon(4), 1234).unwrap();
        assert_eq!(a, b);
        let c = sample_exu_realization(&spec, &base, &horizon(4), 1235).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn offsets_shift_bounds_and_clamp_into_unit_interval() {
        let base = base_params(2);
        let mut spec = UncertaintySpec::degenerate();
        // force the maximum possible positive offset on both bounds
        spec.soc_min_offset = TruncNormal::point(0.3);
        spec.soc_max_offset = TruncNormal::point(0.3);
        let real = sample_exu_realization(&spec, &base, &horizon(2), 0).unwrap();
        assert_eq!(real.params.soc_min, vec![0.4, 0.4]);
        // 0.9 + 0.3 clamps to 1.0
        assert_eq!(real.params.soc_max, vec![1.0, 1.0]);
    }

    #[test]
    fn availability_frequency_tracks_probability() {
        let base = base_params(1);
        let mut spec = UncertaintySpec::degenerate();
        spec.p_avail = 0.3;
        let n = 10_000;
        let mut on = 0usize;
        for seed in 0..n {
            let r = sample_exu_realization(&spec, &base, &horizon(1), seed as u64).unwrap();
            if r.availability[0] {
                on += 1;
            }
        }
        let freq = on as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.02, "availability frequency {freq}");
    }

    #[test]
    fn edu_worked_examples() {
        let base = base_params(2);
        let h = horizon(2);
        let prices = flat_prices(2);
        // price expansion only: mu=0.1, c_dis=0.3 raises the upper bound by
        // 0.03 and drops the lower bound by 0.03 at zero usage
        let mut spec = UncertaintySpec::degenerate();
        spec.mu_price_expansion = 0.1;
        let idle = UnitSchedule::idle(&h, base.soc_init);
        let b = apply_edu_boundaries(&base, &idle, &prices, &spec, &h).unwrap();
        assert_relative_eq!(b.unclipped_max[0], 0.93, max_relative = 1e-12);
        assert_relative_eq!(b.unclipped_min[0], 0.07, max_relative = 1e-12);
        assert_eq!(b.throughput_norm, vec![0.0, 0.0]);
        assert!(!b.collapsed.iter().any(|c| *c));
        // usage contraction only: nu=0.05 and two capacities of cumulative
        // throughput entering period 1 pull the upper bound down by 0.1
        let mut spec = UncertaintySpec::degenerate();
        spec.nu_usage_contraction = 0.05;
        let busy = UnitSchedule {
            p_ch_kw: vec![2.0 * base.capacity_kwh, 0.0],
            p_dis_kw: vec![0.0, 0.0],
            soc: vec![0.5; 3],
        };
        let b = apply_edu_boundaries(&base, &busy, &prices, &spec, &h).unwrap();
        assert_relative_eq!(b.throughput_norm[1], 2.0, max_relative = 1e-12);
        assert_relative_eq!(b.unclipped_max[1], 0.8, max_relative = 1e-12);
        assert_relative_eq!(b.unclipped_min[1], 0.2, max_relative = 1e-12);
        // the first period never sees its own throughput
        assert_relative_eq!(b.unclipped_max[0], 0.9, max_relative = 1e-12);
    }

    #[test]
    fn edu_zero_coefficients_return_base_bounds_bitwise() {
        let base = base_params(3);
        let h = horizon(3);
        let spec = UncertaintySpec::degenerate();
        let sched = UnitSchedule {
            p_ch_kw: vec![1.0, 2.0, 0.0],
            p_dis_kw: vec![0.0, 1.0, 3.0],
            soc: vec![0.5; 4],
        };
        let b = apply_edu_boundaries(&base, &sched, &flat_prices(3), &spec, &h).unwrap();
        assert_eq!(b.clipped_min, base.soc_min);
        assert_eq!(b.clipped_max, base.soc_max);
        assert_eq!(b.unclipped_min, base.soc_min);
        assert_eq!(b.unclipped_max, base.soc_max);
    }

    #[test]
    fn edu_collapse_is_reported_not_repaired() {
        let base = base_params(2);
        let h = horizon(2);
        let mut spec = UncertaintySpec::degenerate();
        spec.nu_usage_contraction = 1.0;
        // heavy first-period throughput drives min above max at period 1
        let sched = UnitSchedule {
            p_ch_kw: vec![8.0, 0.0],
            p_dis_kw: vec![0.0, 0.0],
            soc: vec![0.5; 3],
        };
        let b = apply_edu_boundaries(&base, &sched, &flat_prices(2), &spec, &h).unwrap();
        assert!(!b.collapsed[0]);
        assert!(b.collapsed[1]);
        assert!(b.clipped_min[1] > b.clipped_max[1]);
    }

    proptest! {
        /// The unclipped law is affine in the schedule: the shift produced by
        /// the sum of two usage patterns is the sum of the shifts.
        #[test]
        fn edu_law_is_affine_in_schedule(
            a in proptest::collection::vec(0.0f64..3.0, 4),
            b in proptest::collection::vec(0.0f64..3.0, 4),
        ) {
            let base = base_params(4);
            let h = horizon(4);
            let prices = flat_prices(4);
            let mut spec = UncertaintySpec::degenerate();
            spec.mu_price_expansion = 0.05;
            spec.nu_usage_contraction = 0.08;
            let mk = |ch: &[f64]| UnitSchedule {
                p_ch_kw: ch.to_vec(),
                p_dis_kw: vec![0.0; 4],
                soc: vec![0.5; 5],
            };
            let zero = apply_edu_boundaries(&base, &mk(&[0.0; 4]), &prices, &spec, &h).unwrap();
            let ba = apply_edu_boundaries(&base, &mk(&a), &prices, &spec, &h).unwrap();
            let bb = apply_edu_boundaries(&base, &mk(&b), &prices, &spec, &h).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let bs = apply_edu_boundaries(&base, &mk(&sum), &prices, &spec, &h).unwrap();
            for t in 0..4 {
                let lhs = bs.unclipped_max[t] - zero.unclipped_max[t];
                let rhs = (ba.unclipped_max[t] - zero.unclipped_max[t])
                    + (bb.unclipped_max[t] - zero.unclipped_max[t]);
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }

        /// Sampled realizations keep state-of-charge bounds inside [0, 1]
        /// and leave untouched fields bitwise identical to the base.
        #[test]
        fn realizations_stay_in_range(seed in 0u64..500) {
            let base = base_params(3);
            let mut spec = UncertaintySpec::degenerate();
            spec.soc_min_offset = TruncNormal::centered(0.0, 0.05, 0.2);
            spec.soc_max_offset = TruncNormal::centered(0.0, 0.05, 0.2);
            spec.p_dis_max_factor = TruncNormal { mean: 1.0, std: 0.1, lo: 0.5, hi: 1.5 };
            let r = sample_exu_realization(&spec, &base, &horizon(3), seed).unwrap();
            for t in 0..3 {
                prop_assert!((0.0..=1.0).contains(&r.params.soc_min[t]));
                prop_assert!((0.0..=1.0).contains(&r.params.soc_max[t]));
                prop_assert!(r.params.p_dis_max_kw[t] >= 0.0);
            }
            prop_assert_eq!(r.params.eta_ch, base.eta_ch);
            prop_assert_eq!(r.params.capacity_kwh, base.capacity_kwh);
            prop_assert_eq!(r.params.kind, UnitKind::Bes);
        }
    }
}
