//! Scenario machinery for the chance-constrained models: the sample-size
//! bound and the exact constraint collapse.
//!
//! The scenario approach replaces the chance constraint "P(violation) <= alpha"
//! with enforcement on N independently drawn parameter realizations. The
//! classic certificate requires, for decision dimension d and confidence
//! 1 - beta,
//!
//!   sum_{i=0}^{d-1} C(N,i) alpha^i (1-alpha)^(N-i) <= beta.
//!
//! Because every scenario-dependent constraint here is a box bound whose
//! coefficient row is scenario-independent (only the right-hand side moves),
//! enforcing all N scenarios is equivalent to enforcing the single worst one
//! per row. `ScenarioEnvelope` computes that worst case in one streaming pass
//! over the draws without materializing any realization, which keeps the
//! N ~ 1.5e5 regime cheap. The fold is exact, not conservative: truncated
//! normal sampling is inverse-CDF and the quantile is monotone in the
//! underlying uniform, so folding extremes over raw uniforms and quantiling
//! once yields bitwise the same bound as materializing every realization.

use statrs::function::gamma::ln_gamma;

use crate::uncertainty::{walk_exu_draws, DrawOutcome, DrawSlot, UncertaintySpec};
use crate::unit::{GesParams, Horizon};
use crate::{derive_seed, SEED_DOMAIN_SCENARIOS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DispatchError, FleetUnit};

/// Smallest scenario count N such that the binomial tail certificate holds
/// for violation level `alpha`, confidence parameter `beta_confidence`, and
/// decision dimension `support_dim`, subject to the default sizing cap.
///
/// A support dimension of zero means no scenario-dependent constraint exists
/// and zero samples certify trivially.
pub fn required_scenario_count(
    alpha: f64,
    beta_confidence: f64,
    support_dim: usize,
) -> Result<usize, DispatchError> {
    required_scenario_count_capped(
        alpha,
        beta_confidence,
        support_dim,
        super::DEFAULT_SCENARIO_CAP,
    )
}

/// As `required_scenario_count` but with an explicit ceiling: certificates
/// needing more than `cap` samples are refused instead of built.
pub(crate) fn required_scenario_count_capped(
    alpha: f64,
    beta_confidence: f64,
    support_dim: usize,
    cap: usize,
) -> Result<usize, DispatchError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DispatchError::InvalidConfig {
            name: "alpha",
            value: alpha,
            reason: "must lie strictly inside (0, 1)",
        });
    }
    if !(beta_confidence > 0.0 && beta_confidence < 1.0) {
        return Err(DispatchError::InvalidConfig {
            name: "beta_confidence",
            value: beta_confidence,
            reason: "must lie strictly inside (0, 1)",
        });
    }
    if support_dim == 0 {
        return Ok(0);
    }

    let ln_beta = beta_confidence.ln();
    // N < d never certifies (a binomial on N trials cannot reach d), so d is
    // the search floor and the cap must itself certify for an answer to
    // exist below it.
    if support_dim > cap || ln_binomial_cdf(cap, support_dim - 1, alpha) > ln_beta {
        return Err(DispatchError::ScenarioCountCap { cap });
    }
    // The tail is monotone decreasing in N: gallop up from d, then bisect.
    let mut lo = support_dim - 1;
    let mut hi = support_dim;
    while ln_binomial_cdf(hi, support_dim - 1, alpha) > ln_beta {
        lo = hi;
        hi = (hi * 2).min(cap);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ln_binomial_cdf(mid, support_dim - 1, alpha) <= ln_beta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// log of P(X <= k) for X ~ Binomial(n, p), via a log-sum-exp over the pmf.
fn ln_binomial_cdf(n: usize, k: usize, p: f64) -> f64 {
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let ln_n_fact = ln_gamma(n as f64 + 1.0);
    let mut max_term = f64::NEG_INFINITY;
    let mut terms = Vec::with_capacity(k + 1);
    for i in 0..=k.min(n) {
        // C(n,0) and C(n,n) are exactly 1; routing them through ln_gamma
        // would leave ulp-level noise that can flip the certificate at an
        // exact boundary (e.g. alpha = beta = 0.5, d = 1).
        let ln_binom = if i == 0 || i == n {
            0.0
        } else {
            ln_n_fact - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0)
        };
        let t = ln_binom + i as f64 * ln_p + (n - i) as f64 * ln_q;
        max_term = max_term.max(t);
        terms.push(t);
    }
    if terms.is_empty() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
    max_term + sum.ln()
}

/// Worst-case-per-row constraint data for one unit after folding all
/// scenarios: the tightest power caps, the tightest SOC band, and whether the
/// unit was available in every scenario at each period.
///
/// For the deterministic model this is simply the expected realization. The
/// bounds are stored exactly as sampled; SOC bands may be crossed (empty) if
/// the drawn offsets collide, which the optimizer then reports as infeasible
/// rather than silently repairing.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEnvelope {
    /// Effective storage parameters with all scenario extremes applied.
    pub params: GesParams,
    /// True where every scenario had the unit available; a single unavailable
    /// scenario zeroes the period's power caps.
    pub always_available: Vec<bool>,
}

/// Accumulates per-slot extremes of the raw uniforms during a scenario walk.
struct UnitFold {
    capacity_min_u: f64,
    pch_min_u: f64,
    pdis_min_u: f64,
    eta_ch_min_u: f64,
    eta_dis_min_u: f64,
    soc_min_max_u: Vec<f64>,
    soc_max_min_u: Vec<f64>,
    ambient_max_u: Vec<f64>,
    always_available: Vec<bool>,
}

impl UnitFold {
    fn new(periods: usize) -> Self {
        UnitFold {
            capacity_min_u: f64::INFINITY,
            pch_min_u: f64::INFINITY,
            pdis_min_u: f64::INFINITY,
            eta_ch_min_u: f64::INFINITY,
            eta_dis_min_u: f64::INFINITY,
            soc_min_max_u: vec![f64::NEG_INFINITY; periods],
            soc_max_min_u: vec![f64::INFINITY; periods],
            ambient_max_u: vec![f64::NEG_INFINITY; periods],
            always_available: vec![true; periods],
        }
    }

    fn absorb(&mut self, slot: DrawSlot, outcome: DrawOutcome) {
        match (slot, outcome) {
            (DrawSlot::CapacityFactor, DrawOutcome::Uniform(u)) => {
                self.capacity_min_u = self.capacity_min_u.min(u);
            }
            (DrawSlot::PchFactor, DrawOutcome::Uniform(u)) => {
                self.pch_min_u = self.pch_min_u.min(u);
            }
            (DrawSlot::PdisFactor, DrawOutcome::Uniform(u)) => {
                self.pdis_min_u = self.pdis_min_u.min(u);
            }
            (DrawSlot::EtaCh, DrawOutcome::Uniform(u)) => {
                self.eta_ch_min_u = self.eta_ch_min_u.min(u);
            }
            (DrawSlot::EtaDis, DrawOutcome::Uniform(u)) => {
                self.eta_dis_min_u = self.eta_dis_min_u.min(u);
            }
            (DrawSlot::SocMinOffset(t), DrawOutcome::Uniform(u)) => {
                self.soc_min_max_u[t] = self.soc_min_max_u[t].max(u);
            }
            (DrawSlot::SocMaxOffset(t), DrawOutcome::Uniform(u)) => {
                self.soc_max_min_u[t] = self.soc_max_min_u[t].min(u);
            }
            (DrawSlot::AmbientOffset(t), DrawOutcome::Uniform(u)) => {
                self.ambient_max_u[t] = self.ambient_max_u[t].max(u);
            }
            (DrawSlot::Availability(t), DrawOutcome::Mask(avail)) => {
                self.always_available[t] = self.always_available[t] && avail;
            }
            (_, DrawOutcome::Degenerate) => {}
            // Mask outcomes only occur for availability slots and vice versa.
            (slot, outcome) => unreachable!("draw walk mismatch: {slot:?} / {outcome:?}"),
        }
    }

    /// Convert folded uniforms into worst-case parameters, mirroring the
    /// sampler operation for operation. A finite folded extreme feeds the
    /// quantile once (monotone quantile, positive scaling, and clamping all
    /// commute with the extremum, so this equals the extremum over
    /// materialized scenarios bitwise); an infinite extreme means the slot is
    /// degenerate and takes the sampler's deterministic value.
    fn finish(self, spec: &UncertaintySpec, base: &GesParams, horizon: &Horizon) -> UnitEnvelope {
        let value = |tn: &crate::uncertainty::TruncNormal, u: f64| {
            if u.is_finite() {
                tn.quantile(u)
            } else {
                tn.mean.clamp(tn.lo, tn.hi)
            }
        };
        let mut params = base.clone();
        // Capacity and power caps shrink with their factor, so the minimal
        // uniform is the binding one. Capacity, efficiencies, and ambient
        // bias never enter scenario-copied rows (dynamics run on nominal
        // parameters); they are folded anyway so the envelope reads as the
        // worst materialized scenario in every field.
        params.capacity_kwh = base.capacity_kwh * value(&spec.capacity_factor, self.capacity_min_u);
        let pch_factor = value(&spec.p_ch_max_factor, self.pch_min_u);
        let pdis_factor = value(&spec.p_dis_max_factor, self.pdis_min_u);
        for t in 0..horizon.periods {
            params.p_ch_max_kw[t] = base.p_ch_max_kw[t] * pch_factor;
            params.p_dis_max_kw[t] = base.p_dis_max_kw[t] * pdis_factor;
            if !self.always_available[t] {
                params.p_ch_max_kw[t] = 0.0;
                params.p_dis_max_kw[t] = 0.0;
            }
            let dmin = value(&spec.soc_min_offset, self.soc_min_max_u[t]);
            let dmax = value(&spec.soc_max_offset, self.soc_max_min_u[t]);
            let damb = value(&spec.ambient_offset, self.ambient_max_u[t]);
            params.soc_min[t] = (base.soc_min[t] + dmin).clamp(0.0, 1.0);
            params.soc_max[t] = (base.soc_max[t] + dmax).clamp(0.0, 1.0);
            params.ambient_bias[t] = base.ambient_bias[t] + damb;
        }
        if let Some(tn) = &spec.eta_ch {
            params.eta_ch = value(tn, self.eta_ch_min_u);
        }
        if let Some(tn) = &spec.eta_dis {
            params.eta_dis = value(tn, self.eta_dis_min_u);
        }
        UnitEnvelope {
            params,
            always_available: self.always_available,
        }
    }
}

/// Fold `scenario_count` seeded scenarios into one worst-case envelope per
/// unit. Scenario k draws the whole fleet in declaration order from the rng
/// seeded by `derive_seed(master_seed, SEED_DOMAIN_SCENARIOS, k)`, matching
/// `sample_fleet_scenario` draw for draw. `bases` are the transformed storage
/// parameters in fleet order, validated by the caller.
pub(crate) fn collapse_scenarios(
    fleet: &[FleetUnit],
    bases: &[GesParams],
    horizon: &Horizon,
    master_seed: u64,
    scenario_count: usize,
) -> Vec<UnitEnvelope> {
    let mut folds: Vec<UnitFold> = fleet
        .iter()
        .map(|_| UnitFold::new(horizon.periods))
        .collect();
    // Degenerate marginals consume no randomness, so scenarios differ only
    // through non-degenerate slots; skip the sweep when nothing varies.
    let anything_varies = fleet.iter().any(|u| !u.uncertainty.is_degenerate());
    if anything_varies {
        for k in 0..scenario_count {
            let seed = derive_seed(master_seed, SEED_DOMAIN_SCENARIOS, k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (unit, fold) in fleet.iter().zip(folds.iter_mut()) {
                walk_exu_draws(&unit.uncertainty, horizon, &mut rng, |slot, outcome| {
                    fold.absorb(slot, outcome)
                });
            }
        }
    }
    fleet
        .iter()
        .zip(bases)
        .zip(folds)
        .map(|((unit, base), fold)| fold.finish(&unit.uncertainty, base, horizon))
        .collect()
}

/// Materialize scenario `k` for the whole fleet: same seed derivation and
/// draw order as `collapse_scenarios`, returning full realizations. Used by
/// tests to prove the collapse exact and by callers that need individual
/// scenarios.
pub fn sample_fleet_scenario(
    fleet: &[FleetUnit],
    horizon: &Horizon,
    master_seed: u64,
    k: usize,
) -> Result<Vec<crate::uncertainty::ExuRealization>, DispatchError> {
    let seed = derive_seed(master_seed, SEED_DOMAIN_SCENARIOS, k as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fleet
        .iter()
        .map(|unit| {
            let base = unit.base_ges(horizon)?;
            Ok(crate::uncertainty::sample_exu_with_rng(
                &unit.uncertainty,
                &base,
                horizon,
                &mut rng,
            ))
        })
        .collect()
}

/// Envelope for the deterministic model: every marginal at its truncated
/// mean, availability certain.
pub(crate) fn mean_envelopes(
    fleet: &[FleetUnit],
    bases: &[GesParams],
    horizon: &Horizon,
) -> Result<Vec<UnitEnvelope>, DispatchError> {
    fleet
        .iter()
        .zip(bases)
        .map(|(unit, base)| {
            let real =
                crate::uncertainty::mean_exu_realization(&unit.uncertainty, base, horizon)?;
            Ok(UnitEnvelope {
                params: real.params,
                always_available: vec![true; horizon.periods],
            })
        })
        .collect()
}
