//! Proportional-fair contention window allocation.
//!
//! Maximising `Σ ln S_i` over attempt probabilities is equivalent to giving
//! every station the same airtime `1/N`. The N equations `T_i(τ) = 1/N` are
//! solved by damped Newton in the log variables `x̃_i = ln(τ_i/(1-τ_i))`,
//! where the Jacobian is the Hessian of the convex `ln X(e^x̃)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{AirtimeMap, AttemptVector, Network, PerStationMetrics, Utility};
use crate::phy::{PhyProfile, StationSpec};

/// Largest value carried by the 4-bit ECW fields.
pub const ECW_MAX: u8 = 15;

/// Cap on a single Newton step in log space.
const MAX_STEP: f64 = 5.0;

/// Relative tolerance for agreement between solver restarts.
pub const RESTART_AGREEMENT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Target for `max_i |T_i - 1/N|`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Initial step length of each Newton iteration, in (0, 1].
    pub damping: f64,
    /// Seeds the random restarts.
    pub seed: u64,
    /// Number of additional random restarts that must agree with the
    /// primary solution.
    pub restarts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 200,
            damping: 1.0,
            seed: 0,
            restarts: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::validation("solver.tolerance", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::validation("solver.max_iterations", "must be at least 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::validation("solver.damping", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A contention window rounded to a power of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pow2Cw {
    pub ecw: u8,
    /// Realised window, `2^ecw`.
    pub cw: u32,
}

impl Pow2Cw {
    pub fn from_ecw(ecw: u8) -> Self {
        let ecw = ecw.min(ECW_MAX);
        Self { ecw, cw: 1 << ecw }
    }

    /// Attempt probability of a station using this window with no backoff
    /// stages.
    pub fn tau(&self) -> f64 {
        cw_to_tau(self.cw as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    /// Caller order.
    pub tau: AttemptVector,
    pub w_exact: Vec<f64>,
    pub rounded: Vec<Pow2Cw>,
    /// `max_i |T_i - 1/N|` at the returned point.
    pub residual: f64,
    pub utility_at_solution: Utility,
    pub iterations: usize,
}

impl Allocation {
    pub fn ecw(&self) -> Vec<u8> {
        self.rounded.iter().map(|c| c.ecw).collect()
    }

    /// Attempt probabilities realised by the rounded windows.
    pub fn rounded_tau(&self) -> AttemptVector {
        AttemptVector::new(self.rounded.iter().map(Pow2Cw::tau).collect())
            .expect("rounded windows give valid probabilities")
    }
}

/// `W = (2-τ)/τ`.
pub fn tau_to_cw(tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Infeasible {
            reason: format!("attempt probability {tau} outside (0, 1]"),
        });
    }
    Ok((2.0 - tau) / tau)
}

/// Inverse of [`tau_to_cw`]: `τ = 2/(W+1)`.
pub fn cw_to_tau(w: f64) -> f64 {
    2.0 / (w + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonSaturatedCw {
    pub w: f64,
    /// The formula gave a window below one and it was raised to one.
    pub floored: bool,
}

/// `W = (2q-τ)/τ` for a station that has a packet queued with probability
/// `q` when it wins a transmission opportunity.
pub fn nonsaturated_tau_to_cw(tau: f64, q: f64) -> Result<NonSaturatedCw> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Infeasible {
            reason: format!("availability {q} outside (0, 1]"),
        });
    }
    if !(tau > 0.0) || tau >= 2.0 * q {
        return Err(Error::Infeasible {
            reason: format!("attempt probability {tau} not in (0, 2q) for q = {q}"),
        });
    }
    let w = (2.0 * q - tau) / tau;
    Ok(if w < 1.0 {
        NonSaturatedCw { w: 1.0, floored: true }
    } else {
        NonSaturatedCw { w, floored: false }
    })
}

/// `ECW = round(log2 W)`, halves rounding up, clamped to `[0, 15]`.
pub fn round_to_pow2(w: f64) -> Pow2Cw {
    let e = (w.max(1.0).log2() + 0.5).floor();
    Pow2Cw::from_ecw(e.clamp(0.0, ECW_MAX as f64) as u8)
}

pub fn solve_equal_airtime(
    specs: &[StationSpec],
    profile: &PhyProfile,
    cfg: &SolverConfig,
) -> Result<Allocation> {
    let net = Network::new(specs, profile)?;
    solve_network(&net, cfg)
}

/// Solves the equal-airtime system for an already built network.
pub fn solve_network(net: &Network, cfg: &SolverConfig) -> Result<Allocation> {
    cfg.validate()?;
    let n = net.len();
    if n == 1 {
        let tau = AttemptVector::new(vec![1.0])?;
        return Ok(Allocation {
            utility_at_solution: net.utility(&tau),
            tau,
            w_exact: vec![1.0],
            rounded: vec![Pow2Cw::from_ecw(0)],
            residual: 0.0,
            iterations: 0,
        });
    }

    let map = net.airtime_map();
    let init = (0.5f64).min(2.0 / (n as f64 + 1.0));
    let init = init.ln() - (-init).ln_1p();
    let starts: Vec<Vec<f64>> = std::iter::once(vec![init; n])
        .chain((0..cfg.restarts).map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64 + 1);
            (0..n).map(|_| rng.random_range(-6.0..1.0)).collect()
        }))
        .collect();
    let runs = Exec::default().map_slice(&starts, |x0| newton(&map, x0.clone(), cfg));
    let mut runs = runs.into_iter();
    let (log_x, residual, iterations) = runs.next().expect("primary start")?;
    let tau_ordered: Vec<f64> = log_x.iter().map(|&v| crate::model::sigmoid(v)).collect();
    for other in runs {
        let (other_x, _, _) = other?;
        let max_rel_diff = other_x
            .iter()
            .zip(&tau_ordered)
            .map(|(&v, &t)| (crate::model::sigmoid(v) - t).abs() / t)
            .fold(0.0, f64::max);
        if max_rel_diff > RESTART_AGREEMENT {
            return Err(Error::NonUnique { max_rel_diff });
        }
    }

    let tau = AttemptVector::new(net.to_caller(tau_ordered))?;
    let w_exact = tau
        .tau()
        .iter()
        .map(|&t| tau_to_cw(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Allocation {
        rounded: w_exact.iter().map(|&w| round_to_pow2(w)).collect(),
        utility_at_solution: net.utility(&tau),
        tau,
        w_exact,
        residual,
        iterations,
    })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Returns the solution in log space, its residual and the iteration count.
fn newton(map: &AirtimeMap<'_>, mut x: Vec<f64>, cfg: &SolverConfig) -> Result<(Vec<f64>, f64, usize)> {
    let n = x.len();
    let target = 1.0 / n as f64;
    let residual_of = |v: &[f64]| -> Vec<f64> {
        map.airtime_log(v).0.into_iter().map(|a| a - target).collect()
    };
    let mut best = (f64::INFINITY, x.clone());
    for it in 0..cfg.max_iterations {
        let (a, jac) = map.jacobian_log(&x);
        let f: Vec<f64> = a.iter().map(|v| v - target).collect();
        let res = max_abs(&f);
        if res < best.0 {
            best = (res, x.clone());
        }
        if res <= cfg.tolerance {
            return Ok((x, res, it));
        }
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let mut dir = solve_linear(jac, rhs).unwrap_or_else(|| f.iter().map(|v| -v).collect());
        let big = max_abs(&dir);
        if big > MAX_STEP {
            dir.iter_mut().for_each(|d| *d *= MAX_STEP / big);
        }

        // Backtrack on ||F||² until it decreases.
        let merit = sq_norm(&f);
        let mut step = cfg.damping;
        let mut accepted = false;
        for _ in 0..50 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            if sq_norm(&residual_of(&trial)) <= (1.0 - 1e-4 * step) * merit {
                x = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let f = residual_of(&x);
    let res = max_abs(&f);
    if res <= cfg.tolerance {
        return Ok((x, res, cfg.max_iterations));
    }
    if res < best.0 {
        best = (res, x);
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iterations,
        residual: best.0,
        best_iterate: best.1.iter().map(|&v| crate::model::sigmoid(v)).collect(),
    })
}

/// Gaussian elimination with partial pivoting. `None` if singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor != 0.0 {
                for k in col..n {
                    a[row][k] -= factor * a[col][k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Attempt probability of binary exponential backoff with window `w` and
/// `m` doubling stages under conditional failure probability `p`.
pub fn backoff_attempt_prob(w: f64, m: u32, p: f64) -> f64 {
    let mut geometric = 0.0;
    let mut term = 1.0;
    for _ in 0..m {
        geometric += term;
        term *= 2.0 * p;
    }
    2.0 / (1.0 + w + p * w * geometric)
}

/// Attempt probabilities of stations running standard DCF with `cw_min`
/// and `m` backoff stages, coupled through their conditional failure
/// probabilities. Caller order.
pub fn dcf_attempt_prob(
    cw_min: u32,
    m: u32,
    specs: &[StationSpec],
    profile: &PhyProfile,
) -> Result<AttemptVector> {
    if cw_min == 0 {
        return Err(Error::validation("baseline.cw_min", "must be at least 1"));
    }
    if specs.is_empty() {
        return Err(Error::validation("stations", "at least one station is required"));
    }
    for s in specs {
        s.validate(profile)?;
    }
    let link_error: Vec<f64> = specs.iter().map(|s| s.link_error).collect();
    dcf_fixed_point(cw_min as f64, m, &link_error)
}

pub(crate) fn dcf_fixed_point(w: f64, m: u32, link_error: &[f64]) -> Result<AttemptVector> {
    const TOL: f64 = 1e-12;
    const MAX_ITER: usize = 100_000;
    let n = link_error.len();
    let image = |tau: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let pc = crate::model::collision_prob(i, tau);
                let pf = 1.0 - (1.0 - link_error[i]) * (1.0 - pc);
                backoff_attempt_prob(w, m, pf)
            })
            .collect()
    };
    let mut tau = vec![cw_to_tau(w); n];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let next = image(&tau);
        residual = tau
            .iter()
            .zip(&next)
            .fold(0.0, |r, (a, b)| f64::max(r, (a - b).abs()));
        if residual <= TOL {
            return AttemptVector::new(next);
        }
        for (t, v) in tau.iter_mut().zip(next) {
            *t = 0.5 * *t + 0.5 * v;
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITER,
        residual,
        best_iterate: tau,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationEvaluation {
    pub exact: Vec<PerStationMetrics>,
    pub rounded: Vec<PerStationMetrics>,
    pub utility_exact: Utility,
    pub utility_rounded: Utility,
    /// `U(exact) - U(rounded)`; either sign is possible.
    pub utility_gap: f64,
}

/// Evaluates an allocation at its exact windows and at its power-of-two
/// rounding.
pub fn evaluate_allocation(alloc: &Allocation, net: &Network) -> AllocationEvaluation {
    let rounded_tau = alloc.rounded_tau();
    let utility_exact = net.utility(&alloc.tau);
    let utility_rounded = net.utility(&rounded_tau);
    let utility_gap = if utility_exact.value == utility_rounded.value {
        0.0
    } else {
        utility_exact.value - utility_rounded.value
    };
    AllocationEvaluation {
        exact: net.metrics(&alloc.tau),
        rounded: net.metrics(&rounded_tau),
        utility_exact,
        utility_rounded,
        utility_gap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ladder(payload_bits: f64) -> Vec<StationSpec> {
        PhyProfile::OFDM_RATES_MBPS
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &r)| StationSpec::new(format!("sta{}", i + 1), payload_bits, r))
            .collect()
    }

    #[test]
    fn cw_mapping_examples() {
        assert_eq!(tau_to_cw(1.0).unwrap(), 1.0);
        assert_eq!(tau_to_cw(0.5).unwrap(), 3.0);
        assert!((tau_to_cw(2.0 / 17.0).unwrap() - 16.0).abs() < 1e-12);
        assert!((cw_to_tau(16.0) - 2.0 / 17.0).abs() < 1e-15);
        assert!(matches!(tau_to_cw(0.0), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn nonsaturated_examples() {
        for tau in [0.05, 0.3, 0.9] {
            let a = nonsaturated_tau_to_cw(tau, 1.0).unwrap();
            assert_eq!(a.w, tau_to_cw(tau).unwrap());
            assert!(!a.floored);
        }
        assert_eq!(nonsaturated_tau_to_cw(0.5, 0.5).unwrap().w, 1.0);
        assert_eq!(nonsaturated_tau_to_cw(0.25, 0.75).unwrap().w, 5.0);
        let floored = nonsaturated_tau_to_cw(0.6, 0.5).unwrap();
        assert!(floored.floored && floored.w == 1.0);
        assert!(nonsaturated_tau_to_cw(1.0, 0.5).is_err());
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_to_pow2(16.0), Pow2Cw { ecw: 4, cw: 16 });
        assert_eq!(round_to_pow2(24.0), Pow2Cw { ecw: 5, cw: 32 });
        assert_eq!(round_to_pow2(1.4), Pow2Cw { ecw: 0, cw: 1 });
        assert_eq!(round_to_pow2(2f64.powf(3.5)).ecw, 4);
        assert_eq!(round_to_pow2(1e9).ecw, ECW_MAX);
    }

    #[test]
    fn single_station_gets_whole_channel() {
        let p = PhyProfile::ieee80211a();
        let a = solve_equal_airtime(&[StationSpec::new("a", 8000.0, 6.0)], &p, &SolverConfig::default())
            .unwrap();
        assert_eq!(a.tau.tau(), &[1.0]);
        assert_eq!(a.w_exact, vec![1.0]);
        assert_eq!(a.ecw(), vec![0]);
        let net = Network::new(&[StationSpec::new("a", 8000.0, 6.0)], &p).unwrap();
        assert_eq!(net.airtime(&a.tau), vec![1.0]);
        assert_eq!(evaluate_allocation(&a, &net).utility_gap, 0.0);
    }

    #[test]
    fn homogeneous_stations_share_equally() {
        let p = PhyProfile::ieee80211a();
        let specs = vec![StationSpec::new("s", 8000.0, 24.0); 5];
        let a = solve_equal_airtime(&specs, &p, &SolverConfig::default()).unwrap();
        let t0 = a.tau.tau()[0];
        assert!(a.tau.tau().iter().all(|t| (t - t0).abs() <= 1e-12 * t0));
        let net = Network::new(&specs, &p).unwrap();
        for t in net.airtime(&a.tau) {
            assert!((t - 0.2).abs() <= 1e-10);
        }
        assert!(a.ecw().iter().all(|&e| e == a.ecw()[0]));
    }

    #[test]
    fn two_station_closed_form() {
        // Two identical stations: T_s τ² = T_e (1-τ)², i.e. x = sqrt(T_e/T_s).
        let p = PhyProfile::ieee80211a();
        let specs = vec![StationSpec::new("s", 8000.0, 6.0); 2];
        let ts = p.tx_duration_success(&specs[0]).unwrap();
        let x = (p.empty_slot_us / ts).sqrt();
        let a = solve_equal_airtime(&specs, &p, &SolverConfig::default()).unwrap();
        assert!((a.tau.tau()[0] - x / (1.0 + x)).abs() < 1e-12);
    }

    #[test]
    fn slower_stations_get_larger_windows() {
        let p = PhyProfile::ieee80211a();
        let specs = ladder(11200.0);
        let a = solve_equal_airtime(&specs, &p, &SolverConfig::default()).unwrap();
        // sta1 is 54 Mb/s, sta8 is 6 Mb/s
        for w in a.w_exact.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn dcf_limits() {
        let p = PhyProfile::ieee80211a();
        let one = dcf_attempt_prob(16, 6, &[StationSpec::new("a", 8000.0, 6.0)], &p).unwrap();
        assert!((one.tau()[0] - 2.0 / 17.0).abs() < 1e-15);
        let specs = ladder(8000.0);
        let flat = dcf_attempt_prob(32, 0, &specs, &p).unwrap();
        assert!(flat.tau().iter().all(|t| (t - 2.0 / 33.0).abs() < 1e-15));
        let noisy: Vec<StationSpec> = specs.iter().cloned().map(|s| s.with_link_error(0.2)).collect();
        let flat = dcf_attempt_prob(32, 0, &noisy, &p).unwrap();
        assert!(flat.tau().iter().all(|t| (t - 2.0 / 33.0).abs() < 1e-15));
    }

    #[test]
    fn dcf_fixed_point_residual() {
        let p = PhyProfile::ieee80211a();
        let specs: Vec<StationSpec> = ladder(8000.0)
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.with_link_error(0.03 * i as f64))
            .collect();
        let tau = dcf_attempt_prob(16, 6, &specs, &p).unwrap();
        for i in 0..specs.len() {
            let pc = crate::model::collision_prob(i, tau.tau());
            let pf = 1.0 - (1.0 - specs[i].link_error) * (1.0 - pc);
            assert!((tau.tau()[i] - backoff_attempt_prob(16.0, 6, pf)).abs() <= 1e-10);
        }
        // Noisier links back off further.
        assert!(tau.tau().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn backoff_prob_is_stable_at_half() {
        // Σ (2p)^k is m at p = 1/2.
        assert!((backoff_attempt_prob(16.0, 6, 0.5) - 2.0 / (17.0 + 0.5 * 16.0 * 6.0)).abs() < 1e-15);
    }

    #[test]
    fn invalid_solver_config() {
        let cfg = SolverConfig {
            damping: 0.0,
            ..SolverConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        let p = PhyProfile::ieee80211a();
        let cfg = SolverConfig {
            max_iterations: 1,
            tolerance: 1e-300,
            ..SolverConfig::default()
        };
        match solve_equal_airtime(&ladder(8000.0), &p, &cfg) {
            Err(Error::NonConvergence { residual, best_iterate, .. }) => {
                assert!(residual > 0.0);
                assert_eq!(best_iterate.len(), 8);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn powers_of_two_round_trip_without_gap() {
        // Two identical stations whose exact window is replaced by its rounding
        // evaluate identically.
        let p = PhyProfile::ieee80211a();
        let specs = vec![StationSpec::new("s", 8000.0, 6.0); 2];
        let net = Network::new(&specs, &p).unwrap();
        let mut a = solve_equal_airtime(&specs, &p, &SolverConfig::default()).unwrap();
        a.tau = a.rounded_tau();
        a.w_exact = a.rounded.iter().map(|c| c.cw as f64).collect();
        assert_eq!(evaluate_allocation(&a, &net).utility_gap, 0.0);
    }

    proptest! {
        #[test]
        fn cw_inverse_identity(tau in 1e-6f64..=1.0) {
            let back = cw_to_tau(tau_to_cw(tau).unwrap());
            prop_assert!((back - tau).abs() <= 1e-12 * tau.max(1e-3));
        }

        #[test]
        fn rounding_in_range(w in 1.0f64..1e7) {
            let r = round_to_pow2(w);
            prop_assert!(r.ecw <= ECW_MAX);
            prop_assert_eq!(r.cw, 1u32 << r.ecw);
            if w < 2f64.powf(14.5) {
                prop_assert!((r.cw as f64 / w).log2().abs() <= 0.5 + 1e-12);
            }
        }
    }
}
