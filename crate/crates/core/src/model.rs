//! Closed-form multi-rate DCF model: slot-event probabilities, per-station
//! throughput and airtime, network utility, and the log-transformed airtime
//! map used by the optimizer.
//!
//! Stations are internally re-indexed by ascending success duration (see
//! [`crate::phy::order_stations`]); a failed slot lasts as long as the
//! failure of its highest-index transmitter. Public methods on [`Network`]
//! take and return vectors in the caller's order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::phy::{order_by_duration, PhyProfile, StationSpec};

/// Upper clamp on attempt probabilities when more than one station contends,
/// keeping `x = τ/(1-τ)` finite.
pub const TAU_CEILING: f64 = 1.0 - 1e-9;

/// Per-station attempt probabilities τ.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptVector {
    tau: Vec<f64>,
}

impl AttemptVector {
    /// Validates `0 ≤ τ_i ≤ 1`. For two or more stations values above
    /// [`TAU_CEILING`] are clamped; a single station may use τ = 1.
    pub fn new(mut tau: Vec<f64>) -> Result<Self> {
        if tau.is_empty() {
            return Err(Error::validation("tau", "empty attempt vector"));
        }
        for (i, t) in tau.iter().enumerate() {
            if !(0.0..=1.0).contains(t) {
                return Err(Error::validation(format!("tau[{i}]"), "must lie in [0, 1]"));
            }
        }
        if tau.len() > 1 {
            for t in &mut tau {
                *t = t.min(TAU_CEILING);
            }
        }
        Ok(Self { tau })
    }

    /// Builds τ from log-transformed variables `x̃ = ln(τ/(1-τ))`.
    pub fn from_log_x(log_x: &[f64]) -> Result<Self> {
        Self::new(log_x.iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// `x_i = τ_i/(1-τ_i)`; infinite for τ = 1.
    pub fn x(&self) -> Vec<f64> {
        self.tau
            .iter()
            .map(|&t| if t >= 1.0 { f64::INFINITY } else { t / (1.0 - t) })
            .collect()
    }

    pub fn log_x(&self) -> Vec<f64> {
        self.tau.iter().map(|&t| t.ln() - (-t).ln_1p()).collect()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `1 - sigmoid(v)` without cancellation.
pub(crate) fn sigmoid_complement(v: f64) -> f64 {
    sigmoid(-v)
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Probabilities and mean durations of the three slot types.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotDistribution {
    pub p_empty: f64,
    pub p_success: f64,
    pub p_failure: f64,
    /// Mean duration of a success slot, zero when `p_success` is zero.
    pub t_success: f64,
    /// Mean duration of a failure slot, zero when `p_failure` is zero.
    pub t_failure: f64,
    pub t_slot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerStationMetrics {
    pub p_success: f64,
    /// Probability that a slot is a failure whose highest-index transmitter
    /// is this station.
    pub p_highest_failure: f64,
    pub p_collision: f64,
    pub p_failure_cond: f64,
    pub throughput_mbps: f64,
    pub airtime: f64,
}

/// Sum of natural logs of throughputs in Mb/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Utility {
    /// `-inf` when any throughput is zero.
    pub value: f64,
    pub has_zero_throughput: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverView {
    /// `X(x)`, in µs.
    pub big_x: f64,
    /// `1 - p_n` per station, caller order.
    pub z: Vec<f64>,
    pub utility: Utility,
}

/// `p_i = 1 - Π_{j≠i}(1-τ_j)`.
pub fn collision_prob(i: usize, tau: &[f64]) -> f64 {
    1.0 - others_idle(i, tau)
}

fn others_idle(i: usize, tau: &[f64]) -> f64 {
    tau.iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, t)| 1.0 - t)
        .product()
}

/// `p_s,i = τ_i (1-p_n,i) Π_{j≠i}(1-τ_j)`.
pub fn success_prob(i: usize, tau: &[f64], link_error: &[f64]) -> f64 {
    tau[i] * (1.0 - link_error[i]) * others_idle(i, tau)
}

/// Probability that a slot is a failure whose highest-index transmitter is
/// `i`. `success_durations` must be non-decreasing (stations in model order).
pub fn highest_index_failure_prob(
    i: usize,
    tau: &[f64],
    link_error: &[f64],
    success_durations: &[f64],
) -> Result<f64> {
    if let Some(k) = success_durations.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::Unordered { index: k + 1 });
    }
    let below: f64 = tau[..i].iter().map(|t| 1.0 - t).product();
    let above: f64 = tau[i + 1..].iter().map(|t| 1.0 - t).product();
    Ok(tau[i] * link_error[i] * below * above + tau[i] * (1.0 - below) * above)
}

pub fn utility(throughputs: &[f64]) -> Utility {
    if throughputs.iter().any(|&s| s <= 0.0) {
        return Utility {
            value: f64::NEG_INFINITY,
            has_zero_throughput: true,
        };
    }
    Utility {
        value: throughputs.iter().map(|s| s.ln()).sum(),
        has_zero_throughput: false,
    }
}

/// `(ΣS)² / (N ΣS²)`. Returns 1 for an all-zero vector.
pub fn jain_index(throughputs: &[f64]) -> f64 {
    let sum: f64 = throughputs.iter().sum();
    let sq: f64 = throughputs.iter().map(|s| s * s).sum();
    if sq == 0.0 {
        return 1.0;
    }
    sum * sum / (throughputs.len() as f64 * sq)
}

/// Prefix and suffix products of `(1-τ)`: `pre[i] = Π_{j<i}`, `suf[i] = Π_{j>i}`.
fn idle_products(tau: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = tau.len();
    let mut pre = vec![1.0; n];
    let mut suf = vec![1.0; n];
    for i in 1..n {
        pre[i] = pre[i - 1] * (1.0 - tau[i - 1]);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        suf[i] = suf[i + 1] * (1.0 - tau[i + 1]);
    }
    (pre, suf)
}

/// A set of stations re-indexed into model order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    /// `order[k]` is the caller index of the k-th shortest station.
    order: Vec<usize>,
    empty_slot: f64,
    success: Vec<f64>,
    failure: Vec<f64>,
    link_error: Vec<f64>,
    payload: Vec<f64>,
    approximate: bool,
}

impl Network {
    pub fn new(specs: &[StationSpec], profile: &PhyProfile) -> Result<Self> {
        profile.validate()?;
        if specs.is_empty() {
            return Err(Error::validation("stations", "at least one station is required"));
        }
        for s in specs {
            s.validate(profile)?;
        }
        let success = specs
            .iter()
            .map(|s| profile.tx_duration_success(s))
            .collect::<Result<Vec<_>>>()?;
        let failure = specs
            .iter()
            .map(|s| profile.failure_duration_used(s))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<&str> = specs.iter().map(|s| s.label.as_str()).collect();
        let order = order_by_duration(&success, &labels);
        Ok(Self {
            empty_slot: profile.empty_slot_us,
            success: order.iter().map(|&k| success[k]).collect(),
            failure: order.iter().map(|&k| failure[k]).collect(),
            link_error: order.iter().map(|&k| specs[k].link_error).collect(),
            payload: order.iter().map(|&k| specs[k].payload_bits).collect(),
            approximate: profile.approximate_tu_as_ts,
            order,
        })
    }

    /// A network known only through measured success durations: no link
    /// errors, failure durations equal to success durations, and zero
    /// payloads (throughputs are therefore zero).
    pub fn from_durations(empty_slot_us: f64, success_us: &[f64]) -> Result<Self> {
        if success_us.is_empty() {
            return Err(Error::validation("durations", "at least one station is required"));
        }
        if !(empty_slot_us > 0.0) || success_us.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::validation("durations", "durations must be positive"));
        }
        let labels: Vec<String> = (0..success_us.len()).map(|i| format!("{i:08}")).collect();
        let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
        let order = order_by_duration(success_us, &labels);
        let success: Vec<f64> = order.iter().map(|&k| success_us[k]).collect();
        Ok(Self {
            empty_slot: empty_slot_us,
            failure: success.clone(),
            success,
            link_error: vec![0.0; order.len()],
            payload: vec![0.0; order.len()],
            approximate: true,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn empty_slot(&self) -> f64 {
        self.empty_slot
    }

    /// Success durations in model order.
    pub fn ordered_success_durations(&self) -> &[f64] {
        &self.success
    }

    /// Failure durations in model order.
    pub fn ordered_failure_durations(&self) -> &[f64] {
        &self.failure
    }

    pub fn ordered_link_errors(&self) -> &[f64] {
        &self.link_error
    }

    pub fn ordered_payloads(&self) -> &[f64] {
        &self.payload
    }

    /// Success durations in caller order.
    pub fn success_durations(&self) -> Vec<f64> {
        self.to_caller(self.success.clone())
    }

    pub fn approximates_failure_duration(&self) -> bool {
        self.approximate
    }

    pub fn to_ordered(&self, caller: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&k| caller[k]).collect()
    }

    pub fn to_caller(&self, ordered: Vec<f64>) -> Vec<f64> {
        let mut out = vec![0.0; ordered.len()];
        for (k, v) in ordered.into_iter().enumerate() {
            out[self.order[k]] = v;
        }
        out
    }

    fn check_len(&self, tau: &AttemptVector) {
        assert_eq!(
            tau.len(),
            self.len(),
            "attempt vector length does not match the network"
        );
    }

    fn success_probs(&self, tau: &[f64], pre: &[f64], suf: &[f64]) -> Vec<f64> {
        (0..tau.len())
            .map(|i| tau[i] * (1.0 - self.link_error[i]) * pre[i] * suf[i])
            .collect()
    }

    fn failure_probs(&self, tau: &[f64], pre: &[f64], suf: &[f64]) -> Vec<f64> {
        (0..tau.len())
            .map(|i| {
                tau[i] * self.link_error[i] * pre[i] * suf[i] + tau[i] * (1.0 - pre[i]) * suf[i]
            })
            .collect()
    }

    pub fn slot_distribution(&self, tau: &AttemptVector) -> SlotDistribution {
        self.check_len(tau);
        let t = self.to_ordered(tau.tau());
        self.slot_distribution_ordered(&t)
    }

    fn slot_distribution_ordered(&self, t: &[f64]) -> SlotDistribution {
        let (pre, suf) = idle_products(t);
        let ps = self.success_probs(t, &pre, &suf);
        let pu = self.failure_probs(t, &pre, &suf);
        let p_empty: f64 = t.iter().map(|x| 1.0 - x).product();
        let p_success: f64 = ps.iter().sum();
        let p_failure = 1.0 - p_empty - p_success;
        let busy_s: f64 = ps.iter().zip(&self.success).map(|(p, d)| p * d).sum();
        let busy_u: f64 = pu.iter().zip(&self.failure).map(|(p, d)| p * d).sum();
        SlotDistribution {
            p_empty,
            p_success,
            p_failure,
            t_success: if p_success > 0.0 { busy_s / p_success } else { 0.0 },
            t_failure: if pu.iter().sum::<f64>() > 0.0 {
                busy_u / pu.iter().sum::<f64>()
            } else {
                0.0
            },
            t_slot: p_empty * self.empty_slot + busy_s + busy_u,
        }
    }

    /// `S_i = p_s,i L_i / T_slot` in Mb/s, caller order.
    pub fn throughput(&self, tau: &AttemptVector) -> Vec<f64> {
        self.check_len(tau);
        let t = self.to_ordered(tau.tau());
        let (pre, suf) = idle_products(&t);
        let slot = self.slot_distribution_ordered(&t).t_slot;
        let ps = self.success_probs(&t, &pre, &suf);
        let s = ps.iter().zip(&self.payload).map(|(p, l)| p * l / slot).collect();
        self.to_caller(s)
    }

    /// `S_i = (1-p_n,i) x_i L_i / X`. Only equal to [`Network::throughput`]
    /// when failure durations equal success durations.
    pub fn throughput_x_form(&self, tau: &AttemptVector) -> Vec<f64> {
        self.check_len(tau);
        let x = self.to_ordered(&tau.x());
        let big_x = big_x(self.empty_slot, &self.success, &x);
        let s = (0..x.len())
            .map(|i| {
                if x[i].is_infinite() {
                    // single station at τ = 1: X grows like T_s x
                    (1.0 - self.link_error[i]) * self.payload[i] / self.success[i]
                } else {
                    (1.0 - self.link_error[i]) * x[i] * self.payload[i] / big_x
                }
            })
            .collect();
        self.to_caller(s)
    }

    /// Fraction of channel time occupied by each station's transmissions,
    /// successful or not, caller order.
    ///
    /// With `approximate_tu_as_ts` the result does not read link error
    /// probabilities at all.
    pub fn airtime(&self, tau: &AttemptVector) -> Vec<f64> {
        self.check_len(tau);
        let t = self.to_ordered(tau.tau());
        let a = if self.approximate {
            AirtimeMap::new(self.empty_slot, &self.success).airtime(&t).0
        } else {
            self.airtime_exact_ordered(&t)
        };
        self.to_caller(a)
    }

    fn airtime_exact_ordered(&self, t: &[f64]) -> Vec<f64> {
        let (pre, suf) = idle_products(t);
        let slot = self.slot_distribution_ordered(t).t_slot;
        let n = t.len();
        let mut higher = vec![0.0; n + 1];
        for j in (0..n).rev() {
            higher[j] = higher[j + 1] + t[j] * suf[j] * self.failure[j];
        }
        (0..n)
            .map(|i| {
                let z = 1.0 - self.link_error[i];
                let own = z * pre[i] * suf[i] * self.success[i]
                    + (suf[i] - z * pre[i] * suf[i]) * self.failure[i];
                t[i] * (own + higher[i + 1]) / slot
            })
            .collect()
    }

    /// Airtime in the transformed variables `x`. Matches
    /// [`Network::airtime`] when failure durations equal success durations.
    pub fn airtime_x_form(&self, tau: &AttemptVector) -> Vec<f64> {
        self.check_len(tau);
        let x = self.to_ordered(&tau.x());
        let n = x.len();
        if n == 1 && x[0].is_infinite() {
            return vec![1.0];
        }
        let ts = &self.success;
        let big_x = big_x(self.empty_slot, ts, &x);
        let a = (0..n)
            .map(|i| {
                let own = ts[i] * x[..i].iter().map(|v| 1.0 + v).product::<f64>();
                let later: f64 = (i + 1..n)
                    .map(|j| {
                        let p: f64 = (0..j).filter(|&k| k != i).map(|k| 1.0 + x[k]).product();
                        ts[j] * x[j] * p
                    })
                    .sum();
                x[i] / big_x * (own + later)
            })
            .collect();
        self.to_caller(a)
    }

    pub fn metrics(&self, tau: &AttemptVector) -> Vec<PerStationMetrics> {
        self.check_len(tau);
        let t = self.to_ordered(tau.tau());
        let (pre, suf) = idle_products(&t);
        let ps = self.success_probs(&t, &pre, &suf);
        let pu = self.failure_probs(&t, &pre, &suf);
        let throughput = self.to_ordered(&self.throughput(tau));
        let airtime = self.to_ordered(&self.airtime(tau));
        let ordered: Vec<PerStationMetrics> = (0..t.len())
            .map(|i| {
                let pc = 1.0 - pre[i] * suf[i];
                PerStationMetrics {
                    p_success: ps[i],
                    p_highest_failure: pu[i],
                    p_collision: pc,
                    p_failure_cond: 1.0 - (1.0 - self.link_error[i]) * (1.0 - pc),
                    throughput_mbps: throughput[i],
                    airtime: airtime[i],
                }
            })
            .collect();
        let mut out = ordered.clone();
        for (k, m) in ordered.into_iter().enumerate() {
            out[self.order[k]] = m;
        }
        out
    }

    pub fn utility(&self, tau: &AttemptVector) -> Utility {
        utility(&self.throughput(tau))
    }

    pub fn solver_view(&self, tau: &AttemptVector) -> SolverView {
        self.check_len(tau);
        let x = self.to_ordered(&tau.x());
        SolverView {
            big_x: big_x(self.empty_slot, &self.success, &x),
            z: self.to_caller(self.link_error.iter().map(|p| 1.0 - p).collect()),
            utility: self.utility(tau),
        }
    }

    pub fn airtime_map(&self) -> AirtimeMap<'_> {
        AirtimeMap::new(self.empty_slot, &self.success)
    }
}

/// `X(x) = T_e + Σ_j T_s,j x_j Π_{k<j}(1+x_k)`.
fn big_x(empty_slot: f64, ts: &[f64], x: &[f64]) -> f64 {
    let mut acc = empty_slot;
    let mut prefix = 1.0;
    for (d, v) in ts.iter().zip(x) {
        acc += d * v * prefix;
        prefix *= 1.0 + v;
    }
    acc
}

/// Airtime as a function of attempt probabilities over model-ordered success
/// durations, with failure durations taken equal to success durations.
///
/// In log variables `x̃ = ln x`, airtime is the gradient of `ln X(e^x̃)`, so
/// its Jacobian is the Hessian of that convex function.
#[derive(Debug, Clone, Copy)]
pub struct AirtimeMap<'a> {
    empty_slot: f64,
    durations: &'a [f64],
}

impl<'a> AirtimeMap<'a> {
    pub fn new(empty_slot: f64, ordered_durations: &'a [f64]) -> Self {
        Self {
            empty_slot,
            durations: ordered_durations,
        }
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    /// Returns the airtime vector and `T_slot`.
    pub fn airtime(&self, tau: &[f64]) -> (Vec<f64>, f64) {
        let idle: Vec<f64> = tau.iter().map(|t| 1.0 - t).collect();
        self.airtime_split(tau, &idle)
    }

    /// Same as [`AirtimeMap::airtime`] with `1-τ` supplied separately, which
    /// keeps precision when τ is close to one.
    fn airtime_split(&self, tau: &[f64], idle: &[f64]) -> (Vec<f64>, f64) {
        let n = tau.len();
        let (g, tail, p_empty) = self.terms(tau, idle);
        let slot = self.empty_slot * p_empty + tail[0];
        let a = (0..n).map(|i| (g[i] + tau[i] * tail[i + 1]) / slot).collect();
        (a, slot)
    }

    /// `g_m = T_s,m τ_m Π_{k>m}(1-τ_k)`, tail sums `R_m = Σ_{j≥m} g_j`
    /// (length n+1), and `P_e`.
    fn terms(&self, tau: &[f64], idle: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let n = tau.len();
        let mut g = vec![0.0; n];
        let mut tail = vec![0.0; n + 1];
        let mut suffix = 1.0;
        for m in (0..n).rev() {
            g[m] = self.durations[m] * tau[m] * suffix;
            tail[m] = tail[m + 1] + g[m];
            suffix *= idle[m];
        }
        (g, tail, suffix)
    }

    pub fn airtime_log(&self, log_x: &[f64]) -> (Vec<f64>, f64) {
        let tau: Vec<f64> = log_x.iter().map(|&v| sigmoid(v)).collect();
        let idle: Vec<f64> = log_x.iter().map(|&v| sigmoid_complement(v)).collect();
        self.airtime_split(&tau, &idle)
    }

    /// `ln X(e^x̃)`.
    pub fn log_x(&self, log_x: &[f64]) -> f64 {
        let (_, slot) = self.airtime_log(log_x);
        slot.ln() + log_x.iter().map(|&v| softplus(v)).sum::<f64>()
    }

    /// Airtime and its Jacobian `∂T_i/∂x̃_j` (row-major, model order).
    pub fn jacobian_log(&self, log_x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = log_x.len();
        let tau: Vec<f64> = log_x.iter().map(|&v| sigmoid(v)).collect();
        let idle: Vec<f64> = log_x.iter().map(|&v| sigmoid_complement(v)).collect();
        let (g, tail, p_empty) = self.terms(&tau, &idle);
        let slot = self.empty_slot * p_empty + tail[0];
        let a: Vec<f64> = (0..n).map(|i| (g[i] + tau[i] * tail[i + 1]) / slot).collect();
        let mut jac = vec![vec![0.0; n]; n];
        for i in 0..n {
            jac[i][i] = a[i] * (1.0 - a[i]);
            for j in i + 1..n {
                let h = tau[i] * (g[j] + tau[j] * tail[j + 1]) / slot - a[i] * a[j];
                jac[i][j] = h;
                jac[j][i] = h;
            }
        }
        (a, jac)
    }
}

/// Worst midpoint-convexity violations found along random segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport {
    pub segments: usize,
    /// Largest `f(mid) - (f(a)+f(b))/2` for `f = ln X(e^x̃)`, floored at 0.
    pub worst_log_x: f64,
    /// Same for the convex part of the negated utility,
    /// `N ln X(e^x̃) - Σ x̃`.
    pub worst_neg_utility: f64,
}

impl ConvexityReport {
    pub fn worst(&self) -> f64 {
        self.worst_log_x.max(self.worst_neg_utility)
    }
}

/// Samples `segments` random segments with endpoints uniform in
/// `[-range, range]^N` of the log-transformed space and checks midpoint
/// convexity.
pub fn convexity_probe<R: Rng + ?Sized>(
    network: &Network,
    rng: &mut R,
    segments: usize,
    range: f64,
) -> ConvexityReport {
    let map = network.airtime_map();
    let n = network.len() as f64;
    let neg_u = |v: &[f64]| n * map.log_x(v) - v.iter().sum::<f64>();
    let mut report = ConvexityReport {
        segments,
        worst_log_x: 0.0,
        worst_neg_utility: 0.0,
    };
    for _ in 0..segments {
        let a: Vec<f64> = (0..network.len()).map(|_| rng.random_range(-range..range)).collect();
        let b: Vec<f64> = (0..network.len()).map(|_| rng.random_range(-range..range)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 0.5 * (p + q)).collect();
        let v1 = map.log_x(&mid) - 0.5 * (map.log_x(&a) + map.log_x(&b));
        let v2 = neg_u(&mid) - 0.5 * (neg_u(&a) + neg_u(&b));
        report.worst_log_x = report.worst_log_x.max(v1);
        report.worst_neg_utility = report.worst_neg_utility.max(v2);
    }
    report
}
