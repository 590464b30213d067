//! Slot-level Monte Carlo simulator of multi-rate DCF.
//!
//! Time advances in virtual slots: an idle slot lasts `T_e`, a busy slot
//! lasts the success or failure duration of the frame(s) it holds. A slot
//! with two or more transmitters is a collision timed by the failure
//! duration of the transmitter that is last in model order.
//!
//! Two modes answer different questions:
//!
//! - [`run_p_persistent`]: each station transmits in each slot
//!   independently with a fixed probability. This is exactly the model's
//!   assumption, so it validates the closed-form expressions.
//! - [`run_backoff`] / [`BackoffSim`]: stations run backoff counters with
//!   per-station windows. Failures (collision or noise) double the window up
//!   to its maximum stage, successes reset it. This validates the mapping
//!   from windows to attempt probabilities and drives the control loop.

mod backoff;
mod capture;
mod persistent;
mod trace;

pub use backoff::{run_backoff, BackoffParams, BackoffSim};
pub use capture::{resolve_capture, CaptureOutcome};
pub use persistent::run_p_persistent;
pub use trace::{write_trace_csv, SlotOutcome, SlotRecord};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    PPersistent,
    Backoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureConfig {
    /// Minimum power margin (dB) of the strongest frame over the next one
    /// for the strongest to be decoded.
    pub power_threshold_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_slots: u64,
    pub seed: u64,
    pub mode: SimMode,
    pub capture: Option<CaptureConfig>,
    /// Slots simulated before counting starts. In p-persistent mode slots
    /// are independent, so warm-up slots are skipped rather than simulated.
    pub warmup_slots: u64,
    /// Record one [`SlotRecord`] per slot.
    pub trace: bool,
    pub exec: Exec,
}

impl SimConfig {
    pub fn new(mode: SimMode, n_slots: u64, seed: u64) -> Self {
        Self {
            n_slots,
            seed,
            mode,
            capture: None,
            warmup_slots: 0,
            trace: false,
            exec: Exec::default(),
        }
    }

    pub fn with_capture(mut self, power_threshold_db: f64) -> Self {
        self.capture = Some(CaptureConfig { power_threshold_db });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slots <= self.warmup_slots {
            return Err(Error::validation("sim.n_slots", "must exceed warmup_slots"));
        }
        if let Some(c) = self.capture {
            if !(c.power_threshold_db.is_finite() && c.power_threshold_db >= 0.0) {
                return Err(Error::validation(
                    "sim.capture.power_threshold_db",
                    "must be a non-negative finite margin",
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn measured_slots(&self) -> u64 {
        self.n_slots - self.warmup_slots
    }
}

/// Per-station counters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StationCounts {
    pub attempts: u64,
    pub successes: u64,
    pub noise_failures: u64,
    pub collisions: u64,
    /// Time of slots in which this station's frame succeeded.
    pub success_time_us: f64,
    /// Time of slots in which this station transmitted and its frame failed.
    pub failure_time_us: f64,
    /// Sum of squared durations of slots this station transmitted in.
    pub busy_sq_us2: f64,
    pub delivered_bits: f64,
    /// Sum of the success durations of delivered frames. Differs from
    /// `success_time_us` only for captured frames, whose slot lasts as long
    /// as the collision.
    pub frame_time_us: f64,
}

impl StationCounts {
    pub fn busy_time_us(&self) -> f64 {
        self.success_time_us + self.failure_time_us
    }

    fn merge(&mut self, o: &StationCounts) {
        self.attempts += o.attempts;
        self.successes += o.successes;
        self.noise_failures += o.noise_failures;
        self.collisions += o.collisions;
        self.success_time_us += o.success_time_us;
        self.failure_time_us += o.failure_time_us;
        self.busy_sq_us2 += o.busy_sq_us2;
        self.delivered_bits += o.delivered_bits;
        self.frame_time_us += o.frame_time_us;
    }
}

/// Counts and empirical rates from a run. Station vectors use caller order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub stations: Vec<StationCounts>,
    pub payload_bits: Vec<f64>,
    pub slots: u64,
    pub empty_slots: u64,
    pub success_slots: u64,
    pub failure_slots: u64,
    pub elapsed_us: f64,
    pub elapsed_sq_us2: f64,
    pub trace: Option<Vec<SlotRecord>>,
}

impl SimResult {
    pub(crate) fn empty(payload_bits: Vec<f64>, trace: bool) -> Self {
        Self {
            stations: vec![StationCounts::default(); payload_bits.len()],
            payload_bits,
            slots: 0,
            empty_slots: 0,
            success_slots: 0,
            failure_slots: 0,
            elapsed_us: 0.0,
            elapsed_sq_us2: 0.0,
            trace: trace.then(Vec::new),
        }
    }

    /// Appends `other`, which must describe the same stations.
    pub fn merge(&mut self, other: SimResult) {
        for (a, b) in self.stations.iter_mut().zip(&other.stations) {
            a.merge(b);
        }
        self.slots += other.slots;
        self.empty_slots += other.empty_slots;
        self.success_slots += other.success_slots;
        self.failure_slots += other.failure_slots;
        self.elapsed_us += other.elapsed_us;
        self.elapsed_sq_us2 += other.elapsed_sq_us2;
        match (&mut self.trace, other.trace) {
            (Some(t), Some(o)) => t.extend(o),
            (None, Some(o)) => self.trace = Some(o),
            _ => {}
        }
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    fn n(&self) -> f64 {
        self.slots as f64
    }

    pub fn p_empty(&self) -> f64 {
        self.empty_slots as f64 / self.n()
    }

    pub fn p_success(&self) -> f64 {
        self.success_slots as f64 / self.n()
    }

    pub fn p_failure(&self) -> f64 {
        self.failure_slots as f64 / self.n()
    }

    /// Binomial standard error of a slot-type frequency.
    pub fn slot_prob_se(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.n()).sqrt()
    }

    pub fn tau(&self, i: usize) -> f64 {
        self.stations[i].attempts as f64 / self.n()
    }

    pub fn tau_se(&self, i: usize) -> f64 {
        self.slot_prob_se(self.tau(i))
    }

    /// Delivered payload per unit time, Mb/s.
    pub fn throughput(&self, i: usize) -> f64 {
        self.stations[i].delivered_bits / self.elapsed_us
    }

    /// Fraction of elapsed time spent in slots this station transmitted in.
    pub fn airtime(&self, i: usize) -> f64 {
        self.stations[i].busy_time_us() / self.elapsed_us
    }

    pub fn mean_slot_us(&self) -> f64 {
        self.elapsed_us / self.n()
    }

    /// Delta-method standard error of a ratio of per-slot sums `Σa / Σb`
    /// given `Σa²`, `Σab` and the ratio.
    fn ratio_se(&self, sum_a2: f64, sum_ab: f64, ratio: f64) -> f64 {
        let n = self.n();
        let var = (sum_a2 - 2.0 * ratio * sum_ab + ratio * ratio * self.elapsed_sq_us2) / n;
        (var.max(0.0) / n).sqrt() / self.mean_slot_us()
    }

    /// Standard error of [`SimResult::throughput`] for a constant payload.
    pub fn throughput_se(&self, i: usize) -> f64 {
        let s = &self.stations[i];
        let l = self.payload_bits[i];
        self.ratio_se(
            l * l * s.successes as f64,
            l * s.success_time_us,
            self.throughput(i),
        )
    }

    pub fn airtime_se(&self, i: usize) -> f64 {
        let s = &self.stations[i];
        self.ratio_se(s.busy_sq_us2, s.busy_sq_us2, self.airtime(i))
    }
}

/// Per-station constants the slot resolver needs, caller order.
#[derive(Debug, Clone)]
pub(crate) struct SlotTable {
    pub success_us: Vec<f64>,
    pub failure_us: Vec<f64>,
    pub link_error: Vec<f64>,
    pub power_dbm: Vec<f64>,
    pub payload_bits: Vec<f64>,
    /// Position in model order; collisions are timed by the highest rank.
    pub rank: Vec<usize>,
    pub capture: Option<CaptureConfig>,
}

/// Draws a uniform value in [0, 1) with 53 bits of precision.
#[inline]
pub(crate) fn unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Outcome of one busy slot for each of its transmitters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TxFate {
    Success,
    Noise,
    Collided,
}

impl SlotTable {
    /// Resolves one slot with the given transmitters, updates `out`, and
    /// returns the slot duration. `fates` receives one entry per attempter.
    pub fn resolve<R: Rng + ?Sized>(
        &self,
        attempters: &[usize],
        slot_index: u64,
        empty_slot_us: f64,
        rng: &mut R,
        out: &mut SimResult,
        fates: &mut Vec<TxFate>,
    ) -> f64 {
        fates.clear();
        let (duration, outcome, station) = match attempters {
            [] => {
                out.empty_slots += 1;
                (empty_slot_us, SlotOutcome::Idle, None)
            }
            &[k] => {
                if unit(rng) < self.link_error[k] {
                    fates.push(TxFate::Noise);
                    (self.failure_us[k], SlotOutcome::NoiseFailure, Some(k))
                } else {
                    fates.push(TxFate::Success);
                    (self.success_us[k], SlotOutcome::Success, Some(k))
                }
            }
            many => {
                let h = *many.iter().max_by_key(|&&k| self.rank[k]).expect("non-empty");
                // drawn unconditionally so enabling capture does not shift the
                // random stream
                let noise_draw = unit(rng);
                let captured = self.capture.and_then(|c| {
                    let powers: Vec<f64> = many.iter().map(|&k| self.power_dbm[k]).collect();
                    match resolve_capture(&powers, c.power_threshold_db) {
                        CaptureOutcome::Captured(pos) => Some(many[pos]),
                        CaptureOutcome::Collision => None,
                    }
                });
                let mut outcome = SlotOutcome::Collision;
                let mut station = h;
                for &k in many {
                    if Some(k) == captured {
                        if noise_draw < self.link_error[k] {
                            fates.push(TxFate::Noise);
                        } else {
                            fates.push(TxFate::Success);
                            outcome = SlotOutcome::Capture;
                            station = k;
                        }
                    } else {
                        fates.push(TxFate::Collided);
                    }
                }
                (self.failure_us[h], outcome, Some(station))
            }
        };

        let mut any_success = false;
        for (&k, &fate) in attempters.iter().zip(fates.iter()) {
            let s = &mut out.stations[k];
            s.attempts += 1;
            s.busy_sq_us2 += duration * duration;
            match fate {
                TxFate::Success => {
                    any_success = true;
                    s.successes += 1;
                    s.success_time_us += duration;
                    s.delivered_bits += self.payload_bits[k];
                    s.frame_time_us += self.success_us[k];
                }
                TxFate::Noise => {
                    s.noise_failures += 1;
                    s.failure_time_us += duration;
                }
                TxFate::Collided => {
                    s.collisions += 1;
                    s.failure_time_us += duration;
                }
            }
        }
        if !attempters.is_empty() {
            if any_success {
                out.success_slots += 1;
            } else {
                out.failure_slots += 1;
            }
        }
        out.slots += 1;
        out.elapsed_us += duration;
        out.elapsed_sq_us2 += duration * duration;
        if let Some(t) = out.trace.as_mut() {
            t.push(SlotRecord {
                slot_index,
                outcome,
                station,
                duration_us: duration,
            });
        }
        duration
    }
}
