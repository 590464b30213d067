use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CaptureConfig, SimConfig, SimResult, SlotTable, TxFate};
use crate::error::{Error, Result};
use crate::phy::{PhyProfile, StationSpec};

/// Contention window schedule: `CW = cw_min · 2^stage`, `stage ≤ max_stage`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackoffParams {
    pub cw_min: u32,
    pub max_stage: u32,
}

impl BackoffParams {
    /// Fixed window, no doubling.
    pub fn fixed(cw: u32) -> Self {
        Self {
            cw_min: cw,
            max_stage: 0,
        }
    }

    pub fn from_ecw(ecw: u8) -> Self {
        Self::fixed(1 << ecw.min(crate::optimizer::ECW_MAX))
    }

    pub fn dcf(cw_min: u32, max_stage: u32) -> Self {
        Self { cw_min, max_stage }
    }

    pub fn cw_at(&self, stage: u32) -> u64 {
        (self.cw_min as u64) << stage.min(self.max_stage).min(40)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cw_min == 0 {
            return Err(Error::validation("backoff.cw_min", "must be at least 1"));
        }
        Ok(())
    }
}

/// Stateful backoff simulator. Station state (stage, counter) persists
/// across calls, so the simulation can be advanced in windows while rates,
/// powers, windows and membership change in between.
#[derive(Debug, Clone)]
pub struct BackoffSim {
    table: SlotTable,
    specs: Vec<StationSpec>,
    profile: PhyProfile,
    params: Vec<BackoffParams>,
    stage: Vec<u32>,
    counter: Vec<u64>,
    active: Vec<bool>,
    rng: ChaCha8Rng,
    clock_us: f64,
    slot_index: u64,
    trace: bool,
    attempters: Vec<usize>,
    fates: Vec<TxFate>,
}

impl BackoffSim {
    pub fn new(
        specs: &[StationSpec],
        profile: &PhyProfile,
        params: &[BackoffParams],
        seed: u64,
        capture: Option<CaptureConfig>,
    ) -> Result<Self> {
        if params.len() != specs.len() {
            return Err(Error::validation("backoff", "one window schedule per station is required"));
        }
        for p in params {
            p.validate()?;
        }
        let table = SlotTable::build(specs, profile, capture)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counter = params.iter().map(|p| rng.random_range(0..p.cw_at(0))).collect();
        Ok(Self {
            table,
            specs: specs.to_vec(),
            profile: profile.clone(),
            params: params.to_vec(),
            stage: vec![0; specs.len()],
            counter,
            active: vec![true; specs.len()],
            rng,
            clock_us: 0.0,
            slot_index: 0,
            trace: false,
            attempters: Vec::with_capacity(specs.len()),
            fates: Vec::with_capacity(specs.len()),
        })
    }

    pub fn set_trace(&mut self, on: bool) {
        self.trace = on;
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[StationSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[BackoffParams] {
        &self.params
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn clock_us(&self) -> f64 {
        self.clock_us
    }

    pub fn station_index(&self, label: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.label == label)
    }

    /// The new schedule applies from the station's next backoff draw.
    pub fn set_params(&mut self, i: usize, params: BackoffParams) -> Result<()> {
        params.validate()?;
        self.params[i] = params;
        self.stage[i] = self.stage[i].min(params.max_stage);
        Ok(())
    }

    fn rebuild(&mut self, specs: Vec<StationSpec>) -> Result<()> {
        let table = SlotTable::build(&specs, &self.profile, self.table.capture)?;
        self.table = table;
        self.specs = specs;
        Ok(())
    }

    pub fn set_rate(&mut self, i: usize, rate_mbps: f64) -> Result<()> {
        let mut specs = self.specs.clone();
        specs[i].rate_mbps = rate_mbps;
        self.rebuild(specs)
    }

    pub fn set_link_error(&mut self, i: usize, p: f64) -> Result<()> {
        let mut specs = self.specs.clone();
        specs[i].link_error = p;
        self.rebuild(specs)
    }

    pub fn set_power(&mut self, i: usize, dbm: f64) -> Result<()> {
        let mut specs = self.specs.clone();
        specs[i].tx_power_dbm = Some(dbm);
        self.rebuild(specs)
    }

    /// A (re)joining station starts from stage 0 with a fresh counter.
    pub fn set_active(&mut self, i: usize, active: bool) {
        if active && !self.active[i] {
            self.stage[i] = 0;
            self.counter[i] = self.rng.random_range(0..self.params[i].cw_at(0));
        }
        self.active[i] = active;
    }

    fn fresh_result(&self) -> SimResult {
        SimResult::empty(self.table.payload_bits.clone(), self.trace)
    }

    /// Simulates exactly `n` slots.
    pub fn run_slots(&mut self, n: u64) -> SimResult {
        let mut out = self.fresh_result();
        let mut done = 0;
        while done < n {
            done += self.advance(&mut out, n - done);
        }
        out
    }

    /// Simulates until the virtual clock reaches `t_end_us`; the last slot
    /// may end past it.
    pub fn run_until(&mut self, t_end_us: f64) -> SimResult {
        let mut out = self.fresh_result();
        let te = self.profile.empty_slot_us;
        while self.clock_us < t_end_us {
            let max_idle = (((t_end_us - self.clock_us) / te).ceil() as u64).max(1);
            self.advance(&mut out, max_idle);
        }
        out
    }

    /// Runs either one busy slot or a stretch of at most `max_idle` idle
    /// slots. Returns the number of slots consumed.
    fn advance(&mut self, out: &mut SimResult, max_idle: u64) -> u64 {
        let te = self.profile.empty_slot_us;
        let next = (0..self.len())
            .filter(|&i| self.active[i])
            .map(|i| self.counter[i])
            .min();
        let idle = match next {
            Some(0) => 0,
            Some(c) => c.min(max_idle),
            None => max_idle,
        };
        if idle > 0 {
            for i in 0..self.len() {
                if self.active[i] {
                    self.counter[i] -= idle;
                }
            }
            out.slots += idle;
            out.empty_slots += idle;
            out.elapsed_us += idle as f64 * te;
            out.elapsed_sq_us2 += idle as f64 * te * te;
            if let Some(t) = out.trace.as_mut() {
                t.extend((0..idle).map(|k| super::SlotRecord {
                    slot_index: self.slot_index + k,
                    outcome: super::SlotOutcome::Idle,
                    station: None,
                    duration_us: te,
                }));
            }
            self.slot_index += idle;
            self.clock_us += idle as f64 * te;
            return idle;
        }

        self.attempters.clear();
        for i in 0..self.len() {
            if self.active[i] && self.counter[i] == 0 {
                self.attempters.push(i);
            }
        }
        let duration = self.table.resolve(
            &self.attempters,
            self.slot_index,
            te,
            &mut self.rng,
            out,
            &mut self.fates,
        );
        for i in 0..self.len() {
            if self.active[i] && self.counter[i] > 0 {
                self.counter[i] -= 1;
            }
        }
        for (&k, &fate) in self.attempters.iter().zip(&self.fates) {
            self.stage[k] = match fate {
                TxFate::Success => 0,
                TxFate::Noise | TxFate::Collided => (self.stage[k] + 1).min(self.params[k].max_stage),
            };
            self.counter[k] = self.rng.random_range(0..self.params[k].cw_at(self.stage[k]));
        }
        self.slot_index += 1;
        self.clock_us += duration;
        1
    }
}

/// Runs a fresh backoff simulation for `cfg.n_slots` slots, discarding the
/// first `cfg.warmup_slots`.
pub fn run_backoff(
    params: &[BackoffParams],
    specs: &[StationSpec],
    profile: &PhyProfile,
    cfg: &SimConfig,
) -> Result<SimResult> {
    cfg.validate()?;
    let mut sim = BackoffSim::new(specs, profile, params, cfg.seed, cfg.capture)?;
    if cfg.warmup_slots > 0 {
        sim.run_slots(cfg.warmup_slots);
    }
    sim.set_trace(cfg.trace);
    Ok(sim.run_slots(cfg.measured_slots()))
}
