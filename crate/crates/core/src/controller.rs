//! Emulation of the access point's control loop.
//!
//! Every beacon interval the AP sums the durations of correctly received
//! frames per station, smooths the per-frame mean, re-solves the
//! equal-airtime allocation on the measured durations, rounds the windows
//! to powers of two and hands out one `ECWmin = ECWmax` pair per station.
//! Link error probabilities are never estimated: the airtime optimum does
//! not depend on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::optimizer::{self, round_to_pow2, SolverConfig, ECW_MAX};
use crate::phy::{PhyProfile, StationSpec};
use crate::scenario::{check_unique_labels, StationEntry};
use crate::sim::{BackoffParams, BackoffSim, CaptureConfig, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Proportional-fair windows from the equal-airtime solution.
    Rpf,
    /// Every station runs standard DCF.
    Dcf,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Rpf => "rpf",
            Scheme::Dcf => "dcf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub beacon_interval_us: f64,
    /// Weight of the newest window in the smoothed mean frame duration.
    pub ewma_alpha: f64,
    /// Windows without a success after which a station counts as gone.
    pub departure_windows: u32,
    /// Window of stations that have no assignment yet.
    pub dcf_cw_min: u32,
    pub dcf_max_stage: u32,
    #[serde(skip)]
    pub solver: SolverConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            beacon_interval_us: 102_400.0,
            ewma_alpha: 0.5,
            departure_windows: 3,
            dcf_cw_min: 16,
            dcf_max_stage: 6,
            solver: SolverConfig::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beacon_interval_us.is_finite() && self.beacon_interval_us > 0.0) {
            return Err(Error::validation("controller.beacon_interval_us", "must be positive"));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(Error::validation("controller.ewma_alpha", "must lie in (0, 1]"));
        }
        if self.departure_windows == 0 {
            return Err(Error::validation("controller.departure_windows", "must be at least 1"));
        }
        if self.dcf_cw_min == 0 {
            return Err(Error::validation("controller.dcf_cw_min", "must be at least 1"));
        }
        self.solver.validate()
    }

    pub fn dcf_params(&self) -> BackoffParams {
        BackoffParams::dcf(self.dcf_cw_min, self.dcf_max_stage)
    }
}

/// What the AP sees of one station during one beacon interval.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub label: String,
    pub success_count: u64,
    /// Sum of the durations of correctly received frames, µs.
    pub success_airtime_sum_us: f64,
}

impl WindowSample {
    /// One sample per station of a simulated window.
    pub fn from_sim(result: &SimResult, specs: &[StationSpec]) -> Vec<WindowSample> {
        specs
            .iter()
            .zip(&result.stations)
            .map(|(s, c)| WindowSample {
                label: s.label.clone(),
                success_count: c.successes,
                success_airtime_sum_us: c.frame_time_us,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationObservation {
    pub label: String,
    pub success_count: u64,
    pub success_airtime_sum_us: f64,
    /// Smoothed mean duration of a successful frame, µs.
    pub mean_ts_us: f64,
}

#[derive(Debug, Clone)]
struct Tracked {
    label: String,
    mean_ts_us: f64,
    idle_windows: u32,
    last_count: u64,
    last_sum_us: f64,
}

/// Tracks the active station set and smoothed frame durations.
#[derive(Debug, Clone)]
pub struct Observer {
    alpha: f64,
    departure_windows: u32,
    tracked: Vec<Tracked>,
}

impl Observer {
    pub fn new(alpha: f64, departure_windows: u32) -> Self {
        Self {
            alpha,
            departure_windows,
            tracked: Vec::new(),
        }
    }

    /// Folds in one window and returns the active set in order of first
    /// appearance. Stations missing from `samples` count as silent.
    pub fn observe_window(&mut self, samples: &[WindowSample]) -> Vec<StationObservation> {
        for t in &mut self.tracked {
            t.last_count = 0;
            t.last_sum_us = 0.0;
        }
        for s in samples.iter().filter(|s| s.success_count > 0) {
            let mean = s.success_airtime_sum_us / s.success_count as f64;
            match self.tracked.iter_mut().find(|t| t.label == s.label) {
                Some(t) => {
                    t.mean_ts_us = self.alpha * mean + (1.0 - self.alpha) * t.mean_ts_us;
                    t.last_count = s.success_count;
                    t.last_sum_us = s.success_airtime_sum_us;
                }
                None => self.tracked.push(Tracked {
                    label: s.label.clone(),
                    mean_ts_us: mean,
                    idle_windows: 0,
                    last_count: s.success_count,
                    last_sum_us: s.success_airtime_sum_us,
                }),
            }
        }
        for t in &mut self.tracked {
            if t.last_count == 0 {
                t.idle_windows += 1;
            } else {
                t.idle_windows = 0;
            }
        }
        let limit = self.departure_windows;
        self.tracked.retain(|t| t.idle_windows < limit);
        self.active()
    }

    pub fn active(&self) -> Vec<StationObservation> {
        self.tracked
            .iter()
            .map(|t| StationObservation {
                label: t.label.clone(),
                success_count: t.last_count,
                success_airtime_sum_us: t.last_sum_us,
                mean_ts_us: t.mean_ts_us,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AssignmentEntry {
    pub ecw_min: u8,
    pub ecw_max: u8,
}

/// Per-station window settings carried by one round of unicast beacons.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BeaconAssignment {
    pub epoch: u64,
    pub entries: Vec<(String, AssignmentEntry)>,
}

impl BeaconAssignment {
    pub fn get(&self, label: &str) -> Option<AssignmentEntry> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, e)| *e)
    }

    fn same_settings(&self, other: &BeaconAssignment) -> bool {
        self.entries == other.entries
    }
}

/// Outcome of a successful control step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub assignment: BeaconAssignment,
    /// Exact attempt probabilities, aligned with `assignment.entries`.
    pub tau: Vec<f64>,
}

/// Solves the equal-airtime allocation on observed durations and rounds it.
pub fn control_step(
    observations: &[StationObservation],
    profile: &PhyProfile,
    cfg: &ControllerConfig,
    epoch: u64,
) -> Result<ControlDecision> {
    if observations.is_empty() {
        return Ok(ControlDecision {
            assignment: BeaconAssignment {
                epoch,
                entries: Vec::new(),
            },
            tau: Vec::new(),
        });
    }
    let durations: Vec<f64> = observations.iter().map(|o| o.mean_ts_us).collect();
    let net = Network::from_durations(profile.empty_slot_us, &durations)?;
    let alloc = optimizer::solve_network(&net, &cfg.solver)?;
    let entries = observations
        .iter()
        .zip(&alloc.w_exact)
        .map(|(o, &w)| {
            let ecw = round_to_pow2(w).ecw.min(ECW_MAX);
            (
                o.label.clone(),
                AssignmentEntry {
                    ecw_min: ecw,
                    ecw_max: ecw,
                },
            )
        })
        .collect();
    Ok(ControlDecision {
        assignment: BeaconAssignment { epoch, entries },
        tau: alloc.tau.tau().to_vec(),
    })
}

/// One control step as recorded by [`Controller`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRecord {
    pub epoch: u64,
    pub observations: Vec<StationObservation>,
    /// Assignment in force after this step.
    pub assignment: BeaconAssignment,
    /// Exact solution of this step, aligned with `assignment.entries`;
    /// empty when the previous assignment was retained.
    pub tau: Vec<f64>,
    pub changed: bool,
    pub warning: Option<String>,
}

/// The AP side of the loop: observer plus solver, retaining the previous
/// assignment whenever a solve fails.
#[derive(Debug, Clone)]
pub struct Controller {
    profile: PhyProfile,
    cfg: ControllerConfig,
    observer: Observer,
    current: BeaconAssignment,
    epoch: u64,
    associated: Vec<String>,
}

impl Controller {
    pub fn new(profile: &PhyProfile, cfg: &ControllerConfig) -> Result<Self> {
        profile.validate()?;
        cfg.validate()?;
        Ok(Self {
            profile: profile.clone(),
            cfg: cfg.clone(),
            observer: Observer::new(cfg.ewma_alpha, cfg.departure_windows),
            current: BeaconAssignment::default(),
            epoch: 0,
            associated: Vec::new(),
        })
    }

    /// Registers an associated station. While any associated station has
    /// not been observed, nobody is assigned `ECW = 0`: a station sending
    /// in every slot would collide with each of the newcomer's attempts.
    pub fn associate(&mut self, label: &str) {
        if !self.associated.iter().any(|l| l == label) {
            self.associated.push(label.to_string());
        }
    }

    pub fn disassociate(&mut self, label: &str) {
        self.associated.retain(|l| l != label);
    }

    pub fn assignment(&self) -> &BeaconAssignment {
        &self.current
    }

    pub fn step(&mut self, samples: &[WindowSample]) -> ControlRecord {
        self.epoch += 1;
        let observations = self.observer.observe_window(samples);
        match control_step(&observations, &self.profile, &self.cfg, self.epoch) {
            Ok(mut decision) => {
                let unobserved = self
                    .associated
                    .iter()
                    .any(|l| !observations.iter().any(|o| &o.label == l));
                if unobserved {
                    for (_, e) in &mut decision.assignment.entries {
                        e.ecw_min = e.ecw_min.max(1);
                        e.ecw_max = e.ecw_max.max(1);
                    }
                }
                let changed = !decision.assignment.same_settings(&self.current);
                self.current = decision.assignment;
                ControlRecord {
                    epoch: self.epoch,
                    observations,
                    assignment: self.current.clone(),
                    tau: decision.tau,
                    changed,
                    warning: None,
                }
            }
            Err(e) => ControlRecord {
                epoch: self.epoch,
                observations,
                assignment: self.current.clone(),
                tau: Vec::new(),
                changed: false,
                warning: Some(format!("previous assignment retained: {e}")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Join,
    Leave,
    Rate,
    Power,
    LinkError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEvent {
    pub at_seconds: f64,
    pub station: String,
    pub action: Action,
    #[serde(default)]
    pub value: Option<f64>,
}

/// Timed closed-loop scenario. Stations are present from the start unless
/// their first event is a `join`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopScript {
    #[serde(default)]
    pub profile: PhyProfile,
    #[serde(default)]
    pub controller: ControllerConfig,
    pub scheme: Scheme,
    #[serde(default)]
    pub seed: u64,
    pub duration_seconds: f64,
    #[serde(default)]
    pub capture_threshold_db: Option<f64>,
    pub stations: Vec<StationEntry>,
    #[serde(default)]
    pub events: Vec<ScriptEvent>,
}

impl ClosedLoopScript {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let script: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.controller.validate()?;
        if self.stations.is_empty() {
            return Err(Error::validation("stations", "at least one station is required"));
        }
        check_unique_labels(self.stations.iter().map(|s| s.label.as_str()), "stations")?;
        for s in &self.stations {
            s.to_spec().validate(&self.profile)?;
        }
        if !(self.duration_seconds.is_finite() && self.duration_seconds > 0.0) {
            return Err(Error::validation("duration_seconds", "must be positive"));
        }
        if let Some(c) = self.capture_threshold_db {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::validation("capture_threshold_db", "must be non-negative"));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            let path = |f: &str| format!("events[{i}].{f}");
            if !(e.at_seconds.is_finite() && e.at_seconds >= 0.0) {
                return Err(Error::validation(path("at_seconds"), "must be a non-negative time"));
            }
            let Some(st) = self.stations.iter().find(|s| s.label == e.station) else {
                return Err(Error::validation(path("station"), format!("unknown station {:?}", e.station)));
            };
            let needs_value = !matches!(e.action, Action::Join | Action::Leave);
            let v = match (needs_value, e.value) {
                (true, None) => return Err(Error::validation(path("value"), "required for this action")),
                (false, Some(_)) => return Err(Error::validation(path("value"), "not used by join/leave")),
                (_, v) => v,
            };
            match (e.action, v) {
                (Action::Rate, Some(r)) => {
                    let mut spec = st.to_spec();
                    spec.rate_mbps = r;
                    spec.validate(&self.profile).map_err(|_| {
                        Error::validation(path("value"), format!("rate {r} Mb/s not supported"))
                    })?;
                }
                (Action::LinkError, Some(p)) if !(0.0..1.0).contains(&p) => {
                    return Err(Error::validation(path("value"), "must lie in [0, 1)"));
                }
                (Action::Power, Some(p)) if !p.is_finite() => {
                    return Err(Error::validation(path("value"), "must be finite"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn sorted_events(&self) -> Vec<&ScriptEvent> {
        let mut ev: Vec<&ScriptEvent> = self.events.iter().collect();
        ev.sort_by(|a, b| a.at_seconds.total_cmp(&b.at_seconds));
        ev
    }
}

/// One row per active station per beacon interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub time_s: f64,
    pub station: String,
    pub rate_mbps: f64,
    pub ecw: u8,
    pub throughput_mbps: f64,
    pub airtime_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub trace: Vec<TraceRow>,
    /// One record per beacon interval; empty for the DCF scheme.
    pub control: Vec<ControlRecord>,
}

fn log2_window(cw: u32) -> u8 {
    (31 - cw.max(1).leading_zeros()) as u8
}

/// Alternates simulated beacon intervals and control steps. Events take
/// effect at the first interval boundary at or after their time.
pub fn run_closed_loop(script: &ClosedLoopScript) -> Result<ClosedLoopRun> {
    script.validate()?;
    let cfg = &script.controller;
    let specs = crate::scenario::to_specs(&script.stations);
    let n = specs.len();
    let capture = script.capture_threshold_db.map(|t| CaptureConfig {
        power_threshold_db: t,
    });
    let mut sim = BackoffSim::new(&specs, &script.profile, &vec![cfg.dcf_params(); n], script.seed, capture)?;
    for (i, s) in specs.iter().enumerate() {
        let first = script.events.iter().filter(|e| e.station == s.label).min_by(|a, b| a.at_seconds.total_cmp(&b.at_seconds));
        if matches!(first, Some(e) if e.action == Action::Join) {
            sim.set_active(i, false);
        }
    }
    let mut controller = Controller::new(&script.profile, cfg)?;
    for (i, s) in specs.iter().enumerate() {
        if sim.is_active(i) {
            controller.associate(&s.label);
        }
    }
    let events = script.sorted_events();
    let mut next_event = 0;
    let end_us = script.duration_seconds * 1e6;
    let mut trace = Vec::new();
    let mut control = Vec::new();
    let mut window_end = 0.0;
    while window_end < end_us {
        let now = sim.clock_us();
        while next_event < events.len() && events[next_event].at_seconds * 1e6 <= now {
            let e = events[next_event];
            let i = sim.station_index(&e.station).expect("validated station");
            match (e.action, e.value) {
                (Action::Join, _) => {
                    sim.set_active(i, true);
                    controller.associate(&e.station);
                }
                (Action::Leave, _) => {
                    sim.set_active(i, false);
                    controller.disassociate(&e.station);
                }
                (Action::Rate, Some(v)) => sim.set_rate(i, v)?,
                (Action::Power, Some(v)) => sim.set_power(i, v)?,
                (Action::LinkError, Some(v)) => sim.set_link_error(i, v)?,
                _ => unreachable!("validated event"),
            }
            next_event += 1;
        }
        window_end += cfg.beacon_interval_us;
        let w = sim.run_until(window_end);
        let time_s = sim.clock_us() / 1e6;
        for i in (0..n).filter(|&i| sim.is_active(i)) {
            trace.push(TraceRow {
                time_s,
                station: sim.specs()[i].label.clone(),
                rate_mbps: sim.specs()[i].rate_mbps,
                ecw: log2_window(sim.params()[i].cw_min),
                throughput_mbps: w.throughput(i),
                airtime_frac: w.airtime(i),
            });
        }
        if script.scheme == Scheme::Rpf {
            let record = controller.step(&WindowSample::from_sim(&w, sim.specs()));
            for i in 0..n {
                let label = sim.specs()[i].label.clone();
                let params = match record.assignment.get(&label) {
                    Some(a) => BackoffParams::from_ecw(a.ecw_min),
                    None => cfg.dcf_params(),
                };
                sim.set_params(i, params)?;
            }
            control.push(record);
        }
    }
    Ok(ClosedLoopRun { trace, control })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: &str, count: u64, mean: f64) -> WindowSample {
        WindowSample {
            label: label.into(),
            success_count: count,
            success_airtime_sum_us: count as f64 * mean,
        }
    }

    #[test]
    fn observer_smooths_and_drops() {
        let mut obs = Observer::new(0.5, 3);
        let a = obs.observe_window(&[sample("a", 10, 100.0), sample("b", 0, 0.0)]);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].mean_ts_us, 100.0);
        let a = obs.observe_window(&[sample("a", 4, 200.0), sample("b", 2, 50.0)]);
        assert_eq!(a[0].mean_ts_us, 150.0);
        assert_eq!(a[1].label, "b");
        obs.observe_window(&[]);
        obs.observe_window(&[]);
        assert_eq!(obs.active().len(), 2);
        assert!(obs.observe_window(&[]).is_empty());
    }

    #[test]
    fn single_station_gets_unit_window() {
        let p = PhyProfile::ieee80211a();
        let obs = vec![StationObservation {
            label: "a".into(),
            success_count: 5,
            success_airtime_sum_us: 5.0 * 300.0,
            mean_ts_us: 300.0,
        }];
        let d = control_step(&obs, &p, &ControllerConfig::default(), 1).unwrap();
        assert_eq!(d.assignment.get("a"), Some(AssignmentEntry { ecw_min: 0, ecw_max: 0 }));
    }

    #[test]
    fn homogeneous_stations_share_one_window() {
        let p = PhyProfile::ieee80211a();
        let obs: Vec<_> = (0..5)
            .map(|i| StationObservation {
                label: format!("s{i}"),
                success_count: 1,
                success_airtime_sum_us: 1479.0,
                mean_ts_us: 1479.0,
            })
            .collect();
        let d = control_step(&obs, &p, &ControllerConfig::default(), 1).unwrap();
        let first = d.assignment.entries[0].1;
        assert!(d.assignment.entries.iter().all(|(_, e)| *e == first));
        assert!(d.assignment.entries.iter().all(|(_, e)| e.ecw_min == e.ecw_max && e.ecw_min <= 15));
    }

    #[test]
    fn failed_solve_keeps_previous_assignment() {
        let p = PhyProfile::ieee80211a();
        let mut cfg = ControllerConfig::default();
        let mut c = Controller::new(&p, &cfg).unwrap();
        let r1 = c.step(&[sample("a", 5, 1479.0), sample("b", 5, 250.0)]);
        assert!(r1.warning.is_none());
        cfg.solver.max_iterations = 1;
        cfg.solver.tolerance = 1e-300;
        c.cfg = cfg;
        let r2 = c.step(&[sample("a", 5, 300.0), sample("b", 5, 2000.0)]);
        assert!(r2.warning.is_some());
        assert_eq!(r2.assignment.entries, r1.assignment.entries);
        assert!(r2.tau.is_empty());
    }

    #[test]
    fn static_input_is_fixed_after_second_step() {
        let p = PhyProfile::ieee80211a();
        let mut c = Controller::new(&p, &ControllerConfig::default()).unwrap();
        let s = [sample("a", 7, 1479.3), sample("b", 9, 247.0), sample("c", 3, 500.0)];
        let _ = c.step(&s);
        let r2 = c.step(&s);
        for _ in 0..5 {
            let r = c.step(&s);
            assert!(!r.changed);
            assert_eq!(r.assignment.entries, r2.assignment.entries);
        }
    }

    #[test]
    fn script_validation_reports_paths() {
        let base = r#"
            scheme = "rpf"
            duration_seconds = 1.0
            [[stations]]
            label = "a"
            payload_bytes = 1000
            rate_mbps = 54
        "#;
        assert!(ClosedLoopScript::from_toml_str(base).is_ok());
        let bad_rate = format!("{base}\n[[events]]\nat_seconds = 0.5\nstation = \"a\"\naction = \"rate\"\nvalue = 7\n");
        match ClosedLoopScript::from_toml_str(&bad_rate) {
            Err(Error::Validation { path, .. }) => assert_eq!(path, "events[0].value"),
            other => panic!("{other:?}"),
        }
        let unknown = format!("{base}\n[[events]]\nat_seconds = 0.5\nstation = \"z\"\naction = \"leave\"\n");
        assert!(matches!(ClosedLoopScript::from_toml_str(&unknown), Err(Error::Validation { .. })));
        assert!(matches!(ClosedLoopScript::from_toml_str("scheme = 3"), Err(Error::Parse(_))));
    }

    #[test]
    fn closed_loop_is_deterministic_and_tracks_membership() {
        let script = ClosedLoopScript::from_toml_str(
            r#"
            scheme = "rpf"
            seed = 4
            duration_seconds = 3.0
            [[stations]]
            label = "a"
            payload_bytes = 1000
            rate_mbps = 54
            [[stations]]
            label = "b"
            payload_bytes = 1000
            rate_mbps = 6
            [[events]]
            at_seconds = 1.0
            station = "b"
            action = "join"
            "#,
        )
        .unwrap();
        let r1 = run_closed_loop(&script).unwrap();
        let r2 = run_closed_loop(&script).unwrap();
        assert_eq!(r1, r2);
        let early: Vec<_> = r1.trace.iter().filter(|r| r.time_s < 0.9).collect();
        assert!(early.iter().all(|r| r.station == "a"));
        assert!(r1.trace.iter().any(|r| r.station == "b"));
        let last = r1.control.last().unwrap();
        assert_eq!(last.assignment.entries.len(), 2);
        // alone on the channel, a station is told to transmit every slot
        assert_eq!(r1.control[2].assignment.get("a").unwrap().ecw_min, 0);
        let joined = r1.control.iter().position(|r| r.assignment.get("b").is_some()).unwrap();
        assert!(joined < 15, "newcomer observed after {joined} intervals");
    }
}
