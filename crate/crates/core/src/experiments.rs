//! Scenario files and the commands behind the command-line tool.
//!
//! Every command returns plain rows that serialize to CSV or JSON lines.
//! All randomness comes from seeds in the scenario or on the command line.

use serde::{Deserialize, Serialize};

use crate::controller::{run_closed_loop, ClosedLoopScript, Scheme, TraceRow};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{AttemptVector, Network};
use crate::optimizer::{self, dcf_attempt_prob, evaluate_allocation, Allocation, SolverConfig};
use crate::phy::{PhyProfile, StationSpec};
use crate::scenario::{check_unique_labels, to_specs, StationEntry};
use crate::sim::{run_backoff, run_p_persistent, BackoffParams, SimConfig, SimMode, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub cw_min: u32,
    /// Number of window doublings; `CW_max = cw_min · 2^max_stage`.
    pub max_stage: u32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            cw_min: 16,
            max_stage: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadSweep {
    pub start_bytes: f64,
    pub end_bytes: f64,
    pub step_bytes: f64,
}

impl Default for PayloadSweep {
    fn default() -> Self {
        Self {
            start_bytes: 100.0,
            end_bytes: 1400.0,
            step_bytes: 100.0,
        }
    }
}

impl PayloadSweep {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.end_bytes - self.start_bytes) / self.step_bytes + 1e-9).floor() as usize;
        (0..=n).map(|k| self.start_bytes + k as f64 * self.step_bytes).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub slots: u64,
    pub warmup_slots: u64,
    pub capture_threshold_db: Option<f64>,
    pub payload_sweep: PayloadSweep,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            slots: 1_000_000,
            warmup_slots: 0,
            capture_threshold_db: None,
            payload_sweep: PayloadSweep::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Fields left out keep their 802.11a values.
    #[serde(default)]
    pub profile: PhyProfile,
    pub stations: Vec<StationEntry>,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let sc: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        if self.stations.is_empty() {
            return Err(Error::validation("stations", "at least one station is required"));
        }
        check_unique_labels(self.stations.iter().map(|s| s.label.as_str()), "stations")?;
        for (i, s) in self.stations.iter().enumerate() {
            s.to_spec().validate(&self.profile).map_err(|e| match e {
                Error::Validation { path, reason } => Error::Validation {
                    path: format!("stations[{i}]{}", path.split_once('.').map(|(_, f)| format!(".{f}")).unwrap_or_default()),
                    reason,
                },
                other => other,
            })?;
        }
        if self.baseline.cw_min == 0 {
            return Err(Error::validation("baseline.cw_min", "must be at least 1"));
        }
        let e = &self.experiment;
        if e.slots <= e.warmup_slots {
            return Err(Error::validation("experiment.slots", "must exceed warmup_slots"));
        }
        if let Some(c) = e.capture_threshold_db {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::validation("experiment.capture_threshold_db", "must be non-negative"));
            }
        }
        let sw = &e.payload_sweep;
        if !(sw.start_bytes > 0.0 && sw.step_bytes > 0.0 && sw.end_bytes >= sw.start_bytes) {
            return Err(Error::validation(
                "experiment.payload_sweep",
                "needs 0 < start_bytes <= end_bytes and step_bytes > 0",
            ));
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<StationSpec> {
        to_specs(&self.stations)
    }
}

/// The model's view of one scenario under both schemes.
#[derive(Debug, Clone)]
pub struct SchemeComparison {
    pub network: Network,
    pub dcf: AttemptVector,
    pub rpf: Allocation,
}

pub fn compare_schemes(specs: &[StationSpec], profile: &PhyProfile, baseline: &BaselineConfig) -> Result<SchemeComparison> {
    let network = Network::new(specs, profile)?;
    let dcf = dcf_attempt_prob(baseline.cw_min, baseline.max_stage, specs, profile)?;
    let rpf = optimizer::solve_network(&network, &SolverConfig::default())?;
    Ok(SchemeComparison { network, dcf, rpf })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub station: String,
    pub rate_mbps: f64,
    pub scheme: String,
    pub throughput_mbps: f64,
    pub airtime_frac: f64,
    pub utility_total: f64,
}

/// Per-station throughput and airtime under the DCF baseline and the
/// proportional-fair allocation.
pub fn cmd_model(sc: &Scenario) -> Result<Vec<ModelRow>> {
    sc.validate()?;
    let specs = sc.specs();
    let cmp = compare_schemes(&specs, &sc.profile, &sc.baseline)?;
    let mut rows = Vec::with_capacity(2 * specs.len());
    for (scheme, tau) in [(Scheme::Dcf, &cmp.dcf), (Scheme::Rpf, &cmp.rpf.tau)] {
        let m = cmp.network.metrics(tau);
        let u = cmp.network.utility(tau).value;
        for (s, m) in specs.iter().zip(m) {
            rows.push(ModelRow {
                station: s.label.clone(),
                rate_mbps: s.rate_mbps,
                scheme: scheme.as_str().into(),
                throughput_mbps: m.throughput_mbps,
                airtime_frac: m.airtime,
                utility_total: u,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeRow {
    pub station: String,
    pub rate_mbps: f64,
    pub success_us: f64,
    pub tau: f64,
    pub w_exact: f64,
    pub ecw: u8,
    pub cw: u32,
    pub airtime_exact: f64,
    pub airtime_rounded: f64,
    pub throughput_exact_mbps: f64,
    pub throughput_rounded_mbps: f64,
    pub throughput_dcf_mbps: f64,
    pub residual: f64,
    pub utility_exact: f64,
    pub utility_rounded: f64,
    pub utility_dcf: f64,
    /// `U(exact) - U(DCF)`.
    pub utility_gain: f64,
}

pub fn cmd_optimize(sc: &Scenario) -> Result<Vec<OptimizeRow>> {
    sc.validate()?;
    let specs = sc.specs();
    let cmp = compare_schemes(&specs, &sc.profile, &sc.baseline)?;
    let ev = evaluate_allocation(&cmp.rpf, &cmp.network);
    let dcf = cmp.network.metrics(&cmp.dcf);
    let u_dcf = cmp.network.utility(&cmp.dcf).value;
    let ts = cmp.network.success_durations();
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, s)| OptimizeRow {
            station: s.label.clone(),
            rate_mbps: s.rate_mbps,
            success_us: ts[i],
            tau: cmp.rpf.tau.tau()[i],
            w_exact: cmp.rpf.w_exact[i],
            ecw: cmp.rpf.rounded[i].ecw,
            cw: cmp.rpf.rounded[i].cw,
            airtime_exact: ev.exact[i].airtime,
            airtime_rounded: ev.rounded[i].airtime,
            throughput_exact_mbps: ev.exact[i].throughput_mbps,
            throughput_rounded_mbps: ev.rounded[i].throughput_mbps,
            throughput_dcf_mbps: dcf[i].throughput_mbps,
            residual: cmp.rpf.residual,
            utility_exact: ev.utility_exact.value,
            utility_rounded: ev.utility_rounded.value,
            utility_dcf: u_dcf,
            utility_gain: ev.utility_exact.value - u_dcf,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub station: String,
    pub rate_mbps: f64,
    pub scheme: String,
    pub mode: String,
    pub attempts: u64,
    pub successes: u64,
    pub noise_failures: u64,
    pub collisions: u64,
    pub tau: f64,
    pub tau_model: f64,
    pub throughput_mbps: f64,
    pub throughput_se: f64,
    pub throughput_model_mbps: f64,
    pub airtime_frac: f64,
    pub airtime_se: f64,
    pub airtime_model: f64,
    pub slots: u64,
    pub p_empty: f64,
    pub p_success: f64,
    pub p_failure: f64,
    pub elapsed_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOptions {
    pub mode: SimMode,
    pub scheme: Scheme,
    pub slots: Option<u64>,
    pub seed: Option<u64>,
    pub exec: Exec,
    /// Keep a per-slot trace in the returned [`SimResult`].
    pub trace: bool,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            mode: SimMode::PPersistent,
            scheme: Scheme::Rpf,
            slots: None,
            seed: None,
            exec: Exec::default(),
            trace: false,
        }
    }
}

/// Runs the simulator under one scheme. In p-persistent mode stations use
/// the scheme's attempt probabilities directly; in backoff mode the
/// proportional-fair scheme uses the rounded fixed windows and the baseline
/// runs DCF. `*_model` columns hold the matching closed-form values.
pub fn cmd_simulate(sc: &Scenario, opts: &SimulateOptions) -> Result<(Vec<SimRow>, SimResult)> {
    sc.validate()?;
    let specs = sc.specs();
    let cmp = compare_schemes(&specs, &sc.profile, &sc.baseline)?;
    let mut cfg = SimConfig::new(
        opts.mode,
        opts.slots.unwrap_or(sc.experiment.slots),
        opts.seed.unwrap_or(sc.experiment.seed),
    );
    cfg.warmup_slots = sc.experiment.warmup_slots;
    cfg.exec = opts.exec;
    cfg.trace = opts.trace;
    if let Some(t) = sc.experiment.capture_threshold_db {
        cfg = cfg.with_capture(t);
    }
    let model_tau = match (opts.scheme, opts.mode) {
        (Scheme::Rpf, SimMode::PPersistent) => cmp.rpf.tau.clone(),
        (Scheme::Rpf, SimMode::Backoff) => cmp.rpf.rounded_tau(),
        (Scheme::Dcf, _) => cmp.dcf.clone(),
    };
    let result = match opts.mode {
        SimMode::PPersistent => run_p_persistent(&model_tau, &specs, &sc.profile, &cfg)?,
        SimMode::Backoff => {
            let params: Vec<BackoffParams> = match opts.scheme {
                Scheme::Rpf => cmp.rpf.rounded.iter().map(|c| BackoffParams::fixed(c.cw)).collect(),
                Scheme::Dcf => vec![BackoffParams::dcf(sc.baseline.cw_min, sc.baseline.max_stage); specs.len()],
            };
            run_backoff(&params, &specs, &sc.profile, &cfg)?
        }
    };
    let model = cmp.network.metrics(&model_tau);
    let mode = match opts.mode {
        SimMode::PPersistent => "p-persistent",
        SimMode::Backoff => "backoff",
    };
    let rows = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = &result.stations[i];
            SimRow {
                station: s.label.clone(),
                rate_mbps: s.rate_mbps,
                scheme: opts.scheme.as_str().into(),
                mode: mode.into(),
                attempts: c.attempts,
                successes: c.successes,
                noise_failures: c.noise_failures,
                collisions: c.collisions,
                tau: result.tau(i),
                tau_model: model_tau.tau()[i],
                throughput_mbps: result.throughput(i),
                throughput_se: result.throughput_se(i),
                throughput_model_mbps: model[i].throughput_mbps,
                airtime_frac: result.airtime(i),
                airtime_se: result.airtime_se(i),
                airtime_model: model[i].airtime,
                slots: result.slots,
                p_empty: result.p_empty(),
                p_success: result.p_success(),
                p_failure: result.p_failure(),
                elapsed_us: result.elapsed_us,
            }
        })
        .collect();
    Ok((rows, result))
}

pub fn cmd_closed_loop(script: &ClosedLoopScript) -> Result<Vec<TraceRow>> {
    Ok(run_closed_loop(script)?.trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub payload_bytes: f64,
    pub station: String,
    pub rate_mbps: f64,
    pub throughput_dcf_mbps: f64,
    pub throughput_rpf_mbps: f64,
    pub utility_dcf: f64,
    pub utility_rpf: f64,
    /// `U_RPF - U_DCF`.
    pub utility_gap: f64,
}

/// Model evaluation at every payload of the sweep, all stations using the
/// same payload. Rows are sorted by payload, then by station order.
pub fn cmd_sweep_payload(sc: &Scenario, exec: Exec) -> Result<Vec<SweepRow>> {
    sc.validate()?;
    let points = sc.experiment.payload_sweep.points();
    let per_point = exec.map_slice(&points, |&bytes| -> Result<Vec<SweepRow>> {
        let mut specs = sc.specs();
        for s in &mut specs {
            s.payload_bits = bytes * 8.0;
        }
        let cmp = compare_schemes(&specs, &sc.profile, &sc.baseline)?;
        let dcf = cmp.network.throughput(&cmp.dcf);
        let rpf = cmp.network.throughput(&cmp.rpf.tau);
        let u_dcf = cmp.network.utility(&cmp.dcf).value;
        let u_rpf = cmp.network.utility(&cmp.rpf.tau).value;
        let gap = if specs.len() == 1 { 0.0 } else { u_rpf - u_dcf };
        Ok(specs
            .iter()
            .enumerate()
            .map(|(i, s)| SweepRow {
                payload_bytes: bytes,
                station: s.label.clone(),
                rate_mbps: s.rate_mbps,
                throughput_dcf_mbps: dcf[i],
                throughput_rpf_mbps: rpf[i],
                utility_dcf: u_dcf,
                utility_rpf: u_rpf,
                utility_gap: gap,
            })
            .collect())
    });
    let mut rows = Vec::new();
    for p in per_point {
        rows.extend(p?);
    }
    Ok(rows)
}

/// The 802.11a rate ladder, one station per rate from fastest to slowest.
pub fn ladder_scenario(payload_bytes: f64) -> Scenario {
    let stations = PhyProfile::OFDM_RATES_MBPS
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &r)| StationEntry {
            label: format!("sta{}", i + 1),
            payload_bytes,
            rate_mbps: r,
            link_error: 0.0,
            arrival_availability: 1.0,
            tx_power_dbm: None,
        })
        .collect();
    Scenario {
        profile: PhyProfile::ieee80211a(),
        stations,
        baseline: BaselineConfig::default(),
        experiment: ExperimentConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"
        [[stations]]
        label = "fast"
        payload_bytes = 1000
        rate_mbps = 54

        [[stations]]
        label = "slow"
        payload_bytes = 1000
        rate_mbps = 6
    "#;

    #[test]
    fn parse_with_defaults() {
        let sc = Scenario::from_toml_str(TWO).unwrap();
        assert_eq!(sc.stations.len(), 2);
        assert_eq!(sc.baseline, BaselineConfig::default());
        assert_eq!(sc.profile, PhyProfile::ieee80211a());
        assert_eq!(sc.specs()[0].payload_bits, 8000.0);
    }

    #[test]
    fn validation_paths() {
        let bad = TWO.replace("rate_mbps = 6\n", "rate_mbps = 7\n");
        match Scenario::from_toml_str(&bad) {
            Err(Error::Validation { path, .. }) => assert!(path.starts_with("stations[1]"), "{path}"),
            other => panic!("{other:?}"),
        }
        let dup = TWO.replace("\"slow\"", "\"fast\"");
        assert!(matches!(Scenario::from_toml_str(&dup), Err(Error::Validation { .. })));
        assert!(matches!(Scenario::from_toml_str("stations = 1"), Err(Error::Parse(_))));
        let typo = format!("{TWO}\n[baseline]\ncw_mn = 3\n");
        assert!(matches!(Scenario::from_toml_str(&typo), Err(Error::Parse(_))));
    }

    #[test]
    fn model_rows_equalise_airtime() {
        let sc = Scenario::from_toml_str(TWO).unwrap();
        let rows = cmd_model(&sc).unwrap();
        assert_eq!(rows.len(), 4);
        let rpf: Vec<_> = rows.iter().filter(|r| r.scheme == "rpf").collect();
        let dcf: Vec<_> = rows.iter().filter(|r| r.scheme == "dcf").collect();
        for r in &rpf {
            assert!((r.airtime_frac - 0.5).abs() < 1e-9);
        }
        assert!(rpf[0].utility_total >= dcf[0].utility_total);
        assert!(rpf[0].throughput_mbps > dcf[0].throughput_mbps);
    }

    #[test]
    fn single_station_model() {
        let sc = Scenario::from_toml_str(
            "[[stations]]\nlabel = \"a\"\npayload_bytes = 500\nrate_mbps = 24\n",
        )
        .unwrap();
        let rows = cmd_model(&sc).unwrap();
        let rpf: Vec<_> = rows.iter().filter(|r| r.scheme == "rpf").collect();
        assert_eq!(rpf.len(), 1);
        assert!((rpf[0].airtime_frac - 1.0).abs() < 1e-12);
        let sweep = cmd_sweep_payload(&sc, Exec::Sequential).unwrap();
        assert!(sweep.iter().all(|r| r.utility_gap == 0.0));
    }

    #[test]
    fn optimize_reports_gain() {
        let rows = cmd_optimize(&ladder_scenario(1000.0)).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows[0].utility_gain > 0.0);
        assert!(rows.iter().all(|r| r.residual <= 1e-10 && r.ecw <= 15));
        for w in rows.windows(2) {
            assert!(w[1].w_exact > w[0].w_exact);
        }
    }

    #[test]
    fn sweep_is_canonical_and_exec_independent() {
        let mut sc = ladder_scenario(1000.0);
        sc.experiment.payload_sweep = PayloadSweep {
            start_bytes: 100.0,
            end_bytes: 500.0,
            step_bytes: 200.0,
        };
        let a = cmd_sweep_payload(&sc, Exec::Sequential).unwrap();
        let b = cmd_sweep_payload(&sc, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 8);
        assert_eq!(a[0].payload_bytes, 100.0);
        assert_eq!(a[23].payload_bytes, 500.0);
    }

    #[test]
    fn equal_stations_gap_comes_from_attempt_rate_only() {
        let mut sc = ladder_scenario(1000.0);
        for s in &mut sc.stations {
            s.rate_mbps = 24.0;
        }
        let rows = cmd_sweep_payload(&sc, Exec::Sequential).unwrap();
        for point in rows.chunks(8) {
            let r = &point[0];
            assert!(point.iter().all(|q| (q.throughput_rpf_mbps - r.throughput_rpf_mbps).abs() < 1e-9));
            assert!(point.iter().all(|q| (q.throughput_dcf_mbps - r.throughput_dcf_mbps).abs() < 1e-9));
            let expect = 8.0 * (r.throughput_rpf_mbps / r.throughput_dcf_mbps).ln();
            assert!(r.utility_gap >= 0.0);
            assert!((r.utility_gap - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let mut sc = Scenario::from_toml_str(TWO).unwrap();
        sc.experiment.slots = 200_000;
        for mode in [SimMode::PPersistent, SimMode::Backoff] {
            for scheme in [Scheme::Rpf, Scheme::Dcf] {
                let opts = SimulateOptions {
                    mode,
                    scheme,
                    ..Default::default()
                };
                let (a, _) = cmd_simulate(&sc, &opts).unwrap();
                let (b, _) = cmd_simulate(&sc, &opts).unwrap();
                assert_eq!(a, b);
                assert_eq!(a[0].slots, 200_000);
            }
        }
    }
}
