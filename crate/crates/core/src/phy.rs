//! PHY/MAC timing constants and per-station frame durations.
//!
//! All durations are in microseconds, sizes in bits and rates in Mb/s, so
//! `bits / rate` is directly a duration in µs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RATE_EPS: f64 = 1e-9;

/// Timing constants and frame overheads of one PHY.
///
/// Deserializes from a partial document: missing keys take the 802.11a
/// (OFDM, 20 MHz) defaults, which makes the type usable as an override file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhyProfile {
    pub empty_slot_us: f64,
    pub sifs_us: f64,
    pub difs_us: f64,
    /// PLCP preamble and header.
    pub plcp_us: f64,
    /// MAC header plus FCS.
    pub mac_overhead_bits: f64,
    pub ack_bits: f64,
    pub basic_rates_mbps: Vec<f64>,
    pub supported_rates_mbps: Vec<f64>,
    /// Use the success duration in place of the failure duration wherever a
    /// failed slot is timed. On by default.
    pub approximate_tu_as_ts: bool,
}

impl Default for PhyProfile {
    fn default() -> Self {
        Self::ieee80211a()
    }
}

impl PhyProfile {
    pub const OFDM_RATES_MBPS: [f64; 8] = [6.0, 9.0, 12.0, 18.0, 24.0, 36.0, 48.0, 54.0];

    pub fn ieee80211a() -> Self {
        Self {
            empty_slot_us: 9.0,
            sifs_us: 16.0,
            difs_us: 34.0,
            plcp_us: 20.0,
            mac_overhead_bits: 224.0,
            ack_bits: 112.0,
            basic_rates_mbps: vec![6.0, 12.0, 24.0],
            supported_rates_mbps: Self::OFDM_RATES_MBPS.to_vec(),
            approximate_tu_as_ts: true,
        }
    }

    /// Parses a TOML override document and validates the result.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let profile: PhyProfile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("empty_slot_us", self.empty_slot_us),
            ("sifs_us", self.sifs_us),
            ("difs_us", self.difs_us),
            ("plcp_us", self.plcp_us),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, "must be a positive duration"));
            }
        }
        if self.difs_us <= self.sifs_us {
            return Err(Error::validation("difs_us", "DIFS must exceed SIFS"));
        }
        for (name, v) in [
            ("mac_overhead_bits", self.mac_overhead_bits),
            ("ack_bits", self.ack_bits),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "must be a non-negative size"));
            }
        }
        if self.basic_rates_mbps.is_empty() {
            return Err(Error::validation("basic_rates_mbps", "must not be empty"));
        }
        for (i, &r) in self
            .supported_rates_mbps
            .iter()
            .chain(&self.basic_rates_mbps)
            .enumerate()
        {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::validation(
                    format!("rates[{i}]"),
                    "rates must be positive",
                ));
            }
        }
        for (i, &r) in self.basic_rates_mbps.iter().enumerate() {
            if !self.supports(r) {
                return Err(Error::validation(
                    format!("basic_rates_mbps[{i}]"),
                    "basic rate is not a supported rate",
                ));
            }
        }
        Ok(())
    }

    pub fn supports(&self, rate_mbps: f64) -> bool {
        self.supported_rates_mbps
            .iter()
            .any(|&r| (r - rate_mbps).abs() <= RATE_EPS)
    }

    /// Lowest basic rate, used to time the ACK inside EIFS.
    pub fn min_rate(&self) -> f64 {
        self.basic_rates_mbps
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// ACK duration for a data frame sent at `data_rate_mbps`: the ACK goes
    /// out at the highest basic rate not above the data rate, or at the
    /// lowest basic rate when none qualifies.
    pub fn ack_duration(&self, data_rate_mbps: f64) -> Result<f64> {
        if !self.supports(data_rate_mbps) {
            return Err(Error::InvalidRate {
                rate_mbps: data_rate_mbps,
            });
        }
        Ok(self.ack_duration_at(self.ack_rate(data_rate_mbps)))
    }

    fn ack_rate(&self, data_rate_mbps: f64) -> f64 {
        self.basic_rates_mbps
            .iter()
            .copied()
            .filter(|&r| r <= data_rate_mbps + RATE_EPS)
            .fold(None, |best: Option<f64>, r| Some(best.map_or(r, |b| b.max(r))))
            .unwrap_or_else(|| self.min_rate())
    }

    fn ack_duration_at(&self, rate_mbps: f64) -> f64 {
        self.plcp_us + self.ack_bits / rate_mbps
    }

    /// EIFS = SIFS + DIFS + ACK time at the lowest basic rate.
    pub fn eifs(&self) -> f64 {
        self.sifs_us + self.difs_us + self.ack_duration_at(self.min_rate())
    }

    fn frame_body(&self, spec: &StationSpec) -> f64 {
        self.plcp_us + (self.mac_overhead_bits + spec.payload_bits) / spec.rate_mbps
    }

    /// Duration of a slot holding a successful transmission of `spec`.
    pub fn tx_duration_success(&self, spec: &StationSpec) -> Result<f64> {
        let ack = self.ack_duration(spec.rate_mbps)?;
        Ok(self.frame_body(spec) + self.sifs_us + ack + self.difs_us)
    }

    /// Exact duration of a slot holding a failed transmission of `spec`.
    pub fn tx_duration_failure(&self, spec: &StationSpec) -> Result<f64> {
        if !self.supports(spec.rate_mbps) {
            return Err(Error::InvalidRate {
                rate_mbps: spec.rate_mbps,
            });
        }
        Ok(self.frame_body(spec) + self.eifs())
    }

    /// Failure duration as consumed by the model and simulator: equal to the
    /// success duration when `approximate_tu_as_ts` is set.
    pub fn failure_duration_used(&self, spec: &StationSpec) -> Result<f64> {
        if self.approximate_tu_as_ts {
            self.tx_duration_success(spec)
        } else {
            self.tx_duration_failure(spec)
        }
    }
}

/// One contending station.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSpec {
    pub label: String,
    pub payload_bits: f64,
    pub rate_mbps: f64,
    /// Probability a transmission fails from channel errors alone.
    pub link_error: f64,
    /// Probability a packet is queued when a transmission opportunity is won.
    pub arrival_availability: f64,
    /// Only the simulator's capture model reads this.
    pub tx_power_dbm: Option<f64>,
}

impl StationSpec {
    /// A saturated, error-free station.
    pub fn new(label: impl Into<String>, payload_bits: f64, rate_mbps: f64) -> Self {
        Self {
            label: label.into(),
            payload_bits,
            rate_mbps,
            link_error: 0.0,
            arrival_availability: 1.0,
            tx_power_dbm: None,
        }
    }

    pub fn with_link_error(mut self, p: f64) -> Self {
        self.link_error = p;
        self
    }

    pub fn with_power(mut self, dbm: f64) -> Self {
        self.tx_power_dbm = Some(dbm);
        self
    }

    pub fn validate(&self, profile: &PhyProfile) -> Result<()> {
        let path = |f: &str| format!("station[{}].{f}", self.label);
        if !(self.payload_bits.is_finite() && self.payload_bits > 0.0) {
            return Err(Error::validation(path("payload"), "must be positive"));
        }
        if !profile.supports(self.rate_mbps) {
            return Err(Error::validation(
                path("rate_mbps"),
                format!("{} Mb/s is not a supported rate", self.rate_mbps),
            ));
        }
        if !(0.0..1.0).contains(&self.link_error) {
            return Err(Error::validation(path("link_error"), "must lie in [0, 1)"));
        }
        if !(self.arrival_availability > 0.0 && self.arrival_availability <= 1.0) {
            return Err(Error::validation(
                path("arrival_availability"),
                "must lie in (0, 1]",
            ));
        }
        if let Some(p) = self.tx_power_dbm {
            if !p.is_finite() {
                return Err(Error::validation(path("tx_power_dbm"), "must be finite"));
            }
        }
        Ok(())
    }
}

/// Indices of `specs` sorted by ascending success duration, ties broken by
/// label and then by position.
pub fn order_stations(specs: &[StationSpec], profile: &PhyProfile) -> Result<Vec<usize>> {
    if specs.is_empty() {
        return Err(Error::validation("stations", "at least one station is required"));
    }
    let durations = specs
        .iter()
        .map(|s| profile.tx_duration_success(s))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&str> = specs.iter().map(|s| s.label.as_str()).collect();
    Ok(order_by_duration(&durations, &labels))
}

pub(crate) fn order_by_duration(durations: &[f64], labels: &[&str]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..durations.len()).collect();
    idx.sort_by(|&a, &b| {
        durations[a]
            .partial_cmp(&durations[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| labels[a].cmp(labels[b]))
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ack_uses_highest_basic_rate_not_above_data_rate() {
        let p = PhyProfile::ieee80211a();
        assert!(close(p.ack_duration(6.0).unwrap(), 20.0 + 112.0 / 6.0, 1e-12));
        assert!(close(p.ack_duration(54.0).unwrap(), 20.0 + 112.0 / 24.0, 1e-12));
        assert!(close(p.ack_duration(18.0).unwrap(), 20.0 + 112.0 / 12.0, 1e-12));
        // 38.667 and 24.667 µs
        assert!(close(p.ack_duration(6.0).unwrap(), 38.6667, 1e-3));
        assert!(close(p.ack_duration(54.0).unwrap(), 24.6667, 1e-3));
    }

    #[test]
    fn ack_falls_back_to_min_rate() {
        let mut p = PhyProfile::ieee80211a();
        p.basic_rates_mbps = vec![12.0, 24.0];
        assert!(close(p.ack_duration(6.0).unwrap(), 20.0 + 112.0 / 12.0, 1e-12));
    }

    #[test]
    fn zero_ack_payload_is_plcp_only() {
        let mut p = PhyProfile::ieee80211a();
        p.ack_bits = 0.0;
        assert_eq!(p.ack_duration(36.0).unwrap(), p.plcp_us);
    }

    #[test]
    fn unknown_rate_rejected() {
        let p = PhyProfile::ieee80211a();
        assert_eq!(
            p.ack_duration(7.0),
            Err(Error::InvalidRate { rate_mbps: 7.0 })
        );
        assert!(p.tx_duration_failure(&StationSpec::new("a", 800.0, 7.0)).is_err());
    }

    #[test]
    fn success_duration_hand_values() {
        let p = PhyProfile::ieee80211a();
        let slow = StationSpec::new("a", 8000.0, 6.0);
        let fast = StationSpec::new("b", 8000.0, 54.0);
        // 20 + 8224/6 + 16 + 38.667 + 34
        assert!(close(p.tx_duration_success(&slow).unwrap(), 1479.3333, 1e-3));
        // 20 + 8224/54 + 16 + 24.667 + 34
        assert!(close(p.tx_duration_success(&fast).unwrap(), 246.9630, 1e-3));
    }

    #[test]
    fn overhead_only_frame() {
        let mut p = PhyProfile::ieee80211a();
        p.mac_overhead_bits = 0.0;
        let s = StationSpec {
            payload_bits: 0.0,
            ..StationSpec::new("a", 1.0, 6.0)
        };
        let ts = p.tx_duration_success(&s).unwrap();
        let tu = p.tx_duration_failure(&s).unwrap();
        assert!(close(ts, p.plcp_us + p.sifs_us + p.ack_duration(6.0).unwrap() + p.difs_us, 1e-12));
        assert!(close(tu, p.plcp_us + p.eifs(), 1e-12));
    }

    #[test]
    fn failure_duration_and_eifs() {
        let mut p = PhyProfile::ieee80211a();
        assert_eq!(p.eifs(), p.sifs_us + p.difs_us + p.ack_duration(6.0).unwrap());
        let s = StationSpec::new("a", 8000.0, 6.0);
        assert!(close(p.tx_duration_failure(&s).unwrap(), 1479.3333, 1e-3));
        assert_eq!(
            p.failure_duration_used(&s).unwrap(),
            p.tx_duration_success(&s).unwrap()
        );
        p.approximate_tu_as_ts = false;
        let fast = StationSpec::new("b", 8000.0, 54.0);
        assert!(
            p.failure_duration_used(&fast).unwrap() > p.tx_duration_success(&fast).unwrap()
        );
    }

    #[test]
    fn ordering_examples() {
        let p = PhyProfile::ieee80211a();
        let pair = [
            StationSpec::new("a", 8000.0, 54.0),
            StationSpec::new("b", 8000.0, 6.0),
        ];
        assert_eq!(order_stations(&pair, &p).unwrap(), vec![0, 1]);

        let same = vec![StationSpec::new("s", 8000.0, 12.0); 4];
        assert_eq!(order_stations(&same, &p).unwrap(), vec![0, 1, 2, 3]);

        // 100 B at 6 Mb/s: 20 + 1024/6 + 16 + 38.67 + 34 = 279.3 µs
        // 14000 B at 54 Mb/s: 20 + 112224/54 + 16 + 24.67 + 34 = 2172.9 µs
        let inverted = [
            StationSpec::new("slow", 800.0, 6.0),
            StationSpec::new("fast", 112_000.0, 54.0),
        ];
        assert!(close(p.tx_duration_success(&inverted[0]).unwrap(), 279.3333, 1e-3));
        assert!(close(p.tx_duration_success(&inverted[1]).unwrap(), 2172.8889, 1e-3));
        assert_eq!(order_stations(&inverted, &p).unwrap(), vec![0, 1]);
        let reversed = [inverted[1].clone(), inverted[0].clone()];
        assert_eq!(order_stations(&reversed, &p).unwrap(), vec![1, 0]);
    }

    #[test]
    fn ties_broken_by_label() {
        let p = PhyProfile::ieee80211a();
        let specs = [
            StationSpec::new("zeta", 8000.0, 24.0),
            StationSpec::new("alpha", 8000.0, 24.0),
        ];
        assert_eq!(order_stations(&specs, &p).unwrap(), vec![1, 0]);
    }

    #[test]
    fn empty_station_list_rejected() {
        assert!(order_stations(&[], &PhyProfile::ieee80211a()).is_err());
    }

    #[test]
    fn profile_override_parses_partial_documents() {
        let p = PhyProfile::from_toml_str(
            "supported_rates_mbps = [6, 12, 24, 54, 135, 780]\nempty_slot_us = 9.0\n",
        )
        .unwrap();
        assert!(p.supports(780.0));
        assert_eq!(p.sifs_us, 16.0);
        assert!(PhyProfile::from_toml_str("sifs_us = 40.0").is_err());
        assert!(PhyProfile::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn station_validation() {
        let p = PhyProfile::ieee80211a();
        assert!(StationSpec::new("a", 8000.0, 6.0).validate(&p).is_ok());
        assert!(StationSpec::new("a", 0.0, 6.0).validate(&p).is_err());
        assert!(StationSpec::new("a", 8000.0, 6.0)
            .with_link_error(1.0)
            .validate(&p)
            .is_err());
        let mut s = StationSpec::new("a", 8000.0, 6.0);
        s.arrival_availability = 0.0;
        assert!(s.validate(&p).is_err());
    }
}
