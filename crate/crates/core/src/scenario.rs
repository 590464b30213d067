//! Station entries shared by scenario files and closed-loop scripts.

use serde::{Deserialize, Serialize};

use crate::phy::StationSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationEntry {
    pub label: String,
    pub payload_bytes: f64,
    pub rate_mbps: f64,
    #[serde(default)]
    pub link_error: f64,
    #[serde(default = "one")]
    pub arrival_availability: f64,
    #[serde(default)]
    pub tx_power_dbm: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl StationEntry {
    pub fn to_spec(&self) -> StationSpec {
        StationSpec {
            label: self.label.clone(),
            payload_bits: self.payload_bytes * 8.0,
            rate_mbps: self.rate_mbps,
            link_error: self.link_error,
            arrival_availability: self.arrival_availability,
            tx_power_dbm: self.tx_power_dbm,
        }
    }
}

pub fn to_specs(entries: &[StationEntry]) -> Vec<StationSpec> {
    entries.iter().map(StationEntry::to_spec).collect()
}

/// Rejects duplicate labels, reporting the second occurrence.
pub(crate) fn check_unique_labels<'a>(
    labels: impl IntoIterator<Item = &'a str>,
    path: &str,
) -> crate::Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (i, l) in labels.into_iter().enumerate() {
        if !seen.insert(l) {
            return Err(crate::Error::validation(
                format!("{path}[{i}].label"),
                format!("duplicate label {l:?}"),
            ));
        }
    }
    Ok(())
}
