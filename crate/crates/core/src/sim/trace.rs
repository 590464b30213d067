use std::io::{self, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOutcome {
    Idle,
    Success,
    NoiseFailure,
    Collision,
    /// Collision in which one frame was decoded.
    Capture,
}

impl SlotOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            SlotOutcome::Idle => "idle",
            SlotOutcome::Success => "success",
            SlotOutcome::NoiseFailure => "noise_failure",
            SlotOutcome::Collision => "collision",
            SlotOutcome::Capture => "capture",
        }
    }
}

/// One simulated slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotRecord {
    pub slot_index: u64,
    pub outcome: SlotOutcome,
    /// Transmitter for single-frame slots, the decoded station for captures,
    /// and the station timing the slot for collisions. Caller index.
    pub station: Option<usize>,
    pub duration_us: f64,
}

/// Writes `slot_index,outcome,station,duration_us` rows; idle slots leave
/// the station column empty.
pub fn write_trace_csv<W: Write>(records: &[SlotRecord], mut w: W) -> io::Result<()> {
    writeln!(w, "slot_index,outcome,station,duration_us")?;
    for r in records {
        match r.station {
            Some(s) => writeln!(w, "{},{},{},{}", r.slot_index, r.outcome.as_str(), s, r.duration_us)?,
            None => writeln!(w, "{},{},,{}", r.slot_index, r.outcome.as_str(), r.duration_us)?,
        }
    }
    Ok(())
}
