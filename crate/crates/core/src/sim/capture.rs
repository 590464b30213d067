/// Result of a multi-frame collision when capture is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureOutcome {
    /// Position (within the attempt set) of the frame that is decoded.
    Captured(usize),
    Collision,
}

/// The strongest frame survives a collision when its power exceeds the
/// second strongest by at least `threshold_db`.
pub fn resolve_capture(powers_dbm: &[f64], threshold_db: f64) -> CaptureOutcome {
    if powers_dbm.len() < 2 {
        return CaptureOutcome::Collision;
    }
    let mut best = 0;
    for (i, &p) in powers_dbm.iter().enumerate().skip(1) {
        if p > powers_dbm[best] {
            best = i;
        }
    }
    let second = powers_dbm
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    if powers_dbm[best] - second >= threshold_db {
        CaptureOutcome::Captured(best)
    } else {
        CaptureOutcome::Collision
    }
}
