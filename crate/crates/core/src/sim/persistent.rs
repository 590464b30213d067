use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{unit, CaptureConfig, SimConfig, SimResult, SlotTable};
use crate::error::{Error, Result};
use crate::model::{AttemptVector, Network};
use crate::phy::{PhyProfile, StationSpec};

/// Slots per independently seeded chunk. Fixed so that results do not
/// depend on how chunks are scheduled.
const CHUNK_SLOTS: u64 = 1 << 18;

impl SlotTable {
    pub(crate) fn build(
        specs: &[StationSpec],
        profile: &PhyProfile,
        capture: Option<CaptureConfig>,
    ) -> Result<Self> {
        let net = Network::new(specs, profile)?;
        let mut rank = vec![0; specs.len()];
        for (k, &i) in net.order().iter().enumerate() {
            rank[i] = k;
        }
        Ok(Self {
            success_us: net.success_durations(),
            failure_us: net.to_caller(net.ordered_failure_durations().to_vec()),
            link_error: specs.iter().map(|s| s.link_error).collect(),
            power_dbm: specs.iter().map(|s| s.tx_power_dbm.unwrap_or(0.0)).collect(),
            payload_bits: specs.iter().map(|s| s.payload_bits).collect(),
            rank,
            capture,
        })
    }
}

/// Every station transmits in every slot independently with probability
/// `tau[i]` (caller order). Stations without a configured power count as
/// 0 dBm for capture.
pub fn run_p_persistent(
    tau: &AttemptVector,
    specs: &[StationSpec],
    profile: &PhyProfile,
    cfg: &SimConfig,
) -> Result<SimResult> {
    cfg.validate()?;
    if tau.len() != specs.len() {
        return Err(Error::validation("tau", "one attempt probability per station is required"));
    }
    let table = SlotTable::build(specs, profile, cfg.capture)?;
    let tau = tau.tau();
    let n = specs.len();
    let measured = cfg.measured_slots();
    let chunks = measured.div_ceil(CHUNK_SLOTS) as usize;
    let empty_slot = profile.empty_slot_us;

    let parts = cfg.exec.map_range(chunks, |c| {
        let start = c as u64 * CHUNK_SLOTS;
        let len = CHUNK_SLOTS.min(measured - start);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        let mut out = SimResult::empty(table.payload_bits.clone(), cfg.trace);
        let mut attempters = Vec::with_capacity(n);
        let mut fates = Vec::with_capacity(n);
        for s in 0..len {
            attempters.clear();
            for (i, &t) in tau.iter().enumerate() {
                if unit(&mut rng) < t {
                    attempters.push(i);
                }
            }
            table.resolve(
                &attempters,
                cfg.warmup_slots + start + s,
                empty_slot,
                &mut rng,
                &mut out,
                &mut fates,
            );
        }
        out
    });

    let mut total = SimResult::empty(table.payload_bits.clone(), cfg.trace);
    for part in parts {
        total.merge(part);
    }
    Ok(total)
}
