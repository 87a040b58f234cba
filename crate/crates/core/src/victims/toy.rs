use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{hop_distance, MemResult, PhysAddr, SimMachine, TileId};

/// A victim that loads one of two addresses depending on a secret bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyVictim {
    pub secret: u8,
    pub addr_near: PhysAddr,
    pub addr_far: PhysAddr,
    pub bit_mask: u8,
}

pub const DEFAULT_MIN_GAP_HOPS: u64 = 8;

impl ToyVictim {
    /// Checks that the two addresses have distinct CHAs at least
    /// `min_gap_hops` apart in distance from `victim`.
    pub fn validate(&self, machine: &SimMachine, victim: TileId, min_gap_hops: u64) -> Result<()> {
        let near = machine.cha_of(self.addr_near);
        let far = machine.cha_of(self.addr_far);
        if near == far {
            return Err(Error::Precondition(format!(
                "near and far addresses share CHA {near}"
            )));
        }
        let (hn, hf) = (hop_distance(victim, near), hop_distance(victim, far));
        if hf < hn + min_gap_hops {
            return Err(Error::Precondition(format!(
                "CHA distance gap {} hops is below the required {min_gap_hops}",
                hf as i64 - hn as i64
            )));
        }
        Ok(())
    }

    /// Address the victim touches for `mask`: near for a set bit.
    pub fn target(&self, mask: u8) -> PhysAddr {
        if self.secret & mask != 0 {
            self.addr_near
        } else {
            self.addr_far
        }
    }
}

/// One secret-dependent load from `victim`'s tile.
pub fn toy_victim_run(
    machine: &mut SimMachine,
    victim: TileId,
    v: &ToyVictim,
    mask: u8,
) -> MemResult {
    let target = v.target(mask);
    if machine.l1_state(victim, target).is_some() {
        log::debug!("toy victim target {target} is L1-resident; the access leaks nothing");
    }
    machine.load(victim, target)
}
