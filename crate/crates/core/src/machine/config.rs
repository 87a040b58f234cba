use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a line's single LLC copy is placed when it is filled from DRAM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlcPlacement {
    /// The bank of the tile that first touched the line holds it (KNL-style
    /// private-L2 tiles; the filling tile becomes the forwarder).
    #[default]
    FirstTouch,
    /// The bank selected by [`crate::machine::bank_of`] holds it (static NUCA).
    AddressInterleaved,
}

/// Mesh geometry, cache geometry and latency constants of the simulated chip.
///
/// All latencies are in core cycles. Loads from JSON accept partial documents;
/// missing fields take the 8x8 defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    pub mesh_width: u16,
    pub mesh_height: u16,
    pub line_size: u64,
    pub l1_sets: u32,
    pub l1_ways: u32,
    pub llc_sets_per_bank: u32,
    pub llc_ways: u32,
    pub lat_l1_hit: u64,
    pub lat_llc_bank: u64,
    pub lat_cha_lookup: u64,
    pub lat_per_hop: u64,
    /// Charged once for every router a message enters.
    pub lat_router: u64,
    pub lat_dram: u64,
    /// One iteration of an attacker's counting/polling loop.
    pub lat_poll_iter: u64,
    pub clock_hz: f64,
    pub rng_seed: u64,
    pub noise_stddev: f64,
    pub llc_placement: LlcPlacement,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            mesh_width: 8,
            mesh_height: 8,
            line_size: 64,
            // 32 KiB 8-way private L1D.
            l1_sets: 64,
            l1_ways: 8,
            // 2 MiB 8-way bank per tile.
            llc_sets_per_bank: 4096,
            llc_ways: 8,
            lat_l1_hit: 4,
            lat_llc_bank: 14,
            lat_cha_lookup: 6,
            lat_per_hop: 3,
            lat_router: 1,
            lat_dram: 250,
            lat_poll_iter: 6,
            clock_hz: 1.5e9,
            rng_seed: 0x6e75_6361,
            noise_stddev: 3.0,
            llc_placement: LlcPlacement::FirstTouch,
        }
    }
}

impl MachineConfig {
    /// The small-L1 simulated machine: 4 KiB 2-way L1D and address-interleaved
    /// LLC banks. Too small to keep the AES decryption tables L1-resident.
    pub fn small_l1() -> Self {
        Self {
            l1_sets: 32,
            l1_ways: 2,
            llc_placement: LlcPlacement::AddressInterleaved,
            ..Self::default()
        }
    }

    pub fn noiseless() -> Self {
        Self {
            noise_stddev: 0.0,
            ..Self::default()
        }
    }

    pub fn tiles(&self) -> usize {
        self.mesh_width as usize * self.mesh_height as usize
    }

    pub fn l1_capacity_bytes(&self) -> u64 {
        self.l1_sets as u64 * self.l1_ways as u64 * self.line_size
    }

    /// Cost of one network hop: the link plus the router it enters.
    pub fn hop_cost(&self) -> u64 {
        self.lat_per_hop + self.lat_router
    }

    pub fn validate(&self) -> Result<()> {
        if self.mesh_width < 2 {
            return Err(Error::config("mesh_width", "must be at least 2"));
        }
        if self.mesh_height < 2 {
            return Err(Error::config("mesh_height", "must be at least 2"));
        }
        if self.tiles() > u16::MAX as usize {
            return Err(Error::config("mesh_width", "mesh has too many tiles"));
        }
        for (name, v) in [
            ("line_size", self.line_size),
            ("l1_sets", self.l1_sets as u64),
            ("llc_sets_per_bank", self.llc_sets_per_bank as u64),
        ] {
            if v == 0 || !v.is_power_of_two() {
                return Err(Error::config(name, format!("{v} is not a power of two")));
            }
        }
        if self.line_size < 8 {
            return Err(Error::config("line_size", "must hold at least two words"));
        }
        if self.l1_ways == 0 {
            return Err(Error::config("l1_ways", "must be positive"));
        }
        if self.llc_ways == 0 {
            return Err(Error::config("llc_ways", "must be positive"));
        }
        for (name, v) in [
            ("lat_l1_hit", self.lat_l1_hit),
            ("lat_llc_bank", self.lat_llc_bank),
            ("lat_cha_lookup", self.lat_cha_lookup),
            ("lat_per_hop", self.lat_per_hop),
            ("lat_router", self.lat_router),
            ("lat_dram", self.lat_dram),
            ("lat_poll_iter", self.lat_poll_iter),
        ] {
            if v == 0 {
                return Err(Error::config(name, "latency constants must be > 0"));
            }
        }
        if self.lat_llc_bank <= self.lat_l1_hit {
            return Err(Error::config("lat_llc_bank", "must exceed lat_l1_hit"));
        }
        if self.lat_dram <= self.lat_llc_bank {
            return Err(Error::config("lat_dram", "must exceed lat_llc_bank"));
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(Error::config("clock_hz", "must be a positive frequency"));
        }
        if !(self.noise_stddev.is_finite() && self.noise_stddev >= 0.0) {
            return Err(Error::config("noise_stddev", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            // serde reports unknown/mistyped fields in the message; keep it.
            Error::config("<config file>", e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
