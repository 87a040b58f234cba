//! Cycle-approximate model of a tiled mesh NUCA chip.
//!
//! Every tile has one core with a private L1D, one LLC bank and one CHA
//! (directory slice). An L1 miss consults the line's CHA, which has the data
//! forwarded from the LLC bank holding it (or from a remote L1 owner). The
//! round-trip cost has two network legs, requester↔CHA and
//! requester↔forwarder, each charged per hop.
//!
//! [`SimMachine`] is a passive state object: callers drive it one operation at
//! a time and get back the operation's latency.

mod addr;
mod cache;
mod config;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

pub use addr::{bank_of, cha_of, hop_distance, Mesh, PhysAddr, TileId};
pub use cache::{CacheLineState, Coherence};
pub use config::{LlcPlacement, MachineConfig};

use addr::{bank_of_line, cha_of_line, llc_set_of_line};
use cache::{L1Array, LlcBanks};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HitLevel {
    #[serde(rename = "L1")]
    L1,
    #[serde(rename = "LLC_LOCAL")]
    LlcLocal,
    #[serde(rename = "LLC_REMOTE")]
    LlcRemote,
    #[serde(rename = "DRAM")]
    Dram,
}

impl HitLevel {
    pub fn is_llc(self) -> bool {
        matches!(self, HitLevel::LlcLocal | HitLevel::LlcRemote)
    }
}

/// Outcome of one memory operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemResult {
    pub latency: u64,
    pub hit_level: HitLevel,
    /// Tile whose cache supplied the data (the forwarder for LLC hits).
    pub serving_tile: TileId,
    pub cha_tile: TileId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MachineStats {
    pub loads: u64,
    pub stores: u64,
    pub probes: u64,
    pub l1_hits: u64,
    pub llc_local: u64,
    pub llc_remote: u64,
    pub dram: u64,
}

/// Empirical per-packet queueing delays from a loaded network; each network
/// message of an access draws one sample.
#[derive(Clone, Debug)]
pub struct PacketDelays(Arc<Vec<u32>>);

impl PacketDelays {
    pub fn new(samples: Vec<u32>) -> Self {
        Self(Arc::new(samples))
    }

    pub fn samples(&self) -> &[u32] {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().map(|&d| d as f64).sum::<f64>() / self.0.len() as f64
    }
}

#[derive(Clone, Debug, Default)]
struct LineMeta {
    /// LLC bank (tile) holding the line; `None` when only DRAM has it.
    bank: Option<u16>,
    /// Tiles whose L1 holds a copy.
    holders: Vec<u16>,
}

#[derive(Clone, Debug)]
pub struct SimMachine {
    cfg: MachineConfig,
    mesh: Mesh,
    l1: L1Array,
    llc: LlcBanks,
    dir: FxHashMap<u64, LineMeta>,
    versions: FxHashMap<u64, u64>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    stamp: u64,
    llc_floor: Option<u64>,
    congestion: Option<PacketDelays>,
    debug_checks: bool,
    stats: MachineStats,
}

impl SimMachine {
    pub fn new(cfg: MachineConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = Mesh::of(&cfg);
        let noise = (cfg.noise_stddev > 0.0)
            .then(|| Normal::new(0.0, cfg.noise_stddev).expect("validated stddev"));
        Ok(Self {
            l1: L1Array::new(cfg.tiles(), cfg.l1_sets as usize, cfg.l1_ways as usize),
            llc: LlcBanks::new(cfg.llc_ways as usize),
            dir: FxHashMap::default(),
            versions: FxHashMap::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            noise,
            stamp: 0,
            llc_floor: None,
            congestion: None,
            debug_checks: false,
            stats: MachineStats::default(),
            mesh,
            cfg,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn mesh(&self) -> Mesh {
        self.mesh
    }

    pub fn stats(&self) -> MachineStats {
        self.stats
    }

    /// Restarts the noise stream; cache state is untouched.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Verify directory/L1/LLC consistency after every operation (slow).
    pub fn set_debug_checks(&mut self, on: bool) {
        self.debug_checks = on;
    }

    pub fn cha_of(&self, addr: PhysAddr) -> TileId {
        cha_of(addr, &self.cfg)
    }

    pub fn bank_of(&self, addr: PhysAddr) -> TileId {
        bank_of(addr, &self.cfg)
    }

    /// Pads every LLC hit to at least `floor` cycles (before noise).
    pub(crate) fn set_llc_floor(&mut self, floor: Option<u64>) {
        self.llc_floor = floor;
    }

    pub fn llc_floor(&self) -> Option<u64> {
        self.llc_floor
    }

    pub fn set_congestion(&mut self, delays: Option<PacketDelays>) {
        self.congestion = delays;
    }

    /// Noise-free round trip for an LLC hit resolved through `cha` with data
    /// supplied by `src`.
    pub fn remote_hit_base(&self, core: TileId, cha: TileId, src: TileId) -> u64 {
        let c = &self.cfg;
        c.lat_l1_hit
            + c.lat_cha_lookup
            + c.lat_llc_bank
            + (2 * hop_distance(core, cha) + 2 * hop_distance(core, src)) * c.hop_cost()
    }

    pub fn local_hit_base(&self) -> u64 {
        self.cfg.lat_l1_hit + self.cfg.lat_llc_bank
    }

    /// Largest noise-free LLC-hit round trip anywhere on the mesh.
    pub fn worst_case_llc_latency(&self) -> u64 {
        let m = self.mesh.max_hops();
        let c = &self.cfg;
        c.lat_l1_hit + c.lat_cha_lookup + c.lat_llc_bank + 4 * m * c.hop_cost()
    }

    // ---- observation helpers (no timing effect) ----

    /// Number of stores that have hit the 4-byte word containing `addr`.
    pub fn word_version(&self, addr: PhysAddr) -> u64 {
        self.versions.get(&(addr.raw() & !3)).copied().unwrap_or(0)
    }

    pub fn l1_state(&self, tile: TileId, addr: PhysAddr) -> Option<Coherence> {
        self.l1.state(tile.linear as usize, self.line(addr))
    }

    pub fn l1_line(&self, tile: TileId, addr: PhysAddr) -> Option<CacheLineState> {
        let line = self.line(addr);
        let t = tile.linear as usize;
        let coherence = self.l1.state(t, line)?;
        Some(CacheLineState {
            tag: line * self.cfg.line_size,
            coherence,
            owner_tile: self.owner_of(line),
            lru_rank: self.l1.lru_rank(t, line).unwrap_or(0),
        })
    }

    /// Tile whose LLC bank holds the line (the forwarding tile).
    pub fn llc_home(&self, addr: PhysAddr) -> Option<TileId> {
        self.dir
            .get(&self.line(addr))
            .and_then(|m| m.bank)
            .map(|b| self.mesh.tile_linear(b as usize))
    }

    /// Directory sharer list, sorted by tile index.
    pub fn sharers(&self, addr: PhysAddr) -> Vec<TileId> {
        let mut v: Vec<u16> = self
            .dir
            .get(&self.line(addr))
            .map(|m| m.holders.clone())
            .unwrap_or_default();
        v.sort_unstable();
        v.into_iter()
            .map(|t| self.mesh.tile_linear(t as usize))
            .collect()
    }

    pub fn l1_lines(&self, tile: TileId) -> Vec<PhysAddr> {
        self.l1
            .lines_of(tile.linear as usize)
            .into_iter()
            .map(|l| PhysAddr(l * self.cfg.line_size))
            .collect()
    }

    fn line(&self, addr: PhysAddr) -> u64 {
        addr.line_number(self.cfg.line_size)
    }

    fn owner_of(&self, line: u64) -> Option<u16> {
        let meta = self.dir.get(&line)?;
        meta.holders.iter().copied().find(|&t| {
            self.l1
                .state(t as usize, line)
                .is_some_and(Coherence::is_owned)
        })
    }

    fn tile(&self, t: u16) -> TileId {
        self.mesh.tile_linear(t as usize)
    }

    // ---- latency finishing ----

    fn jitter(&mut self, base: u64) -> u64 {
        match self.noise {
            None => base,
            Some(n) => {
                let v = base as f64 + n.sample(&mut self.rng);
                (v.round().max(self.cfg.lat_l1_hit as f64)) as u64
            }
        }
    }

    /// Applies the defense floor, congestion and noise to a network access.
    fn finish(&mut self, base: u64, llc_hit: bool, packets: u32) -> u64 {
        let mut lat = base;
        if llc_hit {
            if let Some(floor) = self.llc_floor {
                lat = lat.max(floor);
            }
        }
        if let Some(delays) = &self.congestion {
            let s = delays.samples();
            if !s.is_empty() {
                for _ in 0..packets {
                    lat += s[self.rng.random_range(0..s.len())] as u64;
                }
            }
        }
        self.jitter(lat)
    }

    fn packets(core: TileId, cha: TileId, src: TileId) -> u32 {
        2 * (hop_distance(core, cha) > 0) as u32 + 2 * (hop_distance(core, src) > 0) as u32
    }

    // ---- state mutation helpers ----

    fn install_l1(&mut self, core: u16, line: u64, state: Coherence) {
        self.stamp += 1;
        if let Some((victim, vstate)) = self.l1.insert(core as usize, line, state, self.stamp) {
            // Modified victims write back into their LLC copy; the data path
            // is off the critical path of the access that caused the eviction.
            let _ = vstate;
            self.drop_holder(victim, core);
        }
        let meta = self.dir.entry(line).or_default();
        if !meta.holders.contains(&core) {
            meta.holders.push(core);
        }
    }

    fn drop_holder(&mut self, line: u64, tile: u16) {
        if let Some(meta) = self.dir.get_mut(&line) {
            meta.holders.retain(|&t| t != tile);
            if meta.bank.is_none() && meta.holders.is_empty() {
                self.dir.remove(&line);
            }
        }
    }

    fn fill_llc(&mut self, line: u64, requester: u16) -> u16 {
        let bank = match self.cfg.llc_placement {
            LlcPlacement::FirstTouch => requester,
            LlcPlacement::AddressInterleaved => bank_of_line(line, &self.cfg).linear,
        };
        let set = llc_set_of_line(line, &self.cfg);
        self.stamp += 1;
        if let Some(victim) = self.llc.insert(bank, set, line, self.stamp) {
            self.back_invalidate(victim);
        }
        self.dir.entry(line).or_default().bank = Some(bank);
        bank
    }

    /// Inclusive LLC: losing the LLC copy removes every L1 copy.
    fn back_invalidate(&mut self, line: u64) {
        if let Some(meta) = self.dir.remove(&line) {
            for t in meta.holders {
                self.l1.remove(t as usize, line);
            }
        }
    }

    fn touch_llc(&mut self, line: u64, bank: u16) {
        self.stamp += 1;
        let set = llc_set_of_line(line, &self.cfg);
        self.llc.touch(bank, set, line, self.stamp);
    }

    /// Brings `line` toward `core` after an L1 miss. Returns the base latency
    /// (before floor/noise), hit level, data source and packet count.
    fn fetch(&mut self, core: u16, line: u64) -> (u64, HitLevel, u16, u32) {
        let cha = cha_of_line(line, &self.cfg);
        let core_t = self.tile(core);
        let owner = self.owner_of(line).filter(|&o| o != core);
        let bank = self.dir.get(&line).and_then(|m| m.bank);
        match bank {
            Some(bank) => {
                self.touch_llc(line, bank);
                if let Some(o) = owner {
                    // Remote owner forwards and drops to Shared.
                    self.l1.set_state(o as usize, line, Coherence::Shared);
                    let src = self.tile(o);
                    let base = self.remote_hit_base(core_t, cha, src);
                    (
                        base,
                        HitLevel::LlcRemote,
                        o,
                        Self::packets(core_t, cha, src),
                    )
                } else if bank == core {
                    (self.local_hit_base(), HitLevel::LlcLocal, bank, 0)
                } else {
                    let src = self.tile(bank);
                    let base = self.remote_hit_base(core_t, cha, src);
                    (
                        base,
                        HitLevel::LlcRemote,
                        bank,
                        Self::packets(core_t, cha, src),
                    )
                }
            }
            None => {
                let fill = self.fill_llc(line, core);
                let src = self.tile(fill);
                let base = self.remote_hit_base(core_t, cha, src) + self.cfg.lat_dram;
                (base, HitLevel::Dram, fill, Self::packets(core_t, cha, src))
            }
        }
    }

    fn result(&self, latency: u64, hit_level: HitLevel, serving: u16, line: u64) -> MemResult {
        MemResult {
            latency,
            hit_level,
            serving_tile: self.tile(serving),
            cha_tile: cha_of_line(line, &self.cfg),
        }
    }

    fn count(&mut self, level: HitLevel) {
        match level {
            HitLevel::L1 => self.stats.l1_hits += 1,
            HitLevel::LlcLocal => self.stats.llc_local += 1,
            HitLevel::LlcRemote => self.stats.llc_remote += 1,
            HitLevel::Dram => self.stats.dram += 1,
        }
    }

    // ---- operations ----

    pub fn load(&mut self, core: TileId, addr: PhysAddr) -> MemResult {
        self.stats.loads += 1;
        let line = self.line(addr);
        let c = core.linear;
        self.stamp += 1;
        if self.l1.touch(c as usize, line, self.stamp).is_some() {
            let lat = self.jitter(self.cfg.lat_l1_hit);
            self.count(HitLevel::L1);
            return self.result(lat, HitLevel::L1, c, line);
        }
        let (base, level, src, packets) = self.fetch(c, line);
        let others = self
            .dir
            .get(&line)
            .map(|m| m.holders.iter().any(|&t| t != c))
            .unwrap_or(false);
        if others {
            // The newest sharer takes the Forward role.
            let holders = self.dir[&line].holders.clone();
            for t in holders {
                if self.l1.state(t as usize, line) == Some(Coherence::Forward) {
                    self.l1.set_state(t as usize, line, Coherence::Shared);
                }
            }
            self.install_l1(c, line, Coherence::Forward);
        } else {
            self.install_l1(c, line, Coherence::Exclusive);
        }
        let lat = self.finish(base, level.is_llc(), packets);
        self.count(level);
        self.check(line);
        self.result(lat, level, src, line)
    }

    /// Read-for-ownership shared by `store` and `prefetchw_probe`.
    fn acquire(&mut self, core: TileId, addr: PhysAddr, write: bool) -> MemResult {
        let line = self.line(addr);
        let c = core.linear;
        let cha = cha_of_line(line, &self.cfg);
        self.stamp += 1;
        let own = self.l1.touch(c as usize, line, self.stamp);
        let res = match own {
            Some(st) if st.is_owned() => {
                if write {
                    self.l1.set_state(c as usize, line, Coherence::Modified);
                }
                let lat = self.jitter(self.cfg.lat_l1_hit);
                self.count(HitLevel::L1);
                self.result(lat, HitLevel::L1, c, line)
            }
            Some(_) => {
                // Upgrade: only the CHA round trip and sharer invalidations.
                let inval = self.invalidate_others(c, line);
                let cfg = &self.cfg;
                let base = cfg.lat_l1_hit
                    + cfg.lat_cha_lookup
                    + 2 * hop_distance(core, cha) * cfg.hop_cost()
                    + inval;
                let packets = 2 * (hop_distance(core, cha) > 0) as u32;
                let level = if cha.linear == c {
                    HitLevel::LlcLocal
                } else {
                    HitLevel::LlcRemote
                };
                self.set_owned(c, line, write);
                let lat = self.finish(base, true, packets);
                self.count(level);
                self.result(lat, level, cha.linear, line)
            }
            None => {
                let dirty_owner = self
                    .owner_of(line)
                    .filter(|&o| o != c)
                    .filter(|&o| self.l1.state(o as usize, line) == Some(Coherence::Modified));
                let (mut base, level, src, packets) = self.fetch(c, line);
                base += self.invalidate_others(c, line);
                if dirty_owner.is_some() {
                    base += self.cfg.lat_dram;
                }
                self.install_l1(c, line, Coherence::Exclusive);
                self.set_owned(c, line, write);
                // The floor pads the LLC round trip; the dirty write-back
                // penalty is added on top of the padded value.
                let lat = if dirty_owner.is_some() && level.is_llc() {
                    let pen = self.cfg.lat_dram;
                    self.finish(base - pen, true, packets) + pen
                } else {
                    self.finish(base, level.is_llc(), packets)
                };
                self.count(level);
                self.result(lat, level, src, line)
            }
        };
        if write {
            *self.versions.entry(addr.raw() & !3).or_insert(0) += 1;
        }
        self.check(line);
        res
    }

    fn set_owned(&mut self, core: u16, line: u64, write: bool) {
        let cur = self.l1.state(core as usize, line);
        let next = if write || cur == Some(Coherence::Modified) {
            Coherence::Modified
        } else {
            Coherence::Exclusive
        };
        self.l1.set_state(core as usize, line, next);
    }

    /// Removes every other L1 copy; returns the invalidation round-trip cost.
    fn invalidate_others(&mut self, core: u16, line: u64) -> u64 {
        let Some(meta) = self.dir.get_mut(&line) else {
            return 0;
        };
        let others: Vec<u16> = meta
            .holders
            .iter()
            .copied()
            .filter(|&t| t != core)
            .collect();
        meta.holders.retain(|&t| t == core);
        let core_t = self.tile(core);
        let mut far = 0;
        for t in others {
            self.l1.remove(t as usize, line);
            far = far.max(hop_distance(core_t, self.tile(t)));
        }
        2 * far * self.cfg.hop_cost()
    }

    /// Writes the 4-byte word at `addr`; the line ends Modified in `core`'s L1
    /// and every other copy is invalidated.
    pub fn store(&mut self, core: TileId, addr: PhysAddr) -> MemResult {
        self.stats.stores += 1;
        self.acquire(core, addr, true)
    }

    /// PREFETCHW: request ownership without writing. Slow when another tile
    /// holds the line dirty, fast when `core` already owns it.
    pub fn prefetchw_probe(&mut self, core: TileId, addr: PhysAddr) -> MemResult {
        self.stats.probes += 1;
        self.acquire(core, addr, false)
    }

    /// Drops `core`'s L1 copy; the LLC copy stays. No-op when absent.
    pub fn flush_l1(&mut self, core: TileId, addr: PhysAddr) {
        let line = self.line(addr);
        if self.l1.remove(core.linear as usize, line).is_some() {
            self.drop_holder(line, core.linear);
        }
        self.check(line);
    }

    /// CLFLUSH: removes the line from every cache level.
    pub fn clflush(&mut self, addr: PhysAddr) {
        let line = self.line(addr);
        if let Some(meta) = self.dir.remove(&line) {
            for t in meta.holders {
                self.l1.remove(t as usize, line);
            }
            if let Some(bank) = meta.bank {
                self.llc
                    .remove(bank, llc_set_of_line(line, &self.cfg), line);
            }
        }
        self.check(line);
    }

    // ---- invariants ----

    fn check(&self, line: u64) {
        if self.debug_checks {
            if let Err(msg) = self.check_line(line) {
                panic!("coherence invariant violated: {msg}");
            }
        }
    }

    fn check_line(&self, line: u64) -> std::result::Result<(), String> {
        let tiles = self.cfg.tiles();
        let actual = self.l1.tiles_holding(tiles, line);
        let mut listed = self
            .dir
            .get(&line)
            .map(|m| m.holders.clone())
            .unwrap_or_default();
        listed.sort_unstable();
        if actual != listed {
            return Err(format!(
                "line {line:#x}: L1 holders {actual:?} != directory {listed:?}"
            ));
        }
        let owned = actual
            .iter()
            .filter(|&&t| {
                self.l1
                    .state(t as usize, line)
                    .is_some_and(Coherence::is_owned)
            })
            .count();
        if owned > 1 || (owned == 1 && actual.len() > 1) {
            return Err(format!("line {line:#x}: owned copy coexists with others"));
        }
        if !actual.is_empty() {
            let bank = self.dir.get(&line).and_then(|m| m.bank);
            let present =
                bank.is_some_and(|b| self.llc.contains(b, llc_set_of_line(line, &self.cfg), line));
            if !present {
                return Err(format!("line {line:#x}: in L1 but not in any LLC bank"));
            }
        }
        Ok(())
    }

    /// Full consistency check over every tracked line.
    pub fn check_all(&self) -> std::result::Result<(), String> {
        let mut lines: Vec<u64> = self.dir.keys().copied().collect();
        for t in 0..self.cfg.tiles() {
            lines.extend(self.l1.lines_of(t));
        }
        lines.sort_unstable();
        lines.dedup();
        lines.into_iter().try_for_each(|l| self.check_line(l))
    }
}

#[cfg(test)]
mod tests;
