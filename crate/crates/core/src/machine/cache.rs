//! Set-associative storage for the private L1s and the LLC banks. Both use
//! true LRU via per-way access stamps.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

/// MESIF coherence state of an L1 copy. Invalid copies are simply absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Coherence {
    Modified,
    Exclusive,
    Shared,
    Invalid,
    Forward,
}

impl Coherence {
    pub fn is_owned(self) -> bool {
        matches!(self, Coherence::Modified | Coherence::Exclusive)
    }
}

/// Snapshot of one L1 line, as exposed by [`crate::machine::SimMachine::l1_line`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheLineState {
    pub tag: u64,
    pub coherence: Coherence,
    pub owner_tile: Option<u16>,
    /// 0 = most recently used within its set.
    pub lru_rank: u32,
}

const EMPTY: u64 = u64::MAX;

#[derive(Clone, Copy, Debug)]
struct Way {
    line: u64,
    state: Coherence,
    stamp: u64,
}

impl Way {
    const VACANT: Way = Way {
        line: EMPTY,
        state: Coherence::Invalid,
        stamp: 0,
    };
}

/// All tiles' L1 data caches in one flat array: `[tile][set][way]`.
#[derive(Clone, Debug)]
pub(crate) struct L1Array {
    sets: usize,
    ways: usize,
    slots: Vec<Way>,
}

impl L1Array {
    pub fn new(tiles: usize, sets: usize, ways: usize) -> Self {
        Self {
            sets,
            ways,
            slots: vec![Way::VACANT; tiles * sets * ways],
        }
    }

    fn base(&self, tile: usize, line: u64) -> usize {
        let set = (line as usize) & (self.sets - 1);
        (tile * self.sets + set) * self.ways
    }

    fn find(&self, tile: usize, line: u64) -> Option<usize> {
        let base = self.base(tile, line);
        (base..base + self.ways).find(|&i| self.slots[i].line == line)
    }

    pub fn state(&self, tile: usize, line: u64) -> Option<Coherence> {
        self.find(tile, line).map(|i| self.slots[i].state)
    }

    /// Returns the state on a hit and refreshes its LRU stamp.
    pub fn touch(&mut self, tile: usize, line: u64, stamp: u64) -> Option<Coherence> {
        let i = self.find(tile, line)?;
        self.slots[i].stamp = stamp;
        Some(self.slots[i].state)
    }

    pub fn set_state(&mut self, tile: usize, line: u64, state: Coherence) {
        if let Some(i) = self.find(tile, line) {
            self.slots[i].state = state;
        }
    }

    pub fn remove(&mut self, tile: usize, line: u64) -> Option<Coherence> {
        let i = self.find(tile, line)?;
        let state = self.slots[i].state;
        self.slots[i] = Way::VACANT;
        Some(state)
    }

    /// Inserts a line that is known to be absent. Returns the evicted victim.
    pub fn insert(
        &mut self,
        tile: usize,
        line: u64,
        state: Coherence,
        stamp: u64,
    ) -> Option<(u64, Coherence)> {
        let base = self.base(tile, line);
        let ways = &mut self.slots[base..base + self.ways];
        let slot = ways
            .iter()
            .position(|w| w.line == EMPTY)
            .unwrap_or_else(|| {
                ways.iter()
                    .enumerate()
                    .min_by_key(|(_, w)| w.stamp)
                    .map(|(i, _)| i)
                    .expect("at least one way")
            });
        let old = ways[slot];
        ways[slot] = Way { line, state, stamp };
        (old.line != EMPTY).then_some((old.line, old.state))
    }

    pub fn lru_rank(&self, tile: usize, line: u64) -> Option<u32> {
        let i = self.find(tile, line)?;
        let base = self.base(tile, line);
        let mine = self.slots[i].stamp;
        Some(
            self.slots[base..base + self.ways]
                .iter()
                .filter(|w| w.line != EMPTY && w.stamp > mine)
                .count() as u32,
        )
    }

    pub fn contains(&self, tile: usize, line: u64) -> bool {
        self.find(tile, line).is_some()
    }

    pub fn tiles_holding(&self, tiles: usize, line: u64) -> Vec<u16> {
        (0..tiles)
            .filter(|&t| self.contains(t, line))
            .map(|t| t as u16)
            .collect()
    }

    /// Lines held by a tile, in array order.
    pub fn lines_of(&self, tile: usize) -> Vec<u64> {
        let per_tile = self.sets * self.ways;
        self.slots[tile * per_tile..(tile + 1) * per_tile]
            .iter()
            .filter(|w| w.line != EMPTY)
            .map(|w| w.line)
            .collect()
    }
}

/// Sparse LLC banks keyed by `(bank, set)`.
#[derive(Clone, Debug)]
pub(crate) struct LlcBanks {
    ways: usize,
    sets: FxHashMap<u64, Vec<(u64, u64)>>,
}

impl LlcBanks {
    pub fn new(ways: usize) -> Self {
        Self {
            ways,
            sets: FxHashMap::default(),
        }
    }

    fn key(bank: u16, set: u32) -> u64 {
        ((bank as u64) << 32) | set as u64
    }

    pub fn contains(&self, bank: u16, set: u32, line: u64) -> bool {
        self.sets
            .get(&Self::key(bank, set))
            .is_some_and(|s| s.iter().any(|&(l, _)| l == line))
    }

    pub fn touch(&mut self, bank: u16, set: u32, line: u64, stamp: u64) {
        if let Some(entry) = self
            .sets
            .get_mut(&Self::key(bank, set))
            .and_then(|s| s.iter_mut().find(|(l, _)| *l == line))
        {
            entry.1 = stamp;
        }
    }

    /// Inserts an absent line; returns the LRU line evicted to make room.
    pub fn insert(&mut self, bank: u16, set: u32, line: u64, stamp: u64) -> Option<u64> {
        let ways = self.ways;
        let s = self.sets.entry(Self::key(bank, set)).or_default();
        if s.len() < ways {
            s.push((line, stamp));
            return None;
        }
        let (idx, _) = s
            .iter()
            .enumerate()
            .min_by_key(|(_, (_, st))| *st)
            .expect("full set is non-empty");
        let victim = s[idx].0;
        s[idx] = (line, stamp);
        Some(victim)
    }

    pub fn remove(&mut self, bank: u16, set: u32, line: u64) -> bool {
        let key = Self::key(bank, set);
        let Some(s) = self.sets.get_mut(&key) else {
            return false;
        };
        let before = s.len();
        s.retain(|&(l, _)| l != line);
        let removed = s.len() != before;
        if s.is_empty() {
            self.sets.remove(&key);
        }
        removed
    }
}
