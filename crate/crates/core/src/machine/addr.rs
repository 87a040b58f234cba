use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use super::config::{LlcPlacement, MachineConfig};

/// 64-bit physical address. Virtual and physical addresses coincide in the
/// simulator. Serializes as a `0x`-prefixed hex string; deserializes from that
/// or from a plain integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhysAddr(pub u64);

impl Serialize for PhysAddr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PhysAddr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(u64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(PhysAddr(v)),
            Repr::Text(t) => {
                let digits = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X"));
                let v = match digits {
                    Some(h) => u64::from_str_radix(h, 16),
                    None => t.parse(),
                };
                v.map(PhysAddr)
                    .map_err(|e| de::Error::custom(format!("bad address `{t}`: {e}")))
            }
        }
    }
}

impl PhysAddr {
    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn line_offset(self, line_size: u64) -> u64 {
        self.0 & (line_size - 1)
    }

    pub fn line_addr(self, line_size: u64) -> PhysAddr {
        PhysAddr(self.0 - self.line_offset(line_size))
    }

    /// Line index, i.e. `line_addr / line_size`.
    pub fn line_number(self, line_size: u64) -> u64 {
        self.0 / line_size
    }

    pub fn offset(self, bytes: u64) -> PhysAddr {
        PhysAddr(self.0 + bytes)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// A tile position on the mesh. `linear = y * width + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId {
    pub x: u16,
    pub y: u16,
    pub linear: u16,
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mesh {
    pub width: u16,
    pub height: u16,
}

impl Mesh {
    pub fn new(width: u16, height: u16) -> Self {
        Self { width, height }
    }

    pub fn of(cfg: &MachineConfig) -> Self {
        Self::new(cfg.mesh_width, cfg.mesh_height)
    }

    pub fn tiles(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Panics if the coordinates are outside the mesh.
    pub fn tile(&self, x: u16, y: u16) -> TileId {
        assert!(
            x < self.width && y < self.height,
            "tile ({x},{y}) outside mesh"
        );
        TileId {
            x,
            y,
            linear: y * self.width + x,
        }
    }

    pub fn tile_linear(&self, linear: usize) -> TileId {
        assert!(linear < self.tiles(), "tile {linear} outside mesh");
        let w = self.width as usize;
        self.tile((linear % w) as u16, (linear / w) as u16)
    }

    pub fn contains(&self, t: TileId) -> bool {
        t.x < self.width && t.y < self.height && t.linear == t.y * self.width + t.x
    }

    pub fn all_tiles(&self) -> impl Iterator<Item = TileId> + '_ {
        (0..self.tiles()).map(|i| self.tile_linear(i))
    }

    pub fn max_hops(&self) -> u64 {
        (self.width - 1) as u64 + (self.height - 1) as u64
    }

    pub fn center(&self) -> TileId {
        self.tile((self.width - 1) / 2, (self.height - 1) / 2)
    }
}

/// Manhattan distance, i.e. the X-Y routed hop count.
pub fn hop_distance(a: TileId, b: TileId) -> u64 {
    (a.x.abs_diff(b.x) + a.y.abs_diff(b.y)) as u64
}

const FIB_MULT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Home CHA (directory slice) of the line containing `addr`.
///
/// Multiplicative hash of the line index, so neighbouring lines scatter over
/// the mesh.
pub fn cha_of(addr: PhysAddr, cfg: &MachineConfig) -> TileId {
    cha_of_line(addr.line_number(cfg.line_size), cfg)
}

pub(crate) fn cha_of_line(line: u64, cfg: &MachineConfig) -> TileId {
    let h = line.wrapping_mul(FIB_MULT) >> 40;
    Mesh::of(cfg).tile_linear((h % cfg.tiles() as u64) as usize)
}

/// Address-interleaved bank: the line index modulo the bank count. With 64
/// banks of 64-byte lines this is bits [11:6].
pub fn bank_of(addr: PhysAddr, cfg: &MachineConfig) -> TileId {
    bank_of_line(addr.line_number(cfg.line_size), cfg)
}

pub(crate) fn bank_of_line(line: u64, cfg: &MachineConfig) -> TileId {
    Mesh::of(cfg).tile_linear((line % cfg.tiles() as u64) as usize)
}

/// Set index inside an LLC bank. Address-interleaved banks index with the
/// line-index bits above the bank field; first-touch banks receive
/// consecutive lines and index with the low line-index bits.
pub(crate) fn llc_set_of_line(line: u64, cfg: &MachineConfig) -> u32 {
    let idx = match cfg.llc_placement {
        LlcPlacement::AddressInterleaved => line / cfg.tiles() as u64,
        LlcPlacement::FirstTouch => line,
    };
    (idx % cfg.llc_sets_per_bank as u64) as u32
}
