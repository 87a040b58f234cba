//! AES-128 with OpenSSL-style T-tables, and the timed decryption whose
//! last-round Td4 loads are the attack target.

use serde::{Deserialize, Serialize};

use crate::agents::Op;
use crate::error::{Error, Result};
use crate::machine::{PhysAddr, SimMachine, TileId};

const fn xtime(b: u8) -> u8 {
    (b << 1) ^ if b & 0x80 != 0 { 0x1b } else { 0 }
}

const fn gmul(mut a: u8, mut b: u8) -> u8 {
    let mut p = 0;
    while b != 0 {
        if b & 1 != 0 {
            p ^= a;
        }
        a = xtime(a);
        b >>= 1;
    }
    p
}

const fn ginv(x: u8) -> u8 {
    // x^254 = x^-1 in GF(2^8); 0 maps to 0.
    let mut result = 1u8;
    let mut base = x;
    let mut e = 254u32;
    while e != 0 {
        if e & 1 != 0 {
            result = gmul(result, base);
        }
        base = gmul(base, base);
        e >>= 1;
    }
    if x == 0 {
        0
    } else {
        result
    }
}

const fn build_sbox() -> [u8; 256] {
    let mut s = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        let b = ginv(i as u8);
        s[i] = b ^ b.rotate_left(1) ^ b.rotate_left(2) ^ b.rotate_left(3) ^ b.rotate_left(4) ^ 0x63;
        i += 1;
    }
    s
}

const fn invert(s: &[u8; 256]) -> [u8; 256] {
    let mut inv = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        inv[s[i] as usize] = i as u8;
        i += 1;
    }
    inv
}

const fn build_td0() -> [u32; 256] {
    let mut t = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let s = INV_SBOX[i];
        t[i] = (gmul(s, 0x0e) as u32) << 24
            | (gmul(s, 0x09) as u32) << 16
            | (gmul(s, 0x0d) as u32) << 8
            | gmul(s, 0x0b) as u32;
        i += 1;
    }
    t
}

const fn rotate_table(t: &[u32; 256], bits: u32) -> [u32; 256] {
    let mut r = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        r[i] = t[i].rotate_right(bits);
        i += 1;
    }
    r
}

pub const SBOX: [u8; 256] = build_sbox();
pub const INV_SBOX: [u8; 256] = invert(&SBOX);
pub const TD0: [u32; 256] = build_td0();
pub const TD1: [u32; 256] = rotate_table(&TD0, 8);
pub const TD2: [u32; 256] = rotate_table(&TD0, 16);
pub const TD3: [u32; 256] = rotate_table(&TD0, 24);
/// The last-round table: the inverse S-box, one byte per entry.
pub const TD4: [u8; 256] = INV_SBOX;

const RCON: [u32; 10] = [
    0x0100_0000,
    0x0200_0000,
    0x0400_0000,
    0x0800_0000,
    0x1000_0000,
    0x2000_0000,
    0x4000_0000,
    0x8000_0000,
    0x1b00_0000,
    0x3600_0000,
];

fn sub_word(w: u32) -> u32 {
    u32::from_be_bytes(w.to_be_bytes().map(|b| SBOX[b as usize]))
}

fn inv_mix_word(w: u32) -> u32 {
    let b = w.to_be_bytes();
    TD0[SBOX[b[0] as usize] as usize]
        ^ TD1[SBOX[b[1] as usize] as usize]
        ^ TD2[SBOX[b[2] as usize] as usize]
        ^ TD3[SBOX[b[3] as usize] as usize]
}

/// AES-128 round keys. `dec` is the equivalent-inverse-cipher schedule: the
/// encryption rounds in reverse with InvMixColumns on rounds 1–9.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AesKeySchedule {
    pub key: [u8; 16],
    pub round_keys: [u32; 44],
    pub dec: [u32; 44],
}

impl AesKeySchedule {
    pub fn new(key: [u8; 16]) -> Self {
        let mut w = [0u32; 44];
        for (i, chunk) in key.chunks_exact(4).enumerate() {
            w[i] = u32::from_be_bytes(chunk.try_into().expect("4 bytes"));
        }
        for i in 4..44 {
            let mut t = w[i - 1];
            if i % 4 == 0 {
                t = sub_word(t.rotate_left(8)) ^ RCON[i / 4 - 1];
            }
            w[i] = w[i - 4] ^ t;
        }
        let mut dec = [0u32; 44];
        for r in 0..=10 {
            for c in 0..4 {
                let word = w[4 * (10 - r) + c];
                dec[4 * r + c] = if r == 0 || r == 10 {
                    word
                } else {
                    inv_mix_word(word)
                };
            }
        }
        Self {
            key,
            round_keys: w,
            dec,
        }
    }

    /// Round-key word XORed into output word `word` by the final
    /// AddRoundKey of decryption; equal to `round_keys[word]`.
    pub fn last_round_word(&self, word: usize) -> u32 {
        self.dec[40 + word]
    }
}

fn words_of(block: &[u8; 16]) -> [u32; 4] {
    std::array::from_fn(|i| {
        u32::from_be_bytes(block[4 * i..4 * i + 4].try_into().expect("4 bytes"))
    })
}

fn bytes_of(words: [u32; 4]) -> [u8; 16] {
    let mut out = [0u8; 16];
    for (i, w) in words.iter().enumerate() {
        out[4 * i..4 * i + 4].copy_from_slice(&w.to_be_bytes());
    }
    out
}

#[inline]
fn b(x: u32, k: u32) -> usize {
    ((x >> (24 - 8 * k)) & 0xff) as usize
}

/// Table indices touched by one decryption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecryptTrace {
    /// `[round][word][table]` index into Td0..Td3 for rounds 1–9.
    pub rounds: [[[u8; 4]; 4]; 9],
    /// `[word][j]` Td4 index producing byte `j` of output word `word`.
    pub last: [[u8; 4]; 4],
}

/// Functional T-table decryption that also reports every table index used.
pub fn decrypt_traced(ks: &AesKeySchedule, ct: &[u8; 16]) -> ([u8; 16], DecryptTrace) {
    let rk = &ks.dec;
    let mut s = words_of(ct);
    for c in 0..4 {
        s[c] ^= rk[c];
    }
    let mut trace = DecryptTrace {
        rounds: [[[0; 4]; 4]; 9],
        last: [[0; 4]; 4],
    };
    for r in 0..9 {
        let mut t = [0u32; 4];
        for c in 0..4 {
            // Word c reads column c, c+3, c+2, c+1 (mod 4) for rows 0..3.
            let idx = [
                b(s[c], 0),
                b(s[(c + 3) % 4], 1),
                b(s[(c + 2) % 4], 2),
                b(s[(c + 1) % 4], 3),
            ];
            t[c] = TD0[idx[0]] ^ TD1[idx[1]] ^ TD2[idx[2]] ^ TD3[idx[3]] ^ rk[4 * (r + 1) + c];
            trace.rounds[r][c] = idx.map(|i| i as u8);
        }
        s = t;
    }
    let mut out = [0u32; 4];
    for c in 0..4 {
        let idx = [
            b(s[c], 0),
            b(s[(c + 3) % 4], 1),
            b(s[(c + 2) % 4], 2),
            b(s[(c + 1) % 4], 3),
        ];
        out[c] = u32::from_be_bytes(idx.map(|i| TD4[i])) ^ rk[40 + c];
        trace.last[c] = idx.map(|i| i as u8);
    }
    (bytes_of(out), trace)
}

pub fn decrypt_block(ks: &AesKeySchedule, ct: &[u8; 16]) -> [u8; 16] {
    decrypt_traced(ks, ct).0
}

pub fn encrypt_block(ks: &AesKeySchedule, pt: &[u8; 16]) -> [u8; 16] {
    // State is column-major: st[4*c + r].
    let mut st = *pt;
    let add = |st: &mut [u8; 16], round: usize| {
        for c in 0..4 {
            let k = ks.round_keys[4 * round + c].to_be_bytes();
            for r in 0..4 {
                st[4 * c + r] ^= k[r];
            }
        }
    };
    add(&mut st, 0);
    for round in 1..=10 {
        let mut n = [0u8; 16];
        for c in 0..4 {
            for r in 0..4 {
                n[4 * c + r] = SBOX[st[4 * ((c + r) % 4) + r] as usize];
            }
        }
        if round != 10 {
            for c in 0..4 {
                let a: [u8; 4] = n[4 * c..4 * c + 4].try_into().expect("column");
                for r in 0..4 {
                    n[4 * c + r] =
                        gmul(a[r], 2) ^ gmul(a[(r + 1) % 4], 3) ^ a[(r + 2) % 4] ^ a[(r + 3) % 4];
                }
            }
        }
        st = n;
        add(&mut st, round);
    }
    st
}

/// Where the decryption tables and output buffer live in simulated memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AesTables {
    /// Td0..Td3, 1 KiB each, contiguous.
    pub td_base: PhysAddr,
    pub td4_base: PhysAddr,
    /// 16-byte output buffer.
    pub out: PhysAddr,
}

impl AesTables {
    pub fn new(td_base: PhysAddr, td4_base: PhysAddr, out: PhysAddr) -> Result<Self> {
        let t = Self {
            td_base,
            td4_base,
            out,
        };
        t.validate(64)?;
        Ok(t)
    }

    pub fn validate(&self, line_size: u64) -> Result<()> {
        for (name, a) in [
            ("td_base", self.td_base),
            ("td4_base", self.td4_base),
            ("out", self.out),
        ] {
            if a.line_offset(line_size) != 0 {
                return Err(Error::config(name, format!("{a} is not line-aligned")));
            }
        }
        let td = self.td_base.raw()..self.td_base.raw() + 4096;
        let td4 = self.td4_base.raw()..self.td4_base.raw() + 256;
        let out = self.out.raw()..self.out.raw() + line_size;
        let overlap =
            |a: &std::ops::Range<u64>, b: &std::ops::Range<u64>| a.start < b.end && b.start < a.end;
        if overlap(&td, &td4) || overlap(&td, &out) || overlap(&td4, &out) {
            return Err(Error::config("td4_base", "tables and out buffer overlap"));
        }
        Ok(())
    }

    pub fn td_addr(&self, table: usize, index: u8) -> PhysAddr {
        self.td_base.offset(1024 * table as u64 + 4 * index as u64)
    }

    pub fn td4_addr(&self, index: u8) -> PhysAddr {
        self.td4_base.offset(index as u64)
    }

    /// Which of Td4's four lines holds `index`.
    pub fn td4_line_of(index: u8) -> usize {
        index as usize / 64
    }

    pub fn td_lines(&self) -> impl Iterator<Item = PhysAddr> + '_ {
        (0..64).map(|i| self.td_base.offset(64 * i))
    }

    pub fn td4_lines(&self) -> impl Iterator<Item = PhysAddr> + '_ {
        (0..4).map(|i| self.td4_base.offset(64 * i))
    }

    pub fn with_td4(self, td4_base: PhysAddr) -> Self {
        Self { td4_base, ..self }
    }
}

/// Inputs of one decryption.
#[derive(Clone, Debug)]
pub struct DecryptIo {
    pub input: [u8; 16],
    pub key_schedule: AesKeySchedule,
}

/// Cycles to combine four overlapped Td4 results into a word.
pub const COMBINE_CYCLES: u64 = 8;
/// Fixed ALU work per last-round output word.
pub const WORD_ALU_CYCLES: u64 = 6;
/// Mark emitted just before the last round starts.
pub const MARK_LAST_ROUND: u32 = 1;
/// Mark emitted after the final out store.
pub const MARK_DONE: u32 = 2;

/// The victim's operation stream for one decryption and the resulting
/// plaintext. Rounds 1–9 issue their 144 Td0–Td3 loads one by one; the last
/// round issues, per output word, its four Td4 loads as one overlapped group
/// followed by the combine/ALU work and the store to `out + 4·word`.
///
/// Td4 loads do not allocate in the victim's L1, so every last-round word
/// sees the lines' LLC latency.
pub fn decrypt_plan(io: &DecryptIo, tables: &AesTables) -> ([u8; 16], Vec<Op>) {
    let (pt, trace) = decrypt_traced(&io.key_schedule, &io.input);
    let mut ops = Vec::with_capacity(9 * 17 + 14);
    for round in &trace.rounds {
        for word in round {
            for (table, &idx) in word.iter().enumerate() {
                ops.push(Op::Load(tables.td_addr(table, idx)));
            }
        }
        ops.push(Op::Compute(4));
    }
    ops.push(Op::Mark(MARK_LAST_ROUND));
    for (w, idx) in trace.last.iter().enumerate() {
        ops.push(Op::StreamGroup(idx.map(|i| tables.td4_addr(i))));
        ops.push(Op::Compute(COMBINE_CYCLES + WORD_ALU_CYCLES));
        ops.push(Op::Store(tables.out.offset(4 * w as u64)));
    }
    ops.push(Op::Mark(MARK_DONE));
    (pt, ops)
}

/// Runs one decryption directly on `machine` from `core`, without other
/// agents. Returns the plaintext and the simulated cycles spent.
pub fn aes_decrypt(
    io: &DecryptIo,
    tables: &AesTables,
    machine: &mut SimMachine,
    core: TileId,
) -> ([u8; 16], u64) {
    let (pt, ops) = decrypt_plan(io, tables);
    let mut program = crate::agents::Script::ops(ops);
    let mut agents = [crate::agents::Agent::new(core, &mut program)];
    let run = crate::agents::run_scenario(machine, &mut agents, &Default::default())
        .expect("a lone script cannot deadlock");
    (pt, run.makespan())
}

pub fn aes_encrypt(io: &DecryptIo) -> [u8; 16] {
    encrypt_block(&io.key_schedule, &io.input)
}
