//! Cooperative covert channel: the sender encodes each bit by loading a near
//! or a far address, the receiver decodes from the sender's own timestamps.
//!
//! Bits are framed in lock step. The sender resets residency, takes its
//! samples and emits `Mark(bit)`; the receiver waits on that mark, decodes,
//! and emits its own `Mark(bit)`, which releases the sender for the next bit.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{hold_llc, run_scenario, Agent, Op, Program, RunOptions, Step, View};
use crate::error::{Error, Result};
use crate::machine::{PhysAddr, SimMachine, TileId};
use crate::stats;

/// Receiver work per bit: read the timestamps and compare the median.
pub const DECODE_CYCLES: u64 = 20;
pub const DEFAULT_SAMPLES_PER_BIT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub addr_near: PhysAddr,
    pub addr_far: PhysAddr,
    pub threshold: f64,
    pub samples_per_bit: usize,
    pub clock_hz: f64,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_bit == 0 {
            return Err(Error::config("samples_per_bit", "must be at least 1"));
        }
        if self.addr_near == self.addr_far {
            return Err(Error::config("addr_far", "must differ from addr_near"));
        }
        if self.clock_hz.is_nan() || self.clock_hz <= 0.0 {
            return Err(Error::config("clock_hz", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChannelStats {
    pub bits_sent: u64,
    pub bit_errors: u64,
    pub sim_cycles: u64,
    pub bandwidth_bps: f64,
    pub error_rate: f64,
    /// `confusion[sent][decoded]`.
    pub confusion: [[u64; 2]; 2],
}

impl ChannelStats {
    fn new(bits: &[bool], decoded: &[bool], sim_cycles: u64, clock_hz: f64) -> Self {
        let mut confusion = [[0u64; 2]; 2];
        for (&s, &d) in bits.iter().zip(decoded) {
            confusion[s as usize][d as usize] += 1;
        }
        let bits_sent = bits.len() as u64;
        let bit_errors = confusion[0][1] + confusion[1][0];
        Self {
            bits_sent,
            bit_errors,
            sim_cycles,
            bandwidth_bps: bits_sent as f64 * clock_hz / sim_cycles.max(1) as f64,
            error_rate: bit_errors as f64 / bits_sent.max(1) as f64,
            confusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelRun {
    pub stats: ChannelStats,
    pub received: Vec<u8>,
}

/// MSB-first bit stream of `payload`.
pub fn payload_bits(payload: &[u8]) -> Vec<bool> {
    payload
        .iter()
        .flat_map(|&b| (0..8).rev().map(move |k| (b >> k) & 1 == 1))
        .collect()
}

pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b)))
        .collect()
}

type Timestamps = Rc<RefCell<Vec<u64>>>;

struct Sender<'a> {
    bits: &'a [bool],
    cfg: ChannelConfig,
    receiver: usize,
    stamps: Timestamps,
    queue: Vec<Step>,
    bit: usize,
    started: bool,
    pending_sample: bool,
}

impl Sender<'_> {
    fn frame(&mut self) {
        let target = if self.bits[self.bit] {
            self.cfg.addr_near
        } else {
            self.cfg.addr_far
        };
        let mut q = vec![
            Step::Issue(Op::FlushL1(self.cfg.addr_near)),
            Step::Issue(Op::FlushL1(self.cfg.addr_far)),
        ];
        for _ in 0..self.cfg.samples_per_bit {
            q.push(Step::Issue(Op::Load(target)));
            q.push(Step::Issue(Op::FlushL1(target)));
        }
        q.push(Step::Issue(Op::Mark(self.bit as u32)));
        q.push(Step::WaitMark {
            agent: self.receiver,
            mark: self.bit as u32,
        });
        q.reverse();
        self.queue = q;
        self.stamps.borrow_mut().clear();
    }
}

impl Program for Sender<'_> {
    fn step(&mut self, view: &View<'_>) -> Step {
        if self.pending_sample {
            if let Some(r) = view.last.and_then(|o| o.result) {
                self.stamps.borrow_mut().push(r.latency);
            }
            self.pending_sample = false;
        }
        if self.queue.is_empty() {
            if self.started {
                self.bit += 1;
            }
            if self.bit >= self.bits.len() {
                return Step::Done;
            }
            self.started = true;
            self.frame();
        }
        let s = self.queue.pop().expect("framed");
        self.pending_sample = matches!(s, Step::Issue(Op::Load(_)));
        s
    }
}

struct Receiver {
    bits: usize,
    sender: usize,
    threshold: f64,
    stamps: Timestamps,
    decoded: Vec<bool>,
    phase: u8,
}

impl Program for Receiver {
    fn step(&mut self, _view: &View<'_>) -> Step {
        let bit = self.decoded.len();
        match self.phase {
            0 if bit == self.bits => Step::Done,
            0 => {
                self.phase = 1;
                Step::WaitMark {
                    agent: self.sender,
                    mark: bit as u32,
                }
            }
            1 => {
                let xs: Vec<f64> = self.stamps.borrow().iter().map(|&x| x as f64).collect();
                self.decoded.push(stats::median(&xs) < self.threshold);
                self.phase = 2;
                Step::Issue(Op::Compute(DECODE_CYCLES))
            }
            _ => {
                self.phase = 0;
                Step::Issue(Op::Mark(bit as u32 - 1))
            }
        }
    }
}

/// Sends `bits` from `sender` to `receiver`. `holder` keeps both addresses in
/// its LLC bank.
pub fn run_bits(
    machine: &mut SimMachine,
    bits: &[bool],
    cfg: &ChannelConfig,
    sender: TileId,
    receiver: TileId,
    holder: TileId,
) -> Result<(ChannelStats, Vec<bool>)> {
    cfg.validate()?;
    if bits.is_empty() {
        return Ok((ChannelStats::new(&[], &[], 0, cfg.clock_hz), Vec::new()));
    }
    hold_llc(machine, holder, &[cfg.addr_near, cfg.addr_far]);
    let stamps: Timestamps = Rc::default();
    let mut tx = Sender {
        bits,
        cfg: *cfg,
        receiver: 1,
        stamps: stamps.clone(),
        queue: Vec::new(),
        bit: 0,
        started: false,
        pending_sample: false,
    };
    let mut rx = Receiver {
        bits: bits.len(),
        sender: 0,
        threshold: cfg.threshold,
        stamps,
        decoded: Vec::with_capacity(bits.len()),
        phase: 0,
    };
    let run = {
        let mut agents = [Agent::new(sender, &mut tx), Agent::new(receiver, &mut rx)];
        run_scenario(machine, &mut agents, &RunOptions::default())?
    };
    let stats = ChannelStats::new(bits, &rx.decoded, run.makespan(), cfg.clock_hz);
    Ok((stats, rx.decoded))
}

pub fn run_channel(
    machine: &mut SimMachine,
    payload: &[u8],
    cfg: &ChannelConfig,
    sender: TileId,
    receiver: TileId,
    holder: TileId,
) -> Result<ChannelRun> {
    let bits = payload_bits(payload);
    let (stats, decoded) = run_bits(machine, &bits, cfg, sender, receiver, holder)?;
    Ok(ChannelRun {
        stats,
        received: bits_to_bytes(&decoded),
    })
}

/// Expected cycles for `bits` from noiseless access latencies: two reset
/// flushes, `samples_per_bit` load/flush pairs and the receiver's decode.
pub fn predicted_cycles(
    bits: &[bool],
    cfg: &ChannelConfig,
    lat_near: u64,
    lat_far: u64,
    lat_flush: u64,
) -> u64 {
    let spb = cfg.samples_per_bit as u64;
    bits.iter()
        .map(|&b| {
            let access = if b { lat_near } else { lat_far };
            2 * lat_flush + spb * (access + lat_flush) + DECODE_CYCLES
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub payload_bytes: usize,
    pub bandwidth_bps: f64,
    pub error_rate: f64,
}

/// Sends one random payload of each size.
pub fn payload_sweep(
    machine: &mut SimMachine,
    sizes: &[usize],
    cfg: &ChannelConfig,
    tiles: (TileId, TileId, TileId),
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| {
            let payload: Vec<u8> = (0..n).map(|_| rng.random()).collect();
            let run = run_channel(machine, &payload, cfg, tiles.0, tiles.1, tiles.2)?;
            Ok(SweepPoint {
                payload_bytes: n,
                bandwidth_bps: run.stats.bandwidth_bps,
                error_rate: run.stats.error_rate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_framing_round_trips() {
        let p = [0xa5, 0x01, 0xff];
        let bits = payload_bits(&p);
        assert_eq!(
            bits[..8],
            [true, false, true, false, false, true, false, true]
        );
        assert_eq!(bits_to_bytes(&bits), p);
    }

    #[test]
    fn capacity_accounting_is_exact() {
        let s = ChannelStats::new(&[true, false, true], &[true, true, true], 3000, 1.5e9);
        assert_eq!(s.bit_errors, 1);
        assert_eq!(s.confusion, [[0, 1], [0, 2]]);
        assert!((s.bandwidth_bps * 3000.0 / 1.5e9 - 3.0).abs() < 1e-9);
    }
}
