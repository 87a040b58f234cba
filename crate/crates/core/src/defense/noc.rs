//! Packet-level mesh network under uniform random traffic.
//!
//! Every router has four mesh output ports and one ejection port, each with a
//! FIFO queue. A port sends one packet at a time and stays busy for
//! `packet_flits` cycles per packet; the packet reaches the next router
//! `hop_cycles` after it starts. Routing is X then Y.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::MachineConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NocTrafficConfig {
    pub width: u16,
    pub height: u16,
    /// Packets per node per cycle.
    pub injection_rate: f64,
    /// End of the measurement window; injection continues while the
    /// network drains, for at most another `sim_cycles`.
    pub sim_cycles: u64,
    pub warmup_cycles: u64,
    pub hop_cycles: u64,
    /// Cycles a packet occupies each link it crosses.
    pub packet_flits: u64,
    pub seed: u64,
}

pub const DEFAULT_PACKET_FLITS: u64 = 5;
/// Accepted throughput below this share of the offered load counts as
/// saturation.
pub const SATURATION_ACCEPTANCE: f64 = 0.95;

impl Default for NocTrafficConfig {
    fn default() -> Self {
        Self::for_machine(&MachineConfig::default(), 0.01)
    }
}

impl NocTrafficConfig {
    pub fn for_machine(cfg: &MachineConfig, injection_rate: f64) -> Self {
        Self {
            width: cfg.mesh_width,
            height: cfg.mesh_height,
            injection_rate,
            sim_cycles: 10_000,
            warmup_cycles: 1_000,
            hop_cycles: cfg.hop_cost(),
            packet_flits: DEFAULT_PACKET_FLITS,
            seed: cfg.rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::config("width", "mesh needs at least 2x2 routers"));
        }
        if !(self.injection_rate >= 0.0 && self.injection_rate < 1.0) {
            return Err(Error::config(
                "injection_rate",
                format!("{} is outside [0, 1)", self.injection_rate),
            ));
        }
        if self.warmup_cycles >= self.sim_cycles {
            return Err(Error::config("warmup_cycles", "must be below sim_cycles"));
        }
        if self.hop_cycles == 0 || self.packet_flits == 0 {
            return Err(Error::config(
                "packet_flits",
                "hop_cycles and packet_flits must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NocResult {
    pub injection_rate: f64,
    /// Mean over packets created in the measurement window. Packets still in
    /// flight at the end contribute their age.
    pub mean_latency: f64,
    pub mean_hops: f64,
    /// `mean_hops · hop_cycles`: the latency without any queueing.
    pub zero_load_latency: f64,
    pub offered: u64,
    pub accepted: u64,
    pub undelivered: u64,
    pub saturated: bool,
    /// Per-packet queueing delay (latency minus hop time) of the measured
    /// packets.
    pub queueing_delays: Vec<u32>,
}

#[derive(Clone, Copy)]
struct Packet {
    dst: u32,
    created: u64,
    hops: u32,
    measured: bool,
    delivered: bool,
}

const EAST: usize = 0;
const WEST: usize = 1;
const SOUTH: usize = 2;
const NORTH: usize = 3;
const EJECT: usize = 4;
const PORTS: usize = 5;

struct Net {
    w: usize,
    queues: Vec<VecDeque<u32>>,
    busy_until: Vec<u64>,
}

impl Net {
    fn port_for(&self, at: usize, dst: usize) -> usize {
        let (x, y) = (at % self.w, at / self.w);
        let (dx, dy) = (dst % self.w, dst / self.w);
        if dx > x {
            EAST
        } else if dx < x {
            WEST
        } else if dy > y {
            SOUTH
        } else if dy < y {
            NORTH
        } else {
            EJECT
        }
    }

    fn neighbour(&self, at: usize, port: usize) -> usize {
        match port {
            EAST => at + 1,
            WEST => at - 1,
            SOUTH => at + self.w,
            NORTH => at - self.w,
            _ => at,
        }
    }
}

pub fn simulate(cfg: &NocTrafficConfig) -> Result<NocResult> {
    cfg.validate()?;
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let n = w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Net {
        w,
        queues: vec![VecDeque::new(); n * PORTS],
        busy_until: vec![0; n * PORTS],
    };
    let ring_len = cfg.hop_cycles as usize + 1;
    let mut ring: Vec<Vec<(u32, usize)>> = vec![Vec::new(); ring_len];
    let mut packets: Vec<Packet> = Vec::new();
    let mut latencies: Vec<(u64, u32)> = Vec::new();
    let (mut offered, mut accepted, mut pending) = (0u64, 0u64, 0u64);
    let window = cfg.warmup_cycles..cfg.sim_cycles;
    let cap = 2 * cfg.sim_cycles;

    let enqueue = |net: &mut Net, packets: &[Packet], pid: u32, at: usize| {
        let port = net.port_for(at, packets[pid as usize].dst as usize);
        net.queues[at * PORTS + port].push_back(pid);
    };

    let mut t = 0;
    while t < cap {
        for (pid, at) in std::mem::take(&mut ring[t as usize % ring_len]) {
            enqueue(&mut net, &packets, pid, at);
        }
        // Every node draws every cycle, so a higher rate injects a superset
        // of the packets of a lower one.
        for src in 0..n {
            let u: f64 = rng.random();
            let d = rng.random_range(0..n - 1);
            if u < cfg.injection_rate {
                let dst = if d >= src { d + 1 } else { d };
                let measured = window.contains(&t);
                if measured {
                    offered += 1;
                    pending += 1;
                }
                packets.push(Packet {
                    dst: dst as u32,
                    created: t,
                    hops: 0,
                    measured,
                    delivered: false,
                });
                enqueue(&mut net, &packets, (packets.len() - 1) as u32, src);
            }
        }
        for idx in 0..n * PORTS {
            if net.busy_until[idx] > t {
                continue;
            }
            let Some(pid) = net.queues[idx].pop_front() else {
                continue;
            };
            net.busy_until[idx] = t + cfg.packet_flits;
            let (at, port) = (idx / PORTS, idx % PORTS);
            if port == EJECT {
                packets[pid as usize].delivered = true;
                let p = packets[pid as usize];
                if window.contains(&t) {
                    accepted += 1;
                }
                if p.measured {
                    latencies.push((t - p.created, p.hops));
                    pending -= 1;
                }
            } else {
                packets[pid as usize].hops += 1;
                let next = net.neighbour(at, port);
                ring[(t + cfg.hop_cycles) as usize % ring_len].push((pid, next));
            }
        }
        t += 1;
        if t >= cfg.sim_cycles && pending == 0 {
            break;
        }
    }

    let mut total_hops = 0u64;
    let mut sum = 0u64;
    let mut queueing = Vec::with_capacity(offered as usize);
    for &(lat, hops) in &latencies {
        sum += lat;
        total_hops += hops as u64;
        queueing.push((lat - hops as u64 * cfg.hop_cycles) as u32);
    }
    // Packets still in flight count with their age so far.
    for p in packets.iter().filter(|p| p.measured && !p.delivered) {
        let age = t - p.created;
        sum += age;
        queueing.push(age.saturating_sub(p.hops as u64 * cfg.hop_cycles) as u32);
    }
    let mean_hops = total_hops as f64 / latencies.len().max(1) as f64;
    Ok(NocResult {
        injection_rate: cfg.injection_rate,
        mean_latency: sum as f64 / offered.max(1) as f64,
        mean_hops,
        zero_load_latency: mean_hops * cfg.hop_cycles as f64,
        offered,
        accepted,
        undelivered: pending,
        saturated: (accepted as f64) < SATURATION_ACCEPTANCE * offered as f64,
        queueing_delays: queueing,
    })
}
