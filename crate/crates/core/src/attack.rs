//! The single-bit distance attack against the toy victim: profile from the
//! victim's tile, pick a near/far pair, then read secret bits by timing the
//! victim's access against one threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agents::{evict_victim_l1, hold_llc};
use crate::error::Result;
use crate::machine::{PhysAddr, SimMachine, TileId};
use crate::profiler::{
    classify_addresses, pick_attack_pair, profile_addresses, AddressClassMap, ClassifyParams,
};
use crate::stats;
use crate::victims::{toy_victim_run, ToyVictim};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ToyRoles {
    pub victim: TileId,
    /// Keeps the pair in its LLC bank and evicts the victim's L1 copy.
    pub helper: TileId,
}

impl ToyRoles {
    /// Victim in the corner, helper next to it.
    pub fn corner(machine: &SimMachine) -> Self {
        let mesh = machine.mesh();
        Self {
            victim: mesh.tile(0, 0),
            helper: mesh.tile(1, 0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToySetup {
    pub map: AddressClassMap,
    pub near: PhysAddr,
    pub far: PhysAddr,
    pub threshold: f64,
}

/// Profiles `pool_lines` consecutive lines from the victim's tile and picks
/// the attack pair.
pub fn profile_toy_pair(
    machine: &mut SimMachine,
    roles: &ToyRoles,
    pool_base: PhysAddr,
    pool_lines: u64,
    samples: usize,
) -> Result<ToySetup> {
    let line = machine.config().line_size;
    let pool: Vec<PhysAddr> = (0..pool_lines)
        .map(|i| pool_base.offset(i * line))
        .collect();
    let profile = profile_addresses(machine, roles.victim, roles.helper, &pool, samples)?;
    let map = classify_addresses(&profile, &ClassifyParams::default())?;
    let (near, far) = pick_attack_pair(&map)?;
    let threshold = map.threshold;
    Ok(ToySetup {
        map,
        near,
        far,
        threshold,
    })
}

/// Midpoint of the pair's mean latencies as measured now, from the victim's
/// tile. An attacker facing a changed machine re-derives its threshold this way.
pub fn calibrate_threshold(
    machine: &mut SimMachine,
    roles: &ToyRoles,
    near: PhysAddr,
    far: PhysAddr,
    samples: usize,
) -> f64 {
    hold_llc(machine, roles.helper, &[near, far]);
    let mut measure = |a: PhysAddr| {
        let xs: Vec<f64> = (0..samples)
            .map(|_| {
                machine.flush_l1(roles.victim, a);
                machine.load(roles.victim, a).latency as f64
            })
            .collect();
        stats::mean(&xs)
    };
    let (n, f) = (measure(near), measure(far));
    (n + f) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyAttackResult {
    pub bits: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub threshold: f64,
    /// Observed latencies of bit-1 (near) and bit-0 (far) accesses.
    pub near_latencies: Vec<u64>,
    pub far_latencies: Vec<u64>,
}

impl ToyAttackResult {
    pub fn mean_gap(&self) -> f64 {
        let f = |v: &[u64]| stats::mean(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
        f(&self.far_latencies) - f(&self.near_latencies)
    }
}

/// Reads `bits` random secret bits. Before each access the helper re-holds
/// the pair and evicts the victim's L1 copy; a latency below the threshold
/// reads as 1.
pub fn run_toy_attack(
    machine: &mut SimMachine,
    roles: &ToyRoles,
    near: PhysAddr,
    far: PhysAddr,
    threshold: f64,
    bits: usize,
    seed: u64,
) -> Result<ToyAttackResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0;
    let mut near_latencies = Vec::new();
    let mut far_latencies = Vec::new();
    for _ in 0..bits {
        let secret: u8 = rng.random();
        let v = ToyVictim {
            secret,
            addr_near: near,
            addr_far: far,
            bit_mask: 1,
        };
        hold_llc(machine, roles.helper, &[near, far]);
        evict_victim_l1(machine, roles.helper, roles.victim, &[near, far]);
        let lat = toy_victim_run(machine, roles.victim, &v, v.bit_mask).latency;
        let truth = secret & 1 == 1;
        if truth {
            near_latencies.push(lat);
        } else {
            far_latencies.push(lat);
        }
        if ((lat as f64) < threshold) == truth {
            correct += 1;
        }
    }
    Ok(ToyAttackResult {
        bits,
        correct,
        accuracy: correct as f64 / bits.max(1) as f64,
        threshold,
        near_latencies,
        far_latencies,
    })
}
