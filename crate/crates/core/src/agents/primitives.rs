//! Access-state forcing: the attacker helpers that put the victim's table
//! lines into a known cache state before each trial.

use crate::error::{Error, Result};
use crate::machine::{LlcPlacement, PhysAddr, SimMachine, TileId};
use crate::victims::AesTables;

/// Loads all 64 lines of Td0–Td3 into `primer`'s L1 and makes sure no Td4
/// line stays there. Returns the cycles spent.
pub fn prime_l1_tables(
    machine: &mut SimMachine,
    primer: TileId,
    tables: &AesTables,
) -> Result<u64> {
    check_l1_fit(machine, tables)?;
    let mut cycles = 0;
    for line in tables.td_lines() {
        cycles += machine.load(primer, line).latency;
    }
    for line in tables.td4_lines() {
        machine.flush_l1(primer, line);
    }
    if let Some(miss) = tables
        .td_lines()
        .find(|&l| machine.l1_state(primer, l).is_none())
    {
        return Err(Error::config(
            "l1_ways",
            format!("table line {miss} does not stay L1-resident after priming"),
        ));
    }
    Ok(cycles)
}

/// The victim's L1 must hold Td0–Td3 plus the out line and four in-flight Td4
/// lines without any set overflowing.
fn check_l1_fit(machine: &SimMachine, tables: &AesTables) -> Result<()> {
    let cfg = machine.config();
    let need = 4096 + 5 * cfg.line_size;
    if cfg.l1_capacity_bytes() < need {
        return Err(Error::config(
            "l1_sets",
            format!(
                "L1 holds {} bytes; the primed working set needs {need}",
                cfg.l1_capacity_bytes()
            ),
        ));
    }
    let mut per_set = vec![0u32; cfg.l1_sets as usize];
    let lines = tables
        .td_lines()
        .chain(tables.td4_lines())
        .chain(std::iter::once(tables.out));
    for l in lines {
        let set = (l.line_number(cfg.line_size) % cfg.l1_sets as u64) as usize;
        per_set[set] += 1;
    }
    if let Some(set) = per_set.iter().position(|&n| n > cfg.l1_ways) {
        return Err(Error::config(
            "l1_ways",
            format!(
                "L1 set {set} needs {} ways for the table layout",
                per_set[set]
            ),
        ));
    }
    Ok(())
}

/// Makes `holder`'s LLC bank the forwarding tile of every line. Lines already
/// held there are only re-touched.
pub fn hold_llc(machine: &mut SimMachine, holder: TileId, lines: &[PhysAddr]) {
    let relocate = machine.config().llc_placement == LlcPlacement::FirstTouch;
    for &line in lines {
        if relocate && machine.llc_home(line) != Some(holder) {
            machine.clflush(line);
        }
        machine.load(holder, line);
    }
}

/// Pulls `lines` out of `victim`'s L1 by taking ownership from `attacker`'s
/// tile and writing the copy back clean. LLC residency is untouched.
pub fn evict_victim_l1(
    machine: &mut SimMachine,
    attacker: TileId,
    victim: TileId,
    lines: &[PhysAddr],
) {
    for &line in lines {
        if machine.llc_home(line).is_none() {
            log::warn!("evicting {line} which no LLC bank holds; the next access fills from DRAM");
            continue;
        }
        if machine.l1_state(victim, line).is_some() {
            machine.prefetchw_probe(attacker, line);
            machine.flush_l1(attacker, line);
        }
    }
}
