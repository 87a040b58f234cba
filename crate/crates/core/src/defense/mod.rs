//! Countermeasures: padding every LLC hit to a uniform latency, and the
//! network-saturation effect that buries distance under queueing delay.

pub mod noc;

use serde::{Deserialize, Serialize};

use crate::attack::{calibrate_threshold, run_toy_attack, ToyAttackResult, ToyRoles};
use crate::error::{Error, Result};
use crate::machine::{PacketDelays, PhysAddr, SimMachine};

pub use noc::{simulate, NocResult, NocTrafficConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    #[default]
    Off,
    DelayToWorst,
    DelayToTarget,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub mode: DefenseMode,
    /// Required for `DelayToTarget`.
    pub target_latency: Option<u64>,
}

impl DefenseConfig {
    pub fn delay_to_worst() -> Self {
        Self {
            mode: DefenseMode::DelayToWorst,
            target_latency: None,
        }
    }
}

/// Installs the padding floor on `machine` and returns it. Hit levels and
/// serving tiles are unaffected; only the reported latency is padded.
pub fn apply_defense(machine: &mut SimMachine, cfg: &DefenseConfig) -> Result<Option<u64>> {
    let worst = machine.worst_case_llc_latency();
    let floor = match cfg.mode {
        DefenseMode::Off => None,
        DefenseMode::DelayToWorst => Some(worst),
        DefenseMode::DelayToTarget => {
            let t = cfg
                .target_latency
                .ok_or_else(|| Error::config("target_latency", "required for delay_to_target"))?;
            if t < worst {
                log::warn!("defense target {t} is below the worst-case LLC hit {worst}; longer paths still leak");
            }
            Some(t)
        }
    };
    machine.set_llc_floor(floor);
    Ok(floor)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rate: f64,
    pub mean_latency: f64,
    pub saturated: bool,
}

/// One simulation per rate, all with the same random stream.
pub fn noc_saturation_sweep(base: &NocTrafficConfig, rates: &[f64]) -> Result<Vec<SweepPoint>> {
    if rates.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("rates", "must be sorted ascending"));
    }
    rates
        .iter()
        .map(|&rate| {
            let r = simulate(&NocTrafficConfig {
                injection_rate: rate,
                ..*base
            })?;
            Ok(SweepPoint {
                rate,
                mean_latency: r.mean_latency,
                saturated: r.saturated,
            })
        })
        .collect()
}

/// Queueing-delay distribution of the network at `rate`, for coupling into
/// the machine model.
pub fn background_delays(base: &NocTrafficConfig, rate: f64) -> Result<PacketDelays> {
    if rate == 0.0 {
        return Ok(PacketDelays::new(Vec::new()));
    }
    let r = simulate(&NocTrafficConfig {
        injection_rate: rate,
        ..*base
    })?;
    Ok(PacketDelays::new(r.queueing_delays))
}

/// The toy attack with every network message of an access delayed by a
/// queueing sample from background traffic at `rate`. The attacker keeps its
/// pair and recalibrates the threshold under load.
#[allow(clippy::too_many_arguments)]
pub fn attack_under_load(
    machine: &mut SimMachine,
    roles: &ToyRoles,
    near: PhysAddr,
    far: PhysAddr,
    noc: &NocTrafficConfig,
    rate: f64,
    bits: usize,
    seed: u64,
) -> Result<ToyAttackResult> {
    let delays = background_delays(noc, rate)?;
    machine.set_congestion(Some(delays));
    let threshold = calibrate_threshold(machine, roles, near, far, 200);
    let res = run_toy_attack(machine, roles, near, far, threshold, bits, seed);
    machine.set_congestion(None);
    res
}
