//! Execute-and-profile: per-address LLC-hit latency from one tile, and the
//! near/far split derived from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agents::hold_llc;
use crate::error::{Error, Result};
use crate::machine::{PhysAddr, SimMachine, TileId};
use crate::stats;

pub const DEFAULT_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddrStats {
    pub addr: PhysAddr,
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
    /// Ground truth from the simulator; never used by the classification.
    pub true_cha: TileId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub origin: TileId,
    pub samples: BTreeMap<PhysAddr, Vec<u64>>,
    /// Sorted by address.
    pub stats: Vec<AddrStats>,
    /// Addresses whose L1-miss/LLC-hit state could not be forced.
    pub excluded: Vec<PhysAddr>,
}

impl LatencyProfile {
    pub fn stats_of(&self, addr: PhysAddr) -> Option<&AddrStats> {
        self.stats
            .binary_search_by_key(&addr, |s| s.addr)
            .ok()
            .map(|i| &self.stats[i])
    }

    /// Row form for CSV output.
    pub fn rows(&self) -> Vec<ProfileRow> {
        self.stats
            .iter()
            .map(|s| ProfileRow {
                addr: s.addr.to_string(),
                mean_cycles: s.mean,
                stddev: s.stddev,
                count: s.count,
                true_cha_tile: s.true_cha.linear,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub addr: String,
    pub mean_cycles: f64,
    pub stddev: f64,
    pub count: usize,
    pub true_cha_tile: u16,
}

/// Measures each address `samples` times from `origin`. A helper on `helper`
/// first loads the addresses into its LLC bank; before every sample the
/// origin drops its own L1 copy so the load resolves in the LLC.
pub fn profile_addresses(
    machine: &mut SimMachine,
    origin: TileId,
    helper: TileId,
    addrs: &[PhysAddr],
    samples: usize,
) -> Result<LatencyProfile> {
    let line = machine.config().line_size;
    let mut lines: Vec<PhysAddr> = addrs.iter().map(|a| a.line_addr(line)).collect();
    lines.sort_unstable();
    lines.dedup();
    hold_llc(machine, helper, &lines);

    let mut collected: BTreeMap<PhysAddr, Vec<u64>> = lines
        .iter()
        .map(|&a| (a, Vec::with_capacity(samples)))
        .collect();
    let mut bad: Vec<PhysAddr> = Vec::new();
    for _ in 0..samples {
        for &a in &lines {
            machine.flush_l1(origin, a);
            let r = machine.load(origin, a);
            if r.hit_level.is_llc() {
                collected.get_mut(&a).expect("known line").push(r.latency);
            } else if !bad.contains(&a) {
                bad.push(a);
            }
        }
    }
    for a in &bad {
        collected.remove(a);
        log::warn!("profiling excluded {a}: access did not resolve as an LLC hit");
    }
    let stats = collected
        .iter()
        .map(|(&addr, v)| {
            let xs: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            AddrStats {
                addr,
                mean: stats::mean(&xs),
                stddev: stats::stddev(&xs),
                count: xs.len(),
                true_cha: machine.cha_of(addr),
            }
        })
        .collect();
    bad.sort_unstable();
    Ok(LatencyProfile {
        origin,
        samples: collected,
        stats,
        excluded: bad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyParams {
    pub quantile_low: f64,
    pub quantile_high: f64,
    /// Required difference between the far and near class means.
    pub min_gap: f64,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        Self {
            quantile_low: 0.25,
            quantile_high: 0.75,
            min_gap: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddressClassMap {
    pub va_near: Vec<PhysAddr>,
    pub va_far: Vec<PhysAddr>,
    pub threshold: f64,
    pub near_mean: f64,
    pub far_mean: f64,
    /// `(address, level)` ranking used for the split; equal levels mean the
    /// addresses are indistinguishable at the profile's precision.
    pub ranking: Vec<(PhysAddr, usize)>,
    pub means: BTreeMap<PhysAddr, f64>,
}

impl AddressClassMap {
    pub fn is_near(&self, a: PhysAddr) -> bool {
        self.va_near.binary_search(&a).is_ok()
    }

    pub fn is_far(&self, a: PhysAddr) -> bool {
        self.va_far.binary_search(&a).is_ok()
    }
}

/// Groups means into latency levels: consecutive sorted means closer than
/// the resolution share a level. The resolution is several standard errors,
/// so addresses with the same true latency land on one level for any seed.
fn levels(profile: &LatencyProfile) -> Vec<(PhysAddr, usize, f64)> {
    let mut v: Vec<&AddrStats> = profile.stats.iter().collect();
    v.sort_by(|a, b| a.mean.total_cmp(&b.mean).then(a.addr.cmp(&b.addr)));
    let se = v
        .iter()
        .map(|s| s.stddev / (s.count.max(1) as f64).sqrt())
        .fold(0.0, f64::max);
    let resolution = (6.0 * se).max(0.5);
    let mut out = Vec::with_capacity(v.len());
    let mut level = 0;
    for (i, s) in v.iter().enumerate() {
        if i > 0 && s.mean - v[i - 1].mean > resolution {
            level += 1;
        }
        out.push((s.addr, level, s.mean));
    }
    out.sort_by_key(|&(a, l, _)| (l, a));
    out
}

/// Splits the profile at the two quantiles. Addresses are ranked by latency
/// level, then by address, so the split is reproducible across seeds.
pub fn classify_addresses(
    profile: &LatencyProfile,
    params: &ClassifyParams,
) -> Result<AddressClassMap> {
    let n = profile.stats.len();
    if n < 2 {
        return Err(Error::Profile(format!(
            "need at least 2 profiled addresses, got {n}"
        )));
    }
    let ql = params.quantile_low;
    let qh = params.quantile_high;
    if !(0.0 < ql && ql <= qh && qh < 1.0) {
        return Err(Error::Profile(format!(
            "quantiles ({ql}, {qh}) out of order"
        )));
    }
    let ranked = levels(profile);
    let k_low = ((ql * n as f64).floor() as usize).max(1);
    let k_high = ((qh * n as f64).floor() as usize).min(n - 1).max(k_low);
    let near = &ranked[..k_low];
    let far = &ranked[k_high..];
    let near_max = near.iter().map(|x| x.2).fold(f64::MIN, f64::max);
    let far_min = far.iter().map(|x| x.2).fold(f64::MAX, f64::min);
    if ranked.last().expect("non-empty").1 == 0 {
        return Err(Error::Profile(
            "every address has the same latency level: near and far classes would be empty".into(),
        ));
    }
    let near_mean = stats::mean(&near.iter().map(|x| x.2).collect::<Vec<_>>());
    let far_mean = stats::mean(&far.iter().map(|x| x.2).collect::<Vec<_>>());
    if far_mean - near_mean < params.min_gap {
        return Err(Error::Profile(format!(
            "class gap {:.1} cycles is below the required {}",
            far_mean - near_mean,
            params.min_gap
        )));
    }
    let mut va_near: Vec<PhysAddr> = near.iter().map(|x| x.0).collect();
    let mut va_far: Vec<PhysAddr> = far.iter().map(|x| x.0).collect();
    va_near.sort_unstable();
    va_far.sort_unstable();
    Ok(AddressClassMap {
        va_near,
        va_far,
        threshold: (near_max + far_min) / 2.0,
        near_mean,
        far_mean,
        ranking: ranked.iter().map(|&(a, l, _)| (a, l)).collect(),
        means: ranked.iter().map(|&(a, _, m)| (a, m)).collect(),
    })
}

/// The fastest near address and the slowest far address. Equal latency
/// levels fall back to the lowest address.
pub fn pick_attack_pair(map: &AddressClassMap) -> Result<(PhysAddr, PhysAddr)> {
    let level: BTreeMap<PhysAddr, usize> = map.ranking.iter().copied().collect();
    let near = map
        .va_near
        .iter()
        .min_by_key(|a| (level[a], **a))
        .ok_or_else(|| Error::Profile("empty near class".into()))?;
    let far_level = map.va_far.iter().map(|a| level[a]).max();
    let far = map
        .va_far
        .iter()
        .filter(|a| Some(level[a]) == far_level)
        .min()
        .ok_or_else(|| Error::Profile("empty far class".into()))?;
    Ok((*near, *far))
}
