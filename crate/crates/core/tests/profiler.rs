use nuca_core::machine::{hop_distance, MachineConfig, PhysAddr, SimMachine, TileId};
use nuca_core::profiler::{
    classify_addresses, pick_attack_pair, profile_addresses, ClassifyParams,
};

const ORIGIN: TileId = TileId {
    x: 0,
    y: 0,
    linear: 0,
};
const HELPER: TileId = TileId {
    x: 1,
    y: 0,
    linear: 1,
};
const BASE: u64 = 0x80_0000;

fn lines(n: u64) -> Vec<PhysAddr> {
    (0..n).map(|i| PhysAddr(BASE + i * 64)).collect()
}

/// Remote LLC hit with the forwarder one hop away: l1 + cha + bank + (2h + 2)·hop_cost.
fn oracle_mean(cfg: &MachineConfig, h: u64) -> f64 {
    (cfg.lat_l1_hit + cfg.lat_cha_lookup + cfg.lat_llc_bank + (2 * h + 2) * cfg.hop_cost()) as f64
}

fn machine(seed: u64) -> SimMachine {
    let cfg = MachineConfig {
        rng_seed: seed,
        ..MachineConfig::default()
    };
    SimMachine::new(cfg).unwrap()
}

#[test]
fn means_follow_cha_distance() {
    let mut m = machine(1);
    let cfg = m.config().clone();
    let p = profile_addresses(&mut m, ORIGIN, HELPER, &lines(64), 1000).unwrap();
    assert!(p.excluded.is_empty());
    assert_eq!(p.stats.len(), 64);
    for s in &p.stats {
        let h = hop_distance(ORIGIN, s.true_cha);
        assert_eq!(s.count, 1000);
        assert!(
            (s.mean - oracle_mean(&cfg, h)).abs() < 0.5,
            "{} mean {} hop {h}",
            s.addr,
            s.mean
        );
        assert!(
            s.stddev <= cfg.noise_stddev * 1.2,
            "{} stddev {}",
            s.addr,
            s.stddev
        );
        assert!(p.samples[&s.addr].len() == 1000);
    }
}

#[test]
fn quartile_split_matches_hop_truth() {
    let mut m = machine(2);
    let p = profile_addresses(&mut m, ORIGIN, HELPER, &lines(64), 1000).unwrap();
    let map = classify_addresses(&p, &ClassifyParams::default()).unwrap();
    assert_eq!(map.va_near.len(), 16);
    assert_eq!(map.va_far.len(), 16);
    assert!(map.va_near.iter().all(|a| !map.is_far(*a)));
    let hop = |a: &PhysAddr| hop_distance(ORIGIN, m.cha_of(*a));
    let near_max = map.va_near.iter().map(hop).max().unwrap();
    let far_min = map.va_far.iter().map(hop).min().unwrap();
    assert!(
        far_min > near_max,
        "far min hop {far_min} vs near max {near_max}"
    );
    assert!(map.far_mean - map.near_mean >= 20.0);
    assert!(map.threshold > map.near_mean && map.threshold < map.far_mean);
}

#[test]
fn median_split_agrees_with_hop_ranking() {
    let mut m = machine(3);
    let addrs = lines(64);
    let p = profile_addresses(&mut m, ORIGIN, HELPER, &addrs, 1000).unwrap();
    let params = ClassifyParams {
        quantile_low: 0.5,
        quantile_high: 0.5,
        min_gap: 0.0,
    };
    let map = classify_addresses(&p, &params).unwrap();
    let mut truth: Vec<(u64, PhysAddr)> = addrs
        .iter()
        .map(|&a| (hop_distance(ORIGIN, m.cha_of(a)), a))
        .collect();
    truth.sort_unstable();
    let agree = truth[..32].iter().filter(|(_, a)| map.is_near(*a)).count()
        + truth[32..].iter().filter(|(_, a)| map.is_far(*a)).count();
    assert!(agree as f64 / 64.0 >= 0.95, "agreement {agree}/64");
}

#[test]
fn attack_pair_has_extreme_means() {
    let mut m = machine(4);
    let p = profile_addresses(&mut m, ORIGIN, HELPER, &lines(64), 1000).unwrap();
    let map = classify_addresses(&p, &ClassifyParams::default()).unwrap();
    let (near, far) = pick_attack_pair(&map).unwrap();
    let mean = |a| p.stats_of(a).unwrap().mean;
    let lo = p.stats.iter().map(|s| s.mean).fold(f64::MAX, f64::min);
    let hi = p.stats.iter().map(|s| s.mean).fold(f64::MIN, f64::max);
    assert!(mean(far) - mean(near) >= 50.0);
    assert!((mean(near) - lo).abs() < 0.5);
    assert!((mean(far) - hi).abs() < 0.5);
}

#[test]
fn cha_adjacent_origin_sees_global_minimum() {
    let mut m = machine(5);
    let addrs = lines(64);
    let target = addrs[17];
    let origin = m.cha_of(target);
    let mesh = m.mesh();
    let helper = mesh
        .all_tiles()
        .find(|t| hop_distance(*t, origin) == 1)
        .unwrap();
    let p = profile_addresses(&mut m, origin, helper, &addrs, 200).unwrap();
    let min = p.stats.iter().map(|s| s.mean).fold(f64::MAX, f64::min);
    let t = p.stats_of(target).unwrap().mean;
    assert!((t - min).abs() < 0.5, "target {t} vs min {min}");
}

#[test]
fn class_map_is_seed_stable() {
    let maps: Vec<_> = (10..13)
        .map(|seed| {
            let mut m = machine(seed);
            let p = profile_addresses(&mut m, ORIGIN, HELPER, &lines(64), 1000).unwrap();
            let map = classify_addresses(&p, &ClassifyParams::default()).unwrap();
            (map.va_near, map.va_far, map.ranking)
        })
        .collect();
    assert!(maps.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn degenerate_profiles_are_errors() {
    let mut m = machine(6);
    let p = profile_addresses(&mut m, ORIGIN, HELPER, &lines(1), 100).unwrap();
    assert!(classify_addresses(&p, &ClassifyParams::default()).is_err());

    // Lines whose CHA shares one hop distance from the origin form a single level.
    let same: Vec<PhysAddr> = lines(512)
        .into_iter()
        .filter(|a| hop_distance(ORIGIN, m.cha_of(*a)) == 7)
        .take(8)
        .collect();
    assert_eq!(same.len(), 8);
    let p = profile_addresses(&mut m, ORIGIN, HELPER, &same, 500).unwrap();
    assert!(classify_addresses(&p, &ClassifyParams::default()).is_err());

    let bad = ClassifyParams {
        quantile_low: 0.8,
        quantile_high: 0.2,
        min_gap: 0.0,
    };
    let p = profile_addresses(&mut m, ORIGIN, HELPER, &lines(8), 10).unwrap();
    assert!(classify_addresses(&p, &bad).is_err());
}

#[test]
fn profile_rows_carry_oracle_column() {
    let mut m = machine(7);
    let addrs = lines(4);
    let p = profile_addresses(&mut m, ORIGIN, HELPER, &addrs, 10).unwrap();
    assert!(p.excluded.is_empty());
    let rows = p.rows();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].true_cha_tile, m.cha_of(addrs[0]).linear);
}
