//! Named scenarios, their data artifacts, and the acceptance criteria that
//! judge them.
//!
//! Every scenario takes a machine configuration and a seed. The seed replaces
//! the machine's `rng_seed` and derives every other random stream, so one
//! `(config, params, seed)` triple fixes every artifact byte.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{evict_victim_l1, hold_llc};
use crate::attack::{calibrate_threshold, profile_toy_pair, run_toy_attack, ToyRoles};
use crate::classifier::{vote, Label, StumpEnsemble, DEFAULT_ROUNDS, DEFAULT_TRAINING_SAMPLES};
use crate::covert::{
    predicted_cycles, run_bits, ChannelConfig, ChannelStats, DEFAULT_SAMPLES_PER_BIT,
};
use crate::defense::{
    apply_defense, attack_under_load, noc_saturation_sweep, DefenseConfig, NocTrafficConfig,
};
use crate::error::{Error, Result};
use crate::io::{csv_artifact, json_artifact, Artifact};
use crate::keyrec::{
    accuracy_curve, build_low_index_set, collect_training, find_leaky_placement,
    low_plaintext_uniformity, prepare_attack, recover_key_word, run_trial, train_model, AesRig,
    AesRoles, KeyRun, PlacementSearch, RecoveryParams, UniformityTest, DEFAULT_GRID,
    DEFAULT_READINGS,
};
use crate::machine::{bank_of, hop_distance, MachineConfig, PhysAddr, SimMachine, TileId};
use crate::profiler::{classify_addresses, pick_attack_pair, profile_addresses, ClassifyParams};
use crate::stats::{ks_statistic, mean};
use crate::victims::{
    aes_decrypt, decrypt_block, encrypt_block, AesKeySchedule, AesTables, DecryptIo,
};

pub const DEFAULT_SEED: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Profile,
    ToyAttack,
    AesAttack,
    Covert,
    Defense,
    NocSweep,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Profile,
        Scenario::ToyAttack,
        Scenario::AesAttack,
        Scenario::Covert,
        Scenario::Defense,
        Scenario::NocSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Profile => "profile",
            Scenario::ToyAttack => "toy-attack",
            Scenario::AesAttack => "aes-attack",
            Scenario::Covert => "covert",
            Scenario::Defense => "defense",
            Scenario::NocSweep => "noc-sweep",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Independent stream for one consumer of a scenario seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn machine_for(cfg: &MachineConfig, seed: u64) -> Result<SimMachine> {
    SimMachine::new(MachineConfig {
        rng_seed: seed,
        ..cfg.clone()
    })
}

fn hex_key(bytes: &[u8]) -> String {
    hex::encode(bytes)
}

// ---------------------------------------------------------------- profile

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileParams {
    pub pool_base: PhysAddr,
    pub pool_lines: u64,
    pub samples: usize,
}

impl Default for ProfileParams {
    fn default() -> Self {
        Self {
            pool_base: PhysAddr(0x80_0000),
            pool_lines: 64,
            samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRecord {
    pub addr: String,
    pub mean_cycles: f64,
    pub stddev: f64,
    pub true_cha_tile: u16,
    pub hops_to_cha: u64,
    pub class: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    pub origin: TileId,
    pub threshold: f64,
    pub near_mean: f64,
    pub far_mean: f64,
    pub near: String,
    pub far: String,
    pub rows: Vec<ProfileRecord>,
}

impl ProfileReport {
    pub fn artifacts(&self) -> Result<Vec<Artifact>> {
        #[derive(Serialize)]
        struct Summary<'a> {
            origin: TileId,
            threshold: f64,
            near_mean: f64,
            far_mean: f64,
            near: &'a str,
            far: &'a str,
        }
        Ok(vec![
            csv_artifact("profile.csv", &self.rows)?,
            json_artifact(
                "profile.json",
                &Summary {
                    origin: self.origin,
                    threshold: self.threshold,
                    near_mean: self.near_mean,
                    far_mean: self.far_mean,
                    near: &self.near,
                    far: &self.far,
                },
            )?,
        ])
    }
}

pub fn run_profile(cfg: &MachineConfig, p: &ProfileParams, seed: u64) -> Result<ProfileReport> {
    let mut m = machine_for(cfg, seed)?;
    let roles = ToyRoles::corner(&m);
    let line = cfg.line_size;
    let pool: Vec<PhysAddr> = (0..p.pool_lines)
        .map(|i| p.pool_base.offset(i * line))
        .collect();
    let profile = profile_addresses(&mut m, roles.victim, roles.helper, &pool, p.samples)?;
    let map = classify_addresses(&profile, &ClassifyParams::default())?;
    let (near, far) = pick_attack_pair(&map)?;
    let rows = profile
        .stats
        .iter()
        .map(|s| {
            let class = if map.is_near(s.addr) {
                "near"
            } else if map.is_far(s.addr) {
                "far"
            } else {
                "middle"
            };
            ProfileRecord {
                addr: s.addr.to_string(),
                mean_cycles: s.mean,
                stddev: s.stddev,
                true_cha_tile: s.true_cha.linear,
                hops_to_cha: hop_distance(roles.victim, s.true_cha),
                class,
            }
        })
        .collect();
    Ok(ProfileReport {
        origin: roles.victim,
        threshold: map.threshold,
        near_mean: map.near_mean,
        far_mean: map.far_mean,
        near: near.to_string(),
        far: far.to_string(),
        rows,
    })
}

// ------------------------------------------------------------- toy attack

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyAttackParams {
    pub profile: ProfileParams,
    pub bits: usize,
}

impl Default for ToyAttackParams {
    fn default() -> Self {
        Self {
            profile: ProfileParams::default(),
            bits: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramRow {
    pub latency: u64,
    pub near: u64,
    pub far: u64,
}

fn histogram(near: &[u64], far: &[u64]) -> Vec<HistogramRow> {
    let mut h = std::collections::BTreeMap::<u64, (u64, u64)>::new();
    for &l in near {
        h.entry(l).or_default().0 += 1;
    }
    for &l in far {
        h.entry(l).or_default().1 += 1;
    }
    h.into_iter()
        .map(|(latency, (near, far))| HistogramRow { latency, near, far })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyAttackReport {
    pub near: String,
    pub far: String,
    pub bits: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub near_mean: f64,
    pub far_mean: f64,
    pub mean_gap: f64,
    #[serde(skip)]
    pub histogram: Vec<HistogramRow>,
}

impl ToyAttackReport {
    pub fn artifacts(&self) -> Result<Vec<Artifact>> {
        Ok(vec![
            json_artifact("toy_attack.json", self)?,
            csv_artifact("toy_latency_histogram.csv", &self.histogram)?,
        ])
    }
}

fn mean_u64(v: &[u64]) -> f64 {
    mean(&v.iter().map(|&x| x as f64).collect::<Vec<_>>())
}

pub fn run_toy(cfg: &MachineConfig, p: &ToyAttackParams, seed: u64) -> Result<ToyAttackReport> {
    let mut m = machine_for(cfg, seed)?;
    let roles = ToyRoles::corner(&m);
    let setup = profile_toy_pair(
        &mut m,
        &roles,
        p.profile.pool_base,
        p.profile.pool_lines,
        p.profile.samples,
    )?;
    let r = run_toy_attack(
        &mut m,
        &roles,
        setup.near,
        setup.far,
        setup.threshold,
        p.bits,
        sub_seed(seed, 1),
    )?;
    Ok(ToyAttackReport {
        near: setup.near.to_string(),
        far: setup.far.to_string(),
        bits: r.bits,
        threshold: r.threshold,
        accuracy: r.accuracy,
        near_mean: mean_u64(&r.near_latencies),
        far_mean: mean_u64(&r.far_latencies),
        mean_gap: r.mean_gap(),
        histogram: histogram(&r.near_latencies, &r.far_latencies),
    })
}

// ------------------------------------------------------------- AES attack

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AesAttackParams {
    pub keys: usize,
    /// Trial counts at which recovery is scored; the last is the budget.
    pub grid: Vec<u64>,
    pub readings: usize,
    pub training_samples: usize,
    pub rounds: usize,
    pub heldout_trials: usize,
    /// Vote sizes scored on the held-out trials; each is a prefix of one
    /// trial's readings.
    pub vote_sizes: Vec<usize>,
    pub placement_samples: usize,
}

impl Default for AesAttackParams {
    fn default() -> Self {
        Self {
            keys: 20,
            grid: DEFAULT_GRID.to_vec(),
            readings: DEFAULT_READINGS,
            training_samples: DEFAULT_TRAINING_SAMPLES,
            rounds: DEFAULT_ROUNDS,
            heldout_trials: 10_000,
            vote_sizes: vec![1, 3, 5, 9, 15, 21, 31, 40],
            placement_samples: 1000,
        }
    }
}

impl AesAttackParams {
    fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("grid", "must be a non-empty ascending list"));
        }
        if self.readings == 0 {
            return Err(Error::config("readings", "must be at least 1"));
        }
        if self.vote_sizes.iter().any(|&n| n == 0 || n > self.readings) {
            return Err(Error::config(
                "vote_sizes",
                "each size must lie in 1..=readings",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VotingPoint {
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub trials: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyRow {
    pub key: String,
    pub truth: String,
    pub recovered: String,
    pub correct: bool,
    pub trials_low: u64,
    pub discarded: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AesAttackReport {
    pub td4_base: String,
    pub near_lines: Vec<usize>,
    pub low_set_size: usize,
    pub training_samples: usize,
    pub voting: Vec<VotingPoint>,
    pub curve: Vec<CurvePoint>,
    pub keys: Vec<KeyRow>,
    pub uniformity: UniformityTest,
    #[serde(skip)]
    pub model: StumpEnsemble,
}

impl AesAttackReport {
    pub fn artifacts(&self) -> Result<Vec<Artifact>> {
        Ok(vec![
            json_artifact("aes_attack.json", self)?,
            csv_artifact("aes_accuracy.csv", &self.curve)?,
            csv_artifact("aes_voting.csv", &self.voting)?,
            csv_artifact("aes_keys.csv", &self.keys)?,
            Artifact {
                name: "aes_model.json".into(),
                bytes: format!("{}\n", self.model.to_json()?).into_bytes(),
            },
        ])
    }

    pub fn accuracy_at(&self, trials: u64) -> Option<f64> {
        self.curve
            .iter()
            .find(|c| c.trials == trials)
            .map(|c| c.accuracy)
    }
}

fn key_rows(runs: &[KeyRun]) -> Vec<KeyRow> {
    runs.iter()
        .map(|r| {
            let est = r.snapshots.last().map(|s| s.1);
            KeyRow {
                key: hex_key(&r.key),
                truth: format!("{:08x}", r.truth),
                recovered: est
                    .and_then(|e| e.word())
                    .map_or_else(|| "undetermined".into(), |w| format!("{w:08x}")),
                correct: est.and_then(|e| e.word()) == Some(r.truth),
                trials_low: r.trials_low,
                discarded: r.discarded,
            }
        })
        .collect()
}

fn run_keys(
    rig: &mut AesRig,
    model: &StumpEnsemble,
    low: &crate::keyrec::LowIndexSet,
    p: &AesAttackParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<KeyRun>> {
    let params = RecoveryParams {
        readings: p.readings,
        grid: p.grid.clone(),
    };
    (0..p.keys)
        .map(|_| {
            let key: [u8; 16] = rng.random();
            recover_key_word(rig, key, model, low, &params, rng)
        })
        .collect()
}

fn curve_points(runs: &[KeyRun], grid: &[u64]) -> Vec<CurvePoint> {
    accuracy_curve(runs, grid)
        .into_iter()
        .map(|(trials, accuracy)| CurvePoint { trials, accuracy })
        .collect()
}

pub fn run_aes(cfg: &MachineConfig, p: &AesAttackParams, seed: u64) -> Result<AesAttackReport> {
    p.validate()?;
    let m = machine_for(cfg, seed)?;
    let roles = AesRoles::centered(&m);
    let search = PlacementSearch {
        samples: p.placement_samples,
        ..PlacementSearch::default()
    };
    let (mut rig, setup) = prepare_attack(
        m,
        &roles,
        &search,
        p.training_samples,
        p.rounds,
        sub_seed(seed, 1),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 2));
    let mut correct = vec![0u64; p.vote_sizes.len()];
    for _ in 0..p.heldout_trials {
        let key = AesKeySchedule::new(rng.random());
        let t = run_trial(
            &mut rig,
            &key,
            &setup.model,
            &setup.low,
            p.readings,
            &mut rng,
        )?;
        let xs: Vec<f64> = t.readings.iter().map(|&r| r as f64).collect();
        for (k, &n) in p.vote_sizes.iter().enumerate() {
            if xs.is_empty() {
                continue;
            }
            let verdict = vote(&setup.model, &xs[..n.min(xs.len())])?;
            if (verdict == Label::Low) == t.truth_low {
                correct[k] += 1;
            }
        }
    }
    let voting = p
        .vote_sizes
        .iter()
        .zip(&correct)
        .map(|(&samples, &c)| VotingPoint {
            samples,
            accuracy: c as f64 / p.heldout_trials.max(1) as f64,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));
    let runs = run_keys(&mut rig, &setup.model, &setup.low, p, &mut rng)?;
    Ok(AesAttackReport {
        td4_base: setup.placement.tables.td4_base.to_string(),
        near_lines: setup.low.near_lines.clone(),
        low_set_size: setup.low.len(),
        training_samples: setup.training.len(),
        voting,
        curve: curve_points(&runs, &p.grid),
        keys: key_rows(&runs),
        uniformity: low_plaintext_uniformity(&runs),
        model: setup.model,
    })
}

// ---------------------------------------------------------------- covert

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovertParams {
    pub profile: ProfileParams,
    pub bits: usize,
    pub samples_per_bit: usize,
}

impl Default for CovertParams {
    fn default() -> Self {
        Self {
            profile: ProfileParams::default(),
            bits: 100_000,
            samples_per_bit: DEFAULT_SAMPLES_PER_BIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovertReport {
    pub channel: ChannelConfig,
    pub stats: ChannelStats,
    /// `clock_hz` over the cycles per bit of the noiseless schedule.
    pub predicted_bandwidth_bps: f64,
    pub bandwidth_relative_error: f64,
}

impl CovertReport {
    pub fn artifacts(&self) -> Result<Vec<Artifact>> {
        Ok(vec![json_artifact("covert.json", self)?])
    }
}

pub fn run_covert(cfg: &MachineConfig, p: &CovertParams, seed: u64) -> Result<CovertReport> {
    let mut m = machine_for(cfg, seed)?;
    let roles = ToyRoles::corner(&m);
    let setup = profile_toy_pair(
        &mut m,
        &roles,
        p.profile.pool_base,
        p.profile.pool_lines,
        p.profile.samples,
    )?;
    let mut m = machine_for(cfg, sub_seed(seed, 1))?;
    let channel = ChannelConfig {
        addr_near: setup.near,
        addr_far: setup.far,
        threshold: setup.threshold,
        samples_per_bit: p.samples_per_bit,
        clock_hz: cfg.clock_hz,
    };
    let (tx, rx, holder) = (roles.victim, m.mesh().tile(0, 1), roles.helper);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 2));
    let bits: Vec<bool> = (0..p.bits).map(|_| rng.random()).collect();
    let (stats, _) = run_bits(&mut m, &bits, &channel, tx, rx, holder)?;
    let near = m.remote_hit_base(tx, m.cha_of(setup.near), holder);
    let far = m.remote_hit_base(tx, m.cha_of(setup.far), holder);
    let cycles = predicted_cycles(&bits, &channel, near, far, cfg.lat_l1_hit);
    let predicted = bits.len() as f64 * cfg.clock_hz / cycles.max(1) as f64;
    Ok(CovertReport {
        channel,
        stats,
        predicted_bandwidth_bps: predicted,
        bandwidth_relative_error: (stats.bandwidth_bps / predicted - 1.0).abs(),
    })
}

// --------------------------------------------------------------- defense

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseParams {
    pub defense: DefenseConfig,
    pub profile: ProfileParams,
    /// Latency samples per address for the distribution comparison.
    pub samples: usize,
    pub toy_bits: usize,
    /// Key recovery against the defended machine; `keys = 0` skips it.
    pub aes: AesAttackParams,
    /// Background-traffic rates for the congested toy attack.
    pub load_rates: Vec<f64>,
    pub load_bits: usize,
}

impl Default for DefenseParams {
    fn default() -> Self {
        Self {
            defense: DefenseConfig::delay_to_worst(),
            profile: ProfileParams::default(),
            samples: 10_000,
            toy_bits: 10_000,
            aes: AesAttackParams {
                heldout_trials: 0,
                vote_sizes: Vec::new(),
                ..AesAttackParams::default()
            },
            load_rates: vec![0.0, 0.05, 0.1, 0.15],
            load_bits: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LoadPoint {
    pub rate: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DefenseReport {
    pub floor: Option<u64>,
    pub ks_before: f64,
    pub ks_after: f64,
    pub toy_accuracy_before: f64,
    pub toy_accuracy_after: f64,
    pub mean_latency_before: f64,
    pub mean_latency_after: f64,
    pub keys_attempted: usize,
    pub keys_recovered: usize,
    pub curve: Vec<CurvePoint>,
    pub uniformity: Option<UniformityTest>,
    pub load: Vec<LoadPoint>,
}

impl DefenseReport {
    pub fn artifacts(&self) -> Result<Vec<Artifact>> {
        Ok(vec![
            json_artifact("defense.json", self)?,
            csv_artifact("defense_load.csv", &self.load)?,
        ])
    }
}

/// `n` LLC-hit latencies of `addr` from the victim's tile.
fn sample_latencies(m: &mut SimMachine, roles: &ToyRoles, addr: PhysAddr, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            hold_llc(m, roles.helper, &[addr]);
            evict_victim_l1(m, roles.helper, roles.victim, &[addr]);
            m.load(roles.victim, addr).latency as f64
        })
        .collect()
}

/// The strongest attacker: placement and low set learned before the defense
/// was switched on, classifier retrained on defended readings.
fn defended_key_recovery(
    cfg: &MachineConfig,
    d: &DefenseConfig,
    p: &AesAttackParams,
    seed: u64,
) -> Result<Vec<KeyRun>> {
    p.validate()?;
    let mut m = machine_for(cfg, seed)?;
    let roles = AesRoles::centered(&m);
    let search = PlacementSearch {
        samples: p.placement_samples,
        ..PlacementSearch::default()
    };
    let placement = find_leaky_placement(&mut m, &roles, &search)?;
    let low = build_low_index_set(&placement.map, &placement.tables)?;
    apply_defense(&mut m, d)?;
    let mut rig = AesRig::new(m, placement.tables, roles)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let training = collect_training(&mut rig, &low, p.training_samples, &mut rng)?;
    let model = train_model(&training, p.rounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));
    run_keys(&mut rig, &model, &low, p, &mut rng)
}

pub fn run_defense(cfg: &MachineConfig, p: &DefenseParams, seed: u64) -> Result<DefenseReport> {
    let mut m = machine_for(cfg, seed)?;
    let roles = ToyRoles::corner(&m);
    let setup = profile_toy_pair(
        &mut m,
        &roles,
        p.profile.pool_base,
        p.profile.pool_lines,
        p.profile.samples,
    )?;
    let (near, far) = (setup.near, setup.far);

    let nb = sample_latencies(&mut m, &roles, near, p.samples);
    let fb = sample_latencies(&mut m, &roles, far, p.samples);
    let before = run_toy_attack(
        &mut m,
        &roles,
        near,
        far,
        setup.threshold,
        p.toy_bits,
        sub_seed(seed, 1),
    )?;

    let floor = apply_defense(&mut m, &p.defense)?;
    let na = sample_latencies(&mut m, &roles, near, p.samples);
    let fa = sample_latencies(&mut m, &roles, far, p.samples);
    let threshold = calibrate_threshold(&mut m, &roles, near, far, 200);
    let after = run_toy_attack(
        &mut m,
        &roles,
        near,
        far,
        threshold,
        p.toy_bits,
        sub_seed(seed, 1),
    )?;

    let (runs, uniformity) = if p.aes.keys > 0 {
        let runs = defended_key_recovery(cfg, &p.defense, &p.aes, sub_seed(seed, 2))?;
        let u = low_plaintext_uniformity(&runs);
        (runs, Some(u))
    } else {
        (Vec::new(), None)
    };
    let last = p.aes.grid.last().copied().unwrap_or(0);

    let noc = NocTrafficConfig {
        seed: sub_seed(seed, 4),
        ..NocTrafficConfig::for_machine(cfg, 0.0)
    };
    let load = p
        .load_rates
        .iter()
        .map(|&rate| {
            let mut m = machine_for(cfg, sub_seed(seed, 5))?;
            let r = attack_under_load(
                &mut m,
                &roles,
                near,
                far,
                &noc,
                rate,
                p.load_bits,
                sub_seed(seed, 6),
            )?;
            Ok(LoadPoint {
                rate,
                accuracy: r.accuracy,
            })
        })
        .collect::<Result<_>>()?;

    let all = |a: &[f64], b: &[f64]| mean(&[a, b].concat());
    Ok(DefenseReport {
        floor,
        ks_before: ks_statistic(&nb, &fb),
        ks_after: ks_statistic(&na, &fa),
        toy_accuracy_before: before.accuracy,
        toy_accuracy_after: after.accuracy,
        mean_latency_before: all(&nb, &fb),
        mean_latency_after: all(&na, &fa),
        keys_attempted: runs.len(),
        keys_recovered: runs.iter().filter(|r| r.correct_at(last)).count(),
        curve: curve_points(&runs, &p.aes.grid),
        uniformity,
        load,
    })
}

// ------------------------------------------------------------- NoC sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NocSweepParams {
    pub rates: Vec<f64>,
    pub sim_cycles: u64,
    pub warmup_cycles: u64,
    pub packet_flits: u64,
}

impl Default for NocSweepParams {
    fn default() -> Self {
        let base = NocTrafficConfig::default();
        Self {
            rates: (1..=20).map(|i| i as f64 / 100.0).collect(),
            sim_cycles: base.sim_cycles,
            warmup_cycles: base.warmup_cycles,
            packet_flits: base.packet_flits,
        }
    }
}

pub type NocSweepReport = Vec<crate::defense::SweepPoint>;

pub fn noc_sweep_artifacts(r: &NocSweepReport) -> Result<Vec<Artifact>> {
    Ok(vec![csv_artifact("noc_sweep.csv", r)?])
}

pub fn run_noc_sweep(cfg: &MachineConfig, p: &NocSweepParams, seed: u64) -> Result<NocSweepReport> {
    let base = NocTrafficConfig {
        sim_cycles: p.sim_cycles,
        warmup_cycles: p.warmup_cycles,
        packet_flits: p.packet_flits,
        seed,
        ..NocTrafficConfig::for_machine(cfg, 0.0)
    };
    noc_saturation_sweep(&base, &p.rates)
}

// ------------------------------------------------------- scenario dispatch

/// Parameters for every scenario; a config file may set any subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub profile: ProfileParams,
    pub toy_attack: ToyAttackParams,
    pub aes_attack: AesAttackParams,
    pub covert: CovertParams,
    pub defense: DefenseParams,
    pub noc_sweep: NocSweepParams,
}

impl ScenarioParams {
    /// Small runs that exercise every code path in seconds.
    pub fn reduced() -> Self {
        let aes = AesAttackParams {
            keys: 2,
            grid: vec![10, 100],
            training_samples: 2000,
            rounds: 10,
            heldout_trials: 50,
            vote_sizes: vec![1, 40],
            placement_samples: 200,
            ..AesAttackParams::default()
        };
        let profile = ProfileParams {
            samples: 200,
            ..ProfileParams::default()
        };
        Self {
            profile: profile.clone(),
            toy_attack: ToyAttackParams {
                profile: profile.clone(),
                bits: 1000,
            },
            aes_attack: aes.clone(),
            covert: CovertParams {
                profile: profile.clone(),
                bits: 2000,
                ..CovertParams::default()
            },
            defense: DefenseParams {
                profile,
                samples: 1000,
                toy_bits: 1000,
                aes: AesAttackParams {
                    keys: 1,
                    heldout_trials: 0,
                    vote_sizes: Vec::new(),
                    ..aes
                },
                load_rates: vec![0.0, 0.15],
                load_bits: 300,
                ..DefenseParams::default()
            },
            noc_sweep: NocSweepParams {
                rates: vec![0.02, 0.1],
                sim_cycles: 3000,
                warmup_cycles: 500,
                ..NocSweepParams::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ScenarioReport {
    Profile(ProfileReport),
    ToyAttack(ToyAttackReport),
    AesAttack(AesAttackReport),
    Covert(CovertReport),
    Defense(DefenseReport),
    NocSweep(NocSweepReport),
}

impl ScenarioReport {
    pub fn artifacts(&self) -> Result<Vec<Artifact>> {
        match self {
            ScenarioReport::Profile(r) => r.artifacts(),
            ScenarioReport::ToyAttack(r) => r.artifacts(),
            ScenarioReport::AesAttack(r) => r.artifacts(),
            ScenarioReport::Covert(r) => r.artifacts(),
            ScenarioReport::Defense(r) => r.artifacts(),
            ScenarioReport::NocSweep(r) => noc_sweep_artifacts(r),
        }
    }

    /// The acceptance criteria this scenario's data decides, with runtimes
    /// charged from `runtime_s`.
    pub fn criteria(&self, runtime_s: f64) -> Vec<CriterionResult> {
        match self {
            ScenarioReport::Profile(_) => Vec::new(),
            ScenarioReport::ToyAttack(r) => vec![judge_toy(r, runtime_s)],
            ScenarioReport::AesAttack(r) => judge_aes(r, runtime_s),
            ScenarioReport::Covert(r) => vec![judge_covert(r, runtime_s)],
            ScenarioReport::Defense(r) => vec![judge_defense(r, runtime_s)],
            ScenarioReport::NocSweep(r) => vec![judge_noc(r, runtime_s)],
        }
    }
}

pub fn run_scenario(
    s: Scenario,
    cfg: &MachineConfig,
    p: &ScenarioParams,
    seed: u64,
) -> Result<ScenarioReport> {
    cfg.validate()?;
    Ok(match s {
        Scenario::Profile => ScenarioReport::Profile(run_profile(cfg, &p.profile, seed)?),
        Scenario::ToyAttack => ScenarioReport::ToyAttack(run_toy(cfg, &p.toy_attack, seed)?),
        Scenario::AesAttack => ScenarioReport::AesAttack(run_aes(cfg, &p.aes_attack, seed)?),
        Scenario::Covert => ScenarioReport::Covert(run_covert(cfg, &p.covert, seed)?),
        Scenario::Defense => ScenarioReport::Defense(run_defense(cfg, &p.defense, seed)?),
        Scenario::NocSweep => ScenarioReport::NocSweep(run_noc_sweep(cfg, &p.noc_sweep, seed)?),
    })
}

// --------------------------------------------------------------- criteria

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub measured: String,
    pub target: String,
    pub runtime_s: f64,
    pub runtime_limit_s: f64,
}

impl CriterionResult {
    fn new(id: u8, passed: bool, measured: String, target: &str, runtime_s: f64) -> Self {
        let (name, limit) = CRITERIA[id as usize - 1];
        Self {
            id,
            name: name.to_string(),
            passed: passed && runtime_s <= limit,
            measured,
            target: target.to_string(),
            runtime_s,
            runtime_limit_s: limit,
        }
    }

    /// One report line.
    pub fn line(&self) -> String {
        format!(
            "{} criterion {:>2} {:<24} measured: {} | target: {} | {:.2}s (limit {}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.measured,
            self.target,
            self.runtime_s,
            self.runtime_limit_s
        )
    }
}

/// Name and runtime limit in seconds, indexed by criterion id − 1.
pub const CRITERIA: [(&str, f64); 10] = [
    ("bank-mapping", 1.0),
    ("latency-separation", 30.0),
    ("classifier-voting", 120.0),
    ("key-extraction", 900.0),
    ("aes-correctness", 5.0),
    ("covert-channel", 120.0),
    ("prefetchw-timer", 1.0),
    ("noc-saturation", 300.0),
    ("defense", 1200.0),
    ("determinism", 600.0),
];

pub fn criterion_bank_mapping(cfg: &MachineConfig) -> CriterionResult {
    let t = Instant::now();
    let a = bank_of(PhysAddr(0xc6fc0), cfg).linear;
    let b = bank_of(PhysAddr(0xc7000), cfg).linear;
    CriterionResult::new(
        1,
        a == 63 && b == 0,
        format!("bank(0xc6fc0)={a}, bank(0xc7000)={b}"),
        "63 and 0",
        t.elapsed().as_secs_f64(),
    )
}

fn judge_toy(r: &ToyAttackReport, runtime_s: f64) -> CriterionResult {
    CriterionResult::new(
        2,
        r.accuracy >= 0.95 && r.mean_gap >= 40.0,
        format!(
            "accuracy {:.4} over {} bits, gap {:.1} cycles",
            r.accuracy, r.bits, r.mean_gap
        ),
        "accuracy >= 0.95, gap >= 40",
        runtime_s,
    )
}

fn judge_aes(r: &AesAttackReport, runtime_s: f64) -> Vec<CriterionResult> {
    let first = r.voting.first().map_or(f64::NAN, |v| v.accuracy);
    let full = r.voting.last().map_or(f64::NAN, |v| v.accuracy);
    let voting = CriterionResult::new(
        3,
        full == 1.0 && first < full,
        format!(
            "{} samples {:.4}, {} sample(s) {:.4}",
            r.voting.last().map_or(0, |v| v.samples),
            full,
            r.voting.first().map_or(0, |v| v.samples),
            first
        ),
        "40 samples = 1.0, 1 sample < 1.0",
        runtime_s,
    );
    let last = r.curve.last().map_or(f64::NAN, |c| c.accuracy);
    let at100 = r.accuracy_at(100).unwrap_or(f64::NAN);
    let recovered = r.keys.iter().filter(|k| k.correct).count();
    let extraction = CriterionResult::new(
        4,
        !r.keys.is_empty() && last == 1.0 && at100 < 1.0,
        format!(
            "{recovered}/{} keys by T={}, accuracy {at100:.2} at T=100",
            r.keys.len(),
            r.curve.last().map_or(0, |c| c.trials)
        ),
        "all keys by T=4000, < 1.0 at T=100",
        runtime_s,
    );
    vec![voting, extraction]
}

/// FIPS-197 appendix C.1.
const FIPS_KEY: [u8; 16] = [
    0x00, 0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08, 0x09, 0x0a, 0x0b, 0x0c, 0x0d, 0x0e, 0x0f,
];
const FIPS_PT: [u8; 16] = [
    0x00, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88, 0x99, 0xaa, 0xbb, 0xcc, 0xdd, 0xee, 0xff,
];
const FIPS_CT: [u8; 16] = [
    0x69, 0xc4, 0xe0, 0xd8, 0x6a, 0x7b, 0x04, 0x30, 0xd8, 0xcd, 0xb7, 0x80, 0x70, 0xb4, 0xc5, 0x5a,
];

pub fn criterion_aes_correctness(cfg: &MachineConfig, seed: u64) -> Result<CriterionResult> {
    let t = Instant::now();
    let ks = AesKeySchedule::new(FIPS_KEY);
    let kat = encrypt_block(&ks, &FIPS_PT) == FIPS_CT && decrypt_block(&ks, &FIPS_CT) == FIPS_PT;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let round_trips = (0..1000)
        .filter(|_| {
            let ks = AesKeySchedule::new(rng.random());
            let pt: [u8; 16] = rng.random();
            decrypt_block(&ks, &encrypt_block(&ks, &pt)) == pt
        })
        .count();
    // The simulated victim computes the same plaintext on any machine.
    let tables = AesTables::new(
        PhysAddr(0x40_0000),
        PhysAddr(0x80_0000),
        PhysAddr(0x90_0000),
    )?;
    let io = DecryptIo {
        input: FIPS_CT,
        key_schedule: ks,
    };
    let mut machine_ok = true;
    for c in [
        cfg.clone(),
        MachineConfig::small_l1(),
        MachineConfig::noiseless(),
    ] {
        let mut m = machine_for(&c, seed)?;
        let core = m.mesh().center();
        machine_ok &= aes_decrypt(&io, &tables, &mut m, core).0 == FIPS_PT;
    }
    Ok(CriterionResult::new(
        5,
        kat && round_trips == 1000 && machine_ok,
        format!(
            "known answer {kat}, {round_trips}/1000 round trips, simulated victim {machine_ok}"
        ),
        "all pass",
        t.elapsed().as_secs_f64(),
    ))
}

fn judge_covert(r: &CovertReport, runtime_s: f64) -> CriterionResult {
    CriterionResult::new(
        6,
        r.stats.error_rate <= 2e-4 && r.bandwidth_relative_error <= 0.01,
        format!(
            "error rate {:.5} over {} bits, {:.0} bit/s vs predicted {:.0} ({:.3}%)",
            r.stats.error_rate,
            r.stats.bits_sent,
            r.stats.bandwidth_bps,
            r.predicted_bandwidth_bps,
            100.0 * r.bandwidth_relative_error
        ),
        "error <= 0.0002, bandwidth within 1%",
        runtime_s,
    )
}

pub fn criterion_prefetchw(cfg: &MachineConfig, seed: u64) -> Result<CriterionResult> {
    let t = Instant::now();
    let mut m = machine_for(cfg, seed)?;
    let mesh = m.mesh();
    let (writer, prober) = (mesh.tile(1, 0), mesh.tile(0, 0));
    let a = PhysAddr(0x30_0000);
    m.load(writer, a);
    m.store(writer, a);
    let dirty = m.prefetchw_probe(prober, a).latency;
    let repeat = m.prefetchw_probe(prober, a).latency;
    Ok(CriterionResult::new(
        7,
        dirty > 150 && repeat < 100,
        format!("after remote write {dirty}, repeat {repeat}"),
        "> 150 and < 100",
        t.elapsed().as_secs_f64(),
    ))
}

fn judge_noc(r: &NocSweepReport, runtime_s: f64) -> CriterionResult {
    let monotone = r.windows(2).all(|w| w[1].mean_latency >= w[0].mean_latency);
    let knee = r
        .iter()
        .filter(|p| p.rate <= 0.1 + 1e-9)
        .any(|p| p.mean_latency > 100.0 || p.saturated);
    let at = r.iter().rfind(|p| p.rate <= 0.1 + 1e-9);
    CriterionResult::new(
        8,
        monotone && knee,
        format!(
            "monotone {monotone}, latency {:.1} at rate {:.2}, first saturated rate {}",
            at.map_or(f64::NAN, |p| p.mean_latency),
            at.map_or(f64::NAN, |p| p.rate),
            r.iter()
                .find(|p| p.saturated)
                .map_or_else(|| "none".to_string(), |p| format!("{:.2}", p.rate))
        ),
        "non-decreasing, > 100 or saturated by 0.1",
        runtime_s,
    )
}

fn judge_defense(r: &DefenseReport, runtime_s: f64) -> CriterionResult {
    let p = r.uniformity.map_or(f64::NAN, |u| u.p_value);
    CriterionResult::new(
        9,
        r.ks_after <= 0.05 && r.toy_accuracy_after <= 0.55 && r.keys_attempted > 0 && r.keys_recovered == 0,
        format!(
            "KS {:.4} (undefended {:.3}), toy accuracy {:.4}, keys {}/{}, LOW-plaintext uniformity p={p:.3}",
            r.ks_after, r.ks_before, r.toy_accuracy_after, r.keys_recovered, r.keys_attempted
        ),
        "KS <= 0.05, accuracy <= 0.55, 0 keys",
        runtime_s,
    )
}

/// Runs every scenario twice at reduced size and compares artifact bytes.
pub fn criterion_determinism(cfg: &MachineConfig, seed: u64) -> Result<CriterionResult> {
    let t = Instant::now();
    let p = ScenarioParams::reduced();
    let mut differing = Vec::new();
    for s in Scenario::ALL {
        let a = run_scenario(s, cfg, &p, seed)?.artifacts()?;
        let b = run_scenario(s, cfg, &p, seed)?.artifacts()?;
        if a != b {
            differing.push(s.name());
        }
    }
    Ok(CriterionResult::new(
        10,
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} scenarios byte-identical", Scenario::ALL.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
        "byte-identical reruns",
        t.elapsed().as_secs_f64(),
    ))
}

fn failed(id: u8, e: &Error) -> CriterionResult {
    CriterionResult::new(id, false, format!("error: {e}"), "runs without error", 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub criteria: Vec<CriterionResult>,
    pub runtime_s: f64,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CriterionResult> {
        self.criteria.iter().filter(|c| !c.passed).collect()
    }
}

/// Runs the selected criteria (all when `only` is empty) at full size, along
/// with the scenario artifacts they were judged on. An error inside a
/// criterion is reported as its failure.
pub fn reproduce_all(cfg: &MachineConfig, seed: u64, only: &[u8]) -> (Report, Vec<Artifact>) {
    let t = Instant::now();
    let want = |id: u8| only.is_empty() || only.contains(&id);
    let params = ScenarioParams::default();
    let mut criteria = Vec::new();
    let mut artifacts = Vec::new();

    let mut direct =
        |id: u8, r: Result<CriterionResult>| criteria.push(r.unwrap_or_else(|e| failed(id, &e)));
    if want(1) {
        direct(1, Ok(criterion_bank_mapping(cfg)));
    }
    if want(5) {
        direct(5, criterion_aes_correctness(cfg, seed));
    }
    if want(7) {
        direct(7, criterion_prefetchw(cfg, seed));
    }

    let scenarios = [
        (Scenario::ToyAttack, &[2u8][..]),
        (Scenario::AesAttack, &[3, 4][..]),
        (Scenario::Covert, &[6][..]),
        (Scenario::NocSweep, &[8][..]),
        (Scenario::Defense, &[9][..]),
    ];
    for (s, ids) in scenarios {
        if !ids.iter().any(|&i| want(i)) {
            continue;
        }
        let st = Instant::now();
        match run_scenario(s, cfg, &params, seed) {
            Ok(report) => {
                let rt = st.elapsed().as_secs_f64();
                criteria.extend(report.criteria(rt).into_iter().filter(|c| want(c.id)));
                match report.artifacts() {
                    Ok(a) => artifacts.extend(a),
                    Err(e) => log::warn!("{}: artifacts not serialized: {e}", s.name()),
                }
            }
            Err(e) => criteria.extend(ids.iter().filter(|&&i| want(i)).map(|&i| failed(i, &e))),
        }
    }
    if want(10) {
        criteria.push(criterion_determinism(cfg, seed).unwrap_or_else(|e| failed(10, &e)));
    }
    criteria.sort_by_key(|c| c.id);
    (
        Report {
            seed,
            criteria,
            runtime_s: t.elapsed().as_secs_f64(),
        },
        artifacts,
    )
}
