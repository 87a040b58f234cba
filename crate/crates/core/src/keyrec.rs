//! End-to-end recovery of one last-round key word: timed decryptions, LOW/HIGH
//! verdicts, and per-byte candidate voting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    evict_victim_l1, hold_llc, prime_l1_tables, run_scenario, Agent, RunOptions, Script,
    TimerMethod, TimerProgram, TimerReading,
};
use crate::classifier::{
    train_adaboost_logged, vote, ClassWeighting, Label, LabeledSample, StumpEnsemble,
};
use crate::error::{Error, Result};
use crate::machine::{PhysAddr, SimMachine, TileId};
use crate::profiler::{
    classify_addresses, profile_addresses, AddressClassMap, ClassifyParams, LatencyProfile,
};
use crate::stats::chi_square_p;
use crate::victims::{
    decrypt_plan, decrypt_traced, AesKeySchedule, AesTables, DecryptIo, MARK_LAST_ROUND, TD4,
};

/// Output word whose store interval the timer measures.
pub const MONITORED_WORD: usize = 1;
pub const DEFAULT_READINGS: usize = 40;
pub const DEFAULT_MAX_POLLS: u64 = 2_000;

/// Tiles of the three cooperating threads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AesRoles {
    pub victim: TileId,
    /// Holds Td4 in its LLC bank and evicts it from the victim's L1.
    pub holder: TileId,
    pub timer: TileId,
}

impl AesRoles {
    /// Victim on the mesh centre with the holder east and the timer south.
    pub fn centered(machine: &SimMachine) -> Self {
        let mesh = machine.mesh();
        let c = mesh.center();
        Self {
            victim: c,
            holder: mesh.tile(c.x + 1, c.y),
            timer: mesh.tile(c.x, c.y + 1),
        }
    }
}

/// Where to look for a Td4 placement whose lines straddle the near/far split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementSearch {
    pub td_base: PhysAddr,
    pub pool_base: PhysAddr,
    pub pool_lines: u64,
    pub out_search_base: PhysAddr,
    pub samples: usize,
    pub classify: ClassifyParams,
}

impl Default for PlacementSearch {
    fn default() -> Self {
        Self {
            td_base: PhysAddr(0x40_0000),
            pool_base: PhysAddr(0x80_0000),
            pool_lines: 1024,
            out_search_base: PhysAddr(0x90_0000),
            samples: 1000,
            classify: ClassifyParams::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Placement {
    pub tables: AesTables,
    pub map: AddressClassMap,
    pub profile: LatencyProfile,
}

/// Profiles the pool from the victim's tile, then picks the lowest Td4 base
/// whose four lines all fall in a class with both classes present. Two near
/// lines are preferred, then three, then one.
pub fn find_leaky_placement(
    machine: &mut SimMachine,
    roles: &AesRoles,
    search: &PlacementSearch,
) -> Result<Placement> {
    let line = machine.config().line_size;
    let pool: Vec<PhysAddr> = (0..search.pool_lines)
        .map(|i| search.pool_base.offset(i * line))
        .collect();
    let profile = profile_addresses(machine, roles.victim, roles.holder, &pool, search.samples)?;
    let map = classify_addresses(&profile, &search.classify)?;
    // The out line's CHA is the timer tile, which keeps each poll cheap.
    let out = (0..)
        .map(|i| search.out_search_base.offset(i * line))
        .take(1 << 16)
        .find(|&a| machine.cha_of(a) == roles.timer)
        .ok_or_else(|| Error::Precondition(format!("no out line homed on {}", roles.timer)))?;

    let mut best: Option<(u8, AesTables)> = None;
    for j in 0..search.pool_lines / 4 {
        let tables = AesTables::new(search.td_base, search.pool_base.offset(j * 4 * line), out)?;
        let near = tables.td4_lines().filter(|&l| map.is_near(l)).count();
        let far = tables.td4_lines().filter(|&l| map.is_far(l)).count();
        if near == 0 || far == 0 || near + far != 4 {
            continue;
        }
        let rank = match near {
            2 => 0,
            3 => 1,
            _ => 2,
        };
        if best.as_ref().is_none_or(|(r, _)| rank < *r) {
            best = Some((rank, tables));
        }
    }
    let (_, tables) = best.ok_or_else(|| {
        Error::NoLeakage(format!(
            "no Td4 base in the {}-line pool splits into near and far lines",
            search.pool_lines
        ))
    })?;
    Ok(Placement {
        tables,
        map,
        profile,
    })
}

/// Td4 indices whose line is near the victim, as a membership table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LowIndexSet {
    member: [bool; 256],
    pub near_lines: Vec<usize>,
}

impl LowIndexSet {
    pub fn contains(&self, i: u8) -> bool {
        self.member[i as usize]
    }

    pub fn indices(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(|&i| self.member[i as usize])
    }

    pub fn len(&self) -> usize {
        self.member.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_low(&self, idx: &[u8; 4]) -> bool {
        idx.iter().all(|&i| self.contains(i))
    }
}

pub fn build_low_index_set(map: &AddressClassMap, tables: &AesTables) -> Result<LowIndexSet> {
    let lines: Vec<PhysAddr> = tables.td4_lines().collect();
    let near_lines: Vec<usize> = (0..4).filter(|&k| map.is_near(lines[k])).collect();
    let far = lines.iter().filter(|&&l| map.is_far(l)).count();
    if near_lines.is_empty() || far == 0 {
        return Err(Error::NoLeakage(format!(
            "Td4 at {} has {} near and {far} far lines; no leakage at this placement",
            tables.td4_base,
            near_lines.len()
        )));
    }
    let mut member = [false; 256];
    for i in 0..=255u8 {
        member[i as usize] = near_lines.contains(&AesTables::td4_line_of(i));
    }
    Ok(LowIndexSet { member, near_lines })
}

/// A machine with the victim, holder and timer threads in place.
pub struct AesRig {
    pub machine: SimMachine,
    pub tables: AesTables,
    pub roles: AesRoles,
    pub method: TimerMethod,
    pub max_polls: u64,
}

impl AesRig {
    /// Primes, holds and runs one discarded decryption so the out line is
    /// cached before the first measurement.
    pub fn new(machine: SimMachine, tables: AesTables, roles: AesRoles) -> Result<Self> {
        let mut rig = Self {
            machine,
            tables,
            roles,
            method: TimerMethod::SharedPoll,
            max_polls: DEFAULT_MAX_POLLS,
        };
        rig.refresh()?;
        rig.timed_decrypt(&DecryptIo {
            input: [0; 16],
            key_schedule: AesKeySchedule::new([0; 16]),
        })?;
        Ok(rig)
    }

    /// Re-establishes the forced state: Td0–Td3 in the victim's L1, Td4 held
    /// remote and absent from the victim's L1.
    pub fn refresh(&mut self) -> Result<()> {
        let td4: Vec<PhysAddr> = self.tables.td4_lines().collect();
        prime_l1_tables(&mut self.machine, self.roles.victim, &self.tables)?;
        hold_llc(&mut self.machine, self.roles.holder, &td4);
        evict_victim_l1(
            &mut self.machine,
            self.roles.holder,
            self.roles.victim,
            &td4,
        );
        Ok(())
    }

    pub fn timed_decrypt(&mut self, io: &DecryptIo) -> Result<([u8; 16], TimerReading)> {
        let (pt, ops) = decrypt_plan(io, &self.tables);
        let mut victim = Script::ops(ops);
        let poll = self.machine.config().lat_poll_iter;
        let mut timer = TimerProgram::new(
            self.tables.out,
            self.method,
            0,
            MARK_LAST_ROUND,
            poll,
            self.max_polls,
        );
        let mut agents = [
            Agent::new(self.roles.victim, &mut victim),
            Agent::new(self.roles.timer, &mut timer),
        ];
        run_scenario(&mut self.machine, &mut agents, &RunOptions::default())?;
        Ok((pt, timer.reading()))
    }
}

/// Labelled single readings under attacker-chosen keys. The label is LOW when
/// every monitored Td4 index falls in `low`, which the attacker can compute
/// from its own key. Timeouts are skipped.
pub fn collect_training(
    rig: &mut AesRig,
    low: &LowIndexSet,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 2 * n + 100 {
            return Err(Error::Precondition(
                "timer keeps timing out while collecting training data".into(),
            ));
        }
        let ks = AesKeySchedule::new(rng.random());
        let ct: [u8; 16] = rng.random();
        let idx = decrypt_traced(&ks, &ct).1.last[MONITORED_WORD];
        rig.refresh()?;
        let (_, r) = rig.timed_decrypt(&DecryptIo {
            input: ct,
            key_schedule: ks,
        })?;
        if let Some(t) = r.t26_31 {
            let label = if low.all_low(&idx) {
                Label::Low
            } else {
                Label::High
            };
            out.push(LabeledSample {
                latency: t as f64,
                label,
            });
        }
    }
    Ok(out)
}

pub fn train_model(samples: &[LabeledSample], rounds: usize) -> Result<StumpEnsemble> {
    // Balanced weights keep the rare LOW class from being voted away.
    Ok(train_adaboost_logged(samples, rounds, ClassWeighting::Balanced)?.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TrialRecord {
    pub ciphertext: [u8; 16],
    pub plaintext: [u8; 16],
    /// Readings that did not time out.
    pub readings: Vec<u64>,
    pub timeouts: usize,
    /// `None` when every reading timed out.
    pub verdict: Option<Label>,
    /// Simulator ground truth: every monitored index lies in the low set.
    pub truth_low: bool,
}

/// Decrypts one random ciphertext `readings` times and votes on the readings.
pub fn run_trial(
    rig: &mut AesRig,
    key: &AesKeySchedule,
    model: &StumpEnsemble,
    low: &LowIndexSet,
    readings: usize,
    rng: &mut impl Rng,
) -> Result<TrialRecord> {
    let ct: [u8; 16] = rng.random();
    let io = DecryptIo {
        input: ct,
        key_schedule: key.clone(),
    };
    rig.refresh()?;
    let mut pt = [0; 16];
    let mut got = Vec::with_capacity(readings);
    for _ in 0..readings {
        let (p, r) = rig.timed_decrypt(&io)?;
        pt = p;
        got.extend(r.t26_31);
    }
    let xs: Vec<f64> = got.iter().map(|&t| t as f64).collect();
    let verdict = if xs.is_empty() {
        None
    } else {
        Some(vote(model, &xs)?)
    };
    let idx = decrypt_traced(key, &ct).1.last[MONITORED_WORD];
    Ok(TrialRecord {
        ciphertext: ct,
        plaintext: pt,
        timeouts: readings - got.len(),
        readings: got,
        verdict,
        truth_low: low.all_low(&idx),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyRecoveryState {
    pub counters: [[u64; 256]; 4],
    /// Histogram of each monitored plaintext byte over LOW trials.
    pub low_plaintext: [[u64; 256]; 4],
    pub trials_total: u64,
    pub trials_low: u64,
    pub discarded: u64,
    pub word: usize,
}

impl KeyRecoveryState {
    pub fn new(word: usize) -> Self {
        assert!(word < 4, "output word index {word} out of range");
        Self {
            counters: [[0; 256]; 4],
            low_plaintext: [[0; 256]; 4],
            trials_total: 0,
            trials_low: 0,
            discarded: 0,
            word,
        }
    }

    /// A LOW verdict votes, for every byte, for each key candidate that maps
    /// some low-set Td4 value to the observed plaintext byte.
    pub fn accumulate(&mut self, plaintext: &[u8; 16], verdict: Option<Label>, low: &LowIndexSet) {
        self.trials_total += 1;
        match verdict {
            None => self.discarded += 1,
            Some(Label::High) => {}
            Some(Label::Low) => {
                self.trials_low += 1;
                for b in 0..4 {
                    let p = plaintext[4 * self.word + b];
                    self.low_plaintext[b][p as usize] += 1;
                    for i in low.indices() {
                        self.counters[b][(p ^ TD4[i as usize]) as usize] += 1;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KeyWordEstimate {
    /// `None` where the top count is tied or no LOW trial was seen.
    pub bytes: [Option<u8>; 4],
    /// `(top − second) / trials_low` per byte.
    pub confidence: [f64; 4],
}

impl KeyWordEstimate {
    pub fn word(&self) -> Option<u32> {
        let b = self.bytes;
        Some(u32::from_be_bytes([b[0]?, b[1]?, b[2]?, b[3]?]))
    }

    pub fn is_determined(&self) -> bool {
        self.word().is_some()
    }
}

pub fn extract_key_word(state: &KeyRecoveryState) -> KeyWordEstimate {
    let mut est = KeyWordEstimate {
        bytes: [None; 4],
        confidence: [0.0; 4],
    };
    if state.trials_low == 0 {
        return est;
    }
    for b in 0..4 {
        let c = &state.counters[b];
        let top = (0..256)
            .max_by_key(|&k| (c[k], std::cmp::Reverse(k)))
            .expect("256 counters");
        let second = (0..256)
            .filter(|&k| k != top)
            .map(|k| c[k])
            .max()
            .expect("255 counters");
        if c[top] > second {
            est.bytes[b] = Some(top as u8);
        }
        est.confidence[b] = (c[top] - second) as f64 / state.trials_low as f64;
    }
    est
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryParams {
    pub readings: usize,
    /// Ascending trial counts at which the estimate is recorded.
    pub grid: Vec<u64>,
}

pub const DEFAULT_GRID: &[u64] = &[10, 100, 500, 1000, 2000, 4000];

impl Default for RecoveryParams {
    fn default() -> Self {
        Self {
            readings: DEFAULT_READINGS,
            grid: DEFAULT_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyRun {
    pub key: [u8; 16],
    pub truth: u32,
    /// Estimate after each grid point's trial count.
    pub snapshots: Vec<(u64, KeyWordEstimate)>,
    pub trials_low: u64,
    pub discarded: u64,
    /// Trials whose verdict matched the simulator's ground truth.
    pub verdicts_correct: u64,
    pub final_state_counters: Vec<Vec<u64>>,
    pub low_plaintext: Vec<Vec<u64>>,
}

impl KeyRun {
    pub fn correct_at(&self, t: u64) -> bool {
        self.snapshots
            .iter()
            .find(|(g, _)| *g == t)
            .is_some_and(|(_, e)| e.word() == Some(self.truth))
    }
}

/// Runs trials against one victim key up to the last grid point.
pub fn recover_key_word(
    rig: &mut AesRig,
    key: [u8; 16],
    model: &StumpEnsemble,
    low: &LowIndexSet,
    params: &RecoveryParams,
    rng: &mut impl Rng,
) -> Result<KeyRun> {
    let ks = AesKeySchedule::new(key);
    let mut state = KeyRecoveryState::new(MONITORED_WORD);
    let mut snapshots = Vec::with_capacity(params.grid.len());
    let mut correct = 0;
    let last = params.grid.last().copied().unwrap_or(0);
    let mut grid = params.grid.iter().peekable();
    while grid.peek() == Some(&&0) {
        snapshots.push((0, extract_key_word(&state)));
        grid.next();
    }
    for t in 1..=last {
        let trial = run_trial(rig, &ks, model, low, params.readings, rng)?;
        if trial.verdict.map(|v| v == Label::Low) == Some(trial.truth_low) {
            correct += 1;
        }
        state.accumulate(&trial.plaintext, trial.verdict, low);
        while grid.peek() == Some(&&t) {
            snapshots.push((t, extract_key_word(&state)));
            grid.next();
        }
    }
    Ok(KeyRun {
        key,
        truth: ks.last_round_word(MONITORED_WORD),
        snapshots,
        trials_low: state.trials_low,
        discarded: state.discarded,
        verdicts_correct: correct,
        final_state_counters: state.counters.iter().map(|c| c.to_vec()).collect(),
        low_plaintext: state.low_plaintext.iter().map(|c| c.to_vec()).collect(),
    })
}

/// Fraction of keys fully recovered at each grid point.
pub fn accuracy_curve(runs: &[KeyRun], grid: &[u64]) -> Vec<(u64, f64)> {
    grid.iter()
        .map(|&t| {
            let ok = runs.iter().filter(|r| r.correct_at(t)).count();
            (t, ok as f64 / runs.len().max(1) as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UniformityTest {
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
}

/// Pearson test that the plaintext bytes behind LOW verdicts are uniform,
/// pooled over every run and monitored byte. Votes are a fixed function of
/// these bytes, so uniformity means the votes carry no key information.
pub fn low_plaintext_uniformity(runs: &[KeyRun]) -> UniformityTest {
    let (mut statistic, mut dof) = (0.0, 0.0);
    for hist in runs.iter().flat_map(|r| &r.low_plaintext) {
        let n: u64 = hist.iter().sum();
        if n == 0 {
            continue;
        }
        let e = n as f64 / hist.len() as f64;
        statistic += hist
            .iter()
            .map(|&o| (o as f64 - e).powi(2) / e)
            .sum::<f64>();
        dof += (hist.len() - 1) as f64;
    }
    UniformityTest {
        statistic,
        dof,
        p_value: chi_square_p(statistic, dof),
    }
}

/// Everything the attacker learns before facing the victim key.
#[derive(Clone, Debug)]
pub struct AttackSetup {
    pub placement: Placement,
    pub low: LowIndexSet,
    pub model: StumpEnsemble,
    pub training: Vec<LabeledSample>,
}

/// Profiles, picks a leaky placement, and trains the classifier on
/// `training_samples` readings from attacker-chosen keys.
pub fn prepare_attack(
    mut machine: SimMachine,
    roles: &AesRoles,
    search: &PlacementSearch,
    training_samples: usize,
    rounds: usize,
    seed: u64,
) -> Result<(AesRig, AttackSetup)> {
    let placement = find_leaky_placement(&mut machine, roles, search)?;
    let low = build_low_index_set(&placement.map, &placement.tables)?;
    let mut rig = AesRig::new(machine, placement.tables, *roles)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let training = collect_training(&mut rig, &low, training_samples, &mut rng)?;
    let model = train_model(&training, rounds)?;
    Ok((
        rig,
        AttackSetup {
            placement,
            low,
            model,
            training,
        },
    ))
}
