use super::*;
use crate::machine::{HitLevel, MachineConfig};
use crate::victims::{decrypt_plan, AesKeySchedule, AesTables, DecryptIo, MARK_LAST_ROUND};
use proptest::prelude::*;

fn quiet() -> SimMachine {
    SimMachine::new(MachineConfig::noiseless()).unwrap()
}

#[test]
fn ten_loads_give_ten_entries() {
    let mut m = quiet();
    let mut p = Script::ops((0..10).map(|i| Op::Load(PhysAddr(i * 64))));
    let t = m.mesh().tile(0, 0);
    let mut agents = [Agent::new(t, &mut p)];
    let run = run_scenario(&mut m, &mut agents, &RunOptions::traced()).unwrap();
    assert_eq!(run.trace.len(), 10);
    let total: u64 = run.trace.iter().map(|e| e.cost).sum();
    assert_eq!(run.end_times, vec![total]);
}

#[test]
fn ops_execute_in_time_order() {
    let mut m = quiet();
    let mesh = m.mesh();
    let mut a = Script::ops([Op::Compute(100), Op::Load(PhysAddr(0))]);
    let mut b = Script::ops([Op::Compute(50), Op::Load(PhysAddr(0)), Op::Compute(10)]);
    let mut agents = [
        Agent::new(mesh.tile(0, 0), &mut a),
        Agent::new(mesh.tile(5, 5), &mut b),
    ];
    let run = run_scenario(&mut m, &mut agents, &RunOptions::traced()).unwrap();
    let starts: Vec<u64> = run.trace.iter().map(|e| e.start).collect();
    assert!(starts.windows(2).all(|w| w[0] <= w[1]), "{starts:?}");
    // Agent 1 reached line 0 first, so it paid the DRAM fill.
    let loads: Vec<&TraceEntry> = run
        .trace
        .iter()
        .filter(|e| matches!(e.op, Op::Load(_)))
        .collect();
    assert_eq!(loads[0].agent, 1);
    assert_eq!(loads[0].result.unwrap().hit_level, HitLevel::Dram);
}

#[test]
fn waiting_on_a_missing_mark_deadlocks() {
    let mut m = quiet();
    let mesh = m.mesh();
    let mut a = Script::ops([Op::Compute(5)]);
    let mut b = Script::new(vec![Step::WaitMark { agent: 0, mark: 9 }]);
    let mut agents = [
        Agent::new(mesh.tile(0, 0), &mut a),
        Agent::new(mesh.tile(1, 0), &mut b),
    ];
    match run_scenario(&mut m, &mut agents, &RunOptions::default()) {
        Err(Error::Deadlock { .. }) => {}
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn marks_release_waiters_at_mark_time() {
    let mut m = quiet();
    let mesh = m.mesh();
    let mut a = Script::ops([Op::Compute(40), Op::Mark(3), Op::Compute(10)]);
    let mut b = Script::new(vec![
        Step::WaitMark { agent: 0, mark: 3 },
        Step::Issue(Op::Compute(1)),
    ]);
    let mut agents = [
        Agent::new(mesh.tile(0, 0), &mut a),
        Agent::new(mesh.tile(1, 0), &mut b),
    ];
    let run = run_scenario(&mut m, &mut agents, &RunOptions::traced()).unwrap();
    assert_eq!(run.mark_time(0, 3), Some(40));
    assert_eq!(run.end_times, vec![50, 41]);
}

#[test]
fn max_cycles_stops_early() {
    let mut m = quiet();
    let mut a = Script::ops(std::iter::repeat_n(Op::Compute(10), 100));
    let mut agents = [Agent::new(m.mesh().tile(0, 0), &mut a)];
    let opts = RunOptions {
        record_trace: true,
        max_cycles: Some(95),
    };
    let run = run_scenario(&mut m, &mut agents, &opts).unwrap();
    assert_eq!(run.trace.len(), 10);
}

fn cost_op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1u64..300).prop_map(Op::Compute),
        (0u64..64).prop_map(|l| Op::Load(PhysAddr(l * 64))),
        (0u64..64).prop_map(|l| Op::Store(PhysAddr(l * 64))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn every_runnable_agent_gets_turns(
        progs in prop::collection::vec(prop::collection::vec(cost_op(), 200..400), 2..5)
    ) {
        let mut m = quiet();
        let mesh = m.mesh();
        let mut scripts: Vec<Script> = progs.into_iter().map(Script::ops).collect();
        let n = scripts.len();
        let mut agents: Vec<Agent> = scripts
            .iter_mut()
            .enumerate()
            .map(|(i, s)| Agent::new(mesh.tile_linear(i * 9), s as &mut dyn Program))
            .collect();
        let run = run_scenario(&mut m, &mut agents, &RunOptions::traced()).unwrap();
        // Every window of tiles*1000 turns in which an agent still had work
        // contains at least one of its turns.
        let window = 64 * 1000;
        let last_turn: Vec<usize> = (0..n)
            .map(|a| run.trace.iter().rposition(|e| e.agent == a).unwrap())
            .collect();
        for start in (0..run.trace.len()).step_by(window / 4) {
            let end = (start + window).min(run.trace.len());
            for (a, &last) in last_turn.iter().enumerate() {
                if last >= end {
                    prop_assert!(run.trace[start..end].iter().any(|e| e.agent == a));
                }
            }
        }
    }

    #[test]
    fn runs_are_reproducible(seed in any::<u64>()) {
        let run = || {
            let cfg = MachineConfig { rng_seed: seed, ..MachineConfig::default() };
            let mut m = SimMachine::new(cfg).unwrap();
            let mesh = m.mesh();
            let mut a = Script::ops((0..50).map(|i| Op::Load(PhysAddr(i % 7 * 64))));
            let mut b = Script::ops((0..50).map(|i| Op::Store(PhysAddr(i % 5 * 64))));
            let mut agents = [Agent::new(mesh.tile(0, 0), &mut a), Agent::new(mesh.tile(6, 2), &mut b)];
            run_scenario(&mut m, &mut agents, &RunOptions::traced()).unwrap().trace
        };
        prop_assert_eq!(run(), run());
    }
}

/// Line-aligned address at or above `from` whose CHA satisfies `pred`.
fn find_line(m: &SimMachine, from: u64, pred: impl Fn(TileId) -> bool) -> PhysAddr {
    (0..)
        .map(|i| PhysAddr(from + 64 * i))
        .find(|&a| pred(m.cha_of(a)))
        .unwrap()
}

/// Td4 base whose four lines' CHAs all satisfy `pred`.
fn find_td4(m: &SimMachine, from: u64, pred: impl Fn(usize, TileId) -> bool) -> PhysAddr {
    (0..)
        .map(|i| PhysAddr(from + 256 * i))
        .find(|&b| (0..4).all(|k| pred(k, m.cha_of(b.offset(64 * k as u64)))))
        .unwrap()
}

struct Rig {
    m: SimMachine,
    tables: AesTables,
    victim: TileId,
    holder: TileId,
    timer: TileId,
}

fn rig(td4_pred: impl Fn(usize, TileId) -> bool) -> Rig {
    let m = quiet();
    let mesh = m.mesh();
    let (victim, holder, timer) = (mesh.tile(3, 3), mesh.tile(4, 3), mesh.tile(3, 4));
    let td4 = find_td4(&m, 0x80_0000, td4_pred);
    let out = find_line(&m, 0x90_0000, |t| t == timer);
    let tables = AesTables::new(PhysAddr(0x40_0000), td4, out).unwrap();
    Rig {
        m,
        tables,
        victim,
        holder,
        timer,
    }
}

impl Rig {
    fn prepare(&mut self) {
        prime_l1_tables(&mut self.m, self.victim, &self.tables).unwrap();
        let lines: Vec<PhysAddr> = self.tables.td4_lines().collect();
        hold_llc(&mut self.m, self.holder, &lines);
    }

    fn timed(&mut self, ct: [u8; 16], method: TimerMethod) -> (RunOutcome, TimerReading) {
        let io = DecryptIo {
            input: ct,
            key_schedule: AesKeySchedule::new([0x42; 16]),
        };
        let (_, ops) = decrypt_plan(&io, &self.tables);
        let mut victim = Script::ops(ops);
        let poll = self.m.config().lat_poll_iter;
        let mut timer =
            TimerProgram::new(self.tables.out, method, 0, MARK_LAST_ROUND, poll, 10_000);
        let mut agents = [
            Agent::new(self.victim, &mut victim),
            Agent::new(self.timer, &mut timer),
        ];
        let run = run_scenario(&mut self.m, &mut agents, &RunOptions::traced()).unwrap();
        (run, timer.reading())
    }
}

#[test]
fn priming_makes_td_l1_resident_and_td4_remote() {
    let mut r = rig(|_, _| true);
    r.prepare();
    r.prepare();
    for line in r.tables.td_lines() {
        assert_eq!(r.m.load(r.victim, line).hit_level, HitLevel::L1);
    }
    for line in r.tables.td4_lines() {
        assert_eq!(r.m.l1_state(r.victim, line), None);
        let res = r.m.load(r.victim, line);
        assert_eq!(res.hit_level, HitLevel::LlcRemote);
        assert_eq!(res.serving_tile, r.holder);
    }
}

#[test]
fn held_td4_lines_share_forwarder_but_not_cha() {
    let mut r = rig(|_, _| true);
    r.prepare();
    let lines: Vec<PhysAddr> = r.tables.td4_lines().collect();
    assert!(lines.iter().all(|&l| r.m.llc_home(l) == Some(r.holder)));
    let mut chas: Vec<TileId> = lines.iter().map(|&l| r.m.cha_of(l)).collect();
    chas.dedup();
    assert!(chas.len() >= 2);
    let before = r.m.stats();
    hold_llc(&mut r.m, r.holder, &[]);
    assert_eq!(before, r.m.stats());
}

#[test]
fn small_l1_cannot_be_primed() {
    let mut m = SimMachine::new(MachineConfig::small_l1()).unwrap();
    let tables = AesTables::new(
        PhysAddr(0x40_0000),
        PhysAddr(0x80_0000),
        PhysAddr(0x90_0000),
    )
    .unwrap();
    let t = m.mesh().tile(3, 3);
    assert!(matches!(
        prime_l1_tables(&mut m, t, &tables),
        Err(Error::Config { .. })
    ));
}

#[test]
fn eviction_keeps_llc_residency() {
    let mut m = quiet();
    let mesh = m.mesh();
    let (victim, attacker) = (mesh.tile(0, 0), mesh.tile(2, 0));
    let a = PhysAddr(0x1000);
    m.load(victim, a);
    evict_victim_l1(&mut m, attacker, victim, &[a]);
    assert_eq!(m.l1_state(victim, a), None);
    assert!(m.load(victim, a).hit_level.is_llc());
    let unheld = PhysAddr(0x7_0000);
    evict_victim_l1(&mut m, attacker, victim, &[unheld]);
    assert_eq!(m.load(victim, unheld).hit_level, HitLevel::Dram);
}

#[test]
fn victim_td4_access_is_forced_remote() {
    let mut r = rig(|_, _| true);
    for _ in 0..3 {
        r.prepare();
        let (run, _) = r.timed([9; 16], TimerMethod::SharedPoll);
        for e in run
            .trace
            .iter()
            .filter(|e| matches!(e.op, Op::StreamGroup(_)))
        {
            let res = e.result.unwrap();
            assert_eq!(res.hit_level, HitLevel::LlcRemote);
            assert_eq!(res.serving_tile, r.holder);
        }
    }
}

fn remote_cost(h_cha: u64) -> u64 {
    // l1 + cha + bank + (2*h_cha + 2*1) * (per_hop + router), holder one hop away.
    4 + 6 + 14 + (2 * h_cha + 2) * 4
}

const CENTER: TileId = TileId {
    x: 3,
    y: 3,
    linear: 27,
};

#[test]
fn timer_bands_follow_cha_distance() {
    let mut r = rig(|_, t| hop_distance(t, CENTER) <= 3);
    r.prepare();
    // The first decryption pulls the out line from DRAM; discard it.
    r.timed([3; 16], TimerMethod::SharedPoll);
    r.prepare();
    let (run, low) = r.timed([3; 16], TimerMethod::SharedPoll);
    let t_low = low.t26_31.unwrap();
    assert_eq!(t_low % 6, 0);
    // Word 1: slowest Td4 load, combine + ALU, one posted store cycle.
    let ks = AesKeySchedule::new([0x42; 16]);
    let (_, tr) = crate::victims::decrypt_traced(&ks, &[3; 16]);
    let hmax = tr.last[1]
        .iter()
        .map(|&i| hop_distance(r.victim, r.m.cha_of(r.tables.td4_addr(i))))
        .max()
        .unwrap();
    let ideal = remote_cost(hmax) + 14 + 1;
    assert!(
        t_low + 6 >= ideal && t_low <= ideal + 6,
        "{t_low} vs {ideal}"
    );
    assert!(t_low <= remote_cost(3) + 15 + 6);

    // Timer polls land between the victim's first and second out stores.
    let stores: Vec<u64> = run
        .trace
        .iter()
        .filter(|e| e.agent == 0 && matches!(e.op, Op::Store(_)))
        .map(|e| e.start)
        .collect();
    assert!(run
        .trace
        .iter()
        .any(|e| e.agent == 1 && e.start > stores[0] && e.start < stores[1]));

    let far_first = |k: usize, t: TileId| {
        let h = hop_distance(t, CENTER);
        if k == 0 {
            h >= 6
        } else {
            true
        }
    };
    let mut r = rig(far_first);
    r.prepare();
    r.timed([3; 16], TimerMethod::SharedPoll);
    r.prepare();
    let ct = (0u8..=255)
        .map(|b| [b; 16])
        .find(|ct| {
            let (_, tr) = crate::victims::decrypt_traced(&ks, ct);
            tr.last[1].iter().any(|&i| i < 64)
        })
        .unwrap();
    let (_, high) = r.timed(ct, TimerMethod::SharedPoll);
    let t_high = high.t26_31.unwrap();
    assert!(t_high + 6 >= remote_cost(6) + 15, "{t_high}");
    // One far line costs 8 cycles per extra hop over the near band edge.
    assert!(t_high >= t_low + 8 * (6 - 3) - 6, "gap {t_low} -> {t_high}");
}

#[test]
fn timer_times_out_without_writes() {
    let mut m = quiet();
    let mesh = m.mesh();
    let mut victim = Script::ops([Op::Mark(MARK_LAST_ROUND), Op::Compute(10)]);
    let mut timer = TimerProgram::new(
        PhysAddr(0x5000),
        TimerMethod::SharedPoll,
        0,
        MARK_LAST_ROUND,
        6,
        50,
    );
    let mut agents = [
        Agent::new(mesh.tile(0, 0), &mut victim),
        Agent::new(mesh.tile(1, 1), &mut timer),
    ];
    run_scenario(&mut m, &mut agents, &RunOptions::default()).unwrap();
    let r = timer.reading();
    assert!(r.timed_out());
    assert_eq!(r.poll_count, 50);
}

#[test]
fn prefetchw_timer_sees_both_writes() {
    let mut r = rig(|_, _| true);
    r.prepare();
    let (_, reading) = r.timed([5; 16], TimerMethod::Prefetchw);
    assert_eq!(reading.method, TimerMethod::Prefetchw);
    assert!(reading.t26_31.is_some());
}

use crate::machine::hop_distance;
