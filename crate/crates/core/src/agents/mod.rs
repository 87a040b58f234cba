//! Logical threads pinned to tiles, and the deterministic scheduler that
//! interleaves them on one [`SimMachine`].
//!
//! Every agent keeps a local clock. The scheduler always advances the agent
//! with the smallest local time (ties go to the lower agent index), so machine
//! operations are applied in global time order. An operation's effect on cache
//! state happens at its issue time; its cost advances the issuing agent only.

mod primitives;
mod timer;

use rustc_hash::FxHashMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::machine::{MemResult, PhysAddr, SimMachine, TileId};

pub use primitives::{evict_victim_l1, hold_llc, prime_l1_tables};
pub use timer::{TimerMethod, TimerProgram, TimerReading, PROBE_FAST, PROBE_SLOW};

/// One machine operation issued by an agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Op {
    Load(PhysAddr),
    /// Posted store: the agent pays one issue cycle; the coherence latency is
    /// recorded in the trace but does not stall the agent.
    Store(PhysAddr),
    PrefetchW(PhysAddr),
    /// Drops the agent's own L1 copy; costs one L1 access.
    FlushL1(PhysAddr),
    /// Four independent loads issued together: the cost is the slowest one.
    LoadGroup([PhysAddr; 4]),
    /// As `LoadGroup`, but the lines are not kept in the issuing L1.
    StreamGroup([PhysAddr; 4]),
    /// A load that also samples the two 32-bit words at `addr` and `addr + 4`.
    /// Costs at least one poll iteration.
    Poll(PhysAddr),
    Compute(u64),
    /// Zero-cost label other agents can wait on.
    Mark(u32),
}

/// What an agent does on its next turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Issue(Op),
    /// Block until agent `agent` has emitted `Mark(mark)`, then resume no
    /// earlier than that mark's time.
    WaitMark {
        agent: usize,
        mark: u32,
    },
    Done,
}

/// Result of an agent's previous operation, visible on its next turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub start: u64,
    pub cost: u64,
    /// The slowest access for grouped loads; `None` for compute/marks.
    pub result: Option<MemResult>,
    /// Store counts of the two polled words at issue time (`Op::Poll` only).
    pub words: Option<[u64; 2]>,
}

/// Read-only context handed to a program on each turn.
pub struct View<'a> {
    pub id: usize,
    pub tile: TileId,
    pub now: u64,
    pub last: Option<Outcome>,
    pub machine: &'a SimMachine,
}

pub trait Program {
    fn step(&mut self, view: &View<'_>) -> Step;
}

/// A fixed list of steps.
#[derive(Clone, Debug, Default)]
pub struct Script {
    steps: Vec<Step>,
    pos: usize,
}

impl Script {
    pub fn new(steps: Vec<Step>) -> Self {
        Self { steps, pos: 0 }
    }

    pub fn ops(ops: impl IntoIterator<Item = Op>) -> Self {
        Self::new(ops.into_iter().map(Step::Issue).collect())
    }
}

impl Program for Script {
    fn step(&mut self, _view: &View<'_>) -> Step {
        let s = self.steps.get(self.pos).copied().unwrap_or(Step::Done);
        self.pos += 1;
        s
    }
}

pub struct Agent<'p> {
    pub tile: TileId,
    pub program: &'p mut dyn Program,
}

impl<'p> Agent<'p> {
    pub fn new(tile: TileId, program: &'p mut dyn Program) -> Self {
        Self { tile, program }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub agent: usize,
    pub start: u64,
    pub op: Op,
    pub cost: u64,
    pub result: Option<MemResult>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub record_trace: bool,
    /// Stop once every runnable agent's clock is past this cycle.
    pub max_cycles: Option<u64>,
}

impl RunOptions {
    pub fn traced() -> Self {
        Self {
            record_trace: true,
            max_cycles: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub trace: Vec<TraceEntry>,
    /// Final local clock of every agent.
    pub end_times: Vec<u64>,
    /// `(mark, time)` emitted by each agent.
    pub marks: Vec<Vec<(u32, u64)>>,
    /// Turns granted to each agent.
    pub turns: Vec<u64>,
}

impl RunOutcome {
    pub fn mark_time(&self, agent: usize, mark: u32) -> Option<u64> {
        self.marks[agent]
            .iter()
            .rev()
            .find(|&&(m, _)| m == mark)
            .map(|&(_, t)| t)
    }

    pub fn makespan(&self) -> u64 {
        self.end_times.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Runnable,
    Blocked { agent: usize, mark: u32 },
    Done,
}

/// Runs all agents to completion (or to `opts.max_cycles`).
pub fn run_scenario(
    machine: &mut SimMachine,
    agents: &mut [Agent<'_>],
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let n = agents.len();
    let mesh = machine.mesh();
    if let Some(a) = agents.iter().find(|a| !mesh.contains(a.tile)) {
        return Err(Error::Precondition(format!(
            "agent tile {} outside mesh",
            a.tile
        )));
    }
    let mut time = vec![0u64; n];
    let mut state = vec![State::Runnable; n];
    let mut last: Vec<Option<Outcome>> = vec![None; n];
    // Latest time of each (agent, mark).
    let mut latest: FxHashMap<(usize, u32), u64> = FxHashMap::default();
    let mut out = RunOutcome {
        trace: Vec::new(),
        end_times: Vec::new(),
        marks: vec![Vec::new(); n],
        turns: vec![0; n],
    };

    loop {
        for i in 0..n {
            if let State::Blocked { agent, mark } = state[i] {
                if let Some(&t) = latest.get(&(agent, mark)) {
                    time[i] = time[i].max(t);
                    state[i] = State::Runnable;
                }
            }
        }
        let next = (0..n)
            .filter(|&i| state[i] == State::Runnable)
            .min_by_key(|&i| (time[i], i));
        let Some(i) = next else {
            if let Some(b) = (0..n).find(|&i| matches!(state[i], State::Blocked { .. })) {
                return Err(Error::Deadlock {
                    cycle: time.iter().copied().max().unwrap_or(0),
                    detail: format!("agent {b} is waiting on {:?} and nothing can run", state[b]),
                });
            }
            break;
        };
        if opts.max_cycles.is_some_and(|m| time[i] > m) {
            break;
        }
        out.turns[i] += 1;
        let step = {
            let view = View {
                id: i,
                tile: agents[i].tile,
                now: time[i],
                last: last[i],
                machine,
            };
            agents[i].program.step(&view)
        };
        match step {
            Step::Done => state[i] = State::Done,
            Step::WaitMark { agent, mark } => {
                if agent >= n || agent == i {
                    return Err(Error::Precondition(format!(
                        "agent {i} waits on invalid agent {agent}"
                    )));
                }
                state[i] = State::Blocked { agent, mark };
            }
            Step::Issue(op) => {
                let start = time[i];
                let o = execute(machine, agents[i].tile, op, start);
                if let Op::Mark(m) = op {
                    out.marks[i].push((m, start));
                    latest.insert((i, m), start);
                }
                time[i] += o.cost;
                if opts.record_trace {
                    out.trace.push(TraceEntry {
                        agent: i,
                        start,
                        op,
                        cost: o.cost,
                        result: o.result,
                    });
                }
                last[i] = Some(o);
            }
        }
    }
    out.end_times = time;
    Ok(out)
}

fn slowest(a: Option<MemResult>, b: MemResult) -> Option<MemResult> {
    match a {
        Some(a) if a.latency >= b.latency => Some(a),
        _ => Some(b),
    }
}

fn execute(m: &mut SimMachine, tile: TileId, op: Op, start: u64) -> Outcome {
    let mut words = None;
    let (cost, result) = match op {
        Op::Load(a) => {
            let r = m.load(tile, a);
            (r.latency, Some(r))
        }
        Op::Store(a) => (1, Some(m.store(tile, a))),
        Op::PrefetchW(a) => {
            let r = m.prefetchw_probe(tile, a);
            (r.latency, Some(r))
        }
        Op::FlushL1(a) => {
            m.flush_l1(tile, a);
            (m.config().lat_l1_hit, None)
        }
        Op::LoadGroup(addrs) | Op::StreamGroup(addrs) => {
            let mut worst: Option<MemResult> = None;
            for a in addrs {
                worst = slowest(worst, m.load(tile, a));
            }
            if matches!(op, Op::StreamGroup(_)) {
                for a in addrs {
                    m.flush_l1(tile, a);
                }
            }
            let r = worst.expect("four loads");
            (r.latency, Some(r))
        }
        Op::Poll(a) => {
            words = Some([m.word_version(a), m.word_version(a.offset(4))]);
            let r = m.load(tile, a);
            (r.latency.max(m.config().lat_poll_iter), Some(r))
        }
        Op::Compute(c) => (c, None),
        Op::Mark(_) => (0, None),
    };
    Outcome {
        start,
        cost,
        result,
        words,
    }
}

#[cfg(test)]
mod tests;
