use serde::{Deserialize, Serialize};

use super::{Op, Program, Step, View};
use crate::machine::PhysAddr;

/// A PREFETCHW probe slower than this saw a remote modification.
pub const PROBE_SLOW: u64 = 150;
/// A PREFETCHW probe faster than this saw the line still owned.
pub const PROBE_FAST: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimerMethod {
    /// Read the out line in a loop and compare word values.
    SharedPoll,
    /// Probe ownership of the out line and threshold the probe latency.
    Prefetchw,
}

/// Interval between the observed modification of `out` and of `out + 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TimerReading {
    /// `None` when the victim did not write both words within the poll budget.
    pub t26_31: Option<u64>,
    pub poll_count: u64,
    pub method: TimerMethod,
}

impl TimerReading {
    pub fn timed_out(&self) -> bool {
        self.t26_31.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Arm,
    Watch,
    Finished,
}

/// Waits for the victim's start mark, then watches the out line.
///
/// For `SharedPoll` each iteration costs at least `poll` cycles; observations
/// are the completion times of the polls that first saw each word change, so
/// the reported interval is quantized to `poll`. For `Prefetchw` a probe
/// slower than [`PROBE_SLOW`] counts as one observed write.
#[derive(Clone, Debug)]
pub struct TimerProgram {
    out: PhysAddr,
    method: TimerMethod,
    victim: usize,
    start_mark: u32,
    max_polls: u64,
    poll: u64,
    phase: Phase,
    baseline: Option<[u64; 2]>,
    obs: [Option<u64>; 2],
    polls: u64,
}

impl TimerProgram {
    pub fn new(
        out: PhysAddr,
        method: TimerMethod,
        victim: usize,
        start_mark: u32,
        poll: u64,
        max_polls: u64,
    ) -> Self {
        Self {
            out,
            method,
            victim,
            start_mark,
            max_polls,
            poll,
            phase: Phase::Arm,
            baseline: None,
            obs: [None; 2],
            polls: 0,
        }
    }

    pub fn reading(&self) -> TimerReading {
        let t = match self.obs {
            [Some(a), Some(b)] => {
                let d = b.saturating_sub(a);
                Some(match self.method {
                    TimerMethod::SharedPoll => d / self.poll * self.poll,
                    TimerMethod::Prefetchw => d,
                })
            }
            _ => None,
        };
        TimerReading {
            t26_31: t,
            poll_count: self.polls,
            method: self.method,
        }
    }

    fn observe(&mut self, view: &View<'_>) {
        let Some(last) = view.last else { return };
        let done_at = last.start + last.cost;
        match self.method {
            TimerMethod::SharedPoll => {
                let Some(words) = last.words else { return };
                let base = *self.baseline.get_or_insert(words);
                for k in 0..2 {
                    if self.obs[k].is_none() && words[k] != base[k] {
                        self.obs[k] = Some(done_at);
                    }
                }
                // A later word implies the earlier one was written first.
                if self.obs[1].is_some() && self.obs[0].is_none() {
                    self.obs[0] = self.obs[1];
                }
            }
            TimerMethod::Prefetchw => {
                let Some(r) = last.result else { return };
                // The first probe only takes ownership.
                if self.polls > 1 && r.latency > PROBE_SLOW {
                    let k = usize::from(self.obs[0].is_some());
                    self.obs[k] = Some(done_at);
                }
            }
        }
    }
}

impl Program for TimerProgram {
    fn step(&mut self, view: &View<'_>) -> Step {
        match self.phase {
            Phase::Arm => {
                self.phase = Phase::Watch;
                Step::WaitMark {
                    agent: self.victim,
                    mark: self.start_mark,
                }
            }
            Phase::Watch => {
                if self.polls > 0 {
                    self.observe(view);
                }
                if self.obs[1].is_some() || self.polls >= self.max_polls {
                    self.phase = Phase::Finished;
                    return Step::Done;
                }
                self.polls += 1;
                match self.method {
                    TimerMethod::SharedPoll => Step::Issue(Op::Poll(self.out)),
                    TimerMethod::Prefetchw => Step::Issue(Op::PrefetchW(self.out)),
                }
            }
            Phase::Finished => Step::Done,
        }
    }
}
