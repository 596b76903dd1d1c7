//! Exhaustive interleaving exploration of the queue protocol.
//!
//! One producer writes `items` payloads; every consumer reads all of them.
//! Each agent's loop is split into acquire, data access and release steps, and
//! every interleaving of those steps is explored (states are deduplicated).
//! A ghost copy of the ring contents detects overwrites of unconsumed data,
//! reads of unpublished data, and out-of-order or duplicate delivery.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Acquire, Agent, MetadataCell, QueueState};

/// Deliberate protocol bugs, for checking that the explorer finds them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Fault {
    #[default]
    None,
    /// Producer does not wait for consumers to release the previous lap.
    SkipConsumerCheck,
    /// Consumer does not wait for the entry to be published.
    SkipPublishCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub consumers: usize,
    pub depth: u32,
    pub items: u64,
    #[serde(default)]
    pub fault: Fault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    OverwriteBeforeConsume,
    ReadBeforePublish,
    OutOfOrder { expected: u64, got: Option<u64> },
    Deadlock,
    /// More than one agent spinning on one metadata cell of a 1P1C queue.
    MultipleSpinners,
    Invariant(String),
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Actions from the initial state to the violating state.
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub config: CheckConfig,
    pub states: usize,
    pub transitions: usize,
    pub terminal_states: usize,
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pc {
    Idle,
    Acquired { entry: usize, seq: u64 },
    Accessed { entry: usize, seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct World {
    queue: QueueState,
    producer_done: u64,
    producer_pc: Pc,
    consumer_done: Vec<u64>,
    consumer_pc: Vec<Pc>,
    /// Ghost ring contents.
    buffer: Vec<Option<u64>>,
    /// `unread[e][c]`: consumer `c` has not read the value now in entry `e`.
    unread: Vec<Vec<bool>>,
}

enum Step {
    Moved(Box<World>, String),
    Blocked(MetadataCell),
    Done,
    Bad(ViolationKind, String),
}

const MAX_VIOLATIONS: usize = 16;

pub fn explore(cfg: &CheckConfig) -> CheckReport {
    let d = cfg.depth as usize;
    let init = World {
        queue: QueueState::new(cfg.depth, 1, cfg.consumers),
        producer_done: 0,
        producer_pc: Pc::Idle,
        consumer_done: vec![0; cfg.consumers],
        consumer_pc: vec![Pc::Idle; cfg.consumers],
        buffer: vec![None; d],
        unread: vec![vec![false; cfg.consumers]; d],
    };
    let mut ids: BTreeMap<World, usize> = BTreeMap::new();
    let mut parent: Vec<Option<(usize, String)>> = vec![None];
    let mut worlds: Vec<World> = vec![init.clone()];
    ids.insert(init, 0);
    let mut frontier = VecDeque::from([0usize]);
    let mut report = CheckReport {
        config: *cfg,
        states: 0,
        transitions: 0,
        terminal_states: 0,
        violations: Vec::new(),
    };
    let mut seen_kinds: BTreeSet<String> = BTreeSet::new();

    let trace_to = |parent: &[Option<(usize, String)>], mut id: usize, last: Option<String>| -> Vec<String> {
        let mut t: Vec<String> = last.into_iter().collect();
        while let Some((p, action)) = &parent[id] {
            t.push(action.clone());
            id = *p;
        }
        t.reverse();
        t
    };

    while let Some(id) = frontier.pop_front() {
        report.states += 1;
        let world = worlds[id].clone();
        let mut record = |report: &mut CheckReport, kind: ViolationKind, trace: Vec<String>| {
            let key = format!("{kind:?}");
            let tag = key.split(['{', '(']).next().unwrap_or("").into();
            if report.violations.len() < MAX_VIOLATIONS && seen_kinds.insert(tag) {
                report.violations.push(Violation { kind, trace });
            }
        };

        if let Err(msg) = world.queue.check_invariants() {
            record(&mut report, ViolationKind::Invariant(msg.into()), trace_to(&parent, id, None));
            continue;
        }

        let mut agents = vec![Agent::Producer];
        agents.extend((0..cfg.consumers).map(Agent::Consumer));
        let mut moved = false;
        let mut all_done = true;
        let mut spinners: BTreeMap<MetadataCell, usize> = BTreeMap::new();
        for agent in agents {
            match step(&world, agent, cfg) {
                Step::Done => {}
                Step::Blocked(cell) => {
                    all_done = false;
                    *spinners.entry(cell).or_default() += 1;
                }
                Step::Bad(kind, action) => {
                    all_done = false;
                    record(&mut report, kind, trace_to(&parent, id, Some(action)));
                }
                Step::Moved(next, action) => {
                    let next = *next;
                    all_done = false;
                    moved = true;
                    report.transitions += 1;
                    if !ids.contains_key(&next) {
                        let nid = worlds.len();
                        ids.insert(next.clone(), nid);
                        worlds.push(next);
                        parent.push(Some((id, action)));
                        frontier.push_back(nid);
                    }
                }
            }
        }
        if cfg.consumers == 1 && spinners.values().any(|&n| n > 1) {
            record(&mut report, ViolationKind::MultipleSpinners, trace_to(&parent, id, None));
        }
        if all_done {
            report.terminal_states += 1;
        } else if !moved {
            record(&mut report, ViolationKind::Deadlock, trace_to(&parent, id, None));
        }
    }
    report
}

fn step(w: &World, agent: Agent, cfg: &CheckConfig) -> Step {
    let mut next = w.clone();
    match agent {
        Agent::Producer => {
            if w.producer_done == cfg.items && w.producer_pc == Pc::Idle {
                return Step::Done;
            }
            match w.producer_pc {
                Pc::Idle => {
                    let r = next.queue.wr_acquire_inner(Agent::Producer, cfg.fault != Fault::SkipConsumerCheck);
                    match r {
                        Ok(Acquire::Granted { entry, seq }) => {
                            next.producer_pc = Pc::Acquired { entry, seq };
                            Step::Moved(Box::new(next), format!("P: wr_acquire seq {seq} -> entry {entry}"))
                        }
                        Ok(Acquire::Blocked { waiting_on, .. }) => Step::Blocked(waiting_on),
                        Err(e) => Step::Bad(ViolationKind::Protocol(format!("{e}")), "P: wr_acquire".into()),
                    }
                }
                Pc::Acquired { entry, seq } => {
                    let action = format!("P: write item {seq} into entry {entry}");
                    if next.unread[entry].iter().any(|&u| u) {
                        return Step::Bad(ViolationKind::OverwriteBeforeConsume, action);
                    }
                    next.buffer[entry] = Some(seq);
                    next.unread[entry] = vec![true; cfg.consumers];
                    next.producer_pc = Pc::Accessed { entry, seq };
                    Step::Moved(Box::new(next), action)
                }
                Pc::Accessed { entry, seq } => match next.queue.wr_release(entry) {
                    Ok(()) => {
                        next.producer_pc = Pc::Idle;
                        next.producer_done += 1;
                        Step::Moved(Box::new(next), format!("P: wr_release seq {seq}"))
                    }
                    Err(e) => Step::Bad(ViolationKind::Protocol(format!("{e}")), "P: wr_release".into()),
                },
            }
        }
        Agent::Consumer(c) => {
            if w.consumer_done[c] == cfg.items && w.consumer_pc[c] == Pc::Idle {
                return Step::Done;
            }
            match w.consumer_pc[c] {
                Pc::Idle => {
                    let r = next.queue.rd_acquire_inner(c, cfg.fault != Fault::SkipPublishCheck);
                    match r {
                        Ok(Acquire::Granted { entry, seq }) => {
                            next.consumer_pc[c] = Pc::Acquired { entry, seq };
                            Step::Moved(Box::new(next), format!("C{c}: rd_acquire seq {seq} -> entry {entry}"))
                        }
                        Ok(Acquire::Blocked { waiting_on, .. }) => Step::Blocked(waiting_on),
                        Err(e) => Step::Bad(ViolationKind::Protocol(format!("{e}")), format!("C{c}: rd_acquire")),
                    }
                }
                Pc::Acquired { entry, seq } => {
                    let action = format!("C{c}: read entry {entry}");
                    let expected = w.consumer_done[c];
                    let got = w.buffer[entry];
                    let published = match w.producer_pc {
                        Pc::Acquired { entry: pe, .. } | Pc::Accessed { entry: pe, .. } => pe != entry,
                        Pc::Idle => true,
                    };
                    if !published || got.is_none() || got.is_some_and(|v| v < expected) {
                        return Step::Bad(ViolationKind::ReadBeforePublish, action);
                    }
                    if got != Some(expected) || seq != expected || !w.unread[entry][c] {
                        return Step::Bad(ViolationKind::OutOfOrder { expected, got }, action);
                    }
                    next.unread[entry][c] = false;
                    next.consumer_pc[c] = Pc::Accessed { entry, seq };
                    Step::Moved(Box::new(next), action)
                }
                Pc::Accessed { entry, seq } => match next.queue.rd_release(c, entry) {
                    Ok(()) => {
                        next.consumer_pc[c] = Pc::Idle;
                        next.consumer_done[c] += 1;
                        Step::Moved(Box::new(next), format!("C{c}: rd_release seq {seq}"))
                    }
                    Err(e) => Step::Bad(ViolationKind::Protocol(format!("{e}")), format!("C{c}: rd_release")),
                },
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instances_are_safe_and_live() {
        for consumers in [1, 2] {
            for depth in [2, 3] {
                let r = explore(&CheckConfig { consumers, depth, items: 4, fault: Fault::None });
                assert!(r.passed(), "{consumers}C depth {depth}: {:?}", r.violations);
                assert_eq!(r.terminal_states, 1);
                assert!(r.states > 10);
            }
        }
    }

    #[test]
    fn missing_consumer_check_is_caught() {
        let r = explore(&CheckConfig { consumers: 1, depth: 2, items: 4, fault: Fault::SkipConsumerCheck });
        assert!(!r.passed());
        assert!(r.violations.iter().any(|v| matches!(
            v.kind,
            ViolationKind::OverwriteBeforeConsume | ViolationKind::Invariant(_)
        )));
        assert!(r.violations.iter().all(|v| !v.trace.is_empty()));
    }

    #[test]
    fn missing_publish_check_is_caught() {
        let r = explore(&CheckConfig { consumers: 2, depth: 2, items: 3, fault: Fault::SkipPublishCheck });
        assert!(r.violations.iter().any(|v| matches!(
            v.kind,
            ViolationKind::ReadBeforePublish | ViolationKind::Invariant(_)
        )));
    }
}
