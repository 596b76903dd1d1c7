//! Inter-CTA ring queue.
//!
//! [`QueueState`] is the acquire/release protocol as an explicit transition
//! system: one producer, one or more consumers, `depth` entries, and ordering
//! carried by per-entry sequence counters. Acquires that cannot proceed return
//! [`Acquire::Blocked`] instead of spinning so a simulator can turn the wait
//! into a stall. [`check`] explores every interleaving of small instances;
//! [`cost`] is the bandwidth/latency model used by the simulator.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub mod check;
pub mod cost;

pub use check::{explore, CheckConfig, CheckReport, Fault, Violation, ViolationKind};
pub use cost::{fabric_gbps, queue_cost, queue_cost_with_depth, FabricQueue, QueueCost, QueueCostModel};

/// Cache-line size each metadata cell is padded to.
pub const METADATA_LINE_BYTES: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Agent {
    Producer,
    Consumer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueError {
    NotProducer,
    NotConsumer,
    UnknownConsumer(usize),
    /// The agent already holds an entry it has not released.
    AlreadyHolding,
    ReleaseWithoutAcquire,
    DoubleRelease,
    WrongEntry { held: usize, released: usize },
}

impl fmt::Display for QueueError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueueError::NotProducer => f.write_str("write-side call by an agent that is not the producer"),
            QueueError::NotConsumer => f.write_str("read-side call by the producer"),
            QueueError::UnknownConsumer(c) => write!(f, "unknown consumer {c}"),
            QueueError::AlreadyHolding => f.write_str("acquire while already holding an entry"),
            QueueError::ReleaseWithoutAcquire => f.write_str("release without a matching acquire"),
            QueueError::DoubleRelease => f.write_str("entry released twice"),
            QueueError::WrongEntry { held, released } => {
                write!(f, "released entry {released} but holds entry {held}")
            }
        }
    }
}

/// Metadata word an agent spins on while blocked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetadataCell {
    /// Publish counter of an entry.
    Write(usize),
    /// Release counter of an entry for one consumer.
    Read { entry: usize, consumer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Acquire {
    Granted { entry: usize, seq: u64 },
    Blocked { seq: u64, waiting_on: MetadataCell },
}

impl Acquire {
    pub fn entry(self) -> Option<usize> {
        match self {
            Acquire::Granted { entry, .. } => Some(entry),
            Acquire::Blocked { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueueState {
    depth: u32,
    payload_bytes: u64,
    /// Times each entry has been published.
    published: Vec<u64>,
    /// Times each entry has been released, per consumer: `released[e][c]`.
    released: Vec<Vec<u64>>,
    producer_next: u64,
    producer_holding: Option<u64>,
    producer_last: Option<usize>,
    consumer_next: Vec<u64>,
    consumer_holding: Vec<Option<u64>>,
    consumer_last: Vec<Option<usize>>,
}

impl QueueState {
    /// Panics if `depth < 1` or `consumers < 1`.
    pub fn new(depth: u32, payload_bytes: u64, consumers: usize) -> Self {
        assert!(depth >= 1 && consumers >= 1, "queue needs an entry and a consumer");
        let d = depth as usize;
        Self {
            depth,
            payload_bytes,
            published: vec![0; d],
            released: vec![vec![0; consumers]; d],
            producer_next: 0,
            producer_holding: None,
            producer_last: None,
            consumer_next: vec![0; consumers],
            consumer_holding: vec![None; consumers],
            consumer_last: vec![None; consumers],
        }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn consumers(&self) -> usize {
        self.consumer_next.len()
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload_bytes
    }

    /// Next sequence number the producer will write.
    pub fn producer_seq(&self) -> u64 {
        self.producer_next
    }

    /// Number of sequence numbers consumer `c` has released.
    pub fn consumer_released(&self, c: usize) -> u64 {
        self.consumer_next[c]
    }

    pub fn entry_of(&self, seq: u64) -> usize {
        (seq % u64::from(self.depth)) as usize
    }

    /// Lap of the ring a sequence number falls in.
    fn lap(&self, seq: u64) -> u64 {
        seq / u64::from(self.depth)
    }

    pub fn metadata_bytes(&self) -> u64 {
        u64::from(self.depth) * (1 + self.consumers() as u64) * METADATA_LINE_BYTES
    }

    /// L2 bytes the queue pins: payload ring plus padded metadata.
    pub fn footprint_bytes(&self) -> u64 {
        u64::from(self.depth) * self.payload_bytes + self.metadata_bytes()
    }

    fn check_consumer(&self, c: usize) -> Result<(), QueueError> {
        if c < self.consumers() {
            Ok(())
        } else {
            Err(QueueError::UnknownConsumer(c))
        }
    }

    pub fn wr_acquire(&mut self, agent: Agent) -> Result<Acquire, QueueError> {
        self.wr_acquire_inner(agent, true)
    }

    pub(crate) fn wr_acquire_inner(&mut self, agent: Agent, check_consumers: bool) -> Result<Acquire, QueueError> {
        if agent != Agent::Producer {
            return Err(QueueError::NotProducer);
        }
        if self.producer_holding.is_some() {
            return Err(QueueError::AlreadyHolding);
        }
        let seq = self.producer_next;
        let entry = self.entry_of(seq);
        // Every consumer must have released the previous lap of this entry.
        if check_consumers {
            let needed = self.lap(seq);
            if let Some(c) = (0..self.consumers()).find(|&c| self.released[entry][c] < needed) {
                return Ok(Acquire::Blocked { seq, waiting_on: MetadataCell::Read { entry, consumer: c } });
            }
        }
        self.producer_holding = Some(seq);
        Ok(Acquire::Granted { entry, seq })
    }

    pub fn wr_release(&mut self, entry: usize) -> Result<(), QueueError> {
        match self.producer_holding {
            None if self.producer_last == Some(entry) => Err(QueueError::DoubleRelease),
            None => Err(QueueError::ReleaseWithoutAcquire),
            Some(seq) if self.entry_of(seq) != entry => {
                Err(QueueError::WrongEntry { held: self.entry_of(seq), released: entry })
            }
            Some(_) => {
                self.published[entry] += 1;
                self.producer_next += 1;
                self.producer_holding = None;
                self.producer_last = Some(entry);
                Ok(())
            }
        }
    }

    pub fn rd_acquire(&mut self, consumer: usize) -> Result<Acquire, QueueError> {
        self.rd_acquire_inner(consumer, true)
    }

    pub(crate) fn rd_acquire_inner(&mut self, consumer: usize, check_publish: bool) -> Result<Acquire, QueueError> {
        self.check_consumer(consumer)?;
        if self.consumer_holding[consumer].is_some() {
            return Err(QueueError::AlreadyHolding);
        }
        let seq = self.consumer_next[consumer];
        let entry = self.entry_of(seq);
        if check_publish && self.published[entry] <= self.lap(seq) {
            return Ok(Acquire::Blocked { seq, waiting_on: MetadataCell::Write(entry) });
        }
        self.consumer_holding[consumer] = Some(seq);
        Ok(Acquire::Granted { entry, seq })
    }

    pub fn rd_release(&mut self, consumer: usize, entry: usize) -> Result<(), QueueError> {
        self.check_consumer(consumer)?;
        match self.consumer_holding[consumer] {
            None if self.consumer_last[consumer] == Some(entry) => Err(QueueError::DoubleRelease),
            None => Err(QueueError::ReleaseWithoutAcquire),
            Some(seq) if self.entry_of(seq) != entry => {
                Err(QueueError::WrongEntry { held: self.entry_of(seq), released: entry })
            }
            Some(_) => {
                self.released[entry][consumer] += 1;
                self.consumer_next[consumer] += 1;
                self.consumer_holding[consumer] = None;
                self.consumer_last[consumer] = Some(entry);
                Ok(())
            }
        }
    }

    /// Whether `wr_acquire` would be granted now.
    pub fn wr_ready(&self) -> bool {
        let seq = self.producer_next;
        let entry = self.entry_of(seq);
        self.producer_holding.is_none() && self.released[entry].iter().all(|&r| r >= self.lap(seq))
    }

    /// Whether `rd_acquire(consumer)` would be granted now.
    pub fn rd_ready(&self, consumer: usize) -> bool {
        let Some(&seq) = self.consumer_next.get(consumer) else { return false };
        self.consumer_holding[consumer].is_none() && self.published[self.entry_of(seq)] > self.lap(seq)
    }

    /// Agent-generic acquire.
    pub fn acquire(&mut self, agent: Agent) -> Result<Acquire, QueueError> {
        match agent {
            Agent::Producer => self.wr_acquire(agent),
            Agent::Consumer(c) => self.rd_acquire(c),
        }
    }

    pub fn release(&mut self, agent: Agent, entry: usize) -> Result<(), QueueError> {
        match agent {
            Agent::Producer => self.wr_release(entry),
            Agent::Consumer(c) => self.rd_release(c, entry),
        }
    }

    /// Checks the structural invariants; returns a description of the first
    /// broken one.
    pub fn check_invariants(&self) -> Result<(), &'static str> {
        let min_released = self.consumer_next.iter().copied().min().unwrap_or(0);
        let in_flight = self.producer_next + u64::from(self.producer_holding.is_some());
        if in_flight < min_released {
            return Err("a consumer released a sequence number that was never written");
        }
        if in_flight - min_released > u64::from(self.depth) {
            return Err("producer is more than `depth` entries ahead of the slowest consumer");
        }
        for (c, &next) in self.consumer_next.iter().enumerate() {
            let read = next + u64::from(self.consumer_holding[c].is_some());
            if read > self.producer_next {
                return Err("consumer holds a sequence number that has not been published");
            }
        }
        for e in 0..self.depth as usize {
            let expected = (self.producer_next + u64::from(self.depth) - 1 - e as u64) / u64::from(self.depth);
            if self.published[e] != expected {
                return Err("entry publish counter disagrees with the producer sequence");
            }
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn force_released(&mut self, entry: usize, consumer: usize, count: u64) {
        self.released[entry][consumer] = count;
    }

    #[cfg(test)]
    pub(crate) fn force_producer(&mut self, next: u64) {
        self.producer_next = next;
        let d = u64::from(self.depth);
        for e in 0..self.depth as usize {
            self.published[e] = (next + d - 1 - e as u64) / d;
        }
    }
}
