//! Discrete-event message delivery with per-link delay, random drops and
//! FIFO order on every directed link.
//!
//! Events are delivered in `(deliver_at, seq, src, dst)` order, where `seq`
//! is a global send counter, so a run is a pure function of its seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_from_seed, SimRng};

pub type NodeId = u32;
pub type Tick = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("drop probability {0} outside [0, 1)")]
    DropProb(f64),
    #[error("uniform delay bounds {min}..={max} are inverted")]
    DelayBounds { min: Tick, max: Tick },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayModel {
    Constant { ticks: Tick },
    Uniform { min: Tick, max: Tick },
    PerLink { default: Tick, links: BTreeMap<String, Tick> },
}

impl Default for DelayModel {
    fn default() -> Self {
        Self::Constant { ticks: 1 }
    }
}

impl DelayModel {
    /// Largest delay the model can produce.
    pub fn max_delay(&self) -> Tick {
        match self {
            Self::Constant { ticks } => *ticks,
            Self::Uniform { max, .. } => *max,
            Self::PerLink { default, links } => links.values().copied().fold(*default, Tick::max),
        }
    }

    fn draw(&self, src: NodeId, dst: NodeId, rng: &mut SimRng) -> Tick {
        match self {
            Self::Constant { ticks } => *ticks,
            Self::Uniform { min, max } => rng.random_range(*min..=*max),
            Self::PerLink { default, links } => *links.get(&format!("{src}-{dst}")).unwrap_or(default),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub delay: DelayModel,
    pub drop_prob: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { delay: DelayModel::default(), drop_prob: 0.0 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(NetError::DropProb(self.drop_prob));
        }
        if let DelayModel::Uniform { min, max } = self.delay {
            if min > max {
                return Err(NetError::DelayBounds { min, max });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub deliver_at: Tick,
    pub seq: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: P,
}

impl<P> Event<P> {
    fn key(&self) -> (Tick, u64, NodeId, NodeId) {
        (self.deliver_at, self.seq, self.src, self.dst)
    }
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.key() == other.0.key()
    }
}
impl<P> Eq for Queued<P> {}
impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.key().cmp(&self.0.key())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
    pub timers: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: Tick,
    pub event: &'static str,
    pub seq: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub msg: String,
}

pub struct Network<P> {
    cfg: NetConfig,
    rng: SimRng,
    queue: BinaryHeap<Queued<P>>,
    next_seq: u64,
    link_last: HashMap<(NodeId, NodeId), Tick>,
    cancelled: HashSet<u64>,
    now: Tick,
    stats: NetStats,
    trace: Option<(fn(&P) -> String, Vec<TraceRecord>)>,
}

impl<P> Network<P> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng: rng_from_seed(seed),
            queue: BinaryHeap::new(),
            next_seq: 0,
            link_last: HashMap::new(),
            cancelled: HashSet::new(),
            now: 0,
            stats: NetStats::default(),
            trace: None,
        })
    }

    /// Records sends, drops and deliveries, labelling payloads with `label`.
    pub fn enable_trace(&mut self, label: fn(&P) -> String) {
        self.trace = Some((label, Vec::new()));
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn is_empty(&mut self) -> bool {
        self.skip_cancelled();
        self.queue.is_empty()
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn peek_time(&mut self) -> Option<Tick> {
        self.skip_cancelled();
        self.queue.peek().map(|q| q.0.deliver_at)
    }

    /// Withdraws a queued event. Cancelled events never advance the clock.
    pub fn cancel(&mut self, seq: u64) {
        if seq < self.next_seq && self.queue.iter().any(|q| q.0.seq == seq) {
            self.cancelled.insert(seq);
        }
    }

    fn skip_cancelled(&mut self) {
        while let Some(top) = self.queue.peek() {
            if !self.cancelled.remove(&top.0.seq) {
                break;
            }
            self.queue.pop();
        }
    }

    fn record(&mut self, t: Tick, event: &'static str, seq: u64, src: NodeId, dst: NodeId, payload: &P) {
        if let Some((label, records)) = &mut self.trace {
            records.push(TraceRecord { t, event, seq, src, dst, msg: label(payload) });
        }
    }

    fn push(&mut self, deliver_at: Tick, src: NodeId, dst: NodeId, payload: P) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(Event { deliver_at, seq, src, dst, payload }));
        seq
    }

    /// Sends one message at the current time. Returns its sequence number,
    /// or `None` if the message was dropped.
    pub fn send(&mut self, src: NodeId, dst: NodeId, payload: P) -> Option<u64> {
        self.stats.sent += 1;
        if self.cfg.drop_prob > 0.0 && self.rng.random::<f64>() < self.cfg.drop_prob {
            self.stats.dropped += 1;
            let seq = self.next_seq;
            self.next_seq += 1;
            self.record(self.now, "drop", seq, src, dst, &payload);
            return None;
        }
        let drawn = self.now + self.cfg.delay.draw(src, dst, &mut self.rng);
        let last = self.link_last.entry((src, dst)).or_insert(0);
        let at = drawn.max(*last);
        *last = at;
        let msg = self.trace.as_ref().map(|(label, _)| label(&payload));
        let now = self.now;
        let seq = self.push(at, src, dst, payload);
        if let (Some(msg), Some((_, records))) = (msg, &mut self.trace) {
            records.push(TraceRecord { t: now, event: "send", seq, src, dst, msg });
        }
        Some(seq)
    }

    /// Sends a copy to every destination in ascending id order, skipping `src`.
    /// Returns the number of copies that were not dropped.
    pub fn broadcast(&mut self, src: NodeId, dsts: impl IntoIterator<Item = NodeId>, payload: &P) -> usize
    where
        P: Clone,
    {
        let mut targets: Vec<NodeId> = dsts.into_iter().filter(|&d| d != src).collect();
        targets.sort_unstable();
        targets.dedup();
        targets.into_iter().filter_map(|d| self.send(src, d, payload.clone())).count()
    }

    /// Schedules a timer for `node` at absolute time `at`; timers are never dropped.
    pub fn schedule_local(&mut self, at: Tick, node: NodeId, payload: P) -> u64 {
        self.stats.timers += 1;
        self.push(at.max(self.now), node, node, payload)
    }

    /// Removes the next event and advances the clock to its delivery time.
    pub fn pop(&mut self) -> Option<Event<P>> {
        self.skip_cancelled();
        let Queued(ev) = self.queue.pop()?;
        self.now = ev.deliver_at;
        if ev.src != ev.dst {
            self.stats.delivered += 1;
        }
        self.record(ev.deliver_at, "deliver", ev.seq, ev.src, ev.dst, &ev.payload);
        Some(ev)
    }

    /// Pops the next event if it is due no later than `until`.
    pub fn pop_until(&mut self, until: Tick) -> Option<Event<P>> {
        if self.peek_time()? <= until {
            self.pop()
        } else {
            None
        }
    }

    /// Moves the clock forward without delivering anything.
    pub fn advance_to(&mut self, t: Tick) {
        self.now = self.now.max(t);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_ref().map(|(_, r)| r.as_slice()).unwrap_or(&[])
    }

    pub fn write_trace<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in self.trace() {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
