//! Deterministic discrete-event core.
//!
//! Events pop in `(time, seq)` order; `seq` is assigned at scheduling time,
//! so two runs that schedule the same events in the same order process them
//! identically. Randomness comes from per-node [`RngStream`]s.
//!
//! # Generator
//!
//! Streams use SplitMix64 so that other implementations can reproduce them
//! bit for bit:
//!
//! ```text
//! GOLDEN = 0x9E3779B97F4A7C15
//! mix(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!          z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!          z ^ (z >> 31)
//! init(run_seed, node):  state = mix(run_seed + GOLDEN * (node + 1))
//! next():                state = state + GOLDEN; return mix(state)
//! ```
//!
//! All arithmetic wraps modulo 2^64. `draw_uniform(bound)` rejects raw
//! values below `(2^64 - bound) mod bound` and returns `x mod bound`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::frame::{Frame, NodeId};

/// Simulation time in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs(s: u64) -> SimTime {
        SimTime(s * 1000)
    }

    pub fn ms(self) -> u64 {
        self.0
    }

    pub fn plus(self, ms: u64) -> SimTime {
        SimTime(self.0.saturating_add(ms))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// What a timer was armed for. `handshake` ties a timer to the exchange
/// that armed it, so stale timers can be recognised and ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerTag {
    /// Forwarder-selection deadline after an RTS.
    ResponseWait { handshake: u32 },
    /// Deadline for the ACK of a data frame.
    AckWait { handshake: u32 },
    /// End of a binary-exponential backoff.
    BackoffDone { handshake: u32 },
    /// Delayed reply to an RTS heard from `to`.
    SendResponse { to: NodeId },
    /// CSMA random backoff elapsed; start clear-channel assessment.
    CsmaBackoff { job: u64 },
    /// Clear-channel assessment window closed.
    CsmaCca { job: u64 },
    /// A traffic source produces its next packet.
    Generate,
}

impl TimerTag {
    pub fn name(&self) -> &'static str {
        match self {
            TimerTag::ResponseWait { .. } => "ResponseWait",
            TimerTag::AckWait { .. } => "AckWait",
            TimerTag::BackoffDone { .. } => "BackoffDone",
            TimerTag::SendResponse { .. } => "SendResponse",
            TimerTag::CsmaBackoff { .. } => "CsmaBackoff",
            TimerTag::CsmaCca { .. } => "CsmaCca",
            TimerTag::Generate => "Generate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// The last bit of `frame` from `tx` reaches `rx`. `tx_id` names the
    /// transmission so the medium can adjudicate interference.
    FrameArrival {
        rx: NodeId,
        tx: NodeId,
        frame: Frame,
        tx_id: u64,
    },
    TimerFire { node: NodeId, tag: TimerTag },
    DecisionEpoch { node: NodeId },
    BeaconTick,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::FrameArrival { .. } => "FrameArrival",
            EventKind::TimerFire { .. } => "TimerFire",
            EventKind::DecisionEpoch { .. } => "DecisionEpoch",
            EventKind::BeaconTick => "BeaconTick",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl Event {
    /// One trace line: time, kind, node, and frame type or timer tag.
    pub fn trace_line(&self) -> String {
        let mut s = String::with_capacity(48);
        let _ = write!(s, "{}\t{}", self.time, self.kind.name());
        match &self.kind {
            EventKind::FrameArrival { rx, tx, frame, .. } => {
                let _ = write!(s, "\t{}\t{}<-{}", rx, frame.message_type(), tx);
            }
            EventKind::TimerFire { node, tag } => {
                let _ = write!(s, "\t{}\t{}", node, tag.name());
            }
            EventKind::DecisionEpoch { node } => {
                let _ = write!(s, "\t{}\t-", node);
            }
            EventKind::BeaconTick => s.push_str("\t-\t-"),
        }
        s
    }
}

struct Queued(Event);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.time, other.0.seq).cmp(&(self.0.time, self.0.seq))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("event at {at} ms is before the current time {now} ms")]
    PastEvent { at: SimTime, now: SimTime },
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-node SplitMix64 stream derived from `(run_seed, node)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
    draws: u64,
}

impl RngStream {
    pub fn new(run_seed: u64, node: NodeId) -> Self {
        let init = run_seed.wrapping_add(GOLDEN.wrapping_mul(u64::from(node.0) + 1));
        RngStream {
            state: mix64(init),
            draws: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        self.draws += 1;
        mix64(self.state)
    }

    /// Uniform integer in `[0, bound)`.
    pub fn draw_uniform(&mut self, bound: u64) -> u64 {
        assert!(bound >= 1, "draw_uniform bound must be >= 1");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % bound;
            }
        }
    }

    /// Uniform integer in `[-half_width, half_width]`.
    pub fn draw_symmetric(&mut self, half_width: u16) -> i16 {
        if half_width == 0 {
            return 0;
        }
        let span = 2 * u64::from(half_width) + 1;
        (self.draw_uniform(span) as i64 - i64::from(half_width)) as i16
    }

    /// Number of raw 64-bit values consumed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }
}

/// Event queue, clock and the per-node random streams of one run.
pub struct Engine {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Queued>,
    seed: u64,
    streams: BTreeMap<NodeId, RngStream>,
    scheduled: u64,
    processed: u64,
    last_popped: Option<(SimTime, u64)>,
    trace: Option<String>,
}

impl Engine {
    pub fn new(seed: u64) -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            seed,
            streams: BTreeMap::new(),
            scheduled: 0,
            processed: 0,
            last_popped: None,
            trace: None,
        }
    }

    /// Records one line per processed event from now on.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(String::new);
    }

    pub fn trace(&self) -> Option<&str> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<String> {
        self.trace.take()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scheduled(&self) -> u64 {
        self.scheduled
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind) -> Result<u64, EngineError> {
        if time < self.now {
            return Err(EngineError::PastEvent { at: time, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.scheduled += 1;
        self.queue.push(Queued(Event { time, seq, kind }));
        Ok(seq)
    }

    /// Schedules `delay_ms` after the current time; never in the past.
    pub fn schedule_in(&mut self, delay_ms: u64, kind: EventKind) -> u64 {
        let at = self.now.plus(delay_ms);
        self.schedule(at, kind).expect("relative event cannot be in the past")
    }

    /// Pops the next event if it is due at or before `horizon`.
    pub fn pop_until(&mut self, horizon: SimTime) -> Option<Event> {
        let due = matches!(self.queue.peek(), Some(Queued(e)) if e.time <= horizon);
        if !due {
            return None;
        }
        let Queued(ev) = self.queue.pop()?;
        debug_assert!(
            self.last_popped.map_or(true, |last| last < (ev.time, ev.seq)),
            "event processed out of order"
        );
        self.last_popped = Some((ev.time, ev.seq));
        self.now = ev.time;
        self.processed += 1;
        if let Some(t) = self.trace.as_mut() {
            t.push_str(&ev.trace_line());
            t.push('\n');
        }
        Some(ev)
    }

    /// Processes events in order until the queue drains or the next event
    /// lies beyond `horizon`, then advances the clock to `horizon`.
    pub fn run_until<F>(&mut self, horizon: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Engine, Event),
    {
        let mut count = 0;
        while let Some(ev) = self.pop_until(horizon) {
            handler(self, ev);
            count += 1;
        }
        if horizon > self.now {
            self.now = horizon;
        }
        count
    }

    pub fn stream(&mut self, node: NodeId) -> &mut RngStream {
        let seed = self.seed;
        self.streams
            .entry(node)
            .or_insert_with(|| RngStream::new(seed, node))
    }

    pub fn draw_uniform(&mut self, node: NodeId, bound: u64) -> u64 {
        self.stream(node).draw_uniform(bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beacon() -> EventKind {
        EventKind::BeaconTick
    }

    fn epoch(n: u16) -> EventKind {
        EventKind::DecisionEpoch { node: NodeId(n) }
    }

    #[test]
    fn equal_time_pops_in_seq_order() {
        let mut e = Engine::new(1);
        e.schedule(SimTime(5), epoch(1)).unwrap();
        e.schedule(SimTime(5), epoch(2)).unwrap();
        e.schedule(SimTime(5), epoch(3)).unwrap();
        let mut order = vec![];
        e.run_until(SimTime(10), |_, ev| {
            if let EventKind::DecisionEpoch { node } = ev.kind {
                order.push(node.0);
            }
        });
        assert_eq!(order, vec![1, 2, 3]);
    }

    #[test]
    fn now_event_precedes_later() {
        let mut e = Engine::new(1);
        e.schedule(SimTime(100), epoch(9)).unwrap();
        e.schedule(SimTime(0), epoch(1)).unwrap();
        let first = e.pop_until(SimTime(1000)).unwrap();
        assert_eq!(first.kind, epoch(1));
    }

    #[test]
    fn past_event_rejected() {
        let mut e = Engine::new(1);
        e.schedule(SimTime(50), beacon()).unwrap();
        e.run_until(SimTime(60), |_, _| {});
        assert_eq!(
            e.schedule(SimTime(10), beacon()),
            Err(EngineError::PastEvent {
                at: SimTime(10),
                now: SimTime(60)
            })
        );
    }

    #[test]
    fn run_until_empty_queue() {
        let mut e = Engine::new(1);
        assert_eq!(e.run_until(SimTime(1234), |_, _| {}), 0);
        assert_eq!(e.now(), SimTime(1234));
    }

    #[test]
    fn run_until_counts_and_stops_at_horizon() {
        let mut e = Engine::new(1);
        for t in [1, 2, 3, 50] {
            e.schedule(SimTime(t), beacon()).unwrap();
        }
        assert_eq!(e.run_until(SimTime(10), |_, _| {}), 3);
        assert_eq!(e.pending(), 1);
        assert_eq!(e.scheduled(), e.processed() + e.pending() as u64);
    }

    #[test]
    fn handler_can_schedule() {
        let mut e = Engine::new(1);
        e.schedule(SimTime(0), beacon()).unwrap();
        let n = e.run_until(SimTime(95), |eng, _| {
            eng.schedule_in(10, beacon());
        });
        assert_eq!(n, 10);
        assert_eq!(e.scheduled(), e.processed() + e.pending() as u64);
    }

    #[test]
    fn bound_one_is_zero() {
        let mut s = RngStream::new(7, NodeId(3));
        for _ in 0..100 {
            assert_eq!(s.draw_uniform(1), 0);
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut s = RngStream::new(42, NodeId(1));
            (0..16).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = RngStream::new(42, NodeId(1));
            (0..16).map(|_| s.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut s = RngStream::new(42, NodeId(2));
            (0..16).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn splitmix_reference_values() {
        // Published SplitMix64 outputs for seed 0.
        let mut state: u64 = 0;
        let mut out = vec![];
        for _ in 0..3 {
            state = state.wrapping_add(GOLDEN);
            out.push(mix64(state));
        }
        assert_eq!(
            out,
            vec![0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
        );
    }

    #[test]
    fn draw_uniform_bins() {
        let mut s = RngStream::new(2024, NodeId(5));
        let n = 10_000u64;
        let mut bins = [0u64; 8];
        for _ in 0..n {
            bins[s.draw_uniform(8) as usize] += 1;
        }
        let p = 1.0 / 8.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &b in &bins {
            assert!((b as f64 - n as f64 * p).abs() <= 4.0 * sigma, "{:?}", bins);
        }
    }

    #[test]
    fn symmetric_draw_range() {
        let mut s = RngStream::new(3, NodeId(3));
        let mut seen = [false; 7];
        for _ in 0..2000 {
            let v = s.draw_symmetric(3);
            assert!((-3..=3).contains(&v));
            seen[(v + 3) as usize] = true;
        }
        assert!(seen.iter().all(|&x| x));
        assert_eq!(s.draw_symmetric(0), 0);
    }

    #[test]
    fn trace_lines() {
        let mut e = Engine::new(1);
        e.enable_trace();
        e.schedule(SimTime(3), epoch(4)).unwrap();
        e.schedule(
            SimTime(7),
            EventKind::FrameArrival {
                rx: NodeId(2),
                tx: NodeId(1),
                frame: Frame::SrcBcast {
                    broadcast: NodeId(1),
                },
                tx_id: 0,
            },
        )
        .unwrap();
        e.run_until(SimTime(10), |_, _| {});
        assert_eq!(
            e.trace().unwrap(),
            "3\tDecisionEpoch\t4\t-\n7\tFrameArrival\t2\tSrcBcast<-1\n"
        );
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn events_pop_in_time_then_seq_order(times in prop::collection::vec(0u64..1000, 1..60)) {
            let mut e = Engine::new(0);
            for &t in &times {
                e.schedule(SimTime(t), EventKind::BeaconTick).unwrap();
            }
            let mut last = (SimTime::ZERO, 0u64);
            let mut n = 0;
            while let Some(ev) = e.pop_until(SimTime(1000)) {
                if n > 0 {
                    prop_assert!((ev.time, ev.seq) > last);
                }
                prop_assert!(e.now() == ev.time);
                last = (ev.time, ev.seq);
                n += 1;
            }
            prop_assert_eq!(n, times.len());
        }

        #[test]
        fn streams_depend_only_on_seed_node_and_index(seed in any::<u64>(), node in any::<u16>(), k in 0usize..50) {
            let mut a = RngStream::new(seed, NodeId(node));
            let mut b = RngStream::new(seed, NodeId(node));
            // Another node's draws must not disturb this one.
            let mut other = RngStream::new(seed, NodeId(node.wrapping_add(1)));
            for _ in 0..k {
                a.next_u64();
                other.next_u64();
                b.next_u64();
            }
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }

        #[test]
        fn draws_stay_in_bounds(seed in any::<u64>(), bound in 1u64..u64::MAX) {
            let mut r = RngStream::new(seed, NodeId(3));
            for _ in 0..20 {
                prop_assert!(r.draw_uniform(bound) < bound);
            }
        }
    }
}
