//! Discrete-event simulation kernel.
//!
//! Time is kept in microseconds as `f64`; reports convert to milliseconds at
//! the edge. Events are ordered by `(time, sequence)` where the sequence
//! number is assigned when the event is created, so inserting the same set of
//! events in any order drains identically. All randomness flows through
//! [`RngHub`], which derives one named ChaCha substream per module per
//! scenario; two runs with the same seed therefore consume identical streams.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeMap};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Simulated time in microseconds.
pub type SimTime = f64;

/// Microseconds per millisecond, for the ms-unit cost models.
pub const MS: f64 = 1_000.0;

/// Microseconds per second.
pub const SEC: f64 = 1_000_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("cannot schedule event at {at} before current time {now}")]
    SchedulePast { at: f64, now: f64 },
    #[error("empty sample set")]
    EmptySamples,
}

/// A queued event. `seq` is the tie-break counter: it is part of the event's
/// identity, not of the queue's insertion bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<P> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: P,
}

struct HeapEntry<P>(SimEvent<P>);

impl<P> PartialEq for HeapEntry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.time == other.0.time && self.0.seq == other.0.seq
    }
}
impl<P> Eq for HeapEntry<P> {}

impl<P> Ord for HeapEntry<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want earliest first.
        other
            .0
            .time
            .total_cmp(&self.0.time)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}
impl<P> PartialOrd for HeapEntry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pending-event queue with a monotone clock.
pub struct EventQueue<P> {
    heap: BinaryHeap<HeapEntry<P>>,
    next_seq: u64,
    now: SimTime,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_seq: 0, now: 0.0 }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedule a new event, assigning it the next sequence number.
    pub fn schedule(&mut self, at: SimTime, payload: P) -> Result<u64, SimError> {
        if at < self.now {
            return Err(SimError::SchedulePast { at, now: self.now });
        }
        debug_assert!(at.is_finite());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(HeapEntry(SimEvent { time: at, seq, payload }));
        Ok(seq)
    }

    /// Insert a pre-sequenced event. Drain order depends only on
    /// `(time, seq)`, so permuting insertion order of simultaneous events
    /// changes nothing.
    pub fn insert(&mut self, ev: SimEvent<P>) {
        self.next_seq = self.next_seq.max(ev.seq + 1);
        self.heap.push(HeapEntry(ev));
    }

    /// Pop the next event and advance the clock to it. The clock never
    /// decreases.
    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        let ev = self.heap.pop()?.0;
        debug_assert!(ev.time >= self.now, "clock went backwards");
        self.now = ev.time.max(self.now);
        Some(ev)
    }
}

/// Drain the queue through `handler` until it is empty or the clock passes
/// `until`. Returns the number of events processed.
pub fn run<P, S>(
    queue: &mut EventQueue<P>,
    state: &mut S,
    until: Option<SimTime>,
    mut handler: impl FnMut(&mut S, SimTime, P, &mut EventQueue<P>),
) -> u64 {
    let mut processed = 0;
    while let Some(ev) = queue.pop() {
        if let Some(limit) = until {
            if ev.time > limit {
                break;
            }
        }
        handler(state, ev.time, ev.payload, queue);
        processed += 1;
    }
    processed
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives named, independent RNG substreams from one scenario seed.
#[derive(Debug, Clone, Copy)]
pub struct RngHub {
    seed: u64,
}

impl RngHub {
    pub fn new(seed: u64) -> Self {
        RngHub { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One stream per module name per scenario.
    pub fn stream(&self, name: &str) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(splitmix(self.seed ^ fnv1a(name.as_bytes())))
    }

    /// Per-entity stream, e.g. one per invocation index.
    pub fn indexed_stream(&self, name: &str, idx: u64) -> ChaCha12Rng {
        let base = splitmix(self.seed ^ fnv1a(name.as_bytes()));
        ChaCha12Rng::seed_from_u64(splitmix(base ^ splitmix(idx.wrapping_add(1))))
    }

    /// Stable 128-bit content hash for synthetic page content.
    pub fn content_hash(namespace: &str, index: u64) -> u128 {
        let a = splitmix(fnv1a(namespace.as_bytes()) ^ splitmix(index));
        let b = splitmix(a ^ 0xa076_1d64_78bd_642f);
        ((a as u128) << 64) | b as u128
    }
}

/// Sample log-uniformly from `[lo, hi]`. A zeroed RNG yields exactly `lo`,
/// which the range-floor tests rely on.
pub fn log_uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo > 0.0 && hi >= lo);
    let u: f64 = rng.gen::<f64>();
    lo * (hi / lo).powf(u)
}

/// Lognormal sample with the given median and shape.
pub fn lognormal_median(rng: &mut impl RngCore, median: f64, sigma: f64) -> f64 {
    // Box-Muller on two uniform draws; consumption order is fixed.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    median * (sigma * z).exp()
}

/// Nearest-rank percentile. `p` is in percent; `P0` is the minimum and
/// `P100` the maximum of the sample set.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, SimError> {
    if samples.is_empty() {
        return Err(SimError::EmptySamples);
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = if p <= 0.0 {
        1
    } else {
        ((p / 100.0) * n as f64).ceil() as usize
    };
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// CPU capacity model. The slowdown factor is the generalized
/// processor-sharing stretch: 1 while demand fits the cores, demand/cores
/// beyond that.
#[derive(Debug, Clone, Copy)]
pub struct CpuModel {
    pub physical_cores: f64,
}

impl CpuModel {
    pub fn new(physical_cores: f64) -> Self {
        debug_assert!(physical_cores > 0.0);
        CpuModel { physical_cores }
    }

    pub fn slowdown(&self, runnable_vcpus: f64) -> f64 {
        if runnable_vcpus <= self.physical_cores {
            1.0
        } else {
            runnable_vcpus / self.physical_cores
        }
    }
}

/// Identifier of a work or load entry inside [`ContentionTracker`].
pub type WorkId = u64;

#[derive(Debug, Clone, Copy)]
struct WorkItem {
    demand: f64,
    remaining_us: f64,
}

/// Processor-sharing tracker for CPU-bound phases.
///
/// Work items carry a demand in vCPUs and an amount of work expressed as
/// uncontended wall microseconds. Load items add demand without work (used
/// for shared browser processes). All active work progresses at
/// `min(1, cores / total_demand)`; each demand change invalidates previously
/// projected completion times, which callers detect through the generation
/// counter.
#[derive(Debug)]
pub struct ContentionTracker {
    cpu: CpuModel,
    items: BTreeMap<WorkId, WorkItem>,
    loads: BTreeMap<WorkId, f64>,
    total_demand: f64,
    last_update: SimTime,
    generation: u64,
    next_id: WorkId,
}

impl ContentionTracker {
    pub fn new(cores: f64) -> Self {
        ContentionTracker {
            cpu: CpuModel::new(cores),
            items: BTreeMap::new(),
            loads: BTreeMap::new(),
            total_demand: 0.0,
            last_update: 0.0,
            generation: 0,
            next_id: 0,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn total_demand(&self) -> f64 {
        self.total_demand
    }

    pub fn rate(&self) -> f64 {
        1.0 / self.cpu.slowdown(self.total_demand)
    }

    fn advance(&mut self, now: SimTime) {
        let dt = now - self.last_update;
        debug_assert!(dt >= -1e-6, "tracker time went backwards");
        if dt > 0.0 {
            let rate = self.rate();
            for item in self.items.values_mut() {
                item.remaining_us = (item.remaining_us - dt * rate).max(0.0);
            }
        }
        self.last_update = now;
    }

    pub fn add_work(&mut self, now: SimTime, demand: f64, work_us: f64) -> WorkId {
        self.advance(now);
        let id = self.next_id;
        self.next_id += 1;
        self.items.insert(id, WorkItem { demand, remaining_us: work_us.max(0.0) });
        self.total_demand += demand;
        self.generation += 1;
        id
    }

    pub fn remove_work(&mut self, now: SimTime, id: WorkId) {
        self.advance(now);
        if let Some(item) = self.items.remove(&id) {
            self.total_demand -= item.demand;
            self.generation += 1;
        }
    }

    pub fn add_load(&mut self, now: SimTime, demand: f64) -> WorkId {
        self.advance(now);
        let id = self.next_id;
        self.next_id += 1;
        self.loads.insert(id, demand);
        self.total_demand += demand;
        self.generation += 1;
        id
    }

    pub fn remove_load(&mut self, now: SimTime, id: WorkId) {
        self.advance(now);
        if let Some(d) = self.loads.remove(&id) {
            self.total_demand -= d;
            self.generation += 1;
        }
    }

    pub fn is_done(&self, id: WorkId) -> bool {
        self.items.get(&id).map(|i| i.remaining_us <= 1e-6).unwrap_or(true)
    }

    /// Projected completion times of every active work item at the current
    /// rate. Valid until the generation changes.
    pub fn projected_completions(&self, now: SimTime) -> Vec<(WorkId, SimTime)> {
        let rate = self.rate();
        self.items
            .iter()
            .map(|(&id, item)| (id, now + item.remaining_us / rate))
            .collect()
    }
}

#[cfg(test)]
pub(crate) struct ZeroRng;

#[cfg(test)]
impl RngCore for ZeroRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        dest.fill(0);
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        dest.fill(0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_queue_completes_immediately() {
        let mut q: EventQueue<u32> = EventQueue::new();
        let mut st = ();
        let n = run(&mut q, &mut st, None, |_, _, _, _| {});
        assert_eq!(n, 0);
        assert_eq!(q.now(), 0.0);
    }

    #[test]
    fn drain_order_follows_time_then_sequence() {
        let mut q = EventQueue::new();
        q.schedule(5.0, "b").unwrap();
        q.schedule(1.0, "a").unwrap();
        q.schedule(5.0, "c").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| e.payload).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    #[test]
    fn permuted_insertion_of_simultaneous_events_drains_identically() {
        let events: Vec<SimEvent<u64>> = (0..100)
            .map(|i| SimEvent { time: (i / 10) as f64, seq: i, payload: i })
            .collect();

        let drain = |evs: &[SimEvent<u64>]| {
            let mut q = EventQueue::new();
            for ev in evs {
                q.insert(ev.clone());
            }
            std::iter::from_fn(move || q.pop()).map(|e| (e.time as u64, e.seq)).collect::<Vec<_>>()
        };

        let baseline = drain(&events);
        let mut shuffled = events.clone();
        // Deterministic permutation: reverse within equal-time groups and
        // interleave the groups back to front.
        shuffled.reverse();
        assert_eq!(drain(&shuffled), baseline);

        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..5 {
            let mut perm = events.clone();
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            assert_eq!(drain(&perm), baseline);
        }
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(10.0, ()).unwrap();
        q.pop();
        assert_eq!(
            q.schedule(5.0, ()),
            Err(SimError::SchedulePast { at: 5.0, now: 10.0 })
        );
    }

    #[test]
    fn clock_is_monotone_across_a_run() {
        let mut q = EventQueue::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t: f64 = rng.gen_range(0.0..1000.0);
            q.insert(SimEvent { time: t, seq: q.len() as u64, payload: () });
        }
        let mut last = f64::NEG_INFINITY;
        while let Some(ev) = q.pop() {
            assert!(ev.time >= last);
            last = ev.time;
        }
    }

    #[test]
    fn same_seed_yields_identical_streams() {
        let hub = RngHub::new(42);
        let a: Vec<u64> = (0..8).map(|_| hub.stream("sandbox").next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| hub.stream("sandbox").next_u64()).collect();
        // Fresh stream each call: both vectors took only the first draw.
        assert_eq!(a[0], b[0]);
        let mut s1 = hub.stream("sandbox");
        let mut s2 = hub.stream("sandbox");
        let run1: Vec<u64> = (0..32).map(|_| s1.next_u64()).collect();
        let run2: Vec<u64> = (0..32).map(|_| s2.next_u64()).collect();
        assert_eq!(run1, run2);
        let mut other = hub.stream("mempool");
        assert_ne!(run1[0], other.next_u64());
    }

    #[test]
    fn slowdown_is_one_under_capacity() {
        let cpu = CpuModel::new(20.0);
        assert_eq!(cpu.slowdown(0.0), 1.0);
        assert_eq!(cpu.slowdown(20.0), 1.0);
        assert_eq!(cpu.slowdown(31.25), 1.5625);
    }

    #[test]
    fn doubling_demand_never_decreases_slowdown() {
        let cpu = CpuModel::new(16.0);
        let mut d = 1.0;
        let mut last = cpu.slowdown(d);
        for _ in 0..12 {
            d *= 2.0;
            let f = cpu.slowdown(d);
            assert!(f >= last);
            last = f;
        }
    }

    #[test]
    fn percentile_nearest_rank_matches_examples() {
        let s: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(percentile(&s, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&s, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&s, 99.0).unwrap(), 99.0);
        assert_eq!(percentile(&s, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&[7.0], 75.0).unwrap(), 7.0);
        assert_eq!(percentile(&[], 50.0), Err(SimError::EmptySamples));
    }

    #[test]
    fn tracker_shares_cores_proportionally() {
        // Two items of demand 20 on 20 cores: rate 0.5, both finish in
        // double their work.
        let mut tr = ContentionTracker::new(20.0);
        let a = tr.add_work(0.0, 20.0, 1000.0);
        let b = tr.add_work(0.0, 20.0, 1000.0);
        let proj = tr.projected_completions(0.0);
        for (_, t) in &proj {
            assert!((t - 2000.0).abs() < 1e-9);
        }
        tr.advance(2000.0);
        assert!(tr.is_done(a) && tr.is_done(b));
    }

    #[test]
    fn tracker_load_items_steal_capacity_without_progress() {
        let mut tr = ContentionTracker::new(10.0);
        let w = tr.add_work(0.0, 10.0, 1000.0);
        let l = tr.add_load(0.0, 10.0);
        assert_eq!(tr.rate(), 0.5);
        tr.remove_load(500.0, l);
        // 500us at rate 0.5 leaves 750us of work, now at rate 1.
        let proj = tr.projected_completions(500.0);
        assert_eq!(proj.len(), 1);
        assert!((proj[0].1 - 1250.0).abs() < 1e-9);
        tr.remove_work(1250.0, w);
        assert_eq!(tr.total_demand(), 0.0);
    }

    #[test]
    fn log_uniform_hits_floor_with_zeroed_rng() {
        let mut z = ZeroRng;
        assert_eq!(log_uniform(&mut z, 80.0, 10_000.0), 80.0);
    }
}
