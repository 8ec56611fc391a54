//! Discrete-event timing model of collectives on the pool.
//!
//! Each device is a processor-sharing server: while `k` transfers are active on
//! a device, each progresses at `bandwidth / k`. Devices never affect each
//! other. Every rank has a write queue and a read queue that each issue one
//! transfer at a time, in plan order. A retrieve may only start once the
//! chunk it reads has been completely published.
//!
//! Rates are recomputed whenever a transfer joins or leaves a device, so the
//! reported times are exact for the model (up to `f64` rounding).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::collectives::{Queue, TraceEvent, TraceKind};
use crate::error::{Error, Result};
use crate::placement::{CallPlan, Combine, Layout};
use crate::pool::{KIB, MIB};
use crate::request::{CollectiveKind, CollectiveRequest, ElemType};

/// Default device bandwidth for large transfers (20 GiB/s).
pub const DEFAULT_PEAK: f64 = 20.0 * (1u64 << 30) as f64;
/// Default per-transfer setup latency: one pool access.
pub const DEFAULT_DEVICE_LATENCY: f64 = 658e-9;
/// Default combined read+write cap of one rank, as a multiple of the peak.
pub const DEFAULT_DUPLEX_FACTOR: f64 = 1.765;
/// Chunks per segment used by the scaling sweeps.
pub const DEFAULT_SCALE_CHUNKS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthModel {
    /// `(transfer bytes, bytes/s)` points, ascending in size. Sizes between
    /// points interpolate on a log2 scale; sizes past the last point run at `peak`.
    pub curve: Vec<(u64, f64)>,
    pub peak: f64,
    /// Seconds before a transfer starts moving bytes.
    pub device_latency: f64,
    /// Per-rank, per-direction bandwidth cap. `None` leaves only the device limit.
    pub rank_link_cap: Option<f64>,
    /// Cap on a rank's read and write rates combined.
    #[serde(default)]
    pub rank_duplex_cap: Option<f64>,
    /// Seconds of local reduction work per retrieved byte of a reducing primitive.
    pub reduce_cost_per_byte: f64,
}

impl Default for BandwidthModel {
    fn default() -> Self {
        BandwidthModel {
            curve: vec![
                (4 * KIB, 0.075 * DEFAULT_PEAK),
                (16 * KIB, 0.2 * DEFAULT_PEAK),
                (64 * KIB, 0.45 * DEFAULT_PEAK),
                (256 * KIB, 0.75 * DEFAULT_PEAK),
                (MIB, DEFAULT_PEAK),
            ],
            peak: DEFAULT_PEAK,
            device_latency: DEFAULT_DEVICE_LATENCY,
            rank_link_cap: Some(DEFAULT_PEAK),
            rank_duplex_cap: Some(DEFAULT_DUPLEX_FACTOR * DEFAULT_PEAK),
            reduce_cost_per_byte: 0.0,
        }
    }
}

impl BandwidthModel {
    /// Flat curve at `peak` with no setup latency.
    pub fn constant(peak: f64) -> Self {
        BandwidthModel {
            curve: Vec::new(),
            peak,
            device_latency: 0.0,
            rank_link_cap: None,
            rank_duplex_cap: None,
            reduce_cost_per_byte: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) || self.curve.iter().any(|&(_, bw)| !(bw > 0.0)) {
            return Err(Error::Simulation("bandwidth must be positive".into()));
        }
        if [self.rank_link_cap, self.rank_duplex_cap].iter().flatten().any(|&c| !(c > 0.0)) {
            return Err(Error::Simulation("rank caps must be positive".into()));
        }
        if self.curve.windows(2).any(|w| w[0].0 >= w[1].0 || w[0].1 > w[1].1) {
            return Err(Error::Simulation(
                "bandwidth curve must be ascending in size and non-decreasing in bandwidth".into(),
            ));
        }
        if self.curve.last().is_some_and(|&(_, bw)| bw > self.peak) {
            return Err(Error::Simulation("bandwidth curve exceeds peak".into()));
        }
        Ok(())
    }

    /// Solo bandwidth of a transfer of `bytes`.
    pub fn bandwidth(&self, bytes: u64) -> f64 {
        let Some(&(last_size, _)) = self.curve.last() else {
            return self.peak;
        };
        if bytes >= last_size {
            return self.peak;
        }
        let first = self.curve[0];
        if bytes <= first.0 {
            return first.1;
        }
        let i = self.curve.partition_point(|&(s, _)| s <= bytes);
        let (s0, b0) = self.curve[i - 1];
        let (s1, b1) = self.curve[i];
        let x = ((bytes as f64).log2() - (s0 as f64).log2()) / ((s1 as f64).log2() - (s0 as f64).log2());
        b0 + x * (b1 - b0)
    }
}

/// One transfer a queue issues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Op {
    pub device: usize,
    pub bytes: u64,
    /// Chunk key linking a retrieve to the publish it depends on.
    pub chunk: u64,
    pub reduce: bool,
    /// Extra chunk that must be published before this op may start.
    #[serde(default)]
    pub after: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankWork {
    pub publish: Vec<Op>,
    pub retrieve: Vec<Op>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub num_devices: usize,
    pub ranks: Vec<RankWork>,
    /// Whether a rank's read queue runs alongside its write queue. When false
    /// a rank retrieves only after it has published everything.
    pub overlap: bool,
}

impl Workload {
    pub fn from_call_plan(plan: &CallPlan, num_devices: usize, overlap: bool) -> Self {
        let op = |e: &crate::placement::PlanEntry| Op {
            device: e.device_index,
            bytes: e.bytes,
            chunk: e.chunk_id,
            reduce: e.combine == Combine::Reduce,
            after: None,
        };
        Workload {
            num_devices,
            overlap,
            ranks: plan
                .publish
                .iter()
                .zip(&plan.retrieve)
                .map(|(p, r)| RankWork {
                    publish: p.entries.iter().map(op).collect(),
                    retrieve: r.entries.iter().map(op).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds the workload of one call from an executor trace: each rank's
    /// publishes in the order they started, its retrieves in the order it
    /// began waiting for them.
    pub fn from_trace(events: &[TraceEvent], num_devices: usize, overlap: bool) -> Result<Self> {
        let nranks = events.iter().map(|e| e.rank + 1).max().unwrap_or(0);
        let mut sorted: Vec<&TraceEvent> = events.iter().collect();
        sorted.sort_by_key(|e| e.t_ns);
        let mut ranks = vec![RankWork::default(); nranks];
        for e in sorted {
            if e.device >= num_devices {
                return Err(Error::Simulation(format!(
                    "trace references device {} of {num_devices}",
                    e.device
                )));
            }
            let op = Op {
                device: e.device,
                bytes: e.bytes,
                chunk: e.chunk_id,
                reduce: false,
                after: None,
            };
            match (e.queue, e.kind) {
                (Queue::Write, TraceKind::PublishStart) => ranks[e.rank].publish.push(op),
                (Queue::Read, TraceKind::WaitStart) => ranks[e.rank].retrieve.push(op),
                _ => {}
            }
        }
        Ok(Workload {
            num_devices,
            ranks,
            overlap,
        })
    }

    /// Drops every retrieve a rank makes of its own chunks, and every publish
    /// nobody else consumes: a rank's own contribution is already local.
    pub fn without_self_traffic(mut self) -> Self {
        let mut producer: HashMap<u64, usize> = HashMap::new();
        for (r, rw) in self.ranks.iter().enumerate() {
            for op in &rw.publish {
                producer.insert(op.chunk, r);
            }
        }
        for (r, rw) in self.ranks.iter_mut().enumerate() {
            rw.retrieve.retain(|op| producer.get(&op.chunk) != Some(&r));
        }
        let consumed: std::collections::HashSet<u64> = self
            .ranks
            .iter()
            .flat_map(|rw| rw.retrieve.iter().map(|op| op.chunk))
            .collect();
        for rw in self.ranks.iter_mut() {
            rw.publish.retain(|op| consumed.contains(&op.chunk));
        }
        self
    }

    pub fn total_bytes(&self) -> u64 {
        self.ranks
            .iter()
            .flat_map(|r| r.publish.iter().chain(&r.retrieve))
            .map(|o| o.bytes)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimEventKind {
    /// The queue issued the op (setup latency starts).
    Start,
    /// The last byte moved.
    End,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    pub rank: usize,
    pub queue: Queue,
    pub kind: SimEventKind,
    pub op_index: usize,
    pub chunk: u64,
    pub device: usize,
    pub bytes: u64,
}

/// Interval during which one transfer moved at a constant rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub t0: f64,
    pub t1: f64,
    pub device: usize,
    pub rank: usize,
    pub queue: Queue,
    pub op_index: usize,
    pub rate: f64,
    /// Transfers active on the device during the interval, this one included.
    pub sharers: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub rank_completion: Vec<f64>,
    pub total_latency: f64,
    pub device_bytes: Vec<f64>,
    pub device_utilization: Vec<f64>,
    pub events: Vec<SimEvent>,
    pub rates: Vec<RateSegment>,
}

impl SimReport {
    pub fn first(&self, rank: usize, queue: Queue, kind: SimEventKind) -> Option<&SimEvent> {
        self.events
            .iter()
            .filter(|e| e.rank == rank && e.queue == queue && e.kind == kind)
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    pub fn last(&self, rank: usize, queue: Queue, kind: SimEventKind) -> Option<&SimEvent> {
        self.events
            .iter()
            .filter(|e| e.rank == rank && e.queue == queue && e.kind == kind)
            .max_by(|a, b| a.t.total_cmp(&b.t))
    }

    /// Completion time of a rank's `op_index`-th op on `queue`.
    pub fn end_of(&self, rank: usize, queue: Queue, op_index: usize) -> Option<f64> {
        self.events
            .iter()
            .find(|e| {
                e.rank == rank && e.queue == queue && e.op_index == op_index && e.kind == SimEventKind::End
            })
            .map(|e| e.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum QState {
    Idle,
    Setup { until: f64 },
    Active,
    Compute { until: f64 },
    Done,
}

struct QueueState<'a> {
    rank: usize,
    queue: Queue,
    ops: &'a [Op],
    next: usize,
    state: QState,
}

struct Transfer {
    q: usize,
    op_index: usize,
    device: usize,
    remaining: f64,
    solo_bw: f64,
    rate: f64,
}

const TIME_EPS: f64 = 1e-15;

pub struct Simulator {
    model: BandwidthModel,
    record_rates: bool,
}

impl Simulator {
    pub fn new(model: BandwidthModel) -> Self {
        Simulator {
            model,
            record_rates: false,
        }
    }

    pub fn record_rates(mut self, on: bool) -> Self {
        self.record_rates = on;
        self
    }

    pub fn run(&self, work: &Workload) -> Result<SimReport> {
        self.model.validate()?;
        let nd = work.num_devices;
        let nranks = work.ranks.len();

        let mut producers: HashMap<u64, usize> = HashMap::new();
        for (r, rw) in work.ranks.iter().enumerate() {
            for op in rw.publish.iter().chain(&rw.retrieve) {
                if op.device >= nd {
                    return Err(Error::Simulation(format!(
                        "rank {r} targets device {} of {nd}",
                        op.device
                    )));
                }
            }
            for op in &rw.publish {
                if producers.insert(op.chunk, r).is_some() {
                    return Err(Error::Simulation(format!("chunk {} published twice", op.chunk)));
                }
            }
        }
        for (r, rw) in work.ranks.iter().enumerate() {
            let deps = rw
                .retrieve
                .iter()
                .map(|o| o.chunk)
                .chain(rw.publish.iter().chain(&rw.retrieve).filter_map(|o| o.after));
            for c in deps {
                if !producers.contains_key(&c) {
                    return Err(Error::Simulation(format!(
                        "rank {r} depends on chunk {c} that nobody publishes"
                    )));
                }
            }
        }

        // Queue 2r is rank r's write queue, 2r+1 its read queue.
        let mut queues: Vec<QueueState> = Vec::with_capacity(2 * nranks);
        for (r, rw) in work.ranks.iter().enumerate() {
            queues.push(QueueState {
                rank: r,
                queue: Queue::Write,
                ops: &rw.publish,
                next: 0,
                state: QState::Idle,
            });
            queues.push(QueueState {
                rank: r,
                queue: Queue::Read,
                ops: &rw.retrieve,
                next: 0,
                state: QState::Idle,
            });
        }

        let mut published: HashMap<u64, f64> = HashMap::new();
        let mut active: Vec<Transfer> = Vec::new();
        let mut report = SimReport {
            rank_completion: vec![0.0; nranks],
            device_bytes: vec![0.0; nd],
            ..Default::default()
        };
        let mut now = 0.0f64;

        loop {
            // Issue whatever can start now; repeat until stable since a queue
            // may finish instantly (empty op list).
            let mut joined = false;
            for qi in 0..queues.len() {
                let q = &mut queues[qi];
                if q.state != QState::Idle {
                    continue;
                }
                if q.next >= q.ops.len() {
                    q.state = QState::Done;
                    continue;
                }
                if q.queue == Queue::Read && !work.overlap {
                    let w = &queues[qi - 1];
                    if w.state != QState::Done && !(w.state == QState::Idle && w.next >= w.ops.len()) {
                        continue;
                    }
                }
                let q = &mut queues[qi];
                let op = &q.ops[q.next];
                let ready = |c: &u64| published.get(c).is_some_and(|&t| t <= now);
                if q.queue == Queue::Read && !ready(&op.chunk) {
                    continue;
                }
                if op.after.as_ref().is_some_and(|c| !ready(c)) {
                    continue;
                }
                report.events.push(SimEvent {
                    t: now,
                    rank: q.rank,
                    queue: q.queue,
                    kind: SimEventKind::Start,
                    op_index: q.next,
                    chunk: op.chunk,
                    device: op.device,
                    bytes: op.bytes,
                });
                if self.model.device_latency > 0.0 {
                    q.state = QState::Setup {
                        until: now + self.model.device_latency,
                    };
                } else {
                    q.state = QState::Active;
                    active.push(Transfer {
                        q: qi,
                        op_index: q.next,
                        device: op.device,
                        remaining: op.bytes as f64,
                        solo_bw: self.model.bandwidth(op.bytes),
                        rate: 0.0,
                    });
                    joined = true;
                }
            }
            // Mark queues that drained while idle.
            for q in queues.iter_mut() {
                if q.state == QState::Idle && q.next >= q.ops.len() {
                    q.state = QState::Done;
                    if q.ops.is_empty() {
                        continue;
                    }
                }
            }
            let _ = joined;

            self.assign_rates(&mut active, nd);

            // Next event.
            let mut next = f64::INFINITY;
            for q in &queues {
                match q.state {
                    QState::Setup { until } | QState::Compute { until } => next = next.min(until),
                    _ => {}
                }
            }
            for t in &active {
                next = next.min(now + t.remaining / t.rate);
            }
            if !next.is_finite() {
                if queues.iter().all(|q| q.state == QState::Done) {
                    break;
                }
                return Err(Error::Simulation(
                    "no progress possible: cyclic or unsatisfiable dependency between queues".into(),
                ));
            }
            let dt = (next - now).max(0.0);

            if self.record_rates && dt > 0.0 {
                let mut sharers = vec![0usize; nd];
                for t in &active {
                    sharers[t.device] += 1;
                }
                for t in &active {
                    let q = &queues[t.q];
                    report.rates.push(RateSegment {
                        t0: now,
                        t1: next,
                        device: t.device,
                        rank: q.rank,
                        queue: q.queue,
                        op_index: t.op_index,
                        rate: t.rate,
                        sharers: sharers[t.device],
                    });
                }
            }
            for t in active.iter_mut() {
                let moved = (t.rate * dt).min(t.remaining);
                t.remaining -= moved;
                report.device_bytes[t.device] += moved;
            }
            now = next;

            // Completions.
            let mut i = 0;
            while i < active.len() {
                let t = &active[i];
                let done = t.remaining <= 0.0 || t.remaining / t.rate <= TIME_EPS.max(now * 1e-12);
                if !done {
                    i += 1;
                    continue;
                }
                let t = active.swap_remove(i);
                report.device_bytes[t.device] += t.remaining;
                let q = &mut queues[t.q];
                let op = &q.ops[t.op_index];
                report.events.push(SimEvent {
                    t: now,
                    rank: q.rank,
                    queue: q.queue,
                    kind: SimEventKind::End,
                    op_index: t.op_index,
                    chunk: op.chunk,
                    device: op.device,
                    bytes: op.bytes,
                });
                if q.queue == Queue::Write {
                    published.insert(op.chunk, now);
                }
                let compute = if op.reduce {
                    op.bytes as f64 * self.model.reduce_cost_per_byte
                } else {
                    0.0
                };
                q.next += 1;
                q.state = if compute > 0.0 {
                    QState::Compute { until: now + compute }
                } else {
                    QState::Idle
                };
                report.rank_completion[q.rank] = report.rank_completion[q.rank].max(now);
            }
            for qi in 0..queues.len() {
                match queues[qi].state {
                    QState::Setup { until } if until <= now => {
                        let q = &mut queues[qi];
                        q.state = QState::Active;
                        let op = &q.ops[q.next];
                        active.push(Transfer {
                            q: qi,
                            op_index: q.next,
                            device: op.device,
                            remaining: op.bytes as f64,
                            solo_bw: self.model.bandwidth(op.bytes),
                            rate: 0.0,
                        });
                    }
                    QState::Compute { until } if until <= now => {
                        let q = &mut queues[qi];
                        q.state = QState::Idle;
                        report.rank_completion[q.rank] = report.rank_completion[q.rank].max(now);
                    }
                    _ => {}
                }
            }
        }

        report.total_latency = report.rank_completion.iter().copied().fold(0.0, f64::max);
        report.device_utilization = report
            .device_bytes
            .iter()
            .map(|&b| {
                if report.total_latency > 0.0 {
                    b / (self.model.peak * report.total_latency)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(report)
    }

    fn assign_rates(&self, active: &mut [Transfer], nd: usize) {
        let mut count = vec![0usize; nd];
        for t in active.iter() {
            count[t.device] += 1;
        }
        for t in active.iter_mut() {
            let mut rate = t.solo_bw / count[t.device] as f64;
            if let Some(cap) = self.model.rank_link_cap {
                rate = rate.min(cap);
            }
            t.rate = rate;
        }
        let Some(duplex) = self.model.rank_duplex_cap else {
            return;
        };
        // A rank has at most two transfers in flight (queues 2r and 2r+1).
        // Split the duplex cap max-min fairly between them.
        let mut by_rank: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, t) in active.iter().enumerate() {
            by_rank.entry(t.q / 2).or_default().push(i);
        }
        for idx in by_rank.values() {
            let sum: f64 = idx.iter().map(|&i| active[i].rate).sum();
            if sum <= duplex {
                continue;
            }
            match idx.as_slice() {
                &[a] => active[a].rate = duplex,
                &[a, b] => {
                    let half = duplex / 2.0;
                    let (lo, hi) = if active[a].rate <= active[b].rate { (a, b) } else { (b, a) };
                    if active[lo].rate < half {
                        active[hi].rate = duplex - active[lo].rate;
                    } else {
                        active[lo].rate = half;
                        active[hi].rate = half;
                    }
                }
                _ => unreachable!("a rank runs two queues"),
            }
        }
    }
}

pub fn simulate(work: &Workload, model: &BandwidthModel) -> Result<SimReport> {
    Simulator::new(model.clone()).run(work)
}

/// How a call is laid out and scheduled, mirroring the three comparison
/// configurations: everything on, coarse interleaving without overlap, and
/// sequential allocation without overlap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    All,
    Aggregate,
    Naive,
}

impl Variant {
    pub fn layout(self) -> Layout {
        match self {
            Variant::Naive => Layout::Sequential,
            _ => Layout::Interleaved,
        }
    }

    pub fn overlap(self) -> bool {
        self == Variant::All
    }

    /// Chunks per segment actually used for a requested chunk count.
    pub fn chunks(self, requested: usize) -> usize {
        match self {
            Variant::All => requested,
            _ => 1,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Variant::All),
            "aggregate" => Ok(Variant::Aggregate),
            "naive" => Ok(Variant::Naive),
            _ => Err(Error::InvalidRequest(format!("unknown placement {s:?}"))),
        }
    }
}

/// Workload of one call as the given variant would run it.
pub fn workload(req: &CollectiveRequest, num_devices: usize, variant: Variant) -> Result<Workload> {
    let req = req.clone().with_chunks(variant.chunks(req.chunk_count));
    let cfg = crate::placement::size_pool(&req, num_devices)?;
    let plan = CallPlan::build(&req, &cfg, variant.layout(), 0)?;
    Ok(Workload::from_call_plan(&plan, num_devices, variant.overlap()))
}

/// Predicted latency of one call. Traffic a rank would only exchange with
/// itself is treated as local and left out.
pub fn predict(req: &CollectiveRequest, num_devices: usize, variant: Variant, model: &BandwidthModel) -> Result<SimReport> {
    simulate(&workload(req, num_devices, variant)?.without_self_traffic(), model)
}

/// One row of a scaling or sensitivity table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub kind: CollectiveKind,
    pub nranks: usize,
    pub msg_bytes: u64,
    pub chunks: usize,
    pub latency_s: f64,
    /// Latency relative to the 3-rank row of the same size and chunk count;
    /// `None` when the table has no such row.
    pub ratio_vs_3: Option<f64>,
}

/// Request for an `msg_bytes` message of `f32`s, trimmed so every rank count
/// in a sweep divides it.
pub fn scenario_request(kind: CollectiveKind, nranks: usize, msg_bytes: u64, chunks: usize) -> CollectiveRequest {
    const ALIGN: u64 = 4 * 12 * 16;
    let count = (msg_bytes / ALIGN).max(1) * ALIGN / 4;
    CollectiveRequest::new(kind, 0, nranks, count as usize)
        .with_elem(ElemType::F32)
        .with_chunks(chunks)
}

/// Latency of `kind` for every `(nranks, msg)` pair on `num_devices` devices,
/// with ratios against the 3-rank run of the same size.
pub fn scale_scenario(
    kind: CollectiveKind,
    nranks: &[usize],
    msgs: &[u64],
    num_devices: usize,
    chunks: usize,
    model: &BandwidthModel,
) -> Result<Vec<ScaleRow>> {
    let mut rows = Vec::new();
    for &msg in msgs {
        for &p in nranks {
            let req = scenario_request(kind, p, msg, chunks);
            let rep = predict(&req, num_devices, Variant::All, model)?;
            rows.push(ScaleRow {
                kind,
                nranks: p,
                msg_bytes: msg,
                chunks,
                latency_s: rep.total_latency,
                ratio_vs_3: None,
            });
        }
    }
    fill_ratios(&mut rows);
    Ok(rows)
}

fn fill_ratios(rows: &mut [ScaleRow]) {
    let base: Vec<(CollectiveKind, u64, usize, f64)> = rows
        .iter()
        .filter(|r| r.nranks == 3)
        .map(|r| (r.kind, r.msg_bytes, r.chunks, r.latency_s))
        .collect();
    for r in rows.iter_mut() {
        r.ratio_vs_3 = base
            .iter()
            .find(|b| (b.0, b.1, b.2) == (r.kind, r.msg_bytes, r.chunks))
            .map(|b| r.latency_s / b.3);
    }
}

/// Latency of `kind` across chunk counts at a fixed rank count.
pub fn chunk_sensitivity(
    kind: CollectiveKind,
    nranks: usize,
    msgs: &[u64],
    chunk_counts: &[usize],
    num_devices: usize,
    model: &BandwidthModel,
) -> Result<Vec<ScaleRow>> {
    let mut rows = Vec::new();
    for &msg in msgs {
        for &c in chunk_counts {
            let req = scenario_request(kind, nranks, msg, c);
            let rep = predict(&req, num_devices, Variant::All, model)?;
            rows.push(ScaleRow {
                kind,
                nranks,
                msg_bytes: msg,
                chunks: c,
                latency_s: rep.total_latency,
                ratio_vs_3: None,
            });
        }
    }
    Ok(rows)
}

/// Writes rows with the columns `kind,nranks,msg_bytes,chunks,latency_s,ratio_vs_3`.
pub fn write_csv<W: std::io::Write>(rows: &[ScaleRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "nranks", "msg_bytes", "chunks", "latency_s", "ratio_vs_3"])?;
    for r in rows {
        w.write_record([
            r.kind.name().to_string(),
            r.nranks.to_string(),
            r.msg_bytes.to_string(),
            r.chunks.to_string(),
            format!("{:.9}", r.latency_s),
            r.ratio_vs_3.map(|x| format!("{x:.4}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    /// Vary the rank count; ratios against 3 ranks.
    #[default]
    Scale,
    /// Vary the chunk count at the first listed rank count.
    Chunks,
}

/// A sweep read from a JSON or TOML file.
///
/// ```toml
/// kind = "broadcast"
/// nranks = [3, 6, 12]
/// num_devices = 6
/// msg_bytes = [134217728, 1073741824]
/// chunks = [8]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: CollectiveKind,
    #[serde(default)]
    pub sweep: SweepKind,
    pub nranks: Vec<usize>,
    #[serde(default = "default_devices")]
    pub num_devices: usize,
    pub msg_bytes: Vec<u64>,
    #[serde(default = "default_chunks")]
    pub chunks: Vec<usize>,
    #[serde(default)]
    pub model: Option<BandwidthModel>,
}

fn default_devices() -> usize {
    6
}

fn default_chunks() -> Vec<usize> {
    vec![DEFAULT_SCALE_CHUNKS]
}

impl Scenario {
    /// Parses TOML when `path` ends in `.toml`, JSON otherwise.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            Ok(toml::from_str(&text)?)
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }

    pub fn run(&self) -> Result<Vec<ScaleRow>> {
        if self.nranks.is_empty() || self.msg_bytes.is_empty() || self.chunks.is_empty() {
            return Err(Error::InvalidConfig("scenario needs ranks, sizes and chunk counts".into()));
        }
        let model = self.model.clone().unwrap_or_default();
        match self.sweep {
            SweepKind::Scale => {
                let mut rows = Vec::new();
                for &c in &self.chunks {
                    rows.extend(scale_scenario(self.kind, &self.nranks, &self.msg_bytes, self.num_devices, c, &model)?);
                }
                Ok(rows)
            }
            SweepKind::Chunks => chunk_sensitivity(
                self.kind,
                self.nranks[0],
                &self.msg_bytes,
                &self.chunks,
                self.num_devices,
                &model,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::GIB;

    fn one(device: usize, bytes: u64, chunk: u64) -> Op {
        Op { device, bytes, chunk, reduce: false, after: None }
    }

    fn writer(ops: Vec<Op>) -> RankWork {
        RankWork { publish: ops, retrieve: Vec::new() }
    }

    #[test]
    fn solo_transfer_is_size_over_bandwidth() {
        let model = BandwidthModel::default();
        let work = Workload { num_devices: 1, ranks: vec![writer(vec![one(0, GIB, 0)])], overlap: true };
        let rep = simulate(&work, &model).unwrap();
        assert!((rep.total_latency - (0.05 + DEFAULT_DEVICE_LATENCY)).abs() < 1e-9);
    }

    #[test]
    fn shared_device_halves_rate() {
        let model = BandwidthModel::constant(DEFAULT_PEAK);
        let work = Workload {
            num_devices: 2,
            ranks: vec![writer(vec![one(0, GIB, 0)]), writer(vec![one(0, GIB, 1)])],
            overlap: true,
        };
        let rep = simulate(&work, &model).unwrap();
        assert!((rep.rank_completion[0] - 0.1).abs() < 1e-9);
        assert!((rep.rank_completion[1] - 0.1).abs() < 1e-9);

        let work = Workload {
            num_devices: 2,
            ranks: vec![writer(vec![one(0, GIB, 0)]), writer(vec![one(1, GIB, 1)])],
            overlap: true,
        };
        let rep = simulate(&work, &model).unwrap();
        assert!((rep.total_latency - 0.05).abs() < 1e-9);
    }

    #[test]
    fn late_arrival_reshares() {
        // A starts alone; B joins device 0 at 0.025 s with A half done. Both
        // then move at half rate: A ends at 0.075, B finishes its rest alone at 0.1.
        let model = BandwidthModel::constant(DEFAULT_PEAK);
        let work = Workload {
            num_devices: 2,
            ranks: vec![
                writer(vec![one(0, GIB, 0)]),
                writer(vec![one(1, GIB / 2, 1), one(0, GIB, 2)]),
            ],
            overlap: true,
        };
        let rep = simulate(&work, &model).unwrap();
        assert!((rep.rank_completion[0] - 0.075).abs() < 1e-9, "{:?}", rep.rank_completion);
        assert!((rep.rank_completion[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn retrieve_waits_for_publish() {
        let model = BandwidthModel::constant(DEFAULT_PEAK);
        let work = Workload {
            num_devices: 2,
            ranks: vec![
                writer(vec![one(0, GIB, 7)]),
                RankWork { publish: vec![], retrieve: vec![one(0, GIB, 7)] },
            ],
            overlap: true,
        };
        let rep = simulate(&work, &model).unwrap();
        assert!((rep.rank_completion[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn unsatisfied_dependency_is_an_error() {
        let work = Workload {
            num_devices: 1,
            ranks: vec![RankWork { publish: vec![], retrieve: vec![one(0, 10, 3)] }],
            overlap: true,
        };
        assert!(matches!(simulate(&work, &BandwidthModel::default()), Err(Error::Simulation(_))));
    }

    #[test]
    fn deadlock_is_detected() {
        // Each rank retrieves the other's chunk before publishing its own, which
        // cannot happen when reads wait for the rank's own writes.
        let work = Workload {
            num_devices: 1,
            ranks: vec![
                RankWork { publish: vec![one(0, 10, 0)], retrieve: vec![one(0, 10, 1)] },
                RankWork { publish: vec![one(0, 10, 1), one(0, 10, 2)], retrieve: vec![one(0, 10, 0)] },
                RankWork { publish: vec![], retrieve: vec![one(0, 10, 9)] },
            ],
            overlap: false,
        };
        assert!(simulate(&work, &BandwidthModel::default()).is_err());
    }

    #[test]
    fn zero_bandwidth_is_rejected() {
        let work = Workload { num_devices: 1, ranks: vec![writer(vec![one(0, 1, 0)])], overlap: true };
        assert!(simulate(&work, &BandwidthModel::constant(0.0)).is_err());
    }

    #[test]
    fn curve_interpolates_and_saturates() {
        let m = BandwidthModel::default();
        assert_eq!(m.bandwidth(MIB), DEFAULT_PEAK);
        assert_eq!(m.bandwidth(GIB), DEFAULT_PEAK);
        assert_eq!(m.bandwidth(1), m.curve[0].1);
        let mid = m.bandwidth(32 * KIB);
        assert!(mid > m.bandwidth(16 * KIB) && mid < m.bandwidth(64 * KIB));
        let mut last = 0.0;
        for k in 0..30 {
            let bw = m.bandwidth(1 << k);
            assert!(bw >= last);
            last = bw;
        }
    }

    #[test]
    fn work_is_conserved() {
        let model = BandwidthModel::default();
        let req = CollectiveRequest::new(crate::request::CollectiveKind::AllToAll, 0, 4, 1 << 20).with_chunks(4);
        let cfg = crate::placement::size_pool(&req, 4).unwrap();
        let plan = CallPlan::build(&req, &cfg, Layout::Interleaved, 0).unwrap();
        let work = Workload::from_call_plan(&plan, 4, true);
        let rep = Simulator::new(model).record_rates(true).run(&work).unwrap();
        let moved: f64 = rep.device_bytes.iter().sum();
        assert!((moved - work.total_bytes() as f64).abs() < 1.0);
        let integrated: f64 = rep.rates.iter().map(|s| s.rate * (s.t1 - s.t0)).sum();
        assert!((integrated - work.total_bytes() as f64).abs() / (work.total_bytes() as f64) < 1e-9);
    }
}
