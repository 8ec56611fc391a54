//! Collective primitives over the pool.
//!
//! Every call has two phases per rank. The write queue publishes the rank's
//! outgoing chunks and rings each chunk's doorbell as soon as its bytes land.
//! The read queue waits on the doorbell of each incoming chunk, copies it into
//! the receive buffer, and reduces where the primitive requires it. The two
//! queues run concurrently so a rank keeps publishing while it is already
//! consuming its peers' first chunks.
//!
//! Reductions are applied chunk by chunk once every producer's copy of that
//! chunk has arrived, always folding in ascending producer rank. Float results
//! are therefore identical from run to run and independent of chunking.

use std::fmt::Debug;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use bytemuck::Pod;
use serde::{Deserialize, Serialize};

use crate::doorbell::{DoorbellIndex, DoorbellRegion, DEFAULT_TIMEOUT};
use crate::error::{Error, Result};
use crate::placement::{CallPlan, Combine, Layout, PlacementPlan, PlanEntry};
use crate::pool::PoolHandle;
use crate::request::{CollectiveKind, CollectiveRequest, ElemType, ReduceOp};

/// Element types the collectives move and reduce.
pub trait Element: Pod + PartialEq + Debug + Send + Sync + 'static {
    const TYPE: ElemType;

    fn combine(self, other: Self, op: ReduceOp) -> Self;

    /// Distance in units of least precision. Integers are either equal or `u64::MAX` apart.
    fn ulps_between(self, other: Self) -> u64;

    /// Payload value from 64 random bits. Floats get integer values small
    /// enough that sums over a few ranks stay exact.
    fn from_random(bits: u64) -> Self;
}

macro_rules! int_element {
    ($t:ty, $tag:expr) => {
        impl Element for $t {
            const TYPE: ElemType = $tag;

            fn combine(self, other: Self, op: ReduceOp) -> Self {
                match op {
                    ReduceOp::Sum => self.wrapping_add(other),
                    ReduceOp::Max => self.max(other),
                    ReduceOp::Min => self.min(other),
                }
            }

            fn ulps_between(self, other: Self) -> u64 {
                if self == other {
                    0
                } else {
                    u64::MAX
                }
            }

            fn from_random(bits: u64) -> Self {
                bits as $t
            }
        }
    };
}

macro_rules! float_element {
    ($t:ty, $bits:ty, $signed:ty, $tag:expr) => {
        impl Element for $t {
            const TYPE: ElemType = $tag;

            fn combine(self, other: Self, op: ReduceOp) -> Self {
                match op {
                    ReduceOp::Sum => self + other,
                    ReduceOp::Max => self.max(other),
                    ReduceOp::Min => self.min(other),
                }
            }

            fn ulps_between(self, other: Self) -> u64 {
                if self.to_bits() == other.to_bits() {
                    return 0;
                }
                if self.is_nan() || other.is_nan() {
                    return u64::MAX;
                }
                // Map the float line onto a monotone integer line.
                fn ordered(x: $t) -> i128 {
                    let b = x.to_bits() as $signed;
                    if b < 0 {
                        (<$signed>::MIN as i128) - (b as i128)
                    } else {
                        b as i128
                    }
                }
                (ordered(self) - ordered(other)).unsigned_abs().min(u64::MAX as u128) as u64
            }

            fn from_random(bits: u64) -> Self {
                ((bits >> 44) as i64 - (1 << 19)) as $t
            }
        }
    };
}

int_element!(i32, ElemType::I32);
int_element!(i64, ElemType::I64);
float_element!(f32, u32, i32, ElemType::F32);
float_element!(f64, u64, i64, ElemType::F64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Queue {
    Write,
    Read,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    PublishStart,
    Ring,
    WaitStart,
    WaitReturn,
    RetrieveEnd,
}

/// One line of the executor trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub rank: usize,
    pub epoch: u64,
    pub queue: Queue,
    pub kind: TraceKind,
    pub chunk_id: u64,
    pub producer: usize,
    pub doorbell: u64,
    pub device: usize,
    pub bytes: u64,
    pub t_ns: u64,
}

#[derive(Clone, Debug)]
pub struct CommOptions {
    pub layout: Layout,
    /// Run the write and read queues concurrently. When off, a rank finishes
    /// publishing before it starts retrieving.
    pub overlap: bool,
    pub timeout: Duration,
    pub trace: bool,
}

impl Default for CommOptions {
    fn default() -> Self {
        CommOptions {
            layout: Layout::Interleaved,
            overlap: true,
            timeout: DEFAULT_TIMEOUT,
            trace: false,
        }
    }
}

/// Send and receive buffers of one rank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankBuffers<T> {
    pub send: Vec<T>,
    pub recv: Vec<T>,
}

impl<T: Element> RankBuffers<T> {
    /// Zero-filled receive buffer sized for `req`.
    pub fn for_request(req: &CollectiveRequest, send: Vec<T>) -> Self {
        RankBuffers {
            send,
            recv: vec![T::zeroed(); req.recv_len(req.rank)],
        }
    }
}

/// One rank's endpoint on a shared pool.
pub struct Communicator {
    rank: usize,
    nranks: usize,
    pool: PoolHandle,
    doorbells: DoorbellRegion,
    epoch: u64,
    opts: CommOptions,
    trace: Mutex<Vec<TraceEvent>>,
    cached: Option<(CollectiveRequest, u64, CallPlan)>,
}

impl Communicator {
    /// Joins the communicator at the pool's current epoch.
    pub fn new(pool: PoolHandle, rank: usize, nranks: usize, opts: CommOptions) -> Result<Self> {
        if rank >= nranks {
            return Err(Error::InvalidRequest(format!(
                "rank {rank} outside communicator of {nranks}"
            )));
        }
        let doorbells = DoorbellRegion::new(pool.clone());
        let epoch = doorbells.current_epoch()?;
        Ok(Communicator {
            rank,
            nranks,
            pool,
            doorbells,
            epoch,
            opts,
            trace: Mutex::new(Vec::new()),
            cached: None,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn nranks(&self) -> usize {
        self.nranks
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn pool(&self) -> &PoolHandle {
        &self.pool
    }

    pub fn options(&self) -> &CommOptions {
        &self.opts
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        std::mem::take(&mut *self.trace.lock().unwrap())
    }

    fn request(&self, kind: CollectiveKind, count: usize, elem: ElemType) -> CollectiveRequest {
        CollectiveRequest::new(kind, self.rank, self.nranks, count).with_elem(elem)
    }

    pub fn all_reduce<T: Element>(&mut self, send: &[T], recv: &mut [T], op: ReduceOp, chunks: usize) -> Result<()> {
        let req = self
            .request(CollectiveKind::AllReduce, send.len(), T::TYPE)
            .with_op(op)
            .with_chunks(chunks);
        self.run_collective(&req, send, recv)
    }

    pub fn broadcast<T: Element>(&mut self, send: &[T], recv: &mut [T], root: usize, chunks: usize) -> Result<()> {
        let req = self
            .request(CollectiveKind::Broadcast, recv.len(), T::TYPE)
            .with_root(root)
            .with_chunks(chunks);
        self.run_collective(&req, send, recv)
    }

    pub fn reduce<T: Element>(
        &mut self,
        send: &[T],
        recv: &mut [T],
        op: ReduceOp,
        root: usize,
        chunks: usize,
    ) -> Result<()> {
        let req = self
            .request(CollectiveKind::Reduce, send.len(), T::TYPE)
            .with_op(op)
            .with_root(root)
            .with_chunks(chunks);
        self.run_collective(&req, send, recv)
    }

    pub fn all_gather<T: Element>(&mut self, send: &[T], recv: &mut [T], chunks: usize) -> Result<()> {
        let req = self
            .request(CollectiveKind::AllGather, send.len(), T::TYPE)
            .with_chunks(chunks);
        self.run_collective(&req, send, recv)
    }

    pub fn reduce_scatter<T: Element>(&mut self, send: &[T], recv: &mut [T], op: ReduceOp, chunks: usize) -> Result<()> {
        let req = self
            .request(CollectiveKind::ReduceScatter, send.len(), T::TYPE)
            .with_op(op)
            .with_chunks(chunks);
        self.run_collective(&req, send, recv)
    }

    pub fn gather<T: Element>(&mut self, send: &[T], recv: &mut [T], root: usize, chunks: usize) -> Result<()> {
        let req = self
            .request(CollectiveKind::Gather, send.len(), T::TYPE)
            .with_root(root)
            .with_chunks(chunks);
        self.run_collective(&req, send, recv)
    }

    pub fn scatter<T: Element>(&mut self, send: &[T], recv: &mut [T], root: usize, chunks: usize) -> Result<()> {
        let req = self
            .request(CollectiveKind::Scatter, recv.len(), T::TYPE)
            .with_root(root)
            .with_chunks(chunks);
        self.run_collective(&req, send, recv)
    }

    pub fn all_to_all<T: Element>(&mut self, send: &[T], recv: &mut [T], chunks: usize) -> Result<()> {
        let req = self
            .request(CollectiveKind::AllToAll, send.len(), T::TYPE)
            .with_chunks(chunks);
        self.run_collective(&req, send, recv)
    }

    /// Runs one collective call. Every rank of the communicator must call this
    /// with the same request (apart from `rank`).
    pub fn run_collective<T: Element>(&mut self, req: &CollectiveRequest, send: &[T], recv: &mut [T]) -> Result<()> {
        req.validate()?;
        if req.rank != self.rank || req.nranks != self.nranks {
            return Err(Error::InvalidRequest(format!(
                "request for rank {}/{} issued on communicator rank {}/{}",
                req.rank, req.nranks, self.rank, self.nranks
            )));
        }
        if req.elem != T::TYPE {
            return Err(Error::InvalidRequest(format!(
                "request element type {:?} does not match buffer type {:?}",
                req.elem,
                T::TYPE
            )));
        }
        check_len("send buffer", req.send_len(self.rank), send.len())?;
        check_len("recv buffer", req.recv_len(self.rank), recv.len())?;
        self.doorbells.check_epoch(self.epoch)?;

        let parity = self.epoch % 2;
        let stale = match &self.cached {
            Some((r, p, _)) => r != req || *p != parity,
            None => true,
        };
        if stale {
            let plan = CallPlan::build(req, self.pool.config(), self.opts.layout, self.epoch)?;
            self.cached = Some((req.clone(), parity, plan));
        }
        let (_, _, plan) = self.cached.as_ref().unwrap();
        let publish = &plan.publish[self.rank];
        let retrieve = &plan.retrieve[self.rank];

        let exec = Executor {
            rank: self.rank,
            nranks: self.nranks,
            epoch: self.epoch,
            pool: &self.pool,
            doorbells: &self.doorbells,
            timeout: self.opts.timeout,
            trace: if self.opts.trace { Some(&self.trace) } else { None },
            op: req.op,
        };
        exec.schedule_chunks(publish, retrieve, send, recv, self.opts.overlap)?;

        self.doorbells.barrier(self.nranks, self.epoch, self.opts.timeout)?;
        self.epoch = self.doorbells.reset_epoch(self.epoch)?;
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::BufferSize { what, expected, got });
    }
    Ok(())
}

struct Executor<'a> {
    rank: usize,
    nranks: usize,
    epoch: u64,
    pool: &'a PoolHandle,
    doorbells: &'a DoorbellRegion,
    timeout: Duration,
    trace: Option<&'a Mutex<Vec<TraceEvent>>>,
    op: ReduceOp,
}

impl Executor<'_> {
    fn log(&self, queue: Queue, kind: TraceKind, e: &PlanEntry) {
        if let Some(trace) = self.trace {
            let t_ns = self.pool.elapsed_ns();
            trace.lock().unwrap().push(TraceEvent {
                rank: self.rank,
                epoch: self.epoch,
                queue,
                kind,
                chunk_id: e.chunk_id,
                producer: e.producer,
                doorbell: e.doorbell_index,
                device: e.device_index,
                bytes: e.bytes,
                t_ns,
            });
        }
    }

    fn doorbell_id(&self, e: &PlanEntry) -> DoorbellIndex {
        DoorbellIndex {
            index: e.doorbell_index,
            device: e.device_index,
            block: e.device_block_id,
        }
    }

    /// Write queue: copy each chunk into the pool, then ring its doorbell.
    fn publish_all<T: Element>(&self, plan: &PlacementPlan, send: &[T]) -> Result<()> {
        for e in &plan.entries {
            self.log(Queue::Write, TraceKind::PublishStart, e);
            let src = &send[e.buf_offset..e.buf_offset + e.elems];
            self.pool.write(e.pool_address, bytemuck::cast_slice(src))?;
            self.doorbells.doorbell(self.doorbell_id(e))?.ring(self.epoch);
            self.log(Queue::Write, TraceKind::Ring, e);
        }
        Ok(())
    }

    fn fetch<T: Element>(&self, e: &PlanEntry, out: &mut [T]) -> Result<()> {
        debug_assert_eq!(e.bytes as usize, std::mem::size_of_val(out));
        self.log(Queue::Read, TraceKind::WaitStart, e);
        self.doorbells
            .doorbell(self.doorbell_id(e))?
            .wait(self.epoch, self.timeout)?;
        self.log(Queue::Read, TraceKind::WaitReturn, e);
        self.pool.read_into(e.pool_address, bytemuck::cast_slice_mut(out))?;
        self.log(Queue::Read, TraceKind::RetrieveEnd, e);
        Ok(())
    }

    /// Read queue. Copy entries land directly in `recv`; consecutive reduce
    /// entries for the same destination form a group that is staged per
    /// producer and folded in ascending producer order.
    fn retrieve_all<T: Element>(&self, plan: &PlacementPlan, recv: &mut [T]) -> Result<()> {
        let entries = &plan.entries;
        let mut staging: Vec<Vec<T>> = vec![Vec::new(); self.nranks];
        let mut present = vec![false; self.nranks];
        let mut i = 0;
        while i < entries.len() {
            let e = &entries[i];
            match e.combine {
                Combine::Copy => {
                    self.fetch(e, &mut recv[e.buf_offset..e.buf_offset + e.elems])?;
                    i += 1;
                }
                Combine::Reduce => {
                    let mut j = i;
                    present.fill(false);
                    while j < entries.len()
                        && entries[j].combine == Combine::Reduce
                        && entries[j].buf_offset == e.buf_offset
                    {
                        let g = &entries[j];
                        let buf = &mut staging[g.producer];
                        buf.clear();
                        buf.resize(g.elems, T::zeroed());
                        self.fetch(g, buf)?;
                        present[g.producer] = true;
                        j += 1;
                    }
                    let out = &mut recv[e.buf_offset..e.buf_offset + e.elems];
                    let mut first = true;
                    for (q, buf) in staging.iter().enumerate() {
                        if !present[q] {
                            continue;
                        }
                        if first {
                            out.copy_from_slice(buf);
                            first = false;
                        } else {
                            for (o, &x) in out.iter_mut().zip(buf) {
                                *o = o.combine(x, self.op);
                            }
                        }
                    }
                    i = j;
                }
            }
        }
        Ok(())
    }

    fn schedule_chunks<T: Element>(
        &self,
        publish: &PlacementPlan,
        retrieve: &PlacementPlan,
        send: &[T],
        recv: &mut [T],
        overlap: bool,
    ) -> Result<()> {
        if !overlap || publish.is_empty() || retrieve.is_empty() {
            self.publish_all(publish, send)?;
            return self.retrieve_all(retrieve, recv);
        }
        thread::scope(|s| {
            let writer = s.spawn(|| self.publish_all(publish, send));
            let read = self.retrieve_all(retrieve, recv);
            let write = writer.join().expect("write queue panicked");
            write.and(read)
        })
    }
}

/// Runs one call with every rank on its own thread over a shared pool.
/// Returns each rank's receive buffer, and its trace when tracing is enabled.
pub fn run_threads<T: Element>(
    pool: &PoolHandle,
    req: &CollectiveRequest,
    sends: &[Vec<T>],
    opts: &CommOptions,
) -> Result<(Vec<Vec<T>>, Vec<TraceEvent>)> {
    let p = req.nranks;
    if sends.len() != p {
        return Err(Error::BufferSize {
            what: "per-rank send buffers",
            expected: p,
            got: sends.len(),
        });
    }
    let results: Vec<Result<(Vec<T>, Vec<TraceEvent>)>> = thread::scope(|s| {
        let handles: Vec<_> = (0..p)
            .map(|r| {
                let pool = pool.clone();
                let opts = opts.clone();
                let req = req.for_rank(r);
                let send = &sends[r];
                s.spawn(move || {
                    let mut comm = Communicator::new(pool, r, p, opts)?;
                    let mut recv = vec![T::zeroed(); req.recv_len(r)];
                    comm.run_collective(&req, send, &mut recv)?;
                    Ok((recv, comm.take_trace()))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    });
    let mut recvs = Vec::with_capacity(p);
    let mut trace = Vec::new();
    for r in results {
        let (recv, t) = r?;
        recvs.push(recv);
        trace.extend(t);
    }
    trace.sort_by_key(|e| e.t_ns);
    Ok((recvs, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tolerance {
    Exact,
    Ulps(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail {
        rank: usize,
        index: usize,
        expected: String,
        got: String,
    },
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

fn fold_ranks<T: Element>(sends: &[Vec<T>], offset: usize, len: usize, op: ReduceOp) -> Vec<T> {
    let mut out = sends[0][offset..offset + len].to_vec();
    for s in &sends[1..] {
        for (o, &x) in out.iter_mut().zip(&s[offset..offset + len]) {
            *o = o.combine(x, op);
        }
    }
    out
}

/// Expected receive buffer of `rank`, straight from the primitive's definition.
pub fn expected_recv<T: Element>(req: &CollectiveRequest, sends: &[Vec<T>], rank: usize) -> Vec<T> {
    let n = req.count;
    let p = req.nranks;
    let root = req.root;
    match req.kind {
        CollectiveKind::AllReduce => fold_ranks(sends, 0, n, req.op),
        CollectiveKind::Broadcast => sends[root].clone(),
        CollectiveKind::Reduce => {
            if rank == root {
                fold_ranks(sends, 0, n, req.op)
            } else {
                Vec::new()
            }
        }
        CollectiveKind::AllGather => sends.iter().flat_map(|s| s.iter().copied()).collect(),
        CollectiveKind::ReduceScatter => fold_ranks(sends, rank * (n / p), n / p, req.op),
        CollectiveKind::Gather => {
            if rank == root {
                sends.iter().flat_map(|s| s.iter().copied()).collect()
            } else {
                Vec::new()
            }
        }
        CollectiveKind::Scatter => sends[root][rank * n..(rank + 1) * n].to_vec(),
        CollectiveKind::AllToAll => {
            let part = n / p;
            (0..p)
                .flat_map(|q| sends[q][rank * part..(rank + 1) * part].iter().copied())
                .collect()
        }
    }
}

/// Recomputes every rank's result without the pool and compares.
pub fn verify<T: Element>(
    req: &CollectiveRequest,
    sends: &[Vec<T>],
    recvs: &[Vec<T>],
    tolerance: Tolerance,
) -> Verdict {
    for (rank, got) in recvs.iter().enumerate() {
        let want = expected_recv(req, sends, rank);
        if want.len() != got.len() {
            return Verdict::Fail {
                rank,
                index: want.len().min(got.len()),
                expected: format!("{} elements", want.len()),
                got: format!("{} elements", got.len()),
            };
        }
        let limit = match tolerance {
            Tolerance::Exact => 0,
            Tolerance::Ulps(n) => n,
        };
        for (index, (w, g)) in want.iter().zip(got).enumerate() {
            let ok = match tolerance {
                Tolerance::Exact => bytemuck::bytes_of(w) == bytemuck::bytes_of(g),
                Tolerance::Ulps(_) => w.ulps_between(*g) <= limit,
            };
            if !ok {
                return Verdict::Fail {
                    rank,
                    index,
                    expected: format!("{w:?}"),
                    got: format!("{g:?}"),
                };
            }
        }
    }
    Verdict::Pass
}
