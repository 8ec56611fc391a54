//! Sweep harness behind the `poolbench` binary.
//!
//! A sweep runs each collective kind over a geometric range of message sizes.
//! Data-moving backends time `iters` calls after `warmup` untimed ones and
//! check the last call against the oracle; the emulator backend reports the
//! model's predicted latency instead.
//!
//! The file backend runs every rank as a separate process. The launcher maps
//! the pool file, writes a job description and starts one `poolbench worker`
//! per rank; each worker leaves its receive buffer and timings in the job
//! directory for the launcher to check.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::str::FromStr;
use std::sync::Barrier;
use std::thread;
use std::time::{Duration, Instant};

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::collectives::{verify, CommOptions, Communicator, Element, Tolerance, Verdict};
use crate::doorbell::DEFAULT_TIMEOUT;
use crate::emulator::{predict, BandwidthModel, Variant};
use crate::error::{Error, Result};
use crate::placement::{size_pool, CallPlan, Layout};
use crate::pool::{map_pool, Backend, PoolConfig, MIB};
use crate::request::{CollectiveKind, CollectiveRequest, ElemType};

/// Dispatches a generic call on the runtime element type.
macro_rules! with_elem {
    ($elem:expr, $t:ident => $body:expr) => {
        match $elem {
            ElemType::I32 => {
                type $t = i32;
                $body
            }
            ElemType::I64 => {
                type $t = i64;
                $body
            }
            ElemType::F32 => {
                type $t = f32;
                $body
            }
            ElemType::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Rank threads over an in-process arena.
    #[default]
    Shared,
    /// Rank processes over a mapped pool file.
    File,
    /// Predicted latency from the bandwidth model; nothing is moved.
    Emulator,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Shared => "shared",
            BackendKind::File => "file",
            BackendKind::Emulator => "emulator",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shared" | "sharedarena" | "arena" => Ok(BackendKind::Shared),
            "file" | "filemapped" | "mmap" => Ok(BackendKind::File),
            "emulator" | "emu" | "model" => Ok(BackendKind::Emulator),
            _ => Err(Error::InvalidConfig(format!("unknown backend {s:?}"))),
        }
    }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::All => "all",
        Variant::Aggregate => "aggregate",
        Variant::Naive => "naive",
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub kinds: Vec<CollectiveKind>,
    pub min_bytes: u64,
    pub max_bytes: u64,
    pub step_factor: u64,
    pub nranks: usize,
    pub num_devices: usize,
    pub chunks: usize,
    pub backend: BackendKind,
    pub placement: Variant,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    pub elem: ElemType,
    pub timeout: Duration,
    pub model: BandwidthModel,
    /// Directory for pool files and worker output (file backend). A fresh
    /// temporary directory is used when unset.
    pub work_dir: Option<PathBuf>,
    /// Binary started for each rank of the file backend; the running
    /// executable when unset.
    pub worker_exe: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            kinds: vec![CollectiveKind::AllReduce],
            min_bytes: MIB,
            max_bytes: 4 * MIB,
            step_factor: 2,
            nranks: 3,
            num_devices: 6,
            chunks: 4,
            backend: BackendKind::Shared,
            placement: Variant::All,
            iters: 5,
            warmup: 1,
            seed: 1,
            elem: ElemType::I32,
            timeout: DEFAULT_TIMEOUT,
            model: BandwidthModel::default(),
            work_dir: None,
            worker_exe: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.kinds.is_empty() {
            return bad("no collective kinds selected".into());
        }
        if self.min_bytes == 0 || self.min_bytes > self.max_bytes {
            return bad(format!(
                "need 0 < min_bytes <= max_bytes, got {}..{}",
                self.min_bytes, self.max_bytes
            ));
        }
        if self.step_factor < 2 {
            return bad(format!("step factor must exceed 1, got {}", self.step_factor));
        }
        if self.warmup < 1 {
            return bad("warmup must be at least 1".into());
        }
        if self.iters < 1 {
            return bad("iters must be at least 1".into());
        }
        if self.nranks == 0 || self.num_devices == 0 || self.chunks == 0 {
            return bad("ranks, devices and chunks must be positive".into());
        }
        self.model.validate()
    }

    /// Message sizes of the sweep: `min_bytes`, then multiples by
    /// `step_factor` while they stay within `max_bytes`.
    pub fn sizes(&self) -> impl Iterator<Item = u64> + '_ {
        std::iter::successors(Some(self.min_bytes), move |&s| s.checked_mul(self.step_factor))
            .take_while(move |&s| s <= self.max_bytes)
    }

    fn options(&self) -> CommOptions {
        CommOptions {
            layout: self.placement.layout(),
            overlap: self.placement.overlap(),
            timeout: self.timeout,
            trace: false,
        }
    }
}

/// Request moving roughly `msg_bytes` per rank. The element count is rounded
/// down to a multiple of `nranks` for kinds that split the message.
pub fn bench_request(
    kind: CollectiveKind,
    nranks: usize,
    msg_bytes: u64,
    chunks: usize,
    elem: ElemType,
) -> CollectiveRequest {
    let mut count = (msg_bytes as usize / elem.size()).max(1);
    if kind.needs_divisible_count() {
        count = (count / nranks).max(1) * nranks;
    }
    CollectiveRequest::new(kind, 0, nranks, count)
        .with_elem(elem)
        .with_chunks(chunks)
}

/// Pool geometry that holds `req` under `layout`. Sequential allocation may
/// need more room than the interleaved minimum, so capacity grows until the
/// plan fits.
pub fn pool_for(req: &CollectiveRequest, num_devices: usize, layout: Layout) -> Result<PoolConfig> {
    let mut cfg = size_pool(req, num_devices)?;
    for _ in 0..8 {
        match CallPlan::build(req, &cfg, layout, 0).and(CallPlan::build(req, &cfg, layout, 1)) {
            Ok(_) => return Ok(cfg),
            Err(Error::CapacityExceeded { .. }) => {
                let db = cfg.doorbell_region_size;
                cfg = PoolConfig::new(num_devices, cfg.device_capacity * 2).with_doorbell_region(db);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidConfig(format!("no pool geometry found for {req:?}")))
}

/// Deterministic payload of `rank`: element `i` depends only on `(seed, rank, i)`.
pub fn payload<T: Element>(seed: u64, rank: usize, len: usize) -> Vec<T> {
    let mut rng = SplitMix64::seed_from_u64(seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..len).map(|_| T::from_random(rng.next_u64())).collect()
}

fn payloads<T: Element>(req: &CollectiveRequest, seed: u64) -> Vec<Vec<T>> {
    (0..req.nranks)
        .map(|r| payload(seed, r, req.send_len(r)))
        .collect()
}

/// One line of a sweep report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: CollectiveKind,
    pub backend: BackendKind,
    pub placement: Variant,
    pub nranks: usize,
    pub nd: usize,
    pub msg_bytes: u64,
    pub chunks: usize,
    pub iters: usize,
    pub median_s: f64,
    pub p95_s: f64,
    /// Empty for the emulator, which moves no data.
    pub verified: Option<bool>,
}

/// Rows whose last call passed the oracle (or that came from the emulator),
/// plus a description of every case that failed.
#[derive(Clone, Debug, Default)]
pub struct SweepReport {
    pub rows: Vec<BenchRow>,
    pub failures: Vec<String>,
}

impl SweepReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "kind", "backend", "placement", "nranks", "nd", "msg_bytes", "chunks", "iters", "median_s",
    "p95_s", "verified",
];

pub fn write_report<W: std::io::Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.kind.name().to_string(),
            r.backend.name().to_string(),
            variant_name(r.placement).to_string(),
            r.nranks.to_string(),
            r.nd.to_string(),
            r.msg_bytes.to_string(),
            r.chunks.to_string(),
            r.iters.to_string(),
            format!("{:.9}", r.median_s),
            format!("{:.9}", r.p95_s),
            r.verified.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<BenchRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::InvalidConfig(format!(
                "{}: expected {} columns, found {}",
                path.display(),
                CSV_HEADER.len(),
                rec.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad number {:?} in column {}", &rec[i], CSV_HEADER[i])))
        };
        rows.push(BenchRow {
            kind: rec[0].parse()?,
            backend: rec[1].parse()?,
            placement: rec[2].parse()?,
            nranks: num(3)? as usize,
            nd: num(4)? as usize,
            msg_bytes: num(5)? as u64,
            chunks: num(6)? as usize,
            iters: num(7)? as usize,
            median_s: num(8)?,
            p95_s: num(9)?,
            verified: match &rec[10] {
                "" => None,
                v => Some(v == "true"),
            },
        });
    }
    Ok(rows)
}

/// `(median, p95)` of the samples, nearest-rank p95.
pub fn summarize(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (median, s[rank - 1])
}

/// Per-iteration latency: the slowest rank of each timed iteration.
fn iteration_latency(per_rank: &[Vec<f64>]) -> Vec<f64> {
    let iters = per_rank.iter().map(Vec::len).min().unwrap_or(0);
    (0..iters)
        .map(|i| per_rank.iter().map(|t| t[i]).fold(0.0, f64::max))
        .collect()
}

/// Runs `warmup + iters` calls on one rank and returns the final receive
/// buffer and the timed latencies.
fn rank_loop<T: Element>(
    comm: &mut Communicator,
    req: &CollectiveRequest,
    send: &[T],
    warmup: usize,
    iters: usize,
    start_gate: Option<&Barrier>,
) -> Result<(Vec<T>, Vec<f64>)> {
    let mut recv = vec![T::zeroed(); req.recv_len(req.rank)];
    let mut times = Vec::with_capacity(iters);
    for i in 0..warmup + iters {
        if let Some(b) = start_gate {
            b.wait();
        }
        recv.fill(T::zeroed());
        let t0 = Instant::now();
        comm.run_collective(req, send, &mut recv)?;
        if i >= warmup {
            times.push(t0.elapsed().as_secs_f64());
        }
    }
    Ok((recv, times))
}

fn run_shared<T: Element>(cfg: &BenchConfig, req: &CollectiveRequest) -> Result<(Vec<f64>, Verdict)> {
    let pool = map_pool(pool_for(req, cfg.num_devices, cfg.placement.layout())?)?;
    let sends = payloads::<T>(req, cfg.seed);
    let p = req.nranks;
    let gate = Barrier::new(p);
    let opts = cfg.options();
    let results: Vec<Result<(Vec<T>, Vec<f64>)>> = thread::scope(|s| {
        let handles: Vec<_> = (0..p)
            .map(|r| {
                let (pool, opts, gate) = (pool.clone(), opts.clone(), &gate);
                let req = req.for_rank(r);
                let send = &sends[r];
                s.spawn(move || {
                    let mut comm = Communicator::new(pool, r, p, opts)?;
                    rank_loop(&mut comm, &req, send, cfg.warmup, cfg.iters, Some(gate))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    });
    let mut recvs = Vec::with_capacity(p);
    let mut times = Vec::with_capacity(p);
    for r in results {
        let (recv, t) = r?;
        recvs.push(recv);
        times.push(t);
    }
    Ok((iteration_latency(&times), verify(req, &sends, &recvs, Tolerance::Exact)))
}

/// Everything a worker process needs to run its rank of one case.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkerJob {
    pub request: CollectiveRequest,
    pub pool: PoolConfig,
    pub layout: Layout,
    pub overlap: bool,
    pub timeout_ms: u64,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct WorkerTimes {
    times: Vec<f64>,
}

fn recv_path(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("recv-{rank}.bin"))
}

fn times_path(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("times-{rank}.json"))
}

fn worker_typed<T: Element>(job: &WorkerJob, rank: usize) -> Result<()> {
    let req = job.request.for_rank(rank);
    let pool = map_pool(job.pool.clone())?;
    let opts = CommOptions {
        layout: job.layout,
        overlap: job.overlap,
        timeout: Duration::from_millis(job.timeout_ms),
        trace: false,
    };
    let mut comm = Communicator::new(pool, rank, req.nranks, opts)?;
    let send = payload::<T>(job.seed, rank, req.send_len(rank));
    let (recv, times) = rank_loop(&mut comm, &req, &send, job.warmup, job.iters, None)?;
    fs::write(recv_path(&job.out_dir, rank), bytemuck::cast_slice::<T, u8>(&recv))?;
    fs::write(times_path(&job.out_dir, rank), serde_json::to_vec(&WorkerTimes { times })?)?;
    Ok(())
}

/// Entry point of a worker process: runs `rank` of the job at `job_path`.
pub fn run_worker(job_path: &Path, rank: usize) -> Result<()> {
    let job: WorkerJob = serde_json::from_slice(&fs::read(job_path)?)?;
    if rank >= job.request.nranks {
        return Err(Error::Worker(format!("rank {rank} outside {} ranks", job.request.nranks)));
    }
    with_elem!(job.request.elem, T => worker_typed::<T>(&job, rank))
}

fn run_file<T: Element>(cfg: &BenchConfig, req: &CollectiveRequest, dir: &Path, case: usize) -> Result<(Vec<f64>, Verdict)> {
    let out_dir = dir.join(format!("case-{case}"));
    fs::create_dir_all(&out_dir)?;
    let pool_file = out_dir.join("pool.bin");
    let _ = fs::remove_file(&pool_file);
    let pool_cfg = pool_for(req, cfg.num_devices, cfg.placement.layout())?
        .with_backend(Backend::FileMapped(pool_file.clone()));
    // Creates the zeroed file image; workers attach to it.
    drop(map_pool(pool_cfg.clone())?);

    let job = WorkerJob {
        request: req.clone(),
        pool: pool_cfg,
        layout: cfg.placement.layout(),
        overlap: cfg.placement.overlap(),
        timeout_ms: cfg.timeout.as_millis() as u64,
        warmup: cfg.warmup,
        iters: cfg.iters,
        seed: cfg.seed,
        out_dir: out_dir.clone(),
    };
    let job_path = out_dir.join("job.json");
    fs::write(&job_path, serde_json::to_vec_pretty(&job)?)?;

    let exe = match &cfg.worker_exe {
        Some(p) => p.clone(),
        None => std::env::current_exe()?,
    };
    let children: Vec<Child> = (0..req.nranks)
        .map(|r| {
            Command::new(&exe)
                .arg("worker")
                .arg("--job")
                .arg(&job_path)
                .arg("--rank")
                .arg(r.to_string())
                .spawn()
        })
        .collect::<std::io::Result<_>>()?;
    let mut failed = Vec::new();
    for (r, mut c) in children.into_iter().enumerate() {
        let status = c.wait()?;
        if !status.success() {
            failed.push(format!("rank {r}: {status}"));
        }
    }
    if !failed.is_empty() {
        return Err(Error::Worker(failed.join(", ")));
    }

    let sends = payloads::<T>(req, cfg.seed);
    let mut recvs = Vec::with_capacity(req.nranks);
    let mut times = Vec::with_capacity(req.nranks);
    for r in 0..req.nranks {
        let bytes = fs::read(recv_path(&out_dir, r))?;
        if bytes.len() != req.recv_len(r) * std::mem::size_of::<T>() {
            return Err(Error::Worker(format!("rank {r} wrote {} bytes", bytes.len())));
        }
        let mut recv = vec![T::zeroed(); req.recv_len(r)];
        bytemuck::cast_slice_mut::<T, u8>(&mut recv).copy_from_slice(&bytes);
        recvs.push(recv);
        let t: WorkerTimes = serde_json::from_slice(&fs::read(times_path(&out_dir, r))?)?;
        times.push(t.times);
    }
    let _ = fs::remove_file(&pool_file);
    Ok((iteration_latency(&times), verify(req, &sends, &recvs, Tolerance::Exact)))
}


/// Runs the sweep. Verification failures are collected in the report rather
/// than returned as errors; doorbell timeouts and bad geometry abort.
pub fn run_sweep(cfg: &BenchConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let tmp;
    let dir = match (&cfg.work_dir, cfg.backend) {
        (Some(d), _) => {
            fs::create_dir_all(d)?;
            d.clone()
        }
        (None, BackendKind::File) => {
            tmp = tempfile::Builder::new().prefix("poolbench-").tempdir()?;
            tmp.path().to_path_buf()
        }
        (None, _) => PathBuf::new(),
    };
    let mut report = SweepReport::default();
    let mut case = 0;
    for &kind in &cfg.kinds {
        for msg in cfg.sizes() {
            let chunks = cfg.placement.chunks(cfg.chunks);
            let req = bench_request(kind, cfg.nranks, msg, chunks, cfg.elem);
            req.validate()?;
            let mut row = BenchRow {
                kind,
                backend: cfg.backend,
                placement: cfg.placement,
                nranks: cfg.nranks,
                nd: cfg.num_devices,
                msg_bytes: msg,
                chunks,
                iters: cfg.iters,
                median_s: 0.0,
                p95_s: 0.0,
                verified: None,
            };
            let (lat, verdict) = match cfg.backend {
                BackendKind::Emulator => {
                    let t = predict(&req, cfg.num_devices, cfg.placement, &cfg.model)?.total_latency;
                    (vec![t], None)
                }
                BackendKind::Shared => {
                    let (l, v) = with_elem!(cfg.elem, T => run_shared::<T>(cfg, &req))?;
                    (l, Some(v))
                }
                BackendKind::File => {
                    case += 1;
                    let (l, v) = with_elem!(cfg.elem, T => run_file::<T>(cfg, &req, &dir, case))?;
                    (l, Some(v))
                }
            };
            (row.median_s, row.p95_s) = summarize(&lat);
            match verdict {
                None => report.rows.push(row),
                Some(Verdict::Pass) => {
                    row.verified = Some(true);
                    report.rows.push(row);
                }
                Some(Verdict::Fail { rank, index, expected, got }) => report.failures.push(format!(
                    "{kind} {msg} B x{} ranks: rank {rank} element {index}: expected {expected}, got {got}",
                    cfg.nranks
                )),
            }
        }
    }
    Ok(report)
}

/// Ratio of two reports, matched on `(kind, nranks, nd, msg_bytes)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub kind: CollectiveKind,
    pub nranks: usize,
    pub nd: usize,
    pub msg_bytes: u64,
    pub a_median_s: f64,
    pub b_median_s: f64,
    /// `b / a`: above 1 when `a` is faster.
    pub speedup: f64,
}

pub fn compare(a: &[BenchRow], b: &[BenchRow]) -> Result<Vec<SpeedupRow>> {
    let key = |r: &BenchRow| (r.kind, r.nranks, r.nd, r.msg_bytes);
    if a.len() != b.len() {
        return Err(Error::RowMismatch(format!("{} rows vs {} rows", a.len(), b.len())));
    }
    a.iter()
        .map(|ra| {
            let rb = b
                .iter()
                .find(|rb| key(rb) == key(ra))
                .ok_or_else(|| Error::RowMismatch(format!("no match for {} at {} B", ra.kind, ra.msg_bytes)))?;
            Ok(SpeedupRow {
                kind: ra.kind,
                nranks: ra.nranks,
                nd: ra.nd,
                msg_bytes: ra.msg_bytes,
                a_median_s: ra.median_s,
                b_median_s: rb.median_s,
                speedup: rb.median_s / ra.median_s,
            })
        })
        .collect()
}

pub fn write_speedups<W: std::io::Write>(rows: &[SpeedupRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
