use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use poolcomm::bench::{self, BackendKind, BenchConfig};
use poolcomm::emulator::{self, Scenario, Variant};
use poolcomm::placement::CallPlan;
use poolcomm::request::{CollectiveKind, ElemType};

/// Collective sweeps over a shared memory pool, or over its bandwidth model.
#[derive(Parser, Debug)]
#[command(name = "poolbench", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Option<Cmd>,
    #[command(flatten)]
    sweep: SweepArgs,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Per-row speedup of report B over report A (B median / A median).
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs one rank of a file-backend job (started by the launcher).
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        rank: usize,
    },
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Collective kinds, comma separated, or "all".
    #[arg(long, default_value = "allreduce", value_delimiter = ',')]
    kind: Vec<String>,
    /// Smallest message, e.g. 1K, 4M, 1G.
    #[arg(long, default_value = "1M", value_parser = parse_size)]
    minbytes: u64,
    #[arg(long, default_value = "4M", value_parser = parse_size)]
    maxbytes: u64,
    #[arg(long, default_value_t = 2)]
    stepfactor: u64,
    #[arg(long, default_value_t = 3)]
    nranks: usize,
    #[arg(long, default_value_t = 6)]
    nd: usize,
    #[arg(long, default_value_t = 4)]
    chunks: usize,
    /// shared, file or emulator.
    #[arg(long, default_value = "shared")]
    backend: BackendKind,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// i32, i64, f32 or f64.
    #[arg(long, default_value = "i32")]
    elem: ElemType,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// all, aggregate or naive.
    #[arg(long, default_value = "all")]
    placement: Variant,
    /// Emulator scenario (JSON or TOML); replaces the sweep flags.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Doorbell wait timeout in milliseconds.
    #[arg(long, default_value_t = 5000, env = "POOLBENCH_TIMEOUT_MS")]
    timeout: u64,
    /// Directory for pool files of the file backend.
    #[arg(long)]
    pool_dir: Option<PathBuf>,
    /// Print every rank's placement plan as JSON lines to stderr.
    #[arg(long)]
    dump_plans: bool,
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, mult) = match s.chars().last() {
        Some('K' | 'k') => (&s[..s.len() - 1], 1u64 << 10),
        Some('M' | 'm') => (&s[..s.len() - 1], 1 << 20),
        Some('G' | 'g') => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(mult))
        .ok_or_else(|| format!("bad size {s:?}"))
}

fn out_writer(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn kinds(names: &[String]) -> poolcomm::Result<Vec<CollectiveKind>> {
    if names.iter().any(|n| n.eq_ignore_ascii_case("all")) {
        return Ok(CollectiveKind::ALL.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn dump_plans(cfg: &BenchConfig) -> poolcomm::Result<()> {
    let mut err = io::stderr().lock();
    for &kind in &cfg.kinds {
        for msg in cfg.sizes() {
            let req = bench::bench_request(kind, cfg.nranks, msg, cfg.placement.chunks(cfg.chunks), cfg.elem);
            let pool = bench::pool_for(&req, cfg.num_devices, cfg.placement.layout())?;
            let call = CallPlan::build(&req, &pool, cfg.placement.layout(), 0)?;
            for (r, (p, q)) in call.publish.iter().zip(&call.retrieve).enumerate() {
                writeln!(err, "# {kind} {msg} B rank {r} publish")?;
                err.write_all(p.to_json_lines()?.as_bytes())?;
                writeln!(err, "# {kind} {msg} B rank {r} retrieve")?;
                err.write_all(q.to_json_lines()?.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> poolcomm::Result<bool> {
    if let Some(path) = &a.scenario {
        let rows = Scenario::load(path)?.run()?;
        emulator::write_csv(&rows, out_writer(&a.out)?)?;
        return Ok(true);
    }
    let cfg = BenchConfig {
        kinds: kinds(&a.kind)?,
        min_bytes: a.minbytes,
        max_bytes: a.maxbytes,
        step_factor: a.stepfactor,
        nranks: a.nranks,
        num_devices: a.nd,
        chunks: a.chunks,
        backend: a.backend,
        placement: a.placement,
        iters: a.iters,
        warmup: a.warmup,
        seed: a.seed,
        elem: a.elem,
        timeout: Duration::from_millis(a.timeout),
        work_dir: a.pool_dir,
        ..Default::default()
    };
    cfg.validate()?;
    if a.dump_plans {
        dump_plans(&cfg)?;
    }
    let report = bench::run_sweep(&cfg)?;
    bench::write_report(&report.rows, out_writer(&a.out)?)?;
    for f in &report.failures {
        eprintln!("verification failed: {f}");
    }
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Some(Cmd::Worker { job, rank }) => bench::run_worker(&job, rank).map(|_| true),
        Some(Cmd::Compare { a, b, out }) => (|| {
            let rows = bench::compare(&bench::read_report(&a)?, &bench::read_report(&b)?)?;
            bench::write_speedups(&rows, out_writer(&out)?)?;
            Ok(true)
        })(),
        None => sweep(cli.sweep),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("poolbench: {e}");
            ExitCode::from(2)
        }
    }
}
