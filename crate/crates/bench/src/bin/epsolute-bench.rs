use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use epsolute::engine::Mode;
use epsolute::storage::{BackendSpec, Storage};
use epsolute_bench::dataset::{
    generate_dataset, read_dataset, read_histogram, write_dataset, KeyDistribution,
};
use epsolute_bench::queries::{generate_queries, read_queries, write_queries, Sampling, Shape};
use epsolute_bench::runner::{run_workload, ExperimentSpec, RunMode};
use epsolute_bench::BenchError;

/// Run a query workload against the engine or the linear-scan baseline and
/// write per-query metrics as CSV.
///
/// Exit status is 0 when every query succeeded, 2 when some query exceeded
/// its request budget, 1 on any error including bad arguments.
#[derive(Debug, Parser)]
#[command(name = "epsolute-bench", version)]
struct Args {
    /// single, no-gamma, gamma or linear-scan
    #[arg(long, default_value = "gamma")]
    mode: RunMode,
    /// Number of records
    #[arg(long, default_value_t = 10_000)]
    n: u64,
    /// Domain size; keys lie in [0, domain)
    #[arg(long, default_value_t = 10_000)]
    domain: u64,
    /// Payload bytes per record
    #[arg(long, default_value_t = 4096)]
    record_size: usize,
    /// Fraction of the domain covered by a range query
    #[arg(long, default_value_t = 0.005)]
    selectivity: f64,
    /// Number of queries
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long, default_value_t = std::f64::consts::LN_2)]
    epsilon: f64,
    #[arg(long, default_value_t = 2f64.powi(-20))]
    beta: f64,
    /// Aggregate tree fanout
    #[arg(long, default_value_t = 16)]
    fanout: u64,
    /// Number of ORAMs (linear scan: download workers); 1 in single mode, else 4
    #[arg(long)]
    orams: Option<u16>,
    /// memory, disk, disk=PATH or remote=HOST:PORT
    #[arg(long, default_value = "memory")]
    storage: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Metrics CSV; stdout when absent. Timings go to <out>.timings.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Key histogram CSV (lo,hi,weight) instead of uniform keys
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// uniform or cdf
    #[arg(long, default_value = "uniform")]
    query_sampling: Sampling,
    /// range or point
    #[arg(long, default_value = "range")]
    query_kind: Shape,
    /// Load the dataset instead of generating it
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Load the queries instead of generating them
    #[arg(long)]
    query_file: Option<PathBuf>,
    /// Save the generated dataset here
    #[arg(long)]
    write_dataset: Option<PathBuf>,
    /// Save the generated queries here
    #[arg(long)]
    write_queries: Option<PathBuf>,
}

fn backend(arg: &str) -> Result<(BackendSpec, Option<PathBuf>), BenchError> {
    if arg == "disk" {
        // a fresh log file, removed after the run
        let path = std::env::temp_dir().join(format!("epsolute-bench-{}.kvs", std::process::id()));
        let _ = std::fs::remove_file(&path);
        return Ok((BackendSpec::Disk(path.clone()), Some(path)));
    }
    Ok((arg.parse()?, None))
}

fn timings_path(out: &Path) -> PathBuf {
    out.with_extension("timings.csv")
}

fn run(args: &Args) -> Result<usize, BenchError> {
    let distribution = match &args.histogram {
        Some(path) => KeyDistribution::Histogram(read_histogram(path)?),
        None => KeyDistribution::Uniform,
    };
    let (storage_spec, scratch) = backend(&args.storage)?;
    let spec = ExperimentSpec {
        mode: args.mode,
        n: args.n,
        domain: args.domain,
        record_size: args.record_size,
        selectivity: args.selectivity,
        queries: args.queries,
        distribution,
        sampling: args.query_sampling,
        shape: args.query_kind,
        epsilon: args.epsilon,
        beta: args.beta,
        fanout: args.fanout,
        orams: args.orams.unwrap_or(match args.mode {
            RunMode::Engine(Mode::Single) => 1,
            _ => 4,
        }),
        storage: storage_spec,
        seed: args.seed,
        dataset_file: args.dataset.clone(),
        query_file: args.query_file.clone(),
    };

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let rows = match &spec.dataset_file {
        Some(path) => read_dataset(path)?,
        None => generate_dataset(spec.n, spec.domain, &spec.distribution, &mut rng)?,
    };
    let queries = match &spec.query_file {
        Some(path) => read_queries(path)?,
        None => generate_queries(
            spec.queries,
            spec.domain,
            spec.selectivity,
            spec.sampling,
            spec.shape,
            &rows,
            &mut rng,
        )?,
    };
    if let Some(path) = &args.write_dataset {
        write_dataset(path, &rows)?;
    }
    if let Some(path) = &args.write_queries {
        write_queries(path, &queries)?;
    }

    let storage = Storage::connect(&spec.storage)?;
    let report = run_workload(&spec, &rows, &queries, &storage);
    drop(storage);
    if let Some(path) = scratch {
        let _ = std::fs::remove_file(path);
    }
    let report = report?;

    match &args.out {
        Some(path) => {
            report.write_metrics(BufWriter::new(File::create(path)?))?;
            report.write_timings(BufWriter::new(File::create(timings_path(path))?))?;
        }
        None => report.write_metrics(io::stdout().lock())?,
    }
    let s = &report.summary;
    let mut err = io::stderr().lock();
    let _ = writeln!(
        err,
        "{}: {} queries, {} failed, mean bytes_down {:.0}, storage a1 {:.3}, communication a1 {:.3} a2 {:.0}, setup {:.1} ms",
        report.mode,
        s.queries,
        s.failed,
        report.mean_bytes_down(),
        s.storage.0,
        s.communication.0,
        s.communication.1,
        report.setup_time.as_secs_f64() * 1000.0,
    );
    Ok(s.failed)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            // keep 2 for failed queries
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&args) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
