use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use epsolute::engine::{Domain, Engine, EngineConfig, Mode, Query, QueryOutcome};
use epsolute::storage::{BackendSpec, Storage};

use crate::dataset::{
    build_database, generate_dataset, payload, read_dataset, DatasetRow, KeyDistribution,
};
use crate::queries::{generate_queries, read_queries, Sampling, Shape};
use crate::scan::LinearScan;
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Engine(Mode),
    LinearScan,
}

impl FromStr for RunMode {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "linear-scan" {
            return Ok(RunMode::LinearScan);
        }
        s.parse::<Mode>()
            .map(RunMode::Engine)
            .map_err(|_| BenchError::Parameter(format!("unknown mode {s:?}")))
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunMode::Engine(m) => m.fmt(f),
            RunMode::LinearScan => f.write_str("linear-scan"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub mode: RunMode,
    /// Records to generate.
    pub n: u64,
    /// Keys lie in `[0, domain)`.
    pub domain: u64,
    /// Payload bytes per record.
    pub record_size: usize,
    pub selectivity: f64,
    pub queries: usize,
    pub distribution: KeyDistribution,
    pub sampling: Sampling,
    pub shape: Shape,
    pub epsilon: f64,
    pub beta: f64,
    pub fanout: u64,
    pub orams: u16,
    pub storage: BackendSpec,
    pub seed: u64,
    /// Read the dataset from this file instead of generating it.
    pub dataset_file: Option<PathBuf>,
    /// Read the queries from this file instead of generating them.
    pub query_file: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            mode: RunMode::Engine(Mode::Gamma),
            n: 10_000,
            domain: 10_000,
            record_size: 4096,
            selectivity: 0.005,
            queries: 100,
            distribution: KeyDistribution::Uniform,
            sampling: Sampling::Uniform,
            shape: Shape::Range,
            epsilon: std::f64::consts::LN_2,
            beta: 2f64.powi(-20),
            fanout: 16,
            orams: 4,
            storage: BackendSpec::Memory,
            seed: 1,
            dataset_file: None,
            query_file: None,
        }
    }
}

/// One metrics row per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub index: String,
    pub true_count: u64,
    pub fetched_count: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub oram_accesses: u64,
    pub roundtrips: u64,
    pub failed: u64,
    pub padded: u64,
    pub storage_a1: Option<f64>,
    pub storage_a2: Option<f64>,
    pub comm_a1: Option<f64>,
    pub comm_a2: Option<f64>,
}

/// Overheads relative to plaintext: stored bytes ≈ a1·(n·record size) + a2
/// and transferred bytes ≈ a1·(result bytes) + a2, the latter fitted by least
/// squares over the non-failed queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub queries: usize,
    pub failed: usize,
    pub storage: (f64, f64),
    pub communication: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Report {
    pub mode: RunMode,
    pub rows: Vec<QueryRow>,
    pub summary: Summary,
    /// IDs returned by each query, empty for failed ones.
    pub results: Vec<Vec<u64>>,
    pub setup_time: Duration,
    pub query_times: Vec<Duration>,
}

impl Report {
    pub fn failed(&self) -> usize {
        self.summary.failed
    }

    /// Mean bytes downloaded per non-failed query.
    pub fn mean_bytes_down(&self) -> f64 {
        let ok: Vec<&QueryRow> = self.rows.iter().filter(|r| r.failed == 0).collect();
        ok.iter().map(|r| r.bytes_down as f64).sum::<f64>() / ok.len().max(1) as f64
    }

    fn summary_row(&self) -> QueryRow {
        let sum = |f: fn(&QueryRow) -> u64| self.rows.iter().map(f).sum();
        QueryRow {
            index: "summary".into(),
            true_count: sum(|r| r.true_count),
            fetched_count: sum(|r| r.fetched_count),
            bytes_up: sum(|r| r.bytes_up),
            bytes_down: sum(|r| r.bytes_down),
            oram_accesses: sum(|r| r.oram_accesses),
            roundtrips: sum(|r| r.roundtrips),
            failed: sum(|r| r.failed),
            padded: sum(|r| r.padded),
            storage_a1: Some(round6(self.summary.storage.0)),
            storage_a2: Some(round6(self.summary.storage.1)),
            comm_a1: Some(round6(self.summary.communication.0)),
            comm_a2: Some(round6(self.summary.communication.1)),
        }
    }

    pub fn write_metrics<W: Write>(&self, w: W) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_writer(w);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.serialize(self.summary_row())?;
        w.flush()?;
        Ok(())
    }

    /// Wall-clock timings, kept apart from the reproducible metrics.
    pub fn write_timings<W: Write>(&self, w: W) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["index", "elapsed_ms"])?;
        w.write_record(["setup".to_string(), ms(self.setup_time)])?;
        for (i, t) in self.query_times.iter().enumerate() {
            w.write_record([i.to_string(), ms(*t)])?;
        }
        w.flush()?;
        Ok(())
    }
}

type Answer = Box<dyn FnMut(&Query) -> Result<QueryOutcome, BenchError>>;

fn ms(d: Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1000.0)
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

pub fn read_metrics(path: &Path) -> Result<Vec<QueryRow>, BenchError> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<Result<Vec<QueryRow>, _>>()?;
    Ok(rows)
}

/// Least-squares line through `(x, y)`. Falls back to a ratio through the
/// origin when all `x` are equal.
pub fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    if points.is_empty() {
        return (0.0, 0.0);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return if mx > 0.0 { (my / mx, 0.0) } else { (0.0, my) };
    }
    let a1 = sxy / sxx;
    (a1, my - a1 * mx)
}

/// Generate (or load) the workload, then run it.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report, BenchError> {
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
    let storage = Storage::connect(&spec.storage)?;
    run_workload(spec, &rows, &queries, &storage)
}

/// Answer `queries` over `rows`, checking every answer against a filter of
/// the dataset and the regenerated payloads.
pub fn run_workload(
    spec: &ExperimentSpec,
    rows: &[DatasetRow],
    queries: &[Query],
    storage: &Storage,
) -> Result<Report, BenchError> {
    let db = build_database(rows, spec.seed, spec.record_size)?;
    let domain = Domain::new(0, spec.domain as i64 - 1)?;
    let plaintext = (db.len() * db.record_size()) as f64;

    let setup_start = Instant::now();
    let (mut answer, server_bytes): (Answer, u64) = match spec.mode {
        RunMode::Engine(mode) => {
            let config = EngineConfig::new(mode, spec.orams)
                .with_epsilon(spec.epsilon)
                .with_beta(spec.beta)
                .with_fanout(spec.fanout)
                .with_seed(spec.seed);
            let mut engine = Engine::setup(&db, domain, config, storage)?;
            let bytes = engine.server_bytes();
            (Box::new(move |q| Ok(engine.query(q)?)), bytes)
        }
        RunMode::LinearScan => {
            let mut scan = LinearScan::setup(&db, storage, spec.orams as usize, spec.seed)?;
            let bytes = scan.server_bytes();
            (Box::new(move |q| scan.query(q)), bytes)
        }
    };
    let setup_time = setup_start.elapsed();

    let mut out_rows = Vec::with_capacity(queries.len());
    let mut results = Vec::with_capacity(queries.len());
    let mut times = Vec::with_capacity(queries.len());
    let mut fit = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let outcome = answer(q)?;
        let m = &outcome.metrics;
        let ids: Vec<u64> = outcome.records.iter().map(|r| r.id).collect();
        if !m.failed {
            let expected: Vec<u64> = rows
                .iter()
                .filter(|r| q.matches(r.key))
                .map(|r| r.id)
                .collect();
            let mut expected = expected;
            expected.sort_unstable();
            if ids != expected {
                return Err(BenchError::Mismatch {
                    index: i,
                    detail: format!(
                        "returned {} records, expected {}",
                        ids.len(),
                        expected.len()
                    ),
                });
            }
            if let Some(r) = outcome
                .records
                .iter()
                .find(|r| r.payload != payload(spec.seed, r.id, spec.record_size))
            {
                return Err(BenchError::Mismatch {
                    index: i,
                    detail: format!("payload of record {} differs", r.id),
                });
            }
            fit.push((
                (ids.len() * spec.record_size) as f64,
                (m.bytes_up + m.bytes_down) as f64,
            ));
        }
        out_rows.push(QueryRow {
            index: i.to_string(),
            true_count: m.true_count,
            fetched_count: m.fetched_count,
            bytes_up: m.bytes_up,
            bytes_down: m.bytes_down,
            oram_accesses: m.oram_accesses,
            roundtrips: m.roundtrips,
            failed: u64::from(m.failed),
            padded: m.padded,
            storage_a1: None,
            storage_a2: None,
            comm_a1: None,
            comm_a2: None,
        });
        results.push(ids);
        times.push(m.elapsed);
    }

    let summary = Summary {
        queries: queries.len(),
        failed: out_rows.iter().filter(|r| r.failed == 1).count(),
        storage: (server_bytes as f64 / plaintext, 0.0),
        communication: fit_line(&fit),
    };
    Ok(Report {
        mode: spec.mode,
        rows: out_rows,
        summary,
        results,
        setup_time,
        query_times: times,
    })
}
