use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use epsolute::crypto::BlockCipher;
use epsolute::engine::{Mode, QueryKind};
use epsolute::storage::Storage;
use epsolute_bench::dataset::{
    generate_dataset, payload, read_dataset, read_histogram, write_dataset, HistogramBin,
    KeyDistribution,
};
use epsolute_bench::queries::{
    generate_queries, range_width, read_queries, write_queries, Sampling, Shape,
};
use epsolute_bench::runner::{
    fit_line, read_metrics, run_experiment, run_workload, ExperimentSpec, RunMode,
};
use epsolute_bench::BenchError;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn small_spec(mode: RunMode) -> ExperimentSpec {
    ExperimentSpec {
        mode,
        n: 1000,
        domain: 1000,
        record_size: 64,
        selectivity: 0.01,
        queries: 100,
        orams: 4,
        ..ExperimentSpec::default()
    }
}

#[test]
fn uniform_keys_are_flat() {
    let rows = generate_dataset(1000, 100, &KeyDistribution::Uniform, &mut rng(3)).unwrap();
    let mut counts = [0f64; 100];
    for r in &rows {
        assert!((0..100).contains(&r.key));
        counts[r.key as usize] += 1.0;
    }
    let stat: f64 = counts.iter().map(|c| (c - 10.0).powi(2) / 10.0).sum();
    let p = ChiSquared::new(99.0).unwrap().sf(stat);
    assert!(p > 0.001, "chi-square {stat}, p {p}");
    let ids: Vec<u64> = rows.iter().map(|r| r.id).collect();
    assert_eq!(ids, (0..1000).collect::<Vec<_>>());
}

#[test]
fn histogram_proportions_are_kept() {
    let bins = vec![
        HistogramBin {
            lo: 0,
            hi: 10,
            weight: 1.0,
        },
        HistogramBin {
            lo: 10,
            hi: 50,
            weight: 3.0,
        },
        HistogramBin {
            lo: 50,
            hi: 100,
            weight: 6.0,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hist.csv");
    std::fs::write(&path, "lo,hi,weight\n0,10,1\n10,50,3\n50,100,6\n").unwrap();
    assert_eq!(read_histogram(&path).unwrap(), bins);

    let n = 10_000;
    let rows = generate_dataset(
        n,
        100,
        &KeyDistribution::Histogram(bins.clone()),
        &mut rng(4),
    )
    .unwrap();
    for b in &bins {
        let share = rows
            .iter()
            .filter(|r| r.key >= b.lo && r.key < b.hi)
            .count() as f64
            / n as f64;
        assert!(
            (share - b.weight / 10.0).abs() <= 0.02,
            "bin [{}, {}) share {share}",
            b.lo,
            b.hi
        );
    }
}

#[test]
fn dataset_parameter_errors() {
    assert!(matches!(
        generate_dataset(0, 100, &KeyDistribution::Uniform, &mut rng(0)),
        Err(BenchError::Parameter(_))
    ));
    let outside = KeyDistribution::Histogram(vec![HistogramBin {
        lo: 90,
        hi: 200,
        weight: 1.0,
    }]);
    assert!(matches!(
        generate_dataset(10, 100, &outside, &mut rng(0)),
        Err(BenchError::Parameter(_))
    ));
}

#[test]
fn dataset_and_queries_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let rows = generate_dataset(200, 500, &KeyDistribution::Uniform, &mut rng(5)).unwrap();
    let path = dir.path().join("data.csv");
    write_dataset(&path, &rows).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), rows);

    let mut qs = generate_queries(
        20,
        500,
        0.02,
        Sampling::Uniform,
        Shape::Range,
        &rows,
        &mut rng(6),
    )
    .unwrap();
    qs.extend(
        generate_queries(
            5,
            500,
            0.02,
            Sampling::Uniform,
            Shape::Point,
            &rows,
            &mut rng(7),
        )
        .unwrap(),
    );
    let path = dir.path().join("queries.csv");
    write_queries(&path, &qs).unwrap();
    assert_eq!(read_queries(&path).unwrap(), qs);

    assert!(read_dataset(&dir.path().join("missing.csv")).is_err());
}

#[test]
fn payloads_depend_on_seed_and_id_only() {
    assert_eq!(payload(9, 4, 100), payload(9, 4, 100));
    assert_ne!(payload(9, 4, 100), payload(9, 5, 100));
    assert_ne!(payload(9, 4, 100), payload(10, 4, 100));
    assert_eq!(payload(9, 4, 100)[..50], payload(9, 4, 50)[..]);
}

#[test]
fn ranges_span_the_selected_width() {
    assert_eq!(range_width(10_000, 0.005).unwrap(), 50);
    let rows = generate_dataset(1000, 10_000, &KeyDistribution::Uniform, &mut rng(8)).unwrap();
    for sampling in [Sampling::Uniform, Sampling::Cdf] {
        let qs = generate_queries(
            500,
            10_000,
            0.005,
            sampling,
            Shape::Range,
            &rows,
            &mut rng(9),
        )
        .unwrap();
        for q in qs {
            let QueryKind::Range(a, b) = q.kind else {
                panic!("expected a range")
            };
            assert_eq!(b - a + 1, 50);
            assert!(a >= 0 && b < 10_000);
        }
    }
}

#[test]
fn selectivity_errors() {
    let rows = [];
    for s in [0.0, 1.0, -0.5, f64::NAN] {
        assert!(matches!(
            generate_queries(
                1,
                100,
                s,
                Sampling::Uniform,
                Shape::Range,
                &rows,
                &mut rng(0)
            ),
            Err(BenchError::Parameter(_))
        ));
    }
    // 0.004 · 100 rounds to zero keys
    assert!(range_width(100, 0.004).is_err());
    assert!(matches!(
        generate_queries(1, 100, 0.1, Sampling::Cdf, Shape::Range, &rows, &mut rng(0)),
        Err(BenchError::Parameter(_))
    ));
}

/// Two-sample Kolmogorov-Smirnov p-value (asymptotic distribution).
fn ks_p_value(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn cdf_sampling_follows_the_data() {
    // skewed, and away from the domain edges so no range gets clamped
    let bins = vec![
        HistogramBin {
            lo: 1000,
            hi: 2000,
            weight: 8.0,
        },
        HistogramBin {
            lo: 2000,
            hi: 6000,
            weight: 1.0,
        },
        HistogramBin {
            lo: 6000,
            hi: 6500,
            weight: 4.0,
        },
    ];
    let rows = generate_dataset(
        5000,
        10_000,
        &KeyDistribution::Histogram(bins),
        &mut rng(10),
    )
    .unwrap();
    let qs = generate_queries(
        2000,
        10_000,
        0.005,
        Sampling::Cdf,
        Shape::Range,
        &rows,
        &mut rng(11),
    )
    .unwrap();
    let mids: Vec<f64> = qs
        .iter()
        .map(|q| {
            let (a, b) = q.bounds();
            // centre key sits half a unit right of the midpoint of an even width
            (a + b) as f64 / 2.0 + 0.5
        })
        .collect();
    let keys: Vec<f64> = rows.iter().map(|r| r.key as f64).collect();
    let p = ks_p_value(mids.clone(), keys.clone());
    assert!(p > 0.001, "KS p {p}");

    // uniform sampling over the same data is clearly rejected
    let uniform = generate_queries(
        2000,
        10_000,
        0.005,
        Sampling::Uniform,
        Shape::Range,
        &rows,
        &mut rng(12),
    )
    .unwrap();
    let mids: Vec<f64> = uniform
        .iter()
        .map(|q| (q.bounds().0 + q.bounds().1) as f64 / 2.0)
        .collect();
    assert!(ks_p_value(mids, keys) < 1e-6);
}

#[test]
fn linear_scan_matches_engine() {
    let scan = run_experiment(&small_spec(RunMode::LinearScan)).unwrap();
    let engine = run_experiment(&small_spec(RunMode::Engine(Mode::Gamma))).unwrap();
    assert_eq!(scan.results.len(), 100);
    for (i, (s, e)) in scan.results.iter().zip(&engine.results).enumerate() {
        if engine.rows[i].failed == 0 {
            assert_eq!(s, e, "query {i}");
        }
    }
    let ct = BlockCipher::ciphertext_len(16 + 64) as u64;
    for row in &scan.rows {
        assert_eq!(row.fetched_count, 1000);
        assert_eq!(row.bytes_down, 1000 * ct);
        assert_eq!(row.bytes_up, 1000 * 8);
        assert_eq!(row.roundtrips, 4);
        assert_eq!(row.failed, 0);
    }
    assert!((scan.summary.storage.0 - ct as f64 / 64.0).abs() < 1e-9);
}

#[test]
fn scan_worker_count_does_not_change_results() {
    let one = run_experiment(&ExperimentSpec {
        orams: 1,
        ..small_spec(RunMode::LinearScan)
    })
    .unwrap();
    let seven = run_experiment(&ExperimentSpec {
        orams: 7,
        ..small_spec(RunMode::LinearScan)
    })
    .unwrap();
    assert_eq!(one.results, seven.results);
    assert_eq!(one.rows[0].bytes_down, seven.rows[0].bytes_down);
}

#[test]
fn point_queries_and_cdf_sampling_run_clean() {
    for mode in [Mode::Single, Mode::NoGamma, Mode::Gamma] {
        let spec = ExperimentSpec {
            shape: Shape::Point,
            sampling: Sampling::Cdf,
            orams: if mode == Mode::Single { 1 } else { 4 },
            ..small_spec(RunMode::Engine(mode))
        };
        let report = run_experiment(&spec).unwrap();
        assert_eq!(report.failed(), 0, "{mode}");
        assert!(report.results.iter().any(|r| !r.is_empty()));
    }
}

#[test]
fn metrics_file_roundtrip() {
    let report = run_experiment(&small_spec(RunMode::Engine(Mode::Gamma))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    report
        .write_metrics(std::fs::File::create(&path).unwrap())
        .unwrap();
    let rows = read_metrics(&path).unwrap();
    assert_eq!(rows.len(), 101);
    assert_eq!(rows[..100], report.rows[..]);
    let summary = &rows[100];
    assert_eq!(summary.index, "summary");
    assert_eq!(
        summary.fetched_count,
        report.rows.iter().map(|r| r.fetched_count).sum::<u64>()
    );
    assert!(summary.storage_a1.unwrap() > 1.0);
    assert!(summary.comm_a1.is_some());

    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with(
        "index,true_count,fetched_count,bytes_up,bytes_down,oram_accesses,roundtrips,failed,padded,"
    ));

    let mut timings = Vec::new();
    report.write_timings(&mut timings).unwrap();
    let timings = String::from_utf8(timings).unwrap();
    assert!(timings.starts_with("index,elapsed_ms\nsetup,"));
    assert_eq!(timings.lines().count(), 102);
}

#[test]
fn workload_from_given_rows() {
    let rows = generate_dataset(300, 200, &KeyDistribution::Uniform, &mut rng(13)).unwrap();
    let queries = generate_queries(
        30,
        200,
        0.05,
        Sampling::Uniform,
        Shape::Range,
        &rows,
        &mut rng(14),
    )
    .unwrap();
    let spec = ExperimentSpec {
        domain: 200,
        record_size: 32,
        ..small_spec(RunMode::Engine(Mode::NoGamma))
    };
    let report = run_workload(&spec, &rows, &queries, &Storage::memory()).unwrap();
    for (q, ids) in queries.iter().zip(&report.results) {
        let expected: Vec<u64> = rows
            .iter()
            .filter(|r| q.matches(r.key))
            .map(|r| r.id)
            .collect();
        assert_eq!(ids, &expected);
    }
}

#[test]
fn least_squares_fit() {
    let (a1, a2) = fit_line(&[(1.0, 5.0), (2.0, 7.0), (3.0, 9.0)]);
    assert!((a1 - 2.0).abs() < 1e-12 && (a2 - 3.0).abs() < 1e-12);
    assert_eq!(fit_line(&[(2.0, 8.0), (2.0, 8.0)]), (4.0, 0.0));
    assert_eq!(fit_line(&[]), (0.0, 0.0));
}
