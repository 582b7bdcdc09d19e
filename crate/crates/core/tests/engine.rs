use std::collections::HashSet;
use std::f64::consts::LN_2;

use epsolute::engine::{
    compute_gamma, gamma_requests_per_oram, Database, Domain, Engine, EngineConfig, EngineError,
    Mode, Query, Record, SanitizerKinds,
};
use epsolute::storage::Storage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn records(keys: &[i64], size: usize) -> Vec<Record> {
    keys.iter()
        .enumerate()
        .map(|(i, &key)| Record {
            id: i as u64,
            key,
            payload: vec![(i % 251) as u8; size],
        })
        .collect()
}

fn engine(keys: &[i64], domain: (i64, i64), config: EngineConfig) -> Engine {
    let db = Database::new(records(keys, 8)).unwrap();
    Engine::setup(
        &db,
        Domain::new(domain.0, domain.1).unwrap(),
        config,
        &Storage::memory(),
    )
    .unwrap()
}

fn brute_force(keys: &[i64], q: &Query) -> Vec<u64> {
    (0..keys.len() as u64)
        .filter(|&i| q.matches(keys[i as usize]))
        .collect()
}

fn ids(outcome: &epsolute::engine::QueryOutcome) -> Vec<u64> {
    outcome.records.iter().map(|r| r.id).collect()
}

#[test]
fn small_fixture_returns_matching_records() {
    let keys = [1, 2, 3, 3];
    for (mode, m) in [(Mode::Single, 1), (Mode::NoGamma, 2), (Mode::Gamma, 2)] {
        let mut e = engine(&keys, (0, 15), EngineConfig::new(mode, m).with_seed(1));
        let out = e.query(&Query::range(2, 3)).unwrap();
        assert!(!out.metrics.failed);
        assert_eq!(ids(&out), vec![1, 2, 3]);
        assert_eq!(out.metrics.true_count, 3);
        assert!(out.metrics.fetched_count >= 3);
        let r = &out.records[0];
        assert_eq!((r.key, r.payload.clone()), (2, vec![1u8; 8]));
    }
}

#[test]
fn empty_result_still_fetches() {
    let mut e = engine(&[1, 2, 3, 3], (0, 15), EngineConfig::new(Mode::Single, 1));
    let out = e.query(&Query::range(10, 12)).unwrap();
    assert!(out.records.is_empty());
    assert!(out.metrics.fetched_count > 0);
    assert_eq!(out.metrics.oram_accesses, out.metrics.fetched_count);
    assert_eq!(out.metrics.roundtrips, 2);
}

#[test]
fn random_queries_match_brute_force_in_every_mode() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let keys: Vec<i64> = (0..1000).map(|_| rng.gen_range(0..1000)).collect();
    let modes = [
        (Mode::Single, 1),
        (Mode::NoGamma, 1),
        (Mode::NoGamma, 4),
        (Mode::NoGamma, 8),
        (Mode::Gamma, 1),
        (Mode::Gamma, 4),
        (Mode::Gamma, 8),
    ];
    for (mode, m) in modes {
        let config = EngineConfig::new(mode, m)
            .with_seed(3)
            .with_sanitizers(SanitizerKinds::BOTH)
            .with_total_budget(2.0 * LN_2);
        let mut e = engine(&keys, (0, 999), config);
        for i in 0..100 {
            let a = rng.gen_range(0..990);
            let q = if i % 2 == 0 {
                Query::range(a, a + rng.gen_range(0..10))
            } else {
                Query::point(a)
            };
            let out = e.query(&q).unwrap();
            assert!(!out.metrics.failed);
            assert_eq!(ids(&out), brute_force(&keys, &q), "{mode} m={m} {q:?}");
            assert!(out.metrics.fetched_count >= out.metrics.true_count);
        }
    }
}

#[test]
fn database_validation() {
    assert!(matches!(
        Database::new(Vec::new()),
        Err(EngineError::Data(_))
    ));
    let mut rs = records(&[1, 2], 4);
    rs[1].payload.push(0);
    assert!(matches!(Database::new(rs), Err(EngineError::Data(_))));
    let mut rs = records(&[1, 2], 4);
    rs[1].id = 0;
    assert!(matches!(Database::new(rs), Err(EngineError::Data(_))));

    let db = Database::new(records(&[1, 20], 4)).unwrap();
    let domain = Domain::new(0, 15).unwrap();
    let r = Engine::setup(
        &db,
        domain,
        EngineConfig::new(Mode::Single, 1),
        &Storage::memory(),
    );
    assert!(matches!(r, Err(EngineError::Data(_))));
    let r = Engine::setup(
        &db,
        domain,
        EngineConfig::new(Mode::Single, 2),
        &Storage::memory(),
    );
    assert!(matches!(r, Err(EngineError::Config(_))));
}

#[test]
fn partitions_cover_the_database() {
    let keys: Vec<i64> = (0..100).map(|i| i % 16).collect();
    let e = engine(
        &keys,
        (0, 15),
        EngineConfig::new(Mode::Gamma, 4).with_seed(2),
    );
    let sizes = e.partition_sizes();
    assert_eq!(sizes.iter().sum::<u32>(), 100);
    let gamma = compute_gamma(4, 2f64.powi(-20), 100.0).unwrap();
    assert!(sizes.iter().all(|&s| (s as f64) <= 25.0 * (1.0 + gamma)));

    let mut config = EngineConfig::new(Mode::NoGamma, 4);
    config.oram_capacity = Some(10);
    let db = Database::new(records(&keys, 8)).unwrap();
    let r = Engine::setup(&db, Domain::new(0, 15).unwrap(), config, &Storage::memory());
    assert!(matches!(r, Err(EngineError::Config(_))));
}

#[test]
fn gamma_formula() {
    assert!((compute_gamma(1, (-1f64).exp(), 3.0).unwrap() - 1.0).abs() < 1e-12);
    let g = compute_gamma(8, 2f64.powi(-20), 1000.0).unwrap();
    assert!((g - 0.576_811).abs() < 1e-6);
    assert!(compute_gamma(0, 0.5, 1.0).is_err());
    assert!(compute_gamma(1, 1.0, 1.0).is_err());
    assert!(compute_gamma(1, 0.5, 0.0).is_err());
    assert_eq!(gamma_requests_per_oram(4, 0.5, 0).unwrap(), 0);
}

#[test]
fn chernoff_bound_holds_empirically() {
    let (m, k0, beta) = (8usize, 1000usize, 2f64.powi(-20));
    let gamma = compute_gamma(m as u16, beta, k0 as f64).unwrap();
    let limit = (1.0 + gamma) * k0 as f64 / m as f64;
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let trials = 100_000;
    let mut over = 0;
    let mut loads = vec![0u32; m];
    for _ in 0..trials {
        loads.fill(0);
        for _ in 0..k0 {
            loads[rng.gen_range(0..m)] += 1;
        }
        if loads.iter().any(|&l| l as f64 > limit) {
            over += 1;
        }
    }
    assert!(
        over as f64 / trials as f64 <= beta * 10.0,
        "{over} overflows"
    );
}

#[test]
fn gamma_requests_are_uniform_and_match_hand_calculation() {
    // 100 records on key 5 out of a 16-key domain with one-level tree (k=16)
    let mut keys = vec![5i64; 100];
    keys.extend((0..200).map(|i| (i % 16) as i64).filter(|&k| k != 5));
    let mut config = EngineConfig::new(Mode::Gamma, 4)
        .with_seed(5)
        .with_beta(0.01);
    config.median_noise = true;
    let mut e = engine(&keys, (0, 15), config);
    let alpha = e.alphas(0).unwrap().1.unwrap();
    let out = e.query(&Query::point(5)).unwrap();
    let noisy = 100 + alpha;
    let gamma = (-3.0 * 4.0 * 0.01f64.ln() / noisy as f64).sqrt();
    let per = ((1.0 + gamma) * noisy as f64 / 4.0).ceil() as u64;
    assert_eq!(out.metrics.per_oram, vec![per; 4]);
    assert_eq!(out.metrics.fetched_count, 4 * per);
    assert_eq!(out.metrics.true_count, 100);

    let mut single = engine(&keys, (0, 15), {
        let mut c = EngineConfig::new(Mode::Gamma, 1).with_beta(0.01);
        c.median_noise = true;
        c
    });
    let out = single.query(&Query::point(5)).unwrap();
    let gamma = (-3.0 * 0.01f64.ln() / noisy as f64).sqrt();
    assert_eq!(
        out.metrics.fetched_count,
        ((1.0 + gamma) * noisy as f64).ceil() as u64
    );
}

#[test]
fn no_gamma_fetches_at_least_the_truth() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let keys: Vec<i64> = (0..1000).map(|_| rng.gen_range(0..256)).collect();
    let mut e = engine(
        &keys,
        (0, 255),
        EngineConfig::new(Mode::NoGamma, 4).with_seed(9),
    );
    for _ in 0..100 {
        let a = rng.gen_range(0..250);
        let out = e.query(&Query::range(a, a + 5)).unwrap();
        assert!(!out.metrics.failed);
        assert!(out.metrics.fetched_count >= out.metrics.true_count);
        assert_eq!(out.metrics.per_oram.len(), 4);
    }
    let budget = e.budget();
    assert!((budget.total - LN_2).abs() < 1e-12);
}

#[test]
fn decoys_are_distinct_valid_and_outside_the_result() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let keys: Vec<i64> = (0..500).map(|_| rng.gen_range(0..64)).collect();
    for (mode, m) in [(Mode::Single, 1), (Mode::Gamma, 4), (Mode::NoGamma, 4)] {
        let mut e = engine(&keys, (0, 63), EngineConfig::new(mode, m).with_seed(4));
        e.log_requests(true);
        for _ in 0..50 {
            let a = rng.gen_range(0..60);
            let out = e.query(&Query::range(a, a + 3)).unwrap();
            assert_eq!(out.metrics.padded, 0);
            let log = e.last_requests().unwrap();
            for (j, reqs) in log.iter().enumerate() {
                let size = e.partition_sizes()[j];
                let addrs: HashSet<u32> = reqs.iter().map(|r| r.address).collect();
                assert_eq!(addrs.len(), reqs.len(), "repeated address");
                assert!(reqs.iter().all(|r| r.address < size));
                assert_eq!(reqs.len() as u64, out.metrics.per_oram[j]);
            }
            let real = log.iter().flatten().filter(|r| r.real).count();
            assert_eq!(real as u64, out.metrics.true_count);
        }
    }
}

#[test]
fn tiny_partitions_pad_with_repeats() {
    let keys = [0i64, 1, 2];
    let mut e = engine(
        &keys,
        (0, 15),
        EngineConfig::new(Mode::Single, 1).with_seed(1),
    );
    let out = e.query(&Query::range(0, 15)).unwrap();
    assert_eq!(ids(&out), vec![0, 1, 2]);
    assert_eq!(out.metrics.padded, out.metrics.fetched_count - 3);
}

#[test]
fn permuted_payloads_leave_volumes_unchanged() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let keys: Vec<i64> = (0..400).map(|_| rng.gen_range(0..256)).collect();
    let queries: Vec<Query> = (0..50)
        .map(|_| {
            let a = rng.gen_range(0..250);
            Query::range(a, a + 5)
        })
        .collect();
    let a = Database::new(records(&keys, 8)).unwrap();
    let mut permuted = records(&keys, 8);
    let payloads: Vec<Vec<u8>> = permuted.iter().rev().map(|r| r.payload.clone()).collect();
    for (r, p) in permuted.iter_mut().zip(payloads) {
        r.payload = p;
    }
    let b = Database::new(permuted).unwrap();
    let domain = Domain::new(0, 255).unwrap();
    let run = |db: &Database| -> Vec<u64> {
        let mut e = Engine::setup(
            db,
            domain,
            EngineConfig::new(Mode::Gamma, 4).with_seed(21),
            &Storage::memory(),
        )
        .unwrap();
        queries
            .iter()
            .map(|q| e.query(q).unwrap().metrics.fetched_count)
            .collect()
    };
    assert_eq!(run(&a), run(&b));
}

#[test]
fn attributes_share_the_store_and_the_budget() {
    let keys: Vec<i64> = (0..200).map(|i| i % 32).collect();
    let config = EngineConfig::new(Mode::Gamma, 2)
        .with_epsilon(LN_2 / 2.0)
        .with_total_budget(LN_2);
    let mut e = engine(&keys, (0, 31), config);
    let second: Vec<(u64, i64)> = (0..200)
        .map(|i| (i as u64, 1000 + (i as i64 * 7) % 50))
        .collect();
    e.register_attribute(1, &second, Domain::new(1000, 1049).unwrap(), LN_2 / 2.0)
        .unwrap();
    let budget = e.budget();
    assert!((budget.total - LN_2).abs() < 1e-12);
    assert_eq!(budget.attributes.len(), 2);

    let r = e.register_attribute(2, &second, Domain::new(1000, 1049).unwrap(), 0.1);
    assert!(matches!(r, Err(EngineError::Budget { .. })));

    let q = Query::range(1010, 1012).on(1);
    let out = e.query(&q).unwrap();
    let want: Vec<u64> = second
        .iter()
        .filter(|(_, k)| q.matches(*k))
        .map(|(id, _)| *id)
        .collect();
    assert_eq!(ids(&out), want);
    assert!(out.records.iter().all(|r| r.key == keys[r.id as usize]));
    assert!(e.query(&Query::point(1).on(7)).is_err());
}

#[test]
fn invalid_queries_are_rejected() {
    let mut e = engine(&[1, 2, 3], (0, 15), EngineConfig::new(Mode::Single, 1));
    assert!(matches!(
        e.query(&Query::range(5, 4)),
        Err(EngineError::Query(_))
    ));
    assert!(matches!(
        e.query(&Query::range(0, 16)),
        Err(EngineError::Query(_))
    ));
}

#[test]
fn failure_rate_at_inflated_beta() {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let keys: Vec<i64> = (0..300).map(|_| rng.gen_range(0..64)).collect();
    let mut failed = 0;
    let mut total = 0;
    for seed in 0..50 {
        let config = EngineConfig::new(Mode::Single, 1)
            .with_beta(0.01)
            .with_fanout(4)
            .with_seed(seed);
        let mut e = engine(&keys, (0, 63), config);
        for _ in 0..40 {
            let a = rng.gen_range(0..64);
            let b = rng.gen_range(a..64);
            let out = e.query(&Query::range(a, b)).unwrap();
            if out.metrics.failed {
                failed += 1;
                assert_eq!(out.metrics.fetched_count, 0);
                assert_eq!(out.metrics.roundtrips, 0);
            } else {
                assert_eq!(ids(&out), brute_force(&keys, &Query::range(a, b)));
            }
            total += 1;
        }
    }
    assert!(failed as f64 / total as f64 <= 0.02, "{failed}/{total}");
}
