//! Baseline that answers every query by downloading and decrypting the whole
//! database. Trivially private and maximally expensive.

use std::time::Instant;

use rand::SeedableRng;

use epsolute::crypto::{keygen, BlockCipher, Prg};
use epsolute::engine::{Database, EngineError, Query, QueryMetrics, QueryOutcome, Record};
use epsolute::storage::{KvsHandle, Storage};

use crate::BenchError;

/// Storage namespace holding the scanned records.
pub const SCAN_NAMESPACE: u16 = 0xFFFF;
const PUT_BATCH: usize = 1024;

pub struct LinearScan {
    cipher: BlockCipher,
    record_size: usize,
    len: u64,
    // one handle per worker; worker `w` reads its share of the keys
    workers: Vec<KvsHandle>,
}

impl LinearScan {
    pub fn setup(
        db: &Database,
        storage: &Storage,
        workers: usize,
        seed: u64,
    ) -> Result<Self, BenchError> {
        if workers == 0 {
            return Err(BenchError::Parameter(
                "linear scan needs at least one worker".into(),
            ));
        }
        let mut rng = Prg::seed_from_u64(seed);
        let key = keygen(256, &mut rng).map_err(EngineError::from)?;
        let record_size = db.record_size();
        let cipher = BlockCipher::new(&key, 16 + record_size);
        let mut handles = (0..workers)
            .map(|_| storage.handle(SCAN_NAMESPACE))
            .collect::<Result<Vec<_>, _>>()?;
        let mut pairs = Vec::with_capacity(PUT_BATCH);
        for (i, r) in db.records().iter().enumerate() {
            let mut plain = Vec::with_capacity(16 + record_size);
            plain.extend_from_slice(&r.id.to_le_bytes());
            plain.extend_from_slice(&r.key.to_le_bytes());
            plain.extend_from_slice(&r.payload);
            let ct = cipher
                .encrypt_block(&plain, &mut rng)
                .map_err(EngineError::from)?;
            pairs.push((i as u64, ct.to_bytes()));
            if pairs.len() == PUT_BATCH {
                handles[0].batch_put(&pairs)?;
                pairs.clear();
            }
        }
        if !pairs.is_empty() {
            handles[0].batch_put(&pairs)?;
        }
        Ok(Self {
            cipher,
            record_size,
            len: db.len() as u64,
            workers: handles,
        })
    }

    /// Bytes held by the server.
    pub fn server_bytes(&self) -> u64 {
        self.len * BlockCipher::ciphertext_len(16 + self.record_size) as u64
    }

    pub fn query(&mut self, q: &Query) -> Result<QueryOutcome, BenchError> {
        let start = Instant::now();
        let n = self.len;
        let shares = self.workers.len() as u64;
        let cipher = &self.cipher;
        let record_size = self.record_size;
        let results: Vec<Result<(Vec<Record>, epsolute::storage::StorageStats), BenchError>> =
            std::thread::scope(|s| {
                let jobs: Vec<_> = self
                    .workers
                    .iter_mut()
                    .enumerate()
                    .map(|(w, handle)| {
                        s.spawn(move || {
                            let (lo, hi) = (n * w as u64 / shares, n * (w as u64 + 1) / shares);
                            let before = handle.stats();
                            let mut found = Vec::new();
                            if lo < hi {
                                let keys: Vec<u64> = (lo..hi).collect();
                                for bytes in handle.batch_get(&keys)? {
                                    let plain =
                                        cipher.decrypt_bytes(&bytes).map_err(EngineError::from)?;
                                    let key = i64::from_le_bytes(plain[8..16].try_into().unwrap());
                                    if q.matches(key) {
                                        found.push(Record {
                                            id: u64::from_le_bytes(plain[0..8].try_into().unwrap()),
                                            key,
                                            payload: plain[16..16 + record_size].to_vec(),
                                        });
                                    }
                                }
                            }
                            Ok((found, handle.stats().since(&before)))
                        })
                    })
                    .collect();
                jobs.into_iter()
                    .map(|j| j.join().expect("scan worker panicked"))
                    .collect()
            });

        let mut metrics = QueryMetrics {
            fetched_count: n,
            oram_accesses: 0,
            ..Default::default()
        };
        let mut records = Vec::new();
        for r in results {
            let (found, stats) = r?;
            records.extend(found);
            metrics.bytes_up += stats.bytes_up;
            metrics.bytes_down += stats.bytes_down;
            metrics.roundtrips += stats.roundtrips;
        }
        records.sort_by_key(|r| r.id);
        metrics.true_count = records.len() as u64;
        metrics.elapsed = start.elapsed();
        Ok(QueryOutcome { records, metrics })
    }
}
