use std::path::Path;

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use epsolute::engine::{Database, Record};

use crate::BenchError;

// mixed into the seed so payload streams differ from the generator streams
const PAYLOAD_DOMAIN: u64 = 0x7061_796c_6f61_6473;

/// Half-open key interval `[lo, hi)` with a relative weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: i64,
    pub hi: i64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KeyDistribution {
    /// Keys uniform over `[0, N)`.
    Uniform,
    /// Pick a bin by weight, then a key uniformly inside it.
    Histogram(Vec<HistogramBin>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub id: u64,
    pub key: i64,
}

/// Read a histogram file with header `lo,hi,weight`.
pub fn read_histogram(path: &Path) -> Result<Vec<HistogramBin>, BenchError> {
    let mut reader = csv::Reader::from_path(path)?;
    let bins = reader
        .deserialize()
        .collect::<Result<Vec<HistogramBin>, _>>()?;
    Ok(bins)
}

/// `n` records with IDs `0..n` and keys in `[0, domain)`.
pub fn generate_dataset(
    n: u64,
    domain: u64,
    distribution: &KeyDistribution,
    rng: &mut impl Rng,
) -> Result<Vec<DatasetRow>, BenchError> {
    if n == 0 {
        return Err(BenchError::Parameter(
            "dataset must have at least one record".into(),
        ));
    }
    if domain == 0 || domain > i64::MAX as u64 {
        return Err(BenchError::Parameter(format!(
            "invalid domain size {domain}"
        )));
    }
    let keys: Vec<i64> = match distribution {
        KeyDistribution::Uniform => (0..n).map(|_| rng.gen_range(0..domain as i64)).collect(),
        KeyDistribution::Histogram(bins) => {
            for b in bins {
                if b.lo < 0 || b.hi > domain as i64 || b.lo >= b.hi || !(b.weight >= 0.0) {
                    return Err(BenchError::Parameter(format!(
                        "histogram bin [{}, {}) weight {} does not fit the domain {domain}",
                        b.lo, b.hi, b.weight
                    )));
                }
            }
            let index = WeightedIndex::new(bins.iter().map(|b| b.weight))
                .map_err(|e| BenchError::Parameter(format!("histogram weights: {e}")))?;
            (0..n)
                .map(|_| {
                    let b = &bins[index.sample(rng)];
                    rng.gen_range(b.lo..b.hi)
                })
                .collect()
        }
    };
    Ok(keys
        .into_iter()
        .enumerate()
        .map(|(i, key)| DatasetRow { id: i as u64, key })
        .collect())
}

pub fn write_dataset(path: &Path, rows: &[DatasetRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRow>, BenchError> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<DatasetRow>, _>>()?;
    Ok(rows)
}

/// Pseudo-random payload of a record, fixed by the seed and the record ID.
pub fn payload(seed: u64, id: u64, size: usize) -> Vec<u8> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ PAYLOAD_DOMAIN);
    rng.set_stream(id);
    let mut out = vec![0u8; size];
    rng.fill_bytes(&mut out);
    out
}

pub fn build_database(
    rows: &[DatasetRow],
    seed: u64,
    record_size: usize,
) -> Result<Database, BenchError> {
    let records = rows
        .iter()
        .map(|r| Record {
            id: r.id,
            key: r.key,
            payload: payload(seed, r.id, record_size),
        })
        .collect();
    Ok(Database::new(records)?)
}
