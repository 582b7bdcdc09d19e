use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use epsolute::engine::{Query, QueryKind};

use crate::dataset::DatasetRow;
use crate::BenchError;

/// Where query endpoints come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Uniform over the domain.
    Uniform,
    /// Centred on the key of a random record, so queries follow the data.
    Cdf,
}

impl FromStr for Sampling {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Sampling::Uniform),
            "cdf" => Ok(Sampling::Cdf),
            _ => Err(BenchError::Parameter(format!(
                "unknown query sampling {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Range,
    Point,
}

impl FromStr for Shape {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "range" => Ok(Shape::Range),
            "point" => Ok(Shape::Point),
            _ => Err(BenchError::Parameter(format!("unknown query kind {s:?}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Range => "range",
            Shape::Point => "point",
        })
    }
}

/// Width in keys of a range with the given selectivity.
pub fn range_width(domain: u64, selectivity: f64) -> Result<u64, BenchError> {
    if !(selectivity > 0.0 && selectivity < 1.0) {
        return Err(BenchError::Parameter(format!(
            "selectivity {selectivity} must lie in (0, 1)"
        )));
    }
    let width = (selectivity * domain as f64).round();
    if width < 1.0 {
        return Err(BenchError::Parameter(format!(
            "selectivity {selectivity} covers less than one key of a domain of {domain}"
        )));
    }
    Ok(width as u64)
}

/// `count` queries over `[0, domain)`. Ranges span `selectivity · domain`
/// keys; with CDF sampling a range is centred on a random record's key and
/// shifted inward if it would leave the domain.
pub fn generate_queries(
    count: usize,
    domain: u64,
    selectivity: f64,
    sampling: Sampling,
    shape: Shape,
    data: &[DatasetRow],
    rng: &mut impl Rng,
) -> Result<Vec<Query>, BenchError> {
    if domain == 0 {
        return Err(BenchError::Parameter("empty domain".into()));
    }
    let width = match shape {
        Shape::Range => range_width(domain, selectivity)?,
        Shape::Point => 1,
    };
    if sampling == Sampling::Cdf && data.is_empty() {
        return Err(BenchError::Parameter("CDF sampling needs a dataset".into()));
    }
    let last_start = (domain - width) as i64;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let start = match sampling {
            Sampling::Uniform => rng.gen_range(0..=last_start),
            Sampling::Cdf => {
                let centre = data.choose(rng).unwrap().key;
                (centre - (width / 2) as i64).clamp(0, last_start)
            }
        };
        out.push(match shape {
            Shape::Range => Query::range(start, start + width as i64 - 1),
            Shape::Point => Query::point(start),
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRow {
    kind: String,
    a: i64,
    b: i64,
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for q in queries {
        let (a, b) = q.bounds();
        let kind = match q.kind {
            QueryKind::Point(_) => Shape::Point,
            QueryKind::Range(..) => Shape::Range,
        };
        w.serialize(QueryRow {
            kind: kind.to_string(),
            a,
            b,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>, BenchError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: QueryRow = row?;
        out.push(match row.kind.parse::<Shape>()? {
            Shape::Point => Query::point(row.a),
            Shape::Range => Query::range(row.a, row.b),
        });
    }
    Ok(out)
}
