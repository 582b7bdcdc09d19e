//! Offline checks: statistical audits over recorded traces and volumes, and
//! extended-precision oracles for the noise parameters.

use std::fmt;
use std::io::{Read, Write};

use astro_float::{BigFloat, Consts, RoundingMode};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::dp::{tree_height, tree_nodes_count, DpError};

/// Significance level of the obliviousness audit.
pub const OBLIVIOUSNESS_P: f64 = 0.001;
/// Relative slack allowed on `e^ε` by the volume audit.
pub const VOLUME_SLACK: f64 = 0.10;
/// Minimum occurrences of a tail event before its frequency is trusted.
pub const VOLUME_MIN_COUNT: u64 = 2000;

const PRECISION: usize = 512;
const RM: RoundingMode = RoundingMode::ToEven;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub samples: u64,
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} (statistic {:.6}, threshold {:.6}, n = {})",
            self.name,
            if self.pass { "pass" } else { "fail" },
            self.statistic,
            self.threshold,
            self.samples
        )
    }
}

/// Two-sample chi-square test of homogeneity between the leaf histograms of
/// two traces. Passes when the p-value exceeds [`OBLIVIOUSNESS_P`]; the
/// reported statistic is the p-value.
pub fn audit_obliviousness(a: &[u64], b: &[u64]) -> Result<AuditReport, VerifyError> {
    if a.len() != b.len() {
        return Err(VerifyError::Parameter(format!(
            "traces differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(VerifyError::Parameter("empty traces".into()));
    }
    let bins = a.iter().chain(b).copied().max().unwrap() as usize + 1;
    let mut ha = vec![0u64; bins];
    let mut hb = vec![0u64; bins];
    for &x in a {
        ha[x as usize] += 1;
    }
    for &x in b {
        hb[x as usize] += 1;
    }
    let p = chi_square_homogeneity(&ha, &hb);
    Ok(AuditReport {
        name: "obliviousness".into(),
        statistic: p,
        threshold: OBLIVIOUSNESS_P,
        pass: p > OBLIVIOUSNESS_P,
        samples: a.len() as u64,
    })
}

/// p-value of the chi-square homogeneity test on two histograms.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> f64 {
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    let (ka, kb) = (
        (nb as f64 / na as f64).sqrt(),
        (na as f64 / nb as f64).sqrt(),
    );
    let mut stat = 0.0;
    let mut used = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        used += 1;
        let d = ka * x as f64 - kb * y as f64;
        stat += d * d / (x + y) as f64;
    }
    if used < 2 {
        return 1.0;
    }
    let dist = ChiSquared::new((used - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Multiset symmetric difference between two key lists.
fn multiset_distance(a: &[u64], b: &[u64]) -> usize {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    let (mut i, mut j, mut diff) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => {
                diff += 1;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                diff += 1;
                j += 1;
            }
        }
    }
    diff + (a.len() - i) + (b.len() - j)
}

/// Empirical (ε, δ) check on the volumes two neighbouring databases produce
/// for the same query across many independently seeded repetitions.
///
/// For every threshold `t`, the frequencies of `{c ≤ t}` and `{c ≥ t}` under
/// one database must not exceed `e^ε` times those under the other, plus `δ`.
/// Events seen fewer than [`VOLUME_MIN_COUNT`] times on both sides are
/// skipped; an event frequent on one side and absent on the other gives an
/// infinite ratio. The statistic is the largest ratio `(p₁ − δ)/p₂` seen and
/// the audit passes when it stays within `e^ε · (1 + slack)`.
///
/// Databases are given as key lists and must differ in at most one record
/// (one key added, removed or changed).
pub fn audit_volume(
    db1: &[u64],
    counts1: &[u64],
    db2: &[u64],
    counts2: &[u64],
    epsilon: f64,
    delta: f64,
) -> Result<AuditReport, VerifyError> {
    if multiset_distance(db1, db2) > 2 {
        return Err(VerifyError::Parameter(
            "databases are not neighbours".into(),
        ));
    }
    if counts1.is_empty() || counts2.is_empty() {
        return Err(VerifyError::Parameter("no repetitions".into()));
    }
    let threshold = epsilon.exp() * (1.0 + VOLUME_SLACK);
    let hi = counts1.iter().chain(counts2).copied().max().unwrap();
    let mut h1 = vec![0u64; hi as usize + 1];
    let mut h2 = vec![0u64; hi as usize + 1];
    for &c in counts1 {
        h1[c as usize] += 1;
    }
    for &c in counts2 {
        h2[c as usize] += 1;
    }
    let (n1, n2) = (counts1.len() as f64, counts2.len() as f64);

    let mut worst: f64 = 0.0;
    let mut check = |x1: u64, x2: u64| {
        for (a, na, b, nb) in [(x1, n1, x2, n2), (x2, n2, x1, n1)] {
            if a < VOLUME_MIN_COUNT || (b < VOLUME_MIN_COUNT && b > 0) {
                continue;
            }
            let pa = a as f64 / na - delta;
            let ratio = if b == 0 {
                if pa > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            } else {
                pa / (b as f64 / nb)
            };
            worst = worst.max(ratio);
        }
    };
    let (mut below1, mut below2) = (0u64, 0u64);
    for t in 0..h1.len() {
        below1 += h1[t];
        below2 += h2[t];
        check(below1, below2);
        let above1 = counts1.len() as u64 - below1 + h1[t];
        let above2 = counts2.len() as u64 - below2 + h2[t];
        check(above1, above2);
    }
    Ok(AuditReport {
        name: "volume".into(),
        statistic: worst,
        threshold,
        pass: worst <= threshold,
        samples: (counts1.len() + counts2.len()) as u64,
    })
}

/// Which noise shift an α belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaKind {
    /// Point histogram over `domain` bins.
    Point {
        epsilon: f64,
        beta: f64,
        domain: u64,
    },
    /// Aggregate tree over `domain` leaves with the given fanout.
    Range {
        epsilon: f64,
        beta: f64,
        domain: u64,
        fanout: u64,
    },
}

impl AlphaKind {
    /// Independent draws the shift must keep positive, and the Laplace scale
    /// in units of `1/ε`.
    fn shape(&self) -> Result<(u64, u64, f64, f64), VerifyError> {
        Ok(match *self {
            AlphaKind::Point {
                epsilon,
                beta,
                domain,
            } => (domain, 1, epsilon, beta),
            AlphaKind::Range {
                epsilon,
                beta,
                domain,
                fanout,
            } => (
                tree_nodes_count(domain, fanout)?,
                tree_height(domain, fanout)?.max(1) as u64,
                epsilon,
                beta,
            ),
        })
    }
}

fn big(x: f64) -> BigFloat {
    BigFloat::from_f64(x, PRECISION)
}

/// Whether `(1 − ½·e^(−α·ε/h))^nodes ≥ 1 − β`, evaluated with 512-bit floats.
pub fn alpha_satisfies(kind: AlphaKind, alpha: u64) -> Result<bool, VerifyError> {
    let (nodes, height, epsilon, beta) = kind.shape()?;
    let mut cc = Consts::new().map_err(|e| VerifyError::Parameter(format!("{e:?}")))?;
    let p = PRECISION;
    let exponent = BigFloat::from(alpha)
        .mul(&big(epsilon), p, RM)
        .div(&BigFloat::from(height), p, RM)
        .neg();
    let tail = exponent
        .exp(p, RM, &mut cc)
        .div(&BigFloat::from(2u64), p, RM);
    let single = BigFloat::from(1u64).sub(&tail, p, RM);
    let all = single.powi(nodes as usize, p, RM);
    let target = BigFloat::from(1u64).sub(&big(beta), p, RM);
    Ok(all.cmp(&target).is_some_and(|c| c >= 0))
}

/// Smallest α meeting the inequality, found by doubling then bisection.
pub fn alpha_oracle(kind: AlphaKind) -> Result<u64, VerifyError> {
    if alpha_satisfies(kind, 0)? {
        return Ok(0);
    }
    let mut hi = 1u64;
    while !alpha_satisfies(kind, hi)? {
        hi *= 2;
        if hi > 1 << 40 {
            return Err(VerifyError::Parameter(
                "no finite α satisfies the bound".into(),
            ));
        }
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if alpha_satisfies(kind, mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Passes when `alpha` satisfies the inequality and `alpha − 1` does not.
pub fn audit_alpha_minimality(kind: AlphaKind, alpha: u64) -> Result<AuditReport, VerifyError> {
    let ok = alpha_satisfies(kind, alpha)?;
    let minimal = alpha == 0 || !alpha_satisfies(kind, alpha - 1)?;
    Ok(AuditReport {
        name: "alpha minimality".into(),
        statistic: alpha as f64,
        threshold: alpha as f64,
        pass: ok && minimal,
        samples: 1,
    })
}

/// `sqrt(−3·m·ln β / k̃₀)` with 512-bit floats.
pub fn gamma_oracle(orams: u16, beta: f64, noisy_count: f64) -> Result<f64, VerifyError> {
    let mut cc = Consts::new().map_err(|e| VerifyError::Parameter(format!("{e:?}")))?;
    let p = PRECISION;
    let v = big(beta)
        .ln(p, RM, &mut cc)
        .mul(&BigFloat::from(3u64 * orams as u64), p, RM)
        .neg()
        .div(&big(noisy_count), p, RM)
        .sqrt(p, RM);
    to_f64(&v)
}

fn to_f64(v: &BigFloat) -> Result<f64, VerifyError> {
    let s = format!("{v}");
    s.parse::<f64>()
        .map_err(|_| VerifyError::Parameter(format!("cannot convert {s} to f64")))
}

/// Write a leaf trace as little-endian u32 values.
pub fn write_trace<W: Write>(mut w: W, leaves: &[u64]) -> Result<(), VerifyError> {
    for &l in leaves {
        let v = u32::try_from(l)
            .map_err(|_| VerifyError::Parameter(format!("leaf {l} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_trace<R: Read>(mut r: R) -> Result<Vec<u64>, VerifyError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(VerifyError::Parameter(
            "trace length is not a multiple of 4".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as u64)
        .collect())
}
