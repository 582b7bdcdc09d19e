//! Differentially private sanitizers.
//!
//! Two structures are supported: a noisy histogram for point queries and a
//! noisy k-ary aggregate tree for range queries. Every released count is the
//! true count plus a Laplace draw centred on a positive shift `α`, rounded to
//! an integer and clamped at zero. The shift is the smallest integer that keeps
//! every draw in the structure non-negative with probability at least `1 − β`,
//! so the released counts over-estimate the true ones with high probability.

use rand::RngCore;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("key {key} outside domain of {domain} bins")]
    Data { key: u64, domain: u64 },
    #[error("query [{lo}, {hi}] outside domain of {domain} bins")]
    Query { lo: u64, hi: u64, domain: u64 },
}

/// Source of the uniform draws behind Laplace sampling.
pub trait NoiseSource {
    /// A uniform draw from the open interval (0, 1).
    fn uniform(&mut self) -> f64;

    fn laplace(&mut self, mean: f64, scale: f64) -> f64 {
        laplace_from_uniform(mean, scale, self.uniform())
    }
}

/// Noise from a random generator.
#[derive(Debug, Clone)]
pub struct LiveNoise<R>(pub R);

impl<R: RngCore> NoiseSource for LiveNoise<R> {
    fn uniform(&mut self) -> f64 {
        loop {
            // 53 random mantissa bits, zero rejected
            let u = (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }
}

/// Always returns the median, so every Laplace draw equals its mean. Used to
/// make noisy structures predictable in tests and audits.
#[derive(Debug, Clone, Copy, Default)]
pub struct MedianNoise;

impl NoiseSource for MedianNoise {
    fn uniform(&mut self) -> f64 {
        0.5
    }
}

/// Inverse CDF of Laplace(mean, scale) at `u`.
pub fn laplace_from_uniform(mean: f64, scale: f64, u: f64) -> f64 {
    if u < 0.5 {
        mean + scale * (2.0 * u).ln()
    } else {
        mean - scale * (2.0 * (1.0 - u)).ln()
    }
}

pub fn laplace_sample(mean: f64, scale: f64, noise: &mut dyn NoiseSource) -> Result<f64, DpError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(DpError::Parameter(format!(
            "Laplace scale {scale} must be positive"
        )));
    }
    Ok(noise.laplace(mean, scale))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SanitizerParams {
    pub epsilon: f64,
    pub beta: f64,
    /// Number of bins.
    pub domain: u64,
    /// Tree fanout, range sanitizer only.
    pub fanout: u64,
}

impl SanitizerParams {
    pub fn new(epsilon: f64, beta: f64, domain: u64, fanout: u64) -> Self {
        Self {
            epsilon,
            beta,
            domain,
            fanout,
        }
    }

    fn validate(&self) -> Result<(), DpError> {
        check_common(self.epsilon, self.beta, self.domain)?;
        if self.fanout < 2 {
            return Err(DpError::Parameter(format!(
                "fanout {} must be at least 2",
                self.fanout
            )));
        }
        Ok(())
    }
}

fn check_common(epsilon: f64, beta: f64, domain: u64) -> Result<(), DpError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(DpError::Parameter(format!(
            "epsilon {epsilon} must be positive"
        )));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(DpError::Parameter(format!(
            "beta {beta} must lie in (0, 1)"
        )));
    }
    if domain == 0 {
        return Err(DpError::Parameter(
            "domain must have at least one bin".into(),
        ));
    }
    Ok(())
}

/// `−ln(2 − 2·(1−β)^(1/nodes))`: the shift, in units of the Laplace scale, that
/// keeps `nodes` independent draws positive with probability `1 − β`.
fn shift_in_scales(beta: f64, nodes: u64) -> f64 {
    // 2 − 2·(1−β)^(1/n) = −2·expm1(ln(1−β)/n), computed without cancellation
    let t = -2.0 * ((-beta).ln_1p() / nodes as f64).exp_m1();
    -t.ln()
}

fn ceil_shift(x: f64) -> u64 {
    // guard against values like 3.0000000000000004 produced by rounding
    let r = x.round();
    let v = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    v.max(0.0) as u64
}

/// Shift for the point histogram: `ceil(−ln(2 − 2(1−β)^(1/N)) / ε)`.
pub fn alpha_point(epsilon: f64, beta: f64, domain: u64) -> Result<u64, DpError> {
    check_common(epsilon, beta, domain)?;
    Ok(ceil_shift(shift_in_scales(beta, domain) / epsilon))
}

/// `log_k(N)` for `N` an exact power of `k`.
pub fn tree_height(domain: u64, fanout: u64) -> Result<u32, DpError> {
    if fanout < 2 || domain == 0 {
        return Err(DpError::Parameter(format!(
            "tree needs fanout >= 2 and a non-empty domain, got k={fanout}, N={domain}"
        )));
    }
    let mut n = domain;
    let mut h = 0;
    while n.is_multiple_of(fanout) {
        n /= fanout;
        h += 1;
    }
    if n != 1 {
        return Err(DpError::Parameter(format!(
            "domain {domain} is not a power of {fanout}"
        )));
    }
    Ok(h)
}

/// Nodes in the complete k-ary tree over `N` leaves: `(N−1)/(k−1) + N`.
pub fn tree_nodes_count(domain: u64, fanout: u64) -> Result<u64, DpError> {
    tree_height(domain, fanout)?;
    Ok((domain - 1) / (fanout - 1) + domain)
}

/// Laplace scale of each tree node: `max(1, log_k N) / ε`.
pub fn range_noise_scale(epsilon: f64, domain: u64, fanout: u64) -> Result<f64, DpError> {
    let h = tree_height(domain, fanout)?.max(1);
    Ok(h as f64 / epsilon)
}

/// Shift for the aggregate tree: `ceil(−ln(2 − 2(1−β)^(1/nodes)) · log_k N / ε)`.
pub fn alpha_range(epsilon: f64, beta: f64, domain: u64, fanout: u64) -> Result<u64, DpError> {
    let p = SanitizerParams::new(epsilon, beta, domain, fanout);
    p.validate()?;
    let nodes = tree_nodes_count(domain, fanout)?;
    let scale = range_noise_scale(epsilon, domain, fanout)?;
    Ok(ceil_shift(shift_in_scales(beta, nodes) * scale))
}

/// Total budget of several releases: the sum, or the maximum when they cover
/// disjoint parts of the data.
pub fn compose(budgets: &[f64], disjoint: bool) -> Result<f64, DpError> {
    if budgets.is_empty() {
        return Err(DpError::Parameter("no budgets to compose".into()));
    }
    if let Some(b) = budgets.iter().find(|b| !(**b > 0.0)) {
        return Err(DpError::Parameter(format!("budget {b} must be positive")));
    }
    Ok(if disjoint {
        budgets.iter().copied().fold(f64::MIN, f64::max)
    } else {
        budgets.iter().sum()
    })
}

/// How often noise had to be corrected while building a structure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NoiseEvents {
    /// Draws that rounded to a negative offset, i.e. under-counted.
    pub negative: u64,
    /// Counts that fell below zero and were clamped.
    pub clamped: u64,
}

fn noisy_count(
    count: u64,
    alpha: u64,
    scale: f64,
    noise: &mut dyn NoiseSource,
    events: &mut NoiseEvents,
) -> u64 {
    let offset = noise.laplace(alpha as f64, scale).round() as i64;
    if offset < 0 {
        events.negative += 1;
    }
    let v = count as i64 + offset;
    if v < 0 {
        events.clamped += 1;
        0
    } else {
        v as u64
    }
}

fn histogram(keys: &[u64], domain: u64) -> Result<Vec<u64>, DpError> {
    let mut counts = vec![0u64; domain as usize];
    for &key in keys {
        if key >= domain {
            return Err(DpError::Data { key, domain });
        }
        counts[key as usize] += 1;
    }
    Ok(counts)
}

/// Noisy per-bin counts answering point queries.
#[derive(Debug, Clone, PartialEq)]
pub struct PointHistogram {
    bins: Vec<u64>,
    alpha: u64,
    epsilon: f64,
    events: NoiseEvents,
}

impl PointHistogram {
    pub fn build(
        keys: &[u64],
        epsilon: f64,
        beta: f64,
        domain: u64,
        noise: &mut dyn NoiseSource,
    ) -> Result<Self, DpError> {
        let alpha = alpha_point(epsilon, beta, domain)?;
        let scale = 1.0 / epsilon;
        let mut events = NoiseEvents::default();
        let bins = histogram(keys, domain)?
            .into_iter()
            .map(|c| noisy_count(c, alpha, scale, noise, &mut events))
            .collect();
        Ok(Self {
            bins,
            alpha,
            epsilon,
            events,
        })
    }

    pub fn bins(&self) -> &[u64] {
        &self.bins
    }

    pub fn alpha(&self) -> u64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn events(&self) -> NoiseEvents {
        self.events
    }

    pub fn query(&self, bin: u64) -> Result<u64, DpError> {
        self.bins.get(bin as usize).copied().ok_or(DpError::Query {
            lo: bin,
            hi: bin,
            domain: self.bins.len() as u64,
        })
    }
}

/// Complete k-ary tree of noisy counts. Nodes are kept in breadth-first order;
/// level `l` starts at `(k^l − 1)/(k − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTree {
    fanout: u64,
    domain: u64,
    height: u32,
    alpha: u64,
    epsilon: f64,
    nodes: Vec<u64>,
    events: NoiseEvents,
}

impl AggregateTree {
    /// Every node gets the true count of its range plus its own independent
    /// draw; noise is not summed up the tree.
    pub fn build(
        keys: &[u64],
        params: SanitizerParams,
        noise: &mut dyn NoiseSource,
    ) -> Result<Self, DpError> {
        params.validate()?;
        let SanitizerParams {
            epsilon,
            beta,
            domain,
            fanout,
        } = params;
        let height = tree_height(domain, fanout)?;
        let alpha = alpha_range(epsilon, beta, domain, fanout)?;
        let scale = range_noise_scale(epsilon, domain, fanout)?;

        // true counts per level, leaves first
        let mut levels = vec![histogram(keys, domain)?];
        for _ in 0..height {
            let below = levels.last().unwrap();
            levels.push(
                below
                    .chunks(fanout as usize)
                    .map(|c| c.iter().sum())
                    .collect(),
            );
        }
        let mut events = NoiseEvents::default();
        let nodes = levels
            .iter()
            .rev()
            .flatten()
            .map(|&c| noisy_count(c, alpha, scale, noise, &mut events))
            .collect();
        Ok(Self {
            fanout,
            domain,
            height,
            alpha,
            epsilon,
            nodes,
            events,
        })
    }

    pub fn nodes(&self) -> &[u64] {
        &self.nodes
    }

    pub fn alpha(&self) -> u64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn fanout(&self) -> u64 {
        self.fanout
    }

    pub fn domain(&self) -> u64 {
        self.domain
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn events(&self) -> NoiseEvents {
        self.events
    }

    fn level_start(&self, level: u32) -> u64 {
        (self.fanout.pow(level) - 1) / (self.fanout - 1)
    }

    /// Breadth-first index of node `j` on `level`.
    pub fn node_index(&self, level: u32, j: u64) -> usize {
        (self.level_start(level) + j) as usize
    }

    /// Leaf range `[lo, hi)` covered by a node.
    pub fn node_span(&self, level: u32, j: u64) -> (u64, u64) {
        let width = self.fanout.pow(self.height - level);
        (j * width, (j + 1) * width)
    }

    /// Minimal set of nodes whose ranges tile `[lo, hi]` exactly, as
    /// `(level, position)` pairs in left-to-right order.
    pub fn cover(&self, lo: u64, hi: u64) -> Result<Vec<(u32, u64)>, DpError> {
        if lo > hi || hi >= self.domain {
            return Err(DpError::Query {
                lo,
                hi,
                domain: self.domain,
            });
        }
        let mut out = Vec::new();
        self.cover_rec(0, 0, lo, hi + 1, &mut out);
        Ok(out)
    }

    fn cover_rec(&self, level: u32, j: u64, lo: u64, hi: u64, out: &mut Vec<(u32, u64)>) {
        let (s, e) = self.node_span(level, j);
        if e <= lo || s >= hi {
            return;
        }
        if lo <= s && e <= hi {
            out.push((level, j));
            return;
        }
        for c in 0..self.fanout {
            self.cover_rec(level + 1, j * self.fanout + c, lo, hi, out);
        }
    }

    /// Noisy count of bins `[lo, hi]`: the sum over the minimal cover.
    pub fn query(&self, lo: u64, hi: u64) -> Result<u64, DpError> {
        Ok(self
            .cover(lo, hi)?
            .into_iter()
            .map(|(l, j)| self.nodes[self.node_index(l, j)])
            .sum())
    }

    /// Header `[k u64][N u64][α u64][ε f64 bits]`, then one u64 per node in
    /// breadth-first order, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.nodes.len());
        out.extend_from_slice(&self.fanout.to_le_bytes());
        out.extend_from_slice(&self.domain.to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&self.epsilon.to_bits().to_le_bytes());
        for n in &self.nodes {
            out.extend_from_slice(&n.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DpError> {
        let bad = || DpError::Parameter("malformed aggregate tree encoding".into());
        if bytes.len() < 32 || !bytes.len().is_multiple_of(8) {
            return Err(bad());
        }
        let words: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (fanout, domain, alpha, epsilon) =
            (words[0], words[1], words[2], f64::from_bits(words[3]));
        let height = tree_height(domain, fanout)?;
        let nodes = words[4..].to_vec();
        if nodes.len() as u64 != tree_nodes_count(domain, fanout)? {
            return Err(bad());
        }
        Ok(Self {
            fanout,
            domain,
            height,
            alpha,
            epsilon,
            nodes,
            events: NoiseEvents::default(),
        })
    }
}
