//! Setup and query protocols.
//!
//! Records are spread over `m` PathORAMs by a keyed hash of their ID. Each
//! indexed attribute has a client-side B+-tree and one or more DP sanitizers.
//! A query looks up the true result set `T`, asks the sanitizer how many
//! records to fetch, pads `T` with distinct decoy records up to that count,
//! and fetches everything through the ORAMs in one batch per ORAM. The server
//! therefore sees a noisy volume that depends only on the sanitizer and the
//! query, never on which records match.
//!
//! Three modes are supported:
//! - [`Mode::Single`]: one ORAM, one sanitizer per attribute.
//! - [`Mode::NoGamma`]: one sanitizer per ORAM partition; ORAM `j` fetches its
//!   own partition's noisy count.
//! - [`Mode::Gamma`]: one shared sanitizer; every ORAM fetches the same
//!   `ceil((1+γ)·k̃₀/m)` records, with `γ` from a Chernoff bound.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::crypto::{keygen, CryptoError, Prg};
use crate::dp::{
    compose, AggregateTree, DpError, LiveNoise, MedianNoise, NoiseSource, PointHistogram,
    SanitizerParams,
};
use crate::index::{group_by_oram, Index, IndexError, Locator, Partitioner};
use crate::oram::{AccessOp, OramConfig, OramError, PathOram};
use crate::storage::{Storage, StorageError, StorageStats};

pub type AttributeId = u16;

/// Attribute indexed at setup from [`Record::key`].
pub const PRIMARY_ATTRIBUTE: AttributeId = 0;
const KEY_BITS: u32 = 256;
const SETUP_BATCH: usize = 1024;
// ID and key stored in front of each payload inside the ORAM block
const BLOCK_HEADER: usize = 16;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("query error: {0}")]
    Query(String),
    #[error("privacy budget exceeded: {requested} requested, {remaining} remaining")]
    Budget { requested: f64, remaining: f64 },
    #[error(transparent)]
    Oram(#[from] OramError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: u64,
    pub key: i64,
    pub payload: Vec<u8>,
}

/// Validated set of records: non-empty, unique IDs, equal payload sizes.
#[derive(Debug, Clone)]
pub struct Database {
    records: Vec<Record>,
    record_size: usize,
}

impl Database {
    pub fn new(records: Vec<Record>) -> Result<Self, EngineError> {
        let first = records
            .first()
            .ok_or_else(|| EngineError::Data("database is empty".into()))?;
        let record_size = first.payload.len();
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if r.payload.len() != record_size {
                return Err(EngineError::Data(format!(
                    "record {} has {} payload bytes, expected {record_size}",
                    r.id,
                    r.payload.len()
                )));
            }
            if !ids.insert(r.id) {
                return Err(EngineError::Data(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Self {
            records,
            record_size,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record_size(&self) -> usize {
        self.record_size
    }
}

/// Inclusive range of search keys an attribute may take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Domain {
    pub min: i64,
    pub max: i64,
}

impl Domain {
    pub fn new(min: i64, max: i64) -> Result<Self, EngineError> {
        if min > max {
            return Err(EngineError::Config(format!("empty domain [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn size(&self) -> u64 {
        (self.max as i128 - self.min as i128 + 1) as u64
    }

    pub fn contains(&self, key: i64) -> bool {
        (self.min..=self.max).contains(&key)
    }
}

/// Linear map from a key domain onto `bins` equal-width buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Binning {
    domain: Domain,
    bins: u64,
}

impl Binning {
    pub fn linear(domain: Domain, bins: u64) -> Self {
        Self {
            domain,
            bins: bins.clamp(1, domain.size()),
        }
    }

    /// As many bins as the largest power of `fanout` not above the domain size.
    pub fn for_tree(domain: Domain, fanout: u64) -> Self {
        let mut bins = 1u64;
        while let Some(next) = bins.checked_mul(fanout) {
            if next > domain.size() {
                break;
            }
            bins = next;
        }
        Self::linear(domain, bins)
    }

    pub fn bins(&self) -> u64 {
        self.bins
    }

    pub fn bin(&self, key: i64) -> u64 {
        let offset = (key as i128 - self.domain.min as i128) as u128;
        (offset * self.bins as u128 / self.domain.size() as u128) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Point(i64),
    Range(i64, i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub attribute: AttributeId,
    pub kind: QueryKind,
}

impl Query {
    pub fn point(a: i64) -> Self {
        Self {
            attribute: PRIMARY_ATTRIBUTE,
            kind: QueryKind::Point(a),
        }
    }

    pub fn range(a: i64, b: i64) -> Self {
        Self {
            attribute: PRIMARY_ATTRIBUTE,
            kind: QueryKind::Range(a, b),
        }
    }

    pub fn on(mut self, attribute: AttributeId) -> Self {
        self.attribute = attribute;
        self
    }

    pub fn bounds(&self) -> (i64, i64) {
        match self.kind {
            QueryKind::Point(a) => (a, a),
            QueryKind::Range(a, b) => (a, b),
        }
    }

    /// Whether a key satisfies the query.
    pub fn matches(&self, key: i64) -> bool {
        let (a, b) = self.bounds();
        (a..=b).contains(&key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    NoGamma,
    Gamma,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::NoGamma => "no-gamma",
            Mode::Gamma => "gamma",
        })
    }
}

impl FromStr for Mode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Mode::Single),
            "no-gamma" => Ok(Mode::NoGamma),
            "gamma" => Ok(Mode::Gamma),
            _ => Err(EngineError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// Which sanitizers each attribute releases. Each one costs the attribute's
/// full ε, so enabling both doubles the attribute's budget use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SanitizerKinds {
    pub point: bool,
    pub range: bool,
}

impl SanitizerKinds {
    pub const RANGE: Self = Self {
        point: false,
        range: true,
    };
    pub const POINT: Self = Self {
        point: true,
        range: false,
    };
    pub const BOTH: Self = Self {
        point: true,
        range: true,
    };

    fn count(&self) -> usize {
        usize::from(self.point) + usize::from(self.range)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub mode: Mode,
    /// Number of ORAMs.
    pub orams: u16,
    pub epsilon: f64,
    pub beta: f64,
    /// Aggregate tree fanout.
    pub fanout: u64,
    pub bucket_size: usize,
    /// Largest partition an ORAM may hold; `None` sizes each ORAM to fit.
    pub oram_capacity: Option<u64>,
    /// Budget available across all attributes; defaults to `epsilon`.
    pub total_budget: Option<f64>,
    pub sanitizers: SanitizerKinds,
    pub seed: u64,
    /// Replace every Laplace draw by its mean. Only for tests and audits: the
    /// released counts are then deterministic and carry no privacy.
    pub median_noise: bool,
}

impl EngineConfig {
    pub fn new(mode: Mode, orams: u16) -> Self {
        Self {
            mode,
            orams,
            epsilon: std::f64::consts::LN_2,
            beta: 2f64.powi(-20),
            fanout: 16,
            bucket_size: crate::oram::DEFAULT_BUCKET_SIZE,
            oram_capacity: None,
            total_budget: None,
            sanitizers: SanitizerKinds::RANGE,
            seed: 0,
            median_noise: false,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_fanout(mut self, fanout: u64) -> Self {
        self.fanout = fanout;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sanitizers(mut self, kinds: SanitizerKinds) -> Self {
        self.sanitizers = kinds;
        self
    }

    pub fn with_total_budget(mut self, budget: f64) -> Self {
        self.total_budget = Some(budget);
        self
    }

    fn validate(&self) -> Result<(), EngineError> {
        if self.orams == 0 {
            return Err(EngineError::Config("at least one ORAM is required".into()));
        }
        if self.mode == Mode::Single && self.orams != 1 {
            return Err(EngineError::Config(
                "single mode uses exactly one ORAM".into(),
            ));
        }
        if self.sanitizers.count() == 0 {
            return Err(EngineError::Config("no sanitizer enabled".into()));
        }
        if !(self.epsilon > 0.0) || !(self.beta > 0.0 && self.beta < 1.0) || self.fanout < 2 {
            return Err(EngineError::Config(format!(
                "need ε > 0, 0 < β < 1 and fanout ≥ 2, got ε={}, β={}, k={}",
                self.epsilon, self.beta, self.fanout
            )));
        }
        Ok(())
    }
}

/// `γ = sqrt(−3·m·ln β / k̃₀)`.
pub fn compute_gamma(orams: u16, beta: f64, noisy_count: f64) -> Result<f64, EngineError> {
    if orams == 0 || !(beta > 0.0 && beta < 1.0) || !(noisy_count > 0.0) {
        return Err(EngineError::Config(format!(
            "γ needs m ≥ 1, 0 < β < 1, k̃₀ > 0; got m={orams}, β={beta}, k̃₀={noisy_count}"
        )));
    }
    Ok((-3.0 * orams as f64 * beta.ln() / noisy_count).sqrt())
}

/// Requests each ORAM issues in γ mode: `ceil((1+γ)·k̃₀/m)`, or 0 when k̃₀ = 0.
pub fn gamma_requests_per_oram(
    orams: u16,
    beta: f64,
    noisy_count: u64,
) -> Result<u64, EngineError> {
    if noisy_count == 0 {
        return Ok(0);
    }
    let gamma = compute_gamma(orams, beta, noisy_count as f64)?;
    Ok(((1.0 + gamma) * noisy_count as f64 / orams as f64).ceil() as u64)
}

#[derive(Debug, Clone)]
struct Sanitizers {
    point: Option<PointHistogram>,
    range: Option<(Binning, AggregateTree)>,
}

impl Sanitizers {
    fn build(
        keys: &[i64],
        domain: Domain,
        epsilon: f64,
        config: &EngineConfig,
        noise: &mut dyn NoiseSource,
    ) -> Result<Self, EngineError> {
        let point = if config.sanitizers.point {
            let bins: Vec<u64> = keys.iter().map(|&k| (k - domain.min) as u64).collect();
            Some(PointHistogram::build(
                &bins,
                epsilon,
                config.beta,
                domain.size(),
                noise,
            )?)
        } else {
            None
        };
        let range = if config.sanitizers.range {
            let binning = Binning::for_tree(domain, config.fanout);
            let bins: Vec<u64> = keys.iter().map(|&k| binning.bin(k)).collect();
            let params = SanitizerParams::new(epsilon, config.beta, binning.bins(), config.fanout);
            Some((binning, AggregateTree::build(&bins, params, noise)?))
        } else {
            None
        };
        Ok(Self { point, range })
    }

    fn count(&self, domain: Domain, q: &Query) -> Result<u64, EngineError> {
        let (a, b) = q.bounds();
        if let (QueryKind::Point(_), Some(h)) = (q.kind, &self.point) {
            return Ok(h.query((a - domain.min) as u64)?);
        }
        if let Some((binning, tree)) = &self.range {
            return Ok(tree.query(binning.bin(a), binning.bin(b))?);
        }
        // point histogram only: sum of the bins in range
        let h = self.point.as_ref().expect("at least one sanitizer");
        Ok(
            h.bins()[(a - domain.min) as usize..=(b - domain.min) as usize]
                .iter()
                .sum(),
        )
    }

    fn alphas(&self) -> (Option<u64>, Option<u64>) {
        (
            self.point.as_ref().map(|h| h.alpha()),
            self.range.as_ref().map(|(_, t)| t.alpha()),
        )
    }
}

#[derive(Debug, Clone)]
struct Attribute {
    domain: Domain,
    epsilon: f64,
    index: Index,
    // one entry in single and γ mode, one per ORAM in no-γ mode
    sanitizers: Vec<Sanitizers>,
}

/// Budget used per attribute and in total.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub attributes: Vec<(AttributeId, f64)>,
    pub total: f64,
    pub limit: f64,
}

/// Measurements for one query. Byte and round-trip counts cover the query
/// phase only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryMetrics {
    pub elapsed: Duration,
    /// Records satisfying the query (`k₀`).
    pub true_count: u64,
    /// ORAM requests issued in total (`c`).
    pub fetched_count: u64,
    /// Requests issued by each ORAM.
    pub per_oram: Vec<u64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub oram_accesses: u64,
    pub roundtrips: u64,
    /// Noisy count was too small to cover the true result.
    pub failed: bool,
    /// Decoy requests that had to repeat an address for lack of distinct ones.
    pub padded: u64,
}

/// One ORAM request as issued, for white-box checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IssuedRequest {
    pub address: u32,
    pub real: bool,
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    /// Matching records, ordered by ID.
    pub records: Vec<Record>,
    pub metrics: QueryMetrics,
}

pub struct Engine {
    config: EngineConfig,
    record_size: usize,
    orams: Vec<PathOram>,
    partition_sizes: Vec<u32>,
    attributes: BTreeMap<AttributeId, Attribute>,
    locators: HashMap<u64, Locator>,
    noise: LiveNoise<Prg>,
    rng: Prg,
    request_log: Option<Vec<Vec<IssuedRequest>>>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("partition_sizes", &self.partition_sizes)
            .finish()
    }
}

impl Engine {
    /// Partition the records, write them into the ORAMs and build the index
    /// and sanitizers of the primary attribute.
    pub fn setup(
        db: &Database,
        domain: Domain,
        config: EngineConfig,
        storage: &Storage,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let m = config.orams;
        let mut master = Prg::seed_from_u64(config.seed);
        let enc_key = keygen(KEY_BITS, &mut master)?;
        let prf_key = keygen(KEY_BITS, &mut master)?;
        let noise = LiveNoise(Prg::seed_from_u64(master.gen()));
        let rng = Prg::seed_from_u64(master.gen());
        let oram_seeds: Vec<u64> = (0..m).map(|_| master.gen()).collect();

        let mut partitioner = Partitioner::new(prf_key, m)?;
        let locators: Vec<Locator> = db
            .records()
            .iter()
            .map(|r| partitioner.assign(r.id))
            .collect();
        let partition_sizes = partitioner.sizes().to_vec();
        let locator_map: HashMap<u64, Locator> =
            locators.iter().map(|l| (l.record_id, *l)).collect();

        let block_payload = BLOCK_HEADER + db.record_size();
        let mut orams = Vec::with_capacity(m as usize);
        for (j, &size) in partition_sizes.iter().enumerate() {
            if let Some(cap) = config.oram_capacity {
                if size as u64 > cap {
                    return Err(EngineError::Config(format!(
                        "partition {} holds {size} records, above the ORAM capacity {cap}",
                        j + 1
                    )));
                }
            }
            let capacity = config.oram_capacity.unwrap_or(size as u64).max(1);
            let oram_config =
                OramConfig::new(capacity, block_payload).with_bucket_size(config.bucket_size);
            let handle = storage.handle(j as u16 + 1)?;
            orams.push(PathOram::init_seeded(
                oram_config,
                &enc_key,
                handle,
                oram_seeds[j],
            )?);
        }

        let mut writes: Vec<Vec<AccessOp>> = vec![Vec::new(); m as usize];
        for (r, loc) in db.records().iter().zip(&locators) {
            writes[loc.oram_id as usize - 1]
                .push(AccessOp::Write(loc.address as u64, encode_block(r)));
        }
        for (oram, ops) in orams.iter_mut().zip(&writes) {
            for chunk in ops.chunks(SETUP_BATCH) {
                oram.batch_access(chunk)?;
            }
        }

        let mut engine = Self {
            config,
            record_size: db.record_size(),
            orams,
            partition_sizes,
            attributes: BTreeMap::new(),
            locators: locator_map,
            noise,
            rng,
            request_log: None,
        };
        let keys: Vec<(u64, i64)> = db.records().iter().map(|r| (r.id, r.key)).collect();
        let epsilon = engine.config.epsilon;
        engine.register_attribute(PRIMARY_ATTRIBUTE, &keys, domain, epsilon)?;
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn record_size(&self) -> usize {
        self.record_size
    }

    /// Records held by each ORAM.
    pub fn partition_sizes(&self) -> &[u32] {
        &self.partition_sizes
    }

    pub fn orams(&self) -> &[PathOram] {
        &self.orams
    }

    /// Total storage statistics over all ORAM handles since setup began.
    pub fn storage_stats(&self) -> StorageStats {
        let mut total = StorageStats::default();
        for o in &self.orams {
            total.add(&o.storage().stats());
        }
        total
    }

    /// Bytes held by the server across all ORAM trees.
    pub fn server_bytes(&self) -> u64 {
        self.orams
            .iter()
            .map(|o| o.config().bucket_count() * o.config().bucket_len() as u64)
            .sum()
    }

    /// Shifts `(α_point, α_range)` of an attribute's first sanitizer.
    pub fn alphas(&self, attribute: AttributeId) -> Option<(Option<u64>, Option<u64>)> {
        self.attributes
            .get(&attribute)
            .map(|a| a.sanitizers[0].alphas())
    }

    pub fn index(&self, attribute: AttributeId) -> Option<&Index> {
        self.attributes.get(&attribute).map(|a| &a.index)
    }

    /// Record the requests issued by subsequent queries, per ORAM.
    pub fn log_requests(&mut self, on: bool) {
        self.request_log = on.then(Vec::new);
    }

    /// Requests of the most recent query, per ORAM.
    pub fn last_requests(&self) -> Option<&[Vec<IssuedRequest>]> {
        self.request_log.as_deref()
    }

    fn attribute_cost(&self, epsilon: f64) -> Result<f64, EngineError> {
        // disjoint partitions compose to max, kinds on the same data to sum
        let per_partition = vec![epsilon; self.sanitizer_sets()];
        let partition_cost = compose(&per_partition, true)?;
        Ok(compose(
            &vec![partition_cost; self.config.sanitizers.count()],
            false,
        )?)
    }

    fn sanitizer_sets(&self) -> usize {
        match self.config.mode {
            Mode::NoGamma => self.config.orams as usize,
            Mode::Single | Mode::Gamma => 1,
        }
    }

    pub fn budget(&self) -> BudgetReport {
        let attributes: Vec<(AttributeId, f64)> = self
            .attributes
            .iter()
            .map(|(&id, a)| (id, self.attribute_cost(a.epsilon).unwrap()))
            .collect();
        let costs: Vec<f64> = attributes.iter().map(|(_, c)| *c).collect();
        BudgetReport {
            total: if costs.is_empty() {
                0.0
            } else {
                compose(&costs, false).unwrap()
            },
            attributes,
            limit: self.budget_limit(),
        }
    }

    fn budget_limit(&self) -> f64 {
        self.config
            .total_budget
            .unwrap_or(self.config.epsilon * self.config.sanitizers.count() as f64)
    }

    /// Index a further attribute of the stored records and release its
    /// sanitizers, charging `epsilon` against the total budget.
    pub fn register_attribute(
        &mut self,
        attribute: AttributeId,
        keys: &[(u64, i64)],
        domain: Domain,
        epsilon: f64,
    ) -> Result<(), EngineError> {
        if self.attributes.contains_key(&attribute) {
            return Err(EngineError::Config(format!(
                "attribute {attribute} already registered"
            )));
        }
        let cost = self.attribute_cost(epsilon).map_err(|_| {
            EngineError::Config(format!("attribute budget {epsilon} must be positive"))
        })?;
        let spent = self.budget().total;
        let limit = self.budget_limit();
        if spent + cost > limit + 1e-12 {
            return Err(EngineError::Budget {
                requested: cost,
                remaining: limit - spent,
            });
        }
        let stored: usize = self.partition_sizes.iter().map(|&s| s as usize).sum();
        if keys.len() != stored {
            return Err(EngineError::Data(format!(
                "attribute covers {} records, the store holds {stored}",
                keys.len()
            )));
        }
        let mut entries = Vec::with_capacity(keys.len());
        let mut per_partition: Vec<Vec<i64>> = vec![Vec::new(); self.sanitizer_sets()];
        let mut seen = HashSet::with_capacity(keys.len());
        for &(id, key) in keys {
            if !domain.contains(key) {
                return Err(EngineError::Data(format!(
                    "key {key} of record {id} outside domain"
                )));
            }
            if !seen.insert(id) {
                return Err(EngineError::Data(format!("duplicate record id {id}")));
            }
            let loc = *self
                .locators
                .get(&id)
                .ok_or_else(|| EngineError::Data(format!("record {id} is not stored")))?;
            entries.push((key, loc));
            let set = if self.sanitizer_sets() == 1 {
                0
            } else {
                loc.oram_id as usize - 1
            };
            per_partition[set].push(key);
        }
        let index = Index::build(entries)?;
        let mut sanitizers = Vec::with_capacity(per_partition.len());
        for keys in &per_partition {
            let noise: &mut dyn NoiseSource = if self.config.median_noise {
                &mut MedianNoise
            } else {
                &mut self.noise
            };
            sanitizers.push(Sanitizers::build(
                keys,
                domain,
                epsilon,
                &self.config,
                noise,
            )?);
        }
        self.attributes.insert(
            attribute,
            Attribute {
                domain,
                epsilon,
                index,
                sanitizers,
            },
        );
        Ok(())
    }

    /// Answer a query. A query whose noisy count cannot cover its true result
    /// comes back with `failed` set, no records and no ORAM traffic.
    pub fn query(&mut self, q: &Query) -> Result<QueryOutcome, EngineError> {
        let start = Instant::now();
        let attr = self.attributes.get(&q.attribute).ok_or_else(|| {
            EngineError::Query(format!("attribute {} is not registered", q.attribute))
        })?;
        let (a, b) = q.bounds();
        if a > b || !attr.domain.contains(a) || !attr.domain.contains(b) {
            return Err(EngineError::Query(format!(
                "[{a}, {b}] is not a range inside [{}, {}]",
                attr.domain.min, attr.domain.max
            )));
        }
        let m = self.config.orams;
        let truth = attr.index.lookup(a, b)?;
        let groups = group_by_oram(&truth, m);

        let counts: Vec<u64> = match self.config.mode {
            Mode::Single => vec![attr.sanitizers[0].count(attr.domain, q)?],
            Mode::Gamma => {
                let noisy = attr.sanitizers[0].count(attr.domain, q)?;
                vec![gamma_requests_per_oram(m, self.config.beta, noisy)?; m as usize]
            }
            Mode::NoGamma => attr
                .sanitizers
                .iter()
                .map(|s| s.count(attr.domain, q))
                .collect::<Result<_, _>>()?,
        };

        let mut metrics = QueryMetrics {
            true_count: truth.len() as u64,
            per_oram: counts.clone(),
            ..Default::default()
        };
        if groups
            .iter()
            .zip(&counts)
            .any(|(g, &c)| (g.len() as u64) > c)
        {
            metrics.failed = true;
            metrics.per_oram = vec![0; m as usize];
            metrics.elapsed = start.elapsed();
            return Ok(QueryOutcome {
                records: Vec::new(),
                metrics,
            });
        }
        metrics.fetched_count = counts.iter().sum();

        // decoys: distinct addresses outside T, shuffled in with the real ones
        let mut plans: Vec<Vec<IssuedRequest>> = Vec::with_capacity(m as usize);
        for (j, (group, &c)) in groups.iter().zip(&counts).enumerate() {
            let size = self.partition_sizes[j] as u64;
            let capacity = self.orams[j].config().capacity;
            let (plan, padded) = plan_requests(group, c, size, capacity, &mut self.rng);
            metrics.padded += padded;
            plans.push(plan);
        }

        let before: Vec<StorageStats> = self.orams.iter().map(|o| o.storage().stats()).collect();
        let results: Vec<Result<Vec<Option<Vec<u8>>>, OramError>> = std::thread::scope(|s| {
            let workers: Vec<_> = self
                .orams
                .iter_mut()
                .zip(&plans)
                .map(|(oram, plan)| {
                    s.spawn(move || {
                        if plan.is_empty() {
                            return Ok(Vec::new());
                        }
                        let ops: Vec<AccessOp> = plan
                            .iter()
                            .map(|r| AccessOp::Read(r.address as u64))
                            .collect();
                        oram.batch_access(&ops)
                    })
                })
                .collect();
            workers
                .into_iter()
                .map(|w| w.join().expect("ORAM worker panicked"))
                .collect()
        });

        // keep only the real requests' blocks, and check they are the records
        // the index promised
        let wanted: HashSet<u64> = truth.iter().map(|l| l.record_id).collect();
        let mut records = Vec::with_capacity(truth.len());
        for (result, plan) in results.into_iter().zip(&plans) {
            for (block, req) in result?.into_iter().zip(plan) {
                if !req.real {
                    continue;
                }
                let r = decode_block(&block.unwrap_or_default(), self.record_size);
                let key_ok = q.attribute != PRIMARY_ATTRIBUTE || q.matches(r.key);
                if !wanted.contains(&r.id) || !key_ok {
                    return Err(EngineError::Data(format!(
                        "ORAM returned unexpected record {}",
                        r.id
                    )));
                }
                records.push(r);
            }
        }
        records.sort_by_key(|r| r.id);

        for (oram, before) in self.orams.iter().zip(&before) {
            let d = oram.storage().stats().since(before);
            metrics.bytes_up += d.bytes_up;
            metrics.bytes_down += d.bytes_down;
            metrics.roundtrips += d.roundtrips;
        }
        metrics.oram_accesses = plans.iter().map(|p| p.len() as u64).sum();
        if let Some(log) = self.request_log.as_mut() {
            *log = plans;
        }
        metrics.elapsed = start.elapsed();
        Ok(QueryOutcome { records, metrics })
    }
}

/// Real requests for `group` plus `c − |group|` decoys drawn without
/// replacement from the other addresses in `[0, size)`, shuffled together.
/// When too few distinct decoys exist the rest repeat random addresses below
/// `capacity`; their number is returned alongside the plan.
fn plan_requests(
    group: &[Locator],
    c: u64,
    size: u64,
    capacity: u64,
    rng: &mut Prg,
) -> (Vec<IssuedRequest>, u64) {
    let real: HashSet<u32> = group.iter().map(|l| l.address).collect();
    let mut plan: Vec<IssuedRequest> = group
        .iter()
        .map(|l| IssuedRequest {
            address: l.address,
            real: true,
        })
        .collect();
    let needed = c - group.len() as u64;
    let available = size - real.len() as u64;
    let distinct = needed.min(available);
    if distinct * 2 > available {
        // dense: shuffle the complement and take a prefix
        let mut pool: Vec<u32> = (0..size as u32).filter(|a| !real.contains(a)).collect();
        pool.shuffle(rng);
        plan.extend(
            pool[..distinct as usize]
                .iter()
                .map(|&address| IssuedRequest {
                    address,
                    real: false,
                }),
        );
    } else {
        let mut chosen = HashSet::with_capacity(distinct as usize);
        while (chosen.len() as u64) < distinct {
            let a = rng.gen_range(0..size) as u32;
            if !real.contains(&a) && chosen.insert(a) {
                plan.push(IssuedRequest {
                    address: a,
                    real: false,
                });
            }
        }
    }
    let padded = needed - distinct;
    for _ in 0..padded {
        plan.push(IssuedRequest {
            address: rng.gen_range(0..capacity) as u32,
            real: false,
        });
    }
    plan.shuffle(rng);
    (plan, padded)
}

fn encode_block(r: &Record) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOCK_HEADER + r.payload.len());
    out.extend_from_slice(&r.id.to_le_bytes());
    out.extend_from_slice(&r.key.to_le_bytes());
    out.extend_from_slice(&r.payload);
    out
}

fn decode_block(block: &[u8], record_size: usize) -> Record {
    if block.len() < BLOCK_HEADER + record_size {
        return Record {
            id: u64::MAX,
            key: 0,
            payload: Vec::new(),
        };
    }
    Record {
        id: u64::from_le_bytes(block[0..8].try_into().unwrap()),
        key: i64::from_le_bytes(block[8..16].try_into().unwrap()),
        payload: block[BLOCK_HEADER..BLOCK_HEADER + record_size].to_vec(),
    }
}
