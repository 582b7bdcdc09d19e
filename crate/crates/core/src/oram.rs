//! PathORAM over a key-value bucket store.
//!
//! The server holds a complete binary tree of buckets, each with `Z` encrypted
//! slots. The client keeps the position map (address → leaf) and a stash.
//! Every access reads the full path to the block's current leaf, remaps the
//! block to a fresh uniform leaf, and writes the path back, evicting stash
//! blocks as deep as their own leaf allows.
//!
//! [`PathOram::batch_access`] serves many requests with one batched read of
//! the union of their paths and one batched write of those buckets.
//!
//! Bucket `i` (heap order, root = 0) is stored under key `i`; its value is the
//! `Z` serialized ciphertexts concatenated. Each plaintext slot is
//! `[u64 LE address][payload]`, with address `u64::MAX` marking a dummy.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::crypto::{BlockCipher, CryptoError, Prg, SymKey};
use crate::storage::{KvsHandle, StorageError};

pub const DEFAULT_BUCKET_SIZE: usize = 5;
/// Target overflow probability used to size the stash by default.
pub const DEFAULT_STASH_FAILURE: f64 = 1.0 / 4_294_967_296.0;

const DUMMY: u64 = u64::MAX;
const ADDR_LEN: usize = 8;
// buckets written per storage call while initializing
const INIT_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum OramError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("address {address} out of range for capacity {capacity}")]
    Address { address: u64, capacity: u64 },
    #[error("storage already holds an ORAM tree")]
    StorageNotEmpty,
    #[error("stash overflow: {size} blocks exceed the limit of {limit}")]
    StashOverflow { size: usize, limit: usize },
    #[error("storage error: {0}")]
    Storage(#[from] StorageError),
    #[error("crypto error: {0}")]
    Crypto(#[from] CryptoError),
    #[error("corrupted bucket {0}")]
    Corrupted(u64),
}

/// Upper bound on `Pr[stash size > x]` for bucket size 5: `min(1, 14 · 0.6002^x)`.
pub fn stash_bound(x: i64) -> Result<f64, OramError> {
    if x < 0 {
        return Err(OramError::Parameter(format!("stash size {x} is negative")));
    }
    Ok((14.0 * 0.6002f64.powf(x as f64)).min(1.0))
}

/// Smallest stash size whose overflow bound is at most `target`.
pub fn stash_limit_for(target: f64) -> usize {
    let mut x = 0i64;
    while stash_bound(x).unwrap() > target {
        x += 1;
    }
    x as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct OramConfig {
    /// Blocks per bucket (`Z`).
    pub bucket_size: usize,
    /// Number of addressable blocks.
    pub capacity: u64,
    /// Bytes of user data per block.
    pub block_payload: usize,
    /// Blocks the stash may hold at rest before the access fails.
    pub stash_limit: usize,
}

impl OramConfig {
    pub fn new(capacity: u64, block_payload: usize) -> Self {
        Self {
            bucket_size: DEFAULT_BUCKET_SIZE,
            capacity,
            block_payload,
            stash_limit: stash_limit_for(DEFAULT_STASH_FAILURE),
        }
    }

    pub fn with_bucket_size(mut self, z: usize) -> Self {
        self.bucket_size = z;
        self
    }

    pub fn with_stash_limit(mut self, limit: usize) -> Self {
        self.stash_limit = limit;
        self
    }

    fn validate(&self) -> Result<(), OramError> {
        if self.bucket_size == 0 {
            return Err(OramError::Parameter(
                "bucket size must be at least 1".into(),
            ));
        }
        if self.capacity == 0 {
            return Err(OramError::Parameter("capacity must be at least 1".into()));
        }
        if self.capacity == DUMMY {
            return Err(OramError::Parameter(
                "capacity collides with the dummy address".into(),
            ));
        }
        Ok(())
    }

    /// Leaf depth `L = ceil(log2(max(2, ceil(capacity / Z))))`.
    pub fn height(&self) -> u32 {
        let leaves = self.capacity.div_ceil(self.bucket_size as u64).max(2);
        64 - (leaves - 1).leading_zeros()
    }

    pub fn leaves(&self) -> u64 {
        1 << self.height()
    }

    pub fn bucket_count(&self) -> u64 {
        (1 << (self.height() + 1)) - 1
    }

    /// Size of one serialized slot ciphertext.
    pub fn slot_len(&self) -> usize {
        BlockCipher::ciphertext_len(ADDR_LEN + self.block_payload)
    }

    pub fn bucket_len(&self) -> usize {
        self.slot_len() * self.bucket_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessOp {
    Read(u64),
    Write(u64, Vec<u8>),
}

impl AccessOp {
    pub fn address(&self) -> u64 {
        match self {
            AccessOp::Read(a) | AccessOp::Write(a, _) => *a,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OramStats {
    /// Logical accesses served.
    pub accesses: u64,
    /// Calls to `access` / `batch_access`.
    pub batches: u64,
    /// Largest stash size observed after a write-back.
    pub max_stash: usize,
    /// Largest stash size observed while a batch was in flight.
    pub max_transient_stash: usize,
}

pub struct PathOram {
    config: OramConfig,
    height: u32,
    cipher: BlockCipher,
    storage: KvsHandle,
    positions: Vec<u64>,
    stash: BTreeMap<u64, Vec<u8>>,
    rng: Prg,
    stats: OramStats,
    trace: Option<Vec<u64>>,
    remap: bool,
}

impl std::fmt::Debug for PathOram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PathOram")
            .field("config", &self.config)
            .field("stash", &self.stash.len())
            .field("stats", &self.stats)
            .finish()
    }
}

/// Heap index of the bucket at `level` on the path to `leaf`.
fn node_on_path(leaf: u64, level: u32, height: u32) -> u64 {
    (((1u64 << height) + leaf) >> (height - level)) - 1
}

fn seal(
    config: &OramConfig,
    cipher: &BlockCipher,
    rng: &mut Prg,
    blocks: &[(u64, &[u8])],
) -> Result<Vec<u8>, OramError> {
    let mut out = Vec::with_capacity(config.bucket_len());
    let mut plain = vec![0u8; ADDR_LEN + config.block_payload];
    for i in 0..config.bucket_size {
        plain.fill(0);
        match blocks.get(i) {
            Some((a, data)) => {
                plain[..ADDR_LEN].copy_from_slice(&a.to_le_bytes());
                plain[ADDR_LEN..ADDR_LEN + data.len()].copy_from_slice(data);
            }
            None => plain[..ADDR_LEN].copy_from_slice(&DUMMY.to_le_bytes()),
        }
        out.extend_from_slice(&cipher.encrypt_block(&plain, rng)?.to_bytes());
    }
    Ok(out)
}

impl PathOram {
    /// Fill `storage` with a tree of dummy buckets and sample the position map.
    pub fn init(
        config: OramConfig,
        key: &SymKey,
        mut storage: KvsHandle,
        mut rng: Prg,
    ) -> Result<Self, OramError> {
        config.validate()?;
        if storage.get(0)?.is_some() {
            return Err(OramError::StorageNotEmpty);
        }
        let height = config.height();
        let cipher = BlockCipher::new(key, ADDR_LEN + config.block_payload);
        let leaves = config.leaves();
        let positions = (0..config.capacity)
            .map(|_| rng.gen_range(0..leaves))
            .collect();
        let mut oram = Self {
            height,
            cipher,
            storage,
            positions,
            stash: BTreeMap::new(),
            rng,
            stats: OramStats::default(),
            trace: None,
            remap: true,
            config,
        };
        let buckets = oram.config.bucket_count();
        let mut next = 0u64;
        while next < buckets {
            let end = (next + INIT_CHUNK as u64).min(buckets);
            let mut pairs = Vec::with_capacity((end - next) as usize);
            for b in next..end {
                pairs.push((b, oram.seal_bucket(&[])?));
            }
            oram.storage.batch_put(&pairs)?;
            next = end;
        }
        Ok(oram)
    }

    /// Derive the ORAM's private generator from a seed.
    pub fn init_seeded(
        config: OramConfig,
        key: &SymKey,
        storage: KvsHandle,
        seed: u64,
    ) -> Result<Self, OramError> {
        Self::init(config, key, storage, Prg::seed_from_u64(seed))
    }

    pub fn config(&self) -> &OramConfig {
        &self.config
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn stats(&self) -> OramStats {
        self.stats
    }

    pub fn stash_len(&self) -> usize {
        self.stash.len()
    }

    pub fn storage(&self) -> &KvsHandle {
        &self.storage
    }

    pub fn storage_mut(&mut self) -> &mut KvsHandle {
        &mut self.storage
    }

    /// Record the leaf read by every subsequent logical access.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<u64> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Keep every block on its initial leaf. This breaks obliviousness and only
    /// exists so the statistical audits can be shown to catch it.
    #[doc(hidden)]
    pub fn disable_remapping_for_audit(&mut self) {
        self.remap = false;
    }

    pub fn access(&mut self, op: AccessOp) -> Result<Option<Vec<u8>>, OramError> {
        Ok(self
            .batch_access(std::slice::from_ref(&op))?
            .pop()
            .flatten())
    }

    pub fn read(&mut self, address: u64) -> Result<Vec<u8>, OramError> {
        Ok(self.access(AccessOp::Read(address))?.unwrap_or_default())
    }

    pub fn write(&mut self, address: u64, data: Vec<u8>) -> Result<(), OramError> {
        self.access(AccessOp::Write(address, data)).map(|_| ())
    }

    /// Serve `ops` in order with one batched read and one batched write-back.
    ///
    /// Reads return `Some(payload)` (all zeros for never-written addresses),
    /// writes return `None`. Repeated addresses within the batch read a fresh
    /// random path instead, so the number of paths always equals `ops.len()`.
    /// On a storage failure the client state is rolled back.
    pub fn batch_access(&mut self, ops: &[AccessOp]) -> Result<Vec<Option<Vec<u8>>>, OramError> {
        if ops.is_empty() {
            return Err(OramError::Parameter("empty batch".into()));
        }
        for op in ops {
            let address = op.address();
            if address >= self.config.capacity {
                return Err(OramError::Address {
                    address,
                    capacity: self.config.capacity,
                });
            }
            if let AccessOp::Write(_, d) = op {
                if d.len() > self.config.block_payload {
                    return Err(OramError::Crypto(CryptoError::PlaintextTooLarge {
                        len: d.len(),
                        max: self.config.block_payload,
                    }));
                }
            }
        }

        let stash_snapshot = self.stash.clone();
        let mut old_positions: HashMap<u64, u64> = HashMap::new();
        let leaves = self.config.leaves();

        // 1. pick the leaf each op reads and remap its address
        let mut read_leaves = Vec::with_capacity(ops.len());
        for op in ops {
            let a = op.address();
            let leaf = match old_positions.entry(a) {
                Entry::Occupied(_) => self.rng.gen_range(0..leaves),
                Entry::Vacant(v) => *v.insert(self.positions[a as usize]),
            };
            read_leaves.push(leaf);
            if self.remap {
                self.positions[a as usize] = self.rng.gen_range(0..leaves);
            }
        }

        let result = self.run_batch(ops, &read_leaves);
        match result {
            Ok(out) => {
                self.stats.accesses += ops.len() as u64;
                self.stats.batches += 1;
                if let Some(t) = self.trace.as_mut() {
                    t.extend_from_slice(&read_leaves);
                }
                self.stats.max_stash = self.stats.max_stash.max(self.stash.len());
                if self.stash.len() > self.config.stash_limit {
                    return Err(OramError::StashOverflow {
                        size: self.stash.len(),
                        limit: self.config.stash_limit,
                    });
                }
                Ok(out)
            }
            Err(e) => {
                self.stash = stash_snapshot;
                for (a, leaf) in old_positions {
                    self.positions[a as usize] = leaf;
                }
                Err(e)
            }
        }
    }

    fn run_batch(
        &mut self,
        ops: &[AccessOp],
        read_leaves: &[u64],
    ) -> Result<Vec<Option<Vec<u8>>>, OramError> {
        let mut buckets: Vec<u64> = read_leaves
            .iter()
            .flat_map(|&leaf| (0..=self.height).map(move |l| (leaf, l)))
            .map(|(leaf, l)| node_on_path(leaf, l, self.height))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        buckets.sort_unstable();

        // 2. read every bucket on the union of paths
        let values = self.storage.batch_get(&buckets)?;
        for (&b, value) in buckets.iter().zip(&values) {
            for (addr, payload) in self.open_bucket(b, value)? {
                self.stash.insert(addr, payload);
            }
        }
        self.stats.max_transient_stash = self.stats.max_transient_stash.max(self.stash.len());

        // 3. serve the requests from the stash
        let payload_len = self.config.block_payload;
        let mut out = Vec::with_capacity(ops.len());
        for op in ops {
            match op {
                AccessOp::Read(a) => out.push(Some(
                    self.stash
                        .get(a)
                        .cloned()
                        .unwrap_or_else(|| vec![0u8; payload_len]),
                )),
                AccessOp::Write(a, d) => {
                    let mut block = d.clone();
                    block.resize(payload_len, 0);
                    self.stash.insert(*a, block);
                    out.push(None);
                }
            }
        }

        // 4. evict into the read buckets and write them back
        let placement = self.evict(&buckets);
        let mut pairs = Vec::with_capacity(buckets.len());
        for (&b, blocks) in buckets.iter().zip(&placement) {
            let slots: Vec<(u64, &[u8])> = blocks
                .iter()
                .map(|a| (*a, self.stash[a].as_slice()))
                .collect();
            pairs.push((b, seal(&self.config, &self.cipher, &mut self.rng, &slots)?));
        }
        self.storage.batch_put(&pairs)?;
        for blocks in placement {
            for a in blocks {
                self.stash.remove(&a);
            }
        }
        Ok(out)
    }

    /// Choose which stash blocks go into each of `buckets` (sorted heap
    /// indices), deepest buckets first, never placing a block off its path.
    fn evict(&self, buckets: &[u64]) -> Vec<Vec<u64>> {
        let slot_of: HashMap<u64, usize> =
            buckets.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let mut placement = vec![Vec::new(); buckets.len()];
        let mut pending: Vec<u64> = self.stash.keys().copied().collect();
        for level in (0..=self.height).rev() {
            let mut remaining = Vec::with_capacity(pending.len());
            for a in pending {
                let node = node_on_path(self.positions[a as usize], level, self.height);
                match slot_of.get(&node) {
                    Some(&i) if placement[i].len() < self.config.bucket_size => {
                        placement[i].push(a)
                    }
                    _ => remaining.push(a),
                }
            }
            pending = remaining;
        }
        placement
    }

    fn seal_bucket(&mut self, blocks: &[(u64, &[u8])]) -> Result<Vec<u8>, OramError> {
        seal(&self.config, &self.cipher, &mut self.rng, blocks)
    }

    fn open_bucket(&self, index: u64, value: &[u8]) -> Result<Vec<(u64, Vec<u8>)>, OramError> {
        let slot = self.config.slot_len();
        if value.len() != self.config.bucket_len() {
            return Err(OramError::Corrupted(index));
        }
        let mut real = Vec::new();
        for chunk in value.chunks_exact(slot) {
            let plain = self.cipher.decrypt_bytes(chunk)?;
            let addr = u64::from_le_bytes(plain[..ADDR_LEN].try_into().unwrap());
            if addr != DUMMY {
                if addr >= self.config.capacity {
                    return Err(OramError::Corrupted(index));
                }
                real.push((addr, plain[ADDR_LEN..].to_vec()));
            }
        }
        Ok(real)
    }

    /// White-box check: every block stored in the tree sits on the path to its
    /// mapped leaf, no address is stored twice, and every stash block is
    /// absent from the tree. Reads the whole tree (one batched call).
    pub fn check_path_invariant(&mut self) -> Result<bool, OramError> {
        let buckets: Vec<u64> = (0..self.config.bucket_count()).collect();
        let values = self.storage.batch_get(&buckets)?;
        let mut seen = HashSet::new();
        for (&b, value) in buckets.iter().zip(&values) {
            let level = 63 - (b + 1).leading_zeros();
            for (addr, _) in self.open_bucket(b, value)? {
                let expected = node_on_path(self.positions[addr as usize], level, self.height);
                if expected != b || !seen.insert(addr) || self.stash.contains_key(&addr) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use crate::storage::Storage;
    use std::collections::HashMap;

    fn oram(capacity: u64, payload: usize, seed: u64) -> PathOram {
        let mut rng = Prg::seed_from_u64(seed);
        let key = keygen(128, &mut rng).unwrap();
        let storage = Storage::memory();
        PathOram::init(
            OramConfig::new(capacity, payload),
            &key,
            storage.handle(0).unwrap(),
            rng,
        )
        .unwrap()
    }

    #[test]
    fn tree_sizing() {
        let c = OramConfig::new(20, 8);
        assert_eq!(c.height(), 2);
        assert_eq!(c.bucket_count(), 7);
        let c = OramConfig::new(1, 8);
        assert_eq!(c.height(), 1);
        assert_eq!(c.bucket_count(), 3);
        assert_eq!(OramConfig::new(1024, 8).height(), 8);
        assert_eq!(OramConfig::new(2500, 8).height(), 9);
    }

    #[test]
    fn init_writes_dummy_tree() {
        let mut rng = Prg::seed_from_u64(1);
        let key = keygen(256, &mut rng).unwrap();
        let storage = Storage::memory();
        let cfg = OramConfig::new(20, 16);
        let mut o = PathOram::init(cfg.clone(), &key, storage.handle(0).unwrap(), rng).unwrap();
        let mut h = storage.handle(0).unwrap();
        let all: Vec<u64> = (0..7).collect();
        let values = h.batch_get(&all).unwrap();
        assert_eq!(values.len(), 7);
        assert!(values.iter().all(|v| v.len() == cfg.bucket_len()));
        assert_eq!(
            values
                .iter()
                .map(|v| v.len() / cfg.slot_len())
                .sum::<usize>(),
            35
        );
        assert!(h.get(7).unwrap().is_none());
        assert!(o.check_path_invariant().unwrap());

        let again = PathOram::init(cfg, &key, storage.handle(0).unwrap(), Prg::seed_from_u64(2));
        assert!(matches!(again, Err(OramError::StorageNotEmpty)));
    }

    #[test]
    fn read_after_write_and_unwritten_reads() {
        let mut o = oram(64, 8, 3);
        o.write(3, b"XXXXXXXX".to_vec()).unwrap();
        assert_eq!(o.read(3).unwrap(), b"XXXXXXXX");
        assert_eq!(o.read(5).unwrap(), vec![0u8; 8]);
        o.write(4, b"ab".to_vec()).unwrap();
        assert_eq!(o.read(4).unwrap(), b"ab\0\0\0\0\0\0");
        assert!(matches!(o.read(64), Err(OramError::Address { .. })));
        assert!(o.check_path_invariant().unwrap());
    }

    #[test]
    fn batch_orders_requests() {
        let mut o = oram(16, 1, 4);
        let out = o
            .batch_access(&[AccessOp::Write(1, vec![b'A']), AccessOp::Read(1)])
            .unwrap();
        assert_eq!(out, vec![None, Some(vec![b'A'])]);
        assert!(matches!(o.batch_access(&[]), Err(OramError::Parameter(_))));
    }

    #[test]
    fn batch_uses_two_roundtrips() {
        let mut o = oram(256, 8, 5);
        for a in 0..256 {
            o.write(a, a.to_le_bytes().to_vec()).unwrap();
        }
        let ops: Vec<AccessOp> = (0..40).map(AccessOp::Read).collect();
        let before = o.storage().stats();
        let batched = o.batch_access(&ops).unwrap();
        assert_eq!(o.storage().stats().since(&before).roundtrips, 2);
        let before = o.storage().stats();
        let sequential: Vec<_> = ops.iter().map(|op| o.access(op.clone()).unwrap()).collect();
        assert_eq!(o.storage().stats().since(&before).roundtrips, 80);
        assert_eq!(batched, sequential);
    }

    #[test]
    fn matches_map_oracle_and_keeps_invariant() {
        let mut o = oram(128, 4, 6);
        let mut rng = Prg::seed_from_u64(60);
        let mut oracle: HashMap<u64, Vec<u8>> = HashMap::new();
        for step in 0..10_000u32 {
            let a = rng.gen_range(0..128u64);
            if rng.gen_bool(0.5) {
                let d = step.to_le_bytes().to_vec();
                o.write(a, d.clone()).unwrap();
                oracle.insert(a, d);
            } else {
                let expected = oracle.get(&a).cloned().unwrap_or(vec![0; 4]);
                assert_eq!(o.read(a).unwrap(), expected);
            }
            if step % 1000 == 0 {
                assert!(o.check_path_invariant().unwrap());
            }
        }
        assert!(o.check_path_invariant().unwrap());
    }

    #[test]
    fn duplicate_addresses_in_batch_read_decoy_paths() {
        let mut o = oram(64, 2, 7);
        o.enable_trace();
        o.batch_access(&[
            AccessOp::Write(9, vec![1, 2]),
            AccessOp::Read(9),
            AccessOp::Read(9),
        ])
        .unwrap();
        assert_eq!(o.take_trace().len(), 3);
        assert_eq!(o.read(9).unwrap(), vec![1, 2]);
    }

    #[test]
    fn rollback_on_storage_failure() {
        let mut o = oram(32, 2, 8);
        o.write(1, vec![7, 7]).unwrap();
        let positions = o.positions.clone();
        let stash = o.stash.clone();
        o.storage_mut().close();
        assert!(matches!(o.read(1), Err(OramError::Storage(_))));
        assert_eq!(o.positions, positions);
        assert_eq!(o.stash, stash);
    }

    #[test]
    fn stash_limit_is_enforced() {
        let mut rng = Prg::seed_from_u64(9);
        let key = keygen(128, &mut rng).unwrap();
        // one bucket slot per node and no stash room: overflow appears quickly
        let cfg = OramConfig::new(64, 1)
            .with_bucket_size(1)
            .with_stash_limit(0);
        let mut o = PathOram::init(cfg, &key, Storage::memory().handle(0).unwrap(), rng).unwrap();
        let mut overflowed = false;
        for a in 0..64 {
            if let Err(OramError::StashOverflow { .. }) = o.write(a, vec![1]) {
                overflowed = true;
                break;
            }
        }
        assert!(overflowed);
    }

    #[test]
    fn stash_bound_values() {
        assert_eq!(stash_bound(0).unwrap(), 1.0);
        assert!((stash_bound(50).unwrap() - 1.1506085320932343e-10).abs() < 1e-22);
        assert!((stash_bound(100).unwrap() - 9.456428529469624e-22).abs() < 1e-33);
        assert!(stash_bound(-1).is_err());
        assert_eq!(stash_limit_for(DEFAULT_STASH_FAILURE), 49);
    }
}
