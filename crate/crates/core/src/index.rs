//! Client-side B+-tree from search keys to record locators.
//!
//! The tree is bulk-loaded once from sorted entries and never modified.
//! Nodes at each level hold an even share of the level's entries, aiming for
//! the configured fill, so every non-root node is between half full and full.

use std::collections::HashSet;

use thiserror::Error;

use crate::crypto::{prf_bucket, SymKey};

pub const DEFAULT_FANOUT: usize = 200;
/// Entries per node aimed for when bulk loading (70% of the default fanout).
pub const DEFAULT_FILL: usize = 140;
pub const PAGE_SIZE: usize = 4096;

const LEAF_ENTRY_LEN: usize = 8 + 8 + 2 + 4;
const INNER_ENTRY_LEN: usize = 8 + 4;
const NODE_HEADER_LEN: usize = 8;
const MAGIC: &[u8; 4] = b"EPIX";

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("record id {0} appears more than once")]
    DuplicateId(u64),
    #[error("malformed range [{0}, {1}]")]
    Query(i64, i64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("malformed index pages")]
    Malformed,
}

/// Where a record lives: its ID, the ORAM holding it (1-based) and its block
/// address inside that ORAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Locator {
    pub record_id: u64,
    pub oram_id: u16,
    pub address: u32,
}

/// Assigns record IDs to ORAMs with a keyed hash and hands out consecutive
/// block addresses within each ORAM.
#[derive(Debug, Clone)]
pub struct Partitioner {
    key: SymKey,
    orams: u16,
    next: Vec<u32>,
}

impl Partitioner {
    pub fn new(key: SymKey, orams: u16) -> Result<Self, IndexError> {
        if orams == 0 {
            return Err(IndexError::Parameter(
                "at least one ORAM is required".into(),
            ));
        }
        Ok(Self {
            key,
            orams,
            next: vec![0; orams as usize],
        })
    }

    /// ORAM for a record ID, in `1..=m`.
    pub fn oram_of(&self, record_id: u64) -> u16 {
        prf_bucket(&self.key, &record_id.to_be_bytes(), self.orams as u64) as u16 + 1
    }

    pub fn assign(&mut self, record_id: u64) -> Locator {
        let oram_id = self.oram_of(record_id);
        let slot = &mut self.next[oram_id as usize - 1];
        let address = *slot;
        *slot += 1;
        Locator {
            record_id,
            oram_id,
            address,
        }
    }

    /// Records assigned to each ORAM so far.
    pub fn sizes(&self) -> &[u32] {
        &self.next
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Inner {
    first_child: usize,
    // smallest key under each child
    mins: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    fanout: usize,
    fill: usize,
    leaves: Vec<Vec<(i64, Locator)>>,
    // bottom-up; the last level holds the root
    inner: Vec<Vec<Inner>>,
}

/// Split `len` items into node sizes near `fill`, never above `fanout`.
fn node_sizes(len: usize, fanout: usize, fill: usize) -> Vec<usize> {
    let count = ((len as f64 / fill as f64).round() as usize)
        .max(len.div_ceil(fanout))
        .max(1);
    let (base, extra) = (len / count, len % count);
    (0..count).map(|i| base + usize::from(i < extra)).collect()
}

impl Index {
    pub fn build(entries: Vec<(i64, Locator)>) -> Result<Self, IndexError> {
        Self::build_with(entries, DEFAULT_FANOUT, DEFAULT_FILL)
    }

    pub fn build_with(
        mut entries: Vec<(i64, Locator)>,
        fanout: usize,
        fill: usize,
    ) -> Result<Self, IndexError> {
        if fanout < 3 || fill * 2 < fanout || fill > fanout {
            return Err(IndexError::Parameter(format!(
                "fill {fill} must lie between half of and the fanout {fanout}"
            )));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for (_, loc) in &entries {
            if !seen.insert(loc.record_id) {
                return Err(IndexError::DuplicateId(loc.record_id));
            }
        }
        entries.sort_by_key(|(k, l)| (*k, l.record_id));

        let mut leaves = Vec::new();
        let mut rest = entries.as_slice();
        for size in node_sizes(entries.len(), fanout, fill) {
            let (head, tail) = rest.split_at(size);
            leaves.push(head.to_vec());
            rest = tail;
        }

        let mut inner: Vec<Vec<Inner>> = Vec::new();
        let mut mins: Vec<i64> = leaves
            .iter()
            .map(|l| l.first().map_or(i64::MIN, |e| e.0))
            .collect();
        while mins.len() > 1 {
            let mut level = Vec::new();
            let mut first_child = 0;
            for size in node_sizes(mins.len(), fanout, fill) {
                level.push(Inner {
                    first_child,
                    mins: mins[first_child..first_child + size].to_vec(),
                });
                first_child += size;
            }
            mins = level.iter().map(|n| n.mins[0]).collect();
            inner.push(level);
        }
        Ok(Self {
            fanout,
            fill,
            leaves,
            inner,
        })
    }

    pub fn len(&self) -> usize {
        self.leaves.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    /// Levels including the leaves.
    pub fn depth(&self) -> usize {
        self.inner.len() + 1
    }

    /// Fill fraction of every node except the root.
    pub fn occupancy(&self) -> Vec<f64> {
        let f = self.fanout as f64;
        let mut out: Vec<f64> = Vec::new();
        if !self.inner.is_empty() {
            out.extend(self.leaves.iter().map(|l| l.len() as f64 / f));
            for level in &self.inner[..self.inner.len() - 1] {
                out.extend(level.iter().map(|n| n.mins.len() as f64 / f));
            }
        }
        out
    }

    /// Leaf holding the first entry with key `>= key`, or the leaf before it.
    fn descend(&self, key: i64) -> usize {
        let mut node = 0;
        for level in self.inner.iter().rev() {
            let n = &level[node];
            let i = n.mins.partition_point(|&m| m < key);
            node = n.first_child + i.saturating_sub(1);
        }
        node
    }

    /// Locators whose key lies in `[lo, hi]`, in key order.
    pub fn lookup(&self, lo: i64, hi: i64) -> Result<Vec<Locator>, IndexError> {
        if lo > hi {
            return Err(IndexError::Query(lo, hi));
        }
        let mut out = Vec::new();
        let mut leaf = self.descend(lo);
        let mut pos = self.leaves[leaf].partition_point(|e| e.0 < lo);
        while leaf < self.leaves.len() {
            let entries = &self.leaves[leaf];
            while pos < entries.len() {
                let (k, loc) = entries[pos];
                if k > hi {
                    return Ok(out);
                }
                out.push(loc);
                pos += 1;
            }
            leaf += 1;
            pos = 0;
        }
        Ok(out)
    }

    pub fn lookup_point(&self, key: i64) -> Vec<Locator> {
        self.lookup(key, key).unwrap()
    }

    /// Serialize as 4 KiB pages: a header page, then each node padded to whole
    /// pages, leaves first and the root last.
    ///
    /// Header: `"EPIX" [u32 fanout] [u32 fill] [u64 entries] [u32 levels] [u32 nodes]*`.
    /// Node: `[u8 kind] [3 pad] [u32 count]`, then leaf entries
    /// `[i64 key][u64 id][u16 oram][u32 address]` or inner entries
    /// `[i64 min key][u32 child]`. All little-endian.
    pub fn to_pages(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.fanout as u32).to_le_bytes());
        out.extend_from_slice(&(self.fill as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.depth() as u32).to_le_bytes());
        out.extend_from_slice(&(self.leaves.len() as u32).to_le_bytes());
        for level in &self.inner {
            out.extend_from_slice(&(level.len() as u32).to_le_bytes());
        }
        pad_to_page(&mut out);
        for leaf in &self.leaves {
            out.extend_from_slice(&[0, 0, 0, 0]);
            out.extend_from_slice(&(leaf.len() as u32).to_le_bytes());
            for (k, loc) in leaf {
                out.extend_from_slice(&k.to_le_bytes());
                out.extend_from_slice(&loc.record_id.to_le_bytes());
                out.extend_from_slice(&loc.oram_id.to_le_bytes());
                out.extend_from_slice(&loc.address.to_le_bytes());
            }
            pad_to_page(&mut out);
        }
        for level in &self.inner {
            for n in level {
                out.extend_from_slice(&[1, 0, 0, 0]);
                out.extend_from_slice(&(n.mins.len() as u32).to_le_bytes());
                for (i, m) in n.mins.iter().enumerate() {
                    out.extend_from_slice(&m.to_le_bytes());
                    out.extend_from_slice(&((n.first_child + i) as u32).to_le_bytes());
                }
                pad_to_page(&mut out);
            }
        }
        out
    }

    /// Rebuild from [`Index::to_pages`] output. Only the leaves are read; the
    /// inner levels are rebuilt from them.
    pub fn from_pages(bytes: &[u8]) -> Result<Self, IndexError> {
        let u32_at = |at: usize| -> Result<u32, IndexError> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or(IndexError::Malformed)
        };
        if bytes.len() < PAGE_SIZE || !bytes.len().is_multiple_of(PAGE_SIZE) || &bytes[..4] != MAGIC
        {
            return Err(IndexError::Malformed);
        }
        let fanout = u32_at(4)? as usize;
        let fill = u32_at(8)? as usize;
        let leaf_count = u32_at(24)? as usize;
        let mut entries = Vec::new();
        let mut at = PAGE_SIZE;
        for _ in 0..leaf_count {
            if bytes.get(at) != Some(&0) {
                return Err(IndexError::Malformed);
            }
            let count = u32_at(at + 4)? as usize;
            let body = bytes
                .get(at + NODE_HEADER_LEN..at + NODE_HEADER_LEN + count * LEAF_ENTRY_LEN)
                .ok_or(IndexError::Malformed)?;
            for e in body.chunks_exact(LEAF_ENTRY_LEN) {
                let key = i64::from_le_bytes(e[0..8].try_into().unwrap());
                let record_id = u64::from_le_bytes(e[8..16].try_into().unwrap());
                let oram_id = u16::from_le_bytes(e[16..18].try_into().unwrap());
                let address = u32::from_le_bytes(e[18..22].try_into().unwrap());
                entries.push((
                    key,
                    Locator {
                        record_id,
                        oram_id,
                        address,
                    },
                ));
            }
            at += node_pages(count, LEAF_ENTRY_LEN) * PAGE_SIZE;
        }
        Self::build_with(entries, fanout, fill).map_err(|_| IndexError::Malformed)
    }

    /// Bytes taken by [`Index::to_pages`].
    pub fn serialized_size(&self) -> usize {
        let leaves: usize = self
            .leaves
            .iter()
            .map(|l| node_pages(l.len(), LEAF_ENTRY_LEN))
            .sum();
        let inner: usize = self
            .inner
            .iter()
            .flatten()
            .map(|n| node_pages(n.mins.len(), INNER_ENTRY_LEN))
            .sum();
        (1 + leaves + inner) * PAGE_SIZE
    }
}

fn node_pages(count: usize, entry_len: usize) -> usize {
    (NODE_HEADER_LEN + count * entry_len)
        .div_ceil(PAGE_SIZE)
        .max(1)
}

fn pad_to_page(out: &mut Vec<u8>) {
    let len = out.len().div_ceil(PAGE_SIZE).max(1) * PAGE_SIZE;
    out.resize(len, 0);
}

/// Split locators by ORAM; entry `j` holds those of ORAM `j + 1`.
pub fn group_by_oram(locators: &[Locator], orams: u16) -> Vec<Vec<Locator>> {
    let mut groups = vec![Vec::new(); orams as usize];
    for l in locators {
        groups[l.oram_id as usize - 1].push(*l);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, Prg};
    use rand::{Rng, SeedableRng};

    fn loc(id: u64) -> Locator {
        Locator {
            record_id: id,
            oram_id: 1,
            address: id as u32,
        }
    }

    fn index_of(keys: &[i64]) -> Index {
        Index::build(
            keys.iter()
                .enumerate()
                .map(|(i, &k)| (k, loc(i as u64)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn duplicate_keys_are_kept() {
        let idx = index_of(&[1, 2, 3, 3]);
        assert_eq!(idx.lookup(2, 3).unwrap().len(), 3);
        assert_eq!(idx.lookup_point(3).len(), 2);
        assert!(idx.lookup(5, 9).unwrap().is_empty());
        assert_eq!(idx.lookup(3, 2), Err(IndexError::Query(3, 2)));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let r = Index::build(vec![(1, loc(4)), (2, loc(4))]);
        assert_eq!(r, Err(IndexError::DuplicateId(4)));
    }

    #[test]
    fn empty_index() {
        let idx = Index::build(Vec::new()).unwrap();
        assert!(idx.is_empty());
        assert!(idx.lookup(i64::MIN, i64::MAX).unwrap().is_empty());
    }

    #[test]
    fn matches_brute_force_filter() {
        let mut rng = Prg::seed_from_u64(1);
        for n in [1000usize, 30_000] {
            let keys: Vec<i64> = (0..n).map(|_| rng.gen_range(-500..500)).collect();
            let idx = index_of(&keys);
            assert!(idx.depth() >= 2);
            for _ in 0..100 {
                let a = rng.gen_range(-600..600);
                let b = a + rng.gen_range(0..200);
                let mut got: Vec<u64> = idx
                    .lookup(a, b)
                    .unwrap()
                    .iter()
                    .map(|l| l.record_id)
                    .collect();
                got.sort_unstable();
                let want: Vec<u64> = (0..n as u64)
                    .filter(|&i| (a..=b).contains(&keys[i as usize]))
                    .collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn hot_key_spanning_leaves() {
        let mut keys = vec![5i64; 1000];
        keys.extend([1, 2, 9]);
        let idx = index_of(&keys);
        assert_eq!(idx.lookup_point(5).len(), 1000);
        assert_eq!(idx.lookup(5, 9).unwrap().len(), 1001);
        assert_eq!(idx.lookup(3, 4).unwrap().len(), 0);
    }

    #[test]
    fn occupancy_after_bulk_load() {
        for n in [201usize, 1000, 10_000, 100_000] {
            let keys: Vec<i64> = (0..n as i64).collect();
            let occ = index_of(&keys).occupancy();
            assert!(occ.iter().all(|&o| (0.5..=1.0).contains(&o)), "n={n}");
            let mean = occ.iter().sum::<f64>() / occ.len() as f64;
            // two forced half-full leaves at n=201
            if n >= 1000 {
                assert!((mean - 0.7).abs() < 0.05, "n={n} mean={mean}");
            }
        }
    }

    #[test]
    fn pages_roundtrip() {
        let keys: Vec<i64> = (0..5000).map(|i| (i * 37) % 1001).collect();
        let idx = index_of(&keys);
        let pages = idx.to_pages();
        assert_eq!(pages.len(), idx.serialized_size());
        assert_eq!(pages.len() % PAGE_SIZE, 0);
        assert_eq!(Index::from_pages(&pages).unwrap(), idx);
        assert_eq!(Index::from_pages(&pages[..100]), Err(IndexError::Malformed));
    }

    #[test]
    fn partitioner_assigns_consecutive_addresses() {
        let mut rng = Prg::seed_from_u64(2);
        let mut p = Partitioner::new(keygen(128, &mut rng).unwrap(), 4).unwrap();
        let locs: Vec<Locator> = (0..100).map(|id| p.assign(id)).collect();
        assert_eq!(p.sizes().iter().sum::<u32>(), 100);
        for (j, group) in group_by_oram(&locs, 4).iter().enumerate() {
            let addrs: Vec<u32> = group.iter().map(|l| l.address).collect();
            assert_eq!(addrs, (0..group.len() as u32).collect::<Vec<_>>());
            assert!(group.iter().all(|l| l.oram_id as usize == j + 1));
        }
        let mut single = Partitioner::new(keygen(128, &mut rng).unwrap(), 1).unwrap();
        assert!((0..50).all(|id| single.assign(id).oram_id == 1));
        assert!(Partitioner::new(keygen(128, &mut rng).unwrap(), 0).is_err());
    }
}
