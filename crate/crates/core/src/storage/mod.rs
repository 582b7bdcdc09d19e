//! Untrusted key-value storage.
//!
//! Every backend speaks the same small vocabulary: single `get`/`put` and
//! one-round-trip `batch_get`/`batch_put`. [`KvsHandle`] wraps a backend with
//! a namespace (so several ORAMs can share one store), a closed flag and
//! round-trip/byte counters.

mod disk;
mod memory;
mod remote;
pub mod server;
pub mod wire;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

pub use disk::DiskStore;
pub use memory::MemoryStore;
pub use remote::RemoteStore;

/// Keys handed to a [`KvsHandle`] must fit below the namespace bits.
pub const NAMESPACE_SHIFT: u32 = 48;
pub const MAX_LOCAL_KEY: u64 = (1 << NAMESPACE_SHIFT) - 1;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage handle is closed")]
    Closed,
    #[error("batch request is empty")]
    EmptyBatch,
    #[error("missing keys: {0:?}")]
    MissingKeys(Vec<u64>),
    #[error("key {0:#x} does not fit in the namespaced key space")]
    KeyOutOfRange(u64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
}

/// Raw operations provided by a storage backend. One call is one round trip.
pub trait KvBackend: Send {
    fn put(&mut self, key: u64, value: &[u8]) -> Result<(), StorageError>;
    fn get(&mut self, key: u64) -> Result<Option<Vec<u8>>, StorageError>;
    fn batch_get(&mut self, keys: &[u64]) -> Result<Vec<Vec<u8>>, StorageError>;
    fn batch_put(&mut self, pairs: &[(u64, Vec<u8>)]) -> Result<(), StorageError>;
}

/// Traffic counters. Bytes count keys (8 bytes each) and values, not framing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StorageStats {
    pub roundtrips: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl StorageStats {
    pub fn since(&self, earlier: &StorageStats) -> StorageStats {
        StorageStats {
            roundtrips: self.roundtrips - earlier.roundtrips,
            bytes_up: self.bytes_up - earlier.bytes_up,
            bytes_down: self.bytes_down - earlier.bytes_down,
        }
    }

    pub fn add(&mut self, other: &StorageStats) {
        self.roundtrips += other.roundtrips;
        self.bytes_up += other.bytes_up;
        self.bytes_down += other.bytes_down;
    }
}

pub struct KvsHandle {
    backend: Box<dyn KvBackend>,
    namespace: u16,
    stats: StorageStats,
    closed: bool,
}

impl fmt::Debug for KvsHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KvsHandle")
            .field("namespace", &self.namespace)
            .field("stats", &self.stats)
            .field("closed", &self.closed)
            .finish()
    }
}

impl KvsHandle {
    pub fn new(backend: Box<dyn KvBackend>, namespace: u16) -> Self {
        Self {
            backend,
            namespace,
            stats: StorageStats::default(),
            closed: false,
        }
    }

    pub fn namespace(&self) -> u16 {
        self.namespace
    }

    pub fn stats(&self) -> StorageStats {
        self.stats
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    fn key(&self, key: u64) -> Result<u64, StorageError> {
        if key > MAX_LOCAL_KEY {
            return Err(StorageError::KeyOutOfRange(key));
        }
        Ok(((self.namespace as u64) << NAMESPACE_SHIFT) | key)
    }

    fn check_open(&self) -> Result<(), StorageError> {
        if self.closed {
            Err(StorageError::Closed)
        } else {
            Ok(())
        }
    }

    pub fn put(&mut self, key: u64, value: &[u8]) -> Result<(), StorageError> {
        self.check_open()?;
        let k = self.key(key)?;
        self.backend.put(k, value)?;
        self.stats.roundtrips += 1;
        self.stats.bytes_up += 8 + value.len() as u64;
        Ok(())
    }

    pub fn get(&mut self, key: u64) -> Result<Option<Vec<u8>>, StorageError> {
        self.check_open()?;
        let k = self.key(key)?;
        let v = self.backend.get(k)?;
        self.stats.roundtrips += 1;
        self.stats.bytes_up += 8;
        self.stats.bytes_down += v.as_ref().map_or(0, |v| v.len() as u64);
        Ok(v)
    }

    /// Values come back in request order. A missing key fails the whole batch
    /// and the error lists the missing keys in the caller's key space.
    pub fn batch_get(&mut self, keys: &[u64]) -> Result<Vec<Vec<u8>>, StorageError> {
        self.check_open()?;
        if keys.is_empty() {
            return Err(StorageError::EmptyBatch);
        }
        let full = keys
            .iter()
            .map(|&k| self.key(k))
            .collect::<Result<Vec<_>, _>>()?;
        let values = self.backend.batch_get(&full).map_err(|e| match e {
            StorageError::MissingKeys(missing) => {
                StorageError::MissingKeys(missing.into_iter().map(|k| k & MAX_LOCAL_KEY).collect())
            }
            e => e,
        })?;
        self.stats.roundtrips += 1;
        self.stats.bytes_up += 8 * keys.len() as u64;
        self.stats.bytes_down += values.iter().map(|v| v.len() as u64).sum::<u64>();
        Ok(values)
    }

    pub fn batch_put(&mut self, pairs: &[(u64, Vec<u8>)]) -> Result<(), StorageError> {
        self.check_open()?;
        if pairs.is_empty() {
            return Err(StorageError::EmptyBatch);
        }
        let full = pairs
            .iter()
            .map(|(k, v)| Ok((self.key(*k)?, v.clone())))
            .collect::<Result<Vec<_>, StorageError>>()?;
        self.backend.batch_put(&full)?;
        self.stats.roundtrips += 1;
        self.stats.bytes_up += pairs.iter().map(|(_, v)| 8 + v.len() as u64).sum::<u64>();
        Ok(())
    }
}

/// Which backend a deployment talks to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Memory,
    /// Append-log file at the given path.
    Disk(PathBuf),
    /// `HOST:PORT` of a running storage server.
    Remote(String),
}

impl FromStr for BackendSpec {
    type Err = StorageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "memory" {
            return Ok(BackendSpec::Memory);
        }
        if let Some(path) = s.strip_prefix("disk=") {
            return Ok(BackendSpec::Disk(PathBuf::from(path)));
        }
        if let Some(addr) = s.strip_prefix("remote=") {
            if addr.rsplit_once(':').is_none() {
                return Err(StorageError::InvalidSpec(s.to_string()));
            }
            return Ok(BackendSpec::Remote(addr.to_string()));
        }
        Err(StorageError::InvalidSpec(s.to_string()))
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Memory => write!(f, "memory"),
            BackendSpec::Disk(p) => write!(f, "disk={}", p.display()),
            BackendSpec::Remote(a) => write!(f, "remote={a}"),
        }
    }
}

/// Connected storage service that hands out namespaced handles.
#[derive(Debug, Clone)]
pub enum Storage {
    Memory(MemoryStore),
    Disk(DiskStore),
    Remote(String),
}

impl Storage {
    pub fn connect(spec: &BackendSpec) -> Result<Self, StorageError> {
        Ok(match spec {
            BackendSpec::Memory => Storage::Memory(MemoryStore::new()),
            BackendSpec::Disk(path) => Storage::Disk(DiskStore::open(path)?),
            BackendSpec::Remote(addr) => {
                // probe once so misconfiguration surfaces at connect time
                RemoteStore::connect(addr)?;
                Storage::Remote(addr.clone())
            }
        })
    }

    pub fn memory() -> Self {
        Storage::Memory(MemoryStore::new())
    }

    /// Open a handle. Remote storage opens one connection per handle.
    pub fn handle(&self, namespace: u16) -> Result<KvsHandle, StorageError> {
        let backend: Box<dyn KvBackend> = match self {
            Storage::Memory(m) => Box::new(m.clone()),
            Storage::Disk(d) => Box::new(d.clone()),
            Storage::Remote(addr) => Box::new(RemoteStore::connect(addr)?),
        };
        Ok(KvsHandle::new(backend, namespace))
    }
}
