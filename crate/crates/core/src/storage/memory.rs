use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{KvBackend, StorageError};

/// Shared in-process map. Clones refer to the same store.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    map: Arc<Mutex<HashMap<u64, Vec<u8>>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total bytes held in values.
    pub fn value_bytes(&self) -> u64 {
        self.map
            .lock()
            .unwrap()
            .values()
            .map(|v| v.len() as u64)
            .sum()
    }
}

impl KvBackend for MemoryStore {
    fn put(&mut self, key: u64, value: &[u8]) -> Result<(), StorageError> {
        self.map.lock().unwrap().insert(key, value.to_vec());
        Ok(())
    }

    fn get(&mut self, key: u64) -> Result<Option<Vec<u8>>, StorageError> {
        Ok(self.map.lock().unwrap().get(&key).cloned())
    }

    fn batch_get(&mut self, keys: &[u64]) -> Result<Vec<Vec<u8>>, StorageError> {
        let map = self.map.lock().unwrap();
        let missing: Vec<u64> = keys
            .iter()
            .copied()
            .filter(|k| !map.contains_key(k))
            .collect();
        if !missing.is_empty() {
            return Err(StorageError::MissingKeys(missing));
        }
        Ok(keys.iter().map(|k| map[k].clone()).collect())
    }

    fn batch_put(&mut self, pairs: &[(u64, Vec<u8>)]) -> Result<(), StorageError> {
        let mut map = self.map.lock().unwrap();
        for (k, v) in pairs {
            map.insert(*k, v.clone());
        }
        Ok(())
    }
}
