use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{KvBackend, StorageError};

// Log layout, all little-endian:
//   batch  := [u32 body_len] body
//   body   := [u32 count] entry*
//   entry  := [u64 key] [u32 value_len] value
// A batch whose body is cut short by a crash is ignored on replay, which keeps
// batch_put all-or-nothing.

#[derive(Debug)]
struct Inner {
    file: File,
    path: PathBuf,
    index: HashMap<u64, (u64, u32)>,
    end: u64,
}

/// Append-log store with an in-memory offset index. Clones share the file.
#[derive(Debug, Clone)]
pub struct DiskStore {
    inner: Arc<Mutex<Inner>>,
}

impl DiskStore {
    pub fn open(path: &Path) -> Result<Self, StorageError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        let mut bytes = Vec::new();
        file.seek(SeekFrom::Start(0))?;
        file.read_to_end(&mut bytes)?;
        let (index, end) = replay(&bytes);
        if end < bytes.len() as u64 {
            // drop a torn tail so later appends start on a batch boundary
            file.set_len(end)?;
        }
        Ok(Self {
            inner: Arc::new(Mutex::new(Inner {
                file,
                path: path.to_path_buf(),
                index,
                end,
            })),
        })
    }

    pub fn path(&self) -> PathBuf {
        self.inner.lock().unwrap().path.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&self, pairs: &[(u64, &[u8])]) -> Result<(), StorageError> {
        let mut body = Vec::new();
        body.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
        let mut offsets = Vec::with_capacity(pairs.len());
        for (k, v) in pairs {
            body.extend_from_slice(&k.to_le_bytes());
            body.extend_from_slice(&(v.len() as u32).to_le_bytes());
            offsets.push((*k, body.len() as u64, v.len() as u32));
            body.extend_from_slice(v);
        }
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);

        let mut inner = self.inner.lock().unwrap();
        inner.file.write_all(&frame)?;
        inner.file.flush()?;
        let base = inner.end + 4;
        for (k, off, len) in offsets {
            inner.index.insert(k, (base + off, len));
        }
        inner.end += frame.len() as u64;
        Ok(())
    }
}

fn replay(bytes: &[u8]) -> (HashMap<u64, (u64, u32)>, u64) {
    let mut index = HashMap::new();
    let mut pos = 0usize;
    let read_u32 = |b: &[u8], at: usize| u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
    while pos + 4 <= bytes.len() {
        let body_len = read_u32(bytes, pos) as usize;
        let start = pos + 4;
        if start + body_len > bytes.len() || body_len < 4 {
            break;
        }
        let body = &bytes[start..start + body_len];
        let count = read_u32(body, 0) as usize;
        let mut at = 4usize;
        let mut entries = Vec::with_capacity(count);
        let mut ok = true;
        for _ in 0..count {
            if at + 12 > body.len() {
                ok = false;
                break;
            }
            let key = u64::from_le_bytes(body[at..at + 8].try_into().unwrap());
            let len = read_u32(body, at + 8);
            at += 12;
            if at + len as usize > body.len() {
                ok = false;
                break;
            }
            entries.push((key, (start + at) as u64, len));
            at += len as usize;
        }
        if !ok {
            break;
        }
        for (k, off, len) in entries {
            index.insert(k, (off, len));
        }
        pos = start + body_len;
    }
    (index, pos as u64)
}

fn read_at(file: &mut File, offset: u64, len: u32) -> Result<Vec<u8>, StorageError> {
    let mut buf = vec![0u8; len as usize];
    file.seek(SeekFrom::Start(offset))?;
    file.read_exact(&mut buf)?;
    Ok(buf)
}

impl KvBackend for DiskStore {
    fn put(&mut self, key: u64, value: &[u8]) -> Result<(), StorageError> {
        self.append(&[(key, value)])
    }

    fn get(&mut self, key: u64) -> Result<Option<Vec<u8>>, StorageError> {
        let mut inner = self.inner.lock().unwrap();
        match inner.index.get(&key).copied() {
            Some((off, len)) => Ok(Some(read_at(&mut inner.file, off, len)?)),
            None => Ok(None),
        }
    }

    fn batch_get(&mut self, keys: &[u64]) -> Result<Vec<Vec<u8>>, StorageError> {
        let mut inner = self.inner.lock().unwrap();
        let missing: Vec<u64> = keys
            .iter()
            .copied()
            .filter(|k| !inner.index.contains_key(k))
            .collect();
        if !missing.is_empty() {
            return Err(StorageError::MissingKeys(missing));
        }
        keys.iter()
            .map(|k| {
                let (off, len) = inner.index[k];
                read_at(&mut inner.file, off, len)
            })
            .collect()
    }

    fn batch_put(&mut self, pairs: &[(u64, Vec<u8>)]) -> Result<(), StorageError> {
        let refs: Vec<(u64, &[u8])> = pairs.iter().map(|(k, v)| (*k, v.as_slice())).collect();
        self.append(&refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survives_reopen_and_ignores_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.log");
        {
            let mut s = DiskStore::open(&path).unwrap();
            s.batch_put(&[(1, b"one".to_vec()), (2, b"two".to_vec())])
                .unwrap();
            s.put(1, b"uno").unwrap();
        }
        // simulate a crash in the middle of a batch
        {
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(&100u32.to_le_bytes()).unwrap();
            f.write_all(&[1, 0, 0, 0, 3]).unwrap();
        }
        let mut s = DiskStore::open(&path).unwrap();
        assert_eq!(s.get(1).unwrap().unwrap(), b"uno");
        assert_eq!(s.get(2).unwrap().unwrap(), b"two");
        assert_eq!(s.len(), 2);
        s.put(3, b"three").unwrap();
        drop(s);
        let mut s = DiskStore::open(&path).unwrap();
        assert_eq!(s.get(3).unwrap().unwrap(), b"three");
    }
}
