use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use thiserror::Error;

pub type Version = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Versioned {
    pub value: Vec<u8>,
    pub version: Version,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("version conflict on {key}: expected {expected}, found {found:?}")]
    Conflict {
        key: String,
        expected: Version,
        found: Option<Version>,
    },
    #[error("key {0} already exists")]
    Exists(String),
}

/// Key-value store with optimistic concurrency: every successful write bumps
/// the key's version, and conditional writes only land when the caller's
/// version is current.
pub trait VersionedStore: Send + Sync {
    fn get(&self, key: &str) -> Option<Versioned>;
    fn put_if_version(&self, key: &str, value: Vec<u8>, expected: Version) -> Result<Version, StoreError>;
    fn put_new(&self, key: &str, value: Vec<u8>) -> Result<Version, StoreError>;
    fn delete(&self, key: &str, expected: Version) -> Result<(), StoreError>;
}

#[derive(Default)]
struct Inner {
    entries: HashMap<String, Versioned>,
    // Global so versions keep increasing across delete and re-create.
    last_version: Version,
}

#[derive(Default)]
pub struct MemoryStore {
    inner: Mutex<Inner>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copy of every entry, for audits.
    pub fn snapshot(&self) -> BTreeMap<String, Versioned> {
        let inner = self.inner.lock().expect("store lock poisoned");
        inner.entries.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

impl VersionedStore for MemoryStore {
    fn get(&self, key: &str) -> Option<Versioned> {
        self.inner
            .lock()
            .expect("store lock poisoned")
            .entries
            .get(key)
            .cloned()
    }

    fn put_if_version(&self, key: &str, value: Vec<u8>, expected: Version) -> Result<Version, StoreError> {
        let mut inner = self.inner.lock().expect("store lock poisoned");
        let found = inner.entries.get(key).map(|v| v.version);
        if found != Some(expected) {
            return Err(StoreError::Conflict {
                key: key.to_string(),
                expected,
                found,
            });
        }
        inner.last_version += 1;
        let version = inner.last_version;
        inner.entries.insert(key.to_string(), Versioned { value, version });
        Ok(version)
    }

    fn put_new(&self, key: &str, value: Vec<u8>) -> Result<Version, StoreError> {
        let mut inner = self.inner.lock().expect("store lock poisoned");
        if inner.entries.contains_key(key) {
            return Err(StoreError::Exists(key.to_string()));
        }
        inner.last_version += 1;
        let version = inner.last_version;
        inner.entries.insert(key.to_string(), Versioned { value, version });
        Ok(version)
    }

    fn delete(&self, key: &str, expected: Version) -> Result<(), StoreError> {
        let mut inner = self.inner.lock().expect("store lock poisoned");
        let found = inner.entries.get(key).map(|v| v.version);
        if found != Some(expected) {
            return Err(StoreError::Conflict {
                key: key.to_string(),
                expected,
                found,
            });
        }
        inner.entries.remove(key);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn versions_increase_and_stale_writes_fail() {
        let store = MemoryStore::new();
        let v1 = store.put_new("k", b"a".to_vec()).unwrap();
        assert_eq!(store.put_new("k", b"b".to_vec()), Err(StoreError::Exists("k".into())));
        let v2 = store.put_if_version("k", b"b".to_vec(), v1).unwrap();
        assert!(v2 > v1);
        let stale = store.put_if_version("k", b"c".to_vec(), v1);
        assert!(matches!(stale, Err(StoreError::Conflict { found: Some(v), .. }) if v == v2));
        assert_eq!(store.get("k").unwrap().value, b"b");
        assert!(store.delete("k", v1).is_err());
        store.delete("k", v2).unwrap();
        assert!(store.get("k").is_none());
        let v3 = store.put_new("k", vec![]).unwrap();
        assert!(v3 > v2);
        assert!(store.put_if_version("missing", vec![], 1).is_err());
    }

    #[test]
    fn concurrent_cas_increments_are_not_lost() {
        let store = Arc::new(MemoryStore::new());
        store.put_new("counter", 0u64.to_le_bytes().to_vec()).unwrap();
        let writers: Vec<_> = (0..8)
            .map(|_| {
                let store = Arc::clone(&store);
                std::thread::spawn(move || {
                    for _ in 0..1000 {
                        loop {
                            let current = store.get("counter").unwrap();
                            let n = u64::from_le_bytes(current.value.try_into().unwrap());
                            let next = (n + 1).to_le_bytes().to_vec();
                            if store.put_if_version("counter", next, current.version).is_ok() {
                                break;
                            }
                        }
                    }
                })
            })
            .collect();
        for w in writers {
            w.join().unwrap();
        }
        let value = store.get("counter").unwrap().value;
        assert_eq!(u64::from_le_bytes(value.try_into().unwrap()), 8000);
    }
}
