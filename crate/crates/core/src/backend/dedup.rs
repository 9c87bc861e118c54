use std::collections::{HashSet, VecDeque};
use std::sync::Mutex;

/// Bounded set of recently applied (report, group) pairs with FIFO
/// eviction, shared by every consumer of a backend.
pub(crate) struct DedupCache {
    capacity: usize,
    inner: Mutex<Inner>,
}

#[derive(Default)]
struct Inner {
    seen: HashSet<(String, String)>,
    order: VecDeque<(String, String)>,
}

impl DedupCache {
    pub(crate) fn new(capacity: usize) -> Self {
        Self {
            capacity,
            inner: Mutex::new(Inner::default()),
        }
    }

    /// Marks the pair as applied; false if it already was.
    pub(crate) fn claim(&self, report_id: &str, group_id: &str) -> bool {
        if self.capacity == 0 {
            return true;
        }
        let key = (report_id.to_string(), group_id.to_string());
        let mut inner = self.inner.lock().expect("dedup lock poisoned");
        if !inner.seen.insert(key.clone()) {
            return false;
        }
        inner.order.push_back(key);
        while inner.order.len() > self.capacity {
            let evicted = inner.order.pop_front().expect("non-empty");
            inner.seen.remove(&evicted);
        }
        true
    }

    /// Undoes a claim whose merge did not commit.
    pub(crate) fn release(&self, report_id: &str, group_id: &str) {
        let key = (report_id.to_string(), group_id.to_string());
        let mut inner = self.inner.lock().expect("dedup lock poisoned");
        if inner.seen.remove(&key) {
            inner.order.retain(|k| *k != key);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn claims_once_and_evicts_oldest() {
        let cache = DedupCache::new(2);
        assert!(cache.claim("r1", "g"));
        assert!(!cache.claim("r1", "g"));
        assert!(cache.claim("r1", "h"));
        assert!(cache.claim("r2", "g"));
        // r1/g was evicted.
        assert!(cache.claim("r1", "g"));
        cache.release("r1", "g");
        assert!(cache.claim("r1", "g"));
    }
}
