use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

pub type DeliveryTag = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("unknown or expired delivery tag {0}")]
    UnknownTag(DeliveryTag),
}

#[derive(Debug, Clone)]
pub struct Delivery<T> {
    pub tag: DeliveryTag,
    pub message: T,
    /// 1 on first delivery, incremented on every redelivery.
    pub attempt: u32,
}

/// FIFO queue with at-least-once delivery: a dequeued message stays owned by
/// the queue until acked; a nack, or the visibility timeout expiring, makes
/// it deliverable again ahead of anything enqueued after it.
pub trait MessageQueue<T>: Send + Sync {
    fn enqueue(&self, message: T);
    fn dequeue(&self) -> Option<Delivery<T>>;
    /// Like [`MessageQueue::dequeue`], but waits up to `timeout` for a message.
    fn dequeue_timeout(&self, timeout: Duration) -> Option<Delivery<T>>;
    fn ack(&self, tag: DeliveryTag) -> Result<(), QueueError>;
    fn nack(&self, tag: DeliveryTag) -> Result<(), QueueError>;
    /// Messages ready for delivery.
    fn ready_len(&self) -> usize;
    /// Messages delivered but not yet acked.
    fn in_flight_len(&self) -> usize;

    fn is_idle(&self) -> bool {
        self.ready_len() == 0 && self.in_flight_len() == 0
    }
}

struct Entry<T> {
    seq: u64,
    attempts: u32,
    message: T,
}

struct InFlight<T> {
    entry: Entry<T>,
    delivered_at: Instant,
}

struct State<T> {
    ready: VecDeque<Entry<T>>,
    in_flight: BTreeMap<DeliveryTag, InFlight<T>>,
    next_seq: u64,
    next_tag: DeliveryTag,
}

impl<T> State<T> {
    /// Puts an entry back in enqueue order.
    fn requeue(&mut self, entry: Entry<T>) {
        let at = self.ready.partition_point(|e| e.seq < entry.seq);
        self.ready.insert(at, entry);
    }

    fn reclaim_expired(&mut self, timeout: Duration, now: Instant) {
        let expired: Vec<DeliveryTag> = self
            .in_flight
            .iter()
            .filter(|(_, f)| now.duration_since(f.delivered_at) >= timeout)
            .map(|(tag, _)| *tag)
            .collect();
        for tag in expired {
            let flight = self.in_flight.remove(&tag).expect("tag listed above");
            self.requeue(flight.entry);
        }
    }
}

pub struct MemoryQueue<T> {
    state: Mutex<State<T>>,
    available: Condvar,
    visibility_timeout: Duration,
}

impl<T> MemoryQueue<T> {
    pub const DEFAULT_VISIBILITY_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new() -> Self {
        Self::with_visibility_timeout(Self::DEFAULT_VISIBILITY_TIMEOUT)
    }

    pub fn with_visibility_timeout(visibility_timeout: Duration) -> Self {
        Self {
            state: Mutex::new(State {
                ready: VecDeque::new(),
                in_flight: BTreeMap::new(),
                next_seq: 0,
                next_tag: 1,
            }),
            available: Condvar::new(),
            visibility_timeout,
        }
    }

    fn take_next(&self, state: &mut State<T>) -> Option<Delivery<T>>
    where
        T: Clone,
    {
        state.reclaim_expired(self.visibility_timeout, Instant::now());
        let mut entry = state.ready.pop_front()?;
        entry.attempts += 1;
        let tag = state.next_tag;
        state.next_tag += 1;
        let delivery = Delivery {
            tag,
            message: entry.message.clone(),
            attempt: entry.attempts,
        };
        state.in_flight.insert(
            tag,
            InFlight {
                entry,
                delivered_at: Instant::now(),
            },
        );
        Some(delivery)
    }
}

impl<T> Default for MemoryQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Clone + Send> MessageQueue<T> for MemoryQueue<T> {
    fn enqueue(&self, message: T) {
        let mut state = self.state.lock().expect("queue lock poisoned");
        let seq = state.next_seq;
        state.next_seq += 1;
        state.ready.push_back(Entry {
            seq,
            attempts: 0,
            message,
        });
        drop(state);
        self.available.notify_one();
    }

    fn dequeue(&self) -> Option<Delivery<T>> {
        let mut state = self.state.lock().expect("queue lock poisoned");
        self.take_next(&mut state)
    }

    fn dequeue_timeout(&self, timeout: Duration) -> Option<Delivery<T>> {
        let deadline = Instant::now() + timeout;
        let mut state = self.state.lock().expect("queue lock poisoned");
        loop {
            if let Some(delivery) = self.take_next(&mut state) {
                return Some(delivery);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            // Wake up in time to reclaim the earliest expiring delivery.
            let mut wait = deadline - now;
            if let Some(first) = state.in_flight.values().map(|f| f.delivered_at).min() {
                let expires = first + self.visibility_timeout;
                wait = wait.min(expires.saturating_duration_since(now).max(Duration::from_millis(1)));
            }
            state = self.available.wait_timeout(state, wait).expect("queue lock poisoned").0;
        }
    }

    fn ack(&self, tag: DeliveryTag) -> Result<(), QueueError> {
        let mut state = self.state.lock().expect("queue lock poisoned");
        state
            .in_flight
            .remove(&tag)
            .map(|_| ())
            .ok_or(QueueError::UnknownTag(tag))
    }

    fn nack(&self, tag: DeliveryTag) -> Result<(), QueueError> {
        let mut state = self.state.lock().expect("queue lock poisoned");
        let flight = state.in_flight.remove(&tag).ok_or(QueueError::UnknownTag(tag))?;
        state.requeue(flight.entry);
        drop(state);
        self.available.notify_one();
        Ok(())
    }

    fn ready_len(&self) -> usize {
        self.state.lock().expect("queue lock poisoned").ready.len()
    }

    fn in_flight_len(&self) -> usize {
        self.state.lock().expect("queue lock poisoned").in_flight.len()
    }
}
