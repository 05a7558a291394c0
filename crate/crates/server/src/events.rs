//! Ordered live event feed with a replay buffer.
//!
//! Every published event gets the next `event_id`. The last `capacity`
//! events are retained so a subscriber reconnecting with `Last-Event-ID`
//! resumes without loss. Each subscriber has a bounded queue; a subscriber
//! that falls behind is cut off and told to resync, so publishing never
//! waits on a slow consumer.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use tokio::sync::mpsc;

pub const RESYNC_EVENT: &str = "resync";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusEvent {
    pub event_id: u64,
    pub kind: &'static str,
    pub data: serde_json::Value,
}

struct Subscriber {
    tx: mpsc::Sender<BusEvent>,
    overflowed: Arc<AtomicBool>,
}

struct Inner {
    next_id: u64,
    buffer: VecDeque<BusEvent>,
    subscribers: Vec<Subscriber>,
}

pub struct EventBus {
    capacity: usize,
    subscriber_capacity: usize,
    inner: Mutex<Inner>,
}

/// A live subscription: `backlog` first, then `live`.
pub struct Subscription {
    /// The requested resume point has already left the buffer.
    pub resync_required: bool,
    pub backlog: Vec<BusEvent>,
    pub live: mpsc::Receiver<BusEvent>,
    overflowed: Arc<AtomicBool>,
}

impl Subscription {
    /// True once the bus has dropped this subscriber for falling behind.
    pub fn overflowed(&self) -> bool {
        self.overflowed.load(Ordering::Acquire)
    }
}

impl EventBus {
    pub fn new(capacity: usize, subscriber_capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            subscriber_capacity: subscriber_capacity.max(1),
            inner: Mutex::new(Inner {
                next_id: 1,
                buffer: VecDeque::new(),
                subscribers: Vec::new(),
            }),
        }
    }

    pub fn publish(&self, kind: &'static str, data: serde_json::Value) -> u64 {
        let mut inner = self.inner.lock().expect("event bus poisoned");
        let event = BusEvent {
            event_id: inner.next_id,
            kind,
            data,
        };
        inner.next_id += 1;
        if inner.buffer.len() == self.capacity {
            inner.buffer.pop_front();
        }
        inner.buffer.push_back(event.clone());
        inner
            .subscribers
            .retain(|s| match s.tx.try_send(event.clone()) {
                Ok(()) => true,
                Err(mpsc::error::TrySendError::Full(_)) => {
                    s.overflowed.store(true, Ordering::Release);
                    false
                }
                Err(mpsc::error::TrySendError::Closed(_)) => false,
            });
        event.event_id
    }

    pub fn last_event_id(&self) -> u64 {
        self.inner.lock().expect("event bus poisoned").next_id - 1
    }

    pub fn subscriber_count(&self) -> usize {
        self.inner
            .lock()
            .expect("event bus poisoned")
            .subscribers
            .len()
    }

    /// Subscribes to events after `last_seen` (or only new events when
    /// `None`).
    pub fn subscribe(&self, last_seen: Option<u64>) -> Subscription {
        let mut inner = self.inner.lock().expect("event bus poisoned");
        let (tx, live) = mpsc::channel(self.subscriber_capacity);
        let overflowed = Arc::new(AtomicBool::new(false));
        let mut resync_required = false;
        let mut backlog = Vec::new();
        if let Some(last) = last_seen {
            let oldest = inner.buffer.front().map_or(inner.next_id, |e| e.event_id);
            if last + 1 < oldest || last >= inner.next_id {
                resync_required = true;
            } else {
                backlog.extend(inner.buffer.iter().filter(|e| e.event_id > last).cloned());
            }
        }
        inner.subscribers.push(Subscriber {
            tx,
            overflowed: Arc::clone(&overflowed),
        });
        Subscription {
            resync_required,
            backlog,
            live,
            overflowed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[tokio::test]
    async fn resume_from_last_event_id() {
        let bus = EventBus::new(100, 10);
        for i in 0..5 {
            bus.publish("snapshot", json!(i));
        }
        let mut sub = bus.subscribe(Some(3));
        assert!(!sub.resync_required);
        assert_eq!(
            sub.backlog.iter().map(|e| e.event_id).collect::<Vec<_>>(),
            vec![4, 5]
        );
        bus.publish("alert", json!("x"));
        assert_eq!(sub.live.recv().await.unwrap().event_id, 6);
    }

    #[test]
    fn resume_point_outside_buffer_needs_resync() {
        let bus = EventBus::new(3, 10);
        for i in 0..10 {
            bus.publish("snapshot", json!(i));
        }
        assert!(bus.subscribe(Some(2)).resync_required);
        assert!(!bus.subscribe(Some(7)).resync_required);
        assert!(bus.subscribe(Some(50)).resync_required);
        assert_eq!(bus.subscribe(Some(10)).backlog.len(), 0);
    }

    #[test]
    fn slow_subscriber_is_dropped_without_blocking() {
        let bus = EventBus::new(100, 2);
        let slow = bus.subscribe(None);
        for i in 0..50 {
            bus.publish("snapshot", json!(i));
        }
        assert!(slow.overflowed());
        assert_eq!(bus.subscriber_count(), 0);
        assert_eq!(bus.last_event_id(), 50);
    }

    #[tokio::test]
    async fn events_arrive_in_publish_order() {
        let bus = EventBus::new(100, 100);
        let mut sub = bus.subscribe(None);
        bus.publish("alert", json!("raised"));
        bus.publish("snapshot", json!("after"));
        let a = sub.live.recv().await.unwrap();
        let b = sub.live.recv().await.unwrap();
        assert_eq!((a.kind, b.kind), ("alert", "snapshot"));
        assert!(a.event_id < b.event_id);
    }
}
