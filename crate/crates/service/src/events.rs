//! Sequence-numbered event log fed by the loop, with resumable
//! subscriptions.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};

use dataprod_core::orchestrator::{LoopEvent, Observer};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiEvent {
    pub seq: u64,
    pub kind: String,
    pub payload: Value,
}

impl ApiEvent {
    /// Decodes the payload back into the loop-side event.
    pub fn loop_event(&self) -> Option<LoopEvent> {
        let mut v = self.payload.clone();
        v.as_object_mut()?.insert("kind".into(), Value::String(self.kind.clone()));
        serde_json::from_value(v).ok()
    }
}

struct Log {
    next_seq: u64,
    buffer: VecDeque<ApiEvent>,
}

/// Assigns sequence numbers starting at 1 and keeps the most recent events
/// for replay.
pub struct EventHub {
    log: Mutex<Log>,
    tx: broadcast::Sender<ApiEvent>,
    capacity: usize,
}

impl EventHub {
    pub fn new(capacity: usize) -> Arc<Self> {
        let capacity = capacity.max(1);
        let (tx, _) = broadcast::channel(capacity.min(4096));
        Arc::new(Self { log: Mutex::new(Log { next_seq: 1, buffer: VecDeque::new() }), tx, capacity })
    }

    fn lock(&self) -> MutexGuard<'_, Log> {
        self.log.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn publish(&self, event: &LoopEvent) -> u64 {
        let mut payload = serde_json::to_value(event).expect("loop events serialize");
        if let Some(map) = payload.as_object_mut() {
            map.remove("kind");
        }
        let mut log = self.lock();
        let seq = log.next_seq;
        log.next_seq += 1;
        let api = ApiEvent { seq, kind: event.kind().to_string(), payload };
        if log.buffer.len() == self.capacity {
            log.buffer.pop_front();
        }
        log.buffer.push_back(api.clone());
        // Sent under the lock so subscribers see sequence order.
        let _ = self.tx.send(api);
        seq
    }

    /// Highest sequence number issued so far; 0 before the first event.
    pub fn last_seq(&self) -> u64 {
        self.lock().next_seq - 1
    }

    /// Buffered events with `seq > since`.
    pub fn since(&self, since: u64) -> Vec<ApiEvent> {
        self.lock().buffer.iter().filter(|e| e.seq > since).cloned().collect()
    }

    /// Replays buffered events after `since`, then follows live ones.
    /// A subscriber that falls behind refills from the buffer, so nothing
    /// still buffered is skipped.
    pub fn subscribe(self: &Arc<Self>, since: u64) -> impl Stream<Item = ApiEvent> + Send + 'static {
        let (backlog, rx) = {
            let log = self.lock();
            let rx = self.tx.subscribe();
            let backlog: VecDeque<ApiEvent> = log.buffer.iter().filter(|e| e.seq > since).cloned().collect();
            (backlog, rx)
        };
        let cursor = Cursor { hub: self.clone(), rx, pending: backlog, last: since };
        stream::unfold(cursor, |mut c| async move {
            loop {
                if let Some(e) = c.pending.pop_front() {
                    if e.seq > c.last {
                        c.last = e.seq;
                        return Some((e, c));
                    }
                    continue;
                }
                match c.rx.recv().await {
                    Ok(e) => c.pending.push_back(e),
                    Err(broadcast::error::RecvError::Lagged(_)) => c.pending = c.hub.since(c.last).into(),
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        })
    }
}

struct Cursor {
    hub: Arc<EventHub>,
    rx: broadcast::Receiver<ApiEvent>,
    pending: VecDeque<ApiEvent>,
    last: u64,
}

impl Observer for EventHub {
    fn notify(&self, event: &LoopEvent) {
        self.publish(event);
    }
}
