use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use tokio::sync::Notify;

pub const SEND_QUEUE_CAPACITY: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloseReason {
    pub code: u16,
    pub reason: String,
}

#[derive(Debug)]
pub enum Outgoing {
    Frame(Arc<str>),
    Close(Option<CloseReason>),
}

#[derive(Default)]
struct State {
    items: VecDeque<(Arc<str>, bool)>,
    closing: Option<Option<CloseReason>>,
}

/// Bounded per-client outbound queue. When full, the oldest droppable frame
/// (a display refresh) makes room; other frames are never dropped.
pub struct SendQueue {
    state: Mutex<State>,
    notify: Notify,
    capacity: usize,
    dropped: AtomicU64,
}

impl Default for SendQueue {
    fn default() -> Self {
        Self::with_capacity(SEND_QUEUE_CAPACITY)
    }
}

impl SendQueue {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            state: Mutex::new(State::default()),
            notify: Notify::new(),
            capacity,
            dropped: AtomicU64::new(0),
        }
    }

    /// Returns false if the frame was dropped or the queue is closing.
    pub fn push(&self, frame: Arc<str>, droppable: bool) -> bool {
        let mut st = self.state.lock().unwrap();
        if st.closing.is_some() {
            return false;
        }
        if st.items.len() >= self.capacity {
            if let Some(i) = st.items.iter().position(|(_, d)| *d) {
                st.items.remove(i);
                self.dropped.fetch_add(1, Ordering::Relaxed);
            } else if droppable {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                return false;
            }
        }
        st.items.push_back((frame, droppable));
        drop(st);
        self.notify.notify_one();
        true
    }

    /// Pending frames are still sent before the close frame.
    pub fn close(&self, reason: Option<CloseReason>) {
        let mut st = self.state.lock().unwrap();
        if st.closing.is_none() {
            st.closing = Some(reason);
        }
        drop(st);
        self.notify.notify_one();
    }

    pub fn is_closing(&self) -> bool {
        self.state.lock().unwrap().closing.is_some()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn try_next(&self) -> Option<Outgoing> {
        let mut st = self.state.lock().unwrap();
        if let Some((f, _)) = st.items.pop_front() {
            return Some(Outgoing::Frame(f));
        }
        st.closing.clone().map(Outgoing::Close)
    }

    pub async fn next(&self) -> Outgoing {
        loop {
            if let Some(o) = self.try_next() {
                return o;
            }
            self.notify.notified().await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(s: &str) -> Arc<str> {
        Arc::from(s)
    }

    fn drain(q: &SendQueue) -> Vec<String> {
        let mut out = Vec::new();
        while let Some(Outgoing::Frame(f)) = q.try_next() {
            out.push(f.to_string());
        }
        out
    }

    #[test]
    fn full_queue_drops_oldest_display() {
        let q = SendQueue::with_capacity(3);
        q.push(frame("ctl1"), false);
        q.push(frame("d1"), true);
        q.push(frame("d2"), true);
        assert!(q.push(frame("ctl2"), false));
        assert_eq!(drain(&q), ["ctl1", "d2", "ctl2"]);
        assert_eq!(q.dropped(), 1);
    }

    #[test]
    fn control_frames_survive_overflow() {
        let q = SendQueue::with_capacity(2);
        for i in 0..4 {
            assert!(q.push(frame(&format!("c{i}")), false));
        }
        assert!(!q.push(frame("d"), true));
        assert_eq!(drain(&q), ["c0", "c1", "c2", "c3"]);
    }

    #[test]
    fn close_after_pending() {
        let q = SendQueue::default();
        q.push(frame("a"), false);
        q.close(Some(CloseReason { code: 4001, reason: "superseded".into() }));
        assert!(!q.push(frame("b"), false));
        assert!(matches!(q.try_next(), Some(Outgoing::Frame(_))));
        assert!(matches!(q.try_next(), Some(Outgoing::Close(Some(CloseReason { code: 4001, .. })))));
    }
}
