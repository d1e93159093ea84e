//! Per-component bounded FIFO with two lane policies sharing one queue.
//!
//! Camera frames are capped and displace the oldest queued frame; everything
//! else blocks the producer when its lane is full. Both live in one deque so
//! per-source order is never disturbed by lane interleaving. The component's
//! counters live under the same lock, which makes every snapshot consistent.

use std::collections::VecDeque;
use std::sync::mpsc::Sender;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use super::report::Tracker;
use super::ComponentState;
use crate::message::Envelope;

pub(crate) struct Delivery {
    pub env: Arc<Envelope>,
    pub tracker: Option<Arc<Tracker>>,
    pub recv_ms: u64,
}

pub(crate) enum Control {
    Barrier(Sender<()>),
    Activate(Sender<()>),
    Exit {
        last: bool,
        ack: Sender<Option<Result<(), String>>>,
    },
}

pub(crate) enum Item {
    Envelope(Delivery),
    Control(Control),
}

const LATENCY_WINDOW: usize = 2048;

#[derive(Debug, Default, Clone)]
pub(crate) struct Counters {
    pub received: u64,
    pub emitted: u64,
    pub processed: u64,
    pub dropped: u64,
    pub failed: u64,
    pub in_flight: u64,
    pub latencies_us: VecDeque<u64>,
}

struct State {
    queue: VecDeque<Item>,
    frames: usize,
    others: usize,
    accepting: bool,
    closed: bool,
    phase: ComponentState,
    counters: Counters,
}

pub(crate) enum Push {
    Enqueued { displaced: Option<Delivery> },
    Rejected(Delivery),
}

pub(crate) struct Inbox {
    state: Mutex<State>,
    not_empty: Condvar,
    space: Condvar,
    frame_capacity: usize,
    block_capacity: usize,
}

impl Inbox {
    pub fn new(frame_capacity: usize, block_capacity: usize, accepting: bool) -> Self {
        Self {
            state: Mutex::new(State {
                queue: VecDeque::new(),
                frames: 0,
                others: 0,
                accepting,
                closed: false,
                phase: ComponentState::Created,
                counters: Counters::default(),
            }),
            not_empty: Condvar::new(),
            space: Condvar::new(),
            frame_capacity: frame_capacity.max(1),
            block_capacity: block_capacity.max(1),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, d: Delivery) -> Push {
        let mut st = self.lock();
        let frame = d.env.type_tag.is_frame();
        if !frame {
            while st.accepting && !st.closed && st.others >= self.block_capacity {
                st = self.space.wait(st).unwrap_or_else(|e| e.into_inner());
            }
        }
        if !st.accepting || st.closed {
            st.counters.received += 1;
            st.counters.dropped += 1;
            return Push::Rejected(d);
        }
        let mut displaced = None;
        if frame && st.frames >= self.frame_capacity {
            let pos = st
                .queue
                .iter()
                .position(|i| matches!(i, Item::Envelope(d) if d.env.type_tag.is_frame()));
            if let Some(Item::Envelope(old)) = pos.and_then(|p| st.queue.remove(p)) {
                st.frames -= 1;
                st.counters.dropped += 1;
                st.counters.in_flight -= 1;
                displaced = Some(old);
            }
        }
        if frame {
            st.frames += 1;
        } else {
            st.others += 1;
        }
        st.counters.received += 1;
        st.counters.in_flight += 1;
        st.queue.push_back(Item::Envelope(d));
        drop(st);
        self.not_empty.notify_one();
        Push::Enqueued { displaced }
    }

    pub fn push_control(&self, c: Control, front: bool) {
        let mut st = self.lock();
        if front {
            st.queue.push_front(Item::Control(c));
        } else {
            st.queue.push_back(Item::Control(c));
        }
        drop(st);
        self.not_empty.notify_one();
    }

    /// Stops accepting and queues an exit ahead of pending envelopes, atomically.
    pub fn push_exit(&self, c: Control) {
        let mut st = self.lock();
        st.accepting = false;
        st.queue.push_front(Item::Control(c));
        drop(st);
        self.not_empty.notify_one();
        self.space.notify_all();
    }

    /// Queues an activation ahead of everything and starts accepting, atomically.
    pub fn push_activate(&self, c: Control) {
        let mut st = self.lock();
        st.accepting = true;
        st.queue.push_front(Item::Control(c));
        drop(st);
        self.not_empty.notify_one();
    }

    pub fn pop(&self) -> Option<Item> {
        let mut st = self.lock();
        loop {
            if let Some(item) = st.queue.pop_front() {
                if let Item::Envelope(d) = &item {
                    if d.env.type_tag.is_frame() {
                        st.frames -= 1;
                    } else {
                        st.others -= 1;
                        self.space.notify_one();
                    }
                }
                return Some(item);
            }
            if st.closed {
                return None;
            }
            st = self.not_empty.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Removes every queued envelope, counting them as dropped.
    pub fn drain(&self) -> Vec<Delivery> {
        let mut st = self.lock();
        let mut out = Vec::new();
        let mut kept = VecDeque::new();
        while let Some(item) = st.queue.pop_front() {
            match item {
                Item::Envelope(d) => out.push(d),
                c => kept.push_back(c),
            }
        }
        st.queue = kept;
        st.frames = 0;
        st.others = 0;
        st.counters.dropped += out.len() as u64;
        st.counters.in_flight -= out.len() as u64;
        drop(st);
        self.space.notify_all();
        out
    }

    /// A popped envelope that was discarded instead of handled.
    pub fn discard(&self) {
        let mut st = self.lock();
        st.counters.dropped += 1;
        st.counters.in_flight -= 1;
    }

    pub fn finish(&self, emitted: usize, failed: bool, latency: Duration) {
        let mut st = self.lock();
        let c = &mut st.counters;
        c.processed += 1;
        c.in_flight -= 1;
        c.emitted += emitted as u64;
        if failed {
            c.failed += 1;
        }
        if c.latencies_us.len() == LATENCY_WINDOW {
            c.latencies_us.pop_front();
        }
        c.latencies_us.push_back(latency.as_micros() as u64);
    }

    pub fn close(&self) {
        let mut st = self.lock();
        st.closed = true;
        st.accepting = false;
        drop(st);
        self.not_empty.notify_all();
        self.space.notify_all();
    }

    pub fn set_phase(&self, phase: ComponentState) {
        self.lock().phase = phase;
    }

    pub fn snapshot(&self) -> (ComponentState, bool, Counters) {
        let st = self.lock();
        (st.phase, st.accepting, st.counters.clone())
    }

    pub fn in_flight(&self) -> u64 {
        self.lock().counters.in_flight
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{SourceId, TypeTag};
    use serde_json::json;

    fn delivery(tag: TypeTag, seq: u64) -> Delivery {
        Delivery {
            env: Arc::new(Envelope {
                version: 1,
                seq,
                ts_ms: 0,
                source: SourceId::client("c"),
                session: None,
                type_tag: tag,
                payload: json!({}),
            }),
            tracker: None,
            recv_ms: 0,
        }
    }

    fn seqs(inbox: &Inbox) -> Vec<u64> {
        let mut out = vec![];
        inbox.close();
        while let Some(Item::Envelope(d)) = inbox.pop() {
            out.push(d.env.seq);
        }
        out
    }

    #[test]
    fn frames_displace_oldest_frame_only() {
        let inbox = Inbox::new(2, 16, true);
        inbox.push(delivery(TypeTag::SensorCameraFrame, 1));
        inbox.push(delivery(TypeTag::ServiceInternal, 2));
        inbox.push(delivery(TypeTag::SensorCameraFrame, 3));
        match inbox.push(delivery(TypeTag::SensorCameraFrame, 4)) {
            Push::Enqueued { displaced: Some(d) } => assert_eq!(d.env.seq, 1),
            _ => panic!("expected displacement"),
        }
        let (_, _, c) = inbox.snapshot();
        assert_eq!((c.received, c.dropped, c.in_flight), (4, 1, 3));
        assert_eq!(seqs(&inbox), vec![2, 3, 4]);
    }

    #[test]
    fn block_lane_waits_for_space() {
        let inbox = Arc::new(Inbox::new(2, 1, true));
        inbox.push(delivery(TypeTag::ServiceInternal, 1));
        let producer = {
            let inbox = inbox.clone();
            std::thread::spawn(move || {
                inbox.push(delivery(TypeTag::ServiceInternal, 2));
            })
        };
        std::thread::sleep(Duration::from_millis(50));
        assert!(!producer.is_finished());
        assert!(matches!(inbox.pop(), Some(Item::Envelope(_))));
        producer.join().unwrap();
        let (_, _, c) = inbox.snapshot();
        assert_eq!(c.dropped, 0);
    }

    #[test]
    fn rejected_when_not_accepting() {
        let inbox = Inbox::new(2, 2, false);
        assert!(matches!(inbox.push(delivery(TypeTag::ServiceInternal, 1)), Push::Rejected(_)));
        let (_, _, c) = inbox.snapshot();
        assert_eq!((c.received, c.dropped, c.in_flight), (1, 1, 0));
    }
}
