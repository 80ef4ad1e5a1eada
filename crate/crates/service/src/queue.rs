//! Bounded frame queue between pollers and detection workers.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use tokio::sync::Notify;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub camera_id: String,
    pub captured_at: DateTime<Utc>,
    pub bytes: Vec<u8>,
    pub sha256: String,
}

/// When full, a push evicts the oldest queued frame of the same camera, or
/// the oldest frame overall if that camera has none queued.
#[derive(Debug)]
pub struct FrameQueue {
    capacity: usize,
    items: Mutex<VecDeque<Frame>>,
    notify: Notify,
    dropped: AtomicU64,
    closed: std::sync::atomic::AtomicBool,
}

impl FrameQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Mutex::new(VecDeque::new()),
            notify: Notify::new(),
            dropped: AtomicU64::new(0),
            closed: Default::default(),
        }
    }

    /// Enqueues a frame and returns the frame it evicted, if any.
    pub fn push(&self, frame: Frame) -> Option<Frame> {
        let evicted = {
            let mut items = self.items.lock().expect("queue lock");
            let evicted = if items.len() >= self.capacity {
                let idx = items.iter().position(|f| f.camera_id == frame.camera_id).unwrap_or(0);
                items.remove(idx)
            } else {
                None
            };
            items.push_back(frame);
            evicted
        };
        if evicted.is_some() {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        self.notify.notify_one();
        evicted
    }

    pub fn try_pop(&self) -> Option<Frame> {
        self.items.lock().expect("queue lock").pop_front()
    }

    /// Waits for a frame; `None` once the queue is closed and drained.
    pub async fn pop(&self) -> Option<Frame> {
        loop {
            let notified = self.notify.notified();
            if let Some(f) = self.try_pop() {
                return Some(f);
            }
            if self.closed.load(Ordering::Acquire) {
                return None;
            }
            notified.await;
        }
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
        self.notify.notify_waiters();
    }

    pub fn len(&self) -> usize {
        self.items.lock().expect("queue lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}
