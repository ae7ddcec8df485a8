//! Replay buffers that are drained when full, and the schedule that decides
//! which modules update.

use serde::{Deserialize, Serialize};

use crate::config::BufferConfig;
use crate::error::{Error, Result};

/// A bounded queue. Reaching capacity is the signal to drain; pushing past
/// it is a scheduling bug and is rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer<T> {
    name: String,
    capacity: usize,
    entries: Vec<T>,
    total_pushed: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(name: impl Into<String>, capacity: usize) -> Self {
        Self {
            name: name.into(),
            capacity,
            entries: Vec::new(),
            total_pushed: 0,
        }
    }

    pub fn push(&mut self, item: T) -> Result<()> {
        if self.entries.len() >= self.capacity {
            return Err(Error::BufferOverflow {
                name: self.name.clone(),
                capacity: self.capacity,
            });
        }
        self.entries.push(item);
        self.total_pushed += 1;
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn total_pushed(&self) -> u64 {
        self.total_pushed
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    /// Everything in insertion order; the buffer is left empty.
    pub fn drain(&mut self) -> Vec<T> {
        std::mem::take(&mut self.entries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub update_fast_modules: bool,
    pub update_dst: bool,
}

/// The four buffers of one run, generic over what each stores.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferSet<D, N, S, T> {
    pub user_dp: ReplayBuffer<D>,
    pub user_nlu: ReplayBuffer<N>,
    pub sys_dp: ReplayBuffer<S>,
    pub sys_dst: ReplayBuffer<T>,
}

impl<D, N, S, T> BufferSet<D, N, S, T> {
    pub fn new(cfg: &BufferConfig) -> Self {
        Self {
            user_dp: ReplayBuffer::new("user_dp", cfg.user_dp),
            user_nlu: ReplayBuffer::new("user_nlu", cfg.user_nlu),
            sys_dp: ReplayBuffer::new("sys_dp", cfg.sys_dp),
            sys_dst: ReplayBuffer::new("sys_dst", cfg.sys_dst),
        }
    }

    /// Fast modules update once all three small buffers are full; the
    /// tracker updates when its own buffer is.
    pub fn schedule_check(&self) -> ScheduleDecision {
        ScheduleDecision {
            update_fast_modules: self.user_dp.is_full()
                && self.user_nlu.is_full()
                && self.sys_dp.is_full(),
            update_dst: self.sys_dst.is_full(),
        }
    }
}
