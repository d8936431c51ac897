//! Compute budgets for learning calls.
//!
//! A budget can be bounded by wall-clock time, by deterministic work units,
//! or both. Work units count elementary dynamic-programming cell updates,
//! so a work-bounded run is reproducible bit-for-bit across machines.

use std::cell::Cell;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Per-call limit, turned into a fresh [`Budget`] at the start of each call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Deadline {
    #[default]
    None,
    WallSeconds(f64),
    Work(u64),
}

impl Deadline {
    pub fn start(&self) -> Budget {
        match *self {
            Deadline::None => Budget::unlimited(),
            Deadline::WallSeconds(s) => Budget::wall(Duration::from_secs_f64(s.max(0.0))),
            Deadline::Work(w) => Budget::work(w),
        }
    }
}

#[derive(Debug)]
pub struct Budget {
    started: Instant,
    wall_limit: Option<Duration>,
    work_limit: Option<u64>,
    work: Cell<u64>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Self {
            started: Instant::now(),
            wall_limit: None,
            work_limit: None,
            work: Cell::new(0),
        }
    }

    pub fn wall(limit: Duration) -> Self {
        Self {
            wall_limit: Some(limit),
            ..Self::unlimited()
        }
    }

    pub fn work(limit: u64) -> Self {
        Self {
            work_limit: Some(limit),
            ..Self::unlimited()
        }
    }

    pub fn charge(&self, units: u64) {
        self.work.set(self.work.get().saturating_add(units));
    }

    pub fn work_used(&self) -> u64 {
        self.work.get()
    }

    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn expired(&self) -> bool {
        if let Some(limit) = self.work_limit {
            if self.work.get() >= limit {
                return true;
            }
        }
        matches!(self.wall_limit, Some(limit) if self.started.elapsed() >= limit)
    }
}
