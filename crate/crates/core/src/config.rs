//! Network-wide defaults.

use std::time::Duration;

/// Capability/requirement vector dimension.
pub const DEFAULT_DIMENSION: usize = 8;

pub const DEFAULT_LIVENESS_TTL_MS: u64 = 10_000;
pub const DEFAULT_HEARTBEAT_INTERVAL: Duration = Duration::from_secs(3);
pub const DEFAULT_SYNC_INTERVAL: Duration = Duration::from_secs(2);

pub const DEFAULT_BEACON_TIMEOUT: Duration = Duration::from_secs(2);
pub const DEFAULT_STEP_DEADLINE: Duration = Duration::from_secs(30);
pub const DEFAULT_TASK_DEADLINE: Duration = Duration::from_secs(120);

/// Number of chains-of-thought requested per task.
pub const DEFAULT_CHAINS: usize = 3;
pub const DEFAULT_MAX_SUBTASKS: usize = 8;
/// Extra attempts allowed per planning step or sub-task.
pub const DEFAULT_RETRIES: usize = 1;

pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_TOP_P: f64 = 0.9;
