//! Next-scale autoregressive attention with head-aware KV cache compression.
//!
//! Heads are sorted offline into contextual (low attention variance) and
//! structural (high variance) groups; each group gets its own cache budget and
//! compression strategy. The [`harness`] module runs whole generations and
//! records exact operation counts and divergence from a full-cache run.

pub mod cache;
pub mod classifier;
pub mod compression;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod schedule;
pub mod seed;

pub use cache::{BudgetPlan, HeadCache, HeadId, HeadType, KvCacheStore};
pub use error::{Error, Result};
pub use numerics::Matrix;
pub use schedule::{build_schedule, ScaleSchedule};
