//! Audit-and-repair engine for consistent multi-panel story visualization.
//!
//! A director drives four steps over a shared run record: initialization
//! renders a reference image and the panels, an audit scores every panel
//! against the reference and proposes fixes, a repair pass applies them
//! under an adaptive conditioning scale, and the loop stops once the
//! Consistency Index reaches its threshold or the iteration budget runs out.

pub mod audit;
pub mod backend;
pub mod config;
pub mod director;
pub mod image;
pub mod init;
pub mod memory;
pub mod metrics;
pub mod repair;
pub mod report;
pub mod schema;
