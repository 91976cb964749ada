//! Simulator and analytical optimizer for lossless speculative serving where
//! a compressed KV cache drafts tokens and the full KV cache verifies them.
//!
//! * [`specloop`] — draft/verify/accept protocol and the KL chain rule.
//! * [`scheduler`] — lookahead resource rings and verify-slot admission.
//! * [`sim`] — discrete-time and event-driven serving simulators.
//! * [`analytics`] — closed-form throughput models and optimizers.
//! * [`compressor`] — compressor interface over synthetic KV metadata.

pub mod compressor;
pub mod config;
pub mod scheduler;
pub mod sim;
pub mod analytics;
pub mod specloop;
pub mod trace;

pub use config::{load_config, ConfigError, Request, SystemConfig};
