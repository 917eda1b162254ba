//! Command-line pipeline for panoramic masked autoregressive generation.

pub mod args;
pub mod commands;
pub mod pipeline;

use par_core::ParError;

/// Process exit status for an error: 2 configuration, 3 numeric failure,
/// 4 verification failure, 1 anything else.
pub fn exit_code(e: &ParError) -> i32 {
    match e {
        ParError::Config { .. } => 2,
        ParError::Verification(_) => 4,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

/// Worker threads: `PAR_THREADS` caps the machine's parallelism.
pub fn worker_threads() -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("PAR_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(avail),
        _ => avail,
    }
}
