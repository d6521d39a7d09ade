//! Benchmark front end for the `mtds` crate: configuration files, dataset
//! and checkpoint persistence, the pooled baseline, the oscillator
//! reproduction harness, and trace emission. The `mtds` binary dispatches
//! into these modules.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod fsio;
pub mod harness;
pub mod pooled;
pub mod posterior_io;
pub mod selftest;

/// Initialize the global worker pool from `MTDS_WORKERS` (defaults to the
/// core count). Call once at startup; later calls are ignored.
pub fn init_workers() {
    if let Ok(v) = std::env::var("MTDS_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}
