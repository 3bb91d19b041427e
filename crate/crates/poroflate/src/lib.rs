//! Scenario files, the precompute / run / compare stages and their file
//! outputs for the two-scale inflatable poroelastic model.

pub mod config;
pub mod error;
pub mod output;
pub mod stages;

pub use config::ScenarioConfig;
pub use error::Error;

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "POROFLATE_THREADS";

/// Sizes the global worker pool; `None` keeps the library default.
pub fn init_threads(threads: Option<usize>) {
  if let Some(n) = threads.filter(|n| *n > 0) {
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
  }
}
