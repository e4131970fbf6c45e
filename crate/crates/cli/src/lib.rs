//! Config-driven runner for the induction-head lab: every experiment reads
//! one JSON document and writes its artifacts into `output_dir`.

pub mod config;
pub mod error;
pub mod run;

use std::path::PathBuf;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use run::{run, Summary};

/// Loads a config file (or starts from `{}`), applies `--set` overrides,
/// `--seed` and `--out`, and validates the result.
pub fn resolve(path: Option<&std::path::Path>, sets: &[String], seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    let mut v = match path {
        Some(p) => config::read_config_value(p)?,
        None => serde_json::json!({}),
    };
    for kv in sets {
        config::apply_override(&mut v, kv)?;
    }
    if let Some(s) = seed {
        config::set_path(&mut v, "seed", serde_json::json!(s))?;
    }
    if let Some(o) = out {
        config::set_path(&mut v, "output_dir", serde_json::json!(o))?;
    }
    ExperimentConfig::from_value(v)
}

/// Caps the worker pool; `BIL_THREADS` unset or 0 leaves rayon's default.
pub fn init_threads(var: Option<String>) -> Result<(), CliError> {
    let Some(s) = var else { return Ok(()) };
    let n: usize = s
        .trim()
        .parse()
        .map_err(|_| CliError::schema("BIL_THREADS", format!("'{s}' is not a count")))?;
    if n > 0 {
        // a second call in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
