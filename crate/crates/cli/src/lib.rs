//! Shared helpers for the command-line entry points.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde_json::Value;

/// Reads a JSON file into `T`.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Logs to stderr, `info` unless `RUST_LOG` says otherwise.
pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
}

/// Blocks the calling thread for the life of the process.
pub fn run_forever() -> ! {
    loop {
        std::thread::park();
    }
}

/// Canonical JSON of `value` as a string.
pub fn canonical_line(value: &Value) -> String {
    String::from_utf8(sg_core::domain::canonical_value_bytes(value)).expect("JSON is UTF-8")
}
