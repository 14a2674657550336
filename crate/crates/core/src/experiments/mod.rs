//! The two benchmark scenarios as configurable, file-backed pipelines.

pub mod config;
pub mod io;
pub mod pipeline;
pub mod timing;

pub use config::ScenarioConfig;
pub use io::{export_csv, ingest_csv, CoefficientBundle};
pub use pipeline::{run_scenario, Check, ScenarioReport};
pub use timing::{bench_timing, TimingReport};
