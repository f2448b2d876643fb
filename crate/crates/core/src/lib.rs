//! Smart-plug voltage telemetry for low-voltage feeders.
//!
//! The crate covers the whole path from a simulated plug to a grid estimate:
//!
//! - [`netmodel`]: radial feeder model and the embedded IEEE 37-node feeder
//! - [`powerflow`]: backward/forward sweep solver
//! - [`estimator`]: load fitting from a single voltage reading
//! - [`plugsim`]: plug and reference-meter emulation, scenario runs
//! - [`telemetry`]: wire messages, metadata augmentation, time-series store, ingestion service
//! - [`calib`]: alignment against a reference meter, offset calibration, accuracy statistics
//! - [`analysis`]: measurement-error propagation and voltage band checks

pub mod analysis;
pub mod calib;
pub mod estimator;
pub mod netmodel;
pub mod powerflow;
pub mod plugsim;
pub mod telemetry;
