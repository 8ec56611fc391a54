use std::io;
use std::time::Duration;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pool configuration: {0}")]
    InvalidConfig(String),

    #[error("pool size overflows: {num_devices} devices x {device_stride} bytes")]
    SizeOverflow { num_devices: usize, device_stride: u64 },

    #[error("address range [{addr}, {addr}+{len}) is outside the pool of {size} bytes")]
    OutOfRange { addr: u64, len: u64, size: u64 },

    #[error("address range [{addr}, {addr}+{len}) straddles the boundary of device {device}")]
    StraddlesDevice { addr: u64, len: u64, device: usize },

    #[error("degenerate geometry: {num_devices} devices cannot be split evenly across {total_ranks} ranks")]
    DegenerateGeometry { num_devices: usize, total_ranks: usize },

    #[error("pool capacity exceeded: need {needed} bytes in a device window of {capacity} bytes")]
    CapacityExceeded { needed: u64, capacity: u64 },

    #[error("doorbell region exhausted: slot {index} does not fit in {region} bytes")]
    DoorbellRegionExhausted { index: u64, region: u64 },

    #[error("doorbell {index} (device {device}, block {block}) not ready after {timeout:?}")]
    Timeout {
        index: u64,
        device: usize,
        block: u64,
        timeout: Duration,
    },

    #[error("epoch mismatch: rank expected {expected}, pool holds {found}")]
    EpochMismatch { expected: u64, found: u64 },

    #[error("invalid collective request: {0}")]
    InvalidRequest(String),

    #[error("buffer size mismatch for {what}: expected {expected} elements, got {got}")]
    BufferSize {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("report rows do not match: {0}")]
    RowMismatch(String),

    #[error("worker failed: {0}")]
    Worker(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("scenario parse error: {0}")]
    Toml(#[from] toml::de::Error),
}
