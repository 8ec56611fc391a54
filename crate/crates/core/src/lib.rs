//! Collective communication over a shared, sequentially stacked memory pool.
//!
//! Ranks exchange data by writing chunks into a pool of memory devices and
//! reading their peers' chunks back, with per-chunk doorbells ordering the two.
//! The crate provides:
//!
//! - [`pool`]: the pool address space and its backends (in-process arena,
//!   file-backed mapping for multi-process ranks, recording).
//! - [`placement`]: deterministic chunk placement that interleaves data across
//!   devices.
//! - [`doorbell`]: the two-state READY/STALE synchronization cells.
//! - [`collectives`]: the eight primitives and their oracle checker.
//! - [`emulator`]: a discrete-event bandwidth-sharing model of the pool.
//! - [`bench`]: sweep harness used by the `poolbench` binary.
//!
//! ```
//! use poolcomm::collectives::{run_threads, CommOptions};
//! use poolcomm::placement::size_pool;
//! use poolcomm::pool::map_pool;
//! use poolcomm::request::{CollectiveKind, CollectiveRequest};
//!
//! let req = CollectiveRequest::new(CollectiveKind::AllReduce, 0, 4, 2).with_chunks(2);
//! let pool = map_pool(size_pool(&req, 4)?)?;
//! let sends: Vec<Vec<i32>> = (0..4).map(|r| vec![r + 1; 2]).collect();
//! let (recvs, _) = run_threads(&pool, &req, &sends, &CommOptions::default())?;
//! assert!(recvs.iter().all(|r| r == &[10, 10]));
//! # Ok::<(), poolcomm::Error>(())
//! ```

pub mod bench;
pub mod collectives;
pub mod doorbell;
pub mod emulator;
mod error;
pub mod placement;
pub mod pool;
pub mod request;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pool.md")]
    mod pool {}
    #[doc = include_str!("../../../book/src/placement.md")]
    mod placement {}
    #[doc = include_str!("../../../book/src/doorbells.md")]
    mod doorbells {}
    #[doc = include_str!("../../../book/src/collectives.md")]
    mod collectives {}
    #[doc = include_str!("../../../book/src/emulator.md")]
    mod emulator {}
    #[doc = include_str!("../../../book/src/bench.md")]
    mod bench {}
}
