//! Two-state doorbells living in the low addresses of the pool.
//!
//! Each chunk of a collective call has one doorbell. Only the chunk's producer
//! rings it, after the chunk's bytes are in the pool; consumers wait on it
//! before reading. A doorbell word encodes the epoch it was rung in, so moving
//! to the next epoch makes every doorbell stale again without touching the slots.
//!
//! Region layout (one 64-byte slot per word, so spinners never share a line):
//!
//! ```text
//! slot 0      current epoch
//! slot 1      completion-barrier arrival counter
//! slot 2 + i  doorbell i
//! ```

use std::hint;
use std::sync::atomic::{fence, AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::PoolHandle;

pub const SLOT_SIZE: u64 = 64;
pub const HEADER_SLOTS: u64 = 2;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

const EPOCH_SLOT: u64 = 0;
const BARRIER_SLOT: u64 = 1;
const TIGHT_PROBES: u32 = 64;
const MAX_BACKOFF: Duration = Duration::from_micros(10);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DoorbellState {
    Stale = 0,
    Ready = 1,
}

/// Dense doorbell index: one row of `blocks_per_device` slots per device.
pub fn doorbell_index(device_index: usize, device_block_id: u64, blocks_per_device: u64) -> u64 {
    device_index as u64 * blocks_per_device + device_block_id
}

/// Byte offset of doorbell `index` inside the pool.
pub fn slot_offset(index: u64) -> u64 {
    (HEADER_SLOTS + index) * SLOT_SIZE
}

/// Region size needed for `slots` doorbells plus the header.
pub fn region_bytes(slots: u64) -> u64 {
    (HEADER_SLOTS + slots) * SLOT_SIZE
}

pub fn check_slot(index: u64, region: u64) -> Result<()> {
    if slot_offset(index) + SLOT_SIZE > region {
        return Err(Error::DoorbellRegionExhausted { index, region });
    }
    Ok(())
}

/// A doorbell index together with the chunk coordinates it was derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoorbellIndex {
    pub index: u64,
    pub device: usize,
    pub block: u64,
}

impl DoorbellIndex {
    pub fn new(device: usize, block: u64, blocks_per_device: u64) -> Self {
        DoorbellIndex {
            index: doorbell_index(device, block, blocks_per_device),
            device,
            block,
        }
    }
}

fn ready_word(epoch: u64) -> u64 {
    (epoch << 1) | DoorbellState::Ready as u64
}

/// One doorbell word.
#[derive(Clone, Copy)]
pub struct Doorbell<'a> {
    word: &'a AtomicU64,
    id: DoorbellIndex,
}

impl<'a> Doorbell<'a> {
    pub fn id(&self) -> DoorbellIndex {
        self.id
    }

    pub fn state(&self, epoch: u64) -> DoorbellState {
        if self.word.load(Ordering::Acquire) == ready_word(epoch) {
            DoorbellState::Ready
        } else {
            DoorbellState::Stale
        }
    }

    /// Marks the chunk published. Every write the caller made before this call
    /// is visible to a rank whose [`wait`](Self::wait) returns.
    pub fn ring(&self, epoch: u64) {
        self.word.store(ready_word(epoch), Ordering::Release);
        fence(Ordering::SeqCst);
    }

    /// Spins until the doorbell is READY for `epoch`: a burst of tight probes,
    /// then exponential backoff capped at 10 µs, then the timeout check.
    pub fn wait(&self, epoch: u64, timeout: Duration) -> Result<()> {
        let want = ready_word(epoch);
        if self.word.load(Ordering::Acquire) == want {
            return Ok(());
        }
        for _ in 0..TIGHT_PROBES {
            hint::spin_loop();
            if self.word.load(Ordering::Acquire) == want {
                return Ok(());
            }
        }
        let start = Instant::now();
        let mut backoff = Duration::from_nanos(100);
        loop {
            thread::sleep(backoff);
            backoff = (backoff * 2).min(MAX_BACKOFF);
            // Fresh observation on every probe.
            fence(Ordering::SeqCst);
            if self.word.load(Ordering::Acquire) == want {
                return Ok(());
            }
            if start.elapsed() >= timeout {
                return Err(Error::Timeout {
                    index: self.id.index,
                    device: self.id.device,
                    block: self.id.block,
                    timeout,
                });
            }
        }
    }
}

/// View of the doorbell region of a pool.
#[derive(Clone, Debug)]
pub struct DoorbellRegion {
    pool: PoolHandle,
}

impl DoorbellRegion {
    pub fn new(pool: PoolHandle) -> Self {
        DoorbellRegion { pool }
    }

    pub fn pool(&self) -> &PoolHandle {
        &self.pool
    }

    pub fn doorbell(&self, id: DoorbellIndex) -> Result<Doorbell<'_>> {
        check_slot(id.index, self.pool.config().doorbell_region_size)?;
        Ok(Doorbell {
            word: self.pool.atomic_word(slot_offset(id.index))?,
            id,
        })
    }

    fn header(&self, slot: u64) -> Result<&AtomicU64> {
        self.pool.atomic_word(slot * SLOT_SIZE)
    }

    pub fn current_epoch(&self) -> Result<u64> {
        Ok(self.header(EPOCH_SLOT)?.load(Ordering::Acquire))
    }

    /// Fails if the pool is not at `expected`, e.g. a rank joined a call late.
    pub fn check_epoch(&self, expected: u64) -> Result<()> {
        let found = self.current_epoch()?;
        if found != expected {
            return Err(Error::EpochMismatch { expected, found });
        }
        Ok(())
    }

    /// Advances the shared epoch from `expected` to `expected + 1`. Every rank
    /// calls this after the completion barrier; the first caller moves the
    /// counter and the rest observe it already advanced.
    pub fn reset_epoch(&self, expected: u64) -> Result<u64> {
        let next = expected + 1;
        match self.header(EPOCH_SLOT)?.compare_exchange(
            expected,
            next,
            Ordering::AcqRel,
            Ordering::Acquire,
        ) {
            Ok(_) => Ok(next),
            Err(found) if found == next => Ok(next),
            Err(found) => Err(Error::EpochMismatch { expected, found }),
        }
    }

    /// Completion barrier for call number `generation` of an `nranks` communicator.
    pub fn barrier(&self, nranks: usize, generation: u64, timeout: Duration) -> Result<()> {
        let counter = self.header(BARRIER_SLOT)?;
        counter.fetch_add(1, Ordering::AcqRel);
        let target = nranks as u64 * (generation + 1);
        let start = Instant::now();
        let mut probes = 0u32;
        let mut backoff = Duration::from_nanos(100);
        while counter.load(Ordering::Acquire) < target {
            if probes < TIGHT_PROBES {
                probes += 1;
                hint::spin_loop();
                continue;
            }
            thread::sleep(backoff);
            backoff = (backoff * 2).min(MAX_BACKOFF);
            if start.elapsed() >= timeout {
                return Err(Error::Timeout {
                    index: u64::MAX,
                    device: 0,
                    block: generation,
                    timeout,
                });
            }
        }
        Ok(())
    }
}
