//! Shared memory pool over a set of sequentially stacked devices.
//!
//! The pool exposes one flat byte-address space. Device `d` owns the window
//! `[d * device_stride, d * device_stride + device_capacity)`; the low
//! `doorbell_region_size` bytes of the pool are reserved for doorbells.
//!
//! Three backends share the same surface:
//!
//! - [`Backend::SharedArena`]: a zeroed in-process allocation shared by rank threads.
//! - [`Backend::FileMapped`]: a file of the pool size mapped `MAP_SHARED`, so ranks
//!   in separate processes observe the same bytes.
//! - [`Backend::Recording`]: stores only the doorbell region and logs every data
//!   transfer instead of moving bytes. Useful for pools far larger than RAM.

use std::alloc::{self, Layout};
use std::fs::OpenOptions;
use std::path::PathBuf;
use std::ptr::NonNull;
use std::sync::atomic::AtomicU64;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use memmap2::MmapMut;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

/// Default size of the doorbell region at the bottom of the pool.
pub const DEFAULT_DOORBELL_REGION: u64 = 64 * KIB;

/// Region alignment. Doorbell slots are cache-line sized.
const REGION_ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    SharedArena,
    FileMapped(PathBuf),
    Recording,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub num_devices: usize,
    pub device_capacity: u64,
    pub device_stride: u64,
    pub doorbell_region_size: u64,
    pub backend: Backend,
}

impl PoolConfig {
    /// Sequentially stacked pool: stride equals capacity, default doorbell
    /// region (clamped to half a device for tiny pools), in-process arena.
    pub fn new(num_devices: usize, device_capacity: u64) -> Self {
        let doorbell_region_size = DEFAULT_DOORBELL_REGION.min(device_capacity / 2);
        PoolConfig {
            num_devices,
            device_capacity,
            device_stride: device_capacity,
            doorbell_region_size,
            backend: Backend::SharedArena,
        }
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_doorbell_region(mut self, bytes: u64) -> Self {
        self.doorbell_region_size = bytes;
        self
    }

    pub fn with_stride(mut self, stride: u64) -> Self {
        self.device_stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(Error::InvalidConfig("num_devices must be >= 1".into()));
        }
        if self.device_capacity == 0 {
            return Err(Error::InvalidConfig("device_capacity must be > 0".into()));
        }
        if self.device_stride < self.device_capacity {
            return Err(Error::InvalidConfig(format!(
                "device_stride {} is smaller than device_capacity {}; device windows would overlap",
                self.device_stride, self.device_capacity
            )));
        }
        if self.doorbell_region_size >= self.device_capacity {
            return Err(Error::InvalidConfig(format!(
                "doorbell region of {} bytes does not fit below device capacity {}",
                self.doorbell_region_size, self.device_capacity
            )));
        }
        self.total_size().map(|_| ())
    }

    /// `num_devices * device_stride`, which is `ND * DS` under plain stacking.
    pub fn total_size(&self) -> Result<u64> {
        (self.num_devices as u64)
            .checked_mul(self.device_stride)
            .ok_or(Error::SizeOverflow {
                num_devices: self.num_devices,
                device_stride: self.device_stride,
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferDirection {
    Write,
    Read,
}

/// One data transfer logged by the recording backend.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub device: usize,
    pub addr: u64,
    pub len: u64,
    pub direction: TransferDirection,
    pub issue_ns: u64,
}

/// Zeroed, 64-byte aligned heap allocation.
struct Arena {
    ptr: NonNull<u8>,
    layout: Layout,
}

impl Arena {
    fn zeroed(len: usize) -> Result<Self> {
        let layout = Layout::from_size_align(len.max(REGION_ALIGN), REGION_ALIGN)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        // SAFETY: layout has non-zero size.
        let raw = unsafe { alloc::alloc_zeroed(layout) };
        let ptr = NonNull::new(raw).ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::OutOfMemory,
                format!("cannot allocate {len} byte pool arena"),
            ))
        })?;
        Ok(Arena { ptr, layout })
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        // SAFETY: allocated in `zeroed` with this layout.
        unsafe { alloc::dealloc(self.ptr.as_ptr(), self.layout) }
    }
}

enum Storage {
    Arena { _mem: Arena },
    File { map: MmapMut, path: PathBuf },
    Recording { _doorbells: Arena, log: Mutex<Vec<PoolRecord>> },
}

struct PoolInner {
    config: PoolConfig,
    size: u64,
    /// Base of the byte-addressable part. For the recording backend this only
    /// covers the doorbell region.
    base: NonNull<u8>,
    backed_len: u64,
    storage: Storage,
    created: Instant,
}

// SAFETY: the region is plain shared memory. Concurrent access follows the
// pool contract: disjoint writers, doorbell-ordered readers, atomics for flags.
unsafe impl Send for PoolInner {}
unsafe impl Sync for PoolInner {}

/// Shared handle to a mapped pool. Cloning is cheap; all clones view the same bytes.
#[derive(Clone)]
pub struct PoolHandle {
    inner: Arc<PoolInner>,
}

impl std::fmt::Debug for PoolHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoolHandle")
            .field("config", &self.inner.config)
            .field("size", &self.inner.size)
            .finish()
    }
}

/// Creates (or, for an existing pool file, attaches to) the pool region.
pub fn map_pool(config: PoolConfig) -> Result<PoolHandle> {
    config.validate()?;
    let size = config.total_size()?;
    let (storage, base, backed_len) = match &config.backend {
        Backend::SharedArena => {
            let len = usize::try_from(size).map_err(|_| Error::SizeOverflow {
                num_devices: config.num_devices,
                device_stride: config.device_stride,
            })?;
            let arena = Arena::zeroed(len)?;
            let base = arena.ptr;
            (Storage::Arena { _mem: arena }, base, size)
        }
        Backend::FileMapped(path) => {
            let file = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(false)
                .open(path)?;
            let current = file.metadata()?.len();
            if current == 0 {
                file.set_len(size)?;
            } else if current != size {
                return Err(Error::InvalidConfig(format!(
                    "pool file {} holds {current} bytes, expected {size}",
                    path.display()
                )));
            }
            // SAFETY: the file is only modified through mappings of this pool.
            let mut map = unsafe { MmapMut::map_mut(&file)? };
            let base = NonNull::new(map.as_mut_ptr()).expect("mmap returned null");
            (
                Storage::File {
                    map,
                    path: path.clone(),
                },
                base,
                size,
            )
        }
        Backend::Recording => {
            let doorbells = Arena::zeroed(config.doorbell_region_size as usize)?;
            let base = doorbells.ptr;
            (
                Storage::Recording {
                    _doorbells: doorbells,
                    log: Mutex::new(Vec::new()),
                },
                base,
                config.doorbell_region_size,
            )
        }
    };
    Ok(PoolHandle {
        inner: Arc::new(PoolInner {
            config,
            size,
            base,
            backed_len,
            storage,
            created: Instant::now(),
        }),
    })
}

impl PoolHandle {
    pub fn config(&self) -> &PoolConfig {
        &self.inner.config
    }

    pub fn size(&self) -> u64 {
        self.inner.size
    }

    pub fn is_recording(&self) -> bool {
        matches!(self.inner.storage, Storage::Recording { .. })
    }

    /// Path of the backing file for the file-mapped backend.
    pub fn file_path(&self) -> Option<&std::path::Path> {
        match &self.inner.storage {
            Storage::File { path, .. } => Some(path),
            _ => None,
        }
    }

    pub fn address_to_device(&self, addr: u64) -> Result<usize> {
        if addr >= self.inner.size {
            return Err(Error::OutOfRange {
                addr,
                len: 0,
                size: self.inner.size,
            });
        }
        Ok((addr / self.inner.config.device_stride) as usize)
    }

    /// Checks that `[addr, addr + len)` sits inside the pool and inside one
    /// device window. Returns the device index.
    pub fn check_range(&self, addr: u64, len: u64) -> Result<usize> {
        let size = self.inner.size;
        let end = addr.checked_add(len).ok_or(Error::OutOfRange { addr, len, size })?;
        if addr >= size || end > size {
            return Err(Error::OutOfRange { addr, len, size });
        }
        let cfg = &self.inner.config;
        let device = (addr / cfg.device_stride) as usize;
        let window_end = device as u64 * cfg.device_stride + cfg.device_capacity;
        if end > window_end {
            return Err(Error::StraddlesDevice { addr, len, device });
        }
        Ok(device)
    }

    pub fn write(&self, addr: u64, data: &[u8]) -> Result<()> {
        let device = self.check_range(addr, data.len() as u64)?;
        if let Storage::Recording { log, .. } = &self.inner.storage {
            self.record(log, device, addr, data.len() as u64, TransferDirection::Write);
            return Ok(());
        }
        // SAFETY: range checked above; the backing region spans the whole pool.
        unsafe {
            std::ptr::copy_nonoverlapping(
                data.as_ptr(),
                self.inner.base.as_ptr().add(addr as usize),
                data.len(),
            );
        }
        Ok(())
    }

    pub fn read_into(&self, addr: u64, out: &mut [u8]) -> Result<()> {
        let device = self.check_range(addr, out.len() as u64)?;
        if let Storage::Recording { log, .. } = &self.inner.storage {
            self.record(log, device, addr, out.len() as u64, TransferDirection::Read);
            out.fill(0);
            return Ok(());
        }
        // SAFETY: range checked above.
        unsafe {
            std::ptr::copy_nonoverlapping(
                self.inner.base.as_ptr().add(addr as usize),
                out.as_mut_ptr(),
                out.len(),
            );
        }
        Ok(())
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        self.read_into(addr, &mut out)?;
        Ok(out)
    }

    /// Atomic word at `offset`. Used for doorbells and the barrier/epoch header,
    /// so the offset must be 8-byte aligned and inside the byte-backed region.
    pub fn atomic_word(&self, offset: u64) -> Result<&AtomicU64> {
        if offset % 8 != 0 || offset + 8 > self.inner.backed_len {
            return Err(Error::OutOfRange {
                addr: offset,
                len: 8,
                size: self.inner.backed_len,
            });
        }
        // SAFETY: aligned, in bounds, and the region outlives `&self`.
        Ok(unsafe { AtomicU64::from_ptr(self.inner.base.as_ptr().add(offset as usize).cast()) })
    }

    /// Transfers logged by the recording backend, in issue order.
    pub fn recorded(&self) -> Vec<PoolRecord> {
        match &self.inner.storage {
            Storage::Recording { log, .. } => log.lock().unwrap().clone(),
            _ => Vec::new(),
        }
    }

    pub fn elapsed_ns(&self) -> u64 {
        self.inner.created.elapsed().as_nanos() as u64
    }

    /// Flushes a file-mapped pool to its backing file.
    pub fn flush(&self) -> Result<()> {
        if let Storage::File { map, .. } = &self.inner.storage {
            map.flush()?;
        }
        Ok(())
    }

    fn record(
        &self,
        log: &Mutex<Vec<PoolRecord>>,
        device: usize,
        addr: u64,
        len: u64,
        direction: TransferDirection,
    ) {
        let issue_ns = self.elapsed_ns();
        log.lock().unwrap().push(PoolRecord {
            device,
            addr,
            len,
            direction,
            issue_ns,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recording_pool_reports_full_size_without_allocating() {
        let cfg = PoolConfig::new(6, 128 * GIB).with_backend(Backend::Recording);
        let pool = map_pool(cfg).unwrap();
        assert_eq!(pool.size(), 768 * GIB);
    }

    #[test]
    fn minimal_arena_is_zeroed() {
        let cfg = PoolConfig::new(1, 4 * KIB);
        let pool = map_pool(cfg).unwrap();
        assert_eq!(pool.size(), 4096);
        assert!(pool.read(0, 4096).unwrap().iter().all(|&b| b == 0));
    }

    #[test]
    fn address_to_device_follows_stacking() {
        let pool = map_pool(PoolConfig::new(6, 128 * GIB).with_backend(Backend::Recording)).unwrap();
        assert_eq!(pool.address_to_device(0).unwrap(), 0);
        assert_eq!(pool.address_to_device(128 * GIB).unwrap(), 1);
        assert_eq!(pool.address_to_device(128 * GIB - 1).unwrap(), 0);
        assert_eq!(pool.address_to_device(768 * GIB - 1).unwrap(), 5);
        assert!(matches!(
            pool.address_to_device(768 * GIB),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn read_your_write() {
        let pool = map_pool(PoolConfig::new(2, 64 * KIB)).unwrap();
        let data = [1u8, 2, 3, 4, 5, 6, 7, 8];
        pool.write(0, &data).unwrap();
        assert_eq!(pool.read(0, 8).unwrap(), data);
    }

    #[test]
    fn straddling_write_is_rejected() {
        let ds = 64 * KIB;
        let pool = map_pool(PoolConfig::new(2, ds)).unwrap();
        let err = pool.write(ds - 4, &[0u8; 8]).unwrap_err();
        assert!(matches!(err, Error::StraddlesDevice { device: 0, .. }));
        let err = pool.read(2 * ds - 4, 8).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
    }

    #[test]
    fn recording_logs_instead_of_storing() {
        let mib = MIB;
        let cfg = PoolConfig::new(4, 16 * mib).with_backend(Backend::Recording);
        let pool = map_pool(cfg).unwrap();
        let payload = vec![7u8; mib as usize];
        pool.write(2 * 16 * mib + 4096, &payload).unwrap();
        let log = pool.recorded();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].device, 2);
        assert_eq!(log[0].len, mib);
        assert_eq!(log[0].direction, TransferDirection::Write);
    }

    #[test]
    fn file_mapped_views_share_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        let cfg = PoolConfig::new(2, 8 * KIB).with_backend(Backend::FileMapped(path.clone()));
        let a = map_pool(cfg.clone()).unwrap();
        let b = map_pool(cfg).unwrap();
        a.write(100, &[0x5A]).unwrap();
        assert_eq!(b.read(100, 1).unwrap(), vec![0x5A]);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 * KIB);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(PoolConfig::new(0, 4096).validate().is_err());
        assert!(PoolConfig::new(1, 4096).with_doorbell_region(4096).validate().is_err());
        assert!(PoolConfig::new(1, 4096).with_stride(1024).validate().is_err());
        assert!(matches!(
            PoolConfig::new(4, u64::MAX / 2).validate(),
            Err(Error::SizeOverflow { .. })
        ));
    }

    #[test]
    fn atomic_words_must_be_aligned_and_backed() {
        let pool = map_pool(PoolConfig::new(2, 128 * KIB).with_backend(Backend::Recording)).unwrap();
        assert!(pool.atomic_word(0).is_ok());
        assert!(pool.atomic_word(4).is_err());
        assert!(pool.atomic_word(DEFAULT_DOORBELL_REGION).is_err());
    }
}
