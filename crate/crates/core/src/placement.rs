//! Deterministic data placement for collective calls.
//!
//! Every rank computes the same layout from the same request, so producers and
//! consumers agree on where each chunk lives without exchanging metadata.
//!
//! Two interleaving schemes are used:
//!
//! - **One-to-N** (rooted kinds): chunk `data_id` goes to device `data_id % ND`,
//!   block `data_id / ND`, spreading a producer's stream over every device.
//! - **N-to-N** (all-to-all style kinds): each rank owns `ND / nranks` devices and
//!   only writes there, so concurrent producers never share a device.
//!
//! The pool address of a block is
//! `db_offset + block_id * block_size + device_index * device_stride`.

use serde::{Deserialize, Serialize};

use crate::doorbell;
use crate::error::{Error, Result};
use crate::pool::PoolConfig;
use crate::request::{CollectiveKind, CollectiveRequest};

/// Block sizes are rounded up to this many bytes.
pub const BLOCK_ALIGN: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    OneToN,
    NToN,
}

/// How chunk addresses are chosen for a call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Interleave chunks across devices with the one-to-N / N-to-N schemes.
    #[default]
    Interleaved,
    /// Allocate blocks back to back from the bottom of the pool, filling device 0
    /// first. This is what a plain sequential allocator would do.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Publish,
    Retrieve,
}

/// How a retrieved chunk lands in the receive buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Copy,
    Reduce,
}

pub fn device_index_one_to_n(data_id: u64, num_devices: usize) -> usize {
    (data_id % num_devices as u64) as usize
}

pub fn device_block_id(data_id: u64, num_devices: usize) -> u64 {
    data_id / num_devices as u64
}

pub fn device_location(
    db_offset: u64,
    device_block_id: u64,
    block_size: u64,
    device_index: usize,
    device_stride: u64,
) -> u64 {
    db_offset + device_block_id * block_size + device_index as u64 * device_stride
}

/// Like [`device_location`], but rejects blocks that spill past the device's
/// usable capacity.
pub fn checked_device_location(
    db_offset: u64,
    device_block_id: u64,
    block_size: u64,
    device_index: usize,
    device_stride: u64,
    device_capacity: u64,
) -> Result<u64> {
    let needed = device_block_id
        .checked_add(1)
        .and_then(|b| b.checked_mul(block_size))
        .and_then(|b| b.checked_add(db_offset))
        .ok_or(Error::CapacityExceeded {
            needed: u64::MAX,
            capacity: device_capacity,
        })?;
    if needed > device_capacity {
        return Err(Error::CapacityExceeded {
            needed,
            capacity: device_capacity,
        });
    }
    Ok(device_location(
        db_offset,
        device_block_id,
        block_size,
        device_index,
        device_stride,
    ))
}

/// Devices owned by each rank under N-to-N placement, if the geometry divides evenly.
pub fn devices_per_rank(num_devices: usize, total_ranks: usize) -> Result<usize> {
    if total_ranks == 0 || num_devices < total_ranks || num_devices % total_ranks != 0 {
        return Err(Error::DegenerateGeometry {
            num_devices,
            total_ranks,
        });
    }
    Ok(num_devices / total_ranks)
}

pub fn device_index_n_to_n(
    rank_id: usize,
    data_id: u64,
    num_devices: usize,
    total_ranks: usize,
) -> Result<usize> {
    let per_rank = devices_per_rank(num_devices, total_ranks)?;
    Ok(rank_id * per_rank + (data_id % per_rank as u64) as usize)
}

/// Target rank of a producer's `step`-th outgoing segment, starting at its successor.
pub fn write_order(rank_id: usize, total_ranks: usize, step: usize) -> usize {
    (rank_id + 1 + step) % total_ranks
}

/// Producer a consumer reads from at `step`; the mirror of [`write_order`], so
/// at every step consumer `t` reads what its producer wrote for `t` at that step.
pub fn read_order(rank_id: usize, total_ranks: usize, step: usize) -> usize {
    (rank_id + 2 * total_ranks - 1 - step % total_ranks) % total_ranks
}

/// Inputs to a single placement decision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementInputs {
    pub rank_id: usize,
    pub total_ranks: usize,
    pub num_devices: usize,
    pub data_id: u64,
    pub block_size: u64,
    pub db_offset: u64,
    pub device_stride: u64,
    pub scheme: Scheme,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub device_index: usize,
    pub device_block_id: u64,
    pub pool_address: u64,
}

impl PlacementInputs {
    pub fn locate(&self) -> Result<Location> {
        let (device_index, device_block_id) = match self.scheme {
            Scheme::OneToN => (
                device_index_one_to_n(self.data_id, self.num_devices),
                device_block_id(self.data_id, self.num_devices),
            ),
            Scheme::NToN => {
                let per_rank = devices_per_rank(self.num_devices, self.total_ranks)?;
                (
                    device_index_n_to_n(
                        self.rank_id,
                        self.data_id,
                        self.num_devices,
                        self.total_ranks,
                    )?,
                    device_block_id(self.data_id, per_rank),
                )
            }
        };
        Ok(Location {
            device_index,
            device_block_id,
            pool_address: device_location(
                self.db_offset,
                device_block_id,
                self.block_size,
                device_index,
                self.device_stride,
            ),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Identifier of the chunk within the call, shared by its publish and
    /// retrieve entries.
    pub chunk_id: u64,
    pub producer: usize,
    pub pool_address: u64,
    pub device_index: usize,
    pub device_block_id: u64,
    pub doorbell_index: u64,
    pub direction: Direction,
    pub bytes: u64,
    /// Element offset into the send buffer (publish) or receive buffer (retrieve).
    pub buf_offset: usize,
    pub elems: usize,
    pub combine: Combine,
    /// Pipeline step: the producer's publish position, or one past it for retrieves.
    pub step: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub entries: Vec<PlanEntry>,
}

impl PlacementPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Layout summary shared by every rank of a call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub scheme: Scheme,
    pub layout: Layout,
    pub block_size: u64,
    /// Blocks reserved per device, including both epoch halves. Also the row
    /// stride of the doorbell index.
    pub blocks_per_device: u64,
    /// Highest byte offset used inside any device window, plus one.
    pub window_bytes: u64,
    pub doorbell_slots: u64,
    pub chunks: u64,
}

/// Publish and retrieve plans for every rank of one call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallPlan {
    pub publish: Vec<PlacementPlan>,
    pub retrieve: Vec<PlacementPlan>,
    pub footprint: Footprint,
}

struct Segment {
    producer: usize,
    /// Destination rank for per-target segments; `None` when one segment
    /// serves several consumers.
    target: Option<usize>,
    src_off: usize,
    len: usize,
    consumers: Vec<(usize, usize, Combine)>,
}

fn segments(req: &CollectiveRequest) -> Vec<Segment> {
    let p = req.nranks;
    let n = req.count;
    let root = req.root;
    let mut segs = Vec::new();
    match req.kind {
        CollectiveKind::AllReduce => {
            for q in 0..p {
                segs.push(Segment {
                    producer: q,
                    target: None,
                    src_off: 0,
                    len: n,
                    consumers: (0..p).map(|t| (t, 0, Combine::Reduce)).collect(),
                });
            }
        }
        CollectiveKind::Broadcast => segs.push(Segment {
            producer: root,
            target: None,
            src_off: 0,
            len: n,
            consumers: (0..p).map(|t| (t, 0, Combine::Copy)).collect(),
        }),
        CollectiveKind::Reduce => {
            for q in 0..p {
                segs.push(Segment {
                    producer: q,
                    target: Some(root),
                    src_off: 0,
                    len: n,
                    consumers: vec![(root, 0, Combine::Reduce)],
                });
            }
        }
        CollectiveKind::AllGather => {
            for q in 0..p {
                segs.push(Segment {
                    producer: q,
                    target: None,
                    src_off: 0,
                    len: n,
                    consumers: (0..p).map(|t| (t, q * n, Combine::Copy)).collect(),
                });
            }
        }
        CollectiveKind::ReduceScatter => {
            let part = n / p;
            for q in 0..p {
                for t in 0..p {
                    segs.push(Segment {
                        producer: q,
                        target: Some(t),
                        src_off: t * part,
                        len: part,
                        consumers: vec![(t, 0, Combine::Reduce)],
                    });
                }
            }
        }
        CollectiveKind::Gather => {
            for q in 0..p {
                segs.push(Segment {
                    producer: q,
                    target: Some(root),
                    src_off: 0,
                    len: n,
                    consumers: vec![(root, q * n, Combine::Copy)],
                });
            }
        }
        CollectiveKind::Scatter => {
            for t in 0..p {
                segs.push(Segment {
                    producer: root,
                    target: Some(t),
                    src_off: t * n,
                    len: n,
                    consumers: vec![(t, 0, Combine::Copy)],
                });
            }
        }
        CollectiveKind::AllToAll => {
            let part = n / p;
            for q in 0..p {
                for t in 0..p {
                    segs.push(Segment {
                        producer: q,
                        target: Some(t),
                        src_off: t * part,
                        len: part,
                        consumers: vec![(t, q * part, Combine::Copy)],
                    });
                }
            }
        }
    }
    segs
}

/// `(offset, len)` of chunk `c` out of `chunks` for a segment of `len`
/// elements. The last chunk carries the remainder.
pub fn chunk_range(len: usize, chunks: usize, c: usize) -> (usize, usize) {
    let base = len / chunks;
    if c + 1 == chunks {
        (base * c, len - base * c)
    } else {
        (base * c, base)
    }
}

struct Chunk {
    producer: usize,
    segment: usize,
    offset_in_segment: usize,
    elems: usize,
    seq: u64,
    device: usize,
    block: u64,
}

fn round_up(v: u64, align: u64) -> u64 {
    v.div_ceil(align) * align
}

impl CallPlan {
    pub fn build(req: &CollectiveRequest, cfg: &PoolConfig, layout: Layout, epoch: u64) -> Result<Self> {
        req.validate()?;
        cfg.validate()?;
        let p = req.nranks;
        let nd = cfg.num_devices;
        let chunks_per_seg = req.chunk_count;
        let elem_size = req.elem.size() as u64;
        let segs = segments(req);

        // Per-producer publish order: chunk-major, then targets in write order.
        let mut chunk_list: Vec<Chunk> = Vec::new();
        let mut seg_chunk: Vec<Vec<Option<usize>>> = vec![vec![None; chunks_per_seg]; segs.len()];
        for q in 0..p {
            let mut own: Vec<usize> = (0..segs.len()).filter(|&i| segs[i].producer == q).collect();
            own.sort_by_key(|&i| match segs[i].target {
                Some(t) => (t + p - q - 1) % p,
                None => 0,
            });
            let mut seq = 0u64;
            for c in 0..chunks_per_seg {
                for &si in &own {
                    let (off, len) = chunk_range(segs[si].len, chunks_per_seg, c);
                    if len == 0 {
                        continue;
                    }
                    seg_chunk[si][c] = Some(chunk_list.len());
                    chunk_list.push(Chunk {
                        producer: q,
                        segment: si,
                        offset_in_segment: off,
                        elems: len,
                        seq,
                        device: 0,
                        block: 0,
                    });
                    seq += 1;
                }
            }
        }

        let max_chunk_bytes = chunk_list
            .iter()
            .map(|c| c.elems as u64 * elem_size)
            .max()
            .unwrap_or(0);
        let block_size = round_up(max_chunk_bytes.max(1), BLOCK_ALIGN);

        let mut scheme = if req.kind.is_n_to_n() {
            Scheme::NToN
        } else {
            Scheme::OneToN
        };
        match layout {
            Layout::Interleaved => {
                let per_rank = match scheme {
                    Scheme::NToN => match devices_per_rank(nd, p) {
                        Ok(d) => Some(d),
                        Err(_) => {
                            scheme = Scheme::OneToN;
                            None
                        }
                    },
                    Scheme::OneToN => None,
                };
                match per_rank {
                    Some(dpr) => {
                        for ch in chunk_list.iter_mut() {
                            ch.device = device_index_n_to_n(ch.producer, ch.seq, nd, p)?;
                            ch.block = device_block_id(ch.seq, dpr);
                        }
                    }
                    None => {
                        // Round-robin from a per-producer starting device; producers
                        // get disjoint block ranges.
                        let mut counts = vec![0u64; p];
                        for ch in &chunk_list {
                            counts[ch.producer] += 1;
                        }
                        let stripe = counts
                            .iter()
                            .map(|&n| n.div_ceil(nd as u64))
                            .max()
                            .unwrap_or(0);
                        let mut slot = vec![0u64; p];
                        let mut next = 0u64;
                        for (q, &n) in counts.iter().enumerate() {
                            if n > 0 {
                                slot[q] = next;
                                next += 1;
                            }
                        }
                        for ch in chunk_list.iter_mut() {
                            let data_id = ch.seq + (ch.producer % nd) as u64;
                            ch.device = device_index_one_to_n(data_id, nd);
                            ch.block = slot[ch.producer] * stripe + device_block_id(ch.seq, nd);
                        }
                    }
                }
            }
            Layout::Sequential => {
                let usable = cfg.device_capacity.saturating_sub(cfg.doorbell_region_size);
                let per_device = (usable / block_size).max(1);
                let total = chunk_list.len() as u64;
                let mut order: Vec<usize> = (0..chunk_list.len()).collect();
                order.sort_by_key(|&i| (chunk_list[i].producer, chunk_list[i].seq));
                let parity = (epoch % 2) * total;
                for (g, &i) in order.iter().enumerate() {
                    let slot = g as u64 + parity;
                    chunk_list[i].device = (slot / per_device) as usize;
                    chunk_list[i].block = slot % per_device;
                    if chunk_list[i].device >= nd {
                        return Err(Error::CapacityExceeded {
                            needed: (2 * total) * block_size + cfg.doorbell_region_size,
                            capacity: cfg.device_capacity * nd as u64,
                        });
                    }
                }
            }
        }

        let blocks_used = chunk_list.iter().map(|c| c.block + 1).max().unwrap_or(0);
        let blocks_per_device = match layout {
            Layout::Interleaved => {
                // Alternate epochs use alternate halves of each device's blocks.
                let parity = (epoch % 2) * blocks_used;
                for ch in chunk_list.iter_mut() {
                    ch.block += parity;
                }
                2 * blocks_used
            }
            Layout::Sequential => chunk_list.iter().map(|c| c.block + 1).max().unwrap_or(0),
        };

        let mut addresses = Vec::with_capacity(chunk_list.len());
        let mut doorbells = Vec::with_capacity(chunk_list.len());
        let mut window_bytes = cfg.doorbell_region_size;
        for ch in &chunk_list {
            let addr = checked_device_location(
                cfg.doorbell_region_size,
                ch.block,
                block_size,
                ch.device,
                cfg.device_stride,
                cfg.device_capacity,
            )?;
            window_bytes = window_bytes.max(addr - ch.device as u64 * cfg.device_stride + block_size);
            let db = doorbell::doorbell_index(ch.device, ch.block, blocks_per_device);
            doorbell::check_slot(db, cfg.doorbell_region_size)?;
            addresses.push(addr);
            doorbells.push(db);
        }

        let mut publish = vec![PlacementPlan::default(); p];
        for (i, ch) in chunk_list.iter().enumerate() {
            let seg = &segs[ch.segment];
            publish[ch.producer].entries.push(PlanEntry {
                chunk_id: i as u64,
                producer: ch.producer,
                pool_address: addresses[i],
                device_index: ch.device,
                device_block_id: ch.block,
                doorbell_index: doorbells[i],
                direction: Direction::Publish,
                bytes: ch.elems as u64 * elem_size,
                buf_offset: seg.src_off + ch.offset_in_segment,
                elems: ch.elems,
                combine: Combine::Copy,
                step: ch.seq as usize,
            });
        }
        for plan in publish.iter_mut() {
            plan.entries.sort_by_key(|e| e.step);
        }

        let mut retrieve = vec![PlacementPlan::default(); p];
        for (t, plan) in retrieve.iter_mut().enumerate() {
            let stagger = if req.kind == CollectiveKind::Broadcast {
                (t + p - req.root - 1) % p
            } else {
                0
            };
            for c in 0..chunks_per_seg {
                for s in 0..p {
                    let q = read_order(t, p, s);
                    for (si, seg) in segs.iter().enumerate() {
                        if seg.producer != q {
                            continue;
                        }
                        let Some(&(_, dst, combine)) = seg.consumers.iter().find(|c| c.0 == t) else {
                            continue;
                        };
                        let cc = (c + stagger) % chunks_per_seg;
                        let Some(i) = seg_chunk[si][cc] else {
                            continue;
                        };
                        let ch = &chunk_list[i];
                        plan.entries.push(PlanEntry {
                            chunk_id: i as u64,
                            producer: q,
                            pool_address: addresses[i],
                            device_index: ch.device,
                            device_block_id: ch.block,
                            doorbell_index: doorbells[i],
                            direction: Direction::Retrieve,
                            bytes: ch.elems as u64 * elem_size,
                            buf_offset: dst + ch.offset_in_segment,
                            elems: ch.elems,
                            combine,
                            step: ch.seq as usize + 1,
                        });
                    }
                }
            }
        }

        Ok(CallPlan {
            publish,
            retrieve,
            footprint: Footprint {
                scheme,
                layout,
                block_size,
                blocks_per_device,
                window_bytes,
                doorbell_slots: nd as u64 * blocks_per_device,
                chunks: chunk_list.len() as u64,
            },
        })
    }
}

/// Publish and retrieve plans for `req.rank` under interleaved placement.
pub fn build_plan(req: &CollectiveRequest, cfg: &PoolConfig) -> Result<(PlacementPlan, PlacementPlan)> {
    build_plan_with(req, cfg, Layout::Interleaved, 0)
}

pub fn build_plan_with(
    req: &CollectiveRequest,
    cfg: &PoolConfig,
    layout: Layout,
    epoch: u64,
) -> Result<(PlacementPlan, PlacementPlan)> {
    let mut call = CallPlan::build(req, cfg, layout, epoch)?;
    let publish = std::mem::take(&mut call.publish[req.rank]);
    let retrieve = std::mem::take(&mut call.retrieve[req.rank]);
    Ok((publish, retrieve))
}

/// Smallest pool geometry over `num_devices` devices that holds `req` (both
/// epoch halves) under interleaved placement, rounded to 4 KiB.
pub fn size_pool(req: &CollectiveRequest, num_devices: usize) -> Result<PoolConfig> {
    const PAGE: u64 = 4096;
    let big = u64::MAX / (4 * num_devices.max(1) as u64);
    let probe = PoolConfig {
        num_devices,
        device_capacity: big,
        device_stride: big,
        doorbell_region_size: big / 4,
        backend: crate::pool::Backend::Recording,
    };
    let fp = CallPlan::build(req, &probe, Layout::Interleaved, 0)?.footprint;
    let db = round_up(doorbell::region_bytes(fp.doorbell_slots), PAGE);
    let capacity = round_up(db + fp.blocks_per_device * fp.block_size, PAGE).max(2 * PAGE);
    Ok(PoolConfig::new(num_devices, capacity).with_doorbell_region(db))
}
