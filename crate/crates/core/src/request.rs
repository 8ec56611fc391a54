//! Collective request types and the send/receive size contract of each primitive.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectiveKind {
    AllReduce,
    Broadcast,
    Reduce,
    AllGather,
    ReduceScatter,
    Gather,
    Scatter,
    AllToAll,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 8] = [
        CollectiveKind::AllReduce,
        CollectiveKind::Broadcast,
        CollectiveKind::Reduce,
        CollectiveKind::AllGather,
        CollectiveKind::ReduceScatter,
        CollectiveKind::Gather,
        CollectiveKind::Scatter,
        CollectiveKind::AllToAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "allreduce",
            CollectiveKind::Broadcast => "broadcast",
            CollectiveKind::Reduce => "reduce",
            CollectiveKind::AllGather => "allgather",
            CollectiveKind::ReduceScatter => "reducescatter",
            CollectiveKind::Gather => "gather",
            CollectiveKind::Scatter => "scatter",
            CollectiveKind::AllToAll => "alltoall",
        }
    }

    pub fn is_rooted(self) -> bool {
        matches!(
            self,
            CollectiveKind::Broadcast
                | CollectiveKind::Reduce
                | CollectiveKind::Gather
                | CollectiveKind::Scatter
        )
    }

    pub fn is_reduction(self) -> bool {
        matches!(
            self,
            CollectiveKind::AllReduce | CollectiveKind::Reduce | CollectiveKind::ReduceScatter
        )
    }

    /// All-to-all style traffic. These use exclusive per-rank device ranges;
    /// rooted kinds use round-robin over every device.
    pub fn is_n_to_n(self) -> bool {
        !self.is_rooted()
    }

    /// Kinds whose count must split evenly across ranks.
    pub fn needs_divisible_count(self) -> bool {
        matches!(self, CollectiveKind::ReduceScatter | CollectiveKind::AllToAll)
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CollectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        CollectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidRequest(format!("unknown collective kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    I32,
    I64,
    F32,
    F64,
}

impl ElemType {
    pub fn size(self) -> usize {
        match self {
            ElemType::I32 | ElemType::F32 => 4,
            ElemType::I64 | ElemType::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, ElemType::F32 | ElemType::F64)
    }
}

impl FromStr for ElemType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i32" | "int32" => Ok(ElemType::I32),
            "i64" | "int64" => Ok(ElemType::I64),
            "f32" | "float" | "float32" => Ok(ElemType::F32),
            "f64" | "double" | "float64" => Ok(ElemType::F64),
            _ => Err(Error::InvalidRequest(format!("unknown element type {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    #[default]
    Sum,
    Max,
    Min,
}

impl FromStr for ReduceOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(ReduceOp::Sum),
            "max" => Ok(ReduceOp::Max),
            "min" => Ok(ReduceOp::Min),
            _ => Err(Error::InvalidRequest(format!("unknown reduction {s:?}"))),
        }
    }
}

/// One rank's view of a collective call. All ranks of a communicator must
/// agree on every field except `rank`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CollectiveRequest {
    pub kind: CollectiveKind,
    pub rank: usize,
    pub nranks: usize,
    pub root: usize,
    /// `N`: elements per rank, as in the send/recv size table.
    pub count: usize,
    pub elem: ElemType,
    pub op: ReduceOp,
    pub chunk_count: usize,
}

impl CollectiveRequest {
    pub fn new(kind: CollectiveKind, rank: usize, nranks: usize, count: usize) -> Self {
        CollectiveRequest {
            kind,
            rank,
            nranks,
            root: 0,
            count,
            elem: ElemType::I32,
            op: ReduceOp::Sum,
            chunk_count: 1,
        }
    }

    pub fn with_root(mut self, root: usize) -> Self {
        self.root = root;
        self
    }

    pub fn with_elem(mut self, elem: ElemType) -> Self {
        self.elem = elem;
        self
    }

    pub fn with_op(mut self, op: ReduceOp) -> Self {
        self.op = op;
        self
    }

    pub fn with_chunks(mut self, chunk_count: usize) -> Self {
        self.chunk_count = chunk_count;
        self
    }

    /// Same call as seen from another rank.
    pub fn for_rank(&self, rank: usize) -> Self {
        CollectiveRequest {
            rank,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nranks == 0 {
            return Err(Error::InvalidRequest("nranks must be >= 1".into()));
        }
        if self.rank >= self.nranks {
            return Err(Error::InvalidRequest(format!(
                "rank {} outside communicator of {}",
                self.rank, self.nranks
            )));
        }
        if self.root >= self.nranks {
            return Err(Error::InvalidRequest(format!(
                "root {} outside communicator of {}",
                self.root, self.nranks
            )));
        }
        if self.chunk_count == 0 {
            return Err(Error::InvalidRequest("chunk_count must be >= 1".into()));
        }
        if self.kind.needs_divisible_count() && self.count % self.nranks != 0 {
            return Err(Error::InvalidRequest(format!(
                "{}: count {} is not divisible by nranks {}",
                self.kind, self.count, self.nranks
            )));
        }
        Ok(())
    }

    /// Send buffer length in elements for `rank`. Zero where the rank sends nothing.
    pub fn send_len(&self, rank: usize) -> usize {
        let n = self.count;
        match self.kind {
            CollectiveKind::Broadcast => {
                if rank == self.root {
                    n
                } else {
                    0
                }
            }
            CollectiveKind::Scatter => {
                if rank == self.root {
                    n * self.nranks
                } else {
                    0
                }
            }
            _ => n,
        }
    }

    /// Receive buffer length in elements for `rank`. Zero where the rank receives nothing.
    pub fn recv_len(&self, rank: usize) -> usize {
        let n = self.count;
        let p = self.nranks;
        match self.kind {
            CollectiveKind::AllReduce | CollectiveKind::Broadcast | CollectiveKind::AllToAll => n,
            CollectiveKind::Scatter => n,
            CollectiveKind::Reduce => {
                if rank == self.root {
                    n
                } else {
                    0
                }
            }
            CollectiveKind::AllGather => n * p,
            CollectiveKind::ReduceScatter => n / p,
            CollectiveKind::Gather => {
                if rank == self.root {
                    n * p
                } else {
                    0
                }
            }
        }
    }

    pub fn msg_bytes(&self) -> u64 {
        (self.count * self.elem.size()) as u64
    }
}
