//! Per-type live-object counters.
//!
//! The table has 30 four-byte slots (120 bytes serialized). Type ids:
//!
//! | id | type      | object size |
//! |----|-----------|-------------|
//! | 0  | PCB       | 96          |
//! | 1  | TCB       | 64          |
//! | 2  | MemRegion | 24          |
//! | 3-29 | reserved | 0          |

use serde::Serialize;

pub const COUNTER_SLOTS: usize = 30;
pub const COUNTER_WIDTH: usize = 4;
pub const COUNTER_TABLE_BYTES: usize = COUNTER_SLOTS * COUNTER_WIDTH;

/// Kernel object types tracked by the allocator wrapper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ObjType {
    Pcb = 0,
    Tcb = 1,
    MemRegion = 2,
}

impl ObjType {
    pub const ALL: [ObjType; 3] = [ObjType::Pcb, ObjType::Tcb, ObjType::MemRegion];

    pub fn id(self) -> TypeId {
        TypeId(self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjType::Pcb => "PCB",
            ObjType::Tcb => "TCB",
            ObjType::MemRegion => "MemRegion",
        }
    }

    /// Object size in bytes, used to turn counts into bytes in use.
    pub fn size(self) -> u64 {
        match self {
            ObjType::Pcb => 96,
            ObjType::Tcb => 64,
            ObjType::MemRegion => 24,
        }
    }

    pub fn from_name(name: &str) -> Option<ObjType> {
        ObjType::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(name))
    }
}

/// Index into the counter table; always `< COUNTER_SLOTS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TypeId(u8);

impl TypeId {
    pub fn new(id: u8) -> Option<TypeId> {
        ((id as usize) < COUNTER_SLOTS).then_some(TypeId(id))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocCounterTable {
    counts: [u32; COUNTER_SLOTS],
    /// Frees observed while the counter was already zero, per type.
    underflows: [u32; COUNTER_SLOTS],
}

impl Default for AllocCounterTable {
    fn default() -> Self {
        AllocCounterTable { counts: [0; COUNTER_SLOTS], underflows: [0; COUNTER_SLOTS] }
    }
}

impl AllocCounterTable {
    pub fn record_alloc(&mut self, id: TypeId) {
        let c = &mut self.counts[id.index()];
        *c = c.saturating_add(1);
    }

    /// Decrements the counter. A free at zero leaves it at zero and is
    /// remembered so the validators can report it.
    pub fn record_free(&mut self, id: TypeId) {
        let i = id.index();
        if self.counts[i] == 0 {
            self.underflows[i] += 1;
        } else {
            self.counts[i] -= 1;
        }
    }

    pub fn count(&self, id: TypeId) -> u32 {
        self.counts[id.index()]
    }

    pub fn underflows(&self, id: TypeId) -> u32 {
        self.underflows[id.index()]
    }

    pub fn to_bytes(&self) -> [u8; COUNTER_TABLE_BYTES] {
        let mut out = [0u8; COUNTER_TABLE_BYTES];
        for (chunk, c) in out.chunks_exact_mut(COUNTER_WIDTH).zip(self.counts.iter()) {
            chunk.copy_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; COUNTER_TABLE_BYTES]) -> Self {
        let mut t = AllocCounterTable::default();
        for (c, chunk) in t.counts.iter_mut().zip(bytes.chunks_exact(COUNTER_WIDTH)) {
            *c = u32::from_le_bytes(chunk.try_into().unwrap());
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemstatRow {
    #[serde(rename = "type")]
    pub type_name: &'static str,
    pub count: u32,
    pub bytes: u64,
}

/// Counts and bytes in use for every named object type.
pub fn memstat(table: &AllocCounterTable) -> Vec<MemstatRow> {
    ObjType::ALL
        .into_iter()
        .map(|t| {
            let count = table.count(t.id());
            MemstatRow { type_name: t.name(), count, bytes: count as u64 * t.size() }
        })
        .collect()
}
