//! Simulated kernel heap: one fixed pool of slots per object type.
//!
//! Each slot carries a header (live flag, generation). Handles remember the
//! generation they were issued with, so a stale handle is detectable after
//! the slot is freed or reused.

use serde::Serialize;

use super::{Pcb, Tcb};
use crate::dmode::counters::ObjType;
use crate::vm::MemRegion;

/// Handle to a heap slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SlotRef {
    pub index: u32,
    pub generation: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Slot<T> {
    pub(crate) live: bool,
    pub(crate) generation: u32,
    /// `None` for free slots, and for slots whose header was scribbled
    /// live without a real allocation.
    pub(crate) value: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Pool<T> {
    pub(crate) slots: Vec<Slot<T>>,
}

impl<T> Pool<T> {
    pub(crate) fn new(capacity: usize) -> Self {
        let slots = (0..capacity).map(|_| Slot { live: false, generation: 0, value: None }).collect();
        Pool { slots }
    }

    pub(crate) fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Lowest free slot first.
    pub(crate) fn alloc(&mut self, value: T) -> Option<SlotRef> {
        let (index, slot) = self.slots.iter_mut().enumerate().find(|(_, s)| !s.live)?;
        slot.live = true;
        slot.value = Some(value);
        Some(SlotRef { index: index as u32, generation: slot.generation })
    }

    /// Returns the freed object, or `None` if the handle is not live.
    pub(crate) fn free(&mut self, r: SlotRef) -> Option<T> {
        let slot = self.slots.get_mut(r.index as usize)?;
        if !slot.live || slot.generation != r.generation {
            return None;
        }
        slot.live = false;
        slot.generation = slot.generation.wrapping_add(1);
        slot.value.take()
    }

    pub(crate) fn get(&self, r: SlotRef) -> Option<&T> {
        let slot = self.slots.get(r.index as usize)?;
        if slot.live && slot.generation == r.generation {
            slot.value.as_ref()
        } else {
            None
        }
    }

    pub(crate) fn get_mut(&mut self, r: SlotRef) -> Option<&mut T> {
        let slot = self.slots.get_mut(r.index as usize)?;
        if slot.live && slot.generation == r.generation {
            slot.value.as_mut()
        } else {
            None
        }
    }

    /// Number of slots whose header says live.
    pub(crate) fn live_count(&self) -> usize {
        self.slots.iter().filter(|s| s.live).count()
    }

    pub(crate) fn live(&self) -> impl Iterator<Item = (SlotRef, Option<&T>)> {
        self.slots.iter().enumerate().filter(|(_, s)| s.live).map(|(i, s)| {
            (SlotRef { index: i as u32, generation: s.generation }, s.value.as_ref())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct KernelHeap {
    pub(crate) pcbs: Pool<Pcb>,
    pub(crate) tcbs: Pool<Tcb>,
    pub(crate) regions: Pool<MemRegion>,
}

const HEAP_BASE: u32 = 0x0100_0000;
const POOL_STRIDE: u32 = 0x0100_0000;

impl KernelHeap {
    pub(crate) fn new(pcb: usize, tcb: usize, regions: usize) -> Self {
        KernelHeap { pcbs: Pool::new(pcb), tcbs: Pool::new(tcb), regions: Pool::new(regions) }
    }

    pub(crate) fn capacity(&self, ty: ObjType) -> usize {
        match ty {
            ObjType::Pcb => self.pcbs.capacity(),
            ObjType::Tcb => self.tcbs.capacity(),
            ObjType::MemRegion => self.regions.capacity(),
        }
    }

    pub(crate) fn live_count(&self, ty: ObjType) -> usize {
        match ty {
            ObjType::Pcb => self.pcbs.live_count(),
            ObjType::Tcb => self.tcbs.live_count(),
            ObjType::MemRegion => self.regions.live_count(),
        }
    }

    /// Simulated kernel virtual address of a slot.
    pub fn slot_addr(ty: ObjType, index: u32) -> u32 {
        HEAP_BASE + POOL_STRIDE * ty as u32 + index.wrapping_mul(ty.size() as u32)
    }
}
