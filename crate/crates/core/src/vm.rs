//! Per-process page-granular address spaces and the VM syscalls.
//!
//! Every VM operation, successful or faulting, appends exactly one record
//! to the d-mode history.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::dmode::counters::ObjType;
use crate::dmode::vmlog::VmOpRecord;
use crate::kernel::heap::SlotRef;
use crate::kernel::{BugFlags, Kernel, PanicReason, Pid, SyscallError, Tid};

pub const PAGE_SIZE: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VmOpKind {
    NewPages = 0,
    RemovePages = 1,
    MapPage = 2,
    UnmapPage = 3,
    PageFault = 4,
    Validate = 5,
}

impl VmOpKind {
    pub const ALL: [VmOpKind; 6] = [
        VmOpKind::NewPages,
        VmOpKind::RemovePages,
        VmOpKind::MapPage,
        VmOpKind::UnmapPage,
        VmOpKind::PageFault,
        VmOpKind::Validate,
    ];

    pub fn from_id(id: u32) -> Option<VmOpKind> {
        VmOpKind::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            VmOpKind::NewPages => "NEW_PAGES",
            VmOpKind::RemovePages => "REMOVE_PAGES",
            VmOpKind::MapPage => "MAP_PAGE",
            VmOpKind::UnmapPage => "UNMAP_PAGE",
            VmOpKind::PageFault => "PAGE_FAULT",
            VmOpKind::Validate => "VALIDATE",
        }
    }

    /// Accepts either the numeric id or the name (case-insensitive).
    pub fn parse(s: &str) -> Option<VmOpKind> {
        if let Ok(id) = s.parse::<u32>() {
            return VmOpKind::from_id(id);
        }
        VmOpKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemRegion {
    pub base: u32,
    pub pages: u32,
    /// Content buffer id, unique per allocation.
    pub backing: u64,
    /// Page contents; empty until first written.
    pub(crate) data: Vec<u8>,
}

impl MemRegion {
    pub fn end(&self) -> u64 {
        self.base as u64 + self.pages as u64 * PAGE_SIZE as u64
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && (addr as u64) < self.end()
    }
}

/// Regions keyed by page-aligned base; each value is a heap handle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AddressSpace {
    pub(crate) regions: BTreeMap<u32, SlotRef>,
}

impl AddressSpace {
    pub fn region_bases(&self) -> impl Iterator<Item = u32> + '_ {
        self.regions.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// The cr2 analog.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FaultRegister {
    pub last_fault_vaddr: Option<u32>,
}

pub struct FileEntry {
    pub name: &'static str,
    pub len: usize,
    content: fn(usize) -> u8,
}

impl FileEntry {
    pub fn byte(&self, offset: usize) -> u8 {
        (self.content)(offset)
    }
}

const EXAM_SOLUTION: &[u8; 64] = b"1:B 2:D 3:A 4:C 5:A 6:B 7:D 8:C 9:A 10:B 11:C 12:D 13:A 14:B 15\n";

pub const FILES: [FileEntry; 2] = [
    FileEntry { name: "exam_solution.txt", len: 64, content: |i| EXAM_SOLUTION[i] },
    FileEntry { name: "big.txt", len: 1 << 20, content: |i| (i % 251) as u8 },
];

pub fn lookup_file(name: &str) -> Option<&'static FileEntry> {
    FILES.iter().find(|f| f.name == name)
}

fn page_base(addr: u32) -> u32 {
    addr & !(PAGE_SIZE - 1)
}

/// Page bases covering `[base, base + len)`, clipped to the 32-bit space.
fn pages_in(base: u32, len: u32) -> impl Iterator<Item = u32> {
    let first = page_base(base) as u64;
    let end = (base as u64 + len as u64).min(1 << 32);
    (first..end).step_by(PAGE_SIZE as usize).map(|p| p as u32)
}

impl Kernel {
    fn region_slot(&self, slot: SlotRef) -> Result<&MemRegion, SyscallError> {
        self.heap
            .regions
            .get(slot)
            .ok_or_else(|| self.assert_fail("address space names a dead MemRegion"))
    }

    fn region_at(&self, pid: Pid, addr: u32) -> Result<Option<SlotRef>, SyscallError> {
        let pcb = self.pcb(pid)?;
        let Some((_, &slot)) = pcb.address_space.regions.range(..=addr).next_back() else {
            return Ok(None);
        };
        Ok(self.region_slot(slot)?.contains(addr).then_some(slot))
    }

    fn page_mapped(&self, pid: Pid, page: u32) -> Result<bool, SyscallError> {
        Ok(self.region_at(pid, page)?.is_some())
    }

    /// True iff every page of `[base, base + len)` is mapped in `pid`.
    pub fn check_mapping(&self, pid: Pid, base: u32, len: u32) -> bool {
        if self.pcb(pid).is_err() {
            return false;
        }
        pages_in(base, len).all(|p| self.page_mapped(pid, p).unwrap_or(false))
    }

    pub(crate) fn vm_log(&mut self, pid: Pid, tid: Tid, op: VmOpKind, vaddr: u32) {
        let now = self.clock.ticks;
        if let Some(d) = self.dmode.as_mut() {
            d.area.vmlog.append_locked(tid, now, VmOpRecord { pid, tid, op, vaddr });
            d.meter.appends += 1;
        }
    }

    pub(crate) fn vm_new_pages(&mut self, tid: Tid, base: u32, len: u32) -> Result<(), SyscallError> {
        let pid = self.tcb(tid)?.owner_pid;
        if !base.is_multiple_of(PAGE_SIZE) || len == 0 || !len.is_multiple_of(PAGE_SIZE) {
            return Err(SyscallError::Unaligned);
        }
        if base as u64 + len as u64 > 1 << 32 {
            return Err(SyscallError::Unaligned);
        }
        let end = base as u64 + len as u64;
        for (&b, &slot) in &self.pcb(pid)?.address_space.regions {
            let r = self.region_slot(slot)?;
            if (b as u64) < end && r.end() > base as u64 {
                return Err(SyscallError::Overlap);
            }
        }
        let backing = self.next_backing;
        let region = MemRegion { base, pages: len / PAGE_SIZE, backing, data: Vec::new() };
        let slot = self.kalloc_region(region)?;
        self.next_backing += 1;
        self.pcb_mut(pid)?.address_space.regions.insert(base, slot);
        self.vm_log(pid, tid, VmOpKind::NewPages, base);
        Ok(())
    }

    pub(crate) fn vm_remove_pages(&mut self, tid: Tid, base: u32) -> Result<(), SyscallError> {
        let pid = self.tcb(tid)?.owner_pid;
        let Some(slot) = self.pcb_mut(pid)?.address_space.regions.remove(&base) else {
            return Err(SyscallError::NotMapped);
        };
        self.vm_log(pid, tid, VmOpKind::RemovePages, base);
        if !self.config.bug_flags.contains(BugFlags::LEAK_REGION_ON_REMOVE) {
            self.free_obj(ObjType::MemRegion, slot)?;
        }
        Ok(())
    }

    /// Tears down every region of `pid` (process exit).
    pub(crate) fn vm_destroy(&mut self, pid: Pid, tid: Tid) -> Result<(), SyscallError> {
        let regions = std::mem::take(&mut self.pcb_mut(pid)?.address_space.regions);
        for (base, slot) in regions {
            self.vm_log(pid, tid, VmOpKind::UnmapPage, base);
            self.free_obj(ObjType::MemRegion, slot)?;
        }
        Ok(())
    }

    /// Copies the parent's regions into the child. On exhaustion the
    /// copies made so far are released again.
    pub(crate) fn vm_copy(&mut self, parent: Pid, child: Pid, child_tid: Tid) -> Result<(), SyscallError> {
        let src: Vec<(u32, SlotRef)> =
            self.pcb(parent)?.address_space.regions.iter().map(|(b, s)| (*b, *s)).collect();
        let mut made = Vec::new();
        for (base, slot) in src {
            let mut copy = self.region_slot(slot)?.clone();
            copy.backing = self.next_backing;
            match self.kalloc_region(copy) {
                Ok(new) => {
                    self.next_backing += 1;
                    made.push((base, new));
                }
                Err(e) => {
                    for (_, s) in made {
                        self.free_obj(ObjType::MemRegion, s)?;
                    }
                    return Err(e);
                }
            }
        }
        for (base, slot) in made {
            self.pcb_mut(child)?.address_space.regions.insert(base, slot);
            self.vm_log(child, child_tid, VmOpKind::MapPage, base);
        }
        Ok(())
    }

    /// Kernel-mode write of `data` to user memory at `addr`. Pages are
    /// written in ascending order; the first unmapped one faults.
    fn copy_to_user(&mut self, tid: Tid, addr: u32, data: &[u8]) -> Result<(), SyscallError> {
        let pid = self.tcb(tid)?.owner_pid;
        for page in pages_in(addr, data.len() as u32) {
            let Some(slot) = self.region_at(pid, page)? else {
                self.fault.last_fault_vaddr = Some(page);
                self.vm_log(pid, tid, VmOpKind::PageFault, page);
                return Err(self.panic_error(
                    PanicReason::PageFaultKernelMode,
                    format!("page fault in kernel mode writing {page:#010x}"),
                    Some(page),
                ));
            };
            let start = addr.max(page);
            let stop = (addr as u64 + data.len() as u64).min(page as u64 + PAGE_SIZE as u64) as u32;
            let region = self.heap.regions.get_mut(slot).expect("region checked above");
            let total = region.pages as usize * PAGE_SIZE as usize;
            if region.data.len() < total {
                region.data.resize(total, 0);
            }
            let off = (start - region.base) as usize;
            let src = &data[(start - addr) as usize..(stop - addr) as usize];
            region.data[off..off + src.len()].copy_from_slice(src);
        }
        Ok(())
    }

    pub(crate) fn vm_readfile(
        &mut self,
        tid: Tid,
        name: &str,
        buf: u32,
        len: u32,
        offset: u32,
    ) -> Result<i64, SyscallError> {
        let pid = self.tcb(tid)?.owner_pid;
        let file = lookup_file(name).ok_or(SyscallError::NoSuchFile)?;
        if !self.config.bug_flags.contains(BugFlags::SKIP_VM_VALIDATION_IN_READFILE) {
            self.vm_log(pid, tid, VmOpKind::Validate, buf);
            if !self.check_mapping(pid, buf, len) {
                return Err(SyscallError::BufferUnmapped);
            }
        }
        let offset = (offset as usize).min(file.len);
        let count = (len as usize).min(file.len - offset);
        let data: Vec<u8> = (offset..offset + count).map(|i| file.byte(i)).collect();
        self.call_path.push("copy_to_user");
        self.copy_to_user(tid, buf, &data)?;
        self.call_path.pop();
        Ok(count as i64)
    }

    /// Bytes of user memory at `[addr, addr + len)`; unmapped or unwritten
    /// bytes read as zero.
    pub fn peek_user(&self, pid: Pid, addr: u32, len: u32) -> Vec<u8> {
        (0..len)
            .map(|i| {
                let a = addr.wrapping_add(i);
                match self.region_at(pid, a) {
                    Ok(Some(slot)) => {
                        let r = self.heap.regions.get(slot).expect("live region");
                        r.data.get((a - r.base) as usize).copied().unwrap_or(0)
                    }
                    _ => 0,
                }
            })
            .collect()
    }
}
