//! Lazily loaded dynamic calls.
//!
//! Every dynamic function has a 24-byte entry in the usrcore DC jump table.
//! Word 0 of an entry is zero while the function is unresolved, which
//! routes the call to the DC loader; the loader copies the body from usrmem
//! into the DC region and patches word 0 with the local address, so later
//! calls branch straight to the body.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::layout::{align8, ProgramImage, SegmentKind, DC_ENTRY_BYTES};
use crate::memspace::{DeviceAddress, MemoryMap};
use crate::mesh::{CoreId, CoreState, Machine, MeshConfig};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcCounters {
    pub copies: u64,
    pub bytes_copied: u64,
    pub indirections: u64,
    pub resets: u64,
    /// Bytes copied per function since the last reset.
    pub copied_since_reset: BTreeMap<u32, u64>,
}

/// Per-core DC region allocator and instrumentation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DcState {
    pub region_offset: u32,
    pub region_size: u32,
    pub cursor: u32,
    /// Function id to local offset of its resident copy.
    pub resident: BTreeMap<u32, u32>,
    pub counters: DcCounters,
}

impl DcState {
    pub fn for_image(image: &ProgramImage) -> Self {
        let r = image.segment(SegmentKind::DcRegion);
        DcState {
            region_offset: r.offset,
            region_size: r.size,
            ..DcState::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DcEntryState {
    Unresolved,
    Resolved(DeviceAddress),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DcOutcome {
    pub addr: DeviceAddress,
    pub cost: f64,
    pub copied: u32,
}

fn entry_addr(id: CoreId, mem: &MemoryMap, image: &ProgramImage, index: usize) -> Result<DeviceAddress> {
    Ok(mem.encode(id.row, id.col, image.dc_table_offset + DC_ENTRY_BYTES * index as u32)?)
}

/// Routes a call to `func` through the DC table of core `id`.
pub(crate) fn invoke(
    id: CoreId,
    dc: &mut DcState,
    mem: &MemoryMap,
    cfg: &MeshConfig,
    image: &ProgramImage,
    func: u32,
) -> Result<DcOutcome> {
    let index = image.dc_index(func).ok_or(SimError::UnknownDynamicFunction(func))?;
    let entry = entry_addr(id, mem, image, index)?;
    let target = mem.read_u32(entry)?;
    if target != 0 {
        dc.counters.indirections += 1;
        return Ok(DcOutcome {
            addr: DeviceAddress(target),
            cost: cfg.dc_indirection_latency,
            copied: 0,
        });
    }
    // DC loader: look up {global address, size} in the side table
    let side = mem.shared(image.dc_side_offset + 8 * index as u32);
    let home = DeviceAddress(mem.read_u32(side)?);
    let size = mem.read_u32(side.add(4))?;
    let available = dc.region_size - dc.cursor;
    if size > available {
        return Err(SimError::DcRegionExhausted {
            core: id,
            func,
            needed: size,
            available,
        });
    }
    let offset = dc.region_offset + dc.cursor;
    let dst = mem.encode(id.row, id.col, offset)?;
    mem.copy(home, dst, size)?;
    mem.write_u32(entry, dst.value())?;
    dc.cursor = (dc.cursor + align8(size)).min(dc.region_size);
    dc.resident.insert(func, offset);
    dc.counters.copies += 1;
    dc.counters.bytes_copied += size as u64;
    *dc.counters.copied_since_reset.entry(func).or_default() += size as u64;
    Ok(DcOutcome {
        addr: dst,
        cost: cfg.offchip_cost(size as u64),
        copied: size,
    })
}

/// Invalidates every entry and frees the DC region.
pub(crate) fn reset(id: CoreId, dc: &mut DcState, mem: &MemoryMap, image: &ProgramImage) -> Result<()> {
    for index in 0..image.dc_table.len() {
        mem.write_u32(entry_addr(id, mem, image, index)?, 0)?;
    }
    dc.cursor = 0;
    dc.resident.clear();
    dc.counters.copied_since_reset.clear();
    dc.counters.resets += 1;
    Ok(())
}

impl Machine {
    /// Host-side DC table reset on a waiting or running core.
    pub fn dc_reset(&mut self, id: CoreId) -> Result<()> {
        let idx = self.core_index(id)?;
        let core = &mut self.cores[idx];
        if !matches!(core.state(), CoreState::Running | CoreState::SyscoreWait) {
            return Err(SimError::NotInWaitState {
                core: id,
                state: core.state(),
            });
        }
        let program = core.program.clone().ok_or(SimError::NoImageLoaded(id))?;
        reset(id, &mut core.dc, &self.mem, &program.image)
    }

    /// State of the DC entry for `func` on core `id`, read from its memory.
    pub fn dc_entry(&self, id: CoreId, func: u32) -> Result<DcEntryState> {
        let core = self
            .core(id)
            .ok_or_else(|| SimError::InvalidConfig(format!("no core {id}")))?;
        let program = core.program.as_ref().ok_or(SimError::NoImageLoaded(id))?;
        let index = program
            .image
            .dc_index(func)
            .ok_or(SimError::UnknownDynamicFunction(func))?;
        let w0 = self.mem.read_u32(entry_addr(id, &self.mem, &program.image, index)?)?;
        Ok(if w0 == 0 {
            DcEntryState::Unresolved
        } else {
            DcEntryState::Resolved(DeviceAddress(w0))
        })
    }
}
