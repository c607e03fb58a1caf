//! Unified virtual address space shared by the host and every core.
//!
//! A [`DeviceAddress`] is a 32-bit value. The shared global window
//! `[SHARED_BASE, SHARED_BASE + shared_size)` is checked first; any other
//! value carries a core id in its top 12 bits (6-bit row, 6-bit column) and
//! a 20-bit offset into that core's local memory. Core id 0 is reserved so
//! small integers never decode as core-local addresses.
//!
//! Mesh cores are numbered logically from `(0, 0)`; the map adds a fixed
//! origin before encoding so the reserved id is never produced.

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SHARED_BASE: u32 = 0x8E00_0000;
pub const DEFAULT_SHARED_SIZE: u32 = 32 << 20;
pub const DEFAULT_LOCAL_MEM_BYTES: u32 = 32 * 1024;

const OFFSET_BITS: u32 = 20;
const OFFSET_MASK: u32 = (1 << OFFSET_BITS) - 1;
const COORD_BITS: u32 = 6;
const COORD_MASK: u32 = (1 << COORD_BITS) - 1;
/// Largest row or column id representable in an address.
pub const MAX_COORD: u32 = 1 << COORD_BITS;
/// Size of the address window reserved for each core id.
pub const CORE_WINDOW: u32 = 1 << OFFSET_BITS;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceAddress(pub u32);

impl DeviceAddress {
    pub const NULL: DeviceAddress = DeviceAddress(0);

    pub const fn value(self) -> u32 {
        self.0
    }

    /// Builds an address from raw id fields. Returns `None` when a field
    /// does not fit its bit width.
    pub fn from_fields(id_row: u32, id_col: u32, offset: u32) -> Option<Self> {
        if id_row >= MAX_COORD || id_col >= MAX_COORD || offset > OFFSET_MASK {
            return None;
        }
        Some(DeviceAddress(
            (id_row << (OFFSET_BITS + COORD_BITS)) | (id_col << OFFSET_BITS) | offset,
        ))
    }

    /// Splits the address into `(id_row, id_col, offset)` without any
    /// validity check.
    pub fn fields(self) -> (u32, u32, u32) {
        let id = self.0 >> OFFSET_BITS;
        (id >> COORD_BITS, id & COORD_MASK, self.0 & OFFSET_MASK)
    }

    pub fn checked_add(self, delta: u32) -> Option<Self> {
        self.0.checked_add(delta).map(DeviceAddress)
    }

    pub fn add(self, delta: u32) -> Self {
        DeviceAddress(self.0.wrapping_add(delta))
    }
}

impl fmt::Debug for DeviceAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

impl fmt::Display for DeviceAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

impl From<u32> for DeviceAddress {
    fn from(v: u32) -> Self {
        DeviceAddress(v)
    }
}

/// Result of decoding an address against a concrete memory map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    CoreLocal { row: u32, col: u32, offset: u32 },
    SharedGlobal { offset: u32 },
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemError {
    #[error("invalid address {0}")]
    InvalidAddress(DeviceAddress),
    #[error("range of {len} bytes at {addr} crosses a region boundary")]
    RangeStraddle { addr: DeviceAddress, len: u32 },
    #[error("invalid memory map: {0}")]
    InvalidMap(String),
}

/// Geometry of the address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapGeometry {
    pub rows: u32,
    pub cols: u32,
    pub origin_row: u32,
    pub origin_col: u32,
    pub local_mem_bytes: u32,
    pub shared_size: u32,
}

impl MapGeometry {
    pub fn validate(&self) -> Result<(), MemError> {
        let bad = |m: String| Err(MemError::InvalidMap(m));
        if self.rows == 0 || self.cols == 0 {
            return bad("mesh must have at least one core".into());
        }
        if self.origin_row + self.rows > MAX_COORD || self.origin_col + self.cols > MAX_COORD {
            return bad(format!(
                "{}x{} mesh at origin ({}, {}) exceeds the 64x64 core id space",
                self.rows, self.cols, self.origin_row, self.origin_col
            ));
        }
        if self.origin_row == 0 && self.origin_col == 0 {
            return bad("core id (0, 0) is reserved; use a nonzero mesh origin".into());
        }
        if self.local_mem_bytes == 0 || self.local_mem_bytes > CORE_WINDOW {
            return bad(format!(
                "local memory of {} bytes does not fit a core window",
                self.local_mem_bytes
            ));
        }
        let shared_end = SHARED_BASE as u64 + self.shared_size as u64;
        if shared_end > 1u64 << 32 {
            return bad(format!("shared size {:#x} overflows the address space", self.shared_size));
        }
        for row in 0..self.rows {
            for col in 0..self.cols {
                let id = ((self.origin_row + row) << COORD_BITS) | (self.origin_col + col);
                let start = (id as u64) << OFFSET_BITS;
                let end = start + self.local_mem_bytes as u64;
                if start < shared_end && (SHARED_BASE as u64) < end {
                    return bad(format!(
                        "core ({row}, {col}) overlaps the shared window; shrink the mesh or move its origin"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn core_count(&self) -> usize {
        (self.rows * self.cols) as usize
    }

    /// Decodes an address. A pure function of the value and this geometry.
    pub fn decode(&self, addr: DeviceAddress) -> Region {
        let v = addr.0;
        if v >= SHARED_BASE && ((v - SHARED_BASE) as u64) < self.shared_size as u64 {
            return Region::SharedGlobal {
                offset: v - SHARED_BASE,
            };
        }
        let (id_row, id_col, offset) = addr.fields();
        if id_row == 0 && id_col == 0 {
            return Region::Invalid;
        }
        let (Some(row), Some(col)) = (
            id_row.checked_sub(self.origin_row),
            id_col.checked_sub(self.origin_col),
        ) else {
            return Region::Invalid;
        };
        if row >= self.rows || col >= self.cols || offset >= self.local_mem_bytes {
            return Region::Invalid;
        }
        Region::CoreLocal { row, col, offset }
    }

    /// Encodes a logical core coordinate and local offset.
    pub fn encode(&self, row: u32, col: u32, offset: u32) -> Result<DeviceAddress, MemError> {
        if row >= self.rows || col >= self.cols || offset >= self.local_mem_bytes {
            return Err(MemError::InvalidAddress(
                DeviceAddress::from_fields(
                    (self.origin_row + row).min(COORD_MASK),
                    (self.origin_col + col).min(COORD_MASK),
                    offset & OFFSET_MASK,
                )
                .unwrap_or_default(),
            ));
        }
        Ok(DeviceAddress::from_fields(self.origin_row + row, self.origin_col + col, offset)
            .expect("validated geometry"))
    }

    pub fn shared(&self, offset: u32) -> DeviceAddress {
        DeviceAddress(SHARED_BASE.wrapping_add(offset))
    }
}

/// Byte storage for the whole machine.
///
/// Backing bytes are `Cell`s so host views alias the same storage and
/// any number of them may coexist with ordinary reads and writes.
pub struct MemoryMap {
    geom: MapGeometry,
    local: Vec<Box<[Cell<u8>]>>,
    shared: Box<[Cell<u8>]>,
}

impl fmt::Debug for MemoryMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryMap").field("geometry", &self.geom).finish()
    }
}

fn zeroed(len: u32) -> Box<[Cell<u8>]> {
    std::iter::repeat_with(|| Cell::new(0)).take(len as usize).collect()
}

impl MemoryMap {
    pub fn new(geom: MapGeometry) -> Result<Self, MemError> {
        geom.validate()?;
        let local = (0..geom.core_count()).map(|_| zeroed(geom.local_mem_bytes)).collect();
        Ok(MemoryMap {
            geom,
            local,
            shared: zeroed(geom.shared_size),
        })
    }

    pub fn geometry(&self) -> &MapGeometry {
        &self.geom
    }

    pub fn decode(&self, addr: DeviceAddress) -> Region {
        self.geom.decode(addr)
    }

    pub fn encode(&self, row: u32, col: u32, offset: u32) -> Result<DeviceAddress, MemError> {
        self.geom.encode(row, col, offset)
    }

    pub fn shared(&self, offset: u32) -> DeviceAddress {
        self.geom.shared(offset)
    }

    fn resolve(&self, addr: DeviceAddress, len: u32) -> Result<&[Cell<u8>], MemError> {
        let first = self.decode(addr);
        if first == Region::Invalid {
            return Err(MemError::InvalidAddress(addr));
        }
        if len > 0 {
            let last_addr = addr
                .checked_add(len - 1)
                .ok_or(MemError::InvalidAddress(addr))?;
            let last = self.decode(last_addr);
            match (first, last) {
                (_, Region::Invalid) => return Err(MemError::InvalidAddress(last_addr)),
                (Region::SharedGlobal { .. }, Region::SharedGlobal { .. }) => {}
                (
                    Region::CoreLocal { row, col, .. },
                    Region::CoreLocal { row: r2, col: c2, .. },
                ) if row == r2 && col == c2 => {}
                _ => return Err(MemError::RangeStraddle { addr, len }),
            }
        }
        let (store, offset) = match first {
            Region::CoreLocal { row, col, offset } => {
                (&self.local[(row * self.geom.cols + col) as usize], offset)
            }
            Region::SharedGlobal { offset } => (&self.shared, offset),
            Region::Invalid => unreachable!(),
        };
        Ok(&store[offset as usize..offset as usize + len as usize])
    }

    pub fn read_bytes(&self, addr: DeviceAddress, len: u32) -> Result<Vec<u8>, MemError> {
        Ok(self.resolve(addr, len)?.iter().map(Cell::get).collect())
    }

    pub fn write_bytes(&self, addr: DeviceAddress, data: &[u8]) -> Result<(), MemError> {
        let len = u32::try_from(data.len()).map_err(|_| MemError::InvalidAddress(addr))?;
        for (cell, b) in self.resolve(addr, len)?.iter().zip(data) {
            cell.set(*b);
        }
        Ok(())
    }

    pub fn read_u32(&self, addr: DeviceAddress) -> Result<u32, MemError> {
        let cells = self.resolve(addr, 4)?;
        Ok(u32::from_le_bytes([
            cells[0].get(),
            cells[1].get(),
            cells[2].get(),
            cells[3].get(),
        ]))
    }

    pub fn write_u32(&self, addr: DeviceAddress, value: u32) -> Result<(), MemError> {
        self.write_bytes(addr, &value.to_le_bytes())
    }

    /// Copies `len` bytes between two valid ranges. Overlapping ranges
    /// behave like `memmove`.
    pub fn copy(&self, src: DeviceAddress, dst: DeviceAddress, len: u32) -> Result<(), MemError> {
        let bytes = self.read_bytes(src, len)?;
        self.write_bytes(dst, &bytes)
    }

    /// Host-side window aliasing the backing bytes of `[addr, addr + len)`.
    pub fn host_view(&self, addr: DeviceAddress, len: u32) -> Result<HostView<'_>, MemError> {
        Ok(HostView {
            base: addr,
            cells: self.resolve(addr, len)?,
        })
    }

    /// Local memory of one logical core.
    pub fn core_bytes(&self, row: u32, col: u32) -> Vec<u8> {
        self.local[(row * self.geom.cols + col) as usize]
            .iter()
            .map(Cell::get)
            .collect()
    }

    /// SHA-256 over every core-local memory followed by shared memory.
    pub fn state_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut buf = Vec::with_capacity(self.geom.local_mem_bytes as usize);
        for store in self.local.iter().chain(std::iter::once(&self.shared)) {
            buf.clear();
            buf.extend(store.iter().map(Cell::get));
            h.update(&buf);
        }
        h.finalize().into()
    }
}

/// A host-side window onto simulated memory.
#[derive(Clone, Copy)]
pub struct HostView<'a> {
    base: DeviceAddress,
    cells: &'a [Cell<u8>],
}

impl<'a> HostView<'a> {
    pub fn base(&self) -> DeviceAddress {
        self.base
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, i: usize) -> u8 {
        self.cells[i].get()
    }

    pub fn set(&self, i: usize, v: u8) {
        self.cells[i].set(v)
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.cells.iter().map(Cell::get).collect()
    }

    pub fn write_at(&self, offset: usize, data: &[u8]) {
        for (cell, b) in self.cells[offset..offset + data.len()].iter().zip(data) {
            cell.set(*b);
        }
    }

    pub fn read_u32(&self, offset: usize) -> u32 {
        u32::from_le_bytes(std::array::from_fn(|i| self.cells[offset + i].get()))
    }

    pub fn write_u32(&self, offset: usize, v: u32) {
        self.write_at(offset, &v.to_le_bytes())
    }
}

pub fn hex_digest(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(rows: u32, cols: u32) -> MapGeometry {
        MapGeometry {
            rows,
            cols,
            origin_row: 1,
            origin_col: 0,
            local_mem_bytes: DEFAULT_LOCAL_MEM_BYTES,
            shared_size: 1 << 20,
        }
    }

    fn map4() -> MemoryMap {
        MemoryMap::new(geom(4, 4)).unwrap()
    }

    #[test]
    fn zero_is_invalid() {
        assert_eq!(map4().decode(DeviceAddress(0)), Region::Invalid);
    }

    #[test]
    fn shared_base_decodes_to_offset_zero() {
        let m = map4();
        assert_eq!(m.decode(DeviceAddress(SHARED_BASE)), Region::SharedGlobal { offset: 0 });
    }

    #[test]
    fn encode_decode_exhaustive_4x4() {
        let m = map4();
        for row in 0..4 {
            for col in 0..4 {
                for offset in [0, 0x100, DEFAULT_LOCAL_MEM_BYTES - 1] {
                    let a = m.encode(row, col, offset).unwrap();
                    assert_eq!(m.decode(a), Region::CoreLocal { row, col, offset });
                }
            }
        }
        let a = m.encode(2, 3, 0x100).unwrap();
        assert_eq!(m.decode(a), Region::CoreLocal { row: 2, col: 3, offset: 0x100 });
    }

    #[test]
    fn offsets_past_local_memory_are_invalid() {
        let m = map4();
        let a = m.encode(0, 0, 0).unwrap().add(DEFAULT_LOCAL_MEM_BYTES);
        assert_eq!(m.decode(a), Region::Invalid);
        assert!(m.encode(0, 0, DEFAULT_LOCAL_MEM_BYTES).is_err());
        assert!(m.encode(4, 0, 0).is_err());
    }

    #[test]
    fn rejects_reserved_origin_and_shared_overlap() {
        let mut g = geom(2, 2);
        g.origin_row = 0;
        assert!(MemoryMap::new(g).is_err());
        // 64 columns at row id 35 collide with the shared window.
        let g = MapGeometry {
            rows: 36,
            cols: 64,
            origin_row: 0,
            origin_col: 0,
            local_mem_bytes: 32768,
            shared_size: DEFAULT_SHARED_SIZE,
        };
        assert!(matches!(g.validate(), Err(MemError::InvalidMap(_))));
        // 32x32 at the default origin is fine.
        assert!(geom(32, 32).validate().is_ok());
    }

    #[test]
    fn read_write_basics() {
        let m = map4();
        let a = m.encode(1, 2, 40).unwrap();
        assert!(m.read_bytes(a, 0).unwrap().is_empty());
        m.write_bytes(a, &[]).unwrap();
        m.write_bytes(a, &[1, 2, 3]).unwrap();
        assert_eq!(m.read_bytes(a, 3).unwrap(), vec![1, 2, 3]);
        m.write_bytes(a.add(1), &[9, 9]).unwrap();
        assert_eq!(m.read_bytes(a, 3).unwrap(), vec![1, 9, 9]);
    }

    #[test]
    fn one_past_end_of_shared_is_invalid() {
        let m = map4();
        let end = m.shared(1 << 20);
        assert_eq!(m.read_bytes(end, 1), Err(MemError::InvalidAddress(end)));
        let last = m.shared((1 << 20) - 2);
        assert!(matches!(m.read_bytes(last, 4), Err(MemError::InvalidAddress(_))));
    }

    #[test]
    fn straddle_between_adjacent_regions() {
        // With a full 1 MB local memory, consecutive core windows touch.
        let g = MapGeometry {
            local_mem_bytes: CORE_WINDOW,
            ..geom(1, 2)
        };
        let m = MemoryMap::new(g).unwrap();
        let a = m.encode(0, 0, CORE_WINDOW - 2).unwrap();
        assert_eq!(
            m.read_bytes(a, 4),
            Err(MemError::RangeStraddle { addr: a, len: 4 })
        );
    }

    #[test]
    fn host_views_alias_storage() {
        let m = map4();
        let a = m.shared(64);
        let v1 = m.host_view(a, 16).unwrap();
        let v2 = m.host_view(a, 16).unwrap();
        v1.write_u32(0, 0xdead_beef);
        assert_eq!(v2.read_u32(0), 0xdead_beef);
        v2.set(4, 7);
        assert_eq!(v1.get(4), 7);
        assert_eq!(m.read_u32(a).unwrap(), 0xdead_beef);
        assert_eq!(m.read_bytes(a.add(4), 1).unwrap(), vec![7]);
    }

    #[test]
    fn pointer_to_pointer_through_shared_memory() {
        let m = map4();
        let payload = m.shared(0x400);
        let inner = m.shared(0x200);
        let outer = m.shared(0x100);
        m.write_bytes(payload, b"indirect").unwrap();
        m.write_u32(inner, payload.0).unwrap();
        m.write_u32(outer, inner.0).unwrap();
        // host side follows through a view
        let view = m.host_view(outer, 4).unwrap();
        let p1 = DeviceAddress(view.read_u32(0));
        let p2 = DeviceAddress(m.host_view(p1, 4).unwrap().read_u32(0));
        let host = m.host_view(p2, 8).unwrap().to_vec();
        // core side follows with plain reads
        let c1 = DeviceAddress(m.read_u32(outer).unwrap());
        let c2 = DeviceAddress(m.read_u32(c1).unwrap());
        assert_eq!(host, m.read_bytes(c2, 8).unwrap());
        assert_eq!(host, b"indirect");
    }

    proptest! {
        #[test]
        fn round_trip_any_core(row in 0u32..16, col in 0u32..16, offset in 0u32..DEFAULT_LOCAL_MEM_BYTES) {
            let g = geom(16, 16);
            let a = g.encode(row, col, offset).unwrap();
            prop_assert_eq!(g.decode(a), Region::CoreLocal { row, col, offset });
        }

        #[test]
        fn read_after_write(offset in 0u32..(DEFAULT_LOCAL_MEM_BYTES - 64), data in proptest::collection::vec(any::<u8>(), 0..64), shared in any::<bool>()) {
            let m = map4();
            let a = if shared { m.shared(offset) } else { m.encode(3, 1, offset).unwrap() };
            m.write_bytes(a, &data).unwrap();
            prop_assert_eq!(m.read_bytes(a, data.len() as u32).unwrap(), data);
        }
    }
}
