//! Program layout: manifest in, segmented image out.
//!
//! Local memory, low to high: syscore, usrcore (launch stub, local function
//! bodies, DC jump table, host-call jump table), free space, DC region,
//! stack. Shared memory: sysmem at offset 0, then usrmem (global and
//! dynamic function bodies, then the DC side table). Segment bases are
//! 8-byte aligned; function bodies are packed so that segment sizes are
//! exact sums of their parts.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hostcall::HC_ERROR;
use crate::kernel_vm::{KernelBlock, KernelOp, NUM_REGS};
use crate::memspace::{DeviceAddress, SHARED_BASE};
use crate::mesh::MeshConfig;

pub const DC_ENTRY_BYTES: u32 = 24;
pub const HC_ENTRY_BYTES: u32 = 8;
/// Fixed host-call service code carried once in syscore.
pub const HC_SERVICE_BYTES: u32 = 128;
pub const SEGMENT_ALIGN: u32 = 8;

pub const CODE_MAGIC: u32 = u32::from_le_bytes(*b"KRNL");
pub const STUB_MAGIC: u32 = u32::from_le_bytes(*b"STUB");
/// Second word of every DC entry.
pub const DC_MOV_MARKER: u32 = 0xE00C_0000;
/// Fourth word of every DC entry.
pub const DC_BRANCH_MARKER: u32 = 0xE800_0000;
/// Syscore offset of the DC loader routine.
pub const DC_LOADER_OFFSET: u32 = 0x40;

const IMAGE_MAGIC: &[u8; 4] = b"MRT1";

pub fn align8(x: u32) -> u32 {
    x.div_ceil(SEGMENT_ALIGN) * SEGMENT_ALIGN
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("local segments overflow by {0} bytes")]
    LocalOverflow(u32),
    #[error("shared segments overflow by {0} bytes")]
    SharedOverflow(u32),
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("entry function {0} is not in the manifest")]
    UnknownEntry(u32),
    #[error("entry function {0} must be placed in usrcore")]
    EntryNotLocal(u32),
    #[error("function {0} is not in the manifest")]
    UnknownFunction(u32),
    #[error("host call {0} is used but not listed in hostcalls_used")]
    UndeclaredHostCall(u32),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("malformed image at byte {offset}: {reason}")]
    MalformedImage { offset: usize, reason: String },
}

type LResult<T> = Result<T, LayoutError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    UsrcoreCall,
    UsrmemCall,
    DynamicCall,
}

fn usrcore_call() -> Placement {
    Placement::UsrcoreCall
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionRecord {
    pub id: u32,
    pub name: String,
    pub size_bytes: u32,
    /// `None` takes the manifest's default placement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    pub body: KernelBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramManifest {
    pub functions: Vec<FunctionRecord>,
    /// Kernel entry. Without one the image holds only the launch stub,
    /// which returns 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<u32>,
    #[serde(default = "usrcore_call")]
    pub default_placement: Placement,
    #[serde(default)]
    pub hostcalls_used: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dc_region_bytes: Option<u32>,
}

impl Default for ProgramManifest {
    fn default() -> Self {
        ProgramManifest {
            functions: Vec::new(),
            entry: None,
            default_placement: Placement::UsrcoreCall,
            hostcalls_used: Vec::new(),
            dc_region_bytes: None,
        }
    }
}

impl ProgramManifest {
    pub fn placement_of(&self, f: &FunctionRecord) -> Placement {
        f.placement.unwrap_or(self.default_placement)
    }
}

/// Sizes of the runtime's own parts of the layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeParams {
    /// Syscore code excluding the host-call service block.
    pub syscore_code_bytes: u32,
    pub sysmem_bytes: u32,
    pub stack_bytes: u32,
    pub launch_stub_bytes: u32,
}

impl Default for RuntimeParams {
    fn default() -> Self {
        RuntimeParams {
            syscore_code_bytes: 1920,
            sysmem_bytes: 4096,
            stack_bytes: 1024,
            launch_stub_bytes: 64,
        }
    }
}

impl RuntimeParams {
    pub fn syscore_bytes(&self) -> u32 {
        align8(self.syscore_code_bytes + HC_SERVICE_BYTES)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Syscore,
    Sysmem,
    Usrcore,
    Usrmem,
    DcRegion,
    Stack,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 6] = [
        SegmentKind::Syscore,
        SegmentKind::Sysmem,
        SegmentKind::Usrcore,
        SegmentKind::Usrmem,
        SegmentKind::DcRegion,
        SegmentKind::Stack,
    ];

    pub fn is_local(self) -> bool {
        !matches!(self, SegmentKind::Sysmem | SegmentKind::Usrmem)
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        SegmentKind::ALL.get(c as usize).copied()
    }
}

/// One segment. `offset` is a core-local offset for local kinds and an
/// offset into shared memory otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: u32,
    pub size: u32,
    /// Bytes the loader writes; empty for reserved regions.
    #[serde(skip)]
    pub payload: Vec<u8>,
}

impl Segment {
    pub fn end(&self) -> u32 {
        self.offset + self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeLocation {
    /// Core-local offset inside usrcore.
    Local { offset: u32 },
    /// Body in usrmem, executed in place.
    Global { addr: DeviceAddress },
    /// Body in usrmem, copied into the DC region on first call.
    Dynamic { index: u32, home: DeviceAddress },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedFunction {
    pub id: u32,
    pub name: String,
    pub size_bytes: u32,
    pub placement: Placement,
    pub location: CodeLocation,
    pub body: KernelBlock,
}

/// Where a symbol lives. Local symbols resolve per core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolAddr {
    Local { offset: u32 },
    Global(DeviceAddress),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcSideRecord {
    pub func: u32,
    pub addr: DeviceAddress,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramImage {
    pub params: RuntimeParams,
    pub local_mem_bytes: u32,
    pub shared_size: u32,
    pub entry: Option<u32>,
    pub default_placement: Placement,
    pub dc_region_override: Option<u32>,
    /// Syscore, Sysmem, Usrcore, Usrmem, DcRegion, Stack, in that order.
    pub segments: Vec<Segment>,
    pub functions: Vec<PlacedFunction>,
    pub stub_offset: u32,
    /// Function id per DC entry, in table order.
    pub dc_table: Vec<u32>,
    pub dc_table_offset: u32,
    pub dc_side_table: Vec<DcSideRecord>,
    /// Shared offset of the side table.
    pub dc_side_offset: u32,
    /// Call number per host-call entry, in table order.
    pub hc_table: Vec<u32>,
    pub hc_table_offset: u32,
    pub symbols: BTreeMap<String, SymbolAddr>,
}

impl ProgramImage {
    pub fn segment(&self, kind: SegmentKind) -> &Segment {
        &self.segments[kind as usize]
    }

    pub fn usrcore_size(&self) -> u32 {
        self.segment(SegmentKind::Usrcore).size
    }

    pub fn function(&self, id: u32) -> Option<&PlacedFunction> {
        self.functions.iter().find(|f| f.id == id)
    }

    pub fn stack_bytes(&self) -> u32 {
        self.segment(SegmentKind::Stack).size
    }

    /// First local offset not claimed by syscore or usrcore.
    pub fn free_offset(&self) -> u32 {
        align8(self.segment(SegmentKind::Usrcore).end())
    }

    /// Local bytes between usrcore and the DC region.
    pub fn free_local_bytes(&self) -> u32 {
        self.segment(SegmentKind::DcRegion)
            .offset
            .saturating_sub(self.free_offset())
    }

    pub fn dc_index(&self, func: u32) -> Option<usize> {
        self.dc_table.iter().position(|&f| f == func)
    }

    /// The manifest this image was built from, with every placement made
    /// explicit.
    pub fn to_manifest(&self) -> ProgramManifest {
        ProgramManifest {
            functions: self
                .functions
                .iter()
                .map(|f| FunctionRecord {
                    id: f.id,
                    name: f.name.clone(),
                    size_bytes: f.size_bytes,
                    placement: Some(f.placement),
                    body: f.body.clone(),
                })
                .collect(),
            entry: self.entry,
            default_placement: self.default_placement,
            hostcalls_used: self.hc_table.clone(),
            dc_region_bytes: self.dc_region_override,
        }
    }

    pub fn count(&self, placement: Placement) -> usize {
        self.functions.iter().filter(|f| f.placement == placement).count()
    }
}

/// Header written at the start of every function body: magic, id, size,
/// truncated to the body size.
pub fn code_header(id: u32, size: u32) -> Vec<u8> {
    let mut h = Vec::with_capacity(12);
    h.extend_from_slice(&CODE_MAGIC.to_le_bytes());
    h.extend_from_slice(&id.to_le_bytes());
    h.extend_from_slice(&size.to_le_bytes());
    h.truncate(size as usize);
    h
}

fn filler(seed_text: &[u8], len: usize) -> Vec<u8> {
    let seed: [u8; 32] = Sha256::digest(seed_text).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

/// Deterministic stand-in machine code for one function.
pub fn function_code(id: u32, name: &str, size: u32) -> Vec<u8> {
    let mut code = code_header(id, size);
    let mut seed = name.as_bytes().to_vec();
    seed.extend_from_slice(&id.to_le_bytes());
    let rest = size as usize - code.len();
    code.extend(filler(&seed, rest));
    code
}

fn stub_code(entry: Option<u32>, size: u32) -> Vec<u8> {
    let mut s = Vec::with_capacity(size as usize);
    s.extend_from_slice(&STUB_MAGIC.to_le_bytes());
    s.extend_from_slice(&entry.unwrap_or(u32::MAX).to_le_bytes());
    s.resize(size as usize, 0);
    s
}

fn syscore_code(params: &RuntimeParams) -> Vec<u8> {
    let size = params.syscore_bytes();
    let mut s = b"SYSC".to_vec();
    s.extend(filler(format!("syscore/{size}").as_bytes(), size as usize));
    s.truncate(size as usize);
    s
}

fn sysmem_data(params: &RuntimeParams) -> Vec<u8> {
    let mut s = b"SYSM".to_vec();
    s.resize(params.sysmem_bytes as usize, 0);
    s.truncate(params.sysmem_bytes as usize);
    s
}

/// Initial bytes of DC entry `index`: unresolved, routed to the DC loader.
pub fn dc_entry_bytes(index: u32, func: u32) -> [u8; 24] {
    let words = [0, DC_MOV_MARKER, index, DC_BRANCH_MARKER, DC_LOADER_OFFSET, func];
    let mut out = [0u8; 24];
    for (i, w) in words.iter().enumerate() {
        out[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
    }
    out
}

fn validate(manifest: &ProgramManifest, params: &RuntimeParams) -> LResult<()> {
    let bad = |m: String| Err(LayoutError::InvalidManifest(m));
    let mut ids = BTreeSet::new();
    let mut names = BTreeSet::new();
    for f in &manifest.functions {
        if !ids.insert(f.id) {
            return bad(format!("duplicate function id {}", f.id));
        }
        if f.name.is_empty() || f.name.starts_with("__") {
            return bad(format!("function {} has a reserved or empty name", f.id));
        }
        if !names.insert(f.name.as_str()) {
            return Err(LayoutError::DuplicateSymbol(f.name.clone()));
        }
        if f.size_bytes == 0 {
            return bad(format!("function {} has size 0", f.id));
        }
        if !f.body.ends_with_return() {
            return bad(format!("body of function {} does not end with return", f.id));
        }
        if f.body.stack_bytes > params.stack_bytes {
            return bad(format!(
                "function {} declares {} stack bytes, stack holds {}",
                f.id, f.body.stack_bytes, params.stack_bytes
            ));
        }
    }
    let mut hcs = BTreeSet::new();
    for &n in &manifest.hostcalls_used {
        if n == HC_ERROR {
            return bad(format!("host call number {n} is reserved as the error word"));
        }
        if !hcs.insert(n) {
            return bad(format!("host call {n} listed twice"));
        }
    }
    for f in &manifest.functions {
        for op in f.body.walk() {
            match op {
                KernelOp::CallLocal { func } | KernelOp::CallDynamic { func } if !ids.contains(func) => {
                    return Err(LayoutError::UnknownFunction(*func));
                }
                KernelOp::HostCall { number, args, .. } => {
                    if !hcs.contains(number) {
                        return Err(LayoutError::UndeclaredHostCall(*number));
                    }
                    if args.len() > 4 {
                        return bad(format!("host call {number} passes more than 4 words"));
                    }
                }
                KernelOp::Compute { us } if !(us.is_finite() && *us >= 0.0) => {
                    return bad(format!("function {} has compute cost {us}", f.id));
                }
                _ => {}
            }
            let reg = match op {
                KernelOp::Read { reg: Some(r), .. }
                | KernelOp::HostCall { reg: Some(r), .. }
                | KernelOp::Set { reg: r, .. }
                | KernelOp::Loop { reg: r, .. } => Some(*r),
                _ => None,
            };
            if let Some(r) = reg.filter(|&r| r as usize >= NUM_REGS) {
                return bad(format!("function {} names register r{r}", f.id));
            }
        }
    }
    if let Some(e) = manifest.entry {
        let f = manifest
            .functions
            .iter()
            .find(|f| f.id == e)
            .ok_or(LayoutError::UnknownEntry(e))?;
        if manifest.placement_of(f) != Placement::UsrcoreCall {
            return Err(LayoutError::EntryNotLocal(e));
        }
    }
    Ok(())
}

/// Assigns addresses and generates payloads and jump tables.
pub fn build_image(
    manifest: &ProgramManifest,
    params: &RuntimeParams,
    cfg: &MeshConfig,
) -> LResult<ProgramImage> {
    validate(manifest, params)?;
    let local = cfg.local_mem_bytes;
    let shared_size = cfg.shared_size;
    let dynamics: Vec<&FunctionRecord> = manifest
        .functions
        .iter()
        .filter(|f| manifest.placement_of(f) == Placement::DynamicCall)
        .collect();

    // local, top down: stack, then DC region
    let syscore_size = params.syscore_bytes();
    let stack_offset = local
        .checked_sub(params.stack_bytes)
        .map(|o| o / SEGMENT_ALIGN * SEGMENT_ALIGN)
        .ok_or_else(|| LayoutError::LocalOverflow(params.stack_bytes - local))?;
    let dc_size = manifest
        .dc_region_bytes
        .unwrap_or_else(|| dynamics.iter().map(|f| f.size_bytes).max().unwrap_or(0));
    let dc_offset = stack_offset
        .checked_sub(dc_size)
        .map(|o| o / SEGMENT_ALIGN * SEGMENT_ALIGN)
        .ok_or_else(|| LayoutError::LocalOverflow(dc_size - stack_offset))?;

    // local, bottom up: syscore, usrcore
    let usrcore_offset = syscore_size;
    let mut usrcore = stub_code(manifest.entry, params.launch_stub_bytes);
    let mut locations = BTreeMap::new();
    for f in &manifest.functions {
        if manifest.placement_of(f) == Placement::UsrcoreCall {
            locations.insert(
                f.id,
                CodeLocation::Local {
                    offset: usrcore_offset + usrcore.len() as u32,
                },
            );
            usrcore.extend(function_code(f.id, &f.name, f.size_bytes));
        }
    }
    let dc_table_offset = usrcore_offset + usrcore.len() as u32;
    let dc_table: Vec<u32> = dynamics.iter().map(|f| f.id).collect();
    for (i, &func) in dc_table.iter().enumerate() {
        usrcore.extend_from_slice(&dc_entry_bytes(i as u32, func));
    }
    let hc_table_offset = usrcore_offset + usrcore.len() as u32;
    let hc_table = manifest.hostcalls_used.clone();
    for &n in &hc_table {
        usrcore.extend_from_slice(&n.to_le_bytes());
        usrcore.extend_from_slice(&params.syscore_code_bytes.to_le_bytes());
    }
    let usrcore_end = usrcore_offset as u64 + usrcore.len() as u64;
    if usrcore_end > dc_offset as u64 {
        return Err(LayoutError::LocalOverflow((usrcore_end - dc_offset as u64) as u32));
    }

    // shared: sysmem, then usrmem
    let sysmem_size = params.sysmem_bytes;
    let usrmem_offset = align8(sysmem_size);
    let mut usrmem = Vec::new();
    let mut side = Vec::new();
    for f in &manifest.functions {
        let p = manifest.placement_of(f);
        if p == Placement::UsrcoreCall {
            continue;
        }
        let home = DeviceAddress(SHARED_BASE.wrapping_add(usrmem_offset + usrmem.len() as u32));
        usrmem.extend(function_code(f.id, &f.name, f.size_bytes));
        let loc = if p == Placement::DynamicCall {
            let index = dc_table.iter().position(|&d| d == f.id).unwrap() as u32;
            side.push(DcSideRecord {
                func: f.id,
                addr: home,
                size: f.size_bytes,
            });
            CodeLocation::Dynamic { index, home }
        } else {
            CodeLocation::Global { addr: home }
        };
        locations.insert(f.id, loc);
    }
    usrmem.resize(align8(usrmem.len() as u32) as usize, 0);
    let dc_side_offset = usrmem_offset + usrmem.len() as u32;
    for r in &side {
        usrmem.extend_from_slice(&r.addr.value().to_le_bytes());
        usrmem.extend_from_slice(&r.size.to_le_bytes());
    }
    let usrmem_end = usrmem_offset as u64 + usrmem.len() as u64;
    if usrmem_end > shared_size as u64 {
        return Err(LayoutError::SharedOverflow((usrmem_end - shared_size as u64) as u32));
    }

    let mut symbols = BTreeMap::new();
    let mut add = |name: &str, addr: SymbolAddr| -> LResult<()> {
        if symbols.insert(name.to_string(), addr).is_some() {
            return Err(LayoutError::DuplicateSymbol(name.to_string()));
        }
        Ok(())
    };
    add("__launch_stub", SymbolAddr::Local { offset: usrcore_offset })?;
    add("__dc_table", SymbolAddr::Local { offset: dc_table_offset })?;
    add("__hc_table", SymbolAddr::Local { offset: hc_table_offset })?;
    add("__dc_region", SymbolAddr::Local { offset: dc_offset })?;
    add(
        "__dc_side_table",
        SymbolAddr::Global(DeviceAddress(SHARED_BASE.wrapping_add(dc_side_offset))),
    )?;
    let mut functions = Vec::with_capacity(manifest.functions.len());
    for f in &manifest.functions {
        let location = locations[&f.id];
        let sym = match location {
            CodeLocation::Local { offset } => SymbolAddr::Local { offset },
            CodeLocation::Global { addr } | CodeLocation::Dynamic { home: addr, .. } => {
                SymbolAddr::Global(addr)
            }
        };
        add(&f.name, sym)?;
        functions.push(PlacedFunction {
            id: f.id,
            name: f.name.clone(),
            size_bytes: f.size_bytes,
            placement: manifest.placement_of(f),
            location,
            body: f.body.clone(),
        });
    }

    let usrcore_size = usrcore.len() as u32;
    let usrmem_size = usrmem.len() as u32;
    let segments = vec![
        Segment {
            kind: SegmentKind::Syscore,
            offset: 0,
            size: syscore_size,
            payload: syscore_code(params),
        },
        Segment {
            kind: SegmentKind::Sysmem,
            offset: 0,
            size: sysmem_size,
            payload: sysmem_data(params),
        },
        Segment {
            kind: SegmentKind::Usrcore,
            offset: usrcore_offset,
            size: usrcore_size,
            payload: usrcore,
        },
        Segment {
            kind: SegmentKind::Usrmem,
            offset: usrmem_offset,
            size: usrmem_size,
            payload: usrmem,
        },
        Segment {
            kind: SegmentKind::DcRegion,
            offset: dc_offset,
            size: dc_size,
            payload: Vec::new(),
        },
        Segment {
            kind: SegmentKind::Stack,
            offset: stack_offset,
            size: params.stack_bytes,
            payload: Vec::new(),
        },
    ];
    Ok(ProgramImage {
        params: params.clone(),
        local_mem_bytes: local,
        shared_size,
        entry: manifest.entry,
        default_placement: manifest.default_placement,
        dc_region_override: manifest.dc_region_bytes,
        segments,
        functions,
        stub_offset: usrcore_offset,
        dc_table,
        dc_table_offset,
        dc_side_table: side,
        dc_side_offset,
        hc_table,
        hc_table_offset,
        symbols,
    })
}

/// Rebuilds `image` with some functions moved to new placements.
pub fn replan(image: &ProgramImage, moves: &[(u32, Placement)]) -> LResult<ProgramImage> {
    let mut manifest = image.to_manifest();
    for &(id, p) in moves {
        let f = manifest
            .functions
            .iter_mut()
            .find(|f| f.id == id)
            .ok_or(LayoutError::UnknownFunction(id))?;
        f.placement = Some(p);
    }
    let cfg = MeshConfig {
        local_mem_bytes: image.local_mem_bytes,
        shared_size: image.shared_size,
        ..MeshConfig::default()
    };
    build_image(&manifest, &image.params, &cfg)
}

/// Local memory use by segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub local_mem_bytes: u32,
    pub syscore_bytes: u32,
    pub usrcore_bytes: u32,
    pub dc_region_bytes: u32,
    pub stack_bytes: u32,
    pub occupied_bytes: u32,
    pub free_bytes: u32,
    pub syscore_pct: f64,
    pub usrcore_pct: f64,
    pub dc_region_pct: f64,
    pub stack_pct: f64,
    pub occupied_pct: f64,
    pub free_pct: f64,
}

impl Occupancy {
    pub fn from_bytes(local_mem_bytes: u32, syscore: u32, usrcore: u32, dc_region: u32, stack: u32) -> Self {
        let pct = |b: u32| {
            if local_mem_bytes == 0 {
                0.0
            } else {
                100.0 * b as f64 / local_mem_bytes as f64
            }
        };
        let occupied = syscore + usrcore + dc_region + stack;
        let free = local_mem_bytes.saturating_sub(occupied);
        Occupancy {
            local_mem_bytes,
            syscore_bytes: syscore,
            usrcore_bytes: usrcore,
            dc_region_bytes: dc_region,
            stack_bytes: stack,
            occupied_bytes: occupied,
            free_bytes: free,
            syscore_pct: pct(syscore),
            usrcore_pct: pct(usrcore),
            dc_region_pct: pct(dc_region),
            stack_pct: pct(stack),
            occupied_pct: pct(occupied),
            free_pct: pct(free),
        }
    }
}

pub fn occupancy(image: &ProgramImage) -> Occupancy {
    let s = |k| image.segment(k).size;
    Occupancy::from_bytes(
        image.local_mem_bytes,
        s(SegmentKind::Syscore),
        s(SegmentKind::Usrcore),
        s(SegmentKind::DcRegion),
        s(SegmentKind::Stack),
    )
}

// ---- image file ----

#[derive(Serialize, Deserialize)]
struct FileHeader {
    params: RuntimeParams,
    local_mem_bytes: u32,
    shared_size: u32,
    entry: Option<u32>,
    default_placement: Placement,
    dc_region_override: Option<u32>,
    stub_offset: u32,
    dc_table_offset: u32,
    dc_side_offset: u32,
    hc_table_offset: u32,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(tag);
    put_u32(out, body.len() as u32);
    out.extend_from_slice(body);
}

fn u32_list(v: impl IntoIterator<Item = u32>) -> Vec<u8> {
    let v: Vec<u32> = v.into_iter().collect();
    let mut out = Vec::with_capacity(4 + 4 * v.len());
    put_u32(&mut out, v.len() as u32);
    for x in v {
        put_u32(&mut out, x);
    }
    out
}

/// Serializes an image: "MRT1", a section count, then tagged sections
/// `[tag:4][len:u32][body]`. All integers are little-endian.
pub fn emit_image_file(image: &ProgramImage) -> Vec<u8> {
    let header = FileHeader {
        params: image.params.clone(),
        local_mem_bytes: image.local_mem_bytes,
        shared_size: image.shared_size,
        entry: image.entry,
        default_placement: image.default_placement,
        dc_region_override: image.dc_region_override,
        stub_offset: image.stub_offset,
        dc_table_offset: image.dc_table_offset,
        dc_side_offset: image.dc_side_offset,
        hc_table_offset: image.hc_table_offset,
    };
    let mut segs = Vec::new();
    put_u32(&mut segs, image.segments.len() as u32);
    for s in &image.segments {
        segs.push(s.kind.code());
        put_u32(&mut segs, s.offset);
        put_u32(&mut segs, s.size);
        put_u32(&mut segs, s.payload.len() as u32);
        segs.extend_from_slice(&s.payload);
    }
    let mut side = Vec::new();
    put_u32(&mut side, image.dc_side_table.len() as u32);
    for r in &image.dc_side_table {
        put_u32(&mut side, r.func);
        put_u32(&mut side, r.addr.value());
        put_u32(&mut side, r.size);
    }
    let sections: [(&[u8; 4], Vec<u8>); 7] = [
        (b"PARM", json(&header)),
        (b"SEGS", segs),
        (b"FUNC", json(&image.functions)),
        (b"DCTB", u32_list(image.dc_table.iter().copied())),
        (b"DCST", side),
        (b"HCTB", u32_list(image.hc_table.iter().copied())),
        (b"SYMS", json(&image.symbols)),
    ];
    let mut out = IMAGE_MAGIC.to_vec();
    put_u32(&mut out, sections.len() as u32);
    for (tag, body) in &sections {
        put_section(&mut out, tag, body);
    }
    out
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("image metadata serializes")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        Reader { buf, pos: 0, base }
    }

    fn err<T>(&self, reason: impl Into<String>) -> LResult<T> {
        Err(LayoutError::MalformedImage {
            offset: self.base + self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> LResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> LResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> LResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn finish(&self, what: &str) -> LResult<()> {
        if self.pos != self.buf.len() {
            return self.err(format!("{} trailing bytes in {what}", self.buf.len() - self.pos));
        }
        Ok(())
    }

    fn u32_list(&mut self, what: &str) -> LResult<Vec<u32>> {
        let n = self.u32(what)? as usize;
        if n > (self.buf.len() - self.pos) / 4 {
            return self.err(format!("{what} count {n} exceeds section"));
        }
        (0..n).map(|_| self.u32(what)).collect()
    }
}

/// Tag, body offset and body length of every section in an image file.
pub fn image_file_sections(bytes: &[u8]) -> LResult<Vec<([u8; 4], usize, usize)>> {
    let mut r = Reader::new(bytes, 0);
    if r.take(4, "magic")? != IMAGE_MAGIC {
        return Err(LayoutError::MalformedImage {
            offset: 0,
            reason: "bad magic, expected MRT1".into(),
        });
    }
    let count = r.u32("section count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4, "section tag")?.try_into().unwrap();
        let len = r.u32("section length")? as usize;
        let start = r.pos;
        r.take(len, "section body")?;
        out.push((tag, start, len));
    }
    r.finish("file")?;
    Ok(out)
}

pub fn parse_image_file(bytes: &[u8]) -> LResult<ProgramImage> {
    let sections = image_file_sections(bytes)?;
    let find = |tag: &[u8; 4]| -> LResult<Reader<'_>> {
        sections
            .iter()
            .find(|(t, _, _)| t == tag)
            .map(|&(_, start, len)| Reader::new(&bytes[start..start + len], start))
            .ok_or_else(|| LayoutError::MalformedImage {
                offset: bytes.len(),
                reason: format!("missing section {}", String::from_utf8_lossy(tag)),
            })
    };
    fn from_json<T: serde::de::DeserializeOwned>(r: Reader<'_>, what: &str) -> LResult<T> {
        serde_json::from_slice(r.buf).map_err(|e| LayoutError::MalformedImage {
            offset: r.base,
            reason: format!("{what}: {e}"),
        })
    }

    let header: FileHeader = from_json(find(b"PARM")?, "header")?;

    let mut r = find(b"SEGS")?;
    let n = r.u32("segment count")?;
    if n as usize != SegmentKind::ALL.len() {
        return r.err(format!("expected 6 segments, found {n}"));
    }
    let mut segments = Vec::new();
    for want in SegmentKind::ALL {
        let code = r.u8("segment kind")?;
        match SegmentKind::from_code(code) {
            Some(k) if k == want => {}
            _ => return r.err(format!("segment kind {code} out of order")),
        }
        let offset = r.u32("segment offset")?;
        let size = r.u32("segment size")?;
        let plen = r.u32("payload length")? as usize;
        let payload = r.take(plen, "segment payload")?.to_vec();
        segments.push(Segment {
            kind: want,
            offset,
            size,
            payload,
        });
    }
    r.finish("SEGS")?;

    let functions: Vec<PlacedFunction> = from_json(find(b"FUNC")?, "functions")?;

    let mut r = find(b"DCTB")?;
    let dc_table = r.u32_list("DC table")?;
    r.finish("DCTB")?;

    let mut r = find(b"DCST")?;
    let n = r.u32("side table count")? as usize;
    let mut dc_side_table = Vec::new();
    for _ in 0..n {
        dc_side_table.push(DcSideRecord {
            func: r.u32("side record")?,
            addr: DeviceAddress(r.u32("side record")?),
            size: r.u32("side record")?,
        });
    }
    r.finish("DCST")?;

    let mut r = find(b"HCTB")?;
    let hc_table = r.u32_list("host-call table")?;
    r.finish("HCTB")?;

    let symbols = from_json(find(b"SYMS")?, "symbols")?;

    Ok(ProgramImage {
        params: header.params,
        local_mem_bytes: header.local_mem_bytes,
        shared_size: header.shared_size,
        entry: header.entry,
        default_placement: header.default_placement,
        dc_region_override: header.dc_region_override,
        segments,
        functions,
        stub_offset: header.stub_offset,
        dc_table,
        dc_table_offset: header.dc_table_offset,
        dc_side_table,
        dc_side_offset: header.dc_side_offset,
        hc_table,
        hc_table_offset: header.hc_table_offset,
        symbols,
    })
}
