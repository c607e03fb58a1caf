//! Host calls: a core fills its mailbox, sets the HOSTCALL_REQ bit in its
//! run-state register and spins; the host daemon dispatches the call by
//! number, writes the return word and releases the core.
//!
//! Numbers below 512 are system-like calls, 512 to 1023 are runtime
//! utilities and 1024 and up belong to the user.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::layout::{align8, ProgramImage, SegmentKind};
use crate::memspace::{DeviceAddress, MemError, MemoryMap, Region};
use crate::mesh::{Core, CoreId, CoreState, MeshConfig};

/// High bit of the run-state register, set while a host call is pending.
pub const HOSTCALL_REQ: u32 = 1 << 31;
/// Return word of a failed call.
pub const HC_ERROR: u32 = u32::MAX;

pub const RUNTIME_BASE: u32 = 512;
pub const USER_BASE: u32 = 1024;

pub const SYS_OPEN: u32 = 16;
pub const SYS_WRITE: u32 = 17;
pub const SYS_CLOSE: u32 = 18;
pub const HC_PRINT: u32 = 512;
pub const HC_DMALLOC: u32 = 513;
pub const HC_DFREE: u32 = 514;

pub const ENOENT: u32 = 2;
pub const EBADF: u32 = 9;
pub const ENOMEM: u32 = 12;
pub const EFAULT: u32 = 14;
pub const EINVAL: u32 = 22;
pub const ENOSYS: u32 = 38;

pub const O_WRONLY: u32 = 0o1;
pub const O_RDWR: u32 = 0o2;
pub const O_CREAT: u32 = 0o100;
pub const O_TRUNC: u32 = 0o1000;
pub const O_APPEND: u32 = 0o2000;

const MAX_PATH: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispatchClass {
    System,
    Runtime,
    User,
}

pub fn dispatch_class(number: u32) -> DispatchClass {
    if number < RUNTIME_BASE {
        DispatchClass::System
    } else if number < USER_BASE {
        DispatchClass::Runtime
    } else {
        DispatchClass::User
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MailboxStatus {
    #[default]
    Empty,
    Pending,
    Done,
    Failed(u32),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mailbox {
    pub call_number: u32,
    pub args: [u32; 4],
    pub stack_register_value: DeviceAddress,
    pub return_slot: u32,
    pub status: MailboxStatus,
}

impl Mailbox {
    pub fn is_pending(&self) -> bool {
        self.status == MailboxStatus::Pending
    }

    pub(crate) fn post(&mut self, call_number: u32, args: [u32; 4], sp: DeviceAddress) {
        debug_assert!(!self.is_pending(), "one pending request per core");
        *self = Mailbox {
            call_number,
            args,
            stack_register_value: sp,
            return_slot: 0,
            status: MailboxStatus::Pending,
        };
    }
}

/// Successful handler result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HostReply {
    pub value: u32,
    /// Modeled host-side work, added to the core's wait.
    pub cost_us: f64,
}

impl HostReply {
    pub fn value(value: u32) -> Self {
        HostReply { value, cost_us: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostFault {
    pub code: u32,
    pub message: String,
}

impl HostFault {
    pub fn new(code: u32, message: impl Into<String>) -> Self {
        HostFault {
            code,
            message: message.into(),
        }
    }
}

impl From<MemError> for HostFault {
    fn from(e: MemError) -> Self {
        HostFault::new(EFAULT, e.to_string())
    }
}

/// What a handler sees: the requesting core, its four argument words, the
/// shared address space and the host's services.
pub struct HostCallCtx<'a> {
    pub core: CoreId,
    pub number: u32,
    pub args: [u32; 4],
    pub mem: &'a MemoryMap,
    pub services: &'a mut HostServices,
}

impl HostCallCtx<'_> {
    pub fn read_bytes(&self, addr: u32, len: u32) -> Result<Vec<u8>, HostFault> {
        Ok(self.mem.read_bytes(DeviceAddress(addr), len)?)
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, HostFault> {
        Ok(self.mem.read_u32(DeviceAddress(addr))?)
    }

    /// NUL-terminated string at `addr`.
    pub fn read_cstr(&self, addr: u32) -> Result<String, HostFault> {
        let mut out = Vec::new();
        let mut a = DeviceAddress(addr);
        loop {
            let b = self.mem.read_bytes(a, 1)?[0];
            if b == 0 {
                break;
            }
            out.push(b);
            if out.len() as u32 >= MAX_PATH {
                return Err(HostFault::new(EINVAL, "string too long"));
            }
            a = a.add(1);
        }
        String::from_utf8(out).map_err(|_| HostFault::new(EINVAL, "string is not UTF-8"))
    }
}

pub type Handler = Box<dyn FnMut(&mut HostCallCtx<'_>) -> Result<HostReply, HostFault>>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("call number {0} is reserved; user calls start at 1024")]
    ReservedNumber(u32),
    #[error("call number {0} is already registered")]
    DuplicateNumber(u32),
}

/// Host-side dispatch table, one map per number range.
pub struct CallVector {
    system: BTreeMap<u32, Handler>,
    runtime: BTreeMap<u32, Handler>,
    user: BTreeMap<u32, Handler>,
}

impl fmt::Debug for CallVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallVector")
            .field("system", &self.system.keys().collect::<Vec<_>>())
            .field("runtime", &self.runtime.keys().collect::<Vec<_>>())
            .field("user", &self.user.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Default for CallVector {
    fn default() -> Self {
        CallVector::with_builtins()
    }
}

impl CallVector {
    pub fn empty() -> Self {
        CallVector {
            system: BTreeMap::new(),
            runtime: BTreeMap::new(),
            user: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut v = CallVector::empty();
        v.system.insert(SYS_OPEN, Box::new(sys_open));
        v.system.insert(SYS_WRITE, Box::new(sys_write));
        v.system.insert(SYS_CLOSE, Box::new(sys_close));
        v.runtime.insert(HC_PRINT, Box::new(hc_print));
        v.runtime.insert(HC_DMALLOC, Box::new(hc_dmalloc));
        v.runtime.insert(HC_DFREE, Box::new(hc_dfree));
        v
    }

    pub fn register_user_call(&mut self, number: u32, handler: Handler) -> Result<(), RegisterError> {
        if dispatch_class(number) != DispatchClass::User {
            return Err(RegisterError::ReservedNumber(number));
        }
        if self.user.contains_key(&number) {
            return Err(RegisterError::DuplicateNumber(number));
        }
        self.user.insert(number, handler);
        Ok(())
    }

    pub fn is_registered(&self, number: u32) -> bool {
        self.range(number).contains_key(&number)
    }

    fn range(&self, number: u32) -> &BTreeMap<u32, Handler> {
        match dispatch_class(number) {
            DispatchClass::System => &self.system,
            DispatchClass::Runtime => &self.runtime,
            DispatchClass::User => &self.user,
        }
    }

    fn lookup(&mut self, number: u32) -> Option<&mut Handler> {
        match dispatch_class(number) {
            DispatchClass::System => self.system.get_mut(&number),
            DispatchClass::Runtime => self.runtime.get_mut(&number),
            DispatchClass::User => self.user.get_mut(&number),
        }
    }
}

/// First-fit allocator over the shared memory above usrmem. Offsets are
/// shared-memory offsets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SharedHeap {
    start: u32,
    end: u32,
    live: BTreeMap<u32, u32>,
}

impl SharedHeap {
    pub fn new(start: u32, end: u32) -> Self {
        SharedHeap {
            start: align8(start),
            end,
            live: BTreeMap::new(),
        }
    }

    pub fn range(&self) -> (u32, u32) {
        (self.start, self.end)
    }

    /// Allocates `size` bytes on an 8-byte boundary.
    pub fn alloc(&mut self, size: u32) -> Option<u32> {
        if size == 0 {
            return None;
        }
        let need = size.checked_add(7)? & !7;
        let mut at = self.start;
        for (&off, &len) in &self.live {
            if off.saturating_sub(at) >= need {
                break;
            }
            at = at.max(align8(off + len));
        }
        if at.checked_add(need)? > self.end {
            return None;
        }
        self.live.insert(at, size);
        Some(at)
    }

    /// Releases the allocation starting at `offset`.
    pub fn free(&mut self, offset: u32) -> bool {
        self.live.remove(&offset).is_some()
    }

    /// Live allocations as (offset, size), ascending.
    pub fn live(&self) -> Vec<(u32, u32)> {
        self.live.iter().map(|(&o, &s)| (o, s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrintRecord {
    pub core: CoreId,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct OpenFile {
    path: String,
    pos: usize,
    append: bool,
}

/// Host-side state the built-in calls operate on.
#[derive(Debug, Default)]
pub struct HostServices {
    files: BTreeMap<String, Vec<u8>>,
    open: BTreeMap<u32, OpenFile>,
    next_fd: u32,
    log: Vec<PrintRecord>,
    pub heap: SharedHeap,
}

impl HostServices {
    pub fn files(&self) -> &BTreeMap<String, Vec<u8>> {
        &self.files
    }

    pub fn file(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(|v| v.as_slice())
    }

    pub fn put_file(&mut self, path: &str, bytes: Vec<u8>) {
        self.files.insert(path.to_string(), bytes);
    }

    pub fn log(&self) -> &[PrintRecord] {
        &self.log
    }

    pub fn open_fds(&self) -> Vec<u32> {
        self.open.keys().copied().collect()
    }
}

fn sys_open(ctx: &mut HostCallCtx<'_>) -> Result<HostReply, HostFault> {
    let path = ctx.read_cstr(ctx.args[0])?;
    let flags = ctx.args[1];
    let s = &mut *ctx.services;
    if !s.files.contains_key(&path) {
        if flags & O_CREAT == 0 {
            return Err(HostFault::new(ENOENT, format!("no such file {path}")));
        }
        s.files.insert(path.clone(), Vec::new());
    }
    if flags & O_TRUNC != 0 && flags & (O_WRONLY | O_RDWR) != 0 {
        s.files.get_mut(&path).unwrap().clear();
    }
    let fd = s.next_fd.max(3);
    s.next_fd = fd + 1;
    s.open.insert(
        fd,
        OpenFile {
            path,
            pos: 0,
            append: flags & O_APPEND != 0,
        },
    );
    Ok(HostReply::value(fd))
}

fn sys_write(ctx: &mut HostCallCtx<'_>) -> Result<HostReply, HostFault> {
    let [fd, buf, len, _] = ctx.args;
    if !ctx.services.open.contains_key(&fd) {
        return Err(HostFault::new(EBADF, format!("fd {fd} is not open")));
    }
    let bytes = ctx.read_bytes(buf, len)?;
    let s = &mut *ctx.services;
    let f = s.open.get_mut(&fd).unwrap();
    let data = s.files.get_mut(&f.path).expect("open file exists");
    let at = if f.append { data.len() } else { f.pos };
    if data.len() < at + bytes.len() {
        data.resize(at + bytes.len(), 0);
    }
    data[at..at + bytes.len()].copy_from_slice(&bytes);
    f.pos = at + bytes.len();
    Ok(HostReply::value(len))
}

fn sys_close(ctx: &mut HostCallCtx<'_>) -> Result<HostReply, HostFault> {
    let fd = ctx.args[0];
    match ctx.services.open.remove(&fd) {
        Some(_) => Ok(HostReply::value(0)),
        None => Err(HostFault::new(EBADF, format!("fd {fd} is not open"))),
    }
}

fn hc_print(ctx: &mut HostCallCtx<'_>) -> Result<HostReply, HostFault> {
    let [addr, len, _, _] = ctx.args;
    let bytes = ctx.read_bytes(addr, len)?;
    ctx.services.log.push(PrintRecord {
        core: ctx.core,
        bytes,
    });
    Ok(HostReply::value(len))
}

fn hc_dmalloc(ctx: &mut HostCallCtx<'_>) -> Result<HostReply, HostFault> {
    let size = ctx.args[0];
    if size == 0 {
        return Err(HostFault::new(EINVAL, "zero-size allocation"));
    }
    let off = ctx
        .services
        .heap
        .alloc(size)
        .ok_or_else(|| HostFault::new(ENOMEM, format!("no room for {size} bytes")))?;
    Ok(HostReply::value(ctx.mem.shared(off).value()))
}

fn hc_dfree(ctx: &mut HostCallCtx<'_>) -> Result<HostReply, HostFault> {
    let addr = DeviceAddress(ctx.args[0]);
    let freed = match ctx.mem.decode(addr) {
        Region::SharedGlobal { offset } => ctx.services.heap.free(offset),
        _ => false,
    };
    if freed {
        Ok(HostReply::value(0))
    } else {
        Err(HostFault::new(EINVAL, format!("{addr} is not a live allocation")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub core: CoreId,
    pub number: u32,
    pub status: MailboxStatus,
    pub value: u32,
    /// Core clock when the core resumed.
    pub resumed_at: f64,
}

/// The host daemon: a call vector plus host services.
#[derive(Debug, Default)]
pub struct HostDaemon {
    pub vector: CallVector,
    pub services: HostServices,
    history: Vec<ServiceRecord>,
}

impl HostDaemon {
    pub fn new() -> Self {
        HostDaemon::default()
    }

    pub fn register_user_call(
        &mut self,
        number: u32,
        handler: impl FnMut(&mut HostCallCtx<'_>) -> Result<HostReply, HostFault> + 'static,
    ) -> Result<(), RegisterError> {
        self.vector.register_user_call(number, Box::new(handler))
    }

    pub fn history(&self) -> &[ServiceRecord] {
        &self.history
    }

    pub fn log(&self) -> &[PrintRecord] {
        self.services.log()
    }

    /// Points the heap at the shared memory above the image's usrmem.
    /// Live allocations are dropped.
    pub fn bind_image(&mut self, image: &ProgramImage) {
        let start = image.segment(SegmentKind::Usrmem).end();
        self.services.heap = SharedHeap::new(start, image.shared_size);
    }

    /// Services the pending request in `core`'s mailbox and resumes it.
    pub(crate) fn service(&mut self, core: &mut Core, mem: &MemoryMap, cfg: &MeshConfig) -> Result<()> {
        let id = core.id();
        let number = core.mailbox.call_number;
        let args = core.mailbox.args;
        let outcome = match self.vector.lookup(number) {
            None => Err(HostFault::new(ENOSYS, format!("call {number} is not registered"))),
            Some(h) => {
                let mut ctx = HostCallCtx {
                    core: id,
                    number,
                    args,
                    mem,
                    services: &mut self.services,
                };
                h(&mut ctx)
            }
        };
        let (status, value, cost) = match outcome {
            Ok(r) => (MailboxStatus::Done, r.value, r.cost_us.max(0.0)),
            Err(f) => (MailboxStatus::Failed(f.code), HC_ERROR, 0.0),
        };
        core.mailbox.status = status;
        core.mailbox.return_slot = value;
        let wait = cfg.hostcall_roundtrip + cost;
        core.clock += wait;
        core.ledger.hostcall_wait_us += wait;
        if let Some(exec) = core.exec.as_mut() {
            exec.deliver(value);
        }
        core.transition(CoreState::Running)?;
        self.history.push(ServiceRecord {
            core: id,
            number,
            status,
            value,
            resumed_at: core.clock,
        });
        Ok(())
    }
}
