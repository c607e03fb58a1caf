//! Abstract kernel code and its interpreter.
//!
//! Kernels carry declared costs instead of machine instructions. A
//! [`KernelBlock`] is an op list; loops are lowered to a flat program with
//! jumps when an image is loaded, and the engine executes one flat op per
//! event. Each core has sixteen 32-bit registers shared by every frame,
//! which is how functions pass values to each other.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::ops;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dyncall;
use crate::error::{Result, SimError};
use crate::layout::{code_header, CodeLocation, Placement, ProgramImage};
use crate::memspace::{DeviceAddress, MapGeometry, MemoryMap};
use crate::mesh::{self, BarrierKey, Core, CoreId, CoreState, MeshConfig};

pub const NUM_REGS: usize = 16;

/// Word-valued expression evaluated on the executing core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Lit(u32),
    Reg(u8),
    /// Word `i` of the argument block pointed to by argv.
    Arg(u8),
    Row,
    Col,
    Rows,
    Cols,
    /// Value returned by the most recent call or host call.
    Ret,
    /// Local offset of the first byte after the usrcore segment.
    FreeBase,
    /// Address of an offset in this core's local memory.
    Local(Box<Expr>),
    /// Address of `(row, col, offset)` in another core's local memory.
    CoreAddr(Box<Expr>, Box<Expr>, Box<Expr>),
    /// Little-endian word loaded from an address.
    Load(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Rem(Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Shl(Box<Expr>, Box<Expr>),
    Shr(Box<Expr>, Box<Expr>),
    Lt(Box<Expr>, Box<Expr>),
    Eq(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn lit(v: u32) -> Expr {
        Expr::Lit(v)
    }

    pub fn reg(r: u8) -> Expr {
        Expr::Reg(r)
    }

    pub fn load(addr: Expr) -> Expr {
        Expr::Load(Box::new(addr))
    }

    pub fn local(offset: Expr) -> Expr {
        Expr::Local(Box::new(offset))
    }

    pub fn core_addr(row: Expr, col: Expr, offset: Expr) -> Expr {
        Expr::CoreAddr(Box::new(row), Box::new(col), Box::new(offset))
    }
}

macro_rules! expr_binop {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl ops::$trait for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::$variant(Box::new(self), Box::new(rhs))
            }
        }
        impl ops::$trait<u32> for Expr {
            type Output = Expr;
            fn $method(self, rhs: u32) -> Expr {
                Expr::$variant(Box::new(self), Box::new(Expr::Lit(rhs)))
            }
        }
    };
}

expr_binop!(Add, add, Add);
expr_binop!(Sub, sub, Sub);
expr_binop!(Mul, mul, Mul);
expr_binop!(Div, div, Div);
expr_binop!(Rem, rem, Rem);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierGroup {
    /// Every core taking part in the current execution.
    #[default]
    All,
    /// Cores in the same mesh row.
    Row,
    /// Cores in the same mesh column.
    Col,
}

fn zero() -> Expr {
    Expr::Lit(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum KernelOp {
    Compute {
        us: f64,
    },
    Read {
        addr: Expr,
        len: Expr,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reg: Option<u8>,
    },
    Write {
        addr: Expr,
        value: Expr,
    },
    CopyOnChip {
        src: Expr,
        dst: Expr,
        len: Expr,
    },
    CallLocal {
        func: u32,
    },
    CallDynamic {
        func: u32,
    },
    HostCall {
        number: u32,
        #[serde(default)]
        args: Vec<Expr>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reg: Option<u8>,
    },
    Barrier {
        #[serde(default)]
        group: BarrierGroup,
    },
    Set {
        reg: u8,
        value: Expr,
    },
    Loop {
        reg: u8,
        count: Expr,
        body: Vec<KernelOp>,
    },
    DcReset,
    Return {
        #[serde(default = "zero")]
        value: Expr,
    },
}

/// Body of one function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBlock {
    pub ops: Vec<KernelOp>,
    #[serde(default)]
    pub stack_bytes: u32,
}

impl KernelBlock {
    pub fn new(ops: Vec<KernelOp>) -> Self {
        KernelBlock { ops, stack_bytes: 0 }
    }

    pub fn returning(value: u32) -> Self {
        KernelBlock::new(vec![KernelOp::Return {
            value: Expr::Lit(value),
        }])
    }

    pub fn ends_with_return(&self) -> bool {
        matches!(self.ops.last(), Some(KernelOp::Return { .. }))
    }

    /// Every op in program order, descending into loop bodies.
    pub fn walk(&self) -> Vec<&KernelOp> {
        fn go<'a>(ops: &'a [KernelOp], out: &mut Vec<&'a KernelOp>) {
            for op in ops {
                out.push(op);
                if let KernelOp::Loop { body, .. } = op {
                    go(body, out);
                }
            }
        }
        let mut out = Vec::new();
        go(&self.ops, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum FlatOp {
    Compute(f64),
    Read { addr: Expr, len: Expr, reg: Option<u8> },
    Write { addr: Expr, value: Expr },
    Copy { src: Expr, dst: Expr, len: Expr },
    Call { func: u32, dynamic_only: bool },
    HostCall { number: u32, args: Vec<Expr>, reg: Option<u8> },
    Barrier(BarrierGroup),
    Set(u8, Expr),
    LoopHead { reg: u8, count: Expr, exit: usize },
    LoopTail { reg: u8, head: usize },
    DcReset,
    Return(Expr),
}

fn lower_into(ops: &[KernelOp], out: &mut Vec<FlatOp>) {
    for op in ops {
        match op {
            KernelOp::Compute { us } => out.push(FlatOp::Compute(*us)),
            KernelOp::Read { addr, len, reg } => out.push(FlatOp::Read {
                addr: addr.clone(),
                len: len.clone(),
                reg: *reg,
            }),
            KernelOp::Write { addr, value } => out.push(FlatOp::Write {
                addr: addr.clone(),
                value: value.clone(),
            }),
            KernelOp::CopyOnChip { src, dst, len } => out.push(FlatOp::Copy {
                src: src.clone(),
                dst: dst.clone(),
                len: len.clone(),
            }),
            KernelOp::CallLocal { func } => out.push(FlatOp::Call {
                func: *func,
                dynamic_only: false,
            }),
            KernelOp::CallDynamic { func } => out.push(FlatOp::Call {
                func: *func,
                dynamic_only: true,
            }),
            KernelOp::HostCall { number, args, reg } => out.push(FlatOp::HostCall {
                number: *number,
                args: args.clone(),
                reg: *reg,
            }),
            KernelOp::Barrier { group } => out.push(FlatOp::Barrier(*group)),
            KernelOp::Set { reg, value } => out.push(FlatOp::Set(*reg, value.clone())),
            KernelOp::Loop { reg, count, body } => {
                out.push(FlatOp::Set(*reg, Expr::Lit(0)));
                let head = out.len();
                out.push(FlatOp::LoopHead {
                    reg: *reg,
                    count: count.clone(),
                    exit: 0,
                });
                lower_into(body, out);
                out.push(FlatOp::LoopTail { reg: *reg, head });
                let exit = out.len();
                if let FlatOp::LoopHead { exit: e, .. } = &mut out[head] {
                    *e = exit;
                }
            }
            KernelOp::DcReset => out.push(FlatOp::DcReset),
            KernelOp::Return { value } => out.push(FlatOp::Return(value.clone())),
        }
    }
}

pub(crate) fn lower(block: &KernelBlock) -> Arc<[FlatOp]> {
    let mut out = Vec::new();
    lower_into(&block.ops, &mut out);
    out.into()
}

/// An image prepared for execution: every function body lowered once.
#[derive(Debug)]
pub struct LoadedProgram {
    pub image: Arc<ProgramImage>,
    pub(crate) stub: Arc<[FlatOp]>,
    pub(crate) code: BTreeMap<u32, Arc<[FlatOp]>>,
}

impl LoadedProgram {
    pub fn new(image: Arc<ProgramImage>) -> Self {
        let stub: Vec<FlatOp> = match image.entry {
            Some(func) => vec![
                FlatOp::Call {
                    func,
                    dynamic_only: false,
                },
                FlatOp::Return(Expr::Ret),
            ],
            None => vec![FlatOp::Return(Expr::Lit(0))],
        };
        let code = image
            .functions
            .iter()
            .map(|f| (f.id, lower(&f.body)))
            .collect();
        LoadedProgram {
            image,
            stub: stub.into(),
            code,
        }
    }
}

/// Per-core cost and traffic accounting for one execution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub ops: u64,
    pub compute_us: f64,
    pub copy_us: f64,
    pub dc_us: f64,
    pub hostcall_wait_us: f64,
    pub barrier_wait_us: f64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub onchip_copies: u64,
    pub onchip_bytes: u64,
    pub dc_copies: u64,
    pub dc_bytes: u64,
    pub dc_indirections: u64,
    pub hostcalls: u64,
}

impl Ledger {
    /// Bytes this core moved: reads, writes, on-chip copies and
    /// dynamic-call loads.
    pub fn traffic_bytes(&self) -> u64 {
        self.bytes_read + self.bytes_written + self.onchip_bytes + self.dc_bytes
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Frame {
    code: Arc<[FlatOp]>,
    pc: usize,
    penalty: f64,
    stack_bytes: u32,
}

/// Interpreter state of one executing core.
#[derive(Debug, Clone)]
pub struct ExecContext {
    pub(crate) program: Arc<LoadedProgram>,
    frames: Vec<Frame>,
    pub(crate) regs: [u32; NUM_REGS],
    pub(crate) ret: u32,
    argv: DeviceAddress,
    stack_used: u32,
    pub(crate) pending_reg: Option<u8>,
}

impl ExecContext {
    pub(crate) fn new(program: Arc<LoadedProgram>, argv: DeviceAddress) -> Self {
        let stub = program.stub.clone();
        ExecContext {
            program,
            frames: vec![Frame {
                code: stub,
                pc: 0,
                penalty: 1.0,
                stack_bytes: 0,
            }],
            regs: [0; NUM_REGS],
            ret: 0,
            argv,
            stack_used: 0,
            pending_reg: None,
        }
    }

    pub fn regs(&self) -> &[u32; NUM_REGS] {
        &self.regs
    }

    pub fn call_depth(&self) -> usize {
        self.frames.len()
    }

    /// Receives a host-call result.
    pub(crate) fn deliver(&mut self, value: u32) {
        self.ret = value;
        if let Some(r) = self.pending_reg.take() {
            self.regs[r as usize] = value;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StepOutcome {
    Continue,
    Barrier(BarrierKey),
    HostCall,
    Returned,
}

impl StepOutcome {
    pub(crate) fn label(self) -> &'static str {
        match self {
            StepOutcome::Continue => "op",
            StepOutcome::Barrier(_) => "barrier",
            StepOutcome::HostCall => "hostcall",
            StepOutcome::Returned => "return",
        }
    }
}

/// Everything an expression can observe.
pub struct EvalEnv<'a> {
    pub core: CoreId,
    pub geom: &'a MapGeometry,
    pub mem: &'a MemoryMap,
    pub regs: &'a [u32; NUM_REGS],
    pub argv: DeviceAddress,
    pub free_base: u32,
    pub ret: u32,
    loads: Cell<u64>,
}

impl<'a> EvalEnv<'a> {
    pub fn new(
        core: CoreId,
        mem: &'a MemoryMap,
        regs: &'a [u32; NUM_REGS],
        argv: DeviceAddress,
        free_base: u32,
        ret: u32,
    ) -> Self {
        EvalEnv {
            core,
            geom: mem.geometry(),
            mem,
            regs,
            argv,
            free_base,
            ret,
            loads: Cell::new(0),
        }
    }

    /// Number of word loads performed so far.
    pub fn loads(&self) -> u64 {
        self.loads.get()
    }

    pub fn eval(&self, e: &Expr) -> Result<u32> {
        let bin = |a: &Expr, b: &Expr| -> Result<(u32, u32)> { Ok((self.eval(a)?, self.eval(b)?)) };
        Ok(match e {
            Expr::Lit(v) => *v,
            Expr::Reg(r) => *self.regs.get(*r as usize).ok_or(SimError::BadRegister(*r))?,
            Expr::Arg(i) => self.load(self.argv.add(4 * *i as u32))?,
            Expr::Row => self.core.row,
            Expr::Col => self.core.col,
            Expr::Rows => self.geom.rows,
            Expr::Cols => self.geom.cols,
            Expr::Ret => self.ret,
            Expr::FreeBase => self.free_base,
            Expr::Local(off) => self
                .geom
                .encode(self.core.row, self.core.col, self.eval(off)?)?
                .value(),
            Expr::CoreAddr(r, c, off) => self
                .geom
                .encode(self.eval(r)?, self.eval(c)?, self.eval(off)?)?
                .value(),
            Expr::Load(a) => self.load(DeviceAddress(self.eval(a)?))?,
            Expr::Add(a, b) => {
                let (a, b) = bin(a, b)?;
                a.wrapping_add(b)
            }
            Expr::Sub(a, b) => {
                let (a, b) = bin(a, b)?;
                a.wrapping_sub(b)
            }
            Expr::Mul(a, b) => {
                let (a, b) = bin(a, b)?;
                a.wrapping_mul(b)
            }
            Expr::Div(a, b) => {
                let (a, b) = bin(a, b)?;
                a.checked_div(b).ok_or(SimError::DivideByZero(self.core))?
            }
            Expr::Rem(a, b) => {
                let (a, b) = bin(a, b)?;
                a.checked_rem(b).ok_or(SimError::DivideByZero(self.core))?
            }
            Expr::And(a, b) => {
                let (a, b) = bin(a, b)?;
                a & b
            }
            Expr::Or(a, b) => {
                let (a, b) = bin(a, b)?;
                a | b
            }
            Expr::Shl(a, b) => {
                let (a, b) = bin(a, b)?;
                a.wrapping_shl(b)
            }
            Expr::Shr(a, b) => {
                let (a, b) = bin(a, b)?;
                a.wrapping_shr(b)
            }
            Expr::Lt(a, b) => {
                let (a, b) = bin(a, b)?;
                (a < b) as u32
            }
            Expr::Eq(a, b) => {
                let (a, b) = bin(a, b)?;
                (a == b) as u32
            }
        })
    }

    fn load(&self, addr: DeviceAddress) -> Result<u32> {
        self.loads.set(self.loads.get() + 1);
        Ok(self.mem.read_u32(addr)?)
    }
}

fn check_reg(r: u8) -> Result<usize> {
    if (r as usize) < NUM_REGS {
        Ok(r as usize)
    } else {
        Err(SimError::BadRegister(r))
    }
}

/// Executes one op on `core`.
pub(crate) fn step_core(
    core: &mut Core,
    mem: &MemoryMap,
    cfg: &MeshConfig,
    geom: &MapGeometry,
) -> Result<StepOutcome> {
    let id = core.id();
    let outcome = {
        let Core {
            exec,
            ledger,
            clock,
            dc,
            mailbox,
            ..
        } = core;
        let exec = exec.as_mut().expect("runnable core has an execution context");
        let program = exec.program.clone();
        let image = &program.image;
        let frame = exec.frames.last_mut().expect("execution context has a frame");
        let code = frame.code.clone();
        let pc = frame.pc;
        let penalty = frame.penalty;
        frame.pc += 1;
        ledger.ops += 1;

        let env = EvalEnv::new(id, mem, &exec.regs, exec.argv, image.free_offset(), exec.ret);
        // Effects that need `exec` mutably are computed first, applied after
        // the environment's borrow ends.
        enum Post {
            None,
            SetReg(usize, u32),
            Jump(usize),
            Bump(usize, usize),
            Push(Frame, u32),
            Pop(u32),
            HostCall(Option<u8>),
        }
        let post = match &code[pc] {
            FlatOp::Compute(us) => {
                let c = us * penalty;
                *clock += c;
                ledger.compute_us += c;
                Post::None
            }
            FlatOp::Read { addr, len, reg } => {
                let a = DeviceAddress(env.eval(addr)?);
                let n = env.eval(len)?;
                let bytes = mem.read_bytes(a, n)?;
                ledger.bytes_read += n as u64;
                match reg {
                    Some(r) => {
                        let mut w = [0u8; 4];
                        let k = bytes.len().min(4);
                        w[..k].copy_from_slice(&bytes[..k]);
                        Post::SetReg(check_reg(*r)?, u32::from_le_bytes(w))
                    }
                    None => Post::None,
                }
            }
            FlatOp::Write { addr, value } => {
                let a = DeviceAddress(env.eval(addr)?);
                let v = env.eval(value)?;
                mem.write_u32(a, v)?;
                ledger.bytes_written += 4;
                Post::None
            }
            FlatOp::Copy { src, dst, len } => {
                let s = DeviceAddress(env.eval(src)?);
                let d = DeviceAddress(env.eval(dst)?);
                let n = env.eval(len)?;
                let r = mesh::onchip_copy(mem, cfg, s, d, n)?;
                *clock += r.elapsed;
                ledger.copy_us += r.elapsed;
                ledger.onchip_copies += 1;
                ledger.onchip_bytes += n as u64;
                Post::None
            }
            FlatOp::Call { func, dynamic_only } => {
                let f = image.function(*func).ok_or(SimError::UnknownFunction(*func))?;
                if *dynamic_only && f.placement != Placement::DynamicCall {
                    return Err(SimError::UnknownDynamicFunction(*func));
                }
                let (addr, fpenalty) = match f.location {
                    CodeLocation::Local { offset } => (geom.encode(id.row, id.col, offset)?, 1.0),
                    CodeLocation::Global { addr } => (addr, cfg.globalmem_fetch_penalty),
                    CodeLocation::Dynamic { .. } => {
                        let out = dyncall::invoke(id, dc, mem, cfg, image, *func)?;
                        *clock += out.cost;
                        ledger.dc_us += out.cost;
                        if out.copied > 0 {
                            ledger.dc_copies += 1;
                            ledger.dc_bytes += out.copied as u64;
                        } else {
                            ledger.dc_indirections += 1;
                        }
                        (out.addr, 1.0)
                    }
                };
                verify_code(mem, addr, f.id, f.size_bytes)?;
                let needed = exec.stack_used + f.body.stack_bytes;
                let available = image.stack_bytes();
                if needed > available {
                    return Err(SimError::StackOverflow {
                        core: id,
                        needed,
                        available,
                    });
                }
                Post::Push(
                    Frame {
                        code: program.code[func].clone(),
                        pc: 0,
                        penalty: fpenalty,
                        stack_bytes: f.body.stack_bytes,
                    },
                    needed,
                )
            }
            FlatOp::HostCall { number, args, reg } => {
                let idx = image
                    .hc_table
                    .iter()
                    .position(|n| n == number)
                    .ok_or(SimError::UndeclaredHostCall(*number))?;
                // the call number comes from the jump-table entry in memory
                let entry = geom.encode(id.row, id.col, image.hc_table_offset + 8 * idx as u32)?;
                let call_number = mem.read_u32(entry)?;
                let mut words = [0u32; 4];
                for (w, a) in words.iter_mut().zip(args.iter().take(4)) {
                    *w = env.eval(a)?;
                }
                let sp = geom.encode(
                    id.row,
                    id.col,
                    geom.local_mem_bytes - exec.stack_used.min(geom.local_mem_bytes - 1) - 1,
                )?;
                mailbox.post(call_number, words, sp);
                ledger.hostcalls += 1;
                if let Some(r) = reg {
                    check_reg(*r)?;
                }
                Post::HostCall(*reg)
            }
            FlatOp::Barrier(group) => {
                let line = match group {
                    BarrierGroup::All => 0,
                    BarrierGroup::Row => id.row,
                    BarrierGroup::Col => id.col,
                };
                ledger.bytes_read += 4 * env.loads();
                return Ok(StepOutcome::Barrier(BarrierKey { group: *group, line }));
            }
            FlatOp::Set(r, value) => Post::SetReg(check_reg(*r)?, env.eval(value)?),
            FlatOp::LoopHead { reg, count, exit } => {
                let r = check_reg(*reg)?;
                if exec.regs[r] >= env.eval(count)? {
                    Post::Jump(*exit)
                } else {
                    Post::None
                }
            }
            FlatOp::LoopTail { reg, head } => Post::Bump(check_reg(*reg)?, *head),
            FlatOp::DcReset => {
                dyncall::reset(id, dc, mem, image)?;
                Post::None
            }
            FlatOp::Return(value) => Post::Pop(env.eval(value)?),
        };
        ledger.bytes_read += 4 * env.loads();

        match post {
            Post::None => StepOutcome::Continue,
            Post::SetReg(r, v) => {
                exec.regs[r] = v;
                StepOutcome::Continue
            }
            Post::Jump(to) => {
                exec.frames.last_mut().unwrap().pc = to;
                StepOutcome::Continue
            }
            Post::Bump(r, head) => {
                exec.regs[r] = exec.regs[r].wrapping_add(1);
                exec.frames.last_mut().unwrap().pc = head;
                StepOutcome::Continue
            }
            Post::Push(frame, used) => {
                exec.frames.push(frame);
                exec.stack_used = used;
                StepOutcome::Continue
            }
            Post::Pop(v) => {
                let f = exec.frames.pop().unwrap();
                exec.stack_used -= f.stack_bytes;
                exec.ret = v;
                if exec.frames.is_empty() {
                    StepOutcome::Returned
                } else {
                    StepOutcome::Continue
                }
            }
            Post::HostCall(reg) => {
                exec.pending_reg = reg;
                StepOutcome::HostCall
            }
        }
    };
    match outcome {
        StepOutcome::Returned => {
            let ret = core.exec.take().map(|e| e.ret);
            core.last_return = ret;
            core.transition(CoreState::SyscoreWait)?;
        }
        StepOutcome::HostCall => core.transition(CoreState::HostCallSpin)?,
        _ => {}
    }
    Ok(outcome)
}

/// Checks that the code header at `addr` names function `id`.
fn verify_code(mem: &MemoryMap, addr: DeviceAddress, id: u32, size: u32) -> Result<()> {
    let expected = code_header(id, size);
    let found = mem.read_bytes(addr, expected.len() as u32)?;
    if found != expected {
        return Err(SimError::CorruptCode { addr, expected: id });
    }
    Ok(())
}
