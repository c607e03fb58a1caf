use thiserror::Error;

use crate::layout::LayoutError;
use crate::memspace::{DeviceAddress, MemError};
use crate::mesh::{CoreId, CoreState};

/// Errors raised while driving the simulated machine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Mem(#[from] MemError),

    #[error(transparent)]
    Layout(#[from] LayoutError),

    #[error("invalid mesh configuration: {0}")]
    InvalidConfig(String),

    #[error("core {core} is {state:?}, expected it to be waiting in syscore")]
    NotInWaitState { core: CoreId, state: CoreState },

    #[error("illegal core state transition {from:?} -> {to:?} on core {core}")]
    IllegalTransition {
        core: CoreId,
        from: CoreState,
        to: CoreState,
    },

    #[error("syscore is already initialized")]
    AlreadyInitialized,

    #[error("syscore has not been initialized")]
    NotInitialized,

    #[error("no program image is loaded on core {0}")]
    NoImageLoaded(CoreId),

    #[error("nothing to re-execute: no kernel has been executed since the last load")]
    NoPriorExecution,

    #[error("image does not match the machine: {0}")]
    ImageMismatch(String),

    #[error("entry {entry} is not the launch stub of the image loaded on core {core}")]
    InvalidEntry { core: CoreId, entry: DeviceAddress },

    #[error("deadlock: {0}")]
    Deadlock(String),

    #[error("stack overflow on core {core}: {needed} bytes needed, stack holds {available}")]
    StackOverflow {
        core: CoreId,
        needed: u32,
        available: u32,
    },

    #[error("function {0} is not a dynamic call in the loaded image")]
    UnknownDynamicFunction(u32),

    #[error("function {0} is not present in the loaded image")]
    UnknownFunction(u32),

    #[error(
        "dynamic call region exhausted on core {core}: function {func} needs {needed} bytes, {available} free"
    )]
    DcRegionExhausted {
        core: CoreId,
        func: u32,
        needed: u32,
        available: u32,
    },

    #[error("code at {addr} does not hold function {expected}")]
    CorruptCode { addr: DeviceAddress, expected: u32 },

    #[error("host call {0} is not in the image's host-call table")]
    UndeclaredHostCall(u32),

    #[error("no host daemon is attached")]
    NoDaemon,

    #[error("on-chip copy needs at least one core-local endpoint ({src} -> {dst})")]
    OffChipEndpoints {
        src: DeviceAddress,
        dst: DeviceAddress,
    },

    #[error("division by zero in kernel expression on core {0}")]
    DivideByZero(CoreId),

    #[error("register r{0} does not exist")]
    BadRegister(u8),

    #[error("host heap: {0}")]
    Heap(String),

    #[error("workload does not fit: {0}")]
    SpecTooLarge(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
