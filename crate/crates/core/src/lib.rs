//! Simulator of a 2D-mesh many-core coprocessor and its runtime: segmented
//! program layout, persistent syscore with hot loading, a tree loader, lazy
//! dynamic calls and host calls over a unified address space.

pub mod dyncall;
pub mod error;
pub mod hostcall;
pub mod kernel_vm;
pub mod layout;
pub mod loader;
pub mod memspace;
pub mod mesh;
pub mod report;
pub mod scenario;
pub mod workloads;

pub use error::{Result, SimError};
pub use kernel_vm::{BarrierGroup, Expr, KernelBlock, KernelOp, Ledger};
pub use layout::{
    build_image, occupancy, replan, FunctionRecord, Occupancy, Placement, ProgramImage, ProgramManifest,
    RuntimeParams,
};
pub use loader::{ExecReport, HotLoad, LoadPlan, Strategy};
pub use memspace::{DeviceAddress, MemoryMap};
pub use mesh::{CopyReport, CoreId, CoreState, Machine, MeshConfig};
