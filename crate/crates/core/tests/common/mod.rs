#![allow(dead_code)]

use meshrt_core::hostcall::HostDaemon;
use meshrt_core::{
    build_image, Expr, FunctionRecord, KernelBlock, KernelOp, Machine, MeshConfig, Placement, ProgramImage,
    ProgramManifest, RuntimeParams, Strategy,
};

pub fn func(id: u32, name: &str, size: u32, ops: Vec<KernelOp>) -> FunctionRecord {
    FunctionRecord {
        id,
        name: name.to_string(),
        size_bytes: size,
        placement: None,
        body: KernelBlock::new(ops),
    }
}

pub fn placed(mut f: FunctionRecord, p: Placement) -> FunctionRecord {
    f.placement = Some(p);
    f
}

pub fn ret(v: u32) -> KernelOp {
    KernelOp::Return { value: Expr::lit(v) }
}

pub fn compute(us: f64) -> KernelOp {
    KernelOp::Compute { us }
}

pub fn manifest(functions: Vec<FunctionRecord>, entry: u32) -> ProgramManifest {
    ProgramManifest {
        functions,
        entry: Some(entry),
        ..ProgramManifest::default()
    }
}

/// Builds, initializes and tree-loads `m` onto a fresh machine with a
/// daemon attached.
pub fn loaded(m: &ProgramManifest, cfg: &MeshConfig) -> (Machine, ProgramImage) {
    let image = build_image(m, &RuntimeParams::default(), cfg).expect("image builds");
    let mut machine = Machine::new(cfg.clone()).expect("machine");
    machine.init_syscore(&image).expect("init");
    machine.load(&image, Strategy::Tree).expect("load");
    machine.attach_daemon(HostDaemon::new());
    (machine, image)
}

pub fn one_core() -> MeshConfig {
    MeshConfig::with_cores(1)
}
