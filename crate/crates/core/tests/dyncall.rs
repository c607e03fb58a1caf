mod common;

use common::*;
use meshrt_core::dyncall::DcEntryState;
use meshrt_core::layout::{image_file_sections, emit_image_file, SegmentKind};
use meshrt_core::{
    build_image, replan, CoreId, DeviceAddress, FunctionRecord, KernelOp, Placement, RuntimeParams, SimError,
};

fn dynamic(id: u32, size: u32) -> FunctionRecord {
    placed(
        func(id, &format!("dyn{id}"), size, vec![compute(1.0), ret(id)]),
        Placement::DynamicCall,
    )
}

fn call(f: u32) -> KernelOp {
    KernelOp::CallDynamic { func: f }
}

fn with_region(mut m: meshrt_core::ProgramManifest, bytes: u32) -> meshrt_core::ProgramManifest {
    m.dc_region_bytes = Some(bytes);
    m
}

#[test]
fn two_kb_into_one_kb_region() {
    let m = with_region(manifest(vec![func(1, "main", 64, vec![call(2), ret(0)]), dynamic(2, 2048)], 1), 1024);
    let (mut machine, _) = loaded(&m, &one_core());
    assert!(matches!(
        machine.execute(DeviceAddress::NULL),
        Err(SimError::DcRegionExhausted { needed: 2048, available: 1024, .. })
    ));
}

#[test]
fn entry_is_patched_on_first_call_only() {
    let id = CoreId::new(0, 0);
    let m = manifest(
        vec![
            func(1, "main", 64, vec![call(2), KernelOp::Return { value: meshrt_core::Expr::Ret }]),
            dynamic(2, 640),
        ],
        1,
    );
    let (mut machine, image) = loaded(&m, &one_core());
    assert_eq!(machine.dc_entry(id, 2).unwrap(), DcEntryState::Unresolved);
    let r = machine.execute(DeviceAddress::NULL).unwrap();
    assert_eq!(r.returns, vec![(id, 2)]);
    let region = image.segment(SegmentKind::DcRegion).offset;
    let resident = machine.memory().encode(0, 0, region).unwrap();
    assert_eq!(machine.dc_entry(id, 2).unwrap(), DcEntryState::Resolved(resident));
    // the copied bytes are the body stored in usrmem
    let home = match image.function(2).unwrap().location {
        meshrt_core::layout::CodeLocation::Dynamic { home, .. } => home,
        other => panic!("{other:?}"),
    };
    let mem = machine.memory();
    assert_eq!(mem.read_bytes(resident, 640).unwrap(), mem.read_bytes(home, 640).unwrap());

    // second execution: entry already resolved, no copy
    let again = machine.re_execute().unwrap();
    assert_eq!(again.ledger.dc_copies, 0);
    assert_eq!(again.ledger.dc_indirections, 1);
    let counters = &machine.core(id).unwrap().dc_state().counters;
    assert_eq!(counters.copies, 1);
    assert_eq!(counters.bytes_copied, 640);
}

#[test]
fn first_call_costs_one_offchip_copy() {
    let cfg = one_core();
    let m = manifest(vec![func(1, "main", 64, vec![call(2), call(2), ret(0)]), dynamic(2, 1000)], 1);
    let (mut machine, _) = loaded(&m, &cfg);
    let r = machine.execute(DeviceAddress::NULL).unwrap();
    let expect = cfg.offchip_cost(1000) + cfg.dc_indirection_latency + 2.0;
    assert!((r.elapsed - expect).abs() < 1e-9, "{} vs {expect}", r.elapsed);
    assert!((r.ledger.dc_us - cfg.offchip_cost(1000) - cfg.dc_indirection_latency).abs() < 1e-9);
}

#[test]
fn invoke_reset_invoke_copies_twice() {
    let m = manifest(
        vec![
            func(1, "main", 64, vec![call(2), KernelOp::DcReset, call(2), ret(0)]),
            dynamic(2, 808),
        ],
        1,
    );
    let (mut machine, _) = loaded(&m, &one_core());
    let r = machine.execute(DeviceAddress::NULL).unwrap();
    assert_eq!((r.ledger.dc_copies, r.ledger.dc_bytes), (2, 1616));
}

#[test]
fn host_side_reset() {
    let id = CoreId::new(0, 0);
    let m = manifest(vec![func(1, "main", 64, vec![call(2), ret(0)]), dynamic(2, 100)], 1);
    let (mut machine, _) = loaded(&m, &one_core());
    machine.execute(DeviceAddress::NULL).unwrap();
    machine.dc_reset(id).unwrap();
    assert_eq!(machine.dc_entry(id, 2).unwrap(), DcEntryState::Unresolved);
    let r = machine.re_execute().unwrap();
    assert_eq!(r.ledger.dc_copies, 1);
}

#[test]
fn stages_fit_separately_but_not_together() {
    // stage A: 400 + 600 bytes, stage B: 704 + 296 bytes, region 1000
    let stage_a = [2, 3];
    let stage_b = [4, 5];
    let sizes = [(2, 400), (3, 600), (4, 704), (5, 296)];
    let calls = |ids: &[u32]| ids.iter().map(|&f| call(f)).collect::<Vec<_>>();
    let mut staged = calls(&stage_a);
    staged.push(KernelOp::DcReset);
    staged.extend(calls(&stage_b));
    staged.push(ret(0));
    let mut union = calls(&stage_a);
    union.extend(calls(&stage_b));
    union.push(ret(0));

    let build = |body: Vec<KernelOp>| {
        let mut fs = vec![func(1, "main", 64, body)];
        fs.extend(sizes.iter().map(|&(id, s)| dynamic(id, s)));
        with_region(manifest(fs, 1), 1000)
    };
    let (mut machine, _) = loaded(&build(staged), &one_core());
    let r = machine.execute(DeviceAddress::NULL).unwrap();
    assert_eq!((r.ledger.dc_copies, r.ledger.dc_bytes), (4, 2000));

    let (mut machine, _) = loaded(&build(union), &one_core());
    assert!(matches!(
        machine.execute(DeviceAddress::NULL),
        Err(SimError::DcRegionExhausted { func: 4, needed: 704, available: 0, .. })
    ));
}

#[test]
fn calling_a_non_dynamic_function_dynamically_fails() {
    let m = manifest(
        vec![func(1, "main", 64, vec![call(2), ret(0)]), func(2, "plain", 64, vec![ret(0)])],
        1,
    );
    let (mut machine, _) = loaded(&m, &one_core());
    assert_eq!(
        machine.execute(DeviceAddress::NULL).unwrap_err(),
        SimError::UnknownDynamicFunction(2)
    );
}

#[test]
fn dynamic_entry_costs_24_bytes_over_global() {
    let params = RuntimeParams::default();
    let m = manifest(vec![func(1, "main", 64, vec![call(2), ret(0)]), dynamic(2, 999)], 1);
    let dynamic_img = build_image(&m, &params, &one_core()).unwrap();
    let global_img = replan(&dynamic_img, &[(2, Placement::UsrmemCall)]).unwrap();
    let local_img = replan(&dynamic_img, &[(2, Placement::UsrcoreCall)]).unwrap();
    assert_eq!(dynamic_img.usrcore_size(), global_img.usrcore_size() + 24);
    assert_eq!(local_img.usrcore_size(), global_img.usrcore_size() + 999);
    assert_eq!(replan(&dynamic_img, &[]).unwrap(), dynamic_img);
}

#[test]
fn side_table_has_one_record_per_dynamic_function() {
    let m = manifest(
        vec![func(1, "main", 64, vec![call(2), call(3), ret(0)]), dynamic(2, 64), dynamic(3, 72)],
        1,
    );
    let image = build_image(&m, &RuntimeParams::default(), &one_core()).unwrap();
    assert_eq!(image.dc_side_table.len(), 2);
    let bytes = emit_image_file(&image);
    let sections = image_file_sections(&bytes).unwrap();
    let (_, at, len) = sections.iter().find(|(tag, _, _)| tag == b"DCST").copied().unwrap();
    let count = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    assert_eq!(count, 2);
    assert!(len > 4);
}

#[test]
fn dynamic_function_may_call_another() {
    let outer = placed(
        func(2, "outer", 200, vec![call(3), KernelOp::Return { value: meshrt_core::Expr::Ret }]),
        Placement::DynamicCall,
    );
    let m = with_region(
        manifest(
            vec![
                func(1, "main", 64, vec![call(2), KernelOp::Return { value: meshrt_core::Expr::Ret }]),
                outer,
                dynamic(3, 120),
            ],
            1,
        ),
        320,
    );
    let (mut machine, _) = loaded(&m, &one_core());
    let r = machine.execute(DeviceAddress::NULL).unwrap();
    assert_eq!(r.returns[0].1, 3);
    assert_eq!((r.ledger.dc_copies, r.ledger.dc_bytes), (2, 320));
}
