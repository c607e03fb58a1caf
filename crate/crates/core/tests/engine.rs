mod common;

use common::*;
use meshrt_core::{
    build_image, BarrierGroup, CoreId, CoreState, DeviceAddress, Expr, HotLoad, KernelOp, Machine, MeshConfig,
    Placement, RuntimeParams, SimError, Strategy,
};

fn two_cores() -> MeshConfig {
    MeshConfig::with_cores(2)
}

#[test]
fn return_value_costs_nothing() {
    let (mut m, _) = loaded(&manifest(vec![func(1, "k", 64, vec![ret(7)])], 1), &one_core());
    let r = m.execute(DeviceAddress::NULL).unwrap();
    assert_eq!(r.returns, vec![(CoreId::new(0, 0), 7)]);
    assert_eq!(r.elapsed, 0.0);
}

#[test]
fn compute_is_additive() {
    let k = manifest(vec![func(1, "k", 64, vec![compute(5.0), compute(5.0), ret(0)])], 1);
    let (mut m, _) = loaded(&k, &one_core());
    let r = m.execute(DeviceAddress::NULL).unwrap();
    assert_eq!(r.ledger.compute_us, 10.0);
    assert_eq!(r.elapsed, 10.0);
}

#[test]
fn concurrent_cores_compose_by_maximum() {
    let cfg = two_cores();
    let params = RuntimeParams::default();
    let a = build_image(&manifest(vec![func(1, "k", 64, vec![compute(100.0), ret(0)])], 1), &params, &cfg).unwrap();
    let b = build_image(&manifest(vec![func(1, "k", 64, vec![compute(250.0), ret(0)])], 1), &params, &cfg).unwrap();
    let mut m = Machine::new(cfg).unwrap();
    m.init_syscore(&a).unwrap();
    m.load(&a, Strategy::Tree).unwrap();
    let second = HotLoad {
        targets: Some(vec![CoreId::new(0, 1)]),
        ..HotLoad::default()
    };
    m.hot_load(&b, &second).unwrap();

    let one = m.execute_on(&[CoreId::new(0, 0)], DeviceAddress::NULL).unwrap();
    assert_eq!(one.elapsed, 100.0);
    let both = m.execute(DeviceAddress::NULL).unwrap();
    assert_eq!(both.elapsed, 250.0);
    assert_eq!(both.signals, 2);
}

#[test]
fn global_code_pays_the_fetch_penalty() {
    let cfg = one_core();
    let run = |p: Placement| {
        let k = manifest(
            vec![
                func(1, "main", 64, vec![KernelOp::CallLocal { func: 2 }, ret(0)]),
                placed(func(2, "body", 200, vec![compute(10.0), ret(0)]), p),
            ],
            1,
        );
        let (mut m, _) = loaded(&k, &cfg);
        m.execute(DeviceAddress::NULL).unwrap().ledger.compute_us
    };
    let local = run(Placement::UsrcoreCall);
    let global = run(Placement::UsrmemCall);
    assert_eq!(local, 10.0);
    assert_eq!(global / local, 15.0);
}

#[test]
fn barrier_aligns_clocks() {
    // column c computes c + 1 times before the barrier
    let body = vec![
        KernelOp::Loop {
            reg: 0,
            count: Expr::Col + 1,
            body: vec![compute(10.0)],
        },
        KernelOp::Barrier {
            group: BarrierGroup::All,
        },
        compute(1.0),
        ret(0),
    ];
    let (mut m, _) = loaded(&manifest(vec![func(1, "k", 64, body)], 1), &two_cores());
    let r = m.execute(DeviceAddress::NULL).unwrap();
    assert!((r.elapsed - 21.0).abs() < 1e-9);
    assert!((r.ledger.barrier_wait_us - 10.0).abs() < 1e-9);
}

#[test]
fn single_member_barrier_passes() {
    let body = vec![KernelOp::Barrier { group: BarrierGroup::Row }, compute(3.0), ret(0)];
    let (mut m, _) = loaded(&manifest(vec![func(1, "k", 64, body)], 1), &two_cores());
    let r = m.execute_on(&[CoreId::new(0, 1)], DeviceAddress::NULL).unwrap();
    assert_eq!(r.elapsed, 3.0);
}

#[test]
fn signal_state_machine() {
    let (mut m, _) = loaded(&manifest(vec![func(1, "k", 64, vec![compute(1.0), ret(0)])], 1), &one_core());
    let id = CoreId::new(0, 0);
    let entry = m.entry_address(id).unwrap();
    assert_eq!(m.core(id).unwrap().state(), CoreState::SyscoreWait);
    m.signal_start(id, entry, DeviceAddress::NULL).unwrap();
    assert_eq!(m.core(id).unwrap().state(), CoreState::Running);
    assert!(matches!(
        m.signal_start(id, entry, DeviceAddress::NULL),
        Err(SimError::NotInWaitState { .. })
    ));
    m.run_until_idle().unwrap();
    assert_eq!(m.core(id).unwrap().state(), CoreState::SyscoreWait);
    // signalable again without a load
    m.signal_start(id, entry, DeviceAddress::NULL).unwrap();
    m.run_until_idle().unwrap();
}

#[test]
fn wrong_entry_is_rejected() {
    let (mut m, _) = loaded(&manifest(vec![func(1, "k", 64, vec![ret(0)])], 1), &one_core());
    let id = CoreId::new(0, 0);
    let entry = m.entry_address(id).unwrap();
    assert!(matches!(
        m.signal_start(id, entry.add(4), DeviceAddress::NULL),
        Err(SimError::InvalidEntry { .. })
    ));
}

#[test]
fn host_call_without_daemon_deadlocks() {
    let mut k = manifest(
        vec![func(1, "k", 64, vec![KernelOp::HostCall { number: 1024, args: vec![], reg: None }, ret(0)])],
        1,
    );
    k.hostcalls_used = vec![1024];
    let (mut m, _) = loaded(&k, &one_core());
    m.detach_daemon();
    assert!(matches!(m.execute(DeviceAddress::NULL), Err(SimError::Deadlock(_))));
}

#[test]
fn stack_overflow_is_detected() {
    let mut deep = func(2, "deep", 64, vec![ret(0)]);
    deep.body.stack_bytes = 1000;
    let mut main = func(1, "main", 64, vec![KernelOp::CallLocal { func: 2 }, ret(0)]);
    main.body.stack_bytes = 100;
    let (mut m, _) = loaded(&manifest(vec![main, deep], 1), &one_core());
    assert!(matches!(
        m.execute(DeviceAddress::NULL),
        Err(SimError::StackOverflow { needed: 1100, available: 1024, .. })
    ));
}

#[test]
fn expressions_see_core_coordinates() {
    let body = vec![KernelOp::Return {
        value: Expr::Row * 100 + Expr::Col,
    }];
    let (mut m, _) = loaded(&manifest(vec![func(1, "k", 64, body)], 1), &MeshConfig::default());
    let r = m.execute(DeviceAddress::NULL).unwrap();
    for (id, v) in r.returns {
        assert_eq!(v, id.row * 100 + id.col);
    }
}
