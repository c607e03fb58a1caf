mod common;

use common::*;
use meshrt_core::layout::SegmentKind;
use meshrt_core::report::{bench_load, measured_load, payload_manifest};
use meshrt_core::{
    build_image, CoreId, DeviceAddress, Expr, HotLoad, KernelOp, LoadPlan, Machine, MeshConfig, RuntimeParams,
    SimError, Strategy,
};

fn payload_image(payload: u32, cfg: &MeshConfig) -> meshrt_core::ProgramImage {
    let params = RuntimeParams::default();
    build_image(&payload_manifest(payload, &params), &params, cfg).unwrap()
}

#[test]
fn double_init_is_rejected() {
    let cfg = MeshConfig::default();
    let image = payload_image(1024, &cfg);
    let mut m = Machine::new(cfg).unwrap();
    m.init_syscore(&image).unwrap();
    assert_eq!(m.init_syscore(&image), Err(SimError::AlreadyInitialized));
}

#[test]
fn load_before_init_is_rejected() {
    let cfg = MeshConfig::default();
    let image = payload_image(1024, &cfg);
    let mut m = Machine::new(cfg).unwrap();
    assert!(m.load(&image, Strategy::Tree).is_err());
}

#[test]
fn serial_copy_counts() {
    let cfg = MeshConfig::default();
    let r = measured_load(Strategy::Serial, 16, 8192, &cfg).unwrap();
    assert_eq!(r.offchip_copies, 17);
    assert_eq!(r.onchip_copies, 0);
    let r = measured_load(Strategy::Serial, 1, 8192, &cfg).unwrap();
    assert_eq!(r.offchip_copies, 2);
}

#[test]
fn serial_time_is_linear_in_n() {
    let cfg = MeshConfig::default();
    let t: Vec<f64> = [4, 16, 64, 256]
        .iter()
        .map(|&n| measured_load(Strategy::Serial, n, 8192, &cfg).unwrap().elapsed)
        .collect();
    // t(N) = a + N b
    let b = (t[1] - t[0]) / 12.0;
    assert!((b - cfg.offchip_cost(8192)).abs() < 1e-9);
    for (i, n) in [4.0, 16.0, 64.0, 256.0].iter().enumerate() {
        assert!((t[i] - (t[0] + (n - 4.0) * b)).abs() < 1e-6);
    }
}

#[test]
fn tree_copy_counts() {
    let cfg = MeshConfig::default();
    let r = measured_load(Strategy::Tree, 16, 8192, &cfg).unwrap();
    assert_eq!((r.offchip_copies, r.onchip_copies, r.rounds), (2, 15, 4));
    let one = measured_load(Strategy::Tree, 1, 8192, &cfg).unwrap();
    let serial = measured_load(Strategy::Serial, 1, 8192, &cfg).unwrap();
    assert_eq!((one.onchip_copies, one.rounds), (0, 0));
    assert_eq!(one, serial);
}

#[test]
fn usrcore_speedup_at_16_cores() {
    // 16 * 91.92 = 1470.72 vs 91.92 + 4 * 18.192 = 164.688
    let cfg = MeshConfig::default();
    let s = LoadPlan::new(Strategy::Serial, 16, 8192, None).estimate(&cfg).elapsed;
    let t = LoadPlan::new(Strategy::Tree, 16, 8192, None).estimate(&cfg).elapsed;
    assert!((s - 1470.72).abs() < 1e-9);
    assert!((t - 164.688).abs() < 1e-9);
    assert!((s / t - 8.93).abs() < 0.01);
}

#[test]
fn estimate_equals_measurement() {
    let cfg = MeshConfig::default();
    for strategy in [Strategy::Serial, Strategy::Tree] {
        for n in [1, 2, 3, 4, 16, 64, 1024] {
            let image = payload_image(4096, &MeshConfig::with_cores(n));
            let usrmem = image.segment(SegmentKind::Usrmem).size as u64;
            let est = LoadPlan::new(strategy, n as usize, image.usrcore_size() as u64, Some(usrmem)).estimate(&cfg);
            let real = measured_load(strategy, n, 4096, &cfg).unwrap();
            assert_eq!(est.offchip_copies, real.offchip_copies);
            assert_eq!(est.onchip_copies, real.onchip_copies);
            assert_eq!(est.rounds, real.rounds);
            assert_eq!(est.bytes_moved, real.bytes_moved);
            assert!((est.elapsed - real.elapsed).abs() < 1e-6, "{} N={n}", strategy.name());
        }
    }
}

#[test]
fn every_core_holds_the_usrcore_payload() {
    for n in [1, 2, 4, 16, 64, 1024] {
        let cfg = MeshConfig::with_cores(n);
        let image = payload_image(2048, &cfg);
        let seg = image.segment(SegmentKind::Usrcore).clone();
        let mut m = Machine::new(cfg).unwrap();
        m.init_syscore(&image).unwrap();
        m.tree_load(&image).unwrap();
        for c in m.cores() {
            let id = c.id();
            let at = m.memory().encode(id.row, id.col, seg.offset).unwrap();
            assert_eq!(m.memory().read_bytes(at, seg.size).unwrap(), seg.payload, "N={n} core {id}");
        }
        assert!(m.syscore_intact().unwrap());
    }
}

#[test]
fn bench_rows_are_ordered_and_tree_steps_by_one_round() {
    let cfg = MeshConfig::default();
    let ns = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096];
    let rows = bench_load(&ns, 8192, 0, &cfg);
    let (serial, tree) = rows.split_at(ns.len());
    assert!(serial.windows(2).all(|w| w[0].n < w[1].n && w[0].elapsed_us < w[1].elapsed_us));
    let round = cfg.onchip_cost(8192);
    for w in tree.windows(2) {
        assert!((w[1].elapsed_us - w[0].elapsed_us - round).abs() < 1e-9);
    }
    let ratio = |i: usize| serial[i].elapsed_us / tree[i].elapsed_us;
    assert!(ratio(ns.len() - 1) > ratio(4));
}

#[test]
fn hot_load_refuses_running_cores() {
    let (mut m, image) = loaded(&manifest(vec![func(1, "k", 64, vec![compute(1.0), ret(0)])], 1), &MeshConfig::default());
    let id = CoreId::new(1, 2);
    let entry = m.entry_address(id).unwrap();
    m.signal_start(id, entry, DeviceAddress::NULL).unwrap();
    assert!(matches!(
        m.hot_load(&image, &HotLoad::default()),
        Err(SimError::NotInWaitState { .. })
    ));
}

#[test]
fn hot_load_copy_time_tracks_usrcore_size() {
    let cfg = MeshConfig::default();
    let small = payload_image(2048, &cfg);
    let large = payload_image(4096, &cfg);
    let mut m = Machine::new(cfg.clone()).unwrap();
    m.init_syscore(&small).unwrap();
    m.load(&small, Strategy::Tree).unwrap();
    let opts = HotLoad {
        include_usrmem: false,
        ..HotLoad::default()
    };
    let a = m.hot_load(&small, &opts).unwrap();
    let b = m.hot_load(&large, &opts).unwrap();
    // copy portion = elapsed minus one setup per copy made
    let copies = |r: &meshrt_core::CopyReport| (1 + r.rounds) as f64;
    let pa = a.elapsed - copies(&a) * cfg.copy_setup_latency;
    let pb = b.elapsed - copies(&b) * cfg.copy_setup_latency;
    assert!((pb - 2.0 * pa).abs() < 1e-9);
}

#[test]
fn execute_without_image() {
    let mut m = Machine::new(MeshConfig::default()).unwrap();
    assert!(matches!(m.execute(DeviceAddress::NULL), Err(SimError::NoImageLoaded(_))));
    assert_eq!(m.re_execute().unwrap_err(), SimError::NoPriorExecution);
}

#[test]
fn pure_kernel_runs_the_same_twice() {
    // sums argv words 0..3 and writes the sum to shared memory at argv[3]
    let sum = Expr::Arg(0) + Expr::Arg(1) + Expr::Arg(2);
    let body = vec![
        KernelOp::Write {
            addr: Expr::Arg(3) + Expr::Row * 16 + Expr::Col * 4,
            value: sum.clone(),
        },
        KernelOp::Return { value: sum },
    ];
    let (mut m, _) = loaded(&manifest(vec![func(1, "k", 128, body)], 1), &MeshConfig::default());
    let d = m.daemon_mut().unwrap();
    let argv = d.services.heap.alloc(16).unwrap();
    let out = d.services.heap.alloc(64).unwrap();
    let mem = m.memory();
    let (argv, out) = (mem.shared(argv), mem.shared(out));
    for (i, w) in [5u32, 6, 7, out.value()].iter().enumerate() {
        mem.write_u32(argv.add(4 * i as u32), *w).unwrap();
    }
    let first = m.execute(argv).unwrap();
    let buf1 = m.memory().read_bytes(out, 64).unwrap();
    let again = m.re_execute().unwrap();
    let buf2 = m.memory().read_bytes(out, 64).unwrap();
    assert_eq!(first.returns, again.returns);
    assert!(first.returns.iter().all(|&(_, v)| v == 18));
    assert_eq!(buf1, buf2);
    assert_eq!(again.bytes_moved(), 0);
}
