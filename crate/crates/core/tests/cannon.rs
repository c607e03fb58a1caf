use meshrt_core::layout::RuntimeParams;
use meshrt_core::loader::Strategy;
use meshrt_core::mesh::MeshConfig;
use meshrt_core::workloads::*;

fn naive(a: &[i32], b: &[i32], dim: usize) -> Vec<i32> {
    let mut c = vec![0i64; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            for k in 0..dim {
                c[i * dim + j] += a[i * dim + k] as i64 * b[k * dim + j] as i64;
            }
        }
    }
    c.into_iter().map(|x| i32::try_from(x).unwrap()).collect()
}

#[test]
fn oracle_matches_hand_product() {
    // [1 2; 3 4] x [5 6; 7 8]
    assert_eq!(oracle_multiply(&[1, 2, 3, 4], &[5, 6, 7, 8], 2), vec![19, 22, 43, 50]);
}

#[test]
fn p4_n4_every_variant_is_bit_exact() {
    let spec = CannonSpec {
        n: 4,
        ..CannonSpec::default()
    };
    let inputs = CannonInputs::generate(&spec);
    let expect = naive(&inputs.a, &inputs.b, spec.dim());
    for v in CannonVariant::ALL {
        let run = run_cannon(&spec, v, &MeshConfig::default(), &RuntimeParams::default(), Strategy::Tree).unwrap();
        assert_eq!(run.c, expect, "{}", v.name());
        assert!(run.correct);
    }
}

#[test]
fn serial_load_gives_the_same_product() {
    let spec = CannonSpec {
        n: 4,
        seed: 99,
        ..CannonSpec::default()
    };
    let cfg = MeshConfig::default();
    let params = RuntimeParams::default();
    let tree = run_cannon(&spec, CannonVariant::InnerDynamic, &cfg, &params, Strategy::Tree).unwrap();
    let serial = run_cannon(&spec, CannonVariant::InnerDynamic, &cfg, &params, Strategy::Serial).unwrap();
    assert_eq!(tree.c, serial.c);
    assert!((tree.elapsed_us - serial.elapsed_us).abs() < 1e-6);
}

#[test]
fn re_execute_reproduces_the_output() {
    let spec = CannonSpec {
        n: 4,
        ..CannonSpec::default()
    };
    let mut s = CannonSession::new(
        &spec,
        CannonVariant::AllLocal,
        &MeshConfig::default(),
        &RuntimeParams::default(),
        Strategy::Tree,
    )
    .unwrap();
    let first = s.execute().unwrap();
    let c1 = s.output().unwrap();
    let again = s.machine.re_execute().unwrap();
    assert_eq!(again.bytes_moved(), 0);
    assert_eq!(again.signals, 16);
    assert_eq!(s.output().unwrap(), c1);
    assert_eq!(first.elapsed, again.elapsed);
}

#[test]
fn default_suite_sizes_and_ratio_classes() {
    let spec = CannonSpec::default();
    let rows = run_variant_suite(&spec, &MeshConfig::default(), &RuntimeParams::default()).unwrap();
    let get = |v| rows.iter().find(|r| r.variant == v).unwrap();
    let (local, selected, global, dynamic) = (
        get(CannonVariant::AllLocal),
        get(CannonVariant::SelectedGlobal),
        get(CannonVariant::InnerGlobal),
        get(CannonVariant::InnerDynamic),
    );
    assert!(rows.iter().all(|r| r.correct));
    assert_eq!(
        [local.usrcore_bytes, selected.usrcore_bytes, global.usrcore_bytes],
        [8736, 5960, 4864]
    );
    assert_eq!(dynamic.usrcore_bytes, global.usrcore_bytes + 24);

    // 145.7 / 9.4 and 10.7 / 9.4 msec
    assert!(global.elapsed_us / local.elapsed_us >= 5.0);
    assert!(dynamic.elapsed_us / local.elapsed_us <= 1.15);
    assert!(selected.elapsed_us < dynamic.elapsed_us);

    // same data movement in every layout, one DC copy per core
    assert!(rows.iter().all(|r| r.onchip_bytes == local.onchip_bytes));
    assert_eq!(dynamic.dc_copies, 16);
    assert_eq!(dynamic.dc_bytes, 16 * 1096);
    assert_eq!(local.dc_copies, 0);
}

#[test]
fn oversized_blocks_are_rejected() {
    let spec = CannonSpec {
        n: 64,
        ..CannonSpec::default()
    };
    let err = run_cannon(
        &spec,
        CannonVariant::AllLocal,
        &MeshConfig::default(),
        &RuntimeParams::default(),
        Strategy::Tree,
    );
    assert!(matches!(err, Err(meshrt_core::SimError::SpecTooLarge(_))));
}
