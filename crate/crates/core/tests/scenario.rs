use std::path::PathBuf;

use meshrt_core::report::{read_load_csv, LOAD_CSV_COLUMNS};
use meshrt_core::scenario::{Scenario, ScenarioError, Workload};
use meshrt_core::workloads::{occupancy_app_manifest, CannonVariant};
use meshrt_core::{build_image, occupancy, ProgramManifest, RuntimeParams, Strategy};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn noop_tree_load_on_16_cores() {
    let s = Scenario::from_file(&fixture("noop.json")).unwrap();
    assert!(s.outputs.csv.as_ref().unwrap().is_absolute());
    let r = s.run().unwrap();
    let load = &r.loads[0];
    assert_eq!((load.n, load.offchip_copies, load.onchip_copies, load.rounds), (16, 2, 15, 4));
    assert_eq!(r.re_execute_bytes_moved, 0);
    assert_eq!(r.re_execute_signals, 16);
    assert!(r.checks().iter().all(|c| c.pass));
    assert!(r.render_text().contains("seed: 1"));
}

#[test]
fn cannon_fixture_passes_against_the_oracle() {
    let r = Scenario::from_file(&fixture("cannon.json")).unwrap().run().unwrap();
    assert_eq!(r.cannon.len(), 4);
    assert!(r.cannon.iter().all(|c| c.correct));
    assert!(r.render_text().contains("cannon all_local: usrcore=8736"));
    assert!(r.render_text().contains("correctness PASS"));
}

#[test]
fn manifest_fixture_prints_from_every_core() {
    let r = Scenario::from_file(&fixture("hello.json")).unwrap().run().unwrap();
    // execute and re-execute both print
    assert_eq!(r.host_log.len(), 8);
    assert!(r.host_log.iter().all(|l| l.ends_with("hello\n")));
    assert_eq!(r.loads[0].strategy, Strategy::Serial);
    assert_eq!(r.loads[0].offchip_copies, 5);
    assert_eq!(r.host_files["hello.txt"], b"hello\n".repeat(8));
}

#[test]
fn occupancy_fixture_matches_the_harness() {
    let text = std::fs::read_to_string(fixture("manifests/occupancy_app.json")).unwrap();
    let from_file: ProgramManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(from_file, occupancy_app_manifest());
    for (name, pct) in [("runtime/legacy.json", "47.0"), ("runtime/stripped.json", "23.0")] {
        let params: RuntimeParams =
            serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap();
        let image = build_image(&from_file, &params, &Default::default()).unwrap();
        assert_eq!(format!("{:.1}", occupancy(&image).occupied_pct), pct);
    }
}

#[test]
fn missing_manifest_is_a_validation_error() {
    let dir = std::env::temp_dir().join(format!("meshrt-scn-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("s.json");
    std::fs::write(&path, r#"{"manifest": "nowhere.json", "workload": {"kind": "manifest"}}"#).unwrap();
    let err = Scenario::from_file(&path).unwrap_err();
    assert!(matches!(err, ScenarioError::Invalid(ref m) if m.contains("does not exist")), "{err}");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unknown_fields_are_rejected() {
    let err = serde_json::from_str::<Scenario>(r#"{"seed": 1, "sede": 2}"#).unwrap_err();
    assert!(err.to_string().contains("unknown field"));
}

#[test]
fn overflowing_program_is_a_validation_error() {
    let s = Scenario {
        manifest: Some(fixture("manifests/overflow.json")),
        ..Scenario::default()
    };
    match s.run() {
        Err(ScenarioError::Invalid(m)) => assert!(m.contains("overflow by"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_has_the_load_columns() {
    let s = Scenario {
        workload: Workload::Cannon {
            p: 2,
            n: 2,
            variant: Some(CannonVariant::InnerDynamic),
            mac_us: 0.01,
        },
        ..Scenario::default()
    };
    let r = s.run().unwrap();
    let csv = r.csv();
    assert_eq!(csv.lines().next().unwrap(), LOAD_CSV_COLUMNS.join(","));
    assert_eq!(read_load_csv(&csv).unwrap(), r.loads);
}

#[test]
fn seed_changes_data_but_not_structure() {
    let run = |seed| {
        Scenario {
            seed,
            workload: Workload::Cannon {
                p: 4,
                n: 4,
                variant: Some(CannonVariant::AllLocal),
                mac_us: 0.01,
            },
            ..Scenario::default()
        }
        .run()
        .unwrap()
    };
    let (a, b) = (run(1), run(2));
    assert_eq!(a.csv(), b.csv());
    assert_ne!(a.cannon[0].c_digest, b.cannon[0].c_digest);
    assert_ne!(a.memory_digest, b.memory_digest);
}
