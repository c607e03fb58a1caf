//! Tabular reports: loader CSV rows and the load-benchmark sweep.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel_vm::KernelBlock;
use crate::layout::{build_image, FunctionRecord, ProgramManifest, RuntimeParams};
use crate::loader::{LoadPlan, Strategy};
use crate::mesh::{CopyReport, Machine, MeshConfig};

pub const LOAD_CSV_COLUMNS: [&str; 7] = [
    "strategy",
    "N",
    "payload_bytes",
    "offchip_copies",
    "onchip_copies",
    "rounds",
    "elapsed_us",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRow {
    pub strategy: Strategy,
    #[serde(rename = "N")]
    pub n: u32,
    pub payload_bytes: u64,
    pub offchip_copies: u64,
    pub onchip_copies: u64,
    pub rounds: u32,
    pub elapsed_us: f64,
}

impl LoadRow {
    pub fn new(strategy: Strategy, n: u32, payload_bytes: u64, r: &CopyReport) -> Self {
        LoadRow {
            strategy,
            n,
            payload_bytes,
            offchip_copies: r.offchip_copies,
            onchip_copies: r.onchip_copies,
            rounds: r.rounds,
            elapsed_us: r.elapsed,
        }
    }
}

pub fn write_load_csv<W: Write>(out: W, rows: &[LoadRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOAD_CSV_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.strategy.name().to_string(),
            r.n.to_string(),
            r.payload_bytes.to_string(),
            r.offchip_copies.to_string(),
            r.onchip_copies.to_string(),
            r.rounds.to_string(),
            r.elapsed_us.to_string(),
        ])?;
    }
    w.flush()
}

pub fn load_csv_string(rows: &[LoadRow]) -> String {
    let mut buf = Vec::new();
    write_load_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

pub fn read_load_csv(text: &str) -> std::result::Result<Vec<LoadRow>, csv::Error> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().collect()
}

/// Estimated serial and tree loads of `payload` usrcore bytes (plus a
/// `usrmem` byte copy) for each core count, serial rows first.
pub fn bench_load(ns: &[u32], payload: u64, usrmem: u64, cfg: &MeshConfig) -> Vec<LoadRow> {
    let mut rows = Vec::new();
    for strategy in [Strategy::Serial, Strategy::Tree] {
        for &n in ns {
            let r = LoadPlan::new(strategy, n as usize, payload, Some(usrmem)).estimate(cfg);
            rows.push(LoadRow::new(strategy, n, payload, &r));
        }
    }
    rows
}

/// Manifest whose usrcore segment is exactly `payload` bytes (at least
/// the launch stub).
pub fn payload_manifest(payload: u32, params: &RuntimeParams) -> ProgramManifest {
    let body = payload.saturating_sub(params.launch_stub_bytes);
    let functions = if body == 0 {
        Vec::new()
    } else {
        vec![FunctionRecord {
            id: 1,
            name: "payload".into(),
            size_bytes: body,
            placement: None,
            body: KernelBlock::returning(0),
        }]
    };
    ProgramManifest {
        functions,
        entry: (body > 0).then_some(1),
        ..ProgramManifest::default()
    }
}

/// Performs a real load of a `payload`-byte usrcore on an `n`-core machine.
pub fn measured_load(strategy: Strategy, n: u32, payload: u32, base: &MeshConfig) -> Result<CopyReport> {
    let shape = MeshConfig::with_cores(n);
    let cfg = MeshConfig {
        rows: shape.rows,
        cols: shape.cols,
        ..base.clone()
    };
    let params = RuntimeParams::default();
    let image = build_image(&payload_manifest(payload, &params), &params, &cfg)?;
    let mut m = Machine::new(cfg)?;
    m.init_syscore(&image)?;
    m.load(&image, strategy)
}
