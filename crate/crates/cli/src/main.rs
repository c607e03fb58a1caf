//! `meshrt`: layout reports, scenario runs, loader benchmarks and dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use meshrt_core::layout::{emit_image_file, image_file_sections, parse_image_file, SegmentKind};
use meshrt_core::report::{bench_load, write_load_csv, LoadRow};
use meshrt_core::scenario::{read_manifest, Scenario, ScenarioError, ScenarioReport};
use meshrt_core::{build_image, occupancy, MeshConfig, RuntimeParams, SimError, Strategy};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "meshrt", version, about = "Mesh coprocessor runtime simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for generated data (overrides the scenario's).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Verify the run's invariants; exit 4 if any fails.
    #[arg(long, global = true)]
    check: bool,
    /// Write tabular output to this CSV file.
    #[arg(long, global = true, value_name = "PATH")]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Report local-memory occupancy of a program manifest.
    Layout {
        manifest: PathBuf,
        /// Runtime parameters (JSON).
        #[arg(long, value_name = "PATH")]
        runtime: Option<PathBuf>,
        /// Mesh configuration (JSON).
        #[arg(long, value_name = "PATH")]
        mesh: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Run a scenario: load, execute, re-execute.
    Run {
        scenario: PathBuf,
        /// Also write the full report as JSON.
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
    /// Estimate serial and tree load times over core counts.
    BenchLoad {
        /// Core counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256,512,1024,2048,4096")]
        ns: Vec<u32>,
        /// usrcore bytes per core.
        #[arg(long, default_value_t = 8192)]
        payload: u64,
        /// usrmem bytes copied once.
        #[arg(long, default_value_t = 0)]
        usrmem: u64,
        /// Mesh configuration (JSON) for bandwidths and latencies.
        #[arg(long, value_name = "PATH")]
        mesh: Option<PathBuf>,
    },
    /// Dump a program image, the host filesystem or the host log.
    Dump {
        #[command(subcommand)]
        what: DumpCommand,
    },
}

#[derive(Subcommand)]
enum DumpCommand {
    /// Build a manifest and list (or write) its image file.
    Image {
        manifest: PathBuf,
        #[arg(long, value_name = "PATH")]
        runtime: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        mesh: Option<PathBuf>,
        /// Write the image bytes here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run a scenario and print the files its cores wrote on the host.
    Hostfs { scenario: PathBuf },
    /// Run a scenario and print the host log.
    Log { scenario: PathBuf },
}

#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
    Check(Vec<String>),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Runtime(_) => EXIT_RUNTIME,
            Failure::Check(_) => EXIT_CHECK,
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Invalid(_) => Failure::Validation(e.into()),
            ScenarioError::Runtime(_) => Failure::Runtime(e.into()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        ScenarioError::from(e).into()
    }
}

type Out = Result<(), Failure>;

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(invalid)?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid JSON in {}", path.display()))
        .map_err(invalid)
}

fn opt_json<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, Failure> {
    path.as_deref().map(read_json).unwrap_or_else(|| Ok(T::default()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Out {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(runtime)?;
    }
    fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

fn write_csv(path: &Path, rows: &[LoadRow]) -> Out {
    let mut buf = Vec::new();
    write_load_csv(&mut buf, rows).map_err(runtime)?;
    write_file(path, &buf)
}

fn checks_result(checks: Vec<(String, bool)>, to_stderr: bool) -> Out {
    let mut failed = Vec::new();
    for (name, pass) in checks {
        let line = format!("check {name}: {}", if pass { "PASS" } else { "FAIL" });
        if to_stderr {
            eprintln!("{line}");
        } else {
            println!("{line}");
        }
        if !pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed))
    }
}

fn cmd_layout(common: &Common, manifest: &Path, runtime_path: &Option<PathBuf>, mesh: &Option<PathBuf>, json: bool) -> Out {
    let manifest = read_manifest(manifest)?;
    let params: RuntimeParams = opt_json(runtime_path)?;
    let cfg: MeshConfig = opt_json(mesh)?;
    let image = build_image(&manifest, &params, &cfg).map_err(invalid)?;
    let occ = occupancy(&image);
    let seed = common.seed.unwrap_or(0);
    if json {
        let segments: Vec<_> = image.segments.iter().collect();
        let v = serde_json::json!({ "seed": seed, "occupancy": occ, "segments": segments });
        println!("{}", serde_json::to_string_pretty(&v).map_err(runtime)?);
    } else {
        println!("seed: {seed}");
        println!("local memory: {} bytes", occ.local_mem_bytes);
        println!("{:<10} {:>8} {:>8} {:>8}", "segment", "offset", "bytes", "local%");
        for s in &image.segments {
            let name = serde_json::to_value(s.kind).map_err(runtime)?;
            let pct = if s.kind.is_local() {
                format!("{:.1}", 100.0 * s.size as f64 / occ.local_mem_bytes as f64)
            } else {
                "-".to_string()
            };
            println!("{:<10} {:>8} {:>8} {:>8}", name.as_str().unwrap_or("?"), s.offset, s.size, pct);
        }
        println!("occupied: {} bytes ({:.1}%)", occ.occupied_bytes, occ.occupied_pct);
        println!("user code: {} bytes ({:.1}%)", occ.usrcore_bytes, occ.usrcore_pct);
        println!("free: {} bytes ({:.1}%)", occ.free_bytes, occ.free_pct);
    }
    if let Some(path) = &common.csv {
        let mut buf = b"segment,offset,bytes\n".to_vec();
        for s in &image.segments {
            let name = serde_json::to_value(s.kind).map_err(runtime)?;
            writeln!(buf, "{},{},{}", name.as_str().unwrap_or("?"), s.offset, s.size).map_err(runtime)?;
        }
        write_file(path, &buf)?;
    }
    if common.check {
        let round_trip = parse_image_file(&emit_image_file(&image)).map_err(runtime)?;
        let local: u32 = SegmentKind::ALL
            .iter()
            .filter(|k| k.is_local())
            .map(|&k| image.segment(k).size)
            .sum();
        checks_result(vec![
            ("image file round-trip".into(), round_trip == image),
            ("segments fit local memory".into(), local <= image.local_mem_bytes),
            (
                "occupancy sums to 100%".into(),
                (occ.occupied_pct + occ.free_pct - 100.0).abs() < 1e-9,
            ),
        ], false)?;
    }
    Ok(())
}

fn load_scenario(common: &Common, path: &Path) -> Result<Scenario, Failure> {
    let mut s = Scenario::from_file(path)?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn cmd_run(common: &Common, path: &Path, json: &Option<PathBuf>) -> Out {
    let s = load_scenario(common, path)?;
    let report = s.run()?;
    print!("{}", report.render_text());
    if let Some(csv) = common.csv.as_ref().or(s.outputs.csv.as_ref()) {
        write_csv(csv, &report.loads)?;
    }
    if let Some(out) = json.as_ref().or(s.outputs.json.as_ref()) {
        let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
        write_file(out, text.as_bytes())?;
    }
    if common.check {
        checks_result(report.checks().into_iter().map(|c| (c.name, c.pass)).collect(), false)?;
    }
    Ok(())
}

fn bench_checks(rows: &[LoadRow], cfg: &MeshConfig, payload: u64) -> Vec<(String, bool)> {
    let by = |s: Strategy| rows.iter().filter(|r| r.strategy == s).collect::<Vec<_>>();
    let (serial, tree) = (by(Strategy::Serial), by(Strategy::Tree));
    let laws = rows.iter().all(|r| {
        let n = r.n as u64;
        match r.strategy {
            Strategy::Serial => r.offchip_copies == n + 1,
            Strategy::Tree => {
                r.offchip_copies == 2 && r.onchip_copies == n - 1 && r.rounds == n.next_power_of_two().trailing_zeros()
            }
        }
    });
    let increasing = serial.windows(2).all(|w| w[0].n < w[1].n && w[0].elapsed_us < w[1].elapsed_us);
    let round = cfg.onchip_cost(payload);
    let steps = tree
        .windows(2)
        .filter(|w| w[1].n == 2 * w[0].n)
        .all(|w| (w[1].elapsed_us - w[0].elapsed_us - round).abs() < 1e-6);
    let ratio = |i: usize| serial[i].elapsed_us / tree[i].elapsed_us;
    let grows = serial.len() < 2 || ratio(serial.len() - 1) >= ratio(0);
    vec![
        ("copy-count laws".into(), laws),
        ("serial elapsed increasing".into(), increasing),
        ("tree grows one round per doubling".into(), steps),
        ("serial/tree ratio grows with N".into(), grows),
    ]
}

fn cmd_bench(common: &Common, ns: &[u32], payload: u64, usrmem: u64, mesh: &Option<PathBuf>) -> Out {
    if ns.is_empty() || ns.contains(&0) {
        return Err(invalid(anyhow!("core counts must be at least 1")));
    }
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let cfg: MeshConfig = opt_json(mesh)?;
    cfg.validate()?;
    let rows = bench_load(&ns, payload, usrmem, &cfg);
    eprintln!("seed: {}", common.seed.unwrap_or(0));
    match &common.csv {
        Some(path) => write_csv(path, &rows)?,
        None => write_load_csv(std::io::stdout().lock(), &rows).map_err(runtime)?,
    }
    if common.check {
        checks_result(bench_checks(&rows, &cfg, payload), common.csv.is_none())?;
    }
    Ok(())
}

fn run_for_dump(common: &Common, path: &Path) -> Result<ScenarioReport, Failure> {
    Ok(load_scenario(common, path)?.run()?)
}

fn cmd_dump(common: &Common, what: &DumpCommand) -> Out {
    match what {
        DumpCommand::Image {
            manifest,
            runtime: runtime_path,
            mesh,
            out,
        } => {
            let manifest = read_manifest(manifest)?;
            let params: RuntimeParams = opt_json(runtime_path)?;
            let cfg: MeshConfig = opt_json(mesh)?;
            let image = build_image(&manifest, &params, &cfg).map_err(invalid)?;
            let bytes = emit_image_file(&image);
            println!("image: {} bytes", bytes.len());
            for (tag, at, len) in image_file_sections(&bytes).map_err(runtime)? {
                println!("{} at {at:>6} len {len:>6}", String::from_utf8_lossy(&tag));
            }
            for f in &image.functions {
                let place = serde_json::to_value(f.placement).map_err(runtime)?;
                println!(
                    "function {:>3} {:<20} {:>6} bytes {}",
                    f.id,
                    f.name,
                    f.size_bytes,
                    place.as_str().unwrap_or("?")
                );
            }
            if let Some(out) = out {
                write_file(out, &bytes)?;
            }
            Ok(())
        }
        DumpCommand::Hostfs { scenario } => {
            let r = run_for_dump(common, scenario)?;
            println!("seed: {}", r.seed);
            for (path, bytes) in &r.host_files {
                println!("== {path} ({} bytes)", bytes.len());
                println!("{}", String::from_utf8_lossy(bytes));
            }
            Ok(())
        }
        DumpCommand::Log { scenario } => {
            let r = run_for_dump(common, scenario)?;
            println!("seed: {}", r.seed);
            for line in &r.host_log {
                println!("{}", line.trim_end());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match &cli.cmd {
        Command::Layout {
            manifest,
            runtime,
            mesh,
            json,
        } => cmd_layout(c, manifest, runtime, mesh, *json),
        Command::Run { scenario, json } => cmd_run(c, scenario, json),
        Command::BenchLoad {
            ns,
            payload,
            usrmem,
            mesh,
        } => cmd_bench(c, ns, *payload, *usrmem, mesh),
        Command::Dump { what } => cmd_dump(c, what),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(e) | Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Check(names) => eprintln!("check failed: {}", names.join(", ")),
            }
            ExitCode::from(f.code())
        }
    }
}
