//! JSON scenarios: a mesh, a program, a loader strategy and a workload,
//! run end to end into a deterministic report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::SimError;
use crate::hostcall::HostDaemon;
use crate::layout::{build_image, ProgramManifest, RuntimeParams};
use crate::loader::Strategy;
use crate::memspace::{hex_digest, DeviceAddress, SHARED_BASE};
use crate::mesh::{Machine, MeshConfig};
use crate::report::{load_csv_string, LoadRow};
use crate::workloads::{noop_manifest, CannonRun, CannonSession, CannonSpec, CannonVariant};

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// Bad input: unreadable or invalid files, a program that does not fit.
    #[error("{0}")]
    Invalid(String),
    /// The simulation itself failed.
    #[error("runtime error: {0}")]
    Runtime(SimError),
}

impl From<SimError> for ScenarioError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Layout(_) | SimError::InvalidConfig(_) | SimError::SpecTooLarge(_) => {
                ScenarioError::Invalid(e.to_string())
            }
            e => ScenarioError::Runtime(e),
        }
    }
}

type SResult<T> = Result<T, ScenarioError>;

fn default_strategy() -> Strategy {
    Strategy::Tree
}

fn default_mac() -> f64 {
    CannonSpec::default().mac_us
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Workload {
    /// Kernel that returns immediately (or the manifest's, if one is given).
    #[default]
    Noop,
    /// The manifest's entry, with optional argument words staged in shared
    /// memory.
    Manifest {
        #[serde(default)]
        argv_words: Vec<u32>,
    },
    /// Cannon's multiply; all four layouts unless one is named.
    Cannon {
        p: u32,
        n: u32,
        #[serde(default)]
        variant: Option<CannonVariant>,
        #[serde(default = "default_mac")]
        mac_us: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub runtime: RuntimeParams,
    /// Manifest JSON, relative to the scenario file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub outputs: Outputs,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 0,
            mesh: MeshConfig::default(),
            runtime: RuntimeParams::default(),
            manifest: None,
            strategy: Strategy::Tree,
            workload: Workload::Noop,
            outputs: Outputs::default(),
        }
    }
}

pub fn read_manifest(path: &Path) -> SResult<ProgramManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| ScenarioError::Invalid(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ScenarioError::Invalid(format!("invalid manifest {}: {e}", path.display())))
}

impl Scenario {
    /// Reads a scenario and resolves its paths against the file's directory.
    pub fn from_file(path: &Path) -> SResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ScenarioError::Invalid(format!("cannot read scenario {}: {e}", path.display())))?;
        let mut s: Scenario = serde_json::from_str(&text)
            .map_err(|e| ScenarioError::Invalid(format!("invalid scenario {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(m) = s.manifest.as_mut() {
            resolve(m);
        }
        if let Some(p) = s.outputs.csv.as_mut() {
            resolve(p);
        }
        if let Some(p) = s.outputs.json.as_mut() {
            resolve(p);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> SResult<()> {
        self.mesh.validate()?;
        if let Some(m) = &self.manifest {
            if !m.is_file() {
                return Err(ScenarioError::Invalid(format!("manifest {} does not exist", m.display())));
            }
        }
        if matches!(self.workload, Workload::Manifest { .. }) && self.manifest.is_none() {
            return Err(ScenarioError::Invalid("workload `manifest` needs a manifest path".into()));
        }
        Ok(())
    }

    pub fn run(&self) -> SResult<ScenarioReport> {
        self.validate()?;
        match &self.workload {
            Workload::Cannon { p, n, variant, mac_us } => {
                let spec = CannonSpec {
                    p: *p,
                    n: *n,
                    seed: self.seed,
                    mac_us: *mac_us,
                };
                self.run_cannon(&spec, *variant)
            }
            Workload::Noop => {
                let manifest = match &self.manifest {
                    Some(p) => read_manifest(p)?,
                    None => noop_manifest(),
                };
                self.run_manifest(&manifest, &[])
            }
            Workload::Manifest { argv_words } => {
                let manifest = read_manifest(self.manifest.as_ref().expect("validated"))?;
                self.run_manifest(&manifest, argv_words)
            }
        }
    }

    fn run_manifest(&self, manifest: &ProgramManifest, argv_words: &[u32]) -> SResult<ScenarioReport> {
        let image = build_image(manifest, &self.runtime, &self.mesh).map_err(SimError::from)?;
        let mut m = Machine::new(self.mesh.clone())?;
        let n = m.core_count() as u32;
        m.init_syscore(&image)?;
        let load = m.load(&image, self.strategy)?;
        m.attach_daemon(HostDaemon::new());
        let argv = if argv_words.is_empty() {
            DeviceAddress::NULL
        } else {
            let d = m.daemon_mut().expect("attached");
            let off = d
                .services
                .heap
                .alloc(4 * argv_words.len() as u32)
                .ok_or_else(|| ScenarioError::Invalid("no shared memory for argv".into()))?;
            let a = DeviceAddress(SHARED_BASE + off);
            for (i, w) in argv_words.iter().enumerate() {
                m.memory().write_u32(a.add(4 * i as u32), *w).map_err(SimError::from)?;
            }
            a
        };
        let first = m.execute(argv)?;
        let again = m.re_execute()?;
        let mut report = ScenarioReport::new(self, n);
        report.loads.push(LoadRow::new(self.strategy, n, image.usrcore_size() as u64, &load));
        report.execute_elapsed_us = first.elapsed;
        report.re_execute_elapsed_us = again.elapsed;
        report.re_execute_bytes_moved = again.bytes_moved();
        report.re_execute_signals = again.signals;
        report.returns_match = first.returns == again.returns;
        report.host_log = host_log(&m);
        report.host_files = m.daemon().map(|d| d.services.files().clone()).unwrap_or_default();
        report.memory_digest = hex_digest(&m.memory_digest());
        Ok(report)
    }

    fn run_cannon(&self, spec: &CannonSpec, variant: Option<CannonVariant>) -> SResult<ScenarioReport> {
        let variants = match variant {
            Some(v) => vec![v],
            None => CannonVariant::ALL.to_vec(),
        };
        let mut report = ScenarioReport::new(self, self.mesh.core_count() as u32);
        let mut digests = Vec::new();
        for v in variants {
            let mut s = CannonSession::new(spec, v, &self.mesh, &self.runtime, self.strategy)?;
            let first = s.execute()?;
            let run = s.summarize(&first)?;
            let again = s.execute_again()?;
            let rerun_c = s.output()?;
            report.loads.push(LoadRow::new(
                self.strategy,
                s.machine.core_count() as u32,
                s.image.usrcore_size() as u64,
                &s.load,
            ));
            if report.cannon.is_empty() {
                report.execute_elapsed_us = first.elapsed;
                report.re_execute_elapsed_us = again.elapsed;
                report.re_execute_bytes_moved = again.bytes_moved();
                report.re_execute_signals = again.signals;
            }
            report.returns_match &= rerun_c == run.c;
            digests.extend_from_slice(&s.machine.memory_digest());
            report.cannon.push(run);
        }
        // one digest over the per-variant memory digests, in suite order
        report.memory_digest = hex_digest(&Sha256::digest(&digests));
        Ok(report)
    }
}

impl CannonSession {
    fn execute_again(&mut self) -> crate::error::Result<crate::loader::ExecReport> {
        self.machine.re_execute()
    }
}

fn host_log(m: &Machine) -> Vec<String> {
    m.daemon()
        .map(|d| {
            d.log()
                .iter()
                .map(|r| format!("{} {}", r.core, String::from_utf8_lossy(&r.bytes)))
                .collect()
        })
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub cores: u32,
    pub strategy: Strategy,
    pub loads: Vec<LoadRow>,
    pub execute_elapsed_us: f64,
    pub re_execute_elapsed_us: f64,
    pub re_execute_bytes_moved: u64,
    pub re_execute_signals: usize,
    /// Re-execution reproduced the first execution's results.
    pub returns_match: bool,
    pub cannon: Vec<CannonRun>,
    pub host_log: Vec<String>,
    /// Simulated host filesystem after the run.
    #[serde(skip)]
    pub host_files: BTreeMap<String, Vec<u8>>,
    /// SHA-256 over the final simulated memory.
    pub memory_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
}

impl ScenarioReport {
    fn new(s: &Scenario, cores: u32) -> Self {
        ScenarioReport {
            seed: s.seed,
            cores,
            strategy: s.strategy,
            loads: Vec::new(),
            execute_elapsed_us: 0.0,
            re_execute_elapsed_us: 0.0,
            re_execute_bytes_moved: 0,
            re_execute_signals: 0,
            returns_match: true,
            cannon: Vec::new(),
            host_log: Vec::new(),
            host_files: BTreeMap::new(),
            memory_digest: String::new(),
        }
    }

    pub fn csv(&self) -> String {
        load_csv_string(&self.loads)
    }

    /// Structural checks every run must satisfy.
    pub fn checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        let mut check = |name: String, pass: bool| out.push(Check { name, pass });
        for l in &self.loads {
            let n = l.n as u64;
            let (off, on) = match l.strategy {
                Strategy::Serial => (n + 1, 0),
                Strategy::Tree => (2, n - 1),
            };
            check(
                format!("{} load copies (N={})", l.strategy.name(), l.n),
                l.offchip_copies == off && l.onchip_copies == on,
            );
        }
        check("re-execute moves 0 bytes".into(), self.re_execute_bytes_moved == 0);
        check("re-execute reproduces results".into(), self.returns_match);
        for c in &self.cannon {
            check(format!("cannon {} matches oracle", c.variant.name()), c.correct);
        }
        out
    }

    pub fn render_text(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(t, "seed: {}", self.seed);
        let _ = writeln!(t, "cores: {}  strategy: {}", self.cores, self.strategy.name());
        for l in &self.loads {
            let _ = writeln!(
                t,
                "load: payload={} offchip_copies={} onchip_copies={} rounds={} elapsed_us={}",
                l.payload_bytes, l.offchip_copies, l.onchip_copies, l.rounds, l.elapsed_us
            );
        }
        let _ = writeln!(t, "execute: elapsed_us={}", self.execute_elapsed_us);
        let _ = writeln!(
            t,
            "re-execute: elapsed_us={} bytes_moved={} signals={}",
            self.re_execute_elapsed_us, self.re_execute_bytes_moved, self.re_execute_signals
        );
        for c in &self.cannon {
            let _ = writeln!(
                t,
                "cannon {}: usrcore={} elapsed_us={} correctness {}",
                c.variant.name(),
                c.usrcore_bytes,
                c.elapsed_us,
                if c.correct { "PASS" } else { "FAIL" }
            );
        }
        for line in &self.host_log {
            let _ = writeln!(t, "host: {line}");
        }
        let _ = writeln!(t, "memory sha256: {}", self.memory_digest);
        t
    }
}
