//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists; configuration arguments take the same shapes as the JSON files.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::de::DeserializeOwned;
use serde::Serialize;

use meshrt_core::report::{bench_load as core_bench_load, load_csv_string};
use meshrt_core::scenario::{Scenario, ScenarioError};
use meshrt_core::workloads::{run_cannon as core_run_cannon, CannonSpec, CannonVariant};
use meshrt_core::{
    build_image, occupancy, DeviceAddress, LoadPlan, MeshConfig, ProgramImage, ProgramManifest, RuntimeParams,
    SimError, Strategy,
};

fn sim_err(e: SimError) -> PyErr {
    match ScenarioError::from(e) {
        e @ ScenarioError::Invalid(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn scenario_err(e: ScenarioError) -> PyErr {
    match e {
        ScenarioError::Invalid(m) => PyValueError::new_err(m),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Serializes through JSON into native Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn opt_from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    obj.map(from_py).unwrap_or_else(|| Ok(T::default()))
}

fn strategy(name: &str) -> PyResult<Strategy> {
    match name {
        "serial" => Ok(Strategy::Serial),
        "tree" => Ok(Strategy::Tree),
        other => Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
    }
}

fn variant(name: &str) -> PyResult<CannonVariant> {
    CannonVariant::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown variant {name:?}")))
}

fn build(manifest: &Bound<'_, PyAny>, runtime: Option<&Bound<'_, PyAny>>, cfg: &MeshConfig) -> PyResult<ProgramImage> {
    let manifest: ProgramManifest = from_py(manifest)?;
    let params: RuntimeParams = opt_from_py(runtime)?;
    build_image(&manifest, &params, cfg).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Occupancy and segment table of a program manifest.
#[pyfunction]
#[pyo3(signature = (manifest, runtime=None, mesh=None))]
fn layout<'py>(
    py: Python<'py>,
    manifest: &Bound<'py, PyAny>,
    runtime: Option<&Bound<'py, PyAny>>,
    mesh: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: MeshConfig = opt_from_py(mesh)?;
    let image = build(manifest, runtime, &cfg)?;
    let v = serde_json::json!({
        "occupancy": occupancy(&image),
        "segments": image.segments,
        "usrcore_bytes": image.usrcore_size(),
    });
    to_py(py, &v)
}

/// Serial and tree load estimates, one dict per (strategy, N).
#[pyfunction]
#[pyo3(signature = (ns, payload=8192, usrmem=0, mesh=None))]
fn bench_load<'py>(
    py: Python<'py>,
    ns: Vec<u32>,
    payload: u64,
    usrmem: u64,
    mesh: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    if ns.contains(&0) {
        return Err(PyValueError::new_err("core counts must be at least 1"));
    }
    let cfg: MeshConfig = opt_from_py(mesh)?;
    cfg.validate().map_err(sim_err)?;
    to_py(py, &core_bench_load(&ns, payload, usrmem, &cfg))
}

/// Closed-form cost of one load.
#[pyfunction]
#[pyo3(signature = (strategy_name, n, payload, usrmem=None, mesh=None))]
fn load_estimate<'py>(
    py: Python<'py>,
    strategy_name: &str,
    n: usize,
    payload: u64,
    usrmem: Option<u64>,
    mesh: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: MeshConfig = opt_from_py(mesh)?;
    let plan = LoadPlan::new(strategy(strategy_name)?, n, payload, usrmem);
    to_py(py, &plan.estimate(&cfg))
}

/// Loads and runs one Cannon variant on a fresh machine.
#[pyfunction]
#[pyo3(signature = (p=4, n=16, variant_name="all_local", seed=1, mac_us=0.01, strategy_name="tree", runtime=None))]
#[allow(clippy::too_many_arguments)]
fn run_cannon<'py>(
    py: Python<'py>,
    p: u32,
    n: u32,
    variant_name: &str,
    seed: u64,
    mac_us: f64,
    strategy_name: &str,
    runtime: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = CannonSpec { p, n, seed, mac_us };
    let params: RuntimeParams = opt_from_py(runtime)?;
    let cfg = MeshConfig {
        rows: p,
        cols: p,
        ..MeshConfig::default()
    };
    let run = core_run_cannon(&spec, variant(variant_name)?, &cfg, &params, strategy(strategy_name)?).map_err(sim_err)?;
    to_py(py, &run)
}

/// Runs a scenario file and returns its report.
#[pyfunction]
#[pyo3(signature = (path, seed=None))]
fn run_scenario<'py>(py: Python<'py>, path: PathBuf, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let mut s = Scenario::from_file(&path).map_err(scenario_err)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let report = s.run().map_err(scenario_err)?;
    let out = to_py(py, &report)?;
    out.set_item("csv", report.csv())?;
    out.set_item("text", report.render_text())?;
    Ok(out)
}

/// A simulated mesh with its host daemon.
#[pyclass(unsendable, name = "Machine")]
struct PyMachine {
    inner: meshrt_core::Machine,
    image: Option<ProgramImage>,
}

#[pymethods]
impl PyMachine {
    #[new]
    #[pyo3(signature = (mesh=None))]
    fn new(mesh: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: MeshConfig = opt_from_py(mesh)?;
        let inner = meshrt_core::Machine::new(cfg).map_err(sim_err)?;
        Ok(PyMachine { inner, image: None })
    }

    /// Builds the manifest, initializes syscore on first use and loads
    /// the user segments. Returns the load's copy report.
    #[pyo3(signature = (manifest, runtime=None, strategy_name="tree"))]
    fn load<'py>(
        &mut self,
        py: Python<'py>,
        manifest: &Bound<'py, PyAny>,
        runtime: Option<&Bound<'py, PyAny>>,
        strategy_name: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let image = build(manifest, runtime, self.inner.config())?;
        let strategy = strategy(strategy_name)?;
        if !self.inner.syscore_initialized() {
            self.inner.init_syscore(&image).map_err(sim_err)?;
        }
        let report = self.inner.load(&image, strategy).map_err(sim_err)?;
        if self.inner.daemon().is_none() {
            self.inner.attach_daemon(Default::default());
        }
        self.inner.daemon_mut().unwrap().bind_image(&image);
        self.image = Some(image);
        to_py(py, &report)
    }

    #[pyo3(signature = (argv=0))]
    fn execute<'py>(&mut self, py: Python<'py>, argv: u32) -> PyResult<Bound<'py, PyAny>> {
        let r = self.inner.execute(DeviceAddress(argv)).map_err(sim_err)?;
        to_py(py, &r)
    }

    fn re_execute<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = self.inner.re_execute().map_err(sim_err)?;
        to_py(py, &r)
    }

    /// Allocates from the shared heap; returns a device address.
    fn alloc(&mut self, size: u32) -> PyResult<u32> {
        let d = self
            .inner
            .daemon_mut()
            .ok_or_else(|| PyRuntimeError::new_err("no program loaded"))?;
        let off = d
            .services
            .heap
            .alloc(size)
            .ok_or_else(|| PyRuntimeError::new_err("shared heap exhausted"))?;
        Ok(self.inner.memory().shared(off).value())
    }

    fn read<'py>(&self, py: Python<'py>, addr: u32, len: u32) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self
            .inner
            .memory()
            .read_bytes(DeviceAddress(addr), len)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn write(&self, addr: u32, data: &[u8]) -> PyResult<()> {
        self.inner
            .memory()
            .write_bytes(DeviceAddress(addr), data)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Address of a core's local byte `offset`.
    fn local_address(&self, row: u32, col: u32, offset: u32) -> PyResult<u32> {
        let a = self
            .inner
            .memory()
            .encode(row, col, offset)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(a.value())
    }

    fn core_states<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let states: Vec<_> = self.inner.cores().iter().map(|c| (c.id(), c.state())).collect();
        to_py(py, &states)
    }

    fn host_log(&self) -> Vec<(u32, u32, String)> {
        self.inner
            .daemon()
            .map(|d| {
                d.log()
                    .iter()
                    .map(|r| (r.core.row, r.core.col, String::from_utf8_lossy(&r.bytes).into_owned()))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn layout<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let image = self
            .image
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("no program loaded"))?;
        to_py(py, &occupancy(image))
    }

    fn memory_digest(&self) -> String {
        self.inner.memory_digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    #[getter]
    fn now(&self) -> f64 {
        self.inner.now()
    }

    #[getter]
    fn core_count(&self) -> usize {
        self.inner.core_count()
    }
}

/// CSV text for rows returned by `bench_load`.
#[pyfunction]
fn load_csv(rows: &Bound<'_, PyAny>) -> PyResult<String> {
    Ok(load_csv_string(&from_py::<Vec<_>>(rows)?))
}

#[pymodule]
fn meshrt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMachine>()?;
    m.add_function(wrap_pyfunction!(layout, m)?)?;
    m.add_function(wrap_pyfunction!(bench_load, m)?)?;
    m.add_function(wrap_pyfunction!(load_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cannon, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    Ok(())
}
