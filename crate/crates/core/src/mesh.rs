//! The simulated core array and its discrete-event engine.
//!
//! Time is continuous microseconds. Each core keeps its own clock; the
//! engine always advances the runnable core with the smallest clock (ties
//! broken by row-major index), one kernel op per event, and polls the host
//! daemon after every event. Loader copies are host-driven episodes that
//! advance the machine clock by their schedule's elapsed time.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dyncall::DcState;
use crate::error::{Result, SimError};
use crate::hostcall::{HostDaemon, Mailbox, HOSTCALL_REQ};
use crate::kernel_vm::{self, BarrierGroup, ExecContext, Ledger, LoadedProgram, StepOutcome};
use crate::memspace::{
    DeviceAddress, MapGeometry, MemoryMap, Region, DEFAULT_LOCAL_MEM_BYTES, DEFAULT_SHARED_SIZE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub rows: u32,
    pub cols: u32,
    /// Core id of logical core (0, 0).
    pub origin_row: u32,
    pub origin_col: u32,
    pub local_mem_bytes: u32,
    pub shared_size: u32,
    /// Host to coprocessor bandwidth, bytes per microsecond.
    pub offchip_bandwidth: f64,
    /// Core to core bandwidth over the mesh, bytes per microsecond.
    pub onchip_bandwidth: f64,
    /// Fixed cost of starting any copy, microseconds.
    pub copy_setup_latency: f64,
    /// Core-side wait for a host call that does no work, microseconds.
    pub hostcall_roundtrip: f64,
    /// Multiplier on compute cost of code fetched from global memory.
    pub globalmem_fetch_penalty: f64,
    /// Extra cost of calling a dynamic function that is already resident.
    pub dc_indirection_latency: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            rows: 4,
            cols: 4,
            origin_row: 1,
            origin_col: 0,
            local_mem_bytes: DEFAULT_LOCAL_MEM_BYTES,
            shared_size: DEFAULT_SHARED_SIZE,
            offchip_bandwidth: 100.0,
            onchip_bandwidth: 1000.0,
            copy_setup_latency: 10.0,
            hostcall_roundtrip: 41.0,
            globalmem_fetch_penalty: 15.0,
            dc_indirection_latency: 0.01,
        }
    }
}

impl MeshConfig {
    /// A mesh holding exactly `n` cores, as close to square as possible.
    pub fn with_cores(n: u32) -> Self {
        let (rows, cols) = mesh_shape(n);
        MeshConfig {
            rows,
            cols,
            ..MeshConfig::default()
        }
    }

    pub fn core_count(&self) -> usize {
        (self.rows as usize) * (self.cols as usize)
    }

    pub fn geometry(&self) -> MapGeometry {
        MapGeometry {
            rows: self.rows,
            cols: self.cols,
            origin_row: self.origin_row,
            origin_col: self.origin_col,
            local_mem_bytes: self.local_mem_bytes,
            shared_size: self.shared_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be at least 1");
        }
        if !(self.offchip_bandwidth > 0.0) {
            return bad("offchip_bandwidth must be positive");
        }
        if !(self.onchip_bandwidth >= self.offchip_bandwidth) {
            return bad("onchip_bandwidth must be at least offchip_bandwidth");
        }
        if !(self.copy_setup_latency >= 0.0) || !(self.hostcall_roundtrip >= 0.0) {
            return bad("latencies must be non-negative");
        }
        if !(self.globalmem_fetch_penalty >= 1.0) {
            return bad("globalmem_fetch_penalty must be at least 1");
        }
        if !(self.dc_indirection_latency >= 0.0) {
            return bad("dc_indirection_latency must be non-negative");
        }
        Ok(())
    }

    pub fn offchip_cost(&self, bytes: u64) -> f64 {
        self.copy_setup_latency + bytes as f64 / self.offchip_bandwidth
    }

    pub fn onchip_cost(&self, bytes: u64) -> f64 {
        self.copy_setup_latency + bytes as f64 / self.onchip_bandwidth
    }
}

/// Most-square factorization of `n` with at most 64 columns.
pub fn mesh_shape(n: u32) -> (u32, u32) {
    let n = n.max(1);
    let mut best = (n, 1);
    let mut c = 1;
    while c * c <= n {
        if n.is_multiple_of(c) {
            let r = n / c;
            // prefer rows <= cols, then cols within one address field
            let cand = if r <= 64 { (c, r) } else { (r, c) };
            best = cand;
        }
        c += 1;
    }
    best
}

/// Logical coordinates of a mesh core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoreId {
    pub row: u32,
    pub col: u32,
}

impl CoreId {
    pub fn new(row: u32, col: u32) -> Self {
        CoreId { row, col }
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoreState {
    Off,
    SyscoreWait,
    Running,
    HostCallSpin,
}

impl CoreState {
    /// Low bits of the run-state register.
    pub fn code(self) -> u32 {
        match self {
            CoreState::Off => 0,
            CoreState::SyscoreWait => 1,
            CoreState::Running => 2,
            CoreState::HostCallSpin => 3,
        }
    }

    pub fn can_become(self, to: CoreState) -> bool {
        use CoreState::*;
        matches!(
            (self, to),
            (Off, SyscoreWait)
                | (SyscoreWait, Running)
                | (Running, HostCallSpin)
                | (HostCallSpin, Running)
                | (Running, SyscoreWait)
        )
    }
}

/// One mesh node.
pub struct Core {
    id: CoreId,
    runstate: u32,
    state: CoreState,
    pub(crate) clock: f64,
    pub(crate) mailbox: Mailbox,
    pub(crate) program: Option<Arc<LoadedProgram>>,
    pub(crate) dc: DcState,
    pub(crate) exec: Option<Box<ExecContext>>,
    pub(crate) ledger: Ledger,
    pub(crate) last_return: Option<u32>,
    pub(crate) barrier: Option<BarrierKey>,
}

impl Core {
    fn new(id: CoreId) -> Self {
        Core {
            id,
            runstate: CoreState::Off.code(),
            state: CoreState::Off,
            clock: 0.0,
            mailbox: Mailbox::default(),
            program: None,
            dc: DcState::default(),
            exec: None,
            ledger: Ledger::default(),
            last_return: None,
            barrier: None,
        }
    }

    pub fn id(&self) -> CoreId {
        self.id
    }

    pub fn state(&self) -> CoreState {
        self.state
    }

    pub fn runstate(&self) -> u32 {
        self.runstate
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn mailbox(&self) -> &Mailbox {
        &self.mailbox
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn dc_state(&self) -> &DcState {
        &self.dc
    }

    pub fn last_return(&self) -> Option<u32> {
        self.last_return
    }

    pub fn program(&self) -> Option<&Arc<LoadedProgram>> {
        self.program.as_ref()
    }

    /// Moves along one edge of the core state machine. The HOSTCALL_REQ bit
    /// is set exactly while the core spins on a host call.
    pub(crate) fn transition(&mut self, to: CoreState) -> Result<()> {
        if !self.state.can_become(to) {
            return Err(SimError::IllegalTransition {
                core: self.id,
                from: self.state,
                to,
            });
        }
        self.state = to;
        self.runstate = to.code() | if to == CoreState::HostCallSpin { HOSTCALL_REQ } else { 0 };
        Ok(())
    }

    fn runnable(&self) -> bool {
        self.state == CoreState::Running && self.barrier.is_none() && self.exec.is_some()
    }
}

/// Identifies the set of cores meeting at a barrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BarrierKey {
    pub group: BarrierGroup,
    pub line: u32,
}

impl BarrierKey {
    fn admits(&self, id: CoreId) -> bool {
        match self.group {
            BarrierGroup::All => true,
            BarrierGroup::Row => id.row == self.line,
            BarrierGroup::Col => id.col == self.line,
        }
    }
}

/// Measurements of one copy or a composed schedule of copies.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CopyReport {
    pub bytes_moved: u64,
    pub offchip_copies: u64,
    pub onchip_copies: u64,
    pub elapsed: f64,
    pub rounds: u32,
}

impl CopyReport {
    pub fn zero() -> Self {
        CopyReport::default()
    }

    /// Sequential composition: times add.
    pub fn then(self, next: CopyReport) -> CopyReport {
        CopyReport {
            bytes_moved: self.bytes_moved + next.bytes_moved,
            offchip_copies: self.offchip_copies + next.offchip_copies,
            onchip_copies: self.onchip_copies + next.onchip_copies,
            elapsed: self.elapsed + next.elapsed,
            rounds: self.rounds + next.rounds,
        }
    }

    /// Parallel composition within one round: times compose by maximum.
    pub fn alongside(self, other: CopyReport) -> CopyReport {
        CopyReport {
            bytes_moved: self.bytes_moved + other.bytes_moved,
            offchip_copies: self.offchip_copies + other.offchip_copies,
            onchip_copies: self.onchip_copies + other.onchip_copies,
            elapsed: self.elapsed.max(other.elapsed),
            rounds: self.rounds.max(other.rounds),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub core: CoreId,
    pub what: &'static str,
    pub start: f64,
    pub end: f64,
}

/// The whole simulated platform: cores, memory, host daemon and clock.
pub struct Machine {
    pub(crate) config: MeshConfig,
    pub(crate) mem: MemoryMap,
    pub(crate) cores: Vec<Core>,
    pub(crate) now: f64,
    pub(crate) daemon: Option<HostDaemon>,
    pub(crate) syscore_digest: Option<[u8; 32]>,
    pub(crate) syscore_size: Option<u32>,
    pub(crate) episode: Vec<usize>,
    pub(crate) last_run: Option<(Vec<usize>, DeviceAddress)>,
    trace: Option<Vec<TraceEvent>>,
}

impl fmt::Debug for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Machine")
            .field("config", &self.config)
            .field("now", &self.now)
            .finish_non_exhaustive()
    }
}

impl Machine {
    pub fn new(config: MeshConfig) -> Result<Self> {
        config.validate()?;
        let mem = MemoryMap::new(config.geometry())?;
        let cores = (0..config.rows)
            .flat_map(|r| (0..config.cols).map(move |c| Core::new(CoreId::new(r, c))))
            .collect();
        Ok(Machine {
            config,
            mem,
            cores,
            now: 0.0,
            daemon: None,
            syscore_digest: None,
            syscore_size: None,
            episode: Vec::new(),
            last_run: None,
            trace: None,
        })
    }

    pub fn config(&self) -> &MeshConfig {
        &self.config
    }

    pub fn memory(&self) -> &MemoryMap {
        &self.mem
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn core_count(&self) -> usize {
        self.cores.len()
    }

    pub fn index_of(&self, id: CoreId) -> Option<usize> {
        (id.row < self.config.rows && id.col < self.config.cols)
            .then(|| (id.row * self.config.cols + id.col) as usize)
    }

    pub fn core(&self, id: CoreId) -> Option<&Core> {
        self.index_of(id).map(|i| &self.cores[i])
    }

    pub(crate) fn core_index(&self, id: CoreId) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| SimError::InvalidConfig(format!("core {id} is outside the mesh")))
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Attaches the host daemon. Its heap is bound to the loaded image's
    /// usrmem, if there is one.
    pub fn attach_daemon(&mut self, mut daemon: HostDaemon) {
        if let Some(p) = self.cores.iter().find_map(|c| c.program.as_ref()) {
            daemon.bind_image(&p.image);
        }
        self.daemon = Some(daemon);
    }

    pub fn detach_daemon(&mut self) -> Option<HostDaemon> {
        self.daemon.take()
    }

    pub fn daemon(&self) -> Option<&HostDaemon> {
        self.daemon.as_ref()
    }

    pub fn daemon_mut(&mut self) -> Option<&mut HostDaemon> {
        self.daemon.as_mut()
    }

    /// Host-driven copy into simulated memory over the off-chip link.
    pub fn offchip_copy(&mut self, dst: DeviceAddress, data: &[u8]) -> Result<CopyReport> {
        self.mem.write_bytes(dst, data)?;
        Ok(CopyReport {
            bytes_moved: data.len() as u64,
            offchip_copies: 1,
            onchip_copies: 0,
            elapsed: self.config.offchip_cost(data.len() as u64),
            rounds: 0,
        })
    }

    /// Copy over the mesh; at least one endpoint must be core-local.
    pub fn onchip_copy(&mut self, src: DeviceAddress, dst: DeviceAddress, len: u32) -> Result<CopyReport> {
        onchip_copy(&self.mem, &self.config, src, dst, len)
    }

    /// Puts a waiting core into execution at `entry` with `argv`.
    pub fn signal_start(&mut self, id: CoreId, entry: DeviceAddress, argv: DeviceAddress) -> Result<()> {
        let idx = self.core_index(id)?;
        let now = self.now;
        let core = &mut self.cores[idx];
        if core.state != CoreState::SyscoreWait {
            return Err(SimError::NotInWaitState {
                core: id,
                state: core.state,
            });
        }
        let program = core.program.clone().ok_or(SimError::NoImageLoaded(id))?;
        let stub = self.mem.encode(id.row, id.col, program.image.stub_offset)?;
        if entry != stub {
            return Err(SimError::InvalidEntry { core: id, entry });
        }
        core.exec = Some(Box::new(ExecContext::new(program, argv)));
        core.ledger = Ledger::default();
        core.last_return = None;
        core.clock = now;
        core.transition(CoreState::Running)?;
        if !self.episode.contains(&idx) {
            self.episode.push(idx);
            self.episode.sort_unstable();
        }
        Ok(())
    }

    /// Advances the engine by one event. Returns `false` once every core of
    /// the current episode has returned to syscore.
    pub fn step(&mut self) -> Result<bool> {
        let next = self
            .episode
            .iter()
            .copied()
            .filter(|&i| self.cores[i].runnable())
            .min_by(|&a, &b| {
                self.cores[a]
                    .clock
                    .total_cmp(&self.cores[b].clock)
                    .then(a.cmp(&b))
            });
        let Some(idx) = next else {
            return self.settle();
        };
        let geom = *self.mem.geometry();
        let start = self.cores[idx].clock;
        let outcome = kernel_vm::step_core(&mut self.cores[idx], &self.mem, &self.config, &geom)?;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEvent {
                core: self.cores[idx].id,
                what: outcome.label(),
                start,
                end: self.cores[idx].clock,
            });
        }
        if let StepOutcome::Barrier(key) = outcome {
            self.cores[idx].barrier = Some(key);
            self.try_release(key);
        }
        if self.daemon.is_some() {
            self.daemon_poll()?;
        }
        Ok(true)
    }

    fn settle(&mut self) -> Result<bool> {
        let busy: Vec<usize> = self
            .episode
            .iter()
            .copied()
            .filter(|&i| self.cores[i].state != CoreState::SyscoreWait)
            .collect();
        if busy.is_empty() {
            return Ok(false);
        }
        let spinning: Vec<CoreId> = busy
            .iter()
            .filter(|&&i| self.cores[i].state == CoreState::HostCallSpin)
            .map(|&i| self.cores[i].id)
            .collect();
        if !spinning.is_empty() {
            if self.daemon.is_some() && self.daemon_poll()? > 0 {
                return Ok(true);
            }
            return Err(SimError::Deadlock(format!(
                "cores {spinning:?} spin on host calls with no daemon to service them"
            )));
        }
        let waiting: Vec<CoreId> = busy
            .iter()
            .filter(|&&i| self.cores[i].barrier.is_some())
            .map(|&i| self.cores[i].id)
            .collect();
        Err(SimError::Deadlock(format!(
            "cores {waiting:?} wait at a barrier that other cores will never reach"
        )))
    }

    fn try_release(&mut self, key: BarrierKey) {
        let members: Vec<usize> = self
            .episode
            .iter()
            .copied()
            .filter(|&i| key.admits(self.cores[i].id))
            .collect();
        if members.iter().all(|&i| self.cores[i].barrier == Some(key)) {
            let t = members
                .iter()
                .map(|&i| self.cores[i].clock)
                .fold(f64::NEG_INFINITY, f64::max);
            for i in members {
                let core = &mut self.cores[i];
                core.ledger.barrier_wait_us += t - core.clock;
                core.clock = t;
                core.barrier = None;
            }
        }
    }

    /// Runs the current episode to completion and returns its elapsed time:
    /// the latest finishing clock among its cores minus the episode start.
    pub fn run_until_idle(&mut self) -> Result<f64> {
        let start = self.now;
        while self.step()? {}
        let end = self
            .episode
            .iter()
            .map(|&i| self.cores[i].clock)
            .fold(start, f64::max);
        self.now = end;
        self.episode.clear();
        Ok(end - start)
    }

    /// Services every pending mailbox in row-major order.
    pub fn daemon_poll(&mut self) -> Result<usize> {
        let daemon = self.daemon.as_mut().ok_or(SimError::NoDaemon)?;
        let mut serviced = 0;
        for core in self.cores.iter_mut() {
            if core.mailbox.is_pending() {
                daemon.service(core, &self.mem, &self.config)?;
                serviced += 1;
            }
        }
        Ok(serviced)
    }

    /// Address of the launch stub on `id` for the program loaded there.
    pub fn entry_address(&self, id: CoreId) -> Result<DeviceAddress> {
        let core = self.core(id).ok_or_else(|| SimError::InvalidConfig(format!("no core {id}")))?;
        let program = core.program.as_ref().ok_or(SimError::NoImageLoaded(id))?;
        Ok(self.mem.encode(id.row, id.col, program.image.stub_offset)?)
    }

    /// SHA-256 of all simulated memory.
    pub fn memory_digest(&self) -> [u8; 32] {
        self.mem.state_digest()
    }
}

pub(crate) fn onchip_copy(
    mem: &MemoryMap,
    cfg: &MeshConfig,
    src: DeviceAddress,
    dst: DeviceAddress,
    len: u32,
) -> Result<CopyReport> {
    let local = |a| matches!(mem.decode(a), Region::CoreLocal { .. });
    // validate both ends before checking the endpoint rule
    mem.host_view(src, len)?;
    mem.host_view(dst, len)?;
    if !local(src) && !local(dst) {
        return Err(SimError::OffChipEndpoints { src, dst });
    }
    mem.copy(src, dst, len)?;
    Ok(CopyReport {
        bytes_moved: len as u64,
        offchip_copies: 0,
        onchip_copies: 1,
        elapsed: cfg.onchip_cost(len as u64),
        rounds: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_config_is_valid() {
        MeshConfig::default().validate().unwrap();
        let mut c = MeshConfig::default();
        c.onchip_bandwidth = 10.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes() {
        assert_eq!(mesh_shape(1), (1, 1));
        assert_eq!(mesh_shape(2), (1, 2));
        assert_eq!(mesh_shape(16), (4, 4));
        assert_eq!(mesh_shape(64), (8, 8));
        assert_eq!(mesh_shape(1024), (32, 32));
        assert_eq!(mesh_shape(12), (3, 4));
    }

    #[test]
    fn offchip_copy_costs() {
        let mut m = Machine::new(MeshConfig::default()).unwrap();
        let dst = m.memory().encode(0, 0, 0).unwrap();
        let r = m.offchip_copy(dst, &[]).unwrap();
        assert_eq!(r.elapsed, 10.0);
        assert_eq!(r.offchip_copies, 1);
        let r = m.offchip_copy(dst, &vec![7u8; 8192]).unwrap();
        assert!((r.elapsed - 91.92).abs() < 1e-12);
    }

    #[test]
    fn offchip_copy_rejects_straddle() {
        let mut m = Machine::new(MeshConfig::default()).unwrap();
        let dst = m.memory().encode(0, 0, DEFAULT_LOCAL_MEM_BYTES - 4).unwrap();
        assert!(matches!(
            m.offchip_copy(dst, &[0; 8]),
            Err(SimError::Mem(crate::memspace::MemError::InvalidAddress(_)))
        ));
    }

    #[test]
    fn onchip_copy_costs_and_fidelity() {
        let mut m = Machine::new(MeshConfig::default()).unwrap();
        let src = m.memory().encode(0, 0, 0x100).unwrap();
        let dst = m.memory().encode(0, 1, 0x100).unwrap();
        let data: Vec<u8> = (0..8192u32).map(|i| (i * 7) as u8).collect();
        m.memory().write_bytes(src, &data).unwrap();
        let r = m.onchip_copy(src, dst, 8192).unwrap();
        assert!((r.elapsed - 18.192).abs() < 1e-12);
        assert_eq!(r.onchip_copies, 1);
        assert_eq!(m.memory().read_bytes(dst, 8192).unwrap(), data);
        assert_eq!(m.onchip_copy(src, dst, 0).unwrap().elapsed, 10.0);
        let s1 = m.memory().shared(0);
        let s2 = m.memory().shared(64);
        assert!(matches!(
            m.onchip_copy(s1, s2, 4),
            Err(SimError::OffChipEndpoints { .. })
        ));
    }

    #[test]
    fn copy_report_composition() {
        let a = CopyReport { bytes_moved: 1, offchip_copies: 1, onchip_copies: 0, elapsed: 3.0, rounds: 0 };
        let b = CopyReport { bytes_moved: 2, offchip_copies: 0, onchip_copies: 1, elapsed: 5.0, rounds: 1 };
        assert_eq!(a.then(b).elapsed, 8.0);
        assert_eq!(a.alongside(b).elapsed, 5.0);
        assert_eq!(a.alongside(b).bytes_moved, 3);
    }

    #[test]
    fn empty_machine_is_idle() {
        let mut m = Machine::new(MeshConfig::default()).unwrap();
        assert_eq!(m.run_until_idle().unwrap(), 0.0);
    }

    const ALL: [CoreState; 4] = [
        CoreState::Off,
        CoreState::SyscoreWait,
        CoreState::Running,
        CoreState::HostCallSpin,
    ];

    proptest! {
        #[test]
        fn state_machine_never_leaves_allowed_edges(seq in proptest::collection::vec(0usize..4, 0..64)) {
            let mut core = Core::new(CoreId::new(0, 0));
            for s in seq {
                let to = ALL[s];
                let from = core.state();
                match core.transition(to) {
                    Ok(()) => prop_assert!(from.can_become(to)),
                    Err(_) => prop_assert_eq!(core.state(), from),
                }
                let spin = core.state() == CoreState::HostCallSpin;
                prop_assert_eq!(core.runstate() & HOSTCALL_REQ != 0, spin);
                prop_assert_eq!(core.runstate() & !HOSTCALL_REQ, core.state().code());
            }
        }
    }
}
