//! Syscore initialization, user-program loading and kernel launch.
//!
//! A load is described by a [`LoadPlan`]: host copies run back to back,
//! then on-chip rounds in which every copy of a round runs in parallel.
//! The same plan drives both the cost estimate and the copies performed on
//! a machine, so the two always agree.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dyncall::DcState;
use crate::error::{Result, SimError};
use crate::kernel_vm::{Ledger, LoadedProgram};
use crate::layout::{ProgramImage, SegmentKind};
use crate::memspace::DeviceAddress;
use crate::mesh::{CopyReport, CoreId, CoreState, Machine, MeshConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Serial,
    Tree,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Serial => "serial",
            Strategy::Tree => "tree",
        }
    }
}

/// One copy. Core operands are positions in the plan's target list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyStep {
    HostToCore { target: usize },
    HostToShared,
    CoreToCore { src: usize, dst: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Round {
    /// Copies issued one after another by the host.
    Host(Vec<CopyStep>),
    /// Core-to-core copies running concurrently.
    Mesh(Vec<CopyStep>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadPlan {
    pub strategy: Strategy,
    pub targets: usize,
    pub local_bytes: u64,
    pub shared_bytes: Option<u64>,
    pub rounds: Vec<Round>,
}

impl LoadPlan {
    /// Plan for delivering `local_bytes` to each of `targets` cores and, if
    /// given, `shared_bytes` once to shared memory.
    pub fn new(strategy: Strategy, targets: usize, local_bytes: u64, shared_bytes: Option<u64>) -> Self {
        let mut rounds = Vec::new();
        match strategy {
            Strategy::Serial => {
                rounds.push(Round::Host(
                    (0..targets).map(|target| CopyStep::HostToCore { target }).collect(),
                ));
            }
            Strategy::Tree if targets > 0 => {
                rounds.push(Round::Host(vec![CopyStep::HostToCore { target: 0 }]));
                let mut have = 1;
                while have < targets {
                    let copies = (0..have)
                        .filter(|k| k + have < targets)
                        .map(|k| CopyStep::CoreToCore { src: k, dst: k + have })
                        .collect();
                    rounds.push(Round::Mesh(copies));
                    have *= 2;
                }
            }
            Strategy::Tree => {}
        }
        if shared_bytes.is_some() {
            rounds.push(Round::Host(vec![CopyStep::HostToShared]));
        }
        LoadPlan {
            strategy,
            targets,
            local_bytes,
            shared_bytes,
            rounds,
        }
    }

    pub fn mesh_rounds(&self) -> u32 {
        self.rounds.iter().filter(|r| matches!(r, Round::Mesh(_))).count() as u32
    }

    /// Composes per-copy reports: host copies add, copies within a mesh
    /// round take the maximum, rounds add.
    fn fold(&self, mut copy: impl FnMut(CopyStep) -> Result<CopyReport>) -> Result<CopyReport> {
        let mut total = CopyReport::zero();
        for round in &self.rounds {
            let r = match round {
                Round::Host(steps) => {
                    let mut acc = CopyReport::zero();
                    for &s in steps {
                        acc = acc.then(copy(s)?);
                    }
                    acc
                }
                Round::Mesh(steps) => {
                    let mut acc = CopyReport::zero();
                    for &s in steps {
                        acc = acc.alongside(copy(s)?);
                    }
                    acc.rounds = 1;
                    acc
                }
            };
            total = total.then(r);
        }
        Ok(total)
    }

    /// Cost of the plan under `cfg` without touching any machine.
    pub fn estimate(&self, cfg: &MeshConfig) -> CopyReport {
        let (local, shared) = (self.local_bytes, self.shared_bytes.unwrap_or(0));
        self.fold(|s| {
            Ok(match s {
                CopyStep::HostToCore { .. } => offchip(cfg, local),
                CopyStep::HostToShared => offchip(cfg, shared),
                CopyStep::CoreToCore { .. } => CopyReport {
                    bytes_moved: local,
                    onchip_copies: 1,
                    elapsed: cfg.onchip_cost(local),
                    ..CopyReport::zero()
                },
            })
        })
        .expect("estimation does not fail")
    }
}

fn offchip(cfg: &MeshConfig, bytes: u64) -> CopyReport {
    CopyReport {
        bytes_moved: bytes,
        offchip_copies: 1,
        elapsed: cfg.offchip_cost(bytes),
        ..CopyReport::zero()
    }
}

/// Options for a hot load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HotLoad {
    /// Cores to load; `None` loads every core.
    pub targets: Option<Vec<CoreId>>,
    pub include_usrmem: bool,
    pub strategy: Strategy,
}

impl Default for HotLoad {
    fn default() -> Self {
        HotLoad {
            targets: None,
            include_usrmem: true,
            strategy: Strategy::Tree,
        }
    }
}

/// Outcome of one kernel execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub elapsed: f64,
    /// Start signals sent, one per participating core.
    pub signals: usize,
    /// Loader copies made for this execution; always zero.
    pub copies: CopyReport,
    /// Per-core return values in row-major order.
    pub returns: Vec<(CoreId, u32)>,
    /// Sum of the participating cores' ledgers.
    pub ledger: Ledger,
}

impl ExecReport {
    pub fn bytes_moved(&self) -> u64 {
        self.copies.bytes_moved
    }
}

fn sum_ledgers<'a>(ls: impl Iterator<Item = &'a Ledger>) -> Ledger {
    let mut t = Ledger::default();
    for l in ls {
        t.ops += l.ops;
        t.compute_us += l.compute_us;
        t.copy_us += l.copy_us;
        t.dc_us += l.dc_us;
        t.hostcall_wait_us += l.hostcall_wait_us;
        t.barrier_wait_us += l.barrier_wait_us;
        t.bytes_read += l.bytes_read;
        t.bytes_written += l.bytes_written;
        t.onchip_copies += l.onchip_copies;
        t.onchip_bytes += l.onchip_bytes;
        t.dc_copies += l.dc_copies;
        t.dc_bytes += l.dc_bytes;
        t.dc_indirections += l.dc_indirections;
        t.hostcalls += l.hostcalls;
    }
    t
}

impl Machine {
    fn check_image(&self, image: &ProgramImage) -> Result<()> {
        if image.local_mem_bytes != self.config.local_mem_bytes || image.shared_size != self.config.shared_size {
            return Err(SimError::ImageMismatch(format!(
                "image built for {} local / {} shared bytes, machine has {} / {}",
                image.local_mem_bytes, image.shared_size, self.config.local_mem_bytes, self.config.shared_size
            )));
        }
        Ok(())
    }

    /// Runs `plan` over the cores `targets` (row-major indices), copying
    /// `local` to `local_offset` on each and `shared` to `shared_offset`.
    fn run_plan(
        &mut self,
        plan: &LoadPlan,
        targets: &[usize],
        local_offset: u32,
        local: &[u8],
        shared_offset: u32,
        shared: &[u8],
    ) -> Result<CopyReport> {
        let ids: Vec<CoreId> = targets.iter().map(|&i| self.cores[i].id()).collect();
        let at = |m: &Machine, t: usize| m.mem.encode(ids[t].row, ids[t].col, local_offset);
        let report = plan.fold(|s| match s {
            CopyStep::HostToCore { target } => {
                let dst = at(self, target)?;
                self.offchip_copy(dst, local)
            }
            CopyStep::HostToShared => {
                let dst = self.mem.shared(shared_offset);
                self.offchip_copy(dst, shared)
            }
            CopyStep::CoreToCore { src, dst } => {
                let (s, d) = (at(self, src)?, at(self, dst)?);
                self.onchip_copy(s, d, local.len() as u32)
            }
        })?;
        self.now += report.elapsed;
        Ok(report)
    }

    /// Loads syscore and sysmem once and parks every core in syscore.
    pub fn init_syscore(&mut self, image: &ProgramImage) -> Result<CopyReport> {
        if self.syscore_digest.is_some() || self.cores.iter().any(|c| c.state() != CoreState::Off) {
            return Err(SimError::AlreadyInitialized);
        }
        self.check_image(image)?;
        let sys = image.segment(SegmentKind::Syscore);
        let sm = image.segment(SegmentKind::Sysmem);
        let targets: Vec<usize> = (0..self.cores.len()).collect();
        let plan = LoadPlan::new(
            Strategy::Tree,
            targets.len(),
            sys.payload.len() as u64,
            Some(sm.payload.len() as u64),
        );
        let report = self.run_plan(&plan, &targets, sys.offset, &sys.payload, sm.offset, &sm.payload)?;
        for core in &mut self.cores {
            core.clock = self.now;
            core.transition(CoreState::SyscoreWait)?;
        }
        self.syscore_digest = Some(Sha256::digest(&sys.payload).into());
        self.syscore_size = Some(sys.payload.len() as u32);
        Ok(report)
    }

    pub fn syscore_initialized(&self) -> bool {
        self.syscore_digest.is_some()
    }

    /// SHA-256 of the syscore bytes currently in core `id`'s memory.
    pub fn syscore_hash(&self, id: CoreId) -> Result<[u8; 32]> {
        let len = self.syscore_len()?;
        let bytes = self.mem.read_bytes(self.mem.encode(id.row, id.col, 0)?, len)?;
        Ok(Sha256::digest(&bytes).into())
    }

    fn syscore_len(&self) -> Result<u32> {
        self.syscore_size.ok_or(SimError::NotInitialized)
    }

    /// True when every core's syscore bytes match what init wrote.
    pub fn syscore_intact(&self) -> Result<bool> {
        let want = self.syscore_digest.ok_or(SimError::NotInitialized)?;
        for c in &self.cores {
            if self.syscore_hash(c.id())? != want {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn require_waiting(&self) -> Result<()> {
        if self.syscore_digest.is_none() {
            return Err(SimError::NotInitialized);
        }
        if let Some(c) = self.cores.iter().find(|c| c.state() != CoreState::SyscoreWait) {
            return Err(SimError::NotInWaitState {
                core: c.id(),
                state: c.state(),
            });
        }
        Ok(())
    }

    /// Loads the user segments of `image` onto every core: one host copy
    /// per core.
    pub fn serial_load(&mut self, image: &ProgramImage) -> Result<CopyReport> {
        self.load_user(image, Strategy::Serial, None, true)
    }

    /// Loads the user segments of `image` onto every core: one host copy
    /// to core 0, then doubling rounds over the mesh.
    pub fn tree_load(&mut self, image: &ProgramImage) -> Result<CopyReport> {
        self.load_user(image, Strategy::Tree, None, true)
    }

    /// Replaces user segments while cores wait in syscore.
    pub fn hot_load(&mut self, image: &ProgramImage, opts: &HotLoad) -> Result<CopyReport> {
        self.load_user(image, opts.strategy, opts.targets.as_deref(), opts.include_usrmem)
    }

    pub fn load(&mut self, image: &ProgramImage, strategy: Strategy) -> Result<CopyReport> {
        self.load_user(image, strategy, None, true)
    }

    fn load_user(
        &mut self,
        image: &ProgramImage,
        strategy: Strategy,
        targets: Option<&[CoreId]>,
        include_usrmem: bool,
    ) -> Result<CopyReport> {
        self.require_waiting()?;
        self.check_image(image)?;
        let sys_digest: [u8; 32] = Sha256::digest(&image.segment(SegmentKind::Syscore).payload).into();
        if Some(sys_digest) != self.syscore_digest {
            return Err(SimError::ImageMismatch(
                "image syscore differs from the initialized syscore".into(),
            ));
        }
        let mut idx: Vec<usize> = match targets {
            None => (0..self.cores.len()).collect(),
            Some(ids) => ids.iter().map(|&id| self.core_index(id)).collect::<Result<_>>()?,
        };
        idx.sort_unstable();
        idx.dedup();
        let uc = image.segment(SegmentKind::Usrcore);
        let um = image.segment(SegmentKind::Usrmem);
        let plan = LoadPlan::new(
            strategy,
            idx.len(),
            uc.payload.len() as u64,
            include_usrmem.then_some(um.payload.len() as u64),
        );
        let report = self.run_plan(&plan, &idx, uc.offset, &uc.payload, um.offset, &um.payload)?;
        let program = Arc::new(LoadedProgram::new(Arc::new(image.clone())));
        for &i in &idx {
            let core = &mut self.cores[i];
            core.program = Some(program.clone());
            core.dc = DcState::for_image(image);
            core.clock = self.now;
        }
        if include_usrmem {
            if let Some(d) = self.daemon.as_mut() {
                d.bind_image(image);
            }
        }
        self.last_run = None;
        Ok(report)
    }

    /// Signals every core holding a program to start at its launch stub
    /// and runs until all return.
    pub fn execute(&mut self, argv: DeviceAddress) -> Result<ExecReport> {
        let ids: Vec<CoreId> = self
            .cores
            .iter()
            .filter(|c| c.program.is_some())
            .map(|c| c.id())
            .collect();
        if ids.is_empty() {
            return Err(SimError::NoImageLoaded(self.cores[0].id()));
        }
        self.execute_on(&ids, argv)
    }

    pub fn execute_on(&mut self, ids: &[CoreId], argv: DeviceAddress) -> Result<ExecReport> {
        let mut idx: Vec<usize> = ids.iter().map(|&id| self.core_index(id)).collect::<Result<_>>()?;
        idx.sort_unstable();
        idx.dedup();
        for &i in &idx {
            let c = &self.cores[i];
            if c.program.is_none() {
                return Err(SimError::NoImageLoaded(c.id()));
            }
            if c.state() != CoreState::SyscoreWait {
                return Err(SimError::NotInWaitState {
                    core: c.id(),
                    state: c.state(),
                });
            }
        }
        for &i in &idx {
            let id = self.cores[i].id();
            let entry = self.entry_address(id)?;
            self.signal_start(id, entry, argv)?;
        }
        let elapsed = self.run_until_idle()?;
        self.last_run = Some((idx.clone(), argv));
        Ok(ExecReport {
            elapsed,
            signals: idx.len(),
            copies: CopyReport::zero(),
            returns: idx
                .iter()
                .map(|&i| (self.cores[i].id(), self.cores[i].last_return.unwrap_or(0)))
                .collect(),
            ledger: sum_ledgers(idx.iter().map(|&i| &self.cores[i].ledger)),
        })
    }

    /// Runs the last executed kernel again with the same argv. Only start
    /// signals are sent.
    pub fn re_execute(&mut self) -> Result<ExecReport> {
        let (idx, argv) = self.last_run.clone().ok_or(SimError::NoPriorExecution)?;
        let ids: Vec<CoreId> = idx.iter().map(|&i| self.cores[i].id()).collect();
        self.execute_on(&ids, argv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_plan_shape() {
        let p = LoadPlan::new(Strategy::Tree, 16, 8192, Some(0));
        assert_eq!(p.mesh_rounds(), 4);
        let r = p.estimate(&MeshConfig::default());
        assert_eq!((r.offchip_copies, r.onchip_copies, r.rounds), (2, 15, 4));
        let p = LoadPlan::new(Strategy::Tree, 5, 1, None);
        let Round::Mesh(last) = &p.rounds[3] else { panic!() };
        assert_eq!(last, &vec![CopyStep::CoreToCore { src: 0, dst: 4 }]);
    }

    #[test]
    fn usrcore_times_match_hand_arithmetic() {
        let cfg = MeshConfig::default();
        let serial = LoadPlan::new(Strategy::Serial, 16, 8192, None).estimate(&cfg);
        let tree = LoadPlan::new(Strategy::Tree, 16, 8192, None).estimate(&cfg);
        assert!((serial.elapsed - 16.0 * 91.92).abs() < 1e-9);
        assert!((tree.elapsed - (91.92 + 4.0 * 18.192)).abs() < 1e-9);
        assert!(serial.elapsed / tree.elapsed > 8.9 && serial.elapsed / tree.elapsed < 9.0);
    }

    #[test]
    fn single_core_tree_is_serial() {
        let cfg = MeshConfig::default();
        let t = LoadPlan::new(Strategy::Tree, 1, 100, Some(10)).estimate(&cfg);
        let s = LoadPlan::new(Strategy::Serial, 1, 100, Some(10)).estimate(&cfg);
        assert_eq!(t, s);
        assert_eq!(t.rounds, 0);
    }
}
