//! Canned programs: Cannon's block matrix multiply in four layout variants,
//! the layout-occupancy harness manifests and a no-op kernel.
//!
//! Cannon data layout on core (i, j), from the free local offset: two A
//! buffers, two B buffers and the C accumulator, each n*n words. Inputs
//! are staged block-major in shared memory so each block is contiguous.
//! Blocks are placed pre-skewed: core (i, j) starts with k = (j - i) mod P,
//! A then shifts right and B shifts up, so after step s core (i, j) holds
//! k = (j - i - s) mod P.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::hostcall::HostDaemon;
use crate::kernel_vm::{BarrierGroup, Expr, KernelBlock, KernelOp};
use crate::layout::{build_image, FunctionRecord, Placement, ProgramImage, ProgramManifest, RuntimeParams};
use crate::loader::{ExecReport, Strategy};
use crate::memspace::{hex_digest, DeviceAddress};
use crate::mesh::{CopyReport, CoreId, Machine, MeshConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CannonVariant {
    AllLocal,
    SelectedGlobal,
    InnerGlobal,
    InnerDynamic,
}

impl CannonVariant {
    pub const ALL: [CannonVariant; 4] = [
        CannonVariant::AllLocal,
        CannonVariant::SelectedGlobal,
        CannonVariant::InnerGlobal,
        CannonVariant::InnerDynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CannonVariant::AllLocal => "all_local",
            CannonVariant::SelectedGlobal => "selected_global",
            CannonVariant::InnerGlobal => "inner_global",
            CannonVariant::InnerDynamic => "inner_dynamic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CannonSpec {
    /// Mesh side: the kernel runs on P x P cores.
    pub p: u32,
    /// Block side per core.
    pub n: u32,
    pub seed: u64,
    /// Declared cost of one multiply-accumulate.
    pub mac_us: f64,
}

impl Default for CannonSpec {
    fn default() -> Self {
        CannonSpec {
            p: 4,
            n: 16,
            seed: 1,
            mac_us: 0.01,
        }
    }
}

impl CannonSpec {
    pub fn dim(&self) -> usize {
        (self.p * self.n) as usize
    }

    pub fn block_bytes(&self) -> u32 {
        self.n * self.n * 4
    }

    /// Local bytes of block data per core.
    pub fn data_bytes(&self) -> u32 {
        5 * self.block_bytes()
    }
}

pub const CANNON_MAIN: u32 = 1;
pub const ZERO_ACCUMULATOR: u32 = 2;
pub const STORE_OUTPUT: u32 = 3;
pub const SWAP_BUFFERS: u32 = 4;
pub const LOAD_INPUTS: u32 = 5;
pub const GRID_COORDS: u32 = 6;
pub const NEIGHBOR_RANKS: u32 = 7;
pub const SHIFT_BLOCKS: u32 = 8;
pub const BLOCK_MULTIPLY: u32 = 9;

/// Functions moved to usrmem in the selected-global layout.
pub const SELECTED_HELPERS: [u32; 4] = [GRID_COORDS, NEIGHBOR_RANKS, SHIFT_BLOCKS, LOAD_INPUTS];

// register use
const A_CUR: u8 = 0;
const A_ALT: u8 = 1;
const B_CUR: u8 = 2;
const B_ALT: u8 = 3;
const ROW: u8 = 4;
const COL: u8 = 5;
const RIGHT: u8 = 6;
const UP: u8 = 7;
const I: u8 = 8;
const J: u8 = 9;
const K: u8 = 10;
const ACC: u8 = 11;
const STEP: u8 = 12;
const N: u8 = 13;
const P: u8 = 14;
const C_BUF: u8 = 15;

fn r(reg: u8) -> Expr {
    Expr::reg(reg)
}

fn set(reg: u8, value: Expr) -> KernelOp {
    KernelOp::Set { reg, value }
}

fn call(func: u32) -> KernelOp {
    KernelOp::CallLocal { func }
}

fn ret() -> KernelOp {
    KernelOp::Return { value: Expr::lit(0) }
}

fn compute(us: f64) -> KernelOp {
    KernelOp::Compute { us }
}

fn block_bytes() -> Expr {
    r(N) * r(N) * 4
}

fn word(base: u8, row: Expr, col: Expr) -> Expr {
    Expr::local(r(base) + (row * r(N) + col) * 4)
}

fn func(id: u32, name: &str, size: u32, stack: u32, ops: Vec<KernelOp>) -> FunctionRecord {
    FunctionRecord {
        id,
        name: name.to_string(),
        size_bytes: size,
        placement: None,
        body: KernelBlock { ops, stack_bytes: stack },
    }
}

fn cannon_functions(spec: &CannonSpec) -> Vec<FunctionRecord> {
    let k0 = (r(COL) + r(P) - r(ROW)) % r(P);
    vec![
        func(
            CANNON_MAIN,
            "cannon_main",
            2000,
            64,
            vec![
                call(GRID_COORDS),
                call(NEIGHBOR_RANKS),
                call(LOAD_INPUTS),
                call(ZERO_ACCUMULATOR),
                compute(1.0),
                KernelOp::Loop {
                    reg: STEP,
                    count: r(P) - 1,
                    body: vec![call(BLOCK_MULTIPLY), call(SHIFT_BLOCKS), call(SWAP_BUFFERS)],
                },
                call(BLOCK_MULTIPLY),
                call(STORE_OUTPUT),
                ret(),
            ],
        ),
        func(
            ZERO_ACCUMULATOR,
            "zero_accumulator",
            800,
            16,
            vec![
                compute(2.0),
                KernelOp::Loop {
                    reg: I,
                    count: r(N) * r(N),
                    body: vec![KernelOp::Write {
                        addr: Expr::local(r(C_BUF) + r(I) * 4),
                        value: Expr::lit(0),
                    }],
                },
                ret(),
            ],
        ),
        func(
            STORE_OUTPUT,
            "store_output",
            1000,
            32,
            vec![
                compute(1.0),
                KernelOp::CopyOnChip {
                    src: Expr::local(r(C_BUF)),
                    dst: Expr::Arg(2) + (r(ROW) * r(P) + r(COL)) * block_bytes(),
                    len: block_bytes(),
                },
                ret(),
            ],
        ),
        func(
            SWAP_BUFFERS,
            "swap_buffers",
            1000,
            16,
            vec![
                compute(0.2),
                set(ACC, r(A_CUR)),
                set(A_CUR, r(A_ALT)),
                set(A_ALT, r(ACC)),
                set(ACC, r(B_CUR)),
                set(B_CUR, r(B_ALT)),
                set(B_ALT, r(ACC)),
                ret(),
            ],
        ),
        func(
            LOAD_INPUTS,
            "load_inputs",
            1200,
            32,
            vec![
                compute(0.2),
                set(A_CUR, Expr::FreeBase),
                set(A_ALT, Expr::FreeBase + block_bytes()),
                set(B_CUR, Expr::FreeBase + block_bytes() * 2),
                set(B_ALT, Expr::FreeBase + block_bytes() * 3),
                set(C_BUF, Expr::FreeBase + block_bytes() * 4),
                KernelOp::CopyOnChip {
                    src: Expr::Arg(0) + (r(ROW) * r(P) + k0.clone()) * block_bytes(),
                    dst: Expr::local(r(A_CUR)),
                    len: block_bytes(),
                },
                KernelOp::CopyOnChip {
                    src: Expr::Arg(1) + (k0 * r(P) + r(COL)) * block_bytes(),
                    dst: Expr::local(r(B_CUR)),
                    len: block_bytes(),
                },
                ret(),
            ],
        ),
        func(
            GRID_COORDS,
            "grid_coords",
            600,
            16,
            vec![
                compute(0.1),
                set(ROW, Expr::Row),
                set(COL, Expr::Col),
                set(N, Expr::Arg(4)),
                set(P, Expr::Arg(5)),
                ret(),
            ],
        ),
        func(
            NEIGHBOR_RANKS,
            "neighbor_ranks",
            456,
            16,
            vec![
                compute(0.1),
                set(RIGHT, (r(COL) + 1) % r(P)),
                set(UP, (r(ROW) + r(P) - 1) % r(P)),
                ret(),
            ],
        ),
        func(
            SHIFT_BLOCKS,
            "shift_blocks",
            520,
            32,
            vec![
                compute(0.2),
                KernelOp::CopyOnChip {
                    src: Expr::local(r(A_CUR)),
                    dst: Expr::core_addr(r(ROW), r(RIGHT), r(A_ALT)),
                    len: block_bytes(),
                },
                KernelOp::CopyOnChip {
                    src: Expr::local(r(B_CUR)),
                    dst: Expr::core_addr(r(UP), r(COL), r(B_ALT)),
                    len: block_bytes(),
                },
                KernelOp::Barrier {
                    group: BarrierGroup::All,
                },
                ret(),
            ],
        ),
        func(
            BLOCK_MULTIPLY,
            "block_multiply",
            1096,
            32,
            vec![
                KernelOp::Loop {
                    reg: I,
                    count: r(N),
                    body: vec![KernelOp::Loop {
                        reg: J,
                        count: r(N),
                        body: vec![
                            set(ACC, Expr::lit(0)),
                            KernelOp::Loop {
                                reg: K,
                                count: r(N),
                                body: vec![set(
                                    ACC,
                                    r(ACC)
                                        + Expr::load(word(A_CUR, r(I), r(K)))
                                            * Expr::load(word(B_CUR, r(K), r(J))),
                                )],
                            },
                            compute(spec.n as f64 * spec.mac_us),
                            KernelOp::Write {
                                addr: word(C_BUF, r(I), r(J)),
                                value: Expr::load(word(C_BUF, r(I), r(J))) + r(ACC),
                            },
                        ],
                    }],
                },
                ret(),
            ],
        ),
    ]
}

/// Placement of every function under `variant`.
pub fn variant_placement(variant: CannonVariant, func: u32) -> Placement {
    let helper = SELECTED_HELPERS.contains(&func);
    match (variant, func) {
        (CannonVariant::AllLocal, _) => Placement::UsrcoreCall,
        (CannonVariant::InnerGlobal, BLOCK_MULTIPLY) => Placement::UsrmemCall,
        (CannonVariant::InnerDynamic, BLOCK_MULTIPLY) => Placement::DynamicCall,
        (_, _) if helper => Placement::UsrmemCall,
        _ => Placement::UsrcoreCall,
    }
}

pub fn build_cannon(spec: &CannonSpec, variant: CannonVariant) -> Result<ProgramManifest> {
    if spec.p == 0 || spec.n == 0 {
        return Err(SimError::SpecTooLarge("P and n must be at least 1".into()));
    }
    if !(spec.mac_us.is_finite() && spec.mac_us >= 0.0) {
        return Err(SimError::SpecTooLarge(format!("mac cost {} is not usable", spec.mac_us)));
    }
    let mut functions = cannon_functions(spec);
    for f in &mut functions {
        f.placement = Some(variant_placement(variant, f.id));
    }
    Ok(ProgramManifest {
        functions,
        entry: Some(CANNON_MAIN),
        ..ProgramManifest::default()
    })
}

/// Builds the image and checks that the block data and the mesh fit.
pub fn cannon_image(
    spec: &CannonSpec,
    variant: CannonVariant,
    params: &RuntimeParams,
    cfg: &MeshConfig,
) -> Result<ProgramImage> {
    if spec.p > cfg.rows || spec.p > cfg.cols {
        return Err(SimError::SpecTooLarge(format!(
            "P = {} needs a {}x{} mesh, machine is {}x{}",
            spec.p, spec.p, spec.p, cfg.rows, cfg.cols
        )));
    }
    let image = build_image(&build_cannon(spec, variant)?, params, cfg)?;
    let free = image.free_local_bytes();
    if spec.data_bytes() > free {
        return Err(SimError::SpecTooLarge(format!(
            "block data needs 5*n*n*4 = {} bytes, {} local bytes are free after program and stack",
            spec.data_bytes(),
            free
        )));
    }
    Ok(image)
}

/// Row-major `dim x dim` input matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CannonInputs {
    pub a: Vec<i32>,
    pub b: Vec<i32>,
}

impl CannonInputs {
    pub fn generate(spec: &CannonSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let len = spec.dim() * spec.dim();
        let a = (0..len).map(|_| rng.gen_range(-8..=8)).collect();
        let b = (0..len).map(|_| rng.gen_range(-8..=8)).collect();
        CannonInputs { a, b }
    }
}

/// Dense `dim x dim` product with wrapping 32-bit arithmetic.
pub fn oracle_multiply(a: &[i32], b: &[i32], dim: usize) -> Vec<i32> {
    let mut c = vec![0i32; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0i32;
            for k in 0..dim {
                acc = acc.wrapping_add(a[i * dim + k].wrapping_mul(b[k * dim + j]));
            }
            c[i * dim + j] = acc;
        }
    }
    c
}

/// Row-major matrix to block-major order: block (bi, bj) is contiguous.
pub fn to_blocks(m: &[i32], p: usize, n: usize) -> Vec<i32> {
    let dim = p * n;
    let mut out = Vec::with_capacity(m.len());
    for bi in 0..p {
        for bj in 0..p {
            for r in 0..n {
                let row = (bi * n + r) * dim + bj * n;
                out.extend_from_slice(&m[row..row + n]);
            }
        }
    }
    out
}

pub fn from_blocks(m: &[i32], p: usize, n: usize) -> Vec<i32> {
    let dim = p * n;
    let mut out = vec![0; m.len()];
    let mut it = m.iter();
    for bi in 0..p {
        for bj in 0..p {
            for r in 0..n {
                for c in 0..n {
                    out[(bi * n + r) * dim + bj * n + c] = *it.next().unwrap();
                }
            }
        }
    }
    out
}

/// Block indices held by core (i, j) after `step` shifts: (A block, B block).
pub fn cannon_schedule(p: u32, step: u32, core: CoreId) -> ((u32, u32), (u32, u32)) {
    let k = (core.col as i64 - core.row as i64 - step as i64).rem_euclid(p as i64) as u32;
    ((core.row, k), (k, core.col))
}

fn words(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Where staged inputs and outputs live in shared memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CannonStaging {
    pub argv: DeviceAddress,
    pub a: DeviceAddress,
    pub b: DeviceAddress,
    pub c: DeviceAddress,
}

/// Host side: allocates A, B, C and the argument block on the shared heap
/// and writes the inputs block-major.
pub fn stage_cannon(machine: &mut Machine, spec: &CannonSpec, inputs: &CannonInputs) -> Result<CannonStaging> {
    let (p, n) = (spec.p as usize, spec.n as usize);
    let bytes = (spec.dim() * spec.dim() * 4) as u32;
    if machine.daemon().is_none() {
        machine.attach_daemon(HostDaemon::new());
    }
    let mut alloc = |size: u32| -> Result<DeviceAddress> {
        let d = machine.daemon_mut().expect("daemon attached");
        let off = d
            .services
            .heap
            .alloc(size)
            .ok_or_else(|| SimError::Heap(format!("no room for {size} bytes of Cannon data")))?;
        Ok(DeviceAddress(crate::memspace::SHARED_BASE + off))
    };
    let a = alloc(bytes)?;
    let b = alloc(bytes)?;
    let c = alloc(bytes)?;
    let argv = alloc(24)?;
    let mem = machine.memory();
    mem.write_bytes(a, &words(&to_blocks(&inputs.a, p, n)))?;
    mem.write_bytes(b, &words(&to_blocks(&inputs.b, p, n)))?;
    mem.write_bytes(c, &vec![0; bytes as usize])?;
    let dim = spec.dim() as u32;
    for (i, w) in [a.value(), b.value(), c.value(), dim, spec.n, spec.p].iter().enumerate() {
        mem.write_u32(argv.add(4 * i as u32), *w)?;
    }
    Ok(CannonStaging { argv, a, b, c })
}

pub fn read_cannon_output(machine: &Machine, spec: &CannonSpec, staging: &CannonStaging) -> Result<Vec<i32>> {
    let len = (spec.dim() * spec.dim() * 4) as u32;
    let raw = machine.memory().read_bytes(staging.c, len)?;
    let blocks: Vec<i32> = raw
        .chunks_exact(4)
        .map(|w| i32::from_le_bytes(w.try_into().unwrap()))
        .collect();
    Ok(from_blocks(&blocks, spec.p as usize, spec.n as usize))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannonRun {
    pub variant: CannonVariant,
    pub usrcore_bytes: u32,
    pub load: CopyReport,
    pub elapsed_us: f64,
    pub correct: bool,
    /// SHA-256 of C, row-major little-endian words.
    pub c_digest: String,
    pub onchip_bytes: u64,
    pub dc_copies: u64,
    pub dc_bytes: u64,
    pub memory_digest: String,
    #[serde(skip)]
    pub c: Vec<i32>,
}

/// A machine with one Cannon variant loaded and its inputs staged.
pub struct CannonSession {
    pub spec: CannonSpec,
    pub variant: CannonVariant,
    pub image: ProgramImage,
    pub machine: Machine,
    pub staging: CannonStaging,
    pub inputs: CannonInputs,
    pub load: CopyReport,
}

impl CannonSession {
    pub fn new(
        spec: &CannonSpec,
        variant: CannonVariant,
        cfg: &MeshConfig,
        params: &RuntimeParams,
        strategy: Strategy,
    ) -> Result<Self> {
        let image = cannon_image(spec, variant, params, cfg)?;
        let mut machine = Machine::new(cfg.clone())?;
        machine.init_syscore(&image)?;
        let load = machine.load(&image, strategy)?;
        machine.attach_daemon(HostDaemon::new());
        let inputs = CannonInputs::generate(spec);
        let staging = stage_cannon(&mut machine, spec, &inputs)?;
        Ok(CannonSession {
            spec: spec.clone(),
            variant,
            image,
            machine,
            staging,
            inputs,
            load,
        })
    }

    pub fn cores(&self) -> Vec<CoreId> {
        let p = self.spec.p;
        (0..p).flat_map(|i| (0..p).map(move |j| CoreId::new(i, j))).collect()
    }

    pub fn execute(&mut self) -> Result<ExecReport> {
        let cores = self.cores();
        self.machine.execute_on(&cores, self.staging.argv)
    }

    pub fn output(&self) -> Result<Vec<i32>> {
        read_cannon_output(&self.machine, &self.spec, &self.staging)
    }

    pub fn oracle(&self) -> Vec<i32> {
        oracle_multiply(&self.inputs.a, &self.inputs.b, self.spec.dim())
    }

    /// Summary of an execution that just finished.
    pub fn summarize(&self, report: &ExecReport) -> Result<CannonRun> {
        let c = self.output()?;
        Ok(CannonRun {
            variant: self.variant,
            usrcore_bytes: self.image.usrcore_size(),
            load: self.load,
            elapsed_us: report.elapsed,
            correct: c == self.oracle(),
            c_digest: hex_digest(&words(&c)),
            onchip_bytes: report.ledger.onchip_bytes,
            dc_copies: report.ledger.dc_copies,
            dc_bytes: report.ledger.dc_bytes,
            memory_digest: hex_digest(&self.machine.memory_digest()),
            c,
        })
    }
}

/// Loads and runs one variant on a fresh machine.
pub fn run_cannon(
    spec: &CannonSpec,
    variant: CannonVariant,
    cfg: &MeshConfig,
    params: &RuntimeParams,
    strategy: Strategy,
) -> Result<CannonRun> {
    let mut s = CannonSession::new(spec, variant, cfg, params, strategy)?;
    let report = s.execute()?;
    s.summarize(&report)
}

/// One row per layout variant.
pub fn run_variant_suite(spec: &CannonSpec, cfg: &MeshConfig, params: &RuntimeParams) -> Result<Vec<CannonRun>> {
    CannonVariant::ALL
        .iter()
        .map(|&v| run_cannon(spec, v, cfg, params, Strategy::Tree))
        .collect()
}

/// Runtime flavours for the occupancy harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeFlavor {
    /// Monolithic runtime with all system code in every core.
    Legacy,
    /// Syscore reduced to the persistent wait loop and services.
    Stripped,
}

impl RuntimeFlavor {
    pub fn params(self) -> RuntimeParams {
        let syscore_code_bytes = match self {
            RuntimeFlavor::Legacy => 9784,
            RuntimeFlavor::Stripped => 1920,
        };
        RuntimeParams {
            syscore_code_bytes,
            ..RuntimeParams::default()
        }
    }
}

/// Small application used for the occupancy comparison: 4400 bytes of
/// code plus the launch stub.
pub fn occupancy_app_manifest() -> ProgramManifest {
    let f = |id, name: &str, size| FunctionRecord {
        id,
        name: name.to_string(),
        size_bytes: size,
        placement: None,
        body: KernelBlock::new(vec![
            KernelOp::Compute { us: 1.0 },
            KernelOp::Return { value: Expr::lit(0) },
        ]),
    };
    let mut main = f(1, "app_main", 1400);
    main.body = KernelBlock::new(vec![call(2), call(3), ret()]);
    ProgramManifest {
        functions: vec![main, f(2, "app_compute", 1500), f(3, "app_io", 1500)],
        entry: Some(1),
        ..ProgramManifest::default()
    }
}

/// Kernel that returns 0 immediately.
pub fn noop_manifest() -> ProgramManifest {
    ProgramManifest {
        functions: vec![FunctionRecord {
            id: 1,
            name: "noop".into(),
            size_bytes: 64,
            placement: None,
            body: KernelBlock::returning(0),
        }],
        entry: Some(1),
        ..ProgramManifest::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::occupancy;

    fn build(spec: &CannonSpec, v: CannonVariant) -> ProgramImage {
        cannon_image(spec, v, &RuntimeParams::default(), &MeshConfig::default()).unwrap()
    }

    #[test]
    fn variant_sizes() {
        let spec = CannonSpec::default();
        let sizes: Vec<u32> = CannonVariant::ALL.iter().map(|&v| build(&spec, v).usrcore_size()).collect();
        assert_eq!(sizes, vec![8736, 5960, 4864, 4888]);
    }

    #[test]
    fn occupancy_harness() {
        let pct = |flavor: RuntimeFlavor| {
            let img = build_image(&occupancy_app_manifest(), &flavor.params(), &MeshConfig::default()).unwrap();
            format!("{:.1}", occupancy(&img).occupied_pct)
        };
        assert_eq!(pct(RuntimeFlavor::Legacy), "47.0");
        assert_eq!(pct(RuntimeFlavor::Stripped), "23.0");
    }

    #[test]
    fn blocks_round_trip() {
        let m: Vec<i32> = (0..36).collect();
        let b = to_blocks(&m, 3, 2);
        assert_eq!(&b[..4], &[0, 1, 6, 7]);
        assert_eq!(from_blocks(&b, 3, 2), m);
    }

    #[test]
    fn skew_places_a_ij_on_i_j_plus_i() {
        let p = 5;
        for i in 0..p {
            for j in 0..p {
                let host = CoreId::new(i, (j + i) % p);
                let ((ar, ak), (bk, bc)) = cannon_schedule(p, 0, host);
                assert_eq!((ar, ak), (i, j));
                assert_eq!((bk, bc), (j, (j + i) % p));
            }
        }
    }

    #[test]
    fn schedule_covers_every_k_once() {
        let p = 4;
        for i in 0..p {
            for j in 0..p {
                let mut ks: Vec<u32> = (0..p).map(|s| cannon_schedule(p, s, CoreId::new(i, j)).0 .1).collect();
                ks.sort();
                assert_eq!(ks, (0..p).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn too_large_spec() {
        let spec = CannonSpec { n: 64, ..CannonSpec::default() };
        let e = cannon_image(&spec, CannonVariant::AllLocal, &RuntimeParams::default(), &MeshConfig::default());
        assert!(matches!(e, Err(SimError::SpecTooLarge(_))));
        let spec = CannonSpec { p: 5, ..CannonSpec::default() };
        let e = cannon_image(&spec, CannonVariant::AllLocal, &RuntimeParams::default(), &MeshConfig::default());
        assert!(matches!(e, Err(SimError::SpecTooLarge(_))));
    }

    #[test]
    fn scalar_product_p1_n1() {
        let spec = CannonSpec { p: 1, n: 1, seed: 3, mac_us: 0.01 };
        let run = run_cannon(&spec, CannonVariant::AllLocal, &MeshConfig::default(), &RuntimeParams::default(), Strategy::Tree).unwrap();
        let inputs = CannonInputs::generate(&spec);
        assert_eq!(run.c, vec![inputs.a[0] * inputs.b[0]]);
        assert!(run.correct);
    }
}
