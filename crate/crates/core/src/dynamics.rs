//! Time-dependent Lindblad integration and the Schrödinger-picture cascaded
//! model of a pulse, a scatterer and an output cavity.
//!
//! Time-dependent operators are assembled per stage from constant sparse
//! blocks multiplied by scalar schedule values, so the inner loop is a few
//! sparse-times-dense products per right-hand-side evaluation.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::sync::Arc;

use log::warn;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fock::{
    embed_sparse, lowering, CompositeSpace, DensityMatrix, FockWindow, OperatorMatrix, Subsystem, SubsystemKind,
};
use crate::linalg::{self, add_adjoint_in_place, BlockCombination, SparseOp, C64, I, ONE, ZERO};
use crate::pulses::{CouplingSchedule, TimeGrid};

/// Trace drift that aborts an integration.
pub const TRACE_DRIFT_TOL: f64 = 1e-6;
/// Largest accepted excess of the purity `tr ρ²` over 1. A larger value means
/// the fixed-step integrator went unstable while the trace stayed put.
pub const PURITY_EXCESS_TOL: f64 = 1e-6;
/// Window-edge population that triggers a leakage warning.
pub const LEAKAGE_THRESHOLD: f64 = 1e-4;

/// `D[L]ρ = −½(L†Lρ + ρL†L) + LρL†`.
pub fn dissipator(l: &OperatorMatrix, rho: &DensityMatrix) -> Result<Array2<C64>> {
    if l.dim() != rho.dim() {
        return Err(Error::Dimension {
            expected: rho.dim(),
            found: l.dim(),
        });
    }
    let l = l.entries();
    let ld = linalg::dagger(l);
    let ldl = ld.dot(l);
    let r = rho.entries();
    Ok(l.dot(r).dot(&ld) - (ldl.dot(r) + r.dot(&ldl)).mapv(|z| z * 0.5))
}

pub type HamiltonianFn = Arc<dyn Fn(f64) -> Array2<C64> + Send + Sync>;

/// Scatterer Hamiltonian in its local basis.
#[derive(Clone)]
pub enum ScattererHamiltonian {
    Zero,
    Constant(Array2<C64>),
    TimeDependent(HamiltonianFn),
}

impl ScattererHamiltonian {
    pub fn at(&self, t: f64, dim: usize) -> Array2<C64> {
        match self {
            Self::Zero => Array2::zeros((dim, dim)),
            Self::Constant(h) => h.clone(),
            Self::TimeDependent(f) => f(t),
        }
    }
}

impl std::fmt::Debug for ScattererHamiltonian {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Zero => write!(f, "Zero"),
            Self::Constant(h) => write!(f, "Constant({}x{})", h.nrows(), h.ncols()),
            Self::TimeDependent(_) => write!(f, "TimeDependent(..)"),
        }
    }
}

/// Local quantum system coupled to the pulse.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    pub scatterer: Subsystem,
    pub hamiltonian: ScattererHamiltonian,
    /// Lowering operator ĉ in the scatterer basis.
    pub lowering: Array2<C64>,
    pub gamma: f64,
    /// Additional Lindblad operators acting on the scatterer.
    pub losses: Vec<Array2<C64>>,
}

impl SystemSpec {
    /// Two-level emitter with σ̂⁻ = |g⟩⟨e| (basis order g, e) and no
    /// Hamiltonian of its own.
    pub fn two_level(gamma: f64) -> Result<Self> {
        let mut sm = Array2::zeros((2, 2));
        sm[[0, 1]] = ONE;
        let spec = Self {
            scatterer: Subsystem {
                window: FockWindow::truncated(2)?,
                kind: SubsystemKind::Scatterer,
            },
            hamiltonian: ScattererHamiltonian::Zero,
            lowering: sm,
            gamma,
            losses: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Single-mode cavity with Kerr Hamiltonian `K(ĉ†ĉ)²`.
    pub fn kerr_cavity(window: FockWindow, gamma: f64, kerr: f64) -> Result<Self> {
        let c = crate::fock::annihilation_matrix(window);
        let n = linalg::dagger(&c).dot(&c);
        let spec = Self {
            scatterer: Subsystem {
                window,
                kind: SubsystemKind::Mode,
            },
            hamiltonian: if kerr == 0.0 {
                ScattererHamiltonian::Zero
            } else {
                ScattererHamiltonian::Constant(n.dot(&n).mapv(|z| z * kerr))
            },
            lowering: c,
            gamma,
            losses: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.scatterer.window.size()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config(format!("coupling rate must be ≥ 0, got {}", self.gamma)));
        }
        let d = self.dim();
        for m in std::iter::once(&self.lowering).chain(&self.losses) {
            if m.dim() != (d, d) {
                return Err(Error::Dimension {
                    expected: d,
                    found: m.nrows(),
                });
            }
        }
        Ok(())
    }

    /// Cascaded layout (u, scatterer, v) for this system.
    pub fn cascaded_space(&self, u: FockWindow, v: FockWindow) -> Result<CompositeSpace> {
        CompositeSpace::new(vec![
            Subsystem {
                window: u,
                kind: SubsystemKind::Mode,
            },
            self.scatterer,
            Subsystem {
                window: v,
                kind: SubsystemKind::Mode,
            },
        ])
    }
}

/// Operators of the master equation at one instant.
#[derive(Clone, Debug)]
pub struct StageOperators {
    pub hamiltonian: SparseOp,
    pub jumps: Vec<SparseOp>,
}

impl StageOperators {
    /// `H − (i/2) Σ L†L`.
    pub fn effective_hamiltonian(&self) -> SparseOp {
        self.jumps.iter().fold(self.hamiltonian.clone(), |acc, l| {
            acc.add_scaled(ONE, &l.adjoint().matmul(l), C64::new(0.0, -0.5))
        })
    }
}

/// A time-dependent Lindblad generator on a fixed composite space.
pub trait MasterEquation: Send + Sync {
    fn space(&self) -> &CompositeSpace;
    fn hamiltonian(&self, t: f64) -> SparseOp;
    fn jump_operators(&self, t: f64) -> Vec<SparseOp>;

    fn stage(&self, t: f64) -> StageOperators {
        StageOperators {
            hamiltonian: self.hamiltonian(t),
            jumps: self.jump_operators(t),
        }
    }
}

pub type OperatorFn = Box<dyn Fn(f64) -> OperatorMatrix + Send + Sync>;

/// Generator from dense operator-valued closures.
pub struct FnMasterEquation {
    space: CompositeSpace,
    hamiltonian: OperatorFn,
    jumps: Vec<OperatorFn>,
}

impl FnMasterEquation {
    pub fn new(space: CompositeSpace, hamiltonian: OperatorFn, jumps: Vec<OperatorFn>) -> Self {
        Self {
            space,
            hamiltonian,
            jumps,
        }
    }
}

impl MasterEquation for FnMasterEquation {
    fn space(&self) -> &CompositeSpace {
        &self.space
    }

    fn hamiltonian(&self, t: f64) -> SparseOp {
        (self.hamiltonian)(t).to_sparse()
    }

    fn jump_operators(&self, t: f64) -> Vec<SparseOp> {
        self.jumps.iter().map(|f| f(t).to_sparse()).collect()
    }
}

/// Schrödinger-picture cascaded master equation.
pub struct CascadedModel {
    space: CompositeSpace,
    spec: SystemSpec,
    schedule: CouplingSchedule,
    // a_u†c, c†a_v, a_u†a_v and their adjoints
    couplings: BlockCombination,
    // c, a_u, a_v
    l0: BlockCombination,
    scatterer_h: Option<SparseOp>,
    losses: Vec<SparseOp>,
}

impl CascadedModel {
    pub fn new(spec: SystemSpec, schedule: CouplingSchedule, u: FockWindow, v: FockWindow) -> Result<Self> {
        spec.validate()?;
        let space = spec.cascaded_space(u, v)?;
        let a_u = lowering(&space, 0);
        let a_v = lowering(&space, 2);
        let c = embed_sparse(&SparseOp::from_dense(&spec.lowering), &space, 1)?;
        let b1 = a_u.adjoint().matmul(&c);
        let b2 = c.adjoint().matmul(&a_v);
        let b3 = a_u.adjoint().matmul(&a_v);
        let couplings = BlockCombination::new(&[
            b1.clone(),
            b2.clone(),
            b3.clone(),
            b1.adjoint(),
            b2.adjoint(),
            b3.adjoint(),
        ]);
        let l0 = BlockCombination::new(&[c, a_u, a_v]);
        let scatterer_h = match &spec.hamiltonian {
            ScattererHamiltonian::Constant(h) => Some(embed_sparse(&SparseOp::from_dense(h), &space, 1)?),
            _ => None,
        };
        let losses = spec
            .losses
            .iter()
            .map(|l| embed_sparse(&SparseOp::from_dense(l), &space, 1))
            .collect::<Result<_>>()?;
        Ok(Self {
            space,
            spec,
            schedule,
            couplings,
            l0,
            scatterer_h,
            losses,
        })
    }

    pub fn schedule(&self) -> &CouplingSchedule {
        &self.schedule
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    fn scatterer_hamiltonian(&self, t: f64) -> SparseOp {
        match (&self.spec.hamiltonian, &self.scatterer_h) {
            (_, Some(h)) => h.clone(),
            (ScattererHamiltonian::TimeDependent(f), None) => {
                embed_sparse(&SparseOp::from_dense(&f(t)), &self.space, 1).expect("scatterer dimension")
            }
            _ => SparseOp::zeros(self.space.dim()),
        }
    }
}

impl MasterEquation for CascadedModel {
    fn space(&self) -> &CompositeSpace {
        &self.space
    }

    fn hamiltonian(&self, t: f64) -> SparseOp {
        let s = self.schedule.sample(t);
        let sg = self.spec.gamma.sqrt();
        let half_i = 0.5 * I;
        let alphas = [sg * s.g_u, sg * s.g_v.conj(), s.g_u * s.g_v.conj()];
        let mut coeffs = [ZERO; 6];
        for (k, a) in alphas.iter().enumerate() {
            coeffs[k] = half_i * a;
            coeffs[k + 3] = -half_i * a.conj();
        }
        self.couplings
            .combine(&coeffs)
            .add_scaled(ONE, &self.scatterer_hamiltonian(t), ONE)
    }

    fn jump_operators(&self, t: f64) -> Vec<SparseOp> {
        let s = self.schedule.sample(t);
        let l0 = self
            .l0
            .combine(&[C64::new(self.spec.gamma.sqrt(), 0.0), s.g_u.conj(), s.g_v.conj()]);
        std::iter::once(l0).chain(self.losses.iter().cloned()).collect()
    }
}

/// Cascaded Hamiltonian on the (u, scatterer, v) space at time `t`.
pub fn cascaded_hamiltonian(
    spec: &SystemSpec,
    schedule: &CouplingSchedule,
    u: FockWindow,
    v: FockWindow,
    t: f64,
) -> Result<OperatorMatrix> {
    check_covers(schedule, t)?;
    let model = CascadedModel::new(spec.clone(), schedule.clone(), u, v)?;
    Ok(OperatorMatrix::from_sparse(
        model.space(),
        &model.hamiltonian(t),
        all(model.space()),
    ))
}

/// Output-field jump operator `√γ ĉ + g_u* â_u + g_v* â_v` at time `t`.
pub fn jump_operator_l0(
    spec: &SystemSpec,
    schedule: &CouplingSchedule,
    u: FockWindow,
    v: FockWindow,
    t: f64,
) -> Result<OperatorMatrix> {
    check_covers(schedule, t)?;
    let model = CascadedModel::new(spec.clone(), schedule.clone(), u, v)?;
    let l0 = model.jump_operators(t).swap_remove(0);
    Ok(OperatorMatrix::from_sparse(model.space(), &l0, all(model.space())))
}

pub(crate) fn check_covers(schedule: &CouplingSchedule, t: f64) -> Result<()> {
    if schedule.covers(t) {
        Ok(())
    } else {
        Err(Error::config(format!("time {t} outside the coupling schedule")))
    }
}

pub(crate) fn all(space: &CompositeSpace) -> BTreeSet<usize> {
    (0..space.len()).collect()
}

/// Observable sampled along a trajectory.
pub enum Observable {
    Static(SparseOp),
    /// Operator that changes with time (e.g. frame-transformed mode operators).
    Dynamic(Box<dyn Fn(f64) -> SparseOp + Send + Sync>),
}

pub struct NamedObservable {
    pub name: String,
    pub observable: Observable,
}

impl NamedObservable {
    pub fn fixed(name: impl Into<String>, op: SparseOp) -> Self {
        Self {
            name: name.into(),
            observable: Observable::Static(op),
        }
    }

    pub fn dynamic(name: impl Into<String>, f: impl Fn(f64) -> SparseOp + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            observable: Observable::Dynamic(Box::new(f)),
        }
    }

    fn evaluate(&self, t: f64, rho: &Array2<C64>) -> C64 {
        match &self.observable {
            Observable::Static(op) => op.expectation(rho),
            Observable::Dynamic(f) => f(t).expectation(rho),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IntegrateOptions {
    pub trace_tol: f64,
    pub leakage_threshold: f64,
    /// Abort (instead of warn) when an edge population exceeds the threshold.
    pub abort_on_leakage: bool,
    /// Keep a validated state snapshot every this many steps (0 = never).
    pub snapshot_every: usize,
    /// Sample observables every this many steps.
    pub record_every: usize,
    /// Total excitation number the initial state cannot exceed. The models
    /// here never raise it, so a window whose top reaches the bound is exact
    /// there and its top edge is not monitored.
    pub excitation_bound: Option<usize>,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            trace_tol: TRACE_DRIFT_TOL,
            leakage_threshold: LEAKAGE_THRESHOLD,
            abort_on_leakage: false,
            snapshot_every: 0,
            record_every: 1,
            excitation_bound: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub values: Vec<C64>,
}

/// Result of an integration.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub times: Vec<f64>,
    pub series: Vec<Series>,
    pub snapshots: Vec<(f64, DensityMatrix)>,
    pub final_state: DensityMatrix,
    pub max_trace_drift: f64,
    /// Largest window-edge population seen per subsystem (0 for scatterers).
    pub edge_population: Vec<f64>,
    /// Smallest eigenvalue among the validated snapshots and the final state.
    pub min_eigenvalue: f64,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn series(&self, name: &str) -> Option<&[C64]> {
        self.series.iter().find(|s| s.name == name).map(|s| s.values.as_slice())
    }

    pub fn real(&self, name: &str) -> Option<Vec<f64>> {
        self.series(name).map(|v| v.iter().map(|z| z.re).collect())
    }

    /// One row per sampled time: `time,<name>...`. Complex-valued series get
    /// `<name>_re,<name>_im` columns.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let complex: Vec<bool> = self
            .series
            .iter()
            .map(|s| s.values.iter().any(|z| z.im.abs() > 1e-12 * (1.0 + z.re.abs())))
            .collect();
        let mut header = vec!["time".to_string()];
        for (s, &c) in self.series.iter().zip(&complex) {
            if c {
                header.push(format!("{}_re", s.name));
                header.push(format!("{}_im", s.name));
            } else {
                header.push(s.name.clone());
            }
        }
        writeln!(out, "{}", header.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![format!("{t:.9e}")];
            for (s, &c) in self.series.iter().zip(&complex) {
                let z = s.values[k];
                row.push(format!("{:.12e}", z.re));
                if c {
                    row.push(format!("{:.12e}", z.im));
                }
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Flat binary state layout: `b"RHO1"`, dimension as little-endian u64,
/// then `dim²` row-major complex entries as little-endian `(re, im)` f64 pairs.
pub fn write_state_binary<W: Write>(rho: &DensityMatrix, mut out: W) -> Result<()> {
    out.write_all(b"RHO1")?;
    out.write_all(&(rho.dim() as u64).to_le_bytes())?;
    for z in rho.entries().iter() {
        out.write_all(&z.re.to_le_bytes())?;
        out.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

/// Reads [`write_state_binary`] output as a raw matrix.
pub fn read_state_binary<R: Read>(mut input: R) -> Result<Array2<C64>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != b"RHO1" {
        return Err(Error::Parse("not a state snapshot".into()));
    }
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let dim = u64::from_le_bytes(word) as usize;
    let mut m = Array2::zeros((dim, dim));
    for z in m.iter_mut() {
        input.read_exact(&mut word)?;
        let re = f64::from_le_bytes(word);
        input.read_exact(&mut word)?;
        *z = C64::new(re, f64::from_le_bytes(word));
    }
    Ok(m)
}

/// Master-equation right-hand side `−i[H,ρ] + Σ D[L]ρ` for Hermitian `rho`,
/// written into `out`.
pub fn lindblad_rhs(h_eff: &SparseOp, jumps: &[SparseOp], rho: &Array2<C64>, out: &mut Array2<C64>) {
    let mut scratch = Array2::zeros(rho.raw_dim());
    lindblad_rhs_with(h_eff, jumps, rho, out, &mut scratch);
}

/// [`lindblad_rhs`] with a caller-owned scratch matrix.
///
/// With `X = −i H_eff ρ` the result is `X + X† + Σ L ρ L†`. Each jump term
/// is Hermitian, so only its upper triangle is accumulated into `X` before
/// the adjoint is added (half weight on the diagonal, which gets doubled).
fn lindblad_rhs_with(
    h_eff: &SparseOp,
    jumps: &[SparseOp],
    rho: &Array2<C64>,
    out: &mut Array2<C64>,
    scratch: &mut Array2<C64>,
) {
    out.fill(ZERO);
    h_eff.apply_left_acc(-I, rho, out);
    for l in jumps {
        scratch.fill(ZERO);
        l.apply_left_acc(ONE, rho, scratch);
        l.right_adjoint_upper_acc(scratch, 1.0, 0.5, out);
    }
    add_adjoint_in_place(out);
}

struct Compiled {
    h_eff: SparseOp,
    jumps: Vec<SparseOp>,
}

fn compile(eq: &dyn MasterEquation, t: f64) -> Compiled {
    let stage = eq.stage(t);
    Compiled {
        h_eff: stage.effective_hamiltonian(),
        jumps: stage.jumps,
    }
}

fn edge_populations(space: &CompositeSpace, rho: &Array2<C64>, bound: Option<usize>) -> Vec<f64> {
    let d = space.dim();
    let mut edges = vec![0.0; space.len()];
    for (k, sub) in space.subsystems().iter().enumerate() {
        if sub.kind != SubsystemKind::Mode {
            continue;
        }
        let size = sub.window.size();
        let stride = space.stride(k);
        let closed_top = bound.is_some_and(|b| sub.window.top() >= b);
        let mut top = 0.0;
        let mut bottom = 0.0;
        for g in 0..d {
            let local = (g / stride) % size;
            let p = rho[[g, g]].re;
            if local + 1 == size && !closed_top {
                top += p;
            }
            if local == 0 && sub.window.offset() > 0 {
                bottom += p;
            }
        }
        edges[k] = if size == 1 { 0.0 } else { f64::max(top, bottom) };
    }
    edges
}

/// Fixed-step classic RK4 integration of the master equation over `grid`.
///
/// After every step the state is re-Hermitized. Observables are sampled at
/// every `record_every`-th grid point. The trace drift is tracked and an
/// error is returned when it exceeds `opts.trace_tol`.
pub fn integrate(
    eq: &dyn MasterEquation,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    observables: &[NamedObservable],
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    let space = eq.space();
    if rho0.space().dim() != space.dim() {
        return Err(Error::Dimension {
            expected: space.dim(),
            found: rho0.dim(),
        });
    }
    rho0.validate(1e-10, 1e-8, 1e-8)?;
    let n = space.dim();
    let h = grid.dt();
    let record_every = opts.record_every.max(1);
    let tr0 = rho0.trace();

    let mut rho = rho0.entries().as_standard_layout().to_owned();
    let mut k1 = Array2::<C64>::zeros((n, n));
    let mut k2 = Array2::<C64>::zeros((n, n));
    let mut k3 = Array2::<C64>::zeros((n, n));
    let mut k4 = Array2::<C64>::zeros((n, n));
    let mut tmp = Array2::<C64>::zeros((n, n));
    let mut scratch = Array2::<C64>::zeros((n, n));

    let mut times = Vec::new();
    let mut series: Vec<Series> = observables
        .iter()
        .map(|o| Series {
            name: o.name.clone(),
            values: Vec::new(),
        })
        .collect();
    let mut snapshots = Vec::new();
    let mut max_drift = 0.0_f64;
    let mut edge = edge_populations(space, &rho, opts.excitation_bound);
    let mut min_eig = f64::INFINITY;
    let mut warnings = Vec::new();

    let mut record = |k: usize, t: f64, rho: &Array2<C64>| {
        if k.is_multiple_of(record_every) || k == grid.steps() {
            times.push(t);
            for (s, o) in series.iter_mut().zip(observables) {
                s.values.push(o.evaluate(t, rho));
            }
        }
    };
    record(0, grid.t0(), &rho);

    let mut start_ops = compile(eq, grid.t0());
    for step in 0..grid.steps() {
        let t = grid.time(step);
        let mid = compile(eq, t + 0.5 * h);
        let end = compile(eq, t + h);

        lindblad_rhs_with(&start_ops.h_eff, &start_ops.jumps, &rho, &mut k1, &mut scratch);
        stage_state(&mut tmp, &rho, 0.5 * h, &k1);
        lindblad_rhs_with(&mid.h_eff, &mid.jumps, &tmp, &mut k2, &mut scratch);
        stage_state(&mut tmp, &rho, 0.5 * h, &k2);
        lindblad_rhs_with(&mid.h_eff, &mid.jumps, &tmp, &mut k3, &mut scratch);
        stage_state(&mut tmp, &rho, h, &k3);
        lindblad_rhs_with(&end.h_eff, &end.jumps, &tmp, &mut k4, &mut scratch);

        let w = h / 6.0;
        ndarray::Zip::from(&mut rho)
            .and(&k1)
            .and(&k2)
            .and(&k3)
            .and(&k4)
            .for_each(|r, a, b, c, d| *r += (a + (b + c) * 2.0 + d) * w);
        hermitize(&mut rho);
        start_ops = end;

        let tr = linalg::trace(&rho).re;
        let drift = (tr - tr0).abs();
        max_drift = max_drift.max(drift);
        if !tr.is_finite() || drift > opts.trace_tol {
            return Err(Error::IntegrationAccuracy(format!(
                "trace drift {drift:.3e} at t={:.4} exceeds {:.1e}; reduce the time step",
                t + h,
                opts.trace_tol
            )));
        }
        let purity: f64 = rho.iter().map(|z| z.norm_sqr()).sum();
        if !(purity <= tr * tr + PURITY_EXCESS_TOL) {
            return Err(Error::IntegrationAccuracy(format!(
                "purity {purity:.6e} exceeds 1 at t={:.4}: the step is unstable; reduce the time step",
                t + h
            )));
        }
        for (e, now) in edge
            .iter_mut()
            .zip(edge_populations(space, &rho, opts.excitation_bound))
        {
            *e = e.max(now);
        }
        record(step + 1, t + h, &rho);
        if opts.snapshot_every > 0 && (step + 1) % opts.snapshot_every == 0 {
            let snap = DensityMatrix::from_raw(space.clone(), rho.clone())?;
            min_eig = min_eig.min(snap.min_eigenvalue());
            snapshots.push((t + h, snap));
        }
    }

    for (k, &e) in edge.iter().enumerate() {
        if e > opts.leakage_threshold {
            let msg = format!(
                "subsystem {k}: window-edge population {e:.3e} exceeds {:.1e}; enlarge the Fock window",
                opts.leakage_threshold
            );
            if opts.abort_on_leakage {
                return Err(Error::Leakage(msg));
            }
            warn!("{msg}");
            warnings.push(msg);
        }
    }

    let final_state = DensityMatrix::from_raw(space.clone(), rho)?;
    min_eig = min_eig.min(final_state.min_eigenvalue());
    Ok(Trajectory {
        grid: *grid,
        times,
        series,
        snapshots,
        min_eigenvalue: min_eig,
        final_state,
        max_trace_drift: max_drift,
        edge_population: edge,
        warnings,
    })
}

/// `tmp ← rho + h k`.
fn stage_state(tmp: &mut Array2<C64>, rho: &Array2<C64>, h: f64, k: &Array2<C64>) {
    ndarray::Zip::from(tmp)
        .and(rho)
        .and(k)
        .for_each(|t, r, k| *t = r + k * h);
}

fn hermitize(rho: &mut Array2<C64>) {
    let n = rho.nrows();
    for i in 0..n {
        rho[[i, i]].im = 0.0;
        for j in (i + 1)..n {
            let v = 0.5 * (rho[[i, j]] + rho[[j, i]].conj());
            rho[[i, j]] = v;
            rho[[j, i]] = v.conj();
        }
    }
}
