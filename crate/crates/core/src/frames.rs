//! Interaction pictures that absorb the linear pulse propagation into the
//! operators, leaving the state to describe only the quantum content of the
//! travelling modes.
//!
//! The frame is represented by a mode matrix `M(t)` with `φ(t) = M(t) φ(0)`,
//! where `φ = (â_u, ĉ, â_v)` (three-mode picture) or `φ = (â_u, â_v)`
//! (two-mode picture). Observables are mapped back by transforming operators,
//! never by building the frame unitary.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::sync::Arc;

use ndarray::{array, Array2};

use crate::dynamics::{check_covers, MasterEquation, NamedObservable, ScattererHamiltonian, SystemSpec};
use crate::error::{Error, Result};
use crate::fock::{embed_sparse, lowering, CompositeSpace, FockWindow, OperatorMatrix};
use crate::linalg::{self, BlockCombination, SparseOp, C64, I, ONE, ZERO};
use crate::pulses::{cumulative_trapezoid, CouplingSchedule, GridPoint, ScheduleSample, TimeGrid};

/// Unitarity tolerance of a stored mode matrix.
pub const UNITARITY_TOL: f64 = 1e-8;

/// Row of the three-mode vector `(â_u, ĉ, â_v)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeRow {
    U = 0,
    C = 1,
    V = 2,
}

/// `λ(t) = ∫ ½ g_u g_v*`, equal to `−θ(t)` when the modes coincide.
pub fn lambda_two_mode(schedule: &CouplingSchedule) -> Vec<C64> {
    schedule.lambda().to_vec()
}

/// Frame mode matrices sampled on a uniform grid.
#[derive(Clone, Debug)]
pub struct ModeMatrix {
    grid: TimeGrid,
    matrices: Vec<Array2<C64>>,
}

/// Coefficient matrix of `dM/dt = F M` for the three-mode picture.
fn generator_three(s: &ScheduleSample, gamma: f64) -> Array2<C64> {
    let sg = gamma.sqrt();
    let (gu, gv) = (s.g_u, s.g_v);
    array![
        [ZERO, sg * gu, gu * gv.conj()],
        [-sg * gu.conj(), ZERO, sg * gv.conj()],
        [-gu.conj() * gv, -sg * gv, ZERO]
    ]
    .mapv(|z| 0.5 * z)
}

fn generator_two(s: &ScheduleSample) -> Array2<C64> {
    let k = 0.5 * s.g_u * s.g_v.conj();
    array![[ZERO, k], [-k.conj(), ZERO]]
}

fn generator_at(schedule: &CouplingSchedule, i: usize, gamma: Option<f64>) -> Array2<C64> {
    let s = schedule.sample(schedule.grid().time(i));
    match gamma {
        Some(g) => generator_three(&s, g),
        None => generator_two(&s),
    }
}

impl ModeMatrix {
    /// Three-mode matrix for cavity coupling `gamma`, integrated with a
    /// fourth-order Magnus scheme. Each step spans two schedule intervals so
    /// the Simpson midpoint falls on a schedule sample; the result lives on
    /// the schedule grid coarsened by two.
    pub fn three_mode(schedule: &CouplingSchedule, gamma: f64) -> Result<Self> {
        Self::magnus(schedule, Some(gamma))
    }

    /// Two-mode (`â_u`, `â_v`) beam-splitter frame matrix.
    pub fn two_mode(schedule: &CouplingSchedule) -> Result<Self> {
        Self::magnus(schedule, None)
    }

    /// Closed-form two-mode matrix for identical modes, `[[cosθ, −sinθ], [sinθ, cosθ]]`,
    /// on the schedule grid.
    pub fn identical_two_mode(schedule: &CouplingSchedule) -> Result<Self> {
        if !schedule.is_identical() {
            return Err(Error::config("closed-form frame requires identical modes"));
        }
        let matrices = schedule
            .theta()
            .iter()
            .map(|&th| {
                let (s, c) = th.sin_cos();
                array![
                    [C64::new(c, 0.0), C64::new(-s, 0.0)],
                    [C64::new(s, 0.0), C64::new(c, 0.0)]
                ]
            })
            .collect();
        Ok(Self {
            grid: *schedule.grid(),
            matrices,
        })
    }

    fn magnus(schedule: &CouplingSchedule, gamma: Option<f64>) -> Result<Self> {
        let sgrid = schedule.grid();
        if !sgrid.steps().is_multiple_of(2) {
            return Err(Error::config(
                "mode-matrix integration needs an even number of schedule steps",
            ));
        }
        let grid = TimeGrid::new(sgrid.t0(), 2.0 * sgrid.dt(), sgrid.steps() / 2)?;
        let h = grid.dt();
        let n = if gamma.is_some() { 3 } else { 2 };
        let mut m = linalg::identity(n);
        let mut matrices = Vec::with_capacity(grid.len());
        matrices.push(m.clone());
        let mut a0 = generator_at(schedule, 0, gamma);
        for k in 0..grid.steps() {
            let ah = generator_at(schedule, 2 * k + 1, gamma);
            let a1 = generator_at(schedule, 2 * k + 2, gamma);
            let omega = (&a0 + &ah.mapv(|z| 4.0 * z) + &a1).mapv(|z| z * (h / 6.0))
                - linalg::commutator(&a0, &a1).mapv(|z| z * (h * h / 12.0));
            m = linalg::expm(&omega).dot(&m);
            matrices.push(m.clone());
            a0 = a1;
        }
        let out = Self { grid, matrices };
        out.check_unitary()?;
        Ok(out)
    }

    /// Classic RK4 on the same grid as [`ModeMatrix::three_mode`]; kept as an
    /// independent cross-check, not unitary to 1e-8.
    pub fn three_mode_rk4(schedule: &CouplingSchedule, gamma: f64) -> Result<Self> {
        let sgrid = schedule.grid();
        if !sgrid.steps().is_multiple_of(2) {
            return Err(Error::config(
                "mode-matrix integration needs an even number of schedule steps",
            ));
        }
        let grid = TimeGrid::new(sgrid.t0(), 2.0 * sgrid.dt(), sgrid.steps() / 2)?;
        let h = grid.dt();
        let mut m = linalg::identity(3);
        let mut matrices = vec![m.clone()];
        for k in 0..grid.steps() {
            let f0 = generator_at(schedule, 2 * k, Some(gamma));
            let fh = generator_at(schedule, 2 * k + 1, Some(gamma));
            let f1 = generator_at(schedule, 2 * k + 2, Some(gamma));
            let k1 = f0.dot(&m);
            let k2 = fh.dot(&(&m + &k1.mapv(|z| z * (0.5 * h))));
            let k3 = fh.dot(&(&m + &k2.mapv(|z| z * (0.5 * h))));
            let k4 = f1.dot(&(&m + &k3.mapv(|z| z * h)));
            m = &m + &(k1 + (k2 + k3).mapv(|z| 2.0 * z) + k4).mapv(|z| z * (h / 6.0));
            matrices.push(m.clone());
        }
        Ok(Self { grid, matrices })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn matrices(&self) -> &[Array2<C64>] {
        &self.matrices
    }

    pub fn size(&self) -> usize {
        self.matrices[0].nrows()
    }

    /// Largest `‖M†M − I‖_max` over the stored samples.
    pub fn unitarity_error(&self) -> f64 {
        let id = linalg::identity(self.size());
        self.matrices
            .iter()
            .map(|m| linalg::max_abs_diff(&linalg::dagger(m).dot(m), &id))
            .fold(0.0, f64::max)
    }

    fn check_unitary(&self) -> Result<()> {
        let err = self.unitarity_error();
        if err > UNITARITY_TOL {
            return Err(Error::IntegrationAccuracy(format!(
                "mode matrix unitarity drift {err:.3e} exceeds {UNITARITY_TOL:.0e}"
            )));
        }
        Ok(())
    }

    /// `M(t)`: exact sample on grid points, linear interpolation otherwise.
    pub fn at(&self, t: f64) -> Array2<C64> {
        match self.grid.locate(t) {
            Some(GridPoint::Exact(i)) => self.matrices[i].clone(),
            Some(GridPoint::Between(i, f)) => {
                &self.matrices[i].mapv(|z| z * (1.0 - f)) + &self.matrices[i + 1].mapv(|z| z * f)
            }
            None if t < self.grid.t0() => self.matrices[0].clone(),
            None => self.matrices[self.grid.steps()].clone(),
        }
    }

    pub fn entry(&self, row: usize, col: usize) -> Vec<C64> {
        self.matrices.iter().map(|m| m[[row, col]]).collect()
    }

    /// CSV with `time` followed by real and imaginary parts of each entry in
    /// row-major order (`m11_re,m11_im,m12_re,...`).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.size();
        let mut header = vec!["time".to_string()];
        for r in 1..=n {
            for c in 1..=n {
                header.push(format!("m{r}{c}_re"));
                header.push(format!("m{r}{c}_im"));
            }
        }
        writeln!(out, "{}", header.join(","))?;
        for (t, m) in self.grid.times().zip(&self.matrices) {
            let mut row = vec![format!("{t:.9e}")];
            for z in m.iter() {
                row.push(format!("{:.15e}", z.re));
                row.push(format!("{:.15e}", z.im));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Convenience wrapper for [`ModeMatrix::three_mode`].
pub fn mode_matrix_three(schedule: &CouplingSchedule, gamma: f64) -> Result<ModeMatrix> {
    ModeMatrix::three_mode(schedule, gamma)
}

/// Operators `φ_j(0)` of a three-mode space.
fn mode_lowerings(space: &CompositeSpace) -> Result<[SparseOp; 3]> {
    if space.len() != 3 {
        return Err(Error::config("three-mode frame requires a (u, c, v) space"));
    }
    Ok([lowering(space, 0), lowering(space, 1), lowering(space, 2)])
}

/// `Σ_j M(row, j) φ_j(0)` as an operator on the three-mode space.
pub fn transform_mode_operator(row: ModeRow, m: &Array2<C64>, space: &CompositeSpace) -> Result<OperatorMatrix> {
    let phi = mode_lowerings(space)?;
    let r = row as usize;
    let op = BlockCombination::new(&phi).combine(&[m[[r, 0]], m[[r, 1]], m[[r, 2]]]);
    Ok(OperatorMatrix::from_sparse(space, &op, (0..3).collect()))
}

fn kerr_from_lowering(kerr: f64, c: &SparseOp) -> SparseOp {
    let n = c.adjoint().matmul(c);
    n.matmul(&n).scaled(C64::new(kerr, 0.0))
}

/// `K (ĉ†(t) ĉ(t))²` with `ĉ(t)` the transformed cavity operator.
pub fn three_mode_hamiltonian_kerr(kerr: f64, m: &Array2<C64>, space: &CompositeSpace) -> Result<OperatorMatrix> {
    let c = transform_mode_operator(ModeRow::C, m, space)?.to_sparse();
    Ok(OperatorMatrix::from_sparse(
        space,
        &kerr_from_lowering(kerr, &c),
        (0..3).collect(),
    ))
}

fn three_mode_jump_coefficients(s: &ScheduleSample, gamma: f64, m: &Array2<C64>) -> [C64; 3] {
    let sg = gamma.sqrt();
    std::array::from_fn(|j| sg * m[[1, j]] + s.g_u.conj() * m[[0, j]] + s.g_v.conj() * m[[2, j]])
}

/// `Σ_j (√γ M(2,j) + g_u* M(1,j) + g_v* M(3,j)) φ_j(0)` at time `t`.
pub fn three_mode_jump_operator(
    gamma: f64,
    schedule: &CouplingSchedule,
    m: &Array2<C64>,
    space: &CompositeSpace,
    t: f64,
) -> Result<OperatorMatrix> {
    check_covers(schedule, t)?;
    let phi = mode_lowerings(space)?;
    let coeffs = three_mode_jump_coefficients(&schedule.sample(t), gamma, m);
    let op = BlockCombination::new(&phi).combine(&coeffs);
    Ok(OperatorMatrix::from_sparse(space, &op, (0..3).collect()))
}

/// Regularized `u cotθ` and `u tanθ`: each quotient is dropped once its
/// denominator squared falls below the floor.
fn regularized_ratios(s: &ScheduleSample, epsilon: f64) -> (C64, C64) {
    let (sin, cos) = s.theta.sin_cos();
    let cot = if sin * sin < epsilon { ZERO } else { s.u * (cos / sin) };
    let tan = if cos * cos < epsilon { ZERO } else { s.u * (sin / cos) };
    (cot, tan)
}

/// Two-mode interaction picture on the cascaded (u, scatterer, v) space.
pub struct TwoModeFrame {
    space: CompositeSpace,
    spec: SystemSpec,
    schedule: CouplingSchedule,
    /// `None` selects the closed-form identical-mode coefficients.
    mode_matrix: Option<Arc<ModeMatrix>>,
    // a_u†c, c†a_u, a_v†c, c†a_v
    hamiltonian_blocks: BlockCombination,
    // c, a_u, a_v
    jump_blocks: BlockCombination,
    scatterer_h: Option<SparseOp>,
    losses: Vec<SparseOp>,
}

impl TwoModeFrame {
    /// Identical input and output modes: the Jaynes-Cummings-like form with
    /// the regularized ancilla coefficient.
    pub fn identical(spec: SystemSpec, schedule: CouplingSchedule, u: FockWindow, v: FockWindow) -> Result<Self> {
        if !schedule.is_identical() {
            return Err(Error::config("identical-mode frame requires u = v"));
        }
        Self::build(spec, schedule, None, u, v)
    }

    /// General modes: the beam-splitter frame from the two-mode matrix.
    pub fn general(spec: SystemSpec, schedule: CouplingSchedule, u: FockWindow, v: FockWindow) -> Result<Self> {
        let m = Arc::new(ModeMatrix::two_mode(&schedule)?);
        Self::build(spec, schedule, Some(m), u, v)
    }

    fn build(
        spec: SystemSpec,
        schedule: CouplingSchedule,
        mode_matrix: Option<Arc<ModeMatrix>>,
        u: FockWindow,
        v: FockWindow,
    ) -> Result<Self> {
        spec.validate()?;
        let space = spec.cascaded_space(u, v)?;
        let a_u = lowering(&space, 0);
        let a_v = lowering(&space, 2);
        let c = embed_sparse(&SparseOp::from_dense(&spec.lowering), &space, 1)?;
        let hamiltonian_blocks = BlockCombination::new(&[
            a_u.adjoint().matmul(&c),
            c.adjoint().matmul(&a_u),
            a_v.adjoint().matmul(&c),
            c.adjoint().matmul(&a_v),
        ]);
        let jump_blocks = BlockCombination::new(&[c, a_u, a_v]);
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
            mode_matrix,
            hamiltonian_blocks,
            jump_blocks,
            scatterer_h,
            losses,
        })
    }

    /// Frame matrix used for back-transformation (closed form for identical modes).
    pub fn mode_matrix(&self) -> Result<Arc<ModeMatrix>> {
        match &self.mode_matrix {
            Some(m) => Ok(m.clone()),
            None => Ok(Arc::new(ModeMatrix::identical_two_mode(&self.schedule)?)),
        }
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

    /// Coefficients of (a_u†c, c†a_u, a_v†c, c†a_v) in H and of (c, a_u, a_v) in L₀.
    fn coefficients(&self, t: f64) -> ([C64; 4], [C64; 3]) {
        let s = self.schedule.sample(t);
        let sg = C64::new(self.spec.gamma.sqrt(), 0.0);
        match &self.mode_matrix {
            None => {
                let (cot, tan) = regularized_ratios(&s, self.schedule.epsilon());
                let anc = 0.5 * (cot - tan);
                (
                    [I * sg * s.u.conj(), -I * sg * s.u, I * sg * anc.conj(), -I * sg * anc],
                    [sg, ZERO, -(tan + cot)],
                )
            }
            Some(mm) => {
                let m = mm.at(t);
                // g_u â_u(t)† ĉ + g_v* ĉ† â_v(t) − h.c., with â(t) = Σ_j M_{·j} φ_j
                let x_u = s.g_u * m[[0, 0]].conj();
                let x_v = s.g_u * m[[0, 1]].conj();
                let y_u = s.g_v.conj() * m[[1, 0]];
                let y_v = s.g_v.conj() * m[[1, 1]];
                let h = 0.5 * I * sg;
                (
                    [
                        h * (x_u - y_u.conj()),
                        h * (y_u - x_u.conj()),
                        h * (x_v - y_v.conj()),
                        h * (y_v - x_v.conj()),
                    ],
                    [
                        sg,
                        s.g_u.conj() * m[[0, 0]] + s.g_v.conj() * m[[1, 0]],
                        s.g_u.conj() * m[[0, 1]] + s.g_v.conj() * m[[1, 1]],
                    ],
                )
            }
        }
    }
}

impl MasterEquation for TwoModeFrame {
    fn space(&self) -> &CompositeSpace {
        &self.space
    }

    fn hamiltonian(&self, t: f64) -> SparseOp {
        let (h, _) = self.coefficients(t);
        self.hamiltonian_blocks
            .combine(&h)
            .add_scaled(ONE, &self.scatterer_hamiltonian(t), ONE)
    }

    fn jump_operators(&self, t: f64) -> Vec<SparseOp> {
        let (_, l) = self.coefficients(t);
        std::iter::once(self.jump_blocks.combine(&l))
            .chain(self.losses.iter().cloned())
            .collect()
    }
}

/// Two-mode frame Hamiltonian at time `t` (closed form when `u = v`).
pub fn two_mode_hamiltonian(
    spec: &SystemSpec,
    schedule: &CouplingSchedule,
    u: FockWindow,
    v: FockWindow,
    t: f64,
) -> Result<OperatorMatrix> {
    check_covers(schedule, t)?;
    let frame = two_mode_frame(spec, schedule, u, v)?;
    Ok(OperatorMatrix::from_sparse(
        frame.space(),
        &frame.hamiltonian(t),
        (0..3).collect(),
    ))
}

/// Two-mode frame jump operator `√γ ĉ − (tanθ + cotθ) u â_v` for `u = v`.
pub fn two_mode_jump_operator(
    spec: &SystemSpec,
    schedule: &CouplingSchedule,
    u: FockWindow,
    v: FockWindow,
    t: f64,
) -> Result<OperatorMatrix> {
    check_covers(schedule, t)?;
    let frame = two_mode_frame(spec, schedule, u, v)?;
    let l0 = frame.jump_operators(t).swap_remove(0);
    Ok(OperatorMatrix::from_sparse(frame.space(), &l0, (0..3).collect()))
}

fn two_mode_frame(
    spec: &SystemSpec,
    schedule: &CouplingSchedule,
    u: FockWindow,
    v: FockWindow,
) -> Result<TwoModeFrame> {
    if schedule.is_identical() {
        TwoModeFrame::identical(spec.clone(), schedule.clone(), u, v)
    } else {
        TwoModeFrame::general(spec.clone(), schedule.clone(), u, v)
    }
}

/// Three-mode interaction picture for a Kerr cavity between two pulse modes.
pub struct ThreeModeFrame {
    space: CompositeSpace,
    gamma: f64,
    kerr: f64,
    schedule: CouplingSchedule,
    mode_matrix: Arc<ModeMatrix>,
    phi: BlockCombination,
}

impl ThreeModeFrame {
    pub fn new(gamma: f64, kerr: f64, schedule: CouplingSchedule, windows: [FockWindow; 3]) -> Result<Self> {
        let mode_matrix = Arc::new(ModeMatrix::three_mode(&schedule, gamma)?);
        Self::with_mode_matrix(gamma, kerr, schedule, mode_matrix, windows)
    }

    pub fn with_mode_matrix(
        gamma: f64,
        kerr: f64,
        schedule: CouplingSchedule,
        mode_matrix: Arc<ModeMatrix>,
        windows: [FockWindow; 3],
    ) -> Result<Self> {
        if mode_matrix.size() != 3 {
            return Err(Error::config("three-mode frame needs a 3×3 mode matrix"));
        }
        if !kerr.is_finite() || !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::config("Kerr strength and coupling rate must be finite, γ ≥ 0"));
        }
        let space = CompositeSpace::three_modes(windows[0], windows[1], windows[2])?;
        let phi = BlockCombination::new(&mode_lowerings(&space)?);
        Ok(Self {
            space,
            gamma,
            kerr,
            schedule,
            mode_matrix,
            phi,
        })
    }

    pub fn mode_matrix(&self) -> &Arc<ModeMatrix> {
        &self.mode_matrix
    }

    pub fn schedule(&self) -> &CouplingSchedule {
        &self.schedule
    }

    /// Frame-transformed lowering operator of `row` at time `t`.
    pub fn transformed(&self, row: ModeRow, t: f64) -> SparseOp {
        let m = self.mode_matrix.at(t);
        let r = row as usize;
        self.phi.combine(&[m[[r, 0]], m[[r, 1]], m[[r, 2]]])
    }
}

impl MasterEquation for ThreeModeFrame {
    fn space(&self) -> &CompositeSpace {
        &self.space
    }

    fn hamiltonian(&self, t: f64) -> SparseOp {
        if self.kerr == 0.0 {
            return SparseOp::zeros(self.space.dim());
        }
        kerr_from_lowering(self.kerr, &self.transformed(ModeRow::C, t))
    }

    fn jump_operators(&self, t: f64) -> Vec<SparseOp> {
        let m = self.mode_matrix.at(t);
        let coeffs = three_mode_jump_coefficients(&self.schedule.sample(t), self.gamma, &m);
        vec![self.phi.combine(&coeffs)]
    }
}

/// Number operator of a Schrödinger-picture mode evaluated on the frame
/// state: `â_k(t)† â_k(t)` with `â_k(t) = Σ_j M(k, j) φ_j`, where `modes`
/// lists the subsystem indices that carry `φ`.
pub fn frame_number_observable(
    name: impl Into<String>,
    mode_matrix: Arc<ModeMatrix>,
    space: &CompositeSpace,
    modes: &[usize],
    row: usize,
) -> Result<NamedObservable> {
    if modes.len() != mode_matrix.size() || row >= modes.len() {
        return Err(Error::config("mode list does not match the frame matrix"));
    }
    let blocks = BlockCombination::new(&modes.iter().map(|&k| lowering(space, k)).collect::<Vec<_>>());
    Ok(NamedObservable::dynamic(name, move |t| {
        let m = mode_matrix.at(t);
        let coeffs: Vec<C64> = (0..m.ncols()).map(|j| m[[row, j]]).collect();
        let a = blocks.combine(&coeffs);
        a.adjoint().matmul(&a)
    }))
}

/// `∫₀ᵀ |M₂₁|⁴ dt` (trapezoid on the mode-matrix grid).
pub fn cat_phase_integral(mode_matrix: &ModeMatrix, t_end: f64) -> f64 {
    let grid = mode_matrix.grid();
    let last = match grid.locate(t_end) {
        Some(GridPoint::Exact(i)) => i,
        Some(GridPoint::Between(i, _)) => i,
        None => grid.steps(),
    };
    let integrand: Vec<f64> = mode_matrix.matrices()[..=last]
        .iter()
        .map(|m| m[[1, 0]].norm_sqr().powi(2))
        .collect();
    *cumulative_trapezoid(&integrand, grid.dt()).last().unwrap_or(&0.0)
}

/// Even–odd Kerr phase `K ∫₀ᵀ |M₂₁|⁴ dt` accumulated in one pass.
pub fn analytic_cat_phase(kerr: f64, mode_matrix: &ModeMatrix, t_end: f64) -> f64 {
    kerr * cat_phase_integral(mode_matrix, t_end)
}

/// Single-pass Kerr strength giving an even–odd phase of π/2.
pub fn required_single_pass_kerr(mode_matrix: &ModeMatrix, t_end: f64) -> f64 {
    FRAC_PI_2 / cat_phase_integral(mode_matrix, t_end)
}

/// Number of passes (real-valued) giving a π/2 even–odd phase; infinite for
/// a vanishing per-pass phase.
pub fn required_passes(kerr: f64, mode_matrix: &ModeMatrix, t_end: f64) -> f64 {
    let phase = analytic_cat_phase(kerr, mode_matrix, t_end);
    if phase.abs() < f64::MIN_POSITIVE {
        f64::INFINITY
    } else {
        FRAC_PI_2 / phase.abs()
    }
}

/// Rounded pass count; `None` is the overflow sentinel for no accumulated phase.
pub fn required_pass_count(kerr: f64, mode_matrix: &ModeMatrix, t_end: f64) -> Option<u64> {
    let n = required_passes(kerr, mode_matrix, t_end);
    (n.is_finite() && n < u64::MAX as f64).then(|| n.round() as u64)
}

/// Which interaction picture a run uses.
#[derive(Clone, Debug)]
pub enum FramePlan {
    TwoMode {
        schedule: CouplingSchedule,
        lambda: Vec<C64>,
        mode_matrix: Option<Arc<ModeMatrix>>,
    },
    ThreeMode {
        schedule: CouplingSchedule,
        mode_matrix: Arc<ModeMatrix>,
    },
}

impl FramePlan {
    pub fn two_mode(schedule: CouplingSchedule) -> Result<Self> {
        let mode_matrix = if schedule.is_identical() {
            None
        } else {
            Some(Arc::new(ModeMatrix::two_mode(&schedule)?))
        };
        Ok(Self::TwoMode {
            lambda: lambda_two_mode(&schedule),
            schedule,
            mode_matrix,
        })
    }

    pub fn three_mode(schedule: CouplingSchedule, gamma: f64) -> Result<Self> {
        let mode_matrix = Arc::new(ModeMatrix::three_mode(&schedule, gamma)?);
        Ok(Self::ThreeMode { schedule, mode_matrix })
    }

    pub fn schedule(&self) -> &CouplingSchedule {
        match self {
            Self::TwoMode { schedule, .. } | Self::ThreeMode { schedule, .. } => schedule,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulses::{cavity_output_mode, gaussian_mode, DEFAULT_EPSILON};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_4;

    fn w(o: usize, s: usize) -> FockWindow {
        FockWindow::new(o, s).unwrap()
    }

    fn identical(dt: f64) -> CouplingSchedule {
        let grid = TimeGrid::spanning(0.0, 12.0, dt).unwrap();
        CouplingSchedule::identical(gaussian_mode(4.0, 1.0, &grid).unwrap(), DEFAULT_EPSILON).unwrap()
    }

    #[test]
    fn lambda_for_identical_modes() {
        let s = identical(1e-3);
        let lam = lambda_two_mode(&s);
        assert_eq!(lam[0], ZERO);
        assert_abs_diff_eq!(lam[4000].re, -FRAC_PI_4, epsilon = 1e-3);
        assert_abs_diff_eq!(lam.last().unwrap().re, -FRAC_PI_2, epsilon = 1e-3);
    }

    #[test]
    fn beam_splitter_limit_of_three_mode_matrix() {
        let s = identical(1e-3);
        let m3 = ModeMatrix::three_mode(&s, 0.0).unwrap();
        let lam = s.lambda();
        for (k, m) in m3.matrices().iter().enumerate().step_by(250) {
            assert_abs_diff_eq!(m[[0, 0]].re, lam[2 * k].re.cos(), epsilon = 1e-4);
            assert_abs_diff_eq!(m[[1, 1]].re, 1.0, epsilon = 1e-14);
        }
        assert!(m3.unitarity_error() < 1e-12);
        assert!(linalg::max_abs_diff(&m3.matrices()[0], &linalg::identity(3)) == 0.0);
    }

    #[test]
    fn magnus_agrees_with_rk4() {
        let grid = TimeGrid::spanning(0.0, 20.0, 2.5e-3).unwrap();
        let u = gaussian_mode(4.0, 1.0, &grid).unwrap();
        let v = cavity_output_mode(&u, 1.0, 0.0).unwrap().mode;
        let s = CouplingSchedule::new(u, v, DEFAULT_EPSILON).unwrap();
        let a = ModeMatrix::three_mode(&s, 1.0).unwrap();
        let b = ModeMatrix::three_mode_rk4(&s, 1.0).unwrap();
        // the image of the initial pulse mode (first column) is the
        // well-conditioned part; ancilla columns wind quickly before the pulse
        let diff = a
            .matrices()
            .iter()
            .zip(b.matrices())
            .flat_map(|(x, y)| (0..3).map(move |j| (x[[j, 0]] - y[[j, 0]]).norm()))
            .fold(0.0, f64::max);
        assert!(diff < 1e-7, "{diff}");
        assert!(a.unitarity_error() <= UNITARITY_TOL);
    }

    #[test]
    fn closed_form_two_mode_matches_magnus() {
        let s = identical(1e-3);
        let closed = ModeMatrix::identical_two_mode(&s).unwrap();
        let numeric = ModeMatrix::two_mode(&s).unwrap();
        for k in (0..numeric.grid().len()).step_by(100) {
            let t = numeric.grid().time(k);
            assert!(linalg::max_abs_diff(&numeric.matrices()[k], &closed.at(t)) < 1e-4);
        }
    }

    #[test]
    fn identical_frame_coefficients() {
        let s = identical(1e-3);
        let spec = SystemSpec::two_level(1.0).unwrap();
        // at θ = π/4 the ancilla coupling vanishes and the jump coefficient is 2u
        let k = s.theta().iter().position(|&th| th >= FRAC_PI_4).unwrap();
        let t = s.grid().time(k);
        let frame = TwoModeFrame::identical(spec.clone(), s.clone(), w(0, 2), w(0, 2)).unwrap();
        let (h, l) = frame.coefficients(t);
        assert!(h[2].norm() < 5e-3 && h[3].norm() < 5e-3);
        assert_abs_diff_eq!(l[2].re, -2.0 * s.u().samples()[k].re, epsilon = 5e-3);
        assert_eq!(l[1], ZERO);
        // regularized outside the pulse support
        let (_, l_late) = frame.coefficients(11.99);
        assert!(l_late[2].norm() < 1e-15);
        for t in [0.5, 3.0, 4.0, 6.0, 9.0] {
            let hm = two_mode_hamiltonian(&spec, &s, w(0, 3), w(0, 2), t).unwrap();
            assert!(hm.hermiticity_residual() < 1e-12);
        }
    }

    #[test]
    fn general_and_identical_two_mode_frames_agree() {
        let s = identical(1e-3);
        let spec = SystemSpec::two_level(1.0).unwrap();
        let a = TwoModeFrame::identical(spec.clone(), s.clone(), w(0, 2), w(0, 2)).unwrap();
        let b = TwoModeFrame::general(spec, s, w(0, 2), w(0, 2)).unwrap();
        for t in [2.0, 3.5, 4.0, 5.0, 6.5] {
            let (ha, la) = a.coefficients(t);
            let (hb, lb) = b.coefficients(t);
            for (x, y) in ha.iter().zip(&hb).chain(la.iter().zip(&lb)) {
                assert!((x - y).norm() < 2e-3, "t={t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn kerr_operator_properties() {
        let space = CompositeSpace::three_modes(w(0, 3), w(0, 3), w(0, 2)).unwrap();
        let id = linalg::identity(3);
        let h = three_mode_hamiltonian_kerr(0.5, &id, &space).unwrap();
        for g in 0..space.dim() {
            let n = space.local_index(g, 1) as f64;
            assert_abs_diff_eq!(h.entries()[[g, g]].re, 0.5 * n * n, epsilon = 1e-14);
        }
        let zero = three_mode_hamiltonian_kerr(0.0, &id, &space).unwrap();
        assert!(zero.entries().iter().all(|z| *z == ZERO));
        let theta: f64 = 0.4;
        let rot = array![
            [C64::new(theta.cos(), 0.0), C64::new(-theta.sin(), 0.0), ZERO],
            [C64::new(theta.sin(), 0.0), C64::new(theta.cos(), 0.0), ZERO],
            [ZERO, ZERO, ONE]
        ];
        let h = three_mode_hamiltonian_kerr(0.3, &rot, &space).unwrap();
        assert!(h.hermiticity_residual() < 1e-12);
        assert!(linalg::hermitian_eigenvalues(h.entries())[0] > -1e-10);
    }

    #[test]
    fn transformed_jump_at_start_is_bare() {
        let s = identical(1e-2);
        let space = CompositeSpace::three_modes(w(0, 2), w(0, 2), w(0, 2)).unwrap();
        let l = three_mode_jump_operator(1.0, &s, &linalg::identity(3), &space, 0.0).unwrap();
        let want = lowering(&space, 1).to_dense().mapv(|z| z * 1.0)
            + lowering(&space, 0).to_dense().mapv(|z| z * s.g_u()[0].conj())
            + lowering(&space, 2).to_dense().mapv(|z| z * s.g_v()[0].conj());
        assert!(linalg::max_abs_diff(l.entries(), &want) < 1e-15);
        let c = transform_mode_operator(ModeRow::C, &linalg::identity(3), &space).unwrap();
        assert_eq!(c.entries(), &lowering(&space, 1).to_dense());
    }

    #[test]
    fn pass_count_sentinel() {
        let s = identical(1e-2);
        let m = ModeMatrix::three_mode(&s, 1.0).unwrap();
        assert_eq!(analytic_cat_phase(0.0, &m, 12.0), 0.0);
        assert!(required_passes(0.0, &m, 12.0).is_infinite());
        assert_eq!(required_pass_count(0.0, &m, 12.0), None);
    }

    #[test]
    fn mode_matrix_csv_has_time_and_nine_entries() {
        let s = identical(1e-2);
        let m = ModeMatrix::three_mode(&s, 1.0).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 19);
        assert_eq!(lines.count(), m.grid().len());
    }
}
