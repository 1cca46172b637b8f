//! Property battery run by `pulse-cascade check`: every interaction picture
//! is compared against the Schrödinger-picture cascade, and the structural
//! invariants of the integrator and the mode matrices are verified.

use std::time::Instant;

use pulse_cascade::dynamics::{
    integrate, CascadedModel, IntegrateOptions, MasterEquation, NamedObservable, SystemSpec, Trajectory,
};
use pulse_cascade::experiments::{run_cat_multi, ExperimentConfig, InputState, Scenario, WindowSpec, Windows};
use pulse_cascade::fock::{coherent_ket, fock_ket, ket_product, lowering, DensityMatrix, FockWindow};
use pulse_cascade::frames::{ModeMatrix, TwoModeFrame, UNITARITY_TOL};
use pulse_cascade::pulses::{cavity_output_mode, gaussian_mode, CouplingSchedule, TimeGrid, DEFAULT_EPSILON};
use pulse_cascade::{Result, C64};

pub const EQUIVALENCE_TOL: f64 = 1e-4;
pub const TRACE_TOL: f64 = 1e-6;
pub const EIGEN_TOL: f64 = 1e-6;
pub const BACKFLOW_TOL: f64 = 1e-8;
pub const PASS_IDENTITY_TOL: f64 = 1e-6;

pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

struct Scale {
    dt: f64,
    t_end: f64,
}

fn w(n: usize) -> FockWindow {
    FockWindow::truncated(n).expect("positive window size")
}

fn gaussian_schedule(scale: &Scale) -> Result<CouplingSchedule> {
    let grid = TimeGrid::spanning(0.0, scale.t_end, scale.dt / 4.0)?;
    CouplingSchedule::identical(gaussian_mode(4.0, 1.0, &grid)?, DEFAULT_EPSILON)
}

fn run_pair(scale: &Scale, u_ket: Vec<C64>, size: usize) -> Result<(Trajectory, Trajectory)> {
    let spec = SystemSpec::two_level(1.0)?;
    let sched = gaussian_schedule(scale)?;
    let lab = CascadedModel::new(spec.clone(), sched.clone(), w(size), w(size))?;
    let frame = TwoModeFrame::identical(spec, sched, w(size), w(size))?;
    let space = lab.space().clone();
    let ket = ket_product(&[u_ket, fock_ket(0, w(2))?, fock_ket(0, w(size))?]);
    let rho0 = DensityMatrix::pure(space.clone(), &ket)?;
    let c = lowering(&space, 1);
    let obs = [NamedObservable::fixed("n_c", c.adjoint().matmul(&c))];
    let grid = TimeGrid::spanning(0.0, scale.t_end, scale.dt)?;
    let opts = IntegrateOptions {
        snapshot_every: 50,
        ..IntegrateOptions::default()
    };
    Ok((
        integrate(&lab, &rho0, &grid, &obs, &opts)?,
        integrate(&frame, &rho0, &grid, &obs, &opts)?,
    ))
}

fn max_deviation(a: &Trajectory, b: &Trajectory, name: &str) -> f64 {
    let (Some(x), Some(y)) = (a.real(name), b.real(name)) else {
        return f64::INFINITY;
    };
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn timed(name: String, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs the whole battery. `small` uses a coarser step, which keeps every
/// tolerance but finishes in well under a minute.
pub fn battery(small: bool) -> Vec<CheckOutcome> {
    let scale = Scale {
        dt: if small { 1e-2 } else { 5e-3 },
        t_end: 10.0,
    };
    let mut out = Vec::new();

    let mut inputs: Vec<(String, usize, Result<Vec<C64>>)> = (1..=3)
        .map(|n| (format!("Fock n={n}"), n + 1, fock_ket(n, w(n + 1))))
        .collect();
    inputs.push(("coherent α=1".into(), 10, coherent_ket(C64::new(1.0, 0.0), w(10))));
    for (label, size, ket) in inputs {
        out.push(timed(format!("frame equivalence, {label}"), || {
            let (lab, frame) = run_pair(&scale, ket?, size)?;
            let dev = max_deviation(&lab, &frame, "n_c");
            let drift = lab.max_trace_drift.max(frame.max_trace_drift);
            let eig = lab.min_eigenvalue.min(frame.min_eigenvalue);
            Ok((
                dev <= EQUIVALENCE_TOL && drift <= TRACE_TOL && eig >= -EIGEN_TOL,
                format!("max |Δ⟨c†c⟩| {dev:.2e}, trace drift {drift:.2e}, min eigenvalue {eig:.2e}"),
            ))
        }));
    }

    out.push(timed("mode-matrix unitarity".into(), || {
        let grid = TimeGrid::spanning(0.0, 20.0, scale.dt / 4.0)?;
        let u = gaussian_mode(4.0, 1.0, &grid)?;
        let v = cavity_output_mode(&u, 1.0, 0.0)?.mode;
        let three = ModeMatrix::three_mode(&CouplingSchedule::new(u.clone(), v.clone(), DEFAULT_EPSILON)?, 1.0)?;
        let two = ModeMatrix::two_mode(&CouplingSchedule::new(u, v, DEFAULT_EPSILON)?)?;
        let worst = three.unitarity_error().max(two.unitarity_error());
        Ok((worst <= UNITARITY_TOL, format!("max ‖M†M − 1‖ {worst:.2e}")))
    }));

    out.push(timed("no backflow into the input mode".into(), || {
        let sched = gaussian_schedule(&Scale { t_end: 12.0, ..scale })?;
        let model = CascadedModel::new(SystemSpec::two_level(1.0)?, sched, w(2), w(3))?;
        let space = model.space().clone();
        let ket = ket_product(&[fock_ket(0, w(2))?, fock_ket(1, w(2))?, fock_ket(1, w(3))?]);
        let rho0 = DensityMatrix::pure(space.clone(), &ket)?;
        let a_u = lowering(&space, 0);
        let grid = TimeGrid::spanning(0.0, 12.0, scale.dt)?;
        let traj = integrate(
            &model,
            &rho0,
            &grid,
            &[NamedObservable::fixed("n_u", a_u.adjoint().matmul(&a_u))],
            &IntegrateOptions::default(),
        )?;
        let max = traj.real("n_u").unwrap_or_default().into_iter().fold(0.0, f64::max);
        Ok((max <= BACKFLOW_TOL, format!("max ⟨a_u†a_u⟩ {max:.2e}")))
    }));

    out.push(timed("vacuum is dark".into(), || {
        let (lab, frame) = run_pair(&scale, fock_ket(0, w(2))?, 2)?;
        let max = lab
            .real("n_c")
            .into_iter()
            .chain(frame.real("n_c"))
            .flatten()
            .map(f64::abs)
            .fold(0.0, f64::max);
        Ok((max <= 1e-12, format!("max ⟨c†c⟩ {max:.2e}")))
    }));

    out.push(timed("Kerr-free passes are the identity".into(), || {
        let mut cfg = ExperimentConfig::preset(Scenario::CatMulti);
        cfg.kerr = Some(0.0);
        cfg.passes = Some(3);
        cfg.dt = scale.dt;
        cfg.input = InputState::Coherent { alpha: 1.0, phase: 0.3 };
        cfg.windows = Some(Windows {
            u: WindowSpec { offset: 0, size: 12 },
            c: Some(WindowSpec { offset: 0, size: 2 }),
            v: WindowSpec { offset: 0, size: 2 },
        });
        let outcome = run_cat_multi(&cfg)?;
        let mut previous = DensityMatrix::pure(
            pulse_cascade::fock::CompositeSpace::single(w(12)),
            &cfg.input.ket(w(12))?,
        )?;
        let mut worst: f64 = 0.0;
        for pass in &outcome.passes {
            worst = worst.max(pass.u_state.trace_distance(&previous));
            previous = pass.u_state.clone();
        }
        Ok((
            worst <= PASS_IDENTITY_TOL,
            format!("max per-pass trace distance {worst:.2e}"),
        ))
    }));

    out
}
