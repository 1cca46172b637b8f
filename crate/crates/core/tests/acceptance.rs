//! Acceptance run at full scale. Prints one PASS/FAIL line per criterion.
//!
//! A failing criterion is reported, not hidden, but the process still exits
//! successfully so that the rest of the workspace test suite can be read.
//! Set `ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit, and
//! `ACCEPTANCE_ONLY=1,4` to run a subset.

use std::process::ExitCode;
use std::time::Instant;

use pulse_cascade::dynamics::{
    integrate, CascadedModel, IntegrateOptions, MasterEquation, NamedObservable, SystemSpec, Trajectory,
};
use pulse_cascade::experiments::{
    run_cat_multi, run_cat_single, run_empty_cavity, run_rabi, run_squeeze, ExperimentConfig, InputState, Scenario,
};
use pulse_cascade::fock::{
    coherent_amplitudes, coherent_ket, fock_ket, ket_product, lowering, DensityMatrix, FockWindow,
};
use pulse_cascade::frames::{cat_phase_integral, required_passes, ModeMatrix, TwoModeFrame};
use pulse_cascade::pulses::{cavity_output_mode, gaussian_mode, CouplingSchedule, TimeGrid, DEFAULT_EPSILON};
use pulse_cascade::{Result, C64};

// Tolerances, pinned.
const SQUEEZE_VAR: (f64, f64) = (0.235, 0.255);
const SQUEEZE_PHI: (f64, f64) = (0.47, 0.57);
const CAT_INTEGRAL: f64 = 1.180;
const CAT_INTEGRAL_TOL: f64 = 0.02;
const CAT_PASSES: f64 = 133.0;
const CAT_PASSES_TOL: f64 = 3.0;
const RABI_MAXIMA: usize = 3;
const RABI_MAX_DEFICIT: f64 = 2.0;
const RABI_MAX_V: f64 = 1.0;
const TRANSPORT_TOL: f64 = 1e-4;
const OVERLAP_MIN: f64 = 0.999;
const EQUIVALENCE_TOL: f64 = 1e-4;
const TRACE_TOL: f64 = 1e-6;
const EIGEN_TOL: f64 = 1e-6;
const UNITARITY_TOL: f64 = 1e-8;
const BACKFLOW_TOL: f64 = 1e-8;
const DECAY_LAW_TOL: f64 = 1e-3;
const CAT_FIDELITY_MIN: f64 = 0.9;
const CAT_NEGATIVITY_MAX: f64 = -0.01;
const SINGLE_PASS_LOSS_MIN: f64 = 0.2;

const ORACLE_DT: f64 = 5e-3;
const ORACLE_T_END: f64 = 10.0;

type Criterion = (u8, &'static str, fn() -> Result<Verdict>);

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn w(n: usize) -> FockWindow {
    FockWindow::truncated(n).expect("positive window size")
}

fn standard_schedule(t_end: f64, dt: f64) -> Result<CouplingSchedule> {
    let grid = TimeGrid::spanning(0.0, t_end, dt)?;
    CouplingSchedule::identical(gaussian_mode(4.0, 1.0, &grid)?, DEFAULT_EPSILON)
}

fn standard_mode_matrix() -> Result<ModeMatrix> {
    let grid = TimeGrid::spanning(0.0, 20.0, 2.5e-3)?;
    let u = gaussian_mode(4.0, 1.0, &grid)?;
    let v = cavity_output_mode(&u, 1.0, 0.0)?.mode;
    ModeMatrix::three_mode(&CouplingSchedule::new(u, v, DEFAULT_EPSILON)?, 1.0)
}

/// Schrödinger-picture cascade and two-mode frame from `u_ket ⊗ |g⟩ ⊗ |0⟩`.
fn picture_pair(u_ket: Vec<C64>, size: usize) -> Result<(Trajectory, Trajectory)> {
    let spec = SystemSpec::two_level(1.0)?;
    let sched = standard_schedule(ORACLE_T_END, ORACLE_DT / 4.0)?;
    let lab = CascadedModel::new(spec.clone(), sched.clone(), w(size), w(size))?;
    let frame = TwoModeFrame::identical(spec, sched, w(size), w(size))?;
    let space = lab.space().clone();
    let ket = ket_product(&[u_ket, fock_ket(0, w(2))?, fock_ket(0, w(size))?]);
    let rho0 = DensityMatrix::pure(space.clone(), &ket)?;
    let c = lowering(&space, 1);
    let obs = [NamedObservable::fixed("n_c", c.adjoint().matmul(&c))];
    let grid = TimeGrid::spanning(0.0, ORACLE_T_END, ORACLE_DT)?;
    let opts = IntegrateOptions {
        snapshot_every: 50,
        ..IntegrateOptions::default()
    };
    Ok((
        integrate(&lab, &rho0, &grid, &obs, &opts)?,
        integrate(&frame, &rho0, &grid, &obs, &opts)?,
    ))
}

struct PairStats {
    deviation: f64,
    drift: f64,
    min_eig: f64,
}

fn compare_pictures(u_ket: Vec<C64>, size: usize) -> Result<PairStats> {
    let (lab, frame) = picture_pair(u_ket, size)?;
    let a = lab.real("n_c").unwrap_or_default();
    let b = frame.real("n_c").unwrap_or_default();
    let deviation = if a.is_empty() || a.len() != b.len() {
        f64::INFINITY
    } else {
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    Ok(PairStats {
        deviation,
        drift: lab.max_trace_drift.max(frame.max_trace_drift),
        min_eig: lab.min_eigenvalue.min(frame.min_eigenvalue),
    })
}

fn equivalence_inputs() -> Result<Vec<(String, Vec<C64>, usize)>> {
    let mut inputs = Vec::new();
    for n in 1..=3 {
        inputs.push((format!("n={n}"), fock_ket(n, w(n + 1))?, n + 1));
    }
    inputs.push(("α=1".to_string(), coherent_ket(C64::new(1.0, 0.0), w(10))?, 10));
    Ok(inputs)
}

fn squeezing() -> Result<Verdict> {
    let mut cfg = ExperimentConfig::preset(Scenario::Squeeze);
    cfg.kerr = Some(0.02);
    let s = run_squeeze(&cfg)?.summary;
    let scan: Vec<String> = s
        .scan
        .iter()
        .map(|e| format!("K={} → {:.4}", e.kerr, e.var_star))
        .collect();
    let ok =
        (SQUEEZE_VAR.0..=SQUEEZE_VAR.1).contains(&s.var_star) && (SQUEEZE_PHI.0..=SQUEEZE_PHI.1).contains(&s.phi_star);
    verdict(
        ok,
        format!(
            "var* {:.4} (want [{}, {}]) at φ* {:.4} rad (want [{}, {}]); scan {}",
            s.var_star,
            SQUEEZE_VAR.0,
            SQUEEZE_VAR.1,
            s.phi_star,
            SQUEEZE_PHI.0,
            SQUEEZE_PHI.1,
            scan.join(", ")
        ),
    )
}

fn cat_constants() -> Result<Verdict> {
    let mm = standard_mode_matrix()?;
    let integral = cat_phase_integral(&mm, 20.0);
    let passes = required_passes(0.01, &mm, 20.0);
    verdict(
        (integral - CAT_INTEGRAL).abs() <= CAT_INTEGRAL_TOL && (passes - CAT_PASSES).abs() <= CAT_PASSES_TOL,
        format!("∫|M₂₁|⁴ = {integral:.4}, N = {passes:.2} at K = 0.01"),
    )
}

fn rabi() -> Result<Verdict> {
    let full = run_rabi(&ExperimentConfig::preset(Scenario::Rabi))?.summary;
    let desk = run_rabi(&ExperimentConfig::preset(Scenario::Rabi).small())?.summary;
    let oracle = compare_pictures(fock_ket(5, w(6))?, 6)?;
    let full_ok = full.excited_maxima == RABI_MAXIMA
        && full.max_u_deficit <= RABI_MAX_DEFICIT
        && full.peak_v_occupation < RABI_MAX_V;
    // one full oscillation: the excitation rises, falls and rises again
    let desk_ok = desk.excited_maxima >= 2 && oracle.deviation <= EQUIVALENCE_TOL;
    verdict(
        full_ok && desk_ok,
        format!(
            "n=20: {} maxima, deficit {:.3}, v peak {:.3}; n=5: {} maxima, picture deviation {:.2e}",
            full.excited_maxima, full.max_u_deficit, full.peak_v_occupation, desk.excited_maxima, oracle.deviation
        ),
    )
}

fn empty_cavity() -> Result<Verdict> {
    let s = run_empty_cavity(&ExperimentConfig::preset(Scenario::EmptyCavity))?.summary;
    let transport = (s.final_u_occupation - s.input_photons).abs();
    verdict(
        transport <= TRANSPORT_TOL && s.output_overlap.abs() >= OVERLAP_MIN,
        format!(
            "|⟨n_u⟩(T) − n_in| {transport:.2e}, |overlap| {:.6}",
            s.output_overlap.abs()
        ),
    )
}

fn frame_equivalence() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (label, ket, size) in equivalence_inputs()? {
        let stats = compare_pictures(ket, size)?;
        worst = worst.max(stats.deviation);
        parts.push(format!("{label} {:.1e}", stats.deviation));
    }
    verdict(worst <= EQUIVALENCE_TOL, format!("max |Δ⟨c†c⟩|: {}", parts.join(", ")))
}

fn no_backflow() -> Result<f64> {
    let sched = standard_schedule(12.0, ORACLE_DT / 4.0)?;
    let model = CascadedModel::new(SystemSpec::two_level(1.0)?, sched, w(2), w(3))?;
    let space = model.space().clone();
    let ket = ket_product(&[fock_ket(0, w(2))?, fock_ket(1, w(2))?, fock_ket(1, w(3))?]);
    let rho0 = DensityMatrix::pure(space.clone(), &ket)?;
    let a_u = lowering(&space, 0);
    let traj = integrate(
        &model,
        &rho0,
        &TimeGrid::spanning(0.0, 12.0, ORACLE_DT)?,
        &[NamedObservable::fixed("n_u", a_u.adjoint().matmul(&a_u))],
        &IntegrateOptions::default(),
    )?;
    Ok(traj.real("n_u").unwrap_or_default().into_iter().fold(0.0, f64::max))
}

/// Largest relative deviation of the output-cavity amplitude from
/// β(t_ε)√(F(t_ε)/F(t)) with F the cumulative weight of the output mode.
fn decay_law_deviation() -> Result<f64> {
    let sched = standard_schedule(12.0, 2.5e-4)?;
    let model = CascadedModel::new(SystemSpec::two_level(0.0)?, sched.clone(), w(1), w(4))?;
    let space = model.space().clone();
    let full = TimeGrid::spanning(0.0, 12.0, 1e-3)?;
    let weight = sched.v().cumulative_weight();
    let start = (0..full.len()).find(|&k| weight[4 * k] >= DEFAULT_EPSILON).unwrap_or(0);
    let grid = full.starting_at(start)?.truncated(7000)?;
    let f_start = weight[4 * start];

    let (amps, captured) = coherent_amplitudes(C64::new(0.05, 0.0), w(4));
    let amps: Vec<C64> = amps.iter().map(|z| z / captured.sqrt()).collect();
    let ket = ket_product(&[fock_ket(0, w(1))?, fock_ket(0, w(2))?, amps]);
    let rho0 = DensityMatrix::pure(space.clone(), &ket)?;
    let beta0 = rho0.expectation_sparse(&lowering(&space, 2)).re;
    let traj = integrate(
        &model,
        &rho0,
        &grid,
        &[NamedObservable::fixed("a_v", lowering(&space, 2))],
        &IntegrateOptions::default(),
    )?;
    let series = traj.series("a_v").unwrap_or_default();
    let mut worst: f64 = 0.0;
    for (k, t) in traj.times.iter().enumerate() {
        let idx = ((t - sched.grid().t0()) / sched.grid().dt()).round() as usize;
        let want = beta0 * (f_start / weight[idx]).sqrt();
        worst = worst.max(((series[k].re - want) / want).abs());
    }
    Ok(worst)
}

fn invariants() -> Result<Verdict> {
    let mut drift: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    for (_, ket, size) in equivalence_inputs()? {
        let stats = compare_pictures(ket, size)?;
        drift = drift.max(stats.drift);
        min_eig = min_eig.min(stats.min_eig);
    }
    let unitarity = standard_mode_matrix()?.unitarity_error();
    let backflow = no_backflow()?;
    let decay = decay_law_deviation()?;
    verdict(
        drift <= TRACE_TOL
            && min_eig >= -EIGEN_TOL
            && unitarity <= UNITARITY_TOL
            && backflow <= BACKFLOW_TOL
            && decay <= DECAY_LAW_TOL,
        format!(
            "trace drift {drift:.1e}, min eigenvalue {min_eig:.1e}, ‖M†M − 1‖ {unitarity:.1e}, \
             backflow {backflow:.1e}, decay law {decay:.1e}"
        ),
    )
}

fn multi_pass_cat() -> Result<Verdict> {
    let mut multi_cfg = ExperimentConfig::preset(Scenario::CatMulti);
    multi_cfg.kerr = Some(0.01);
    multi_cfg.input = InputState::Coherent { alpha: 2.0, phase: 0.0 };
    let multi = run_cat_multi(&multi_cfg)?.summary;
    let single = run_cat_single(&ExperimentConfig::preset(Scenario::CatSingle))?.summary;
    verdict(
        multi.cat_fidelity >= CAT_FIDELITY_MIN
            && multi.wigner_min_between_lobes <= CAT_NEGATIVITY_MAX
            && single.u_population_loss >= SINGLE_PASS_LOSS_MIN,
        format!(
            "{} passes: fidelity {:.4}, W between lobes {:.4}; single pass K={:.3}: u loss {:.1}%",
            multi.passes,
            multi.cat_fidelity,
            multi.wigner_min_between_lobes,
            single.kerr,
            100.0 * single.u_population_loss
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        (1, "squeezing reproduction", squeezing),
        (2, "cat-condition constants", cat_constants),
        (3, "Rabi structure", rabi),
        (4, "empty-cavity lossless transport", empty_cavity),
        (5, "frame equivalence", frame_equivalence),
        (6, "invariant battery", invariants),
        (7, "multi-pass cat and single-pass loss", multi_pass_cat),
    ];
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut failures = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = check().unwrap_or_else(|e| Verdict {
            passed: false,
            detail: format!("error: {e}"),
        });
        if !v.passed {
            failures += 1;
        }
        println!(
            "{} criterion {id} ({name}): {} [{:.1}s]",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failures} criteria failing");
    if strict && failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
