use ndarray::{Array1, Array2};
use pulse_cascade::dynamics::{
    integrate, CascadedModel, IntegrateOptions, MasterEquation, NamedObservable, SystemSpec,
};
use pulse_cascade::fock::{coherent_amplitudes, fock_ket, ket_product, lowering, DensityMatrix, FockWindow};
use pulse_cascade::linalg::{dagger, identity, kron, C64, I};
use pulse_cascade::pulses::{gaussian_mode, CouplingSchedule, TimeGrid, DEFAULT_EPSILON};

fn w(n: usize) -> FockWindow {
    FockWindow::truncated(n).unwrap()
}

fn lower(n: usize) -> Array2<C64> {
    let mut a = Array2::zeros((n, n));
    for k in 1..n {
        a[[k - 1, k]] = C64::new((k as f64).sqrt(), 0.0);
    }
    a
}

fn schedule(t_end: f64, dt: f64) -> CouplingSchedule {
    let grid = TimeGrid::spanning(0.0, t_end, dt).unwrap();
    CouplingSchedule::identical(gaussian_mode(4.0, 1.0, &grid).unwrap(), DEFAULT_EPSILON).unwrap()
}

/// Row-major vectorized Liouvillian of `H` and a single jump `L`.
fn liouvillian(h: &Array2<C64>, l: &Array2<C64>) -> Array2<C64> {
    let n = h.nrows();
    let id = identity(n);
    let ldl = dagger(l).dot(l);
    let tr = |m: &Array2<C64>| m.t().to_owned();
    let conj = |m: &Array2<C64>| m.mapv(|z| z.conj());
    (kron(h, &id) - kron(&id, &tr(h))).mapv(|z| -I * z) + kron(l, &conj(l))
        - (kron(&ldl, &id) + kron(&id, &tr(&ldl))).mapv(|z| 0.5 * z)
}

/// `exp(hL) v` by its Taylor series run to convergence.
fn exp_apply(lv: &Array2<C64>, h: f64, v: &Array1<C64>) -> Array1<C64> {
    let mut out = v.clone();
    let mut term = v.clone();
    for k in 1..40 {
        term = lv.dot(&term).mapv(|z| z * (h / k as f64));
        out += &term;
        if term.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-17 {
            break;
        }
    }
    out
}

#[test]
fn single_photon_pulse_matches_piecewise_exponential_propagator() {
    let (t_end, dt) = (9.0, 1e-2);
    // schedule fine enough to hold the oracle midpoints exactly
    let sched = schedule(t_end, dt / 20.0);
    let spec = SystemSpec::two_level(1.0).unwrap();
    let model = CascadedModel::new(spec, sched.clone(), w(2), w(2)).unwrap();
    let space = model.space().clone();

    // hand-assembled operators on u ⊗ atom ⊗ v, all of dimension 2
    let a = lower(2);
    let id = identity(2);
    let a_u = kron(&kron(&a, &id), &id);
    let c = kron(&kron(&id, &a), &id);
    let a_v = kron(&kron(&id, &id), &a);
    let build = |t: f64| {
        let s = sched.sample(t);
        let x = dagger(&a_u).dot(&c).mapv(|z| z * s.g_u)
            + dagger(&c).dot(&a_v).mapv(|z| z * s.g_v.conj())
            + dagger(&a_u).dot(&a_v).mapv(|z| z * s.g_u * s.g_v.conj());
        let h = (&x - &dagger(&x)).mapv(|z| 0.5 * I * z);
        let l = &c + &a_u.mapv(|z| z * s.g_u.conj()) + &a_v.mapv(|z| z * s.g_v.conj());
        liouvillian(&h, &l)
    };

    let ket = ket_product(&[
        fock_ket(1, w(2)).unwrap(),
        fock_ket(0, w(2)).unwrap(),
        fock_ket(0, w(2)).unwrap(),
    ]);
    let rho0 = DensityMatrix::pure(space.clone(), &ket).unwrap();
    let grid = TimeGrid::spanning(0.0, t_end, dt).unwrap();
    let n_c = lowering(&space, 1).adjoint().matmul(&lowering(&space, 1));
    let traj = integrate(
        &model,
        &rho0,
        &grid,
        &[NamedObservable::fixed("n_c", n_c)],
        &IntegrateOptions::default(),
    )
    .unwrap();
    let series = traj.real("n_c").unwrap();

    let hs = dt / 10.0;
    let mut vec_rho = Array1::from_iter(rho0.entries().iter().copied());
    let n_c_dense = dagger(&c).dot(&c);
    let mut worst: f64 = 0.0;
    let mut peak: f64 = 0.0;
    for step in 0..grid.steps() {
        for sub in 0..10 {
            let tm = grid.time(step) + (sub as f64 + 0.5) * hs;
            vec_rho = exp_apply(&build(tm), hs, &vec_rho);
        }
        let rho = Array2::from_shape_vec((8, 8), vec_rho.to_vec()).unwrap();
        let oracle = n_c_dense.dot(&rho).diag().sum().re;
        worst = worst.max((oracle - series[step + 1]).abs());
        peak = peak.max(oracle);
    }
    assert!(peak > 0.1, "scatterer barely excited: {peak}");
    assert!(worst < 1e-5, "max deviation {worst:.3e}");
}

#[test]
fn no_backflow_into_upstream_cavity() {
    let sched = schedule(12.0, 2.5e-3);
    let spec = SystemSpec::two_level(1.0).unwrap();
    let model = CascadedModel::new(spec, sched, w(2), w(3)).unwrap();
    let space = model.space().clone();
    // u vacuum, scatterer excited, v holding one photon
    let ket = ket_product(&[
        fock_ket(0, w(2)).unwrap(),
        fock_ket(1, w(2)).unwrap(),
        fock_ket(1, w(3)).unwrap(),
    ]);
    let rho0 = DensityMatrix::pure(space.clone(), &ket).unwrap();
    let a_u = lowering(&space, 0);
    let grid = TimeGrid::spanning(0.0, 12.0, 1e-2).unwrap();
    let traj = integrate(
        &model,
        &rho0,
        &grid,
        &[NamedObservable::fixed("n_u", a_u.adjoint().matmul(&a_u))],
        &IntegrateOptions::default(),
    )
    .unwrap();
    let max_nu = traj.real("n_u").unwrap().into_iter().fold(0.0, f64::max);
    assert!(max_nu <= 1e-8, "{max_nu}");
    assert!(traj.max_trace_drift <= 1e-6);
}

#[test]
fn output_cavity_amplitude_follows_instant_decay_law() {
    let sched = schedule(12.0, 2.5e-4);
    let spec = SystemSpec::two_level(0.0).unwrap();
    let model = CascadedModel::new(spec, sched.clone(), w(1), w(4)).unwrap();
    let space = model.space().clone();

    let full = TimeGrid::spanning(0.0, 12.0, 1e-3).unwrap();
    let weight = sched.v().cumulative_weight();
    // first integrator time at which the output cavity has started to fill
    let start = (0..full.len()).find(|&k| weight[4 * k] >= DEFAULT_EPSILON).unwrap();
    let grid = full.starting_at(start).unwrap().truncated(7000).unwrap();
    let f_start = weight[4 * start];

    let beta = C64::new(0.05, 0.0);
    let (amps, captured) = coherent_amplitudes(beta, w(4));
    let amps: Vec<C64> = amps.iter().map(|z| z / captured.sqrt()).collect();
    let ket = ket_product(&[fock_ket(0, w(1)).unwrap(), fock_ket(0, w(2)).unwrap(), amps]);
    let rho0 = DensityMatrix::pure(space.clone(), &ket).unwrap();
    let beta0 = rho0.expectation_sparse(&lowering(&space, 2));

    let traj = integrate(
        &model,
        &rho0,
        &grid,
        &[NamedObservable::fixed("a_v", lowering(&space, 2))],
        &IntegrateOptions::default(),
    )
    .unwrap();
    let series = traj.series("a_v").unwrap();
    for (k, t) in traj.times.iter().enumerate().step_by(50) {
        let idx = ((t - sched.grid().t0()) / sched.grid().dt()).round() as usize;
        let want = beta0.re * (f_start / weight[idx]).sqrt();
        let got = series[k].re;
        assert!(
            ((got - want) / want).abs() < 1e-3,
            "t={t}: got {got:.6e}, want {want:.6e}"
        );
    }
}

#[test]
fn vacuum_is_a_global_dark_state() {
    let sched = schedule(12.0, 2.5e-3);
    let spec = SystemSpec::two_level(1.0).unwrap();
    let model = CascadedModel::new(spec, sched, w(2), w(2)).unwrap();
    let space = model.space().clone();
    let rho0 = DensityMatrix::pure(space.clone(), &ket_product(&vec![fock_ket(0, w(2)).unwrap(); 3])).unwrap();
    for t in [0.0, 3.0, 4.0, 7.5] {
        let l0 = model.jump_operators(t).remove(0);
        let l_rho = l0.apply_left(rho0.entries());
        assert!(l_rho.iter().all(|z| z.norm() < 1e-15));
    }
    let grid = TimeGrid::spanning(0.0, 12.0, 1e-2).unwrap();
    let traj = integrate(&model, &rho0, &grid, &[], &IntegrateOptions::default()).unwrap();
    assert!(pulse_cascade::linalg::max_abs_diff(traj.final_state.entries(), rho0.entries()) < 1e-14);
}

#[test]
fn hand_assembled_operators_at_dimension_eight() {
    let sched = schedule(12.0, 1e-3);
    let spec = SystemSpec::two_level(0.7).unwrap();
    let model = CascadedModel::new(spec, sched.clone(), w(2), w(2)).unwrap();
    let a = lower(2);
    let id = identity(2);
    let a_u = kron(&kron(&a, &id), &id);
    let c = kron(&kron(&id, &a), &id);
    let a_v = kron(&kron(&id, &id), &a);
    let sg = 0.7f64.sqrt();
    for t in [1.0, 3.3, 4.0, 5.2, 8.0] {
        let s = sched.sample(t);
        let x = dagger(&a_u).dot(&c).mapv(|z| z * sg * s.g_u)
            + dagger(&c).dot(&a_v).mapv(|z| z * sg * s.g_v.conj())
            + dagger(&a_u).dot(&a_v).mapv(|z| z * s.g_u * s.g_v.conj());
        let h = (&x - &dagger(&x)).mapv(|z| 0.5 * I * z);
        let l = c.mapv(|z| z * sg) + a_u.mapv(|z| z * s.g_u.conj()) + a_v.mapv(|z| z * s.g_v.conj());
        let got_h = model.hamiltonian(t).to_dense();
        let got_l = model.jump_operators(t)[0].to_dense();
        assert!(pulse_cascade::linalg::max_abs_diff(&got_h, &h) < 1e-14);
        assert!(pulse_cascade::linalg::max_abs_diff(&got_l, &l) < 1e-14);
        assert!(pulse_cascade::linalg::hermiticity_residual(&got_h) < 1e-12);
        // ⟨1_u, g, 0_v| H |0_u, e, 0_v⟩ = (i/2)√γ g_u
        assert!((got_h[[4, 2]] - 0.5 * I * sg * s.g_u).norm() < 1e-14);
    }
}
