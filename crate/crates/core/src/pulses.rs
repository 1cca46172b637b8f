//! Pulse mode functions and the virtual-cavity couplings that emit or absorb
//! them.
//!
//! All times are in units of 1/γ. Cumulative integrals use the trapezoid rule
//! on the uniform grid, and mode functions are normalized under the same rule
//! so the cumulative weight ends at exactly one.

use std::io::{BufRead, Write};

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::linalg::{C64, ZERO};

/// Default floor below which the emptied/unfilled cavity couplings are zeroed.
pub const DEFAULT_EPSILON: f64 = 1e-10;

/// Largest untransmitted tail tolerated by [`cavity_output_mode`].
pub const OUTPUT_TAIL_TOL: f64 = 1e-4;

/// Tolerance on the discrete norm of a [`ModeFunction`].
pub const NORM_TOL: f64 = 1e-6;

/// Uniform grid `t0, t0 + dt, …, t0 + steps·dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    steps: usize,
}

/// Position of a time on a grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GridPoint {
    /// Coincides with sample `i` (to within 1e-6 of a step).
    Exact(usize),
    /// Between samples `i` and `i + 1`, at fraction `f ∈ (0, 1)`.
    Between(usize, f64),
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::config(format!("invalid time step {dt}")));
        }
        if steps < 2 {
            return Err(Error::config("a time grid needs at least two steps"));
        }
        Ok(Self { t0, dt, steps })
    }

    /// Grid from `t0` to `t_end` with step close to `dt` (rounded so that the
    /// end point is hit exactly).
    pub fn spanning(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end > t0) {
            return Err(Error::config("grid end must follow its start"));
        }
        let steps = ((t_end - t0) / dt).round().max(1.0) as usize;
        Self::new(t0, (t_end - t0) / steps as f64, steps)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of samples (`steps + 1`).
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|i| self.time(i))
    }

    /// Grid with `factor` times as many steps over the same span.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            t0: self.t0,
            dt: self.dt / factor as f64,
            steps: self.steps * factor,
        }
    }

    /// Grid with the same step truncated to the first `steps` steps.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        Self::new(self.t0, self.dt, steps.min(self.steps))
    }

    /// Sub-grid starting at sample `i`.
    pub fn starting_at(&self, i: usize) -> Result<Self> {
        Self::new(self.time(i), self.dt, self.steps - i)
    }

    pub fn contains(&self, t: f64) -> bool {
        let tol = 1e-6 * self.dt;
        t >= self.t0 - tol && t <= self.end() + tol
    }

    pub fn locate(&self, t: f64) -> Option<GridPoint> {
        if !self.contains(t) {
            return None;
        }
        let x = (t - self.t0) / self.dt;
        let nearest = x.round();
        if (x - nearest).abs() < 1e-6 {
            return Some(GridPoint::Exact((nearest.max(0.0) as usize).min(self.steps)));
        }
        let i = (x.floor() as usize).min(self.steps - 1);
        Some(GridPoint::Between(i, x - i as f64))
    }
}

/// Sampled value lookup on a grid with linear interpolation between samples.
pub(crate) fn sample_complex(grid: &TimeGrid, values: &[C64], t: f64) -> C64 {
    match grid.locate(t) {
        Some(GridPoint::Exact(i)) => values[i],
        Some(GridPoint::Between(i, f)) => values[i] * (1.0 - f) + values[i + 1] * f,
        None => ZERO,
    }
}

pub(crate) fn sample_real(grid: &TimeGrid, values: &[f64], t: f64) -> f64 {
    match grid.locate(t) {
        Some(GridPoint::Exact(i)) => values[i],
        Some(GridPoint::Between(i, f)) => values[i] * (1.0 - f) + values[i + 1] * f,
        None if t < grid.t0() => values[0],
        None => values[values.len() - 1],
    }
}

/// Cumulative trapezoid integral starting at zero.
pub fn cumulative_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut acc = 0.0;
    std::iter::once(0.0)
        .chain(values.windows(2).map(|w| {
            acc += 0.5 * dt * (w[0] + w[1]);
            acc
        }))
        .collect()
}

pub fn cumulative_trapezoid_complex(values: &[C64], dt: f64) -> Vec<C64> {
    let mut acc = ZERO;
    std::iter::once(ZERO)
        .chain(values.windows(2).map(|w| {
            acc += (w[0] + w[1]) * (0.5 * dt);
            acc
        }))
        .collect()
}

/// Sampled complex pulse envelope with unit discrete L² norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeFunction {
    grid: TimeGrid,
    samples: Vec<C64>,
}

impl ModeFunction {
    /// Validated constructor: samples must be finite and normalized.
    pub fn new(grid: TimeGrid, samples: Vec<C64>) -> Result<Self> {
        let mode = Self::unchecked(grid, samples)?;
        let norm = mode.norm_sqr();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::config(format!("mode function norm {norm} is not 1")));
        }
        Ok(mode)
    }

    /// Rescales `samples` to unit discrete norm.
    pub fn normalized(grid: TimeGrid, samples: Vec<C64>) -> Result<Self> {
        let mut mode = Self::unchecked(grid, samples)?;
        let norm = mode.norm_sqr();
        if !(norm > 0.0) {
            return Err(Error::config("cannot normalize a vanishing mode function"));
        }
        let s = norm.sqrt();
        mode.samples.iter_mut().for_each(|z| *z /= s);
        Ok(mode)
    }

    fn unchecked(grid: TimeGrid, samples: Vec<C64>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(Error::Dimension {
                expected: grid.len(),
                found: samples.len(),
            });
        }
        if samples.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::config("mode function samples must be finite"));
        }
        Ok(Self { grid, samples })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn samples(&self) -> &[C64] {
        &self.samples
    }

    pub fn intensity(&self) -> Vec<f64> {
        self.samples.iter().map(|z| z.norm_sqr()).collect()
    }

    /// Trapezoid ∫|u|².
    pub fn norm_sqr(&self) -> f64 {
        *cumulative_trapezoid(&self.intensity(), self.grid.dt()).last().unwrap()
    }

    /// Cumulative weight ∫₀ᵗ|u|² at every sample.
    pub fn cumulative_weight(&self) -> Vec<f64> {
        cumulative_trapezoid(&self.intensity(), self.grid.dt())
    }

    pub fn at(&self, t: f64) -> C64 {
        sample_complex(&self.grid, &self.samples, t)
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self {
            grid: self.grid,
            samples: self.samples.iter().map(|z| z * c).collect(),
        }
    }

    /// Two-column CSV: `time,re,im`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "time,re,im")?;
        for (t, z) in self.grid.times().zip(&self.samples) {
            writeln!(out, "{t:.12e},{:.17e},{:.17e}", z.re, z.im)?;
        }
        Ok(())
    }

    /// Reads the [`write_csv`](Self::write_csv) layout; the time column must
    /// be uniform. The samples are renormalized.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("time")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!("line {}: expected 3 columns", lineno + 1)));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            times.push(parse(fields[0])?);
            samples.push(C64::new(parse(fields[1])?, parse(fields[2])?));
        }
        if times.len() < 3 {
            return Err(Error::Parse("mode function needs at least 3 samples".into()));
        }
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        for (i, t) in times.iter().enumerate() {
            if (t - (times[0] + i as f64 * dt)).abs() > 1e-6 * dt.abs().max(1e-12) {
                return Err(Error::Parse(format!("non-uniform time column at row {}", i + 1)));
            }
        }
        let grid = TimeGrid::new(times[0], dt, times.len() - 1)?;
        Self::normalized(grid, samples)
    }
}

/// Normalized Gaussian `exp(−(t−t_p)²/2τ²)/(√τ π^{1/4})`, renormalized on
/// the grid. The grid must cover `[t_p − 4τ, t_p + 4τ]`.
pub fn gaussian_mode(t_p: f64, tau: f64, grid: &TimeGrid) -> Result<ModeFunction> {
    if !(tau > 0.0) {
        return Err(Error::config("pulse width must be positive"));
    }
    let tol = 1e-9 * tau;
    if grid.t0() > t_p - 4.0 * tau + tol || grid.end() < t_p + 4.0 * tau - tol {
        // |u|² is a normal density with σ = τ/√2
        let captured = 0.5 * (erf((grid.end() - t_p) / tau) - erf((grid.t0() - t_p) / tau));
        return Err(Error::Truncation {
            what: "Gaussian pulse on the time grid".into(),
            captured,
            required: 0.5 * (erf(4.0) - erf(-4.0)),
        });
    }
    let peak = 1.0 / (tau.sqrt() * std::f64::consts::PI.powf(0.25));
    let samples = grid
        .times()
        .map(|t| C64::new(peak * (-(t - t_p).powi(2) / (2.0 * tau * tau)).exp(), 0.0))
        .collect();
    ModeFunction::normalized(*grid, samples)
}

/// Closed-form θ(t) for the normalized Gaussian with the integral taken from 0.
pub fn gaussian_theta(t: f64, t_p: f64, tau: f64) -> f64 {
    let s2 = 0.5 * (erf((t - t_p) / tau) + erf(t_p / tau));
    s2.clamp(0.0, 1.0).sqrt().asin()
}

/// Out-coupling of the upstream virtual cavity releasing `u`.
pub fn coupling_gu(u: &ModeFunction, epsilon: f64) -> Vec<C64> {
    u.cumulative_weight()
        .iter()
        .zip(u.samples())
        .map(|(&f, &z)| {
            let remaining = 1.0 - f;
            if remaining < epsilon {
                ZERO
            } else {
                z.conj() / remaining.sqrt()
            }
        })
        .collect()
}

/// In-coupling of the downstream virtual cavity absorbing `v`.
pub fn coupling_gv(v: &ModeFunction, epsilon: f64) -> Vec<C64> {
    v.cumulative_weight()
        .iter()
        .zip(v.samples())
        .map(|(&f, &z)| if f < epsilon { ZERO } else { -z.conj() / f.sqrt() })
        .collect()
}

/// θ with sin²θ equal to the cumulative weight of `u`, clamped to [0, π/2].
pub fn theta_schedule(u: &ModeFunction) -> Vec<f64> {
    u.cumulative_weight()
        .iter()
        .map(|&f| f.clamp(0.0, 1.0).sqrt().asin())
        .collect()
}

/// Reflection coefficient of a lossless one-sided cavity.
pub fn cavity_reflection(omega: f64, gamma: f64, omega_c: f64) -> C64 {
    let d = C64::new(0.0, omega - omega_c);
    (d + gamma / 2.0) / (d - gamma / 2.0)
}

/// Output pulse after reflection on an empty cavity.
#[derive(Clone, Debug)]
pub struct CavityOutput {
    pub mode: ModeFunction,
    /// Weight of the filtered pulse inside the grid before renormalization.
    pub captured: f64,
    /// Total weight of the filtered pulse over the zero-padded window
    /// (unity up to rounding: the filter is all-pass).
    pub filtered_norm: f64,
}

/// Filters `u` by the empty-cavity reflection `r(ω)` in the frequency domain.
///
/// Frequencies follow `u(ω) = ∫u(t)e^{iωt}dt`, for which `r` is causal (a
/// delay). The transform is zero-padded so that the delayed tail does not
/// wrap around.
pub fn cavity_output_mode(u: &ModeFunction, gamma: f64, omega_c: f64) -> Result<CavityOutput> {
    if !(gamma >= 0.0) {
        return Err(Error::config("cavity linewidth must be non-negative"));
    }
    let n = u.samples().len();
    let dt = u.grid().dt();
    let padded = (8 * n).next_power_of_two();
    let mut buf: Vec<C64> = u.samples().to_vec();
    buf.resize(padded, ZERO);

    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(padded).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let signed = if k <= padded / 2 {
            k as f64
        } else {
            k as f64 - padded as f64
        };
        // forward FFT uses e^{-iω_k t}: physical frequency is −ω_k
        let omega = -2.0 * std::f64::consts::PI * signed / (padded as f64 * dt);
        let r = if gamma.is_infinite() {
            C64::new(-1.0, 0.0)
        } else {
            cavity_reflection(omega, gamma, omega_c)
        };
        *z *= r;
    }
    planner.plan_fft_inverse(padded).process(&mut buf);
    let scale = 1.0 / padded as f64;
    buf.iter_mut().for_each(|z| *z *= scale);

    let filtered_norm = buf.iter().map(|z| z.norm_sqr()).sum::<f64>() * dt;
    let inside = ModeFunction::unchecked(*u.grid(), buf[..n].to_vec())?;
    let captured = inside.norm_sqr();
    if 1.0 - captured > OUTPUT_TAIL_TOL {
        return Err(Error::Truncation {
            what: "cavity output pulse on the time grid".into(),
            captured,
            required: 1.0 - OUTPUT_TAIL_TOL,
        });
    }
    Ok(CavityOutput {
        mode: ModeFunction::normalized(*u.grid(), inside.samples)?,
        captured,
        filtered_norm,
    })
}

/// Precomputed virtual-cavity couplings for an input mode `u` and output
/// mode `v` on a common grid.
#[derive(Clone, Debug)]
pub struct CouplingSchedule {
    grid: TimeGrid,
    u: ModeFunction,
    v: ModeFunction,
    g_u: Vec<C64>,
    g_v: Vec<C64>,
    theta: Vec<f64>,
    lambda: Vec<C64>,
    epsilon: f64,
    identical: bool,
}

/// All schedule quantities at one instant.
#[derive(Clone, Copy, Debug)]
pub struct ScheduleSample {
    pub t: f64,
    pub u: C64,
    pub v: C64,
    pub g_u: C64,
    pub g_v: C64,
    pub theta: f64,
    pub lambda: C64,
}

impl CouplingSchedule {
    pub fn new(u: ModeFunction, v: ModeFunction, epsilon: f64) -> Result<Self> {
        if u.grid() != v.grid() {
            return Err(Error::config("input and output modes must share a grid"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::config("regularization floor must be positive"));
        }
        let identical = u == v;
        let grid = *u.grid();
        let g_u = coupling_gu(&u, epsilon);
        let g_v = coupling_gv(&v, epsilon);
        let theta = theta_schedule(&u);
        let integrand: Vec<C64> = g_u.iter().zip(&g_v).map(|(a, b)| 0.5 * a * b.conj()).collect();
        let lambda = cumulative_trapezoid_complex(&integrand, grid.dt());
        Ok(Self {
            grid,
            u,
            v,
            g_u,
            g_v,
            theta,
            lambda,
            epsilon,
            identical,
        })
    }

    /// Identical input and output modes.
    pub fn identical(u: ModeFunction, epsilon: f64) -> Result<Self> {
        Self::new(u.clone(), u, epsilon)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn u(&self) -> &ModeFunction {
        &self.u
    }

    pub fn v(&self) -> &ModeFunction {
        &self.v
    }

    pub fn g_u(&self) -> &[C64] {
        &self.g_u
    }

    pub fn g_v(&self) -> &[C64] {
        &self.g_v
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn lambda(&self) -> &[C64] {
        &self.lambda
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn is_identical(&self) -> bool {
        self.identical
    }

    pub fn covers(&self, t: f64) -> bool {
        self.grid.contains(t)
    }

    pub fn sample(&self, t: f64) -> ScheduleSample {
        ScheduleSample {
            t,
            u: self.u.at(t),
            v: self.v.at(t),
            g_u: sample_complex(&self.grid, &self.g_u, t),
            g_v: sample_complex(&self.grid, &self.g_v, t),
            theta: sample_real(&self.grid, &self.theta, t),
            lambda: sample_complex(&self.grid, &self.lambda, t),
        }
    }

    /// Index of the first sample where both couplings are past the floor of
    /// the output cavity (cumulative output weight ≥ ε).
    pub fn first_filled_index(&self) -> usize {
        self.v
            .cumulative_weight()
            .iter()
            .position(|&f| f >= self.epsilon)
            .unwrap_or(self.grid.steps())
    }
}
