//! Configurable reproductions of the pulse-scattering studies: Rabi
//! oscillations driven by a Fock pulse, lossless transport through an empty
//! cavity, Kerr squeezing, and single- and multi-pass cat formation.
//!
//! Each runner takes an [`ExperimentConfig`] and returns a typed outcome. When
//! the configuration names an output directory the runner also writes CSV
//! data and a `summary.json` holding the scalars that characterize the run.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    fit_cat, min_variance, mode_overlap, reduced_density, variance_scan, wigner, write_variance_csv, CatFit,
    MinVariance, PhaseSpaceGrid, QuadratureMoments, WignerField,
};
use crate::dynamics::{
    integrate, write_state_binary, IntegrateOptions, MasterEquation, NamedObservable, Series, SystemSpec, Trajectory,
    LEAKAGE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::fock::{
    coherent_amplitudes, coherent_ket, embed_sparse, fock_ket, number, CompositeSpace, DensityMatrix, FockWindow,
    COHERENT_CAPTURE, MAX_FOCK_INDEX,
};
use crate::frames::{
    analytic_cat_phase, required_pass_count, required_single_pass_kerr, ModeMatrix, ThreeModeFrame, TwoModeFrame,
};
use crate::linalg::{SparseOp, C64};
use crate::pulses::{cavity_output_mode, gaussian_mode, CouplingSchedule, ModeFunction, TimeGrid, DEFAULT_EPSILON};

/// Schedule samples per integrator step. Four puts every RK4 stage time and
/// every Magnus midpoint on a stored sample.
pub const SCHEDULE_REFINE: usize = 4;

/// Largest `dt · K · N²` accepted before the step is halved; the RK4
/// stability edge on the imaginary axis is near 2.8.
pub const RK4_STABILITY_MARGIN: f64 = 2.0;

/// Kerr strengths scanned by the squeezing study when none are configured.
pub const DEFAULT_KERR_SCAN: [f64; 3] = [0.02, 0.04, 0.08];

/// Fock number and coherent amplitude that `--small` scales inputs down to.
pub const SMALL_FOCK: usize = 5;
pub const SMALL_ALPHA: f64 = 2.0;

/// Minimum prominence of an excited-population maximum counted as a Rabi
/// peak; smaller wiggles are sampling noise.
pub const PEAK_PROMINENCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Rabi,
    EmptyCavity,
    Squeeze,
    CatSingle,
    CatMulti,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rabi => "rabi",
            Self::EmptyCavity => "empty_cavity",
            Self::Squeeze => "squeeze",
            Self::CatSingle => "cat_single",
            Self::CatMulti => "cat_multi",
        }
    }

    fn three_mode(self) -> bool {
        self != Self::Rabi
    }
}

/// Quantum state of the incident pulse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputState {
    Fock {
        n: usize,
    },
    /// Coherent state `|α e^{iφ}⟩`.
    Coherent {
        alpha: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl InputState {
    pub fn mean_photons(&self) -> f64 {
        match *self {
            Self::Fock { n } => n as f64,
            Self::Coherent { alpha, .. } => alpha * alpha,
        }
    }

    pub fn ket(&self, window: FockWindow) -> Result<Vec<C64>> {
        match *self {
            Self::Fock { n } => fock_ket(n, window),
            Self::Coherent { alpha, phase } => coherent_ket(C64::from_polar(alpha, phase), window),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(default)]
    pub offset: usize,
    pub size: usize,
}

impl WindowSpec {
    fn window(self) -> Result<FockWindow> {
        FockWindow::new(self.offset, self.size)
    }
}

impl From<FockWindow> for WindowSpec {
    fn from(w: FockWindow) -> Self {
        Self {
            offset: w.offset(),
            size: w.size(),
        }
    }
}

/// Truncation of the three modes. For the Rabi scenario the middle system is
/// the two-level scatterer and `c` is ignored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Windows {
    pub u: WindowSpec,
    #[serde(default)]
    pub c: Option<WindowSpec>,
    pub v: WindowSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WignerConfig {
    pub extent: f64,
    pub points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub enabled: bool,
    /// Integration horizon of the dt vs dt/2 comparison.
    pub horizon: f64,
    /// Largest accepted entrywise deviation of the final states.
    pub tol: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            horizon: 6.0,
            tol: 1e-5,
        }
    }
}

fn default_t_p() -> f64 {
    4.0
}
fn default_unit() -> f64 {
    1.0
}
fn default_dt() -> f64 {
    1e-2
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_leakage() -> f64 {
    LEAKAGE_THRESHOLD
}
fn default_cumulative_leakage() -> f64 {
    1e-2
}
fn default_record_every() -> usize {
    5
}
fn default_variance_points() -> usize {
    361
}

/// One scenario run. All times are in units of 1/γ₀ where γ₀ = 1 fixes the
/// unit, and all rates in units of γ₀.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Center of the Gaussian pulse.
    #[serde(default = "default_t_p")]
    pub t_p: f64,
    /// Width of the Gaussian pulse.
    #[serde(default = "default_unit")]
    pub tau: f64,
    /// Coupling rate of the scatterer to the waveguide.
    #[serde(default = "default_unit")]
    pub gamma: f64,
    /// Kerr strength. Unset means 0 for rabi and empty_cavity, 0.02 for
    /// squeeze, the single-pass cat condition for cat_single and 0.01 for
    /// cat_multi.
    #[serde(default)]
    pub kerr: Option<f64>,
    /// Extra Kerr strengths for the squeezing variance scan.
    #[serde(default)]
    pub kerr_scan: Option<Vec<f64>>,
    pub input: InputState,
    /// Truncation windows; unset means sized from the input state.
    #[serde(default)]
    pub windows: Option<Windows>,
    /// End of the simulated interval; unset means 12 for rabi and 20 for the
    /// cavity scenarios (the reflected pulse has a long exponential tail).
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Number of passes (cat_multi); unset means the analytic cat condition.
    #[serde(default)]
    pub passes: Option<u64>,
    /// Passes whose states are written out (cat_multi).
    #[serde(default)]
    pub snapshot_passes: Option<Vec<u64>>,
    /// Interval between Wigner snapshots during a single pass (cat_single).
    #[serde(default)]
    pub snapshot_interval: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_leakage")]
    pub leakage_threshold: f64,
    /// Bound on the window-edge population summed over cat_multi passes.
    #[serde(default = "default_cumulative_leakage")]
    pub cumulative_leakage_threshold: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub wigner: Option<WignerConfig>,
    #[serde(default = "default_variance_points")]
    pub variance_points: usize,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// A validation failure tied to a config field (dotted path).
#[derive(Clone, Debug, PartialEq)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

impl FieldError {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field,
            message: message.into(),
        }
    }
}

impl ExperimentConfig {
    /// The parameter set of the corresponding study at full scale.
    pub fn preset(scenario: Scenario) -> Self {
        let input = match scenario {
            Scenario::Rabi => InputState::Fock { n: 20 },
            Scenario::Squeeze => InputState::Coherent { alpha: 4.0, phase: 0.0 },
            _ => InputState::Coherent { alpha: 2.0, phase: 0.0 },
        };
        Self {
            scenario,
            t_p: default_t_p(),
            tau: 1.0,
            gamma: 1.0,
            kerr: None,
            kerr_scan: None,
            input,
            windows: None,
            t_end: None,
            dt: default_dt(),
            passes: None,
            snapshot_passes: None,
            snapshot_interval: None,
            epsilon: DEFAULT_EPSILON,
            leakage_threshold: LEAKAGE_THRESHOLD,
            cumulative_leakage_threshold: default_cumulative_leakage(),
            record_every: default_record_every(),
            wigner: None,
            variance_points: default_variance_points(),
            convergence: ConvergenceConfig::default(),
            output_dir: None,
        }
    }

    /// Desk-scale variant: Fock inputs above 5 become 5, coherent amplitudes
    /// above 2 become 2, and explicit windows are dropped so they are
    /// re-derived from the smaller input.
    pub fn small(mut self) -> Self {
        match &mut self.input {
            InputState::Fock { n } if *n > SMALL_FOCK => {
                *n = SMALL_FOCK;
                self.windows = None;
            }
            InputState::Coherent { alpha, .. } if *alpha > SMALL_ALPHA => {
                *alpha = SMALL_ALPHA;
                self.windows = None;
            }
            _ => {}
        }
        self
    }

    /// Parses and validates a JSON config. Syntax errors and validation
    /// failures both carry the line of the offending text when it exists.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate().map_err(|e| {
            let key = e.field.rsplit('.').next().unwrap_or(e.field);
            let needle = format!("\"{key}\"");
            match text.lines().position(|l| l.contains(&needle)) {
                Some(i) => Error::Config(format!("line {}: `{}` {}", i + 1, e.field, e.message)),
                None => Error::Config(format!("`{}` {}", e.field, e.message)),
            }
        })?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> std::result::Result<(), FieldError> {
        let positive = |field: &'static str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(FieldError::new(field, format!("must be a positive number, got {x}")))
            }
        };
        let non_negative = |field: &'static str, x: f64| {
            if x.is_finite() && x >= 0.0 {
                Ok(())
            } else {
                Err(FieldError::new(field, format!("must be a non-negative rate, got {x}")))
            }
        };
        positive("tau", self.tau)?;
        positive("dt", self.dt)?;
        positive("epsilon", self.epsilon)?;
        positive("leakage_threshold", self.leakage_threshold)?;
        positive("cumulative_leakage_threshold", self.cumulative_leakage_threshold)?;
        non_negative("t_p", self.t_p)?;
        non_negative("gamma", self.gamma)?;
        if let Some(k) = self.kerr {
            non_negative("kerr", k)?;
        }
        for &k in self.kerr_scan.iter().flatten() {
            non_negative("kerr_scan", k)?;
        }
        if let Some(t) = self.t_end {
            positive("t_end", t)?;
            if t <= self.t_p {
                return Err(FieldError::new("t_end", "must lie after the pulse center t_p"));
            }
        }
        if let InputState::Coherent { alpha, phase } = self.input {
            non_negative("input.alpha", alpha)?;
            if !phase.is_finite() {
                return Err(FieldError::new("input.phase", "must be finite"));
            }
        }
        if self.record_every == 0 {
            return Err(FieldError::new("record_every", "must be at least 1"));
        }
        if self.variance_points < 2 {
            return Err(FieldError::new("variance_points", "must be at least 2"));
        }
        if let Some(w) = self.wigner {
            positive("wigner.extent", w.extent)?;
            if w.points < 2 {
                return Err(FieldError::new("wigner.points", "must be at least 2"));
            }
        }
        if let Some(s) = self.snapshot_interval {
            positive("snapshot_interval", s)?;
        }
        if self.convergence.enabled {
            positive("convergence.horizon", self.convergence.horizon)?;
            positive("convergence.tol", self.convergence.tol)?;
        }
        if let Some(w) = self.windows {
            for (field, spec) in [("windows.u", Some(w.u)), ("windows.c", w.c), ("windows.v", Some(w.v))] {
                if let Some(spec) = spec {
                    if spec.size == 0 || spec.offset + spec.size > MAX_FOCK_INDEX + 1 {
                        return Err(FieldError::new(
                            field,
                            "needs 1 ≤ size and offset + size within the Fock limit",
                        ));
                    }
                }
            }
            if self.scenario.three_mode() && (w.u.offset > 0 || w.v.offset > 0 || w.c.is_some_and(|c| c.offset > 0)) {
                return Err(FieldError::new(
                    "windows",
                    "three-mode scenarios mix the modes and need windows starting at vacuum",
                ));
            }
            if let InputState::Fock { n } = self.input {
                if n < w.u.offset || n >= w.u.offset + w.u.size {
                    return Err(FieldError::new(
                        "windows.u",
                        format!("does not contain the input Fock state n={n}"),
                    ));
                }
            }
        }
        match self.scenario {
            Scenario::Rabi => {
                if self.kerr.is_some_and(|k| k != 0.0) {
                    return Err(FieldError::new("kerr", "a two-level scatterer has no Kerr term"));
                }
            }
            Scenario::EmptyCavity if self.kerr.is_some_and(|k| k != 0.0) => {
                return Err(FieldError::new("kerr", "the empty cavity requires K = 0"));
            }
            _ => {}
        }
        if self.scenario != Scenario::CatMulti && self.passes.is_some() {
            return Err(FieldError::new(
                "passes",
                "only the cat_multi scenario takes a pass count",
            ));
        }
        Ok(())
    }

    pub fn resolved_t_end(&self) -> f64 {
        self.t_end.unwrap_or(match self.scenario {
            Scenario::Rabi => 12.0,
            _ => 20.0,
        })
    }

    fn wigner_grid(&self) -> Result<PhaseSpaceGrid> {
        let w = self.wigner.unwrap_or(match self.scenario {
            // ⟨x⟩ = 4√2 for α = 4 sits too close to the edge of [−6, 6]
            Scenario::Squeeze => WignerConfig {
                extent: 9.0,
                points: 181,
            },
            _ => WignerConfig {
                extent: 6.0,
                points: 121,
            },
        });
        PhaseSpaceGrid::new(w.extent, w.points)
    }

    /// Truncation windows actually used, derived from the input when unset.
    pub fn resolved_windows(&self) -> Result<[FockWindow; 3]> {
        if let Some(w) = self.windows {
            let c = match (self.scenario, w.c) {
                (Scenario::Rabi, _) => FockWindow::truncated(2)?,
                (_, Some(c)) => c.window()?,
                (_, None) => FockWindow::truncated(self.default_ancilla_size())?,
            };
            return Ok([w.u.window()?, c, w.v.window()?]);
        }
        let u = match (self.scenario, self.input) {
            (Scenario::Rabi, InputState::Fock { n }) => {
                let reach = n.min(10);
                FockWindow::new(n - reach, reach + 1)?
            }
            (_, InputState::Fock { n }) => FockWindow::truncated(n + 1)?,
            (_, InputState::Coherent { alpha, phase }) => {
                FockWindow::truncated(minimal_coherent_window(C64::from_polar(alpha, phase))? + 1)?
            }
        };
        if self.scenario == Scenario::Rabi {
            let v = FockWindow::truncated((u.top() + 1).min(6))?;
            return Ok([u, FockWindow::truncated(2)?, v]);
        }
        let anc = FockWindow::truncated(self.default_ancilla_size())?;
        Ok([u, anc, anc])
    }

    fn default_ancilla_size(&self) -> usize {
        match self.scenario {
            Scenario::Squeeze => 5,
            // the strong single-pass Kerr drives real population into the ancillas
            Scenario::CatSingle => 4,
            _ => 3,
        }
    }

    fn default_kerr(&self) -> Option<f64> {
        match self.scenario {
            Scenario::Rabi | Scenario::EmptyCavity => Some(0.0),
            Scenario::Squeeze => Some(0.02),
            Scenario::CatSingle => None,
            Scenario::CatMulti => Some(0.01),
        }
    }

    fn build_schedule(&self, dt: f64) -> Result<CouplingSchedule> {
        let grid = TimeGrid::spanning(0.0, self.resolved_t_end(), dt / SCHEDULE_REFINE as f64)?;
        let u = gaussian_mode(self.t_p, self.tau, &grid)?;
        if self.scenario.three_mode() {
            let v = cavity_output_mode(&u, self.gamma, 0.0)?.mode;
            CouplingSchedule::new(u, v, self.epsilon)
        } else {
            CouplingSchedule::identical(u, self.epsilon)
        }
    }

    fn options(&self) -> IntegrateOptions {
        IntegrateOptions {
            leakage_threshold: self.leakage_threshold,
            record_every: self.record_every,
            excitation_bound: match self.input {
                InputState::Fock { n } => Some(n),
                InputState::Coherent { .. } => None,
            },
            ..IntegrateOptions::default()
        }
    }
}

/// Smallest truncated window holding a coherent state to the capture bound.
pub fn minimal_coherent_window(alpha: C64) -> Result<usize> {
    let mut size = (alpha.norm_sqr().ceil() as usize).max(1);
    while size <= MAX_FOCK_INDEX {
        if coherent_amplitudes(alpha, FockWindow::truncated(size)?).1 >= COHERENT_CAPTURE {
            return Ok(size);
        }
        size += 1;
    }
    Err(Error::config(format!(
        "coherent amplitude {alpha} exceeds the Fock limit"
    )))
}

/// Integrator step actually used: `dt` halved until the Kerr spectrum fits
/// the RK4 stability region. `K N²` bounds the Kerr energies, with `N` the
/// largest total photon number the windows hold.
pub fn stable_dt(dt: f64, kerr: f64, windows: &[FockWindow; 3]) -> f64 {
    let n: usize = windows.iter().map(|w| w.top()).sum();
    let scale = kerr.abs() * (n * n) as f64;
    let mut h = dt;
    while h * scale > RK4_STABILITY_MARGIN {
        h /= 2.0;
    }
    h
}

/// Grid, truncation and coupling choices a run actually used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSetup {
    pub t_end: f64,
    pub dt: f64,
    pub schedule_dt: f64,
    pub windows: [WindowSpec; 3],
    pub kerr: f64,
    pub passes: Option<u64>,
}

/// Integration diagnostics shared by all scenarios.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub max_trace_drift: f64,
    pub min_eigenvalue: f64,
    /// Largest population on the edges of each truncation window.
    pub edge_population: Vec<f64>,
    pub unitarity_error: Option<f64>,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    fn of(traj: &Trajectory, mm: Option<&ModeMatrix>) -> Self {
        Self {
            max_trace_drift: traj.max_trace_drift,
            min_eigenvalue: traj.min_eigenvalue,
            edge_population: traj.edge_population.clone(),
            unitarity_error: mm.map(ModeMatrix::unitarity_error),
            warnings: traj.warnings.clone(),
        }
    }
}

/// Everything needed to integrate one pass of a scenario.
struct Prepared {
    model: Box<dyn MasterEquation>,
    mode_matrix: Option<Arc<ModeMatrix>>,
    grid: TimeGrid,
    observables: Vec<NamedObservable>,
    space: CompositeSpace,
}

fn number_observable(space: &CompositeSpace, index: usize, name: &str) -> Result<NamedObservable> {
    let local = number(space.window(index)).to_sparse();
    Ok(NamedObservable::fixed(name, embed_sparse(&local, space, index)?))
}

fn prepare(cfg: &ExperimentConfig, dt: f64, kerr: f64, windows: [FockWindow; 3]) -> Result<Prepared> {
    let schedule = cfg.build_schedule(dt)?;
    let grid = TimeGrid::spanning(0.0, cfg.resolved_t_end(), dt)?;
    if cfg.scenario.three_mode() {
        let frame = ThreeModeFrame::new(cfg.gamma, kerr, schedule, windows)?;
        let space = frame.space().clone();
        let observables = vec![
            number_observable(&space, 0, "n_u")?,
            number_observable(&space, 1, "n_c")?,
            number_observable(&space, 2, "n_v")?,
        ];
        Ok(Prepared {
            mode_matrix: Some(frame.mode_matrix().clone()),
            model: Box::new(frame),
            grid,
            observables,
            space,
        })
    } else {
        let spec = SystemSpec::two_level(cfg.gamma)?;
        let sigma = SparseOp::from_dense(&spec.lowering);
        let excited = sigma.adjoint().matmul(&sigma);
        let frame = TwoModeFrame::identical(spec, schedule, windows[0], windows[2])?;
        let space = frame.space().clone();
        let observables = vec![
            number_observable(&space, 0, "n_u")?,
            NamedObservable::fixed("p_e", embed_sparse(&excited, &space, 1)?),
            number_observable(&space, 2, "n_v")?,
        ];
        Ok(Prepared {
            mode_matrix: None,
            model: Box::new(frame),
            grid,
            observables,
            space,
        })
    }
}

/// Input pulse in mode `u`, scatterer or cavity in its ground state and the
/// remaining mode empty.
fn initial_state(space: &CompositeSpace, u_state: &DensityMatrix) -> Result<DensityMatrix> {
    let rest = (1..3)
        .map(|k| {
            let w = space.window(k);
            DensityMatrix::pure(CompositeSpace::single(w), &fock_ket(w.offset(), w)?)
        })
        .collect::<Result<Vec<_>>>()?;
    DensityMatrix::product(&[u_state.clone(), rest[0].clone(), rest[1].clone()])?.with_space(space.clone())
}

fn input_density(cfg: &ExperimentConfig, window: FockWindow) -> Result<DensityMatrix> {
    DensityMatrix::pure(CompositeSpace::single(window), &cfg.input.ket(window)?)
}

/// Mean photon number of the (truncated) input state.
fn photons(state: &DensityMatrix) -> Result<f64> {
    Ok(QuadratureMoments::of(state)?.ada)
}

fn setup(cfg: &ExperimentConfig, dt: f64, kerr: f64, windows: [FockWindow; 3], passes: Option<u64>) -> ResolvedSetup {
    ResolvedSetup {
        t_end: cfg.resolved_t_end(),
        dt,
        schedule_dt: dt / SCHEDULE_REFINE as f64,
        windows: windows.map(WindowSpec::from),
        kerr,
        passes,
    }
}

fn require(cfg: &ExperimentConfig, scenario: Scenario) -> Result<()> {
    if cfg.scenario != scenario {
        return Err(Error::config(format!(
            "config is for scenario {}, not {}",
            cfg.scenario.name(),
            scenario.name()
        )));
    }
    cfg.validate()
        .map_err(|e| Error::config(format!("`{}` {}", e.field, e.message)))
}

/// Records written files so a manifest can list them.
struct OutputDir {
    root: Option<PathBuf>,
    files: Vec<PathBuf>,
}

impl OutputDir {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        if let Some(dir) = &cfg.output_dir {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            root: cfg.output_dir.clone(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<()> {
        if let Some(root) = &self.root {
            let path = root.join(name);
            f(BufWriter::new(File::create(&path)?))?;
            self.files.push(path);
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |mut w| {
            serde_json::to_writer_pretty(&mut w, value)?;
            use std::io::Write;
            writeln!(w)?;
            Ok(())
        })
    }
}

fn final_value(traj: &Trajectory, name: &str) -> f64 {
    traj.series(name).and_then(|s| s.last()).map_or(f64::NAN, |z| z.re)
}

fn max_value(traj: &Trajectory, name: &str) -> f64 {
    traj.real(name)
        .map_or(f64::NAN, |v| v.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Maxima of `values` whose topographic prominence reaches `prominence`.
pub fn prominent_maxima(values: &[f64], prominence: f64) -> Vec<usize> {
    let n = values.len();
    let mut peaks = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let h = values[i];
        if !(h > values[i - 1] && h >= values[i + 1]) {
            continue;
        }
        let mut left = h;
        // ties count as higher on the left so a plateau pair yields one peak
        for &x in values[..i].iter().rev() {
            if x >= h {
                break;
            }
            left = left.min(x);
        }
        let mut right = h;
        for &x in &values[i + 1..] {
            if x > h {
                break;
            }
            right = right.min(x);
        }
        if h - left.max(right) >= prominence {
            peaks.push(i);
        }
    }
    peaks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RabiSummary {
    pub input_photons: f64,
    pub excited_maxima: usize,
    pub peak_excitation: f64,
    /// Largest drop of the u-mode occupation below the input photon number.
    pub max_u_deficit: f64,
    pub peak_v_occupation: f64,
    pub final_u_occupation: f64,
    pub final_excitation: f64,
    pub diagnostics: Diagnostics,
}

pub struct RabiOutcome {
    pub trajectory: Trajectory,
    pub summary: RabiSummary,
    pub setup: ResolvedSetup,
    pub files: Vec<PathBuf>,
}

/// Two-level scatterer driven by a pulse in the two-mode interaction picture
/// with identical input and output modes.
pub fn run_rabi(cfg: &ExperimentConfig) -> Result<RabiOutcome> {
    require(cfg, Scenario::Rabi)?;
    let windows = cfg.resolved_windows()?;
    let prep = prepare(cfg, cfg.dt, 0.0, windows)?;
    let rho0 = initial_state(&prep.space, &input_density(cfg, windows[0])?)?;
    let traj = integrate(
        prep.model.as_ref(),
        &rho0,
        &prep.grid,
        &prep.observables,
        &cfg.options(),
    )?;

    let n_in = cfg.input.mean_photons();
    let p_e = traj.real("p_e").unwrap_or_default();
    let n_u = traj.real("n_u").unwrap_or_default();
    let summary = RabiSummary {
        input_photons: n_in,
        excited_maxima: prominent_maxima(&p_e, PEAK_PROMINENCE).len(),
        peak_excitation: p_e.iter().copied().fold(0.0, f64::max),
        max_u_deficit: n_u.iter().map(|n| n_in - n).fold(0.0, f64::max),
        peak_v_occupation: max_value(&traj, "n_v"),
        final_u_occupation: final_value(&traj, "n_u"),
        final_excitation: final_value(&traj, "p_e"),
        diagnostics: Diagnostics::of(&traj, None),
    };
    let setup = setup(cfg, cfg.dt, 0.0, windows, None);
    let mut out = OutputDir::new(cfg)?;
    out.write("trajectory.csv", |w| traj.write_csv(w))?;
    out.json("summary.json", &summary)?;
    Ok(RabiOutcome {
        trajectory: traj,
        summary,
        setup,
        files: out.files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmptyCavitySummary {
    pub input_photons: f64,
    pub final_u_occupation: f64,
    pub max_c_occupation: f64,
    pub max_v_occupation: f64,
    /// |⟨analytic output mode | reconstructed output mode⟩|.
    pub output_overlap: f64,
    pub diagnostics: Diagnostics,
}

pub struct EmptyCavityOutcome {
    pub trajectory: Trajectory,
    pub summary: EmptyCavitySummary,
    /// Output mode reconstructed from the mode matrix, normalized.
    pub reconstructed: ModeFunction,
    /// Analytic reflection of the input mode, on the same grid.
    pub analytic: ModeFunction,
    pub setup: ResolvedSetup,
    pub files: Vec<PathBuf>,
}

/// Temporal shape of the field leaving the cavity, read off the mode matrix:
/// `b(t) = √γ ĉ(t) + g_u*(t) â_u(t)` has amplitude `√γ M₂₁ + g_u* M₁₁` on the
/// initially occupied mode.
pub fn reconstructed_output_mode(schedule: &CouplingSchedule, mm: &ModeMatrix, gamma: f64) -> Result<ModeFunction> {
    let samples = mm
        .grid()
        .times()
        .zip(mm.matrices())
        .map(|(t, m)| gamma.sqrt() * m[[1, 0]] + schedule.sample(t).g_u.conj() * m[[0, 0]])
        .collect();
    ModeFunction::normalized(*mm.grid(), samples)
}

/// Pulse reflected by a cavity without Kerr term, in the three-mode picture.
pub fn run_empty_cavity(cfg: &ExperimentConfig) -> Result<EmptyCavityOutcome> {
    require(cfg, Scenario::EmptyCavity)?;
    let windows = cfg.resolved_windows()?;
    let prep = prepare(cfg, cfg.dt, 0.0, windows)?;
    let mm = prep.mode_matrix.clone().expect("three-mode run");
    let input = input_density(cfg, windows[0])?;
    let rho0 = initial_state(&prep.space, &input)?;
    let traj = integrate(
        prep.model.as_ref(),
        &rho0,
        &prep.grid,
        &prep.observables,
        &cfg.options(),
    )?;

    let schedule = cfg.build_schedule(cfg.dt)?;
    let reconstructed = reconstructed_output_mode(&schedule, &mm, cfg.gamma)?;
    let analytic = ModeFunction::normalized(*mm.grid(), mm.grid().times().map(|t| schedule.v().at(t)).collect())?;
    let overlap = mode_overlap(&analytic, &reconstructed)?.norm();

    let summary = EmptyCavitySummary {
        input_photons: photons(&input)?,
        final_u_occupation: final_value(&traj, "n_u"),
        max_c_occupation: max_value(&traj, "n_c"),
        max_v_occupation: max_value(&traj, "n_v"),
        output_overlap: overlap,
        diagnostics: Diagnostics::of(&traj, Some(&mm)),
    };
    let setup = setup(cfg, cfg.dt, 0.0, windows, None);
    let mut out = OutputDir::new(cfg)?;
    out.write("trajectory.csv", |w| traj.write_csv(w))?;
    out.write("mode_matrix.csv", |w| mm.write_csv(w))?;
    out.write("output_mode.csv", |mut w| {
        use std::io::Write;
        writeln!(w, "t,reconstructed_re,reconstructed_im,analytic_re,analytic_im")?;
        for ((t, a), b) in mm.grid().times().zip(reconstructed.samples()).zip(analytic.samples()) {
            writeln!(w, "{t},{},{},{},{}", a.re, a.im, b.re, b.im)?;
        }
        Ok(())
    })?;
    out.json("summary.json", &summary)?;
    Ok(EmptyCavityOutcome {
        trajectory: traj,
        summary,
        reconstructed,
        analytic,
        setup,
        files: out.files,
    })
}

/// One Kerr pass of the three-mode picture from a given u-mode state.
struct KerrPass {
    trajectory: Trajectory,
    u_state: DensityMatrix,
}

fn kerr_pass(prep: &Prepared, u_state: &DensityMatrix, opts: &IntegrateOptions) -> Result<KerrPass> {
    let rho0 = initial_state(&prep.space, u_state)?;
    let trajectory = integrate(prep.model.as_ref(), &rho0, &prep.grid, &prep.observables, opts)?;
    let u_state = reduced_density(&trajectory.final_state, 0)?;
    Ok(KerrPass { trajectory, u_state })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KerrScanEntry {
    pub kerr: f64,
    pub phi_star: f64,
    pub var_star: f64,
    pub final_u_occupation: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqueezeSummary {
    pub kerr: f64,
    pub phi_star: f64,
    pub var_star: f64,
    pub input_photons: f64,
    pub final_u_occupation: f64,
    pub wigner_integral: f64,
    pub wigner_min: f64,
    pub scan: Vec<KerrScanEntry>,
    pub diagnostics: Diagnostics,
}

pub struct SqueezeOutcome {
    pub trajectory: Trajectory,
    pub u_state: DensityMatrix,
    pub min_variance: MinVariance,
    /// Variance against φ for each Kerr strength, the configured one first.
    pub scans: Vec<(f64, Vec<(f64, f64)>)>,
    pub wigner_input: WignerField,
    pub wigner_output: WignerField,
    pub summary: SqueezeSummary,
    pub setup: ResolvedSetup,
    pub files: Vec<PathBuf>,
}

/// Runs `jobs` on at most the available number of threads, keeping order.
fn parallel_map<T: Sync, R: Send>(jobs: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    if workers == 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(workers) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|j| s.spawn(|| f(j))).collect();
            results.extend(handles.into_iter().map(|h| h.join().expect("worker panicked")));
        });
    }
    results
}

/// Coherent pulse reflected by a Kerr cavity: minimum quadrature variance of
/// the output, variance scans for several Kerr strengths and Wigner fields.
pub fn run_squeeze(cfg: &ExperimentConfig) -> Result<SqueezeOutcome> {
    require(cfg, Scenario::Squeeze)?;
    let windows = cfg.resolved_windows()?;
    let kerr = cfg.kerr.or(cfg.default_kerr()).unwrap_or(0.0);
    let mut strengths = vec![kerr];
    for &k in cfg.kerr_scan.as_deref().unwrap_or(&DEFAULT_KERR_SCAN) {
        if !strengths.contains(&k) {
            strengths.push(k);
        }
    }
    let input = input_density(cfg, windows[0])?;
    let opts = cfg.options();
    let passes = parallel_map(&strengths, |&k| -> Result<KerrPass> {
        kerr_pass(
            &prepare(cfg, stable_dt(cfg.dt, k, &windows), k, windows)?,
            &input,
            &opts,
        )
    });
    let mut scan = Vec::new();
    let mut scans = Vec::new();
    let mut main = None;
    for (&k, pass) in strengths.iter().zip(passes) {
        let pass = pass?;
        let mv = min_variance(&pass.u_state)?;
        scans.push((k, variance_scan(&pass.u_state, cfg.variance_points)?));
        scan.push(KerrScanEntry {
            kerr: k,
            phi_star: mv.phi,
            var_star: mv.var,
            final_u_occupation: photons(&pass.u_state)?,
            diagnostics: Diagnostics::of(&pass.trajectory, None),
        });
        if main.is_none() {
            main = Some((pass, mv));
        }
    }
    let (pass, mv) = main.expect("configured Kerr strength runs first");
    let grid = cfg.wigner_grid()?;
    let wigner_input = wigner(&input, grid)?;
    let wigner_output = wigner(&pass.u_state, grid)?;
    let mm = ModeMatrix::three_mode(&cfg.build_schedule(cfg.dt)?, cfg.gamma)?;
    let summary = SqueezeSummary {
        kerr,
        phi_star: mv.phi,
        var_star: mv.var,
        input_photons: photons(&input)?,
        final_u_occupation: photons(&pass.u_state)?,
        wigner_integral: wigner_output.integral(),
        wigner_min: wigner_output.min(),
        scan,
        diagnostics: Diagnostics::of(&pass.trajectory, Some(&mm)),
    };

    let setup = setup(cfg, stable_dt(cfg.dt, kerr, &windows), kerr, windows, None);
    let mut out = OutputDir::new(cfg)?;
    out.write("trajectory.csv", |w| pass.trajectory.write_csv(w))?;
    for (k, s) in &scans {
        out.write(&format!("variance_K{k:.4}.csv"), |w| write_variance_csv(s, w))?;
    }
    out.write("wigner_input.csv", |w| wigner_input.write_csv(w))?;
    out.write("wigner_output.csv", |w| wigner_output.write_csv(w))?;
    out.write("u_state.bin", |w| write_state_binary(&pass.u_state, w))?;
    out.json("summary.json", &summary)?;
    Ok(SqueezeOutcome {
        trajectory: pass.trajectory,
        u_state: pass.u_state,
        min_variance: mv,
        scans,
        wigner_input,
        wigner_output,
        summary,
        setup,
        files: out.files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatSingleSummary {
    pub kerr: f64,
    /// Even–odd phase predicted for this Kerr strength.
    pub predicted_phase: f64,
    pub input_photons: f64,
    pub final_u_occupation: f64,
    /// Fraction of the input photons no longer in the output pulse mode.
    pub u_population_loss: f64,
    pub cat_fidelity: f64,
    pub cat_alpha: [f64; 2],
    pub snapshot_times: Vec<f64>,
    pub diagnostics: Diagnostics,
}

pub struct CatSingleOutcome {
    pub trajectory: Trajectory,
    pub u_state: DensityMatrix,
    pub fit: CatFit,
    /// Reduced u-mode Wigner fields during the pass.
    pub snapshots: Vec<(f64, WignerField)>,
    pub summary: CatSingleSummary,
    pub setup: ResolvedSetup,
    pub files: Vec<PathBuf>,
}

/// A single strong-Kerr pass tuned to the analytic cat condition.
pub fn run_cat_single(cfg: &ExperimentConfig) -> Result<CatSingleOutcome> {
    require(cfg, Scenario::CatSingle)?;
    let windows = cfg.resolved_windows()?;
    let t_end = cfg.resolved_t_end();
    let mm = ModeMatrix::three_mode(&cfg.build_schedule(cfg.dt)?, cfg.gamma)?;
    let kerr = match cfg.kerr {
        Some(k) => k,
        None => required_single_pass_kerr(&mm, t_end),
    };
    let dt = stable_dt(cfg.dt, kerr, &windows);
    let prep = prepare(cfg, dt, kerr, windows)?;
    let interval = cfg.snapshot_interval.unwrap_or(2.0);
    let opts = IntegrateOptions {
        snapshot_every: ((interval / dt).round() as usize).max(1),
        ..cfg.options()
    };
    let input = input_density(cfg, windows[0])?;
    let pass = kerr_pass(&prep, &input, &opts)?;

    let grid = cfg.wigner_grid()?;
    let mut snapshots = vec![(0.0, wigner(&input, grid)?)];
    for (t, rho) in &pass.trajectory.snapshots {
        snapshots.push((*t, wigner(&reduced_density(rho, 0)?, grid)?));
    }
    let fit = fit_cat(&pass.u_state)?;
    let n_in = photons(&input)?;
    let n_out = photons(&pass.u_state)?;
    let summary = CatSingleSummary {
        kerr,
        predicted_phase: analytic_cat_phase(kerr, &mm, t_end),
        input_photons: n_in,
        final_u_occupation: n_out,
        u_population_loss: if n_in > 0.0 { 1.0 - n_out / n_in } else { 0.0 },
        cat_fidelity: fit.fidelity,
        cat_alpha: [fit.alpha.re, fit.alpha.im],
        snapshot_times: snapshots.iter().map(|s| s.0).collect(),
        diagnostics: Diagnostics::of(&pass.trajectory, Some(&mm)),
    };

    let setup = setup(cfg, dt, kerr, windows, None);
    let mut out = OutputDir::new(cfg)?;
    out.write("trajectory.csv", |w| pass.trajectory.write_csv(w))?;
    for (t, field) in &snapshots {
        out.write(&format!("wigner_t{t:07.3}.csv"), |w| field.write_csv(w))?;
    }
    out.write("u_state.bin", |w| write_state_binary(&pass.u_state, w))?;
    out.json("summary.json", &summary)?;
    Ok(CatSingleOutcome {
        trajectory: pass.trajectory,
        u_state: pass.u_state,
        fit,
        snapshots,
        summary,
        setup,
        files: out.files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassDiagnostics {
    pub max_trace_drift: f64,
    pub min_eigenvalue: f64,
    pub edge_population: Vec<f64>,
    pub unitarity_error: f64,
}

/// State of the pulse after one cavity transmission.
#[derive(Clone, Debug)]
pub struct PassResult {
    /// 1-based pass number.
    pub pass: u64,
    pub u_state: DensityMatrix,
    pub series: Vec<Series>,
    pub diagnostics: PassDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatMultiSummary {
    pub kerr: f64,
    pub passes: u64,
    /// Pass count predicted by the analytic cat condition.
    pub predicted_passes: Option<u64>,
    pub phase_per_pass: f64,
    pub input_photons: f64,
    pub final_u_occupation: f64,
    pub cat_fidelity: f64,
    pub cat_alpha: [f64; 2],
    pub wigner_min: f64,
    /// Most negative Wigner value in the disk between the two cat lobes.
    pub wigner_min_between_lobes: f64,
    pub cumulative_leakage: f64,
    pub max_trace_drift: f64,
    pub min_eigenvalue: f64,
    pub unitarity_error: f64,
    pub snapshot_passes: Vec<u64>,
}

pub struct CatMultiOutcome {
    pub passes: Vec<PassResult>,
    pub final_state: DensityMatrix,
    pub fit: CatFit,
    pub wigner_final: WignerField,
    pub summary: CatMultiSummary,
    pub setup: ResolvedSetup,
    pub files: Vec<PathBuf>,
}

/// Smallest Wigner value inside the disk centered on the origin whose
/// radius is half the lobe distance `√2|α|`.
pub fn wigner_min_between_lobes(field: &WignerField, alpha: C64) -> f64 {
    let radius = FRAC_1_SQRT_2 * alpha.norm();
    let mut min = f64::INFINITY;
    for (i, x) in field.x.iter().enumerate() {
        for (j, p) in field.p.iter().enumerate() {
            if x.hypot(*p) <= radius {
                min = min.min(field.values[[i, j]]);
            }
        }
    }
    min
}

/// Default snapshot passes: quarters of the run plus the input and the end.
pub fn default_snapshot_passes(passes: u64) -> Vec<u64> {
    let mut out: Vec<u64> = (0..=4).map(|q| passes * q / 4).collect();
    out.dedup();
    out
}

/// Repeated weak-Kerr passes. Between passes the output pulse is ideally
/// reshaped: the reduced u-mode state is re-embedded with fresh vacuum
/// ancillas and the original pulse shape.
pub fn run_cat_multi(cfg: &ExperimentConfig) -> Result<CatMultiOutcome> {
    require(cfg, Scenario::CatMulti)?;
    let windows = cfg.resolved_windows()?;
    let t_end = cfg.resolved_t_end();
    let kerr = cfg.kerr.or(cfg.default_kerr()).unwrap_or(0.0);
    let dt = stable_dt(cfg.dt, kerr, &windows);
    let prep = prepare(cfg, dt, kerr, windows)?;
    let mm = prep.mode_matrix.clone().expect("three-mode run");
    let predicted = required_pass_count(kerr, &mm, t_end);
    let passes = match (cfg.passes, predicted) {
        (Some(n), _) => n,
        (None, Some(n)) => n,
        (None, None) => {
            return Err(Error::config(
                "no Kerr phase accumulates per pass; configure `passes` explicitly",
            ))
        }
    };
    let snapshot_passes = cfg
        .snapshot_passes
        .clone()
        .unwrap_or_else(|| default_snapshot_passes(passes));
    let grid = cfg.wigner_grid()?;
    let opts = IntegrateOptions {
        record_every: cfg.record_every.max(20),
        ..cfg.options()
    };

    let mut out = OutputDir::new(cfg)?;
    let input = input_density(cfg, windows[0])?;
    let mut state = input.clone();
    let mut results = Vec::with_capacity(passes as usize);
    let mut cumulative = 0.0;
    let snapshot = |out: &mut OutputDir, k: u64, state: &DensityMatrix| -> Result<()> {
        if snapshot_passes.contains(&k) {
            let field = wigner(state, grid)?;
            out.write(&format!("wigner_pass{k:04}.csv"), |w| field.write_csv(w))?;
            out.write(&format!("u_state_pass{k:04}.bin"), |w| write_state_binary(state, w))?;
        }
        Ok(())
    };
    snapshot(&mut out, 0, &state)?;
    for k in 1..=passes {
        let pass = kerr_pass(&prep, &state, &opts)?;
        let diag = PassDiagnostics {
            max_trace_drift: pass.trajectory.max_trace_drift,
            min_eigenvalue: pass.trajectory.min_eigenvalue,
            edge_population: pass.trajectory.edge_population.clone(),
            unitarity_error: mm.unitarity_error(),
        };
        cumulative += diag.edge_population.iter().copied().fold(0.0, f64::max);
        if cumulative > cfg.cumulative_leakage_threshold {
            return Err(Error::Leakage(format!(
                "cumulative window-edge population {cumulative:.3e} after pass {k} exceeds {:.1e} \
                 (last pass edges {:?}); enlarge the truncation windows",
                cfg.cumulative_leakage_threshold, diag.edge_population
            )));
        }
        state = pass.u_state.clone();
        snapshot(&mut out, k, &state)?;
        log::info!("cat pass {k}/{passes}: ⟨n⟩ = {:.6}", photons(&state)?);
        results.push(PassResult {
            pass: k,
            u_state: pass.u_state,
            series: pass.trajectory.series,
            diagnostics: diag,
        });
    }

    let fit = fit_cat(&state)?;
    let wigner_final = wigner(&state, grid)?;
    let fold = |f: fn(&PassDiagnostics) -> f64, init: f64, pick: fn(f64, f64) -> f64| {
        results.iter().map(|r| f(&r.diagnostics)).fold(init, pick)
    };
    let summary = CatMultiSummary {
        kerr,
        passes,
        predicted_passes: predicted,
        phase_per_pass: analytic_cat_phase(kerr, &mm, t_end),
        input_photons: photons(&input)?,
        final_u_occupation: photons(&state)?,
        cat_fidelity: fit.fidelity,
        cat_alpha: [fit.alpha.re, fit.alpha.im],
        wigner_min: wigner_final.min(),
        wigner_min_between_lobes: wigner_min_between_lobes(&wigner_final, fit.alpha),
        cumulative_leakage: cumulative,
        max_trace_drift: fold(|d| d.max_trace_drift, 0.0, f64::max),
        min_eigenvalue: fold(|d| d.min_eigenvalue, f64::INFINITY, f64::min),
        unitarity_error: mm.unitarity_error(),
        snapshot_passes: snapshot_passes.clone(),
    };

    out.write("passes.csv", |mut w| {
        use std::io::Write;
        writeln!(w, "pass,n_u,mean_re,mean_im,purity,max_trace_drift,max_edge_population")?;
        for r in &results {
            let m = QuadratureMoments::of(&r.u_state)?;
            let edge = r.diagnostics.edge_population.iter().copied().fold(0.0, f64::max);
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.pass,
                m.ada,
                m.a.re,
                m.a.im,
                r.u_state.purity(),
                r.diagnostics.max_trace_drift,
                edge
            )?;
        }
        Ok(())
    })?;
    out.write("wigner_final.csv", |w| wigner_final.write_csv(w))?;
    out.json("summary.json", &summary)?;
    Ok(CatMultiOutcome {
        passes: results,
        final_state: state,
        fit,
        wigner_final,
        summary,
        setup: setup(cfg, dt, kerr, windows, Some(passes)),
        files: out.files,
    })
}

/// Result of integrating the same setup with `dt` and `dt/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub horizon: f64,
    pub dt: f64,
    /// Largest entrywise deviation of the final density matrices.
    pub state_delta: f64,
    /// Largest deviation of any recorded observable at the horizon.
    pub observable_delta: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Integrates the scenario's first pass up to the configured horizon with
/// `dt` and `dt/2` and compares the results.
pub fn convergence_check(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()
        .map_err(|e| Error::config(format!("`{}` {}", e.field, e.message)))?;
    let windows = cfg.resolved_windows()?;
    let kerr = match (cfg.kerr.or(cfg.default_kerr()), cfg.scenario) {
        (Some(k), _) => k,
        (None, _) => {
            let mm = ModeMatrix::three_mode(&cfg.build_schedule(cfg.dt)?, cfg.gamma)?;
            required_single_pass_kerr(&mm, cfg.resolved_t_end())
        }
    };
    let horizon = cfg.convergence.horizon.min(cfg.resolved_t_end());
    let input = input_density(cfg, windows[0])?;
    let run = |dt: f64| -> Result<Trajectory> {
        let prep = prepare(cfg, dt, kerr, windows)?;
        let steps = ((horizon / dt).round() as usize).clamp(1, prep.grid.steps());
        let grid = prep.grid.truncated(steps)?;
        let rho0 = initial_state(&prep.space, &input)?;
        let opts = IntegrateOptions {
            record_every: usize::MAX,
            ..cfg.options()
        };
        integrate(prep.model.as_ref(), &rho0, &grid, &prep.observables, &opts)
    };
    let dt = stable_dt(cfg.dt, kerr, &windows);
    let coarse = run(dt)?;
    let fine = run(dt / 2.0)?;
    let state_delta = crate::linalg::max_abs_diff(coarse.final_state.entries(), fine.final_state.entries());
    let observable_delta = coarse
        .series
        .iter()
        .zip(&fine.series)
        .map(|(a, b)| match (a.values.last(), b.values.last()) {
            (Some(x), Some(y)) => (x - y).norm(),
            _ => 0.0,
        })
        .fold(0.0, f64::max);
    Ok(ConvergenceReport {
        horizon: coarse.grid.end(),
        dt,
        state_delta,
        observable_delta,
        tol: cfg.convergence.tol,
        passed: state_delta <= cfg.convergence.tol,
    })
}

/// Type-erased result of any scenario, for callers that dispatch on the
/// config.
pub struct RunOutcome {
    pub scenario: Scenario,
    pub summary: serde_json::Value,
    pub setup: ResolvedSetup,
    pub files: Vec<PathBuf>,
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    fn pack<S: Serialize>(
        scenario: Scenario,
        summary: &S,
        setup: ResolvedSetup,
        files: Vec<PathBuf>,
    ) -> Result<RunOutcome> {
        Ok(RunOutcome {
            scenario,
            summary: serde_json::to_value(summary)?,
            setup,
            files,
        })
    }
    match cfg.scenario {
        Scenario::Rabi => {
            let o = run_rabi(cfg)?;
            pack(cfg.scenario, &o.summary, o.setup, o.files)
        }
        Scenario::EmptyCavity => {
            let o = run_empty_cavity(cfg)?;
            pack(cfg.scenario, &o.summary, o.setup, o.files)
        }
        Scenario::Squeeze => {
            let o = run_squeeze(cfg)?;
            pack(cfg.scenario, &o.summary, o.setup, o.files)
        }
        Scenario::CatSingle => {
            let o = run_cat_single(cfg)?;
            pack(cfg.scenario, &o.summary, o.setup, o.files)
        }
        Scenario::CatMulti => {
            let o = run_cat_multi(cfg)?;
            pack(cfg.scenario, &o.summary, o.setup, o.files)
        }
    }
}

/// Runs independent configurations concurrently. Output directories must
/// differ between configurations.
pub fn run_sweep(configs: &[ExperimentConfig]) -> Result<Vec<Result<RunOutcome>>> {
    let mut dirs: Vec<&PathBuf> = configs.iter().filter_map(|c| c.output_dir.as_ref()).collect();
    let total = dirs.len();
    dirs.sort();
    dirs.dedup();
    if dirs.len() != total {
        return Err(Error::config("sweep configurations share an output directory"));
    }
    Ok(parallel_map(configs, run))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(scenario: Scenario) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(scenario);
        cfg.dt = 2e-2;
        cfg.convergence.enabled = false;
        cfg
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for s in [
            Scenario::Rabi,
            Scenario::EmptyCavity,
            Scenario::Squeeze,
            Scenario::CatSingle,
            Scenario::CatMulti,
        ] {
            let cfg = ExperimentConfig::preset(s);
            cfg.validate().unwrap();
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            assert_eq!(ExperimentConfig::from_json_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn validation_messages_point_at_lines() {
        let text = "{\n  \"scenario\": \"squeeze\",\n  \"input\": {\"kind\": \"coherent\", \"alpha\": 2.0},\n  \"gamma\": -1.0\n}";
        let err = ExperimentConfig::from_json_str(text).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("gamma"), "{err}");

        let text = "{\n  \"scenario\": \"rabi\",\n  \"input\": {\"kind\": \"fock\", \"n\": 3},\n  \"bogus\": 1\n}";
        let err = ExperimentConfig::from_json_str(text).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");

        let text = "{\"scenario\": \"squeeze\", \"input\": {\"kind\": \"fock\", \"n\": 3}, \"passes\": 4}";
        assert!(ExperimentConfig::from_json_str(text).is_err());
    }

    #[test]
    fn small_scales_inputs_down() {
        let rabi = ExperimentConfig::preset(Scenario::Rabi).small();
        assert_eq!(rabi.input, InputState::Fock { n: 5 });
        let sq = ExperimentConfig::preset(Scenario::Squeeze).small();
        assert_eq!(sq.input, InputState::Coherent { alpha: 2.0, phase: 0.0 });
        let tiny = ExperimentConfig {
            input: InputState::Fock { n: 2 },
            ..ExperimentConfig::preset(Scenario::Rabi)
        };
        assert_eq!(tiny.clone().small().input, tiny.input);
    }

    #[test]
    fn automatic_windows() {
        let rabi = ExperimentConfig::preset(Scenario::Rabi);
        let [u, s, v] = rabi.resolved_windows().unwrap();
        assert_eq!((u.offset(), u.size(), s.size(), v.size()), (10, 11, 2, 6));
        let sq = ExperimentConfig::preset(Scenario::Squeeze);
        let [u, c, v] = sq.resolved_windows().unwrap();
        assert_eq!((u.size(), c.size(), v.size()), (40, 5, 5));
        assert_eq!(minimal_coherent_window(C64::new(4.0, 0.0)).unwrap(), 39);
    }

    #[test]
    fn prominence_filters_wiggles() {
        let xs: Vec<f64> = (0..400)
            .map(|i| (i as f64 * 0.05).sin() + 1e-3 * (i as f64 * 3.0).sin())
            .collect();
        assert_eq!(prominent_maxima(&xs, 0.02).len(), 3);
        assert!(prominent_maxima(&[0.0, 1.0, 0.99, 1.0, 0.0], 0.02).len() == 1);
    }

    #[test]
    fn vacuum_rabi_stays_dark() {
        let cfg = ExperimentConfig {
            input: InputState::Fock { n: 0 },
            ..quick(Scenario::Rabi)
        };
        let out = run_rabi(&cfg).unwrap();
        for name in ["n_u", "p_e", "n_v"] {
            let max = out
                .trajectory
                .real(name)
                .unwrap()
                .into_iter()
                .map(f64::abs)
                .fold(0.0, f64::max);
            assert!(max < 1e-12, "{name}: {max}");
        }
        assert_eq!(out.summary.excited_maxima, 0);
    }

    #[test]
    fn cat_multi_without_passes_returns_input() {
        let cfg = ExperimentConfig {
            passes: Some(0),
            ..quick(Scenario::CatMulti)
        };
        let out = run_cat_multi(&cfg).unwrap();
        assert!(out.passes.is_empty());
        let win = cfg.resolved_windows().unwrap()[0];
        let input = input_density(&cfg, win).unwrap();
        assert!(crate::linalg::max_abs_diff(out.final_state.entries(), input.entries()) < 1e-15);
    }

    #[test]
    fn outputs_land_in_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            input: InputState::Fock { n: 1 },
            t_end: Some(8.0),
            output_dir: Some(dir.path().to_path_buf()),
            ..quick(Scenario::Rabi)
        };
        let out = run(&cfg).unwrap();
        assert!(out.files.iter().all(|f| f.exists()));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["input_photons"], 1.0);
    }
}
