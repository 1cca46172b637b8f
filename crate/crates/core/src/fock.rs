//! Truncated Fock-space operator algebra.
//!
//! Composite spaces are ordered with the leftmost subsystem as the slowest
//! Kronecker index. The cascaded models use the order (u-mode, scatterer,
//! v-mode).

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{self, SparseOp, C64, ONE, ZERO};

/// Upper bound on `offset + size` for any window.
pub const MAX_FOCK_INDEX: usize = 4096;

/// Required captured Fock weight for a truncated coherent state.
pub const COHERENT_CAPTURE: f64 = 1.0 - 1e-6;

/// Contiguous block of retained Fock states `offset .. offset + size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FockWindow {
    offset: usize,
    size: usize,
}

impl FockWindow {
    pub fn new(offset: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("Fock window size must be at least 1"));
        }
        if offset + size > MAX_FOCK_INDEX {
            return Err(Error::config(format!(
                "Fock window {offset}+{size} exceeds the maximum index {MAX_FOCK_INDEX}"
            )));
        }
        Ok(Self { offset, size })
    }

    /// Ordinary truncation `0 .. size`.
    pub fn truncated(size: usize) -> Result<Self> {
        Self::new(0, size)
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Highest retained Fock number.
    pub fn top(&self) -> usize {
        self.offset + self.size - 1
    }

    pub fn contains(&self, n: usize) -> bool {
        n >= self.offset && n <= self.top()
    }

    /// Fock number of local basis index `k`.
    pub fn number(&self, k: usize) -> usize {
        self.offset + k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsystemKind {
    /// Bosonic mode whose window is a Fock truncation (monitored for leakage).
    Mode,
    /// Bare scatterer subsystem; the window is just its dimension.
    Scatterer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsystem {
    pub window: FockWindow,
    pub kind: SubsystemKind,
}

/// Tensor-product space of truncated subsystems.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeSpace {
    subsystems: Vec<Subsystem>,
}

impl CompositeSpace {
    pub fn new(subsystems: Vec<Subsystem>) -> Result<Self> {
        if subsystems.is_empty() {
            return Err(Error::config("composite space needs at least one subsystem"));
        }
        let dim = subsystems
            .iter()
            .try_fold(1usize, |acc, s| acc.checked_mul(s.window.size()));
        if dim.is_none() {
            return Err(Error::config("composite dimension overflows"));
        }
        Ok(Self { subsystems })
    }

    pub fn single(window: FockWindow) -> Self {
        Self {
            subsystems: vec![Subsystem {
                window,
                kind: SubsystemKind::Mode,
            }],
        }
    }

    /// The standard cascaded layout: u-mode, scatterer of dimension
    /// `scatterer_dim`, v-mode.
    pub fn cascaded(u: FockWindow, scatterer_dim: usize, v: FockWindow) -> Result<Self> {
        Self::new(vec![
            Subsystem {
                window: u,
                kind: SubsystemKind::Mode,
            },
            Subsystem {
                window: FockWindow::truncated(scatterer_dim)?,
                kind: SubsystemKind::Scatterer,
            },
            Subsystem {
                window: v,
                kind: SubsystemKind::Mode,
            },
        ])
    }

    /// Three bosonic modes (u, c, v) as used by the three-mode frame.
    pub fn three_modes(u: FockWindow, c: FockWindow, v: FockWindow) -> Result<Self> {
        Self::new(
            [u, c, v]
                .into_iter()
                .map(|window| Subsystem {
                    window,
                    kind: SubsystemKind::Mode,
                })
                .collect(),
        )
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn window(&self, index: usize) -> FockWindow {
        self.subsystems[index].window
    }

    pub fn dim(&self) -> usize {
        self.subsystems.iter().map(|s| s.window.size()).product()
    }

    /// Index stride of subsystem `index` in the flattened basis.
    pub fn stride(&self, index: usize) -> usize {
        self.subsystems[index + 1..].iter().map(|s| s.window.size()).product()
    }

    /// Local basis index of subsystem `index` for flattened index `global`.
    pub fn local_index(&self, global: usize, index: usize) -> usize {
        (global / self.stride(index)) % self.window(index).size()
    }

    /// Flattened index from Fock numbers (one per subsystem).
    pub fn index_of(&self, numbers: &[usize]) -> Result<usize> {
        if numbers.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                found: numbers.len(),
            });
        }
        let mut idx = 0;
        for (s, &n) in self.subsystems.iter().zip(numbers) {
            if !s.window.contains(n) {
                return Err(Error::config(format!(
                    "Fock number {n} outside window {}..={}",
                    s.window.offset(),
                    s.window.top()
                )));
            }
            idx = idx * s.window.size() + (n - s.window.offset());
        }
        Ok(idx)
    }
}

/// Dense operator on a composite space.
#[derive(Clone, Debug)]
pub struct OperatorMatrix {
    space: CompositeSpace,
    entries: Array2<C64>,
    acts_on: BTreeSet<usize>,
}

impl OperatorMatrix {
    pub fn new(space: CompositeSpace, entries: Array2<C64>, acts_on: BTreeSet<usize>) -> Result<Self> {
        let dim = space.dim();
        if entries.nrows() != dim || entries.ncols() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: entries.nrows().max(entries.ncols()),
            });
        }
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::config("operator entries must be finite"));
        }
        if let Some(&bad) = acts_on.iter().find(|&&k| k >= space.len()) {
            return Err(Error::config(format!("subsystem index {bad} out of range")));
        }
        Ok(Self {
            space,
            entries,
            acts_on,
        })
    }

    /// Operator acting on every subsystem.
    pub fn full(space: CompositeSpace, entries: Array2<C64>) -> Result<Self> {
        let acts_on = (0..space.len()).collect();
        Self::new(space, entries, acts_on)
    }

    pub fn identity(space: &CompositeSpace) -> Self {
        Self {
            entries: linalg::identity(space.dim()),
            space: space.clone(),
            acts_on: BTreeSet::new(),
        }
    }

    pub fn zeros(space: &CompositeSpace) -> Self {
        let d = space.dim();
        Self {
            entries: Array2::zeros((d, d)),
            space: space.clone(),
            acts_on: BTreeSet::new(),
        }
    }

    pub fn space(&self) -> &CompositeSpace {
        &self.space
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<C64> {
        self.entries
    }

    pub fn acts_on(&self) -> &BTreeSet<usize> {
        &self.acts_on
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dagger(&self) -> Self {
        Self {
            space: self.space.clone(),
            entries: linalg::dagger(&self.entries),
            acts_on: self.acts_on.clone(),
        }
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self {
            space: self.space.clone(),
            entries: self.entries.mapv(|z| z * c),
            acts_on: self.acts_on.clone(),
        }
    }

    pub fn dot(&self, other: &Self) -> Self {
        assert_eq!(self.space, other.space, "operators on different spaces");
        Self {
            space: self.space.clone(),
            entries: self.entries.dot(&other.entries),
            acts_on: self.acts_on.union(&other.acts_on).copied().collect(),
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        assert_eq!(self.space, other.space, "operators on different spaces");
        Self {
            space: self.space.clone(),
            entries: &self.entries + &other.entries,
            acts_on: self.acts_on.union(&other.acts_on).copied().collect(),
        }
    }

    pub fn to_sparse(&self) -> SparseOp {
        SparseOp::from_dense(&self.entries)
    }

    pub fn from_sparse(space: &CompositeSpace, op: &SparseOp, acts_on: BTreeSet<usize>) -> Self {
        assert_eq!(space.dim(), op.dim());
        Self {
            space: space.clone(),
            entries: op.to_dense(),
            acts_on,
        }
    }

    pub fn hermiticity_residual(&self) -> f64 {
        linalg::hermiticity_residual(&self.entries)
    }
}

/// Ladder-operator matrix in the window basis: `⟨n−1|â|n⟩ = √n`.
pub fn annihilation_matrix(window: FockWindow) -> Array2<C64> {
    let d = window.size();
    let mut m = Array2::zeros((d, d));
    for k in 1..d {
        m[[k - 1, k]] = C64::new((window.number(k) as f64).sqrt(), 0.0);
    }
    m
}

pub fn annihilation(window: FockWindow) -> OperatorMatrix {
    OperatorMatrix {
        space: CompositeSpace::single(window),
        entries: annihilation_matrix(window),
        acts_on: BTreeSet::from([0]),
    }
}

pub fn creation(window: FockWindow) -> OperatorMatrix {
    annihilation(window).dagger()
}

/// Diagonal number operator `offset .. offset + size − 1`.
pub fn number(window: FockWindow) -> OperatorMatrix {
    let d = window.size();
    let mut m = Array2::zeros((d, d));
    for k in 0..d {
        m[[k, k]] = C64::new(window.number(k) as f64, 0.0);
    }
    OperatorMatrix {
        space: CompositeSpace::single(window),
        entries: m,
        acts_on: BTreeSet::from([0]),
    }
}

/// Tensor `op` into `target` at subsystem `index`, identity elsewhere.
pub fn embed(op: &OperatorMatrix, target: &CompositeSpace, index: usize) -> Result<OperatorMatrix> {
    let entries = embed_matrix(op.entries(), target, index)?;
    Ok(OperatorMatrix {
        space: target.clone(),
        entries,
        acts_on: BTreeSet::from([index]),
    })
}

pub(crate) fn embed_matrix(local: &Array2<C64>, target: &CompositeSpace, index: usize) -> Result<Array2<C64>> {
    Ok(embed_sparse(&SparseOp::from_dense(local), target, index)?.to_dense())
}

/// Sparse embedding; the building block for all composite operators.
pub fn embed_sparse(local: &SparseOp, target: &CompositeSpace, index: usize) -> Result<SparseOp> {
    if index >= target.len() {
        return Err(Error::config(format!(
            "subsystem index {index} out of range for a {}-subsystem space",
            target.len()
        )));
    }
    let expected = target.window(index).size();
    if local.dim() != expected {
        return Err(Error::Dimension {
            expected,
            found: local.dim(),
        });
    }
    let left = SparseOp::identity(target.subsystems()[..index].iter().map(|s| s.window.size()).product());
    let right = SparseOp::identity(target.stride(index));
    Ok(left.kron(local).kron(&right))
}

/// Sparse embedded annihilation operator of subsystem `index`.
pub fn lowering(space: &CompositeSpace, index: usize) -> SparseOp {
    let local = SparseOp::from_dense(&annihilation_matrix(space.window(index)));
    embed_sparse(&local, space, index).expect("index within space")
}

/// Truncated coherent-state amplitudes on `window` (before renormalization)
/// and the captured Fock weight.
pub fn coherent_amplitudes(alpha: C64, window: FockWindow) -> (Vec<C64>, f64) {
    let mag2 = alpha.norm_sqr();
    let amps: Vec<C64> = (0..window.size())
        .map(|k| {
            let n = window.number(k);
            if alpha == ZERO {
                return if n == 0 { ONE } else { ZERO };
            }
            let log_mag = -0.5 * mag2 + n as f64 * alpha.norm().ln() - 0.5 * ln_gamma(n as f64 + 1.0);
            C64::from_polar(log_mag.exp(), n as f64 * alpha.arg())
        })
        .collect();
    let captured = amps.iter().map(|a| a.norm_sqr()).sum();
    (amps, captured)
}

/// Normalized coherent state vector on `window`; errors when the window
/// captures less than [`COHERENT_CAPTURE`] of the Fock weight.
pub fn coherent_ket(alpha: C64, window: FockWindow) -> Result<Vec<C64>> {
    let (amps, captured) = coherent_amplitudes(alpha, window);
    if captured < COHERENT_CAPTURE {
        return Err(Error::Truncation {
            what: format!("coherent state alpha={alpha}"),
            captured,
            required: COHERENT_CAPTURE,
        });
    }
    let norm = captured.sqrt();
    Ok(amps.into_iter().map(|a| a / norm).collect())
}

pub fn coherent_state(alpha: C64, window: FockWindow) -> Result<DensityMatrix> {
    let ket = coherent_ket(alpha, window)?;
    DensityMatrix::pure(CompositeSpace::single(window), &ket)
}

pub fn fock_ket(n: usize, window: FockWindow) -> Result<Vec<C64>> {
    if !window.contains(n) {
        return Err(Error::config(format!(
            "Fock state {n} outside window {}..={}",
            window.offset(),
            window.top()
        )));
    }
    let mut ket = vec![ZERO; window.size()];
    ket[n - window.offset()] = ONE;
    Ok(ket)
}

pub fn fock_state(n: usize, window: FockWindow) -> Result<DensityMatrix> {
    let ket = fock_ket(n, window)?;
    DensityMatrix::pure(CompositeSpace::single(window), &ket)
}

/// Kronecker product of kets, leftmost slowest.
pub fn ket_product(kets: &[Vec<C64>]) -> Vec<C64> {
    kets.iter().fold(vec![ONE], |acc, k| {
        acc.iter().flat_map(|&a| k.iter().map(move |&b| a * b)).collect()
    })
}

/// Hermitian, unit-trace, positive-semidefinite state.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    space: CompositeSpace,
    entries: Array2<C64>,
}

pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-8;
pub const EIGEN_TOL: f64 = 1e-8;

impl DensityMatrix {
    /// Validated constructor.
    pub fn new(space: CompositeSpace, entries: Array2<C64>) -> Result<Self> {
        let rho = Self::from_raw(space, entries)?;
        rho.validate(HERMITIAN_TOL, TRACE_TOL, EIGEN_TOL)?;
        Ok(rho)
    }

    /// Shape check only; physical invariants are the caller's responsibility.
    pub fn from_raw(space: CompositeSpace, entries: Array2<C64>) -> Result<Self> {
        let d = space.dim();
        if entries.dim() != (d, d) {
            return Err(Error::Dimension {
                expected: d,
                found: entries.nrows(),
            });
        }
        Ok(Self { space, entries })
    }

    pub fn pure(space: CompositeSpace, ket: &[C64]) -> Result<Self> {
        let d = space.dim();
        if ket.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: ket.len(),
            });
        }
        let norm2: f64 = ket.iter().map(|a| a.norm_sqr()).sum();
        if !(norm2 > 0.0) {
            return Err(Error::InvalidState("zero state vector".into()));
        }
        let entries = Array2::from_shape_fn((d, d), |(i, j)| ket[i] * ket[j].conj() / norm2);
        Ok(Self { space, entries })
    }

    /// Tensor product of states, leftmost slowest.
    pub fn product(parts: &[DensityMatrix]) -> Result<Self> {
        let mut subsystems = Vec::new();
        let mut entries = linalg::identity(1);
        for p in parts {
            subsystems.extend_from_slice(p.space.subsystems());
            entries = linalg::kron(&entries, &p.entries);
        }
        Ok(Self {
            space: CompositeSpace::new(subsystems)?,
            entries,
        })
    }

    /// Same matrix reinterpreted on `space` (e.g. to relabel subsystem kinds).
    pub fn with_space(self, space: CompositeSpace) -> Result<Self> {
        Self::from_raw(space, self.entries)
    }

    pub fn validate(&self, herm_tol: f64, trace_tol: f64, eig_tol: f64) -> Result<()> {
        let herm = linalg::hermiticity_residual(&self.entries);
        if herm > herm_tol {
            return Err(Error::InvalidState(format!(
                "hermiticity residual {herm:.3e} exceeds {herm_tol:.1e}"
            )));
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > trace_tol {
            return Err(Error::InvalidState(format!("trace {tr} deviates from 1")));
        }
        let min_eig = self.min_eigenvalue();
        if min_eig < -eig_tol {
            return Err(Error::InvalidState(format!(
                "minimum eigenvalue {min_eig:.3e} below -{eig_tol:.1e}"
            )));
        }
        Ok(())
    }

    pub fn space(&self) -> &CompositeSpace {
        &self.space
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<C64> {
        self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> f64 {
        linalg::trace(&self.entries).re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::hermitian_eigenvalues(&self.entries)[0]
    }

    pub fn purity(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn expectation(&self, op: &OperatorMatrix) -> C64 {
        assert_eq!(op.dim(), self.dim());
        let a = op.entries();
        let mut acc = ZERO;
        for ((i, j), v) in a.indexed_iter() {
            acc += v * self.entries[[j, i]];
        }
        acc
    }

    pub fn expectation_sparse(&self, op: &SparseOp) -> C64 {
        op.expectation(&self.entries)
    }

    /// Diagonal populations.
    pub fn populations(&self) -> Vec<f64> {
        self.entries.diag().iter().map(|z| z.re).collect()
    }

    /// Trace distance ½‖ρ − σ‖₁.
    pub fn trace_distance(&self, other: &Self) -> f64 {
        let diff = &self.entries - &other.entries;
        0.5 * linalg::hermitian_eigenvalues(&diff)
            .iter()
            .map(|e| e.abs())
            .sum::<f64>()
    }
}
