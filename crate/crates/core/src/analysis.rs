//! Observables and diagnostics of single-mode pulse states: reduced states,
//! quadrature variances, Wigner functions and fidelities.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::Write;

use log::warn;
use ndarray::Array2;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::fock::{coherent_amplitudes, CompositeSpace, DensityMatrix, FockWindow, Subsystem};
use crate::linalg::{C64, ONE, ZERO};
use crate::pulses::ModeFunction;

/// Edge population above which a Wigner evaluation is flagged.
pub const WIGNER_EDGE_TOL: f64 = 1e-4;

/// Partial trace keeping subsystem `keep`.
pub fn reduced_density(rho: &DensityMatrix, keep: usize) -> Result<DensityMatrix> {
    let space = rho.space();
    if keep >= space.len() {
        return Err(Error::config(format!(
            "subsystem {keep} out of range for a {}-part space",
            space.len()
        )));
    }
    let sub: Subsystem = space.subsystems()[keep];
    let n = sub.window.size();
    let stride = space.stride(keep);
    let outer = space.dim() / (n * stride);
    let r = rho.entries();
    let mut out = Array2::<C64>::zeros((n, n));
    for hi in 0..outer {
        for lo in 0..stride {
            let base = hi * n * stride + lo;
            for i in 0..n {
                let gi = base + i * stride;
                for j in 0..n {
                    out[[i, j]] += r[[gi, base + j * stride]];
                }
            }
        }
    }
    DensityMatrix::from_raw(CompositeSpace::new(vec![sub])?, out)
}

/// Moments of a single mode from which every quadrature variance follows.
#[derive(Clone, Copy, Debug)]
pub struct QuadratureMoments {
    pub a: C64,
    pub a2: C64,
    /// ⟨â†â⟩ and ⟨ââ†⟩ in the truncated basis.
    pub ada: f64,
    pub aad: f64,
}

fn single_window(rho: &DensityMatrix) -> Result<FockWindow> {
    if rho.space().len() != 1 {
        return Err(Error::config("expected a single-mode state"));
    }
    Ok(rho.space().window(0))
}

impl QuadratureMoments {
    pub fn of(rho: &DensityMatrix) -> Result<Self> {
        let win = single_window(rho)?;
        let r = rho.entries();
        let n = win.size();
        let amp = |k: usize| (win.number(k) as f64).sqrt();
        let (mut a, mut a2, mut ada, mut aad) = (ZERO, ZERO, 0.0, 0.0);
        // (â)_{k-1,k} = √n_k, so tr(âρ) = Σ √n_k ρ_{k,k-1}
        for k in 0..n {
            if k >= 1 {
                a += r[[k, k - 1]] * amp(k);
                ada += r[[k, k]].re * amp(k).powi(2);
            }
            if k + 1 < n {
                aad += r[[k, k]].re * amp(k + 1).powi(2);
            }
            if k >= 2 {
                a2 += r[[k, k - 2]] * amp(k) * amp(k - 1);
            }
        }
        if win.offset() > 0 {
            // â†â uses the true photon number of the lowest state
            ada += r[[0, 0]].re * win.offset() as f64;
        }
        Ok(Self { a, a2, ada, aad })
    }

    /// `Var(cosφ x̂ − sinφ p̂)` with `x̂ = (â+â†)/√2`, `p̂ = i(â†−â)/√2`.
    pub fn variance(&self, phi: f64) -> f64 {
        let e = C64::from_polar(1.0, phi);
        let mean = 2.0 * (e * self.a).re * FRAC_1_SQRT_2;
        let second = 0.5 * (2.0 * (e * e * self.a2).re + self.ada + self.aad);
        second - mean * mean
    }
}

pub fn quadrature_variance(rho_mode: &DensityMatrix, phi: f64) -> Result<f64> {
    Ok(QuadratureMoments::of(rho_mode)?.variance(phi))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinVariance {
    pub phi: f64,
    pub var: f64,
}

/// Scan step of the coarse φ search.
pub const PHI_SCAN_STEP: f64 = 1e-3;
/// Final φ resolution of the golden-section refinement.
pub const PHI_TOL: f64 = 1e-5;

/// Minimizing quadrature angle in `[0, π)` and the variance there.
pub fn min_variance(rho_mode: &DensityMatrix) -> Result<MinVariance> {
    let m = QuadratureMoments::of(rho_mode)?;
    let steps = (PI / PHI_SCAN_STEP).ceil() as usize;
    let (mut best, mut best_var, mut worst_var) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..steps {
        let v = m.variance(k as f64 * PHI_SCAN_STEP);
        if v < best_var {
            best = k;
            best_var = v;
        }
        worst_var = worst_var.max(v);
    }
    if worst_var - best_var < 1e-12 {
        return Ok(MinVariance {
            phi: 0.0,
            var: best_var,
        });
    }
    let center = best as f64 * PHI_SCAN_STEP;
    let (mut lo, mut hi) = (center - PHI_SCAN_STEP, center + PHI_SCAN_STEP);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (m.variance(x1), m.variance(x2));
    while hi - lo > PHI_TOL {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = m.variance(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = m.variance(x2);
        }
    }
    let phi = (0.5 * (lo + hi)).rem_euclid(PI);
    let var = m.variance(phi);
    Ok(MinVariance {
        phi,
        var: var.min(best_var),
    })
}

/// `(φ, Var(x_φ))` pairs over `[0, π)` at `points` angles.
pub fn variance_scan(rho_mode: &DensityMatrix, points: usize) -> Result<Vec<(f64, f64)>> {
    let m = QuadratureMoments::of(rho_mode)?;
    Ok((0..points)
        .map(|k| {
            let phi = PI * k as f64 / points as f64;
            (phi, m.variance(phi))
        })
        .collect())
}

pub fn write_variance_csv<W: Write>(scan: &[(f64, f64)], mut out: W) -> Result<()> {
    writeln!(out, "phi,var")?;
    for (phi, var) in scan {
        writeln!(out, "{phi:.6},{var:.12e}")?;
    }
    Ok(())
}

/// Symmetric uniform phase-space grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSpaceGrid {
    pub extent: f64,
    pub points: usize,
}

impl Default for PhaseSpaceGrid {
    fn default() -> Self {
        Self {
            extent: 6.0,
            points: 121,
        }
    }
}

impl PhaseSpaceGrid {
    pub fn new(extent: f64, points: usize) -> Result<Self> {
        if !(extent > 0.0) || points < 2 {
            return Err(Error::config("phase-space grid needs extent > 0 and ≥ 2 points"));
        }
        Ok(Self { extent, points })
    }

    pub fn axis(&self) -> Vec<f64> {
        let step = self.step();
        (0..self.points).map(|k| -self.extent + k as f64 * step).collect()
    }

    pub fn step(&self) -> f64 {
        2.0 * self.extent / (self.points - 1) as f64
    }
}

/// Wigner function sampled on a phase-space grid; `values[[i, j]]` is
/// `W(x_i, p_j)` normalized so that `∫W dx dp = 1`.
#[derive(Clone, Debug)]
pub struct WignerField {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub values: Array2<f64>,
    /// Largest imaginary residue met during evaluation.
    pub imag_residue: f64,
}

impl WignerField {
    pub fn integral(&self) -> f64 {
        let dx = self.x[1] - self.x[0];
        let dp = self.p[1] - self.p[0];
        self.values.sum() * dx * dp
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,p,W")?;
        for (i, x) in self.x.iter().enumerate() {
            for (j, p) in self.p.iter().enumerate() {
                writeln!(out, "{x:.6},{p:.6},{:.12e}", self.values[[i, j]])?;
            }
        }
        Ok(())
    }
}

/// Displacement matrix elements `⟨m|D(β)|n⟩` on the consecutive Fock
/// numbers `first..first + size`, from the associated-Laguerre closed form.
fn displacement_elements(beta: C64, first: usize, size: usize) -> Array2<C64> {
    let mut out = Array2::zeros((size, size));
    let x = beta.norm_sqr();
    if x == 0.0 {
        for k in 0..size {
            out[[k, k]] = ONE;
        }
        return out;
    }
    let ln_b = beta.norm().ln();
    let top = first + size - 1;
    let mut lag = vec![0.0; top + 1];
    for d in 0..size {
        let df = d as f64;
        // L_k^{(d)}(x) for k = 0..=top by the three-term recurrence
        lag[0] = 1.0;
        if top >= 1 {
            lag[1] = 1.0 + df - x;
        }
        for k in 1..top {
            let kf = k as f64;
            lag[k + 1] = ((2.0 * kf + 1.0 + df - x) * lag[k] - (kf + df) * lag[k - 1]) / (kf + 1.0);
        }
        let up = C64::from_polar(1.0, df * beta.arg());
        let down = C64::from_polar(1.0, df * (PI - beta.arg()));
        for lo_local in 0..(size - d) {
            let lo = first + lo_local;
            let hi = lo + d;
            let mag =
                (0.5 * (ln_gamma(lo as f64 + 1.0) - ln_gamma(hi as f64 + 1.0)) + df * ln_b - 0.5 * x).exp() * lag[lo];
            // m ≥ n: β^{m−n}; m < n: (−β*)^{n−m}
            out[[lo_local + d, lo_local]] = up * mag;
            if d > 0 {
                out[[lo_local, lo_local + d]] = down * mag;
            }
        }
    }
    out
}

/// Wigner function by displaced parity, `W(x,p) = (1/π) tr[ρ D(β) Π̂ D†(β)]`
/// with `β = (x + ip)/√2`, evaluated as `(1/π) tr[ρ D(2β) Π̂]` so that only
/// matrix elements inside the window are needed.
pub fn wigner(rho_mode: &DensityMatrix, grid: PhaseSpaceGrid) -> Result<WignerField> {
    let win = single_window(rho_mode)?;
    let pops = rho_mode.populations();
    let mut edge = *pops.last().unwrap_or(&0.0);
    if win.offset() > 0 {
        edge = edge.max(pops[0]);
    }
    if win.size() > 1 && edge > WIGNER_EDGE_TOL {
        warn!("Wigner evaluation: window-edge population {edge:.2e} exceeds {WIGNER_EDGE_TOL:.0e}");
    }
    let size = win.size();
    let numbers: Vec<usize> = (0..size).map(|k| win.number(k)).collect();
    let parity: Vec<f64> = numbers.iter().map(|&n| if n % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let axis = grid.axis();
    let r = rho_mode.entries();
    let mut values = Array2::zeros((axis.len(), axis.len()));
    let mut residue: f64 = 0.0;
    for (i, &x) in axis.iter().enumerate() {
        for (j, &p) in axis.iter().enumerate() {
            let beta = C64::new(x, p) * (2.0 * FRAC_1_SQRT_2);
            let d = displacement_elements(beta, win.offset(), size);
            // tr[ρ D Π] = Σ_{m,n} ρ_{mn} D_{nm} (−1)^m
            let mut acc = ZERO;
            for m in 0..numbers.len() {
                let mut col = ZERO;
                for n in 0..numbers.len() {
                    col += r[[m, n]] * d[[n, m]];
                }
                acc += col * parity[m];
            }
            residue = residue.max(acc.im.abs() / PI);
            values[[i, j]] = acc.re / PI;
        }
    }
    Ok(WignerField {
        x: axis.clone(),
        p: axis,
        values,
        imag_residue: residue,
    })
}

/// `⟨target|ρ|target⟩`.
pub fn state_fidelity(rho: &DensityMatrix, target: &[C64]) -> Result<f64> {
    if target.len() != rho.dim() {
        return Err(Error::Dimension {
            expected: rho.dim(),
            found: target.len(),
        });
    }
    let r = rho.entries();
    let mut acc = ZERO;
    for (i, ti) in target.iter().enumerate() {
        for (j, tj) in target.iter().enumerate() {
            acc += ti.conj() * r[[i, j]] * tj;
        }
    }
    Ok(acc.re.clamp(0.0, 1.0))
}

/// Discrete inner product `Σ a*(tᵢ) b(tᵢ) dt`.
pub fn mode_overlap(a: &ModeFunction, b: &ModeFunction) -> Result<C64> {
    if a.grid() != b.grid() {
        return Err(Error::config("mode overlap needs functions on the same grid"));
    }
    let dt = a.grid().dt();
    Ok(a.samples()
        .iter()
        .zip(b.samples())
        .map(|(x, y)| x.conj() * y)
        .sum::<C64>()
        * dt)
}

/// Yurke-Stoler cat `(|α⟩ + i|−α⟩)/norm` restricted to `window`, renormalized.
pub fn yurke_stoler_cat(alpha: C64, window: FockWindow) -> Vec<C64> {
    let (plus, _) = coherent_amplitudes(alpha, window);
    let (minus, _) = coherent_amplitudes(-alpha, window);
    let ket: Vec<C64> = plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| a + C64::new(0.0, 1.0) * b)
        .collect();
    let norm = ket.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    ket.into_iter().map(|z| z / norm).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct CatFit {
    pub alpha: C64,
    pub fidelity: f64,
}

/// Fits the Yurke-Stoler amplitude to a single-mode state.
///
/// A cat has a vanishing mean field, so the amplitude is estimated from the
/// second moments: `|α′|² = ⟨n̂⟩` and `arg α′ = arg⟨â²⟩/2` (both branches
/// `±α′` are tried, they differ in the relative phase of the components).
/// The estimate is then polished by a local coordinate search on the
/// fidelity.
pub fn fit_cat(rho_mode: &DensityMatrix) -> Result<CatFit> {
    let win = single_window(rho_mode)?;
    let m = QuadratureMoments::of(rho_mode)?;
    let r0 = m.ada.max(0.0).sqrt();
    let chi0 = 0.5 * m.a2.arg();
    let fid =
        |r: f64, chi: f64| -> Result<f64> { state_fidelity(rho_mode, &yurke_stoler_cat(C64::from_polar(r, chi), win)) };
    let mut best = (r0, chi0, fid(r0, chi0)?);
    let alt = fid(r0, chi0 + PI)?;
    if alt > best.2 {
        best = (r0, chi0 + PI, alt);
    }
    let mut step_r = 0.1 * r0.max(0.1);
    let mut step_chi = 0.1;
    for _ in 0..60 {
        let (r, chi, f) = best;
        let mut improved = false;
        for (dr, dc) in [(step_r, 0.0), (-step_r, 0.0), (0.0, step_chi), (0.0, -step_chi)] {
            let cand_r = (r + dr).max(0.0);
            let cf = fid(cand_r, chi + dc)?;
            if cf > f + 1e-14 {
                best = (cand_r, chi + dc, cf);
                improved = true;
                break;
            }
        }
        if !improved {
            step_r *= 0.5;
            step_chi *= 0.5;
            if step_chi < 1e-6 {
                break;
            }
        }
    }
    Ok(CatFit {
        alpha: C64::from_polar(best.0, best.1),
        fidelity: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{coherent_state, fock_state};
    use approx::assert_abs_diff_eq;

    fn w(o: usize, s: usize) -> FockWindow {
        FockWindow::new(o, s).unwrap()
    }

    #[test]
    fn reduced_states() {
        let a = coherent_state(C64::new(0.5, 0.2), w(0, 10)).unwrap();
        let b = fock_state(1, w(0, 3)).unwrap();
        let c = fock_state(0, w(0, 2)).unwrap();
        let prod = DensityMatrix::product(&[a.clone(), b.clone(), c]).unwrap();
        let ra = reduced_density(&prod, 0).unwrap();
        assert!(crate::linalg::max_abs_diff(ra.entries(), a.entries()) < 1e-14);
        let rb = reduced_density(&prod, 1).unwrap();
        assert!(crate::linalg::max_abs_diff(rb.entries(), b.entries()) < 1e-14);
        assert_abs_diff_eq!(rb.trace(), 1.0, epsilon = 1e-10);

        // Bell state of two qubits
        let space = CompositeSpace::three_modes(w(0, 2), w(0, 2), w(0, 1)).unwrap();
        let s = FRAC_1_SQRT_2;
        let ket = [C64::new(s, 0.0), ZERO, ZERO, C64::new(s, 0.0)];
        let bell = DensityMatrix::pure(space, &ket).unwrap();
        let r = reduced_density(&bell, 1).unwrap();
        assert_abs_diff_eq!(r.entries()[[0, 0]].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.entries()[[0, 1]].norm(), 0.0, epsilon = 1e-15);
        assert!(reduced_density(&bell, 3).is_err());
    }

    #[test]
    fn variance_examples() {
        let coh = coherent_state(C64::new(2.0, -1.0), w(0, 40)).unwrap();
        let vac = fock_state(0, w(0, 5)).unwrap();
        let one = fock_state(1, w(0, 5)).unwrap();
        for k in 0..20 {
            let phi = 0.3 * k as f64;
            assert_abs_diff_eq!(quadrature_variance(&coh, phi).unwrap(), 0.5, epsilon = 1e-6);
            assert_abs_diff_eq!(quadrature_variance(&vac, phi).unwrap(), 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(quadrature_variance(&one, phi).unwrap(), 1.5, epsilon = 1e-15);
        }
        let flat = min_variance(&vac).unwrap();
        assert_eq!(flat.phi, 0.0);
        assert_abs_diff_eq!(flat.var, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn wigner_of_vacuum_and_coherent() {
        let vac = fock_state(0, w(0, 4)).unwrap();
        let field = wigner(&vac, PhaseSpaceGrid::default()).unwrap();
        assert_abs_diff_eq!(field.values[[60, 60]], 1.0 / PI, epsilon = 1e-12);
        assert_abs_diff_eq!(field.integral(), 1.0, epsilon = 1e-3);
        let coh = coherent_state(C64::new(2.0, 0.0), w(0, 40)).unwrap();
        let field = wigner(&coh, PhaseSpaceGrid::new(6.0, 61).unwrap()).unwrap();
        let x0 = 2.0 * 2f64.sqrt();
        for (i, &x) in field.x.iter().enumerate() {
            for (j, &p) in field.p.iter().enumerate() {
                let want = (-(x - x0).powi(2) - p * p).exp() / PI;
                assert_abs_diff_eq!(field.values[[i, j]], want, epsilon = 1e-12);
            }
        }
        assert!(field.imag_residue < 1e-10);
    }

    #[test]
    fn displacement_elements_are_unitary_on_large_basis() {
        let d = displacement_elements(C64::new(0.7, -0.4), 0, 60);
        // columns for low n are fully captured by 60 rows
        for n in 0..5 {
            let norm: f64 = (0..60).map(|m| d[[m, n]].norm_sqr()).sum();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        }
        // D(β)|0⟩ is the coherent state
        let (coh, _) = coherent_amplitudes(C64::new(0.7, -0.4), w(0, 60));
        for m in 0..20 {
            assert!((d[[m, 0]] - coh[m]).norm() < 1e-14);
        }
    }

    #[test]
    fn fidelity_and_overlap() {
        let win = w(0, 30);
        let cat = yurke_stoler_cat(C64::new(2.0, 0.0), win);
        let rho = DensityMatrix::pure(CompositeSpace::single(win), &cat).unwrap();
        assert_abs_diff_eq!(state_fidelity(&rho, &cat).unwrap(), 1.0, epsilon = 1e-12);
        let f0 = fock_state(0, win).unwrap();
        let one: Vec<C64> = (0..30).map(|k| if k == 1 { ONE } else { ZERO }).collect();
        assert_eq!(state_fidelity(&f0, &one).unwrap(), 0.0);
        assert!(state_fidelity(&f0, &one[..5]).is_err());
        let fit = fit_cat(&rho).unwrap();
        assert!(fit.fidelity > 1.0 - 1e-9);
        assert_abs_diff_eq!(fit.alpha.norm(), 2.0, epsilon = 1e-3);
    }
}
