//! Malliavin derivative of the discrete scheme.
//!
//! The derivative `D_{s,y}u(t,x)` is represented by `∂u(t_J, x_I)/∂ΔW_{j,i}`, the
//! pathwise sensitivity of a grid value to one noise increment. Since
//! `E ΔW² = dt·dx`, the cell sum `Σ |D|² dt dx` is the discrete analogue of
//! `∫∫ |D_{s,y}u|² dy ds`, and in the linear case it reproduces the variance of
//! the scheme exactly.
//!
//! Differentiating the recursion `s_{j+1} = E s_j + B[b(v_j)] + Q[σ(v_j)ΔW_j/dx]`
//! (with `v_j = P s_j`) gives the adjoint sweep
//!
//! ```text
//! λ_J = V_xᵀ
//! D_{j,i} = σ(v_{j,i})/dx · (Qᵀλ_{j+1})_i
//! λ_j = Eᵀλ_{j+1} + Pᵀ[m_j ⊙ Bᵀλ_{j+1} + m̂_j ⊙ ΔW_j/dx ⊙ Qᵀλ_{j+1}]
//! ```
//!
//! where `m = b'(v)` and `m̂ = σ'(v)`. One sweep yields every source for a fixed
//! target at the cost of one forward solve.

use crate::ensemble::fold_paths;
use crate::error::{domain, Error, Result};
use crate::kernels::{free_heat, EnvelopeConfig};
use crate::noise::{self, GridSpec, NoiseGrid};
use crate::solver::{simulate_observed, simulate_path, FieldPath, ModelSpec, SchemeConfig, Stepper};
use crate::stats::{loglog_fit, LinearFit};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `m = b'(u)` and `m̂ = σ'(u)` at the cell values of a stored path, `(Nt+1)×Nx`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFields {
    pub grid: GridSpec,
    pub m: Vec<f64>,
    pub m_hat: Vec<f64>,
}

impl CoefficientFields {
    pub fn from_path(path: &FieldPath, model: &ModelSpec) -> CoefficientFields {
        CoefficientFields {
            grid: path.grid,
            m: path.cells.iter().map(|&v| model.b.derivative(v)).collect(),
            m_hat: path.cells.iter().map(|&v| model.sigma.derivative(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> (f64, f64) {
        let mx = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        (mx(&self.m), mx(&self.m_hat))
    }

    /// `|m| ≤ lip_b` and `|m̂| ≤ lip_sigma` everywhere.
    pub fn check_bounds(&self, model: &ModelSpec) -> Result<()> {
        let (mb, ms) = self.max_abs();
        if mb > model.lip_b * (1.0 + 1e-12) + 1e-15 || ms > model.lip_sigma * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::InvalidModel(format!(
                "coefficient fields exceed the Lipschitz constants: max|m| = {mb}, max|m_hat| = {ms}"
            )));
        }
        Ok(())
    }
}

/// Derivative of `u(t_J, x_I)` with respect to every noise cell, `Nt×Nx`.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinField {
    /// `(J, I)`: time index and vertex index
    pub target: (usize, usize),
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FieldSidecar {
    format: String,
    grid: GridSpec,
    target: (usize, usize),
    rows: usize,
    cols: usize,
}

impl MalliavinField {
    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.grid.nx + i]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.grid.nx..(j + 1) * self.grid.nx]
    }

    /// Left end `s_j` of source cell `j`.
    pub fn source_time(&self, j: usize) -> f64 {
        self.grid.time(j)
    }

    /// Centre `y_i` of source cell `i`.
    pub fn source_y(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.grid.dx()
    }

    /// `(Σ |D − D'|² dt dx)^{1/2}`.
    pub fn l2_distance(&self, other: &MalliavinField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("fields live on different grids".into()));
        }
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((s * self.grid.dt() * self.grid.dx()).sqrt())
    }

    /// Writes `<stem>.bin` (little-endian, row-major in source time) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(stem.with_extension("bin"), bytes)?;
        let side = FieldSidecar {
            format: "f64le; source rows".into(),
            grid: self.grid,
            target: self.target,
            rows: self.grid.nt,
            cols: self.grid.nx,
        };
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(stem.with_extension("json"), json + "\n")?;
        Ok(())
    }
}

fn check_consistency(path: &FieldPath, noise: &NoiseGrid, model: &ModelSpec, target: (usize, usize)) -> Result<()> {
    if path.noise_fingerprint != noise.fingerprint() {
        return Err(Error::FingerprintMismatch(format!(
            "path was driven by noise {} but {} was supplied",
            path.noise_fingerprint,
            noise.fingerprint()
        )));
    }
    if path.model_fingerprint != model.fingerprint() {
        return Err(Error::FingerprintMismatch(format!(
            "path was produced by model {} but {} was supplied",
            path.model_fingerprint,
            model.fingerprint()
        )));
    }
    if target.0 > path.grid.nt || target.1 > path.grid.nx {
        return domain(format!(
            "target ({}, {}) outside the {} grid",
            target.0,
            target.1,
            path.grid.label()
        ));
    }
    Ok(())
}

/// Fills `mb`, `ms` for time level `j`; returns which of them are active.
fn linearisation(
    model: &ModelSpec,
    path: &FieldPath,
    noise: &NoiseGrid,
    j: usize,
    mb: &mut [f64],
    ms: &mut [f64],
) -> (bool, bool) {
    let v = path.cell_row(j);
    let dw = noise.row(j);
    let dx = path.grid.dx();
    let drift = !model.b.is_zero();
    let diffusion = !model.sigma.is_zero();
    for i in 0..v.len() {
        if drift {
            mb[i] = model.b.derivative(v[i]);
        }
        if diffusion {
            ms[i] = model.sigma.derivative(v[i]) * dw[i] / dx;
        }
    }
    (drift, diffusion)
}

/// Adjoint sweep from `target = (J, I)`; sources with `j ≥ J` are zero.
pub fn derivative_field(
    path: &FieldPath,
    noise: &NoiseGrid,
    model: &ModelSpec,
    target: (usize, usize),
) -> Result<MalliavinField> {
    check_consistency(path, noise, model, target)?;
    let grid = path.grid;
    let n = grid.nx;
    let dx = grid.dx();
    let stepper = Stepper::new(&model.kernel, &grid, SchemeConfig { scheme: path.scheme });
    let mut lam = stepper.observation(grid.x(target.1));
    let mut values = vec![0.0; grid.nt * n];
    let (mut mb, mut ms, mut qt) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut w = stepper.work();
    for j in (0..target.0).rev() {
        let (drift, diffusion) = linearisation(model, path, noise, j, &mut mb, &mut ms);
        stepper.adjoint_step(
            &mut lam,
            drift.then_some(&mb[..]),
            diffusion.then_some(&ms[..]),
            &mut qt,
            &mut w,
        );
        let v = path.cell_row(j);
        let row = &mut values[j * n..(j + 1) * n];
        for i in 0..n {
            row[i] = model.sigma.value(v[i]) / dx * qt[i];
        }
    }
    let field = MalliavinField { target, grid, values };
    if let Some(k) = field.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            path: noise.path_index,
            step: k / n,
        });
    }
    Ok(field)
}

/// The same derivative for one source by forward propagation of the first
/// variation. Costs a full sweep per source; kept as an oracle.
pub fn derivative_by_tangent(
    path: &FieldPath,
    noise: &NoiseGrid,
    model: &ModelSpec,
    source: (usize, usize),
    target: (usize, usize),
) -> Result<f64> {
    check_consistency(path, noise, model, target)?;
    let grid = path.grid;
    let (j0, i0) = source;
    if j0 >= grid.nt || i0 >= grid.nx {
        return domain(format!("source ({j0}, {i0}) outside the {} grid", grid.label()));
    }
    if j0 >= target.0 {
        return Ok(0.0);
    }
    let n = grid.nx;
    let stepper = Stepper::new(&model.kernel, &grid, SchemeConfig { scheme: path.scheme });
    let mut ds = vec![0.0; n];
    let mut w = stepper.work();
    let seed = model.sigma.value(path.cell_row(j0)[i0]) / grid.dx();
    stepper.tangent_step(&mut ds, None, None, Some((i0, seed)), &mut w);
    let (mut mb, mut ms) = (vec![0.0; n], vec![0.0; n]);
    for j in j0 + 1..target.0 {
        let (drift, diffusion) = linearisation(model, path, noise, j, &mut mb, &mut ms);
        stepper.tangent_step(
            &mut ds,
            drift.then_some(&mb[..]),
            diffusion.then_some(&ms[..]),
            None,
            &mut w,
        );
    }
    let obs = stepper.observation(grid.x(target.1));
    Ok(obs.iter().zip(&ds).map(|(a, b)| a * b).sum())
}

/// `γ(t,x) ≈ Σ_{j<J} Σ_i |D_{j,i}|² dt dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaValue {
    pub target: (usize, usize),
    pub t: f64,
    pub x: f64,
    pub value: f64,
    /// contribution of the source row just below the target, where the kernel is singular
    pub last_slice: f64,
}

pub fn gamma(field: &MalliavinField) -> GammaValue {
    let g = field.grid;
    let (jt, ix) = field.target;
    let w = g.dt() * g.dx();
    let row_sum = |j: usize| field.row(j).iter().map(|d| d * d).sum::<f64>() * w;
    let value: f64 = (0..jt).map(row_sum).sum();
    GammaValue {
        target: field.target,
        t: g.time(jt),
        x: g.x(ix),
        value,
        last_slice: if jt > 0 { row_sum(jt - 1) } else { 0.0 },
    }
}

/// [`gamma`] of a fresh adjoint sweep.
pub fn gamma_at(path: &FieldPath, noise: &NoiseGrid, model: &ModelSpec, target: (usize, usize)) -> Result<GammaValue> {
    Ok(gamma(&derivative_field(path, noise, model, target)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpReport {
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub h: f64,
    pub finite_difference: f64,
    pub adjoint: f64,
    pub relative_error: f64,
}

fn value_at(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    noise: &NoiseGrid,
    target: (usize, usize),
) -> Result<f64> {
    let mut out = f64::NAN;
    simulate_observed(model, grid, scheme, noise, |j, v, _| {
        if j == target.0 {
            out = v[target.1];
        }
    })?;
    Ok(out)
}

/// Central difference of `u(target)` under `ΔW_source ± h`, compared with the
/// adjoint sweep.
pub fn bump_check(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    noise: &NoiseGrid,
    target: (usize, usize),
    source: (usize, usize),
    h: f64,
) -> Result<BumpReport> {
    if source.0 >= target.0 {
        return domain(format!(
            "source time index {} must precede target time index {}",
            source.0, target.0
        ));
    }
    if source.1 >= grid.nx {
        return domain(format!("source cell {} outside the grid", source.1));
    }
    if !(h > 0.0 && h.is_finite()) {
        return domain(format!("bump size must be positive, got {h}"));
    }
    let path = simulate_path(model, grid, scheme, noise)?;
    let field = derivative_field(&path, noise, model, target)?;
    let up = value_at(model, grid, scheme, &noise.bumped(source.0, source.1, h), target)?;
    let dn = value_at(model, grid, scheme, &noise.bumped(source.0, source.1, -h), target)?;
    let scale = path.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let diff = up - dn;
    if diff.abs() < 1e3 * f64::EPSILON * scale {
        return Err(Error::UnreliableOracle(format!(
            "difference {diff:e} is below 1e3·eps of the field scale {scale:e}"
        )));
    }
    let fd = diff / (2.0 * h);
    let adj = field.get(source.0, source.1);
    let relative_error = if fd == adj { 0.0 } else { (fd - adj).abs() / adj.abs() };
    Ok(BumpReport {
        source,
        target,
        h,
        finite_difference: fd,
        adjoint: adj,
        relative_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub tau: f64,
    pub s: f64,
    pub y: f64,
    /// `E(|D|^k)^{1/k}`
    pub norm: f64,
    /// `E|D|²`
    pub second_moment: f64,
    pub reference: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub target: (usize, usize),
    pub t: f64,
    pub x: f64,
    pub k: u32,
    pub n_paths: usize,
    pub fourth_order: bool,
    /// ensemble sup over the grid of `E(|σ(u)|^k)^{1/k}`
    pub c_tk: f64,
    pub gamma_env: f64,
    pub rows: Vec<EnvelopeRow>,
    pub max_ratio: f64,
    /// `τ` range of the diagonal regression
    pub fit_window: (f64, f64),
    /// `ln E|D_{t−τ, x}u(t,x)|²` against `ln τ`
    pub diagonal_fit: Option<LinearFit>,
}

/// Moment envelope of the derivative over a lattice of sources.
///
/// Sources sit at `τ = t − s = 2^m dt` and at every cell centre that is a
/// multiple of `Nx/16` cells from the target, plus the cell at the target.
/// Against the second-order envelope each row is compared with
/// `√6 C_Tk e^{γ²t/2} p_τ(x−y)`; for the fourth-order equation the reference
/// is `τ^{−1/4}` and the maximal ratio is the fitted constant.
pub fn envelope_report(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    n_paths: usize,
    seed: u64,
    target: (usize, usize),
    k: u32,
) -> Result<EnvelopeReport> {
    if k < 2 || k % 2 != 0 {
        return domain(format!("moment order must be even and at least 2, got {k}"));
    }
    if n_paths == 0 {
        return Err(Error::InsufficientData("at least one path is needed".into()));
    }
    let (jt, ix) = target;
    if jt == 0 || jt > grid.nt || ix > grid.nx {
        return domain(format!("target ({jt}, {ix}) must lie on the grid after t = 0"));
    }
    let n = grid.nx;
    let dt = grid.dt();
    let diag = ix.min(n - 1);
    let mut cells = vec![diag];
    let stride = (n / 16).max(1);
    for off in (stride..n).step_by(stride) {
        for c in [diag as i64 - off as i64, (diag + off) as i64] {
            if c >= 0 && (c as usize) < n {
                cells.push(c as usize);
            }
        }
    }
    let mut lags = Vec::new();
    let mut l = 1usize;
    while l <= jt {
        lags.push(l);
        l *= 2;
    }
    let sources: Vec<(usize, usize)> = lags
        .iter()
        .flat_map(|&l| cells.iter().map(move |&c| (jt - l, c)))
        .collect();

    let kf = k as f64;
    let verts = (grid.nt + 1) * (n + 1);
    let zero = (vec![0.0; verts], vec![0.0; sources.len()], vec![0.0; sources.len()]);
    let (sig_k, d_k, d_2) = fold_paths(
        n_paths,
        32,
        zero,
        |p| {
            let noise = noise::sample(seed, p, *grid);
            let path = simulate_path(model, grid, scheme, &noise)?;
            let field = derivative_field(&path, &noise, model, target)?;
            let sig: Vec<f64> = path.values.iter().map(|&u| model.sigma.value(u).abs().powf(kf)).collect();
            let d: Vec<f64> = sources.iter().map(|&(j, i)| field.get(j, i)).collect();
            Ok((sig, d))
        },
        |(mut sk, mut dk, mut d2), _, (sig, d)| {
            for (a, b) in sk.iter_mut().zip(&sig) {
                *a += b;
            }
            for (q, v) in d.iter().enumerate() {
                dk[q] += v.abs().powf(kf);
                d2[q] += v * v;
            }
            (sk, dk, d2)
        },
    )?;
    let nf = n_paths as f64;
    let c_tk = sig_k.iter().fold(0.0f64, |a, s| a.max((s / nf).powf(1.0 / kf)));
    let fourth = !model.kernel.is_second_order();
    let gamma_env = if c_tk > 0.0 {
        EnvelopeConfig::new(model.horizon, k, model.lip_b, model.lip_sigma, c_tk)?.gamma_env
    } else {
        0.0
    };
    let t = grid.time(jt);
    let x = grid.x(ix);
    let dx = grid.dx();
    let mut rows = Vec::with_capacity(sources.len());
    for (q, &(j, i)) in sources.iter().enumerate() {
        // the source cell spans [s_j, s_j + dt]; its midpoint sits τ − dt/2 before the target
        let tau = (jt - j) as f64 * dt;
        let y = (i as f64 + 0.5) * dx;
        let norm = (d_k[q] / nf).powf(1.0 / kf);
        let reference = if fourth {
            tau.powf(-0.25)
        } else {
            6f64.sqrt() * c_tk * (gamma_env * gamma_env * t / 2.0).exp() * free_heat(tau - 0.5 * dt, x - y)?
        };
        rows.push(EnvelopeRow {
            tau,
            s: grid.time(j),
            y,
            norm,
            second_moment: d_2[q] / nf,
            reference,
            ratio: norm / reference,
        });
    }
    let max_ratio = rows.iter().fold(0.0f64, |a, r| a.max(r.ratio));
    let fit_window = (8.0 * dt, t / 8.0);
    let (taus, m2): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .zip(&sources)
        .filter(|(r, s)| s.1 == diag && r.tau >= fit_window.0 * (1.0 - 1e-12) && r.tau <= fit_window.1 * (1.0 + 1e-12))
        .map(|(r, _)| (r.tau, r.second_moment))
        .unzip();
    Ok(EnvelopeReport {
        target,
        t,
        x,
        k,
        n_paths,
        fourth_order: fourth,
        c_tk,
        gamma_env,
        rows,
        max_ratio,
        fit_window,
        diagonal_fit: loglog_fit(&taus, &m2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{eval_spectral, linear_exact_variance, KernelId, SeriesTruncation};
    use crate::solver::{Coefficient, ModelSpec};
    use rand::{Rng, SeedableRng};

    const D: KernelId = KernelId::DIRICHLET;

    fn setup(model: &ModelSpec, grid: GridSpec, scheme: SchemeConfig, p: u64) -> (FieldPath, NoiseGrid) {
        let noise = noise::sample(11, p, grid);
        (simulate_path(model, &grid, scheme, &noise).unwrap(), noise)
    }

    #[test]
    fn linear_field_is_the_kernel() {
        let grid = GridSpec::new(64, 4096, 1.0).unwrap();
        let mut model = ModelSpec::linear(D);
        model.sigma = Coefficient::Constant(0.7);
        let (path, noise) = setup(&model, grid, SchemeConfig::spectral(), 0);
        let (jt, ix) = (1024, 24);
        let x = grid.x(ix);
        let f = derivative_field(&path, &noise, &model, (jt, ix)).unwrap();
        let dt = grid.dt();
        for j in (0..jt - 10).step_by(37) {
            let tau = (jt - j) as f64 * dt;
            // exact discrete propagator: e^{-λ(τ-dt)} times the one-step noise filter
            let disc = |y: f64| -> f64 {
                (1..=64)
                    .map(|k| {
                        let l = D.lambda(k);
                        let q = (-(-2.0 * l * dt).exp_m1() / (2.0 * l * dt)).sqrt();
                        2.0 * D.mode(k, x) * D.mode(k, y) * (-l * (tau - dt)).exp() * q
                    })
                    .sum::<f64>()
                    * 0.7
            };
            let cont = |y: f64| 0.7 * eval_spectral(&D, tau - 0.5 * dt, x, y, SeriesTruncation::AdaptiveTail(1e-14)).unwrap();
            let peak = (0..64).map(|i| cont(f.source_y(i)).abs()).fold(0.0, f64::max);
            for i in 0..64 {
                let y = f.source_y(i);
                assert!((f.get(j, i) - disc(y)).abs() < 1e-10 * peak, "{j} {i}");
                assert!((f.get(j, i) - cont(y)).abs() < 1e-3 * peak, "{j} {i}");
            }
        }
    }

    #[test]
    fn zero_future() {
        let grid = GridSpec::new(16, 64, 1.0).unwrap();
        for model in [ModelSpec::default_nonlinear(D), ModelSpec::default_nonlinear(KernelId::fourth_order(1.0).unwrap())] {
            let grid = GridSpec::new(grid.nx, grid.nt, model.horizon).unwrap();
            let (path, noise) = setup(&model, grid, SchemeConfig::spectral(), 3);
            for jt in [0, 1, 30, 64] {
                let f = derivative_field(&path, &noise, &model, (jt, 5)).unwrap();
                assert!(f.values[jt * 16..].iter().all(|&v| v == 0.0));
                assert!(f.values.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn adjoint_matches_tangent() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for kernel in [D, KernelId::NEUMANN, KernelId::fourth_order(1.0).unwrap()] {
            let model = ModelSpec::default_nonlinear(kernel);
            for scheme in [SchemeConfig::spectral(), SchemeConfig::finite_difference()] {
                let grid = GridSpec::new(32, 256, model.horizon).unwrap();
                let (path, noise) = setup(&model, grid, scheme, 1);
                for _ in 0..4 {
                    let jt = rng.gen_range(2..=256);
                    let ix = rng.gen_range(0..=32);
                    let f = derivative_field(&path, &noise, &model, (jt, ix)).unwrap();
                    let j = rng.gen_range(0..jt);
                    let i = rng.gen_range(0..32);
                    let fwd = derivative_by_tangent(&path, &noise, &model, (j, i), (jt, ix)).unwrap();
                    let adj = f.get(j, i);
                    let err = (fwd - adj).abs() / adj.abs().max(1e-300);
                    assert!(err < 1e-10 || (fwd - adj).abs() < 1e-14, "{kernel:?} {scheme:?} {fwd} {adj}");
                }
            }
        }
    }

    #[test]
    fn gamma_at_time_zero_vanishes() {
        let grid = GridSpec::new(16, 32, 1.0).unwrap();
        let model = ModelSpec::default_nonlinear(D);
        let (path, noise) = setup(&model, grid, SchemeConfig::spectral(), 0);
        for ix in 0..=16 {
            let g = gamma_at(&path, &noise, &model, (0, ix)).unwrap();
            assert_eq!(g.value, 0.0);
            assert_eq!(g.last_slice, 0.0);
        }
    }

    #[test]
    fn linear_gamma_is_the_variance() {
        let grid = GridSpec::new(64, 4096, 1.0).unwrap();
        let model = ModelSpec::linear(D);
        let (path, noise) = setup(&model, grid, SchemeConfig::spectral(), 0);
        for (jt, ix) in [(410, 32), (4096, 16), (2048, 12)] {
            let g = gamma_at(&path, &noise, &model, (jt, ix)).unwrap();
            let exact = linear_exact_variance(&D, grid.time(jt), grid.x(ix), SeriesTruncation::AdaptiveTail(1e-13)).unwrap();
            assert!((g.value / exact - 1.0).abs() < 2e-2, "{} {exact}", g.value);
            // the scheme's own variance is the truncated series, matched far more tightly
            let disc = linear_exact_variance(&D, grid.time(jt), grid.x(ix), SeriesTruncation::FixedModes(63)).unwrap();
            assert!((g.value / disc - 1.0).abs() < 1e-12, "{} {disc}", g.value);
        }
    }

    #[test]
    fn doubling_sigma_quadruples_gamma() {
        let grid = GridSpec::new(32, 512, 1.0).unwrap();
        let mut model = ModelSpec::linear(KernelId::NEUMANN);
        let (path, noise) = setup(&model, grid, SchemeConfig::spectral(), 2);
        let g1 = gamma_at(&path, &noise, &model, (300, 7)).unwrap().value;
        model.sigma = Coefficient::Constant(2.0);
        let (path, noise) = setup(&model, grid, SchemeConfig::spectral(), 2);
        let g2 = gamma_at(&path, &noise, &model, (300, 7)).unwrap().value;
        assert!((g2 / g1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn coefficient_fields_within_lipschitz() {
        for kernel in [D, KernelId::NEUMANN, KernelId::fourth_order(1.0).unwrap()] {
            let model = ModelSpec::default_nonlinear(kernel);
            let grid = GridSpec::new(32, 256, model.horizon).unwrap();
            let (path, _) = setup(&model, grid, SchemeConfig::spectral(), 4);
            let c = CoefficientFields::from_path(&path, &model);
            c.check_bounds(&model).unwrap();
            let (mb, ms) = c.max_abs();
            assert!(mb <= 1.0 && ms <= 0.25);
        }
    }

    #[test]
    fn fingerprints_and_targets_are_checked() {
        let grid = GridSpec::new(16, 32, 1.0).unwrap();
        let model = ModelSpec::default_nonlinear(D);
        let (path, noise) = setup(&model, grid, SchemeConfig::spectral(), 0);
        let other = noise::sample(11, 1, grid);
        assert!(matches!(derivative_field(&path, &other, &model, (5, 5)), Err(Error::FingerprintMismatch(_))));
        assert!(matches!(
            derivative_field(&path, &noise.bumped(0, 0, 1e-3), &model, (5, 5)),
            Err(Error::FingerprintMismatch(_))
        ));
        assert!(matches!(
            derivative_field(&path, &noise, &ModelSpec::linear(D), (5, 5)),
            Err(Error::FingerprintMismatch(_))
        ));
        assert!(derivative_field(&path, &noise, &model, (33, 5)).is_err());
        assert!(derivative_field(&path, &noise, &model, (5, 17)).is_err());
    }

    #[test]
    fn bump_check_linear_and_nonlinear() {
        let grid = GridSpec::new(32, 512, 1.0).unwrap();
        let sc = SchemeConfig::spectral();
        let lin = ModelSpec::linear(D);
        let noise = noise::sample(3, 0, grid);
        let r = bump_check(&lin, &grid, sc, &noise, (400, 16), (390, 14), 1.0).unwrap();
        assert!(r.relative_error < 1e-10, "{r:?}");
        let nl = ModelSpec::default_nonlinear(D);
        let unit = (grid.dt() * grid.dx()).sqrt();
        let r = bump_check(&nl, &grid, sc, &noise, (400, 16), (300, 12), 1e-4 * unit).unwrap();
        assert!(r.relative_error < 1e-3, "{r:?}");
        // plateau between h = 1e-3 and 1e-4 (scaled)
        let r3 = bump_check(&nl, &grid, sc, &noise, (400, 16), (300, 12), 1e-3 * unit).unwrap();
        assert!((r3.finite_difference / r.finite_difference - 1.0).abs() < 1e-2);
        assert!(bump_check(&nl, &grid, sc, &noise, (300, 16), (300, 12), unit).is_err());
        assert!(matches!(
            bump_check(&nl, &grid, sc, &noise, (400, 16), (300, 12), 1e-30),
            Err(Error::UnreliableOracle(_))
        ));
    }

    #[test]
    fn envelope_scales_with_sigma() {
        let grid = GridSpec::new(16, 128, 1.0).unwrap();
        let sc = SchemeConfig::spectral();
        let mut model = ModelSpec::linear(D);
        let a = envelope_report(&model, &grid, sc, 4, 1, (128, 8), 2).unwrap();
        model.sigma = Coefficient::Constant(2.0);
        let b = envelope_report(&model, &grid, sc, 4, 1, (128, 8), 2).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert!((rb.norm - 2.0 * ra.norm).abs() <= 1e-12 * ra.norm.max(1e-300));
        }
        assert!(a.max_ratio.is_finite() && a.max_ratio > 0.0);
        assert!((a.c_tk - 1.0).abs() < 1e-15 && (b.c_tk - 2.0).abs() < 1e-15);
        assert!(envelope_report(&model, &grid, sc, 4, 1, (128, 8), 3).is_err());
    }
}
