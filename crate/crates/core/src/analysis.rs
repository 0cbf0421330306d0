//! Ensemble statistics of simulated fields: the law of the supremum, Hölder
//! regressions, small-ball tails of `γ`, escape from the initial maximum and
//! the energy `γ` on the argmax set.
//!
//! The grid supremum stands in for the continuum one. Paths on different grids
//! are driven by unrelated noise streams, so grid refinement is compared in law
//! (two-sample Kolmogorov–Smirnov), never pathwise.

use crate::ensemble::map_paths;
use crate::error::{domain, Error, Result};
use crate::kernels::{eval_fast, KernelId};
use crate::malliavin::{derivative_field, gamma_at};
use crate::noise::{self, GridSpec};
use crate::quad::{gauss_legendre, gauss_legendre_integrate};
use crate::solver::{simulate_observed, simulate_path, FieldPath, ModelSpec, SchemeConfig};
use crate::stats::{ks_two_sample, loglog_fit, median, quantile_sorted, wilson, LinearFit, Proportion};
use serde::{Deserialize, Serialize};

/// Space-time region of `[0,T]×[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Full,
    /// `[δ,T]×[δ,1−δ]`
    SDelta { delta: f64 },
    /// `[δ,T]×[0,1]`
    LDelta { delta: f64 },
    Compact { t_lo: f64, t_hi: f64, x_lo: f64, x_hi: f64 },
}

/// Inclusive index box `(j_lo, j_hi, i_lo, i_hi)` on the vertex grid.
type IndexBox = (usize, usize, usize, usize);

impl Region {
    /// `S_δ` for Dirichlet, `L_δ` otherwise.
    pub fn interior(kernel: &KernelId, delta: f64) -> Region {
        if kernel.is_sine() {
            Region::SDelta { delta }
        } else {
            Region::LDelta { delta }
        }
    }

    /// `full`, `sdelta:δ`, `ldelta:δ` or `compact:t_lo,t_hi,x_lo,x_hi`.
    pub fn parse(s: &str) -> Result<Region> {
        let (head, rest) = s.split_once(':').unwrap_or((s, ""));
        let nums: Vec<f64> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Domain(format!("bad region `{s}`: {e}"))))
                .collect::<Result<_>>()?
        };
        match (head.trim(), nums.as_slice()) {
            ("full", []) => Ok(Region::Full),
            ("sdelta", [d]) => Ok(Region::SDelta { delta: *d }),
            ("ldelta", [d]) => Ok(Region::LDelta { delta: *d }),
            ("compact", [a, b, c, d]) => Ok(Region::Compact {
                t_lo: *a,
                t_hi: *b,
                x_lo: *c,
                x_hi: *d,
            }),
            _ => domain(format!("cannot parse region `{s}`")),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Region::Full => "full".into(),
            Region::SDelta { delta } => format!("sdelta:{delta}"),
            Region::LDelta { delta } => format!("ldelta:{delta}"),
            Region::Compact { t_lo, t_hi, x_lo, x_hi } => format!("compact:{t_lo},{t_hi},{x_lo},{x_hi}"),
        }
    }

    fn bounds(&self, horizon: f64) -> (f64, f64, f64, f64) {
        match *self {
            Region::Full => (0.0, horizon, 0.0, 1.0),
            Region::SDelta { delta } => (delta, horizon, delta, 1.0 - delta),
            Region::LDelta { delta } => (delta, horizon, 0.0, 1.0),
            Region::Compact { t_lo, t_hi, x_lo, x_hi } => (t_lo, t_hi, x_lo, x_hi),
        }
    }

    pub fn contains(&self, horizon: f64, t: f64, x: f64) -> bool {
        let (a, b, c, d) = self.bounds(horizon);
        t >= a && t <= b && x >= c && x <= d
    }

    fn index_box(&self, grid: &GridSpec) -> Result<IndexBox> {
        let (a, b, c, d) = self.bounds(grid.t);
        let slack = 1e-9;
        let j_lo = (a / grid.dt() - slack).ceil().max(0.0) as usize;
        let j_hi = ((b / grid.dt() + slack).floor().min(grid.nt as f64)).max(-1.0);
        let i_lo = (c * grid.nx as f64 - slack).ceil().max(0.0) as usize;
        let i_hi = ((d * grid.nx as f64 + slack).floor().min(grid.nx as f64)).max(-1.0);
        if j_hi < 0.0 || i_hi < 0.0 || j_lo > j_hi as usize || i_lo > i_hi as usize {
            return domain(format!("region {} contains no point of the {} grid", self.label(), grid.label()));
        }
        Ok((j_lo, j_hi as usize, i_lo, i_hi as usize))
    }
}

/// A grid point with its value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub j: usize,
    pub i: usize,
    pub t: f64,
    pub x: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupSample {
    pub sup_value: f64,
    /// every region point within `tie_tolerance` of the maximum
    pub argmax_set: Vec<GridPoint>,
    pub tie_tolerance: f64,
}

/// Default tie tolerance relative to the field scale `max |u|` over the region.
pub const TIE_RELATIVE: f64 = 1e-9;

/// Streaming maximum over an index box, keeping near-ties.
struct SupTracker {
    bx: IndexBox,
    tie: Option<f64>,
    best: f64,
    scale: f64,
    cand: Vec<(usize, usize, f64)>,
}

impl SupTracker {
    fn new(bx: IndexBox, tie: Option<f64>) -> SupTracker {
        SupTracker {
            bx,
            tie,
            best: f64::NEG_INFINITY,
            scale: 0.0,
            cand: Vec::new(),
        }
    }

    /// Candidates are kept in a window wider than any final tolerance can be.
    fn window(&self) -> f64 {
        self.tie.unwrap_or(TIE_RELATIVE * self.scale) * 1e3
    }

    fn observe(&mut self, j: usize, row: &[f64]) {
        let (j_lo, j_hi, i_lo, i_hi) = self.bx;
        if j < j_lo || j > j_hi {
            return;
        }
        for (i, &v) in row.iter().enumerate().take(i_hi + 1).skip(i_lo) {
            self.scale = self.scale.max(v.abs());
            if v > self.best {
                self.best = v;
                let floor = v - self.window();
                self.cand.retain(|c| c.2 >= floor);
            }
            if v >= self.best - self.window() {
                self.cand.push((j, i, v));
            }
        }
    }

    fn finish(self, grid: &GridSpec) -> SupSample {
        let tol = self.tie.unwrap_or(TIE_RELATIVE * self.scale);
        let argmax_set = self
            .cand
            .iter()
            .filter(|c| c.2 >= self.best - tol)
            .map(|&(j, i, value)| GridPoint {
                j,
                i,
                t: grid.time(j),
                x: grid.x(i),
                value,
            })
            .collect();
        SupSample {
            sup_value: self.best,
            argmax_set,
            tie_tolerance: tol,
        }
    }
}

/// Exact maximum over the grid points of `region`.
pub fn path_sup(path: &FieldPath, region: &Region, tie: Option<f64>) -> Result<SupSample> {
    let bx = region.index_box(&path.grid)?;
    let mut tr = SupTracker::new(bx, tie);
    for j in bx.0..=bx.1 {
        tr.observe(j, path.row(j));
    }
    Ok(tr.finish(&path.grid))
}

fn sup_of_path(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    seed: u64,
    p: u64,
    bx: IndexBox,
) -> Result<SupSample> {
    let noise = noise::sample(seed, p, *grid);
    let mut tr = SupTracker::new(bx, None);
    simulate_observed(model, grid, scheme, &noise, |j, v, _| tr.observe(j, v))?;
    Ok(tr.finish(grid))
}

/// Suprema of paths `0..n` of the noise keyed by `seed`.
pub fn ensemble_sup(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    n: usize,
    seed: u64,
    region: &Region,
) -> Result<Vec<SupSample>> {
    if n == 0 {
        return Err(Error::InsufficientData("at least one path is needed".into()));
    }
    let bx = region.index_box(grid)?;
    map_paths(n, |p| sup_of_path(model, grid, scheme, seed, p, bx))
}

/// Law of the grid supremum on two grids, compared by the two-sample KS statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub coarse: GridSpec,
    pub fine: GridSpec,
    pub n_paths: usize,
    pub coarse_mean: f64,
    pub fine_mean: f64,
    pub ks_statistic: f64,
}

pub fn sup_refinement(
    model: &ModelSpec,
    coarse: &GridSpec,
    fine: &GridSpec,
    scheme: SchemeConfig,
    n: usize,
    seed: u64,
    region: &Region,
) -> Result<RefinementReport> {
    let a: Vec<f64> = ensemble_sup(model, coarse, scheme, n, seed, region)?.iter().map(|s| s.sup_value).collect();
    let b: Vec<f64> = ensemble_sup(model, fine, scheme, n, seed, region)?.iter().map(|s| s.sup_value).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(RefinementReport {
        coarse: *coarse,
        fine: *fine,
        n_paths: n,
        coarse_mean: mean(&a),
        fine_mean: mean(&b),
        ks_statistic: ks_two_sample(&a, &b),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Bandwidth {
    /// `0.9 · min(sd, IQR/1.34) · n^{−1/5}`
    Silverman,
    Fixed { h: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub points: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub n_samples: usize,
    /// trapezoidal integral over `points`
    pub integral: f64,
}

/// Gaussian kernel density estimate on a grid spaced at most a quarter bandwidth
/// and extending six bandwidths past the data.
pub fn kde(samples: &[f64], bandwidth: Bandwidth) -> Result<DensityEstimate> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::InsufficientData(format!("kde needs at least 100 samples, got {n}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return domain("samples must be finite");
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let h = match bandwidth {
        Bandwidth::Fixed { h } => h,
        Bandwidth::Silverman => {
            let mean = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            let iqr = quantile_sorted(&xs, 0.75) - quantile_sorted(&xs, 0.25);
            let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
            0.9 * spread * (n as f64).powf(-0.2)
        }
    };
    if !(h > 0.0 && h.is_finite()) {
        return domain(format!("bandwidth must be positive, got {h} (degenerate sample?)"));
    }
    let lo = xs[0] - 6.0 * h;
    let hi = xs[n - 1] + 6.0 * h;
    let m = (((hi - lo) / (0.25 * h)).ceil() as usize + 1).max(512);
    let step = (hi - lo) / (m - 1) as f64;
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let cut = 9.0 * h;
    let mut points = Vec::with_capacity(m);
    let mut density = Vec::with_capacity(m);
    let mut start = 0usize;
    for k in 0..m {
        let x = lo + k as f64 * step;
        while start < n && xs[start] < x - cut {
            start += 1;
        }
        let mut s = 0.0;
        for &v in xs[start..].iter().take_while(|&&v| v <= x + cut) {
            let z = (x - v) / h;
            s += (-0.5 * z * z).exp();
        }
        points.push(x);
        density.push(s * norm);
    }
    let integral = step * (density.iter().sum::<f64>() - 0.5 * (density[0] + density[m - 1]));
    Ok(DensityEstimate {
        points,
        density,
        bandwidth: h,
        n_samples: n,
        integral,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomWindow {
    pub delta: f64,
    /// `sup_v F_N(v+δ) − F_N(v)`
    pub max_mass: f64,
    /// left end of a maximising window
    pub at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomScan {
    pub n_samples: usize,
    pub windows: Vec<AtomWindow>,
    /// `mass(δ_k) / mass(δ_{k+1})` for consecutive widths
    pub ratios: Vec<f64>,
}

/// Largest empirical mass in a window of each width. The supremum over all
/// window positions is attained with a sample at the left end, so it is exact.
pub fn atom_scan(samples: &[f64], deltas: &[f64]) -> Result<AtomScan> {
    let n = samples.len();
    if n < 1000 {
        return Err(Error::InsufficientData(format!("atom_scan needs at least 1000 samples, got {n}")));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let mut windows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        if !(delta > 0.0) {
            return domain(format!("window width must be positive, got {delta}"));
        }
        let (mut best, mut at, mut r) = (0usize, xs[0], 0usize);
        for l in 0..n {
            while r < n && xs[r] <= xs[l] + delta {
                r += 1;
            }
            if r - l > best {
                best = r - l;
                at = xs[l];
            }
        }
        windows.push(AtomWindow {
            delta,
            max_mass: best as f64 / n as f64,
            at,
        });
    }
    let ratios = windows.windows(2).map(|w| w[0].max_mass / w[1].max_mass).collect();
    Ok(AtomScan {
        n_samples: n,
        windows,
        ratios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Time,
    Space,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Axis> {
        match s {
            "time" => Ok(Axis::Time),
            "space" => Ok(Axis::Space),
            _ => domain(format!("unknown axis `{s}`")),
        }
    }
}

/// Minimal `R²` below which a regression is flagged.
pub const MIN_R2: f64 = 0.98;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub axis: Axis,
    /// lags in physical units
    pub lags: Vec<f64>,
    pub median_increments: Vec<f64>,
    pub n_series: usize,
    pub slope: f64,
    pub stderr: f64,
    pub r2: f64,
    /// `r2 < MIN_R2`
    pub flagged: bool,
}

fn holder_fit(axis: Axis, lags: Vec<f64>, meds: Vec<f64>, n_series: usize) -> Result<HolderReport> {
    if let Some(k) = meds.iter().position(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::UndefinedExponent(format!(
            "median increment at lag {} is {}",
            lags[k], meds[k]
        )));
    }
    let fit: LinearFit =
        loglog_fit(&lags, &meds).ok_or_else(|| Error::UndefinedExponent("at least two distinct lags are needed".into()))?;
    Ok(HolderReport {
        axis,
        lags,
        median_increments: meds,
        n_series,
        slope: fit.slope,
        stderr: fit.stderr,
        r2: fit.r2,
        flagged: fit.r2 < MIN_R2,
    })
}

/// Regression of `ln median |f(a+ℓ) − f(a)|` on `ln ℓ`, pooling the increments
/// of every series. Lags are in index units; `spacing` converts them.
pub fn holder_exponent(series: &[Vec<f64>], spacing: f64, lags: &[usize], axis: Axis) -> Result<HolderReport> {
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    if series.is_empty() || lags.is_empty() || lags.contains(&0) {
        return domain("need at least one series and positive lags");
    }
    if let Some(s) = series.iter().find(|s| s.len() < 2 * max_lag) {
        return domain(format!("series of length {} is shorter than twice the largest lag {max_lag}", s.len()));
    }
    let mut meds = Vec::with_capacity(lags.len());
    for &l in lags {
        let inc: Vec<f64> = series
            .iter()
            .flat_map(|s| s.windows(l + 1).map(move |w| (w[l] - w[0]).abs()))
            .collect();
        meds.push(median(&inc));
    }
    holder_fit(axis, lags.iter().map(|&l| l as f64 * spacing).collect(), meds, series.len())
}

/// Dyadic index lags `2^lo, …, 2^hi`.
pub fn dyadic_lags(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|k| 1usize << k).collect()
}

/// [`holder_exponent`] over an ensemble: the time series at vertex `x = at`
/// restricted to `t ≥ t_min`, or the spatial row at time `t = at`.
#[allow(clippy::too_many_arguments)]
pub fn holder_ensemble(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    n: usize,
    seed: u64,
    axis: Axis,
    at: f64,
    t_min: f64,
    lags: &[usize],
) -> Result<HolderReport> {
    let (j_at, i_at) = crate::solver::probe_indices(grid, at, at);
    let j_min = (t_min / grid.dt()).ceil() as usize;
    let series = map_paths(n, |p| {
        let noise = noise::sample(seed, p, *grid);
        let mut s = Vec::new();
        simulate_observed(model, grid, scheme, &noise, |j, v, _| match axis {
            Axis::Time if j >= j_min => s.push(v[i_at]),
            Axis::Space if j == j_at => s.extend_from_slice(v),
            _ => {}
        })?;
        Ok(s)
    })?;
    let spacing = match axis {
        Axis::Time => grid.dt(),
        Axis::Space => grid.dx(),
    };
    holder_exponent(&series, spacing, lags, axis)
}

/// Regression of the median `L²(ds dy)` distance between derivative fields at
/// `base` and at `base` shifted by each lag along `axis` (index units).
#[allow(clippy::too_many_arguments)]
pub fn holder_exponent_malliavin(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    n: usize,
    seed: u64,
    axis: Axis,
    base: (usize, usize),
    lags: &[usize],
) -> Result<HolderReport> {
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    if lags.is_empty() || lags.contains(&0) {
        return domain("lags must be positive");
    }
    let reach = match axis {
        Axis::Time => base.0 + max_lag <= grid.nt,
        Axis::Space => base.1 + max_lag <= grid.nx,
    };
    if !reach || base.0 == 0 {
        return domain(format!("base {base:?} with lag {max_lag} leaves the grid"));
    }
    let dists = map_paths(n, |p| {
        let noise = noise::sample(seed, p, *grid);
        let path = simulate_path(model, grid, scheme, &noise)?;
        let f0 = derivative_field(&path, &noise, model, base)?;
        lags.iter()
            .map(|&l| {
                let target = match axis {
                    Axis::Time => (base.0 + l, base.1),
                    Axis::Space => (base.0, base.1 + l),
                };
                derivative_field(&path, &noise, model, target)?.l2_distance(&f0)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let meds: Vec<f64> = (0..lags.len())
        .map(|k| median(&dists.iter().map(|d| d[k]).collect::<Vec<_>>()))
        .collect();
    let spacing = match axis {
        Axis::Time => grid.dt(),
        Axis::Space => grid.dx(),
    };
    holder_fit(axis, lags.iter().map(|&l| l as f64 * spacing).collect(), meds, n)
}

/// Gauss–Legendre nodes used by [`r1_scaling`].
pub const R1_NODES: usize = 48;

/// `R₁(ε) = ∫₀^ε ‖G_r(x,·)‖²_{L²} dr`, integrated in `r = ε v⁴`, which makes the
/// integrand smooth for both kernel orders.
pub fn r1_value(kernel: &KernelId, x: f64, eps: f64, nodes: usize) -> f64 {
    let rule = gauss_legendre(nodes);
    gauss_legendre_integrate(
        |v| {
            let r = eps * v.powi(4);
            if r <= 0.0 {
                return 0.0;
            }
            4.0 * eps * v.powi(3) * eval_fast(kernel, 2.0 * r, x, x)
        },
        0.0,
        1.0,
        &rule,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub eps: Vec<f64>,
    pub values: Vec<f64>,
    pub slope: f64,
    pub stderr: f64,
    pub r2: f64,
}

/// Log–log slope of [`r1_value`] over `eps`; every `ε` must be at most `t`.
pub fn r1_scaling(kernel: &KernelId, t: f64, x: f64, eps: &[f64]) -> Result<ScalingFit> {
    r1_scaling_with(kernel, t, x, eps, R1_NODES)
}

pub fn r1_scaling_with(kernel: &KernelId, t: f64, x: f64, eps: &[f64], nodes: usize) -> Result<ScalingFit> {
    if !(0.0..=1.0).contains(&x) || (kernel.is_sine() && (x <= 0.0 || x >= 1.0)) {
        return domain(format!("x = {x} must be interior"));
    }
    if let Some(e) = eps.iter().find(|&&e| !(e > 0.0 && e <= t)) {
        return domain(format!("eps = {e} must lie in (0, t = {t}]"));
    }
    let values: Vec<f64> = eps.iter().map(|&e| r1_value(kernel, x, e, nodes)).collect();
    let fit = loglog_fit(eps, &values).ok_or_else(|| Error::UndefinedExponent("need two distinct eps".into()))?;
    Ok(ScalingFit {
        eps: eps.to_vec(),
        values,
        slope: fit.slope,
        stderr: fit.stderr,
        r2: fit.r2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub y: f64,
    pub probability: Proportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallBallReport {
    pub target: (usize, usize),
    pub t: f64,
    pub x: f64,
    pub n_paths: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub rows: Vec<TailRow>,
    /// `γ(target)` per path, in path order
    #[serde(skip)]
    pub gammas: Vec<f64>,
}

/// Empirical `P(γ(t,x) ≤ y)` with Wilson intervals.
#[allow(clippy::too_many_arguments)]
pub fn smallball_gamma(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    target: (usize, usize),
    n: usize,
    seed: u64,
    ys: &[f64],
) -> Result<SmallBallReport> {
    if target.0 == 0 || target.0 > grid.nt || target.1 > grid.nx {
        return domain(format!("target {target:?} must lie on the grid after t = 0"));
    }
    if n == 0 {
        return Err(Error::InsufficientData("at least one path is needed".into()));
    }
    let gammas = map_paths(n, |p| {
        let noise = noise::sample(seed, p, *grid);
        let path = simulate_path(model, grid, scheme, &noise)?;
        Ok(gamma_at(&path, &noise, model, target)?.value)
    })?;
    Ok(tail_report(grid, target, gammas, ys))
}

/// Tail table of given `γ` samples at thresholds `ys`.
pub fn tail_report(grid: &GridSpec, target: (usize, usize), gammas: Vec<f64>, ys: &[f64]) -> SmallBallReport {
    let mut sorted = gammas.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rows = ys
        .iter()
        .map(|&y| TailRow {
            y,
            probability: wilson(sorted.partition_point(|&g| g <= y) as u64, n as u64),
        })
        .collect();
    SmallBallReport {
        target,
        t: grid.time(target.0),
        x: grid.x(target.1),
        n_paths: n,
        min: sorted[0],
        median: quantile_sorted(&sorted, 0.5),
        max: sorted[n - 1],
        rows,
        gammas,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EscapeMode {
    /// `u(t, x*) > u₀(x*)`
    FixedStar,
    /// `u(t, t^θ) > 0`
    MovingPoint { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeRow {
    pub t: f64,
    pub j: usize,
    pub x: f64,
    pub exceed: Proportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeReport {
    pub mode: EscapeMode,
    pub n_paths: usize,
    pub x_star: f64,
    /// `u₀(x*)` or `0`
    pub level: f64,
    pub rows: Vec<EscapeRow>,
    /// paths whose supremum over `t > 0` exceeds `level`
    pub sup_exceed: Proportion,
    /// smallest per-probe estimate
    pub uniform_lower: f64,
    /// smallest per-probe Wilson lower limit
    pub uniform_lower_ci: f64,
}

fn interpolate(row: &[f64], x: f64) -> f64 {
    let n = row.len() - 1;
    let s = (x * n as f64).clamp(0.0, n as f64);
    let i = (s.floor() as usize).min(n - 1);
    let w = s - i as f64;
    (1.0 - w) * row[i] + w * row[i + 1]
}

/// Fraction of paths that rise above the initial maximum at fixed probe times.
pub fn escape_probability(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    n: usize,
    seed: u64,
    probe_times: &[f64],
    mode: EscapeMode,
) -> Result<EscapeReport> {
    if n == 0 || probe_times.is_empty() {
        return Err(Error::InsufficientData("need paths and probe times".into()));
    }
    let x_star = model.u0.x_star;
    let level = match mode {
        EscapeMode::FixedStar => model.u0.eval(x_star),
        EscapeMode::MovingPoint { theta } => {
            let lo = 1.0 / (4.0 * model.u0.alpha);
            if !(theta > lo && theta < 0.5) {
                return domain(format!("theta = {theta} outside ({lo}, 1/2)"));
            }
            0.0
        }
    };
    let probes: Vec<(usize, f64)> = probe_times
        .iter()
        .map(|&t| {
            let j = ((t / grid.dt()).round() as usize).clamp(1, grid.nt);
            let tj = grid.time(j);
            let x = match mode {
                EscapeMode::FixedStar => x_star,
                EscapeMode::MovingPoint { theta } => tj.powf(theta),
            };
            (j, x)
        })
        .collect();
    let hits = map_paths(n, |p| {
        let noise = noise::sample(seed, p, *grid);
        let mut above = vec![false; probes.len()];
        let mut sup = f64::NEG_INFINITY;
        simulate_observed(model, grid, scheme, &noise, |j, v, _| {
            if j == 0 {
                return;
            }
            sup = v.iter().fold(sup, |a, &b| a.max(b));
            for (k, &(jj, x)) in probes.iter().enumerate() {
                if jj == j {
                    above[k] = interpolate(v, x) > level;
                }
            }
        })?;
        Ok((above, sup > level))
    })?;
    let rows: Vec<EscapeRow> = probes
        .iter()
        .enumerate()
        .map(|(k, &(j, x))| EscapeRow {
            t: grid.time(j),
            j,
            x,
            exceed: wilson(hits.iter().filter(|h| h.0[k]).count() as u64, n as u64),
        })
        .collect();
    let uniform_lower = rows.iter().map(|r| r.exceed.estimate).fold(f64::INFINITY, f64::min);
    let uniform_lower_ci = rows.iter().map(|r| r.exceed.lower).fold(f64::INFINITY, f64::min);
    Ok(EscapeReport {
        mode,
        n_paths: n,
        x_star,
        level,
        rows,
        sup_exceed: wilson(hits.iter().filter(|h| h.1).count() as u64, n as u64),
        uniform_lower,
        uniform_lower_ci,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgmaxGammaReport {
    pub region: Region,
    pub n_paths: usize,
    /// `(q, value)` of the per-path minimum of `γ` over the argmax set
    pub quantiles: Vec<(f64, f64)>,
    pub ensemble_min: f64,
    pub median: f64,
    /// `ensemble_min / median`
    pub relative_margin: f64,
    pub largest_argmax_set: usize,
    #[serde(skip)]
    pub per_path: Vec<f64>,
}

/// For each path, `γ` at every argmax point of `region`; the minimum is recorded.
pub fn argmax_gamma(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    n: usize,
    seed: u64,
    region: &Region,
) -> Result<ArgmaxGammaReport> {
    if n == 0 {
        return Err(Error::InsufficientData("at least one path is needed".into()));
    }
    region.index_box(grid)?;
    let per = map_paths(n, |p| {
        let noise = noise::sample(seed, p, *grid);
        let path = simulate_path(model, grid, scheme, &noise)?;
        let sup = path_sup(&path, region, None)?;
        let mut g = f64::INFINITY;
        for pt in &sup.argmax_set {
            g = g.min(gamma_at(&path, &noise, model, (pt.j, pt.i))?.value);
        }
        Ok((g, sup.argmax_set.len()))
    })?;
    let per_path: Vec<f64> = per.iter().map(|p| p.0).collect();
    let mut sorted = per_path.clone();
    sorted.sort_by(f64::total_cmp);
    let quantiles = [0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0]
        .iter()
        .map(|&q| (q, quantile_sorted(&sorted, q)))
        .collect();
    let ensemble_min = sorted[0];
    let med = quantile_sorted(&sorted, 0.5);
    Ok(ArgmaxGammaReport {
        region: *region,
        n_paths: n,
        quantiles,
        ensemble_min,
        median: med,
        relative_margin: if med > 0.0 { ensemble_min / med } else { 0.0 },
        largest_argmax_set: per.iter().map(|p| p.1).max().unwrap_or(0),
        per_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{linear_exact_variance, SeriesTruncation};
    use crate::solver::{Coefficient, InitialConditionSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr_free::*;

    const D: KernelId = KernelId::DIRICHLET;

    /// Box–Muller normals, enough for the known-law oracles here.
    mod rand_distr_free {
        use rand::Rng;
        pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let u: f64 = rng.gen::<f64>().max(1e-300);
                    let v: f64 = rng.gen();
                    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
                })
                .collect()
        }
    }

    fn constant_path(c: f64) -> FieldPath {
        let grid = GridSpec::new(8, 16, 1.0).unwrap();
        FieldPath {
            grid,
            scheme: Default::default(),
            values: vec![c; 17 * 9],
            cells: vec![c; 17 * 8],
            model_fingerprint: String::new(),
            noise_fingerprint: String::new(),
        }
    }

    #[test]
    fn constant_field_ties_everywhere() {
        let p = constant_path(0.3);
        let s = path_sup(&p, &Region::Full, None).unwrap();
        assert_eq!(s.sup_value, 0.3);
        assert_eq!(s.argmax_set.len(), 17 * 9);
        let s = path_sup(&p, &Region::SDelta { delta: 0.25 }, None).unwrap();
        // t ∈ [0.25, 1] → 13 rows; x ∈ [0.25, 0.75] → 5 columns
        assert_eq!(s.argmax_set.len(), 13 * 5);
        assert!(path_sup(&p, &Region::Compact { t_lo: 0.5, t_hi: 0.4, x_lo: 0.0, x_hi: 1.0 }, None).is_err());
    }

    #[test]
    fn decaying_eigenmode_peaks_at_start() {
        let model = ModelSpec::deterministic(D, InitialConditionSpec::eigenmode(&D, 1).unwrap());
        let grid = GridSpec::new(32, 256, 1.0).unwrap();
        let s = &ensemble_sup(&model, &grid, SchemeConfig::spectral(), 1, 0, &Region::Full).unwrap()[0];
        assert_eq!(s.argmax_set.len(), 1);
        let pt = s.argmax_set[0];
        assert_eq!((pt.j, pt.i), (0, 16));
        assert!((s.sup_value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ensemble_sup_reproduces_path_sup() {
        let model = ModelSpec::default_nonlinear(D);
        let grid = GridSpec::new(16, 128, 1.0).unwrap();
        let sc = SchemeConfig::spectral();
        let e = ensemble_sup(&model, &grid, sc, 3, 9, &Region::Full).unwrap();
        for (p, s) in e.iter().enumerate() {
            let noise = noise::sample(9, p as u64, grid);
            let path = simulate_path(&model, &grid, sc, &noise).unwrap();
            assert_eq!(&path_sup(&path, &Region::Full, None).unwrap(), s);
            let inner = path_sup(&path, &Region::SDelta { delta: 0.1 }, None).unwrap();
            assert!(s.sup_value >= inner.sup_value);
        }
        let det = ModelSpec::deterministic(D, InitialConditionSpec::eigenmode(&D, 1).unwrap());
        let e = ensemble_sup(&det, &grid, sc, 4, 9, &Region::Full).unwrap();
        assert!(e.iter().all(|s| s.sup_value == e[0].sup_value));
    }

    #[test]
    fn linear_sup_is_positive_on_average() {
        let model = ModelSpec::linear(D);
        let grid = GridSpec::new(16, 256, 1.0).unwrap();
        let e = ensemble_sup(&model, &grid, SchemeConfig::spectral(), 200, 4, &Region::Full).unwrap();
        let m = e.iter().map(|s| s.sup_value).sum::<f64>() / 200.0;
        assert!(m > 0.1, "{m}");
        for s in &e {
            for p in &s.argmax_set {
                assert!(p.value >= s.sup_value - s.tie_tolerance);
            }
        }
    }

    #[test]
    fn kde_of_normals() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let xs = normals(&mut rng, 100_000);
        let d = kde(&xs, Bandwidth::Silverman).unwrap();
        assert!((d.integral - 1.0).abs() < 1e-3);
        let worst = d
            .points
            .iter()
            .zip(&d.density)
            .map(|(x, f)| (f - (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.02, "{worst}");
        assert!(d.density.iter().all(|&v| v >= 0.0));
        assert!(kde(&xs[..50], Bandwidth::Silverman).is_err());
    }

    #[test]
    fn kde_is_location_scale_equivariant() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let xs = normals(&mut rng, 2000);
        let a = kde(&xs, Bandwidth::Silverman).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        let b = kde(&ys, Bandwidth::Silverman).unwrap();
        assert!((b.bandwidth / a.bandwidth - 3.0).abs() < 1e-12);
        // f_Y(3x + 1) = f_X(x) / 3
        for k in (0..a.points.len()).step_by(97) {
            let y = 3.0 * a.points[k] + 1.0;
            let fy: f64 = ys.iter().map(|v| (-0.5 * ((y - v) / b.bandwidth).powi(2)).exp()).sum::<f64>()
                / (ys.len() as f64 * b.bandwidth * (2.0 * std::f64::consts::PI).sqrt());
            assert!((fy - a.density[k] / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn atom_scan_oracles() {
        let same = vec![0.7; 1000];
        let r = atom_scan(&same, &[0.04, 0.02, 0.01]).unwrap();
        assert!(r.windows.iter().all(|w| w.max_mass == 1.0));
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let u: Vec<f64> = (0..100_000).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
        let r = atom_scan(&u, &[0.04, 0.02, 0.01]).unwrap();
        let m = r.windows[2].max_mass;
        // the maximum of ~100 nearly independent windows sits a few binomial sd above 0.01
        assert!(m > 0.01 && m < 0.0115, "{m}");
        assert!(r.ratios.iter().all(|&q| (1.7..=2.3).contains(&q)), "{:?}", r.ratios);
        assert!(atom_scan(&u[..999], &[0.1]).is_err());
    }

    #[test]
    fn holder_of_smooth_and_rough_series() {
        let line: Vec<f64> = (0..1000).map(|i| (i as f64 * 1e-3).sin()).collect();
        let r = holder_exponent(&[line], 1e-3, &dyadic_lags(0, 5), Axis::Time).unwrap();
        assert!((r.slope - 1.0).abs() < 0.01 && !r.flagged);
        // Brownian motion: slope 1/2
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let steps = normals(&mut rng, 20_000);
        let bm: Vec<f64> = steps.iter().scan(0.0, |s, z| {
            *s += z;
            Some(*s)
        }).collect();
        let r = holder_exponent(&[bm], 1.0, &dyadic_lags(0, 6), Axis::Time).unwrap();
        assert!((r.slope - 0.5).abs() < 0.03, "{}", r.slope);
        assert!(matches!(
            holder_exponent(&[vec![1.0; 100]], 1.0, &[1, 2], Axis::Time),
            Err(Error::UndefinedExponent(_))
        ));
        assert!(holder_exponent(&[vec![1.0; 10]], 1.0, &[8], Axis::Time).is_err());
    }

    #[test]
    fn deterministic_path_time_regularity() {
        let model = ModelSpec::deterministic(D, InitialConditionSpec::eigenmode(&D, 1).unwrap());
        let grid = GridSpec::new(32, 1024, 1.0).unwrap();
        let r = holder_ensemble(&model, &grid, SchemeConfig::spectral(), 1, 0, Axis::Time, 0.5, 0.0, &dyadic_lags(2, 6)).unwrap();
        assert!((0.9..=1.1).contains(&r.slope), "{}", r.slope);
    }

    #[test]
    fn r1_rates() {
        let eps = crate::kernels::logspace(1e-4, 1e-2, 9);
        let a = r1_scaling(&D, 0.5, 0.5, &eps).unwrap();
        assert!((a.slope - 0.5).abs() < 0.03, "{}", a.slope);
        let b = r1_scaling_with(&D, 0.5, 0.5, &eps, 2 * R1_NODES).unwrap();
        assert!((a.slope - b.slope).abs() < 1e-3);
        let h = KernelId::fourth_order(1.0).unwrap();
        let eps4 = crate::kernels::logspace(1e-5, 1e-3, 9);
        let c = r1_scaling(&h, 0.5, 0.5, &eps4).unwrap();
        assert!((c.slope - 0.75).abs() < 0.03, "{}", c.slope);
        // R₁(ε) is the Itô variance of the linear equation at time ε
        for (&e, &v) in eps.iter().zip(&a.values) {
            let exact = linear_exact_variance(&D, e, 0.5, SeriesTruncation::AdaptiveTail(1e-14)).unwrap();
            assert!((v / exact - 1.0).abs() < 1e-10, "{v} {exact}");
        }
        assert!(r1_scaling(&D, 1e-3, 0.5, &[1e-2]).is_err());
        assert!(r1_scaling(&D, 1.0, 0.0, &[1e-2]).is_err());
    }

    #[test]
    fn smallball_linear_is_a_step() {
        let model = ModelSpec::linear(D);
        let grid = GridSpec::new(16, 256, 1.0).unwrap();
        let target = (128, 8);
        let oracle = linear_exact_variance(&D, 0.5, 0.5, SeriesTruncation::FixedModes(15)).unwrap();
        let r = smallball_gamma(&model, &grid, SchemeConfig::spectral(), target, 20, 1, &[0.9 * oracle, 1.1 * oracle]).unwrap();
        assert!((r.max - r.min).abs() < 1e-14);
        assert!((r.min / oracle - 1.0).abs() < 1e-10);
        assert_eq!(r.rows[0].probability.estimate, 0.0);
        assert_eq!(r.rows[1].probability.estimate, 1.0);
    }

    #[test]
    fn smallball_tail_is_monotone() {
        let model = ModelSpec::default_nonlinear(D);
        let grid = GridSpec::new(16, 256, 1.0).unwrap();
        let r0 = smallball_gamma(&model, &grid, SchemeConfig::spectral(), (128, 8), 64, 1, &[]).unwrap();
        let ys = [0.5 * r0.min, 0.5 * r0.median, r0.median];
        let r = tail_report(&grid, (128, 8), r0.gammas.clone(), &ys);
        assert_eq!(r.rows[0].probability.estimate, 0.0);
        assert!(r.rows[1].probability.estimate < r.rows[2].probability.estimate);
        for row in &r.rows {
            let p = row.probability;
            assert!(0.0 <= p.lower && p.lower <= p.estimate && p.estimate <= p.upper && p.upper <= 1.0);
        }
    }

    #[test]
    fn escape_without_noise_never_happens() {
        let model = ModelSpec::deterministic(D, InitialConditionSpec::eigenmode(&D, 1).unwrap());
        let grid = GridSpec::new(16, 256, 1.0).unwrap();
        let r = escape_probability(&model, &grid, SchemeConfig::spectral(), 3, 0, &[0.01, 0.1], EscapeMode::FixedStar).unwrap();
        assert!(r.rows.iter().all(|row| row.exceed.successes == 0));
        assert_eq!(r.sup_exceed.successes, 0);
        let bad = escape_probability(&model, &grid, SchemeConfig::spectral(), 3, 0, &[0.01], EscapeMode::MovingPoint { theta: 0.1 });
        assert!(bad.is_err());
    }

    #[test]
    fn argmax_gamma_on_initial_row_is_zero() {
        let model = ModelSpec::default_nonlinear(D);
        let grid = GridSpec::new(16, 128, 1.0).unwrap();
        let region = Region::Compact { t_lo: 0.0, t_hi: 0.0, x_lo: 0.0, x_hi: 1.0 };
        let r = argmax_gamma(&model, &grid, SchemeConfig::spectral(), 4, 2, &region).unwrap();
        assert!(r.per_path.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn argmax_gamma_linear_oracle() {
        let mut model = ModelSpec::linear(D);
        model.sigma = Coefficient::Constant(1.0);
        let grid = GridSpec::new(16, 256, 1.0).unwrap();
        let region = Region::SDelta { delta: 0.25 };
        let r = argmax_gamma(&model, &grid, SchemeConfig::spectral(), 8, 2, &region).unwrap();
        let mut lo = f64::INFINITY;
        for j in 64..=256 {
            for i in 4..=12 {
                lo = lo.min(linear_exact_variance(&D, grid.time(j), grid.x(i), SeriesTruncation::FixedModes(15)).unwrap());
            }
        }
        assert!(r.ensemble_min >= lo * (1.0 - 1e-10) && lo > 0.0);
    }

    #[test]
    fn region_parsing() {
        for s in ["full", "sdelta:0.1", "ldelta:0.2", "compact:0.1,0.5,0.2,0.8"] {
            assert_eq!(Region::parse(s).unwrap().label(), s);
        }
        assert!(Region::parse("sdelta").is_err());
        assert!(Region::parse("ball:1").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sup_is_monotone_in_the_region(seed in 0u64..1000, d in 0.05f64..0.45) {
            let model = ModelSpec::default_nonlinear(D);
            let grid = GridSpec::new(8, 32, 1.0).unwrap();
            let noise = noise::sample(seed, 0, grid);
            let path = simulate_path(&model, &grid, SchemeConfig::spectral(), &noise).unwrap();
            let big = path_sup(&path, &Region::LDelta { delta: d / 2.0 }, None).unwrap();
            let small = path_sup(&path, &Region::SDelta { delta: d }, None).unwrap();
            prop_assert!(big.sup_value >= small.sup_value);
        }

        #[test]
        fn kde_is_nonnegative_and_normalised(xs in proptest::collection::vec(-5.0f64..5.0, 100..300)) {
            if let Ok(d) = kde(&xs, Bandwidth::Silverman) {
                prop_assert!(d.density.iter().all(|&v| v >= 0.0));
                prop_assert!((d.integral - 1.0).abs() < 1e-3);
            }
        }
    }
}
