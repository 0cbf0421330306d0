//! One function per experiment kind. Each writes its outputs and returns the
//! checks that decide the exit code.

use crate::config::{Config, ConfigError};
use crate::model;
use crate::output::{Check, OutputDir};
use crate::plot::{Plot, Series};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use supdens::analysis::{self, Axis, Bandwidth, EscapeMode, HolderReport, Region};
use supdens::kernels::{
    adaptive_modes, eval_images, eval_spectral, linear_exact_variance, logspace, verify_bound_multi,
    verify_bound_refined, BoundId, BoundReport, KernelId, SeriesTruncation,
};
use supdens::malliavin::{bump_check, derivative_by_tangent, derivative_field, envelope_report, BumpReport};
use supdens::noise::{self, GridSpec};
use supdens::solver::{convergence_probe, probe_indices, simulate_path, InitialKind, ModelSpec, SchemeConfig};
use supdens::stats::{loglog_fit, mean_var};

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.0)
    }
}

impl From<supdens::Error> for RunError {
    fn from(e: supdens::Error) -> Self {
        RunError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Runtime(e.to_string())
    }
}

pub type Outcome = Result<Vec<Check>, RunError>;

pub struct Ctx<'a> {
    pub cfg: &'a Config,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub scheme: SchemeConfig,
    pub n: usize,
    pub seed: u64,
    pub plots: bool,
    pub out: OutputDir,
}

impl Ctx<'_> {
    fn svg(&mut self, name: &str, plot: impl FnOnce() -> Plot) -> std::io::Result<()> {
        if self.plots {
            self.out.svg(name, &plot())?;
        }
        Ok(())
    }

    fn region(&self, key: &str) -> Result<Region, RunError> {
        if self.cfg.is_auto(key) {
            Ok(Region::interior(&self.model.kernel, 0.1))
        } else {
            Region::parse(self.cfg.get(key)).map_err(|e| RunError::Config(e.to_string()))
        }
    }
}

pub fn dispatch(ctx: &mut Ctx) -> Outcome {
    match ctx.cfg.get("experiment") {
        "kernels-verify" => kernels_verify(ctx),
        "simulate" => simulate(ctx),
        "malliavin-check" => malliavin_check(ctx),
        "density" => density(ctx),
        "holder" => holder(ctx),
        "smallball" => smallball(ctx),
        "escape" => escape(ctx),
        "argmax-gamma" => argmax_gamma(ctx),
        other => Err(RunError::Config(format!("experiment `{other}` has no runner"))),
    }
}

fn list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).collect()
}

/// Expected log–log slope of a bound's left-hand side, where one is known.
fn expected_slope(b: BoundId) -> Option<f64> {
    match b {
        BoundId::PL2 | BoundId::GL2 | BoundId::L2Lower => Some(-0.5),
        BoundId::HLinf => Some(-0.25),
        BoundId::HL2 => Some(-0.125),
        _ => None,
    }
}

#[derive(Serialize)]
struct Duality {
    kernel: String,
    times: Vec<f64>,
    points: usize,
    max_abs_difference: f64,
    at: (f64, f64, f64),
}

/// Series against images on a `33×33` lattice.
pub fn duality(kernel: &KernelId, times: &[f64]) -> Result<(f64, (f64, f64, f64)), supdens::Error> {
    let mut worst = (0.0, (0.0, 0.0, 0.0));
    for &t in times {
        let modes = adaptive_modes(kernel, t, 1e-15);
        for a in 0..=32 {
            for b in 0..=32 {
                let (x, y) = (a as f64 / 32.0, b as f64 / 32.0);
                let s = eval_spectral(kernel, t, x, y, SeriesTruncation::FixedModes(modes))?;
                let d = (s - eval_images(kernel, t, x, y, 8)?).abs();
                if d > worst.0 {
                    worst = (d, (t, x, y));
                }
            }
        }
    }
    Ok(worst)
}

fn kernels_verify(ctx: &mut Ctx) -> Outcome {
    let cfg = ctx.cfg;
    let rho = cfg.f64("model.rho")?;
    let second: Vec<KernelId> = list(cfg.get("kernels.second_order"))
        .into_iter()
        .map(|k| model::parse_kernel(k, rho))
        .collect::<Result<_, _>>()?;
    if second.iter().any(|k| !k.is_second_order()) {
        return Err(RunError::Config("kernels.second_order lists a fourth-order kernel".into()));
    }
    let bounds: Vec<BoundId> = match cfg.get("kernels.bounds") {
        "all" => BoundId::all().to_vec(),
        s => list(s)
            .into_iter()
            .map(|b| BoundId::parse(b).map_err(|e| RunError::Config(e.to_string())))
            .collect::<Result<_, _>>()?,
    };
    let tol = cfg.f64("kernels.tolerance")?;
    let mut checks = Vec::new();
    if cfg.bool("kernels.duality") {
        let dtol = cfg.f64("kernels.duality_tolerance")?;
        let times = logspace(1e-4, 1.0, 9);
        let mut rows = Vec::new();
        for k in &second {
            let (d, at) = duality(k, &times)?;
            checks.push(Check::at_most(
                format!("duality {}", k.label()),
                "series and image representations agree",
                d,
                dtol,
            ));
            rows.push(Duality {
                kernel: k.label(),
                times: times.clone(),
                points: 33,
                max_abs_difference: d,
                at,
            });
        }
        ctx.out.json("duality.json", &rows)?;
    }
    let fourth = KernelId::fourth_order(rho)?;
    for b in bounds {
        let kernels = if b.is_fourth_order() { vec![fourth] } else { second.clone() };
        let mut reports: Vec<BoundReport> = Vec::new();
        for k in kernels {
            let lattice = supdens::kernels::default_lattice(b, k);
            let exps = b.default_exponents();
            let rs = if cfg.bool("kernels.refine") {
                verify_bound_refined(b, &lattice, &exps)?
            } else {
                verify_bound_multi(b, &lattice, &exps)?
            };
            for r in &rs {
                let tag = match r.exponent {
                    Some(e) => format!("{} {} exponent {e}", b.name(), r.kernel),
                    None => format!("{} {}", b.name(), r.kernel),
                };
                checks.push(Check::new(
                    format!("{tag} ratio"),
                    b.statement(),
                    r.max_ratio.is_finite() && r.max_ratio > 0.0,
                    Some(r.max_ratio),
                    "finite positive maximal ratio",
                ));
                if let Some(f) = &r.refinement {
                    checks.push(Check::at_most(format!("{tag} refinement"), b.statement(), f.relative_delta, tol));
                }
            }
            if let (Some(want), Some(fit)) = (expected_slope(b), rs.first().and_then(|r| r.slope_fit)) {
                checks.push(Check::within(
                    format!("{} {} slope", b.name(), k.label()),
                    b.statement(),
                    fit.exponent,
                    want - 0.02,
                    want + 0.02,
                ));
            }
            reports.extend(rs);
        }
        ctx.out.json(&format!("bound_{}.json", b.name()), &reports)?;
    }
    Ok(checks)
}

#[derive(Serialize)]
struct PathSummary {
    path_index: u64,
    sup: f64,
    argmax_t: f64,
    argmax_x: f64,
    eigenmode_error: Option<f64>,
}

#[derive(Serialize)]
struct ProbeRow {
    t: f64,
    x: f64,
    j: usize,
    i: usize,
    mean: f64,
    mean_se: f64,
    variance: f64,
    variance_se: f64,
    oracle: Option<f64>,
    discrete_oracle: Option<f64>,
}

/// Mode index when the model is the noiseless flow of an eigenmode.
fn eigenmode(m: &ModelSpec) -> Option<usize> {
    if !(m.b.is_zero() && m.sigma.is_zero()) {
        return None;
    }
    match m.u0.kind {
        InitialKind::Sine(k) if m.kernel.is_sine() => Some(k),
        InitialKind::Cosine(k) if !m.kernel.is_sine() => Some(k),
        _ => None,
    }
}

fn simulate(ctx: &mut Ctx) -> Outcome {
    let (grid, m) = (ctx.grid, ctx.model.clone());
    let p = ctx.cfg.u64("simulate.path")?;
    let nz = noise::sample(ctx.seed, p, grid);
    let path = simulate_path(&m, &grid, ctx.scheme, &nz)?;
    let mut checks = Vec::new();
    let snaps = ctx
        .cfg
        .f64_list("simulate.snapshots")?
        .unwrap_or_else(|| vec![0.0, grid.t / 4.0, grid.t / 2.0, grid.t]);
    let js: Vec<usize> = snaps.iter().map(|&t| probe_indices(&grid, t, 0.0).0).collect();
    let rows: Vec<Vec<f64>> = (0..=grid.nx)
        .map(|i| std::iter::once(grid.x(i)).chain(js.iter().map(|&j| path.value(j, i))).collect())
        .collect();
    let names: Vec<String> = std::iter::once("x".to_string())
        .chain(js.iter().map(|&j| format!("u(t={})", grid.time(j))))
        .collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    ctx.out.csv("snapshots.csv", &header, &rows)?;
    ctx.svg("snapshots.svg", || {
        (0..js.len()).fold(Plot::new("profiles", "x", "u"), |pl, k| {
            pl.with(Series::line(&names[k + 1], rows.iter().map(|r| (r[0], r[k + 1])).collect()))
        })
    })?;
    let sup = analysis::path_sup(&path, &Region::Full, None)?;
    let eig_err = eigenmode(&m).map(|k| {
        let rate = m.kernel.lambda(k);
        let mut e = 0.0f64;
        for j in 0..=grid.nt {
            let decay = (-rate * grid.time(j)).exp();
            for i in 0..=grid.nx {
                e = e.max((path.value(j, i) - decay * m.u0.eval(grid.x(i))).abs());
            }
        }
        e
    });
    if let Some(e) = eig_err {
        checks.push(Check::at_most(
            "eigenmode decay",
            "noiseless eigenmode decays as exp(-lambda t)",
            e,
            ctx.cfg.f64("simulate.tolerance")?,
        ));
    }
    let first = sup.argmax_set[0];
    ctx.out.json(
        "path.json",
        &PathSummary {
            path_index: p,
            sup: sup.sup_value,
            argmax_t: first.t,
            argmax_x: first.x,
            eigenmode_error: eig_err,
        },
    )?;
    if ctx.n >= 2 {
        let probes = ctx
            .cfg
            .points("simulate.probes")?
            .unwrap_or_else(|| vec![(0.1 * grid.t, 0.5), (0.5 * grid.t, 0.25), (grid.t, 0.75)]);
        let stats = convergence_probe(&m, &[grid], ctx.n, ctx.seed, &probes, ctx.scheme)?;
        let linear = model::is_linear(&m);
        let s2 = m.sigma.value(0.0).powi(2);
        let sigmas = ctx.cfg.f64("simulate.sigmas")?;
        let mut out = Vec::new();
        for st in stats {
            let (t, x) = (grid.time(st.j), grid.x(st.i));
            let (oracle, discrete) = if linear && st.j > 0 {
                (
                    Some(s2 * linear_exact_variance(&m.kernel, t, x, SeriesTruncation::AdaptiveTail(1e-14))?),
                    Some(s2 * linear_exact_variance(&m.kernel, t, x, SeriesTruncation::FixedModes(grid.nx - 1))?),
                )
            } else {
                (None, None)
            };
            if let Some(o) = oracle {
                let z = (st.variance - o).abs() / st.variance_se;
                checks.push(Check::new(
                    format!("linear variance at t={t} x={x}"),
                    "Ito isometry for the linear equation",
                    z <= sigmas,
                    Some(z),
                    format!("variance {:.6e} +- {:.2e}, oracle {o:.6e}; |z| <= {sigmas}", st.variance, st.variance_se),
                ));
            }
            out.push(ProbeRow {
                t,
                x,
                j: st.j,
                i: st.i,
                mean: st.mean,
                mean_se: st.mean_se,
                variance: st.variance,
                variance_se: st.variance_se,
                oracle,
                discrete_oracle: discrete,
            });
        }
        ctx.out.json("probes.json", &out)?;
    }
    Ok(checks)
}

#[derive(Serialize)]
struct TangentRow {
    source: (usize, usize),
    target: (usize, usize),
    adjoint: f64,
    tangent: f64,
    relative_error: f64,
}

#[derive(Serialize)]
struct MalliavinSummary {
    path_index: u64,
    h: f64,
    tolerance: f64,
    bump: Vec<BumpReport>,
    unreliable_skipped: usize,
    tangent: Vec<TangentRow>,
}

fn random_pair(rng: &mut ChaCha12Rng, grid: &GridSpec, interior: bool) -> ((usize, usize), (usize, usize)) {
    let jt = rng.gen_range(1..=grid.nt);
    let it = if interior {
        rng.gen_range(1..grid.nx)
    } else {
        rng.gen_range(0..=grid.nx)
    };
    ((rng.gen_range(0..jt), rng.gen_range(0..grid.nx)), (jt, it))
}

fn malliavin_check(ctx: &mut Ctx) -> Outcome {
    let (grid, m, cfg) = (ctx.grid, ctx.model.clone(), ctx.cfg);
    let linear = m.b.is_constant() && m.sigma.is_constant();
    let h = cfg
        .opt_f64("malliavin.h")?
        .unwrap_or(if linear { 1.0 } else { 1e-4 * (grid.dt() * grid.dx()).sqrt() });
    let tol = cfg.opt_f64("malliavin.tolerance")?.unwrap_or(if linear { 1e-10 } else { 1e-3 });
    let p = cfg.u64("malliavin.path")?;
    let nz = noise::sample(ctx.seed, p, grid);
    let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed);
    let interior = m.kernel.is_sine();
    let want = cfg.usize("malliavin.pairs")?;
    let (mut bump, mut skipped) = (Vec::new(), 0usize);
    while bump.len() < want && skipped < 10 * want.max(1) {
        let (s, t) = random_pair(&mut rng, &grid, interior);
        match bump_check(&m, &grid, ctx.scheme, &nz, t, s, h) {
            Ok(r) => bump.push(r),
            Err(supdens::Error::UnreliableOracle(_)) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let worst = bump.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    let mut checks = vec![
        Check::new(
            "bump pairs",
            "finite differences of the scheme",
            bump.len() == want,
            Some(bump.len() as f64),
            format!("{want} reliable pairs required, {skipped} skipped"),
        ),
        Check::at_most("bump relative error", "derivative with respect to a noise increment", worst, tol),
    ];
    let path = simulate_path(&m, &grid, ctx.scheme, &nz)?;
    let mut tangent = Vec::new();
    for _ in 0..cfg.usize("malliavin.tangent_pairs")? {
        let (s, t) = random_pair(&mut rng, &grid, interior);
        let adjoint = derivative_field(&path, &nz, &m, t)?.get(s.0, s.1);
        let tan = derivative_by_tangent(&path, &nz, &m, s, t)?;
        let scale = adjoint.abs().max(tan.abs());
        tangent.push(TangentRow {
            source: s,
            target: t,
            adjoint,
            tangent: tan,
            relative_error: if scale == 0.0 { 0.0 } else { (adjoint - tan).abs() / scale },
        });
    }
    let tworst = tangent.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    checks.push(Check::at_most(
        "adjoint against tangent",
        "adjoint and forward first variation agree",
        tworst,
        cfg.f64("malliavin.tangent_tolerance")?,
    ));
    let rows: Vec<Vec<f64>> = bump
        .iter()
        .map(|r| {
            vec![
                r.source.0 as f64,
                r.source.1 as f64,
                r.target.0 as f64,
                r.target.1 as f64,
                r.finite_difference,
                r.adjoint,
                r.relative_error,
            ]
        })
        .collect();
    ctx.out.csv("bump.csv", &["js", "is", "jt", "it", "finite_difference", "adjoint", "relative_error"], &rows)?;
    ctx.out.json(
        "malliavin.json",
        &MalliavinSummary {
            path_index: p,
            h,
            tolerance: tol,
            bump,
            unreliable_skipped: skipped,
            tangent,
        },
    )?;
    if cfg.bool("malliavin.envelope") {
        let target = match cfg.points("malliavin.target")? {
            Some(v) => probe_indices(&grid, v[0].0, v[0].1),
            None => (grid.nt, grid.nx / 2),
        };
        let k = cfg.u64("malliavin.k")? as u32;
        let env = envelope_report(&m, &grid, ctx.scheme, ctx.n, ctx.seed, target, k)?;
        let rows: Vec<Vec<f64>> = env
            .rows
            .iter()
            .map(|r| vec![r.tau, r.s, r.y, r.norm, r.second_moment, r.reference, r.ratio])
            .collect();
        ctx.out.csv("envelope.csv", &["tau", "s", "y", "norm", "second_moment", "reference", "ratio"], &rows)?;
        ctx.out.json("envelope.json", &env)?;
        let diag: Vec<(f64, f64)> = env
            .rows
            .iter()
            .filter(|r| (r.y - (env.x - 0.5 * grid.dx())).abs() < 0.51 * grid.dx())
            .map(|r| (r.tau, r.second_moment))
            .collect();
        let window = env.fit_window;
        ctx.svg("envelope.svg", || {
            Plot::new("second moment of the derivative on the diagonal", "t - s", "E|D|^2")
                .log_log()
                .with(Series::markers("ensemble", diag.clone()))
                .with(Series::markers(
                    "fit window",
                    diag.iter().copied().filter(|p| p.0 >= window.0 && p.0 <= window.1).collect(),
                ))
        })?;
        if m.kernel.is_second_order() {
            let worst = env
                .rows
                .iter()
                .filter(|r| r.tau > 1.5 * grid.dt())
                .map(|r| r.ratio)
                .fold(0.0, f64::max);
            checks.push(Check::new(
                "envelope ratio",
                "moment envelope of the derivative",
                worst <= 1.0,
                Some(worst),
                "largest ratio over sources at least two steps before the target; required <= 1",
            ));
        } else {
            let (lo, hi) = cfg.range("malliavin.slope_range")?.unwrap_or((-0.55, -0.45));
            let slope = env.diagonal_fit.map(|f| f.slope).unwrap_or(f64::NAN);
            checks.push(Check::within(
                "diagonal decay slope",
                "E|D|^2 decays like (t-s)^(-1/2) on the diagonal",
                slope,
                lo,
                hi,
            ));
        }
    }
    Ok(checks)
}

#[derive(Serialize)]
struct DensitySummary {
    region: Region,
    n_paths: usize,
    mean: f64,
    variance: f64,
    min: f64,
    max: f64,
    largest_argmax_set: usize,
    bandwidth: f64,
    kde_integral: f64,
    atom_scan: Option<analysis::AtomScan>,
    refinement: Option<analysis::RefinementReport>,
}

fn density(ctx: &mut Ctx) -> Outcome {
    let cfg = ctx.cfg;
    let region = ctx.region("density.region")?;
    let sups = analysis::ensemble_sup(&ctx.model, &ctx.grid, ctx.scheme, ctx.n, ctx.seed, &region)?;
    let v: Vec<f64> = sups.iter().map(|s| s.sup_value).collect();
    let rows: Vec<Vec<f64>> = sups
        .iter()
        .enumerate()
        .map(|(p, s)| vec![p as f64, s.sup_value, s.argmax_set.len() as f64])
        .collect();
    ctx.out.csv("sup_samples.csv", &["path", "sup", "argmax_points"], &rows)?;
    let bw = match cfg.get("density.bandwidth") {
        "silverman" => Bandwidth::Silverman,
        s => Bandwidth::Fixed {
            h: s.parse()
                .map_err(|_| RunError::Config(format!("density.bandwidth: `{s}` is neither silverman nor a number")))?,
        },
    };
    let d = analysis::kde(&v, bw)?;
    ctx.out.csv(
        "density.csv",
        &["x", "density"],
        &d.points.iter().zip(&d.density).map(|(x, f)| vec![*x, *f]).collect::<Vec<_>>(),
    )?;
    let curve: Vec<(f64, f64)> = d.points.iter().copied().zip(d.density.iter().copied()).collect();
    ctx.svg("density.svg", || {
        Plot::new(format!("density of the supremum over {}", region.label()), "sup u", "density")
            .with(Series::line("kde", curve))
    })?;
    let ktol = cfg.f64("density.kde_tolerance")?;
    let mut checks = vec![Check::at_most(
        "kde integral",
        "density estimate integrates to one",
        (d.integral - 1.0).abs(),
        ktol,
    )];
    let deltas = cfg.f64_list("density.deltas")?.unwrap_or_default();
    let atoms = if v.len() >= 1000 {
        let a = analysis::atom_scan(&v, &deltas)?;
        let (lo, hi) = cfg.range("density.ratio_range")?.unwrap_or((1.7, 2.3));
        for (k, r) in a.ratios.iter().enumerate() {
            checks.push(Check::within(
                format!("window mass ratio {} / {}", deltas[k], deltas[k + 1]),
                "no atoms in the law of the supremum",
                *r,
                lo,
                hi,
            ));
        }
        Some(a)
    } else {
        None
    };
    let refinement = if cfg.bool("density.refine") {
        let fine = GridSpec::new(2 * ctx.grid.nx, 4 * ctx.grid.nt, ctx.grid.t)?;
        Some(analysis::sup_refinement(
            &ctx.model, &ctx.grid, &fine, ctx.scheme, ctx.n, ctx.seed, &region,
        )?)
    } else {
        None
    };
    let (mean, variance) = mean_var(&v);
    ctx.out.json(
        "density.json",
        &DensitySummary {
            region,
            n_paths: v.len(),
            mean,
            variance,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            largest_argmax_set: sups.iter().map(|s| s.argmax_set.len()).max().unwrap_or(0),
            bandwidth: d.bandwidth,
            kde_integral: d.integral,
            atom_scan: atoms,
            refinement,
        },
    )?;
    Ok(checks)
}

/// Default lag windows `(time, space)` in grid units.
pub fn default_lags(kernel: &KernelId) -> (Vec<usize>, Vec<usize>) {
    if kernel.is_second_order() {
        (analysis::dyadic_lags(2, 5), analysis::dyadic_lags(1, 3))
    } else {
        (analysis::dyadic_lags(0, 3), analysis::dyadic_lags(0, 2))
    }
}

/// Accepted slopes `(time, space)` of the solution and of the derivative field.
fn default_ranges(kernel: &KernelId) -> [Option<(f64, f64)>; 4] {
    if kernel.is_second_order() {
        [Some((0.20, 0.30)), Some((0.42, 0.55)), Some((0.18, 0.32)), Some((0.40, 0.58))]
    } else {
        [Some((0.33, 0.42)), Some((0.80, 1.05)), None, Some((0.75, 1.05))]
    }
}

#[derive(Serialize)]
struct LabelledHolder {
    field: String,
    report: HolderReport,
}

fn holder(ctx: &mut Ctx) -> Outcome {
    let cfg = ctx.cfg;
    let (grid, m) = (ctx.grid, ctx.model.clone());
    let axes: Vec<Axis> = list(cfg.get("holder.axes"))
        .into_iter()
        .map(|a| Axis::parse(a).map_err(|e| RunError::Config(e.to_string())))
        .collect::<Result<_, _>>()?;
    let field = cfg.get("holder.field");
    let (tl, sl) = default_lags(&m.kernel);
    let lags_for = |key: &str, axis: Axis| -> Result<Vec<usize>, ConfigError> {
        Ok(cfg.usize_list(key)?.unwrap_or(match axis {
            Axis::Time => tl.clone(),
            Axis::Space => sl.clone(),
        }))
    };
    let ranges = default_ranges(&m.kernel);
    let x = cfg.f64("holder.x")?;
    let t_at = cfg.opt_f64("holder.t")?.unwrap_or(grid.t / 2.0);
    let t_min = cfg.opt_f64("holder.t_min")?.unwrap_or(grid.t / 4.0);
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    for &axis in &axes {
        let (name, idx) = match axis {
            Axis::Time => ("time", 0),
            Axis::Space => ("space", 1),
        };
        if field != "malliavin" {
            let lags = lags_for(&format!("holder.{name}_lags"), axis)?;
            let at = if axis == Axis::Time { x } else { t_at };
            let r = analysis::holder_ensemble(&m, &grid, ctx.scheme, ctx.n, ctx.seed, axis, at, t_min, &lags)?;
            if let Some((lo, hi)) = cfg.range(&format!("holder.{name}_range"))?.or(ranges[idx]) {
                checks.push(Check::within(
                    format!("solution {name} exponent"),
                    format!("Hölder regularity of the solution in {name}"),
                    r.slope,
                    lo,
                    hi,
                ));
            }
            reports.push(LabelledHolder {
                field: "solution".into(),
                report: r,
            });
        }
        if field != "solution" {
            let lags = lags_for(&format!("holder.malliavin_{name}_lags"), axis)?;
            let max_space = lags_for("holder.malliavin_space_lags", Axis::Space)?.into_iter().max().unwrap_or(0);
            let (j, i) = probe_indices(&grid, t_at, x);
            let base = (j.max(1), i.saturating_sub(max_space / 2).max(1));
            let n = cfg.opt_usize("holder.malliavin_n")?.unwrap_or(ctx.n);
            let r = analysis::holder_exponent_malliavin(&m, &grid, ctx.scheme, n, ctx.seed, axis, base, &lags)?;
            if let Some((lo, hi)) = cfg.range(&format!("holder.malliavin_{name}_range"))?.or(ranges[2 + idx]) {
                checks.push(Check::within(
                    format!("derivative field {name} exponent"),
                    format!("L2 Hölder regularity of the derivative field in {name}"),
                    r.slope,
                    lo,
                    hi,
                ));
            }
            reports.push(LabelledHolder {
                field: "malliavin".into(),
                report: r,
            });
        }
    }
    let mut rows = Vec::new();
    for (k, lr) in reports.iter().enumerate() {
        for (l, med) in lr.report.lags.iter().zip(&lr.report.median_increments) {
            rows.push(vec![k as f64, *l, *med]);
        }
    }
    ctx.out.csv("holder.csv", &["regression", "lag", "median_increment"], &rows)?;
    ctx.out.json("holder.json", &reports)?;
    for (k, lr) in reports.iter().enumerate() {
        let r = &lr.report;
        let pts: Vec<(f64, f64)> = r.lags.iter().copied().zip(r.median_increments.iter().copied()).collect();
        let fit = loglog_fit(&r.lags, &r.median_increments);
        let line: Vec<(f64, f64)> = fit
            .map(|f| r.lags.iter().map(|&l| (l, (f.intercept + f.slope * l.ln()).exp())).collect())
            .unwrap_or_default();
        let title = format!("{} {:?} increments, slope {:.3}", lr.field, r.axis, r.slope);
        ctx.svg(&format!("holder_{k}.svg"), || {
            Plot::new(title, "lag", "median |increment|")
                .log_log()
                .with(Series::markers("median", pts))
                .with(Series::line("fit", line))
        })?;
    }
    Ok(checks)
}

#[derive(Serialize)]
struct SmallBallSummary {
    tail: analysis::SmallBallReport,
    r1: analysis::ScalingFit,
}

fn smallball(ctx: &mut Ctx) -> Outcome {
    let cfg = ctx.cfg;
    let (grid, m) = (ctx.grid, ctx.model.clone());
    let (t, x) = cfg.points("smallball.target")?.map(|v| v[0]).unwrap_or((grid.t / 2.0, 0.5));
    let target = probe_indices(&grid, t, x);
    let base = analysis::smallball_gamma(&m, &grid, ctx.scheme, target, ctx.n, ctx.seed, &[])?;
    let ys = cfg.f64_list("smallball.ys")?.unwrap_or_else(|| {
        let md = base.median;
        vec![0.5 * base.min, 0.25 * md, 0.5 * md, 0.75 * md, md]
    });
    let rep = analysis::tail_report(&grid, target, base.gammas, &ys);
    let mut checks = Vec::new();
    let mut sorted: Vec<_> = rep.rows.clone();
    sorted.sort_by(|a, b| a.y.total_cmp(&b.y));
    let monotone = sorted.windows(2).all(|w| w[0].probability.estimate <= w[1].probability.estimate);
    checks.push(Check::new(
        "tail monotone",
        "small-ball probabilities form a distribution function",
        monotone,
        None,
        "P(gamma <= y) nondecreasing in y",
    ));
    let below = wilson_zero_below_min(&rep);
    checks.push(Check::new(
        "empty tail below the ensemble minimum",
        "small-ball probability vanishes below the minimum",
        below,
        None,
        "P(gamma <= y) = 0 for every listed y below the sample minimum",
    ));
    let eps = cfg.f64_list("smallball.r1_eps")?.unwrap_or_else(|| {
        if m.kernel.is_second_order() {
            logspace(1e-4, 1e-2, 9)
        } else {
            logspace(1e-5, 1e-3, 9)
        }
    });
    let want = if m.kernel.is_second_order() { 0.5 } else { 0.75 };
    let (lo, hi) = cfg.range("smallball.r1_range")?.unwrap_or((want - 0.03, want + 0.03));
    let r1 = analysis::r1_scaling(&m.kernel, rep.t, rep.x, &eps)?;
    checks.push(Check::within(
        "deterministic small-ball rate",
        "integral of the squared kernel over [0, eps] grows like eps^(1/2) or eps^(3/4)",
        r1.slope,
        lo,
        hi,
    ));
    ctx.out.csv(
        "gamma_samples.csv",
        &["path", "gamma"],
        &rep.gammas.iter().enumerate().map(|(p, g)| vec![p as f64, *g]).collect::<Vec<_>>(),
    )?;
    ctx.out.csv(
        "r1.csv",
        &["eps", "r1"],
        &r1.eps.iter().zip(&r1.values).map(|(e, v)| vec![*e, *v]).collect::<Vec<_>>(),
    )?;
    let pts: Vec<(f64, f64)> = r1.eps.iter().copied().zip(r1.values.iter().copied()).collect();
    let title = format!("R1(eps), slope {:.4}", r1.slope);
    ctx.svg("r1.svg", || Plot::new(title, "eps", "R1").log_log().with(Series::markers("R1", pts)))?;
    ctx.out.json("smallball.json", &SmallBallSummary { tail: rep, r1 })?;
    Ok(checks)
}

fn wilson_zero_below_min(rep: &analysis::SmallBallReport) -> bool {
    rep.rows
        .iter()
        .filter(|r| r.y < rep.min)
        .all(|r| r.probability.successes == 0)
}

fn escape(ctx: &mut Ctx) -> Outcome {
    let cfg = ctx.cfg;
    let (grid, m) = (ctx.grid, ctx.model.clone());
    let mode = match cfg.get("escape.mode") {
        "fixed-star" => EscapeMode::FixedStar,
        _ => {
            let lo = 1.0 / (4.0 * m.u0.alpha);
            EscapeMode::MovingPoint {
                theta: cfg.opt_f64("escape.theta")?.unwrap_or(0.5 * (lo + 0.5)),
            }
        }
    };
    let probes = cfg.f64_list("escape.probes")?.unwrap_or_else(|| {
        (2..=8)
            .map(|k| grid.dt() * f64::from(1u32 << k))
            .filter(|&t| t <= grid.t)
            .collect()
    });
    let rep = analysis::escape_probability(&m, &grid, ctx.scheme, ctx.n, ctx.seed, &probes, mode)
        .map_err(|e| match e {
            supdens::Error::Domain(s) => RunError::Config(s),
            e => e.into(),
        })?;
    let mut checks = Vec::new();
    match mode {
        EscapeMode::FixedStar => checks.push(Check::new(
            "supremum escapes the initial maximum",
            "the supremum exceeds the initial maximum immediately",
            rep.sup_exceed.estimate >= cfg.f64("escape.min_fraction")?,
            Some(rep.sup_exceed.estimate),
            format!(
                "fraction of paths with sup > u0(x*) required >= {}; Wilson [{:.4}, {:.4}]",
                cfg.f64("escape.min_fraction")?,
                rep.sup_exceed.lower,
                rep.sup_exceed.upper
            ),
        )),
        EscapeMode::MovingPoint { .. } => checks.push(Check::new(
            "uniform exceedance at the moving point",
            "positive probability of exceeding 0 at t^theta, uniformly in t",
            rep.uniform_lower > 0.0,
            Some(rep.uniform_lower),
            format!("smallest per-probe fraction; smallest Wilson lower limit {:.4}", rep.uniform_lower_ci),
        )),
    }
    let rows: Vec<Vec<f64>> = rep
        .rows
        .iter()
        .map(|r| vec![r.t, r.x, r.exceed.estimate, r.exceed.lower, r.exceed.upper])
        .collect();
    ctx.out.csv("escape.csv", &["t", "x", "fraction", "lower", "upper"], &rows)?;
    let pts: Vec<(f64, f64)> = rep.rows.iter().map(|r| (r.t, r.exceed.estimate)).collect();
    ctx.svg("escape.svg", || {
        let mut p = Plot::new("exceedance by probe time", "t", "fraction").with(Series::markers("fraction", pts));
        p.log_x = true;
        p
    })?;
    ctx.out.json("escape.json", &rep)?;
    Ok(checks)
}

fn argmax_gamma(ctx: &mut Ctx) -> Outcome {
    let (grid, m) = (ctx.grid, ctx.model.clone());
    let region = ctx.region("argmax.region")?;
    let rep = analysis::argmax_gamma(&m, &grid, ctx.scheme, ctx.n, ctx.seed, &region)?;
    let control_region = Region::Compact {
        t_lo: 0.0,
        t_hi: 0.0,
        x_lo: 0.0,
        x_hi: 1.0,
    };
    let control = analysis::argmax_gamma(&m, &grid, ctx.scheme, ctx.n.min(4), ctx.seed, &control_region)?;
    let checks = vec![
        Check::new(
            "gamma positive on the argmax set",
            "gamma > 0 at every maximiser",
            rep.ensemble_min > 0.0,
            Some(rep.ensemble_min),
            format!("ensemble minimum; relative to the median {:.4e}", rep.relative_margin),
        ),
        Check::new(
            "gamma vanishes at t = 0",
            "no noise has acted before time 0",
            control.per_path.iter().all(|&g| g == 0.0),
            Some(control.per_path.iter().copied().fold(0.0, f64::max)),
            "largest gamma on the initial row",
        ),
    ];
    ctx.out.csv(
        "argmax_gamma.csv",
        &["path", "min_gamma"],
        &rep.per_path.iter().enumerate().map(|(p, g)| vec![p as f64, *g]).collect::<Vec<_>>(),
    )?;
    ctx.out.json("argmax_gamma.json", &rep)?;
    Ok(checks)
}
