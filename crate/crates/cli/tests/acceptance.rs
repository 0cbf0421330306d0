//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance -- 5 7` runs criteria 5 and 7 only.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use supdens::analysis::{self, Axis, EscapeMode, Region};
use supdens::kernels::{
    dawson, default_lattice, envelope_series, l2_norm_sq_y, linear_exact_variance, logspace, verify_bound_multi,
    verify_bound_refined, BoundId, EnvelopeConfig, KernelId, SeriesTruncation,
};
use supdens::malliavin::{bump_check, derivative_by_tangent, derivative_field, envelope_report};
use supdens::noise::{self, GridSpec};
use supdens::solver::{convergence_probe, simulate_path, InitialConditionSpec, InitialKind, ModelSpec, SchemeConfig};
use supdens::stats::loglog_fit;
use supdens_cli::experiments::{default_lags, duality};

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Verdict {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const D: KernelId = KernelId::DIRICHLET;
const N: KernelId = KernelId::NEUMANN;

fn h1() -> KernelId {
    KernelId::fourth_order(1.0).unwrap()
}

fn spectral() -> SchemeConfig {
    SchemeConfig::spectral()
}

fn c1_kernel_duality() -> Verdict {
    let times = logspace(1e-4, 1.0, 13);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for k in [D, N] {
        let (d, at) = duality(&k, &times).map_err(|e| e.to_string())?;
        worst = worst.max(d);
        parts.push(format!("{} {d:.2e} at {at:?}", k.label()));
    }
    ensure(worst < 1e-10, format!("max |series - images| {}; limit 1e-10", parts.join(", ")))
}

fn c2_l2_scalings() -> Verdict {
    let rs = logspace(1e-4, 1e-2, 9);
    let vals: Vec<f64> = rs
        .iter()
        .map(|&r| l2_norm_sq_y(&D, r, 0.5, SeriesTruncation::AdaptiveTail(1e-14)).unwrap())
        .collect();
    let s_g = loglog_fit(&rs, &vals).unwrap().slope;
    let s_inf = verify_bound_multi(BoundId::HLinf, &default_lattice(BoundId::HLinf, h1()), &[])
        .map_err(|e| e.to_string())?[0]
        .slope_fit
        .ok_or("no slope fit")?
        .exponent;
    let s_l2 = verify_bound_multi(BoundId::HL2, &default_lattice(BoundId::HL2, h1()), &[])
        .map_err(|e| e.to_string())?[0]
        .slope_fit
        .ok_or("no slope fit")?
        .exponent;
    ensure(
        (s_g + 0.5).abs() <= 0.02 && (s_inf + 0.25).abs() <= 0.02 && (s_l2 + 0.125).abs() <= 0.02,
        format!("slopes: ||G^D_r(0.5,.)||^2 {s_g:.4} (-0.50), ||H_t||_inf {s_inf:.4} (-0.25), ||H_t||_L2 {s_l2:.4} (-0.125); tolerance 0.02"),
    )
}

fn c3_ratio_suite() -> Verdict {
    let mut worst = (0.0f64, String::new());
    let mut bad = Vec::new();
    let mut count = 0;
    for b in BoundId::all() {
        let kernels = if b.is_fourth_order() { vec![h1()] } else { vec![D, N] };
        for k in kernels {
            let rs = verify_bound_refined(b, &default_lattice(b, k), &b.default_exponents()).map_err(|e| e.to_string())?;
            for r in rs {
                count += 1;
                let delta = r.refinement.as_ref().map(|f| f.relative_delta).unwrap_or(f64::NAN);
                let tag = format!("{} {} {:?}", r.bound_id, r.kernel, r.exponent);
                if !(r.max_ratio.is_finite() && r.max_ratio > 0.0 && delta < 0.01) {
                    bad.push(format!("{tag}: ratio {:e} delta {delta:e}", r.max_ratio));
                }
                if delta > worst.0 {
                    worst = (delta, tag);
                }
            }
        }
    }
    ensure(
        bad.is_empty(),
        format!(
            "{count} reports; largest refinement change {:.2e} ({}); limit 1e-2{}",
            worst.0,
            worst.1,
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join("; ")) }
        ),
    )
}

fn c4_envelope() -> Verdict {
    let mut margin = f64::INFINITY;
    for g in [0.5, 1.0, 2.0, 4.0] {
        for t in [0.1, 0.5, 1.0] {
            let cfg = EnvelopeConfig::with_rate(g, 1.0);
            let bound = 2.0 * (g * g * t / 4.0).exp();
            for n in 0..=80 {
                let s = envelope_series(&cfg, t, n).map_err(|e| e.to_string())?;
                margin = margin.min(bound - s);
            }
        }
    }
    let mut dmargin = f64::INFINITY;
    for k in 1..=10_000 {
        let x = 10.0 * k as f64 / 10_000.0;
        let w = dawson(x).map_err(|e| e.to_string())?;
        dmargin = dmargin.min(((1.0 - (-x * x).exp()) / x - w) / w);
    }
    ensure(
        margin > 0.0 && dmargin > 0.0,
        format!("smallest slack of the partial sums {margin:.3e}; smallest relative slack of the Dawson bound {dmargin:.3e}"),
    )
}

fn c5_linear_law() -> Verdict {
    let model = ModelSpec::linear(D);
    let grid = GridSpec::new(64, 4096, 1.0).unwrap();
    let probes = [(0.1, 0.5), (0.5, 0.25), (1.0, 0.75)];
    let stats = convergence_probe(&model, &[grid], 10_000, 2024, &probes, spectral()).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for s in &stats {
        let oracle = linear_exact_variance(&D, s.t, s.x, SeriesTruncation::AdaptiveTail(1e-14)).map_err(|e| e.to_string())?;
        let z = (s.variance - oracle) / s.variance_se;
        ok &= z.abs() <= 3.0;
        parts.push(format!("Var u({}, {}) = {:.5} +- {:.5} vs {oracle:.5} (z {z:+.2})", s.t, s.x, s.variance, s.variance_se));
    }
    let o = linear_exact_variance(&D, 0.1, 0.5, SeriesTruncation::AdaptiveTail(1e-14)).unwrap();
    ok &= (o - 0.11093).abs() < 5e-6;
    ensure(ok, parts.join("; "))
}

fn c6_malliavin_oracle() -> Verdict {
    let grid = GridSpec::new(64, 4096, 1.0).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let draw = |rng: &mut ChaCha12Rng| {
        let jt = rng.gen_range(1..=grid.nt);
        ((rng.gen_range(0..jt), rng.gen_range(0..grid.nx)), (jt, rng.gen_range(1..grid.nx)))
    };
    let mut out = Vec::new();
    let mut ok = true;
    for (model, h, tol) in [
        (ModelSpec::default_nonlinear(D), 1e-4 * (grid.dt() * grid.dx()).sqrt(), 1e-3),
        (ModelSpec::linear(D), 1.0, 1e-10),
    ] {
        let noise = noise::sample(6, 0, grid);
        let (mut worst, mut done, mut skipped) = (0.0f64, 0, 0);
        while done < 50 {
            let (s, t) = draw(&mut rng);
            match bump_check(&model, &grid, spectral(), &noise, t, s, h) {
                Ok(r) => {
                    worst = worst.max(r.relative_error);
                    done += 1;
                }
                Err(supdens::Error::UnreliableOracle(_)) if skipped < 50 => skipped += 1,
                Err(e) => return Err(e.to_string()),
            }
        }
        ok &= worst < tol;
        out.push(format!("bump {} worst {worst:.2e} < {tol:e} ({skipped} redrawn)", if tol > 1e-6 { "nonlinear" } else { "linear" }));
    }
    let model = ModelSpec::default_nonlinear(D);
    let noise = noise::sample(6, 1, grid);
    let path = simulate_path(&model, &grid, spectral(), &noise).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (s, t) = draw(&mut rng);
        let a = derivative_field(&path, &noise, &model, t).map_err(|e| e.to_string())?.get(s.0, s.1);
        let f = derivative_by_tangent(&path, &noise, &model, s, t).map_err(|e| e.to_string())?;
        let scale = a.abs().max(f.abs());
        if scale > 0.0 {
            worst = worst.max((a - f).abs() / scale);
        }
    }
    ok &= worst < 1e-10;
    out.push(format!("adjoint/tangent worst {worst:.2e} < 1e-10 on 20 pairs"));
    ensure(ok, out.join("; "))
}

fn c7_decay_exponent() -> Verdict {
    let kernel = h1();
    let mut model = ModelSpec::default_nonlinear(kernel);
    model.horizon = 1.0 / 256.0;
    let grid = GridSpec::new(64, 4096, model.horizon).unwrap();
    let rep = envelope_report(&model, &grid, spectral(), 200, 7, (4096, 32), 2).map_err(|e| e.to_string())?;
    let fit = rep.diagonal_fit.ok_or("no diagonal fit")?;
    ensure(
        (fit.slope + 0.5).abs() <= 0.05,
        format!(
            "slope of E|D|^2 against t-s on the diagonal {:.4} (R2 {:.4}, window {:.2e}..{:.2e}, T = 2^-8); required -0.50 +- 0.05",
            fit.slope, fit.r2, rep.fit_window.0, rep.fit_window.1
        ),
    )
}

fn c8_holder() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut check = |name: &str, r: analysis::HolderReport, lo: f64, hi: f64| {
        let pass = r.slope >= lo && r.slope <= hi;
        ok &= pass;
        parts.push(format!("{name} {:.3} in [{lo}, {hi}]", r.slope));
    };
    for (kernel, ranges) in [(D, [(0.20, 0.30), (0.42, 0.55)]), (h1(), [(0.33, 0.42), (0.80, 1.05)])] {
        let model = ModelSpec::default_nonlinear(kernel);
        let grid = GridSpec::new(64, 4096, model.horizon).unwrap();
        let (tl, sl) = default_lags(&kernel);
        let tag = if kernel.is_second_order() { "kappa=0" } else { "kappa>0" };
        let r = analysis::holder_ensemble(&model, &grid, spectral(), 200, 8, Axis::Time, 0.5, grid.t / 4.0, &tl)
            .map_err(|e| e.to_string())?;
        check(&format!("{tag} time"), r, ranges[0].0, ranges[0].1);
        let r = analysis::holder_ensemble(&model, &grid, spectral(), 200, 8, Axis::Space, grid.t / 2.0, 0.0, &sl)
            .map_err(|e| e.to_string())?;
        check(&format!("{tag} space"), r, ranges[1].0, ranges[1].1);
        if kernel.is_second_order() {
            let base = (2048, 28);
            let r = analysis::holder_exponent_malliavin(&model, &grid, spectral(), 200, 8, Axis::Time, base, &tl)
                .map_err(|e| e.to_string())?;
            check("kappa=0 derivative field time", r, 0.18, 0.32);
            let r = analysis::holder_exponent_malliavin(&model, &grid, spectral(), 200, 8, Axis::Space, base, &sl)
                .map_err(|e| e.to_string())?;
            check("kappa=0 derivative field space", r, 0.40, 0.58);
        }
    }
    ensure(ok, parts.join("; "))
}

fn c9_smallball_rate() -> Verdict {
    let a = analysis::r1_scaling(&D, 0.5, 0.5, &logspace(1e-4, 1e-2, 9)).map_err(|e| e.to_string())?;
    let n = analysis::r1_scaling(&N, 0.5, 0.3, &logspace(1e-4, 1e-2, 9)).map_err(|e| e.to_string())?;
    let b = analysis::r1_scaling(&h1(), 0.5, 0.5, &logspace(1e-5, 1e-3, 9)).map_err(|e| e.to_string())?;
    ensure(
        (a.slope - 0.5).abs() <= 0.03 && (n.slope - 0.5).abs() <= 0.03 && (b.slope - 0.75).abs() <= 0.03,
        format!(
            "R1 slopes: Dirichlet {:.4}, Neumann {:.4} (0.50 +- 0.03); fourth order {:.4} (0.75 +- 0.03)",
            a.slope, n.slope, b.slope
        ),
    )
}

fn c10_argmax_gamma() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for kernel in [D, N, h1()] {
        let model = ModelSpec::default_nonlinear(kernel);
        let grid = GridSpec::new(64, 4096, model.horizon).unwrap();
        let region = Region::interior(&kernel, 0.1);
        let r = analysis::argmax_gamma(&model, &grid, spectral(), 500, 10, &region).map_err(|e| e.to_string())?;
        let row0 = Region::Compact {
            t_lo: 0.0,
            t_hi: 0.0,
            x_lo: 0.0,
            x_hi: 1.0,
        };
        let c = analysis::argmax_gamma(&model, &grid, spectral(), 4, 10, &row0).map_err(|e| e.to_string())?;
        let zero = c.per_path.iter().all(|&g| g == 0.0);
        ok &= r.ensemble_min > 0.0 && zero;
        parts.push(format!(
            "{} {}: min {:.3e} (median {:.3e}, margin {:.3}), t=0 row {}",
            kernel.label(),
            region.label(),
            r.ensemble_min,
            r.median,
            r.relative_margin,
            if zero { "exactly 0" } else { "NONZERO" }
        ));
    }
    ensure(ok, parts.join("; "))
}

fn c11_absolute_continuity() -> Verdict {
    let model = ModelSpec::default_nonlinear(D);
    let grid = GridSpec::new(32, 2048, 1.0).unwrap();
    let region = Region::interior(&D, 0.1);
    let sups = analysis::ensemble_sup(&model, &grid, spectral(), 100_000, 11, &region).map_err(|e| e.to_string())?;
    let v: Vec<f64> = sups.iter().map(|s| s.sup_value).collect();
    let scan = analysis::atom_scan(&v, &[0.04, 0.02, 0.01]).map_err(|e| e.to_string())?;
    let kde = analysis::kde(&v, analysis::Bandwidth::Silverman).map_err(|e| e.to_string())?;
    ensure(
        scan.ratios.iter().all(|r| (1.7..=2.3).contains(r)) && (kde.integral - 1.0).abs() <= 1e-3,
        format!(
            "window-mass ratios {:?} (in [1.7, 2.3]); kde integral {:.6} (1 +- 1e-3); 1e5 paths on Nx=32 Nt=2048",
            scan.ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            kde.integral
        ),
    )
}

fn c12_escape() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for kernel in [D, N] {
        let model = ModelSpec::default_nonlinear(kernel);
        let grid = GridSpec::new(64, 4096, 1.0).unwrap();
        let probes: Vec<f64> = (2..=8).map(|k| grid.dt() * f64::from(1u32 << k)).collect();
        let r = analysis::escape_probability(&model, &grid, spectral(), 1000, 12, &probes, EscapeMode::FixedStar)
            .map_err(|e| e.to_string())?;
        ok &= r.sup_exceed.estimate >= 0.95;
        parts.push(format!(
            "{} fixed star: sup > u0(x*) in {:.3} of paths (Wilson [{:.3}, {:.3}])",
            kernel.label(),
            r.sup_exceed.estimate,
            r.sup_exceed.lower,
            r.sup_exceed.upper
        ));
    }
    // u0 = -sin(pi x): maximal at the boundary point x* = 0, with exponent 1
    let mut model = ModelSpec::default_nonlinear(D);
    model.u0 = InitialConditionSpec {
        kind: InitialKind::Callable {
            name: "-sin(pi x)".into(),
            f: Arc::new(|x: f64| -(PI * x).sin()),
        },
        x_star: 0.0,
        alpha: 1.0,
        c0: PI * 1.01,
        r0: 0.1,
    };
    let grid = GridSpec::new(64, 4096, 1.0).unwrap();
    let probes: Vec<f64> = (2..=8).map(|k| grid.dt() * f64::from(1u32 << k)).collect();
    let theta = 0.5 * (0.25 + 0.5);
    let r = analysis::escape_probability(&model, &grid, spectral(), 1000, 12, &probes, EscapeMode::MovingPoint { theta })
        .map_err(|e| e.to_string())?;
    ok &= r.uniform_lower > 0.0;
    parts.push(format!(
        "moving point theta={theta}: per-probe fractions {:?}, uniform level {:.3} (Wilson lower {:.3})",
        r.rows.iter().map(|x| format!("{:.3}", x.exceed.estimate)).collect::<Vec<_>>(),
        r.uniform_lower,
        r.uniform_lower_ci
    ));
    ensure(ok, parts.join("; "))
}

const REPRO_CONFIGS: &[(&str, &str)] = &[
    ("simulate", "experiment = simulate\ngrid.nx = 32\ngrid.nt = 512\nensemble.n = 64\n"),
    ("malliavin", "experiment = malliavin-check\ngrid.nx = 16\ngrid.nt = 256\nmalliavin.pairs = 5\nmalliavin.tangent_pairs = 3\nmalliavin.envelope = true\nensemble.n = 40\n"),
    ("density", "experiment = density\ngrid.nx = 16\ngrid.nt = 256\nensemble.n = 1200\ndensity.ratio_range = 0,100\n"),
    ("holder", "experiment = holder\nholder.field = both\ngrid.nx = 32\ngrid.nt = 512\nensemble.n = 16\nholder.time_range = 0,2\nholder.space_range = 0,2\nholder.malliavin_time_range = 0,2\nholder.malliavin_space_range = 0,2\n"),
    ("smallball", "experiment = smallball\ngrid.nx = 16\ngrid.nt = 256\nensemble.n = 64\n"),
    ("escape", "experiment = escape\ngrid.nx = 16\ngrid.nt = 256\nensemble.n = 64\nescape.min_fraction = 0\n"),
    ("argmax", "experiment = argmax-gamma\nmodel.regime = neumann\ngrid.nx = 16\ngrid.nt = 256\nensemble.n = 16\n"),
    ("kernels", "experiment = kernels-verify\nkernels.bounds = G_le_p,H_L2\nkernels.second_order = neumann\n"),
];

fn run_cli(cfg: &Path, out: &Path) -> Result<i32, String> {
    let st = Command::new(env!("CARGO_BIN_EXE_supdens"))
        .arg("run")
        .arg(cfg)
        .env("SUPDENS_OUTPUT_DIR", out)
        .output()
        .map_err(|e| e.to_string())?;
    st.status.code().ok_or_else(|| "killed by a signal".into())
}

fn data_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut m = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        if name.ends_with(".csv") || name.ends_with(".json") {
            m.insert(name, fs::read(&p).unwrap());
        }
    }
    m
}

fn c13_reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    let mut diffs = Vec::new();
    for (name, body) in REPRO_CONFIGS {
        let mut runs = Vec::new();
        for (k, workers) in [1, 1, 8].iter().enumerate() {
            let cfg = tmp.path().join(format!("{name}_{k}.cfg"));
            fs::write(&cfg, format!("{body}run.workers = {workers}\n")).map_err(|e| e.to_string())?;
            let out = tmp.path().join(format!("{name}_{k}"));
            let code = run_cli(&cfg, &out)?;
            if code != 0 {
                return Err(format!("{name} run {k} exited with {code}"));
            }
            runs.push(data_files(&out));
        }
        for (k, r) in runs.iter().enumerate().skip(1) {
            if r != &runs[0] {
                diffs.push(format!("{name} run {k}"));
            }
        }
        compared += runs[0].len();
    }
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "experiment = simulate\nmodel.kappa = 1\n").unwrap();
    let code = run_cli(&bad, &tmp.path().join("bad"))?;
    let first = tmp.path().join("report.md");
    let r1 = supdens_cli::output::report(tmp.path())?;
    let a = fs::read(&first).map_err(|e| e.to_string())?;
    supdens_cli::output::report(tmp.path())?;
    let b = fs::read(&first).map_err(|e| e.to_string())?;
    ensure(
        diffs.is_empty() && code == 2 && a == b && r1.failures == 0,
        format!(
            "{compared} CSV/JSON files identical across two runs with 1 worker and one with 8{}; unknown key exits {code}; report over {} checks byte-stable: {}",
            if diffs.is_empty() { String::new() } else { format!("; DIFFER: {}", diffs.join(", ")) },
            r1.rows,
            a == b
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "kernel duality", c1_kernel_duality),
    (2, "L2 scalings", c2_l2_scalings),
    (3, "bound ratio suite", c3_ratio_suite),
    (4, "envelope series and Dawson bound", c4_envelope),
    (5, "linear-case law", c5_linear_law),
    (6, "Malliavin oracle", c6_malliavin_oracle),
    (7, "Malliavin decay exponent", c7_decay_exponent),
    (8, "Hölder exponents", c8_holder),
    (9, "small-ball deterministic rate", c9_smallball_rate),
    (10, "gamma on the argmax set", c10_argmax_gamma),
    (11, "absolute continuity of the supremum", c11_absolute_continuity),
    (12, "escape probabilities", c12_escape),
    (13, "reproducibility", c13_reproducibility),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for &(id, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let verdict = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match verdict {
            Ok(msg) => println!("PASS criterion {id:>2} ({name}, {secs:.1}s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {id:>2} ({name}, {secs:.1}s): {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
