//! Batch front end: parses a run configuration, executes one experiment,
//! writes its outputs with a manifest, and merges manifests into a report.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails or the run
//! aborts, 2 when the configuration is invalid.

pub mod config;
pub mod experiments;
pub mod model;
pub mod output;
pub mod plot;

use config::Config;
use experiments::{Ctx, RunError};
use output::{Check, GridSummary, Manifest, OutputDir};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable that replaces `output.dir`.
pub const OUTPUT_ENV: &str = "SUPDENS_OUTPUT_DIR";

#[derive(Debug)]
pub struct RunSummary {
    pub exit_code: i32,
    pub output_dir: PathBuf,
    pub checks: Vec<Check>,
    pub message: Option<String>,
}

fn config_failure(dir: PathBuf, msg: String) -> RunSummary {
    RunSummary {
        exit_code: 2,
        output_dir: dir,
        checks: vec![],
        message: Some(msg),
    }
}

fn run_report(cfg: &Config, out_dir: &Path) -> RunSummary {
    let dir = if cfg.is_auto("report.dir") {
        out_dir.to_path_buf()
    } else {
        PathBuf::from(cfg.get("report.dir"))
    };
    match output::report(&dir) {
        Ok(r) => RunSummary {
            exit_code: i32::from(r.failures > 0),
            output_dir: dir,
            checks: vec![],
            message: Some(format!("{} checks, {} failed; wrote {}", r.rows, r.failures, r.path.display())),
        },
        Err(e) => config_failure(dir, e),
    }
}

/// Runs `cfg`, writing into `out_dir`.
pub fn run_config(cfg: &Config, out_dir: &Path) -> RunSummary {
    if cfg.get("experiment") == "report" {
        return run_report(cfg, out_dir);
    }
    let started = Instant::now();
    let built = (|| -> Result<_, config::ConfigError> {
        let m = model::model(cfg)?;
        let g = model::grid(cfg, &m)?;
        Ok((m, g, model::scheme(cfg)?, cfg.usize("ensemble.n")?, cfg.u64("ensemble.seed")?))
    })();
    let (m, grid, scheme, n, seed) = match built {
        Ok(v) => v,
        Err(e) => return config_failure(out_dir.to_path_buf(), e.0),
    };
    let out = match OutputDir::create(out_dir, &cfg.hash()) {
        Ok(o) => o,
        Err(e) => {
            return RunSummary {
                exit_code: 1,
                output_dir: out_dir.to_path_buf(),
                checks: vec![],
                message: Some(format!("{}: {e}", out_dir.display())),
            }
        }
    };
    let workers = cfg.usize("run.workers").unwrap_or(0);
    let mut ctx = Ctx {
        cfg,
        model: m,
        grid,
        scheme,
        n,
        seed,
        plots: cfg.bool("output.plots"),
        out,
    };
    let result = if workers == 0 {
        experiments::dispatch(&mut ctx)
    } else {
        supdens::ensemble::with_workers(workers, || experiments::dispatch(&mut ctx))
    };
    let (checks, message, code) = match result {
        Ok(c) => {
            let code = i32::from(c.iter().any(|c| !c.passed));
            (c, None, code)
        }
        Err(RunError::Config(e)) => return config_failure(out_dir.to_path_buf(), e),
        Err(RunError::Runtime(e)) => (
            vec![Check::new("run", "experiment completed", false, None, e.clone())],
            Some(e),
            1,
        ),
    };
    let manifest = Manifest {
        artifact_version: output::ARTIFACT_VERSION.into(),
        experiment: cfg.get("experiment").into(),
        config_hash: cfg.hash(),
        seed,
        grid: GridSummary {
            nx: grid.nx,
            nt: grid.nt,
            t: grid.t,
            scheme: scheme.scheme.name().into(),
        },
        config: cfg.echo(),
        outputs: ctx.out.written(),
        passed: code == 0,
        checks: checks.clone(),
    };
    let timing = format!(
        "wall_time_s = {:.3}\nworkers = {}\n",
        started.elapsed().as_secs_f64(),
        if workers == 0 { rayon_threads() } else { workers }
    );
    let written = ctx
        .out
        .write_manifest(&manifest)
        .and_then(|_| std::fs::write(out_dir.join("execution.txt"), timing));
    if let Err(e) = written {
        return RunSummary {
            exit_code: 1,
            output_dir: out_dir.to_path_buf(),
            checks,
            message: Some(e.to_string()),
        };
    }
    RunSummary {
        exit_code: code,
        output_dir: out_dir.to_path_buf(),
        checks,
        message,
    }
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Output directory: the environment override, else `output.dir`.
pub fn output_dir(cfg: &Config) -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(cfg.get("output.dir")))
}

/// Parses and runs the configuration file at `path`.
pub fn run(path: &Path) -> RunSummary {
    match Config::from_file(path) {
        Ok(cfg) => run_config(&cfg, &output_dir(&cfg)),
        Err(e) => config_failure(PathBuf::new(), e.0),
    }
}
