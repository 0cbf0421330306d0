//! Flat `section.key = value` run configuration.
//!
//! Every key has a default; `auto` defers the choice to the experiment, which
//! derives it from the kernel and grid. Lines starting with `#` are comments.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Choice(&'static [&'static str]),
    Float,
    Int,
    Bool,
    FloatList,
    IntList,
    /// comma-separated `t:x` pairs
    PointList,
    Text,
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(key: &'static str, kind: Kind, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, kind, default, help }
}

pub const EXPERIMENTS: &[&str] = &[
    "kernels-verify",
    "simulate",
    "malliavin-check",
    "density",
    "holder",
    "smallball",
    "escape",
    "argmax-gamma",
    "report",
];

const COEFFS: &[&str] = &["zero", "constant", "identity", "sin", "affine", "affine-sin", "tabulated"];

use Kind::*;

/// Every accepted key.
pub const KEYS: &[KeySpec] = &[
    k("experiment", Choice(EXPERIMENTS), "", "experiment to run"),
    k("output.dir", Text, "out", "output directory (overridden by SUPDENS_OUTPUT_DIR)"),
    k("output.plots", Bool, "true", "emit SVG plots"),
    k("run.workers", Int, "0", "worker threads; 0 uses all cores"),
    k("model.regime", Choice(&["dirichlet", "neumann", "fourth_order"]), "dirichlet", "boundary regime"),
    k("model.rho", Float, "1", "second-order coefficient of the fourth-order equation"),
    k("model.b", Choice(COEFFS), "sin", "drift coefficient"),
    k("model.b_a", Float, "0", "drift parameter a"),
    k("model.b_b", Float, "1", "drift parameter b"),
    k("model.b_lo", Float, "-1", "drift table lower end"),
    k("model.b_hi", Float, "1", "drift table upper end"),
    k("model.b_values", FloatList, "0,0", "drift table values"),
    k("model.sigma", Choice(COEFFS), "affine-sin", "diffusion coefficient"),
    k("model.sigma_a", Float, "1.25", "diffusion parameter a"),
    k("model.sigma_b", Float, "0.25", "diffusion parameter b"),
    k("model.sigma_lo", Float, "-1", "diffusion table lower end"),
    k("model.sigma_hi", Float, "1", "diffusion table upper end"),
    k("model.sigma_values", FloatList, "1,1", "diffusion table values"),
    k("model.lip_b", Float, "auto", "Lipschitz constant of b"),
    k("model.lip_sigma", Float, "auto", "Lipschitz constant of sigma"),
    k("model.c_sigma", Float, "auto", "ellipticity constant C_sigma"),
    k("model.u0", Choice(&["default", "zero", "eigenmode", "cos2", "tabulated"]), "default", "initial datum"),
    k("model.u0_k", Int, "1", "eigenmode index"),
    k("model.u0_values", FloatList, "0,1,0", "tabulated initial datum on a uniform grid of [0,1]"),
    k("model.u0_x_star", Float, "0.5", "maximiser of a tabulated datum"),
    k("model.u0_alpha", Float, "1", "Hölder exponent at the maximiser"),
    k("model.u0_c0", Float, "2", "Hölder constant at the maximiser"),
    k("model.u0_r0", Float, "0.1", "radius of the Hölder certificate"),
    k("model.horizon", Float, "auto", "time horizon T"),
    k("grid.nx", Int, "64", "spatial cells"),
    k("grid.nt", Int, "4096", "time steps"),
    k("grid.t", Float, "auto", "grid horizon; defaults to the model horizon"),
    k("grid.scheme", Choice(&["spectral", "fd"]), "spectral", "time stepper"),
    k("ensemble.n", Int, "100", "number of paths"),
    k("ensemble.seed", Int, "0", "noise seed"),
    k("kernels.bounds", Text, "all", "comma-separated bound ids, or all"),
    k("kernels.second_order", Text, "dirichlet,neumann", "kernels for the second-order bounds"),
    k("kernels.refine", Bool, "true", "also evaluate the refined lattice"),
    k("kernels.tolerance", Float, "0.01", "largest relative change under refinement"),
    k("kernels.duality", Bool, "true", "compare series and image evaluations"),
    k("kernels.duality_tolerance", Float, "1e-10", "largest series-image difference"),
    k("simulate.path", Int, "0", "path index written out"),
    k("simulate.snapshots", FloatList, "auto", "times of the written spatial profiles"),
    k("simulate.probes", PointList, "auto", "probe points t:x for ensemble statistics"),
    k("simulate.tolerance", Float, "1e-6", "error allowed against the decaying eigenmode"),
    k("simulate.sigmas", Float, "3", "standard errors allowed against the linear variance"),
    k("malliavin.pairs", Int, "50", "random source/target pairs for the bump check"),
    k("malliavin.tangent_pairs", Int, "20", "random pairs for the tangent check"),
    k("malliavin.h", Float, "auto", "noise bump; defaults to 1e-4 sqrt(dt dx), or 1 for linear models"),
    k("malliavin.tolerance", Float, "auto", "bump tolerance; defaults to 1e-3, or 1e-10 for linear models"),
    k("malliavin.tangent_tolerance", Float, "1e-10", "adjoint against tangent tolerance"),
    k("malliavin.path", Int, "0", "path index used for the pair checks"),
    k("malliavin.envelope", Bool, "false", "also run the ensemble envelope"),
    k("malliavin.k", Int, "2", "moment order of the envelope"),
    k("malliavin.target", PointList, "auto", "envelope target t:x"),
    k("malliavin.slope_range", FloatList, "auto", "accepted decay slope of E|D|^2 (fourth order)"),
    k("density.region", Text, "auto", "full, sdelta:d, ldelta:d or compact:t0,t1,x0,x1"),
    k("density.bandwidth", Text, "silverman", "silverman or a positive number"),
    k("density.deltas", FloatList, "0.04,0.02,0.01", "atom-scan window widths"),
    k("density.ratio_range", FloatList, "1.7,2.3", "accepted window-mass ratios"),
    k("density.kde_tolerance", Float, "1e-3", "accepted deviation of the KDE integral from 1"),
    k("density.refine", Bool, "false", "compare with the sup law on a grid twice as fine"),
    k("holder.axes", Text, "time,space", "axes to regress"),
    k("holder.field", Choice(&["solution", "malliavin", "both"]), "solution", "field whose increments are regressed"),
    k("holder.x", Float, "0.5", "location of the time series"),
    k("holder.t", Float, "auto", "time of the spatial profile; defaults to T/2"),
    k("holder.t_min", Float, "auto", "start of the time series; defaults to T/4"),
    k("holder.time_lags", IntList, "auto", "time lags in steps"),
    k("holder.space_lags", IntList, "auto", "space lags in cells"),
    k("holder.malliavin_time_lags", IntList, "auto", "time lags for the derivative field"),
    k("holder.malliavin_space_lags", IntList, "auto", "space lags for the derivative field"),
    k("holder.time_range", FloatList, "auto", "accepted time slope"),
    k("holder.space_range", FloatList, "auto", "accepted space slope"),
    k("holder.malliavin_time_range", FloatList, "auto", "accepted time slope of the derivative field"),
    k("holder.malliavin_space_range", FloatList, "auto", "accepted space slope of the derivative field"),
    k("holder.malliavin_n", Int, "auto", "paths for the derivative field; defaults to ensemble.n"),
    k("smallball.target", PointList, "auto", "target t:x; defaults to T/2:0.5"),
    k("smallball.ys", FloatList, "auto", "thresholds; defaults to fractions of the ensemble median"),
    k("smallball.r1_eps", FloatList, "auto", "eps values of the deterministic rate"),
    k("smallball.r1_range", FloatList, "auto", "accepted deterministic rate"),
    k("escape.mode", Choice(&["fixed-star", "moving-point"]), "fixed-star", "escape event"),
    k("escape.theta", Float, "auto", "moving-point exponent; defaults to the midpoint of its interval"),
    k("escape.probes", FloatList, "auto", "probe times"),
    k("escape.min_fraction", Float, "0.95", "fixed-star: required fraction of paths whose supremum escapes"),
    k("argmax.region", Text, "auto", "region of the supremum"),
    k("report.dir", Text, "auto", "directory merged by the report; defaults to output.dir"),
];

/// Keys that steer execution but not results; they are kept out of the hash.
pub const EXECUTION_KEYS: &[&str] = &["output.dir", "output.plots", "run.workers"];

pub fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

fn check_value(s: &KeySpec, v: &str) -> Result<(), ConfigError> {
    if v == "auto" && s.default == "auto" {
        return Ok(());
    }
    let bad = |what: &str| err(format!("`{}`: expected {what}, got `{v}`", s.key));
    let float = |x: &str| x.trim().parse::<f64>().ok().filter(|f| f.is_finite());
    match s.kind {
        Choice(opts) => {
            if !opts.contains(&v) {
                return bad(&format!("one of {}", opts.join(", ")));
            }
        }
        Float => {
            if float(v).is_none() {
                return bad("a finite number");
            }
        }
        Int => {
            if v.parse::<u64>().is_err() {
                return bad("a non-negative integer");
            }
        }
        Bool => {
            if v != "true" && v != "false" {
                return bad("true or false");
            }
        }
        FloatList => {
            if v.split(',').any(|x| float(x).is_none()) {
                return bad("a comma-separated list of numbers");
            }
        }
        IntList => {
            if v.split(',').any(|x| x.trim().parse::<usize>().is_err()) {
                return bad("a comma-separated list of integers");
            }
        }
        PointList => {
            let ok = v.split(',').all(|p| {
                p.split_once(':')
                    .map(|(a, b)| float(a).is_some() && float(b).is_some())
                    .unwrap_or(false)
            });
            if !ok {
                return bad("comma-separated t:x pairs");
            }
        }
        Text => {}
    }
    Ok(())
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut given = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected `key = value`", n + 1));
            };
            let (key, value) = (key.trim(), value.trim());
            if spec(key).is_none() {
                return err(format!("line {}: unknown key `{key}`", n + 1));
            }
            if given.insert(key.to_string(), value.to_string()).is_some() {
                return err(format!("line {}: duplicate key `{key}`", n + 1));
            }
        }
        let mut cfg = Config { values: BTreeMap::new() };
        for s in KEYS {
            cfg.values.insert(s.key.to_string(), s.default.to_string());
        }
        for (key, value) in given {
            cfg.set(&key, &value)?;
        }
        if cfg.get("experiment").is_empty() {
            return err("`experiment` is required");
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let s = spec(key).ok_or_else(|| ConfigError(format!("unknown key `{key}`")))?;
        check_value(s, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn is_auto(&self, key: &str) -> bool {
        self.get(key) == "auto"
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get(key)
            .parse()
            .map_err(|_| ConfigError(format!("`{key}` has no numeric value")))
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        if self.is_auto(key) {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.get(key)
            .parse()
            .map_err(|_| ConfigError(format!("`{key}` has no integer value")))
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        Ok(self.u64(key)? as usize)
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        if self.is_auto(key) {
            Ok(None)
        } else {
            self.usize(key).map(Some)
        }
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        if self.is_auto(key) {
            return Ok(None);
        }
        self.get(key)
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| ConfigError(format!("`{key}`: bad number `{x}`"))))
            .collect::<Result<Vec<f64>, _>>()
            .map(Some)
    }

    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        if self.is_auto(key) {
            return Ok(None);
        }
        self.get(key)
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| ConfigError(format!("`{key}`: bad integer `{x}`"))))
            .collect::<Result<Vec<usize>, _>>()
            .map(Some)
    }

    pub fn points(&self, key: &str) -> Result<Option<Vec<(f64, f64)>>, ConfigError> {
        if self.is_auto(key) {
            return Ok(None);
        }
        self.get(key)
            .split(',')
            .map(|p| {
                let (a, b) = p.split_once(':').ok_or_else(|| ConfigError(format!("`{key}`: bad point `{p}`")))?;
                let a = a.trim().parse().map_err(|_| ConfigError(format!("`{key}`: bad point `{p}`")))?;
                let b = b.trim().parse().map_err(|_| ConfigError(format!("`{key}`: bad point `{p}`")))?;
                Ok((a, b))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Two-element range `lo,hi`.
    pub fn range(&self, key: &str) -> Result<Option<(f64, f64)>, ConfigError> {
        match self.f64_list(key)? {
            None => Ok(None),
            Some(v) if v.len() == 2 && v[0] <= v[1] => Ok(Some((v[0], v[1]))),
            Some(_) => err(format!("`{key}` must be `lo,hi` with lo <= hi")),
        }
    }

    /// The keys that determine results, with their resolved values.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter(|(k, _)| !EXECUTION_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn canonical_text(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Config::canonical_text`].
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical_text().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Plain-text key reference, one key per line.
pub fn key_reference() -> String {
    let mut s = String::new();
    for k in KEYS {
        let d = if k.default.is_empty() { "(required)" } else { k.default };
        s.push_str(&format!("{:<32} {:<20} {}\n", k.key, d, k.help));
    }
    s
}
