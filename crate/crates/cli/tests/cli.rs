use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use supdens_cli::config::Config;
use supdens_cli::model;

fn supdens(args: &[&Path], out: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_supdens"));
    c.args(args);
    if let Some(o) = out {
        c.env(supdens_cli::OUTPUT_ENV, o);
    }
    c.output().unwrap()
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn repo_configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn shipped_configs_are_valid() {
    let all = repo_configs();
    assert!(all.len() >= 8);
    for p in all {
        let cfg = Config::from_file(&p).unwrap_or_else(|e| panic!("{}: {}", p.display(), e.0));
        let m = model::model(&cfg).unwrap_or_else(|e| panic!("{}: {}", p.display(), e.0));
        model::grid(&cfg, &m).unwrap();
        model::scheme(&cfg).unwrap();
    }
}

#[test]
fn eigenmode_run_writes_outputs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        d.path(),
        "e.cfg",
        "experiment = simulate\nmodel.b = zero\nmodel.sigma = zero\nmodel.u0 = eigenmode\nensemble.n = 1\ngrid.nt = 256\n",
    );
    let out = d.path().join("out");
    let r = supdens(&[Path::new("run"), &cfg], Some(&out));
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["passed"], true);
    let hash = manifest["config_hash"].as_str().unwrap();
    let mut csvs = 0;
    for name in manifest["outputs"].as_array().unwrap() {
        let p = out.join(name.as_str().unwrap());
        assert!(p.exists(), "{}", p.display());
        if p.extension().is_some_and(|e| e == "csv") {
            csvs += 1;
            assert!(fs::read_to_string(&p).unwrap().starts_with(&format!("# manifest={hash}\n")));
        }
    }
    assert!(csvs > 0);
    assert!(out.join("execution.txt").exists());
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let bad = write_cfg(d.path(), "bad.cfg", "experiment = simulate\ngrid.nz = 3\n");
    assert_eq!(supdens(&[Path::new("run"), &bad], Some(&d.path().join("a"))).status.code(), Some(2));
    let missing = d.path().join("missing.cfg");
    assert_eq!(supdens(&[Path::new("run"), &missing], Some(&d.path().join("b"))).status.code(), Some(2));
    let no_exp = write_cfg(d.path(), "noexp.cfg", "grid.nx = 16\n");
    assert_eq!(supdens(&[Path::new("run"), &no_exp], Some(&d.path().join("c"))).status.code(), Some(2));
    // a zero-width acceptance band cannot hold for a Monte Carlo variance
    let strict = write_cfg(
        d.path(),
        "strict.cfg",
        "experiment = simulate\nmodel.b = zero\nmodel.sigma = constant\nmodel.sigma_a = 1\nmodel.u0 = zero\n\
         grid.nx = 16\ngrid.nt = 256\nensemble.n = 50\nsimulate.sigmas = 1e-9\n",
    );
    let r = supdens(&[Path::new("run"), &strict], Some(&d.path().join("d")));
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("FAIL"));
    assert!(d.path().join("d/manifest.json").exists());
}

#[test]
fn report_merges_and_is_stable() {
    let d = tempfile::tempdir().unwrap();
    let empty = d.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(supdens(&[Path::new("report"), &empty], None).status.code(), Some(2));

    let runs = d.path().join("runs");
    let a = write_cfg(d.path(), "a.cfg", "experiment = escape\ngrid.nx = 16\ngrid.nt = 256\nensemble.n = 32\nescape.min_fraction = 0\n");
    assert_eq!(supdens(&[Path::new("run"), &a], Some(&runs.join("a"))).status.code(), Some(0));
    assert_eq!(supdens(&[Path::new("report"), &runs], None).status.code(), Some(0));
    let first = fs::read(runs.join("report.md")).unwrap();
    assert_eq!(supdens(&[Path::new("report"), &runs], None).status.code(), Some(0));
    assert_eq!(fs::read(runs.join("report.md")).unwrap(), first);

    let b = write_cfg(
        d.path(),
        "b.cfg",
        "experiment = escape\ngrid.nx = 16\ngrid.nt = 256\nensemble.n = 32\nescape.min_fraction = 1.5\n",
    );
    assert_eq!(supdens(&[Path::new("run"), &b], Some(&runs.join("b"))).status.code(), Some(1));
    assert_eq!(supdens(&[Path::new("report"), &runs], None).status.code(), Some(1));
    assert!(fs::read_to_string(runs.join("report.md")).unwrap().contains("FAIL"));
}

#[test]
fn keys_lists_every_key() {
    let r = supdens(&[Path::new("keys")], None);
    assert_eq!(r.status.code(), Some(0));
    let text = String::from_utf8(r.stdout).unwrap();
    for k in ["experiment", "output.dir", "run.workers", "model.regime", "grid.scheme", "escape.mode"] {
        assert!(text.lines().any(|l| l.starts_with(k)), "{k}");
    }
}
