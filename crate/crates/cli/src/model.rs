//! Model, grid and scheme from a [`Config`].

use crate::config::{Config, ConfigError};
use supdens::kernels::KernelId;
use supdens::noise::GridSpec;
use supdens::solver::{default_horizon, Coefficient, InitialConditionSpec, ModelSpec, Scheme, SchemeConfig};

fn cfg_err(e: impl std::fmt::Display) -> ConfigError {
    ConfigError(e.to_string())
}

pub fn kernel(cfg: &Config) -> Result<KernelId, ConfigError> {
    match cfg.get("model.regime") {
        "dirichlet" => Ok(KernelId::DIRICHLET),
        "neumann" => Ok(KernelId::NEUMANN),
        _ => KernelId::fourth_order(cfg.f64("model.rho")?).map_err(cfg_err),
    }
}

pub fn parse_kernel(name: &str, rho: f64) -> Result<KernelId, ConfigError> {
    match name.trim() {
        "dirichlet" => Ok(KernelId::DIRICHLET),
        "neumann" => Ok(KernelId::NEUMANN),
        "fourth_order" => KernelId::fourth_order(rho).map_err(cfg_err),
        other => Err(ConfigError(format!("unknown kernel `{other}`"))),
    }
}

/// Coefficient from the registry with its Lipschitz constant.
fn coefficient(cfg: &Config, name: &str) -> Result<(Coefficient, f64), ConfigError> {
    let p = |s: &str| cfg.f64(&format!("model.{name}_{s}"));
    let (a, b) = (p("a")?, p("b")?);
    Ok(match cfg.get(&format!("model.{name}")) {
        "zero" => (Coefficient::Constant(0.0), 0.0),
        "constant" => (Coefficient::Constant(a), 0.0),
        "identity" => (Coefficient::Affine { a: 0.0, b: 1.0 }, 1.0),
        "sin" => (Coefficient::AffineSin { a: 0.0, b: 1.0 }, 1.0),
        "affine" => (Coefficient::Affine { a, b }, b.abs()),
        "affine-sin" => (Coefficient::AffineSin { a, b }, b.abs()),
        _ => {
            let (lo, hi) = (p("lo")?, p("hi")?);
            let values = cfg.f64_list(&format!("model.{name}_values"))?.unwrap_or_default();
            if !(hi > lo) || values.len() < 2 {
                return Err(ConfigError(format!("model.{name}: a table needs lo < hi and two values")));
            }
            let h = (hi - lo) / (values.len() - 1) as f64;
            let lip = values.windows(2).map(|w| (w[1] - w[0]).abs() / h).fold(0.0, f64::max);
            (Coefficient::Tabulated { lo, hi, values }, lip)
        }
    })
}

/// `max(sup σ, 1/inf σ)`, or 2 when σ is not bounded away from 0.
fn ellipticity_constant(sigma: &Coefficient) -> f64 {
    let (lo, hi) = match sigma {
        Coefficient::Constant(a) => (*a, *a),
        Coefficient::AffineSin { a, b } => (a - b.abs(), a + b.abs()),
        Coefficient::Affine { a, b } if *b == 0.0 => (*a, *a),
        Coefficient::Tabulated { values, .. } => (
            values.iter().copied().fold(f64::INFINITY, f64::min),
            values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
        _ => (0.0, 0.0),
    };
    if lo > 0.0 {
        hi.max(1.0 / lo).max(1.0 + 1e-9)
    } else {
        2.0
    }
}

pub fn model(cfg: &Config) -> Result<ModelSpec, ConfigError> {
    let kernel = kernel(cfg)?;
    let (b, lip_b) = coefficient(cfg, "b")?;
    let (sigma, lip_sigma) = coefficient(cfg, "sigma")?;
    let u0 = match cfg.get("model.u0") {
        "zero" => InitialConditionSpec::zero(),
        "eigenmode" => InitialConditionSpec::eigenmode(&kernel, cfg.usize("model.u0_k")?).map_err(cfg_err)?,
        "cos2" => InitialConditionSpec::cos_squared(),
        "tabulated" => InitialConditionSpec::tabulated(
            cfg.f64_list("model.u0_values")?.unwrap_or_default(),
            cfg.f64("model.u0_x_star")?,
            cfg.f64("model.u0_alpha")?,
            cfg.f64("model.u0_c0")?,
            cfg.f64("model.u0_r0")?,
        )
        .map_err(cfg_err)?,
        _ if kernel.is_sine() => InitialConditionSpec::eigenmode(&kernel, 1).map_err(cfg_err)?,
        _ => InitialConditionSpec::cos_squared(),
    };
    let c_sigma = match cfg.opt_f64("model.c_sigma")? {
        Some(c) => c,
        None => ellipticity_constant(&sigma),
    };
    let m = ModelSpec {
        kernel,
        lip_b: cfg.opt_f64("model.lip_b")?.unwrap_or(lip_b),
        lip_sigma: cfg.opt_f64("model.lip_sigma")?.unwrap_or(lip_sigma),
        c_sigma,
        b,
        sigma,
        u0,
        horizon: cfg.opt_f64("model.horizon")?.unwrap_or_else(|| default_horizon(&kernel)),
    };
    m.validate().map_err(cfg_err)?;
    Ok(m)
}

pub fn grid(cfg: &Config, model: &ModelSpec) -> Result<GridSpec, ConfigError> {
    let t = cfg.opt_f64("grid.t")?.unwrap_or(model.horizon);
    let g = GridSpec::new(cfg.usize("grid.nx")?, cfg.usize("grid.nt")?, t).map_err(cfg_err)?;
    model.u0.check_certificate(&g).map_err(cfg_err)?;
    Ok(g)
}

pub fn scheme(cfg: &Config) -> Result<SchemeConfig, ConfigError> {
    Ok(SchemeConfig {
        scheme: Scheme::parse(cfg.get("grid.scheme")).map_err(cfg_err)?,
    })
}

/// `b ≡ 0`, constant `σ`, `u₀ ≡ 0`.
pub fn is_linear(m: &ModelSpec) -> bool {
    m.b.is_zero() && m.sigma.is_constant() && matches!(m.u0.kind, supdens::solver::InitialKind::Zero)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> Config {
        Config::parse(&format!("experiment = simulate\n{extra}")).unwrap()
    }

    #[test]
    fn default_is_the_nonlinear_model() {
        let m = model(&cfg("")).unwrap();
        assert_eq!(m.fingerprint(), ModelSpec::default_nonlinear(KernelId::DIRICHLET).fingerprint());
        let m = model(&cfg("model.regime = neumann")).unwrap();
        assert_eq!(m.fingerprint(), ModelSpec::default_nonlinear(KernelId::NEUMANN).fingerprint());
    }

    #[test]
    fn linear_model_from_keys() {
        let m = model(&cfg("model.b = zero\nmodel.sigma = constant\nmodel.sigma_a = 1\nmodel.u0 = zero")).unwrap();
        assert!(is_linear(&m));
        assert_eq!(m.fingerprint(), ModelSpec::linear(KernelId::DIRICHLET).fingerprint());
    }

    #[test]
    fn invalid_models_are_config_errors() {
        assert!(model(&cfg("model.lip_b = 0.5")).is_err());
        assert!(model(&cfg("model.regime = dirichlet\nmodel.u0 = cos2")).is_err());
        assert!(model(&cfg("model.regime = fourth_order\nmodel.rho = -1")).is_err());
        let c = cfg("grid.nx = 0");
        assert!(grid(&c, &model(&c).unwrap()).is_err());
    }
}
