//! Ratio verifiers for the Gaussian, L² and increment estimates of the kernels.
//!
//! Each bound has the form `LHS ≤ C · RHS` with an unquantified constant `C`
//! (or `LHS ≥ c · RHS` for the lower bound). A verifier evaluates `LHS` exactly
//! (closed forms, series, or quadrature of Gaussian image sums) on a lattice,
//! reports `sup LHS/RHS` (resp. `sup RHS/LHS`), and for scaling laws the
//! log–log slope of `LHS`.

use super::{
    dawson_unchecked, derivative_fast, eval_fast, heat, resolvent, unit_mass, Derivative, KernelId, KernelKind,
};
use crate::error::{domain, Error, Result};
use crate::quad::tanh_sinh_vec;
use crate::stats::loglog_fit;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use libm::erf;
use std::collections::BTreeMap;
use std::f64::consts::PI;

pub const BOUND_IDS: [&str; 16] = [
    "G_le_p",
    "dxG",
    "dtG",
    "p_L2",
    "G_L2",
    "L2lower",
    "space_inc",
    "prod_space",
    "time_inc",
    "prod_time",
    "cor_spacetime",
    "H_Linf",
    "H_L2",
    "H_inc",
    "H_weighted",
    "H_combined",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundId {
    GLeP,
    DxG,
    DtG,
    PL2,
    GL2,
    L2Lower,
    SpaceInc,
    ProdSpace,
    TimeInc,
    ProdTime,
    CorSpacetime,
    HLinf,
    HL2,
    HInc,
    HWeighted,
    HCombined,
}

const ALL: [BoundId; 16] = [
    BoundId::GLeP,
    BoundId::DxG,
    BoundId::DtG,
    BoundId::PL2,
    BoundId::GL2,
    BoundId::L2Lower,
    BoundId::SpaceInc,
    BoundId::ProdSpace,
    BoundId::TimeInc,
    BoundId::ProdTime,
    BoundId::CorSpacetime,
    BoundId::HLinf,
    BoundId::HL2,
    BoundId::HInc,
    BoundId::HWeighted,
    BoundId::HCombined,
];

impl BoundId {
    pub fn all() -> [BoundId; 16] {
        ALL
    }

    pub fn parse(s: &str) -> Result<BoundId> {
        BOUND_IDS
            .iter()
            .position(|&n| n == s)
            .map(|i| ALL[i])
            .ok_or_else(|| Error::UnknownBound(s.to_string()))
    }

    pub fn name(self) -> &'static str {
        BOUND_IDS[ALL.iter().position(|&b| b == self).unwrap()]
    }

    /// Human-readable statement of the estimate being checked.
    pub fn statement(self) -> &'static str {
        match self {
            BoundId::GLeP => "G_t(x,y) <= C p_t(x-y)",
            BoundId::DxG => "|d/dx G_t(x,y)| <= C t^-1 exp(-|x-y|^2/8t)",
            BoundId::DtG => "|d/dt G_t(x,y)| <= C t^-3/2 exp(-|x-y|^2/8t)",
            BoundId::PL2 => "int_0^1 p_t(x-y)^2 dy <= t^-1/2 / (2 sqrt(2 pi))",
            BoundId::GL2 => "int_0^1 G_t(x,y)^2 dy <= C t^-1/2",
            BoundId::L2Lower => "int_0^1 G^D_r(x(t),y)^2 dy >= c r^-1/2 for r <= t, x(t) = t^theta",
            BoundId::SpaceInc => "int (G_t(x,r)-G_t(xb,r))^2 dr <= C |x-xb|^2a t^(-1/2-a)",
            BoundId::ProdSpace => {
                "int_s^t int (G_{t-q}(x,r)-G_{t-q}(xb,r))^2 p_{q-s}(y-r)^2 <= C |x-xb|^2a (t-s)^(-1/2-a)"
            }
            BoundId::TimeInc => "int (G_{t-q}(xb,r)-G_{tb-q}(xb,r))^2 dr <= C |t-tb|^2b (t0-q)^(-1/2-2b)",
            BoundId::ProdTime => {
                "int_s^t0 int (G_{t-q}-G_{tb-q})^2(xb,r) p_{q-s}(y-r)^2 <= C |t-tb|^2b (t0-s)^(-1/2-2b)"
            }
            BoundId::CorSpacetime => {
                "int_0^t int |G_{t-s}(x,y)-G_{tb-s}(xb,y)|^2 <= C (|x-xb|^2a + |t-tb|^a)"
            }
            BoundId::HLinf => "sup_{x,y} |H_t(x,y)| <= C t^-1/4",
            BoundId::HL2 => "sup_x ||H_t(x,.)||_L2 <= C t^-1/8",
            BoundId::HInc => "int_0^t int |H_{t-s}(x,y)-H_{tb-s}(xb,y)|^2 <= C (|t-tb|^g + |x-xb|^2)",
            BoundId::HWeighted => {
                "int_s^t int (dH)^2 (q-s)^-1/2 <= C |x-xb|^2/sqrt(t-s) (space), C |t-tb|^a/sqrt(t0-s) (time)"
            }
            BoundId::HCombined => {
                "int_s^t int (H_{t-q}(x,r)-H_{tb-q}(xb,r))^2 (q-s)^-1/2 <= C (|t-tb|^a + |x-xb|^2)/sqrt(t-s)"
            }
        }
    }

    /// Open interval of admissible exponents and the symbol used for it.
    pub fn exponent_range(self) -> Option<(f64, f64, &'static str)> {
        match self {
            BoundId::L2Lower => Some((0.0, 0.5, "theta")),
            BoundId::SpaceInc => Some((0.0, 1.0, "alpha")),
            BoundId::ProdSpace | BoundId::CorSpacetime => Some((0.0, 0.5, "alpha")),
            BoundId::TimeInc | BoundId::ProdTime => Some((0.0, 0.25, "beta")),
            BoundId::HInc => Some((0.0, 0.75, "gamma")),
            BoundId::HWeighted | BoundId::HCombined => Some((0.0, 0.75, "alpha")),
            _ => None,
        }
    }

    /// Exponents exercised by default.
    pub fn default_exponents(self) -> Vec<f64> {
        match self.exponent_range() {
            None => vec![],
            Some((_, _, "theta")) => vec![0.25],
            Some((_, _, "beta")) => vec![0.1, 0.2],
            Some((_, _, "gamma")) => vec![0.5, 0.7],
            Some((_, hi, _)) if hi > 0.5 && self != BoundId::SpaceInc => vec![0.5, 0.7],
            Some(_) => vec![0.2, 0.4],
        }
    }

    pub fn is_fourth_order(self) -> bool {
        matches!(
            self,
            BoundId::HLinf | BoundId::HL2 | BoundId::HInc | BoundId::HWeighted | BoundId::HCombined
        )
    }

    fn is_lower(self) -> bool {
        self == BoundId::L2Lower
    }
}

/// Sampling plan for a verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub kernel: KernelId,
    /// Primary time-like axis (`t`, `t−s`, `t0−θ` or `r`, depending on the bound).
    pub times: Vec<f64>,
    /// Time lags `|t − t̄|` for increment bounds (may contain 0).
    pub lags: Vec<f64>,
    /// Number of uniform points on `[0,1]` per spatial axis.
    pub space_points: usize,
    pub exponent: Option<f64>,
    /// Times used for the log–log slope fit (empty: no fit).
    pub slope_times: Vec<f64>,
    pub slope_x: f64,
}

/// `10^lo, 10^{lo+1}, …, 10^hi`.
pub fn decades(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| 10f64.powi(e)).collect()
}

pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn refine_geometric(v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * v.len());
    for (i, &a) in v.iter().enumerate() {
        out.push(a);
        if let Some(&b) = v.get(i + 1) {
            if a > 0.0 && b > 0.0 {
                out.push((a * b).sqrt());
            } else if b > 0.0 {
                // the zero lag stays; nothing is inserted next to it
            }
        }
    }
    out
}

impl Lattice {
    /// Halves the logarithmic spacing of every time axis and doubles the spatial resolution.
    pub fn refined(&self) -> Lattice {
        Lattice {
            times: refine_geometric(&self.times),
            lags: refine_geometric(&self.lags),
            space_points: 2 * self.space_points - 1,
            ..self.clone()
        }
    }

    pub fn space(&self) -> Vec<f64> {
        let n = self.space_points.max(2);
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    pub fn describe(&self) -> String {
        let fmt = |v: &[f64]| {
            if v.is_empty() {
                "-".to_string()
            } else {
                format!("{} values in [{:e}, {:e}]", v.len(), v[0], v[v.len() - 1])
            }
        };
        format!(
            "kernel={}; times: {}; lags: {}; space: uniform {} points",
            self.kernel.label(),
            fmt(&self.times),
            fmt(&self.lags),
            self.space_points
        )
    }
}

/// Default lattice for a bound: decade-spaced times, uniform spatial grids.
pub fn default_lattice(bound: BoundId, kernel: KernelId) -> Lattice {
    let kernel = if bound.is_fourth_order() && kernel.is_second_order() {
        KernelId::fourth_order(1.0).unwrap()
    } else {
        kernel
    };
    let mut l = Lattice {
        kernel,
        times: decades(-3, 0),
        lags: vec![],
        space_points: 33,
        exponent: bound.default_exponents().first().copied(),
        slope_times: vec![],
        slope_x: 0.5,
    };
    match bound {
        BoundId::PL2 | BoundId::GL2 => {
            l.times = decades(-4, 0);
            l.slope_times = logspace(1e-4, 1e-2, 9);
        }
        BoundId::L2Lower => {
            l.times = decades(-4, -2);
            l.slope_times = logspace(1e-4, 1e-2, 9);
        }
        // the increment bounds peak at an interior ratio of separation to √t, so their
        // time axes carry 8 points per decade
        BoundId::SpaceInc => l.times = logspace(1e-3, 1.0, 25),
        BoundId::ProdSpace => {
            l.times = logspace(1e-2, 1.0, 17);
            l.space_points = 17;
        }
        BoundId::TimeInc => {
            l.times = logspace(1e-3, 1.0, 25);
            l.lags = logspace(1e-3, 1.0, 25);
        }
        BoundId::ProdTime => {
            l.times = logspace(1e-2, 1.0, 17);
            l.lags = logspace(1e-2, 1.0, 17);
            l.space_points = 5;
        }
        BoundId::CorSpacetime => {
            l.lags = std::iter::once(0.0).chain(decades(-3, 0)).collect();
            l.space_points = 17;
        }
        // the spatial parts approach their supremum as |x − x̄| → 0, at a rate linear in the spacing
        BoundId::HInc | BoundId::HCombined => {
            l.lags = std::iter::once(0.0).chain(decades(-3, 0)).collect();
            l.space_points = 65;
        }
        BoundId::HWeighted => {
            l.lags = decades(-3, 0);
            l.space_points = 65;
        }
        BoundId::HLinf | BoundId::HL2 => {
            l.times = decades(-5, -2);
            l.slope_times = decades(-5, -2);
        }
        _ => {}
    }
    l
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub exponent: f64,
    pub stderr: f64,
    pub r2: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub grid: String,
    pub max_ratio: f64,
    pub relative_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_id: String,
    pub kernel: String,
    pub exponent: Option<f64>,
    pub grid: String,
    pub max_ratio: f64,
    pub argmax_point: BTreeMap<String, f64>,
    pub slope_fit: Option<SlopeFit>,
    pub refinement: Option<Refinement>,
}

struct Sample {
    coords: Vec<(&'static str, f64)>,
    lhs: f64,
    /// time-like argument of the right-hand side
    t: f64,
    /// spatial separation entering the right-hand side
    d: f64,
    /// time lag entering the right-hand side
    lag: f64,
    /// 0: spatial part, 1: temporal part (only for the two-part weighted bound)
    part: u8,
}

fn rhs(bound: BoundId, e: f64, s: &Sample) -> f64 {
    let (t, d, lag) = (s.t, s.d, s.lag);
    match bound {
        BoundId::GLeP => heat(t, d),
        BoundId::DxG => (-d * d / (8.0 * t)).exp() / t,
        BoundId::DtG => (-d * d / (8.0 * t)).exp() / t.powf(1.5),
        BoundId::PL2 => 1.0 / (2.0 * (2.0 * PI).sqrt() * t.sqrt()),
        BoundId::GL2 => 1.0 / t.sqrt(),
        BoundId::L2Lower => 1.0 / t.sqrt(),
        BoundId::SpaceInc | BoundId::ProdSpace => d.powf(2.0 * e) * t.powf(-0.5 - e),
        BoundId::TimeInc | BoundId::ProdTime => lag.powf(2.0 * e) * t.powf(-0.5 - 2.0 * e),
        BoundId::CorSpacetime => d.powf(2.0 * e) + lag.powf(e),
        BoundId::HLinf => t.powf(-0.25),
        BoundId::HL2 => t.powf(-0.125),
        BoundId::HInc => lag.powf(e) + d * d,
        BoundId::HWeighted => {
            if s.part == 0 {
                d * d / t.sqrt()
            } else {
                lag.powf(e) / t.sqrt()
            }
        }
        BoundId::HCombined => (lag.powf(e) + d * d) / t.sqrt(),
    }
}

/// Signed Gaussian centres of `r ↦ G_u(x, r)` that reach `[0,1]`.
fn image_centres(kernel: &KernelId, x: f64, u: f64) -> Vec<(f64, f64)> {
    let m = 1 + (3.0 * u.sqrt()).ceil() as i64;
    let sign = if kernel.is_sine() { -1.0 } else { 1.0 };
    let mut out = Vec::new();
    for j in -m..=m {
        for (c, s) in [(x + 2.0 * j as f64, 1.0), (-x + 2.0 * j as f64, sign)] {
            let dist = if c < 0.0 {
                -c
            } else if c > 1.0 {
                c - 1.0
            } else {
                0.0
            };
            if dist * dist / (4.0 * u) < 45.0 {
                out.push((c, s));
            }
        }
    }
    out
}

/// `(G_{u1}(x1,r) − G_{u2}(x2,r))²` as a mixture `Σ W·p_S(r − M)`, with equal
/// components merged.
fn squared_difference_mixture(kernel: &KernelId, x1: f64, u1: f64, x2: f64, u2: f64) -> Vec<(f64, f64, f64)> {
    let mut g: Vec<(f64, f64, f64)> = image_centres(kernel, x1, u1)
        .into_iter()
        .map(|(c, s)| (c, s, u1))
        .collect();
    g.extend(image_centres(kernel, x2, u2).into_iter().map(|(c, s)| (c, -s, u2)));
    let mut terms = Vec::with_capacity(g.len() * (g.len() + 1) / 2);
    for (n, &(cn, sn, un)) in g.iter().enumerate() {
        for (m, &(cm, sm, um)) in g.iter().enumerate().skip(n) {
            let w = if m == n { 1.0 } else { 2.0 } * sn * sm * heat(un + um, cn - cm);
            if w != 0.0 {
                let v = un + um;
                terms.push((un * um / v, (um * cn + un * cm) / v, w));
            }
        }
    }
    terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out: Vec<(f64, f64, f64)> = Vec::with_capacity(terms.len());
    for t in terms {
        match out.last_mut() {
            Some(last) if last.0 == t.0 && (last.1 - t.1).abs() <= 1e-12 => last.2 += t.2,
            _ => out.push(t),
        }
    }
    out
}

/// `∫₀¹ Σ W p_S(r−M) p_w(r−y) dr` via the Gaussian product rule.
fn mixture_against_gaussian(mix: &[(f64, f64, f64)], y: f64, w: f64) -> f64 {
    let mut s = 0.0;
    for &(sv, m, wt) in mix {
        let z = m - y;
        if z * z > 160.0 * (sv + w) {
            continue;
        }
        let c = heat(sv + w, z);
        let s2 = sv * w / (sv + w);
        let m2 = (m * w + y * sv) / (sv + w);
        s += wt * c * unit_mass(m2, s2);
    }
    s.max(0.0)
}

/// `∫₀^τ ∫₀¹ (G_u(x1,r) − G_{u+lag}(x2,r))² p_v(y−r)² dr dv` with `u = τ − v`,
/// for every `y` in `ys`. Values below `1e-14` are not resolved.
fn product_integrals(kernel: &KernelId, tau: f64, x1: f64, x2: f64, lag: f64, ys: &[f64]) -> Vec<f64> {
    // p_v(z)² = (8πv)^{-1/2} p_{v/2}(z)
    tanh_sinh_vec(
        |_, v, u, out| {
            let mix = squared_difference_mixture(kernel, x1, u, x2, u + lag);
            let c = (8.0 * PI * v).powf(-0.5);
            for (o, &y) in out.iter_mut().zip(ys) {
                *o = c * mixture_against_gaussian(&mix, y, 0.5 * v);
            }
        },
        0.0,
        tau,
        ys.len(),
        1e-6,
        1e-14,
    )
}

#[cfg(test)]
fn product_integral(kernel: &KernelId, tau: f64, x1: f64, x2: f64, lag: f64, y: f64) -> f64 {
    product_integrals(kernel, tau, x1, x2, lag, &[y])[0]
}

/// `Σ_k 2 c_k² ∫₀^τ v^{-1/2} e^{-2λ_k(τ−v)} dv` with `c_k = f_k(x) − e^{−λ_k lag} f_k(xb)`.
///
/// The inner integral is `√(2/λ) W(√(2λτ))`. Its leading part `1/(2λ√τ)` sums to
/// resolvent values; the remainder decays like `λ^{-2}` and is summed directly.
fn weighted_series(kernel: &KernelId, tau: f64, x: f64, xb: f64, lag: f64) -> f64 {
    let r = |t: f64, a: f64, b: f64| resolvent(kernel, t, a, b);
    let lead = (r(0.0, x, x) - 2.0 * r(lag, x, xb) + r(2.0 * lag, xb, xb)).max(0.0) / (2.0 * tau.sqrt());
    let mut rem = 0.0;
    let mut k = 1usize;
    loop {
        let l = kernel.lambda(k);
        let c = kernel.mode(k, x) - (-l * lag).exp() * kernel.mode(k, xb);
        let z = (2.0 * l * tau).sqrt();
        let w = (2.0 / l).sqrt();
        rem += 2.0 * c * c * w * (dawson_unchecked(z) - 0.5 / z);
        // for z ≥ 2, 0 ≤ W(z) − 1/(2z) ≤ 1/(2z³); the terms then decay like k^{-8}
        let bound = 8.0 * w / (2.0 * z * z * z) * k as f64 / 7.0;
        if (z >= 2.0 && bound < 1e-15 * (lead + rem).abs()) || k > 1_000_000 {
            return lead + rem;
        }
        k += 1;
    }
}

/// `∫₀ᵗ ∫₀¹ |G_{t−s}(x,y) − G_{t+lag−s}(xb,y)|² dy ds` via resolvent sums.
fn spacetime_integral(kernel: &KernelId, t: f64, lag: f64, x: f64, xb: f64) -> f64 {
    let r = |tau: f64, a: f64, b: f64| resolvent(kernel, tau, a, b);
    let v = 0.5 * (r(0.0, x, x) - r(2.0 * t, x, x)) - (r(lag, x, xb) - r(lag + 2.0 * t, x, xb))
        + 0.5 * (r(2.0 * lag, xb, xb) - r(2.0 * lag + 2.0 * t, xb, xb));
    v.max(0.0)
}

fn p_l2_exact(tau: f64, x: f64) -> f64 {
    let s = (2.0 * tau).sqrt();
    (erf((1.0 - x) / s) + erf(x / s)) / (4.0 * (2.0 * PI * tau).sqrt())
}

fn check_lattice(bound: BoundId, lattice: &Lattice, exponents: &[f64]) -> Result<()> {
    let k = &lattice.kernel;
    if bound.is_fourth_order() != (k.kind == KernelKind::FourthOrder) {
        return domain(format!(
            "bound {} is not stated for the {} kernel",
            bound.name(),
            k.label()
        ));
    }
    if lattice.times.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return domain("lattice times must be positive");
    }
    if lattice.lags.iter().any(|&t| !(t >= 0.0 && t.is_finite())) {
        return domain("lattice lags must be nonnegative");
    }
    if lattice.space_points < 2 {
        return domain("at least two spatial points are required");
    }
    if bound.is_fourth_order() && lattice.times.iter().any(|&t| t < super::FOURTH_ORDER_MIN_T) {
        return domain("fourth-order kernel not certified below t = 1e-6");
    }
    match bound.exponent_range() {
        Some((lo, hi, sym)) => {
            if exponents.is_empty() {
                return domain(format!("bound {} requires an exponent {sym}", bound.name()));
            }
            for &e in exponents {
                if !(e > lo && e < hi) {
                    return domain(format!(
                        "{sym} = {e} outside ({lo}, {hi}) for bound {}",
                        bound.name()
                    ));
                }
            }
        }
        None => {}
    }
    if matches!(
        bound,
        BoundId::TimeInc | BoundId::ProdTime | BoundId::HWeighted
    ) && !lattice.lags.iter().any(|&l| l > 0.0)
    {
        return domain("time-increment bounds need a positive lag");
    }
    Ok(())
}

/// Uniform lattice plus offsets `x̄ ± f√τ`: near a reflecting boundary the
/// supremum over `y` sits at a distance proportional to `√τ`.
fn time_product_ys(xs: &[f64], xb: f64, tau: f64) -> Vec<f64> {
    let m = xs.len().saturating_sub(1).max(1);
    let mut ys = xs.to_vec();
    for f in logspace(0.1, 3.0, m) {
        for y in [xb - f * tau.sqrt(), xb + f * tau.sqrt()] {
            if (0.0..=1.0).contains(&y) {
                ys.push(y);
            }
        }
    }
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    ys
}

fn samples(bound: BoundId, l: &Lattice, theta: f64) -> Vec<Sample> {
    let k = l.kernel;
    let xs = l.space();
    let mut params: Vec<[f64; 5]> = Vec::new();
    let pairs = |params: &mut Vec<[f64; 5]>, ordered: bool, a: f64, b: f64| {
        for &x in &xs {
            for &y in &xs {
                if ordered && y <= x {
                    continue;
                }
                params.push([a, b, x, y, 0.0]);
            }
        }
    };
    match bound {
        BoundId::GLeP | BoundId::DxG | BoundId::DtG | BoundId::HLinf => {
            for &t in &l.times {
                pairs(&mut params, false, t, 0.0);
            }
        }
        BoundId::PL2 | BoundId::GL2 | BoundId::HL2 => {
            for &t in &l.times {
                for &x in &xs {
                    params.push([t, 0.0, x, 0.0, 0.0]);
                }
            }
        }
        BoundId::L2Lower => {
            for &t in &l.times {
                for &r in &l.times {
                    if r <= t {
                        params.push([r, t, t.powf(theta), 0.0, 0.0]);
                    }
                }
            }
        }
        BoundId::SpaceInc => {
            for &t in &l.times {
                pairs(&mut params, true, t, 0.0);
            }
        }
        BoundId::ProdSpace => {
            for &t in &l.times {
                for &x in &xs {
                    for &xb in &xs {
                        // r ↦ 1 − r maps the lattice onto itself and leaves both sides unchanged
                        if xb <= x || x + xb > 1.0 + 1e-12 {
                            continue;
                        }
                        params.push([t, 0.0, x, xb, 0.0]);
                    }
                }
            }
        }
        BoundId::TimeInc => {
            for &a in &l.times {
                for &lag in l.lags.iter().filter(|&&v| v > 0.0) {
                    for &x in &xs {
                        params.push([a, lag, x, 0.0, 0.0]);
                    }
                }
            }
        }
        BoundId::ProdTime => {
            for &a in &l.times {
                for &lag in l.lags.iter().filter(|&&v| v > 0.0) {
                    for &x in xs.iter().filter(|&&x| x <= 0.5 + 1e-12) {
                        params.push([a, lag, x, 0.0, 0.0]);
                    }
                }
            }
        }
        BoundId::CorSpacetime | BoundId::HInc | BoundId::HCombined => {
            for &t in &l.times {
                for &lag in &l.lags {
                    for &x in &xs {
                        for &xb in &xs {
                            if lag == 0.0 && x == xb {
                                continue;
                            }
                            params.push([t, lag, x, xb, 0.0]);
                        }
                    }
                }
            }
        }
        BoundId::HWeighted => {
            for &t in &l.times {
                pairs(&mut params, true, t, 0.0);
                for &lag in l.lags.iter().filter(|&&v| v > 0.0) {
                    for &x in &xs {
                        params.push([t, lag, x, 0.0, 1.0]);
                    }
                }
            }
        }
    }

    if matches!(bound, BoundId::ProdSpace | BoundId::ProdTime) {
        // one quadrature per (τ, x, x̄ or lag) serves every y
        return params
            .par_iter()
            .flat_map_iter(|p| {
                let [a, b, c, d, _] = *p;
                let (tau, lag, x, xb) = if bound == BoundId::ProdSpace { (a, 0.0, c, d) } else { (a, b, c, c) };
                let ys = if bound == BoundId::ProdSpace { xs.clone() } else { time_product_ys(&xs, x, tau) };
                let vals = product_integrals(&k, tau, x, xb, lag, &ys);
                ys.iter()
                    .zip(vals)
                    .map(|(&y, lhs)| {
                        if bound == BoundId::ProdSpace {
                            Sample {
                                coords: vec![("t_minus_s", tau), ("x", x), ("xb", xb), ("y", y)],
                                lhs,
                                t: tau,
                                d: xb - x,
                                lag: 0.0,
                                part: 0,
                            }
                        } else {
                            Sample {
                                coords: vec![("t0_minus_s", tau), ("lag", lag), ("xb", x), ("y", y)],
                                lhs,
                                t: tau,
                                d: 0.0,
                                lag,
                                part: 0,
                            }
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
    }
    params
        .par_iter()
        .map(|p| {
            let [a, b, c, d, e] = *p;
            match bound {
                BoundId::GLeP | BoundId::DxG | BoundId::DtG | BoundId::HLinf => {
                    let (t, x, y) = (a, c, d);
                    let lhs = match bound {
                        BoundId::GLeP => eval_fast(&k, t, x, y),
                        BoundId::DxG => derivative_fast(&k, Derivative::DDx, t, x, y).abs(),
                        BoundId::DtG => derivative_fast(&k, Derivative::DDt, t, x, y).abs(),
                        _ => eval_fast(&k, t, x, y).abs(),
                    };
                    Sample {
                        coords: vec![("t", t), ("x", x), ("y", y)],
                        lhs,
                        t,
                        d: (x - y).abs(),
                        lag: 0.0,
                        part: 0,
                    }
                }
                BoundId::PL2 | BoundId::GL2 | BoundId::HL2 => {
                    let (t, x) = (a, c);
                    let lhs = match bound {
                        BoundId::PL2 => p_l2_exact(t, x),
                        BoundId::GL2 => eval_fast(&k, 2.0 * t, x, x),
                        _ => eval_fast(&k, 2.0 * t, x, x).sqrt(),
                    };
                    Sample {
                        coords: vec![("t", t), ("x", x)],
                        lhs,
                        t,
                        d: 0.0,
                        lag: 0.0,
                        part: 0,
                    }
                }
                BoundId::L2Lower => {
                    let (r, t, x) = (a, b, c);
                    Sample {
                        coords: vec![("r", r), ("t", t), ("x", x)],
                        lhs: eval_fast(&k, 2.0 * r, x, x),
                        t: r,
                        d: 0.0,
                        lag: 0.0,
                        part: 0,
                    }
                }
                BoundId::SpaceInc => {
                    let (t, x, xb) = (a, c, d);
                    let g = |p: f64, q: f64| eval_fast(&k, 2.0 * t, p, q);
                    let lhs = (g(x, x) - 2.0 * g(x, xb) + g(xb, xb)).max(0.0);
                    Sample {
                        coords: vec![("t", t), ("x", x), ("xb", xb)],
                        lhs,
                        t,
                        d: xb - x,
                        lag: 0.0,
                        part: 0,
                    }
                }
                BoundId::TimeInc => {
                    let (s, lag, x) = (a, b, c);
                    let g = |t: f64| eval_fast(&k, t, x, x);
                    let lhs = (g(2.0 * s) - 2.0 * g(2.0 * s + lag) + g(2.0 * s + 2.0 * lag)).max(0.0);
                    Sample {
                        coords: vec![("t0_minus_theta", s), ("lag", lag), ("xb", x)],
                        lhs,
                        t: s,
                        d: 0.0,
                        lag,
                        part: 0,
                    }
                }
                BoundId::ProdSpace | BoundId::ProdTime => unreachable!(),
                BoundId::CorSpacetime | BoundId::HInc => {
                    let (t, lag, x, xb) = (a, b, c, d);
                    Sample {
                        coords: vec![("t", t), ("lag", lag), ("x", x), ("xb", xb)],
                        lhs: spacetime_integral(&k, t, lag, x, xb),
                        t,
                        d: (x - xb).abs(),
                        lag,
                        part: 0,
                    }
                }
                BoundId::HCombined => {
                    let (tau, lag, x, xb) = (a, b, c, d);
                    let lhs = weighted_series(&k, tau, x, xb, lag);
                    Sample {
                        coords: vec![("t_minus_s", tau), ("lag", lag), ("x", x), ("xb", xb)],
                        lhs,
                        t: tau,
                        d: (x - xb).abs(),
                        lag,
                        part: 0,
                    }
                }
                BoundId::HWeighted => {
                    if e == 0.0 {
                        let (tau, x, xb) = (a, c, d);
                        let lhs = weighted_series(&k, tau, x, xb, 0.0);
                        Sample {
                            coords: vec![("part", 0.0), ("t_minus_s", tau), ("x", x), ("xb", xb)],
                            lhs,
                            t: tau,
                            d: xb - x,
                            lag: 0.0,
                            part: 0,
                        }
                    } else {
                        let (tau, lag, x) = (a, b, c);
                        let lhs = weighted_series(&k, tau, x, x, lag);
                        Sample {
                            coords: vec![("part", 1.0), ("t0_minus_s", tau), ("lag", lag), ("x", x)],
                            lhs,
                            t: tau,
                            d: 0.0,
                            lag,
                            part: 1,
                        }
                    }
                }
            }
        })
        .collect()
}

fn slope_fit(bound: BoundId, l: &Lattice) -> Option<SlopeFit> {
    if l.slope_times.len() < 2 {
        return None;
    }
    let k = l.kernel;
    let xs = l.space();
    let values: Vec<f64> = l
        .slope_times
        .iter()
        .map(|&t| match bound {
            BoundId::PL2 => p_l2_exact(t, l.slope_x),
            BoundId::GL2 | BoundId::L2Lower => eval_fast(&k, 2.0 * t, l.slope_x, l.slope_x),
            BoundId::HLinf => xs
                .iter()
                .flat_map(|&x| xs.iter().map(move |&y| (x, y)))
                .map(|(x, y)| eval_fast(&k, t, x, y).abs())
                .fold(0.0, f64::max),
            BoundId::HL2 => xs
                .iter()
                .map(|&x| eval_fast(&k, 2.0 * t, x, x).sqrt())
                .fold(0.0, f64::max),
            _ => f64::NAN,
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    loglog_fit(&l.slope_times, &values).map(|f| SlopeFit {
        exponent: f.slope,
        stderr: f.stderr,
        r2: f.r2,
        points: values.len(),
    })
}

fn reduce(bound: BoundId, e: f64, samples: &[Sample]) -> (f64, BTreeMap<String, f64>) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = BTreeMap::new();
    for s in samples {
        let r = rhs(bound, e, s);
        let ratio = if bound.is_lower() { r / s.lhs } else { s.lhs / r };
        if ratio > best || (ratio.is_nan() && best.is_finite()) {
            best = ratio;
            arg = s.coords.iter().map(|&(n, v)| (n.to_string(), v)).collect();
        }
    }
    (best, arg)
}

/// Evaluate the bound once per exponent, sharing all left-hand sides.
pub fn verify_bound_multi(bound: BoundId, lattice: &Lattice, exponents: &[f64]) -> Result<Vec<BoundReport>> {
    let exps: Vec<f64> = if bound.exponent_range().is_some() {
        exponents.to_vec()
    } else {
        vec![f64::NAN]
    };
    check_lattice(bound, lattice, if bound.exponent_range().is_some() { &exps } else { &[] })?;
    // the moving-point lower bound puts its exponent into the lattice itself
    let groups: Vec<(Vec<Sample>, Vec<f64>)> = if bound == BoundId::L2Lower {
        exps.iter().map(|&th| (samples(bound, lattice, th), vec![th])).collect()
    } else {
        vec![(samples(bound, lattice, 0.0), exps.clone())]
    };
    let fit = slope_fit(bound, lattice);
    let mut out = Vec::new();
    for (ss, es) in &groups {
        for &e in es {
            let (max_ratio, argmax_point) = reduce(bound, e, ss);
            out.push(BoundReport {
                bound_id: bound.name().to_string(),
                kernel: lattice.kernel.label(),
                exponent: if e.is_nan() { None } else { Some(e) },
                grid: lattice.describe(),
                max_ratio,
                argmax_point,
                slope_fit: fit,
                refinement: None,
            });
        }
    }
    Ok(out)
}

/// Evaluate one bound on one lattice, using `lattice.exponent` where applicable.
pub fn verify_bound(bound_id: &str, lattice: &Lattice) -> Result<BoundReport> {
    let bound = BoundId::parse(bound_id)?;
    let e: Vec<f64> = lattice.exponent.into_iter().collect();
    Ok(verify_bound_multi(bound, lattice, &e)?.remove(0))
}

/// As [`verify_bound_multi`], additionally evaluating the refined lattice and
/// recording the relative change of the maximal ratio.
pub fn verify_bound_refined(bound: BoundId, lattice: &Lattice, exponents: &[f64]) -> Result<Vec<BoundReport>> {
    let coarse = verify_bound_multi(bound, lattice, exponents)?;
    let fine_lattice = lattice.refined();
    let fine = verify_bound_multi(bound, &fine_lattice, exponents)?;
    Ok(coarse
        .into_iter()
        .zip(fine)
        .map(|(mut c, f)| {
            c.refinement = Some(Refinement {
                grid: f.grid.clone(),
                max_ratio: f.max_ratio,
                relative_delta: (f.max_ratio - c.max_ratio).abs() / c.max_ratio.abs(),
            });
            c
        })
        .collect())
}
