//! Green's functions of the linear operators on `[0,1]`.
//!
//! * Dirichlet heat: `G^D_t(x,y) = 2 Σ_{k≥1} e^{-k²π²t} sin(kπx) sin(kπy)`
//! * Neumann heat: `G^N_t(x,y) = 1 + 2 Σ_{k≥1} e^{-k²π²t} cos(kπx) cos(kπy)`
//! * Fourth order: `H_t(x,y) = 1 + 2 Σ_{k≥1} e^{-(k⁴π⁴+ρk²π²)t} cos(kπx) cos(kπy)`
//!
//! The heat kernels also admit a method-of-images form in terms of the free
//! kernel `p_t(z) = (4πt)^{-1/2} e^{-z²/4t}`.

mod bounds;

pub use bounds::{
    decades, default_lattice, logspace, verify_bound, verify_bound_refined, verify_bound_multi, BoundId, BoundReport,
    Lattice, Refinement, SlopeFit, BOUND_IDS,
};

use crate::error::{domain, Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Default absolute tolerance for adaptive truncation.
pub const DEFAULT_TOL: f64 = 1e-13;
/// Second-order kernels switch to images once the adaptive rule asks for more modes.
pub const IMAGE_SWITCH_MODES: usize = 2000;
/// Smallest time at which the fourth-order series is evaluated.
pub const FOURTH_ORDER_MIN_T: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    DirichletHeat,
    NeumannHeat,
    FourthOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelId {
    pub kind: KernelKind,
    pub rho: f64,
}

impl KernelId {
    pub const DIRICHLET: KernelId = KernelId {
        kind: KernelKind::DirichletHeat,
        rho: 0.0,
    };
    pub const NEUMANN: KernelId = KernelId {
        kind: KernelKind::NeumannHeat,
        rho: 0.0,
    };

    pub fn fourth_order(rho: f64) -> Result<KernelId> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return domain(format!("rho must be finite and nonnegative, got {rho}"));
        }
        Ok(KernelId {
            kind: KernelKind::FourthOrder,
            rho,
        })
    }

    /// Decay rate of mode `k`.
    #[inline]
    pub fn lambda(&self, k: usize) -> f64 {
        let kp = k as f64 * PI;
        match self.kind {
            KernelKind::FourthOrder => kp * kp * (kp * kp + self.rho),
            _ => kp * kp,
        }
    }

    #[inline]
    pub fn is_sine(&self) -> bool {
        self.kind == KernelKind::DirichletHeat
    }

    #[inline]
    pub fn is_second_order(&self) -> bool {
        self.kind != KernelKind::FourthOrder
    }

    /// Weight of the constant mode (1 for the cosine kernels, 0 for Dirichlet).
    #[inline]
    pub fn constant_mode(&self) -> f64 {
        if self.is_sine() {
            0.0
        } else {
            1.0
        }
    }

    /// Unnormalized eigenfunction `sin(kπx)` or `cos(kπx)`.
    #[inline]
    pub fn mode(&self, k: usize, x: f64) -> f64 {
        let a = k as f64 * PI * x;
        if self.is_sine() {
            a.sin()
        } else {
            a.cos()
        }
    }

    #[inline]
    fn mode_dx(&self, k: usize, x: f64) -> f64 {
        let kp = k as f64 * PI;
        if self.is_sine() {
            kp * (kp * x).cos()
        } else {
            -kp * (kp * x).sin()
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            KernelKind::DirichletHeat => "dirichlet".into(),
            KernelKind::NeumannHeat => "neumann".into(),
            KernelKind::FourthOrder => format!("fourth_order(rho={})", self.rho),
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t > 0.0 && t.is_finite()) {
            return domain(format!("time must be positive, got {t}"));
        }
        if self.kind == KernelKind::FourthOrder && t < FOURTH_ORDER_MIN_T {
            return domain(format!(
                "fourth-order series not certified below t = {FOURTH_ORDER_MIN_T}, got {t}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SeriesTruncation {
    FixedModes(usize),
    AdaptiveTail(f64),
}

impl Default for SeriesTruncation {
    fn default() -> Self {
        SeriesTruncation::AdaptiveTail(DEFAULT_TOL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Derivative {
    DDx,
    DDt,
}

#[derive(Clone, Copy)]
enum Weight {
    One,
    K,
    Lambda,
}

impl Weight {
    #[inline]
    fn at(self, kernel: &KernelId, k: usize) -> f64 {
        match self {
            Weight::One => 1.0,
            Weight::K => k as f64 * PI,
            Weight::Lambda => kernel.lambda(k),
        }
    }
}

/// Smallest `K ≥ 1` for which `2 Σ_{k>K} w_k e^{-λ_k t}` is certified below `tol`.
///
/// The consecutive-term ratio is decreasing in `k`, so the tail is bounded by a
/// geometric series started at `K+1`.
fn tail_modes(kernel: &KernelId, t: f64, tol: f64, weight: Weight) -> usize {
    let term = |k: usize| 2.0 * weight.at(kernel, k) * (-kernel.lambda(k) * t).exp();
    let mut k = 1usize;
    loop {
        let a = term(k + 1);
        let b = term(k + 2);
        if a == 0.0 {
            return k;
        }
        let r = b / a;
        if r < 1.0 && a / (1.0 - r) < tol {
            return k;
        }
        // skip ahead quickly while terms are far above tolerance
        k += if a > 1e6 * tol && k > 64 { k / 16 } else { 1 };
        if k > 50_000_000 {
            return k;
        }
    }
}

/// Number of modes the adaptive rule uses for the kernel itself at time `t`.
pub fn adaptive_modes(kernel: &KernelId, t: f64, tol: f64) -> usize {
    tail_modes(kernel, t, tol, Weight::One)
}

#[inline]
fn check_point(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        domain(format!("{name} must lie in [0,1], got {v}"))
    }
}

fn series(kernel: &KernelId, t: f64, x: f64, y: f64, modes: usize) -> f64 {
    let mut s = 0.0;
    for k in (1..=modes).rev() {
        s += (-kernel.lambda(k) * t).exp() * kernel.mode(k, x) * kernel.mode(k, y);
    }
    kernel.constant_mode() + 2.0 * s
}

fn series_dx(kernel: &KernelId, t: f64, x: f64, y: f64, modes: usize) -> f64 {
    let mut s = 0.0;
    for k in (1..=modes).rev() {
        s += (-kernel.lambda(k) * t).exp() * kernel.mode_dx(k, x) * kernel.mode(k, y);
    }
    2.0 * s
}

fn series_dt(kernel: &KernelId, t: f64, x: f64, y: f64, modes: usize) -> f64 {
    let mut s = 0.0;
    for k in (1..=modes).rev() {
        let l = kernel.lambda(k);
        s -= l * (-l * t).exp() * kernel.mode(k, x) * kernel.mode(k, y);
    }
    2.0 * s
}

/// Free heat kernel `p_t(z)` without argument checks.
#[inline]
pub(crate) fn heat(t: f64, z: f64) -> f64 {
    (-z * z / (4.0 * t)).exp() / (4.0 * PI * t).sqrt()
}

/// `∫₀¹ p_s(r − c) dr` without cancellation in the tails.
pub(crate) fn unit_mass(c: f64, s: f64) -> f64 {
    let q = 2.0 * s.sqrt();
    let a = (1.0 - c) / q;
    let b = -c / q;
    if a >= 6.0 && b <= -6.0 {
        // both tails are below 2e-17
        return 1.0;
    }
    if b > 0.0 {
        0.5 * (libm::erfc(b) - libm::erfc(a))
    } else if a < 0.0 {
        0.5 * (libm::erfc(-a) - libm::erfc(-b))
    } else {
        0.5 * (libm::erf(a) - libm::erf(b))
    }
}

/// The standard one-dimensional heat kernel `(4πt)^{-1/2} exp(-z²/(4t))`.
pub fn free_heat(t: f64, z: f64) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return domain(format!("time must be positive, got {t}"));
    }
    Ok(heat(t, z))
}

/// Image count giving a tail below roughly `1e-16` relative to `p_t(0)` (capped below by 1).
fn image_count(t: f64) -> usize {
    1 + (3.0 * t.sqrt()).ceil() as usize
}

fn images(kernel: &KernelId, t: f64, x: f64, y: f64, m: usize) -> f64 {
    let sign = if kernel.is_sine() { -1.0 } else { 1.0 };
    let pair = |shift: f64| heat(t, x - y + shift) + sign * heat(t, x + y + shift);
    // smallest contributions first
    let mut s = 0.0;
    for j in (1..=m).rev() {
        let shift = 2.0 * j as f64;
        s += pair(shift) + pair(-shift);
    }
    s + pair(0.0)
}

fn images_dx(kernel: &KernelId, t: f64, x: f64, y: f64, m: usize) -> f64 {
    let sign = if kernel.is_sine() { -1.0 } else { 1.0 };
    let d = |z: f64| -z / (2.0 * t) * heat(t, z);
    let mut s = 0.0;
    for j in -(m as i64)..=(m as i64) {
        let shift = 2.0 * j as f64;
        s += d(x - y + shift) + sign * d(x + y + shift);
    }
    s
}

fn images_dt(kernel: &KernelId, t: f64, x: f64, y: f64, m: usize) -> f64 {
    let sign = if kernel.is_sine() { -1.0 } else { 1.0 };
    let d = |z: f64| (z * z / (4.0 * t * t) - 0.5 / t) * heat(t, z);
    let mut s = 0.0;
    for j in -(m as i64)..=(m as i64) {
        let shift = 2.0 * j as f64;
        s += d(x - y + shift) + sign * d(x + y + shift);
    }
    s
}

/// Truncated eigenfunction series. In adaptive mode a second-order kernel whose
/// certified truncation needs more than [`IMAGE_SWITCH_MODES`] modes is evaluated
/// by images instead, which is accurate far beyond the requested tolerance there.
pub fn eval_spectral(
    kernel: &KernelId,
    t: f64,
    x: f64,
    y: f64,
    trunc: SeriesTruncation,
) -> Result<f64> {
    kernel.check_time(t)?;
    check_point("x", x)?;
    check_point("y", y)?;
    Ok(match trunc {
        SeriesTruncation::FixedModes(k) => series(kernel, t, x, y, k.max(1)),
        SeriesTruncation::AdaptiveTail(tol) => {
            let k = adaptive_modes(kernel, t, tol);
            if kernel.is_second_order() && k > IMAGE_SWITCH_MODES {
                images(kernel, t, x, y, image_count(t).max(8))
            } else {
                series(kernel, t, x, y, k)
            }
        }
    })
}

/// Method-of-images sum over shifts `m ∈ [-M, M]` for the heat kernels.
pub fn eval_images(kernel: &KernelId, t: f64, x: f64, y: f64, m: usize) -> Result<f64> {
    if !kernel.is_second_order() {
        return Err(Error::UnsupportedKernel(
            "the fourth-order kernel has no image representation".into(),
        ));
    }
    kernel.check_time(t)?;
    Ok(images(kernel, t, x, y, m))
}

/// Fast evaluation at tolerance [`DEFAULT_TOL`]: images whenever they are the
/// cheaper representation for a heat kernel, the series otherwise. No argument checks.
#[inline]
pub(crate) fn eval_fast(kernel: &KernelId, t: f64, x: f64, y: f64) -> f64 {
    if kernel.is_second_order() && t < 0.02 {
        images(kernel, t, x, y, image_count(t))
    } else {
        series(kernel, t, x, y, adaptive_modes(kernel, t, DEFAULT_TOL))
    }
}

/// Termwise differentiated series (`∂_x` or `∂_t`), with the same image switch
/// as [`eval_spectral`].
pub fn eval_derivative(
    kernel: &KernelId,
    which: Derivative,
    t: f64,
    x: f64,
    y: f64,
    trunc: SeriesTruncation,
) -> Result<f64> {
    kernel.check_time(t)?;
    check_point("x", x)?;
    check_point("y", y)?;
    let weight = match which {
        Derivative::DDx => Weight::K,
        Derivative::DDt => Weight::Lambda,
    };
    let (use_images, k) = match trunc {
        SeriesTruncation::FixedModes(k) => (false, k.max(1)),
        SeriesTruncation::AdaptiveTail(tol) => {
            let k = tail_modes(kernel, t, tol, weight);
            (kernel.is_second_order() && k > IMAGE_SWITCH_MODES, k)
        }
    };
    let m = image_count(t).max(8);
    Ok(match (which, use_images) {
        (Derivative::DDx, false) => series_dx(kernel, t, x, y, k),
        (Derivative::DDt, false) => series_dt(kernel, t, x, y, k),
        (Derivative::DDx, true) => images_dx(kernel, t, x, y, m),
        (Derivative::DDt, true) => images_dt(kernel, t, x, y, m),
    })
}

/// Fast derivative evaluation (images for small `t` on heat kernels).
pub(crate) fn derivative_fast(kernel: &KernelId, which: Derivative, t: f64, x: f64, y: f64) -> f64 {
    if kernel.is_second_order() && t < 0.02 {
        let m = image_count(t);
        match which {
            Derivative::DDx => images_dx(kernel, t, x, y, m),
            Derivative::DDt => images_dt(kernel, t, x, y, m),
        }
    } else {
        let weight = match which {
            Derivative::DDx => Weight::K,
            Derivative::DDt => Weight::Lambda,
        };
        let k = tail_modes(kernel, t, DEFAULT_TOL, weight);
        match which {
            Derivative::DDx => series_dx(kernel, t, x, y, k),
            Derivative::DDt => series_dt(kernel, t, x, y, k),
        }
    }
}

/// `∫₀¹ G_t(x,y)² dy`. By orthogonality this is the Parseval sum
/// `c₀ + 2 Σ e^{-2λ_k t} φ_k(x)²`, i.e. the kernel itself at `(2t, x, x)`.
pub fn l2_norm_sq_y(kernel: &KernelId, t: f64, x: f64, trunc: SeriesTruncation) -> Result<f64> {
    kernel.check_time(t)?;
    eval_spectral(kernel, 2.0 * t, x, x, trunc)
}

/// `∫₀¹ G_t(x,y) dy`: 1 for the cosine kernels, the survival probability of
/// Brownian motion (speed 2) killed at the boundary for Dirichlet.
pub fn mass(kernel: &KernelId, t: f64, x: f64) -> Result<f64> {
    kernel.check_time(t)?;
    check_point("x", x)?;
    if !kernel.is_sine() {
        return Ok(1.0);
    }
    if t < 0.02 {
        // Σ_m ∫₀¹ p_t(x-y+2m) - p_t(x+y+2m) dy
        let m = image_count(t) as i64;
        let mut v = 0.0;
        for j in -m..=m {
            let sh = 2.0 * j as f64;
            v += unit_mass(x + sh, t) - unit_mass(-x + sh, t);
        }
        return Ok(v);
    }
    let mut s = 0.0;
    let mut k = 1;
    loop {
        let term = 4.0 * (-kernel.lambda(k) * t).exp() * (k as f64 * PI * x).sin() / (k as f64 * PI);
        s += term;
        if 4.0 * (-kernel.lambda(k + 2) * t).exp() < 1e-17 {
            break;
        }
        k += 2;
    }
    Ok(s)
}

/// `Σ_{k≥1} 2 f_k(x) f_k(x̄) e^{-λ_k τ} / λ_k` for `τ ≥ 0`, the non-constant part
/// of `∫_τ^∞ G_r(x, x̄) dr`.
pub fn resolvent(kernel: &KernelId, tau: f64, x: f64, xb: f64) -> f64 {
    if tau == 0.0 && kernel.is_second_order() {
        let (lo, hi) = if x < xb { (x, xb) } else { (xb, x) };
        return if kernel.is_sine() {
            lo * (1.0 - hi)
        } else {
            1.0 / 3.0 - hi + 0.5 * (x * x + xb * xb)
        };
    }
    if tau == 0.0 {
        return fourth_order_resolvent_at_zero(kernel.rho, x, xb);
    }
    let mut s = 0.0;
    let mut k = 1usize;
    loop {
        let l = kernel.lambda(k);
        let e = (-l * tau).exp();
        s += 2.0 * kernel.mode(k, x) * kernel.mode(k, xb) * e / l;
        // geometric bound on the remaining tail
        let l1 = kernel.lambda(k + 1);
        let q = (-(kernel.lambda(k + 2) - l1) * tau).exp();
        let tail = 2.0 * (-l1 * tau).exp() / l1 / (1.0 - q).max(1e-300);
        if tail < 1e-15 * s.abs().max(1e-3) || k > 20_000_000 {
            return s;
        }
        k += 1;
    }
}

/// `Σ_{k≥1} 2 cos(kπx) cos(kπy) / (k⁴π⁴ + ρk²π²)`.
///
/// The `ρ = 0` sum is the quartic Bernoulli-type polynomial
/// `Σ cos(kπz)/(kπ)⁴ = 1/90 − z²/12 + z³/12 − z⁴/48` on `[0,2]`; the `ρ`
/// correction is summed directly up to a mode where its tail is below `1e-16`.
fn fourth_order_resolvent_at_zero(rho: f64, x: f64, y: f64) -> f64 {
    let f = |z: f64| {
        let z = z.abs();
        1.0 / 90.0 - z * z / 12.0 + z * z * z / 12.0 - z * z * z * z / 48.0
    };
    let mut s = f(x - y) + f(x + y);
    if rho > 0.0 {
        // Σ_{k>K} 2ρ/(kπ)⁶ ≤ 2ρ/(5π⁶K⁵)
        let kmax = ((2.0 * rho / (5.0 * PI.powi(6) * 1e-16)).powf(0.2).ceil() as usize).max(8);
        let mut c = 0.0;
        for k in (1..=kmax).rev() {
            let a = (k as f64 * PI).powi(2);
            c += 2.0 * (k as f64 * PI * x).cos() * (k as f64 * PI * y).cos() * (1.0 / (a * (a + rho)) - 1.0 / (a * a));
        }
        s += c;
    }
    s
}

/// Itô variance `∫₀ᵗ ∫₀¹ G_{t-s}(x,y)² dy ds` of the linear equation with `b = 0`,
/// `σ = 1`, `u₀ = 0`.
pub fn linear_exact_variance(
    kernel: &KernelId,
    t: f64,
    x: f64,
    trunc: SeriesTruncation,
) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return domain(format!("time must be positive, got {t}"));
    }
    check_point("x", x)?;
    let tol = match trunc {
        SeriesTruncation::AdaptiveTail(tol) => tol,
        SeriesTruncation::FixedModes(k) => {
            let s: f64 = (1..=k.max(1))
                .map(|j| {
                    let l = kernel.lambda(j);
                    2.0 * kernel.mode(j, x).powi(2) * (1.0 - (-2.0 * l * t).exp()) / (2.0 * l)
                })
                .sum();
            return Ok(kernel.constant_mode() * t + s);
        }
    };
    // Σ φ_k²(1 - e^{-2λt})/(2λ) = R(0)/2 - R(2t)/2 with R the resolvent at x = x̄.
    let full = 0.5 * resolvent(kernel, 0.0, x, x);
    let decayed = if kernel.is_second_order() && adaptive_modes(kernel, 2.0 * t, tol) > 200_000 {
        // extremely small t: integrate the L² norm directly
        return Ok(crate::quad::tanh_sinh(
            |_, r, _| eval_fast(kernel, 2.0 * r, x, x),
            0.0,
            t,
            1e-12,
        ));
    } else {
        0.5 * resolvent(kernel, 2.0 * t, x, x)
    };
    Ok(kernel.constant_mode() * t + full - decayed)
}

/// Dawson's integral `W(x) = e^{-x²} ∫₀ˣ e^{z²} dz` for `x ≥ 0`.
pub fn dawson(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return domain(format!("dawson requires x ≥ 0, got {x}"));
    }
    Ok(dawson_unchecked(x))
}

pub(crate) fn dawson_unchecked(x: f64) -> f64 {
    if x < 0.2 {
        // Maclaurin series Σ (-1)^n 2^n x^{2n+1} / (2n+1)!!
        let x2 = x * x;
        let mut term = x;
        let mut s = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 * s.abs().max(1e-300) {
            n += 1.0;
            term *= -2.0 * x2 / (2.0 * n + 1.0);
            s += term;
        }
        return s;
    }
    if x > 25.0 {
        // asymptotic expansion (1/2x) Σ (2n-1)!! / (2x²)^n
        let y = 1.0 / (2.0 * x * x);
        let mut term = 1.0;
        let mut s = 1.0;
        for n in 1..20 {
            term *= (2 * n - 1) as f64 * y;
            s += term;
        }
        return s / (2.0 * x);
    }
    // Rybicki's sampling formula W(x) ≈ π^{-1/2} Σ_{n odd} e^{-(x-nh)²}/n, whose
    // error is of order e^{-(π/2h)²}.
    let h = 0.1;
    let center = (x / h).round() as i64;
    let mut s = 0.0;
    for n in (center - 80)..=(center + 80) {
        if n % 2 == 0 {
            continue;
        }
        let d = x - n as f64 * h;
        s += (-d * d).exp() / n as f64;
    }
    s / PI.sqrt()
}

/// `h_n(t) = 2^{-n} t^{n/2} / Γ(n/2 + 1)`.
pub fn hn(n: u32, t: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    if t <= 0.0 {
        return 0.0;
    }
    let nf = n as f64;
    (-nf * std::f64::consts::LN_2 + 0.5 * nf * t.ln() - libm::lgamma(0.5 * nf + 1.0)).exp()
}

/// Constants of the moment envelope for the Malliavin derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConfig {
    pub horizon: f64,
    pub k: u32,
    pub lip_b: f64,
    pub lip_sigma: f64,
    pub z_k: f64,
    pub c_tk: f64,
    pub gamma_env: f64,
}

impl EnvelopeConfig {
    /// Build the configuration with `z_k = 1` for `k = 2` and `z_k = 2√k` otherwise.
    pub fn new(horizon: f64, k: u32, lip_b: f64, lip_sigma: f64, c_tk: f64) -> Result<Self> {
        if k < 2 {
            return domain("moment order must be at least 2");
        }
        if !(c_tk > 0.0) {
            return domain("C_Tk must be positive");
        }
        let z_k = if k == 2 { 1.0 } else { 2.0 * (k as f64).sqrt() };
        let gamma_env = 6.0 * (horizon * lip_b * lip_b + (z_k * lip_sigma).powi(2));
        Ok(EnvelopeConfig {
            horizon,
            k,
            lip_b,
            lip_sigma,
            z_k,
            c_tk,
            gamma_env,
        })
    }

    /// Same constants with an explicit rate (used when probing the series bound).
    pub fn with_rate(gamma_env: f64, horizon: f64) -> Self {
        EnvelopeConfig {
            horizon,
            k: 2,
            lip_b: 0.0,
            lip_sigma: 0.0,
            z_k: 1.0,
            c_tk: 1.0,
            gamma_env,
        }
    }
}

/// Partial sum `Σ_{n=0}^{n_max} γ^n h_n(t)`.
pub fn envelope_series(cfg: &EnvelopeConfig, t: f64, n_max: u32) -> Result<f64> {
    if !(t >= 0.0 && t <= cfg.horizon) {
        return domain(format!("t must lie in [0, {}], got {t}", cfg.horizon));
    }
    let g = cfg.gamma_env;
    let mut s = 0.0;
    for n in 0..=n_max {
        let term = if g == 0.0 {
            if n == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            hn(n, t) * g.powi(n as i32)
        };
        s += term;
    }
    Ok(s)
}
