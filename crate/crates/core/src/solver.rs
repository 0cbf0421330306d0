//! Time stepping for the stochastic heat and Cahn–Hilliard-type equations on `[0,1]`.
//!
//! Both schemes are written in the form
//!
//! ```text
//! s_{j+1} = E s_j + B[b(P s_j)] + Q[σ(P s_j) ΔW_j / dx]
//! ```
//!
//! where `s` is the internal state (spectral coefficients or cell values), `P`
//! maps the state to cell-centre values and `V_x` reads off `u(t, x)`. The
//! Malliavin module differentiates exactly this recursion.

use crate::error::{domain, Error, Result};
use crate::kernels::KernelId;
use crate::noise::{hex16, GridSpec, NoiseGrid};
use rayon::prelude::*;
use rustdct::{Dct1, DctPlanner, Dst1, TransformType2And3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

pub use crate::kernels::linear_exact_variance;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A scalar coefficient together with its derivative.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    /// `a + b·u`
    Affine { a: f64, b: f64 },
    /// `a + b·sin u`
    AffineSin { a: f64, b: f64 },
    /// Piecewise-linear interpolation of `values` on a uniform grid over `[lo, hi]`,
    /// extended by constants.
    Tabulated { lo: f64, hi: f64, values: Vec<f64> },
    Custom { name: String, f: ScalarFn, df: ScalarFn },
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl Coefficient {
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Coefficient {
        Coefficient::Custom {
            name: name.into(),
            f: Arc::new(f),
            df: Arc::new(df),
        }
    }

    #[inline]
    pub fn value(&self, u: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Affine { a, b } => a + b * u,
            Coefficient::AffineSin { a, b } => a + b * u.sin(),
            Coefficient::Tabulated { lo, hi, values } => {
                let (k, w) = table_cell(*lo, *hi, values.len(), u);
                if w == 0.0 {
                    values[k]
                } else {
                    values[k] + w * (values[k + 1] - values[k])
                }
            }
            Coefficient::Custom { f, .. } => f(u),
        }
    }

    #[inline]
    pub fn derivative(&self, u: f64) -> f64 {
        match self {
            Coefficient::Constant(_) => 0.0,
            Coefficient::Affine { b, .. } => *b,
            Coefficient::AffineSin { b, .. } => b * u.cos(),
            Coefficient::Tabulated { lo, hi, values } => {
                if !(u > *lo && u < *hi) {
                    return 0.0;
                }
                let (k, _) = table_cell(*lo, *hi, values.len(), u);
                let h = (hi - lo) / (values.len() - 1) as f64;
                (values[k + 1] - values[k]) / h
            }
            Coefficient::Custom { df, .. } => df(u),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coefficient::Constant(c) => *c == 0.0,
            Coefficient::Affine { a, b } | Coefficient::AffineSin { a, b } => *a == 0.0 && *b == 0.0,
            Coefficient::Tabulated { values, .. } => values.iter().all(|&v| v == 0.0),
            Coefficient::Custom { .. } => false,
        }
    }

    /// True when the derivative vanishes identically.
    pub fn is_constant(&self) -> bool {
        match self {
            Coefficient::Constant(_) => true,
            Coefficient::Affine { b, .. } | Coefficient::AffineSin { b, .. } => *b == 0.0,
            Coefficient::Tabulated { values, .. } => values.windows(2).all(|w| w[0] == w[1]),
            Coefficient::Custom { .. } => false,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Coefficient::Constant(c) => format!("constant({c:?})"),
            Coefficient::Affine { a, b } => format!("affine({a:?},{b:?})"),
            Coefficient::AffineSin { a, b } => format!("affine_sin({a:?},{b:?})"),
            Coefficient::Tabulated { lo, hi, values } => {
                let mut h = Sha256::new();
                for v in values {
                    h.update(v.to_bits().to_le_bytes());
                }
                format!("tabulated({lo:?},{hi:?},{},{})", values.len(), hex16(&h.finalize()))
            }
            Coefficient::Custom { name, .. } => format!("custom({name})"),
        }
    }
}

/// `sin(πy)`, exactly zero at integers.
fn sin_pi(y: f64) -> f64 {
    let r = y.rem_euclid(2.0);
    if r == 0.0 || r == 1.0 {
        0.0
    } else {
        (PI * r).sin()
    }
}

fn table_cell(lo: f64, hi: f64, n: usize, u: f64) -> (usize, f64) {
    if !(u > lo) {
        return (0, 0.0);
    }
    if !(u < hi) {
        return (n - 1, 0.0);
    }
    let s = (u - lo) / (hi - lo) * (n - 1) as f64;
    let k = (s.floor() as usize).min(n - 2);
    (k, s - k as f64)
}

#[derive(Clone)]
pub enum InitialKind {
    Zero,
    /// `sin(kπx)`
    Sine(usize),
    /// `cos(kπx)`
    Cosine(usize),
    /// Vertex values on a uniform grid over `[0,1]`, interpolated linearly.
    Tabulated(Vec<f64>),
    Callable { name: String, f: ScalarFn },
}

/// Initial datum with a local Hölder certificate at its maximiser:
/// `u₀(x*) − u₀(y) ≤ C₀|y − x*|^α` for `|y − x*| ≤ r₀`.
#[derive(Clone)]
pub struct InitialConditionSpec {
    pub kind: InitialKind,
    pub x_star: f64,
    pub alpha: f64,
    pub c0: f64,
    pub r0: f64,
}

impl fmt::Debug for InitialConditionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl InitialConditionSpec {
    pub fn zero() -> Self {
        InitialConditionSpec {
            kind: InitialKind::Zero,
            x_star: 0.5,
            alpha: 1.0,
            c0: 0.0,
            r0: 0.1,
        }
    }

    /// The `k`-th eigenfunction of `kernel`, certified at its first maximiser.
    pub fn eigenmode(kernel: &KernelId, k: usize) -> Result<Self> {
        let kp = k as f64 * PI;
        if kernel.is_sine() {
            if k == 0 {
                return domain("Dirichlet eigenmodes start at k = 1");
            }
            Ok(InitialConditionSpec {
                kind: InitialKind::Sine(k),
                x_star: 0.5 / k as f64,
                alpha: 2.0,
                c0: 0.5 * kp * kp * 1.01,
                r0: 0.1,
            })
        } else {
            Ok(InitialConditionSpec {
                kind: InitialKind::Cosine(k),
                x_star: 0.0,
                alpha: 2.0,
                c0: (0.5 * kp * kp * 1.01).max(1e-300),
                r0: 0.1,
            })
        }
    }

    /// `cos²(πx)`, maximal at `x* = 0`.
    pub fn cos_squared() -> Self {
        InitialConditionSpec {
            kind: InitialKind::Callable {
                name: "cos2(pi x)".into(),
                f: Arc::new(|x: f64| (PI * x).cos().powi(2)),
            },
            x_star: 0.0,
            alpha: 2.0,
            c0: PI * PI * 1.01,
            r0: 0.1,
        }
    }

    pub fn tabulated(values: Vec<f64>, x_star: f64, alpha: f64, c0: f64, r0: f64) -> Result<Self> {
        if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
            return domain("a tabulated initial condition needs at least two finite values");
        }
        Ok(InitialConditionSpec {
            kind: InitialKind::Tabulated(values),
            x_star,
            alpha,
            c0,
            r0,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        match &self.kind {
            InitialKind::Zero => 0.0,
            InitialKind::Sine(k) => sin_pi(*k as f64 * x),
            InitialKind::Cosine(k) => (*k as f64 * PI * x).cos(),
            InitialKind::Tabulated(v) => {
                let (k, w) = table_cell(0.0, 1.0, v.len(), x);
                if w == 0.0 {
                    v[k]
                } else {
                    v[k] + w * (v[k + 1] - v[k])
                }
            }
            InitialKind::Callable { f, .. } => f(x),
        }
    }

    pub fn describe(&self) -> String {
        let kind = match &self.kind {
            InitialKind::Zero => "zero".to_string(),
            InitialKind::Sine(k) => format!("sin({k} pi x)"),
            InitialKind::Cosine(k) => format!("cos({k} pi x)"),
            InitialKind::Tabulated(v) => Coefficient::Tabulated {
                lo: 0.0,
                hi: 1.0,
                values: v.clone(),
            }
            .describe(),
            InitialKind::Callable { name, .. } => name.clone(),
        };
        format!(
            "{kind}; x*={:?} alpha={:?} C0={:?} r0={:?}",
            self.x_star, self.alpha, self.c0, self.r0
        )
    }

    /// Points at which the certificate is checked: the grid vertices, the table
    /// knots and a fine uniform lattice, restricted to the certificate window.
    fn certificate_points(&self, grid: &GridSpec) -> Vec<f64> {
        let mut pts: Vec<f64> = (0..=grid.nx).map(|i| grid.x(i)).collect();
        if let InitialKind::Tabulated(v) = &self.kind {
            let n = v.len() - 1;
            pts.extend((0..=n).map(|i| i as f64 / n as f64));
        }
        pts.extend((0..=4096).map(|i| i as f64 / 4096.0));
        pts.retain(|y| (y - self.x_star).abs() <= self.r0);
        pts
    }

    pub fn check_certificate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.alpha > 0.0 && self.c0 >= 0.0 && self.r0 > 0.0) || !(0.0..=1.0).contains(&self.x_star) {
            return domain("Hölder certificate needs alpha > 0, C0 ≥ 0, r0 > 0 and x* in [0,1]");
        }
        let top = self.eval(self.x_star);
        for y in self.certificate_points(grid) {
            let allowed = self.c0 * (y - self.x_star).abs().powf(self.alpha);
            let drop = top - self.eval(y);
            if drop > allowed * (1.0 + 1e-12) + 1e-14 {
                return Err(Error::InvalidInitialCondition { y });
            }
        }
        Ok(())
    }
}

/// Vertex samples of `u₀` after validating its Hölder certificate.
pub fn sample_u0(spec: &InitialConditionSpec, grid: &GridSpec) -> Result<Vec<f64>> {
    spec.check_certificate(grid)?;
    Ok((0..=grid.nx).map(|i| spec.eval(grid.x(i))).collect())
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub kernel: KernelId,
    pub b: Coefficient,
    pub sigma: Coefficient,
    pub lip_b: f64,
    pub lip_sigma: f64,
    pub c_sigma: f64,
    pub u0: InitialConditionSpec,
    pub horizon: f64,
}

/// Lattice on which coefficient bounds are probed.
fn probe_lattice() -> impl Iterator<Item = f64> {
    (0..=4000).map(|i| -20.0 + 40.0 * i as f64 / 4000.0)
}

impl ModelSpec {
    /// `b = sin u`, `σ = 1.25 + 0.25 sin u`, with `sin(πx)` (Dirichlet) or `cos²(πx)` data.
    pub fn default_nonlinear(kernel: KernelId) -> ModelSpec {
        let u0 = if kernel.is_sine() {
            InitialConditionSpec::eigenmode(&kernel, 1).expect("k = 1 is valid")
        } else {
            InitialConditionSpec::cos_squared()
        };
        ModelSpec {
            kernel,
            b: Coefficient::AffineSin { a: 0.0, b: 1.0 },
            sigma: Coefficient::AffineSin { a: 1.25, b: 0.25 },
            lip_b: 1.0,
            lip_sigma: 0.25,
            c_sigma: 1.5,
            u0,
            horizon: default_horizon(&kernel),
        }
    }

    /// `b = 0`, `σ = 1`, `u₀ = 0`.
    pub fn linear(kernel: KernelId) -> ModelSpec {
        ModelSpec {
            kernel,
            b: Coefficient::Constant(0.0),
            sigma: Coefficient::Constant(1.0),
            lip_b: 0.0,
            lip_sigma: 0.0,
            c_sigma: 1.0 + 1e-9,
            u0: InitialConditionSpec::zero(),
            horizon: default_horizon(&kernel),
        }
    }

    /// `b = 0`, `σ = 0`.
    pub fn deterministic(kernel: KernelId, u0: InitialConditionSpec) -> ModelSpec {
        ModelSpec {
            kernel,
            b: Coefficient::Constant(0.0),
            sigma: Coefficient::Constant(0.0),
            lip_b: 0.0,
            lip_sigma: 0.0,
            c_sigma: 2.0,
            u0,
            horizon: default_horizon(&kernel),
        }
    }

    /// Checks the declared Lipschitz constants and the boundary compatibility of `u₀`.
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidModel(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.c_sigma > 1.0) {
            return Err(Error::InvalidModel(format!("C_sigma must exceed 1, got {}", self.c_sigma)));
        }
        for u in probe_lattice() {
            let db = self.b.derivative(u).abs();
            if !(db <= self.lip_b * (1.0 + 1e-12) + 1e-15) {
                return Err(Error::InvalidModel(format!(
                    "|b'({u})| = {db} exceeds lip_b = {}",
                    self.lip_b
                )));
            }
            let ds = self.sigma.derivative(u).abs();
            if !(ds <= self.lip_sigma * (1.0 + 1e-12) + 1e-15) {
                return Err(Error::InvalidModel(format!(
                    "|sigma'({u})| = {ds} exceeds lip_sigma = {}",
                    self.lip_sigma
                )));
            }
        }
        if self.kernel.is_sine() {
            let (a, b) = (self.u0.eval(0.0), self.u0.eval(1.0));
            if a.abs() > 1e-12 || b.abs() > 1e-12 {
                return Err(Error::InvalidModel(format!(
                    "Dirichlet data must vanish at the boundary, got u0(0) = {a}, u0(1) = {b}"
                )));
            }
        }
        Ok(())
    }

    /// Checks `1/C_σ ≤ σ ≤ C_σ` on the probe lattice.
    pub fn check_ellipticity(&self) -> Result<()> {
        let lo = 1.0 / self.c_sigma;
        for u in probe_lattice() {
            let s = self.sigma.value(u);
            if !(s >= lo * (1.0 - 1e-12) && s <= self.c_sigma * (1.0 + 1e-12)) {
                return Err(Error::InvalidModel(format!(
                    "sigma({u}) = {s} outside [{lo}, {}]",
                    self.c_sigma
                )));
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "kernel={}; b={}; sigma={}; lip_b={:?}; lip_sigma={:?}; C_sigma={:?}; u0={}; T={:?}",
            self.kernel.label(),
            self.b.describe(),
            self.sigma.describe(),
            self.lip_b,
            self.lip_sigma,
            self.c_sigma,
            self.u0.describe(),
            self.horizon
        )
    }

    pub fn fingerprint(&self) -> String {
        hex16(&Sha256::digest(self.describe().as_bytes()))
    }
}

/// Horizon of the default grid: 1 for the heat equations, 0.5 for the fourth-order one.
pub fn default_horizon(kernel: &KernelId) -> f64 {
    if kernel.is_second_order() {
        1.0
    } else {
        0.5
    }
}

/// `Nx = 64`, `Nt = 4096` on the default horizon.
pub fn default_grid(kernel: &KernelId) -> GridSpec {
    GridSpec::new(64, 4096, default_horizon(kernel)).expect("default grid is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    SpectralExponentialEuler,
    FiniteDifferenceImex,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Scheme> {
        match s {
            "spectral" | "spectral_exponential_euler" => Ok(Scheme::SpectralExponentialEuler),
            "fd" | "imex" | "finite_difference_imex" => Ok(Scheme::FiniteDifferenceImex),
            _ => domain(format!("unknown scheme `{s}`")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::SpectralExponentialEuler => "spectral_exponential_euler",
            Scheme::FiniteDifferenceImex => "finite_difference_imex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
}

impl SchemeConfig {
    pub fn spectral() -> Self {
        SchemeConfig {
            scheme: Scheme::SpectralExponentialEuler,
        }
    }

    pub fn finite_difference() -> Self {
        SchemeConfig {
            scheme: Scheme::FiniteDifferenceImex,
        }
    }
}

pub(crate) struct Spectral {
    n: usize,
    sine: bool,
    e: Vec<f64>,
    phi: Vec<f64>,
    q: Vec<f64>,
    /// analysis weights: coefficients are `c ⊙ T2(cells)`
    c: Vec<f64>,
    /// synthesis weights: cells are `T3(d ⊙ coefficients)`
    d: Vec<f64>,
    tt: Arc<dyn TransformType2And3<f64>>,
    dct1: Option<Arc<dyn Dct1<f64>>>,
    dst1: Option<Arc<dyn Dst1<f64>>>,
}

impl Spectral {
    fn new(kernel: &KernelId, grid: &GridSpec) -> Spectral {
        let n = grid.nx;
        let dt = grid.dt();
        let sine = kernel.is_sine();
        let mut planner = DctPlanner::new();
        let (tt, dct1, dst1) = if sine {
            let d1 = if n >= 2 { Some(planner.plan_dst1(n - 1)) } else { None };
            (planner.plan_dst2(n), None, d1)
        } else {
            (planner.plan_dct2(n), Some(planner.plan_dct1(n + 1)), None)
        };
        let mut e = vec![0.0; n];
        let mut phi = vec![0.0; n];
        let mut q = vec![0.0; n];
        let mut c = vec![2.0 / n as f64; n];
        let mut d = vec![1.0; n];
        for k in 0..n {
            let mode = if sine { k + 1 } else { k };
            let ld = kernel.lambda(mode) * dt;
            e[k] = (-ld).exp();
            // φ₁ = (1 − e^{−λdt})/λ and q² = (1 − e^{−2λdt})/(2λdt)
            if ld < 1e-12 {
                phi[k] = dt;
                q[k] = 1.0;
            } else {
                phi[k] = -(-ld).exp_m1() / ld * dt;
                q[k] = (-(-2.0 * ld).exp_m1() / (2.0 * ld)).sqrt();
            }
        }
        if sine {
            c[n - 1] = 1.0 / n as f64;
            d[n - 1] = 2.0;
        } else {
            c[0] = 1.0 / n as f64;
            d[0] = 2.0;
        }
        Spectral {
            n,
            sine,
            e,
            phi,
            q,
            c,
            d,
            tt,
            dct1,
            dst1,
        }
    }

    /// Raw forward transform (DCT-II / DST-II).
    fn t2(&self, buf: &mut [f64]) {
        if self.sine {
            self.tt.process_dst2(buf)
        } else {
            self.tt.process_dct2(buf)
        }
    }

    /// Raw inverse-type transform (DCT-III / DST-III).
    fn t3(&self, buf: &mut [f64]) {
        if self.sine {
            self.tt.process_dst3(buf)
        } else {
            self.tt.process_dct3(buf)
        }
    }

    /// `out = w ⊙ A(cells)`, with `A` the cell-to-coefficient map.
    fn analyse_weighted(&self, cells: &[f64], w: &[f64], out: &mut [f64]) {
        out.copy_from_slice(cells);
        self.t2(out);
        for k in 0..self.n {
            out[k] *= self.c[k] * w[k];
        }
    }

    /// `out = Aᵀ(w ⊙ y)`.
    fn analyse_t_weighted(&self, y: &[f64], w: &[f64], out: &mut [f64]) {
        for k in 0..self.n {
            out[k] = self.d[k] * self.c[k] * w[k] * y[k];
        }
        self.t3(out);
    }

    fn synth(&self, a: &[f64], out: &mut [f64]) {
        for k in 0..self.n {
            out[k] = self.d[k] * a[k];
        }
        self.t3(out);
    }

    fn vertices(&self, a: &[f64], out: &mut [f64]) {
        let n = self.n;
        if self.sine {
            out[0] = 0.0;
            out[n] = 0.0;
            if n >= 2 {
                out[1..n].copy_from_slice(&a[..n - 1]);
                self.dst1.as_ref().expect("planned").process_dst1(&mut out[1..n]);
            }
        } else {
            out[0] = 2.0 * a[0];
            out[1..n].copy_from_slice(&a[1..n]);
            out[n] = 0.0;
            self.dct1.as_ref().expect("planned").process_dct1(out);
        }
    }

    fn observation(&self, x: f64) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                if self.sine {
                    ((k + 1) as f64 * PI * x).sin()
                } else {
                    (k as f64 * PI * x).cos()
                }
            })
            .collect()
    }
}

/// Banded LU factorisation without pivoting (the matrices here are SPD).
struct BandedLu {
    n: usize,
    p: usize,
    /// row-major band storage, `band[i*(2p+1) + p + (j−i)]`
    band: Vec<f64>,
}

impl BandedLu {
    fn factor(n: usize, p: usize, mut band: Vec<f64>) -> BandedLu {
        let w = 2 * p + 1;
        for k in 0..n {
            let pivot = band[k * w + p];
            for i in k + 1..(k + p + 1).min(n) {
                let l = band[i * w + p + k - i] / pivot;
                band[i * w + p + k - i] = l;
                for j in k + 1..(k + p + 1).min(n) {
                    band[i * w + p + j - i] -= l * band[k * w + p + j - k];
                }
            }
        }
        BandedLu { n, p, band }
    }

    fn solve(&self, x: &mut [f64]) {
        let (n, p, w) = (self.n, self.p, 2 * self.p + 1);
        for i in 0..n {
            let mut s = x[i];
            for j in i.saturating_sub(p)..i {
                s -= self.band[i * w + p + j - i] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..(i + p + 1).min(n) {
                s -= self.band[i * w + p + j - i] * x[j];
            }
            x[i] = s / self.band[i * w + p];
        }
    }
}

pub(crate) struct FiniteDifference {
    n: usize,
    sine: bool,
    dt: f64,
    lu: BandedLu,
}

impl FiniteDifference {
    fn new(kernel: &KernelId, grid: &GridSpec) -> FiniteDifference {
        let n = grid.nx;
        let dt = grid.dt();
        let h2 = 1.0 / (grid.dx() * grid.dx());
        let sine = kernel.is_sine();
        // discrete Laplacian on cell centres with reflected ghost cells
        let ghost = if sine { -1.0 } else { 1.0 };
        let lap = |i: usize, j: usize| -> f64 {
            if i == j {
                let edge = i == 0 || i == n - 1;
                let mut v = -2.0 * h2;
                if edge {
                    v += ghost * h2;
                }
                v
            } else if i.abs_diff(j) == 1 {
                h2
            } else {
                0.0
            }
        };
        let (p, band) = if kernel.is_second_order() {
            let w = 3;
            let mut band = vec![0.0; n * w];
            for i in 0..n {
                for j in i.saturating_sub(1)..(i + 2).min(n) {
                    let id = if i == j { 1.0 } else { 0.0 };
                    band[i * w + 1 + j - i] = id - dt * lap(i, j);
                }
            }
            (1, band)
        } else {
            // I + dt(L² − ρL)
            let w = 5;
            let mut band = vec![0.0; n * w];
            for i in 0..n {
                for j in i.saturating_sub(2)..(i + 3).min(n) {
                    let mut l2 = 0.0;
                    for k in i.saturating_sub(1)..(i + 2).min(n) {
                        l2 += lap(i, k) * lap(k, j);
                    }
                    let id = if i == j { 1.0 } else { 0.0 };
                    band[i * w + 2 + j - i] = id + dt * (l2 - kernel.rho * lap(i, j));
                }
            }
            (2, band)
        };
        FiniteDifference {
            n,
            sine,
            dt,
            lu: BandedLu::factor(n, p, band),
        }
    }

    fn ghost(&self, v: f64) -> f64 {
        if self.sine {
            -v
        } else {
            v
        }
    }

    fn vertices(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n;
        out[0] = 0.5 * (self.ghost(v[0]) + v[0]);
        for i in 1..n {
            out[i] = 0.5 * (v[i - 1] + v[i]);
        }
        out[n] = 0.5 * (v[n - 1] + self.ghost(v[n - 1]));
    }

    fn observation(&self, x: f64) -> Vec<f64> {
        let n = self.n;
        let mut row = vec![0.0; n];
        let s = (x * n as f64 - 0.5).clamp(-0.5, n as f64 - 0.5);
        let i0 = s.floor();
        let w = s - i0;
        let mut add = |i: i64, c: f64| {
            if i < 0 {
                row[0] += self.ghost(c);
            } else if i as usize >= n {
                row[n - 1] += self.ghost(c);
            } else {
                row[i as usize] += c;
            }
        };
        add(i0 as i64, 1.0 - w);
        add(i0 as i64 + 1, w);
        row
    }
}

/// Linear part of a scheme on one grid; see the module documentation.
pub(crate) enum Stepper {
    Spectral(Spectral),
    Fd(FiniteDifference),
}

/// Scratch buffers for one [`Stepper`].
pub(crate) struct Work {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl Stepper {
    pub(crate) fn new(kernel: &KernelId, grid: &GridSpec, scheme: SchemeConfig) -> Stepper {
        match scheme.scheme {
            Scheme::SpectralExponentialEuler => Stepper::Spectral(Spectral::new(kernel, grid)),
            Scheme::FiniteDifferenceImex => Stepper::Fd(FiniteDifference::new(kernel, grid)),
        }
    }

    pub(crate) fn len(&self) -> usize {
        match self {
            Stepper::Spectral(s) => s.n,
            Stepper::Fd(f) => f.n,
        }
    }

    pub(crate) fn work(&self) -> Work {
        let n = self.len();
        Work {
            a: vec![0.0; n],
            b: vec![0.0; n],
            c: vec![0.0; n],
        }
    }

    pub(crate) fn state_from_cells(&self, cells: &[f64], state: &mut [f64]) {
        match self {
            Stepper::Spectral(s) => s.analyse_weighted(cells, &vec![1.0; s.n], state),
            Stepper::Fd(_) => state.copy_from_slice(cells),
        }
    }

    /// `cells = P s`.
    pub(crate) fn cells(&self, state: &[f64], cells: &mut [f64]) {
        match self {
            Stepper::Spectral(s) => s.synth(state, cells),
            Stepper::Fd(_) => cells.copy_from_slice(state),
        }
    }

    pub(crate) fn vertices(&self, state: &[f64], out: &mut [f64]) {
        match self {
            Stepper::Spectral(s) => s.vertices(state, out),
            Stepper::Fd(f) => f.vertices(state, out),
        }
    }

    /// Row of `V_x`: `u(t, x) = ⟨V_x, s⟩`.
    pub(crate) fn observation(&self, x: f64) -> Vec<f64> {
        match self {
            Stepper::Spectral(s) => s.observation(x),
            Stepper::Fd(f) => f.observation(x),
        }
    }

    /// `s ← E s + B drift + Q noise`; either forcing may be absent.
    pub(crate) fn step(&self, state: &mut [f64], drift: Option<&[f64]>, noise: Option<&[f64]>, w: &mut Work) {
        match self {
            Stepper::Spectral(s) => {
                for k in 0..s.n {
                    state[k] *= s.e[k];
                }
                if let Some(f) = drift {
                    s.analyse_weighted(f, &s.phi, &mut w.a);
                    for k in 0..s.n {
                        state[k] += w.a[k];
                    }
                }
                if let Some(f) = noise {
                    s.analyse_weighted(f, &s.q, &mut w.a);
                    for k in 0..s.n {
                        state[k] += w.a[k];
                    }
                }
            }
            Stepper::Fd(fd) => {
                if let Some(f) = drift {
                    for i in 0..fd.n {
                        state[i] += fd.dt * f[i];
                    }
                }
                if let Some(f) = noise {
                    for i in 0..fd.n {
                        state[i] += f[i];
                    }
                }
                fd.lu.solve(state);
            }
        }
    }

    /// Linearised step `δs ← E δs + B[mb ⊙ Pδs] + Q[ms ⊙ Pδs + src]`.
    pub(crate) fn tangent_step(
        &self,
        ds: &mut [f64],
        mb: Option<&[f64]>,
        ms: Option<&[f64]>,
        src: Option<(usize, f64)>,
        w: &mut Work,
    ) {
        let n = self.len();
        self.cells(ds, &mut w.b);
        let pv = &w.b;
        let mut drift = None;
        if let Some(m) = mb {
            for i in 0..n {
                w.c[i] = m[i] * pv[i];
            }
            drift = Some(std::mem::take(&mut w.c));
        }
        let mut noise = vec![0.0; n];
        if let Some(m) = ms {
            for i in 0..n {
                noise[i] = m[i] * pv[i];
            }
        }
        if let Some((i, v)) = src {
            noise[i] += v;
        }
        self.step(ds, drift.as_deref(), Some(&noise), w);
        if let Some(c) = drift {
            w.c = c;
        }
    }

    /// One backward step of the adjoint recursion. On return `qt` holds `Qᵀλ`
    /// (for the incoming `λ`) and `lam` holds
    /// `Eᵀλ + Pᵀ[mb ⊙ Bᵀλ + ms ⊙ Qᵀλ]`.
    pub(crate) fn adjoint_step(
        &self,
        lam: &mut [f64],
        mb: Option<&[f64]>,
        ms: Option<&[f64]>,
        qt: &mut [f64],
        w: &mut Work,
    ) {
        let n = self.len();
        match self {
            Stepper::Spectral(s) => {
                s.analyse_t_weighted(lam, &s.q, qt);
                for i in 0..n {
                    w.a[i] = 0.0;
                }
                if let Some(m) = mb {
                    s.analyse_t_weighted(lam, &s.phi, &mut w.b);
                    for i in 0..n {
                        w.a[i] += m[i] * w.b[i];
                    }
                }
                if let Some(m) = ms {
                    for i in 0..n {
                        w.a[i] += m[i] * qt[i];
                    }
                }
                // Pᵀ is the raw forward transform
                s.t2(&mut w.a);
                for k in 0..n {
                    lam[k] = s.e[k] * lam[k] + w.a[k];
                }
            }
            Stepper::Fd(fd) => {
                qt.copy_from_slice(lam);
                fd.lu.solve(qt);
                for i in 0..n {
                    let mut f = 1.0;
                    if let Some(m) = mb {
                        f += fd.dt * m[i];
                    }
                    if let Some(m) = ms {
                        f += m[i];
                    }
                    lam[i] = f * qt[i];
                }
            }
        }
    }
}

/// A simulated path on the vertex grid, with the cell-centre values the
/// coefficients were evaluated at.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPath {
    pub grid: GridSpec,
    pub scheme: Scheme,
    /// `(Nt+1)×(Nx+1)`, row-major in time
    pub values: Vec<f64>,
    /// `(Nt+1)×Nx`
    pub cells: Vec<f64>,
    pub model_fingerprint: String,
    pub noise_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    grid: GridSpec,
    scheme: Scheme,
    rows: usize,
    vertex_cols: usize,
    cell_cols: usize,
    model_fingerprint: String,
    noise_fingerprint: String,
}

impl FieldPath {
    #[inline]
    pub fn value(&self, j: usize, i: usize) -> f64 {
        self.values[j * (self.grid.nx + 1) + i]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let w = self.grid.nx + 1;
        &self.values[j * w..(j + 1) * w]
    }

    pub fn cell_row(&self, j: usize) -> &[f64] {
        let w = self.grid.nx;
        &self.cells[j * w..(j + 1) * w]
    }

    /// Writes `<stem>.bin` (little-endian vertex then cell values) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 * (self.values.len() + self.cells.len()));
        for v in self.values.iter().chain(&self.cells) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(stem.with_extension("bin"), bytes)?;
        let side = Sidecar {
            format: "f64le; vertex rows then cell rows".into(),
            grid: self.grid,
            scheme: self.scheme,
            rows: self.grid.nt + 1,
            vertex_cols: self.grid.nx + 1,
            cell_cols: self.grid.nx,
            model_fingerprint: self.model_fingerprint.clone(),
            noise_fingerprint: self.noise_fingerprint.clone(),
        };
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(stem.with_extension("json"), json + "\n")?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<FieldPath> {
        let json = std::fs::read_to_string(stem.with_extension("json"))?;
        let side: Sidecar = serde_json::from_str(&json).map_err(|e| Error::Io(e.to_string()))?;
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        let nv = side.rows * side.vertex_cols;
        let nc = side.rows * side.cell_cols;
        if bytes.len() != 8 * (nv + nc) {
            return Err(Error::Io(format!(
                "expected {} bytes, found {}",
                8 * (nv + nc),
                bytes.len()
            )));
        }
        let mut all = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let values: Vec<f64> = all.by_ref().take(nv).collect();
        let cells: Vec<f64> = all.collect();
        Ok(FieldPath {
            grid: side.grid,
            scheme: side.scheme,
            values,
            cells,
            model_fingerprint: side.model_fingerprint,
            noise_fingerprint: side.noise_fingerprint,
        })
    }
}

fn check_inputs(model: &ModelSpec, grid: &GridSpec, noise: &NoiseGrid) -> Result<()> {
    if noise.grid != *grid {
        return Err(Error::GridMismatch(format!(
            "noise is on {} but the simulation grid is {}",
            noise.grid.label(),
            grid.label()
        )));
    }
    if grid.t > model.horizon * (1.0 + 1e-12) {
        return Err(Error::GridMismatch(format!(
            "grid horizon {} exceeds the model horizon {}",
            grid.t, model.horizon
        )));
    }
    Ok(())
}

/// Runs the scheme and hands every time level to `observe(j, vertices, cells)`
/// without storing the path.
pub fn simulate_observed<F>(
    model: &ModelSpec,
    grid: &GridSpec,
    scheme: SchemeConfig,
    noise: &NoiseGrid,
    mut observe: F,
) -> Result<()>
where
    F: FnMut(usize, &[f64], &[f64]),
{
    check_inputs(model, grid, noise)?;
    let u0 = sample_u0(&model.u0, grid)?;
    let stepper = Stepper::new(&model.kernel, grid, scheme);
    run(model, grid, &stepper, noise, &u0, &mut observe)
}

pub(crate) fn run<F>(
    model: &ModelSpec,
    grid: &GridSpec,
    stepper: &Stepper,
    noise: &NoiseGrid,
    u0: &[f64],
    observe: &mut F,
) -> Result<()>
where
    F: FnMut(usize, &[f64], &[f64]),
{
    let n = grid.nx;
    let dx = grid.dx();
    let mut cells: Vec<f64> = (0..n).map(|i| model.u0.eval((i as f64 + 0.5) * dx)).collect();
    let mut state = vec![0.0; n];
    stepper.state_from_cells(&cells, &mut state);
    let mut verts = vec![0.0; n + 1];
    let mut drift = vec![0.0; n];
    let mut forcing = vec![0.0; n];
    let mut w = stepper.work();
    let has_drift = !model.b.is_zero();
    let has_noise = !model.sigma.is_zero();
    observe(0, u0, &cells);
    for j in 0..grid.nt {
        if has_drift {
            for i in 0..n {
                drift[i] = model.b.value(cells[i]);
            }
        }
        if has_noise {
            let row = noise.row(j);
            for i in 0..n {
                forcing[i] = model.sigma.value(cells[i]) * row[i] / dx;
            }
        }
        stepper.step(
            &mut state,
            has_drift.then_some(&drift[..]),
            has_noise.then_some(&forcing[..]),
            &mut w,
        );
        stepper.cells(&state, &mut cells);
        stepper.vertices(&state, &mut verts);
        if !verts.iter().sum::<f64>().is_finite() {
            return Err(Error::Diverged {
                path: noise.path_index,
                step: j + 1,
            });
        }
        observe(j + 1, &verts, &cells);
    }
    Ok(())
}

/// Simulates and stores one full path.
pub fn simulate_path(model: &ModelSpec, grid: &GridSpec, scheme: SchemeConfig, noise: &NoiseGrid) -> Result<FieldPath> {
    let rows = grid.nt + 1;
    let mut values = Vec::with_capacity(rows * (grid.nx + 1));
    let mut cells = Vec::with_capacity(rows * grid.nx);
    simulate_observed(model, grid, scheme, noise, |_, v, c| {
        values.extend_from_slice(v);
        cells.extend_from_slice(c);
    })?;
    Ok(FieldPath {
        grid: *grid,
        scheme: scheme.scheme,
        values,
        cells,
        model_fingerprint: model.fingerprint(),
        noise_fingerprint: noise.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStat {
    pub grid: GridSpec,
    /// requested probe
    pub t: f64,
    pub x: f64,
    /// grid indices actually used
    pub j: usize,
    pub i: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
}

/// Nearest grid indices for a probe point.
pub fn probe_indices(grid: &GridSpec, t: f64, x: f64) -> (usize, usize) {
    let j = (t / grid.dt()).round().clamp(0.0, grid.nt as f64) as usize;
    let i = (x * grid.nx as f64).round().clamp(0.0, grid.nx as f64) as usize;
    (j, i)
}

/// Monte Carlo mean and variance at fixed probes across a list of grids.
/// Path `p` on every grid uses `noise::sample(seed, p, grid)`.
pub fn convergence_probe(
    model: &ModelSpec,
    grids: &[GridSpec],
    n_paths: usize,
    seed: u64,
    probes: &[(f64, f64)],
    scheme: SchemeConfig,
) -> Result<Vec<ProbeStat>> {
    if let Some(g) = grids.iter().find(|g| g.t != grids[0].t) {
        return Err(Error::GridMismatch(format!(
            "all grids must share T; found {} and {}",
            grids[0].t, g.t
        )));
    }
    if n_paths < 2 {
        return Err(Error::InsufficientData("at least two paths are needed".into()));
    }
    let mut out = Vec::new();
    for grid in grids {
        let idx: Vec<(usize, usize)> = probes.iter().map(|&(t, x)| probe_indices(grid, t, x)).collect();
        let u0 = sample_u0(&model.u0, grid)?;
        let stepper = Stepper::new(&model.kernel, grid, scheme);
        let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
            .into_par_iter()
            .map(|p| {
                let noise = crate::noise::sample(seed, p, *grid);
                check_inputs(model, grid, &noise)?;
                let mut vals = vec![f64::NAN; idx.len()];
                run(model, grid, &stepper, &noise, &u0, &mut |j, v, _| {
                    for (k, &(jj, ii)) in idx.iter().enumerate() {
                        if jj == j {
                            vals[k] = v[ii];
                        }
                    }
                })?;
                Ok(vals)
            })
            .collect::<Result<_>>()?;
        for (k, (&(t, x), &(j, i))) in probes.iter().zip(&idx).enumerate() {
            let xs: Vec<f64> = per_path.iter().map(|v| v[k]).collect();
            let (mean, var) = crate::stats::mean_var(&xs);
            let (_, var_se) = crate::stats::variance_with_stderr(&xs);
            out.push(ProbeStat {
                grid: *grid,
                t,
                x,
                j,
                i,
                mean,
                mean_se: (var / n_paths as f64).sqrt(),
                variance: var,
                variance_se: var_se,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::SeriesTruncation;
    use crate::noise;

    fn fourth(rho: f64) -> KernelId {
        KernelId::fourth_order(rho).unwrap()
    }

    fn kernels() -> [KernelId; 3] {
        [KernelId::DIRICHLET, KernelId::NEUMANN, fourth(1.0)]
    }

    #[test]
    fn zero_model_gives_zero_path() {
        for k in kernels() {
            let grid = GridSpec::new(16, 64, 0.1).unwrap();
            let m = ModelSpec::deterministic(k, InitialConditionSpec::zero());
            let p = simulate_path(&m, &grid, SchemeConfig::spectral(), &noise::sample(1, 0, grid)).unwrap();
            assert!(p.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn eigenmodes_decay_exactly() {
        let grid = GridSpec::new(128, 100, 0.1).unwrap();
        let cases = [
            (KernelId::DIRICHLET, InitialConditionSpec::eigenmode(&KernelId::DIRICHLET, 1).unwrap()),
            (fourth(1.0), InitialConditionSpec::eigenmode(&fourth(1.0), 1).unwrap()),
            (KernelId::NEUMANN, InitialConditionSpec::eigenmode(&KernelId::NEUMANN, 3).unwrap()),
        ];
        for (k, u0) in cases {
            let m = ModelSpec::deterministic(k, u0.clone());
            let p = simulate_path(&m, &grid, SchemeConfig::spectral(), &NoiseGrid::zeros(grid)).unwrap();
            let mode = match u0.kind {
                InitialKind::Sine(k) | InitialKind::Cosine(k) => k,
                _ => unreachable!(),
            };
            for j in [10, 50, 100] {
                let decay = (-k.lambda(mode) * grid.time(j)).exp();
                for i in 0..=grid.nx {
                    let want = decay * u0.eval(grid.x(i));
                    let got = p.value(j, i);
                    assert!(
                        (got - want).abs() <= 1e-6 * decay,
                        "{} j={j} i={i}: {got} vs {want}",
                        k.label()
                    );
                }
            }
        }
    }

    #[test]
    fn dirichlet_boundary_rows_are_zero() {
        let grid = GridSpec::new(32, 256, 0.25).unwrap();
        let m = ModelSpec::default_nonlinear(KernelId::DIRICHLET);
        for s in [SchemeConfig::spectral(), SchemeConfig::finite_difference()] {
            let p = simulate_path(&m, &grid, s, &noise::sample(7, 3, grid)).unwrap();
            for j in 0..=grid.nt {
                assert_eq!(p.value(j, 0), 0.0);
                assert_eq!(p.value(j, grid.nx), 0.0);
            }
            assert_eq!(p.row(0), &sample_u0(&m.u0, &grid).unwrap()[..]);
        }
    }

    #[test]
    fn mean_is_conserved_without_forcing() {
        let grid = GridSpec::new(32, 200, 0.2).unwrap();
        let tab: Vec<f64> = (0..=40).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
        let u0 = InitialConditionSpec::tabulated(tab, 0.0, 1.0, 1e6, 1.0).unwrap();
        for k in [KernelId::NEUMANN, fourth(2.0)] {
            let m = ModelSpec::deterministic(k, u0.clone());
            for s in [SchemeConfig::spectral(), SchemeConfig::finite_difference()] {
                let p = simulate_path(&m, &grid, s, &NoiseGrid::zeros(grid)).unwrap();
                let mean = |j: usize| p.cell_row(j).iter().sum::<f64>() / grid.nx as f64;
                for j in 1..=grid.nt {
                    let tol = if s.scheme == Scheme::SpectralExponentialEuler { 1e-12 } else { 1e-10 };
                    assert!((mean(j) - mean(0)).abs() < tol, "{:?} j={j}: {}", s.scheme, mean(j) - mean(0));
                }
            }
        }
    }

    #[test]
    fn linear_variance_matches_series() {
        // spectral at Nx = 32: the vertex variance is the series truncated at 31 modes
        let grid = GridSpec::new(32, 512, 0.1).unwrap();
        let m = ModelSpec::linear(KernelId::DIRICHLET);
        let stats = convergence_probe(&m, &[grid], 4000, 11, &[(0.1, 0.5), (0.05, 0.25)], SchemeConfig::spectral()).unwrap();
        for s in stats {
            let exact = linear_exact_variance(&KernelId::DIRICHLET, s.t, s.x, SeriesTruncation::AdaptiveTail(1e-13)).unwrap();
            assert!(
                (s.variance - exact).abs() < 3.0 * s.variance_se,
                "t={} x={}: {} ± {} vs {exact}",
                s.t,
                s.x,
                s.variance,
                s.variance_se
            );
            assert!(s.mean.abs() < 4.0 * s.mean_se);
        }
    }

    #[test]
    fn single_step_variance_is_exact_per_mode() {
        // Var of the Dirichlet vertex value equals the truncated series, independent of dt
        let k = KernelId::DIRICHLET;
        let grid = GridSpec::new(16, 4, 0.1).unwrap();
        let st = Stepper::new(&k, &grid, SchemeConfig::spectral());
        let mut w = st.work();
        let n = grid.nx;
        let x = 0.25;
        let obs = st.observation(x);
        // propagate the covariance columnwise: Var = Σ_j Σ_i (V E^{N-1-j} Q A e_i / dx)² dx dt
        let mut var = 0.0;
        for j in 0..grid.nt {
            for i in 0..n {
                let mut s = vec![0.0; n];
                let mut f = vec![0.0; n];
                f[i] = 1.0 / grid.dx();
                st.step(&mut s, None, Some(&f), &mut w);
                for _ in j + 1..grid.nt {
                    st.step(&mut s, None, None, &mut w);
                }
                let u: f64 = obs.iter().zip(&s).map(|(a, b)| a * b).sum();
                var += u * u * grid.dx() * grid.dt();
            }
        }
        let want = linear_exact_variance(&k, 0.1, x, SeriesTruncation::FixedModes(n - 1)).unwrap();
        assert!((var - want).abs() < 1e-12 * want, "{var} vs {want}");
    }

    #[test]
    fn schemes_agree_on_deterministic_path() {
        let k = KernelId::DIRICHLET;
        let m = ModelSpec {
            sigma: Coefficient::Constant(0.0),
            ..ModelSpec::default_nonlinear(k)
        };
        let fine = GridSpec::new(128, 8192, 0.1).unwrap();
        let a = simulate_path(&m, &fine, SchemeConfig::spectral(), &NoiseGrid::zeros(fine)).unwrap();
        let b = simulate_path(&m, &fine, SchemeConfig::finite_difference(), &NoiseGrid::zeros(fine)).unwrap();
        let j = fine.nt;
        for i in (0..=fine.nx).step_by(16) {
            assert!((a.value(j, i) - b.value(j, i)).abs() < 2e-4, "i={i}");
        }
    }

    #[test]
    fn deterministic_refinement_halves_differences() {
        let k = KernelId::DIRICHLET;
        let m = ModelSpec {
            sigma: Coefficient::Constant(0.0),
            ..ModelSpec::default_nonlinear(k)
        };
        let at = |nx: usize, nt: usize| {
            let g = GridSpec::new(nx, nt, 0.2).unwrap();
            let p = simulate_path(&m, &g, SchemeConfig::spectral(), &NoiseGrid::zeros(g)).unwrap();
            p.value(nt, nx / 2)
        };
        let v: Vec<f64> = [(16, 64), (32, 128), (64, 256), (128, 512)]
            .iter()
            .map(|&(a, b)| at(a, b))
            .collect();
        let d: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        for w in d.windows(2) {
            assert!(w[0] >= 2.0 * w[1], "{d:?}");
        }
    }

    #[test]
    fn identical_inputs_identical_output() {
        let grid = GridSpec::new(16, 64, 0.1).unwrap();
        let m = ModelSpec::default_nonlinear(KernelId::NEUMANN);
        let a = convergence_probe(&m, &[grid], 8, 5, &[(0.05, 0.5)], SchemeConfig::spectral()).unwrap();
        let b = convergence_probe(&m, &[grid], 8, 5, &[(0.05, 0.5)], SchemeConfig::spectral()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let grid = GridSpec::new(16, 64, 0.1).unwrap();
        let other = GridSpec::new(16, 32, 0.1).unwrap();
        let m = ModelSpec::default_nonlinear(KernelId::DIRICHLET);
        let e = simulate_path(&m, &grid, SchemeConfig::spectral(), &noise::sample(1, 0, other));
        assert!(matches!(e, Err(Error::GridMismatch(_))));
        let blow = ModelSpec {
            b: Coefficient::Affine { a: 0.0, b: 1e9 },
            lip_b: 1e9,
            ..m.clone()
        };
        match simulate_path(&blow, &grid, SchemeConfig::spectral(), &noise::sample(1, 0, grid)) {
            Err(Error::Diverged { step, .. }) => assert!(step > 0 && step <= grid.nt),
            other => panic!("expected divergence, got {other:?}"),
        }
        let bad_lip = ModelSpec { lip_b: 0.5, ..m.clone() };
        assert!(matches!(bad_lip.validate(), Err(Error::InvalidModel(_))));
        let bad_bc = ModelSpec {
            u0: InitialConditionSpec::cos_squared(),
            ..m.clone()
        };
        assert!(matches!(bad_bc.validate(), Err(Error::InvalidModel(_))));
        assert!(m.validate().is_ok() && m.check_ellipticity().is_ok());
        let lin = ModelSpec::deterministic(KernelId::DIRICHLET, InitialConditionSpec::zero());
        assert!(lin.check_ellipticity().is_err());
    }

    #[test]
    fn initial_condition_certificates() {
        let grid = GridSpec::new(64, 1, 1.0).unwrap();
        assert_eq!(sample_u0(&InitialConditionSpec::zero(), &grid).unwrap(), vec![0.0; 65]);
        let s = InitialConditionSpec::eigenmode(&KernelId::DIRICHLET, 1).unwrap();
        assert!((s.c0 - PI * PI / 2.0 * 1.01).abs() < 1e-12);
        assert!(sample_u0(&s, &grid).is_ok());
        let tight = InitialConditionSpec { c0: 0.9 * PI * PI / 2.0, ..s };
        assert!(matches!(sample_u0(&tight, &grid), Err(Error::InvalidInitialCondition { .. })));
        assert!(sample_u0(&InitialConditionSpec::cos_squared(), &grid).is_ok());
        // a drop of 0.5 just right of the maximiser
        let mut v = vec![1.0; 65];
        for x in v.iter_mut().skip(34) {
            *x = 0.5;
        }
        let jump = InitialConditionSpec::tabulated(v, 0.5, 0.75, 5.0, 0.1).unwrap();
        match sample_u0(&jump, &grid) {
            Err(Error::InvalidInitialCondition { y }) => assert!(y > 0.5 && y < 0.55),
            other => panic!("expected a certificate error, got {other:?}"),
        }
    }

    #[test]
    fn path_round_trips_through_disk() {
        let grid = GridSpec::new(8, 16, 0.1).unwrap();
        let m = ModelSpec::default_nonlinear(KernelId::NEUMANN);
        let p = simulate_path(&m, &grid, SchemeConfig::spectral(), &noise::sample(3, 1, grid)).unwrap();
        let dir = std::env::temp_dir().join(format!("supdens-path-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("p");
        p.save(&stem).unwrap();
        assert_eq!(FieldPath::load(&stem).unwrap(), p);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn banded_inverse_is_symmetric() {
        let grid = GridSpec::new(9, 10, 0.1).unwrap();
        let fd = FiniteDifference::new(&fourth(3.0), &grid);
        let n = 9;
        let mut cols = Vec::new();
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            fd.lu.solve(&mut e);
            cols.push(e);
        }
        for i in 0..n {
            for j in 0..n {
                assert!((cols[i][j] - cols[j][i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tabulated_coefficient_interpolates() {
        let c = Coefficient::Tabulated {
            lo: 0.0,
            hi: 2.0,
            values: vec![0.0, 1.0, 4.0],
        };
        assert_eq!(c.value(-1.0), 0.0);
        assert_eq!(c.value(0.5), 0.5);
        assert_eq!(c.value(1.5), 2.5);
        assert_eq!(c.value(3.0), 4.0);
        assert_eq!(c.derivative(1.5), 3.0);
        assert_eq!(c.derivative(2.5), 0.0);
    }
}
