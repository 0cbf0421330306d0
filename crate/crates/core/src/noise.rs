//! Discrete space-time white noise.
//!
//! Cell `(j, i)` of path `p` is the `(j·Nx + i)`-th 64-bit word pair of the
//! ChaCha12 stream `p` under a key derived from `(seed, Nx, Nt, T)`. Because the
//! stream is seekable, any cell can be regenerated on its own, and whole paths
//! come out in one sequential sweep. Uniforms become normals through the AS241
//! inverse CDF evaluated with `libm`, so the values do not depend on the
//! platform's math library.

use crate::error::{domain, Result};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Uniform space-time grid on `[0,T]×[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub nt: usize,
    pub t: f64,
}

impl GridSpec {
    pub fn new(nx: usize, nt: usize, t: f64) -> Result<GridSpec> {
        if nx < 2 {
            return domain(format!("Nx must be at least 2, got {nx}"));
        }
        if nt < 1 {
            return domain("Nt must be at least 1");
        }
        if !(t > 0.0 && t.is_finite()) {
            return domain(format!("horizon must be positive, got {t}"));
        }
        Ok(GridSpec { nx, nt, t })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.t / self.nt as f64
    }

    /// Vertex `x_i = i/Nx`, `i = 0..=Nx`.
    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.nx as f64
    }

    /// Time level `t_j = j·T/Nt`, `j = 0..=Nt`.
    #[inline]
    pub fn time(&self, j: usize) -> f64 {
        if j == self.nt {
            self.t
        } else {
            self.t * j as f64 / self.nt as f64
        }
    }

    pub fn cells(&self) -> usize {
        self.nx * self.nt
    }

    pub fn label(&self) -> String {
        format!("Nx={} Nt={} T={}", self.nx, self.nt, self.t)
    }
}

/// Increments `ΔW_{j,i}` of one path, row-major in `(j, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid {
    pub seed: u64,
    pub path_index: u64,
    pub grid: GridSpec,
    increments: Vec<f64>,
    edits: Vec<(usize, usize, f64)>,
}

fn stream_key(seed: u64, grid: &GridSpec) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"supdens/noise/v1");
    h.update(seed.to_le_bytes());
    h.update((grid.nx as u64).to_le_bytes());
    h.update((grid.nt as u64).to_le_bytes());
    h.update(grid.t.to_bits().to_le_bytes());
    h.finalize().into()
}

/// Addressable generator for one `(seed, grid)` pair.
#[derive(Clone)]
pub struct NoiseStream {
    rng: ChaCha12Rng,
    grid: GridSpec,
    scale: f64,
}

impl NoiseStream {
    pub fn new(seed: u64, grid: GridSpec) -> NoiseStream {
        NoiseStream {
            rng: ChaCha12Rng::from_seed(stream_key(seed, &grid)),
            grid,
            scale: (grid.dt() * grid.dx()).sqrt(),
        }
    }

    /// The single increment `ΔW_{j,i}` of path `path_index`.
    pub fn cell(&mut self, path_index: u64, j: usize, i: usize) -> f64 {
        assert!(j < self.grid.nt && i < self.grid.nx, "cell ({j}, {i}) outside the grid");
        self.rng.set_stream(path_index);
        self.rng.set_word_pos(2 * (j * self.grid.nx + i) as u128);
        self.scale * standard_normal(self.rng.next_u64())
    }

    /// All increments of a path, row-major.
    pub fn fill(&mut self, path_index: u64, out: &mut [f64]) {
        assert_eq!(out.len(), self.grid.cells());
        self.rng.set_stream(path_index);
        self.rng.set_word_pos(0);
        for v in out.iter_mut() {
            *v = self.scale * standard_normal(self.rng.next_u64());
        }
    }
}

/// Map 64 random bits to a standard normal through the top 53 bits.
#[inline]
pub fn standard_normal(bits: u64) -> f64 {
    let u = ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    inverse_normal_cdf(u)
}

#[inline]
fn poly(c: &[f64; 8], x: f64) -> f64 {
    let mut s = c[7];
    for k in (0..7).rev() {
        s = s * x + c[k];
    }
    s
}

const A: [f64; 8] = [
    3.387_132_872_796_366_6,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_4e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_854_5e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_6,
    4.630_337_846_156_545,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_8,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_8e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_049e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

/// Standard normal quantile (Wichura's AS241, about 1e-16 relative accuracy).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0,1), got {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = libm::sqrt(-libm::log(r));
    let v = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -v
    } else {
        v
    }
}

impl NoiseGrid {
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.increments[j * self.grid.nx + i]
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.increments[j * self.grid.nx..(j + 1) * self.grid.nx]
    }

    /// Zero noise on `grid`.
    pub fn zeros(grid: GridSpec) -> NoiseGrid {
        NoiseGrid {
            seed: 0,
            path_index: 0,
            grid,
            increments: vec![0.0; grid.cells()],
            edits: vec![(usize::MAX, usize::MAX, 0.0)],
        }
    }

    /// Copy with `ΔW_{j,i}` shifted by `h`. The shift enters the fingerprint.
    pub fn bumped(&self, j: usize, i: usize, h: f64) -> NoiseGrid {
        let mut n = self.clone();
        n.increments[j * self.grid.nx + i] += h;
        n.edits.push((j, i, h));
        n
    }

    /// Short hash identifying the stream, path and any edits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(stream_key(self.seed, &self.grid));
        h.update(self.path_index.to_le_bytes());
        for &(j, i, d) in &self.edits {
            h.update((j as u64).to_le_bytes());
            h.update((i as u64).to_le_bytes());
            h.update(d.to_bits().to_le_bytes());
        }
        hex16(&h.finalize())
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Generate path `path_index` of the noise keyed by `seed` on `grid`.
pub fn sample(seed: u64, path_index: u64, grid: GridSpec) -> NoiseGrid {
    let mut increments = vec![0.0; grid.cells()];
    NoiseStream::new(seed, grid).fill(path_index, &mut increments);
    NoiseGrid {
        seed,
        path_index,
        grid,
        increments,
        edits: Vec::new(),
    }
}

/// White-noise density `ΔW/(dt·dx)`.
pub fn scaled_white(noise: &NoiseGrid) -> Vec<f64> {
    let c = noise.grid.dt() * noise.grid.dx();
    noise.increments.iter().map(|w| w / c).collect()
}
