//! Pseudo-random, Sobol and rank-1 lattice point sets, plus antithetic
//! companions of normal draws.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{chi2_complement, Vector};

pub const SOBOL_MAX_DIM: usize = 1111;
const SOBOL_BITS: usize = 32;
/// Number of leading digits permuted by the nested scramble.
pub const SCRAMBLE_DEPTH: usize = 31;

static JOE_KUO: &str = include_str!("../data/joe_kuo_1111.txt");
static KOROBOV: &str = include_str!("../data/korobov.tsv");

/// The PRNG used everywhere a pseudo-random stream is needed.
pub type Prng = ChaCha8Rng;

pub fn prng(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed: `splitmix64(seed + (stream+1)·φ64)`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed.wrapping_add((stream.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Points in `[0,1)^dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

fn direction_table() -> &'static Vec<[u32; SOBOL_BITS]> {
    static TABLE: OnceLock<Vec<[u32; SOBOL_BITS]>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut out = Vec::with_capacity(SOBOL_MAX_DIM);
        let mut first = [0u32; SOBOL_BITS];
        for (k, v) in first.iter_mut().enumerate() {
            *v = 1u32 << (31 - k);
        }
        out.push(first);
        for line in JOE_KUO.lines().skip(1) {
            let nums: Vec<u32> = line.split_whitespace().map(|t| t.parse().expect("direction table")).collect();
            let (s, a) = (nums[1] as usize, nums[2]);
            let m = &nums[3..3 + s];
            let mut v = [0u32; SOBOL_BITS];
            for k in 0..SOBOL_BITS {
                v[k] = if k < s {
                    m[k] << (31 - k)
                } else {
                    let mut x = v[k - s] ^ (v[k - s] >> s);
                    for j in 1..s {
                        if (a >> (s - 1 - j)) & 1 == 1 {
                            x ^= v[k - j];
                        }
                    }
                    x
                };
            }
            out.push(v);
        }
        out
    })
}

/// Sobol sequence in natural (binary) index order, optionally with nested
/// uniform scrambling of the leading 31 digits.
#[derive(Debug, Clone)]
pub struct SobolGenerator {
    dim: usize,
    dir: &'static [[u32; SOBOL_BITS]],
    scramble_seed: Option<u64>,
    dim_keys: Vec<u64>,
    index: u64,
    state: Vec<u32>,
}

impl SobolGenerator {
    /// Scrambled generators start at index 0 and unscrambled ones at index 1
    /// so the origin is never emitted.
    pub fn new(dim: usize, scramble_seed: Option<u64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BadDimension("sobol dimension 0".into()));
        }
        if dim > SOBOL_MAX_DIM {
            return Err(Error::DimTooLarge(dim));
        }
        let dir = &direction_table()[..dim];
        let dim_keys = match scramble_seed {
            Some(seed) => (0..dim as u64).map(|d| splitmix(sub_seed(seed, d))).collect(),
            None => Vec::new(),
        };
        let start = if scramble_seed.is_some() { 0 } else { 1 };
        let mut g = Self { dim, dir, scramble_seed, dim_keys, index: start, state: vec![0; dim] };
        g.state = (0..dim).map(|d| g.raw(start, d)).collect();
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_scrambled(&self) -> bool {
        self.scramble_seed.is_some()
    }

    fn raw(&self, index: u64, d: usize) -> u32 {
        let mut x = 0u32;
        let mut i = index;
        let mut b = 0;
        while i != 0 {
            if i & 1 == 1 {
                x ^= self.dir[d][b];
            }
            i >>= 1;
            b += 1;
        }
        x
    }

    fn finish(&self, x: u32, d: usize) -> f64 {
        if self.scramble_seed.is_none() {
            return x as f64 * (1.0 / 4_294_967_296.0);
        }
        let key = self.dim_keys[d];
        let mut flips = 0u32;
        for level in 0..SCRAMBLE_DEPTH {
            let prefix = if level == 0 { 0 } else { (x >> (32 - level)) as u64 };
            let code = (prefix << 5) | level as u64;
            if splitmix(key ^ code.wrapping_mul(0x9e37_79b9_7f4a_7c15)) & 1 == 1 {
                flips |= 1 << (31 - level);
            }
        }
        let y = (x ^ flips) >> 1;
        let cell = ((x >> 1) as u64) << 5 | 31;
        let fill = ((splitmix(key ^ cell.wrapping_mul(0x9e37_79b9_7f4a_7c15)) >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0);
        (y as f64 + fill) * (1.0 / 2_147_483_648.0)
    }

    /// Point with the given raw index, independent of the iterator state.
    pub fn point(&self, index: u64, out: &mut [f64]) {
        for d in 0..self.dim {
            out[d] = self.finish(self.raw(index, d), d);
        }
    }

    pub fn next_into(&mut self, out: &mut [f64]) {
        for d in 0..self.dim {
            out[d] = self.finish(self.state[d], d);
        }
        let changed = self.index ^ (self.index + 1);
        self.index += 1;
        for d in 0..self.dim {
            let mut c = changed;
            let mut b = 0;
            while c != 0 {
                if c & 1 == 1 {
                    self.state[d] ^= self.dir[d][b];
                }
                c >>= 1;
                b += 1;
            }
        }
    }
}

impl Iterator for SobolGenerator {
    type Item = Vec<f64>;
    fn next(&mut self) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.next_into(&mut out);
        Some(out)
    }
}

pub fn sobol_points(dim: usize, count: usize, scramble_seed: Option<u64>) -> Result<PointSet> {
    if count == 0 {
        return Err(Error::BadDimension("sobol count 0".into()));
    }
    let mut g = SobolGenerator::new(dim, scramble_seed)?;
    let mut data = vec![0.0; dim * count];
    for row in data.chunks_exact_mut(dim) {
        g.next_into(row);
    }
    Ok(PointSet { dim, data })
}

pub fn uniform_points(dim: usize, count: usize, seed: u64) -> PointSet {
    let mut rng = prng(seed);
    PointSet { dim, data: (0..dim * count).map(|_| rng.random::<f64>()).collect() }
}

/// Dimension columns of the generator table.
const KOROBOV_DIMS: [usize; 17] = [2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 25, 32, 40, 50, 64, 80, 100];

struct KorobovTable {
    rows: Vec<(u64, Vec<u64>)>,
}

fn korobov_table() -> &'static KorobovTable {
    static TABLE: OnceLock<KorobovTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let rows = KOROBOV
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with('n'))
            .map(|l| {
                let v: Vec<u64> = l.split_whitespace().map(|t| t.parse().expect("korobov table")).collect();
                (v[0], v[1..].to_vec())
            })
            .collect();
        KorobovTable { rows }
    })
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Korobov generator `a` and size `n` for at least `n_min` points in `dim`
/// dimensions: the nearest tabled `n ≥ n_min`; past the table end the next
/// prime with a golden-ratio generator.
pub fn korobov_parameters(n_min: usize, dim: usize) -> (u64, u64) {
    let col = KOROBOV_DIMS.iter().position(|&d| d >= dim).unwrap_or(KOROBOV_DIMS.len() - 1);
    let table = korobov_table();
    if let Some((n, a)) = table.rows.iter().find(|(n, _)| *n as usize >= n_min) {
        return (*n, a[col]);
    }
    let mut n = n_min.max(7) as u64;
    while !is_prime(n) {
        n += 1;
    }
    let a = ((n as f64) * 0.618_033_988_749_894_8).round() as u64;
    (n, a)
}

/// Shifted rank-1 lattice: point `i` is `frac(i·z/n + shift)`.
#[derive(Debug, Clone)]
pub struct KorobovRule {
    pub n: usize,
    pub generator: Vec<u64>,
    pub shift: Vec<f64>,
}

impl KorobovRule {
    pub fn dim(&self) -> usize {
        self.generator.len()
    }

    pub fn point(&self, i: usize, out: &mut [f64]) {
        let n = self.n as u64;
        let inv = 1.0 / self.n as f64;
        for (j, (&z, &s)) in self.generator.iter().zip(&self.shift).enumerate() {
            let x = ((i as u64 * z) % n) as f64 * inv + s;
            out[j] = if x >= 1.0 { x - 1.0 } else { x };
        }
    }

    /// Same lattice with a new random shift.
    pub fn reshift(&mut self, rng: &mut Prng) {
        for s in self.shift.iter_mut() {
            *s = rng.random::<f64>();
        }
    }

    pub fn points(&self) -> PointSet {
        let d = self.dim();
        let mut data = vec![0.0; self.n * d];
        for (i, row) in data.chunks_exact_mut(d.max(1)).enumerate() {
            self.point(i, row);
        }
        PointSet { dim: d, data }
    }
}

/// Unshifted Korobov lattice with at least `n` points.
pub fn korobov_lattice(n: usize, dim: usize) -> KorobovRule {
    let (n, a) = korobov_parameters(n.max(7), dim);
    let mut generator = Vec::with_capacity(dim);
    let mut z = 1u64;
    for _ in 0..dim {
        generator.push(z);
        z = (z * a) % n;
    }
    KorobovRule { n: n as usize, generator, shift: vec![0.0; dim] }
}

pub fn korobov_points(n: usize, dim: usize, seed: u64) -> KorobovRule {
    let mut rule = korobov_lattice(n, dim);
    rule.reshift(&mut prng(seed));
    rule
}

/// `{u, −u, s·u, −s·u}` where `s` maps `‖u‖²` to the complementary χ²
/// quantile, `s = sqrt(F⁻¹(1 − F(‖u‖²)))/‖u‖`.
pub fn antithetic_expand(u: &Vector) -> Result<[Vector; 4]> {
    let r2 = u.norm_squared();
    if !(r2 > 0.0) || !r2.is_finite() {
        return Err(Error::ZeroVector);
    }
    let s = (chi2_complement(r2, u.len() as f64) / r2).sqrt();
    let su = u * s;
    Ok([u.clone(), -u, su.clone(), -su])
}

/// Scale factor of `antithetic_expand`.
pub fn antithetic_scale(r2: f64, k: usize) -> f64 {
    (chi2_complement(r2, k as f64) / r2).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn van_der_corput() {
        let p = sobol_points(1, 8, None).unwrap();
        assert_eq!(p.data, vec![0.5, 0.25, 0.75, 0.125, 0.625, 0.375, 0.875, 0.0625]);
    }

    #[test]
    fn second_dimension_matches_reference() {
        // first points of the Joe-Kuo sequence in dimension 2 (index 1..)
        let p = sobol_points(2, 4, None).unwrap();
        let d2: Vec<f64> = p.iter().map(|x| x[1]).collect();
        assert_eq!(d2, vec![0.5, 0.75, 0.25, 0.625]);
    }

    #[test]
    fn too_many_dims() {
        assert!(matches!(sobol_points(1112, 1, None), Err(Error::DimTooLarge(1112))));
        assert!(sobol_points(1111, 2, Some(1)).is_ok());
    }

    #[test]
    fn scrambled_points_in_unit_cube() {
        let p = sobol_points(5, 1000, Some(7)).unwrap();
        assert!(p.data.iter().all(|&x| x > 0.0 && x < 1.0));
        let q = sobol_points(5, 1000, Some(8)).unwrap();
        assert_ne!(p, q);
        assert_eq!(p, sobol_points(5, 1000, Some(7)).unwrap());
    }

    #[test]
    fn next_matches_point() {
        let mut g = SobolGenerator::new(6, Some(3)).unwrap();
        let mut a = vec![0.0; 6];
        let mut b = vec![0.0; 6];
        for i in 0..100 {
            g.next_into(&mut a);
            g.point(i, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn antithetic_examples() {
        let u = Vector::from_vec(vec![crate::numeric::norm_quantile(0.8)]);
        let [a, b, c, d] = antithetic_expand(&u).unwrap();
        assert_eq!(b, -a.clone());
        assert_eq!(d, -c.clone());
        assert!((c[0] * c[0] - 0.274_995_897_728_456_04).abs() < 1e-12);
        assert!(matches!(antithetic_expand(&Vector::zeros(3)), Err(Error::ZeroVector)));
    }

    #[test]
    fn korobov_lookup_rounds_up() {
        let (n, _) = korobov_parameters(100, 3);
        assert!(n >= 100);
        let (n2, _) = korobov_parameters(n as usize, 3);
        assert_eq!(n, n2);
        let big = korobov_lattice(5_000_000, 4);
        assert!(big.n >= 5_000_000);
    }
}
