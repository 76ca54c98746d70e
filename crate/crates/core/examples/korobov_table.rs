//! Regenerates `data/korobov.tsv`: for prime sizes spaced a quarter octave
//! apart and a fixed set of dimension columns, the Korobov generator `a`
//! minimising the weighted P₂ criterion
//!
//!   P₂ = −1 + (1/n) Σ_k Π_j (1 + γ_j 2π² B₂({k z_j / n})),  z_j = a^j mod n,
//!
//! with γ_j = 1/(j+1) and B₂(x) = x² − x + 1/6.
//!
//! Usage: cargo run --release -p probit-mlm --example korobov_table > crates/core/data/korobov.tsv

use rand::{Rng, SeedableRng};

const DIMS: [usize; 17] = [2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 25, 32, 40, 50, 64, 80, 100];
const N_MAX: u64 = 1 << 19;

fn is_prime(n: u64) -> bool {
    n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
}

fn criterion(n: u64, a: u64, out: &mut [f64]) {
    let dmax = *DIMS.last().unwrap();
    let mut z = vec![0u64; dmax];
    let mut p = 1u64;
    for zj in z.iter_mut() {
        *zj = p;
        p = p * a % n;
    }
    let gamma: Vec<f64> = (0..dmax).map(|j| 2.0 * std::f64::consts::PI.powi(2) / (j as f64 + 1.0)).collect();
    let mut kz = vec![0u64; dmax];
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v = 0.0);
    for _ in 0..n {
        let mut prod = 1.0;
        let mut b = 0;
        for j in 0..dmax {
            let x = kz[j] as f64 * inv;
            prod *= 1.0 + gamma[j] * (x * x - x + 1.0 / 6.0);
            if j + 1 == DIMS[b] {
                out[b] += prod;
                b += 1;
            }
            kz[j] += z[j];
            if kz[j] >= n {
                kz[j] -= n;
            }
        }
    }
    for v in out.iter_mut() {
        *v = *v * inv - 1.0;
    }
}

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20_231_017);
    let mut sizes = Vec::new();
    let mut j = 0;
    loop {
        let target = (7.0 * 2f64.powf(j as f64 / 4.0)).ceil() as u64;
        let mut n = target;
        while !is_prime(n) {
            n += 1;
        }
        if n > N_MAX {
            break;
        }
        if sizes.last() != Some(&n) {
            sizes.push(n);
        }
        j += 1;
    }
    println!("n\t{}", DIMS.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\t"));
    let mut scores = vec![0.0; DIMS.len()];
    for &n in &sizes {
        let candidates: Vec<u64> = if n <= 512 {
            (2..=n / 2).collect()
        } else {
            let m = if n < 16_384 { 64 } else { 20 };
            (0..m).map(|_| rng.random_range(2..n / 2)).collect()
        };
        let mut best = vec![(f64::INFINITY, 1u64); DIMS.len()];
        for &a in &candidates {
            criterion(n, a, &mut scores);
            for (b, &s) in scores.iter().enumerate() {
                if s < best[b].0 {
                    best[b] = (s, a);
                }
            }
        }
        println!("{n}\t{}", best.iter().map(|b| b.1.to_string()).collect::<Vec<_>>().join("\t"));
        eprintln!("n = {n} done");
    }
}
