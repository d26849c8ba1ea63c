//! Packed binary GEMM against a plain float loop.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitcore::{binary_matmul_int_threads, PackedBitMatrix};
use crate::{Error, Result};

/// Parse `M,N,K`.
pub fn parse_size(s: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad size {s:?}: {e}")))?;
    match dims[..] {
        [m, n, k] if m > 0 && n > 0 && k > 0 => Ok((m, n, k)),
        _ => Err(Error::Config(format!(
            "size must be three positive integers M,N,K, got {s:?}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GemmBench {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Packing both operands plus the popcount product.
    pub packed_s: f64,
    pub naive_s: f64,
    /// The two results agreed element for element.
    pub agree: bool,
}

impl GemmBench {
    fn macs(&self) -> f64 {
        (self.m * self.n * self.k) as f64
    }

    pub fn packed_gmacs(&self) -> f64 {
        self.macs() / self.packed_s / 1e9
    }

    pub fn naive_gmacs(&self) -> f64 {
        self.macs() / self.naive_s / 1e9
    }

    pub fn speedup(&self) -> f64 {
        self.naive_s / self.packed_s
    }

    pub fn line(&self) -> String {
        format!(
            "kind=gemm m={} n={} k={} packed_s={:.4} naive_s={:.4} packed_gmacs={:.3} naive_gmacs={:.3} speedup={:.2} agree={}",
            self.m,
            self.n,
            self.k,
            self.packed_s,
            self.naive_s,
            self.packed_gmacs(),
            self.naive_gmacs(),
            self.speedup(),
            self.agree
        )
    }
}

/// `out[i][j] = Σ_p a[i][p] · w[j][p]`, one thread, no blocking.
pub fn naive_gemm(a: &[f32], w: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * w[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Time both products on the same random ±1 operands, single threaded.
pub fn gemm_bench(m: usize, n: usize, k: usize, seed: u64) -> Result<GemmBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut signs = |len: usize| -> Vec<f32> {
        (0..len)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect()
    };
    let a = signs(m * k);
    let w = signs(n * k);

    let t0 = Instant::now();
    let pa = PackedBitMatrix::pack(black_box(&a), m, k)?;
    let pw = PackedBitMatrix::pack(black_box(&w), n, k)?;
    let packed = binary_matmul_int_threads(&pa, &pw, 1)?;
    let packed_s = t0.elapsed().as_secs_f64();
    black_box(&packed);

    let t0 = Instant::now();
    let naive = naive_gemm(black_box(&a), black_box(&w), m, n, k);
    let naive_s = t0.elapsed().as_secs_f64();

    // Partial sums of ±1 stay exact in f32 for k < 2^24.
    let agree = packed.iter().zip(&naive).all(|(&p, &f)| p as f32 == f);
    Ok(GemmBench {
        m,
        n,
        k,
        packed_s,
        naive_s,
        agree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("1024,1024,1024").unwrap(), (1024, 1024, 1024));
        assert_eq!(parse_size(" 3, 5 ,7").unwrap(), (3, 5, 7));
        for bad in ["", "1,2", "1,2,3,4", "0,1,1", "a,b,c"] {
            assert!(parse_size(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn small_bench_agrees() {
        let b = gemm_bench(17, 9, 130, 1).unwrap();
        assert!(b.agree);
        assert!(b.line().starts_with("kind=gemm m=17 n=9 k=130"));
    }
}
