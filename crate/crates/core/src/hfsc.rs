//! Frequency-enhanced query/key similarity.
//!
//! The attention input is split by a non-subsampled diagonal Haar stencil
//! into a low band (sum of the four diagonal neighbours) and a high band
//! (signed diagonal difference). Half-width binary projections of each band
//! are concatenated and added back onto the input to form `Q_e` and `K_e`,
//! whose binarized product gives the integer similarity map.

use crate::binarize::{att_binarize, rsign, weight_binarize, BinarizerParams};
use crate::bitcore::{binary_matmul, binary_matmul_int, PackedBitMatrix};
use crate::grid::{stencil3x3, TokenGrid};
use crate::{Error, Real, Result};

/// Low band taps: the four diagonal neighbours.
pub const HAAR_LOW: [f64; 9] = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0];
/// High band taps: main diagonal minus anti-diagonal.
pub const HAAR_HIGH: [f64; 9] = [1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct FreqPair<T> {
    pub low: TokenGrid<T>,
    pub high: TokenGrid<T>,
}

fn apply<T: Real>(x: &TokenGrid<T>, taps: &[f64; 9]) -> TokenGrid<T> {
    let kernel: [T; 9] = taps.map(T::lit);
    let mut out = vec![T::zero(); x.values().len()];
    stencil3x3(
        x.values(),
        &mut out,
        1,
        x.height(),
        x.width(),
        x.channels(),
        &kernel,
    );
    TokenGrid::new(x.height(), x.width(), x.channels(), out).expect("same shape")
}

/// Same-size low/high bands with zero padding outside the grid.
pub fn haar_decompose<T: Real>(x: &TokenGrid<T>) -> FreqPair<T> {
    FreqPair {
        low: apply(x, &HAAR_LOW),
        high: apply(x, &HAAR_HIGH),
    }
}

/// Binary linear layer: RSign on the input, sign/mean-|w| on the weight.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryLinear<T> {
    /// `[out, in]`, one row per output channel.
    pub weight: Vec<T>,
    pub out_features: usize,
    pub in_features: usize,
    pub input: BinarizerParams<T>,
}

impl<T: Real> BinaryLinear<T> {
    pub fn new(
        weight: Vec<T>,
        out_features: usize,
        in_features: usize,
        input: BinarizerParams<T>,
    ) -> Result<Self> {
        if weight.len() != out_features * in_features {
            return Err(Error::Length {
                expected: out_features * in_features,
                got: weight.len(),
            });
        }
        Ok(Self {
            weight,
            out_features,
            in_features,
            input,
        })
    }

    /// `rows × in` input to `rows × out` output.
    pub fn forward(&self, x: &[T], rows: usize) -> Result<Vec<T>> {
        if x.len() != rows * self.in_features {
            return Err(Error::Shape(format!(
                "binary linear expects {} input features, got {} values for {rows} rows",
                self.in_features,
                x.len()
            )));
        }
        let xb = PackedBitMatrix::pack_signs_of(
            &x.iter().map(|&v| rsign(v, self.input)).collect::<Vec<_>>(),
            rows,
            self.in_features,
        );
        let (wb, scale) = weight_binarize(&self.weight, self.out_features, self.in_features);
        binary_matmul(&xb, &wb, &scale)
    }
}

/// The four half-width projections `BL_Q^L, BL_Q^H, BL_K^L, BL_K^H`.
#[derive(Clone, Debug, PartialEq)]
pub struct QKProjectors<T> {
    pub q_low: BinaryLinear<T>,
    pub q_high: BinaryLinear<T>,
    pub k_low: BinaryLinear<T>,
    pub k_high: BinaryLinear<T>,
}

impl<T: Real> QKProjectors<T> {
    fn check(&self, channels: usize) -> Result<()> {
        if !channels.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "channel count {channels} must be even"
            )));
        }
        for p in [&self.q_low, &self.q_high, &self.k_low, &self.k_high] {
            if p.in_features != channels || p.out_features * 2 != channels {
                return Err(Error::Shape(format!(
                    "projector {}→{} does not halve {channels} channels",
                    p.in_features, p.out_features
                )));
            }
        }
        Ok(())
    }
}

fn concat_plus<T: Real>(low: &[T], high: &[T], x: &TokenGrid<T>) -> TokenGrid<T> {
    let c = x.channels();
    let half = c / 2;
    let mut out = Vec::with_capacity(x.values().len());
    for t in 0..x.tokens() {
        let xt = x.token(t);
        for ch in 0..c {
            let proj = if ch < half {
                low[t * half + ch]
            } else {
                high[t * half + ch - half]
            };
            out.push(proj + xt[ch]);
        }
    }
    TokenGrid::new(x.height(), x.width(), c, out).expect("same shape")
}

/// `Q_e = cat(BL_Q^L(X^L), BL_Q^H(X^H)) + X` and likewise for `K_e`.
pub fn build_qk<T: Real>(
    x: &TokenGrid<T>,
    proj: &QKProjectors<T>,
) -> Result<(TokenGrid<T>, TokenGrid<T>)> {
    proj.check(x.channels())?;
    let bands = haar_decompose(x);
    let n = x.tokens();
    let ql = proj.q_low.forward(bands.low.values(), n)?;
    let qh = proj.q_high.forward(bands.high.values(), n)?;
    let kl = proj.k_low.forward(bands.low.values(), n)?;
    let kh = proj.k_high.forward(bands.high.values(), n)?;
    Ok((concat_plus(&ql, &qh, x), concat_plus(&kl, &kh, x)))
}

/// `S = B(Q_e) · B(K_e)ᵀ` through the packed kernel; integer valued.
pub fn similarity<T: Real>(
    q: &TokenGrid<T>,
    k: &TokenGrid<T>,
    q_bin: BinarizerParams<T>,
    k_bin: BinarizerParams<T>,
) -> Result<Vec<T>> {
    if q.channels() != k.channels() {
        return Err(Error::Shape(format!(
            "query has {} channels, key has {}",
            q.channels(),
            k.channels()
        )));
    }
    let c = q.channels();
    let qb = PackedBitMatrix::from_fn(q.tokens(), c, |t, ch| {
        rsign(q.token(t)[ch], q_bin) > T::zero()
    });
    let kb = PackedBitMatrix::from_fn(k.tokens(), c, |t, ch| {
        rsign(k.token(t)[ch], k_bin) > T::zero()
    });
    Ok(binary_matmul_int(&qb, &kb)?
        .into_iter()
        .map(|v| T::lit(v as f64))
        .collect())
}

/// Row-wise `softmax(x · scale)` of an `rows × cols` matrix.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize, scale: T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * scale));
        let exps: Vec<T> = row.iter().map(|&v| (v * scale - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

/// Softmax of `S / √c` and its attention-binarized version.
pub fn attention_from_similarity<T: Real>(
    s: &[T],
    n: usize,
    channels: usize,
    att: BinarizerParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if s.len() != n * n {
        return Err(Error::Length {
            expected: n * n,
            got: s.len(),
        });
    }
    let probs = softmax_rows(s, n, T::one() / T::lit(channels as f64).sqrt());
    let bin = probs.iter().map(|&p| att_binarize(p, att)).collect();
    Ok((probs, bin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::sign;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field() {
        let x = TokenGrid::<f64>::from_fn(5, 5, 2, |_, _, _| 1.5);
        let f = haar_decompose(&x);
        assert_eq!(f.low.at(2, 2, 0), 6.0);
        for y in 1..4 {
            for xx in 1..4 {
                assert_eq!(f.high.at(y, xx, 1), 0.0);
            }
        }
        assert_eq!(f.low.at(0, 0, 0), 1.5);
    }

    #[test]
    fn impulse_response() {
        let x =
            TokenGrid::<f64>::from_fn(5, 5, 1, |y, x, _| if (y, x) == (2, 2) { 1.0 } else { 0.0 });
        let f = haar_decompose(&x);
        for (y, x) in [(1, 1), (1, 3), (3, 1), (3, 3)] {
            assert_eq!(f.low.at(y, x, 0), 1.0);
        }
        // out(y,x) takes X(y+1,x+1) and X(y-1,x-1) with +, the others with -
        assert_eq!(f.high.at(1, 1, 0), 1.0);
        assert_eq!(f.high.at(3, 3, 0), 1.0);
        assert_eq!(f.high.at(1, 3, 0), -1.0);
        assert_eq!(f.high.at(3, 1, 0), -1.0);
        assert_eq!(f.low.at(2, 2, 0), 0.0);
        assert_eq!(f.low.values().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn ramp_kills_high_band_interior() {
        let x = TokenGrid::<f64>::from_fn(6, 7, 1, |y, _, _| y as f64);
        let f = haar_decompose(&x);
        for y in 1..5 {
            for xx in 1..6 {
                assert_eq!(f.high.at(y, xx, 0), 0.0);
            }
        }
    }

    #[test]
    fn degenerate_grids_are_legal() {
        let row = TokenGrid::<f64>::from_fn(1, 6, 3, |_, x, c| (x + c) as f64);
        let f = haar_decompose(&row);
        assert_eq!(f.low.values(), &[0.0; 18]);
        let one = TokenGrid::<f64>::from_fn(1, 1, 1, |_, _, _| 2.0);
        assert_eq!(haar_decompose(&one).low.values(), &[0.0]);
    }

    fn layer(w: Vec<f64>, out: usize, inp: usize) -> BinaryLinear<f64> {
        BinaryLinear::new(w, out, inp, BinarizerParams::activation_default()).unwrap()
    }

    #[test]
    fn zero_scale_projectors_leave_input() {
        let x = TokenGrid::<f64>::from_fn(2, 2, 4, |y, xx, c| {
            (y as f64) - (xx as f64) * 0.3 + c as f64
        });
        let z = || layer(vec![0.0; 8], 2, 4);
        let proj = QKProjectors {
            q_low: z(),
            q_high: z(),
            k_low: z(),
            k_high: z(),
        };
        let (q, k) = build_qk(&x, &proj).unwrap();
        assert_eq!(q, x);
        assert_eq!(k, x);
    }

    #[test]
    fn build_qk_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = TokenGrid::<f64>::from_fn(2, 2, 4, |_, _, _| rng.random_range(-1.0..1.0));
        let mut rl = |_: ()| layer((0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), 2, 4);
        let proj = QKProjectors {
            q_low: rl(()),
            q_high: rl(()),
            k_low: rl(()),
            k_high: rl(()),
        };
        let (q, k) = build_qk(&x, &proj).unwrap();

        // scalar reference: diagonal stencils by hand, sign, ±1 dot, mean-|w| scale
        let get = |y: isize, xx: isize, c: usize| -> f64 {
            if (0..2).contains(&y) && (0..2).contains(&xx) {
                x.at(y as usize, xx as usize, c)
            } else {
                0.0
            }
        };
        let reference = |lo: &BinaryLinear<f64>, hi: &BinaryLinear<f64>| {
            let mut out = vec![0.0; 16];
            for y in 0..2isize {
                for xx in 0..2isize {
                    let t = (y * 2 + xx) as usize;
                    let low: Vec<f64> = (0..4)
                        .map(|c| {
                            get(y - 1, xx - 1, c)
                                + get(y - 1, xx + 1, c)
                                + get(y + 1, xx - 1, c)
                                + get(y + 1, xx + 1, c)
                        })
                        .collect();
                    let high: Vec<f64> = (0..4)
                        .map(|c| {
                            get(y - 1, xx - 1, c) + get(y + 1, xx + 1, c)
                                - get(y - 1, xx + 1, c)
                                - get(y + 1, xx - 1, c)
                        })
                        .collect();
                    for (half, (band, l)) in [(&low, lo), (&high, hi)].into_iter().enumerate() {
                        for o in 0..2 {
                            let row = &l.weight[o * 4..(o + 1) * 4];
                            let scale = row.iter().map(|w| w.abs()).sum::<f64>() / 4.0;
                            let dot: f64 = (0..4).map(|c| sign(band[c]) * sign(row[c])).sum();
                            out[t * 4 + half * 2 + o] =
                                scale * dot + x.at(y as usize, xx as usize, half * 2 + o);
                        }
                    }
                }
            }
            out
        };
        let rq = reference(&proj.q_low, &proj.q_high);
        let rk = reference(&proj.k_low, &proj.k_high);
        for (a, b) in q.values().iter().zip(&rq) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in k.values().iter().zip(&rk) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_ne!(q, k);
    }

    #[test]
    fn build_qk_rejects_bad_channels() {
        let x = TokenGrid::<f64>::zeros(2, 2, 4);
        let z = || layer(vec![0.0; 12], 3, 4);
        let proj = QKProjectors {
            q_low: z(),
            q_high: z(),
            k_low: z(),
            k_high: z(),
        };
        assert!(build_qk(&x, &proj).is_err());
    }

    #[test]
    fn similarity_examples() {
        let binp = BinarizerParams::activation_default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = TokenGrid::<f64>::from_fn(3, 3, 8, |_, _, _| rng.random_range(-1.0..1.0));
        let s = similarity(&q, &q, binp, binp).unwrap();
        for i in 0..9 {
            assert_eq!(s[i * 9 + i], 8.0);
        }

        let a = TokenGrid::<f64>::from_fn(1, 1, 8, |_, _, _| 1.0);
        let b = TokenGrid::<f64>::from_fn(1, 1, 8, |_, _, c| if c < 4 { 1.0 } else { -1.0 });
        assert_eq!(similarity(&a, &b, binp, binp).unwrap(), vec![0.0]);

        let k = TokenGrid::<f64>::from_fn(3, 3, 8, |_, _, _| rng.random_range(-1.0..1.0));
        let s = similarity(&q, &k, binp, binp).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let d: f64 = (0..8)
                    .map(|c| sign(q.token(i)[c]) * sign(k.token(j)[c]))
                    .sum();
                assert_eq!(s[i * 9 + j], d);
                assert!(s[i * 9 + j].abs() <= 8.0);
            }
        }
        let short = TokenGrid::<f64>::zeros(3, 3, 4);
        assert!(similarity(&q, &short, binp, binp).is_err());
    }

    #[test]
    fn attention_examples() {
        let att = BinarizerParams::attention_default();
        let (p, _) = attention_from_similarity(&[3.0f64], 1, 4, att).unwrap();
        assert_eq!(p, vec![1.0]);
        let (p, _) = attention_from_similarity(&[2.0f64; 16], 4, 4, att).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..64).map(|_| rng.random_range(-8.0..8.0)).collect();
        let (p, b) = attention_from_similarity(&s, 8, 8, att).unwrap();
        for row in p.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(b.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
