//! PReLU, RPReLU and RPReLU with a per-token shift.
//!
//! Inputs are token-major `[rows, C]` where `rows` is a multiple of the token
//! count `N`; the token of row `r` is `r % N`. Channel `i`, token `j` is the
//! element `X[i, j]` of the channel-by-token view.
//!
//! ```text
//! F[i, j] = (X − m_i) + n_i + t_j        X ≥ m_i
//!         = k_i (X − m_i) + n_i + t_j    X < m_i
//! ```

use crate::{Error, Real, Result};

/// Per-channel `m, n, k` and per-token `t`; `N + 3C` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IRPReLUParams<T> {
    pub m: Vec<T>,
    pub n: Vec<T>,
    pub k: Vec<T>,
    pub t: Vec<T>,
}

impl<T: Real> IRPReLUParams<T> {
    /// `m = n = t = 0`, `k = 0.25`.
    pub fn init(channels: usize, tokens: usize) -> Self {
        Self {
            m: vec![T::zero(); channels],
            n: vec![T::zero(); channels],
            k: vec![T::lit(0.25); channels],
            t: vec![T::zero(); tokens],
        }
    }

    pub fn channels(&self) -> usize {
        self.m.len()
    }

    pub fn tokens(&self) -> usize {
        self.t.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.m.len() + self.n.len() + self.k.len() + self.t.len()
    }

    fn check(&self, x_len: usize) -> Result<()> {
        let c = self.m.len();
        if self.n.len() != c || self.k.len() != c {
            return Err(Error::Shape("m, n and k must share a channel count".into()));
        }
        if c == 0 || self.t.is_empty() || !x_len.is_multiple_of(c * self.t.len()) {
            return Err(Error::Shape(format!(
                "{x_len} values do not tile {} tokens × {c} channels",
                self.t.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IRPReLUGrads<T> {
    pub x: Vec<T>,
    pub m: Vec<T>,
    pub n: Vec<T>,
    pub k: Vec<T>,
    pub t: Vec<T>,
}

#[inline]
fn branch<T: Real>(x: T, m: T, n: T, k: T, t: T) -> T {
    let d = x - m;
    if x >= m {
        d + n + t
    } else {
        k * d + n + t
    }
}

/// Shared kernel; `t = None` gives RPReLU.
pub(crate) fn forward_kernel<T: Real>(
    x: &[T],
    m: &[T],
    n: &[T],
    k: &[T],
    t: Option<&[T]>,
    tokens: usize,
) -> Vec<T> {
    let c = m.len();
    x.chunks(c)
        .enumerate()
        .flat_map(|(r, row)| {
            let tj = t.map_or(T::zero(), |t| t[r % tokens]);
            row.iter()
                .enumerate()
                .map(move |(i, &v)| branch(v, m[i], n[i], k[i], tj))
        })
        .collect()
}

pub(crate) fn backward_kernel<T: Real>(
    grad_out: &[T],
    x: &[T],
    m: &[T],
    k: &[T],
    tokens: usize,
) -> IRPReLUGrads<T> {
    let c = m.len();
    let mut g = IRPReLUGrads {
        x: vec![T::zero(); x.len()],
        m: vec![T::zero(); c],
        n: vec![T::zero(); c],
        k: vec![T::zero(); c],
        t: vec![T::zero(); tokens],
    };
    for (r, (grow, xrow)) in grad_out.chunks(c).zip(x.chunks(c)).enumerate() {
        let j = r % tokens;
        for i in 0..c {
            let go = grow[i];
            let xv = xrow[i];
            let slope = if xv >= m[i] { T::one() } else { k[i] };
            g.x[r * c + i] = go * slope;
            g.m[i] -= go * slope;
            g.n[i] += go;
            g.t[j] += go;
            if xv < m[i] {
                g.k[i] += go * (xv - m[i]);
            }
        }
    }
    g
}

pub fn irprelu_forward<T: Real>(x: &[T], p: &IRPReLUParams<T>) -> Result<Vec<T>> {
    p.check(x.len())?;
    Ok(forward_kernel(x, &p.m, &p.n, &p.k, Some(&p.t), p.t.len()))
}

pub fn irprelu_backward<T: Real>(
    grad_out: &[T],
    x: &[T],
    p: &IRPReLUParams<T>,
) -> Result<IRPReLUGrads<T>> {
    p.check(x.len())?;
    if grad_out.len() != x.len() {
        return Err(Error::Length {
            expected: x.len(),
            got: grad_out.len(),
        });
    }
    Ok(backward_kernel(grad_out, x, &p.m, &p.k, p.t.len()))
}

/// RPReLU: per-channel shifts only.
pub fn rprelu_forward<T: Real>(x: &[T], m: &[T], n: &[T], k: &[T]) -> Result<Vec<T>> {
    let c = m.len();
    if c == 0 || n.len() != c || k.len() != c || !x.len().is_multiple_of(c) {
        return Err(Error::Shape(
            "rprelu parameter shapes do not match input".into(),
        ));
    }
    Ok(forward_kernel(x, m, n, k, None, 1))
}

/// PReLU: `x` for `x ≥ 0`, `k_i x` otherwise.
pub fn prelu_forward<T: Real>(x: &[T], k: &[T]) -> Result<Vec<T>> {
    let zeros = vec![T::zero(); k.len()];
    rprelu_forward(x, &zeros, &zeros, k)
}

/// Population mean and variance of a set of values.
pub fn mean_variance<T: Real>(values: &[T]) -> (T, T) {
    let n = T::lit(values.len() as f64);
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var)
}

/// Mean over channels for every token of a single `[N, C]` sample.
pub fn token_means<T: Real>(x: &[T], channels: usize) -> Vec<T> {
    let c = T::lit(channels as f64);
    x.chunks(channels)
        .map(|row| row.iter().copied().sum::<T>() / c)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(m: f64, n: f64, k: f64, t: f64, c: usize, tokens: usize) -> IRPReLUParams<f64> {
        IRPReLUParams {
            m: vec![m; c],
            n: vec![n; c],
            k: vec![k; c],
            t: vec![t; tokens],
        }
    }

    #[test]
    fn forward_examples() {
        let p = params(0.0, 0.0, 0.25, 0.0, 1, 2);
        assert_eq!(irprelu_forward(&[2.0, -2.0], &p).unwrap(), vec![2.0, -0.5]);

        let p = params(0.0, 0.0, 1.0, 0.3, 2, 3);
        let x = [1.0, -2.0, 0.5, 4.0, -1.0, 0.0];
        let y = irprelu_forward(&x, &p).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert_eq!(*a, b + 0.3);
        }

        let p = params(1.0, 0.0, 0.0, 0.0, 1, 1);
        assert_eq!(irprelu_forward(&[0.5], &p).unwrap(), vec![0.0]);
    }

    #[test]
    fn tie_takes_positive_branch() {
        let p = params(0.5, 0.1, 0.25, 0.0, 1, 1);
        assert_eq!(irprelu_forward(&[0.5], &p).unwrap(), vec![0.1]);
        let g = irprelu_backward(&[1.0], &[0.5], &p).unwrap();
        assert_eq!(g.x, vec![1.0]);
        assert_eq!(g.k, vec![0.0]);
    }

    #[test]
    fn shape_errors() {
        let p = params(0.0, 0.0, 0.25, 0.0, 3, 2);
        assert!(irprelu_forward(&[0.0; 5], &p).is_err());
        assert!(irprelu_backward(&[0.0; 5], &[0.0; 6], &p).is_err());
        assert!(rprelu_forward(&[0.0; 5], &[0.0; 2], &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn backward_sums() {
        // 3 channels × 4 tokens, all on the positive branch
        let p = params(-10.0, 0.0, 0.25, 0.0, 3, 4);
        let x: Vec<f64> = (0..12).map(|v| v as f64 * 0.1).collect();
        let g = irprelu_backward(&[1.0; 12], &x, &p).unwrap();
        assert_eq!(g.t, vec![3.0; 4]);
        assert_eq!(g.n, vec![4.0; 3]);
        assert_eq!(g.m, vec![-4.0; 3]);
        assert_eq!(g.k, vec![0.0; 3]);

        let p = params(10.0, 0.0, 0.0, 0.0, 3, 4);
        let g = irprelu_backward(&[1.0; 12], &x, &p).unwrap();
        assert!(g.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reductions() {
        let x: Vec<f64> = (0..12).map(|v| (v as f64 - 5.5) * 0.3).collect();
        let m = vec![0.1, -0.2, 0.3];
        let n = vec![0.5, 0.0, -0.5];
        let k = vec![0.25, 0.5, 0.1];
        let p = IRPReLUParams {
            m: m.clone(),
            n: n.clone(),
            k: k.clone(),
            t: vec![0.0; 4],
        };
        assert_eq!(
            irprelu_forward(&x, &p).unwrap(),
            rprelu_forward(&x, &m, &n, &k).unwrap()
        );
        let zeros = vec![0.0; 3];
        assert_eq!(
            prelu_forward(&x, &k).unwrap(),
            rprelu_forward(&x, &zeros, &zeros, &k).unwrap()
        );
        // direct evaluation of the RPReLU formula
        let r = rprelu_forward(&x, &m, &n, &k).unwrap();
        for (idx, &v) in x.iter().enumerate() {
            let i = idx % 3;
            let want = if v >= m[i] {
                v - m[i] + n[i]
            } else {
                k[i] * (v - m[i]) + n[i]
            };
            assert_eq!(r[idx], want);
        }
    }
}
