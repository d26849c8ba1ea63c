//! Differential binary attention.
//!
//! A value update `v_i ← Σ_j w_j v_j` over a row `w` summing to one can be
//! rewritten as `v_i + Σ_{j≠i} w_j (v_j − v_i)`. Once `w` is binarized to
//! the index set `Υ` (containing `i`), the differential form reduces to
//! `(1 − k) v_i + Σ_{j∈Υ} v_j` with `k = |Υ|`. The layer used by the model
//! keeps `v_i` on a learnable full-precision shortcut `β`, aggregates the
//! binarized values over `Υ` with scale `α`, and subtracts a frozen 3×3
//! all-ones neighbourhood sum of binarized values with scale `γ`.

use crate::binarize::{rsign, BinarizerParams};
use crate::grid::stencil3x3;
pub use crate::grid::TokenGrid;
use crate::{Error, Real, Result};

/// The frozen 3×3 neighbourhood kernel `Ψ`.
pub const NEIGHBORHOOD_KERNEL: [f64; 9] = [1.0; 9];

/// Tolerance on `Σ w = 1` accepted by the differential update.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Per-layer scalars of the differential attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DibaParams<T> {
    /// Scale of the binary attention path.
    pub alpha: T,
    /// Full-precision shortcut scale.
    pub beta: T,
    /// Scale of the negative neighbourhood path.
    pub gamma: T,
}

impl<T: Real> Default for DibaParams<T> {
    fn default() -> Self {
        Self {
            alpha: T::one(),
            beta: T::lit(10.0),
            gamma: T::one(),
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Length { expected, got });
    }
    Ok(())
}

/// Full-precision reference `w · v`.
pub fn attn_update_direct<T: Real>(w: &[T], v: &[T]) -> Result<T> {
    check_len(w.len(), v.len())?;
    Ok(w.iter().zip(v).map(|(&a, &b)| a * b).sum())
}

/// `v_i + Σ_{j≠i} w_j (v_j − v_i)`; requires `Σ w = 1`.
pub fn attn_update_differential<T: Real>(w: &[T], v: &[T], i: usize) -> Result<T> {
    check_len(w.len(), v.len())?;
    if i >= v.len() {
        return Err(Error::Length {
            expected: v.len(),
            got: i,
        });
    }
    let total: T = w.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(ROW_SUM_TOL) {
        return Err(Error::RowSum(total.as_f64()));
    }
    let vi = v[i];
    let delta: T = w
        .iter()
        .zip(v)
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, (&wj, &vj))| wj * (vj - vi))
        .sum();
    Ok(vi + delta)
}

fn check_indices(selected: &[usize], n: usize) -> Result<()> {
    if let Some(&j) = selected.iter().find(|&&j| j >= n) {
        return Err(Error::Length {
            expected: n,
            got: j,
        });
    }
    Ok(())
}

/// What plain binarization computes: `v_i + Σ_{j∈Υ, j≠i} v_j`.
pub fn binarized_update_plain<T: Real>(selected: &[usize], v: &[T], i: usize) -> Result<T> {
    check_indices(selected, v.len())?;
    check_indices(&[i], v.len())?;
    let others: T = selected.iter().filter(|&&j| j != i).map(|&j| v[j]).sum();
    Ok(v[i] + others)
}

/// `(1 − k) v_i + Σ_{j∈Υ} v_j`; `i` must belong to `Υ`.
pub fn binarized_update_differential<T: Real>(selected: &[usize], v: &[T], i: usize) -> Result<T> {
    check_indices(selected, v.len())?;
    if !selected.contains(&i) {
        return Err(Error::MissingDiagonal(i));
    }
    let k = T::lit(selected.len() as f64);
    let total: T = selected.iter().map(|&j| v[j]).sum();
    Ok((T::one() - k) * v[i] + total)
}

/// The same quantity written as `v_i + Σ_{j∈Υ} (v_j − v_i)`.
pub fn binarized_update_differential_expanded<T: Real>(
    selected: &[usize],
    v: &[T],
    i: usize,
) -> Result<T> {
    check_indices(selected, v.len())?;
    if !selected.contains(&i) {
        return Err(Error::MissingDiagonal(i));
    }
    let vi = v[i];
    Ok(vi + selected.iter().map(|&j| v[j] - vi).sum::<T>())
}

/// Per-channel 3×3 all-ones sum over a grid of binarized values, zero padded.
pub fn neighborhood_sum<T: Real>(vb: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    if let Some((index, &value)) = vb
        .values()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != T::one() && v != -T::one())
    {
        return Err(Error::NotSign {
            index,
            value: value.as_f64(),
        });
    }
    let kernel: [T; 9] = NEIGHBORHOOD_KERNEL.map(T::lit);
    let mut out = vec![T::zero(); vb.values().len()];
    stencil3x3(
        vb.values(),
        &mut out,
        1,
        vb.height(),
        vb.width(),
        vb.channels(),
        &kernel,
    );
    TokenGrid::new(vb.height(), vb.width(), vb.channels(), out)
}

/// `β V + α (Â/a) ⊗ B(V) − γ Ψ(B(V))` for a single head.
///
/// `a_bin` is the `n × n` attention produced by the attention binarizer with
/// parameters `att`; `value_bin` binarizes `V` for the binary paths.
pub fn diba_forward<T: Real>(
    v: &TokenGrid<T>,
    a_bin: &[T],
    att: BinarizerParams<T>,
    value_bin: BinarizerParams<T>,
    params: DibaParams<T>,
) -> Result<TokenGrid<T>> {
    let n = v.tokens();
    let c = v.channels();
    check_len(n * n, a_bin.len())?;
    let vb_values: Vec<T> = v.values().iter().map(|&x| rsign(x, value_bin)).collect();
    let vb = TokenGrid::new(v.height(), v.width(), c, vb_values)?;
    let neigh = neighborhood_sum(&vb)?;
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        for ch in 0..c {
            let mut agg = T::zero();
            for j in 0..n {
                agg += (a_bin[i * n + j] / att.a) * vb.token(j)[ch];
            }
            out.push(
                params.beta * v.token(i)[ch] + params.alpha * agg
                    - params.gamma * neigh.token(i)[ch],
            );
        }
    }
    TokenGrid::new(v.height(), v.width(), c, out)
}

/// `β₀ = 10 − k̄`, with `k̄` the mean count of ones per binarized row.
///
/// Rows are given as `{0, a}` values; anything non-zero counts as selected.
pub fn init_beta<T: Real>(rows: &[Vec<T>]) -> Result<T> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: usize = rows
        .iter()
        .map(|r| r.iter().filter(|&&x| x != T::zero()).count())
        .sum();
    let mean = total as f64 / rows.len() as f64;
    Ok(T::lit(10.0 - mean))
}
