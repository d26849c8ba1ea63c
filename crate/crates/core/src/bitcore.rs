//! Bit-packed ±1 matrices and XNOR/popcount linear algebra.
//!
//! Encoding is fixed library-wide: bit `1` is `+1`, bit `0` is `-1`, bits are
//! stored LSB-first inside 64-bit words, and every padding bit past the
//! logical column count is `0`. Two zero padding bits XNOR to `1`, so the raw
//! agreement count over whole words overshoots by exactly
//! `64 * words - n`; the kernels subtract that constant instead of masking
//! the tail word.

use std::thread;

use crate::{Error, Real, Result};

pub const WORD_BITS: usize = 64;

/// Number of words needed for `cols` bits.
#[inline]
pub fn words_for(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

/// Row-major ±1 matrix packed one bit per element.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PackedBitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl PackedBitMatrix {
    /// Packs a row-major matrix whose elements must be exactly `+1` or `-1`.
    pub fn pack<T: Real>(signs: &[T], rows: usize, cols: usize) -> Result<Self> {
        if signs.len() != rows * cols {
            return Err(Error::Length {
                expected: rows * cols,
                got: signs.len(),
            });
        }
        if let Some((index, &value)) = signs
            .iter()
            .enumerate()
            .find(|(_, &v)| v != T::one() && v != -T::one())
        {
            return Err(Error::NotSign {
                index,
                value: value.as_f64(),
            });
        }
        Ok(Self::from_fn(rows, cols, |r, c| {
            signs[r * cols + c] > T::zero()
        }))
    }

    /// Packs `sign(x)` with `sign(0) = +1`; any real input is accepted.
    pub fn pack_signs_of<T: Real>(values: &[T], rows: usize, cols: usize) -> Self {
        assert_eq!(values.len(), rows * cols, "pack_signs_of: bad length");
        Self::from_fn(rows, cols, |r, c| values[r * cols + c] >= T::zero())
    }

    /// Builds a matrix from a predicate returning `true` for `+1`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut positive: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let words_per_row = words_for(cols);
        let mut data = vec![0u64; rows * words_per_row];
        for r in 0..rows {
            let row = &mut data[r * words_per_row..(r + 1) * words_per_row];
            for c in 0..cols {
                if positive(r, c) {
                    row[c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
                }
            }
        }
        Self {
            rows,
            cols,
            words_per_row,
            data,
        }
    }

    pub fn unpack<T: Real>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(if self.get(r, c) { T::one() } else { -T::one() });
            }
        }
        out
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        let w = self.data[r * self.words_per_row + c / WORD_BITS];
        (w >> (c % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.data
    }

    /// True when every bit past `cols` in every row is zero.
    pub fn padding_is_clear(&self) -> bool {
        let tail = self.cols % WORD_BITS;
        if tail == 0 {
            return true;
        }
        let mask = !0u64 << tail;
        (0..self.rows).all(|r| self.row(r)[self.words_per_row - 1] & mask == 0)
    }
}

/// Per-output-channel non-negative rescaling factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScale<T> {
    values: Vec<T>,
}

impl<T: Real> ChannelScale<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::Shape(format!(
                "channel scale must be non-negative, found {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn ones(n: usize) -> Self {
        Self {
            values: vec![T::one(); n],
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[inline]
fn dot_words(a: &[u64], b: &[u64], n: usize) -> i32 {
    let mut agree: u32 = 0;
    for (&x, &y) in a.iter().zip(b) {
        agree += (!(x ^ y)).count_ones();
    }
    let padding = (a.len() * WORD_BITS - n) as u32;
    2 * (agree - padding) as i32 - n as i32
}

/// Integer dot product of two packed ±1 rows of logical length `n`,
/// computed as `2i - n` with `i` the number of agreeing positions.
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n: usize) -> Result<i32> {
    let words = words_for(n);
    if a.len() != words {
        return Err(Error::Length {
            expected: words,
            got: a.len(),
        });
    }
    if b.len() != words {
        return Err(Error::Length {
            expected: words,
            got: b.len(),
        });
    }
    Ok(dot_words(a, b, n))
}

/// Worker count from `DIDB_THREADS`, falling back to the host parallelism.
pub fn thread_limit() -> usize {
    std::env::var("DIDB_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

fn check_inner(a: &PackedBitMatrix, w: &PackedBitMatrix) -> Result<()> {
    if a.cols != w.cols {
        return Err(Error::Shape(format!(
            "inner dimensions differ: {}x{} vs {}x{}",
            a.rows, a.cols, w.rows, w.cols
        )));
    }
    Ok(())
}

fn int_rows(a: &PackedBitMatrix, w: &PackedBitMatrix, row0: usize, out: &mut [i32]) {
    let p = w.rows;
    let n = a.cols;
    for (local, orow) in out.chunks_mut(p).enumerate() {
        let arow = a.row(row0 + local);
        for (k, o) in orow.iter_mut().enumerate() {
            *o = dot_words(arow, w.row(k), n);
        }
    }
}

/// Unscaled integer core `Â · Ŵᵀ` (m×p) with `threads` row-parallel workers.
pub fn binary_matmul_int_threads(
    a: &PackedBitMatrix,
    w: &PackedBitMatrix,
    threads: usize,
) -> Result<Vec<i32>> {
    check_inner(a, w)?;
    let (m, p) = (a.rows, w.rows);
    let mut out = vec![0i32; m * p];
    if p == 0 || m == 0 {
        return Ok(out);
    }
    // Row blocks are disjoint, so the result does not depend on the split.
    let work = m * p * a.words_per_row;
    let threads = if work < (1 << 16) {
        1
    } else {
        threads.clamp(1, m)
    };
    if threads == 1 {
        int_rows(a, w, 0, &mut out);
    } else {
        let rows_per = m.div_ceil(threads);
        thread::scope(|s| {
            for (t, chunk) in out.chunks_mut(rows_per * p).enumerate() {
                s.spawn(move || int_rows(a, w, t * rows_per, chunk));
            }
        });
    }
    Ok(out)
}

pub fn binary_matmul_int(a: &PackedBitMatrix, w: &PackedBitMatrix) -> Result<Vec<i32>> {
    binary_matmul_int_threads(a, w, thread_limit())
}

/// `out[i][k] = scale[k] · (Â_i · Ŵ_k)`, row-major m×p.
pub fn binary_matmul<T: Real>(
    a: &PackedBitMatrix,
    w: &PackedBitMatrix,
    scale: &ChannelScale<T>,
) -> Result<Vec<T>> {
    if scale.len() != w.rows {
        return Err(Error::Length {
            expected: w.rows,
            got: scale.len(),
        });
    }
    let core = binary_matmul_int(a, w)?;
    let p = w.rows;
    Ok(core
        .iter()
        .enumerate()
        .map(|(idx, &v)| scale.values[idx % p] * T::lit(v as f64))
        .collect())
}
