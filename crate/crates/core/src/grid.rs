//! Token grids and 3×3 stencils over them.

use crate::{Error, Real, Result};

/// Offsets `(dy, dx)` of a 3×3 stencil tap, row-major from the top-left.
pub const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Tokens arranged as an `height × width` image with `channels` features,
/// stored token-major: `values[(y * width + x) * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values do not fill a {height}x{width} grid with {channels} channels",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![T::zero(); height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// One channel of one token.
    pub fn token(&self, t: usize) -> &[T] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Depthwise 3×3 stencil with zero padding applied to `batch` grids of
/// `height × width` tokens and `channels` features each, token-major.
/// `out[y, x] += Σ_t kernel[t] · input[y + dy_t, x + dx_t]`.
pub fn stencil3x3<T: Real>(
    input: &[T],
    out: &mut [T],
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    kernel: &[T; 9],
) {
    let plane = height * width * channels;
    debug_assert_eq!(input.len(), batch * plane);
    debug_assert_eq!(out.len(), batch * plane);
    for b in 0..batch {
        let src = &input[b * plane..(b + 1) * plane];
        let dst = &mut out[b * plane..(b + 1) * plane];
        for y in 0..height {
            for x in 0..width {
                let o = (y * width + x) * channels;
                for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                    let w = kernel[t];
                    if w == T::zero() {
                        continue;
                    }
                    let (sy, sx) = (y as isize + dy, x as isize + dx);
                    if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                        continue;
                    }
                    let s = (sy as usize * width + sx as usize) * channels;
                    for c in 0..channels {
                        dst[o + c] += w * src[s + c];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`stencil3x3`]: scatters `grad_out` back onto the input grid.
pub fn stencil3x3_adjoint<T: Real>(
    grad_out: &[T],
    grad_in: &mut [T],
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    kernel: &[T; 9],
) {
    let mirrored: [T; 9] = std::array::from_fn(|t| kernel[8 - t]);
    stencil3x3(grad_out, grad_in, batch, height, width, channels, &mirrored);
}

/// Gradient of a stencil's kernel: `g[t] = Σ grad_out[y, x] · input[y + dy_t, x + dx_t]`.
pub fn stencil3x3_kernel_grad<T: Real>(
    input: &[T],
    grad_out: &[T],
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> [T; 9] {
    let plane = height * width * channels;
    let mut g = [T::zero(); 9];
    for b in 0..batch {
        let src = &input[b * plane..(b + 1) * plane];
        let go = &grad_out[b * plane..(b + 1) * plane];
        for y in 0..height {
            for x in 0..width {
                let o = (y * width + x) * channels;
                for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                    let (sy, sx) = (y as isize + dy, x as isize + dx);
                    if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                        continue;
                    }
                    let s = (sy as usize * width + sx as usize) * channels;
                    for c in 0..channels {
                        g[t] += go[o + c] * src[s + c];
                    }
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adjoint_identity() {
        // <K x, y> == <x, K* y> for an arbitrary kernel
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, h, w, c) = (2, 3, 5, 2);
        let n = b * h * w * c;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let mut kx = vec![0.0; n];
        stencil3x3(&x, &mut kx, b, h, w, c, &k);
        let mut kty = vec![0.0; n];
        stencil3x3_adjoint(&y, &mut kty, b, h, w, c, &k);
        let lhs: f64 = kx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&kty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        // kernel gradient of <K x, y> is the correlation of y with x
        let g = stencil3x3_kernel_grad(&x, &y, b, h, w, c);
        for t in 0..9 {
            let mut e = [0.0; 9];
            e[t] = 1.0;
            let mut ex = vec![0.0; n];
            stencil3x3(&x, &mut ex, b, h, w, c, &e);
            let d: f64 = ex.iter().zip(&y).map(|(a, b)| a * b).sum();
            assert!((d - g[t]).abs() < 1e-12);
        }
    }
}
