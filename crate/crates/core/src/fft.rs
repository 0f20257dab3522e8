//! 2D FFT helpers over `ndarray` buffers with a process-wide plan cache.

use std::sync::{LazyLock, Mutex};

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

static PLANNER: LazyLock<Mutex<FftPlanner<f64>>> =
    LazyLock::new(|| Mutex::new(FftPlanner::new()));

fn plan(len: usize, inverse: bool) -> std::sync::Arc<dyn Fft<f64>> {
    let mut planner = PLANNER.lock().unwrap();
    if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    }
}

/// In-place 2D DFT. Forward is unnormalized; inverse divides by W*H so that
/// `ifft2(fft2(f)) == f`.
pub fn fft2_inplace(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);

    let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("rows of a standard-layout array");
        row_fft.process_with_scratch(slice, &mut scratch);
    }

    let mut col = vec![Complex64::default(); h];
    let mut scratch = vec![Complex64::default(); col_fft.get_inplace_scratch_len()];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[[y, x]];
        }
        col_fft.process_with_scratch(&mut col, &mut scratch);
        for y in 0..h {
            data[[y, x]] = col[y];
        }
    }

    if inverse {
        let norm = 1.0 / (w as f64 * h as f64);
        data.mapv_inplace(|v| v * norm);
    }
}

pub fn fft2(data: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = data.clone();
    fft2_inplace(&mut out, false);
    out
}

pub fn ifft2(data: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = data.clone();
    fft2_inplace(&mut out, true);
    out
}

pub fn fft2_real(data: &Array2<f64>) -> Array2<Complex64> {
    let mut buf = data.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut buf, false);
    buf
}

/// Signed DFT frequency index for bin `i` of an axis of length `n`.
pub fn signed_freq(i: usize, n: usize) -> i64 {
    let i = i as i64;
    let n = n as i64;
    if i <= n / 2 {
        i
    } else {
        i - n
    }
}

/// Angular frequency (radians per pixel) of bin `i` on an axis of length `n`.
pub fn omega(i: usize, n: usize) -> f64 {
    2.0 * std::f64::consts::PI * signed_freq(i, n) as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = 1234u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let f = Array2::from_shape_fn((16, 24), |_| next());
        let spec = fft2_real(&f);
        let back = ifft2(&spec);
        for (a, b) in f.iter().zip(back.iter()) {
            assert!((a - b.re).abs() < 1e-12 && b.im.abs() < 1e-12);
        }
        let e_spatial: f64 = f.iter().map(|v| v * v).sum();
        let e_spec: f64 = spec.iter().map(|v| v.norm_sqr()).sum::<f64>() / (16.0 * 24.0);
        assert!((e_spatial - e_spec).abs() < 1e-9 * e_spatial);
    }
}
