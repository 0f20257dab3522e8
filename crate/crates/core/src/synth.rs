//! Synthetic stimuli: oriented ridges, circles, crossings, band-limited
//! noise. Used by the test suites and handy for CLI experiments.

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::cwt::Image;

/// Ridge through the image center along direction `theta`, with a
/// second-derivative-of-Gaussian cross profile whose spectrum peaks at
/// radial frequency 1/sigma.
pub fn oriented_ridge(width: usize, height: usize, theta: f64, sigma: f64) -> Image {
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    let (s, c) = theta.sin_cos();
    let data = Array2::from_shape_fn((height, width), |(y, x)| {
        // signed distance to the line through the center with direction theta
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let d = -dx * s + dy * c;
        let u = d / sigma;
        (1.0 - u * u) * (-0.5 * u * u).exp()
    });
    Image::new(data)
}

/// Narrowband ridge: a cosine carrier at radial frequency `rho_star`
/// (radians per pixel) across the ridge direction, under a wide Gaussian
/// envelope. Its spectrum concentrates near radius rho_star on the line
/// normal to `theta`.
pub fn modulated_ridge(
    width: usize,
    height: usize,
    theta: f64,
    rho_star: f64,
    envelope_sigma: f64,
) -> Image {
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    let (s, c) = theta.sin_cos();
    let data = Array2::from_shape_fn((height, width), |(y, x)| {
        let d = -(x as f64 - cx) * s + (y as f64 - cy) * c;
        (rho_star * d).cos() * (-0.5 * (d / envelope_sigma).powi(2)).exp()
    });
    Image::new(data)
}

/// Ring of radius `r` centered at (cx, cy) with a Gaussian cross profile.
pub fn circle_ring(width: usize, height: usize, cx: f64, cy: f64, r: f64, sigma: f64) -> Image {
    let data = Array2::from_shape_fn((height, width), |(y, x)| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() - r;
        (-0.5 * (d / sigma).powi(2)).exp()
    });
    Image::new(data)
}

/// Concentric rings around (cx, cy), radii start, start+spacing, ...
pub fn concentric_rings(
    width: usize,
    height: usize,
    cx: f64,
    cy: f64,
    start: f64,
    spacing: f64,
    count: usize,
    sigma: f64,
) -> Image {
    let mut img = Image::zeros(width, height);
    for i in 0..count {
        let ring = circle_ring(width, height, cx, cy, start + i as f64 * spacing, sigma);
        img.data.zip_mut_with(&ring.data, |a, &b| *a = (*a).max(b));
    }
    img
}

/// Two straight Gaussian ridges through the center, crossing at the given
/// angles (radians); additive superimposition.
pub fn crossing_lines(width: usize, height: usize, theta1: f64, theta2: f64, sigma: f64) -> Image {
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    let line = |theta: f64, x: f64, y: f64| {
        let (s, c) = theta.sin_cos();
        let d = -(x - cx) * s + (y - cy) * c;
        (-0.5 * (d / sigma).powi(2)).exp()
    };
    let data = Array2::from_shape_fn((height, width), |(y, x)| {
        line(theta1, x as f64, y as f64) + line(theta2, x as f64, y as f64)
    });
    Image::new(data)
}

/// Adds white Gaussian noise of the given standard deviation (seeded).
pub fn add_gaussian_noise(f: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = f.clone();
    out.data.mapv_inplace(|v| {
        let e: f64 = rng.sample(StandardNormal);
        v + sigma * e
    });
    out
}

/// White Gaussian image (seeded).
pub fn white_noise(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = StdRng::seed_from_u64(seed);
    Image::new(Array2::from_shape_fn((height, width), |_| {
        rng.sample::<f64, _>(StandardNormal)
    }))
}

/// Peak signal-to-noise ratio of `test` against `reference`, with the
/// reference dynamic range as the peak.
pub fn psnr(test: &Image, reference: &Image) -> f64 {
    let mse: f64 = test
        .data
        .iter()
        .zip(reference.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / test.data.len() as f64;
    let lo = reference.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reference
        .data
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let peak = (hi - lo).max(1e-300);
    10.0 * (peak * peak / mse.max(1e-300)).log10()
}
