//! Left-invariant derivatives on score layers, regularized Hessians,
//! exponential-curve fits, curvature estimation and gauge frames.
//!
//! A layer is SE(2) data at a fixed scale: real values on [y][x][k] with the
//! k-axis 2pi-periodic. Off-grid spatial samples come from periodic cubic
//! B-spline interpolation (prefiltered spectrally, so interpolation at
//! integer offsets reproduces grid values exactly).

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::fft::fft2_inplace;
use crate::wavelets::bspline;

/// One scale layer of a score (or any SE(2) field) plus the angular/spatial
/// weight beta (radians per pixel).
#[derive(Debug, Clone)]
pub struct LayerField {
    /// [y][x][k]
    pub data: Array3<f64>,
    pub beta: f64,
}

impl LayerField {
    pub fn new(data: Array3<f64>, beta: f64) -> Self {
        Self { data, beta }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: Array3::zeros(self.data.dim()),
            beta: self.beta,
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_orientations(&self) -> usize {
        self.data.dim().2
    }

    pub fn s_phi(&self) -> f64 {
        2.0 * PI / self.n_orientations() as f64
    }

    pub fn theta_k(&self, k: usize) -> f64 {
        k as f64 * self.s_phi()
    }

    fn slice_plane(&self, k: usize) -> Array2<f64> {
        let (h, w, _) = self.data.dim();
        Array2::from_shape_fn((h, w), |(y, x)| self.data[[y, x, k]])
    }

    fn set_plane(&mut self, k: usize, plane: &Array2<f64>) {
        let (h, w, _) = self.data.dim();
        for y in 0..h {
            for x in 0..w {
                self.data[[y, x, k]] = plane[[y, x]];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiDirection {
    Theta,
    Xi,
    Eta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffScheme {
    Central,
    Forward,
}

/// Gaussian regularization scales in the diffusion-scale convention
/// sigma^2 = 2 * scale; `angular` applies along theta (periodic).
#[derive(Debug, Clone, Copy)]
pub struct DerivScales {
    pub spatial: f64,
    pub angular: f64,
}

// ---------------------------------------------------------------------------
// periodic cubic B-spline interpolation
// ---------------------------------------------------------------------------

/// Cubic interpolation coefficients of one plane (periodic boundary):
/// spectral division by the transfer function of the sampled cubic kernel.
struct Spline2d {
    coeffs: Array2<f64>,
}

impl Spline2d {
    fn new(plane: &Array2<f64>) -> Self {
        let (h, w) = plane.dim();
        let mut spec = plane.mapv(|v| Complex64::new(v, 0.0));
        fft2_inplace(&mut spec, false);
        let bhat = |i: usize, n: usize| {
            (4.0 + 2.0 * (2.0 * PI * i as f64 / n as f64).cos()) / 6.0
        };
        for y in 0..h {
            let by = bhat(y, h);
            for x in 0..w {
                spec[[y, x]] /= by * bhat(x, w);
            }
        }
        fft2_inplace(&mut spec, true);
        Self {
            coeffs: spec.mapv(|z| z.re),
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let (h, w) = self.coeffs.dim();
        let fx = x.floor();
        let fy = y.floor();
        let tx = x - fx;
        let ty = y - fy;
        let mut wx = [0.0; 4];
        let mut wy = [0.0; 4];
        for m in 0..4 {
            wx[m] = bspline(3, tx - (m as f64 - 1.0));
            wy[m] = bspline(3, ty - (m as f64 - 1.0));
        }
        let ix = fx as i64;
        let iy = fy as i64;
        let mut acc = 0.0;
        for (my, &wyv) in wy.iter().enumerate() {
            if wyv == 0.0 {
                continue;
            }
            let yy = (iy + my as i64 - 1).rem_euclid(h as i64) as usize;
            let mut row = 0.0;
            for (mx, &wxv) in wx.iter().enumerate() {
                let xx = (ix + mx as i64 - 1).rem_euclid(w as i64) as usize;
                row += wxv * self.coeffs[[yy, xx]];
            }
            acc += wyv * row;
        }
        acc
    }

    /// Samples the plane shifted by a constant offset (dx, dy) at every grid
    /// point; fixed fractional offsets make this a separable 4x4 stencil.
    fn sample_shifted(&self, dx: f64, dy: f64) -> Array2<f64> {
        let (h, w) = self.coeffs.dim();
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                out[[y, x]] = self.eval(x as f64 + dx, y as f64 + dy);
            }
        }
        out
    }
}

/// Periodic cubic spline along the theta axis of a whole layer; used only
/// when the angular step is not a whole number of bins.
fn theta_spline_shift(l: &LayerField, shift_bins: f64) -> Array3<f64> {
    let (h, w, n) = l.data.dim();
    // circular deconvolution of the sampled cubic kernel along k
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let bhat: Vec<f64> = (0..n)
        .map(|j| (4.0 + 2.0 * (2.0 * PI * j as f64 / n as f64).cos()) / 6.0)
        .collect();
    let mut out = Array3::zeros((h, w, n));
    let mut line = vec![Complex64::default(); n];
    for y in 0..h {
        for x in 0..w {
            for k in 0..n {
                line[k] = Complex64::new(l.data[[y, x, k]], 0.0);
            }
            fwd.process(&mut line);
            for k in 0..n {
                line[k] /= bhat[k];
            }
            inv.process(&mut line);
            // line now holds n * coeffs; evaluate at k + shift
            let norm = 1.0 / n as f64;
            for k in 0..n {
                let pos = k as f64 + shift_bins;
                let fp = pos.floor();
                let t = pos - fp;
                let ip = fp as i64;
                let mut acc = 0.0;
                for m in 0..4 {
                    let wgt = bspline(3, t - (m as f64 - 1.0));
                    if wgt == 0.0 {
                        continue;
                    }
                    let kk = (ip + m as i64 - 1).rem_euclid(n as i64) as usize;
                    acc += wgt * line[kk].re * norm;
                }
                out[[y, x, k]] = acc;
            }
        }
    }
    out
}

fn roll_theta(l: &LayerField, shift: i64) -> Array3<f64> {
    let (h, w, n) = l.data.dim();
    let mut out = Array3::zeros((h, w, n));
    for y in 0..h {
        for x in 0..w {
            for k in 0..n {
                let ks = (k as i64 + shift).rem_euclid(n as i64) as usize;
                out[[y, x, k]] = l.data[[y, x, ks]];
            }
        }
    }
    out
}

fn theta_sample(l: &LayerField, shift_bins: f64) -> Array3<f64> {
    let rounded = shift_bins.round();
    if (shift_bins - rounded).abs() < 1e-12 {
        roll_theta(l, rounded as i64)
    } else {
        theta_spline_shift(l, shift_bins)
    }
}

/// Per-slice spatial samples of the layer shifted along the direction
/// (cos theta_k, sin theta_k) rotated by `normal` (false: xi, true: eta).
fn spatial_sample(l: &LayerField, dist: f64, normal: bool) -> Array3<f64> {
    let (h, w, n) = l.data.dim();
    let planes: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let theta = l.theta_k(k);
            let (s, c) = theta.sin_cos();
            let (dx, dy) = if normal {
                (-dist * s, dist * c)
            } else {
                (dist * c, dist * s)
            };
            Spline2d::new(&l.slice_plane(k)).sample_shifted(dx, dy)
        })
        .collect();
    let mut out = Array3::zeros((h, w, n));
    for (k, p) in planes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[[y, x, k]] = p[[y, x]];
            }
        }
    }
    out
}

/// Left-invariant finite difference along theta/xi/eta with the given scheme.
/// `h` is in pixels for the spatial directions and radians for theta.
pub fn li_derivative_scheme(
    l: &LayerField,
    dir: LiDirection,
    h: f64,
    scheme: DiffScheme,
) -> LayerField {
    assert!(h > 0.0, "finite-difference step must be positive");
    let data = match dir {
        LiDirection::Theta => {
            let bins = h / l.s_phi();
            match scheme {
                DiffScheme::Central => {
                    let plus = theta_sample(l, bins);
                    let minus = theta_sample(l, -bins);
                    let mut d = plus;
                    d.zip_mut_with(&minus, |a, &b| *a = (*a - b) / (2.0 * h));
                    d
                }
                DiffScheme::Forward => {
                    let mut d = theta_sample(l, bins);
                    d.zip_mut_with(&l.data, |a, &b| *a = (*a - b) / h);
                    d
                }
            }
        }
        LiDirection::Xi | LiDirection::Eta => {
            let normal = dir == LiDirection::Eta;
            match scheme {
                DiffScheme::Central => {
                    let plus = spatial_sample(l, h, normal);
                    let minus = spatial_sample(l, -h, normal);
                    let mut d = plus;
                    d.zip_mut_with(&minus, |a, &b| *a = (*a - b) / (2.0 * h));
                    d
                }
                DiffScheme::Forward => {
                    let mut d = spatial_sample(l, h, normal);
                    d.zip_mut_with(&l.data, |a, &b| *a = (*a - b) / h);
                    d
                }
            }
        }
    };
    LayerField {
        data,
        beta: l.beta,
    }
}

/// Central left-invariant derivative with the default step (1 pixel
/// spatially, one theta bin angularly).
pub fn li_derivative(l: &LayerField, dir: LiDirection, h: f64) -> LayerField {
    li_derivative_scheme(l, dir, h, DiffScheme::Central)
}

fn default_step(l: &LayerField, dir: LiDirection) -> f64 {
    match dir {
        LiDirection::Theta => l.s_phi(),
        _ => 1.0,
    }
}

/// Separable Gaussian smoothing: spectral in space (circular), discrete
/// wrapped kernel along theta.
pub fn gaussian_smooth(l: &LayerField, scales: DerivScales) -> LayerField {
    let (h, w, n) = l.data.dim();
    let mut out = l.clone();

    if scales.spatial > 0.0 {
        let planes: Vec<Array2<f64>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let mut spec = out.slice_plane(k).mapv(|v| Complex64::new(v, 0.0));
                fft2_inplace(&mut spec, false);
                for y in 0..h {
                    let wy = crate::fft::omega(y, h);
                    for x in 0..w {
                        let wx = crate::fft::omega(x, w);
                        spec[[y, x]] *= (-scales.spatial * (wx * wx + wy * wy)).exp();
                    }
                }
                fft2_inplace(&mut spec, true);
                spec.mapv(|z| z.re)
            })
            .collect();
        for (k, p) in planes.iter().enumerate() {
            out.set_plane(k, p);
        }
    }

    if scales.angular > 0.0 {
        let sigma = (2.0 * scales.angular).sqrt(); // radians
        let s_phi = l.s_phi();
        // wrapped Gaussian over signed bin offsets, normalized to unit mass
        let mut weights = vec![0.0; n];
        for (d, wv) in weights.iter_mut().enumerate() {
            let signed = if d <= n / 2 { d as f64 } else { d as f64 - n as f64 };
            let mut acc = 0.0;
            for wrap in -4i64..=4 {
                let ang = signed * s_phi + wrap as f64 * 2.0 * PI;
                acc += (-0.5 * (ang / sigma).powi(2)).exp();
            }
            *wv = acc;
        }
        let total: f64 = weights.iter().sum();
        for wv in &mut weights {
            *wv /= total;
        }
        let src = out.data.clone();
        for y in 0..h {
            for x in 0..w {
                for k in 0..n {
                    let mut acc = 0.0;
                    for (d, &wv) in weights.iter().enumerate() {
                        let ks = (k + d) % n;
                        acc += wv * src[[y, x, ks]];
                    }
                    out.data[[y, x, k]] = acc;
                }
            }
        }
    }

    out
}

/// Gaussian-regularized left-invariant derivative: smooth once, then apply
/// the listed directions right-to-left (so `[Theta, Xi]` means
/// d_theta(d_xi L)). Up to order 2.
pub fn gaussian_derivative(l: &LayerField, dirs: &[LiDirection], scales: DerivScales) -> LayerField {
    assert!(dirs.len() <= 2, "derivatives up to order 2");
    let mut field = gaussian_smooth(l, scales);
    for dir in dirs.iter().rev() {
        let h = default_step(&field, *dir);
        field = li_derivative(&field, *dir, h);
    }
    field
}

// ---------------------------------------------------------------------------
// Hessian, exponential-curve fit, curvature, gauge frames
// ---------------------------------------------------------------------------

const DIRS: [LiDirection; 3] = [LiDirection::Theta, LiDirection::Xi, LiDirection::Eta];

/// The nine second derivatives d2[outer][inner] = d_outer(d_inner L) at the
/// regularization scales, plus the three smoothed first derivatives.
struct SecondDerivs {
    d2: Vec<LayerField>, // index outer * 3 + inner
}

fn second_derivatives(l: &LayerField, scales: DerivScales) -> SecondDerivs {
    let smoothed = gaussian_smooth(l, scales);
    let first: Vec<LayerField> = DIRS
        .iter()
        .map(|&d| li_derivative(&smoothed, d, default_step(l, d)))
        .collect();
    let mut d2 = Vec::with_capacity(9);
    for &outer in &DIRS {
        for inner in &first {
            d2.push(li_derivative(inner, outer, default_step(l, outer)));
        }
    }
    SecondDerivs { d2 }
}

/// Per-voxel 3x3 matrices stored row-major over the basis (theta, xi, eta).
#[derive(Debug, Clone)]
pub struct Hessian3Field {
    pub h: Array3<[[f64; 3]; 3]>,
    pub beta: f64,
}

/// The beta-weighted Hessian as printed: row r holds the derivatives of
/// d_r L by (theta, xi, eta), with weights beta^2, beta, beta on the
/// theta row and 1 elsewhere. Regularization scales (rho~, rho~, rho~ beta^2).
pub fn hessian3(l: &LayerField, beta: f64, rho_tilde: f64) -> Hessian3Field {
    hessian3_with_scales(
        l,
        beta,
        DerivScales {
            spatial: rho_tilde,
            angular: rho_tilde * beta * beta,
        },
    )
}

/// Same matrix at explicitly given regularization scales.
pub fn hessian3_with_scales(l: &LayerField, beta: f64, scales: DerivScales) -> Hessian3Field {
    let sd = second_derivatives(l, scales);
    printed_hessian_from(&sd, l, beta)
}

fn printed_hessian_from(sd: &SecondDerivs, l: &LayerField, beta: f64) -> Hessian3Field {
    let (h, w, n) = l.data.dim();
    let mut out = Array3::from_elem((h, w, n), [[0.0; 3]; 3]);
    for y in 0..h {
        for x in 0..w {
            for k in 0..n {
                let mut m = [[0.0; 3]; 3];
                for row in 0..3 {
                    for col in 0..3 {
                        // printed entry (row, col): d_col ( d_row L )
                        let v = sd.d2[col * 3 + row].data[[y, x, k]];
                        let wgt = if row == 0 {
                            if col == 0 {
                                beta * beta
                            } else {
                                beta
                            }
                        } else {
                            1.0
                        };
                        m[row][col] = wgt * v;
                    }
                }
                out[[y, x, k]] = m;
            }
        }
    }
    Hessian3Field { h: out, beta }
}

/// Symmetrized second-derivative matrix in the weighted frame
/// (beta d_theta, d_xi, d_eta); this is what gauge rotations act on.
pub fn weighted_hessian(l: &LayerField, beta: f64, rho_tilde: f64) -> Array3<[[f64; 3]; 3]> {
    weighted_hessian_with_scales(
        l,
        beta,
        DerivScales {
            spatial: rho_tilde,
            angular: rho_tilde * beta * beta,
        },
    )
}

/// Both Hessian variants from one set of derivative passes; the per-step
/// gauge machinery of nonlinear diffusion calls this.
pub fn hessians_with_scales(
    l: &LayerField,
    beta: f64,
    scales: DerivScales,
) -> (Hessian3Field, Array3<[[f64; 3]; 3]>) {
    let sd = second_derivatives(l, scales);
    (
        printed_hessian_from(&sd, l, beta),
        weighted_from(&sd, l, beta),
    )
}

/// Same symmetrized matrix at explicitly given regularization scales.
pub fn weighted_hessian_with_scales(
    l: &LayerField,
    beta: f64,
    scales: DerivScales,
) -> Array3<[[f64; 3]; 3]> {
    let sd = second_derivatives(l, scales);
    weighted_from(&sd, l, beta)
}

fn weighted_from(sd: &SecondDerivs, l: &LayerField, beta: f64) -> Array3<[[f64; 3]; 3]> {
    let (h, w, n) = l.data.dim();
    let wgt = [beta, 1.0, 1.0];
    let mut out = Array3::from_elem((h, w, n), [[0.0; 3]; 3]);
    for y in 0..h {
        for x in 0..w {
            for k in 0..n {
                let mut m = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        let a = sd.d2[i * 3 + j].data[[y, x, k]];
                        let b = sd.d2[j * 3 + i].data[[y, x, k]];
                        m[i][j] = wgt[i] * wgt[j] * 0.5 * (a + b);
                    }
                }
                out[[y, x, k]] = m;
            }
        }
    }
    out
}

/// Closed-form symmetric 3x3 eigen-solve returning the eigenvector of the
/// smallest eigenvalue (trigonometric method + cross-product extraction).
pub fn sym3_min_eigvec(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return [0.0, 1.0, 0.0];
    }
    if p1 < 1e-30 * scale * scale {
        // effectively diagonal
        let mut idx = 0;
        for i in 1..3 {
            if a[i][i] < a[idx][idx] {
                idx = i;
            }
        }
        let mut v = [0.0; 3];
        v[idx] = 1.0;
        return v;
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let detb = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (detb / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let lambda_min = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();

    let mut m = *a;
    for i in 0..3 {
        m[i][i] -= lambda_min;
    }
    let cross = |u: &[f64; 3], v: &[f64; 3]| {
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    };
    let rows = [m[0], m[1], m[2]];
    let candidates = [
        cross(&rows[0], &rows[1]),
        cross(&rows[0], &rows[2]),
        cross(&rows[1], &rows[2]),
    ];
    let norm2 = |v: &[f64; 3]| v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let mut best = candidates[0];
    for c in &candidates[1..] {
        if norm2(c) > norm2(&best) {
            best = *c;
        }
    }
    if norm2(&best) > 1e-24 * scale * scale * scale * scale {
        let n = norm2(&best).sqrt();
        return [best[0] / n, best[1] / n, best[2] / n];
    }
    // repeated eigenvalue: null space is a plane orthogonal to the largest row
    let mut w = rows[0];
    for rr in &rows[1..] {
        if norm2(rr) > norm2(&w) {
            w = *rr;
        }
    }
    if norm2(&w) < 1e-24 * scale * scale {
        return [0.0, 1.0, 0.0];
    }
    // deterministic vector orthogonal to w, preferring the xi axis
    let axes = [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    for e in axes {
        let dot = e[0] * w[0] + e[1] * w[1] + e[2] * w[2];
        let mut v = [
            e[0] - dot * w[0] / norm2(&w),
            e[1] - dot * w[1] / norm2(&w),
            e[2] - dot * w[2] / norm2(&w),
        ];
        let n2 = norm2(&v);
        if n2 > 1e-12 {
            let n = n2.sqrt();
            for vv in &mut v {
                *vv /= n;
            }
            return v;
        }
    }
    [0.0, 1.0, 0.0]
}

fn sym2_min_eigvec(a: [[f64; 2]; 2]) -> [f64; 2] {
    let tr = a[0][0] + a[1][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let lambda_min = tr / 2.0 - disc;
    // (A - lambda I) v = 0
    let r0 = [a[0][0] - lambda_min, a[0][1]];
    let r1 = [a[1][0], a[1][1] - lambda_min];
    let (vx, vy) = if r0[0].abs() + r0[1].abs() >= r1[0].abs() + r1[1].abs() {
        (-r0[1], r0[0])
    } else {
        (-r1[1], r1[0])
    };
    let n = (vx * vx + vy * vy).sqrt();
    if n < 1e-150 {
        return [0.0, 1.0];
    }
    [vx / n, vy / n]
}

/// Best exponential-curve fit per voxel: the eigenvector of H^T H with the
/// smallest eigenvalue, normalized to (c1)^2 + beta^2((c2)^2 + (c3)^2) = 1,
/// with sign convention c2 >= 0 (tie: c1 >= 0). The horizontal variant
/// solves the 3x2 system (theta, xi columns) and returns c3 = 0.
#[derive(Debug, Clone)]
pub struct ExpFit {
    /// [y][x][k] -> (c1, c2, c3)
    pub c: Array3<[f64; 3]>,
    pub horizontal: bool,
    pub beta: f64,
}

pub fn best_exp_fit(hf: &Hessian3Field, horizontal: bool) -> ExpFit {
    let dim = hf.h.dim();
    let beta = hf.beta;
    let mut out = Array3::from_elem(dim, [0.0; 3]);
    for ((idx, m), slot) in hf.h.indexed_iter().zip(out.iter_mut()) {
        let _ = idx;
        let mut c = if matrix_is_zero(m) {
            [0.0, 1.0 / beta, 0.0]
        } else if horizontal {
            let mut ata = [[0.0; 2]; 2];
            for r in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        ata[i][j] += m[r][i] * m[r][j];
                    }
                }
            }
            let v = sym2_min_eigvec(ata);
            [v[0], v[1], 0.0]
        } else {
            let mut ata = [[0.0; 3]; 3];
            for r in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        ata[i][j] += m[r][i] * m[r][j];
                    }
                }
            }
            sym3_min_eigvec(&ata)
        };
        // sign convention
        if c[1] < 0.0 || (c[1] == 0.0 && c[0] < 0.0) {
            for v in &mut c {
                *v = -*v;
            }
        }
        // weighted normalization
        let norm = (c[0] * c[0] + beta * beta * (c[1] * c[1] + c[2] * c[2])).sqrt();
        if norm > 1e-150 {
            for v in &mut c {
                *v /= norm;
            }
        } else {
            c = [0.0, 1.0 / beta, 0.0];
        }
        *slot = c;
    }
    ExpFit {
        c: out,
        horizontal,
        beta,
    }
}

fn matrix_is_zero(m: &[[f64; 3]; 3]) -> bool {
    m.iter().flatten().all(|&v| v == 0.0)
}

/// Guard below which curvature denominators are treated as vanishing; the
/// voxel reports kappa = 0 and is flagged so downstream confidence is zeroed.
pub const CURVATURE_EPS: f64 = 1e-8;

/// Curvature of the fitted exponential curve's spatial projection:
/// kappa = c1 sign(c2) / sqrt(c2^2 + c3^2), or c1/c2 for horizontal fits.
pub fn curvature(fit: &ExpFit) -> (Array3<f64>, Array3<bool>) {
    let dim = fit.c.dim();
    let mut kappa = Array3::zeros(dim);
    let mut guarded = Array3::from_elem(dim, false);
    for ((k, g), c) in kappa
        .iter_mut()
        .zip(guarded.iter_mut())
        .zip(fit.c.iter())
    {
        if fit.horizontal {
            if c[1].abs() < CURVATURE_EPS {
                *g = true;
            } else {
                *k = c[0] / c[1];
            }
        } else {
            let sp2 = c[1] * c[1] + c[2] * c[2];
            if sp2 < CURVATURE_EPS * CURVATURE_EPS {
                *g = true;
            } else {
                *k = c[0] * c[1].signum() / sp2.sqrt();
            }
        }
    }
    (kappa, guarded)
}

/// Per-voxel gauge rotation data: angles and the SO(3) matrix mapping the
/// weighted frame (beta d_theta, d_xi, d_eta) onto (d_a, d_b, d_c).
#[derive(Debug, Clone)]
pub struct GaugeFrames {
    pub alpha: Array3<f64>,
    pub d_h: Array3<f64>,
    pub m: Array3<[[f64; 3]; 3]>,
}

pub fn rotation_matrix(alpha: f64, d_h: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sd, cd) = d_h.sin_cos();
    [
        [sa, -ca * cd, -ca * sd],
        [ca, cd * sa, sa * sd],
        [0.0, -sd, cd],
    ]
}

/// Extracts (alpha, d_H) from the spherical parametrization of the fitted
/// tangent: with the weighted normalization, the unit tangent in the frame
/// (beta d_theta, d_xi, d_eta) is (sin alpha, cos alpha cos d_H,
/// cos alpha sin d_H). A straight spatial fit has alpha = 0;
/// `enforce_horizontality` overrides d_H = 0.
pub fn gauge_frame(fit: &ExpFit, enforce_horizontality: bool) -> GaugeFrames {
    let dim = fit.c.dim();
    let beta = fit.beta;
    let mut alpha = Array3::zeros(dim);
    let mut d_h = Array3::zeros(dim);
    let mut m = Array3::from_elem(dim, [[0.0; 3]; 3]);
    for ((a, dh), (mm, c)) in alpha
        .iter_mut()
        .zip(d_h.iter_mut())
        .zip(m.iter_mut().zip(fit.c.iter()))
    {
        let mut c = *c;
        let r = (c[1] * c[1] + c[2] * c[2]).sqrt();
        if c[1] < 0.0 || (r < 1e-300 && c[0] < 0.0) {
            for v in &mut c {
                *v = -*v;
            }
        }
        let mut dh_v = if r > 0.0 { c[2].atan2(c[1]) } else { 0.0 };
        // unit tangent components (c1, beta r); alpha in (-pi/2, pi/2]
        let al_v = c[0].atan2(beta * r);
        if enforce_horizontality {
            dh_v = 0.0;
        }
        *a = al_v;
        *dh = dh_v;
        *mm = rotation_matrix(al_v, dh_v);
    }
    GaugeFrames { alpha, d_h, m }
}

/// Unit tangent in the weighted frame encoded by the gauge angles.
pub fn tangent_from_angles(alpha: f64, d_h: f64) -> [f64; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sd, cd) = d_h.sin_cos();
    [sa, ca * cd, ca * sd]
}

/// Orientation confidence s = (d_a^2 + d_b^2) L with gauge-rotated Gaussian
/// second derivatives at scales (rho_tilde, rho_tilde, rho_tilde beta^2).
pub fn orientation_confidence(
    l: &LayerField,
    frames: &GaugeFrames,
    beta: f64,
    rho_tilde: f64,
) -> Array3<f64> {
    let hw = weighted_hessian(l, beta, rho_tilde);
    let dim = hw.dim();
    let mut out = Array3::zeros(dim);
    for ((o, h), m) in out.iter_mut().zip(hw.iter()).zip(frames.m.iter()) {
        *o = rotate_diag(h, m, 0) + rotate_diag(h, m, 1);
    }
    out
}

/// (M H M^T)[i][i] for a single row of the rotation.
pub(crate) fn rotate_diag(h: &[[f64; 3]; 3], m: &[[f64; 3]; 3], row: usize) -> f64 {
    let r = m[row];
    let mut acc = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            acc += r[i] * h[i][j] * r[j];
        }
    }
    acc
}

/// Per-voxel local frame summary steering nonlinear diffusion.
#[derive(Debug, Clone)]
pub struct GaugeField {
    pub alpha: Array3<f64>,
    pub d_h: Array3<f64>,
    pub kappa: Array3<f64>,
    pub confidence: Array3<f64>,
}

/// Runs the full gauge machinery on a layer (typically a score magnitude):
/// Hessian, exponential-curve fit, curvature, frames and confidence, with
/// one shared set of derivative passes.
pub fn compute_gauge(
    l: &LayerField,
    rho_tilde: f64,
    horizontal_fit: bool,
    enforce_horizontality: bool,
) -> (GaugeField, GaugeFrames) {
    let scales = DerivScales {
        spatial: rho_tilde,
        angular: rho_tilde * l.beta * l.beta,
    };
    let (hf, hw) = hessians_with_scales(l, l.beta, scales);
    let fit = best_exp_fit(&hf, horizontal_fit);
    let (kappa, guarded) = curvature(&fit);
    let frames = gauge_frame(&fit, enforce_horizontality);
    let mut confidence = Array3::zeros(l.data.dim());
    for ((c, h), m) in confidence.iter_mut().zip(hw.iter()).zip(frames.m.iter()) {
        *c = rotate_diag(h, m, 0) + rotate_diag(h, m, 1);
    }
    for (c, &g) in confidence.iter_mut().zip(guarded.iter()) {
        if g {
            *c = 0.0;
        }
    }
    (
        GaugeField {
            alpha: frames.alpha.clone(),
            d_h: frames.d_h.clone(),
            kappa,
            confidence,
        },
        frames,
    )
}
