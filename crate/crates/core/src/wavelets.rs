//! B-spline cake wavelets in the log-polar Fourier domain.
//!
//! A bank is the family hat_psi[k][l](w) = sqrt(N M A(phi - theta_k) B(a_l rho)),
//! optionally localized by a spatial Gaussian window. The sqrt(N M) factor is
//! the single normalization site of the transform: it makes the discrete
//! admissibility field m_psi_d = (1/NM) sum |hat_psi|^2 equal 1 on the
//! interior annulus for the unwindowed bank, which is what the Plancherel and
//! round-trip tests pin down.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{fnv1a, Reader, Writer};
use crate::fft::{fft2_inplace, omega};
use crate::{Error, Result};

/// Centered cardinal B-spline B^k: B^0 is the indicator of [-1/2, 1/2) and
/// B^k = B^{k-1} * B^0. Support [-(k+1)/2, (k+1)/2], partition of unity over
/// integer shifts.
pub fn bspline(k: u32, x: f64) -> f64 {
    let half = (k as f64 + 1.0) / 2.0;
    if k == 0 {
        return if (-0.5..0.5).contains(&x) { 1.0 } else { 0.0 };
    }
    if x <= -half || x >= half {
        return 0.0;
    }
    // truncated-power form (1/k!) sum_j (-1)^j C(k+1,j) (x + (k+1)/2 - j)_+^k
    let mut sum = 0.0;
    let mut binom = 1.0;
    let mut sign = 1.0;
    for j in 0..=(k + 1) {
        let t = x + half - j as f64;
        if t > 0.0 {
            sum += sign * binom * t.powi(k as i32);
        }
        binom = binom * (k + 1 - j) as f64 / (j + 1) as f64;
        sign = -sign;
    }
    let mut fact = 1.0;
    for i in 2..=k {
        fact *= i as f64;
    }
    (sum / fact).max(0.0)
}

/// Checked variant for order values coming from user input.
pub fn try_bspline(k: i64, x: f64) -> Result<f64> {
    if k < 0 {
        return Err(Error::InvalidArgument(format!(
            "B-spline order must be nonnegative, got {k}"
        )));
    }
    Ok(bspline(k as u32, x))
}

/// Bank design parameters. `sigma_s = f64::INFINITY` means no spatial window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankParams {
    pub n_orientations: usize,
    pub n_scales: usize,
    pub spline_order: u32,
    pub a_minus: f64,
    pub a_plus: f64,
    pub rho_minus: f64,
    pub rho_plus: f64,
    pub sigma_s: f64,
    pub width: usize,
    pub height: usize,
}

impl BankParams {
    /// Derives the scale bounds from the annulus so that every dilated copy's
    /// spectral support stays inside [rho_minus, rho_plus]. This forces the
    /// log-radial spacing (ln rho+ - ln rho-)/(M + k); the scale lattice then
    /// satisfies s_rho = (ln a+ - ln a-)/M by construction.
    pub fn from_annulus(
        n_orientations: usize,
        n_scales: usize,
        spline_order: u32,
        rho_minus: f64,
        rho_plus: f64,
        sigma_s: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(rho_minus > 0.0 && rho_minus < rho_plus) {
            return Err(Error::Config(format!(
                "need 0 < rho_minus < rho_plus, got [{rho_minus}, {rho_plus}]"
            )));
        }
        let s_rho = (rho_plus / rho_minus).ln() / (n_scales as f64 + spline_order as f64);
        let tau_minus = -rho_plus.ln() + 0.5 * (spline_order as f64 + 1.0) * s_rho;
        let p = Self {
            n_orientations,
            n_scales,
            spline_order,
            a_minus: tau_minus.exp(),
            a_plus: (tau_minus + n_scales as f64 * s_rho).exp(),
            rho_minus,
            rho_plus,
            sigma_s,
            width,
            height,
        };
        p.validate()?;
        Ok(p)
    }

    /// Paper-regime bank (N = 20, M = 4, k = 3) on the given grid, with
    /// rho- = 2 cycles per image width, rho+ = 0.8 Nyquist, and the default
    /// spatial window (see `default_sigma_s`).
    pub fn default_for_grid(width: usize, height: usize) -> Result<Self> {
        let rho_minus = 2.0 * 2.0 * PI / width as f64;
        let rho_plus = 0.8 * PI;
        Self::from_annulus(
            20,
            4,
            3,
            rho_minus,
            rho_plus,
            Self::default_sigma_s(width, height),
            width,
            height,
        )
    }

    /// Window std chosen so the practical bank keeps m_psi_d within a few
    /// percent of 1 on the interior annulus of desk-scale grids while the
    /// per-filter annulus leakage stays under 1%.
    pub fn default_sigma_s(width: usize, height: usize) -> f64 {
        width.min(height) as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "degenerate grid {}x{}",
                self.width, self.height
            )));
        }
        if self.n_orientations < 4 {
            return Err(Error::Config("need at least 4 orientations".into()));
        }
        if self.n_scales < 1 {
            return Err(Error::Config("need at least 1 scale".into()));
        }
        if self.spline_order as usize + 1 > self.n_orientations {
            return Err(Error::Config(format!(
                "angular spline support {} exceeds orientation count {}",
                self.spline_order + 1,
                self.n_orientations
            )));
        }
        if self.n_scales < self.spline_order as usize {
            return Err(Error::Config(format!(
                "need n_scales >= spline_order for a nonempty interior annulus, got {} < {}",
                self.n_scales, self.spline_order
            )));
        }
        if !(self.rho_minus > 0.0 && self.rho_minus < self.rho_plus) {
            return Err(Error::Config("need 0 < rho_minus < rho_plus".into()));
        }
        if self.rho_plus > PI + 1e-12 {
            return Err(Error::Config(format!(
                "rho_plus {} exceeds the Nyquist frequency pi",
                self.rho_plus
            )));
        }
        if !(self.a_minus > 0.0 && self.a_minus < self.a_plus) {
            return Err(Error::Config("need 0 < a_minus < a_plus".into()));
        }
        if !(self.sigma_s > 0.0) {
            return Err(Error::Config("sigma_s must be positive (or infinite)".into()));
        }
        // every dilated copy's support must stay inside the annulus
        let s = self.s_rho();
        let half = 0.5 * (self.spline_order as f64 + 1.0) * s;
        let top = -self.tau_minus() + half;
        let bottom = -self.tau_minus() - (self.n_scales as f64 - 1.0) * s - half;
        if top > self.rho_plus.ln() + 1e-9 || bottom < self.rho_minus.ln() - 1e-9 {
            return Err(Error::Config(
                "scale lattice pushes filter supports outside the annulus".into(),
            ));
        }
        Ok(())
    }

    pub fn s_phi(&self) -> f64 {
        2.0 * PI / self.n_orientations as f64
    }

    pub fn s_rho(&self) -> f64 {
        (self.a_plus.ln() - self.a_minus.ln()) / self.n_scales as f64
    }

    pub fn tau_minus(&self) -> f64 {
        self.a_minus.ln()
    }

    pub fn theta_k(&self, k: usize) -> f64 {
        k as f64 * self.s_phi()
    }

    /// a_l = a- e^{l s_rho}.
    pub fn scale_l(&self, l: usize) -> f64 {
        (self.tau_minus() + l as f64 * self.s_rho()).exp()
    }

    pub fn thetas(&self) -> Vec<f64> {
        (0..self.n_orientations).map(|k| self.theta_k(k)).collect()
    }

    pub fn log_scales(&self) -> Vec<f64> {
        (0..self.n_scales)
            .map(|l| self.tau_minus() + l as f64 * self.s_rho())
            .collect()
    }

    /// Sub-annulus on which the radial partition of unity is exact (margin
    /// k s_rho in log radius from both annulus edges for the tight tiling).
    pub fn interior_rho(&self) -> (f64, f64) {
        let s = self.s_rho();
        let k = self.spline_order as f64;
        let hi = -self.tau_minus() - 0.5 * (k - 1.0) * s;
        let lo = -self.tau_minus() - (self.n_scales as f64 - 0.5 * (k + 1.0)) * s;
        (lo.exp(), hi.exp())
    }

    /// Identity hash over the exact parameter bytes.
    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(80);
        for v in [
            self.n_orientations as u64,
            self.n_scales as u64,
            self.spline_order as u64,
            self.width as u64,
            self.height as u64,
        ] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [
            self.a_minus,
            self.a_plus,
            self.rho_minus,
            self.rho_plus,
            self.sigma_s,
        ] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a(&bytes)
    }
}

/// Angular profile A(phi) = B^k(((phi mod 2pi) - pi/2) / s_phi).
/// Rotated copies A(phi - theta_k) sum to 1 for every phi.
pub fn angular_profile(phi: f64, p: &BankParams) -> f64 {
    let u = (phi.rem_euclid(2.0 * PI) - PI / 2.0) / p.s_phi();
    bspline(p.spline_order, u)
}

/// Radial mother profile B(rho) = B^k(ln(rho) / s_rho); the bank uses the
/// dilated copies B(a_l rho).
pub fn radial_profile(rho: f64, p: &BankParams) -> Result<f64> {
    if rho <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "radial profile needs rho > 0, got {rho}"
        )));
    }
    Ok(bspline(p.spline_order, rho.ln() / p.s_rho()))
}

fn radial_raw(rho: f64, p: &BankParams) -> f64 {
    bspline(p.spline_order, rho.ln() / p.s_rho())
}

/// Min/max of sum_l B(a_l rho) over an interior log-radial sweep.
pub fn radial_partition_stats(p: &BankParams, samples: usize) -> (f64, f64) {
    sweep_interior(p, samples, |sum, _| sum)
}

/// Min/max of sum_l sqrt(B(a_l rho)) over an interior log-radial sweep.
pub fn radial_sqrt_sum_stats(p: &BankParams, samples: usize) -> (f64, f64) {
    sweep_interior(p, samples, |_, sqrt_sum| sqrt_sum)
}

fn sweep_interior(p: &BankParams, samples: usize, pick: fn(f64, f64) -> f64) -> (f64, f64) {
    let (lo, hi) = p.interior_rho();
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..samples {
        let t = (i as f64 + 0.5) / samples as f64;
        let rho = (lo.ln() + t * (hi.ln() - lo.ln())).exp();
        let mut sum = 0.0;
        let mut sqrt_sum = 0.0;
        for l in 0..p.n_scales {
            let v = radial_raw(p.scale_l(l) * rho, p);
            sum += v;
            sqrt_sum += v.sqrt();
        }
        let v = pick(sum, sqrt_sum);
        min = min.min(v);
        max = max.max(v);
    }
    (min, max)
}

/// Built filter bank: real spectral filters indexed by (orientation k,
/// scale l) at k * M + l, the admissibility field, and reconstruction gain.
#[derive(Debug, Clone)]
pub struct WaveletBank {
    pub filters: Vec<Array2<f64>>,
    pub m_psi_d: Array2<f64>,
    pub params: BankParams,
    /// Mean of sum_{k,l} hat_psi over the interior annulus; normalizes the
    /// integrate-the-score approximate reconstruction.
    pub approx_gain: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ConditionDiagnostics {
    pub sup_m: f64,
    pub inf_m: f64,
    pub cond_bound: f64,
}

/// (1/(N M)) sum_{k,l} |hat_psi[k][l]|^2.
pub fn compute_m_psi_discrete(filters: &[Array2<f64>], n: usize, m: usize) -> Array2<f64> {
    let dim = filters
        .first()
        .map(|f| f.dim())
        .expect("at least one filter");
    let mut acc = Array2::<f64>::zeros(dim);
    for f in filters {
        acc.zip_mut_with(f, |a, &v| *a += v * v);
    }
    acc / (n as f64 * m as f64)
}

impl WaveletBank {
    pub fn filter(&self, k: usize, l: usize) -> &Array2<f64> {
        &self.filters[k * self.params.n_scales + l]
    }

    pub fn hash(&self) -> u64 {
        self.params.hash()
    }

    /// Boolean mask of DFT bins inside the interior annulus.
    pub fn interior_mask(&self) -> Array2<bool> {
        let (lo, hi) = self.params.interior_rho();
        let (h, w) = (self.params.height, self.params.width);
        Array2::from_shape_fn((h, w), |(y, x)| {
            let rho = omega(x, w).hypot(omega(y, h));
            rho >= lo && rho <= hi
        })
    }

    pub fn condition_diagnostics(&self) -> Result<ConditionDiagnostics> {
        let mask = self.interior_mask();
        let mut sup = f64::NEG_INFINITY;
        let mut inf = f64::INFINITY;
        for (m, &inside) in self.m_psi_d.iter().zip(mask.iter()) {
            if inside {
                sup = sup.max(*m);
                inf = inf.min(*m);
            }
        }
        if !(inf > 0.0) {
            return Err(Error::Inadmissible(format!(
                "m_psi_d not positive on the interior annulus (inf = {inf})"
            )));
        }
        Ok(ConditionDiagnostics {
            sup_m: sup,
            inf_m: inf,
            cond_bound: (sup / inf).sqrt(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = Writer::new(BufWriter::new(file), &path.display().to_string());
        w.u32(u32::from_le_bytes(*b"SOSB"))?;
        w.u32(1)?;
        let p = &self.params;
        w.u32(p.n_orientations as u32)?;
        w.u32(p.n_scales as u32)?;
        w.u32(p.spline_order)?;
        w.u32(p.width as u32)?;
        w.u32(p.height as u32)?;
        w.f64(p.a_minus)?;
        w.f64(p.a_plus)?;
        w.f64(p.rho_minus)?;
        w.f64(p.rho_plus)?;
        w.f64(p.sigma_s)?;
        w.f64(self.approx_gain)?;
        let mut buf = Vec::with_capacity(2 * p.width * p.height);
        for f in &self.filters {
            buf.clear();
            for v in f.iter() {
                buf.push(*v as f32);
                buf.push(0.0f32); // interleaved re/im; filters are real-valued
            }
            w.f32_slice(&buf)?;
        }
        let m: Vec<f32> = self.m_psi_d.iter().map(|&v| v as f32).collect();
        w.f32_slice(&m)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut r = Reader::new(BufReader::new(file), &path.display().to_string());
        let magic = r.u32()?;
        if magic != u32::from_le_bytes(*b"SOSB") {
            return Err(r.bad("not a wavelet bank file (bad magic)"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(r.bad(&format!("unsupported bank version {version}")));
        }
        let n_orientations = r.u32()? as usize;
        let n_scales = r.u32()? as usize;
        let spline_order = r.u32()?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let params = BankParams {
            n_orientations,
            n_scales,
            spline_order,
            a_minus: r.f64()?,
            a_plus: r.f64()?,
            rho_minus: r.f64()?,
            rho_plus: r.f64()?,
            sigma_s: r.f64()?,
            width,
            height,
        };
        params.validate()?;
        let approx_gain = r.f64()?;
        let mut filters = Vec::with_capacity(n_orientations * n_scales);
        for _ in 0..n_orientations * n_scales {
            let raw = r.f32_vec(2 * width * height)?;
            let mut f = Array2::<f64>::zeros((height, width));
            for (i, v) in f.iter_mut().enumerate() {
                *v = raw[2 * i] as f64;
            }
            filters.push(f);
        }
        let raw = r.f32_vec(width * height)?;
        let m_psi_d =
            Array2::from_shape_vec((height, width), raw.iter().map(|&v| v as f64).collect())
                .expect("shape matches header");
        Ok(Self {
            filters,
            m_psi_d,
            params,
            approx_gain,
        })
    }
}

/// Builds the bank: evaluates sqrt(N M A B) per DFT bin (no intermediate
/// polar grid), applies the spatial Gaussian window by inverse DFT, pointwise
/// multiply, forward DFT, and computes the admissibility field.
pub fn build_bank(params: &BankParams) -> Result<WaveletBank> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let n = params.n_orientations;
    let m = params.n_scales;
    let nm = (n * m) as f64;

    let mut phi = Array2::<f64>::zeros((h, w));
    let mut rho = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let wy = omega(y, h);
        for x in 0..w {
            let wx = omega(x, w);
            phi[[y, x]] = wy.atan2(wx);
            rho[[y, x]] = wx.hypot(wy);
        }
    }

    let window = if params.sigma_s.is_finite() {
        let s2 = 2.0 * params.sigma_s * params.sigma_s;
        Some(Array2::from_shape_fn((h, w), |(y, x)| {
            let dx = wrapped_dist(x, w);
            let dy = wrapped_dist(y, h);
            (-(dx * dx + dy * dy) / s2).exp()
        }))
    } else {
        None
    };

    let filters: Vec<Array2<f64>> = (0..n * m)
        .into_par_iter()
        .map(|idx| {
            let (k, l) = (idx / m, idx % m);
            let theta = params.theta_k(k);
            let a_l = params.scale_l(l);
            let mut spec = Array2::<f64>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let r = rho[[y, x]];
                    if r == 0.0 {
                        continue;
                    }
                    let ang = angular_profile(phi[[y, x]] - theta, params);
                    if ang == 0.0 {
                        continue;
                    }
                    let rad = radial_raw(a_l * r, params);
                    if rad == 0.0 {
                        continue;
                    }
                    spec[[y, x]] = (nm * ang * rad).sqrt();
                }
            }
            if let Some(win) = &window {
                let mut buf = spec.mapv(|v| Complex64::new(v, 0.0));
                fft2_inplace(&mut buf, true);
                buf.zip_mut_with(win, |z, &g| *z *= g);
                fft2_inplace(&mut buf, false);
                // real spectrum convolved with a real window stays real
                spec.zip_mut_with(&buf, |s, z| *s = z.re);
            }
            spec
        })
        .collect();

    let m_psi_d = compute_m_psi_discrete(&filters, n, m);

    let (lo, hi) = params.interior_rho();
    let mut gain = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let r = rho[[y, x]];
            if r >= lo && r <= hi {
                let mut t = 0.0;
                for f in &filters {
                    t += f[[y, x]];
                }
                gain += t;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Config(
            "interior annulus contains no DFT bins on this grid".into(),
        ));
    }

    Ok(WaveletBank {
        filters,
        m_psi_d,
        params: params.clone(),
        approx_gain: gain / count as f64,
    })
}

fn wrapped_dist(i: usize, n: usize) -> f64 {
    let i = i as f64;
    let n = n as f64;
    if i <= n / 2.0 {
        i
    } else {
        i - n
    }
}
