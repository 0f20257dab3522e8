//! Multi-scale vessel-likelihood filters: image-domain Frangi, SE(2)
//! gauge-frame vesselness on score layers, and the SIM(2) per-layer variant
//! with scale-adapted structureness normalization.
//!
//! The image-domain filter follows the dark-vessel convention (positive
//! second derivative across the vessel fires the lambda2 > 0 branch);
//! callers flip the sign of bright-on-dark inputs. Score-based variants act
//! on -|U|, which turns magnitude ridges into valleys of the working field
//! so the same printed branch fires regardless of image polarity.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::calculus::{
    best_exp_fit, gauge_frame, hessians_with_scales, rotate_diag, DerivScales, LayerField,
};
use crate::cwt::{Image, ScoreVolume};
use crate::fft::{fft2_inplace, fft2_real, omega};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma2Mode {
    Fixed,
    MaxFraction,
    ScaleAdapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselnessParams {
    pub sigma1: f64,
    pub sigma2_mode: Sigma2Mode,
    pub sigma2_value: f64,
    pub frangi_scales: Vec<f64>,
    pub rho_tilde: f64,
    pub beta: f64,
}

impl Default for VesselnessParams {
    fn default() -> Self {
        Self {
            sigma1: 0.5,
            sigma2_mode: Sigma2Mode::MaxFraction,
            sigma2_value: 0.0,
            frangi_scales: vec![1.0, 2.0, 4.0],
            rho_tilde: 1.5,
            beta: 0.058,
        }
    }
}

impl VesselnessParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 > 0.0) {
            return Err(Error::Config("sigma1 must be positive".into()));
        }
        if self.sigma2_mode == Sigma2Mode::Fixed && !(self.sigma2_value > 0.0) {
            return Err(Error::Config("fixed sigma2 must be positive".into()));
        }
        if self.frangi_scales.is_empty() {
            return Err(Error::Config("frangi needs at least one scale".into()));
        }
        if !(self.rho_tilde > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("rho_tilde and beta must be positive".into()));
        }
        Ok(())
    }
}

/// Image-domain Frangi filter: per scale, Gaussian-Hessian eigenvalues
/// |l1| <= |l2|, response exp(-R^2/2s1^2)(1 - exp(-S^2/2s2^2)) on the
/// l2 > 0 branch with R = l1/l2 and S = l1^2 + l2^2; maximum over scales,
/// normalized to [0, 1].
pub fn frangi2d(f: &Image, p: &VesselnessParams) -> Result<Image> {
    p.validate()?;
    let (h, w) = f.data.dim();
    let spec = fft2_real(&f.data);
    let mut best = Array2::<f64>::zeros((h, w));

    for &scale in &p.frangi_scales {
        // spectral Gaussian derivatives: exact and periodic
        let mut dxx = spec.clone();
        let mut dyy = spec.clone();
        let mut dxy = spec.clone();
        for y in 0..h {
            let wy = omega(y, h);
            for x in 0..w {
                let wx = omega(x, w);
                let g = (-scale * (wx * wx + wy * wy)).exp();
                dxx[[y, x]] *= -wx * wx * g;
                dyy[[y, x]] *= -wy * wy * g;
                dxy[[y, x]] *= -wx * wy * g;
            }
        }
        fft2_inplace(&mut dxx, true);
        fft2_inplace(&mut dyy, true);
        fft2_inplace(&mut dxy, true);

        let mut structureness = Array2::<f64>::zeros((h, w));
        let mut eigs = Array2::<(f64, f64)>::from_elem((h, w), (0.0, 0.0));
        for y in 0..h {
            for x in 0..w {
                let (a, b, c) = (dxx[[y, x]].re, dxy[[y, x]].re, dyy[[y, x]].re);
                let tr = a + c;
                let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                let (mut l1, mut l2) = (0.5 * tr - disc, 0.5 * tr + disc);
                if l1.abs() > l2.abs() {
                    std::mem::swap(&mut l1, &mut l2);
                }
                eigs[[y, x]] = (l1, l2);
                structureness[[y, x]] = l1 * l1 + l2 * l2;
            }
        }
        let sigma2 = match p.sigma2_mode {
            Sigma2Mode::Fixed => p.sigma2_value,
            _ => 0.2 * structureness.iter().cloned().fold(0.0f64, f64::max),
        };
        if !(sigma2 > 0.0) {
            continue; // blank scale contributes nothing
        }
        for y in 0..h {
            for x in 0..w {
                let (l1, l2) = eigs[[y, x]];
                if l2 <= 0.0 {
                    continue;
                }
                let r = l1 / l2;
                let s = structureness[[y, x]];
                let v = (-r * r / (2.0 * p.sigma1 * p.sigma1)).exp()
                    * (1.0 - (-s * s / (2.0 * sigma2 * sigma2)).exp());
                if v > best[[y, x]] {
                    best[[y, x]] = v;
                }
            }
        }
    }

    let max = best.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        best.mapv_inplace(|v| v / max);
    }
    Ok(Image::new(best))
}

/// How the SE(2) filter picks its structureness normalization.
#[derive(Debug, Clone, Copy)]
pub enum Sigma2Choice {
    /// 0.2 ||U_aa + U_bb||_inf of the working field.
    MaxFraction,
    /// Explicit value (the SIM(2) variant passes its scale-adapted rule).
    Explicit(f64),
}

/// SE(2) vesselness of a score-magnitude layer. Gauge derivatives use
/// isotropic spatial scale rho_tilde and angular scale beta^2; the response
/// field is normalized by its own supremum and projected to an image by the
/// maximum over orientations.
pub fn se2_vesselness(
    mag: &LayerField,
    p: &VesselnessParams,
    sigma2: Sigma2Choice,
) -> Result<(LayerField, Image)> {
    p.validate()?;
    let (h, w, n) = mag.data.dim();
    // valley convention: magnitude ridges must fire the U_aa + U_bb > 0 branch
    let mut work = mag.clone();
    work.beta = p.beta;
    work.data.mapv_inplace(|v| -v);

    let scales = DerivScales {
        spatial: p.rho_tilde,
        angular: p.beta * p.beta,
    };
    let (hf, hw) = hessians_with_scales(&work, p.beta, scales);
    let fit = best_exp_fit(&hf, false);
    let frames = gauge_frame(&fit, false);

    // the fit-aligned frame vector is row 0 of the rotation (the along-vessel
    // direction): its diagonal entry plays the near-zero eigenvalue of the
    // printed anisotropy measure, the other two rows are the transverse pair
    let mut u_ab = Array3::<f64>::zeros((h, w, n));
    let mut u_cc = Array3::<f64>::zeros((h, w, n));
    for ((slot_ab, slot_cc), (hm, m)) in u_ab
        .iter_mut()
        .zip(u_cc.iter_mut())
        .zip(hw.iter().zip(frames.m.iter()))
    {
        *slot_ab = rotate_diag(hm, m, 1) + rotate_diag(hm, m, 2);
        *slot_cc = rotate_diag(hm, m, 0);
    }

    let s2 = match sigma2 {
        Sigma2Choice::MaxFraction => {
            0.2 * u_ab.iter().map(|v| v.abs()).fold(0.0f64, f64::max)
        }
        Sigma2Choice::Explicit(v) => v,
    };
    let mut v_field = LayerField::new(Array3::zeros((h, w, n)), p.beta);
    if s2 > 0.0 {
        for ((v, &ab), &cc) in v_field
            .data
            .iter_mut()
            .zip(u_ab.iter())
            .zip(u_cc.iter())
        {
            if ab > 0.0 {
                *v = (-(cc * cc) / (4.0 * p.sigma1 * p.sigma1 * ab * ab)).exp()
                    * (1.0 - (-((ab * ab + cc * cc)) / (2.0 * s2 * s2)).exp());
            }
        }
    }
    let sup = v_field.data.iter().cloned().fold(0.0f64, f64::max);
    if sup > 0.0 {
        v_field.data.mapv_inplace(|v| v / sup);
    }

    let mut proj = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = 0.0f64;
            for k in 0..n {
                m = m.max(v_field.data[[y, x, k]]);
            }
            proj[[y, x]] = m;
        }
    }
    Ok((v_field, Image::new(proj)))
}

/// Magnitude of one scale layer of a score volume.
pub fn magnitude_layer(u: &ScoreVolume, l: usize, beta: f64) -> LayerField {
    let (h, w, n, _) = u.data.dim();
    let mut mag = LayerField::new(Array3::zeros((h, w, n)), beta);
    for y in 0..h {
        for x in 0..w {
            for k in 0..n {
                let z: Complex64 = u.data[[y, x, k, l]];
                mag.data[[y, x, k]] = z.norm();
            }
        }
    }
    mag
}

/// SIM(2) vesselness: the SE(2) filter per scale layer with the adapted
/// sigma2(a_l) = 0.1 e^{l s_rho} ||U(.,.,.,a_l)||_inf, per-layer normalized,
/// combined by pointwise maximum into a [0, 1] image.
pub fn sim2_vesselness(u: &ScoreVolume, p: &VesselnessParams) -> Result<Image> {
    p.validate()?;
    let m = u.n_scales();
    let s_rho = if m > 1 {
        u.log_scales[1] - u.log_scales[0]
    } else {
        0.0
    };
    let mut out = Image::zeros(u.width(), u.height());
    for l in 0..m {
        let mag = magnitude_layer(u, l, p.beta);
        let sup = mag.data.iter().cloned().fold(0.0f64, f64::max);
        if sup == 0.0 {
            continue;
        }
        let sigma2 = 0.1 * (l as f64 * s_rho).exp() * sup;
        let (_, proj) = se2_vesselness(&mag, p, Sigma2Choice::Explicit(sigma2))?;
        out.data.zip_mut_with(&proj.data, |a, &b| *a = a.max(b));
    }
    Ok(out)
}
