//! FFT-based forward transform to multi-scale orientation scores, exact
//! admissibility-weighted reconstruction, fast approximate reconstruction,
//! and annulus band-limiting.
//!
//! All convolutions are circular (the spectral construction is native to the
//! DFT); callers wanting other boundary behavior pad beforehand.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array4};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::fft::{fft2_inplace, fft2_real, omega};
use crate::wavelets::WaveletBank;
use crate::{Error, Result};

/// Real-valued raster; `data` is indexed [y][x].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array2<f64>,
}

impl Image {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn validate(&self) -> Result<()> {
        if self.width() < 16 || self.height() < 16 {
            return Err(Error::Config(format!(
                "image dimensions {}x{} below the 16-pixel minimum",
                self.width(),
                self.height()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Complex score U(x, y, theta_k, a_l), data indexed [y][x][k][l].
#[derive(Debug, Clone)]
pub struct ScoreVolume {
    pub data: Array4<Complex64>,
    pub thetas: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub bank_hash: u64,
}

impl ScoreVolume {
    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_orientations(&self) -> usize {
        self.data.dim().2
    }

    pub fn n_scales(&self) -> usize {
        self.data.dim().3
    }

    /// Copies one (k, l) layer into a contiguous plane.
    pub fn layer(&self, k: usize, l: usize) -> Array2<Complex64> {
        let (h, w, _, _) = self.data.dim();
        Array2::from_shape_fn((h, w), |(y, x)| self.data[[y, x, k, l]])
    }

    pub fn set_layer(&mut self, k: usize, l: usize, layer: &Array2<Complex64>) {
        let (h, w, _, _) = self.data.dim();
        for y in 0..h {
            for x in 0..w {
                self.data[[y, x, k, l]] = layer[[y, x]];
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = Writer::new(BufWriter::new(file), &path.display().to_string());
        w.u32(u32::from_le_bytes(*b"SOSV"))?;
        w.u32(1)?;
        w.u32(self.width() as u32)?;
        w.u32(self.height() as u32)?;
        w.u32(self.n_orientations() as u32)?;
        w.u32(self.n_scales() as u32)?;
        w.u64(self.bank_hash)?;
        for &t in &self.thetas {
            w.f64(t)?;
        }
        for &t in &self.log_scales {
            w.f64(t)?;
        }
        let mut buf: Vec<f32> = Vec::with_capacity(self.data.len() * 2);
        for v in self.data.iter() {
            buf.push(v.re as f32);
            buf.push(v.im as f32);
        }
        w.f32_slice(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut r = Reader::new(BufReader::new(file), &path.display().to_string());
        if r.u32()? != u32::from_le_bytes(*b"SOSV") {
            return Err(r.bad("not a score volume file (bad magic)"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(r.bad(&format!("unsupported volume version {version}")));
        }
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let n = r.u32()? as usize;
        let m = r.u32()? as usize;
        if width == 0 || height == 0 || n == 0 || m == 0 {
            return Err(r.bad("zero dimension in header"));
        }
        let bank_hash = r.u64()?;
        let mut thetas = Vec::with_capacity(n);
        for _ in 0..n {
            thetas.push(r.f64()?);
        }
        let mut log_scales = Vec::with_capacity(m);
        for _ in 0..m {
            log_scales.push(r.f64()?);
        }
        let raw = r.f32_vec(2 * width * height * n * m)?;
        let mut data = Array4::<Complex64>::default((height, width, n, m));
        for (i, v) in data.iter_mut().enumerate() {
            *v = Complex64::new(raw[2 * i] as f64, raw[2 * i + 1] as f64);
        }
        Ok(Self {
            data,
            thetas,
            log_scales,
            bank_hash,
        })
    }
}

fn check_grid(f: &Image, bank: &WaveletBank) -> Result<()> {
    if f.width() != bank.params.width || f.height() != bank.params.height {
        return Err(Error::Config(format!(
            "image grid {}x{} does not match bank grid {}x{}",
            f.width(),
            f.height(),
            bank.params.width,
            bank.params.height
        )));
    }
    Ok(())
}

/// Zeroes every spectral bin outside [rho_minus, rho_plus]; idempotent.
pub fn annulus_project(f: &Image, rho_minus: f64, rho_plus: f64) -> Result<Image> {
    if !(rho_minus > 0.0 && rho_minus < rho_plus && rho_plus <= std::f64::consts::PI + 1e-12) {
        return Err(Error::Config(format!(
            "invalid annulus radii [{rho_minus}, {rho_plus}]"
        )));
    }
    let (h, w) = f.data.dim();
    let mut spec = fft2_real(&f.data);
    for y in 0..h {
        let wy = omega(y, h);
        for x in 0..w {
            let rho = omega(x, w).hypot(wy);
            if !(rho >= rho_minus && rho <= rho_plus) {
                spec[[y, x]] = Complex64::new(0.0, 0.0);
            }
        }
    }
    fft2_inplace(&mut spec, true);
    Ok(Image::new(spec.mapv(|z| z.re)))
}

/// U(.,.,k,l) = IDFT(conj(hat_psi[k][l]) . DFT(f)) for every (k, l).
pub fn forward(f: &Image, bank: &WaveletBank) -> Result<ScoreVolume> {
    check_grid(f, bank)?;
    f.validate()?;
    let (h, w) = f.data.dim();
    let n = bank.params.n_orientations;
    let m = bank.params.n_scales;
    let spec = fft2_real(&f.data);

    let layers: Vec<Array2<Complex64>> = (0..n * m)
        .into_par_iter()
        .map(|idx| {
            let filt = &bank.filters[idx];
            let mut prod = spec.clone();
            prod.zip_mut_with(filt, |z, &psi| *z *= psi); // filters are real
            fft2_inplace(&mut prod, true);
            prod
        })
        .collect();

    let mut data = Array4::<Complex64>::default((h, w, n, m));
    for (idx, layer) in layers.iter().enumerate() {
        let (k, l) = (idx / m, idx % m);
        for y in 0..h {
            for x in 0..w {
                data[[y, x, k, l]] = layer[[y, x]];
            }
        }
    }

    Ok(ScoreVolume {
        data,
        thetas: bank.params.thetas(),
        log_scales: bank.params.log_scales(),
        bank_hash: bank.hash(),
    })
}

fn check_volume(u: &ScoreVolume, bank: &WaveletBank) -> Result<()> {
    if u.width() != bank.params.width
        || u.height() != bank.params.height
        || u.n_orientations() != bank.params.n_orientations
        || u.n_scales() != bank.params.n_scales
    {
        return Err(Error::Config(
            "score volume dimensions do not match the bank".into(),
        ));
    }
    Ok(())
}

/// Exact reconstruction: IDFT of (sum_{k,l} DFT(U_kl) hat_psi_kl) / (N M m_psi_d),
/// restricted to the interior annulus where the admissibility field is
/// bounded away from zero.
pub fn inverse_exact(u: &ScoreVolume, bank: &WaveletBank) -> Result<Image> {
    check_volume(u, bank)?;
    let diag = bank.condition_diagnostics()?;
    debug_assert!(diag.inf_m > 0.0);
    let (h, w) = (u.height(), u.width());
    let n = bank.params.n_orientations;
    let m = bank.params.n_scales;

    let partials: Vec<Array2<Complex64>> = (0..n * m)
        .into_par_iter()
        .map(|idx| {
            let (k, l) = (idx / m, idx % m);
            let mut spec = u.layer(k, l);
            fft2_inplace(&mut spec, false);
            spec.zip_mut_with(&bank.filters[idx], |z, &psi| *z *= psi);
            spec
        })
        .collect();

    let mut acc = Array2::<Complex64>::default((h, w));
    for p in &partials {
        acc.zip_mut_with(p, |a, &v| *a += v);
    }

    let nm = (n * m) as f64;
    let mask = bank.interior_mask();
    for ((a, &inside), &mval) in acc.iter_mut().zip(mask.iter()).zip(bank.m_psi_d.iter()) {
        if inside {
            *a /= nm * mval;
        } else {
            *a = Complex64::new(0.0, 0.0);
        }
    }
    fft2_inplace(&mut acc, true);
    Ok(Image::new(acc.mapv(|z| z.re)))
}

/// Approximate reconstruction by integrating the score over orientation and
/// log-scale; the bank supplies the flat spectral gain of that sum.
pub fn inverse_approx(u: &ScoreVolume, bank: &WaveletBank) -> Result<Image> {
    check_volume(u, bank)?;
    let (h, w) = (u.height(), u.width());
    let mut acc = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = Complex64::new(0.0, 0.0);
            for k in 0..u.n_orientations() {
                for l in 0..u.n_scales() {
                    s += u.data[[y, x, k, l]];
                }
            }
            acc[[y, x]] = s.re / bank.approx_gain;
        }
    }
    Ok(Image::new(acc))
}

/// Relative gap between the m_psi-weighted spectral energy of the score and
/// the energy of the image restricted to the interior annulus.
pub fn plancherel_residual(u: &ScoreVolume, f: &Image, bank: &WaveletBank) -> Result<f64> {
    check_volume(u, bank)?;
    check_grid(f, bank)?;
    let n = bank.params.n_orientations;
    let m = bank.params.n_scales;
    let nm = (n * m) as f64;
    let mask = bank.interior_mask();

    let energies: Vec<Array2<f64>> = (0..n * m)
        .into_par_iter()
        .map(|idx| {
            let (k, l) = (idx / m, idx % m);
            let mut spec = u.layer(k, l);
            fft2_inplace(&mut spec, false);
            spec.mapv(|z| z.norm_sqr())
        })
        .collect();

    let mut score_energy = 0.0;
    let (h, w) = f.data.dim();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                let mut e = 0.0;
                for layer in &energies {
                    e += layer[[y, x]];
                }
                score_energy += e / (nm * bank.m_psi_d[[y, x]]);
            }
        }
    }

    let spec = fft2_real(&f.data);
    let mut image_energy = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                image_energy += spec[[y, x]].norm_sqr();
            }
        }
    }
    if image_energy == 0.0 {
        return Ok(0.0);
    }
    Ok((score_energy - image_energy).abs() / image_energy)
}

/// Projects spectrally onto the bank's interior annulus; this is the subspace
/// on which forward/inverse_exact compose to the identity.
pub fn interior_project(f: &Image, bank: &WaveletBank) -> Result<Image> {
    let (lo, hi) = bank.params.interior_rho();
    annulus_project(f, lo, hi)
}

/// Spatial rotation by +90 degrees on the periodic grid: (x, y) -> (-y, x)
/// with DFT index wrapping. Square grids only.
pub fn rotate90(f: &Image) -> Image {
    let (h, w) = f.data.dim();
    assert_eq!(h, w, "quarter-turn rotation needs a square grid");
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // out(x', y') with x' = -y mod W, y' = x mod H
            let xp = (w - y) % w;
            let yp = x;
            out[[yp, xp]] = f.data[[y, x]];
        }
    }
    Image::new(out)
}

/// Circularly translates an image by integer pixels.
pub fn translate(f: &Image, dx: i64, dy: i64) -> Image {
    let (h, w) = f.data.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let xs = (x as i64 + dx).rem_euclid(w as i64) as usize;
            let ys = (y as i64 + dy).rem_euclid(h as i64) as usize;
            out[[ys, xs]] = f.data[[y, x]];
        }
    }
    Image::new(out)
}
