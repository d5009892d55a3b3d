//! Paired image-quality metrics on unit-range grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::perceptual::{perceptual_distance, FeatureExtractor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check(a: &Grid, b: &Grid) -> Result<()> {
    a.ensure_same_shape(b, "metric inputs")?;
    if a.is_empty() {
        return Err(Error::InvalidValue("metric inputs are empty".into()));
    }
    Ok(())
}

pub fn mae(a: &Grid, b: &Grid) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(s / a.len() as f64)
}

pub fn mse(a: &Grid, b: &Grid) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1/mse)` for data range 1; `+∞` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Grid, b: &Grid) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Normalized 1-D Gaussian taps of odd length `size`.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Window edge used for an `h × w` input: 11, or the largest odd size that
/// fits when the input is smaller (ROI crops can be tiny).
pub fn ssim_window_for(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Separable valid-mode Gaussian filtering of `img`.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over all fully-contained Gaussian windows (σ = 1.5,
/// K1 = 0.01, K2 = 0.03, data range 1).
pub fn ssim(a: &Grid, b: &Grid) -> Result<f64> {
    check(a, b)?;
    let (h, w) = a.shape();
    let taps = gaussian_taps(ssim_window_for(h, w), SSIM_SIGMA);
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, _, _) = filter_valid(&x, h, w, &taps);
    let (my, _, _) = filter_valid(&y, h, w, &taps);
    let (sxx, _, _) = filter_valid(&xx, h, w, &taps);
    let (syy, _, _) = filter_valid(&yy, h, w, &taps);
    let (sxy, _, _) = filter_valid(&xy, h, w, &taps);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedMetrics {
    pub mae: f64,
    pub ssim: f64,
    #[serde(with = "super::nonfinite")]
    pub psnr: f64,
    pub lpips: f64,
}

pub fn paired_metrics(ext: &dyn FeatureExtractor, gen: &Grid, real: &Grid) -> Result<PairedMetrics> {
    Ok(PairedMetrics {
        mae: mae(gen, real)?,
        ssim: ssim(gen, real)?,
        psnr: psnr(gen, real)?,
        lpips: perceptual_distance(ext, gen, real)? as f64,
    })
}

/// Mean and population standard deviation of per-image values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(with = "super::nonfinite")]
    pub mean: f64,
    #[serde(with = "super::nonfinite")]
    pub std: f64,
}

impl MeanStd {
    /// `NaN` mean and std for an empty set. A set made only of `+∞` (all
    /// images identical under PSNR) reports `+∞ ± 0`.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        if values.iter().all(|v| *v == f64::INFINITY) {
            return Self {
                mean: f64::INFINITY,
                std: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(seed: u32) -> Grid {
        Grid::from_fn(32, 32, |y, x| {
            let h = (y as u32 * 73 + x as u32 * 151 + seed * 977) % 101;
            h as f32 / 100.0
        })
    }

    /// Direct evaluation of the SSIM formula at every window position.
    fn ssim_brute(a: &Grid, b: &Grid) -> f64 {
        let k = 11;
        let taps = gaussian_taps(k, 1.5);
        let (h, w) = a.shape();
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut ux, mut uy) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wgt = taps[i] * taps[j];
                        ux += wgt * a.get(oy + i, ox + j) as f64;
                        uy += wgt * b.get(oy + i, ox + j) as f64;
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wgt = taps[i] * taps[j];
                        let dx = a.get(oy + i, ox + j) as f64 - ux;
                        let dy = b.get(oy + i, ox + j) as f64 - uy;
                        vx += wgt * dx * dx;
                        vy += wgt * dy * dy;
                        cxy += wgt * dx * dy;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn identity_pair() {
        let a = textured(1);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_offset_closed_form() {
        let real = Grid::zeros(16, 16);
        let gen = Grid::filled(16, 16, 0.5);
        assert!((mae(&gen, &real).unwrap() - 0.5).abs() < 1e-12);
        assert!((mse(&gen, &real).unwrap() - 0.25).abs() < 1e-12);
        assert!((psnr(&gen, &real).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_brute_force() {
        for s in 0..4 {
            let (a, b) = (textured(s), textured(s + 7));
            assert!((ssim(&a, &b).unwrap() - ssim_brute(&a, &b)).abs() < 1e-5);
            let half = a.map(|v| v * 0.5 + 0.2);
            assert!((ssim(&a, &half).unwrap() - ssim_brute(&a, &half)).abs() < 1e-5);
        }
    }

    #[test]
    fn small_inputs_shrink_the_window() {
        assert_eq!(ssim_window_for(9, 12), 9);
        assert_eq!(ssim_window_for(6, 30), 5);
        let a = Grid::from_fn(6, 6, |y, x| (y * 6 + x) as f32 / 36.0);
        let s = ssim(&a, &a.map(|v| v * 0.9)).unwrap();
        assert!(s.is_finite() && s < 1.0);
    }

    #[test]
    fn mean_std_is_population() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        let inf = MeanStd::of(&[f64::INFINITY; 3]);
        assert_eq!((inf.mean, inf.std), (f64::INFINITY, 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(mae(&Grid::zeros(4, 4), &Grid::zeros(4, 5)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn identity_and_symmetry(seed in 0u32..1000, gain in 0.1f32..0.9, offset in 0.0f32..0.1) {
            let a = textured(seed);
            proptest::prop_assert_eq!(mae(&a, &a).unwrap(), 0.0);
            proptest::prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
            proptest::prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
            let b = a.map(|v| v * gain + offset);
            proptest::prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            proptest::prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
            proptest::prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-9);
            let m = mse(&a, &b).unwrap();
            proptest::prop_assert!((psnr(&a, &b).unwrap() - psnr_from_mse(m)).abs() < 1e-9);
        }
    }
}
