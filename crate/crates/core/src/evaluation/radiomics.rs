//! First-order and gray-level co-occurrence features for the radiomics
//! Fréchet distance.

use crate::error::Result;
use crate::grid::Grid;

pub const ENTROPY_BINS: usize = 64;
pub const GLCM_LEVELS: usize = 32;
/// Regions with fewer pixels are flagged and left out.
pub const MIN_REGION_PIXELS: usize = 4;

pub const FEATURE_NAMES: [&str; 13] = [
    "mean",
    "std",
    "skewness",
    "kurtosis",
    "entropy",
    "p10",
    "p50",
    "p90",
    "energy",
    "glcm_contrast",
    "glcm_homogeneity",
    "glcm_energy",
    "glcm_correlation",
];

/// Linear-interpolated percentile of sorted values, `q ∈ [0, 100]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn bin(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1)
}

/// Normalized symmetric co-occurrence matrix for offset `(dy, dx)`, over
/// pixel pairs whose endpoints both lie in the region. `None` when no
/// pair qualifies.
pub fn glcm(img: &Grid, inside: &[bool], dy: usize, dx: usize) -> Option<Vec<f64>> {
    let (h, w) = img.shape();
    let mut m = vec![0.0; GLCM_LEVELS * GLCM_LEVELS];
    let mut count = 0.0;
    for y in 0..h.saturating_sub(dy) {
        for x in 0..w.saturating_sub(dx) {
            let (a, b) = (y * w + x, (y + dy) * w + x + dx);
            if inside[a] && inside[b] {
                let (i, j) = (bin(img.data()[a], GLCM_LEVELS), bin(img.data()[b], GLCM_LEVELS));
                m[i * GLCM_LEVELS + j] += 1.0;
                m[j * GLCM_LEVELS + i] += 1.0;
                count += 2.0;
            }
        }
    }
    (count > 0.0).then(|| m.into_iter().map(|v| v / count).collect())
}

/// `[contrast, homogeneity, energy, correlation]` of a normalized GLCM.
/// Energy is `sqrt(Σp²)`; correlation is 1 for a single gray level.
pub fn glcm_features(p: &[f64]) -> [f64; 4] {
    let l = GLCM_LEVELS;
    let (mut mu_i, mut mu_j) = (0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            mu_i += i as f64 * p[i * l + j];
            mu_j += j as f64 * p[i * l + j];
        }
    }
    let (mut contrast, mut homog, mut asm, mut var_i, mut var_j, mut cov) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let v = p[i * l + j];
            let d = i as f64 - j as f64;
            contrast += v * d * d;
            homog += v / (1.0 + d * d);
            asm += v * v;
            var_i += v * (i as f64 - mu_i).powi(2);
            var_j += v * (j as f64 - mu_j).powi(2);
            cov += v * (i as f64 - mu_i) * (j as f64 - mu_j);
        }
    }
    let corr = if var_i < 1e-15 || var_j < 1e-15 {
        1.0
    } else {
        cov / (var_i * var_j).sqrt()
    };
    [contrast, homog, asm.sqrt(), corr]
}

/// Feature vector in [`FEATURE_NAMES`] order, or `None` for a region
/// smaller than [`MIN_REGION_PIXELS`]. Mask pixels ≥ 0.5 are inside.
pub fn radiomics_features(img: &Grid, mask: Option<&Grid>) -> Result<Option<Vec<f64>>> {
    let inside: Vec<bool> = match mask {
        Some(m) => {
            m.ensure_same_shape(img, "radiomics mask")?;
            m.data().iter().map(|&v| v >= 0.5).collect()
        }
        None => vec![true; img.len()],
    };
    let mut vals: Vec<f64> = img
        .data()
        .iter()
        .zip(&inside)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v as f64)
        .collect();
    if vals.len() < MIN_REGION_PIXELS {
        return Ok(None);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = vals.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let std = m2.sqrt();
    let (skew, kurt) = if m2 < 1e-15 {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    };

    let mut hist = [0usize; ENTROPY_BINS];
    for &v in &vals {
        hist[bin(v as f32, ENTROPY_BINS)] += 1;
    }
    let entropy = -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>();
    let energy = vals.iter().map(|v| v * v).sum::<f64>();
    vals.sort_by(f64::total_cmp);

    let per_angle: Vec<[f64; 4]> = [(0, 1), (1, 0)]
        .iter()
        .filter_map(|&(dy, dx)| glcm(img, &inside, dy, dx))
        .map(|p| glcm_features(&p))
        .collect();
    let tex = if per_angle.is_empty() {
        [0.0, 1.0, 1.0, 1.0]
    } else {
        let k = per_angle.len() as f64;
        std::array::from_fn(|i| per_angle.iter().map(|f| f[i]).sum::<f64>() / k)
    };

    Ok(Some(vec![
        mean,
        std,
        skew,
        kurt,
        entropy,
        percentile(&vals, 10.0),
        percentile(&vals, 50.0),
        percentile(&vals, 90.0),
        energy,
        tex[0],
        tex[1],
        tex[2],
        tex[3],
    ]))
}

/// Per-feature standardization fitted on a reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    /// Zero-variance features get unit scale so they pass through centred.
    pub fn fit(reference: &[Vec<f64>]) -> Self {
        let d = reference.first().map_or(0, Vec::len);
        let n = reference.len().max(1) as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| reference.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let std = (0..d)
            .map(|j| {
                let s = (reference.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - self.mean[j]) / self.std[j])
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_degenerate_texture() {
        let f = radiomics_features(&Grid::filled(8, 8, 0.4), None).unwrap().unwrap();
        assert_eq!(f.len(), FEATURE_NAMES.len());
        assert_eq!(f[1], 0.0);
        assert_eq!(f[4], 0.0);
        assert_eq!(f[9], 0.0);
        assert_eq!(f[10], 1.0);
    }

    #[test]
    fn full_mask_equals_no_mask() {
        let img = Grid::from_fn(12, 12, |y, x| ((y * 5 + x * 3) % 13) as f32 / 13.0);
        let a = radiomics_features(&img, None).unwrap();
        let b = radiomics_features(&img, Some(&Grid::filled(12, 12, 1.0))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_region_is_excluded() {
        let img = Grid::filled(8, 8, 0.5);
        let mut mask = Grid::zeros(8, 8);
        mask.set(0, 0, 1.0);
        mask.set(0, 1, 1.0);
        assert_eq!(radiomics_features(&img, Some(&mask)).unwrap(), None);
    }

    /// 8×8 vertical stripes of width 2 alternating between levels 0 and 31.
    /// Horizontally, of the 7 pairs per row, 4 are same-level and 3 cross
    /// stripes; vertically all 7 pairs per column are same-level.
    #[test]
    fn two_level_pattern_matches_hand_tally() {
        let img = Grid::from_fn(8, 8, |_, x| if (x / 2) % 2 == 0 { 0.0 } else { 1.0 });
        let inside = vec![true; 64];
        let p0 = glcm(&img, &inside, 0, 1).unwrap();
        let l = GLCM_LEVELS;
        // 56 ordered pairs, symmetric → 112 counts; 24 crossing pairs → 48.
        assert!((p0[31] - 24.0 / 112.0).abs() < 1e-12);
        assert!((p0[31 * l] - 24.0 / 112.0).abs() < 1e-12);
        assert!((p0[0] + p0[31 * l + 31] - 64.0 / 112.0).abs() < 1e-12);
        let f0 = glcm_features(&p0);
        assert!((f0[0] - 48.0 / 112.0 * 961.0).abs() < 1e-9);
        let p90 = glcm(&img, &inside, 1, 0).unwrap();
        let f90 = glcm_features(&p90);
        assert_eq!(f90[0], 0.0);
        assert_eq!(f90[1], 1.0);

        let all = radiomics_features(&img, None).unwrap().unwrap();
        assert!((all[9] - (f0[0] + f90[0]) / 2.0).abs() < 1e-12);
        assert!((all[0] - 0.5).abs() < 1e-12);
        assert!((all[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_centres_reference() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let z = ZScore::fit(&rows).apply(&rows);
        assert_eq!(z, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
    }
}
