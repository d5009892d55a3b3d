use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2-d field of `f32` values. The unconstrained workhorse type:
/// slices, subtraction residuals, masks and model outputs are all grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; errors on shape mismatch.
    pub fn zip_with(&self, other: &Grid, f: impl Fn(f32, f32) -> f32) -> Result<Grid> {
        self.ensure_same_shape(other, "zip_with")?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Grid {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Sub-grid `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Grid> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Grid::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x)))
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, h: usize, w: usize) -> Grid {
        if (h, w) == self.shape() {
            return self.clone();
        }
        let ty = crate::autodiff::kernels::bilinear_taps(self.height, h);
        let tx = crate::autodiff::kernels::bilinear_taps(self.width, w);
        Grid::from_fn(h, w, |oy, ox| {
            let (y0, y1, fy) = ty[oy];
            let (x0, x1, fx) = tx[ox];
            let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
            let bot = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
