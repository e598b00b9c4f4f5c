use crate::error::{Error, Result};

/// Pixel grid shared by patterns, scenes and reconstructions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub pixel_pitch_um: f64,
}

impl Grid {
    pub fn new(height: usize, width: usize, pixel_pitch_um: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("grid must have nonzero area"));
        }
        if !(pixel_pitch_um > 0.0 && pixel_pitch_um.is_finite()) {
            return Err(Error::invalid("pixel pitch must be positive"));
        }
        Ok(Self { height, width, pixel_pitch_um })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Field of view (width, height) in micrometres.
    pub fn fov_um(&self) -> (f64, f64) {
        (self.width as f64 * self.pixel_pitch_um, self.height as f64 * self.pixel_pitch_um)
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Dense row-major `f64` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Mean of each column, i.e. the profile along the horizontal axis.
    pub fn column_profile(&self) -> Vec<f64> {
        let mut prof = vec![0.0; self.width];
        for row in self.data.chunks_exact(self.width) {
            for (p, v) in prof.iter_mut().zip(row) {
                *p += v;
            }
        }
        prof.iter_mut().for_each(|p| *p /= self.height as f64);
        prof
    }

    /// Linear min-max rescale into [0, 1]; a flat image maps to zeros.
    pub fn normalized(&self) -> Image {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let data = if span > 0.0 {
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Image { height: self.height, width: self.width, data }
    }

    pub fn scaled(&self, factor: f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}
