//! Aligned color, depth and validity rasters for one view.

use crate::error::{Error, Result};
use crate::geometry::DepthMap;

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, c: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![c; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.data[y * self.width + x] = c;
    }

    /// Zero pixels where `mask` is unset.
    pub fn masked(&self, mask: &Mask) -> ColorImage {
        let data = self
            .data
            .iter()
            .zip(&mask.data)
            .map(|(c, &m)| if m { *c } else { [0.0; 3] })
            .collect();
        ColorImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Binary validity raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// `M(p) = 1` iff `D(p) > 0`.
    pub fn from_depth(depth: &DepthMap) -> Self {
        Self {
            width: depth.width,
            height: depth.height,
            data: depth.data.iter().map(|&d| d > 0.0).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }
}

/// Color image, depth map and validity mask of one view at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub color: ColorImage,
    pub depth: DepthMap,
    pub mask: Mask,
}

impl Frame {
    /// Builds a frame whose mask is derived from the depth map.
    pub fn new(color: ColorImage, depth: DepthMap) -> Result<Self> {
        if color.width != depth.width || color.height != depth.height {
            return Err(Error::Config(format!(
                "color {}x{} and depth {}x{} differ in size",
                color.width, color.height, depth.width, depth.height
            )));
        }
        let mask = Mask::from_depth(&depth);
        Ok(Self { color, depth, mask })
    }

    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }
}
