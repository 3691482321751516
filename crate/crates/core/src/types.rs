//! Core image-domain types: RGB images in [0,1], binary masks, and the
//! five-field sample record tying an anomaly image to its decompositions.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// H×W×3 pixels in [0,1] (file domain).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Self {
        Image { pixels }
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    pixels[[y, x, c]] = rgb[c];
                }
            }
        }
        Image { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CoreError::Data("image values outside [0,1]".into()));
        }
        Ok(())
    }

    /// 8-bit quantization as applied once at write time.
    pub fn quantize(&self) -> Image {
        Image {
            pixels: self.pixels.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0),
        }
    }

    /// Luma-style grayscale (equal-weight channel mean).
    pub fn grayscale(&self) -> Array2<f64> {
        let (h, w) = (self.height(), self.width());
        let mut g = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                g[[y, x]] = (self.pixels[[y, x, 0]] + self.pixels[[y, x, 1]] + self.pixels[[y, x, 2]]) / 3.0;
            }
        }
        g
    }

    /// Keep pixels under the mask, zero elsewhere.
    pub fn masked(&self, mask: &BinaryMask) -> Image {
        let mut out = self.clone();
        for y in 0..self.height() {
            for x in 0..self.width() {
                if mask.pixels[[y, x]] == 0 {
                    for c in 0..3 {
                        out.pixels[[y, x, c]] = 0.0;
                    }
                }
            }
        }
        out
    }

    /// Keep pixels outside the mask, zero under it.
    pub fn masked_complement(&self, mask: &BinaryMask) -> Image {
        let mut out = self.clone();
        for y in 0..self.height() {
            for x in 0..self.width() {
                if mask.pixels[[y, x]] != 0 {
                    for c in 0..3 {
                        out.pixels[[y, x, c]] = 0.0;
                    }
                }
            }
        }
        out
    }
}

/// H×W mask with values in {0,1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub pixels: Array2<u8>,
}

impl BinaryMask {
    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask { pixels: Array2::zeros((h, w)) }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn subset_of(&self, other: &BinaryMask) -> bool {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .all(|(&a, &b)| a == 0 || b != 0)
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    pub fn union_area(&self, other: &BinaryMask) -> usize {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .filter(|(&a, &b)| a != 0 || b != 0)
            .count()
    }

    /// Intersection over union; 1.0 when both masks are empty.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let u = self.union_area(other);
        if u == 0 {
            1.0
        } else {
            self.intersection_area(other) as f64 / u as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Disk,
    RoundedSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyType {
    Scratch,
    Spot,
    Crack,
    Missing,
}

impl AnomalyType {
    pub fn label(&self) -> &'static str {
        match self {
            AnomalyType::Scratch => "scratch",
            AnomalyType::Spot => "spot",
            AnomalyType::Crack => "crack",
            AnomalyType::Missing => "missing",
        }
    }
}

/// One anomaly sample: whole image I, anomaly mask M_a, anomaly part
/// I_a = I⊙M_a, object mask M_f, background I_b = (1−M_f)⊙I.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub image: Image,
    pub anomaly_mask: BinaryMask,
    pub anomaly_part: Image,
    pub object_mask: BinaryMask,
    pub background: Image,
    pub anomaly_type: String,
    pub seed: u64,
}
