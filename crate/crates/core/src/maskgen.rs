//! Binary-mask extraction from anomaly-part images: threshold on max-channel
//! intensity, morphological close, then small-component removal. Also the
//! binary morphology and connected-component helpers shared with the data
//! generator.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::types::{BinaryMask, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskExtractionConfig {
    /// Threshold on max-channel intensity.
    pub threshold: f64,
    /// Radius of the square structuring element for the closing step.
    pub morph_radius: usize,
    /// Components smaller than this are dropped.
    pub min_component_area: usize,
}

impl Default for MaskExtractionConfig {
    fn default() -> Self {
        MaskExtractionConfig { threshold: 0.05, morph_radius: 1, min_component_area: 4 }
    }
}

/// Dilate by a (2r+1)×(2r+1) square structuring element.
pub fn dilate(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as isize;
    let mut out = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            'probe: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize
                        && mask[[ny as usize, nx as usize]] != 0
                    {
                        out[[y as usize, x as usize]] = 1;
                        break 'probe;
                    }
                }
            }
        }
    }
    out
}

/// Erode by a (2r+1)×(2r+1) square structuring element (border counts as 0).
pub fn erode(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as isize;
    let mut out = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut all = true;
            'probe: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize
                        || mask[[ny as usize, nx as usize]] == 0
                    {
                        all = false;
                        break 'probe;
                    }
                }
            }
            if all {
                out[[y as usize, x as usize]] = 1;
            }
        }
    }
    out
}

/// Morphological close: dilate then erode.
pub fn close(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    erode(&dilate(mask, radius), radius)
}

/// 8-connected component labels (0 = background), plus component count.
pub fn connected_components(mask: &Array2<u8>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if mask[[sy, sx]] == 0 || labels[[sy, sx]] != 0 {
                continue;
            }
            next += 1;
            stack.push((sy, sx));
            labels[[sy, sx]] = next;
            while let Some((y, x)) = stack.pop() {
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                        if ny >= 0 && (ny as usize) < h && nx >= 0 && (nx as usize) < w {
                            let (nyu, nxu) = (ny as usize, nx as usize);
                            if mask[[nyu, nxu]] != 0 && labels[[nyu, nxu]] == 0 {
                                labels[[nyu, nxu]] = next;
                                stack.push((nyu, nxu));
                            }
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Remove 8-connected components with area below `min_area`.
pub fn area_filter(mask: &Array2<u8>, min_area: usize) -> Array2<u8> {
    let (labels, n) = connected_components(mask);
    if n == 0 {
        return mask.clone();
    }
    let mut areas = vec![0usize; n + 1];
    for &l in labels.iter() {
        areas[l as usize] += 1;
    }
    let mut out = mask.clone();
    ndarray::Zip::from(&mut out).and(&labels).for_each(|m, &l| {
        if l != 0 && areas[l as usize] < min_area {
            *m = 0;
        }
    });
    out
}

/// Threshold on max-channel intensity, close, drop small components.
/// An empty mask is a valid result.
pub fn extract_mask(anomaly_part: &Image, cfg: &MaskExtractionConfig) -> BinaryMask {
    let (h, w) = (anomaly_part.height(), anomaly_part.width());
    let mut raw = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mx = anomaly_part.pixels[[y, x, 0]]
                .max(anomaly_part.pixels[[y, x, 1]])
                .max(anomaly_part.pixels[[y, x, 2]]);
            if mx > cfg.threshold {
                raw[[y, x]] = 1;
            }
        }
    }
    let closed = close(&raw, cfg.morph_radius);
    BinaryMask { pixels: area_filter(&closed, cfg.min_component_area) }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    pub area: usize,
    pub n_components: usize,
    /// |mask ∧ object| / |mask|; 1.0 for an empty mask by convention.
    pub inside_object_fraction: f64,
}

pub fn mask_stats(mask: &BinaryMask, object_mask: Option<&BinaryMask>) -> Result<MaskStats> {
    if let Some(obj) = object_mask {
        if obj.pixels.dim() != mask.pixels.dim() {
            return Err(CoreError::Shape(format!(
                "mask {:?} vs object mask {:?}",
                mask.pixels.dim(),
                obj.pixels.dim()
            )));
        }
    }
    let area = mask.area();
    let (_, n_components) = connected_components(&mask.pixels);
    let inside_object_fraction = match (area, object_mask) {
        (0, _) => 1.0,
        (_, None) => 1.0,
        (a, Some(obj)) => mask.intersection_area(obj) as f64 / a as f64,
    };
    Ok(MaskStats { area, n_components, inside_object_fraction })
}
