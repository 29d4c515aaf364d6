//! Binarization and localization metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{minmax_normalize, Tensor};

/// Epsilon of the min-max normalization used before center-of-mass.
pub const COM_EPSILON: f64 = 1e-6;

/// Epsilon of the min-max normalization used for display and binarization.
/// Small enough that normalization is scale-invariant to ~1e-12.
pub const DISPLAY_EPSILON: f64 = 1e-12;

pub const OTSU_BINS: usize = 256;

/// Strictly binary `H×W` mask stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {height}×{width} cannot hold {} cells",
                bits.len()
            )));
        }
        Ok(BinaryMask { height, width, bits })
    }

    /// Accepts a 2-D tensor whose values are exactly 0 or 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let bits = t
            .data()
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::invalid(format!("mask value {v} is not 0 or 1")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(BinaryMask { height: h, width: w, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts_unchecked(
            vec![self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Quantizes the normalized map into `0..=255`.
pub fn quantize_256(map: &Tensor) -> Result<Vec<u8>> {
    let norm = minmax_normalize(map, DISPLAY_EPSILON)?;
    Ok(norm.data().iter().map(|&v| unit_to_u8(v)).collect())
}

/// `round(clamp(v, 0, 1) * 255)`.
pub fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Otsu binarization.
///
/// The map is min-max normalized and quantized to 256 levels. The returned
/// level `t` maximizes the between-class variance of `{q <= t}` vs `{q > t}`
/// (lowest `t` on ties) and the mask is `q > t`. A constant map yields
/// threshold 0 and an empty mask.
pub fn otsu_threshold(map: &Tensor) -> Result<(u8, BinaryMask)> {
    let (h, w) = map.dims2()?;
    let q = quantize_256(map)?;
    let t = otsu_level(&q);
    let bits = q.iter().map(|&v| v > t).collect();
    Ok((t, BinaryMask::new(h, w, bits)?))
}

/// Otsu level of already-quantized samples.
pub fn otsu_level(levels: &[u8]) -> u8 {
    let mut hist = [0u64; OTSU_BINS];
    for &v in levels {
        hist[v as usize] += 1;
    }
    let total = levels.len() as f64;
    let sum_total: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();

    let mut best_t = 0u8;
    let mut best_var = 0.0;
    let mut w_b = 0.0;
    let mut sum_b = 0.0;
    for (t, &count) in hist.iter().enumerate() {
        w_b += count as f64;
        sum_b += t as f64 * count as f64;
        let w_f = total - w_b;
        if w_b == 0.0 || w_f == 0.0 {
            continue;
        }
        let diff = sum_b / w_b - (sum_total - sum_b) / w_f;
        let var = w_b * w_f * diff * diff;
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    best_t
}

/// `TP / (TP + FP + FN)`. Two empty masks score 1.
pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::ShapeMismatch {
            context: "iou masks",
            expected: vec![truth.height, truth.width],
            actual: vec![pred.height, pred.width],
        });
    }
    let (mut tp, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
        tp += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { tp as f64 / union as f64 })
}

/// Intensity-weighted centroid in pixel coordinates (`x` = column, `y` = row).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterOfMass {
    pub x: f64,
    pub y: f64,
}

/// Centroid of the min-max normalized map. A map with no mass after
/// normalization (a constant map) returns the geometric center.
pub fn center_of_mass(map: &Tensor, epsilon: f64) -> Result<CenterOfMass> {
    let (h, w) = map.dims2()?;
    let norm = minmax_normalize(map, epsilon)?;
    let (mut total, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let v = norm.at2(i, j);
            total += v;
            sx += j as f64 * v;
            sy += i as f64 * v;
        }
    }
    if total > 0.0 {
        Ok(CenterOfMass { x: sx / total, y: sy / total })
    } else {
        Ok(CenterOfMass {
            x: (w - 1) as f64 / 2.0,
            y: (h - 1) as f64 / 2.0,
        })
    }
}

pub fn com_distance(a: CenterOfMass, b: CenterOfMass) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// IoU of the Otsu mask and the CoM distance of the raw map, both against `truth`.
pub fn localization(map: &Tensor, truth: &BinaryMask) -> Result<Localization> {
    let (_, pred) = otsu_threshold(map)?;
    let iou = iou(&pred, truth)?;
    let com = center_of_mass(map, COM_EPSILON)?;
    let truth_com = center_of_mass(&truth.to_tensor(), COM_EPSILON)?;
    Ok(Localization {
        iou,
        com_distance_px: com_distance(com, truth_com),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub iou: f64,
    pub com_distance_px: f64,
}
