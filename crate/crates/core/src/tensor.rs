//! Dense row-major tensors and the spatial primitives shared by the pipeline.
//!
//! Everything here is 64-bit. Reductions run in plain index order so that
//! repeated runs are bit-identical.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of finite `f64` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and that every
    /// value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        assert!(value.is_finite());
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Builds an `rows × cols` tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == w), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![h, w], data).expect("valid rows")
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(height, width)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::invalid(format!(
                "expected a 2-D map, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(channels, height, width)` of a 3-D tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Channel `k` of a C×H×W tensor as a flat H·W slice.
    pub fn channel(&self, k: usize) -> &[f64] {
        let (_, h, w) = self.dims3().expect("3-D tensor");
        &self.data[k * h * w..(k + 1) * h * w]
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Spatial resampling kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    #[default]
    Bilinear,
    Nearest,
}

impl Interp {
    pub fn as_str(self) -> &'static str {
        match self {
            Interp::Bilinear => "bilinear",
            Interp::Nearest => "nearest",
        }
    }
}

impl std::str::FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Interp::Bilinear),
            "nearest" => Ok(Interp::Nearest),
            other => Err(Error::invalid(format!(
                "unknown interpolation `{other}` (expected bilinear or nearest)"
            ))),
        }
    }
}

fn check_resize(map: &Tensor, h_out: usize, w_out: usize) -> Result<(usize, usize)> {
    let (h, w) = map.dims2()?;
    if h_out == 0 || w_out == 0 {
        return Err(Error::invalid(format!(
            "cannot resample to zero-sized {h_out}×{w_out}"
        )));
    }
    Ok((h, w))
}

/// Resamples a 2-D map with the selected kernel.
pub fn resize(map: &Tensor, h_out: usize, w_out: usize, interp: Interp) -> Result<Tensor> {
    match interp {
        Interp::Bilinear => interp_bilinear(map, h_out, w_out),
        Interp::Nearest => interp_nearest(map, h_out, w_out),
    }
}

/// Source sample positions for one axis under the half-pixel-center
/// convention: `src = (dst + 0.5) * in / out - 0.5`, clamped to the valid
/// range. Returns `(lower index, upper index, fraction)` per output index.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

// a + t(b - a) is exact for a == b and stays inside [min(a,b), max(a,b)]
// once clamped, which keeps the no-overshoot bound free of rounding slop.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    if a <= b {
        v.clamp(a, b)
    } else {
        v.clamp(b, a)
    }
}

/// Bilinear resampling with half-pixel centers (no corner alignment).
pub fn interp_bilinear(map: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (h, w) = check_resize(map, h_out, w_out)?;
    if (h, w) == (h_out, w_out) {
        return Ok(map.clone());
    }
    let rows = bilinear_taps(h, h_out);
    let cols = bilinear_taps(w, w_out);
    let src = map.data();
    let mut out = Vec::with_capacity(h_out * w_out);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = lerp(src[r0 * w + c0], src[r0 * w + c1], fx);
            let bottom = lerp(src[r1 * w + c0], src[r1 * w + c1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![h_out, w_out], out))
}

/// Index of the source cell whose center is nearest to output cell `d`:
/// `floor((d + 0.5) * in / out)`, computed in integers.
fn nearest_index(d: usize, n_in: usize, n_out: usize) -> usize {
    (((2 * d + 1) * n_in) / (2 * n_out)).min(n_in - 1)
}

/// Nearest-neighbour resampling using the nearest-center rule.
pub fn interp_nearest(map: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (h, w) = check_resize(map, h_out, w_out)?;
    if (h, w) == (h_out, w_out) {
        return Ok(map.clone());
    }
    let src = map.data();
    let cols: Vec<usize> = (0..w_out).map(|d| nearest_index(d, w, w_out)).collect();
    let mut out = Vec::with_capacity(h_out * w_out);
    for r in 0..h_out {
        let row = nearest_index(r, h, h_out) * w;
        out.extend(cols.iter().map(|&c| src[row + c]));
    }
    Ok(Tensor::from_parts_unchecked(vec![h_out, w_out], out))
}

/// `(M - min) / (max - min + epsilon)`. A constant map becomes all zeros.
pub fn minmax_normalize(map: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    let lo = map.min();
    let denom = map.max() - lo + epsilon;
    Ok(map.map(|v| (v - lo) / denom))
}

/// Linear-interpolation quantile: rank `(p / 100) * (n - 1)` into the sorted
/// values. `p = 0` gives the minimum, `p = 100` the maximum.
pub fn quantile_linear(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty set"));
    }
    check_percentile(p)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, p))
}

pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (rank.ceil() as usize).min(sorted.len() - 1);
    lerp(sorted[lo], sorted[hi], rank - lo as f64)
}

/// Correctly rounded sum of `values` (Shewchuk's exact partials), so the
/// result does not depend on summation order.
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    // Round the partials (ascending magnitude, non-overlapping) to one double.
    let mut hi = 0.0;
    if let Some(last) = partials.pop() {
        hi = last;
        let mut lo = 0.0;
        while let Some(y) = partials.pop() {
            let x = hi;
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // half-way case: nudge toward the remaining partials' sign
        if let Some(&next) = partials.last() {
            if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
                let y = lo * 2.0;
                let x = hi + y;
                if y == x - hi {
                    hi = x;
                }
            }
        }
    }
    hi
}

pub(crate) fn check_percentile(p: f64) -> Result<()> {
    if (0.0..=100.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("percentile p must lie in [0, 100], got {p}")))
    }
}
