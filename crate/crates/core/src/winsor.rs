//! Layer-wise aggregation of Grad-CAM maps with percentile-clipped importances.
//!
//! Pipeline, given one [`LayerGradCam`] per conv layer:
//!
//! 1. every layer map is resampled to the common canvas `(max H_i, max W_i)`;
//! 2. each layer gets a scalar importance, `ReLU(mean α)` or `ReLU(max α)`;
//! 3. importances above the `p`-th percentile of the positive importances are
//!    clipped down to it (zeros stay zero);
//! 4. positive importances are mapped affinely into `[L, H]`;
//! 5. the fused map is the importance-weighted sum of the resampled maps.
//!
//! Steps 1 and the Grad-CAM maps themselves do not depend on `p`, so
//! [`LayerStack`] computes them once and reuses them across `p` values.

use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcam::{all_layer_gradcams, LayerCapture, LayerGradCam};
use crate::tensor::{check_percentile, exact_sum, quantile_sorted, resize, Interp, Tensor};

/// Reduction of a layer's channel weights to one importance score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(Error::invalid(format!("unknown aggregation `{other}` (expected mean or max)"))),
        }
    }
}

/// Where the min/max of the importance normalization come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeSource {
    /// Min and max of the positive importances before clipping.
    #[default]
    PreClip,
    /// Min of the positive importances, max of the clipped importances (`T`).
    PostClip,
}

impl RangeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RangeSource::PreClip => "pre_clip",
            RangeSource::PostClip => "post_clip",
        }
    }
}

impl FromStr for RangeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_clip" => Ok(RangeSource::PreClip),
            "post_clip" => Ok(RangeSource::PostClip),
            other => Err(Error::invalid(format!("unknown range source `{other}` (expected pre_clip or post_clip)"))),
        }
    }
}

/// Output range `[low, high]` for positive layer weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub low: f64,
    pub high: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { low: 0.1, high: 1.0 }
    }
}

impl Bounds {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        let b = Bounds { low, high };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && 0.0 <= self.low && self.low < self.high) {
            return Err(Error::invalid(format!(
                "bounds must satisfy 0 <= L < H, got ({}, {})",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

impl FromStr for Bounds {
    type Err = Error;

    /// Parses `"L,H"`.
    fn from_str(s: &str) -> Result<Self> {
        let (l, h) = s
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("bounds must look like `L,H`, got `{s}`")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad bound `{v}`")))
        };
        Bounds::new(parse(l)?, parse(h)?)
    }
}

/// Everything that selects one heatmap out of a [`LayerStack`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinsorParams {
    pub p: f64,
    pub aggregation: Aggregation,
    pub interp: Interp,
    pub bounds: Bounds,
    pub range: RangeSource,
}

impl Default for WinsorParams {
    fn default() -> Self {
        WinsorParams {
            p: 50.0,
            aggregation: Aggregation::Mean,
            interp: Interp::Bilinear,
            bounds: Bounds::default(),
            range: RangeSource::PreClip,
        }
    }
}

impl WinsorParams {
    pub fn with_p(self, p: f64) -> Self {
        WinsorParams { p, ..self }
    }
}

/// Raw, clipped and normalized layer importances for one `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub raw: Vec<f64>,
    pub winsorized: Vec<f64>,
    pub normalized: Vec<f64>,
    pub threshold: f64,
    pub p: f64,
    pub aggregation: Aggregation,
    pub bounds: Bounds,
    pub range: RangeSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    /// Every layer importance is zero: the fused map is all zeros.
    NoPositiveImportance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WinsorCamResult {
    pub fused: Tensor,
    pub per_layer_maps: Vec<Tensor>,
    pub importance: ImportanceVector,
    pub common_size: (usize, usize),
    pub warning: Option<Warning>,
}

/// Per-layer importance: `ReLU(mean α)` or `ReLU(max α)`.
pub fn aggregate_importance(cams: &[LayerGradCam], aggregation: Aggregation) -> Result<Vec<f64>> {
    if cams.is_empty() {
        return Err(Error::invalid("no layers to aggregate"));
    }
    Ok(cams
        .iter()
        .map(|cam| {
            let score = match aggregation {
                Aggregation::Mean => exact_sum(&cam.alpha) / cam.alpha.len() as f64,
                Aggregation::Max => cam.alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            score.max(0.0)
        })
        .collect())
}

/// One-sided upper clipping at the `p`-th percentile of the positive entries.
///
/// Returns the clipped vector and the threshold `T`. Non-positive entries
/// come out as exactly 0; with no positive entries at all, everything is 0
/// and `T` is reported as 0.
pub fn winsorize(gamma: &[f64], p: f64) -> Result<(Vec<f64>, f64)> {
    check_percentile(p)?;
    let mut positive: Vec<f64> = gamma.iter().copied().filter(|&g| g > 0.0).collect();
    if positive.is_empty() {
        return Ok((vec![0.0; gamma.len()], 0.0));
    }
    positive.sort_by(f64::total_cmp);
    let t = quantile_sorted(&positive, p);
    let clipped = gamma
        .iter()
        .map(|&g| if g > 0.0 { g.min(t) } else { 0.0 })
        .collect();
    Ok((clipped, t))
}

/// Maps positive clipped importances into `[L, H]`:
/// `L + (v - x_min) / (x_max - x_min) * (H - L)`; zeros stay zero.
///
/// When `x_min == x_max` every positive entry gets `H`.
pub fn normalize_importance(clipped: &[f64], x_min: f64, x_max: f64, bounds: Bounds) -> Result<Vec<f64>> {
    bounds.validate()?;
    if !(x_min <= x_max) {
        return Err(Error::invalid(format!("x_min {x_min} exceeds x_max {x_max}")));
    }
    let span = x_max - x_min;
    Ok(clipped
        .iter()
        .map(|&v| {
            if v <= 0.0 {
                0.0
            } else if span == 0.0 {
                bounds.high
            } else {
                let r = ((v - x_min) / span).clamp(0.0, 1.0);
                (bounds.low + r * (bounds.high - bounds.low)).clamp(bounds.low, bounds.high)
            }
        })
        .collect())
}

/// Clipping and normalization of an importance vector for one parameter set.
pub fn importance_vector(raw: Vec<f64>, p: f64, aggregation: Aggregation, bounds: Bounds, range: RangeSource) -> Result<ImportanceVector> {
    let (winsorized, threshold) = winsorize(&raw, p)?;
    let positive = raw.iter().copied().filter(|&g| g > 0.0);
    let x_min = positive.clone().fold(f64::INFINITY, f64::min);
    let normalized = if x_min.is_finite() {
        let x_max = match range {
            RangeSource::PreClip => positive.fold(f64::NEG_INFINITY, f64::max),
            RangeSource::PostClip => winsorized.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        normalize_importance(&winsorized, x_min, x_max, bounds)?
    } else {
        bounds.validate()?;
        vec![0.0; raw.len()]
    };
    Ok(ImportanceVector {
        raw,
        winsorized,
        normalized,
        threshold,
        p,
        aggregation,
        bounds,
        range,
    })
}

/// Common canvas: the largest height and the largest width over all layers.
pub fn common_size(cams: &[LayerGradCam]) -> Result<(usize, usize)> {
    if cams.is_empty() {
        return Err(Error::invalid("no layers"));
    }
    Ok(cams.iter().map(|c| c.size()).fold((0, 0), |(h, w), (hi, wi)| (h.max(hi), w.max(wi))))
}

/// Resamples every layer map to the common canvas.
pub fn interpolate_maps(cams: &[LayerGradCam], interp: Interp) -> Result<Vec<Tensor>> {
    let (h, w) = common_size(cams)?;
    cams.iter().map(|c| resize(&c.map, h, w, interp)).collect()
}

/// Weighted sum of equally-sized maps in layer order. Zero weights are skipped
/// so their layers contribute exactly nothing.
pub fn weighted_sum(maps: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if maps.len() != weights.len() {
        return Err(Error::invalid(format!("{} maps but {} weights", maps.len(), weights.len())));
    }
    let first = maps.first().ok_or_else(|| Error::invalid("no maps to fuse"))?;
    let mut acc = vec![0.0; first.len()];
    for (map, &wt) in maps.iter().zip(weights) {
        if map.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                context: "fused maps",
                expected: first.shape().to_vec(),
                actual: map.shape().to_vec(),
            });
        }
        if wt == 0.0 {
            continue;
        }
        for (dst, &v) in acc.iter_mut().zip(map.data()) {
            *dst += wt * v;
        }
    }
    Tensor::new(first.shape().to_vec(), acc)
}

/// Resamples the layer maps and fuses them with `importance.normalized`.
pub fn fuse(cams: &[LayerGradCam], importance: &ImportanceVector, interp: Interp) -> Result<WinsorCamResult> {
    if importance.normalized.len() != cams.len() {
        return Err(Error::invalid(format!(
            "{} importance weights for {} layers",
            importance.normalized.len(),
            cams.len()
        )));
    }
    let common = common_size(cams)?;
    let maps = interpolate_maps(cams, interp)?;
    assemble(maps, importance.clone(), common)
}

fn assemble(maps: Vec<Tensor>, importance: ImportanceVector, common_size: (usize, usize)) -> Result<WinsorCamResult> {
    let fused = weighted_sum(&maps, &importance.normalized)?;
    let warning = importance
        .raw
        .iter()
        .all(|&g| g <= 0.0)
        .then_some(Warning::NoPositiveImportance);
    Ok(WinsorCamResult {
        fused,
        per_layer_maps: maps,
        importance,
        common_size,
        warning,
    })
}

/// Unweighted mean of the resampled layer maps.
pub fn naive_mean_baseline(cams: &[LayerGradCam], interp: Interp) -> Result<Tensor> {
    mean_of(&interpolate_maps(cams, interp)?)
}

fn mean_of(maps: &[Tensor]) -> Result<Tensor> {
    let n = maps.len() as f64;
    Ok(weighted_sum(maps, &vec![1.0; maps.len()])?.map(|v| v / n))
}

/// Grad-CAM of the last conv layer, resampled to the common canvas.
pub fn final_layer_baseline(cams: &[LayerGradCam], interp: Interp) -> Result<Tensor> {
    let (h, w) = common_size(cams)?;
    let last = cams.last().expect("non-empty");
    resize(&last.map, h, w, interp)
}

/// Full pipeline on captured layers.
pub fn winsor_cam(layers: &[LayerCapture], params: &WinsorParams) -> Result<WinsorCamResult> {
    LayerStack::new(layers)?.run(params)
}

/// The `p`-independent prefix of the pipeline: per-layer Grad-CAM maps and
/// their resampled versions, computed once per kernel and then shared.
#[derive(Debug)]
pub struct LayerStack {
    cams: Vec<LayerGradCam>,
    common: (usize, usize),
    bilinear: OnceLock<Vec<Tensor>>,
    nearest: OnceLock<Vec<Tensor>>,
}

impl LayerStack {
    pub fn new(layers: &[LayerCapture]) -> Result<Self> {
        Self::from_cams(all_layer_gradcams(layers)?)
    }

    pub fn from_cams(cams: Vec<LayerGradCam>) -> Result<Self> {
        let common = common_size(&cams)?;
        Ok(LayerStack {
            cams,
            common,
            bilinear: OnceLock::new(),
            nearest: OnceLock::new(),
        })
    }

    pub fn cams(&self) -> &[LayerGradCam] {
        &self.cams
    }

    pub fn common_size(&self) -> (usize, usize) {
        self.common
    }

    pub fn len(&self) -> usize {
        self.cams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cams.is_empty()
    }

    /// Layer maps resampled to the common canvas with `interp`.
    pub fn interpolated(&self, interp: Interp) -> &[Tensor] {
        let cell = match interp {
            Interp::Bilinear => &self.bilinear,
            Interp::Nearest => &self.nearest,
        };
        cell.get_or_init(|| interpolate_maps(&self.cams, interp).expect("layer maps are valid 2-D tensors"))
    }

    pub fn importance(&self, params: &WinsorParams) -> Result<ImportanceVector> {
        let raw = aggregate_importance(&self.cams, params.aggregation)?;
        importance_vector(raw, params.p, params.aggregation, params.bounds, params.range)
    }

    pub fn run(&self, params: &WinsorParams) -> Result<WinsorCamResult> {
        let importance = self.importance(params)?;
        assemble(self.interpolated(params.interp).to_vec(), importance, self.common)
    }

    pub fn naive_mean(&self, interp: Interp) -> Result<Tensor> {
        mean_of(self.interpolated(interp))
    }

    pub fn final_layer(&self, interp: Interp) -> Tensor {
        self.interpolated(interp).last().expect("non-empty").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::minmax_normalize;
    use proptest::prelude::*;

    fn cam(alpha: Vec<f64>, map: Tensor) -> LayerGradCam {
        LayerGradCam { layer_index: 0, alpha, map }
    }

    #[test]
    fn mean_and_max_aggregation() {
        let cams = vec![
            cam(vec![-1.0, 1.0], Tensor::zeros(vec![1, 1])),
            cam(vec![-2.0, -0.5], Tensor::zeros(vec![1, 1])),
            cam(vec![2.0, 4.0], Tensor::zeros(vec![1, 1])),
        ];
        assert_eq!(aggregate_importance(&cams, Aggregation::Mean).unwrap(), vec![0.0, 0.0, 3.0]);
        assert_eq!(aggregate_importance(&cams, Aggregation::Max).unwrap(), vec![1.0, 0.0, 4.0]);
        assert!(aggregate_importance(&[], Aggregation::Mean).is_err());
    }

    #[test]
    fn winsorize_worked_example() {
        let (clipped, t) = winsorize(&[0.0, 0.2, 0.5, 1.0, 9.0], 50.0).unwrap();
        assert!((t - 0.75).abs() < 1e-15);
        let want = [0.0, 0.2, 0.5, 0.75, 0.75];
        for (c, w) in clipped.iter().zip(want) {
            assert!((c - w).abs() < 1e-15);
        }
        let g = [0.0, 0.3, 2.0, 0.7];
        let (clipped, t) = winsorize(&g, 100.0).unwrap();
        assert_eq!(t, 2.0);
        assert_eq!(clipped, g.to_vec());
        assert_eq!(winsorize(&[0.0, 0.0], 30.0).unwrap(), (vec![0.0, 0.0], 0.0));
        assert!(winsorize(&g, 100.5).is_err());
        assert!(winsorize(&g, -1.0).is_err());
    }

    #[test]
    fn normalize_worked_example() {
        let n = normalize_importance(&[0.0, 0.2, 0.5, 0.75, 0.75], 0.2, 9.0, Bounds::default()).unwrap();
        // 0.1 + (v - 0.2) / 8.8 * 0.9
        let want = [0.0, 0.1, 0.1 + 0.3 / 8.8 * 0.9, 0.1 + 0.55 / 8.8 * 0.9, 0.1 + 0.55 / 8.8 * 0.9];
        for (g, w) in n.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
        assert!((n[2] - 0.130_681_818_181_818_2).abs() < 1e-15);
        assert!((n[3] - 0.156_25).abs() < 1e-15);
    }

    #[test]
    fn degenerate_range_assigns_high() {
        let n = normalize_importance(&[0.0, 0.4, 0.0], 0.4, 0.4, Bounds::default()).unwrap();
        assert_eq!(n, vec![0.0, 1.0, 0.0]);
        let iv = importance_vector(vec![0.6; 4], 100.0, Aggregation::Mean, Bounds::default(), RangeSource::PreClip).unwrap();
        assert_eq!(iv.normalized, vec![1.0; 4]);
    }

    #[test]
    fn bounds_are_validated() {
        assert!(Bounds::new(0.5, 0.5).is_err());
        assert!(Bounds::new(-0.1, 1.0).is_err());
        assert_eq!("0.2, 0.9".parse::<Bounds>().unwrap(), Bounds { low: 0.2, high: 0.9 });
        assert!("0.2".parse::<Bounds>().is_err());
    }

    #[test]
    fn post_clip_range_uses_threshold() {
        let raw = vec![0.0, 0.2, 0.5, 1.0, 9.0];
        let iv = importance_vector(raw, 50.0, Aggregation::Mean, Bounds::default(), RangeSource::PostClip).unwrap();
        // x_max = T = 0.75, so the clipped layers reach the top of the range
        assert_eq!(iv.normalized[4], 1.0);
        assert_eq!(iv.normalized[3], 1.0);
        assert_eq!(iv.normalized[1], 0.1);
    }

    fn unit_cams() -> Vec<LayerGradCam> {
        vec![
            cam(vec![1.0], Tensor::from_rows(&[&[0.0, 1.0, 2.0, 3.0], &[4.0, 5.0, 6.0, 7.0]])),
            cam(vec![2.0], Tensor::from_rows(&[&[1.0, 3.0]])),
            cam(vec![3.0], Tensor::from_rows(&[&[2.0], &[0.5]])),
        ]
    }

    fn with_weights(cams: &[LayerGradCam], w: Vec<f64>) -> ImportanceVector {
        assert!(w.len() <= cams.len());
        ImportanceVector {
            raw: w.clone(),
            winsorized: w.clone(),
            normalized: w,
            threshold: 0.0,
            p: 100.0,
            aggregation: Aggregation::Mean,
            bounds: Bounds::default(),
            range: RangeSource::PreClip,
        }
    }

    #[test]
    fn fuse_canvas_and_unit_weights() {
        let cams = unit_cams();
        let zero = fuse(&cams, &with_weights(&cams, vec![0.0; 3]), Interp::Bilinear).unwrap();
        assert_eq!(zero.common_size, (2, 4));
        assert!(zero.fused.data().iter().all(|&v| v == 0.0));

        for interp in [Interp::Bilinear, Interp::Nearest] {
            let one = fuse(&cams, &with_weights(&cams, vec![0.0, 1.0, 0.0]), interp).unwrap();
            assert_eq!(one.fused, resize(&cams[1].map, 2, 4, interp).unwrap());
        }
        assert!(fuse(&cams, &with_weights(&cams[..2], vec![1.0, 1.0]), Interp::Bilinear).is_err());
    }

    #[test]
    fn naive_mean_matches_unit_fuse() {
        let cams = unit_cams();
        let mean = naive_mean_baseline(&cams, Interp::Bilinear).unwrap();
        let ones = fuse(&cams, &with_weights(&cams, vec![1.0; 3]), Interp::Bilinear).unwrap();
        for (m, f) in mean.data().iter().zip(ones.fused.data()) {
            assert!((m - f / 3.0).abs() <= 1e-12);
        }
        let single = &cams[..1];
        assert_eq!(naive_mean_baseline(single, Interp::Nearest).unwrap(), cams[0].map);
        let twin = vec![cams[1].clone(), cams[1].clone()];
        assert_eq!(naive_mean_baseline(&twin, Interp::Nearest).unwrap(), cams[1].map);
    }

    #[test]
    fn all_zero_importance_warns() {
        let cams = vec![
            cam(vec![-1.0], Tensor::full(vec![2, 2], 1.0)),
            cam(vec![-3.0], Tensor::full(vec![1, 1], 2.0)),
        ];
        let stack = LayerStack::from_cams(cams).unwrap();
        let r = stack.run(&WinsorParams::default()).unwrap();
        assert_eq!(r.warning, Some(Warning::NoPositiveImportance));
        assert_eq!(r.importance.threshold, 0.0);
        assert!(r.fused.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_collapse() {
        let map = Tensor::from_rows(&[&[0.0, 1.5], &[3.0, 0.25]]);
        let stack = LayerStack::from_cams(vec![cam(vec![0.3, 0.1], map.clone())]).unwrap();
        for p in [0.0, 35.0, 100.0] {
            let r = stack.run(&WinsorParams::default().with_p(p)).unwrap();
            assert_eq!(r.importance.normalized, vec![1.0]);
            assert_eq!(
                minmax_normalize(&r.fused, 1e-12).unwrap(),
                minmax_normalize(&map, 1e-12).unwrap()
            );
        }
    }

    fn gamma_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..5.0, -1.0f64..0.0], 1..20)
    }

    proptest! {
        #[test]
        fn importance_invariants(gamma in gamma_strategy(), p in 0.0f64..=100.0) {
            let raw: Vec<f64> = gamma.iter().map(|g| g.max(0.0)).collect();
            let iv = importance_vector(raw.clone(), p, Aggregation::Mean, Bounds::default(), RangeSource::PreClip).unwrap();
            for i in 0..raw.len() {
                prop_assert!(iv.winsorized[i] >= 0.0);
                if raw[i] > 0.0 {
                    prop_assert_eq!(iv.winsorized[i], raw[i].min(iv.threshold));
                    prop_assert!(iv.normalized[i] >= 0.1 && iv.normalized[i] <= 1.0);
                } else {
                    prop_assert_eq!(iv.winsorized[i], 0.0);
                    prop_assert_eq!(iv.normalized[i], 0.0);
                }
            }
        }

        #[test]
        fn fused_is_positively_homogeneous(scale in 0.01f64..100.0, p in 0.0f64..=100.0) {
            let cams = unit_cams();
            let scaled: Vec<LayerGradCam> = cams.iter().map(|c| cam(c.alpha.clone(), c.map.scale(scale))).collect();
            let params = WinsorParams::default().with_p(p);
            let a = LayerStack::from_cams(cams).unwrap().run(&params).unwrap();
            let b = LayerStack::from_cams(scaled).unwrap().run(&params).unwrap();
            prop_assert_eq!(&a.importance, &b.importance);
            for (x, y) in a.fused.data().iter().zip(b.fused.data()) {
                prop_assert!((x * scale - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
