//! Batch pipeline behind the `winsorcam` binary: `compute`, `sweep` and
//! `evaluate`. The HTTP service renders through the same functions, so both
//! front ends emit identical bytes for identical parameters.
//!
//! Frozen CSV columns:
//!
//! * per-record files (`sweep.csv`, `records.csv`):
//!   `bundle_id,method,aggregation,interp,p,iou,com_distance_px,best_iou,best_distance`
//!   (`p` is empty for the two baselines);
//! * `summary.csv`: `split,method,metric,n,mean,std`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bundle::{read_bundle, SaliencyBundle, BUNDLE_EXTENSION};
use crate::error::{Error, Result};
use crate::metrics::{localization, otsu_threshold, BinaryMask, Localization};
use crate::render::{colorize, encode_png, mask_image, render_overlay, DEFAULT_OVERLAY_ALPHA};
use crate::tensor::{check_percentile, resize, Interp, Tensor};
use crate::winsor::{Aggregation, ImportanceVector, LayerStack, WinsorParams};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;

pub const FUSED_FILE: &str = "fused.png";
pub const OVERLAY_FILE: &str = "overlay.png";
pub const BINARY_FILE: &str = "binary.png";
pub const IMPORTANCE_FILE: &str = "importance.json";

/// `{0, 10, …, 100}`
pub fn default_p_grid() -> Vec<f64> {
    (0..=10).map(|i| (i * 10) as f64).collect()
}

/// Parses either a comma list (`0,25,50`) or `start:stop:step` (inclusive).
pub fn parse_p_grid(s: &str) -> Result<Vec<f64>> {
    let num = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad percentile `{v}` in grid `{s}`")))
    };
    let grid = if let [start, stop, step] = s.split(':').collect::<Vec<_>>()[..] {
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || stop < start {
            return Err(Error::invalid(format!("grid `{s}` needs start <= stop and step > 0")));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| start + i as f64 * step).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() {
        return Err(Error::invalid("empty percentile grid"));
    }
    for &p in &grid {
        check_percentile(p)?;
    }
    Ok(grid)
}

/// Rendering knobs on top of [`WinsorParams`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub params: WinsorParams,
    pub alpha: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            params: WinsorParams::default(),
            alpha: DEFAULT_OVERLAY_ALPHA,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        check_percentile(self.params.p)?;
        self.params.bounds.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("overlay alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Fused,
    Overlay,
    Binary,
}

impl View {
    pub fn file_name(self) -> &'static str {
        match self {
            View::Fused => FUSED_FILE,
            View::Overlay => OVERLAY_FILE,
            View::Binary => BINARY_FILE,
        }
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(View::Fused),
            "overlay" => Ok(View::Overlay),
            "binary" => Ok(View::Binary),
            other => Err(Error::invalid(format!("unknown view `{other}` (expected fused, overlay or binary)"))),
        }
    }
}

/// Bundle id: the file name without its extension.
pub fn bundle_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Canvas on which heatmaps are binarized and scored: the mask size if the
/// bundle has a mask, otherwise the image size.
fn eval_canvas(bundle: &SaliencyBundle) -> (usize, usize) {
    match &bundle.mask {
        Some(m) => (m.height(), m.width()),
        None => (bundle.image.shape()[1], bundle.image.shape()[2]),
    }
}

fn on_canvas(bundle: &SaliencyBundle, map: &Tensor, interp: Interp) -> Result<Tensor> {
    let (h, w) = eval_canvas(bundle);
    resize(map, h, w, interp)
}

/// PNG bytes of one view of the fused map.
///
/// * `fused`: colour-mapped fused map on the common layer canvas;
/// * `overlay`: fused map blended over the input image at image resolution;
/// * `binary`: Otsu mask of the fused map, resampled to the scoring canvas.
pub fn render_view(bundle: &SaliencyBundle, stack: &LayerStack, opts: &RenderOptions, view: View) -> Result<Vec<u8>> {
    opts.validate()?;
    let fused = stack.run(&opts.params)?.fused;
    let interp = opts.params.interp;
    let img = match view {
        View::Fused => colorize(&fused)?,
        View::Overlay => render_overlay(&bundle.image, &fused, opts.alpha, interp)?,
        View::Binary => mask_image(&otsu_threshold(&on_canvas(bundle, &fused, interp)?)?.1),
    };
    encode_png(&img)
}

/// The importance document written as `importance.json` and served by the
/// importances endpoint.
pub fn importance_document(id: &str, bundle: &SaliencyBundle, importance: &ImportanceVector) -> serde_json::Value {
    let warning = importance
        .raw
        .iter()
        .all(|&g| g <= 0.0)
        .then_some("no_positive_importance");
    json!({
        "bundle": id,
        "class_index": bundle.manifest.class_index,
        "layers": bundle.layers.iter().map(|l| l.name.as_str()).collect::<Vec<_>>(),
        "p": importance.p,
        "aggregation": importance.aggregation,
        "bounds": importance.bounds,
        "range": importance.range,
        "threshold": importance.threshold,
        "raw": importance.raw,
        "winsorized": importance.winsorized,
        "normalized": importance.normalized,
        "warning": warning,
    })
}

pub fn to_json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

/// Writes the four `compute` artifacts into `out_dir` and returns their paths.
pub fn cmd_compute(bundle_path: &Path, out_dir: &Path, opts: &RenderOptions) -> Result<Vec<PathBuf>> {
    opts.validate()?;
    let bundle = read_bundle(bundle_path)?;
    let stack = LayerStack::new(&bundle.layers)?;
    let id = bundle_id(bundle_path);

    let mut files = Vec::new();
    for view in [View::Fused, View::Overlay, View::Binary] {
        files.push((view.file_name(), render_view(&bundle, &stack, opts, view)?));
    }
    let importance = stack.importance(&opts.params)?;
    files.push((IMPORTANCE_FILE, to_json_bytes(&importance_document(&id, &bundle, &importance))));

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    files
        .into_iter()
        .map(|(name, bytes)| {
            let path = out_dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Winsor,
    FinalLayer,
    NaiveMean,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Winsor => "winsor",
            Method::FinalLayer => "final_layer",
            Method::NaiveMean => "naive_mean",
        }
    }
}

/// One scored heatmap. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub bundle_id: String,
    pub method: Method,
    pub aggregation: Aggregation,
    pub interp: Interp,
    pub p: Option<f64>,
    pub iou: f64,
    pub com_distance_px: f64,
    /// Highest IoU over the grid (first such `p`). Always false for baselines.
    pub best_iou: bool,
    /// Lowest CoM distance over the grid (first such `p`).
    pub best_distance: bool,
}

fn truth_of(id: &str, bundle: &SaliencyBundle) -> Result<BinaryMask> {
    bundle
        .mask
        .clone()
        .ok_or_else(|| Error::MissingMask { bundle: id.to_string() })
}

/// IoU and CoM distance of the Winsor-CAM map for `params`.
pub fn winsor_localization(id: &str, bundle: &SaliencyBundle, stack: &LayerStack, params: &WinsorParams) -> Result<Localization> {
    let truth = truth_of(id, bundle)?;
    let fused = stack.run(params)?.fused;
    localization(&on_canvas(bundle, &fused, params.interp)?, &truth)
}

/// `(final_layer, naive_mean)` scores; independent of `p`.
pub fn baseline_localization(id: &str, bundle: &SaliencyBundle, stack: &LayerStack, interp: Interp) -> Result<(Localization, Localization)> {
    let truth = truth_of(id, bundle)?;
    let last = localization(&on_canvas(bundle, &stack.final_layer(interp), interp)?, &truth)?;
    let mean = localization(&on_canvas(bundle, &stack.naive_mean(interp)?, interp)?, &truth)?;
    Ok((last, mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub bundle_id: String,
    /// Present when the manifest records both predicted and true class.
    pub prediction_correct: Option<bool>,
    pub best_iou_p: f64,
    pub best_distance_p: f64,
    /// Winsor records in grid order, then final-layer, then naive-mean.
    pub records: Vec<EvalRecord>,
}

impl SweepReport {
    fn winsor(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter(|r| r.method == Method::Winsor)
    }

    pub fn best_iou(&self) -> f64 {
        self.winsor().map(|r| r.iou).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn best_distance(&self) -> f64 {
        self.winsor().map(|r| r.com_distance_px).fold(f64::INFINITY, f64::min)
    }

    pub fn baseline(&self, method: Method) -> &EvalRecord {
        self.records
            .iter()
            .find(|r| r.method == method)
            .expect("sweeps always carry both baselines")
    }
}

pub fn sweep_bundle(id: &str, bundle: &SaliencyBundle, grid: &[f64], params: &WinsorParams) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::invalid("empty percentile grid"));
    }
    for &p in grid {
        check_percentile(p)?;
    }
    truth_of(id, bundle)?;
    let stack = LayerStack::new(&bundle.layers)?;
    let record = |method, p, loc: Localization| EvalRecord {
        bundle_id: id.to_string(),
        method,
        aggregation: params.aggregation,
        interp: params.interp,
        p,
        iou: loc.iou,
        com_distance_px: loc.com_distance_px,
        best_iou: false,
        best_distance: false,
    };
    let mut records = grid
        .iter()
        .map(|&p| Ok(record(Method::Winsor, Some(p), winsor_localization(id, bundle, &stack, &params.with_p(p))?)))
        .collect::<Result<Vec<_>>>()?;

    let mut best_iou = 0;
    let mut best_dist = 0;
    for (i, r) in records.iter().enumerate() {
        if r.iou > records[best_iou].iou {
            best_iou = i;
        }
        if r.com_distance_px < records[best_dist].com_distance_px {
            best_dist = i;
        }
    }
    records[best_iou].best_iou = true;
    records[best_dist].best_distance = true;

    let (last, mean) = baseline_localization(id, bundle, &stack, params.interp)?;
    records.push(record(Method::FinalLayer, None, last));
    records.push(record(Method::NaiveMean, None, mean));
    Ok(SweepReport {
        bundle_id: id.to_string(),
        prediction_correct: bundle.manifest.prediction_correct(),
        best_iou_p: grid[best_iou],
        best_distance_p: grid[best_dist],
        records,
    })
}

pub fn records_csv<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Sweeps one bundle; with `out`, also writes `sweep.csv` and `sweep.json`.
pub fn cmd_sweep(bundle_path: &Path, grid: &[f64], params: &WinsorParams, out: Option<&Path>) -> Result<SweepReport> {
    let bundle = read_bundle(bundle_path)?;
    let report = sweep_bundle(&bundle_id(bundle_path), &bundle, grid, params)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(dir, "sweep.csv", &records_csv(&report.records)?)?;
        write_file(dir, "sweep.json", &to_json_bytes(&report))?;
    }
    Ok(report)
}

pub fn sweep_table(report: &SweepReport) -> String {
    let mut s = format!("bundle {}\n{:<12} {:>6} {:>8} {:>10}\n", report.bundle_id, "method", "p", "iou", "com_px");
    for r in &report.records {
        let p = r.p.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
        let mark = match (r.best_iou, r.best_distance) {
            (true, true) => "  best iou, best distance",
            (true, false) => "  best iou",
            (false, true) => "  best distance",
            _ => "",
        };
        let _ = writeln!(s, "{:<12} {:>6} {:>8.4} {:>10.4}{mark}", r.method.as_str(), p, r.iou, r.com_distance_px);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub split: String,
    pub method: Method,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub grid: Vec<f64>,
    pub aggregation: Aggregation,
    pub interp: Interp,
    pub bundles: Vec<SweepReport>,
    /// Bundles without a ground-truth mask.
    pub skipped: Vec<String>,
    pub summary: Vec<SummaryRow>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-image value of `metric` for `method`: the best value over the grid for
/// Winsor-CAM, the single value for a baseline.
fn per_image(report: &SweepReport, method: Method, metric: &str) -> f64 {
    match (method, metric) {
        (Method::Winsor, "iou") => report.best_iou(),
        (Method::Winsor, _) => report.best_distance(),
        (m, "iou") => report.baseline(m).iou,
        (m, _) => report.baseline(m).com_distance_px,
    }
}

pub fn summarize(reports: &[SweepReport]) -> Vec<SummaryRow> {
    let splits: [(&str, Option<bool>); 3] = [("all", None), ("correct", Some(true)), ("incorrect", Some(false))];
    let mut rows = Vec::new();
    for (split, want) in splits {
        let members: Vec<&SweepReport> = reports
            .iter()
            .filter(|r| want.is_none() || r.prediction_correct == want)
            .collect();
        if members.is_empty() {
            continue;
        }
        for method in [Method::Winsor, Method::FinalLayer, Method::NaiveMean] {
            for metric in ["iou", "com_distance_px"] {
                let values: Vec<f64> = members.iter().map(|r| per_image(r, method, metric)).collect();
                let (mean, std) = mean_std(&values);
                rows.push(SummaryRow {
                    split: split.into(),
                    method,
                    metric: metric.into(),
                    n: values.len(),
                    mean,
                    std,
                });
            }
        }
    }
    rows
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<10} {:<12} {:<16} {:>4}  {}\n", "split", "method", "metric", "n", "mean ± std");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:<12} {:<16} {:>4}  {:.4} ± {:.4}",
            r.split,
            r.method.as_str(),
            r.metric,
            r.n,
            r.mean,
            r.std
        );
    }
    s
}

/// `*.wcam` files directly inside `dir`, sorted by file name.
pub fn list_bundles(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == BUNDLE_EXTENSION))
        .collect();
    paths.sort();
    Ok(paths)
}

enum Outcome {
    Scored(SweepReport),
    NoMask(String),
}

fn evaluate_one(path: &Path, grid: &[f64], params: &WinsorParams) -> Result<Outcome> {
    let bundle = read_bundle(path)?;
    let id = bundle_id(path);
    if !bundle.has_mask() {
        return Ok(Outcome::NoMask(id));
    }
    sweep_bundle(&id, &bundle, grid, params).map(Outcome::Scored)
}

/// Sweeps every bundle in `dir` (in parallel) and aggregates per split,
/// method and metric. With `out`, writes `records.csv`, `records.json`,
/// `summary.csv`, `summary.json` and `summary.txt`.
pub fn cmd_evaluate(dir: &Path, grid: &[f64], params: &WinsorParams, out: Option<&Path>) -> Result<Evaluation> {
    let paths = list_bundles(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no .{BUNDLE_EXTENSION} bundles in {}", dir.display())));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(paths.len());
    let chunk = paths.len().div_ceil(workers);
    let outcomes: Vec<Result<Outcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| evaluate_one(p, grid, params)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });

    let mut bundles = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome? {
            Outcome::Scored(r) => bundles.push(r),
            Outcome::NoMask(id) => skipped.push(id),
        }
    }
    if bundles.is_empty() {
        return Err(Error::MissingMask {
            bundle: skipped.join(", "),
        });
    }
    let evaluation = Evaluation {
        grid: grid.to_vec(),
        aggregation: params.aggregation,
        interp: params.interp,
        summary: summarize(&bundles),
        bundles,
        skipped,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records = evaluation.bundles.iter().flat_map(|b| &b.records);
        write_file(dir, "records.csv", &records_csv(records)?)?;
        write_file(dir, "records.json", &to_json_bytes(&evaluation.bundles))?;
        write_file(dir, "summary.csv", &summary_csv(&evaluation.summary)?)?;
        write_file(dir, "summary.json", &to_json_bytes(&evaluation))?;
        write_file(dir, "summary.txt", summary_table(&evaluation.summary).as_bytes())?;
    }
    Ok(evaluation)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: u8,
    pub error: Error,
}

impl CliError {
    pub fn usage(error: Error) -> Self {
        CliError { exit_code: EXIT_USAGE, error }
    }

    pub fn data(error: Error) -> Self {
        CliError { exit_code: EXIT_DATA, error }
    }

    /// One-line JSON for `--json-errors`.
    pub fn to_json_line(&self) -> String {
        json!({
            "error": {
                "kind": self.error.kind(),
                "message": self.error.to_string(),
                "exit_code": self.exit_code,
            }
        })
        .to_string()
    }
}
