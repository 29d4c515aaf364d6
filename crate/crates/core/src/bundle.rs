//! Saliency bundle container.
//!
//! A bundle is one file:
//!
//! ```text
//! "WCAM"                         4-byte magic
//! u32 LE                         number of entries
//! entry*:
//!   u16 LE  name length, then the UTF-8 name
//!   u64 LE  payload length, then the payload
//! ```
//!
//! The first entry is `manifest.json`. Tensor payloads are little-endian
//! `f32`, row-major. A saliency bundle carries `image.bin` (`C×H×W`), an
//! optional `mask.bin` (`H×W`, values 0/1) and, per layer,
//! `<layer>/act.bin` and `<layer>/grad.bin` (`C_i×H_i×W_i`).
//! Model weight files reuse the container with their own manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::gradcam::LayerCapture;
use crate::metrics::BinaryMask;
use crate::microcnn::{Architecture, ConvLayer, DenseLayer, MicroCnn};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WCAM";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_ENTRY: &str = "manifest.json";
pub const BUNDLE_EXTENSION: &str = "wcam";

#[derive(Debug, Error, PartialEq)]
pub enum BundleError {
    #[error("not a bundle: missing WCAM magic")]
    BadMagic,
    #[error("truncated entry `{entry}`: needs {expected} bytes, {available} available")]
    Truncated {
        entry: String,
        expected: u64,
        available: u64,
    },
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("duplicate entry `{0}`")]
    DuplicateEntry(String),
    #[error("unreferenced entry `{0}`")]
    UnreferencedEntry(String),
    #[error("manifest field `{field}`: {message}")]
    Manifest { field: String, message: String },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u64, supported: u32 },
    #[error("`{field}` is inconsistent: {detail}")]
    Inconsistent { field: String, detail: String },
}

fn inconsistent(field: impl Into<String>, detail: impl Into<String>) -> BundleError {
    BundleError::Inconsistent {
        field: field.into(),
        detail: detail.into(),
    }
}

/// Ordered named byte entries: the raw container layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Archive {
    entries: Vec<(String, Vec<u8>)>,
}

impl Archive {
    pub fn push(&mut self, name: impl Into<String>, bytes: Vec<u8>) -> Result<(), BundleError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(BundleError::DuplicateEntry(name));
        }
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(inconsistent("entry name", format!("bad length {}", name.len())));
        }
        self.entries.push((name, bytes));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[u8], BundleError> {
        self.get(name).ok_or_else(|| BundleError::MissingEntry(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|(n, b)| 10 + n.len() + b.len()).sum();
        let mut out = Vec::with_capacity(8 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, bytes) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BundleError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(BundleError::BadMagic);
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let count = u32::from_le_bytes(cur.take("entry count", 4)?.try_into().unwrap());
        let mut archive = Archive::default();
        for i in 0..count {
            let label = format!("entry #{i}");
            let name_len = u16::from_le_bytes(cur.take(&label, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(&label, name_len)?)
                .map_err(|_| inconsistent(label.clone(), "name is not UTF-8"))?
                .to_string();
            let len = u64::from_le_bytes(cur.take(&name, 8)?.try_into().unwrap());
            let payload = cur.take(&name, len.try_into().unwrap_or(usize::MAX))?.to_vec();
            archive.push(name, payload)?;
        }
        if cur.pos != bytes.len() {
            return Err(inconsistent(
                "container",
                format!("{} trailing bytes after the last entry", bytes.len() - cur.pos),
            ));
        }
        Ok(archive)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, entry: &str, n: usize) -> Result<&'a [u8], BundleError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(BundleError::Truncated {
                entry: entry.to_string(),
                expected: n as u64,
                available: available as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Encodes values as little-endian `f32`. Fails on values that overflow `f32`.
pub fn encode_f32(name: &str, values: &[f64]) -> Result<Vec<u8>, BundleError> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(inconsistent(name, format!("value {v} does not fit in f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a little-endian `f32` blob of `shape` and widens it to `f64`.
///
/// A byte count that is not a whole number of floats is reported as
/// truncation; a whole number of floats that does not fill `shape` is a
/// manifest/blob inconsistency.
pub fn decode_f32(name: &str, bytes: &[u8], shape: &[usize]) -> Result<Tensor, BundleError> {
    let want: usize = shape.iter().product();
    if bytes.len() % 4 != 0 {
        return Err(BundleError::Truncated {
            entry: name.to_string(),
            expected: (want * 4) as u64,
            available: bytes.len() as u64,
        });
    }
    if bytes.len() / 4 != want {
        return Err(inconsistent(
            name,
            format!(
                "manifest shape {shape:?} needs {want} values, blob holds {}",
                bytes.len() / 4
            ),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(inconsistent(name, "non-finite value"));
    }
    Tensor::new(shape.to_vec(), data).map_err(|e| inconsistent(name, e.to_string()))
}

/// How the producer captured activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationCapture {
    #[default]
    PostRelu,
    PreRelu,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    /// `[C, H, W]`
    pub shape: [usize; 3],
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl LayerEntry {
    pub fn activation_path(&self) -> String {
        format!("{}/act.bin", self.name)
    }

    pub fn gradient_path(&self) -> String {
        format!("{}/grad.bin", self.name)
    }
}

/// `manifest.json` of a saliency bundle. Unknown fields are kept in `extra`
/// and written back unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub producer: String,
    /// Explained class `c`.
    pub class_index: usize,
    /// Logit `y^c` at capture time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_class: Option<usize>,
    #[serde(default)]
    pub activation_capture: ActivationCapture,
    pub image: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<TensorRef>,
    /// Shallow to deep.
    pub layers: Vec<LayerEntry>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Manifest {
    /// `Some(true)` if predicted and true class are both recorded and agree.
    pub fn prediction_correct(&self) -> Option<bool> {
        Some(self.predicted_class? == self.true_class?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyBundle {
    pub manifest: Manifest,
    pub layers: Vec<LayerCapture>,
    /// `C×H×W`
    pub image: Tensor,
    pub mask: Option<BinaryMask>,
}

impl SaliencyBundle {
    /// Assembles a bundle and its manifest from captured tensors.
    pub fn new(
        producer: impl Into<String>,
        class_index: usize,
        layers: Vec<LayerCapture>,
        image: Tensor,
        mask: Option<BinaryMask>,
    ) -> Result<Self> {
        image.dims3()?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            producer: producer.into(),
            class_index,
            logit: None,
            predicted_class: None,
            true_class: None,
            activation_capture: ActivationCapture::PostRelu,
            image: TensorRef {
                path: "image.bin".into(),
                shape: image.shape().to_vec(),
            },
            mask: mask.as_ref().map(|m| TensorRef {
                path: "mask.bin".into(),
                shape: vec![m.height(), m.width()],
            }),
            layers: layers
                .iter()
                .map(|l| {
                    let (c, h, w) = l.activations.dims3()?;
                    Ok(LayerEntry {
                        name: l.name.clone(),
                        shape: [c, h, w],
                        extra: Map::new(),
                    })
                })
                .collect::<Result<_>>()?,
            extra: Map::new(),
        };
        let bundle = SaliencyBundle {
            manifest,
            layers,
            image,
            mask,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Runs `model` on `image` and captures every conv layer for `class_index`.
    pub fn from_model(
        model: &MicroCnn,
        image: &Tensor,
        class_index: usize,
        mask: Option<BinaryMask>,
    ) -> Result<Self> {
        let (trace, layers) = model.capture(image, class_index)?;
        // Round through f32 up front so the in-memory bundle equals what a
        // write/read cycle produces.
        let narrow = |t: &Tensor| t.map(|v| v as f32 as f64);
        let layers = layers
            .into_iter()
            .map(|l| LayerCapture::new(l.name, narrow(&l.activations), narrow(&l.gradients)))
            .collect::<Result<Vec<_>>>()?;
        let mut bundle = SaliencyBundle::new(
            format!("winsorcam-microcnn/{}", env!("CARGO_PKG_VERSION")),
            class_index,
            layers,
            narrow(image),
            mask,
        )?;
        let logits = trace.logits.data();
        // f32 so the value survives a write/read cycle unchanged
        bundle.manifest.logit = Some(logits[class_index] as f32 as f64);
        let predicted = (0..logits.len())
            .fold(0, |best, j| if logits[j] > logits[best] { j } else { best });
        bundle.manifest.predicted_class = Some(predicted);
        bundle.manifest.extra.insert("model_seed".into(), Value::from(model.seed));
        Ok(bundle)
    }

    pub fn has_mask(&self) -> bool {
        self.mask.is_some()
    }

    /// Checks the manifest against the tensors it describes.
    pub fn validate(&self) -> Result<(), BundleError> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(BundleError::UnsupportedVersion {
                found: m.format_version as u64,
                supported: FORMAT_VERSION,
            });
        }
        if m.layers.is_empty() {
            return Err(inconsistent("layers", "a bundle needs at least one layer"));
        }
        if m.layers.len() != self.layers.len() {
            return Err(inconsistent(
                "layers",
                format!("manifest lists {}, bundle holds {}", m.layers.len(), self.layers.len()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for (entry, layer) in m.layers.iter().zip(&self.layers) {
            if entry.name.is_empty() || entry.name.contains('\0') || !seen.insert(entry.name.as_str()) {
                return Err(inconsistent("layers.name", format!("bad or duplicate name `{}`", entry.name)));
            }
            if entry.name != layer.name {
                return Err(inconsistent("layers.name", format!("`{}` vs `{}`", entry.name, layer.name)));
            }
            if layer.activations.shape() != entry.shape || layer.gradients.shape() != entry.shape {
                return Err(inconsistent(
                    format!("layers[{}].shape", entry.name),
                    format!(
                        "manifest {:?}, activations {:?}, gradients {:?}",
                        entry.shape,
                        layer.activations.shape(),
                        layer.gradients.shape()
                    ),
                ));
            }
            if m.activation_capture == ActivationCapture::PostRelu
                && layer.activations.data().iter().any(|&v| v < 0.0)
            {
                return Err(inconsistent(
                    entry.activation_path(),
                    "negative activation in a post-ReLU capture",
                ));
            }
        }
        if self.image.shape() != m.image.shape.as_slice() || m.image.shape.len() != 3 {
            return Err(inconsistent(
                "image.shape",
                format!("manifest {:?}, tensor {:?}", m.image.shape, self.image.shape()),
            ));
        }
        match (&m.mask, &self.mask) {
            (None, None) => {}
            (Some(r), Some(mask)) => {
                if r.shape != [mask.height(), mask.width()] {
                    return Err(inconsistent("mask.shape", format!("manifest {:?}", r.shape)));
                }
            }
            _ => return Err(inconsistent("mask", "manifest and bundle disagree on presence")),
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        self.validate()?;
        let m = &self.manifest;
        let mut ar = Archive::default();
        let manifest = serde_json::to_vec_pretty(m).expect("manifest serializes");
        ar.push(MANIFEST_ENTRY, manifest)?;
        ar.push(m.image.path.clone(), encode_f32(&m.image.path, self.image.data())?)?;
        if let (Some(r), Some(mask)) = (&m.mask, &self.mask) {
            ar.push(r.path.clone(), encode_f32(&r.path, mask.to_tensor().data())?)?;
        }
        for (entry, layer) in m.layers.iter().zip(&self.layers) {
            let (a, g) = (entry.activation_path(), entry.gradient_path());
            ar.push(a.clone(), encode_f32(&a, layer.activations.data())?)?;
            ar.push(g.clone(), encode_f32(&g, layer.gradients.data())?)?;
        }
        Ok(ar)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_archive()?.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&Archive::from_bytes(bytes)?)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        if ar.names().next() != Some(MANIFEST_ENTRY) {
            return Err(BundleError::MissingEntry(MANIFEST_ENTRY.into()).into());
        }
        let manifest = parse_manifest(ar.require(MANIFEST_ENTRY)?)?;
        let image = decode_f32(&manifest.image.path, ar.require(&manifest.image.path)?, &manifest.image.shape)?;
        let mut referenced = vec![MANIFEST_ENTRY.to_string(), manifest.image.path.clone()];
        let mask = match &manifest.mask {
            Some(r) => {
                if r.shape.len() != 2 {
                    return Err(inconsistent("mask.shape", format!("expected [H, W], got {:?}", r.shape)).into());
                }
                let t = decode_f32(&r.path, ar.require(&r.path)?, &r.shape)?;
                referenced.push(r.path.clone());
                Some(BinaryMask::from_tensor(&t).map_err(|e| inconsistent(r.path.clone(), e.to_string()))?)
            }
            None => None,
        };
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for entry in &manifest.layers {
            let (ap, gp) = (entry.activation_path(), entry.gradient_path());
            let act = decode_f32(&ap, ar.require(&ap)?, &entry.shape)?;
            let grad = decode_f32(&gp, ar.require(&gp)?, &entry.shape)?;
            layers.push(LayerCapture::new(entry.name.clone(), act, grad)?);
            referenced.push(ap);
            referenced.push(gp);
        }
        if let Some(extra) = ar.names().find(|n| !referenced.iter().any(|r| r == n)) {
            return Err(BundleError::UnreferencedEntry(extra.to_string()).into());
        }
        let bundle = SaliencyBundle {
            manifest,
            layers,
            image,
            mask,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

fn parse_manifest(bytes: &[u8]) -> Result<Manifest, BundleError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| BundleError::Manifest {
        field: "<root>".into(),
        message: e.to_string(),
    })?;
    let version = value.get("format_version").and_then(Value::as_u64).ok_or_else(|| BundleError::Manifest {
        field: "format_version".into(),
        message: "missing or not an integer".into(),
    })?;
    if version != FORMAT_VERSION as u64 {
        return Err(BundleError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| BundleError::Manifest {
        field: manifest_field_hint(&e.to_string()),
        message: e.to_string(),
    })
}

// serde_json reports "missing field `x`" / "unknown variant"; pull out the name.
fn manifest_field_hint(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<root>").to_string()
}

pub fn write_bundle(bundle: &SaliencyBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bundle.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<SaliencyBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SaliencyBundle::from_bytes(&bytes)
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    kind: String,
    seed: u64,
    architecture: Architecture,
}

const MODEL_KIND: &str = "microcnn";

pub fn model_to_bytes(model: &MicroCnn) -> Result<Vec<u8>> {
    let mut ar = Archive::default();
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        kind: MODEL_KIND.into(),
        seed: model.seed,
        architecture: model.arch.clone(),
    };
    ar.push(MANIFEST_ENTRY, serde_json::to_vec_pretty(&manifest).expect("serializes"))?;
    for (i, layer) in model.convs.iter().enumerate() {
        let (w, b) = (format!("conv{i}/weight.bin"), format!("conv{i}/bias.bin"));
        ar.push(w.clone(), encode_f32(&w, layer.weight.data())?)?;
        ar.push(b.clone(), encode_f32(&b, layer.bias.data())?)?;
    }
    ar.push("dense/weight.bin", encode_f32("dense/weight.bin", model.dense.weight.data())?)?;
    ar.push("dense/bias.bin", encode_f32("dense/bias.bin", model.dense.bias.data())?)?;
    Ok(ar.to_bytes())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MicroCnn> {
    let ar = Archive::from_bytes(bytes)?;
    let raw: Value = serde_json::from_slice(ar.require(MANIFEST_ENTRY)?).map_err(|e| BundleError::Manifest {
        field: "<root>".into(),
        message: e.to_string(),
    })?;
    let version = raw.get("format_version").and_then(Value::as_u64).unwrap_or(0);
    if version != FORMAT_VERSION as u64 {
        return Err(BundleError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let m: ModelManifest = serde_json::from_value(raw).map_err(|e| BundleError::Manifest {
        field: manifest_field_hint(&e.to_string()),
        message: e.to_string(),
    })?;
    if m.kind != MODEL_KIND {
        return Err(inconsistent("kind", format!("expected `{MODEL_KIND}`, got `{}`", m.kind)).into());
    }
    m.architecture.validate()?;
    let mut in_ch = m.architecture.input[0];
    let mut convs = Vec::new();
    for (i, spec) in m.architecture.convs.iter().enumerate() {
        let (w, b) = (format!("conv{i}/weight.bin"), format!("conv{i}/bias.bin"));
        convs.push(ConvLayer {
            spec: *spec,
            in_channels: in_ch,
            weight: decode_f32(&w, ar.require(&w)?, &[spec.out_channels, in_ch, 3, 3])?,
            bias: decode_f32(&b, ar.require(&b)?, &[spec.out_channels])?,
        });
        in_ch = spec.out_channels;
    }
    let classes = m.architecture.num_classes;
    let dense = DenseLayer {
        weight: decode_f32("dense/weight.bin", ar.require("dense/weight.bin")?, &[classes, in_ch])?,
        bias: decode_f32("dense/bias.bin", ar.require("dense/bias.bin")?, &[classes])?,
    };
    MicroCnn::from_parts(m.architecture, convs, dense, m.seed)
}

pub fn write_model(model: &MicroCnn, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<MicroCnn> {
    let path = path.as_ref();
    model_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microcnn::make_synthetic_fixture;

    fn fixture_bundle() -> SaliencyBundle {
        let f = make_synthetic_fixture(3);
        let mask = BinaryMask::from_tensor(&f.mask).unwrap();
        SaliencyBundle::from_model(&f.model, &f.image, f.target_class, Some(mask)).unwrap()
    }

    #[test]
    fn archive_rejects_bad_magic_and_trailing_bytes() {
        assert_eq!(Archive::from_bytes(b"NOPE\0\0\0\0"), Err(BundleError::BadMagic));
        let mut ar = Archive::default();
        ar.push("a", vec![1, 2, 3]).unwrap();
        assert_eq!(ar.push("a", vec![]), Err(BundleError::DuplicateEntry("a".into())));
        let mut bytes = ar.to_bytes();
        assert_eq!(Archive::from_bytes(&bytes).unwrap(), ar);
        bytes.push(0);
        assert!(matches!(Archive::from_bytes(&bytes), Err(BundleError::Inconsistent { .. })));
    }

    #[test]
    fn cut_file_names_the_entry_being_read() {
        let bytes = fixture_bundle().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 1];
        match Archive::from_bytes(cut) {
            Err(BundleError::Truncated { entry, .. }) => assert!(entry.ends_with("/grad.bin"), "{entry}"),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn model_roundtrip() {
        let f = make_synthetic_fixture(7);
        let bytes = model_to_bytes(&f.model).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, f.model);
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn unknown_fields_survive() {
        let mut b = fixture_bundle();
        b.manifest.extra.insert("dataset".into(), Value::from("voc2012"));
        b.manifest.layers[1].extra.insert("module_path".into(), Value::from("features.3"));
        let back = SaliencyBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back.manifest.extra["dataset"], "voc2012");
        assert_eq!(back.manifest.layers[1].extra["module_path"], "features.3");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut b = fixture_bundle();
        b.manifest.format_version = 9;
        assert!(b.to_bytes().is_err());
        let mut ar = fixture_bundle().to_archive().unwrap();
        let text = String::from_utf8(ar.require(MANIFEST_ENTRY).unwrap().to_vec()).unwrap();
        ar.entries[0].1 = text.replace("\"format_version\": 1", "\"format_version\": 2").into_bytes();
        match SaliencyBundle::from_archive(&ar) {
            Err(Error::Bundle(BundleError::UnsupportedVersion { found: 2, .. })) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_post_relu_activation_rejected() {
        let mut b = fixture_bundle();
        let l = &mut b.layers[0];
        let mut d = l.activations.clone().into_data();
        d[0] = -1.0;
        l.activations = Tensor::new(l.activations.shape().to_vec(), d).unwrap();
        assert!(matches!(b.validate(), Err(BundleError::Inconsistent { .. })));
        b.manifest.activation_capture = ActivationCapture::PreRelu;
        assert!(b.validate().is_ok());
    }
}
