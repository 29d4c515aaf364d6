//! Heatmap colouring, overlay compositing and PNG input/output.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::metrics::{quantize_256, unit_to_u8, BinaryMask};
use crate::tensor::{resize, Interp, Tensor};

pub const DEFAULT_OVERLAY_ALPHA: f64 = 0.5;

const COLORMAP_SOURCE: &str = include_str!("../data/colormap.txt");

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl HeatmapImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Number of distinct colours in the image.
    pub fn distinct_colors(&self) -> usize {
        let mut seen: Vec<[u8; 3]> = self.rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// The shipped 256-entry blue→green→red lookup table.
pub fn colormap() -> &'static [[u8; 3]; 256] {
    static TABLE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [[0u8; 3]; 256];
        let mut filled = 0;
        for line in COLORMAP_SOURCE.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().expect("colormap entries are integers"))
                .collect();
            assert_eq!(v.len(), 4, "colormap line `{line}`");
            table[v[0]] = [v[1] as u8, v[2] as u8, v[3] as u8];
            filled += 1;
        }
        assert_eq!(filled, 256, "colormap must have 256 entries");
        table
    })
}

/// Colours a 2-D map after min-max normalization.
pub fn colorize(map: &Tensor) -> Result<HeatmapImage> {
    let (h, w) = map.dims2()?;
    let lut = colormap();
    let rgb = quantize_256(map)?
        .into_iter()
        .flat_map(|q| lut[q as usize])
        .collect();
    Ok(HeatmapImage { width: w, height: h, rgb })
}

/// Black/white rendering of a binary mask.
pub fn mask_image(mask: &BinaryMask) -> HeatmapImage {
    HeatmapImage {
        width: mask.width(),
        height: mask.height(),
        rgb: mask
            .bits()
            .iter()
            .flat_map(|&b| if b { [255u8; 3] } else { [0u8; 3] })
            .collect(),
    }
}

/// Image tensor (`1×H×W` grey or `3×H×W` RGB, values in `[0, 1]`) as
/// per-pixel RGB triples.
fn image_rgb(image: &Tensor) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("images need 1 or 3 channels, got {c}")));
    }
    let px = (0..h * w)
        .map(|i| match c {
            1 => [image.data()[i]; 3],
            _ => [
                image.data()[i],
                image.data()[h * w + i],
                image.data()[2 * h * w + i],
            ],
        })
        .collect();
    Ok((h, w, px))
}

/// `(1 - alpha) * image + alpha * colormap(normalized heatmap)`, per channel,
/// with the heatmap first resampled to the image size. Quantized to 8 bits
/// only at the end.
pub fn render_overlay(image: &Tensor, heatmap: &Tensor, alpha: f64, interp: Interp) -> Result<HeatmapImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("overlay alpha must lie in [0, 1], got {alpha}")));
    }
    let (h, w, px) = image_rgb(image)?;
    let heat = resize(heatmap, h, w, interp)?;
    let lut = colormap();
    let q = quantize_256(&heat)?;
    let mut rgb = Vec::with_capacity(3 * h * w);
    for (pixel, level) in px.iter().zip(q) {
        let color = lut[level as usize];
        for ch in 0..3 {
            let v = (1.0 - alpha) * pixel[ch] + alpha * (color[ch] as f64 / 255.0);
            rgb.push(unit_to_u8(v));
        }
    }
    Ok(HeatmapImage { width: w, height: h, rgb })
}

/// Lossless 8-bit RGB PNG. Identical images encode to identical bytes.
pub fn encode_png(img: &HeatmapImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Adaptive);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&img.rgb)?;
        writer.finish()?;
    }
    Ok(out)
}

pub fn export_heatmap_png(img: &HeatmapImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// Decoded 8-bit PNG: `channels` is 1 (grey), 2 (grey+alpha), 3 (RGB) or 4 (RGBA).
pub struct DecodedPng {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().expect("image fits in memory")];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        channels: info.color_type.samples(),
        data: buf,
    })
}

fn read_png(path: &Path) -> Result<DecodedPng> {
    decode_png(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads an RGB PNG back into a [`HeatmapImage`] (grey is expanded to RGB).
pub fn import_rgb_png(path: impl AsRef<Path>) -> Result<HeatmapImage> {
    let png = read_png(path.as_ref())?;
    let rgb = png
        .data
        .chunks_exact(png.channels)
        .flat_map(|c| match png.channels {
            1 | 2 => [c[0]; 3],
            _ => [c[0], c[1], c[2]],
        })
        .collect();
    Ok(HeatmapImage {
        width: png.width,
        height: png.height,
        rgb,
    })
}

/// Mask import: any non-zero colour sample marks foreground. Alpha is ignored.
pub fn import_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let png = read_png(path.as_ref())?;
    let colour = match png.channels {
        1 | 2 => 1,
        _ => 3,
    };
    let bits = png
        .data
        .chunks_exact(png.channels)
        .map(|c| c[..colour].iter().any(|&v| v != 0))
        .collect();
    BinaryMask::new(png.height, png.width, bits)
}

/// Image import: grey PNGs become `1×H×W`, colour PNGs `3×H×W`, scaled to `[0, 1]`.
pub fn import_image_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let png = read_png(path.as_ref())?;
    let c = if png.channels <= 2 { 1 } else { 3 };
    let n = png.width * png.height;
    let mut data = vec![0.0; c * n];
    for (i, px) in png.data.chunks_exact(png.channels).enumerate() {
        for ch in 0..c {
            data[ch * n + i] = px[ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![c, png.height, png.width], data)
}
