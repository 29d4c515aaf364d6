//! Writes the fused heatmap, its overlay on the input and the Otsu mask as
//! PNGs. Usage: `overlay_png [OUT_DIR] [P]`.

use std::path::PathBuf;

use winsorcam::metrics::otsu_threshold;
use winsorcam::microcnn::make_synthetic_fixture;
use winsorcam::render::{colorize, export_heatmap_png, mask_image, render_overlay};
use winsorcam::tensor::resize;
use winsorcam::{winsor_cam, Interp, Result, WinsorParams};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "overlay_out".into()));
    let p: f64 = args.next().map_or(50.0, |s| s.parse().expect("p is a number"));
    std::fs::create_dir_all(&out).expect("create output directory");

    let f = make_synthetic_fixture(1);
    let (_, layers) = f.model.capture(&f.image, f.target_class)?;
    let result = winsor_cam(&layers, &WinsorParams::default().with_p(p))?;
    let (h, w) = (f.image.shape()[1], f.image.shape()[2]);

    export_heatmap_png(&colorize(&result.fused)?, out.join("fused.png"))?;
    export_heatmap_png(&render_overlay(&f.image, &result.fused, 0.5, Interp::Bilinear)?, out.join("overlay.png"))?;
    let (level, mask) = otsu_threshold(&resize(&result.fused, h, w, Interp::Bilinear)?)?;
    export_heatmap_png(&mask_image(&mask), out.join("binary.png"))?;
    println!("p={p} otsu level {level}, {} foreground px -> {}", mask.count(), out.display());
    Ok(())
}
