//! Per-layer Grad-CAM on the synthetic micro-CNN.

use winsorcam::microcnn::make_synthetic_fixture;
use winsorcam::{all_layer_gradcams, Result};

fn main() -> Result<()> {
    let fixture = make_synthetic_fixture(7);
    let (trace, layers) = fixture.model.capture(&fixture.image, fixture.target_class)?;
    println!("class {} logits {:?}", fixture.target_class, trace.logits.data());

    for cam in all_layer_gradcams(&layers)? {
        let (h, w) = cam.size();
        let mean_alpha = cam.alpha.iter().sum::<f64>() / cam.alpha.len() as f64;
        println!(
            "{:<6} {:>2}x{:<2} channels {:>2}  mean alpha {:+.5}  map max {:.5}",
            layers[cam.layer_index].name,
            h,
            w,
            cam.alpha.len(),
            mean_alpha,
            cam.map.max()
        );
    }
    Ok(())
}
