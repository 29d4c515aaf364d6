//! Captures a bundle from a model, writes bundle and weights to disk and
//! reads both back. Usage: `export_bundle [OUT_DIR]`.

use std::path::PathBuf;

use winsorcam::bundle::{read_bundle, read_model, write_bundle, write_model, SaliencyBundle};
use winsorcam::metrics::BinaryMask;
use winsorcam::microcnn::make_synthetic_fixture;
use winsorcam::Result;

fn main() -> Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "bundle_out".into()));
    std::fs::create_dir_all(&out).expect("create output directory");

    let f = make_synthetic_fixture(4);
    let mask = BinaryMask::from_tensor(&f.mask)?;
    let mut bundle = SaliencyBundle::from_model(&f.model, &f.image, f.target_class, Some(mask))?;
    bundle.manifest.true_class = Some(f.target_class);

    let bundle_path = out.join("fixture_004.wcam");
    let model_path = out.join("fixture_004.model.wcam");
    write_bundle(&bundle, &bundle_path)?;
    write_model(&f.model, &model_path)?;

    let back = read_bundle(&bundle_path)?;
    assert_eq!(back, bundle);
    let model = read_model(&model_path)?;
    let again = SaliencyBundle::from_model(&model, &back.image, back.manifest.class_index, back.mask.clone())?;
    assert_eq!(again.layers, back.layers);

    println!("{}", serde_json::to_string_pretty(&back.manifest).expect("manifest serializes"));
    println!("wrote {} and {}", bundle_path.display(), model_path.display());
    Ok(())
}
