//! Otsu IoU and centre-of-mass distance over the p grid, against the
//! final-layer and naive-mean baselines.

use winsorcam::bundle::SaliencyBundle;
use winsorcam::cli::{default_p_grid, sweep_bundle, sweep_table, Method};
use winsorcam::metrics::BinaryMask;
use winsorcam::microcnn::make_synthetic_fixture;
use winsorcam::{Result, WinsorParams};

fn main() -> Result<()> {
    for seed in 0..3 {
        let f = make_synthetic_fixture(seed);
        let mask = BinaryMask::from_tensor(&f.mask)?;
        let bundle = SaliencyBundle::from_model(&f.model, &f.image, f.target_class, Some(mask))?;
        let report = sweep_bundle(&format!("seed{seed}"), &bundle, &default_p_grid(), &WinsorParams::default())?;
        print!("{}", sweep_table(&report));
        println!(
            "best winsor iou {:.4} (p={}) vs final layer {:.4}\n",
            report.best_iou(),
            report.best_iou_p,
            report.baseline(Method::FinalLayer).iou
        );
    }
    Ok(())
}
