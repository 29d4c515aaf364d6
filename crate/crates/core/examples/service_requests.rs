//! Drives the HTTP handler in-process: lists bundles, then asks for
//! importances and metrics at a few p values.

use std::collections::BTreeMap;

use winsorcam::bundle::SaliencyBundle;
use winsorcam::metrics::BinaryMask;
use winsorcam::microcnn::make_synthetic_fixture;
use winsorcam::service::{Catalog, Service};
use winsorcam::Result;

fn main() -> Result<()> {
    let mut bundles = BTreeMap::new();
    for seed in 0..2 {
        let f = make_synthetic_fixture(seed);
        let mask = BinaryMask::from_tensor(&f.mask)?;
        bundles.insert(
            format!("fixture_{seed:03}"),
            SaliencyBundle::from_model(&f.model, &f.image, f.target_class, Some(mask))?,
        );
    }
    let service = Service::new(Catalog::from_bundles(bundles), None);

    let show = |target: &str| {
        let r = service.handle("GET", target);
        println!("GET {target} -> {} {}", r.status, r.content_type);
        if r.content_type == "application/json" {
            println!("{}", String::from_utf8_lossy(&r.body));
        } else {
            println!("({} bytes)", r.body.len());
        }
    };
    show("/v1/bundles");
    for p in [0, 50, 100] {
        show(&format!("/v1/metrics?bundle=fixture_000&p={p}"));
    }
    show("/v1/importances?bundle=fixture_001&p=30&agg=max");
    show("/v1/heatmap?bundle=fixture_001&p=30&view=overlay");
    show("/v1/heatmap?bundle=nope");
    Ok(())
}
