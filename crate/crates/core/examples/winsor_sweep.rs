//! How the layer weights move as p goes from 0 to 100.

use winsorcam::microcnn::make_synthetic_fixture;
use winsorcam::{Aggregation, LayerStack, Result, WinsorParams};

fn main() -> Result<()> {
    let fixture = make_synthetic_fixture(0);
    let (_, layers) = fixture.model.capture(&fixture.image, fixture.target_class)?;
    let stack = LayerStack::new(&layers)?;

    for aggregation in [Aggregation::Mean, Aggregation::Max] {
        println!("aggregation {}", aggregation.as_str());
        for p in (0..=100).step_by(10) {
            let params = WinsorParams {
                aggregation,
                ..WinsorParams::default().with_p(p as f64)
            };
            let imp = stack.importance(&params)?;
            let weights: Vec<String> = imp.normalized.iter().map(|w| format!("{w:.3}")).collect();
            println!("  p={p:>3}  T={:.5}  weights [{}]", imp.threshold, weights.join(", "));
        }
    }
    Ok(())
}
