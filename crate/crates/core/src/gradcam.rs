//! Per-layer Grad-CAM.

use crate::error::{Error, Result};
use crate::tensor::{exact_sum, Tensor};

/// A conv layer's activations and the class-logit gradient with respect to
/// them, both `C×H×W`. This is what a forward/backward hook would capture.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCapture {
    pub name: String,
    pub activations: Tensor,
    pub gradients: Tensor,
}

impl LayerCapture {
    pub fn new(name: impl Into<String>, activations: Tensor, gradients: Tensor) -> Result<Self> {
        activations.dims3()?;
        if activations.shape() != gradients.shape() {
            return Err(Error::ShapeMismatch {
                context: "layer gradients",
                expected: activations.shape().to_vec(),
                actual: gradients.shape().to_vec(),
            });
        }
        Ok(LayerCapture {
            name: name.into(),
            activations,
            gradients,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradCam {
    pub layer_index: usize,
    /// Channel weights: spatial mean of each gradient channel.
    pub alpha: Vec<f64>,
    /// `ReLU(Σ_k alpha[k] · A_k)`, `H×W`.
    pub map: Tensor,
}

impl LayerGradCam {
    pub fn size(&self) -> (usize, usize) {
        self.map.dims2().expect("grad-cam maps are 2-D")
    }
}

/// Grad-CAM for one layer. `layer_index` is recorded as 0.
pub fn layer_gradcam(activations: &Tensor, gradients: &Tensor) -> Result<LayerGradCam> {
    layer_gradcam_at(0, activations, gradients)
}

fn layer_gradcam_at(layer_index: usize, activations: &Tensor, gradients: &Tensor) -> Result<LayerGradCam> {
    if activations.shape() != gradients.shape() {
        return Err(Error::ShapeMismatch {
            context: "grad-cam inputs",
            expected: activations.shape().to_vec(),
            actual: gradients.shape().to_vec(),
        });
    }
    let (c, h, w) = activations.dims3()?;
    let area = (h * w) as f64;
    let alpha: Vec<f64> = (0..c)
        .map(|k| exact_sum(gradients.channel(k)) / area)
        .collect();
    let mut acc = vec![0.0; h * w];
    for (k, &a) in alpha.iter().enumerate() {
        for (dst, &v) in acc.iter_mut().zip(activations.channel(k)) {
            *dst += a * v;
        }
    }
    for v in &mut acc {
        *v = v.max(0.0);
    }
    Ok(LayerGradCam {
        layer_index,
        alpha,
        map: Tensor::from_parts_unchecked(vec![h, w], acc),
    })
}

/// Grad-CAM for every captured layer, in network order.
pub fn all_layer_gradcams(layers: &[LayerCapture]) -> Result<Vec<LayerGradCam>> {
    if layers.is_empty() {
        return Err(Error::invalid("no conv layers to explain"));
    }
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| layer_gradcam_at(i, &l.activations, &l.gradients))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn t3(c: usize, h: usize, w: usize, d: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], d).unwrap()
    }

    #[test]
    fn zero_gradients_zero_map() {
        let a = t3(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let cam = layer_gradcam(&a, &Tensor::zeros(vec![2, 2, 2])).unwrap();
        assert_eq!(cam.alpha, vec![0.0, 0.0]);
        assert!(cam.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_worked_single_channel() {
        let a = t3(1, 2, 2, vec![1.0, -1.0, 2.0, 0.0]);
        let g = Tensor::full(vec![1, 2, 2], 1.0);
        let cam = layer_gradcam(&a, &g).unwrap();
        assert_eq!(cam.alpha, vec![1.0]);
        assert_eq!(cam.map, Tensor::from_rows(&[&[1.0, 0.0], &[2.0, 0.0]]));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = Tensor::zeros(vec![2, 3, 3]);
        let g = Tensor::zeros(vec![2, 3, 2]);
        assert!(matches!(layer_gradcam(&a, &g), Err(Error::ShapeMismatch { .. })));
        assert!(LayerCapture::new("x", a, g).is_err());
        assert!(all_layer_gradcams(&[]).is_err());
    }

    #[test]
    fn zero_gradient_layers_are_kept() {
        let live = LayerCapture::new("a", Tensor::full(vec![1, 2, 2], 1.0), Tensor::full(vec![1, 2, 2], 1.0)).unwrap();
        let dead = LayerCapture::new("b", Tensor::full(vec![1, 1, 1], 1.0), Tensor::zeros(vec![1, 1, 1])).unwrap();
        let cams = all_layer_gradcams(&[live, dead]).unwrap();
        assert_eq!(cams.len(), 2);
        assert_eq!(cams[1].layer_index, 1);
        assert_eq!(cams[1].map.data(), &[0.0]);
    }

    fn random(rng: &mut SeededRng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn alpha_ignores_spatial_order(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let a = random(&mut rng, vec![2, 5, 5]).map(|v| v.max(0.0));
            let g = random(&mut rng, vec![2, 5, 5]);
            let mut perm: Vec<usize> = (0..25).collect();
            for i in (1..25).rev() {
                perm.swap(i, rng.below(i + 1));
            }
            let shuffle = |t: &Tensor| {
                let d: Vec<f64> = (0..2).flat_map(|k| perm.iter().map(move |&p| t.channel(k)[p])).collect();
                Tensor::new(vec![2, 5, 5], d).unwrap()
            };
            let base = layer_gradcam(&a, &g).unwrap();
            let moved = layer_gradcam(&shuffle(&a), &shuffle(&g)).unwrap();
            prop_assert_eq!(base.alpha, moved.alpha);
        }

        #[test]
        fn positive_scaling_and_additivity(seed in any::<u64>(), lambda in 0.01f64..50.0) {
            let mut rng = SeededRng::new(seed);
            let a = random(&mut rng, vec![3, 4, 5]).map(|v| v.max(0.0));
            let g1 = random(&mut rng, vec![3, 4, 5]);
            let g2 = random(&mut rng, vec![3, 4, 5]);
            let base = layer_gradcam(&a, &g1).unwrap();
            prop_assert!(base.map.data().iter().all(|&v| v >= 0.0));

            let scaled = layer_gradcam(&a, &g1.scale(lambda)).unwrap();
            for (s, b) in scaled.alpha.iter().zip(&base.alpha) {
                prop_assert!((s - lambda * b).abs() <= 1e-12 * (1.0 + lambda * b.abs()));
            }
            for (s, b) in scaled.map.data().iter().zip(base.map.data()) {
                prop_assert!((s - lambda * b).abs() <= 1e-12 * (1.0 + lambda * b.abs()));
            }

            let sum = Tensor::new(g1.shape().to_vec(),
                g1.data().iter().zip(g2.data()).map(|(x, y)| x + y).collect()).unwrap();
            let both = layer_gradcam(&a, &sum).unwrap();
            let other = layer_gradcam(&a, &g2).unwrap();
            for ((s, x), y) in both.alpha.iter().zip(&base.alpha).zip(&other.alpha) {
                prop_assert!((s - (x + y)).abs() <= 1e-12);
            }
        }
    }
}
