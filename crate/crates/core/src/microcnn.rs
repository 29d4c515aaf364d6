//! A small deterministic CNN with hand-written backpropagation.
//!
//! Layout: a stack of `Conv2d(3×3, stride 1, pad 1) → ReLU [→ MaxPool 2×2]`
//! blocks followed by global average pooling and one dense layer. The forward
//! pass keeps every conv block's post-ReLU output so that Grad-CAM can be run
//! on each of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcam::LayerCapture;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// One conv block: `out_channels` 3×3 filters, optionally followed by a 2×2 max pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[channels, height, width]` of the input image.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("input extents must be positive, got {:?}", self.input)));
        }
        if self.convs.len() < 2 {
            return Err(Error::invalid("a micro-CNN needs at least two conv layers"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for (i, c) in self.convs.iter().enumerate() {
            if c.out_channels == 0 {
                return Err(Error::invalid(format!("conv {i} has zero output channels")));
            }
            if c.pool {
                if h < 2 || w < 2 {
                    return Err(Error::invalid(format!("conv {i}: cannot pool a {h}×{w} map")));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    /// Spatial size of every conv block's activation map.
    pub fn activation_sizes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        self.convs
            .iter()
            .map(|c| {
                let s = (c.out_channels, h, w);
                if c.pool {
                    h /= 2;
                    w /= 2;
                }
                s
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub in_channels: usize,
    /// `[out, in, 3, 3]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[num_classes, features]`
    pub weight: Tensor,
    /// `[num_classes]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroCnn {
    pub arch: Architecture,
    pub convs: Vec<ConvLayer>,
    pub dense: DenseLayer,
    pub seed: u64,
}

/// Output of a forward pass: every conv block's post-ReLU activation and the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub activations: Vec<Tensor>,
    pub logits: Tensor,
}

// Weights are rounded through f32 so a saved model reloads bit-identically.
fn init_uniform(rng: &mut SeededRng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len)
        .map(|_| rng.uniform(-bound, bound) as f32 as f64)
        .collect()
}

impl MicroCnn {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut in_ch = arch.input[0];
        let mut convs = Vec::with_capacity(arch.convs.len());
        for spec in &arch.convs {
            let fan_in = in_ch * 9;
            let weight = init_uniform(&mut rng, spec.out_channels * fan_in, fan_in);
            convs.push(ConvLayer {
                spec: *spec,
                in_channels: in_ch,
                weight: Tensor::from_parts_unchecked(vec![spec.out_channels, in_ch, 3, 3], weight),
                bias: Tensor::zeros(vec![spec.out_channels]),
            });
            in_ch = spec.out_channels;
        }
        let dense = DenseLayer {
            weight: Tensor::from_parts_unchecked(
                vec![arch.num_classes, in_ch],
                init_uniform(&mut rng, arch.num_classes * in_ch, in_ch),
            ),
            bias: Tensor::zeros(vec![arch.num_classes]),
        };
        Ok(MicroCnn {
            arch,
            convs,
            dense,
            seed,
        })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(arch: Architecture, convs: Vec<ConvLayer>, dense: DenseLayer, seed: u64) -> Result<Self> {
        arch.validate()?;
        if convs.len() != arch.convs.len() {
            return Err(Error::invalid(format!(
                "architecture lists {} conv layers, {} given",
                arch.convs.len(),
                convs.len()
            )));
        }
        let mut in_ch = arch.input[0];
        for (layer, spec) in convs.iter().zip(&arch.convs) {
            let want_w = vec![spec.out_channels, in_ch, 3, 3];
            if layer.spec != *spec || layer.in_channels != in_ch || layer.weight.shape() != want_w.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "conv weight",
                    expected: want_w,
                    actual: layer.weight.shape().to_vec(),
                });
            }
            if layer.bias.shape() != [spec.out_channels] {
                return Err(Error::ShapeMismatch {
                    context: "conv bias",
                    expected: vec![spec.out_channels],
                    actual: layer.bias.shape().to_vec(),
                });
            }
            in_ch = spec.out_channels;
        }
        if dense.weight.shape() != [arch.num_classes, in_ch] {
            return Err(Error::ShapeMismatch {
                context: "dense weight",
                expected: vec![arch.num_classes, in_ch],
                actual: dense.weight.shape().to_vec(),
            });
        }
        if dense.bias.shape() != [arch.num_classes] {
            return Err(Error::ShapeMismatch {
                context: "dense bias",
                expected: vec![arch.num_classes],
                actual: dense.bias.shape().to_vec(),
            });
        }
        Ok(MicroCnn {
            arch,
            convs,
            dense,
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        if image.shape() != self.arch.input {
            return Err(Error::ShapeMismatch {
                context: "model input",
                expected: self.arch.input.to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        let mut x = image.clone();
        let mut activations = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            let a = conv3x3(&x, layer).map(|v| v.max(0.0));
            x = if layer.spec.pool { max_pool(&a) } else { a.clone() };
            activations.push(a);
        }
        let logits = self.head(&x);
        Ok(ForwardTrace { activations, logits })
    }

    /// Logits obtained by substituting `activation` for conv block `layer`'s
    /// output and running only the downstream part of the network.
    pub fn forward_from_layer(&self, layer: usize, activation: &Tensor) -> Result<Tensor> {
        let sizes = self.arch.activation_sizes();
        let &(c, h, w) = sizes
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        if activation.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                context: "layer activation",
                expected: vec![c, h, w],
                actual: activation.shape().to_vec(),
            });
        }
        let mut x = if self.convs[layer].spec.pool {
            max_pool(activation)
        } else {
            activation.clone()
        };
        for l in &self.convs[layer + 1..] {
            let a = conv3x3(&x, l).map(|v| v.max(0.0));
            x = if l.spec.pool { max_pool(&a) } else { a };
        }
        Ok(self.head(&x))
    }

    fn head(&self, features: &Tensor) -> Tensor {
        let pooled = global_avg_pool(features);
        let w = self.dense.weight.data();
        let n = pooled.len();
        let logits = (0..self.arch.num_classes)
            .map(|j| {
                let row = &w[j * n..(j + 1) * n];
                let mut s = self.dense.bias.data()[j];
                for (wk, gk) in row.iter().zip(&pooled) {
                    s += wk * gk;
                }
                s
            })
            .collect();
        Tensor::from_parts_unchecked(vec![self.arch.num_classes], logits)
    }

    /// Gradient of logit `class_index` with respect to every conv block's
    /// post-ReLU activation, in network order.
    pub fn backward_to_activations(&self, trace: &ForwardTrace, class_index: usize) -> Result<Vec<Tensor>> {
        Ok(self.backward(trace, class_index)?.activations)
    }

    /// Like [`backward_to_activations`](Self::backward_to_activations) but also
    /// returns gradients with respect to each block's pre-activation.
    pub fn backward(&self, trace: &ForwardTrace, class_index: usize) -> Result<LayerGradients> {
        if class_index >= self.arch.num_classes {
            return Err(Error::invalid(format!(
                "class index {class_index} out of range for {} classes",
                self.arch.num_classes
            )));
        }
        if trace.activations.len() != self.convs.len() {
            return Err(Error::invalid("trace does not belong to this model"));
        }
        let n = self.convs.len();
        let last = &trace.activations[n - 1];
        let (c, mut h, mut w) = last.dims3()?;
        if self.convs[n - 1].spec.pool {
            h /= 2;
            w /= 2;
        }
        // d logit / d pooled feature k = W[class, k]; the average spreads it evenly.
        let row = &self.dense.weight.data()[class_index * c..(class_index + 1) * c];
        let area = (h * w) as f64;
        let mut grad_x = Vec::with_capacity(c * h * w);
        for &wk in row {
            grad_x.extend(std::iter::repeat(wk / area).take(h * w));
        }
        let mut grad_x = Tensor::from_parts_unchecked(vec![c, h, w], grad_x);

        let mut act_grads = vec![None; n];
        let mut pre_grads = vec![None; n];
        for i in (0..n).rev() {
            let a = &trace.activations[i];
            let grad_a = if self.convs[i].spec.pool {
                max_pool_backward(a, &grad_x)
            } else {
                grad_x
            };
            let grad_z = Tensor::from_parts_unchecked(
                grad_a.shape().to_vec(),
                grad_a
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
            );
            let in_shape = if i == 0 {
                self.arch.input
            } else {
                let (pc, ph, pw) = trace.activations[i - 1].dims3()?;
                if self.convs[i - 1].spec.pool {
                    [pc, ph / 2, pw / 2]
                } else {
                    [pc, ph, pw]
                }
            };
            grad_x = conv3x3_input_grad(&grad_z, &self.convs[i], in_shape);
            act_grads[i] = Some(grad_a);
            pre_grads[i] = Some(grad_z);
        }
        Ok(LayerGradients {
            activations: act_grads.into_iter().map(Option::unwrap).collect(),
            pre_activations: pre_grads.into_iter().map(Option::unwrap).collect(),
        })
    }

    /// Forward + backward, packaged as per-layer activation/gradient pairs.
    pub fn capture(&self, image: &Tensor, class_index: usize) -> Result<(ForwardTrace, Vec<LayerCapture>)> {
        let trace = self.forward(image)?;
        let grads = self.backward_to_activations(&trace, class_index)?;
        let layers = trace
            .activations
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(i, (a, g))| LayerCapture::new(format!("conv{i}"), a.clone(), g))
            .collect::<Result<Vec<_>>>()?;
        Ok((trace, layers))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub activations: Vec<Tensor>,
    pub pre_activations: Vec<Tensor>,
}

fn conv3x3(x: &Tensor, layer: &ConvLayer) -> Tensor {
    let (cin, h, w) = x.dims3().expect("conv input is C×H×W");
    let cout = layer.spec.out_channels;
    let wt = layer.weight.data();
    let src = x.data();
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        let b = layer.bias.data()[o];
        for y in 0..h {
            for xx in 0..w {
                let mut s = b;
                for c in 0..cin {
                    let kbase = (o * cin + c) * 9;
                    let plane = &src[c * h * w..(c + 1) * h * w];
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            s += wt[kbase + ky * 3 + kx] * plane[iy as usize * w + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    Tensor::from_parts_unchecked(vec![cout, h, w], out)
}

fn conv3x3_input_grad(grad_out: &Tensor, layer: &ConvLayer, in_shape: [usize; 3]) -> Tensor {
    let [cin, h, w] = in_shape;
    let cout = layer.spec.out_channels;
    let wt = layer.weight.data();
    let g = grad_out.data();
    let mut out = vec![0.0; cin * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let go = g[(o * h + y) * w + xx];
                if go == 0.0 {
                    continue;
                }
                for c in 0..cin {
                    let kbase = (o * cin + c) * 9;
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[(c * h + iy as usize) * w + ix as usize] += wt[kbase + ky * 3 + kx] * go;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts_unchecked(vec![cin, h, w], out)
}

// 2×2 window, stride 2; a trailing odd row/column is dropped.
fn pool_window_argmax(plane: &[f64], w: usize, py: usize, px: usize) -> usize {
    let mut best = (2 * py) * w + 2 * px;
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let idx = (2 * py + dy) * w + 2 * px + dx;
        // strict `>`: ties go to the first cell in row-major order
        if plane[idx] > plane[best] {
            best = idx;
        }
    }
    best
}

fn max_pool(a: &Tensor) -> Tensor {
    let (c, h, w) = a.dims3().expect("C×H×W");
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ph * pw);
    for k in 0..c {
        let plane = a.channel(k);
        for py in 0..ph {
            for px in 0..pw {
                out.push(plane[pool_window_argmax(plane, w, py, px)]);
            }
        }
    }
    Tensor::from_parts_unchecked(vec![c, ph, pw], out)
}

fn max_pool_backward(a: &Tensor, grad_pooled: &Tensor) -> Tensor {
    let (c, h, w) = a.dims3().expect("C×H×W");
    let (ph, pw) = (h / 2, w / 2);
    let g = grad_pooled.data();
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        let plane = a.channel(k);
        for py in 0..ph {
            for px in 0..pw {
                let idx = pool_window_argmax(plane, w, py, px);
                out[k * h * w + idx] += g[(k * ph + py) * pw + px];
            }
        }
    }
    Tensor::from_parts_unchecked(vec![c, h, w], out)
}

fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = x.dims3().expect("C×H×W");
    let area = (h * w) as f64;
    (0..c).map(|k| x.channel(k).iter().sum::<f64>() / area).collect()
}

/// True if the pooling window that contains `(row, col)` of `plane` has a
/// tied maximum, i.e. the downstream max pool is not differentiable there.
pub fn pool_window_tied(plane: &[f64], w: usize, row: usize, col: usize) -> bool {
    let (py, px) = (row / 2, col / 2);
    let cells = [
        plane[(2 * py) * w + 2 * px],
        plane[(2 * py) * w + 2 * px + 1],
        plane[(2 * py + 1) * w + 2 * px],
        plane[(2 * py + 1) * w + 2 * px + 1],
    ];
    let m = cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    cells.iter().filter(|&&v| v == m).count() > 1
}

/// Synthetic model, image and ground-truth mask used throughout the tests,
/// examples and the demo data set.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFixture {
    pub model: MicroCnn,
    /// `[1, H, W]`, zero outside the object.
    pub image: Tensor,
    /// `[H, W]`, 1 inside the object.
    pub mask: Tensor,
    pub target_class: usize,
}

pub const FIXTURE_SIZE: usize = 32;
pub const FIXTURE_CLASSES: usize = 3;

pub fn fixture_architecture() -> Architecture {
    Architecture {
        input: [1, FIXTURE_SIZE, FIXTURE_SIZE],
        convs: vec![
            ConvSpec { out_channels: 4, pool: false },
            ConvSpec { out_channels: 6, pool: true },
            ConvSpec { out_channels: 8, pool: true },
            ConvSpec { out_channels: 8, pool: true },
            ConvSpec { out_channels: 8, pool: false },
        ],
        num_classes: FIXTURE_CLASSES,
    }
}

/// Deterministic fixture for `seed`.
///
/// The image is a textured rectangle on a zero background and the mask is
/// that rectangle. Conv filters are non-negative and biases zero, so every
/// activation is supported on the object and its receptive-field halo. The
/// target class row of the dense layer is positive and every other row is
/// non-positive, so the target logit is the unique maximum.
pub fn make_synthetic_fixture(seed: u64) -> SyntheticFixture {
    let arch = fixture_architecture();
    let mut model = MicroCnn::init(arch, seed).expect("fixture architecture is valid");
    for layer in &mut model.convs {
        layer.weight = layer.weight.map(f64::abs);
    }
    let mut rng = SeededRng::new(seed ^ 0x5eed_f1c7_u64);
    let target_class = (seed % FIXTURE_CLASSES as u64) as usize;
    let feats = model.dense.weight.shape()[1];
    let bound = 1.0 / (feats as f64).sqrt();
    let dense: Vec<f64> = (0..FIXTURE_CLASSES * feats)
        .map(|i| {
            let v = rng.uniform(0.25 * bound, bound) as f32 as f64;
            if i / feats == target_class { v } else { -v }
        })
        .collect();
    model.dense.weight = Tensor::from_parts_unchecked(vec![FIXTURE_CLASSES, feats], dense);

    let n = FIXTURE_SIZE;
    let obj_h = 7 + rng.below(4);
    let obj_w = 7 + rng.below(4);
    let top = 3 + rng.below(n - obj_h - 6);
    let left = 3 + rng.below(n - obj_w - 6);
    let mut image = vec![0.0; n * n];
    let mut mask = vec![0.0; n * n];
    for y in top..top + obj_h {
        for x in left..left + obj_w {
            let checker = if (x + y) % 2 == 0 { 1.0 } else { 0.4 };
            image[y * n + x] = (checker * rng.uniform(0.75, 1.0)) as f32 as f64;
            mask[y * n + x] = 1.0;
        }
    }
    SyntheticFixture {
        model,
        image: Tensor::from_parts_unchecked(vec![1, n, n], image),
        mask: Tensor::from_parts_unchecked(vec![n, n], mask),
        target_class,
    }
}
