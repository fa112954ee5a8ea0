//! A small convolutional feature extractor (3x3 convolutions, ReLU and 2x2
//! max pooling) with an exact reverse pass to the input pixels.
//!
//! Two configurations are provided: the VGG-16 prefix through `conv4_3`,
//! which needs pretrained weights in a BLW1 file, and a tiny seeded test
//! network that runs without any external data.
//!
//! All arithmetic is `f64`; weights are widened from the stored `f32`.

mod weights;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImageTensor;
use crate::rng::UniformStream;

pub use weights::{load_weights, write_weights, WeightStore, WeightTensor};

/// Channel-major activation tensor, `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_image(img: &ImageTensor) -> Self {
        Self {
            channels: img.channels(),
            height: img.height(),
            width: img.width(),
            data: img.data().to_vec(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Spatial size of one channel (`M_l`).
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Tap name to activation, in network tap order.
pub type FeatureStack = IndexMap<String, FeatureMap>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Stride 1, zero padding 1.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    /// Stride 2; odd trailing rows/columns are dropped.
    MaxPool2x2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// A named view of the output of `layers[layer]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub name: String,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<Tap>,
    /// Taps that carry the content loss by default.
    pub content_taps: Vec<String>,
}

impl NetworkSpec {
    /// VGG-16 through `conv4_3`. Taps are the rectified outputs of
    /// `conv1_2`, `conv2_2`, `conv3_3` and `conv4_3`.
    pub fn vgg16() -> Self {
        let blocks: [(usize, usize, usize); 4] = [(1, 64, 2), (2, 128, 2), (3, 256, 3), (4, 512, 3)];
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut in_channels = 3;
        for (block, width, convs) in blocks {
            if block > 1 {
                layers.push(LayerSpec {
                    name: format!("pool{}", block - 1),
                    kind: LayerKind::MaxPool2x2,
                });
            }
            for i in 1..=convs {
                layers.push(LayerSpec {
                    name: format!("conv{block}_{i}"),
                    kind: LayerKind::Conv3x3 {
                        in_channels,
                        out_channels: width,
                    },
                });
                layers.push(LayerSpec {
                    name: format!("relu{block}_{i}"),
                    kind: LayerKind::Relu,
                });
                in_channels = width;
            }
            taps.push(Tap {
                name: format!("conv{block}_{convs}"),
                layer: layers.len() - 1,
            });
        }
        Self {
            input_channels: 3,
            layers,
            taps,
            content_taps: vec!["conv2_2".into()],
        }
    }

    /// conv 3->8, relu, pool, conv 8->16, relu; taps `t1` and `t2` after
    /// each ReLU.
    pub fn test_network() -> Self {
        let conv = |name: &str, i, o| LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv3x3 {
                in_channels: i,
                out_channels: o,
            },
        };
        let plain = |name: &str, kind| LayerSpec {
            name: name.into(),
            kind,
        };
        Self {
            input_channels: 3,
            layers: vec![
                conv("conv1", 3, 8),
                plain("relu1", LayerKind::Relu),
                plain("pool1", LayerKind::MaxPool2x2),
                conv("conv2", 8, 16),
                plain("relu2", LayerKind::Relu),
            ],
            taps: vec![
                Tap {
                    name: "t1".into(),
                    layer: 1,
                },
                Tap {
                    name: "t2".into(),
                    layer: 4,
                },
            ],
            content_taps: vec!["t2".into()],
        }
    }

    pub fn tap_names(&self) -> impl Iterator<Item = &str> {
        self.taps.iter().map(|t| t.name.as_str())
    }

    pub fn tap(&self, name: &str) -> Result<&Tap> {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut channels = self.input_channels;
        for layer in &self.layers {
            if let LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } = layer.kind
            {
                if in_channels != channels {
                    return Err(Error::InvalidArgument(format!(
                        "{} expects {in_channels} channels but receives {channels}",
                        layer.name
                    )));
                }
                channels = out_channels;
            }
        }
        for (i, tap) in self.taps.iter().enumerate() {
            if tap.layer >= self.layers.len() {
                return Err(Error::InvalidArgument(format!("tap {} points past the network", tap.name)));
            }
            if self.taps[..i].iter().any(|t| t.name == tap.name) {
                return Err(Error::InvalidArgument(format!("duplicate tap {}", tap.name)));
            }
        }
        for name in &self.content_taps {
            self.tap(name)?;
        }
        Ok(())
    }

    /// Activation shapes `(channels, height, width)` of every tap for an
    /// input of `height x width`.
    pub fn tap_shapes(&self, height: usize, width: usize) -> IndexMap<String, (usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (mut c, mut h, mut w) = (self.input_channels, height, width);
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv3x3 { out_channels, .. } => c = out_channels,
                LayerKind::Relu => {}
                LayerKind::MaxPool2x2 => {
                    h /= 2;
                    w /= 2;
                }
            }
            shapes.push((c, h, w));
        }
        self.taps.iter().map(|t| (t.name.clone(), shapes[t.layer])).collect()
    }

    fn deepest_tap(&self) -> Option<usize> {
        self.taps.iter().map(|t| t.layer).max()
    }
}

/// Input normalisation applied before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preprocessing {
    Identity,
    /// `(v - mean_c) / std_c` with the usual ImageNet statistics on `[0, 1]`
    /// inputs.
    ImageNet,
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
struct ConvParams {
    in_channels: usize,
    out_channels: usize,
    /// `(out, in, 3, 3)` row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// A network spec bound to validated weights.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    preprocessing: Preprocessing,
    convs: Vec<Option<ConvParams>>,
}

/// Every layer output from one forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Activations {
    input: FeatureMap,
    outputs: Vec<FeatureMap>,
    /// Flat input index of the winner for each pooled output element.
    argmax: Vec<Option<Vec<usize>>>,
    tap_layers: IndexMap<String, usize>,
}

impl Activations {
    pub fn tap(&self, name: &str) -> Result<&FeatureMap> {
        let layer = self
            .tap_layers
            .get(name)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))?;
        Ok(&self.outputs[*layer])
    }

    pub fn taps(&self) -> FeatureStack {
        self.tap_layers
            .iter()
            .map(|(name, &layer)| (name.clone(), self.outputs[layer].clone()))
            .collect()
    }

    pub fn input(&self) -> &FeatureMap {
        &self.input
    }
}

impl Network {
    pub fn new(spec: NetworkSpec, weights: &WeightStore, preprocessing: Preprocessing) -> Result<Self> {
        spec.validate()?;
        let convs = spec
            .layers
            .iter()
            .map(|layer| match layer.kind {
                LayerKind::Conv3x3 {
                    in_channels,
                    out_channels,
                } => {
                    let w = weights.expect(&weight_name(&layer.name), &[out_channels, in_channels, 3, 3])?;
                    let b = weights.expect(&bias_name(&layer.name), &[out_channels])?;
                    Ok(Some(ConvParams {
                        in_channels,
                        out_channels,
                        weight: w.data.iter().map(|&v| v as f64).collect(),
                        bias: b.data.iter().map(|&v| v as f64).collect(),
                    }))
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            preprocessing,
            convs,
        })
    }

    pub fn vgg16(weights: &WeightStore) -> Result<Self> {
        Self::new(NetworkSpec::vgg16(), weights, Preprocessing::ImageNet)
    }

    pub fn test_network(seed: u64) -> Self {
        let (spec, weights) = test_network(seed);
        Self::new(spec, &weights, Preprocessing::Identity).expect("test network weights are consistent")
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    pub fn preprocess(&self, img: &ImageTensor) -> Result<FeatureMap> {
        preprocess(img, self.preprocessing)
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureStack> {
        Ok(self.trace(input)?.taps())
    }

    /// Runs the layers up to the deepest tap and keeps every output.
    pub fn trace(&self, input: &FeatureMap) -> Result<Activations> {
        if input.channels != self.spec.input_channels {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} input channels, got {}",
                self.spec.input_channels, input.channels
            )));
        }
        let depth = self.spec.deepest_tap().map_or(0, |d| d + 1);
        let mut outputs: Vec<FeatureMap> = Vec::with_capacity(depth);
        let mut argmax = Vec::with_capacity(depth);
        for (i, layer) in self.spec.layers[..depth].iter().enumerate() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let (y, winners) = match layer.kind {
                LayerKind::Conv3x3 { .. } => (conv_forward(x, self.convs[i].as_ref().unwrap()), None),
                LayerKind::Relu => {
                    let mut y = x.clone();
                    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    (y, None)
                }
                LayerKind::MaxPool2x2 => {
                    let (y, idx) = maxpool_forward(x);
                    (y, Some(idx))
                }
            };
            outputs.push(y);
            argmax.push(winners);
        }
        Ok(Activations {
            input: input.clone(),
            outputs,
            argmax,
            tap_layers: self.spec.taps.iter().map(|t| (t.name.clone(), t.layer)).collect(),
        })
    }

    /// Gradient of `sum_taps <tap_grads[tap], activation[tap]>` with respect
    /// to the network input. Missing taps count as zero.
    pub fn backward(&self, input: &FeatureMap, tap_grads: &FeatureStack) -> Result<FeatureMap> {
        let acts = self.trace(input)?;
        self.backward_from(&acts, tap_grads)
    }

    pub fn backward_from(&self, acts: &Activations, tap_grads: &FeatureStack) -> Result<FeatureMap> {
        let mut by_layer: Vec<Vec<&FeatureMap>> = vec![Vec::new(); acts.outputs.len()];
        for (name, grad) in tap_grads {
            let layer = *acts
                .tap_layers
                .get(name)
                .ok_or_else(|| Error::UnknownTap(name.clone()))?;
            if grad.shape() != acts.outputs[layer].shape() {
                return Err(Error::DimensionMismatch(format!(
                    "gradient for tap {name} has shape {:?}, activation is {:?}",
                    grad.shape(),
                    acts.outputs[layer].shape()
                )));
            }
            by_layer[layer].push(grad);
        }
        let Some(top) = by_layer.iter().rposition(|g| !g.is_empty()) else {
            let (c, h, w) = acts.input.shape();
            return Ok(FeatureMap::zeros(c, h, w));
        };

        let (c, h, w) = acts.outputs[top].shape();
        let mut grad = FeatureMap::zeros(c, h, w);
        for i in (0..=top).rev() {
            for g in &by_layer[i] {
                grad.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
            }
            let x = if i == 0 { &acts.input } else { &acts.outputs[i - 1] };
            grad = match self.spec.layers[i].kind {
                LayerKind::Conv3x3 { .. } => conv_backward(&grad, self.convs[i].as_ref().unwrap(), x.height, x.width),
                LayerKind::Relu => {
                    let y = &acts.outputs[i];
                    grad.data
                        .iter_mut()
                        .zip(&y.data)
                        .for_each(|(g, &out)| if out <= 0.0 { *g = 0.0 });
                    grad
                }
                LayerKind::MaxPool2x2 => {
                    let mut up = FeatureMap::zeros(x.channels, x.height, x.width);
                    for (&src, &g) in acts.argmax[i].as_ref().unwrap().iter().zip(&grad.data) {
                        up.data[src] += g;
                    }
                    up
                }
            };
        }
        Ok(grad)
    }

    /// Preprocesses an image and runs the forward pass.
    pub fn image_trace(&self, img: &ImageTensor) -> Result<Activations> {
        self.trace(&self.preprocess(img)?)
    }

    /// Reverse pass through the network and the preprocessing, giving the
    /// gradient with respect to image pixels.
    pub fn image_backward(&self, acts: &Activations, tap_grads: &FeatureStack) -> Result<ImageTensor> {
        let mut g = self.backward_from(acts, tap_grads)?;
        if self.preprocessing == Preprocessing::ImageNet {
            for c in 0..g.channels {
                let s = IMAGENET_STD[c];
                g.plane_mut(c).iter_mut().for_each(|v| *v /= s);
            }
        }
        ImageTensor::from_planar(g.height, g.width, g.channels, g.data)
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// The seeded test network. Weights are drawn uniformly from `[-0.1, 0.1]`
/// with splitmix64, layer by layer, kernel (in `(out, in, 3, 3)` order) then
/// bias.
pub fn test_network(seed: u64) -> (NetworkSpec, WeightStore) {
    let spec = NetworkSpec::test_network();
    let mut rng = UniformStream::new(seed);
    let mut store = WeightStore::new();
    for layer in &spec.layers {
        if let LayerKind::Conv3x3 {
            in_channels,
            out_channels,
        } = layer.kind
        {
            let mut draw = |n: usize| (0..n).map(|_| rng.next_in(-0.1, 0.1) as f32).collect::<Vec<_>>();
            let w = draw(out_channels * in_channels * 9);
            let b = draw(out_channels);
            store
                .insert(weight_name(&layer.name), WeightTensor::new(vec![out_channels, in_channels, 3, 3], w).unwrap())
                .unwrap();
            store
                .insert(bias_name(&layer.name), WeightTensor::new(vec![out_channels], b).unwrap())
                .unwrap();
        }
    }
    (spec, store)
}

pub fn preprocess(img: &ImageTensor, mode: Preprocessing) -> Result<FeatureMap> {
    let mut out = FeatureMap::from_image(img);
    if mode == Preprocessing::ImageNet {
        if img.channels() != 3 {
            return Err(Error::InvalidArgument(format!(
                "ImageNet preprocessing needs 3 channels, got {}",
                img.channels()
            )));
        }
        for c in 0..3 {
            let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
            out.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
    Ok(out)
}

fn conv_forward(x: &FeatureMap, p: &ConvParams) -> FeatureMap {
    let (h, w) = (x.height, x.width);
    let mut y = FeatureMap::zeros(p.out_channels, h, w);
    if h * w == 0 {
        return y;
    }
    y.data.par_chunks_mut(h * w).enumerate().for_each(|(co, out)| {
        out.fill(p.bias[co]);
        for ci in 0..p.in_channels {
            let input = x.plane(ci);
            let kernel = &p.weight[(co * p.in_channels + ci) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = kernel[ky * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    // output (y, x) reads input (y + ky - 1, x + kx - 1)
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for oy in y0..y1 {
                        let iy = oy + ky - 1;
                        let src = &input[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        let dst = &mut out[oy * w + x0..oy * w + x1];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
                    }
                }
            }
        }
    });
    y
}

fn conv_backward(g: &FeatureMap, p: &ConvParams, h: usize, w: usize) -> FeatureMap {
    let mut dx = FeatureMap::zeros(p.in_channels, h, w);
    if h * w == 0 {
        return dx;
    }
    dx.data.par_chunks_mut(h * w).enumerate().for_each(|(ci, out)| {
        for co in 0..p.out_channels {
            let grad = g.plane(co);
            let kernel = &p.weight[(co * p.in_channels + ci) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = kernel[ky * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for oy in y0..y1 {
                        let iy = oy + ky - 1;
                        let src = &grad[oy * w + x0..oy * w + x1];
                        let dst = &mut out[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
                    }
                }
            }
        }
    });
    dx
}

/// First maximum in row-major window order wins ties.
fn maxpool_forward(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut y = FeatureMap::zeros(x.channels, oh, ow);
    let mut idx = vec![0usize; x.channels * oh * ow];
    for c in 0..x.channels {
        let base = c * x.height * x.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * x.width + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * x.width + 2 * ox + dx;
                    if x.data[cand] > x.data[best] {
                        best = cand;
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                y.data[o] = x.data[best];
                idx[o] = best;
            }
        }
    }
    (y, idx)
}
