use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::net::{Activations, FeatureMap, FeatureStack, Network};
use crate::raster::{downsample_mask, ImageTensor, Mask};

/// Reference features for the content loss, optionally with the blend mask
/// resampled to each tap's resolution.
#[derive(Debug, Clone)]
pub struct ContentReference {
    features: FeatureStack,
    masks: Option<IndexMap<String, Mask>>,
    alpha: IndexMap<String, f64>,
}

impl ContentReference {
    /// `sum_l alpha_l / (2 N_l M_l) * ||F_l[x] - F_l[reference]||²`.
    pub fn new(net: &Network, reference: &ImageTensor, alpha: &IndexMap<String, f64>) -> Result<Self> {
        let acts = net.image_trace(reference)?;
        Self::build(&acts, alpha, None)
    }

    /// Masked variant: `F_l[x] ⊙ M_l` is compared with the unmasked
    /// `F_l[source]`, with `M_l` the mask box-downsampled to the tap size.
    pub fn masked(
        net: &Network,
        source: &ImageTensor,
        mask: &Mask,
        alpha: &IndexMap<String, f64>,
    ) -> Result<Self> {
        let acts = net.image_trace(source)?;
        let mut masks = IndexMap::new();
        for name in alpha.keys() {
            let f = acts.tap(name)?;
            masks.insert(name.clone(), downsample_mask(mask, f.height, f.width)?);
        }
        Self::build(&acts, alpha, Some(masks))
    }

    fn build(acts: &Activations, alpha: &IndexMap<String, f64>, masks: Option<IndexMap<String, Mask>>) -> Result<Self> {
        let mut features = FeatureStack::new();
        for name in alpha.keys() {
            features.insert(name.clone(), acts.tap(name)?.clone());
        }
        Ok(Self {
            features,
            masks,
            alpha: alpha.clone(),
        })
    }

    /// Loss value and per-tap gradients for the activations of `x`.
    pub fn terms(&self, acts: &Activations) -> Result<(f64, FeatureStack)> {
        let mut value = 0.0;
        let mut grads = FeatureStack::new();
        for (name, &alpha) in &self.alpha {
            if alpha == 0.0 {
                continue;
            }
            let f = acts.tap(name)?;
            let reference = &self.features[name];
            if f.shape() != reference.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "content tap {name}: {:?} vs reference {:?}",
                    f.shape(),
                    reference.shape()
                )));
            }
            let mask = self.masks.as_ref().map(|m| &m[name]);
            let norm = (f.channels * f.plane_len()) as f64;
            let mut g = FeatureMap::zeros(f.channels, f.height, f.width);
            let mut sum = 0.0;
            for c in 0..f.channels {
                let (fp, rp) = (f.plane(c), reference.plane(c));
                let gp = g.plane_mut(c);
                for i in 0..fp.len() {
                    let on = mask.map_or(true, |m| m.data()[i] != 0);
                    let d = if on { fp[i] } else { 0.0 } - rp[i];
                    sum += d * d;
                    if on {
                        gp[i] = alpha * d / norm;
                    }
                }
            }
            value += alpha * sum / (2.0 * norm);
            grads.insert(name.clone(), g);
        }
        Ok((value, grads))
    }
}

/// Stage-one content loss of the optimised pixels against the source.
pub fn content_loss_stage1(
    net: &Network,
    z: &ImageTensor,
    source: &ImageTensor,
    mask: &Mask,
    alpha: &IndexMap<String, f64>,
) -> Result<(f64, ImageTensor)> {
    let reference = ContentReference::masked(net, source, mask, alpha)?;
    evaluate(net, &reference, z)
}

/// Stage-two content loss against a reference image.
pub fn content_loss(
    net: &Network,
    x: &ImageTensor,
    reference: &ImageTensor,
    alpha: &IndexMap<String, f64>,
) -> Result<(f64, ImageTensor)> {
    let reference = ContentReference::new(net, reference, alpha)?;
    evaluate(net, &reference, x)
}

fn evaluate(net: &Network, reference: &ContentReference, x: &ImageTensor) -> Result<(f64, ImageTensor)> {
    let acts = net.image_trace(x)?;
    let (value, grads) = reference.terms(&acts)?;
    Ok((value, net.image_backward(&acts, &grads)?))
}
