use indexmap::IndexMap;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{Activations, FeatureMap, FeatureStack, Network};
use crate::raster::ImageTensor;

/// `G = F Fᵀ` for an activation viewed as `channels x (height * width)`.
/// Row-major `channels x channels`.
pub fn gram(f: &FeatureMap) -> Vec<f64> {
    let n = f.channels;
    let mut g = vec![0.0; n * n];
    g.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a = f.plane(i);
        for (j, out) in row.iter_mut().enumerate() {
            *out = a.iter().zip(f.plane(j)).map(|(x, y)| x * y).sum();
        }
    });
    g
}

/// Target Gram matrices for the style loss.
#[derive(Debug, Clone)]
pub struct StyleReference {
    grams: IndexMap<String, Vec<f64>>,
    beta: IndexMap<String, f64>,
}

impl StyleReference {
    pub fn new(net: &Network, target: &ImageTensor, beta: &IndexMap<String, f64>) -> Result<Self> {
        let acts = net.image_trace(target)?;
        let mut grams = IndexMap::new();
        for name in beta.keys() {
            grams.insert(name.clone(), gram(acts.tap(name)?));
        }
        Ok(Self {
            grams,
            beta: beta.clone(),
        })
    }

    /// `sum_l beta_l / (2 N_l²) * ||G_l[x] - G_l[target]||²` and its per-tap
    /// gradient `(2 beta_l / N_l²) (G_l[x] - G_l[target]) F_l`.
    pub fn terms(&self, acts: &Activations) -> Result<(f64, FeatureStack)> {
        let mut value = 0.0;
        let mut grads = FeatureStack::new();
        for (name, &beta) in &self.beta {
            if beta == 0.0 {
                continue;
            }
            let f = acts.tap(name)?;
            let target = &self.grams[name];
            let n = f.channels;
            if target.len() != n * n {
                return Err(Error::DimensionMismatch(format!("style tap {name} channel count changed")));
            }
            let diff: Vec<f64> = gram(f).iter().zip(target).map(|(a, b)| a - b).collect();
            let nn = (n * n) as f64;
            value += beta / (2.0 * nn) * diff.iter().map(|d| d * d).sum::<f64>();

            let scale = 2.0 * beta / nn;
            let m = f.plane_len();
            let mut g = FeatureMap::zeros(n, f.height, f.width);
            g.data.par_chunks_mut(m).enumerate().for_each(|(a, out)| {
                for j in 0..n {
                    let d = diff[a * n + j];
                    if d == 0.0 {
                        continue;
                    }
                    let k = scale * d;
                    out.iter_mut().zip(f.plane(j)).for_each(|(o, v)| *o += k * v);
                }
            });
            grads.insert(name.clone(), g);
        }
        Ok((value, grads))
    }
}

/// Style loss of `x` against `target`; both must share a resolution.
pub fn style_loss(
    net: &Network,
    x: &ImageTensor,
    target: &ImageTensor,
    beta: &IndexMap<String, f64>,
) -> Result<(f64, ImageTensor)> {
    if !x.same_frame(target) {
        return Err(Error::DimensionMismatch(format!(
            "style loss: {}x{} vs target {}x{}",
            x.height(),
            x.width(),
            target.height(),
            target.width()
        )));
    }
    let reference = StyleReference::new(net, target, beta)?;
    let acts = net.image_trace(x)?;
    let (value, grads) = reference.terms(&acts)?;
    Ok((value, net.image_backward(&acts, &grads)?))
}
