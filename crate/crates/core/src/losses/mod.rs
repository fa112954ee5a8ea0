//! The loss terms of the two optimisation stages and their weighted sums.
//!
//! Every term returns a scalar and an analytic gradient with respect to the
//! optimised image. Deep-feature terms are evaluated on a shared forward pass
//! and their tap gradients are summed before a single reverse pass.

mod content;
mod gradient;
mod histogram;
mod style;
mod tv;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{FeatureStack, Network, NetworkSpec};
use crate::raster::{composite, ImageTensor, Mask};

pub use content::{content_loss, content_loss_stage1, ContentReference};
pub use gradient::{grad_loss, GradVariant, GradientLoss};
pub use histogram::{hist_loss, histogram_match, HistogramReference};
pub use style::{gram, style_loss, StyleReference};
pub use tv::tv_loss;

pub const STAGE_ONE_TERMS: [&str; 5] = ["grad", "cont", "style", "hist", "tv"];
pub const STAGE_TWO_TERMS: [&str; 4] = ["cont", "style", "hist", "tv"];

/// Term weights plus per-tap layer weights (`alpha` for content, `beta` for
/// style, `gamma` for histogram).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_grad: f64,
    pub lambda_cont: f64,
    pub lambda_style: f64,
    pub lambda_hist: f64,
    pub lambda_tv: f64,
    pub alpha: IndexMap<String, f64>,
    pub beta: IndexMap<String, f64>,
    pub gamma: IndexMap<String, f64>,
}

impl LossWeights {
    /// All term weights zero; layer weights at their defaults for `spec`.
    pub fn zero(spec: &NetworkSpec) -> Self {
        let ones = |names: Vec<&str>| names.into_iter().map(|n| (n.to_string(), 1.0)).collect();
        Self {
            lambda_grad: 0.0,
            lambda_cont: 0.0,
            lambda_style: 0.0,
            lambda_hist: 0.0,
            lambda_tv: 0.0,
            alpha: ones(spec.content_taps.iter().map(String::as_str).collect()),
            beta: ones(spec.tap_names().collect()),
            gamma: ones(spec.tap_names().collect()),
        }
    }

    pub fn stage_one(spec: &NetworkSpec) -> Self {
        Self {
            lambda_grad: 1e6,
            lambda_cont: 1.0,
            lambda_style: 1e6,
            lambda_hist: 1.0,
            lambda_tv: 1e-5,
            ..Self::zero(spec)
        }
    }

    pub fn stage_two(spec: &NetworkSpec) -> Self {
        Self {
            lambda_grad: 0.0,
            lambda_cont: 1.0,
            lambda_style: 1e8,
            lambda_hist: 1.0,
            lambda_tv: 1e-5,
            ..Self::zero(spec)
        }
    }

    /// Replaces the per-tap weights with the defaults for `spec`.
    pub fn reset_layers(&mut self, spec: &NetworkSpec) {
        let Self { alpha, beta, gamma, .. } = Self::zero(spec);
        (self.alpha, self.beta, self.gamma) = (alpha, beta, gamma);
    }

    pub fn lambda(&self, term: &str) -> f64 {
        match term {
            "grad" => self.lambda_grad,
            "cont" => self.lambda_cont,
            "style" => self.lambda_style,
            "hist" => self.lambda_hist,
            "tv" => self.lambda_tv,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = STAGE_ONE_TERMS.iter().map(|t| (t.to_string(), self.lambda(t)));
        let layers = [("alpha", &self.alpha), ("beta", &self.beta), ("gamma", &self.gamma)]
            .into_iter()
            .flat_map(|(k, m)| m.iter().map(move |(tap, v)| (format!("{k}[{tap}]"), *v)));
        for (name, v) in scalars.chain(layers) {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    /// Unweighted term values in stage order. Terms whose weight is zero are
    /// not evaluated and read 0.
    pub terms: IndexMap<&'static str, f64>,
    pub gradient: ImageTensor,
}

fn add_scaled(acc: &mut FeatureStack, grads: FeatureStack, scale: f64) {
    for (name, mut g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += scale * y),
            None => {
                g.data.iter_mut().for_each(|v| *v *= scale);
                acc.insert(name, g);
            }
        }
    }
}

fn axpy(acc: &mut ImageTensor, scale: f64, g: &ImageTensor) {
    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += scale * b);
}

fn finish(terms: IndexMap<&'static str, f64>, weights: &LossWeights, gradient: ImageTensor) -> LossReport {
    let total = terms.iter().map(|(t, v)| weights.lambda(t) * v).sum();
    LossReport {
        total,
        terms,
        gradient,
    }
}

/// Stage-one objective over the optimised pixels `I_Z`, with everything that
/// depends only on source, target and mask precomputed.
pub struct StageOneLoss<'a> {
    net: &'a Network,
    target: ImageTensor,
    mask: Mask,
    weights: LossWeights,
    gradient: GradientLoss,
    content: ContentReference,
    style: StyleReference,
    hist: HistogramReference,
}

impl<'a> StageOneLoss<'a> {
    pub fn new(
        net: &'a Network,
        source: &ImageTensor,
        target: &ImageTensor,
        mask: &Mask,
        variant: GradVariant,
        weights: &LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        Ok(Self {
            net,
            target: target.clone(),
            mask: mask.clone(),
            weights: weights.clone(),
            gradient: GradientLoss::new(source, target, mask, variant)?,
            content: ContentReference::masked(net, source, mask, &weights.alpha)?,
            style: StyleReference::new(net, target, &weights.beta)?,
            hist: HistogramReference::new(net, target, &weights.gamma)?,
        })
    }

    pub fn evaluate(&self, z: &ImageTensor) -> Result<LossReport> {
        let w = &self.weights;
        let blend = composite(z, &self.target, &self.mask)?;
        let mut terms: IndexMap<&'static str, f64> = STAGE_ONE_TERMS.iter().map(|&t| (t, 0.0)).collect();
        let mut grad_blend = ImageTensor::zeros(z.height(), z.width(), z.channels());

        if w.lambda_grad > 0.0 {
            let (v, g) = self.gradient.evaluate_blend(&blend);
            terms["grad"] = v;
            axpy(&mut grad_blend, w.lambda_grad, &g);
        }
        if w.lambda_style > 0.0 || w.lambda_hist > 0.0 {
            let acts = self.net.image_trace(&blend)?;
            let mut taps = FeatureStack::new();
            if w.lambda_style > 0.0 {
                let (v, g) = self.style.terms(&acts)?;
                terms["style"] = v;
                add_scaled(&mut taps, g, w.lambda_style);
            }
            if w.lambda_hist > 0.0 {
                let (v, g) = self.hist.terms(&acts)?;
                terms["hist"] = v;
                add_scaled(&mut taps, g, w.lambda_hist);
            }
            axpy(&mut grad_blend, 1.0, &self.net.image_backward(&acts, &taps)?);
        }
        if w.lambda_tv > 0.0 {
            let (v, g) = tv_loss(&blend);
            terms["tv"] = v;
            axpy(&mut grad_blend, w.lambda_tv, &g);
        }
        // I_B depends on I_Z only inside the mask
        let mut gradient = grad_blend.masked(&self.mask)?;

        if w.lambda_cont > 0.0 {
            let acts = self.net.image_trace(z)?;
            let (v, g) = self.content.terms(&acts)?;
            terms["cont"] = v;
            let mut taps = FeatureStack::new();
            add_scaled(&mut taps, g, w.lambda_cont);
            axpy(&mut gradient, 1.0, &self.net.image_backward(&acts, &taps)?);
        }
        Ok(finish(terms, w, gradient))
    }
}

/// Stage-two objective over the whole refined image `I_BR`.
pub struct StageTwoLoss<'a> {
    net: &'a Network,
    weights: LossWeights,
    content: ContentReference,
    style: StyleReference,
    hist: HistogramReference,
}

impl<'a> StageTwoLoss<'a> {
    /// `lambda_grad` is ignored: stage two has no gradient-domain term.
    pub fn new(net: &'a Network, blend: &ImageTensor, target: &ImageTensor, weights: &LossWeights) -> Result<Self> {
        weights.validate()?;
        if !blend.same_shape(target) {
            return Err(Error::DimensionMismatch("stage two needs blend and target on one frame".into()));
        }
        Ok(Self {
            net,
            weights: LossWeights {
                lambda_grad: 0.0,
                ..weights.clone()
            },
            content: ContentReference::new(net, blend, &weights.alpha)?,
            style: StyleReference::new(net, target, &weights.beta)?,
            hist: HistogramReference::new(net, target, &weights.gamma)?,
        })
    }

    pub fn evaluate(&self, x: &ImageTensor) -> Result<LossReport> {
        let w = &self.weights;
        let mut terms: IndexMap<&'static str, f64> = STAGE_TWO_TERMS.iter().map(|&t| (t, 0.0)).collect();
        let mut gradient = ImageTensor::zeros(x.height(), x.width(), x.channels());
        if w.lambda_cont > 0.0 || w.lambda_style > 0.0 || w.lambda_hist > 0.0 {
            let acts = self.net.image_trace(x)?;
            let mut taps = FeatureStack::new();
            if w.lambda_cont > 0.0 {
                let (v, g) = self.content.terms(&acts)?;
                terms["cont"] = v;
                add_scaled(&mut taps, g, w.lambda_cont);
            }
            if w.lambda_style > 0.0 {
                let (v, g) = self.style.terms(&acts)?;
                terms["style"] = v;
                add_scaled(&mut taps, g, w.lambda_style);
            }
            if w.lambda_hist > 0.0 {
                let (v, g) = self.hist.terms(&acts)?;
                terms["hist"] = v;
                add_scaled(&mut taps, g, w.lambda_hist);
            }
            axpy(&mut gradient, 1.0, &self.net.image_backward(&acts, &taps)?);
        }
        if w.lambda_tv > 0.0 {
            let (v, g) = tv_loss(x);
            terms["tv"] = v;
            axpy(&mut gradient, w.lambda_tv, &g);
        }
        Ok(finish(terms, w, gradient))
    }
}

/// Inputs for a one-off [`total_loss`] evaluation.
pub enum StageState<'s> {
    One {
        z: &'s ImageTensor,
        source: &'s ImageTensor,
        target: &'s ImageTensor,
        mask: &'s Mask,
        variant: GradVariant,
    },
    Two {
        x: &'s ImageTensor,
        blend: &'s ImageTensor,
        target: &'s ImageTensor,
    },
}

pub fn total_loss(net: &Network, weights: &LossWeights, state: StageState<'_>) -> Result<LossReport> {
    match state {
        StageState::One {
            z,
            source,
            target,
            mask,
            variant,
        } => StageOneLoss::new(net, source, target, mask, variant, weights)?.evaluate(z),
        StageState::Two { x, blend, target } => StageTwoLoss::new(net, blend, target, weights)?.evaluate(x),
    }
}
