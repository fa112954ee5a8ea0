use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{composite, laplacian, laplacian_adjoint, ImageTensor, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradVariant {
    /// Residual `Δ(I_B) - (Δ(I_S) + Δ(I_T))` over the whole frame.
    #[default]
    Literal,
    /// Residual `Δ(I_B) - Δ(I_S)` restricted to the mask.
    CropOut,
}

/// Laplacian-domain blending loss with its guidance precomputed.
#[derive(Debug, Clone)]
pub struct GradientLoss {
    target: ImageTensor,
    mask: Mask,
    guidance: ImageTensor,
    variant: GradVariant,
}

impl GradientLoss {
    pub fn new(source: &ImageTensor, target: &ImageTensor, mask: &Mask, variant: GradVariant) -> Result<Self> {
        if !source.same_shape(target) || source.height() != mask.height() || source.width() != mask.width() {
            return Err(Error::DimensionMismatch(
                "gradient loss needs source, target and mask on one frame".into(),
            ));
        }
        let mut guidance = laplacian(source);
        if variant == GradVariant::Literal {
            let lt = laplacian(target);
            guidance.data_mut().iter_mut().zip(lt.data()).for_each(|(g, t)| *g += t);
        }
        Ok(Self {
            target: target.clone(),
            mask: mask.clone(),
            guidance,
            variant,
        })
    }

    /// Loss and gradient with respect to the blend image `I_B`.
    pub fn evaluate_blend(&self, blend: &ImageTensor) -> (f64, ImageTensor) {
        let mut residual = laplacian(blend);
        residual
            .data_mut()
            .iter_mut()
            .zip(self.guidance.data())
            .for_each(|(r, g)| *r -= g);
        if self.variant == GradVariant::CropOut {
            residual = residual.masked(&self.mask).expect("frames checked at construction");
        }
        let hw = (blend.height() * blend.width()) as f64;
        let value = residual.data().iter().map(|r| r * r).sum::<f64>() / (2.0 * hw);
        let mut grad = laplacian_adjoint(&residual);
        grad.data_mut().iter_mut().for_each(|g| *g /= hw);
        (value, grad)
    }

    /// Loss and gradient with respect to the optimised pixels `I_Z`; zero
    /// wherever the mask is 0.
    pub fn evaluate(&self, z: &ImageTensor) -> Result<(f64, ImageTensor)> {
        let blend = composite(z, &self.target, &self.mask)?;
        let (value, grad) = self.evaluate_blend(&blend);
        Ok((value, grad.masked(&self.mask)?))
    }
}

pub fn grad_loss(
    z: &ImageTensor,
    source: &ImageTensor,
    target: &ImageTensor,
    mask: &Mask,
    variant: GradVariant,
) -> Result<(f64, ImageTensor)> {
    GradientLoss::new(source, target, mask, variant)?.evaluate(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_inputs_have_zero_loss() {
        let c = ImageTensor::filled(5, 6, 3, 0.4);
        let mask = Mask::from_fn(5, 6, |y, x| y > 1 && x > 2);
        for variant in [GradVariant::Literal, GradVariant::CropOut] {
            let (v, g) = grad_loss(&c, &c, &c, &mask, variant).unwrap();
            assert_eq!(v, 0.0);
            assert!(g.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gradient_vanishes_off_mask() {
        let z = ImageTensor::from_fn(6, 6, 1, |_, y, x| ((y * 5 + x * 3) % 7) as f64 / 7.0);
        let s = ImageTensor::from_fn(6, 6, 1, |_, y, x| (y + x) as f64 / 12.0);
        let t = ImageTensor::from_fn(6, 6, 1, |_, y, _| y as f64 / 6.0);
        let mask = Mask::from_fn(6, 6, |y, x| (2..4).contains(&y) && (1..5).contains(&x));
        let (_, g) = grad_loss(&z, &s, &t, &mask, GradVariant::Literal).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                if !mask.get(y, x) {
                    assert_eq!(g.get(0, y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_frames() {
        let a = ImageTensor::zeros(4, 4, 1);
        let b = ImageTensor::zeros(4, 5, 1);
        assert!(grad_loss(&a, &a, &b, &Mask::filled(4, 4, true), GradVariant::Literal).is_err());
    }
}
