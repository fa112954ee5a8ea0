use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::net::{Activations, FeatureMap, FeatureStack, Network};
use crate::raster::ImageTensor;

/// Rank-based histogram matching: the value of rank `r` among `values`
/// becomes the reference quantile at position
/// `round(r * (len_ref - 1) / (len_values - 1))`. A single value maps to the
/// (lower) reference median.
pub fn histogram_match(values: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("histogram matching needs non-empty inputs".into()));
    }
    let mut sorted = reference.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(match_sorted(values, &sorted))
}

fn match_sorted(values: &[f64], sorted_ref: &[f64]) -> Vec<f64> {
    let (n, m) = (values.len(), sorted_ref.len());
    if n == 1 {
        return vec![sorted_ref[(m - 1) / 2]];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        // round half up in integers
        let pos = (2 * rank * (m - 1) + (n - 1)) / (2 * (n - 1));
        out[i] = sorted_ref[pos];
    }
    out
}

/// Per-channel sorted target activations for the histogram loss.
#[derive(Debug, Clone)]
pub struct HistogramReference {
    sorted: IndexMap<String, Vec<Vec<f64>>>,
    gamma: IndexMap<String, f64>,
}

impl HistogramReference {
    pub fn new(net: &Network, target: &ImageTensor, gamma: &IndexMap<String, f64>) -> Result<Self> {
        let acts = net.image_trace(target)?;
        let mut sorted = IndexMap::new();
        for name in gamma.keys() {
            let f = acts.tap(name)?;
            let channels = (0..f.channels)
                .map(|c| {
                    let mut v = f.plane(c).to_vec();
                    v.sort_by(f64::total_cmp);
                    v
                })
                .collect();
            sorted.insert(name.clone(), channels);
        }
        Ok(Self {
            sorted,
            gamma: gamma.clone(),
        })
    }

    /// The matched activations `R_l` for each tap with non-zero weight.
    pub fn matched(&self, acts: &Activations) -> Result<FeatureStack> {
        let mut out = FeatureStack::new();
        for (name, &gamma) in &self.gamma {
            if gamma == 0.0 {
                continue;
            }
            let f = acts.tap(name)?;
            let sorted = &self.sorted[name];
            if sorted.len() != f.channels {
                return Err(Error::DimensionMismatch(format!("histogram tap {name} channel count changed")));
            }
            let mut r = FeatureMap::zeros(f.channels, f.height, f.width);
            for c in 0..f.channels {
                r.plane_mut(c).copy_from_slice(&match_sorted(f.plane(c), &sorted[c]));
            }
            out.insert(name.clone(), r);
        }
        Ok(out)
    }

    /// `sum_l gamma_l ||F_l - R_l||²`, with `R_l` held fixed for the
    /// gradient `2 gamma_l (F_l - R_l)`.
    pub fn terms(&self, acts: &Activations) -> Result<(f64, FeatureStack)> {
        let matched = self.matched(acts)?;
        let mut value = 0.0;
        let mut grads = FeatureStack::new();
        for (name, r) in matched {
            let gamma = self.gamma[&name];
            let f = acts.tap(&name)?;
            let mut g = FeatureMap::zeros(f.channels, f.height, f.width);
            let mut sum = 0.0;
            for ((gi, fi), ri) in g.data.iter_mut().zip(&f.data).zip(&r.data) {
                let d = fi - ri;
                sum += d * d;
                *gi = 2.0 * gamma * d;
            }
            value += gamma * sum;
            grads.insert(name, g);
        }
        Ok((value, grads))
    }
}

pub fn hist_loss(
    net: &Network,
    x: &ImageTensor,
    target: &ImageTensor,
    gamma: &IndexMap<String, f64>,
) -> Result<(f64, ImageTensor)> {
    let reference = HistogramReference::new(net, target, gamma)?;
    let acts = net.image_trace(x)?;
    let (value, grads) = reference.terms(&acts)?;
    Ok((value, net.image_backward(&acts, &grads)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_by_rank() {
        assert_eq!(histogram_match(&[3.0, 1.0, 2.0], &[10.0, 30.0, 20.0]).unwrap(), vec![30.0, 10.0, 20.0]);
    }

    #[test]
    fn single_value_takes_median() {
        assert_eq!(histogram_match(&[5.0], &[4.0, 1.0, 9.0]).unwrap(), vec![4.0]);
    }

    #[test]
    fn unequal_lengths_use_quantiles() {
        // ranks 0..3 onto positions round(r * 4 / 2) = 0, 2, 4
        assert_eq!(
            histogram_match(&[0.5, 0.1, 0.9], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            vec![3.0, 1.0, 5.0]
        );
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(histogram_match(&[], &[1.0]).is_err());
        assert!(histogram_match(&[1.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn equal_lengths_permute_reference(
            (values, reference) in (1usize..40).prop_flat_map(|n| (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(-5.0f64..5.0, n),
            ))
        ) {
            let mut out = histogram_match(&values, &reference).unwrap();
            let mut expected = reference.clone();
            if values.len() == 1 {
                // single element maps to the median, which is the element itself
                prop_assert_eq!(out, expected);
            } else {
                out.sort_by(f64::total_cmp);
                expected.sort_by(f64::total_cmp);
                prop_assert_eq!(out, expected);
            }
        }

        #[test]
        fn self_matching_is_identity(values in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            prop_assert_eq!(histogram_match(&values, &values).unwrap(), values);
        }
    }
}
