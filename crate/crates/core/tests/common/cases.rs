//! Oracle checks shared by the regular test targets and the acceptance run.
//! Gradient cases return the normwise relative error against central
//! differences; each loss value is also recomputed from its defining formula
//! in this file, and a mismatch panics.

use blend_core::losses::{
    content_loss, content_loss_stage1, grad_loss, hist_loss, style_loss, tv_loss, GradVariant, HistogramReference,
    LossWeights, StageOneLoss, StageTwoLoss,
};
use blend_core::net::{test_network, FeatureMap, FeatureStack, Network, Preprocessing};
use blend_core::poisson::{assemble_system, cg_solve, gauss_seidel_solve, GuidanceMode};
use blend_core::raster::downsample_mask;
use blend_core::{composite, BlendInstance, ImageTensor, Mask};
use indexmap::IndexMap;

use super::{all, box_mask, dense_solve, gradient_error, max_abs_diff, random_image, random_mask, with_data};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

pub const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Dense system written out from the discrete Poisson equation directly,
/// `4 f_p - sum_{q in Ω} f_q = sum_{q not in Ω} t_q + sum_q v_pq`, solved
/// per channel. Unknowns are in row-major order.
pub fn dense_reference(source: &ImageTensor, target: &ImageTensor, mask: &Mask, mode: GuidanceMode) -> Vec<Vec<f64>> {
    let (h, w) = (mask.height(), mask.width());
    let unknowns: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x))
        .collect();
    let index = |y: usize, x: usize| unknowns.iter().position(|&p| p == (y, x));
    let n = unknowns.len();
    let mut a = vec![vec![0.0; n]; n];
    for (i, &(y, x)) in unknowns.iter().enumerate() {
        a[i][i] = 4.0;
        for (dy, dx) in NEIGHBOURS {
            let (qy, qx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
            if let Some(j) = index(qy, qx) {
                a[i][j] = -1.0;
            }
        }
    }
    (0..target.channels())
        .map(|c| {
            let b: Vec<f64> = unknowns
                .iter()
                .map(|&(y, x)| {
                    NEIGHBOURS
                        .iter()
                        .map(|&(dy, dx)| {
                            let (qy, qx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                            let mut v = source.get(c, y, x) - source.get(c, qy, qx);
                            if mode == GuidanceMode::MixedSum {
                                v += target.get(c, y, x) - target.get(c, qy, qx);
                            }
                            let boundary = if mask.get(qy, qx) { 0.0 } else { target.get(c, qy, qx) };
                            v + boundary
                        })
                        .sum()
                })
                .collect();
            dense_solve(a.clone(), b)
        })
        .collect()
}

/// Worst ∞-norm deviation of Gauss-Seidel and CG from the dense solve on a
/// seeded `h × w` instance: `(unknowns, gs_error, cg_error)`.
pub fn poisson_errors(h: usize, w: usize, seed: u64, mode: GuidanceMode, tol: f64) -> (usize, f64, f64) {
    let mask = random_mask(h, w, seed);
    let source = random_image(h, w, 3, seed);
    let target = random_image(h, w, 3, seed + 1000);
    let sys = assemble_system(&source, &target, &mask, mode).unwrap();
    let dense = dense_reference(&source, &target, &mask, mode);
    let gs = gauss_seidel_solve(&sys, tol, 1_000_000);
    let cg = cg_solve(&sys, tol, 100_000);
    assert!(gs.converged() && cg.converged());
    let worst = |values: &[Vec<f64>]| (0..3).map(|c| max_abs_diff(&values[c], &dense[c])).fold(0.0, f64::max);
    (mask.count(), worst(&gs.values), worst(&cg.values))
}

/// 32×32 target with a 16×16 source whose mask leaves a one-pixel margin;
/// the source is zero outside its mask. With `flat_interior` the target is
/// constant under the placed source.
pub fn toy_instance(seed: u64, flat_interior: bool) -> BlendInstance {
    let mask = box_mask(16, 16, 1);
    let source = ImageTensor::from_fn(16, 16, 3, |c, y, x| {
        0.3 + 0.02 * y as f64 - 0.015 * x as f64 + 0.1 * ((x * y + c) as f64 * 0.3).sin()
    })
    .masked(&mask)
    .unwrap();
    let mut target = random_image(32, 32, 3, seed);
    if flat_interior {
        for c in 0..3 {
            for y in 8..24 {
                for x in 8..24 {
                    target.set(c, y, x, 0.2 + 0.1 * c as f64);
                }
            }
        }
    }
    BlendInstance {
        source,
        mask,
        target,
        offset_x: 8,
        offset_y: 8,
    }
}

fn net() -> Network {
    Network::test_network(42)
}

fn ones(names: &[&str]) -> IndexMap<String, f64> {
    names.iter().map(|n| (n.to_string(), 1.0)).collect()
}

fn features(net: &Network, img: &ImageTensor) -> FeatureStack {
    net.forward(&net.preprocess(img).unwrap()).unwrap()
}

/// Replicate-padded 4-neighbour Laplacian, written out per pixel.
fn lap(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height() as isize, img.width() as isize);
    ImageTensor::from_fn(img.height(), img.width(), img.channels(), |c, y, x| {
        let at = |yy: isize, xx: isize| img.get(c, yy.clamp(0, h - 1) as usize, xx.clamp(0, w - 1) as usize);
        let (y, x) = (y as isize, x as isize);
        at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x)
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assert_close(value: f64, reference: f64, rel: f64) {
    assert!(
        (value - reference).abs() <= rel * value.abs().max(1.0),
        "loss value {value} differs from reference {reference}"
    );
}

fn full_check(f: impl FnMut(&[f64]) -> f64, x: &ImageTensor, analytic: &ImageTensor) -> f64 {
    gradient_error(f, x.data(), analytic.data(), &all(x.data().len()), FD_STEP)
}

/// `sum_taps <G_tap, F_tap(x)>` against the reverse pass on an 8×8 input.
pub fn network_backward() -> f64 {
    let net = net();
    let x = random_image(8, 8, 3, 1);
    let cotangents: FeatureStack = net
        .spec()
        .tap_shapes(8, 8)
        .iter()
        .enumerate()
        .map(|(i, (name, &(c, h, w)))| {
            let r = random_image(h, w, c, 100 + i as u64);
            let mut f = FeatureMap::zeros(c, h, w);
            f.data.iter_mut().zip(r.data()).for_each(|(a, b)| *a = b - 0.5);
            (name.clone(), f)
        })
        .collect();
    let acts = net.image_trace(&x).unwrap();
    let analytic = net.image_backward(&acts, &cotangents).unwrap();
    let f = |v: &[f64]| {
        let feats = features(&net, &with_data(&x, v));
        cotangents
            .iter()
            .map(|(name, g)| feats[name].data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    full_check(f, &x, &analytic)
}

/// Style loss through ImageNet normalisation.
pub fn imagenet_preprocessing() -> f64 {
    let (spec, weights) = test_network(7);
    let net = Network::new(spec, &weights, Preprocessing::ImageNet).unwrap();
    let x = random_image(8, 8, 3, 2);
    let target = random_image(8, 8, 3, 3);
    let beta = ones(&["t1", "t2"]);
    let (value, analytic) = style_loss(&net, &x, &target, &beta).unwrap();
    assert!(value > 0.0);
    full_check(|v| style_loss(&net, &with_data(&x, v), &target, &beta).unwrap().0, &x, &analytic)
}

pub fn gradient_loss(variant: GradVariant) -> f64 {
    let (h, w) = (12, 14);
    let mask = random_mask(h, w, 10);
    let source = random_image(h, w, 3, 10).masked(&mask).unwrap();
    let target = random_image(h, w, 3, 11);
    let z = random_image(h, w, 3, 12);
    let reference = |z: &ImageTensor| {
        let b = composite(z, &target, &mask).unwrap();
        let (lb, ls, lt) = (lap(&b), lap(&source), lap(&target));
        let mut sum = 0.0;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let r = match variant {
                        GradVariant::Literal => lb.get(c, y, x) - ls.get(c, y, x) - lt.get(c, y, x),
                        GradVariant::CropOut if mask.get(y, x) => lb.get(c, y, x) - ls.get(c, y, x),
                        GradVariant::CropOut => 0.0,
                    };
                    sum += r * r;
                }
            }
        }
        sum / (2.0 * (h * w) as f64)
    };
    let (value, analytic) = grad_loss(&z, &source, &target, &mask, variant).unwrap();
    assert_close(value, reference(&z), 1e-12);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                assert!((0..3).all(|c| analytic.get(c, y, x) == 0.0), "gradient leaks outside the mask");
            }
        }
    }
    full_check(|v| reference(&with_data(&z, v)), &z, &analytic)
}

/// Stage-one content: `F(z) ⊙ M_l` against the features of the cropped source.
pub fn masked_content() -> f64 {
    let net = net();
    let (h, w) = (16, 16);
    let mask = random_mask(h, w, 20);
    let source = random_image(h, w, 3, 21).masked(&mask).unwrap();
    let z = random_image(h, w, 3, 22);
    let reference_feats = features(&net, &source);
    let f = |z: &ImageTensor| {
        let fz = &features(&net, z)["t2"];
        let ml = downsample_mask(&mask, fz.height, fz.width).unwrap();
        let plane = fz.height * fz.width;
        let masked: Vec<f64> = fz.data.iter().enumerate().map(|(i, v)| v * ml.data()[i % plane] as f64).collect();
        sq_dist(&masked, &reference_feats["t2"].data) / (2.0 * (fz.channels * plane) as f64)
    };
    let (value, analytic) = content_loss_stage1(&net, &z, &source, &mask, &ones(&["t2"])).unwrap();
    assert_close(value, f(&z), 1e-12);
    full_check(|v| f(&with_data(&z, v)), &z, &analytic)
}

pub fn unmasked_content() -> f64 {
    let net = net();
    let blend = random_image(16, 16, 3, 30);
    let x = random_image(16, 16, 3, 31);
    let reference_feats = features(&net, &blend);
    let f = |x: &ImageTensor| {
        let fx = &features(&net, x)["t2"];
        sq_dist(&fx.data, &reference_feats["t2"].data) / (2.0 * fx.data.len() as f64)
    };
    let (value, analytic) = content_loss(&net, &x, &blend, &ones(&["t2"])).unwrap();
    assert_close(value, f(&x), 1e-12);
    full_check(|v| f(&with_data(&x, v)), &x, &analytic)
}

pub fn style() -> f64 {
    let net = net();
    let target = random_image(16, 16, 3, 40);
    let x = random_image(16, 16, 3, 41);
    let gram = |f: &FeatureMap| -> Vec<f64> {
        let m = f.height * f.width;
        let mut g = vec![0.0; f.channels * f.channels];
        for i in 0..f.channels {
            for j in 0..f.channels {
                g[i * f.channels + j] = (0..m).map(|k| f.data[i * m + k] * f.data[j * m + k]).sum();
            }
        }
        g
    };
    let target_feats = features(&net, &target);
    let f = |x: &ImageTensor| {
        features(&net, x)
            .iter()
            .map(|(name, fx)| {
                let n = fx.channels as f64;
                sq_dist(&gram(fx), &gram(&target_feats[name])) / (2.0 * n * n)
            })
            .sum::<f64>()
    };
    let (value, analytic) = style_loss(&net, &x, &target, &ones(&["t1", "t2"])).unwrap();
    assert_close(value, f(&x), 1e-10);
    full_check(|v| f(&with_data(&x, v)), &x, &analytic)
}

/// Histogram loss with the remapped activations held at their value at `x`.
pub fn histogram() -> f64 {
    let net = net();
    let target = random_image(16, 16, 3, 50);
    let x = random_image(16, 16, 3, 51);
    let gamma = ones(&["t1", "t2"]);
    let frozen = HistogramReference::new(&net, &target, &gamma)
        .unwrap()
        .matched(&net.image_trace(&x).unwrap())
        .unwrap();
    let f = |x: &ImageTensor| {
        features(&net, x)
            .iter()
            .map(|(name, fx)| sq_dist(&fx.data, &frozen[name].data))
            .sum::<f64>()
    };
    let (value, analytic) = hist_loss(&net, &x, &target, &gamma).unwrap();
    assert_close(value, f(&x), 1e-12);
    full_check(|v| f(&with_data(&x, v)), &x, &analytic)
}

/// Indices of pixels none of whose neighbour differences is within `gap`
/// of zero.
pub fn untied(img: &ImageTensor, gap: f64) -> Vec<usize> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::new();
    for c in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                let v = img.get(c, y, x);
                let neighbours = [
                    (y > 0).then(|| img.get(c, y - 1, x)),
                    (y + 1 < h).then(|| img.get(c, y + 1, x)),
                    (x > 0).then(|| img.get(c, y, x - 1)),
                    (x + 1 < w).then(|| img.get(c, y, x + 1)),
                ];
                if neighbours.iter().flatten().all(|n| (n - v).abs() > gap) {
                    out.push((c * h + y) * w + x);
                }
            }
        }
    }
    out
}

pub fn total_variation() -> f64 {
    let x = random_image(16, 16, 3, 60);
    let f = |x: &ImageTensor| {
        let (h, w) = (x.height(), x.width());
        let mut s = 0.0;
        for c in 0..x.channels() {
            for y in 0..h {
                for xx in 0..w {
                    if y + 1 < h {
                        s += (x.get(c, y + 1, xx) - x.get(c, y, xx)).abs();
                    }
                    if xx + 1 < w {
                        s += (x.get(c, y, xx + 1) - x.get(c, y, xx)).abs();
                    }
                }
            }
        }
        s
    };
    let (value, analytic) = tv_loss(&x);
    assert_close(value, f(&x), 1e-12);
    let which = untied(&x, 1e-3);
    assert!(which.len() > x.data().len() / 2);
    gradient_error(|v| f(&with_data(&x, v)), x.data(), analytic.data(), &which, FD_STEP)
}

/// Weighted stage-one objective with default weights.
pub fn stage_one_total(variant: GradVariant) -> f64 {
    let net = net();
    let (h, w) = (16, 16);
    let mask = box_mask(h, w, 4);
    let source = random_image(h, w, 3, 70).masked(&mask).unwrap();
    let target = random_image(h, w, 3, 71);
    let z = random_image(h, w, 3, 72);
    let loss = StageOneLoss::new(&net, &source, &target, &mask, variant, &LossWeights::stage_one(net.spec())).unwrap();
    let report = loss.evaluate(&z).unwrap();
    gradient_error(
        |v| loss.evaluate(&with_data(&z, v)).unwrap().total,
        z.data(),
        report.gradient.data(),
        &untied(&z, 1e-3),
        FD_STEP,
    )
}

pub fn stage_two_total() -> f64 {
    let net = net();
    let blend = random_image(16, 16, 3, 80);
    let target = random_image(16, 16, 3, 81);
    let x = random_image(16, 16, 3, 82);
    let loss = StageTwoLoss::new(&net, &blend, &target, &LossWeights::stage_two(net.spec())).unwrap();
    let report = loss.evaluate(&x).unwrap();
    gradient_error(
        |v| loss.evaluate(&with_data(&x, v)).unwrap().total,
        x.data(),
        report.gradient.data(),
        &untied(&x, 1e-3),
        FD_STEP,
    )
}

/// Every gradient case by name.
pub fn gradient_suite() -> Vec<(&'static str, fn() -> f64)> {
    vec![
        ("network reverse pass", network_backward),
        ("imagenet preprocessing", imagenet_preprocessing),
        ("gradient loss literal", || gradient_loss(GradVariant::Literal)),
        ("gradient loss crop-out", || gradient_loss(GradVariant::CropOut)),
        ("masked content", masked_content),
        ("unmasked content", unmasked_content),
        ("style", style),
        ("histogram", histogram),
        ("total variation", total_variation),
        ("stage one total literal", || stage_one_total(GradVariant::Literal)),
        ("stage one total crop-out", || stage_one_total(GradVariant::CropOut)),
        ("stage two total", stage_two_total),
    ]
}
