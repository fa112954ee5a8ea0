use crate::raster::ImageTensor;

/// Anisotropic total variation: absolute forward differences along rows and
/// columns, summed over channels. Uses `sign(0) = 0`.
pub fn tv_loss(x: &ImageTensor) -> (f64, ImageTensor) {
    let (h, w) = (x.height(), x.width());
    let mut grad = ImageTensor::zeros(h, w, x.channels());
    let mut value = 0.0;
    let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    for c in 0..x.channels() {
        let p = x.plane(c);
        let g = grad.plane_mut(c);
        for y in 0..h {
            for i in y * w..(y + 1) * w {
                if y + 1 < h {
                    let d = p[i + w] - p[i];
                    value += d.abs();
                    g[i + w] += sign(d);
                    g[i] -= sign(d);
                }
                if i + 1 < (y + 1) * w {
                    let d = p[i + 1] - p[i];
                    value += d.abs();
                    g[i + 1] += sign(d);
                    g[i] -= sign(d);
                }
            }
        }
    }
    (value, grad)
}
