//! Pixel containers and the raster operations shared by every blend engine.
//!
//! Images are stored planar: sample `(c, y, x)` lives at
//! `data[c * height * width + y * width + x]`. Values are nominally in
//! `[0, 1]` but intermediate results may leave that range; clamping happens
//! only when saving and at stage boundaries.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image from planar data.
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite sample at index {bad}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(c, y, x)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_frame(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.same_frame(other) && self.channels == other.channels
    }

    pub fn clamped(&self) -> ImageTensor {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Applies a mask to every channel, zeroing samples where the mask is 0.
    pub fn masked(&self, mask: &Mask) -> Result<ImageTensor> {
        check_frame(self, mask, "masked")?;
        let mut out = self.clone();
        let n = self.height * self.width;
        for c in 0..self.channels {
            for (v, &m) in out.data[c * n..(c + 1) * n].iter_mut().zip(&mask.data) {
                if m == 0 {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Replicates a single-channel image into three channels.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(3 * n);
        for _ in 0..3 {
            data.extend_from_slice(&self.data[..n]);
        }
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }
}

/// Binary raster marking the blend region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Self {
            height,
            width,
            data: vec![on as u8; height * width],
        }
    }

    /// Thresholds an image at 0.5 (channel mean), ties counted as inside.
    pub fn from_image(img: &ImageTensor) -> Self {
        let c = img.channels() as f64;
        Self::from_fn(img.height(), img.width(), |y, x| {
            let mean = (0..img.channels()).map(|ch| img.get(ch, y, x)).sum::<f64>() / c;
            mean >= 0.5
        })
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Mask-1 pixels with a 4-neighbour that is mask-0 or outside the frame.
    pub fn is_boundary(&self, y: usize, x: usize) -> bool {
        if !self.get(y, x) {
            return false;
        }
        if y == 0 || x == 0 || y + 1 == self.height || x + 1 == self.width {
            return true;
        }
        !(self.get(y - 1, x) && self.get(y + 1, x) && self.get(y, x - 1) && self.get(y, x + 1))
    }

    pub fn is_interior(&self, y: usize, x: usize) -> bool {
        self.get(y, x) && !self.is_boundary(y, x)
    }
}

/// A source object, its mask, and where it lands on the target.
#[derive(Debug, Clone)]
pub struct BlendInstance {
    pub source: ImageTensor,
    pub mask: Mask,
    pub target: ImageTensor,
    pub offset_x: i64,
    pub offset_y: i64,
}

impl BlendInstance {
    pub fn validate(&self) -> Result<()> {
        if self.source.height() != self.mask.height() || self.source.width() != self.mask.width() {
            return Err(Error::DimensionMismatch(format!(
                "source is {}x{} but mask is {}x{}",
                self.source.width(),
                self.source.height(),
                self.mask.width(),
                self.mask.height()
            )));
        }
        if self.source.channels() != self.target.channels() {
            return Err(Error::DimensionMismatch(format!(
                "source has {} channels, target has {}",
                self.source.channels(),
                self.target.channels()
            )));
        }
        let fits = self.offset_x >= 0
            && self.offset_y >= 0
            && self.offset_x as usize + self.source.width() <= self.target.width()
            && self.offset_y as usize + self.source.height() <= self.target.height();
        if !fits {
            return Err(Error::PlacementOutOfBounds {
                src_w: self.source.width(),
                src_h: self.source.height(),
                x: self.offset_x,
                y: self.offset_y,
                dst_w: self.target.width(),
                dst_h: self.target.height(),
            });
        }
        Ok(())
    }
}

/// Re-embeds source and mask into the target frame at the instance offset.
/// Everything outside the placed rectangle is zero.
pub fn align(instance: &BlendInstance) -> Result<(ImageTensor, Mask)> {
    instance.validate()?;
    let (h, w) = (instance.target.height(), instance.target.width());
    let (ox, oy) = (instance.offset_x as usize, instance.offset_y as usize);
    let src = &instance.source;
    let mut source = ImageTensor::zeros(h, w, src.channels());
    for c in 0..src.channels() {
        for y in 0..src.height() {
            for x in 0..src.width() {
                source.set(c, y + oy, x + ox, src.get(c, y, x));
            }
        }
    }
    let mut data = vec![0u8; h * w];
    for y in 0..src.height() {
        for x in 0..src.width() {
            data[(y + oy) * w + x + ox] = instance.mask.data[y * src.width() + x];
        }
    }
    Ok((
        source,
        Mask {
            height: h,
            width: w,
            data,
        },
    ))
}

/// `z` where the mask is set, `target` elsewhere.
pub fn composite(z: &ImageTensor, target: &ImageTensor, mask: &Mask) -> Result<ImageTensor> {
    if !z.same_shape(target) {
        return Err(Error::DimensionMismatch(format!(
            "composite of {}x{}x{} over {}x{}x{}",
            z.height, z.width, z.channels, target.height, target.width, target.channels
        )));
    }
    check_frame(z, mask, "composite")?;
    let n = z.height * z.width;
    let mut out = target.clone();
    for c in 0..z.channels {
        let base = c * n;
        for (i, &m) in mask.data.iter().enumerate() {
            if m != 0 {
                out.data[base + i] = z.data[base + i];
            }
        }
    }
    Ok(out)
}

/// 4-neighbour Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with edge-clamp padding,
/// applied per channel.
pub fn laplacian(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height, img.width);
    let mut out = ImageTensor::zeros(h, w, img.channels);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            let up = y.saturating_sub(1);
            let down = (y + 1).min(h - 1);
            for x in 0..w {
                let left = x.saturating_sub(1);
                let right = (x + 1).min(w - 1);
                dst[y * w + x] = src[up * w + x] + src[down * w + x] + src[y * w + left]
                    + src[y * w + right]
                    - 4.0 * src[y * w + x];
            }
        }
    }
    out
}

/// Exact adjoint of [`laplacian`] including its clamped padding.
pub fn laplacian_adjoint(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height, img.width);
    let mut out = ImageTensor::zeros(h, w, img.channels);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            let up = y.saturating_sub(1);
            let down = (y + 1).min(h - 1);
            for x in 0..w {
                let left = x.saturating_sub(1);
                let right = (x + 1).min(w - 1);
                let r = src[y * w + x];
                dst[up * w + x] += r;
                dst[down * w + x] += r;
                dst[y * w + left] += r;
                dst[y * w + right] += r;
                dst[y * w + x] -= 4.0 * r;
            }
        }
    }
    out
}

/// Box-average pooling to `target_h x target_w`, thresholded at 0.5 with
/// ties rounding up.
pub fn downsample_mask(mask: &Mask, target_h: usize, target_w: usize) -> Result<Mask> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample mask to {target_h}x{target_w}"
        )));
    }
    if target_h > mask.height || target_w > mask.width {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {}x{} mask to larger {target_h}x{target_w}",
            mask.height, mask.width
        )));
    }
    Ok(Mask::from_fn(target_h, target_w, |i, j| {
        let (y0, y1) = (i * mask.height / target_h, (i + 1) * mask.height / target_h);
        let (x0, x1) = (j * mask.width / target_w, (j + 1) * mask.width / target_w);
        let mut on = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                on += mask.get(y, x) as usize;
            }
        }
        // mean >= 0.5 without dividing
        2 * on >= (y1 - y0) * (x1 - x0)
    }))
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize to {height}x{width}")));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let coord = |i: usize, scale: f64, len: usize| {
        let p = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let rows: Vec<_> = (0..height).map(|y| coord(y, sy, img.height)).collect();
    let cols: Vec<_> = (0..width).map(|x| coord(x, sx, img.width)).collect();
    Ok(ImageTensor::from_fn(height, width, img.channels, |c, y, x| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
        let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Resizes a mask bilinearly and re-thresholds at 0.5.
pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    Ok(Mask::from_image(&resize_bilinear(&mask.to_image(), height, width)?))
}

fn check_frame(img: &ImageTensor, mask: &Mask, op: &str) -> Result<()> {
    if img.height != mask.height || img.width != mask.width {
        return Err(Error::DimensionMismatch(format!(
            "{op}: image is {}x{} but mask is {}x{}",
            img.height, img.width, mask.height, mask.width
        )));
    }
    Ok(())
}
