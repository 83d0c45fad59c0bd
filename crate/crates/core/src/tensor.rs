//! Dense image and feature tensors.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Interleaved `height x width x channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![T::zero(); height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(invalid(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Bilinear sample at continuous pixel-centre coordinates; zero outside.
    pub fn sample_bilinear(&self, y: f64, x: f64, out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1.0, (1.0 - fy) * fx),
            (y0 + 1.0, x0, fy * (1.0 - fx)),
            (y0 + 1.0, x0 + 1.0, fy * fx),
        ];
        for (cy, cx, wgt) in corners {
            if wgt == 0.0
                || cy < 0.0
                || cx < 0.0
                || cy >= self.height as f64
                || cx >= self.width as f64
            {
                continue;
            }
            let px = self.pixel(cy as usize, cx as usize);
            let w = T::of(wgt);
            for (o, &p) in out.iter_mut().zip(px) {
                *o += w * p;
            }
        }
    }

    /// Copy of the sub-rectangle `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 > self.width || y1 > self.height || x0 >= x1 || y0 >= y1 {
            return Err(invalid(format!(
                "crop ({x0},{y0})-({x1},{y1}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(y1 - y0, x1 - x0, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Planar `C x H x W` copy, the layout consumed by the backbone.
    pub fn to_planar(&self) -> Tensor3<T> {
        let mut t = Tensor3::zeros(self.channels, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    *t.at_mut(c, y, x) = self.get(y, x, c);
                }
            }
        }
        t
    }
}

/// Planar `channels x height x width` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Output of one backbone layer, tagged with its 1-based position.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub layer_index: usize,
    pub values: Tensor3<T>,
}

/// A preprocessed image paired with its binary label (1 = fake).
#[derive(Clone, Debug)]
pub struct LabeledImage<T> {
    pub image: ImageTensor<T>,
    pub label: u8,
}

/// Bilinear resize of a single `h x w` plane to `out_h x out_w`
/// using align-corners=false pixel-centre mapping.
pub fn resize_plane<T: Scalar>(plane: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = T::of(fy - y0 as f64);
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = T::of(fx - x0 as f64);
            let top = plane[y0 * w + x0] * (T::one() - tx) + plane[y0 * w + x1] * tx;
            let bot = plane[y1 * w + x0] * (T::one() - tx) + plane[y1 * w + x1] * tx;
            out[oy * out_w + ox] = top * (T::one() - ty) + bot * ty;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_sample_at_integer_point_is_exact() {
        let img = ImageTensor::<f64>::from_fn(4, 5, 2, |y, x, c| (y * 10 + x + c * 100) as f64);
        let mut out = [0.0; 2];
        img.sample_bilinear(2.0, 3.0, &mut out);
        assert_eq!(out, [23.0, 123.0]);
        img.sample_bilinear(2.5, 3.0, &mut out);
        assert_eq!(out, [28.0, 128.0]);
        img.sample_bilinear(-5.0, 3.0, &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn resize_constant_plane_stays_constant() {
        let p = vec![0.25f64; 16];
        let r = resize_plane(&p, 4, 4, 9, 7);
        assert!(r.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn planar_roundtrip_indexing() {
        let img = ImageTensor::<f32>::from_fn(3, 2, 3, |y, x, c| (y * 6 + x * 3 + c) as f32);
        let t = img.to_planar();
        assert_eq!(t.shape(), (3, 3, 2));
        assert_eq!(t.at(2, 1, 1), img.get(1, 1, 2));
    }
}
