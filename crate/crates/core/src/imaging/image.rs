use ltgsr_autograd::{Scalar, Tensor};

use crate::error::{invalid, Result};

/// Smallest accepted side length.
pub const MIN_SIDE: usize = 8;

/// Single-channel float image, row-major, every pixel finite and in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return invalid(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            ));
        }
        if pixels.len() != height * width {
            return invalid(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("pixel value {bad} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let pixels = values
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// `[1, 1, H, W]` tensor view of the pixels.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.pixels.iter().map(|&v| S::lit(v as f64)).collect(),
        )
    }

    /// Clamped image from a `[1, 1, H, W]` tensor.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 1 {
            return invalid(format!("expected a [1,1,H,W] tensor, got {:?}", t.shape()));
        }
        Self::from_clamped(h, w, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return invalid(format!(
                "crop {height}x{width}+{y0}+{x0} exceeds {}x{}",
                self.height, self.width
            ));
        }
        let mut pixels = Vec::with_capacity(height * width);
        for y in y0..y0 + height {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + width]);
        }
        Self::new(height, width, pixels)
    }

    /// `out[y][x] = self[(y - dy) mod H][(x - dx) mod W]`.
    pub fn circular_shift(&self, dy: isize, dx: isize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..h {
            let sy = (y - dy).rem_euclid(h) as usize;
            for x in 0..w {
                let sx = (x - dx).rem_euclid(w) as usize;
                pixels.push(self.pixels[sy * self.width + sx]);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// Number of pixels whose values differ.
    pub fn count_differing(&self, other: &Image) -> usize {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_tiny_images() {
        assert!(Image::new(8, 8, vec![1.5; 64]).is_err());
        assert!(Image::new(8, 8, vec![f32::NAN; 64]).is_err());
        assert!(Image::new(4, 8, vec![0.0; 32]).is_err());
        assert!(Image::new(8, 8, vec![0.0; 63]).is_err());
    }

    #[test]
    fn circular_shift_moves_content() {
        let img = Image::from_fn(8, 8, |y, x| (y * 8 + x) as f32 / 64.0).unwrap();
        let s = img.circular_shift(2, -3);
        assert_eq!(s.get(2, 0), img.get(0, 3));
        assert_eq!(s.circular_shift(-2, 3), img);
    }
}
