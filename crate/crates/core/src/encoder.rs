//! Three-scale convolutional feature encoder and its deep extension.

use std::ops::Index;
use std::path::PathBuf;

use ltgsr_autograd::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::Image;
use crate::nn::{Bound, Conv, ParamSpec, ParamStore};

/// One value per scale, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T>(pub [T; 3]);

impl<T> Pyramid<T> {
    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Pyramid<U> {
        let [a, b, c] = &self.0;
        let mut f = f;
        Pyramid([f(a), f(b), f(c)])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }
}

impl<T> Index<usize> for Pyramid<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

/// Concrete feature maps, each `[1, C_i, H/2^i, W/2^i]`.
pub type FeaturePyramid<S> = Pyramid<Tensor<S>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: [usize; 3],
    /// Channels of the two extra pooled stages behind [`deep_feature`].
    pub deep_channels: [usize; 2],
    pub pretrained_weights_path: Option<PathBuf>,
    pub trainable: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_channels([64, 128, 256])
    }
}

impl EncoderConfig {
    /// Deep stages default to twice the last pyramid width.
    pub fn with_channels(channels: [usize; 3]) -> Self {
        Self {
            channels,
            deep_channels: [2 * channels[2], 2 * channels[2]],
            pretrained_weights_path: None,
            trainable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().chain(&self.deep_channels).any(|&c| c == 0) {
            return invalid("encoder channel counts must be >= 1");
        }
        Ok(())
    }

    fn stages(&self) -> [Vec<Conv>; 5] {
        let [c1, c2, c3] = self.channels;
        let [c4, c5] = self.deep_channels;
        [
            vec![
                Conv::new("encoder.s1.conv1", 1, c1, 3),
                Conv::new("encoder.s1.conv2", c1, c1, 3),
            ],
            vec![
                Conv::new("encoder.s2.conv1", c1, c2, 3),
                Conv::new("encoder.s2.conv2", c2, c2, 3),
            ],
            vec![
                Conv::new("encoder.s3.conv1", c2, c3, 3),
                Conv::new("encoder.s3.conv2", c3, c3, 3),
            ],
            vec![Conv::new("encoder.s4.conv1", c3, c4, 3)],
            vec![Conv::new("encoder.s5.conv1", c4, c5, 3)],
        ]
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.stages()
            .iter()
            .flatten()
            .flat_map(|c| c.specs())
            .collect()
    }
}

fn check_dims(shape: [usize; 4], multiple: usize) -> Result<()> {
    let [n, c, h, w] = shape;
    if n != 1 || c != 1 {
        return invalid(format!("encoder expects a [1,1,H,W] image, got {shape:?}"));
    }
    if h % multiple != 0 || w % multiple != 0 {
        return invalid(format!("image dims {h}x{w} must be divisible by {multiple}"));
    }
    Ok(())
}

fn run_stage<'t, S: Scalar>(
    convs: &[Conv],
    p: &Bound<'t, S>,
    mut x: Var<'t, S>,
    pool: bool,
) -> Var<'t, S> {
    if pool {
        x = x.max_pool2();
    }
    for c in convs {
        x = c.forward(p, x).relu();
    }
    x
}

/// Graph-level pyramid of a `[1, 1, H, W]` image var.
pub fn encode_var<'t, S: Scalar>(
    cfg: &EncoderConfig,
    p: &Bound<'t, S>,
    img: Var<'t, S>,
) -> Result<Pyramid<Var<'t, S>>> {
    check_dims(img.shape(), 4)?;
    let stages = cfg.stages();
    let f1 = run_stage(&stages[0], p, img, false);
    let f2 = run_stage(&stages[1], p, f1, true);
    let f3 = run_stage(&stages[2], p, f2, true);
    Ok(Pyramid([f1, f2, f3]))
}

/// Deep feature continuing from an existing scale-3 map.
pub fn deep_from_var<'t, S: Scalar>(
    cfg: &EncoderConfig,
    p: &Bound<'t, S>,
    f3: Var<'t, S>,
) -> Var<'t, S> {
    let stages = cfg.stages();
    let f4 = run_stage(&stages[3], p, f3, true);
    run_stage(&stages[4], p, f4, true)
}

/// Graph-level deep feature, `[1, C5, H/16, W/16]`.
pub fn deep_feature_var<'t, S: Scalar>(
    cfg: &EncoderConfig,
    p: &Bound<'t, S>,
    img: Var<'t, S>,
) -> Result<Var<'t, S>> {
    check_dims(img.shape(), 16)?;
    let pyr = encode_var(cfg, p, img)?;
    Ok(deep_from_var(cfg, p, pyr[2]))
}

pub fn encode<S: Scalar>(img: &Image, cfg: &EncoderConfig, params: &ParamStore<S>) -> Result<FeaturePyramid<S>> {
    let tape = Tape::inference();
    let p = params.bind(&tape, |_| false);
    let x = tape.constant(img.to_tensor());
    let pyr = encode_var(cfg, &p, x)?;
    Ok(pyr.map(|v| (*v.value()).clone()))
}

pub fn deep_feature<S: Scalar>(img: &Image, cfg: &EncoderConfig, params: &ParamStore<S>) -> Result<Tensor<S>> {
    let tape = Tape::inference();
    let p = params.bind(&tape, |_| false);
    let x = tape.constant(img.to_tensor());
    Ok((*deep_feature_var(cfg, &p, x)?.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::generate_phantom;

    fn small() -> EncoderConfig {
        EncoderConfig::with_channels([4, 6, 8])
    }

    #[test]
    fn default_pyramid_shapes() {
        let cfg = EncoderConfig::default();
        let params = ParamStore::<f32>::init(&cfg.specs(), 0);
        let img = generate_phantom(1, 96, 96).unwrap();
        let pyr = encode(&img, &cfg, &params).unwrap();
        assert_eq!(pyr[0].shape(), [1, 64, 96, 96]);
        assert_eq!(pyr[1].shape(), [1, 128, 48, 48]);
        assert_eq!(pyr[2].shape(), [1, 256, 24, 24]);
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let cfg = small();
        let params = ParamStore::<f64>::init(&cfg.specs(), 3);
        let img = Image::constant(32, 32, 0.0).unwrap();
        let pyr = encode(&img, &cfg, &params).unwrap();
        assert!(pyr.iter().all(|t| t.max_abs() == 0.0));
        assert_eq!(deep_feature(&img, &cfg, &params).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rejects_indivisible_dims() {
        let cfg = small();
        let params = ParamStore::<f32>::init(&cfg.specs(), 0);
        let img = Image::constant(95, 96, 0.5).unwrap();
        assert!(encode(&img, &cfg, &params).is_err());
        let img = Image::constant(40, 40, 0.5).unwrap();
        assert!(encode(&img, &cfg, &params).is_ok());
        assert!(deep_feature(&img, &cfg, &params).is_err());
    }

    #[test]
    fn deep_feature_shape_and_determinism() {
        let cfg = small();
        let params = ParamStore::<f32>::init(&cfg.specs(), 0);
        let img = generate_phantom(2, 96, 96).unwrap();
        let a = deep_feature(&img, &cfg, &params).unwrap();
        assert_eq!(a.shape(), [1, 16, 6, 6]);
        assert_eq!(a, deep_feature(&img, &cfg, &params).unwrap());
    }
}
