//! Bicubic resampling (Keys kernel, a = -0.5, edge-clamped, half-pixel centers).

use std::rc::Rc;

use ltgsr_autograd::{Mat, ResamplePlan, Scalar, Tensor};

use super::Image;
use crate::error::{invalid, Result};

const A: f64 = -0.5;

fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// `[out_len × in_len]` interpolation matrix along one axis.
pub fn bicubic_matrix<S: Scalar>(in_len: usize, out_len: usize) -> Mat<S> {
    let mut data = vec![0.0f64; out_len * in_len];
    let ratio = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * ratio - 0.5;
        let base = src.floor();
        let frac = src - base;
        for tap in -1..=2i64 {
            let wgt = cubic(frac - tap as f64);
            let idx = (base as i64 + tap).clamp(0, in_len as i64 - 1) as usize;
            data[o * in_len + idx] += wgt;
        }
    }
    Mat {
        rows: out_len,
        cols: in_len,
        data: data.into_iter().map(S::lit).collect(),
    }
}

/// Separable bicubic plan from `in_hw` to `out_hw`, usable on graph vars.
pub fn bicubic_plan<S: Scalar>(in_hw: (usize, usize), out_hw: (usize, usize)) -> Rc<ResamplePlan<S>> {
    Rc::new(ResamplePlan::new(
        bicubic_matrix(in_hw.0, out_hw.0),
        bicubic_matrix(in_hw.1, out_hw.1),
    ))
}

/// Raw (unclamped) bicubic resize of a row-major plane.
pub fn resize_plane(values: &[f64], in_hw: (usize, usize), out_hw: (usize, usize)) -> Vec<f64> {
    let plan = bicubic_plan::<f64>(in_hw, out_hw);
    let t = Tensor::from_vec([1, 1, in_hw.0, in_hw.1], values.to_vec());
    plan.apply(&t, false).into_vec()
}

/// Supported resize factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleFactor {
    Half,
    Double,
}

impl ScaleFactor {
    fn apply(self, len: usize) -> Option<usize> {
        match self {
            ScaleFactor::Double => Some(len * 2),
            ScaleFactor::Half if len % 2 == 0 => Some(len / 2),
            ScaleFactor::Half => None,
        }
    }
}

/// Bicubic resize by ×2 or ×1/2; the result is clamped to `[0, 1]`.
pub fn bicubic_resize(img: &Image, scale: ScaleFactor) -> Result<Image> {
    let (h, w) = img.dims();
    let (Some(oh), Some(ow)) = (scale.apply(h), scale.apply(w)) else {
        return invalid(format!("{h}x{w} cannot be scaled by {scale:?} to integral dims"));
    };
    let values: Vec<f64> = img.pixels().iter().map(|&v| v as f64).collect();
    let out = resize_plane(&values, (h, w), (oh, ow));
    Image::from_clamped(oh, ow, out.into_iter().map(|v| v as f32).collect())
}
