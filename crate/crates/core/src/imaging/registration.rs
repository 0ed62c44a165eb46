//! Integer-translation registration by phase correlation, and overlap cropping.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{invalid, Error, Result};

/// Minimum side of a usable overlap rectangle.
pub const MIN_OVERLAP: usize = 32;

/// Translation such that `moving[y][x] ≈ fixed[y - dy][x - dx]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shift {
    pub dy: isize,
    pub dx: isize,
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

fn spectrum(img: &Image) -> Vec<Complex<f64>> {
    let (h, w) = img.dims();
    let mut buf: Vec<_> = img
        .pixels()
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .collect();
    fft2(&mut buf, h, w, false);
    buf
}

fn off_dc_energy(spec: &[Complex<f64>]) -> f64 {
    spec.iter().skip(1).map(|c| c.norm_sqr()).sum()
}

fn signed(i: usize, n: usize) -> isize {
    if i > n / 2 {
        i as isize - n as isize
    } else {
        i as isize
    }
}

/// Estimates the circular integer translation from `fixed` to `moving`.
///
/// Ties on the correlation peak go to the smallest `|dy| + |dx|`, then the
/// smallest `dy`, then `dx`.
pub fn phase_correlate(fixed: &Image, moving: &Image) -> Result<Shift> {
    if fixed.dims() != moving.dims() {
        return invalid(format!(
            "phase correlation needs equal dims, got {:?} and {:?}",
            fixed.dims(),
            moving.dims()
        ));
    }
    let (h, w) = fixed.dims();
    let a = spectrum(fixed);
    let b = spectrum(moving);
    let scale = (h * w) as f64;
    for (name, s) in [("fixed", &a), ("moving", &b)] {
        if off_dc_energy(s) <= 1e-18 * scale * scale {
            return Err(Error::DegenerateInput(format!(
                "{name} image is constant; no spectral energy off DC"
            )));
        }
    }
    let mut cross: Vec<Complex<f64>> = a
        .iter()
        .zip(&b)
        .map(|(fa, fb)| {
            let c = fb * fa.conj();
            let m = c.norm();
            if m > 1e-12 {
                c / m
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    fft2(&mut cross, h, w, true);

    let mut best: Option<(f64, Shift)> = None;
    for y in 0..h {
        for x in 0..w {
            let v = cross[y * w + x].re;
            let cand = Shift {
                dy: signed(y, h),
                dx: signed(x, w),
            };
            best = match best {
                None => Some((v, cand)),
                Some((bv, bs)) => {
                    let key = |s: &Shift| (s.dy.abs() + s.dx.abs(), s.dy, s.dx);
                    if v > bv || (v == bv && key(&cand) < key(&bs)) {
                        Some((v, cand))
                    } else {
                        Some((bv, bs))
                    }
                }
            };
        }
    }
    Ok(best.expect("non-empty image").1)
}

/// Overlap rectangle of two equal-size frames related by `shift`, as
/// `(fixed_y0, fixed_x0, moving_y0, moving_x0, height, width)`, trimmed to
/// multiples of 4 from the top-left.
pub fn overlap_rect(dims: (usize, usize), shift: Shift) -> Result<[usize; 6]> {
    let (h, w) = (dims.0 as isize, dims.1 as isize);
    let oh = h - shift.dy.abs();
    let ow = w - shift.dx.abs();
    if oh < MIN_OVERLAP as isize || ow < MIN_OVERLAP as isize {
        return Err(Error::RegistrationFailed(format!(
            "overlap {oh}x{ow} for shift ({}, {}) is below {MIN_OVERLAP}x{MIN_OVERLAP}",
            shift.dy, shift.dx
        )));
    }
    let fy = (-shift.dy).max(0) as usize;
    let fx = (-shift.dx).max(0) as usize;
    let my = shift.dy.max(0) as usize;
    let mx = shift.dx.max(0) as usize;
    let oh = oh as usize / 4 * 4;
    let ow = ow as usize / 4 * 4;
    Ok([fy, fx, my, mx, oh, ow])
}

/// Crops the overlap of `hr` and `lr_full` given a known shift.
pub fn crop_overlap(hr: &Image, lr_full: &Image, shift: Shift) -> Result<(Image, Image)> {
    if hr.dims() != lr_full.dims() {
        return invalid("crop_overlap needs equal dims");
    }
    let [fy, fx, my, mx, oh, ow] = overlap_rect(hr.dims(), shift)?;
    Ok((hr.crop(fy, fx, oh, ow)?, lr_full.crop(my, mx, oh, ow)?))
}

/// Registers the upscaled LR frame against HR and crops the aligned overlap.
pub fn register_crop(hr: &Image, lr_full: &Image) -> Result<(Image, Image)> {
    let shift = phase_correlate(hr, lr_full)?;
    crop_overlap(hr, lr_full, shift)
}
