//! Synthetic angiogram-like phantoms: branching vessel trees converging on a
//! dark avascular disk, a capillary mesh, and a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Image;
use crate::error::{invalid, Result};

struct Canvas {
    h: usize,
    w: usize,
    v: Vec<f32>,
}

impl Canvas {
    /// Max-blends a segment with a Gaussian cross profile.
    fn segment(&mut self, p0: (f64, f64), p1: (f64, f64), sigma: f64, amp: f64) {
        let reach = 3.0 * sigma + 1.0;
        let y_lo = (p0.0.min(p1.0) - reach).floor().max(0.0) as usize;
        let y_hi = ((p0.0.max(p1.0) + reach).ceil() as usize).min(self.h.saturating_sub(1));
        let x_lo = (p0.1.min(p1.1) - reach).floor().max(0.0) as usize;
        let x_hi = ((p0.1.max(p1.1) + reach).ceil() as usize).min(self.w.saturating_sub(1));
        let (dy, dx) = (p1.0 - p0.0, p1.1 - p0.1);
        let len2 = (dy * dy + dx * dx).max(1e-12);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (py, px) = (y as f64 - p0.0, x as f64 - p0.1);
                let t = ((py * dy + px * dx) / len2).clamp(0.0, 1.0);
                let (ey, ex) = (py - t * dy, px - t * dx);
                let val = (amp * (-(ey * ey + ex * ex) * inv).exp()) as f32;
                let cell = &mut self.v[y * self.w + x];
                if val > *cell {
                    *cell = val;
                }
            }
        }
    }
}

struct Scene {
    center: (f64, f64),
    faz_radius: f64,
    h: f64,
    w: f64,
}

impl Scene {
    fn inside(&self, p: (f64, f64)) -> bool {
        p.0 >= -2.0 && p.1 >= -2.0 && p.0 <= self.h + 1.0 && p.1 <= self.w + 1.0
    }

    fn dist_to_center(&self, p: (f64, f64)) -> f64 {
        ((p.0 - self.center.0).powi(2) + (p.1 - self.center.1).powi(2)).sqrt()
    }
}

/// Grows one vessel from `start` heading `angle`, branching recursively.
fn grow(
    canvas: &mut Canvas,
    scene: &Scene,
    rng: &mut ChaCha8Rng,
    start: (f64, f64),
    mut angle: f64,
    width: f64,
    depth: u32,
) {
    let mut p = start;
    let step = 1.5;
    let max_steps = (scene.h + scene.w) as usize;
    let amp = 0.55 + 0.45 * (width / 2.5).min(1.0);
    for i in 0..max_steps {
        // Steer gently toward the center, with a random bend.
        let to_c = (scene.center.0 - p.0).atan2(scene.center.1 - p.1);
        let mut diff = to_c - angle;
        while diff > std::f64::consts::PI {
            diff -= 2.0 * std::f64::consts::PI;
        }
        while diff < -std::f64::consts::PI {
            diff += 2.0 * std::f64::consts::PI;
        }
        angle += 0.04 * diff + rng.gen_range(-0.22..0.22);
        let next = (p.0 + step * angle.sin(), p.1 + step * angle.cos());
        canvas.segment(p, next, width * 0.5, amp);
        p = next;
        if !scene.inside(p) || scene.dist_to_center(p) < scene.faz_radius + 1.5 {
            return;
        }
        if depth < 4 && i > 4 && rng.gen_bool(0.045) {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let child = angle + side * rng.gen_range(0.5..1.1);
            grow(canvas, scene, rng, p, child, (width * 0.72).max(0.7), depth + 1);
        }
    }
}

/// Deterministic vessel phantom of the given size.
pub fn generate_phantom(seed: u64, height: usize, width: usize) -> Result<Image> {
    if height < 32 || width < 32 || height % 4 != 0 || width % 4 != 0 {
        return invalid(format!(
            "phantom dims must be >= 32 and divisible by 4, got {height}x{width}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let side = hf.min(wf);
    let scene = Scene {
        center: (
            hf / 2.0 + rng.gen_range(-0.08..0.08) * hf,
            wf / 2.0 + rng.gen_range(-0.08..0.08) * wf,
        ),
        faz_radius: side * rng.gen_range(0.08..0.13),
        h: hf,
        w: wf,
    };
    let mut canvas = Canvas {
        h: height,
        w: width,
        v: vec![0.0; height * width],
    };

    // Trunks enter from the border.
    let trunks = rng.gen_range(5..9);
    for _ in 0..trunks {
        let t: f64 = rng.gen_range(0.0..1.0);
        let start = match rng.gen_range(0..4) {
            0 => (0.0, t * wf),
            1 => (hf - 1.0, t * wf),
            2 => (t * hf, 0.0),
            _ => (t * hf, wf - 1.0),
        };
        let angle = (scene.center.0 - start.0).atan2(scene.center.1 - start.1)
            + rng.gen_range(-0.5..0.5);
        let width0 = rng.gen_range(2.0..3.2) * side / 128.0;
        grow(&mut canvas, &scene, &mut rng, start, angle, width0.max(1.2), 0);
    }

    // Capillary mesh: short thin random walks outside the avascular zone.
    let capillaries = (hf * wf / 90.0) as usize;
    for _ in 0..capillaries {
        let mut p = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
        if scene.dist_to_center(p) < scene.faz_radius + 2.0 {
            continue;
        }
        let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.3..0.6);
        for _ in 0..rng.gen_range(2..6) {
            angle += rng.gen_range(-0.6..0.6);
            let next = (p.0 + 1.6 * angle.sin(), p.1 + 1.6 * angle.cos());
            if scene.dist_to_center(next) < scene.faz_radius + 1.0 {
                break;
            }
            canvas.segment(p, next, 0.45, amp);
            p = next;
        }
    }

    // Dark avascular disk, background noise.
    let noise = Normal::new(0.0, 0.035).expect("valid sigma");
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let d = scene.dist_to_center((y as f64, x as f64));
            let edge = ((d - scene.faz_radius) / 2.0).clamp(0.0, 1.0);
            let faz = (edge * edge * (3.0 - 2.0 * edge)) as f32;
            let base = 0.06 + noise.sample(&mut rng) as f32;
            let v = canvas.v[y * width + x] * faz + base * (0.35 + 0.65 * faz);
            pixels.push(v);
        }
    }
    Image::from_clamped(height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(7, 128, 128).unwrap();
        let b = generate_phantom(7, 128, 128).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_differ_substantially() {
        let a = generate_phantom(7, 128, 128).unwrap();
        let b = generate_phantom(8, 128, 128).unwrap();
        let frac = a.count_differing(&b) as f64 / (128.0 * 128.0);
        assert!(frac >= 0.01, "only {frac} differ");
    }

    #[test]
    fn rejects_small_or_misaligned_dims() {
        assert!(generate_phantom(1, 16, 16).is_err());
        assert!(generate_phantom(1, 34, 32).is_err());
    }

    #[test]
    fn center_is_darker_than_periphery() {
        let img = generate_phantom(3, 128, 128).unwrap();
        let mean = |y0: usize, x0: usize, s: usize| {
            let mut acc = 0.0;
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    acc += img.get(y, x) as f64;
                }
            }
            acc / (s * s) as f64
        };
        let overall = img.pixels().iter().map(|&v| v as f64).sum::<f64>() / (128.0 * 128.0);
        assert!(mean(60, 60, 8) < overall);
        assert!(img.pixels().iter().any(|&v| v > 0.5), "no bright vessels");
    }
}
