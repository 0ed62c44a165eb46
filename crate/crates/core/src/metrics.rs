//! Image quality metrics: PSNR, SSIM, and an encoder-feature perceptual distance.

use ltgsr_autograd::Tensor;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::encoder::{encode, EncoderConfig};
use crate::error::{invalid, Result};
use crate::imaging::Image;
use crate::nn::ParamStore;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return invalid(format!("image dims differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let s: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.pixels().len() as f64)
}

/// Peak 1.0; zero error maps to `f64::INFINITY`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM (Gaussian window 11, σ 1.5, dynamic range 1), mean over valid positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let k = gaussian_window();
    let x: Vec<f64> = a.pixels().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.pixels().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Fixed, seeded encoder used as a stand-in for a learned perceptual metric.
#[derive(Clone, Debug)]
pub struct PdistModel {
    pub cfg: EncoderConfig,
    pub params: ParamStore<f64>,
}

impl PdistModel {
    pub const SEED: u64 = 2024;

    pub fn seeded() -> Self {
        let cfg = EncoderConfig::with_channels([32, 64, 128]);
        let params = ParamStore::init(&cfg.specs(), Self::SEED);
        Self { cfg, params }
    }
}

impl Default for PdistModel {
    fn default() -> Self {
        Self::seeded()
    }
}

fn unit_channels(t: &Tensor<f64>) -> Vec<f64> {
    let [_, c, h, w] = t.shape();
    let hw = h * w;
    let d = t.data();
    let mut out = d.to_vec();
    for p in 0..hw {
        let norm = (0..c).map(|ch| d[ch * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
        for ch in 0..c {
            out[ch * hw + p] /= norm;
        }
    }
    out
}

/// Mean over scales of the per-pixel squared distance between unit-normalized features.
pub fn perceptual_distance(a: &Image, b: &Image, model: &PdistModel) -> Result<f64> {
    same_dims(a, b)?;
    let fa = encode(a, &model.cfg, &model.params)?;
    let fb = encode(b, &model.cfg, &model.params)?;
    let mut total = 0.0;
    for l in 0..3 {
        let [_, _, h, w] = fa[l].shape();
        let ua = unit_channels(&fa[l]);
        let ub = unit_channels(&fb[l]);
        let s: f64 = ua.iter().zip(&ub).map(|(p, q)| (p - q) * (p - q)).sum();
        total += s / (h * w) as f64;
    }
    Ok(total / 3.0)
}

pub(crate) fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

pub(crate) fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub pdist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub pdist: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    /// Averages in index order; an empty list gives zeros.
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let psnr = per_image.iter().map(|m| m.psnr).sum::<f64>() / n;
        let ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / n;
        let pdist = per_image.iter().map(|m| m.pdist).sum::<f64>() / n;
        Self {
            psnr,
            ssim,
            pdist,
            per_image,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,psnr,ssim,pdist\n");
        for m in &self.per_image {
            let p = if m.psnr.is_infinite() {
                "inf".to_string()
            } else {
                m.psnr.to_string()
            };
            s.push_str(&format!("{},{},{},{}\n", m.index, p, m.ssim, m.pdist));
        }
        s
    }
}

pub fn image_metrics(index: usize, out: &Image, target: &Image, model: &PdistModel) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        index,
        psnr: psnr(out, target)?,
        ssim: ssim(out, target)?,
        pdist: perceptual_distance(out, target, model)?,
    })
}
