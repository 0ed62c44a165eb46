//! Coarse-to-fine fusion of LR features with relevance-gated textures.

use std::rc::Rc;

use ltgsr_autograd::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, Pyramid};
use crate::error::{invalid, Result};
use crate::generator::{resize_var, Msfp};
use crate::imaging::Image;
use crate::nn::{Bound, Conv, ParamSpec, ParamStore, ResBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_res_blocks: usize,
    pub channels: [usize; 3],
    /// Adds the LR image to the head output.
    pub global_skip: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_res_blocks: 2,
            channels: [64, 128, 256],
            global_skip: true,
        }
    }
}

struct Level {
    fuse: Conv,
    up_merge: Option<Conv>,
    res: Vec<ResBlock>,
    msfp: Option<Msfp>,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_res_blocks == 0 {
            return invalid("decoder needs at least one residual block per scale");
        }
        if self.channels.contains(&0) {
            return invalid("decoder channel counts must be >= 1");
        }
        Ok(())
    }

    fn level(&self, l: usize) -> Level {
        let c = self.channels;
        let name = format!("decoder.l{}", l + 1);
        Level {
            fuse: Conv::new(format!("{name}.fuse"), 2 * c[l], c[l], 3),
            up_merge: (l < 2).then(|| Conv::new(format!("{name}.up_merge"), c[l] + c[l + 1], c[l], 3)),
            res: (0..self.n_res_blocks)
                .map(|k| ResBlock::new(&format!("{name}.res{k}"), c[l]))
                .collect(),
            msfp: (l < 2).then(|| Msfp::new(&format!("{name}.msfp"), (l..3).collect(), c, vec![l])),
        }
    }

    fn head(&self) -> Conv {
        Conv::new("decoder.head", self.channels.iter().sum(), 1, 3).with_gain(0.01)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        for l in 0..3 {
            let lv = self.level(l);
            v.extend(lv.fuse.specs());
            if let Some(c) = &lv.up_merge {
                v.extend(c.specs());
            }
            v.extend(lv.res.iter().flat_map(|r| r.specs()));
            if let Some(m) = &lv.msfp {
                v.extend(m.specs());
            }
        }
        v.extend(self.head().specs());
        v
    }
}

/// One decoder scale. `coarser` holds the already refined maps of all coarser
/// levels, nearest first; it is empty exactly at the coarsest level.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block<'t, S: Scalar>(
    cfg: &DecoderConfig,
    p: &Bound<'t, S>,
    level: usize,
    f_lr: Var<'t, S>,
    t: Var<'t, S>,
    r: Rc<Tensor<S>>,
    coarser: &[Var<'t, S>],
) -> Result<Var<'t, S>> {
    let [_, c, h, w] = f_lr.shape();
    if t.shape() != f_lr.shape() {
        return invalid(format!(
            "texture {:?} does not match features {:?}",
            t.shape(),
            f_lr.shape()
        ));
    }
    if r.shape() != [1, 1, h, w] {
        return invalid(format!("relevance {:?} does not match {h}x{w}", r.shape()));
    }
    if c != cfg.channels[level] || coarser.len() != 2 - level {
        return invalid(format!("inconsistent inputs at decoder level {}", level + 1));
    }
    let lv = cfg.level(level);
    let gated = t.mul_const(r);
    let mut x = lv.fuse.forward(p, Var::concat(&[f_lr, gated])) + f_lr;
    if let (Some(merge), Some(&prev)) = (&lv.up_merge, coarser.first()) {
        x = merge.forward(p, Var::concat(&[x, resize_var(prev, (h, w))]));
    }
    for rb in &lv.res {
        x = rb.forward(p, x);
    }
    if let Some(m) = &lv.msfp {
        let mut inputs = vec![x];
        inputs.extend_from_slice(coarser);
        x = m.forward(p, &inputs)[0];
    }
    Ok(x)
}

/// Raw (unclamped) reconstruction as a `[1, 1, H, W]` var.
pub fn decode_var<'t, S: Scalar>(
    cfg: &DecoderConfig,
    p: &Bound<'t, S>,
    f_lr: &Pyramid<Var<'t, S>>,
    t: &Pyramid<Var<'t, S>>,
    r: &Pyramid<Rc<Tensor<S>>>,
    lr: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let [_, _, h, w] = f_lr[0].shape();
    if lr.shape() != [1, 1, h, w] {
        return invalid(format!("LR image {:?} does not match features {h}x{w}", lr.shape()));
    }
    let d3 = decoder_block(cfg, p, 2, f_lr[2], t[2], r[2].clone(), &[])?;
    let d2 = decoder_block(cfg, p, 1, f_lr[1], t[1], r[1].clone(), &[d3])?;
    let d1 = decoder_block(cfg, p, 0, f_lr[0], t[0], r[0].clone(), &[d2, d3])?;
    let merged = Var::concat(&[d1, resize_var(d2, (h, w)), resize_var(d3, (h, w))]);
    let out = cfg.head().forward(p, merged);
    Ok(if cfg.global_skip { out + lr } else { out })
}

/// Inference-mode decode, clamped into an image.
pub fn decode<S: Scalar>(
    f_lr: &FeaturePyramid<S>,
    textures: &Pyramid<Tensor<S>>,
    relevance: &Pyramid<Tensor<S>>,
    lr: &Image,
    params: &ParamStore<S>,
    cfg: &DecoderConfig,
) -> Result<Image> {
    let tape = Tape::inference();
    let p = params.bind(&tape, |_| false);
    let f = f_lr.map(|x| tape.constant(x.clone()));
    let t = textures.map(|x| tape.constant(x.clone()));
    let r = relevance.map(|x| Rc::new(x.clone()));
    let out = decode_var(cfg, &p, &f, &t, &r, tape.constant(lr.to_tensor()))?;
    Image::from_tensor(&out.value())
}
