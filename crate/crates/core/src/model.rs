//! The assembled network: encoder, texture search, generator, decoder and critic.

use std::rc::Rc;

use ltgsr_autograd::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::critic::{critic_forward, CriticConfig};
use crate::decoder::{decode_var, DecoderConfig};
use crate::encoder::{encode_var, EncoderConfig, Pyramid};
use crate::error::{invalid, Result};
use crate::generator::{ltg_forward_var, LtgConfig};
use crate::imaging::{Image, SampleGroup};
use crate::losses::{
    critic_loss, generator_adv_loss, gradient_penalty, perceptual_loss, rec_loss, texture_gen_loss,
    total_loss, LossParts, LossWeights,
};
use crate::nn::{Bound, ParamSpec, ParamStore};
use crate::search::{plan_transfer, SearchConfig, TransferPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ltg: LtgConfig,
    pub decoder: DecoderConfig,
    pub critic: CriticConfig,
    pub search: SearchConfig,
    /// Scales used by the texture term of the perceptual loss.
    pub perceptual_scales: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_channels([64, 128, 256], 64)
    }
}

impl ModelConfig {
    /// Consistent widths everywhere; the critic sized for `crop`.
    pub fn with_channels(channels: [usize; 3], crop: usize) -> Self {
        Self {
            encoder: EncoderConfig::with_channels(channels),
            ltg: LtgConfig { m: 3, channels },
            decoder: DecoderConfig {
                channels,
                ..DecoderConfig::default()
            },
            critic: CriticConfig {
                input_size: crop,
                ..CriticConfig::default()
            },
            search: SearchConfig::default(),
            perceptual_scales: 3,
        }
    }

    /// Sets the same widths on every component; deep stages follow the default rule.
    pub fn set_channels(&mut self, channels: [usize; 3]) {
        self.encoder.channels = channels;
        self.encoder.deep_channels = [2 * channels[2]; 2];
        self.ltg.channels = channels;
        self.decoder.channels = channels;
    }

    pub fn channels(&self) -> [usize; 3] {
        self.encoder.channels
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ltg.validate()?;
        self.decoder.validate()?;
        self.critic.validate()?;
        let c = self.encoder.channels;
        if self.ltg.channels != c || self.decoder.channels != c {
            return invalid("encoder, generator and decoder channel widths must agree");
        }
        if self.search.patch % 2 == 0 {
            return invalid("search patch size must be odd");
        }
        if self.perceptual_scales > 3 {
            return invalid("perceptual_scales must be <= 3");
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = self.encoder.specs();
        v.extend(self.ltg.specs());
        v.extend(self.decoder.specs());
        v.extend(self.critic.specs());
        v
    }

    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamStore<S> {
        ParamStore::init(&self.specs(), seed)
    }
}

/// One training group as `[1, 1, H, W]` tensors.
#[derive(Clone, Debug)]
pub struct SampleTensors<S> {
    pub lr: Tensor<S>,
    pub hr: Tensor<S>,
    pub reference: Tensor<S>,
    pub ref_down: Tensor<S>,
}

impl<S: Scalar> SampleTensors<S> {
    pub fn from_group(g: &SampleGroup) -> Self {
        Self {
            lr: g.lr.to_tensor(),
            hr: g.hr.to_tensor(),
            reference: g.reference.to_tensor(),
            ref_down: g.ref_down.to_tensor(),
        }
    }
}

/// Search-path forward of one sample.
pub struct SearchForward<'t, S: Scalar> {
    pub sr: Var<'t, S>,
    pub textures: Pyramid<Var<'t, S>>,
    pub generated: Pyramid<Var<'t, S>>,
    pub plan: TransferPlan<S>,
}

fn values<S: Scalar>(p: &Pyramid<Var<'_, S>>) -> Pyramid<Tensor<S>> {
    p.map(|v| (*v.value()).clone())
}

/// Encodes LR and references, searches (unless `plan` is given), transfers,
/// runs the generator, and decodes with the searched textures.
pub fn forward_search<'t, S: Scalar>(
    cfg: &ModelConfig,
    p: &Bound<'t, S>,
    lr: Var<'t, S>,
    reference: Var<'t, S>,
    ref_down: Var<'t, S>,
    plan: Option<&TransferPlan<S>>,
) -> Result<SearchForward<'t, S>> {
    if reference.shape() != ref_down.shape() {
        return invalid("reference and degraded reference must share dims");
    }
    let f_lr = encode_var(&cfg.encoder, p, lr)?;
    let f_ref = encode_var(&cfg.encoder, p, reference)?;
    let plan = match plan {
        Some(pl) => pl.clone(),
        None => {
            let f_rd = encode_var(&cfg.encoder, p, ref_down)?;
            plan_transfer(&values(&f_lr), &values(&f_rd), &values(&f_ref), &cfg.search)?
        }
    };
    let textures = Pyramid([0, 1, 2].map(|l| plan.transfer(l, f_ref[l])));
    let generated = ltg_forward_var(&cfg.ltg, p, &f_lr);
    let sr = decode_var(&cfg.decoder, p, &f_lr, &textures, &plan.r, lr)?;
    Ok(SearchForward {
        sr,
        textures,
        generated,
        plan,
    })
}

fn ones_relevance<S: Scalar>(f: &Pyramid<Var<'_, S>>) -> Pyramid<Rc<Tensor<S>>> {
    f.map(|v| {
        let [_, _, h, w] = v.shape();
        Rc::new(Tensor::full([1, 1, h, w], S::one()))
    })
}

/// Refless forward: generated textures with unit relevance.
pub fn forward_refless<'t, S: Scalar>(cfg: &ModelConfig, p: &Bound<'t, S>, lr: Var<'t, S>) -> Result<Var<'t, S>> {
    let f_lr = encode_var(&cfg.encoder, p, lr)?;
    let generated = ltg_forward_var(&cfg.ltg, p, &f_lr);
    decode_var(&cfg.decoder, p, &f_lr, &generated, &ones_relevance(&f_lr), lr)
}

fn check_inference_dims(img: &Image) -> Result<()> {
    let (h, w) = img.dims();
    if h % 16 != 0 || w % 16 != 0 {
        return invalid(format!("inference needs dims divisible by 16, got {h}x{w}"));
    }
    Ok(())
}

/// Reference-free super-resolution, clamped to `[0, 1]`.
pub fn infer<S: Scalar>(lr: &Image, params: &ParamStore<S>, cfg: &ModelConfig) -> Result<Image> {
    check_inference_dims(lr)?;
    let tape = Tape::inference();
    let p = params.bind(&tape, |_| false);
    let out = forward_refless(cfg, &p, tape.constant(lr.to_tensor()))?;
    Image::from_tensor(&out.value())
}

/// Search-path super-resolution with an explicit reference pair.
pub fn infer_with_ref<S: Scalar>(
    lr: &Image,
    reference: &Image,
    ref_down: &Image,
    params: &ParamStore<S>,
    cfg: &ModelConfig,
) -> Result<Image> {
    check_inference_dims(lr)?;
    check_inference_dims(reference)?;
    if reference.dims() != ref_down.dims() {
        return invalid("reference and degraded reference must share dims");
    }
    let tape = Tape::inference();
    let p = params.bind(&tape, |_| false);
    let fwd = forward_search(
        cfg,
        &p,
        tape.constant(lr.to_tensor()),
        tape.constant(reference.to_tensor()),
        tape.constant(ref_down.to_tensor()),
        None,
    )?;
    Image::from_tensor(&fwd.sr.value())
}

/// Batch-mean generator objective.
pub struct GeneratorLoss<'t, S: Scalar> {
    pub total: Var<'t, S>,
    pub parts: LossParts<Var<'t, S>>,
    pub plans: Vec<TransferPlan<S>>,
    pub sr: Vec<Var<'t, S>>,
    /// Searched textures per sample.
    pub textures: Vec<Pyramid<Var<'t, S>>>,
}

fn mean_of<'t, S: Scalar>(xs: &[Var<'t, S>]) -> Var<'t, S> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = acc + x;
    }
    acc.scale(S::one() / S::lit(xs.len() as f64))
}

/// Search-path generator losses for a batch. `critic` is `None` when the
/// adversarial weight is zero; the adversarial part is then a constant zero.
pub fn generator_loss<'t, S: Scalar>(
    cfg: &ModelConfig,
    weights: &LossWeights,
    p: &Bound<'t, S>,
    batch: &[SampleTensors<S>],
    plans: Option<&[TransferPlan<S>]>,
    critic: Option<&Bound<'t, S>>,
) -> Result<GeneratorLoss<'t, S>> {
    generator_loss_with_targets(cfg, weights, p, batch, plans, critic, None)
}

/// [`generator_loss`] with the stop-gradient texture targets of the
/// perceptual and texture terms pinned to given values instead of the
/// searched textures. Finite-difference checks use this so the targets do not
/// move with the encoder weights.
pub fn generator_loss_with_targets<'t, S: Scalar>(
    cfg: &ModelConfig,
    weights: &LossWeights,
    p: &Bound<'t, S>,
    batch: &[SampleTensors<S>],
    plans: Option<&[TransferPlan<S>]>,
    critic: Option<&Bound<'t, S>>,
    targets: Option<&[Pyramid<Tensor<S>>]>,
) -> Result<GeneratorLoss<'t, S>> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let tape = p.tape();
    let mut rec = Vec::new();
    let mut per = Vec::new();
    let mut tg = Vec::new();
    let mut adv = Vec::new();
    let mut used = Vec::new();
    let mut srs = Vec::new();
    let mut textures = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        let lr = tape.constant(s.lr.clone());
        let hr = tape.constant(s.hr.clone());
        let fwd = forward_search(
            cfg,
            p,
            lr,
            tape.constant(s.reference.clone()),
            tape.constant(s.ref_down.clone()),
            plans.map(|pl| &pl[i]),
        )?;
        let target = match targets {
            Some(t) => t[i].map(|v| tape.constant(v.clone())),
            None => fwd.textures.clone(),
        };
        rec.push(rec_loss(hr, fwd.sr)?);
        per.push(perceptual_loss(
            &cfg.encoder,
            p,
            hr,
            fwd.sr,
            Some(&target),
            cfg.perceptual_scales,
        )?);
        tg.push(texture_gen_loss(&target, &fwd.generated, &fwd.plan.r)?);
        if let Some(c) = critic {
            adv.push(generator_adv_loss(critic_forward(&cfg.critic, c, fwd.sr))?);
        }
        srs.push(fwd.sr);
        textures.push(fwd.textures);
        used.push(fwd.plan);
    }
    let parts = LossParts {
        rec: mean_of(&rec),
        per: mean_of(&per),
        tg: mean_of(&tg),
        adv: if adv.is_empty() {
            tape.constant(Tensor::scalar(S::zero()))
        } else {
            mean_of(&adv)
        },
    };
    Ok(GeneratorLoss {
        total: total_loss(&parts, weights),
        parts,
        plans: used,
        sr: srs,
        textures,
    })
}

/// WGAN-GP critic objective on `[N, 1, H, W]` real and fake batches.
pub fn critic_objective<'t, S: Scalar>(
    cfg: &ModelConfig,
    weights: &LossWeights,
    p: &Bound<'t, S>,
    hr: Var<'t, S>,
    sr: Var<'t, S>,
    gp_seed: u64,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let d_real = critic_forward(&cfg.critic, p, hr);
    let d_fake = critic_forward(&cfg.critic, p, sr);
    let gp = gradient_penalty(|x| critic_forward(&cfg.critic, p, x), hr, sr, weights.gp_lambda, gp_seed)?;
    Ok((critic_loss(d_real, d_fake, gp)?, gp))
}
