//! Training: configuration, per-group Adam, the alternating critic/generator
//! step, the epoch loop with seeded crops, and checkpoint resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use ltgsr_autograd::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_prefixed, Checkpoint};
use crate::error::{invalid, Error, Result};
use crate::imaging::{Image, SampleGroup};
use crate::losses::{generator_adv_loss, total_loss, LossParts, LossWeights};
use crate::model::{critic_objective, generator_loss, ModelConfig, SampleTensors};
use crate::nn::ParamStore;
use crate::search::SearchMode;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub gan: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            init: 1,
            gan: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr_ltg: f64,
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub critic_steps: usize,
    pub weights: LossWeights,
    pub seeds: Seeds,
    pub model: ModelConfig,
    /// Save every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 4,
            crop: 64,
            lr_ltg: 1e-4,
            lr_encoder: 1e-6,
            lr_rest: 5e-5,
            decay_factor: 0.7,
            decay_every: 100,
            critic_steps: 1,
            weights: LossWeights::default(),
            seeds: Seeds::default(),
            model: ModelConfig::with_channels([64, 128, 256], 64),
            checkpoint_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs must be >= 1");
        }
        if self.batch == 0 {
            return invalid("batch must be >= 1");
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            return invalid(format!("crop must be a positive multiple of 16, got {}", self.crop));
        }
        for (k, v) in [
            ("lr_ltg", self.lr_ltg),
            ("lr_encoder", self.lr_encoder),
            ("lr_rest", self.lr_rest),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("{k} must be > 0, got {v}"));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return invalid(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            return invalid("decay_every must be >= 1");
        }
        if self.model.critic.input_size != self.crop {
            return invalid(format!(
                "critic input size {} does not match crop {}",
                self.model.critic.input_size, self.crop
            ));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let m = &mut self.model;
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "crop" => {
                self.crop = parse(key, value)?;
                m.critic.input_size = self.crop;
            }
            "lr_ltg" => self.lr_ltg = parse(key, value)?,
            "lr_encoder" => self.lr_encoder = parse(key, value)?,
            "lr_rest" => self.lr_rest = parse(key, value)?,
            "decay_factor" => self.decay_factor = parse(key, value)?,
            "decay_every" => self.decay_every = parse(key, value)?,
            "critic_steps" => self.critic_steps = parse(key, value)?,
            "lambda_per" => self.weights.lambda_per = parse(key, value)?,
            "lambda_tg" => self.weights.lambda_tg = parse(key, value)?,
            "lambda_adv" => self.weights.lambda_adv = parse(key, value)?,
            "gp_lambda" => self.weights.gp_lambda = parse(key, value)?,
            "seed" => {
                let s: u64 = parse(key, value)?;
                self.seeds = Seeds {
                    data: seeds::derive(s, &[0]),
                    init: seeds::derive(s, &[1]),
                    gan: seeds::derive(s, &[2]),
                };
            }
            "seed_data" => self.seeds.data = parse(key, value)?,
            "seed_init" => self.seeds.init = parse(key, value)?,
            "seed_gan" => self.seeds.gan = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "msfp_blocks" => m.ltg.m = parse(key, value)?,
            "channels" => {
                let c = parse_list(key, value)?;
                let c: [usize; 3] = c
                    .try_into()
                    .map_err(|_| Error::InvalidArgument("channels needs three widths".into()))?;
                m.set_channels(c);
            }
            "critic_channels" => m.critic.channels = parse_list(key, value)?,
            "n_res_blocks" => m.decoder.n_res_blocks = parse(key, value)?,
            "global_skip" => m.decoder.global_skip = parse(key, value)?,
            "encoder_trainable" => m.encoder.trainable = parse(key, value)?,
            "encoder_weights" => m.encoder.pretrained_weights_path = Some(PathBuf::from(value.trim())),
            "perceptual_scales" => m.perceptual_scales = parse(key, value)?,
            "patch" => m.search.patch = parse(key, value)?,
            "search_mode" => {
                m.search.mode = match value.trim() {
                    "shared" => SearchMode::Shared,
                    "independent" => SearchMode::Independent,
                    other => return invalid(format!("unknown search_mode `{other}`")),
                }
            }
            _ => return invalid(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Applies a `key = value` file; blank lines and `#` comments are skipped.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_str(&std::fs::read_to_string(path)?)
    }

    /// Learning rates `(ltg, encoder, rest)` at a 0-based epoch.
    pub fn lrs_at(&self, epoch: usize) -> GroupLrs {
        let f = self.decay_factor.powi((epoch / self.decay_every) as i32);
        GroupLrs {
            ltg: self.lr_ltg * f,
            encoder: self.lr_encoder * f,
            rest: self.lr_rest * f,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs {
    pub ltg: f64,
    pub encoder: f64,
    pub rest: f64,
}

impl GroupLrs {
    /// Decoder and critic share the "rest" rate.
    pub fn for_param(&self, name: &str) -> f64 {
        if name.starts_with("ltg.") {
            self.ltg
        } else if name.starts_with("encoder.") {
            self.encoder
        } else {
            self.rest
        }
    }
}

/// Loss components of one optimizer step, as f64.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub rec: f64,
    pub per: f64,
    pub tg: f64,
    pub adv: f64,
    pub total: f64,
    /// Last critic objective, including the penalty (0 when the critic is off).
    pub critic: f64,
    pub gp: f64,
}

impl LossRecord {
    fn is_finite(&self) -> bool {
        [self.rec, self.per, self.tg, self.adv, self.total, self.critic, self.gp]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Per-epoch means, emitted as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub rec: f64,
    pub per: f64,
    pub tg: f64,
    pub adv: f64,
    pub total: f64,
    pub critic: f64,
    pub gp: f64,
    pub lr: GroupLrs,
    #[serde(skip)]
    pub records: Vec<LossRecord>,
}

impl EpochSummary {
    fn from_records(epoch: usize, lr: GroupLrs, records: Vec<LossRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&LossRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Self {
            epoch,
            steps: records.len(),
            rec: mean(|r| r.rec),
            per: mean(|r| r.per),
            tg: mean(|r| r.tg),
            adv: mean(|r| r.adv),
            total: mean(|r| r.total),
            critic: mean(|r| r.critic),
            gp: mean(|r| r.gp),
            lr,
            records,
        }
    }
}

fn is_critic(name: &str) -> bool {
    name.starts_with("critic.")
}

/// Random `crop × crop` windows: LR/HR share an offset, Ref/Ref↓ share another.
pub fn random_crop(g: &SampleGroup, crop: usize, rng: &mut impl Rng) -> Result<SampleGroup> {
    let pick = |rng: &mut dyn rand::RngCore, img: &Image| -> Result<(usize, usize)> {
        let (h, w) = img.dims();
        if h < crop || w < crop {
            return invalid(format!("image {h}x{w} smaller than crop {crop}"));
        }
        Ok((rng.gen_range(0..=h - crop), rng.gen_range(0..=w - crop)))
    };
    let (y, x) = pick(rng, &g.hr)?;
    let (ry, rx) = pick(rng, &g.reference)?;
    SampleGroup::new(
        g.lr.crop(y, x, crop, crop)?,
        g.hr.crop(y, x, crop, crop)?,
        g.reference.crop(ry, rx, crop, crop)?,
        g.ref_down.crop(ry, rx, crop, crop)?,
    )
}

/// Where and how [`Trainer::fit`] reports.
#[derive(Default)]
pub struct FitHooks<'a> {
    /// Checkpoint destination; written every `checkpoint_every` epochs and at the end.
    pub checkpoint: Option<&'a Path>,
    /// Receives one JSON line per epoch.
    pub log: Option<&'a mut dyn Write>,
}

/// Mutable training state. The only writer of parameters.
pub struct Trainer {
    cfg: TrainConfig,
    params: ParamStore<f32>,
    adam_m: ParamStore<f32>,
    adam_v: ParamStore<f32>,
    gen_t: u64,
    critic_t: u64,
    epoch: usize,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = cfg.model.init_params::<f32>(cfg.seeds.init);
        if let Some(path) = &cfg.model.encoder.pretrained_weights_path {
            for (k, v) in load_prefixed(path, "encoder.")?.iter() {
                match params.get_mut(k) {
                    Some(t) if t.shape() == v.shape() => *t = v.clone(),
                    _ => return invalid(format!("pretrained tensor `{k}` does not fit the encoder")),
                }
            }
        }
        let zeros = zeros_like(&params);
        Ok(Self {
            cfg,
            adam_v: zeros.clone(),
            adam_m: zeros,
            params,
            gen_t: 0,
            critic_t: 0,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let expected = ck.config.model.specs();
        for s in &expected {
            match ck.params.get(&s.name) {
                Some(t) if t.shape() == s.shape => {}
                _ => return Err(Error::Format(format!("checkpoint lacks parameter `{}`", s.name))),
            }
        }
        if ck.params.len() != expected.len() {
            return Err(Error::Format("checkpoint has unexpected parameters".into()));
        }
        let fill = |s: ParamStore<f32>| if s.is_empty() { zeros_like(&ck.params) } else { s };
        Ok(Self {
            adam_m: fill(ck.adam_m),
            adam_v: fill(ck.adam_v),
            cfg: ck.config,
            params: ck.params,
            gen_t: ck.gen_t,
            critic_t: ck.critic_t,
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            gen_t: self.gen_t,
            critic_t: self.critic_t,
            params: self.params.clone(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the epoch budget, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.cfg.epochs = epochs;
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn generator_trainable(&self, name: &str) -> bool {
        !is_critic(name) && (self.cfg.model.encoder.trainable || !name.starts_with("encoder."))
    }

    /// One generator update preceded by `critic_steps` critic updates, on
    /// already cropped groups.
    pub fn train_step(&mut self, batch: &[SampleGroup]) -> Result<LossRecord> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let cfg = &self.cfg;
        let lrs = cfg.lrs_at(self.epoch);
        let samples: Vec<SampleTensors<f32>> = batch.iter().map(SampleTensors::from_group).collect();

        let tape = Tape::new();
        let p = self
            .params
            .bind_only(&tape, |n| !is_critic(n), |n| self.generator_trainable(n));
        let gl = generator_loss(&cfg.model, &cfg.weights, &p, &samples, None, None)?;

        let mut critic_value = 0.0;
        let mut gp_value = 0.0;
        let adv = if cfg.weights.lambda_adv > 0.0 {
            let hr = Tensor::stack(&samples.iter().map(|s| &s.hr).collect::<Vec<_>>());
            let sr_values: Vec<_> = gl.sr.iter().map(|v| v.value()).collect();
            let sr = Tensor::stack(&sr_values.iter().map(|v| v.as_ref()).collect::<Vec<_>>());
            for iter in 0..cfg.critic_steps {
                let gp_seed = seeds::derive(cfg.seeds.gan, &[self.step, iter as u64]);
                let ct = Tape::new();
                let pc = self.params.bind_only(&ct, is_critic, |_| true);
                let (loss, gp) =
                    critic_objective(&cfg.model, &cfg.weights, &pc, ct.constant(hr.clone()), ct.constant(sr.clone()), gp_seed)?;
                critic_value = loss.item() as f64;
                gp_value = gp.item() as f64;
                if !(critic_value.is_finite() && gp_value.is_finite()) {
                    return Err(Error::TrainingDiverged(format!(
                        "step {}: critic loss {critic_value}, penalty {gp_value}",
                        self.step
                    )));
                }
                let leaves: Vec<(String, Var<f32>)> = pc.sorted();
                let grads = ct.grad_values(loss, &leaves.iter().map(|(_, v)| *v).collect::<Vec<_>>());
                self.critic_t += 1;
                adam_update(
                    &mut self.params,
                    &mut self.adam_m,
                    &mut self.adam_v,
                    &leaves.iter().map(|(n, _)| n.as_str()).zip(grads).collect::<Vec<_>>(),
                    &|_| lrs.rest,
                    &cfg.adam,
                    self.critic_t,
                );
            }
            let pc = self.params.bind_only(&tape, is_critic, |_| false);
            let mut acc: Option<Var<f32>> = None;
            for &sr in &gl.sr {
                let a = generator_adv_loss(crate::critic::critic_forward(&cfg.model.critic, &pc, sr))?;
                acc = Some(match acc {
                    None => a,
                    Some(x) => x + a,
                });
            }
            acc.expect("non-empty batch").scale(1.0 / gl.sr.len() as f32)
        } else {
            gl.parts.adv
        };
        let parts = LossParts { adv, ..gl.parts };
        let total = total_loss(&parts, &cfg.weights);

        let record = LossRecord {
            step: self.step,
            epoch: self.epoch,
            rec: parts.rec.item() as f64,
            per: parts.per.item() as f64,
            tg: parts.tg.item() as f64,
            adv: parts.adv.item() as f64,
            total: total.item() as f64,
            critic: critic_value,
            gp: gp_value,
        };
        if !record.is_finite() {
            let dump = serde_json::to_string(&record).unwrap_or_default();
            return Err(Error::TrainingDiverged(format!("non-finite loss: {dump}")));
        }

        let leaves: Vec<(String, Var<f32>)> =
            p.sorted().into_iter().filter(|(_, v)| v.requires_grad()).collect();
        let grads = tape.grad_values(total, &leaves.iter().map(|(_, v)| *v).collect::<Vec<_>>());
        self.gen_t += 1;
        adam_update(
            &mut self.params,
            &mut self.adam_m,
            &mut self.adam_v,
            &leaves.iter().map(|(n, _)| n.as_str()).zip(grads).collect::<Vec<_>>(),
            &|n| lrs.for_param(n),
            &cfg.adam,
            self.gen_t,
        );
        self.step += 1;
        Ok(record)
    }

    /// Runs one epoch: seeded shuffle, then per-batch seeded crops.
    pub fn run_epoch(&mut self, dataset: &[SampleGroup]) -> Result<EpochSummary> {
        if dataset.is_empty() {
            return invalid("empty dataset");
        }
        let epoch = self.epoch as u64;
        let data_seed = self.cfg.seeds.data;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut seeds::rng(data_seed, &[epoch, 0]));
        let lr = self.cfg.lrs_at(self.epoch);
        let mut records = Vec::new();
        for (b, chunk) in order.chunks(self.cfg.batch).enumerate() {
            let mut rng = seeds::rng(data_seed, &[epoch, 1, b as u64]);
            let batch = chunk
                .iter()
                .map(|&i| random_crop(&dataset[i], self.cfg.crop, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            records.push(self.train_step(&batch)?);
        }
        self.epoch += 1;
        Ok(EpochSummary::from_records(self.epoch - 1, lr, records))
    }

    /// Trains until `config().epochs` epochs are complete.
    pub fn fit(&mut self, dataset: &[SampleGroup], hooks: &mut FitHooks<'_>) -> Result<Vec<EpochSummary>> {
        if dataset.is_empty() {
            return invalid("empty dataset");
        }
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let summary = self.run_epoch(dataset)?;
            if let Some(log) = hooks.log.as_deref_mut() {
                writeln!(log, "{}", serde_json::to_string(&summary)?)?;
            }
            let every = self.cfg.checkpoint_every;
            let last = self.epoch == self.cfg.epochs;
            if let Some(path) = hooks.checkpoint {
                if last || (every > 0 && self.epoch % every == 0) {
                    self.checkpoint().save(path)?;
                }
            }
            out.push(summary);
        }
        Ok(out)
    }
}

/// Trains from scratch and returns the final state.
pub fn fit(dataset: &[SampleGroup], cfg: TrainConfig, hooks: &mut FitHooks<'_>) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg)?;
    t.fit(dataset, hooks)?;
    Ok(t.checkpoint())
}

fn zeros_like(p: &ParamStore<f32>) -> ParamStore<f32> {
    let mut z = ParamStore::default();
    for (k, v) in p.iter() {
        z.insert(k.clone(), Tensor::zeros(v.shape()));
    }
    z
}

fn adam_update(
    params: &mut ParamStore<f32>,
    m: &mut ParamStore<f32>,
    v: &mut ParamStore<f32>,
    grads: &[(&str, Tensor<f32>)],
    lr: &dyn Fn(&str) -> f64,
    cfg: &AdamConfig,
    t: u64,
) {
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let eps = cfg.eps as f32;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, g) in grads {
        let step = (lr(name) / c1) as f32;
        let c2 = c2 as f32;
        let pm = m.get_mut(name).expect("adam state").data_mut();
        let pv = v.get_mut(name).expect("adam state").data_mut();
        let pp = params.get_mut(name).expect("parameter").data_mut();
        for (((p, m), v), &g) in pp.iter_mut().zip(pm.iter_mut()).zip(pv.iter_mut()).zip(g.data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / ((*v / c2).sqrt() + eps);
        }
    }
}
