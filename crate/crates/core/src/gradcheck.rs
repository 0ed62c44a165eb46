//! Finite-difference verification of the full generator objective in f64.
//!
//! Search plans and the stop-gradient texture targets are pinned at the base
//! parameters, so the probed function is smooth apart from rectifier kinks.

use ltgsr_autograd::check::rel_err;
use ltgsr_autograd::{Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Pyramid;
use crate::error::{invalid, Result};
use crate::imaging::{make_dataset, Image, SampleGroup};
use crate::losses::LossWeights;
use crate::model::{generator_loss, generator_loss_with_targets, ModelConfig, SampleTensors};
use crate::nn::ParamStore;
use crate::search::TransferPlan;
use crate::seeds;

pub const GROUPS: [&str; 4] = ["encoder.", "ltg.", "decoder.", "critic."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Small model used for gradient checks: every component present, all tiny.
pub fn probe_model() -> ModelConfig {
    let mut cfg = ModelConfig::with_channels([2, 3, 4], 16);
    cfg.ltg.m = 1;
    cfg.decoder.n_res_blocks = 1;
    cfg.critic.channels = vec![2, 2];
    cfg
}

struct Setup {
    cfg: ModelConfig,
    weights: LossWeights,
    batch: Vec<SampleTensors<f64>>,
    plans: Vec<TransferPlan<f64>>,
    targets: Vec<Pyramid<Tensor<f64>>>,
}

impl Setup {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
        let tape = Tape::inference();
        let p = params.bind(&tape, |_| false);
        let gl = generator_loss_with_targets(
            &self.cfg,
            &self.weights,
            &p,
            &self.batch,
            Some(&self.plans),
            Some(&p),
            Some(&self.targets),
        )?;
        Ok(gl.total.item())
    }
}

/// Compares analytic and central-difference gradients of the total generator
/// loss (all four terms weighted in) at `n_probes` random parameter elements,
/// spread round-robin over the encoder, generator, decoder and critic.
pub fn probe_total_loss(seed: u64, n_probes: usize, step: f64, floor: f64) -> Result<Vec<Probe>> {
    if !(step > 0.0) {
        return invalid("finite-difference step must be > 0");
    }
    let cfg = probe_model();
    let weights = LossWeights::default();
    let mut params = cfg.init_params::<f64>(seed);
    // Zero biases put every rectifier fed by a zero region exactly on its kink.
    let mut jitter = seeds::rng(seed, &[3]);
    let biases: Vec<String> = params.names().filter(|n| n.ends_with(".bias")).cloned().collect();
    for name in biases {
        for v in params.get_mut(&name).expect("listed").data_mut() {
            *v += jitter.gen_range(-0.05..0.05);
        }
    }
    // The phantom generator's minimum is 32×32; probes run on a 16×16 corner.
    let batch = make_dataset(2, seeds::derive(seed, &[1]), 32, 32)?
        .iter()
        .map(|g| {
            let c = |img: &Image| img.crop(8, 8, 16, 16);
            Ok(SampleTensors::from_group(&SampleGroup::new(
                c(&g.lr)?,
                c(&g.hr)?,
                c(&g.reference)?,
                c(&g.ref_down)?,
            )?))
        })
        .collect::<Result<Vec<SampleTensors<f64>>>>()?;

    let tape = Tape::new();
    let p = params.bind(&tape, |_| true);
    let base = generator_loss(&cfg, &weights, &p, &batch, None, Some(&p))?;
    let setup = Setup {
        targets: base
            .textures
            .iter()
            .map(|t| t.map(|v| (*v.value()).clone()))
            .collect(),
        plans: base.plans,
        cfg,
        weights,
        batch,
    };
    let pinned = generator_loss_with_targets(
        &setup.cfg,
        &setup.weights,
        &p,
        &setup.batch,
        Some(&setup.plans),
        Some(&p),
        Some(&setup.targets),
    )?;

    let mut rng = seeds::rng(seed, &[2]);
    let mut chosen = Vec::new();
    for k in 0..n_probes {
        let group = GROUPS[k % GROUPS.len()];
        let names: Vec<&String> = params.names().filter(|n| n.starts_with(group)).collect();
        let name = names[rng.gen_range(0..names.len())].clone();
        let index = rng.gen_range(0..params.get(&name).expect("listed").len());
        chosen.push((name, index));
    }
    let vars: Vec<_> = chosen.iter().map(|(n, _)| p.var(n)).collect();
    let grads = tape.grad_values(pinned.total, &vars);

    chosen
        .into_iter()
        .zip(grads)
        .map(|((name, index), g)| {
            let analytic = g.data()[index];
            let mut shifted = params.clone();
            let mut at = |delta: f64| -> Result<f64> {
                let t = shifted.get_mut(&name).expect("listed");
                let orig = params.get(&name).expect("listed").data()[index];
                t.data_mut()[index] = orig + delta;
                setup.loss(&shifted)
            };
            let numeric = (at(step)? - at(-step)?) / (2.0 * step);
            Ok(Probe {
                rel_err: rel_err(analytic, numeric, floor),
                name,
                index,
                analytic,
                numeric,
            })
        })
        .collect()
}
