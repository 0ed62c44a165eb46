//! Checkpoint evaluation and the reference-shuffling sensitivity study.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imaging::SampleGroup;
use crate::metrics::{image_metrics, MetricReport, PdistModel};
use crate::model::{infer, infer_with_ref};
use crate::seeds;

/// Refless inference on every LR image, scored against its HR image.
pub fn evaluate(ckpt: &Checkpoint, dataset: &[SampleGroup]) -> Result<MetricReport> {
    let model = PdistModel::seeded();
    let cfg = &ckpt.config.model;
    let per_image = dataset
        .par_iter()
        .enumerate()
        .map(|(i, g)| image_metrics(i, &infer(&g.lr, &ckpt.params, cfg)?, &g.hr, &model))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(per_image))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Texture search against a shuffled reference.
    Search,
    /// Generated textures, no reference.
    Ltg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub seed: u64,
    pub mode: InferenceMode,
    /// `assignment[i]` is the group whose reference sample `i` was paired with.
    pub assignment: Vec<usize>,
    pub report: MetricReport,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; identical values always give `std == 0`.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = if values.iter().all(|&v| v == values[0]) {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub pdist: MeanStd,
}

impl ModeSummary {
    fn of(rows: &[&SensitivityRow]) -> Self {
        let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&rows.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
        Self {
            psnr: col(|r| r.psnr),
            ssim: col(|r| r.ssim),
            pdist: col(|r| r.pdist),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
    pub search: ModeSummary,
    pub ltg: ModeSummary,
}

/// Seeded reference permutation for one study seed.
pub fn shuffled_assignment(n: usize, seed: u64) -> Vec<usize> {
    let mut a: Vec<usize> = (0..n).collect();
    a.shuffle(&mut seeds::rng(seed, &[0x5e5]));
    a
}

/// For each seed, scores search-path inference with shuffled references and
/// refless inference. Requires a checkpoint that has taken at least one step.
pub fn ref_sensitivity(ckpt: &Checkpoint, dataset: &[SampleGroup], study_seeds: &[u64]) -> Result<SensitivityReport> {
    if ckpt.step == 0 {
        return Err(Error::InvalidState("checkpoint has not been trained".into()));
    }
    let model = PdistModel::seeded();
    let cfg = &ckpt.config.model;
    let mut rows = Vec::new();
    for &seed in study_seeds {
        let assignment = shuffled_assignment(dataset.len(), seed);
        let search = dataset
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let r = &dataset[assignment[i]];
                let out = infer_with_ref(&g.lr, &r.reference, &r.ref_down, &ckpt.params, cfg)?;
                image_metrics(i, &out, &g.hr, &model)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(SensitivityRow {
            seed,
            mode: InferenceMode::Search,
            assignment: assignment.clone(),
            report: MetricReport::from_images(search),
        });
        rows.push(SensitivityRow {
            seed,
            mode: InferenceMode::Ltg,
            assignment,
            report: evaluate(ckpt, dataset)?,
        });
    }
    let pick = |m: InferenceMode| rows.iter().filter(|r| r.mode == m).collect::<Vec<_>>();
    Ok(SensitivityReport {
        search: ModeSummary::of(&pick(InferenceMode::Search)),
        ltg: ModeSummary::of(&pick(InferenceMode::Ltg)),
        rows,
    })
}
