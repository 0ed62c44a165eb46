//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::rc::Rc;
use std::time::{Duration, Instant};

use ltgsr_autograd::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ltgsr_core::checkpoint::Checkpoint;
use ltgsr_core::decoder::decode;
use ltgsr_core::encoder::{encode, Pyramid};
use ltgsr_core::eval::ref_sensitivity;
use ltgsr_core::generator::{count_params, LtgConfig};
use ltgsr_core::gradcheck::probe_total_loss;
use ltgsr_core::imaging::{
    generate_phantom, make_dataset, overlap_rect, phase_correlate, register_crop, Image, SampleGroup, Shift,
};
use ltgsr_core::losses::{gradient_penalty, rec_loss};
use ltgsr_core::metrics::{psnr, psnr_from_mse, ssim};
use ltgsr_core::model::{infer, ModelConfig};
use ltgsr_core::search::oracle_check;
use ltgsr_core::train::{FitHooks, LossRecord, TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(n: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let pass = o.pass && took <= budget;
    println!(
        "{} [{n}] {name}: {} ({:.1}s, budget {}s)",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn oracle_equivalence() -> Outcome {
    let r = oracle_check(32, 2024).expect("oracle suite runs");
    let pass = r.index_mismatches == 0 && r.max_relevance_dev <= 1e-6 && r.max_texture_dev <= 1e-6;
    outcome(
        pass,
        format!(
            "{} trials, {} index mismatches, max |dR| {:.2e}, max |dT| {:.2e}",
            r.trials, r.index_mismatches, r.max_relevance_dev, r.max_texture_dev
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let probes = probe_total_loss(17, 20, 1e-5, 1e-8).expect("probe harness runs");
    let worst = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    let bad: Vec<_> = probes.iter().filter(|p| p.rel_err >= 1e-3).map(|p| p.name.as_str()).collect();
    outcome(
        probes.len() == 20 && bad.is_empty(),
        format!("{} probes, worst rel err {worst:.2e}, failing {bad:?}", probes.len()),
    )
}

fn analytic_values() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    // Linear critic: the input gradient is w everywhere, so the penalty is λ(‖w‖ − 1)².
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut gp_err: f64 = 0.0;
    for trial in 0..5 {
        let tape = Tape::<f64>::new();
        let w = Tensor::from_fn([1, 1, 6, 6], |_| rng.gen_range(-0.5..0.5));
        let norm = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = Rc::new(w);
        let hr = tape.constant(Tensor::from_fn([3, 1, 6, 6], |_| rng.gen_range(0.0..1.0)));
        let sr = tape.constant(Tensor::from_fn([3, 1, 6, 6], |_| rng.gen_range(0.0..1.0)));
        let got = gradient_penalty(|x| x.mul_const(w.clone()).sum_per_sample(), hr, sr, 10.0, trial)
            .unwrap()
            .item();
        gp_err = gp_err.max((got - 10.0 * (norm - 1.0).powi(2)).abs());
    }
    ok &= gp_err <= 1e-9;
    notes.push(format!("gp err {gp_err:.1e}"));

    // PSNR at MSE 0.01, from the formula and from an f32 pair with exact MSE 0.01.
    let p = psnr_from_mse(0.01);
    let a = Image::from_fn(10, 10, |y, x| if y * 10 + x < 64 { 0.25 } else { 0.5 }).unwrap();
    let b = Image::from_fn(10, 10, |y, x| if y * 10 + x < 64 { 0.375 } else { 0.5 }).unwrap();
    let pi = psnr(&a, &b).unwrap();
    ok &= (p - 20.0).abs() <= 1e-9 && (pi - 20.0).abs() <= 1e-9;
    notes.push(format!("psnr {p} / {pi}"));

    let img = generate_phantom(3, 48, 48).unwrap();
    let s = ssim(&img, &img).unwrap();
    ok &= s == 1.0;
    notes.push(format!("ssim(a,a) {s}"));

    let tape = Tape::<f64>::new();
    let hr = Tensor::from_fn([1, 1, 8, 8], |i| (i % 5) as f64 / 8.0);
    let sr = hr.map(|v| v + 0.25);
    let rec = rec_loss(tape.constant(hr), tape.constant(sr)).unwrap().item();
    ok &= rec == 0.25;
    notes.push(format!("rec offset {rec}"));
    outcome(ok, notes.join(", "))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn overfit_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 300,
        batch: 4,
        crop: 48,
        lr_ltg: 1e-3,
        lr_encoder: 5e-4,
        lr_rest: 1e-3,
        decay_every: 1000,
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig::with_channels([16, 32, 64], cfg.crop);
    cfg
}

/// Trains the 4-pair overfit model; returns the outcome and the final checkpoint.
fn overfit(data: &[SampleGroup]) -> (Outcome, Checkpoint) {
    let cfg = overfit_config();
    let model = cfg.model.clone();
    let mut trainer = Trainer::new(cfg).unwrap();
    let epochs = trainer.fit(data, &mut FitHooks::default()).unwrap();
    let records: Vec<LossRecord> = epochs.iter().flat_map(|e| e.records.clone()).collect();
    let tg: Vec<f64> = records.iter().map(|r| r.tg).collect();
    let (tg_start, tg_end) = (mean(&tg[..10]), mean(&tg[tg.len() - 10..]));
    let base = mean(&data.iter().map(|g| psnr(&g.lr, &g.hr).unwrap()).collect::<Vec<_>>());
    let sr = mean(
        &data
            .iter()
            .map(|g| psnr(&infer(&g.lr, trainer.params(), &model).unwrap(), &g.hr).unwrap())
            .collect::<Vec<_>>(),
    );
    let psnr_ok = sr - base >= 1.5;
    let tg_ok = tg_end <= 0.5 * tg_start;
    let pass = records.len() == 300 && psnr_ok && tg_ok;
    (
        outcome(
            pass,
            format!(
                "{} steps, refless PSNR {sr:.3} vs LR {base:.3} (gain {:.3} dB, need 1.5: {}), L_tg {tg_start:.4} -> {tg_end:.4} (halved: {})",
                records.len(),
                sr - base,
                if psnr_ok { "ok" } else { "short" },
                if tg_ok { "ok" } else { "no" },
            ),
        ),
        trainer.checkpoint(),
    )
}

fn param_count_structure() -> Outcome {
    let counts: Vec<i64> = (1..=5)
        .map(|m| {
            count_params(&LtgConfig {
                m,
                channels: [64, 128, 256],
            }) as i64
        })
        .collect();
    let second: Vec<i64> = counts.windows(3).map(|w| w[2] - 2 * w[1] + w[0]).collect();
    outcome(
        second.iter().all(|&d| d == 0),
        format!("counts {counts:?}, per-block increment {}", counts[1] - counts[0]),
    )
}

fn refless_robustness(ckpt: &Checkpoint, data: &[SampleGroup]) -> Outcome {
    let report = ref_sensitivity(ckpt, data, &[1, 2, 3]).unwrap();
    let ltg: Vec<_> = report.rows.iter().filter(|r| r.mode == ltgsr_core::eval::InferenceMode::Ltg).collect();
    let search: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.mode == ltgsr_core::eval::InferenceMode::Search)
        .collect();
    let ltg_std = [report.ltg.psnr.std, report.ltg.ssim.std, report.ltg.pdist.std];
    let ltg_same = ltg.windows(2).all(|w| w[0].report == w[1].report);
    let search_differs = search.windows(2).any(|w| {
        w[0].report
            .per_image
            .iter()
            .zip(&w[1].report.per_image)
            .any(|(a, b)| a.psnr != b.psnr || a.ssim != b.ssim)
    });
    outcome(
        ltg_std.iter().all(|&s| s == 0.0) && ltg_same && search_differs && ltg.len() == 3,
        format!(
            "LTG std {ltg_std:?}, search PSNR {:.3} ± {:.3}, search rows differ: {search_differs}",
            report.search.psnr.mean, report.search.psnr.std
        ),
    )
}

fn registration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (h, w) = (64usize, 96usize);
    let img = generate_phantom(21, h, w).unwrap();
    let mut misses = 0;
    for _ in 0..100 {
        let dy = rng.gen_range(-(h as isize / 4 - 1)..=(h as isize / 4 - 1));
        let dx = rng.gen_range(-(w as isize / 4 - 1)..=(w as isize / 4 - 1));
        if phase_correlate(&img, &img.circular_shift(dy, dx)).ok() != Some(Shift { dy, dx }) {
            misses += 1;
        }
    }
    // (shift, fixed y0/x0, moving y0/x0, height, width) for 128×128 frames.
    let table: [((isize, isize), [usize; 6]); 10] = [
        ((8, 4), [0, 0, 8, 4, 120, 124]),
        ((-8, -4), [8, 4, 0, 0, 120, 124]),
        ((0, 0), [0, 0, 0, 0, 128, 128]),
        ((3, 0), [0, 0, 3, 0, 124, 128]),
        ((0, -5), [0, 5, 0, 0, 128, 120]),
        ((13, 21), [0, 0, 13, 21, 112, 104]),
        ((-30, 7), [30, 0, 0, 7, 96, 120]),
        ((1, -1), [0, 1, 1, 0, 124, 124]),
        ((-17, -31), [17, 31, 0, 0, 108, 96]),
        ((25, -9), [0, 9, 25, 0, 100, 116]),
    ];
    let frame = generate_phantom(22, 128, 128).unwrap();
    let mut geometry_errors = 0;
    for ((dy, dx), want) in table {
        let shift = Shift { dy, dx };
        let rect = overlap_rect((128, 128), shift).unwrap();
        let moved = frame.circular_shift(dy, dx);
        let ok = match register_crop(&frame, &moved) {
            Ok((a, b)) => rect == want && a.dims() == (want[4], want[5]) && a == b,
            Err(_) => false,
        };
        geometry_errors += usize::from(!ok);
    }
    outcome(
        misses == 0 && geometry_errors == 0,
        format!("{misses}/100 shifts missed, {geometry_errors}/10 crop geometries wrong"),
    )
}

fn determinism_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 25,
        batch: 2,
        crop: 32,
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig::with_channels([8, 16, 32], cfg.crop);
    cfg
}

fn bits(records: &[LossRecord]) -> Vec<[u64; 7]> {
    records
        .iter()
        .map(|r| [r.rec, r.per, r.tg, r.adv, r.total, r.critic, r.gp].map(f64::to_bits))
        .collect()
}

fn determinism_and_resume() -> Outcome {
    let data = make_dataset(4, 31, 48, 48).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");

    // Run A stops at epoch 10 to checkpoint, then carries on in memory.
    let mut a = Trainer::new(TrainConfig {
        epochs: 10,
        ..determinism_config()
    })
    .unwrap();
    let mut log_a: Vec<LossRecord> = Vec::new();
    let mut hooks = FitHooks {
        checkpoint: Some(&path),
        log: None,
    };
    for e in a.fit(&data, &mut hooks).unwrap() {
        log_a.extend(e.records);
    }
    a.set_epochs(25);
    for e in a.fit(&data, &mut FitHooks::default()).unwrap() {
        log_a.extend(e.records);
    }

    let mut b = Trainer::new(determinism_config()).unwrap();
    let log_b: Vec<LossRecord> = b
        .fit(&data, &mut FitHooks::default())
        .unwrap()
        .into_iter()
        .flat_map(|e| e.records)
        .collect();

    let mut c = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    let resume_at = c.step() as usize;
    c.set_epochs(12);
    let log_c: Vec<LossRecord> = c
        .fit(&data, &mut FitHooks::default())
        .unwrap()
        .into_iter()
        .flat_map(|e| e.records)
        .collect();

    let same_runs = log_a.len() == 50 && bits(&log_a) == bits(&log_b) && log_a == log_b;
    let resumed = log_c.len() >= 3 && bits(&log_c[..3]) == bits(&log_a[resume_at..resume_at + 3]);
    outcome(
        same_runs && resumed,
        format!(
            "{} vs {} steps bit-identical: {same_runs}; resume at step {resume_at} matches 3 steps: {resumed}",
            log_a.len(),
            log_b.len()
        ),
    )
}

fn texture_gating() -> Outcome {
    let cfg = ModelConfig::with_channels([16, 32, 64], 64);
    let mut identical = 0;
    for trial in 0..10u64 {
        let params = cfg.init_params::<f32>(100 + trial);
        let lr = generate_phantom(200 + trial, 32, 32).unwrap();
        let f = encode(&lr, &cfg.encoder, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let t = f.map(|x| Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0f32..1.0)));
        let sign = if trial % 2 == 0 { 0.1f32 } else { -0.1 };
        let t2 = t.map(|x| x.map(|v| v + sign));
        let r0: Pyramid<Tensor<f32>> = f.map(|x| {
            let [_, _, h, w] = x.shape();
            Tensor::zeros([1, 1, h, w])
        });
        let a = decode(&f, &t, &r0, &lr, &params, &cfg.decoder).unwrap();
        let b = decode(&f, &t2, &r0, &lr, &params, &cfg.decoder).unwrap();
        let same = a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits());
        identical += usize::from(same);
    }
    outcome(identical == 10, format!("{identical}/10 trials bit-identical under R = 0"))
}

#[test]
fn acceptance() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let mut results = Vec::new();
    results.push(run(1, "search-oracle equivalence", min(1), oracle_equivalence));
    results.push(run(2, "gradient fidelity", min(5), gradient_fidelity));
    results.push(run(3, "analytic loss and metric values", min(1), analytic_values));

    let data = make_dataset(4, 2024, 96, 96).unwrap();
    let mut ckpt = None;
    results.push(run(4, "overfit sanity", min(20), || {
        let (o, c) = overfit(&data);
        ckpt = Some(c);
        o
    }));
    results.push(run(5, "parameter-count structure", Duration::from_secs(10), param_count_structure));
    results.push(run(6, "refless robustness", min(5), || refless_robustness(ckpt.as_ref().unwrap(), &data)));
    results.push(run(7, "registration", Duration::from_secs(30), registration));
    results.push(run(8, "determinism and resume", min(10), determinism_and_resume));
    results.push(run(9, "texture gating", min(1), texture_gating));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len(), "acceptance criteria failed");
}
