//! Reconstruction, perceptual, adversarial (with gradient penalty) and
//! texture-generation objectives, and their weighted sum.

use std::rc::Rc;

use ltgsr_autograd::{Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{deep_from_var, encode_var, EncoderConfig, Pyramid};
use crate::error::{invalid, Result};
use crate::nn::Bound;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_per: f64,
    pub lambda_tg: f64,
    pub lambda_adv: f64,
    pub gp_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_per: 1e-2,
            lambda_tg: 0.3,
            lambda_adv: 1e-3,
            gp_lambda: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_per, self.lambda_tg, self.lambda_adv, self.gp_lambda];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid(format!("loss weights must be finite and >= 0, got {all:?}"));
        }
        Ok(())
    }
}

/// Generator-side loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<T> {
    pub rec: T,
    pub per: T,
    pub tg: T,
    pub adv: T,
}

pub fn total_value(parts: &LossParts<f64>, w: &LossWeights) -> f64 {
    parts.rec + w.lambda_per * parts.per + w.lambda_tg * parts.tg + w.lambda_adv * parts.adv
}

pub fn total_loss<'t, S: Scalar>(parts: &LossParts<Var<'t, S>>, w: &LossWeights) -> Var<'t, S> {
    parts.rec
        + parts.per.scale(S::lit(w.lambda_per))
        + parts.tg.scale(S::lit(w.lambda_tg))
        + parts.adv.scale(S::lit(w.lambda_adv))
}

fn same_shape<S: Scalar>(a: Var<'_, S>, b: Var<'_, S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn rec_loss<'t, S: Scalar>(hr: Var<'t, S>, sr: Var<'t, S>) -> Result<Var<'t, S>> {
    same_shape(hr, sr, "reconstruction loss")?;
    Ok((sr - hr).abs().mean())
}

/// Mean squared difference, i.e. the squared distance over `C·H·W`.
pub fn mse<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
    same_shape(a, b, "feature distance")?;
    Ok((a - b).square().mean())
}

/// Deep-feature distance plus the mean, over the `k` finest scales, of the
/// distance between SR features and the (constant) searched textures.
pub fn perceptual_loss<'t, S: Scalar>(
    cfg: &EncoderConfig,
    p: &Bound<'t, S>,
    hr: Var<'t, S>,
    sr: Var<'t, S>,
    textures: Option<&Pyramid<Var<'t, S>>>,
    k: usize,
) -> Result<Var<'t, S>> {
    if k > 3 {
        return invalid(format!("perceptual loss uses at most 3 scales, got {k}"));
    }
    if k > 0 && textures.is_none() {
        return invalid("perceptual texture term needs searched textures");
    }
    let f_sr = encode_var(cfg, p, sr)?;
    let f_hr = encode_var(cfg, p, hr)?;
    let deep_sr = deep_from_var(cfg, p, f_sr[2]);
    let deep_hr = deep_from_var(cfg, p, f_hr[2]);
    let mut loss = mse(deep_hr, deep_sr)?;
    if let Some(t) = textures {
        if k > 0 {
            let mut acc = mse(f_sr[0], t[0].detach())?;
            for l in 1..k {
                acc = acc + mse(f_sr[l], t[l].detach())?;
            }
            loss = loss + acc.scale(S::one() / S::lit(k as f64));
        }
    }
    Ok(loss)
}

/// `mean(d_fake) - mean(d_real) + gp`.
pub fn critic_loss<'t, S: Scalar>(d_real: Var<'t, S>, d_fake: Var<'t, S>, gp: Var<'t, S>) -> Result<Var<'t, S>> {
    same_shape(d_real, d_fake, "critic loss")?;
    Ok(d_fake.mean() - d_real.mean() + gp)
}

/// `-mean(d_fake)`.
pub fn generator_adv_loss<'t, S: Scalar>(d_fake: Var<'t, S>) -> Result<Var<'t, S>> {
    if d_fake.value().is_empty() {
        return invalid("adversarial loss of an empty batch");
    }
    Ok(d_fake.mean().scale(-S::one()))
}

/// Interpolation weight of sample `i` for a given penalty seed.
pub fn gp_epsilon(seed: u64, i: usize) -> f64 {
    seeds::rng(seed, &[i as u64]).gen_range(0.0..1.0)
}

/// `gp_lambda · mean_n (‖∇D(x̂_n)‖ − 1)²` with `x̂ = ε·hr + (1−ε)·sr`.
///
/// `hr` and `sr` are `[N, 1, H, W]`; the critic is applied per sample and the
/// penalty stays differentiable with respect to the critic parameters. The
/// tape must be recording.
pub fn gradient_penalty<'t, S: Scalar>(
    critic: impl Fn(Var<'t, S>) -> Var<'t, S>,
    hr: Var<'t, S>,
    sr: Var<'t, S>,
    gp_lambda: f64,
    seed: u64,
) -> Result<Var<'t, S>> {
    same_shape(hr, sr, "gradient penalty")?;
    let tape = hr.tape();
    let [n, c, h, w] = hr.shape();
    let eps: Vec<S> = (0..n).map(|i| S::lit(gp_epsilon(seed, i))).collect();
    let e = Rc::new(Tensor::from_fn([n, 1, 1, 1], |i| eps[i]));
    let one_minus = Rc::new(e.map(|v| S::one() - v));
    let mixed = hr.mul_const(e) + sr.mul_const(one_minus);
    // A fresh leaf: the penalty trains the critic only.
    let x_hat = tape.leaf((*mixed.value()).clone());
    debug_assert_eq!(x_hat.shape(), [n, c, h, w]);
    let d = critic(x_hat);
    let g = tape.grad(d.sum(), &[x_hat], true)[0];
    let norms = (g.square().sum_per_sample().add_scalar(S::lit(1e-12))).sqrt();
    let pen = norms.add_scalar(-S::one()).square().mean();
    Ok(pen.scale(S::lit(gp_lambda)))
}

/// `(1/3) Σ_i mean((T_i − T̂_i)² · R_i)` with `R_i` broadcast over channels and
/// the searched textures treated as constants.
pub fn texture_gen_loss<'t, S: Scalar>(
    t: &Pyramid<Var<'t, S>>,
    t_hat: &Pyramid<Var<'t, S>>,
    r: &Pyramid<Rc<Tensor<S>>>,
) -> Result<Var<'t, S>> {
    let mut acc: Option<Var<'t, S>> = None;
    for l in 0..3 {
        same_shape(t[l], t_hat[l], "texture loss")?;
        let [_, _, h, w] = t[l].shape();
        if r[l].shape()[2..] != [h, w] {
            return invalid(format!("relevance {:?} does not match {h}x{w}", r[l].shape()));
        }
        let term = (t[l].detach() - t_hat[l]).square().mul_const(r[l].clone()).mean();
        acc = Some(match acc {
            None => term,
            Some(a) => a + term,
        });
    }
    Ok(acc.expect("three scales").scale(S::one() / S::lit(3.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use ltgsr_autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn rec_loss_cases() {
        let tape = Tape::<f64>::new();
        let hr = tape.constant(rand_tensor(1, [1, 1, 8, 8]));
        assert_eq!(rec_loss(hr, hr).unwrap().item(), 0.0);
        let sr = tape.constant(hr.value().map(|v| v + 0.5));
        assert!((rec_loss(hr, sr).unwrap().item() - 0.5).abs() < 1e-15);

        let b = rand_tensor(2, [1, 1, 8, 8]);
        let mut naive = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                naive += (hr.value().at(0, 0, y, x) - b.at(0, 0, y, x)).abs();
            }
        }
        naive /= 64.0;
        let got = rec_loss(hr, tape.constant(b)).unwrap().item();
        assert!((got - naive).abs() < 1e-12);
        let other = tape.constant(Tensor::zeros([1, 1, 8, 4]));
        assert!(rec_loss(hr, other).is_err());
    }

    #[test]
    fn critic_and_adversarial_values() {
        let tape = Tape::<f64>::new();
        let v = |x: &[f64]| tape.constant(Tensor::from_vec([x.len(), 1, 1, 1], x.to_vec()));
        let zero = tape.constant(Tensor::scalar(0.0));
        assert_eq!(critic_loss(v(&[0.3, 0.1]), v(&[0.3, 0.1]), zero).unwrap().item(), 0.0);
        assert_eq!(critic_loss(v(&[0.0]), v(&[1.0]), zero).unwrap().item(), 1.0);
        assert_eq!(generator_adv_loss(v(&[0.5, -0.5])).unwrap().item(), 0.0);
        assert_eq!(generator_adv_loss(v(&[2.0])).unwrap().item(), -2.0);
        let empty = tape.constant(Tensor::from_vec([0, 1, 1, 1], vec![]));
        assert!(generator_adv_loss(empty).is_err());

        let real = [0.2, -1.3, 0.7];
        let fake = [1.1, 0.4, -0.2];
        let want = fake.iter().sum::<f64>() / 3.0 - real.iter().sum::<f64>() / 3.0 + 0.25;
        let gp = tape.constant(Tensor::scalar(0.25));
        assert!((critic_loss(v(&real), v(&fake), gp).unwrap().item() - want).abs() < 1e-15);
    }

    fn linear_penalty(norm: f64) -> f64 {
        let tape = Tape::<f64>::new();
        let mut w = rand_tensor(3, [1, 1, 4, 4]).map(|v| v - 0.5);
        let s = norm / w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        w = w.map(|v| v * s);
        let w = Rc::new(w);
        let hr = tape.constant(rand_tensor(4, [2, 1, 4, 4]));
        let sr = tape.constant(rand_tensor(5, [2, 1, 4, 4]));
        gradient_penalty(|x| x.mul_const(w.clone()).sum_per_sample(), hr, sr, 10.0, 9)
            .unwrap()
            .item()
    }

    #[test]
    fn linear_critic_penalties() {
        assert!((linear_penalty(3.0) - 40.0).abs() < 1e-9);
        assert!(linear_penalty(1.0).abs() < 1e-9);
    }

    #[test]
    fn texture_loss_cases() {
        let tape = Tape::<f64>::new();
        let shapes = [[1, 2, 8, 8], [1, 3, 4, 4], [1, 4, 2, 2]];
        let t = Pyramid([0, 1, 2].map(|l| tape.constant(rand_tensor(l as u64, shapes[l]))));
        let r = |v: f64| Pyramid([0, 1, 2].map(|l| Rc::new(Tensor::full([1, 1, 8 >> l, 8 >> l], v))));
        assert_eq!(texture_gen_loss(&t, &t, &r(1.0)).unwrap().item(), 0.0);
        let other = Pyramid([0, 1, 2].map(|l| tape.constant(rand_tensor(10 + l as u64, shapes[l]))));
        assert_eq!(texture_gen_loss(&t, &other, &r(0.0)).unwrap().item(), 0.0);
        let shifted = t.map(|v| tape.constant(v.value().map(|x| x - 0.1)));
        let got = texture_gen_loss(&t, &shifted, &r(1.0)).unwrap().item();
        assert!((got - 0.01).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        let ones = LossParts {
            rec: 1.0,
            per: 1.0,
            tg: 1.0,
            adv: 1.0,
        };
        assert!((total_value(&ones, &w) - 1.311).abs() < 1e-12);
        let zeros = LossParts {
            rec: 0.0,
            per: 0.0,
            tg: 0.0,
            adv: 0.0,
        };
        assert_eq!(total_value(&zeros, &w), 0.0);
        let tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::scalar(1.0));
        let parts = LossParts {
            rec: one,
            per: one,
            tg: one,
            adv: one,
        };
        assert!((total_loss(&parts, &w).item() - 1.311).abs() < 1e-12);
        let no_adv = LossWeights {
            lambda_adv: 0.0,
            ..w
        };
        assert!((total_value(&ones, &no_adv) - 1.31).abs() < 1e-12);
    }

    #[test]
    fn perceptual_loss_cases() {
        let cfg = EncoderConfig::with_channels([2, 3, 4]);
        let params = ParamStore::<f64>::init(&cfg.specs(), 1);
        let tape = Tape::<f64>::new();
        let p = params.bind(&tape, |_| false);
        let hr = tape.constant(rand_tensor(6, [1, 1, 32, 32]));
        let f = encode_var(&cfg, &p, hr).unwrap();
        assert_eq!(perceptual_loss(&cfg, &p, hr, hr, Some(&f), 3).unwrap().item(), 0.0);

        let delta = 0.05;
        let t = f.map(|v| tape.constant(v.value().map(|x| x + delta)));
        let got = perceptual_loss(&cfg, &p, hr, hr, Some(&t), 3).unwrap().item();
        assert!((got - delta * delta).abs() < 1e-12, "{got}");
        assert!(perceptual_loss(&cfg, &p, hr, hr, None, 2).is_err());
        assert_eq!(perceptual_loss(&cfg, &p, hr, hr, None, 0).unwrap().item(), 0.0);
    }

    #[test]
    fn normalization_is_size_invariant() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full([1, 2, 4, 4], 0.3));
        let b = tape.constant(Tensor::full([1, 2, 4, 4], 0.5));
        let a2 = tape.constant(Tensor::full([1, 4, 8, 4], 0.3));
        let b2 = tape.constant(Tensor::full([1, 4, 8, 4], 0.5));
        let x = mse(a, b).unwrap().item();
        let y = mse(a2, b2).unwrap().item();
        assert!((x - y).abs() < 1e-15);
    }
}
