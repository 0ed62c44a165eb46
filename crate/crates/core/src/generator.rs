//! Multi-scale feature processing blocks and the learnable texture generator.

use ltgsr_autograd::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, Pyramid};
use crate::error::{invalid, Result};
use crate::imaging::bicubic_plan;
use crate::nn::{Bound, Conv, ParamSpec, ParamStore, ResBlock};

/// Bicubic resize of a var to `hw`.
pub fn resize_var<'t, S: Scalar>(x: Var<'t, S>, hw: (usize, usize)) -> Var<'t, S> {
    let [_, _, h, w] = x.shape();
    if (h, w) == hw {
        return x;
    }
    x.resample(bicubic_plan((h, w), hw))
}

/// Residual processing on every input scale, then cross-scale fusion into the
/// requested target scales. Scales are pyramid levels (0 = finest).
#[derive(Clone, Debug, PartialEq)]
pub struct Msfp {
    pub levels: Vec<usize>,
    pub channels: [usize; 3],
    pub targets: Vec<usize>,
    res: Vec<ResBlock>,
    /// `(source, target, convs)` stride-2 chains for finer sources.
    down: Vec<(usize, usize, Vec<Conv>)>,
    merge: Vec<Conv>,
}

impl Msfp {
    pub fn new(name: &str, levels: Vec<usize>, channels: [usize; 3], targets: Vec<usize>) -> Self {
        let res = levels
            .iter()
            .map(|&l| ResBlock::new(&format!("{name}.res{}", l + 1), channels[l]))
            .collect();
        let mut down = Vec::new();
        for &t in &targets {
            for &s in levels.iter().filter(|&&s| s < t) {
                let convs = (0..t - s)
                    .map(|k| {
                        Conv::new(
                            format!("{name}.down{}{}.{k}", s + 1, t + 1),
                            channels[s],
                            channels[s],
                            3,
                        )
                        .strided(2)
                    })
                    .collect();
                down.push((s, t, convs));
            }
        }
        let total: usize = levels.iter().map(|&l| channels[l]).sum();
        let merge = targets
            .iter()
            .map(|&t| Conv::new(format!("{name}.merge{}", t + 1), total, channels[t], 3))
            .collect();
        Self {
            levels,
            channels,
            targets,
            res,
            down,
            merge,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v: Vec<ParamSpec> = self.res.iter().flat_map(|r| r.specs()).collect();
        for (_, _, convs) in &self.down {
            v.extend(convs.iter().flat_map(|c| c.specs()));
        }
        v.extend(self.merge.iter().flat_map(|c| c.specs()));
        v
    }

    /// `inputs[i]` is the map at `levels[i]`; returns one map per target.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, inputs: &[Var<'t, S>]) -> Vec<Var<'t, S>> {
        assert_eq!(inputs.len(), self.levels.len(), "one input per level");
        let processed: Vec<Var<'t, S>> = self
            .res
            .iter()
            .zip(inputs)
            .map(|(r, &x)| r.forward(p, x))
            .collect();
        self.targets
            .iter()
            .zip(&self.merge)
            .map(|(&t, merge)| {
                let ti = self.levels.iter().position(|&l| l == t).expect("target among levels");
                let [_, _, th, tw] = processed[ti].shape();
                let parts: Vec<Var<'t, S>> = self
                    .levels
                    .iter()
                    .zip(&processed)
                    .map(|(&s, &x)| {
                        if s == t {
                            x
                        } else if s > t {
                            resize_var(x, (th, tw))
                        } else {
                            let (_, _, convs) = self
                                .down
                                .iter()
                                .find(|(a, b, _)| *a == s && *b == t)
                                .expect("down chain exists");
                            let mut y = x;
                            for (k, c) in convs.iter().enumerate() {
                                if k > 0 {
                                    y = y.relu();
                                }
                                y = c.forward(p, y);
                            }
                            y
                        }
                    })
                    .collect();
                merge.forward(p, Var::concat(&parts))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtgConfig {
    /// Number of stacked MSFP blocks.
    pub m: usize,
    pub channels: [usize; 3],
}

impl Default for LtgConfig {
    fn default() -> Self {
        Self {
            m: 3,
            channels: [64, 128, 256],
        }
    }
}

impl LtgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return invalid("the generator needs at least one MSFP block");
        }
        if self.channels.contains(&0) {
            return invalid("generator channel counts must be >= 1");
        }
        Ok(())
    }

    fn entry(&self) -> Vec<Conv> {
        (0..3)
            .map(|l| Conv::new(format!("ltg.entry{}", l + 1), self.channels[l], self.channels[l], 1))
            .collect()
    }

    fn exit(&self) -> Vec<Conv> {
        (0..3)
            .map(|l| Conv::new(format!("ltg.exit{}", l + 1), self.channels[l], self.channels[l], 1).with_gain(0.1))
            .collect()
    }

    pub fn block(&self, b: usize) -> Msfp {
        Msfp::new(&format!("ltg.msfp{b}"), vec![0, 1, 2], self.channels, vec![0, 1, 2])
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v: Vec<ParamSpec> = self.entry().iter().flat_map(|c| c.specs()).collect();
        for b in 0..self.m {
            v.extend(self.block(b).specs());
        }
        v.extend(self.exit().iter().flat_map(|c| c.specs()));
        v
    }
}

/// Trainable scalar count of the generator, from the layer arithmetic alone.
pub fn count_params(cfg: &LtgConfig) -> usize {
    let c = cfg.channels;
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let ends: usize = c.iter().map(|&ci| 2 * conv(ci, ci, 1)).sum();
    let res: usize = c.iter().map(|&ci| 2 * conv(ci, ci, 3)).sum();
    let mut down = 0;
    for t in 0..3 {
        for s in 0..t {
            down += (t - s) * conv(c[s], c[s], 3);
        }
    }
    let total: usize = c.iter().sum();
    let merge: usize = c.iter().map(|&ct| conv(total, ct, 3)).sum();
    ends + cfg.m * (res + down + merge)
}

pub fn msfp_forward<'t, S: Scalar>(
    cfg: &LtgConfig,
    p: &Bound<'t, S>,
    feats: &Pyramid<Var<'t, S>>,
    block_index: usize,
) -> Pyramid<Var<'t, S>> {
    let out = cfg.block(block_index).forward(p, &feats.0);
    Pyramid(out.try_into().expect("three targets"))
}

/// Generated textures, shaped like the LR feature pyramid.
pub fn ltg_forward_var<'t, S: Scalar>(
    cfg: &LtgConfig,
    p: &Bound<'t, S>,
    f_lr: &Pyramid<Var<'t, S>>,
) -> Pyramid<Var<'t, S>> {
    let entry = cfg.entry();
    let mut x = Pyramid([0, 1, 2].map(|l| entry[l].forward(p, f_lr[l])));
    for b in 0..cfg.m {
        x = msfp_forward(cfg, p, &x, b);
    }
    let exit = cfg.exit();
    Pyramid([0, 1, 2].map(|l| exit[l].forward(p, x[l])))
}

pub fn ltg_forward<S: Scalar>(
    f_lr: &FeaturePyramid<S>,
    cfg: &LtgConfig,
    params: &ParamStore<S>,
) -> Result<FeaturePyramid<S>> {
    for l in 0..3 {
        if f_lr[l].shape()[1] != cfg.channels[l] {
            return invalid(format!(
                "scale {} has {} channels, generator expects {}",
                l + 1,
                f_lr[l].shape()[1],
                cfg.channels[l]
            ));
        }
    }
    let tape = Tape::inference();
    let p = params.bind(&tape, |_| false);
    let x = f_lr.map(|t| tape.constant(t.clone()));
    Ok(ltg_forward_var(cfg, &p, &x).map(|v| (*v.value()).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ltgsr_autograd::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(m: usize) -> LtgConfig {
        LtgConfig {
            m,
            channels: [3, 4, 5],
        }
    }

    fn pyramid(seed: u64, c: [usize; 3], h: usize) -> FeaturePyramid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Pyramid([0, 1, 2].map(|l| {
            Tensor::from_fn([1, c[l], h >> l, h >> l], |_| rng.gen_range(-1.0..1.0))
        }))
    }

    fn zero_bias(store: &mut ParamStore<f64>) {
        let names: Vec<String> = store.names().filter(|n| n.ends_with(".bias")).cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn msfp_preserves_shapes_and_zero() {
        let c = cfg(1);
        let params = ParamStore::<f64>::init(&c.specs(), 1);
        let tape = Tape::inference();
        let p = params.bind(&tape, |_| false);
        let x = pyramid(2, c.channels, 16).map(|t| tape.constant(t.clone()));
        let y = msfp_forward(&c, &p, &x, 0);
        for l in 0..3 {
            assert_eq!(y[l].shape(), x[l].shape());
        }
        let z = pyramid(2, c.channels, 16).map(|t| tape.constant(t.map(|_| 0.0)));
        let mut zb = params.clone();
        zero_bias(&mut zb);
        let p = zb.bind(&tape, |_| false);
        let y = msfp_forward(&c, &p, &z, 0);
        assert!(y.iter().all(|v| v.value().max_abs() == 0.0));
    }

    #[test]
    fn msfp_is_finite_over_seeds() {
        let c = cfg(1);
        for seed in 0..50 {
            let params = ParamStore::<f64>::init(&c.specs(), seed);
            let tape = Tape::inference();
            let p = params.bind(&tape, |_| false);
            let x = pyramid(seed + 100, c.channels, 8).map(|t| tape.constant(t.clone()));
            assert!(msfp_forward(&c, &p, &x, 0).iter().all(|v| v.value().all_finite()));
        }
    }

    #[test]
    fn ltg_shapes_match_input() {
        let c = cfg(2);
        let params = ParamStore::<f64>::init(&c.specs(), 1);
        let x = pyramid(3, c.channels, 24);
        let y = ltg_forward(&x, &c, &params).unwrap();
        for l in 0..3 {
            assert_eq!(y[l].shape(), x[l].shape());
        }
    }

    #[test]
    fn block_count_changes_output() {
        let x = pyramid(4, [3, 4, 5], 16);
        let mut specs = cfg(3).specs();
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        let params = ParamStore::<f64>::init(&specs, 7);
        let a = ltg_forward(&x, &cfg(1), &params).unwrap();
        let b = ltg_forward(&x, &cfg(3), &params).unwrap();
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn zero_pyramid_gives_zero_textures() {
        let c = cfg(2);
        let mut params = ParamStore::<f64>::init(&c.specs(), 1);
        zero_bias(&mut params);
        let x = pyramid(3, c.channels, 8).map(|t| t.map(|_| 0.0));
        let y = ltg_forward(&x, &c, &params).unwrap();
        assert!(y.iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn count_matches_registry_and_is_affine() {
        let counts: Vec<usize> = (1..=5).map(|m| count_params(&cfg(m))).collect();
        for (m, &n) in (1..=5).zip(&counts) {
            let registry: usize = cfg(m).specs().iter().map(|s| s.numel()).sum();
            assert_eq!(n, registry);
        }
        for w in counts.windows(3) {
            assert_eq!(w[2] + w[0], 2 * w[1]);
        }
        assert!(counts[1] > counts[0]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let c = cfg(1);
        let params = ParamStore::<f64>::init(&c.specs(), 1);
        let x = pyramid(3, [3, 4, 6], 8);
        assert!(ltg_forward(&x, &c, &params).is_err());
    }
}
