//! Wasserstein critic: strided convolutions with leaky rectifiers and a dense scalar head.

use ltgsr_autograd::{Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv, Dense, ParamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub channels: Vec<usize>,
    pub slope: f64,
    /// Side of the square inputs; fixes the dense head size.
    pub input_size: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 512],
            slope: 0.2,
            input_size: 64,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return invalid("critic needs at least one conv layer with >= 1 channel");
        }
        if self.input_size == 0 {
            return invalid("critic input size must be >= 1");
        }
        Ok(())
    }

    fn convs(&self) -> Vec<Conv> {
        let mut cin = 1;
        self.channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(format!("critic.conv{}", i + 1), cin, c, 3).strided(2);
                cin = c;
                conv
            })
            .collect()
    }

    fn head(&self) -> Dense {
        let side = (0..self.channels.len()).fold(self.input_size, |s, _| s.div_ceil(2));
        Dense {
            name: "critic.dense".into(),
            fin: self.channels.last().copied().unwrap_or(1) * side * side,
            fout: 1,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v: Vec<ParamSpec> = self.convs().iter().flat_map(|c| c.specs()).collect();
        v.extend(self.head().specs());
        v
    }
}

/// Critic scores, `[N, 1, 1, 1]`, for `[N, 1, S, S]` inputs.
pub fn critic_forward<'t, S: Scalar>(cfg: &CriticConfig, p: &Bound<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
    let [_, _, h, w] = x.shape();
    assert_eq!((h, w), (cfg.input_size, cfg.input_size), "critic input size");
    let mut y = x;
    for c in cfg.convs() {
        y = c.forward(p, y).leaky_relu(S::lit(cfg.slope));
    }
    let out = cfg.head().forward(p, y);
    let n = out.shape()[0];
    out.reshape([n, 1, 1, 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use ltgsr_autograd::{Tape, Tensor};

    #[test]
    fn scores_one_value_per_sample() {
        let cfg = CriticConfig {
            channels: vec![4, 8],
            slope: 0.2,
            input_size: 16,
        };
        let params = ParamStore::<f64>::init(&cfg.specs(), 0);
        let tape = Tape::inference();
        let p = params.bind(&tape, |_| false);
        let x = tape.constant(Tensor::from_fn([3, 1, 16, 16], |i| (i % 7) as f64 / 7.0));
        let y = critic_forward(&cfg, &p, x);
        assert_eq!(y.shape(), [3, 1, 1, 1]);
        assert!(y.value().all_finite());
    }

    #[test]
    fn odd_sizes_round_up() {
        let cfg = CriticConfig {
            channels: vec![2, 2, 2],
            slope: 0.2,
            input_size: 20,
        };
        // 20 -> 10 -> 5 -> 3
        let dense = cfg.specs().into_iter().find(|s| s.name == "critic.dense.weight").unwrap();
        assert_eq!(dense.shape, [1, 18, 1, 1]);
    }
}
