//! Named parameters, initialization, and the small set of layers the model uses.

use std::collections::{BTreeMap, HashMap};

use ltgsr_autograd::{Scalar, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with std `gain * sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable tensors, addressed by hierarchical dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    /// Seeded initialization; each tensor draws from its own name-derived stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Kaiming { fan_in, gain } => {
                    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    let mut rng = seeds::rng(seed, &[name_hash(&spec.name)]);
                    Tensor::from_fn(spec.shape, |_| S::lit(normal.sample(&mut rng)))
                }
            };
            tensors.insert(spec.name.clone(), t);
        }
        Self { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of tensors whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Puts every tensor on `tape`: as a leaf when `trainable(name)`, else a constant.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: impl Fn(&str) -> bool) -> Bound<'t, S> {
        self.bind_only(tape, |_| true, trainable)
    }

    /// Like [`ParamStore::bind`], restricted to names passing `include`.
    pub fn bind_only<'t>(
        &self,
        tape: &'t Tape<S>,
        include: impl Fn(&str) -> bool,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound<'t, S> {
        let vars = self
            .tensors
            .iter()
            .filter(|(k, _)| include(k))
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { tape, vars }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and runs.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Parameters placed on a tape.
#[derive(Clone)]
pub struct Bound<'t, S> {
    tape: &'t Tape<S>,
    vars: HashMap<String, Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Var<'t, S> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'t, S>> {
        self.vars.get(name).copied()
    }

    /// Adds or replaces entries.
    pub fn extend(&mut self, other: Bound<'t, S>) {
        self.vars.extend(other.vars);
    }

    /// Bound vars in name order.
    pub fn sorted(&self) -> Vec<(String, Var<'t, S>)> {
        let mut v: Vec<_> = self.vars.iter().map(|(k, v)| (k.clone(), *v)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

/// 3×3 / 1×1 convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    /// Multiplier on the Kaiming std (small values for residual branches and heads).
    pub gain: f64,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride: 1,
            gain: 1.0,
        }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: format!("{}.weight", self.name),
                shape: [self.cout, self.cin, self.k, self.k],
                init: Init::Kaiming {
                    fan_in: self.cin * self.k * self.k,
                    gain: self.gain,
                },
            },
            ParamSpec {
                name: format!("{}.bias", self.name),
                shape: [1, self.cout, 1, 1],
                init: Init::Zeros,
            },
        ]
    }

    pub fn numel(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let w = p.var(&format!("{}.weight", self.name));
        let b = p.var(&format!("{}.bias", self.name));
        x.conv2d(w, self.stride, self.k / 2).add_bias(b)
    }
}

/// Fully connected layer on `[N, F, 1, 1]` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
}

impl Dense {
    pub fn specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: format!("{}.weight", self.name),
                shape: [self.fout, self.fin, 1, 1],
                init: Init::Kaiming {
                    fan_in: self.fin,
                    gain: 0.5,
                },
            },
            ParamSpec {
                name: format!("{}.bias", self.name),
                shape: [1, self.fout, 1, 1],
                init: Init::Zeros,
            },
        ]
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let [n, c, h, w] = x.shape();
        let flat = x.reshape([n, c * h * w, 1, 1]);
        let wt = p.var(&format!("{}.weight", self.name));
        let b = p.var(&format!("{}.bias", self.name));
        flat.matmul(wt, false, true).add_bias(b)
    }
}

/// `x + conv(relu(conv(x)))`, no normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            first: Conv::new(format!("{name}.conv1"), channels, channels, 3),
            second: Conv::new(format!("{name}.conv2"), channels, channels, 3).with_gain(0.1),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = self.first.specs();
        v.extend(self.second.specs());
        v
    }

    pub fn numel(&self) -> usize {
        self.first.numel() + self.second.numel()
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let h = self.first.forward(p, x).relu();
        x + self.second.forward(p, h)
    }
}
