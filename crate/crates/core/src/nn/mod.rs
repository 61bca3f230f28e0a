//! Network building blocks: convolution, batch normalization, resampling and
//! the composite bottleneck / residual / dense blocks.

mod batchnorm;
mod blocks;
mod conv;
mod sampling;

pub use batchnorm::{batchnorm, BatchNormSettings, Mode, RunningStats};
pub use blocks::{
    densenet_block_params, dense_growth_for, resnet_block_params, BatchNorm3d, Bottleneck, Conv3d,
    DenseNetBlock, ResNetBlock,
};
pub use conv::conv3d;
pub use sampling::{maxpool2, upsample_trilinear2};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Index of a trainable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Index of a batch-norm running-statistics slot inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatsId(pub(crate) usize);

/// A named trainable array and, after a backward pass, its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Owns every trainable array and running statistic of a network, in
/// creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Parameter>,
    pub stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// He-normal initializer: zero mean, standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("init shape")
}

/// State threaded through one forward pass: the tape, the tape handles of
/// every parameter, and mutable access to running statistics.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    vars: Vec<Var>,
    stats: &'a mut [(String, RunningStats)],
    pub mode: Mode,
    pub bn: BatchNormSettings,
}

impl<'a> Ctx<'a> {
    /// Registers every parameter of `store` on the tape as a gradient leaf.
    pub fn new(tape: &'a Tape, store: &'a mut ParamStore, mode: Mode, bn: BatchNormSettings) -> Self {
        let vars = store.params.iter().map(|p| tape.param(p.value.clone())).collect();
        Ctx {
            tape,
            vars,
            stats: &mut store.stats,
            mode,
            bn,
        }
    }

    /// Uses caller-supplied handles, one per parameter of `store` in order,
    /// instead of registering the stored values.
    pub fn with_vars(
        tape: &'a Tape,
        store: &'a mut ParamStore,
        vars: Vec<Var>,
        mode: Mode,
        bn: BatchNormSettings,
    ) -> Result<Self> {
        if vars.len() != store.params.len() {
            return Err(crate::error::Error::contract(format!(
                "{} handles for {} parameters",
                vars.len(),
                store.params.len()
            )));
        }
        Ok(Ctx {
            tape,
            vars,
            stats: &mut store.stats,
            mode,
            bn,
        })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0].1
    }

    /// Tape handles in parameter order; pair with [`ParamStore::set_grads`].
    pub fn into_vars(self) -> Vec<Var> {
        self.vars
    }
}

impl ParamStore {
    /// Moves gradients out of a backward result into the parameters.
    pub fn set_grads(&mut self, vars: &[Var], grads: &mut Gradients) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(vars) {
            p.grad = Some(
                grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape())),
            );
        }
        Ok(())
    }
}
