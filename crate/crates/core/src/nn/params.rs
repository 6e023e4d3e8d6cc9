use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight given to the newest batch when updating running statistics.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Named tensors in creation order. Learnable parameters and non-learnable
/// buffers (batch-norm running statistics) are kept apart.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    param_names: Vec<String>,
    params: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        self.check_name(&name)?;
        self.index.insert(name.clone(), self.params.len());
        self.param_names.push(name);
        self.params.push(t);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor) -> Result<BufferId> {
        let name = name.into();
        self.check_name(&name)?;
        self.index.insert(name.clone(), self.buffers.len());
        self.buffer_names.push(name);
        self.buffers.push(t);
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0]
    }

    /// Every named tensor, parameters first, in creation order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.param_names
            .iter()
            .zip(&self.params)
            .chain(self.buffer_names.iter().zip(&self.buffers))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let &i = self.index.get(name)?;
        if self.param_names.get(i).is_some_and(|n| n == name) {
            Some(&self.params[i])
        } else {
            Some(&self.buffers[i])
        }
    }

    /// Replaces the tensor stored under `name`; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let slot = if self.param_names.get(i).is_some_and(|n| n == name) {
            &mut self.params[i]
        } else {
            &mut self.buffers[i]
        };
        if slot.shape() != t.shape() {
            return Err(Error::shape(
                "load",
                format!("{name}: stored {:?}, got {:?}", slot.shape(), t.shape()),
            ));
        }
        *slot = t;
        Ok(())
    }

    /// Total learnable scalars; running statistics are not counted.
    pub fn count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, tracked: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.cast(), tracked))
            .collect()
    }

    pub fn buffers_as<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.buffers.iter().map(|b| b.cast()).collect()
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_stats(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            for (buf, new) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, &b) in self.buffers[buf.0].data_mut().iter_mut().zip(new) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

/// Batch statistics waiting to be folded into one batch norm's buffers.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<f32>,
}

/// Creates named parameters under a dotted prefix with seeded initialization.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Zero-mean normal with standard deviation `sqrt(gain / fan_in)`.
    pub fn normal(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f32) -> Result<ParamId> {
        let std = (gain / fan_in as f32).sqrt();
        let t = Tensor::randn(shape.to_vec(), std, self.rng);
        self.store.add_param(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        self.store
            .add_param(self.full_name(name), Tensor::full(shape.to_vec(), value))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Result<BufferId> {
        self.store
            .add_buffer(self.full_name(name), Tensor::full(shape.to_vec(), value))
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        self.rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T: Scalar = f32> {
    pub g: &'a mut Graph<T>,
    params: &'a [Var],
    buffers: &'a [Tensor<T>],
    pub mode: Mode,
    /// Train-mode batch statistics, to be applied by the owner once the pass
    /// is accepted. Only collected when `record_stats` is set.
    pub stats: Vec<StatUpdate>,
    pub record_stats: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a [Var], buffers: &'a [Tensor<T>], mode: Mode) -> Self {
        Ctx {
            g,
            params,
            buffers,
            mode,
            stats: Vec::new(),
            record_stats: mode == Mode::Train,
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &'a [T] {
        self.buffers[id.0].data()
    }
}
