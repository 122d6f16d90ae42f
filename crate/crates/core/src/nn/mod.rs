//! Parameters, forward sessions and network building blocks.
//!
//! Parameters live in a [`ParamStore`] outside any graph. A forward pass
//! opens a [`Session`] over a [`Graph`]; the first use of each parameter
//! records it as a leaf, so after `backward` the gradient of every parameter
//! that took part is available by [`ParamId`].

pub mod blocks;
pub mod layers;
pub mod stage;

use crate::error::{Error, Result};
use crate::tensor::rng::DetRng;
use crate::tensor::gradcheck::GradCheck;
use crate::tensor::{BatchStats, CheckReport, Graph, Tensor, Var};

pub use blocks::{
    AttentionTrace, BlockConfig, ConvMlp, GlobalSparseAttention, LgBlock, LocalAggregation, Mlp, NormKind,
    TransConvSpread,
};
pub use layers::{Activation, BatchNorm2d, Conv2d, ConvNormAct, LayerNorm, Linear, Norm2d};
pub use stage::{DecoderStage, EncoderOutput, EncoderStage, StageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (conv/linear weights only).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Ordered registry of trainable parameters and non-trainable buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Sets every trainable scalar to `value`.
    pub fn fill(&mut self, value: f64) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    /// Adds `N(0, std^2)` noise to every trainable scalar, so that
    /// zero-initialized projections take part in gradient checks.
    pub fn perturb(&mut self, rng: &mut DetRng, std: f64) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v += rng.normal() * std;
            }
            crate::tensor::round_to_precision(p.value.data_mut());
        }
    }

    /// Folds batch statistics into running buffers: `r <- (1 - m) r + m s`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (buf, stat) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let data = self.buffers[buf.0].value.data_mut();
                for (r, s) in data.iter_mut().zip(stat) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * s;
                }
                crate::tensor::round_to_precision(data);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

/// Creates parameters with hierarchical names and deterministic initial values.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut DetRng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut DetRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, name: &str) -> Builder<'_> {
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

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let rng = &mut *self.rng;
                Tensor::from_fn(shape, |_| rng.normal() * std)
            }
        };
        let mut value = value;
        crate::tensor::round_to_precision(value.data_mut());
        self.store.params.push(Param {
            name: self.full_name(name),
            value,
            decay,
        });
        ParamId(self.store.params.len() - 1)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        self.store.buffers.push(Buffer {
            name: self.full_name(name),
            value,
        });
        BufferId(self.store.buffers.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and reports them for running-average updates.
    Train,
    /// Batch-norm uses running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass over a graph with parameters drawn from a store.
pub struct Session<'g, 's> {
    pub graph: &'g mut Graph,
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'g, 's> Session<'g, 's> {
    pub fn new(graph: &'g mut Graph, store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            vars: vec![None; store.params.len()],
            mode,
            track_grads: true,
            bn_updates: Vec::new(),
        }
    }

    /// Parameters are recorded as constants; nothing is differentiated.
    pub fn inference(mut self) -> Self {
        self.track_grads = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Uses an existing graph node in place of a stored parameter.
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        let expected = self.store.params[id.0].value.shape();
        if self.graph.shape(var) != expected {
            return Err(Error::shape(
                "bind",
                format!("{:?} for parameter of shape {expected:?}", self.graph.shape(var)),
            ));
        }
        self.vars[id.0] = Some(var);
        Ok(())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.params[id.0]
            .value
            .clone()
            .with_requires_grad(self.track_grads);
        let v = self.graph.leaf(t);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.store.buffers[id.0].value
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients per parameter after `graph.backward`, indexed like the store.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| self.graph.grad(v).map(<[f64]>::to_vec)))
            .collect()
    }
}

/// Gradient-checks `f` with respect to `inputs` followed by every parameter
/// in `store` (in store order).
pub fn check_with_params<F>(
    store: &ParamStore,
    mode: Mode,
    inputs: &[Tensor],
    check: &GradCheck,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(store.params.iter().map(|p| p.value.clone()));
    let n = inputs.len();
    check.run(
        |g, vars| {
            let mut s = Session::new(g, store, mode);
            for (i, v) in vars[n..].iter().enumerate() {
                s.bind(ParamId(i), *v)?;
            }
            f(&mut s, &vars[..n])
        },
        &all,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Domain;

    #[test]
    fn builder_names_are_hierarchical() {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(0, Domain::Test, &[]);
        let mut b = Builder::new(&mut store, &mut rng);
        {
            let mut enc = b.child("enc1");
            let mut conv = enc.child("conv");
            conv.param("weight", &[2, 2], Init::Kaiming { fan_in: 2 }, true);
        }
        b.param("bias", &[2], Init::Zeros, false);
        assert_eq!(store.params()[0].name, "enc1.conv.weight");
        assert_eq!(store.params()[1].name, "bias");
        assert_eq!(store.numel(), 6);
    }

    #[test]
    fn init_is_deterministic() {
        let make = || {
            let mut store = ParamStore::new();
            let mut rng = DetRng::new(5, Domain::Init, &[]);
            Builder::new(&mut store, &mut rng).param("w", &[16], Init::Kaiming { fan_in: 8 }, true);
            store
        };
        assert_eq!(make(), make());
    }
}
