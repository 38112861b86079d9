//! Named, grouped parameter storage shared by every trainable module.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::init;
use crate::numerics::tensor::Tensor;

/// Freezing unit. Every parameter belongs to exactly one group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Llm,
    Xattn,
    VitFront,
    VitBackHalf,
    VitLastQuarter,
    MediaTokens,
    Moe,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Llm,
        ParamGroup::Xattn,
        ParamGroup::VitFront,
        ParamGroup::VitBackHalf,
        ParamGroup::VitLastQuarter,
        ParamGroup::MediaTokens,
        ParamGroup::Moe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Llm => "llm",
            ParamGroup::Xattn => "xattn",
            ParamGroup::VitFront => "vit_front",
            ParamGroup::VitBackHalf => "vit_back_half",
            ParamGroup::VitLastQuarter => "vit_last_quarter",
            ParamGroup::MediaTokens => "media_tokens",
            ParamGroup::Moe => "moe",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::config(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    root_seed: u64,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            params: Vec::new(),
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init with a stream derived from the root seed and `name`.
    pub fn normal(&mut self, name: &str, group: ParamGroup, shape: &[usize], std: f64) -> ParamId {
        let t = init::normal(shape, std, init::derive_seed(self.root_seed, name));
        self.insert(name, group, t)
    }

    pub fn zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.insert(name, group, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.insert(name, group, Tensor::full(shape, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    /// Places every parameter on `g` as a trainable leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Rebuilds a store with the same names and groups but new values.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.params.len() {
            return Err(Error::dim("value count does not match parameter count"));
        }
        let params = self
            .params
            .iter()
            .zip(values)
            .map(|(p, v)| {
                if v.shape() != p.value.shape() {
                    return Err(Error::dim(format!("shape change for {}", p.name)));
                }
                Ok(Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: v,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            root_seed: self.root_seed,
            params,
        })
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Bias-free linear map `x @ w`, `w: [in x out]`.
pub(crate) fn linear(g: &mut Graph, p: &Bound, x: Var, w: ParamId) -> Result<Var> {
    g.matmul(x, p.var(w))
}

/// Layer norm with learned gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gain: store.ones(&format!("{prefix}.gain"), group, &[width]),
            shift: store.zeros(&format!("{prefix}.shift"), group, &[width]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let n = g.mul_row(n, p.var(self.gain))?;
        g.add_row(n, p.var(self.shift))
    }
}
