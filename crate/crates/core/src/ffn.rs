use crate::error::{Error, Result};
use crate::numerics::{tensor, Graph, Tensor, Var};
use crate::params::{linear, Bound, ParamGroup, ParamId, ParamStore};

/// Raw weights of a two-matrix feed-forward block `gelu(x @ w_in) @ w_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    /// `[h x H]`
    pub w_in: Tensor,
    /// `[H x h]`
    pub w_out: Tensor,
}

impl FfnWeights {
    pub fn new(w_in: Tensor, w_out: Tensor) -> Result<Self> {
        let ok = w_in.shape().len() == 2
            && w_out.shape().len() == 2
            && w_in.cols() == w_out.rows()
            && w_in.rows() == w_out.cols();
        if !ok {
            return Err(Error::dim(format!(
                "ffn weights {:?} / {:?} do not form h->H->h",
                w_in.shape(),
                w_out.shape()
            )));
        }
        Ok(Self { w_in, w_out })
    }

    pub fn width(&self) -> usize {
        self.w_in.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_in.cols()
    }

    /// Graph-free evaluation on `[len x h]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        tensor::gelu(&x.matmul(&self.w_in)?).matmul(&self.w_out)
    }

    /// Hidden units `[start, end)` as their own block.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let w_in = self.w_in.slice_cols(start, end)?;
        let w_out = self.w_out.slice_rows(start, end)?;
        Self::new(w_in, w_out)
    }
}

/// A registered feed-forward block.
#[derive(Clone, Debug)]
pub struct DenseFfn {
    pub w_in: ParamId,
    pub w_out: ParamId,
}

impl DenseFfn {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        h: usize,
        hidden: usize,
    ) -> Self {
        Self {
            w_in: store.normal(
                &format!("{prefix}.w_in"),
                group,
                &[h, hidden],
                1.0 / (h as f64).sqrt(),
            ),
            w_out: store.normal(
                &format!("{prefix}.w_out"),
                group,
                &[hidden, h],
                1.0 / (hidden as f64).sqrt(),
            ),
        }
    }

    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        w: FfnWeights,
    ) -> Self {
        Self {
            w_in: store.insert(format!("{prefix}.w_in"), group, w.w_in),
            w_out: store.insert(format!("{prefix}.w_out"), group, w.w_out),
        }
    }

    pub fn weights(&self, store: &ParamStore) -> FfnWeights {
        FfnWeights {
            w_in: store.get(self.w_in).clone(),
            w_out: store.get(self.w_out).clone(),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let u = linear(g, p, x, self.w_in)?;
        let u = g.gelu(u)?;
        linear(g, p, u, self.w_out)
    }
}
