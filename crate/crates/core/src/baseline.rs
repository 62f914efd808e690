//! Multi-head baseline: the final encoder map is mean-pooled over patch tokens
//! and every task reads the same pooled vector through its own linear head.

use qface_numerics::{ParamStore, Real, RngStream, Session, Var};

use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::tasks::TaskSpec;

#[derive(Clone, Debug)]
pub struct MultiHead {
    pub norm: LayerNorm,
    pub heads: Vec<Linear>,
}

impl MultiHead {
    pub fn new<T: Real>(d: usize, tasks: &[TaskSpec], store: &mut ParamStore<T>, rng: &mut RngStream, group: usize) -> Self {
        MultiHead {
            norm: LayerNorm::new(store, "baseline.norm", d, group),
            heads: tasks
                .iter()
                .map(|t| Linear::new(store, rng, &format!("baseline.heads.{}", t.name), d, t.label_count, group))
                .collect(),
        }
    }

    /// Mean over patch tokens (class token excluded) of `[B, T, d]`, normalised.
    pub fn pool<T: Real>(&self, s: &mut Session<T>, tokens: Var) -> Result<Var> {
        let t = s.g.shape(tokens)[1];
        let patches = s.g.slice(tokens, 1, 1..t)?;
        let pooled = s.g.mean(patches, 1)?;
        self.norm.forward(s, pooled)
    }

    /// Task logits concatenated in registry order: `[B, Σ label_count]`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, tokens: Var) -> Result<Var> {
        let pooled = self.pool(s, tokens)?;
        let outs = self.heads.iter().map(|h| h.forward(s, pooled)).collect::<Result<Vec<_>>>()?;
        Ok(s.g.concat(&outs, 1)?)
    }
}
