//! Transformer building blocks over `[B, T, d]` activations.

use qface_numerics::{ParamId, ParamStore, Real, RngStream, Session, Tensor, Var};

use crate::error::{Error, Result};

/// Uniform Xavier initialisation for a `[fan_in, fan_out]` weight.
pub fn xavier<T: Real>(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| T::lit(rng.uniform_in(-a, a)))
}

pub fn gaussian<T: Real>(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(std * rng.normal()))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out), group, true);
        let b = store.add(format!("{name}.b"), Tensor::zeros([fan_out]), group, false);
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        Ok(s.g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, group: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full([d], T::one()), group, false);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([d]), group, false);
        LayerNorm { gain, bias }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.bias));
        Ok(s.g.layer_norm(x, g, b)?)
    }
}

/// Multi-head attention with separate query, key, value and output maps.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        name: &str,
        d: usize,
        heads: usize,
        group: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: {heads} heads do not divide width {d}")));
        }
        Ok(Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, group),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, group),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, group),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, group),
            heads,
        })
    }

    /// `[B, n, d]` to `[B, H, n, d/H]`.
    fn split_heads<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let sh = s.g.shape(x).to_vec();
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        let x = s.g.reshape(x, vec![b, n, self.heads, d / self.heads])?;
        Ok(s.g.permute(x, &[0, 2, 1, 3])?)
    }

    /// Attends `query` (`[B, n, d]`) over `key`/`value` (`[B, m, d]`).
    ///
    /// Returns the output and the attention probabilities `[B, H, n, m]`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, query: Var, key: Var, value: Var) -> Result<(Var, Var)> {
        let sh = s.g.shape(query).to_vec();
        if sh.len() != 3 {
            return Err(Error::Config(format!("attention expects [B, n, d], got {sh:?}")));
        }
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, key)?;
        let v = self.v.forward(s, value)?;
        let q = self.split_heads(s, q)?;
        let k = self.split_heads(s, k)?;
        let v = self.split_heads(s, v)?;
        let kt = s.g.permute(k, &[0, 1, 3, 2])?;
        let scores = s.g.matmul(q, kt)?;
        let scores = s.g.scale(scores, T::lit(1.0 / ((d / self.heads) as f64).sqrt()));
        let probs = s.g.softmax(scores, 3)?;
        let ctx = s.g.matmul(probs, v)?;
        let ctx = s.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.g.reshape(ctx, vec![b, n, d])?;
        Ok((self.o.forward(s, ctx)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut RngStream, name: &str, d: usize, ratio: usize, group: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, d * ratio, group),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), d * ratio, d, group),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.g.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        group: usize,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, group),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads, group)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, group),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, mlp_ratio, group),
        })
    }

    /// `keep` holds one residual-branch factor per sample (0 or `1/keep_prob`)
    /// when stochastic depth is active.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var, keep: Option<&[T]>) -> Result<(Var, Var)> {
        let h = self.ln1.forward(s, x)?;
        let (a, probs) = self.attn.forward(s, h, h, h)?;
        let a = branch(s, a, keep)?;
        let x = s.g.add(x, a)?;
        let h = self.ln2.forward(s, x)?;
        let m = self.mlp.forward(s, h)?;
        let m = branch(s, m, keep)?;
        Ok((s.g.add(x, m)?, probs))
    }
}

fn branch<T: Real>(s: &mut Session<T>, x: Var, keep: Option<&[T]>) -> Result<Var> {
    match keep {
        Some(k) => Ok(s.g.scale_batch(x, k.to_vec())?),
        None => Ok(x),
    }
}

/// Parameter ids whose names start with `prefix`.
pub fn params_with_prefix<T: Real>(store: &ParamStore<T>, prefix: &str) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use qface_numerics::Purpose;

    fn block(store: &mut ParamStore<f64>) -> Block {
        let mut rng = RngStream::new(0, Purpose::Init);
        Block::new(store, &mut rng, "b", 8, 2, 2, 0).unwrap()
    }

    #[test]
    fn shape_preserved_and_rows_normalized() {
        let mut store = ParamStore::new();
        let blk = block(&mut store);
        let mut rng = RngStream::new(1, Purpose::Data);
        let x = Tensor::from_fn([2, 5, 8], |_| rng.normal());
        let mut s = Session::frozen(&store);
        let xv = s.g.constant(x);
        let (y, p) = blk.forward(&mut s, xv, None).unwrap();
        assert_eq!(s.g.shape(y), &[2, 5, 8]);
        assert_eq!(s.g.shape(p), &[2, 2, 5, 5]);
        for row in s.g.value(p).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut store = ParamStore::new();
        let blk = block(&mut store);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = RngStream::new(1, Purpose::Data);
        let x = Tensor::from_fn([1, 3, 8], |_| rng.normal());
        let mut s = Session::frozen(&store);
        let xv = s.g.constant(x.clone());
        let (y, _) = blk.forward(&mut s, xv, None).unwrap();
        assert_eq!(s.g.value(y), &x);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngStream::new(0, Purpose::Init);
        assert!(Block::new(&mut store, &mut rng, "b", 8, 3, 2, 0).is_err());
    }
}
