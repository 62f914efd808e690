//! Multi-stage feature fusion: three encoder taps concatenated along the token
//! axis, tagged with tiled positions plus a learnable per-stage embedding and
//! refined by one transformer block.

use qface_numerics::{ParamId, ParamStore, Real, RngStream, Session, Tensor, Var};

use crate::config::{EncoderConfig, MffConfig};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Block};

pub const STAGES: usize = 3;

#[derive(Clone, Debug)]
pub struct Mff {
    /// `SE_1..SE_3`, each `[d]`.
    pub stage_embeddings: [ParamId; STAGES],
    pub block: Block,
}

impl Mff {
    pub fn new<T: Real>(
        enc: &EncoderConfig,
        cfg: &MffConfig,
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        group: usize,
    ) -> Result<Self> {
        let d = enc.hidden_dim;
        let stage_embeddings = [0, 1, 2].map(|k| {
            store.add(format!("mff.stage_embedding.{k}"), gaussian(rng, &[d], cfg.stage_embedding_std), group, false)
        });
        let block = Block::new(store, rng, "mff.block", d, enc.heads, enc.mlp_ratio, group)?;
        Ok(Mff { stage_embeddings, block })
    }

    /// `[3T, d]` additive code: the `[T, d]` table `pe` tiled per stage, plus
    /// `SE_k` on every row of stage `k`.
    pub fn fused_key_positions<T: Real>(&self, s: &mut Session<T>, pe: &Tensor<T>) -> Result<Var> {
        let mut parts = Vec::with_capacity(STAGES);
        for &se in &self.stage_embeddings {
            let p = s.g.constant(pe.clone());
            let se = s.param(se);
            parts.push(s.g.add_bcast(p, se)?);
        }
        Ok(s.g.concat(&parts, 0)?)
    }

    /// Fuses three `[B, T, d]` maps into `F*` of shape `[B, 3T, d]`; also
    /// returns the key position code used by the decoder.
    pub fn fuse<T: Real>(&self, s: &mut Session<T>, maps: &[Var], pe: &Tensor<T>) -> Result<(Var, Var)> {
        if maps.len() != STAGES {
            return Err(Error::Config(format!("fusion needs {STAGES} feature maps, got {}", maps.len())));
        }
        let shape = s.g.shape(maps[0]).to_vec();
        for m in &maps[1..] {
            if s.g.shape(*m) != shape.as_slice() {
                return Err(Error::Config(format!("feature map shapes differ: {shape:?} vs {:?}", s.g.shape(*m))));
            }
        }
        if shape.len() != 3 || pe.shape() != &shape[1..] {
            return Err(Error::Config(format!("position table {:?} does not match maps {shape:?}", pe.shape())));
        }
        let key_pos = self.fused_key_positions(s, pe)?;
        let cat = s.g.concat(maps, 1)?;
        let x = s.g.add_bcast(cat, key_pos)?;
        let (out, _) = self.block.forward(s, x, None)?;
        Ok((out, key_pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qface_numerics::Purpose;

    fn small() -> (EncoderConfig, ParamStore<f64>, Mff) {
        let enc = EncoderConfig { hidden_dim: 8, heads: 2, mlp_ratio: 2, ..Default::default() };
        let mut store = ParamStore::new();
        let m = Mff::new(&enc, &MffConfig::default(), &mut store, &mut RngStream::new(0, Purpose::Init), 0).unwrap();
        (enc, store, m)
    }

    #[test]
    fn full_scale_token_count() {
        let (_, store, m) = small();
        let mut s = Session::frozen(&store);
        let maps: Vec<Var> = (0..3).map(|_| s.g.constant(Tensor::zeros([1, 197, 8]))).collect();
        let pe = Tensor::zeros([197, 8]);
        let (f, kp) = m.fuse(&mut s, &maps, &pe).unwrap();
        assert_eq!(s.g.shape(f), &[1, 591, 8]);
        assert_eq!(s.g.shape(kp), &[591, 8]);
    }

    #[test]
    fn zero_everything_is_concatenation() {
        let (_, mut store, m) = small();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = RngStream::new(2, qface_numerics::Purpose::Data);
        let ins: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn([2, 4, 8], |_| rng.normal())).collect();
        let mut s = Session::frozen(&store);
        let maps: Vec<Var> = ins.iter().map(|t| s.g.constant(t.clone())).collect();
        let (f, _) = m.fuse(&mut s, &maps, &Tensor::zeros([4, 8])).unwrap();
        let mut s2 = Session::frozen(&store);
        let maps2: Vec<Var> = ins.iter().map(|t| s2.g.constant(t.clone())).collect();
        let cat = s2.g.concat(&maps2, 1).unwrap();
        assert_eq!(s.g.value(f), s2.g.value(cat));
    }

    #[test]
    fn mismatched_maps_rejected() {
        let (_, store, m) = small();
        let mut s = Session::frozen(&store);
        let a = s.g.constant(Tensor::zeros([1, 4, 8]));
        let b = s.g.constant(Tensor::zeros([1, 5, 8]));
        assert!(m.fuse(&mut s, &[a, a, b], &Tensor::zeros([4, 8])).is_err());
    }
}
