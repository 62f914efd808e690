//! Query-driven decoder: learnable per-label queries refined by two blocks of
//! self-attention, cross-attention over the fused features and an FFN, then
//! projected to one logit per query.

use std::ops::Range;
use std::path::Path;

use qface_numerics::{ParamId, ParamStore, Real, RngStream, Session, Tensor, Var};

use crate::config::{DecoderConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Attention, LayerNorm, Mlp};
use crate::pgm::GrayImage;
use crate::tasks::{query_slices, TaskSpec};

/// Global query matrix `Q`, its position code and the task partition.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// `[N_q, d]`.
    pub q: ParamId,
    /// `[N_q, d]`.
    pub q_pos: ParamId,
    pub task_slices: Vec<Range<usize>>,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub ln_mem: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        name: &str,
        d: usize,
        cfg: &DecoderConfig,
        group: usize,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d, group),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, cfg.heads, group)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d, group),
            ln_mem: LayerNorm::new(store, &format!("{name}.ln_mem"), d, group),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), d, cfg.heads, group)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d, group),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, cfg.mlp_ratio, group),
        })
    }

    /// `q` is `[B, N_q, d]`, `q_pos` `[N_q, d]`, `mem` `[B, M, d]`, `key_pos`
    /// `[M, d]`. Returns updated queries and cross-attention `[B, H, N_q, M]`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, q: Var, q_pos: Var, mem: Var, key_pos: Var) -> Result<(Var, Var)> {
        let h = self.ln_self.forward(s, q)?;
        let hp = s.g.add_bcast(h, q_pos)?;
        let (a, _) = self.self_attn.forward(s, hp, hp, h)?;
        let q = s.g.add(q, a)?;

        let h = self.ln_cross.forward(s, q)?;
        let hq = s.g.add_bcast(h, q_pos)?;
        let m = self.ln_mem.forward(s, mem)?;
        let mk = s.g.add_bcast(m, key_pos)?;
        let (c, probs) = self.cross_attn.forward(s, hq, mk, m)?;
        let q = s.g.add(q, c)?;

        let h = self.ln_ffn.forward(s, q)?;
        let f = self.mlp.forward(s, h)?;
        Ok((s.g.add(q, f)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub queries: QuerySet,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    /// Per-query projection rows `[N_q, d]` and biases `[N_q]`.
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

pub struct DecodeOutput {
    /// `[B, N_q, d]`.
    pub features: Var,
    /// `[B, N_q]`.
    pub logits: Var,
    /// Cross-attention per block, `[B, H, N_q, M]`.
    pub cross_attention: Vec<Var>,
}

impl QueryDecoder {
    pub fn new<T: Real>(
        enc: &EncoderConfig,
        cfg: &DecoderConfig,
        tasks: &[TaskSpec],
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        group: usize,
    ) -> Result<Self> {
        let d = enc.hidden_dim;
        let task_slices = query_slices(tasks);
        let nq = task_slices.last().map_or(0, |r| r.end);
        if nq == 0 {
            return Err(Error::Config("decoder needs at least one query".into()));
        }
        let q = store.add("decoder.queries", gaussian(rng, &[nq, d], cfg.query_std), group, false);
        let q_pos = store.add("decoder.query_pos", gaussian(rng, &[nq, d], cfg.query_std), group, false);
        let blocks = (0..cfg.depth)
            .map(|i| DecoderBlock::new(store, rng, &format!("decoder.blocks.{i}"), d, cfg, group))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, "decoder.norm", d, group);
        let a = (6.0 / (d + 1) as f64).sqrt();
        let proj_w = store.add("head.proj.w", Tensor::from_fn([nq, d], |_| T::lit(rng.uniform_in(-a, a))), group, true);
        let proj_b = store.add("head.proj.b", Tensor::zeros([nq]), group, false);
        Ok(QueryDecoder { queries: QuerySet { q, q_pos, task_slices, len: nq }, blocks, norm, proj_w, proj_b })
    }

    /// Decodes every query jointly against `mem` (`[B, M, d]`).
    pub fn decode<T: Real>(&self, s: &mut Session<T>, mem: Var, key_pos: Var) -> Result<DecodeOutput> {
        let b = s.g.shape(mem)[0];
        let q = s.param(self.queries.q);
        let mut x = s.g.repeat(q, b);
        let q_pos = s.param(self.queries.q_pos);
        let mut cross = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (nx, p) = blk.forward(s, x, q_pos, mem, key_pos)?;
            x = nx;
            cross.push(p);
        }
        let features = self.norm.forward(s, x)?;
        let logits = project_logits(s, features, self.proj_w, self.proj_b)?;
        Ok(DecodeOutput { features, logits, cross_attention: cross })
    }
}

/// `z[b, i] = <features[b, i], W[i]> + bias[i]`.
pub fn project_logits<T: Real>(s: &mut Session<T>, features: Var, w: ParamId, bias: ParamId) -> Result<Var> {
    let (w, bias) = (s.param(w), s.param(bias));
    let prod = s.g.mul_bcast(features, w)?;
    let z = s.g.sum(prod, 2)?;
    Ok(s.g.add_bcast(z, bias)?)
}

/// Head-averaged cross-attention of one image in one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// 1-based.
    pub block_index: usize,
    /// `weights[q]` over the `stages · tokens_per_stage` memory tokens.
    pub weights: Vec<Vec<f64>>,
    pub stages: usize,
    pub tokens_per_stage: usize,
}

impl AttentionRecord {
    /// Averages `probs[sample]` (`[B, H, N_q, M]`) over heads.
    pub fn from_probs<T: Real>(probs: &Tensor<T>, sample: usize, block_index: usize, stages: usize) -> Self {
        let sh = probs.shape();
        let (h, nq, m) = (sh[1], sh[2], sh[3]);
        let data = probs.data();
        let mut weights = vec![vec![0.0; m]; nq];
        for head in 0..h {
            for (qi, row) in weights.iter_mut().enumerate() {
                let off = ((sample * h + head) * nq + qi) * m;
                for (j, w) in row.iter_mut().enumerate() {
                    *w += data[off + j].to_f64().unwrap() / h as f64;
                }
            }
        }
        AttentionRecord { block_index, weights, stages, tokens_per_stage: m / stages }
    }

    /// Sum of each query's weights within each stage: `[N_q][stages]`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        self.weights
            .iter()
            .map(|row| row.chunks(self.tokens_per_stage).map(|c| c.iter().sum()).collect())
            .collect()
    }

    /// Patch weights of one query and stage (class token excluded) and the
    /// class-token weight.
    pub fn stage_map(&self, query: usize, stage: usize) -> (Vec<f64>, f64) {
        let c = &self.weights[query][stage * self.tokens_per_stage..(stage + 1) * self.tokens_per_stage];
        (c[1..].to_vec(), c[0])
    }
}

/// `round(255 · w / max w)`; an all-zero map stays zero.
pub fn attention_image(weights: &[f64], grid: usize) -> Result<GrayImage> {
    let max = weights.iter().cloned().fold(0.0f64, f64::max);
    let px = weights.iter().map(|&w| if max > 0.0 { (255.0 * w / max).round() as u8 } else { 0 }).collect();
    GrayImage::new(grid, grid, px)
}

/// Writes `attn_b{block}_q{query}_s{stage}.pgm` for every record, query and
/// stage, plus `attn_marginals.csv` (label, stage, weight) from the first
/// block and `attn_cls.csv` with the class-token weights.
pub fn export_attention(records: &[AttentionRecord], grid: usize, labels: &[String], dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let mut files = 0;
    let mut cls = csv::Writer::from_path(dir.join("attn_cls.csv"))?;
    cls.write_record(["block", "label", "stage", "weight"])?;
    for rec in records {
        if rec.tokens_per_stage != grid * grid + 1 {
            return Err(Error::Config(format!(
                "record has {} tokens per stage, grid {grid} needs {}",
                rec.tokens_per_stage,
                grid * grid + 1
            )));
        }
        for q in 0..rec.weights.len() {
            for st in 0..rec.stages {
                let (map, c) = rec.stage_map(q, st);
                attention_image(&map, grid)?
                    .save(&dir.join(format!("attn_b{}_q{}_s{}.pgm", rec.block_index, q, st + 1)))?;
                cls.write_record([rec.block_index.to_string(), label_of(labels, q), (st + 1).to_string(), c.to_string()])?;
                files += 1;
            }
        }
    }
    cls.flush()?;
    let mut w = csv::Writer::from_path(dir.join("attn_marginals.csv"))?;
    w.write_record(["label", "stage", "weight"])?;
    if let Some(first) = records.iter().find(|r| r.block_index == 1).or(records.first()) {
        for (q, m) in first.marginals().iter().enumerate() {
            for (st, v) in m.iter().enumerate() {
                w.write_record([label_of(labels, q), (st + 1).to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(files)
}

fn label_of(labels: &[String], q: usize) -> String {
    labels.get(q).cloned().unwrap_or_else(|| q.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_marginals() {
        let rec = AttentionRecord { block_index: 1, weights: vec![vec![1.0 / 15.0; 15]], stages: 3, tokens_per_stage: 5 };
        for m in &rec.marginals()[0] {
            assert!((m - 1.0 / 3.0).abs() < 1e-12);
        }
        let (map, c) = rec.stage_map(0, 1);
        assert_eq!(map.len(), 4);
        assert!((c - 1.0 / 15.0).abs() < 1e-15);
        let img = attention_image(&map, 2).unwrap();
        assert_eq!(img.pixels, [255; 4]);
    }

    #[test]
    fn image_normalization() {
        let img = attention_image(&[0.0, 0.1, 0.2, 0.4], 2).unwrap();
        assert_eq!(img.pixels, [0, 64, 128, 255]);
        assert_eq!(attention_image(&[0.0; 4], 2).unwrap().pixels, [0; 4]);
    }
}
