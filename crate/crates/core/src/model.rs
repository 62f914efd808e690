//! Complete networks: Q-Face (with or without fusion) and the multi-head
//! baseline, sharing one encoder design and one logit layout.

use std::ops::Range;

use qface_numerics::{ParamStore, Real, RngStream, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::baseline::MultiHead;
use crate::config::RunConfig;
use crate::encoder::{DropPlan, Encoder};
use crate::error::{Error, Result};
use crate::mff::{Mff, STAGES};
use crate::qdecoder::QueryDecoder;
use crate::tasks::{query_slices, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Encoder, fusion and query decoder.
    Qface,
    /// Query decoder reading only the last encoder map.
    QfaceNoMff,
    /// Pooled features with one linear head per task.
    Multihead,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Qface => "qface",
            ModelKind::QfaceNoMff => "qface_no_mff",
            ModelKind::Multihead => "multihead",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "qface" => Ok(ModelKind::Qface),
            "qface_no_mff" => Ok(ModelKind::QfaceNoMff),
            "multihead" => Ok(ModelKind::Multihead),
            _ => Err(Error::Config(format!("unknown model `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Query { mff: Option<Mff>, decoder: QueryDecoder },
    Pooled(MultiHead),
}

#[derive(Clone, Debug)]
pub struct Network {
    pub kind: ModelKind,
    pub encoder: Encoder,
    pub head: Head,
    pub tasks: Vec<TaskSpec>,
    pub slices: Vec<Range<usize>>,
}

pub struct Forward {
    /// `[B, Σ label_count]`.
    pub logits: Var,
    /// Decoder cross-attention per block, `[B, H, N_q, M]` (query models only).
    pub cross_attention: Vec<Var>,
    /// Number of stages in the decoder memory.
    pub stages: usize,
}

impl Network {
    /// Registers all parameters. Groups: 0 embedding, `1..=L` encoder blocks,
    /// `L + 1` everything above the encoder.
    pub fn build<T: Real>(cfg: &RunConfig, kind: ModelKind, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg.encoder, store, rng)?;
        let top = cfg.encoder.depth + 1;
        let head = match kind {
            ModelKind::Qface | ModelKind::QfaceNoMff => {
                let mff = if kind == ModelKind::Qface {
                    Some(Mff::new(&cfg.encoder, &cfg.mff, store, rng, top)?)
                } else {
                    None
                };
                Head::Query { mff, decoder: QueryDecoder::new(&cfg.encoder, &cfg.decoder, &cfg.tasks, store, rng, top)? }
            }
            ModelKind::Multihead => Head::Pooled(MultiHead::new(cfg.encoder.hidden_dim, &cfg.tasks, store, rng, top)),
        };
        Ok(Network { kind, encoder, head, tasks: cfg.tasks.clone(), slices: query_slices(&cfg.tasks) })
    }

    pub fn top_group(&self) -> usize {
        self.encoder.cfg.depth + 1
    }

    pub fn num_outputs(&self) -> usize {
        self.slices.last().map_or(0, |r| r.end)
    }

    /// Runs the network on `[B, N, P]` patches.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, patches: Var, drop: Option<&DropPlan<T>>) -> Result<Forward> {
        let sh = s.g.shape(patches).to_vec();
        let ecfg = &self.encoder.cfg;
        if sh.len() != 3 || sh[1] != ecfg.num_patches() || sh[2] != ecfg.patch_dim() {
            return Err(Error::Config(format!(
                "expected [B, {}, {}] patches, got {sh:?}",
                ecfg.num_patches(),
                ecfg.patch_dim()
            )));
        }
        let all: Vec<usize> = (0..ecfg.num_patches()).collect();
        let pos = self.encoder.patch_positions(&vec![all; sh[0]]);
        let outs = self.encoder.forward_tokens(s, patches, pos, drop)?;
        let pe: Tensor<T> = self.encoder.positions().cast();
        match &self.head {
            Head::Query { mff, decoder } => {
                let (mem, key_pos, stages) = match mff {
                    Some(m) => {
                        let maps: Vec<Var> = ecfg.fusion_layers.iter().map(|&l| outs[l - 1]).collect();
                        let (f, kp) = m.fuse(s, &maps, &pe)?;
                        (f, kp, STAGES)
                    }
                    None => {
                        let kp = s.g.constant(pe);
                        (*outs.last().expect("depth >= 1"), kp, 1)
                    }
                };
                let d = decoder.decode(s, mem, key_pos)?;
                Ok(Forward { logits: d.logits, cross_attention: d.cross_attention, stages })
            }
            Head::Pooled(h) => {
                let logits = h.forward(s, *outs.last().expect("depth >= 1"))?;
                Ok(Forward { logits, cross_attention: Vec::new(), stages: 0 })
            }
        }
    }

    /// Logit block `[B, label_count]` of task `t`.
    pub fn task_logits<T: Real>(&self, s: &mut Session<T>, fwd: &Forward, t: usize) -> Result<Var> {
        Ok(s.g.slice(fwd.logits, 1, self.slices[t].clone())?)
    }

    /// Human-readable name of every output, `task.index`.
    pub fn output_labels(&self) -> Vec<String> {
        self.tasks.iter().flat_map(|t| (0..t.label_count).map(move |i| format!("{}.{i}", t.name))).collect()
    }
}
