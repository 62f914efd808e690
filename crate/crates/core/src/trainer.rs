//! Multi-task fine-tuning: one batch per task per step, weighted loss sum,
//! one backward pass and one AdamW update; evaluation and checkpointing.

use std::path::Path;

use qface_numerics::{Checkpoint, Grads, ParamStore, Purpose, Real, RngState, RngStream, Session, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::batch_patches;
use crate::error::{Error, Result};
use crate::model::{ModelKind, Network};
use crate::optim::{drop_path_plan, layer_lr_scale, lr_at, AdamW};
use crate::qdecoder::AttentionRecord;
use crate::synthdata::{Dataset, FaceLabels};
use crate::tasks::{decode, metrics, score_task, task_loss, Prediction, TaskScores};

/// `[B, N, P]` patches of the listed images.
pub fn make_patches<T: Real>(data: &Dataset, idx: &[usize], net: &Network) -> Result<Tensor<T>> {
    let imgs: Vec<&[f32]> = idx.iter().map(|&i| data.images[i].as_slice()).collect();
    batch_patches(&imgs, &net.encoder.cfg)
}

/// Loss values and gradients of one weighted multi-task objective.
pub struct StepResult<T> {
    pub grads: Grads<T>,
    /// Unweighted loss per included task, in `include` order.
    pub task_losses: Vec<f64>,
    /// `Σ α_t L_t`.
    pub total: f64,
}

/// Stochastic parts of a training forward pass.
pub struct Stochastic<'a> {
    pub noise: &'a mut RngStream,
    pub drop: &'a mut RngStream,
}

/// Builds one graph holding a forward pass for every task in `include`
/// (each on its own batch), sums `α_t L_t` and backpropagates once.
pub fn weighted_loss_grads<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    data: &Dataset,
    batches: &[Vec<usize>],
    include: &[usize],
    mut train: Option<Stochastic<'_>>,
) -> Result<StepResult<T>> {
    if batches.len() != net.tasks.len() {
        return Err(Error::Config(format!("{} batches for {} tasks", batches.len(), net.tasks.len())));
    }
    let mut s = Session::new(store);
    let mut total = None;
    let mut task_losses = Vec::with_capacity(include.len());
    let mut loss_vars = Vec::with_capacity(include.len());
    for &t in include {
        let idx = &batches[t];
        if idx.is_empty() {
            return Err(Error::Config(format!("task `{}` has an empty batch", net.tasks[t].name)));
        }
        let patches = s.g.constant(make_patches::<T>(data, idx, net)?);
        let plan = match train.as_mut() {
            Some(st) if net.encoder.cfg.drop_path_rate > 0.0 => Some(drop_path_plan::<T>(
                net.encoder.cfg.drop_path_rate,
                net.encoder.cfg.depth,
                idx.len(),
                st.drop,
            )),
            _ => None,
        };
        let fwd = net.forward(&mut s, patches, plan.as_ref())?;
        let logits = net.task_logits(&mut s, &fwd, t)?;
        let labels: Vec<&FaceLabels> = idx.iter().map(|&i| &data.labels[i]).collect();
        let loss = task_loss(&mut s.g, &net.tasks[t], logits, &labels, train.as_mut().map(|st| &mut *st.noise))?;
        loss_vars.push(loss);
        let weighted = s.g.scale(loss, T::lit(net.tasks[t].loss_weight));
        total = Some(match total {
            None => weighted,
            Some(acc) => s.g.add(acc, weighted)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no task included in the step".into()))?;
    s.g.backward(total)?;
    for l in loss_vars {
        task_losses.push(s.g.value(l).item().to_f64().unwrap());
    }
    let mut grads = Grads::zeros_like(store);
    s.accumulate_grads(&mut grads);
    Ok(StepResult { grads, task_losses, total: s.g.value(total).item().to_f64().unwrap() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub task_losses: Vec<f64>,
    pub total: f64,
}

/// Rng streams of a training run.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub data: RngStream,
    pub noise: RngStream,
    pub drop: RngStream,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            data: RngStream::new(seed, Purpose::Data),
            noise: RngStream::new(seed, Purpose::LabelNoise),
            drop: RngStream::new(seed, Purpose::DropPath),
        }
    }

    fn states(&self) -> [RngState; 3] {
        [self.data.state(), self.noise.state(), self.drop.state()]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    model: ModelKind,
    step: usize,
    optim_step: u64,
    rngs: [RngState; 3],
    config: RunConfig,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Network,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    /// Completed steps.
    pub step: usize,
    pub rngs: TrainRngs,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, kind: ModelKind) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(cfg, kind, &mut store, &mut RngStream::new(cfg.seeds.run, Purpose::Init))?;
        let opt = AdamW::new(&cfg.optimizer, &store);
        Ok(Trainer { cfg: cfg.clone(), net, store, opt, step: 0, rngs: TrainRngs::new(cfg.seeds.run) })
    }

    /// Copies `encoder.*` weights from a pretraining checkpoint.
    pub fn load_encoder(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        Ok(self.store.load_from(ckpt, "encoder.")?)
    }

    /// Draws one batch of indices per task.
    pub fn sample_batches(&mut self, n_train: usize) -> Vec<Vec<usize>> {
        let b = self.cfg.data.batch_per_task.min(n_train);
        (0..self.net.tasks.len()).map(|_| self.rngs.data.sample_indices(n_train, b)).collect()
    }

    pub fn lr_scale(&self) -> impl Fn(usize) -> f64 {
        let (top, decay) = (self.net.top_group(), self.cfg.schedule.layer_decay);
        move |g| layer_lr_scale(g, top, decay)
    }

    /// One multi-task step.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LogRow> {
        let batches = self.sample_batches(data.len());
        let include: Vec<usize> = (0..self.net.tasks.len()).collect();
        let r = weighted_loss_grads(
            &self.net,
            &self.store,
            data,
            &batches,
            &include,
            Some(Stochastic { noise: &mut self.rngs.noise, drop: &mut self.rngs.drop }),
        )?;
        let lr = lr_at(self.step + 1, &self.cfg.schedule);
        let scale = self.lr_scale();
        self.opt.update(&mut self.store, &r.grads, lr, scale)?;
        let row = LogRow { step: self.step, lr, task_losses: r.task_losses, total: r.total };
        self.step += 1;
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.store.write_into(&mut ckpt);
        self.opt.write_into(&self.store, &mut ckpt);
        let meta = TrainMeta {
            kind: "finetune".into(),
            model: self.net.kind,
            step: self.step,
            optim_step: self.opt.step,
            rngs: self.rngs.states(),
            config: self.cfg.clone(),
        };
        ckpt.meta = serde_json::to_value(meta).expect("meta serializes");
        ckpt
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let meta: TrainMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("not a fine-tuning checkpoint: {e}")))?;
        let mut t = Trainer::new(&meta.config, meta.model)?;
        t.store.load_from(ckpt, "")?;
        t.opt.load_from(&t.store, ckpt, meta.optim_step)?;
        t.step = meta.step;
        let [d, n, p] = meta.rngs;
        t.rngs = TrainRngs { data: RngStream::restore(d), noise: RngStream::restore(n), drop: RngStream::restore(p) };
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trainer::resume(&Checkpoint::load(path)?)
    }
}

/// CSV writer for `train_log.csv`: step, lr, one loss column per task, total.
pub struct TrainLog<W: std::io::Write> {
    w: csv::Writer<W>,
}

impl<W: std::io::Write> TrainLog<W> {
    pub fn new(inner: W, net: &Network) -> Result<Self> {
        let mut w = csv::Writer::from_writer(inner);
        let mut header = vec!["step".to_string(), "lr".to_string()];
        header.extend(net.tasks.iter().map(|t| format!("loss_{}", t.name)));
        header.push("total".into());
        w.write_record(&header)?;
        Ok(TrainLog { w })
    }

    pub fn push(&mut self, row: &LogRow) -> Result<()> {
        let mut rec = vec![row.step.to_string(), row.lr.to_string()];
        rec.extend(row.task_losses.iter().map(|v| v.to_string()));
        rec.push(row.total.to_string());
        self.w.write_record(&rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.w.flush()?;
        self.w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Images per evaluation graph.
const EVAL_CHUNK: usize = 128;

/// Logits of every image, `[n][outputs]`, computed in frozen sessions.
pub fn predict_logits<T: Real>(net: &Network, store: &ParamStore<T>, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<usize>> =
        (0..data.len()).step_by(EVAL_CHUNK).map(|a| (a..(a + EVAL_CHUNK).min(data.len())).collect()).collect();
    let parts = crate::parallel::map(&chunks, |idx| -> Result<Vec<Vec<f64>>> {
        let mut s = Session::frozen(store);
        let p = s.g.constant(make_patches::<T>(data, idx, net)?);
        let fwd = net.forward(&mut s, p, None)?;
        let v = s.g.value(fwd.logits);
        Ok((0..idx.len()).map(|r| v.row(r).iter().map(|x| x.to_f64().unwrap()).collect()).collect())
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<TaskScores>,
}

impl EvalReport {
    pub fn task(&self, name: &str) -> Option<&TaskScores> {
        self.scores.iter().find(|s| s.task == name)
    }

    /// Mean ablation score ×100.
    pub fn avg(&self) -> Result<f64> {
        metrics::avg_score(&self.scores.iter().map(|s| s.ablation_score).collect::<Vec<_>>())
    }

    /// Rows (task, metric, value).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["task", "metric", "value"])?;
        for s in &self.scores {
            for (m, v) in &s.values {
                w.write_record([s.task.as_str(), m.as_str(), &v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn evaluate<T: Real>(net: &Network, store: &ParamStore<T>, data: &Dataset) -> Result<EvalReport> {
    let logits = predict_logits(net, store, data)?;
    let labels: Vec<&FaceLabels> = data.labels.iter().collect();
    let scores = net
        .tasks
        .iter()
        .zip(&net.slices)
        .map(|(t, r)| {
            let preds: Vec<Prediction> = logits.iter().map(|row| decode(t, &row[r.clone()])).collect();
            score_task(t, &preds, &labels)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { scores })
}

/// Head-averaged cross-attention records of image `index` (query models only).
pub fn attention_records<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    data: &Dataset,
    index: usize,
) -> Result<Vec<AttentionRecord>> {
    if index >= data.len() {
        return Err(Error::Data(format!("image {index} out of range ({} images)", data.len())));
    }
    let mut s = Session::frozen(store);
    let p = s.g.constant(make_patches::<T>(data, &[index], net)?);
    let fwd = net.forward(&mut s, p, None)?;
    if fwd.cross_attention.is_empty() {
        return Err(Error::Config(format!("model `{}` has no cross-attention", net.kind.label())));
    }
    Ok(fwd
        .cross_attention
        .iter()
        .enumerate()
        .map(|(i, &v)| AttentionRecord::from_probs(s.g.value(v), 0, i + 1, fwd.stages))
        .collect())
}
