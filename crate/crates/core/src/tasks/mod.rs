//! Task registry: what each face-analysis task predicts, how it is trained
//! and how it is scored.

pub mod losses;
pub mod metrics;
pub mod rotation;

use qface_numerics::{Graph, Real, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::FaceLabels;
use rotation::{perturb_rotation, rot6d_to_matrix, RotationLabel};

/// Age predictions are `AGE_CENTER + AGE_SCALE * logit`.
pub const AGE_CENTER: f64 = 50.0;
pub const AGE_SCALE: f64 = 25.0;
/// Default age loss weight. The age loss is measured in years, so its logit
/// gradient is `AGE_SCALE` times larger than a unit-scale loss; this weight
/// brings it back in line with the other tasks.
pub const AGE_LOSS_WEIGHT: f64 = 1.0 / AGE_SCALE;

/// Training-time rotation label perturbation.
pub const ROTATION_NOISE_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
    ScalarRegression,
    Rotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Top1,
    MeanAccuracy,
    MacroF1,
    Mae,
    EulerMae,
}

/// Which field of [`FaceLabels`] a task reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Expression,
    Attributes,
    ActionUnits,
    AgeGender,
    Pose,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub source: LabelSource,
    pub label_count: usize,
    #[serde(default = "one")]
    pub loss_weight: f64,
    pub metric: Metric,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task `{}`: {m}", self.name)));
        if !(self.loss_weight > 0.0) {
            return bad(format!("loss weight must be positive, got {}", self.loss_weight));
        }
        match (self.kind, self.source) {
            (TaskKind::SingleLabel, LabelSource::Expression) if self.label_count >= 2 => {}
            (TaskKind::MultiLabel, LabelSource::Attributes | LabelSource::ActionUnits) if self.label_count >= 1 => {}
            (TaskKind::ScalarRegression, LabelSource::AgeGender) if self.label_count == 3 => {}
            (TaskKind::Rotation, LabelSource::Pose) if self.label_count == 6 => {}
            _ => {
                return bad(format!(
                    "kind {:?} with source {:?} and {} labels is not supported",
                    self.kind, self.source, self.label_count
                ))
            }
        }
        Ok(())
    }
}

fn spec(name: &str, kind: TaskKind, source: LabelSource, label_count: usize, metric: Metric) -> TaskSpec {
    TaskSpec { name: name.into(), kind, source, label_count, loss_weight: 1.0, metric }
}

fn age_spec() -> TaskSpec {
    TaskSpec { loss_weight: AGE_LOSS_WEIGHT, ..spec("age", TaskKind::ScalarRegression, LabelSource::AgeGender, 3, Metric::Mae) }
}

/// The synthetic five-task suite: 7 + 6 + 4 + 3 + 6 = 26 labels.
pub fn desk_suite() -> Vec<TaskSpec> {
    vec![
        spec("expression", TaskKind::SingleLabel, LabelSource::Expression, 7, Metric::Top1),
        spec("attributes", TaskKind::MultiLabel, LabelSource::Attributes, 6, Metric::MeanAccuracy),
        spec("action_units", TaskKind::MultiLabel, LabelSource::ActionUnits, 4, Metric::MacroF1),
        age_spec(),
        spec("pose", TaskKind::Rotation, LabelSource::Pose, 6, Metric::EulerMae),
    ]
}

/// The real-dataset label layout: 7 + 12 + 40 + 3 + 6 = 68 labels.
pub fn full_scale_suite() -> Vec<TaskSpec> {
    vec![
        spec("expression", TaskKind::SingleLabel, LabelSource::Expression, 7, Metric::Top1),
        spec("action_units", TaskKind::MultiLabel, LabelSource::ActionUnits, 12, Metric::MacroF1),
        spec("attributes", TaskKind::MultiLabel, LabelSource::Attributes, 40, Metric::MeanAccuracy),
        age_spec(),
        spec("pose", TaskKind::Rotation, LabelSource::Pose, 6, Metric::EulerMae),
    ]
}

/// Contiguous query ranges, one per task, in registry order.
pub fn query_slices(tasks: &[TaskSpec]) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    tasks
        .iter()
        .map(|t| {
            let r = start..start + t.label_count;
            start = r.end;
            r
        })
        .collect()
}

fn bits_of(labels: &FaceLabels, source: LabelSource) -> &[bool] {
    match source {
        LabelSource::Attributes => &labels.attributes,
        LabelSource::ActionUnits => &labels.action_units,
        _ => &[],
    }
}

/// Loss of one task on its `[B, label_count]` logit block. `noise` is the
/// label-noise stream and is only passed in training.
pub fn task_loss<T: Real>(
    g: &mut Graph<T>,
    task: &TaskSpec,
    logits: Var,
    labels: &[&FaceLabels],
    noise: Option<&mut RngStream>,
) -> Result<Var> {
    let b = labels.len();
    let loss = match task.kind {
        TaskKind::SingleLabel => {
            let y: Vec<usize> = labels.iter().map(|l| l.expression).collect();
            losses::ce_loss(g, logits, &y)?
        }
        TaskKind::MultiLabel => {
            let mut y = Vec::with_capacity(b * task.label_count);
            for l in labels {
                let bits = bits_of(l, task.source);
                if bits.len() != task.label_count {
                    return Err(Error::Config(format!(
                        "task `{}` expects {} labels, data has {}",
                        task.name,
                        task.label_count,
                        bits.len()
                    )));
                }
                y.extend_from_slice(bits);
            }
            losses::bce_loss(g, logits, &y, None)?
        }
        TaskKind::ScalarRegression => {
            let z = g.slice(logits, 1, 0..1)?;
            let z = g.reshape(z, vec![b])?;
            let pred = g.affine(z, T::lit(AGE_SCALE), T::lit(AGE_CENTER))?;
            let ages: Vec<f64> = labels.iter().map(|l| l.age).collect();
            let age = losses::age_loss(g, pred, &ages, noise)?;
            let gz = g.slice(logits, 1, 1..3)?;
            let gy: Vec<usize> = labels.iter().map(|l| l.gender).collect();
            let gender = losses::ce_loss(g, gz, &gy)?;
            g.add(age, gender)?
        }
        TaskKind::Rotation => {
            let r = rotation::rot6d_graph(g, logits)?;
            let mut target = Vec::with_capacity(b * 9);
            let mut noise = noise;
            for l in labels {
                let rot = match noise.as_deref_mut() {
                    Some(n) => perturb_rotation(&l.rotation, n, ROTATION_NOISE_STD)?,
                    None => l.rotation,
                };
                target.extend(rot.to_col_major().iter().map(|&v| T::lit(v)));
            }
            let t = g.constant(Tensor::new([b, 9], target)?);
            rotation::geodesic_graph(g, r, t)?
        }
    };
    Ok(loss)
}

/// Decoded prediction of one task for one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    Bits(Vec<bool>),
    AgeGender { age: f64, gender: usize },
    Pose(RotationLabel),
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Turns one sample's logit row into a prediction.
pub fn decode(task: &TaskSpec, row: &[f64]) -> Prediction {
    match task.kind {
        TaskKind::SingleLabel => Prediction::Class(argmax(row)),
        TaskKind::MultiLabel => Prediction::Bits(row.iter().map(|&z| z > 0.0).collect()),
        TaskKind::ScalarRegression => {
            Prediction::AgeGender { age: AGE_CENTER + AGE_SCALE * row[0], gender: argmax(&row[1..3]) }
        }
        TaskKind::Rotation => {
            let code: [f64; 6] = row[..6].try_into().expect("six logits");
            Prediction::Pose(rot6d_to_matrix(&code).unwrap_or_else(|_| RotationLabel::identity()))
        }
    }
}

/// Scores for one task on an evaluation split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskScores {
    pub task: String,
    /// (metric name, value) in report order; the first is the task's primary metric.
    pub values: Vec<(String, f64)>,
    /// F1 for classification tasks, CCC for regression tasks (ablation AVG input).
    pub ablation_score: f64,
}

impl TaskScores {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub fn score_task(task: &TaskSpec, preds: &[Prediction], labels: &[&FaceLabels]) -> Result<TaskScores> {
    use metrics::*;
    let mut values = Vec::new();
    let ablation_score;
    match task.kind {
        TaskKind::SingleLabel => {
            let p: Vec<usize> = preds.iter().map(|p| if let Prediction::Class(c) = p { *c } else { 0 }).collect();
            let y: Vec<usize> = labels.iter().map(|l| l.expression).collect();
            let f = macro_f1(&p, &y, task.label_count)?;
            values.push(("top1".to_string(), top1(&p, &y)?));
            values.push(("macro_f1".to_string(), f));
            ablation_score = f;
        }
        TaskKind::MultiLabel => {
            let mut p = Vec::new();
            let mut y = Vec::new();
            for (pr, l) in preds.iter().zip(labels) {
                if let Prediction::Bits(b) = pr {
                    p.extend_from_slice(b);
                }
                y.extend_from_slice(bits_of(l, task.source));
            }
            let f1s = per_label_f1(&p, &y, task.label_count)?;
            let f = f1s.iter().sum::<f64>() / f1s.len() as f64;
            let acc = mean_accuracy(&p, &y)?;
            if task.metric == Metric::MacroF1 {
                values.push(("macro_f1".to_string(), f));
                values.push(("mean_accuracy".to_string(), acc));
            } else {
                values.push(("mean_accuracy".to_string(), acc));
                values.push(("macro_f1".to_string(), f));
            }
            ablation_score = f;
        }
        TaskKind::ScalarRegression => {
            let mut pa = Vec::new();
            let mut pg = Vec::new();
            for pr in preds {
                if let Prediction::AgeGender { age, gender } = pr {
                    pa.push(*age);
                    pg.push(*gender);
                }
            }
            let ya: Vec<f64> = labels.iter().map(|l| l.age).collect();
            let yg: Vec<usize> = labels.iter().map(|l| l.gender).collect();
            let c = ccc(&pa, &ya)?;
            values.push(("mae".to_string(), mae(&pa, &ya)?));
            values.push(("ccc".to_string(), c));
            values.push(("gender_top1".to_string(), top1(&pg, &yg)?));
            ablation_score = c;
        }
        TaskKind::Rotation => {
            let p: Vec<RotationLabel> = preds
                .iter()
                .map(|p| if let Prediction::Pose(r) = p { *r } else { RotationLabel::identity() })
                .collect();
            let y: Vec<RotationLabel> = labels.iter().map(|l| l.rotation).collect();
            let c = euler_ccc(&p, &y)?;
            values.push(("euler_mae".to_string(), euler_mae(&p, &y)?));
            values.push(("ccc".to_string(), c));
            ablation_score = c;
        }
    }
    Ok(TaskScores { task: task.name.clone(), values, ablation_score })
}
