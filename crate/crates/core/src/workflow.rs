//! Run-directory level commands shared by the command-line tool and tests:
//! dataset generation, pretraining, fine-tuning, evaluation, attention export
//! and the ablation table.

use std::fs;
use std::path::{Path, PathBuf};

use qface_numerics::Checkpoint;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mim::{pretrain, save_pretrained, PretrainLogRow};
use crate::model::ModelKind;
use crate::pgm::GrayImage;
use crate::qdecoder::export_attention;
use crate::synthdata::{build_split, Dataset, DatasetManifest};
use crate::tasks::{TaskKind, TaskScores};
use crate::trainer::{attention_records, evaluate, EvalReport, LogRow, TrainLog, Trainer};

pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_MANIFEST: &str = "train.json";
pub const TEST_MANIFEST: &str = "test.json";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";

/// Writes the resolved config into `dir`, creating it if needed.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    Ok(())
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn manifests(cfg: &RunConfig) -> (DatasetManifest, DatasetManifest) {
    build_split(cfg.data.n_train, cfg.data.n_test, cfg.seeds.data, cfg.encoder.image_size)
}

/// Renders both splits in memory from the config.
pub fn render_splits(cfg: &RunConfig) -> Splits {
    let (tr, te) = manifests(cfg);
    Splits { train: Dataset::from_manifest(&tr), test: Dataset::from_manifest(&te) }
}

fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("images").join(format!("{index:06}.pgm"))
}

/// Writes `train.json`, `test.json` and one PGM per sample under `images/`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    echo_config(cfg, out)?;
    fs::create_dir_all(out.join("images"))?;
    let (tr, te) = manifests(cfg);
    let mut written = 0;
    for (m, file) in [(&tr, TRAIN_MANIFEST), (&te, TEST_MANIFEST)] {
        fs::write(out.join(file), m.to_json())?;
        let data = Dataset::from_manifest(m);
        let saved = crate::parallel::map(&(0..m.samples.len()).collect::<Vec<_>>(), |&i| -> Result<()> {
            GrayImage::from_unit(m.image_size, m.image_size, &data.images[i])?
                .save(&image_path(out, m.samples[i].index))
        });
        for r in saved {
            r?;
        }
        written += m.samples.len();
    }
    Ok(written)
}

fn load_split(dir: &Path, file: &str, image_size: usize) -> Result<Dataset> {
    let path = dir.join(file);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let m = DatasetManifest::from_json(&text)?;
    if m.image_size != image_size {
        return Err(Error::Data(format!("{} holds {}px images, config expects {image_size}px", path.display(), m.image_size)));
    }
    let images = crate::parallel::map(&m.samples, |s| -> Result<Vec<f32>> {
        let img = GrayImage::load(&image_path(dir, s.index))?;
        if img.width != image_size || img.height != image_size {
            return Err(Error::Data(format!("image {} is {}x{}", s.index, img.width, img.height)));
        }
        Ok(img.pixels.iter().map(|&p| p as f32 / 255.0).collect())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(Dataset { image_size, labels: m.samples.iter().map(|s| s.labels).collect(), images })
}

/// Loads a `gen-data` directory, or renders from the config when `dir` is `None`.
pub fn load_splits(cfg: &RunConfig, dir: Option<&Path>) -> Result<Splits> {
    match dir {
        None => Ok(render_splits(cfg)),
        Some(d) => Ok(Splits {
            train: load_split(d, TRAIN_MANIFEST, cfg.encoder.image_size)?,
            test: load_split(d, TEST_MANIFEST, cfg.encoder.image_size)?,
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub initial_eval: f64,
    pub final_eval: f64,
    pub steps: usize,
}

/// MIM pretraining; writes `pretrain_log.csv`, `pretrain_eval.csv` and
/// `pretrain.ckpt`. Held-out loss uses the first `mim.eval_images` test images.
pub fn run_pretrain(cfg: &RunConfig, splits: &Splits, out: &Path) -> Result<PretrainSummary> {
    cfg.validate()?;
    echo_config(cfg, out)?;
    let held = &splits.test.images[..cfg.mim.eval_images.min(splits.test.len())];
    if held.is_empty() {
        return Err(Error::Data("pretraining needs at least one held-out image".into()));
    }
    let mut log = csv::Writer::from_path(out.join("pretrain_log.csv"))?;
    let mut werr = None;
    let res = pretrain(&cfg.encoder, &cfg.mim, &cfg.optimizer, &splits.train, held, cfg.seeds.run, |r: &PretrainLogRow| {
        if werr.is_none() {
            werr = log.serialize(r).err();
        }
    })?;
    if let Some(e) = werr {
        return Err(e.into());
    }
    log.flush()?;
    let mut ev = csv::Writer::from_path(out.join("pretrain_eval.csv"))?;
    ev.write_record(["stage", "masked_l1"])?;
    ev.write_record(["initial", &res.initial_eval.to_string()])?;
    ev.write_record(["final", &res.final_eval.to_string()])?;
    ev.flush()?;
    save_pretrained(&res.store, &cfg.encoder).save(out.join(PRETRAIN_CKPT))?;
    Ok(PretrainSummary { initial_eval: res.initial_eval, final_eval: res.final_eval, steps: res.log.len() })
}

/// A fine-tuning variant: one of the joint models, or one model per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    TaskSpecific,
    Joint(ModelKind),
}

impl Variant {
    /// Ablation rows in table order.
    pub const ALL: [Variant; 4] = [
        Variant::TaskSpecific,
        Variant::Joint(ModelKind::Multihead),
        Variant::Joint(ModelKind::QfaceNoMff),
        Variant::Joint(ModelKind::Qface),
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::TaskSpecific => "task_specific",
            Variant::Joint(k) => k.label(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "taskspecific" | "task_specific" => Ok(Variant::TaskSpecific),
            _ => ModelKind::parse(s).map(Variant::Joint),
        }
    }
}

fn write_eval(report: &EvalReport, path: &Path) -> Result<()> {
    report.write_csv(fs::File::create(path)?)
}

/// Fine-tunes one joint model; writes `train_log.csv`, periodic
/// `eval_<step>.csv`, `eval_final.csv` and `model.ckpt`.
pub fn run_finetune(
    cfg: &RunConfig,
    kind: ModelKind,
    init: Option<&Checkpoint>,
    splits: &Splits,
    out: &Path,
    mut on_step: impl FnMut(&LogRow),
) -> Result<EvalReport> {
    echo_config(cfg, out)?;
    let mut t = Trainer::new(cfg, kind)?;
    if let Some(c) = init {
        t.load_encoder(c)?;
    }
    let mut log = TrainLog::new(fs::File::create(out.join("train_log.csv"))?, &t.net)?;
    let total = cfg.schedule.total_steps;
    while t.step < total {
        let row = t.train_step(&splits.train)?;
        log.push(&row)?;
        on_step(&row);
        let every = cfg.data.eval_every;
        if every > 0 && t.step % every == 0 && t.step < total {
            write_eval(&evaluate(&t.net, &t.store, &splits.test)?, &out.join(format!("eval_{:06}.csv", t.step)))?;
        }
    }
    log.finish()?;
    let report = evaluate(&t.net, &t.store, &splits.test)?;
    write_eval(&report, &out.join("eval_final.csv"))?;
    t.save(&out.join(MODEL_CKPT))?;
    Ok(report)
}

/// Trains one Q-Face model per task in `out/<task>/` and writes the combined
/// `eval_final.csv`.
pub fn run_task_specific(
    cfg: &RunConfig,
    init: Option<&Checkpoint>,
    splits: &Splits,
    out: &Path,
    mut on_step: impl FnMut(&str, &LogRow),
) -> Result<EvalReport> {
    echo_config(cfg, out)?;
    let mut scores = Vec::with_capacity(cfg.tasks.len());
    for task in &cfg.tasks {
        let single = RunConfig { tasks: vec![task.clone()], ..cfg.clone() };
        let r = run_finetune(&single, ModelKind::Qface, init, splits, &out.join(&task.name), |row| on_step(&task.name, row))?;
        scores.extend(r.scores);
    }
    let report = EvalReport { scores };
    write_eval(&report, &out.join("eval_final.csv"))?;
    Ok(report)
}

/// Fine-tunes any variant.
pub fn run_variant(
    cfg: &RunConfig,
    variant: Variant,
    init: Option<&Checkpoint>,
    splits: &Splits,
    out: &Path,
    mut on_step: impl FnMut(&str, &LogRow),
) -> Result<EvalReport> {
    match variant {
        Variant::TaskSpecific => run_task_specific(cfg, init, splits, out, on_step),
        Variant::Joint(k) => run_finetune(cfg, k, init, splits, out, |r| on_step(k.label(), r)),
    }
}

/// Evaluates `t` on `test`; writes `eval.csv`.
pub fn run_eval(t: &Trainer, test: &Dataset, out: &Path) -> Result<EvalReport> {
    echo_config(&t.cfg, out)?;
    let report = evaluate(&t.net, &t.store, test)?;
    write_eval(&report, &out.join("eval.csv"))?;
    Ok(report)
}

/// Exports the decoder cross-attention of test image `index`.
pub fn run_attn(t: &Trainer, test: &Dataset, index: usize, out: &Path) -> Result<usize> {
    echo_config(&t.cfg, out)?;
    let records = attention_records(&t.net, &t.store, test, index)?;
    export_attention(&records, t.cfg.encoder.grid(), &t.net.output_labels(), out)
}

/// Ablation scores (0-100 scale) of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub scores: Vec<f64>,
    pub avg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    /// One column per task: `f1_<task>` or `ccc_<task>`.
    pub columns: Vec<String>,
    /// Seed-averaged rows, in [`Variant::ALL`] order.
    pub rows: Vec<AblationRow>,
    /// `(seed, row)` for every run.
    pub per_seed: Vec<(u64, AblationRow)>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn seed_rows(&self, v: Variant) -> impl Iterator<Item = &(u64, AblationRow)> {
        self.per_seed.iter().filter(move |(_, r)| r.variant == v)
    }

    fn write(&self, path: &Path, with_seed: bool) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = Vec::new();
        if with_seed {
            header.push("seed".into());
        }
        header.push("variant".into());
        header.extend(self.columns.iter().cloned());
        header.push("avg".into());
        w.write_record(&header)?;
        let rows: Vec<(Option<u64>, &AblationRow)> = if with_seed {
            self.per_seed.iter().map(|(s, r)| (Some(*s), r)).collect()
        } else {
            self.rows.iter().map(|r| (None, r)).collect()
        };
        for (seed, r) in rows {
            let mut rec: Vec<String> = seed.map(|s| s.to_string()).into_iter().collect();
            rec.push(r.variant.label().into());
            rec.extend(r.scores.iter().map(|v| format!("{v:.4}")));
            rec.push(format!("{:.4}", r.avg));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn ablation_columns(cfg: &RunConfig) -> Vec<String> {
    cfg.tasks
        .iter()
        .map(|t| match t.kind {
            TaskKind::SingleLabel | TaskKind::MultiLabel => format!("f1_{}", t.name),
            TaskKind::ScalarRegression | TaskKind::Rotation => format!("ccc_{}", t.name),
        })
        .collect()
}

fn ablation_row(variant: Variant, cfg: &RunConfig, scores: &[TaskScores]) -> Result<AblationRow> {
    let vals = cfg
        .tasks
        .iter()
        .map(|t| {
            scores
                .iter()
                .find(|s| s.task == t.name)
                .map(|s| 100.0 * s.ablation_score)
                .ok_or_else(|| Error::Metric(format!("no score for task `{}`", t.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let avg = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok(AblationRow { variant, scores: vals, avg })
}

/// Runs every variant for every seed (the run seed is replaced, the data seed
/// kept) and writes `table7.csv` (seed means) and `table7_seeds.csv`.
pub fn run_ablation(
    cfg: &RunConfig,
    init: Option<&Checkpoint>,
    splits: &Splits,
    seeds: &[u64],
    out: &Path,
    mut on_step: impl FnMut(u64, &str, &LogRow),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    echo_config(cfg, out)?;
    let columns = ablation_columns(cfg);
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seeds.run = seed;
        for v in Variant::ALL {
            let dir = out.join(format!("seed{seed}")).join(v.label());
            let r = run_variant(&c, v, init, splits, &dir, |name, row| on_step(seed, name, row))?;
            per_seed.push((seed, ablation_row(v, cfg, &r.scores)?));
        }
    }
    let rows = Variant::ALL
        .iter()
        .map(|&v| {
            let runs: Vec<&AblationRow> = per_seed.iter().filter(|(_, r)| r.variant == v).map(|(_, r)| r).collect();
            let n = runs.len() as f64;
            let scores = (0..columns.len()).map(|i| runs.iter().map(|r| r.scores[i]).sum::<f64>() / n).collect();
            AblationRow { variant: v, scores, avg: runs.iter().map(|r| r.avg).sum::<f64>() / n }
        })
        .collect();
    let table = AblationTable { columns, rows, per_seed };
    table.write(&out.join("table7.csv"), false)?;
    table.write(&out.join("table7_seeds.csv"), true)?;
    Ok(table)
}
