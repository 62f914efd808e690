//! File-level workflows behind the CLI subcommands.

mod support;

use std::fs;

use qface::model::ModelKind;
use qface::qdecoder::AttentionRecord;
use qface::trainer::{attention_records, Trainer};
use qface::workflow::{gen_data, load_splits, render_splits, run_ablation, run_attn, run_eval, run_pretrain, Variant};
use qface_numerics::Checkpoint;

use support::tiny_config;

#[test]
fn generated_files_load_back_identically() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let n = gen_data(&cfg, dir.path()).unwrap();
    assert_eq!(n, cfg.data.n_train + cfg.data.n_test);
    let disk = load_splits(&cfg, Some(dir.path())).unwrap();
    let mem = render_splits(&cfg);
    assert_eq!(disk.train.images, mem.train.images);
    assert_eq!(disk.test.images, mem.test.images);
    assert_eq!(disk.train.labels, mem.train.labels);
    assert!(dir.path().join("config.json").exists());

    let mut other = cfg.clone();
    other.encoder.image_size = 64;
    assert!(load_splits(&other, Some(dir.path())).is_err());
}

#[test]
fn untrained_model_evaluates() {
    let cfg = tiny_config();
    let splits = render_splits(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(&cfg, ModelKind::Qface).unwrap();
    let r = run_eval(&t, &splits.test, dir.path()).unwrap();
    assert_eq!(r.scores.len(), 5);
    let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv.contains("expression,top1,"));
    assert!(csv.contains("pose,euler_mae,"));
}

#[test]
fn pretraining_feeds_finetuning() {
    let cfg = tiny_config();
    let splits = render_splits(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let s = run_pretrain(&cfg, &splits, dir.path()).unwrap();
    assert_eq!(s.steps, cfg.mim.schedule.total_steps);
    let log = fs::read_to_string(dir.path().join("pretrain_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,lr"));
    let ckpt = Checkpoint::load(dir.path().join("pretrain.ckpt")).unwrap();
    let mut t = Trainer::new(&cfg, ModelKind::Qface).unwrap();
    let loaded = t.load_encoder(&ckpt).unwrap();
    assert_eq!(loaded, t.store.iter().filter(|(_, p)| p.name.starts_with("encoder.")).count());
    assert!(ckpt.names().all(|n| n.starts_with("encoder.")));
}

#[test]
fn attention_export_is_normalised() {
    let cfg = tiny_config();
    let splits = render_splits(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(&cfg, ModelKind::Qface).unwrap();
    let files = run_attn(&t, &splits.test, 2, dir.path()).unwrap();
    // 2 blocks x 26 queries x 3 stages.
    assert_eq!(files, 2 * 26 * 3);
    assert!(dir.path().join("attn_b2_q25_s3.pgm").exists());
    let marg = fs::read_to_string(dir.path().join("attn_marginals.csv")).unwrap();
    assert_eq!(marg.lines().count(), 1 + 26 * 3);

    let recs: Vec<AttentionRecord> = attention_records(&t.net, &t.store, &splits.test, 2).unwrap();
    for r in &recs {
        for (row, m) in r.weights.iter().zip(r.marginals()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
    assert!(run_attn(&t, &splits.test, 999, dir.path()).is_err());
    let base = Trainer::new(&cfg, ModelKind::Multihead).unwrap();
    assert!(run_attn(&base, &splits.test, 0, dir.path()).is_err());
}

#[test]
fn ablation_table_has_one_row_per_variant() {
    let mut cfg = tiny_config();
    cfg.schedule.total_steps = 3;
    cfg.schedule.warmup_steps = 1;
    let splits = render_splits(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let table = run_ablation(&cfg, None, &splits, &[0, 1], dir.path(), |_, _, _| {}).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.per_seed.len(), 8);
    assert_eq!(table.columns, ["f1_expression", "f1_attributes", "f1_action_units", "ccc_age", "ccc_pose"]);
    for r in &table.rows {
        let mean = r.scores.iter().sum::<f64>() / r.scores.len() as f64;
        assert!((mean - r.avg).abs() < 1e-9);
    }
    let csv = fs::read_to_string(dir.path().join("table7.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("variant,"));
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, Variant::ALL.map(|v| v.label()));
    assert_eq!(fs::read_to_string(dir.path().join("table7_seeds.csv")).unwrap().lines().count(), 9);
    assert!(dir.path().join("seed1/task_specific/pose/train_log.csv").exists());
}
