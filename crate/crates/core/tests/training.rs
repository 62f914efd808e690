//! Training loop: gradient accumulation, determinism and resume.

mod support;

use qface::model::ModelKind;
use qface::trainer::{LogRow, Trainer};
use qface::workflow::{render_splits, run_finetune};
use qface_numerics::Checkpoint;

use support::{accumulation_gap, tiny_config};

#[test]
fn joint_step_equals_sum_of_task_steps() {
    for kind in [ModelKind::Qface, ModelKind::QfaceNoMff, ModelKind::Multihead] {
        let gap = accumulation_gap(kind);
        assert!(gap < 1e-10, "{}: {gap:e}", kind.label());
    }
}

fn run(t: &mut Trainer, data: &qface::synthdata::Dataset, steps: usize) -> Vec<LogRow> {
    (0..steps).map(|_| t.train_step(data).unwrap()).collect()
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = tiny_config();
    let splits = render_splits(&cfg);
    for kind in [ModelKind::Qface, ModelKind::Multihead] {
        let mut straight = Trainer::new(&cfg, kind).unwrap();
        let full = run(&mut straight, &splits.train, 6);

        let mut first = Trainer::new(&cfg, kind).unwrap();
        let mut log = run(&mut first, &splits.train, 3);
        let bytes = first.checkpoint().to_bytes();
        drop(first);
        let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        log.extend(run(&mut resumed, &splits.train, 3));

        assert_eq!(log, full, "{}", kind.label());
        for (id, p) in straight.store.iter() {
            assert_eq!(p.value, resumed.store.get(id).value, "{}", p.name);
        }
    }
}

#[test]
fn train_log_is_reproducible() {
    let cfg = tiny_config();
    let splits = render_splits(&cfg);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_finetune(&cfg, ModelKind::Qface, None, &splits, d.path(), |_| {}).unwrap();
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("train_log.csv")).unwrap();
    let a = read(&dirs[0]);
    assert_eq!(a, read(&dirs[1]));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + cfg.schedule.total_steps);
    assert!(text.starts_with("step,lr,loss_expression,loss_attributes,loss_action_units,loss_age,loss_pose,total"));
}

#[test]
fn different_run_seeds_diverge() {
    let mut cfg = tiny_config();
    let splits = render_splits(&cfg);
    let a = run(&mut Trainer::new(&cfg, ModelKind::Qface).unwrap(), &splits.train, 2);
    cfg.seeds.run = 1;
    let b = run(&mut Trainer::new(&cfg, ModelKind::Qface).unwrap(), &splits.train, 2);
    assert_ne!(a, b);
}
