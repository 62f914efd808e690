//! Checks shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::time::Instant;

use qface::config::{DataConfig, DecoderConfig, EncoderConfig, RunConfig};
use qface::mff::Mff;
use qface::mim::mim_loss;
use qface::model::{ModelKind, Network};
use qface::nn::Block;
use qface::qdecoder::DecoderBlock;
use qface::synthdata::{build_split, Dataset};
use qface::tasks::losses::{age_loss, bce_loss, ce_loss};
use qface::tasks::metrics;
use qface::tasks::rotation::{
    det, geodesic, geodesic_graph, orthonormality_error, perturb_rotation, rot6d_graph, rot6d_to_matrix,
    RotationLabel, GEODESIC_EPS,
};
use qface::tasks::full_scale_suite;
use qface::trainer::weighted_loss_grads;
use qface_numerics::gradcheck::session_grad_check;
use qface_numerics::{Graph, ParamStore, Purpose, RngStream, Session, Tensor, Var};

/// Step of the fourth-order stencil used for module checks.
pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

/// Pass/fail with a one-line explanation.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

/// Small but complete model config: 32px images, 4 patches, width 8, depth 3.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder = EncoderConfig {
        image_size: 32,
        patch_size: 16,
        channels: 3,
        hidden_dim: 8,
        depth: 3,
        heads: 2,
        mlp_ratio: 2,
        drop_path_rate: 0.1,
        fusion_layers: [1, 2, 3],
    };
    c.decoder = DecoderConfig { heads: 2, mlp_ratio: 2, ..DecoderConfig::default() };
    c.data = DataConfig { n_train: 48, n_test: 24, batch_per_task: 4, eval_every: 0 };
    c.schedule.warmup_steps = 2;
    c.schedule.total_steps = 6;
    c.mim.schedule.warmup_steps = 1;
    c.mim.schedule.total_steps = 4;
    c.mim.batch_size = 4;
    c.mim.eval_images = 8;
    c
}

fn randn(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| std * rng.normal())
}

/// Adds Gaussian noise to every parameter so gains and biases leave their
/// special initial values.
fn jitter(store: &mut ParamStore<f64>, rng: &mut RngStream, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += std * rng.normal();
        }
    }
}

fn weighted(g: &mut Graph<f64>, y: Var, rng: &mut RngStream) -> qface_numerics::Result<Var> {
    let w = g.constant(randn(rng, g.shape(y), 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn numerics(e: qface::Error) -> qface_numerics::NumericsError {
    match e {
        qface::Error::Numerics(n) => n,
        other => qface_numerics::NumericsError::Shape { op: "module", detail: other.to_string() },
    }
}

/// Worst relative error of one module/loss over `seeds` seeds.
pub type GradResult = (String, f64);

pub fn grad_encoder_block(seeds: u64) -> GradResult {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, Purpose::Init);
        let mut store = ParamStore::<f64>::new();
        let blk = Block::new(&mut store, &mut rng, "b", 8, 2, 2, 0).unwrap();
        jitter(&mut store, &mut rng, 0.1);
        let x = randn(&mut rng, &[2, 5, 8], 1.0);
        let keep = if seed % 2 == 1 { Some(vec![0.0, 1.25]) } else { None };
        let wseed = seed + 1000;
        let r = session_grad_check(
            &store,
            &[x],
            |s: &mut Session<f64>, v: &[Var]| {
                let (y, p) = blk.forward(s, v[0], keep.as_deref()).map_err(numerics)?;
                let mut wr = RngStream::new(wseed, Purpose::Data);
                let a = weighted(&mut s.g, y, &mut wr)?;
                let b = weighted(&mut s.g, p, &mut wr)?;
                s.g.add(a, b)
            },
            H,
            TOL,
            0,
        )
        .unwrap();
        worst = worst.max(r.max_rel_err);
    }
    ("encoder block".into(), worst)
}

pub fn grad_mff(seeds: u64) -> GradResult {
    let enc = EncoderConfig { hidden_dim: 8, heads: 2, mlp_ratio: 2, ..EncoderConfig::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, Purpose::Init);
        let mut store = ParamStore::<f64>::new();
        let mff = Mff::new(&enc, &Default::default(), &mut store, &mut rng, 0).unwrap();
        jitter(&mut store, &mut rng, 0.1);
        let maps: Vec<Tensor<f64>> = (0..3).map(|_| randn(&mut rng, &[1, 4, 8], 1.0)).collect();
        let pe = randn(&mut rng, &[4, 8], 0.5);
        let wseed = seed + 2000;
        let r = session_grad_check(
            &store,
            &maps,
            |s: &mut Session<f64>, v: &[Var]| {
                let (f, kp) = mff.fuse(s, v, &pe).map_err(numerics)?;
                let mut wr = RngStream::new(wseed, Purpose::Data);
                let a = weighted(&mut s.g, f, &mut wr)?;
                let b = weighted(&mut s.g, kp, &mut wr)?;
                s.g.add(a, b)
            },
            H,
            TOL,
            0,
        )
        .unwrap();
        worst = worst.max(r.max_rel_err);
    }
    ("fusion".into(), worst)
}

pub fn grad_decoder_block(seeds: u64) -> GradResult {
    let cfg = DecoderConfig { heads: 2, mlp_ratio: 2, ..DecoderConfig::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, Purpose::Init);
        let mut store = ParamStore::<f64>::new();
        let blk = DecoderBlock::new(&mut store, &mut rng, "d", 8, &cfg, 0).unwrap();
        jitter(&mut store, &mut rng, 0.1);
        let inputs = vec![
            randn(&mut rng, &[2, 3, 8], 1.0),
            randn(&mut rng, &[3, 8], 0.5),
            randn(&mut rng, &[2, 6, 8], 1.0),
            randn(&mut rng, &[6, 8], 0.5),
        ];
        let wseed = seed + 3000;
        let r = session_grad_check(
            &store,
            &inputs,
            |s: &mut Session<f64>, v: &[Var]| {
                let (q, p) = blk.forward(s, v[0], v[1], v[2], v[3]).map_err(numerics)?;
                let mut wr = RngStream::new(wseed, Purpose::Data);
                let a = weighted(&mut s.g, q, &mut wr)?;
                let b = weighted(&mut s.g, p, &mut wr)?;
                s.g.add(a, b)
            },
            H,
            TOL,
            0,
        )
        .unwrap();
        worst = worst.max(r.max_rel_err);
    }
    ("decoder block".into(), worst)
}

fn check_inputs(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Session<f64>, &[Var]) -> qface_numerics::Result<Var>,
) -> f64 {
    let store = ParamStore::<f64>::new();
    session_grad_check(&store, inputs, f, H, TOL, 0)
        .unwrap()
        .max_rel_err
}

/// Moves entries of `a` that sit within `gap` of `b + offset` for any offset
/// in `kinks`, so finite differences never straddle a kink.
fn away_from_kinks(a: &mut Tensor<f64>, b: &[f64], kinks: &[f64], gap: f64) {
    for (x, &y) in a.data_mut().iter_mut().zip(b) {
        for &k in kinks {
            if (*x - y - k).abs() < gap {
                *x = y + k + 2.0 * gap;
            }
        }
    }
}

pub fn grad_losses(seeds: u64) -> Vec<GradResult> {
    let mut worst = [0.0f64; 5];
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, Purpose::Init);
        let labels: Vec<usize> = (0..4).map(|_| rng.below(7)).collect();
        let z = randn(&mut rng, &[4, 7], 2.0);
        worst[0] = worst[0].max(check_inputs(&[z], |s, v| ce_loss(&mut s.g, v[0], &labels)));

        let targets: Vec<bool> = (0..24).map(|_| rng.bernoulli(0.5)).collect();
        let mask: Vec<bool> = (0..24).map(|_| rng.bernoulli(0.8)).collect();
        let z = randn(&mut rng, &[4, 6], 2.0);
        worst[1] = worst[1].max(check_inputs(&[z], |s, v| bce_loss(&mut s.g, v[0], &targets, Some(&mask))));

        let ages: Vec<f64> = (0..6).map(|_| rng.uniform_in(0.0, 100.0)).collect();
        let mut pred = Tensor::from_fn([6], |i| ages[i] + 3.0 * rng.normal());
        away_from_kinks(&mut pred, &ages, &[-1.0, 1.0], 1e-3);
        worst[2] = worst[2].max(check_inputs(&[pred], |s, v| age_loss(&mut s.g, v[0], &ages, None)));

        // Geodesic: codes whose rotation is within |cos| < 0.99 of the target.
        let mut codes = Vec::new();
        let mut tgts = Vec::new();
        while codes.len() < 18 {
            let y = RotationLabel::from_euler_zyx(rng.uniform_in(-1.0, 1.0), rng.uniform_in(-0.7, 0.7), rng.uniform_in(-1.0, 1.0));
            let c: [f64; 6] = std::array::from_fn(|_| rng.normal());
            let Ok(r) = rot6d_to_matrix(&c) else { continue };
            let cos = (0..3).map(|i| (0..3).map(|j| r.matrix()[i][j] * y.matrix()[i][j]).sum::<f64>()).sum::<f64>();
            if ((cos - 1.0) / 2.0).abs() < 0.99 {
                codes.extend_from_slice(&c);
                tgts.extend_from_slice(&y.to_col_major());
            }
        }
        let code = Tensor::new([3, 6], codes).unwrap();
        let target = Tensor::new([3, 9], tgts).unwrap();
        worst[3] = worst[3].max(check_inputs(&[code], |s, v| {
            let r = rot6d_graph(&mut s.g, v[0])?;
            let t = s.g.constant(target.clone());
            geodesic_graph(&mut s.g, r, t)
        }));

        let t = randn(&mut rng, &[2, 3, 12], 1.0);
        let mut rec = randn(&mut rng, &[2, 3, 12], 1.0);
        away_from_kinks(&mut rec, t.data(), &[0.0], 1e-3);
        worst[4] = worst[4].max(check_inputs(&[rec, t], |s, v| mim_loss(s, v[0], v[1]).map_err(numerics)));
    }
    ["cross-entropy", "binary cross-entropy", "age smoothed-L1", "geodesic", "masked L1"]
        .iter()
        .zip(worst)
        .map(|(n, w)| (n.to_string(), w))
        .collect()
}

/// Every module and loss gradient check, with the elapsed time.
pub fn all_gradchecks(seeds: u64) -> (Vec<GradResult>, f64) {
    let t = Instant::now();
    let mut r = vec![grad_encoder_block(seeds), grad_mff(seeds), grad_decoder_block(seeds)];
    r.extend(grad_losses(seeds));
    (r, t.elapsed().as_secs_f64())
}

/// Shape contract at the published layout (width reduced; token counts and
/// query layout are width-independent) plus the published width symbolically.
pub fn shape_invariants() -> Outcome {
    let full = EncoderConfig::full_scale();
    let mut problems = Vec::new();
    if full.num_tokens() != 197 || full.hidden_dim != 768 || full.fusion_layers != [4, 8, 12] {
        problems.push(format!("full-scale encoder: {} tokens, width {}", full.num_tokens(), full.hidden_dim));
    }
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig { hidden_dim: 8, heads: 2, mlp_ratio: 1, ..full };
    cfg.decoder = DecoderConfig { heads: 2, mlp_ratio: 1, ..DecoderConfig::default() };
    cfg.tasks = full_scale_suite();
    let nq = cfg.num_queries();
    if nq != 68 {
        problems.push(format!("{nq} queries"));
    }
    let mut deep = cfg.clone();
    deep.decoder.depth = 3;
    if deep.validate().is_ok() {
        problems.push("a 3-block decoder was accepted".into());
    }
    let mut store = ParamStore::<f64>::new();
    let net = Network::build(&cfg, ModelKind::Qface, &mut store, &mut RngStream::new(0, Purpose::Init)).unwrap();
    let mut s = Session::frozen(&store);
    let img = vec![0.5f32; 224 * 224];
    let p = s.g.constant(qface::encoder::batch_patches::<f64>(&[&img], &cfg.encoder).unwrap());
    let maps = net.encoder.encode(&mut s, p, None).unwrap();
    let layers: Vec<usize> = maps.iter().map(|m| m.layer_index).collect();
    let tokens: Vec<usize> = maps.iter().map(|m| s.g.shape(m.tokens)[1]).collect();
    if layers != [4, 8, 12] || tokens != [197; 3] {
        problems.push(format!("encoder taps {layers:?} with {tokens:?} tokens"));
    }
    let fwd = net.forward(&mut s, p, None).unwrap();
    let blocks = fwd.cross_attention.len();
    let attn = s.g.shape(fwd.cross_attention[0]).to_vec();
    let logits = s.g.shape(fwd.logits).to_vec();
    if blocks != 2 || attn[2..] != [68, 591] || logits != [1, 68] {
        problems.push(format!("{blocks} decoder blocks, attention {attn:?}, logits {logits:?}"));
    }
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            "197-token maps at blocks 4/8/12, 591 fused tokens, 2 decoder blocks, 68 queries".to_string()
        } else {
            problems.join("; ")
        },
    )
}

/// Proper rotation from the QR factorisation of a Gaussian matrix.
pub fn qr_rotation(rng: &mut RngStream) -> [[f64; 3]; 3] {
    let m = nalgebra::Matrix3::from_fn(|_, _| rng.normal());
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..3 {
        if r[(j, j)] < 0.0 {
            q.set_column(j, &(-q.column(j)));
        }
    }
    if q.determinant() < 0.0 {
        q.set_column(2, &(-q.column(2)));
    }
    std::array::from_fn(|i| std::array::from_fn(|j| q[(i, j)]))
}

pub fn rotation_suite() -> Outcome {
    let mut rng = RngStream::new(11, Purpose::Data);
    let mut round_trip: f64 = 0.0;
    let mut invariant: f64 = 0.0;
    let mut self_dist: f64 = 0.0;
    for _ in 0..100 {
        let q = qr_rotation(&mut rng);
        let r = RotationLabel::new(q).unwrap();
        let back = rot6d_to_matrix(&r.to_6d()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                round_trip = round_trip.max((back.matrix()[i][j] - q[i][j]).abs());
            }
        }
        self_dist = self_dist.max(geodesic(&r, &r));
        let code: [f64; 6] = std::array::from_fn(|_| rng.normal());
        for out in [rot6d_to_matrix(&code).unwrap(), perturb_rotation(&r, &mut rng, 0.01).unwrap()] {
            invariant = invariant.max(orthonormality_error(out.matrix())).max((det(out.matrix()) - 1.0).abs());
        }
    }
    let flip = RotationLabel::new([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    let pi_err = (geodesic(&RotationLabel::identity(), &flip) - std::f64::consts::PI).abs();
    // The training loss on identical rotations stays within its clamp margin.
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new([1, 9], RotationLabel::identity().to_col_major().to_vec()).unwrap());
    let l = geodesic_graph(&mut g, a, a).unwrap();
    let loss_self = g.value(l).item();
    let r0 = RotationLabel::from_euler_zyx(0.3, -0.2, 0.4);
    let zero_noise = perturb_rotation(&r0, &mut rng, 0.0).unwrap() == r0;
    let pass = round_trip < 1e-6
        && self_dist < 1e-3
        && loss_self < 1e-3
        && pi_err < 1e-6
        && zero_noise
        && invariant < 1e-6
        && GEODESIC_EPS == 1e-7;
    Outcome::new(
        pass,
        format!(
            "round trip {round_trip:.1e}, geodesic(R,R) {self_dist:.1e} (loss {loss_self:.1e}), |g(I,flip)-pi| {pi_err:.1e}, std 0 identity {zero_noise}, invariants {invariant:.1e}"
        ),
    )
}

mod brute {
    /// CCC through pairwise differences: cov = sum_ij (x_i-x_j)(y_i-y_j) / 2n^2.
    pub fn ccc(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                cov += (x[i] - x[j]) * (y[i] - y[j]);
                vx += (x[i] - x[j]) * (x[i] - x[j]);
                vy += (y[i] - y[j]) * (y[i] - y[j]);
            }
        }
        let s = 2.0 * n * n;
        let (cov, vx, vy) = (cov / s, vx / s, vy / s);
        let dm = x.iter().sum::<f64>() / n - y.iter().sum::<f64>() / n;
        let den = vx + vy + dm * dm;
        2.0 * cov / den
    }

    fn f1_of(pred: &[bool], truth: &[bool]) -> f64 {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
        let pp = pred.iter().filter(|p| **p).count() as f64;
        let ap = truth.iter().filter(|t| **t).count() as f64;
        let prec = if pp > 0.0 { tp / pp } else { 0.0 };
        let rec = if ap > 0.0 { tp / ap } else { 0.0 };
        if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        }
    }

    pub fn class_f1(p: &[usize], y: &[usize], k: usize) -> Vec<f64> {
        (0..k)
            .map(|c| {
                let pb: Vec<bool> = p.iter().map(|&v| v == c).collect();
                let yb: Vec<bool> = y.iter().map(|&v| v == c).collect();
                f1_of(&pb, &yb)
            })
            .collect()
    }

    pub fn label_f1(p: &[bool], y: &[bool], k: usize) -> Vec<f64> {
        (0..k)
            .map(|c| {
                let pc: Vec<bool> = p.iter().skip(c).step_by(k).copied().collect();
                let yc: Vec<bool> = y.iter().skip(c).step_by(k).copied().collect();
                f1_of(&pc, &yc)
            })
            .collect()
    }

    pub fn mae(p: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - y[i]).abs();
        }
        s / p.len() as f64
    }

    pub fn top1(p: &[usize], y: &[usize]) -> f64 {
        let mut hits = 0.0;
        for i in 0..p.len() {
            if p[i] == y[i] {
                hits += 1.0;
            }
        }
        hits / p.len() as f64
    }
}

/// Library metrics against brute-force versions on 50 random instances, plus
/// the published AVG.
pub fn metric_oracles() -> Outcome {
    let mut rng = RngStream::new(5, Purpose::Data);
    let mut worst: f64 = 0.0;
    let mut diff = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for _ in 0..50 {
        let n = 2 + rng.below(19);
        let k = 2 + rng.below(4);
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| 0.5 * rng.normal() + 0.2).collect();
        diff(metrics::ccc(&x, &y).unwrap(), brute::ccc(&x, &y));
        diff(metrics::mae(&x, &y).unwrap(), brute::mae(&x, &y));
        let p: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let l: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        diff(metrics::top1(&p, &l).unwrap(), brute::top1(&p, &l));
        let bf = brute::class_f1(&p, &l, k);
        for (a, b) in metrics::per_class_f1(&p, &l, k).unwrap().iter().zip(&bf) {
            diff(*a, *b);
        }
        diff(metrics::macro_f1(&p, &l, k).unwrap(), bf.iter().sum::<f64>() / k as f64);
        let pb: Vec<bool> = (0..n * k).map(|_| rng.bernoulli(0.5)).collect();
        let yb: Vec<bool> = (0..n * k).map(|_| rng.bernoulli(0.4)).collect();
        for (a, b) in metrics::per_label_f1(&pb, &yb, k).unwrap().iter().zip(brute::label_f1(&pb, &yb, k)) {
            diff(*a, b);
        }
    }
    let avg = metrics::avg_score(&[0.7358, 0.7036, 0.8796, 0.9353, 0.9641]).unwrap();
    let avg_ok = (avg * 100.0).round() / 100.0 == 84.37;
    Outcome::new(worst <= 1e-12 && avg_ok, format!("max deviation {worst:.1e} over 50 instances, AVG {avg:.3}"))
}

/// Max |grad(sum of weighted losses) - sum of per-task grads| in f64.
pub fn accumulation_gap(kind: ModelKind) -> f64 {
    let mut cfg = tiny_config();
    for (t, w) in cfg.tasks.iter_mut().zip([1.0, 0.5, 2.0, 0.25, 1.5]) {
        t.loss_weight = w;
    }
    let mut store = ParamStore::<f64>::new();
    let net = Network::build(&cfg, kind, &mut store, &mut RngStream::new(3, Purpose::Init)).unwrap();
    jitter(&mut store, &mut RngStream::new(4, Purpose::Init), 0.05);
    let (tr, _) = build_split(20, 0, 9, cfg.encoder.image_size);
    let data = Dataset::from_manifest(&tr);
    let mut rng = RngStream::new(8, Purpose::Data);
    let batches: Vec<Vec<usize>> = cfg.tasks.iter().map(|_| rng.sample_indices(data.len(), 4)).collect();
    let all: Vec<usize> = (0..cfg.tasks.len()).collect();
    let joint = weighted_loss_grads(&net, &store, &data, &batches, &all, None).unwrap();
    let mut sum = qface_numerics::Grads::zeros_like(&store);
    for t in all {
        sum.add_assign(&weighted_loss_grads(&net, &store, &data, &batches, &[t], None).unwrap().grads);
    }
    joint.grads.max_abs_diff(&sum)
}
