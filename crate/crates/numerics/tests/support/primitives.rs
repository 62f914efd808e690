//! Finite-difference checks for every differentiable primitive, shared by the
//! numerics tests and the acceptance target.
#![allow(dead_code)]

use qface_numerics::gradcheck::grad_check;
use qface_numerics::{Graph, Purpose, Result, RngStream, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

/// Worst relative error of one named check over all seeds.
pub type Check = (String, f64);

fn rand_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Contracts an op's output against a fixed random weighting so every output
/// entry contributes a distinct amount to the scalar.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = RngStream::new(seed ^ 0xABCD, Purpose::Data);
    let w = g.constant(rand_tensor(&mut r, g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn finite_or_inf(e: f64) -> f64 {
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

fn check_op(
    out: &mut Vec<Check>,
    name: &str,
    shapes: impl Fn(&mut RngStream) -> Vec<Vec<usize>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, Purpose::Init);
        let inputs: Vec<Tensor<f64>> = shapes(&mut rng)
            .iter()
            .map(|s| rand_tensor(&mut rng, s))
            .collect();
        let report = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let y = f(g, v)?;
                weighted_sum(g, y, seed)
            },
            &inputs,
            H,
            TOL,
        )
        .unwrap();
        worst = worst.max(finite_or_inf(report.max_rel_err));
    }
    out.push((name.to_string(), worst));
}

pub fn matmul_shared_and_batched(out: &mut Vec<Check>) {
    check_op(
        out,
        "matmul",
        |r| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
            vec![vec![m, k], vec![k, n]]
        },
        |g, v| g.matmul(v[0], v[1]),
    );
    check_op(
        out,
        "matmul shared over batch",
        |r| {
            let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            vec![vec![b, m, k], vec![k, n]]
        },
        |g, v| g.matmul(v[0], v[1]),
    );
    check_op(
        out,
        "batched matmul",
        |r| {
            let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            vec![vec![b, 2, m, k], vec![b, 2, k, n]]
        },
        |g, v| g.matmul(v[0], v[1]),
    );
}

pub fn softmax_and_log_softmax_every_axis(out: &mut Vec<Check>) {
    for axis in 0..3 {
        check_op(
            out,
            "softmax",
            |r| vec![vec![dim(r, 1, 3), dim(r, 1, 4), dim(r, 2, 5)]],
            move |g, v| g.softmax(v[0], axis),
        );
        check_op(
            out,
            "log_softmax",
            |r| vec![vec![dim(r, 1, 3), dim(r, 1, 4), dim(r, 2, 5)]],
            move |g, v| g.log_softmax(v[0], axis),
        );
    }
}

pub fn layer_norm_gain_bias(out: &mut Vec<Check>) {
    check_op(
        out,
        "layer_norm",
        |r| {
            let d = dim(r, 2, 6);
            vec![vec![dim(r, 1, 4), d], vec![d], vec![d]]
        },
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
}

pub fn pointwise_ops(out: &mut Vec<Check>) {
    let shape = |r: &mut RngStream| vec![vec![dim(r, 1, 4), dim(r, 1, 5)]];
    check_op(out, "gelu", shape, |g, v| Ok(g.gelu(v[0])));
    check_op(out, "softplus", shape, |g, v| Ok(g.softplus(v[0])));
    check_op(out, "scale", shape, |g, v| Ok(g.scale(v[0], -1.7)));
    check_op(out, "affine", shape, |g, v| g.affine(v[0], 0.5, -0.5));
    let pair = |r: &mut RngStream| {
        let s = vec![dim(r, 1, 4), dim(r, 1, 5)];
        vec![s.clone(), s]
    };
    check_op(out, "add", pair, |g, v| g.add(v[0], v[1]));
    check_op(out, "sub", pair, |g, v| g.sub(v[0], v[1]));
    check_op(out, "mul", pair, |g, v| g.mul(v[0], v[1]));
}

pub fn broadcasting_ops(out: &mut Vec<Check>) {
    check_op(
        out,
        "add_bcast",
        |r| {
            let (a, b, c) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            vec![vec![a, b, c], vec![b, c]]
        },
        |g, v| g.add_bcast(v[0], v[1]),
    );
    check_op(
        out,
        "mul_bcast",
        |r| {
            let (a, c) = (dim(r, 1, 3), dim(r, 1, 4));
            vec![vec![a, c], vec![c]]
        },
        |g, v| g.mul_bcast(v[0], v[1]),
    );
    check_op(
        out,
        "mul_col",
        |r| {
            let (a, c) = (dim(r, 1, 4), dim(r, 1, 4));
            vec![vec![a, c], vec![a, 1]]
        },
        |g, v| g.mul_col(v[0], v[1]),
    );
    check_op(
        out,
        "linear",
        |r| {
            let (b, i, o) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
            vec![vec![b, i], vec![i, o], vec![o]]
        },
        |g, v| g.linear(v[0], v[1], v[2]),
    );
}

pub fn layout_ops(out: &mut Vec<Check>) {
    check_op(
        out,
        "concat",
        |r| {
            let (a, c) = (dim(r, 1, 3), dim(r, 1, 3));
            vec![
                vec![a, dim(r, 1, 3), c],
                vec![a, dim(r, 1, 3), c],
                vec![a, dim(r, 1, 3), c],
            ]
        },
        |g, v| g.concat(v, 1),
    );
    check_op(
        out,
        "slice",
        |r| vec![vec![dim(r, 1, 3), 5, dim(r, 1, 3)]],
        |g, v| g.slice(v[0], 1, 1..4),
    );
    check_op(
        out,
        "reshape",
        |r| vec![vec![2, dim(r, 1, 3), 3]],
        |g, v| {
            let n = g.value(v[0]).len();
            g.reshape(v[0], vec![n / 6, 6])
        },
    );
    check_op(
        out,
        "permute",
        |r| vec![vec![dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), 2]],
        |g, v| g.permute(v[0], &[0, 2, 1, 3]),
    );
    check_op(
        out,
        "gather_rows",
        |r| vec![vec![4, dim(r, 1, 3)]],
        |g, v| g.gather_rows(v[0], vec![3, 0, 3, 1]),
    );
    check_op(
        out,
        "repeat",
        |r| vec![vec![dim(r, 1, 3), 2]],
        |g, v| Ok(g.repeat(v[0], 3)),
    );
    check_op(
        out,
        "scale_batch",
        |_| vec![vec![3, 2, 2]],
        |g, v| g.scale_batch(v[0], vec![0.0, 1.25, 2.0]),
    );
    check_op(
        out,
        "pick",
        |r| vec![vec![3, dim(r, 3, 5)]],
        |g, v| g.pick(v[0], vec![2, 0, 1]),
    );
}

pub fn reductions_and_losses(out: &mut Vec<Check>) {
    for axis in 0..2 {
        check_op(
            out,
            "mean",
            |r| vec![vec![dim(r, 1, 4), dim(r, 1, 4)]],
            move |g, v| g.mean(v[0], axis),
        );
        check_op(
            out,
            "sum",
            |r| vec![vec![dim(r, 1, 4), dim(r, 1, 4)]],
            move |g, v| g.sum(v[0], axis),
        );
    }
    let pair = |r: &mut RngStream| {
        let s = vec![dim(r, 1, 4), dim(r, 1, 5)];
        vec![s.clone(), s]
    };
    check_op(out, "l1", pair, |g, v| g.l1(v[0], v[1]));
    check_op(out, "smooth_l1", pair, |g, v| g.smooth_l1(v[0], v[1], 1.0));
    check_op(
        out,
        "mean_all",
        |r| vec![vec![dim(r, 1, 4), 3]],
        |g, v| Ok(g.mean_all(v[0])),
    );
}

pub fn geometric_ops(out: &mut Vec<Check>) {
    check_op(
        out,
        "normalize",
        |r| vec![vec![dim(r, 1, 4), 3]],
        |g, v| g.normalize(v[0]),
    );
    check_op(
        out,
        "cross",
        |r| {
            let n = dim(r, 1, 4);
            vec![vec![n, 3], vec![n, 3]]
        },
        |g, v| g.cross(v[0], v[1]),
    );
    // acos inside (-1, 1): squash through a scaled softsign-free route.
    check_op(
        out,
        "acos",
        |r| vec![vec![dim(r, 1, 5)]],
        |g, v| {
            let s = g.scale(v[0], 0.1);
            let c = g.clamp(s, -0.9, 0.9);
            Ok(g.acos(c))
        },
    );
}

pub fn softmax_matmul_composite(out: &mut Vec<Check>) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, Purpose::Init);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let r = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.matmul(v[0], v[1])?;
                let p = g.softmax(y, 1)?;
                weighted_sum(g, p, seed)
            },
            &[a, b],
            H,
            TOL,
        )
        .unwrap();
        worst = worst.max(finite_or_inf(r.max_rel_err));
    }
    out.push(("softmax(matmul)".into(), worst));
}

pub fn three_layer_mlp(out: &mut Vec<Check>) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, Purpose::Init);
        let dims = [5, 7, 6, 3];
        let mut inputs = vec![rand_tensor(&mut rng, &[4, dims[0]])];
        for w in dims.windows(2) {
            inputs.push(rand_tensor(&mut rng, &[w[0], w[1]]).map(|v| v * 0.5));
            inputs.push(rand_tensor(&mut rng, &[w[1]]));
        }
        let r = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let mut h = v[0];
                for l in 0..3 {
                    h = g.linear(h, v[1 + 2 * l], v[2 + 2 * l])?;
                    if l < 2 {
                        h = g.gelu(h);
                    }
                }
                let p = g.log_softmax(h, 1)?;
                let picked = g.pick(p, vec![0, 2, 1, 1])?;
                Ok(g.mean_all(picked))
            },
            &inputs,
            H,
            TOL,
        )
        .unwrap();
        worst = worst.max(finite_or_inf(r.max_rel_err));
    }
    out.push(("three-layer mlp".into(), worst));
}

/// Every primitive and composite check.
pub fn all() -> Vec<Check> {
    let mut out = Vec::new();
    for group in GROUPS {
        group(&mut out);
    }
    out
}

pub const GROUPS: [fn(&mut Vec<Check>); 10] = [
    matmul_shared_and_batched,
    softmax_and_log_softmax_every_axis,
    layer_norm_gain_bias,
    pointwise_ops,
    broadcasting_ops,
    layout_ops,
    reductions_and_losses,
    geometric_ops,
    softmax_matmul_composite,
    three_layer_mlp,
];
