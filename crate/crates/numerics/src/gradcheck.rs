//! Central finite-difference gradient checker (float64 only).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Grads, ParamStore, Session};
use crate::tensor::Tensor;

/// Denominator floor for the relative error of near-zero gradient entries.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tol: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Reverse-mode gradients of a scalar-valued `f` at `inputs`.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

/// Central-difference estimate `(f(x+h) - f(x-h)) / 2h` per coordinate.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(f, &work)?;
            work[i].data_mut()[j] = orig;
            gi.push((plus - minus) / (2.0 * h));
        }
        out.push(gi);
    }
    Ok(out)
}

/// Compares two gradient sets entry by entry.
pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        tol,
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = relative_error(av, nv);
            report.checked += 1;
            if !(e <= report.max_rel_err) {
                report.max_rel_err = e;
                report.worst = Some((i, j, av, nv));
            }
        }
    }
    report
}

/// Checks reverse-mode gradients of `f` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, h)?;
    Ok(compare(&analytic, &numeric, tol))
}

fn stencil(f: &mut impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(x + 2.0 * h)?, f(x + h)?, f(x - h)?, f(x - 2.0 * h)?);
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

/// Checks gradients of a scalar built from a parameter store and extra
/// inputs. At most `per_tensor` evenly spaced coordinates of each parameter
/// and input are differenced; `0` checks every coordinate.
///
/// Uses the fourth-order central stencil
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, whose truncation error
/// allows a larger `h` and so less cancellation noise on deep compositions.
pub fn session_grad_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    tol: f64,
    per_tensor: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let run = |st: &ParamStore<f64>,
               xs: &[Tensor<f64>],
               grad: bool|
     -> Result<(f64, Option<(Grads<f64>, Vec<Vec<f64>>)>)> {
        let mut s = Session::new(st);
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| {
                if grad {
                    s.g.input(t.clone())
                } else {
                    s.g.constant(t.clone())
                }
            })
            .collect();
        let out = f(&mut s, &vars)?;
        let v = s.g.value(out).item();
        if !grad {
            return Ok((v, None));
        }
        s.g.backward(out)?;
        let mut gr = Grads::zeros_like(st);
        s.accumulate_grads(&mut gr);
        let gi = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| {
                s.g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect();
        Ok((v, Some((gr, gi))))
    };
    let (_, g) = run(store, inputs, true)?;
    let (pg, ig) = g.expect("gradients requested");
    let coords = |n: usize| -> Vec<usize> {
        if per_tensor == 0 || n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor)
                .map(|k| k * n / per_tensor + (n / per_tensor) / 2)
                .collect()
        }
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut st = store.clone();
    for id in store.ids() {
        let n = store.value(id).len();
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for j in coords(n) {
            let orig = st.value(id).data()[j];
            let mut at = |x: f64| -> Result<f64> {
                st.get_mut(id).value.data_mut()[j] = x;
                Ok(run(&st, inputs, false)?.0)
            };
            let d = stencil(&mut at, orig, h)?;
            st.get_mut(id).value.data_mut()[j] = orig;
            a.push(pg.get(id).data()[j]);
            num.push(d);
        }
        analytic.push(a);
        numeric.push(num);
    }
    let mut xs = inputs.to_vec();
    for (i, gi) in ig.iter().enumerate() {
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for j in coords(xs[i].len()) {
            let orig = xs[i].data()[j];
            let mut at = |x: f64| -> Result<f64> {
                xs[i].data_mut()[j] = x;
                Ok(run(store, &xs, false)?.0)
            };
            let d = stencil(&mut at, orig, h)?;
            xs[i].data_mut()[j] = orig;
            a.push(gi[j]);
            num.push(d);
        }
        analytic.push(a);
        numeric.push(num);
    }
    Ok(compare(&analytic, &numeric, tol))
}
