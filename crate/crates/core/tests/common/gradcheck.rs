//! Central finite differences against tape gradients.
//!
//! The loss is built twice from the same generic code: once in `f32` on a
//! recording graph to obtain the analytic gradients, and repeatedly in `f64`
//! with single elements nudged by ±ε for the numeric estimate.

use elecrec::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use elecrec::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-5;

pub trait LossFn {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy)]
pub struct Worst {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub failures: usize,
    pub worst: Option<Worst>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Passing means `|a - n| <= max(REL_TOL * max(|a|, |n|), ABS_FLOOR)`.
pub fn within(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= (REL_TOL * analytic.abs().max(numeric.abs())).max(ABS_FLOOR)
}

fn eval<L: LossFn>(loss: &L, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = loss.build(&mut g, &vars).expect("forward");
    g.value(out).item()
}

/// Checks the gradient of every element of every input listed in `wrt`.
pub fn check<L: LossFn>(loss: &L, inputs: &[Tensor<f32>], wrt: &[usize]) -> Report {
    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), wrt.contains(&i)))
        .collect();
    let out = loss.build(&mut g, &vars).expect("forward");
    let grads = g.backward(out).expect("backward");

    let base: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let mut report = Report::default();
    for &i in wrt {
        let analytic = grads.get(vars[i]).expect("gradient for input").data().to_vec();
        for j in 0..base[i].numel() {
            let mut plus = base.clone();
            plus[i].data_mut()[j] += EPS;
            let mut minus = base.clone();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(loss, &plus) - eval(loss, &minus)) / (2.0 * EPS);
            let a = analytic[j] as f64;
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.checked += 1;
            if !within(a, numeric) {
                report.failures += 1;
            }
            if report.worst.is_none_or(|w| rel_err > w.rel_err) {
                report.worst = Some(Worst {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    abs_err,
                    rel_err,
                });
            }
        }
    }
    report
}

/// A loss over the parameters of a store.
pub trait ParamLossFn {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>) -> Result<Var>;
}

fn eval_store<L: ParamLossFn>(loss: &L, store: &ParamStore<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let out = loss.build(&mut g, store).expect("forward");
    g.value(out).item()
}

/// Checks up to `per_param` randomly chosen elements of every parameter.
/// Gradients of parameters recorded more than once are summed.
pub fn check_store<L: ParamLossFn>(loss: &L, store: &ParamStore<f32>, per_param: usize, seed: u64) -> Report {
    let mut g = Graph::<f32>::new();
    let out = loss.build(&mut g, store).expect("forward");
    let grads = g.backward(out).expect("backward");
    let mut summed = store.clone();
    summed.zero_grad();
    summed.accumulate(&grads);

    let base: ParamStore<f64> = store.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    for (pi, id) in store.ids().enumerate() {
        let analytic = summed.grad(id).expect("zeroed").to_vec();
        let n = analytic.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_param).into_vec()
        };
        for j in picks {
            let mut plus = base.clone();
            plus.value_mut(id).data_mut()[j] += EPS;
            let mut minus = base.clone();
            minus.value_mut(id).data_mut()[j] -= EPS;
            let numeric = (eval_store(loss, &plus) - eval_store(loss, &minus)) / (2.0 * EPS);
            let a = analytic[j] as f64;
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.checked += 1;
            if !within(a, numeric) {
                report.failures += 1;
            }
            if report.worst.is_none_or(|w| rel_err > w.rel_err) {
                report.worst = Some(Worst {
                    input: pi,
                    index: j,
                    analytic: a,
                    numeric,
                    abs_err,
                    rel_err,
                });
            }
        }
    }
    report
}
