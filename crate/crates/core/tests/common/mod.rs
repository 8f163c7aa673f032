#![allow(dead_code)]

pub mod data;
pub mod golden;
pub mod grads;
pub mod harness;
pub mod train;

use std::collections::BTreeMap;

use lengen::numerics::{ParamStore, RngStream, Tape, Tensor, Var};

/// Largest relative error between the tape gradient and central finite
/// differences of `f` over every input entry. Relative error uses
/// `|a - n| / max(|a| + |n|, floor)` so entries with vanishing gradient do
/// not blow up.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    eps: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[i][k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Projects a tensor output to a scalar with fixed random weights so that
/// every output entry contributes to the checked gradient.
pub fn random_projection(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = RngStream::new(seed, 77);
    let w = tape.constant(Tensor::randn(shape, 1.0, &mut rng));
    let prod = tape.mul(x, w).unwrap();
    let ones = tape.constant(Tensor::full([n, 1], 1.0));
    let row = reshape_row(tape, prod, n);
    tape.matmul(row, ones).unwrap()
}

fn reshape_row(tape: &mut Tape<f64>, x: Var, n: usize) -> Var {
    let value = tape.value(x).clone().reshape([1, n]).unwrap();
    tape.custom(
        "reshape",
        value,
        &[x],
        Box::new(|_, _, g, _| vec![Some(g.to_vec())]),
    )
    .unwrap()
}

/// Gaussian noise added to every parameter so zero-initialized paths carry
/// gradient.
pub fn jitter(params: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = RngStream::new(seed, 5);
    for (_, t) in params.iter_mut() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), std, &mut rng);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
}

/// Per-parameter worst relative error of tape gradients against central
/// differences, probing at most `per_param` evenly spaced entries of each
/// tensor.
pub fn check_param_gradients(
    params: &ParamStore<f64>,
    eps: f64,
    per_param: usize,
    f: impl Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Var,
) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, true);
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let eval = |p: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape, false);
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut report = Vec::new();
    for (name, t) in params.iter() {
        let grad = tape.grad(vars[name]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let stride = (t.numel() / per_param).max(1);
        let mut worst = 0.0f64;
        for k in (0..t.numel()).step_by(stride).take(per_param) {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[k] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[k] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let rel = (grad[k] - numeric).abs() / (grad[k].abs() + numeric.abs()).max(1e-2);
            worst = worst.max(rel);
        }
        report.push((name.to_string(), worst));
    }
    report
}
