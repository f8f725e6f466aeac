//! Central finite-difference gradient checking in f64.
//!
//! The forward pass is the only machinery shared with the analytic path;
//! numerical derivatives come from re-running the closure on perturbed
//! inputs, so the two routes stay independent.

use super::{Array, Tape, Var};
use crate::rng::Rng;

/// Max relative error between analytic and central-difference gradients.
///
/// `build` must construct the graph from leaf vars (one per input) and
/// return a scalar loss.
pub fn max_rel_error<F>(inputs: &[Array<f64>], build: F, h: f64) -> f64
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let run = |arrays: &[Array<f64>]| -> (f64, Vec<Array<f64>>) {
        let tape: Tape<f64> = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a)).collect();
        let loss = build(&tape, &vars);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        (value, vars.iter().map(|&v| grads.of(v)).collect())
    };

    let (_, analytic) = run(inputs);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.data.len() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= h;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
            let an = analytic[i].data[j];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    worst
}

/// Assert analytic gradients match central differences elementwise.
pub fn check_against_fd<F>(inputs: &[Array<f64>], build: F, h: f64, tol: f64)
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let err = max_rel_error(inputs, build, h);
    assert!(err < tol, "gradient check failed: max relative error {err:.3e} >= {tol:.0e}");
}

/// One sampled-element check result for a named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Finite-difference check over a named parameter set, sampling
/// `samples_per_tensor` elements of every tensor. `loss` must be a pure
/// function of the parameters.
pub fn check_params<F>(
    params: &super::ParamSet<f64>,
    loss: F,
    analytic: &std::collections::BTreeMap<String, Array<f64>>,
    samples_per_tensor: usize,
    h: f64,
    seed: u64,
) -> Vec<ParamCheck>
where
    F: Fn(&super::ParamSet<f64>) -> f64,
{
    let mut rng = Rng::seed(seed);
    let mut out = Vec::new();
    for (name, tensor) in params.iter() {
        let grad = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        let mut worst = 0.0f64;
        let len = tensor.data.len();
        let picks: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.below(len)).collect()
        };
        for j in picks {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data[j] += h;
            let up = loss(&p);
            p.get_mut(name).unwrap().data[j] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            let an = grad.data[j];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((fd - an).abs() / denom);
        }
        out.push(ParamCheck { name: name.clone(), max_rel_error: worst });
    }
    out
}
