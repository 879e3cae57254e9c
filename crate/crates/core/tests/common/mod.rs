//! Finite-difference oracle shared by the gradient tests. Deliberately
//! independent of the engine's backward rules: it only evaluates forward
//! passes on perturbed inputs.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitforge_core::tensor::{Graph, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Relative error, with the denominator floored at 1e-6. Some gradients are
/// identically zero (the key bias under softmax shift invariance), and for
/// those the floor turns the check into an absolute one instead of
/// comparing rounding noise with itself.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks `d/dx sum(f(x) ⊙ r)` for a fixed random projection `r` against
/// fourth-order central differences, over every element of every input.
/// Returns the maximum relative error.
pub fn check<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let projection = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        random(&g.shape(out), &mut rng(seed ^ 0x5eed))
    };
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let out = g.value(out);
        out.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&g, &vars);
    let r = g.leaf(projection.clone());
    let weighted = g.mul(out, r).expect("projection matches output");
    let loss = g.sum(weighted);
    let grads = g.backward(loss).expect("scalar loss");

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let at = |offset: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += offset;
                objective(&xs)
            };
            // fourth-order central stencil
            let numeric = (8.0 * (at(STEP) - at(-STEP)) - (at(2.0 * STEP) - at(-2.0 * STEP))) / (12.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    worst
}
