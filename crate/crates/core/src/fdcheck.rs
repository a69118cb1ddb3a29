//! Central finite-difference gradient checking, used only by test suites.
//!
//! Kept independent of the tape's backward pass: losses are re-evaluated on
//! fresh no-grad tapes with perturbed inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Maximum relative error between the tape gradient of `f` and central
/// finite differences (h = 1e-3) over every element of every leaf.
///
/// `f` must build a scalar loss from the supplied leaf vars and must be a
/// pure function of their values.
pub fn max_rel_err(leaves: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Var) -> f32 {
    let tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(&loss).expect("scalar loss");

    let h = 1e-3f32;
    let mut worst = 0.0f32;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(&vars[li]);
        for i in 0..leaf.numel() {
            let eval = |x: f32| {
                let mut data = leaf.data().to_vec();
                data[i] = x;
                let mut all: Vec<Tensor> = leaves.to_vec();
                all[li] = Tensor::new(leaf.shape().to_vec(), data).expect("same shape");
                let t = Tape::no_grad();
                let vs: Vec<Var> = all.iter().map(|x| t.leaf(x.clone())).collect();
                f(&t, &vs).item()
            };
            let x0 = leaf.data()[i];
            let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
            let a = analytic.map(|g| g.data()[i]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
