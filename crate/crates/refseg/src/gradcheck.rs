//! Central finite-difference oracle for tape adjoints.
//!
//! The oracle replays only the forward pass at perturbed inputs; it never
//! touches the reverse sweep, so agreement validates the recorded adjoints.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step mandated for the check suite.
pub const FD_EPS: f64 = 1e-3;
/// Differences below this are treated as pure roundoff.
pub const FD_ATOL: f64 = 1e-8;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Guarded relative error between an analytic and a numerical derivative.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= FD_ATOL {
        0.0
    } else {
        diff / a.abs().max(n.abs())
    }
}

/// Compares tape adjoints of `build`'s scalar output against central finite
/// differences over every element of every input.
///
/// `build` must be a pure function of the leaf values it is given.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let forward = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.scalar_value(out)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).expect("gradcheck output must be scalar");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf reachable from output").to_vec())
        .collect();

    // Numerical pass, one probe per input element.
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = work[ti].data[ei];
            work[ti].data[ei] = orig + FD_EPS;
            let up = forward(&work);
            work[ti].data[ei] = orig - FD_EPS;
            let down = forward(&work);
            work[ti].data[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            max_rel = max_rel.max(rel_err(analytic[ti][ei], numeric));
            checked += 1;
        }
    }
    GradCheckReport { max_rel_err: max_rel, checked }
}

/// Deterministic standard-normal-ish values for check instances.
pub fn filled_tensor(seed: u64, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(shape, data)
}
