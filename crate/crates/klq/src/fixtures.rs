//! Shared example models: the two-state "stay/swap" fixture used across the
//! test suite, and random instance generators for property checks.

use ndarray::{array, Array1, Array2};
use rand::Rng;

use crate::basis::{degenerate_basis, fourier_basis, Basis};
use crate::dual::KlqProblem;
use crate::model::KlqModel;

/// Two states, two inputs, horizon 2. Input 0 keeps the state, input 1
/// swaps it; the nominal policy is uniform, the output is the input, and
/// the initial marginal puts mass 1/2 on each input at state 0.
pub fn m2_model() -> KlqModel {
    let stay = array![[1.0, 0.0], [0.0, 1.0]];
    let swap = array![[0.0, 1.0], [1.0, 0.0]];
    let uniform = array![[0.5, 0.5], [0.5, 0.5]];
    let output = array![[0.0, 1.0], [0.0, 1.0]];
    let nu0 = array![[0.5, 0.5], [0.0, 0.0]];
    KlqModel::new(2, 2, 2, vec![stay, swap], vec![uniform; 3], output, nu0)
}

/// The canonical tracking problem on [`m2_model`]: degenerate basis and
/// reference `(0.7, 0.7)`.
pub fn m2_problem(kappa: f64) -> KlqProblem {
    KlqProblem::new(
        m2_model(),
        vec![0.7, 0.7],
        kappa,
        degenerate_basis(2).expect("K >= 1"),
    )
    .expect("fixture is valid")
}

fn random_pmf<R: Rng>(rng: &mut R, len: usize, floor: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len).map(|_| floor + rng.gen::<f64>()).collect();
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v /= sum;
    }
    row
}

/// Random valid model with strictly positive nominal policies (so KL rates
/// stay finite and finite differences are well behaved).
pub fn random_model<R: Rng>(
    rng: &mut R,
    num_states: usize,
    num_inputs: usize,
    horizon: usize,
) -> KlqModel {
    let kernels = (0..num_inputs)
        .map(|_| {
            let rows: Vec<f64> = (0..num_states)
                .flat_map(|_| random_pmf(rng, num_states, 0.05))
                .collect();
            Array2::from_shape_vec((num_states, num_states), rows).unwrap()
        })
        .collect();
    let policies = (0..=horizon)
        .map(|_| {
            let rows: Vec<f64> = (0..num_states)
                .flat_map(|_| random_pmf(rng, num_inputs, 0.2))
                .collect();
            Array2::from_shape_vec((num_states, num_inputs), rows).unwrap()
        })
        .collect();
    let output = Array2::from_shape_fn((num_states, num_inputs), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let nu0_flat = random_pmf(rng, num_states * num_inputs, 0.05);
    let nu0 = Array2::from_shape_vec((num_states, num_inputs), nu0_flat).unwrap();
    KlqModel::new(num_states, num_inputs, horizon, kernels, policies, output, nu0)
}

/// Random basis for a given horizon: degenerate half the time, otherwise a
/// Fourier family with a random odd size.
pub fn random_basis<R: Rng>(rng: &mut R, horizon: usize) -> Basis {
    if horizon == 1 || rng.gen_bool(0.5) {
        degenerate_basis(horizon).unwrap()
    } else {
        let max_half = (horizon - 1) / 2;
        let m = rng.gen_range(0..=max_half);
        let n = 2 * m + 1;
        let omega = rng.gen_range(0.2..2.0);
        fourier_basis(horizon, n, omega).unwrap()
    }
}

/// Random small tracking problem with dimensions bounded by the arguments.
pub fn random_problem<R: Rng>(
    rng: &mut R,
    max_states: usize,
    max_inputs: usize,
    max_horizon: usize,
) -> KlqProblem {
    let s = rng.gen_range(2..=max_states.max(2));
    let u = rng.gen_range(2..=max_inputs.max(2));
    let k = rng.gen_range(2..=max_horizon.max(2));
    let model = random_model(rng, s, u, k);
    let basis = random_basis(rng, k);
    let reference: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let kappa = rng.gen_range(0.5..5.0);
    KlqProblem::new(model, reference, kappa, basis).expect("random fixture is valid")
}

/// Random multiplier vector matched to the problem's basis size.
pub fn random_lambda<R: Rng>(rng: &mut R, problem: &KlqProblem, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(problem.basis().len(), |_| {
        (rng.gen::<f64>() * 2.0 - 1.0) * scale
    })
}
