//! Finite-population Monte Carlo: seeded fleet simulation, empirical
//! marginals, Monte Carlo gradient estimation, coupling experiments, and
//! the receding-horizon (MPC) closed loop.
//!
//! Every agent draws from its own counter-based RNG stream derived from
//! `(master seed, agent id)`, and histogram accumulation runs in a fixed
//! order, so results are reproducible regardless of how the work would be
//! scheduled.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::Basis;
use crate::dual::{
    backward_recursion, policy_from_multipliers, solve, KlqProblem, Solution, SolveOptions,
};
use crate::model::{propagate_marginals, KlqModel, MarginalSequence, PolicySequence};
use crate::{Error, Result};

/// Total-variation distance `(1/2) sum_x |a(x) - b(x)|` between joint pmfs.
pub fn tv_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    0.5 * a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
}

fn sample_pmf<R: Rng>(rng: &mut R, weights: impl Iterator<Item = f64>, len: usize) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.enumerate() {
        acc += w;
        if draw < acc {
            return i;
        }
    }
    len - 1
}

/// A population of agents on the joint space, each with its own RNG stream.
#[derive(Debug, Clone)]
pub struct FleetState {
    agent_states: Vec<(usize, usize)>,
    time_index: usize,
    seed: u64,
    rngs: Vec<ChaCha8Rng>,
}

impl FleetState {
    /// Sample `count` agents i.i.d. from the model's initial marginal.
    pub fn from_initial_marginal(model: &KlqModel, count: usize, seed: u64) -> Self {
        let nu0 = model.initial_marginal();
        let mut rngs: Vec<ChaCha8Rng> = (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                rng
            })
            .collect();
        let len = model.num_joint();
        let agent_states = rngs
            .iter_mut()
            .map(|rng| {
                let x = sample_pmf(rng, nu0.iter().copied(), len);
                (x / model.num_inputs(), x % model.num_inputs())
            })
            .collect();
        Self {
            agent_states,
            time_index: 0,
            seed,
            rngs,
        }
    }

    pub fn len(&self) -> usize {
        self.agent_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_states.is_empty()
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn agent_states(&self) -> &[(usize, usize)] {
        &self.agent_states
    }

    /// Empirical joint pmf `nu^N(x)`; agents are accumulated in index order.
    pub fn empirical_marginal(&self, model: &KlqModel) -> Array2<f64> {
        let mut hist = Array2::zeros((model.num_states(), model.num_inputs()));
        let w = 1.0 / self.agent_states.len() as f64;
        for &(s, u) in &self.agent_states {
            hist[[s, u]] += w;
        }
        hist
    }

    /// Population mean output.
    pub fn mean_output(&self, model: &KlqModel) -> f64 {
        let y = model.output();
        self.agent_states
            .iter()
            .map(|&(s, u)| y[[s, u]])
            .sum::<f64>()
            / self.agent_states.len() as f64
    }

    /// One synchronous step: each agent samples `S' ~ T_u(s, .)` and then
    /// `U' ~ table(. | S')`.
    pub fn advance(&mut self, model: &KlqModel, table: &Array2<f64>) {
        let s_n = model.num_states();
        let u_n = model.num_inputs();
        for (agent, rng) in self.agent_states.iter_mut().zip(self.rngs.iter_mut()) {
            let (s, u) = *agent;
            let s2 = sample_pmf(rng, model.kernel(u).row(s).iter().copied(), s_n);
            let u2 = sample_pmf(rng, table.row(s2).iter().copied(), u_n);
            *agent = (s2, u2);
        }
        self.time_index += 1;
    }
}

/// Fleet simulation output: empirical marginals at `k = 0..=K` and the full
/// agent trajectories.
#[derive(Debug, Clone)]
pub struct FleetSim {
    pub empirical: Vec<Array2<f64>>,
    /// `trajectories[i][k]` is agent `i`'s joint state at time `k`.
    pub trajectories: Vec<Vec<(usize, usize)>>,
}

/// Simulate `count` independent agents under a policy, deterministically in
/// the seed. Empirical marginals converge to [`propagate_marginals`] as the
/// population grows.
pub fn simulate_fleet(
    model: &KlqModel,
    phi: &PolicySequence,
    count: usize,
    seed: u64,
) -> Result<FleetSim> {
    if count == 0 {
        return Err(Error::InvalidArgument("fleet must have at least one agent".into()));
    }
    if phi.len() != model.horizon() {
        return Err(Error::Dimension(format!(
            "policy has {} steps, horizon is {}",
            phi.len(),
            model.horizon()
        )));
    }
    let mut fleet = FleetState::from_initial_marginal(model, count, seed);
    let mut empirical = vec![fleet.empirical_marginal(model)];
    let mut trajectories: Vec<Vec<(usize, usize)>> = fleet
        .agent_states()
        .iter()
        .map(|&x| {
            let mut t = Vec::with_capacity(model.horizon() + 1);
            t.push(x);
            t
        })
        .collect();
    for k in 1..=model.horizon() {
        fleet.advance(model, phi.at(k));
        empirical.push(fleet.empirical_marginal(model));
        for (t, &x) in trajectories.iter_mut().zip(fleet.agent_states()) {
            t.push(x);
        }
    }
    Ok(FleetSim {
        empirical,
        trajectories,
    })
}

/// Monte Carlo estimate of the dual gradient with per-coordinate standard
/// errors.
#[derive(Debug, Clone)]
pub struct McGradient {
    pub gradient: Array1<f64>,
    pub std_err: Array1<f64>,
    pub samples: usize,
}

/// Estimate the dual gradient by sampling trajectories under the tilted
/// policy: `d/d lambda_n ~ r_hat_n - lambda_n / kappa - mean(Y_hat_n)`.
pub fn monte_carlo_gradient(
    problem: &KlqProblem,
    lambda: &Array1<f64>,
    count: usize,
    seed: u64,
) -> Result<McGradient> {
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let model = problem.model();
    let basis = problem.basis();
    let g = backward_recursion(model, basis, lambda)?;
    let phi = policy_from_multipliers(model, basis, lambda, &g)?;
    let n = basis.len();
    let y = model.output();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut fleet = FleetState::from_initial_marginal(model, count, seed);
    // streaming accumulation of Y_hat_n per agent; no trajectory storage
    let mut per_agent = vec![vec![0.0; n]; count];
    for k in 1..=model.horizon() {
        fleet.advance(model, phi.at(k));
        for (acc, &(s, u)) in per_agent.iter_mut().zip(fleet.agent_states()) {
            let out = y[[s, u]];
            for (j, a) in acc.iter_mut().enumerate() {
                *a += basis.weight(j, k) * out;
            }
        }
    }
    for acc in &per_agent {
        for j in 0..n {
            sum[j] += acc[j];
            sum_sq[j] += acc[j] * acc[j];
        }
    }
    let count_f = count as f64;
    let mut gradient = Array1::zeros(n);
    let mut std_err = Array1::zeros(n);
    for j in 0..n {
        let mean = sum[j] / count_f;
        gradient[j] = problem.r_hat()[j] - lambda[j] / problem.kappa() - mean;
        let var = ((sum_sq[j] - count_f * mean * mean) / (count_f - 1.0).max(1.0)).max(0.0);
        std_err[j] = (var / count_f).sqrt();
    }
    Ok(McGradient {
        gradient,
        std_err,
        samples: count,
    })
}

/// One `(kappa, initial marginals)` sweep of the coupling experiment.
#[derive(Debug, Clone)]
pub struct CouplingRun {
    pub kappa: f64,
    /// Optimal marginal sequence per initial condition.
    pub marginals: Vec<MarginalSequence>,
    /// Output deviation from the base problem's nominal trajectory per step
    /// (`k = 1..=K`), per initial condition.
    pub outputs: Vec<Vec<f64>>,
    /// Max pairwise total-variation distance at `k = 0..=K`.
    pub tv_max: Vec<f64>,
    pub converged: Vec<bool>,
}

impl CouplingRun {
    /// First time index at which the max pairwise TV drops below (or
    /// touches) `threshold` and stays measurable; `None` if never.
    pub fn first_k_below(&self, threshold: f64) -> Option<usize> {
        self.tv_max.iter().position(|&tv| tv <= threshold)
    }
}

/// Solve the tracking problem once per `(initial marginal, kappa)` pair and
/// record how the optimal marginals merge over time. Every initial
/// condition tracks the base problem's reference trajectory.
pub fn coupling_experiment(
    problem: &KlqProblem,
    initial_marginals: &[Array2<f64>],
    kappas: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<CouplingRun>> {
    let base_nominal = propagate_marginals(problem.model(), &PolicySequence::nominal(problem.model()))
        .output_trajectory(problem.model());
    let mut runs = Vec::with_capacity(kappas.len());
    for &kappa in kappas {
        let mut marginals = Vec::with_capacity(initial_marginals.len());
        let mut outputs = Vec::with_capacity(initial_marginals.len());
        let mut converged = Vec::with_capacity(initial_marginals.len());
        for nu0 in initial_marginals {
            let model = problem.model().with_initial_marginal(nu0.clone());
            let sub = KlqProblem::new(
                model,
                problem.reference().to_vec(),
                kappa,
                problem.basis().clone(),
            )?;
            let sol = solve(&sub, opts)?;
            outputs.push(
                base_nominal
                    .iter()
                    .zip(&sol.output_trajectory)
                    .map(|(y0, y)| y0 - y)
                    .collect(),
            );
            converged.push(sol.converged);
            marginals.push(sol.marginals);
        }
        let horizon = problem.model().horizon();
        let mut tv_max = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            let mut worst = 0.0f64;
            for i in 0..marginals.len() {
                for j in (i + 1)..marginals.len() {
                    worst = worst.max(tv_distance(marginals[i].at(k), marginals[j].at(k)));
                }
            }
            tv_max.push(worst);
        }
        runs.push(CouplingRun {
            kappa,
            marginals,
            outputs,
            tv_max,
            converged,
        });
    }
    Ok(runs)
}

/// Where the receding-horizon loop reads the current marginal from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalSource {
    /// Raw empirical histogram of the fleet (no smoothing).
    Empirical,
    /// Exact mean-field marginal propagated alongside the fleet.
    Exact,
}

#[derive(Debug, Clone)]
pub struct MpcOptions {
    /// Optimization window length `T` in steps.
    pub window: usize,
    /// Steps of each solution actually applied, `t <= T`.
    pub step: usize,
    pub marginal_source: MarginalSource,
    pub solver: SolveOptions,
}

/// Closed-loop trace of an MPC run.
#[derive(Debug, Clone)]
pub struct MpcTrace {
    /// Absolute reference per applied step.
    pub reference: Vec<f64>,
    /// Achieved mean output per applied step (from the active marginal
    /// source).
    pub achieved: Vec<f64>,
    /// Fleet mean output per applied step.
    pub fleet_power: Vec<f64>,
    pub window_lambdas: Vec<Array1<f64>>,
    pub window_converged: Vec<bool>,
    pub window_solve_seconds: Vec<f64>,
    pub rms_error: f64,
}

/// Receding-horizon loop: estimate the current marginal, solve the KLQ
/// problem over the next window, apply the first `step` policies to the
/// fleet, advance, repeat. A window whose solve fails keeps the previous
/// policy tables (fail-soft) and records the non-convergence.
pub fn mpc_run<F>(
    model: &KlqModel,
    reference: &[f64],
    kappa: f64,
    basis_for: F,
    fleet: &mut FleetState,
    opts: &MpcOptions,
) -> Result<MpcTrace>
where
    F: Fn(usize) -> Result<Basis>,
{
    if opts.step == 0 || opts.step > opts.window {
        return Err(Error::InvalidArgument(
            "need 0 < step <= window".into(),
        ));
    }
    let total = reference.len();
    let mut exact_nu = model.initial_marginal().clone();
    let mut trace = MpcTrace {
        reference: reference.to_vec(),
        achieved: Vec::with_capacity(total),
        fleet_power: Vec::with_capacity(total),
        window_lambdas: Vec::new(),
        window_converged: Vec::new(),
        window_solve_seconds: Vec::new(),
        rms_error: 0.0,
    };
    let mut fallback: Option<PolicySequence> = None;
    let mut t0 = 0;
    while t0 < total {
        let window = opts.window.min(total - t0);
        let nu_now = match opts.marginal_source {
            MarginalSource::Empirical => fleet.empirical_marginal(model),
            MarginalSource::Exact => exact_nu.clone(),
        };
        let window_model = model.with_horizon(window).with_initial_marginal(nu_now);
        let basis = basis_for(window)?;
        let sub = KlqProblem::new(
            window_model.clone(),
            reference[t0..t0 + window].to_vec(),
            kappa,
            basis,
        )?;
        let started = Instant::now();
        let solved: Option<Solution> = match solve(&sub, &opts.solver) {
            Ok(sol) if sol.converged => Some(sol),
            Ok(sol) => {
                trace.window_lambdas.push(sol.lambda.clone());
                trace.window_converged.push(false);
                None
            }
            Err(_) => {
                trace.window_lambdas.push(Array1::zeros(0));
                trace.window_converged.push(false);
                None
            }
        };
        trace.window_solve_seconds.push(started.elapsed().as_secs_f64());
        let policies = match &solved {
            Some(sol) => {
                trace.window_lambdas.push(sol.lambda.clone());
                trace.window_converged.push(true);
                sol.policies.clone()
            }
            None => match &fallback {
                Some(prev) => prev.clone(),
                None => PolicySequence::nominal(&window_model),
            },
        };
        let apply = opts.step.min(window);
        for k in 1..=apply {
            let table = policies.at(k);
            fleet.advance(model, table);
            // exact marginal advanced with the same table
            let step_model = model.with_horizon(1).with_initial_marginal(exact_nu.clone());
            let step_phi = PolicySequence::new(vec![table.clone()]);
            exact_nu = propagate_marginals(&step_model, &step_phi).at(1).clone();
            let achieved = match opts.marginal_source {
                MarginalSource::Empirical => fleet.mean_output(model),
                MarginalSource::Exact => model.mean_output(&exact_nu),
            };
            trace.achieved.push(achieved);
            trace.fleet_power.push(fleet.mean_output(model));
        }
        fallback = Some(policies);
        t0 += apply;
    }
    let sq: f64 = trace
        .achieved
        .iter()
        .zip(reference)
        .map(|(y, r)| (y - r) * (y - r))
        .sum();
    trace.rms_error = (sq / total as f64).sqrt();
    Ok(trace)
}
