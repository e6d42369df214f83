//! Cross-check identities: path log-likelihood ratios, relative entropy of
//! the tilted chain, primal values, and tracking-error summaries.
//!
//! The exhaustive-path oracles enumerate `|X|^(K+1)` trajectories and are
//! gated to at most 10^6 of them; they exist for tests and small instances
//! only.

use ndarray::Array1;

use crate::basis::Basis;
use crate::dual::{
    backward_recursion, evaluate, policy_from_multipliers, KlqProblem, Solution,
};
use crate::model::{kl_rate, propagate_marginals, KlqModel, PolicySequence};
use crate::{Error, Result};

/// Largest number of paths the exhaustive oracles will enumerate.
pub const MAX_ENUMERATED_PATHS: f64 = 1e6;

/// A joint-space trajectory with its log-likelihood ratio `log(p^lambda / p^0)`
/// and the per-step martingale increments `Delta_k`.
#[derive(Debug, Clone)]
pub struct PathLikelihood {
    /// `(s_k, u_k)` for `k = 0..=K`.
    pub path: Vec<(usize, usize)>,
    pub llr: f64,
    /// `Delta_k = G^lambda_k(x_{k-1}) - g^lambda_k(s_k)` for `k = 1..=K`;
    /// mean zero under the tilted chain.
    pub deltas: Vec<f64>,
}

fn check_path(model: &KlqModel, path: &[(usize, usize)]) -> Result<()> {
    if path.len() != model.horizon() + 1 {
        return Err(Error::Dimension(format!(
            "path has {} points, expected K+1 = {}",
            path.len(),
            model.horizon() + 1
        )));
    }
    for &(s, u) in path {
        if s >= model.num_states() || u >= model.num_inputs() {
            return Err(Error::IndexRange(format!("path entry ({s}, {u}) outside X")));
        }
    }
    // reject paths outside the support of the nominal chain
    let (s0, u0) = path[0];
    if model.initial_marginal()[[s0, u0]] == 0.0 {
        return Err(Error::AbsoluteContinuity(
            "path starts outside the initial marginal's support".into(),
        ));
    }
    for k in 1..path.len() {
        let (sp, up) = path[k - 1];
        let (s, u) = path[k];
        if model.kernel(up)[[sp, s]] == 0.0 || model.nominal_policy(k)[[s, u]] == 0.0 {
            return Err(Error::AbsoluteContinuity(format!(
                "path leaves the nominal support at step {k}"
            )));
        }
    }
    Ok(())
}

/// Closed-form log-likelihood ratio along a path:
/// `L = sum_k ( Delta_k + lc_k Y(x_k) ) - G^lambda_1(x_0)`.
pub fn log_likelihood_ratio(
    model: &KlqModel,
    basis: &Basis,
    lambda: &Array1<f64>,
    g: &[Array1<f64>],
    path: &[(usize, usize)],
) -> Result<PathLikelihood> {
    check_path(model, path)?;
    if g.len() != model.horizon() + 1 {
        return Err(Error::Dimension("g must have K+1 rows".into()));
    }
    let lc = basis.expand(lambda)?;
    let y = model.output();
    let mut deltas = Vec::with_capacity(model.horizon());
    let mut llr = -model.expect_next(path[0].1, path[0].0, &g[0]);
    for k in 1..=model.horizon() {
        let (sp, up) = path[k - 1];
        let (s, u) = path[k];
        let delta = model.expect_next(up, sp, &g[k - 1]) - g[k - 1][s];
        deltas.push(delta);
        llr += delta + lc[k - 1] * y[[s, u]];
    }
    Ok(PathLikelihood {
        path: path.to_vec(),
        llr,
        deltas,
    })
}

/// Chain-rule log-likelihood ratio
/// `sum_k log( phi_k(u_k|s_k) / phi0_k(u_k|s_k) )` for a controlled policy.
pub fn chain_rule_llr(
    model: &KlqModel,
    phi: &PolicySequence,
    path: &[(usize, usize)],
) -> Result<f64> {
    check_path(model, path)?;
    let mut acc = 0.0;
    for k in 1..=model.horizon() {
        let (s, u) = path[k];
        let num = phi.at(k)[[s, u]];
        if num == 0.0 {
            return Err(Error::AbsoluteContinuity(format!(
                "controlled policy has zero mass on the path at step {k}"
            )));
        }
        acc += (num / model.nominal_policy(k)[[s, u]]).ln();
    }
    Ok(acc)
}

/// Relative entropy of the tilted chain against the nominal chain:
/// `D(p^lambda || p^0) = sum_k lc_k <nu^lambda_k, Y> - <nu_0, G^lambda_1>`.
///
/// Agrees with the per-step sum of [`kl_rate`](crate::model::kl_rate) values.
pub fn relative_entropy(model: &KlqModel, basis: &Basis, lambda: &Array1<f64>) -> Result<f64> {
    let lc = basis.expand(lambda)?;
    let g = backward_recursion(model, basis, lambda)?;
    let phi = policy_from_multipliers(model, basis, lambda, &g)?;
    let nu = propagate_marginals(model, &phi);
    let weighted: f64 = (1..=model.horizon())
        .map(|k| lc[k - 1] * model.mean_output(nu.at(k)))
        .sum();
    let mut inner = 0.0;
    let nu0 = model.initial_marginal();
    for s in 0..model.num_states() {
        for u in 0..model.num_inputs() {
            let m = nu0[[s, u]];
            if m != 0.0 {
                inner += m * model.expect_next(u, s, &g[0]);
            }
        }
    }
    Ok(weighted - inner)
}

/// Per-step relative entropy route: `sum_k D(nu^lambda_k, nu^0_k)`.
pub fn relative_entropy_per_step(
    model: &KlqModel,
    basis: &Basis,
    lambda: &Array1<f64>,
) -> Result<f64> {
    let g = backward_recursion(model, basis, lambda)?;
    let phi = policy_from_multipliers(model, basis, lambda, &g)?;
    let nu = propagate_marginals(model, &phi);
    let nu0 = propagate_marginals(model, &PolicySequence::nominal(model));
    let mut acc = 0.0;
    for k in 1..=model.horizon() {
        acc += kl_rate(nu.at(k), nu0.at(k))?;
    }
    Ok(acc)
}

/// Primal objective evaluated at the tilted chain for a given `lambda`.
#[derive(Debug, Clone, Copy)]
pub struct PrimalValue {
    /// Per-step quadratic penalty (the unrelaxed objective).
    pub full: f64,
    /// Penalty in transformed coordinates (matches the relaxed program and
    /// hence weak/strong duality against the reduced dual).
    pub relaxed: f64,
}

/// Evaluate both primal routes at `p^lambda`. `relaxed >= dual_value(lambda)`
/// always; equality within tolerance at the optimizer.
pub fn primal_value(problem: &KlqProblem, lambda: &Array1<f64>) -> Result<PrimalValue> {
    let model = problem.model();
    let art = evaluate(problem, lambda)?;
    let d = relative_entropy_from_artifacts(model, &art.iterate.lambda_check, &art.iterate.g, &art.output_trajectory);
    let kappa = problem.kappa();
    let full_sq: f64 = art
        .output_trajectory
        .iter()
        .zip(problem.reference())
        .map(|(y, r)| (y - r) * (y - r))
        .sum();
    let basis = problem.basis();
    let relaxed_sq: f64 = (0..basis.len())
        .map(|n| {
            let y_hat: f64 = (1..=model.horizon())
                .map(|k| basis.weight(n, k) * art.output_trajectory[k - 1])
                .sum();
            let e = y_hat - problem.r_hat()[n];
            e * e
        })
        .sum();
    Ok(PrimalValue {
        full: d + 0.5 * kappa * full_sq,
        relaxed: d + 0.5 * kappa * relaxed_sq,
    })
}

fn relative_entropy_from_artifacts(
    model: &KlqModel,
    lambda_check: &Array1<f64>,
    g: &[Array1<f64>],
    output_trajectory: &[f64],
) -> f64 {
    let weighted: f64 = (1..=model.horizon())
        .map(|k| lambda_check[k - 1] * output_trajectory[k - 1])
        .sum();
    let nu0 = model.initial_marginal();
    let mut inner = 0.0;
    for s in 0..model.num_states() {
        for u in 0..model.num_inputs() {
            let m = nu0[[s, u]];
            if m != 0.0 {
                inner += m * model.expect_next(u, s, &g[0]);
            }
        }
    }
    weighted - inner
}

/// Tracking-error summary `e_k = <nu*_k, Y> - r_k`.
#[derive(Debug, Clone)]
pub struct TrackingStats {
    pub per_step: Vec<f64>,
    pub rms: f64,
    pub max_abs: f64,
}

pub fn tracking_error(solution: &Solution, reference: &[f64]) -> Result<TrackingStats> {
    if solution.output_trajectory.len() != reference.len() {
        return Err(Error::Dimension(format!(
            "output trajectory has {} steps, reference {}",
            solution.output_trajectory.len(),
            reference.len()
        )));
    }
    let per_step: Vec<f64> = solution
        .output_trajectory
        .iter()
        .zip(reference)
        .map(|(y, r)| y - r)
        .collect();
    let rms = (per_step.iter().map(|e| e * e).sum::<f64>() / per_step.len().max(1) as f64).sqrt();
    let max_abs = per_step.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    Ok(TrackingStats {
        per_step,
        rms,
        max_abs,
    })
}

/// All joint-space paths of positive probability under a policy, with their
/// probabilities. Refuses instances with more than [`MAX_ENUMERATED_PATHS`].
pub fn enumerate_path_distribution(
    model: &KlqModel,
    phi: &PolicySequence,
) -> Result<Vec<(Vec<(usize, usize)>, f64)>> {
    let d = model.num_joint() as f64;
    if d.powi(model.horizon() as i32 + 1) > MAX_ENUMERATED_PATHS {
        return Err(Error::InvalidArgument(format!(
            "instance too large for exhaustive enumeration (> {MAX_ENUMERATED_PATHS} paths)"
        )));
    }
    let mut acc: Vec<(Vec<(usize, usize)>, f64)> = Vec::new();
    let nu0 = model.initial_marginal();
    for s in 0..model.num_states() {
        for u in 0..model.num_inputs() {
            let p = nu0[[s, u]];
            if p > 0.0 {
                acc.push((vec![(s, u)], p));
            }
        }
    }
    for k in 1..=model.horizon() {
        let table = phi.at(k);
        let mut next = Vec::with_capacity(acc.len() * model.num_joint());
        for (path, p) in &acc {
            let (sp, up) = *path.last().expect("non-empty path");
            for s in 0..model.num_states() {
                let t = model.kernel(up)[[sp, s]];
                if t == 0.0 {
                    continue;
                }
                for u in 0..model.num_inputs() {
                    let q = p * t * table[[s, u]];
                    if q > 0.0 {
                        let mut ext = path.clone();
                        ext.push((s, u));
                        next.push((ext, q));
                    }
                }
            }
        }
        acc = next;
    }
    Ok(acc)
}
