//! The KLQ dual solver.
//!
//! The tracking multipliers `lambda` enter a tilted log-sum-exp backward
//! recursion producing multipliers `g` for the dynamics constraints; the
//! reduced dual is a concave function of `lambda` alone, maximized by
//! gradient ascent with a Golden-section line search. The optimal policy is
//! an exponential tilting of the nominal policy by `(g, lambda)`.

use ndarray::{Array1, Array2};

use crate::basis::Basis;
use crate::model::{
    propagate_marginals, validate_model, KlqModel, MarginalSequence, PolicySequence,
};
use crate::{Error, Result};

/// A KLQ tracking problem: model, absolute output reference `r_k` for
/// `k = 1..=K`, quadratic penalty `kappa`, and a relaxation basis.
#[derive(Debug, Clone)]
pub struct KlqProblem {
    model: KlqModel,
    reference: Vec<f64>,
    kappa: f64,
    basis: Basis,
    r_hat: Array1<f64>,
}

impl KlqProblem {
    pub fn new(model: KlqModel, reference: Vec<f64>, kappa: f64, basis: Basis) -> Result<Self> {
        let report = validate_model(&model);
        if !report.is_valid() {
            return Err(Error::InvalidModel(report.to_string()));
        }
        if reference.len() != model.horizon() {
            return Err(Error::Dimension(format!(
                "reference has {} entries, horizon is {}",
                reference.len(),
                model.horizon()
            )));
        }
        if basis.horizon() != model.horizon() {
            return Err(Error::Dimension(format!(
                "basis horizon {} does not match model horizon {}",
                basis.horizon(),
                model.horizon()
            )));
        }
        if !(kappa > 0.0) {
            return Err(Error::InvalidArgument("kappa must be positive".into()));
        }
        let r_hat = crate::basis::transform_reference(&basis, &reference)?;
        Ok(Self {
            model,
            reference,
            kappa,
            basis,
            r_hat,
        })
    }

    pub fn model(&self) -> &KlqModel {
        &self.model
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// Transformed reference `r_hat_n = sum_k w_n(k) r_k`.
    pub fn r_hat(&self) -> &Array1<f64> {
        &self.r_hat
    }
}

/// One-step tilted log-sum-exp operator:
/// `T^lambda_k(f; s) = log sum_u phi0_k(u|s) exp( sum_{s'} T_u(s,s') f(s') + lc_k Y(s,u) )`.
///
/// Max-stabilized, so exponent clamping is never needed (clamps would
/// corrupt gradients silently).
pub fn tilt_operator(
    model: &KlqModel,
    k: usize,
    lambda_check_k: f64,
    f: &Array1<f64>,
) -> Array1<f64> {
    let phi0 = model.nominal_policy(k);
    let y = model.output();
    let mut out = Array1::zeros(model.num_states());
    let mut exponents = vec![f64::NEG_INFINITY; model.num_inputs()];
    for s in 0..model.num_states() {
        let mut m = f64::NEG_INFINITY;
        for u in 0..model.num_inputs() {
            let p = phi0[[s, u]];
            let e = if p > 0.0 {
                p.ln() + model.expect_next(u, s, f) + lambda_check_k * y[[s, u]]
            } else {
                f64::NEG_INFINITY
            };
            exponents[u] = e;
            if e > m {
                m = e;
            }
        }
        let sum: f64 = exponents
            .iter()
            .filter(|e| e.is_finite())
            .map(|e| (e - m).exp())
            .sum();
        out[s] = m + sum.ln();
    }
    out
}

/// Backward multipliers `g_k` for `k = 1..=K+1` (index `k-1`), with
/// `g_{K+1} = 0` and `g_k = T^lambda_k(g_{k+1})`.
pub fn backward_recursion(
    model: &KlqModel,
    basis: &Basis,
    lambda: &Array1<f64>,
) -> Result<Vec<Array1<f64>>> {
    let lc = basis.expand(lambda)?;
    Ok(backward_recursion_expanded(model, &lc))
}

/// Same as [`backward_recursion`] but taking the expanded multipliers
/// `lambda_check` directly (length `K`, indexed by `k-1`).
pub fn backward_recursion_expanded(model: &KlqModel, lambda_check: &Array1<f64>) -> Vec<Array1<f64>> {
    let horizon = model.horizon();
    let mut g = vec![Array1::zeros(model.num_states()); horizon + 1];
    for k in (1..=horizon).rev() {
        g[k - 1] = tilt_operator(model, k, lambda_check[k - 1], &g[k]);
    }
    g
}

/// Lift a state function onto the joint space through the kernels:
/// `G(s, u) = sum_{s'} T_u(s, s') g_k(s')`.
pub fn aggregate_g(model: &KlqModel, g_k: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((model.num_states(), model.num_inputs()));
    for s in 0..model.num_states() {
        for u in 0..model.num_inputs() {
            out[[s, u]] = model.expect_next(u, s, g_k);
        }
    }
    out
}

fn inner_nu0_g1(model: &KlqModel, g1: &Array1<f64>) -> f64 {
    let nu0 = model.initial_marginal();
    let mut acc = 0.0;
    for s in 0..model.num_states() {
        for u in 0..model.num_inputs() {
            let m = nu0[[s, u]];
            if m != 0.0 {
                acc += m * model.expect_next(u, s, g1);
            }
        }
    }
    acc
}

fn reduced_dual_from_g(problem: &KlqProblem, lambda: &Array1<f64>, g1: &Array1<f64>) -> f64 {
    let lin = lambda.dot(problem.r_hat());
    let quad = lambda.dot(lambda) / (2.0 * problem.kappa());
    lin - quad - inner_nu0_g1(problem.model(), g1)
}

/// Reduced dual `phi*(lambda) = lambda' r_hat - |lambda|^2/(2 kappa) - <nu_0, G^lambda_1>`.
pub fn dual_value(problem: &KlqProblem, lambda: &Array1<f64>) -> Result<f64> {
    let g = backward_recursion(problem.model(), problem.basis(), lambda)?;
    Ok(reduced_dual_from_g(problem, lambda, &g[0]))
}

/// Full dual functional at arbitrary `(lambda, g)`:
/// the reduced dual plus `sum_k min_s [ g_k(s) - T^lambda_k(g_{k+1}; s) ]`.
///
/// Attains its `g`-maximum at the backward-recursion fixpoint, where the
/// min terms vanish and the value equals [`dual_value`].
pub fn dual_functional_general(
    problem: &KlqProblem,
    lambda: &Array1<f64>,
    g: &[Array1<f64>],
) -> Result<f64> {
    let model = problem.model();
    let horizon = model.horizon();
    if g.len() != horizon + 1 {
        return Err(Error::Dimension(format!(
            "g has {} rows, expected K+1 = {}",
            g.len(),
            horizon + 1
        )));
    }
    if g.iter().any(|gk| gk.len() != model.num_states()) {
        return Err(Error::Dimension("g row length != |S|".into()));
    }
    if g[horizon].iter().any(|&v| v != 0.0) {
        return Err(Error::InvalidArgument("g_{K+1} must be identically zero".into()));
    }
    let lc = problem.basis().expand(lambda)?;
    let mut slack = 0.0;
    for k in 1..=horizon {
        let t = tilt_operator(model, k, lc[k - 1], &g[k]);
        let min = g[k - 1]
            .iter()
            .zip(t.iter())
            .map(|(gk, tk)| gk - tk)
            .fold(f64::INFINITY, f64::min);
        slack += min;
    }
    Ok(reduced_dual_from_g(problem, lambda, &g[0]) + slack)
}

/// Exponentially tilted policy
/// `phi_k(u|s) = phi0_k(u|s) exp( sum_{s'} T_u(s,s') g_{k+1}(s') + lc_k Y(s,u) - g_k(s) )`.
///
/// Requires `g` at the backward-recursion fixpoint so rows normalize; a row
/// off by more than 1e-6 signals an inconsistent `(lambda, g)` pair.
pub fn policy_from_multipliers(
    model: &KlqModel,
    basis: &Basis,
    lambda: &Array1<f64>,
    g: &[Array1<f64>],
) -> Result<PolicySequence> {
    let lc = basis.expand(lambda)?;
    policy_from_multipliers_expanded(model, &lc, g)
}

pub(crate) fn policy_from_multipliers_expanded(
    model: &KlqModel,
    lambda_check: &Array1<f64>,
    g: &[Array1<f64>],
) -> Result<PolicySequence> {
    let horizon = model.horizon();
    let y = model.output();
    let mut tables = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let phi0 = model.nominal_policy(k);
        let mut table = Array2::zeros((model.num_states(), model.num_inputs()));
        for s in 0..model.num_states() {
            let mut row_sum = 0.0;
            for u in 0..model.num_inputs() {
                let p = phi0[[s, u]];
                if p > 0.0 {
                    let e = model.expect_next(u, s, &g[k]) + lambda_check[k - 1] * y[[s, u]]
                        - g[k - 1][s];
                    table[[s, u]] = p * e.exp();
                }
                row_sum += table[[s, u]];
            }
            if (row_sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "tilted policy row sum {row_sum} at k={k}, s={s}: g and lambda are inconsistent"
                )));
            }
            // exact rows sum to one; dividing out the rounding residual keeps
            // propagated marginals stochastic over long horizons
            for u in 0..model.num_inputs() {
                table[[s, u]] /= row_sum;
            }
        }
        tables.push(table);
    }
    Ok(PolicySequence::new(tables))
}

/// Multipliers, backward recursion output, dual value and gradient at a
/// single `lambda`.
#[derive(Debug, Clone)]
pub struct DualIterate {
    pub lambda: Array1<f64>,
    /// Expanded multipliers `lambda_check_k`, length `K`, indexed by `k-1`.
    pub lambda_check: Array1<f64>,
    /// Backward multipliers, `K+1` state functions with the last zero.
    pub g: Vec<Array1<f64>>,
    pub value: f64,
    pub gradient: Array1<f64>,
}

pub(crate) struct EvalArtifacts {
    pub iterate: DualIterate,
    pub policies: PolicySequence,
    pub marginals: MarginalSequence,
    /// `<nu_k, Y>` for `k = 1..=K`.
    pub output_trajectory: Vec<f64>,
}

pub(crate) fn evaluate(problem: &KlqProblem, lambda: &Array1<f64>) -> Result<EvalArtifacts> {
    let model = problem.model();
    let basis = problem.basis();
    let lc = basis.expand(lambda)?;
    let g = backward_recursion_expanded(model, &lc);
    let value = reduced_dual_from_g(problem, lambda, &g[0]);
    let policies = policy_from_multipliers_expanded(model, &lc, &g)?;
    let marginals = propagate_marginals(model, &policies);
    let output_trajectory = marginals.output_trajectory(model);
    let mut gradient = Array1::zeros(basis.len());
    for n in 0..basis.len() {
        let weighted: f64 = (1..=model.horizon())
            .map(|k| basis.weight(n, k) * output_trajectory[k - 1])
            .sum();
        gradient[n] = problem.r_hat()[n] - lambda[n] / problem.kappa() - weighted;
    }
    Ok(EvalArtifacts {
        iterate: DualIterate {
            lambda: lambda.clone(),
            lambda_check: lc,
            g,
            value,
            gradient,
        },
        policies,
        marginals,
        output_trajectory,
    })
}

impl DualIterate {
    /// Evaluate the dual value and exact gradient at `lambda`.
    pub fn evaluate(problem: &KlqProblem, lambda: &Array1<f64>) -> Result<Self> {
        Ok(crate::dual::evaluate(problem, lambda)?.iterate)
    }
}

/// Exact dual gradient
/// `d/d lambda_n = r_hat_n - lambda_n / kappa - sum_k w_n(k) <nu^lambda_k, Y>`.
pub fn dual_gradient(problem: &KlqProblem, lambda: &Array1<f64>) -> Result<Array1<f64>> {
    Ok(evaluate(problem, lambda)?.iterate.gradient)
}

/// Golden-section search for the maximizer of a unimodal `f` on `[lo, hi]`.
/// For monotone `f` the appropriate endpoint is returned within `tol`.
pub fn golden_section_search<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("invalid interval [{lo}, {hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    Ok(0.5 * (a + b))
}

/// Ascent direction rule.
///
/// Plain gradient ascent is the default. The quasi-Newton direction exists
/// for stiff instances (large `kappa` near output saturation), where the
/// dual's curvature ranges over many orders of magnitude across directions
/// and steepest ascent stalls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AscentMethod {
    Gradient,
    /// Limited-memory BFGS direction with the given history length.
    Lbfgs { memory: usize },
}

/// Solver knobs. Defaults: gradient ascent, `max_iters = 500`,
/// `grad_tol = 1e-8 * (1 + |r_hat|_inf)`, `line_search_tol = 1e-10`
/// (relative to the bracket), `bracket_growth = 2`.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub method: AscentMethod,
    pub max_iters: usize,
    /// Absolute sup-norm gradient tolerance; `None` uses the default scale.
    pub grad_tol: Option<f64>,
    pub line_search_tol: f64,
    pub bracket_growth: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            method: AscentMethod::Gradient,
            max_iters: 500,
            grad_tol: None,
            line_search_tol: 1e-10,
            bracket_growth: 2.0,
        }
    }
}

impl SolveOptions {
    /// Quasi-Newton preset for stiff instances.
    pub fn quasi_newton() -> Self {
        Self {
            method: AscentMethod::Lbfgs { memory: 20 },
            max_iters: 2000,
            ..Self::default()
        }
    }
}

impl SolveOptions {
    pub fn resolved_grad_tol(&self, problem: &KlqProblem) -> f64 {
        self.grad_tol.unwrap_or_else(|| {
            let r_inf = problem.r_hat().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            1e-8 * (1.0 + r_inf)
        })
    }
}

/// Solver output: optimal multipliers, tilted policies and marginals, and
/// the dual/primal bookkeeping.
#[derive(Debug, Clone)]
pub struct Solution {
    pub lambda: Array1<f64>,
    pub lambda_check: Array1<f64>,
    pub g: Vec<Array1<f64>>,
    pub policies: PolicySequence,
    pub marginals: MarginalSequence,
    pub dual_value: f64,
    /// Relaxed primal value (penalty in transformed coordinates).
    pub primal_value: f64,
    /// Primal value with the per-step quadratic penalty.
    pub primal_full: f64,
    pub relative_entropy: f64,
    /// `primal_value - dual_value`.
    pub duality_gap: f64,
    /// Minimizing tracking slack `gamma_n = -lambda_n / kappa`; recorded for
    /// completeness, unused downstream.
    pub gamma: Array1<f64>,
    /// `<nu_k, Y>` for `k = 1..=K`.
    pub output_trajectory: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

fn sup_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Limited-memory curvature pairs for the quasi-Newton direction.
struct LbfgsHistory {
    memory: usize,
    /// `(delta_lambda, -delta_gradient, 1 / <y, s>)`, oldest first.
    pairs: Vec<(Array1<f64>, Array1<f64>, f64)>,
}

impl LbfgsHistory {
    fn new(memory: usize) -> Self {
        Self {
            memory: memory.max(1),
            pairs: Vec::new(),
        }
    }

    fn push(&mut self, s: Array1<f64>, grad_prev: &Array1<f64>, grad_new: &Array1<f64>) {
        // maximizing a concave function: y = -(g_new - g_prev), <y, s> > 0
        let y = grad_prev - grad_new;
        let ys = y.dot(&s);
        if !(ys > 0.0) || !ys.is_finite() {
            self.pairs.clear();
            return;
        }
        if self.pairs.len() == self.memory {
            self.pairs.remove(0);
        }
        self.pairs.push((s, y, 1.0 / ys));
    }

    /// Two-loop recursion: approximate inverse-Hessian action on the
    /// ascent gradient. Falls back to the gradient itself when empty.
    fn direction(&self, gradient: &Array1<f64>) -> Array1<f64> {
        if self.pairs.is_empty() {
            return gradient.clone();
        }
        let mut q = gradient.clone();
        let mut alphas = vec![0.0; self.pairs.len()];
        for (i, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            let a = rho * s.dot(&q);
            alphas[i] = a;
            q = &q - &(a * y);
        }
        let (s_last, y_last, _) = self.pairs.last().expect("non-empty");
        q *= s_last.dot(y_last) / y_last.dot(y_last);
        for (i, (s, y, rho)) in self.pairs.iter().enumerate() {
            let b = rho * y.dot(&q);
            q = &q + &((alphas[i] - b) * s);
        }
        q
    }
}

/// Maximize the reduced dual by ascent with a Golden-section line search
/// along each direction (gradient by default, quasi-Newton on request).
/// Deterministic: always starts at `lambda = 0` (dual value 0, policy
/// nominal).
pub fn solve(problem: &KlqProblem, opts: &SolveOptions) -> Result<Solution> {
    let grad_tol = opts.resolved_grad_tol(problem);
    let mut lambda = Array1::zeros(problem.basis().len());
    let mut artifacts = evaluate(problem, &lambda)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut history = match opts.method {
        AscentMethod::Gradient => None,
        AscentMethod::Lbfgs { memory } => Some(LbfgsHistory::new(memory)),
    };

    for _ in 0..opts.max_iters {
        let it = &artifacts.iterate;
        if !it.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "dual value {} at iteration {iterations}",
                it.value
            )));
        }
        if sup_norm(&it.gradient) <= grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut dir = match &history {
            Some(h) => h.direction(&it.gradient),
            None => it.gradient.clone(),
        };
        if !(dir.dot(&it.gradient) > 0.0) || dir.iter().any(|v| !v.is_finite()) {
            // not an ascent direction; restart from steepest ascent
            if let Some(h) = &mut history {
                h.pairs.clear();
            }
            dir = it.gradient.clone();
        }
        let grad_prev = it.gradient.clone();
        let f0 = it.value;
        let mut line = |t: f64| -> f64 {
            let trial = &lambda + &(t * &dir);
            dual_value(problem, &trial).unwrap_or(f64::NEG_INFINITY)
        };

        // Bracket the ray maximum: start at the direction's natural scale,
        // grow until the value drops, or shrink when the start already
        // overshoots. The dual is concave along the ray, so [0, hi]
        // brackets the maximizer as soon as f(hi) <= max(f0, f(hi/growth)).
        let growth = opts.bracket_growth;
        let mut hi = match &history {
            // quasi-Newton directions carry their own scale
            Some(h) if !h.pairs.is_empty() => 1.0,
            _ => 1.0 / problem.kappa(),
        };
        let mut f_hi = line(hi);
        if f_hi > f0 {
            let mut prev = f_hi;
            for _ in 0..200 {
                let cand = hi * growth;
                let f_cand = line(cand);
                hi = cand;
                if f_cand <= prev {
                    break;
                }
                prev = f_cand;
            }
        } else {
            for _ in 0..200 {
                let cand = hi / growth;
                let f_cand = line(cand);
                if f_cand <= f_hi || cand < 1e-300 {
                    break;
                }
                hi = cand;
                f_hi = f_cand;
            }
        }
        let tol = (opts.line_search_tol * hi).max(f64::MIN_POSITIVE);
        let step = golden_section_search(&mut line, 0.0, hi, tol)?;
        let delta = step * &dir;
        lambda = &lambda + &delta;
        artifacts = evaluate(problem, &lambda)?;
        if let Some(h) = &mut history {
            h.push(delta, &grad_prev, &artifacts.iterate.gradient);
        }
    }
    if !converged {
        converged = sup_norm(&artifacts.iterate.gradient) <= grad_tol;
    }

    Ok(build_solution(problem, artifacts, iterations, converged))
}

pub(crate) fn build_solution(
    problem: &KlqProblem,
    artifacts: EvalArtifacts,
    iterations: usize,
    converged: bool,
) -> Solution {
    let EvalArtifacts {
        iterate,
        policies,
        marginals,
        output_trajectory,
    } = artifacts;
    let model = problem.model();
    let kappa = problem.kappa();
    // Closed-form relative entropy; valid because g is the recursion fixpoint.
    let weighted_output: f64 = (1..=model.horizon())
        .map(|k| iterate.lambda_check[k - 1] * output_trajectory[k - 1])
        .sum();
    let relative_entropy = weighted_output - inner_nu0_g1(model, &iterate.g[0]);
    let per_step_sq: f64 = output_trajectory
        .iter()
        .zip(problem.reference())
        .map(|(y, r)| (y - r) * (y - r))
        .sum();
    let primal_full = relative_entropy + 0.5 * kappa * per_step_sq;
    let basis = problem.basis();
    let relaxed_sq: f64 = (0..basis.len())
        .map(|n| {
            let y_hat: f64 = (1..=model.horizon())
                .map(|k| basis.weight(n, k) * output_trajectory[k - 1])
                .sum();
            let e = y_hat - problem.r_hat()[n];
            e * e
        })
        .sum();
    let primal_value = relative_entropy + 0.5 * kappa * relaxed_sq;
    let grad_norm = sup_norm(&iterate.gradient);
    Solution {
        gamma: -&iterate.lambda / kappa,
        duality_gap: primal_value - iterate.value,
        lambda: iterate.lambda,
        lambda_check: iterate.lambda_check,
        g: iterate.g,
        policies,
        marginals,
        dual_value: iterate.value,
        primal_value,
        primal_full,
        relative_entropy,
        output_trajectory,
        iterations,
        converged,
        grad_norm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::degenerate_basis;
    use crate::fixtures::{m2_model, m2_problem};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn tilt_operator_zero_is_zero() {
        let model = m2_model();
        let f = Array1::zeros(2);
        let t = tilt_operator(&model, 1, 0.0, &f);
        for s in 0..2 {
            assert_abs_diff_eq!(t[s], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn tilt_operator_unit_multiplier() {
        let model = m2_model();
        let f = Array1::zeros(2);
        let t = tilt_operator(&model, 1, 1.0, &f);
        let expect = ((1.0 + std::f64::consts::E) / 2.0).ln();
        for s in 0..2 {
            assert_abs_diff_eq!(t[s], expect, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(expect, 0.620115, epsilon = 1e-6);
    }

    #[test]
    fn tilt_operator_constant_shift() {
        let model = m2_model();
        let c = 3.7;
        let base = tilt_operator(&model, 1, 0.8, &Array1::zeros(2));
        let shifted = tilt_operator(&model, 1, 0.8, &Array1::from_elem(2, c));
        for s in 0..2 {
            assert_abs_diff_eq!(shifted[s], base[s] + c, epsilon = 1e-12);
        }
    }

    #[test]
    fn tilt_operator_large_multiplier_is_stable() {
        let model = m2_model();
        let t = tilt_operator(&model, 1, 690.0, &Array1::zeros(2));
        assert!(t.iter().all(|v| v.is_finite()));
        // dominated by the u=1 term: log(0.5 e^690) = 690 - log 2
        assert_abs_diff_eq!(t[0], 690.0 - (2f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn backward_recursion_zero_lambda() {
        let model = m2_model();
        let basis = degenerate_basis(2).unwrap();
        let g = backward_recursion(&model, &basis, &Array1::zeros(2)).unwrap();
        assert_eq!(g.len(), 3);
        for gk in &g {
            for v in gk.iter() {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn backward_recursion_one_step_closed_form() {
        let model = m2_model();
        let basis = degenerate_basis(2).unwrap();
        let g = backward_recursion(&model, &basis, &array![1.0, 0.0]).unwrap();
        let expect = ((1.0 + std::f64::consts::E) / 2.0).ln();
        for s in 0..2 {
            assert_abs_diff_eq!(g[1][s], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(g[0][s], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn aggregate_g_cases() {
        let model = m2_model();
        let zero = aggregate_g(&model, &Array1::zeros(2));
        assert!(zero.iter().all(|&v| v == 0.0));
        let c = aggregate_g(&model, &Array1::from_elem(2, 2.5));
        assert!(c.iter().all(|&v| (v - 2.5).abs() < 1e-15));
        let g = array![1.0, -2.0];
        let agg = aggregate_g(&model, &g);
        // u=1 is the swap kernel
        assert_abs_diff_eq!(agg[[0, 1]], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(agg[[1, 1]], 1.0, epsilon = 1e-15);
        // u=0 stays
        assert_abs_diff_eq!(agg[[0, 0]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dual_value_at_zero_is_zero() {
        let problem = m2_problem(1.0);
        assert_abs_diff_eq!(
            dual_value(&problem, &Array1::zeros(2)).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn dual_value_closed_form() {
        let problem = m2_problem(1.0);
        let v = dual_value(&problem, &array![1.0, 0.0]).unwrap();
        let expect = 0.7 - 0.5 - ((1.0 + std::f64::consts::E) / 2.0).ln();
        assert_abs_diff_eq!(v, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(v, -0.420115, epsilon = 1e-6);
    }

    #[test]
    fn dual_functional_at_fixpoint_equals_reduced() {
        let problem = m2_problem(1.0);
        let lambda = array![0.4, -0.9];
        let g = backward_recursion(problem.model(), problem.basis(), &lambda).unwrap();
        let full = dual_functional_general(&problem, &lambda, &g).unwrap();
        let reduced = dual_value(&problem, &lambda).unwrap();
        assert_abs_diff_eq!(full, reduced, epsilon = 1e-12);
    }

    #[test]
    fn dual_functional_rejects_bad_shapes() {
        let problem = m2_problem(1.0);
        let lambda = array![0.0, 0.0];
        let g = vec![Array1::zeros(2); 2];
        assert!(dual_functional_general(&problem, &lambda, &g).is_err());
        let mut g = vec![Array1::zeros(2); 3];
        g[2][0] = 1.0;
        assert!(dual_functional_general(&problem, &lambda, &g).is_err());
    }

    #[test]
    fn gradient_at_zero_m2() {
        let problem = m2_problem(1.0);
        let grad = dual_gradient(&problem, &Array1::zeros(2)).unwrap();
        assert_abs_diff_eq!(grad[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[1], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn policy_zero_multipliers_is_nominal() {
        let problem = m2_problem(1.0);
        let model = problem.model();
        let g = vec![Array1::zeros(2); 3];
        let phi =
            policy_from_multipliers(model, problem.basis(), &Array1::zeros(2), &g).unwrap();
        assert_eq!(phi, PolicySequence::nominal(model));
    }

    #[test]
    fn policy_logistic_tilt() {
        let problem = m2_problem(1.0);
        let model = problem.model();
        let lambda = array![1.0, 0.0];
        let g = backward_recursion(model, problem.basis(), &lambda).unwrap();
        let phi = policy_from_multipliers(model, problem.basis(), &lambda, &g).unwrap();
        let e = std::f64::consts::E;
        for s in 0..2 {
            assert_abs_diff_eq!(phi.at(1)[[s, 1]], e / (1.0 + e), epsilon = 1e-12);
            assert_abs_diff_eq!(phi.at(2)[[s, 1]], 0.5, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(e / (1.0 + e), 0.731059, epsilon = 1e-6);
    }

    #[test]
    fn policy_rejects_inconsistent_g() {
        let problem = m2_problem(1.0);
        let model = problem.model();
        let lambda = array![1.0, 0.0];
        let mut g = backward_recursion(model, problem.basis(), &lambda).unwrap();
        g[0][0] += 0.5;
        assert!(policy_from_multipliers(model, problem.basis(), &lambda, &g).is_err());
    }

    #[test]
    fn golden_section_quadratic() {
        let x = golden_section_search(|x| -(x - 1.0) * (x - 1.0), 0.0, 2.0, 1e-8).unwrap();
        assert_abs_diff_eq!(x, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn golden_section_nonsmooth() {
        let x = golden_section_search(|x| -(x - 0.3f64).abs(), 0.0, 1.0, 1e-8).unwrap();
        assert_abs_diff_eq!(x, 0.3, epsilon = 1e-7);
    }

    #[test]
    fn golden_section_monotone_endpoint() {
        let x = golden_section_search(|x| x, 0.0, 1.0, 1e-8).unwrap();
        assert_abs_diff_eq!(x, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn golden_section_rejects_bad_args() {
        assert!(golden_section_search(|x| x, 1.0, 0.0, 1e-8).is_err());
        assert!(golden_section_search(|x| x, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn solve_m2_converges_with_small_gap() {
        let problem = m2_problem(1.0);
        let sol = solve(&problem, &SolveOptions::default()).unwrap();
        assert!(sol.converged, "grad_norm = {}", sol.grad_norm);
        assert!(sol.duality_gap <= 1e-6 * (1.0 + sol.dual_value.abs()));
        assert!(sol.duality_gap >= -1e-8);
        // moved towards the reference 0.7 from the nominal 0.5
        for y in &sol.output_trajectory {
            assert!(*y > 0.5 && *y < 0.7 + 1e-9);
        }
    }

    #[test]
    fn quasi_newton_matches_gradient_ascent() {
        let problem = m2_problem(2.0);
        let grad = solve(&problem, &SolveOptions::default()).unwrap();
        let qn = solve(&problem, &SolveOptions::quasi_newton()).unwrap();
        assert!(qn.converged);
        for n in 0..2 {
            assert_abs_diff_eq!(qn.lambda[n], grad.lambda[n], epsilon = 1e-6);
        }
        assert_abs_diff_eq!(qn.dual_value, grad.dual_value, epsilon = 1e-10);
    }

    #[test]
    fn solve_tiny_kappa_stays_nominal() {
        let problem = m2_problem(1e-6);
        let sol = solve(&problem, &SolveOptions::default()).unwrap();
        assert!(sup_norm(&sol.lambda) <= 1e-5);
        let nominal = PolicySequence::nominal(problem.model());
        assert!(sol.policies.max_abs_diff(&nominal) <= 1e-4);
        // first-order expansion: lambda* ~ kappa (r_hat - y_hat^0)
        for n in 0..2 {
            assert_abs_diff_eq!(sol.lambda[n], 1e-6 * 0.2, epsilon = 1e-9);
        }
    }
}
