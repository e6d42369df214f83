//! Finite MDP data model: controlled kernels, randomized policies, marginal
//! propagation, and relative-entropy-rate computations.
//!
//! Conventions used throughout the crate:
//! - states `s` in `0..num_states`, inputs `u` in `0..num_inputs`
//! - the joint space `X = S x U` is flattened as `x = s * num_inputs + u`
//! - policies are time-varying, kernels are time-homogeneous
//! - all pmfs are dense; state spaces here are at most a few hundred states
//!   (sparse kernels are future work)
//! - natural logarithm everywhere

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance for stochasticity checks (row sums, pmf normalization).
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// A finite-horizon controlled Markov model with a nominal randomized policy.
///
/// Holds the controlled transition matrices `T_u`, the nominal conditional
/// pmfs `phi0_k(u|s)` for `k = 0..=K`, a real-valued output function on
/// `S x U`, and the initial joint marginal `nu_0`.
///
/// Construction is unchecked so that [`validate_model`] can describe broken
/// inputs; solvers reject models whose validation report is non-empty.
/// Renormalization is never applied silently.
#[derive(Debug, Clone)]
pub struct KlqModel {
    num_states: usize,
    num_inputs: usize,
    horizon: usize,
    kernels: Vec<Array2<f64>>,
    nominal_policies: Vec<Array2<f64>>,
    output: Array2<f64>,
    initial_marginal: Array2<f64>,
    /// Per input and state, the nonzero kernel entries `(s', T_u(s, s'))`
    /// when every row is sparse. Speeds up the inner sum of the tilted
    /// backward recursion (deterministic and near-deterministic kernels).
    sparse_rows: Option<Vec<Vec<Vec<(usize, f64)>>>>,
}

/// Rows with at most this many nonzeros use the sparse inner-sum path.
const SPARSE_ROW_CAP: usize = 4;

impl KlqModel {
    /// Build a model from raw pieces. Shapes are taken as given; call
    /// [`validate_model`] to check invariants.
    ///
    /// `kernels` has one `|S| x |S|` matrix per input; `nominal_policies`
    /// has `K+1` tables of shape `|S| x |U|` (index 0 is part of the nominal
    /// chain definition but unused by the solver, which tilts `k = 1..=K`).
    pub fn new(
        num_states: usize,
        num_inputs: usize,
        horizon: usize,
        kernels: Vec<Array2<f64>>,
        nominal_policies: Vec<Array2<f64>>,
        output: Array2<f64>,
        initial_marginal: Array2<f64>,
    ) -> Self {
        let sparse_rows = detect_sparse(num_states, num_inputs, &kernels);
        Self {
            num_states,
            num_inputs,
            horizon,
            kernels,
            nominal_policies,
            output,
            initial_marginal,
            sparse_rows,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Size of the joint space `X = S x U`.
    pub fn num_joint(&self) -> usize {
        self.num_states * self.num_inputs
    }

    /// Flattened joint index of `(s, u)`.
    pub fn x_index(&self, s: usize, u: usize) -> usize {
        s * self.num_inputs + u
    }

    /// Inverse of [`x_index`](Self::x_index).
    pub fn x_unindex(&self, x: usize) -> (usize, usize) {
        (x / self.num_inputs, x % self.num_inputs)
    }

    pub fn kernel(&self, u: usize) -> &Array2<f64> {
        &self.kernels[u]
    }

    pub fn kernels(&self) -> &[Array2<f64>] {
        &self.kernels
    }

    /// Nominal conditional pmf table at time `k`, `0 <= k <= K`.
    pub fn nominal_policy(&self, k: usize) -> &Array2<f64> {
        &self.nominal_policies[k]
    }

    pub fn nominal_policies(&self) -> &[Array2<f64>] {
        &self.nominal_policies
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn initial_marginal(&self) -> &Array2<f64> {
        &self.initial_marginal
    }

    /// Replace the initial marginal (used by coupling experiments and the
    /// receding-horizon loop). Shape must match; content is not validated.
    pub fn with_initial_marginal(&self, nu0: Array2<f64>) -> Self {
        let mut m = self.clone();
        m.initial_marginal = nu0;
        m
    }

    /// Replace the horizon, truncating or cycling nominal policy tables as
    /// needed. Used by the receding-horizon loop to build window problems.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        let mut policies = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            let src = k.min(self.nominal_policies.len() - 1);
            policies.push(self.nominal_policies[src].clone());
        }
        let mut m = self.clone();
        m.horizon = horizon;
        m.nominal_policies = policies;
        m
    }

    /// `sum_{s'} T_u(s, s') f(s')` with a fast path for sparse rows.
    pub fn expect_next(&self, u: usize, s: usize, f: &Array1<f64>) -> f64 {
        if let Some(rows) = &self.sparse_rows {
            return rows[u][s].iter().map(|&(s2, p)| p * f[s2]).sum();
        }
        let row = self.kernels[u].row(s);
        row.iter().zip(f.iter()).map(|(p, v)| p * v).sum()
    }

    /// Max absolute value of the output function.
    pub fn output_sup_norm(&self) -> f64 {
        self.output.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean output under a joint pmf on `X`.
    pub fn mean_output(&self, nu: &Array2<f64>) -> f64 {
        nu.iter().zip(self.output.iter()).map(|(n, y)| n * y).sum()
    }
}

fn detect_sparse(
    num_states: usize,
    num_inputs: usize,
    kernels: &[Array2<f64>],
) -> Option<Vec<Vec<Vec<(usize, f64)>>>> {
    if kernels.len() != num_inputs {
        return None;
    }
    let mut per_input = Vec::with_capacity(num_inputs);
    for t in kernels {
        if t.shape() != [num_states, num_states] {
            return None;
        }
        let mut rows = Vec::with_capacity(num_states);
        for s in 0..num_states {
            let entries: Vec<(usize, f64)> = t
                .row(s)
                .iter()
                .enumerate()
                .filter(|(_, &p)| p != 0.0)
                .map(|(s2, &p)| (s2, p))
                .collect();
            if entries.len() > SPARSE_ROW_CAP {
                return None;
            }
            rows.push(entries);
        }
        per_input.push(rows);
    }
    Some(per_input)
}

/// A time-varying randomized policy: conditional pmfs `phi_k(u|s)` for
/// `k = 1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySequence {
    policies: Vec<Array2<f64>>,
}

impl PolicySequence {
    /// Wrap `K` tables of shape `|S| x |U|`; `policies[k-1]` is `phi_k`.
    pub fn new(policies: Vec<Array2<f64>>) -> Self {
        Self { policies }
    }

    /// The nominal policy restricted to `k = 1..=K`.
    pub fn nominal(model: &KlqModel) -> Self {
        Self {
            policies: (1..=model.horizon())
                .map(|k| model.nominal_policy(k).clone())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Table for time `k`, `1 <= k <= K`.
    pub fn at(&self, k: usize) -> &Array2<f64> {
        &self.policies[k - 1]
    }

    pub fn tables(&self) -> &[Array2<f64>] {
        &self.policies
    }

    /// Largest entrywise difference to another sequence.
    pub fn max_abs_diff(&self, other: &PolicySequence) -> f64 {
        self.policies
            .iter()
            .zip(&other.policies)
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }
}

/// Joint marginals `nu_k` on `X` for `k = 0..=K`.
#[derive(Debug, Clone)]
pub struct MarginalSequence {
    marginals: Vec<Array2<f64>>,
}

impl MarginalSequence {
    pub fn new(marginals: Vec<Array2<f64>>) -> Self {
        Self { marginals }
    }

    /// Marginal at time `k`, `0 <= k <= K`.
    pub fn at(&self, k: usize) -> &Array2<f64> {
        &self.marginals[k]
    }

    pub fn len(&self) -> usize {
        self.marginals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marginals.is_empty()
    }

    /// State marginal `nu_hat_k(s) = sum_u nu_k(s, u)`.
    pub fn state_marginal(&self, k: usize) -> Array1<f64> {
        state_marginal(&self.marginals[k])
    }

    /// Mean output `<nu_k, Y>` for `k = 1..=K`.
    pub fn output_trajectory(&self, model: &KlqModel) -> Vec<f64> {
        (1..self.marginals.len())
            .map(|k| model.mean_output(&self.marginals[k]))
            .collect()
    }
}

pub(crate) fn state_marginal(nu: &Array2<f64>) -> Array1<f64> {
    nu.rows().into_iter().map(|r| r.sum()).collect()
}

/// Validation findings for a [`KlqModel`]. Empty iff the model is valid.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            write!(f, "ok")
        } else {
            write!(f, "{}", self.violations.join("; "))
        }
    }
}

/// Check every model invariant: dimensions, row stochasticity of kernels and
/// policy tables, nonnegativity, and normalization of the initial marginal.
///
/// Never aborts; callers decide what to do with the report.
pub fn validate_model(model: &KlqModel) -> ValidationReport {
    let mut v = Vec::new();
    let s_n = model.num_states;
    let u_n = model.num_inputs;
    if s_n == 0 {
        v.push("num_states must be positive".into());
    }
    if u_n == 0 {
        v.push("num_inputs must be positive".into());
    }
    if model.horizon == 0 {
        v.push("horizon must be positive".into());
    }
    if model.kernels.len() != u_n {
        v.push(format!(
            "expected {} kernels, found {}",
            u_n,
            model.kernels.len()
        ));
    }
    for (u, t) in model.kernels.iter().enumerate() {
        if t.shape() != [s_n, s_n] {
            v.push(format!("kernel {u} has shape {:?}, expected [{s_n}, {s_n}]", t.shape()));
            continue;
        }
        for s in 0..s_n {
            let row = t.row(s);
            if row.iter().any(|&p| p < 0.0) {
                v.push(format!("negative kernel entry in T_{u} row {s}"));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                v.push(format!("kernel row sum {sum} != 1 (T_{u} row {s})"));
            }
        }
    }
    if model.nominal_policies.len() != model.horizon + 1 {
        v.push(format!(
            "expected {} nominal policy tables, found {}",
            model.horizon + 1,
            model.nominal_policies.len()
        ));
    }
    for (k, phi) in model.nominal_policies.iter().enumerate() {
        if phi.shape() != [s_n, u_n] {
            v.push(format!(
                "nominal policy {k} has shape {:?}, expected [{s_n}, {u_n}]",
                phi.shape()
            ));
            continue;
        }
        for s in 0..s_n {
            let row = phi.row(s);
            if row.iter().any(|&p| p < 0.0) {
                v.push(format!("negative policy entry (phi0_{k} state {s})"));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                v.push(format!("policy row sum {sum} != 1 (phi0_{k} state {s})"));
            }
        }
    }
    if model.output.shape() != [s_n, u_n] {
        v.push(format!(
            "output has shape {:?}, expected [{s_n}, {u_n}]",
            model.output.shape()
        ));
    }
    if model.initial_marginal.shape() != [s_n, u_n] {
        v.push(format!(
            "initial marginal has shape {:?}, expected [{s_n}, {u_n}]",
            model.initial_marginal.shape()
        ));
    } else {
        if model.initial_marginal.iter().any(|&p| p < 0.0) {
            v.push("negative initial marginal entry".into());
        }
        let sum: f64 = model.initial_marginal.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            v.push(format!("initial marginal sum {sum} != 1"));
        }
    }
    ValidationReport { violations: v }
}

/// Transition matrix of the joint chain at step `k`, `0 <= k <= K-1`:
/// `P_k(x, x') = T_u(s, s') * phi_{k+1}(u' | s')` for `x = (s, u)`.
pub fn policy_to_kernel(model: &KlqModel, phi: &PolicySequence, k: usize) -> Result<Array2<f64>> {
    if k >= model.horizon() {
        return Err(Error::IndexRange(format!(
            "step index {k} out of range 0..{}",
            model.horizon()
        )));
    }
    let d = model.num_joint();
    let next = phi.at(k + 1);
    let mut p = Array2::zeros((d, d));
    for s in 0..model.num_states() {
        for u in 0..model.num_inputs() {
            let x = model.x_index(s, u);
            let trow = model.kernel(u).row(s);
            for s2 in 0..model.num_states() {
                let t = trow[s2];
                if t == 0.0 {
                    continue;
                }
                for u2 in 0..model.num_inputs() {
                    p[[x, model.x_index(s2, u2)]] = t * next[[s2, u2]];
                }
            }
        }
    }
    Ok(p)
}

/// Propagate the joint marginals `nu_k = nu_{k-1} P_{k-1}` for `k = 1..=K`,
/// starting from the model's initial marginal.
pub fn propagate_marginals(model: &KlqModel, phi: &PolicySequence) -> MarginalSequence {
    let s_n = model.num_states();
    let u_n = model.num_inputs();
    let mut out = Vec::with_capacity(model.horizon() + 1);
    out.push(model.initial_marginal().clone());
    for k in 1..=model.horizon() {
        let prev = &out[k - 1];
        // state marginal first, then split by the policy
        let mut hat = Array1::<f64>::zeros(s_n);
        for s in 0..s_n {
            for u in 0..u_n {
                let m = prev[[s, u]];
                if m == 0.0 {
                    continue;
                }
                let trow = model.kernel(u).row(s);
                for s2 in 0..s_n {
                    hat[s2] += m * trow[s2];
                }
            }
        }
        let table = phi.at(k);
        let mut nu = Array2::<f64>::zeros((s_n, u_n));
        for s in 0..s_n {
            for u in 0..u_n {
                nu[[s, u]] = hat[s] * table[[s, u]];
            }
        }
        out.push(nu);
    }
    MarginalSequence::new(out)
}

/// Relative entropy rate `D(nu, nu0) = sum_{s,u} nu(s,u) log(phi(u|s) / phi0(u|s))`
/// where `phi`, `phi0` are the conditionals of `nu`, `nu0`.
///
/// Equals `D(nu || nu0) - D(nu_hat || nu0_hat)`; always nonnegative. The
/// convention `0 * log(0/q) = 0` applies; `nu(s,u) > 0` where the nominal
/// conditional vanishes is a hard error rather than `+inf`.
pub fn kl_rate(nu: &Array2<f64>, nu0: &Array2<f64>) -> Result<f64> {
    if nu.shape() != nu0.shape() {
        return Err(Error::Dimension(format!(
            "kl_rate: shapes {:?} vs {:?}",
            nu.shape(),
            nu0.shape()
        )));
    }
    let hat = state_marginal(nu);
    let hat0 = state_marginal(nu0);
    let mut d = 0.0;
    for s in 0..nu.nrows() {
        if hat[s] == 0.0 {
            continue;
        }
        if hat0[s] == 0.0 {
            return Err(Error::AbsoluteContinuity(format!(
                "state {s} has mass under nu but none under nu0"
            )));
        }
        for u in 0..nu.ncols() {
            let m = nu[[s, u]];
            if m == 0.0 {
                continue;
            }
            let phi = m / hat[s];
            let phi0 = nu0[[s, u]] / hat0[s];
            if phi0 == 0.0 {
                return Err(Error::AbsoluteContinuity(format!(
                    "nu({s},{u}) > 0 but nominal conditional is zero"
                )));
            }
            d += m * (phi / phi0).ln();
        }
    }
    // Clamp tiny negative rounding residue; the quantity is a KL divergence.
    Ok(if d < 0.0 && d > -1e-13 { 0.0 } else { d })
}

/// Subgradient of `nu -> D(nu, nu0)` at `mu`:
/// `g(s,u) = log(phi_mu(u|s) / phi0(u|s))` on the support of `mu`, zero on
/// states without `mu`-mass.
pub fn kl_rate_subgradient(mu: &Array2<f64>, nu0: &Array2<f64>) -> Result<Array2<f64>> {
    if mu.shape() != nu0.shape() {
        return Err(Error::Dimension(format!(
            "kl_rate_subgradient: shapes {:?} vs {:?}",
            mu.shape(),
            nu0.shape()
        )));
    }
    let hat = state_marginal(mu);
    let hat0 = state_marginal(nu0);
    let mut g = Array2::zeros(mu.raw_dim());
    for s in 0..mu.nrows() {
        if hat[s] == 0.0 {
            continue;
        }
        if hat0[s] == 0.0 {
            return Err(Error::AbsoluteContinuity(format!(
                "state {s} has mass under mu but none under nu0"
            )));
        }
        for u in 0..mu.ncols() {
            let phi0 = nu0[[s, u]] / hat0[s];
            let m = mu[[s, u]];
            if m > 0.0 && phi0 == 0.0 {
                return Err(Error::AbsoluteContinuity(format!(
                    "mu({s},{u}) > 0 but nominal conditional is zero"
                )));
            }
            let phi = m / hat[s];
            g[[s, u]] = (phi / phi0).ln();
        }
    }
    Ok(g)
}

/// On-disk model document. Probabilities are plain decimal numbers; the
/// nominal policy is either one shared table or `K+1` per-step tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub num_states: usize,
    pub num_inputs: usize,
    pub horizon: usize,
    /// `|U|` matrices, each `|S| x |S|`, row-stochastic.
    pub kernels: Vec<Vec<Vec<f64>>>,
    pub nominal_policy: NominalPolicySpec,
    /// `|S| x |U|` output table.
    pub output: Vec<Vec<f64>>,
    /// `|S| x |U|` joint pmf.
    pub initial_marginal: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NominalPolicySpec {
    /// One `|S| x |U|` table used at every `k`.
    Shared(Vec<Vec<f64>>),
    /// `K+1` tables, index `0..=K`.
    PerStep(Vec<Vec<Vec<f64>>>),
}

fn to_array2(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse("ragged matrix in model file".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| Error::Parse(format!("matrix shape: {e}")))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl ModelFile {
    pub fn from_model(model: &KlqModel) -> Self {
        let all_equal = model
            .nominal_policies()
            .windows(2)
            .all(|w| w[0] == w[1]);
        let nominal_policy = if all_equal {
            NominalPolicySpec::Shared(to_rows(model.nominal_policy(0)))
        } else {
            NominalPolicySpec::PerStep(
                model.nominal_policies().iter().map(to_rows).collect(),
            )
        };
        Self {
            num_states: model.num_states(),
            num_inputs: model.num_inputs(),
            horizon: model.horizon(),
            kernels: model.kernels().iter().map(to_rows).collect(),
            nominal_policy,
            output: to_rows(model.output()),
            initial_marginal: to_rows(model.initial_marginal()),
        }
    }

    pub fn into_model(&self) -> Result<KlqModel> {
        let kernels = self
            .kernels
            .iter()
            .map(|m| to_array2(m))
            .collect::<Result<Vec<_>>>()?;
        let policies = match &self.nominal_policy {
            NominalPolicySpec::Shared(t) => {
                let table = to_array2(t)?;
                vec![table; self.horizon + 1]
            }
            NominalPolicySpec::PerStep(ts) => ts
                .iter()
                .map(|t| to_array2(t))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(KlqModel::new(
            self.num_states,
            self.num_inputs,
            self.horizon,
            kernels,
            policies,
            to_array2(&self.output)?,
            to_array2(&self.initial_marginal)?,
        ))
    }
}

impl KlqModel {
    pub fn from_json_str(s: &str) -> Result<KlqModel> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.into_model()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from_model(self))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::m2_model;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn m2_passes_validation() {
        assert!(validate_model(&m2_model()).is_valid());
    }

    #[test]
    fn bad_kernel_row_sum_is_reported() {
        let mut model = m2_model();
        let mut kernels = model.kernels().to_vec();
        kernels[0] = array![[0.5, 0.4], [0.0, 1.0]];
        model = KlqModel::new(
            2,
            2,
            2,
            kernels,
            model.nominal_policies().to_vec(),
            model.output().clone(),
            model.initial_marginal().clone(),
        );
        let report = validate_model(&model);
        assert!(!report.is_valid());
        assert!(report.violations.iter().any(|v| v.contains("kernel row sum 0.9")));
    }

    #[test]
    fn negative_policy_entry_is_reported() {
        let model = m2_model();
        let mut policies = model.nominal_policies().to_vec();
        policies[1][[0, 0]] = -0.1;
        policies[1][[0, 1]] = 1.1;
        let model = KlqModel::new(
            2,
            2,
            2,
            model.kernels().to_vec(),
            policies,
            model.output().clone(),
            model.initial_marginal().clone(),
        );
        let report = validate_model(&model);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("negative policy entry")));
    }

    #[test]
    fn policy_to_kernel_m2_uniform() {
        let model = m2_model();
        let phi = PolicySequence::nominal(&model);
        let p = policy_to_kernel(&model, &phi, 0).unwrap();
        // x = (0,1): swap kernel sends s=0 to s=1, then uniform input
        let x = model.x_index(0, 1);
        assert_abs_diff_eq!(p[[x, model.x_index(1, 0)]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[[x, model.x_index(1, 1)]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[[x, model.x_index(0, 0)]], 0.0, epsilon = 1e-15);
        for x in 0..4 {
            assert_abs_diff_eq!(p.row(x).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn policy_to_kernel_deterministic_policy() {
        let model = m2_model();
        let delta0 = array![[1.0, 0.0], [1.0, 0.0]];
        let phi = PolicySequence::new(vec![delta0.clone(), delta0]);
        let p = policy_to_kernel(&model, &phi, 0).unwrap();
        let x = model.x_index(0, 0);
        assert_abs_diff_eq!(p[[x, model.x_index(0, 0)]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn policy_to_kernel_index_out_of_range() {
        let model = m2_model();
        let phi = PolicySequence::nominal(&model);
        assert!(policy_to_kernel(&model, &phi, 2).is_err());
    }

    #[test]
    fn propagate_m2_uniform_policy() {
        let model = m2_model();
        let phi = PolicySequence::nominal(&model);
        let nu = propagate_marginals(&model, &phi);
        for s in 0..2 {
            for u in 0..2 {
                assert_abs_diff_eq!(nu.at(1)[[s, u]], 0.25, epsilon = 1e-12);
            }
        }
        for k in 1..=2 {
            assert_abs_diff_eq!(model.mean_output(nu.at(k)), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn propagate_always_swap_alternates() {
        let model = m2_model();
        let delta1 = array![[0.0, 1.0], [0.0, 1.0]];
        let phi = PolicySequence::new(vec![delta1.clone(), delta1]);
        let nu = propagate_marginals(&model, &phi);
        // nu0 concentrated on s=0 with uniform input; after one swap-or-stay
        // step driven by u: half the mass stays (u=0 at k=0), half swaps.
        // Hand propagation: nu0 = 1/2 at (0,0) and (0,1).
        // k=1 state: from (0,0) stay -> s=0; from (0,1) swap -> s=1.
        assert_abs_diff_eq!(nu.state_marginal(1)[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(nu.state_marginal(1)[1], 0.5, epsilon = 1e-12);
        // inputs all forced to u=1 at k>=1, so from k=1 on everything swaps
        assert_abs_diff_eq!(nu.at(1)[[0, 1]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(nu.at(2)[[1, 1]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(nu.at(2)[[0, 1]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn propagate_point_mass_swap_chain() {
        // pure 2-state chain check: point mass on s=0, always swap
        let model = KlqModel::new(
            2,
            2,
            3,
            m2_model().kernels().to_vec(),
            vec![array![[0.0, 1.0], [0.0, 1.0]]; 4],
            m2_model().output().clone(),
            array![[0.0, 1.0], [0.0, 0.0]],
        );
        let phi = PolicySequence::nominal(&model);
        let nu = propagate_marginals(&model, &phi);
        assert_abs_diff_eq!(nu.state_marginal(0)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nu.state_marginal(1)[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nu.state_marginal(2)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nu.state_marginal(3)[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_rate_identity_is_zero() {
        let nu = array![[0.1, 0.2], [0.3, 0.4]];
        assert_abs_diff_eq!(kl_rate(&nu, &nu).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_rate_bernoulli_three_quarters() {
        let nu0 = array![[0.25, 0.25], [0.25, 0.25]];
        let nu = array![[0.125, 0.375], [0.125, 0.375]];
        // per-state KL(B(3/4) || B(1/2)) weighted by state marginal 1/2 each
        let expected = 0.75 * (1.5f64).ln() + 0.25 * (0.5f64).ln();
        let d = kl_rate(&nu, &nu0).unwrap();
        assert_abs_diff_eq!(d, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(d, 0.130812, epsilon = 1e-6);
    }

    #[test]
    fn kl_rate_ignores_state_marginal_shift() {
        let nu0 = array![[0.25, 0.25], [0.25, 0.25]];
        // same conditionals (uniform), different state marginal
        let nu = array![[0.4, 0.4], [0.1, 0.1]];
        assert_abs_diff_eq!(kl_rate(&nu, &nu0).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_rate_absolute_continuity_error() {
        let nu0 = array![[0.5, 0.0], [0.25, 0.25]];
        let nu = array![[0.25, 0.25], [0.25, 0.25]];
        assert!(matches!(
            kl_rate(&nu, &nu0),
            Err(Error::AbsoluteContinuity(_))
        ));
    }

    #[test]
    fn kl_rate_decomposes_as_joint_minus_state() {
        // D(nu, nu0) = D(nu||nu0) - D(nu_hat||nu0_hat)
        let joint_kl = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
            a.iter()
                .zip(b.iter())
                .filter(|(&x, _)| x > 0.0)
                .map(|(&x, &y)| x * (x / y).ln())
                .sum()
        };
        let nu0 = array![[0.1, 0.3], [0.2, 0.4]];
        let nu = array![[0.25, 0.15], [0.35, 0.25]];
        let hat = state_marginal(&nu);
        let hat0 = state_marginal(&nu0);
        let dj = joint_kl(&nu, &nu0);
        let ds: f64 = hat
            .iter()
            .zip(hat0.iter())
            .map(|(&x, &y)| x * (x / y).ln())
            .sum();
        assert_abs_diff_eq!(kl_rate(&nu, &nu0).unwrap(), dj - ds, epsilon = 1e-12);
    }

    #[test]
    fn subgradient_zero_at_nominal() {
        let nu0 = array![[0.1, 0.3], [0.2, 0.4]];
        let g = kl_rate_subgradient(&nu0, &nu0).unwrap();
        for v in g.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn subgradient_tilted_bernoulli() {
        let nu0 = array![[0.25, 0.25], [0.25, 0.25]];
        let mu = array![[0.125, 0.375], [0.125, 0.375]];
        let g = kl_rate_subgradient(&mu, &nu0).unwrap();
        for s in 0..2 {
            assert_abs_diff_eq!(g[[s, 1]], (1.5f64).ln(), epsilon = 1e-12);
            assert_abs_diff_eq!(g[[s, 0]], (0.5f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let model = m2_model();
        let json = model.to_json_string().unwrap();
        let back = KlqModel::from_json_str(&json).unwrap();
        assert!(validate_model(&back).is_valid());
        assert_eq!(back.num_states(), 2);
        assert_eq!(back.kernels()[1], model.kernels()[1]);
        assert_eq!(back.initial_marginal(), model.initial_marginal());
    }
}
