//! Discretized refrigerator (thermostatically controlled load) instance.
//!
//! Each load follows the linear temperature model
//! `theta' = theta + alpha (theta_ambient - theta) - rho m` with power mode
//! `m in {0, 1}`. The MDP state is `(temperature bin, current mode)`, the
//! input is the next power mode, and the output is the power mode, so mean
//! output is the fraction of the population drawing power. The mode is
//! carried inside the state so the hysteresis nominal policy is Markov.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::dual::KlqProblem;
use crate::model::{propagate_marginals, KlqModel, PolicySequence};
use crate::{Error, Result};

/// Refrigerator population parameters. Temperature quantities in degrees C,
/// rates per sampling step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TclParams {
    /// Thermal leakage toward ambient per step, `0 < alpha < 1`.
    pub alpha: f64,
    /// Cooling per step while drawing power, degrees C.
    pub rho: f64,
    /// Ambient temperature, degrees C.
    pub ambient: f64,
    /// Lower deadband edge.
    pub theta_min: f64,
    /// Upper deadband edge.
    pub theta_max: f64,
    /// Temperature grid size.
    pub num_bins: usize,
    /// Sampling interval, seconds (metadata; rates are already per step).
    pub step_seconds: f64,
    /// Nominal switching randomization probability, `0 < eps < 1/2`. Keeps
    /// every conditional strictly positive so KL rates stay finite.
    pub eps: f64,
    /// Horizon in steps.
    pub horizon: usize,
    /// Grid margin beyond the deadband on each side, degrees C.
    pub margin: f64,
    /// Spread each temperature update over the two adjacent bins by linear
    /// interpolation instead of snapping to the nearest bin. Exercises
    /// stochastic (rather than deterministic) uncontrolled dynamics and
    /// reduces discretization bias.
    pub kernel_noise: bool,
    /// Standard deviation, in bins, of additional per-step temperature
    /// disturbance (door openings, load changes). Zero disables it; when
    /// positive each update lands on the grid through a discretized
    /// Gaussian centered on the continuous target temperature.
    pub noise_sigma_bins: f64,
    /// Nominal-policy propagation length used to compute the initial
    /// marginal (the population starts near its nominal steady state).
    pub burn_in: usize,
}

impl Default for TclParams {
    fn default() -> Self {
        Self {
            alpha: 0.0035,
            rho: 0.14,
            ambient: 20.0,
            theta_min: 2.0,
            theta_max: 6.0,
            num_bins: 40,
            step_seconds: 60.0,
            eps: 0.01,
            horizon: 360,
            margin: 0.4,
            kernel_noise: false,
            noise_sigma_bins: 0.0,
            burn_in: 2000,
        }
    }
}

impl TclParams {
    /// The fixture used by the experiment suite: default physics with a
    /// well-mixing population (stronger switching randomization plus a
    /// per-step temperature disturbance). The disturbance is what lets
    /// populations started from point masses forget their phase within a
    /// few hours; without it the nominal limit cycle keeps them separated
    /// for most of the horizon.
    pub fn fixture() -> Self {
        Self {
            kernel_noise: true,
            eps: 0.05,
            noise_sigma_bins: 2.5,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.theta_min < self.theta_max) {
            return Err(Error::InvalidArgument("theta_min must be < theta_max".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument("alpha must be in (0, 1)".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument("rho must be positive".into()));
        }
        if self.num_bins < 2 {
            return Err(Error::InvalidArgument("num_bins must be >= 2".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::InvalidArgument("eps must be in (0, 1/2)".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidArgument("margin must be nonnegative".into()));
        }
        if !(self.noise_sigma_bins >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise_sigma_bins must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn grid_lo(&self) -> f64 {
        self.theta_min - self.margin
    }

    fn grid_hi(&self) -> f64 {
        self.theta_max + self.margin
    }

    /// Temperature bin width.
    pub fn bin_width(&self) -> f64 {
        (self.grid_hi() - self.grid_lo()) / self.num_bins as f64
    }

    /// Center temperature of bin `b`.
    pub fn bin_center(&self, b: usize) -> f64 {
        self.grid_lo() + (b as f64 + 0.5) * self.bin_width()
    }

    /// Number of MDP states: temperature bins times the two carried modes.
    pub fn num_states(&self) -> usize {
        2 * self.num_bins
    }

    /// State index of `(bin, mode)`.
    pub fn state_index(&self, bin: usize, mode: usize) -> usize {
        bin * 2 + mode
    }

    /// Inverse of [`state_index`](Self::state_index).
    pub fn state_unindex(&self, s: usize) -> (usize, usize) {
        (s / 2, s % 2)
    }

    fn next_temperature(&self, theta: f64, mode: usize) -> f64 {
        theta + self.alpha * (self.ambient - theta) - self.rho * mode as f64
    }
}

fn thermostat_table(params: &TclParams) -> Array2<f64> {
    let mut table = Array2::zeros((params.num_states(), 2));
    for b in 0..params.num_bins {
        let theta = params.bin_center(b);
        for mode in 0..2 {
            let p_on = if theta > params.theta_max {
                1.0 - params.eps
            } else if theta < params.theta_min {
                params.eps
            } else if mode == 1 {
                1.0 - params.eps
            } else {
                params.eps
            };
            let s = params.state_index(b, mode);
            table[[s, 0]] = 1.0 - p_on;
            table[[s, 1]] = p_on;
        }
    }
    table
}

/// Build the discretized load model. Kernel rows are deterministic
/// (a single unit entry) unless `kernel_noise` spreads the update over the
/// two bracketing bins; out-of-grid temperatures clamp to the boundary bins.
///
/// The initial marginal is the nominal steady state, obtained by
/// propagating the thermostat policy for `burn_in` steps from a uniform
/// joint pmf.
pub fn build_tcl_model(params: &TclParams) -> Result<KlqModel> {
    params.check()?;
    let half_bin = 0.5 * params.bin_width();
    let warm_drift = params.alpha * (params.ambient - params.theta_min);
    if params.rho < half_bin || warm_drift < half_bin {
        return Err(Error::InvalidArgument(format!(
            "grid too coarse: per-step moves (cooling {}, warming {warm_drift}) must exceed half a bin width {half_bin}; use a finer grid",
            params.rho
        )));
    }
    let n = params.num_states();
    let mut kernels = vec![Array2::zeros((n, n)), Array2::zeros((n, n))];
    for (u, kernel) in kernels.iter_mut().enumerate() {
        for b in 0..params.num_bins {
            let theta_next = params.next_temperature(params.bin_center(b), u);
            // position on the bin-index axis
            let pos = (theta_next - params.grid_lo()) / params.bin_width() - 0.5;
            for mode in 0..2 {
                let s = params.state_index(b, mode);
                let s_next = |bin: usize| params.state_index(bin, u);
                if params.noise_sigma_bins > 0.0 {
                    let sigma = params.noise_sigma_bins;
                    let mut weights = vec![0.0; params.num_bins];
                    let mut total = 0.0;
                    for (bin, w) in weights.iter_mut().enumerate() {
                        let z = (bin as f64 - pos) / sigma;
                        // truncate far tails so rows keep a compact support
                        *w = if z.abs() <= 4.0 { (-0.5 * z * z).exp() } else { 0.0 };
                        total += *w;
                    }
                    for (bin, w) in weights.iter().enumerate() {
                        kernel[[s, s_next(bin)]] += w / total;
                    }
                } else if params.kernel_noise {
                    let clamped = pos.clamp(0.0, (params.num_bins - 1) as f64);
                    let lo = clamped.floor() as usize;
                    let hi = (lo + 1).min(params.num_bins - 1);
                    let frac = clamped - lo as f64;
                    kernel[[s, s_next(lo)]] += 1.0 - frac;
                    kernel[[s, s_next(hi)]] += frac;
                } else {
                    let bin = pos.round().clamp(0.0, (params.num_bins - 1) as f64) as usize;
                    kernel[[s, s_next(bin)]] = 1.0;
                }
            }
        }
    }
    let mut output = Array2::zeros((n, 2));
    for s in 0..n {
        output[[s, 1]] = 1.0;
    }
    let table = thermostat_table(params);

    // burn-in from a uniform joint pmf to reach the nominal steady state
    let uniform = Array2::from_elem((n, 2), 1.0 / (2 * n) as f64);
    let mut model = KlqModel::new(
        n,
        2,
        params.horizon,
        kernels,
        vec![table.clone(); params.horizon + 1],
        output,
        uniform,
    );
    if params.burn_in > 0 {
        let warm = model.with_horizon(params.burn_in);
        let nu = propagate_marginals(&warm, &PolicySequence::nominal(&warm));
        model = model.with_initial_marginal(nu.at(params.burn_in).clone());
    }
    Ok(model)
}

/// The epsilon-randomized hysteresis policy, one table per step `1..=K`.
pub fn nominal_thermostat_policy(params: &TclParams) -> Result<PolicySequence> {
    params.check()?;
    let table = thermostat_table(params);
    Ok(PolicySequence::new(vec![table; params.horizon]))
}

/// A TCL tracking problem: the solver problem plus the nominal power
/// trajectory and the original deviation reference.
#[derive(Debug, Clone)]
pub struct TclProblem {
    problem: KlqProblem,
    nominal_trajectory: Vec<f64>,
    deviation_reference: Vec<f64>,
}

impl TclProblem {
    pub fn problem(&self) -> &KlqProblem {
        &self.problem
    }

    pub fn into_problem(self) -> KlqProblem {
        self.problem
    }

    /// `<nu^0_k, Y>` for `k = 1..=K`.
    pub fn nominal_trajectory(&self) -> &[f64] {
        &self.nominal_trajectory
    }

    pub fn deviation_reference(&self) -> &[f64] {
        &self.deviation_reference
    }
}

/// Convert a power-deviation reference into a tracking problem on absolute
/// power: `r'_k = <nu^0_k, Y> - r_k`. Positive deviation (a discharge
/// request) lowers the power target.
pub fn build_tracking_problem(
    params: &TclParams,
    deviation_reference: &[f64],
    kappa: f64,
    basis: Basis,
) -> Result<TclProblem> {
    if deviation_reference.len() != params.horizon {
        return Err(Error::Dimension(format!(
            "reference has {} entries, horizon is {}",
            deviation_reference.len(),
            params.horizon
        )));
    }
    let model = build_tcl_model(params)?;
    let nominal = propagate_marginals(&model, &PolicySequence::nominal(&model));
    let nominal_trajectory = nominal.output_trajectory(&model);
    let reference: Vec<f64> = nominal_trajectory
        .iter()
        .zip(deviation_reference)
        .map(|(y0, r)| y0 - r)
        .collect();
    let problem = KlqProblem::new(model, reference, kappa, basis)?;
    Ok(TclProblem {
        problem,
        nominal_trajectory,
        deviation_reference: deviation_reference.to_vec(),
    })
}

/// Point-mass initial marginals spread evenly across the deadband,
/// alternating power modes; the input continues the carried mode.
pub fn deadband_point_masses(params: &TclParams, count: usize) -> Result<Vec<Array2<f64>>> {
    params.check()?;
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one initial condition".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let theta = params.theta_min
            + (i as f64 + 0.5) / count as f64 * (params.theta_max - params.theta_min);
        let pos = (theta - params.grid_lo()) / params.bin_width() - 0.5;
        let bin = pos.round().clamp(0.0, (params.num_bins - 1) as f64) as usize;
        let mode = i % 2;
        let mut nu = Array2::zeros((params.num_states(), 2));
        nu[[params.state_index(bin, mode), mode]] = 1.0;
        out.push(nu);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::degenerate_basis;
    use crate::model::validate_model;
    use approx::assert_abs_diff_eq;

    fn small_params() -> TclParams {
        TclParams {
            horizon: 20,
            burn_in: 500,
            ..TclParams::default()
        }
    }

    #[test]
    fn ambient_is_a_fixed_point_when_off() {
        let p = TclParams::default();
        assert_abs_diff_eq!(p.next_temperature(p.ambient, 0), p.ambient, epsilon = 1e-12);
    }

    #[test]
    fn cooling_decreases_temperature_below_ambient() {
        let p = TclParams::default();
        for theta in [p.theta_min, 4.0, p.theta_max] {
            assert!(p.next_temperature(theta, 1) < theta);
        }
    }

    #[test]
    fn deterministic_rows_have_a_single_one() {
        let p = small_params();
        let model = build_tcl_model(&p).unwrap();
        for u in 0..2 {
            for s in 0..model.num_states() {
                let row = model.kernel(u).row(s);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                assert_eq!(ones, 1);
                assert_eq!(zeros, model.num_states() - 1);
            }
        }
    }

    #[test]
    fn model_passes_validation_with_and_without_noise() {
        for noise in [false, true] {
            let p = TclParams {
                kernel_noise: noise,
                ..small_params()
            };
            let model = build_tcl_model(&p).unwrap();
            let report = validate_model(&model);
            assert!(report.is_valid(), "{report}");
        }
    }

    #[test]
    fn too_coarse_grid_is_rejected() {
        let p = TclParams {
            num_bins: 8,
            ..small_params()
        };
        let err = build_tcl_model(&p).unwrap_err();
        assert!(err.to_string().contains("finer grid"));
    }

    #[test]
    fn thermostat_switching_rules() {
        let p = small_params();
        let phi = nominal_thermostat_policy(&p).unwrap();
        let table = phi.at(1);
        // hottest bin is above the deadband: switch on regardless of mode
        let hot_off = p.state_index(p.num_bins - 1, 0);
        assert_abs_diff_eq!(table[[hot_off, 1]], 1.0 - p.eps, epsilon = 1e-12);
        // coldest bin: switch off
        let cold_on = p.state_index(0, 1);
        assert_abs_diff_eq!(table[[cold_on, 0]], 1.0 - p.eps, epsilon = 1e-12);
        // mid-deadband: hold the carried mode
        let mid = p.num_bins / 2;
        let mid_on = p.state_index(mid, 1);
        assert_abs_diff_eq!(table[[mid_on, 1]], 1.0 - p.eps, epsilon = 1e-12);
        let mid_off = p.state_index(mid, 0);
        assert_abs_diff_eq!(table[[mid_off, 0]], 1.0 - p.eps, epsilon = 1e-12);
        // strictly positive rows summing to one
        for s in 0..p.num_states() {
            assert!(table[[s, 0]] > 0.0 && table[[s, 1]] > 0.0);
            assert_abs_diff_eq!(table.row(s).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn nominal_duty_cycle_matches_energy_balance() {
        let p = TclParams {
            horizon: 200,
            burn_in: 3000,
            kernel_noise: true,
            ..TclParams::default()
        };
        let model = build_tcl_model(&p).unwrap();
        let nu = propagate_marginals(&model, &PolicySequence::nominal(&model));
        let duty = model.mean_output(nu.at(p.horizon));
        let midpoint = 0.5 * (p.theta_min + p.theta_max);
        let predicted = p.alpha * (p.ambient - midpoint) / p.rho;
        assert!(
            (duty - predicted).abs() < 0.1,
            "duty {duty} vs energy balance {predicted}"
        );
        assert!(duty > 0.0 && duty < 1.0);
    }

    #[test]
    fn tracking_problem_reference_conversion() {
        let p = small_params();
        let basis = degenerate_basis(p.horizon).unwrap();
        let tcl = build_tracking_problem(&p, &vec![0.1; p.horizon], 1.0, basis).unwrap();
        for k in 0..p.horizon {
            let expected = tcl.nominal_trajectory()[k] - 0.1;
            assert_abs_diff_eq!(tcl.problem().reference()[k], expected, epsilon = 1e-12);
        }
        // nominal power stays in [0, 1]
        for y in tcl.nominal_trajectory() {
            assert!(*y >= 0.0 && *y <= 1.0);
        }
    }

    #[test]
    fn point_masses_are_distinct_valid_pmfs() {
        let p = TclParams::default();
        let inits = deadband_point_masses(&p, 6).unwrap();
        assert_eq!(inits.len(), 6);
        for nu in &inits {
            assert_abs_diff_eq!(nu.sum(), 1.0, epsilon = 1e-15);
            assert_eq!(nu.iter().filter(|&&v| v == 1.0).count(), 1);
        }
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert_ne!(inits[i], inits[j]);
            }
        }
        assert!(deadband_point_masses(&p, 0).is_err());
    }

    #[test]
    fn zero_deviation_reference_keeps_nominal() {
        let p = small_params();
        let basis = degenerate_basis(p.horizon).unwrap();
        let tcl = build_tracking_problem(&p, &vec![0.0; p.horizon], 1.0, basis).unwrap();
        let sol = crate::dual::solve(tcl.problem(), &crate::dual::SolveOptions::default()).unwrap();
        assert!(sol.relative_entropy.abs() < 1e-6);
        let nominal = PolicySequence::nominal(tcl.problem().model());
        assert!(sol.policies.max_abs_diff(&nominal) < 1e-3);
    }
}
