//! Measured counterparts of the a priori estimates, the telescoping duality
//! identity, and the monotonicity inequality it yields for two solutions.

use serde::Serialize;

use super::{PerturbationData, SolutionPair};
use crate::coefficients::{CoefficientSet, DominationData, Theta};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::sde::RatioRecord;
use crate::tree::{cond_prev, AdaptedProcess, TreeTopology};

/// `E[⟨x_N, y_N⟩ - ⟨x_0, y_0⟩]` minus the sum of its one-step increments,
/// each increment computed by conditional averaging over the children.
pub fn telescoping_defect(topology: &TreeTopology, x: &AdaptedProcess, y: &AdaptedProcess) -> Result<f64> {
    x.check_same_shape(y)?;
    let horizon = topology.horizon();
    if x.times() != (0..=horizon) {
        return Err(Error::Shape("the duality identity needs processes over 0..N".into()));
    }
    let inner = |k: usize| x.field(k).inner_expectation(topology, y.field(k));
    let total = inner(horizon) - inner(0);
    let mut increments = 0.0;
    for k in 0..horizon {
        let probabilities = topology.level_probabilities(k);
        let mut step = 0.0;
        for (node, p) in probabilities.iter().enumerate() {
            let mut child_mean = 0.0;
            for branch in 0..topology.branching() {
                let child = topology.child(node, branch);
                let pair: f64 = x.at(k + 1, child).iter().zip(y.at(k + 1, child)).map(|(a, b)| a * b).sum();
                child_mean += topology.branch_probability(branch) * pair;
            }
            let here: f64 = x.at(k, node).iter().zip(y.at(k, node)).map(|(a, b)| a * b).sum();
            step += p * (child_mean - here);
        }
        increments += step;
    }
    Ok(total - increments)
}

/// Comparison of two solutions of systems that differ in their coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriReport {
    /// `E Σ (|x̂|² + |ŷ|²)` against the coefficient differences along the barred solution.
    pub difference: RatioRecord,
    /// `E Σ (|x|² + |y|²)` against the coefficients of the first system at zero.
    pub bound: RatioRecord,
    pub duality_defect: f64,
}

fn expect_same_tree(topology: &TreeTopology, dim: usize, pairs: [&SolutionPair; 2]) -> Result<()> {
    for pair in pairs {
        pair.check(topology, dim)?;
    }
    Ok(())
}

/// Evaluates both estimates for `(x, y)` solving `coefficients` and `(x̄, ȳ)`
/// solving `coefficients_bar`, both with the same `perturbation`.
pub fn apriori_report(
    topology: &TreeTopology,
    coefficients: &dyn CoefficientSet,
    coefficients_bar: &dyn CoefficientSet,
    perturbation: &PerturbationData,
    solution: &SolutionPair,
    solution_bar: &SolutionPair,
) -> Result<AprioriReport> {
    let n = coefficients.dim();
    if coefficients_bar.dim() != n {
        return Err(Error::Shape("the coefficient sets have different dimensions".into()));
    }
    expect_same_tree(topology, n, [solution, solution_bar])?;
    perturbation.check(topology, n)?;
    let horizon = topology.horizon();
    let gap = solution.add_scaled(-1.0, solution_bar)?;
    let lhs = gap.x.sum_mean_square(topology) + gap.y.sum_mean_square(topology);

    let y0_bar = solution_bar.y.vector(0, 0);
    let zero = Vector::zeros(n);
    let mut data = (coefficients.lambda(&y0_bar) - coefficients_bar.lambda(&y0_bar)).norm_squared();
    let mut data_at_zero = (coefficients.lambda(&zero) + &perturbation.xi).norm_squared();
    let leaves = topology.level_probabilities(horizon);
    for (node, p) in leaves.iter().enumerate() {
        let x = solution_bar.x.vector(horizon, node);
        data += p * (coefficients.phi(node, &x) - coefficients_bar.phi(node, &x)).norm_squared();
        data_at_zero += p * (coefficients.phi(node, &zero) + perturbation.eta.vector(node)).norm_squared();
    }
    let origin = Theta::zeros(n);
    for (k, thetas) in solution_bar.thetas(topology)?.iter().enumerate() {
        for (node, theta) in thetas.iter().enumerate() {
            let p = topology.level_probabilities(k)[node];
            let diff = coefficients.gamma(k, node, theta).minus(&coefficients_bar.gamma(k, node, theta));
            data += p * (diff.driver.norm_squared() + diff.drift.norm_squared() + diff.diffusion.norm_squared());
            let at_zero = coefficients.gamma(k, node, &origin);
            data_at_zero += p
                * ((at_zero.driver + perturbation.phi.vector(k, node)).norm_squared()
                    + (at_zero.drift + perturbation.psi.vector(k, node)).norm_squared()
                    + (at_zero.diffusion + perturbation.gamma.vector(k, node)).norm_squared());
        }
    }
    let norm = solution.x.sum_mean_square(topology) + solution.y.sum_mean_square(topology);
    Ok(AprioriReport {
        difference: RatioRecord::new(lhs, data),
        bound: RatioRecord::new(norm, data_at_zero),
        duality_defect: telescoping_defect(topology, &gap.x, &gap.y)?,
    })
}

/// Both sides of the monotonicity inequality for two solutions of one system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicitySlack {
    /// `E[ν|G x̂_N|² + μ|M ŷ_0|² + Σ (ν|P̂|² + μ|Q̂|²)]`.
    pub lhs: f64,
    /// `E[-⟨η̂, x̂_N⟩ + ⟨ξ̂, ŷ_0⟩ + Σ (⟨ψ̂, ŷ'⟩ + ⟨γ̂, ẑ'⟩ + ⟨x̂, φ̂⟩)]`.
    pub rhs: f64,
    /// `rhs - lhs`, nonnegative up to solver error.
    pub slack: f64,
}

/// Comparison of two solutions of one system with different perturbations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    /// `E Σ (|x̂|² + |ŷ|²)` against the squared norm of the perturbation difference.
    pub difference: RatioRecord,
    pub duality_defect: f64,
    /// Boundary pairing minus the sum of coefficient and perturbation pairings;
    /// zero for exact solutions.
    pub identity_defect: f64,
    pub monotonicity: MonotonicitySlack,
}

/// Evaluates the estimate, the duality identity and the monotonicity
/// inequality for `solution` (data `perturbation`) and `solution_bar`
/// (data `perturbation_bar`), both solving `coefficients`.
pub fn perturbation_report(
    topology: &TreeTopology,
    coefficients: &dyn CoefficientSet,
    domination: &DominationData,
    perturbation: &PerturbationData,
    perturbation_bar: &PerturbationData,
    solution: &SolutionPair,
    solution_bar: &SolutionPair,
) -> Result<PerturbationReport> {
    let n = coefficients.dim();
    domination.check(topology, n)?;
    expect_same_tree(topology, n, [solution, solution_bar])?;
    perturbation.check(topology, n)?;
    perturbation_bar.check(topology, n)?;
    let horizon = topology.horizon();
    let (mu, nu) = (domination.mu(), domination.nu());
    let gap = solution.add_scaled(-1.0, solution_bar)?;
    let data_gap = perturbation.add_scaled(-1.0, perturbation_bar)?;
    let lhs = gap.x.sum_mean_square(topology) + gap.y.sum_mean_square(topology);
    let data = data_gap.xi.norm_squared()
        + data_gap.eta.mean_square(topology)
        + data_gap.phi.sum_mean_square(topology)
        + data_gap.psi.sum_mean_square(topology)
        + data_gap.gamma.sum_mean_square(topology);

    let (y0, y0_bar) = (solution.y.vector(0, 0), solution_bar.y.vector(0, 0));
    let y0_gap = &y0 - &y0_bar;
    let lambda_gap = coefficients.lambda(&y0) - coefficients.lambda(&y0_bar) + &data_gap.xi;
    let mut boundary = -lambda_gap.dot(&y0_gap);
    let mut mono_lhs = mu * (domination.m() * &y0_gap).norm_squared();
    let mut mono_rhs = data_gap.xi.dot(&y0_gap);
    for (node, p) in topology.level_probabilities(horizon).iter().enumerate() {
        let (x, x_bar) = (solution.x.vector(horizon, node), solution_bar.x.vector(horizon, node));
        let x_gap = &x - &x_bar;
        let eta_gap = data_gap.eta.vector(node);
        let phi_gap = coefficients.phi(node, &x) - coefficients.phi(node, &x_bar) + &eta_gap;
        boundary += p * phi_gap.dot(&x_gap);
        mono_lhs += p * nu * (domination.g(node) * &x_gap).norm_squared();
        mono_rhs -= p * eta_gap.dot(&x_gap);
    }

    let mut increments = 0.0;
    let (thetas, thetas_bar) = (solution.thetas(topology)?, solution_bar.thetas(topology)?);
    for k in 0..horizon {
        let (y_mean, z_mean) = cond_prev(topology, gap.y.field(k + 1))?;
        for (node, p) in topology.level_probabilities(k).iter().enumerate() {
            let theta_gap = thetas[k][node].minus(&thetas_bar[k][node]);
            let gamma_gap = coefficients
                .gamma(k, node, &thetas[k][node])
                .minus(&coefficients.gamma(k, node, &thetas_bar[k][node]));
            let (a, b, c) = domination.abc(k, node);
            let (y_gap, z_gap) = (y_mean.vector(node), z_mean.vector(node));
            let pairing = data_gap.psi.vector(k, node).dot(&y_gap)
                + data_gap.gamma.vector(k, node).dot(&z_gap)
                + theta_gap.x.dot(&data_gap.phi.vector(k, node));
            increments += p * (gamma_gap.pairing(&theta_gap) + pairing);
            mono_rhs += p * pairing;
            mono_lhs += p * (nu * (a * &theta_gap.x).norm_squared() + mu * (b * &y_gap + c * &z_gap).norm_squared());
        }
    }

    Ok(PerturbationReport {
        difference: RatioRecord::new(lhs, data),
        duality_defect: telescoping_defect(topology, &gap.x, &gap.y)?,
        identity_defect: boundary - increments,
        monotonicity: MonotonicitySlack {
            lhs: mono_lhs,
            rhs: mono_rhs,
            slack: mono_rhs - mono_lhs,
        },
    })
}
