//! Forward stochastic difference equations
//! `x_{k+1} = b(k, x_k) + σ(k, x_k) w_k`, `x_0 = η`, solved exactly on a tree,
//! together with the data-difference stability ratio.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix, Vector};
use crate::tree::{AdaptedProcess, Field, TreeTopology};

/// Coefficient callback `(k, level-k node, x) -> R^n`.
pub type ForwardMap<'a> = Box<dyn Fn(usize, usize, &Vector) -> Vector + Send + Sync + 'a>;

/// A forward equation on a fixed tree.
pub struct SdeProblem<'a> {
    topology: &'a TreeTopology,
    initial: Vector,
    drift: ForwardMap<'a>,
    diffusion: ForwardMap<'a>,
}

impl<'a> SdeProblem<'a> {
    /// Bundles the data; `initial` must be finite.
    pub fn new(topology: &'a TreeTopology, initial: Vector, drift: ForwardMap<'a>, diffusion: ForwardMap<'a>) -> Result<Self> {
        if initial.is_empty() {
            return Err(Error::Shape("the initial state must be nonempty".into()));
        }
        if !all_finite(initial.as_slice()) {
            return Err(Error::InvalidData("the initial state must be finite".into()));
        }
        Ok(Self {
            topology,
            initial,
            drift,
            diffusion,
        })
    }

    /// Affine coefficients `b = A_k x + a_k`, `σ = C_k x + c_k` shared by all nodes of a level.
    pub fn affine(
        topology: &'a TreeTopology,
        initial: Vector,
        drift: Vec<(Matrix, Vector)>,
        diffusion: Vec<(Matrix, Vector)>,
    ) -> Result<Self> {
        let n = initial.len();
        let horizon = topology.horizon();
        for (what, blocks) in [("drift", &drift), ("diffusion", &diffusion)] {
            if blocks.len() != horizon {
                return Err(Error::Shape(format!("{what} needs {horizon} steps, got {}", blocks.len())));
            }
            for (k, (matrix, offset)) in blocks.iter().enumerate() {
                if matrix.shape() != (n, n) || offset.len() != n {
                    return Err(Error::Shape(format!("{what} at step {k} must be {n}x{n} plus a length-{n} offset")));
                }
            }
        }
        Self::new(
            topology,
            initial,
            Box::new(move |k, _, x| &drift[k].0 * x + &drift[k].1),
            Box::new(move |k, _, x| &diffusion[k].0 * x + &diffusion[k].1),
        )
    }

    /// The tree.
    pub fn topology(&self) -> &TreeTopology {
        self.topology
    }

    /// `η`.
    pub fn initial(&self) -> &Vector {
        &self.initial
    }

    /// `b(k, node, x)`.
    pub fn drift(&self, k: usize, node: usize, x: &Vector) -> Vector {
        (self.drift)(k, node, x)
    }

    /// `σ(k, node, x)`.
    pub fn diffusion(&self, k: usize, node: usize, x: &Vector) -> Vector {
        (self.diffusion)(k, node, x)
    }
}

fn checked(value: Vector, n: usize, k: usize, node: usize, what: &str) -> Result<Vector> {
    if value.len() != n {
        return Err(Error::Shape(format!(
            "{what} at time {k}, node {node} has length {}, expected {n}",
            value.len()
        )));
    }
    if !all_finite(value.as_slice()) {
        return Err(Error::NonFinite {
            time: k,
            node,
            what: what.into(),
        });
    }
    Ok(value)
}

/// Runs the forward recursion over every node.
pub fn solve_sde(problem: &SdeProblem<'_>) -> Result<AdaptedProcess> {
    let topology = problem.topology;
    let n = problem.initial.len();
    let mut fields = Vec::with_capacity(topology.horizon() + 1);
    fields.push(Field::constant(topology, 0, &problem.initial));
    for k in 0..topology.horizon() {
        let current = &fields[k];
        let mut next = Field::zeros(topology, k + 1, n);
        for node in 0..topology.level_size(k) {
            let x = current.vector(node);
            let drift = checked(problem.drift(k, node, &x), n, k, node, "drift")?;
            let diffusion = checked(problem.diffusion(k, node, &x), n, k, node, "diffusion")?;
            for branch in 0..topology.branching() {
                let value = &drift + &diffusion * topology.noise(branch);
                next.set(topology.child(node, branch), &value);
            }
        }
        fields.push(next);
    }
    AdaptedProcess::from_fields(fields)
}

/// Left side, right side and their ratio for one stability estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioRecord {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`; zero when both vanish, absent (unbounded) when only `rhs` does.
    pub ratio: Option<f64>,
}

impl RatioRecord {
    /// Forms the ratio with the conventions above.
    pub fn new(lhs: f64, rhs: f64) -> Self {
        let ratio = if rhs > 0.0 {
            Some(lhs / rhs)
        } else if lhs == 0.0 {
            Some(0.0)
        } else {
            None
        };
        Self { lhs, rhs, ratio }
    }
}

/// Difference estimate and the single-solution bound for a pair of forward problems.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdeStabilityReport {
    /// `E Σ|x - x̄|²` against `|η - η̄|² + E Σ(|b(x̄) - b̄(x̄)|² + |σ(x̄) - σ̄(x̄)|²)`.
    pub difference: RatioRecord,
    /// `E Σ|x|²` against `|η|² + E Σ(|b(0)|² + |σ(0)|²)`.
    pub bound: RatioRecord,
}

/// Solves both problems and compares them.
pub fn sde_stability_report(problem: &SdeProblem<'_>, problem_bar: &SdeProblem<'_>) -> Result<SdeStabilityReport> {
    let topology = problem.topology;
    if topology != problem_bar.topology {
        return Err(Error::Shape("both problems must live on the same tree".into()));
    }
    let x = solve_sde(problem)?;
    let x_bar = solve_sde(problem_bar)?;
    let lhs = x.add_scaled(-1.0, &x_bar)?.sum_mean_square(topology);
    let n = x.dim();
    let zero = Vector::zeros(n);
    let mut rhs = (&problem.initial - &problem_bar.initial).norm_squared();
    let mut rhs_bound = problem.initial.norm_squared();
    for k in 0..topology.horizon() {
        for (node, p) in topology.level_probabilities(k).iter().enumerate() {
            let at = x_bar.vector(k, node);
            let drift_gap = problem.drift(k, node, &at) - problem_bar.drift(k, node, &at);
            let diffusion_gap = problem.diffusion(k, node, &at) - problem_bar.diffusion(k, node, &at);
            rhs += p * (drift_gap.norm_squared() + diffusion_gap.norm_squared());
            rhs_bound += p * (problem.drift(k, node, &zero).norm_squared() + problem.diffusion(k, node, &zero).norm_squared());
        }
    }
    Ok(SdeStabilityReport {
        difference: RatioRecord::new(lhs, rhs),
        bound: RatioRecord::new(x.sum_mean_square(topology), rhs_bound),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem<'a>(
        topology: &'a TreeTopology,
        eta: f64,
        drift: impl Fn(f64) -> f64 + Send + Sync + 'a,
        diffusion: impl Fn(f64) -> f64 + Send + Sync + 'a,
    ) -> SdeProblem<'a> {
        SdeProblem::new(
            topology,
            Vector::from_element(1, eta),
            Box::new(move |_, _, x| Vector::from_element(1, drift(x[0]))),
            Box::new(move |_, _, x| Vector::from_element(1, diffusion(x[0]))),
        )
        .unwrap()
    }

    #[test]
    fn identity_drift_keeps_the_state() {
        let topology = TreeTopology::rademacher(4).unwrap();
        let x = solve_sde(&scalar_problem(&topology, 1.0, |x| x, |_| 0.0)).unwrap();
        for k in 0..=4 {
            assert!(x.field(k).data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn doubling_drift() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let x = solve_sde(&scalar_problem(&topology, 1.0, |x| 2.0 * x, |_| 0.0)).unwrap();
        for k in 0..=3 {
            assert!(x.field(k).data().iter().all(|&v| v == f64::powi(2.0, k as i32)));
        }
    }

    #[test]
    fn pure_noise_has_unit_variance() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let x = solve_sde(&scalar_problem(&topology, 0.0, |_| 0.0, |_| 1.0)).unwrap();
        for k in 1..=3 {
            let field = x.field(k);
            let mean: f64 = topology.level_probabilities(k).iter().zip(field.data()).map(|(p, v)| p * v).sum();
            assert_eq!(mean, 0.0);
            assert_eq!(field.mean_square(&topology), 1.0);
        }
        assert_eq!(x.at(1, 0), &[1.0]);
        assert_eq!(x.at(1, 1), &[-1.0]);
    }

    #[test]
    fn non_finite_coefficients_name_the_node() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let problem = scalar_problem(&topology, 1.0, |x| if x < 0.0 { f64::NAN } else { x }, |_| 2.0);
        match solve_sde(&problem) {
            Err(Error::NonFinite { time, node, .. }) => assert_eq!((time, node), (1, 1)),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn shifted_initial_state_gives_horizon_plus_one() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let delta = 0.25;
        let base = scalar_problem(&topology, 1.0, |x| x, |_| 0.0);
        let shifted = scalar_problem(&topology, 1.0 + delta, |x| x, |_| 0.0);
        let report = sde_stability_report(&base, &shifted).unwrap();
        assert_eq!(report.difference.lhs, 4.0 * delta * delta);
        assert_eq!(report.difference.rhs, delta * delta);
        assert_eq!(report.difference.ratio, Some(4.0));
    }

    #[test]
    fn topology_mismatch_is_rejected() {
        let small = TreeTopology::rademacher(2).unwrap();
        let large = TreeTopology::rademacher(3).unwrap();
        let a = scalar_problem(&small, 0.0, |x| x, |_| 0.0);
        let b = scalar_problem(&large, 0.0, |x| x, |_| 0.0);
        assert!(sde_stability_report(&a, &b).is_err());
    }

    #[test]
    fn ratio_conventions() {
        assert_eq!(RatioRecord::new(0.0, 0.0).ratio, Some(0.0));
        assert_eq!(RatioRecord::new(1.0, 0.0).ratio, None);
        assert_eq!(RatioRecord::new(1.0, 4.0).ratio, Some(0.25));
    }
}
