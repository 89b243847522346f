//! Backward stochastic difference equations
//! `y_k = f(k+1, y'_{k+1}, z'_{k+1})`, `y_N = ξ`, solved by one backward sweep.
//!
//! Here `y'_{k+1}` and `z'_{k+1}` are the conditional means of `y_{k+1}` and
//! `y_{k+1} w_k` given the first `k` noise draws, so the driver is evaluated
//! at level-`k` nodes. The driver is applied with a plus sign; callers that
//! need `y_k = -f(...)` negate their driver first.

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix, Vector};
use crate::sde::RatioRecord;
use crate::tree::{cond_prev, AdaptedProcess, Field, TreeTopology};

/// Driver callback `(k, level-k node, y', z') -> R^n`.
pub type BackwardMap<'a> = Box<dyn Fn(usize, usize, &Vector, &Vector) -> Vector + Send + Sync + 'a>;

/// A backward equation on a fixed tree.
pub struct BsdeProblem<'a> {
    topology: &'a TreeTopology,
    terminal: Field,
    driver: BackwardMap<'a>,
}

impl<'a> BsdeProblem<'a> {
    /// Bundles the data; `terminal` must be a finite level-`N` field.
    pub fn new(topology: &'a TreeTopology, terminal: Field, driver: BackwardMap<'a>) -> Result<Self> {
        if terminal.level() != topology.horizon() || terminal.nodes() != topology.level_size(topology.horizon()) {
            return Err(Error::Shape(format!(
                "the terminal value must be a level-{} field",
                topology.horizon()
            )));
        }
        if terminal.dim() == 0 {
            return Err(Error::Shape("the terminal value must be nonempty".into()));
        }
        if !all_finite(terminal.data()) {
            return Err(Error::InvalidData("the terminal value must be finite".into()));
        }
        Ok(Self {
            topology,
            terminal,
            driver,
        })
    }

    /// Affine driver `f = A_k y' + B_k z' + c_k` shared by all nodes of a level.
    pub fn affine(topology: &'a TreeTopology, terminal: Field, blocks: Vec<(Matrix, Matrix, Vector)>) -> Result<Self> {
        let n = terminal.dim();
        if blocks.len() != topology.horizon() {
            return Err(Error::Shape(format!(
                "driver needs {} steps, got {}",
                topology.horizon(),
                blocks.len()
            )));
        }
        for (k, (a, b, c)) in blocks.iter().enumerate() {
            if a.shape() != (n, n) || b.shape() != (n, n) || c.len() != n {
                return Err(Error::Shape(format!("driver at step {k} must be two {n}x{n} blocks plus an offset")));
            }
        }
        Self::new(
            topology,
            terminal,
            Box::new(move |k, _, y, z| &blocks[k].0 * y + &blocks[k].1 * z + &blocks[k].2),
        )
    }

    /// The tree.
    pub fn topology(&self) -> &TreeTopology {
        self.topology
    }

    /// `ξ`.
    pub fn terminal(&self) -> &Field {
        &self.terminal
    }

    /// `f(k+1, node, y', z')`.
    pub fn driver(&self, k: usize, node: usize, y: &Vector, z: &Vector) -> Vector {
        (self.driver)(k, node, y, z)
    }
}

/// Runs the backward sweep.
pub fn solve_bsde(problem: &BsdeProblem<'_>) -> Result<AdaptedProcess> {
    let topology = problem.topology;
    let horizon = topology.horizon();
    let n = problem.terminal.dim();
    let mut fields = vec![problem.terminal.clone()];
    for k in (0..horizon).rev() {
        let (mean, weighted) = cond_prev(topology, fields.last().expect("nonempty"))?;
        let mut current = Field::zeros(topology, k, n);
        for node in 0..topology.level_size(k) {
            let value = problem.driver(k, node, &mean.vector(node), &weighted.vector(node));
            if value.len() != n {
                return Err(Error::Shape(format!(
                    "driver at time {k}, node {node} has length {}, expected {n}",
                    value.len()
                )));
            }
            if !all_finite(value.as_slice()) {
                return Err(Error::NonFinite {
                    time: k,
                    node,
                    what: "driver".into(),
                });
            }
            current.set(node, &value);
        }
        fields.push(current);
    }
    fields.reverse();
    AdaptedProcess::from_fields(fields)
}

/// Difference estimate and single-solution bound for a pair of backward problems.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BsdeStabilityReport {
    /// `E Σ|y - ȳ|²` against `E|ξ - ξ̄|² + Σ E|f(ȳ', z̄') - f̄(ȳ', z̄')|²`.
    pub difference: RatioRecord,
    /// `E Σ|y|²` against `E|ξ|² + Σ E|f(0, 0)|²`.
    pub bound: RatioRecord,
}

/// Solves both problems and compares them.
pub fn bsde_stability_report(problem: &BsdeProblem<'_>, problem_bar: &BsdeProblem<'_>) -> Result<BsdeStabilityReport> {
    let topology = problem.topology;
    if topology != problem_bar.topology {
        return Err(Error::Shape("both problems must live on the same tree".into()));
    }
    let y = solve_bsde(problem)?;
    let y_bar = solve_bsde(problem_bar)?;
    let lhs = y.add_scaled(-1.0, &y_bar)?.sum_mean_square(topology);
    let n = y.dim();
    let zero = Vector::zeros(n);
    let terminal_gap = problem.terminal.add_scaled(-1.0, &problem_bar.terminal);
    let mut rhs = terminal_gap.mean_square(topology);
    let mut rhs_bound = problem.terminal.mean_square(topology);
    for k in 0..topology.horizon() {
        let (mean, weighted) = cond_prev(topology, y_bar.field(k + 1))?;
        for (node, p) in topology.level_probabilities(k).iter().enumerate() {
            let (yp, zp) = (mean.vector(node), weighted.vector(node));
            let gap = problem.driver(k, node, &yp, &zp) - problem_bar.driver(k, node, &yp, &zp);
            rhs += p * gap.norm_squared();
            rhs_bound += p * problem.driver(k, node, &zero, &zero).norm_squared();
        }
    }
    Ok(BsdeStabilityReport {
        difference: RatioRecord::new(lhs, rhs),
        bound: RatioRecord::new(y.sum_mean_square(topology), rhs_bound),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_noise(topology: &TreeTopology) -> Field {
        let horizon = topology.horizon();
        Field::from_fn(topology, horizon, 1, |node| {
            Vector::from_element(1, topology.noise(topology.parent(node).1))
        })
        .unwrap()
    }

    #[test]
    fn martingale_of_last_noise_vanishes() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let problem = BsdeProblem::new(&topology, last_noise(&topology), Box::new(|_, _, y, _| y.clone())).unwrap();
        let y = solve_bsde(&problem).unwrap();
        for k in 0..3 {
            assert!(y.field(k).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_terminal_propagates() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let terminal = Field::constant(&topology, 3, &Vector::from_element(1, 2.5));
        let problem = BsdeProblem::new(&topology, terminal, Box::new(|_, _, y, _| y.clone())).unwrap();
        let y = solve_bsde(&problem).unwrap();
        for k in 0..=3 {
            assert!(y.field(k).data().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn noise_weighted_mean_picks_up_the_last_draw() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let problem = BsdeProblem::new(&topology, last_noise(&topology), Box::new(|_, _, y, z| y + z)).unwrap();
        let y = solve_bsde(&problem).unwrap();
        for k in 0..3 {
            assert!(y.field(k).data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn shifted_terminal_gives_horizon_plus_one() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let delta = 0.5;
        let terminal = last_noise(&topology);
        let shifted = terminal.add_scaled(1.0, &Field::constant(&topology, 2, &Vector::from_element(1, delta)));
        let a = BsdeProblem::new(&topology, terminal, Box::new(|_, _, y, _| y.clone())).unwrap();
        let b = BsdeProblem::new(&topology, shifted, Box::new(|_, _, y, _| y.clone())).unwrap();
        let report = bsde_stability_report(&a, &b).unwrap();
        assert_eq!(report.difference.lhs, 3.0 * delta * delta);
        assert_eq!(report.difference.rhs, delta * delta);
    }

    #[test]
    fn non_finite_driver_names_the_node() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let terminal = Field::constant(&topology, 2, &Vector::from_element(1, 1.0));
        let problem = BsdeProblem::new(
            &topology,
            terminal,
            Box::new(|k, node, y, _| if k == 1 && node == 1 { y * f64::INFINITY } else { y.clone() }),
        )
        .unwrap();
        assert!(matches!(solve_bsde(&problem), Err(Error::NonFinite { time: 1, node: 1, .. })));
    }
}
