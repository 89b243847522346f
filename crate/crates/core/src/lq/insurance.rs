//! Wealth and liability of an insurer on a scenario tree.
//!
//! Wealth follows `x_{k+1} = (1 + r_k) x_k + ρ_k u_k + σ_k u_k w_k` from
//! `x_0 = m_0`. The liability value `y_k = E[(1 + λ_k) y_{k+1} - c_k x_k | F_k]`
//! with `y_N = 0` conditions on the draws up to and including `w_k`, so `y_k`
//! lives on level `k + 1` of the tree rather than level `k`.

use serde::{Deserialize, Serialize};

use super::ControlProcess;
use crate::error::{Error, Result};
use crate::tree::{AdaptedProcess, Field, TreeTopology};

/// Per-step market and contract data; every list has one entry per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsuranceParameters {
    /// Risk-free rates `r_k`.
    pub rate: Vec<f64>,
    /// Risk premia `ρ_k`.
    pub premium: Vec<f64>,
    /// Volatilities `σ_k`, strictly positive.
    pub volatility: Vec<f64>,
    /// Liability growth rates `λ_k`.
    pub growth: Vec<f64>,
    /// Payout ratios `c_k`.
    pub payout: Vec<f64>,
    /// Initial wealth `m_0`.
    pub initial_wealth: f64,
}

impl InsuranceParameters {
    /// Checks lengths against the horizon, finiteness and `σ_k > 0`.
    pub fn validate(&self, topology: &TreeTopology) -> Result<()> {
        let horizon = topology.horizon();
        let lists = [
            (&self.rate, "rate"),
            (&self.premium, "premium"),
            (&self.volatility, "volatility"),
            (&self.growth, "growth"),
            (&self.payout, "payout"),
        ];
        for (values, what) in lists {
            if values.len() != horizon {
                return Err(Error::Shape(format!(
                    "{what} lists {} steps, the tree has {horizon}",
                    values.len()
                )));
            }
            if !values.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidData(format!("{what} has non-finite entries")));
            }
        }
        if !self.initial_wealth.is_finite() {
            return Err(Error::InvalidData("initial wealth must be finite".into()));
        }
        if let Some(k) = self.volatility.iter().position(|&s| s <= 0.0) {
            return Err(Error::InvalidData(format!(
                "volatility at step {k} is {}, it must be positive",
                self.volatility[k]
            )));
        }
        Ok(())
    }

    /// Wealth after one step from `x` with investment `u` and draw `w`.
    fn step(&self, k: usize, x: f64, u: f64, w: f64) -> f64 {
        (1.0 + self.rate[k]) * x + self.premium[k] * u + self.volatility[k] * u * w
    }
}

/// Largest recursion defects of a computed pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InsuranceResiduals {
    pub wealth: f64,
    pub liability: f64,
}

impl InsuranceResiduals {
    pub fn overall(&self) -> f64 {
        self.wealth.max(self.liability)
    }
}

/// Wealth on levels `0..N` and liability values `y_0..y_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct InsuranceSolution {
    pub wealth: AdaptedProcess,
    /// `liability[k]` lives on level `min(k + 1, N)`; `liability[N]` is zero.
    pub liability: Vec<Field>,
    pub residuals: InsuranceResiduals,
}

/// Runs both recursions for the investment `control` and measures their defects.
pub fn insurance_demo(
    topology: &TreeTopology,
    parameters: &InsuranceParameters,
    control: &ControlProcess,
) -> Result<InsuranceSolution> {
    parameters.validate(topology)?;
    control.check(topology, 1)?;
    let horizon = topology.horizon();

    let mut wealth = AdaptedProcess::zeros(topology, 1, 0..=horizon)?;
    wealth.field_mut(0).set(0, &scalar(parameters.initial_wealth));
    for k in 0..horizon {
        for node in 0..topology.level_size(k) {
            let (x, u) = (wealth.at(k, node)[0], control.process().at(k, node)[0]);
            for branch in 0..topology.branching() {
                let next = parameters.step(k, x, u, topology.noise(branch));
                wealth.field_mut(k + 1).set(topology.child(node, branch), &scalar(next));
            }
        }
    }

    let mut liability = vec![Field::zeros(topology, horizon, 1)];
    for k in (0..horizon).rev() {
        let mut current = Field::zeros(topology, k + 1, 1);
        for node in 0..topology.level_size(k + 1) {
            let value = liability_step(topology, parameters, &wealth, liability.last().expect("nonempty"), k, node);
            current.set(node, &scalar(value));
        }
        liability.push(current);
    }
    liability.reverse();

    let residuals = insurance_residuals(topology, parameters, control, &wealth, &liability)?;
    Ok(InsuranceSolution {
        wealth,
        liability,
        residuals,
    })
}

/// `(1 + λ_k) E[y_{k+1} | F_k] - c_k x_k` at the level-`(k+1)` node `node`.
fn liability_step(
    topology: &TreeTopology,
    parameters: &InsuranceParameters,
    wealth: &AdaptedProcess,
    next: &Field,
    k: usize,
    node: usize,
) -> f64 {
    let expected_next = if k + 1 == topology.horizon() {
        next.at(node)[0]
    } else {
        (0..topology.branching())
            .map(|branch| topology.branch_probability(branch) * next.at(topology.child(node, branch))[0])
            .sum()
    };
    let (parent, _) = topology.parent(node);
    (1.0 + parameters.growth[k]) * expected_next - parameters.payout[k] * wealth.at(k, parent)[0]
}

fn insurance_residuals(
    topology: &TreeTopology,
    parameters: &InsuranceParameters,
    control: &ControlProcess,
    wealth: &AdaptedProcess,
    liability: &[Field],
) -> Result<InsuranceResiduals> {
    let horizon = topology.horizon();
    let mut forward: f64 = (wealth.at(0, 0)[0] - parameters.initial_wealth).abs();
    let mut backward: f64 = liability[horizon].data().iter().fold(0.0, |acc, v| acc.max(v.abs()));
    for k in 0..horizon {
        for node in 0..topology.level_size(k + 1) {
            let (parent, branch) = topology.parent(node);
            let u = control.process().at(k, parent)[0];
            let expected = parameters.step(k, wealth.at(k, parent)[0], u, topology.noise(branch));
            forward = forward.max((wealth.at(k + 1, node)[0] - expected).abs());
            let value = liability_step(topology, parameters, wealth, &liability[k + 1], k, node);
            backward = backward.max((liability[k].at(node)[0] - value).abs());
        }
    }
    if !(forward.is_finite() && backward.is_finite()) {
        return Err(Error::NonFinite {
            time: 0,
            node: 0,
            what: "insurance recursion".into(),
        });
    }
    Ok(InsuranceResiduals {
        wealth: forward,
        liability: backward,
    })
}

/// Liability values `y_0..y_{N-1}` computed leaf by leaf as conditional
/// expectations of the discounted payment sums
/// `Σ_{j ≥ k} Π_{k ≤ i < j} (1 + λ_i) (-c_j x_j)`, with wealth rebuilt along each path.
pub fn insurance_path_sum(
    topology: &TreeTopology,
    parameters: &InsuranceParameters,
    control: &ControlProcess,
) -> Result<Vec<Field>> {
    parameters.validate(topology)?;
    control.check(topology, 1)?;
    let horizon = topology.horizon();
    let mut values: Vec<Field> = (0..horizon).map(|k| Field::zeros(topology, k + 1, 1)).collect();
    for leaf in 0..topology.level_size(horizon) {
        let digits = topology.path(horizon, leaf);
        let mut prefixes = vec![0usize; horizon + 1];
        let mut path_wealth = vec![parameters.initial_wealth; horizon + 1];
        for (j, &digit) in digits.iter().enumerate() {
            prefixes[j + 1] = prefixes[j] * topology.branching() + digit;
            let u = control.process().at(j, prefixes[j])[0];
            path_wealth[j + 1] = parameters.step(j, path_wealth[j], u, topology.noise(digit));
        }
        for k in 0..horizon {
            let weight: f64 = digits[k + 1..]
                .iter()
                .map(|&digit| topology.branch_probability(digit))
                .product();
            let mut discount = 1.0;
            let mut payments = 0.0;
            for j in k..horizon {
                payments += discount * (-parameters.payout[j] * path_wealth[j]);
                discount *= 1.0 + parameters.growth[j];
            }
            let node = prefixes[k + 1];
            let current = values[k].at(node)[0];
            values[k].set(node, &scalar(current + weight * payments));
        }
    }
    Ok(values)
}

fn scalar(value: f64) -> crate::linalg::Vector {
    crate::linalg::Vector::from_element(1, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(horizon: usize, payout: f64) -> InsuranceParameters {
        InsuranceParameters {
            rate: vec![0.0; horizon],
            premium: vec![0.0; horizon],
            volatility: vec![1.0; horizon],
            growth: vec![0.0; horizon],
            payout: vec![payout; horizon],
            initial_wealth: 1.0,
        }
    }

    #[test]
    fn zero_rates_accumulate_payments() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let control = ControlProcess::zeros(&topology, 1).unwrap();
        let solution = insurance_demo(&topology, &flat(2, 1.0), &control).unwrap();
        assert!(solution.wealth.fields().iter().all(|f| f.data().iter().all(|&x| x == 1.0)));
        assert!(solution.liability[1].data().iter().all(|&y| y == -1.0));
        assert_eq!(solution.liability[0].data(), &[-2.0, -2.0]);
        assert_eq!(solution.residuals.overall(), 0.0);
    }

    #[test]
    fn no_payout_means_no_liability_and_compounding_wealth() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let mut parameters = flat(3, 0.0);
        parameters.rate = vec![0.1, 0.2, 0.3];
        parameters.initial_wealth = 2.0;
        let control = ControlProcess::zeros(&topology, 1).unwrap();
        let solution = insurance_demo(&topology, &parameters, &control).unwrap();
        let expected = 2.0 * 1.1 * 1.2 * 1.3;
        assert!(solution.wealth.field(3).data().iter().all(|&x| (x - expected).abs() < 1e-14));
        assert!(solution.liability.iter().all(|f| f.data().iter().all(|&y| y == 0.0)));
    }

    #[test]
    fn nonpositive_volatility_is_rejected() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let mut parameters = flat(2, 1.0);
        parameters.volatility[1] = 0.0;
        let control = ControlProcess::zeros(&topology, 1).unwrap();
        assert!(matches!(
            insurance_demo(&topology, &parameters, &control),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn path_sums_match_the_recursion() {
        let topology = TreeTopology::rademacher(4).unwrap();
        let parameters = InsuranceParameters {
            rate: vec![0.01, 0.02, 0.015, 0.03],
            premium: vec![0.05, 0.04, 0.06, 0.05],
            volatility: vec![0.2, 0.25, 0.2, 0.3],
            growth: vec![0.02, 0.01, 0.03, 0.02],
            payout: vec![0.1, 0.05, 0.1, 0.08],
            initial_wealth: 1.0,
        };
        let control = ControlProcess::random(&topology, 1, 0.5, 3).unwrap();
        let solution = insurance_demo(&topology, &parameters, &control).unwrap();
        let sums = insurance_path_sum(&topology, &parameters, &control).unwrap();
        for (k, field) in sums.iter().enumerate() {
            for (a, b) in field.data().iter().zip(solution.liability[k].data()) {
                assert!((a - b).abs() < 1e-12, "level {k}: {a} vs {b}");
            }
        }
    }
}
