//! Fully coupled forward-backward difference equations
//!
//! ```text
//! x_{k+1} = [b^α(k, θ_k) + ψ_k] + [σ^α(k, θ_k) + γ_k] w_k
//! y_k     = -[f^α(k+1, θ_k) + φ_k]
//! x_0     = Λ^α(y_0) + ξ,    y_N = Φ^α(x_N) + η
//! ```
//!
//! solved by the method of continuation: the α = 0 system is decoupled and
//! solved in one backward and one forward sweep, and each step `α → α + δ`
//! is a fixed point of the solve at level `α` with a shifted perturbation.

mod direct;
mod estimates;
mod ladder;
mod residual;

pub use direct::{solve_linear_direct, MAX_DIRECT_UNKNOWNS};
pub use estimates::{
    apriori_report, perturbation_report, telescoping_defect, AprioriReport, MonotonicitySlack, PerturbationReport,
};
pub use ladder::{
    solve_fbsde, solve_fbsde_from, Attempt, ContinuationOptions, LevelStats, SolveDiagnostics, ABS_FLOOR,
};
pub use residual::{residual, DefectKind, ResidualRecord};

use crate::bsde::{solve_bsde, BsdeProblem};
use crate::coefficients::{CoefficientSet, DominationCase, DominationData, Theta};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, Vector};
use crate::sde::{solve_sde, SdeProblem};
use crate::tree::{cond_prev, random_adapted, random_field, Aggregate, AdaptedProcess, Field, NormKind, TreeTopology};

/// The inhomogeneous terms `(ξ, η, φ, ψ, γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationData {
    pub xi: Vector,
    /// Level-`N` field added to the terminal condition.
    pub eta: Field,
    /// Added to the driver, over `0..N-1`.
    pub phi: AdaptedProcess,
    /// Added to the drift, over `0..N-1`.
    pub psi: AdaptedProcess,
    /// Added to the diffusion, over `0..N-1`.
    pub gamma: AdaptedProcess,
}

impl PerturbationData {
    /// All-zero data of dimension `dim`.
    pub fn zeros(topology: &TreeTopology, dim: usize) -> Result<Self> {
        let horizon = topology.horizon();
        let steps = || AdaptedProcess::zeros(topology, dim, 0..=horizon - 1);
        Ok(Self {
            xi: Vector::zeros(dim),
            eta: Field::zeros(topology, horizon, dim),
            phi: steps()?,
            psi: steps()?,
            gamma: steps()?,
        })
    }

    /// Standard normal entries multiplied by `scale`, reproducible from `seed`.
    pub fn random(topology: &TreeTopology, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let horizon = topology.horizon();
        let steps = |salt: u64| {
            random_adapted(topology, dim, 0..=horizon - 1, seed.wrapping_mul(8).wrapping_add(salt))
                .map(|p| p.scaled(scale))
        };
        let xi = random_field(topology, 0, dim, seed.wrapping_mul(8).wrapping_add(1))?.vector(0) * scale;
        Ok(Self {
            xi,
            eta: random_field(topology, horizon, dim, seed.wrapping_mul(8).wrapping_add(2))?.scaled(scale),
            phi: steps(3)?,
            psi: steps(4)?,
            gamma: steps(5)?,
        })
    }

    /// Dimension of every component.
    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    /// Errors unless the data has dimension `dim` on `topology` and is finite.
    pub fn check(&self, topology: &TreeTopology, dim: usize) -> Result<()> {
        let horizon = topology.horizon();
        if self.xi.len() != dim {
            return Err(Error::Shape(format!("ξ has length {}, expected {dim}", self.xi.len())));
        }
        if self.eta.level() != horizon || self.eta.dim() != dim || self.eta.nodes() != topology.level_size(horizon) {
            return Err(Error::Shape(format!("η must be a level-{horizon} field of dimension {dim}")));
        }
        for (what, process) in [("φ", &self.phi), ("ψ", &self.psi), ("γ", &self.gamma)] {
            process.check_shape(dim, 0..=horizon - 1, what)?;
            for field in process.fields() {
                if field.nodes() != topology.level_size(field.level()) {
                    return Err(Error::Shape(format!("{what} does not live on this tree")));
                }
            }
        }
        let finite = all_finite(self.xi.as_slice())
            && all_finite(self.eta.data())
            && [&self.phi, &self.psi, &self.gamma]
                .iter()
                .all(|p| p.fields().iter().all(|f| all_finite(f.data())));
        if !finite {
            return Err(Error::InvalidData("perturbation data must be finite".into()));
        }
        Ok(())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &PerturbationData) -> Result<PerturbationData> {
        if self.xi.len() != other.xi.len() || self.eta.data().len() != other.eta.data().len() {
            return Err(Error::Shape("perturbations have different shapes".into()));
        }
        Ok(Self {
            xi: &self.xi + &other.xi * scale,
            eta: self.eta.add_scaled(scale, &other.eta),
            phi: self.phi.add_scaled(scale, &other.phi)?,
            psi: self.psi.add_scaled(scale, &other.psi)?,
            gamma: self.gamma.add_scaled(scale, &other.gamma)?,
        })
    }

    /// Every component multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> PerturbationData {
        Self {
            xi: &self.xi * scale,
            eta: self.eta.scaled(scale),
            phi: self.phi.scaled(scale),
            psi: self.psi.scaled(scale),
            gamma: self.gamma.scaled(scale),
        }
    }

    /// Data of the reflected system (see [`crate::coefficients::Reflected`]):
    /// `η` and `φ` change sign, the forward terms are kept.
    pub fn reflected(&self) -> PerturbationData {
        Self {
            xi: self.xi.clone(),
            eta: self.eta.scaled(-1.0),
            phi: self.phi.scaled(-1.0),
            psi: self.psi.clone(),
            gamma: self.gamma.clone(),
        }
    }
}

impl Aggregate for PerturbationData {
    fn squared_norm(&self, topology: &TreeTopology, kind: NormKind) -> Result<f64> {
        match kind {
            NormKind::Perturbation => Ok(self.xi.norm_squared()
                + self.eta.mean_square(topology)
                + self.phi.sum_mean_square(topology)
                + self.psi.sum_mean_square(topology)
                + self.gamma.sum_mean_square(topology)),
            other => Err(Error::Usage(format!("{other:?} norm does not apply to perturbation data"))),
        }
    }
}

/// A candidate or computed solution `(x, y)` over `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionPair {
    pub x: AdaptedProcess,
    pub y: AdaptedProcess,
}

impl SolutionPair {
    /// Pairs two processes of equal shape.
    pub fn new(x: AdaptedProcess, y: AdaptedProcess) -> Result<Self> {
        x.check_same_shape(&y)?;
        Ok(Self { x, y })
    }

    /// The zero pair.
    pub fn zeros(topology: &TreeTopology, dim: usize) -> Result<Self> {
        let zero = AdaptedProcess::zeros(topology, dim, 0..=topology.horizon())?;
        Ok(Self {
            x: zero.clone(),
            y: zero,
        })
    }

    /// Random pair with standard normal entries times `scale`.
    pub fn random(topology: &TreeTopology, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let horizon = topology.horizon();
        Ok(Self {
            x: random_adapted(topology, dim, 0..=horizon, seed.wrapping_mul(2))?.scaled(scale),
            y: random_adapted(topology, dim, 0..=horizon, seed.wrapping_mul(2).wrapping_add(1))?.scaled(scale),
        })
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    /// Errors unless both processes cover `0..N` with dimension `dim`.
    pub fn check(&self, topology: &TreeTopology, dim: usize) -> Result<()> {
        self.x.check_shape(dim, 0..=topology.horizon(), "x")?;
        self.y.check_shape(dim, 0..=topology.horizon(), "y")?;
        for field in self.x.fields().iter().chain(self.y.fields()) {
            if field.nodes() != topology.level_size(field.level()) {
                return Err(Error::Shape("solution does not live on this tree".into()));
            }
        }
        Ok(())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &SolutionPair) -> Result<SolutionPair> {
        Ok(Self {
            x: self.x.add_scaled(scale, &other.x)?,
            y: self.y.add_scaled(scale, &other.y)?,
        })
    }

    /// `(E Σ |x_k|² + |y_k|²)^{1/2}`.
    pub fn norm(&self, topology: &TreeTopology) -> f64 {
        (self.x.sum_mean_square(topology) + self.y.sum_mean_square(topology)).sqrt()
    }

    /// Norm of the difference.
    pub fn distance(&self, other: &SolutionPair, topology: &TreeTopology) -> Result<f64> {
        Ok(self.add_scaled(-1.0, other)?.norm(topology))
    }

    /// `(x, -y)`, mapping solutions of a system to those of its reflection.
    pub fn reflected(&self) -> SolutionPair {
        Self {
            x: self.x.clone(),
            y: self.y.scaled(-1.0),
        }
    }

    /// `θ_k = (x_k, y'_{k+1}, z'_{k+1})` at every level-`k` node, for `k < N`.
    pub fn thetas(&self, topology: &TreeTopology) -> Result<Vec<Vec<Theta>>> {
        (0..topology.horizon())
            .map(|k| {
                let (mean, weighted) = cond_prev(topology, self.y.field(k + 1))?;
                Ok((0..topology.level_size(k))
                    .map(|node| Theta::new(self.x.vector(k, node), mean.vector(node), weighted.vector(node)))
                    .collect())
            })
            .collect()
    }
}

impl Aggregate for SolutionPair {
    fn squared_norm(&self, topology: &TreeTopology, kind: NormKind) -> Result<f64> {
        match kind {
            NormKind::Pair => Ok(self.x.sum_mean_square(topology) + self.y.sum_mean_square(topology)),
            other => Err(Error::Usage(format!("{other:?} norm does not apply to a solution pair"))),
        }
    }
}

/// A coefficient system together with its tree and domination data.
#[derive(Clone, Copy)]
pub struct FbsdeSystem<'a> {
    topology: &'a TreeTopology,
    coefficients: &'a dyn CoefficientSet,
    domination: &'a DominationData,
}

impl<'a> FbsdeSystem<'a> {
    /// Checks that the coefficients and domination data live on `topology`.
    pub fn new(
        topology: &'a TreeTopology,
        coefficients: &'a dyn CoefficientSet,
        domination: &'a DominationData,
    ) -> Result<Self> {
        coefficients.check_topology(topology)?;
        domination.check(topology, coefficients.dim())?;
        Ok(Self {
            topology,
            coefficients,
            domination,
        })
    }

    pub fn topology(&self) -> &'a TreeTopology {
        self.topology
    }

    pub fn coefficients(&self) -> &'a dyn CoefficientSet {
        self.coefficients
    }

    pub fn domination(&self) -> &'a DominationData {
        self.domination
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.coefficients.dim()
    }
}

/// Solves the decoupled α = 0 system.
///
/// In the `μ` case the backward half does not see `x`, so `y` is swept
/// first and `x` follows; in the `ν` case the order is reversed.
pub fn solve_alpha0(system: &FbsdeSystem<'_>, perturbation: &PerturbationData) -> Result<SolutionPair> {
    let topology = system.topology;
    let domination = system.domination;
    let n = system.dim();
    perturbation.check(topology, n)?;
    match domination.case() {
        DominationCase::Mu => {
            let phi = &perturbation.phi;
            let backward = BsdeProblem::new(
                topology,
                perturbation.eta.clone(),
                Box::new(move |k, node, _, _| -phi.vector(k, node)),
            )?;
            let y = solve_bsde(&backward)?;
            let conditioned = (0..topology.horizon())
                .map(|k| cond_prev(topology, y.field(k + 1)))
                .collect::<Result<Vec<_>>>()?;
            let forward_terms: Vec<Vec<(Vector, Vector)>> = conditioned
                .iter()
                .enumerate()
                .map(|(k, (mean, weighted))| {
                    (0..topology.level_size(k))
                        .map(|node| {
                            let (drift, diffusion) =
                                domination.core_forward(k, node, &mean.vector(node), &weighted.vector(node));
                            (
                                drift + perturbation.psi.vector(k, node),
                                diffusion + perturbation.gamma.vector(k, node),
                            )
                        })
                        .collect()
                })
                .collect();
            let initial = domination.core_lambda(&y.vector(0, 0)) + &perturbation.xi;
            let drifts = &forward_terms;
            let forward = SdeProblem::new(
                topology,
                initial,
                Box::new(move |k, node, _| drifts[k][node].0.clone()),
                Box::new(move |k, node, _| drifts[k][node].1.clone()),
            )?;
            let x = solve_sde(&forward)?;
            SolutionPair::new(x, y)
        }
        DominationCase::Nu => {
            let (psi, gamma) = (&perturbation.psi, &perturbation.gamma);
            let forward = SdeProblem::new(
                topology,
                perturbation.xi.clone(),
                Box::new(move |k, node, _| psi.vector(k, node)),
                Box::new(move |k, node, _| gamma.vector(k, node)),
            )?;
            let x = solve_sde(&forward)?;
            let horizon = topology.horizon();
            let terminal = Field::from_fn(topology, horizon, n, |node| {
                domination.core_phi(node, &x.vector(horizon, node)) + perturbation.eta.vector(node)
            })?;
            let y = {
                let (x_ref, phi) = (&x, &perturbation.phi);
                let backward = BsdeProblem::new(
                    topology,
                    terminal,
                    Box::new(move |k, node, _, _| {
                        -(domination.core_driver(k, node, &x_ref.vector(k, node)) + phi.vector(k, node))
                    }),
                )?;
                solve_bsde(&backward)?
            };
            SolutionPair::new(x, y)
        }
    }
}

/// Perturbation that turns a level-`α` solve into a level-`α + δ` solve
/// when the coupling terms are frozen along `guess`:
/// each component gains `δ` times the full coefficient minus its linear core.
pub fn tilde_perturbation(
    system: &FbsdeSystem<'_>,
    delta: f64,
    perturbation: &PerturbationData,
    guess: &SolutionPair,
) -> Result<PerturbationData> {
    let topology = system.topology;
    let n = system.dim();
    perturbation.check(topology, n)?;
    guess.check(topology, n)?;
    if !delta.is_finite() {
        return Err(Error::Usage(format!("step must be finite, got {delta}")));
    }
    let coefficients = system.coefficients;
    let domination = system.domination;
    let horizon = topology.horizon();
    let mut out = perturbation.clone();

    let y0 = guess.y.vector(0, 0);
    out.xi += (coefficients.lambda(&y0) - domination.core_lambda(&y0)) * delta;

    for node in 0..topology.level_size(horizon) {
        let x = guess.x.vector(horizon, node);
        let shift = (coefficients.phi(node, &x) - domination.core_phi(node, &x)) * delta;
        out.eta.set(node, &(perturbation.eta.vector(node) + shift));
    }

    for (k, thetas) in guess.thetas(topology)?.iter().enumerate() {
        for (node, theta) in thetas.iter().enumerate() {
            let gap = coefficients
                .gamma(k, node, theta)
                .minus(&domination.core_gamma(k, node, theta))
                .scaled(delta);
            out.phi.set(k, node, &(perturbation.phi.vector(k, node) + gap.driver));
            out.psi.set(k, node, &(perturbation.psi.vector(k, node) + gap.drift));
            out.gamma.set(k, node, &(perturbation.gamma.vector(k, node) + gap.diffusion));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{blend_alpha, AffineCoefficients, AffineMap, AffineStep, LinearMap};
    use crate::linalg::Matrix;
    use crate::tree::NodeMap;

    fn scalar(value: f64) -> Matrix {
        Matrix::from_element(1, 1, value)
    }

    fn zero_coefficients(n: usize, horizon: usize) -> AffineCoefficients {
        AffineCoefficients::new(
            n,
            LinearMap {
                matrix: Matrix::zeros(n, n),
                offset: Vector::zeros(n),
            },
            NodeMap::Uniform(LinearMap {
                matrix: Matrix::zeros(n, n),
                offset: Vector::zeros(n),
            }),
            vec![NodeMap::Uniform(AffineStep::zeros(n)); horizon],
        )
        .unwrap()
    }

    fn nu_domination(horizon: usize, a: f64) -> DominationData {
        DominationData::new(
            0.0,
            1.0,
            scalar(0.0),
            NodeMap::Uniform(scalar(1.0)),
            vec![NodeMap::Uniform(scalar(a)); horizon],
            vec![NodeMap::Uniform(scalar(0.0)); horizon],
            vec![NodeMap::Uniform(scalar(0.0)); horizon],
        )
        .unwrap()
    }

    fn mu_domination(horizon: usize) -> DominationData {
        DominationData::new(
            1.0,
            0.0,
            scalar(1.0),
            NodeMap::Uniform(scalar(0.0)),
            vec![NodeMap::Uniform(scalar(0.0)); horizon],
            vec![NodeMap::Uniform(scalar(0.0)); horizon],
            vec![NodeMap::Uniform(scalar(0.0)); horizon],
        )
        .unwrap()
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let coefficients = zero_coefficients(1, 3);
        let domination = nu_domination(3, 0.0);
        let system = FbsdeSystem::new(&topology, &coefficients, &domination).unwrap();
        let solution = solve_alpha0(&system, &PerturbationData::zeros(&topology, 1).unwrap()).unwrap();
        assert_eq!(solution, SolutionPair::zeros(&topology, 1).unwrap());
    }

    #[test]
    fn nu_case_follows_the_drift_perturbation() {
        let horizon = 4;
        let topology = TreeTopology::rademacher(horizon).unwrap();
        let coefficients = zero_coefficients(1, horizon);
        let domination = nu_domination(horizon, 0.0);
        let system = FbsdeSystem::new(&topology, &coefficients, &domination).unwrap();
        let mut perturbation = PerturbationData::zeros(&topology, 1).unwrap();
        for k in 0..horizon {
            *perturbation.psi.field_mut(k) = Field::constant(&topology, k, &Vector::from_element(1, 1.0));
        }
        let solution = solve_alpha0(&system, &perturbation).unwrap();
        // the decoupled forward equation has no x feedback, so x_{k+1} = ψ_k
        for k in 0..=horizon {
            let x_expected = if k == 0 { 0.0 } else { 1.0 };
            let y_expected = if k == horizon { 1.0 } else { 0.0 };
            assert!(solution.x.field(k).data().iter().all(|&v| v == x_expected));
            assert!(solution.y.field(k).data().iter().all(|&v| v == y_expected));
        }
    }

    #[test]
    fn mu_case_keeps_constants() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let coefficients = zero_coefficients(1, 3);
        let domination = mu_domination(3);
        let system = FbsdeSystem::new(&topology, &coefficients, &domination).unwrap();
        let mut perturbation = PerturbationData::zeros(&topology, 1).unwrap();
        perturbation.eta = Field::constant(&topology, 3, &Vector::from_element(1, 2.0));
        let solution = solve_alpha0(&system, &perturbation).unwrap();
        for k in 0..3 {
            assert!(solution.y.field(k).data().iter().all(|&v| v == 0.0));
            assert!(solution.x.field(k).data().iter().all(|&v| v == 0.0));
        }
        assert!(solution.y.field(3).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn alpha0_solution_has_zero_residual() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let coefficients = zero_coefficients(1, 3);
        for domination in [mu_domination(3), nu_domination(3, 0.7)] {
            let system = FbsdeSystem::new(&topology, &coefficients, &domination).unwrap();
            let perturbation = PerturbationData::random(&topology, 1, 1.0, 9).unwrap();
            let solution = solve_alpha0(&system, &perturbation).unwrap();
            let blended = blend_alpha(&coefficients, &domination, 0.0).unwrap();
            let record = residual(&topology, &blended, &perturbation, &solution).unwrap();
            assert!(record.overall <= 1e-13, "{record:?}");
        }
    }

    #[test]
    fn zero_step_leaves_the_perturbation_alone() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let coefficients = AffineCoefficients::new(
            1,
            LinearMap {
                matrix: scalar(-1.0),
                offset: Vector::from_element(1, 0.3),
            },
            NodeMap::Uniform(LinearMap {
                matrix: scalar(1.0),
                offset: Vector::zeros(1),
            }),
            vec![
                NodeMap::Uniform(AffineStep {
                    driver: AffineMap {
                        x: scalar(1.0),
                        ..AffineMap::zeros(1)
                    },
                    ..AffineStep::zeros(1)
                });
                2
            ],
        )
        .unwrap();
        let domination = mu_domination(2);
        let system = FbsdeSystem::new(&topology, &coefficients, &domination).unwrap();
        let perturbation = PerturbationData::random(&topology, 1, 1.0, 4).unwrap();
        let guess = SolutionPair::random(&topology, 1, 1.0, 5).unwrap();
        let out = tilde_perturbation(&system, 0.0, &perturbation, &guess).unwrap();
        assert_eq!(out, perturbation);
    }

    #[test]
    fn mismatched_guess_is_rejected() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let other = TreeTopology::rademacher(3).unwrap();
        let coefficients = zero_coefficients(1, 2);
        let domination = mu_domination(2);
        let system = FbsdeSystem::new(&topology, &coefficients, &domination).unwrap();
        let perturbation = PerturbationData::zeros(&topology, 1).unwrap();
        let guess = SolutionPair::zeros(&other, 1).unwrap();
        assert!(matches!(
            tilde_perturbation(&system, 0.5, &perturbation, &guess),
            Err(Error::Shape(_))
        ));
    }
}
