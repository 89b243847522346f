//! Linear-quadratic control on scenario trees.
//!
//! Both problems are solved twice: once through their Hamiltonian systems
//! with the continuation solver, and once as explicit convex quadratic
//! programs over the stacked decision vector. Decisions are stacked level
//! by level and, within a level, node by node.

mod backward;
mod forward;
mod insurance;

pub use backward::{
    assemble_blq, blq_state, cost_blq, oracle_blq, solve_blq, BackwardLqData, BackwardLqParts, BlqOracle, BlqSolution,
};
pub use forward::{
    assemble_flq, cost_flq, flq_state, oracle_flq, solve_flq, FlqOracle, FlqSolution, ForwardLqData, ForwardLqParts,
};
pub use insurance::{
    insurance_demo, insurance_path_sum, InsuranceParameters, InsuranceResiduals, InsuranceSolution,
};

use rand_chacha::ChaCha8Rng;

use crate::coefficients::{check_conditions, AffineCoefficients, CheckOptions, ConditionReport, DominationData};
use crate::continuation::{solve_linear_direct, PerturbationData, SolutionPair};
use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, min_eigenvalue, Matrix, Vector};
use crate::tree::{random_adapted, AdaptedProcess, NodeMap, TreeTopology};

/// Largest relative gap tolerated between the continuation and direct solutions.
pub const DIRECT_AGREEMENT: f64 = 1e-8;

/// Negative eigenvalues down to this size count as rounding in weight matrices.
const PSD_SLACK: f64 = 1e-12;

/// A control `u_k` stored on the level-`k` nodes for `k < N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProcess(AdaptedProcess);

impl ControlProcess {
    /// Wraps a process over `0..N-1`.
    pub fn new(topology: &TreeTopology, process: AdaptedProcess) -> Result<Self> {
        process.check_shape(process.dim(), 0..=topology.horizon() - 1, "control")?;
        for field in process.fields() {
            if field.nodes() != topology.level_size(field.level()) {
                return Err(Error::Shape("control does not live on this tree".into()));
            }
            if !field.data().iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidData("control values must be finite".into()));
            }
        }
        Ok(Self(process))
    }

    /// The zero control of dimension `dim`.
    pub fn zeros(topology: &TreeTopology, dim: usize) -> Result<Self> {
        Self::new(topology, AdaptedProcess::zeros(topology, dim, 0..=topology.horizon() - 1)?)
    }

    /// Standard normal values times `scale`.
    pub fn random(topology: &TreeTopology, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        Self::new(
            topology,
            random_adapted(topology, dim, 0..=topology.horizon() - 1, seed)?.scaled(scale),
        )
    }

    /// Control dimension.
    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    /// Value at step `k`, level-`k` node.
    pub fn vector(&self, k: usize, node: usize) -> Vector {
        self.0.vector(k, node)
    }

    /// The underlying process.
    pub fn process(&self) -> &AdaptedProcess {
        &self.0
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &ControlProcess) -> Result<ControlProcess> {
        Ok(Self(self.0.add_scaled(scale, &other.0)?))
    }

    /// Values stacked level by level, node by node.
    pub fn stacked(&self) -> Vector {
        Vector::from_iterator(
            self.0.fields().iter().map(|f| f.data().len()).sum(),
            self.0.fields().iter().flat_map(|f| f.data().iter().copied()),
        )
    }

    fn from_stacked(topology: &TreeTopology, dim: usize, values: &[f64]) -> Result<Self> {
        let mut process = AdaptedProcess::zeros(topology, dim, 0..=topology.horizon() - 1)?;
        let mut offset = 0;
        for k in 0..topology.horizon() {
            for node in 0..topology.level_size(k) {
                process.set(k, node, &Vector::from_column_slice(&values[offset..offset + dim]));
                offset += dim;
            }
        }
        Self::new(topology, process)
    }

    fn check(&self, topology: &TreeTopology, dim: usize) -> Result<()> {
        self.0.check_shape(dim, 0..=topology.horizon() - 1, "control")?;
        for field in self.0.fields() {
            if field.nodes() != topology.level_size(field.level()) {
                return Err(Error::Shape("control does not live on this tree".into()));
            }
        }
        Ok(())
    }
}

/// FBS△E coefficients of a Hamiltonian system, their certificate and its sampled check.
#[derive(Debug, Clone)]
pub struct HamiltonianSystem {
    pub coefficients: AffineCoefficients,
    pub domination: DominationData,
    pub conditions: ConditionReport,
}

impl HamiltonianSystem {
    fn new(
        topology: &TreeTopology,
        coefficients: AffineCoefficients,
        domination: DominationData,
        check: &CheckOptions,
    ) -> Result<Self> {
        let conditions = check_conditions(&coefficients, &domination, topology, check)?;
        Ok(Self {
            coefficients,
            domination,
            conditions,
        })
    }

    /// Relative distance between `solution` and the stacked direct solve.
    fn direct_gap(&self, topology: &TreeTopology, solution: &SolutionPair) -> Result<f64> {
        let zero = PerturbationData::zeros(topology, solution.dim())?;
        let direct = solve_linear_direct(topology, &self.coefficients, &zero)?;
        let gap = solution.distance(&direct, topology)?;
        let scale = direct.norm(topology);
        let relative = if scale > 0.0 { gap / scale } else { gap };
        if relative > DIRECT_AGREEMENT {
            return Err(Error::Internal(format!(
                "continuation and direct solutions differ by {relative:.3e} relative"
            )));
        }
        Ok(relative)
    }
}

/// `½ dᵀ H d + gᵀ d + c` accumulated from weighted affine terms.
struct Quadratic {
    hessian: Matrix,
    gradient: Vector,
    constant: f64,
}

impl Quadratic {
    fn new(size: usize) -> Self {
        Self {
            hessian: Matrix::zeros(size, size),
            gradient: Vector::zeros(size),
            constant: 0.0,
        }
    }

    /// Adds `½ weight ⟨W (L d + o), L d + o⟩`.
    fn add(&mut self, weight: f64, map: &Matrix, offset: &Vector, form: &Matrix) {
        let weighted = form * map;
        self.hessian += map.transpose() * &weighted * weight;
        self.gradient += map.transpose() * (form * offset) * weight;
        self.constant += 0.5 * weight * offset.dot(&(form * offset));
    }

    fn value(&self, point: &Vector) -> f64 {
        0.5 * point.dot(&(&self.hessian * point)) + self.gradient.dot(point) + self.constant
    }

    /// Minimizer and the norm of the gradient there.
    fn minimize(&self) -> Result<(Vector, f64)> {
        let symmetric = (&self.hessian + self.hessian.transpose()) * 0.5;
        let cholesky = symmetric.cholesky().ok_or_else(|| {
            Error::InvalidData("the criterion is not strictly convex in the stacked decisions".into())
        })?;
        let mut point = cholesky.solve(&(-&self.gradient));
        let correction = cholesky.solve(&(-(&self.hessian * &point + &self.gradient)));
        point += correction;
        let gradient_norm = (&self.hessian * &point + &self.gradient).norm();
        Ok((point, gradient_norm))
    }
}

/// Per-step node maps must cover the horizon and match the level sizes.
fn check_steps<T>(topology: &TreeTopology, maps: &[NodeMap<T>], what: &str) -> Result<()> {
    if maps.len() != topology.horizon() {
        return Err(Error::Shape(format!(
            "{what} covers {} steps, the tree has {}",
            maps.len(),
            topology.horizon()
        )));
    }
    for (k, map) in maps.iter().enumerate() {
        map.check(topology, k, what)?;
    }
    Ok(())
}

fn check_matrices(maps: &[NodeMap<Matrix>], rows: usize, cols: usize, what: &str) -> Result<()> {
    for (k, map) in maps.iter().enumerate() {
        for matrix in map.values() {
            check_matrix(matrix, rows, cols, &format!("{what} at step {k}"))?;
        }
    }
    Ok(())
}

fn check_matrix(matrix: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if matrix.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    if !matrix.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidData(format!("{what} has non-finite entries")));
    }
    Ok(())
}

fn check_vectors(maps: &[NodeMap<Vector>], len: usize, what: &str) -> Result<()> {
    for (k, map) in maps.iter().enumerate() {
        for vector in map.values() {
            if vector.len() != len || !vector.iter().all(|v| v.is_finite()) {
                return Err(Error::Shape(format!("{what} at step {k} must be a finite length-{len} vector")));
            }
        }
    }
    Ok(())
}

/// Errors unless `matrix` is symmetric with smallest eigenvalue at least `floor`
/// (up to rounding); returns that eigenvalue.
fn check_weight(matrix: &Matrix, floor: f64, strict: bool, what: &str) -> Result<f64> {
    if !is_symmetric(matrix) {
        return Err(Error::InvalidData(format!("{what} is not symmetric")));
    }
    let smallest = min_eigenvalue(matrix);
    let ok = if strict {
        smallest > floor
    } else {
        smallest >= floor - PSD_SLACK * matrix.amax().max(1.0)
    };
    if !ok {
        let kind = if strict { "positive definite" } else { "nonnegative definite" };
        return Err(Error::InvalidData(format!(
            "{what} is not {kind} (smallest eigenvalue {smallest:.3e})"
        )));
    }
    Ok(smallest)
}

fn check_weights(maps: &[NodeMap<Matrix>], dim: usize, strict: bool, what: &str) -> Result<f64> {
    let mut smallest = f64::INFINITY;
    for (k, map) in maps.iter().enumerate() {
        for matrix in map.values() {
            let label = format!("{what} at step {k}");
            check_matrix(matrix, dim, dim, &label)?;
            smallest = smallest.min(check_weight(matrix, 0.0, strict, &label)?);
        }
    }
    Ok(smallest)
}

/// Node-major offsets of the level-`k` blocks in a stacked level-major vector
/// covering levels `0..N-1` with `dim` entries per node.
fn stacked_offsets(topology: &TreeTopology, dim: usize) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(topology.horizon());
    let mut total = 0;
    for k in 0..topology.horizon() {
        offsets.push(total);
        total += topology.level_size(k) * dim;
    }
    (offsets, total)
}

/// One freshly drawn value per node for every step `0..N-1`.
fn per_step<T>(
    topology: &TreeTopology,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> T,
) -> Vec<NodeMap<T>> {
    (0..topology.horizon())
        .map(|k| NodeMap::PerNode((0..topology.level_size(k)).map(|_| make(rng)).collect()))
        .collect()
}
