//! Forward problem: choose the initial state `ξ` and a control `u` for
//!
//! ```text
//! x_{k+1} = A_k x_k + B_k u_k + b_k + (C_k x_k + D_k u_k + σ_k) w_k,   x_0 = ξ
//! J = ½ E[⟨M ξ, ξ⟩ + ⟨G x_N, x_N⟩ + Σ_k (⟨Q_k x_k, x_k⟩ + ⟨R_k u_k, u_k⟩)]
//! ```
//!
//! The Hamiltonian system couples the state with the adjoint
//! `y_k = A_kᵀ y' + C_kᵀ z' + Q_k x_k`, `y_N = G x_N`, `x_0 = -M⁻¹ y_0`,
//! and the optimal control is `u_k = -R_k⁻¹ (B_kᵀ y' + D_kᵀ z')`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_matrices, check_matrix, check_steps, check_vectors, check_weight, check_weights, per_step, stacked_offsets,
    ControlProcess, HamiltonianSystem, Quadratic,
};
use crate::coefficients::{AffineCoefficients, AffineMap, AffineStep, CheckOptions, ConditionReport, DominationData, LinearMap};
use crate::continuation::{solve_fbsde, ContinuationOptions, FbsdeSystem, PerturbationData, SolveDiagnostics};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_vector, inv_sqrt_pd, inverse_pd, matrix_with_norm, operator_norm, spd_with_spectrum, Matrix, Vector};
use crate::sde::{solve_sde, SdeProblem};
use crate::tree::{cond_prev, AdaptedProcess, NodeMap, TreeTopology};

/// Raw data of the forward problem; every per-step entry is indexed by the level-`k` node.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardLqParts {
    pub state_dim: usize,
    pub control_dim: usize,
    /// `A_k`, `n × n`.
    pub state_matrix: Vec<NodeMap<Matrix>>,
    /// `B_k`, `n × m`.
    pub control_matrix: Vec<NodeMap<Matrix>>,
    /// `C_k`, `n × n`.
    pub noise_state_matrix: Vec<NodeMap<Matrix>>,
    /// `D_k`, `n × m`.
    pub noise_control_matrix: Vec<NodeMap<Matrix>>,
    /// `b_k`.
    pub drift_offset: Vec<NodeMap<Vector>>,
    /// `σ_k`.
    pub noise_offset: Vec<NodeMap<Vector>>,
    /// `M`, positive definite.
    pub initial_weight: Matrix,
    /// `G` per leaf, nonnegative definite.
    pub terminal_weight: NodeMap<Matrix>,
    /// `Q_k`, nonnegative definite.
    pub state_weight: Vec<NodeMap<Matrix>>,
    /// `R_k`, positive definite.
    pub control_weight: Vec<NodeMap<Matrix>>,
}

/// Validated forward problem on a fixed tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardLqData {
    topology: TreeTopology,
    parts: ForwardLqParts,
    control_floor: f64,
}

impl ForwardLqData {
    /// Checks shapes, symmetry and definiteness.
    pub fn new(topology: TreeTopology, parts: ForwardLqParts) -> Result<Self> {
        let (n, m) = (parts.state_dim, parts.control_dim);
        if n == 0 || m == 0 {
            return Err(Error::InvalidData("state and control dimensions must be positive".into()));
        }
        let steps: [(&[NodeMap<Matrix>], usize, usize, &str); 6] = [
            (&parts.state_matrix, n, n, "A"),
            (&parts.control_matrix, n, m, "B"),
            (&parts.noise_state_matrix, n, n, "C"),
            (&parts.noise_control_matrix, n, m, "D"),
            (&parts.state_weight, n, n, "Q"),
            (&parts.control_weight, m, m, "R"),
        ];
        for (maps, rows, cols, what) in steps {
            check_steps(&topology, maps, what)?;
            check_matrices(maps, rows, cols, what)?;
        }
        for (maps, what) in [(&parts.drift_offset, "b"), (&parts.noise_offset, "σ")] {
            check_steps(&topology, maps, what)?;
            check_vectors(maps, n, what)?;
        }
        check_matrix(&parts.initial_weight, n, n, "M")?;
        check_weight(&parts.initial_weight, 0.0, true, "M")?;
        parts.terminal_weight.check(&topology, topology.horizon(), "G")?;
        for matrix in parts.terminal_weight.values() {
            check_matrix(matrix, n, n, "G")?;
            check_weight(matrix, 0.0, false, "G")?;
        }
        check_weights(&parts.state_weight, n, false, "Q")?;
        let control_floor = check_weights(&parts.control_weight, m, true, "R")?;
        Ok(Self {
            topology,
            parts,
            control_floor,
        })
    }

    /// Random instance with node-dependent coefficients, reproducible from `seed`.
    pub fn random(topology: TreeTopology, state_dim: usize, control_dim: usize, seed: u64) -> Result<Self> {
        let (n, m) = (state_dim, control_dim);
        if n == 0 || m == 0 {
            return Err(Error::InvalidData("state and control dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = topology.horizon();
        let state_matrix = per_step(&topology, &mut rng, |r| matrix_with_norm(r, n, n, 0.8));
        let control_matrix = per_step(&topology, &mut rng, |r| matrix_with_norm(r, n, m, 0.8));
        let noise_state_matrix = per_step(&topology, &mut rng, |r| matrix_with_norm(r, n, n, 0.3));
        let noise_control_matrix = per_step(&topology, &mut rng, |r| matrix_with_norm(r, n, m, 0.3));
        let drift_offset = per_step(&topology, &mut rng, |r| gaussian_vector(r, n) * 0.5);
        let noise_offset = per_step(&topology, &mut rng, |r| gaussian_vector(r, n) * 0.5);
        let state_weight = per_step(&topology, &mut rng, |r| spd_with_spectrum(r, n, 0.0, 1.0));
        let control_weight = per_step(&topology, &mut rng, |r| spd_with_spectrum(r, m, 0.5, 2.0));
        let initial_weight = spd_with_spectrum(&mut rng, n, 0.5, 2.0);
        let terminal_weight = NodeMap::PerNode(
            (0..topology.level_size(horizon))
                .map(|_| spd_with_spectrum(&mut rng, n, 0.0, 1.0))
                .collect(),
        );
        let parts = ForwardLqParts {
            state_dim: n,
            control_dim: m,
            state_matrix,
            control_matrix,
            noise_state_matrix,
            noise_control_matrix,
            drift_offset,
            noise_offset,
            initial_weight,
            terminal_weight,
            state_weight,
            control_weight,
        };
        Self::new(topology, parts)
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn parts(&self) -> &ForwardLqParts {
        &self.parts
    }

    /// Smallest eigenvalue over every `R_k`.
    pub fn control_floor(&self) -> f64 {
        self.control_floor
    }

    /// Same problem with `b` and `σ` set to zero.
    pub fn homogeneous(&self) -> Self {
        let zero = |maps: &[NodeMap<Vector>]| -> Vec<NodeMap<Vector>> {
            maps.iter().map(|map| map.map(|v| Vector::zeros(v.len()))).collect()
        };
        let mut parts = self.parts.clone();
        parts.drift_offset = zero(&self.parts.drift_offset);
        parts.noise_offset = zero(&self.parts.noise_offset);
        Self {
            topology: self.topology.clone(),
            parts,
            control_floor: self.control_floor,
        }
    }

    fn blocks(&self, k: usize, node: usize) -> NodeBlocks<'_> {
        let p = &self.parts;
        NodeBlocks {
            a: p.state_matrix[k].get(node),
            b: p.control_matrix[k].get(node),
            c: p.noise_state_matrix[k].get(node),
            d: p.noise_control_matrix[k].get(node),
            drift: p.drift_offset[k].get(node),
            noise: p.noise_offset[k].get(node),
            q: p.state_weight[k].get(node),
            r: p.control_weight[k].get(node),
        }
    }
}

struct NodeBlocks<'a> {
    a: &'a Matrix,
    b: &'a Matrix,
    c: &'a Matrix,
    d: &'a Matrix,
    drift: &'a Vector,
    noise: &'a Vector,
    q: &'a Matrix,
    r: &'a Matrix,
}

/// Builds the Hamiltonian system as FBS△E coefficients with its certificate.
///
/// The certificate uses `μ = 1`, `M_dom = M^{-1/2}`, `B_dom = R^{-1/2} Bᵀ`,
/// `C_dom = R^{-1/2} Dᵀ`, and the domination constant
/// `K = max(1, |M^{-1/2}|, |B R^{-1/2}|, |D R^{-1/2}|)`.
pub fn assemble_flq(data: &ForwardLqData, check: &CheckOptions) -> Result<HamiltonianSystem> {
    let topology = &data.topology;
    let (n, m) = (data.parts.state_dim, data.parts.control_dim);
    let horizon = topology.horizon();
    let initial_inverse = inverse_pd(&data.parts.initial_weight, "M")?;
    let initial_root = inv_sqrt_pd(&data.parts.initial_weight, "M")?;
    let mut bound = operator_norm(&initial_root).max(1.0);

    let mut steps = Vec::with_capacity(horizon);
    let (mut dom_a, mut dom_b, mut dom_c) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..horizon {
        let (mut blocks, mut bs, mut cs) = (Vec::new(), Vec::new(), Vec::new());
        for node in 0..topology.level_size(k) {
            let nb = data.blocks(k, node);
            let r_inverse = inverse_pd(nb.r, &format!("R at step {k}"))?;
            let r_root = inv_sqrt_pd(nb.r, &format!("R at step {k}"))?;
            let (bt, dt) = (nb.b.transpose(), nb.d.transpose());
            blocks.push(AffineStep {
                driver: AffineMap {
                    x: -nb.q,
                    y: -nb.a.transpose(),
                    z: -nb.c.transpose(),
                    offset: Vector::zeros(n),
                },
                drift: AffineMap {
                    x: nb.a.clone(),
                    y: -(nb.b * &r_inverse * &bt),
                    z: -(nb.b * &r_inverse * &dt),
                    offset: nb.drift.clone(),
                },
                diffusion: AffineMap {
                    x: nb.c.clone(),
                    y: -(nb.d * &r_inverse * &bt),
                    z: -(nb.d * &r_inverse * &dt),
                    offset: nb.noise.clone(),
                },
            });
            bound = bound
                .max(operator_norm(&(nb.b * &r_root)))
                .max(operator_norm(&(nb.d * &r_root)));
            bs.push(&r_root * bt);
            cs.push(&r_root * dt);
        }
        steps.push(NodeMap::PerNode(blocks));
        dom_a.push(NodeMap::Uniform(Matrix::zeros(m, n)));
        dom_b.push(NodeMap::PerNode(bs));
        dom_c.push(NodeMap::PerNode(cs));
    }
    let coefficients = AffineCoefficients::new(
        n,
        LinearMap {
            matrix: -initial_inverse,
            offset: Vector::zeros(n),
        },
        data.parts.terminal_weight.map(|g| LinearMap {
            matrix: g.clone(),
            offset: Vector::zeros(n),
        }),
        steps,
    )?;
    let domination = DominationData::new(
        1.0,
        0.0,
        initial_root,
        NodeMap::Uniform(Matrix::zeros(n, n)),
        dom_a,
        dom_b,
        dom_c,
    )?
    .with_bound(bound)?;
    HamiltonianSystem::new(topology, coefficients, domination, check)
}

/// Optimal pair recovered from the Hamiltonian system.
#[derive(Debug, Clone)]
pub struct FlqSolution {
    /// `ξ̄ = -M⁻¹ ȳ_0`.
    pub initial_state: Vector,
    pub control: ControlProcess,
    pub state: AdaptedProcess,
    pub adjoint: AdaptedProcess,
    pub cost: f64,
    /// Largest node-wise `|B_kᵀ ȳ' + D_kᵀ z̄' + R_k ū_k|`.
    pub stationarity: f64,
    /// Relative distance to the stacked direct solve.
    pub direct_gap: f64,
    pub conditions: ConditionReport,
    pub diagnostics: SolveDiagnostics,
}

/// Solves the Hamiltonian system and extracts the optimal initial state and control.
pub fn solve_flq(data: &ForwardLqData, options: &ContinuationOptions, check: &CheckOptions) -> Result<FlqSolution> {
    let topology = &data.topology;
    let (n, m) = (data.parts.state_dim, data.parts.control_dim);
    let hamiltonian = assemble_flq(data, check)?;
    let system = FbsdeSystem::new(topology, &hamiltonian.coefficients, &hamiltonian.domination)?;
    let zero = PerturbationData::zeros(topology, n)?;
    let (solution, diagnostics) = solve_fbsde(&system, &zero, 1.0, options)?;
    let direct_gap = hamiltonian.direct_gap(topology, &solution)?;

    let initial_inverse = inverse_pd(&data.parts.initial_weight, "M")?;
    let initial_state = -(initial_inverse * solution.y.vector(0, 0));
    let mut control = AdaptedProcess::zeros(topology, m, 0..=topology.horizon() - 1)?;
    let mut stationarity: f64 = 0.0;
    for k in 0..topology.horizon() {
        let (mean, weighted) = cond_prev(topology, solution.y.field(k + 1))?;
        for node in 0..topology.level_size(k) {
            let nb = data.blocks(k, node);
            let pressure = nb.b.transpose() * mean.vector(node) + nb.d.transpose() * weighted.vector(node);
            let r_inverse = inverse_pd(nb.r, "R")?;
            let u = -(r_inverse * &pressure);
            stationarity = stationarity.max((pressure + nb.r * &u).norm());
            control.set(k, node, &u);
        }
    }
    let control = ControlProcess::new(topology, control)?;
    let cost = cost_flq(data, &initial_state, &control)?;
    Ok(FlqSolution {
        initial_state,
        control,
        state: solution.x,
        adjoint: solution.y,
        cost,
        stationarity,
        direct_gap,
        conditions: hamiltonian.conditions,
        diagnostics,
    })
}

/// State process under `(ξ, u)`.
pub fn flq_state(data: &ForwardLqData, initial: &Vector, control: &ControlProcess) -> Result<AdaptedProcess> {
    let topology = &data.topology;
    let n = data.parts.state_dim;
    if initial.len() != n {
        return Err(Error::Shape(format!("initial state must have length {n}")));
    }
    control.check(topology, data.parts.control_dim)?;
    let problem = SdeProblem::new(
        topology,
        initial.clone(),
        Box::new(move |k, node, x| {
            let nb = data.blocks(k, node);
            nb.a * x + nb.b * control.vector(k, node) + nb.drift
        }),
        Box::new(move |k, node, x| {
            let nb = data.blocks(k, node);
            nb.c * x + nb.d * control.vector(k, node) + nb.noise
        }),
    )?;
    solve_sde(&problem)
}

/// Exact value of the criterion at `(ξ, u)`.
pub fn cost_flq(data: &ForwardLqData, initial: &Vector, control: &ControlProcess) -> Result<f64> {
    let topology = &data.topology;
    let state = flq_state(data, initial, control)?;
    let horizon = topology.horizon();
    let mut total = initial.dot(&(&data.parts.initial_weight * initial));
    for (node, p) in topology.level_probabilities(horizon).iter().enumerate() {
        let x = state.vector(horizon, node);
        total += p * x.dot(&(data.parts.terminal_weight.get(node) * &x));
    }
    for k in 0..horizon {
        for (node, p) in topology.level_probabilities(k).iter().enumerate() {
            let nb = data.blocks(k, node);
            let (x, u) = (state.vector(k, node), control.vector(k, node));
            total += p * (x.dot(&(nb.q * &x)) + u.dot(&(nb.r * &u)));
        }
    }
    Ok(0.5 * total)
}

/// Global minimizer of the criterion found as a quadratic program.
#[derive(Debug, Clone)]
pub struct FlqOracle {
    pub initial_state: Vector,
    pub control: ControlProcess,
    pub cost: f64,
    /// Norm of the criterion's gradient at the minimizer.
    pub gradient_norm: f64,
}

/// Minimizes the criterion over the stacked vector `[ξ; u]` by writing every
/// state as an affine function of it and solving the normal equations.
pub fn oracle_flq(data: &ForwardLqData) -> Result<FlqOracle> {
    let topology = &data.topology;
    let (n, m) = (data.parts.state_dim, data.parts.control_dim);
    let horizon = topology.horizon();
    let (offsets, controls) = stacked_offsets(topology, m);
    let size = n + controls;
    let mut quadratic = Quadratic::new(size);
    quadratic.add(1.0, &initial_selector(n, size), &Vector::zeros(n), &data.parts.initial_weight);

    let mut maps = vec![initial_selector(n, size)];
    let mut shifts = vec![Vector::zeros(n)];
    for k in 0..horizon {
        let probabilities = topology.level_probabilities(k);
        let mut next_maps = Vec::with_capacity(topology.level_size(k + 1));
        let mut next_shifts = Vec::with_capacity(topology.level_size(k + 1));
        for node in 0..topology.level_size(k) {
            let nb = data.blocks(k, node);
            let column = n + offsets[k] + node * m;
            let mut selector = Matrix::zeros(m, size);
            selector.view_mut((0, column), (m, m)).fill_with_identity();
            quadratic.add(probabilities[node], &maps[node], &shifts[node], nb.q);
            quadratic.add(probabilities[node], &selector, &Vector::zeros(m), nb.r);
            for branch in 0..topology.branching() {
                let w = topology.noise(branch);
                let state = nb.a + nb.c * w;
                let input = nb.b + nb.d * w;
                next_maps.push(&state * &maps[node] + &input * &selector);
                next_shifts.push(&state * &shifts[node] + nb.drift + nb.noise * w);
            }
        }
        maps = next_maps;
        shifts = next_shifts;
    }
    for (node, p) in topology.level_probabilities(horizon).iter().enumerate() {
        quadratic.add(*p, &maps[node], &shifts[node], data.parts.terminal_weight.get(node));
    }
    let (point, gradient_norm) = quadratic.minimize()?;
    let cost = quadratic.value(&point);
    Ok(FlqOracle {
        initial_state: point.rows(0, n).into_owned(),
        control: ControlProcess::from_stacked(topology, m, &point.as_slice()[n..])?,
        cost,
        gradient_norm,
    })
}

fn initial_selector(n: usize, size: usize) -> Matrix {
    let mut selector = Matrix::zeros(n, size);
    selector.view_mut((0, 0), (n, n)).fill_with_identity();
    selector
}
