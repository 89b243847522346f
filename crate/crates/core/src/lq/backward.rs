//! Backward problem: choose a control `v` for the backward equation
//!
//! ```text
//! y_k = A_k y' + B_k z' + C_k v_k + α_k,   y_N = η
//! J = ½ E[⟨M y_0, y_0⟩ + Σ_k (⟨Q_k y', y'⟩ + ⟨L_k z', z'⟩ + ⟨R_k v_k, v_k⟩)]
//! ```
//!
//! where `y'` and `z'` are the conditional means of `y_{k+1}` and
//! `y_{k+1} w_k`. The adjoint runs forward:
//! `x_{k+1} = A_kᵀ x_k - Q_k y' + (B_kᵀ x_k - L_k z') w_k`, `x_0 = -M y_0`,
//! and the optimal control is `v_k = R_k⁻¹ C_kᵀ x_k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_matrices, check_matrix, check_steps, check_vectors, check_weight, check_weights, per_step, stacked_offsets,
    ControlProcess, HamiltonianSystem, Quadratic,
};
use crate::bsde::{solve_bsde, BsdeProblem};
use crate::coefficients::{AffineCoefficients, AffineMap, AffineStep, CheckOptions, ConditionReport, DominationData, LinearMap};
use crate::continuation::{solve_fbsde, ContinuationOptions, FbsdeSystem, PerturbationData, SolveDiagnostics};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_vector, inverse_pd, matrix_with_norm, operator_norm, spd_with_spectrum, sqrt_psd, Matrix, Vector};
use crate::tree::{cond_prev, random_field, AdaptedProcess, Field, NodeMap, TreeTopology};

/// Raw data of the backward problem; per-step entries are indexed by the level-`k` node.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardLqParts {
    pub state_dim: usize,
    pub control_dim: usize,
    /// `A_k`, `n × n`.
    pub mean_matrix: Vec<NodeMap<Matrix>>,
    /// `B_k`, `n × n`.
    pub noise_matrix: Vec<NodeMap<Matrix>>,
    /// `C_k`, `n × m`.
    pub control_matrix: Vec<NodeMap<Matrix>>,
    /// `α_k`.
    pub offset: Vec<NodeMap<Vector>>,
    /// `η`, a level-`N` field.
    pub terminal: Field,
    /// `M`, positive definite.
    pub initial_weight: Matrix,
    /// `Q_k`, nonnegative definite.
    pub mean_weight: Vec<NodeMap<Matrix>>,
    /// `L_k`, nonnegative definite.
    pub noise_weight: Vec<NodeMap<Matrix>>,
    /// `R_k`, positive definite.
    pub control_weight: Vec<NodeMap<Matrix>>,
}

/// Validated backward problem on a fixed tree.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardLqData {
    topology: TreeTopology,
    parts: BackwardLqParts,
    control_floor: f64,
}

impl BackwardLqData {
    /// Checks shapes, symmetry and definiteness.
    pub fn new(topology: TreeTopology, parts: BackwardLqParts) -> Result<Self> {
        let (n, m) = (parts.state_dim, parts.control_dim);
        if n == 0 || m == 0 {
            return Err(Error::InvalidData("state and control dimensions must be positive".into()));
        }
        let steps: [(&[NodeMap<Matrix>], usize, usize, &str); 6] = [
            (&parts.mean_matrix, n, n, "A"),
            (&parts.noise_matrix, n, n, "B"),
            (&parts.control_matrix, n, m, "C"),
            (&parts.mean_weight, n, n, "Q"),
            (&parts.noise_weight, n, n, "L"),
            (&parts.control_weight, m, m, "R"),
        ];
        for (maps, rows, cols, what) in steps {
            check_steps(&topology, maps, what)?;
            check_matrices(maps, rows, cols, what)?;
        }
        check_steps(&topology, &parts.offset, "α")?;
        check_vectors(&parts.offset, n, "α")?;
        let horizon = topology.horizon();
        if parts.terminal.level() != horizon
            || parts.terminal.nodes() != topology.level_size(horizon)
            || parts.terminal.dim() != n
        {
            return Err(Error::Shape(format!("η must be a dimension-{n} field on level {horizon}")));
        }
        if !parts.terminal.data().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidData("η has non-finite entries".into()));
        }
        check_matrix(&parts.initial_weight, n, n, "M")?;
        check_weight(&parts.initial_weight, 0.0, true, "M")?;
        check_weights(&parts.mean_weight, n, false, "Q")?;
        check_weights(&parts.noise_weight, n, false, "L")?;
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
        let mean_matrix = per_step(&topology, &mut rng, |r| matrix_with_norm(r, n, n, 0.8));
        let noise_matrix = per_step(&topology, &mut rng, |r| matrix_with_norm(r, n, n, 0.3));
        let control_matrix = per_step(&topology, &mut rng, |r| matrix_with_norm(r, n, m, 0.8));
        let offset = per_step(&topology, &mut rng, |r| gaussian_vector(r, n) * 0.5);
        let mean_weight = per_step(&topology, &mut rng, |r| spd_with_spectrum(r, n, 0.0, 1.0));
        let noise_weight = per_step(&topology, &mut rng, |r| spd_with_spectrum(r, n, 0.0, 1.0));
        let control_weight = per_step(&topology, &mut rng, |r| spd_with_spectrum(r, m, 0.5, 2.0));
        let initial_weight = spd_with_spectrum(&mut rng, n, 0.5, 2.0);
        let terminal = random_field(&topology, topology.horizon(), n, seed.wrapping_add(1))?;
        let parts = BackwardLqParts {
            state_dim: n,
            control_dim: m,
            mean_matrix,
            noise_matrix,
            control_matrix,
            offset,
            terminal,
            initial_weight,
            mean_weight,
            noise_weight,
            control_weight,
        };
        Self::new(topology, parts)
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn parts(&self) -> &BackwardLqParts {
        &self.parts
    }

    /// Smallest eigenvalue over every `R_k`.
    pub fn control_floor(&self) -> f64 {
        self.control_floor
    }

    fn blocks(&self, k: usize, node: usize) -> NodeBlocks<'_> {
        let p = &self.parts;
        NodeBlocks {
            a: p.mean_matrix[k].get(node),
            b: p.noise_matrix[k].get(node),
            c: p.control_matrix[k].get(node),
            offset: p.offset[k].get(node),
            q: p.mean_weight[k].get(node),
            l: p.noise_weight[k].get(node),
            r: p.control_weight[k].get(node),
        }
    }
}

struct NodeBlocks<'a> {
    a: &'a Matrix,
    b: &'a Matrix,
    c: &'a Matrix,
    offset: &'a Vector,
    q: &'a Matrix,
    l: &'a Matrix,
    r: &'a Matrix,
}

/// Builds the Hamiltonian system as FBS△E coefficients with its certificate.
///
/// The certificate uses `μ = 1`, `M_dom = M^{1/2}`, `B_dom = [Q^{1/2}; 0]`,
/// `C_dom = [0; L^{1/2}]` and `K = max(1, |M^{1/2}|, |Q^{1/2}|, |L^{1/2}|)`.
pub fn assemble_blq(data: &BackwardLqData, check: &CheckOptions) -> Result<HamiltonianSystem> {
    let topology = &data.topology;
    let n = data.parts.state_dim;
    let horizon = topology.horizon();
    let initial_root = sqrt_psd(&data.parts.initial_weight, "M")?;
    let mut bound = operator_norm(&initial_root).max(1.0);

    let mut steps = Vec::with_capacity(horizon);
    let (mut dom_a, mut dom_b, mut dom_c) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..horizon {
        let (mut blocks, mut bs, mut cs) = (Vec::new(), Vec::new(), Vec::new());
        for node in 0..topology.level_size(k) {
            let nb = data.blocks(k, node);
            let r_inverse = inverse_pd(nb.r, &format!("R at step {k}"))?;
            blocks.push(AffineStep {
                driver: AffineMap {
                    x: -(nb.c * &r_inverse * nb.c.transpose()),
                    y: -nb.a,
                    z: -nb.b,
                    offset: -nb.offset,
                },
                drift: AffineMap {
                    x: nb.a.transpose(),
                    y: -nb.q,
                    z: Matrix::zeros(n, n),
                    offset: Vector::zeros(n),
                },
                diffusion: AffineMap {
                    x: nb.b.transpose(),
                    y: Matrix::zeros(n, n),
                    z: -nb.l,
                    offset: Vector::zeros(n),
                },
            });
            let q_root = sqrt_psd(nb.q, &format!("Q at step {k}"))?;
            let l_root = sqrt_psd(nb.l, &format!("L at step {k}"))?;
            bound = bound.max(operator_norm(&q_root)).max(operator_norm(&l_root));
            let mut b_dom = Matrix::zeros(2 * n, n);
            b_dom.view_mut((0, 0), (n, n)).copy_from(&q_root);
            let mut c_dom = Matrix::zeros(2 * n, n);
            c_dom.view_mut((n, 0), (n, n)).copy_from(&l_root);
            bs.push(b_dom);
            cs.push(c_dom);
        }
        steps.push(NodeMap::PerNode(blocks));
        dom_a.push(NodeMap::Uniform(Matrix::zeros(2 * n, n)));
        dom_b.push(NodeMap::PerNode(bs));
        dom_c.push(NodeMap::PerNode(cs));
    }
    let terminal = NodeMap::PerNode(
        (0..topology.level_size(horizon))
            .map(|node| LinearMap {
                matrix: Matrix::zeros(n, n),
                offset: data.parts.terminal.vector(node),
            })
            .collect(),
    );
    let coefficients = AffineCoefficients::new(
        n,
        LinearMap {
            matrix: -&data.parts.initial_weight,
            offset: Vector::zeros(n),
        },
        terminal,
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

/// Optimal control recovered from the Hamiltonian system.
#[derive(Debug, Clone)]
pub struct BlqSolution {
    pub control: ControlProcess,
    /// The controlled backward process `ȳ`.
    pub state: AdaptedProcess,
    /// The forward adjoint `x̄`.
    pub adjoint: AdaptedProcess,
    pub cost: f64,
    /// Largest node-wise `|R_k v̄_k - C_kᵀ x̄_k|`.
    pub stationarity: f64,
    /// Relative distance to the stacked direct solve.
    pub direct_gap: f64,
    pub conditions: ConditionReport,
    pub diagnostics: SolveDiagnostics,
}

/// Solves the Hamiltonian system and extracts the optimal control.
pub fn solve_blq(data: &BackwardLqData, options: &ContinuationOptions, check: &CheckOptions) -> Result<BlqSolution> {
    let topology = &data.topology;
    let (n, m) = (data.parts.state_dim, data.parts.control_dim);
    let hamiltonian = assemble_blq(data, check)?;
    let system = FbsdeSystem::new(topology, &hamiltonian.coefficients, &hamiltonian.domination)?;
    let zero = PerturbationData::zeros(topology, n)?;
    let (solution, diagnostics) = solve_fbsde(&system, &zero, 1.0, options)?;
    let direct_gap = hamiltonian.direct_gap(topology, &solution)?;

    let mut control = AdaptedProcess::zeros(topology, m, 0..=topology.horizon() - 1)?;
    let mut stationarity: f64 = 0.0;
    for k in 0..topology.horizon() {
        for node in 0..topology.level_size(k) {
            let nb = data.blocks(k, node);
            let pressure = nb.c.transpose() * solution.x.vector(k, node);
            let v = inverse_pd(nb.r, "R")? * &pressure;
            stationarity = stationarity.max((nb.r * &v - pressure).norm());
            control.set(k, node, &v);
        }
    }
    let control = ControlProcess::new(topology, control)?;
    let cost = cost_blq(data, &control)?;
    Ok(BlqSolution {
        control,
        state: solution.y,
        adjoint: solution.x,
        cost,
        stationarity,
        direct_gap,
        conditions: hamiltonian.conditions,
        diagnostics,
    })
}

/// Backward process under the control `v`.
pub fn blq_state(data: &BackwardLqData, control: &ControlProcess) -> Result<AdaptedProcess> {
    let topology = &data.topology;
    control.check(topology, data.parts.control_dim)?;
    let problem = BsdeProblem::new(
        topology,
        data.parts.terminal.clone(),
        Box::new(move |k, node, y, z| {
            let nb = data.blocks(k, node);
            nb.a * y + nb.b * z + nb.c * control.vector(k, node) + nb.offset
        }),
    )?;
    solve_bsde(&problem)
}

/// Exact value of the criterion at `v`.
pub fn cost_blq(data: &BackwardLqData, control: &ControlProcess) -> Result<f64> {
    let topology = &data.topology;
    let state = blq_state(data, control)?;
    let y0 = state.vector(0, 0);
    let mut total = y0.dot(&(&data.parts.initial_weight * &y0));
    for k in 0..topology.horizon() {
        let (mean, weighted) = cond_prev(topology, state.field(k + 1))?;
        for (node, p) in topology.level_probabilities(k).iter().enumerate() {
            let nb = data.blocks(k, node);
            let (y, z, v) = (mean.vector(node), weighted.vector(node), control.vector(k, node));
            total += p * (y.dot(&(nb.q * &y)) + z.dot(&(nb.l * &z)) + v.dot(&(nb.r * &v)));
        }
    }
    Ok(0.5 * total)
}

/// Global minimizer of the criterion found as a quadratic program.
#[derive(Debug, Clone)]
pub struct BlqOracle {
    pub control: ControlProcess,
    pub cost: f64,
    /// Norm of the criterion's gradient at the minimizer.
    pub gradient_norm: f64,
}

/// Minimizes the criterion over the stacked control by writing every `y_k`
/// as an affine function of it, sweeping backward from `y_N = η`.
pub fn oracle_blq(data: &BackwardLqData) -> Result<BlqOracle> {
    let topology = &data.topology;
    let (n, m) = (data.parts.state_dim, data.parts.control_dim);
    let horizon = topology.horizon();
    let (offsets, size) = stacked_offsets(topology, m);
    let mut quadratic = Quadratic::new(size);

    let mut maps: Vec<Matrix> = vec![Matrix::zeros(n, size); topology.level_size(horizon)];
    let mut shifts: Vec<Vector> = (0..topology.level_size(horizon))
        .map(|node| data.parts.terminal.vector(node))
        .collect();
    for k in (0..horizon).rev() {
        let probabilities = topology.level_probabilities(k);
        let mut next_maps = Vec::with_capacity(topology.level_size(k));
        let mut next_shifts = Vec::with_capacity(topology.level_size(k));
        for node in 0..topology.level_size(k) {
            let nb = data.blocks(k, node);
            let (mut mean_map, mut weighted_map) = (Matrix::zeros(n, size), Matrix::zeros(n, size));
            let (mut mean_shift, mut weighted_shift) = (Vector::zeros(n), Vector::zeros(n));
            for branch in 0..topology.branching() {
                let child = topology.child(node, branch);
                let p = topology.branch_probability(branch);
                let pw = p * topology.noise(branch);
                mean_map += &maps[child] * p;
                weighted_map += &maps[child] * pw;
                mean_shift += &shifts[child] * p;
                weighted_shift += &shifts[child] * pw;
            }
            let mut selector = Matrix::zeros(m, size);
            selector
                .view_mut((0, offsets[k] + node * m), (m, m))
                .fill_with_identity();
            quadratic.add(probabilities[node], &mean_map, &mean_shift, nb.q);
            quadratic.add(probabilities[node], &weighted_map, &weighted_shift, nb.l);
            quadratic.add(probabilities[node], &selector, &Vector::zeros(m), nb.r);
            next_maps.push(nb.a * &mean_map + nb.b * &weighted_map + nb.c * &selector);
            next_shifts.push(nb.a * &mean_shift + nb.b * &weighted_shift + nb.offset);
        }
        maps = next_maps;
        shifts = next_shifts;
    }
    quadratic.add(1.0, &maps[0], &shifts[0], &data.parts.initial_weight);
    let (point, gradient_norm) = quadratic.minimize()?;
    Ok(BlqOracle {
        control: ControlProcess::from_stacked(topology, m, point.as_slice())?,
        cost: quadratic.value(&point),
        gradient_norm,
    })
}
