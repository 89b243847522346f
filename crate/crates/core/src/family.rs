//! Random coefficient systems that satisfy the domination and monotonicity
//! inequalities by construction.
//!
//! Each instance is a monotone linear core, an antisymmetric coupling between
//! the forward and backward variables (which cancels in `⟨ΔΓ, θ̂⟩`), affine
//! offsets, and a `tanh` nonlinearity scaled by the gain `g`. Margins are
//! chosen so the nonlinearity can never overturn the inequalities:
//!
//! * `μ`-case: `Λ = -μ c Mᵀ M y + λ₀`, `Φ = S x + g tanh(x) + φ₀` with
//!   `S ⪰ 0`, `f = -K x + g T tanh(x) + E_y y' + E_z z' + f₀` with
//!   `sym(K) ⪰ κ I`, and `b`, `σ` equal to `-E_yᵀ x`, `-E_zᵀ x` plus
//!   `Bᵀ h(Q)`, `Cᵀ h(Q)` where `h(Q) = -μ c Q + g S tanh(Q)`.
//! * `ν`-case: the mirror image, with the saturating terms attached to `Φ`
//!   through `G`, to `f` through `A`, to `b` through `y'`, and a decreasing
//!   `tanh` term in `Λ`.
//!
//! With `c = 1.5` the monotonicity margins are `μ(c - 1) - g` and `κ - g`,
//! and the matrices `M, B, C` (or `G, A`) are scaled to 90% of the largest
//! norm the domination inequalities allow.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{
    check_conditions, AffineCoefficients, AffineMap, AffineStep, CheckOptions, CoefficientSet, DominationCase,
    DominationData, GammaValue, LinearMap, Theta,
};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, gaussian_vector, matrix_with_norm, spd_with_spectrum, tanh, Matrix, Vector};
use crate::tree::{NodeMap, TreeTopology};

/// Factor by which the linear core exceeds the required monotonicity.
const CORE_MARGIN: f64 = 1.5;
/// Fraction of the admissible norm used for the dominating matrices.
const NORM_FILL: f64 = 0.9;
/// Lower bound of the symmetric part of the self-damping matrices.
const DAMPING: f64 = 0.5;
/// Scale of the random offsets.
const OFFSET_SCALE: f64 = 0.5;
/// Samples drawn by the self-check before an instance is returned.
const SELF_CHECK_SAMPLES: usize = 2_000;

/// Parameters of a generated instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    /// State dimension `n`.
    pub dim: usize,
    /// Rows `m` of the dominating matrices.
    pub rows: usize,
    /// Nonlinearity gain `g`.
    pub gain: f64,
    pub seed: u64,
    pub case: DominationCase,
    /// Operator norm of the forward-backward coupling blocks `E_y`, `E_z`.
    #[serde(default = "default_coupling")]
    pub coupling: f64,
}

fn default_coupling() -> f64 {
    0.5
}

impl FamilySpec {
    /// Instance with the default coupling strength.
    pub fn new(dim: usize, rows: usize, gain: f64, seed: u64, case: DominationCase) -> Self {
        Self {
            dim,
            rows,
            gain,
            seed,
            case,
            coupling: default_coupling(),
        }
    }

    /// Same instance with a different coupling strength.
    pub fn with_coupling(mut self, coupling: f64) -> Self {
        self.coupling = coupling;
        self
    }
}

#[derive(Debug, Clone)]
enum StepNonlinearity {
    /// `f += g T tanh(x)`, `b += g Bᵀ S tanh(Q)`, `σ += g Cᵀ S tanh(Q)`.
    Mu { t: Matrix, b: Matrix, c: Matrix, s: Matrix },
    /// `f += g Aᵀ S tanh(A x)`, `b += g T tanh(y')`.
    Nu { a: Matrix, s: Matrix, t: Matrix },
}

#[derive(Debug, Clone)]
enum TerminalNonlinearity {
    /// `Φ += g tanh(x)`.
    Mu,
    /// `Φ += g Gᵀ S tanh(G x)`.
    Nu { g: Matrix, s: Matrix },
}

/// A generated monotone coefficient system.
#[derive(Debug, Clone)]
pub struct MonotoneFamily {
    spec: FamilySpec,
    linear: AffineCoefficients,
    steps: Vec<Vec<StepNonlinearity>>,
    terminal: Vec<TerminalNonlinearity>,
    gain_bound: f64,
}

impl MonotoneFamily {
    /// Parameters the instance was generated from.
    pub fn spec(&self) -> &FamilySpec {
        &self.spec
    }

    /// Largest gain for which the construction guarantees the inequalities.
    pub fn gain_bound(&self) -> f64 {
        self.gain_bound
    }

    /// The affine part (the whole system when the gain is zero).
    pub fn linear_part(&self) -> &AffineCoefficients {
        &self.linear
    }
}

impl CoefficientSet for MonotoneFamily {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn lambda(&self, y: &Vector) -> Vector {
        let value = self.linear.lambda(y);
        match self.spec.case {
            DominationCase::Mu => value,
            DominationCase::Nu => value - tanh(y) * self.spec.gain,
        }
    }

    fn phi(&self, node: usize, x: &Vector) -> Vector {
        let value = self.linear.phi(node, x);
        let gain = self.spec.gain;
        match &self.terminal[node] {
            TerminalNonlinearity::Mu => value + tanh(x) * gain,
            TerminalNonlinearity::Nu { g, s } => value + g.transpose() * (s * tanh(&(g * x))) * gain,
        }
    }

    fn gamma(&self, k: usize, node: usize, theta: &Theta) -> GammaValue {
        let mut value = self.linear.gamma(k, node, theta);
        let gain = self.spec.gain;
        if gain == 0.0 {
            return value;
        }
        match &self.steps[k][node] {
            StepNonlinearity::Mu { t, b, c, s } => {
                value.driver += t * tanh(&theta.x) * gain;
                let q = b * &theta.y + c * &theta.z;
                let saturated = s * tanh(&q) * gain;
                value.drift += b.transpose() * &saturated;
                value.diffusion += c.transpose() * &saturated;
            }
            StepNonlinearity::Nu { a, s, t } => {
                value.driver += a.transpose() * (s * tanh(&(a * &theta.x))) * gain;
                value.drift += t * tanh(&theta.y) * gain;
            }
        }
        value
    }

    fn as_affine(&self) -> Option<&AffineCoefficients> {
        (self.spec.gain == 0.0).then_some(&self.linear)
    }

    fn check_topology(&self, topology: &TreeTopology) -> Result<()> {
        self.linear.check_topology(topology)
    }
}

fn damping<R: rand::Rng>(rng: &mut R, n: usize) -> Matrix {
    let raw = gaussian_matrix(rng, n, n) * 0.3;
    let skew = &raw - raw.transpose();
    Matrix::identity(n, n) * DAMPING + skew
}

/// Generates a monotone instance and its domination data on `topology`.
///
/// The instance is verified by [`check_conditions`] before it is returned;
/// a failed verification is an internal error.
pub fn make_monotone_family(topology: &TreeTopology, spec: FamilySpec) -> Result<(MonotoneFamily, DominationData)> {
    let (n, m, gain) = (spec.dim, spec.rows, spec.gain);
    if n == 0 || m == 0 {
        return Err(Error::Usage("family dimensions must be positive".into()));
    }
    if !(spec.coupling.is_finite() && spec.coupling >= 0.0) {
        return Err(Error::Usage(format!("coupling must be nonnegative, got {}", spec.coupling)));
    }
    let strength = 1.0;
    let gain_bound = (strength * (CORE_MARGIN - 1.0)).min(DAMPING);
    if !(gain.is_finite() && (0.0..=gain_bound).contains(&gain)) {
        return Err(Error::Usage(format!(
            "gain {gain} is outside the guaranteed range [0, {gain_bound}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let horizon = topology.horizon();
    let offset = |rng: &mut ChaCha8Rng| gaussian_vector(rng, n) * OFFSET_SCALE;
    let dominated_norm = NORM_FILL / (strength * (strength * CORE_MARGIN + gain));
    let zero_rows = Matrix::zeros(m, n);

    let (lambda, domination_m) = match spec.case {
        DominationCase::Mu => {
            let m_matrix = matrix_with_norm(&mut rng, m, n, NORM_FILL / (strength * strength * CORE_MARGIN));
            let matrix = -(m_matrix.transpose() * &m_matrix) * (strength * CORE_MARGIN);
            (LinearMap { matrix, offset: offset(&mut rng) }, m_matrix)
        }
        DominationCase::Nu => {
            let matrix = -spd_with_spectrum(&mut rng, n, 0.2, 0.8);
            (LinearMap { matrix, offset: offset(&mut rng) }, zero_rows.clone())
        }
    };

    let mut terminal_linear = Vec::new();
    let mut terminal_nonlinear = Vec::new();
    let mut g_matrices = Vec::new();
    for _ in 0..topology.level_size(horizon) {
        match spec.case {
            DominationCase::Mu => {
                let root = gaussian_matrix(&mut rng, n, n) * 0.5;
                let matrix = &root * root.transpose();
                terminal_linear.push(LinearMap { matrix, offset: offset(&mut rng) });
                terminal_nonlinear.push(TerminalNonlinearity::Mu);
                g_matrices.push(zero_rows.clone());
            }
            DominationCase::Nu => {
                let g = matrix_with_norm(&mut rng, m, n, dominated_norm);
                let s = matrix_with_norm(&mut rng, m, m, 1.0);
                let matrix = g.transpose() * &g * (strength * CORE_MARGIN);
                terminal_linear.push(LinearMap { matrix, offset: offset(&mut rng) });
                terminal_nonlinear.push(TerminalNonlinearity::Nu { g: g.clone(), s });
                g_matrices.push(g);
            }
        }
    }

    let mut linear_steps = Vec::with_capacity(horizon);
    let mut nonlinear_steps = Vec::with_capacity(horizon);
    let (mut a_maps, mut b_maps, mut c_maps) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..horizon {
        let nodes = topology.level_size(k);
        let mut blocks = Vec::with_capacity(nodes);
        let mut extras = Vec::with_capacity(nodes);
        let (mut a_level, mut b_level, mut c_level) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..nodes {
            let e_y = matrix_with_norm(&mut rng, n, n, spec.coupling);
            let e_z = matrix_with_norm(&mut rng, n, n, spec.coupling);
            let mut step = AffineStep {
                driver: AffineMap {
                    x: Matrix::zeros(n, n),
                    y: e_y.clone(),
                    z: e_z.clone(),
                    offset: offset(&mut rng),
                },
                drift: AffineMap {
                    x: -e_y.transpose(),
                    y: Matrix::zeros(n, n),
                    z: Matrix::zeros(n, n),
                    offset: offset(&mut rng),
                },
                diffusion: AffineMap {
                    x: -e_z.transpose(),
                    y: Matrix::zeros(n, n),
                    z: Matrix::zeros(n, n),
                    offset: offset(&mut rng),
                },
            };
            match spec.case {
                DominationCase::Mu => {
                    let b = matrix_with_norm(&mut rng, m, n, dominated_norm);
                    let c = matrix_with_norm(&mut rng, m, n, dominated_norm);
                    let s = matrix_with_norm(&mut rng, m, m, 1.0);
                    let t = matrix_with_norm(&mut rng, n, n, 1.0);
                    let core = strength * CORE_MARGIN;
                    step.driver.x = -damping(&mut rng, n);
                    step.drift.y = -(b.transpose() * &b) * core;
                    step.drift.z = -(b.transpose() * &c) * core;
                    step.diffusion.y = -(c.transpose() * &b) * core;
                    step.diffusion.z = -(c.transpose() * &c) * core;
                    extras.push(StepNonlinearity::Mu {
                        t,
                        b: b.clone(),
                        c: c.clone(),
                        s,
                    });
                    a_level.push(zero_rows.clone());
                    b_level.push(b);
                    c_level.push(c);
                }
                DominationCase::Nu => {
                    let a = matrix_with_norm(&mut rng, m, n, dominated_norm);
                    let s = matrix_with_norm(&mut rng, m, m, 1.0);
                    let t = matrix_with_norm(&mut rng, n, n, 1.0);
                    step.driver.x = -(a.transpose() * &a) * (strength * CORE_MARGIN);
                    step.drift.y = -damping(&mut rng, n);
                    step.diffusion.z = -damping(&mut rng, n);
                    extras.push(StepNonlinearity::Nu { a: a.clone(), s, t });
                    a_level.push(a);
                    b_level.push(zero_rows.clone());
                    c_level.push(zero_rows.clone());
                }
            }
            blocks.push(step);
        }
        linear_steps.push(NodeMap::PerNode(blocks));
        nonlinear_steps.push(extras);
        a_maps.push(NodeMap::PerNode(a_level));
        b_maps.push(NodeMap::PerNode(b_level));
        c_maps.push(NodeMap::PerNode(c_level));
    }

    let linear = AffineCoefficients::new(n, lambda, NodeMap::PerNode(terminal_linear), linear_steps)?;
    let (mu, nu) = match spec.case {
        DominationCase::Mu => (strength, 0.0),
        DominationCase::Nu => (0.0, strength),
    };
    let domination = DominationData::new(
        mu,
        nu,
        domination_m,
        NodeMap::PerNode(g_matrices),
        a_maps,
        b_maps,
        c_maps,
    )?;
    let family = MonotoneFamily {
        spec,
        linear,
        steps: nonlinear_steps,
        terminal: terminal_nonlinear,
        gain_bound,
    };

    let options = CheckOptions {
        samples: SELF_CHECK_SAMPLES,
        seed: spec.seed ^ 0x5eed_c0ef,
        ..CheckOptions::default()
    };
    let report = check_conditions(&family, &domination, topology, &options)?;
    if report.total_violations() > 0 {
        return Err(Error::Internal(format!(
            "generated family (seed {}) violates its conditions at {} sampled pairs",
            spec.seed,
            report.total_violations()
        )));
    }
    Ok((family, domination))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_same_instance() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let spec = FamilySpec::new(2, 1, 0.1, 7, DominationCase::Mu);
        let (first, _) = make_monotone_family(&topology, spec).unwrap();
        let (second, _) = make_monotone_family(&topology, spec).unwrap();
        let theta = Theta::new(
            Vector::from_vec(vec![0.3, -1.0]),
            Vector::from_vec(vec![2.0, 0.5]),
            Vector::from_vec(vec![-0.7, 1.2]),
        );
        for node in 0..4 {
            assert_eq!(first.gamma(2, node, &theta), second.gamma(2, node, &theta));
        }
        assert_eq!(first.lambda(&theta.y), second.lambda(&theta.y));
    }

    #[test]
    fn zero_gain_is_affine() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let (family, _) = make_monotone_family(&topology, FamilySpec::new(2, 1, 0.0, 3, DominationCase::Nu)).unwrap();
        assert!(family.as_affine().is_some());
        let (nonlinear, _) = make_monotone_family(&topology, FamilySpec::new(2, 1, 0.1, 3, DominationCase::Nu)).unwrap();
        assert!(nonlinear.as_affine().is_none());
    }

    #[test]
    fn oversized_gain_is_refused() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let spec = FamilySpec::new(2, 1, 0.9, 3, DominationCase::Mu);
        assert!(matches!(make_monotone_family(&topology, spec), Err(Error::Usage(_))));
    }
}
