//! Coefficient systems `(Λ, Φ, Γ)` of coupled forward-backward difference
//! equations, the domination-monotonicity data that certifies them, the
//! α-blended family used by the continuation solver, and a sampling checker
//! for the domination and monotonicity inequalities.
//!
//! Conventions: `θ = (x, y', z')`. The driver `f` evaluated at step `k`
//! and a level-`k` node is the map that the backward equation applies as
//! `y_k = -f(θ_k)`. The drift `b` and diffusion `σ` produce
//! `x_{k+1} = b(θ_k) + σ(θ_k) w_k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_vector, Matrix, Vector};
use crate::tree::{NodeMap, TreeTopology};

/// The triple `(x, y', z')` at which `Γ` is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub x: Vector,
    pub y: Vector,
    pub z: Vector,
}

impl Theta {
    /// Builds a triple from its parts.
    pub fn new(x: Vector, y: Vector, z: Vector) -> Self {
        Self { x, y, z }
    }

    /// Zero triple of dimension `n`.
    pub fn zeros(n: usize) -> Self {
        Self::new(Vector::zeros(n), Vector::zeros(n), Vector::zeros(n))
    }

    /// Componentwise difference.
    pub fn minus(&self, other: &Theta) -> Theta {
        Theta::new(&self.x - &other.x, &self.y - &other.y, &self.z - &other.z)
    }

    /// Euclidean norm of the stacked vector.
    pub fn norm(&self) -> f64 {
        (self.x.norm_squared() + self.y.norm_squared() + self.z.norm_squared()).sqrt()
    }

    /// Triple with `y` and `z` negated.
    pub fn reflect(&self) -> Theta {
        Theta::new(self.x.clone(), -&self.y, -&self.z)
    }
}

/// Value of `Γ = (f, b, σ)` at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaValue {
    pub driver: Vector,
    pub drift: Vector,
    pub diffusion: Vector,
}

impl GammaValue {
    /// `⟨f, x⟩ + ⟨b, y'⟩ + ⟨σ, z'⟩`.
    pub fn pairing(&self, theta: &Theta) -> f64 {
        self.driver.dot(&theta.x) + self.drift.dot(&theta.y) + self.diffusion.dot(&theta.z)
    }

    /// Componentwise difference.
    pub fn minus(&self, other: &GammaValue) -> GammaValue {
        GammaValue {
            driver: &self.driver - &other.driver,
            drift: &self.drift - &other.drift,
            diffusion: &self.diffusion - &other.diffusion,
        }
    }

    /// Every component multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> GammaValue {
        GammaValue {
            driver: &self.driver * scale,
            drift: &self.drift * scale,
            diffusion: &self.diffusion * scale,
        }
    }
}

/// A coefficient system `(Λ, Φ, Γ)` on a scenario tree.
///
/// `gamma(k, node, θ)` may only depend on the level-`k` node, `phi` on a
/// level-`N` node, and `lambda` on nothing but `y`.
pub trait CoefficientSet: Send + Sync {
    /// State dimension `n`.
    fn dim(&self) -> usize;

    /// Initial coupling `Λ(y)`.
    fn lambda(&self, y: &Vector) -> Vector;

    /// Terminal coupling `Φ(x)` at a level-`N` node.
    fn phi(&self, node: usize, x: &Vector) -> Vector;

    /// `(f, b, σ)` at step `k` and a level-`k` node.
    fn gamma(&self, k: usize, node: usize, theta: &Theta) -> GammaValue;

    /// Exact affine representation, if the set is affine.
    fn as_affine(&self) -> Option<&AffineCoefficients> {
        None
    }

    /// Checks that the set is defined on `topology`.
    fn check_topology(&self, _topology: &TreeTopology) -> Result<()> {
        Ok(())
    }
}

/// `θ ↦ X x + Y y' + Z z' + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub x: Matrix,
    pub y: Matrix,
    pub z: Matrix,
    pub offset: Vector,
}

impl AffineMap {
    /// The zero map on dimension `n`.
    pub fn zeros(n: usize) -> Self {
        Self {
            x: Matrix::zeros(n, n),
            y: Matrix::zeros(n, n),
            z: Matrix::zeros(n, n),
            offset: Vector::zeros(n),
        }
    }

    /// Evaluates the map.
    pub fn apply(&self, theta: &Theta) -> Vector {
        &self.x * &theta.x + &self.y * &theta.y + &self.z * &theta.z + &self.offset
    }

    fn check(&self, n: usize, what: &str) -> Result<()> {
        let square = |m: &Matrix| m.nrows() == n && m.ncols() == n;
        if !(square(&self.x) && square(&self.y) && square(&self.z) && self.offset.len() == n) {
            return Err(Error::Shape(format!("{what} blocks must be {n}x{n} with a length-{n} offset")));
        }
        if !self.x.iter().chain(self.y.iter()).chain(self.z.iter()).chain(self.offset.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidData(format!("{what} has non-finite entries")));
        }
        Ok(())
    }
}

/// `v ↦ A v + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub matrix: Matrix,
    pub offset: Vector,
}

impl LinearMap {
    /// Evaluates the map.
    pub fn apply(&self, value: &Vector) -> Vector {
        &self.matrix * value + &self.offset
    }

    fn check(&self, n: usize, what: &str) -> Result<()> {
        if self.matrix.nrows() != n || self.matrix.ncols() != n || self.offset.len() != n {
            return Err(Error::Shape(format!("{what} must be {n}x{n} with a length-{n} offset")));
        }
        if !self.matrix.iter().chain(self.offset.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidData(format!("{what} has non-finite entries")));
        }
        Ok(())
    }
}

/// Affine blocks for the driver, drift and diffusion at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStep {
    pub driver: AffineMap,
    pub drift: AffineMap,
    pub diffusion: AffineMap,
}

impl AffineStep {
    /// All-zero blocks.
    pub fn zeros(n: usize) -> Self {
        Self {
            driver: AffineMap::zeros(n),
            drift: AffineMap::zeros(n),
            diffusion: AffineMap::zeros(n),
        }
    }
}

/// Coefficient system whose every map is affine, stored as node-indexed blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoefficients {
    dim: usize,
    lambda: LinearMap,
    terminal: NodeMap<LinearMap>,
    steps: Vec<NodeMap<AffineStep>>,
}

impl AffineCoefficients {
    /// Validates block shapes; `steps[k]` holds the blocks of step `k`.
    pub fn new(
        dim: usize,
        lambda: LinearMap,
        terminal: NodeMap<LinearMap>,
        steps: Vec<NodeMap<AffineStep>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidData("state dimension must be positive".into()));
        }
        lambda.check(dim, "initial coupling")?;
        for map in terminal.values() {
            map.check(dim, "terminal coupling")?;
        }
        for (k, step) in steps.iter().enumerate() {
            for block in step.values() {
                block.driver.check(dim, &format!("driver at step {k}"))?;
                block.drift.check(dim, &format!("drift at step {k}"))?;
                block.diffusion.check(dim, &format!("diffusion at step {k}"))?;
            }
        }
        Ok(Self {
            dim,
            lambda,
            terminal,
            steps,
        })
    }

    /// Initial coupling block.
    pub fn lambda_map(&self) -> &LinearMap {
        &self.lambda
    }

    /// Terminal coupling block at a level-`N` node.
    pub fn terminal_map(&self, node: usize) -> &LinearMap {
        self.terminal.get(node)
    }

    /// Blocks of step `k` at a level-`k` node.
    pub fn step(&self, k: usize, node: usize) -> &AffineStep {
        self.steps[k].get(node)
    }

    /// Number of steps the blocks cover.
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Exact affine form of the α-blended system.
    pub fn blend(&self, topology: &TreeTopology, domination: &DominationData, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        self.check_topology(topology)?;
        domination.check(topology, self.dim)?;
        let beta = 1.0 - alpha;
        let (mu, nu) = (domination.mu, domination.nu);
        let m_gram = domination.m.transpose() * &domination.m;
        let lambda = LinearMap {
            matrix: &self.lambda.matrix * alpha - m_gram * (beta * mu),
            offset: &self.lambda.offset * alpha,
        };
        let horizon = topology.horizon();
        let terminal = NodeMap::PerNode(
            (0..topology.level_size(horizon))
                .map(|node| {
                    let map = self.terminal.get(node);
                    let g = domination.g.get(node);
                    LinearMap {
                        matrix: &map.matrix * alpha + g.transpose() * g * (beta * nu),
                        offset: &map.offset * alpha,
                    }
                })
                .collect(),
        );
        let steps = (0..horizon)
            .map(|k| {
                NodeMap::PerNode(
                    (0..topology.level_size(k))
                        .map(|node| {
                            let block = self.step(k, node);
                            let (a, b, c) = domination.abc(k, node);
                            let scale = |map: &AffineMap| AffineMap {
                                x: &map.x * alpha,
                                y: &map.y * alpha,
                                z: &map.z * alpha,
                                offset: &map.offset * alpha,
                            };
                            let mut driver = scale(&block.driver);
                            driver.x -= a.transpose() * a * (beta * nu);
                            let mut drift = scale(&block.drift);
                            drift.y -= b.transpose() * b * (beta * mu);
                            drift.z -= b.transpose() * c * (beta * mu);
                            let mut diffusion = scale(&block.diffusion);
                            diffusion.y -= c.transpose() * b * (beta * mu);
                            diffusion.z -= c.transpose() * c * (beta * mu);
                            AffineStep {
                                driver,
                                drift,
                                diffusion,
                            }
                        })
                        .collect(),
                )
            })
            .collect();
        Self::new(self.dim, lambda, terminal, steps)
    }
}

impl CoefficientSet for AffineCoefficients {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lambda(&self, y: &Vector) -> Vector {
        self.lambda.apply(y)
    }

    fn phi(&self, node: usize, x: &Vector) -> Vector {
        self.terminal.get(node).apply(x)
    }

    fn gamma(&self, k: usize, node: usize, theta: &Theta) -> GammaValue {
        let block = self.step(k, node);
        GammaValue {
            driver: block.driver.apply(theta),
            drift: block.drift.apply(theta),
            diffusion: block.diffusion.apply(theta),
        }
    }

    fn as_affine(&self) -> Option<&AffineCoefficients> {
        Some(self)
    }

    fn check_topology(&self, topology: &TreeTopology) -> Result<()> {
        let horizon = topology.horizon();
        if self.steps.len() != horizon {
            return Err(Error::Shape(format!(
                "coefficients cover {} steps but the tree has {horizon}",
                self.steps.len()
            )));
        }
        self.terminal.check(topology, horizon, "terminal coupling")?;
        for (k, step) in self.steps.iter().enumerate() {
            step.check(topology, k, "step blocks")?;
        }
        Ok(())
    }
}

/// Which of the two monotonicity constants is positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominationCase {
    /// `μ > 0`, `ν = 0`.
    Mu,
    /// `μ = 0`, `ν > 0`.
    Nu,
}

/// Domination-monotonicity data `(μ, ν, M, G, A, B, C)`.
///
/// `bound` is the constant `K` in the domination inequalities
/// `|ΔΛ| ≤ (K/μ)|M ŷ|` and so on; it equals 1 unless a rescaling is declared.
#[derive(Debug, Clone, PartialEq)]
pub struct DominationData {
    mu: f64,
    nu: f64,
    bound: f64,
    m: Matrix,
    g: NodeMap<Matrix>,
    a: Vec<NodeMap<Matrix>>,
    b: Vec<NodeMap<Matrix>>,
    c: Vec<NodeMap<Matrix>>,
}

impl DominationData {
    /// Validates constants and matrix shapes against each other.
    pub fn new(
        mu: f64,
        nu: f64,
        m: Matrix,
        g: NodeMap<Matrix>,
        a: Vec<NodeMap<Matrix>>,
        b: Vec<NodeMap<Matrix>>,
        c: Vec<NodeMap<Matrix>>,
    ) -> Result<Self> {
        if !(mu.is_finite() && nu.is_finite()) || mu < 0.0 || nu < 0.0 {
            return Err(Error::InvalidData(format!("constants must be finite and nonnegative, got μ={mu}, ν={nu}")));
        }
        if (mu > 0.0) == (nu > 0.0) {
            return Err(Error::InvalidData(format!(
                "exactly one of μ and ν must be positive, got μ={mu}, ν={nu}"
            )));
        }
        if a.len() != b.len() || a.len() != c.len() {
            return Err(Error::Shape("A, B and C must cover the same steps".into()));
        }
        let n = m.ncols();
        let check = |matrix: &Matrix, rows: Option<usize>, what: &str| -> Result<()> {
            if matrix.ncols() != n || rows.is_some_and(|r| matrix.nrows() != r) {
                return Err(Error::Shape(format!("{what} has shape {}x{}", matrix.nrows(), matrix.ncols())));
            }
            if !matrix.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidData(format!("{what} has non-finite entries")));
            }
            Ok(())
        };
        check(&m, None, "M")?;
        let g_rows = g.values()[0].nrows();
        for matrix in g.values() {
            check(matrix, Some(g_rows), "G")?;
        }
        let rows = a.first().map(|map| map.values()[0].nrows());
        for (k, ((ak, bk), ck)) in a.iter().zip(&b).zip(&c).enumerate() {
            for matrix in ak.values() {
                check(matrix, rows, &format!("A at step {k}"))?;
            }
            for matrix in bk.values() {
                check(matrix, rows, &format!("B at step {k}"))?;
            }
            for matrix in ck.values() {
                check(matrix, rows, &format!("C at step {k}"))?;
            }
        }
        Ok(Self {
            mu,
            nu,
            bound: 1.0,
            m,
            g,
            a,
            b,
            c,
        })
    }

    /// Declares the domination constant `K`.
    pub fn with_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::InvalidData(format!("domination constant must be positive, got {bound}")));
        }
        self.bound = bound;
        Ok(self)
    }

    /// Checks the data covers `topology` with state dimension `n`.
    pub fn check(&self, topology: &TreeTopology, n: usize) -> Result<()> {
        if self.m.ncols() != n {
            return Err(Error::Shape(format!(
                "domination matrices act on dimension {}, coefficients on {n}",
                self.m.ncols()
            )));
        }
        let horizon = topology.horizon();
        if self.a.len() != horizon {
            return Err(Error::Shape(format!(
                "domination data covers {} steps but the tree has {horizon}",
                self.a.len()
            )));
        }
        self.g.check(topology, horizon, "G")?;
        for k in 0..horizon {
            self.a[k].check(topology, k, "A")?;
            self.b[k].check(topology, k, "B")?;
            self.c[k].check(topology, k, "C")?;
        }
        Ok(())
    }

    /// The constant `μ`.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// The constant `ν`.
    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// The domination constant `K`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Which constant is positive.
    pub fn case(&self) -> DominationCase {
        if self.mu > 0.0 {
            DominationCase::Mu
        } else {
            DominationCase::Nu
        }
    }

    /// The matrix `M`.
    pub fn m(&self) -> &Matrix {
        &self.m
    }

    /// `G` at a level-`N` node.
    pub fn g(&self, node: usize) -> &Matrix {
        self.g.get(node)
    }

    /// `(A_k, B_k, C_k)` at a level-`k` node.
    pub fn abc(&self, k: usize, node: usize) -> (&Matrix, &Matrix, &Matrix) {
        (self.a[k].get(node), self.b[k].get(node), self.c[k].get(node))
    }

    /// `-ν A_kᵀ A_k x`.
    pub fn core_driver(&self, k: usize, node: usize, x: &Vector) -> Vector {
        let a = self.a[k].get(node);
        -(a.transpose() * (a * x)) * self.nu
    }

    /// `(-μ B_kᵀ Q, -μ C_kᵀ Q)` with `Q = B_k y' + C_k z'`.
    pub fn core_forward(&self, k: usize, node: usize, y: &Vector, z: &Vector) -> (Vector, Vector) {
        let (_, b, c) = self.abc(k, node);
        let q = b * y + c * z;
        (-(b.transpose() * &q) * self.mu, -(c.transpose() * &q) * self.mu)
    }

    /// `-μ Mᵀ M y`.
    pub fn core_lambda(&self, y: &Vector) -> Vector {
        -(self.m.transpose() * (&self.m * y)) * self.mu
    }

    /// `ν Gᵀ G x` at a level-`N` node.
    pub fn core_phi(&self, node: usize, x: &Vector) -> Vector {
        let g = self.g.get(node);
        (g.transpose() * (g * x)) * self.nu
    }

    /// The α = 0 value of `Γ`.
    pub fn core_gamma(&self, k: usize, node: usize, theta: &Theta) -> GammaValue {
        let (drift, diffusion) = self.core_forward(k, node, &theta.y, &theta.z);
        GammaValue {
            driver: self.core_driver(k, node, &theta.x),
            drift,
            diffusion,
        }
    }
}

/// `P = A_k x` and `Q = B_k y' + C_k z'`.
pub fn pq_maps(
    domination: &DominationData,
    k: usize,
    node: usize,
    x: &Vector,
    y: &Vector,
    z: &Vector,
) -> Result<(Vector, Vector)> {
    let (a, b, c) = domination.abc(k, node);
    let n = a.ncols();
    if x.len() != n || y.len() != n || z.len() != n {
        return Err(Error::Shape(format!(
            "P/Q maps act on dimension {n}, got {}, {}, {}",
            x.len(),
            y.len(),
            z.len()
        )));
    }
    Ok((a * x, b * y + c * z))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Usage(format!("blend parameter must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// The α-blend of a coefficient system with the linear core of its domination data.
pub struct Blended<'a> {
    base: &'a dyn CoefficientSet,
    domination: &'a DominationData,
    alpha: f64,
}

/// Blends `coefficients` with the monotone linear core at weight `alpha`.
pub fn blend_alpha<'a>(
    coefficients: &'a dyn CoefficientSet,
    domination: &'a DominationData,
    alpha: f64,
) -> Result<Blended<'a>> {
    check_alpha(alpha)?;
    Ok(Blended {
        base: coefficients,
        domination,
        alpha,
    })
}

impl Blended<'_> {
    /// The blend weight.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl CoefficientSet for Blended<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn lambda(&self, y: &Vector) -> Vector {
        self.base.lambda(y) * self.alpha + self.domination.core_lambda(y) * (1.0 - self.alpha)
    }

    fn phi(&self, node: usize, x: &Vector) -> Vector {
        self.base.phi(node, x) * self.alpha + self.domination.core_phi(node, x) * (1.0 - self.alpha)
    }

    fn gamma(&self, k: usize, node: usize, theta: &Theta) -> GammaValue {
        let full = self.base.gamma(k, node, theta);
        let core = self.domination.core_gamma(k, node, theta);
        let beta = 1.0 - self.alpha;
        GammaValue {
            driver: full.driver * self.alpha + core.driver * beta,
            drift: full.drift * self.alpha + core.drift * beta,
            diffusion: full.diffusion * self.alpha + core.diffusion * beta,
        }
    }

    fn check_topology(&self, topology: &TreeTopology) -> Result<()> {
        self.base.check_topology(topology)
    }
}

/// The system with `Λ`, `Φ` and `Γ` all multiplied by `-1`.
///
/// It satisfies the flipped monotonicity inequalities exactly when the
/// original satisfies the standard ones, with the same domination data.
pub struct Negated<'a> {
    inner: &'a dyn CoefficientSet,
}

impl<'a> Negated<'a> {
    /// Wraps `inner`.
    pub fn new(inner: &'a dyn CoefficientSet) -> Self {
        Self { inner }
    }
}

impl CoefficientSet for Negated<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn lambda(&self, y: &Vector) -> Vector {
        -self.inner.lambda(y)
    }

    fn phi(&self, node: usize, x: &Vector) -> Vector {
        -self.inner.phi(node, x)
    }

    fn gamma(&self, k: usize, node: usize, theta: &Theta) -> GammaValue {
        self.inner.gamma(k, node, theta).scaled(-1.0)
    }

    fn check_topology(&self, topology: &TreeTopology) -> Result<()> {
        self.inner.check_topology(topology)
    }
}

/// The system rewritten for the unknown `ỹ = -y`.
///
/// If `(x, y)` solves the original equations then `(x, -y)` solves the
/// reflected ones, and the reflection swaps the standard and flipped
/// monotonicity orientations while keeping the domination data. Solving a
/// flipped-orientation system therefore amounts to solving its reflection
/// and negating `y`.
pub struct Reflected<'a> {
    inner: &'a dyn CoefficientSet,
}

impl<'a> Reflected<'a> {
    /// Wraps `inner`.
    pub fn new(inner: &'a dyn CoefficientSet) -> Self {
        Self { inner }
    }
}

impl CoefficientSet for Reflected<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn lambda(&self, y: &Vector) -> Vector {
        self.inner.lambda(&-y)
    }

    fn phi(&self, node: usize, x: &Vector) -> Vector {
        -self.inner.phi(node, x)
    }

    fn gamma(&self, k: usize, node: usize, theta: &Theta) -> GammaValue {
        let value = self.inner.gamma(k, node, &theta.reflect());
        GammaValue {
            driver: -value.driver,
            drift: value.drift,
            diffusion: value.diffusion,
        }
    }

    fn check_topology(&self, topology: &TreeTopology) -> Result<()> {
        self.inner.check_topology(topology)
    }
}

/// Which sign convention the monotonicity inequalities use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `⟨ΔΛ, ŷ⟩ ≤ -μ|Mŷ|²`, `⟨ΔΦ, x̂⟩ ≥ ν|Gx̂|²`, `⟨ΔΓ, θ̂⟩ ≤ -ν|Ax̂|² - μ|Q̂|²`.
    #[default]
    Standard,
    /// The same three inequalities with every sign reversed.
    Flipped,
}

/// One inequality of the domination or monotonicity families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Inequality {
    DominationLambda,
    DominationPhi,
    DominationDriver,
    DominationDrift,
    DominationDiffusion,
    MonotoneLambda,
    MonotonePhi,
    MonotoneGamma,
}

impl Inequality {
    /// Every inequality in report order.
    pub const ALL: [Inequality; 8] = [
        Inequality::DominationLambda,
        Inequality::DominationPhi,
        Inequality::DominationDriver,
        Inequality::DominationDrift,
        Inequality::DominationDiffusion,
        Inequality::MonotoneLambda,
        Inequality::MonotonePhi,
        Inequality::MonotoneGamma,
    ];

    /// True for the monotonicity family.
    pub fn is_monotonicity(self) -> bool {
        matches!(
            self,
            Inequality::MonotoneLambda | Inequality::MonotonePhi | Inequality::MonotoneGamma
        )
    }
}

/// One sampled comparison point.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// Step of the `Γ` evaluation.
    pub k: usize,
    /// Level-`k` node of the `Γ` evaluation.
    pub node: usize,
    /// Level-`N` node of the `Φ` evaluation.
    pub terminal_node: usize,
    pub theta: Theta,
    pub theta_bar: Theta,
}

/// Slacks (right side minus left side, nonnegative when satisfied) at one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSlacks {
    /// Active inequalities and their slacks.
    pub slacks: Vec<(Inequality, f64)>,
    /// Difference quotients for `Λ, Φ, f, b, σ`, when the denominator is nonzero.
    pub quotients: [Option<f64>; 5],
}

impl PairSlacks {
    /// Slack of one inequality, if it was active.
    pub fn get(&self, inequality: Inequality) -> Option<f64> {
        self.slacks.iter().find(|(which, _)| *which == inequality).map(|(_, s)| *s)
    }
}

/// Evaluates every active inequality at one pair.
pub fn pair_slacks(
    coefficients: &dyn CoefficientSet,
    domination: &DominationData,
    pair: &SamplePair,
    orientation: Orientation,
) -> PairSlacks {
    let (mu, nu, bound) = (domination.mu, domination.nu, domination.bound);
    let (k, node) = (pair.k, pair.node);
    let (theta, bar) = (&pair.theta, &pair.theta_bar);
    let hat = theta.minus(bar);
    let (a, b, c) = domination.abc(k, node);
    let m_hat = domination.m() * &hat.y;
    let g_hat = domination.g(pair.terminal_node) * &hat.x;
    let p_hat = a * &hat.x;
    let q_hat = b * &hat.y + c * &hat.z;

    let lambda_hat = coefficients.lambda(&theta.y) - coefficients.lambda(&bar.y);
    let phi_hat = coefficients.phi(pair.terminal_node, &theta.x) - coefficients.phi(pair.terminal_node, &bar.x);
    let gamma = coefficients.gamma(k, node, theta);
    let gamma_bar = coefficients.gamma(k, node, bar);
    let gamma_hat = gamma.minus(&gamma_bar);

    let mut slacks = Vec::with_capacity(8);
    if mu > 0.0 {
        let same_x = Theta::new(theta.x.clone(), bar.y.clone(), bar.z.clone());
        let partial = gamma.minus(&coefficients.gamma(k, node, &same_x));
        let limit = bound / mu * q_hat.norm();
        slacks.push((Inequality::DominationLambda, bound / mu * m_hat.norm() - lambda_hat.norm()));
        slacks.push((Inequality::DominationDrift, limit - partial.drift.norm()));
        slacks.push((Inequality::DominationDiffusion, limit - partial.diffusion.norm()));
    }
    if nu > 0.0 {
        let same_yz = Theta::new(bar.x.clone(), theta.y.clone(), theta.z.clone());
        let partial = gamma.minus(&coefficients.gamma(k, node, &same_yz));
        slacks.push((Inequality::DominationPhi, bound / nu * g_hat.norm() - phi_hat.norm()));
        slacks.push((Inequality::DominationDriver, bound / nu * p_hat.norm() - partial.driver.norm()));
    }

    let lambda_pair = lambda_hat.dot(&hat.y);
    let phi_pair = phi_hat.dot(&hat.x);
    let gamma_pair = gamma_hat.pairing(&hat);
    let m_sq = mu * m_hat.norm_squared();
    let g_sq = nu * g_hat.norm_squared();
    let core_sq = nu * p_hat.norm_squared() + mu * q_hat.norm_squared();
    let (lambda_slack, phi_slack, gamma_slack) = match orientation {
        Orientation::Standard => (-m_sq - lambda_pair, phi_pair - g_sq, -core_sq - gamma_pair),
        Orientation::Flipped => (lambda_pair - m_sq, -g_sq - phi_pair, gamma_pair - core_sq),
    };
    slacks.push((Inequality::MonotoneLambda, lambda_slack));
    slacks.push((Inequality::MonotonePhi, phi_slack));
    slacks.push((Inequality::MonotoneGamma, gamma_slack));

    let quotient = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
    let theta_gap = hat.norm();
    let quotients = [
        quotient(lambda_hat.norm(), hat.y.norm()),
        quotient(phi_hat.norm(), hat.x.norm()),
        quotient(gamma_hat.driver.norm(), theta_gap),
        quotient(gamma_hat.drift.norm(), theta_gap),
        quotient(gamma_hat.diffusion.norm(), theta_gap),
    ];
    PairSlacks { slacks, quotients }
}

/// Sampling parameters for [`check_conditions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    /// Number of sampled pairs.
    pub samples: usize,
    pub seed: u64,
    /// A pair violates an inequality when its slack is below `-tolerance`.
    pub tolerance: f64,
    pub orientation: Orientation,
    /// Standard deviation of the sampled `θ` entries.
    pub scale: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            tolerance: 1e-12,
            orientation: Orientation::Standard,
            scale: 2.0,
        }
    }
}

/// Empirical Lipschitz constants: largest sampled difference quotients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LipschitzEstimates {
    pub lambda: f64,
    pub phi: f64,
    pub driver: f64,
    pub drift: f64,
    pub diffusion: f64,
}

/// Sampled outcome of one inequality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityStats {
    pub inequality: Inequality,
    /// Number of pairs at which the inequality was active.
    pub evaluated: usize,
    pub violations: usize,
    /// Smallest slack seen, absent when never evaluated.
    pub worst_slack: Option<f64>,
}

/// Outcome of a sampling check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub orientation: Orientation,
    pub samples: usize,
    pub tolerance: f64,
    /// Empirical constants, not proven bounds.
    pub empirical_lipschitz: LipschitzEstimates,
    pub inequalities: Vec<InequalityStats>,
}

impl ConditionReport {
    /// Violations summed over every inequality.
    pub fn total_violations(&self) -> usize {
        self.inequalities.iter().map(|s| s.violations).sum()
    }

    /// Violations of the monotonicity family only.
    pub fn monotonicity_violations(&self) -> usize {
        self.inequalities
            .iter()
            .filter(|s| s.inequality.is_monotonicity())
            .map(|s| s.violations)
            .sum()
    }

    /// Statistics of one inequality.
    pub fn stats(&self, inequality: Inequality) -> &InequalityStats {
        self.inequalities
            .iter()
            .find(|s| s.inequality == inequality)
            .expect("every inequality has an entry")
    }
}

/// Aggregates [`pair_slacks`] over explicit pairs.
pub fn check_condition_pairs(
    coefficients: &dyn CoefficientSet,
    domination: &DominationData,
    pairs: &[SamplePair],
    tolerance: f64,
    orientation: Orientation,
) -> ConditionReport {
    let mut stats: Vec<InequalityStats> = Inequality::ALL
        .iter()
        .map(|&inequality| InequalityStats {
            inequality,
            evaluated: 0,
            violations: 0,
            worst_slack: None,
        })
        .collect();
    let mut lipschitz = [0.0f64; 5];
    for pair in pairs {
        let evaluation = pair_slacks(coefficients, domination, pair, orientation);
        for (inequality, slack) in evaluation.slacks {
            let entry = stats
                .iter_mut()
                .find(|s| s.inequality == inequality)
                .expect("every inequality has an entry");
            entry.evaluated += 1;
            if slack < -tolerance {
                entry.violations += 1;
            }
            entry.worst_slack = Some(entry.worst_slack.map_or(slack, |worst| worst.min(slack)));
        }
        for (best, quotient) in lipschitz.iter_mut().zip(evaluation.quotients) {
            if let Some(value) = quotient {
                *best = best.max(value);
            }
        }
    }
    ConditionReport {
        orientation,
        samples: pairs.len(),
        tolerance,
        empirical_lipschitz: LipschitzEstimates {
            lambda: lipschitz[0],
            phi: lipschitz[1],
            driver: lipschitz[2],
            drift: lipschitz[3],
            diffusion: lipschitz[4],
        },
        inequalities: stats,
    }
}

/// Draws random pairs at random nodes, reproducibly from `seed`.
pub fn sample_pairs(topology: &TreeTopology, n: usize, samples: usize, seed: u64, scale: f64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = topology.horizon();
    (0..samples)
        .map(|_| {
            let k = rng.gen_range(0..horizon);
            let node = rng.gen_range(0..topology.level_size(k));
            let terminal_node = rng.gen_range(0..topology.level_size(horizon));
            let mut draw = || gaussian_vector(&mut rng, n) * scale;
            let theta = Theta::new(draw(), draw(), draw());
            let theta_bar = Theta::new(draw(), draw(), draw());
            SamplePair {
                k,
                node,
                terminal_node,
                theta,
                theta_bar,
            }
        })
        .collect()
}

/// Samples random pairs and checks every domination and monotonicity inequality.
pub fn check_conditions(
    coefficients: &dyn CoefficientSet,
    domination: &DominationData,
    topology: &TreeTopology,
    options: &CheckOptions,
) -> Result<ConditionReport> {
    if options.samples == 0 {
        return Err(Error::Usage("the checker needs at least one sample".into()));
    }
    coefficients.check_topology(topology)?;
    domination.check(topology, coefficients.dim())?;
    let pairs = sample_pairs(topology, coefficients.dim(), options.samples, options.seed, options.scale);
    Ok(check_condition_pairs(
        coefficients,
        domination,
        &pairs,
        options.tolerance,
        options.orientation,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64) -> Matrix {
        Matrix::from_element(1, 1, value)
    }

    fn one_step_case_mu() -> (TreeTopology, AffineCoefficients, DominationData) {
        let topology = TreeTopology::rademacher(1).unwrap();
        let mut step = AffineStep::zeros(1);
        step.driver.x = scalar(-1.0);
        step.drift.y = scalar(-1.0);
        step.diffusion.z = scalar(-1.0);
        let coefficients = AffineCoefficients::new(
            1,
            LinearMap {
                matrix: scalar(-1.0),
                offset: Vector::zeros(1),
            },
            NodeMap::Uniform(LinearMap {
                matrix: scalar(1.0),
                offset: Vector::zeros(1),
            }),
            vec![NodeMap::Uniform(step)],
        )
        .unwrap();
        let domination = DominationData::new(
            1.0,
            0.0,
            scalar(1.0),
            NodeMap::Uniform(Matrix::zeros(2, 1)),
            vec![NodeMap::Uniform(Matrix::zeros(2, 1))],
            vec![NodeMap::Uniform(Matrix::from_column_slice(2, 1, &[1.0, 0.0]))],
            vec![NodeMap::Uniform(Matrix::from_column_slice(2, 1, &[0.0, 1.0]))],
        )
        .unwrap();
        (topology, coefficients, domination)
    }

    #[test]
    fn pq_maps_are_matrix_products() {
        let (_, _, domination) = one_step_case_mu();
        let one = Vector::from_element(1, 1.0);
        let (p, q) = pq_maps(&domination, 0, 0, &one, &Vector::from_element(1, 3.0), &Vector::from_element(1, 7.0)).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 0.0]);
        assert_eq!(q.as_slice(), &[3.0, 7.0]);
        assert!(pq_maps(&domination, 0, 0, &Vector::zeros(2), &one, &one).is_err());
    }

    #[test]
    fn both_constants_zero_is_rejected() {
        let zero = scalar(0.0);
        let result = DominationData::new(
            0.0,
            0.0,
            zero.clone(),
            NodeMap::Uniform(zero.clone()),
            vec![],
            vec![],
            vec![],
        );
        assert!(matches!(result, Err(Error::InvalidData(_))));
        let both = DominationData::new(1.0, 1.0, zero.clone(), NodeMap::Uniform(zero), vec![], vec![], vec![]);
        assert!(both.is_err());
    }

    #[test]
    fn blend_rejects_out_of_range_weights() {
        let (_, coefficients, domination) = one_step_case_mu();
        assert!(blend_alpha(&coefficients, &domination, 1.5).is_err());
        assert!(blend_alpha(&coefficients, &domination, -0.1).is_err());
        assert!(blend_alpha(&coefficients, &domination, f64::NAN).is_err());
    }

    #[test]
    fn affine_blend_matches_pointwise_blend() {
        let (topology, coefficients, domination) = one_step_case_mu();
        let exact = coefficients.blend(&topology, &domination, 0.3).unwrap();
        let wrapped = blend_alpha(&coefficients, &domination, 0.3).unwrap();
        let theta = Theta::new(
            Vector::from_element(1, 0.7),
            Vector::from_element(1, -1.1),
            Vector::from_element(1, 2.5),
        );
        let (a, b) = (exact.gamma(0, 0, &theta), wrapped.gamma(0, 0, &theta));
        assert!((a.drift - b.drift).norm() < 1e-15);
        assert!((a.driver - b.driver).norm() < 1e-15);
        assert!((exact.lambda(&theta.y) - wrapped.lambda(&theta.y)).norm() < 1e-15);
    }

    #[test]
    fn identical_pairs_give_zero_slacks() {
        let (topology, coefficients, domination) = one_step_case_mu();
        let mut pairs = sample_pairs(&topology, 1, 20, 4, 1.0);
        for pair in &mut pairs {
            pair.theta_bar = pair.theta.clone();
        }
        let report = check_condition_pairs(&coefficients, &domination, &pairs, 1e-12, Orientation::Standard);
        for stats in &report.inequalities {
            if let Some(worst) = stats.worst_slack {
                assert_eq!(worst, 0.0);
            }
        }
        assert_eq!(report.empirical_lipschitz, LipschitzEstimates::default());
    }

    #[test]
    fn reflection_swaps_orientation() {
        let (topology, coefficients, domination) = one_step_case_mu();
        let options = CheckOptions {
            samples: 500,
            ..CheckOptions::default()
        };
        let standard = check_conditions(&coefficients, &domination, &topology, &options).unwrap();
        assert_eq!(standard.total_violations(), 0);
        let reflected = Reflected::new(&coefficients);
        let flipped = CheckOptions {
            orientation: Orientation::Flipped,
            ..options
        };
        let report = check_conditions(&reflected, &domination, &topology, &flipped).unwrap();
        assert_eq!(report.total_violations(), 0);
    }
}
