//! Experiment configuration files and their conversion into solver inputs.
//!
//! Matrices are written row by row. Any per-step entry may be given once,
//! in which case it is shared by every step, or as a list with one entry per
//! step. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use fbsde_core::coefficients::{
    AffineCoefficients, AffineMap, AffineStep, CheckOptions, DominationCase, DominationData, LinearMap, Orientation,
};
use fbsde_core::continuation::{ContinuationOptions, PerturbationData};
use fbsde_core::family::FamilySpec;
use fbsde_core::linalg::{Matrix, Vector};
use fbsde_core::lq::{BackwardLqData, BackwardLqParts, ControlProcess, ForwardLqData, ForwardLqParts, InsuranceParameters};
use fbsde_core::tree::{Field, NodeMap, NoiseLaw, TreeTopology};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Offsets added to the base seed for each generator.
pub mod salt {
    pub const FAMILY: u64 = 0;
    pub const PERTURBATION: u64 = 1;
    pub const CHECK: u64 = 2;
    pub const LQ: u64 = 3;
    pub const CONTROL: u64 = 4;
    pub const COMPARISON: u64 = 5;
}

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sde,
    Bsde,
    Fbsde,
    Check,
    Flq,
    Blq,
    Insurance,
    Suite,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sde => "sde",
            Mode::Bsde => "bsde",
            Mode::Fbsde => "fbsde",
            Mode::Check => "check",
            Mode::Flq => "flq",
            Mode::Blq => "blq",
            Mode::Insurance => "insurance",
            Mode::Suite => "suite",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Base seed for every generator that has no seed of its own.
    pub seed: Option<u64>,
    pub topology: Option<TopologyConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub sde: Option<SdeConfig>,
    pub bsde: Option<BsdeConfig>,
    pub coefficients: Option<CoefficientConfig>,
    pub perturbation: Option<PerturbationConfig>,
    pub flq: Option<FlqConfig>,
    pub blq: Option<BlqConfig>,
    pub insurance: Option<InsuranceConfig>,
    pub suite: Option<SuiteConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub horizon: usize,
    pub support: Option<Vec<f64>>,
    pub probabilities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub delta_init: Option<f64>,
    pub delta_min: Option<f64>,
    pub flat_first: Option<bool>,
    pub max_depth: Option<usize>,
    pub work_budget: Option<u64>,
    /// Target `α`, 1 unless given.
    pub alpha: Option<f64>,
    #[serde(default)]
    pub orientation: Orientation,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    /// Set to false to skip the sampled condition check in solver modes.
    pub enabled: Option<bool>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub tolerance: Option<f64>,
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: Option<PathBuf>,
}

/// One value shared by every step, or one value per step.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PerStep<T> {
    Shared(T),
    Each(Vec<T>),
}

impl<T: Clone> PerStep<T> {
    fn expand(&self, horizon: usize, path: &str) -> CliResult<Vec<T>> {
        match self {
            PerStep::Shared(value) => Ok(vec![value.clone(); horizon]),
            PerStep::Each(values) if values.len() == horizon => Ok(values.clone()),
            PerStep::Each(values) => Err(CliError::at(
                path,
                format!("lists {} steps, the horizon is {horizon}", values.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineTermConfig {
    pub matrix: Rows,
    pub offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub initial: Vec<f64>,
    pub drift: PerStep<AffineTermConfig>,
    pub diffusion: PerStep<AffineTermConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeStepConfig {
    /// Coefficient of `y'`.
    pub mean: Rows,
    /// Coefficient of `z'`.
    pub noise: Rows,
    pub offset: Option<Vec<f64>>,
}

/// A level-`N` value: one vector for every leaf, or one per leaf.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TerminalConfig {
    Constant(Vec<f64>),
    PerNode(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeConfig {
    pub terminal: TerminalConfig,
    pub steps: PerStep<BsdeStepConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub dim: usize,
    pub rows: usize,
    #[serde(default)]
    pub gain: f64,
    pub seed: Option<u64>,
    pub case: DominationCase,
    pub coupling: Option<f64>,
    /// Negate `Λ`, `Φ` and `Γ`, producing a system in the flipped orientation.
    #[serde(default)]
    pub negate: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub x: Option<Rows>,
    pub y: Option<Rows>,
    pub z: Option<Rows>,
    pub offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    #[serde(default)]
    pub driver: MapConfig,
    #[serde(default)]
    pub drift: MapConfig,
    #[serde(default)]
    pub diffusion: MapConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideConfig {
    pub step: usize,
    pub node: usize,
    pub driver: Option<MapConfig>,
    pub drift: Option<MapConfig>,
    pub diffusion: Option<MapConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    pub dim: usize,
    pub lambda: AffineTermConfig,
    pub terminal: AffineTermConfig,
    pub steps: PerStep<StepConfig>,
    #[serde(default)]
    pub overrides: Vec<OverrideConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DominationConfig {
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub nu: f64,
    pub m: Rows,
    pub g: Rows,
    pub a: PerStep<Rows>,
    pub b: PerStep<Rows>,
    pub c: PerStep<Rows>,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    pub family: Option<FamilyConfig>,
    pub affine: Option<AffineConfig>,
    pub domination: Option<DominationConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Standard deviation of the random perturbation; zero data when absent.
    #[serde(default)]
    pub scale: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomLqConfig {
    pub state_dim: usize,
    pub control_dim: usize,
    pub seed: Option<u64>,
}

fn default_comparisons() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlqConfig {
    pub random: Option<RandomLqConfig>,
    pub state_dim: Option<usize>,
    pub control_dim: Option<usize>,
    pub state_matrix: Option<PerStep<Rows>>,
    pub control_matrix: Option<PerStep<Rows>>,
    pub noise_state_matrix: Option<PerStep<Rows>>,
    pub noise_control_matrix: Option<PerStep<Rows>>,
    pub drift_offset: Option<PerStep<Vec<f64>>>,
    pub noise_offset: Option<PerStep<Vec<f64>>>,
    pub initial_weight: Option<Rows>,
    pub terminal_weight: Option<Rows>,
    pub state_weight: Option<PerStep<Rows>>,
    pub control_weight: Option<PerStep<Rows>>,
    /// Random admissible controls compared against the optimum.
    #[serde(default = "default_comparisons")]
    pub comparisons: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlqConfig {
    pub random: Option<RandomLqConfig>,
    pub state_dim: Option<usize>,
    pub control_dim: Option<usize>,
    pub mean_matrix: Option<PerStep<Rows>>,
    pub noise_matrix: Option<PerStep<Rows>>,
    pub control_matrix: Option<PerStep<Rows>>,
    pub offset: Option<PerStep<Vec<f64>>>,
    pub terminal: Option<TerminalConfig>,
    pub initial_weight: Option<Rows>,
    pub mean_weight: Option<PerStep<Rows>>,
    pub noise_weight: Option<PerStep<Rows>>,
    pub control_weight: Option<PerStep<Rows>>,
    #[serde(default = "default_comparisons")]
    pub comparisons: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvestmentConfig {
    /// Same investment at every node.
    pub constant: Option<f64>,
    /// Standard deviation of a random investment.
    pub random_scale: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsuranceConfig {
    pub rate: PerStep<f64>,
    pub premium: PerStep<f64>,
    pub volatility: PerStep<f64>,
    pub growth: PerStep<f64>,
    pub payout: PerStep<f64>,
    pub initial_wealth: f64,
    #[serde(default)]
    pub investment: InvestmentConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    /// Criteria to run, all of them when absent.
    pub criteria: Option<Vec<u8>>,
}

/// Reads and parses a config file.
pub fn load(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|span| text[..span.start].matches('\n').count() + 1);
        let at = line.map(|l| format!(" line {l}")).unwrap_or_default();
        CliError::Validation(format!("{}{at}: {}", path.display(), e.message()))
    })
}

impl ExperimentConfig {
    /// Replaces every seed with one derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.check.seed = None;
        if let Some(family) = self.coefficients.as_mut().and_then(|c| c.family.as_mut()) {
            family.seed = None;
        }
        if let Some(perturbation) = self.perturbation.as_mut() {
            perturbation.seed = None;
        }
        if let Some(random) = self.flq.as_mut().and_then(|c| c.random.as_mut()) {
            random.seed = None;
        }
        if let Some(random) = self.blq.as_mut().and_then(|c| c.random.as_mut()) {
            random.seed = None;
        }
        if let Some(insurance) = self.insurance.as_mut() {
            insurance.investment.seed = None;
        }
    }

    /// Seed of a generator: its own if given, else the base seed plus `salt`.
    pub fn seed_for(&self, own: Option<u64>, salt: u64) -> u64 {
        own.unwrap_or_else(|| self.seed.unwrap_or(0).wrapping_add(salt))
    }

    pub fn topology(&self) -> CliResult<TreeTopology> {
        let block = self
            .topology
            .as_ref()
            .ok_or_else(|| CliError::at("topology.horizon", "missing key"))?;
        let law = match (&block.support, &block.probabilities) {
            (None, None) => NoiseLaw::rademacher(),
            (Some(support), Some(probabilities)) => {
                NoiseLaw::new(support.clone(), probabilities.clone()).map_err(|e| CliError::at("topology", e))?
            }
            _ => {
                return Err(CliError::at(
                    "topology",
                    "support and probabilities must be given together",
                ))
            }
        };
        TreeTopology::new(block.horizon, law).map_err(|e| CliError::at("topology", e))
    }

    pub fn continuation_options(&self) -> CliResult<ContinuationOptions> {
        let defaults = ContinuationOptions::default();
        let s = &self.solver;
        let options = ContinuationOptions {
            tolerance: s.tolerance.unwrap_or(defaults.tolerance),
            max_iterations: s.max_iterations.unwrap_or(defaults.max_iterations),
            delta_init: s.delta_init.unwrap_or(defaults.delta_init),
            delta_min: s.delta_min.unwrap_or(defaults.delta_min),
            flat_first: s.flat_first.unwrap_or(defaults.flat_first),
            max_depth: s.max_depth.unwrap_or(defaults.max_depth),
            work_budget: s.work_budget.unwrap_or(defaults.work_budget),
        };
        options.validate().map_err(|e| CliError::at("solver", e))?;
        Ok(options)
    }

    pub fn alpha(&self) -> CliResult<f64> {
        let alpha = self.solver.alpha.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CliError::at("solver.alpha", format!("must lie in [0, 1], got {alpha}")));
        }
        Ok(alpha)
    }

    pub fn check_options(&self) -> CliResult<CheckOptions> {
        let defaults = CheckOptions::default();
        let c = &self.check;
        let options = CheckOptions {
            samples: c.samples.unwrap_or(defaults.samples),
            seed: self.seed_for(c.seed, salt::CHECK),
            tolerance: c.tolerance.unwrap_or(defaults.tolerance),
            orientation: self.solver.orientation,
            scale: c.scale.unwrap_or(defaults.scale),
        };
        if options.samples == 0 {
            return Err(CliError::at("check.samples", "must be positive"));
        }
        if !(options.tolerance >= 0.0 && options.scale > 0.0) {
            return Err(CliError::at("check", "tolerance must be nonnegative and scale positive"));
        }
        Ok(options)
    }

    pub fn check_enabled(&self) -> bool {
        self.check.enabled.unwrap_or(true)
    }

    pub fn perturbation(&self, topology: &TreeTopology, dim: usize) -> CliResult<(PerturbationData, Option<u64>)> {
        let block = self.perturbation.clone().unwrap_or_default();
        if block.scale == 0.0 {
            return Ok((PerturbationData::zeros(topology, dim)?, None));
        }
        if !(block.scale.is_finite() && block.scale > 0.0) {
            return Err(CliError::at("perturbation.scale", "must be nonnegative"));
        }
        let seed = self.seed_for(block.seed, salt::PERTURBATION);
        Ok((PerturbationData::random(topology, dim, block.scale, seed)?, Some(seed)))
    }

    pub fn output_directory(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.directory.clone())
            .unwrap_or_else(|| PathBuf::from("fbsde-out"))
    }

    /// Block named by the mode, or a validation error naming it.
    pub fn block<'a, T>(&self, block: &'a Option<T>, name: &str) -> CliResult<&'a T> {
        block.as_ref().ok_or_else(|| CliError::at(name, format!("missing block for mode {}", self.mode.name())))
    }
}

pub fn matrix(rows: &Rows, path: &str) -> CliResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(CliError::at(path, "matrix must have at least one row and one column"));
    }
    if rows.iter().any(|row| row.len() != cols) {
        return Err(CliError::at(path, "rows have different lengths"));
    }
    Ok(Matrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied()))
}

fn square(rows: &Rows, dim: usize, path: &str) -> CliResult<Matrix> {
    sized(rows, dim, dim, path)
}

fn sized(rows: &Rows, nrows: usize, ncols: usize, path: &str) -> CliResult<Matrix> {
    let m = matrix(rows, path)?;
    if m.shape() != (nrows, ncols) {
        return Err(CliError::at(path, format!("expected {nrows}x{ncols}, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m)
}

pub fn vector(values: &[f64], dim: usize, path: &str) -> CliResult<Vector> {
    if values.len() != dim {
        return Err(CliError::at(path, format!("expected {dim} entries, got {}", values.len())));
    }
    Ok(Vector::from_column_slice(values))
}

fn offset(values: &Option<Vec<f64>>, dim: usize, path: &str) -> CliResult<Vector> {
    values.as_ref().map_or_else(|| Ok(Vector::zeros(dim)), |v| vector(v, dim, path))
}

fn steps_of<T: Clone, U>(
    entry: &PerStep<T>,
    horizon: usize,
    path: &str,
    mut convert: impl FnMut(&T, &str) -> CliResult<U>,
) -> CliResult<Vec<NodeMap<U>>> {
    entry
        .expand(horizon, path)?
        .iter()
        .enumerate()
        .map(|(k, value)| convert(value, &format!("{path}[{k}]")).map(NodeMap::Uniform))
        .collect()
}

fn optional_steps<T: Clone, U>(
    entry: &Option<PerStep<T>>,
    horizon: usize,
    path: &str,
    zero: impl Fn() -> U,
    convert: impl FnMut(&T, &str) -> CliResult<U>,
) -> CliResult<Vec<NodeMap<U>>> {
    match entry {
        Some(entry) => steps_of(entry, horizon, path, convert),
        None => Ok((0..horizon).map(|_| NodeMap::Uniform(zero())).collect()),
    }
}

fn required<'a, T>(value: &'a Option<T>, path: &str) -> CliResult<&'a T> {
    value.as_ref().ok_or_else(|| CliError::at(path, "missing key"))
}

pub fn terminal_field(config: &TerminalConfig, topology: &TreeTopology, dim: usize, path: &str) -> CliResult<Field> {
    let horizon = topology.horizon();
    match config {
        TerminalConfig::Constant(values) => Ok(Field::constant(topology, horizon, &vector(values, dim, path)?)),
        TerminalConfig::PerNode(rows) => {
            if rows.len() != topology.level_size(horizon) {
                return Err(CliError::at(
                    path,
                    format!("lists {} leaves, the tree has {}", rows.len(), topology.level_size(horizon)),
                ));
            }
            let mut field = Field::zeros(topology, horizon, dim);
            for (node, row) in rows.iter().enumerate() {
                field.set(node, &vector(row, dim, &format!("{path}[{node}]"))?);
            }
            Ok(field)
        }
    }
}

/// Affine forward coefficients `(matrix, offset)` per step.
pub fn affine_terms(entry: &PerStep<AffineTermConfig>, horizon: usize, dim: usize, path: &str) -> CliResult<Vec<(Matrix, Vector)>> {
    entry
        .expand(horizon, path)?
        .iter()
        .enumerate()
        .map(|(k, term)| {
            let at = format!("{path}[{k}]");
            Ok((
                square(&term.matrix, dim, &format!("{at}.matrix"))?,
                offset(&term.offset, dim, &format!("{at}.offset"))?,
            ))
        })
        .collect()
}

pub fn bsde_blocks(entry: &PerStep<BsdeStepConfig>, horizon: usize, dim: usize) -> CliResult<Vec<(Matrix, Matrix, Vector)>> {
    entry
        .expand(horizon, "bsde.steps")?
        .iter()
        .enumerate()
        .map(|(k, step)| {
            let at = format!("bsde.steps[{k}]");
            Ok((
                square(&step.mean, dim, &format!("{at}.mean"))?,
                square(&step.noise, dim, &format!("{at}.noise"))?,
                offset(&step.offset, dim, &format!("{at}.offset"))?,
            ))
        })
        .collect()
}

impl FamilyConfig {
    pub fn spec(&self, seed: u64) -> FamilySpec {
        let spec = FamilySpec::new(self.dim, self.rows, self.gain, seed, self.case);
        match self.coupling {
            Some(coupling) => spec.with_coupling(coupling),
            None => spec,
        }
    }
}

fn affine_map(config: &MapConfig, dim: usize, path: &str) -> CliResult<AffineMap> {
    let block = |rows: &Option<Rows>, name: &str| {
        rows.as_ref()
            .map_or_else(|| Ok(Matrix::zeros(dim, dim)), |r| square(r, dim, &format!("{path}.{name}")))
    };
    Ok(AffineMap {
        x: block(&config.x, "x")?,
        y: block(&config.y, "y")?,
        z: block(&config.z, "z")?,
        offset: offset(&config.offset, dim, &format!("{path}.offset"))?,
    })
}

fn affine_step(config: &StepConfig, dim: usize, path: &str) -> CliResult<AffineStep> {
    Ok(AffineStep {
        driver: affine_map(&config.driver, dim, &format!("{path}.driver"))?,
        drift: affine_map(&config.drift, dim, &format!("{path}.drift"))?,
        diffusion: affine_map(&config.diffusion, dim, &format!("{path}.diffusion"))?,
    })
}

impl AffineConfig {
    pub fn build(&self, topology: &TreeTopology) -> CliResult<AffineCoefficients> {
        let (n, horizon) = (self.dim, topology.horizon());
        let lambda = LinearMap {
            matrix: square(&self.lambda.matrix, n, "coefficients.affine.lambda.matrix")?,
            offset: offset(&self.lambda.offset, n, "coefficients.affine.lambda.offset")?,
        };
        let terminal = LinearMap {
            matrix: square(&self.terminal.matrix, n, "coefficients.affine.terminal.matrix")?,
            offset: offset(&self.terminal.offset, n, "coefficients.affine.terminal.offset")?,
        };
        let shared = self.steps.expand(horizon, "coefficients.affine.steps")?;
        let mut steps: Vec<Vec<AffineStep>> = Vec::with_capacity(horizon);
        for (k, config) in shared.iter().enumerate() {
            let step = affine_step(config, n, &format!("coefficients.affine.steps[{k}]"))?;
            steps.push(vec![step; topology.level_size(k)]);
        }
        for (i, entry) in self.overrides.iter().enumerate() {
            let path = format!("coefficients.affine.overrides[{i}]");
            if entry.step >= horizon || entry.node >= topology.level_size(entry.step) {
                return Err(CliError::at(
                    &path,
                    format!("no node {} at step {}", entry.node, entry.step),
                ));
            }
            let target = &mut steps[entry.step][entry.node];
            if let Some(map) = &entry.driver {
                target.driver = affine_map(map, n, &format!("{path}.driver"))?;
            }
            if let Some(map) = &entry.drift {
                target.drift = affine_map(map, n, &format!("{path}.drift"))?;
            }
            if let Some(map) = &entry.diffusion {
                target.diffusion = affine_map(map, n, &format!("{path}.diffusion"))?;
            }
        }
        let steps = steps.into_iter().map(NodeMap::PerNode).collect();
        Ok(AffineCoefficients::new(n, lambda, NodeMap::Uniform(terminal), steps)?)
    }
}

impl DominationConfig {
    pub fn build(&self, horizon: usize) -> CliResult<DominationData> {
        let path = "coefficients.domination";
        let shared = |entry: &PerStep<Rows>, name: &str| {
            steps_of(entry, horizon, &format!("{path}.{name}"), |rows, at| matrix(rows, at))
        };
        let data = DominationData::new(
            self.mu,
            self.nu,
            matrix(&self.m, &format!("{path}.m"))?,
            NodeMap::Uniform(matrix(&self.g, &format!("{path}.g"))?),
            shared(&self.a, "a")?,
            shared(&self.b, "b")?,
            shared(&self.c, "c")?,
        )
        .map_err(|e| CliError::at(path, e))?;
        match self.bound {
            Some(bound) => data.with_bound(bound).map_err(|e| CliError::at(&format!("{path}.bound"), e)),
            None => Ok(data),
        }
    }
}

impl FlqConfig {
    pub fn build(&self, config: &ExperimentConfig, topology: &TreeTopology) -> CliResult<(ForwardLqData, Option<u64>)> {
        if let Some(random) = &self.random {
            let seed = config.seed_for(random.seed, salt::LQ);
            let data = ForwardLqData::random(topology.clone(), random.state_dim, random.control_dim, seed)?;
            return Ok((data, Some(seed)));
        }
        let horizon = topology.horizon();
        let n = *required(&self.state_dim, "flq.state_dim")?;
        let m = *required(&self.control_dim, "flq.control_dim")?;
        let mats = |entry: &Option<PerStep<Rows>>, name: &str, rows: usize, cols: usize| {
            optional_steps(entry, horizon, &format!("flq.{name}"), || Matrix::zeros(rows, cols), |r, at| {
                sized(r, rows, cols, at)
            })
        };
        let vecs = |entry: &Option<PerStep<Vec<f64>>>, name: &str| {
            optional_steps(entry, horizon, &format!("flq.{name}"), || Vector::zeros(n), |v, at| vector(v, n, at))
        };
        required(&self.control_weight, "flq.control_weight")?;
        let parts = ForwardLqParts {
            state_dim: n,
            control_dim: m,
            state_matrix: mats(&self.state_matrix, "state_matrix", n, n)?,
            control_matrix: mats(&self.control_matrix, "control_matrix", n, m)?,
            noise_state_matrix: mats(&self.noise_state_matrix, "noise_state_matrix", n, n)?,
            noise_control_matrix: mats(&self.noise_control_matrix, "noise_control_matrix", n, m)?,
            drift_offset: vecs(&self.drift_offset, "drift_offset")?,
            noise_offset: vecs(&self.noise_offset, "noise_offset")?,
            initial_weight: square(required(&self.initial_weight, "flq.initial_weight")?, n, "flq.initial_weight")?,
            terminal_weight: NodeMap::Uniform(match &self.terminal_weight {
                Some(rows) => square(rows, n, "flq.terminal_weight")?,
                None => Matrix::zeros(n, n),
            }),
            state_weight: mats(&self.state_weight, "state_weight", n, n)?,
            control_weight: mats(&self.control_weight, "control_weight", m, m)?,
        };
        Ok((ForwardLqData::new(topology.clone(), parts).map_err(|e| CliError::at("flq", e))?, None))
    }
}

impl BlqConfig {
    pub fn build(&self, config: &ExperimentConfig, topology: &TreeTopology) -> CliResult<(BackwardLqData, Option<u64>)> {
        if let Some(random) = &self.random {
            let seed = config.seed_for(random.seed, salt::LQ);
            let data = BackwardLqData::random(topology.clone(), random.state_dim, random.control_dim, seed)?;
            return Ok((data, Some(seed)));
        }
        let horizon = topology.horizon();
        let n = *required(&self.state_dim, "blq.state_dim")?;
        let m = *required(&self.control_dim, "blq.control_dim")?;
        let mats = |entry: &Option<PerStep<Rows>>, name: &str, rows: usize, cols: usize| {
            optional_steps(entry, horizon, &format!("blq.{name}"), || Matrix::zeros(rows, cols), |r, at| {
                sized(r, rows, cols, at)
            })
        };
        required(&self.control_weight, "blq.control_weight")?;
        let terminal = match &self.terminal {
            Some(terminal) => terminal_field(terminal, topology, n, "blq.terminal")?,
            None => Field::zeros(topology, horizon, n),
        };
        let parts = BackwardLqParts {
            state_dim: n,
            control_dim: m,
            mean_matrix: mats(&self.mean_matrix, "mean_matrix", n, n)?,
            noise_matrix: mats(&self.noise_matrix, "noise_matrix", n, n)?,
            control_matrix: mats(&self.control_matrix, "control_matrix", n, m)?,
            offset: optional_steps(&self.offset, horizon, "blq.offset", || Vector::zeros(n), |v, at| vector(v, n, at))?,
            terminal,
            initial_weight: square(required(&self.initial_weight, "blq.initial_weight")?, n, "blq.initial_weight")?,
            mean_weight: mats(&self.mean_weight, "mean_weight", n, n)?,
            noise_weight: mats(&self.noise_weight, "noise_weight", n, n)?,
            control_weight: mats(&self.control_weight, "control_weight", m, m)?,
        };
        Ok((BackwardLqData::new(topology.clone(), parts).map_err(|e| CliError::at("blq", e))?, None))
    }
}

impl InsuranceConfig {
    pub fn parameters(&self, horizon: usize) -> CliResult<InsuranceParameters> {
        Ok(InsuranceParameters {
            rate: self.rate.expand(horizon, "insurance.rate")?,
            premium: self.premium.expand(horizon, "insurance.premium")?,
            volatility: self.volatility.expand(horizon, "insurance.volatility")?,
            growth: self.growth.expand(horizon, "insurance.growth")?,
            payout: self.payout.expand(horizon, "insurance.payout")?,
            initial_wealth: self.initial_wealth,
        })
    }

    pub fn investment(&self, config: &ExperimentConfig, topology: &TreeTopology) -> CliResult<(ControlProcess, Option<u64>)> {
        let block = &self.investment;
        match (block.constant, block.random_scale) {
            (Some(_), Some(_)) => Err(CliError::at(
                "insurance.investment",
                "give either constant or random_scale, not both",
            )),
            (None, Some(scale)) => {
                let seed = config.seed_for(block.seed, salt::CONTROL);
                Ok((ControlProcess::random(topology, 1, scale, seed)?, Some(seed)))
            }
            (constant, None) => {
                let zero = ControlProcess::zeros(topology, 1)?;
                let level = constant.unwrap_or(0.0);
                let mut process = zero.process().clone();
                for k in 0..topology.horizon() {
                    for node in 0..topology.level_size(k) {
                        process.set(k, node, &Vector::from_element(1, level));
                    }
                }
                Ok((ControlProcess::new(topology, process)?, None))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> ExperimentConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn shared_entries_expand_to_every_step() {
        let shared: PerStep<f64> = PerStep::Shared(0.5);
        assert_eq!(shared.expand(3, "x").unwrap(), vec![0.5; 3]);
        let listed: PerStep<f64> = PerStep::Each(vec![1.0, 2.0]);
        assert_eq!(listed.expand(2, "x").unwrap(), vec![1.0, 2.0]);
        let error = listed.expand(3, "insurance.rate").unwrap_err().to_string();
        assert!(error.contains("insurance.rate"), "{error}");
    }

    #[test]
    fn ragged_and_misshaped_matrices_name_their_path() {
        let ragged = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(matrix(&ragged, "flq.state_matrix").unwrap_err().to_string().contains("flq.state_matrix"));
        let wide = vec![vec![1.0, 2.0]];
        let error = square(&wide, 1, "flq.initial_weight").unwrap_err().to_string();
        assert!(error.contains("expected 1x1"), "{error}");
    }

    #[test]
    fn seed_override_clears_every_own_seed() {
        let mut config = parse(
            "mode = \"fbsde\"\nseed = 1\n[coefficients.family]\ndim = 1\nrows = 1\ncase = \"nu\"\nseed = 9\n\
             [perturbation]\nscale = 1.0\nseed = 8\n[check]\nseed = 7\n",
        );
        assert_eq!(config.seed_for(config.check.seed, salt::CHECK), 7);
        config.override_seed(40);
        assert_eq!(config.seed_for(config.check.seed, salt::CHECK), 40 + salt::CHECK);
        let family = config.coefficients.as_ref().unwrap().family.as_ref().unwrap();
        assert_eq!(config.seed_for(family.seed, salt::FAMILY), 40);
        let perturbation = config.perturbation.as_ref().unwrap();
        assert_eq!(config.seed_for(perturbation.seed, salt::PERTURBATION), 41);
    }

    #[test]
    fn solver_block_is_validated() {
        let config = parse("mode = \"fbsde\"\n[solver]\ndelta_init = 0.25\ndelta_min = 0.5\n");
        assert!(config.continuation_options().unwrap_err().to_string().starts_with("invalid config: solver"));
        let config = parse("mode = \"fbsde\"\n[solver]\nalpha = 1.5\n");
        assert!(config.alpha().is_err());
    }

    #[test]
    fn per_node_terminal_must_cover_every_leaf() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let short = TerminalConfig::PerNode(vec![vec![1.0]; 3]);
        assert!(terminal_field(&short, &topology, 1, "bsde.terminal").is_err());
        let full = TerminalConfig::PerNode((0..4).map(|i| vec![i as f64]).collect());
        let field = terminal_field(&full, &topology, 1, "bsde.terminal").unwrap();
        assert_eq!(field.at(3), &[3.0]);
    }
}
