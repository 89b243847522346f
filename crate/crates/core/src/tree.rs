//! Finite non-recombining scenario trees and processes adapted to them.
//!
//! A tree with horizon `N` and a noise law with `q` support points has
//! `q^k` nodes at level `k`. Node `i` at level `k` is identified with the
//! base-`q` digits of `i`, read from the most significant end, which list the
//! noise outcomes drawn at times `0, …, k-1`. Its children are
//! `i * q + j` for `j < q`. A value stored at level `k` is therefore a
//! function of the first `k` noise draws.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Tolerance on the total probability mass of the noise law.
pub const MASS_TOLERANCE: f64 = 1e-14;
/// Tolerance on the mean of the noise law.
pub const MEAN_TOLERANCE: f64 = 1e-14;
/// Tolerance on the second moment of the noise law.
pub const VARIANCE_TOLERANCE: f64 = 1e-12;
/// Upper bound on the number of leaves a tree may have.
pub const MAX_LEAVES: usize = 1 << 24;

/// Finite-support noise law with zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLaw {
    support: Vec<f64>,
    probabilities: Vec<f64>,
}

impl NoiseLaw {
    /// Validates a law given by its support points and probabilities.
    pub fn new(support: Vec<f64>, probabilities: Vec<f64>) -> Result<Self> {
        if support.len() != probabilities.len() {
            return Err(Error::Topology(format!(
                "{} support points but {} probabilities",
                support.len(),
                probabilities.len()
            )));
        }
        if support.len() < 2 {
            return Err(Error::Topology("the noise law needs at least two outcomes".into()));
        }
        if support.iter().chain(&probabilities).any(|v| !v.is_finite()) {
            return Err(Error::Topology("noise law entries must be finite".into()));
        }
        if probabilities.iter().any(|&p| p <= 0.0) {
            return Err(Error::Topology("every outcome needs positive probability".into()));
        }
        let mass: f64 = probabilities.iter().sum();
        let mean: f64 = support.iter().zip(&probabilities).map(|(w, p)| w * p).sum();
        let second: f64 = support.iter().zip(&probabilities).map(|(w, p)| w * w * p).sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Topology(format!("probabilities sum to {mass}, not 1")));
        }
        if mean.abs() > MEAN_TOLERANCE {
            return Err(Error::Topology(format!("noise mean is {mean}, not 0")));
        }
        if (second - 1.0).abs() > VARIANCE_TOLERANCE {
            return Err(Error::Topology(format!("noise second moment is {second}, not 1")));
        }
        Ok(Self { support, probabilities })
    }

    /// Symmetric two-point law on `{+1, -1}`.
    pub fn rademacher() -> Self {
        Self {
            support: vec![1.0, -1.0],
            probabilities: vec![0.5, 0.5],
        }
    }

    /// Support points `w(j)`.
    pub fn support(&self) -> &[f64] {
        &self.support
    }

    /// Probabilities `p(j)`.
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Number of outcomes.
    pub fn branching(&self) -> usize {
        self.support.len()
    }
}

/// Shape and probabilities of a scenario tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeTopology {
    horizon: usize,
    law: NoiseLaw,
    level_probabilities: Vec<Vec<f64>>,
}

impl TreeTopology {
    /// Builds the tree with `horizon` steps driven by `law`.
    pub fn new(horizon: usize, law: NoiseLaw) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Topology("the horizon must be at least 1".into()));
        }
        let q = law.branching();
        let leaves = (0..horizon).try_fold(1usize, |acc, _| acc.checked_mul(q));
        match leaves {
            Some(count) if count <= MAX_LEAVES => {}
            _ => {
                return Err(Error::Topology(format!(
                    "{q}^{horizon} leaves exceed the limit of {MAX_LEAVES}"
                )))
            }
        }
        let mut level_probabilities = vec![vec![1.0]];
        for k in 0..horizon {
            let parent = &level_probabilities[k];
            let child: Vec<f64> = parent
                .iter()
                .flat_map(|&p| law.probabilities().iter().map(move |&pj| p * pj))
                .collect();
            level_probabilities.push(child);
        }
        Ok(Self {
            horizon,
            law,
            level_probabilities,
        })
    }

    /// Tree driven by the symmetric `±1` coin.
    pub fn rademacher(horizon: usize) -> Result<Self> {
        Self::new(horizon, NoiseLaw::rademacher())
    }

    /// Number of time steps `N`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// The one-step noise law.
    pub fn law(&self) -> &NoiseLaw {
        &self.law
    }

    /// Number of outcomes per step.
    pub fn branching(&self) -> usize {
        self.law.branching()
    }

    /// Number of nodes at `level`.
    pub fn level_size(&self, level: usize) -> usize {
        self.level_probabilities[level].len()
    }

    /// Total number of nodes on levels `0..=N`.
    pub fn total_nodes(&self) -> usize {
        self.level_probabilities.iter().map(Vec::len).sum()
    }

    /// Index of child `j` of `node`.
    pub fn child(&self, node: usize, branch: usize) -> usize {
        node * self.branching() + branch
    }

    /// Parent index and branch digit of a node at level `>= 1`.
    pub fn parent(&self, node: usize) -> (usize, usize) {
        (node / self.branching(), node % self.branching())
    }

    /// Unconditional probability of every node at `level`.
    pub fn level_probabilities(&self, level: usize) -> &[f64] {
        &self.level_probabilities[level]
    }

    /// Noise value `w(j)`.
    pub fn noise(&self, branch: usize) -> f64 {
        self.law.support[branch]
    }

    /// Probability `p(j)`.
    pub fn branch_probability(&self, branch: usize) -> f64 {
        self.law.probabilities[branch]
    }

    /// Digits of `node` at `level`, most significant first.
    pub fn path(&self, level: usize, node: usize) -> Vec<usize> {
        let q = self.branching();
        let mut digits = vec![0; level];
        let mut rest = node;
        for slot in digits.iter_mut().rev() {
            *slot = rest % q;
            rest /= q;
        }
        digits
    }

    /// Checks `level <= N`.
    pub fn check_level(&self, level: usize) -> Result<()> {
        if level > self.horizon {
            return Err(Error::Shape(format!(
                "level {level} exceeds the horizon {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Validated node coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId {
    pub level: usize,
    pub index: usize,
}

impl NodeId {
    /// Validates the coordinate against `topology`.
    pub fn new(topology: &TreeTopology, level: usize, index: usize) -> Result<Self> {
        topology.check_level(level)?;
        if index >= topology.level_size(level) {
            return Err(Error::Shape(format!(
                "node {index} does not exist at level {level}"
            )));
        }
        Ok(Self { level, index })
    }

    /// Child along `branch`.
    pub fn child(self, topology: &TreeTopology, branch: usize) -> Result<Self> {
        Self::new(topology, self.level + 1, topology.child(self.index, branch))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.level, self.index)
    }
}

/// One vector per node on a single level, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    level: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Field {
    /// Zero field.
    pub fn zeros(topology: &TreeTopology, level: usize, dim: usize) -> Self {
        Self {
            level,
            dim,
            data: vec![0.0; topology.level_size(level) * dim],
        }
    }

    /// Wraps raw node-major data, checking its length.
    pub fn from_data(topology: &TreeTopology, level: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        topology.check_level(level)?;
        let expected = topology.level_size(level) * dim;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "level {level} field of dimension {dim} needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { level, dim, data })
    }

    /// Same vector at every node.
    pub fn constant(topology: &TreeTopology, level: usize, value: &Vector) -> Self {
        let nodes = topology.level_size(level);
        let mut data = Vec::with_capacity(nodes * value.len());
        for _ in 0..nodes {
            data.extend(value.iter());
        }
        Self {
            level,
            dim: value.len(),
            data,
        }
    }

    /// Builds a field from a per-node closure.
    pub fn from_fn(
        topology: &TreeTopology,
        level: usize,
        dim: usize,
        mut value: impl FnMut(usize) -> Vector,
    ) -> Result<Self> {
        let nodes = topology.level_size(level);
        let mut data = Vec::with_capacity(nodes * dim);
        for node in 0..nodes {
            let entry = value(node);
            if entry.len() != dim {
                return Err(Error::Shape(format!(
                    "node {node} at level {level} produced length {} instead of {dim}",
                    entry.len()
                )));
            }
            data.extend(entry.iter());
        }
        Ok(Self { level, dim, data })
    }

    /// Level the field lives on.
    pub fn level(&self) -> usize {
        self.level
    }

    /// Vector length at each node.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of nodes.
    pub fn nodes(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    /// Entry at `node` as a slice.
    pub fn at(&self, node: usize) -> &[f64] {
        &self.data[node * self.dim..(node + 1) * self.dim]
    }

    /// Entry at `node` as an owned vector.
    pub fn vector(&self, node: usize) -> Vector {
        Vector::from_column_slice(self.at(node))
    }

    /// Overwrites the entry at `node`.
    pub fn set(&mut self, node: usize, value: &Vector) {
        self.data[node * self.dim..(node + 1) * self.dim].copy_from_slice(value.as_slice());
    }

    /// Raw node-major data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `E|F|²` under the tree's probabilities.
    pub fn mean_square(&self, topology: &TreeTopology) -> f64 {
        self.inner_expectation(topology, self)
    }

    /// `E⟨F, G⟩` for two fields on the same level.
    pub fn inner_expectation(&self, topology: &TreeTopology, other: &Field) -> f64 {
        let probabilities = topology.level_probabilities(self.level);
        probabilities
            .iter()
            .enumerate()
            .map(|(node, p)| {
                let dot: f64 = self.at(node).iter().zip(other.at(node)).map(|(a, b)| a * b).sum();
                p * dot
            })
            .sum()
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &Field) -> Field {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + scale * b).collect();
        Field {
            level: self.level,
            dim: self.dim,
            data,
        }
    }

    /// Multiplies every entry by `scale`.
    pub fn scaled(&self, scale: f64) -> Field {
        Field {
            level: self.level,
            dim: self.dim,
            data: self.data.iter().map(|a| a * scale).collect(),
        }
    }

    fn same_shape(&self, other: &Field) -> bool {
        self.level == other.level && self.dim == other.dim && self.data.len() == other.data.len()
    }
}

/// Vector-valued process given by one field per time in a contiguous range.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    dim: usize,
    start: usize,
    fields: Vec<Field>,
}

impl AdaptedProcess {
    /// Zero process over `times`.
    pub fn zeros(topology: &TreeTopology, dim: usize, times: RangeInclusive<usize>) -> Result<Self> {
        topology.check_level(*times.end())?;
        let start = *times.start();
        let fields = times.map(|k| Field::zeros(topology, k, dim)).collect();
        Ok(Self { dim, start, fields })
    }

    /// Assembles a process from per-time fields that must be consecutive.
    pub fn from_fields(fields: Vec<Field>) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::Shape("a process needs at least one time".into()))?;
        let (start, dim) = (first.level, first.dim);
        for (offset, field) in fields.iter().enumerate() {
            if field.level != start + offset || field.dim != dim {
                return Err(Error::Shape(format!(
                    "field {offset} has level {} and dimension {}, expected {} and {dim}",
                    field.level,
                    field.dim,
                    start + offset
                )));
            }
        }
        Ok(Self { dim, start, fields })
    }

    /// Vector length.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// First time of the range.
    pub fn start(&self) -> usize {
        self.start
    }

    /// Last time of the range.
    pub fn end(&self) -> usize {
        self.start + self.fields.len() - 1
    }

    /// Time range covered.
    pub fn times(&self) -> RangeInclusive<usize> {
        self.start..=self.end()
    }

    /// Field at time `k`.
    pub fn field(&self, k: usize) -> &Field {
        &self.fields[k - self.start]
    }

    /// Mutable field at time `k`.
    pub fn field_mut(&mut self, k: usize) -> &mut Field {
        &mut self.fields[k - self.start]
    }

    /// All fields in time order.
    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    /// Value at `(k, node)` as a slice.
    pub fn at(&self, k: usize, node: usize) -> &[f64] {
        self.field(k).at(node)
    }

    /// Value at `(k, node)` as an owned vector.
    pub fn vector(&self, k: usize, node: usize) -> Vector {
        self.field(k).vector(node)
    }

    /// Overwrites the value at `(k, node)`.
    pub fn set(&mut self, k: usize, node: usize, value: &Vector) {
        self.field_mut(k).set(node, value);
    }

    /// `Σ_k E|X_k|²` over the whole range.
    pub fn sum_mean_square(&self, topology: &TreeTopology) -> f64 {
        self.fields.iter().map(|f| f.mean_square(topology)).sum()
    }

    /// `self + scale * other`; shapes must agree.
    pub fn add_scaled(&self, scale: f64, other: &AdaptedProcess) -> Result<AdaptedProcess> {
        self.check_same_shape(other)?;
        let fields = self
            .fields
            .iter()
            .zip(&other.fields)
            .map(|(a, b)| a.add_scaled(scale, b))
            .collect();
        Ok(AdaptedProcess {
            dim: self.dim,
            start: self.start,
            fields,
        })
    }

    /// Multiplies every value by `scale`.
    pub fn scaled(&self, scale: f64) -> AdaptedProcess {
        AdaptedProcess {
            dim: self.dim,
            start: self.start,
            fields: self.fields.iter().map(|f| f.scaled(scale)).collect(),
        }
    }

    /// Errors unless both processes have identical shape.
    pub fn check_same_shape(&self, other: &AdaptedProcess) -> Result<()> {
        let same = self.start == other.start
            && self.dim == other.dim
            && self.fields.len() == other.fields.len()
            && self.fields.iter().zip(&other.fields).all(|(a, b)| a.same_shape(b));
        if same {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "processes over {:?} (dim {}) and {:?} (dim {}) are not comparable",
                self.times(),
                self.dim,
                other.times(),
                other.dim
            )))
        }
    }

    /// Checks that the process covers `times` with dimension `dim`.
    pub fn check_shape(&self, dim: usize, times: RangeInclusive<usize>, what: &str) -> Result<()> {
        if self.dim != dim || self.times() != times {
            return Err(Error::Shape(format!(
                "{what} must have dimension {dim} over {times:?}, got dimension {} over {:?}",
                self.dim,
                self.times()
            )));
        }
        Ok(())
    }
}

/// Conditional mean and noise-weighted conditional mean of a level `k+1` field.
///
/// For every node `v` at level `k` this returns
/// `Σ_j p(j) Y(child j)` and `Σ_j p(j) w(j) Y(child j)`.
pub fn cond_prev(topology: &TreeTopology, field: &Field) -> Result<(Field, Field)> {
    if field.level == 0 {
        return Err(Error::Shape("a level-0 field has no parent level".into()));
    }
    topology.check_level(field.level)?;
    let expected = topology.level_size(field.level) * field.dim;
    if field.data.len() != expected {
        return Err(Error::Shape(format!(
            "level {} field has {} entries, expected {expected}",
            field.level,
            field.data.len()
        )));
    }
    let level = field.level - 1;
    let dim = field.dim;
    let q = topology.branching();
    let nodes = topology.level_size(level);
    let mut mean = vec![0.0; nodes * dim];
    let mut weighted = vec![0.0; nodes * dim];
    for node in 0..nodes {
        for branch in 0..q {
            let p = topology.branch_probability(branch);
            let pw = p * topology.noise(branch);
            let child = field.at(topology.child(node, branch));
            for (i, value) in child.iter().enumerate() {
                mean[node * dim + i] += p * value;
                weighted[node * dim + i] += pw * value;
            }
        }
    }
    Ok((
        Field { level, dim, data: mean },
        Field { level, dim, data: weighted },
    ))
}

/// Which squared norm to aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// `Σ_k E|X_k|²` of a single process.
    Process,
    /// `E Σ_{k=0}^{N} (|x_k|² + |y_k|²)` of a solution pair.
    Pair,
    /// `|ξ|² + E|η|² + E Σ_{k<N} (|φ_k|² + |ψ_k|² + |γ_k|²)` of perturbation data.
    Perturbation,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(tag: &str) -> Result<Self> {
        match tag {
            "process" => Ok(Self::Process),
            "pair" => Ok(Self::Pair),
            "perturbation" => Ok(Self::Perturbation),
            other => Err(Error::Usage(format!("unknown norm tag `{other}`"))),
        }
    }
}

/// Objects whose squared norm can be aggregated over a tree.
pub trait Aggregate {
    /// Squared norm of the requested kind; errors if the kind does not apply.
    fn squared_norm(&self, topology: &TreeTopology, kind: NormKind) -> Result<f64>;
}

impl Aggregate for AdaptedProcess {
    fn squared_norm(&self, topology: &TreeTopology, kind: NormKind) -> Result<f64> {
        match kind {
            NormKind::Process => Ok(self.sum_mean_square(topology)),
            other => Err(Error::Usage(format!("{other:?} norm does not apply to a single process"))),
        }
    }
}

/// Squared norm of `value` by kind.
pub fn aggregate(value: &dyn Aggregate, topology: &TreeTopology, kind: NormKind) -> Result<f64> {
    value.squared_norm(topology, kind)
}

/// Process with i.i.d. standard normal entries, reproducible from `seed`.
pub fn random_adapted(
    topology: &TreeTopology,
    dim: usize,
    times: RangeInclusive<usize>,
    seed: u64,
) -> Result<AdaptedProcess> {
    if dim == 0 {
        return Err(Error::Usage("random processes need a positive dimension".into()));
    }
    topology.check_level(*times.end())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = *times.start();
    let fields = times
        .map(|k| {
            let len = topology.level_size(k) * dim;
            let data = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
            Field { level: k, dim, data }
        })
        .collect();
    Ok(AdaptedProcess { dim, start, fields })
}

/// Random field on one level, reproducible from `seed`.
pub fn random_field(topology: &TreeTopology, level: usize, dim: usize, seed: u64) -> Result<Field> {
    let process = random_adapted(topology, dim, level..=level, seed)?;
    Ok(process.fields.into_iter().next().expect("one field"))
}

/// Per-node values on one level, either shared or listed node by node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeMap<T> {
    /// Same value at every node.
    Uniform(T),
    /// One value per node in index order.
    PerNode(Vec<T>),
}

impl<T> NodeMap<T> {
    /// Value at `node`.
    pub fn get(&self, node: usize) -> &T {
        match self {
            NodeMap::Uniform(value) => value,
            NodeMap::PerNode(values) => &values[node],
        }
    }

    /// Checks that a per-node list matches the level size.
    pub fn check(&self, topology: &TreeTopology, level: usize, what: &str) -> Result<()> {
        if let NodeMap::PerNode(values) = self {
            let nodes = topology.level_size(level);
            if values.len() != nodes {
                return Err(Error::Shape(format!(
                    "{what} at level {level} lists {} nodes, expected {nodes}",
                    values.len()
                )));
            }
        }
        Ok(())
    }

    /// Applies `func` to every stored value.
    pub fn map<U>(&self, mut func: impl FnMut(&T) -> U) -> NodeMap<U> {
        match self {
            NodeMap::Uniform(value) => NodeMap::Uniform(func(value)),
            NodeMap::PerNode(values) => NodeMap::PerNode(values.iter().map(func).collect()),
        }
    }

    /// Every stored value (one for a uniform map).
    pub fn values(&self) -> Vec<&T> {
        match self {
            NodeMap::Uniform(value) => vec![value],
            NodeMap::PerNode(values) => values.iter().collect(),
        }
    }

    /// Tries `func` on every stored value.
    pub fn try_map<U>(&self, mut func: impl FnMut(&T) -> Result<U>) -> Result<NodeMap<U>> {
        Ok(match self {
            NodeMap::Uniform(value) => NodeMap::Uniform(func(value)?),
            NodeMap::PerNode(values) => {
                NodeMap::PerNode(values.iter().map(func).collect::<Result<Vec<_>>>()?)
            }
        })
    }
}

/// For every `k ≥ 1`, returns `(E|Y_k|² - E|Y'_k|², E|Y_k|² - E|Z'_k|²)`.
///
/// Both entries are nonnegative for any process, which makes them a cheap
/// sanity check on conditional averaging.
pub fn conditional_moment_slacks(topology: &TreeTopology, process: &AdaptedProcess) -> Result<Vec<(f64, f64)>> {
    process
        .fields()
        .iter()
        .filter(|f| f.level() >= 1)
        .map(|field| {
            let (mean, weighted) = cond_prev(topology, field)?;
            let total = field.mean_square(topology);
            Ok((total - mean.mean_square(topology), total - weighted.mean_square(topology)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rademacher_law_passes_validation() {
        let law = NoiseLaw::new(vec![1.0, -1.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(law, NoiseLaw::rademacher());
    }

    #[test]
    fn skewed_three_point_law_is_accepted() {
        let p = [0.25, 0.5, 0.25];
        let w = [2f64.sqrt(), 0.0, -(2f64.sqrt())];
        assert!(NoiseLaw::new(w.to_vec(), p.to_vec()).is_ok());
    }

    #[test]
    fn bad_laws_are_rejected() {
        assert!(NoiseLaw::new(vec![1.0], vec![1.0]).is_err());
        assert!(NoiseLaw::new(vec![1.0, -1.0], vec![0.6, 0.4]).is_err());
        assert!(NoiseLaw::new(vec![2.0, -2.0], vec![0.5, 0.5]).is_err());
        assert!(NoiseLaw::new(vec![1.0, -1.0], vec![0.5, 0.5 + 1e-10]).is_err());
        assert!(TreeTopology::rademacher(0).is_err());
        assert!(TreeTopology::rademacher(40).is_err());
    }

    #[test]
    fn level_probabilities_sum_to_one() {
        let topology = TreeTopology::rademacher(4).unwrap();
        for k in 0..=4 {
            assert_eq!(topology.level_size(k), 1 << k);
            let total: f64 = topology.level_probabilities(k).iter().sum();
            assert!((total - 1.0).abs() < 1e-15);
        }
        assert_eq!(topology.total_nodes(), 31);
    }

    #[test]
    fn path_digits_round_trip() {
        let topology = TreeTopology::new(3, NoiseLaw::new(vec![2f64.sqrt(), 0.0, -(2f64.sqrt())], vec![0.25, 0.5, 0.25]).unwrap()).unwrap();
        assert_eq!(topology.path(3, 11), vec![1, 0, 2]);
        assert_eq!(topology.parent(11), (3, 2));
        assert_eq!(topology.child(3, 2), 11);
    }

    #[test]
    fn cond_prev_on_two_nodes() {
        let topology = TreeTopology::rademacher(1).unwrap();
        let field = Field::from_data(&topology, 1, 1, vec![3.0, 1.0]).unwrap();
        let (mean, weighted) = cond_prev(&topology, &field).unwrap();
        assert_eq!(mean.at(0), &[2.0]);
        assert_eq!(weighted.at(0), &[1.0]);
    }

    #[test]
    fn cond_prev_rejects_level_zero() {
        let topology = TreeTopology::rademacher(2).unwrap();
        let field = Field::zeros(&topology, 0, 2);
        assert!(matches!(cond_prev(&topology, &field), Err(Error::Shape(_))));
    }

    #[test]
    fn random_processes_are_reproducible() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let a = random_adapted(&topology, 2, 0..=3, 11).unwrap();
        let b = random_adapted(&topology, 2, 0..=3, 11).unwrap();
        let c = random_adapted(&topology, 2, 0..=3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(random_adapted(&topology, 0, 0..=3, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn unknown_norm_tag_is_a_usage_error() {
        assert!(matches!("sup".parse::<NormKind>(), Err(Error::Usage(_))));
        assert_eq!("pair".parse::<NormKind>().unwrap(), NormKind::Pair);
    }

    #[test]
    fn node_ids_are_validated() {
        let topology = TreeTopology::rademacher(2).unwrap();
        assert!(NodeId::new(&topology, 2, 3).is_ok());
        assert!(NodeId::new(&topology, 2, 4).is_err());
        assert!(NodeId::new(&topology, 3, 0).is_err());
        let root = NodeId::new(&topology, 0, 0).unwrap();
        assert_eq!(root.child(&topology, 1).unwrap(), NodeId { level: 1, index: 1 });
    }
}
