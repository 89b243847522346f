//! Max-norm defects of a candidate solution.

use serde::Serialize;

use super::{PerturbationData, SolutionPair};
use crate::coefficients::CoefficientSet;
use crate::error::Result;
use crate::tree::TreeTopology;

/// Which equation a defect belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Forward,
    Backward,
    Initial,
    Terminal,
}

/// Largest defect of each equation and where the overall worst one sits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRecord {
    pub forward: f64,
    pub backward: f64,
    pub initial: f64,
    pub terminal: f64,
    pub overall: f64,
    pub worst_kind: DefectKind,
    /// Time of the worst defect.
    pub worst_time: usize,
    /// Node of the worst defect on that time's level.
    pub worst_node: usize,
}

impl ResidualRecord {
    fn record(&mut self, kind: DefectKind, time: usize, node: usize, value: f64) {
        let slot = match kind {
            DefectKind::Forward => &mut self.forward,
            DefectKind::Backward => &mut self.backward,
            DefectKind::Initial => &mut self.initial,
            DefectKind::Terminal => &mut self.terminal,
        };
        // NaN defects must win every comparison
        if value > *slot || value.is_nan() {
            *slot = value;
        }
        if value > self.overall || value.is_nan() {
            self.overall = value;
            self.worst_kind = kind;
            self.worst_time = time;
            self.worst_node = node;
        }
    }
}

/// Evaluates every equation of the system defined by `coefficients` and
/// `perturbation` at `candidate`; defects are Euclidean norms per node.
pub fn residual(
    topology: &TreeTopology,
    coefficients: &dyn CoefficientSet,
    perturbation: &PerturbationData,
    candidate: &SolutionPair,
) -> Result<ResidualRecord> {
    let n = coefficients.dim();
    coefficients.check_topology(topology)?;
    perturbation.check(topology, n)?;
    candidate.check(topology, n)?;
    let horizon = topology.horizon();
    let mut record = ResidualRecord {
        forward: 0.0,
        backward: 0.0,
        initial: 0.0,
        terminal: 0.0,
        overall: 0.0,
        worst_kind: DefectKind::Initial,
        worst_time: 0,
        worst_node: 0,
    };

    let initial = candidate.x.vector(0, 0) - coefficients.lambda(&candidate.y.vector(0, 0)) - &perturbation.xi;
    record.record(DefectKind::Initial, 0, 0, initial.norm());

    for node in 0..topology.level_size(horizon) {
        let defect = candidate.y.vector(horizon, node)
            - coefficients.phi(node, &candidate.x.vector(horizon, node))
            - perturbation.eta.vector(node);
        record.record(DefectKind::Terminal, horizon, node, defect.norm());
    }

    for (k, thetas) in candidate.thetas(topology)?.iter().enumerate() {
        for (node, theta) in thetas.iter().enumerate() {
            let gamma = coefficients.gamma(k, node, theta);
            let backward = candidate.y.vector(k, node) + &gamma.driver + perturbation.phi.vector(k, node);
            record.record(DefectKind::Backward, k, node, backward.norm());
            let drift = gamma.drift + perturbation.psi.vector(k, node);
            let diffusion = gamma.diffusion + perturbation.gamma.vector(k, node);
            for branch in 0..topology.branching() {
                let child = topology.child(node, branch);
                let forward = candidate.x.vector(k + 1, child) - &drift - &diffusion * topology.noise(branch);
                record.record(DefectKind::Forward, k + 1, child, forward.norm());
            }
        }
    }
    Ok(record)
}
