//! Stacked linear solve for affine systems, used as an independent oracle.
//!
//! Unknowns are ordered as every `x_k(v)` level by level, then every
//! `y_k(v)` in the same order. Rows are the initial condition, one forward
//! equation per child, one backward equation per non-terminal node, and one
//! terminal condition per leaf.

use super::{PerturbationData, SolutionPair};
use crate::coefficients::{AffineCoefficients, CoefficientSet};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::tree::{AdaptedProcess, Field, TreeTopology};

/// Largest number of unknowns the dense solve accepts.
pub const MAX_DIRECT_UNKNOWNS: usize = 8_000;

/// Pivot ratio below which the system counts as singular.
const PIVOT_RATIO_FLOOR: f64 = 1e-14;

struct Layout {
    dim: usize,
    level_offsets: Vec<usize>,
    nodes: usize,
}

impl Layout {
    fn new(topology: &TreeTopology, dim: usize) -> Self {
        let mut level_offsets = Vec::with_capacity(topology.horizon() + 1);
        let mut total = 0;
        for k in 0..=topology.horizon() {
            level_offsets.push(total);
            total += topology.level_size(k);
        }
        Self {
            dim,
            level_offsets,
            nodes: total,
        }
    }

    fn x(&self, k: usize, node: usize) -> usize {
        (self.level_offsets[k] + node) * self.dim
    }

    fn y(&self, k: usize, node: usize) -> usize {
        (self.nodes + self.level_offsets[k] + node) * self.dim
    }

    fn unknowns(&self) -> usize {
        2 * self.nodes * self.dim
    }
}

fn add_block(matrix: &mut Matrix, row: usize, col: usize, block: &Matrix, scale: f64) {
    if scale == 0.0 {
        return;
    }
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            matrix[(row + i, col + j)] += scale * block[(i, j)];
        }
    }
}

fn add_identity(matrix: &mut Matrix, row: usize, col: usize, dim: usize) {
    for i in 0..dim {
        matrix[(row + i, col + i)] += 1.0;
    }
}

fn set_rhs(rhs: &mut Vector, row: usize, value: &Vector) {
    rhs.rows_mut(row, value.len()).copy_from(value);
}

/// Solves the affine system with perturbation by one dense LU factorization
/// plus a step of iterative refinement.
pub fn solve_linear_direct(
    topology: &TreeTopology,
    coefficients: &AffineCoefficients,
    perturbation: &PerturbationData,
) -> Result<SolutionPair> {
    let n = coefficients.dim();
    coefficients.check_topology(topology)?;
    perturbation.check(topology, n)?;
    let layout = Layout::new(topology, n);
    let size = layout.unknowns();
    if size > MAX_DIRECT_UNKNOWNS {
        return Err(Error::Resource(format!(
            "direct solve needs {size} unknowns, limit is {MAX_DIRECT_UNKNOWNS}"
        )));
    }
    let horizon = topology.horizon();
    let q = topology.branching();
    let mut matrix = Matrix::zeros(size, size);
    let mut rhs = Vector::zeros(size);
    let mut row = 0;

    let lambda = coefficients.lambda_map();
    add_identity(&mut matrix, row, layout.x(0, 0), n);
    add_block(&mut matrix, row, layout.y(0, 0), &lambda.matrix, -1.0);
    set_rhs(&mut rhs, row, &(&lambda.offset + &perturbation.xi));
    row += n;

    for k in 0..horizon {
        for node in 0..topology.level_size(k) {
            let step = coefficients.step(k, node);
            for j in 0..q {
                let wj = topology.noise(j);
                let child = topology.child(node, j);
                add_identity(&mut matrix, row, layout.x(k + 1, child), n);
                add_block(&mut matrix, row, layout.x(k, node), &step.drift.x, -1.0);
                add_block(&mut matrix, row, layout.x(k, node), &step.diffusion.x, -wj);
                for i in 0..q {
                    let (pi, wi) = (topology.branch_probability(i), topology.noise(i));
                    let col = layout.y(k + 1, topology.child(node, i));
                    add_block(&mut matrix, row, col, &step.drift.y, -pi);
                    add_block(&mut matrix, row, col, &step.drift.z, -pi * wi);
                    add_block(&mut matrix, row, col, &step.diffusion.y, -wj * pi);
                    add_block(&mut matrix, row, col, &step.diffusion.z, -wj * pi * wi);
                }
                let value = &step.drift.offset
                    + perturbation.psi.vector(k, node)
                    + (&step.diffusion.offset + perturbation.gamma.vector(k, node)) * wj;
                set_rhs(&mut rhs, row, &value);
                row += n;
            }
        }
    }

    for k in 0..horizon {
        for node in 0..topology.level_size(k) {
            let driver = &coefficients.step(k, node).driver;
            add_identity(&mut matrix, row, layout.y(k, node), n);
            add_block(&mut matrix, row, layout.x(k, node), &driver.x, 1.0);
            for i in 0..q {
                let (pi, wi) = (topology.branch_probability(i), topology.noise(i));
                let col = layout.y(k + 1, topology.child(node, i));
                add_block(&mut matrix, row, col, &driver.y, pi);
                add_block(&mut matrix, row, col, &driver.z, pi * wi);
            }
            let value = -(&driver.offset + perturbation.phi.vector(k, node));
            set_rhs(&mut rhs, row, &value);
            row += n;
        }
    }

    for node in 0..topology.level_size(horizon) {
        let terminal = coefficients.terminal_map(node);
        add_identity(&mut matrix, row, layout.y(horizon, node), n);
        add_block(&mut matrix, row, layout.x(horizon, node), &terminal.matrix, -1.0);
        set_rhs(&mut rhs, row, &(&terminal.offset + perturbation.eta.vector(node)));
        row += n;
    }
    debug_assert_eq!(row, size);

    let lu = matrix.clone().lu();
    let pivots = lu.u().diagonal().map(f64::abs);
    let (largest, smallest) = (pivots.max(), pivots.min());
    let ratio = if largest > 0.0 { smallest / largest } else { 0.0 };
    if !(ratio.is_finite() && ratio > PIVOT_RATIO_FLOOR) {
        return Err(Error::Singular {
            condition: if ratio > 0.0 { 1.0 / ratio } else { f64::INFINITY },
        });
    }
    let singular = || Error::Singular {
        condition: 1.0 / ratio,
    };
    let mut solution = lu.solve(&rhs).ok_or_else(singular)?;
    let correction = lu.solve(&(&rhs - &matrix * &solution)).ok_or_else(singular)?;
    solution += correction;

    let unpack = |offset: fn(&Layout, usize, usize) -> usize| {
        let fields = (0..=horizon)
            .map(|k| {
                Field::from_fn(topology, k, n, |node| {
                    solution.rows(offset(&layout, k, node), n).into_owned()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        AdaptedProcess::from_fields(fields)
    };
    SolutionPair::new(unpack(Layout::x)?, unpack(Layout::y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{AffineMap, AffineStep, LinearMap};
    use crate::tree::NodeMap;

    #[test]
    fn zero_data_gives_zero_solution() {
        let topology = TreeTopology::rademacher(3).unwrap();
        let coefficients = AffineCoefficients::new(
            2,
            LinearMap {
                matrix: -Matrix::identity(2, 2),
                offset: Vector::zeros(2),
            },
            NodeMap::Uniform(LinearMap {
                matrix: Matrix::identity(2, 2),
                offset: Vector::zeros(2),
            }),
            vec![
                NodeMap::Uniform(AffineStep {
                    driver: AffineMap {
                        x: -Matrix::identity(2, 2),
                        ..AffineMap::zeros(2)
                    },
                    ..AffineStep::zeros(2)
                });
                3
            ],
        )
        .unwrap();
        let solution =
            solve_linear_direct(&topology, &coefficients, &PerturbationData::zeros(&topology, 2).unwrap()).unwrap();
        assert_eq!(solution, SolutionPair::zeros(&topology, 2).unwrap());
    }

    #[test]
    fn singular_system_reports_a_condition_estimate() {
        // x_0 = y_0 and y_0 = x_0 with nothing else pinning them down
        let topology = TreeTopology::rademacher(1).unwrap();
        let one = Matrix::identity(1, 1);
        let coefficients = AffineCoefficients::new(
            1,
            LinearMap {
                matrix: one.clone(),
                offset: Vector::zeros(1),
            },
            NodeMap::Uniform(LinearMap {
                matrix: Matrix::zeros(1, 1),
                offset: Vector::zeros(1),
            }),
            vec![NodeMap::Uniform(AffineStep {
                driver: AffineMap {
                    x: -one,
                    ..AffineMap::zeros(1)
                },
                ..AffineStep::zeros(1)
            })],
        )
        .unwrap();
        let result = solve_linear_direct(&topology, &coefficients, &PerturbationData::zeros(&topology, 1).unwrap());
        assert!(matches!(result, Err(Error::Singular { condition }) if condition > 1e12));
    }
}
