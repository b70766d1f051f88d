//! Triangle-inequality repair for learned distance matrices.
//!
//! [`triangle_fixing`] projects `D̂` onto the set of matrices satisfying every
//! triangle inequality in the Frobenius norm by cyclic projections with one
//! dual variable per constraint. [`apsp_metric_repair`] is an independent,
//! cheaper feasibility oracle used to bound how far the projection may move.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::head::DistanceMatrix;

/// `D(i, j) - D(i, k) - D(j, k) = magnitude > tolerance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TriangleViolation {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub magnitude: f64,
}

fn check_square_symmetric(d: &Matrix) -> Result<()> {
    if d.rows() != d.cols() {
        return Err(Error::InvalidData(format!("{}x{} matrix is not square", d.rows(), d.cols())));
    }
    for i in 0..d.rows() {
        if d[(i, i)] != 0.0 {
            return Err(Error::InvalidData(format!("nonzero diagonal entry at {i}")));
        }
        for j in i + 1..d.rows() {
            if !d[(i, j)].is_finite() {
                return Err(Error::InvalidData(format!("entry ({i}, {j}) is not finite")));
            }
            if d[(i, j)] != d[(j, i)] {
                return Err(Error::InvalidData(format!("asymmetric entry ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Every violated side of every triangle, triangles in lexicographic order.
pub fn triangle_violations(d: &Matrix, tol: f64) -> Result<Vec<TriangleViolation>> {
    check_square_symmetric(d)?;
    let m = d.rows();
    let mut out = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            for k in j + 1..m {
                let (ij, jk, ik) = (d[(i, j)], d[(j, k)], d[(i, k)]);
                for (a, b, c, magnitude) in [
                    (i, j, k, ij - ik - jk),
                    (j, k, i, jk - ij - ik),
                    (i, k, j, ik - ij - jk),
                ] {
                    if magnitude > tol {
                        out.push(TriangleViolation { i: a, j: b, k: c, magnitude });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// How each triangle's correction is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixingRule {
    /// Dykstra projection: `θ = max(μ, -z)`, the long side shrinks by `θ`,
    /// the short sides grow by `θ`, `z += θ`. Converges to the L2 projection.
    #[default]
    Projection,
    /// The published update, `θ = min(μ, z)` with `z` starting at 0 and the
    /// long side moved by `+θ`. Kept for comparison: from a zero start it
    /// never moves and violations survive.
    Verbatim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixingConfig {
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub rule: FixingRule,
}

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_MAX_SWEEPS: usize = 1_000_000;

impl Default for FixingConfig {
    fn default() -> Self {
        FixingConfig {
            epsilon: DEFAULT_EPSILON,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            rule: FixingRule::Projection,
        }
    }
}

/// Correction matrix, duals and convergence bookkeeping of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct FixingState {
    /// Symmetric corrections, zero diagonal.
    pub e: Matrix,
    /// Three duals per triangle `i < j < k`, for long sides `ij`, `jk`, `ik`.
    pub z: Vec<f64>,
    pub epsilon: f64,
    /// Sum of absolute changes to `e` during the last sweep.
    pub delta: f64,
    pub sweeps: usize,
}

impl FixingState {
    pub fn new(m: usize, epsilon: f64) -> Self {
        let triangles = if m < 3 { 0 } else { m * (m - 1) * (m - 2) / 6 };
        FixingState {
            e: Matrix::zeros(m, m),
            z: vec![0.0; 3 * triangles],
            epsilon,
            delta: 1.0 + epsilon,
            sweeps: 0,
        }
    }

    /// One pass over all triangles in lexicographic order.
    pub fn sweep(&mut self, d_hat: &Matrix, rule: FixingRule) -> f64 {
        let m = d_hat.rows();
        let mut delta = 0.0;
        let mut t = 0;
        for i in 0..m {
            for j in i + 1..m {
                for k in j + 1..m {
                    // Long side (a, b), short sides (b, c) and (a, c).
                    for (a, b, c) in [(i, j, k), (j, k, i), (i, k, j)] {
                        let (ab, bc, ac) = (sorted(a, b), sorted(b, c), sorted(a, c));
                        let slack = d_hat[(ac.0, ac.1)] + d_hat[(bc.0, bc.1)] - d_hat[(ab.0, ab.1)];
                        let mu = (self.e[ab] - self.e[bc] - self.e[ac] - slack) / 3.0;
                        let z = &mut self.z[t];
                        t += 1;
                        let theta = match rule {
                            FixingRule::Projection => {
                                let theta = mu.max(-*z);
                                *z += theta;
                                -theta
                            }
                            FixingRule::Verbatim => {
                                if mu <= 0.0 {
                                    continue;
                                }
                                let theta = mu.min(*z);
                                *z -= theta;
                                theta
                            }
                        };
                        if theta == 0.0 {
                            continue;
                        }
                        self.e[ab] += theta;
                        self.e[bc] -= theta;
                        self.e[ac] -= theta;
                        delta += 3.0 * theta.abs();
                    }
                }
            }
        }
        self.delta = delta;
        self.sweeps += 1;
        delta
    }

    /// `D̂ + E`, assembled from the upper triangle so it is bitwise symmetric.
    pub fn corrected(&self, d_hat: &Matrix) -> Matrix {
        let m = d_hat.rows();
        let mut out = Matrix::zeros(m, m);
        for i in 0..m {
            for j in i + 1..m {
                let v = d_hat[(i, j)] + self.e[(i, j)];
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

fn sorted(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixingOutcome {
    pub matrix: Matrix,
    pub sweeps: usize,
    pub delta: f64,
}

/// Sweeps until the total change in one sweep is at most `epsilon`.
pub fn triangle_fixing(d_hat: &Matrix, config: &FixingConfig) -> Result<FixingOutcome> {
    check_square_symmetric(d_hat)?;
    if !(config.epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", config.epsilon)));
    }
    let mut state = FixingState::new(d_hat.rows(), config.epsilon);
    while state.delta > state.epsilon {
        if state.sweeps >= config.max_sweeps {
            return Err(Error::NotConverged {
                sweeps: state.sweeps,
                delta: state.delta,
                best: state.corrected(d_hat).into_vec(),
            });
        }
        let delta = state.sweep(d_hat, config.rule);
        if !delta.is_finite() {
            return Err(Error::Numerical(format!("triangle fixing diverged at sweep {}", state.sweeps)));
        }
    }
    Ok(FixingOutcome {
        matrix: state.corrected(d_hat),
        sweeps: state.sweeps,
        delta: state.delta,
    })
}

/// [`triangle_fixing`] on a labelled matrix.
pub fn fix_distance_matrix(d_hat: &DistanceMatrix, config: &FixingConfig) -> Result<(DistanceMatrix, FixingOutcome)> {
    let outcome = triangle_fixing(d_hat.values(), config)?;
    let fixed = DistanceMatrix::new(d_hat.ids().to_vec(), outcome.matrix.clone())?;
    Ok((fixed, outcome))
}

/// Shortest-path closure of the complete graph weighted by `D̂`.
pub fn apsp_metric_repair(d_hat: &Matrix) -> Result<Matrix> {
    check_square_symmetric(d_hat)?;
    if let Some(v) = d_hat.data().iter().find(|v| **v < 0.0) {
        return Err(Error::InvalidData(format!("negative distance {v}")));
    }
    let m = d_hat.rows();
    let mut d = d_hat.clone();
    for k in 0..m {
        for i in 0..m {
            let dik = d[(i, k)];
            for j in 0..m {
                let via = dik + d[(k, j)];
                if via < d[(i, j)] {
                    d[(i, j)] = via;
                }
            }
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three(ab: f64, ac: f64, bc: f64) -> Matrix {
        Matrix::from_rows(&[vec![0.0, ab, ac], vec![ab, 0.0, bc], vec![ac, bc, 0.0]]).unwrap()
    }

    fn frob_dist(a: &Matrix, b: &Matrix) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn random_matrix(m: usize, values: &[f64]) -> Matrix {
        let mut d = Matrix::zeros(m, m);
        let mut it = values.iter();
        for i in 0..m {
            for j in i + 1..m {
                let v = *it.next().unwrap();
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        d
    }

    #[test]
    fn violation_report() {
        let v = triangle_violations(&three(1.0, 0.2, 0.3), 0.0).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].i, v[0].j, v[0].k), (0, 1, 2));
        assert!((v[0].magnitude - 0.5).abs() < 1e-15);
        assert!(triangle_violations(&Matrix::zeros(4, 4), 0.0).unwrap().is_empty());
        let mut bad = three(1.0, 0.2, 0.3);
        bad[(1, 0)] = 0.9;
        assert!(triangle_violations(&bad, 0.0).is_err());
        bad = three(1.0, 0.2, 0.3);
        bad[(2, 2)] = 0.1;
        assert!(triangle_violations(&bad, 0.0).is_err());
    }

    #[test]
    fn single_violation_projects_in_closed_form() {
        let out = triangle_fixing(&three(1.0, 0.2, 0.3), &FixingConfig::default()).unwrap();
        let d = out.matrix;
        assert!((d[(0, 1)] - (1.0 - 0.5 / 3.0)).abs() < 1e-6);
        assert!((d[(0, 2)] - (0.2 + 0.5 / 3.0)).abs() < 1e-6);
        assert!((d[(1, 2)] - (0.3 + 0.5 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn metric_input_is_a_fixed_point() {
        let d = three(0.5, 0.3, 0.4);
        let out = triangle_fixing(&d, &FixingConfig::default()).unwrap();
        assert_eq!(out.matrix, d);
        assert_eq!(out.sweeps, 1);
    }

    #[test]
    fn verbatim_rule_leaves_the_violation() {
        let cfg = FixingConfig {
            rule: FixingRule::Verbatim,
            ..FixingConfig::default()
        };
        let out = triangle_fixing(&three(1.0, 0.2, 0.3), &cfg).unwrap();
        assert_eq!(triangle_violations(&out.matrix, 1e-6).unwrap().len(), 1);
    }

    #[test]
    fn sweep_cap_reports_best_so_far() {
        let cfg = FixingConfig {
            max_sweeps: 1,
            ..FixingConfig::default()
        };
        let d = random_matrix(6, &[0.9, 0.1, 0.2, 0.8, 0.05, 0.7, 0.3, 0.1, 0.95, 0.2, 0.6, 0.1, 0.9, 0.05, 0.4]);
        match triangle_fixing(&d, &cfg) {
            Err(Error::NotConverged { sweeps, best, .. }) => {
                assert_eq!(sweeps, 1);
                assert_eq!(best.len(), 36);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn apsp_examples() {
        let d = apsp_metric_repair(&three(1.0, 0.2, 0.3)).unwrap();
        assert!((d[(0, 1)] - 0.5).abs() < 1e-15);
        let flat = random_matrix(4, &[0.4; 6]);
        assert_eq!(apsp_metric_repair(&flat).unwrap(), flat);
        let mut neg = three(0.5, 0.3, 0.4);
        neg[(0, 1)] = -0.1;
        neg[(1, 0)] = -0.1;
        assert!(apsp_metric_repair(&neg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fixing_is_feasible_near_optimal_and_idempotent(values in prop::collection::vec(0.0f64..1.0, 45)) {
            let d_hat = random_matrix(10, &values);
            let cfg = FixingConfig::default();
            let fixed = triangle_fixing(&d_hat, &cfg).unwrap().matrix;
            prop_assert!(triangle_violations(&fixed, 10.0 * cfg.epsilon).unwrap().is_empty());
            let apsp = apsp_metric_repair(&d_hat).unwrap();
            prop_assert!(triangle_violations(&apsp, 1e-12).unwrap().is_empty());
            prop_assert!(apsp.data().iter().zip(d_hat.data()).all(|(a, b)| a <= b));
            prop_assert!(frob_dist(&fixed, &d_hat) <= frob_dist(&apsp, &d_hat) + 1e-9);
            let again = triangle_fixing(&fixed, &cfg).unwrap().matrix;
            prop_assert!(again.data().iter().zip(fixed.data()).all(|(a, b)| (a - b).abs() <= 10.0 * cfg.epsilon));
        }
    }
}
