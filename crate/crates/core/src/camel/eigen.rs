use nalgebra::{DMatrix, DVector};

use super::{view_covariances, AsymmetricMetric, ViewCovariances};
use crate::error::{check_dim, Error, Result};
use crate::features::ViewFeatures;
use crate::linalg::{fix_column_signs, generalized_eigen, symmetrize};

/// Embeds `x` into block `view` (0-based) of a zero vector of length `V·d`.
pub fn lift_sample(x: &DVector<f64>, view: usize, num_views: usize) -> Result<DVector<f64>> {
    if view >= num_views {
        return Err(Error::Argument(format!(
            "view index {view} out of range for {num_views} views"
        )));
    }
    let d = x.len();
    let mut out = DVector::zeros(num_views * d);
    out.rows_mut(view * d, d).copy_from(x);
    Ok(out)
}

/// Lifted samples as the columns of a `(V·d)×N` matrix.
pub fn lift_features(features: &ViewFeatures) -> DMatrix<f64> {
    let d = features.dim();
    let mut out = DMatrix::zeros(features.num_views() * d, features.len());
    for (i, (x, &v)) in features.points().iter().zip(features.views()).enumerate() {
        out.view_mut((v * d, i), (d, 1)).copy_from(x);
    }
    out
}

/// `(V−1)·I` on the diagonal blocks and `−I` off the diagonal, so that
/// `Tr(ŨᵀDŨ) = Σ_{v<w} ‖U_v − U_w‖_F²`.
pub fn build_consistency_matrix(num_views: usize, dim: usize) -> DMatrix<f64> {
    let n = num_views * dim;
    DMatrix::from_fn(n, n, |r, c| {
        if r % dim != c % dim {
            0.0
        } else if r / dim == c / dim {
            num_views as f64 - 1.0
        } else {
            -1.0
        }
    })
}

/// Minimises `Tr(ŨᵀMŨ)` subject to `ŨᵀΣ̃Ũ = V·I` with
/// `M = λD + (1/N)X̃X̃ᵀ − (1/N)X̃HHᵀX̃ᵀ`.
pub fn eigen_step(
    lifted: &DMatrix<f64>,
    indicator: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    consistency: &DMatrix<f64>,
    lambda: f64,
    num_views: usize,
    target_dim: usize,
) -> Result<AsymmetricMetric> {
    if num_views == 0 || lifted.nrows() % num_views != 0 {
        return Err(Error::Argument(format!(
            "{} lifted rows do not split into {num_views} views",
            lifted.nrows()
        )));
    }
    let m = objective_matrix(lifted, indicator, consistency, lambda)?;
    solve(&m, sigma, target_dim, num_views)
}

fn objective_matrix(
    lifted: &DMatrix<f64>,
    indicator: &DMatrix<f64>,
    consistency: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let n = lifted.ncols();
    check_dim(n, indicator.nrows())?;
    check_dim(lifted.nrows(), consistency.nrows())?;
    let xh = lifted * indicator;
    let scale = 1.0 / n as f64;
    let m = consistency * lambda + (lifted * lifted.transpose()) * scale - (&xh * xh.transpose()) * scale;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("objective matrix has non-finite entries".into()));
    }
    Ok(symmetrize(&m))
}

fn solve(m: &DMatrix<f64>, sigma: &DMatrix<f64>, target_dim: usize, num_views: usize) -> Result<AsymmetricMetric> {
    let d = m.nrows() / num_views;
    if target_dim == 0 || target_dim > d {
        return Err(Error::Argument(format!("target dimension {target_dim} outside 1..={d}")));
    }
    let (_, vectors) = generalized_eigen(m, sigma)?;
    let mut block = vectors.columns(0, target_dim) * (num_views as f64).sqrt();
    fix_column_signs(&mut block);
    AsymmetricMetric::from_block(&block, num_views)
}

/// Cached lifted data, constraint and consistency matrices of one training set.
#[derive(Debug, Clone)]
pub struct CamelProblem {
    lifted: DMatrix<f64>,
    sigma: DMatrix<f64>,
    consistency: DMatrix<f64>,
    covariances: ViewCovariances,
    num_views: usize,
}

impl CamelProblem {
    pub fn new(features: &ViewFeatures) -> Result<Self> {
        let covariances = view_covariances(features)?;
        Ok(Self {
            lifted: lift_features(features),
            sigma: covariances.block_diagonal(),
            consistency: build_consistency_matrix(features.num_views(), features.dim()),
            covariances,
            num_views: features.num_views(),
        })
    }

    pub fn lifted(&self) -> &DMatrix<f64> {
        &self.lifted
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn consistency(&self) -> &DMatrix<f64> {
        &self.consistency
    }

    pub fn covariances(&self) -> &ViewCovariances {
        &self.covariances
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    pub fn objective_matrix(&self, indicator: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
        objective_matrix(&self.lifted, indicator, &self.consistency, lambda)
    }

    pub fn eigen_step(&self, indicator: &DMatrix<f64>, lambda: f64, target_dim: usize) -> Result<AsymmetricMetric> {
        let m = self.objective_matrix(indicator, lambda)?;
        solve(&m, &self.sigma, target_dim, self.num_views)
    }

    /// The trace form `Tr(ŨᵀMŨ)` of the objective.
    pub fn trace_objective(&self, metric: &AsymmetricMetric, indicator: &DMatrix<f64>, lambda: f64) -> Result<f64> {
        check_dim(self.num_views, metric.num_views())?;
        let u = metric.block();
        check_dim(self.lifted.nrows(), u.nrows())?;
        check_dim(self.lifted.ncols(), indicator.nrows())?;
        // Evaluated as separate products to avoid forming M.
        let n = self.lifted.ncols() as f64;
        let proj = u.tr_mul(&self.lifted);
        let proj_h = &proj * indicator;
        let consistency = (u.transpose() * &self.consistency * &u).trace();
        Ok(lambda * consistency + proj.norm_squared() / n - proj_h.norm_squared() / n)
    }

    /// `‖ŨᵀΣ̃Ũ − V·I‖_F`.
    pub fn constraint_residual(&self, metric: &AsymmetricMetric) -> f64 {
        let u = metric.block();
        let t = u.ncols();
        (u.transpose() * &self.sigma * &u - DMatrix::<f64>::identity(t, t) * self.num_views as f64).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{build_indicator, ClusterState};
    use crate::camel::{camel_objective, f_consistency};
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, m: usize, r: &mut rng::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(r))
    }

    #[test]
    fn lift_examples() {
        let x = DVector::from_column_slice(&[1.0, 2.0]);
        assert_eq!(lift_sample(&x, 0, 2).unwrap().as_slice(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(lift_sample(&x, 1, 2).unwrap().as_slice(), &[0.0, 0.0, 1.0, 2.0]);
        assert!(lift_sample(&x, 2, 2).is_err());
    }

    #[test]
    fn lifted_projection_matches_per_view() {
        let mut r = rng::seeded(6);
        let metric = AsymmetricMetric::new((0..3).map(|_| random(4, 3, &mut r)).collect()).unwrap();
        let block = metric.block();
        for v in 0..3 {
            let x = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut r));
            let lifted = lift_sample(&x, v, 3).unwrap();
            let a = block.tr_mul(&lifted);
            let b = metric.transform(v).tr_mul(&x);
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn consistency_matrix_examples() {
        let d = build_consistency_matrix(2, 1);
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(build_consistency_matrix(1, 3), DMatrix::zeros(3, 3));
    }

    #[test]
    fn consistency_trace_equals_pairwise_sum() {
        let mut r = rng::seeded(7);
        for _ in 0..20 {
            let v = r.random_range(1..5);
            let d = r.random_range(1..6);
            let t = r.random_range(1..=d);
            let metric = AsymmetricMetric::new((0..v).map(|_| random(d, t, &mut r)).collect()).unwrap();
            let u = metric.block();
            let trace = (u.transpose() * build_consistency_matrix(v, d) * &u).trace();
            let pairs = f_consistency(&metric);
            assert!((trace - pairs).abs() <= 1e-12 * pairs.max(1.0));
        }
    }

    #[test]
    fn eigen_step_satisfies_constraint_and_large_lambda_ties() {
        let mut r = rng::seeded(8);
        let (v, d, n, k) = (3, 3, 30, 4);
        let points: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r))).collect();
        let views: Vec<usize> = (0..n).map(|i| i % v).collect();
        let features = ViewFeatures::new(points, views, v).unwrap();
        let problem = CamelProblem::new(&features).unwrap();
        let state = ClusterState::from_assignments(features.points(), (0..n).map(|i| i % k).collect(), k).unwrap();
        let h = build_indicator(&state).unwrap();
        let metric = problem.eigen_step(&h, 0.01, d).unwrap();
        assert!(problem.constraint_residual(&metric) <= 1e-6);

        let tied = problem.eigen_step(&h, 1e6, d).unwrap();
        let u = tied.transforms();
        for a in 0..v {
            for b in a + 1..v {
                let rel = (&u[a] - &u[b]).norm() / u[a].norm().max(u[b].norm());
                assert!(rel < 1e-3, "views {a},{b}: {rel}");
            }
        }
    }

    #[test]
    fn trace_form_matches_sum_form() {
        let mut r = rng::seeded(9);
        let (v, d, n, k) = (2, 3, 20, 3);
        let points: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r))).collect();
        let features = ViewFeatures::new(points, (0..n).map(|i| i % v).collect(), v).unwrap();
        let problem = CamelProblem::new(&features).unwrap();
        let metric = AsymmetricMetric::new((0..v).map(|_| random(d, 2, &mut r)).collect()).unwrap();
        let projected = metric.project_all(&features).unwrap();
        let state = ClusterState::from_assignments(&projected, (0..n).map(|i| i % k).collect(), k).unwrap();
        let h = build_indicator(&state).unwrap();
        let sum = camel_objective(&features, &metric, &state, 0.3).unwrap();
        let trace = problem.trace_objective(&metric, &h, 0.3).unwrap();
        assert!((sum - trace).abs() <= 1e-9 * sum.abs());
    }
}
