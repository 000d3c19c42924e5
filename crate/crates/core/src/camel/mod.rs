//! The linear asymmetric metric: per-view transforms, objectives, the
//! generalized eigen step and the alternating fit.

mod eigen;
mod fit;

pub use eigen::{build_consistency_matrix, eigen_step, lift_features, lift_sample, CamelProblem};
pub use fit::{camel_fit, camel_fit_pinned, symmetric_fit, symmetric_fit_pinned, CamelConfig, CamelFit};

use nalgebra::{DMatrix, DVector};

use crate::clustering::{sq_dist, ClusterState};
use crate::error::{check_dim, Error, Result};
use crate::features::ViewFeatures;
use crate::linalg::block_diagonal;

/// One `d×T` transform per view; view `v` maps `x` to `U_vᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetricMetric {
    transforms: Vec<DMatrix<f64>>,
}

impl AsymmetricMetric {
    pub fn new(transforms: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = transforms
            .first()
            .ok_or_else(|| Error::Argument("metric needs at least one view".into()))?;
        let (d, t) = first.shape();
        if d == 0 || t == 0 {
            return Err(Error::Argument("transforms must be non-empty".into()));
        }
        for u in &transforms {
            check_dim(d, u.nrows())?;
            check_dim(t, u.ncols())?;
            if u.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical("transform has a non-finite entry".into()));
            }
        }
        Ok(Self { transforms })
    }

    pub fn identity(num_views: usize, dim: usize) -> Self {
        Self {
            transforms: vec![DMatrix::identity(dim, dim); num_views],
        }
    }

    /// Splits a stacked `(V·d)×T` matrix into its per-view blocks.
    pub fn from_block(block: &DMatrix<f64>, num_views: usize) -> Result<Self> {
        if num_views == 0 || block.nrows() % num_views != 0 {
            return Err(Error::Argument(format!(
                "{} rows do not split into {num_views} views",
                block.nrows()
            )));
        }
        let d = block.nrows() / num_views;
        Self::new(
            (0..num_views)
                .map(|v| block.rows(v * d, d).into_owned())
                .collect(),
        )
    }

    pub fn transforms(&self) -> &[DMatrix<f64>] {
        &self.transforms
    }

    pub fn transform(&self, view: usize) -> &DMatrix<f64> {
        &self.transforms[view]
    }

    pub fn into_transforms(self) -> Vec<DMatrix<f64>> {
        self.transforms
    }

    pub fn num_views(&self) -> usize {
        self.transforms.len()
    }

    pub fn dim(&self) -> usize {
        self.transforms[0].nrows()
    }

    pub fn target_dim(&self) -> usize {
        self.transforms[0].ncols()
    }

    /// The stacked form with `U_v` as the v-th block of rows.
    pub fn block(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(self.num_views() * d, self.target_dim());
        for (v, u) in self.transforms.iter().enumerate() {
            out.rows_mut(v * d, d).copy_from(u);
        }
        out
    }

    /// `U_vᵀx` for a 0-based view index.
    pub fn project(&self, x: &DVector<f64>, view: usize) -> Result<DVector<f64>> {
        let u = self.transforms.get(view).ok_or_else(|| {
            Error::Argument(format!("unknown view index {view} for {} views", self.num_views()))
        })?;
        check_dim(u.nrows(), x.len())?;
        Ok(u.tr_mul(x))
    }

    pub fn project_all(&self, features: &ViewFeatures) -> Result<Vec<DVector<f64>>> {
        features
            .points()
            .iter()
            .zip(features.views())
            .map(|(x, &v)| self.project(x, v))
            .collect()
    }

    /// Same transforms, each view taking the transform of `source[v]`.
    pub fn expand(&self, source: &[usize]) -> Result<Self> {
        let transforms = source
            .iter()
            .map(|&j| {
                self.transforms
                    .get(j)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("unknown view index {j}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(transforms)
    }
}

/// Per-view second-moment matrices `Σ_v = (1/N_v) Σ x xᵀ + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCovariances {
    blocks: Vec<DMatrix<f64>>,
}

impl ViewCovariances {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, view: usize) -> &DMatrix<f64> {
        &self.blocks[view]
    }

    pub fn num_views(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_diagonal(&self) -> DMatrix<f64> {
        block_diagonal(&self.blocks)
    }
}

pub fn view_covariances(features: &ViewFeatures) -> Result<ViewCovariances> {
    let d = features.dim();
    let v_count = features.num_views();
    let mut sums = vec![DMatrix::<f64>::zeros(d, d); v_count];
    let mut counts = vec![0usize; v_count];
    for (x, &v) in features.points().iter().zip(features.views()) {
        sums[v].ger(1.0, x, x, 1.0);
        counts[v] += 1;
    }
    if let Some(v) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Argument(format!("view index {v} has no samples")));
    }
    let blocks = sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s / n as f64 + DMatrix::identity(d, d))
        .collect();
    Ok(ViewCovariances { blocks })
}

fn check_state(features: &ViewFeatures, metric: &AsymmetricMetric, state: &ClusterState) -> Result<()> {
    check_dim(metric.num_views(), features.num_views())?;
    check_dim(metric.dim(), features.dim())?;
    check_dim(features.len(), state.num_samples())?;
    check_dim(metric.target_dim(), state.centroids()[0].len())
}

/// Mean squared distance from each projected sample to its cluster centroid.
pub fn f_intra(features: &ViewFeatures, metric: &AsymmetricMetric, state: &ClusterState) -> Result<f64> {
    check_state(features, metric, state)?;
    let projected = metric.project_all(features)?;
    let total: f64 = projected
        .iter()
        .enumerate()
        .map(|(i, y)| sq_dist(y, state.centroid_of(i)))
        .sum();
    Ok(total / features.len() as f64)
}

/// Sum over unordered view pairs of `‖U_v − U_w‖_F²`.
pub fn f_consistency(metric: &AsymmetricMetric) -> f64 {
    let u = metric.transforms();
    let mut total = 0.0;
    for v in 0..u.len() {
        for w in v + 1..u.len() {
            total += (&u[v] - &u[w]).norm_squared();
        }
    }
    total
}

/// `Σ_v ‖U_vᵀ Σ_v U_v − I‖_F²`.
pub fn f_constraint(metric: &AsymmetricMetric, cov: &ViewCovariances) -> Result<f64> {
    check_dim(metric.num_views(), cov.num_views())?;
    let t = metric.target_dim();
    let mut total = 0.0;
    for (u, s) in metric.transforms().iter().zip(cov.blocks()) {
        check_dim(u.nrows(), s.nrows())?;
        let gram = u.transpose() * s * u;
        total += (gram - DMatrix::<f64>::identity(t, t)).norm_squared();
    }
    Ok(total)
}

pub fn camel_objective(
    features: &ViewFeatures,
    metric: &AsymmetricMetric,
    state: &ClusterState,
    lambda: f64,
) -> Result<f64> {
    Ok(f_intra(features, metric, state)? + lambda * f_consistency(metric))
}
