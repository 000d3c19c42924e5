use serde::{Deserialize, Serialize};

use super::{AsymmetricMetric, CamelProblem};
use crate::clustering::{build_indicator, kmeans_with_labels, ClusterState};
use crate::error::{Error, Result};
use crate::features::ViewFeatures;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamelConfig {
    pub lambda: f64,
    /// Number of clusters; clamped to the sample count.
    pub k: usize,
    /// Projected dimension; `None` keeps the input dimension.
    pub target_dim: Option<usize>,
    pub max_alternations: usize,
    /// Relative objective change that counts as converged.
    pub tolerance: f64,
    pub kmeans_max_iter: usize,
    pub seed: u64,
}

impl Default for CamelConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            k: 500,
            target_dim: None,
            max_alternations: 20,
            tolerance: 1e-6,
            kmeans_max_iter: 100,
            seed: 0,
        }
    }
}

impl CamelConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if let Some(t) = self.target_dim {
            if t == 0 || t > dim {
                return Err(Error::Config(format!("target_dim must lie in 1..={dim}")));
            }
        }
        if self.max_alternations == 0 || self.kmeans_max_iter == 0 {
            return Err(Error::Config("iteration limits must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamelFit {
    pub metric: AsymmetricMetric,
    pub state: ClusterState,
    /// Trace-form objective after every eigen step and every k-means step.
    pub trace: Vec<f64>,
    pub alternations: usize,
    pub converged: bool,
}

pub fn camel_fit(features: &ViewFeatures, config: &CamelConfig) -> Result<CamelFit> {
    camel_fit_pinned(features, config, &[])
}

/// As [`camel_fit`], with `labels` (sample index, identity) pinned to
/// dedicated clusters throughout.
pub fn camel_fit_pinned(features: &ViewFeatures, config: &CamelConfig, labels: &[(usize, u64)]) -> Result<CamelFit> {
    config.validate(features.dim())?;
    let problem = CamelProblem::new(features)?;
    let target_dim = config.target_dim.unwrap_or(features.dim());
    let k = config.k.min(features.len());

    let seed = derive_seed(config.seed, "camel-kmeans");
    let mut state = kmeans_with_labels(features.points(), k, labels, seed, config.kmeans_max_iter)?;

    let mut trace = Vec::with_capacity(2 * config.max_alternations);
    let mut previous: Option<f64> = None;
    let mut converged = false;
    let mut alternations = 0;
    let mut metric = None;
    while alternations < config.max_alternations {
        alternations += 1;
        let h = build_indicator(&state)?;
        let m = problem.eigen_step(&h, config.lambda, target_dim)?;
        trace.push(problem.trace_objective(&m, &h, config.lambda)?);

        let projected = m.project_all(features)?;
        let before = state.assignments().to_vec();
        state.lloyd(&projected, config.kmeans_max_iter)?;
        let h = build_indicator(&state)?;
        let value = problem.trace_objective(&m, &h, config.lambda)?;
        trace.push(value);
        metric = Some(m);

        let unchanged = before == state.assignments();
        let small_change = previous.is_some_and(|p| {
            let scale = p.abs().max(value.abs());
            scale == 0.0 || (p - value).abs() <= config.tolerance * scale
        });
        previous = Some(value);
        log::debug!("alternation {alternations}: objective {value:.6e}");
        if unchanged || small_change {
            converged = true;
            break;
        }
    }
    Ok(CamelFit {
        metric: metric.expect("at least one alternation ran"),
        state,
        trace,
        alternations,
        converged,
    })
}

/// One transform shared by every view, learned on the pooled data.
pub fn symmetric_fit(features: &ViewFeatures, config: &CamelConfig) -> Result<CamelFit> {
    symmetric_fit_pinned(features, config, &[])
}

pub fn symmetric_fit_pinned(features: &ViewFeatures, config: &CamelConfig, labels: &[(usize, u64)]) -> Result<CamelFit> {
    let mut fit = camel_fit_pinned(&features.pooled(), config, labels)?;
    fit.metric = fit.metric.expand(&vec![0; features.num_views()])?;
    Ok(fit)
}
