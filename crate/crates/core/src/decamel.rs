//! Joint SGD training of a feature extractor and the per-view transforms.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camel::{f_consistency, f_constraint, view_covariances, AsymmetricMetric, ViewCovariances};
use crate::clustering::{sq_dist, ClusterState};
use crate::error::{check_dim, Error, Result};
use crate::extractor::{Extractor, FeatureExtractor};
use crate::features::ViewFeatures;
use crate::rng::{self, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecamelConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// The learning rate is divided by this after half of the iterations.
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub refresh_period: usize,
    pub freeze_metric: bool,
    pub freeze_extractor: bool,
    pub seed: u64,
}

impl Default for DecamelConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            gamma: 10.0,
            iterations: 10_000,
            learning_rate: 0.005,
            lr_drop_factor: 5.0,
            batch_size: 216,
            refresh_period: 100,
            freeze_metric: false,
            freeze_extractor: false,
            seed: 0,
        }
    }
}

impl DecamelConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [("lambda", self.lambda), ("gamma", self.gamma), ("learning_rate", self.learning_rate)];
        for (name, x) in non_negative {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::Config("lr_drop_factor must be positive".into()));
        }
        if self.batch_size == 0 || self.refresh_period == 0 {
            return Err(Error::Config("batch_size and refresh_period must be at least 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.iterations / 2 {
            self.learning_rate
        } else {
            self.learning_rate / self.lr_drop_factor
        }
    }
}

/// Which component keeps its initial parameters during joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freeze {
    Metric,
    Extractor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub extractor: Extractor,
    pub metric: AsymmetricMetric,
    pub state: ClusterState,
    pub loss_trace: Vec<f64>,
}

impl TrainedModel {
    pub fn extract(&self, raw: &ViewFeatures) -> Result<ViewFeatures> {
        extract_features(&self.extractor, raw)
    }

    /// Shared-space projections of raw samples.
    pub fn project_all(&self, raw: &ViewFeatures) -> Result<Vec<DVector<f64>>> {
        self.metric.project_all(&self.extract(raw)?)
    }
}

pub fn extract_features(extractor: &impl FeatureExtractor, raw: &ViewFeatures) -> Result<ViewFeatures> {
    check_dim(extractor.input_dim(), raw.dim())?;
    let points = raw.points().iter().map(|m| extractor.forward(m)).collect();
    ViewFeatures::new(points, raw.views().to_vec(), raw.num_views())
}

fn check_batch(features: &ViewFeatures, batch: &[usize], metric: &AsymmetricMetric, state: &ClusterState) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    check_dim(metric.dim(), features.dim())?;
    check_dim(metric.num_views(), features.num_views())?;
    check_dim(features.len(), state.num_samples())?;
    if let Some(&i) = batch.iter().find(|&&i| i >= features.len()) {
        return Err(Error::Argument(format!("batch index {i} out of range")));
    }
    Ok(())
}

/// Batch-mean squared distance to the cached centroids plus both regularisers.
pub fn decamel_loss(
    features: &ViewFeatures,
    batch: &[usize],
    metric: &AsymmetricMetric,
    state: &ClusterState,
    cov: &ViewCovariances,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    check_batch(features, batch, metric, state)?;
    let mut intra = 0.0;
    for &i in batch {
        let y = metric.project(&features.points()[i], features.views()[i])?;
        intra += sq_dist(&y, state.centroid_of(i));
    }
    Ok(intra / batch.len() as f64 + lambda * f_consistency(metric) + gamma * f_constraint(metric, cov)?)
}

/// Gradient of `‖y − c‖²` with respect to the projection `y`.
pub fn grad_projected_sample(y: &DVector<f64>, centroid: &DVector<f64>) -> DVector<f64> {
    (y - centroid) * 2.0
}

/// Gradient of [`decamel_loss`] with respect to every `U_v`.
pub fn grad_metric(
    features: &ViewFeatures,
    batch: &[usize],
    metric: &AsymmetricMetric,
    state: &ClusterState,
    cov: &ViewCovariances,
    lambda: f64,
    gamma: f64,
) -> Result<Vec<DMatrix<f64>>> {
    check_batch(features, batch, metric, state)?;
    check_dim(metric.num_views(), cov.num_views())?;
    let u = metric.transforms();
    let (d, t) = (metric.dim(), metric.target_dim());
    let mut grads = vec![DMatrix::<f64>::zeros(d, t); u.len()];
    let scale = 1.0 / batch.len() as f64;
    for &i in batch {
        let v = features.views()[i];
        let x = &features.points()[i];
        let g = grad_projected_sample(&u[v].tr_mul(x), state.centroid_of(i));
        grads[v].ger(scale, x, &g, 1.0);
    }
    let identity = DMatrix::<f64>::identity(t, t);
    for (v, grad) in grads.iter_mut().enumerate() {
        for (w, uw) in u.iter().enumerate() {
            if w != v {
                *grad += (&u[v] - uw) * (2.0 * lambda);
            }
        }
        let s = cov.block(v);
        let residual = u[v].transpose() * s * &u[v] - &identity;
        *grad += s * &u[v] * residual * (4.0 * gamma);
    }
    Ok(grads)
}

/// Gradients for one sample: with respect to its feature vector and, through
/// the extractor, with respect to the extractor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradient {
    pub feature: DVector<f64>,
    pub params: DVector<f64>,
}

/// Back-propagates `‖U_vᵀ f(m) − c‖²` into the extractor.
pub fn backprop_feature(
    raw: &DVector<f64>,
    view: usize,
    metric: &AsymmetricMetric,
    centroid: &DVector<f64>,
    extractor: &impl FeatureExtractor,
) -> Result<SampleGradient> {
    check_dim(metric.dim(), extractor.output_dim())?;
    let x = extractor.forward(raw);
    let y = metric.project(&x, view)?;
    check_dim(y.len(), centroid.len())?;
    let feature = metric.transform(view) * grad_projected_sample(&y, centroid);
    let params = extractor.backward(raw, &feature);
    Ok(SampleGradient { feature, params })
}

/// Per-view sample counts for a batch: each view's share of `batch_size`,
/// with the rounding remainder going to the largest fractional parts.
pub fn stratified_counts(view_counts: &[usize], batch_size: usize) -> Result<Vec<usize>> {
    let v_count = view_counts.len();
    if batch_size < v_count {
        return Err(Error::Config(format!(
            "batch size {batch_size} is smaller than the {v_count} views"
        )));
    }
    let total: usize = view_counts.iter().sum();
    if total == 0 || view_counts.contains(&0) {
        return Err(Error::Argument("every view needs samples".into()));
    }
    let quotas: Vec<f64> = view_counts
        .iter()
        .map(|&n| n as f64 * batch_size as f64 / total as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..v_count).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    let assigned: usize = counts.iter().sum();
    for &v in order.iter().take(batch_size - assigned) {
        counts[v] += 1;
    }
    // Keep every view present in every batch.
    while let Some(v) = counts.iter().position(|&c| c == 0) {
        let donor = (0..v_count).max_by_key(|&w| (counts[w], std::cmp::Reverse(w))).expect("views exist");
        counts[donor] -= 1;
        counts[v] += 1;
    }
    Ok(counts)
}

/// Endless stratified batches: each draws its per-view quota uniformly with
/// replacement from that view's samples.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    by_view: Vec<Vec<usize>>,
    counts: Vec<usize>,
    rng: rng::Rng,
}

impl BatchSampler {
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::with_capacity(self.counts.iter().sum());
        for (members, &n) in self.by_view.iter().zip(&self.counts) {
            for _ in 0..n {
                batch.push(members[self.rng.random_range(0..members.len())]);
            }
        }
        Some(batch)
    }
}

pub fn make_batches(views: &[usize], num_views: usize, batch_size: usize, seed: u64) -> Result<BatchSampler> {
    let mut by_view = vec![Vec::new(); num_views];
    for (i, &v) in views.iter().enumerate() {
        by_view
            .get_mut(v)
            .ok_or_else(|| Error::Argument(format!("view index {v} out of range")))?
            .push(i);
    }
    let counts = stratified_counts(&by_view.iter().map(Vec::len).collect::<Vec<_>>(), batch_size)?;
    Ok(BatchSampler {
        by_view,
        counts,
        rng: rng::seeded(seed),
    })
}

/// One full assignment and centroid pass over the projections of `raw`.
pub fn refresh_clusters(
    raw: &ViewFeatures,
    extractor: &impl FeatureExtractor,
    metric: &AsymmetricMetric,
    state: &ClusterState,
) -> Result<ClusterState> {
    let projected = metric.project_all(&extract_features(extractor, raw)?)?;
    let mut next = state.clone();
    next.refresh(&projected)?;
    Ok(next)
}

pub fn decamel_train(
    raw: &ViewFeatures,
    extractor: Extractor,
    init: (AsymmetricMetric, ClusterState),
    config: &DecamelConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let (mut metric, mut state) = init;
    check_dim(extractor.input_dim(), raw.dim())?;
    check_dim(metric.dim(), extractor.output_dim())?;
    check_dim(metric.num_views(), raw.num_views())?;
    check_dim(raw.len(), state.num_samples())?;

    let mut extractor = extractor;
    // The constraint covariances stay fixed at their initial values.
    let cov = view_covariances(&extract_features(&extractor, raw)?)?;
    let mut sampler = make_batches(raw.views(), raw.num_views(), config.batch_size, derive_seed(config.seed, "batches"))?;
    let mut loss_trace = Vec::with_capacity(config.iterations);
    let update_metric = !config.freeze_metric;
    let update_extractor = !config.freeze_extractor && extractor.num_params() > 0;

    for step in 0..config.iterations {
        let lr = config.learning_rate_at(step);
        let batch = sampler.next().expect("sampler is endless");
        let features = batch_features(raw, &extractor, &batch)?;
        let local: Vec<usize> = (0..batch.len()).collect();
        let batch_state = BatchState::new(&state, &batch)?;

        let loss = decamel_loss(&features, &local, &metric, &batch_state.0, &cov, config.lambda, config.gamma)?;
        if !loss.is_finite() {
            return Err(Error::Training { step, msg: "loss is not finite".into() });
        }
        loss_trace.push(loss);

        let metric_step = if update_metric {
            Some(grad_metric(&features, &local, &metric, &batch_state.0, &cov, config.lambda, config.gamma)?)
        } else {
            None
        };
        if update_extractor {
            let mut grad = DVector::zeros(extractor.num_params());
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let g = backprop_feature(&raw.points()[i], raw.views()[i], &metric, state.centroid_of(i), &extractor)?;
                grad.axpy(-lr * scale, &g.params, 1.0);
            }
            extractor
                .apply_update(&grad)
                .map_err(|e| Error::Training { step, msg: e.to_string() })?;
        }
        if let Some(grads) = metric_step {
            let updated = metric
                .transforms()
                .iter()
                .zip(&grads)
                .map(|(u, g)| u - g * lr)
                .collect();
            metric = AsymmetricMetric::new(updated).map_err(|e| Error::Training { step, msg: e.to_string() })?;
        }
        if (step + 1) % config.refresh_period == 0 {
            state = refresh_clusters(raw, &extractor, &metric, &state)?;
        }
    }
    Ok(TrainedModel {
        extractor,
        metric,
        state,
        loss_trace,
    })
}

/// Training with one component frozen.
pub fn freeze_variants(
    raw: &ViewFeatures,
    extractor: Extractor,
    init: (AsymmetricMetric, ClusterState),
    config: &DecamelConfig,
    freeze: Freeze,
) -> Result<TrainedModel> {
    let mut config = config.clone();
    match freeze {
        Freeze::Metric => config.freeze_metric = true,
        Freeze::Extractor => config.freeze_extractor = true,
    }
    decamel_train(raw, extractor, init, &config)
}

fn batch_features(raw: &ViewFeatures, extractor: &Extractor, batch: &[usize]) -> Result<ViewFeatures> {
    let points = batch.iter().map(|&i| extractor.forward(&raw.points()[i])).collect();
    let views = batch.iter().map(|&i| raw.views()[i]).collect();
    ViewFeatures::new(points, views, raw.num_views())
}

/// The cached assignments of a batch, as a state over batch positions.
struct BatchState(ClusterState);

impl BatchState {
    fn new(state: &ClusterState, batch: &[usize]) -> Result<Self> {
        let assignments = batch.iter().map(|&i| state.assignments()[i]).collect();
        Ok(Self(ClusterState::new(assignments, state.centroids().to_vec())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projected_gradient_examples() {
        let y = DVector::from_column_slice(&[1.0, 0.0]);
        assert_eq!(grad_projected_sample(&y, &y), DVector::zeros(2));
        assert_eq!(grad_projected_sample(&y, &DVector::zeros(2)).as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn single_sample_hand_values() {
        let f = ViewFeatures::new(vec![DVector::from_element(1, 1.0)], vec![0], 1).unwrap();
        let metric = AsymmetricMetric::identity(1, 1);
        let state = ClusterState::new(vec![0], vec![DVector::zeros(1)]).unwrap();
        let cov = view_covariances(&f).unwrap();
        assert_eq!(decamel_loss(&f, &[0], &metric, &state, &cov, 0.0, 0.0).unwrap(), 1.0);
        let g = grad_metric(&f, &[0], &metric, &state, &cov, 0.0, 0.0).unwrap();
        assert_eq!(g[0][(0, 0)], 2.0);
    }

    #[test]
    fn stratified_examples() {
        assert_eq!(stratified_counts(&[40, 60], 216).unwrap(), vec![86, 130]);
        assert_eq!(stratified_counts(&[25, 75], 216).unwrap(), vec![54, 162]);
        assert_eq!(stratified_counts(&[7], 216).unwrap(), vec![216]);
        assert!(matches!(stratified_counts(&[1, 1, 1], 2), Err(Error::Config(_))));
        assert_eq!(stratified_counts(&[1, 1000], 2).unwrap(), vec![1, 1]);
    }

    #[test]
    fn learning_rate_schedule() {
        let c = DecamelConfig { iterations: 10, ..Default::default() };
        assert_eq!(c.learning_rate_at(4), 0.005);
        assert_eq!(c.learning_rate_at(5), 0.001);
    }

    #[test]
    fn identity_extractor_chain_rule() {
        let metric = AsymmetricMetric::new(vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, -1.0])]).unwrap();
        let m = DVector::from_column_slice(&[0.3, -0.7]);
        let c = DVector::from_column_slice(&[0.1, 0.2]);
        let g = backprop_feature(&m, 0, &metric, &c, &Extractor::identity(2)).unwrap();
        let u = metric.transform(0);
        assert_eq!(g.feature, u * ((u.tr_mul(&m) - &c) * 2.0));
        assert_eq!(g.params.len(), 0);
    }
}
