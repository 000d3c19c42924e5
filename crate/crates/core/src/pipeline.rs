//! End-to-end training runs: metric initialisation, optional view
//! clustering, joint training, and the deployable model.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camel::{camel_fit_pinned, symmetric_fit_pinned, AsymmetricMetric, CamelConfig};
use crate::clustering::{kmeans_with_labels, ClusterState};
use crate::dataset::Dataset;
use crate::decamel::{decamel_train, extract_features, DecamelConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::eval::Embedding;
use crate::extractor::{Extractor, ExtractorKind};
use crate::features::ViewFeatures;
use crate::rng::{self, derive_seed};
use crate::views::{assign_unseen_view, cluster_views, relabel_views, view_representations, ViewPrototypeSet};

/// How the transforms are initialised before joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Camel,
    Identity,
    Random,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Camel => "camel",
            Self::Identity => "identity",
            Self::Random => "random",
        })
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "camel" => Ok(Self::Camel),
            "identity" => Ok(Self::Identity),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown init mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub camel: CamelConfig,
    pub decamel: DecamelConfig,
    pub extractor: ExtractorKind,
    /// Hidden width of the MLP extractor.
    pub hidden: usize,
    pub init: InitMode,
    /// Learn one transform shared by all views.
    pub symmetric: bool,
    /// Cluster the training views into this many prototypes first.
    pub view_clusters: Option<usize>,
    /// Use view clusters for the initialisation only; joint training keeps
    /// one transform per original view.
    pub ivc: bool,
    /// Fraction of samples whose identity labels are pinned to clusters.
    pub labels_fraction: f64,
    /// Root seed; every component seed is derived from it.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            camel: CamelConfig::default(),
            decamel: DecamelConfig::default(),
            extractor: ExtractorKind::Linear,
            hidden: 16,
            init: InitMode::Camel,
            symmetric: false,
            view_clusters: None,
            ivc: false,
            labels_fraction: 0.0,
            seed: 0,
        }
    }
}

impl TrainOptions {
    /// Checks option combinations before any computation runs.
    pub fn validate(&self) -> Result<()> {
        if self.symmetric && (self.view_clusters.is_some() || self.ivc) {
            return Err(Error::Config("a symmetric metric cannot be combined with view clustering".into()));
        }
        if self.ivc && self.view_clusters.is_none() {
            return Err(Error::Config("the IVC mode needs a number of view clusters".into()));
        }
        if self.view_clusters == Some(0) {
            return Err(Error::Config("view_clusters must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.labels_fraction) {
            return Err(Error::Config("labels_fraction must lie in [0, 1]".into()));
        }
        if self.extractor == ExtractorKind::Mlp && self.hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        self.decamel.validate()
    }
}

/// A trained model plus the map from dataset views to its transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub trained: TrainedModel,
    /// Transform index used for each 0-based dataset view.
    pub view_map: Vec<usize>,
    /// View prototypes under the initial extractor, when views were clustered.
    pub prototypes_initial: Option<ViewPrototypeSet>,
    /// The same prototypes recomputed with the trained extractor.
    pub prototypes: Option<ViewPrototypeSet>,
    pub options: TrainOptions,
}

impl Model {
    /// One transform per dataset view.
    pub fn per_view_metric(&self) -> Result<AsymmetricMetric> {
        self.trained.metric.expand(&self.view_map)
    }

    /// Routes each listed 0-based view of `dataset` to the nearest trained
    /// prototype, extending the view map as needed.
    pub fn assign_unseen_views(&mut self, dataset: &Dataset, views: &[usize]) -> Result<()> {
        let prototypes = self
            .prototypes
            .as_ref()
            .ok_or_else(|| Error::Argument("unseen views need a model trained with view clusters".into()))?;
        let raw = ViewFeatures::from_dataset(dataset);
        for &v in views {
            let samples: Vec<DVector<f64>> = raw.indices_of_view(v).iter().map(|&i| raw.points()[i].clone()).collect();
            let mut j = assign_unseen_view(&samples, prototypes, &self.trained.extractor)?;
            if self.options.ivc {
                // Transforms are per original view; borrow the first member view's.
                j = prototypes.assignment.iter().position(|&a| a == j).expect("prototypes own views");
            }
            if self.view_map.len() <= v {
                self.view_map.resize(v + 1, usize::MAX);
            }
            log::info!("unseen view {} assigned to prototype {}", v + 1, j + 1);
            self.view_map[v] = j;
        }
        Ok(())
    }
}

impl Embedding for Model {
    fn embed(&self, raw: &DVector<f64>, view: usize) -> Result<DVector<f64>> {
        let mapped = self
            .view_map
            .get(view)
            .copied()
            .filter(|&j| j != usize::MAX)
            .ok_or_else(|| Error::Argument(format!("view {} is unknown to the model", view + 1)))?;
        self.trained.embed(raw, mapped)
    }
}

/// The first `round(fraction·N)` labelled samples of one seeded shuffle, so
/// larger fractions always contain the smaller selections.
pub fn select_labels(dataset: &Dataset, fraction: f64, seed: u64) -> Vec<(usize, u64)> {
    if fraction <= 0.0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let take = (fraction * dataset.len() as f64).round() as usize;
    let mut labels: Vec<(usize, u64)> = order
        .into_iter()
        .take(take)
        .filter_map(|i| dataset.samples()[i].identity.map(|id| (i, id)))
        .collect();
    labels.sort_unstable();
    labels
}

/// Xavier-uniform transforms, one per view.
pub fn random_metric(num_views: usize, dim: usize, target_dim: usize, seed: u64) -> AsymmetricMetric {
    let mut r = rng::seeded(seed);
    let bound = (6.0 / (dim + target_dim) as f64).sqrt();
    let transforms = (0..num_views)
        .map(|_| DMatrix::from_fn(dim, target_dim, |_, _| r.random_range(-bound..=bound)))
        .collect();
    AsymmetricMetric::new(transforms).expect("finite by construction")
}

fn clusters_under(
    features: &ViewFeatures,
    metric: &AsymmetricMetric,
    config: &CamelConfig,
    labels: &[(usize, u64)],
) -> Result<ClusterState> {
    let projected = metric.project_all(features)?;
    let k = config.k.min(features.len());
    kmeans_with_labels(&projected, k, labels, derive_seed(config.seed, "camel-kmeans"), config.kmeans_max_iter)
}

fn initialise(
    features: &ViewFeatures,
    options: &TrainOptions,
    camel: &CamelConfig,
    labels: &[(usize, u64)],
) -> Result<(AsymmetricMetric, ClusterState)> {
    let target = camel.target_dim.unwrap_or(features.dim());
    match options.init {
        InitMode::Camel => {
            let fit = camel_fit_pinned(features, camel, labels)?;
            log::info!(
                "metric initialisation: {} alternations, converged: {}",
                fit.alternations,
                fit.converged
            );
            Ok((fit.metric, fit.state))
        }
        InitMode::Identity => {
            camel.validate(features.dim())?;
            let eye = DMatrix::identity(features.dim(), target);
            let metric = AsymmetricMetric::new(vec![eye; features.num_views()])?;
            let state = clusters_under(features, &metric, camel, labels)?;
            Ok((metric, state))
        }
        InitMode::Random => {
            camel.validate(features.dim())?;
            let metric = random_metric(features.num_views(), features.dim(), target, derive_seed(options.seed, "random-init"));
            let state = clusters_under(features, &metric, camel, labels)?;
            Ok((metric, state))
        }
    }
}

/// Metric initialisation followed by joint training.
pub fn train(dataset: &Dataset, options: &TrainOptions) -> Result<Model> {
    options.validate()?;
    let raw = ViewFeatures::from_dataset(dataset);
    let v_count = raw.num_views();
    if let Some(j) = options.view_clusters {
        if j > v_count {
            return Err(Error::Config(format!("view_clusters must lie in 1..={v_count}")));
        }
    }
    let mut camel = options.camel.clone();
    camel.seed = derive_seed(options.seed, "camel");
    let mut decamel = options.decamel.clone();
    decamel.seed = derive_seed(options.seed, "decamel");
    decamel.lambda = camel.lambda;

    let labels = select_labels(dataset, options.labels_fraction, derive_seed(options.seed, "labels"));
    let extractor = Extractor::build(options.extractor, raw.dim(), options.hidden, derive_seed(options.seed, "extractor"));
    let features = extract_features(&extractor, &raw)?;

    let prototypes_initial = match options.view_clusters {
        Some(j) => Some(cluster_views(&raw, &extractor, j, derive_seed(options.seed, "views"))?),
        None => None,
    };

    let (train_raw, view_map, init) = if options.symmetric {
        let init = if options.init == InitMode::Camel {
            let fit = symmetric_fit_pinned(&features, &camel, &labels)?;
            (fit.metric.expand(&[0])?, fit.state)
        } else {
            initialise(&features.pooled(), options, &camel, &labels)?
        };
        (raw.pooled(), vec![0; v_count], init)
    } else if let Some(protos) = &prototypes_initial {
        let grouped = relabel_views(&features, protos)?;
        let (metric, state) = initialise(&grouped, options, &camel, &labels)?;
        if options.ivc {
            let expanded = metric.expand(&protos.assignment)?;
            (raw.clone(), (0..v_count).collect(), (expanded, state))
        } else {
            (relabel_views(&raw, protos)?, protos.assignment.clone(), (metric, state))
        }
    } else {
        (raw.clone(), (0..v_count).collect(), initialise(&features, options, &camel, &labels)?)
    };

    let trained = decamel_train(&train_raw, extractor, init, &decamel)?;
    let prototypes = match &prototypes_initial {
        Some(p) => {
            let reps = view_representations(&extract_features(&trained.extractor, &raw)?)?;
            Some(p.recomputed(&reps)?)
        }
        None => None,
    };
    Ok(Model {
        trained,
        view_map,
        prototypes_initial,
        prototypes,
        options: options.clone(),
    })
}
