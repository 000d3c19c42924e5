//! JSON model documents and CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::camel::AsymmetricMetric;
use crate::clustering::ClusterState;
use crate::decamel::TrainedModel;
use crate::error::{Error, Result};
use crate::eval::Projection2d;
use crate::extractor::{Extractor, ExtractorKind, FeatureExtractor};
use crate::pipeline::{Model, TrainOptions};
use crate::views::ViewPrototypeSet;

pub const MODEL_FORMAT: &str = "decamel-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExtractorDoc {
    kind: ExtractorKind,
    dims: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClustersDoc {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    pinned: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    num_views: usize,
    dim: usize,
    target_dim: usize,
    lambda: f64,
    /// Each transform as a row-major `dim × target_dim` array.
    transforms: Vec<Vec<f64>>,
    extractor: ExtractorDoc,
    view_map: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prototypes_initial: Option<ViewPrototypeSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prototypes: Option<ViewPrototypeSet>,
    clusters: ClustersDoc,
    config: TrainOptions,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn model_to_json(model: &Model) -> String {
    let metric = &model.trained.metric;
    let state = &model.trained.state;
    let doc = ModelDoc {
        format: MODEL_FORMAT.into(),
        num_views: metric.num_views(),
        dim: metric.dim(),
        target_dim: metric.target_dim(),
        lambda: model.options.camel.lambda,
        transforms: metric.transforms().iter().map(row_major).collect(),
        extractor: ExtractorDoc {
            kind: model.trained.extractor.kind(),
            dims: model.trained.extractor.dims(),
            params: model.trained.extractor.params().as_slice().to_vec(),
        },
        view_map: model.view_map.clone(),
        prototypes_initial: model.prototypes_initial.clone(),
        prototypes: model.prototypes.clone(),
        clusters: ClustersDoc {
            assignments: state.assignments().to_vec(),
            centroids: state.centroids().iter().map(|c| c.as_slice().to_vec()).collect(),
            pinned: state.pinned().iter().map(|(&i, &c)| (i, c)).collect(),
        },
        config: model.options.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("model serialises") + "\n"
}

pub fn model_from_json(text: &str) -> Result<Model> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if doc.format != MODEL_FORMAT {
        return Err(Error::Format(format!("unsupported model format `{}`", doc.format)));
    }
    if doc.transforms.len() != doc.num_views {
        return Err(Error::Format("transform count differs from num_views".into()));
    }
    let transforms = doc
        .transforms
        .iter()
        .map(|t| {
            if t.len() != doc.dim * doc.target_dim {
                return Err(Error::Format("transform has the wrong number of entries".into()));
            }
            Ok(DMatrix::from_row_slice(doc.dim, doc.target_dim, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let metric = AsymmetricMetric::new(transforms).map_err(|e| Error::Format(e.to_string()))?;
    let extractor = Extractor::from_parts(doc.extractor.kind, &doc.extractor.dims, &doc.extractor.params)
        .map_err(|e| Error::Format(e.to_string()))?;
    if extractor.output_dim() != metric.dim() {
        return Err(Error::Format("extractor output does not match the transforms".into()));
    }
    let centroids = doc.clusters.centroids.iter().map(|c| DVector::from_column_slice(c)).collect();
    let mut state = ClusterState::new(doc.clusters.assignments, centroids).map_err(|e| Error::Format(e.to_string()))?;
    if !doc.clusters.pinned.is_empty() {
        state = state.with_pinned(doc.clusters.pinned.into_iter().collect()).map_err(|e| Error::Format(e.to_string()))?;
    }
    if doc.view_map.iter().any(|&j| j >= metric.num_views()) {
        return Err(Error::Format("view map points past the transforms".into()));
    }
    Ok(Model {
        trained: TrainedModel {
            extractor,
            metric,
            state,
            loss_trace: Vec::new(),
        },
        view_map: doc.view_map,
        prototypes_initial: doc.prototypes_initial,
        prototypes: doc.prototypes,
        options: doc.config,
    })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), model_to_json(model)).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    model_from_json(&text)
}

/// `step,loss` rows, steps counted from 1.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(out, "{},{l:?}", i + 1);
    }
    out
}

/// `x,y,view,identity` rows with 1-based views and empty unknown identities.
pub fn projection_csv(projection: &Projection2d, views: &[usize], identities: &[Option<u64>]) -> String {
    let mut out = String::from("x,y,view,identity\n");
    for ((c, v), id) in projection.coords.iter().zip(views).zip(identities) {
        let id = id.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{:?},{:?},{v},{id}", c[0], c[1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::decamel::DecamelConfig;
    use crate::camel::CamelConfig;
    use crate::pipeline::train;

    fn small_model() -> Model {
        let ds = generate_synthetic(&SyntheticConfig { num_identities: 6, ..Default::default() }).unwrap();
        let options = TrainOptions {
            camel: CamelConfig { k: 6, ..Default::default() },
            decamel: DecamelConfig { iterations: 30, batch_size: 16, refresh_period: 10, ..Default::default() },
            view_clusters: Some(2),
            labels_fraction: 0.2,
            ..Default::default()
        };
        let mut model = train(&ds, &options).unwrap();
        model.trained.loss_trace.clear();
        model
    }

    #[test]
    fn model_round_trips_exactly() {
        let model = small_model();
        let text = model_to_json(&model);
        let back = model_from_json(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(model_to_json(&back), text);
    }

    #[test]
    fn rejects_foreign_documents() {
        assert!(matches!(model_from_json("{}"), Err(Error::Format(_))));
        let text = model_to_json(&small_model()).replace(MODEL_FORMAT, "other/9");
        assert!(matches!(model_from_json(&text), Err(Error::Format(_))));
    }

    #[test]
    fn loss_csv_layout() {
        assert_eq!(loss_trace_csv(&[1.5, 0.25]), "step,loss\n1,1.5\n2,0.25\n");
    }
}
