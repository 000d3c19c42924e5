//! Camera-view representations, view clustering and unseen-view assignment.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, sq_dist};
use crate::decamel::extract_features;
use crate::error::{check_dim, Error, Result};
use crate::extractor::FeatureExtractor;
use crate::features::ViewFeatures;

/// Per-dimension mean and population standard deviation of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRepresentation {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl ViewRepresentation {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a DVector<f64>>) -> Result<Self> {
        let points: Vec<&DVector<f64>> = points.into_iter().collect();
        let first = points
            .first()
            .ok_or_else(|| Error::Argument("view has no samples".into()))?;
        let n = points.len() as f64;
        let mut mean = DVector::zeros(first.len());
        for p in &points {
            check_dim(mean.len(), p.len())?;
            mean += *p;
        }
        mean /= n;
        let mut var = DVector::<f64>::zeros(mean.len());
        for p in &points {
            let diff = *p - &mean;
            var += diff.component_mul(&diff);
        }
        let std = (var / n).map(f64::sqrt);
        Ok(Self { mean, std })
    }

    /// `[mean; std]`.
    pub fn concat(&self) -> DVector<f64> {
        let mut w = DVector::zeros(2 * self.mean.len());
        w.rows_mut(0, self.mean.len()).copy_from(&self.mean);
        w.rows_mut(self.mean.len(), self.std.len()).copy_from(&self.std);
        w
    }
}

pub fn view_representation<'a>(points: impl IntoIterator<Item = &'a DVector<f64>>) -> Result<ViewRepresentation> {
    ViewRepresentation::from_points(points)
}

/// Representation of every view, indexed by view.
pub fn view_representations(features: &ViewFeatures) -> Result<Vec<ViewRepresentation>> {
    (0..features.num_views())
        .map(|v| {
            let idx = features.indices_of_view(v);
            ViewRepresentation::from_points(idx.iter().map(|&i| &features.points()[i]))
                .map_err(|_| Error::Argument(format!("view index {v} has no samples")))
        })
        .collect()
}

/// `sqrt(½(‖m_u − m_v‖² + ‖σ_u − σ_v‖²))`.
pub fn view_distance(a: &ViewRepresentation, b: &ViewRepresentation) -> Result<f64> {
    check_dim(a.mean.len(), b.mean.len())?;
    check_dim(a.std.len(), b.std.len())?;
    Ok((0.5 * (sq_dist(&a.mean, &b.mean) + sq_dist(&a.std, &b.std))).sqrt())
}

/// View-cluster centroids in representation space and the prototype of each view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPrototypeSet {
    pub centroids: Vec<Vec<f64>>,
    /// Prototype index of each training view.
    pub assignment: Vec<usize>,
}

impl ViewPrototypeSet {
    pub fn num_prototypes(&self) -> usize {
        self.centroids.len()
    }

    /// Prototype centroids recomputed from the given per-view representations.
    pub fn recomputed(&self, reps: &[ViewRepresentation]) -> Result<Self> {
        check_dim(self.assignment.len(), reps.len())?;
        let centroids = (0..self.num_prototypes())
            .map(|j| {
                let members: Vec<DVector<f64>> = reps
                    .iter()
                    .zip(&self.assignment)
                    .filter(|(_, &a)| a == j)
                    .map(|(r, _)| r.concat())
                    .collect();
                if members.is_empty() {
                    return Err(Error::State(format!("prototype {j} owns no view")));
                }
                let sum = members.iter().fold(DVector::zeros(members[0].len()), |acc, w| acc + w);
                Ok((sum / members.len() as f64).as_slice().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            centroids,
            assignment: self.assignment.clone(),
        })
    }
}

/// k-means over the view representations of the extracted features.
/// Prototypes are numbered by first appearance in view order, so `J = V`
/// maps every view to itself.
pub fn cluster_views(
    raw: &ViewFeatures,
    extractor: &impl FeatureExtractor,
    num_prototypes: usize,
    seed: u64,
) -> Result<ViewPrototypeSet> {
    let v_count = raw.num_views();
    if num_prototypes == 0 || num_prototypes > v_count {
        return Err(Error::Argument(format!(
            "number of view clusters must lie in 1..={v_count}"
        )));
    }
    let reps = view_representations(&extract_features(extractor, raw)?)?;
    let points: Vec<DVector<f64>> = reps.iter().map(ViewRepresentation::concat).collect();
    let state = kmeans(&points, num_prototypes, seed, 100)?;

    let mut renumber = vec![usize::MAX; num_prototypes];
    let mut next = 0;
    for &a in state.assignments() {
        if renumber[a] == usize::MAX {
            renumber[a] = next;
            next += 1;
        }
    }
    let mut centroids = vec![Vec::new(); num_prototypes];
    for (old, &new) in renumber.iter().enumerate() {
        if new == usize::MAX {
            return Err(Error::State(format!("view cluster {old} owns no view")));
        }
        centroids[new] = state.centroids()[old].as_slice().to_vec();
    }
    Ok(ViewPrototypeSet {
        centroids,
        assignment: state.assignments().iter().map(|&a| renumber[a]).collect(),
    })
}

/// Replaces each sample's view by its view's prototype index.
pub fn relabel_views(features: &ViewFeatures, prototypes: &ViewPrototypeSet) -> Result<ViewFeatures> {
    let views = features
        .views()
        .iter()
        .map(|&v| {
            prototypes
                .assignment
                .get(v)
                .copied()
                .ok_or_else(|| Error::State(format!("view index {v} has no prototype")))
        })
        .collect::<Result<Vec<_>>>()?;
    features.relabelled(views, prototypes.num_prototypes())
}

/// Nearest prototype to the representation of `raw` under `extractor`;
/// ties go to the lowest index.
pub fn assign_unseen_view(
    raw: &[DVector<f64>],
    prototypes: &ViewPrototypeSet,
    extractor: &impl FeatureExtractor,
) -> Result<usize> {
    if raw.is_empty() {
        return Err(Error::Argument("unseen view has no samples".into()));
    }
    let extracted: Vec<DVector<f64>> = raw.iter().map(|m| extractor.forward(m)).collect();
    let w = ViewRepresentation::from_points(&extracted)?.concat();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, b) in prototypes.centroids.iter().enumerate() {
        check_dim(w.len(), b.len())?;
        let d = sq_dist(&w, &DVector::from_column_slice(b));
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    Ok(best)
}
