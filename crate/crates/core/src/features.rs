use nalgebra::DVector;

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};

/// Feature vectors tagged with 0-based view indices. This is the working
/// representation for every learner; [`Dataset`] keeps the 1-based file ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatures {
    points: Vec<DVector<f64>>,
    views: Vec<usize>,
    num_views: usize,
}

impl ViewFeatures {
    pub fn new(points: Vec<DVector<f64>>, views: Vec<usize>, num_views: usize) -> Result<Self> {
        check_dim(points.len(), views.len())?;
        if points.is_empty() {
            return Err(Error::Argument("no feature vectors".into()));
        }
        let dim = points[0].len();
        for p in &points {
            check_dim(dim, p.len())?;
        }
        if let Some(&v) = views.iter().find(|&&v| v >= num_views) {
            return Err(Error::Argument(format!(
                "view index {v} out of range for {num_views} views"
            )));
        }
        Ok(Self {
            points,
            views,
            num_views,
        })
    }

    /// Raw features of a dataset.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self {
            points: dataset
                .samples()
                .iter()
                .map(|s| DVector::from_column_slice(&s.raw))
                .collect(),
            views: dataset.samples().iter().map(|s| s.view - 1).collect(),
            num_views: dataset.num_views(),
        }
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn views(&self) -> &[usize] {
        &self.views
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same points under a different view labelling.
    pub fn relabelled(&self, views: Vec<usize>, num_views: usize) -> Result<Self> {
        Self::new(self.points.clone(), views, num_views)
    }

    /// Every point assigned to a single view.
    pub fn pooled(&self) -> Self {
        Self {
            points: self.points.clone(),
            views: vec![0; self.points.len()],
            num_views: 1,
        }
    }

    pub fn indices_of_view(&self, view: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.views[i] == view).collect()
    }
}
