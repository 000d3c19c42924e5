//! Multi-view sample containers, CSV interchange and the synthetic generator.
//!
//! View ids and identity ids are 1-based at this boundary, exactly as they
//! appear in dataset files. Everything downstream indexes views by `view - 1`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Largest rotation angle (radians) of a fully distorted view.
pub const MAX_ROTATION_ANGLE: f64 = 1.0;
/// Scale of the per-view offset, relative to `identity_spread`.
pub const OFFSET_RATIO: f64 = 0.3;
/// Rotation angle and offset ratio of the per-view perturbation inside a view family.
pub const FAMILY_JITTER: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewedSample {
    pub raw: Vec<f64>,
    /// 1-based camera view.
    pub view: usize,
    pub identity: Option<u64>,
}

impl ViewedSample {
    pub fn new(raw: Vec<f64>, view: usize, identity: Option<u64>) -> Self {
        Self { raw, view, identity }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<ViewedSample>,
    num_views: usize,
    dim: usize,
}

impl Dataset {
    /// Builds a dataset, checking that every view in `1..=num_views` is
    /// populated and that all samples share one finite dimension.
    pub fn new(samples: Vec<ViewedSample>, num_views: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invariant("dataset has no samples".into()));
        }
        if num_views == 0 {
            return Err(Error::Invariant("dataset must declare at least one view".into()));
        }
        let dim = samples[0].raw.len();
        if dim == 0 {
            return Err(Error::Invariant("samples must have at least one feature".into()));
        }
        let mut seen = vec![false; num_views];
        for (i, s) in samples.iter().enumerate() {
            if s.raw.len() != dim {
                return Err(Error::Invariant(format!(
                    "sample {i} has dimension {}, expected {dim}",
                    s.raw.len()
                )));
            }
            if s.view == 0 || s.view > num_views {
                return Err(Error::Invariant(format!(
                    "sample {i} has view {} outside 1..={num_views}",
                    s.view
                )));
            }
            if s.raw.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invariant(format!("sample {i} has a non-finite entry")));
            }
            seen[s.view - 1] = true;
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(Error::Invariant(format!("view {} has no samples", v + 1)));
        }
        Ok(Self {
            samples,
            num_views,
            dim,
        })
    }

    /// Like [`Dataset::new`] with the view count inferred as the largest view id.
    pub fn from_samples(samples: Vec<ViewedSample>) -> Result<Self> {
        let v = samples.iter().map(|s| s.view).max().unwrap_or(0);
        Self::new(samples, v)
    }

    pub fn samples(&self) -> &[ViewedSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn into_samples(self) -> Vec<ViewedSample> {
        self.samples
    }

    pub fn views(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.view).collect()
    }

    pub fn identities(&self) -> Vec<Option<u64>> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    /// Distinct labelled identities in ascending order.
    pub fn identity_set(&self) -> BTreeSet<u64> {
        self.samples.iter().filter_map(|s| s.identity).collect()
    }

    /// Number of samples per view, indexed by `view - 1`.
    pub fn view_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_views];
        for s in &self.samples {
            counts[s.view - 1] += 1;
        }
        counts
    }

    /// Keeps only the samples whose view satisfies `keep`, renumbering the
    /// surviving views densely in ascending order. Returns the new dataset and
    /// the original view id of each new view.
    pub fn select_views(&self, keep: impl Fn(usize) -> bool) -> Result<(Dataset, Vec<usize>)> {
        let kept: Vec<usize> = (1..=self.num_views).filter(|&v| keep(v)).collect();
        if kept.is_empty() {
            return Err(Error::Argument("view selection is empty".into()));
        }
        let mut remap = vec![0; self.num_views + 1];
        for (new, &old) in kept.iter().enumerate() {
            remap[old] = new + 1;
        }
        let samples = self
            .samples
            .iter()
            .filter(|s| remap[s.view] != 0)
            .map(|s| ViewedSample::new(s.raw.clone(), remap[s.view], s.identity))
            .collect();
        Ok((Dataset::new(samples, kept.len())?, kept))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_identities: usize,
    pub num_views: usize,
    pub images_per_identity_per_view: usize,
    pub dim: usize,
    pub identity_spread: f64,
    pub within_identity_noise: f64,
    pub view_distortion_strength: f64,
    pub seed: u64,
    /// Groups views into families sharing a base distortion; view `v`
    /// belongs to family `(v - 1) % families`. `None` gives every view its
    /// own independent distortion.
    pub view_families: Option<usize>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            num_views: 2,
            images_per_identity_per_view: 4,
            dim: 8,
            identity_spread: 0.6,
            within_identity_noise: 0.18,
            view_distortion_strength: 0.8,
            seed: 0,
            view_families: None,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("num_views", self.num_views),
            ("images_per_identity_per_view", self.images_per_identity_per_view),
            ("dim", self.dim),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.identity_spread > 0.0 && self.identity_spread.is_finite()) {
            return Err(Error::Config("identity_spread must be positive".into()));
        }
        if !(self.within_identity_noise > 0.0 && self.within_identity_noise.is_finite()) {
            return Err(Error::Config("within_identity_noise must be positive".into()));
        }
        if !(self.view_distortion_strength >= 0.0 && self.view_distortion_strength.is_finite()) {
            return Err(Error::Config("view_distortion_strength must be non-negative".into()));
        }
        if self.view_families == Some(0) {
            return Err(Error::Config("view_families must be at least 1".into()));
        }
        Ok(())
    }
}

/// Random rotation `exp(S)` where `S` is a random skew-symmetric matrix
/// rescaled so its largest rotation angle is `angle`.
fn random_rotation(dim: usize, angle: f64, rng: &mut rng::Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    if dim < 2 || angle == 0.0 {
        return DMatrix::identity(dim, dim);
    }
    let skew = &g - g.transpose();
    let spectral = skew.singular_values().max();
    if spectral <= f64::EPSILON {
        return DMatrix::identity(dim, dim);
    }
    (skew * (angle / spectral)).exp()
}

fn random_vector(dim: usize, scale: f64, rng: &mut rng::Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Per-view affine distortion `x -> A_v x + b_v`. View 1 is the undistorted reference.
pub(crate) fn view_distortions(
    config: &SyntheticConfig,
    rng: &mut rng::Rng,
) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let d = config.dim;
    let s = config.view_distortion_strength;
    let families = config.view_families.unwrap_or(config.num_views);
    let offset_scale = OFFSET_RATIO * config.identity_spread;
    let bases: Vec<(DMatrix<f64>, DVector<f64>)> = (0..families)
        .map(|f| {
            if f == 0 {
                (DMatrix::identity(d, d), DVector::zeros(d))
            } else {
                let r = random_rotation(d, MAX_ROTATION_ANGLE, rng);
                let o = random_vector(d, offset_scale, rng);
                (r, o)
            }
        })
        .collect();
    let jitter = config.view_families.is_some();
    (1..=config.num_views)
        .map(|v| {
            if v == 1 {
                return (DMatrix::identity(d, d), DVector::zeros(d));
            }
            let (base_r, base_o) = &bases[(v - 1) % families];
            let (r, o) = if jitter {
                let jr = random_rotation(d, FAMILY_JITTER, rng);
                let jo = random_vector(d, FAMILY_JITTER * offset_scale, rng);
                (base_r * jr, base_o + jo)
            } else {
                (base_r.clone(), base_o.clone())
            };
            let a = r * s + DMatrix::identity(d, d) * (1.0 - s);
            (a, o * s)
        })
        .collect()
}

/// Draws `P * V * n` samples: identity prototypes are isotropic with scale
/// `identity_spread`, each image adds isotropic noise, and view `v` applies its
/// affine distortion. Samples are ordered by identity, then view, then image.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let d = config.dim;
    let prototypes: Vec<DVector<f64>> = (0..config.num_identities)
        .map(|_| random_vector(d, config.identity_spread, &mut rng))
        .collect();
    let distortions = view_distortions(config, &mut rng);

    let mut samples = Vec::with_capacity(
        config.num_identities * config.num_views * config.images_per_identity_per_view,
    );
    for (p, proto) in prototypes.iter().enumerate() {
        for (v, (a, b)) in distortions.iter().enumerate() {
            for _ in 0..config.images_per_identity_per_view {
                let noisy = proto + random_vector(d, config.within_identity_noise, &mut rng);
                let x = a * noisy + b;
                samples.push(ViewedSample::new(
                    x.as_slice().to_vec(),
                    v + 1,
                    Some(p as u64 + 1),
                ));
            }
        }
    }
    Dataset::new(samples, config.num_views)
}

/// Parses the CSV interchange format: header `view,identity,f1,...,fd`.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.len() < 3 || &header[0] != "view" || &header[1] != "identity" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be `view,identity,f1,...`".into(),
        });
    }
    let dim = header.len() - 2;

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let lineno = record.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| Error::Parse { line: lineno, msg };
        if record.len() != dim + 2 {
            return Err(err(format!("expected {} cells, found {}", dim + 2, record.len())));
        }
        let view: usize = record[0]
            .parse()
            .map_err(|_| err(format!("bad view id `{}`", &record[0])))?;
        if view < 1 {
            return Err(err("view ids start at 1".into()));
        }
        let identity = match &record[1] {
            "" => None,
            s => Some(s.parse::<u64>().map_err(|_| err(format!("bad identity `{s}`")))?),
        };
        let mut raw = Vec::with_capacity(dim);
        for (j, cell) in record.iter().skip(2).enumerate() {
            let x: f64 = cell
                .parse()
                .map_err(|_| err(format!("bad value `{cell}` in f{}", j + 1)))?;
            if !x.is_finite() {
                return Err(err(format!("non-finite value in f{}", j + 1)));
            }
            raw.push(x);
        }
        samples.push(ViewedSample::new(raw, view, identity));
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    Dataset::from_samples(samples)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_dataset(&text)
}

/// Renders a dataset as CSV. Floats use the shortest representation that
/// parses back to the same bits.
pub fn format_dataset(dataset: &Dataset) -> String {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["view".to_string(), "identity".to_string()];
    header.extend((1..=dataset.dim()).map(|j| format!("f{j}")));
    let mut rows = vec![header];
    for s in dataset.samples() {
        let mut row = vec![s.view.to_string(), s.identity.map(|id| id.to_string()).unwrap_or_default()];
        row.extend(s.raw.iter().map(|x| format!("{x:?}")));
        rows.push(row);
    }
    for row in rows {
        writer.write_record(&row).expect("writing to memory cannot fail");
    }
    String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("ascii output")
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), format_dataset(dataset)).map_err(|e| Error::io(path.as_ref(), e))
}

/// Splits by identity so no identity lands in both halves.
pub fn split_train_test(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument("train_fraction must lie in (0, 1)".into()));
    }
    if dataset.samples().iter().any(|s| s.identity.is_none()) {
        return Err(Error::Protocol("identity split needs every sample labelled".into()));
    }
    let ids: Vec<u64> = dataset.identity_set().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::Protocol("identity split needs at least two identities".into()));
    }
    let n_train = ((train_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let mut rng = rng::seeded(seed);

    let partition = |train: &BTreeSet<u64>| -> (Vec<ViewedSample>, Vec<ViewedSample>) {
        dataset
            .samples()
            .iter()
            .cloned()
            .partition(|s| train.contains(&s.identity.unwrap_or_default()))
    };
    let covers = |part: &[ViewedSample]| {
        let views: BTreeSet<usize> = part.iter().map(|s| s.view).collect();
        views.len() == dataset.num_views()
    };

    // Reshuffle a bounded number of times looking for halves that keep every view.
    let mut fallback = None;
    for _ in 0..64 {
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut rng);
        let train: BTreeSet<u64> = shuffled[..n_train].iter().copied().collect();
        let (a, b) = partition(&train);
        if covers(&a) && covers(&b) {
            return Ok((
                Dataset::new(a, dataset.num_views())?,
                Dataset::new(b, dataset.num_views())?,
            ));
        }
        fallback.get_or_insert((a, b));
    }
    // Not possible to keep all views: fall back to dense renumbering.
    let (a, b) = fallback.expect("at least one shuffle ran");
    Ok((Dataset::from_samples(a)?, Dataset::from_samples(b)?))
}
