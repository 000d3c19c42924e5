//! Cross-view retrieval: distances, ranking, CMC/mAP protocols, the S-value
//! cluster-structure ratio and 2-D PCA export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::camel::AsymmetricMetric;
use crate::clustering::sq_dist;
use crate::dataset::Dataset;
use crate::decamel::TrainedModel;
use crate::error::{check_dim, Error, Result};
use crate::extractor::FeatureExtractor;
use crate::rng;

/// Maps a raw sample seen from a 0-based view into the shared space.
pub trait Embedding {
    fn embed(&self, raw: &DVector<f64>, view: usize) -> Result<DVector<f64>>;
}

/// Raw features compared directly.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl Embedding for Euclidean {
    fn embed(&self, raw: &DVector<f64>, _view: usize) -> Result<DVector<f64>> {
        Ok(raw.clone())
    }
}

impl Embedding for AsymmetricMetric {
    fn embed(&self, raw: &DVector<f64>, view: usize) -> Result<DVector<f64>> {
        self.project(raw, view)
    }
}

impl Embedding for TrainedModel {
    fn embed(&self, raw: &DVector<f64>, view: usize) -> Result<DVector<f64>> {
        check_dim(self.extractor.input_dim(), raw.len())?;
        self.metric.project(&self.extractor.forward(raw), view)
    }
}

/// `‖U_{v_i}ᵀx_i − U_{v_j}ᵀx_j‖` under any embedding.
pub fn asym_distance(
    xi: &DVector<f64>,
    vi: usize,
    xj: &DVector<f64>,
    vj: usize,
    model: &impl Embedding,
) -> Result<f64> {
    let a = model.embed(xi, vi)?;
    let b = model.embed(xj, vj)?;
    check_dim(a.len(), b.len())?;
    Ok(sq_dist(&a, &b).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub probe: usize,
    /// Gallery positions by ascending distance.
    pub order: Vec<usize>,
    /// Relevance of each entry of `order`.
    pub relevant: Vec<bool>,
}

impl RankedResult {
    /// 1-based rank of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }
}

/// Orders the gallery by distance to the probe; ties keep gallery order.
pub fn rank_gallery(
    probe: usize,
    query: &DVector<f64>,
    gallery: &[DVector<f64>],
    relevance: &[bool],
) -> Result<RankedResult> {
    if gallery.is_empty() {
        return Err(Error::Argument("empty gallery".into()));
    }
    check_dim(gallery.len(), relevance.len())?;
    let dist: Vec<f64> = gallery
        .iter()
        .map(|g| {
            check_dim(query.len(), g.len())?;
            Ok(sq_dist(query, g))
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let relevant = order.iter().map(|&g| relevance[g]).collect();
    Ok(RankedResult {
        probe,
        order,
        relevant,
    })
}

fn first_hits(results: &[RankedResult]) -> Result<Vec<usize>> {
    results
        .iter()
        .map(|r| {
            r.first_hit().ok_or_else(|| {
                Error::Protocol(format!("probe {} has no relevant gallery item", r.probe))
            })
        })
        .collect()
}

/// `cmc[k-1]` is the fraction of probes whose first relevant item has rank ≤ k.
pub fn cmc(results: &[RankedResult], max_rank: usize) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    let hits = first_hits(results)?;
    let n = results.len() as f64;
    Ok((1..=max_rank)
        .map(|k| hits.iter().filter(|&&h| h <= k).count() as f64 / n)
        .collect())
}

/// Average precision: mean of precision at the rank of each relevant item.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn mean_ap(results: &[RankedResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    let mut total = 0.0;
    for r in results {
        total += average_precision(&r.relevant).ok_or_else(|| {
            Error::Protocol(format!("probe {} has no relevant gallery item", r.probe))
        })?;
    }
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotMode {
    SingleShot,
    MultiShot,
}

impl fmt::Display for ShotMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SingleShot => "single",
            Self::MultiShot => "multi",
        })
    }
}

impl FromStr for ShotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single-shot" => Ok(Self::SingleShot),
            "multi" | "multi-shot" => Ok(Self::MultiShot),
            other => Err(Error::Config(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOptions {
    pub mode: ShotMode,
    pub repetitions: usize,
    pub seed: u64,
    pub max_rank: usize,
    /// Restrict probes to these 0-based views; `None` probes every view.
    pub probe_views: Option<BTreeSet<usize>>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            mode: ShotMode::MultiShot,
            repetitions: 10,
            seed: 0,
            max_rank: 20,
            probe_views: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ShotMode,
    pub seed: u64,
    pub repetitions: usize,
    pub num_probes: usize,
    pub excluded_probes: usize,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub s_value: f64,
    pub s_value_degenerate: bool,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// Embeds every sample of `dataset` with its 0-based view.
pub fn embed_dataset(dataset: &Dataset, model: &impl Embedding) -> Result<Vec<DVector<f64>>> {
    dataset
        .samples()
        .iter()
        .map(|s| model.embed(&DVector::from_column_slice(&s.raw), s.view - 1))
        .collect()
}

/// Cross-view retrieval over a labelled set: every labelled image of an
/// identity seen in at least two views probes the images of all other views.
pub fn run_protocol(dataset: &Dataset, model: &impl Embedding, options: &ProtocolOptions) -> Result<EvalReport> {
    if options.repetitions == 0 || options.max_rank == 0 {
        return Err(Error::Config("repetitions and max_rank must be at least 1".into()));
    }
    let embedded = embed_dataset(dataset, model)?;
    let samples = dataset.samples();
    let labelled: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].identity.is_some()).collect();
    let identity = |i: usize| samples[i].identity.expect("labelled");
    let view = |i: usize| samples[i].view - 1;
    let views_in_set: BTreeSet<usize> = labelled.iter().map(|&i| view(i)).collect();
    if views_in_set.len() < 2 {
        return Err(Error::Protocol("test set must span at least two labelled views".into()));
    }

    let mut views_of: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
    for &i in &labelled {
        views_of.entry(identity(i)).or_default().insert(view(i));
    }
    let wanted = |i: usize| options.probe_views.as_ref().is_none_or(|set| set.contains(&view(i)));
    let candidates: Vec<usize> = labelled.iter().copied().filter(|&i| wanted(i)).collect();
    let probes: Vec<usize> = candidates.iter().copied().filter(|&i| views_of[&identity(i)].len() >= 2).collect();
    let excluded = candidates.len() - probes.len();
    if excluded > 0 {
        log::warn!("{excluded} probe images belong to identities seen in a single view and were skipped");
    }
    if probes.is_empty() {
        return Err(Error::Protocol("no identity is visible in two views".into()));
    }

    let gallery_for = |probe_view: usize, pick: &dyn Fn(&[usize]) -> Vec<usize>| -> Vec<usize> {
        let pool: Vec<usize> = labelled.iter().copied().filter(|&g| view(g) != probe_view).collect();
        pick(&pool)
    };
    let evaluate = |gallery_of: &dyn Fn(usize) -> Vec<usize>| -> Result<(Vec<f64>, f64)> {
        let mut results = Vec::with_capacity(probes.len());
        for &p in &probes {
            let gallery = gallery_of(view(p));
            let vecs: Vec<DVector<f64>> = gallery.iter().map(|&g| embedded[g].clone()).collect();
            let rel: Vec<bool> = gallery.iter().map(|&g| identity(g) == identity(p)).collect();
            results.push(rank_gallery(p, &embedded[p], &vecs, &rel)?);
        }
        Ok((cmc(&results, options.max_rank)?, mean_ap(&results)?))
    };

    let (curve, map, repetitions) = match options.mode {
        ShotMode::MultiShot => {
            let (c, m) = evaluate(&|pv| gallery_for(pv, &|pool: &[usize]| pool.to_vec()))?;
            (c, m, 1)
        }
        ShotMode::SingleShot => {
            let mut r = rng::seeded(options.seed);
            let mut curve = vec![0.0; options.max_rank];
            let mut map = 0.0;
            for _ in 0..options.repetitions {
                // One image per identity for each probe view, drawn once per repetition.
                let mut chosen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for &pv in &views_in_set {
                    let pool: Vec<usize> = labelled.iter().copied().filter(|&g| view(g) != pv).collect();
                    let mut by_id: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
                    for g in pool {
                        by_id.entry(identity(g)).or_default().push(g);
                    }
                    let mut pick: Vec<usize> = by_id
                        .values()
                        .map(|imgs| *imgs.choose(&mut r).expect("non-empty"))
                        .collect();
                    pick.sort_unstable();
                    chosen.insert(pv, pick);
                }
                let (c, m) = evaluate(&|pv| chosen[&pv].clone())?;
                for (acc, x) in curve.iter_mut().zip(c) {
                    *acc += x;
                }
                map += m;
            }
            let n = options.repetitions as f64;
            (curve.into_iter().map(|x| x / n).collect(), map / n, options.repetitions)
        }
    };

    let labelled_vecs: Vec<DVector<f64>> = labelled.iter().map(|&i| embedded[i].clone()).collect();
    let labels: Vec<u64> = labelled.iter().map(|&i| identity(i)).collect();
    let s = s_value(&labelled_vecs, &labels)?;
    Ok(EvalReport {
        mode: options.mode,
        seed: options.seed,
        repetitions,
        num_probes: probes.len(),
        excluded_probes: excluded,
        cmc: curve,
        map,
        s_value: s.value,
        s_value_degenerate: s.degenerate,
    })
}

pub const S_VALUE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SValue {
    pub value: f64,
    /// Set when the intra-identity spread hit the floor.
    pub degenerate: bool,
}

/// Mean distance between identity centroids over mean distance from each
/// image to its own identity centroid.
pub fn s_value(points: &[DVector<f64>], identities: &[u64]) -> Result<SValue> {
    check_dim(points.len(), identities.len())?;
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &id) in identities.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Argument("S-value needs at least two identities".into()));
    }
    let dim = points[0].len();
    let mut centroid_of = BTreeMap::new();
    for (&id, members) in &groups {
        let sum = members.iter().fold(DVector::zeros(dim), |acc, &i| acc + &points[i]);
        centroid_of.insert(id, sum / members.len() as f64);
    }
    let centroids: Vec<&DVector<f64>> = centroid_of.values().collect();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            inter += sq_dist(centroids[a], centroids[b]).sqrt();
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    let intra = points
        .iter()
        .zip(identities)
        .map(|(p, id)| sq_dist(p, &centroid_of[id]).sqrt())
        .sum::<f64>()
        / points.len() as f64;
    let degenerate = intra < S_VALUE_FLOOR;
    Ok(SValue {
        value: inter / intra.max(S_VALUE_FLOOR),
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each of the two principal directions.
    pub explained: [f64; 2],
}

/// Projects centred points onto their top two principal directions.
pub fn pca_project_2d(points: &[DVector<f64>]) -> Result<Projection2d> {
    if points.len() < 2 {
        return Err(Error::Argument("PCA needs at least two points".into()));
    }
    let n = points.len() as f64;
    let dim = points[0].len();
    for p in points {
        check_dim(dim, p.len())?;
    }
    let mean = points.iter().fold(DVector::zeros(dim), |acc, p| acc + p) / n;
    let centred: Vec<DVector<f64>> = points.iter().map(|p| p - &mean).collect();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for c in &centred {
        cov.ger(1.0 / n, c, c, 1.0);
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let total: f64 = eig.eigenvalues.iter().map(|x| x.max(0.0)).sum();
    if total <= 0.0 {
        log::warn!("PCA input has no variance; exporting zeros");
        return Ok(Projection2d {
            coords: vec![[0.0; 2]; points.len()],
            explained: [0.0; 2],
        });
    }
    let mut axes: Vec<DVector<f64>> = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut axis = eig.eigenvectors.column(k).into_owned();
        let pivot = axis.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            axis.neg_mut();
        }
        axes.push(axis);
        explained[slot] = eig.eigenvalues[k].max(0.0);
    }
    let coords = centred
        .iter()
        .map(|c| {
            let x = axes[0].dot(c);
            let y = axes.get(1).map_or(0.0, |a| a.dot(c));
            [x, y]
        })
        .collect();
    Ok(Projection2d { coords, explained })
}

/// Second over first singular value of the centred point matrix.
pub fn singular_value_ratio(points: &[DVector<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Argument("need at least two points".into()));
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(DVector::zeros(points[0].len()), |acc, p| acc + p) / n;
    let cols: Vec<DVector<f64>> = points.iter().map(|p| p - &mean).collect();
    let mut s: Vec<f64> = DMatrix::from_columns(&cols).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s.len() < 2 || s[0] == 0.0 {
        return Ok(0.0);
    }
    Ok(s[1] / s[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ViewedSample;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn identity_metric_is_euclidean() {
        let m = AsymmetricMetric::identity(2, 2);
        let d = asym_distance(&v(&[0.0, 0.0]), 0, &v(&[3.0, 4.0]), 1, &m).unwrap();
        assert_eq!(d, 5.0);
        assert!(asym_distance(&v(&[0.0, 0.0]), 0, &v(&[3.0, 4.0]), 2, &m).is_err());
    }

    #[test]
    fn ranking_examples() {
        let r = rank_gallery(0, &v(&[0.0]), &[v(&[5.0])], &[true]).unwrap();
        assert_eq!(r.order, vec![0]);
        let r = rank_gallery(0, &v(&[1.0]), &[v(&[3.0]), v(&[1.0]), v(&[-1.0])], &[false, true, false]).unwrap();
        assert_eq!(r.order, vec![1, 0, 2]);
        assert!(rank_gallery(0, &v(&[1.0]), &[], &[]).is_err());
    }

    #[test]
    fn cmc_examples() {
        let at = |rank: usize| RankedResult {
            probe: 0,
            order: (0..4).collect(),
            relevant: (0..4).map(|i| i + 1 == rank).collect(),
        };
        assert_eq!(cmc(&[at(1), at(1)], 3).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(cmc(&[at(1), at(3)], 4).unwrap(), vec![0.5, 0.5, 1.0, 1.0]);
        assert!(matches!(cmc(&[at(9)], 3), Err(Error::Protocol(_))));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true]), Some(1.0));
        assert_eq!(average_precision(&[false, true, false]), Some(0.5));
        assert_eq!(average_precision(&[true, true]), Some(1.0));
        assert_eq!(average_precision(&[false]), None);
    }

    #[test]
    fn s_value_examples() {
        let pts = vec![v(&[0.0, 1.0]), v(&[0.0, -1.0]), v(&[2.0, 1.0]), v(&[2.0, -1.0])];
        let ids = [1, 1, 2, 2];
        let s = s_value(&pts, &ids).unwrap();
        assert!((s.value - 2.0).abs() < 1e-15);
        assert!(!s.degenerate);

        let scaled: Vec<DVector<f64>> = pts.iter().map(|p| p * 3.5).collect();
        assert!((s_value(&scaled, &ids).unwrap().value - 2.0).abs() < 1e-12);

        let collapsed = vec![v(&[0.0]), v(&[0.0]), v(&[1.0])];
        let s = s_value(&collapsed, &[1, 1, 2]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.value, 1.0 / S_VALUE_FLOOR);

        assert!(s_value(&pts, &[1, 1, 1, 1]).is_err());
    }

    #[test]
    fn pca_of_collinear_points() {
        let pts: Vec<DVector<f64>> = (0..5).map(|i| v(&[i as f64, 2.0 * i as f64, -(i as f64)])).collect();
        let p = pca_project_2d(&pts).unwrap();
        assert!(p.explained[1].abs() < 1e-12);
        let zeros = pca_project_2d(&[v(&[1.0, 1.0]), v(&[1.0, 1.0])]).unwrap();
        assert_eq!(zeros.coords, vec![[0.0; 2]; 2]);
    }

    fn two_identity_set() -> Dataset {
        let s = |raw: &[f64], view, id| ViewedSample::new(raw.to_vec(), view, Some(id));
        Dataset::new(
            vec![s(&[0.0, 0.0], 1, 1), s(&[10.0, 0.0], 1, 2), s(&[0.1, 0.0], 2, 1), s(&[10.1, 0.0], 2, 2)],
            2,
        )
        .unwrap()
    }

    #[test]
    fn separated_set_is_perfect() {
        let options = ProtocolOptions { repetitions: 1, ..Default::default() };
        let r = run_protocol(&two_identity_set(), &Euclidean, &options).unwrap();
        assert_eq!(r.rank1(), 1.0);
        assert_eq!(r.map, 1.0);
        let single = ProtocolOptions { mode: ShotMode::SingleShot, ..options };
        let s = run_protocol(&two_identity_set(), &Euclidean, &single).unwrap();
        assert_eq!(s.cmc, r.cmc);
        assert_eq!(s.map, r.map);
    }

    #[test]
    fn one_view_identities_are_excluded() {
        let mut samples = two_identity_set().into_samples();
        samples.push(ViewedSample::new(vec![50.0, 0.0], 1, Some(3)));
        let ds = Dataset::new(samples, 2).unwrap();
        let r = run_protocol(&ds, &Euclidean, &ProtocolOptions::default()).unwrap();
        assert_eq!(r.excluded_probes, 1);
        assert_eq!(r.num_probes, 4);
    }
}
