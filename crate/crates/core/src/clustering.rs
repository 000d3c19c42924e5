//! Seeded k-means, semi-supervised pinning and the orthonormal indicator matrix.
//!
//! Cluster indices are 0-based in this module.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{check_dim, Error, Result};
use crate::rng;

pub(crate) fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of<'a>(dim: usize, pts: impl Iterator<Item = &'a DVector<f64>>) -> Option<DVector<f64>> {
    let mut sum = DVector::zeros(dim);
    let mut n = 0usize;
    for p in pts {
        sum += p;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    assignments: Vec<usize>,
    centroids: Vec<DVector<f64>>,
    pinned: BTreeMap<usize, usize>,
}

impl ClusterState {
    pub fn new(assignments: Vec<usize>, centroids: Vec<DVector<f64>>) -> Result<Self> {
        let state = Self {
            assignments,
            centroids,
            pinned: BTreeMap::new(),
        };
        state.validate()?;
        Ok(state)
    }

    /// Builds the state whose centroids are the means of the given partition.
    /// Empty clusters are re-seeded.
    pub fn from_assignments(points: &[DVector<f64>], assignments: Vec<usize>, k: usize) -> Result<Self> {
        if assignments.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: assignments.len(),
            });
        }
        if let Some(&a) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::Argument(format!("assignment {a} out of range for K={k}")));
        }
        let dim = points.first().map_or(0, |p| p.len());
        let mut state = Self {
            assignments,
            centroids: vec![DVector::zeros(dim); k],
            pinned: BTreeMap::new(),
        };
        state.update_centroids(points);
        Ok(state)
    }

    /// Marks samples as pinned to their current clusters.
    pub fn with_pinned(mut self, pinned: BTreeMap<usize, usize>) -> Result<Self> {
        self.pinned = pinned;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let k = self.centroids.len();
        if k == 0 {
            return Err(Error::Invariant("cluster state has no centroids".into()));
        }
        if let Some(&a) = self.assignments.iter().find(|&&a| a >= k) {
            return Err(Error::Invariant(format!("assignment {a} out of range for K={k}")));
        }
        let dim = self.centroids[0].len();
        if let Some(c) = self.centroids.iter().find(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: c.len(),
            });
        }
        for (&i, &c) in &self.pinned {
            if self.assignments.get(i) != Some(&c) {
                return Err(Error::Invariant(format!("pinned sample {i} is not in cluster {c}")));
            }
        }
        Ok(())
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn centroids(&self) -> &[DVector<f64>] {
        &self.centroids
    }

    pub fn pinned(&self) -> &BTreeMap<usize, usize> {
        &self.pinned
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn num_samples(&self) -> usize {
        self.assignments.len()
    }

    pub fn centroid_of(&self, sample: usize) -> &DVector<f64> {
        &self.centroids[self.assignments[sample]]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Sum of squared distances from every point to its centroid.
    pub fn objective(&self, points: &[DVector<f64>]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| sq_dist(p, &self.centroids[a]))
            .sum()
    }

    fn check_points(&self, points: &[DVector<f64>]) -> Result<()> {
        check_dim(self.assignments.len(), points.len())?;
        let Some(dim) = self.centroids.first().map(|c| c.len()) else {
            return Ok(());
        };
        for p in points {
            check_dim(dim, p.len())?;
        }
        Ok(())
    }

    /// Moves every unpinned point to its nearest centroid. A point only leaves
    /// its current cluster for a strictly closer one; fresh ties go to the
    /// lowest index. Returns whether any assignment changed.
    pub fn reassign(&mut self, points: &[DVector<f64>]) -> bool {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            if self.pinned.contains_key(&i) {
                continue;
            }
            let current = self.assignments[i];
            let mut best = current;
            let mut best_d = sq_dist(p, &self.centroids[current]);
            for (k, c) in self.centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            if best != current {
                self.assignments[i] = best;
                changed = true;
            }
        }
        changed
    }

    /// Recomputes centroids as cluster means. An empty cluster takes the
    /// unpinned point lying farthest from its own centroid, drawn from a
    /// cluster with at least two members (lowest sample index on ties).
    pub fn update_centroids(&mut self, points: &[DVector<f64>]) {
        let k = self.centroids.len();
        let dim = self.centroids[0].len();
        let recompute = |state: &mut Self, c: usize| {
            let members = points
                .iter()
                .zip(&state.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p);
            if let Some(m) = mean_of(dim, members) {
                state.centroids[c] = m;
            }
        };
        for c in 0..k {
            recompute(self, c);
        }
        for c in 0..k {
            let sizes = self.cluster_sizes();
            if sizes[c] > 0 {
                continue;
            }
            let mut donor: Option<(usize, f64)> = None;
            for (i, p) in points.iter().enumerate() {
                let a = self.assignments[i];
                if sizes[a] < 2 || self.pinned.contains_key(&i) {
                    continue;
                }
                let d = sq_dist(p, &self.centroids[a]);
                if donor.is_none_or(|(_, best)| d > best) {
                    donor = Some((i, d));
                }
            }
            let Some((i, _)) = donor else {
                log::warn!("cluster {c} is empty and no point can be moved into it");
                continue;
            };
            let from = self.assignments[i];
            self.assignments[i] = c;
            self.centroids[c] = points[i].clone();
            recompute(self, from);
        }
    }

    /// One assignment pass followed by one centroid update.
    pub fn refresh(&mut self, points: &[DVector<f64>]) -> Result<()> {
        self.check_points(points)?;
        self.reassign(points);
        self.update_centroids(points);
        Ok(())
    }

    /// Runs Lloyd iterations from the current state until the assignment is a
    /// fixpoint or `max_iter` reassignment passes have run. Returns the
    /// objective after every centroid update (first entry: the starting state).
    pub fn lloyd(&mut self, points: &[DVector<f64>], max_iter: usize) -> Result<Vec<f64>> {
        if max_iter == 0 {
            return Err(Error::Argument("max_iter must be at least 1".into()));
        }
        self.check_points(points)?;
        self.update_centroids(points);
        let mut trace = vec![self.objective(points)];
        for _ in 0..max_iter {
            if !self.reassign(points) {
                break;
            }
            self.update_centroids(points);
            trace.push(self.objective(points));
        }
        Ok(trace)
    }
}

/// Result of a k-means run with its per-iteration objective.
#[derive(Debug, Clone)]
pub struct KmeansRun {
    pub state: ClusterState,
    pub objectives: Vec<f64>,
}

fn check_input(points: &[DVector<f64>], k: usize, max_iter: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::Argument(format!(
            "K={k} exceeds the number of points {}",
            points.len()
        )));
    }
    if max_iter == 0 {
        return Err(Error::Argument("max_iter must be at least 1".into()));
    }
    let dim = points[0].len();
    for p in points {
        check_dim(dim, p.len())?;
    }
    Ok(dim)
}

/// k-means++ seeding: first centre uniform, the rest drawn proportionally to
/// the squared distance to the nearest chosen centre.
fn plus_plus_init(points: &[DVector<f64>], k: usize, rng: &mut rng::Rng) -> Vec<DVector<f64>> {
    let n = points.len();
    let mut centres = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centres.push(c);
    }
    centres
}

fn nearest(p: &DVector<f64>, centroids: &[DVector<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

pub fn kmeans_traced(points: &[DVector<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KmeansRun> {
    check_input(points, k, max_iter)?;
    let mut rng = rng::seeded(seed);
    let centroids = plus_plus_init(points, k, &mut rng);
    let assignments = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut state = ClusterState {
        assignments,
        centroids,
        pinned: BTreeMap::new(),
    };
    let objectives = state.lloyd(points, max_iter)?;
    Ok(KmeansRun { state, objectives })
}

pub fn kmeans(points: &[DVector<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterState> {
    kmeans_traced(points, k, seed, max_iter).map(|run| run.state)
}

/// The N×K matrix with `1/sqrt(n_k)` at (i, k) for every member i of cluster k.
pub fn build_indicator(state: &ClusterState) -> Result<DMatrix<f64>> {
    let sizes = state.cluster_sizes();
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Invariant(format!("cluster {k} is empty")));
    }
    let mut h = DMatrix::zeros(state.num_samples(), state.num_clusters());
    for (i, &a) in state.assignments.iter().enumerate() {
        h[(i, a)] = 1.0 / (sizes[a] as f64).sqrt();
    }
    Ok(h)
}

/// Appends one cluster per labelled identity (ascending identity order) and
/// pins its labelled samples there. `labels` pairs sample indices with identities.
pub fn pin_labelled_clusters(
    state: &ClusterState,
    labels: &[(usize, u64)],
    points: &[DVector<f64>],
) -> Result<ClusterState> {
    if labels.is_empty() {
        return Ok(state.clone());
    }
    state.check_points(points)?;
    let mut by_sample: BTreeMap<usize, u64> = BTreeMap::new();
    for &(i, id) in labels {
        if i >= state.num_samples() {
            return Err(Error::Argument(format!("labelled sample {i} is out of range")));
        }
        if let Some(prev) = by_sample.insert(i, id) {
            if prev != id {
                return Err(Error::Argument(format!(
                    "sample {i} is labelled both {prev} and {id}"
                )));
            }
        }
    }
    if let Some(&i) = by_sample.keys().find(|i| state.pinned.contains_key(i)) {
        return Err(Error::Argument(format!("sample {i} is already pinned")));
    }
    let identities: BTreeSet<u64> = by_sample.values().copied().collect();
    let base = state.num_clusters();
    let slot: BTreeMap<u64, usize> = identities
        .iter()
        .enumerate()
        .map(|(j, &id)| (id, base + j))
        .collect();

    let mut next = state.clone();
    let dim = points[0].len();
    next.centroids.extend(std::iter::repeat_n(DVector::zeros(dim), identities.len()));
    for (&i, id) in &by_sample {
        let c = slot[id];
        next.assignments[i] = c;
        next.pinned.insert(i, c);
    }
    next.update_centroids(points);
    Ok(next)
}

/// k-means over the unlabelled points only, with at most `k` clusters, then
/// one pinned cluster per labelled identity and a joint Lloyd pass.
pub fn kmeans_with_labels(
    points: &[DVector<f64>],
    k: usize,
    labels: &[(usize, u64)],
    seed: u64,
    max_iter: usize,
) -> Result<ClusterState> {
    if labels.is_empty() {
        return kmeans(points, k, seed, max_iter);
    }
    check_input(points, k.min(points.len()), max_iter)?;
    let labelled: BTreeSet<usize> = labels.iter().map(|&(i, _)| i).collect();
    if let Some(&i) = labelled.iter().find(|&&i| i >= points.len()) {
        return Err(Error::Argument(format!("labelled sample {i} is out of range")));
    }
    let free: Vec<usize> = (0..points.len()).filter(|i| !labelled.contains(i)).collect();
    // Labelled samples get a placeholder cluster until they are pinned.
    let mut assignments = vec![0; points.len()];
    let mut centroids = Vec::new();
    if !free.is_empty() {
        let subset: Vec<DVector<f64>> = free.iter().map(|&i| points[i].clone()).collect();
        let run = kmeans(&subset, k.min(free.len()), seed, max_iter)?;
        for (&i, &a) in free.iter().zip(run.assignments()) {
            assignments[i] = a;
        }
        centroids = run.centroids;
    }
    let base = ClusterState {
        assignments,
        centroids,
        pinned: BTreeMap::new(),
    };
    let mut state = pin_labelled_clusters(&base, labels, points)?;
    state.lloyd(points, max_iter)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut r)))
            .collect()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![v(&[0.0, 1.0]), v(&[2.0, 3.0]), v(&[4.0, -1.0])];
        let s = kmeans(&pts, 1, 0, 10).unwrap();
        assert_eq!(s.assignments(), &[0, 0, 0]);
        assert!((&s.centroids()[0] - v(&[2.0, 1.0])).norm() < 1e-15);
    }

    fn brute_force_two_partition(pts: &[DVector<f64>]) -> f64 {
        let n = pts.len();
        let mut best = f64::INFINITY;
        // Fix point 0 in side A to skip mirrored partitions.
        for mask in 0u32..(1 << (n - 1)) {
            let side = |i: usize| i > 0 && mask & (1 << (i - 1)) != 0;
            let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|&i| !side(i));
            if b.is_empty() {
                continue;
            }
            let cost = |idx: &[usize]| {
                let mean = idx.iter().fold(DVector::zeros(pts[0].len()), |acc, &i| acc + &pts[i])
                    / idx.len() as f64;
                idx.iter().map(|&i| (&pts[i] - &mean).norm_squared()).sum::<f64>()
            };
            best = best.min(cost(&a) + cost(&b));
        }
        best
    }

    #[test]
    fn two_blobs_match_brute_force() {
        let mut r = rng::seeded(5);
        let mut pts = Vec::new();
        for i in 0..12 {
            let cx = if i % 2 == 0 { 10.0 } else { -10.0 };
            let angle: f64 = r.random::<f64>() * std::f64::consts::TAU;
            let rad: f64 = 0.1 * r.random::<f64>();
            pts.push(v(&[cx + rad * angle.cos(), rad * angle.sin()]));
        }
        let run = kmeans_traced(&pts, 2, 1, 100).unwrap();
        let a = run.state.assignments();
        for i in 0..12 {
            assert_eq!(a[i] == a[0], i % 2 == 0);
        }
        let opt = brute_force_two_partition(&pts);
        let got = run.state.objective(&pts);
        assert!((got - opt).abs() <= 1e-12 * opt.max(1.0), "{got} vs {opt}");
    }

    #[test]
    fn identical_points_terminate_with_zero_objective() {
        let pts = vec![v(&[1.0, 1.0]); 5];
        let s = kmeans(&pts, 2, 3, 50).unwrap();
        assert_eq!(s.objective(&pts), 0.0);
        assert!(s.cluster_sizes().iter().all(|&n| n > 0));
    }

    #[test]
    fn bad_k_is_an_argument_error() {
        let pts = vec![v(&[1.0]), v(&[2.0])];
        assert!(matches!(kmeans(&pts, 3, 0, 10), Err(Error::Argument(_))));
        assert!(matches!(kmeans(&pts, 0, 0, 10), Err(Error::Argument(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let pts = random_points(60, 3, 2);
        assert_eq!(kmeans(&pts, 5, 9, 100).unwrap(), kmeans(&pts, 5, 9, 100).unwrap());
    }

    #[test]
    fn indicator_examples() {
        let s = ClusterState::new(vec![0, 0], vec![v(&[0.0])]).unwrap();
        let h = build_indicator(&s).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert_eq!(h, DMatrix::from_column_slice(2, 1, &[r, r]));

        let s = ClusterState::new(vec![0, 0, 1], vec![v(&[0.0]), v(&[1.0])]).unwrap();
        let h = build_indicator(&s).unwrap();
        assert!((h.transpose() * &h - DMatrix::identity(2, 2)).norm() <= 1e-12);
    }

    #[test]
    fn indicator_rejects_empty_cluster() {
        let s = ClusterState::new(vec![0, 0], vec![v(&[0.0]), v(&[1.0])]).unwrap();
        assert!(matches!(build_indicator(&s), Err(Error::Invariant(_))));
    }

    #[test]
    fn empty_cluster_is_reseeded_from_farthest_point() {
        let pts = vec![v(&[0.0]), v(&[1.0]), v(&[5.0])];
        let s = ClusterState::from_assignments(&pts, vec![0, 0, 0], 2).unwrap();
        assert_eq!(s.assignments(), &[0, 0, 1]);
        assert_eq!(s.centroids()[1], v(&[5.0]));
        assert!((s.centroids()[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pin_without_labels_is_a_no_op() {
        let pts = random_points(6, 2, 1);
        let s = kmeans(&pts, 2, 0, 10).unwrap();
        assert_eq!(pin_labelled_clusters(&s, &[], &pts).unwrap(), s);
    }

    #[test]
    fn pin_appends_one_cluster_per_identity() {
        let pts = random_points(10, 2, 4);
        let s = kmeans(&pts, 3, 0, 10).unwrap();
        let pinned = pin_labelled_clusters(&s, &[(0, 7), (1, 7), (2, 9), (3, 9)], &pts).unwrap();
        assert_eq!(pinned.num_clusters(), 5);
        let a = pinned.assignments();
        assert_eq!((a[0], a[1], a[2], a[3]), (3, 3, 4, 4));
        assert_eq!(pinned.pinned().len(), 4);
    }

    #[test]
    fn conflicting_labels_are_rejected() {
        let pts = random_points(4, 2, 4);
        let s = kmeans(&pts, 2, 0, 10).unwrap();
        let err = pin_labelled_clusters(&s, &[(0, 1), (0, 2)], &pts);
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn lloyd_never_moves_pinned_samples() {
        let pts = random_points(30, 2, 8);
        let s = kmeans(&pts, 4, 0, 10).unwrap();
        let labels: Vec<(usize, u64)> = (0..6).map(|i| (i * 5, (i % 2) as u64)).collect();
        let mut pinned = pin_labelled_clusters(&s, &labels, &pts).unwrap();
        let before: Vec<usize> = labels.iter().map(|&(i, _)| pinned.assignments()[i]).collect();
        pinned.lloyd(&pts, 100).unwrap();
        let after: Vec<usize> = labels.iter().map(|&(i, _)| pinned.assignments()[i]).collect();
        assert_eq!(before, after);
    }

    proptest! {
        #[test]
        fn objective_is_monotone(seed in 0u64..1000, n in 2usize..60, k in 1usize..8, dim in 1usize..5) {
            let k = k.min(n);
            let pts = random_points(n, dim, seed);
            let run = kmeans_traced(&pts, k, seed, 100).unwrap();
            for w in run.objectives.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
            }
        }

        #[test]
        fn indicator_is_orthonormal(seed in 0u64..1000, n in 1usize..60, k in 1usize..8) {
            let k = k.min(n);
            let pts = random_points(n, 2, seed);
            let s = kmeans(&pts, k, seed, 50).unwrap();
            let h = build_indicator(&s).unwrap();
            prop_assert!((h.transpose() * &h - DMatrix::identity(k, k)).norm() <= 1e-12);
        }

        #[test]
        fn indicator_trace_identity(seed in 0u64..1000, n in 14usize..60, dim in 1usize..6) {
            // Σ_k Σ_{i∈C_k} ‖y_i − c_k‖² = Tr(YᵀY) − Tr(HᵀYᵀYH), Y holding points as columns.
            let k = 7;
            let pts = random_points(n, dim, seed);
            let mut r = rng::seeded(seed + 1);
            let mut assign: Vec<usize> = (0..n).map(|i| if i < k { i } else { r.random_range(0..k) }).collect();
            assign.swap(0, n - 1);
            let s = ClusterState::from_assignments(&pts, assign, k).unwrap();
            let h = build_indicator(&s).unwrap();
            let y = DMatrix::from_columns(&pts);
            let gram = y.transpose() * &y;
            let rhs = gram.trace() - (h.transpose() * &gram * &h).trace();
            let lhs = s.objective(&pts);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1e-300));
        }
    }

    #[test]
    fn labelled_samples_form_extra_clusters() {
        let pts: Vec<DVector<f64>> = (0..8).map(|i| v(&[10.0 * (i / 4) as f64, 0.1 * (i % 4) as f64])).collect();
        let labels = [(0, 7), (1, 7), (4, 3)];
        let s = kmeans_with_labels(&pts, 2, &labels, 0, 50).unwrap();
        assert_eq!(s.num_clusters(), 4);
        // Identities are appended in ascending order: 3 then 7.
        assert_eq!(s.assignments()[4], 2);
        assert_eq!(s.assignments()[0], 3);
        assert_eq!(s.assignments()[1], 3);
        assert_eq!(s.pinned().len(), 3);
    }

    #[test]
    fn fully_labelled_data_has_only_pinned_clusters() {
        let pts = vec![v(&[0.0]), v(&[0.1]), v(&[10.0]), v(&[10.1])];
        let labels: Vec<(usize, u64)> = (0..4).map(|i| (i, (i / 2) as u64)).collect();
        let s = kmeans_with_labels(&pts, 3, &labels, 0, 50).unwrap();
        assert_eq!(s.num_clusters(), 2);
        assert_eq!(s.assignments(), &[0, 0, 1, 1]);
        assert!(build_indicator(&s).is_ok());
    }
}
