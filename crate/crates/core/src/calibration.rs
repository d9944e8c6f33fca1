//! Calibration-set construction.
//!
//! Stage 1 clusters the pool's feature embeddings with `k = 2` and keeps the
//! larger cluster. Stage 2 clusters the survivors into `n/2` groups and takes
//! the two samples nearest each centroid. A variance-based stability score
//! is available as a diagnostic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub id: String,
    /// Raw model input, `[tokens × channels]`.
    pub payload: Tensor,
    /// Flat embedding used for clustering.
    pub feature: Tensor,
}

/// Maps a raw payload to a flat feature vector.
pub trait FeatureExtractor {
    fn extract(&self, payload: &Tensor) -> Result<Tensor>;
}

/// Per-channel mean, std, skewness, excess kurtosis, min and max, concatenated
/// channel by channel. Channels are the columns of a 2-D payload; a 1-D
/// payload is one channel.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomentExtractor;

pub const MOMENT_FEATURES_PER_CHANNEL: usize = 6;

impl FeatureExtractor for MomentExtractor {
    fn extract(&self, payload: &Tensor) -> Result<Tensor> {
        if payload.is_empty() {
            return Err(Error::DegenerateInput("empty payload".into()));
        }
        let (rows, cols) = if payload.ndim() == 1 {
            (payload.len(), 1)
        } else {
            (payload.rows(), payload.cols())
        };
        let n = rows as f64;
        let data = payload.data();
        let mut out = Vec::with_capacity(cols * MOMENT_FEATURES_PER_CHANNEL);
        for c in 0..cols {
            let col = (0..rows).map(|r| data[r * cols + c]);
            let mean = col.clone().sum::<f64>() / n;
            let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in col {
                let d = v - mean;
                m2 += d * d;
                m3 += d * d * d;
                m4 += d * d * d * d;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
            let std = m2.sqrt();
            let (skew, kurt) = if m2 > 0.0 {
                (m3 / (m2 * std), m4 / (m2 * m2) - 3.0)
            } else {
                (0.0, 0.0)
            };
            out.extend_from_slice(&[mean, std, skew, kurt, lo, hi]);
        }
        Ok(Tensor::from_vec(out))
    }
}

pub fn embed_features(payload: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    extractor.extract(payload)
}

/// Pool of candidate calibration samples with consistent feature width.
#[derive(Debug, Clone, Default)]
pub struct CalibrationPool {
    pub samples: Vec<CalibrationSample>,
    /// Ids of samples known to be outliers (synthetic ground truth; may be empty).
    pub planted_outliers: Vec<String>,
}

impl CalibrationPool {
    pub fn from_payloads(
        payloads: Vec<(String, Tensor)>,
        extractor: &dyn FeatureExtractor,
    ) -> Result<Self> {
        let samples = payloads
            .into_iter()
            .map(|(id, payload)| {
                let feature = extractor.extract(&payload)?;
                Ok(CalibrationSample { id, payload, feature })
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = Self {
            samples,
            planted_outliers: Vec::new(),
        };
        pool.feature_matrix()?;
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&CalibrationSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Sub-pool with the given ids, in pool order.
    pub fn subset(&self, ids: &[String]) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.id))
                .cloned()
                .collect(),
            planted_outliers: self
                .planted_outliers
                .iter()
                .filter(|id| ids.contains(id))
                .cloned()
                .collect(),
        }
    }

    /// Features stacked as `[m × d]`.
    pub fn feature_matrix(&self) -> Result<Tensor> {
        let d = self
            .samples
            .first()
            .map(|s| s.feature.len())
            .ok_or_else(|| Error::param("empty calibration pool"))?;
        let mut data = Vec::with_capacity(self.samples.len() * d);
        for s in &self.samples {
            if s.feature.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "feature_matrix",
                    left: vec![d],
                    right: vec![s.feature.len()],
                });
            }
            data.extend_from_slice(s.feature.data());
        }
        Tensor::new(vec![self.samples.len(), d], data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    /// `[k × d]`.
    pub centroids: Tensor,
    /// Cluster index per sample, in input order.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for a point; ties go to the lower centroid index.
fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_seed(features: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let (m, d) = (features.rows(), features.cols());
    let mut chosen = vec![rng.index(m)];
    let mut dist: Vec<f64> = (0..m)
        .map(|i| sq_dist(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &di) in dist.iter().enumerate() {
                acc += di;
                if di > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`; take the last positive-weight point.
            pick.unwrap_or_else(|| dist.iter().rposition(|&x| x > 0.0).unwrap())
        } else {
            // Every remaining point coincides with a chosen centre: duplicate the
            // lowest unchosen index so the extra cluster simply stays empty.
            (0..m).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for i in 0..m {
            dist[i] = dist[i].min(sq_dist(features.row(i), features.row(next)));
        }
    }
    let mut centroids = Tensor::zeros(&[k, d]);
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(features.row(i));
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments stop
/// changing or after `max_iter` updates; the returned assignment is always
/// nearest-centroid for the returned centroids.
pub fn kmeans(features: &Tensor, k: usize, rng: &mut Rng, max_iter: usize) -> Result<ClusterResult> {
    let (m, d) = features.dims2()?;
    if k == 0 || k > m {
        return Err(Error::param(format!("k-means needs 1 <= k <= {m}, got k={k}")));
    }
    features.ensure_finite("k-means features")?;
    let mut centroids = kmeans_pp_seed(features, k, rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    loop {
        let mut next = Vec::with_capacity(m);
        let mut inertia = 0.0;
        for i in 0..m {
            let (c, dist) = nearest(features.row(i), &centroids);
            next.push(c);
            inertia += dist;
        }
        history.push(inertia);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        if iterations == max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s / n;
                }
            }
        }
    }

    let inertia = *history.last().unwrap();
    Ok(ClusterResult {
        k,
        centroids,
        assignment,
        inertia,
        inertia_history: history,
        iterations,
        converged,
    })
}

pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    /// Kept ids, in pool order.
    pub kept: Vec<String>,
    pub clusters: ClusterResult,
    pub kept_cluster: usize,
}

/// Keeps the larger of two k-means clusters. On an exact size tie, keeps the
/// cluster holding the lexicographically smallest id.
pub fn stage1_suppress(pool: &CalibrationPool, rng: &mut Rng) -> Result<Stage1Result> {
    if pool.len() < 2 {
        return Err(Error::param(format!(
            "outlier suppression needs at least 2 samples, got {}",
            pool.len()
        )));
    }
    let clusters = kmeans(&pool.feature_matrix()?, 2, rng, KMEANS_MAX_ITER)?;
    let sizes = clusters.cluster_sizes();
    let kept_cluster = match sizes[0].cmp(&sizes[1]) {
        Ordering::Greater => 0,
        Ordering::Less => 1,
        Ordering::Equal => {
            let smallest = (0..pool.len())
                .min_by(|&a, &b| pool.samples[a].id.cmp(&pool.samples[b].id))
                .unwrap();
            clusters.assignment[smallest]
        }
    };
    let kept = pool
        .samples
        .iter()
        .zip(&clusters.assignment)
        .filter(|(_, &c)| c == kept_cluster)
        .map(|(s, _)| s.id.clone())
        .collect();
    Ok(Stage1Result {
        kept,
        clusters,
        kept_cluster,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub cluster: usize,
    /// 1-based position by distance to the cluster centroid.
    pub rank: usize,
    /// Chosen to fill the deficit left by clusters with fewer than two members.
    pub backfilled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected_ids: Vec<String>,
    pub stage1_kept: Vec<String>,
    pub stage1_clusters: Option<ClusterResult>,
    pub stage2_clusters: ClusterResult,
    pub provenance: Vec<Provenance>,
}

/// Members of `cluster` ordered by (distance to centroid, id).
fn ranked_members(pool: &CalibrationPool, clusters: &ClusterResult, cluster: usize) -> Vec<usize> {
    let centroid = clusters.centroids.row(cluster);
    let mut members: Vec<(usize, f64)> = clusters
        .members(cluster)
        .into_iter()
        .map(|i| (i, sq_dist(pool.samples[i].feature.data(), centroid)))
        .collect();
    members.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| pool.samples[a.0].id.cmp(&pool.samples[b.0].id))
    });
    members.into_iter().map(|(i, _)| i).collect()
}

/// Clusters `kept` into `n_target / 2` groups and takes the two samples
/// nearest each centroid. Clusters with fewer than two members leave a
/// deficit that is filled from the largest clusters' next-nearest samples.
pub fn stage2_select(kept: &CalibrationPool, n_target: usize, rng: &mut Rng) -> Result<SelectionResult> {
    if n_target == 0 || n_target % 2 != 0 {
        return Err(Error::param(format!(
            "calibration set size must be a positive even number, got {n_target}"
        )));
    }
    if n_target > kept.len() {
        return Err(Error::param(format!(
            "cannot select {n_target} samples from {} candidates",
            kept.len()
        )));
    }
    let k = n_target / 2;
    let clusters = kmeans(&kept.feature_matrix()?, k, rng, KMEANS_MAX_ITER)?;
    let ranked: Vec<Vec<usize>> = (0..k).map(|c| ranked_members(kept, &clusters, c)).collect();

    let mut provenance = Vec::with_capacity(n_target);
    let mut taken = vec![false; kept.len()];
    for (c, members) in ranked.iter().enumerate() {
        for (pos, &i) in members.iter().take(2).enumerate() {
            taken[i] = true;
            provenance.push(Provenance {
                id: kept.samples[i].id.clone(),
                cluster: c,
                rank: pos + 1,
                backfilled: false,
            });
        }
    }

    if provenance.len() < n_target {
        let mut by_size: Vec<usize> = (0..k).collect();
        by_size.sort_by(|&a, &b| ranked[b].len().cmp(&ranked[a].len()).then(a.cmp(&b)));
        'fill: for c in by_size {
            for (pos, &i) in ranked[c].iter().enumerate() {
                if provenance.len() == n_target {
                    break 'fill;
                }
                if !taken[i] {
                    taken[i] = true;
                    provenance.push(Provenance {
                        id: kept.samples[i].id.clone(),
                        cluster: c,
                        rank: pos + 1,
                        backfilled: true,
                    });
                }
            }
        }
    }

    Ok(SelectionResult {
        selected_ids: provenance.iter().map(|p| p.id.clone()).collect(),
        stage1_kept: kept.ids(),
        stage1_clusters: None,
        stage2_clusters: clusters,
        provenance,
    })
}

/// Stage 1 then stage 2, with both clusterings recorded.
pub fn build_calibration_set(pool: &CalibrationPool, n_target: usize, rng: &mut Rng) -> Result<SelectionResult> {
    let stage1 = stage1_suppress(pool, rng)?;
    let kept = pool.subset(&stage1.kept);
    let mut result = stage2_select(&kept, n_target, rng)?;
    result.stage1_clusters = Some(stage1.clusters);
    Ok(result)
}

/// Uniformly random subset of `n` ids, the baseline selection.
pub fn random_subset(pool: &CalibrationPool, n: usize, rng: &mut Rng) -> Result<Vec<String>> {
    if n == 0 || n > pool.len() {
        return Err(Error::param(format!("cannot draw {n} of {} samples", pool.len())));
    }
    let mut ids = pool.ids();
    rng.shuffle(&mut ids);
    ids.truncate(n);
    Ok(ids)
}

/// A model that exposes per-layer token representations `[tokens × channels]`.
pub trait TokenTaps {
    fn token_representations(&self, input: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEntry {
    pub id: String,
    pub layer_variances: Vec<f64>,
    pub v_bar: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub eps: f64,
    pub entries: Vec<StabilityEntry>,
}

impl StabilityReport {
    /// Ids from most to least stable.
    pub fn ranking(&self) -> Vec<String> {
        let mut order: Vec<&StabilityEntry> = self.entries.iter().collect();
        order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.id.cmp(&b.id)));
        order.into_iter().map(|e| e.id.clone()).collect()
    }
}

pub const DEFAULT_STABILITY_EPS: f64 = 1e-8;

/// Mean over tokens of the population variance across channels.
pub fn token_variance(t: &Tensor) -> Result<f64> {
    let (tokens, channels) = t.dims2()?;
    let c = channels as f64;
    let total: f64 = (0..tokens)
        .map(|n| {
            let row = t.row(n);
            let mean = row.iter().sum::<f64>() / c;
            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c
        })
        .sum();
    Ok(total / tokens as f64)
}

/// Score `1 / (v̄ + eps)` per sample, where `v̄` averages [`token_variance`]
/// over the model's layers.
pub fn stability_scores(pool: &CalibrationPool, model: &dyn TokenTaps, eps: f64) -> Result<StabilityReport> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("stability eps must be > 0, got {eps}")));
    }
    let entries = pool
        .samples
        .iter()
        .map(|s| {
            let layers = model.token_representations(&s.payload)?;
            if layers.is_empty() {
                return Err(Error::DegenerateInput("model exposed no layers".into()));
            }
            let layer_variances = layers.iter().map(token_variance).collect::<Result<Vec<_>>>()?;
            let v_bar = layer_variances.iter().sum::<f64>() / layer_variances.len() as f64;
            Ok(StabilityEntry {
                id: s.id.clone(),
                layer_variances,
                v_bar,
                score: 1.0 / (v_bar + eps),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StabilityReport { eps, entries })
}
