//! Representative-vector selection and cosine-similarity classification.
//!
//! A sampled prompt distribution (unit rows of `[N, C]`) is reduced to a
//! single unit representative vector per class. Five selection methods are
//! supported; all operate on Euclidean distances between the unit rows, which
//! are monotone in cosine distance:
//!
//! - `mean`: arithmetic mean, renormalized.
//! - `pca`: first principal component of the mean-centered rows, with the
//!   sign chosen so the component has non-negative inner product with the
//!   mean (eigenvectors are only defined up to scale).
//! - `kde`: Gaussian-kernel density values as weights, weighted mean.
//! - `mean_shift`: flat-kernel mode seeking; mean of the largest cluster.
//! - `dbscan`: density-based clustering; mean of the largest cluster, which
//!   drops outliers far from the density cores.
//!
//! Clustering determinism: points are scanned in ascending index order with
//! FIFO expansion, border points join the first cluster that reaches them,
//! and equally-sized largest clusters are broken toward the one containing
//! the lowest-index point. DBSCAN neighborhoods are closed (`dist <= eps`)
//! and include the query point in the core-point count. If DBSCAN labels
//! every point noise, selection falls back to the plain mean and reports the
//! fallback in the provenance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::PromptDistribution;
use crate::tensor::{dist_sq, dot, norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMethod {
    Mean,
    Pca,
    Kde,
    MeanShift,
    Dbscan,
}

impl SelectorMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mean" => Ok(SelectorMethod::Mean),
            "pca" => Ok(SelectorMethod::Pca),
            "kde" => Ok(SelectorMethod::Kde),
            "mean-shift" | "mean_shift" => Ok(SelectorMethod::MeanShift),
            "dbscan" => Ok(SelectorMethod::Dbscan),
            other => Err(Error::InvalidConfig(format!(
                "unknown selector method {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectorMethod::Mean => "mean",
            SelectorMethod::Pca => "pca",
            SelectorMethod::Kde => "kde",
            SelectorMethod::MeanShift => "mean_shift",
            SelectorMethod::Dbscan => "dbscan",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub method: SelectorMethod,
    pub kde_bandwidth: f64,
    pub mean_shift_bandwidth: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_samples: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            method: SelectorMethod::Dbscan,
            kde_bandwidth: 0.3,
            mean_shift_bandwidth: 2.0,
            dbscan_eps: 0.5,
            dbscan_min_samples: 15,
        }
    }
}

impl SelectorConfig {
    pub fn with_method(method: SelectorMethod) -> Self {
        SelectorConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kde_bandwidth <= 0.0
            || self.mean_shift_bandwidth <= 0.0
            || self.dbscan_eps <= 0.0
        {
            return Err(Error::InvalidConfig(
                "selector bandwidths and eps must be positive".into(),
            ));
        }
        if self.dbscan_min_samples < 1 {
            return Err(Error::InvalidConfig(
                "dbscan min_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// How many input vectors contributed to a representative vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionProvenance {
    pub used: usize,
    pub discarded: usize,
    pub fallback: bool,
}

impl SelectionProvenance {
    fn all(n: usize) -> Self {
        SelectionProvenance {
            used: n,
            discarded: 0,
            fallback: false,
        }
    }
}

/// Selected representative vectors for one object class, unit-normalized.
#[derive(Debug, Clone)]
pub struct RepresentativePair {
    pub normal: Tensor,
    pub abnormal: Tensor,
    pub config: SelectorConfig,
    pub normal_provenance: SelectionProvenance,
    pub abnormal_provenance: SelectionProvenance,
}

impl RepresentativePair {
    pub fn select(dist: &PromptDistribution, config: &SelectorConfig) -> Result<Self> {
        config.validate()?;
        let (normal, normal_provenance) =
            select_representative(&dist.normal_features, config)?;
        let (abnormal, abnormal_provenance) =
            select_representative(&dist.abnormal_features, config)?;
        Ok(RepresentativePair {
            normal,
            abnormal,
            config: *config,
            normal_provenance,
            abnormal_provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    /// Representative vectors stacked as rows `[2, C]`, normal first.
    pub fn stacked(&self) -> Tensor {
        let dim = self.dim();
        let mut data = self.normal.data().to_vec();
        data.extend_from_slice(self.abnormal.data());
        Tensor::from_vec(&[2, dim], data)
    }
}

fn mean_of_rows(features: &Tensor, rows: &[usize]) -> Vec<f64> {
    let dim = features.shape()[1];
    let mut acc = vec![0.0; dim];
    for &r in rows {
        for (a, v) in acc.iter_mut().zip(features.row(r)) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= rows.len() as f64;
    }
    acc
}

fn renormalize(v: Vec<f64>) -> Tensor {
    let n = v.len();
    let (t, _) = Tensor::from_vec(&[n], v).l2_normalize(0);
    t
}

/// Reduce `[N, C]` unit rows to one unit representative vector.
pub fn select_representative(
    features: &Tensor,
    config: &SelectorConfig,
) -> Result<(Tensor, SelectionProvenance)> {
    config.validate()?;
    assert_eq!(features.rank(), 2, "selector input must be [N, C]");
    let n = features.shape()[0];
    if n == 0 {
        return Err(Error::EmptyDistribution(
            "cannot select a representative vector from zero samples".into(),
        ));
    }
    let all: Vec<usize> = (0..n).collect();
    match config.method {
        SelectorMethod::Mean => Ok((
            renormalize(mean_of_rows(features, &all)),
            SelectionProvenance::all(n),
        )),
        SelectorMethod::Pca => Ok((principal_component(features), SelectionProvenance::all(n))),
        SelectorMethod::Kde => Ok((
            kde_weighted_mean(features, config.kde_bandwidth),
            SelectionProvenance::all(n),
        )),
        SelectorMethod::MeanShift => {
            let clusters = mean_shift_clusters(features, config.mean_shift_bandwidth);
            let largest = largest_cluster(&clusters);
            Ok((
                renormalize(mean_of_rows(features, largest)),
                SelectionProvenance {
                    used: largest.len(),
                    discarded: n - largest.len(),
                    fallback: false,
                },
            ))
        }
        SelectorMethod::Dbscan => {
            let clusters =
                dbscan_clusters(features, config.dbscan_eps, config.dbscan_min_samples);
            if clusters.is_empty() {
                // Every point is noise: degenerate back to the plain mean.
                return Ok((
                    renormalize(mean_of_rows(features, &all)),
                    SelectionProvenance {
                        used: n,
                        discarded: 0,
                        fallback: true,
                    },
                ));
            }
            let largest = largest_cluster(&clusters);
            Ok((
                renormalize(mean_of_rows(features, largest)),
                SelectionProvenance {
                    used: largest.len(),
                    discarded: n - largest.len(),
                    fallback: false,
                },
            ))
        }
    }
}

/// Largest cluster; ties break toward the cluster containing the lowest
/// point index.
fn largest_cluster(clusters: &[Vec<usize>]) -> &[usize] {
    let mut best: Option<&Vec<usize>> = None;
    for c in clusters {
        match best {
            None => best = Some(c),
            Some(b) => {
                let better = c.len() > b.len()
                    || (c.len() == b.len()
                        && c.iter().min() < b.iter().min());
                if better {
                    best = Some(c);
                }
            }
        }
    }
    best.expect("largest_cluster on empty cluster list")
}

/// First principal component of the mean-centered rows via power iteration
/// (tolerance 1e-8), sign-corrected against the mean. Degenerate inputs with
/// no variance fall back to the normalized mean.
fn principal_component(features: &Tensor) -> Tensor {
    let (n, dim) = (features.shape()[0], features.shape()[1]);
    let all: Vec<usize> = (0..n).collect();
    let mean = mean_of_rows(features, &all);
    let mut centered = Vec::with_capacity(n);
    let mut best_start = 0usize;
    let mut best_norm = 0.0f64;
    for i in 0..n {
        let row: Vec<f64> = features
            .row(i)
            .iter()
            .zip(&mean)
            .map(|(v, m)| v - m)
            .collect();
        let rn = norm(&row);
        if rn > best_norm {
            best_norm = rn;
            best_start = i;
        }
        centered.push(row);
    }
    if best_norm < 1e-12 {
        return renormalize(mean);
    }

    // v <- normalize(C v) with C = X_c^T X_c / n, applied without
    // materializing C: C v = X_c^T (X_c v) / n.
    let mut v: Vec<f64> = centered[best_start].iter().map(|x| x / best_norm).collect();
    for _ in 0..10_000 {
        let projections: Vec<f64> = centered.iter().map(|row| dot(row, &v)).collect();
        let mut next = vec![0.0; dim];
        for (row, p) in centered.iter().zip(&projections) {
            for (nx, x) in next.iter_mut().zip(row) {
                *nx += p * x;
            }
        }
        let nn = norm(&next);
        if nn < 1e-30 {
            return renormalize(mean);
        }
        for x in next.iter_mut() {
            *x /= nn;
        }
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < 1e-8 {
            break;
        }
    }
    if dot(&mean, &v) < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    renormalize(v)
}

/// Density-weighted mean: Gaussian kernel density at each row, densities
/// normalized to sum 1, weighted sum of rows, renormalized.
fn kde_weighted_mean(features: &Tensor, bandwidth: f64) -> Tensor {
    let (n, dim) = (features.shape()[0], features.shape()[1]);
    let inv_2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut density = vec![0.0f64; n];
    for i in 0..n {
        let mut d = 0.0;
        for j in 0..n {
            d += (-dist_sq(features.row(i), features.row(j)) * inv_2h2).exp();
        }
        density[i] = d;
    }
    let total: f64 = density.iter().sum();
    let mut acc = vec![0.0; dim];
    for i in 0..n {
        let w = density[i] / total;
        for (a, v) in acc.iter_mut().zip(features.row(i)) {
            *a += w * v;
        }
    }
    renormalize(acc)
}

/// Flat-kernel mean shift. Every point seeds a mode; each mode iterates to
/// the mean of the points within `bandwidth` until the shift drops below
/// 1e-5 or 300 iterations pass. Converged modes closer than `bandwidth` to
/// an already accepted mode are merged into it (scan in seed order); each
/// point then joins the nearest accepted mode.
fn mean_shift_clusters(features: &Tensor, bandwidth: f64) -> Vec<Vec<usize>> {
    let n = features.shape()[0];
    let dim = features.shape()[1];
    let bw2 = bandwidth * bandwidth;

    let mut modes: Vec<Vec<f64>> = Vec::with_capacity(n);
    for seed in 0..n {
        let mut mode: Vec<f64> = features.row(seed).to_vec();
        for _ in 0..300 {
            let mut acc = vec![0.0; dim];
            let mut count = 0usize;
            for j in 0..n {
                if dist_sq(&mode, features.row(j)) <= bw2 {
                    for (a, v) in acc.iter_mut().zip(features.row(j)) {
                        *a += v;
                    }
                    count += 1;
                }
            }
            debug_assert!(count > 0);
            for a in acc.iter_mut() {
                *a /= count as f64;
            }
            let shift = dist_sq(&mode, &acc).sqrt();
            mode = acc;
            if shift < 1e-5 {
                break;
            }
        }
        modes.push(mode);
    }

    let mut accepted: Vec<Vec<f64>> = Vec::new();
    for mode in &modes {
        let merged = accepted
            .iter()
            .any(|a| dist_sq(a, mode).sqrt() < bandwidth);
        if !merged {
            accepted.push(mode.clone());
        }
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); accepted.len()];
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, a) in accepted.iter().enumerate() {
            let d = dist_sq(features.row(i), a);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        clusters[best].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    clusters
}

/// Classic density-based clustering over the closed `eps` neighborhood.
/// Returns clusters in creation order; noise points appear in none.
fn dbscan_clusters(features: &Tensor, eps: f64, min_samples: usize) -> Vec<Vec<usize>> {
    let n = features.shape()[0];
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| dist_sq(features.row(i), features.row(j)) <= eps2)
                .collect()
        })
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if assignment[start].is_some() || !is_core[start] {
            continue;
        }
        let id = clusters.len();
        clusters.push(Vec::new());
        let mut queue = std::collections::VecDeque::from([start]);
        assignment[start] = Some(id);
        clusters[id].push(start);
        while let Some(p) = queue.pop_front() {
            if !is_core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if assignment[q].is_none() {
                    assignment[q] = Some(id);
                    clusters[id].push(q);
                    queue.push_back(q);
                }
            }
        }
    }
    for c in clusters.iter_mut() {
        c.sort_unstable();
    }
    clusters
}

/// Relative class probabilities from Eq.-style cosine scoring:
/// `softmax([e . t_normal, e . t_abnormal] / temperature)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProbabilities {
    pub normal: f64,
    pub abnormal: f64,
}

impl ClassProbabilities {
    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.normal, self.abnormal]
    }
}

pub fn classify(
    image_embedding: &Tensor,
    pair: &RepresentativePair,
    temperature: f64,
) -> ClassProbabilities {
    assert_eq!(image_embedding.rank(), 1);
    assert_eq!(image_embedding.len(), pair.dim());
    let sims = Tensor::from_vec(
        &[2],
        vec![
            dot(image_embedding.data(), pair.normal.data()),
            dot(image_embedding.data(), pair.abnormal.data()),
        ],
    );
    let p = sims.softmax(0, temperature);
    ClassProbabilities {
        normal: p.data()[0],
        abnormal: p.data()[1],
    }
}
