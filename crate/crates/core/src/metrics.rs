//! Evaluation metrics: AUROC, F1-max, average precision, and per-region
//! overlap, plus the diffable text report.
//!
//! Implementations are written so an independent brute-force oracle can
//! reproduce them *exactly* (integer counting followed by the same final
//! divisions):
//!
//! - AUROC is the rank-sum probability that a positive outranks a negative,
//!   ties counted 1/2 (accumulated as twice-wins in integers).
//! - F1-max scans a threshold at every distinct score, predicting positive
//!   at `score >= t`. The pixel-level variants use 1000 score quantiles
//!   instead, for tractability.
//! - Average precision is the sum over positives of precision at each
//!   recall step, items ordered by (score desc, index asc).
//! - PRO labels mask components with 8-connectivity; per threshold the mean
//!   per-component overlap is plotted against the global false-positive
//!   rate over 200 score quantiles plus the endpoints. The region below the
//!   smallest measured FPR extends that point's overlap leftward, segments
//!   interpolate linearly, and the area is cut at FPR = 0.3 (interpolated)
//!   and normalized by 0.3.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores with binary labels, the input to the ranking metrics.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "scored set".into(),
                lhs: vec![scores.len()],
                rhs: vec![labels.len()],
            });
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }
}

/// Probability that a positive outranks a negative, ties at 1/2.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let p = set.positives() as u64;
    let n = set.negatives() as u64;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "auroc needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Twice the win count so ties stay integral.
    let mut wins2: u64 = 0;
    let mut negs_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut pos_here: u64 = 0;
        let mut neg_here: u64 = 0;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            if set.labels[order[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        wins2 += pos_here * (2 * negs_below + neg_here);
        negs_below += neg_here;
        i = j;
    }
    Ok(wins2 as f64 / (2 * p * n) as f64)
}

fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Maximum F1 over a threshold at every distinct score (`score >= t`
/// predicts positive).
pub fn f1_max(set: &ScoredSet) -> Result<f64> {
    let p = set.positives() as u64;
    if p == 0 {
        return Err(Error::UndefinedMetric(
            "f1_max needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut best = 0.0f64;
    let mut tp: u64 = 0;
    let mut fp: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            if set.labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        best = best.max(f1_from_counts(tp, fp, p - tp));
        i = j;
    }
    Ok(best)
}

/// Sum over positives of precision at each recall step, items ordered by
/// (score desc, index asc) — the tie order is deterministic, not
/// tie-invariant.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let p = set.positives();
    if p == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.scores[b]
            .total_cmp(&set.scores[a])
            .then(a.cmp(&b))
    });
    let mut tp: u64 = 0;
    let mut acc = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if set.labels[idx] {
            tp += 1;
            acc += tp as f64 / (rank0 as u64 + 1) as f64;
        }
    }
    Ok(acc / p as f64)
}

/// Evenly spaced quantile values of the score distribution (`count` points
/// including both endpoints), deduplicated, descending.
fn quantile_thresholds(scores: &[f64], count: usize) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut out: Vec<f64> = Vec::with_capacity(count + 2);
    for q in 0..count {
        let pos = if count == 1 {
            0
        } else {
            ((q as f64) * (n - 1) as f64 / (count - 1) as f64).round() as usize
        };
        out.push(sorted[pos.min(n - 1)]);
    }
    out.push(sorted[0]);
    out.push(sorted[n - 1]);
    out.sort_by(|a, b| b.total_cmp(a));
    out.dedup();
    out
}

/// Counts of (predicted positive, true positive) at `score >= t` via a
/// presorted sweep.
struct ThresholdCounter {
    /// (score, label) sorted by score descending.
    sorted: Vec<(f64, bool)>,
    cumulative_tp: Vec<u64>,
}

impl ThresholdCounter {
    fn new(set: &ScoredSet) -> Self {
        let mut sorted: Vec<(f64, bool)> = set
            .scores
            .iter()
            .copied()
            .zip(set.labels.iter().copied())
            .collect();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut cumulative_tp = Vec::with_capacity(sorted.len());
        let mut tp = 0u64;
        for &(_, l) in &sorted {
            if l {
                tp += 1;
            }
            cumulative_tp.push(tp);
        }
        ThresholdCounter {
            sorted,
            cumulative_tp,
        }
    }

    /// Number of items with score >= t and how many of them are positive.
    fn counts_at(&self, t: f64) -> (u64, u64) {
        // partition point: first index with score < t
        let k = self.sorted.partition_point(|&(s, _)| s >= t);
        if k == 0 {
            (0, 0)
        } else {
            (k as u64, self.cumulative_tp[k - 1])
        }
    }
}

/// F1-max over quantile thresholds (pixel-level variant).
pub fn f1_max_quantiles(set: &ScoredSet, count: usize) -> Result<f64> {
    let p = set.positives() as u64;
    if p == 0 {
        return Err(Error::UndefinedMetric(
            "f1_max needs at least one positive".into(),
        ));
    }
    let counter = ThresholdCounter::new(set);
    let mut best = 0.0f64;
    for t in quantile_thresholds(&set.scores, count) {
        let (predicted, tp) = counter.counts_at(t);
        best = best.max(f1_from_counts(tp, predicted - tp, p - tp));
    }
    Ok(best)
}

/// Step-integrated precision-recall area over quantile thresholds
/// (pixel-level variant): thresholds descending, `sum (R_i - R_{i-1}) P_i`.
pub fn average_precision_quantiles(set: &ScoredSet, count: usize) -> Result<f64> {
    let p = set.positives() as u64;
    if p == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let counter = ThresholdCounter::new(set);
    let mut acc = 0.0;
    let mut prev_recall = 0.0;
    for t in quantile_thresholds(&set.scores, count) {
        let (predicted, tp) = counter.counts_at(t);
        if predicted == 0 {
            continue;
        }
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / predicted as f64;
        acc += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(acc)
}

/// Connected components of a binary mask under 8-connectivity, as pixel
/// index lists, in scan order of their first pixel.
pub fn connected_components(mask: &Tensor) -> Vec<Vec<usize>> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data()[start] == 0.0 {
            continue;
        }
        let mut component = Vec::new();
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (y, x) = (p / w, p % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && mask.data()[q] != 0.0 {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components
}

pub const PRO_FPR_LIMIT: f64 = 0.3;
pub const PRO_THRESHOLD_COUNT: usize = 200;

/// Per-region overlap integrated over FPR in [0, 0.3], normalized by 0.3.
/// `score_maps` and `masks` are per-image `[H, W]` tensors.
pub fn pro(score_maps: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    pro_with_thresholds(score_maps, masks, PRO_THRESHOLD_COUNT)
}

pub fn pro_with_thresholds(
    score_maps: &[Tensor],
    masks: &[Tensor],
    threshold_count: usize,
) -> Result<f64> {
    if score_maps.len() != masks.len() || score_maps.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "pro inputs".into(),
            lhs: vec![score_maps.len()],
            rhs: vec![masks.len()],
        });
    }
    // Per-component score lists (descending) and all negative scores.
    let mut component_scores: Vec<Vec<f64>> = Vec::new();
    let mut negative_scores: Vec<f64> = Vec::new();
    let mut all_scores: Vec<f64> = Vec::new();
    for (map, mask) in score_maps.iter().zip(masks) {
        if map.shape() != mask.shape() {
            return Err(Error::DimensionMismatch {
                context: "pro map/mask".into(),
                lhs: map.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        for &v in mask.data() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinaryMask("pro ground truth".into()));
            }
        }
        for comp in connected_components(mask) {
            let mut scores: Vec<f64> = comp.iter().map(|&p| map.data()[p]).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            component_scores.push(scores);
        }
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 0.0 {
                negative_scores.push(map.data()[i]);
            }
        }
        all_scores.extend_from_slice(map.data());
    }
    if component_scores.is_empty() {
        return Err(Error::UndefinedMetric(
            "pro needs at least one anomalous region".into(),
        ));
    }
    if negative_scores.is_empty() {
        return Err(Error::UndefinedMetric(
            "pro needs at least one normal pixel".into(),
        ));
    }
    negative_scores.sort_by(|a, b| b.total_cmp(a));
    let total_neg = negative_scores.len() as f64;

    let thresholds = quantile_thresholds(&all_scores, threshold_count);
    // Threshold-descending sweep produces FPR-ascending points.
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let fp = negative_scores.partition_point(|&s| s >= t);
        let fpr = fp as f64 / total_neg;
        let mut overlap_sum = 0.0;
        for comp in &component_scores {
            let hit = comp.partition_point(|&s| s >= t);
            overlap_sum += hit as f64 / comp.len() as f64;
        }
        points.push((fpr, overlap_sum / component_scores.len() as f64));
    }
    Ok(integrate_pro_curve(&points, PRO_FPR_LIMIT))
}

/// Area under the (fpr, overlap) points up to `limit`, normalized by it.
/// Overlap extends leftward from the first point; segments interpolate
/// linearly; the cut at `limit` interpolates within the straddling segment.
pub fn integrate_pro_curve(points: &[(f64, f64)], limit: f64) -> f64 {
    assert!(!points.is_empty());
    let mut area = 0.0;
    let (first_f, first_o) = points[0];
    if first_f >= limit {
        return first_o;
    }
    area += first_f * first_o;
    let mut prev = points[0];
    for &(f, o) in &points[1..] {
        let (pf, po) = prev;
        if f <= pf {
            prev = (pf, o);
            continue;
        }
        if f >= limit {
            // Interpolate the overlap at the limit and close the area.
            let t = (limit - pf) / (f - pf);
            let o_limit = po + t * (o - po);
            area += (limit - pf) * (po + o_limit) / 2.0;
            return area / limit;
        }
        area += (f - pf) * (po + o) / 2.0;
        prev = (f, o);
    }
    // Curve ended before the limit: extend the last overlap value.
    let (pf, po) = prev;
    area += (limit - pf) * po;
    area / limit
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub auroc: f64,
    pub f1_max: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationMetrics {
    pub auroc: f64,
    pub f1_max: f64,
    pub ap: f64,
    pub pro: f64,
}

pub const PIXEL_THRESHOLD_COUNT: usize = 1000;

/// Full evaluation report with the counts and threshold policies used.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub image: ClassificationMetrics,
    pub pixel: Option<SegmentationMetrics>,
    pub image_count: usize,
    pub normal_count: usize,
    pub abnormal_count: usize,
    pub pixel_count: usize,
    pub positive_pixel_count: usize,
}

impl MetricsReport {
    /// Image-level metrics are exact (all distinct thresholds); pixel-level
    /// F1/AP use the 1000-quantile policy and PRO its 200-quantile curve.
    pub fn compute(
        image_set: &ScoredSet,
        pixel: Option<(&[Tensor], &[Tensor])>,
    ) -> Result<MetricsReport> {
        let image = ClassificationMetrics {
            auroc: auroc(image_set)?,
            f1_max: f1_max(image_set)?,
            ap: average_precision(image_set)?,
        };
        let mut pixel_count = 0;
        let mut positive_pixel_count = 0;
        let pixel_metrics = match pixel {
            None => None,
            Some((maps, masks)) => {
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for (map, mask) in maps.iter().zip(masks.iter()) {
                    scores.extend_from_slice(map.data());
                    labels.extend(mask.data().iter().map(|&v| v != 0.0));
                }
                pixel_count = scores.len();
                positive_pixel_count = labels.iter().filter(|&&l| l).count();
                let set = ScoredSet::new(scores, labels)?;
                Some(SegmentationMetrics {
                    auroc: auroc(&set)?,
                    f1_max: f1_max_quantiles(&set, PIXEL_THRESHOLD_COUNT)?,
                    ap: average_precision_quantiles(&set, PIXEL_THRESHOLD_COUNT)?,
                    pro: pro(maps, masks)?,
                })
            }
        };
        Ok(MetricsReport {
            image,
            pixel: pixel_metrics,
            image_count: image_set.len(),
            normal_count: image_set.negatives(),
            abnormal_count: image_set.positives(),
            pixel_count,
            positive_pixel_count,
        })
    }

    /// Stable-ordered key/value text, diffable across runs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("counts.images", self.image_count.to_string());
        kv("counts.images.abnormal", self.abnormal_count.to_string());
        kv("counts.images.normal", self.normal_count.to_string());
        kv("counts.pixels", self.pixel_count.to_string());
        kv(
            "counts.pixels.positive",
            self.positive_pixel_count.to_string(),
        );
        kv("image.ap", format!("{:.6}", self.image.ap));
        kv("image.auroc", format!("{:.6}", self.image.auroc));
        kv("image.f1_max", format!("{:.6}", self.image.f1_max));
        match &self.pixel {
            Some(p) => {
                kv("pixel.ap", format!("{:.6}", p.ap));
                kv("pixel.auroc", format!("{:.6}", p.auroc));
                kv("pixel.f1_max", format!("{:.6}", p.f1_max));
                kv("pixel.pro", format!("{:.6}", p.pro));
            }
            None => {
                kv("pixel.ap", "n/a".into());
                kv("pixel.auroc", "n/a".into());
                kv("pixel.f1_max", "n/a".into());
                kv("pixel.pro", "n/a".into());
            }
        }
        kv("thresholds.image", "exact-distinct-scores".into());
        kv(
            "thresholds.pixel",
            format!("quantile-{PIXEL_THRESHOLD_COUNT}"),
        );
        kv(
            "thresholds.pro",
            format!("quantile-{PRO_THRESHOLD_COUNT}-plus-endpoints"),
        );
        out
    }
}

#[cfg(test)]
pub(crate) mod reference {
    //! Brute-force oracles: O(n^2) pair counting, exhaustive threshold
    //! re-evaluation, and naive per-threshold region enumeration.

    use super::*;

    pub fn auroc_pairs(set: &ScoredSet) -> f64 {
        let mut wins2 = 0u64;
        let mut p = 0u64;
        let mut n = 0u64;
        for i in 0..set.len() {
            if !set.labels[i] {
                n += 1;
                continue;
            }
            p += 1;
            for j in 0..set.len() {
                if set.labels[j] {
                    continue;
                }
                if set.scores[i] > set.scores[j] {
                    wins2 += 2;
                } else if set.scores[i] == set.scores[j] {
                    wins2 += 1;
                }
            }
        }
        wins2 as f64 / (2 * p * n) as f64
    }

    pub fn f1_max_exhaustive(set: &ScoredSet) -> f64 {
        let p = set.labels.iter().filter(|&&l| l).count() as u64;
        let mut thresholds = set.scores.clone();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut best = 0.0f64;
        for &t in &thresholds {
            let mut tp = 0u64;
            let mut fp = 0u64;
            for i in 0..set.len() {
                if set.scores[i] >= t {
                    if set.labels[i] {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            best = best.max(super::f1_from_counts(tp, fp, p - tp));
        }
        best
    }

    pub fn average_precision_pairs(set: &ScoredSet) -> f64 {
        let p = set.labels.iter().filter(|&&l| l).count();
        // (rank, precision) per positive via pair counting under the
        // (score desc, index asc) order.
        let mut terms: Vec<(u64, f64)> = Vec::new();
        for i in 0..set.len() {
            if !set.labels[i] {
                continue;
            }
            let mut rank = 0u64;
            let mut tp = 0u64;
            for j in 0..set.len() {
                let before = set.scores[j] > set.scores[i]
                    || (set.scores[j] == set.scores[i] && j <= i);
                if before {
                    rank += 1;
                    if set.labels[j] {
                        tp += 1;
                    }
                }
            }
            terms.push((rank, tp as f64 / rank as f64));
        }
        terms.sort_by_key(|&(r, _)| r);
        terms.iter().map(|&(_, t)| t).sum::<f64>() / p as f64
    }

    /// Naive PRO: per threshold, rebuild the binary prediction and count
    /// overlaps pixel by pixel. Components come from a separate recursive
    /// labeling pass.
    pub fn pro_naive(score_maps: &[Tensor], masks: &[Tensor], threshold_count: usize) -> f64 {
        fn label_components(mask: &Tensor) -> Vec<Vec<usize>> {
            let (h, w) = (mask.shape()[0], mask.shape()[1]);
            let mut owner = vec![usize::MAX; h * w];
            let mut count = 0;
            for start in 0..h * w {
                if mask.data()[start] == 0.0 || owner[start] != usize::MAX {
                    continue;
                }
                let id = count;
                count += 1;
                let mut stack = vec![start];
                owner[start] = id;
                while let Some(p) = stack.pop() {
                    let (y, x) = (p / w, p % w);
                    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            let q = ny * w + nx;
                            if mask.data()[q] != 0.0 && owner[q] == usize::MAX {
                                owner[q] = id;
                                stack.push(q);
                            }
                        }
                    }
                }
            }
            let mut components = vec![Vec::new(); count];
            for (p, &o) in owner.iter().enumerate() {
                if o != usize::MAX {
                    components[o].push(p);
                }
            }
            components
        }

        let mut all_scores = Vec::new();
        for m in score_maps {
            all_scores.extend_from_slice(m.data());
        }
        let thresholds = super::quantile_thresholds(&all_scores, threshold_count);
        let per_image_components: Vec<Vec<Vec<usize>>> =
            masks.iter().map(label_components).collect();

        let mut points = Vec::new();
        for &t in &thresholds {
            let mut fp = 0usize;
            let mut neg = 0usize;
            let mut overlaps = Vec::new();
            for ((map, mask), components) in score_maps
                .iter()
                .zip(masks)
                .zip(&per_image_components)
            {
                for (i, &m) in mask.data().iter().enumerate() {
                    if m == 0.0 {
                        neg += 1;
                        if map.data()[i] >= t {
                            fp += 1;
                        }
                    }
                }
                for comp in components {
                    let hit = comp.iter().filter(|&&p| map.data()[p] >= t).count();
                    overlaps.push(hit as f64 / comp.len() as f64);
                }
            }
            let fpr = fp as f64 / neg as f64;
            let mean = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
            points.push((fpr, mean));
        }
        super::integrate_pro_curve(&points, super::PRO_FPR_LIMIT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n: usize, tie_prone: bool) -> ScoredSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if tie_prone {
                    (rng.random::<u32>() % 8) as f64 / 4.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() > 0.6).collect();
        // Guarantee both classes.
        labels[0] = true;
        if n > 1 {
            labels[1] = false;
        }
        ScoredSet::new(scores, labels).unwrap()
    }

    #[test]
    fn auroc_trivials() {
        let set = ScoredSet::new(vec![0.1, 0.9], vec![false, true]).unwrap();
        assert_eq!(auroc(&set).unwrap(), 1.0);
        let set = ScoredSet::new(vec![0.9, 0.1], vec![false, true]).unwrap();
        assert_eq!(auroc(&set).unwrap(), 0.0);
        let single = ScoredSet::new(vec![0.5], vec![true]).unwrap();
        assert!(matches!(
            auroc(&single),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auroc_matches_pairwise_oracle_exactly() {
        for seed in 0..60 {
            let set = random_set(seed, 3 + (seed as usize * 7) % 120, seed % 2 == 0);
            assert_eq!(
                auroc(&set).unwrap(),
                reference::auroc_pairs(&set),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn auroc_label_flip_symmetry() {
        for seed in 0..20 {
            let set = random_set(seed + 500, 50, true);
            let flipped = ScoredSet::new(
                set.scores.clone(),
                set.labels.iter().map(|&l| !l).collect(),
            )
            .unwrap();
            let a = auroc(&set).unwrap();
            let b = auroc(&flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12, "seed {seed}: {a} + {b} != 1");
        }
    }

    #[test]
    fn metrics_invariant_under_monotone_transforms() {
        for seed in 0..10 {
            let set = random_set(seed + 900, 80, false);
            let transformed = ScoredSet::new(
                set.scores.iter().map(|&s| (3.0 * s + 1.0).exp()).collect(),
                set.labels.clone(),
            )
            .unwrap();
            assert!((auroc(&set).unwrap() - auroc(&transformed).unwrap()).abs() < 1e-12);
            assert!((f1_max(&set).unwrap() - f1_max(&transformed).unwrap()).abs() < 1e-12);
            assert!(
                (average_precision(&set).unwrap()
                    - average_precision(&transformed).unwrap())
                .abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn f1_trivials_and_all_equal_case() {
        let set = ScoredSet::new(vec![0.9, 0.8, 0.1, 0.2], vec![true, true, false, false])
            .unwrap();
        assert_eq!(f1_max(&set).unwrap(), 1.0);
        // All scores equal, half positive: the only operating point predicts
        // everything, F1 = 2p/(p+1) with p = 1/2 -> 2/3.
        let set = ScoredSet::new(vec![0.5; 4], vec![true, false, true, false]).unwrap();
        assert!((f1_max(&set).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_matches_exhaustive_oracle_exactly() {
        for seed in 0..60 {
            let set = random_set(seed + 100, 3 + (seed as usize * 11) % 150, seed % 3 != 0);
            assert_eq!(
                f1_max(&set).unwrap(),
                reference::f1_max_exhaustive(&set),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn ap_trivials() {
        let set = ScoredSet::new(vec![0.9, 0.8, 0.1], vec![true, true, false]).unwrap();
        assert_eq!(average_precision(&set).unwrap(), 1.0);
        // Single positive ranked last of n: AP = 1/n.
        let n = 7;
        let mut scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 * 0.1).collect();
        let mut labels = vec![false; n];
        labels[n - 1] = true;
        scores[n - 1] = 0.0;
        let set = ScoredSet::new(scores, labels).unwrap();
        assert!((average_precision(&set).unwrap() - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_pair_counting_oracle_exactly() {
        for seed in 0..60 {
            let set = random_set(seed + 200, 3 + (seed as usize * 13) % 130, seed % 2 == 1);
            assert_eq!(
                average_precision(&set).unwrap(),
                reference::average_precision_pairs(&set),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn quantile_variants_agree_with_exact_when_thresholds_cover() {
        for seed in 0..20 {
            let set = random_set(seed + 300, 40, true);
            // With more quantiles than points every distinct score is hit.
            let exact = f1_max(&set).unwrap();
            let quant = f1_max_quantiles(&set, 500).unwrap();
            assert_eq!(exact, quant, "seed {seed}");
        }
    }

    #[test]
    fn components_eight_connectivity() {
        // Diagonal pixels join under 8-connectivity.
        let mask = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let comps = connected_components(&mask);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].len(), 3);
        // Separate regions.
        let mask = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let comps = connected_components(&mask);
        assert_eq!(comps.len(), 3);
    }

    #[test]
    fn pro_perfect_prediction_is_one() {
        let mask = Tensor::from_vec(
            &[4, 4],
            vec![
                1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0,
            ],
        );
        let map = mask.clone();
        let v = pro(&[map], &[mask]).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "pro = {v}");
    }

    #[test]
    fn pro_constant_scores_is_one() {
        // A constant map's only operating point predicts everything: mean
        // region recall 1 at fpr 1, extended left across [0, 0.3].
        let mask = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let map = Tensor::filled(&[2, 2], 0.7);
        let v = pro(&[map], &[mask]).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "pro = {v}");
    }

    #[test]
    fn pro_matches_naive_oracle() {
        for seed in 0..25 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 700);
            let images = 1 + (seed as usize) % 3;
            let mut maps = Vec::new();
            let mut masks = Vec::new();
            let mut any_pos = false;
            let mut any_neg = false;
            for _ in 0..images {
                let map_data: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
                let mask_data: Vec<f64> = (0..256)
                    .map(|_| if rng.random::<f64>() > 0.8 { 1.0 } else { 0.0 })
                    .collect();
                any_pos |= mask_data.iter().any(|&v| v == 1.0);
                any_neg |= mask_data.iter().any(|&v| v == 0.0);
                maps.push(Tensor::from_vec(&[16, 16], map_data));
                masks.push(Tensor::from_vec(&[16, 16], mask_data));
            }
            if !any_pos || !any_neg {
                continue;
            }
            let fast = pro(&maps, &masks).unwrap();
            let naive = reference::pro_naive(&maps, &masks, PRO_THRESHOLD_COUNT);
            assert!(
                (fast - naive).abs() < 1e-6,
                "seed {seed}: {fast} vs {naive}"
            );
        }
    }

    #[test]
    fn pro_two_region_hand_case() {
        // 8x8 with a 2x2 block and a single pixel; scores rank the block
        // higher. The oracle and the implementation must agree.
        let mut mask = Tensor::zeros(&[8, 8]);
        for (y, x) in [(1usize, 1usize), (1, 2), (2, 1), (2, 2), (6, 6)] {
            mask.set(&[y, x], 1.0);
        }
        let mut map = Tensor::zeros(&[8, 8]);
        for (y, x, v) in [
            (1usize, 1usize, 0.9),
            (1, 2, 0.85),
            (2, 1, 0.8),
            (2, 2, 0.75),
            (6, 6, 0.5),
            (0, 0, 0.6),
        ] {
            map.set(&[y, x], v);
        }
        let fast = pro(&[map.clone()], &[mask.clone()]).unwrap();
        let naive = reference::pro_naive(&[map], &[mask], PRO_THRESHOLD_COUNT);
        assert!((fast - naive).abs() < 1e-9);
        assert!(fast > 0.0 && fast <= 1.0);
    }

    #[test]
    fn pro_undefined_without_regions() {
        let mask = Tensor::zeros(&[4, 4]);
        let map = Tensor::filled(&[4, 4], 0.5);
        assert!(matches!(
            pro(&[map], &[mask]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn report_text_is_stable_and_complete() {
        let image = ScoredSet::new(vec![0.9, 0.2, 0.7, 0.1], vec![true, false, true, false])
            .unwrap();
        let maps = vec![Tensor::from_vec(&[2, 2], vec![0.9, 0.1, 0.2, 0.1])];
        let masks = vec![Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0])];
        let report = MetricsReport::compute(&image, Some((&maps, &masks))).unwrap();
        let text = report.to_text();
        let again = MetricsReport::compute(&image, Some((&maps, &masks)))
            .unwrap()
            .to_text();
        assert_eq!(text, again);
        for key in [
            "counts.images",
            "image.auroc",
            "pixel.pro",
            "thresholds.image",
            "thresholds.pixel",
            "thresholds.pro",
        ] {
            assert!(text.contains(key), "missing {key} in:\n{text}");
        }
        // Keys appear in sorted stable order.
        let keys: Vec<&str> = text
            .lines()
            .map(|l| l.split(" = ").next().unwrap())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn all_metrics_stay_in_unit_interval() {
        for seed in 0..20 {
            let set = random_set(seed + 400, 64, seed % 2 == 0);
            for v in [
                auroc(&set).unwrap(),
                f1_max(&set).unwrap(),
                average_precision(&set).unwrap(),
            ] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
