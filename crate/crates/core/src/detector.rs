//! Training-free staged detector: per-stage feature surgery on the surgery
//! pathway, map aggregation, upsampling, and anomaly-score fusion.
//!
//! The per-stage prediction grids sum into the final patch-level map; the
//! pixel map is its bilinear upsampling (corners aligned). Image-level
//! scoring adds the abnormal-class probability to the maximum of the pixel
//! map after the maps of the whole evaluation batch have been min-max
//! normalized together — the raw map sums are unbounded while the
//! probability lives in [0, 1], so the fusion operates on the normalized
//! scale. This affects image-level metrics only through ranking.

use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::selector::{classify, ClassProbabilities, RepresentativePair};
use crate::surgery::{feature_surgery, forward_dual_path, DualPathOutput};
use crate::tensor::{bilinear_resize, Tensor};

/// Patch-level and pixel-level anomaly scores for one image.
#[derive(Debug, Clone)]
pub struct AnomalyMap {
    /// Raw patch-level map, `[g, g]`.
    pub grid: Tensor,
    /// Upsampled map at the evaluation resolution. Starts as the raw
    /// upsampling of `grid`; [`normalize_batch`] rescales it in place.
    pub pixel: Tensor,
    /// Fused image-level score; populated by [`score_batch`], 0 until then.
    pub image_score: f64,
}

impl AnomalyMap {
    pub fn from_grid(grid: Tensor, target_h: usize, target_w: usize) -> Self {
        let pixel = upsample(&grid, target_h, target_w);
        AnomalyMap {
            grid,
            pixel,
            image_score: 0.0,
        }
    }
}

/// Bilinear upsampling with aligned corners.
pub fn upsample(grid: &Tensor, target_h: usize, target_w: usize) -> Tensor {
    bilinear_resize(grid, target_h, target_w)
}

/// Per-stage prediction grids: project the surgery-path patch tokens of each
/// stage into the joint space, run feature surgery against the
/// representative pair, and keep the abnormal-class column.
pub fn stage_grids(
    weights: &EncoderWeights,
    dual: &DualPathOutput,
    pair: &RepresentativePair,
    probs: &ClassProbabilities,
) -> Result<Vec<Tensor>> {
    stage_grids_from(weights, &dual.surgery_stages, pair, probs)
}

fn stage_grids_from(
    weights: &EncoderWeights,
    stages: &[Tensor],
    pair: &RepresentativePair,
    probs: &ClassProbabilities,
) -> Result<Vec<Tensor>> {
    let g = weights.config.grid();
    let text = pair.stacked();
    let s = probs.as_vec();
    let mut grids = Vec::with_capacity(stages.len());
    for tokens in stages {
        let patches = strip_class_token(tokens);
        let joint = weights.project_to_joint(&patches);
        let predictions = feature_surgery(&joint, &text, &s)?;
        let mut grid = Tensor::zeros(&[g, g]);
        for l in 0..g * g {
            grid.data_mut()[l] = predictions.at(&[l, 1]);
        }
        grids.push(grid);
    }
    Ok(grids)
}

pub(crate) fn strip_class_token(tokens: &Tensor) -> Tensor {
    let (m, w) = (tokens.shape()[0], tokens.shape()[1]);
    Tensor::from_vec(&[m - 1, w], tokens.data()[w..].to_vec())
}

pub fn sum_grids(grids: &[Tensor]) -> Result<Tensor> {
    let mut acc = grids
        .first()
        .ok_or_else(|| Error::InvalidConfig("no stage grids to sum".into()))?
        .clone();
    for g in &grids[1..] {
        acc = acc.add(g)?;
    }
    Ok(acc)
}

/// Full training-free forward for one preprocessed image: dual-path encode,
/// classify the class embedding, sum the per-stage surgery maps.
pub fn sdp_forward(
    weights: &EncoderWeights,
    image: &Tensor,
    pair: &RepresentativePair,
    temperature: f64,
    target: (usize, usize),
) -> Result<(AnomalyMap, ClassProbabilities)> {
    let dual = forward_dual_path(weights, image)?;
    let probs = classify(&dual.class_embedding, pair, temperature);
    let grids = stage_grids(weights, &dual, pair, &probs)?;
    let grid = sum_grids(&grids)?;
    Ok((
        AnomalyMap::from_grid(grid, target.0, target.1),
        probs,
    ))
}

/// Misalignment diagnostic: cosine similarity of the *original*-path final
/// stage patch tokens (projected to the joint space) against the
/// representative pair, softmaxed over the class pair, abnormal channel.
pub fn direct_similarity_baseline(
    weights: &EncoderWeights,
    image: &Tensor,
    pair: &RepresentativePair,
    temperature: f64,
    target: (usize, usize),
) -> Result<(AnomalyMap, ClassProbabilities)> {
    let forward = weights.forward_original(image)?;
    let probs = classify(&forward.class_embedding, pair, temperature);
    let final_stage = forward
        .stage_tokens
        .last()
        .ok_or_else(|| Error::InvalidConfig("encoder produced no stages".into()))?;
    let grid = direct_similarity_grid(weights, final_stage, pair, temperature);
    Ok((
        AnomalyMap::from_grid(grid, target.0, target.1),
        probs,
    ))
}

pub fn direct_similarity_grid(
    weights: &EncoderWeights,
    stage_tokens: &Tensor,
    pair: &RepresentativePair,
    temperature: f64,
) -> Tensor {
    let g = weights.config.grid();
    let patches = strip_class_token(stage_tokens);
    let joint = weights.project_to_joint(&patches);
    let mut grid = Tensor::zeros(&[g, g]);
    for l in 0..g * g {
        let sims = Tensor::from_vec(
            &[2],
            vec![
                crate::tensor::dot(joint.row(l), pair.normal.data()),
                crate::tensor::dot(joint.row(l), pair.abnormal.data()),
            ],
        );
        let p = sims.softmax(0, temperature);
        grid.data_mut()[l] = p.data()[1];
    }
    grid
}

/// Min-max normalize the pixel maps of an evaluation batch in place, using
/// one global min/max across the batch so rankings across images survive.
/// A constant batch maps to all zeros. Returns (min, max).
pub fn normalize_batch(maps: &mut [AnomalyMap]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in maps.iter() {
        lo = lo.min(m.pixel.min());
        hi = hi.max(m.pixel.max());
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 0.0);
    }
    let span = hi - lo;
    for m in maps.iter_mut() {
        if span > 0.0 {
            for v in m.pixel.data_mut() {
                *v = (*v - lo) / span;
            }
        } else {
            for v in m.pixel.data_mut() {
                *v = 0.0;
            }
        }
    }
    (lo, hi)
}

/// Fused image-level score: abnormal probability plus the maximum of the
/// (batch-normalized) pixel map.
pub fn anomaly_score(probs: &ClassProbabilities, map: &AnomalyMap) -> f64 {
    probs.abnormal + map.pixel.max()
}

/// Normalize the batch and fill every map's `image_score`.
pub fn score_batch(maps: &mut [AnomalyMap], probs: &[ClassProbabilities]) {
    assert_eq!(maps.len(), probs.len());
    normalize_batch(maps);
    for (m, p) in maps.iter_mut().zip(probs) {
        m.image_score = anomaly_score(p, m);
    }
}

/// Separable Gaussian blur for visualization parity; `sigma` in pixels,
/// kernel radius `ceil(3 sigma)`, edges clamped.
pub fn gaussian_smooth(map: &Tensor, sigma: f64) -> Tensor {
    assert_eq!(map.rank(), 2);
    if sigma <= 0.0 {
        return map.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for d in -radius..=radius {
        kernel.push((-(d as f64) * (d as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut horizontal = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                acc += kernel[ki] * map.at(&[y, clamp(x as isize + d, w)]);
            }
            horizontal.set(&[y, x], acc);
        }
    }
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                acc += kernel[ki] * horizontal.at(&[clamp(y as isize + d, h), x]);
            }
            out.set(&[y, x], acc);
        }
    }
    out
}
