//! Trainable per-stage linear alignment of patch tokens into the joint
//! embedding space, the fine-tuned anomaly map, focal + dice losses with
//! analytic gradients, and the training loop.
//!
//! Only the class token of the encoder is aligned with text features; raw
//! patch tokens are not. One affine map `width -> embed_dim` per stage fixes
//! that: per stage, patch tokens are mapped, row-normalized, scored against
//! the representative pair, and softmaxed over the class pair; the fine-tuned
//! map is the sum of the per-stage abnormal channels and combines additively
//! with the training-free map.
//!
//! Training freezes the backbone by construction — it only ever sees
//! precomputed stage features — and optimizes the projections with
//! adaptive-moment estimation. The loss operates on the pixel-level
//! upsampled map (bilinear to the ground-truth resolution, divided by the
//! stage count so values land in (0, 1)). Gradients flow analytically
//! through the loss, the upsampling, the pair softmax, the row
//! normalization, and the affine maps; the test suites check every path
//! against central finite differences.
//!
//! Parameter updates are computed in f64 and snapped to the f32 grid so the
//! projection container round trips losslessly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{to_f32_grid, Container};
use crate::detector::strip_class_token;
use crate::encoder::{EncoderWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::selector::RepresentativePair;
use crate::tensor::Tensor;

/// Clamp bound for map values entering the logarithms.
pub const CLAMP_DELTA: f64 = 1e-7;
const NORM_EPS: f64 = 1e-12;

/// One affine map `width -> embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageProjection {
    /// `[width, embed_dim]`
    pub weight: Tensor,
    /// `[embed_dim]`
    pub bias: Tensor,
}

/// One projection per stage. Multi-layer mapping variants exist behind
/// [`MappingDepth`] but the single linear layer is the default.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub stages: Vec<StageProjection>,
}

/// Depth of the per-stage mapping network. Deeper variants overfit quickly
/// and are non-default; they reuse `width`-sized hidden layers with an
/// optional ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MappingDepth {
    pub layers: usize,
    pub relu: bool,
}

impl Default for MappingDepth {
    fn default() -> Self {
        MappingDepth {
            layers: 1,
            relu: false,
        }
    }
}

impl Projections {
    /// Symmetric uniform fan-based init (bound fan_in^-1.5), zero biases,
    /// values on the f32 grid. The mapped rows are unit-normalized
    /// downstream, so the init scale does not change the initial function;
    /// keeping it well below the optimizer's total step budget lets the
    /// fixed-step updates set the map's direction within few epochs.
    pub fn seeded(config: &ModelConfig, seed: u64) -> Self {
        let fan = config.width as f64;
        Self::seeded_scaled(config, seed, 1.0 / (fan * fan.sqrt()))
    }

    /// Seeded init with an explicit uniform bound.
    pub fn seeded_scaled(config: &ModelConfig, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (0..config.stages)
            .map(|_| {
                let data = (0..config.width * config.embed_dim)
                    .map(|_| to_f32_grid((rng.random::<f64>() * 2.0 - 1.0) * scale))
                    .collect();
                StageProjection {
                    weight: Tensor::from_vec(&[config.width, config.embed_dim], data),
                    bias: Tensor::zeros(&[config.embed_dim]),
                }
            })
            .collect();
        Projections { stages }
    }

    pub fn zeros_like(&self) -> Vec<(Tensor, Tensor)> {
        self.stages
            .iter()
            .map(|s| (Tensor::zeros(s.weight.shape()), Tensor::zeros(s.bias.shape())))
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (j, s) in self.stages.iter().enumerate() {
            c.insert(&format!("proj.{j}.weight"), s.weight.clone()).unwrap();
            c.insert(&format!("proj.{j}.bias"), s.bias.clone()).unwrap();
        }
        c
    }

    pub fn from_container(c: &Container, config: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(config.stages);
        for j in 0..config.stages {
            let weight = c
                .require_shaped(
                    &format!("proj.{j}.weight"),
                    &[config.width, config.embed_dim],
                )?
                .clone();
            let bias = c
                .require_shaped(&format!("proj.{j}.bias"), &[config.embed_dim])?
                .clone();
            stages.push(StageProjection { weight, bias });
        }
        Ok(Projections { stages })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().write_to(path)
    }

    pub fn load(path: &std::path::Path, config: &ModelConfig) -> Result<Self> {
        Self::from_container(&Container::read_from(path)?, config)
    }
}

/// Focal/dice loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            gamma: 2.0,
            epsilon: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(
                "loss requires gamma >= 0 and epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer settings: adaptive-moment estimation with the conventional
/// decay rates, fixed learning rate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 5,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "training requires non-negative rate and positive epochs/batch".into(),
            ));
        }
        Ok(())
    }
}

/// Precomputed per-image training inputs: original-path patch tokens per
/// stage and the binary ground-truth mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// Per stage `[L, width]`, class token removed.
    pub stage_patches: Vec<Tensor>,
    /// `[H, W]` with values in {0, 1}.
    pub mask: Tensor,
}

/// Encode one preprocessed image and package its stage features with a mask.
pub fn prepare_sample(
    weights: &EncoderWeights,
    image: &Tensor,
    mask: Tensor,
) -> Result<TrainSample> {
    let forward = weights.forward_original(image)?;
    Ok(TrainSample {
        stage_patches: forward
            .stage_tokens
            .iter()
            .map(strip_class_token)
            .collect(),
        mask,
    })
}

struct StageCache {
    /// Pre-normalization mapped rows `[L, embed_dim]`.
    raw: Tensor,
    norms: Vec<f64>,
    unit: Tensor,
    p_abnormal: Vec<f64>,
}

fn stage_forward(
    patches: &Tensor,
    projection: &StageProjection,
    pair: &RepresentativePair,
    temperature: f64,
) -> StageCache {
    let l = patches.shape()[0];
    let c = projection.weight.shape()[1];
    let mut raw = patches.matmul(&projection.weight).expect("projection shape");
    for i in 0..l {
        let row = raw.row_mut(i);
        for j in 0..c {
            row[j] += projection.bias.data()[j];
        }
    }
    let mut norms = Vec::with_capacity(l);
    let mut unit = Tensor::zeros(&[l, c]);
    for i in 0..l {
        let n = crate::tensor::norm(raw.row(i));
        norms.push(n);
        if n > NORM_EPS {
            let dst = unit.row_mut(i);
            for (d, v) in dst.iter_mut().zip(raw.row(i)) {
                *d = v / n;
            }
        }
        // Rows that map to zero stay zero: both similarities vanish and the
        // pair softmax degenerates to 0.5.
    }
    let mut p_abnormal = Vec::with_capacity(l);
    for i in 0..l {
        let zn = crate::tensor::dot(unit.row(i), pair.normal.data()) / temperature;
        let za = crate::tensor::dot(unit.row(i), pair.abnormal.data()) / temperature;
        let m = zn.max(za);
        let en = (zn - m).exp();
        let ea = (za - m).exp();
        p_abnormal.push(ea / (en + ea));
    }
    StageCache {
        raw,
        norms,
        unit,
        p_abnormal,
    }
}

/// Per-stage fine-tuned grids from full stage token tensors `[L+1, width]`:
/// affine map + row normalization + pair softmax, abnormal channel. Each
/// grid's values lie in (0, 1).
pub fn mapped_stage_grids(
    stage_tokens: &[Tensor],
    projections: &Projections,
    pair: &RepresentativePair,
    temperature: f64,
    grid: usize,
) -> Result<Vec<Tensor>> {
    if stage_tokens.len() != projections.stages.len() {
        return Err(Error::DimensionMismatch {
            context: "mapped_stage_grids stages".into(),
            lhs: vec![stage_tokens.len()],
            rhs: vec![projections.stages.len()],
        });
    }
    let mut out = Vec::with_capacity(stage_tokens.len());
    for (tokens, proj) in stage_tokens.iter().zip(&projections.stages) {
        let patches = strip_class_token(tokens);
        if patches.shape()[0] != grid * grid {
            return Err(Error::DimensionMismatch {
                context: "mapped_stage_grids grid".into(),
                lhs: vec![patches.shape()[0]],
                rhs: vec![grid * grid],
            });
        }
        let cache = stage_forward(&patches, proj, pair, temperature);
        out.push(Tensor::from_vec(&[grid, grid], cache.p_abnormal));
    }
    Ok(out)
}

/// Fine-tuned anomaly map: the sum of the per-stage grids, values in
/// (0, stage count).
pub fn mapped_anomaly_map(
    stage_tokens: &[Tensor],
    projections: &Projections,
    pair: &RepresentativePair,
    temperature: f64,
    grid: usize,
) -> Result<Tensor> {
    let grids = mapped_stage_grids(stage_tokens, projections, pair, temperature, grid)?;
    let mut out = Tensor::zeros(&[grid, grid]);
    for g in &grids {
        for (o, p) in out.data_mut().iter_mut().zip(g.data()) {
            *o += p;
        }
    }
    Ok(out)
}

/// Elementwise combination of the training-free and fine-tuned maps.
pub fn combine(m: &Tensor, m_ft: &Tensor) -> Result<Tensor> {
    m.add(m_ft)
}

fn validate_binary(mask: &Tensor) -> Result<()> {
    for &v in mask.data() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::NonBinaryMask(format!(
                "mask contains value {v}, expected 0 or 1"
            )));
        }
    }
    Ok(())
}

/// Focal + dice loss of a prediction map in (0, 1) against a binary mask.
/// Returns the value and the analytic gradient w.r.t. the prediction map.
/// Inputs are clamped to `[CLAMP_DELTA, 1 - CLAMP_DELTA]`; gradients are zero
/// where the clamp is active.
pub fn pixel_loss(
    prediction: &Tensor,
    ground_truth: &Tensor,
    cfg: &LossConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    if prediction.shape() != ground_truth.shape() {
        return Err(Error::DimensionMismatch {
            context: "pixel_loss".into(),
            lhs: prediction.shape().to_vec(),
            rhs: ground_truth.shape().to_vec(),
        });
    }
    validate_binary(ground_truth)?;
    let n = prediction.len() as f64;
    let (alpha, gamma, eps) = (cfg.alpha, cfg.gamma, cfg.epsilon);

    let mut grad = Tensor::zeros(prediction.shape());
    let mut focal_sum = 0.0;
    let mut inter = 0.0; // sum(m * g)
    let mut sum_m = 0.0;
    let mut sum_g = 0.0;
    let clamped: Vec<(f64, bool)> = prediction
        .data()
        .iter()
        .map(|&v| {
            let c = v.clamp(CLAMP_DELTA, 1.0 - CLAMP_DELTA);
            (c, (v > CLAMP_DELTA) && (v < 1.0 - CLAMP_DELTA))
        })
        .collect();
    for ((m, _), &g) in clamped.iter().zip(ground_truth.data()) {
        focal_sum += -alpha * (1.0 - m).powf(gamma) * m.ln() * g
            - (1.0 - alpha) * m.powf(gamma) * (1.0 - m).ln() * (1.0 - g);
        inter += m * g;
        sum_m += m;
        sum_g += g;
    }
    let focal = focal_sum / n;
    let a = 2.0 * inter + eps;
    let b = sum_m + sum_g + eps;
    let dice = 1.0 - a / b;
    let value = focal + dice;

    for (i, ((m, active), &g)) in clamped.iter().zip(ground_truth.data()).enumerate() {
        if !active {
            continue;
        }
        let m = *m;
        // d/dm of the focal term (before the mean):
        //   -alpha g [ -gamma (1-m)^(g-1) ln m + (1-m)^gamma / m ]
        //   -(1-alpha)(1-g) [ gamma m^(g-1) ln(1-m) - m^gamma / (1-m) ]
        let focal_grad = -alpha
            * g
            * (-gamma * (1.0 - m).powf(gamma - 1.0) * m.ln() + (1.0 - m).powf(gamma) / m)
            - (1.0 - alpha)
                * (1.0 - g)
                * (gamma * m.powf(gamma - 1.0) * (1.0 - m).ln() - m.powf(gamma) / (1.0 - m));
        // d/dm of dice = -(2 g b - a) / b^2.
        let dice_grad = -(2.0 * g * b - a) / (b * b);
        grad.data_mut()[i] = focal_grad / n + dice_grad;
    }
    Ok((value, grad))
}

/// Transpose of the aligned-corners bilinear upsampling: scatter pixel
/// gradients back onto the grid corners with the interpolation weights.
fn upsample_transpose(grad_pixels: &Tensor, grid_h: usize, grid_w: usize) -> Tensor {
    let (out_h, out_w) = (grad_pixels.shape()[0], grad_pixels.shape()[1]);
    let mut grad_grid = Tensor::zeros(&[grid_h, grid_w]);
    let sy = |y: usize| -> f64 {
        if out_h == 1 || grid_h == 1 {
            0.0
        } else {
            y as f64 * (grid_h - 1) as f64 / (out_h - 1) as f64
        }
    };
    let sx = |x: usize| -> f64 {
        if out_w == 1 || grid_w == 1 {
            0.0
        } else {
            x as f64 * (grid_w - 1) as f64 / (out_w - 1) as f64
        }
    };
    for y in 0..out_h {
        let fy = sy(y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(grid_h - 1);
        let dy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = sx(x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(grid_w - 1);
            let dx = fx - x0 as f64;
            let g = grad_pixels.at(&[y, x]);
            grad_grid.data_mut()[y0 * grid_w + x0] += g * (1.0 - dy) * (1.0 - dx);
            grad_grid.data_mut()[y0 * grid_w + x1] += g * (1.0 - dy) * dx;
            grad_grid.data_mut()[y1 * grid_w + x0] += g * dy * (1.0 - dx);
            grad_grid.data_mut()[y1 * grid_w + x1] += g * dy * dx;
        }
    }
    grad_grid
}

/// Loss of one sample plus analytic gradients for every projection.
/// The prediction entering the loss is `upsample(sum of stage maps) / J`.
pub fn sample_loss_and_grads(
    sample: &TrainSample,
    projections: &Projections,
    pair: &RepresentativePair,
    temperature: f64,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<(Tensor, Tensor)>)> {
    let stages = projections.stages.len();
    if sample.stage_patches.len() != stages {
        return Err(Error::DimensionMismatch {
            context: "sample stages".into(),
            lhs: vec![sample.stage_patches.len()],
            rhs: vec![stages],
        });
    }
    let l = sample.stage_patches[0].shape()[0];
    let grid = (l as f64).sqrt() as usize;
    assert_eq!(grid * grid, l, "patch count must be a square grid");
    let (gt_h, gt_w) = (sample.mask.shape()[0], sample.mask.shape()[1]);

    let caches: Vec<StageCache> = sample
        .stage_patches
        .iter()
        .zip(&projections.stages)
        .map(|(patches, proj)| stage_forward(patches, proj, pair, temperature))
        .collect();

    let mut grid_sum = Tensor::zeros(&[grid, grid]);
    for cache in &caches {
        for (o, p) in grid_sum.data_mut().iter_mut().zip(&cache.p_abnormal) {
            *o += p;
        }
    }
    let prediction =
        crate::detector::upsample(&grid_sum, gt_h, gt_w).scale(1.0 / stages as f64);
    let (value, grad_pred) = pixel_loss(&prediction, &sample.mask, loss_cfg)?;

    let grad_grid = upsample_transpose(&grad_pred, grid, grid).scale(1.0 / stages as f64);

    let mut grads = projections.zeros_like();
    for ((cache, patches), (gw, gb)) in caches
        .iter()
        .zip(&sample.stage_patches)
        .zip(grads.iter_mut())
    {
        let c = cache.raw.shape()[1];
        for li in 0..l {
            let dp = grad_grid.data()[li];
            if dp == 0.0 || cache.norms[li] <= NORM_EPS {
                continue;
            }
            let p = cache.p_abnormal[li];
            // Pair softmax: dp_a/d(z_a) = p(1-p), dp_a/d(z_n) = -p(1-p);
            // z = u . t / tau, so du = dp * p(1-p)/tau * (t_a - t_n).
            let coeff = dp * p * (1.0 - p) / temperature;
            let u = cache.unit.row(li);
            let mut du = vec![0.0; c];
            for j in 0..c {
                du[j] = coeff * (pair.abnormal.data()[j] - pair.normal.data()[j]);
            }
            // Row normalization: d(raw) = (du - (du . u) u) / norm.
            let du_dot_u = crate::tensor::dot(&du, u);
            let inv_norm = 1.0 / cache.norms[li];
            let mut draw = vec![0.0; c];
            for j in 0..c {
                draw[j] = (du[j] - du_dot_u * u[j]) * inv_norm;
            }
            // Affine map: dW += patch^T draw; db += draw.
            let patch_row = patches.row(li);
            for (w_i, &pv) in patch_row.iter().enumerate() {
                let dst = &mut gw.data_mut()[w_i * c..(w_i + 1) * c];
                for (d, dr) in dst.iter_mut().zip(&draw) {
                    *d += pv * dr;
                }
            }
            for (d, dr) in gb.data_mut().iter_mut().zip(&draw) {
                *d += dr;
            }
        }
    }
    Ok((value, grads))
}

/// Mean loss over samples, no gradients. This is the scalar function the
/// finite-difference oracle probes.
pub fn total_loss(
    samples: &[TrainSample],
    projections: &Projections,
    pair: &RepresentativePair,
    temperature: f64,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDistribution("no training samples".into()));
    }
    let mut acc = 0.0;
    for sample in samples {
        let (v, _) = sample_loss_and_grads(sample, projections, pair, temperature, loss_cfg)?;
        acc += v;
    }
    Ok(acc / samples.len() as f64)
}

/// Mean loss and mean gradients over samples, accumulated in sample order.
pub fn total_loss_and_grads(
    samples: &[TrainSample],
    projections: &Projections,
    pair: &RepresentativePair,
    temperature: f64,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<(Tensor, Tensor)>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDistribution("no training samples".into()));
    }
    let mut acc_loss = 0.0;
    let mut acc = projections.zeros_like();
    for sample in samples {
        let (v, grads) =
            sample_loss_and_grads(sample, projections, pair, temperature, loss_cfg)?;
        acc_loss += v;
        for ((aw, ab), (gw, gb)) in acc.iter_mut().zip(&grads) {
            for (a, g) in aw.data_mut().iter_mut().zip(gw.data()) {
                *a += g;
            }
            for (a, g) in ab.data_mut().iter_mut().zip(gb.data()) {
                *a += g;
            }
        }
    }
    let scale = 1.0 / samples.len() as f64;
    for (aw, ab) in acc.iter_mut() {
        for a in aw.data_mut() {
            *a *= scale;
        }
        for a in ab.data_mut() {
            *a *= scale;
        }
    }
    Ok((acc_loss * scale, acc))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct TrainOutcome {
    pub projections: Projections,
    /// Mean per-sample loss of each epoch, summed in sample-index order.
    pub epoch_losses: Vec<f64>,
}

/// Train the projections. Deterministic given the seed: one ChaCha stream
/// drives the per-epoch shuffles, batches accumulate in sample order, and
/// parameters snap to the f32 grid after every update. `epoch_hook` runs
/// after each epoch with the epoch index, current projections, and the
/// epoch's mean loss.
pub fn train(
    samples: &[TrainSample],
    pair: &RepresentativePair,
    temperature: f64,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    init: Projections,
    mut epoch_hook: impl FnMut(usize, &Projections, f64),
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDistribution("no training samples".into()));
    }
    for s in samples {
        if s.stage_patches.len() != init.stages.len() {
            return Err(Error::DimensionMismatch {
                context: "train stages".into(),
                lhs: vec![s.stage_patches.len()],
                rhs: vec![init.stages.len()],
            });
        }
    }

    let mut projections = init;
    let mut adam: Vec<(AdamState, AdamState)> = projections
        .stages
        .iter()
        .map(|s| {
            (
                AdamState {
                    m: vec![0.0; s.weight.len()],
                    v: vec![0.0; s.weight.len()],
                },
                AdamState {
                    m: vec![0.0; s.bias.len()],
                    v: vec![0.0; s.bias.len()],
                },
            )
        })
        .collect();
    let mut step = 0u32;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut epoch_losses = Vec::with_capacity(train_cfg.epochs);

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut sample_losses = vec![0.0; samples.len()];
        for batch in order.chunks(train_cfg.batch_size) {
            let mut acc = projections.zeros_like();
            for &idx in batch {
                let (v, grads) = sample_loss_and_grads(
                    &samples[idx],
                    &projections,
                    pair,
                    temperature,
                    loss_cfg,
                )?;
                sample_losses[idx] = v;
                for ((aw, ab), (gw, gb)) in acc.iter_mut().zip(&grads) {
                    for (a, g) in aw.data_mut().iter_mut().zip(gw.data()) {
                        *a += g;
                    }
                    for (a, g) in ab.data_mut().iter_mut().zip(gb.data()) {
                        *a += g;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let bias1 = 1.0 - train_cfg.beta1.powi(step as i32);
            let bias2 = 1.0 - train_cfg.beta2.powi(step as i32);
            for (stage_idx, (gw, gb)) in acc.iter().enumerate() {
                let (wstate, bstate) = &mut adam[stage_idx];
                adam_update(
                    projections.stages[stage_idx].weight.data_mut(),
                    wstate,
                    gw.data(),
                    scale,
                    train_cfg,
                    bias1,
                    bias2,
                );
                adam_update(
                    projections.stages[stage_idx].bias.data_mut(),
                    bstate,
                    gb.data(),
                    scale,
                    train_cfg,
                    bias1,
                    bias2,
                );
            }
        }
        // Sum in index order so the epoch loss is shuffle-independent.
        let mean = sample_losses.iter().sum::<f64>() / samples.len() as f64;
        epoch_losses.push(mean);
        epoch_hook(epoch, &projections, mean);
    }
    Ok(TrainOutcome {
        projections,
        epoch_losses,
    })
}

fn adam_update(
    params: &mut [f64],
    state: &mut AdamState,
    grads: &[f64],
    grad_scale: f64,
    cfg: &TrainConfig,
    bias1: f64,
    bias2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i] * grad_scale;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] = to_f32_grid(
            params[i] - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps),
        );
    }
}
