//! Attention and feature surgery for patch-level predictions.
//!
//! Patch tokens compared directly against text features produce two failure
//! modes: predictions that oppose the ground truth and spurious highlights
//! shared across unrelated prompts. Two modifications address them.
//!
//! **Value-value attention** replaces query-key attention with
//! `softmax(V V^T) V` inside a parallel "surgery" pathway, and the FFN is
//! dropped there. Each token then attends most strongly to itself (for unit,
//! pairwise-distinct value rows the diagonal of the softmax is the strict
//! row maximum), so abnormal tokens are not washed out by their normal
//! neighbors. The surgery layer reuses the original layer's `wv`/`wo` (and
//! its pre-attention layernorm); it owns no parameters of its own.
//!
//! **Dual-path blocks**: the encoder's stages stay untouched; each stage
//! grows a parallel accumulator seeded from the stage input and fed by the
//! surgery layer applied to every original-path intermediate:
//!
//! ```text
//! n_0 = arch(x_in)                      x_in = previous stage output
//! n_i = n_{i-1} + arch(o_{i-1})         o_i  = i-th original layer output
//! ```
//!
//! The original path is never influenced by the surgery path (bitwise).
//!
//! **Feature surgery** removes the class-shared component of the token-text
//! products: with per-class weights `w = s / mean(s)` from the image-level
//! probabilities, the redundant component is the class-mean of the weighted
//! elementwise products, and the prediction is the channel sum of what
//! remains.

use crate::encoder::{attention_mix, attention_probs, EncoderWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-head V-V attention with residual:
/// `tokens + softmax(V V^T * scale) V . wo`, where `V = tokens . wv + bv`.
/// `scale` is `1/sqrt(head_dim)` when enabled, 1 otherwise.
pub fn vv_attention(
    tokens: &Tensor,
    wv: &Tensor,
    bv: &Tensor,
    wo: &Tensor,
    bo: &Tensor,
    heads: usize,
    scaled: bool,
) -> Tensor {
    let mixed = vv_mix(tokens, wv, bv, heads, scaled);
    let projected = add_bias(&mixed.matmul(wo).expect("wo shape"), bo);
    tokens.add(&projected).expect("residual shape")
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    for i in 0..m {
        let row = out.row_mut(i);
        for j in 0..n {
            row[j] += b.data()[j];
        }
    }
    out
}

fn vv_mix(tokens: &Tensor, wv: &Tensor, bv: &Tensor, heads: usize, scaled: bool) -> Tensor {
    let v = add_bias(&tokens.matmul(wv).expect("wv shape"), bv);
    let dh = tokens.shape()[1] / heads;
    let scale = if scaled { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    attention_mix(&v, &v, &v, heads, scale)
}

/// Per-head V-V attention probability matrices, for inspection and tests.
pub fn vv_attention_probs(
    tokens: &Tensor,
    wv: &Tensor,
    bv: &Tensor,
    heads: usize,
    scaled: bool,
) -> Vec<Tensor> {
    let v = add_bias(&tokens.matmul(wv).expect("wv shape"), bv);
    let dh = tokens.shape()[1] / heads;
    let scale = if scaled { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    attention_probs(&v, &v, heads, scale)
}

/// The surgery layer: pre-attention layernorm and residual are retained from
/// the original block; only QK -> VV and the FFN removal differ.
fn surgery_layer(weights: &EncoderWeights, tokens: &Tensor, layer_idx: usize) -> Tensor {
    let layer = &weights.layers[layer_idx];
    let normed = layernorm_like(tokens, &layer.ln1_gamma, &layer.ln1_beta);
    let mixed = vv_mix(
        &normed,
        &layer.wv,
        &layer.bv,
        weights.config.heads,
        weights.config.vv_scale,
    );
    let projected = add_bias(&mixed.matmul(&layer.wo).expect("wo shape"), &layer.bo);
    tokens.add(&projected).expect("residual shape")
}

fn layernorm_like(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (m, w) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[m, w]);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + crate::encoder::LAYERNORM_EPS).sqrt();
        let o = out.row_mut(i);
        for j in 0..w {
            o[j] = (row[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

/// Original and surgery token tensors at the end of one dual-path block.
#[derive(Debug, Clone)]
pub struct DualPathState {
    pub original: Tensor,
    pub surgery: Tensor,
}

/// Run one dual-path block of `k` layers starting from `input` (the previous
/// stage's original output). `layer_range` indexes into the encoder layers.
pub fn dual_path_block(
    weights: &EncoderWeights,
    input: &Tensor,
    layer_range: std::ops::Range<usize>,
) -> Result<DualPathState> {
    if layer_range.is_empty() {
        return Err(Error::InvalidConfig(
            "dual-path block needs at least one layer".into(),
        ));
    }
    let mut original = input.clone();
    let mut surgery = surgery_layer(weights, input, layer_range.start);
    for l in layer_range {
        // The surgery accumulator consumes the original intermediate from
        // *before* this layer, then the original path advances.
        let arch = surgery_layer(weights, &original, l);
        original = weights.layer_forward(&original, l);
        surgery = surgery.add(&arch)?;
    }
    Ok(DualPathState { original, surgery })
}

/// All stage blocks in sequence. Per stage, the surgery path restarts from
/// the stage input; the original path is exactly the plain encoder.
#[derive(Debug, Clone)]
pub struct DualPathOutput {
    pub class_embedding: Tensor,
    pub original_stages: Vec<Tensor>,
    pub surgery_stages: Vec<Tensor>,
}

pub fn forward_dual_path(weights: &EncoderWeights, image: &Tensor) -> Result<DualPathOutput> {
    let cfg = &weights.config;
    let per_stage = cfg.layers_per_stage();
    let tokens = weights.embed_tokens(image)?;
    let mut original_stages = Vec::with_capacity(cfg.stages);
    let mut surgery_stages = Vec::with_capacity(cfg.stages);
    let mut x = tokens;
    for stage in 0..cfg.stages {
        let range = stage * per_stage..(stage + 1) * per_stage;
        let state = dual_path_block(weights, &x, range)?;
        x = state.original.clone();
        original_stages.push(state.original);
        surgery_stages.push(state.surgery);
    }
    let joint = weights.project_to_joint(&x);
    let class_embedding = Tensor::from_vec(&[cfg.embed_dim], joint.row(0).to_vec());
    Ok(DualPathOutput {
        class_embedding,
        original_stages,
        surgery_stages,
    })
}

/// Feature surgery (per-stage prediction head).
///
/// Inputs: unit patch rows `[L, C]`, unit text rows `[N, C]`, class
/// probabilities `s` of length `N`. With `w = s / mean(s)`:
///
/// ```text
/// products[l,n,c] = patch[l,c] * text[n,c]
/// redundant[l,c]  = mean_n(w[n] * products[l,n,c])
/// out[l,n]        = sum_c(products[l,n,c] - redundant[l,c])
/// ```
pub fn feature_surgery(
    patch_features: &Tensor,
    text_features: &Tensor,
    class_probs: &[f64],
) -> Result<Tensor> {
    if patch_features.rank() != 2 || text_features.rank() != 2 {
        return Err(Error::DimensionMismatch {
            context: "feature_surgery rank".into(),
            lhs: patch_features.shape().to_vec(),
            rhs: text_features.shape().to_vec(),
        });
    }
    let (l, c) = (patch_features.shape()[0], patch_features.shape()[1]);
    let (n, ct) = (text_features.shape()[0], text_features.shape()[1]);
    if c != ct || n != class_probs.len() || n == 0 {
        return Err(Error::DimensionMismatch {
            context: "feature_surgery classes".into(),
            lhs: vec![n, ct, class_probs.len()],
            rhs: vec![n, c, n],
        });
    }
    let mean_s = class_probs.iter().sum::<f64>() / n as f64;
    let w: Vec<f64> = class_probs.iter().map(|s| s / mean_s).collect();

    let mut out = Tensor::zeros(&[l, n]);
    let mut products = vec![0.0f64; n * c];
    for li in 0..l {
        let patch = patch_features.row(li);
        for ni in 0..n {
            let text = text_features.row(ni);
            for ci in 0..c {
                products[ni * c + ci] = patch[ci] * text[ci];
            }
        }
        // redundant[c] = mean_n(w[n] * products[n, c])
        for ci in 0..c {
            let mut red = 0.0;
            for ni in 0..n {
                red += w[ni] * products[ni * c + ci];
            }
            red /= n as f64;
            for ni in 0..n {
                products[ni * c + ci] -= red;
            }
        }
        for ni in 0..n {
            let sum: f64 = products[ni * c..(ni + 1) * c].iter().sum();
            out.set(&[li, ni], sum);
        }
    }
    Ok(out)
}
