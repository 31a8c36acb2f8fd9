//! Minimal ViT image encoder with stage partitioning.
//!
//! Standard pre-norm transformer: patch embedding, class token, positional
//! embedding, `layers` blocks of multi-head attention + FFN, final layernorm
//! and a visual projection into the joint embedding space. The layers are
//! grouped into `stages` of equal size; the raw token tensor at the end of
//! each stage is exposed so downstream consumers can tap features at several
//! depths.
//!
//! Only the class token is aligned with text features by the (frozen)
//! contrastive pretraining this encoder stands in for. [`project_to_joint`]
//! applies the same final layernorm + visual projection + unit normalization
//! to arbitrary tokens so patch tokens can be compared in that space too.
//!
//! Weights live in the named-tensor container (see [`crate::container`]);
//! `seeded_toy` builds a small deterministic model for desk-scale runs:
//! uniform weights scaled by 1/sqrt(width), zero biases, identity layernorm
//! parameters, all values on the f32 grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{to_f32_grid, Container};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-channel normalization constants conventionally used with
/// contrastively pretrained encoders.
pub const DEFAULT_PIXEL_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const DEFAULT_PIXEL_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub stages: usize,
    /// Joint-space dimensionality shared with the text features.
    pub embed_dim: usize,
    /// Scale value-value attention logits by 1/sqrt(head_dim).
    pub vv_scale: bool,
}

impl Default for ModelConfig {
    /// Desk-scale toy default: 240px/16px geometry of the full-size encoder
    /// with a narrow width so brute-force oracles stay fast.
    fn default() -> Self {
        ModelConfig {
            image_size: 240,
            patch_size: 16,
            width: 64,
            heads: 4,
            layers: 12,
            stages: 4,
            embed_dim: 32,
            vv_scale: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0
        {
            problems.push("image_size must be a positive multiple of patch_size");
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            problems.push("width must be a positive multiple of heads");
        }
        if self.layers == 0 || self.stages == 0 || self.layers % self.stages != 0 {
            problems.push("layers must be a positive multiple of stages");
        }
        if self.embed_dim == 0 {
            problems.push("embed_dim must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch token count L.
    pub fn patch_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_count(&self) -> usize {
        self.patch_count() + 1
    }

    pub fn layers_per_stage(&self) -> usize {
        self.layers / self.stages
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub config: ModelConfig,
    /// `[3 * patch^2, width]`, patch pixels flattened channel-major.
    pub patch_embed: Tensor,
    pub class_token: Tensor,
    /// `[L + 1, width]`, class token position first. Must match the token
    /// count exactly; inputs are resized rather than interpolating this.
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    /// `[width, embed_dim]`.
    pub visual_projection: Tensor,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

/// Row-wise layernorm with affine parameters.
fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (m, w) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[m, w]);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        let out_row = out.row_mut(i);
        for j in 0..w {
            out_row[j] = (row[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = x.matmul(w).expect("linear shape mismatch");
    let (m, n) = (y.shape()[0], y.shape()[1]);
    for i in 0..m {
        let row = y.row_mut(i);
        for j in 0..n {
            row[j] += b.data()[j];
        }
    }
    let _ = m;
    y
}

/// Per-head softmax attention probability matrices,
/// `softmax(q_h k_h^T * scale)` for each head.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize, scale: f64) -> Vec<Tensor> {
    let (m, width) = (q.shape()[0], q.shape()[1]);
    assert_eq!(k.shape(), q.shape());
    assert_eq!(width % heads, 0);
    let dh = width / heads;
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut logits = Tensor::zeros(&[m, m]);
        for i in 0..m {
            let qi = &q.row(i)[cols.clone()];
            for j in 0..m {
                let kj = &k.row(j)[cols.clone()];
                logits.set(&[i, j], crate::tensor::dot(qi, kj) * scale);
            }
        }
        out.push(logits.softmax(1, 1.0));
    }
    out
}

/// Multi-head attention mix: per head `softmax(q_h k_h^T * scale) v_h`,
/// heads concatenated. No output projection, no residual.
pub fn attention_mix(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scale: f64) -> Tensor {
    let (m, width) = (v.shape()[0], v.shape()[1]);
    let dh = width / heads;
    let probs = attention_probs(q, k, heads, scale);
    let mut out = Tensor::zeros(&[m, width]);
    for (h, p) in probs.iter().enumerate() {
        for i in 0..m {
            for j in 0..m {
                let w = p.at(&[i, j]);
                let src = &v.row(j)[h * dh..(h + 1) * dh];
                let dst = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final projected class token, unit-normalized, `[embed_dim]`.
    pub class_embedding: Tensor,
    /// Raw token tensors `[L + 1, width]` at the end of each stage.
    pub stage_tokens: Vec<Tensor>,
}

impl EncoderWeights {
    /// Deterministic small-model initialization. All weight matrices, the
    /// class token and the positional embedding draw from
    /// U(-1/sqrt(width), 1/sqrt(width)); biases are zero and layernorms
    /// start at identity. Values are snapped to the f32 grid so the weight
    /// container round trips bit for bit.
    pub fn seeded_toy(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (config.width as f64).sqrt();
        let mut draw = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| to_f32_grid((rng.random::<f64>() * 2.0 - 1.0) * scale))
                .collect();
            Tensor::from_vec(shape, data)
        };
        let w = config.width;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let patch_embed = draw(&[patch_dim, w]);
        let class_token = draw(&[w]);
        let pos_embed = draw(&[config.token_count(), w]);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerWeights {
                ln1_gamma: Tensor::filled(&[w], 1.0),
                ln1_beta: Tensor::zeros(&[w]),
                wq: draw(&[w, w]),
                bq: Tensor::zeros(&[w]),
                wk: draw(&[w, w]),
                bk: Tensor::zeros(&[w]),
                wv: draw(&[w, w]),
                bv: Tensor::zeros(&[w]),
                wo: draw(&[w, w]),
                bo: Tensor::zeros(&[w]),
                ln2_gamma: Tensor::filled(&[w], 1.0),
                ln2_beta: Tensor::zeros(&[w]),
                fc1_w: draw(&[w, 4 * w]),
                fc1_b: Tensor::zeros(&[4 * w]),
                fc2_w: draw(&[4 * w, w]),
                fc2_b: Tensor::zeros(&[w]),
            });
        }
        let final_ln_gamma = Tensor::filled(&[w], 1.0);
        let final_ln_beta = Tensor::zeros(&[w]);
        let visual_projection = draw(&[w, config.embed_dim]);
        Ok(EncoderWeights {
            config,
            patch_embed,
            class_token,
            pos_embed,
            layers,
            final_ln_gamma,
            final_ln_beta,
            visual_projection,
            pixel_mean: DEFAULT_PIXEL_MEAN,
            pixel_std: DEFAULT_PIXEL_STD,
        })
    }

    /// Resize to the model resolution (bilinear) and normalize channels.
    /// Input is `[H, W, 3]` with values in [0, 1].
    pub fn preprocess(&self, image: &Tensor) -> Result<Tensor> {
        if image.rank() != 3 || image.shape()[2] != 3 {
            return Err(Error::DimensionMismatch {
                context: "preprocess".into(),
                lhs: image.shape().to_vec(),
                rhs: vec![self.config.image_size, self.config.image_size, 3],
            });
        }
        let s = self.config.image_size;
        let resized = if image.shape()[0] == s && image.shape()[1] == s {
            image.clone()
        } else {
            bilinear_resize(image, s, s)
        };
        let mut out = resized;
        for v in 0..s * s {
            for c in 0..3 {
                let idx = v * 3 + c;
                out.data_mut()[idx] = (out.data()[idx] - self.pixel_mean[c]) / self.pixel_std[c];
            }
        }
        Ok(out)
    }

    /// Patchify + project + class token + positional embedding.
    /// Patch pixel vectors are flattened channel-major: `[c][py][px]`.
    pub fn embed_tokens(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.config.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::DimensionMismatch {
                context: "embed_tokens".into(),
                lhs: image.shape().to_vec(),
                rhs: vec![s, s, 3],
            });
        }
        let p = self.config.patch_size;
        let grid = self.config.grid();
        let patch_dim = 3 * p * p;
        let mut patches = Tensor::zeros(&[grid * grid, patch_dim]);
        for gy in 0..grid {
            for gx in 0..grid {
                let row = patches.row_mut(gy * grid + gx);
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            row[c * p * p + py * p + px] =
                                image.at(&[gy * p + py, gx * p + px, c]);
                        }
                    }
                }
            }
        }
        let projected = patches.matmul(&self.patch_embed)?;
        let w = self.config.width;
        let mut tokens = Tensor::zeros(&[self.config.token_count(), w]);
        tokens.row_mut(0).copy_from_slice(self.class_token.data());
        for t in 0..grid * grid {
            tokens.row_mut(t + 1).copy_from_slice(projected.row(t));
        }
        tokens.add(&self.pos_embed)
    }

    /// One pre-norm transformer block: attention then FFN, both residual.
    pub fn layer_forward(&self, tokens: &Tensor, layer_idx: usize) -> Tensor {
        let layer = &self.layers[layer_idx];
        let heads = self.config.heads;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();

        let h = layernorm(tokens, &layer.ln1_gamma, &layer.ln1_beta);
        let q = linear(&h, &layer.wq, &layer.bq);
        let k = linear(&h, &layer.wk, &layer.bk);
        let v = linear(&h, &layer.wv, &layer.bv);
        let mixed = attention_mix(&q, &k, &v, heads, scale);
        let projected = linear(&mixed, &layer.wo, &layer.bo);
        let x = tokens.add(&projected).expect("residual shape");

        let h2 = layernorm(&x, &layer.ln2_gamma, &layer.ln2_beta);
        let hidden = linear(&h2, &layer.fc1_w, &layer.fc1_b).map(gelu);
        let mlp = linear(&hidden, &layer.fc2_w, &layer.fc2_b);
        x.add(&mlp).expect("residual shape")
    }

    /// Run all layers, returning the final token tensor and the raw token
    /// tensor at the end of each stage.
    pub fn run_original(&self, tokens: &Tensor) -> (Tensor, Vec<Tensor>) {
        let per_stage = self.config.layers_per_stage();
        let mut x = tokens.clone();
        let mut stage_tokens = Vec::with_capacity(self.config.stages);
        for l in 0..self.config.layers {
            x = self.layer_forward(&x, l);
            if (l + 1) % per_stage == 0 {
                stage_tokens.push(x.clone());
            }
        }
        (x, stage_tokens)
    }

    /// Final layernorm + visual projection + row unit-normalization: the
    /// class-token route into the joint space, applied to arbitrary tokens.
    pub fn project_to_joint(&self, tokens: &Tensor) -> Tensor {
        let h = layernorm(tokens, &self.final_ln_gamma, &self.final_ln_beta);
        let projected = h.matmul(&self.visual_projection).expect("projection shape");
        let (normalized, _) = projected.l2_normalize(1);
        normalized
    }

    pub fn forward_original(&self, image: &Tensor) -> Result<ForwardOutput> {
        let tokens = self.embed_tokens(image)?;
        let (final_tokens, stage_tokens) = self.run_original(&tokens);
        let joint = self.project_to_joint(&final_tokens);
        let class_embedding = Tensor::from_vec(&[self.config.embed_dim], joint.row(0).to_vec());
        Ok(ForwardOutput {
            class_embedding,
            stage_tokens,
        })
    }

    pub fn forward_batch(&self, images: &[Tensor]) -> Result<Vec<ForwardOutput>> {
        images.iter().map(|im| self.forward_original(im)).collect()
    }

    // Container serialization. Tensor names are stable; `meta.config` holds
    // the geometry so a loaded file is self-describing.

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let cfg = &self.config;
        let meta = vec![
            cfg.image_size as f64,
            cfg.patch_size as f64,
            cfg.width as f64,
            cfg.heads as f64,
            cfg.layers as f64,
            cfg.stages as f64,
            cfg.embed_dim as f64,
            if cfg.vv_scale { 1.0 } else { 0.0 },
        ];
        c.insert("meta.config", Tensor::from_vec(&[8], meta)).unwrap();
        c.insert(
            "meta.preprocess.mean",
            Tensor::from_vec(&[3], self.pixel_mean.to_vec()),
        )
        .unwrap();
        c.insert(
            "meta.preprocess.std",
            Tensor::from_vec(&[3], self.pixel_std.to_vec()),
        )
        .unwrap();
        c.insert("patch_embed.weight", self.patch_embed.clone()).unwrap();
        c.insert("class_token", self.class_token.clone()).unwrap();
        c.insert("pos_embed", self.pos_embed.clone()).unwrap();
        for (i, l) in self.layers.iter().enumerate() {
            let mut put = |suffix: &str, t: &Tensor| {
                c.insert(&format!("layers.{i}.{suffix}"), t.clone()).unwrap();
            };
            put("ln1.gamma", &l.ln1_gamma);
            put("ln1.beta", &l.ln1_beta);
            put("attn.wq.weight", &l.wq);
            put("attn.wq.bias", &l.bq);
            put("attn.wk.weight", &l.wk);
            put("attn.wk.bias", &l.bk);
            put("attn.wv.weight", &l.wv);
            put("attn.wv.bias", &l.bv);
            put("attn.wo.weight", &l.wo);
            put("attn.wo.bias", &l.bo);
            put("ln2.gamma", &l.ln2_gamma);
            put("ln2.beta", &l.ln2_beta);
            put("mlp.fc1.weight", &l.fc1_w);
            put("mlp.fc1.bias", &l.fc1_b);
            put("mlp.fc2.weight", &l.fc2_w);
            put("mlp.fc2.bias", &l.fc2_b);
        }
        c.insert("final_ln.gamma", self.final_ln_gamma.clone()).unwrap();
        c.insert("final_ln.beta", self.final_ln_beta.clone()).unwrap();
        c.insert("visual_projection", self.visual_projection.clone())
            .unwrap();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.require_shaped("meta.config", &[8])?;
        let config = ModelConfig {
            image_size: meta.data()[0] as usize,
            patch_size: meta.data()[1] as usize,
            width: meta.data()[2] as usize,
            heads: meta.data()[3] as usize,
            layers: meta.data()[4] as usize,
            stages: meta.data()[5] as usize,
            embed_dim: meta.data()[6] as usize,
            vv_scale: meta.data()[7] != 0.0,
        };
        config.validate()?;
        let w = config.width;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let mean_t = c.require_shaped("meta.preprocess.mean", &[3])?;
        let std_t = c.require_shaped("meta.preprocess.std", &[3])?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let get = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                Ok(c.require_shaped(&format!("layers.{i}.{suffix}"), shape)?.clone())
            };
            layers.push(LayerWeights {
                ln1_gamma: get("ln1.gamma", &[w])?,
                ln1_beta: get("ln1.beta", &[w])?,
                wq: get("attn.wq.weight", &[w, w])?,
                bq: get("attn.wq.bias", &[w])?,
                wk: get("attn.wk.weight", &[w, w])?,
                bk: get("attn.wk.bias", &[w])?,
                wv: get("attn.wv.weight", &[w, w])?,
                bv: get("attn.wv.bias", &[w])?,
                wo: get("attn.wo.weight", &[w, w])?,
                bo: get("attn.wo.bias", &[w])?,
                ln2_gamma: get("ln2.gamma", &[w])?,
                ln2_beta: get("ln2.beta", &[w])?,
                fc1_w: get("mlp.fc1.weight", &[w, 4 * w])?,
                fc1_b: get("mlp.fc1.bias", &[4 * w])?,
                fc2_w: get("mlp.fc2.weight", &[4 * w, w])?,
                fc2_b: get("mlp.fc2.bias", &[w])?,
            });
        }
        Ok(EncoderWeights {
            pixel_mean: [mean_t.data()[0], mean_t.data()[1], mean_t.data()[2]],
            pixel_std: [std_t.data()[0], std_t.data()[1], std_t.data()[2]],
            patch_embed: c.require_shaped("patch_embed.weight", &[patch_dim, w])?.clone(),
            class_token: c.require_shaped("class_token", &[w])?.clone(),
            pos_embed: c
                .require_shaped("pos_embed", &[config.token_count(), w])?
                .clone(),
            layers,
            final_ln_gamma: c.require_shaped("final_ln.gamma", &[w])?.clone(),
            final_ln_beta: c.require_shaped("final_ln.beta", &[w])?.clone(),
            visual_projection: c
                .require_shaped("visual_projection", &[w, config.embed_dim])?
                .clone(),
            config,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().write_to(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read_from(path)?)
    }
}

/// Small config for fast tests: 32px images, 8px patches (5x5 grid would be
/// 40px; this yields a 4x4 grid), 2 stages.
#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 8,
        width: 16,
        heads: 4,
        layers: 4,
        stages: 2,
        embed_dim: 8,
        vv_scale: true,
    }
}

#[cfg(test)]
pub(crate) fn random_image(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(&[size, size, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_matches_contract() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.patch_count(), 225);
        assert_eq!(cfg.token_count(), 226);
        assert_eq!(cfg.stages, 4);
        assert_eq!(cfg.layers_per_stage(), 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny_config();
        cfg.image_size = 33;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.layers = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let cfg = tiny_config();
        let a = EncoderWeights::seeded_toy(cfg, 7).unwrap();
        let b = EncoderWeights::seeded_toy(cfg, 7).unwrap();
        assert_eq!(a.to_container().to_bytes(), b.to_container().to_bytes());
        let c = EncoderWeights::seeded_toy(cfg, 8).unwrap();
        assert_ne!(a.to_container().to_bytes(), c.to_container().to_bytes());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let cfg = tiny_config();
        let w = EncoderWeights::seeded_toy(cfg, 1).unwrap();
        let img = w.preprocess(&random_image(3, 32)).unwrap();
        let a = w.forward_original(&img).unwrap();
        let b = w.forward_original(&img).unwrap();
        assert_eq!(a.class_embedding, b.class_embedding);
        assert_eq!(a.stage_tokens.len(), cfg.stages);
        for (i, st) in a.stage_tokens.iter().enumerate() {
            assert_eq!(st.shape(), [cfg.token_count(), cfg.width]);
            assert_eq!(st, &b.stage_tokens[i]);
        }
        let n = crate::tensor::norm(a.class_embedding.data());
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn class_embedding_consistent_with_projection() {
        let cfg = tiny_config();
        let w = EncoderWeights::seeded_toy(cfg, 2).unwrap();
        let img = w.preprocess(&random_image(5, 32)).unwrap();
        let tokens = w.embed_tokens(&img).unwrap();
        let (final_tokens, _) = w.run_original(&tokens);
        let joint = w.project_to_joint(&final_tokens);
        let fwd = w.forward_original(&img).unwrap();
        assert_eq!(joint.row(0), fwd.class_embedding.data());
    }

    #[test]
    fn projection_rows_are_unit_even_for_zero_tokens() {
        let cfg = tiny_config();
        let w = EncoderWeights::seeded_toy(cfg, 4).unwrap();
        let mut tokens = Tensor::zeros(&[3, cfg.width]);
        for j in 0..cfg.width {
            tokens.set(&[1, j], (j as f64 - 3.0) * 0.1);
            tokens.set(&[2, j], 1.0);
        }
        let joint = w.project_to_joint(&tokens);
        assert!(joint.is_finite());
        for i in 0..3 {
            let n = crate::tensor::norm(joint.row(i));
            // A row can only be non-unit if the projection maps it to zero.
            assert!(n < 1e-9 || (n - 1.0).abs() < 1e-9, "row {i} norm {n}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_config();
        let w = EncoderWeights::seeded_toy(cfg, 6).unwrap();
        let img = w.preprocess(&random_image(9, 32)).unwrap();
        let tokens = w.embed_tokens(&img).unwrap();
        let h = layernorm(&tokens, &w.layers[0].ln1_gamma, &w.layers[0].ln1_beta);
        let q = linear(&h, &w.layers[0].wq, &w.layers[0].bq);
        let k = linear(&h, &w.layers[0].wk, &w.layers[0].bk);
        let probs = attention_probs(&q, &k, cfg.heads, 1.0 / (cfg.head_dim() as f64).sqrt());
        for p in probs {
            for i in 0..p.shape()[0] {
                let sum: f64 = p.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn patch_permutation_with_pos_embed_preserves_class_embedding() {
        let cfg = tiny_config();
        let w = EncoderWeights::seeded_toy(cfg, 11).unwrap();
        let img = w.preprocess(&random_image(21, 32)).unwrap();
        let tokens = w.embed_tokens(&img).unwrap();
        // Reverse the patch rows (class token stays at index 0). Because the
        // positional embedding was already added inside embed_tokens, the
        // permutation moves patches together with their positions.
        let n = tokens.shape()[0];
        let mut permuted = tokens.clone();
        for i in 1..n {
            let src = tokens.row(n - i);
            permuted.row_mut(i).copy_from_slice(src);
        }
        let (fa, _) = w.run_original(&tokens);
        let (fb, _) = w.run_original(&permuted);
        let ja = w.project_to_joint(&fa);
        let jb = w.project_to_joint(&fb);
        for j in 0..cfg.embed_dim {
            assert!(
                (ja.at(&[0, j]) - jb.at(&[0, j])).abs() < 1e-5,
                "class embedding changed under patch permutation"
            );
        }
    }

    #[test]
    fn batch_forward_equals_per_image() {
        let cfg = tiny_config();
        let w = EncoderWeights::seeded_toy(cfg, 12).unwrap();
        let images: Vec<Tensor> = (0..3)
            .map(|s| w.preprocess(&random_image(s, 32)).unwrap())
            .collect();
        let batch = w.forward_batch(&images).unwrap();
        for (img, out) in images.iter().zip(&batch) {
            let single = w.forward_original(img).unwrap();
            assert_eq!(single.class_embedding, out.class_embedding);
            assert_eq!(single.stage_tokens, out.stage_tokens);
        }
    }

    #[test]
    fn container_round_trip_is_bitwise() {
        let cfg = tiny_config();
        let w = EncoderWeights::seeded_toy(cfg, 42).unwrap();
        let bytes = w.to_container().to_bytes();
        let back = EncoderWeights::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_container().to_bytes(), bytes);
    }

    #[test]
    fn missing_tensor_is_named() {
        let cfg = tiny_config();
        let w = EncoderWeights::seeded_toy(cfg, 42).unwrap();
        let full = w.to_container();
        let mut partial = Container::new();
        for (name, t) in full.iter() {
            if name != "visual_projection" {
                partial.insert(name, t.clone()).unwrap();
            }
        }
        match EncoderWeights::from_container(&partial) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "visual_projection"),
            other => panic!("expected MissingTensor, got {other:?}"),
        }
    }

    #[test]
    fn preprocess_resizes_and_normalizes() {
        let cfg = tiny_config();
        let w = EncoderWeights::seeded_toy(cfg, 1).unwrap();
        let img = random_image(2, 48);
        let out = w.preprocess(&img).unwrap();
        assert_eq!(out.shape(), [32, 32, 3]);
        // Constant 0.5 image maps to the per-channel normalized constant.
        let half = Tensor::filled(&[16, 16, 3], 0.5);
        let out = w.preprocess(&half).unwrap();
        for c in 0..3 {
            let expect = (0.5 - w.pixel_mean[c]) / w.pixel_std[c];
            assert!((out.at(&[7, 9, c]) - expect).abs() < 1e-9);
        }
    }
}
