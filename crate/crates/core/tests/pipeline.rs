//! Cross-module workflow tests at desk scale: synthetic data through the
//! full detection and training pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsad_core::align::{
    combine, mapped_anomaly_map, prepare_sample, train, LossConfig, Projections, TrainConfig,
    TrainSample,
};
use zsad_core::data::dataset::Label;
use zsad_core::data::images::{load_image, load_mask};
use zsad_core::data::synth::{generate_synthetic, SyntheticSpec};
use zsad_core::detector::{score_batch, sdp_forward, AnomalyMap};
use zsad_core::encoder::{EncoderWeights, ModelConfig};
use zsad_core::metrics::{MetricsReport, ScoredSet};
use zsad_core::prompts::{preset, PromptDistribution, SyntheticEncoder};
use zsad_core::selector::{ClassProbabilities, RepresentativePair, SelectorConfig};
use zsad_core::surgery::forward_dual_path;
use zsad_core::tensor::Tensor;

fn tiny_model() -> EncoderWeights {
    let cfg = ModelConfig {
        image_size: 48,
        patch_size: 16,
        width: 32,
        heads: 4,
        layers: 4,
        stages: 2,
        embed_dim: 16,
        vv_scale: true,
    };
    EncoderWeights::seeded_toy(cfg, 5).unwrap()
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        seed: 4,
        train_count: 10,
        test_count: 8,
        image_size: 48,
        defect_size: (60, 400),
        ..Default::default()
    }
}

fn tiny_pair(dim: usize) -> RepresentativePair {
    let set = preset("industrial").unwrap();
    let encoder = SyntheticEncoder::new(3, dim);
    let dist = PromptDistribution::synthesize(&set, "texture", &encoder);
    RepresentativePair::select(&dist, &SelectorConfig::default()).unwrap()
}

#[test]
fn full_pipeline_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let (_, test_index) = generate_synthetic(&spec, dir.path()).unwrap();
    let weights = tiny_model();
    let pair = tiny_pair(weights.config.embed_dim);

    let mut maps: Vec<AnomalyMap> = Vec::new();
    let mut probs: Vec<ClassProbabilities> = Vec::new();
    let mut masks: Vec<Tensor> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    for s in &test_index.samples {
        let image = load_image(&s.image_path).unwrap();
        let preprocessed = weights.preprocess(&image).unwrap();
        let mask = match &s.mask_path {
            Some(p) => load_mask(p).unwrap(),
            None => Tensor::zeros(&[48, 48]),
        };
        let (map, p) = sdp_forward(&weights, &preprocessed, &pair, 1.0, (48, 48)).unwrap();
        assert!(map.pixel.is_finite());
        maps.push(map);
        probs.push(p);
        masks.push(mask);
        labels.push(s.label == Label::Abnormal);
    }
    score_batch(&mut maps, &probs);
    let image_set = ScoredSet::new(
        maps.iter().map(|m| m.image_score).collect(),
        labels,
    )
    .unwrap();
    let pixel_maps: Vec<Tensor> = maps.iter().map(|m| m.pixel.clone()).collect();
    let report = MetricsReport::compute(&image_set, Some((&pixel_maps, &masks))).unwrap();
    assert_eq!(report.image_count, 8);
    assert!(report.pixel.is_some());
    let text = report.to_text();
    assert!(text.contains("pixel.pro"));
}

#[test]
fn backbone_is_frozen_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let (train_index, _) = generate_synthetic(&spec, dir.path()).unwrap();
    let weights = tiny_model();
    let before = weights.to_container().to_bytes();
    let pair = tiny_pair(weights.config.embed_dim);

    let samples: Vec<TrainSample> = train_index
        .samples
        .iter()
        .map(|s| {
            let image = load_image(&s.image_path).unwrap();
            let preprocessed = weights.preprocess(&image).unwrap();
            let mask = match &s.mask_path {
                Some(p) => load_mask(p).unwrap(),
                None => Tensor::zeros(&[48, 48]),
            };
            prepare_sample(&weights, &preprocessed, mask).unwrap()
        })
        .collect();
    let outcome = train(
        &samples,
        &pair,
        1.0,
        &TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            ..Default::default()
        },
        &LossConfig::default(),
        Projections::seeded(&weights.config, 2),
        |_, _, _| {},
    )
    .unwrap();
    assert_eq!(outcome.epoch_losses.len(), 2);
    assert_eq!(weights.to_container().to_bytes(), before);
}

#[test]
fn training_loss_non_increasing_on_separable_toy() {
    // A cleanly separable toy: per-stage patch features are one direction on
    // background patches and an orthogonal direction on defect patches.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (stages, grid, width, dim) = (2usize, 4usize, 8usize, 4usize);
    let l = grid * grid;
    let mut samples = Vec::new();
    for _ in 0..8 {
        let defect_patch = (rng.random::<u32>() % l as u32) as usize;
        let make_stage = |rng: &mut ChaCha8Rng| {
            let mut t = Tensor::zeros(&[l, width]);
            for p in 0..l {
                let base = if p == defect_patch { 4 } else { 0 };
                for j in 0..4 {
                    t.set(&[p, base + j], 1.0 + (rng.random::<f64>() - 0.5) * 0.05);
                }
            }
            t
        };
        let stage_patches = (0..stages).map(|_| make_stage(&mut rng)).collect();
        let mut mask = Tensor::zeros(&[8, 8]);
        let (py, px) = (defect_patch / grid, defect_patch % grid);
        for dy in 0..2 {
            for dx in 0..2 {
                mask.set(&[py * 2 + dy, px * 2 + dx], 1.0);
            }
        }
        samples.push(TrainSample {
            stage_patches,
            mask,
        });
    }
    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 8,
        width,
        heads: 2,
        layers: 2,
        stages,
        embed_dim: dim,
        vv_scale: true,
    };
    let tn = vec![1.0, 0.0, 0.0, 0.0];
    let ta = vec![0.0, 1.0, 0.0, 0.0];
    let pair = {
        let set = preset("industrial").unwrap();
        let _ = set;
        // Hand-built orthogonal pair keeps the toy separable.
        RepresentativePair {
            normal: Tensor::from_vec(&[dim], tn),
            abnormal: Tensor::from_vec(&[dim], ta),
            config: SelectorConfig::default(),
            normal_provenance: zsad_core::selector::SelectionProvenance {
                used: 1,
                discarded: 0,
                fallback: false,
            },
            abnormal_provenance: zsad_core::selector::SelectionProvenance {
                used: 1,
                discarded: 0,
                fallback: false,
            },
        }
    };
    let outcome = train(
        &samples,
        &pair,
        1.0,
        &TrainConfig {
            epochs: 5,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        },
        &LossConfig::default(),
        Projections::seeded(&cfg, 3),
        |_, _, _| {},
    )
    .unwrap();
    for w in outcome.epoch_losses.windows(2) {
        assert!(
            w[1] <= w[0] * 1.05,
            "epoch loss increased beyond tolerance: {:?}",
            outcome.epoch_losses
        );
    }
    assert!(
        outcome.epoch_losses.last().unwrap() < outcome.epoch_losses.first().unwrap(),
        "training did not reduce the loss: {:?}",
        outcome.epoch_losses
    );
}

#[test]
fn combined_map_workflow_matches_parts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let (_, test_index) = generate_synthetic(&spec, dir.path()).unwrap();
    let weights = tiny_model();
    let pair = tiny_pair(weights.config.embed_dim);
    let projections = Projections::seeded(&weights.config, 9);

    let s = &test_index.samples[0];
    let image = load_image(&s.image_path).unwrap();
    let preprocessed = weights.preprocess(&image).unwrap();
    let dual = forward_dual_path(&weights, &preprocessed).unwrap();
    let probs = zsad_core::selector::classify(&dual.class_embedding, &pair, 1.0);
    let grids = zsad_core::detector::stage_grids(&weights, &dual, &pair, &probs).unwrap();
    let m = zsad_core::detector::sum_grids(&grids).unwrap();
    let m_ft = mapped_anomaly_map(
        &dual.original_stages,
        &projections,
        &pair,
        1.0,
        weights.config.grid(),
    )
    .unwrap();
    let m_plus = combine(&m, &m_ft).unwrap();
    for i in 0..m_plus.len() {
        assert_eq!(m_plus.data()[i], m.data()[i] + m_ft.data()[i]);
    }
    // The fine-tuned map stays within (0, stages) by construction.
    for &v in m_ft.data() {
        assert!(v > 0.0 && v < weights.config.stages as f64);
    }
}
