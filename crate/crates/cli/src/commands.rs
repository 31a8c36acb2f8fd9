//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use zsad_core::align::{
    combine, mapped_anomaly_map, prepare_sample, train, Projections, TrainSample,
};
use zsad_core::container::Container;
use zsad_core::data::dataset::{scan_dataset, DatasetIndex, Label};
use zsad_core::data::images::{load_image, load_mask};
use zsad_core::data::render::render_heatmap;
use zsad_core::data::synth::generate_synthetic;
use zsad_core::detector::{
    direct_similarity_baseline, gaussian_smooth, score_batch, sdp_forward, stage_grids,
    sum_grids, AnomalyMap,
};
use zsad_core::encoder::EncoderWeights;
use zsad_core::error::Result;
use zsad_core::metrics::{MetricsReport, ScoredSet};
use zsad_core::selector::{classify, ClassProbabilities, RepresentativePair};
use zsad_core::surgery::forward_dual_path;
use zsad_core::tensor::Tensor;

use crate::config::*;
use crate::util::*;

pub fn init_model(cfg: &InitModelConfig) -> Result<()> {
    let weights = EncoderWeights::seeded_toy(cfg.model, cfg.seed)?;
    if let Some(parent) = cfg.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    weights.save(&cfg.out)?;
    RunConfig::InitModel(cfg.clone()).write_next_to(&cfg.out, false)?;
    println!(
        "wrote {} ({} layers, width {}, {} stages, grid {}x{})",
        cfg.out.display(),
        cfg.model.layers,
        cfg.model.width,
        cfg.model.stages,
        cfg.model.grid(),
        cfg.model.grid()
    );
    Ok(())
}

pub fn gen_synth(cfg: &GenSynthConfig) -> Result<()> {
    ensure_dir(&cfg.out)?;
    let (train_index, test_index) = generate_synthetic(&cfg.spec, &cfg.out)?;
    RunConfig::GenSynth(cfg.clone()).write_next_to(&cfg.out, true)?;
    println!(
        "wrote {}: {} with {} samples, {} with {} samples",
        cfg.out.display(),
        train_index.category,
        train_index.samples.len(),
        test_index.category,
        test_index.samples.len()
    );
    Ok(())
}

pub fn embed_prompts(cfg: &EmbedPromptsConfig) -> Result<()> {
    let set = template_set(&cfg.prompts)?;
    let (normal, abnormal) = set.compose(&cfg.prompts.object_name);
    let dist = build_distribution(&cfg.prompts)?;
    let mut container = Container::new();
    for (i, prompt) in normal.iter().enumerate() {
        container.insert(
            prompt,
            Tensor::from_vec(&[dist.dim()], dist.normal_features.row(i).to_vec()),
        )?;
    }
    for (i, prompt) in abnormal.iter().enumerate() {
        container.insert(
            prompt,
            Tensor::from_vec(&[dist.dim()], dist.abnormal_features.row(i).to_vec()),
        )?;
    }
    if let Some(parent) = cfg.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    container.write_to(&cfg.out)?;
    RunConfig::EmbedPrompts(cfg.clone()).write_next_to(&cfg.out, false)?;
    println!(
        "wrote {} ({} normal + {} abnormal prompts, dim {})",
        cfg.out.display(),
        normal.len(),
        abnormal.len(),
        dist.dim()
    );
    Ok(())
}

pub fn select(cfg: &SelectConfig) -> Result<()> {
    let pair = build_pair(&cfg.prompts, &cfg.selector)?;
    if let Some(parent) = cfg.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    pair_to_container(&pair).write_to(&cfg.out)?;
    RunConfig::Select(cfg.clone()).write_next_to(&cfg.out, false)?;
    println!(
        "wrote {} (method {}, normal {}/{} used{}, abnormal {}/{} used{})",
        cfg.out.display(),
        pair.config.method.name(),
        pair.normal_provenance.used,
        pair.normal_provenance.used + pair.normal_provenance.discarded,
        if pair.normal_provenance.fallback {
            ", fallback"
        } else {
            ""
        },
        pair.abnormal_provenance.used,
        pair.abnormal_provenance.used + pair.abnormal_provenance.discarded,
        if pair.abnormal_provenance.fallback {
            ", fallback"
        } else {
            ""
        },
    );
    Ok(())
}

/// Which forward pass produces maps.
enum InferenceMode {
    Sdp,
    SdpPlus(Projections),
    Baseline,
}

struct ImageOutcome {
    map: AnomalyMap,
    probs: ClassProbabilities,
    mask: Option<Tensor>,
    label: Label,
    rel_path: String,
    image_path: PathBuf,
}

fn relative_name(index: &DatasetIndex, path: &Path) -> String {
    // <defect_type>/<file> for stable, platform-independent report lines.
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().to_string())
        .unwrap_or_default();
    let parent = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|f| f.to_string_lossy().to_string())
        .unwrap_or_default();
    let _ = index;
    format!("{parent}/{file}")
}

#[allow(clippy::too_many_arguments)]
fn run_inference(
    weights: &EncoderWeights,
    index: &DatasetIndex,
    pair: &RepresentativePair,
    mode: &InferenceMode,
    temperature: f64,
    smooth_sigma: Option<f64>,
    jobs: usize,
) -> Result<Vec<ImageOutcome>> {
    if pair.dim() != weights.config.embed_dim {
        return Err(invalid(format!(
            "text feature dimension {} does not match the model joint dimension {}",
            pair.dim(),
            weights.config.embed_dim
        )));
    }
    let mut outcomes = parallel_map(&index.samples, jobs, |_, sample| {
        let image = load_image(&sample.image_path)?;
        let mask = match &sample.mask_path {
            Some(p) => Some(load_mask(p)?),
            None => None,
        };
        let target = match &mask {
            Some(m) => (m.shape()[0], m.shape()[1]),
            None => (image.shape()[0], image.shape()[1]),
        };
        let preprocessed = weights.preprocess(&image)?;
        let (mut map, probs) = match mode {
            InferenceMode::Sdp => sdp_forward(weights, &preprocessed, pair, temperature, target)?,
            InferenceMode::Baseline => {
                direct_similarity_baseline(weights, &preprocessed, pair, temperature, target)?
            }
            InferenceMode::SdpPlus(projections) => {
                let dual = forward_dual_path(weights, &preprocessed)?;
                let probs = classify(&dual.class_embedding, pair, temperature);
                let grids = stage_grids(weights, &dual, pair, &probs)?;
                let m = sum_grids(&grids)?;
                let m_ft = mapped_anomaly_map(
                    &dual.original_stages,
                    projections,
                    pair,
                    temperature,
                    weights.config.grid(),
                )?;
                let combined = combine(&m, &m_ft)?;
                (AnomalyMap::from_grid(combined, target.0, target.1), probs)
            }
        };
        if let Some(sigma) = smooth_sigma {
            map.pixel = gaussian_smooth(&map.pixel, sigma);
        }
        Ok(ImageOutcome {
            rel_path: relative_name(index, &sample.image_path),
            image_path: sample.image_path.clone(),
            label: sample.label,
            mask,
            map,
            probs,
        })
    })?;

    let mut maps: Vec<AnomalyMap> = outcomes.iter().map(|o| o.map.clone()).collect();
    let probs: Vec<ClassProbabilities> = outcomes.iter().map(|o| o.probs).collect();
    score_batch(&mut maps, &probs);
    for (o, m) in outcomes.iter_mut().zip(maps) {
        o.map = m;
    }
    Ok(outcomes)
}

fn load_mode(cfg_projections: &Option<PathBuf>, baseline: bool, model: &EncoderWeights) -> Result<InferenceMode> {
    if baseline && cfg_projections.is_some() {
        return Err(invalid("--baseline and --projections are mutually exclusive"));
    }
    if baseline {
        return Ok(InferenceMode::Baseline);
    }
    match cfg_projections {
        Some(path) => Ok(InferenceMode::SdpPlus(Projections::load(
            path,
            &model.config,
        )?)),
        None => Ok(InferenceMode::Sdp),
    }
}

fn write_scores(out: &Path, outcomes: &[ImageOutcome]) -> Result<()> {
    let mut text = String::new();
    for o in outcomes {
        writeln!(text, "{}\t{:.6}", o.rel_path, o.map.image_score).unwrap();
    }
    std::fs::write(out.join("scores.txt"), text)?;
    Ok(())
}

pub fn detect(cfg: &DetectConfig) -> Result<()> {
    let weights = EncoderWeights::load(&cfg.model)?;
    let pair = build_pair(&cfg.prompts, &cfg.selector)?;
    let index = scan_dataset(&cfg.data_root, &cfg.category)?;
    if index.samples.is_empty() {
        return Err(invalid(format!(
            "category {:?} under {} holds no test images",
            cfg.category,
            cfg.data_root.display()
        )));
    }
    let mode = load_mode(&cfg.projections, cfg.baseline, &weights)?;
    let outcomes = run_inference(
        &weights,
        &index,
        &pair,
        &mode,
        cfg.temperature,
        cfg.smooth_sigma,
        cfg.jobs,
    )?;

    ensure_dir(&cfg.out)?;
    let heat_dir = cfg.out.join("heatmaps");
    ensure_dir(&heat_dir)?;
    let maps_dir = cfg.out.join("maps");
    if cfg.save_maps {
        ensure_dir(&maps_dir)?;
    }
    for o in &outcomes {
        let flat = o.rel_path.replace('/', "_");
        let stem = flat.trim_end_matches(".png").trim_end_matches(".pgm");
        let image = load_image(&o.image_path)?;
        render_heatmap(&o.map.pixel, &image, &heat_dir.join(format!("{stem}.png")))?;
        if cfg.save_maps {
            let mut c = Container::new();
            c.insert("map", o.map.pixel.clone()).unwrap();
            c.write_to(&maps_dir.join(format!("{stem}.ntc")))?;
        }
    }
    write_scores(&cfg.out, &outcomes)?;
    RunConfig::Detect(cfg.clone()).write_next_to(&cfg.out, true)?;
    println!(
        "wrote {} ({} images, {} heatmaps)",
        cfg.out.display(),
        outcomes.len(),
        outcomes.len()
    );
    Ok(())
}

fn image_scored_set(outcomes: &[ImageOutcome]) -> Result<ScoredSet> {
    ScoredSet::new(
        outcomes.iter().map(|o| o.map.image_score).collect(),
        outcomes.iter().map(|o| o.label == Label::Abnormal).collect(),
    )
}

pub fn evaluate(cfg: &EvaluateConfig) -> Result<()> {
    let weights = EncoderWeights::load(&cfg.model)?;
    let pair = build_pair(&cfg.prompts, &cfg.selector)?;
    let index = scan_dataset(&cfg.data_root, &cfg.category)?;
    if index.samples.is_empty() {
        return Err(invalid(format!(
            "category {:?} under {} holds no test images",
            cfg.category,
            cfg.data_root.display()
        )));
    }
    let mode = load_mode(&cfg.projections, cfg.baseline, &weights)?;
    let outcomes = run_inference(
        &weights,
        &index,
        &pair,
        &mode,
        cfg.temperature,
        cfg.smooth_sigma,
        cfg.jobs,
    )?;

    let image_set = image_scored_set(&outcomes)?;
    // Pixel metrics need masks; normal samples contribute all-zero masks at
    // their map resolution. Datasets without any masks skip the section.
    let has_masks = outcomes.iter().any(|o| o.mask.is_some());
    let report = if has_masks {
        let mut maps = Vec::with_capacity(outcomes.len());
        let mut masks = Vec::with_capacity(outcomes.len());
        for o in &outcomes {
            maps.push(o.map.pixel.clone());
            masks.push(match &o.mask {
                Some(m) => m.clone(),
                None => Tensor::zeros(o.map.pixel.shape()),
            });
        }
        MetricsReport::compute(&image_set, Some((&maps, &masks)))?
    } else {
        MetricsReport::compute(&image_set, None)?
    };

    ensure_dir(&cfg.out)?;
    std::fs::write(cfg.out.join("report.txt"), report.to_text())?;
    write_scores(&cfg.out, &outcomes)?;
    RunConfig::Evaluate(cfg.clone()).write_next_to(&cfg.out, true)?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn train_command(cfg: &TrainCommandConfig) -> Result<()> {
    let weights = EncoderWeights::load(&cfg.model)?;
    let pair = build_pair(&cfg.prompts, &cfg.selector)?;
    if pair.dim() != weights.config.embed_dim {
        return Err(invalid(format!(
            "text feature dimension {} does not match the model joint dimension {}",
            pair.dim(),
            weights.config.embed_dim
        )));
    }
    let index = scan_dataset(&cfg.data_root, &cfg.category)?;
    if index.samples.is_empty() {
        return Err(invalid("training split holds no images".to_string()));
    }

    // Encode every image once; the backbone is frozen so features are
    // reusable across epochs.
    let samples: Vec<TrainSample> = parallel_map(&index.samples, cfg.jobs, |_, s| {
        let image = load_image(&s.image_path)?;
        let preprocessed = weights.preprocess(&image)?;
        let mask = match &s.mask_path {
            Some(p) => load_mask(p)?,
            None => Tensor::zeros(&[image.shape()[0], image.shape()[1]]),
        };
        prepare_sample(&weights, &preprocessed, mask)
    })?;

    let init = Projections::seeded(&weights.config, cfg.init_seed);
    ensure_dir(&cfg.out)?;
    init.save(&cfg.out.join("projections_init.ntc"))?;

    // Optional epoch selection by image-level AUROC on an evaluation split.
    let eval_setup: Option<(DatasetIndex, PathBuf)> = if cfg.select_best_by_auroc {
        let root = cfg
            .eval_root
            .clone()
            .ok_or_else(|| invalid("--select-best-by-auroc requires --eval-root"))?;
        let category = cfg
            .eval_category
            .clone()
            .ok_or_else(|| invalid("--select-best-by-auroc requires --eval-category"))?;
        Some((scan_dataset(&root, &category)?, root))
    } else {
        None
    };

    let mut best: Option<(f64, Projections)> = None;
    let mut epoch_log: Vec<(usize, f64, Option<f64>)> = Vec::new();
    let outcome = train(
        &samples,
        &pair,
        cfg.temperature,
        &cfg.train,
        &cfg.loss,
        init,
        |epoch, projections, loss| {
            let auroc = eval_setup.as_ref().and_then(|(eval_index, _)| {
                epoch_auroc(&weights, eval_index, &pair, projections, cfg).ok()
            });
            if let Some(a) = auroc {
                let better = best.as_ref().map(|(b, _)| a > *b).unwrap_or(true);
                if better {
                    best = Some((a, projections.clone()));
                }
            }
            epoch_log.push((epoch, loss, auroc));
        },
    )?;

    let selected = match best {
        Some((auroc, projections)) => {
            println!("selected epoch with image auroc {auroc:.6}");
            projections
        }
        None => outcome.projections,
    };
    selected.save(&cfg.out.join("projections.ntc"))?;

    let mut history = String::new();
    for (epoch, loss, auroc) in &epoch_log {
        match auroc {
            Some(a) => writeln!(history, "{epoch}\t{loss:.8}\t{a:.6}").unwrap(),
            None => writeln!(history, "{epoch}\t{loss:.8}").unwrap(),
        }
    }
    std::fs::write(cfg.out.join("loss_history.txt"), history)?;
    RunConfig::Train(cfg.clone()).write_next_to(&cfg.out, true)?;
    println!(
        "wrote {} (epoch losses: {})",
        cfg.out.display(),
        outcome
            .epoch_losses
            .iter()
            .map(|l| format!("{l:.6}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn epoch_auroc(
    weights: &EncoderWeights,
    eval_index: &DatasetIndex,
    pair: &RepresentativePair,
    projections: &Projections,
    cfg: &TrainCommandConfig,
) -> Result<f64> {
    let mode = InferenceMode::SdpPlus(projections.clone());
    let outcomes = run_inference(
        weights,
        eval_index,
        pair,
        &mode,
        cfg.temperature,
        None,
        cfg.jobs,
    )?;
    zsad_core::metrics::auroc(&image_scored_set(&outcomes)?)
}

pub fn render_command(cfg: &RenderConfig) -> Result<()> {
    let container = Container::read_from(&cfg.map)?;
    let mut map = container.require("map")?.clone();
    if let Some(sigma) = cfg.smooth_sigma {
        map = gaussian_smooth(&map, sigma);
    }
    let image = load_image(&cfg.image)?;
    if let Some(parent) = cfg.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    render_heatmap(&map, &image, &cfg.out)?;
    RunConfig::Render(cfg.clone()).write_next_to(&cfg.out, false)?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}
