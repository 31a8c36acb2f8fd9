//! `zsad` — zero-shot anomaly detection workflows.
//!
//! Subcommands: `init-model`, `gen-synth`, `embed-prompts`, `select`,
//! `detect`, `train`, `evaluate`, `render`. Every run writes its resolved
//! configuration next to its outputs; a previous run's file can seed the
//! defaults of a new run via `--config`.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 I/O error.

mod commands;
mod config;
mod util;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use zsad_core::align::{LossConfig, TrainConfig};
use zsad_core::data::synth::{DefectFamily, SyntheticSpec, TextureFamily};
use zsad_core::encoder::ModelConfig;
use zsad_core::error::{Error, Result};
use zsad_core::selector::{SelectorConfig, SelectorMethod};

use config::*;

#[derive(Parser)]
#[command(
    name = "zsad",
    about = "Zero-shot anomaly classification and segmentation",
    version
)]
struct Cli {
    /// JSON file with a previous run's resolved configuration, used as
    /// defaults for this run (must match the subcommand).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct PromptArgs {
    /// Named prompt preset: industrial, headct, brainmri, clinicdb.
    #[arg(long)]
    preset: Option<String>,
    /// Prompt preset file ([templates]/[normal]/[abnormal] sections).
    #[arg(long)]
    preset_file: Option<PathBuf>,
    /// Object name substituted into the prompts.
    #[arg(long)]
    object: Option<String>,
    /// Embedding table container with one tensor per exact prompt string;
    /// without it the synthetic text encoder is used.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Seed of the synthetic text encoder.
    #[arg(long)]
    text_seed: Option<u64>,
    /// Dimension of synthetic text features (defaults to the model's joint
    /// dimension where a model is present).
    #[arg(long)]
    text_dim: Option<usize>,
}

impl PromptArgs {
    fn resolve(
        &self,
        prior: Option<&PromptSource>,
        default_object: Option<&str>,
        default_dim: usize,
    ) -> Result<PromptSource> {
        let object_name = self
            .object
            .clone()
            .or_else(|| prior.map(|p| p.object_name.clone()))
            .or_else(|| default_object.map(|s| s.to_string()))
            .ok_or_else(|| Error::InvalidConfig("--object is required".into()))?;
        Ok(PromptSource {
            preset: self
                .preset
                .clone()
                .or_else(|| prior.and_then(|p| p.preset.clone())),
            preset_file: self
                .preset_file
                .clone()
                .or_else(|| prior.and_then(|p| p.preset_file.clone())),
            object_name,
            embeddings: self
                .embeddings
                .clone()
                .or_else(|| prior.and_then(|p| p.embeddings.clone())),
            text_seed: self
                .text_seed
                .or(prior.map(|p| p.text_seed))
                .unwrap_or(0),
            text_dim: self
                .text_dim
                .or(prior.map(|p| p.text_dim))
                .unwrap_or(default_dim),
        })
    }
}

#[derive(Args, Debug, Default)]
struct SelectorArgs {
    /// Representative-vector method: mean, pca, kde, mean-shift, dbscan.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    kde_bandwidth: Option<f64>,
    #[arg(long)]
    mean_shift_bandwidth: Option<f64>,
    #[arg(long)]
    dbscan_eps: Option<f64>,
    #[arg(long)]
    dbscan_min_samples: Option<usize>,
}

impl SelectorArgs {
    fn resolve(&self, prior: Option<&SelectorConfig>) -> Result<SelectorConfig> {
        let base = prior.copied().unwrap_or_default();
        let method = match &self.method {
            Some(name) => SelectorMethod::parse(name)?,
            None => base.method,
        };
        let cfg = SelectorConfig {
            method,
            kde_bandwidth: self.kde_bandwidth.unwrap_or(base.kde_bandwidth),
            mean_shift_bandwidth: self
                .mean_shift_bandwidth
                .unwrap_or(base.mean_shift_bandwidth),
            dbscan_eps: self.dbscan_eps.unwrap_or(base.dbscan_eps),
            dbscan_min_samples: self
                .dbscan_min_samples
                .unwrap_or(base.dbscan_min_samples),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Subcommand)]
enum Command {
    /// Write a seeded toy encoder weight container.
    InitModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        embed_dim: Option<usize>,
        /// Disable the 1/sqrt(head_dim) scaling inside value-value attention.
        #[arg(long)]
        no_vv_scale: bool,
    },
    /// Generate the synthetic two-category defect dataset.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Image count of the texture_a (training source) category.
        #[arg(long)]
        train: Option<usize>,
        /// Image count of the texture_b (held-out) category.
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        /// stripes, noise, or cells.
        #[arg(long)]
        texture: Option<String>,
        /// blob, scratch, or color-shift.
        #[arg(long)]
        defect: Option<String>,
        #[arg(long)]
        defect_min: Option<usize>,
        #[arg(long)]
        defect_max: Option<usize>,
        #[arg(long)]
        contrast: Option<f64>,
    },
    /// Compose prompts and write their features as an embedding table.
    EmbedPrompts {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
    },
    /// Select representative vectors and write the pair container.
    Select {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        selector: SelectorArgs,
    },
    /// Score a category: per-image heatmaps and anomaly scores.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        selector: SelectorArgs,
        #[arg(long)]
        temperature: Option<f64>,
        /// Trained projections; switches scoring to the fine-tuned model.
        #[arg(long)]
        projections: Option<PathBuf>,
        /// Direct patch-token/text similarity instead of the staged model.
        #[arg(long)]
        baseline: bool,
        /// Gaussian smoothing sigma for the pixel maps.
        #[arg(long)]
        smooth: Option<f64>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write the raw pixel maps as containers under maps/.
        #[arg(long)]
        save_maps: bool,
    },
    /// Train the per-stage alignment projections on a category's test split.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        selector: SelectorArgs,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        init_seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Keep the epoch with the best image AUROC on --eval-root/--eval-category.
        #[arg(long)]
        select_best_by_auroc: bool,
        #[arg(long)]
        eval_root: Option<PathBuf>,
        #[arg(long)]
        eval_category: Option<String>,
    },
    /// Score a category and emit the metrics report.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        selector: SelectorArgs,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        projections: Option<PathBuf>,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        smooth: Option<f64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Blend a saved map container over an image.
    Render {
        /// Container holding a "map" tensor.
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        smooth: Option<f64>,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn prior_config(path: &Option<PathBuf>) -> Result<Option<RunConfig>> {
    match path {
        Some(p) => Ok(Some(RunConfig::from_file(p)?)),
        None => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let prior = prior_config(&cli.config)?;
    match cli.command {
        Command::InitModel {
            out,
            seed,
            image_size,
            patch_size,
            width,
            heads,
            layers,
            stages,
            embed_dim,
            no_vv_scale,
        } => {
            let base = match &prior {
                Some(RunConfig::InitModel(c)) => Some(c.clone()),
                Some(_) => return Err(config_mismatch("init-model")),
                None => None,
            };
            let model_base = base.as_ref().map(|c| c.model).unwrap_or_default();
            let cfg = InitModelConfig {
                out,
                seed: seed.or(base.as_ref().map(|c| c.seed)).unwrap_or(7),
                model: ModelConfig {
                    image_size: image_size.unwrap_or(model_base.image_size),
                    patch_size: patch_size.unwrap_or(model_base.patch_size),
                    width: width.unwrap_or(model_base.width),
                    heads: heads.unwrap_or(model_base.heads),
                    layers: layers.unwrap_or(model_base.layers),
                    stages: stages.unwrap_or(model_base.stages),
                    embed_dim: embed_dim.unwrap_or(model_base.embed_dim),
                    vv_scale: if no_vv_scale { false } else { model_base.vv_scale },
                },
            };
            cfg.model.validate()?;
            commands::init_model(&cfg)
        }
        Command::GenSynth {
            out,
            seed,
            train,
            test,
            image_size,
            texture,
            defect,
            defect_min,
            defect_max,
            contrast,
        } => {
            let base = match &prior {
                Some(RunConfig::GenSynth(c)) => Some(c.clone()),
                Some(_) => return Err(config_mismatch("gen-synth")),
                None => None,
            };
            let spec_base = base.map(|c| c.spec).unwrap_or_default();
            let spec = SyntheticSpec {
                seed: seed.unwrap_or(spec_base.seed),
                train_count: train.unwrap_or(spec_base.train_count),
                test_count: test.unwrap_or(spec_base.test_count),
                image_size: image_size.unwrap_or(spec_base.image_size),
                texture: match texture {
                    Some(t) => TextureFamily::parse(&t)?,
                    None => spec_base.texture,
                },
                defect: match defect {
                    Some(d) => DefectFamily::parse(&d)?,
                    None => spec_base.defect,
                },
                defect_size: (
                    defect_min.unwrap_or(spec_base.defect_size.0),
                    defect_max.unwrap_or(spec_base.defect_size.1),
                ),
                contrast: contrast.unwrap_or(spec_base.contrast),
            };
            spec.validate()?;
            commands::gen_synth(&GenSynthConfig { out, spec })
        }
        Command::EmbedPrompts { out, prompts } => {
            let base = match &prior {
                Some(RunConfig::EmbedPrompts(c)) => Some(c.clone()),
                Some(_) => return Err(config_mismatch("embed-prompts")),
                None => None,
            };
            let cfg = EmbedPromptsConfig {
                out,
                prompts: prompts.resolve(base.as_ref().map(|c| &c.prompts), None, 32)?,
            };
            commands::embed_prompts(&cfg)
        }
        Command::Select {
            out,
            prompts,
            selector,
        } => {
            let base = match &prior {
                Some(RunConfig::Select(c)) => Some(c.clone()),
                Some(_) => return Err(config_mismatch("select")),
                None => None,
            };
            let cfg = SelectConfig {
                out,
                prompts: prompts.resolve(base.as_ref().map(|c| &c.prompts), None, 32)?,
                selector: selector.resolve(base.as_ref().map(|c| &c.selector))?,
            };
            commands::select(&cfg)
        }
        Command::Detect {
            model,
            data,
            category,
            out,
            prompts,
            selector,
            temperature,
            projections,
            baseline,
            smooth,
            jobs,
            save_maps,
        } => {
            let base = match &prior {
                Some(RunConfig::Detect(c)) => Some(c.clone()),
                Some(_) => return Err(config_mismatch("detect")),
                None => None,
            };
            let model_cfg = zsad_core::encoder::EncoderWeights::load(&model)?.config;
            let cfg = DetectConfig {
                prompts: prompts.resolve(
                    base.as_ref().map(|c| &c.prompts),
                    Some(&category),
                    model_cfg.embed_dim,
                )?,
                selector: selector.resolve(base.as_ref().map(|c| &c.selector))?,
                temperature: temperature
                    .or(base.as_ref().map(|c| c.temperature))
                    .unwrap_or(DEFAULT_TEMPERATURE),
                projections: projections.or(base.as_ref().and_then(|c| c.projections.clone())),
                baseline: baseline || base.as_ref().map(|c| c.baseline).unwrap_or(false),
                smooth_sigma: smooth.or(base.as_ref().and_then(|c| c.smooth_sigma)),
                jobs: jobs.or(base.as_ref().map(|c| c.jobs)).unwrap_or(1),
                save_maps: save_maps || base.as_ref().map(|c| c.save_maps).unwrap_or(false),
                model,
                data_root: data,
                category,
                out,
            };
            commands::detect(&cfg)
        }
        Command::Train {
            model,
            data,
            category,
            out,
            prompts,
            selector,
            temperature,
            lr,
            epochs,
            batch_size,
            seed,
            init_seed,
            alpha,
            gamma,
            epsilon,
            jobs,
            select_best_by_auroc,
            eval_root,
            eval_category,
        } => {
            let base = match &prior {
                Some(RunConfig::Train(c)) => Some(c.clone()),
                Some(_) => return Err(config_mismatch("train")),
                None => None,
            };
            let model_cfg = zsad_core::encoder::EncoderWeights::load(&model)?.config;
            let train_base = base.as_ref().map(|c| c.train).unwrap_or_default();
            let loss_base = base.as_ref().map(|c| c.loss).unwrap_or_default();
            let cfg = TrainCommandConfig {
                prompts: prompts.resolve(
                    base.as_ref().map(|c| &c.prompts),
                    Some(&category),
                    model_cfg.embed_dim,
                )?,
                selector: selector.resolve(base.as_ref().map(|c| &c.selector))?,
                temperature: temperature
                    .or(base.as_ref().map(|c| c.temperature))
                    .unwrap_or(DEFAULT_TEMPERATURE),
                train: TrainConfig {
                    learning_rate: lr.unwrap_or(train_base.learning_rate),
                    epochs: epochs.unwrap_or(train_base.epochs),
                    batch_size: batch_size.unwrap_or(train_base.batch_size),
                    seed: seed.unwrap_or(train_base.seed),
                    ..train_base
                },
                loss: LossConfig {
                    alpha: alpha.unwrap_or(loss_base.alpha),
                    gamma: gamma.unwrap_or(loss_base.gamma),
                    epsilon: epsilon.unwrap_or(loss_base.epsilon),
                },
                init_seed: init_seed
                    .or(base.as_ref().map(|c| c.init_seed))
                    .unwrap_or(1),
                jobs: jobs.or(base.as_ref().map(|c| c.jobs)).unwrap_or(1),
                select_best_by_auroc: select_best_by_auroc
                    || base
                        .as_ref()
                        .map(|c| c.select_best_by_auroc)
                        .unwrap_or(false),
                eval_root: eval_root.or(base.as_ref().and_then(|c| c.eval_root.clone())),
                eval_category: eval_category
                    .or(base.as_ref().and_then(|c| c.eval_category.clone())),
                model,
                data_root: data,
                category,
                out,
            };
            cfg.train.validate()?;
            cfg.loss.validate()?;
            commands::train_command(&cfg)
        }
        Command::Evaluate {
            model,
            data,
            category,
            out,
            prompts,
            selector,
            temperature,
            projections,
            baseline,
            smooth,
            jobs,
        } => {
            let base = match &prior {
                Some(RunConfig::Evaluate(c)) => Some(c.clone()),
                Some(_) => return Err(config_mismatch("evaluate")),
                None => None,
            };
            let model_cfg = zsad_core::encoder::EncoderWeights::load(&model)?.config;
            let cfg = EvaluateConfig {
                prompts: prompts.resolve(
                    base.as_ref().map(|c| &c.prompts),
                    Some(&category),
                    model_cfg.embed_dim,
                )?,
                selector: selector.resolve(base.as_ref().map(|c| &c.selector))?,
                temperature: temperature
                    .or(base.as_ref().map(|c| c.temperature))
                    .unwrap_or(DEFAULT_TEMPERATURE),
                projections: projections.or(base.as_ref().and_then(|c| c.projections.clone())),
                baseline: baseline || base.as_ref().map(|c| c.baseline).unwrap_or(false),
                smooth_sigma: smooth.or(base.as_ref().and_then(|c| c.smooth_sigma)),
                jobs: jobs.or(base.as_ref().map(|c| c.jobs)).unwrap_or(1),
                model,
                data_root: data,
                category,
                out,
            };
            commands::evaluate(&cfg)
        }
        Command::Render {
            map,
            image,
            out,
            smooth,
        } => {
            let base = match &prior {
                Some(RunConfig::Render(c)) => Some(c.clone()),
                Some(_) => return Err(config_mismatch("render")),
                None => None,
            };
            let cfg = RenderConfig {
                map,
                image,
                out,
                smooth_sigma: smooth.or(base.as_ref().and_then(|c| c.smooth_sigma)),
            };
            commands::render_command(&cfg)
        }
    }
}

fn config_mismatch(subcommand: &str) -> Error {
    Error::InvalidConfig(format!(
        "--config file was written by a different subcommand than {subcommand:?}"
    ))
}
