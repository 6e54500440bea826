//! End-to-end run functions; each CLI subcommand maps onto one of these.
//!
//! All artifacts land under the config's output directory, one subdirectory
//! per subcommand, with a config snapshot next to them. Outputs carry no
//! timestamps, so a rerun with the same config and seed reproduces every
//! file byte for byte.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint;
use crate::codec::CoordCodec;
use crate::config::{QaStyle, RunConfig};
use crate::data::{
    evaluate_full, write_synthetic, Dataset, EvalMode, EvalOptions, EvalReport, PairEntry,
};
use crate::decode::{infer_keypoints, KeypointPrediction, PromptSetup};
use crate::density::{density_report, gaussian_baseline, kde, sample_keypoint, DensityReport};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::instructions::{PromptKind, Registry, Templates};
use crate::model::ModelBundle;
use crate::train::{pretrain_stage, train, TrainEnv, TrainState};
use crate::vocab::Vocabulary;

/// Everything loaded once per run.
pub struct RunContext {
    pub vocab: Vocabulary,
    pub codec: CoordCodec,
    pub templates: Templates,
}

impl RunContext {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let templates = match &cfg.data.templates_dir {
            Some(dir) => Templates::load_dir(dir)?,
            None => Templates::builtin(),
        };
        Ok(RunContext {
            vocab: Vocabulary::default_charset(),
            codec: CoordCodec::new(cfg.data.coordinate_digits, &cfg.data.coordinate_template)?,
            templates,
        })
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

/// Generate the synthetic dataset into the dataset directory.
pub fn run_synth_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.dataset_dir();
    write_synthetic(&cfg.data.synth, &dir)?;
    let vocab = Vocabulary::default_charset();
    std::fs::write(dir.join("vocab.json"), vocab.to_json())?;
    cfg.write_snapshot(&dir)?;
    Ok(dir)
}

/// Load the dataset and registry configured for this run.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Registry, Vec<String>)> {
    let dir = cfg.dataset_dir();
    require_file(&dir.join("dataset.json"), "dataset")?;
    let (dataset, warnings) = Dataset::load(&dir, cfg.data.lint)?;
    let registry_path = cfg
        .data
        .registry
        .clone()
        .unwrap_or_else(|| dir.join("registry.json"));
    let registry = if registry_path.exists() {
        Registry::load(&registry_path)?
    } else {
        Registry::builtin()
    };
    Ok((dataset, registry, warnings))
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

/// Initialize (optionally from a checkpoint), run the optional pretraining
/// stage, then instruction tuning. Returns the final checkpoint path.
pub fn run_train(cfg: &RunConfig, init_checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    let ctx = RunContext::new(cfg)?;
    let (dataset, registry, warnings) = load_data(cfg)?;
    let out_dir = cfg.output_dir.join("train");
    std::fs::create_dir_all(&out_dir)?;
    cfg.write_snapshot(&out_dir)?;
    if !warnings.is_empty() {
        std::fs::write(out_dir.join("lint_warnings.txt"), warnings.join("\n"))?;
    }

    let mut model = ModelBundle::init(&cfg.model, &ctx.vocab, cfg.seed)?;
    if let Some(init) = init_checkpoint {
        require_file(init, "init checkpoint")?;
        checkpoint::load_into(&mut model.params, init)?;
    }

    if cfg.pretrain.enabled {
        let pre_dir = out_dir.join("pretrain");
        std::fs::create_dir_all(&pre_dir)?;
        let mut pre_cfg = cfg.train.clone();
        pre_cfg.epochs = cfg.pretrain.epochs;
        pre_cfg.max_steps = cfg.pretrain.max_steps;
        let env = TrainEnv {
            dataset: &dataset,
            registry: &registry,
            style: &cfg.style,
            templates: &ctx.templates,
            vocab: &ctx.vocab,
            codec: &ctx.codec,
            out_dir: Some(&pre_dir),
        };
        let kind = match cfg.pretrain.qa_style {
            QaStyle::DirectQa => PromptKind::DirectQaPretrain,
            QaStyle::StepByStepQa => PromptKind::StepByStepQaPretrain,
        };
        pretrain_stage(&mut model, &pre_cfg, &env, kind)?;
    }

    let env = TrainEnv {
        dataset: &dataset,
        registry: &registry,
        style: &cfg.style,
        templates: &ctx.templates,
        vocab: &ctx.vocab,
        codec: &ctx.codec,
        out_dir: Some(&out_dir),
    };
    let state = train(&mut model, &cfg.train, &env)?;
    Ok(TrainOutcome {
        state,
        checkpoint: out_dir.join("checkpoint.bin"),
        out_dir,
    })
}

fn load_model(cfg: &RunConfig, ctx: &RunContext, checkpoint_path: &Path) -> Result<ModelBundle> {
    require_file(checkpoint_path, "checkpoint")?;
    let mut model = ModelBundle::init(&cfg.model, &ctx.vocab, cfg.seed)?;
    checkpoint::load_into(&mut model.params, checkpoint_path)?;
    Ok(model)
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    image_id: u64,
    category: &'a str,
    name: &'a str,
    x: f64,
    y: f64,
    strategy: String,
    mode: &'a str,
    flags: &'a [String],
}

fn write_predictions(
    path: &Path,
    dataset: &Dataset,
    rows: &[(u64, Vec<KeypointPrediction>)],
    strategy: &str,
    mode: &str,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (image_id, preds) in rows {
        let sample = dataset
            .samples
            .iter()
            .find(|s| s.id == *image_id)
            .ok_or_else(|| Error::Config(format!("prediction for unknown sample {image_id}")))?;
        let category = &dataset.category(sample.category_id)?.name;
        for p in preds {
            let record = PredictionRecord {
                image_id: *image_id,
                category,
                name: &p.name,
                x: p.x,
                y: p.y,
                strategy: strategy.to_string(),
                mode,
                flags: &p.flags,
            };
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
    }
    Ok(())
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub out_dir: PathBuf,
}

/// Evaluate a checkpoint on the configured split.
pub fn run_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<EvalOutcome> {
    let ctx = RunContext::new(cfg)?;
    let (dataset, registry, _) = load_data(cfg)?;
    let model = load_model(cfg, &ctx, checkpoint_path)?;
    let out_dir = cfg.output_dir.join("eval");
    std::fs::create_dir_all(&out_dir)?;
    cfg.write_snapshot(&out_dir)?;

    let mode = match &cfg.eval.pair_list {
        Some(path) => {
            require_file(path, "pair list")?;
            let text = std::fs::read_to_string(path)?;
            let pairs: Vec<PairEntry> = serde_json::from_str(&text)?;
            EvalMode::SupportQueryPairs(pairs)
        }
        None => EvalMode::OnlyQueryImages,
    };
    let opts = EvalOptions {
        mode,
        inference: cfg.decode.inference_mode,
        decode: cfg.decode.to_decode_config(),
        split: cfg.eval.split,
        seed: cfg.seed,
    };
    let (report, predictions) = evaluate_full(
        &model,
        &dataset,
        &registry,
        &cfg.style,
        &ctx.templates,
        &ctx.vocab,
        &ctx.codec,
        &opts,
    )?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("report.txt"), report.to_table())?;
    write_predictions(
        &out_dir.join("predictions.jsonl"),
        &dataset,
        &predictions,
        &report.strategy,
        &report.inference_mode,
    )?;
    Ok(EvalOutcome { report, out_dir })
}

pub struct InferOutcome {
    pub predictions: Vec<KeypointPrediction>,
    pub out_path: PathBuf,
}

/// Predict all keypoints of one image file for a category.
pub fn run_infer(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    image_path: &Path,
    category: &str,
) -> Result<InferOutcome> {
    let ctx = RunContext::new(cfg)?;
    require_file(image_path, "image")?;
    let image = Image::load_ppm(image_path)?;
    let registry = match load_data(cfg) {
        Ok((_, registry, _)) => registry,
        // Inference does not need the dataset if a registry file is at hand.
        Err(_) => match &cfg.data.registry {
            Some(path) => Registry::load(path)?,
            None => Registry::builtin(),
        },
    };
    let model = load_model(cfg, &ctx, checkpoint_path)?;
    let specs = registry.keypoints(category)?;
    let setup = PromptSetup {
        style: &cfg.style,
        templates: &ctx.templates,
        vocab: &ctx.vocab,
        codec: &ctx.codec,
        category_names: registry.keypoint_names(category)?,
    };
    let predictions = infer_keypoints(
        &model,
        &image,
        &specs,
        &setup,
        cfg.decode.inference_mode,
        &cfg.decode.to_decode_config(),
        cfg.seed,
        0,
        None,
    )?;

    let out_dir = cfg.output_dir.join("infer");
    std::fs::create_dir_all(&out_dir)?;
    cfg.write_snapshot(&out_dir)?;
    let out_path = out_dir.join("predictions.jsonl");
    let mut f = std::fs::File::create(&out_path)?;
    let mode = match cfg.decode.inference_mode {
        crate::decode::InferenceMode::Single => "single",
        crate::decode::InferenceMode::Cumulative => "cumulative",
    };
    for p in &predictions {
        let record = PredictionRecord {
            image_id: 0,
            category,
            name: &p.name,
            x: p.x,
            y: p.y,
            strategy: cfg.decode.strategy.label(),
            mode,
            flags: &p.flags,
        };
        writeln!(f, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(InferOutcome {
        predictions,
        out_path,
    })
}

pub struct DensityOutcome {
    pub out_dir: PathBuf,
    pub report: Option<DensityReport>,
}

/// Sample one keypoint repeatedly, estimate its density, and compare with
/// the Gaussian baseline when a ground-truth location is supplied.
#[allow(clippy::too_many_arguments)]
pub fn run_density(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    image_path: &Path,
    category: &str,
    keypoint: &str,
    gt: Option<(f64, f64)>,
    mask_path: Option<&Path>,
) -> Result<DensityOutcome> {
    let ctx = RunContext::new(cfg)?;
    require_file(image_path, "image")?;
    let image = Image::load_ppm(image_path)?;
    let registry = match load_data(cfg) {
        Ok((_, registry, _)) => registry,
        Err(_) => match &cfg.data.registry {
            Some(path) => Registry::load(path)?,
            None => Registry::builtin(),
        },
    };
    let model = load_model(cfg, &ctx, checkpoint_path)?;
    let spec = registry.lookup(category, keypoint)?;
    let setup = PromptSetup {
        style: &cfg.style,
        templates: &ctx.templates,
        vocab: &ctx.vocab,
        codec: &ctx.codec,
        category_names: registry.keypoint_names(category)?,
    };

    let out_dir = cfg.output_dir.join("density");
    std::fs::create_dir_all(&out_dir)?;
    cfg.write_snapshot(&out_dir)?;

    let samples = sample_keypoint(
        &model,
        &image,
        &spec,
        &setup,
        &cfg.density.strategy,
        cfg.density.samples,
        cfg.seed,
    )?;
    std::fs::write(
        out_dir.join("samples.json"),
        serde_json::to_string_pretty(&samples)?,
    )?;
    let grid = kde(&samples, cfg.density.bandwidth, cfg.density.grid)?;
    grid.save_csv(&out_dir.join("kde.csv"))?;
    grid.save_pgm(&out_dir.join("kde.pgm"))?;

    let report = match gt {
        Some(gt) => {
            let baseline = gaussian_baseline(gt, cfg.density.baseline_sigma, cfg.density.grid)?;
            baseline.save_csv(&out_dir.join("gaussian.csv"))?;
            baseline.save_pgm(&out_dir.join("gaussian.pgm"))?;
            let mask = match mask_path {
                Some(p) => {
                    require_file(p, "mask")?;
                    Some(Mask::load_pgm(p)?)
                }
                None => None,
            };
            let report = density_report(&grid, &baseline, gt, mask.as_ref())?;
            std::fs::write(
                out_dir.join("report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            Some(report)
        }
        None => {
            // No ground truth: record the sampling setup and grid mass only.
            let summary = serde_json::json!({
                "strategy": samples.strategy,
                "samples": samples.points.len(),
                "in_square_mass": grid.integral(),
            });
            std::fs::write(
                out_dir.join("report.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            None
        }
    };
    Ok(DensityOutcome { out_dir, report })
}
