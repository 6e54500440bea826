//! Evaluation harness: run inference over a split and aggregate PCK.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, PoseSample, Split};
use super::pck::{mpck, score_sample, PckCounts, SampleGt, PCK_ALPHAS};
use crate::codec::CoordCodec;
use crate::decode::{infer_keypoints, DecodeConfig, InferenceMode, KeypointPrediction, PromptSetup};
use crate::error::{Error, Result};
use crate::instructions::{PromptStyle, Registry, Templates};
use crate::model::ModelBundle;
use crate::par;
use crate::vocab::Vocabulary;

/// One support/query assignment; the query may repeat across entries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairEntry {
    pub support_image_id: u64,
    pub query_image_id: u64,
}

#[derive(Debug, Clone)]
pub enum EvalMode {
    /// Queries taken from a support/query pair list; repeated queries are
    /// weighted by their multiplicity.
    SupportQueryPairs(Vec<PairEntry>),
    /// Every unique image of the split, weight 1.
    OnlyQueryImages,
}

impl EvalMode {
    pub fn label(&self) -> &'static str {
        match self {
            EvalMode::SupportQueryPairs(_) => "support-query-pairs",
            EvalMode::OnlyQueryImages => "only-query-images",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    /// PCK at each threshold in `alphas` order.
    pub pck: Vec<f64>,
    pub mpck: f64,
    pub n_keypoints: u64,
    pub n_images: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub inference_mode: String,
    pub constrained: bool,
    pub eval_mode: String,
    pub split: String,
    pub alphas: Vec<f64>,
    pub overall: MetricRow,
    pub per_category: BTreeMap<String, MetricRow>,
    pub parse_failure_rate: f64,
    pub truncations: u64,
}

impl EvalReport {
    /// Plain-text table with one row per category plus the overall row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "strategy: {} | inference: {} | constrained: {} | eval: {} | split: {}\n",
            self.strategy, self.inference_mode, self.constrained, self.eval_mode, self.split
        ));
        out.push_str(&format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "category", "PCK@.05", "PCK@.10", "PCK@.15", "PCK@.20", "PCK@.25", "mPCK", "n"
        ));
        let mut row = |name: &str, m: &MetricRow| {
            out.push_str(&format!(
                "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}\n",
                name, m.pck[0], m.pck[1], m.pck[2], m.pck[3], m.pck[4], m.mpck, m.n_keypoints
            ));
        };
        for (name, m) in &self.per_category {
            row(name, m);
        }
        row("overall", &self.overall);
        out.push_str(&format!(
            "parse failures: {:.4} | truncations: {}\n",
            self.parse_failure_rate, self.truncations
        ));
        out
    }
}

pub struct EvalOptions {
    pub mode: EvalMode,
    pub inference: InferenceMode,
    pub decode: DecodeConfig,
    pub split: Split,
    pub seed: u64,
}

struct Accumulator {
    per_alpha: [PckCounts; 5],
    images: u64,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            per_alpha: [PckCounts::default(); 5],
            images: 0,
        }
    }
    fn row(&self) -> MetricRow {
        let pck: Vec<f64> = self.per_alpha.iter().map(|c| c.fraction()).collect();
        let m = mpck(&pck);
        MetricRow {
            mpck: m,
            n_keypoints: self.per_alpha[0].total,
            n_images: self.images,
            pck,
        }
    }
}

/// Predictions for every sample of the split, in sample order. Exposed so
/// reports and prediction dumps share one inference pass.
pub fn predict_split(
    model: &ModelBundle,
    dataset: &Dataset,
    registry: &Registry,
    style: &PromptStyle,
    templates: &Templates,
    vocab: &Vocabulary,
    codec: &CoordCodec,
    opts: &EvalOptions,
    samples: &[&PoseSample],
) -> Result<Vec<Vec<KeypointPrediction>>> {
    let results: Vec<Result<Vec<KeypointPrediction>>> = par::map_slice(samples, |sample| {
        let category = dataset.category(sample.category_id)?;
        let specs = registry.keypoints(&category.name)?;
        let setup = PromptSetup {
            style,
            templates,
            vocab,
            codec,
            category_names: category.keypoints.clone(),
        };
        let targets: Vec<(f64, f64)> = sample.keypoints.iter().map(|k| (k.x, k.y)).collect();
        infer_keypoints(
            model,
            &sample.image.to_image(),
            &specs,
            &setup,
            opts.inference,
            &opts.decode,
            opts.seed,
            sample.id,
            if opts.decode.teacher_forced {
                Some(&targets)
            } else {
                None
            },
        )
    });
    results.into_iter().collect()
}

/// Run inference over the selected split and aggregate PCK at all
/// thresholds.
pub fn evaluate(
    model: &ModelBundle,
    dataset: &Dataset,
    registry: &Registry,
    style: &PromptStyle,
    templates: &Templates,
    vocab: &Vocabulary,
    codec: &CoordCodec,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_full(model, dataset, registry, style, templates, vocab, codec, opts).map(|r| r.0)
}

/// Like [`evaluate`], additionally returning per-sample predictions in
/// sample-id order for prediction dumps.
#[allow(clippy::type_complexity)]
pub fn evaluate_full(
    model: &ModelBundle,
    dataset: &Dataset,
    registry: &Registry,
    style: &PromptStyle,
    templates: &Templates,
    vocab: &Vocabulary,
    codec: &CoordCodec,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<(u64, Vec<KeypointPrediction>)>)> {
    let split_samples = dataset.split_samples(opts.split);

    // Query weights per sample id.
    let weights: BTreeMap<u64, u64> = match &opts.mode {
        EvalMode::OnlyQueryImages => split_samples.iter().map(|s| (s.id, 1)).collect(),
        EvalMode::SupportQueryPairs(pairs) => {
            let known: BTreeMap<u64, &&PoseSample> =
                split_samples.iter().map(|s| (s.id, s)).collect();
            let mut w: BTreeMap<u64, u64> = BTreeMap::new();
            for p in pairs {
                if !known.contains_key(&p.query_image_id) {
                    return Err(Error::Schema {
                        path: "pair_list".into(),
                        message: format!(
                            "query image {} not in split {:?}",
                            p.query_image_id, opts.split
                        ),
                    });
                }
                *w.entry(p.query_image_id).or_insert(0) += 1;
            }
            w
        }
    };

    let queries: Vec<&PoseSample> = split_samples
        .iter()
        .filter(|s| weights.get(&s.id).copied().unwrap_or(0) > 0)
        .copied()
        .collect();

    let predictions = predict_split(
        model, dataset, registry, style, templates, vocab, codec, opts, &queries,
    )?;

    let mut overall = Accumulator::new();
    let mut per_category: BTreeMap<String, Accumulator> = BTreeMap::new();
    let mut parse_failures = 0u64;
    let mut truncations = 0u64;
    let mut predicted_keypoints = 0u64;
    for (sample, preds) in queries.iter().zip(&predictions) {
        let weight = weights[&sample.id];
        let category = dataset.category(sample.category_id)?;
        let gt = SampleGt {
            names: &category.keypoints,
            keypoints: &sample.keypoints,
            bbox: sample.bbox,
            crop: &sample.crop,
        };
        for p in preds {
            predicted_keypoints += weight;
            if p.flags.iter().any(|f| f == "parse_fallback") {
                parse_failures += weight;
            }
            if p.flags.iter().any(|f| f == "truncated") {
                truncations += weight;
            }
        }
        let acc = per_category
            .entry(category.name.clone())
            .or_insert_with(Accumulator::new);
        for (ai, alpha) in PCK_ALPHAS.iter().enumerate() {
            let counts = score_sample(preds, &gt, *alpha, weight)?;
            overall.per_alpha[ai].add(counts);
            acc.per_alpha[ai].add(counts);
        }
        overall.images += weight;
        acc.images += weight;
    }

    let report = EvalReport {
        strategy: opts.decode.strategy.label(),
        inference_mode: match opts.inference {
            InferenceMode::Single => "single".into(),
            InferenceMode::Cumulative => "cumulative".into(),
        },
        constrained: opts.decode.constrained,
        eval_mode: opts.mode.label().to_string(),
        split: format!("{:?}", opts.split).to_lowercase(),
        alphas: PCK_ALPHAS.to_vec(),
        overall: overall.row(),
        per_category: per_category
            .into_iter()
            .map(|(k, v)| (k, v.row()))
            .collect(),
        parse_failure_rate: if predicted_keypoints == 0 {
            0.0
        } else {
            parse_failures as f64 / predicted_keypoints as f64
        },
        truncations,
    };
    let dump = queries
        .iter()
        .map(|s| s.id)
        .zip(predictions)
        .collect();
    Ok((report, dump))
}

/// Constant-center predictor: the baseline every trained model must beat.
pub fn center_predictions(names: &[String]) -> Vec<KeypointPrediction> {
    names
        .iter()
        .map(|n| KeypointPrediction {
            name: n.clone(),
            x: 0.5,
            y: 0.5,
            flags: vec![],
        })
        .collect()
}

/// PCK of the constant-center predictor over a split, at one threshold.
pub fn center_baseline(dataset: &Dataset, split: Split, alpha: f64) -> Result<f64> {
    let mut counts = PckCounts::default();
    for sample in dataset.split_samples(split) {
        let category = dataset.category(sample.category_id)?;
        let gt = SampleGt {
            names: &category.keypoints,
            keypoints: &sample.keypoints,
            bbox: sample.bbox,
            crop: &sample.crop,
        };
        counts.add(score_sample(
            &center_predictions(&category.keypoints),
            &gt,
            alpha,
            1,
        )?);
    }
    Ok(counts.fraction())
}
