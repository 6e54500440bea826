//! Decoding strategies and keypoint inference.
//!
//! Five next-token strategies (greedy, temperature, top-k, nucleus,
//! contrastive), template-constrained coordinate generation, and the single
//! vs cumulative inference modes over an ordered keypoint list.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CoordCodec, TemplateSlot};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::infer::InferSession;
use crate::instructions::{build_round, KeypointSpec, PromptStyle, RoundTemplate, Templates};
use crate::model::ModelBundle;
use crate::rng::stream;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Temperature { t: f64 },
    TopK { k: usize },
    Nucleus { p: f64 },
    Contrastive { alpha: f64, k: usize },
}

impl DecodeStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecodeStrategy::Greedy => Ok(()),
            DecodeStrategy::Temperature { t } if t > 0.0 => Ok(()),
            DecodeStrategy::TopK { k } if k >= 1 => Ok(()),
            DecodeStrategy::Nucleus { p } if p > 0.0 && p <= 1.0 => Ok(()),
            DecodeStrategy::Contrastive { alpha, k } if (0.0..=1.0).contains(&alpha) && k >= 1 => {
                Ok(())
            }
            other => Err(Error::Config(format!("invalid decode strategy {other:?}"))),
        }
    }

    /// Whether repeated decoding can produce different outputs.
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            DecodeStrategy::Temperature { .. }
                | DecodeStrategy::TopK { .. }
                | DecodeStrategy::Nucleus { .. }
        )
    }

    /// Exact parameters for logs and report headers.
    pub fn label(&self) -> String {
        match *self {
            DecodeStrategy::Greedy => "greedy".into(),
            DecodeStrategy::Temperature { t } => format!("temperature(t={t})"),
            DecodeStrategy::TopK { k } => format!("top-k(k={k})"),
            DecodeStrategy::Nucleus { p } => format!("nucleus(p={p})"),
            DecodeStrategy::Contrastive { alpha, k } => {
                format!("contrastive(alpha={alpha}, k={k})")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Each keypoint is queried in a fresh context.
    Single,
    /// Each keypoint's prompt and answer stay in context for the next one.
    Cumulative,
}

/// Provides candidate hidden states for contrastive scoring.
pub trait CandidateScorer {
    fn candidate_hidden(&mut self, token: TokenId) -> Result<Vec<f64>>;
    fn history(&self) -> &[Vec<f64>];
}

impl CandidateScorer for InferSession<'_> {
    fn candidate_hidden(&mut self, token: TokenId) -> Result<Vec<f64>> {
        self.peek_hidden(token)
    }
    fn history(&self) -> &[Vec<f64>] {
        self.hidden_history()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by value descending, ties by index ascending.
fn sorted_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx
}

fn sample_from(probs: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.iter().map(|(_, p)| p).sum();
    let mut dart: f64 = rng.gen::<f64>() * total;
    for &(i, p) in probs {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.last().expect("non-empty support").0
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Choose the next token from a logits row.
///
/// Contrastive search needs model access to evaluate candidate hidden
/// states; pass the session as `scorer`.
pub fn decode_next(
    logits: &[f64],
    strategy: &DecodeStrategy,
    rng: &mut ChaCha8Rng,
    mut scorer: Option<&mut dyn CandidateScorer>,
) -> Result<TokenId> {
    strategy.validate()?;
    // -inf is legal (masked-out tokens); NaN or +inf is not.
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("decoder logits".into()));
    }
    match *strategy {
        DecodeStrategy::Greedy => Ok(argmax(logits)),
        DecodeStrategy::Temperature { t } => {
            let scaled: Vec<f64> = logits.iter().map(|&v| v / t).collect();
            let probs = softmax(&scaled);
            let support: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
            Ok(sample_from(&support, rng))
        }
        DecodeStrategy::TopK { k } => {
            let probs = softmax(logits);
            let order = sorted_desc(&probs);
            let support: Vec<(usize, f64)> = order
                .into_iter()
                .take(k.min(logits.len()))
                .map(|i| (i, probs[i]))
                .collect();
            Ok(sample_from(&support, rng))
        }
        DecodeStrategy::Nucleus { p } => {
            let probs = softmax(logits);
            let order = sorted_desc(&probs);
            let mut support = Vec::new();
            let mut mass = 0.0;
            for i in order {
                support.push((i, probs[i]));
                mass += probs[i];
                if mass >= p {
                    break;
                }
            }
            Ok(sample_from(&support, rng))
        }
        DecodeStrategy::Contrastive { alpha, k } => {
            let scorer = scorer.as_deref_mut().ok_or_else(|| {
                Error::Config("contrastive search requires a model session".into())
            })?;
            let probs = softmax(logits);
            let order = sorted_desc(&probs);
            let history: Vec<Vec<f64>> = scorer.history().to_vec();
            let mut best: Option<(usize, f64)> = None;
            for &cand in order.iter().take(k.min(logits.len())) {
                let hidden = scorer.candidate_hidden(cand)?;
                let max_sim = history
                    .iter()
                    .map(|h| cosine(&hidden, h))
                    .fold(f64::NEG_INFINITY, f64::max);
                let max_sim = if max_sim.is_finite() { max_sim } else { 0.0 };
                let score = (1.0 - alpha) * probs[cand] - alpha * max_sim;
                let better = match best {
                    None => true,
                    Some((_, s)) => score > s,
                };
                if better {
                    best = Some((cand, score));
                }
            }
            Ok(best.expect("k >= 1").0)
        }
    }
}

/// Logits restricted to the ten digit tokens; everything else is -inf.
fn digit_masked(logits: &[f64], vocab: &Vocabulary) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    let base = vocab.digit_base();
    out[base..base + 10].copy_from_slice(&logits[base..base + 10]);
    out
}

#[derive(Debug, Clone)]
pub struct GeneratedAnswer {
    pub text: String,
    pub x: f64,
    pub y: f64,
    pub tokens: Vec<TokenId>,
    /// True when unconstrained output failed to parse and the image-center
    /// fallback was used.
    pub parse_failed: bool,
}

/// Generate one coordinate answer. The session must be positioned right
/// after a `<sep-assistant>` token.
///
/// Constrained mode forces the template scaffolding and lets the strategy
/// pick only the digit tokens, so the output always parses. Unconstrained
/// mode generates freely until `<eos>` or the length cap, then parses; on
/// failure the answer falls back to the image center and is flagged.
pub fn generate_answer(
    session: &mut InferSession,
    vocab: &Vocabulary,
    codec: &CoordCodec,
    strategy: &DecodeStrategy,
    constrained: bool,
    rng: &mut ChaCha8Rng,
    max_new_tokens: usize,
) -> Result<GeneratedAnswer> {
    let mut logits = session
        .last_logits()
        .ok_or_else(|| Error::Config("generation requires a non-empty prompt".into()))?
        .to_vec();
    let mut tokens = Vec::new();

    if constrained {
        for slot in codec.slots() {
            let tok = match slot {
                TemplateSlot::Literal(c) => vocab.char_id(c).ok_or_else(|| {
                    Error::Config(format!("template character {c:?} not in vocabulary"))
                })?,
                TemplateSlot::Digit { .. } => {
                    let masked = digit_masked(&logits, vocab);
                    decode_with_session(&masked, strategy, rng, session)?
                }
            };
            tokens.push(tok);
            logits = session.step(tok)?;
        }
        let text = vocab.decode_chars(&tokens);
        let (x, y) = codec.parse(&text)?;
        Ok(GeneratedAnswer {
            text,
            x,
            y,
            tokens,
            parse_failed: false,
        })
    } else {
        for _ in 0..max_new_tokens {
            let tok = decode_with_session(&logits, strategy, rng, session)?;
            if tok == vocab.eos() {
                break;
            }
            tokens.push(tok);
            logits = session.step(tok)?;
        }
        let text = vocab.decode_chars(&tokens);
        match codec.parse(&text) {
            Ok((x, y)) => Ok(GeneratedAnswer {
                text,
                x,
                y,
                tokens,
                parse_failed: false,
            }),
            Err(_) => Ok(GeneratedAnswer {
                text,
                x: 0.5,
                y: 0.5,
                tokens,
                parse_failed: true,
            }),
        }
    }
}

/// decode_next with the borrow split needed to use the session as scorer.
fn decode_with_session(
    logits: &[f64],
    strategy: &DecodeStrategy,
    rng: &mut ChaCha8Rng,
    session: &mut InferSession,
) -> Result<TokenId> {
    if matches!(strategy, DecodeStrategy::Contrastive { .. }) {
        decode_next(logits, strategy, rng, Some(session))
    } else {
        decode_next(logits, strategy, rng, None)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointPrediction {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub constrained: bool,
    pub max_new_tokens: usize,
    /// Cumulative context carries ground-truth answers instead of generated
    /// ones (needs targets).
    pub teacher_forced: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            constrained: true,
            max_new_tokens: 32,
            teacher_forced: false,
        }
    }
}

/// Everything needed to phrase prompts for one category.
pub struct PromptSetup<'a> {
    pub style: &'a PromptStyle,
    pub templates: &'a Templates,
    pub vocab: &'a Vocabulary,
    pub codec: &'a CoordCodec,
    pub category_names: Vec<String>,
}

fn round_prompt_tokens(
    setup: &PromptSetup,
    round: &RoundTemplate,
    coords_for_question: Option<(f64, f64)>,
) -> Result<Vec<Vec<TokenId>>> {
    // Token chunks per turn: <sep-user> question <sep-assistant>. Answers are
    // appended separately so generation can take over at the right position.
    let mut turns = Vec::new();
    for turn in &round.turns {
        let mut tokens = vec![setup.vocab.sep_user()];
        let question = match coords_for_question {
            Some((x, y)) => turn
                .question
                .replace("{coords}", &setup.codec.encode(x, y)?),
            None => turn.question.clone(),
        };
        tokens.extend(setup.vocab.encode_text(&question)?);
        tokens.push(setup.vocab.sep_assistant());
        turns.push(tokens);
    }
    Ok(turns)
}

fn conversation_prefix(setup: &PromptSetup) -> Result<Vec<TokenId>> {
    let mut tokens = vec![setup.vocab.bos()];
    if setup.style.conversation_outline {
        tokens.extend(setup.vocab.encode_text(setup.templates.get("outline")?)?);
    }
    Ok(tokens)
}

/// Predict all keypoints of one image.
///
/// Single mode queries each keypoint in a fresh context holding only its own
/// round. Cumulative mode keeps every earlier round's prompt and answer in
/// context; if the context would overflow, the oldest rounds are dropped and
/// the prediction is flagged `truncated`.
#[allow(clippy::too_many_arguments)]
pub fn infer_keypoints(
    model: &ModelBundle,
    image: &Image,
    specs: &[KeypointSpec],
    setup: &PromptSetup,
    mode: InferenceMode,
    decode: &DecodeConfig,
    seed: u64,
    sample_tag: u64,
    teacher_targets: Option<&[(f64, f64)]>,
) -> Result<Vec<KeypointPrediction>> {
    decode.strategy.validate()?;
    if decode.teacher_forced && teacher_targets.is_none() {
        return Err(Error::Config(
            "teacher-forced inference requires targets".into(),
        ));
    }
    let base = InferSession::new(model, image)?;
    let prefix = conversation_prefix(setup)?;

    let mut predictions = Vec::with_capacity(specs.len());
    // Cumulative state: committed token chunks per completed round, so the
    // context can be rebuilt after truncation.
    let mut history: Vec<Vec<TokenId>> = Vec::new();
    let mut cum_session = match mode {
        InferenceMode::Cumulative => {
            let mut s = base.clone();
            s.prefill(&prefix)?;
            Some(s)
        }
        InferenceMode::Single => None,
    };

    for (i, spec) in specs.iter().enumerate() {
        let mut flags = Vec::new();
        let mut round_rng = stream(seed, &[sample_tag, crate::rng::tag_str(&spec.name), 1]);
        let round = build_round(
            spec,
            &setup.category_names,
            setup.style,
            setup.templates,
            &mut round_rng,
        )?;
        let teacher_coords = teacher_targets.map(|t| t[i]);
        let turn_tokens = round_prompt_tokens(setup, &round, teacher_coords)?;

        let mut gen_rng = stream(seed, &[sample_tag, crate::rng::tag_str(&spec.name), 2]);
        let answer = match mode {
            InferenceMode::Single => {
                let mut session = base.clone();
                session.prefill(&prefix)?;
                run_round(
                    &mut session,
                    setup,
                    &turn_tokens,
                    &round,
                    decode,
                    &mut gen_rng,
                )?
            }
            InferenceMode::Cumulative => {
                let session = cum_session.as_mut().expect("cumulative session");
                // Worst-case token need for this round.
                let need: usize = turn_tokens.iter().map(|t| t.len()).sum::<usize>()
                    + round.turns.len() * (setup.codec.answer_len().max(decode.max_new_tokens));
                if need > session.remaining_context() {
                    // Drop oldest rounds until the new round fits.
                    while !history.is_empty() {
                        let kept: usize = history.iter().map(|h| h.len()).sum();
                        if prefix.len() + kept + need
                            <= model.config.context - model.config.num_image_tokens()
                        {
                            break;
                        }
                        history.remove(0);
                    }
                    let mut rebuilt = base.clone();
                    rebuilt.prefill(&prefix)?;
                    for chunk in &history {
                        rebuilt.prefill(chunk)?;
                    }
                    *session = rebuilt;
                    flags.push("truncated".to_string());
                }
                let ans = run_round(session, setup, &turn_tokens, &round, decode, &mut gen_rng)?;
                // Record this round's tokens for potential rebuilds.
                let mut chunk: Vec<TokenId> = Vec::new();
                for (t, turn) in turn_tokens.iter().zip(&round.turns) {
                    chunk.extend(t);
                    let answer_tokens = match &turn.answer {
                        crate::instructions::AnswerSlot::Coordinates => {
                            if decode.teacher_forced {
                                let (tx, ty) = teacher_coords.expect("targets checked");
                                setup.vocab.encode_text(&setup.codec.encode(tx, ty)?)?
                            } else {
                                ans.tokens.clone()
                            }
                        }
                        crate::instructions::AnswerSlot::Text(s) => setup.vocab.encode_text(s)?,
                        crate::instructions::AnswerSlot::KeypointName => {
                            setup.vocab.encode_text(&spec.name)?
                        }
                    };
                    chunk.extend(answer_tokens);
                }
                history.push(chunk);
                if decode.teacher_forced {
                    // Rebuild context with the ground-truth answer replacing
                    // the generated one.
                    let mut rebuilt = base.clone();
                    rebuilt.prefill(&prefix)?;
                    for c in &history {
                        rebuilt.prefill(c)?;
                    }
                    *session = rebuilt;
                }
                ans
            }
        };
        if answer.parse_failed {
            flags.push("parse_fallback".to_string());
        }
        predictions.push(KeypointPrediction {
            name: spec.name.clone(),
            x: answer.x,
            y: answer.y,
            flags,
        });
    }
    Ok(predictions)
}

/// Feed one round's turns into the session; intermediate (unsupervised)
/// answers are forced as fixed text; the coordinate turn is generated.
fn run_round(
    session: &mut InferSession,
    setup: &PromptSetup,
    turn_tokens: &[Vec<TokenId>],
    round: &RoundTemplate,
    decode: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedAnswer> {
    let mut result = None;
    for (tokens, turn) in turn_tokens.iter().zip(&round.turns) {
        session.prefill(tokens)?;
        match &turn.answer {
            crate::instructions::AnswerSlot::Text(s) => {
                session.prefill(&setup.vocab.encode_text(s)?)?;
            }
            crate::instructions::AnswerSlot::KeypointName => {
                session.prefill(&setup.vocab.encode_text(&round.spec.name)?)?;
            }
            crate::instructions::AnswerSlot::Coordinates => {
                result = Some(generate_answer(
                    session,
                    setup.vocab,
                    setup.codec,
                    &decode.strategy,
                    decode.constrained,
                    rng,
                    decode.max_new_tokens,
                )?);
            }
        }
    }
    result.ok_or_else(|| Error::Config("round has no coordinate turn".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instructions::Registry;
    use crate::model::{FinetuneMode, ModelConfig};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn fixed_logits() -> Vec<f64> {
        // Four-token distribution {0.5, 0.3, 0.15, 0.05} as logits.
        vec![0.5f64.ln(), 0.3f64.ln(), 0.15f64.ln(), 0.05f64.ln()]
    }

    #[test]
    fn greedy_breaks_ties_by_lowest_id() {
        let logits = vec![1.0, 3.0, 3.0, 0.0];
        let mut rng = stream(1, &[0]);
        let tok = decode_next(&logits, &DecodeStrategy::Greedy, &mut rng, None).unwrap();
        assert_eq!(tok, 1);
    }

    #[test]
    fn top_k_renormalizes_over_k_largest() {
        // probs {a: 0.5, b: 0.3, c: 0.2}; TopK(2) gives {a: 0.625, b: 0.375}.
        let logits = vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let mut rng = stream(2, &[0]);
        let n = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let t = decode_next(&logits, &DecodeStrategy::TopK { k: 2 }, &mut rng, None).unwrap();
            counts[t] += 1;
        }
        assert_eq!(counts[2], 0, "token outside top-2 sampled");
        let fa = counts[0] as f64 / n as f64;
        assert!((fa - 0.625).abs() < 0.01, "fa = {fa}");
    }

    #[test]
    fn nucleus_prefix_rule_includes_boundary_token() {
        // probs {0.5, 0.3, 0.2}: cumulative 0.5, 0.8, 1.0; p=0.92 keeps all 3.
        let logits = vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let mut rng = stream(3, &[0]);
        let mut seen = [false; 3];
        for _ in 0..10_000 {
            let t =
                decode_next(&logits, &DecodeStrategy::Nucleus { p: 0.92 }, &mut rng, None).unwrap();
            seen[t] = true;
        }
        assert_eq!(seen, [true, true, true]);

        // p=0.7 keeps exactly {0, 1}.
        let mut seen = [false; 3];
        for _ in 0..10_000 {
            let t =
                decode_next(&logits, &DecodeStrategy::Nucleus { p: 0.7 }, &mut rng, None).unwrap();
            seen[t] = true;
        }
        assert_eq!(seen, [true, true, false]);
    }

    #[test]
    fn low_temperature_converges_to_greedy() {
        let logits = fixed_logits();
        let mut rng = stream(4, &[0]);
        for _ in 0..1000 {
            let t = decode_next(
                &logits,
                &DecodeStrategy::Temperature { t: 1e-6 },
                &mut rng,
                None,
            )
            .unwrap();
            assert_eq!(t, 0);
        }
    }

    /// Chi-squared goodness of fit of empirical frequencies against the
    /// analytic strategy-transformed distribution, at p > 0.01.
    fn chi_squared_ok(counts: &[usize], expected_probs: &[f64], n: usize) -> (f64, f64) {
        let mut stat = 0.0;
        let mut df = 0usize;
        for (c, p) in counts.iter().zip(expected_probs) {
            if *p == 0.0 {
                assert_eq!(*c, 0, "sampled a zero-probability token");
                continue;
            }
            let e = p * n as f64;
            stat += (*c as f64 - e) * (*c as f64 - e) / e;
            df += 1;
        }
        let dist = ChiSquared::new((df - 1) as f64).unwrap();
        let critical = dist.inverse_cdf(0.99);
        (stat, critical)
    }

    #[test]
    fn sampling_fidelity_matches_analytic_transforms() {
        let logits = fixed_logits();
        let base = [0.5, 0.3, 0.15, 0.05];
        let n = 100_000;

        // Temperature 0.6: p_i ∝ p_i^(1/0.6).
        let pow: Vec<f64> = base.iter().map(|p: &f64| p.powf(1.0 / 0.6)).collect();
        let z: f64 = pow.iter().sum();
        let temp_expect: Vec<f64> = pow.iter().map(|p| p / z).collect();

        // TopK(3): renormalize over the three largest.
        let z3: f64 = base[..3].iter().sum();
        let topk_expect = vec![base[0] / z3, base[1] / z3, base[2] / z3, 0.0];

        // Nucleus(0.92): cumulative 0.5, 0.8, 0.95 >= 0.92 -> keep 3.
        let nucleus_expect = topk_expect.clone();

        let cases: Vec<(DecodeStrategy, Vec<f64>)> = vec![
            (DecodeStrategy::Temperature { t: 0.6 }, temp_expect),
            (DecodeStrategy::TopK { k: 3 }, topk_expect),
            (DecodeStrategy::Nucleus { p: 0.92 }, nucleus_expect),
        ];
        for (strategy, expected) in cases {
            let mut rng = stream(5, &[crate::rng::tag_str(&strategy.label())]);
            let mut counts = vec![0usize; 4];
            for _ in 0..n {
                let t = decode_next(&logits, &strategy, &mut rng, None).unwrap();
                counts[t] += 1;
            }
            let (stat, critical) = chi_squared_ok(&counts, &expected, n);
            assert!(
                stat < critical,
                "{}: chi2 {stat} >= {critical}, counts {counts:?}",
                strategy.label()
            );
        }
    }

    fn tiny_model(seed: u64) -> ModelBundle {
        let cfg = ModelConfig {
            image_size: 16,
            patch: 8,
            encoder_width: 16,
            encoder_depth: 1,
            encoder_heads: 2,
            width: 24,
            lm_depth: 1,
            lm_heads: 2,
            context: 384,
            adapter_rank: 2,
            adapter_scale: 1.0,
            finetune_mode: FinetuneMode::Adapters,
        };
        ModelBundle::init(&cfg, &Vocabulary::default_charset(), seed).unwrap()
    }

    fn test_image(seed: u64) -> Image {
        let mut rng = stream(seed, &[44]);
        let mut img = Image::new(16, 16);
        for v in img.pixels.iter_mut() {
            *v = rand::Rng::gen_range(&mut rng, 0.0..1.0);
        }
        img
    }

    fn setup_for<'a>(
        vocab: &'a Vocabulary,
        codec: &'a CoordCodec,
        style: &'a PromptStyle,
        templates: &'a Templates,
        reg: &Registry,
    ) -> PromptSetup<'a> {
        PromptSetup {
            style,
            templates,
            vocab,
            codec,
            category_names: reg.keypoint_names("animal body").unwrap(),
        }
    }

    #[test]
    fn constrained_output_always_parses_even_untrained() {
        let model = tiny_model(31);
        let vocab = Vocabulary::default_charset();
        let codec = CoordCodec::with_k(3).unwrap();
        let img = test_image(1);
        let mut session = InferSession::new(&model, &img).unwrap();
        session.prefill(&[vocab.bos(), vocab.sep_user(), 20, 21, vocab.sep_assistant()]).unwrap();
        let mut rng = stream(6, &[0]);
        let ans = generate_answer(
            &mut session,
            &vocab,
            &codec,
            &DecodeStrategy::Greedy,
            true,
            &mut rng,
            32,
        )
        .unwrap();
        assert!(!ans.parse_failed);
        assert!(codec.parse(&ans.text).is_ok());
    }

    #[test]
    fn constrained_top1_equals_greedy_tokenwise() {
        let model = tiny_model(32);
        let vocab = Vocabulary::default_charset();
        let codec = CoordCodec::with_k(3).unwrap();
        let img = test_image(2);
        let run = |strategy: DecodeStrategy| {
            let mut session = InferSession::new(&model, &img).unwrap();
            session
                .prefill(&[vocab.bos(), vocab.sep_user(), 25, 30, vocab.sep_assistant()])
                .unwrap();
            let mut rng = stream(7, &[0]);
            generate_answer(&mut session, &vocab, &codec, &strategy, true, &mut rng, 32)
                .unwrap()
                .tokens
        };
        assert_eq!(run(DecodeStrategy::Greedy), run(DecodeStrategy::TopK { k: 1 }));
    }

    #[test]
    fn unconstrained_on_random_model_flags_parse_failures() {
        let model = tiny_model(33);
        let vocab = Vocabulary::default_charset();
        let codec = CoordCodec::with_k(3).unwrap();
        let img = test_image(3);
        let mut failures = 0;
        let n = 8;
        for s in 0..n {
            let mut session = InferSession::new(&model, &img).unwrap();
            session
                .prefill(&[vocab.bos(), vocab.sep_user(), 20 + s, vocab.sep_assistant()])
                .unwrap();
            let mut rng = stream(8, &[s as u64]);
            let ans = generate_answer(
                &mut session,
                &vocab,
                &codec,
                &DecodeStrategy::Temperature { t: 1.0 },
                false,
                &mut rng,
                24,
            )
            .unwrap();
            if ans.parse_failed {
                failures += 1;
                assert_eq!((ans.x, ans.y), (0.5, 0.5), "fallback must be center");
            }
        }
        // An untrained model essentially never emits a valid template.
        assert!(failures >= n - 1, "only {failures}/{n} failed");
    }

    #[test]
    fn contrastive_requires_session_and_is_deterministic() {
        let logits = fixed_logits();
        let mut rng = stream(9, &[0]);
        let err = decode_next(
            &logits,
            &DecodeStrategy::Contrastive { alpha: 0.6, k: 4 },
            &mut rng,
            None,
        );
        assert!(err.is_err());

        let model = tiny_model(34);
        let vocab = Vocabulary::default_charset();
        let codec = CoordCodec::with_k(3).unwrap();
        let img = test_image(4);
        let run = || {
            let mut session = InferSession::new(&model, &img).unwrap();
            session
                .prefill(&[vocab.bos(), vocab.sep_user(), 18, vocab.sep_assistant()])
                .unwrap();
            let mut rng = stream(10, &[0]);
            generate_answer(
                &mut session,
                &vocab,
                &codec,
                &DecodeStrategy::Contrastive { alpha: 0.6, k: 4 },
                true,
                &mut rng,
                32,
            )
            .unwrap()
            .tokens
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_and_cumulative_agree_for_one_keypoint() {
        let model = tiny_model(35);
        let vocab = Vocabulary::default_charset();
        let codec = CoordCodec::with_k(3).unwrap();
        let style = PromptStyle::default();
        let templates = Templates::builtin();
        let reg = Registry::builtin();
        let setup = setup_for(&vocab, &codec, &style, &templates, &reg);
        let spec = reg.lookup("animal body", "nose").unwrap();
        let img = test_image(5);
        let decode = DecodeConfig::default();

        let single = infer_keypoints(
            &model,
            &img,
            std::slice::from_ref(&spec),
            &setup,
            InferenceMode::Single,
            &decode,
            11,
            0,
            None,
        )
        .unwrap();
        let cumulative = infer_keypoints(
            &model,
            &img,
            std::slice::from_ref(&spec),
            &setup,
            InferenceMode::Cumulative,
            &decode,
            11,
            0,
            None,
        )
        .unwrap();
        assert_eq!(single[0].x, cumulative[0].x);
        assert_eq!(single[0].y, cumulative[0].y);
    }

    #[test]
    fn single_mode_is_invariant_to_spec_order() {
        let model = tiny_model(36);
        let vocab = Vocabulary::default_charset();
        let codec = CoordCodec::with_k(3).unwrap();
        let style = PromptStyle::default();
        let templates = Templates::builtin();
        let reg = Registry::builtin();
        let setup = setup_for(&vocab, &codec, &style, &templates, &reg);
        let img = test_image(6);
        let decode = DecodeConfig {
            strategy: DecodeStrategy::Temperature { t: 0.8 },
            ..Default::default()
        };
        let mut specs: Vec<KeypointSpec> = ["nose", "neck", "left hip"]
            .iter()
            .map(|n| reg.lookup("animal body", n).unwrap())
            .collect();
        let forward = infer_keypoints(
            &model, &img, &specs, &setup, InferenceMode::Single, &decode, 12, 3, None,
        )
        .unwrap();
        specs.reverse();
        let backward = infer_keypoints(
            &model, &img, &specs, &setup, InferenceMode::Single, &decode, 12, 3, None,
        )
        .unwrap();
        for f in &forward {
            let b = backward.iter().find(|p| p.name == f.name).unwrap();
            assert_eq!((f.x, f.y), (b.x, b.y), "keypoint {}", f.name);
        }
    }
}
