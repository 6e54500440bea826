//! Round construction and token-level conversation rendering.
//!
//! A conversation is `<bos>` (optionally preceded by an outline sentence),
//! then per round one or more `<sep-user> question <sep-assistant> answer`
//! turns, and a final `<eos>`. The supervision mask is 1 exactly on the
//! answer tokens the style trains on: the coordinate template (including its
//! scaffolding) for the tuning styles, the keypoint name for the pretraining
//! QA styles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::registry::KeypointSpec;
use super::style::{
    description_clause, description_mode, fill, PromptKind, PromptStyle, Templates,
};
use crate::codec::CoordCodec;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// What the assistant says in one turn, and whether it is supervised.
#[derive(Debug, Clone, PartialEq)]
pub enum AnswerSlot {
    /// The coordinate template; supervised.
    Coordinates,
    /// Fixed text (category confirmations etc.); not supervised.
    Text(String),
    /// The keypoint name; supervised (pretraining styles).
    KeypointName,
}

#[derive(Debug, Clone)]
pub struct Turn {
    /// Question text; may contain a `{coords}` slot filled at render time.
    pub question: String,
    pub answer: AnswerSlot,
}

/// One keypoint's share of a conversation.
#[derive(Debug, Clone)]
pub struct RoundTemplate {
    pub spec: KeypointSpec,
    pub turns: Vec<Turn>,
}

/// Build the turn structure for one keypoint under a prompt style.
pub fn build_round(
    spec: &KeypointSpec,
    category_names: &[String],
    style: &PromptStyle,
    templates: &Templates,
    rng: &mut ChaCha8Rng,
) -> Result<RoundTemplate> {
    style.validate()?;
    let mode = description_mode(style, rng);
    let desc_clause = description_clause(spec, mode, templates)?;
    let list_clause = if style.use_keypoint_list {
        fill(
            templates.get("list_clause")?,
            &[("category", &spec.category), ("list", &category_names.join(", "))],
        )
    } else {
        String::new()
    };
    let slots: &[(&str, &str)] = &[
        ("name", &spec.name),
        ("category", &spec.category),
        ("description_clause", &desc_clause),
        ("list_clause", &list_clause),
    ];

    let turns = match style.kind {
        PromptKind::Base => {
            let template = if style.diverse_questions {
                let pool = templates.question_pool()?;
                pool[rng.gen_range(0..pool.len())].to_string()
            } else {
                templates.get("question_base")?.to_string()
            };
            vec![Turn {
                question: fill(&template, slots),
                answer: AnswerSlot::Coordinates,
            }]
        }
        PromptKind::StepByStep => vec![
            Turn {
                question: fill(templates.get("question_category")?, slots),
                answer: AnswerSlot::Text(fill(templates.get("answer_category")?, slots)),
            },
            Turn {
                question: fill(templates.get("question_follow")?, slots),
                answer: AnswerSlot::Coordinates,
            },
        ],
        PromptKind::DirectQaPretrain => vec![Turn {
            question: fill(templates.get("question_direct_qa")?, slots),
            answer: AnswerSlot::KeypointName,
        }],
        PromptKind::StepByStepQaPretrain => vec![
            Turn {
                question: fill(templates.get("question_category")?, slots),
                answer: AnswerSlot::Text(fill(templates.get("answer_category")?, slots)),
            },
            Turn {
                question: fill(templates.get("question_exist")?, slots),
                answer: AnswerSlot::Text(fill(templates.get("answer_exist")?, slots)),
            },
            Turn {
                question: fill(templates.get("question_direct_qa")?, slots),
                answer: AnswerSlot::KeypointName,
            },
        ],
    };
    Ok(RoundTemplate {
        spec: spec.clone(),
        turns,
    })
}

/// A rendered conversation: tokens, 0/1 answer mask, and the masked spans.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedConversation {
    pub tokens: Vec<TokenId>,
    pub answer_mask: Vec<f64>,
    /// (start, length) of each supervised span, in token positions.
    pub answer_spans: Vec<(usize, usize)>,
    pub text: String,
}

/// Render rounds with their coordinate targets into a supervised token
/// sequence. `targets` must align one-to-one with `rounds`.
pub fn render_conversation(
    rounds: &[RoundTemplate],
    targets: &[(f64, f64)],
    vocab: &Vocabulary,
    codec: &CoordCodec,
    outline: Option<&str>,
) -> Result<RenderedConversation> {
    if rounds.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} rounds but {} targets",
            rounds.len(),
            targets.len()
        )));
    }
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut mask: Vec<f64> = Vec::new();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut text = String::new();

    let push_special = |tokens: &mut Vec<TokenId>, mask: &mut Vec<f64>, id: TokenId| {
        tokens.push(id);
        mask.push(0.0);
    };
    let push_text = |tokens: &mut Vec<TokenId>,
                     mask: &mut Vec<f64>,
                     text: &mut String,
                     s: &str,
                     weight: f64|
     -> Result<()> {
        let ids = vocab.encode_text(s)?;
        mask.extend(std::iter::repeat(weight).take(ids.len()));
        tokens.extend(ids);
        text.push_str(s);
        Ok(())
    };

    push_special(&mut tokens, &mut mask, vocab.bos());
    if let Some(outline_text) = outline {
        push_text(&mut tokens, &mut mask, &mut text, outline_text, 0.0)?;
    }
    for (round, &(x, y)) in rounds.iter().zip(targets) {
        let coords_text = codec.encode(x, y)?;
        for turn in &round.turns {
            push_special(&mut tokens, &mut mask, vocab.sep_user());
            let question = turn.question.replace("{coords}", &coords_text);
            push_text(&mut tokens, &mut mask, &mut text, &question, 0.0)?;
            push_special(&mut tokens, &mut mask, vocab.sep_assistant());
            let (answer_text, supervised) = match &turn.answer {
                AnswerSlot::Coordinates => (coords_text.clone(), true),
                AnswerSlot::Text(s) => (s.clone(), false),
                AnswerSlot::KeypointName => (round.spec.name.clone(), true),
            };
            if supervised {
                spans.push((tokens.len(), answer_text.chars().count()));
            }
            push_text(
                &mut tokens,
                &mut mask,
                &mut text,
                &answer_text,
                if supervised { 1.0 } else { 0.0 },
            )?;
        }
    }
    push_special(&mut tokens, &mut mask, vocab.eos());

    Ok(RenderedConversation {
        tokens,
        answer_mask: mask,
        answer_spans: spans,
        text,
    })
}
