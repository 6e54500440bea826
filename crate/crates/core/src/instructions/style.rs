//! Prompt styles and question construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::registry::KeypointSpec;
use crate::error::{Error, Result};

/// Exact sentence substituted when the description is removed.
pub const NO_DESCRIPTION_SENTENCE: &str = "There is no description to refer to.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Single question naming the keypoint, answered with coordinates.
    Base,
    /// Category question first, then the coordinate question.
    StepByStep,
    /// Pretraining: coordinates in the question, keypoint name as answer.
    DirectQaPretrain,
    /// Pretraining: category, visibility, then name-for-coordinates.
    StepByStepQaPretrain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptStyle {
    pub kind: PromptKind,
    pub use_description: bool,
    pub use_keypoint_list: bool,
    pub vague_descriptions: bool,
    pub description_replaced: bool,
    pub description_removed: bool,
    pub diverse_questions: bool,
    pub conversation_outline: bool,
    pub random_replace_in_training: bool,
    /// Per-round probabilities of {detail, replaced, removed} when
    /// `random_replace_in_training` is on.
    pub replace_probs: [f64; 3],
}

impl Default for PromptStyle {
    fn default() -> Self {
        PromptStyle {
            kind: PromptKind::Base,
            use_description: true,
            use_keypoint_list: false,
            vague_descriptions: false,
            description_replaced: false,
            description_removed: false,
            diverse_questions: false,
            conversation_outline: false,
            random_replace_in_training: false,
            replace_probs: [0.6, 0.2, 0.2],
        }
    }
}

impl PromptStyle {
    pub fn validate(&self) -> Result<()> {
        let exclusive = [
            self.vague_descriptions,
            self.description_replaced,
            self.description_removed,
        ];
        if exclusive.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::Config(
                "at most one of vague/replaced/removed descriptions may be active".into(),
            ));
        }
        let s: f64 = self.replace_probs.iter().sum();
        if self.replace_probs.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "replace_probs {:?} must be non-negative and sum to 1",
                self.replace_probs
            )));
        }
        Ok(())
    }
}

/// Named plain-text templates with `{placeholder}` slots.
#[derive(Debug, Clone)]
pub struct Templates {
    map: BTreeMap<String, String>,
}

macro_rules! builtin_template {
    ($map:expr, $name:literal) => {
        $map.insert(
            $name.to_string(),
            include_str!(concat!("../../assets/templates/", $name, ".txt"))
                .trim_end_matches('\n')
                .to_string(),
        );
    };
}

impl Templates {
    pub fn builtin() -> Self {
        let mut map = BTreeMap::new();
        builtin_template!(map, "outline");
        builtin_template!(map, "question_base");
        builtin_template!(map, "question_pool");
        builtin_template!(map, "question_category");
        builtin_template!(map, "answer_category");
        builtin_template!(map, "question_follow");
        builtin_template!(map, "question_direct_qa");
        builtin_template!(map, "question_exist");
        builtin_template!(map, "answer_exist");
        builtin_template!(map, "list_clause");
        builtin_template!(map, "replaced_description");
        Templates { map }
    }

    /// Override builtin templates with `.txt` files from a directory.
    pub fn load_dir(path: &Path) -> Result<Self> {
        let mut t = Self::builtin();
        for entry in std::fs::read_dir(path)? {
            let entry = entry?;
            let p = entry.path();
            if p.extension().and_then(|e| e.to_str()) == Some("txt") {
                let name = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Config(format!("bad template file {p:?}")))?;
                let body = std::fs::read_to_string(&p)?;
                t.map
                    .insert(name.to_string(), body.trim_end_matches('\n').to_string());
            }
        }
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Result<&str> {
        self.map
            .get(name)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Config(format!("missing template {name:?}")))
    }

    /// Lines of the diverse-question pool.
    pub fn question_pool(&self) -> Result<Vec<&str>> {
        Ok(self.get("question_pool")?.lines().collect())
    }
}

pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// How the description appears in one round's question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptionMode {
    Detail,
    Vague,
    Replaced,
    Removed,
    Omitted,
}

/// Resolve the description mode for one round. `rng` drives the random
/// replacement regime when active.
pub fn description_mode(style: &PromptStyle, rng: &mut ChaCha8Rng) -> DescriptionMode {
    if !style.use_description {
        return DescriptionMode::Omitted;
    }
    if style.random_replace_in_training {
        let u: f64 = rng.gen();
        let [p_detail, p_replaced, _] = style.replace_probs;
        if u < p_detail {
            return DescriptionMode::Detail;
        }
        if u < p_detail + p_replaced {
            return DescriptionMode::Replaced;
        }
        return DescriptionMode::Removed;
    }
    if style.description_removed {
        DescriptionMode::Removed
    } else if style.description_replaced {
        DescriptionMode::Replaced
    } else if style.vague_descriptions {
        DescriptionMode::Vague
    } else {
        DescriptionMode::Detail
    }
}

/// First sentence of a description: the definitional part without the
/// precise positional sentence.
pub fn vague_description(description: &str) -> &str {
    match description.find('.') {
        Some(i) => &description[..=i],
        None => description,
    }
}

/// Description clause appended to a question, with its leading space.
pub fn description_clause(
    spec: &KeypointSpec,
    mode: DescriptionMode,
    templates: &Templates,
) -> Result<String> {
    Ok(match mode {
        DescriptionMode::Omitted => String::new(),
        DescriptionMode::Detail => format!(" {}", spec.description),
        DescriptionMode::Vague => format!(" {}", vague_description(&spec.description)),
        DescriptionMode::Removed => format!(" {NO_DESCRIPTION_SENTENCE}"),
        DescriptionMode::Replaced => fill(
            templates.get("replaced_description")?,
            &[("name", &spec.name), ("category", &spec.category)],
        ),
    })
}
