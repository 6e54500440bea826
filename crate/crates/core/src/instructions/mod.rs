//! Instruction construction: keypoint registry, prompt styles, round
//! grouping strategies, and conversation rendering with answer-span masks.

pub mod pairing;
pub mod registry;
pub mod render;
pub mod style;

pub use pairing::{dynamic_round_pairing, fixed_round_pairing, subset_pairing};
pub use registry::{KeypointSpec, Registry};
pub use render::{build_round, render_conversation, AnswerSlot, RenderedConversation, RoundTemplate, Turn};
pub use style::{PromptKind, PromptStyle, Templates, NO_DESCRIPTION_SENTENCE};
