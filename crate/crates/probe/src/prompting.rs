//! Prompt rendering and answer extraction.
//!
//! [`render_prompt`] produces the exact request text for one layout; the
//! golden fixtures under `fixtures/golden/` pin every byte. [`parse_choice`]
//! recovers the double-bracketed verdict from a model reply.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::mcq::{McqItem, OptionSymbol, RequestLayout};

/// The instruction block sent ahead of every question. The missing space in
/// "option.For example" is deliberate: replies are matched against this text
/// byte-for-byte in the golden fixtures.
pub const SYSTEM_BLOCK: &str = "[System]\nPlease carefully read the following questions and choices. Select the most suitable one. Output your final verdict by strictly following this prompt: Indicate your choice by placing it inside double square brackets, with a single character representing the chosen option.For example, [[<single_character>]].";

/// A fully rendered request prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText(pub String);

impl PromptText {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("layout has {layout_k} slots but item '{id}' has {item_k} options")]
    LayoutMismatch {
        id: String,
        item_k: usize,
        layout_k: usize,
    },
    #[error("layout slot references content {content_index} outside item '{id}'")]
    BadContentIndex { id: String, content_index: usize },
}

/// No parseable `[[X]]` verdict, or the extracted character is not one of the
/// first `k` symbols. Carries the raw reply for logging and retry decisions.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no valid [[X]] choice in response: {raw:?}")]
pub struct ParseFailure {
    pub raw: String,
}

/// Renders the layout into the request prompt: the system block, the
/// question block, then one choice block per slot in presentation order,
/// all separated by single blank lines, with no trailing newline.
pub fn render_prompt(item: &McqItem, layout: &RequestLayout) -> Result<PromptText, PromptError> {
    if layout.k() != item.k() {
        return Err(PromptError::LayoutMismatch {
            id: item.id.clone(),
            item_k: item.k(),
            layout_k: layout.k(),
        });
    }
    let mut blocks = Vec::with_capacity(layout.k() + 2);
    blocks.push(SYSTEM_BLOCK.to_string());
    blocks.push(format!(
        "[The start of question]\n{}\n[The end of question]",
        item.question
    ));
    for slot in &layout.slots {
        let content = item
            .contents
            .get(slot.content_index.wrapping_sub(1))
            .ok_or_else(|| PromptError::BadContentIndex {
                id: item.id.clone(),
                content_index: slot.content_index,
            })?;
        blocks.push(format!(
            "[The start of choice {sym}]\n{content}\n[The end of choice {sym}]",
            sym = slot.symbol
        ));
    }
    Ok(PromptText(blocks.join("\n\n")))
}

fn choice_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Single non-bracket, non-space character between double brackets;
    // interior whitespace is tolerated and trimmed.
    RE.get_or_init(|| Regex::new(r"\[\[\s*([^\[\]\s])\s*\]\]").unwrap())
}

/// Extracts the chosen symbol from a model reply.
///
/// The last `[[X]]` occurrence wins — chatty models often restate before the
/// final verdict. Lowercase letters are uppercased. The extracted character
/// must be one of the first `k` symbols.
pub fn parse_choice(response_text: &str, k: usize) -> Result<OptionSymbol, ParseFailure> {
    let fail = || ParseFailure {
        raw: response_text.to_string(),
    };
    let last = choice_pattern()
        .captures_iter(response_text)
        .last()
        .ok_or_else(fail)?;
    let ch = last.get(1).unwrap().as_str().chars().next().unwrap();
    let symbol = OptionSymbol::from_letter(ch).ok_or_else(fail)?;
    if symbol.index() > k {
        return Err(fail());
    }
    Ok(symbol)
}
