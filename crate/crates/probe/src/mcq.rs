//! Domain types for multiple-choice questions and the forward/backward
//! permutation engine.
//!
//! A question with `k` options is presented as a sequence of slots, each
//! pairing an option symbol (`A`..) with an option content. The three
//! sensitivity settings each define one backward counterpart of the natural
//! forward presentation:
//!
//! * `token`  — contents stay in place, symbols are relabeled in reverse;
//! * `order`  — (symbol, content) pairs are kept but presented in reverse;
//! * `both`   — symbols stay in place, contents are reversed.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible option count.
pub const MIN_OPTIONS: usize = 2;
/// Symbols are drawn from `A..Z`, so an item can have at most 26 options.
pub const MAX_OPTIONS: usize = 26;

/// A single uppercase option label, `A`..`Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OptionSymbol(char);

impl OptionSymbol {
    /// Symbol for 1-based option index `i` (1 -> `A`).
    pub fn from_index(i: usize) -> Option<Self> {
        if (1..=MAX_OPTIONS).contains(&i) {
            Some(OptionSymbol((b'A' + (i as u8 - 1)) as char))
        } else {
            None
        }
    }

    /// Parses a letter, case-insensitively.
    pub fn from_letter(c: char) -> Option<Self> {
        let up = c.to_ascii_uppercase();
        up.is_ascii_uppercase().then_some(OptionSymbol(up))
    }

    /// 1-based index of this symbol in the alphabet (`A` -> 1).
    pub fn index(&self) -> usize {
        (self.0 as u8 - b'A') as usize + 1
    }

    pub fn letter(&self) -> char {
        self.0
    }

    /// The first `k` symbols, `A` up to the k-th letter.
    pub fn first(k: usize) -> impl Iterator<Item = OptionSymbol> {
        (1..=k.min(MAX_OPTIONS)).map(|i| OptionSymbol::from_index(i).unwrap())
    }
}

impl fmt::Display for OptionSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which of the three forward/backward constructions a run probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivitySetting {
    Token,
    Order,
    Both,
}

impl SensitivitySetting {
    pub const ALL: [SensitivitySetting; 3] = [
        SensitivitySetting::Token,
        SensitivitySetting::Order,
        SensitivitySetting::Both,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SensitivitySetting::Token => "token",
            SensitivitySetting::Order => "order",
            SensitivitySetting::Both => "both",
        }
    }
}

impl fmt::Display for SensitivitySetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }

    pub fn flipped(&self) -> Direction {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One multiple-choice question.
///
/// `contents` is the ordered option content list; `gold_index` is 1-based
/// into it, matching the 1-based indexing used throughout this crate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub contents: Vec<String>,
    pub gold_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask: Option<String>,
}

impl McqItem {
    pub fn k(&self) -> usize {
        self.contents.len()
    }
}

/// One presentation slot: a symbol shown next to the content it labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub symbol: OptionSymbol,
    /// 1-based index into the item's `contents`.
    pub content_index: usize,
}

/// An ordered presentation of (symbol, content) pairs for one request.
///
/// Slots form a bijection: each of the first `k` symbols and each content
/// index appears exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLayout {
    pub setting: SensitivitySetting,
    pub direction: Direction,
    pub slots: Vec<Slot>,
}

impl RequestLayout {
    /// The canonical forward layout: symbol `i` labels content `i`.
    pub fn forward(k: usize, setting: SensitivitySetting) -> Self {
        RequestLayout {
            setting,
            direction: Direction::Forward,
            slots: (1..=k)
                .map(|i| Slot {
                    symbol: OptionSymbol::from_index(i).unwrap(),
                    content_index: i,
                })
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    /// The reversed counterpart of this layout under its own setting, with
    /// the direction flipped. Applying it twice returns the original layout.
    pub fn reversed(&self) -> RequestLayout {
        let k = self.k();
        let slots = match self.setting {
            // Contents keep their presentation positions; symbols are
            // re-assigned in reverse.
            SensitivitySetting::Token => (0..k)
                .map(|i| Slot {
                    symbol: self.slots[k - 1 - i].symbol,
                    content_index: self.slots[i].content_index,
                })
                .collect(),
            // Pairs are untouched; the presentation order flips.
            SensitivitySetting::Order => self.slots.iter().rev().copied().collect(),
            // Symbols keep their presentation positions; contents reverse.
            SensitivitySetting::Both => (0..k)
                .map(|i| Slot {
                    symbol: self.slots[i].symbol,
                    content_index: self.slots[k - 1 - i].content_index,
                })
                .collect(),
        };
        RequestLayout {
            setting: self.setting,
            direction: self.direction.flipped(),
            slots,
        }
    }

    /// The symbol labelling `content_index` in this layout, if present.
    pub fn symbol_for_content(&self, content_index: usize) -> Option<OptionSymbol> {
        self.slots
            .iter()
            .find(|s| s.content_index == content_index)
            .map(|s| s.symbol)
    }

    /// Symbols in presentation order.
    pub fn symbols(&self) -> impl Iterator<Item = OptionSymbol> + '_ {
        self.slots.iter().map(|s| s.symbol)
    }
}

/// A violated [`McqItem`] invariant. [`validate_item`] reports all of them.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ItemViolation {
    #[error("too few options: k = {k}, need at least {MIN_OPTIONS}")]
    TooFewOptions { k: usize },
    #[error("k exceeds symbol alphabet: k = {k}, max {MAX_OPTIONS}")]
    AlphabetExceeded { k: usize },
    #[error("gold out of range: gold_index = {gold_index}, k = {k}")]
    GoldOutOfRange { gold_index: usize, k: usize },
    #[error("empty content at option {index}")]
    EmptyContent { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum McqError {
    #[error("invalid item '{id}': {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidItem {
        id: String,
        violations: Vec<ItemViolation>,
    },
    #[error("symbol {symbol} is not part of a {k}-option layout")]
    UnknownSymbol { symbol: OptionSymbol, k: usize },
}

/// Checks every item invariant; an empty list means the item is valid.
pub fn validate_item(item: &McqItem) -> Vec<ItemViolation> {
    let mut violations = Vec::new();
    let k = item.k();
    if k < MIN_OPTIONS {
        violations.push(ItemViolation::TooFewOptions { k });
    }
    if k > MAX_OPTIONS {
        violations.push(ItemViolation::AlphabetExceeded { k });
    }
    if item.gold_index < 1 || item.gold_index > k {
        violations.push(ItemViolation::GoldOutOfRange {
            gold_index: item.gold_index,
            k,
        });
    }
    for (i, content) in item.contents.iter().enumerate() {
        if content.is_empty() {
            violations.push(ItemViolation::EmptyContent { index: i + 1 });
        }
    }
    violations
}

/// Builds the (forward, backward) layout pair for one item under a setting.
///
/// The forward layout is identical across settings; the backward layout is
/// the setting's reversal of it.
pub fn build_request_pair(
    item: &McqItem,
    setting: SensitivitySetting,
) -> Result<(RequestLayout, RequestLayout), McqError> {
    let violations = validate_item(item);
    if !violations.is_empty() {
        return Err(McqError::InvalidItem {
            id: item.id.clone(),
            violations,
        });
    }
    let forward = RequestLayout::forward(item.k(), setting);
    let backward = forward.reversed();
    Ok((forward, backward))
}

/// Maps the symbol a model chose back to the content index it labelled.
pub fn decode_answer(layout: &RequestLayout, chosen: OptionSymbol) -> Result<usize, McqError> {
    layout
        .slots
        .iter()
        .find(|s| s.symbol == chosen)
        .map(|s| s.content_index)
        .ok_or(McqError::UnknownSymbol {
            symbol: chosen,
            k: layout.k(),
        })
}
