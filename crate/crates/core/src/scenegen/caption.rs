use serde::{Deserialize, Serialize};

use super::palette::COLOR_NAMES;
use super::{Brightness, Kind, SceneSpec, Size};
use crate::error::{Error, Result};

pub const SLOT_NAMES: [&str; 7] = ["count", "size", "color", "kind", "position", "background", "brightness"];

/// Grammar vocabulary. Each slot owns a disjoint, contiguous id range.
pub const VOCAB: [&str; 31] = [
    "one",
    "two",
    "three", // count
    "small",
    "large", // size
    "red",
    "green",
    "blue",
    "yellow",
    "magenta",
    "cyan",
    "orange",
    "purple", // color
    "circle",
    "square",
    "triangle", // kind
    "top-left",
    "top-center",
    "top-right",
    "middle-left",
    "center",
    "middle-right",
    "bottom-left",
    "bottom-center",
    "bottom-right", // position
    "palette-0",
    "palette-1",
    "palette-2",
    "palette-3", // background
    "dim",
    "bright", // brightness
];

/// First id of each slot, plus the end sentinel.
const SLOT_START: [usize; 8] = [0, 3, 5, 13, 16, 25, 29, 31];

/// Id reserved for the unconditional (guidance) branch.
pub const NULL_TOKEN: usize = VOCAB.len();
pub const VOCAB_SIZE: usize = VOCAB.len() + 1;

/// A seven-token caption `[count, size, color, kind, position, background, brightness]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Caption {
    ids: [usize; 7],
}

/// Conditioning input for the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    Caption(Caption),
    Null,
}

impl Condition {
    pub fn token_ids(&self) -> Vec<usize> {
        match self {
            Condition::Caption(c) => c.ids.to_vec(),
            Condition::Null => vec![NULL_TOKEN],
        }
    }
}

impl From<Caption> for Condition {
    fn from(c: Caption) -> Self {
        Condition::Caption(c)
    }
}

fn slot_value(ids: &[usize; 7], slot: usize) -> usize {
    ids[slot] - SLOT_START[slot]
}

impl Caption {
    pub fn from_spec(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let values = [
            spec.count as usize - 1,
            spec.size as usize,
            spec.color_idx as usize,
            spec.kind as usize,
            spec.cell as usize,
            spec.background_idx as usize,
            spec.brightness as usize,
        ];
        let mut ids = [0; 7];
        for (slot, v) in values.into_iter().enumerate() {
            ids[slot] = SLOT_START[slot] + v;
        }
        Ok(Self { ids })
    }

    pub fn from_ids(ids: [usize; 7]) -> Result<Self> {
        for (slot, &id) in ids.iter().enumerate() {
            if !(SLOT_START[slot]..SLOT_START[slot + 1]).contains(&id) {
                return Err(Error::MalformedCaption {
                    slot,
                    reason: format!("token id {id} is not a valid {} token", SLOT_NAMES[slot]),
                });
            }
        }
        Ok(Self { ids })
    }

    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        if tokens.len() != 7 {
            return Err(Error::MalformedCaption {
                slot: tokens.len().min(7),
                reason: format!("expected 7 tokens, got {}", tokens.len()),
            });
        }
        let mut ids = [0; 7];
        for (slot, tok) in tokens.iter().enumerate() {
            let tok = tok.as_ref();
            let range = SLOT_START[slot]..SLOT_START[slot + 1];
            ids[slot] = range
                .clone()
                .find(|&i| VOCAB[i] == tok)
                .ok_or_else(|| Error::MalformedCaption {
                    slot,
                    reason: format!("{tok:?} is not a valid {} token", SLOT_NAMES[slot]),
                })?;
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize; 7] {
        &self.ids
    }

    pub fn tokens(&self) -> [&'static str; 7] {
        self.ids.map(|i| VOCAB[i])
    }

    /// Number of slots holding different tokens.
    pub fn hamming(&self, other: &Caption) -> usize {
        self.ids.iter().zip(&other.ids).filter(|(a, b)| a != b).count()
    }

    pub fn spec(&self) -> SceneSpec {
        let ids = &self.ids;
        SceneSpec {
            count: slot_value(ids, 0) as u8 + 1,
            size: Size::ALL[slot_value(ids, 1)],
            color_idx: slot_value(ids, 2) as u8,
            kind: Kind::ALL[slot_value(ids, 3)],
            cell: slot_value(ids, 4) as u8,
            background_idx: slot_value(ids, 5) as u8,
            brightness: Brightness::ALL[slot_value(ids, 6)],
        }
    }

    /// Spec described by this caption, rejected when the placement overflows.
    pub fn spec_of(&self) -> Result<SceneSpec> {
        let s = self.spec();
        s.validate().map_err(|e| Error::MalformedCaption {
            slot: 4,
            reason: e.to_string(),
        })?;
        Ok(s)
    }

    pub fn text(&self) -> String {
        let [count, size, color, kind, position, background, brightness] = self.tokens();
        let plural = if count == "one" { "" } else { "s" };
        format!("{count} {size} {color} {kind}{plural} at {position} on {background} background, {brightness}")
    }
}

impl TryFrom<Vec<String>> for Caption {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Caption::from_tokens(&v)
    }
}

impl From<Caption> for Vec<String> {
    fn from(c: Caption) -> Self {
        c.tokens().iter().map(|s| s.to_string()).collect()
    }
}

impl std::fmt::Display for Caption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text())
    }
}

// Keep the color slot in sync with the palette table.
const _: () = assert!(SLOT_START[3] - SLOT_START[2] == COLOR_NAMES.len());
