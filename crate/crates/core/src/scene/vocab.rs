use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosTag {
    Det,
    Adj,
    Noun,
    Conj,
    Other,
    Special,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Circle,
    Square,
    Triangle,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Circle, Category::Square, Category::Triangle];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn noun(self) -> &'static str {
        match self {
            Category::Circle => "circle",
            Category::Square => "square",
            Category::Triangle => "triangle",
        }
    }

    pub fn from_noun(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.noun() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == s)
    }

    /// Flat fill color. Channels sit exactly on the 8-bit grid so PPM files
    /// reproduce the in-memory image.
    pub fn rgb(self) -> [f64; 3] {
        let b = |r: u8, g: u8, bl: u8| [r as f64 / 255.0, g as f64 / 255.0, bl as f64 / 255.0];
        match self {
            Color::Red => b(230, 25, 25),
            Color::Green => b(25, 204, 51),
            Color::Blue => b(38, 76, 242),
            Color::Yellow => b(242, 230, 25),
        }
    }
}

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMG: &str = "<img>";

const TOKENS: &[(&str, PosTag)] = &[
    (BOS, PosTag::Special),
    (EOS, PosTag::Special),
    (IMG, PosTag::Special),
    ("describe", PosTag::Other),
    (":", PosTag::Other),
    ("a", PosTag::Det),
    ("an", PosTag::Det),
    ("the", PosTag::Det),
    ("red", PosTag::Adj),
    ("green", PosTag::Adj),
    ("blue", PosTag::Adj),
    ("yellow", PosTag::Adj),
    ("small", PosTag::Adj),
    ("large", PosTag::Adj),
    ("circle", PosTag::Noun),
    ("square", PosTag::Noun),
    ("triangle", PosTag::Noun),
    ("disk", PosTag::Noun),
    ("box", PosTag::Noun),
    ("wedge", PosTag::Noun),
    ("and", PosTag::Conj),
    (",", PosTag::Other),
    (".", PosTag::Other),
    ("image", PosTag::Other),
    ("shows", PosTag::Other),
    ("with", PosTag::Other),
    ("of", PosTag::Other),
    ("on", PosTag::Other),
    ("there", PosTag::Other),
    ("is", PosTag::Other),
    ("black", PosTag::Other),
    ("background", PosTag::Other),
    ("left", PosTag::Other),
    ("right", PosTag::Other),
    ("to", PosTag::Other),
    ("next", PosTag::Other),
];

/// Closed, part-of-speech tagged token table. Ids are dense from 0.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    tags: Vec<PosTag>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let words: Vec<String> = TOKENS.iter().map(|(w, _)| w.to_string()).collect();
        let tags = TOKENS.iter().map(|(_, t)| *t).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, tags, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    fn must(&self, word: &str) -> usize {
        self.id(word).expect("standard token")
    }

    pub fn bos(&self) -> usize {
        self.must(BOS)
    }

    pub fn eos(&self) -> usize {
        self.must(EOS)
    }

    pub fn img(&self) -> usize {
        self.must(IMG)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(|s| s.as_str()).unwrap_or("<unk>")
    }

    /// Tag for a token id; unknown ids are `Other`.
    pub fn tag(&self, id: usize) -> PosTag {
        self.tags.get(id).copied().unwrap_or(PosTag::Other)
    }

    /// Splits on whitespace; every word must be in the table.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Argument(format!("word {w:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|s| s.as_str())
    }
}
