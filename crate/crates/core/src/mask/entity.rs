//! Rule-based target-entity extraction from an editing instruction.
//!
//! Extraction works over any [`LinguisticParser`] that can tokenize, tag
//! parts of speech and report noun-chunk spans. [`LexiconParser`] is a
//! deterministic word-list tagger that needs no model files.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version of the bundled word lists; bump whenever a list changes.
pub const LEXICON_VERSION: &str = "2026.2";

pub const COMMAND_VERBS: &[&str] = &[
    "add",
    "remove",
    "make",
    "enhance",
    "replace",
    "improve",
    "increase",
    "decrease",
    "reduce",
    "refine",
    "upgrade",
    "change",
    "turn",
    "give",
    "put",
    "insert",
    "introduce",
    "apply",
    "convert",
    "transform",
    "create",
    "clean",
    "brighten",
    "darken",
    "soften",
    "sharpen",
    "render",
    "show",
    "let",
    "keep",
];

/// Imperatives that double as nouns. They are tagged as verbs but are not
/// stripped from entities, so "weather the paint" grounds to "paint".
pub const NOUN_VERBS: &[&str] = &[
    "age", "weather", "paint", "cover", "texture", "fill", "set", "place",
];

const AUX_VERBS: &[&str] = &[
    "is", "are", "be", "been", "was", "were", "look", "looks", "appear", "appears", "seem",
    "seems", "feel", "feels", "become", "becomes", "has", "have",
];

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "some", "this", "that", "these", "those", "its", "their", "his", "her", "my",
    "our", "your", "any", "each", "every", "all", "more", "several", "few",
];

const PREPOSITIONS: &[&str] = &[
    "on", "in", "into", "onto", "to", "with", "of", "at", "by", "from", "for", "near", "under",
    "over", "above", "below", "behind", "beside", "between", "across", "along", "around", "inside",
    "outside", "through", "against", "toward", "towards", "without", "within", "like", "as",
];

const CONJUNCTIONS: &[&str] = &["and", "or", "but", "so", "while", "then", "nor"];

const ADVERBS: &[&str] = &[
    "please", "very", "slightly", "much", "less", "too", "quite", "rather", "subtly", "gently",
    "heavily", "highly", "really", "also", "just", "only", "well", "again", "overall",
];

const PRONOUNS: &[&str] = &[
    "it",
    "them",
    "they",
    "everything",
    "something",
    "anything",
    "itself",
];

const ADJECTIVES: &[&str] = &[
    "realistic",
    "photorealistic",
    "natural",
    "detailed",
    "believable",
    "lifelike",
    "visible",
    "subtle",
    "brighter",
    "darker",
    "softer",
    "sharper",
    "richer",
    "warmer",
    "cooler",
    "better",
    "clean",
    "cleaner",
    "dirty",
    "dirtier",
    "real",
    "authentic",
    "convincing",
    "complete",
];

/// Nouns that never denote a segmentable region.
pub const ABSTRACT_NOUNS: &[&str] = &[
    "realism",
    "photorealism",
    "quality",
    "detail",
    "details",
    "fidelity",
    "appearance",
    "look",
    "style",
    "image",
    "picture",
    "photo",
    "photograph",
    "scene",
    "render",
    "rendering",
    "aesthetics",
    "atmosphere",
    "mood",
    "vibe",
    "sharpness",
    "contrast",
    "clarity",
    "everything",
    "overall",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pos {
    Verb,
    Det,
    Adj,
    Adv,
    Noun,
    Num,
    Prep,
    Conj,
    Pron,
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Parse {
    pub tokens: Vec<Token>,
    pub noun_chunks: Vec<Range<usize>>,
}

/// The three capabilities extraction needs from a parser.
pub trait LinguisticParser: Send + Sync {
    fn parse(&self, text: &str) -> Parse;
}

/// Word-list tagger: unknown words are nouns.
#[derive(Debug, Clone)]
pub struct LexiconParser {
    verbs: BTreeSet<String>,
}

impl Default for LexiconParser {
    fn default() -> Self {
        Self::with_verbs(
            COMMAND_VERBS
                .iter()
                .chain(NOUN_VERBS)
                .chain(AUX_VERBS)
                .map(|s| s.to_string()),
        )
    }
}

impl LexiconParser {
    pub fn with_verbs(verbs: impl IntoIterator<Item = String>) -> Self {
        Self {
            verbs: verbs.into_iter().map(|v| v.to_lowercase()).collect(),
        }
    }

    fn tag(&self, lower: &str) -> Pos {
        let has = |list: &[&str]| list.contains(&lower);
        if lower.chars().all(|c| !c.is_alphanumeric()) {
            Pos::Punct
        } else if lower.chars().all(|c| c.is_ascii_digit()) {
            Pos::Num
        } else if has(DETERMINERS) {
            Pos::Det
        } else if has(PREPOSITIONS) {
            Pos::Prep
        } else if has(CONJUNCTIONS) {
            Pos::Conj
        } else if has(ADVERBS) {
            Pos::Adv
        } else if has(PRONOUNS) {
            Pos::Pron
        } else if self.verbs.contains(lower) {
            Pos::Verb
        } else if has(ADJECTIVES) {
            Pos::Adj
        } else {
            Pos::Noun
        }
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '-' || ch == '\'' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl LinguisticParser for LexiconParser {
    fn parse(&self, text: &str) -> Parse {
        let tokens: Vec<Token> = tokenize(text)
            .into_iter()
            .map(|t| {
                let pos = self.tag(&t.to_lowercase());
                Token { text: t, pos }
            })
            .collect();
        let tokens = retag_nouns_after_det(tokens);
        let noun_chunks = chunk(&tokens);
        Parse {
            tokens,
            noun_chunks,
        }
    }
}

// A verb right after a determiner is a noun ("the paint").
fn retag_nouns_after_det(mut tokens: Vec<Token>) -> Vec<Token> {
    for i in 1..tokens.len() {
        if tokens[i].pos == Pos::Verb && tokens[i - 1].pos == Pos::Det {
            tokens[i].pos = Pos::Noun;
        }
    }
    tokens
}

fn chunk(tokens: &[Token]) -> Vec<Range<usize>> {
    let inside = |p: Pos| matches!(p, Pos::Det | Pos::Adj | Pos::Num | Pos::Noun);
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if !inside(tokens[i].pos) {
            i += 1;
            continue;
        }
        let start = i;
        while i < tokens.len() && inside(tokens[i].pos) {
            i += 1;
        }
        let mut end = i;
        while end > start && tokens[end - 1].pos != Pos::Noun {
            end -= 1;
        }
        if end > start {
            chunks.push(start..end);
        }
    }
    chunks
}

/// The salient noun phrase of an instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub text: String,
    pub source_prompt: String,
}

/// Configurable stop and exclusion lists around a parser.
pub struct EntityExtractor {
    parser: Box<dyn LinguisticParser>,
    command_verbs: BTreeSet<String>,
    abstract_nouns: BTreeSet<String>,
}

impl Default for EntityExtractor {
    fn default() -> Self {
        Self::new(Box::new(LexiconParser::default()))
    }
}

impl std::fmt::Debug for EntityExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EntityExtractor")
            .field("command_verbs", &self.command_verbs.len())
            .field("abstract_nouns", &self.abstract_nouns.len())
            .finish()
    }
}

impl EntityExtractor {
    pub fn new(parser: Box<dyn LinguisticParser>) -> Self {
        Self {
            parser,
            command_verbs: COMMAND_VERBS.iter().map(|s| s.to_string()).collect(),
            abstract_nouns: ABSTRACT_NOUNS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_abstract_nouns(mut self, nouns: impl IntoIterator<Item = String>) -> Self {
        self.abstract_nouns = nouns.into_iter().map(|n| n.to_lowercase()).collect();
        self
    }

    pub fn with_command_verbs(mut self, verbs: impl IntoIterator<Item = String>) -> Self {
        self.command_verbs = verbs.into_iter().map(|v| v.to_lowercase()).collect();
        self
    }

    fn phrase(&self, parse: &Parse, span: &Range<usize>) -> Option<String> {
        let words: Vec<&str> = parse.tokens[span.clone()]
            .iter()
            .filter(|t| t.pos != Pos::Det)
            .filter(|t| !self.command_verbs.contains(&t.text.to_lowercase()))
            .map(|t| t.text.as_str())
            .collect();
        let head = words.last()?.to_lowercase();
        if self.abstract_nouns.contains(&head) {
            return None;
        }
        Some(words.join(" ").to_lowercase())
    }

    /// Returns the head noun phrase of the instruction's direct object, or
    /// the longest usable noun phrase when there is none.
    pub fn extract(&self, prompt: &str) -> Result<Entity> {
        let no_entity = || Error::NoEntityFound {
            prompt: prompt.to_string(),
        };
        if prompt.trim().is_empty() {
            return Err(no_entity());
        }
        let parse = self.parser.parse(prompt);
        let verb_at = parse
            .tokens
            .iter()
            .position(|t| !matches!(t.pos, Pos::Adv | Pos::Punct))
            .filter(|&i| parse.tokens[i].pos == Pos::Verb);
        let entity = |text| Entity {
            text,
            source_prompt: prompt.to_string(),
        };
        if let Some(v) = verb_at {
            if let Some(span) = parse.noun_chunks.iter().find(|c| c.start > v) {
                let between_ok = parse.tokens[v + 1..span.start]
                    .iter()
                    .all(|t| matches!(t.pos, Pos::Adv | Pos::Pron | Pos::Punct));
                if between_ok {
                    if let Some(text) = self.phrase(&parse, span) {
                        return Ok(entity(text));
                    }
                }
            }
        }
        // Longest non-abstract phrase, earliest on ties.
        let mut best: Option<(usize, String)> = None;
        for span in &parse.noun_chunks {
            if let Some(text) = self.phrase(&parse, span) {
                let n = text.split_whitespace().count();
                if best.as_ref().is_none_or(|(m, _)| n > *m) {
                    best = Some((n, text));
                }
            }
        }
        best.map(|(_, t)| entity(t)).ok_or_else(no_entity)
    }
}

/// Extracts with the default lexicon and lists.
pub fn extract_entity(prompt: &str) -> Result<Entity> {
    EntityExtractor::default().extract(prompt)
}
