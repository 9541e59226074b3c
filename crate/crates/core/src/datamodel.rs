//! Domain types shared by every stage, plus answer normalization and the
//! matching predicates used for answer correctness and answer presence.

use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A multi-turn conversation from a benchmark file or a live session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    #[serde(default)]
    pub domain: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// Position in the conversation. Filled from line order when absent.
    #[serde(default)]
    pub index: usize,
    pub question: String,
    #[serde(default)]
    pub gold_answers: Vec<GoldAnswer>,
    #[serde(default)]
    pub question_entities: Vec<String>,
    /// Answer shown to the user for this turn, used as history context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub canonical: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

impl GoldAnswer {
    /// Gold answer whose only alias is the canonical form.
    pub fn new(canonical: impl Into<String>) -> Self {
        let canonical = canonical.into();
        Self {
            aliases: vec![canonical.clone()],
            canonical,
        }
    }

    pub fn with_aliases<I, S>(canonical: impl Into<String>, aliases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut gold = Self::new(canonical);
        for alias in aliases {
            let alias = alias.into();
            if !gold.aliases.contains(&alias) {
                gold.aliases.push(alias);
            }
        }
        gold
    }

    /// The canonical form is always an alias, even if the file omitted it.
    fn fill_canonical(&mut self) {
        if !self.aliases.contains(&self.canonical) {
            self.aliases.insert(0, self.canonical.clone());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    KgFact,
    Text,
    TableRow,
}

impl fmt::Display for EvidenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvidenceKind::KgFact => "kg_fact",
            EvidenceKind::Text => "text",
            EvidenceKind::TableRow => "table_row",
        })
    }
}

/// One retrievable unit: a KG fact, a text snippet, or a table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub evidence_id: String,
    pub kind: EvidenceKind,
    pub text: String,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub entities: Vec<String>,
}

impl Evidence {
    pub fn new(id: impl Into<String>, kind: EvidenceKind, text: impl Into<String>) -> Self {
        Self {
            evidence_id: id.into(),
            kind,
            text: text.into(),
            source: String::new(),
            entities: Vec::new(),
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn with_entities<I, S>(mut self, entities: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.entities = entities.into_iter().map(Into::into).collect();
        self
    }
}

/// Answers in rank order. Construction drops entries that normalize to a
/// duplicate (or to nothing), so the list never holds two equal answers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedAnswerList {
    answers: Vec<String>,
}

impl RankedAnswerList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `answer` unless its normalized form is empty or already present.
    /// Returns whether it was added.
    pub fn push(&mut self, answer: impl Into<String>) -> bool {
        let answer = answer.into();
        let norm = normalize_answer(&answer);
        if norm.is_empty() || self.answers.iter().any(|a| normalize_answer(a) == norm) {
            return false;
        }
        self.answers.push(answer);
        true
    }

    pub fn as_slice(&self) -> &[String] {
        &self.answers
    }

    pub fn top(&self) -> Option<&str> {
        self.answers.first().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn into_vec(self) -> Vec<String> {
        self.answers
    }
}

impl<S: Into<String>> FromIterator<S> for RankedAnswerList {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut list = Self::new();
        for a in iter {
            list.push(a);
        }
        list
    }
}

const ARTICLES: [&str; 3] = ["the ", "a ", "an "];

/// Case-folds, collapses whitespace, trims surrounding punctuation and drops
/// a leading article.
///
/// Trimming and article removal repeat until neither applies, which keeps
/// the function idempotent on inputs like `"The, the X"`.
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut s: String = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let trimmed = s.trim_matches(|c: char| !c.is_alphanumeric());
        let stripped = ARTICLES
            .iter()
            .find_map(|art| trimmed.strip_prefix(art))
            .filter(|rest| !rest.is_empty());
        match stripped {
            Some(rest) => s = rest.to_string(),
            None => {
                if trimmed.len() == s.len() {
                    return s;
                }
                s = trimmed.to_string();
            }
        }
    }
}

/// True iff `candidate` equals some alias of some gold answer after
/// normalization on both sides.
pub fn answers_match(candidate: &str, gold: &[GoldAnswer]) -> bool {
    let cand = normalize_answer(candidate);
    if cand.is_empty() {
        return false;
    }
    gold.iter()
        .flat_map(|g| g.aliases.iter().chain(std::iter::once(&g.canonical)))
        .any(|alias| normalize_answer(alias) == cand)
}

/// The full answer followed by its comma-separated parts. Multi-entity
/// answers such as "Left winger, forward" are credited if any part matches.
pub fn answer_candidates(answer: &str) -> Vec<&str> {
    let mut out = vec![answer];
    if answer.contains(',') {
        out.extend(answer.split(',').map(str::trim).filter(|p| !p.is_empty()));
    }
    out
}

/// Answer correctness with the comma-split rule applied.
pub fn answer_is_correct(answer: &str, gold: &[GoldAnswer]) -> bool {
    answer_candidates(answer)
        .into_iter()
        .any(|c| answers_match(c, gold))
}

/// True iff the normalized phrase occurs in the normalized text with word
/// boundaries on both sides.
pub fn text_contains(text: &str, phrase: &str) -> bool {
    let needle = normalize_answer(phrase);
    if needle.is_empty() {
        return false;
    }
    let hay = normalize_answer(text);
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = hay[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        // advance by one char past `start`
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

pub fn evidence_contains(evidence: &Evidence, phrase: &str) -> bool {
    text_contains(&evidence.text, phrase)
}

/// Whether the evidence mentions any of the question entities.
pub fn mentions_any(evidence: &Evidence, entities: &[String]) -> bool {
    entities.iter().any(|e| evidence_contains(evidence, e))
}

/// Whether the evidence contains any alias of any gold answer.
pub fn contains_gold(evidence: &Evidence, gold: &[GoldAnswer]) -> bool {
    gold.iter()
        .flat_map(|g| g.aliases.iter())
        .any(|alias| evidence_contains(evidence, alias))
}

impl Conversation {
    /// Checks the structural invariants and fills derived fields (turn
    /// indices, canonical aliases).
    pub fn validated(mut self) -> Result<Self> {
        if self.conv_id.trim().is_empty() {
            return Err(Error::invalid("conversation has an empty conv_id"));
        }
        if self.turns.is_empty() {
            return Err(Error::invalid(format!(
                "conversation {} has no turns",
                self.conv_id
            )));
        }
        for (i, turn) in self.turns.iter_mut().enumerate() {
            turn.index = i;
            if turn.question.trim().is_empty() {
                return Err(Error::invalid(format!(
                    "conversation {} turn {i} has an empty question",
                    self.conv_id
                )));
            }
            for gold in &mut turn.gold_answers {
                gold.fill_canonical();
                if gold.aliases.iter().any(|a| normalize_answer(a).is_empty()) {
                    return Err(Error::invalid(format!(
                        "conversation {} turn {i} has an empty gold alias",
                        self.conv_id
                    )));
                }
            }
        }
        Ok(self)
    }
}

/// A benchmark file parsed line by line. Malformed lines are reported, not
/// fatal.
#[derive(Debug, Default)]
pub struct Benchmark {
    pub conversations: Vec<Conversation>,
    /// (1-based line number, reason)
    pub skipped: Vec<(usize, String)>,
}

pub fn read_benchmark(reader: impl BufRead) -> Result<Benchmark> {
    let mut bench = Benchmark::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Conversation>(&line)
            .map_err(Error::from)
            .and_then(Conversation::validated);
        match parsed {
            Ok(conv) => bench.conversations.push(conv),
            Err(e) => {
                log::warn!("benchmark line {}: skipped ({e})", i + 1);
                bench.skipped.push((i + 1, e.to_string()));
            }
        }
    }
    Ok(bench)
}
