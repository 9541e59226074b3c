//! Answer generation from a rewritten question and the filtered evidence.

use serde::{Deserialize, Serialize};

use crate::datamodel::{evidence_contains, Evidence, RankedAnswerList};
use crate::erf::EvidenceSelection;
use crate::error::{Error, Result, Stage};
use crate::gateway::{DecodingParams, Gateway};

pub const AG_SYSTEM_PROMPT: &str = "[task:ag]\n\
Answer the question using the given evidence. \
Reply with the answer entity or value only, as concisely as possible.";

pub const AG_NO_EVIDENCE_SYSTEM_PROMPT: &str = "[task:ag]\n\
No evidence could be retrieved for this question. \
Answer from your own knowledge. \
Reply with the answer entity or value only, as concisely as possible.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgPrompt {
    pub system_prompt: String,
    /// Numbered evidence texts, no display ids.
    pub evidence_block: String,
    pub question: String,
}

impl AgPrompt {
    pub fn new<'a>(question: &str, evidence: impl IntoIterator<Item = &'a Evidence>) -> Self {
        let evidence_block = evidence
            .into_iter()
            .enumerate()
            .map(|(i, e)| format!("{}. {}", i + 1, e.text.replace('\n', " ")))
            .collect::<Vec<_>>()
            .join("\n");
        let system_prompt = if evidence_block.is_empty() {
            AG_NO_EVIDENCE_SYSTEM_PROMPT
        } else {
            AG_SYSTEM_PROMPT
        };
        Self {
            system_prompt: system_prompt.to_string(),
            evidence_block,
            question: question.trim().to_string(),
        }
    }

    pub fn has_evidence(&self) -> bool {
        !self.evidence_block.is_empty()
    }

    pub fn user_prompt(&self) -> String {
        if self.has_evidence() {
            format!("Evidence:\n{}\n\nQuestion: {}", self.evidence_block, self.question)
        } else {
            format!("Question: {}", self.question)
        }
    }

    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system_prompt, self.user_prompt())
    }
}

/// Greedy decoding for rank 1, optional sampling for the tail.
#[derive(Debug, Clone)]
pub struct AnswerDecoding {
    pub greedy: DecodingParams,
    pub sampled: Option<DecodingParams>,
}

impl AnswerDecoding {
    /// One greedy answer plus `beam_size - 1` samples.
    pub fn with_beam(beam_size: u32) -> Result<Self> {
        let sampled = if beam_size > 1 {
            Some(DecodingParams::beam_sample(beam_size - 1, beam_size)?)
        } else {
            None
        };
        Ok(Self {
            greedy: DecodingParams::greedy(),
            sampled,
        })
    }

    pub fn greedy_only() -> Self {
        Self {
            greedy: DecodingParams::greedy(),
            sampled: None,
        }
    }
}

pub fn clean_answer(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line
        .strip_prefix("Answer:")
        .or_else(|| line.strip_prefix("answer:"))
        .unwrap_or(line)
        .trim();
    line.trim_end_matches('.').trim().to_string()
}

/// Rank 1 is the greedy output; later ranks are sampled outputs in sampling
/// order, dropping any that normalize to an earlier answer.
pub async fn generate_answers(
    gateway: &Gateway,
    prompt: &AgPrompt,
    decoding: &AnswerDecoding,
) -> Result<RankedAnswerList> {
    let user = prompt.user_prompt();
    let stage = |source| Error::Stage {
        stage: Stage::Ag,
        source,
    };
    let mut list = RankedAnswerList::new();
    let greedy = gateway
        .complete(&prompt.system_prompt, &user, &decoding.greedy)
        .await
        .map_err(stage)?;
    if let Some(g) = greedy.first() {
        list.push(clean_answer(&g.text));
    }
    if let Some(params) = &decoding.sampled {
        let samples = gateway
            .complete(&prompt.system_prompt, &user, params)
            .await
            .map_err(stage)?;
        for s in samples {
            list.push(clean_answer(&s.text));
        }
    }
    Ok(list)
}

/// True iff the answer string occurs in some evidence the generator saw. A
/// comma-separated list answer also counts when each of its parts occurs.
pub fn is_faithful(answer: &str, selection: &EvidenceSelection) -> bool {
    let seen = |phrase: &str| selection.selected.iter().any(|e| evidence_contains(e, phrase));
    if seen(answer) {
        return true;
    }
    let parts: Vec<&str> = answer.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    parts.len() > 1 && parts.iter().all(|p| seen(p))
}
