//! Question understanding: rewrite the current question into a
//! self-contained form using the conversation history.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::datamodel::Conversation;
use crate::error::{Error, Result, Stage};
use crate::gateway::{DecodingParams, Gateway};

pub const QU_SYSTEM_PROMPT: &str = "[task:qu]\n\
You rewrite the latest question of a conversation into a complete, self-contained question. \
Resolve pronouns and missing entities from the conversation history. \
Output only the rewritten question.";

pub const FEW_SHOT_COUNT: usize = 5;

/// One rewriting demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub history: String,
    pub question: String,
    pub rewrite: String,
}

pub fn read_few_shots(reader: impl BufRead) -> Result<Vec<FewShot>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("few-shot line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TurnRef {
    pub conv_id: String,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reformulation {
    pub turn_ref: TurnRef,
    pub sample_index: usize,
    pub text: String,
    pub decoding: DecodingParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuPrompt {
    pub system_prompt: String,
    pub few_shots: Vec<FewShot>,
    pub history_rendering: String,
    pub current_question: String,
}

impl QuPrompt {
    /// Prompt for an untrained model, carrying exactly five demonstrations.
    pub fn few_shot(few_shots: Vec<FewShot>, history: String, question: &str) -> Result<Self> {
        if few_shots.len() != FEW_SHOT_COUNT {
            return Err(Error::invalid(format!(
                "few-shot mode needs {FEW_SHOT_COUNT} demonstrations, got {}",
                few_shots.len()
            )));
        }
        Ok(Self {
            system_prompt: QU_SYSTEM_PROMPT.to_string(),
            few_shots,
            history_rendering: history,
            current_question: question.trim().to_string(),
        })
    }

    /// Prompt for a fine-tuned rewriting model; no demonstrations.
    pub fn adapter(history: String, question: &str) -> Self {
        Self {
            system_prompt: QU_SYSTEM_PROMPT.to_string(),
            few_shots: Vec::new(),
            history_rendering: history,
            current_question: question.trim().to_string(),
        }
    }

    /// Builds a prompt in whichever mode the demonstration list implies.
    pub fn for_turn(few_shots: &[FewShot], conversation: &Conversation, turn: usize) -> Result<Self> {
        let history = render_history(conversation, turn)?;
        let question = &conversation.turns[turn].question;
        if few_shots.is_empty() {
            Ok(Self::adapter(history, question))
        } else {
            Self::few_shot(few_shots.to_vec(), history, question)
        }
    }

    pub fn user_prompt(&self) -> String {
        let mut out = String::new();
        for (i, shot) in self.few_shots.iter().enumerate() {
            out.push_str(&format!(
                "Example {}\nConversation:\n{}\nQuestion: {}\nRewrite: {}\n\n",
                i + 1,
                or_none(&shot.history),
                shot.question,
                shot.rewrite
            ));
        }
        out.push_str(&format!(
            "Conversation:\n{}\nQuestion: {}",
            or_none(&self.history_rendering),
            self.current_question
        ));
        out
    }

    /// System and user prompt joined, as stored in training records.
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system_prompt, self.user_prompt())
    }
}

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        "(none)"
    } else {
        s
    }
}

/// One `Q: … A: …` line per turn before `upto_turn`. Prior turns without an
/// observed answer fall back to their first gold answer.
pub fn render_history(conversation: &Conversation, upto_turn: usize) -> Result<String> {
    if upto_turn >= conversation.turns.len() {
        return Err(Error::TurnOutOfRange {
            turn: upto_turn,
            len: conversation.turns.len(),
        });
    }
    let lines: Vec<String> = conversation.turns[..upto_turn]
        .iter()
        .map(|t| {
            let answer = t
                .observed_answer
                .as_deref()
                .or_else(|| t.gold_answers.first().map(|g| g.canonical.as_str()))
                .unwrap_or("");
            format!("Q: {} A: {}", t.question.trim(), answer.trim())
        })
        .collect();
    Ok(lines.join("\n"))
}

const LABELS: [&str; 5] = [
    "rewritten question:",
    "reformulated question:",
    "reformulation:",
    "rewrite:",
    "question:",
];

fn strip_label(s: &str) -> &str {
    let lower = s.to_lowercase();
    for label in LABELS {
        if lower.starts_with(label) && s.is_char_boundary(label.len()) {
            return s[label.len()..].trim();
        }
    }
    s
}

fn strip_quotes(s: &str) -> &str {
    const PAIRS: [(char, char); 4] = [('"', '"'), ('\'', '\''), ('“', '”'), ('`', '`')];
    for (open, close) in PAIRS {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return inner.trim();
        }
    }
    s
}

/// Trims model output to the bare rewrite: first non-empty line, echoed
/// labels removed, surrounding quotes removed.
pub fn clean_reformulation(raw: &str) -> Option<String> {
    let mut lines = raw.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut line = lines.next()?;
    // label on its own line, rewrite on the next
    if LABELS.iter().any(|l| line.eq_ignore_ascii_case(l)) {
        line = lines.next()?;
    }
    let mut s = strip_label(line);
    let lower = s.to_lowercase();
    if lower.ends_with("rewrite:") {
        s = s[..s.len() - "rewrite:".len()].trim_end();
    }
    let s = strip_quotes(s);
    (!s.is_empty()).then(|| s.to_string())
}

/// Samples up to `x` distinct rewrites. Identical texts are kept once, under
/// the sample index of their first occurrence.
pub async fn sample_reformulations(
    gateway: &Gateway,
    prompt: &QuPrompt,
    turn_ref: &TurnRef,
    x: usize,
    params: &DecodingParams,
) -> Result<Vec<Reformulation>> {
    if params.num_return as usize != x {
        return Err(Error::invalid(format!(
            "sampling {x} reformulations needs num_return = {x}, got {}",
            params.num_return
        )));
    }
    let gens = gateway
        .complete(&prompt.system_prompt, &prompt.user_prompt(), params)
        .await
        .map_err(|source| Error::Stage {
            stage: Stage::Qu,
            source,
        })?;
    let mut out: Vec<Reformulation> = Vec::new();
    for (j, g) in gens.iter().enumerate() {
        let Some(text) = clean_reformulation(&g.text) else {
            continue;
        };
        if out.iter().any(|r| r.text == text) {
            continue;
        }
        out.push(Reformulation {
            turn_ref: turn_ref.clone(),
            sample_index: j,
            text,
            decoding: params.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(out)
}

/// One deterministic rewrite. If the model output cleans to nothing, the
/// original question is used so the turn can still be answered.
pub async fn reformulate_greedy(
    gateway: &Gateway,
    prompt: &QuPrompt,
    turn_ref: &TurnRef,
    params: &DecodingParams,
) -> Result<Reformulation> {
    let gens = gateway
        .complete(&prompt.system_prompt, &prompt.user_prompt(), params)
        .await
        .map_err(|source| Error::Stage {
            stage: Stage::Qu,
            source,
        })?;
    let text = gens
        .first()
        .and_then(|g| clean_reformulation(&g.text))
        .unwrap_or_else(|| {
            log::warn!(
                "{}#{}: empty rewrite, using the original question",
                turn_ref.conv_id,
                turn_ref.turn
            );
            prompt.current_question.clone()
        });
    Ok(Reformulation {
        turn_ref: turn_ref.clone(),
        sample_index: 0,
        text,
        decoding: params.clone(),
    })
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Mean whitespace-token length of (original question, rewrite) pairs.
pub fn reformulation_length_stats<A, B>(pairs: &[(A, B)]) -> Result<(f64, f64)>
where
    A: AsRef<str>,
    B: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(Error::invalid("no reformulations to measure"));
    }
    let n = pairs.len() as f64;
    let orig = pairs.iter().map(|(o, _)| word_count(o.as_ref())).sum::<usize>() as f64;
    let rew = pairs.iter().map(|(_, r)| word_count(r.as_ref())).sum::<usize>() as f64;
    Ok((orig / n, rew / n))
}
