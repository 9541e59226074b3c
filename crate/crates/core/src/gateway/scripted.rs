//! Fixture-replay backend.
//!
//! Entries are keyed by the task tag found in the system prompt and a stable
//! hash of the user prompt. Prompts with no entry get a fallback echo: the
//! final non-empty line of the user prompt with a leading `Question:` label
//! removed. For the question-rewriting task that echo is the original
//! question, so unscripted turns still flow through the pipeline.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatModel, DecodingMode, DecodingParams, Generation, GatewayError, SamplingStrategy};
use crate::error::{Error, Result};

/// One line of a fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub task: String,
    pub prompt_hash: String,
    pub outputs: Vec<String>,
}

/// First 16 hex digits of the SHA-256 of the prompt.
pub fn prompt_hash(user_prompt: &str) -> String {
    let digest = Sha256::digest(user_prompt.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Extracts `qu` from a system prompt whose first line is `[task:qu]`.
/// Prompts without a tag map to the empty task.
pub fn task_tag(system_prompt: &str) -> &str {
    system_prompt
        .lines()
        .next()
        .and_then(|l| l.trim().strip_prefix("[task:"))
        .and_then(|l| l.strip_suffix(']'))
        .unwrap_or("")
}

fn fallback_echo(user_prompt: &str) -> Generation {
    let last = user_prompt
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let text = last.strip_prefix("Question:").unwrap_or(last).trim();
    Generation::stop(text)
}

fn select(outputs: &[String], params: &DecodingParams) -> Vec<Generation> {
    let take = match params.mode {
        DecodingMode::Greedy => 1,
        DecodingMode::BeamSample => params.num_return as usize,
    };
    outputs.iter().take(take).map(Generation::stop).collect()
}

#[derive(Debug, Default, Clone)]
pub struct ScriptedChatModel {
    table: HashMap<(String, String), Vec<String>>,
}

impl ScriptedChatModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut model = Self::new();
        for e in entries {
            model.table.insert((e.task, e.prompt_hash), e.outputs);
        }
        model
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("fixture line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn insert(&mut self, task: &str, user_prompt: &str, outputs: Vec<String>) {
        self.table
            .insert((task.to_string(), prompt_hash(user_prompt)), outputs);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Entries sorted by (task, hash).
    pub fn entries(&self) -> Vec<FixtureEntry> {
        let sorted: BTreeMap<_, _> = self.table.iter().collect();
        sorted
            .into_iter()
            .map(|((task, hash), outputs)| FixtureEntry {
                task: task.clone(),
                prompt_hash: hash.clone(),
                outputs: outputs.clone(),
            })
            .collect()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in self.entries() {
            serde_json::to_writer(&mut w, &e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn lookup(&self, system_prompt: &str, user_prompt: &str) -> Option<&[String]> {
        self.table
            .get(&(task_tag(system_prompt).to_string(), prompt_hash(user_prompt)))
            .filter(|o| !o.is_empty())
            .map(Vec::as_slice)
    }

    pub fn respond(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        params: &DecodingParams,
    ) -> Vec<Generation> {
        match self.lookup(system_prompt, user_prompt) {
            Some(outputs) => select(outputs, params),
            None => vec![fallback_echo(user_prompt)],
        }
    }
}

#[async_trait]
impl ChatModel for ScriptedChatModel {
    async fn generate(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        params: &DecodingParams,
    ) -> Result<Vec<Generation>, GatewayError> {
        Ok(self.respond(system_prompt, user_prompt, params))
    }

    fn sampling_strategy(&self) -> SamplingStrategy {
        SamplingStrategy::Scripted
    }
}

type Responder = dyn Fn(&str, &str) -> Option<Vec<String>> + Send + Sync;

/// Answers prompts with a closure `(task, user_prompt) -> outputs` and keeps
/// every answered prompt, so a session can be frozen into a fixture table.
pub struct RecordingChatModel {
    responder: Box<Responder>,
    recorded: Mutex<ScriptedChatModel>,
}

impl RecordingChatModel {
    pub fn new<F>(responder: F) -> Self
    where
        F: Fn(&str, &str) -> Option<Vec<String>> + Send + Sync + 'static,
    {
        Self {
            responder: Box::new(responder),
            recorded: Mutex::new(ScriptedChatModel::new()),
        }
    }

    pub fn recorded(&self) -> ScriptedChatModel {
        self.recorded.lock().expect("recording lock").clone()
    }
}

#[async_trait]
impl ChatModel for RecordingChatModel {
    async fn generate(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        params: &DecodingParams,
    ) -> Result<Vec<Generation>, GatewayError> {
        let task = task_tag(system_prompt);
        let mut table = self.recorded.lock().expect("recording lock");
        if table.lookup(system_prompt, user_prompt).is_none() {
            if let Some(outputs) = (self.responder)(task, user_prompt) {
                table.insert(task, user_prompt, outputs);
            }
        }
        Ok(table.respond(system_prompt, user_prompt, params))
    }

    fn sampling_strategy(&self) -> SamplingStrategy {
        SamplingStrategy::Scripted
    }
}
