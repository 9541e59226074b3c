//! Pipeline wiring: configuration, single turns, batch runs, sampling for
//! mining, and evaluation of run files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::future::join_all;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ag::{generate_answers, is_faithful, AgPrompt, AnswerDecoding};
use crate::datamodel::{read_benchmark, Benchmark, Conversation, Evidence, GoldAnswer, RankedAnswerList};
use crate::erf::{sample_selections, select_evidence, ErfTrace, EvidenceSelection, FilterSettings};
use crate::error::{Error, Result, Stage};
use crate::gateway::{DecodingParams, Gateway, HttpChatModel, HttpConfig, RetryPolicy, ScriptedChatModel};
use crate::metrics::{aggregate, answer_presence_at, score_turn, EvalReport, TurnOutcome, TurnScore};
use crate::mining::{
    eval_constraint1, eval_constraint2, RetrievedRow, SampleLog, SampledSelectionLog, SamplingRecord,
    SelectionLog,
};
use crate::qu::{read_few_shots, reformulate_greedy, sample_reformulations, FewShot, QuPrompt, TurnRef};
use crate::retrieval::{read_corpus, Bm25Params, CorpusIndex, ScoredEvidence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Scripted,
    Http,
}

/// Which answers fill the history of earlier turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    Gold,
    Predicted,
}

impl std::str::FromStr for HistoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(Self::Gold),
            "predicted" => Ok(Self::Predicted),
            other => Err(Error::invalid(format!("history mode must be gold or predicted, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: Backend,
    /// Full chat-completions URL, for the http backend.
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub beam_search: bool,
    pub timeout_secs: u64,
    pub retries: u32,
    pub max_new_tokens: u32,

    pub n: usize,
    pub k: usize,
    pub s: usize,
    pub x: usize,
    pub beam_size: u32,
    /// Sampled evidence selections per rewrite when mining, on top of the
    /// greedy one.
    pub erf_samples: u32,
    pub dpo_cap: usize,
    pub seed: u64,
    pub bm25: Bm25Params,
    pub history: HistoryMode,

    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub few_shots: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,

    pub in_flight: usize,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Scripted,
            endpoint: None,
            model: "default".into(),
            api_key_env: None,
            temperature: 1.0,
            top_p: 1.0,
            beam_search: false,
            timeout_secs: 120,
            retries: 3,
            max_new_tokens: crate::gateway::DEFAULT_MAX_NEW_TOKENS,
            n: 500,
            k: 50,
            s: 50,
            x: 5,
            beam_size: 10,
            erf_samples: 4,
            dpo_cap: crate::mining::DEFAULT_PAIR_CAP,
            seed: 0,
            bm25: Bm25Params::default(),
            history: HistoryMode::Gold,
            corpus: None,
            index: None,
            few_shots: None,
            fixtures: None,
            in_flight: crate::gateway::DEFAULT_IN_FLIGHT,
            workers: 4,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.k == 0 || self.k > self.n {
            return fail(format!("need 1 <= k <= n, got k={} n={}", self.k, self.n));
        }
        if self.n > crate::erf::DISPLAY_ID_RANGE as usize {
            return fail(format!(
                "n={} exceeds the {} available display ids",
                self.n,
                crate::erf::DISPLAY_ID_RANGE
            ));
        }
        if self.s == 0 {
            return fail("s must be at least 1".into());
        }
        if self.x == 0 || self.x > self.beam_size as usize {
            return fail(format!("need 1 <= x <= beam_size, got x={} beam_size={}", self.x, self.beam_size));
        }
        if self.erf_samples > self.beam_size {
            return fail(format!("erf_samples {} exceeds beam_size {}", self.erf_samples, self.beam_size));
        }
        if self.in_flight == 0 || self.workers == 0 {
            return fail("in_flight and workers must be at least 1".into());
        }
        if self.max_new_tokens == 0 {
            return fail("max_new_tokens must be at least 1".into());
        }
        if self.backend == Backend::Http && self.endpoint.is_none() {
            return fail("the http backend needs an endpoint".into());
        }
        self.bm25.validate()
    }

    /// Hash over every setting that can change outputs. Paths, concurrency
    /// limits and credentials are left out.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.corpus = None;
        c.index = None;
        c.few_shots = None;
        c.fixtures = None;
        c.api_key_env = None;
        c.in_flight = 0;
        c.workers = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        short_hash(&json)
    }

    fn greedy(&self) -> DecodingParams {
        DecodingParams::greedy()
            .with_max_new_tokens(self.max_new_tokens)
            .with_seed(Some(self.seed))
    }

    fn sampled(&self, num_return: u32) -> Result<DecodingParams> {
        Ok(DecodingParams::beam_sample(num_return, self.beam_size)?
            .with_max_new_tokens(self.max_new_tokens)
            .with_seed(Some(self.seed)))
    }

    fn answer_decoding(&self) -> Result<AnswerDecoding> {
        let mut d = AnswerDecoding::with_beam(self.beam_size)?;
        d.greedy = self.greedy();
        if let Some(s) = d.sampled.as_mut() {
            *s = s.clone().with_max_new_tokens(self.max_new_tokens).with_seed(Some(self.seed));
        }
        Ok(d)
    }

    /// Answer-presence depths reported by evaluation.
    pub fn presence_depths(&self) -> Vec<usize> {
        let mut ks = vec![self.k, self.n];
        ks.dedup();
        ks
    }

    /// Gateway for the configured backend.
    pub fn gateway(&self) -> Result<Gateway> {
        match self.backend {
            Backend::Scripted => {
                let model = match &self.fixtures {
                    Some(p) => ScriptedChatModel::from_jsonl(BufReader::new(fs::File::open(p)?))?,
                    None => ScriptedChatModel::new(),
                };
                Ok(Gateway::new(Arc::new(model), self.in_flight))
            }
            Backend::Http => {
                let url = self.endpoint.clone().ok_or_else(|| Error::invalid("no endpoint"))?;
                let mut http = HttpConfig::new(url, self.model.clone());
                http.api_key = match &self.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        Error::invalid(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                http.temperature = self.temperature;
                http.top_p = self.top_p;
                http.beam_search = self.beam_search;
                http.timeout = Duration::from_secs(self.timeout_secs);
                http.retry = RetryPolicy {
                    attempts: self.retries.max(1),
                    ..RetryPolicy::default()
                };
                Ok(Gateway::new(Arc::new(HttpChatModel::new(http)?), self.in_flight))
            }
        }
    }

    /// Loads the saved index if configured, otherwise builds one from the
    /// corpus file.
    pub fn load_index(&self) -> Result<CorpusIndex> {
        if let Some(p) = &self.index {
            if p.exists() {
                return CorpusIndex::read_from(BufReader::new(fs::File::open(p)?));
            }
        }
        let corpus = self
            .corpus
            .as_ref()
            .ok_or_else(|| Error::invalid("neither an index nor a corpus file is configured"))?;
        CorpusIndex::build(read_corpus(BufReader::new(fs::File::open(corpus)?))?, self.bm25)
    }

    pub fn load_few_shots(&self) -> Result<Vec<FewShot>> {
        match &self.few_shots {
            Some(p) => read_few_shots(BufReader::new(fs::File::open(p)?)),
            None => Ok(Vec::new()),
        }
    }
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Display-id seed for one retrieval. Derived from content, not from
/// conversation ids, so that a live session and a benchmark run of the same
/// dialogue see identical prompts.
pub fn display_seed(seed: u64, history: &str, question: &str, sample: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(history.as_bytes());
    h.update([0]);
    h.update(question.as_bytes());
    h.update((sample as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub qu: u64,
    pub erf: u64,
    pub ag: u64,
}

/// Every intermediate artifact of one turn. Stages that did not run are
/// left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub conv_id: String,
    pub turn: usize,
    pub question: String,
    pub qu_prompt: String,
    pub reformulation: Option<String>,
    pub empty_query: bool,
    /// Corpus ids of the top-n, in rank order.
    pub retrieved_ids: Vec<String>,
    pub erf: Option<ErfTrace>,
    pub selected: Vec<Evidence>,
    pub no_evidence: bool,
    pub answers: Option<Vec<String>>,
    pub timings_ms: StageTimings,
}

#[derive(Debug, Clone)]
pub struct TurnResult {
    pub answers: RankedAnswerList,
    pub selection: EvidenceSelection,
    /// Selected evidence followed by the rest of the top-n; the ranking
    /// answer presence is measured on.
    pub evidence_ranking: Vec<Evidence>,
    pub trace: TurnTrace,
}

#[derive(Debug, thiserror::Error)]
#[error("{conv_id} turn {turn}: {error}")]
pub struct TurnError {
    pub conv_id: String,
    pub turn: usize,
    pub error: Error,
    pub trace: Box<TurnTrace>,
}

impl TurnError {
    pub fn stage(&self) -> Option<Stage> {
        match &self.error {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

fn ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// The configured pipeline with its index and model backend.
#[derive(Clone)]
pub struct Pipeline {
    config: Arc<PipelineConfig>,
    index: Arc<CorpusIndex>,
    gateway: Gateway,
    few_shots: Arc<Vec<FewShot>>,
    config_hash: String,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, index: CorpusIndex, gateway: Gateway, few_shots: Vec<FewShot>) -> Result<Self> {
        config.validate()?;
        if !few_shots.is_empty() && few_shots.len() != crate::qu::FEW_SHOT_COUNT {
            return Err(Error::invalid(format!(
                "expected {} few-shot demonstrations, got {}",
                crate::qu::FEW_SHOT_COUNT,
                few_shots.len()
            )));
        }
        let config_hash = config.config_hash();
        Ok(Self {
            config: Arc::new(config),
            index: Arc::new(index),
            gateway,
            few_shots: Arc::new(few_shots),
            config_hash,
        })
    }

    /// Everything from the config's paths and backend settings.
    pub fn from_config(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let index = config.load_index()?;
        let gateway = config.gateway()?;
        let few_shots = config.load_few_shots()?;
        Self::new(config, index, gateway, few_shots)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn index(&self) -> &CorpusIndex {
        &self.index
    }

    fn filter_settings(&self, seed: u64) -> FilterSettings {
        FilterSettings {
            k: self.config.k,
            s: self.config.s,
            seed,
        }
    }

    /// Greedy rewrite, top-n retrieval, filtering to k, answer list.
    pub async fn run_turn(&self, conversation: &Conversation, i: usize) -> Result<TurnResult, TurnError> {
        let mut trace = TurnTrace {
            conv_id: conversation.conv_id.clone(),
            turn: i,
            question: conversation.turns.get(i).map(|t| t.question.clone()).unwrap_or_default(),
            ..TurnTrace::default()
        };
        match self.run_turn_inner(conversation, i, &mut trace).await {
            Ok((answers, selection, evidence_ranking)) => Ok(TurnResult {
                answers,
                selection,
                evidence_ranking,
                trace,
            }),
            Err(error) => Err(TurnError {
                conv_id: conversation.conv_id.clone(),
                turn: i,
                error,
                trace: Box::new(trace),
            }),
        }
    }

    async fn run_turn_inner(
        &self,
        conversation: &Conversation,
        i: usize,
        trace: &mut TurnTrace,
    ) -> Result<(RankedAnswerList, EvidenceSelection, Vec<Evidence>)> {
        let cfg = &self.config;
        let prompt = QuPrompt::for_turn(&self.few_shots, conversation, i)?;
        trace.qu_prompt = prompt.full_text();
        let turn_ref = TurnRef {
            conv_id: conversation.conv_id.clone(),
            turn: i,
        };

        let t = Instant::now();
        let reformulation = reformulate_greedy(&self.gateway, &prompt, &turn_ref, &cfg.greedy()).await?;
        trace.timings_ms.qu = ms(t);
        trace.reformulation = Some(reformulation.text.clone());

        let t = Instant::now();
        let retrieval = self.index.retrieve(&reformulation.text, cfg.n);
        trace.empty_query = retrieval.empty_query;
        trace.retrieved_ids = retrieval.hits.iter().map(|h| h.evidence.evidence_id.clone()).collect();
        let seed = display_seed(cfg.seed, &prompt.history_rendering, &prompt.current_question, 0);
        let outcome = select_evidence(
            &self.gateway,
            &reformulation.text,
            &retrieval.hits,
            self.filter_settings(seed),
            &cfg.greedy(),
        )
        .await?;
        trace.timings_ms.erf = ms(t);
        trace.erf = Some(outcome.trace.clone());
        trace.selected = outcome.selection.selected.clone();
        let selection = outcome.selection;

        let t = Instant::now();
        let ag_prompt = AgPrompt::new(&reformulation.text, &selection.selected);
        trace.no_evidence = !ag_prompt.has_evidence();
        let answers = generate_answers(&self.gateway, &ag_prompt, &cfg.answer_decoding()?).await?;
        trace.timings_ms.ag = ms(t);
        trace.answers = Some(answers.as_slice().to_vec());

        let ranking = evidence_ranking(&selection, &retrieval.hits);
        Ok((answers, selection, ranking))
    }

    /// Runs every turn of one conversation in order. In predicted mode each
    /// turn's rank-1 answer becomes history for the next.
    pub async fn run_conversation(&self, conversation: &Conversation, history: HistoryMode) -> Vec<RunRecord> {
        let mut conv = conversation.clone();
        for t in &mut conv.turns {
            t.observed_answer = None;
        }
        let mut out = Vec::with_capacity(conv.turns.len());
        for i in 0..conv.turns.len() {
            let result = self.run_turn(&conv, i).await;
            let record = self.run_record(&conv, i, &result);
            if let Err(e) = &result {
                log::warn!("{e}");
            }
            if history == HistoryMode::Predicted {
                conv.turns[i].observed_answer = Some(record.answers.first().cloned().unwrap_or_default());
            }
            out.push(record);
        }
        out
    }

    fn run_record(&self, conv: &Conversation, i: usize, result: &Result<TurnResult, TurnError>) -> RunRecord {
        let turn = &conv.turns[i];
        let ks = self.config.presence_depths();
        let (trace, answers, selection, ranking, error) = match result {
            Ok(r) => (&r.trace, r.answers.as_slice().to_vec(), Some(&r.selection), &r.evidence_ranking[..], None),
            Err(e) => (&*e.trace, Vec::new(), None, &[][..], Some(e.error.to_string())),
        };
        let empty = EvidenceSelection::empty();
        let selection = selection.unwrap_or(&empty);
        let ranked: RankedAnswerList = answers.iter().collect();
        RunRecord {
            config_hash: self.config_hash.clone(),
            conv_id: conv.conv_id.clone(),
            turn: i,
            domain: conv.domain.clone(),
            question: turn.question.clone(),
            question_entities: turn.question_entities.clone(),
            gold_answers: turn.gold_answers.clone(),
            reformulation: trace.reformulation.clone(),
            empty_query: trace.empty_query,
            no_evidence: trace.no_evidence,
            retrieved_count: trace.retrieved_ids.len(),
            selected_ids: selection.selected_ids.clone(),
            selected_evidence_ids: selection.evidence_ids(),
            backfilled_count: selection.backfilled_count,
            hallucinated_ids: trace.erf.as_ref().map(|t| t.hallucinated_ids.clone()).unwrap_or_default(),
            unparseable_chunks: trace.erf.as_ref().map(|t| t.unparseable_chunks.clone()).unwrap_or_default(),
            score: score_turn(&answers, &turn.gold_answers),
            answer_presence: answer_presence_at(ranking, &turn.gold_answers, &ks),
            c1: eval_constraint1(selection, &turn.question_entities, &turn.gold_answers),
            c2: eval_constraint2(&ranked, &turn.gold_answers),
            faithful: answers.first().is_some_and(|a| is_faithful(a, selection)),
            answers,
            error,
        }
    }

    /// All conversations, up to `workers` at a time, output in input order.
    pub async fn run_benchmark(&self, benchmark: &Benchmark, history: HistoryMode) -> Result<BenchmarkRun> {
        let records: Vec<RunRecord> = stream::iter(&benchmark.conversations)
            .map(|c| self.run_conversation(c, history))
            .buffered(self.config.workers)
            .flat_map(stream::iter)
            .collect()
            .await;
        let report = report_from_records(&records)?;
        Ok(BenchmarkRun {
            records,
            report,
            skipped: benchmark.skipped.clone(),
        })
    }

    /// Sampling trace for one turn: x rewrites, each retrieved, filtered
    /// (greedy plus sampled selections) and answered.
    pub async fn sample_turn(&self, conversation: &Conversation, i: usize) -> Result<SamplingRecord> {
        let cfg = &self.config;
        let turn = conversation
            .turns
            .get(i)
            .ok_or(Error::TurnOutOfRange { turn: i, len: conversation.turns.len() })?;
        let prompt = QuPrompt::for_turn(&self.few_shots, conversation, i)?;
        let turn_ref = TurnRef {
            conv_id: conversation.conv_id.clone(),
            turn: i,
        };
        let mut record = SamplingRecord {
            config_hash: self.config_hash.clone(),
            conv_id: conversation.conv_id.clone(),
            turn: i,
            domain: conversation.domain.clone(),
            question: turn.question.clone(),
            question_entities: turn.question_entities.clone(),
            gold_answers: turn.gold_answers.clone(),
            qu_prompt: prompt.full_text(),
            k: cfg.k,
            s: cfg.s,
            samples: Vec::new(),
        };
        let params = cfg.sampled(cfg.x as u32)?;
        let reformulations = match sample_reformulations(&self.gateway, &prompt, &turn_ref, cfg.x, &params).await {
            Ok(r) => r,
            Err(Error::EmptySample) => {
                log::warn!("{}#{i}: no usable rewrites", conversation.conv_id);
                return Ok(record);
            }
            Err(e) => return Err(e),
        };
        let samples = join_all(reformulations.iter().map(|r| {
            let seed = display_seed(cfg.seed, &prompt.history_rendering, &prompt.current_question, r.sample_index);
            self.sample_one(r.sample_index, &r.text, seed)
        }))
        .await;
        for (r, s) in reformulations.iter().zip(samples) {
            let mut s = s?;
            s.decoding = r.decoding.clone();
            record.samples.push(s);
        }
        Ok(record)
    }

    async fn sample_one(&self, j: usize, text: &str, seed: u64) -> Result<SampleLog> {
        let cfg = &self.config;
        let retrieval = self.index.retrieve(text, cfg.n);
        let settings = self.filter_settings(seed);
        let outcome = select_evidence(&self.gateway, text, &retrieval.hits, settings, &cfg.greedy()).await?;
        let answers =
            generate_answers(&self.gateway, &AgPrompt::new(text, &outcome.selection.selected), &cfg.answer_decoding()?)
                .await?;
        let mut erf_samples = Vec::new();
        if cfg.erf_samples > 0 && !retrieval.hits.is_empty() {
            let sampled = sample_selections(
                &self.gateway,
                text,
                &retrieval.hits,
                &outcome.assignment,
                settings,
                &cfg.sampled(cfg.erf_samples)?,
            )
            .await?;
            let greedy_only = AnswerDecoding {
                greedy: cfg.greedy(),
                sampled: None,
            };
            for o in sampled {
                if o.selection.selected_ids == outcome.selection.selected_ids
                    || erf_samples
                        .iter()
                        .any(|e: &SampledSelectionLog| e.selected_ids == o.selection.selected_ids)
                {
                    continue;
                }
                let a = generate_answers(&self.gateway, &AgPrompt::new(text, &o.selection.selected), &greedy_only).await?;
                erf_samples.push(SampledSelectionLog {
                    selected_ids: o.selection.selected_ids.clone(),
                    answer: a.top().map(str::to_string),
                });
            }
        }
        let retrieved = retrieval
            .hits
            .iter()
            .map(|h| RetrievedRow {
                evidence_id: h.evidence.evidence_id.clone(),
                display_id: outcome.assignment.display_of(&h.evidence.evidence_id).expect("assigned"),
                kind: h.evidence.kind,
                text: h.evidence.text.clone(),
                score: h.score,
            })
            .collect();
        Ok(SampleLog {
            j,
            text: text.to_string(),
            decoding: DecodingParams::greedy(),
            empty_query: retrieval.empty_query,
            retrieved,
            selection: SelectionLog {
                selected_ids: outcome.selection.selected_ids.clone(),
                backfilled_count: outcome.selection.backfilled_count,
                chunk_selections: outcome.trace.chunk_selections.clone(),
                hallucinated_ids: outcome.trace.hallucinated_ids.clone(),
            },
            answers: answers.into_vec(),
            erf_samples,
        })
    }

    /// Sampling log for every turn. Turns that fail are logged and left out.
    pub async fn run_sampling(&self, benchmark: &Benchmark) -> SamplingRun {
        let per_conv: Vec<Vec<std::result::Result<SamplingRecord, String>>> = stream::iter(&benchmark.conversations)
            .map(|c| async move {
                let mut out = Vec::new();
                for i in 0..c.turns.len() {
                    out.push(
                        self.sample_turn(c, i)
                            .await
                            .map_err(|e| format!("{} turn {i}: {e}", c.conv_id)),
                    );
                }
                out
            })
            .buffered(self.config.workers)
            .collect()
            .await;
        let mut run = SamplingRun {
            records: Vec::new(),
            failures: Vec::new(),
            skipped: benchmark.skipped.clone(),
        };
        for r in per_conv.into_iter().flatten() {
            match r {
                Ok(rec) => run.records.push(rec),
                Err(e) => {
                    log::warn!("{e}");
                    run.failures.push(e);
                }
            }
        }
        run
    }
}

fn evidence_ranking(selection: &EvidenceSelection, hits: &[ScoredEvidence]) -> Vec<Evidence> {
    let chosen: std::collections::HashSet<&str> =
        selection.selected.iter().map(|e| e.evidence_id.as_str()).collect();
    selection
        .selected
        .iter()
        .cloned()
        .chain(
            hits.iter()
                .filter(|h| !chosen.contains(h.evidence.evidence_id.as_str()))
                .map(|h| h.evidence.clone()),
        )
        .collect()
}

/// One line of a run file. Timings are deliberately absent so that reruns
/// with the same configuration are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub conv_id: String,
    pub turn: usize,
    pub domain: String,
    pub question: String,
    pub question_entities: Vec<String>,
    pub gold_answers: Vec<GoldAnswer>,
    pub reformulation: Option<String>,
    pub empty_query: bool,
    pub no_evidence: bool,
    pub retrieved_count: usize,
    /// Display ids, aligned with `selected_evidence_ids`.
    pub selected_ids: Vec<String>,
    pub selected_evidence_ids: Vec<String>,
    pub backfilled_count: usize,
    pub hallucinated_ids: Vec<String>,
    pub unparseable_chunks: Vec<usize>,
    pub answers: Vec<String>,
    pub score: TurnScore,
    pub answer_presence: BTreeMap<usize, bool>,
    pub c1: bool,
    pub c2: bool,
    pub faithful: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn outcome(&self) -> TurnOutcome {
        TurnOutcome {
            domain: self.domain.clone(),
            score: score_turn(&self.answers, &self.gold_answers),
            answer_presence: self.answer_presence.clone(),
        }
    }
}

#[derive(Debug)]
pub struct BenchmarkRun {
    pub records: Vec<RunRecord>,
    pub report: EvalReport,
    pub skipped: Vec<(usize, String)>,
}

impl BenchmarkRun {
    pub fn failed_turns(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

#[derive(Debug)]
pub struct SamplingRun {
    pub records: Vec<SamplingRecord>,
    pub failures: Vec<String>,
    pub skipped: Vec<(usize, String)>,
}

/// Metrics from run records. Scores are recomputed from the stored answers
/// and gold sets; all records must come from one configuration.
pub fn report_from_records(records: &[RunRecord]) -> Result<EvalReport> {
    let hash = records.first().map(|r| r.config_hash.clone());
    if records.iter().any(|r| Some(&r.config_hash) != hash.as_ref()) {
        return Err(Error::invalid("run records come from different configurations"));
    }
    let outcomes: Vec<TurnOutcome> = records.iter().map(RunRecord::outcome).collect();
    let mut report = aggregate(&outcomes)?;
    report.config_hash = hash;
    Ok(report)
}

pub fn write_jsonl<T: Serialize>(items: &[T], mut w: impl Write) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::invalid(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn load_benchmark(path: &Path) -> Result<Benchmark> {
    read_benchmark(BufReader::new(fs::File::open(path)?))
}

/// Writes the report as pretty JSON with a trailing newline.
pub fn write_report(report: &EvalReport, mut w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    Ok(())
}
