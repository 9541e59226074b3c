//! Preference-data mining.
//!
//! Every sampled rewrite is pushed through retrieval, filtering and answer
//! generation; the outcome is judged against the gold answers only:
//!
//! * constraint 1 (answer presence): the evidence handed to the generator
//!   mentions a question entity and contains a gold answer;
//! * constraint 2 (answer correctness): the rank-1 answer matches gold.
//!
//! Rewrites meeting both become SFT examples. DPO pairs prefer a rewrite
//! that meets constraint 1 over one that does not, and, among rewrites that
//! both meet constraint 1, one that also meets constraint 2 over one that
//! does not. Evidence filtering gets weak SFT labels (evidence naming both a
//! question entity and a gold answer) and DPO pairs from selections whose
//! answers came out right versus wrong.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ag::{is_faithful, AgPrompt};
use crate::datamodel::{
    answer_is_correct, contains_gold, mentions_any, Evidence, EvidenceKind, GoldAnswer,
    RankedAnswerList,
};
use crate::erf::{chunk_evidence, erf_user_prompt, ChunkRow, EvidenceSelection, ERF_SYSTEM_PROMPT};
use crate::error::{Error, Result};
use crate::gateway::DecodingParams;
use crate::qu::{Reformulation, TurnRef};
use crate::retrieval::answer_presence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub reformulation: Reformulation,
    pub selection: EvidenceSelection,
    pub answers: RankedAnswerList,
    pub c1: bool,
    pub c2: bool,
    pub faithful: bool,
}

impl SampleTrace {
    pub fn new(reformulation: Reformulation, selection: EvidenceSelection, answers: RankedAnswerList) -> Self {
        Self {
            reformulation,
            selection,
            answers,
            c1: false,
            c2: false,
            faithful: false,
        }
    }

    /// Positive rewrite: both constraints hold.
    pub fn is_positive(&self) -> bool {
        self.c1 && self.c2
    }
}

/// Entity mention and answer presence may come from different evidence.
pub fn eval_constraint1(
    selection: &EvidenceSelection,
    question_entities: &[String],
    gold: &[GoldAnswer],
) -> bool {
    selection
        .selected
        .iter()
        .any(|e| mentions_any(e, question_entities))
        && answer_presence(&selection.selected, gold)
}

/// Only the produced (rank-1) answer counts.
pub fn eval_constraint2(answers: &RankedAnswerList, gold: &[GoldAnswer]) -> bool {
    answers.top().is_some_and(|a| answer_is_correct(a, gold))
}

pub fn classify_sample(
    mut trace: SampleTrace,
    gold: &[GoldAnswer],
    question_entities: &[String],
) -> SampleTrace {
    trace.c1 = eval_constraint1(&trace.selection, question_entities, gold);
    trace.c2 = eval_constraint2(&trace.answers, gold);
    trace.faithful = trace
        .answers
        .top()
        .is_some_and(|a| is_faithful(a, &trace.selection));
    trace
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Qu,
    Erf,
    Ag,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Qu, Task::Erf, Task::Ag];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Qu => "qu",
            Task::Erf => "erf",
            Task::Ag => "ag",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Sft,
    Dpo,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Sft => "sft",
            RecordKind::Dpo => "dpo",
        }
    }
}

/// One SFT example (`chosen` is the completion) or one DPO pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub task: Task,
    pub kind: RecordKind,
    pub prompt: String,
    pub chosen: String,
    pub rejected: Option<String>,
}

impl PreferenceRecord {
    pub fn sft(task: Task, prompt: impl Into<String>, completion: impl Into<String>) -> Self {
        Self {
            task,
            kind: RecordKind::Sft,
            prompt: prompt.into(),
            chosen: completion.into(),
            rejected: None,
        }
    }

    /// `None` when chosen and rejected coincide.
    pub fn dpo(
        task: Task,
        prompt: impl Into<String>,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
    ) -> Option<Self> {
        let (chosen, rejected) = (chosen.into(), rejected.into());
        (chosen != rejected).then(|| Self {
            task,
            kind: RecordKind::Dpo,
            prompt: prompt.into(),
            chosen,
            rejected: Some(rejected),
        })
    }
}

/// Which preference rule produced a rewrite pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRule {
    /// Winner meets constraint 1, loser does not.
    Presence,
    /// Both meet constraint 1; only the winner meets constraint 2.
    Correctness,
}

pub fn pair_rule(winner: &SampleTrace, loser: &SampleTrace) -> Option<PairRule> {
    if winner.c1 && !loser.c1 {
        Some(PairRule::Presence)
    } else if winner.c1 && loser.c1 && winner.c2 && !loser.c2 {
        Some(PairRule::Correctness)
    } else {
        None
    }
}

pub const DEFAULT_PAIR_CAP: usize = 10;

/// SFT for positive rewrites, DPO over all qualifying ordered pairs in
/// trace order, at most `pair_cap` of them.
pub fn mine_qu(traces: &[SampleTrace], qu_prompt: &str, pair_cap: usize) -> Vec<PreferenceRecord> {
    let mut out: Vec<PreferenceRecord> = traces
        .iter()
        .filter(|t| t.is_positive())
        .map(|t| PreferenceRecord::sft(Task::Qu, qu_prompt, &t.reformulation.text))
        .collect();
    let pairs = traces
        .iter()
        .flat_map(|w| traces.iter().map(move |l| (w, l)))
        .filter(|(w, l)| pair_rule(w, l).is_some())
        .filter_map(|(w, l)| {
            PreferenceRecord::dpo(Task::Qu, qu_prompt, &w.reformulation.text, &l.reformulation.text)
        })
        .take(pair_cap);
    out.extend(pairs);
    out
}

/// A retrieved evidence row as recorded in the sampling log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRow {
    pub evidence_id: String,
    pub display_id: String,
    pub kind: EvidenceKind,
    pub text: String,
    pub score: f64,
}

impl RetrievedRow {
    pub fn to_evidence(&self) -> Evidence {
        Evidence::new(self.evidence_id.clone(), self.kind, self.text.clone())
    }

    fn chunk_row(&self) -> ChunkRow {
        ChunkRow {
            display_id: self.display_id.clone(),
            text: self.text.clone(),
        }
    }
}

pub fn erf_prompt_text(reformulation: &str, rows: &[ChunkRow]) -> String {
    format!("{ERF_SYSTEM_PROMPT}\n\n{}", erf_user_prompt(reformulation, rows))
}

/// The weak-label predicate: names a question entity and a gold answer.
pub fn is_weak_positive(evidence: &Evidence, question_entities: &[String], gold: &[GoldAnswer]) -> bool {
    mentions_any(evidence, question_entities) && contains_gold(evidence, gold)
}

/// One SFT record per chunk that has at least one weak positive.
pub fn mine_erf_sft(
    reformulation: &str,
    retrieved: &[RetrievedRow],
    s: usize,
    question_entities: &[String],
    gold: &[GoldAnswer],
) -> Result<Vec<PreferenceRecord>> {
    let mut out = Vec::new();
    for chunk in chunk_evidence(retrieved, s)? {
        let positives: Vec<&str> = chunk
            .iter()
            .filter(|r| is_weak_positive(&r.to_evidence(), question_entities, gold))
            .map(|r| r.display_id.as_str())
            .collect();
        if positives.is_empty() {
            continue;
        }
        let rows: Vec<ChunkRow> = chunk.iter().map(RetrievedRow::chunk_row).collect();
        out.push(PreferenceRecord::sft(
            Task::Erf,
            erf_prompt_text(reformulation, &rows),
            positives.join(", "),
        ));
    }
    Ok(out)
}

/// A selection for one rewrite together with whether answer generation got
/// it right from that evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub selected_ids: Vec<String>,
    pub correct: bool,
}

/// Pairs every correct selection with every incorrect one (stable order, at
/// most `pair_cap`). The prompt lists the union of all candidate evidence in
/// retrieval order.
pub fn mine_erf_dpo(
    reformulation: &str,
    retrieved: &[RetrievedRow],
    candidates: &[SelectionOutcome],
    pair_cap: usize,
) -> Vec<PreferenceRecord> {
    let mut seen = HashSet::new();
    let unique: Vec<&SelectionOutcome> = candidates
        .iter()
        .filter(|c| !c.selected_ids.is_empty() && seen.insert(c.selected_ids.clone()))
        .collect();
    let (good, bad): (Vec<_>, Vec<_>) = unique.into_iter().partition(|c| c.correct);
    if good.is_empty() || bad.is_empty() {
        return Vec::new();
    }
    let union: HashSet<&str> = good
        .iter()
        .chain(bad.iter())
        .flat_map(|c| c.selected_ids.iter().map(String::as_str))
        .collect();
    let rows: Vec<ChunkRow> = retrieved
        .iter()
        .filter(|r| union.contains(r.display_id.as_str()))
        .map(RetrievedRow::chunk_row)
        .collect();
    let prompt = erf_prompt_text(reformulation, &rows);
    good.iter()
        .flat_map(|g| bad.iter().map(move |b| (g, b)))
        .filter_map(|(g, b)| {
            PreferenceRecord::dpo(Task::Erf, &prompt, g.selected_ids.join(", "), b.selected_ids.join(", "))
        })
        .take(pair_cap)
        .collect()
}

/// SFT for answer generation from every trace whose evidence supports the
/// gold answer, with the gold canonical form as completion.
pub fn mine_ag(traces: &[SampleTrace], gold: &[GoldAnswer]) -> Vec<PreferenceRecord> {
    let Some(answer) = gold.first() else {
        return Vec::new();
    };
    let mut seen = HashSet::new();
    traces
        .iter()
        .filter(|t| t.c1)
        .map(|t| {
            let prompt = AgPrompt::new(&t.reformulation.text, &t.selection.selected).full_text();
            PreferenceRecord::sft(Task::Ag, prompt, &answer.canonical)
        })
        .filter(|r| seen.insert((r.prompt.clone(), r.chosen.clone())))
        .collect()
}

// ---------------------------------------------------------------------------
// Sampling log

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionLog {
    pub selected_ids: Vec<String>,
    pub backfilled_count: usize,
    pub chunk_selections: Vec<Vec<String>>,
    pub hallucinated_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledSelectionLog {
    pub selected_ids: Vec<String>,
    /// Rank-1 answer generated from this selection.
    pub answer: Option<String>,
}

/// One sampled rewrite with everything that happened downstream of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLog {
    pub j: usize,
    pub text: String,
    pub decoding: DecodingParams,
    pub empty_query: bool,
    /// Top-n in retrieval order.
    pub retrieved: Vec<RetrievedRow>,
    pub selection: SelectionLog,
    pub answers: Vec<String>,
    pub erf_samples: Vec<SampledSelectionLog>,
}

/// One turn of the sampling log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRecord {
    pub config_hash: String,
    pub conv_id: String,
    pub turn: usize,
    pub domain: String,
    pub question: String,
    pub question_entities: Vec<String>,
    pub gold_answers: Vec<GoldAnswer>,
    pub qu_prompt: String,
    pub k: usize,
    pub s: usize,
    pub samples: Vec<SampleLog>,
}

impl SampleLog {
    pub fn selection(&self) -> EvidenceSelection {
        selection_from_ids(&self.retrieved, &self.selection.selected_ids, self.selection.backfilled_count)
    }
}

fn selection_from_ids(retrieved: &[RetrievedRow], ids: &[String], backfilled: usize) -> EvidenceSelection {
    let by_display: BTreeMap<&str, &RetrievedRow> =
        retrieved.iter().map(|r| (r.display_id.as_str(), r)).collect();
    let selected: Vec<Evidence> = ids
        .iter()
        .filter_map(|d| by_display.get(d.as_str()))
        .map(|r| r.to_evidence())
        .collect();
    EvidenceSelection {
        selected,
        selected_ids: ids.to_vec(),
        backfilled_count: backfilled,
        chunk_count: 0,
    }
}

impl SamplingRecord {
    /// Classified traces, one per sampled rewrite, in log order.
    pub fn traces(&self) -> Vec<SampleTrace> {
        self.samples
            .iter()
            .map(|s| {
                let reformulation = Reformulation {
                    turn_ref: TurnRef {
                        conv_id: self.conv_id.clone(),
                        turn: self.turn,
                    },
                    sample_index: s.j,
                    text: s.text.clone(),
                    decoding: s.decoding.clone(),
                };
                let trace = SampleTrace::new(reformulation, s.selection(), s.answers.iter().collect());
                classify_sample(trace, &self.gold_answers, &self.question_entities)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MinerConfig {
    pub pair_cap: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            pair_cap: DEFAULT_PAIR_CAP,
        }
    }
}

/// All records for one turn: QU, then ERF SFT, ERF DPO, then AG.
pub fn mine_turn(record: &SamplingRecord, config: MinerConfig) -> Result<Vec<PreferenceRecord>> {
    let traces = record.traces();
    let mut out = mine_qu(&traces, &record.qu_prompt, config.pair_cap);
    for s in &record.samples {
        out.extend(mine_erf_sft(
            &s.text,
            &s.retrieved,
            record.s,
            &record.question_entities,
            &record.gold_answers,
        )?);
    }
    let mut erf_pairs = Vec::new();
    for (s, trace) in record.samples.iter().zip(&traces) {
        let mut candidates = vec![SelectionOutcome {
            selected_ids: s.selection.selected_ids.clone(),
            correct: trace.c2,
        }];
        candidates.extend(s.erf_samples.iter().map(|e| SelectionOutcome {
            selected_ids: e.selected_ids.clone(),
            correct: e
                .answer
                .as_deref()
                .is_some_and(|a| answer_is_correct(a, &record.gold_answers)),
        }));
        erf_pairs.extend(mine_erf_dpo(&s.text, &s.retrieved, &candidates, config.pair_cap));
    }
    erf_pairs.truncate(config.pair_cap);
    out.extend(erf_pairs);
    out.extend(mine_ag(&traces, &record.gold_answers));
    Ok(out)
}

/// Mines every turn in (conv_id, turn) order and drops repeated records.
pub fn mine_log(records: &[SamplingRecord], config: MinerConfig) -> Result<Vec<PreferenceRecord>> {
    let mut ordered: Vec<&SamplingRecord> = records.iter().collect();
    ordered.sort_by(|a, b| (&a.conv_id, a.turn).cmp(&(&b.conv_id, b.turn)));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for r in ordered {
        for rec in mine_turn(r, config)? {
            if seen.insert(rec.clone()) {
                out.push(rec);
            }
        }
    }
    Ok(out)
}

pub fn read_sampling_log(reader: impl BufRead) -> Result<Vec<SamplingRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("sampling log line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Serialize, Deserialize)]
struct SftLine {
    prompt: String,
    completion: String,
}

#[derive(Serialize, Deserialize)]
struct DpoLine {
    prompt: String,
    chosen: String,
    rejected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub task: Task,
    pub kind: RecordKind,
    pub path: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub files: Vec<ManifestFile>,
    /// Intended use: SFT first, then DPO, one epoch each.
    pub schedule: String,
}

impl Manifest {
    pub fn count(&self, task: Task, kind: RecordKind) -> usize {
        self.files
            .iter()
            .find(|f| f.task == task && f.kind == kind)
            .map_or(0, |f| f.records)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn dataset_file_name(task: Task, kind: RecordKind) -> String {
    format!("{}_{}.jsonl", kind.as_str(), task.as_str())
}

fn render(records: &[PreferenceRecord], task: Task, kind: RecordKind) -> Result<(Vec<u8>, usize)> {
    let mut buf = Vec::new();
    let mut n = 0;
    for r in records.iter().filter(|r| r.task == task && r.kind == kind) {
        match kind {
            RecordKind::Sft => serde_json::to_writer(
                &mut buf,
                &SftLine {
                    prompt: r.prompt.clone(),
                    completion: r.chosen.clone(),
                },
            )?,
            RecordKind::Dpo => {
                let rejected = r
                    .rejected
                    .clone()
                    .ok_or_else(|| Error::invalid("DPO record without a rejected completion"))?;
                if rejected == r.chosen {
                    return Err(Error::invalid("DPO record with chosen == rejected"));
                }
                serde_json::to_writer(
                    &mut buf,
                    &DpoLine {
                        prompt: r.prompt.clone(),
                        chosen: r.chosen.clone(),
                        rejected,
                    },
                )?
            }
        }
        buf.push(b'\n');
        n += 1;
    }
    Ok((buf, n))
}

/// Writes `sft_<task>.jsonl` and `dpo_<task>.jsonl` for every task plus a
/// manifest. Files are staged under temporary names and renamed only once
/// all of them were written; on failure the staged files are removed.
pub fn emit_datasets(records: &[PreferenceRecord], dir: &Path, config_hash: Option<&str>) -> Result<Manifest> {
    let mut staged: Vec<(PathBuf, PathBuf, Vec<u8>)> = Vec::new();
    let mut files = Vec::new();
    for task in Task::ALL {
        for kind in [RecordKind::Sft, RecordKind::Dpo] {
            let (bytes, n) = render(records, task, kind)?;
            let name = dataset_file_name(task, kind);
            staged.push((dir.join(format!(".{name}.tmp")), dir.join(&name), bytes));
            files.push(ManifestFile {
                task,
                kind,
                path: name,
                records: n,
            });
        }
    }
    let manifest = Manifest {
        config_hash: config_hash.map(str::to_string),
        files,
        schedule: "sft then dpo, 1 epoch each".into(),
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    staged.push((
        dir.join(format!(".{MANIFEST_FILE}.tmp")),
        dir.join(MANIFEST_FILE),
        manifest_bytes,
    ));

    let cleanup = |staged: &[(PathBuf, PathBuf, Vec<u8>)]| {
        for (tmp, _, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (tmp, _, bytes) in &staged {
        let written = fs::File::create(tmp).and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        });
        if let Err(e) = written {
            cleanup(&staged);
            return Err(e.into());
        }
    }
    for (tmp, dest, _) in &staged {
        if let Err(e) = fs::rename(tmp, dest) {
            cleanup(&staged);
            return Err(e.into());
        }
    }
    Ok(manifest)
}

/// Reads back every dataset file listed in the manifest.
pub fn read_datasets(dir: &Path) -> Result<(Manifest, Vec<PreferenceRecord>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let mut out = Vec::new();
    for f in &manifest.files {
        let reader = BufReader::new(fs::File::open(dir.join(&f.path))?);
        for line in reader.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            out.push(match f.kind {
                RecordKind::Sft => {
                    let l: SftLine = serde_json::from_str(&line)?;
                    PreferenceRecord::sft(f.task, l.prompt, l.completion)
                }
                RecordKind::Dpo => {
                    let l: DpoLine = serde_json::from_str(&line)?;
                    PreferenceRecord::dpo(f.task, l.prompt, l.chosen, l.rejected)
                        .ok_or_else(|| Error::invalid(format!("{}: chosen == rejected", f.path)))?
                }
            });
        }
    }
    Ok((manifest, out))
}
