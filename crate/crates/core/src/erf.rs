//! Evidence filtering: the top-n retrieval results get random display ids,
//! are split into chunks of `s`, and each chunk is shown to the model, which
//! names the relevant ids. The union of the chunk outputs, in BM25 order, is
//! cut to `k` and padded back to `min(k, n)` with the best-ranked leftovers.

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use futures::future::join_all;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::datamodel::Evidence;
use crate::error::{Error, Result, Stage};
use crate::gateway::{DecodingParams, Gateway};
use crate::retrieval::ScoredEvidence;

/// Display ids are drawn from `0..DISPLAY_ID_RANGE` without replacement.
pub const DISPLAY_ID_RANGE: u32 = 1000;

pub const ERF_SYSTEM_PROMPT: &str = "[task:erf]\n\
You select the evidence needed to answer a question. \
Output only a comma-separated list of the ids of relevant evidence, for example: id-12, id-305. \
Output nothing else.";

pub fn format_display_id(n: u32) -> String {
    format!("id-{n}")
}

static DISPLAY_ID: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bid-(\d{1,9})\b").expect("valid regex"));

/// Parses `id-391` (any case, leading zeros allowed) to 391.
pub fn parse_display_id(s: &str) -> Option<u32> {
    let caps = DISPLAY_ID.captures(s.trim())?;
    (caps.get(0)?.as_str().len() == s.trim().len())
        .then(|| caps[1].parse().ok())
        .flatten()
}

/// Bijection between corpus evidence ids and display ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdAssignment {
    seed: u64,
    pairs: Vec<(String, u32)>,
    to_display: HashMap<String, u32>,
    to_evidence: HashMap<u32, String>,
}

impl IdAssignment {
    pub fn from_pairs(seed: u64, pairs: Vec<(String, u32)>) -> Result<Self> {
        let mut to_display = HashMap::with_capacity(pairs.len());
        let mut to_evidence = HashMap::with_capacity(pairs.len());
        for (eid, n) in &pairs {
            if *n >= DISPLAY_ID_RANGE {
                return Err(Error::invalid(format!("display id {n} out of range")));
            }
            if to_display.insert(eid.clone(), *n).is_some() {
                return Err(Error::DuplicateEvidence(eid.clone()));
            }
            if to_evidence.insert(*n, eid.clone()).is_some() {
                return Err(Error::invalid(format!("display id {n} assigned twice")));
            }
        }
        Ok(Self {
            seed,
            pairs,
            to_display,
            to_evidence,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// (evidence id, display id) in input order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, String)> {
        self.pairs
            .iter()
            .map(|(e, n)| (e.as_str(), format_display_id(*n)))
    }

    pub fn display_of(&self, evidence_id: &str) -> Option<String> {
        self.to_display.get(evidence_id).map(|&n| format_display_id(n))
    }

    pub fn evidence_of(&self, display_id: &str) -> Option<&str> {
        let n = parse_display_id(display_id)?;
        self.to_evidence.get(&n).map(String::as_str)
    }
}

/// Random display ids for up to [`DISPLAY_ID_RANGE`] evidence ids,
/// deterministic in `seed`.
pub fn assign_ids<'a>(
    evidence_ids: impl IntoIterator<Item = &'a str>,
    seed: u64,
) -> Result<IdAssignment> {
    let ids: Vec<&str> = evidence_ids.into_iter().collect();
    if ids.len() > DISPLAY_ID_RANGE as usize {
        return Err(Error::invalid(format!(
            "cannot assign display ids to {} evidence (max {DISPLAY_ID_RANGE})",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = rand::seq::index::sample(&mut rng, DISPLAY_ID_RANGE as usize, ids.len());
    let pairs = ids
        .into_iter()
        .zip(draws.iter())
        .map(|(e, n)| (e.to_string(), n as u32))
        .collect();
    IdAssignment::from_pairs(seed, pairs)
}

/// Splits in order into chunks of `s`; only the last may be shorter.
pub fn chunk_evidence<T>(items: &[T], s: usize) -> Result<Vec<&[T]>> {
    if s == 0 {
        return Err(Error::invalid("chunk size must be at least 1"));
    }
    Ok(items.chunks(s).collect())
}

/// One `id: text` row as shown to the filtering model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRow {
    pub display_id: String,
    pub text: String,
}

pub fn erf_user_prompt(reformulation: &str, rows: &[ChunkRow]) -> String {
    let mut out = String::from("Evidence:\n");
    for row in rows {
        out.push_str(&row.display_id);
        out.push_str(": ");
        out.push_str(&row.text.replace('\n', " "));
        out.push('\n');
    }
    out.push_str("\nQuestion: ");
    out.push_str(reformulation.trim());
    out
}

/// Rows for the retrieved evidence in rank order.
pub fn chunk_rows(scored: &[ScoredEvidence], assignment: &IdAssignment) -> Vec<ChunkRow> {
    scored
        .iter()
        .map(|s| ChunkRow {
            display_id: assignment
                .display_of(&s.evidence.evidence_id)
                .expect("assignment covers the retrieved list"),
            text: s.evidence.text.clone(),
        })
        .collect()
}

/// Parsed output of one filtering call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkFilter {
    /// Valid ids in emission order, without repeats.
    pub ids: Vec<String>,
    /// Well-formed ids that are not in the chunk.
    pub hallucinated: Vec<String>,
    /// No id could be parsed at all.
    pub unparseable: bool,
}

pub fn parse_chunk_output(output: &str, rows: &[ChunkRow]) -> ChunkFilter {
    let known: HashSet<&str> = rows.iter().map(|r| r.display_id.as_str()).collect();
    let mut f = ChunkFilter::default();
    let mut any = false;
    for caps in DISPLAY_ID.captures_iter(output) {
        any = true;
        let Ok(n) = caps[1].parse::<u32>() else {
            continue;
        };
        let id = format_display_id(n);
        if known.contains(id.as_str()) {
            if !f.ids.contains(&id) {
                f.ids.push(id);
            }
        } else if !f.hallucinated.contains(&id) {
            f.hallucinated.push(id);
        }
    }
    f.unparseable = !any;
    f
}

pub async fn filter_chunk(
    gateway: &Gateway,
    reformulation: &str,
    rows: &[ChunkRow],
    params: &DecodingParams,
) -> Result<ChunkFilter> {
    Ok(filter_chunk_samples(gateway, reformulation, rows, params)
        .await?
        .into_iter()
        .next()
        .unwrap_or_default())
}

/// One parsed filter per returned generation.
pub async fn filter_chunk_samples(
    gateway: &Gateway,
    reformulation: &str,
    rows: &[ChunkRow],
    params: &DecodingParams,
) -> Result<Vec<ChunkFilter>> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot filter an empty chunk"));
    }
    let gens = gateway
        .complete(ERF_SYSTEM_PROMPT, &erf_user_prompt(reformulation, rows), params)
        .await
        .map_err(|source| Error::Stage {
            stage: Stage::Erf,
            source,
        })?;
    Ok(gens
        .iter()
        .map(|g| parse_chunk_output(&g.text, rows))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSelection {
    /// Evidence handed to answer generation, filtered picks then backfill.
    pub selected: Vec<Evidence>,
    /// Display ids aligned with `selected`.
    pub selected_ids: Vec<String>,
    pub backfilled_count: usize,
    pub chunk_count: usize,
}

impl EvidenceSelection {
    pub fn empty() -> Self {
        Self {
            selected: Vec::new(),
            selected_ids: Vec::new(),
            backfilled_count: 0,
            chunk_count: 0,
        }
    }

    pub fn evidence_ids(&self) -> Vec<String> {
        self.selected.iter().map(|e| e.evidence_id.clone()).collect()
    }
}

/// Deterministic fold of per-chunk picks into the final selection: union in
/// BM25 rank order, truncated to `k`, then backfilled from the top of the
/// ranking until it holds `min(k, n)` items.
pub fn assemble_selection(
    scored: &[ScoredEvidence],
    assignment: &IdAssignment,
    chunk_picks: &[Vec<String>],
    k: usize,
) -> EvidenceSelection {
    let position: HashMap<&str, usize> = scored
        .iter()
        .enumerate()
        .map(|(i, s)| (s.evidence.evidence_id.as_str(), i))
        .collect();
    let mut picked: Vec<usize> = chunk_picks
        .iter()
        .flatten()
        .filter_map(|d| assignment.evidence_of(d))
        .filter_map(|eid| position.get(eid).copied())
        .collect();
    picked.sort_unstable();
    picked.dedup();
    picked.truncate(k);

    let target = k.min(scored.len());
    let filtered = picked.len();
    if picked.len() < target {
        let taken: HashSet<usize> = picked.iter().copied().collect();
        picked.extend(
            (0..scored.len())
                .filter(|i| !taken.contains(i))
                .take(target - filtered),
        );
    }
    let selected: Vec<Evidence> = picked.iter().map(|&i| scored[i].evidence.clone()).collect();
    let selected_ids = selected
        .iter()
        .map(|e| assignment.display_of(&e.evidence_id).expect("assigned"))
        .collect();
    EvidenceSelection {
        selected,
        selected_ids,
        backfilled_count: target.saturating_sub(filtered),
        chunk_count: chunk_picks.len(),
    }
}

/// Per-turn record of the filtering step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErfTrace {
    pub reformulation: String,
    pub n: usize,
    pub k: usize,
    pub s: usize,
    pub chunk_selections: Vec<Vec<String>>,
    pub hallucinated_ids: Vec<String>,
    pub unparseable_chunks: Vec<usize>,
    pub backfilled_count: usize,
    pub selected_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ErfOutcome {
    pub selection: EvidenceSelection,
    pub assignment: IdAssignment,
    pub trace: ErfTrace,
}

#[derive(Debug, Clone, Copy)]
pub struct FilterSettings {
    pub k: usize,
    pub s: usize,
    pub seed: u64,
}

/// Greedy filtering over every chunk, calls issued concurrently.
pub async fn select_evidence(
    gateway: &Gateway,
    reformulation: &str,
    scored: &[ScoredEvidence],
    settings: FilterSettings,
    params: &DecodingParams,
) -> Result<ErfOutcome> {
    if settings.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let assignment = assign_ids(scored.iter().map(|s| s.evidence.evidence_id.as_str()), settings.seed)?;
    let rows = chunk_rows(scored, &assignment);
    let chunks = chunk_evidence(&rows, settings.s)?;
    let calls = chunks
        .iter()
        .map(|c| filter_chunk(gateway, reformulation, c, params));
    let filters = join_all(calls)
        .await
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(reformulation, scored, assignment, settings, &filters))
}

fn finish(
    reformulation: &str,
    scored: &[ScoredEvidence],
    assignment: IdAssignment,
    settings: FilterSettings,
    filters: &[ChunkFilter],
) -> ErfOutcome {
    let picks: Vec<Vec<String>> = filters.iter().map(|f| f.ids.clone()).collect();
    let selection = assemble_selection(scored, &assignment, &picks, settings.k);
    let trace = ErfTrace {
        reformulation: reformulation.to_string(),
        n: scored.len(),
        k: settings.k,
        s: settings.s,
        hallucinated_ids: filters.iter().flat_map(|f| f.hallucinated.clone()).collect(),
        unparseable_chunks: filters
            .iter()
            .enumerate()
            .filter(|(_, f)| f.unparseable)
            .map(|(i, _)| i)
            .collect(),
        chunk_selections: picks,
        backfilled_count: selection.backfilled_count,
        selected_ids: selection.selected_ids.clone(),
    };
    ErfOutcome {
        selection,
        assignment,
        trace,
    }
}

/// Sampled selections over a fixed id assignment. Selection `m` combines the
/// `m`-th sample of every chunk; chunks that returned fewer samples
/// contribute nothing to it.
pub async fn sample_selections(
    gateway: &Gateway,
    reformulation: &str,
    scored: &[ScoredEvidence],
    assignment: &IdAssignment,
    settings: FilterSettings,
    params: &DecodingParams,
) -> Result<Vec<ErfOutcome>> {
    let rows = chunk_rows(scored, assignment);
    let chunks = chunk_evidence(&rows, settings.s)?;
    let calls = chunks
        .iter()
        .map(|c| filter_chunk_samples(gateway, reformulation, c, params));
    let per_chunk = join_all(calls)
        .await
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let count = per_chunk.iter().map(Vec::len).max().unwrap_or(0);
    Ok((0..count)
        .map(|m| {
            let filters: Vec<ChunkFilter> = per_chunk
                .iter()
                .map(|samples| samples.get(m).cloned().unwrap_or_default())
                .collect();
            finish(reformulation, scored, assignment.clone(), settings, &filters)
        })
        .collect())
}
