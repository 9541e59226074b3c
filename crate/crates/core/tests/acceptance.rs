//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::time::{Duration, Instant};

use convqa_core::datamodel::{Conversation, Evidence, EvidenceKind, GoldAnswer, Turn};
use convqa_core::demo;
use convqa_core::erf::{assemble_selection, assign_ids, chunk_evidence, IdAssignment};
use convqa_core::gateway::{Gateway, RecordingChatModel};
use convqa_core::metrics::{aggregate, answer_presence_at, score_turn, TurnOutcome, TurnScore};
use convqa_core::mining::{
    emit_datasets, is_weak_positive, mine_erf_sft, mine_log, mine_qu, read_datasets, MinerConfig,
    PreferenceRecord, RecordKind, RetrievedRow, SamplingRecord, Task, DEFAULT_PAIR_CAP,
};
use convqa_core::orchestrator::{write_jsonl, write_report, Backend, HistoryMode, Pipeline, PipelineConfig};
use convqa_core::retrieval::{Bm25Params, CorpusIndex, ScoredEvidence};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BM25_REL_TOL: f64 = 1e-9;
const BM25_CORPORA: usize = 200;
const BM25_MAX_DOCS: usize = 50;
const BM25_BUDGET: Duration = Duration::from_secs(10);
const ERF_CASES: u32 = 1000;
const ERF_BUDGET: Duration = Duration::from_secs(30);
const WEAK_LABEL_CORPUS: usize = 1000;

type Outcome = Result<String, String>;
type Check = Pin<Box<dyn Future<Output = Outcome>>>;
/// answers, gold, P@1, Hit@5, reciprocal rank
type ScoreFixture = (Vec<String>, Vec<GoldAnswer>, f64, f64, f64);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------------------
// BM25 oracle

fn oracle_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Textbook BM25 computed per document from raw token lists.
fn oracle_scores(docs: &[String], query: &str, p: Bm25Params) -> Vec<f64> {
    let toks: Vec<Vec<String>> = docs.iter().map(|d| oracle_tokens(d)).collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut terms: Vec<String> = Vec::new();
    for t in oracle_tokens(query) {
        if !terms.contains(&t) {
            terms.push(t);
        }
    }
    toks.iter()
        .map(|d| {
            let dl = d.len() as f64;
            terms
                .iter()
                .map(|t| {
                    let tf = d.iter().filter(|w| *w == t).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let df = toks.iter().filter(|x| x.contains(t)).count() as f64;
                    let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                    idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * dl / avgdl))
                })
                .sum()
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= BM25_REL_TOL * a.abs().max(b.abs()).max(1e-300) || a == b
}

async fn bm25_oracle() -> Outcome {
    const VOCAB: &[&str] = &[
        "neymar", "forward", "winger", "brazil", "santos", "updike", "rabbit", "rest", "novel", "prize",
        "film", "director", "brooks", "the", "of", "a", "1990", "1992", "júnior", "goal",
    ];
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xB325);
    let (mut queries, mut exact_order) = (0usize, 0usize);
    for c in 0..BM25_CORPORA {
        let n_docs = rng.random_range(1..=BM25_MAX_DOCS);
        let docs: Vec<String> = (0..n_docs)
            .map(|_| {
                let len = rng.random_range(1..=25);
                let words: Vec<&str> = (0..len).map(|_| *VOCAB.choose(&mut rng).unwrap()).collect();
                words.join(if rng.random_bool(0.3) { ", " } else { " " })
            })
            .collect();
        let params = Bm25Params {
            k1: rng.random_range(0.5..2.0),
            b: rng.random_range(0.0..=1.0),
        };
        let corpus = docs
            .iter()
            .enumerate()
            .map(|(i, d)| Evidence::new(format!("d{i}"), EvidenceKind::Text, d.clone()));
        let index = CorpusIndex::build(corpus, params).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let qlen = rng.random_range(1..=6);
            let mut words: Vec<&str> = (0..qlen).map(|_| *VOCAB.choose(&mut rng).unwrap()).collect();
            if rng.random_bool(0.2) {
                words.push("unseenterm");
            }
            let query = words.join(if rng.random_bool(0.5) { "? " } else { " " });
            let n = rng.random_range(1..=60);
            let oracle = oracle_scores(&docs, &query, params);
            let got = index.retrieve(&query, n);
            queries += 1;
            ensure!(!got.empty_query, "corpus {c}: query `{query}` flagged empty");
            ensure!(got.hits.len() == n.min(n_docs), "corpus {c}: {} hits, expected {}", got.hits.len(), n.min(n_docs));
            let mut seen = HashSet::new();
            for (r, h) in got.hits.iter().enumerate() {
                let d: usize = h.evidence.evidence_id[1..].parse().unwrap();
                ensure!(seen.insert(d), "corpus {c}: doc {d} returned twice");
                ensure!(h.rank == r + 1, "corpus {c}: rank field {} at position {r}", h.rank);
                ensure!(close(h.score, oracle[d]), "corpus {c}: doc {d} score {} vs oracle {}", h.score, oracle[d]);
            }
            // oracle order: score descending, ties by insertion order
            let mut order: Vec<usize> = (0..n_docs).collect();
            order.sort_by(|&a, &b| oracle[b].total_cmp(&oracle[a]).then(a.cmp(&b)));
            let got_order: Vec<usize> = got.hits.iter().map(|h| h.evidence.evidence_id[1..].parse().unwrap()).collect();
            if got_order[..] == order[..got_order.len()] {
                exact_order += 1;
            } else {
                // only reorderings among scores equal within tolerance are allowed
                for (i, (&g, &o)) in got_order.iter().zip(&order).enumerate() {
                    ensure!(close(oracle[g], oracle[o]), "corpus {c}: order differs at {i}");
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed <= BM25_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{BM25_CORPORA} corpora, {queries} queries, {exact_order} exact orderings, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Metrics

fn g(a: &str) -> Vec<GoldAnswer> {
    vec![GoldAnswer::new(a)]
}

fn strs(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

async fn metric_oracle() -> Outcome {
    let ten: Vec<&str> = vec!["a", "b", "c", "d", "e", "f", "g", "h", "i", "1990"];
    // values worked out by hand
    let fixtures: Vec<ScoreFixture> = vec![
        (strs(&["1990"]), g("1990"), 1.0, 1.0, 1.0),
        (strs(&["x", "1990"]), g("1990"), 0.0, 1.0, 0.5),
        (vec![], g("1990"), 0.0, 0.0, 0.0),
        (strs(&["a", "b", "c", "d", "1990"]), g("1990"), 0.0, 1.0, 0.2),
        (strs(&["a", "b", "c", "d", "e", "1990"]), g("1990"), 0.0, 0.0, 1.0 / 6.0),
        (strs(&["The Beatles"]), g("Beatles"), 1.0, 1.0, 1.0),
        (strs(&["Left winger, forward"]), g("Left winger"), 1.0, 1.0, 1.0),
        (strs(&["goalkeeper, forward"]), vec![GoldAnswer::with_aliases("Left winger, forward", ["forward"])], 1.0, 1.0, 1.0),
        (strs(&["james l. brooks"]), g("James L. Brooks"), 1.0, 1.0, 1.0),
        (strs(&["Brooks"]), g("James L. Brooks"), 0.0, 0.0, 0.0),
        (strs(&["two"]), vec![GoldAnswer::with_aliases("2", ["two"])], 1.0, 1.0, 1.0),
        (strs(&["x", "y", "z", "1990"]), g("1990"), 0.0, 1.0, 0.25),
        (strs(&["x", "y", "1990"]), g("1990"), 0.0, 1.0, 1.0 / 3.0),
        (strs(&["c", "b"]), vec![GoldAnswer::new("a"), GoldAnswer::new("b")], 0.0, 1.0, 0.5),
        (strs(&["  1990. "]), g("1990"), 1.0, 1.0, 1.0),
        (strs(&["19900"]), g("1990"), 0.0, 0.0, 0.0),
        (strs(&["", "1990"]), g("1990"), 0.0, 1.0, 0.5),
        (strs(&ten), g("1990"), 0.0, 0.0, 0.1),
        (strs(&["An Apple"]), g("apple"), 1.0, 1.0, 1.0),
        (strs(&["rabbit at rest"]), g("Rabbit at Rest"), 1.0, 1.0, 1.0),
        (strs(&["Rabbit"]), g("Rabbit at Rest"), 0.0, 0.0, 0.0),
        (strs(&["x", "1990", "1990"]), g("1990"), 0.0, 1.0, 0.5),
    ];
    for (i, (answers, gold, p1, hit5, rr)) in fixtures.iter().enumerate() {
        let s = score_turn(answers, gold);
        ensure!(s == TurnScore { p1: *p1, hit5: *hit5, rr: *rr }, "fixture {i}: got {s:?}");
        ensure!(s.p1 <= s.hit5 && s.hit5 <= 1.0, "fixture {i}: P@1 <= Hit@5 <= 1 violated");
    }

    // evidence rankings with the gold answer at a given position (None: absent)
    let ranking = |pos: Option<usize>| -> Vec<Evidence> {
        (0..500)
            .map(|i| {
                let text = if Some(i) == pos { "published in 1990" } else { "unrelated filler" };
                Evidence::new(format!("e{i}"), EvidenceKind::Text, text)
            })
            .collect()
    };
    let gold = g("1990");
    let positions = [Some(0), Some(49), Some(50), Some(499), None, Some(10)];
    let domains = ["books", "books", "movies", "movies", "soccer", "soccer"];
    let turns: Vec<TurnOutcome> = positions
        .iter()
        .zip(domains)
        .zip(&fixtures)
        .map(|((p, d), f)| TurnOutcome {
            domain: d.into(),
            score: score_turn(&f.0, &f.1),
            answer_presence: answer_presence_at(&ranking(*p), &gold, &[50, 500]),
        })
        .collect();
    let r = aggregate(&turns).map_err(|e| e.to_string())?;
    // fixtures 0..6: p1 = 1,0,0,0,0,1; hit5 = 1,1,0,1,0,1; rr = 1,.5,0,.2,1/6,1
    ensure!(r.p_at_1 == (1.0 + 0.0 + 0.0 + 0.0 + 0.0 + 1.0) / 6.0, "P@1 {}", r.p_at_1);
    ensure!(r.hit_at_5 == (1.0 + 1.0 + 0.0 + 1.0 + 0.0 + 1.0) / 6.0, "Hit@5 {}", r.hit_at_5);
    ensure!(r.mrr == (1.0 + 0.5 + 0.0 + 0.2 + 1.0 / 6.0 + 1.0) / 6.0, "MRR {}", r.mrr);
    ensure!(r.ap_at_k[&50] == 3.0 / 6.0, "AP@50 {}", r.ap_at_k[&50]);
    ensure!(r.ap_at_k[&500] == 5.0 / 6.0, "AP@500 {}", r.ap_at_k[&500]);
    ensure!(r.per_domain["books"].ap_at_k[&50] == 1.0, "books AP@50");
    ensure!(r.per_domain["movies"].mrr == (0.0 + 0.2) / 2.0, "movies MRR");
    ensure!(r.per_domain["soccer"].p_at_1 == 0.5, "soccer P@1");
    ensure!(r.turn_count == 6, "turn count");
    for m in r.per_domain.values().chain(std::iter::once(&convqa_core::metrics::DomainMetrics {
        p_at_1: r.p_at_1,
        hit_at_5: r.hit_at_5,
        mrr: r.mrr,
        ap_at_k: r.ap_at_k.clone(),
        turn_count: r.turn_count,
    })) {
        ensure!(m.p_at_1 <= m.hit_at_5 && m.hit_at_5 <= 1.0, "P@1 <= Hit@5 <= 1 violated");
        ensure!(m.ap_at_k[&50] <= m.ap_at_k[&500], "AP@50 <= AP@500 violated");
    }
    Ok(format!("{} turn fixtures, 1 aggregate fixture over 3 domains", fixtures.len()))
}

// ---------------------------------------------------------------------------
// Worked rewrite example: r31 answers right without support, r32 has support
// but answers wrong, r34 has support and answers right.

const R31: &str = "Who joined to replace Sid?";
const R32: &str = "Who joined the band to replace Syd Barrett?";
const R34: &str = "Who joined Pink Floyd to replace Syd Barrett?";

fn figure_conversation() -> Conversation {
    let turn = |q: &str, a: &str, ents: &[&str]| Turn {
        index: 0,
        question: q.into(),
        gold_answers: g(a),
        question_entities: ents.iter().map(|e| e.to_string()).collect(),
        observed_answer: None,
    };
    Conversation {
        conv_id: "figure".into(),
        domain: "music".into(),
        turns: vec![
            turn("Which band recorded The Wall?", "Pink Floyd", &["The Wall"]),
            turn("Who left it in 1968?", "Syd Barrett", &["Pink Floyd"]),
            turn("Who joined to replace Sid?", "David Gilmour", &["Pink Floyd", "Syd Barrett"]),
        ],
    }
    .validated()
    .unwrap()
}

fn figure_corpus() -> Vec<Evidence> {
    [
        ("vicious", "Sid Vicious joined the Sex Pistols in 1977 to replace Glen Matlock"),
        ("members", "Pink Floyd members: Roger Waters, Syd Barrett, David Gilmour, Nick Mason"),
        ("gilmour", "David Gilmour joined Pink Floyd in 1968 to replace Syd Barrett"),
        ("wall", "The Wall is a 1979 rock opera album by Pink Floyd"),
        ("barrett", "Syd Barrett left Pink Floyd in 1968"),
        ("matlock", "Glen Matlock was the bassist of the Sex Pistols"),
    ]
    .into_iter()
    .map(|(id, t)| Evidence::new(id, EvidenceKind::Text, t))
    .collect()
}

fn figure_responder(task: &str, prompt: &str) -> Option<Vec<String>> {
    let question = prompt.lines().rev().find_map(|l| l.strip_prefix("Question: "))?.trim();
    let pick = |needle: &str| -> Option<Vec<String>> {
        let id = prompt
            .lines()
            .filter_map(|l| l.split_once(": "))
            .find(|(_, t)| t.contains(needle))
            .map(|(id, _)| id.to_string())?;
        Some(vec![id])
    };
    match (task, question) {
        ("qu", "Who joined to replace Sid?") => Some(
            // third and fifth samples repeat earlier ones and are dropped
            [R31, R32, R32, R34, R34].iter().map(|s| s.to_string()).collect(),
        ),
        ("erf", R31) => pick("Sid Vicious"),
        ("erf", R32) => pick("members"),
        ("erf", R34) => pick("Gilmour joined"),
        ("ag", R31) | ("ag", R34) => Some(vec!["David Gilmour".into()]),
        ("ag", R32) => Some(vec!["Roger Waters".into()]),
        _ => None,
    }
}

fn figure_pipeline() -> Pipeline {
    let config = PipelineConfig {
        n: 6,
        k: 1,
        s: 50,
        erf_samples: 0,
        seed: 31,
        ..PipelineConfig::default()
    };
    let index = CorpusIndex::build(figure_corpus(), config.bm25).unwrap();
    let gateway = Gateway::new(Arc::new(RecordingChatModel::new(figure_responder)), 4);
    Pipeline::new(config, index, gateway, Vec::new()).unwrap()
}

async fn figure_record() -> Result<SamplingRecord, String> {
    figure_pipeline()
        .sample_turn(&figure_conversation(), 2)
        .await
        .map_err(|e| e.to_string())
}

async fn figure_golden() -> Outcome {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let record = figure_record().await?;
        let traces = record.traces();
        let texts: Vec<&str> = traces.iter().map(|t| t.reformulation.text.as_str()).collect();
        ensure!(texts == [R31, R32, R34], "rewrites {texts:?}");
        let flags: Vec<(bool, bool)> = traces.iter().map(|t| (t.c1, t.c2)).collect();
        ensure!(!flags[0].0, "r31 must fail constraint 1");
        ensure!(flags[1] == (true, false), "r32 flags {:?}", flags[1]);
        ensure!(flags[2] == (true, true), "r34 flags {:?}", flags[2]);
        ensure!(flags[0].1 && !traces[0].faithful, "r31 is right but unfaithful");

        let mined = mine_qu(&traces, &record.qu_prompt, DEFAULT_PAIR_CAP);
        let sft: Vec<&str> = mined.iter().filter(|r| r.kind == RecordKind::Sft).map(|r| r.chosen.as_str()).collect();
        ensure!(sft == [R34], "SFT {sft:?}");
        let dpo: HashSet<(String, String)> = mined
            .iter()
            .filter(|r| r.kind == RecordKind::Dpo)
            .map(|r| (r.chosen.clone(), r.rejected.clone().unwrap()))
            .collect();
        let expected: HashSet<(String, String)> =
            [(R32, R31), (R34, R31), (R34, R32)].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        ensure!(dpo == expected && mined.len() == 4, "DPO {dpo:?}");
        runs.push(serde_json::to_string(&(record, mined)).unwrap());
    }
    ensure!(runs[0] == runs[1], "two runs differ");
    Ok("c1/c2 = (F,T) (T,F) (T,T); SFT {r34}; 3 DPO pairs; 2 identical runs".into())
}

// ---------------------------------------------------------------------------
// Evidence selection

fn scored(n: usize) -> Vec<ScoredEvidence> {
    (0..n)
        .map(|i| ScoredEvidence {
            evidence: Evidence::new(format!("e{i}"), EvidenceKind::Text, format!("t{i}")),
            score: (n - i) as f64,
            rank: i + 1,
        })
        .collect()
}

#[derive(Debug, Clone)]
enum PickMode {
    Empty,
    Random(f64),
    OverFull,
}

fn check_selection(n: usize, k: usize, s: usize, mode: PickMode, seed: u64) -> Result<(), TestCaseError> {
    let list = scored(n);
    let assignment: IdAssignment = assign_ids(list.iter().map(|x| x.evidence.evidence_id.as_str()), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunks = chunk_evidence(&list, s).unwrap();
    let mut picks: Vec<Vec<String>> = chunks
        .iter()
        .map(|c| {
            c.iter()
                .filter(|_| match mode {
                    PickMode::Empty => false,
                    PickMode::Random(p) => rng.random_bool(p),
                    PickMode::OverFull => true,
                })
                .map(|x| assignment.display_of(&x.evidence.evidence_id).unwrap())
                .collect()
        })
        .collect();
    // emission order within a chunk must not matter
    for p in &mut picks {
        p.reverse();
    }
    // ids that do not exist are ignored
    if let Some(p) = picks.first_mut() {
        p.push("id-999999".into());
    }
    let valid: HashSet<usize> = picks
        .iter()
        .flatten()
        .filter_map(|d| assignment.evidence_of(d))
        .map(|e| e[1..].parse().unwrap())
        .collect();
    let sel = assemble_selection(&list, &assignment, &picks, k);
    let target = k.min(n);
    prop_assert_eq!(sel.selected.len(), target);
    prop_assert_eq!(sel.selected_ids.len(), target);
    let pos: Vec<usize> = sel.selected.iter().map(|e| e.evidence_id[1..].parse().unwrap()).collect();
    prop_assert!(pos.iter().all(|&p| p < n));
    prop_assert_eq!(pos.iter().collect::<HashSet<_>>().len(), pos.len());
    let filtered = valid.len().min(k);
    prop_assert_eq!(sel.backfilled_count, target - filtered);
    let (head, tail) = pos.split_at(filtered);
    let mut expected_head: Vec<usize> = valid.iter().copied().collect();
    expected_head.sort_unstable();
    expected_head.truncate(k);
    prop_assert_eq!(head, &expected_head[..]);
    // backfill is the best-ranked remainder, in rank order
    let expected_tail: Vec<usize> = (0..n).filter(|i| !expected_head.contains(i)).take(target - filtered).collect();
    prop_assert_eq!(tail, &expected_tail[..]);
    for (e, d) in sel.selected.iter().zip(&sel.selected_ids) {
        prop_assert_eq!(assignment.evidence_of(d), Some(e.evidence_id.as_str()));
    }
    Ok(())
}

async fn erf_guarantees() -> Outcome {
    let start = Instant::now();
    let mode = prop_oneof![
        1 => Just(PickMode::Empty),
        1 => Just(PickMode::OverFull),
        3 => (0.0f64..0.5).prop_map(PickMode::Random),
    ];
    let mut runner = TestRunner::new(PropConfig {
        cases: ERF_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner
        .run(&(0usize..=600, 1usize..=80, 1usize..=60, mode, any::<u64>()), |(n, k, s, m, seed)| {
            check_selection(n, k, s, m, seed)
        })
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(elapsed <= ERF_BUDGET, "took {elapsed:?}");
    Ok(format!("{ERF_CASES} cases, {:.2}s", elapsed.as_secs_f64()))
}

async fn chunking() -> Outcome {
    let sizes = |n: usize, s: usize| -> Result<Vec<usize>, String> {
        let items: Vec<usize> = (0..n).collect();
        let chunks = chunk_evidence(&items, s).map_err(|e| e.to_string())?;
        let flat: Vec<usize> = chunks.iter().flat_map(|c| c.iter().copied()).collect();
        ensure!(flat == items, "chunks of ({n},{s}) reorder or lose items");
        Ok(chunks.iter().map(|c| c.len()).collect())
    };
    ensure!(sizes(500, 50)? == vec![50; 10], "(500,50)");
    ensure!(sizes(501, 50)? == [vec![50; 10], vec![1]].concat(), "(501,50)");
    ensure!(sizes(499, 50)? == [vec![50; 9], vec![49]].concat(), "(499,50)");
    ensure!(sizes(49, 50)? == vec![49], "(49,50)");
    ensure!(sizes(50, 50)? == vec![50], "(50,50)");
    ensure!(sizes(0, 50)?.is_empty(), "(0,50)");
    ensure!(sizes(7, 1)? == vec![1; 7], "(7,1)");
    ensure!(sizes(10, 3)? == vec![3, 3, 3, 1], "(10,3)");
    ensure!(chunk_evidence(&[1, 2], 0).is_err(), "s = 0 accepted");
    Ok("(500,50) -> 10x50; ragged and degenerate cases exact".into())
}

// ---------------------------------------------------------------------------
// Weak labels

/// Independent predicate: contiguous token match, case-insensitive.
fn oracle_contains(text: &str, phrase: &str) -> bool {
    let t = oracle_tokens(text);
    let p = oracle_tokens(phrase);
    !p.is_empty() && t.windows(p.len()).any(|w| w == p.as_slice())
}

async fn weak_labels() -> Outcome {
    const ENTITIES: &[&str] = &["Pink Floyd", "Syd Barrett", "John Updike", "Neymar", "Jack Nicholson", "Santos"];
    const ANSWERS: &[&str] = &["David Gilmour", "Rabbit at Rest", "1990", "Left winger", "James L Brooks", "Roger Waters"];
    const FILLER: &[&str] = &["joined", "band", "novel", "the", "club", "film", "year", "award", "in", "of", "played"];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let corpus: Vec<Evidence> = (0..WEAK_LABEL_CORPUS)
        .map(|i| {
            let mut parts: Vec<&str> = (0..rng.random_range(3..12)).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
            for _ in 0..rng.random_range(0..3) {
                let pool = if rng.random_bool(0.5) { ENTITIES } else { ANSWERS };
                parts.insert(rng.random_range(0..=parts.len()), pool.choose(&mut rng).unwrap());
            }
            // near-misses that must not count
            if rng.random_bool(0.1) {
                parts.push("Floydian");
            }
            Evidence::new(format!("w{i}"), EvidenceKind::Text, parts.join(" "))
        })
        .collect();
    let by_id: HashMap<&str, &Evidence> = corpus.iter().map(|e| (e.evidence_id.as_str(), e)).collect();
    let assignment = assign_ids(corpus.iter().map(|e| e.evidence_id.as_str()), 9).map_err(|e| e.to_string())?;
    let rows: Vec<RetrievedRow> = corpus
        .iter()
        .map(|e| RetrievedRow {
            evidence_id: e.evidence_id.clone(),
            display_id: assignment.display_of(&e.evidence_id).unwrap(),
            kind: e.kind,
            text: e.text.clone(),
            score: 0.0,
        })
        .collect();
    let (mut labelled, mut records, mut missed) = (0usize, 0usize, 0usize);
    for (q, ans) in ANSWERS.iter().enumerate() {
        let entities = vec![ENTITIES[q].to_string(), ENTITIES[(q + 1) % ENTITIES.len()].to_string()];
        let gold = g(ans);
        let recs = mine_erf_sft("question", &rows, 50, &entities, &gold).map_err(|e| e.to_string())?;
        records += recs.len();
        let mut emitted = HashSet::new();
        for r in &recs {
            for d in r.chosen.split(", ") {
                let eid = assignment.evidence_of(d).ok_or(format!("unknown id {d}"))?;
                let e = by_id[eid];
                let ok = entities.iter().any(|x| oracle_contains(&e.text, x)) && oracle_contains(&e.text, ans);
                ensure!(ok, "{d} ({eid}) labelled positive: `{}`", e.text);
                ensure!(r.prompt.contains(&format!("{d}: ")), "{d} not in its chunk prompt");
                emitted.insert(eid.to_string());
                labelled += 1;
            }
        }
        // completeness: every evidence meeting the predicate was labelled
        for e in &corpus {
            let expected = entities.iter().any(|x| oracle_contains(&e.text, x)) && oracle_contains(&e.text, ans);
            ensure!(expected == is_weak_positive(e, &entities, &gold), "predicate disagrees on {}", e.evidence_id);
            if expected && !emitted.contains(&e.evidence_id) {
                missed += 1;
            }
        }
    }
    ensure!(missed == 0, "{missed} positives left unlabelled");
    ensure!(labelled > 0, "fixture produced no positives");
    Ok(format!("{WEAK_LABEL_CORPUS} evidence, {records} chunk records, {labelled} labels, 0 violations"))
}

// ---------------------------------------------------------------------------
// End to end

async fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = demo::write_demo(dir.path()).await.map_err(|e| e.to_string())?;
    let config = PipelineConfig::load(&files.config).map_err(|e| e.to_string())?;
    ensure!(config.backend == Backend::Scripted, "demo config must use the scripted backend");
    let bench = convqa_core::orchestrator::load_benchmark(&files.benchmark).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let pipeline = Pipeline::from_config(config.clone()).map_err(|e| e.to_string())?;
        let run = pipeline.run_benchmark(&bench, HistoryMode::Gold).await.map_err(|e| e.to_string())?;
        let (mut jsonl, mut report) = (Vec::new(), Vec::new());
        write_jsonl(&run.records, &mut jsonl).map_err(|e| e.to_string())?;
        write_report(&run.report, &mut report).map_err(|e| e.to_string())?;
        let mut last: BTreeMap<String, String> = BTreeMap::new();
        for r in &run.records {
            last.insert(r.conv_id.clone(), r.answers.first().cloned().unwrap_or_default());
        }
        outputs.push((jsonl, report, last));
    }
    ensure!(outputs[0].0 == outputs[1].0, "run JSONL differs between runs");
    ensure!(outputs[0].1 == outputs[1].1, "report differs between runs");
    let last = &outputs[0].2;
    for (conv, answer) in [("updike", "1990"), ("nicholson", "James L. Brooks"), ("neymar", "Left winger, forward")] {
        ensure!(last.get(conv).map(String::as_str) == Some(answer), "{conv} ended with {:?}", last.get(conv));
    }
    Ok(format!(
        "byte-identical run ({} bytes) and report; final answers 1990 / James L. Brooks / Left winger, forward",
        outputs[0].0.len()
    ))
}

// ---------------------------------------------------------------------------
// Datasets

async fn dataset_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = demo::write_demo(&dir.path().join("demo")).await.map_err(|e| e.to_string())?;
    let config = PipelineConfig::load(&files.config).map_err(|e| e.to_string())?;
    let pipeline = Pipeline::from_config(config).map_err(|e| e.to_string())?;
    let bench = convqa_core::orchestrator::load_benchmark(&files.benchmark).map_err(|e| e.to_string())?;
    let mut log = pipeline.run_sampling(&bench).await.records;
    log.push(figure_record().await?);
    let mut records = mine_log(&log, MinerConfig::default()).map_err(|e| e.to_string())?;
    // awkward strings survive the trip
    records.push(PreferenceRecord::sft(Task::Ag, "line\nbreak \"quoted\" \\ tab\t", "Júnior ✓"));
    records.extend(PreferenceRecord::dpo(Task::Qu, "p", "a\u{0}b", "a b"));
    ensure!(records.iter().any(|r| r.kind == RecordKind::Dpo && r.task == Task::Erf), "no ERF pairs mined");
    ensure!(records.iter().any(|r| r.kind == RecordKind::Dpo && r.task == Task::Qu), "no QU pairs mined");

    let out = dir.path().join("data");
    std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    let manifest = emit_datasets(&records, &out, Some(pipeline.config_hash())).map_err(|e| e.to_string())?;
    let (back_manifest, back) = read_datasets(&out).map_err(|e| e.to_string())?;
    ensure!(back_manifest == manifest, "manifest changed");
    fn multiset(rs: &[PreferenceRecord]) -> BTreeMap<&PreferenceRecord, usize> {
        let mut m = BTreeMap::new();
        for r in rs {
            *m.entry(r).or_default() += 1;
        }
        m
    }
    ensure!(multiset(&records) == multiset(&back), "record multiset changed");
    let dpo = back.iter().filter(|r| r.kind == RecordKind::Dpo).count();
    ensure!(
        back.iter().filter(|r| r.kind == RecordKind::Dpo).all(|r| r.rejected.as_deref() != Some(r.chosen.as_str())),
        "a DPO record has chosen = rejected"
    );
    ensure!(PreferenceRecord::dpo(Task::Erf, "p", "id-1", "id-1").is_none(), "self pair constructed");
    Ok(format!("{} records ({dpo} DPO) re-parsed identically", back.len()))
}

// ---------------------------------------------------------------------------
// Live endpoint, opt-in

async fn live_smoke() -> Outcome {
    let Ok(endpoint) = std::env::var("CONVQA_LIVE_ENDPOINT") else {
        return Ok("SKIP: set CONVQA_LIVE_ENDPOINT, optionally CONVQA_LIVE_MODEL and CONVQA_LIVE_KEY_ENV".into());
    };
    let config = PipelineConfig {
        backend: Backend::Http,
        endpoint: Some(endpoint),
        model: std::env::var("CONVQA_LIVE_MODEL").unwrap_or_else(|_| "default".into()),
        api_key_env: std::env::var("CONVQA_LIVE_KEY_ENV").ok(),
        ..demo::config()
    };
    let index = CorpusIndex::build(demo::corpus(), config.bm25).map_err(|e| e.to_string())?;
    let gateway = config.gateway().map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(config, index, gateway, demo::few_shots()).map_err(|e| e.to_string())?;
    let conv = demo::conversations().into_iter().find(|c| c.conv_id == "neymar").unwrap();
    let r = pipeline.run_turn(&conv, 3).await.map_err(|e| e.to_string())?;
    let t = &r.trace;
    ensure!(t.reformulation.is_some() && t.erf.is_some() && t.answers.is_some(), "trace incomplete");
    ensure!(!t.retrieved_ids.is_empty() && !t.qu_prompt.is_empty(), "trace incomplete");
    Ok(format!(
        "rewrite {:?}, {} selected, answers {:?}, {:?}",
        t.reformulation.as_deref().unwrap_or(""),
        t.selected.len(),
        t.answers.as_deref().unwrap_or(&[]),
        t.timings_ms
    ))
}

#[tokio::main]
async fn main() -> std::process::ExitCode {
    let checks: Vec<(&str, Check)> = vec![
        ("bm25-oracle-equivalence", Box::pin(bm25_oracle())),
        ("metric-oracle-suite", Box::pin(metric_oracle())),
        ("worked-example-golden", Box::pin(figure_golden())),
        ("erf-set-construction", Box::pin(erf_guarantees())),
        ("chunking", Box::pin(chunking())),
        ("weak-label-soundness", Box::pin(weak_labels())),
        ("end-to-end-determinism", Box::pin(end_to_end())),
        ("dataset-round-trip", Box::pin(dataset_round_trip())),
        ("live-endpoint-smoke", Box::pin(live_smoke())),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check.await {
            Ok(detail) if detail.starts_with("SKIP") => println!("SKIP {name}{}", &detail[4..]),
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed == 0 {
        std::process::ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        std::process::ExitCode::FAILURE
    }
}
