//! P@1, Hit@5, MRR and answer presence at k, overall and per domain.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datamodel::{answer_is_correct, Evidence, GoldAnswer};
use crate::error::{Error, Result};
use crate::retrieval::answer_presence;

pub const HIT_DEPTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub p1: f64,
    pub hit5: f64,
    pub rr: f64,
}

/// Scores a ranked answer list. The whole list is searched for MRR.
pub fn score_turn(answers: &[String], gold: &[GoldAnswer]) -> TurnScore {
    let first = answers.iter().position(|a| answer_is_correct(a, gold));
    match first {
        Some(pos) => TurnScore {
            p1: if pos == 0 { 1.0 } else { 0.0 },
            hit5: if pos < HIT_DEPTH { 1.0 } else { 0.0 },
            rr: 1.0 / (pos + 1) as f64,
        },
        None => TurnScore {
            p1: 0.0,
            hit5: 0.0,
            rr: 0.0,
        },
    }
}

/// Answer presence over each prefix length of an evidence ranking.
pub fn answer_presence_at(
    ranking: &[Evidence],
    gold: &[GoldAnswer],
    ks: &[usize],
) -> BTreeMap<usize, bool> {
    ks.iter()
        .map(|&k| (k, answer_presence(ranking.iter().take(k), gold)))
        .collect()
}

/// Everything the aggregate needs from one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub domain: String,
    pub score: TurnScore,
    pub answer_presence: BTreeMap<usize, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub p_at_1: f64,
    pub hit_at_5: f64,
    pub mrr: f64,
    pub ap_at_k: BTreeMap<usize, f64>,
    pub turn_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p_at_1: f64,
    pub hit_at_5: f64,
    pub mrr: f64,
    pub ap_at_k: BTreeMap<usize, f64>,
    pub per_domain: BTreeMap<String, DomainMetrics>,
    pub turn_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn means<'a>(turns: impl Iterator<Item = &'a TurnOutcome>, ks: &[usize]) -> DomainMetrics {
    let mut count = 0usize;
    let (mut p1, mut hit5, mut rr) = (0.0, 0.0, 0.0);
    let mut ap: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for t in turns {
        count += 1;
        p1 += t.score.p1;
        hit5 += t.score.hit5;
        rr += t.score.rr;
        for (k, hits) in ap.iter_mut() {
            if t.answer_presence[k] {
                *hits += 1;
            }
        }
    }
    let n = count as f64;
    DomainMetrics {
        p_at_1: p1 / n,
        hit_at_5: hit5 / n,
        mrr: rr / n,
        ap_at_k: ap.into_iter().map(|(k, h)| (k, h as f64 / n)).collect(),
        turn_count: count,
    }
}

/// Unweighted means over turns. Every turn must report the same set of k.
pub fn aggregate(turns: &[TurnOutcome]) -> Result<EvalReport> {
    let Some(first) = turns.first() else {
        return Err(Error::invalid("no turns to aggregate"));
    };
    let ks: Vec<usize> = first.answer_presence.keys().copied().collect();
    if turns
        .iter()
        .any(|t| !t.answer_presence.keys().copied().eq(ks.iter().copied()))
    {
        return Err(Error::invalid("turns disagree on the answer-presence depths"));
    }
    let overall = means(turns.iter(), &ks);
    let mut domains: BTreeMap<&str, ()> = BTreeMap::new();
    for t in turns {
        domains.insert(&t.domain, ());
    }
    let per_domain = domains
        .into_keys()
        .map(|d| (d.to_string(), means(turns.iter().filter(|t| t.domain == d), &ks)))
        .collect();
    Ok(EvalReport {
        p_at_1: overall.p_at_1,
        hit_at_5: overall.hit_at_5,
        mrr: overall.mrr,
        ap_at_k: overall.ap_at_k,
        per_domain,
        turn_count: overall.turn_count,
        config_hash: None,
    })
}

/// Aggregate from parallel per-turn inputs.
pub fn aggregate_aligned(
    scores: &[TurnScore],
    domains: &[String],
    rankings: &[Vec<Evidence>],
    gold: &[Vec<GoldAnswer>],
    ks: &[usize],
) -> Result<EvalReport> {
    let n = scores.len();
    if domains.len() != n || rankings.len() != n || gold.len() != n {
        return Err(Error::invalid(format!(
            "misaligned inputs: {n} scores, {} domains, {} rankings, {} gold sets",
            domains.len(),
            rankings.len(),
            gold.len()
        )));
    }
    let turns: Vec<TurnOutcome> = (0..n)
        .map(|i| TurnOutcome {
            domain: domains[i].clone(),
            score: scores[i],
            answer_presence: answer_presence_at(&rankings[i], &gold[i], ks),
        })
        .collect();
    aggregate(&turns)
}

fn write_row(f: &mut fmt::Formatter<'_>, name: &str, m: &DomainMetrics) -> fmt::Result {
    write!(
        f,
        "{name:<14} {:>6} {:>7.3} {:>7.3} {:>7.3}",
        m.turn_count, m.p_at_1, m.hit_at_5, m.mrr
    )?;
    for v in m.ap_at_k.values() {
        write!(f, " {v:>7.3}")?;
    }
    writeln!(f)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<14} {:>6} {:>7} {:>7} {:>7}", "domain", "turns", "P@1", "Hit@5", "MRR")?;
        for k in self.ap_at_k.keys() {
            write!(f, " {:>7}", format!("AP@{k}"))?;
        }
        writeln!(f)?;
        for (d, m) in &self.per_domain {
            write_row(f, if d.is_empty() { "-" } else { d }, m)?;
        }
        let overall = DomainMetrics {
            p_at_1: self.p_at_1,
            hit_at_5: self.hit_at_5,
            mrr: self.mrr,
            ap_at_k: self.ap_at_k.clone(),
            turn_count: self.turn_count,
        };
        write_row(f, "all", &overall)
    }
}
