//! Corpus ingestion and BM25 retrieval.
//!
//! Tokenization is deliberately plain: lowercase, split on anything that is
//! not alphanumeric, no stemming, no stopwords. Scores use
//!
//! ```text
//! idf(t)     = ln((N - df + 0.5) / (df + 0.5) + 1)
//! score(d,q) = Σ_{t ∈ unique(q)} idf(t) · tf·(k1+1) / (tf + k1·(1 - b + b·|d|/avgdl))
//! ```
//!
//! Every document is ranked, including those scoring zero, so a query
//! returns `min(n, N)` results. Ties keep corpus insertion order.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::datamodel::{contains_gold, Evidence, EvidenceKind, GoldAnswer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::invalid(format!("k1 must be positive, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::invalid(format!("b must be in [0, 1], got {}", self.b)));
        }
        Ok(())
    }

    pub fn idf(&self, doc_count: usize, df: usize) -> f64 {
        let (n, df) = (doc_count as f64, df as f64);
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn term_weight(&self, tf: u32, doc_len: u32, avg_doc_len: f64) -> f64 {
        let tf = tf as f64;
        let norm = if avg_doc_len > 0.0 {
            doc_len as f64 / avg_doc_len
        } else {
            0.0
        };
        tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * norm))
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Query tokens with duplicates removed, first occurrence order.
pub fn query_terms(query: &str) -> Vec<String> {
    let mut seen = Vec::new();
    for t in tokenize(query) {
        if !seen.contains(&t) {
            seen.push(t);
        }
    }
    seen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexData {
    documents: Vec<Evidence>,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    params: Bm25Params,
}

/// Immutable BM25 index over an evidence corpus.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    data: IndexData,
    by_id: HashMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEvidence {
    pub evidence: Evidence,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Outcome of a query. `empty_query` is set when tokenization left nothing
/// to score, which is distinct from a query that simply matched nothing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retrieval {
    pub hits: Vec<ScoredEvidence>,
    pub empty_query: bool,
}

const MAGIC: &[u8; 4] = b"CQIX";
const FORMAT_VERSION: u8 = 1;

impl CorpusIndex {
    pub fn build(corpus: impl IntoIterator<Item = Evidence>, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        let mut documents = Vec::new();
        let mut by_id = HashMap::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::new();
        for evidence in corpus {
            if evidence.text.trim().is_empty() {
                return Err(Error::invalid(format!(
                    "evidence `{}` has empty text",
                    evidence.evidence_id
                )));
            }
            let doc = u32::try_from(documents.len())
                .map_err(|_| Error::invalid("corpus exceeds u32::MAX documents"))?;
            if by_id.insert(evidence.evidence_id.clone(), doc).is_some() {
                return Err(Error::DuplicateEvidence(evidence.evidence_id));
            }
            let tokens = tokenize(&evidence.text);
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting { doc, tf });
            }
            documents.push(evidence);
        }
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let avg_doc_length =
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / documents.len() as f64;
        Ok(Self {
            data: IndexData {
                documents,
                postings,
                doc_lengths,
                avg_doc_length,
                params,
            },
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.data.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.documents.is_empty()
    }

    pub fn params(&self) -> Bm25Params {
        self.data.params
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.data.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.data.doc_lengths
    }

    pub fn documents(&self) -> &[Evidence] {
        &self.data.documents
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.data.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.data.postings.len()
    }

    pub fn get(&self, evidence_id: &str) -> Option<&Evidence> {
        self.by_id
            .get(evidence_id)
            .map(|&d| &self.data.documents[d as usize])
    }

    /// Scores every document against the query (dense, by insertion order).
    pub fn score_all(&self, terms: &[String]) -> Vec<f64> {
        let d = &self.data;
        let mut scores = vec![0.0; d.documents.len()];
        for term in terms {
            let list = self.postings(term);
            if list.is_empty() {
                continue;
            }
            let idf = d.params.idf(d.documents.len(), list.len());
            for p in list {
                scores[p.doc as usize] +=
                    idf * d.params.term_weight(p.tf, d.doc_lengths[p.doc as usize], d.avg_doc_length);
            }
        }
        scores
    }

    pub fn retrieve(&self, query: &str, n: usize) -> Retrieval {
        let terms = query_terms(query);
        if terms.is_empty() {
            return Retrieval {
                hits: Vec::new(),
                empty_query: true,
            };
        }
        let scores = self.score_all(&terms);
        let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        let n = n.min(idx.len());
        if n == 0 {
            return Retrieval::default();
        }
        if n < idx.len() {
            idx.select_nth_unstable_by(n - 1, order);
            idx.truncate(n);
        }
        idx.sort_unstable_by(order);
        let hits = idx
            .into_iter()
            .enumerate()
            .map(|(r, d)| ScoredEvidence {
                evidence: self.data.documents[d].clone(),
                score: scores[d],
                rank: r + 1,
            })
            .collect();
        Retrieval {
            hits,
            empty_query: false,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[FORMAT_VERSION])?;
        bincode::serialize_into(&mut w, &self.data)
            .map_err(|e| Error::IndexFormat(e.to_string()))?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 5];
        r.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(Error::IndexFormat("not an index file".into()));
        }
        if header[4] != FORMAT_VERSION {
            return Err(Error::IndexFormat(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header[4]
            )));
        }
        let data: IndexData =
            bincode::deserialize_from(r).map_err(|e| Error::IndexFormat(e.to_string()))?;
        if data.documents.len() != data.doc_lengths.len() || data.documents.is_empty() {
            return Err(Error::IndexFormat("inconsistent document table".into()));
        }
        let by_id = data
            .documents
            .iter()
            .enumerate()
            .map(|(i, e)| (e.evidence_id.clone(), i as u32))
            .collect();
        Ok(Self { data, by_id })
    }
}

/// True iff some evidence in the list contains some gold alias.
pub fn answer_presence<'a>(
    evidence: impl IntoIterator<Item = &'a Evidence>,
    gold: &[GoldAnswer],
) -> bool {
    evidence.into_iter().any(|e| contains_gold(e, gold))
}

/// One line of a corpus file. KG facts and table rows may give `fields`
/// instead of `text`; they are comma-joined.
#[derive(Debug, Clone, Deserialize)]
struct CorpusRecord {
    evidence_id: String,
    kind: EvidenceKind,
    #[serde(default)]
    text: String,
    #[serde(default)]
    fields: Vec<String>,
    #[serde(default)]
    source: String,
    #[serde(default)]
    entities: Vec<String>,
}

pub fn linearize(fields: &[String]) -> String {
    fields
        .iter()
        .map(|f| f.trim())
        .filter(|f| !f.is_empty())
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn read_corpus(reader: impl BufRead) -> Result<Vec<Evidence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("corpus line {}: {e}", i + 1)))?;
        let text = if rec.text.trim().is_empty() {
            linearize(&rec.fields)
        } else {
            rec.text
        };
        out.push(Evidence {
            evidence_id: rec.evidence_id,
            kind: rec.kind,
            text,
            source: rec.source,
            entities: rec.entities,
        });
    }
    Ok(out)
}

pub fn write_corpus(corpus: &[Evidence], mut w: impl Write) -> Result<()> {
    for e in corpus {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
