//! A small self-contained dataset: three example conversations, a corpus
//! that covers them plus distractors, rewriting demonstrations, and a
//! rule-based responder that plays the language model so fixtures can be
//! recorded without a live endpoint.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::datamodel::{text_contains, Conversation, Evidence, EvidenceKind, GoldAnswer, Turn};
use crate::error::Result;
use crate::gateway::{Gateway, RecordingChatModel, ScriptedChatModel};
use crate::orchestrator::{write_jsonl, Backend, HistoryMode, Pipeline, PipelineConfig};
use crate::qu::FewShot;
use crate::retrieval::{write_corpus, CorpusIndex};

struct DemoTurn {
    question: &'static str,
    rewrite: &'static str,
    answer: &'static str,
    aliases: &'static [&'static str],
    entities: &'static [&'static str],
    wrong: &'static str,
}

struct DemoConversation {
    id: &'static str,
    domain: &'static str,
    turns: &'static [DemoTurn],
}

const CONVERSATIONS: &[DemoConversation] = &[
    DemoConversation {
        id: "updike",
        domain: "books",
        turns: &[
            DemoTurn {
                question: "What number of Pulitzers has John Updike won?",
                rewrite: "How many Pulitzer Prizes has John Updike won?",
                answer: "2",
                aliases: &["two"],
                entities: &["John Updike", "Pulitzer Prize"],
                wrong: "1",
            },
            DemoTurn {
                question: "What book won the author the award first?",
                rewrite: "Which book first won John Updike the Pulitzer Prize?",
                answer: "Rabbit Is Rich",
                aliases: &[],
                entities: &["John Updike", "Pulitzer Prize"],
                wrong: "Rabbit, Run",
            },
            DemoTurn {
                question: "name of the other?",
                rewrite: "Which other book won John Updike the Pulitzer Prize?",
                answer: "Rabbit at Rest",
                aliases: &[],
                entities: &["John Updike", "Pulitzer Prize"],
                wrong: "Couples",
            },
            DemoTurn {
                question: "publication year of the book?",
                rewrite: "What is the publication year of the book \"Rabbit at Rest\" by John Updike?",
                answer: "1990",
                aliases: &[],
                entities: &["Rabbit at Rest", "John Updike"],
                wrong: "1981",
            },
        ],
    },
    DemoConversation {
        id: "nicholson",
        domain: "movies",
        turns: &[
            DemoTurn {
                question: "What was Jack Nicholson's last film of the 1990s?",
                rewrite: "What was Jack Nicholson's last film of the 1990s?",
                answer: "As Good as It Gets",
                aliases: &[],
                entities: &["Jack Nicholson"],
                wrong: "Mars Attacks!",
            },
            DemoTurn {
                question: "Who directed?",
                rewrite: "Who directed the film \"As Good as It Gets\" starring Jack Nicholson?",
                answer: "James L. Brooks",
                aliases: &["James Brooks"],
                entities: &["As Good as It Gets", "Jack Nicholson"],
                wrong: "Mark Andrus",
            },
        ],
    },
    DemoConversation {
        id: "neymar",
        domain: "soccer",
        turns: &[
            DemoTurn {
                question: "On which date was the soccer player Neymar born?",
                rewrite: "On which date was the soccer player Neymar born?",
                answer: "5 February 1992",
                aliases: &["February 5, 1992"],
                entities: &["Neymar"],
                wrong: "5 February 1990",
            },
            DemoTurn {
                question: "Complete name?",
                rewrite: "What is the complete name of the soccer player Neymar?",
                answer: "Neymar da Silva Santos Júnior",
                aliases: &["Neymar Jr"],
                entities: &["Neymar"],
                wrong: "Neymar Santos",
            },
            DemoTurn {
                question: "How tall?",
                rewrite: "How tall is the soccer player Neymar?",
                answer: "5 ft 9 in",
                aliases: &["1.75 m"],
                entities: &["Neymar"],
                wrong: "6 ft 1 in",
            },
            DemoTurn {
                question: "Position at which he plays?",
                rewrite: "What position does Neymar play in soccer?",
                answer: "Left winger, forward",
                aliases: &["Left winger", "forward"],
                entities: &["Neymar"],
                wrong: "Attacking midfielder",
            },
        ],
    },
];

/// (id, kind, text, source, entities)
const CORPUS: &[(&str, EvidenceKind, &str, &str, &[&str])] = &[
    ("updike-pulitzer-count", EvidenceKind::Text, "John Updike is one of only four writers to have won the Pulitzer Prize for Fiction more than once; he won it 2 times.", "wikipedia", &["John Updike", "Pulitzer Prize"]),
    ("updike-rich", EvidenceKind::KgFact, "John Updike, award received, Pulitzer Prize for Fiction, point in time, 1982, for work, Rabbit Is Rich", "wikidata", &["John Updike", "Pulitzer Prize", "Rabbit Is Rich"]),
    ("updike-rest-prize", EvidenceKind::KgFact, "John Updike, award received, Pulitzer Prize for Fiction, point in time, 1991, for work, Rabbit at Rest", "wikidata", &["John Updike", "Pulitzer Prize", "Rabbit at Rest"]),
    ("updike-nbcc", EvidenceKind::KgFact, "John Updike, award received, National Book Critics Circle Award, point in time, 1990, for work, Rabbit at Rest", "wikidata", &["John Updike", "Rabbit at Rest"]),
    ("rest-date", EvidenceKind::KgFact, "Rabbit at Rest, Publication date, 1990", "wikidata", &["Rabbit at Rest"]),
    ("rest-novel", EvidenceKind::Text, "Rabbit at Rest is a 1990 novel by John Updike", "wikipedia", &["Rabbit at Rest", "John Updike"]),
    ("rabbit-run", EvidenceKind::Text, "Rabbit, Run is a 1960 novel by John Updike and the first of the Rabbit series", "wikipedia", &["Rabbit, Run", "John Updike"]),
    ("couples", EvidenceKind::Text, "Couples is a 1968 novel by John Updike set in a small Massachusetts town", "wikipedia", &["Couples", "John Updike"]),
    ("updike-born", EvidenceKind::TableRow, "John Updike, Born, March 18, 1932, Shillington, Pennsylvania", "infobox", &["John Updike"]),
    ("pulitzer-general", EvidenceKind::Text, "The Pulitzer Prize is awarded for achievements in newspaper journalism, literature and musical composition", "wikipedia", &["Pulitzer Prize"]),
    ("nicholson-films", EvidenceKind::TableRow, "Jack Nicholson filmography, 1997, As Good as It Gets, Melvin Udall", "wikipedia", &["Jack Nicholson", "As Good as It Gets"]),
    ("nicholson-mars", EvidenceKind::TableRow, "Jack Nicholson filmography, 1996, Mars Attacks!, President James Dale", "wikipedia", &["Jack Nicholson", "Mars Attacks!"]),
    ("nicholson-last-90s", EvidenceKind::Text, "The last film of the 1990s starring Jack Nicholson was As Good as It Gets, released in December 1997", "wikipedia", &["Jack Nicholson", "As Good as It Gets"]),
    ("agaig-film", EvidenceKind::Text, "As Good as It Gets is a 1997 American romantic comedy film directed by James L. Brooks from a screenplay he co-wrote with Mark Andrus.", "wikipedia", &["As Good as It Gets", "James L. Brooks"]),
    ("agaig-review", EvidenceKind::Text, "James L. Brooks and Jack Nicholson, doing what they do best, combine smart dialogue and flawless acting", "review", &["James L. Brooks", "Jack Nicholson"]),
    ("agaig-director", EvidenceKind::KgFact, "As Good as It Gets, director, James L. Brooks", "wikidata", &["As Good as It Gets", "James L. Brooks"]),
    ("agaig-writer", EvidenceKind::KgFact, "As Good as It Gets, screenwriter, Mark Andrus", "wikidata", &["As Good as It Gets", "Mark Andrus"]),
    ("nicholson-born", EvidenceKind::TableRow, "Jack Nicholson, Born, April 22, 1937, Neptune City, New Jersey", "infobox", &["Jack Nicholson"]),
    ("shining", EvidenceKind::Text, "The Shining is a 1980 horror film directed by Stanley Kubrick and starring Jack Nicholson", "wikipedia", &["The Shining", "Jack Nicholson"]),
    ("neymar-born", EvidenceKind::TableRow, "Neymar, Personal information, Date of birth, 5 February 1992, Mogi das Cruzes, Brazil", "infobox", &["Neymar"]),
    ("neymar-name", EvidenceKind::TableRow, "Neymar, Personal information, Full name, Neymar da Silva Santos Júnior", "infobox", &["Neymar"]),
    ("neymar-height", EvidenceKind::TableRow, "Neymar, Personal information, Height, 5 ft 9 in", "infobox", &["Neymar"]),
    ("neymar-position", EvidenceKind::TableRow, "Neymar, Personal information, Position(s), Left winger , attacking midfielder , forward", "infobox", &["Neymar"]),
    ("neymar-best", EvidenceKind::Text, "At the 2013 Confederations Cup Neymar was voted the Best player and Best Forward", "wikipedia", &["Neymar"]),
    ("neymar-goals", EvidenceKind::Text, "List of international goals scored by Neymar, Neymar is a Brazilian professional footballer who plays as a forward.", "wikipedia", &["Neymar"]),
    ("neymar-santos", EvidenceKind::Text, "Neymar joined Santos in 2003 and made his professional debut for the club in 2009", "wikipedia", &["Neymar", "Santos"]),
    ("pele", EvidenceKind::Text, "Pele, born 23 October 1940, is a Brazilian footballer widely regarded as one of the greatest players", "wikipedia", &["Pele"]),
    ("ronaldinho", EvidenceKind::TableRow, "Ronaldinho, Personal information, Position(s), Attacking midfielder , forward", "infobox", &["Ronaldinho"]),
    ("maracana", EvidenceKind::Text, "The Maracana stadium in Rio de Janeiro hosted the 2014 World Cup final", "wikipedia", &["Maracana"]),
    ("brooks-born", EvidenceKind::TableRow, "James L. Brooks, Born, May 9, 1940, Brooklyn, New York", "infobox", &["James L. Brooks"]),
];

const FEW_SHOTS: &[(&str, &str, &str)] = &[
    ("Q: Who wrote Pride and Prejudice? A: Jane Austen", "When was it published?", "When was Pride and Prejudice by Jane Austen published?"),
    ("Q: Which club does Lionel Messi play for? A: Inter Miami", "Where is the stadium?", "Where is the stadium of Inter Miami, the club of Lionel Messi?"),
    ("", "Who composed the music for Star Wars?", "Who composed the music for Star Wars?"),
    ("Q: Who painted the Mona Lisa? A: Leonardo da Vinci\nQ: Where was he born? A: Vinci", "And when did he die?", "When did Leonardo da Vinci die?"),
    ("Q: Which band recorded Abbey Road? A: The Beatles", "drummer?", "Who was the drummer of The Beatles?"),
];

pub fn conversations() -> Vec<Conversation> {
    CONVERSATIONS
        .iter()
        .map(|c| Conversation {
            conv_id: c.id.into(),
            domain: c.domain.into(),
            turns: c
                .turns
                .iter()
                .enumerate()
                .map(|(i, t)| Turn {
                    index: i,
                    question: t.question.into(),
                    gold_answers: vec![GoldAnswer::with_aliases(t.answer, t.aliases.iter().copied())],
                    question_entities: t.entities.iter().map(|e| e.to_string()).collect(),
                    observed_answer: None,
                })
                .collect(),
        })
        .collect()
}

pub fn corpus() -> Vec<Evidence> {
    CORPUS
        .iter()
        .map(|(id, kind, text, source, ents)| {
            Evidence::new(*id, *kind, *text)
                .with_source(*source)
                .with_entities(ents.iter().copied())
        })
        .collect()
}

pub fn few_shots() -> Vec<FewShot> {
    FEW_SHOTS
        .iter()
        .map(|(h, q, r)| FewShot {
            history: h.to_string(),
            question: q.to_string(),
            rewrite: r.to_string(),
        })
        .collect()
}

/// Pipeline settings sized for the demo corpus.
pub fn config() -> PipelineConfig {
    PipelineConfig {
        n: 30,
        k: 3,
        s: 10,
        erf_samples: 2,
        seed: 42,
        ..PipelineConfig::default()
    }
}

fn last_question(prompt: &str) -> &str {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Question: "))
        .unwrap_or("")
        .trim()
}

fn find_turn(text: &str) -> Option<&'static DemoTurn> {
    CONVERSATIONS
        .iter()
        .flat_map(|c| c.turns)
        .find(|t| t.question == text || t.rewrite == text)
}

fn gold_phrases(t: &DemoTurn) -> impl Iterator<Item = &str> {
    std::iter::once(t.answer).chain(t.aliases.iter().copied())
}

fn relevant(t: &DemoTurn, text: &str) -> bool {
    gold_phrases(t).any(|a| text_contains(text, a)) && t.entities.iter().any(|e| text_contains(text, e))
}

/// Plays the model for the demo conversations: rewrites from the table,
/// evidence filtering by answer and entity mentions, and answers that are
/// right only when the evidence supports them. Unknown prompts get `None`.
pub fn respond(task: &str, user_prompt: &str) -> Option<Vec<String>> {
    let asked = last_question(user_prompt);
    let turn = find_turn(asked)?;
    // an incomplete question is misunderstood even with good evidence
    let ambiguous = asked == turn.question && turn.question != turn.rewrite;
    match task {
        "qu" => Some(vec![turn.rewrite.into(), turn.question.into(), turn.rewrite.into()]),
        "erf" => {
            let rows: Vec<(&str, &str)> = user_prompt
                .lines()
                .filter_map(|l| l.split_once(": "))
                .filter(|(id, _)| id.starts_with("id-"))
                .collect();
            let good: Vec<&str> = rows.iter().filter(|(_, t)| relevant(turn, t)).map(|(id, _)| *id).collect();
            let greedy = if good.is_empty() { "none".to_string() } else { good.join(", ") };
            let first = rows.first().map(|(id, _)| id.to_string()).unwrap_or_else(|| "none".into());
            Some(vec![greedy.clone(), first, greedy])
        }
        "ag" => {
            let evidence: Vec<&str> = user_prompt
                .lines()
                .filter_map(|l| l.split_once(". ").filter(|(n, _)| n.parse::<usize>().is_ok()))
                .map(|(_, t)| t)
                .collect();
            if !ambiguous && evidence.iter().any(|e| gold_phrases(turn).any(|a| text_contains(e, a))) {
                Some(vec![turn.answer.into(), turn.wrong.into()])
            } else {
                Some(vec![turn.wrong.into(), turn.answer.into()])
            }
        }
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct DemoFiles {
    pub dir: PathBuf,
    pub corpus: PathBuf,
    pub benchmark: PathBuf,
    pub few_shots: PathBuf,
    pub fixtures: PathBuf,
    pub config: PathBuf,
}

/// Writes the demo inputs to `dir` and records fixtures by running both the
/// benchmark and the sampling pass against [`respond`].
pub async fn write_demo(dir: &Path) -> Result<DemoFiles> {
    fs::create_dir_all(dir)?;
    let files = DemoFiles {
        dir: dir.to_path_buf(),
        corpus: dir.join("corpus.jsonl"),
        benchmark: dir.join("benchmark.jsonl"),
        few_shots: dir.join("few_shots.jsonl"),
        fixtures: dir.join("fixtures.jsonl"),
        config: dir.join("config.toml"),
    };
    write_corpus(&corpus(), BufWriter::new(fs::File::create(&files.corpus)?))?;
    write_jsonl(&conversations(), BufWriter::new(fs::File::create(&files.benchmark)?))?;
    write_jsonl(&few_shots(), BufWriter::new(fs::File::create(&files.few_shots)?))?;

    let mut config = config();
    let recorder = Arc::new(RecordingChatModel::new(respond));
    let pipeline = Pipeline::new(
        config.clone(),
        CorpusIndex::build(corpus(), config.bm25)?,
        Gateway::new(recorder.clone(), config.in_flight),
        few_shots(),
    )?;
    let bench = crate::datamodel::Benchmark {
        conversations: conversations(),
        skipped: Vec::new(),
    };
    pipeline.run_benchmark(&bench, HistoryMode::Gold).await?;
    pipeline.run_benchmark(&bench, HistoryMode::Predicted).await?;
    pipeline.run_sampling(&bench).await;
    let recorded: ScriptedChatModel = recorder.recorded();
    recorded.write_jsonl(BufWriter::new(fs::File::create(&files.fixtures)?))?;

    config.backend = Backend::Scripted;
    config.corpus = Some(files.corpus.clone());
    config.few_shots = Some(files.few_shots.clone());
    config.fixtures = Some(files.fixtures.clone());
    let text = toml::to_string_pretty(&config).map_err(|e| crate::Error::invalid(e.to_string()))?;
    fs::write(&files.config, text)?;
    Ok(files)
}
