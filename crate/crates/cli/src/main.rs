use std::fs;
use std::io::{BufReader, BufWriter};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use convqa_core::mining::{emit_datasets, mine_log, read_sampling_log, MinerConfig, RecordKind, Task};
use convqa_core::orchestrator::{
    load_benchmark, read_jsonl, report_from_records, write_jsonl, write_report, Backend, HistoryMode, Pipeline,
    PipelineConfig, RunRecord,
};
use convqa_core::retrieval::{read_corpus, CorpusIndex};
use convqa_core::{demo, server};

#[derive(Parser)]
#[command(name = "convqa", version, about = "Conversational QA pipeline and preference-data miner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index from a corpus file.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Where to write the index.
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer every turn of a benchmark and write a run file and report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Report file (JSON). The table is always printed.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum)]
        history: Option<History>,
    },
    /// Sample rewrites, selections and answers for mining.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        history: Option<History>,
    },
    /// Mine SFT and DPO datasets from a sampling log.
    Mine {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = convqa_core::mining::DEFAULT_PAIR_CAP)]
        dpo_cap: usize,
    },
    /// Recompute metrics from a run file.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve the session API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write the bundled example data, fixtures and config to a directory.
    Demo {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum History {
    Gold,
    Predicted,
}

impl From<History> for HistoryMode {
    fn from(h: History) -> Self {
        match h {
            History::Gold => HistoryMode::Gold,
            History::Predicted => HistoryMode::Predicted,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Scripted,
    Http,
}

/// Settings shared by the pipeline verbs. Flags override the config file.
#[derive(Args, Default)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    few_shots: Option<PathBuf>,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    x: Option<usize>,
    #[arg(long)]
    beam_size: Option<u32>,
    #[arg(long)]
    erf_samples: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    in_flight: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            )*};
        }
        macro_rules! set_opt {
            ($($field:ident),*) => {$(
                if self.$field.is_some() {
                    c.$field = self.$field.clone();
                }
            )*};
        }
        set!(model, temperature, n, k, s, x, beam_size, erf_samples, seed, in_flight, workers);
        set_opt!(corpus, index, few_shots, fixtures, endpoint, api_key_env);
        if let Some(b) = self.backend {
            c.backend = match b {
                BackendArg::Scripted => Backend::Scripted,
                BackendArg::Http => Backend::Http,
            };
        }
        if let Some(k1) = self.k1 {
            c.bm25.k1 = k1;
        }
        if let Some(b) = self.b {
            c.bm25.b = b;
        }
        c.validate()?;
        Ok(c)
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn report_skipped(skipped: &[(usize, String)]) -> ExitCode {
    if skipped.is_empty() {
        return ExitCode::SUCCESS;
    }
    for (line, reason) in skipped {
        eprintln!("skipped benchmark line {line}: {reason}");
    }
    ExitCode::from(2)
}

async fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest { common, out } => {
            let config = common.config()?;
            let corpus_path = config.corpus.as_ref().context("--corpus is required")?;
            let corpus = read_corpus(BufReader::new(fs::File::open(corpus_path)?))?;
            let index = CorpusIndex::build(corpus, config.bm25)?;
            index.write_to(create(&out)?)?;
            println!("indexed {} evidence into {}", index.len(), out.display());
        }
        Command::Run {
            common,
            benchmark,
            out,
            report,
            history,
        } => {
            let config = common.config()?;
            let history = history.map_or(config.history, HistoryMode::from);
            let bench = load_benchmark(&benchmark)?;
            let pipeline = Pipeline::from_config(config)?;
            let run = pipeline.run_benchmark(&bench, history).await?;
            write_jsonl(&run.records, create(&out)?)?;
            if let Some(p) = report {
                write_report(&run.report, create(&p)?)?;
            }
            print!("{}", run.report);
            if run.failed_turns() > 0 {
                eprintln!("{} turns failed", run.failed_turns());
            }
            return Ok(report_skipped(&run.skipped));
        }
        Command::Sample {
            common,
            benchmark,
            out,
            history,
        } => {
            if common.seed.is_none() {
                bail!("sample needs an explicit --seed");
            }
            let mut config = common.config()?;
            if let Some(h) = history {
                config.history = h.into();
            }
            if config.history == HistoryMode::Predicted {
                log::warn!("sampling uses gold history for earlier turns");
            }
            let bench = load_benchmark(&benchmark)?;
            let pipeline = Pipeline::from_config(config)?;
            let run = pipeline.run_sampling(&bench).await;
            write_jsonl(&run.records, create(&out)?)?;
            println!(
                "sampled {} turns, {} rewrites",
                run.records.len(),
                run.records.iter().map(|r| r.samples.len()).sum::<usize>()
            );
            for f in &run.failures {
                eprintln!("failed: {f}");
            }
            if !run.failures.is_empty() {
                return Ok(ExitCode::from(1));
            }
            return Ok(report_skipped(&run.skipped));
        }
        Command::Mine { log, out_dir, dpo_cap } => {
            let records = read_sampling_log(BufReader::new(fs::File::open(&log)?))?;
            let mined = mine_log(&records, MinerConfig { pair_cap: dpo_cap })?;
            fs::create_dir_all(&out_dir)?;
            let hash = records.first().map(|r| r.config_hash.as_str());
            let manifest = emit_datasets(&mined, &out_dir, hash)?;
            for task in Task::ALL {
                println!(
                    "{:<4} sft {:>6}  dpo {:>6}",
                    task.as_str(),
                    manifest.count(task, RecordKind::Sft),
                    manifest.count(task, RecordKind::Dpo)
                );
            }
        }
        Command::Eval { run, report } => {
            let records: Vec<RunRecord> = read_jsonl(BufReader::new(fs::File::open(&run)?))?;
            let r = report_from_records(&records)?;
            if let Some(p) = report {
                write_report(&r, create(&p)?)?;
            }
            print!("{r}");
        }
        Command::Serve { common, addr } => {
            let pipeline = Pipeline::from_config(common.config()?)?;
            server::serve(pipeline, addr).await?;
        }
        Command::Demo { dir } => {
            let files = demo::write_demo(&dir).await?;
            println!("wrote demo data to {}", files.dir.display());
            println!("try: convqa run --config {} --benchmark {} --out run.jsonl", files.config.display(), files.benchmark.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
