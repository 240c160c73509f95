//! `precedent` command-line driver.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
//! stage failure, 3 model service transport failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use precedent::corpus::{corpus_stats, load_corpus, save_corpus, CorpusFormat};
use precedent::eval::{read_run, sweep_and_report_by, BestK, Qrels, RunOutput};
use precedent::pipeline::{
    build_indexes, load_indexes, prepare_corpus, run_experiment, save_indexes, text_query,
    ExperimentConfig, Method, Models, Retriever,
};
use precedent::protocol::{run_conformance, SidecarClient, StubModels, StubServer};
use precedent::segmenter::{annotate_corpus, build_role_query, AnnotatorStrategy, RoleConfig};
use precedent::vector::HashingEmbedder;
use precedent::{Error, Result};

#[derive(Parser)]
#[command(name = "precedent", version, about = "Hybrid prior-case retrieval engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and print statistics.
    Ingest(IngestArgs),
    /// Apply an annotator to every document and write the annotated corpus.
    Annotate(AnnotateArgs),
    /// Build lexical and vector indexes into a directory.
    Index(IndexArgs),
    /// Run one ad-hoc query.
    Search(SearchArgs),
    /// Run a full experiment from a config file.
    Run(RunArgs),
    /// Re-score existing run files against qrels.
    Eval(EvalArgs),
    /// Write citation-derived relevance judgments.
    ExportQrels(ExportQrelsArgs),
    /// Check a model service against the wire protocol.
    Conformance(ConformanceArgs),
    /// Serve the deterministic stub models over the wire protocol.
    ServeStub(ServeStubArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    TextDir,
}

impl From<Format> for CorpusFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Jsonl => CorpusFormat::JsonLines,
            Format::TextDir => CorpusFormat::TextDir,
        }
    }
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus file (JSON lines) or directory of .txt files.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: Format,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    /// Print statistics as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnnotateArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long, default_value = "heuristic")]
    strategy: AnnotatorStrategy,
    /// Cue table for the heuristic annotator.
    #[arg(long)]
    cue_table: Option<PathBuf>,
    /// Model service address for the external strategy.
    #[arg(long)]
    endpoint: Option<String>,
    /// Annotated corpus to write (JSON lines).
    #[arg(long, short)]
    output: PathBuf,
}

/// Settings shared by commands that build or use indexes.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's corpus path.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let mut c = ExperimentConfig::default();
                c.apply_env();
                c
            }
        };
        if let Some(corpus) = &self.corpus {
            config.corpus = corpus.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory to write indexes into.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Load indexes from here instead of building them.
    #[arg(long)]
    index_dir: Option<PathBuf>,
    #[arg(long, default_value = "trace_full")]
    method: Method,
    /// Free-text query.
    #[arg(long, conflicts_with = "doc")]
    text: Option<String>,
    /// Use a corpus document as the query.
    #[arg(long, required_unless_present = "text")]
    doc: Option<String>,
    /// Role configuration applied to --doc.
    #[arg(long, default_value = "full")]
    preset: String,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    qrels: PathBuf,
    /// Run files; a file named `<config>.<method>.run` is reported under
    /// that configuration.
    #[arg(long = "run", required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    k_min: usize,
    #[arg(long, default_value_t = 20)]
    k_max: usize,
    #[arg(long, default_value = "f1")]
    best_k: BestK,
    /// Write report.json and report.txt here.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExportQrelsArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    /// Defaults to stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ConformanceArgs {
    #[arg(long)]
    endpoint: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeStubArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    #[arg(long, default_value_t = precedent::vector::DEFAULT_DIMENSION)]
    dimension: usize,
    #[arg(long)]
    max_pair_chars: Option<usize>,
}

fn exit_code(err: &Error) -> u8 {
    if err.is_transport() {
        3
    } else if err.is_validation() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Annotate(a) => annotate(a),
        Command::Index(a) => index(a),
        Command::Search(a) => search(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::ExportQrels(a) => export_qrels(a),
        Command::Conformance(a) => conformance(a),
        Command::ServeStub(a) => serve_stub(a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e {
        Failure::Error(e) => Err(e),
        Failure::Code(c) => Ok(ExitCode::from(c)),
    })
}

/// A command either errors or decides its own non-zero exit.
enum Failure {
    Error(Error),
    Code(u8),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn ingest(a: IngestArgs) -> CmdResult {
    let (corpus, report) = load_corpus(&a.corpus.corpus, a.corpus.format.into())?;
    let stats = corpus_stats(&corpus);
    if a.json {
        let out = serde_json::json!({
            "stats": stats,
            "warnings": report.warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
            "content_hash": corpus.content_hash(),
        });
        println!("{}", serde_json::to_string_pretty(&out).map_err(Error::from)?);
    } else {
        println!("{}", serde_json::to_string_pretty(&stats).map_err(Error::from)?);
        println!("content_hash {}", corpus.content_hash());
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(())
}

fn annotate(a: AnnotateArgs) -> CmdResult {
    let (corpus, _) = load_corpus(&a.corpus.corpus, a.corpus.format.into())?;
    let mut config = ExperimentConfig {
        annotator: a.strategy,
        cue_table: a.cue_table,
        ..ExperimentConfig::default()
    };
    config.scorer.endpoint = a.endpoint;
    config.apply_env();
    let models = Models::from_config(&config)?;
    let annotated = annotate_corpus(&corpus, &models.annotator)?;
    save_corpus(&annotated, &a.output)?;
    let sentences: usize = annotated.iter().map(|d| d.sentences.len()).sum();
    eprintln!(
        "annotated {} documents ({sentences} sentences) with {}",
        annotated.len(),
        a.strategy
    );
    Ok(())
}

fn index(a: IndexArgs) -> CmdResult {
    let config = a.config.resolve()?;
    let models = Models::from_config(&config)?;
    let mut warnings = Vec::new();
    let corpus = prepare_corpus(&config, &models, &mut warnings)?;
    let (indexes, report) = build_indexes(&corpus, &config, models.embedder.as_ref(), &Method::ALL)?;
    save_indexes(&indexes, &corpus, &config, &a.out)?;
    for w in warnings.iter().chain(&report.warnings) {
        eprintln!("warning: {w}");
    }
    eprintln!("indexed {} documents into {}", corpus.len(), a.out.display());
    Ok(())
}

fn search(a: SearchArgs) -> CmdResult {
    let config = a.config.resolve()?;
    let models = Models::from_config(&config)?;
    let mut warnings = Vec::new();
    let corpus = prepare_corpus(&config, &models, &mut warnings)?;
    let indexes = match &a.index_dir {
        Some(dir) => load_indexes(dir, &corpus, &config)?,
        None => build_indexes(&corpus, &config, models.embedder.as_ref(), &[a.method])?.0,
    };
    let query = match (&a.text, &a.doc) {
        (Some(text), _) => text_query("query", text),
        (None, Some(id)) => {
            let doc = corpus.get(id).ok_or_else(|| Error::UnknownDoc(id.clone()))?;
            build_role_query(doc, &RoleConfig::parse(&a.preset)?)?
        }
        (None, None) => unreachable!("clap requires --text or --doc"),
    };
    let retriever = Retriever::new(&corpus, &indexes, &models, &config);
    let mut list = retriever.retrieve(&query, a.method)?;
    list.truncate(a.top);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&list).map_err(Error::from)?);
    } else {
        let stdout = io::stdout();
        let mut out = stdout.lock();
        for e in &list.entries {
            let _ = writeln!(out, "{}\t{}\t{:.6}", e.rank, e.doc_id, e.score);
        }
    }
    Ok(())
}

fn run(a: RunArgs) -> CmdResult {
    let mut config = a.config.resolve()?;
    if let Some(dir) = a.output_dir {
        config.output_dir = dir;
    }
    let artifacts = run_experiment(&config)?;
    print!("{}", artifacts.report.render_table());
    for w in &artifacts.manifest.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("outputs in {}", artifacts.output_dir.display());
    Ok(())
}

fn config_name(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    match name.split_once('.') {
        Some((config, rest)) if rest.contains('.') => config.to_owned(),
        _ => name.trim_end_matches(".run").to_owned(),
    }
}

fn eval(a: EvalArgs) -> CmdResult {
    let qrels = Qrels::load(&a.qrels)?;
    let mut runs = Vec::new();
    for path in &a.runs {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let by_method: BTreeMap<String, _> = read_run(BufReader::new(file))?;
        for (method, lists) in by_method {
            let label = method
                .parse::<Method>()
                .map(|m| m.label().to_owned())
                .unwrap_or(method);
            runs.push(RunOutput {
                config: config_name(path),
                method: label,
                lists,
            });
        }
    }
    let report = sweep_and_report_by(&runs, &qrels, a.k_min..=a.k_max, a.best_k)?;
    print!("{}", report.render_table());
    if let Some(dir) = a.output_dir {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_vec_pretty(&report).map_err(Error::from)?).map_err(io_err(&json))?;
        let text = dir.join("report.txt");
        fs::write(&text, report.render_table()).map_err(io_err(&text))?;
    }
    Ok(())
}

fn export_qrels(a: ExportQrelsArgs) -> CmdResult {
    let (corpus, _) = load_corpus(&a.corpus.corpus, a.corpus.format.into())?;
    let qrels = Qrels::from_corpus(&corpus);
    match &a.output {
        Some(path) => {
            let file = fs::File::create(path).map_err(io_err(path))?;
            qrels.write(io::BufWriter::new(file))?;
        }
        None => qrels.write(io::stdout().lock())?,
    }
    Ok(())
}

fn conformance(a: ConformanceArgs) -> CmdResult {
    let client = SidecarClient::connect(&a.endpoint)?;
    let report = run_conformance(&client);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    } else {
        for c in &report.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            if c.detail.is_empty() {
                println!("{status} {}", c.name);
            } else {
                println!("{status} {}: {}", c.name, c.detail);
            }
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Code(1))
    }
}

fn serve_stub(a: ServeStubArgs) -> CmdResult {
    if a.dimension == 0 {
        return Err(Error::Config("dimension must be positive".into()).into());
    }
    let models = StubModels {
        embedder: HashingEmbedder::new(a.dimension),
        max_pair_chars: a.max_pair_chars,
        ..StubModels::default()
    };
    let server = StubServer::spawn(&a.addr, models)?;
    eprintln!("stub model service listening on {}", server.endpoint());
    server.join();
    Ok(())
}
