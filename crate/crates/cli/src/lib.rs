//! `ocrrestore` command-line pipeline.
//!
//! Every subcommand reads documented file formats and writes its outputs,
//! the resolved configuration (`config.toml`) and a manifest
//! (`manifest.json`) into `--out`.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use ocrrestore::corpus::{clean_text, load_gt_table, Alphabet, Engine, TokenStream, Window};
use ocrrestore::embedding::{train_sgns, NeighborSource, NeighborTable};
use ocrrestore::encoding::{make_batches, BatchSource, PairBatches};
use ocrrestore::errorgen::{train_error_generator, Corruptor, GeneratorModel};
use ocrrestore::eval::{audit_tsv, evaluate_run};
use ocrrestore::lexicon::load_wordlist;
use ocrrestore::models::checkpoint::{embedding_from_bytes, embedding_to_bytes, load_checkpoint_of, model_to_bytes};
use ocrrestore::models::correct::correct_tokens_with;
use ocrrestore::models::{train_corrector, BeamCorrector, Corrector, IdentityCorrector, ModelKind};
use ocrrestore::pairgen::{build_correct_list, extract_pairs, format_pairs, parse_pairs, ParallelPair};
use ocrrestore::{rng, Error};
use serde_json::json;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.into(),
        }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::EvenWindow(_) | Error::InvalidConfig(_) => EXIT_USAGE,
            e if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ocrrestore", version, about = "Unsupervised OCR post-correction")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Odd context window size.
    #[arg(long, global = true)]
    pub window: Option<usize>,
    #[arg(long = "noise-rate", global = true)]
    pub noise_rate: Option<f64>,
    /// TESSERACT, OLD or FR11.
    #[arg(long, global = true)]
    pub engine: Option<String>,
    /// Apply lexicon fallback and v-to-w post-processing.
    #[arg(long, global = true, overrides_with = "no_post")]
    pub post: bool,
    #[arg(long = "no-post", global = true, overrides_with = "post")]
    pub no_post: bool,
    /// Beam width for correction.
    #[arg(long, global = true)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct Inputs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub neighbors: Option<PathBuf>,
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize raw text into a token stream (`--input`).
    Clean(#[command(flatten)] Inputs),
    /// Train skip-gram embeddings on a token stream (`--corpus`).
    TrainEmbeddings(#[command(flatten)] Inputs),
    /// Extract (error, correct) pairs from embedding neighbors
    /// (`--embeddings` or `--neighbors`, and `--lexicon`).
    ExtractPairs {
        #[command(flatten)]
        inputs: Inputs,
        /// Pair errors only with the anchor word.
        #[arg(long)]
        anchor_only: bool,
    },
    /// Train the GRU error generator on a pairs file (`--pairs`).
    TrainGenerator(#[command(flatten)] Inputs),
    /// Corrupt a token stream with random edits or a generator.
    Corrupt {
        #[command(flatten)]
        inputs: Inputs,
        /// Also write a ground-truth table with one independently
        /// corrupted column per engine.
        #[arg(long)]
        gt_table: bool,
    },
    /// Train the transformer corrector on a clean corpus (`--corpus`),
    /// corrupting with `--generator` or random edits, or on `--pairs`.
    TrainCorrector(#[command(flatten)] Inputs),
    /// Correct an OCR token stream (`--corpus`) with `--model`.
    Correct(#[command(flatten)] Inputs),
    /// Score a model (or the identity, without `--model`) on `--gt`.
    Evaluate(#[command(flatten)] Inputs),
}

/// Parses `args` (including the program name) and runs; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("OCRRESTORE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn resolve_config(common: &Common, inputs: Option<&Inputs>) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.threads {
        cfg.threads = v;
    }
    if let Some(v) = common.window {
        cfg.window = v;
    }
    if let Some(v) = common.noise_rate {
        cfg.noise_rate = v;
    }
    if let Some(v) = &common.engine {
        cfg.engine = Some(v.clone());
    }
    if let Some(v) = common.beam {
        cfg.beam = v;
    }
    if common.post {
        cfg.post = true;
    }
    if common.no_post {
        cfg.post = false;
    }
    if let Some(i) = inputs {
        let p = &mut cfg.paths;
        for (slot, flag) in [
            (&mut p.input, &i.input),
            (&mut p.corpus, &i.corpus),
            (&mut p.gt, &i.gt),
            (&mut p.lexicon, &i.lexicon),
            (&mut p.pairs, &i.pairs),
            (&mut p.embeddings, &i.embeddings),
            (&mut p.neighbors, &i.neighbors),
            (&mut p.generator, &i.generator),
            (&mut p.model, &i.model),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
    }
    cfg.resolve()
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::usage(format!("missing required --{flag}")))
}

fn read_bytes(p: &Path) -> CliResult<Vec<u8>> {
    fs::read(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

/// Collects outputs and writes them with the manifest.
struct Run {
    out: PathBuf,
    command: &'static str,
    config: RunConfig,
    inputs: Vec<serde_json::Value>,
    outputs: Vec<serde_json::Value>,
    notes: serde_json::Map<String, serde_json::Value>,
}

impl Run {
    fn new(common: &Common, command: &'static str, config: RunConfig) -> CliResult<Self> {
        let out = common
            .out
            .clone()
            .ok_or_else(|| CliError::usage("missing required --out"))?;
        fs::create_dir_all(&out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
        if config.threads > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build_global()
            {
                info!("thread pool already configured: {e}");
            }
        }
        Ok(Self {
            out,
            command,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: serde_json::Map::new(),
        })
    }

    fn input(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = read_bytes(path)?;
        self.inputs.push(json!({
            "path": path.file_name().map(|n| n.to_string_lossy().into_owned()),
            "digest": format!("{:016x}", rng::digest(&bytes)),
        }));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, bytes).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        self.outputs.push(json!({
            "path": name,
            "digest": format!("{:016x}", rng::digest(bytes)),
        }));
        Ok(p)
    }

    fn note(&mut self, key: &str, value: serde_json::Value) {
        self.notes.insert(key.to_string(), value);
    }

    fn finish(mut self) -> CliResult<()> {
        let config = self.config.to_toml();
        self.write("config.toml", config.as_bytes())?;
        let manifest = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.seed,
            "threads": self.config.threads,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "notes": self.notes,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let p = self.out.join("manifest.json");
        fs::write(&p, text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
    }
}

fn stream_from(run: &mut Run, path: &Path) -> CliResult<TokenStream> {
    let bytes = run.input(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::data(format!("{} is not UTF-8", path.display())))?;
    Ok(clean_text(&text, &Alphabet::finnish()))
}

fn load_generator(run: &mut Run, path: &Path) -> CliResult<GeneratorModel> {
    run.input(path)?;
    Ok(GeneratorModel::new(load_checkpoint_of(path, ModelKind::GruGenerator)?)?)
}

fn engine_of(cfg: &RunConfig) -> CliResult<Engine> {
    let name = cfg
        .engine
        .as_deref()
        .ok_or_else(|| CliError::usage("missing required --engine"))?;
    Engine::parse(name).ok_or_else(|| CliError::usage(format!("unknown engine {name:?}")))
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let Cli { common, command } = cli;
    match command {
        Command::Clean(i) => clean(&common, &i),
        Command::TrainEmbeddings(i) => train_embeddings(&common, &i),
        Command::ExtractPairs { inputs, anchor_only } => extract(&common, &inputs, anchor_only),
        Command::TrainGenerator(i) => train_generator(&common, &i),
        Command::Corrupt { inputs, gt_table } => corrupt(&common, &inputs, gt_table),
        Command::TrainCorrector(i) => train_corrector_cmd(&common, &i),
        Command::Correct(i) => correct(&common, &i),
        Command::Evaluate(i) => evaluate(&common, &i),
    }
}

fn clean(common: &Common, i: &Inputs) -> CliResult<()> {
    let cfg = resolve_config(common, Some(i))?;
    let input = require(&cfg.paths.input, "input")?.to_path_buf();
    let mut run = Run::new(common, "clean", cfg)?;
    let stream = stream_from(&mut run, &input)?;
    run.note("tokens", json!(stream.len()));
    run.write("tokens.txt", stream.to_text().as_bytes())?;
    run.finish()
}

fn train_embeddings(common: &Common, i: &Inputs) -> CliResult<()> {
    let cfg = resolve_config(common, Some(i))?;
    let corpus = require(&cfg.paths.corpus, "corpus")?.to_path_buf();
    let sgns = cfg.embedding.clone();
    let mut run = Run::new(common, "train-embeddings", cfg)?;
    let stream = stream_from(&mut run, &corpus)?;
    let model = train_sgns(&stream, &sgns)?;
    run.note("vocabulary", json!(model.words().len()));
    run.write("embeddings.ckpt", &embedding_to_bytes(&model))?;
    run.write("neighbors.tsv", model.export_neighbors(10)?.as_bytes())?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (e, l) in model.loss_history.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", e + 1, l));
    }
    run.write("loss_history.csv", csv.as_bytes())?;
    run.finish()
}

fn extract(common: &Common, i: &Inputs, anchor_only: bool) -> CliResult<()> {
    let mut cfg = resolve_config(common, Some(i))?;
    if anchor_only {
        cfg.extraction.anchor_only = true;
    }
    let lexicon_path = require(&cfg.paths.lexicon, "lexicon")?.to_path_buf();
    let extraction = cfg.extraction.clone();
    let embeddings = cfg.paths.embeddings.clone();
    let neighbors = cfg.paths.neighbors.clone();
    let mut run = Run::new(common, "extract-pairs", cfg)?;
    run.input(&lexicon_path)?;
    let lex = load_wordlist(&lexicon_path, &Alphabet::finnish())?;
    if lex.rejected > 0 {
        warn!("{} wordlist entries dropped", lex.rejected);
    }
    let source: Box<dyn NeighborSource> = match (embeddings, neighbors) {
        (Some(p), _) => Box::new(embedding_from_bytes(&run.input(&p)?)?),
        (None, Some(p)) => {
            let bytes = run.input(&p)?;
            let text = String::from_utf8(bytes).map_err(|_| CliError::data(format!("{} is not UTF-8", p.display())))?;
            Box::new(NeighborTable::parse(&text, &p.display().to_string())?)
        }
        (None, None) => return Err(CliError::usage("missing required --embeddings or --neighbors")),
    };
    let correct = build_correct_list(source.as_ref(), &lex);
    let pairs = extract_pairs(source.as_ref(), &correct, &lex, &extraction)?;
    run.note("correct_words", json!(correct.len()));
    run.note("pairs", json!(pairs.len()));
    run.write("pairs.tsv", format_pairs(&pairs).as_bytes())?;
    run.finish()
}

fn read_pairs(run: &mut Run, p: &Path) -> CliResult<Vec<ParallelPair>> {
    let bytes = run.input(p)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::data(format!("{} is not UTF-8", p.display())))?;
    Ok(parse_pairs(&text, &p.display().to_string(), &Alphabet::finnish())?)
}

fn train_generator(common: &Common, i: &Inputs) -> CliResult<()> {
    let cfg = resolve_config(common, Some(i))?;
    let pairs_path = require(&cfg.paths.pairs, "pairs")?.to_path_buf();
    let gru = cfg.generator.clone();
    let mut run = Run::new(common, "train-generator", cfg)?;
    // the pairs file lists (error, correct); the generator learns the reverse
    let pairs: Vec<ParallelPair> = read_pairs(&mut run, &pairs_path)?
        .iter()
        .map(ParallelPair::reversed)
        .collect();
    let generator = train_error_generator(&pairs, &gru)?;
    let model = generator.model();
    run.write("loss_history.csv", model.manifest().loss_history_csv().as_bytes())?;
    run.write("generator.ckpt", &model_to_bytes(model))?;
    run.finish()
}

fn corrupt(common: &Common, i: &Inputs, gt_table: bool) -> CliResult<()> {
    let cfg = resolve_config(common, Some(i))?;
    let corpus = require(&cfg.paths.corpus, "corpus")?.to_path_buf();
    let generator_path = cfg.paths.generator.clone();
    let noise = cfg.noise();
    let seed = cfg.seed;
    let mut run = Run::new(common, "corrupt", cfg)?;
    let stream = stream_from(&mut run, &corpus)?;
    let generator = match &generator_path {
        Some(p) => Some(load_generator(&mut run, p)?),
        None => None,
    };
    let corruptor: &dyn Corruptor = match &generator {
        Some(g) => g,
        None => &noise,
    };
    run.note("corruptor", json!(corruptor.describe()));
    let words: Vec<&str> = stream.tokens().iter().map(String::as_str).collect();
    let columns = if gt_table { Engine::ALL.len() } else { 1 };
    let mut corrupted = Vec::with_capacity(columns);
    for c in 0..columns {
        let mut r = rng::stream(seed, &[rng::CORRUPT, c as u64]);
        corrupted.push(corruptor.corrupt_batch(&words, &mut r)?);
    }
    let first = stream.with_tokens(corrupted[0].clone())?;
    run.write("corrupted.txt", first.to_text().as_bytes())?;
    if gt_table {
        let mut table = String::from("GT,TESSERACT,OLD,FR11\n");
        for (k, w) in words.iter().enumerate() {
            table.push_str(&format!(
                "{w},{},{},{}\n",
                corrupted[0][k], corrupted[1][k], corrupted[2][k]
            ));
        }
        run.write("gt_table.csv", table.as_bytes())?;
    }
    if let Some(g) = &generator {
        run.note("generator_fallbacks", json!(g.fallbacks()));
    }
    run.finish()
}

fn train_corrector_cmd(common: &Common, i: &Inputs) -> CliResult<()> {
    let cfg = resolve_config(common, Some(i))?;
    let window = Window::new(cfg.window)?;
    let tcfg = cfg.corrector.clone();
    let noise = cfg.noise();
    let paths = cfg.paths.clone();
    let mut run = Run::new(common, "train-corrector", cfg)?;
    let generator = match &paths.generator {
        Some(p) => Some(load_generator(&mut run, p)?),
        None => None,
    };
    let model = match (&paths.pairs, &paths.corpus) {
        (Some(p), _) => {
            if window.size() != 1 {
                return Err(CliError::usage("training on a pairs file requires --window 1"));
            }
            let pairs = read_pairs(&mut run, p)?;
            let mut batches = PairBatches::new(&pairs, tcfg.batch_size, tcfg.seed)?;
            run.note("data", json!(batches.describe()));
            train_corrector(&mut batches, &tcfg)?
        }
        (None, Some(c)) => {
            let stream = stream_from(&mut run, c)?;
            let corruptor: &dyn Corruptor = match &generator {
                Some(g) => g,
                None => &noise,
            };
            let mut batches = make_batches(&stream, window, corruptor, tcfg.batch_size, tcfg.seed)?;
            run.note("data", json!(batches.describe()));
            train_corrector(&mut batches, &tcfg)?
        }
        (None, None) => return Err(CliError::usage("missing required --corpus or --pairs")),
    };
    if let Some(g) = &generator {
        run.note("generator_fallbacks", json!(g.fallbacks()));
    }
    run.note("stop_reason", json!(model.manifest().stop_reason));
    run.write("loss_history.csv", model.manifest().loss_history_csv().as_bytes())?;
    run.write("corrector.ckpt", &model_to_bytes(&model))?;
    run.finish()
}

fn correct(common: &Common, i: &Inputs) -> CliResult<()> {
    let cfg = resolve_config(common, Some(i))?;
    let window = Window::new(cfg.window)?;
    let model_path = require(&cfg.paths.model, "model")?.to_path_buf();
    let corpus = require(&cfg.paths.corpus, "corpus")?.to_path_buf();
    let beam = cfg.beam;
    let mut run = Run::new(common, "correct", cfg)?;
    run.input(&model_path)?;
    let model = load_checkpoint_of(&model_path, ModelKind::TransformerCorrector)?;
    let stream = stream_from(&mut run, &corpus)?;
    let out = correct_tokens_with(&model, &stream, window, beam)?;
    run.write("corrected.txt", out.to_text().as_bytes())?;
    run.finish()
}

fn evaluate(common: &Common, i: &Inputs) -> CliResult<()> {
    let cfg = resolve_config(common, Some(i))?;
    let window = Window::new(cfg.window)?;
    let engine = engine_of(&cfg)?;
    let gt = require(&cfg.paths.gt, "gt")?.to_path_buf();
    let lexicon_path = require(&cfg.paths.lexicon, "lexicon")?.to_path_buf();
    let model_path = cfg.paths.model.clone();
    let (beam, post, delimiter) = (cfg.beam, cfg.post, cfg.delimiter as u8);
    let mut run = Run::new(common, "evaluate", cfg)?;
    run.input(&gt)?;
    let alphabet = Alphabet::finnish();
    let table = load_gt_table(&gt, delimiter, &alphabet)?;
    for m in &table.malformed {
        warn!("{}:{}: {}", gt.display(), m.line, m.reason);
    }
    run.note("malformed_rows", json!(table.malformed.len()));
    run.note("dropped_blank", json!(table.dropped_blank));
    run.note("dropped_non_alphabet", json!(table.dropped_non_alphabet));
    run.input(&lexicon_path)?;
    let lex = load_wordlist(&lexicon_path, &alphabet)?;
    let model = match &model_path {
        Some(p) => {
            run.input(p)?;
            Some(load_checkpoint_of(p, ModelKind::TransformerCorrector)?)
        }
        None => None,
    };
    let identity = IdentityCorrector(window);
    let beam_corrector;
    let corrector: &dyn Corrector = match &model {
        Some(m) => {
            beam_corrector = BeamCorrector::new(m, beam)?;
            &beam_corrector
        }
        None => &identity,
    };
    let result = evaluate_run(&table.rows, engine, corrector, &lex, window, post)?;
    let report = &result.report;
    print!("{report}");
    run.write("report.txt", report.to_string().as_bytes())?;
    run.write("report.kv", report.to_key_values().as_bytes())?;
    run.write("audit.tsv", audit_tsv(&result.records).as_bytes())?;
    run.finish()
}
