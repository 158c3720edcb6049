//! Command-line front end. Every artifact-producing command writes its
//! outputs, the effective config and a manifest under `--out`.
//!
//! Set `SUTRA_QUIET=1` to suppress the plain-text tables on stdout.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_parallel_corpus, build_qa_corpus, generate_kb, make_languages, read_qa_jsonl, write_qa_jsonl,
    ParallelCorpus, Split,
};
use crate::error::{Error, Result};
use crate::eval::{alignment_report, consistency_eval, fertility_eval, perplexity};
use crate::model::{count_params, load_checkpoint, ModelConfig, SutraPipeline};
use crate::tokenizer::{merge_vocabs, train as train_tokenizer, Algorithm, TokenizerModel};
use crate::training::{train_phase1, train_phase2, train_phase3, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "sutra", version, about = "Desk-scale multilingual mixture-of-experts language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train, merge and measure tokenizers.
    #[command(subcommand)]
    Tokenizer(TokenizerCommand),
    /// Generate synthetic corpora.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Run one training phase.
    Train(TrainArgs),
    /// Evaluate a checkpoint or tokenizers.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Translate or answer with a trained pipeline (greedy decoding).
    Generate(GenerateArgs),
    /// Total and active parameter counts of a model config.
    Params(ParamsArgs),
}

#[derive(Subcommand, Debug)]
enum TokenizerCommand {
    /// Learn a BPE vocabulary from corpus sentences.
    Train(TokenizerTrainArgs),
    /// Extend a base tokenizer with the pieces of another.
    Merge(TokenizerMergeArgs),
    /// Compare token counts of two tokenizers per language.
    Fertility(FertilityArgs),
}

#[derive(Args, Debug, Serialize)]
struct TokenizerTrainArgs {
    /// Corpus directory written by `corpus generate`.
    #[arg(long)]
    corpus: PathBuf,
    /// Languages to train on (default: all).
    #[arg(long, value_delimiter = ',')]
    langs: Vec<String>,
    /// Target size counting the 256 byte pieces, excluding special tokens.
    #[arg(long)]
    vocab_size: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TokenizerMergeArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    extension: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FertilityArgs {
    /// Reference tokenizer.
    #[arg(long)]
    base: PathBuf,
    /// Tokenizer compared against the reference.
    #[arg(long)]
    other: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum CorpusCommand {
    /// Knowledge base rendered into parallel sentences and QA items.
    Generate(CorpusArgs),
}

#[derive(Args, Debug, Serialize)]
struct CorpusArgs {
    /// Number of languages; the first is the Latin-script pivot.
    #[arg(long)]
    langs: usize,
    #[arg(long)]
    statements: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    split: Vec<f64>,
    /// QA items (default: a tenth of the statements).
    #[arg(long)]
    qa_items: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    phase: u8,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory (phases 1 and 2).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// QA file (phase 3; default `<corpus>/qa.jsonl`).
    #[arg(long)]
    qa: Option<PathBuf>,
    /// Checkpoint to continue from. Phase 1 may start fresh instead.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Tokenizer for a fresh pipeline.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Model config for a fresh pipeline: `desk`, `paper` or a JSON file.
    #[arg(long, default_value = "desk")]
    model_config: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    monolingual: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Perplexity of the concept model on pivot sentences.
    Perplexity(EvalArgs),
    /// Cross-lingual similarity and retrieval of encoder outputs.
    Alignment(EvalArgs),
    /// Per-language QA accuracy and the gap between languages.
    Consistency(ConsistencyArgs),
    /// Same as `tokenizer fertility`.
    Fertility(FertilityArgs),
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ConsistencyArgs {
    #[arg(long)]
    model: PathBuf,
    /// QA JSONL file.
    #[arg(long)]
    qa: PathBuf,
    /// Languages to score (default: every pipeline language).
    #[arg(long, value_delimiter = ',')]
    langs: Vec<String>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    from: String,
    #[arg(long)]
    to: String,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// `desk`, `paper` or a JSON model config file.
    #[arg(long, default_value = "desk")]
    config: String,
    /// Also write `params.json` and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Runs one invocation; `argv` excludes the program name. Returns the exit
/// code: 0 success, 1 validation or runtime failure, 2 usage error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = std::iter::once(OsString::from("sutra"))
        .chain(argv.into_iter().map(Into::into))
        .collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args[1..].iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            1
        }
    }
}

fn quiet() -> bool {
    std::env::var("SUTRA_QUIET").is_ok_and(|v| !v.is_empty() && v != "0")
}

fn say(text: &str) {
    if !quiet() {
        print!("{text}");
        if !text.ends_with('\n') {
            println!();
        }
    }
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::Tokenizer(TokenizerCommand::Train(a)) => tokenizer_train(a, argv),
        Command::Tokenizer(TokenizerCommand::Merge(a)) => tokenizer_merge(a, argv),
        Command::Tokenizer(TokenizerCommand::Fertility(a)) | Command::Eval(EvalCommand::Fertility(a)) => {
            fertility_cmd(a, argv)
        }
        Command::Corpus(CorpusCommand::Generate(a)) => corpus_generate(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(EvalCommand::Perplexity(a)) => eval_perplexity(a, argv),
        Command::Eval(EvalCommand::Alignment(a)) => eval_alignment(a, argv),
        Command::Eval(EvalCommand::Consistency(a)) => eval_consistency(a, argv),
        Command::Generate(a) => generate_cmd(a),
        Command::Params(a) => params_cmd(a, argv),
    }
}

/// Collects the pieces of one output directory and writes them together
/// with `config.json` and `manifest.json`.
struct Outputs {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            written: Vec::new(),
        })
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.note(name);
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }

    /// Records a file some other writer put into the directory.
    fn note(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    fn finish(mut self, argv: &[String], config: &Value, seeds: Value) -> Result<()> {
        let config_text = serde_json::to_string_pretty(config)? + "\n";
        self.write("config.json", &config_text)?;
        let inputs: BTreeMap<String, String> = self
            .inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), hash_path(p)?)))
            .collect::<Result<_>>()?;
        let outputs: BTreeMap<String, String> = self
            .written
            .iter()
            .filter(|n| n.as_str() != "manifest.json")
            .map(|n| Ok((n.clone(), hash_path(&self.dir.join(n))?)))
            .collect::<Result<_>>()?;
        let manifest = json!({
            "tool": "sutra",
            "version": env!("CARGO_PKG_VERSION"),
            "argv": argv,
            "config_sha256": hex::encode(Sha256::digest(config_text.as_bytes())),
            "seeds": seeds,
            "inputs": inputs,
            "outputs": outputs,
        });
        self.write_json("manifest.json", &manifest)
    }
}

/// SHA-256 of a file, or of every file under a directory in name order.
fn hash_path(p: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if p.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|e| e.is_file())
            .collect();
        names.sort();
        for f in names {
            h.update(f.file_name().unwrap_or_default().to_string_lossy().as_bytes());
            h.update(std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
        }
    } else {
        h.update(std::fs::read(p).map_err(|e| Error::io(p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn to_value(v: &impl Serialize) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn corpus_texts(corpus: &ParallelCorpus, langs: &[String], split: Split) -> Result<Vec<(String, Vec<String>)>> {
    let langs: Vec<String> = if langs.is_empty() { corpus.langs.clone() } else { langs.to_vec() };
    langs
        .into_iter()
        .map(|l| {
            if !corpus.langs.contains(&l) {
                return Err(Error::Config(format!("language {l} absent from corpus {:?}", corpus.langs)));
            }
            let t = corpus.texts(&l, split);
            Ok((l, t))
        })
        .collect()
}

fn tokenizer_train(a: TokenizerTrainArgs, argv: &[String]) -> Result<()> {
    let corpus = ParallelCorpus::read_jsonl(&a.corpus)?;
    let texts: Vec<String> = corpus_texts(&corpus, &a.langs, a.split.into())?
        .into_iter()
        .flat_map(|(_, t)| t)
        .collect();
    let tok = train_tokenizer(&texts, a.vocab_size, Algorithm::Bpe)?;
    let mut out = Outputs::new(&a.out)?;
    out.input(&a.corpus);
    tok.save(&out.path("tokenizer.json"))?;
    out.note("tokenizer.json");
    say(&format!("tokenizer: {} pieces", tok.vocab_size()));
    out.finish(argv, &to_value(&a)?, json!({}))
}

fn tokenizer_merge(a: TokenizerMergeArgs, argv: &[String]) -> Result<()> {
    let base = TokenizerModel::load(&a.base)?;
    let ext = TokenizerModel::load(&a.extension)?;
    let merged = merge_vocabs(&base, &ext)?;
    let mut out = Outputs::new(&a.out)?;
    out.input(&a.base);
    out.input(&a.extension);
    merged.save(&out.path("tokenizer.json"))?;
    out.note("tokenizer.json");
    say(&format!(
        "merged: {} + {} -> {} pieces",
        base.vocab_size(),
        ext.vocab_size(),
        merged.vocab_size()
    ));
    out.finish(argv, &to_value(&a)?, json!({}))
}

fn fertility_cmd(a: FertilityArgs, argv: &[String]) -> Result<()> {
    let base = TokenizerModel::load(&a.base)?;
    let other = TokenizerModel::load(&a.other)?;
    let corpus = ParallelCorpus::read_jsonl(&a.corpus)?;
    let texts = corpus_texts(&corpus, &[], a.split.into())?;
    let base_name = a.base.display().to_string();
    let other_name = a.other.display().to_string();
    let report = fertility_eval((&base_name, &base), (&other_name, &other), &texts);
    let mut out = Outputs::new(&a.out)?;
    out.input(&a.base);
    out.input(&a.other);
    out.input(&a.corpus);
    let table = report.to_table();
    out.write_json("fertility.json", &report)?;
    out.write("fertility.txt", &table)?;
    say(&table);
    out.finish(argv, &to_value(&a)?, json!({}))
}

fn corpus_generate(a: CorpusArgs, argv: &[String]) -> Result<()> {
    if a.langs < 2 {
        return Err(Error::Config(format!("--langs must be at least 2, got {}", a.langs)));
    }
    let specs = make_languages(a.langs);
    let kb = generate_kb(a.seed, a.statements)?;
    let split: [f64; 3] = a.split.clone().try_into().map_err(|_| Error::Config("--split needs three values".into()))?;
    let corpus = build_parallel_corpus(&kb, &specs, split, a.seed)?;
    let n_qa = a.qa_items.unwrap_or((a.statements / 10).max(1));
    let qa = build_qa_corpus(&kb, &specs, n_qa, a.seed)?;
    let mut out = Outputs::new(&a.out)?;
    corpus.write_jsonl(&a.out)?;
    for s in Split::ALL {
        out.note(&format!("parallel.{}.jsonl", s.name()));
    }
    write_qa_jsonl(&qa, &out.path("qa.jsonl"))?;
    out.note("qa.jsonl");
    out.write_json("languages.json", &specs)?;
    say(&format!(
        "corpus: {} statements x {} languages, {} QA items",
        corpus.items.len(),
        corpus.langs.len(),
        qa.len()
    ));
    let seed = a.seed;
    out.finish(argv, &to_value(&a)?, json!({ "corpus": seed }))
}

fn model_config(spec: &str) -> Result<ModelConfig> {
    match spec {
        "desk" | "paper" => ModelConfig::named(spec),
        path => {
            let p = Path::new(path);
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let cfg: ModelConfig = serde_json::from_str(&text)?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn effective_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut v: Value = serde_json::from_str(&text)?;
            // Defaults follow the requested phase unless the file sets them.
            let defaults = to_value(&TrainConfig::for_phase(a.phase))?;
            if let (Value::Object(m), Value::Object(d)) = (&mut v, defaults) {
                for (k, dv) in d {
                    m.entry(k).or_insert(dv);
                }
            }
            serde_json::from_value::<TrainConfig>(v)?
        }
        None => TrainConfig::for_phase(a.phase),
    };
    cfg.phase = a.phase;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.monolingual {
        cfg.monolingual = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> Result<()> {
    let cfg = effective_train_config(&a)?;
    let mut out = Outputs::new(&a.out)?;
    let corpus = match &a.corpus {
        Some(dir) => {
            out.input(dir);
            Some(ParallelCorpus::read_jsonl(dir)?)
        }
        None => None,
    };
    let need_corpus = || {
        corpus
            .as_ref()
            .ok_or_else(|| Error::Config(format!("phase {} needs --corpus", cfg.phase)))
    };
    let mut p = match (&a.model, &a.tokenizer) {
        (Some(ckpt), _) => {
            out.input(ckpt);
            load_checkpoint(ckpt)?
        }
        (None, Some(tok_path)) if cfg.phase == 1 => {
            out.input(tok_path);
            let tok = TokenizerModel::load(tok_path)?;
            let langs = need_corpus()?.langs.clone();
            let mut mc = model_config(&a.model_config)?;
            mc.vocab_size = tok.vocab_size();
            mc.n_languages = langs.len();
            SutraPipeline::new(mc, tok, langs)?
        }
        _ => {
            return Err(Error::Config(format!(
                "phase {} needs --model (phase 1 may pass --tokenizer instead)",
                cfg.phase
            )))
        }
    };
    let report = match cfg.phase {
        1 => {
            let pivot = p.langs[0].clone();
            let texts = need_corpus()?.texts(&pivot, Split::Train);
            train_phase1(&cfg, &texts, &mut p, Some(&a.out))?
        }
        2 => train_phase2(&cfg, need_corpus()?, &mut p, Some(&a.out))?,
        _ => {
            let qa_path = match (&a.qa, &a.corpus) {
                (Some(q), _) => q.clone(),
                (None, Some(dir)) => dir.join("qa.jsonl"),
                (None, None) => return Err(Error::Config("phase 3 needs --qa or --corpus".into())),
            };
            out.input(&qa_path);
            let qa = read_qa_jsonl(&qa_path)?;
            train_phase3(&cfg, &qa, &mut p, Some(&a.out))?
        }
    };
    for entry in std::fs::read_dir(&a.out).map_err(|e| Error::io(&a.out, e))? {
        let name = entry.map_err(|e| Error::io(&a.out, e))?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ckpt") {
            out.note(&name);
        }
    }
    let table = report.to_table(20);
    out.write_json("report.json", &report)?;
    out.write("report.txt", &table)?;
    say(&table);
    let config = json!({ "train": cfg, "model": p.config, "langs": p.langs });
    out.finish(argv, &config, json!({ "train": cfg.seed, "model": p.config.seed }))
}

fn eval_perplexity(a: EvalArgs, argv: &[String]) -> Result<()> {
    let p = load_checkpoint(&a.model)?;
    let corpus = ParallelCorpus::read_jsonl(&a.corpus)?;
    let split: Split = a.split.into();
    let texts = corpus.texts(&p.langs[0], split);
    let ppl = perplexity(&p, &texts)?;
    let report = json!({
        "lang": p.langs[0],
        "split": split.name(),
        "sentences": texts.len(),
        "perplexity": ppl,
    });
    let mut out = Outputs::new(&a.out)?;
    out.input(&a.model);
    out.input(&a.corpus);
    out.write_json("perplexity.json", &report)?;
    say(&format!("perplexity ({} {}): {ppl:.4}", p.langs[0], split.name()));
    out.finish(argv, &to_value(&a)?, json!({}))
}

fn eval_alignment(a: EvalArgs, argv: &[String]) -> Result<()> {
    let p = load_checkpoint(&a.model)?;
    let corpus = ParallelCorpus::read_jsonl(&a.corpus)?;
    let report = alignment_report(&p, &corpus, a.split.into())?;
    let mut out = Outputs::new(&a.out)?;
    out.input(&a.model);
    out.input(&a.corpus);
    let table = report.to_table();
    out.write_json("alignment.json", &report)?;
    out.write("alignment.txt", &table)?;
    say(&table);
    out.finish(argv, &to_value(&a)?, json!({}))
}

fn eval_consistency(a: ConsistencyArgs, argv: &[String]) -> Result<()> {
    let p = load_checkpoint(&a.model)?;
    let items = read_qa_jsonl(&a.qa)?;
    let langs: Vec<String> = if a.langs.is_empty() { p.langs.clone() } else { a.langs.clone() };
    let lang_refs: Vec<&str> = langs.iter().map(String::as_str).collect();
    let report = consistency_eval(&p, &items, &lang_refs)?;
    let mut out = Outputs::new(&a.out)?;
    out.input(&a.model);
    out.input(&a.qa);
    let table = report.to_table();
    out.write_json("consistency.json", &report)?;
    out.write("consistency.txt", &table)?;
    say(&table);
    out.finish(argv, &to_value(&a)?, json!({}))
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let p = load_checkpoint(&a.model)?;
    let text = p.generate(&a.text, &a.from, &a.to, a.max_len)?;
    println!("{text}");
    Ok(())
}

fn params_cmd(a: ParamsArgs, argv: &[String]) -> Result<()> {
    let cfg = model_config(&a.config)?;
    let report = count_params(&cfg);
    let shapes = cfg.param_shapes()?;
    let enumerated: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if enumerated != report.total.total {
        return Err(Error::Shape(format!(
            "closed-form total {} disagrees with {} enumerated parameters",
            report.total.total, enumerated
        )));
    }
    let table = report.to_table();
    say(&table);
    if let Some(dir) = &a.out {
        let mut out = Outputs::new(dir)?;
        out.write_json("params.json", &json!({ "counts": report, "enumerated_total": enumerated }))?;
        out.write("params.txt", &table)?;
        out.finish(argv, &to_value(&cfg)?, json!({ "model": cfg.seed }))?;
    }
    Ok(())
}
