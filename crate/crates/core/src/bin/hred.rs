use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hred::corpus::{self, synth, Dialogue, PreprocessConfig, Tokenizer, Vocabulary, EOS_ID};
use hred::eval::{self, DecodeMode, DecodeSettings, EvalReport};
use hred::layers::load_embeddings;
use hred::models::{Checkpoint, DialogueModel, ModelConfig, Summary, Variant};
use hred::ngram::{Method, NgramModel};
use hred::service::{self, Service, ServiceConfig, Settings, SettingsJson};
use hred::training::{
    bootstrap_embeddings, pretrain_finetune, AdamConfig, LogEntry, TrainConfig, TrainError, Trainer, TransferConfig,
};

#[derive(Parser)]
#[command(name = "hred", version, about = "Hierarchical encoder-decoder dialogue models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize a raw script into triples, build the vocabulary and split by movie.
    Preprocess(PreprocessArgs),
    /// Train a neural model on preprocessed triples.
    Train(TrainArgs),
    /// Perplexity and error rate of a checkpoint on a triples file.
    Eval(EvalArgs),
    /// Train and evaluate n-gram baselines.
    Ngram(NgramArgs),
    /// Generate a response to a context with beam search or sampling.
    Sample(SampleArgs),
    /// Run the HTTP chat service.
    Serve(ServeArgs),
    /// Write a synthetic script, Q-A corpus and gazetteer.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Raw script: `SPEAKER<TAB>text` lines, blank lines between dialogues.
    #[arg(long)]
    script: PathBuf,
    /// Optional `question<TAB>answer` corpus for pretraining.
    #[arg(long)]
    qa: Option<PathBuf>,
    /// Names replaced by <person>, one per line.
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    vocab_cap: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    valid_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    RnnLm,
    Hred,
    HredBi,
}

#[derive(Clone, Copy, ValueEnum)]
enum SummaryArg {
    Concat,
    L2pool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "hred")]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "concat")]
    summary: SummaryArg,
    #[arg(long, default_value_t = 32)]
    d_e: usize,
    #[arg(long, default_value_t = 64)]
    d_h: usize,
    #[arg(long, default_value_t = 64)]
    d_c: usize,
    #[arg(long)]
    no_maxout: bool,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 1)]
    valid_every: usize,
    #[arg(long, default_value_t = 80)]
    truncate: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip: Option<f64>,
    /// Stop once validation perplexity is below this.
    #[arg(long)]
    target_ppl: Option<f64>,
    /// Pretrained word vectors (`token v1 ... v_de` per line); trains first
    /// with covered embedding rows frozen.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Epochs of the frozen-embedding stage.
    #[arg(long, default_value_t = 5)]
    stage1_epochs: usize,
    /// Pretrain on `qa.pairs` in the data directory, then finetune with
    /// embeddings fixed.
    #[arg(long)]
    pretrain: bool,
    #[arg(long, default_value_t = 4)]
    pretrain_epochs: usize,
    /// Continue from a `last.ckpt` training state.
    #[arg(long, conflicts_with_all = ["embeddings", "pretrain"])]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ScopeArg {
    Full,
    U3,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Triples file, one dialogue per line.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    scope: ScopeArg,
    /// Also print a human-readable table.
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct NgramArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    /// One method, or `all`.
    #[arg(long, default_value = "modified-kn")]
    method: String,
    /// Split to evaluate on.
    #[arg(long, default_value = "test")]
    split: String,
    /// Save the trained counts (single method only).
    #[arg(long)]
    save: Option<PathBuf>,
    /// Evaluate a saved model instead of training.
    #[arg(long, conflicts_with = "save")]
    load: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Map,
    Sample,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, value_enum, default_value = "map")]
    mode: ModeArg,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
}

impl DecodeArgs {
    fn settings(&self) -> Result<Settings> {
        let j = SettingsJson {
            mode: Some(if self.mode == ModeArg::Map { "map" } else { "sample" }.into()),
            width: Some(self.beam),
            temperature: Some(self.temperature),
            seed: Some(self.seed),
            max_len: Some(self.max_len),
        };
        Ok(Settings::default().apply(&j)?)
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Context utterances, each terminated by `</s>`.
    #[arg(long)]
    context: String,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    /// Number of samples to draw (sample mode).
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    idle_minutes: u64,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    movies: usize,
    #[arg(long, default_value_t = 3)]
    dialogues: usize,
    #[arg(long, default_value_t = 2)]
    exchanges: usize,
    #[arg(long, default_value_t = 2000)]
    qa_pairs: usize,
}

/// Files a command is about to produce; removed again unless the command
/// succeeds.
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn new() -> Self {
        Outputs(Vec::new())
    }
    fn add(&mut self, p: PathBuf) -> PathBuf {
        self.0.push(p.clone());
        p
    }
    fn keep(mut self) {
        self.0.clear();
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn tokenizer(gazetteer: Option<&Path>) -> Result<Tokenizer> {
    match gazetteer {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(Tokenizer::read_gazetteer(BufReader::new(f))?)
        }
        None => Ok(Tokenizer::new()),
    }
}

fn load_vocab(dir: &Path) -> Result<Vocabulary> {
    let p = dir.join("vocab.tsv");
    let f = File::open(&p).with_context(|| format!("opening {}", p.display()))?;
    Ok(Vocabulary::read_tsv(BufReader::new(f))?)
}

fn load_data(p: &Path, vocab: &Vocabulary) -> Result<Vec<Dialogue>> {
    let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
    corpus::read_dataset(BufReader::new(f), vocab).with_context(|| format!("reading {}", p.display()))
}

fn load_checkpoint(p: &Path) -> Result<(Checkpoint, Vocabulary)> {
    let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
    let vocab = service::checkpoint_vocabulary(&ck)?;
    Ok((ck, vocab))
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let script = read(&a.script)?;
    let qa = a.qa.as_deref().map(read).transpose()?;
    let tok = tokenizer(a.gazetteer.as_deref())?;
    let cfg = PreprocessConfig {
        vocab_cap: a.vocab_cap,
        seed: a.seed,
        valid_fraction: a.valid_fraction,
        test_fraction: a.test_fraction,
    };
    let pre = corpus::preprocess(&script, qa.as_deref(), &tok, &cfg)?;
    let mut outs = Outputs::new();
    for name in [
        "vocab.tsv",
        "train.triples",
        "valid.triples",
        "test.triples",
        "qa.pairs",
        "stats.json",
    ] {
        outs.add(a.out.join(name));
    }
    let written = pre
        .write_dir(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    outs.keep();
    for p in written {
        println!("{}", p.display());
    }
    println!("vocab {} tokens, hash {}", pre.vocab.len(), pre.vocab.hash_hex());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let vocab = load_vocab(&a.data)?;
    let train_set = load_data(&a.data.join("train.triples"), &vocab)?;
    let valid_set = load_data(&a.data.join("valid.triples"), &vocab)?;
    fs::create_dir_all(&a.out)?;
    let mut outs = Outputs::new();
    let best_path = outs.add(a.out.join("best.ckpt"));
    let (log_path, last_path) = (a.out.join("train.log"), a.out.join("last.ckpt"));
    // A resumed run appends to the existing log and must never delete the
    // state it resumed from.
    let log_file = if a.resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)?
    } else {
        outs.add(log_path.clone());
        outs.add(last_path.clone());
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(log_file);
    let mut on_log = |e: &LogEntry| {
        let _ = writeln!(log, "{e}");
        let _ = log.flush();
        eprintln!("epoch {}\t{e}", e.epoch);
    };
    let mut save_last = |t: &Trainer| -> hred::training::Result<()> {
        let mut ck = t.to_checkpoint();
        ck.vocab = Some(vocab.tokens().to_vec());
        ck.save(&last_path)?;
        Ok(())
    };

    let variant = match a.variant {
        VariantArg::RnnLm => Variant::RnnLm,
        VariantArg::Hred => Variant::Hred,
        VariantArg::HredBi => Variant::HredBi,
    };
    let summary = match a.summary {
        SummaryArg::Concat => Summary::Concat,
        SummaryArg::L2pool => Summary::L2Pool,
    };
    let config = TrainConfig {
        max_epochs: a.epochs,
        patience: a.patience,
        valid_every: a.valid_every,
        truncate: a.truncate,
        seed: a.seed,
        batch_size: a.batch_size,
        adam: AdamConfig {
            lr: a.lr,
            ..Default::default()
        },
        clip: a.clip,
        target_ppl: a.target_ppl,
        ..Default::default()
    };
    let result = if let Some(r) = &a.resume {
        let (ck, v) = load_checkpoint(r)?;
        if v.hash() != vocab.hash() {
            bail!("{} was trained with a different vocabulary", r.display());
        }
        let mut t = Trainer::from_checkpoint(&ck)?;
        t.config.max_epochs = a.epochs;
        t.run(&train_set, &valid_set, &mut on_log, &mut save_last)
    } else {
        let cfg = ModelConfig::new(variant, vocab.len())
            .dims(a.d_e, a.d_h, a.d_c)
            .summary(summary)
            .maxout(!a.no_maxout);
        let mut model = DialogueModel::new(cfg, a.seed)?;
        if a.pretrain {
            let qa = load_data(&a.data.join("qa.pairs"), &vocab)?;
            let tc = TransferConfig {
                pretrain_epochs: a.pretrain_epochs,
                finetune: config,
            };
            pretrain_finetune(model, &qa, &train_set, &valid_set, &tc, &mut on_log).map(|t| t.outcome)
        } else if let Some(p) = &a.embeddings {
            let table = load_embeddings(BufReader::new(
                File::open(p).with_context(|| format!("opening {}", p.display()))?,
            ))?;
            let boot = bootstrap_embeddings(&mut model, &vocab, &table, &config)?;
            eprintln!("embeddings cover {} of {} tokens", boot.covered.len(), vocab.len());
            let mut s1 = Trainer::new(
                model,
                TrainConfig {
                    max_epochs: a.stage1_epochs,
                    ..boot.stage1
                },
            )?;
            let first = s1.run(&train_set, &valid_set, &mut on_log, &mut save_last)?;
            let mut s2 = Trainer::new(first.best, boot.stage2)?;
            s2.step = s1.step;
            s2.run(&train_set, &valid_set, &mut on_log, &mut save_last)
        } else {
            Trainer::new(model, config)?.run(&train_set, &valid_set, &mut on_log, &mut save_last)
        }
    };
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged {
            step,
            reason,
            last_good,
        }) => {
            let p = a.out.join("last-good.ckpt");
            let mut ck = *last_good;
            ck.vocab = Some(vocab.tokens().to_vec());
            ck.save(&p)?;
            bail!(
                "training diverged at step {step} ({reason}); last good state saved to {}",
                p.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    let mut ck = Checkpoint::new(outcome.best);
    ck.vocab = Some(vocab.tokens().to_vec());
    ck.meta
        .insert("best_valid_ppl".into(), format!("{:?}", outcome.best_ppl));
    ck.meta.insert("stopped".into(), format!("{:?}", outcome.stopped));
    ck.save(&best_path)?;
    outs.keep();
    println!(
        "best validation perplexity {:.4} ({:?})",
        outcome.best_ppl, outcome.stopped
    );
    println!("{}", best_path.display());
    Ok(())
}

fn print_report(r: &EvalReport, name: &str, table: bool) -> Result<()> {
    println!("{}", serde_json::to_string(r)?);
    if table {
        print!("{}", eval::format_table(&[(name.to_string(), r.clone())]));
    }
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let (ck, vocab) = load_checkpoint(&a.model)?;
    let data = load_data(&a.data, &vocab)?;
    let report = eval::evaluate(&ck.model, &data)?;
    if a.scope != ScopeArg::Full && report.ppl_u3.is_none() {
        bail!("{} has no third utterances", a.data.display());
    }
    print_report(&report, ck.model.variant().name(), a.table)
}

fn ngram(a: NgramArgs) -> Result<()> {
    let vocab = load_vocab(&a.data)?;
    let split = match a.split.as_str() {
        "train" | "valid" | "test" => a.split.as_str(),
        s => bail!("unknown split {s:?}"),
    };
    let eval_set = load_data(&a.data.join(format!("{split}.triples")), &vocab)?;
    let mut rows = Vec::new();
    if let Some(p) = &a.load {
        let m = NgramModel::read(BufReader::new(
            File::open(p).with_context(|| format!("opening {}", p.display()))?,
        ))?;
        if m.vocab_size != vocab.len() {
            bail!(
                "{} was trained with {} tokens, vocabulary has {}",
                p.display(),
                m.vocab_size,
                vocab.len()
            );
        }
        rows.push((
            format!("{} {}-gram", m.method.name(), m.order),
            eval::evaluate(&m, &eval_set)?,
        ));
    } else {
        let methods: Vec<Method> = if a.method == "all" {
            Method::ALL.to_vec()
        } else {
            vec![a.method.parse().map_err(anyhow::Error::msg)?]
        };
        if a.save.is_some() && methods.len() > 1 {
            bail!("--save needs a single --method");
        }
        let train_set = load_data(&a.data.join("train.triples"), &vocab)?;
        let mut outs = Outputs::new();
        for method in methods {
            let m = NgramModel::train(&train_set, a.order, method, vocab.len())?;
            if let Some(p) = &a.save {
                let p = outs.add(p.clone());
                m.write(BufWriter::new(File::create(&p)?))?;
            }
            rows.push((
                format!("{} {}-gram", method.name(), a.order),
                eval::evaluate(&m, &eval_set)?,
            ));
        }
        outs.keep();
    }
    for (name, r) in &rows {
        println!("{}", serde_json::json!({ "model": name, "report": r }));
    }
    print!("{}", eval::format_table(&rows));
    Ok(())
}

/// Splits tokenized context text into `</s>`-terminated utterances.
fn parse_context(text: &str, tok: &Tokenizer, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let mut utts = Vec::new();
    let mut cur = Vec::new();
    for w in tok.tokenize(text) {
        let id = vocab.encode_token(&w);
        cur.push(id);
        if id == EOS_ID {
            utts.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        cur.push(EOS_ID);
        utts.push(cur);
    }
    if utts.is_empty() {
        bail!("empty context");
    }
    Ok(utts)
}

fn sample(a: SampleArgs) -> Result<()> {
    let (ck, vocab) = load_checkpoint(&a.model)?;
    let tok = tokenizer(a.gazetteer.as_deref())?;
    let ctx = parse_context(&a.context, &tok, &vocab)?;
    let settings = a.decode.settings()?;
    let n = if a.decode.mode == ModeArg::Map {
        1
    } else {
        a.samples.max(1)
    };
    for i in 0..n {
        let mode = match settings.mode {
            service::Mode::Map => DecodeMode::Beam { width: settings.width },
            service::Mode::Sample => DecodeMode::Sample {
                temperature: settings.temperature,
            },
        };
        let ds = DecodeSettings {
            mode,
            max_len: settings.max_len,
            seed: service::turn_seed(settings.seed, i),
        };
        let hyp = eval::decode(&ck.model, &ctx, &ds)?;
        let words = vocab.decode(&hyp.tokens)?;
        println!("{:.4}\t{}", hyp.log_prob, words.join(" "));
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let (ck, _) = load_checkpoint(&a.model)?;
    let tok = tokenizer(a.gazetteer.as_deref())?;
    let cfg = ServiceConfig {
        idle_timeout: Duration::from_secs(a.idle_minutes * 60),
        defaults: a.decode.settings()?,
    };
    let svc = Arc::new(Service::from_checkpoint(ck, tok, cfg)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        service::serve(listener, svc, shutdown).await?;
        Ok(())
    })
}

fn synthesize(a: SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let mut outs = Outputs::new();
    let mut g = synth::Generator::new(a.seed);
    let files = [
        ("script.txt", g.script(a.movies, a.dialogues, a.exchanges)),
        ("qa.txt", g.qa_text(a.qa_pairs)),
        ("gazetteer.txt", synth::gazetteer_text()),
    ];
    for (name, text) in files {
        let p = outs.add(a.out.join(name));
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        println!("{}", p.display());
    }
    outs.keep();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Preprocess(a) => preprocess(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => evaluate(a),
        Cmd::Ngram(a) => ngram(a),
        Cmd::Sample(a) => sample(a),
        Cmd::Serve(a) => serve(a),
        Cmd::Synth(a) => synthesize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
