mod settings;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pathmask_core::corpus::{prepare, read_corpus, words};
use pathmask_core::datagen::{corpus_stats, generate, stats_table, SynthSpec};
use pathmask_core::eval::{decoder_tokens, evaluate, export_attention, HeadSelect};
use pathmask_core::labelseq::bfs_flatten;
use pathmask_core::train::{teacher_forcing, train, write_log};
use pathmask_core::{build_mask, Checkpoint, LabelHierarchy, Model, Vocabulary};

use settings::Settings;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.txt";
pub const LABEL_CSV_FILE: &str = "per_label.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Parser, Debug)]
#[command(name = "pathmask", version, about = "Hierarchy-aware label-sequence generation with path-adaptive attention masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic hierarchy and train/val/test corpora.
    GenData(GenDataArgs),
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Decode a corpus greedily and score it.
    Eval(EvalArgs),
    /// Print the flattened sequence and path mask for a label set.
    InspectMask(InspectArgs),
    /// Dump decoder self-attention scores for one sample as CSV.
    ExportAttention(ExportArgs),
}

#[derive(Debug, Clone)]
struct Branching(Vec<usize>);

impl FromStr for Branching {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v = s
            .split(',')
            .map(|p| match p.trim().parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("`{p}` is not a positive integer")),
                Ok(n) => Ok(n),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if v.len() < 2 {
            return Err("need at least two levels, e.g. 4,3,2".into());
        }
        Ok(Branching(v))
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Children per node for each level, e.g. 4,3,2.
    #[arg(long)]
    branching: Option<Branching>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    signal_words: Option<usize>,
    #[arg(long)]
    words_per_label: Option<usize>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    multi_path_rate: Option<f64>,
    #[arg(long)]
    max_paths: Option<usize>,
    #[arg(long)]
    truncation_rate: Option<f64>,
    #[arg(long = "train")]
    n_train: Option<usize>,
    #[arg(long = "val")]
    n_val: Option<usize>,
    #[arg(long = "test")]
    n_test: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for the checkpoint and epoch log.
    #[arg(long)]
    out: PathBuf,
    /// TOML file of `key = value` settings (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Optional; must match the hierarchy stored in the checkpoint.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Output directory for the report, per-label CSV and predictions.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    /// Comma-separated label names.
    #[arg(long)]
    labels: String,
    /// Also write the mask as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
struct HeadArg(HeadSelect);

impl FromStr for HeadArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "mean" {
            return Ok(HeadArg(HeadSelect::Mean));
        }
        s.parse()
            .map(|h| HeadArg(HeadSelect::Head(h)))
            .map_err(|_| format!("expected a head index or `mean`, got `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Source {
    /// Teacher-forced gold sequence.
    Gold,
    /// The model's own greedy output.
    Decoded,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Zero-based sample index in the corpus.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 0)]
    block: usize,
    /// Head index or `mean`.
    #[arg(long, default_value = "mean")]
    head: HeadArg,
    #[arg(long, value_enum, default_value_t = Source::Gold)]
    source: Source,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_corpus(path: &Path) -> Result<Vec<pathmask_core::Record>> {
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_hierarchy(path: &Path) -> Result<LabelHierarchy> {
    LabelHierarchy::load(path).with_context(|| format!("reading hierarchy {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SynthSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(b) = a.branching {
        spec.branching = b.0;
    }
    macro_rules! set {
        ($($field:ident <- $arg:ident),*) => {$(if let Some(v) = a.$arg { spec.$field = v; })*};
    }
    set!(seed <- seed, vocab_size <- vocab_size, signal_words <- signal_words,
         words_per_label <- words_per_label, noise_rate <- noise_rate,
         multi_path_rate <- multi_path_rate, max_paths <- max_paths,
         truncation_rate <- truncation_rate, train <- n_train, val <- n_val, test <- n_test);
    let data = generate(&spec)?;
    data.write_to(&a.out)
        .with_context(|| format!("writing to {}", a.out.display()))?;
    let h = &data.hierarchy;
    let rows = [
        ("train", corpus_stats(&data.train, h)?),
        ("val", corpus_stats(&data.val, h)?),
        ("test", corpus_stats(&data.test, h)?),
    ];
    println!("{} labels over {} levels", h.len(), h.max_depth());
    print!("{}", stats_table(&rows));
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => Settings::from_toml(p)?,
        None => Settings::default(),
    };
    let s = a.settings.over(file);
    let format = s.format();
    let h = load_hierarchy(&a.hierarchy)?;
    let train_recs = load_corpus(&a.train)?;
    if train_recs.is_empty() {
        bail!("training corpus {} is empty", a.train.display());
    }
    let val_recs = match &a.val {
        Some(p) => load_corpus(p)?,
        None => Vec::new(),
    };
    let vocab = Vocabulary::build(&h, words(&train_recs));
    let mcfg = s.model_config(vocab.len(), vocab.decoder_size())?;
    let tcfg = s.train_config(mcfg.max_tgt_len)?;
    let train_set = prepare(&train_recs, &h, &vocab, format, mcfg.max_src_len, tcfg.seed)
        .with_context(|| format!("in {}", a.train.display()))?;
    let val_set = prepare(&val_recs, &h, &vocab, format, mcfg.max_src_len, tcfg.seed)
        .context("in validation corpus")?;
    let model = Model::new(mcfg, tcfg.seed)?;
    eprintln!(
        "training {} parameters on {} samples ({} format, rho {})",
        model.params().num_scalars(),
        train_set.len(),
        format.as_str(),
        tcfg.rho
    );
    let outcome = train(model, &train_set, &val_set, &h, format, &tcfg, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5} (ce {:.5}, pamm {:.5})  val micro {:.4} macro {:.4} incons {:.4}{}",
            r.epoch,
            r.total,
            r.loss_hia,
            r.loss_pamm,
            r.val_micro_f1,
            r.val_macro_f1,
            r.val_inconsistency_rate,
            if r.best { "  *" } else { "" }
        );
    })?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_log(&outcome.log, create(&a.out.join(LOG_FILE))?)?;
    let meta = BTreeMap::from([
        ("seed".to_string(), tcfg.seed.to_string()),
        ("rho".to_string(), tcfg.rho.to_string()),
        ("best_epoch".to_string(), outcome.best_epoch.to_string()),
        ("pamm_rows".to_string(), tcfg.pamm_rows.as_str().to_string()),
    ]);
    Checkpoint {
        model: outcome.model,
        vocab,
        hierarchy: h,
        format,
        meta,
    }
    .save(a.out.join(CHECKPOINT_FILE))?;
    if let Some(r) = &outcome.best_report {
        std::fs::write(a.out.join("val_report.txt"), r.to_kv())?;
    }
    println!("best epoch {} -> {}", outcome.best_epoch, a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    gold: Vec<&'a str>,
    predicted: Vec<&'a str>,
    output: String,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if let Some(p) = &a.hierarchy {
        ck.check_hierarchy(&load_hierarchy(p)?)?;
    }
    let recs = load_corpus(&a.test)?;
    if recs.is_empty() {
        bail!("test corpus {} is empty", a.test.display());
    }
    let h = &ck.hierarchy;
    let cfg = ck.model.config();
    let examples = prepare(&recs, h, &ck.vocab, ck.format, cfg.max_src_len, 0)?;
    let pool = pool(a.jobs)?;
    let (report, preds) = pool.install(|| evaluate(&ck.model, h, &examples, ck.format, cfg.max_tgt_len))?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join(REPORT_FILE), report.to_kv())?;
    report.write_label_csv(create(&a.out.join(LABEL_CSV_FILE))?)?;
    let mut w = create(&a.out.join(PREDICTIONS_FILE))?;
    for (ex, p) in examples.iter().zip(&preds) {
        let line = PredictionLine {
            gold: h.names_of(&ex.gold),
            predicted: h.names_of(&p.labels),
            output: decoder_tokens(h, &p.tokens).join(" "),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    print!("{}", report.to_kv());
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

fn inspect_mask(a: InspectArgs) -> Result<()> {
    let h = load_hierarchy(&a.hierarchy)?;
    let names: Vec<&str> = a.labels.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let set = h.label_set(names)?;
    h.check_consistent(&set)?;
    let ml = bfs_flatten(&h, &set)?;
    let mask = build_mask(&h, &ml)?;
    let tokens = ml.to_strings(&h);
    println!("{}", tokens.join(" "));
    for (i, t) in tokens.iter().enumerate() {
        let on: Vec<&str> = mask.path_index_set(i).iter().map(|&j| tokens[j]).collect();
        println!("{i:>3} {t:<12} {}", on.join(" "));
    }
    print!("{}", mask.render_grid());
    if let Some(p) = &a.csv {
        mask.write_csv(&tokens, create(p)?)?;
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let recs = load_corpus(&a.corpus)?;
    let Some(rec) = recs.get(a.sample) else {
        bail!("sample {} out of range ({} samples)", a.sample, recs.len());
    };
    let h = &ck.hierarchy;
    let cfg = ck.model.config();
    let ex = prepare(std::slice::from_ref(rec), h, &ck.vocab, ck.format, cfg.max_src_len, 0)?.remove(0);
    let input = match a.source {
        Source::Gold => teacher_forcing(&ex.target, cfg.max_tgt_len).0,
        Source::Decoded => {
            let mut out = vec![pathmask_core::labelseq::BOS_ID];
            out.extend(pathmask_core::eval::greedy_decode(&ck.model, &ex.src, cfg.max_tgt_len - 1)?);
            out
        }
    };
    let trace = ck.model.forward_trace(&ex.src, &input)?;
    let headers = decoder_tokens(h, &input);
    match &a.out {
        Some(p) => export_attention(&trace.self_scores, &headers, a.block, a.head.0, create(p)?)?,
        None => export_attention(&trace.self_scores, &headers, a.block, a.head.0, std::io::stdout().lock())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectMask(a) => inspect_mask(a),
        Command::ExportAttention(a) => cmd_export(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
