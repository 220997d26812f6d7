use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aita::aita::{Checkpoint, Trainer};
use aita::corpus::{ingest_reviews, Corpus, LexiconAnnotator, Limits};
use aita::eval::evaluate;
use aita::RunConfig;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

#[derive(Parser)]
#[command(name = "aita", version, about = "Generate questions about product reviews")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize and annotate raw QA and review files into a corpus archive.
    Ingest(IngestArgs),
    /// Run adapt-and-augment training on a corpus.
    Train(TrainArgs),
    /// Generate one question per review sentence.
    Generate(GenerateArgs),
    /// Dump the top-ranked review sentences for every question.
    Rank(RankArgs),
    /// Score generated questions against references.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    qa: PathBuf,
    #[arg(long)]
    reviews: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Accept a configuration that disagrees with the corpus.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw review records `{product_id, review_id, text}`.
    #[arg(long)]
    reviews: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    /// Configuration the checkpoint is expected to carry.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Where to write the report; defaults to `<pred>.report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn apply_overrides(cfg: &mut RunConfig, args: &ConfigArgs) -> Result<()> {
    if let Some(path) = &args.config {
        for (k, v) in file_entries(path)? {
            cfg.set(&k, &v)?;
        }
    }
    cfg.apply_env()?;
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

/// Only the keys a file sets, so it can be layered over another config.
fn file_entries(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    // Parse once for the error messages.
    RunConfig::parse_str(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

/// Settings baked into a corpus that a later config must not contradict.
fn corpus_conflicts(corpus: &RunConfig, cfg: &RunConfig) -> Vec<&'static str> {
    let mut out = Vec::new();
    if corpus.embedding_dim != cfg.embedding_dim {
        out.push("embedding_dim");
    }
    if corpus.min_count != cfg.min_count {
        out.push("min_count");
    }
    if corpus.max_q_len != cfg.max_q_len {
        out.push("max_q_len");
    }
    if corpus.max_review_len != cfg.max_review_len {
        out.push("max_review_len");
    }
    out
}

fn check_corpus(corpus: &Corpus, cfg: &RunConfig, force: bool) -> Result<()> {
    let conflicts = corpus_conflicts(&corpus.config, cfg);
    if conflicts.is_empty() {
        return Ok(());
    }
    let msg = format!(
        "config {} disagrees with corpus config {} on {}",
        cfg.hash(),
        corpus.config_hash,
        conflicts.join(", ")
    );
    if force {
        warn!("{msg}; continuing because of --force");
        Ok(())
    } else {
        bail!("{msg} (use --force to override)")
    }
}

fn ingest(args: IngestArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    apply_overrides(&mut cfg, &args.cfg)?;
    cfg.validate()?;
    let corpus = Corpus::ingest(&args.qa, &args.reviews, &cfg)?;
    corpus.save(&args.out)?;
    let c = corpus.counts;
    println!("products\t#q\t#a\t#r\t#s\tvocab");
    println!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        c.products,
        c.questions,
        c.answers,
        c.reviews,
        c.sentences,
        corpus.vocab.len()
    );
    if c.skipped_qa + c.skipped_reviews > 0 {
        eprintln!("skipped {} QA records and {} review records", c.skipped_qa, c.skipped_reviews);
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus).with_context(|| format!("loading corpus {}", args.corpus.display()))?;
    let mut cfg = corpus.config.clone();
    apply_overrides(&mut cfg, &args.cfg)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    check_corpus(&corpus, &cfg, args.force)?;
    let trainer = if args.resume {
        match Checkpoint::latest(&args.out)? {
            Some(ckpt) => {
                info!("resuming from {}", ckpt.display());
                Trainer::resume(&corpus, &cfg, &ckpt)?
            }
            None => {
                warn!("no checkpoint under {}; starting fresh", args.out.display());
                Trainer::new(&corpus, &cfg)?
            }
        }
    } else {
        Trainer::new(&corpus, &cfg)?
    };
    let mu = trainer.mu();
    let out = trainer.run_to_end(Some(&args.out))?;
    println!("epoch\tn_qa\tn_qr\tmean_reward\tmean_train_nll");
    for row in &out.log {
        println!(
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            row.epoch, row.n_qa, row.n_qr, row.mean_reward, row.mean_train_nll
        );
    }
    println!("mu = {mu}; run written to {}", args.out.display());
    Ok(())
}

fn load_checkpoint(path: &Path, expected: Option<&Path>, force: bool) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(cfg_path) = expected {
        let mut cfg = RunConfig::default();
        for (k, v) in file_entries(cfg_path)? {
            cfg.set(&k, &v)?;
        }
        if cfg.hash() != ckpt.config_hash {
            let msg = format!(
                "checkpoint config {} does not match {} ({})",
                ckpt.config_hash,
                cfg_path.display(),
                cfg.hash()
            );
            if !force {
                bail!("{msg} (use --force to override)");
            }
            warn!("{msg}; continuing because of --force");
        }
    }
    Ok(ckpt)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn read_meta_hash(path: &Path) -> Result<Option<String>> {
    let meta = meta_path(path);
    if !meta.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&meta).with_context(|| format!("reading {}", meta.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", meta.display()))?;
    Ok(v.get("config_hash").and_then(|h| h.as_str()).map(str::to_string))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint, args.config.as_deref(), args.force)?;
    let hash = ckpt.config_hash.clone();
    let model = ckpt.model();
    let beam = args.beam.unwrap_or(model.config.beam_size);
    if beam == 0 {
        bail!("--beam must be positive");
    }
    let reviews = ingest_reviews(&args.reviews, &LexiconAnnotator, Limits::from(&model.config))?;
    let records = model.generate(&reviews.records, beam)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    let meta = json!({ "config_hash": hash, "beam_size": beam, "records": records.len() });
    fs::write(meta_path(&args.out), serde_json::to_string_pretty(&meta)? + "\n")?;
    println!("{} questions written to {}", records.len(), args.out.display());
    Ok(())
}

fn rank(args: RankArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let corpus = Corpus::load(&args.corpus)?;
    if ckpt.vocab != corpus.vocab {
        bail!("checkpoint and corpus vocabularies differ");
    }
    check_corpus(&corpus, &ckpt.config, args.force)?;
    let model = ckpt.model();
    let mut text = String::new();
    for qa in &corpus.qa {
        let ranked = model.rank(qa, &corpus.reviews)?;
        let top: Vec<_> = ranked
            .iter()
            .take(args.top_k)
            .map(|&(i, score)| {
                let r = &corpus.reviews[i];
                json!({ "review_id": r.review_id, "sent_idx": r.sent_idx, "sentence": r.text(), "score": score })
            })
            .collect();
        let row = json!({
            "product_id": qa.product_id,
            "question_id": qa.question_id,
            "question": qa.q_tokens.join(" "),
            "ranked": top,
        });
        text.push_str(&serde_json::to_string(&row)?);
        text.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let pred_hash = read_meta_hash(&args.pred)?;
    let ref_hash = read_meta_hash(&args.reference)?;
    if let (Some(p), Some(r)) = (&pred_hash, &ref_hash) {
        if p != r {
            let msg = format!("prediction config {p} differs from reference config {r}");
            if !args.force {
                bail!("{msg} (use --force to override)");
            }
            warn!("{msg}; continuing because of --force");
        }
    }
    let mut report = evaluate(&args.pred, &args.reference)?;
    report.config_hash = pred_hash;
    let out = args.out.unwrap_or_else(|| {
        let mut s = args.pred.as_os_str().to_owned();
        s.push(".report.json");
        PathBuf::from(s)
    });
    fs::write(&out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    println!("bleu1\tbleu4\tmeteor\trouge_l");
    println!(
        "{:.4}\t{:.4}\t{:.4}\t{:.4}",
        report.mean("bleu1"),
        report.mean("bleu4"),
        report.mean("meteor"),
        report.mean("rouge_l")
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Rank(a) => rank(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
