//! `screenlm`: render text to screenshots, pre-train and fine-tune screenshot
//! language models, evaluate perplexity, and inspect reconstructions.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use screenlm::ar::{self, ArConfig, MixedSequence};
use screenlm::checkpoint;
use screenlm::codec::{self, Vocab};
use screenlm::encdec::{self, EncDecConfig};
use screenlm::error::{Error, Result};
use screenlm::patch::{self, assemble_example};
use screenlm::render::{builtin_test_atlas, load_atlas, measure_fit, render_line, save_png, GlyphAtlas, RenderConfig, Screenshot};
use screenlm::tasks::{self, FineTune, FineTuneMode, GridSpec, MetricKind, TaskData, TaskKind, TaskSpec};
use screenlm::tensor::{ParamSet, Session};
use screenlm::train::{self, ArExample, Schedule, ScheduleShape, TrainConfig};

use config::FileConfig;

#[derive(Parser)]
#[command(name = "screenlm", version, about = "Screenshot language model toolkit")]
struct Cli {
    /// Config file with `key = value` lines; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every randomized stage; runs are bit-reproducible given it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rasterize text into a screenshot PNG.
    Render(RenderArgs),
    /// Pre-train the encoder-decoder model on a line-per-document corpus.
    Pretrain(PretrainArgs),
    /// Pre-train (or continue training) the autoregressive model.
    ArPretrain(ArPretrainArgs),
    /// Grid-search fine-tuning of a pre-trained checkpoint on a task TSV.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint on a task TSV without training.
    Eval(EvalArgs),
    /// Perplexity of held-out text under different context conditions.
    EvalPpl(EvalPplArgs),
    /// Dump model inputs and reconstructions as PNGs.
    Inspect(InspectArgs),
    /// Show the effective configuration.
    Config(ConfigArgs),
}

#[derive(Args)]
struct RenderArgs {
    /// Text to render (mutually exclusive with --infile).
    #[arg(long)]
    text: Option<String>,
    /// Read the text from a file instead.
    #[arg(long, conflicts_with = "text")]
    infile: Option<PathBuf>,
    /// Glyph atlas file; the builtin procedural test font when omitted.
    #[arg(long)]
    atlas: Option<PathBuf>,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Patch budget (output width = patches * patch_width).
    #[arg(long)]
    patches: Option<usize>,
    /// Override the rendered prefix.
    #[arg(long)]
    prefix: Option<String>,
    /// Render no prefix at all.
    #[arg(long, conflicts_with = "prefix")]
    no_prefix: bool,
    /// Skip the end-of-sequence black patch.
    #[arg(long)]
    no_eos: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus file, one document per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for checkpoints, vocab, and the metrics log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long)]
    batch: Option<usize>,
    /// Model preset: tiny, small, or base.
    #[arg(long, default_value = "tiny")]
    model: String,
    /// Load an existing vocab file instead of training one on the corpus.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Save a checkpoint every N steps (0 = final only).
    #[arg(long, default_value_t = 0)]
    ckpt_every: u64,
    /// Layer normalization right after the patch embedding.
    #[arg(long)]
    embedding_layernorm: bool,
    /// Disable global-norm gradient clipping.
    #[arg(long)]
    no_grad_clip: bool,
}

#[derive(Args)]
struct ArPretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long)]
    batch: Option<usize>,
    /// Model preset: ar-tiny or ar-small.
    #[arg(long, default_value = "ar-tiny")]
    model: String,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    ckpt_every: u64,
    /// Train on token sequences only (no screenshot segment).
    #[arg(long)]
    text_only: bool,
    /// Ablation: drop the next-patch prediction loss.
    #[arg(long)]
    no_patch_pred: bool,
    /// Continue from a text-only checkpoint, re-initializing the patch
    /// projection and pixel head.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    no_grad_clip: bool,
}

#[derive(Args)]
struct TaskArgs {
    /// Training split TSV: sentence1<TAB>[sentence2<TAB>]label.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation split TSV.
    #[arg(long)]
    val: PathBuf,
    /// classification, regression, or seq2seq.
    #[arg(long, value_enum)]
    kind: KindArg,
    /// accuracy, f1, matthews, or spearman.
    #[arg(long, default_value = "accuracy")]
    metric: String,
    /// Comma-separated label texts for seq2seq classification.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long, default_value_t = 2)]
    n_classes: usize,
    /// Sentence-pair task.
    #[arg(long)]
    pair: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Classification,
    Regression,
    Seq2seq,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    EncoderOnly,
    S2s,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Pre-trained encoder-decoder checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum, default_value = "encoder-only")]
    mode: ModeArg,
    /// Comma-separated learning rates.
    #[arg(long)]
    lrs: Option<String>,
    /// Comma-separated batch sizes.
    #[arg(long)]
    batches: Option<String>,
    /// Comma-separated step counts.
    #[arg(long)]
    steps_list: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value_t = 50)]
    eval_every: u64,
    /// Write the per-run results TSV here (also printed).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the best run's parameters as a checkpoint.
    #[arg(long)]
    save_best: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Fine-tuned checkpoint (with head tensors for encoder-only mode).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum, default_value = "encoder-only")]
    mode: ModeArg,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq, Debug)]
enum ContextArg {
    All,
    None,
    Text,
    Screenshot,
    Blank,
}

#[derive(Args)]
struct EvalPplArgs {
    /// Autoregressive checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Held-out corpus, one document per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Context condition(s) to evaluate.
    #[arg(long, value_enum, default_value = "all")]
    context: ContextArg,
    /// Context tokens per document (defaults to `ar.ms_tokens`).
    #[arg(long)]
    ms: Option<usize>,
    /// Evaluated tokens per document (defaults to `ar.mt_tokens`).
    #[arg(long)]
    mt: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    /// Encoder-decoder or autoregressive checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    text: String,
    /// Output directory for the PNG set.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Print every key with its effective value.
    #[arg(long)]
    dump: bool,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    });
}

fn execute(cli: Cli) -> Result<()> {
    let file_cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::base(),
    };
    match cli.cmd {
        Cmd::Render(args) => cmd_render(&file_cfg, args),
        Cmd::Pretrain(args) => cmd_pretrain(&file_cfg, cli.seed, args),
        Cmd::ArPretrain(args) => cmd_ar_pretrain(&file_cfg, cli.seed, args),
        Cmd::Finetune(args) => cmd_finetune(&file_cfg, args),
        Cmd::Eval(args) => cmd_eval(&file_cfg, args),
        Cmd::EvalPpl(args) => cmd_eval_ppl(&file_cfg, args),
        Cmd::Inspect(args) => cmd_inspect(&file_cfg, cli.seed, args),
        Cmd::Config(args) => {
            if args.dump {
                print!("{}", file_cfg.dump());
            } else {
                println!("use --dump to print the effective configuration");
            }
            Ok(())
        }
    }
}

fn load_atlas_or_builtin(path: &Option<PathBuf>) -> Result<GlyphAtlas> {
    match path {
        Some(p) => load_atlas(p),
        None => Ok(builtin_test_atlas()),
    }
}

fn cmd_render(file_cfg: &FileConfig, args: RenderArgs) -> Result<()> {
    let mut rc = file_cfg.render_config()?;
    if let Some(p) = args.patches {
        rc.max_patches = p;
    }
    if args.no_prefix {
        rc.prefix.clear();
    } else if let Some(prefix) = args.prefix {
        rc.prefix = prefix;
    }
    if args.no_eos {
        rc.eos_black_patch = false;
    }
    let text = match (&args.text, &args.infile) {
        (Some(t), _) => t.clone(),
        (None, Some(f)) => std::fs::read_to_string(f)?,
        (None, None) => return Err(Error::Config("one of --text or --infile is required".into())),
    };
    let atlas = load_atlas_or_builtin(&args.atlas)?;
    let shot = render_line(&text, &atlas, &rc);
    save_png(&shot, &args.out)?;
    println!("patches_used={} truncated={}", measure_fit(&text, &atlas, &rc), shot.truncated);
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let lines: Vec<String> = std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect();
    if lines.is_empty() {
        return Err(Error::Config(format!("corpus {} has no nonempty lines", path.display())));
    }
    Ok(lines)
}

fn vocab_for(corpus: &[String], vocab_path: &Option<PathBuf>, file_cfg: &FileConfig, out_dir: &Path) -> Result<Vocab> {
    let vocab = match vocab_path {
        Some(p) => codec::load_vocab(p)?,
        None => codec::train_bpe(corpus, file_cfg.parse("vocab.size")?)?,
    };
    std::fs::create_dir_all(out_dir)?;
    codec::save_vocab(&vocab, &out_dir.join("vocab.txt"))?;
    Ok(vocab)
}

fn schedule_from(file_cfg: &FileConfig, steps: u64) -> Result<Schedule> {
    let warmup_frac: f64 = file_cfg.parse("train.warmup_frac")?;
    let shape = match file_cfg.get("train.shape") {
        "cosine" => ScheduleShape::Cosine,
        "linear" => ScheduleShape::Linear,
        other => return Err(Error::Config(format!("unknown schedule shape {other:?}"))),
    };
    Ok(Schedule {
        peak_lr: file_cfg.parse("train.peak_lr")?,
        min_lr: file_cfg.parse("train.min_lr")?,
        warmup_steps: (steps as f64 * warmup_frac) as u64,
        total_steps: steps,
        shape,
    })
}

fn train_config(file_cfg: &FileConfig, seed: u64, steps: u64, batch: Option<usize>, ckpt_every: u64, out: &Path, no_clip: bool) -> Result<TrainConfig> {
    let grad_clip: f64 = file_cfg.parse("train.grad_clip")?;
    Ok(TrainConfig {
        batch_size: match batch {
            Some(b) => b,
            None => file_cfg.parse("train.batch")?,
        },
        schedule: schedule_from(file_cfg, steps)?,
        optim: screenlm::train::OptimConfig {
            weight_decay: file_cfg.parse("train.weight_decay")?,
            ..Default::default()
        },
        seed,
        grad_clip: if no_clip { None } else { Some(grad_clip) },
        ckpt_every,
        out_dir: Some(out.to_path_buf()),
        ..TrainConfig::default()
    })
}

fn report_outcome(outcome: &train::Outcome) {
    if let Some(last) = outcome.metrics_log.lines().last() {
        let cols: Vec<&str> = last.split('\t').collect();
        println!("final step={} mse={} ce={} total={}", cols[0], cols[2], cols[3], cols[4]);
    }
    if let Some(p) = &outcome.final_checkpoint {
        println!("checkpoint={}", p.display());
    }
}

fn cmd_pretrain(file_cfg: &FileConfig, seed: u64, args: PretrainArgs) -> Result<()> {
    let corpus = read_corpus(&args.corpus)?;
    let vocab = vocab_for(&corpus, &args.vocab, file_cfg, &args.out)?;
    let render = file_cfg.render_config()?;
    let mut model = match args.model.as_str() {
        "tiny" => EncDecConfig::tiny(vocab.size()),
        "small" => EncDecConfig::small(vocab.size()),
        "base" => EncDecConfig::base(vocab.size()),
        other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
    };
    model.max_patches = render.max_patches;
    model.use_embedding_layernorm = args.embedding_layernorm;
    model.loss_weight_text = file_cfg.parse("model.loss_weight_text")?;
    let spec = train::EncDecPretrain {
        corpus: &corpus,
        vocab: &vocab,
        atlas: &builtin_test_atlas(),
        render,
        mask: file_cfg.mask_config()?,
        model,
    };
    let tc = train_config(file_cfg, seed, args.steps, args.batch, args.ckpt_every, &args.out, args.no_grad_clip)?;
    let outcome = train::run_encdec_pretraining(&spec, &tc)?;
    report_outcome(&outcome);
    Ok(())
}

fn ar_render_config(file_cfg: &FileConfig) -> Result<RenderConfig> {
    // The autoregressive pipeline renders without the prefix or EOS patch.
    let mut rc = file_cfg.render_config()?;
    rc.prefix.clear();
    rc.eos_black_patch = false;
    Ok(rc)
}

fn cmd_ar_pretrain(file_cfg: &FileConfig, seed: u64, args: ArPretrainArgs) -> Result<()> {
    let lines = read_corpus(&args.corpus)?;
    let vocab = vocab_for(&lines, &args.vocab, file_cfg, &args.out)?;
    let mut model = match args.model.as_str() {
        "ar-tiny" => ArConfig::tiny(vocab.size()),
        "ar-small" => ArConfig::small(vocab.size()),
        other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
    };
    model.no_patch_pred = args.no_patch_pred;
    let render = ar_render_config(file_cfg)?;
    let ms: usize = file_cfg.parse("ar.ms_tokens")?;
    let mt: usize = file_cfg.parse("ar.mt_tokens")?;
    let corpus: Vec<ArExample> = if args.text_only {
        lines.iter().map(|l| ArExample::TextOnly { text: l.clone() }).collect()
    } else {
        lines
            .iter()
            .filter_map(|l| {
                let tokens = codec::encode(l, &vocab);
                if tokens.len() < 4 {
                    return None;
                }
                let split = ms.min(tokens.len() / 2);
                let take = (tokens.len() - split).min(mt);
                let image_text = codec::decode(&tokens[..split], &vocab).ok()?;
                let text = codec::decode(&tokens[split..split + take], &vocab).ok()?;
                Some(ArExample::Mixed { image_text, text })
            })
            .collect()
    };
    if corpus.is_empty() {
        return Err(Error::Config("no usable documents in the corpus".into()));
    }
    // Sequence budget: screenshot segment + text segment.
    model.max_seq = (2 + render.max_patches + render.max_patches + mt * 4 + 8).max(model.max_seq);
    let init_from = match &args.init_from {
        Some(p) => {
            let ckpt = checkpoint::load(p)?;
            if ckpt.magic != checkpoint::MAGIC_AR {
                return Err(Error::Checkpoint("--init-from expects an autoregressive checkpoint".into()));
            }
            Some(ckpt.params)
        }
        None => None,
    };
    let spec = train::ArPretrain {
        corpus: &corpus,
        vocab: &vocab,
        atlas: &builtin_test_atlas(),
        render,
        model,
        loss_weight_text: file_cfg.parse("model.loss_weight_text")?,
        init_from,
    };
    let tc = train_config(file_cfg, seed, args.steps, args.batch, args.ckpt_every, &args.out, args.no_grad_clip)?;
    let outcome = train::run_ar_pretraining(&spec, &tc)?;
    report_outcome(&outcome);
    Ok(())
}

fn task_spec_of(args: &TaskArgs, mode: ModeArg) -> Result<TaskSpec> {
    let kind = match (args.kind, mode) {
        (KindArg::Seq2seq, _) | (_, ModeArg::S2s) => TaskKind::Seq2Seq,
        (KindArg::Classification, _) => TaskKind::Classification,
        (KindArg::Regression, _) => TaskKind::Regression,
    };
    let label_texts: Vec<String> = match &args.labels {
        Some(l) => l.split(',').map(|s| s.trim().to_string()).collect(),
        None => Vec::new(),
    };
    let n_classes = if matches!(args.kind, KindArg::Regression) { 0 } else { args.n_classes.max(label_texts.len()) };
    let spec = TaskSpec {
        kind,
        label_texts,
        n_classes,
        metric: MetricKind::parse(&args.metric)?,
        pair_task: args.pair,
    };
    spec.validate()?;
    Ok(spec)
}

fn load_task_data(args: &TaskArgs) -> Result<TaskData> {
    let validation = tasks::load_task_tsv(&args.val)?;
    let train = match &args.train {
        Some(p) => tasks::load_task_tsv(p)?,
        None => Vec::new(),
    };
    Ok(TaskData { train, validation })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad {what} entry {x:?}"))))
        .collect()
}

fn encdec_checkpoint(path: &Path) -> Result<(EncDecConfig, ParamSet<f32>)> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.magic != checkpoint::MAGIC_ENCDEC {
        return Err(Error::Checkpoint("expected an encoder-decoder checkpoint".into()));
    }
    let cfg = EncDecConfig::from_map(&ckpt.config)?;
    Ok((cfg, ckpt.params))
}

fn cmd_finetune(file_cfg: &FileConfig, args: FinetuneArgs) -> Result<()> {
    let (model, base_params) = encdec_checkpoint(&args.ckpt)?;
    let vocab = codec::load_vocab(&args.vocab)?;
    let spec = task_spec_of(&args.task, args.mode)?;
    let data = load_task_data(&args.task)?;
    if data.train.is_empty() {
        return Err(Error::Config("--train is required for finetune".into()));
    }
    let mut render = file_cfg.render_config()?;
    render.max_patches = model.max_patches;
    let ft = FineTune {
        data: &data,
        spec: &spec,
        base_params: &base_params,
        model: &model,
        vocab: &vocab,
        atlas: &builtin_test_atlas(),
        render,
        mode: match args.mode {
            ModeArg::EncoderOnly => FineTuneMode::EncoderOnly,
            ModeArg::S2s => FineTuneMode::Seq2Seq,
        },
    };
    let mut grid = GridSpec::default();
    if let Some(l) = &args.lrs {
        grid.learning_rates = parse_list(l, "learning rate")?;
    }
    if let Some(b) = &args.batches {
        grid.batch_sizes = parse_list(b, "batch size")?;
    }
    if let Some(s) = &args.steps_list {
        grid.step_counts = parse_list(s, "step count")?;
    }
    if let Some(s) = &args.seeds {
        grid.seeds = parse_list(s, "seed")?;
    }
    grid.eval_every = args.eval_every;
    let results = tasks::run_grid(&ft, &grid)?;
    print!("{}", results.to_tsv());
    let ((lr, batch, steps), mean) = results.best_cell;
    println!("# best_cell lr={lr} batch={batch} steps={steps} mean_score={mean:.6}");
    if let Some(out) = &args.out {
        std::fs::write(out, results.to_tsv())?;
    }
    if let Some(path) = &args.save_best {
        checkpoint::save(path, checkpoint::MAGIC_ENCDEC, &model.to_map(), &results.best_params, results.best_row.best_step)?;
        println!("# saved_best={} score={:.6}", path.display(), results.best_row.best_score);
    }
    Ok(())
}

fn cmd_eval(file_cfg: &FileConfig, args: EvalArgs) -> Result<()> {
    let (model, params) = encdec_checkpoint(&args.ckpt)?;
    let vocab = codec::load_vocab(&args.vocab)?;
    let spec = task_spec_of(&args.task, args.mode)?;
    let data = load_task_data(&args.task)?;
    let mut render = file_cfg.render_config()?;
    render.max_patches = model.max_patches;
    let ft = FineTune {
        data: &data,
        spec: &spec,
        base_params: &params,
        model: &model,
        vocab: &vocab,
        atlas: &builtin_test_atlas(),
        render,
        mode: match args.mode {
            ModeArg::EncoderOnly => FineTuneMode::EncoderOnly,
            ModeArg::S2s => FineTuneMode::Seq2Seq,
        },
    };
    let score = tasks::evaluate_validation(&ft, &params)?;
    println!("score={score:.6}");
    Ok(())
}

fn cmd_eval_ppl(file_cfg: &FileConfig, args: EvalPplArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    if ckpt.magic != checkpoint::MAGIC_AR {
        return Err(Error::Checkpoint("eval-ppl expects an autoregressive checkpoint".into()));
    }
    let cfg = ArConfig::from_map(&ckpt.config)?;
    let vocab = codec::load_vocab(&args.vocab)?;
    let lines = read_corpus(&args.corpus)?;
    let render = ar_render_config(file_cfg)?;
    let atlas = builtin_test_atlas();
    let ms = match args.ms {
        Some(v) => v,
        None => file_cfg.parse("ar.ms_tokens")?,
    };
    let mt = match args.mt {
        Some(v) => v,
        None => file_cfg.parse("ar.mt_tokens")?,
    };

    let conditions: Vec<ContextArg> = match args.context {
        ContextArg::All => vec![ContextArg::None, ContextArg::Screenshot, ContextArg::Text, ContextArg::Blank],
        one => vec![one],
    };
    for condition in conditions {
        let mut total_ce = 0.0;
        let mut total_tokens = 0usize;
        for line in &lines {
            let tokens = codec::encode(line, &vocab);
            if tokens.len() < 4 {
                continue;
            }
            let split = ms.min(tokens.len() / 2);
            let take = (tokens.len() - split).min(mt);
            let eval_tokens = &tokens[split..split + take];
            let context = match condition {
                ContextArg::None => MixedSequence::text_only(&[vocab.bos_id()]),
                ContextArg::Text => {
                    let mut ctx = vec![vocab.bos_id()];
                    ctx.extend_from_slice(&tokens[..split]);
                    MixedSequence::text_only(&ctx)
                }
                ContextArg::Screenshot => {
                    let image_text = codec::decode(&tokens[..split], &vocab)?;
                    let shot = render_line(&image_text, &atlas, &render);
                    ar::build_mixed_input(&shot, &[], &vocab, shot.n_patches(), cfg.c)?
                }
                ContextArg::Blank => {
                    let shot = Screenshot::blank(&render);
                    ar::build_mixed_input(&shot, &[], &vocab, shot.n_patches(), cfg.c)?
                }
                ContextArg::All => unreachable!(),
            };
            let ce = ar::eval_token_ce(&ckpt.params, &cfg, &context, eval_tokens)?;
            total_ce += ce * eval_tokens.len() as f64;
            total_tokens += eval_tokens.len();
        }
        if total_tokens == 0 {
            return Err(Error::Invalid("no document long enough to evaluate".into()));
        }
        let label = match condition {
            ContextArg::None => "none",
            ContextArg::Text => "text",
            ContextArg::Screenshot => "screenshot",
            ContextArg::Blank => "blank",
            ContextArg::All => unreachable!(),
        };
        println!("context={label} tokens={total_tokens} ppl={:.6}", (total_ce / total_tokens as f64).exp());
    }
    Ok(())
}

/// Write `pixels` (in [0,1]) as a grayscale PNG.
fn write_pixels(path: &Path, pixels: Vec<f32>, width: usize, height: usize, patch_width: usize) -> Result<()> {
    let shot = Screenshot {
        pixels,
        width,
        height,
        patch_width,
        eos_patch_index: None,
        source_text: String::new(),
        truncated: false,
    };
    save_png(&shot, path)
}

fn cmd_inspect(file_cfg: &FileConfig, seed: u64, args: InspectArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let vocab = codec::load_vocab(&args.vocab)?;
    std::fs::create_dir_all(&args.out)?;
    let atlas = builtin_test_atlas();
    match ckpt.magic {
        m if m == checkpoint::MAGIC_ENCDEC => {
            let cfg = EncDecConfig::from_map(&ckpt.config)?;
            let mut render = file_cfg.render_config()?;
            render.max_patches = cfg.max_patches;
            let mask = file_cfg.mask_config()?;
            let ex = assemble_example(&args.text, &atlas, &render, &mask, &vocab, cfg.c, seed)?;
            save_png(&ex.screenshot, &args.out.join("input.png"))?;
            save_png(&patch::overlay_mask(&ex.screenshot, &ex.patch_plan), &args.out.join("masked.png"))?;

            let sess = Session::new(&ckpt.params);
            let out = encdec::forward_loss(&sess, &cfg, &ex, vocab.bos_id())?;
            let mut recon = ex.screenshot.clone();
            if let Some(preds) = &out.patch_predictions {
                for (row, &idx) in ex.patch_plan.masked.iter().enumerate() {
                    // Un-standardize with the patch's own moments.
                    let patch = &ex.grid.patches[idx];
                    let n = patch.len() as f64;
                    let mean = patch.iter().map(|&x| x as f64).sum::<f64>() / n;
                    let var = patch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
                    let std = (var + 1e-6).sqrt();
                    for y in 0..cfg.p_h {
                        for x in 0..cfg.p_w {
                            let v = preds.get(row, (y * cfg.p_w + x) * cfg.c) as f64;
                            let pixel = (v * std + mean).clamp(0.0, 1.0) as f32;
                            recon.pixels[y * recon.width + idx * cfg.p_w + x] = pixel;
                        }
                    }
                }
            }
            save_png(&recon, &args.out.join("recon.png"))?;
            println!("mse={:.6} ce={:.6}", out.mse_patch, out.ce_text);
        }
        m if m == checkpoint::MAGIC_AR => {
            let cfg = ArConfig::from_map(&ckpt.config)?;
            let render = ar_render_config(file_cfg)?;
            let shot = render_line(&args.text, &atlas, &render);
            save_png(&shot, &args.out.join("input.png"))?;
            let seq = ar::build_mixed_input(&shot, &[], &vocab, shot.n_patches(), cfg.c)?;
            let sess = Session::new(&ckpt.params);
            let out = ar::losses(&sess, &cfg, &seq, 1.0)?;
            // Reconstruct each predicted patch back into pixel space.
            let fwd = ar::forward(&sess, &cfg, &seq)?;
            let preds = sess.tape.value(fwd.pixel_preds);
            let mut recon = shot.clone();
            for i in 0..seq.len() - 1 {
                if let ar::MixedElement::Patch(patch) = &seq.elements[i + 1] {
                    // Position i predicts element i+1; grid patch k sits at
                    // element 1 + k, so the predicted grid index is i.
                    let patch_pos = i;
                    let n = patch.len() as f64;
                    let mean = patch.iter().map(|&x| x as f64).sum::<f64>() / n;
                    let var = patch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
                    let std = (var + 1e-6).sqrt();
                    for y in 0..cfg.p_h {
                        for x in 0..cfg.p_w {
                            let v = preds.get(i, (y * cfg.p_w + x) * cfg.c) as f64;
                            let pixel = (v * std + mean).clamp(0.0, 1.0) as f32;
                            recon.pixels[y * recon.width + patch_pos * cfg.p_w + x] = pixel;
                        }
                    }
                }
            }
            write_pixels(&args.out.join("recon.png"), recon.pixels, recon.width, recon.height, recon.patch_width)?;
            println!("mse={:.6} ce={:.6}", out.mse_patch, out.ce_text);
        }
        other => return Err(Error::Checkpoint(format!("unknown checkpoint magic {other:?}"))),
    }
    Ok(())
}
