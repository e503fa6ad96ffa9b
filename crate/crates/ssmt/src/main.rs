//! `ssmt`: subword segmental machine translation command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssmt::compgen::{
    extract_subset, genbench_report, parse_segmented_corpus, SplitSpec,
};
use ssmt::config::{Manifest, RunConfig};
use ssmt::metrics::{boundary_prf, chrf, morpheme_prf, paired_bootstrap, SegmentedWord};
use ssmt::ssmodel::SsModel;
use ssmt::synth::{generate, SynthConfig};
use ssmt::train::{
    preprocess, read_lines, segment_line, train, translate_line, write_lines, Artifacts,
    CHECKPOINT_FILE,
};
use ssmt::{Error, Result};

#[derive(Parser)]
#[command(name = "ssmt", version, about = "Subword segmental machine translation")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path configuration overrides, e.g. --set training.seed=7.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic agglutinative parallel corpus with gold
    /// segmentations.
    Synth(SynthArgs),
    /// Build BPE model, character vocabulary and subword lexicon.
    Preprocess,
    /// Train the model on the configured corpora.
    Train {
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate a source file with the trained model.
    Translate(TranslateArgs),
    /// Viterbi-segment target sentences given their sources.
    Segment(SegmentArgs),
    /// Evaluate translations or segmentations.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Extract a compositional-generalization test subset.
    Split(SplitArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    sentences: usize,
    #[arg(long, default_value_t = 100)]
    valid_sentences: usize,
    #[arg(long, default_value_t = 200)]
    test_sentences: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 99)]
    pool_seed: u64,
    #[arg(long, default_value_t = 60)]
    word_pool: usize,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Use the naive subword-level mixture beam search instead of dynamic
    /// decoding.
    #[arg(long)]
    mixture_beam: bool,
    /// Also write the delimiter-marked segmentation of each output line.
    #[arg(long)]
    emit_segmentation: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    target: PathBuf,
    /// Source file aligned with the target file. The model is conditional,
    /// so segmentation without sources is refused.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = '-')]
    delimiter: char,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Corpus chrF of a hypothesis file against a reference file, with an
    /// optional paired bootstrap test against a second system.
    Chrf {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        /// Second hypothesis file for significance testing.
        #[arg(long)]
        hyp_b: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Boundary and morpheme P/R/F1 of predicted vs gold segmentations
    /// (whitespace-separated delimiter-marked words, line-aligned).
    Segmentation {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value_t = '-')]
        delimiter: char,
    },
}

#[derive(Args)]
struct SplitArgs {
    /// Segmented training corpus (delimiter-marked words).
    #[arg(long)]
    train_seg: PathBuf,
    /// Segmented test corpus to extract from.
    #[arg(long)]
    test_seg: PathBuf,
    #[arg(long)]
    target_dc: f64,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = '-')]
    delimiter: char,
    /// Output file for selected test-sentence indices (one per line).
    #[arg(long)]
    out_indices: PathBuf,
    /// Output file for the JSON divergence report.
    #[arg(long)]
    out_report: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match RunConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match run(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Io(_) | Error::EmptyInput(_) | Error::Data(_) => 2,
        Error::Shape(_) | Error::Numeric(_) => 3,
    }
}

fn run(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args, cfg),
        Command::Preprocess => cmd_preprocess(cfg),
        Command::Train { resume } => cmd_train(cfg, resume.as_deref()),
        Command::Translate(args) => cmd_translate(args, cfg),
        Command::Segment(args) => cmd_segment(args, cfg),
        Command::Eval(args) => cmd_eval(args, cfg),
        Command::Split(args) => cmd_split(args, cfg),
    }
}

fn load_model_and_artifacts(cfg: &RunConfig) -> Result<(SsModel, Artifacts)> {
    let arts = Artifacts::load(&cfg.paths.artifact_dir)?;
    let ckpt = cfg.paths.artifact_dir.join(CHECKPOINT_FILE);
    let model = SsModel::load(&ckpt)?;
    Ok((model, arts))
}

fn cmd_synth(args: &SynthArgs, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let mut manifest = Manifest::new("synth", cfg);
    let splits: [(&str, usize, u64); 3] = [
        ("train", args.sentences, args.seed),
        ("valid", args.valid_sentences, args.seed.wrapping_add(1)),
        ("test", args.test_sentences, args.seed.wrapping_add(2)),
    ];
    for (name, n, seed) in splits {
        if n == 0 {
            continue;
        }
        let corpus = generate(&SynthConfig {
            n_sentences: n,
            seed,
            pool_seed: args.pool_seed,
            word_pool_size: args.word_pool,
            ..SynthConfig::default()
        })?;
        for (suffix, lines) in [
            ("src", &corpus.source),
            ("tgt", &corpus.target),
            ("seg", &corpus.segmented),
        ] {
            let path = args.out_dir.join(format!("{name}.{suffix}"));
            write_lines(&path, lines)?;
            manifest.output(&path);
        }
        println!("synth: wrote {n} {name} sentences");
    }
    manifest
        .detail("seed", args.seed)
        .detail("pool_seed", args.pool_seed)
        .detail("word_pool", args.word_pool);
    manifest.write(&args.out_dir)?;
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    let arts = preprocess(cfg)?;
    let mut manifest = Manifest::new("preprocess", cfg);
    manifest
        .input(&cfg.paths.train_source)
        .input(&cfg.paths.train_target)
        .output(&cfg.paths.artifact_dir.join("bpe.txt"))
        .output(&cfg.paths.artifact_dir.join("charvocab.txt"))
        .output(&cfg.paths.artifact_dir.join("lexicon.txt"))
        .detail("src_vocab_size", arts.src_vocab.len())
        .detail("char_vocab_size", arts.char_vocab.len())
        .detail("lexicon_size", arts.lexicon.len())
        .detail("max_seg_len", cfg.model.max_seg_len);
    manifest.write(&cfg.paths.artifact_dir)?;
    println!(
        "preprocess: {} source tokens, {} characters, {} lexicon entries",
        arts.src_vocab.len(),
        arts.char_vocab.len(),
        arts.lexicon.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let (_, report, ckpt) = train(cfg, resume)?;
    for e in &report.epochs {
        println!(
            "epoch {}: train nll/char {:.4}, valid chrF {:.2}",
            e.epoch, e.train_nll_per_char, e.valid_chrf
        );
    }
    println!(
        "train: best epoch {} (chrF {:.2}){}",
        report.best_epoch,
        report.best_chrf,
        if report.stopped_early { ", stopped early" } else { "" }
    );
    let mut manifest = Manifest::new("train", cfg);
    manifest
        .input(&cfg.paths.train_source)
        .input(&cfg.paths.train_target)
        .input(&cfg.paths.valid_source)
        .input(&cfg.paths.valid_target)
        .output(&ckpt)
        .detail("best_epoch", report.best_epoch)
        .detail("best_chrf", format!("{:.4}", report.best_chrf))
        .detail("epochs_run", report.epochs.len());
    manifest.write(&cfg.paths.artifact_dir)?;
    Ok(())
}

fn cmd_translate(args: &TranslateArgs, cfg: &RunConfig) -> Result<()> {
    let (model, arts) = load_model_and_artifacts(cfg)?;
    let inputs = read_lines(&args.input)?;
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut segmentations = Vec::with_capacity(inputs.len());
    for line in &inputs {
        let t = translate_line(
            &model,
            &arts,
            line,
            &cfg.decoding,
            args.mixture_beam,
        )?;
        outputs.push(t.text);
        segmentations.push(t.segmentation);
    }
    write_lines(&args.output, &outputs)?;
    let mut manifest = Manifest::new("translate", cfg);
    manifest.input(&args.input).output(&args.output);
    if let Some(seg_path) = &args.emit_segmentation {
        write_lines(seg_path, &segmentations)?;
        manifest.output(seg_path);
    }
    manifest
        .detail("sentences", inputs.len())
        .detail("decoder", if args.mixture_beam { "mixture-beam" } else { "dynamic" });
    manifest.write(&cfg.paths.artifact_dir)?;
    println!("translate: {} sentences", inputs.len());
    Ok(())
}

fn cmd_segment(args: &SegmentArgs, cfg: &RunConfig) -> Result<()> {
    let source_path = args.source.as_ref().ok_or_else(|| {
        Error::InvalidArgument(
            "segment requires --source: the model is conditional on the source sentence"
                .into(),
        )
    })?;
    let (model, arts) = load_model_and_artifacts(cfg)?;
    let targets = read_lines(&args.target)?;
    let sources = read_lines(source_path)?;
    if sources.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} source lines vs {} target lines",
            sources.len(),
            targets.len()
        )));
    }
    let mut outputs = Vec::with_capacity(targets.len());
    for (s, t) in sources.iter().zip(&targets) {
        if t.trim().is_empty() {
            outputs.push(String::new());
            continue;
        }
        outputs.push(segment_line(&model, &arts, s, t, args.delimiter)?);
    }
    write_lines(&args.output, &outputs)?;
    let mut manifest = Manifest::new("segment", cfg);
    manifest
        .input(&args.target)
        .input(source_path)
        .output(&args.output)
        .detail("sentences", targets.len());
    manifest.write(&cfg.paths.artifact_dir)?;
    println!("segment: {} sentences", targets.len());
    Ok(())
}

fn cmd_eval(args: &EvalCommand, cfg: &RunConfig) -> Result<()> {
    match args {
        EvalCommand::Chrf { hyp, reference, hyp_b, resamples, seed } => {
            let hyps = read_lines(hyp)?;
            let refs = read_lines(reference)?;
            if hyps.len() != refs.len() {
                return Err(Error::Data(format!(
                    "{} hypothesis lines vs {} reference lines",
                    hyps.len(),
                    refs.len()
                )));
            }
            let score = |hs: &[String]| -> f64 {
                hs.iter()
                    .zip(&refs)
                    .map(|(h, r)| chrf(h, r, 6, 2.0))
                    .sum::<f64>()
                    / refs.len().max(1) as f64
            };
            println!("metric=chrf system=a value={:.4} sentences={}", score(&hyps), refs.len());
            if let Some(path_b) = hyp_b {
                let hyps_b = read_lines(path_b)?;
                println!(
                    "metric=chrf system=b value={:.4} sentences={}",
                    score(&hyps_b),
                    refs.len()
                );
                let p = paired_bootstrap(
                    &hyps,
                    &hyps_b,
                    &refs,
                    |h, r| chrf(h, r, 6, 2.0),
                    *resamples,
                    *seed,
                )?;
                println!("metric=bootstrap_p value={p:.4} resamples={resamples} seed={seed}");
            }
        }
        EvalCommand::Segmentation { pred, gold, delimiter } => {
            let parse = |path: &Path| -> Result<Vec<SegmentedWord>> {
                let mut words = Vec::new();
                for (i, line) in read_lines(path)?.iter().enumerate() {
                    for w in line.split_whitespace() {
                        words.push(SegmentedWord::from_marked(w, *delimiter).map_err(
                            |e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)),
                        )?);
                    }
                }
                Ok(words)
            };
            let pred_words = parse(pred)?;
            let gold_words = parse(gold)?;
            for (name, report) in [
                ("boundary", boundary_prf(&pred_words, &gold_words)?),
                ("morpheme", morpheme_prf(&pred_words, &gold_words)?),
            ] {
                println!(
                    "metric={name} precision={:.2} recall={:.2} f1={:.2} tp={} fp={} fn={}",
                    report.precision,
                    report.recall,
                    report.f1,
                    report.true_positives,
                    report.false_positives,
                    report.false_negatives
                );
            }
        }
    }
    let _ = cfg; // evaluation needs no model state; config is used only for defaults
    Ok(())
}

fn cmd_split(args: &SplitArgs, cfg: &RunConfig) -> Result<()> {
    let train_text = std::fs::read_to_string(&args.train_seg)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", args.train_seg.display())))?;
    let test_text = std::fs::read_to_string(&args.test_seg)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", args.test_seg.display())))?;
    let train = parse_segmented_corpus(&train_text, args.delimiter)?;
    let test = parse_segmented_corpus(&test_text, args.delimiter)?;
    let spec = SplitSpec {
        target_compound_divergence: args.target_dc,
        size: args.size,
        k: args.k,
        seed: args.seed,
    };
    let extraction = extract_subset(&train, &test, &spec)?;
    let report = genbench_report(&spec, train.len(), test.len(), &extraction);
    write_lines(
        &args.out_indices,
        &report.indices.iter().map(|i| i.to_string()).collect::<Vec<_>>(),
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("report: {e}")))?;
    std::fs::write(&args.out_report, json)?;
    println!(
        "split: size={} compound_divergence={:.4} atom_divergence={:.4}",
        report.subset_size, report.compound_divergence, report.atom_divergence
    );
    let mut manifest = Manifest::new("split", cfg);
    manifest
        .input(&args.train_seg)
        .input(&args.test_seg)
        .output(&args.out_indices)
        .output(&args.out_report)
        .detail("target_dc", args.target_dc)
        .detail("seed", args.seed)
        .detail("k", args.k);
    if let Some(parent) = args.out_report.parent().filter(|p| !p.as_os_str().is_empty()) {
        manifest.write(parent)?;
    }
    Ok(())
}
