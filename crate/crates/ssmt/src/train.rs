//! Preprocessing artifacts and the training loop.
//!
//! [`Artifacts`] bundles everything derived from the corpora before any
//! parameter exists: the source-side BPE model and vocabulary, the target
//! character vocabulary, and the subword lexicon. [`train_on`] minimizes the
//! negative log marginal over segmentations with Adam, batching by target
//! character count and early-stopping on validation chrF computed from
//! dynamically decoded translations of a capped validation sample.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::{dynamic_decode, mixture_beam_search, BeamConfig, DecodeResult};
use crate::lattice::{sequence_nll, viterbi_segmentation, Segmentation};
use crate::metrics::chrf;
use crate::numerics::{AdamConfig, GradMap};
use crate::ssmodel::{Session, SsModel};
use crate::textproc::{word_spans, BpeModel, CharId, CharVocab, Lexicon, SrcVocab, EOT};
use crate::{Error, Result};

const BPE_FILE: &str = "bpe.txt";
const CHARVOCAB_FILE: &str = "charvocab.txt";
const LEXICON_FILE: &str = "lexicon.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.json";

/// Reads a text file into lines (without trailing newlines).
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Writes lines joined by newlines (with a trailing newline); an empty
/// list produces an empty file.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Data-derived artifacts shared by every command after preprocessing.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub bpe: BpeModel,
    pub src_vocab: SrcVocab,
    pub char_vocab: CharVocab,
    pub lexicon: Lexicon,
}

impl Artifacts {
    /// Builds all artifacts from in-memory training corpora.
    pub fn build(
        train_source: &[String],
        train_target: &[String],
        cfg: &RunConfig,
    ) -> Result<Self> {
        let bpe = BpeModel::train(train_source, cfg.model.bpe_merges)?;
        let src_vocab = SrcVocab::from_bpe(&bpe);
        let char_vocab = CharVocab::build(train_target)?;
        let lexicon = Lexicon::build(train_target, cfg.model.lexicon_size, cfg.model.max_seg_len)?;
        Ok(Artifacts { bpe, src_vocab, char_vocab, lexicon })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_lines(&dir.join(BPE_FILE), &self.bpe.to_lines())?;
        write_lines(&dir.join(CHARVOCAB_FILE), &self.char_vocab.to_lines())?;
        write_lines(&dir.join(LEXICON_FILE), &self.lexicon.to_lines())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bpe = BpeModel::from_lines(&read_lines(&dir.join(BPE_FILE))?)?;
        let src_vocab = SrcVocab::from_bpe(&bpe);
        let char_vocab = CharVocab::from_lines(&read_lines(&dir.join(CHARVOCAB_FILE))?)?;
        let lexicon = Lexicon::from_lines(&read_lines(&dir.join(LEXICON_FILE))?)?;
        Ok(Artifacts { bpe, src_vocab, char_vocab, lexicon })
    }

    /// BPE-segments and encodes a source line.
    pub fn encode_source(&self, line: &str) -> Vec<usize> {
        self.src_vocab.encode(&self.bpe.apply(line))
    }

    /// Encodes a target line as character ids with EOT appended.
    pub fn encode_target(&self, line: &str) -> Vec<CharId> {
        let mut y = self.char_vocab.encode(line);
        y.push(EOT);
        y
    }
}

/// Builds artifacts from the configured corpora and saves them.
pub fn preprocess(cfg: &RunConfig) -> Result<Artifacts> {
    let train_source = read_lines(&cfg.paths.train_source)?;
    let train_target = read_lines(&cfg.paths.train_target)?;
    let arts = Artifacts::build(&train_source, &train_target, cfg)?;
    arts.save(&cfg.paths.artifact_dir)?;
    Ok(arts)
}

/// Renders a Viterbi or decoded segmentation as text with `delimiter`
/// between subwords inside each word; separators print as themselves and
/// the EOT segment is dropped.
pub fn render_segmentation(
    y: &[CharId],
    segmentation: &Segmentation,
    vocab: &CharVocab,
    delimiter: char,
) -> String {
    let mut out = String::new();
    let mut prev_was_word = false;
    for &(start, end) in segmentation {
        let text = vocab.decode(&y[start..end]);
        if text.is_empty() {
            continue;
        }
        let is_sep = end - start == 1 && vocab.is_separator(y[start]);
        if is_sep {
            out.push_str(&text);
            prev_was_word = false;
        } else {
            if prev_was_word {
                out.push(delimiter);
            }
            out.push_str(&text);
            prev_was_word = true;
        }
    }
    out
}

/// One decoded translation.
#[derive(Debug, Clone)]
pub struct Translation {
    pub text: String,
    /// The output with subword delimiters inside words.
    pub segmentation: String,
    pub logprob: f64,
    pub truncated: bool,
}

fn result_to_translation(
    result: DecodeResult,
    vocab: &CharVocab,
    delimiter: char,
) -> Translation {
    let mut seg: Segmentation = Vec::new();
    let mut prev = 0;
    for &b in &result.boundaries {
        seg.push((prev, b));
        prev = b;
    }
    Translation {
        text: vocab.decode(&result.chars),
        segmentation: render_segmentation(&result.chars, &seg, vocab, delimiter),
        logprob: result.logprob,
        truncated: result.truncated,
    }
}

/// Translates one source line. Empty lines pass through untranslated.
pub fn translate_line(
    model: &SsModel,
    arts: &Artifacts,
    line: &str,
    dcfg: &BeamConfig,
    mixture_beam: bool,
) -> Result<Translation> {
    let src = arts.encode_source(line);
    if src.is_empty() {
        return Ok(Translation {
            text: String::new(),
            segmentation: String::new(),
            logprob: 0.0,
            truncated: false,
        });
    }
    let mut sess = Session::new(model, &src)?;
    let result = if mixture_beam {
        mixture_beam_search(&mut sess, &arts.lexicon, &arts.char_vocab, dcfg)?
    } else {
        dynamic_decode(&mut sess, &arts.lexicon, &arts.char_vocab, dcfg)?
    };
    Ok(result_to_translation(result, &arts.char_vocab, dcfg.delimiter))
}

/// Viterbi-segments one target line given its source line.
pub fn segment_line(
    model: &SsModel,
    arts: &Artifacts,
    src_line: &str,
    tgt_line: &str,
    delimiter: char,
) -> Result<String> {
    let src = arts.encode_source(src_line);
    if src.is_empty() {
        return Err(Error::EmptyInput(format!(
            "empty source line for target {tgt_line:?}"
        )));
    }
    let y = arts.encode_target(tgt_line);
    if y.len() <= 1 {
        return Ok(String::new());
    }
    let spans = word_spans(&y, &arts.char_vocab)?;
    let mut sess = Session::new(model, &src)?;
    let (seg, _) =
        viterbi_segmentation(&mut sess, &y, &arts.lexicon, &arts.char_vocab, &spans)?;
    Ok(render_segmentation(&y, &seg, &arts.char_vocab, delimiter))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll_per_char: f64,
    pub valid_chrf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_chrf: f64,
    pub stopped_early: bool,
}

fn accumulate(acc: &mut GradMap, grads: GradMap) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(t) => t.add_assign(&g),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn scaled(acc: &GradMap, factor: f64) -> GradMap {
    acc.iter()
        .map(|(name, t)| (name.clone(), t.map(|v| v * factor)))
        .collect()
}

struct EncodedSentence {
    src: Vec<usize>,
    y: Vec<CharId>,
    line_no: usize,
}

fn encode_corpus(
    arts: &Artifacts,
    source: &[String],
    target: &[String],
    what: &str,
) -> Result<Vec<EncodedSentence>> {
    if source.len() != target.len() {
        return Err(Error::Data(format!(
            "{what}: {} source lines vs {} target lines",
            source.len(),
            target.len()
        )));
    }
    let mut out = Vec::with_capacity(source.len());
    for (i, (s, t)) in source.iter().zip(target).enumerate() {
        let src = arts.encode_source(s);
        if src.is_empty() || t.trim().is_empty() {
            continue; // nothing to learn from blank pairs
        }
        out.push(EncodedSentence { src, y: arts.encode_target(t), line_no: i + 1 });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("{what} corpus has no usable sentences")));
    }
    Ok(out)
}

/// Mean chrF of dynamically decoded translations of (a capped sample of) the
/// validation set.
fn validation_chrf(
    model: &SsModel,
    arts: &Artifacts,
    valid_source: &[String],
    valid_target: &[String],
    cfg: &RunConfig,
) -> Result<f64> {
    let n = valid_source.len().min(cfg.training.valid_sample);
    if n == 0 {
        return Err(Error::EmptyInput("validation set is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let hyp = translate_line(model, arts, &valid_source[i], &cfg.decoding, false)?;
        total += chrf(&hyp.text, &valid_target[i], 6, 2.0);
    }
    Ok(total / n as f64)
}

/// Trains on in-memory corpora; returns the best-validation model and the
/// per-epoch log. `resume` continues from a checkpoint (parameters and
/// optimizer moments) instead of a fresh initialization.
pub fn train_on(
    cfg: &RunConfig,
    arts: &Artifacts,
    train_source: &[String],
    train_target: &[String],
    valid_source: &[String],
    valid_target: &[String],
    resume: Option<&Path>,
) -> Result<(SsModel, TrainReport)> {
    cfg.validate()?;
    let sentences = encode_corpus(arts, train_source, train_target, "training")?;
    let mut model = match resume {
        Some(path) => SsModel::load(path)?,
        None => {
            let mc = cfg.model.to_model_config(
                arts.src_vocab.len(),
                arts.char_vocab.len(),
                arts.lexicon.len(),
            );
            SsModel::new(mc, cfg.training.seed)?
        }
    };
    let adam = AdamConfig { lr: cfg.training.learning_rate, ..AdamConfig::default() };

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_chrf: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best_store = model.store.clone();
    let mut stale_epochs = 0usize;

    for epoch in 1..=cfg.training.max_epochs {
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed ^ (epoch as u64) << 32);
        order.shuffle(&mut rng);

        let mut epoch_nll = 0.0;
        let mut epoch_chars = 0usize;
        let mut acc = GradMap::new();
        let mut batch_sentences = 0usize;
        let mut batch_chars = 0usize;
        for &idx in &order {
            let sent = &sentences[idx];
            let spans = word_spans(&sent.y, &arts.char_vocab)?;
            let mut sess = Session::new(&model, &sent.src)?;
            let nll = sequence_nll(&mut sess, &sent.y, &arts.lexicon, &arts.char_vocab, &spans)?;
            let loss = sess.tape.scalar_value(nll);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, training line {} \
                     (source {:?}, target {:?})",
                    sent.line_no,
                    train_source.get(sent.line_no - 1),
                    train_target.get(sent.line_no - 1),
                )));
            }
            accumulate(&mut acc, sess.tape.backward(nll)?);
            epoch_nll += loss;
            epoch_chars += sent.y.len();
            batch_sentences += 1;
            batch_chars += sent.y.len();
            if batch_chars >= cfg.training.batch_chars {
                let grads = scaled(&acc, 1.0 / batch_sentences as f64);
                model.store.adam_step(&grads, &adam)?;
                acc.clear();
                batch_sentences = 0;
                batch_chars = 0;
            }
        }
        if batch_sentences > 0 {
            let grads = scaled(&acc, 1.0 / batch_sentences as f64);
            model.store.adam_step(&grads, &adam)?;
        }

        let valid = validation_chrf(&model, arts, valid_source, valid_target, cfg)?;
        report.epochs.push(EpochStats {
            epoch,
            train_nll_per_char: epoch_nll / epoch_chars.max(1) as f64,
            valid_chrf: valid,
        });
        if valid > report.best_chrf {
            report.best_chrf = valid;
            report.best_epoch = epoch;
            best_store = model.store.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.training.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    model.store = best_store;
    Ok((model, report))
}

/// File-based training entry point: loads artifacts and corpora from the
/// configured paths, trains, and writes the best checkpoint plus the log
/// into the artifact directory.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(SsModel, TrainReport, PathBuf)> {
    let arts = Artifacts::load(&cfg.paths.artifact_dir)?;
    let train_source = read_lines(&cfg.paths.train_source)?;
    let train_target = read_lines(&cfg.paths.train_target)?;
    let valid_source = read_lines(&cfg.paths.valid_source)?;
    let valid_target = read_lines(&cfg.paths.valid_target)?;
    let (model, report) = train_on(
        cfg,
        &arts,
        &train_source,
        &train_target,
        &valid_source,
        &valid_target,
        resume,
    )?;
    let ckpt = cfg.paths.artifact_dir.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    let log = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("training log: {e}")))?;
    std::fs::write(cfg.paths.artifact_dir.join(TRAIN_LOG_FILE), log)?;
    Ok((model, report, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.max_seg_len = 4;
        cfg.model.lexicon_size = 40;
        cfg.model.bpe_merges = 50;
        cfg.model.dim = 8;
        cfg.model.ffn_dim = 16;
        cfg.model.heads = 2;
        cfg.model.enc_layers = 1;
        cfg.model.dec_layers = 1;
        cfg.model.lstm_dim = 8;
        cfg.training.max_epochs = 2;
        cfg.training.batch_chars = 64;
        cfg.training.valid_sample = 3;
        cfg.decoding.beam_size = 2;
        cfg.decoding.max_chars = 30;
        cfg
    }

    fn tiny_corpus() -> (Vec<String>, Vec<String>) {
        let synth = generate(&SynthConfig {
            n_sentences: 12,
            word_pool_size: 6,
            min_words: 1,
            max_words: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        (synth.source, synth.target)
    }

    #[test]
    fn artifacts_round_trip_and_encode() {
        let (src, tgt) = tiny_corpus();
        let cfg = tiny_run_config();
        let arts = Artifacts::build(&src, &tgt, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        arts.save(dir.path()).unwrap();
        let loaded = Artifacts::load(dir.path()).unwrap();
        assert_eq!(arts.char_vocab, loaded.char_vocab);
        assert_eq!(arts.lexicon.entries(), loaded.lexicon.entries());
        assert_eq!(arts.encode_source(&src[0]), loaded.encode_source(&src[0]));

        let y = arts.encode_target(&tgt[0]);
        assert_eq!(*y.last().unwrap(), EOT);
        assert_eq!(arts.char_vocab.decode(&y), tgt[0]);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let (src, tgt) = tiny_corpus();
        let cfg = tiny_run_config();
        let a = Artifacts::build(&src, &tgt, &cfg).unwrap();
        let b = Artifacts::build(&src, &tgt, &cfg).unwrap();
        assert_eq!(a.bpe.to_lines(), b.bpe.to_lines());
        assert_eq!(a.char_vocab.to_lines(), b.char_vocab.to_lines());
        assert_eq!(a.lexicon.to_lines(), b.lexicon.to_lines());
    }

    #[test]
    fn render_segmentation_golden() {
        let vocab = CharVocab::build(&["ab a".into()]).unwrap();
        let mut y = vocab.encode("ab a");
        y.push(EOT);
        let whole = vec![(0, 2), (2, 3), (3, 4), (4, 5)];
        assert_eq!(render_segmentation(&y, &whole, &vocab, '-'), "ab a");
        let split = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)];
        assert_eq!(render_segmentation(&y, &split, &vocab, '-'), "a-b a");
    }

    #[test]
    fn training_runs_and_reports() {
        let (src, tgt) = tiny_corpus();
        let cfg = tiny_run_config();
        let arts = Artifacts::build(&src, &tgt, &cfg).unwrap();
        let (model, report) =
            train_on(&cfg, &arts, &src, &tgt, &src, &tgt, None).unwrap();
        assert!(!report.epochs.is_empty());
        assert!(report.epochs.len() <= cfg.training.max_epochs);
        for e in &report.epochs {
            assert!(e.train_nll_per_char.is_finite());
            assert!((0.0..=100.0).contains(&e.valid_chrf));
        }
        assert!(report.best_epoch >= 1);

        // The kept model must reproduce the best validation score.
        let again = validation_chrf(&model, &arts, &src, &tgt, &cfg).unwrap();
        assert!((again - report.best_chrf).abs() < 1e-9);
    }

    #[test]
    fn resume_replays_the_exact_state() {
        let (src, tgt) = tiny_corpus();
        let mut cfg = tiny_run_config();
        cfg.training.max_epochs = 1;
        let arts = Artifacts::build(&src, &tgt, &cfg).unwrap();
        let (model, _) = train_on(&cfg, &arts, &src, &tgt, &src, &tgt, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        model.save(&ckpt).unwrap();
        let loaded = SsModel::load(&ckpt).unwrap();

        let probe = |m: &SsModel| -> f64 {
            let y = arts.encode_target(&tgt[0]);
            let spans = word_spans(&y, &arts.char_vocab).unwrap();
            let mut sess = Session::new(m, &arts.encode_source(&src[0])).unwrap();
            let nll =
                sequence_nll(&mut sess, &y, &arts.lexicon, &arts.char_vocab, &spans).unwrap();
            sess.tape.scalar_value(nll)
        };
        assert_eq!(probe(&model), probe(&loaded));

        // One further optimizer step from each copy must agree: the
        // checkpoint carries the Adam moments too.
        let step = |m: &mut SsModel| -> f64 {
            let y = arts.encode_target(&tgt[0]);
            let spans = word_spans(&y, &arts.char_vocab).unwrap();
            let grads = {
                let mut sess = Session::new(m, &arts.encode_source(&src[0])).unwrap();
                let nll = sequence_nll(&mut sess, &y, &arts.lexicon, &arts.char_vocab, &spans)
                    .unwrap();
                sess.tape.backward(nll).unwrap()
            };
            m.store.adam_step(&grads, &AdamConfig::default()).unwrap();
            probe(m)
        };
        let mut a = model;
        let mut b = loaded;
        assert!((step(&mut a) - step(&mut b)).abs() < 1e-6);
    }

    #[test]
    fn translate_line_outputs_align() {
        let (src, tgt) = tiny_corpus();
        let cfg = tiny_run_config();
        let arts = Artifacts::build(&src, &tgt, &cfg).unwrap();
        let mc = cfg.model.to_model_config(
            arts.src_vocab.len(),
            arts.char_vocab.len(),
            arts.lexicon.len(),
        );
        let model = SsModel::new(mc, 5).unwrap();
        let t = translate_line(&model, &arts, &src[0], &cfg.decoding, false).unwrap();
        assert_eq!(t.segmentation.replace(cfg.decoding.delimiter, ""), t.text);

        let empty = translate_line(&model, &arts, "", &cfg.decoding, false).unwrap();
        assert_eq!(empty.text, "");
    }

    #[test]
    fn segment_line_reconstructs_input() {
        let (src, tgt) = tiny_corpus();
        let cfg = tiny_run_config();
        let arts = Artifacts::build(&src, &tgt, &cfg).unwrap();
        let mc = cfg.model.to_model_config(
            arts.src_vocab.len(),
            arts.char_vocab.len(),
            arts.lexicon.len(),
        );
        let model = SsModel::new(mc, 5).unwrap();
        for i in 0..3 {
            let marked = segment_line(&model, &arts, &src[i], &tgt[i], '-').unwrap();
            assert_eq!(marked.replace('-', ""), tgt[i]);
        }
        assert!(segment_line(&model, &arts, "", &tgt[0], '-').is_err());
    }
}
