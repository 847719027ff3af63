use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

use memdecoder::baseline::Baseline;
use memdecoder::config::RunConfig;
use memdecoder::data::{self, Split};
use memdecoder::eval::{gate_dump, Evaluator};
use memdecoder::memory::{load_memory_file, MemoryModel, Variant};
use memdecoder::params::ParamStore;
use memdecoder::tokenizer::BpeVocab;
use memdecoder::training::Trainer;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "memdecoder", about = "Memory-enhanced sequence transducer")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Baseline,
    Memory,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Mem,
    #[value(name = "2mem")]
    TwoMem,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset splits.
    DataGen {
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train the BPE vocabulary on the training transcripts.
    BpeTrain {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "vocab.json")]
        out: PathBuf,
    },
    /// Train the baseline or the memory decoder.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Memory decoder variant; only valid with --stage memory.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "vocab.json")]
        vocab: PathBuf,
        /// Baseline checkpoint to build on (stage=memory).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value = "ckpt")]
        out: PathBuf,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Four-cell evaluation; writes report.json next to the checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "vocab.json")]
        vocab: PathBuf,
        /// Newline-separated memory entries.
        #[arg(long, conflicts_with = "empty_memory")]
        memory_file: Option<PathBuf>,
        #[arg(long)]
        empty_memory: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode one utterance and dump tokens, gates and memory locations.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "vocab.json")]
        vocab: PathBuf,
        /// Utterance id from any split.
        #[arg(long)]
        utterance: String,
        #[arg(long)]
        memory_file: Option<PathBuf>,
    },
    /// Verify dataset invariants (disjoint new words, coverage).
    Audit {
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success, real parse errors are usage.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.is::<memdecoder::training::TrainError>() {
                EXIT_NUMERICAL
            } else {
                EXIT_VALIDATION
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::DataGen { out } => {
            data::gen_dataset(&cfg.data, cfg.seed.0, &out)?;
            println!("dataset written to {} (config {})", out.display(), cfg.hash());
            Ok(())
        }
        Cmd::BpeTrain { data, out } => {
            let train = Split::open(&data, "train")?;
            let corpus: Vec<String> =
                train.manifest.utterances.iter().map(|u| u.transcript.clone()).collect();
            let vocab = BpeVocab::train(&corpus, cfg.tokenizer.vocab_size)?;
            vocab.save(&out)?;
            println!("vocab of {} tokens written to {}", vocab.size(), out.display());
            Ok(())
        }
        Cmd::Train { stage, variant, data, vocab, baseline, out, resume } => {
            match stage {
                Stage::Baseline => {
                    if variant.is_some() {
                        anyhow::bail!("--variant only applies to --stage memory");
                    }
                    train_baseline(&cfg, &data, &vocab, &out, resume)
                }
                Stage::Memory => {
                    let v = match variant {
                        Some(VariantArg::Mem) => Variant::Mem,
                        Some(VariantArg::TwoMem) | None => Variant::TwoMem,
                    };
                    let base = baseline
                        .ok_or_else(|| anyhow::anyhow!("--stage memory requires --baseline"))?;
                    train_memory(&cfg, v, &data, &vocab, &base, &out, resume)
                }
            }
        }
        Cmd::Eval { checkpoint, data, vocab, memory_file, empty_memory, report } => {
            let vocab = BpeVocab::load(&vocab)?;
            let (store, base, mem) = load_checkpoint(&cfg, &checkpoint, &vocab)?;
            let seen = Split::open(&data, "test")?;
            let new_words = Split::open(&data, "new_words")?;
            let entries = match (&memory_file, empty_memory) {
                (Some(path), _) => load_memory_file(path, &vocab)?,
                (None, true) => vec![],
                (None, false) => load_memory_file(&data.join("new_words.txt"), &vocab)?,
            };
            let ev = Evaluator {
                store: &store,
                baseline: &base,
                memory: mem.as_ref(),
                vocab: &vocab,
                max_decode_len: cfg.eval.max_decode_len,
            };
            let rep = ev.run_eval(&seen, &new_words, &entries, &cfg.hash())?;
            let path = report.unwrap_or_else(|| checkpoint.join("report.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&rep)?)?;
            for c in &rep.conditions {
                println!(
                    "{:>6} memory: seen WER {:.4}  new-words WER {:.4}  new-word acc {:.4}",
                    c.condition, c.seen_test_wer, c.new_words_test_wer, c.new_word_accuracy
                );
            }
            println!("report written to {}", path.display());
            Ok(())
        }
        Cmd::Decode { checkpoint, data, vocab, utterance, memory_file } => {
            let vocab = BpeVocab::load(&vocab)?;
            let (store, base, mem) = load_checkpoint(&cfg, &checkpoint, &vocab)?;
            let (split, rec) = find_utterance(&data, &utterance)?;

            let entries = match &memory_file {
                Some(path) => load_memory_file(path, &vocab)?,
                None => vec![],
            };
            let ev = Evaluator {
                store: &store,
                baseline: &base,
                memory: mem.as_ref(),
                vocab: &vocab,
                max_decode_len: cfg.eval.max_decode_len,
            };
            let (_, details) = ev.eval_one(&split, &rec, &entries)?;
            println!("reference:  {}", rec.transcript);
            println!("hypothesis: {}", details.hypothesis);
            if mem.is_some() {
                println!("{}", gate_dump(&details));
            }
            Ok(())
        }
        Cmd::Audit { data } => {
            data::audit_dataset(&data)?;
            println!("audit passed");
            Ok(())
        }
    }
}

fn find_utterance(
    dir: &Path,
    id: &str,
) -> anyhow::Result<(Split, memdecoder::data::UtteranceRecord)> {
    for name in ["train", "dev", "test", "new_words"] {
        let split = Split::open(dir, name)?;
        if let Some(rec) = split.manifest.utterances.iter().find(|u| u.id == id) {
            let rec = rec.clone();
            return Ok((split, rec));
        }
    }
    anyhow::bail!("unknown utterance id {id}")
}

fn load_checkpoint(
    cfg: &RunConfig,
    dir: &Path,
    vocab: &BpeVocab,
) -> anyhow::Result<(ParamStore<f32>, Baseline, Option<MemoryModel>)> {
    let (mut store, stored_hash) = ParamStore::load(dir)?;
    anyhow::ensure!(
        stored_hash == cfg.hash(),
        "checkpoint {} was produced with a different config",
        dir.display()
    );
    anyhow::ensure!(
        vocab.size() == cfg.baseline.vocab_size,
        "vocab size {} does not match config {}",
        vocab.size(),
        cfg.baseline.vocab_size
    );
    let base = Baseline::bind(&mut store, &cfg.baseline);
    // The trained variant is recoverable from the parameter names, so an
    // eval of either variant works from the same config file.
    let has_mem = store.iter().any(|(_, p)| p.name.starts_with("memory."));
    let mem = if has_mem {
        let mut mem_cfg = cfg.memory.clone();
        mem_cfg.variant = if store.id("memory.dec.0.entry.wq").is_some() {
            Variant::TwoMem
        } else {
            Variant::Mem
        };
        Some(MemoryModel::bind(&mut store, &base, &mem_cfg))
    } else {
        None
    };
    Ok((store, base, mem))
}

fn train_baseline(
    cfg: &RunConfig,
    data_dir: &Path,
    vocab_path: &Path,
    out: &Path,
    resume: bool,
) -> anyhow::Result<()> {
    let vocab = BpeVocab::load(vocab_path)?;
    let train = Split::open(data_dir, "train")?;
    let mut store;
    let base;
    if resume {
        (store, _) = ParamStore::load(out)?;
        base = Baseline::bind(&mut store, &cfg.baseline);
    } else {
        store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed.0);
        base = Baseline::new(&mut store, &cfg.baseline, &mut rng);
    }
    std::fs::create_dir_all(out)?;
    let log = out.join("train_log.jsonl");
    let mut trainer = Trainer::new(&mut store, &cfg.training.baseline, Some(&log))?;
    if resume {
        trainer.resume(out)?;
    }
    trainer.run_baseline(&base, &train, &vocab, &cfg.training.baseline, out, &cfg.hash())?;
    println!("baseline checkpoint written to {}", out.display());
    Ok(())
}

fn train_memory(
    cfg: &RunConfig,
    variant: Variant,
    data_dir: &Path,
    vocab_path: &Path,
    baseline_dir: &Path,
    out: &Path,
    resume: bool,
) -> anyhow::Result<()> {
    let vocab = BpeVocab::load(vocab_path)?;
    let train = Split::open(data_dir, "train")?;
    let mut mem_cfg = cfg.memory.clone();
    mem_cfg.variant = variant;
    let source = if resume { out } else { baseline_dir };
    let (mut store, _) = ParamStore::load(source)?;
    let base = Baseline::bind(&mut store, &cfg.baseline);
    store.freeze_prefix("baseline.");
    let frozen_before = store.frozen_checksum();
    let mem = if resume {
        MemoryModel::bind(&mut store, &base, &mem_cfg)
    } else {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed.0.wrapping_add(1));
        MemoryModel::new(&mut store, &base, &mem_cfg, &mut rng)
    };
    std::fs::create_dir_all(out)?;
    let log = out.join("train_log.jsonl");
    let mut trainer = Trainer::new(&mut store, &cfg.training.memory, Some(&log))?;
    if resume {
        trainer.resume(out)?;
    }
    trainer.run_memory(&base, &mem, &train, &vocab, &cfg.training.memory, out, &cfg.hash())?;
    let frozen_after = trainer.store.frozen_checksum();
    anyhow::ensure!(
        frozen_before == frozen_after,
        "frozen baseline parameters changed during memory training"
    );
    println!("memory checkpoint written to {}", out.display());
    Ok(())
}
