use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use serde_json::json;

use memtree::data::{Corpus, LabeledPair, MatchClass, ONTOLOGY_FILE};
use memtree::eval::evaluate;
use memtree::model::{ModelState, PredictionRecord};
use memtree::ontology::{CodeBook, EmbedderSpec, EmbeddingTable, Ontology, TextEmbedder};
use memtree::synth::generate;
use memtree::tensor::Checkpoint;
use memtree::trainer::{predict_pairs, split_dataset, train, write_history};

use crate::config::FileConfig;
use crate::{Cli, Command, Format, SplitChoice};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// Bad flags or missing inputs, reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{flag} {}: no such file", path.display())))
    }
}

fn require_dir(path: &Path, flag: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{flag} {}: no such directory", path.display())))
    }
}

fn require_corpus(dir: &Path) -> Result<()> {
    require_dir(dir, "--data")?;
    require_file(&dir.join(ONTOLOGY_FILE), "--data")
}

fn positive(value: Option<usize>, flag: &str) -> Result<()> {
    match value {
        Some(0) => Err(usage(format!("{flag} must be positive"))),
        _ => Ok(()),
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(usage(format!("--config {}: no such file", path.display())));
            }
            FileConfig::load(path).map_err(|e| usage(format!("--config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let workers = cli.workers.or(file.workers).unwrap_or(1);
    positive(Some(workers), "--workers")?;

    match cli.command {
        Command::GenData { out, patients, trials } => {
            positive(patients, "--patients")?;
            positive(trials, "--trials")?;
            let mut config = file.gen(seed);
            if let Some(n) = patients {
                config.n_patients = n;
            }
            if let Some(n) = trials {
                config.n_trials = n;
            }
            config.validate().map_err(|e| usage(e.to_string()))?;
            let generated = generate(&config)?;
            generated.save(&out)?;
            log::info!(
                "wrote {} patients, {} trials, {} pairs to {}",
                generated.corpus.patients.len(),
                generated.corpus.trials.len(),
                generated.corpus.pairs.len(),
                out.display()
            );
            Ok(())
        }
        Command::Embed { descriptions, out, dim, embeddings } => {
            require_file(&descriptions, "--descriptions")?;
            if let Some(path) = &embeddings {
                require_file(path, "--embeddings")?;
            }
            positive(dim, "--dim")?;
            let spec = match embeddings {
                Some(path) => EmbedderSpec::Precomputed { path },
                None => EmbedderSpec::DeterministicHash {
                    dim: dim.or(file.n_e).unwrap_or(file.model().n_e),
                    seed: file.embed_seed.unwrap_or(seed),
                },
            };
            embed(&spec, &descriptions, &out)
        }
        Command::Train {
            data,
            out,
            epochs,
            learning_rate,
            batch_size,
            lambda,
            embeddings,
        } => {
            require_corpus(&data)?;
            if let Some(path) = &embeddings {
                require_file(path, "--embeddings")?;
            }
            let mut file = file;
            file.epochs = epochs.or(file.epochs);
            file.learning_rate = learning_rate.or(file.learning_rate);
            file.batch_size = batch_size.or(file.batch_size);
            file.lambda = lambda.or(file.lambda);
            let mut model = file.model();
            let loss = file.loss();
            let train_config = file.train(seed, workers);
            let spec = match embeddings {
                Some(path) => {
                    model.n_e = EmbeddingTable::load(&path)?.dim();
                    EmbedderSpec::Precomputed { path }
                }
                None => EmbedderSpec::DeterministicHash {
                    dim: model.n_e,
                    seed: file.embed_seed.unwrap_or(seed),
                },
            };
            model.validate().map_err(|e| usage(e.to_string()))?;
            loss.validate().map_err(|e| usage(e.to_string()))?;
            train_config.validate().map_err(|e| usage(e.to_string()))?;
            train_command(&data, &out, model, loss, spec, &train_config)
        }
        Command::Eval { checkpoint, data, out, split } => {
            require_file(&checkpoint, "--checkpoint")?;
            require_corpus(&data)?;
            let eval_config = file.eval(seed);
            let loaded = Loaded::open(&checkpoint, &data)?;
            let pairs = loaded.pairs(split)?;
            let probs = pool(workers)?.install(|| {
                predict_pairs(&loaded.state, &loaded.corpus, &loaded.codebook, &pairs, loaded.state.config.inference_beam)
            })?;
            let report = evaluate(&pairs, &probs, &loaded.corpus.trials, &eval_config)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("report.json"), report.to_json()? + "\n")?;
            fs::write(out.join("report.txt"), report.to_text())?;
            let mut lines = String::new();
            for (pair, p) in pairs.iter().zip(&probs) {
                let record = PredictionRecord {
                    patient_id: pair.patient_id.clone(),
                    trial_id: pair.trial_id.clone(),
                    criterion_id: pair.criterion_id.clone(),
                    probs: *p,
                    predicted_class: MatchClass::argmax(p),
                    explanation: None,
                };
                lines.push_str(&serde_json::to_string(&record)?);
                lines.push('\n');
            }
            fs::write(out.join("predictions.jsonl"), lines)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Match {
            checkpoint,
            data,
            patient,
            criterion,
            format,
        } => {
            if format == Format::Dot {
                return Err(usage("match supports --format json or text"));
            }
            require_file(&checkpoint, "--checkpoint")?;
            require_corpus(&data)?;
            let record = Loaded::open(&checkpoint, &data)?.predict(&patient, &criterion, false)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string(&record)?),
                _ => println!(
                    "{} {} {:?} match={:.4} mismatch={:.4} unknown={:.4}",
                    record.patient_id,
                    record.criterion_id,
                    record.predicted_class,
                    record.probs[0],
                    record.probs[1],
                    record.probs[2]
                ),
            }
            Ok(())
        }
        Command::Explain {
            checkpoint,
            data,
            patient,
            criterion,
            format,
        } => {
            require_file(&checkpoint, "--checkpoint")?;
            require_corpus(&data)?;
            let record = Loaded::open(&checkpoint, &data)?.predict(&patient, &criterion, true)?;
            let tree = record.explanation.as_ref().expect("explanation requested");
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&record)?),
                Format::Dot => print!("{}", tree.to_dot()),
                Format::Text => {
                    println!(
                        "{} / {}: {:?} (p={:.4})",
                        record.patient_id,
                        record.criterion_id,
                        record.predicted_class,
                        record.probs[record.predicted_class.index()]
                    );
                    print!("{}", tree.to_text());
                }
            }
            Ok(())
        }
    }
}

fn embed(spec: &EmbedderSpec, descriptions: &Path, out: &Path) -> Result<()> {
    let embedder = spec.build()?;
    let body = fs::read_to_string(descriptions).with_context(|| format!("reading {}", descriptions.display()))?;
    let mut table = EmbeddingTable::new(embedder.dim());
    for line in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if table.get(line).is_none() {
            table.insert(line, embedder.embed(line)?)?;
        }
    }
    table.save(out)?;
    log::info!("embedded {} descriptions into {}", table.len(), out.display());
    Ok(())
}

fn codebook(data: &Path, spec: &EmbedderSpec) -> Result<CodeBook> {
    let ontology = Ontology::load(&data.join(ONTOLOGY_FILE))?;
    let embedder: Arc<dyn TextEmbedder> = Arc::from(spec.build()?);
    Ok(CodeBook::new(Arc::new(ontology), embedder))
}

fn train_command(
    data: &Path,
    out: &Path,
    model: memtree::data::ModelConfig,
    loss: memtree::model::LossConfig,
    spec: EmbedderSpec,
    config: &memtree::trainer::TrainConfig,
) -> Result<()> {
    let corpus = Corpus::load(data, config.seed)?;
    let codebook = codebook(data, &spec)?;
    let state = ModelState::new(model, loss, spec, config.seed)?;
    state.check_codebook(&codebook)?;
    let split = split_dataset(&corpus.pairs, config.seed)?;
    log::info!(
        "training on {} pairs, validating on {}, holding out {}; {} parameters",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        state.parameter_count()
    );
    let outcome = train(state, &corpus, &codebook, &split, config, |_| {})?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let extra = json!({
        "split_seed": config.seed,
        "best_epoch": outcome.best_epoch,
        "best_val_accuracy": outcome.best_val_accuracy,
        "train": config,
    });
    outcome.best.save(&out.join(CHECKPOINT_FILE), extra)?;
    write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    log::info!(
        "best epoch {} (val accuracy {:.4}); wrote {}",
        outcome.best_epoch,
        outcome.best_val_accuracy,
        out.display()
    );
    Ok(())
}

struct Loaded {
    state: ModelState,
    corpus: Corpus,
    codebook: CodeBook,
    split_seed: u64,
}

impl Loaded {
    fn open(checkpoint: &Path, data: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(checkpoint)?;
        let split_seed = ckpt
            .metadata
            .pointer("/extra/split_seed")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(0);
        let state = ModelState::from_checkpoint(&ckpt)?;
        let corpus = Corpus::load(data, split_seed)?;
        let codebook = codebook(data, &state.embedder)?;
        state.check_codebook(&codebook)?;
        Ok(Self {
            state,
            corpus,
            codebook,
            split_seed,
        })
    }

    fn pairs(&self, choice: SplitChoice) -> Result<Vec<LabeledPair>> {
        Ok(match choice {
            SplitChoice::All => self.corpus.pairs.clone(),
            SplitChoice::Test => split_dataset(&self.corpus.pairs, self.split_seed)?.test,
            SplitChoice::Val => split_dataset(&self.corpus.pairs, self.split_seed)?.val,
        })
    }

    fn predict(&self, patient: &str, criterion: &str, explain: bool) -> Result<PredictionRecord> {
        let record = self.corpus.patient(patient)?;
        let sentence = self.corpus.criterion(criterion)?;
        let (probs, explanation) = self.state.match_pair(
            record,
            sentence,
            &self.corpus.vocab,
            &self.codebook,
            self.state.config.inference_beam,
        )?;
        Ok(PredictionRecord {
            patient_id: patient.to_string(),
            trial_id: sentence.trial_id.clone(),
            criterion_id: criterion.to_string(),
            probs,
            predicted_class: MatchClass::argmax(&probs),
            explanation: explain.then_some(explanation),
        })
    }
}
