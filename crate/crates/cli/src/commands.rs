//! One function per subcommand. Each reads its inputs from the paths in the
//! run config and writes its artifacts back under `paths.root`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rar_core::corpus::{ingest_sources, link_mentions, CorpusIndex, IngestReport};
use rar_core::datasets::{read_interactions, sessionize, split_conversation, split_dataset, subsample, Conversation, Session, TrainingExample};
use rar_core::embedding::{build_embeddings, EmbeddingProvider, EmbeddingTable, HashEmbedder, HttpEmbedder};
use rar_core::eval::{evaluate, EvalReport, RecEnv};
use rar_core::generator::{EchoGenerator, Generator, HttpGenerator, MockGenerator};
use rar_core::jsonl;
use rar_core::metrics::item_counts;
use rar_core::preference::{train_rl, Algorithm, CheckpointMeta, TrainOutcome, Validator};
use rar_core::retriever::checkpoint::Checkpoint;
use rar_core::retriever::pretrain::{pretrain, PretrainConfig};
use rar_core::retriever::RetrieverParams;
use rar_core::seed::SeedStream;
use rar_core::synthetic::generate_world;
use rar_core::RarError;
use serde::{Deserialize, Serialize};

use crate::config::{GeneratorKind, ProviderKind, RunConfig};
use crate::CliError;

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RarError::io(dir, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let body = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, body + "\n").map_err(|e| RarError::io(path, e))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    ensure_parent(path)?;
    Ok(jsonl::write(path, items)?)
}

pub struct Layout<'a>(&'a RunConfig);

impl Layout<'_> {
    fn p(&self, rel: &Path) -> PathBuf {
        self.0.paths.resolve(rel)
    }
    pub fn corpus(&self) -> PathBuf {
        self.p(&self.0.paths.corpus)
    }
    pub fn ingest_report(&self) -> PathBuf {
        self.p(&self.0.paths.ingest_report)
    }
    pub fn embeddings(&self) -> PathBuf {
        self.p(&self.0.paths.embeddings)
    }
    pub fn conversations(&self) -> PathBuf {
        self.p(&self.0.paths.conversations)
    }
    pub fn interactions(&self) -> PathBuf {
        self.p(&self.0.paths.interactions)
    }
    pub fn split(&self, name: &str) -> PathBuf {
        self.p(&self.0.paths.data_dir).join(format!("{name}.jsonl"))
    }
    pub fn sessions(&self) -> PathBuf {
        self.p(&self.0.paths.data_dir).join("sessions.jsonl")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.p(&self.0.paths.checkpoints_dir).join("pretrained.json")
    }
    pub fn trained(&self, algorithm: Algorithm) -> PathBuf {
        self.p(&self.0.paths.checkpoints_dir).join(format!("{algorithm}.json"))
    }
    pub fn sidecar(&self, algorithm: Algorithm) -> PathBuf {
        self.p(&self.0.paths.checkpoints_dir).join(format!("{algorithm}.meta.json"))
    }
    pub fn train_log(&self, algorithm: Algorithm) -> PathBuf {
        self.p(&self.0.paths.logs_dir).join(format!("train_{algorithm}.jsonl"))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.p(&self.0.paths.reports_dir).join(format!("eval_{name}.json"))
    }
}

pub fn layout(cfg: &RunConfig) -> Layout<'_> {
    Layout(cfg)
}

// ---- ingest -------------------------------------------------------------

pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestReport, CliError> {
    if cfg.paths.corpus_sources.is_empty() {
        return Err(CliError::Config("paths.corpus_sources lists no source files".into()));
    }
    let sources: Vec<PathBuf> = cfg.paths.corpus_sources.iter().map(|p| cfg.paths.resolve(p)).collect();
    let (index, report) = ingest_sources(&sources, cfg.data.conflict_policy)?;
    let l = layout(cfg);
    ensure_parent(&l.corpus())?;
    index.write_jsonl(&l.corpus())?;
    write_json(&l.ingest_report(), &report)?;
    log::info!(
        "ingested {} records into {} entries ({} merged)",
        report.records_read,
        report.size,
        report.merged_duplicates
    );
    Ok(report)
}

// ---- embed --------------------------------------------------------------

fn provider(cfg: &RunConfig) -> Result<Box<dyn EmbeddingProvider>, CliError> {
    Ok(match cfg.embedding.provider {
        ProviderKind::Hash => Box::new(HashEmbedder::new(cfg.embedding.dim)?),
        ProviderKind::Http => Box::new(HttpEmbedder::new(
            cfg.embedding.http.clone(),
            cfg.embedding.model.clone(),
            cfg.embedding.dim,
        )?),
    })
}

pub fn cmd_embed(cfg: &RunConfig) -> Result<EmbeddingTable, CliError> {
    let l = layout(cfg);
    let index = CorpusIndex::read_jsonl(&l.corpus())?;
    let table = build_embeddings(&index, provider(cfg)?.as_ref(), cfg.exec())?;
    ensure_parent(&l.embeddings())?;
    table.write(&l.embeddings())?;
    log::info!("embedded {} entries at dim {}", table.len(), table.dim());
    Ok(table)
}

// ---- preprocess ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub conversations: usize,
    pub unresolved_mentions: usize,
    pub examples: usize,
    pub skipped_repeats: usize,
    /// Training examples before the subsampling cap.
    pub subsampled_from: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub sessions: usize,
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<PreprocessReport, CliError> {
    let l = layout(cfg);
    let index = CorpusIndex::read_jsonl(&l.corpus())?;
    let convs: Vec<Conversation> = jsonl::read(&l.conversations())?;
    let mut examples = Vec::new();
    let (mut unresolved, mut repeats) = (0, 0);
    for conv in &convs {
        let linked = link_mentions(conv, &index);
        unresolved += linked.unresolved.len();
        let (ex, stats) = split_conversation(&linked, cfg.data.max_history);
        repeats += stats.skipped_repeats;
        examples.push(ex);
    }
    // split by conversation so no dialogue straddles two splits
    let seed = SeedStream::new(cfg.seed).stream("data").value();
    let (train, val, test) = split_dataset(&examples, cfg.data.split, seed)?;
    let flat = |v: Vec<Vec<TrainingExample>>| v.into_iter().flatten().collect::<Vec<_>>();
    let (train, val, test) = (flat(train), flat(val), flat(test));
    let before = train.len();
    let train = subsample(&train, cfg.data.subsample_cap, seed);
    write_jsonl(&l.split("train"), &train)?;
    write_jsonl(&l.split("val"), &val)?;
    write_jsonl(&l.split("test"), &test)?;

    let sessions = match l.interactions() {
        p if p.exists() => sessionize(&read_interactions(&p)?, cfg.data.session_gap_secs),
        _ => Vec::new(),
    };
    write_jsonl(&l.sessions(), &sessions)?;
    let report = PreprocessReport {
        conversations: convs.len(),
        unresolved_mentions: unresolved,
        examples: examples.iter().map(Vec::len).sum(),
        skipped_repeats: repeats,
        subsampled_from: before,
        train: train.len(),
        val: val.len(),
        test: test.len(),
        sessions: sessions.len(),
    };
    write_json(&l.p(&cfg.paths.data_dir).join("report.json"), &report)?;
    Ok(report)
}

// ---- pretrain -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub losses: Vec<f64>,
}

/// Pretrains to `pretrain.total_steps`, or stops early at optimizer step
/// `until` with a resumable checkpoint.
pub fn cmd_pretrain(cfg: &RunConfig, resume: bool, until: Option<u64>) -> Result<PretrainReport, CliError> {
    let l = layout(cfg);
    let table = EmbeddingTable::read(&l.embeddings())?;
    let sessions: Vec<Session> = jsonl::read(&l.sessions())?;
    let sequences: Vec<Vec<String>> = sessions.into_iter().map(|s| s.item_ids).collect();
    let (mut params, mut opt) = if resume && l.pretrained().exists() {
        let ck = Checkpoint::load(&l.pretrained())?;
        let opt = ck.optimizer.ok_or_else(|| CliError::Config("checkpoint has no optimizer state to resume".into()))?;
        (ck.params, opt)
    } else {
        let init_seed = SeedStream::new(cfg.seed).stream(rar_core::seed::INIT).value();
        (RetrieverParams::init(cfg.shape(), init_seed)?, cfg.pretrain.optimizer()?)
    };
    if params.dim != table.dim() {
        return Err(CliError::Config(format!(
            "embedding dim {} does not match retriever dim {}",
            table.dim(),
            params.dim
        )));
    }
    let stop = PretrainConfig {
        total_steps: until.map_or(cfg.pretrain.total_steps, |u| u.min(cfg.pretrain.total_steps)),
        ..cfg.pretrain.clone()
    };
    let losses = pretrain(&mut params, &mut opt, &sequences, &table, &stop, cfg.exec())?;
    let steps = opt.step;
    ensure_parent(&l.pretrained())?;
    Checkpoint::new(params, Some(opt)).save(&l.pretrained())?;
    let report = PretrainReport {
        steps,
        first_loss: losses.first().copied(),
        last_loss: losses.last().copied(),
        losses,
    };
    write_json(&l.p(&cfg.paths.logs_dir).join("pretrain.json"), &report)?;
    Ok(report)
}

// ---- train / eval -------------------------------------------------------

/// Corpus, embeddings and generator shared by training and evaluation.
pub struct Runtime {
    pub table: Arc<EmbeddingTable>,
    pub corpus: CorpusIndex,
    pub generator: Box<dyn Generator>,
}

impl Runtime {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let l = layout(cfg);
        let table = Arc::new(EmbeddingTable::read(&l.embeddings())?);
        let corpus = CorpusIndex::read_jsonl(&l.corpus())?;
        let generator: Box<dyn Generator> = match cfg.generator.kind {
            GeneratorKind::Mock => Box::new(MockGenerator::new(table.clone(), cfg.generator.noise_scale, cfg.mock_seed())?),
            GeneratorKind::Echo => Box::new(EchoGenerator),
            GeneratorKind::Http => Box::new(HttpGenerator::new(cfg.generator.endpoint.clone())?),
        };
        Ok(Runtime { table, corpus, generator })
    }

    pub fn env(&self, exec: rar_core::Exec) -> RecEnv<'_> {
        RecEnv {
            table: &self.table,
            corpus: &self.corpus,
            generator: self.generator.as_ref(),
            exec,
        }
    }
}

pub fn train_counts(cfg: &RunConfig) -> Result<HashMap<String, usize>, CliError> {
    let train: Vec<TrainingExample> = jsonl::read(&layout(cfg).split("train"))?;
    Ok(item_counts(&train))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let l = layout(cfg);
    let rt = Runtime::load(cfg)?;
    let train: Vec<TrainingExample> = jsonl::read(&l.split("train"))?;
    let val: Vec<TrainingExample> = jsonl::read(&l.split("val"))?;
    let counts = item_counts(&train);
    let start = Checkpoint::load(&l.pretrained())?.params;
    let validator = Validator {
        examples: &val,
        train_counts: &counts,
        eval: &cfg.eval,
    };
    let algorithm = cfg.train.algorithm;
    let log_path = l.train_log(algorithm);
    ensure_parent(&log_path)?;
    let file = fs::File::create(&log_path).map_err(|e| RarError::io(&log_path, e))?;
    let mut sink = BufWriter::new(file);
    let mut io_err = None;
    let outcome = train_rl(
        &train,
        start,
        &rt.env(cfg.exec()),
        &cfg.train,
        (!val.is_empty()).then_some(&validator),
        &cfg.hash(),
        |rec| {
            if io_err.is_none() {
                if let Err(e) = jsonl::append(&mut sink, rec) {
                    io_err = Some(e);
                }
            }
        },
    )?;
    if let Some(e) = io_err.or_else(|| sink.flush().err()) {
        return Err(RarError::io(&log_path, e).into());
    }
    ensure_parent(&l.trained(algorithm))?;
    Checkpoint::new(outcome.best.clone(), None).save(&l.trained(algorithm))?;
    write_json(
        &l.sidecar(algorithm),
        &CheckpointMeta {
            config_hash: cfg.hash(),
            best_val_ndcg10: outcome.best_val_ndcg10,
            step: outcome.best_step,
        },
    )?;
    log::info!(
        "{algorithm}: {} steps, {} abstained, {} generator failures, best validation N@10 {:?} at step {}",
        outcome.log.len(),
        outcome.abstentions,
        outcome.failures,
        outcome.best_val_ndcg10,
        outcome.best_step
    );
    Ok(outcome)
}

/// Evaluates a checkpoint on the test split and writes `eval_<name>.json`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, name: &str) -> Result<EvalReport, CliError> {
    let l = layout(cfg);
    if !checkpoint.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let params = Checkpoint::load(checkpoint)?.params;
    let rt = Runtime::load(cfg)?;
    let test: Vec<TrainingExample> = jsonl::read(&l.split("test"))?;
    let counts = train_counts(cfg)?;
    let report = evaluate(&params, &rt.env(cfg.exec()), &test, &counts, &cfg.eval, &cfg.hash(), cfg.seed)?;
    ensure_parent(&l.report(name))?;
    report.write(&l.report(name))?;
    Ok(report)
}

pub fn default_eval_checkpoint(cfg: &RunConfig) -> PathBuf {
    match &cfg.paths.eval_checkpoint {
        Some(p) => cfg.paths.resolve(p),
        None => layout(cfg).trained(cfg.train.algorithm),
    }
}

// ---- simulate -----------------------------------------------------------

#[derive(Debug)]
pub struct SimulationOutcome {
    pub preprocess: PreprocessReport,
    pub pretrain: PretrainReport,
    pub rl: TrainOutcome,
    pub rl_report: EvalReport,
    pub baseline: Option<(TrainOutcome, EvalReport)>,
}

/// Synthetic world → ingest → embed → preprocess → pretrain → train → eval,
/// all under `paths.root`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulationOutcome, CliError> {
    let world = generate_world(&cfg.world)?;
    let root = &cfg.paths.root;
    let source = PathBuf::from("world/items.jsonl");
    write_jsonl(&root.join(&source), &world.items)?;

    let mut cfg = cfg.clone();
    cfg.paths.corpus_sources = vec![source];
    let l = layout(&cfg);
    write_jsonl(&l.conversations(), &world.conversations)?;
    write_jsonl(&l.interactions(), &world.interactions)?;

    cmd_ingest(&cfg)?;
    cmd_embed(&cfg)?;
    let preprocess = cmd_preprocess(&cfg)?;
    let pretrain = cmd_pretrain(&cfg, false, None)?;

    let rl = cmd_train(&cfg)?;
    let algorithm = cfg.train.algorithm;
    let rl_report = cmd_eval(&cfg, &layout(&cfg).trained(algorithm), algorithm.name())?;

    let baseline = if cfg.simulate.baseline && algorithm != Algorithm::Sft {
        let mut sft = cfg.clone();
        sft.train.algorithm = Algorithm::Sft;
        let outcome = cmd_train(&sft)?;
        let report = cmd_eval(&sft, &layout(&sft).trained(Algorithm::Sft), "sft")?;
        Some((outcome, report))
    } else {
        None
    };
    Ok(SimulationOutcome {
        preprocess,
        pretrain,
        rl,
        rl_report,
        baseline,
    })
}
