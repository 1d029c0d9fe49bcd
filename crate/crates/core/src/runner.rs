//! Configuration-driven runner for the six-cell experiment matrix
//! (pre-training: none / centralized / federated × fine-tuning:
//! centralized / federated) plus the attention comparison of the three
//! pre-fine-tuning models.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionProfile, AttentionReport};
use crate::data::{
    build_vocab, documents_to_records, encode_ner, generate_corpus, make_mlm_examples,
    ner_to_records, probe_sentences, read_jsonl, records_to_documents, records_to_ner,
    split_silos_by_note, split_silos_by_patient, write_jsonl, CorpusConfig, CorpusRecord, Document,
    Lexicons, MlmConfig, NerExample, NerSequence, Vocab,
};
use crate::error::{Error, Result};
use crate::fed::{
    run_centralized, run_federated, silo_seed, CycleMetrics, FedConfig, OptimizerPolicy,
    SiloHandle, Stage, StageData,
};
use crate::model::{load_checkpoint, ner_logits, save_checkpoint, ModelConfig, ParamSet};
use crate::ner::{decode_iob, prf1, token_accuracy, Scores, Span, Tag};
use crate::seed;
use crate::trainer::TrainerConfig;

/// Task column of the results table.
pub const TASK_NAME: &str = "ClinicalSim-NER";
pub const RESULTS_HEADER: &str = "Task\tPretraining\tfine tuning\tPrec\tRec\tF1";
pub const RESULTS_FILE: &str = "results.tsv";
pub const ATTENTION_FILE: &str = "attention_report.tsv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVALUATION_FILE: &str = "evaluation.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pretraining {
    /// Fine-tuning starts from the random initialization.
    None,
    Centralized,
    Federated,
}

impl Pretraining {
    pub const ALL: [Pretraining; 3] = [
        Pretraining::None,
        Pretraining::Centralized,
        Pretraining::Federated,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Pretraining::None => "BERTbase",
            Pretraining::Centralized => "ClinicalBERT",
            Pretraining::Federated => "Fed_ClinicalBERT",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| Error::Format(format!("unknown pre-training label {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finetuning {
    Centralized,
    Federated,
}

impl Finetuning {
    pub fn label(self) -> &'static str {
        match self {
            Finetuning::Centralized => "Centralized",
            Finetuning::Federated => "Federated",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        [Finetuning::Centralized, Finetuning::Federated]
            .into_iter()
            .find(|f| f.label() == s)
            .ok_or_else(|| Error::Format(format!("unknown fine-tuning label {s:?}")))
    }
}

/// One cell of the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExperimentSpec {
    /// 1-based experiment number.
    pub id: usize,
    pub pretraining: Pretraining,
    pub finetuning: Finetuning,
}

/// Experiments 1–6: the three pre-training conditions with centralized
/// fine-tuning, then the same three with federated fine-tuning.
pub fn experiment_matrix() -> Vec<ExperimentSpec> {
    [Finetuning::Centralized, Finetuning::Federated]
        .into_iter()
        .flat_map(|f| Pretraining::ALL.into_iter().map(move |p| (p, f)))
        .enumerate()
        .map(|(i, (pretraining, finetuning))| ExperimentSpec {
            id: i + 1,
            pretraining,
            finetuning,
        })
        .collect()
}

pub fn experiment(id: usize) -> Result<ExperimentSpec> {
    experiment_matrix()
        .into_iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::Config(format!("experiment must be in 1..=6, got {id}")))
}

/// Pre-existing corpus files (line-delimited JSON records).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFiles {
    pub documents: PathBuf,
    pub ner_train: PathBuf,
    pub ner_test: PathBuf,
}

impl CorpusFiles {
    /// `documents.jsonl`, `ner_train.jsonl` and `ner_test.jsonl` in `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            documents: dir.join("documents.jsonl"),
            ner_train: dir.join("ner_train.jsonl"),
            ner_test: dir.join("ner_test.jsonl"),
        }
    }
}

/// Writes the synthetic corpus described by `config` as line-delimited
/// JSON, in the layout `corpus_files` reads back.
pub fn export_corpus(config: &CorpusConfig, dir: impl AsRef<Path>) -> Result<CorpusFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let corpus = generate_corpus(config, &Lexicons::clinical())?;
    let files = CorpusFiles::in_dir(dir);
    write_jsonl(&documents_to_records(&corpus.documents), &files.documents)?;
    write_jsonl(&ner_to_records(&corpus.ner_train), &files.ner_train)?;
    write_jsonl(&ner_to_records(&corpus.ner_test), &files.ner_test)?;
    Ok(files)
}

/// Everything a matrix run needs. Every field has a desk-scale default, so
/// a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives initialization, silo assignment, masking, shuffling and
    /// dropout. The synthetic corpus has its own seed in `corpus`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    /// Read the corpus from files instead of generating it.
    pub corpus_files: Option<CorpusFiles>,
    /// `vocab_size` is an upper bound; the model uses the built vocabulary's
    /// actual size.
    pub model: ModelConfig,
    pub mlm: MlmConfig,
    /// Trainer settings per stage; their `seed` fields are derived from
    /// `seed` at run time.
    pub pretrain: TrainerConfig,
    pub finetune: TrainerConfig,
    pub silos: usize,
    pub cycles_pretrain: usize,
    pub epochs_pretrain: usize,
    pub cycles_finetune: usize,
    pub epochs_finetune: usize,
    pub local_epochs: usize,
    pub probe_sentences: usize,
    /// Train silos concurrently inside each global cycle.
    pub parallel_silos: bool,
    /// Run fine-tuning cells of the matrix concurrently.
    pub parallel_cells: bool,
    /// Write a checkpoint of every aggregated model, not only final ones.
    pub checkpoint_every_cycle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            corpus: CorpusConfig::default(),
            corpus_files: None,
            model: ModelConfig::desk(500),
            mlm: MlmConfig::default(),
            pretrain: TrainerConfig {
                learning_rate: 2e-3,
                batch_size: 16,
                ..TrainerConfig::pretrain_default()
            },
            finetune: TrainerConfig {
                learning_rate: 2e-3,
                batch_size: 8,
                ..TrainerConfig::finetune_default()
            },
            silos: 5,
            cycles_pretrain: 20,
            epochs_pretrain: 20,
            cycles_finetune: 6,
            epochs_finetune: 4,
            local_epochs: 1,
            probe_sentences: 128,
            parallel_silos: false,
            parallel_cells: false,
            checkpoint_every_cycle: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.silos == 0 {
            return Err(Error::Config("silos must be at least 1".into()));
        }
        let counts = [
            ("cycles_pretrain", self.cycles_pretrain),
            ("epochs_pretrain", self.epochs_pretrain),
            ("cycles_finetune", self.cycles_finetune),
            ("epochs_finetune", self.epochs_finetune),
            ("local_epochs", self.local_epochs),
            ("probe_sentences", self.probe_sentences),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        Ok(())
    }

    fn stream(&self, stream: u64) -> u64 {
        seed::derive(self.seed, &[stream])
    }
}

const INIT_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;
const PRETRAIN_STREAM: u64 = 4;
const FINETUNE_STREAM: u64 = 5;
const PROBE_STREAM: u64 = 6;

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub task: String,
    pub pretraining: Pretraining,
    pub finetuning: Finetuning,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ResultRow {
    pub fn experiment_id(&self) -> usize {
        experiment_matrix()
            .into_iter()
            .find(|e| e.pretraining == self.pretraining && e.finetuning == self.finetuning)
            .map(|e| e.id)
            .expect("every condition pair is in the matrix")
    }

    /// Floats use the shortest representation that parses back exactly.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.task,
            self.pretraining.label(),
            self.finetuning.label(),
            self.precision,
            self.recall,
            self.f1
        )
    }

    pub fn parse_tsv(line: &str) -> Result<Self> {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 6 {
            return Err(Error::Format(format!(
                "results row needs 6 cells: {line:?}"
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number {s:?}")))
        };
        Ok(Self {
            task: cells[0].to_owned(),
            pretraining: Pretraining::from_label(cells[1])?,
            finetuning: Finetuning::from_label(cells[2])?,
            precision: num(cells[3])?,
            recall: num(cells[4])?,
            f1: num(cells[5])?,
        })
    }
}

pub fn results_to_tsv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}

pub fn parse_results_tsv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(RESULTS_HEADER) => {}
        other => {
            return Err(Error::Format(format!(
                "unexpected results header {other:?}"
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(ResultRow::parse_tsv)
        .collect()
}

/// Predicted tags of every word; words cut off by the length limit are `O`.
pub fn predict_tags(
    config: &ModelConfig,
    params: &ParamSet,
    vocab: &Vocab,
    example: &NerExample,
) -> Result<Vec<Tag>> {
    let seq = encode_ner(vocab, example, config.max_seq_len)?;
    let logits = ner_logits(config, params, &seq.token_ids)?;
    let width = logits.last_dim();
    let mut tags = vec![Tag::O; example.tokens.len()];
    for (w, &pos) in seq.word_starts.iter().enumerate() {
        let row = &logits.data()[pos * width..(pos + 1) * width];
        let best = (0..width)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .expect("at least one label");
        tags[w] = Tag::from_id(best).ok_or_else(|| Error::Contract(format!("label id {best}")))?;
    }
    Ok(tags)
}

/// Span scores plus token accuracy over a labeled test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: Scores,
    pub token_accuracy: f64,
}

pub fn evaluate_ner(
    config: &ModelConfig,
    params: &ParamSet,
    vocab: &Vocab,
    test: &[NerExample],
) -> Result<Evaluation> {
    let mut gold_tags = Vec::with_capacity(test.len());
    let mut pred_tags = Vec::with_capacity(test.len());
    for ex in test {
        gold_tags.push(ex.tags.clone());
        pred_tags.push(predict_tags(config, params, vocab, ex)?);
    }
    let spans = |t: &Vec<Vec<Tag>>| -> Vec<Vec<Span>> { t.iter().map(|s| decode_iob(s)).collect() };
    Ok(Evaluation {
        scores: prf1(&spans(&gold_tags), &spans(&pred_tags))?,
        token_accuracy: token_accuracy(&gold_tags, &pred_tags)?,
    })
}

/// Data and model shape shared by every cell of a run.
#[derive(Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub init: ParamSet,
    pub pretrain_silos: Vec<SiloHandle>,
    pub pretrain_central: StageData,
    pub finetune_silos: Vec<SiloHandle>,
    pub finetune_central: StageData,
    pub test: Vec<NerExample>,
    pub probes: Vec<Vec<usize>>,
}

/// Builds the corpus, vocabulary, silo partitions and initial model.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let lexicons = Lexicons::clinical();
    let (documents, ner_train, test): (Vec<Document>, Vec<NerExample>, Vec<NerExample>) =
        match &config.corpus_files {
            Some(files) => (
                records_to_documents(read_jsonl::<CorpusRecord>(&files.documents)?)?,
                records_to_ner(read_jsonl::<CorpusRecord>(&files.ner_train)?)?,
                records_to_ner(read_jsonl::<CorpusRecord>(&files.ner_test)?)?,
            ),
            None => {
                let c = generate_corpus(&config.corpus, &lexicons)?;
                (c.documents, c.ner_train, c.ner_test)
            }
        };
    if ner_train.is_empty() || test.is_empty() {
        return Err(Error::Config(
            "NER train and test splits must be nonempty".into(),
        ));
    }
    let vocab = build_vocab(
        documents
            .iter()
            .flat_map(|d| d.sentences.iter().map(Vec::as_slice)),
        config.model.vocab_size,
    )?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..config.model.clone()
    };
    model.validate()?;
    let init = ParamSet::init(&model, config.stream(INIT_STREAM))?;

    let split_seed = config.stream(SPLIT_STREAM);
    let pretrain_seed = config.stream(PRETRAIN_STREAM);
    let pretrain_silos = split_silos_by_patient(&documents, config.silos, split_seed)?
        .into_iter()
        .map(|s| {
            let mask_seed = seed::derive(config.stream(MASK_STREAM), &[s.index as u64]);
            let examples =
                make_mlm_examples(&vocab, &s.items, model.max_seq_len, mask_seed, &config.mlm)?;
            if examples.is_empty() {
                return Err(Error::Split(format!(
                    "silo {} has no document with two sentences",
                    s.index
                )));
            }
            Ok(SiloHandle {
                index: s.index,
                data: StageData::Pretrain(examples),
                sample_size: s.sample_size as u64,
                seed: silo_seed(pretrain_seed, s.index),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let finetune_seed = config.stream(FINETUNE_STREAM);
    let finetune_silos = split_silos_by_note(&ner_train, config.silos, split_seed)?
        .into_iter()
        .map(|s| {
            let seqs = s
                .items
                .iter()
                .map(|e| encode_ner(&vocab, e, model.max_seq_len))
                .collect::<Result<Vec<NerSequence>>>()?;
            Ok(SiloHandle {
                index: s.index,
                data: StageData::Finetune(seqs),
                sample_size: s.sample_size as u64,
                seed: silo_seed(finetune_seed, s.index),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let probes = probe_sentences(
        &lexicons,
        config.stream(PROBE_STREAM),
        config.probe_sentences,
    )?
    .iter()
    .map(|s| s.iter().flat_map(|w| vocab.tokenize_word(w)).collect())
    .collect::<Vec<Vec<usize>>>();
    Ok(Prepared {
        pretrain_central: StageData::merge(pretrain_silos.iter().map(|s| &s.data))?,
        finetune_central: StageData::merge(finetune_silos.iter().map(|s| &s.data))?,
        vocab,
        model,
        init,
        pretrain_silos,
        finetune_silos,
        test,
        probes: crate::attention::probe_inputs(&probes, config.model.max_seq_len),
    })
}

/// Outcome of a matrix run.
#[derive(Debug)]
pub struct MatrixOutcome {
    /// Every row now in `results.tsv`, in experiment order.
    pub rows: Vec<ResultRow>,
    /// Experiments actually executed by this call.
    pub executed: Vec<usize>,
    /// Failed experiments (or the attention report) with their error.
    pub failures: Vec<(String, Error)>,
    pub report: Option<AttentionReport>,
}

/// Executes experiments and writes every report under `config.out_dir`.
pub struct Runner {
    config: RunConfig,
    prepared: Prepared,
    pretrained: BTreeMap<Pretraining, ParamSet>,
    resume: bool,
}

impl Runner {
    pub fn new(config: RunConfig, resume: bool) -> Result<Self> {
        let prepared = prepare(&config)?;
        fs::create_dir_all(config.out_dir.join(CHECKPOINT_DIR))
            .map_err(|e| Error::io(&config.out_dir, e))?;
        prepared.vocab.save(config.out_dir.join(VOCAB_FILE))?;
        let resolved = serde_json::to_string_pretty(&config)?;
        let path = config.out_dir.join("config.json");
        fs::write(&path, resolved).map_err(|e| Error::io(&path, e))?;
        if !resume {
            for f in [RESULTS_FILE, METRICS_FILE, EVALUATION_FILE, ATTENTION_FILE] {
                let p = config.out_dir.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        Ok(Self {
            config,
            prepared,
            pretrained: BTreeMap::new(),
            resume,
        })
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prepared
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.config
            .out_dir
            .join(CHECKPOINT_DIR)
            .join(format!("{name}.fcrp"))
    }

    fn append_metrics(&self, lines: &[CycleMetrics]) -> Result<()> {
        let path = self.out(METRICS_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        // One write per batch keeps lines whole when cells run concurrently.
        let mut text = String::new();
        for m in lines {
            text.push_str(&serde_json::to_string(m)?);
            text.push('\n');
        }
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    /// Appends the full evaluation of one experiment, token accuracy
    /// included, as a JSON line.
    fn append_evaluation(&self, id: usize, eval: &Evaluation) -> Result<()> {
        let path = self.out(EVALUATION_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line =
            serde_json::to_string(&serde_json::json!({ "experiment": id, "evaluation": eval }))?;
        line.push('\n');
        f.write_all(line.as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    /// Parameters after the given pre-training condition, computed once per
    /// runner (or reloaded from its checkpoint when resuming).
    pub fn pretrained(&mut self, condition: Pretraining) -> Result<ParamSet> {
        if let Some(p) = self.pretrained.get(&condition) {
            return Ok(p.clone());
        }
        let name = format!("pretrain_{condition:?}").to_lowercase();
        let path = self.checkpoint_path(&name);
        let params = if condition == Pretraining::None {
            self.prepared.init.clone()
        } else if self.resume && path.exists() {
            let p = load_checkpoint(&path)?;
            if let Some(m) = p.layout_mismatch(&self.prepared.model) {
                return Err(Error::Format(format!(
                    "stale checkpoint {}: {m}",
                    path.display()
                )));
            }
            p
        } else {
            let context = format!("pre-training ({})", condition.label());
            let params = self
                .train_stage(
                    Stage::Pretrain,
                    condition == Pretraining::Federated,
                    &self.prepared.init.clone(),
                    &name,
                )
                .map_err(|e| e.context(context))?;
            save_checkpoint(&params, &path)?;
            params
        };
        self.pretrained.insert(condition, params.clone());
        Ok(params)
    }

    fn train_stage(
        &self,
        stage: Stage,
        federated: bool,
        start: &ParamSet,
        tag: &str,
    ) -> Result<ParamSet> {
        let (silos, central, trainer, cycles, epochs, stream) = match stage {
            Stage::Pretrain => (
                &self.prepared.pretrain_silos,
                &self.prepared.pretrain_central,
                &self.config.pretrain,
                self.config.cycles_pretrain,
                self.config.epochs_pretrain,
                PRETRAIN_STREAM,
            ),
            Stage::Finetune => (
                &self.prepared.finetune_silos,
                &self.prepared.finetune_central,
                &self.config.finetune,
                self.config.cycles_finetune,
                self.config.epochs_finetune,
                FINETUNE_STREAM,
            ),
        };
        let trainer = trainer.with_seed(self.config.stream(stream));
        let model = &self.prepared.model;
        if federated {
            let fed = FedConfig {
                cycles,
                local_epochs: self.config.local_epochs,
                parallel: self.config.parallel_silos,
            };
            let history = run_federated(model, start, silos, &fed, &trainer)?;
            let mut lines = Vec::with_capacity(history.len());
            for state in &history {
                let path = (self.config.checkpoint_every_cycle || state.cycle == history.len())
                    .then(|| self.checkpoint_path(&format!("{tag}_cycle{:02}", state.cycle)));
                if let Some(p) = &path {
                    save_checkpoint(&state.params, p)?;
                }
                let mut m =
                    CycleMetrics::from_state(state, stage, path.map(|p| p.display().to_string()));
                m.experiment = Some(tag.to_owned());
                lines.push(m);
            }
            self.append_metrics(&lines)?;
            Ok(history.last().expect("at least one cycle").params.clone())
        } else {
            let (params, stats) = run_centralized(
                model,
                start,
                central,
                epochs,
                &trainer,
                OptimizerPolicy::ResetEachEpoch,
            )?;
            let lines: Vec<CycleMetrics> = stats
                .iter()
                .enumerate()
                .map(|(e, s)| CycleMetrics {
                    cycle: e + 1,
                    silo_losses: vec![s.mean_loss],
                    aggregate_checkpoint_path: None,
                    experiment: Some(tag.to_owned()),
                    stage: Some(stage),
                    mean_mlm_loss: s.mean_mlm_loss,
                    wall_clock_secs: s.wall_clock_secs,
                })
                .collect();
            self.append_metrics(&lines)?;
            Ok(params)
        }
    }

    /// Fine-tunes from an already pre-trained model and scores the test split.
    fn finetune_and_score(&self, spec: ExperimentSpec, start: &ParamSet) -> Result<ResultRow> {
        let tag = format!("exp{}", spec.id);
        let params = self
            .train_stage(
                Stage::Finetune,
                spec.finetuning == Finetuning::Federated,
                start,
                &tag,
            )
            .map_err(|e| e.context(format!("experiment {} fine-tuning", spec.id)))?;
        save_checkpoint(&params, self.checkpoint_path(&format!("{tag}_final")))?;
        let eval = evaluate_ner(
            &self.prepared.model,
            &params,
            &self.prepared.vocab,
            &self.prepared.test,
        )?;
        self.append_evaluation(spec.id, &eval)?;
        Ok(ResultRow {
            task: TASK_NAME.to_owned(),
            pretraining: spec.pretraining,
            finetuning: spec.finetuning,
            precision: eval.scores.precision,
            recall: eval.scores.recall,
            f1: eval.scores.f1,
        })
    }

    /// Runs one cell end to end and records its row in `results.tsv`.
    pub fn run_experiment(&mut self, spec: ExperimentSpec) -> Result<ResultRow> {
        let start = self.pretrained(spec.pretraining)?;
        let row = self.finetune_and_score(spec, &start)?;
        self.record_rows(std::slice::from_ref(&row))?;
        Ok(row)
    }

    fn existing_rows(&self) -> Result<Vec<ResultRow>> {
        let path = self.out(RESULTS_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        parse_results_tsv(&text)
    }

    /// Merges rows into `results.tsv`, keeping experiment order.
    fn record_rows(&self, rows: &[ResultRow]) -> Result<Vec<ResultRow>> {
        let mut all: BTreeMap<usize, ResultRow> = self
            .existing_rows()?
            .into_iter()
            .map(|r| (r.experiment_id(), r))
            .collect();
        for r in rows {
            all.insert(r.experiment_id(), r.clone());
        }
        let rows: Vec<ResultRow> = all.into_values().collect();
        let path = self.out(RESULTS_FILE);
        fs::write(&path, results_to_tsv(&rows)).map_err(|e| Error::io(&path, e))?;
        Ok(rows)
    }

    /// Runs the selected experiments (all six by default), skipping rows
    /// already present when resuming, then the attention comparison.
    /// Failures are collected; completed rows are always written.
    pub fn run_matrix(&mut self, only: Option<&[usize]>) -> Result<MatrixOutcome> {
        let selected: Vec<ExperimentSpec> = match only {
            Some(ids) => ids
                .iter()
                .map(|&id| experiment(id))
                .collect::<Result<_>>()?,
            None => experiment_matrix(),
        };
        let done: Vec<usize> = if self.resume {
            self.existing_rows()?
                .iter()
                .map(ResultRow::experiment_id)
                .collect()
        } else {
            Vec::new()
        };
        let todo: Vec<ExperimentSpec> = selected
            .into_iter()
            .filter(|s| !done.contains(&s.id))
            .collect();

        let mut failures = Vec::new();
        let mut ready = Vec::new();
        for spec in &todo {
            match self.pretrained(spec.pretraining) {
                Ok(p) => ready.push((*spec, p)),
                Err(e) => failures.push((format!("experiment {}", spec.id), e)),
            }
        }
        let results = self.finetune_cells(&ready);
        let mut executed = Vec::new();
        let mut rows = self.existing_rows()?;
        for ((spec, _), result) in ready.iter().zip(results) {
            match result {
                Ok(row) => {
                    rows = self.record_rows(&[row])?;
                    executed.push(spec.id);
                }
                Err(e) => failures.push((format!("experiment {}", spec.id), e)),
            }
        }

        let report = if only.is_none() {
            match self.attention_report() {
                Ok(r) => Some(r),
                Err(e) => {
                    failures.push(("attention report".into(), e));
                    None
                }
            }
        } else {
            None
        };
        Ok(MatrixOutcome {
            rows,
            executed,
            failures,
            report,
        })
    }

    fn finetune_cells(&self, ready: &[(ExperimentSpec, ParamSet)]) -> Vec<Result<ResultRow>> {
        #[cfg(feature = "parallel")]
        if self.config.parallel_cells {
            use rayon::prelude::*;
            return ready
                .par_iter()
                .map(|(s, p)| self.finetune_and_score(*s, p))
                .collect();
        }
        ready
            .iter()
            .map(|(s, p)| self.finetune_and_score(*s, p))
            .collect()
    }

    /// Compares the three pre-fine-tuning models on the probe corpus and
    /// writes `attention_report.tsv`.
    pub fn attention_report(&mut self) -> Result<AttentionReport> {
        let mut profiles = Vec::with_capacity(3);
        for condition in Pretraining::ALL {
            let params = self.pretrained(condition)?;
            profiles.push(AttentionProfile::compute(
                condition.label(),
                &self.prepared.model,
                &params,
                &self.prepared.probes,
            )?);
        }
        let report = AttentionReport::build(&profiles)?;
        let path = self.out(ATTENTION_FILE);
        fs::write(&path, report.to_tsv()).map_err(|e| Error::io(&path, e))?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_covers_the_six_cells_in_order() {
        let m = experiment_matrix();
        assert_eq!(m.len(), 6);
        let expect = [
            (Pretraining::None, Finetuning::Centralized),
            (Pretraining::Centralized, Finetuning::Centralized),
            (Pretraining::Federated, Finetuning::Centralized),
            (Pretraining::None, Finetuning::Federated),
            (Pretraining::Centralized, Finetuning::Federated),
            (Pretraining::Federated, Finetuning::Federated),
        ];
        for (i, (spec, (p, f))) in m.iter().zip(expect).enumerate() {
            assert_eq!(spec.id, i + 1);
            assert_eq!((spec.pretraining, spec.finetuning), (p, f));
        }
        assert!(experiment(0).is_err());
        assert!(experiment(7).is_err());
    }

    #[test]
    fn results_round_trip_losslessly() {
        let rows: Vec<ResultRow> = experiment_matrix()
            .iter()
            .map(|e| ResultRow {
                task: TASK_NAME.into(),
                pretraining: e.pretraining,
                finetuning: e.finetuning,
                precision: 1.0 / 3.0,
                recall: 0.1 + 0.2,
                f1: e.id as f64 / 7.0,
            })
            .collect();
        let text = results_to_tsv(&rows);
        assert!(text.starts_with("Task\tPretraining\tfine tuning\tPrec\tRec\tF1\n"));
        assert_eq!(parse_results_tsv(&text).unwrap(), rows);
        assert!(parse_results_tsv("bad header\n").is_err());
        assert_eq!(rows[4].experiment_id(), 5);
    }

    #[test]
    fn config_defaults_fill_missing_fields() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "silos": 2}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.silos, 2);
        assert_eq!(c.cycles_pretrain, 20);
        assert_eq!(c.cycles_finetune, 6);
        assert_eq!(c.epochs_finetune, 4);
        let bad = RunConfig {
            silos: 0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
