//! The demo's operations as plain Rust, so they can be tested natively.

use fedbert::attention::{self, AttentionProfile};
use fedbert::data::{build_vocab, probe_sentences, Lexicons, Vocab};
use fedbert::fed;
use fedbert::model::{read_checkpoint, ModelConfig, ParamSet};
use fedbert::ner::{self, Span};
use fedbert::runner::RunConfig;
use fedbert::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Deserialize)]
pub struct SiloInput {
    pub n: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregation {
    /// `n_k / N` for each silo, in input order.
    pub weights: Vec<f64>,
    pub aggregate: Vec<f64>,
}

/// FedAvg over silos that each hold a single parameter vector.
pub fn aggregate(silos: &[SiloInput]) -> Result<Aggregation> {
    let sets = silos
        .iter()
        .map(|s| {
            let t = Tensor::new(vec![s.values.len()], s.values.clone())?;
            ParamSet::new(vec![("w".to_string(), t)])
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&ParamSet, u64)> = sets.iter().zip(silos.iter().map(|s| s.n)).collect();
    let global = fed::aggregate(&pairs)?;
    let total: u64 = silos.iter().map(|s| s.n).sum();
    Ok(Aggregation {
        weights: silos.iter().map(|s| s.n as f64 / total as f64).collect(),
        aggregate: global.get("w").expect("single entry").data().to_vec(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionView {
    pub tokens: Vec<String>,
    pub num_layers: usize,
    pub num_heads: usize,
    /// `entropy[l][a]`, in nats.
    pub entropy: Vec<Vec<f64>>,
    pub max_entropy: f64,
    /// `attention[l * heads + a]` is the `[n][n]` matrix of that head.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Pairwise head JSD, `[L·A][L·A]`.
    pub jsd: Vec<Vec<f64>>,
    /// 2-D classical MDS of the JSD matrix, one point per head.
    pub mds: Vec<[f64; 2]>,
}

/// A model plus its vocabulary, ready to look at attention patterns.
pub struct Lab {
    config: ModelConfig,
    params: ParamSet,
    vocab: Vocab,
    pub source: String,
}

impl Lab {
    /// Untrained encoder of the desk shape over a vocabulary learned from
    /// synthetic clinical sentences.
    pub fn random(seed: u64) -> Result<Self> {
        let sentences = probe_sentences(&Lexicons::clinical(), seed, 400)?;
        let vocab = build_vocab(sentences.iter().map(|s| s.as_slice()), 500)?;
        let config = ModelConfig::desk(vocab.len());
        let params = ParamSet::init(&config, seed)?;
        Ok(Self {
            config,
            params,
            vocab,
            source: format!("random initialization (seed {seed})"),
        })
    }

    /// A model saved by the experiment runner: its `config.json`, `vocab.txt`
    /// and one checkpoint file.
    pub fn from_run(config_json: &str, vocab_txt: &str, checkpoint: &[u8]) -> Result<Self> {
        let run: RunConfig = serde_json::from_str(config_json)
            .map_err(|e| Error::Config(format!("config.json: {e}")))?;
        let vocab = Vocab::from_tokens(vocab_txt.lines().map(str::to_string).collect())?;
        let mut config = run.model;
        config.vocab_size = vocab.len();
        let params = read_checkpoint(checkpoint)?;
        if let Some(m) = params.layout_mismatch(&config) {
            return Err(Error::Config(format!(
                "checkpoint does not match config.json: {m}"
            )));
        }
        Ok(Self {
            config,
            params,
            vocab,
            source: "uploaded checkpoint".into(),
        })
    }

    pub fn analyze(&self, text: &str) -> Result<AttentionView> {
        let ids = self.vocab.tokenize(text);
        if ids.is_empty() {
            return Err(Error::Contract("enter at least one word".into()));
        }
        let probes = attention::probe_inputs(&[ids], self.config.max_seq_len);
        let captures = attention::capture_attention(&self.config, &self.params, &probes)?;
        let profile = AttentionProfile::from_captures("demo", &captures)?;
        let capture = &captures[0];
        let (layers, heads) = (capture.num_layers, capture.num_heads);
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            let n = t.shape()[1];
            t.data().chunks(n).map(<[f64]>::to_vec).collect()
        };
        let tokens = probes[0]
            .iter()
            .map(|&id| self.vocab.token(id).unwrap_or("[UNK]").to_string())
            .collect::<Vec<_>>();
        Ok(AttentionView {
            max_entropy: (tokens.len() as f64).ln(),
            tokens,
            num_layers: layers,
            num_heads: heads,
            entropy: rows(&profile.entropy),
            attention: capture.heads.iter().map(rows).collect(),
            mds: attention::mds_project_2d(&profile.jsd_matrix)?,
            jsd: rows(&profile.jsd_matrix),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpanView {
    pub class: &'static str,
    pub start: usize,
    pub end: usize,
}

impl From<&Span> for SpanView {
    fn from(s: &Span) -> Self {
        Self {
            class: s.class.name(),
            start: s.start,
            end: s.end,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreView {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub gold: Vec<Vec<SpanView>>,
    pub predicted: Vec<Vec<SpanView>>,
}

fn parse_lines(text: &str) -> Result<Vec<Vec<Span>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| ner::decode_iob_labels(&l.split_whitespace().collect::<Vec<_>>()))
        .collect()
}

/// Span-level scores of predicted against gold tags: one sequence per
/// line, whitespace-separated labels.
pub fn score_iob(gold: &str, predicted: &str) -> Result<ScoreView> {
    let g = parse_lines(gold)?;
    let p = parse_lines(predicted)?;
    let s = ner::prf1(&g, &p)?;
    let view = |xs: &[Vec<Span>]| -> Vec<Vec<SpanView>> {
        xs.iter()
            .map(|v| v.iter().map(SpanView::from).collect())
            .collect()
    };
    Ok(ScoreView {
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        true_positives: s.true_positives,
        false_positives: s.false_positives,
        false_negatives: s.false_negatives,
        gold: view(&g),
        predicted: view(&p),
    })
}
