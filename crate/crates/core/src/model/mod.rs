//! A small BERT-style encoder with MLM, NSP and token-classification heads.

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::{ParamSet, INIT_STD};

use crate::data::{MlmExample, NerSequence};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var, IGNORE_INDEX, LAYER_NORM_EPS};
use crate::tensor::Tensor;

/// Pre-softmax score given to padded key positions.
pub const MASK_SCORE: f64 = -1e9;

/// NSP class for a segment pair that really is consecutive.
pub const NSP_IS_NEXT: i64 = 0;
/// NSP class for a randomly paired segment.
pub const NSP_RANDOM: i64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub type_vocab_size: usize,
    pub dropout_p: f64,
    pub num_ner_labels: usize,
    /// Include the next-sentence objective in pre-training.
    pub use_nsp: bool,
    /// Decode MLM logits with the transposed word-embedding table.
    pub tie_mlm_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(500)
    }
}

impl ModelConfig {
    /// Desk-scale encoder: 2 layers, hidden 64, 4 heads, 64 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            intermediate_size: 256,
            vocab_size,
            max_seq_len: 64,
            type_vocab_size: 2,
            dropout_p: 0.1,
            num_ner_labels: crate::ner::NUM_LABELS,
            use_nsp: true,
            tie_mlm_weights: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("type_vocab_size", self.type_vocab_size),
            ("num_ner_labels", self.num_ner_labels),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Dropout on (with a replayable seed stream) or off.
#[derive(Debug, Clone)]
pub enum Mode {
    Eval,
    Train(DropoutStream),
}

impl Mode {
    pub fn train(seed: u64) -> Self {
        Mode::Train(DropoutStream::new(seed))
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(stream) => tape.dropout(x, p, stream.next_seed()),
        }
    }
}

/// Hands out one dropout seed per call site, in execution order.
#[derive(Debug, Clone)]
pub struct DropoutStream {
    seed: u64,
    counter: u64,
}

impl DropoutStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        crate::seed::mix(self.seed, self.counter)
    }
}

/// One encoder input sequence. `attention_mask[i]` is false for padding.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub token_ids: &'a [usize],
    pub segment_ids: &'a [usize],
    pub attention_mask: &'a [bool],
}

impl<'a> SequenceInput<'a> {
    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.token_ids.len();
        if n == 0 {
            return Err(Error::Contract("empty input sequence".into()));
        }
        if n > config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {n} exceeds max_seq_len {}",
                config.max_seq_len
            )));
        }
        if self.segment_ids.len() != n || self.attention_mask.len() != n {
            return Err(Error::Contract(format!(
                "sequence has {n} tokens but {} segment ids and {} mask entries",
                self.segment_ids.len(),
                self.attention_mask.len()
            )));
        }
        if !self.attention_mask.iter().any(|&m| m) {
            return Err(Error::Contract("attention mask has no real tokens".into()));
        }
        if let Some(&s) = self
            .segment_ids
            .iter()
            .find(|&&s| s >= config.type_vocab_size)
        {
            return Err(Error::Index {
                what: "segment id",
                index: s,
                bound: config.type_vocab_size,
            });
        }
        Ok(())
    }
}

/// Attention probabilities of one probe sequence, restricted to its
/// non-padding positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub num_layers: usize,
    pub num_heads: usize,
    /// `heads[l * num_heads + a]` is the `[n, n]` matrix of layer `l`, head `a`.
    pub heads: Vec<Tensor>,
}

impl AttentionCapture {
    pub fn head(&self, layer: usize, head: usize) -> &Tensor {
        &self.heads[layer * self.num_heads + head]
    }

    pub fn seq_len(&self) -> usize {
        self.heads.first().map_or(0, |t| t.shape()[0])
    }
}

struct LayerVars {
    query: (Var, Var),
    key: (Var, Var),
    value: (Var, Var),
    output: (Var, Var),
    attn_ln: (Var, Var),
    inner: (Var, Var),
    outer: (Var, Var),
    ffn_ln: (Var, Var),
}

/// A [`ParamSet`] placed on a tape, with handles resolved by name.
pub struct BoundModel {
    config: ModelConfig,
    vars: Vec<Var>,
    word: Var,
    position: Var,
    segment: Var,
    emb_ln: (Var, Var),
    layers: Vec<LayerVars>,
    pooler: (Var, Var),
    nsp: (Var, Var),
    mlm_transform: (Var, Var),
    mlm_ln: (Var, Var),
    mlm_decoder: Option<Var>,
    mlm_bias: Var,
    ner: (Var, Var),
}

impl BoundModel {
    /// Leaves for every parameter, in [`ParamSet`] order.
    pub fn bind(
        tape: &mut Tape,
        config: &ModelConfig,
        params: &ParamSet,
        requires_grad: bool,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(mismatch) = params.layout_mismatch(config) {
            return Err(Error::Contract(format!(
                "parameters do not match the model config: {mismatch}"
            )));
        }
        let vars: Vec<Var> = params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        let get = |name: &str| -> Var { vars[params.position(name).expect("checked by layout")] };
        let pair = |prefix: &str, a: &str, b: &str| {
            (get(&format!("{prefix}.{a}")), get(&format!("{prefix}.{b}")))
        };
        let layers = (0..config.num_layers)
            .map(|l| LayerVars {
                query: pair(&format!("layer.{l}.attn.query"), "weight", "bias"),
                key: pair(&format!("layer.{l}.attn.key"), "weight", "bias"),
                value: pair(&format!("layer.{l}.attn.value"), "weight", "bias"),
                output: pair(&format!("layer.{l}.attn.output"), "weight", "bias"),
                attn_ln: pair(&format!("layer.{l}.attn.ln"), "gain", "bias"),
                inner: pair(&format!("layer.{l}.ffn.inner"), "weight", "bias"),
                outer: pair(&format!("layer.{l}.ffn.outer"), "weight", "bias"),
                ffn_ln: pair(&format!("layer.{l}.ffn.ln"), "gain", "bias"),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            word: get("embeddings.word"),
            position: get("embeddings.position"),
            segment: get("embeddings.segment"),
            emb_ln: pair("embeddings.ln", "gain", "bias"),
            layers,
            pooler: pair("pooler", "weight", "bias"),
            nsp: pair("nsp", "weight", "bias"),
            mlm_transform: pair("mlm.transform", "weight", "bias"),
            mlm_ln: pair("mlm.ln", "gain", "bias"),
            mlm_decoder: params.position("mlm.decoder.weight").map(|i| vars[i]),
            mlm_bias: get("mlm.decoder.bias"),
            ner: pair("ner", "weight", "bias"),
            vars,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter leaves in [`ParamSet`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every parameter after `backward`, zeros where unreached.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect()
    }

    /// Runs the encoder over one sequence. Returns final hidden states
    /// `[n, H]` and the raw attention probabilities of every head
    /// (`layer * A + head` order).
    pub fn encode(
        &self,
        tape: &mut Tape,
        input: SequenceInput<'_>,
        mode: &mut Mode,
    ) -> Result<(Var, Vec<Var>)> {
        let c = &self.config;
        input.validate(c)?;
        let n = input.token_ids.len();
        let p = c.dropout_p;

        let positions: Vec<usize> = (0..n).collect();
        let word = tape.embedding(self.word, input.token_ids)?;
        let pos = tape.embedding(self.position, &positions)?;
        let seg = tape.embedding(self.segment, input.segment_ids)?;
        let x = tape.add(word, pos)?;
        let x = tape.add(x, seg)?;
        let x = tape.layer_norm(x, self.emb_ln.0, self.emb_ln.1, LAYER_NORM_EPS)?;
        let mut x = mode.dropout(tape, x, p)?;

        let mask = if input.attention_mask.iter().all(|&m| m) {
            None
        } else {
            let row: Vec<f64> = input
                .attention_mask
                .iter()
                .map(|&m| if m { 0.0 } else { MASK_SCORE })
                .collect();
            Some(tape.constant(Tensor::new(vec![n, n], row.repeat(n))?))
        };

        let d = c.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = Vec::with_capacity(c.num_layers * c.num_heads);
        for layer in &self.layers {
            let q = linear(tape, x, layer.query)?;
            let k = linear(tape, x, layer.key)?;
            let v = linear(tape, x, layer.value)?;
            let mut heads = Vec::with_capacity(c.num_heads);
            for a in 0..c.num_heads {
                let qa = tape.slice_cols(q, a * d, d)?;
                let ka = tape.slice_cols(k, a * d, d)?;
                let va = tape.slice_cols(v, a * d, d)?;
                let kt = tape.transpose(ka)?;
                let scores = tape.matmul(qa, kt)?;
                let mut scores = tape.scale(scores, scale);
                if let Some(m) = mask {
                    scores = tape.add(scores, m)?;
                }
                let attn = tape.softmax_rows(scores);
                probs.push(attn);
                let attn = mode.dropout(tape, attn, p)?;
                heads.push(tape.matmul(attn, va)?);
            }
            let context = tape.concat_cols(&heads)?;
            let out = linear(tape, context, layer.output)?;
            let out = mode.dropout(tape, out, p)?;
            let res = tape.add(x, out)?;
            x = tape.layer_norm(res, layer.attn_ln.0, layer.attn_ln.1, LAYER_NORM_EPS)?;

            let h = linear(tape, x, layer.inner)?;
            let h = tape.gelu(h);
            let out = linear(tape, h, layer.outer)?;
            let out = mode.dropout(tape, out, p)?;
            let res = tape.add(x, out)?;
            x = tape.layer_norm(res, layer.ffn_ln.0, layer.ffn_ln.1, LAYER_NORM_EPS)?;
        }
        Ok((x, probs))
    }

    /// tanh projection of the `[CLS]` state, `[1, H]`.
    pub fn pooled(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let cls = tape.gather_rows(hidden, &[0])?;
        let z = linear(tape, cls, self.pooler)?;
        Ok(tape.tanh(z))
    }

    pub fn nsp_logits(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        linear(tape, pooled, self.nsp)
    }

    /// Vocabulary logits for rows of hidden states.
    pub fn mlm_logits(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let z = linear(tape, rows, self.mlm_transform)?;
        let z = tape.gelu(z);
        let z = tape.layer_norm(z, self.mlm_ln.0, self.mlm_ln.1, LAYER_NORM_EPS)?;
        let decoder = match self.mlm_decoder {
            Some(w) => w,
            None => tape.transpose(self.word)?,
        };
        linear(tape, z, (decoder, self.mlm_bias))
    }

    pub fn ner_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        linear(tape, hidden, self.ner)
    }

    /// MLM (and, if enabled, NSP) loss of a batch. Masked-token losses are
    /// averaged over all masked positions in the batch.
    pub fn pretrain_loss(
        &self,
        tape: &mut Tape,
        batch: &[MlmExample],
        mode: &mut Mode,
    ) -> Result<PretrainLoss> {
        if batch.is_empty() {
            return Err(Error::Contract("empty pre-training batch".into()));
        }
        let mut masked_rows = Vec::new();
        let mut targets = Vec::new();
        let mut pooled = Vec::with_capacity(batch.len());
        let mut nsp_targets = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.labels.len() != ex.token_ids.len() {
                return Err(Error::Contract(format!(
                    "MLM example has {} tokens but {} labels",
                    ex.token_ids.len(),
                    ex.labels.len()
                )));
            }
            let mask = vec![true; ex.token_ids.len()];
            let input = SequenceInput {
                token_ids: &ex.token_ids,
                segment_ids: &ex.segment_ids,
                attention_mask: &mask,
            };
            let (hidden, _) = self.encode(tape, input, mode)?;
            let picked: Vec<usize> = (0..ex.labels.len())
                .filter(|&i| ex.labels[i] != IGNORE_INDEX)
                .collect();
            if !picked.is_empty() {
                masked_rows.push(tape.gather_rows(hidden, &picked)?);
                targets.extend(picked.iter().map(|&i| ex.labels[i]));
            }
            if self.config.use_nsp {
                pooled.push(self.pooled(tape, hidden)?);
                nsp_targets.push(if ex.is_next { NSP_IS_NEXT } else { NSP_RANDOM });
            }
        }
        let mlm = if masked_rows.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let rows = tape.concat_rows(&masked_rows)?;
            let logits = self.mlm_logits(tape, rows)?;
            tape.cross_entropy(logits, &targets)?
        };
        let nsp = if self.config.use_nsp {
            let rows = tape.concat_rows(&pooled)?;
            let logits = self.nsp_logits(tape, rows)?;
            Some(tape.cross_entropy(logits, &nsp_targets)?)
        } else {
            None
        };
        let total = match nsp {
            Some(nsp) => tape.add(mlm, nsp)?,
            None => mlm,
        };
        Ok(PretrainLoss { total, mlm, nsp })
    }

    /// Token-level cross-entropy over IOB labels; ignored positions skipped.
    pub fn ner_loss(&self, tape: &mut Tape, batch: &[NerSequence], mode: &mut Mode) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty fine-tuning batch".into()));
        }
        let mut states = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for seq in batch {
            if seq.labels.len() != seq.token_ids.len() {
                return Err(Error::Contract(format!(
                    "NER sequence has {} tokens but {} labels",
                    seq.token_ids.len(),
                    seq.labels.len()
                )));
            }
            let (segments, mask) = single_segment(seq.token_ids.len());
            let input = SequenceInput {
                token_ids: &seq.token_ids,
                segment_ids: &segments,
                attention_mask: &mask,
            };
            let (hidden, _) = self.encode(tape, input, mode)?;
            states.push(hidden);
            targets.extend_from_slice(&seq.labels);
        }
        let hidden = tape.concat_rows(&states)?;
        let logits = self.ner_logits(tape, hidden)?;
        tape.cross_entropy(logits, &targets)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainLoss {
    pub total: Var,
    pub mlm: Var,
    pub nsp: Option<Var>,
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn single_segment(n: usize) -> (Vec<usize>, Vec<bool>) {
    (vec![0; n], vec![true; n])
}

/// Evaluation-mode forward pass over one sequence: hidden states `[n, H]`
/// and, when requested, the attention capture over non-padding positions.
pub fn forward(
    config: &ModelConfig,
    params: &ParamSet,
    input: SequenceInput<'_>,
    capture: bool,
) -> Result<(Tensor, Option<AttentionCapture>)> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, config, params, false)?;
    let (hidden, probs) = model.encode(&mut tape, input, &mut Mode::Eval)?;
    let capture = capture.then(|| {
        let keep: Vec<usize> = (0..input.attention_mask.len())
            .filter(|&i| input.attention_mask[i])
            .collect();
        let heads = probs
            .iter()
            .map(|&p| {
                let full = tape.value(p);
                let n = full.shape()[1];
                let data = keep
                    .iter()
                    .flat_map(|&i| keep.iter().map(move |&j| full.data()[i * n + j]))
                    .collect();
                Tensor::new(vec![keep.len(), keep.len()], data).expect("square")
            })
            .collect();
        AttentionCapture {
            num_layers: config.num_layers,
            num_heads: config.num_heads,
            heads,
        }
    });
    Ok((tape.value(hidden).clone(), capture))
}

/// Evaluation-mode MLM loss of a batch.
pub fn mlm_loss(config: &ModelConfig, params: &ParamSet, batch: &[MlmExample]) -> Result<f64> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, config, params, false)?;
    let loss = model.pretrain_loss(&mut tape, batch, &mut Mode::Eval)?;
    Ok(tape.value(loss.mlm).item())
}

/// Evaluation-mode NSP loss of a batch.
pub fn nsp_loss(config: &ModelConfig, params: &ParamSet, batch: &[MlmExample]) -> Result<f64> {
    let mut c = config.clone();
    c.use_nsp = true;
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, &c, params, false)?;
    let loss = model.pretrain_loss(&mut tape, batch, &mut Mode::Eval)?;
    Ok(tape.value(loss.nsp.expect("nsp enabled")).item())
}

/// Evaluation-mode token-classification logits `[n, num_ner_labels]`.
pub fn ner_logits(config: &ModelConfig, params: &ParamSet, token_ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, config, params, false)?;
    let (segments, mask) = single_segment(token_ids.len());
    let input = SequenceInput {
        token_ids,
        segment_ids: &segments,
        attention_mask: &mask,
    };
    let (hidden, _) = model.encode(&mut tape, input, &mut Mode::Eval)?;
    let logits = model.ner_logits(&mut tape, hidden)?;
    Ok(tape.value(logits).clone())
}

/// Evaluation-mode NER loss of a batch.
pub fn ner_loss(config: &ModelConfig, params: &ParamSet, batch: &[NerSequence]) -> Result<f64> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, config, params, false)?;
    let loss = model.ner_loss(&mut tape, batch, &mut Mode::Eval)?;
    Ok(tape.value(loss).item())
}
