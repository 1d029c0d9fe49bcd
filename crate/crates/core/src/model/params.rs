use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// An ordered collection of named parameter tensors.
///
/// The order is fixed by [`ParamSet::init`] and is identical for every silo
/// and every global cycle, so two sets can be combined entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::Contract(format!("duplicate parameter name {name}")));
            }
        }
        Ok(Self { entries })
    }

    /// Fresh parameters: weights from a truncated normal(0, 0.02) cut at
    /// ±2σ, biases 0, layer-norm gains 1. Deterministic for a fixed seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = param_layout(config)
            .into_iter()
            .map(|(name, shape, kind)| {
                let tensor = match kind {
                    Init::Weight => {
                        let numel = shape.iter().product();
                        let data = (0..numel)
                            .map(|_| loop {
                                let v: f64 = normal.sample(&mut rng);
                                if v.abs() <= 2.0 * INIT_STD {
                                    break v;
                                }
                            })
                            .collect();
                        Tensor::new(shape, data).expect("layout shapes are valid")
                    }
                    Init::Zero => Tensor::zeros(&shape),
                    Init::One => Tensor::full(&shape, 1.0),
                };
                (name, tensor)
            })
            .collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Name of the first entry whose name or shape differs, if any.
    pub fn first_mismatch(&self, other: &ParamSet) -> Option<String> {
        for (i, (name, t)) in self.entries.iter().enumerate() {
            match other.entries.get(i) {
                None => return Some(format!("{name} (missing from other set)")),
                Some((other_name, _)) if other_name != name => {
                    return Some(format!("entry {i}: {name} vs {other_name}"))
                }
                Some((_, ot)) if ot.shape() != t.shape() => {
                    return Some(format!("{name}: shape {:?} vs {:?}", t.shape(), ot.shape()))
                }
                _ => {}
            }
        }
        if other.entries.len() > self.entries.len() {
            let (name, _) = &other.entries[self.entries.len()];
            return Some(format!("{name} (missing from this set)"));
        }
        None
    }

    /// First difference between this set and the layout `config` implies.
    pub fn layout_mismatch(&self, config: &ModelConfig) -> Option<String> {
        let layout = param_layout(config);
        if layout.len() != self.entries.len() {
            return Some(format!(
                "expected {} entries, found {}",
                layout.len(),
                self.entries.len()
            ));
        }
        layout
            .iter()
            .zip(&self.entries)
            .find(|((name, shape, _), (n, t))| name != n || shape.as_slice() != t.shape())
            .map(|((name, shape, _), (n, t))| {
                format!("expected {name} {shape:?}, found {n} {:?}", t.shape())
            })
    }

    /// Same names in the same order with the same shapes.
    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.first_mismatch(other).is_none()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Bitwise equality, distinguishing -0.0 from 0.0 and comparing NaNs by bits.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.is_congruent(other)
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((_, a), (_, b))| {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    /// Largest elementwise absolute difference between congruent sets.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

enum Init {
    Weight,
    Zero,
    One,
}

/// Canonical parameter names, shapes and initializers, in the fixed order.
fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, i, v) = (c.hidden_size, c.intermediate_size, c.vocab_size);
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: Init| out.push((name, shape, kind));

    push("embeddings.word".into(), vec![v, h], Init::Weight);
    push(
        "embeddings.position".into(),
        vec![c.max_seq_len, h],
        Init::Weight,
    );
    push(
        "embeddings.segment".into(),
        vec![c.type_vocab_size, h],
        Init::Weight,
    );
    push("embeddings.ln.gain".into(), vec![h], Init::One);
    push("embeddings.ln.bias".into(), vec![h], Init::Zero);

    for l in 0..c.num_layers {
        for proj in ["query", "key", "value", "output"] {
            push(
                format!("layer.{l}.attn.{proj}.weight"),
                vec![h, h],
                Init::Weight,
            );
            push(format!("layer.{l}.attn.{proj}.bias"), vec![h], Init::Zero);
        }
        push(format!("layer.{l}.attn.ln.gain"), vec![h], Init::One);
        push(format!("layer.{l}.attn.ln.bias"), vec![h], Init::Zero);
        push(
            format!("layer.{l}.ffn.inner.weight"),
            vec![h, i],
            Init::Weight,
        );
        push(format!("layer.{l}.ffn.inner.bias"), vec![i], Init::Zero);
        push(
            format!("layer.{l}.ffn.outer.weight"),
            vec![i, h],
            Init::Weight,
        );
        push(format!("layer.{l}.ffn.outer.bias"), vec![h], Init::Zero);
        push(format!("layer.{l}.ffn.ln.gain"), vec![h], Init::One);
        push(format!("layer.{l}.ffn.ln.bias"), vec![h], Init::Zero);
    }

    push("pooler.weight".into(), vec![h, h], Init::Weight);
    push("pooler.bias".into(), vec![h], Init::Zero);
    push("nsp.weight".into(), vec![h, 2], Init::Weight);
    push("nsp.bias".into(), vec![2], Init::Zero);

    push("mlm.transform.weight".into(), vec![h, h], Init::Weight);
    push("mlm.transform.bias".into(), vec![h], Init::Zero);
    push("mlm.ln.gain".into(), vec![h], Init::One);
    push("mlm.ln.bias".into(), vec![h], Init::Zero);
    if !c.tie_mlm_weights {
        push("mlm.decoder.weight".into(), vec![h, v], Init::Weight);
    }
    push("mlm.decoder.bias".into(), vec![v], Init::Zero);

    push("ner.weight".into(), vec![h, c.num_ner_labels], Init::Weight);
    push("ner.bias".into(), vec![c.num_ner_labels], Init::Zero);
    out
}
