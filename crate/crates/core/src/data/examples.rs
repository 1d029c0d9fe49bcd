//! Encoder-ready training examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CLS, MASK, NUM_SPECIAL, SEP};
use super::{Document, NerExample};
use crate::error::{Error, Result};
use crate::seed;
use crate::tape::IGNORE_INDEX;

/// A `[CLS] A [SEP] B [SEP]` pair with masked-token labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmExample {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<i64>,
    pub is_next: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub mask_prob: f64,
    /// Of the selected positions: share replaced by `[MASK]`.
    pub mask_token_frac: f64,
    /// Of the selected positions: share replaced by a random token.
    pub random_token_frac: f64,
    /// Probability that segment B is a random sentence.
    pub random_next_prob: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
            random_next_prob: 0.5,
        }
    }
}

/// Builds one example per adjacent sentence pair of every document with at
/// least two sentences. Deterministic for a fixed seed.
pub fn make_mlm_examples(
    vocab: &Vocab,
    documents: &[Document],
    seq_len: usize,
    seed: u64,
    config: &MlmConfig,
) -> Result<Vec<MlmExample>> {
    if seq_len < 5 {
        return Err(Error::Contract(format!(
            "sequence length {seq_len} too short for a sentence pair"
        )));
    }
    if vocab.len() <= NUM_SPECIAL {
        return Err(Error::Contract("vocabulary has no regular tokens".into()));
    }
    let encoded: Vec<Vec<Vec<usize>>> = documents
        .iter()
        .map(|d| {
            d.sentences
                .iter()
                .map(|s| {
                    s.iter()
                        .flat_map(|w| vocab.tokenize_word(w))
                        .collect::<Vec<_>>()
                })
                .filter(|s: &Vec<usize>| !s.is_empty())
                .collect()
        })
        .collect();
    let pairable: Vec<usize> = (0..encoded.len())
        .filter(|&d| encoded[d].len() >= 2)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed, 0x3A5C));
    let mut out = Vec::new();
    for &d in &pairable {
        let doc = &encoded[d];
        for i in 0..doc.len() - 1 {
            let a = &doc[i];
            let random_next = rng.random::<f64>() < config.random_next_prob;
            let b = if random_next {
                random_sentence(&encoded, &pairable, d, i, &mut rng)
            } else {
                &doc[i + 1]
            };
            out.push(build_pair(
                a,
                b,
                !random_next,
                seq_len,
                vocab.len(),
                config,
                &mut rng,
            ));
        }
    }
    Ok(out)
}

fn random_sentence<'a>(
    encoded: &'a [Vec<Vec<usize>>],
    pairable: &[usize],
    doc: usize,
    sent: usize,
    rng: &mut ChaCha8Rng,
) -> &'a [usize] {
    let others: Vec<usize> = pairable.iter().copied().filter(|&o| o != doc).collect();
    if others.is_empty() {
        // Single document: any sentence that is not the true successor.
        let n = encoded[doc].len();
        let choices: Vec<usize> = (0..n).filter(|&j| j != sent + 1).collect();
        return &encoded[doc][choices[rng.random_range(0..choices.len())]];
    }
    let o = others[rng.random_range(0..others.len())];
    &encoded[o][rng.random_range(0..encoded[o].len())]
}

fn build_pair(
    a: &[usize],
    b: &[usize],
    is_next: bool,
    seq_len: usize,
    vocab_size: usize,
    config: &MlmConfig,
    rng: &mut ChaCha8Rng,
) -> MlmExample {
    let (mut a_len, mut b_len) = (a.len(), b.len());
    while a_len + b_len + 3 > seq_len {
        if a_len >= b_len {
            a_len -= 1;
        } else {
            b_len -= 1;
        }
    }
    let mut tokens = Vec::with_capacity(a_len + b_len + 3);
    tokens.push(CLS);
    tokens.extend_from_slice(&a[..a_len]);
    tokens.push(SEP);
    tokens.extend_from_slice(&b[..b_len]);
    tokens.push(SEP);
    let mut segments = vec![0; a_len + 2];
    segments.resize(tokens.len(), 1);

    let candidates: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i] >= NUM_SPECIAL)
        .collect();
    let mut selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < config.mask_prob)
        .collect();
    if selected.is_empty() && !candidates.is_empty() {
        selected.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let mut labels = vec![IGNORE_INDEX; tokens.len()];
    for &i in &selected {
        labels[i] = tokens[i] as i64;
        let r = rng.random::<f64>();
        if r < config.mask_token_frac {
            tokens[i] = MASK;
        } else if r < config.mask_token_frac + config.random_token_frac {
            tokens[i] = rng.random_range(NUM_SPECIAL..vocab_size);
        }
    }
    MlmExample {
        token_ids: tokens,
        segment_ids: segments,
        labels,
        is_next,
    }
}

/// A tokenized NER sentence. Each word's label sits on its first piece;
/// continuation pieces and the specials are ignored by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NerSequence {
    pub token_ids: Vec<usize>,
    pub labels: Vec<i64>,
    /// Position of the first piece of each word that fit in the sequence.
    pub word_starts: Vec<usize>,
    pub num_words: usize,
}

/// `[CLS] pieces… [SEP]`, truncated to `max_len`; words that do not fit
/// are dropped from `word_starts`.
pub fn encode_ner(vocab: &Vocab, example: &NerExample, max_len: usize) -> Result<NerSequence> {
    example.validate()?;
    if max_len < 3 {
        return Err(Error::Contract(format!("max_len {max_len} too short")));
    }
    let mut token_ids = vec![CLS];
    let mut labels = vec![IGNORE_INDEX];
    let mut word_starts = Vec::with_capacity(example.tokens.len());
    for (word, tag) in example.tokens.iter().zip(&example.tags) {
        let pieces = vocab.tokenize_word(word);
        if pieces.is_empty() || token_ids.len() + pieces.len() + 1 > max_len {
            break;
        }
        word_starts.push(token_ids.len());
        for (j, &p) in pieces.iter().enumerate() {
            token_ids.push(p);
            labels.push(if j == 0 {
                tag.id() as i64
            } else {
                IGNORE_INDEX
            });
        }
    }
    token_ids.push(SEP);
    labels.push(IGNORE_INDEX);
    Ok(NerSequence {
        token_ids,
        labels,
        word_starts,
        num_words: example.tokens.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_corpus, CorpusConfig, Lexicons};
    use crate::ner::Tag;

    fn fixture() -> (Vocab, Vec<Document>, Vec<NerExample>) {
        let c = generate_corpus(
            &CorpusConfig {
                num_patients: 120,
                ..Default::default()
            },
            &Lexicons::clinical(),
        )
        .unwrap();
        let v = build_vocab(
            c.documents
                .iter()
                .flat_map(|d| d.sentences.iter().map(Vec::as_slice)),
            500,
        )
        .unwrap();
        (v, c.documents, c.ner_train)
    }

    #[test]
    fn masking_rates_concentrate() {
        let (v, docs, _) = fixture();
        let ex = make_mlm_examples(&v, &docs, 64, 7, &MlmConfig::default()).unwrap();
        let mut positions = 0;
        let mut selected = 0;
        let mut masked = 0;
        for e in &ex {
            for (i, &l) in e.labels.iter().enumerate() {
                // Positions holding specials in the original pair.
                let original = if l == IGNORE_INDEX {
                    e.token_ids[i]
                } else {
                    l as usize
                };
                if original >= NUM_SPECIAL {
                    positions += 1;
                }
                if l != IGNORE_INDEX {
                    selected += 1;
                    if e.token_ids[i] == MASK {
                        masked += 1;
                    }
                }
            }
        }
        assert!(positions >= 10_000, "only {positions} positions");
        let frac = selected as f64 / positions as f64;
        assert!((0.13..=0.17).contains(&frac), "selection {frac}");
        let mask_frac = masked as f64 / selected as f64;
        assert!((0.75..=0.85).contains(&mask_frac), "mask {mask_frac}");
    }

    #[test]
    fn pairs_are_well_formed_and_balanced() {
        let (v, docs, _) = fixture();
        let ex = make_mlm_examples(&v, &docs, 20, 3, &MlmConfig::default()).unwrap();
        let next = ex.iter().filter(|e| e.is_next).count() as f64 / ex.len() as f64;
        assert!((0.45..=0.55).contains(&next), "{next}");
        for e in &ex {
            assert!(e.token_ids.len() <= 20);
            assert_eq!(e.token_ids[0], CLS);
            assert_eq!(*e.token_ids.last().unwrap(), SEP);
            assert_eq!(e.segment_ids.len(), e.token_ids.len());
            assert!(e.labels.iter().any(|&l| l != IGNORE_INDEX));
            assert_eq!(e.segment_ids[0], 0);
            assert_eq!(*e.segment_ids.last().unwrap(), 1);
        }
    }

    #[test]
    fn masking_is_seeded() {
        let (v, docs, _) = fixture();
        let cfg = MlmConfig::default();
        let a = make_mlm_examples(&v, &docs[..10], 64, 9, &cfg).unwrap();
        assert_eq!(a, make_mlm_examples(&v, &docs[..10], 64, 9, &cfg).unwrap());
        assert_ne!(a, make_mlm_examples(&v, &docs[..10], 64, 10, &cfg).unwrap());
    }

    #[test]
    fn single_sentence_documents_are_not_paired() {
        let (v, _, _) = fixture();
        let doc = Document {
            patient_id: "p".into(),
            note_id: "n".into(),
            sentences: vec![vec!["fever".into()]],
        };
        assert!(make_mlm_examples(&v, &[doc], 64, 1, &MlmConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ner_labels_sit_on_first_pieces() {
        let (v, _, ner) = fixture();
        let mut ex = ner[0].clone();
        ex.tokens.push("zzfever".into());
        ex.tags.push(Tag::O);
        let seq = encode_ner(&v, &ex, 64).unwrap();
        assert_eq!(seq.word_starts.len(), ex.tokens.len());
        for (w, &pos) in seq.word_starts.iter().enumerate() {
            assert_eq!(seq.labels[pos], ex.tags[w].id() as i64);
        }
        let scored = seq.labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        assert_eq!(scored, ex.tokens.len());

        let short = encode_ner(&v, &ex, 4).unwrap();
        assert_eq!(short.token_ids.len(), short.labels.len());
        assert!(short.token_ids.len() <= 4);
        assert!(short.word_starts.len() < ex.tokens.len());
    }
}
