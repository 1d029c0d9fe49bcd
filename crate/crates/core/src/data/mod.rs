//! Corpus generation, tokenization, training-example construction and silo
//! splitting.

mod corpus;
mod examples;
mod silo;
mod vocab;

use serde::{Deserialize, Serialize};

pub use corpus::{
    annotate, documents_to_records, generate_corpus, ner_to_records, patient_ids, probe_sentences,
    read_jsonl, records_to_documents, records_to_ner, write_jsonl, CorpusConfig, CorpusRecord,
    Lexicons, SyntheticCorpus,
};
pub use examples::{encode_ner, make_mlm_examples, MlmConfig, MlmExample, NerSequence};
pub use silo::{split_silos_by_note, split_silos_by_patient, SiloDataset};
pub use vocab::{build_vocab, Vocab, CLS, MASK, NUM_SPECIAL, PAD, SEP, UNK};

use crate::error::{Error, Result};
use crate::ner::{is_well_formed, Tag};

/// One clinical note: a list of tokenized sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub patient_id: String,
    pub note_id: String,
    pub sentences: Vec<Vec<String>>,
}

/// One annotated sentence of a labeled note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerExample {
    pub patient_id: String,
    pub note_id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
}

impl NerExample {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.tags.len() {
            return Err(Error::Format(format!(
                "note {}: {} tokens but {} tags",
                self.note_id,
                self.tokens.len(),
                self.tags.len()
            )));
        }
        if !is_well_formed(&self.tags) {
            return Err(Error::Format(format!(
                "note {}: ill-formed IOB sequence",
                self.note_id
            )));
        }
        Ok(())
    }
}
