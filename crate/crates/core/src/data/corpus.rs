//! Synthetic clinical-style notes with gold entity annotations.
//!
//! Sentences are rendered from templates whose slots are filled from three
//! disjoint lexicons (problems, treatments, tests). Part of every lexicon is
//! held out: it appears in the unlabeled notes and the NER test notes, never
//! in the NER training notes. Each patient draws from a random subset of
//! every lexicon, so silo vocabularies differ a little.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, NerExample};
use crate::error::{Error, Result};
use crate::ner::{EntityClass, Tag};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicons {
    pub problem: Vec<String>,
    pub treatment: Vec<String>,
    pub test: Vec<String>,
}

impl Lexicons {
    pub fn get(&self, class: EntityClass) -> &[String] {
        match class {
            EntityClass::Problem => &self.problem,
            EntityClass::Treatment => &self.treatment,
            EntityClass::Test => &self.test,
        }
    }

    /// Built-in clinical lexicons.
    pub fn clinical() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            problem: owned(&[
                "severe asthma",
                "chest pain",
                "pneumonia",
                "hypertension",
                "atrial fibrillation",
                "shortness of breath",
                "diabetes",
                "acute kidney injury",
                "sepsis",
                "fever",
                "cough",
                "anemia",
                "heart failure",
                "copd exacerbation",
                "abdominal pain",
                "nausea",
                "headache",
                "dizziness",
                "syncope",
                "hypotension",
                "cellulitis",
                "urinary tract infection",
                "delirium",
                "hyperkalemia",
                "hyponatremia",
                "gi bleed",
                "deep vein thrombosis",
                "pulmonary embolism",
                "stroke",
                "seizure",
                "pancreatitis",
                "cirrhosis",
                "leg edema",
                "renal failure",
                "respiratory distress",
                "back pain",
                "weakness",
                "malaise",
                "wheezing",
                "tachycardia",
            ]),
            treatment: owned(&[
                "aspirin",
                "heparin",
                "insulin",
                "metoprolol",
                "lisinopril",
                "furosemide",
                "vancomycin",
                "ceftriaxone",
                "antibiotics",
                "iv fluids",
                "oxygen",
                "nebulizer treatments",
                "prednisone",
                "warfarin",
                "morphine",
                "albuterol",
                "intubation",
                "dialysis",
                "blood transfusion",
                "surgery",
                "physical therapy",
                "levofloxacin",
                "amiodarone",
                "diltiazem",
                "potassium repletion",
                "lactulose",
                "pantoprazole",
                "acetaminophen",
                "enoxaparin",
                "atorvastatin",
                "clopidogrel",
                "azithromycin",
            ]),
            test: owned(&[
                "chest x-ray",
                "ct scan",
                "mri",
                "echocardiogram",
                "ekg",
                "blood cultures",
                "urinalysis",
                "cbc",
                "troponin",
                "lactate",
                "abdominal ultrasound",
                "head ct",
                "lumbar puncture",
                "biopsy",
                "colonoscopy",
                "endoscopy",
                "blood gas",
                "liver function tests",
                "creatinine",
                "hemoglobin a1c",
                "stress test",
                "cardiac catheterization",
                "bronchoscopy",
                "sputum culture",
                "inr",
                "lipase",
            ]),
        }
    }

    /// Every lexicon nonempty, every entry nonblank, no entry in two classes.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<String, EntityClass> = BTreeMap::new();
        for class in EntityClass::ALL {
            let entries = self.get(class);
            if entries.is_empty() {
                return Err(Error::Config(format!("{} lexicon is empty", class.name())));
            }
            for e in entries {
                let key = normalize(e);
                if key.is_empty() {
                    return Err(Error::Config(format!(
                        "blank {} lexicon entry",
                        class.name()
                    )));
                }
                if let Some(other) = seen.insert(key, class) {
                    if other != class {
                        return Err(Error::Config(format!(
                            "{e:?} is in both the {} and {} lexicons",
                            other.name(),
                            class.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Entity templates; `{problem}`, `{treatment}`, `{test}` are slots and
/// `{n}` is a small number word.
const ENTITY_TEMPLATES: &[&str] = &[
    "patient reports {problem} treated with {treatment} after {test}",
    "he has {problem}",
    "she has {problem}",
    "{test} showed {problem}",
    "the patient was started on {treatment} for {problem}",
    "{test} was unremarkable",
    "{test} revealed {problem} and {treatment} was given",
    "he was given {treatment}",
    "she was admitted with {problem}",
    "history of {problem} on {treatment}",
    "{treatment} was continued and {test} was repeated",
    "patient denies {problem}",
    "follow up {test} in {n} weeks",
    "{problem} improved with {treatment}",
    "she received {treatment} for {problem}",
    "he underwent {test} which was negative",
    "repeat {test} is pending",
    "continue {treatment} for {n} days",
    "admitted for {problem} complicated by {problem}",
    "no evidence of {problem} on {test}",
];

const PLAIN_TEMPLATES: &[&str] = &[
    "patient was discharged home in stable condition",
    "vital signs were stable overnight",
    "family was updated at the bedside",
    "the patient ambulated without difficulty",
    "diet was advanced as tolerated",
    "patient tolerated the procedure well",
    "plan discussed with the primary team",
    "pain was well controlled",
    "she remained afebrile",
    "he will follow up with his primary care physician",
    "code status was confirmed as full code",
    "the patient lives at home with her daughter",
    "social work was consulted",
    "he was transferred to the medical floor",
];

const NUMBERS: &[&str] = &["two", "three", "four", "five", "six", "seven"];

/// Sizes and seed of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_patients: usize,
    pub notes_per_patient: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub ner_train_notes: usize,
    pub ner_test_notes: usize,
    pub ner_sentences_per_note: usize,
    /// Fraction of each lexicon never used in NER training notes.
    pub heldout_fraction: f64,
    /// Fraction of a lexicon a single patient draws from.
    pub patient_lexicon_fraction: f64,
    /// Probability that a sentence comes from an entity template.
    pub entity_sentence_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 2020,
            num_patients: 200,
            notes_per_patient: 2,
            min_sentences: 4,
            max_sentences: 7,
            ner_train_notes: 150,
            ner_test_notes: 40,
            ner_sentences_per_note: 4,
            heldout_fraction: 0.3,
            patient_lexicon_fraction: 0.7,
            entity_sentence_prob: 0.8,
        }
    }
}

/// Unlabeled notes for pre-training plus labeled NER train and test notes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub ner_train: Vec<NerExample>,
    pub ner_test: Vec<NerExample>,
}

struct Rendered {
    tokens: Vec<String>,
    tags: Vec<Tag>,
}

/// Entry indices per class split into (seen in NER training, held out).
struct EntitySplit {
    common: Vec<Vec<usize>>,
    heldout: Vec<Vec<usize>>,
}

impl EntitySplit {
    fn new(lexicons: &Lexicons, fraction: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut common = Vec::new();
        let mut heldout = Vec::new();
        for class in EntityClass::ALL {
            let n = lexicons.get(class).len();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let held = ((n as f64) * fraction).round() as usize;
            let held = held.min(n.saturating_sub(1));
            heldout.push(idx[..held].to_vec());
            common.push(idx[held..].to_vec());
        }
        Self { common, heldout }
    }
}

/// Renders a template with the given entity choices.
fn render(
    template: &str,
    lexicons: &Lexicons,
    rng: &mut ChaCha8Rng,
    mut pick: impl FnMut(EntityClass, &mut ChaCha8Rng) -> usize,
) -> Rendered {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for word in template.split_whitespace() {
        let class = match word {
            "{problem}" => Some(EntityClass::Problem),
            "{treatment}" => Some(EntityClass::Treatment),
            "{test}" => Some(EntityClass::Test),
            "{n}" => {
                tokens.push(NUMBERS.choose(rng).expect("nonempty").to_string());
                tags.push(Tag::O);
                continue;
            }
            _ => None,
        };
        match class {
            Some(c) => {
                let entry = &lexicons.get(c)[pick(c, rng)];
                for (i, w) in entry.split_whitespace().enumerate() {
                    tokens.push(w.to_lowercase());
                    tags.push(if i == 0 { Tag::B(c) } else { Tag::I(c) });
                }
            }
            None => {
                tokens.push(word.to_string());
                tags.push(Tag::O);
            }
        }
    }
    Rendered { tokens, tags }
}

/// Renders `template` with one fixed lexicon entry per class; used to build
/// hand-checkable annotated sentences.
pub fn annotate(
    template: &str,
    lexicons: &Lexicons,
    entries: &[(EntityClass, &str)],
) -> Result<NerExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut missing = None;
    let r = render(template, lexicons, &mut rng, |c, _| {
        let wanted = entries.iter().find(|(ec, _)| *ec == c).map(|(_, e)| *e);
        match wanted.and_then(|w| lexicons.get(c).iter().position(|x| x == w)) {
            Some(i) => i,
            None => {
                missing = Some(c);
                0
            }
        }
    });
    if let Some(c) = missing {
        return Err(Error::Config(format!(
            "no {} lexicon entry given or found",
            c.name()
        )));
    }
    Ok(NerExample {
        patient_id: "annotated".into(),
        note_id: "annotated-n0".into(),
        tokens: r.tokens,
        tags: r.tags,
    })
}

fn sentence(
    lexicons: &Lexicons,
    pools: &[Vec<usize>],
    entity_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Rendered {
    let template = if rng.random::<f64>() < entity_prob {
        *ENTITY_TEMPLATES.choose(rng).expect("nonempty")
    } else {
        *PLAIN_TEMPLATES.choose(rng).expect("nonempty")
    };
    render(template, lexicons, rng, |c, rng| {
        *pools[c as usize].choose(rng).expect("pools are nonempty")
    })
}

/// Generates the corpus. Deterministic for a fixed config.
pub fn generate_corpus(config: &CorpusConfig, lexicons: &Lexicons) -> Result<SyntheticCorpus> {
    lexicons.validate()?;
    if config.num_patients == 0 || config.notes_per_patient == 0 {
        return Err(Error::Config(
            "corpus needs at least one patient and note".into(),
        ));
    }
    if config.min_sentences == 0 || config.min_sentences > config.max_sentences {
        return Err(Error::Config(format!(
            "invalid sentence range {}..={}",
            config.min_sentences, config.max_sentences
        )));
    }
    if !(0.0..1.0).contains(&config.heldout_fraction)
        || !(0.0..=1.0).contains(&config.patient_lexicon_fraction)
        || config.patient_lexicon_fraction == 0.0
    {
        return Err(Error::Config("lexicon fractions out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(config.seed, 0));
    let split = EntitySplit::new(lexicons, config.heldout_fraction, &mut rng);

    let mut documents = Vec::new();
    for p in 0..config.num_patients {
        let patient_id = format!("p{p:04}");
        let mut prng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[1, p as u64]));
        let pools: Vec<Vec<usize>> = EntityClass::ALL
            .iter()
            .map(|&c| {
                let n = lexicons.get(c).len();
                let keep =
                    ((n as f64 * config.patient_lexicon_fraction).round() as usize).clamp(1, n);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut prng);
                idx.truncate(keep);
                idx.sort_unstable();
                idx
            })
            .collect();
        for n in 0..config.notes_per_patient {
            let count = prng.random_range(config.min_sentences..=config.max_sentences);
            let sentences = (0..count)
                .map(|_| sentence(lexicons, &pools, config.entity_sentence_prob, &mut prng).tokens)
                .collect();
            documents.push(Document {
                patient_id: patient_id.clone(),
                note_id: format!("{patient_id}-n{n}"),
                sentences,
            });
        }
    }

    let ner_notes = |prefix: &str, stream: u64, notes: usize, heldout_prob: f64| {
        let mut out = Vec::new();
        for n in 0..notes {
            let mut nrng =
                ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[stream, n as u64]));
            let patient_id = format!("{prefix}{n:04}");
            let note_id = format!("{patient_id}-n0");
            for _ in 0..config.ner_sentences_per_note {
                let use_heldout = nrng.random::<f64>() < heldout_prob;
                let pools: Vec<Vec<usize>> = (0..EntityClass::ALL.len())
                    .map(|c| {
                        if use_heldout && !split.heldout[c].is_empty() {
                            split.heldout[c].clone()
                        } else {
                            split.common[c].clone()
                        }
                    })
                    .collect();
                let r = sentence(lexicons, &pools, config.entity_sentence_prob, &mut nrng);
                out.push(NerExample {
                    patient_id: patient_id.clone(),
                    note_id: note_id.clone(),
                    tokens: r.tokens,
                    tags: r.tags,
                });
            }
        }
        out
    };
    let ner_train = ner_notes("ner-train-", 2, config.ner_train_notes, 0.0);
    let ner_test = ner_notes("ner-test-", 3, config.ner_test_notes, 0.5);

    Ok(SyntheticCorpus {
        documents,
        ner_train,
        ner_test,
    })
}

/// Held-out sentences for attention analysis, shared by all compared models.
pub fn probe_sentences(lexicons: &Lexicons, seed: u64, count: usize) -> Result<Vec<Vec<String>>> {
    lexicons.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed, 0xA77E));
    let pools: Vec<Vec<usize>> = EntityClass::ALL
        .iter()
        .map(|&c| (0..lexicons.get(c).len()).collect())
        .collect();
    Ok((0..count)
        .map(|_| sentence(lexicons, &pools, 0.8, &mut rng).tokens)
        .collect())
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub patient_id: String,
    pub note_id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<Tag>>,
}

/// One record per sentence.
pub fn documents_to_records(documents: &[Document]) -> Vec<CorpusRecord> {
    documents
        .iter()
        .flat_map(|d| {
            d.sentences.iter().map(|s| CorpusRecord {
                patient_id: d.patient_id.clone(),
                note_id: d.note_id.clone(),
                tokens: s.clone(),
                tags: None,
            })
        })
        .collect()
}

/// Groups consecutive records of the same note back into documents.
pub fn records_to_documents(records: Vec<CorpusRecord>) -> Result<Vec<Document>> {
    let mut documents: Vec<Document> = Vec::new();
    for r in records {
        if r.patient_id.is_empty() {
            return Err(Error::Format(format!(
                "record of note {:?} has no patient_id",
                r.note_id
            )));
        }
        match documents.last_mut() {
            Some(d) if d.note_id == r.note_id && d.patient_id == r.patient_id => {
                d.sentences.push(r.tokens)
            }
            _ => documents.push(Document {
                patient_id: r.patient_id,
                note_id: r.note_id,
                sentences: vec![r.tokens],
            }),
        }
    }
    Ok(documents)
}

pub fn ner_to_records(examples: &[NerExample]) -> Vec<CorpusRecord> {
    examples
        .iter()
        .map(|e| CorpusRecord {
            patient_id: e.patient_id.clone(),
            note_id: e.note_id.clone(),
            tokens: e.tokens.clone(),
            tags: Some(e.tags.clone()),
        })
        .collect()
}

pub fn records_to_ner(records: Vec<CorpusRecord>) -> Result<Vec<NerExample>> {
    records
        .into_iter()
        .map(|r| {
            let tags = r.tags.ok_or_else(|| {
                Error::Format(format!("record of note {:?} has no tags", r.note_id))
            })?;
            let e = NerExample {
                patient_id: r.patient_id,
                note_id: r.note_id,
                tokens: r.tokens,
                tags,
            };
            e.validate()?;
            Ok(e)
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Distinct patient ids, in first-appearance order.
pub fn patient_ids(documents: &[Document]) -> Vec<&str> {
    let mut seen = HashSet::new();
    documents
        .iter()
        .map(|d| d.patient_id.as_str())
        .filter(|p| seen.insert(*p))
        .collect()
}
