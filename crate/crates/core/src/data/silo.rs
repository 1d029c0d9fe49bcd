//! Random partition of whole patients (or whole notes) into silos.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Document, NerExample};
use crate::error::{Error, Result};
use crate::seed;

/// One silo's share of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct SiloDataset<T> {
    pub index: usize,
    pub items: Vec<T>,
    /// Patients (pre-training) or notes (fine-tuning) held by the silo.
    pub sample_size: usize,
}

/// Every document of a patient lands in the same silo; `sample_size` is the
/// silo's patient count.
pub fn split_silos_by_patient(
    documents: &[Document],
    k: usize,
    seed: u64,
) -> Result<Vec<SiloDataset<Document>>> {
    split_by_key(documents, k, seed, "patients", |d| d.patient_id.as_str())
}

/// Every sentence of a note lands in the same silo; `sample_size` is the
/// silo's note count.
pub fn split_silos_by_note(
    examples: &[NerExample],
    k: usize,
    seed: u64,
) -> Result<Vec<SiloDataset<NerExample>>> {
    split_by_key(examples, k, seed, "notes", |e| e.note_id.as_str())
}

/// Shuffles the distinct units and deals them round-robin, so silo sizes
/// differ by at most one unit. Items keep their corpus order within a silo.
fn split_by_key<T: Clone>(
    items: &[T],
    k: usize,
    seed: u64,
    unit: &str,
    key: impl Fn(&T) -> &str,
) -> Result<Vec<SiloDataset<T>>> {
    if k == 0 {
        return Err(Error::Split("need at least one silo".into()));
    }
    let mut order: HashMap<&str, usize> = HashMap::new();
    for item in items {
        let next = order.len();
        order.entry(key(item)).or_insert(next);
    }
    if order.len() < k {
        return Err(Error::Split(format!(
            "cannot split {} {unit} into {k} silos",
            order.len()
        )));
    }
    let mut units: Vec<usize> = (0..order.len()).collect();
    units.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::mix(seed, 0x5110)));
    let mut silo_of = vec![0; units.len()];
    for (slot, &u) in units.iter().enumerate() {
        silo_of[u] = slot % k;
    }

    let mut silos: Vec<SiloDataset<T>> = (0..k)
        .map(|index| SiloDataset {
            index,
            items: Vec::new(),
            sample_size: 0,
        })
        .collect();
    for s in &silo_of {
        silos[*s].sample_size += 1;
    }
    for item in items {
        silos[silo_of[order[key(item)]]].items.push(item.clone());
    }
    Ok(silos)
}
