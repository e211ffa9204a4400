//! Batch sampling with the distinct-patient constraint.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;

/// Reference to one drawable sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    /// Index into the dataset manifest order.
    pub index: usize,
    pub patient: u32,
    pub modality: u32,
}

/// Draw `batch_size` samples with pairwise-distinct patients: patients are
/// chosen uniformly without replacement, then one of each patient's pool
/// samples uniformly.
pub fn sample_batch_distinct_patients(
    pool: &[SampleRef],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampleRef>, TrainError> {
    let mut by_patient: BTreeMap<u32, Vec<SampleRef>> = BTreeMap::new();
    for &s in pool {
        by_patient.entry(s.patient).or_default().push(s);
    }
    if by_patient.len() < batch_size {
        return Err(TrainError::NotEnoughPatients {
            available: by_patient.len(),
            requested: batch_size,
        });
    }
    let mut patients: Vec<u32> = by_patient.keys().copied().collect();
    // Partial Fisher-Yates: the first batch_size slots end up uniform.
    for i in 0..batch_size {
        let j = rng.gen_range(i..patients.len());
        patients.swap(i, j);
    }
    let mut batch = Vec::with_capacity(batch_size);
    for &p in &patients[..batch_size] {
        let group = &by_patient[&p];
        batch.push(group[rng.gen_range(0..group.len())]);
    }
    Ok(batch)
}
