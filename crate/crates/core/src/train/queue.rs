//! Balanced double queue feeding the contrastive loss.
//!
//! One side holds predictions of replayed samples by the previous-stage
//! model (constants on the tape); the other holds current-model predictions
//! of the running batch (gradients flow). Both sides are clamped into [0, 1]
//! and have exactly `S = min(B, |R|)` entries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::replay::ReplayBuffer;
use super::TrainError;
use crate::data::MemDataset;
use crate::loss::{PredictionEntry, SourceModel};
use crate::model::{forward_from_params, ModelParams};
use crate::tensor::tape::Var;
use crate::{Tape, Tensor};

/// The populated bank plus its per-side size.
pub struct BalancedQueue {
    pub entries: Vec<PredictionEntry>,
    pub sample_size: usize,
}

impl BalancedQueue {
    /// Total bank size; always `2 * sample_size`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when no replay-side entry can receive gradient.
    pub fn replay_side_is_constant(&self, tape: &Tape) -> bool {
        self.entries
            .iter()
            .filter(|e| e.source == SourceModel::PreviousStage)
            .all(|e| !tape.requires_grad(e.probs))
    }
}

fn draw_without_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ix: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        ix.swap(i, j);
    }
    ix.truncate(k);
    ix
}

/// Run the previous-stage model over `count` replay samples drawn without
/// replacement; returns clamped prediction tensors with their identities.
pub fn replay_prediction_tensors(
    replay: &ReplayBuffer,
    dataset: &MemDataset,
    prev_params: &ModelParams,
    count: usize,
    stage: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Tensor, u32, u32)>, TrainError> {
    if replay.is_empty() {
        return Err(TrainError::EmptyReplayBuffer { stage });
    }
    let count = count.min(replay.len());
    let drawn = draw_without_replacement(replay.len(), count, rng);

    // Batch the drawn samples through the frozen model on a scratch tape.
    let size = dataset.manifest.image_size;
    let modalities = dataset.manifest.num_modalities;
    let mut stacked = Tensor::zeros(&[count, modalities, size, size]);
    let plane = modalities * size * size;
    for (slot, &pick) in drawn.iter().enumerate() {
        let entry = &replay.entries()[pick];
        let img = dataset.input(entry.sample_index);
        stacked.data_mut()[slot * plane..(slot + 1) * plane].copy_from_slice(img.data());
    }
    let mut scratch = Tape::new();
    let (pred, _) = forward_from_params(&mut scratch, &stacked, prev_params, false)?;
    let value = scratch.value(pred);
    let classes = value.shape()[1];
    let per_sample = classes * size * size;

    let mut out = Vec::with_capacity(count);
    for (slot, &pick) in drawn.iter().enumerate() {
        let entry = &replay.entries()[pick];
        let mut probs: Vec<f64> = value.data()[slot * per_sample..(slot + 1) * per_sample].to_vec();
        for v in &mut probs {
            *v = v.clamp(0.0, 1.0);
        }
        let t = Tensor::from_vec(vec![classes, size, size], probs)?;
        out.push((t, entry.patient, entry.modality));
    }
    Ok(out)
}

/// Insert frozen predictions as constant replay-side bank entries.
pub fn insert_constant_entries(
    tape: &mut Tape,
    predictions: &[(Tensor, u32, u32)],
) -> Vec<PredictionEntry> {
    predictions
        .iter()
        .map(|(t, patient, modality)| PredictionEntry {
            probs: tape.constant(t.clone()),
            patient: *patient,
            modality: *modality,
            source: SourceModel::PreviousStage,
        })
        .collect()
}

/// Populate both queues for one training step. `batch_preds` are the current
/// model's per-sample predictions on the live tape, with their identities.
pub fn populate_balanced_queue(
    tape: &mut Tape,
    replay: &ReplayBuffer,
    dataset: &MemDataset,
    prev_params: &ModelParams,
    batch_preds: &[(Var, u32, u32)],
    stage: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BalancedQueue, TrainError> {
    if replay.is_empty() {
        return Err(TrainError::EmptyReplayBuffer { stage });
    }
    let sample_size = batch_preds.len().min(replay.len());
    let tensors =
        replay_prediction_tensors(replay, dataset, prev_params, sample_size, stage, rng)?;
    let mut entries = insert_constant_entries(tape, &tensors);
    for &slot in &draw_without_replacement(batch_preds.len(), sample_size, rng) {
        let (pred, patient, modality) = batch_preds[slot];
        entries.push(PredictionEntry {
            probs: tape.clamp01(pred),
            patient,
            modality,
            source: SourceModel::CurrentStage,
        });
    }
    debug_assert_eq!(entries.len(), 2 * sample_size);
    Ok(BalancedQueue {
        entries,
        sample_size,
    })
}
