//! Replay buffer with median-loss retention.
//!
//! At the end of each stage, the samples whose losses sit closest to the
//! stage's median loss are retained: deviations `|loss - median|` are ranked
//! ascending (ties by sample position) and the top share is kept.

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayEntry {
    /// Index into the dataset manifest sample order.
    pub sample_index: usize,
    pub sample_id: String,
    pub patient: u32,
    pub modality: u32,
    pub stored_loss: f64,
}

/// Capacity-bounded store of retained samples. The capacity is the running
/// sum of per-stage retention counts.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReplayBuffer {
    entries: Vec<ReplayEntry>,
    stage_counts: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn stage_counts(&self) -> &[usize] {
        &self.stage_counts
    }

    /// Total capacity accumulated so far: sum of floor(|D_i| * P/100).
    pub fn capacity(&self) -> usize {
        self.stage_counts.iter().sum()
    }

    /// Retain the stage's selected samples. `candidates` holds one record
    /// per stage sample, aligned with `losses`.
    pub fn extend_from_stage(
        &mut self,
        candidates: &[ReplayEntry],
        losses: &[f64],
        retention_percent: f64,
    ) -> Result<usize, TrainError> {
        if candidates.len() != losses.len() {
            return Err(TrainError::BadPlan(format!(
                "{} candidates but {} losses",
                candidates.len(),
                losses.len()
            )));
        }
        let selected = select_replay_samples(losses, retention_percent)?;
        let count = selected.len();
        for pos in selected {
            let mut entry = candidates[pos].clone();
            entry.stored_loss = losses[pos];
            self.entries.push(entry);
        }
        self.stage_counts.push(count);
        Ok(count)
    }
}

/// Median of a finite, nonempty slice; even lengths average the middle two.
fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Positions of the retained samples: ranked ascending by distance to the
/// median loss (ties by position), keeping floor(n * P / 100).
pub fn select_replay_samples(
    losses: &[f64],
    retention_percent: f64,
) -> Result<Vec<usize>, TrainError> {
    if losses.is_empty() {
        return Err(TrainError::EmptyStage {
            stage: 0,
            modality: u32::MAX,
        });
    }
    if !(retention_percent > 0.0) {
        return Err(TrainError::BadRetention(retention_percent));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::BadPlan("non-finite loss in selection".into()));
    }
    let mu = median(losses);
    let mut ranked: Vec<(f64, usize)> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| ((l - mu).abs(), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((losses.len() as f64) * retention_percent / 100.0).floor() as usize;
    Ok(ranked.into_iter().take(keep).map(|(_, i)| i).collect())
}
