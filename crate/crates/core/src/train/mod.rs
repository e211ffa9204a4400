//! Stage-by-stage training over sequentially arriving modalities.
//!
//! Each stage trains on one modality, warm-started from the previous stage's
//! weights. From the second stage on, the previous-stage model feeds the
//! replay side of the balanced queue and the contrastive term joins the
//! objective. At the end of a stage every sample is scored once under the
//! final stage weights and the median-loss selection extends the buffer.

pub mod optim;
pub mod queue;
pub mod replay;
pub mod sampler;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, MemDataset, Split};
use crate::loss::{
    self, LossError, PredictionEntry, Similarity, SourceModel, TverskyParams,
};
use crate::model::{forward, ModelConfig, ModelError, ModelParams};
use crate::rng::rng_from;
use crate::tensor::tape::Var;
use crate::tensor::TensorError;
use crate::{Tape, Tensor};

use optim::{Adam, AdamConfig, LrSchedule};
use queue::{insert_constant_entries, populate_balanced_queue, replay_prediction_tensors};
use replay::{ReplayBuffer, ReplayEntry};
use sampler::{sample_batch_distinct_patients, SampleRef};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {stage}: no training samples for modality {modality}")]
    EmptyStage { stage: usize, modality: u32 },
    #[error("retention percent must be positive, got {0}")]
    BadRetention(f64),
    #[error("stage {stage}: replay buffer is empty but the protocol requires it")]
    EmptyReplayBuffer { stage: usize },
    #[error("only {available} distinct patients available for a batch of {requested}; reduce the batch size")]
    NotEnoughPatients { available: usize, requested: usize },
    #[error("non-finite loss at stage {stage} epoch {epoch} step {step} (lr {lr}); batch: {batch:?}")]
    NanLoss {
        stage: usize,
        epoch: usize,
        step: usize,
        lr: f64,
        batch: Vec<String>,
    },
    #[error("invalid plan: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Full training schedule: modality order, per-stage contrastive weights,
/// optimizer and queue settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StagePlan {
    /// Dataset modality ids, one stage each, in arrival order.
    pub modality_order: Vec<u32>,
    /// Per-stage weight on the contrastive term (0 for the first stage).
    pub omega_schedule: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub milestone_fracs: Vec<f64>,
    pub milestone_gamma: f64,
    /// Percent of each stage's samples retained in the replay buffer.
    pub retention_percent: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub tau: f64,
    pub similarity: Similarity,
    pub replay_enabled: bool,
    pub tac_enabled: bool,
    /// Replayed samples also join batches and the intra term.
    pub replay_in_intra: bool,
    pub seed: u64,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            modality_order: vec![0, 1, 2, 3], // t1, t2, flair, t1ce
            omega_schedule: vec![0.0, 1.0, 1.0, 1.0],
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 4e-4,
            warmup_frac: 0.05,
            milestone_fracs: vec![0.4, 0.6, 0.8, 0.9],
            milestone_gamma: 0.5,
            retention_percent: 10.0,
            alpha: 0.7,
            beta: 1.5,
            epsilon: 1e-6,
            gamma: 1.2,
            tau: 1.0,
            similarity: Similarity::Tversky,
            replay_enabled: true,
            tac_enabled: true,
            replay_in_intra: true,
            seed: 1,
        }
    }
}

impl StagePlan {
    pub fn stages(&self) -> usize {
        self.modality_order.len()
    }

    pub fn tversky(&self) -> Result<TverskyParams> {
        TverskyParams::new(self.alpha, self.beta, self.epsilon).map_err(Into::into)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality_order.is_empty() {
            return Err(TrainError::BadPlan("no stages".into()));
        }
        let mut seen = self.modality_order.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.modality_order.len() {
            return Err(TrainError::BadPlan(
                "each modality maps to exactly one stage".into(),
            ));
        }
        if self.omega_schedule.len() != self.modality_order.len() {
            return Err(TrainError::BadPlan(format!(
                "omega schedule has {} entries for {} stages",
                self.omega_schedule.len(),
                self.modality_order.len()
            )));
        }
        if self.omega_schedule.iter().any(|&w| w < 0.0) {
            return Err(TrainError::BadPlan("negative omega".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadPlan("epochs and batch size must be positive".into()));
        }
        if self.replay_enabled && !(self.retention_percent > 0.0) {
            return Err(TrainError::BadRetention(self.retention_percent));
        }
        if !(self.tau > 0.0) {
            return Err(TrainError::BadPlan(format!("tau must be positive, got {}", self.tau)));
        }
        self.tversky()?;
        Ok(())
    }
}

/// One optimizer step's log record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_intra: f64,
    pub l_tac: f64,
    pub l_total: f64,
}

/// Output of one stage.
pub struct StageResult {
    pub params: ModelParams,
    /// (dataset index, end-of-stage loss) for every current-stage sample;
    /// empty when replay is disabled.
    pub per_sample_losses: Vec<(usize, f64)>,
    pub steps: Vec<StepRecord>,
}

fn stack_inputs(dataset: &MemDataset, batch: &[SampleRef]) -> Tensor {
    let size = dataset.manifest.image_size;
    let modalities = dataset.manifest.num_modalities;
    let plane = modalities * size * size;
    let mut out = Tensor::zeros(&[batch.len(), modalities, size, size]);
    for (slot, sref) in batch.iter().enumerate() {
        let img = dataset.input(sref.index);
        out.data_mut()[slot * plane..(slot + 1) * plane].copy_from_slice(img.data());
    }
    out
}

/// Split a `(B, C, H, W)` prediction into per-sample `(C, H, W)` views.
fn per_sample_predictions(tape: &mut Tape, pred: Var) -> Result<Vec<Var>> {
    let shape = tape.shape(pred).to_vec();
    let (b, per) = (shape[0], shape[1] * shape[2] * shape[3]);
    let rows = tape.reshape(pred, &[b, per])?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let row = tape.index_select(rows, &[i])?;
        out.push(tape.reshape(row, &[shape[1], shape[2], shape[3]])?);
    }
    Ok(out)
}

fn batch_intra(
    tape: &mut Tape,
    dataset: &MemDataset,
    batch: &[SampleRef],
    preds: &[Var],
    params: &TverskyParams,
    gamma: f64,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for (sref, &pred) in batch.iter().zip(preds) {
        let mask = tape.constant(dataset.masks_of(sref.index).clone());
        terms.push(loss::intra_loss(tape, pred, mask, params, gamma)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.mul_scalar(acc, 1.0 / terms.len() as f64))
}

/// Train one stage (1-based index). `params_in` carries the previous stage's
/// weights and acts as the frozen queue model; the replay buffer is extended
/// in place at the end when replay is enabled.
pub fn train_stage(
    stage: usize,
    plan: &StagePlan,
    model_cfg: &ModelConfig,
    dataset: &MemDataset,
    replay_buffer: &mut ReplayBuffer,
    params_in: &ModelParams,
) -> Result<StageResult> {
    plan.validate()?;
    if stage == 0 || stage > plan.stages() {
        return Err(TrainError::BadPlan(format!("stage {stage} out of range")));
    }
    let modality = plan.modality_order[stage - 1];
    let omega = plan.omega_schedule[stage - 1];
    let tversky = plan.tversky()?;

    let current: Vec<usize> = dataset.indices(Split::Train, Some(modality));
    if current.is_empty() {
        return Err(TrainError::EmptyStage { stage, modality });
    }
    let tac_active = stage >= 2 && plan.tac_enabled && plan.replay_enabled;
    if stage >= 2 && plan.replay_enabled && replay_buffer.is_empty() {
        return Err(TrainError::EmptyReplayBuffer { stage });
    }

    // Pool for batch sampling: current-stage samples, plus the replay view
    // when replayed samples also train the intra term.
    let mut pool: Vec<SampleRef> = current
        .iter()
        .map(|&i| {
            let r = dataset.record(i);
            SampleRef {
                index: i,
                patient: r.patient,
                modality: r.modality,
            }
        })
        .collect();
    if stage >= 2 && plan.replay_enabled && plan.replay_in_intra {
        pool.extend(replay_buffer.entries().iter().map(|e| SampleRef {
            index: e.sample_index,
            patient: e.patient,
            modality: e.modality,
        }));
    }

    let mut params = params_in.load_stage_weights(model_cfg)?;
    let prev_params = params_in;
    let steps_per_epoch = (current.len() / plan.batch_size).max(1);
    let schedule = LrSchedule::new(
        plan.learning_rate,
        plan.epochs * steps_per_epoch,
        plan.warmup_frac,
        &plan.milestone_fracs,
        plan.milestone_gamma,
    );
    let mut adam = Adam::new(
        &params,
        AdamConfig {
            weight_decay: plan.weight_decay,
            ..AdamConfig::default()
        },
    );

    let mut steps = Vec::with_capacity(plan.epochs * steps_per_epoch);
    for epoch in 0..plan.epochs {
        for step in 0..steps_per_epoch {
            let global = epoch * steps_per_epoch + step;
            let lr = schedule.lr_at(global);
            let mut batch_rng =
                rng_from(plan.seed, &[0xBA7C, stage as u64, epoch as u64, step as u64]);
            let batch = sample_batch_distinct_patients(&pool, plan.batch_size, &mut batch_rng)?;

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let input = tape.constant(stack_inputs(dataset, &batch));
            let pred = forward(&mut tape, input, &bound, model_cfg)?;
            let preds = per_sample_predictions(&mut tape, pred)?;
            let l_intra = batch_intra(&mut tape, dataset, &batch, &preds, &tversky, plan.gamma)?;

            let l_tac = if tac_active {
                let mut queue_rng =
                    rng_from(plan.seed, &[0x0BAC, stage as u64, epoch as u64, step as u64]);
                let batch_preds: Vec<(Var, u32, u32)> = batch
                    .iter()
                    .zip(&preds)
                    .map(|(sref, &p)| (p, sref.patient, sref.modality))
                    .collect();
                let bank = populate_balanced_queue(
                    &mut tape,
                    replay_buffer,
                    dataset,
                    prev_params,
                    &batch_preds,
                    stage,
                    &mut queue_rng,
                )?;
                loss::tac_loss(&mut tape, &bank.entries, &tversky, plan.tau, plan.similarity)?.loss
            } else {
                tape.constant_scalar(0.0)
            };

            let total = loss::total_loss(&mut tape, l_tac, l_intra, omega)?;
            let total_v = tape.value(total).item()?;
            if !total_v.is_finite() {
                return Err(TrainError::NanLoss {
                    stage,
                    epoch,
                    step,
                    lr,
                    batch: batch
                        .iter()
                        .map(|s| dataset.record(s.index).id.clone())
                        .collect(),
                });
            }
            let record = StepRecord {
                stage,
                epoch,
                step,
                lr,
                l_intra: tape.value(l_intra).item()?,
                l_tac: tape.value(l_tac).item()?,
                l_total: total_v,
            };
            tape.backward(total)?;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for name in bound.names() {
                if let Some(g) = tape.grad(bound.get(name)?) {
                    grads.insert(name.to_string(), g);
                }
            }
            adam.step(&mut params, &grads, lr);
            steps.push(record);
        }
    }

    // End-of-stage scoring pass under the final stage weights; used for
    // replay selection, so skipped when replay is off.
    let mut per_sample_losses = Vec::new();
    if plan.replay_enabled {
        let reference = if tac_active {
            let mut score_rng = rng_from(plan.seed, &[0x5C03, stage as u64]);
            let count = plan.batch_size.min(replay_buffer.len());
            Some(replay_prediction_tensors(
                replay_buffer,
                dataset,
                prev_params,
                count,
                stage,
                &mut score_rng,
            )?)
        } else {
            None
        };
        for chunk in current.chunks(plan.batch_size) {
            let refs: Vec<SampleRef> = chunk
                .iter()
                .map(|&i| {
                    let r = dataset.record(i);
                    SampleRef {
                        index: i,
                        patient: r.patient,
                        modality: r.modality,
                    }
                })
                .collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let input = tape.constant(stack_inputs(dataset, &refs));
            let pred = forward(&mut tape, input, &bound, model_cfg)?;
            let preds = per_sample_predictions(&mut tape, pred)?;
            let ref_entries = reference
                .as_ref()
                .map(|r| insert_constant_entries(&mut tape, r));
            for (sref, &p) in refs.iter().zip(&preds) {
                let mask = tape.constant(dataset.masks_of(sref.index).clone());
                let intra = loss::intra_loss(&mut tape, p, mask, &tversky, plan.gamma)?;
                let mut value = tape.value(intra).item()?;
                if let Some(entries) = &ref_entries {
                    let clamped = tape.clamp01(p);
                    let mut bank = vec![PredictionEntry {
                        probs: clamped,
                        patient: sref.patient,
                        modality: sref.modality,
                        source: SourceModel::CurrentStage,
                    }];
                    bank.extend_from_slice(entries);
                    let tac =
                        loss::tac_loss(&mut tape, &bank, &tversky, plan.tau, plan.similarity)?;
                    value += omega * tape.value(tac.loss).item()?;
                }
                per_sample_losses.push((sref.index, value));
            }
        }
        let candidates: Vec<ReplayEntry> = per_sample_losses
            .iter()
            .map(|&(index, _)| {
                let r = dataset.record(index);
                ReplayEntry {
                    sample_index: index,
                    sample_id: r.id.clone(),
                    patient: r.patient,
                    modality: r.modality,
                    stored_loss: 0.0,
                }
            })
            .collect();
        let losses: Vec<f64> = per_sample_losses.iter().map(|&(_, l)| l).collect();
        replay_buffer.extend_from_stage(&candidates, &losses, plan.retention_percent)?;
    }

    Ok(StageResult {
        params,
        per_sample_losses,
        steps,
    })
}
