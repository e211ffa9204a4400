//! Tversky similarity and the losses built on it.
//!
//! The similarity treats predictions as soft masks and penalizes false
//! positives and false negatives separately (`alpha`, `beta`); at
//! `alpha = beta = 0.5` it reduces to the soft Dice coefficient. The
//! contrastive loss compares predictions across the two prediction queues,
//! pairing same-region predictions from different patients as positives.

use thiserror::Error;

use crate::scalar::{cast, Scalar};
use crate::tensor::tape::{TapeBase, Var};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("{which} contains {value}, outside [0, 1]")]
    OutOfRange { which: &'static str, value: f64 },
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("queue entries disagree on class count: {lhs} vs {rhs}")]
    ClassCountMismatch { lhs: usize, rhs: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// False-positive weight, false-negative weight, and smoothing constant.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl TverskyParams {
    /// `epsilon = 0` is permitted so exact hand values stay reachable; the
    /// default smoothing also defines S = 1 when both masks are empty.
    pub fn new(alpha: f64, beta: f64, epsilon: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !(beta >= 0.0) || !(epsilon >= 0.0) {
            return Err(LossError::BadParam(format!(
                "alpha, beta, epsilon must be non-negative (got {alpha}, {beta}, {epsilon})"
            )));
        }
        Ok(Self { alpha, beta, epsilon })
    }

    pub fn with_epsilon(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(alpha, beta, 1e-6)
    }
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 1.5,
            epsilon: 1e-6,
        }
    }
}

/// Similarity kernel used inside the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Tversky,
    Cosine,
}

impl std::str::FromStr for Similarity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tversky" => Ok(Self::Tversky),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown similarity '{other}'")),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Tversky => write!(f, "tversky"),
            Self::Cosine => write!(f, "cosine"),
        }
    }
}

fn check_unit_range<T: Scalar>(
    tape: &TapeBase<T>,
    which: &'static str,
    v: Var,
) -> Result<()> {
    for &x in tape.value(v).data() {
        let x = x.to_f64().unwrap_or(f64::NAN);
        if !(0.0..=1.0).contains(&x) {
            return Err(LossError::OutOfRange { which, value: x });
        }
    }
    Ok(())
}

/// Soft Tversky index between two same-length vectors with entries in [0, 1]:
/// `(<g,u> + eps) / (<g,u> + alpha <g,1-u> + beta <1-g,u> + eps)`.
pub fn tversky_similarity<T: Scalar>(
    tape: &mut TapeBase<T>,
    g: Var,
    u: Var,
    params: &TverskyParams,
) -> Result<Var> {
    let (ng, nu) = (tape.value(g).numel(), tape.value(u).numel());
    if ng != nu {
        return Err(LossError::LengthMismatch { lhs: ng, rhs: nu });
    }
    check_unit_range(tape, "g", g)?;
    check_unit_range(tape, "u", u)?;
    let g = tape.reshape(g, &[ng])?;
    let u = tape.reshape(u, &[nu])?;

    let eps = cast::<T>(params.epsilon);
    let prod = tape.mul(g, u)?;
    let overlap = tape.sum(prod);
    let one_minus_u = tape.rsub_scalar(u, T::one());
    let fp = tape.mul(g, one_minus_u)?;
    let fp = tape.sum(fp);
    let one_minus_g = tape.rsub_scalar(g, T::one());
    let fneg = tape.mul(one_minus_g, u)?;
    let fneg = tape.sum(fneg);

    let num = tape.add_scalar(overlap, eps);
    let fp_w = tape.mul_scalar(fp, cast::<T>(params.alpha));
    let fn_w = tape.mul_scalar(fneg, cast::<T>(params.beta));
    let den = tape.add(overlap, fp_w)?;
    let den = tape.add(den, fn_w)?;
    let den = tape.add_scalar(den, eps);
    tape.div(num, den).map_err(Into::into)
}

/// Cosine similarity, offered as the ablation alternative to the Tversky
/// kernel. A small stabilizer keeps the norms away from zero.
pub fn cosine_similarity<T: Scalar>(tape: &mut TapeBase<T>, g: Var, u: Var) -> Result<Var> {
    let (ng, nu) = (tape.value(g).numel(), tape.value(u).numel());
    if ng != nu {
        return Err(LossError::LengthMismatch { lhs: ng, rhs: nu });
    }
    let g = tape.reshape(g, &[ng])?;
    let u = tape.reshape(u, &[nu])?;
    let prod = tape.mul(g, u)?;
    let dot = tape.sum(prod);
    let gg = tape.mul(g, g)?;
    let gg = tape.sum(gg);
    let uu = tape.mul(u, u)?;
    let uu = tape.sum(uu);
    let stab = cast::<T>(1e-12);
    let gg = tape.add_scalar(gg, stab);
    let uu = tape.add_scalar(uu, stab);
    let ng = tape.powf(gg, cast::<T>(0.5))?;
    let nu = tape.powf(uu, cast::<T>(0.5))?;
    let den = tape.mul(ng, nu)?;
    tape.div(dot, den).map_err(Into::into)
}

pub fn similarity<T: Scalar>(
    tape: &mut TapeBase<T>,
    kind: Similarity,
    g: Var,
    u: Var,
    params: &TverskyParams,
) -> Result<Var> {
    match kind {
        Similarity::Tversky => tversky_similarity(tape, g, u, params),
        Similarity::Cosine => cosine_similarity(tape, g, u),
    }
}

fn check_pred_target<T: Scalar>(tape: &TapeBase<T>, pred: Var, target: Var) -> Result<usize> {
    let sp = tape.shape(pred);
    let st = tape.shape(target);
    if sp != st || sp.is_empty() {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "per_class_loss",
            lhs: sp.to_vec(),
            rhs: st.to_vec(),
        }));
    }
    Ok(sp[0])
}

/// Per-class Tversky similarities between `(C, ...)` prediction and target.
fn per_class_similarities<T: Scalar>(
    tape: &mut TapeBase<T>,
    pred: Var,
    target: Var,
    params: &TverskyParams,
) -> Result<Vec<Var>> {
    let classes = check_pred_target(tape, pred, target)?;
    let per_class = tape.value(pred).numel() / classes;
    let pred = tape.reshape(pred, &[classes, per_class])?;
    let target = tape.reshape(target, &[classes, per_class])?;
    let mut sims = Vec::with_capacity(classes);
    for c in 0..classes {
        let pc = tape.index_select(pred, &[c])?;
        let tc = tape.index_select(target, &[c])?;
        sims.push(tversky_similarity(tape, pc, tc, params)?);
    }
    Ok(sims)
}

fn mean_of<T: Scalar>(tape: &mut TapeBase<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.mul_scalar(acc, T::one() / cast::<T>(terms.len() as f64)))
}

/// Tversky-based Dice loss: one minus the class-mean similarity.
pub fn tversky_dice_loss<T: Scalar>(
    tape: &mut TapeBase<T>,
    pred: Var,
    target: Var,
    params: &TverskyParams,
) -> Result<Var> {
    let sims = per_class_similarities(tape, pred, target, params)?;
    let mean = mean_of(tape, &sims)?;
    Ok(tape.rsub_scalar(mean, T::one()))
}

/// Focal Tversky loss: class-mean of `(1 - S_c)^gamma`.
pub fn focal_tversky_loss<T: Scalar>(
    tape: &mut TapeBase<T>,
    pred: Var,
    target: Var,
    params: &TverskyParams,
    gamma: f64,
) -> Result<Var> {
    if !(gamma > 0.0) {
        return Err(LossError::BadParam(format!("gamma must be positive, got {gamma}")));
    }
    let sims = per_class_similarities(tape, pred, target, params)?;
    let mut terms = Vec::with_capacity(sims.len());
    for s in sims {
        let c = tape.rsub_scalar(s, T::one());
        terms.push(tape.powf(c, cast::<T>(gamma))?);
    }
    mean_of(tape, &terms)
}

/// Intra-modality regularization: Dice-Tversky plus focal-Tversky, sharing
/// one set of per-class similarities.
pub fn intra_loss<T: Scalar>(
    tape: &mut TapeBase<T>,
    pred: Var,
    target: Var,
    params: &TverskyParams,
    gamma: f64,
) -> Result<Var> {
    if !(gamma > 0.0) {
        return Err(LossError::BadParam(format!("gamma must be positive, got {gamma}")));
    }
    let sims = per_class_similarities(tape, pred, target, params)?;
    let mean = mean_of(tape, &sims)?;
    let dt = tape.rsub_scalar(mean, T::one());
    let mut focal_terms = Vec::with_capacity(sims.len());
    for s in sims {
        let c = tape.rsub_scalar(s, T::one());
        focal_terms.push(tape.powf(c, cast::<T>(gamma))?);
    }
    let ft = mean_of(tape, &focal_terms)?;
    tape.add(dt, ft).map_err(Into::into)
}

/// Which model produced a queue entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceModel {
    PreviousStage,
    CurrentStage,
}

/// One prediction in the memory bank: per-class probability maps plus the
/// identity needed to form pairs.
#[derive(Clone, Copy, Debug)]
pub struct PredictionEntry {
    /// `(C, ...)` probability maps on the tape, values in [0, 1].
    pub probs: Var,
    pub patient: u32,
    pub modality: u32,
    pub source: SourceModel,
}

/// Result of the contrastive loss over the bank.
#[derive(Clone, Copy, Debug)]
pub struct TacOutcome {
    pub loss: Var,
    /// Set when no anchor had a valid positive; the loss is then zero.
    pub degenerate: bool,
    /// Number of (anchor, positive) terms averaged.
    pub terms: usize,
}

fn slice_class_maps<T: Scalar>(
    tape: &mut TapeBase<T>,
    entries: &[PredictionEntry],
    classes: usize,
) -> Result<Vec<Vec<Var>>> {
    let mut class_maps = Vec::with_capacity(entries.len());
    for e in entries {
        let s = tape.shape(e.probs);
        if s.is_empty() || s[0] != classes {
            return Err(LossError::ClassCountMismatch {
                lhs: classes,
                rhs: s.first().copied().unwrap_or(0),
            });
        }
        let per_class = tape.value(e.probs).numel() / classes;
        let rows = tape.reshape(e.probs, &[classes, per_class])?;
        let maps = (0..classes)
            .map(|c| tape.index_select(rows, &[c]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        class_maps.push(maps);
    }
    Ok(class_maps)
}

/// One direction of the contrastive loss: every (anchor entry, class) in
/// `anchors` pairs against `candidates`. Positives share the class and come
/// from a different patient; negatives differ in both patient and class.
/// Each (anchor, positive) pair contributes
/// `-log(exp(S(a,p)/tau) / (exp(S(a,p)/tau) + sum_neg exp(S(a,n)/tau)))`.
/// Anchors without a positive are skipped.
pub fn tac_terms<T: Scalar>(
    tape: &mut TapeBase<T>,
    anchors: &[PredictionEntry],
    candidates: &[PredictionEntry],
    params: &TverskyParams,
    tau: f64,
    kind: Similarity,
) -> Result<Vec<Var>> {
    if !(tau > 0.0) {
        return Err(LossError::BadParam(format!("tau must be positive, got {tau}")));
    }
    let Some(first) = anchors.first().or_else(|| candidates.first()) else {
        return Ok(Vec::new());
    };
    let s = tape.shape(first.probs);
    if s.is_empty() {
        return Err(LossError::Tensor(TensorError::InvalidShape {
            op: "tac_terms",
            shape: s.to_vec(),
            msg: "entry probs need a class axis".into(),
        }));
    }
    let classes = s[0];
    let anchor_maps = slice_class_maps(tape, anchors, classes)?;
    let candidate_maps = slice_class_maps(tape, candidates, classes)?;

    let inv_tau = cast::<T>(1.0 / tau);
    let mut terms = Vec::new();
    for (ai, anchor) in anchors.iter().enumerate() {
        for c in 0..classes {
            let anchor_map = anchor_maps[ai][c];
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for (oi, other) in candidates.iter().enumerate() {
                if other.patient == anchor.patient {
                    continue;
                }
                for (z, &map) in candidate_maps[oi].iter().enumerate() {
                    if z == c {
                        positives.push(map);
                    } else {
                        negatives.push(map);
                    }
                }
            }
            if positives.is_empty() {
                continue;
            }
            // Anchor is g, the paired prediction is u.
            let mut neg_sum: Option<Var> = None;
            for n in negatives {
                let s = similarity(tape, kind, anchor_map, n, params)?;
                let scaled = tape.mul_scalar(s, inv_tau);
                let e = tape.exp(scaled);
                neg_sum = Some(match neg_sum {
                    Some(acc) => tape.add(acc, e)?,
                    None => e,
                });
            }
            for p in positives {
                let s = similarity(tape, kind, anchor_map, p, params)?;
                let scaled = tape.mul_scalar(s, inv_tau);
                let pe = tape.exp(scaled);
                let den = match neg_sum {
                    Some(ns) => tape.add(pe, ns)?,
                    None => pe,
                };
                let frac = tape.div(pe, den)?;
                let lg = tape.log(frac)?;
                terms.push(tape.neg(lg));
            }
        }
    }
    Ok(terms)
}

/// Contrastive loss over the balanced bank. Entries from each queue anchor
/// against the other queue, in both directions; the result is the mean over
/// all (anchor, positive) terms. A bank where no anchor has a valid positive
/// yields zero with the degenerate flag set.
pub fn tac_loss<T: Scalar>(
    tape: &mut TapeBase<T>,
    bank: &[PredictionEntry],
    params: &TverskyParams,
    tau: f64,
    kind: Similarity,
) -> Result<TacOutcome> {
    let replay: Vec<PredictionEntry> = bank
        .iter()
        .copied()
        .filter(|e| e.source == SourceModel::PreviousStage)
        .collect();
    let current: Vec<PredictionEntry> = bank
        .iter()
        .copied()
        .filter(|e| e.source == SourceModel::CurrentStage)
        .collect();
    let mut terms = tac_terms(tape, &current, &replay, params, tau, kind)?;
    terms.extend(tac_terms(tape, &replay, &current, params, tau, kind)?);

    if terms.is_empty() {
        log::warn!("contrastive bank degenerate: no anchor had a valid positive");
        let loss = tape.constant_scalar(T::zero());
        return Ok(TacOutcome { loss, degenerate: true, terms: 0 });
    }
    let count = terms.len();
    let loss = mean_of(tape, &terms)?;
    Ok(TacOutcome { loss, degenerate: false, terms: count })
}

/// Stage objective: `omega * tac + intra`.
pub fn total_loss<T: Scalar>(
    tape: &mut TapeBase<T>,
    tac: Var,
    intra: Var,
    omega: f64,
) -> Result<Var> {
    let weighted = tape.mul_scalar(tac, cast::<T>(omega));
    tape.add(weighted, intra).map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_difference_check;
    use crate::tensor::TensorBase;
    use proptest::prelude::*;

    type Tape = TapeBase<f64>;
    type Tensor = TensorBase<f64>;

    fn sim_value(g: &[f64], u: &[f64], params: &TverskyParams) -> f64 {
        let mut tape = Tape::new();
        let gv = tape.constant(Tensor::from_vec(vec![g.len()], g.to_vec()).unwrap());
        let uv = tape.constant(Tensor::from_vec(vec![u.len()], u.to_vec()).unwrap());
        let s = tversky_similarity(&mut tape, gv, uv, params).unwrap();
        tape.value(s).item().unwrap()
    }

    /// Independent soft Dice: 2<g,u> / (<g,g-free sum> + <u>), classic form.
    fn soft_dice(g: &[f64], u: &[f64]) -> f64 {
        let dot: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        let sg: f64 = g.iter().sum();
        let su: f64 = u.iter().sum();
        2.0 * dot / (sg + su)
    }

    #[test]
    fn identical_binary_masks_have_similarity_one() {
        let params = TverskyParams::default();
        let g = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(sim_value(&g, &g, &params), 1.0);
    }

    #[test]
    fn disjoint_masks_have_near_zero_similarity() {
        let params = TverskyParams::default();
        let g = vec![1.0, 1.0, 0.0, 0.0];
        let u = vec![0.0, 0.0, 1.0, 1.0];
        let s = sim_value(&g, &u, &params);
        assert!(s > 0.0 && s < 1e-5, "S = {s}");
    }

    #[test]
    fn hand_value_alpha_07_beta_15() {
        let params = TverskyParams::new(0.7, 1.5, 0.0).unwrap();
        let s = sim_value(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], &params);
        assert!((s - 0.3125).abs() < 1e-15, "S = {s}");
    }

    #[test]
    fn rejects_length_mismatch_and_out_of_range() {
        let params = TverskyParams::default();
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_vec(vec![2], vec![0.5, 0.5]).unwrap());
        let u = tape.constant(Tensor::from_vec(vec![3], vec![0.5, 0.5, 0.5]).unwrap());
        assert!(matches!(
            tversky_similarity(&mut tape, g, u, &params),
            Err(LossError::LengthMismatch { lhs: 2, rhs: 3 })
        ));
        let bad = tape.constant(Tensor::from_vec(vec![2], vec![0.5, 1.5]).unwrap());
        let ok = tape.constant(Tensor::from_vec(vec![2], vec![0.5, 0.5]).unwrap());
        assert!(matches!(
            tversky_similarity(&mut tape, bad, ok, &params),
            Err(LossError::OutOfRange { .. })
        ));
    }

    #[test]
    fn dice_loss_examples() {
        let params = TverskyParams::default();
        let mut tape = Tape::new();
        let pred = tape.constant(
            Tensor::from_vec(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
        );
        let loss = tversky_dice_loss(&mut tape, pred, pred, &params).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);

        // Single class, the 0.3125 hand value.
        let exact = TverskyParams::new(0.7, 1.5, 0.0).unwrap();
        let g = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let u = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let loss = tversky_dice_loss(&mut tape, g, u, &exact).unwrap();
        assert!((tape.value(loss).item().unwrap() - 0.6875).abs() < 1e-15);

        // Disjoint masks with vanishing smoothing push the loss to 1.
        let tiny = TverskyParams::new(0.7, 1.5, 1e-12).unwrap();
        let a = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![1, 4], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let loss = tversky_dice_loss(&mut tape, a, b, &tiny).unwrap();
        assert!((tape.value(loss).item().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn focal_loss_examples() {
        let exact = TverskyParams::new(0.7, 1.5, 0.0).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let u = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());

        // gamma = 1 collapses to the Dice form.
        let ft = focal_tversky_loss(&mut tape, g, u, &exact, 1.0).unwrap();
        let dt = tversky_dice_loss(&mut tape, g, u, &exact).unwrap();
        assert_eq!(
            tape.value(ft).item().unwrap(),
            tape.value(dt).item().unwrap()
        );

        let ft = focal_tversky_loss(&mut tape, g, u, &exact, 1.2).unwrap();
        let expected = 0.6875f64.powf(1.2);
        assert!((tape.value(ft).item().unwrap() - expected).abs() < 1e-12);

        // Perfect prediction.
        let perfect = focal_tversky_loss(&mut tape, g, g, &exact, 1.2).unwrap();
        assert_eq!(tape.value(perfect).item().unwrap(), 0.0);
    }

    #[test]
    fn intra_is_sum_of_dice_and_focal() {
        let exact = TverskyParams::new(0.7, 1.5, 0.0).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let u = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let li = intra_loss(&mut tape, g, u, &exact, 1.2).unwrap();
        let expected = 0.6875 + 0.6875f64.powf(1.2);
        assert!((tape.value(li).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.32536).abs() < 1e-5);

        let perfect = intra_loss(&mut tape, g, g, &exact, 1.2).unwrap();
        assert_eq!(tape.value(perfect).item().unwrap(), 0.0);

        let gamma_one = intra_loss(&mut tape, g, u, &exact, 1.0).unwrap();
        let dt = tversky_dice_loss(&mut tape, g, u, &exact).unwrap();
        let two_dt = tape.mul_scalar(dt, 2.0);
        assert!(
            (tape.value(gamma_one).item().unwrap() - tape.value(two_dt).item().unwrap()).abs()
                < 1e-15
        );
    }

    /// Bank with one current-model entry (patient 0) and one replay entry
    /// (patient 1); class maps chosen to pin the pair similarities.
    fn two_entry_bank(
        tape: &mut Tape,
        current_classes: Vec<Vec<f64>>,
        replay_classes: Vec<Vec<f64>>,
    ) -> Vec<PredictionEntry> {
        let c = current_classes.len();
        let n = current_classes[0].len();
        let cur = tape.constant(
            Tensor::from_vec(vec![c, n], current_classes.concat()).unwrap(),
        );
        let rep = tape.constant(
            Tensor::from_vec(vec![c, n], replay_classes.concat()).unwrap(),
        );
        vec![
            PredictionEntry {
                probs: cur,
                patient: 0,
                modality: 1,
                source: SourceModel::CurrentStage,
            },
            PredictionEntry {
                probs: rep,
                patient: 1,
                modality: 0,
                source: SourceModel::PreviousStage,
            },
        ]
    }

    #[test]
    fn tac_one_positive_one_negative() {
        let params = TverskyParams::default();
        let mut tape = Tape::new();
        // Positive pairs are identical masks (S = 1); negative pairs are
        // disjoint (S ~ 0).
        let a = vec![1.0, 1.0, 0.0, 0.0];
        let b = vec![0.0, 0.0, 1.0, 1.0];
        let bank = two_entry_bank(&mut tape, vec![a.clone(), b.clone()], vec![a, b]);
        let out = tac_loss(&mut tape, &bank, &params, 1.0, Similarity::Tversky).unwrap();
        assert!(!out.degenerate);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln(); // 0.31326...
        let got = tape.value(out.loss).item().unwrap();
        assert!((got - expected).abs() < 1e-5, "got {got}, expected {expected}");
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn tac_equal_similarities_give_log_two() {
        let params = TverskyParams::default();
        let mut tape = Tape::new();
        // Both classes carry the same map, so positive and negative
        // similarities coincide for every anchor.
        let m = vec![1.0, 0.0, 1.0, 0.0];
        let bank = two_entry_bank(&mut tape, vec![m.clone(), m.clone()], vec![m.clone(), m]);
        let out = tac_loss(&mut tape, &bank, &params, 1.0, Similarity::Tversky).unwrap();
        let got = tape.value(out.loss).item().unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn tac_without_negatives_is_zero() {
        let params = TverskyParams::default();
        let mut tape = Tape::new();
        // Single class: no z != c exists.
        let m = vec![1.0, 0.0, 0.0, 1.0];
        let bank = two_entry_bank(&mut tape, vec![m.clone()], vec![m]);
        let out = tac_loss(&mut tape, &bank, &params, 1.0, Similarity::Tversky).unwrap();
        assert!(!out.degenerate);
        assert_eq!(tape.value(out.loss).item().unwrap(), 0.0);
    }

    #[test]
    fn tac_same_patient_everywhere_is_degenerate() {
        let params = TverskyParams::default();
        let mut tape = Tape::new();
        let m = vec![1.0, 0.0];
        let mut bank = two_entry_bank(&mut tape, vec![m.clone()], vec![m]);
        bank[1].patient = bank[0].patient;
        let out = tac_loss(&mut tape, &bank, &params, 1.0, Similarity::Tversky).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.terms, 0);
        assert_eq!(tape.value(out.loss).item().unwrap(), 0.0);
    }

    #[test]
    fn tac_invariant_to_negative_order_and_anchor_duplication() {
        let params = TverskyParams::default();
        let mut tape = Tape::new();
        let maps: Vec<Vec<f64>> = vec![
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
        ];
        let mk = |tape: &mut Tape, patient: u32, source: SourceModel, order: &[usize]| {
            let data: Vec<f64> = order.iter().flat_map(|&i| maps[i].clone()).collect();
            PredictionEntry {
                probs: tape.constant(Tensor::from_vec(vec![3, 4], data).unwrap()),
                patient,
                modality: patient % 2,
                source,
            }
        };
        let bank = vec![
            mk(&mut tape, 0, SourceModel::CurrentStage, &[0, 1, 2]),
            mk(&mut tape, 1, SourceModel::PreviousStage, &[1, 0, 2]),
            mk(&mut tape, 2, SourceModel::PreviousStage, &[2, 1, 0]),
        ];
        let base = tac_loss(&mut tape, &bank, &params, 1.0, Similarity::Tversky).unwrap();
        let base_val = tape.value(base.loss).item().unwrap();

        // Reorder the replay-side entries: negatives are visited differently.
        let reordered = vec![bank[0], bank[2], bank[1]];
        let out = tac_loss(&mut tape, &reordered, &params, 1.0, Similarity::Tversky).unwrap();
        assert!((tape.value(out.loss).item().unwrap() - base_val).abs() < 1e-12);

        // Duplicating the anchor set against fixed candidates leaves the
        // mean term unchanged.
        let anchors = vec![bank[0]];
        let candidates = vec![bank[1], bank[2]];
        let single = tac_terms(&mut tape, &anchors, &candidates, &params, 1.0, Similarity::Tversky)
            .unwrap();
        let doubled_anchors = vec![bank[0], bank[0]];
        let doubled =
            tac_terms(&mut tape, &doubled_anchors, &candidates, &params, 1.0, Similarity::Tversky)
                .unwrap();
        assert_eq!(doubled.len(), 2 * single.len());
        let mean = |tape: &mut Tape, terms: &[Var]| {
            let total: f64 = terms
                .iter()
                .map(|&t| tape.value(t).item().unwrap())
                .sum();
            total / terms.len() as f64
        };
        let a = mean(&mut tape, &single);
        let b = mean(&mut tape, &doubled);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tac_cosine_variant_runs() {
        let params = TverskyParams::default();
        let mut tape = Tape::new();
        let a = vec![1.0, 1.0, 0.0, 0.0];
        let b = vec![0.0, 0.0, 1.0, 1.0];
        let bank = two_entry_bank(&mut tape, vec![a.clone(), b.clone()], vec![a, b]);
        let out = tac_loss(&mut tape, &bank, &params, 1.0, Similarity::Cosine).unwrap();
        let got = tape.value(out.loss).item().unwrap();
        assert!(got.is_finite() && got > 0.0);
    }

    #[test]
    fn total_loss_respects_omega() {
        let mut tape = Tape::new();
        let tac = tape.constant_scalar(0.3);
        let intra = tape.constant_scalar(1.3);
        let off = total_loss(&mut tape, tac, intra, 0.0).unwrap();
        assert_eq!(tape.value(off).item().unwrap(), 1.3);
        let on = total_loss(&mut tape, tac, intra, 1.0).unwrap();
        assert!((tape.value(on).item().unwrap() - 1.6).abs() < 1e-15);
        let zero_tac = tape.constant_scalar(0.0);
        let zero_intra = tape.constant_scalar(0.0);
        let z = total_loss(&mut tape, zero_tac, zero_intra, 1.0).unwrap();
        assert_eq!(tape.value(z).item().unwrap(), 0.0);
    }

    #[test]
    fn similarity_is_not_symmetric_in_general() {
        // Unequal false-positive and false-negative masses expose the
        // asymmetry: swapping arguments swaps which weight applies.
        let params = TverskyParams::new(0.7, 1.5, 1e-6).unwrap();
        let g = vec![1.0, 1.0, 1.0, 0.0];
        let u = vec![1.0, 0.0, 0.0, 0.0];
        let forward = sim_value(&g, &u, &params);
        let backward = sim_value(&u, &g, &params);
        assert!((forward - backward).abs() > 1e-3);

        // Symmetric when alpha == beta.
        let sym = TverskyParams::new(1.1, 1.1, 1e-6).unwrap();
        let a = sim_value(&g, &u, &sym);
        let b = sim_value(&u, &g, &sym);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn losses_match_finite_differences_on_random_masks() {
        let params = TverskyParams::default();
        let mut state = 0xabcd_0001u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            0.05 + 0.9 * ((state >> 11) as f64 / (1u64 << 53) as f64)
        };
        for _ in 0..5 {
            let pred = Tensor::from_vec(vec![2, 4, 4], (0..32).map(|_| next()).collect()).unwrap();
            let target =
                Tensor::from_vec(vec![2, 4, 4], (0..32).map(|_| if next() > 0.5 { 1.0 } else { 0.0 }).collect())
                    .unwrap();
            let t = target.clone();
            let p = params;
            let report = finite_difference_check(
                move |tape, x| {
                    let tv = tape.constant(t.clone());
                    intra_loss(tape, x, tv, &p, 1.2)
                        .map_err(|_| TensorError::Domain { op: "intra", msg: "loss".into() })
                },
                &pred,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "intra rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn tac_matches_finite_differences() {
        let params = TverskyParams::default();
        let current = Tensor::from_vec(
            vec![2, 4],
            vec![0.8, 0.3, 0.6, 0.2, 0.1, 0.7, 0.4, 0.9],
        )
        .unwrap();
        let replay = Tensor::from_vec(
            vec![2, 4],
            vec![0.7, 0.4, 0.5, 0.3, 0.2, 0.8, 0.3, 0.85],
        )
        .unwrap();
        let report = finite_difference_check(
            move |tape, x| {
                let rep = tape.constant(replay.clone());
                let bank = vec![
                    PredictionEntry {
                        probs: x,
                        patient: 0,
                        modality: 1,
                        source: SourceModel::CurrentStage,
                    },
                    PredictionEntry {
                        probs: rep,
                        patient: 1,
                        modality: 0,
                        source: SourceModel::PreviousStage,
                    },
                ];
                let out = tac_loss(tape, &bank, &params, 1.0, Similarity::Tversky)
                    .map_err(|_| TensorError::Domain { op: "tac", msg: "loss".into() })?;
                Ok(out.loss)
            },
            &current,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "tac rel err {}", report.max_rel_err);
    }

    proptest! {
        #[test]
        fn similarity_stays_in_unit_interval(
            g in proptest::collection::vec(0.0f64..=1.0, 1..24),
            u_seed in proptest::collection::vec(0.0f64..=1.0, 1..24),
            alpha in 0.0f64..3.0,
            beta in 0.0f64..3.0,
        ) {
            let n = g.len().min(u_seed.len());
            let params = TverskyParams::new(alpha, beta, 1e-6).unwrap();
            let s = sim_value(&g[..n], &u_seed[..n], &params);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        }

        #[test]
        fn dice_equivalence_at_half_half(
            g in proptest::collection::vec(0.01f64..=1.0, 4..16),
            u in proptest::collection::vec(0.01f64..=1.0, 4..16),
        ) {
            let n = g.len().min(u.len());
            let params = TverskyParams::new(0.5, 0.5, 0.0).unwrap();
            let s = sim_value(&g[..n], &u[..n], &params);
            let dice = soft_dice(&g[..n], &u[..n]);
            prop_assert!((s - dice).abs() < 1e-12);
        }

        #[test]
        fn beta_strictly_penalizes_false_negatives(
            g in proptest::collection::vec(0.0f64..=1.0, 4..16),
            u in proptest::collection::vec(0.05f64..=1.0, 4..16),
        ) {
            let n = g.len().min(u.len());
            let g = &g[..n];
            let u = &u[..n];
            let fn_mass: f64 = g.iter().zip(u).map(|(a, b)| (1.0 - a) * b).sum();
            prop_assume!(fn_mass > 1e-6);
            let lo = TverskyParams::new(0.7, 1.0, 1e-6).unwrap();
            let hi = TverskyParams::new(0.7, 1.8, 1e-6).unwrap();
            prop_assert!(sim_value(g, u, &hi) < sim_value(g, u, &lo));
        }

        #[test]
        fn focal_bounded_by_dice_for_gamma_above_one(
            pred in proptest::collection::vec(0.0f64..=1.0, 8),
            target in proptest::collection::vec(0.0f64..=1.0, 8),
        ) {
            let params = TverskyParams::default();
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::from_vec(vec![2, 4], pred).unwrap());
            let t = tape.constant(Tensor::from_vec(vec![2, 4], target).unwrap());
            let dt = tversky_dice_loss(&mut tape, p, t, &params).unwrap();
            let ft = focal_tversky_loss(&mut tape, p, t, &params, 1.2).unwrap();
            let dt_v = tape.value(dt).item().unwrap();
            let ft_v = tape.value(ft).item().unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&dt_v));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ft_v));
            prop_assert!(ft_v <= dt_v + 1e-12);
        }
    }
}
