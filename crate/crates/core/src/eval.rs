//! Evaluation: per-patient Dice over every modality subset, forgetting
//! across stages, and a paired t-test.
//!
//! Dice is pooled per patient: all of a patient's test slices contribute to
//! one intersection/size count per region before the ratio is taken.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, MemDataset, ModalitySubset, Split, NUM_REGIONS, REGION_NAMES};
use crate::model::{forward, ModelError, ModelParams};
use crate::tensor::TensorError;
use crate::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask shapes differ: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("no samples in the requested split")]
    EmptyTestSplit,
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("paired t-test needs equal lengths, got {lhs} and {rhs}")]
    UnpairedLengths { lhs: usize, rhs: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Dice similarity of two binary masks; 1 when both are empty.
pub fn dsc(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(EvalError::ShapeMismatch {
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let mut inter = 0u64;
    let mut p_count = 0u64;
    let mut t_count = 0u64;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let p = p > 0.5;
        let t = t > 0.5;
        inter += (p && t) as u64;
        p_count += p as u64;
        t_count += t as u64;
    }
    if p_count + t_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_count + t_count) as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DscRow {
    pub subset_bits: u8,
    pub subset: String,
    pub region: String,
    pub patient: u32,
    pub dsc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DscSummaryRow {
    pub subset_bits: u8,
    pub subset: String,
    pub region: String,
    pub mean_dsc: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DscReport {
    pub rows: Vec<DscRow>,
    pub summary: Vec<DscSummaryRow>,
}

impl DscReport {
    pub fn mean_for(&self, subset: ModalitySubset, region: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.subset_bits == subset.0 && r.region == REGION_NAMES[region])
            .map(|r| r.mean_dsc)
    }

    /// Per-patient scores for one (subset, region), patient-ascending.
    pub fn patient_scores(&self, subset: ModalitySubset, region: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.subset_bits == subset.0 && r.region == REGION_NAMES[region])
            .map(|r| r.dsc)
            .collect()
    }

    pub fn write_rows_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "subset_bits,subset,region,patient,dsc")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.subset_bits, r.subset, r.region, r.patient, r.dsc)?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "subset_bits,subset,region,mean_dsc")?;
        for r in &self.summary {
            writeln!(w, "{},{},{},{}", r.subset_bits, r.subset, r.region, r.mean_dsc)?;
        }
        Ok(())
    }
}

/// Pooled per-patient intersection and size counts for one subset.
fn subset_patient_dsc(
    params: &ModelParams,
    dataset: &MemDataset,
    split: Split,
    subset: ModalitySubset,
    threshold: f64,
    batch_size: usize,
) -> Result<Vec<(u32, [f64; NUM_REGIONS])>> {
    let patients = dataset.patients(split);
    if patients.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let size = dataset.manifest.image_size;
    let plane = size * size;
    let classes = params.config().num_classes;
    let slices = dataset.slices();

    // (patient, slice) pairs in deterministic order.
    let mut units = Vec::new();
    for &p in &patients {
        for s in 0..slices {
            units.push((p, s));
        }
    }

    use std::collections::BTreeMap;
    let mut inter: BTreeMap<u32, [u64; NUM_REGIONS]> = Default::default();
    let mut pred_count: BTreeMap<u32, [u64; NUM_REGIONS]> = Default::default();
    let mut true_count: BTreeMap<u32, [u64; NUM_REGIONS]> = Default::default();

    for chunk in units.chunks(batch_size.max(1)) {
        let mut input = Tensor::zeros(&[
            chunk.len(),
            dataset.manifest.num_modalities,
            size,
            size,
        ]);
        let sample_plane = dataset.manifest.num_modalities * plane;
        for (slot, &(p, s)) in chunk.iter().enumerate() {
            let img = dataset.combined_input(p, s, subset)?;
            input.data_mut()[slot * sample_plane..(slot + 1) * sample_plane]
                .copy_from_slice(img.data());
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(input);
        let pred = forward(&mut tape, x, &bound, params.config())?;
        let value = tape.value(pred);
        for (slot, &(p, s)) in chunk.iter().enumerate() {
            let masks = dataset.masks_for(p, s);
            let inter_e = inter.entry(p).or_default();
            let pred_e = pred_count.entry(p).or_default();
            let true_e = true_count.entry(p).or_default();
            for r in 0..classes.min(NUM_REGIONS) {
                let base = (slot * classes + r) * plane;
                for q in 0..plane {
                    let pv = value.data()[base + q] >= threshold;
                    let tv = masks.data()[r * plane + q] > 0.5;
                    inter_e[r] += (pv && tv) as u64;
                    pred_e[r] += pv as u64;
                    true_e[r] += tv as u64;
                }
            }
        }
    }

    let mut out = Vec::new();
    for &p in &patients {
        let mut scores = [0.0f64; NUM_REGIONS];
        for r in 0..NUM_REGIONS {
            let i = inter[&p][r];
            let total = pred_count[&p][r] + true_count[&p][r];
            scores[r] = if total == 0 { 1.0 } else { 2.0 * i as f64 / total as f64 };
        }
        out.push((p, scores));
    }
    Ok(out)
}

/// Evaluate every nonempty modality subset: zero the unavailable channels,
/// run inference over the split, and pool Dice per patient and region.
pub fn evaluate_subsets(
    params: &ModelParams,
    dataset: &MemDataset,
    split: Split,
    threshold: f64,
    batch_size: usize,
) -> Result<DscReport> {
    let mut report = DscReport::default();
    for subset in ModalitySubset::enumerate_nonempty() {
        let per_patient = subset_patient_dsc(params, dataset, split, subset, threshold, batch_size)?;
        for r in 0..NUM_REGIONS {
            let mut total = 0.0;
            for &(patient, scores) in &per_patient {
                report.rows.push(DscRow {
                    subset_bits: subset.0,
                    subset: subset.label(),
                    region: REGION_NAMES[r].into(),
                    patient,
                    dsc: scores[r],
                });
                total += scores[r];
            }
            report.summary.push(DscSummaryRow {
                subset_bits: subset.0,
                subset: subset.label(),
                region: REGION_NAMES[r].into(),
                mean_dsc: total / per_patient.len() as f64,
            });
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub stage: usize,
    pub modality: u32,
    pub region: String,
    pub mean_dsc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForgettingSummaryRow {
    pub modality: u32,
    pub region: String,
    pub max_dsc: f64,
    pub final_dsc: f64,
    pub forgetting: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub rows: Vec<ForgettingRow>,
    pub summary: Vec<ForgettingSummaryRow>,
}

impl ForgettingReport {
    pub fn mean_for(&self, stage: usize, modality: u32, region: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.stage == stage && r.modality == modality && r.region == REGION_NAMES[region])
            .map(|r| r.mean_dsc)
    }

    pub fn write_rows_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "stage,modality,region,mean_dsc")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.stage, r.modality, r.region, r.mean_dsc)?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "modality,region,max_dsc,final_dsc,forgetting")?;
        for r in &self.summary {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.modality, r.region, r.max_dsc, r.final_dsc, r.forgetting
            )?;
        }
        Ok(())
    }
}

/// After each stage, score every already-seen modality on its single-channel
/// test data; forgetting is the drop from the per-modality peak to the final
/// stage.
pub fn forgetting_report(
    stage_params: &[ModelParams],
    modality_order: &[u32],
    dataset: &MemDataset,
    threshold: f64,
    batch_size: usize,
) -> Result<ForgettingReport> {
    let mut report = ForgettingReport::default();
    for (stage_ix, params) in stage_params.iter().enumerate() {
        let stage = stage_ix + 1;
        for (m_ix, &modality) in modality_order.iter().enumerate().take(stage) {
            let _ = m_ix;
            let per_patient = subset_patient_dsc(
                params,
                dataset,
                Split::Test,
                ModalitySubset::single(modality as usize),
                threshold,
                batch_size,
            )?;
            for r in 0..NUM_REGIONS {
                let mean = per_patient.iter().map(|(_, s)| s[r]).sum::<f64>()
                    / per_patient.len() as f64;
                report.rows.push(ForgettingRow {
                    stage,
                    modality,
                    region: REGION_NAMES[r].into(),
                    mean_dsc: mean,
                });
            }
        }
    }
    let final_stage = stage_params.len();
    for &modality in modality_order.iter().take(final_stage) {
        for r in 0..NUM_REGIONS {
            let series: Vec<f64> = report
                .rows
                .iter()
                .filter(|row| row.modality == modality && row.region == REGION_NAMES[r])
                .map(|row| row.mean_dsc)
                .collect();
            if series.is_empty() {
                continue;
            }
            let max = series.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let last = *series.last().expect("nonempty");
            report.summary.push(ForgettingSummaryRow {
                modality,
                region: REGION_NAMES[r].into(),
                max_dsc: max,
                final_dsc: last,
                forgetting: max - last,
            });
        }
    }
    Ok(report)
}

/// Paired two-tailed t-test result. Zero-variance differences set the
/// degenerate flag: `t` is 0 for identical samples and infinite otherwise,
/// with `p` pinned to 1 or 0 respectively instead of dividing by zero.
#[derive(Clone, Copy, Debug)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
    pub degenerate: bool,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(EvalError::UnpairedLengths { lhs: a.len(), rhs: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest { t, p, dof, degenerate: true });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    // Two-tailed p via the regularized incomplete beta:
    // p = I_{nu/(nu+t^2)}(nu/2, 1/2).
    let nu = dof as f64;
    let x = nu / (nu + t * t);
    let p = incomplete_beta(nu / 2.0, 0.5, x);
    Ok(TTest { t, p, dof, degenerate: false })
}

/// ln Gamma via the Lanczos approximation.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Continued fraction for the regularized incomplete beta function.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 200;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsc_identities() {
        let a = Tensor::from_vec(vec![4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);

        let b = Tensor::from_vec(vec![4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);

        let empty = Tensor::zeros(&[4]);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn dsc_counting_oracle() {
        // |P| = 4, |T| = 6, |P intersect T| = 3 -> 2*3/10 = 0.6
        let pred = Tensor::from_vec(
            vec![10],
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let truth = Tensor::from_vec(
            vec![10],
            vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        assert!((dsc(&pred, &truth).unwrap() - 0.6).abs() < 1e-15);
        // Symmetric in its arguments.
        assert_eq!(dsc(&pred, &truth).unwrap(), dsc(&truth, &pred).unwrap());
    }

    #[test]
    fn dsc_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[4]);
        let b = Tensor::zeros(&[5]);
        assert!(matches!(dsc(&a, &b), Err(EvalError::ShapeMismatch { .. })));
    }

    #[test]
    fn t_test_degenerate_cases() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);

        // Constant nonzero differences.
        let r = paired_t_test(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(r.degenerate);
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert_eq!(r.p, 0.0);
    }

    /// Textbook-formula oracle: t computed directly, p by Simpson quadrature
    /// of the t density.
    fn t_density(t: f64, nu: f64) -> f64 {
        let c = (ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0)).exp()
            / (nu * std::f64::consts::PI).sqrt();
        c * (1.0 + t * t / nu).powf(-(nu + 1.0) / 2.0)
    }

    fn p_two_tailed_quadrature(t: f64, nu: f64) -> f64 {
        // integrate the density from |t| to a far cutoff
        let a = t.abs();
        let b = a + 60.0;
        let n = 40_000;
        let h = (b - a) / n as f64;
        let mut acc = t_density(a, nu) + t_density(b, nu);
        for i in 1..n {
            let x = a + i as f64 * h;
            acc += t_density(x, nu) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        2.0 * acc * h / 3.0
    }

    #[test]
    fn t_test_matches_textbook_oracle() {
        let diffs = [0.1, -0.2, 0.3, 0.05, 0.15];
        let b = [1.0, 1.0, 1.0, 1.0, 1.0];
        let a: Vec<f64> = diffs.iter().map(|d| 1.0 + d).collect();
        let r = paired_t_test(&a, &b).unwrap();

        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let t_direct = mean / (var.sqrt() / n.sqrt());
        assert!((r.t - t_direct).abs() < 1e-12, "t {} vs {}", r.t, t_direct);

        let p_quad = p_two_tailed_quadrature(t_direct, n - 1.0);
        assert!((r.p - p_quad).abs() < 1e-6, "p {} vs {}", r.p, p_quad);
        assert_eq!(r.dof, 4);
    }

    #[test]
    fn t_test_antisymmetry() {
        let a = [0.9, 0.7, 0.85, 0.8];
        let b = [0.6, 0.75, 0.7, 0.65];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert!((ab.t + ba.t).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
    }

    #[test]
    fn t_test_rejects_bad_input() {
        assert!(matches!(
            paired_t_test(&[1.0], &[1.0]),
            Err(EvalError::TooFewPairs(1))
        ));
        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[1.0]),
            Err(EvalError::UnpairedLengths { .. })
        ));
    }
}
