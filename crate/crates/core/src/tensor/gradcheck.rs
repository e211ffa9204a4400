//! Central finite-difference verification of tape gradients.

use crate::scalar::{cast, Scalar};
use crate::tensor::tape::{TapeBase, Var};
use crate::tensor::{Result, TensorBase, TensorError};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub tol: f64,
    pub pass: bool,
}

fn eval_scalar<T, F>(f: &F, x: &TensorBase<T>) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut TapeBase<T>, Var) -> Result<Var>,
{
    let mut tape = TapeBase::new();
    let v = tape.constant(x.clone());
    let y = f(&mut tape, v)?;
    if tape.value(y).numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.shape(y).to_vec(),
        });
    }
    Ok(tape.value(y).data()[0].to_f64().expect("finite scalar"))
}

fn rel_err(fd: f64, ad: f64) -> f64 {
    let denom = fd.abs().max(ad.abs()).max(1e-6);
    (fd - ad).abs() / denom
}

/// Compare the tape gradient of a scalar-valued function against central
/// differences at every coordinate of `x`.
pub fn finite_difference_check<T, F>(
    f: F,
    x: &TensorBase<T>,
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut TapeBase<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, h, tol, &coords)
}

/// Same comparison restricted to a coordinate subset (used for larger
/// parameter tensors where full sweeps are wasteful).
pub fn finite_difference_check_at<T, F>(
    f: F,
    x: &TensorBase<T>,
    h: f64,
    tol: f64,
    coords: &[usize],
) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut TapeBase<T>, Var) -> Result<Var>,
{
    let mut tape = TapeBase::new();
    let v = tape.leaf(x.clone(), true);
    let y = f(&mut tape, v)?;
    if tape.value(y).numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.shape(y).to_vec(),
        });
    }
    tape.backward(y)?;
    let auto = tape
        .grad(v)
        .expect("leaf requires grad")
        .into_data()
        .into_iter()
        .map(|g| g.to_f64().expect("finite gradient"))
        .collect::<Vec<_>>();

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        tol,
        pass: true,
    };
    for &i in coords {
        if i >= x.numel() {
            return Err(TensorError::IndexOutOfBounds {
                index: i,
                len: x.numel(),
            });
        }
        let base = x.data()[i].to_f64().expect("finite input");
        let mut plus = x.clone();
        plus.data_mut()[i] = cast::<T>(base + h);
        let mut minus = x.clone();
        minus.data_mut()[i] = cast::<T>(base - h);
        let fd = (eval_scalar(&f, &plus)? - eval_scalar(&f, &minus)?) / (2.0 * h);
        let err = rel_err(fd, auto[i]);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
