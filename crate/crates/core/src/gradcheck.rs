//! Central finite-difference gradient checking.
//!
//! The checker evaluates only the supplied loss closure, never the backward
//! pass it is judging, so it stays an independent oracle. ReLU makes the
//! loss piecewise smooth; coordinates whose probe points land on different
//! activation branches are skipped and counted, because a finite difference
//! across a kink says nothing about the one-sided gradient the backward pass
//! reports.

use crate::error::Result;
use crate::model::{GradientSet, MlpParams};
use crate::tensor::Matrix;

/// Outcome of one finite-difference sweep over every weight coordinate.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// Worst per-layer relative error, where each layer's differences are
    /// measured against that layer's largest gradient magnitude.
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the probe crossed an activation kink.
    pub skipped: usize,
}

/// Compare `analytic` against central differences of `loss` at `at`.
///
/// `pattern` must return the activation branch (one bool per hidden unit)
/// of a forward pass; a coordinate is skipped when the patterns at the two
/// probe points differ. `h` is the absolute probe step.
pub fn central_diff_check(
    loss: impl Fn(&MlpParams) -> Result<f64>,
    pattern: impl Fn(&MlpParams) -> Result<Vec<bool>>,
    at: &MlpParams,
    analytic: &GradientSet,
    h: f64,
) -> Result<FdReport> {
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for l in 1..=at.dims().depth() {
        let w = at.weight(l);
        let g = analytic.layer(l);
        let mut fd = Matrix::zeros(w.rows(), w.cols());
        let mut fd_kink = vec![false; w.rows() * w.cols()];
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                let plus = nudge(at, l, r, c, h)?;
                let minus = nudge(at, l, r, c, -h)?;
                if pattern(&plus)? != pattern(&minus)? {
                    fd_kink[r * w.cols() + c] = true;
                    skipped += 1;
                    continue;
                }
                fd.set(r, c, (loss(&plus)? - loss(&minus)?) / (2.0 * h));
                checked += 1;
            }
        }
        // Judge differences against the layer's gradient scale; entries that
        // sit at a kink are excluded from both the scale and the error.
        let scale = g
            .data()
            .iter()
            .zip(fd.data())
            .zip(&fd_kink)
            .filter(|(_, kink)| !**kink)
            .map(|((a, b), _)| a.abs().max(b.abs()))
            .fold(1e-300, f64::max);
        for ((a, b), kink) in g.data().iter().zip(fd.data()).zip(&fd_kink) {
            if !kink {
                max_rel_err = max_rel_err.max((a - b).abs() / scale);
            }
        }
    }
    Ok(FdReport { max_rel_err, checked, skipped })
}

/// Copy of `params` with one weight entry shifted by `delta`.
fn nudge(params: &MlpParams, l: usize, r: usize, c: usize, delta: f64) -> Result<MlpParams> {
    let mut weights: Vec<Matrix> = params.weights().to_vec();
    let w = &mut weights[l - 1];
    w.set(r, c, w.get(r, c) + delta);
    MlpParams::from_weights(params.dims().clone(), weights)
}
