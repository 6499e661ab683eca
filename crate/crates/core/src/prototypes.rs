//! Cluster prototypes built from instance features and cluster assignments.
//!
//! Supervised rows (ground truth or a reliable pseudo-label) enter the
//! assignment matrix as one-hot rows; every other row keeps its predicted
//! probability distribution. The prototype of cluster `c` is the
//! assignment-weighted sum of instance features, scaled to unit length.
//! Prototypes are rebuilt from each batch.

use crate::error::{Error, Result};
use crate::losses::{self, Supervision};
use crate::math::{self, Matrix, Tape, Var, NORM_EPS};
use crate::model::{BatchTensors, ViewVars};

/// Unit-norm prototype rows; stale rows are zero and excluded from PCL.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix {
    pub rows: Matrix,
    pub stale: Vec<bool>,
}

impl PrototypeMatrix {
    pub fn k(&self) -> usize {
        self.rows.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.stale
            .iter()
            .enumerate()
            .filter(|(_, s)| !**s)
            .map(|(c, _)| c)
    }
}

/// Soft-row keep mask and hard one-hot rows for `mask` over `k` clusters.
fn assignment_parts(mask: &[Supervision], k: usize) -> Result<(Matrix, Matrix)> {
    let n = mask.len();
    let mut soft = Matrix::filled(n, k, 1.0);
    let mut hard = Matrix::zeros(n, k);
    for (i, s) in mask.iter().enumerate() {
        if let Some(c) = s.class() {
            if c >= k {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: k,
                });
            }
            soft.row_mut(i).fill(0.0);
            hard[(i, c)] = 1.0;
        }
    }
    Ok((soft, hard))
}

/// The combined assignment matrix Ĝ.
pub fn build_assignment_matrix(g: &Matrix, mask: &[Supervision]) -> Result<Matrix> {
    if mask.len() != g.rows() {
        return Err(Error::LengthMismatch {
            left: g.rows(),
            right: mask.len(),
        });
    }
    let (soft, hard) = assignment_parts(mask, g.cols())?;
    g.hadamard(&soft)?.add(&hard)
}

/// `Ĝᵀ F` with each row scaled to unit norm.
pub fn compute_prototypes(g_hat: &Matrix, f: &Matrix) -> Result<PrototypeMatrix> {
    let sums = math::matmul_transa(g_hat, f)?;
    Ok(normalize_prototypes(sums))
}

fn normalize_prototypes(mut sums: Matrix) -> PrototypeMatrix {
    let mut stale = vec![false; sums.rows()];
    for (c, flag) in stale.iter_mut().enumerate() {
        let row = sums.row_mut(c);
        let n = math::norm(row);
        if n <= NORM_EPS {
            *flag = true;
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    PrototypeMatrix { rows: sums, stale }
}

/// Prototypes of both views; a cluster stale in either view is stale in both.
pub fn prototype_pair(
    batch: &BatchTensors,
    mask: &[Supervision],
) -> Result<(PrototypeMatrix, PrototypeMatrix)> {
    let mut a = compute_prototypes(&build_assignment_matrix(&batch.g, mask)?, &batch.f)?;
    let mut b = compute_prototypes(&build_assignment_matrix(&batch.g_aug, mask)?, &batch.f_aug)?;
    for c in 0..a.k() {
        if a.stale[c] || b.stale[c] {
            a.stale[c] = true;
            b.stale[c] = true;
            a.rows.row_mut(c).fill(0.0);
            b.rows.row_mut(c).fill(0.0);
        }
    }
    Ok((a, b))
}

fn prototype_sums_on_tape(
    tape: &mut Tape,
    view: ViewVars,
    soft: &Matrix,
    hard: &Matrix,
) -> Result<Var> {
    let kept = tape.mul_const(view.g, soft.clone())?;
    let g_hat = tape.add_const(kept, hard)?;
    let g_hat_t = tape.transpose(g_hat);
    tape.matmul(g_hat_t, view.f)
}

/// Records the prototype contrastive loss between two views.
///
/// Returns `None` when fewer than two clusters are active in both views.
pub fn pcl_on_tape(
    tape: &mut Tape,
    view: ViewVars,
    view_aug: ViewVars,
    mask: &[Supervision],
    tau: f64,
) -> Result<Option<Var>> {
    let g = tape.value(view.g);
    if mask.len() != g.rows() {
        return Err(Error::LengthMismatch {
            left: g.rows(),
            right: mask.len(),
        });
    }
    let (soft, hard) = assignment_parts(mask, g.cols())?;
    let sums = prototype_sums_on_tape(tape, view, &soft, &hard)?;
    let sums_aug = prototype_sums_on_tape(tape, view_aug, &soft, &hard)?;
    let (va, vb) = (tape.value(sums), tape.value(sums_aug));
    let active: Vec<usize> = (0..va.rows())
        .filter(|&c| math::norm(va.row(c)) > NORM_EPS && math::norm(vb.row(c)) > NORM_EPS)
        .collect();
    if active.len() < 2 {
        return Ok(None);
    }
    let sa = tape.select_rows(sums, &active)?;
    let sb = tape.select_rows(sums_aug, &active)?;
    let za = tape.normalize_rows(sa)?;
    let zb = tape.normalize_rows(sb)?;
    losses::pcl_on_tape(tape, za, zb, tau).map(Some)
}
