//! The five training objectives and their weighted combination.
//!
//! Each objective has two entry points: a `*_on_tape` builder that records
//! the loss on an existing [`Tape`] so gradients reach the model parameters,
//! and a standalone `*_loss` function returning the value together with
//! gradients for each matrix input.
//!
//! All contrastive terms share one form. Given a pool of unit vectors and,
//! per anchor `a`, a set of positives `P(a)`, the anchor's term is
//!
//! ```text
//! −1/|P(a)| · Σ_{p∈P(a)} log( exp(s_ap/τ) / Σ_{k≠a} exp(s_ak/τ) )
//! ```
//!
//! and the loss is the mean over anchors with at least one positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, Tape, Var};
use crate::prototypes::PrototypeMatrix;

/// Temperature used when none is configured.
pub const DEFAULT_TAU: f64 = 0.5;
/// Floor applied to probabilities inside the cross-entropy log.
pub const CE_LOG_FLOOR: f64 = 1e-12;

/// Supervision status of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Supervision {
    Labeled(usize),
    ReliablePseudo(usize),
    Unlabeled,
}

impl Supervision {
    /// Class index for labeled and reliably pseudo-labeled samples.
    pub fn class(self) -> Option<usize> {
        match self {
            Supervision::Labeled(c) | Supervision::ReliablePseudo(c) => Some(c),
            Supervision::Unlabeled => None,
        }
    }
}

pub type SupervisionMask = Vec<Supervision>;

/// Which rows form the supervised contrastive pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SclPool {
    /// Both dropout views of every supervised sample (2N rows).
    #[default]
    Views,
    /// Only the first view (N rows).
    Anchors,
}

/// Loss weights; every weight defaults to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub scl: f64,
    pub ilcl: f64,
    pub ce: f64,
    pub clcl: f64,
    pub pcl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            scl: 1.0,
            ilcl: 1.0,
            ce: 1.0,
            clcl: 1.0,
            pcl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            scl: 0.0,
            ilcl: 0.0,
            ce: 0.0,
            clcl: 0.0,
            pcl: 0.0,
        }
    }

    /// Parses `scl=1,ce=0.5,...`; unnamed terms keep their default of 1.
    pub fn parse(text: &str) -> Result<Self> {
        let mut w = Self::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("weight {part:?} is not name=value"))
            })?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("weight {part:?} is not a number")))?;
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "weight {part:?} must be nonnegative"
                )));
            }
            let slot = match name.trim() {
                "scl" => &mut w.scl,
                "ilcl" => &mut w.ilcl,
                "ce" => &mut w.ce,
                "clcl" => &mut w.clcl,
                "pcl" => &mut w.pcl,
                other => return Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
            };
            *slot = value;
        }
        Ok(w)
    }

    pub fn as_terms(&self) -> LossTerms<f64> {
        LossTerms {
            scl: Some(self.scl),
            ilcl: Some(self.ilcl),
            ce: Some(self.ce),
            clcl: Some(self.clcl),
            pcl: Some(self.pcl),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub weights: LossWeights,
    #[serde(default)]
    pub scl_pool: SclPool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            weights: LossWeights::default(),
            scl_pool: SclPool::Views,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)
    }
}

/// One value per loss term, `None` when the term is absent for a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub scl: Option<T>,
    pub ilcl: Option<T>,
    pub ce: Option<T>,
    pub clcl: Option<T>,
    pub pcl: Option<T>,
}

impl<T> Default for LossTerms<T> {
    fn default() -> Self {
        Self {
            scl: None,
            ilcl: None,
            ce: None,
            clcl: None,
            pcl: None,
        }
    }
}

impl<T: Copy> LossTerms<T> {
    /// Terms in accumulation order: SCL, CE, ILCL, CLCL, PCL.
    pub fn ordered(&self, weights: &LossWeights) -> [(Option<T>, f64); 5] {
        [
            (self.scl, weights.scl),
            (self.ce, weights.ce),
            (self.ilcl, weights.ilcl),
            (self.clcl, weights.clcl),
            (self.pcl, weights.pcl),
        ]
    }
}

/// Weighted sum of the present parts; absent parts count as zero.
pub fn total_loss(parts: &LossTerms<f64>, weights: &LossWeights) -> f64 {
    parts
        .ordered(weights)
        .iter()
        .filter_map(|(v, w)| v.map(|v| v * w))
        .sum()
}

/// Records the weighted sum of the present parts. `None` if every part is absent.
pub fn total_on_tape(
    tape: &mut Tape,
    parts: &LossTerms<Var>,
    weights: &LossWeights,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (v, w) in parts.ordered(weights) {
        let Some(v) = v else { continue };
        let term = tape.scale(v, w);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// A loss value with one gradient per matrix argument.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Matrix>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn check_mask(mask: &[Supervision], rows: usize, classes: Option<usize>) -> Result<()> {
    if mask.len() != rows {
        return Err(Error::LengthMismatch {
            left: rows,
            right: mask.len(),
        });
    }
    if let Some(k) = classes {
        if let Some(c) = mask.iter().filter_map(|s| s.class()).find(|&c| c >= k) {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: k,
            });
        }
    }
    Ok(())
}

/// Contrastive term over the rows of `pool` with the given positive sets.
///
/// Returns a constant zero when no anchor has a positive.
fn pooled_contrastive(
    tape: &mut Tape,
    pool: Var,
    positives: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    let n = tape.value(pool).rows();
    debug_assert_eq!(positives.len(), n);
    let anchors = positives.iter().filter(|p| !p.is_empty()).count();
    if anchors == 0 {
        return Ok(tape.leaf(Matrix::scalar(0.0)));
    }
    let sim = tape.matmul_transb(pool, pool)?;
    let logits = tape.scale(sim, 1.0 / tau);

    let mut not_self = vec![true; n * n];
    let mut anchor_w = vec![0.0; n];
    let mut pos_w = Matrix::zeros(n, n);
    for (a, pos) in positives.iter().enumerate() {
        not_self[a * n + a] = false;
        if pos.is_empty() {
            continue;
        }
        anchor_w[a] = 1.0 / anchors as f64;
        let w = 1.0 / (anchors * pos.len()) as f64;
        for &p in pos {
            pos_w[(a, p)] += w;
        }
    }
    let lse = tape.logsumexp_rows(logits, not_self)?;
    let denom = tape.weighted_sum(lse, Matrix::new(n, 1, anchor_w)?)?;
    let numer = tape.weighted_sum(logits, pos_w)?;
    tape.sub(denom, numer)
}

/// Positive sets pairing row `i` with row `i + k` and vice versa.
fn twin_positives(k: usize) -> Vec<Vec<usize>> {
    (0..2 * k).map(|a| vec![(a + k) % (2 * k)]).collect()
}

fn supervised_rows(mask: &[Supervision]) -> (Vec<usize>, Vec<usize>) {
    mask.iter()
        .enumerate()
        .filter_map(|(i, s)| s.class().map(|c| (i, c)))
        .unzip()
}

/// Supervised contrastive loss over labeled and reliably pseudo-labeled rows.
pub fn scl_on_tape(
    tape: &mut Tape,
    f: Var,
    f_aug: Var,
    mask: &[Supervision],
    tau: f64,
    pool: SclPool,
) -> Result<Var> {
    check_tau(tau)?;
    check_same_shape("scl", tape.value(f), tape.value(f_aug))?;
    check_mask(mask, tape.value(f).rows(), None)?;
    let (rows, labels) = supervised_rows(mask);
    if rows.is_empty() {
        return Err(Error::EmptyBatch("scl"));
    }
    let fs = tape.select_rows(f, &rows)?;
    let (pool_var, pool_labels) = match pool {
        SclPool::Anchors => (fs, labels),
        SclPool::Views => {
            let fa = tape.select_rows(f_aug, &rows)?;
            let stacked = tape.concat_rows(fs, fa)?;
            let mut l = labels.clone();
            l.extend(&labels);
            (stacked, l)
        }
    };
    let positives: Vec<Vec<usize>> = pool_labels
        .iter()
        .enumerate()
        .map(|(a, &ya)| {
            pool_labels
                .iter()
                .enumerate()
                .filter(|&(p, &yp)| p != a && yp == ya)
                .map(|(p, _)| p)
                .collect()
        })
        .collect();
    pooled_contrastive(tape, pool_var, &positives, tau)
}

/// Instance-level NT-Xent over unlabeled rows and their augmented twins.
pub fn ilcl_on_tape(
    tape: &mut Tape,
    f: Var,
    f_aug: Var,
    mask: &[Supervision],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    check_same_shape("ilcl", tape.value(f), tape.value(f_aug))?;
    check_mask(mask, tape.value(f).rows(), None)?;
    let rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Supervision::Unlabeled))
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyBatch("ilcl"));
    }
    let a = tape.select_rows(f, &rows)?;
    let b = tape.select_rows(f_aug, &rows)?;
    let pool = tape.concat_rows(a, b)?;
    pooled_contrastive(tape, pool, &twin_positives(rows.len()), tau)
}

/// Cluster-level NT-Xent over the chosen columns of the cluster matrix.
pub fn clcl_on_tape(
    tape: &mut Tape,
    g: Var,
    g_aug: Var,
    columns: &[usize],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    check_same_shape("clcl", tape.value(g), tape.value(g_aug))?;
    if columns.len() < 2 {
        return Err(Error::TooFewClusters {
            loss: "clcl",
            got: columns.len(),
        });
    }
    let view = |tape: &mut Tape, g: Var| -> Result<Var> {
        let sel = tape.select_cols(g, columns)?;
        let unit = tape.normalize_cols(sel).map_err(|e| match e {
            Error::ZeroColumn(j) => Error::ZeroColumn(columns[j]),
            other => other,
        })?;
        Ok(tape.transpose(unit))
    };
    let a = view(tape, g)?;
    let b = view(tape, g_aug)?;
    let pool = tape.concat_rows(a, b)?;
    pooled_contrastive(tape, pool, &twin_positives(columns.len()), tau)
}

/// Mean negative log-probability of each supervised row's class.
pub fn ce_on_tape(tape: &mut Tape, g: Var, mask: &[Supervision]) -> Result<Var> {
    let k = tape.value(g).cols();
    check_mask(mask, tape.value(g).rows(), Some(k))?;
    let (rows, labels) = supervised_rows(mask);
    if rows.is_empty() {
        return Err(Error::EmptyBatch("ce"));
    }
    let gs = tape.select_rows(g, &rows)?;
    let logp = tape.log_clamped(gs, CE_LOG_FLOOR);
    let mut w = Matrix::zeros(rows.len(), k);
    let scale = -1.0 / rows.len() as f64;
    for (i, &c) in labels.iter().enumerate() {
        w[(i, c)] = scale;
    }
    tape.weighted_sum(logp, w)
}

/// Prototype-level NT-Xent over two prototype matrices of equal shape.
pub fn pcl_on_tape(tape: &mut Tape, z: Var, z_aug: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    check_same_shape("pcl", tape.value(z), tape.value(z_aug))?;
    let k = tape.value(z).rows();
    if k < 2 {
        return Err(Error::TooFewClusters {
            loss: "pcl",
            got: k,
        });
    }
    let pool = tape.concat_rows(z, z_aug)?;
    pooled_contrastive(tape, pool, &twin_positives(k), tau)
}

fn run_pair(
    a: &Matrix,
    b: &Matrix,
    build: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<LossOutput> {
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let bv = tape.leaf(b.clone());
    let loss = build(&mut tape, av, bv)?;
    let grads = tape.gradient(loss)?;
    Ok(LossOutput {
        value: tape.value(loss).item(),
        grads: vec![grads.wrt(av), grads.wrt(bv)],
    })
}

pub fn scl_loss(
    f: &Matrix,
    f_aug: &Matrix,
    mask: &[Supervision],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    run_pair(f, f_aug, |t, a, b| {
        scl_on_tape(t, a, b, mask, cfg.tau, cfg.scl_pool)
    })
}

pub fn ilcl_loss(f: &Matrix, f_aug: &Matrix, mask: &[Supervision], tau: f64) -> Result<LossOutput> {
    run_pair(f, f_aug, |t, a, b| ilcl_on_tape(t, a, b, mask, tau))
}

pub fn clcl_loss(g: &Matrix, g_aug: &Matrix, columns: &[usize], tau: f64) -> Result<LossOutput> {
    run_pair(g, g_aug, |t, a, b| clcl_on_tape(t, a, b, columns, tau))
}

pub fn ce_loss(g: &Matrix, mask: &[Supervision]) -> Result<LossOutput> {
    let mut tape = Tape::new();
    let gv = tape.leaf(g.clone());
    let loss = ce_on_tape(&mut tape, gv, mask)?;
    let grads = tape.gradient(loss)?;
    Ok(LossOutput {
        value: tape.value(loss).item(),
        grads: vec![grads.wrt(gv)],
    })
}

/// PCL over the clusters active in both matrices; gradients cover every row.
pub fn pcl_loss(m: &PrototypeMatrix, m_aug: &PrototypeMatrix, tau: f64) -> Result<LossOutput> {
    check_same_shape("pcl", &m.rows, &m_aug.rows)?;
    let active: Vec<usize> = (0..m.k())
        .filter(|&c| !m.stale[c] && !m_aug.stale[c])
        .collect();
    run_pair(&m.rows, &m_aug.rows, |t, a, b| {
        let za = t.select_rows(a, &active)?;
        let zb = t.select_rows(b, &active)?;
        pcl_on_tape(t, za, zb, tau)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Supervision::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    const TWO_ORTHO: f64 = 0.551_444_713_932_051_4; // -ln(e / (e + 2))

    #[test]
    fn two_orthogonal_constant() {
        let e = std::f64::consts::E;
        assert!((-(e / (e + 2.0)).ln() - TWO_ORTHO).abs() < 1e-15);
    }

    #[test]
    fn scl_lone_positive_is_zero() {
        let f = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let cfg = LossConfig {
            tau: 1.0,
            scl_pool: SclPool::Anchors,
            ..Default::default()
        };
        let out = scl_loss(&f, &f, &[Labeled(0), Labeled(0)], &cfg).unwrap();
        assert!(out.value.abs() < 1e-15);
    }

    #[test]
    fn scl_without_positives_is_zero() {
        let f = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = LossConfig {
            scl_pool: SclPool::Anchors,
            ..Default::default()
        };
        let out = scl_loss(&f, &f, &[Labeled(0), Labeled(1)], &cfg).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.grads[0], Matrix::zeros(2, 2));
    }

    #[test]
    fn scl_views_pool_counts_twins() {
        // identical rows: each anchor has 3 positives at ratio 1/3
        let f = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let cfg = LossConfig {
            tau: 1.0,
            ..Default::default()
        };
        let out = scl_loss(&f, &f, &[Labeled(0), Labeled(0)], &cfg).unwrap();
        assert!((out.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scl_empty_batch() {
        let f = m(&[&[1.0, 0.0]]);
        let err = scl_loss(&f, &f, &[Unlabeled], &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyBatch("scl")));
    }

    #[test]
    fn ilcl_examples() {
        let one = m(&[&[0.6, 0.8]]);
        assert!(
            ilcl_loss(&one, &one, &[Unlabeled], 1.0)
                .unwrap()
                .value
                .abs()
                < 1e-15
        );
        let two = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = ilcl_loss(&two, &two, &[Unlabeled, Unlabeled], 1.0)
            .unwrap()
            .value;
        assert!((v - TWO_ORTHO).abs() < 1e-12);
        assert!(matches!(
            ilcl_loss(&two, &two, &[Labeled(0), Labeled(1)], 1.0),
            Err(Error::EmptyBatch("ilcl"))
        ));
    }

    #[test]
    fn clcl_examples() {
        let g = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let v = clcl_loss(&g, &g, &[0, 1], 1.0).unwrap().value;
        assert!((v - TWO_ORTHO).abs() < 1e-12);
        assert!(matches!(
            clcl_loss(&g, &g, &[1], 1.0),
            Err(Error::TooFewClusters { .. })
        ));
        let z = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert!(matches!(
            clcl_loss(&z, &z, &[0, 2], 1.0),
            Err(Error::ZeroColumn(2))
        ));
    }

    #[test]
    fn ce_examples() {
        let onehot = m(&[&[0.0, 1.0]]);
        assert_eq!(ce_loss(&onehot, &[Labeled(1)]).unwrap().value, 0.0);
        let uniform = m(&[&[0.25; 4]]);
        assert!((ce_loss(&uniform, &[ReliablePseudo(2)]).unwrap().value - 4f64.ln()).abs() < 1e-15);
        let g = m(&[&[0.7, 0.3], &[0.2, 0.8], &[0.5, 0.5]]);
        let v = ce_loss(&g, &[Labeled(0), Labeled(1), Labeled(0)])
            .unwrap()
            .value;
        let expected = -(0.7f64.ln() + 0.8f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.4243).abs() < 1e-4);
        assert!(matches!(
            ce_loss(&g, &[Unlabeled; 3]),
            Err(Error::EmptyBatch("ce"))
        ));
        assert!(matches!(
            ce_loss(&onehot, &[Labeled(2)]),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn ce_clamps_exact_zero() {
        let g = m(&[&[1.0, 0.0]]);
        let out = ce_loss(&g, &[Labeled(1)]).unwrap();
        assert!((out.value - 1e12f64.ln()).abs() < 1e-9);
        assert!(out.grads[0].is_finite());
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossTerms {
            scl: Some(0.1),
            ilcl: Some(0.2),
            ce: Some(0.3),
            clcl: Some(0.4),
            pcl: Some(0.5),
        };
        assert!((total_loss(&parts, &LossWeights::default()) - 1.5).abs() < 1e-15);
        assert_eq!(
            total_loss(&LossTerms::default(), &LossWeights::default()),
            0.0
        );
        let w = LossWeights {
            scl: 2.0,
            ..Default::default()
        };
        assert!((total_loss(&parts, &w) - 1.6).abs() < 1e-15);
    }

    #[test]
    fn weights_parse() {
        let w = LossWeights::parse("scl=2, pcl=0").unwrap();
        assert_eq!((w.scl, w.pcl, w.ce), (2.0, 0.0, 1.0));
        assert!(LossWeights::parse("foo=1").is_err());
        assert!(LossWeights::parse("scl=-1").is_err());
        assert!(LossWeights::parse("scl").is_err());
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let f = m(&[&[1.0, 0.0]]);
        assert!(ilcl_loss(&f, &f, &[Unlabeled], 0.0).is_err());
    }
}
