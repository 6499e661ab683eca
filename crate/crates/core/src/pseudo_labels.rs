//! Confidence-thresholded pseudo-labels for unlabeled samples.
//!
//! A sample's pseudo-label is the argmax of its cluster distribution. It is
//! reliable only when that probability is strictly greater than `sigma`, so
//! `sigma = 1` never trusts a pseudo-label and `sigma = 0` trusts all of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Supervision, SupervisionMask};
use crate::math::{argmax, Matrix};

/// Default confidence threshold.
pub const DEFAULT_SIGMA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Row of the sample in the matrix it was selected from.
    pub index: usize,
    pub class: usize,
    pub confidence: f64,
    pub reliable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub sigma: f64,
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn reliable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.reliable).count()
    }

    pub fn reliable_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().filter(|e| e.reliable).map(|e| e.index)
    }
}

pub fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidConfig(format!(
            "sigma must lie in [0, 1], got {sigma}"
        )));
    }
    Ok(())
}

/// Pseudo-labels for the given rows of `g`.
pub fn select(g: &Matrix, unlabeled: &[usize], sigma: f64) -> Result<PseudoLabelSet> {
    check_sigma(sigma)?;
    let entries = unlabeled
        .iter()
        .map(|&index| {
            if index >= g.rows() {
                return Err(Error::IndexOutOfRange {
                    index,
                    len: g.rows(),
                });
            }
            let row = g.row(index);
            let class = argmax(row)
                .ok_or_else(|| Error::InvalidDims("cluster matrix has no columns".into()))?;
            let confidence = row[class];
            Ok(PseudoLabel {
                index,
                class,
                confidence,
                reliable: confidence > sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelSet { sigma, entries })
}

/// Combines ground truth with reliable pseudo-labels.
///
/// `truth[i]` holds the ground-truth class of sample `i`, if any. Pseudo
/// entries index into the same sample order.
pub fn refresh_mask(truth: &[Option<usize>], pseudo: &PseudoLabelSet) -> Result<SupervisionMask> {
    let mut mask: SupervisionMask = truth
        .iter()
        .map(|t| match t {
            Some(c) => Supervision::Labeled(*c),
            None => Supervision::Unlabeled,
        })
        .collect();
    for e in &pseudo.entries {
        let slot = mask.get_mut(e.index).ok_or(Error::IndexOutOfRange {
            index: e.index,
            len: truth.len(),
        })?;
        match slot {
            Supervision::Labeled(_) => return Err(Error::ConflictingSupervision(e.index)),
            _ if e.reliable => *slot = Supervision::ReliablePseudo(e.class),
            _ => {}
        }
    }
    Ok(mask)
}

/// Reliable pseudo-label count per epoch.
pub fn reliability_stats(history: &[PseudoLabelSet]) -> Vec<usize> {
    history.iter().map(PseudoLabelSet::reliable_count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn threshold_endpoints() {
        let g = m(&[&[0.5, 0.5], &[1.0, 0.0], &[0.2, 0.8]]);
        let all = [0, 1, 2];
        assert_eq!(select(&g, &all, 1.0).unwrap().reliable_count(), 0);
        assert_eq!(select(&g, &all, 0.0).unwrap().reliable_count(), 3);
    }

    #[test]
    fn confident_row_is_reliable() {
        let g = m(&[&[0.995, 0.005]]);
        let s = select(&g, &[0], 0.99).unwrap();
        assert_eq!(
            s.entries[0],
            PseudoLabel {
                index: 0,
                class: 0,
                confidence: 0.995,
                reliable: true
            }
        );
    }

    #[test]
    fn strict_inequality_and_ties() {
        let g = m(&[&[0.5, 0.5]]);
        let s = select(&g, &[0], 0.5).unwrap();
        assert_eq!(s.entries[0].class, 0);
        assert!(!s.entries[0].reliable);
    }

    #[test]
    fn select_errors() {
        let g = m(&[&[0.5, 0.5]]);
        assert!(matches!(
            select(&g, &[1], 0.5),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(select(&g, &[0], 1.5).is_err());
    }

    #[test]
    fn mask_mixes_truth_and_pseudo() {
        let g = m(&[&[0.5, 0.5], &[0.5, 0.5], &[0.0, 1.0], &[0.6, 0.4]]);
        let pseudo = select(&g, &[2, 3], 0.9).unwrap();
        let mask = refresh_mask(&[Some(0), Some(1), None, None], &pseudo).unwrap();
        use Supervision::*;
        assert_eq!(
            mask,
            vec![Labeled(0), Labeled(1), ReliablePseudo(1), Unlabeled]
        );

        let empty = PseudoLabelSet {
            sigma: 0.9,
            entries: vec![],
        };
        let mask = refresh_mask(&[Some(0), None], &empty).unwrap();
        assert_eq!(mask, vec![Labeled(0), Unlabeled]);

        let everyone = select(&g, &[0, 1, 2, 3], 0.0).unwrap();
        let mask = refresh_mask(&[None; 4], &everyone).unwrap();
        assert!(!mask.contains(&Unlabeled));
    }

    #[test]
    fn conflicting_supervision() {
        let g = m(&[&[0.0, 1.0]]);
        let pseudo = select(&g, &[0], 0.5).unwrap();
        assert!(matches!(
            refresh_mask(&[Some(0)], &pseudo),
            Err(Error::ConflictingSupervision(0))
        ));
    }

    #[test]
    fn stats() {
        assert!(reliability_stats(&[]).is_empty());
        let g = m(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let s = select(&g, &[0, 1], 0.9).unwrap();
        assert_eq!(reliability_stats(&[s.clone(), s]), vec![1, 1]);
    }
}
