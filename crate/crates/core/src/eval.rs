//! Clustering metrics and cluster-count estimation.
//!
//! Cluster and class ids are arbitrary nonnegative integers. Every metric is
//! computed from the contingency table over the ids that actually occur.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::seed::{self, stream};

/// Predicted cluster and true class per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelingPair {
    predicted: Vec<usize>,
    truth: Vec<usize>,
}

impl LabelingPair {
    pub fn new(predicted: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::LengthMismatch {
                left: predicted.len(),
                right: truth.len(),
            });
        }
        Ok(Self { predicted, truth })
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn n(&self) -> usize {
        self.truth.len()
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::LengthMismatch { left: 0, right: 0 });
        }
        Ok(())
    }

    /// The same pair with the roles of prediction and truth exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            predicted: self.truth.clone(),
            truth: self.predicted.clone(),
        }
    }
}

/// Counts with rows indexed by sorted predicted ids, columns by sorted truth ids.
struct Contingency {
    pred_ids: Vec<usize>,
    truth_ids: Vec<usize>,
    counts: Vec<Vec<usize>>,
}

fn sorted_ids(v: &[usize]) -> BTreeMap<usize, usize> {
    let mut ids: BTreeMap<usize, usize> = v.iter().map(|&x| (x, 0)).collect();
    for (k, slot) in ids.values_mut().enumerate() {
        *slot = k;
    }
    ids
}

impl Contingency {
    fn of(pair: &LabelingPair) -> Self {
        let p = sorted_ids(&pair.predicted);
        let t = sorted_ids(&pair.truth);
        let mut counts = vec![vec![0usize; t.len()]; p.len()];
        for (a, b) in pair.predicted.iter().zip(&pair.truth) {
            counts[p[a]][t[b]] += 1;
        }
        Self {
            pred_ids: p.into_keys().collect(),
            truth_ids: t.into_keys().collect(),
            counts,
        }
    }

    fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<usize> {
        (0..self.truth_ids.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// True when the two labelings induce the same partition.
    fn is_bijective(&self) -> bool {
        let rows_ok = self
            .counts
            .iter()
            .all(|r| r.iter().filter(|&&c| c > 0).count() == 1);
        let cols_ok =
            (0..self.truth_ids.len()).all(|j| self.counts.iter().filter(|r| r[j] > 0).count() == 1);
        rows_ok && cols_ok
    }
}

/// Minimum-cost perfect matching on a square matrix; `result[row] = column`.
///
/// Shortest augmenting paths with row and column potentials, `O(n³)`.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    // 1-based with a virtual column 0, as in the classic formulation.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// Predicted cluster id to true class id.
pub type Mapping = BTreeMap<usize, usize>;

/// Clustering accuracy under the best one-to-one cluster-to-class map.
///
/// ```
/// use plpcl::eval::{hungarian_accuracy, LabelingPair};
///
/// let pair = LabelingPair::new(vec![1, 1, 0, 0], vec![0, 0, 1, 1]).unwrap();
/// let (acc, mapping) = hungarian_accuracy(&pair).unwrap();
/// assert_eq!(acc, 1.0);
/// assert_eq!(mapping[&1], 0);
/// ```
pub fn hungarian_accuracy(pair: &LabelingPair) -> Result<(f64, Mapping)> {
    pair.require_nonempty()?;
    let table = Contingency::of(pair);
    let size = table.pred_ids.len().max(table.truth_ids.len());
    let cost: Vec<Vec<i64>> = (0..size)
        .map(|i| {
            (0..size)
                .map(|j| match table.counts.get(i).and_then(|r| r.get(j)) {
                    Some(&c) => -(c as i64),
                    None => 0,
                })
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&cost);
    let mut matched = 0;
    let mut mapping = Mapping::new();
    for (i, &j) in assignment.iter().enumerate() {
        if i < table.pred_ids.len() && j < table.truth_ids.len() {
            matched += table.counts[i][j];
            mapping.insert(table.pred_ids[i], table.truth_ids[j]);
        }
    }
    Ok((matched as f64 / pair.n() as f64, mapping))
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(pair: &LabelingPair) -> Result<f64> {
    if pair.n() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: pair.n(),
        });
    }
    let table = Contingency::of(pair);
    let index: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let a: f64 = table.row_sums().into_iter().map(comb2).sum();
    let b: f64 = table.col_sums().into_iter().map(comb2).sum();
    let expected = a * b / comb2(pair.n());
    let max = (a + b) / 2.0;
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(if table.is_bijective() { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// How mutual information is normalized by the two entropies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNorm {
    /// `sqrt(H(pred) · H(truth))`.
    #[default]
    Geometric,
    /// `(H(pred) + H(truth)) / 2`.
    Arithmetic,
}

fn entropy(sizes: &[usize], n: f64) -> f64 {
    sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with the geometric-mean normalization.
pub fn nmi(pair: &LabelingPair) -> Result<f64> {
    nmi_with(pair, NmiNorm::Geometric)
}

pub fn nmi_with(pair: &LabelingPair, norm: NmiNorm) -> Result<f64> {
    pair.require_nonempty()?;
    let table = Contingency::of(pair);
    let n = pair.n() as f64;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let hp = entropy(&rows, n);
    let ht = entropy(&cols, n);
    if hp == 0.0 || ht == 0.0 {
        return Ok(if table.is_bijective() { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    let denom = match norm {
        NmiNorm::Geometric => (hp * ht).sqrt(),
        NmiNorm::Arithmetic => (hp + ht) / 2.0,
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Counts per true class (rows) and predicted cluster (columns).
///
/// Columns list the clusters mapped to a class in class order, then the
/// unmapped clusters in id order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub truth_ids: Vec<usize>,
    pub cluster_ids: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionTable {
    /// CSV with a header of cluster ids; the first column holds the true
    /// class, named by `class_names[id]` when given.
    pub fn to_csv(&self, class_names: Option<&[String]>) -> String {
        let mut out = String::from("truth");
        for c in &self.cluster_ids {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (t, row) in self.truth_ids.iter().zip(&self.counts) {
            match class_names.and_then(|names| names.get(*t)) {
                Some(name) => out.push_str(name),
                None => write!(out, "{t}").unwrap(),
            }
            for c in row {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_table(pair: &LabelingPair, mapping: &Mapping) -> Result<ConfusionTable> {
    pair.require_nonempty()?;
    let table = Contingency::of(pair);
    let by_truth: BTreeMap<usize, usize> = mapping.iter().map(|(&p, &t)| (t, p)).collect();
    let mut cluster_ids: Vec<usize> = table
        .truth_ids
        .iter()
        .filter_map(|t| by_truth.get(t).copied())
        .filter(|p| table.pred_ids.contains(p))
        .collect();
    for p in &table.pred_ids {
        if !cluster_ids.contains(p) {
            cluster_ids.push(*p);
        }
    }
    let counts = table
        .truth_ids
        .iter()
        .enumerate()
        .map(|(j, _)| {
            cluster_ids
                .iter()
                .map(|p| {
                    let i = table.pred_ids.binary_search(p).expect("present");
                    table.counts[i][j]
                })
                .collect()
        })
        .collect();
    Ok(ConfusionTable {
        truth_ids: table.truth_ids,
        cluster_ids,
        counts,
    })
}

/// Accuracy, ARI and NMI of one labeling, plus the aligned confusion table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
    pub k_pred: Option<usize>,
    #[serde(skip)]
    pub confusion: Option<ConfusionTable>,
}

pub fn evaluate(pair: &LabelingPair, norm: NmiNorm) -> Result<MetricsReport> {
    let (acc, mapping) = hungarian_accuracy(pair)?;
    Ok(MetricsReport {
        acc,
        ari: ari(pair)?,
        nmi: nmi_with(pair, norm)?,
        k_pred: None,
        confusion: Some(confusion_table(pair, &mapping)?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

impl KMeansResult {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.rows()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center and its squared distance; ties go to the lower index.
fn nearest(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(x, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_centers(x: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i), x.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen).expect("indices in range")
}

fn lloyd(x: &Matrix, mut centers: Matrix, max_iter: usize) -> KMeansResult {
    let (n, d) = x.shape();
    let k = centers.rows();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, a) in assignment.iter_mut().enumerate() {
            let (c, _) = nearest(x.row(i), &centers);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut sizes = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            sizes[a] += 1;
            sums.row_mut(a)
                .iter_mut()
                .zip(x.row(i))
                .for_each(|(s, v)| *s += v);
        }
        for (c, &size) in sizes.iter().enumerate() {
            if size > 0 {
                let inv = 1.0 / size as f64;
                centers
                    .row_mut(c)
                    .iter_mut()
                    .zip(sums.row(c))
                    .for_each(|(m, s)| *m = s * inv);
            }
        }
    }
    let mut inertia = 0.0;
    for (i, a) in assignment.iter_mut().enumerate() {
        let (c, dist) = nearest(x.row(i), &centers);
        *a = c;
        inertia += dist;
    }
    KMeansResult {
        centers,
        assignment,
        inertia,
    }
}

/// k-means++ seeding and Lloyd iterations, best of several restarts.
///
/// Restarts run in parallel; the lowest inertia wins, ties going to the
/// earliest restart.
pub fn kmeans(x: &Matrix, k: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 || cfg.restarts == 0 {
        return Err(Error::InvalidConfig(
            "k-means needs k ≥ 1 and at least one restart".into(),
        ));
    }
    if x.rows() < k {
        return Err(Error::TooFewSamples {
            need: k,
            got: x.rows(),
        });
    }
    let runs: Vec<KMeansResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng_at(cfg.seed, &[stream::KMEANS, r as u64]);
            lloyd(x, seed_centers(x, k, &mut rng), cfg.max_iter)
        })
        .collect();
    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.inertia < runs[best].inertia {
            best = r;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

/// Default share of the mean cluster size a cluster must reach to count.
pub const DEFAULT_RHO: f64 = 0.9;

/// Over-clusters into `k_cap` groups and counts those holding at least
/// `rho · n / k_cap` samples.
pub fn estimate_k(f: &Matrix, k_cap: usize, rho: f64, seed: u64) -> Result<usize> {
    if k_cap < 2 {
        return Err(Error::InvalidConfig(format!(
            "k_cap must be at least 2, got {k_cap}"
        )));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "rho must lie in (0, 1), got {rho}"
        )));
    }
    if f.rows() < k_cap {
        return Err(Error::TooFewSamples {
            need: k_cap,
            got: f.rows(),
        });
    }
    let run = kmeans(
        f,
        k_cap,
        &KMeansConfig {
            seed,
            ..KMeansConfig::default()
        },
    )?;
    let threshold = rho * f.rows() as f64 / k_cap as f64;
    let k = run
        .sizes()
        .into_iter()
        .filter(|&s| s as f64 >= threshold)
        .count();
    Ok(k.max(1))
}
