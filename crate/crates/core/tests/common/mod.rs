//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written with plain loops over `Vec<Vec<f64>>` and
//! avoids the library's matrix kernels, so agreement is meaningful.

#![allow(dead_code)]

use plpcl::losses::Supervision;
use plpcl::math::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    plpcl::seed::rng(seed)
}

pub fn rows(m: &Matrix) -> Rows {
    m.to_rows()
}

pub fn matrix(r: &Rows) -> Matrix {
    Matrix::from_rows(r).unwrap()
}

pub fn random_rows(rng: &mut impl Rng, n: usize, d: usize) -> Rows {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Rows {
    random_rows(rng, n, d)
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn prob_rows(rng: &mut impl Rng, n: usize, k: usize) -> Rows {
    (0..n)
        .map(|_| {
            let e: Vec<f64> = (0..k).map(|_| (3.0 * rng.random::<f64>()).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn random_mask(rng: &mut impl Rng, n: usize, k: usize) -> Vec<Supervision> {
    (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => Supervision::Labeled(rng.random_range(0..k)),
            1 => Supervision::ReliablePseudo(rng.random_range(0..k)),
            _ => Supervision::Unlabeled,
        })
        .collect()
}

pub fn naive_matmul(a: &Rows, b: &Rows) -> Rows {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..m {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `−1/|P(a)| Σ_p log(exp(s_ap/τ) / Σ_{k≠a} exp(s_ak/τ))`, averaged over
/// anchors with at least one positive.
fn contrastive(pool: &Rows, positive: impl Fn(usize, usize) -> bool, tau: f64) -> f64 {
    let n = pool.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            if k != a {
                denom += (dotv(&pool[a], &pool[k]) / tau).exp();
            }
        }
        let mut term = 0.0;
        let mut count = 0;
        for p in 0..n {
            if p != a && positive(a, p) {
                term += -((dotv(&pool[a], &pool[p]) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += term / count as f64;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Supervised contrastive loss; `views` selects the 2N pool.
pub fn scl_oracle(f: &Rows, f_aug: &Rows, mask: &[Supervision], tau: f64, views: bool) -> f64 {
    let mut pool = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in mask.iter().enumerate() {
        if let Some(c) = s.class() {
            pool.push(f[i].clone());
            labels.push(c);
        }
    }
    if views {
        for (i, s) in mask.iter().enumerate() {
            if let Some(c) = s.class() {
                pool.push(f_aug[i].clone());
                labels.push(c);
            }
        }
    }
    contrastive(&pool, |a, p| labels[a] == labels[p], tau)
}

fn twin_pool(a: &Rows, b: &Rows) -> Rows {
    a.iter().chain(b).cloned().collect()
}

pub fn ilcl_oracle(f: &Rows, f_aug: &Rows, mask: &[Supervision], tau: f64) -> f64 {
    let keep: Vec<usize> = (0..mask.len())
        .filter(|&i| mask[i] == Supervision::Unlabeled)
        .collect();
    let a: Rows = keep.iter().map(|&i| f[i].clone()).collect();
    let b: Rows = keep.iter().map(|&i| f_aug[i].clone()).collect();
    let n = keep.len();
    contrastive(&twin_pool(&a, &b), |x, y| (x + n) % (2 * n) == y, tau)
}

fn unit_columns(g: &Rows, columns: &[usize]) -> Rows {
    columns
        .iter()
        .map(|&c| {
            let col: Vec<f64> = g.iter().map(|r| r[c]).collect();
            let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            col.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn clcl_oracle(g: &Rows, g_aug: &Rows, columns: &[usize], tau: f64) -> f64 {
    let a = unit_columns(g, columns);
    let b = unit_columns(g_aug, columns);
    let k = columns.len();
    contrastive(&twin_pool(&a, &b), |x, y| (x + k) % (2 * k) == y, tau)
}

pub fn ce_oracle(g: &Rows, mask: &[Supervision]) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (i, m) in mask.iter().enumerate() {
        if let Some(c) = m.class() {
            s -= g[i][c].max(1e-12).ln();
            n += 1;
        }
    }
    s / n as f64
}

pub fn pcl_oracle(z: &Rows, z_aug: &Rows, tau: f64) -> f64 {
    let k = z.len();
    contrastive(&twin_pool(z, z_aug), |x, y| (x + k) % (2 * k) == y, tau)
}

/// Hand-summed prototypes: one-hot contribution for supervised rows,
/// probability-weighted contribution otherwise, then row normalization.
/// Returns the rows and a stale flag per cluster.
pub fn prototype_oracle(g: &Rows, f: &Rows, mask: &[Supervision]) -> (Rows, Vec<bool>) {
    let k = g[0].len();
    let m = f[0].len();
    let mut sums = vec![vec![0.0; m]; k];
    for i in 0..f.len() {
        match mask[i].class() {
            Some(c) => {
                for j in 0..m {
                    sums[c][j] += f[i][j];
                }
            }
            None => {
                for c in 0..k {
                    for j in 0..m {
                        sums[c][j] += g[i][c] * f[i][j];
                    }
                }
            }
        }
    }
    let mut stale = vec![false; k];
    for c in 0..k {
        let n = sums[c].iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= 1e-12 {
            stale[c] = true;
            sums[c] = vec![0.0; m];
        } else {
            for x in &mut sums[c] {
                *x /= n;
            }
        }
    }
    (sums, stale)
}

/// Central differences of `loss` at `x` with step `h`.
pub fn numeric_gradient(x: &Rows, h: f64, loss: impl Fn(&Rows) -> f64) -> Rows {
    let mut out = vec![vec![0.0; x[0].len()]; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        for j in 0..x[0].len() {
            let orig = probe[i][j];
            probe[i][j] = orig + h;
            let up = loss(&probe);
            probe[i][j] = orig - h;
            let down = loss(&probe);
            probe[i][j] = orig;
            out[i][j] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// Largest discrepancy between gradients: relative error where the
/// analytic value is at least `1e-6` in magnitude, absolute error elsewhere.
pub fn gradient_error(analytic: &Rows, numeric: &Rows) -> f64 {
    let mut worst: f64 = 0.0;
    for (ra, rn) in analytic.iter().zip(numeric) {
        for (&a, &n) in ra.iter().zip(rn) {
            let err = if a.abs() < 1e-6 {
                (a - n).abs()
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            };
            worst = worst.max(err);
        }
    }
    worst
}

/// Best accuracy over every one-to-one map from predicted clusters to
/// classes, by exhaustive search.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let mut p_ids: Vec<usize> = pred.to_vec();
    p_ids.sort();
    p_ids.dedup();
    let mut t_ids: Vec<usize> = truth.to_vec();
    t_ids.sort();
    t_ids.dedup();
    let size = p_ids.len().max(t_ids.len());
    let mut count = vec![vec![0usize; size]; size];
    for (p, t) in pred.iter().zip(truth) {
        let i = p_ids.iter().position(|x| x == p).unwrap();
        let j = t_ids.iter().position(|x| x == t).unwrap();
        count[i][j] += 1;
    }
    let mut perm: Vec<usize> = (0..size).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let s: usize = (0..size).map(|i| count[i][p[i]]).sum();
        best = best.max(s);
    });
    best as f64 / pred.len() as f64
}

fn permute(v: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

/// Adjusted Rand index from the four pair counts.
pub fn pair_counting_ari(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut ss, mut sd, mut ds, mut dd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let denom = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if denom == 0.0 {
        // all pairs agree in kind, so the partitions coincide iff no pair disagrees
        return if sd == 0.0 && ds == 0.0 { 1.0 } else { 0.0 };
    }
    2.0 * (ss * dd - sd * ds) / denom
}

fn entropy_of(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut counts = std::collections::HashMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI through `I = H(P) + H(T) − H(P, T)`, geometric normalization.
pub fn entropy_nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let hp = entropy_of(pred);
    let ht = entropy_of(truth);
    let joint: Vec<usize> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p * 1_000_003 + t)
        .collect();
    let hj = entropy_of(&joint);
    if hp == 0.0 || ht == 0.0 {
        return if (hp - ht).abs() < 1e-15 && (hj - hp).abs() < 1e-15 {
            1.0
        } else {
            0.0
        };
    }
    ((hp + ht - hj) / (hp * ht).sqrt()).clamp(0.0, 1.0)
}

pub fn random_labeling(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}
