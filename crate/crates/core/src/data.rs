//! Embedding datasets: JSON-lines I/O, task-setting splits and a synthetic
//! Gaussian mixture generator.
//!
//! One record per line:
//!
//! ```text
//! {"id":"a1","embedding":[0.1,0.2],"label":"balance","split":"train"}
//! ```
//!
//! `label` may be `null`. Numbers are written in shortest round-trip form, so
//! saving and reloading a dataset reproduces it bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::model::ClassLayout;
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Task setting.
///
/// `Ood`: every known-class training sample is labeled and evaluation covers
/// novel classes only. `Open`: known classes are partially labeled and
/// evaluation covers every test sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Ood,
    #[default]
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub embedding: Vec<f64>,
    pub label: Option<String>,
    pub split: Split,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    embedding: Vec<f64>,
    label: Option<String>,
    split: String,
}

/// Records sharing one embedding width, plus the known/novel class partition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingDataset {
    records: Vec<Record>,
    classes: ClassLayout,
}

/// Known classes are those labeled somewhere in the training split. Classes
/// labeled only in dev or test records are novel.
fn infer_layout(records: &[Record]) -> ClassLayout {
    let mut known = BTreeSet::new();
    let mut all = BTreeSet::new();
    for r in records {
        if let Some(l) = &r.label {
            all.insert(l.clone());
            if r.split == Split::Train {
                known.insert(l.clone());
            }
        }
    }
    let unknown = all.difference(&known).cloned().collect();
    ClassLayout {
        known: known.into_iter().collect(),
        unknown,
    }
}

impl EmbeddingDataset {
    /// Validates a common embedding width. Errors report 1-based positions.
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut dim = None;
        for (i, r) in records.iter().enumerate() {
            check_dim(&mut dim, r.embedding.len(), i + 1)?;
        }
        let classes = infer_layout(&records);
        Ok(Self { records, classes })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn classes(&self) -> &ClassLayout {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Embedding width, undefined for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.embedding.len())
    }

    /// Every class name, sorted.
    pub fn class_names(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .classes
            .known
            .iter()
            .chain(&self.classes.unknown)
            .cloned()
            .collect();
        all.sort();
        all
    }

    /// Positions of the records in `split`, in file order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Embeddings of the given records as matrix rows.
    pub fn matrix(&self, indices: &[usize]) -> Result<Matrix> {
        let d = self.dim().unwrap_or(0);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            let r = self.records.get(i).ok_or(Error::IndexOutOfRange {
                index: i,
                len: self.records.len(),
            })?;
            data.extend_from_slice(&r.embedding);
        }
        Matrix::new(indices.len(), d, data)
    }

    /// Head column of every labeled record under `layout`, `None` for
    /// unlabeled ones.
    pub fn columns(&self, indices: &[usize], layout: &ClassLayout) -> Result<Vec<Option<usize>>> {
        indices
            .iter()
            .map(|&i| match &self.records[i].label {
                None => Ok(None),
                Some(l) => layout_column(layout, l).map(Some),
            })
            .collect()
    }
}

/// Column of any class under `layout`: known classes first, then novel ones.
pub fn layout_column(layout: &ClassLayout, label: &str) -> Result<usize> {
    layout
        .known
        .iter()
        .chain(&layout.unknown)
        .position(|c| c == label)
        .ok_or_else(|| {
            Error::ClassCountMismatch(format!("class {label:?} is not in the class layout"))
        })
}

fn check_dim(dim: &mut Option<usize>, got: usize, line: usize) -> Result<()> {
    if got == 0 {
        return Err(Error::ParseError {
            line,
            message: "embedding is empty".into(),
        });
    }
    match *dim {
        None => *dim = Some(got),
        Some(expected) if expected != got => {
            return Err(Error::DimMismatch {
                line,
                expected,
                got,
            });
        }
        _ => {}
    }
    Ok(())
}

/// Parses JSON-lines text. Blank lines are skipped.
pub fn parse_dataset(reader: impl BufRead) -> Result<EmbeddingDataset> {
    let mut records = Vec::new();
    let mut dim = None;
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|e| Error::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        let split = Split::parse(&raw.split).ok_or(Error::UnknownSplit {
            line: line_no,
            split: raw.split.clone(),
        })?;
        check_dim(&mut dim, raw.embedding.len(), line_no)?;
        records.push(Record {
            id: raw.id,
            embedding: raw.embedding,
            label: raw.label,
            split,
        });
    }
    let classes = infer_layout(&records);
    Ok(EmbeddingDataset { records, classes })
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

/// Serializes to JSON-lines, one record per line.
pub fn write_dataset(data: &EmbeddingDataset, mut out: impl Write) -> std::io::Result<()> {
    for r in &data.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_dataset(data: &EmbeddingDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(data, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// How to turn a fully labeled dataset into a discovery task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of classes treated as novel.
    pub ood_class_ratio: f64,
    /// Fraction of each known class's training records kept labeled
    /// (open setting only).
    pub labeled_ratio: f64,
    pub setting: Setting,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ood_class_ratio: 0.3,
            labeled_ratio: 1.0,
            setting: Setting::Open,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ood_class_ratio", self.ood_class_ratio),
            ("labeled_ratio", self.labeled_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Number of novel classes among `n` classes.
    pub fn unknown_count(&self, n: usize) -> usize {
        ((self.ood_class_ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
    }
}

/// Chooses novel classes and strips the labels the task forbids.
pub fn apply_split(data: &EmbeddingDataset, spec: &SplitSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let names = data.class_names();
    if names.is_empty() {
        return Err(Error::NoClasses("dataset has no labeled records".into()));
    }
    let n_unknown = spec.unknown_count(names.len());
    if spec.setting == Setting::Ood && n_unknown == 0 {
        return Err(Error::NoClasses(
            "the OOD setting needs at least one unknown class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.shuffle(&mut seed::rng_at(spec.seed, &[stream::SPLIT]));
    let unknown_set: BTreeSet<usize> = order[..n_unknown].iter().copied().collect();
    let (mut known, mut unknown) = (Vec::new(), Vec::new());
    for (c, name) in names.iter().enumerate() {
        if unknown_set.contains(&c) {
            unknown.push(name.clone());
        } else {
            known.push(name.clone());
        }
    }

    let mut records = data.records.clone();
    let labeled_ratio = match spec.setting {
        Setting::Ood => 1.0,
        Setting::Open => spec.labeled_ratio,
    };
    let mut per_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in data.records.iter().enumerate() {
        if r.split != Split::Train {
            continue;
        }
        if let Some(l) = &r.label {
            per_class.entry(l.as_str()).or_default().push(i);
        }
    }
    for (name, mut members) in per_class {
        let c = names
            .binary_search_by(|n| n.as_str().cmp(name))
            .expect("class listed");
        let keep = if unknown_set.contains(&c) {
            0
        } else {
            (labeled_ratio * members.len() as f64).round() as usize
        };
        members.shuffle(&mut seed::rng_at(spec.seed, &[stream::SPLIT, 1 + c as u64]));
        for &i in &members[keep.min(members.len())..] {
            records[i].label = None;
        }
    }
    Ok(EmbeddingDataset {
        records,
        classes: ClassLayout { known, unknown },
    })
}

/// Parameters of the synthetic Gaussian mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Minimum distance between class means, in units of `noise`.
    pub separation: f64,
    /// Standard deviation of the isotropic noise.
    pub noise: f64,
    pub seed: u64,
}

fn class_means(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let (k, d) = (spec.classes, spec.dim);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    while means.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if k <= d {
            for m in &means {
                let p = math::dot(&v, m);
                v.iter_mut().zip(m).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = math::norm(&v);
        if n > 1e-8 {
            means.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut min_dist = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d2: f64 = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    if min_dist <= 1e-12 {
        return Err(Error::InvalidParams("class means coincide".into()));
    }
    let scale = spec.separation * spec.noise / min_dist;
    for m in &mut means {
        m.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(means)
}

/// Samples a labeled Gaussian mixture with an 80/10/10 split per class.
///
/// Class means sit on a random orthonormal frame when there are no more
/// classes than dimensions, and on random unit directions otherwise. They are
/// scaled so the closest pair lies exactly `separation · noise` apart.
///
/// ```
/// use plpcl::data::{synth_mixture, SynthSpec};
///
/// let spec = SynthSpec { classes: 3, dim: 4, per_class: 10, separation: 6.0, noise: 1.0, seed: 7 };
/// let data = synth_mixture(&spec).unwrap();
/// assert_eq!(data.len(), 30);
/// assert_eq!(data.dim(), Some(4));
/// assert_eq!(data.classes().known, ["class_00", "class_01", "class_02"]);
/// ```
pub fn synth_mixture(spec: &SynthSpec) -> Result<EmbeddingDataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidParams(format!(
            "need at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.dim < 2 {
        return Err(Error::InvalidParams(format!(
            "need at least 2 dimensions, got {}",
            spec.dim
        )));
    }
    if spec.per_class == 0 {
        return Err(Error::InvalidParams("per_class must be at least 1".into()));
    }
    if !(spec.separation > 0.0 && spec.separation.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "separation must be positive, got {}",
            spec.separation
        )));
    }
    if !(spec.noise > 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "noise must be positive, got {}",
            spec.noise
        )));
    }
    let mut rng = seed::rng_at(spec.seed, &[stream::SYNTH]);
    let means = class_means(spec, &mut rng)?;
    let width = (spec.classes - 1).to_string().len().max(2);
    let n_train = (0.8 * spec.per_class as f64).round() as usize;
    let n_dev = (0.1 * spec.per_class as f64).round() as usize;
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, mean) in means.iter().enumerate() {
        let label = format!("class_{c:0width$}");
        for i in 0..spec.per_class {
            let embedding = mean
                .iter()
                .map(|&m| m + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            records.push(Record {
                id: format!("{label}_{i:05}"),
                embedding,
                label: Some(label.clone()),
                split,
            });
        }
    }
    EmbeddingDataset::from_records(records)
}
