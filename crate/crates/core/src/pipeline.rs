//! Two-stage training.
//!
//! Stage 1 fits the network to the labeled known-class samples with the
//! supervised contrastive and cross-entropy losses. Stage 2 repeats, once
//! per epoch: refresh pseudo-labels for the unlabeled samples, then take
//! Adam steps on shuffled mixed batches under the combined objective.
//!
//! Every random draw is derived from the configured seed and the position in
//! the schedule, so a run is a pure function of data, config and seed, and a
//! stopped run resumes exactly from a saved [`TrainState`].

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use rand::seq::SliceRandom;

use crate::data::{EmbeddingDataset, Split};
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, LossWeights, SclPool, Supervision};
use crate::math::{argmax, Matrix, Tape};
use crate::model::{self, Checkpoint, ClassLayout, ModelDims, ModelParams};
use crate::pseudo_labels::{self, PseudoLabelSet};
use crate::seed::{self, stream};
use crate::{prototypes, DEFAULT_SIGMA};

pub use crate::data::Setting;

/// Which head columns a pseudo-label may point at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoColumns {
    /// Every column of the cluster head.
    #[default]
    All,
    /// Novel-class columns in the OOD setting, every column in the open setting.
    Setting,
}

/// Which batch rows enter the cluster-level loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClclRows {
    /// Every row of the batch.
    All,
    /// Rows without a ground-truth label.
    #[default]
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub setting: Setting,
    /// Pseudo-label confidence threshold.
    pub sigma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub weights: LossWeights,
    pub scl_pool: SclPool,
    pub pseudo_columns: PseudoColumns,
    pub clcl_rows: ClclRows,
    pub pretrain_lr: f64,
    pub train_lr: f64,
    pub epochs_pretrain: usize,
    pub epochs_train: usize,
    pub batch_size: usize,
    pub dropout_p: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub k_ind: usize,
    pub k_ood: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub head_hidden: Vec<usize>,
}

impl TrainConfig {
    /// Defaults for a head with `k_ind` known and `k_ood` novel classes.
    pub fn new(setting: Setting, k_ind: usize, k_ood: usize) -> Self {
        Self {
            setting,
            sigma: DEFAULT_SIGMA,
            tau: losses::DEFAULT_TAU,
            weights: LossWeights::default(),
            scl_pool: SclPool::default(),
            pseudo_columns: PseudoColumns::default(),
            clcl_rows: ClclRows::default(),
            pretrain_lr: 5e-5,
            train_lr: 3e-4,
            epochs_pretrain: 100,
            epochs_train: 100,
            batch_size: 128,
            dropout_p: model::DEFAULT_DROPOUT,
            grad_clip: Some(5.0),
            seed: 0,
            k_ind,
            k_ood,
            hidden: 256,
            feature_dim: model::DEFAULT_FEATURE_DIM,
            head_hidden: Vec::new(),
        }
    }

    /// Defaults sized to the dataset's class layout.
    pub fn for_layout(setting: Setting, layout: &ClassLayout) -> Self {
        Self::new(setting, layout.k_ind(), layout.k_ood())
    }

    pub fn k_total(&self) -> usize {
        self.k_ind + self.k_ood
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.pretrain_lr > 0.0 && self.train_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.k_ind < 1 || self.k_ood < 1 {
            return bad(format!(
                "need at least one known and one novel class, got {} and {}",
                self.k_ind, self.k_ood
            ));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        pseudo_labels::check_sigma(self.sigma)?;
        losses::LossConfig {
            tau: self.tau,
            weights: self.weights,
            scl_pool: self.scl_pool,
        }
        .validate()?;
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidDropout(self.dropout_p));
        }
        Ok(())
    }

    pub fn dims(&self, input: usize) -> ModelDims {
        ModelDims {
            head_hidden: self.head_hidden.clone(),
            ..ModelDims::new(input, self.hidden, self.feature_dim, self.k_total())
        }
    }

    /// Columns entering the cluster-level loss.
    pub fn clcl_columns(&self) -> Vec<usize> {
        match self.setting {
            Setting::Ood => (self.k_ind..self.k_total()).collect(),
            Setting::Open => (0..self.k_total()).collect(),
        }
    }

    fn check_layout(&self, layout: &ClassLayout) -> Result<()> {
        if layout.k_ind() != self.k_ind || layout.k_ood() != self.k_ood {
            return Err(Error::ClassCountMismatch(format!(
                "config expects {} known and {} novel classes, data has {} and {}",
                self.k_ind,
                self.k_ood,
                layout.k_ind(),
                layout.k_ood()
            )));
        }
        Ok(())
    }
}

/// Mean loss values of one epoch. Terms absent from every batch read 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_scl: f64,
    pub loss_ce: f64,
    pub loss_ilcl: f64,
    pub loss_clcl: f64,
    pub loss_pcl: f64,
    pub n_reliable: usize,
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// One update; `grads` follows [`ModelParams::tensors_mut`] order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((w, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `cap`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], cap: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > cap {
        let s = cap / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Everything needed to continue a stage-2 run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Reliable pseudo-label count after each refresh.
    pub reliable_history: Vec<usize>,
    /// Pseudo-labels from the latest refresh.
    pub last_pseudo: Option<PseudoLabelSet>,
}

const STATE_FORMAT: &str = "plpcl-train-state";

#[derive(Serialize)]
struct StateOut<'a> {
    format: &'static str,
    epoch: usize,
    adam: &'a Adam,
    reliable_history: &'a [usize],
    last_pseudo: &'a Option<PseudoLabelSet>,
    params: Box<RawValue>,
}

#[derive(Deserialize)]
struct StateIn {
    format: String,
    epoch: usize,
    adam: Adam,
    reliable_history: Vec<usize>,
    last_pseudo: Option<PseudoLabelSet>,
    params: Box<RawValue>,
}

impl TrainState {
    pub fn new(params: ModelParams, lr: f64) -> Self {
        let adam = Adam::new(lr, &params.tensor_sizes());
        Self {
            params,
            adam,
            epoch: 0,
            reliable_history: Vec::new(),
            last_pseudo: None,
        }
    }

    pub fn to_json(&self) -> String {
        let params = Checkpoint {
            params: self.params.clone(),
            lineage: Vec::new(),
            classes: ClassLayout::default(),
        }
        .to_json();
        let out = StateOut {
            format: STATE_FORMAT,
            epoch: self.epoch,
            adam: &self.adam,
            reliable_history: &self.reliable_history,
            last_pseudo: &self.last_pseudo,
            params: RawValue::from_string(params).expect("checkpoint is valid json"),
        };
        serde_json::to_string(&out).expect("state serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: StateIn =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if raw.format != STATE_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format {}",
                raw.format
            )));
        }
        let params = Checkpoint::from_json(raw.params.get())?.params;
        if raw.adam.m.len() != params.tensor_sizes().len() || raw.adam.v.len() != raw.adam.m.len() {
            return Err(Error::Checkpoint(
                "optimizer moments do not match the parameters".into(),
            ));
        }
        Ok(Self {
            params,
            adam: raw.adam,
            epoch: raw.epoch,
            reliable_history: raw.reliable_history,
            last_pseudo: raw.last_pseudo,
        })
    }
}

/// Which loss terms a batch may contribute.
struct Plan {
    weights: LossWeights,
    tau: f64,
    pool: SclPool,
    clcl_columns: Vec<usize>,
    clcl_rows: ClclRows,
    dropout_p: f64,
    grad_clip: Option<f64>,
}

struct BatchOutcome {
    total: f64,
    terms: LossTerms<f64>,
    grads: Vec<Vec<f64>>,
}

fn all_zero(w: &LossWeights) -> bool {
    [w.scl, w.ce, w.ilcl, w.clcl, w.pcl]
        .iter()
        .all(|&x| x == 0.0)
}

/// Records the batch objective and returns its gradients, or `None` when
/// no term applies to this batch.
fn batch_gradients(
    params: &ModelParams,
    z: Matrix,
    mask: &[Supervision],
    plan: &Plan,
    view_seed: u64,
) -> Result<Option<BatchOutcome>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let zv = tape.leaf(z);
    let (a, b) =
        model::augmented_views_on_tape(&mut tape, params, &vars, zv, plan.dropout_p, view_seed)?;
    let w = &plan.weights;
    let supervised = mask.iter().any(|s| s.class().is_some());
    let unlabeled = mask.contains(&Supervision::Unlabeled);
    let mut parts = LossTerms::default();
    if w.scl > 0.0 && supervised {
        parts.scl = Some(losses::scl_on_tape(
            &mut tape, a.f, b.f, mask, plan.tau, plan.pool,
        )?);
    }
    if w.ce > 0.0 && supervised {
        parts.ce = Some(losses::ce_on_tape(&mut tape, a.g, mask)?);
    }
    if w.ilcl > 0.0 && unlabeled {
        parts.ilcl = Some(losses::ilcl_on_tape(&mut tape, a.f, b.f, mask, plan.tau)?);
    }
    let clcl_rows: Vec<usize> = match plan.clcl_rows {
        ClclRows::All => (0..mask.len()).collect(),
        ClclRows::Unlabeled => (0..mask.len())
            .filter(|&i| !matches!(mask[i], Supervision::Labeled(_)))
            .collect(),
    };
    if w.clcl > 0.0 && plan.clcl_columns.len() >= 2 && !clcl_rows.is_empty() {
        let (ga, gb) = if clcl_rows.len() == mask.len() {
            (a.g, b.g)
        } else {
            (
                tape.select_rows(a.g, &clcl_rows)?,
                tape.select_rows(b.g, &clcl_rows)?,
            )
        };
        parts.clcl = match losses::clcl_on_tape(&mut tape, ga, gb, &plan.clcl_columns, plan.tau) {
            Ok(v) => Some(v),
            // a column underflowed to zero on this batch; skip the term
            Err(Error::ZeroColumn(_)) => None,
            Err(e) => return Err(e),
        };
    }
    if w.pcl > 0.0 {
        parts.pcl = prototypes::pcl_on_tape(&mut tape, a, b, mask, plan.tau)?;
    }
    let Some(total) = losses::total_on_tape(&mut tape, &parts, w)? else {
        return Ok(None);
    };
    let mut grads = tape.gradient(total)?;
    let mut flat = vars.gradients(&mut grads);
    if let Some(cap) = plan.grad_clip {
        clip_global_norm(&mut flat, cap);
    }
    let value = |v: Option<crate::math::Var>| v.map(|v| tape.value(v).item());
    Ok(Some(BatchOutcome {
        total: tape.value(total).item(),
        terms: LossTerms {
            scl: value(parts.scl),
            ilcl: value(parts.ilcl),
            ce: value(parts.ce),
            clcl: value(parts.clcl),
            pcl: value(parts.pcl),
        },
        grads: flat,
    }))
}

/// Shuffled batches of `n` positions; a trailing batch of one is dropped.
fn batches(n: usize, batch_size: usize, rng_seed: u64, path: &[u64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_at(rng_seed, path));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Default)]
struct Accumulator {
    batches: usize,
    total: f64,
    sums: [f64; 5],
    counts: [usize; 5],
}

impl Accumulator {
    fn add(&mut self, o: &BatchOutcome) {
        self.batches += 1;
        self.total += o.total;
        let t = &o.terms;
        for (k, v) in [t.scl, t.ce, t.ilcl, t.clcl, t.pcl].into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[k] += v;
                self.counts[k] += 1;
            }
        }
    }

    fn log(&self, epoch: usize, n_reliable: usize) -> EpochLog {
        let mean = |k: usize| {
            if self.counts[k] == 0 {
                0.0
            } else {
                self.sums[k] / self.counts[k] as f64
            }
        };
        EpochLog {
            epoch,
            loss_total: if self.batches == 0 {
                0.0
            } else {
                self.total / self.batches as f64
            },
            loss_scl: mean(0),
            loss_ce: mean(1),
            loss_ilcl: mean(2),
            loss_clcl: mean(3),
            loss_pcl: mean(4),
            n_reliable,
        }
    }
}

/// One pass over `z` in shuffled batches.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    params: &mut ModelParams,
    adam: &mut Adam,
    z: &Matrix,
    mask: &[Supervision],
    plan: &Plan,
    batch_size: usize,
    seed: u64,
    stage: u64,
    epoch: usize,
) -> Result<Accumulator> {
    let mut acc = Accumulator::default();
    let zero_objective = all_zero(&plan.weights);
    let groups = batches(
        z.rows(),
        batch_size,
        seed,
        &[stage, epoch as u64, stream::SHUFFLE],
    );
    for (b, rows) in groups.iter().enumerate() {
        let zb = z.select_rows(rows)?;
        let mb: Vec<Supervision> = rows.iter().map(|&i| mask[i]).collect();
        let view_seed = seed::derive(seed, &[stage, epoch as u64, stream::VIEW, b as u64]);
        match batch_gradients(params, zb, &mb, plan, view_seed)? {
            Some(o) => {
                adam.step(params, &o.grads);
                acc.add(&o);
            }
            None if zero_objective => {
                let zeros: Vec<Vec<f64>> = params
                    .tensor_sizes()
                    .iter()
                    .map(|&s| vec![0.0; s])
                    .collect();
                adam.step(params, &zeros);
                acc.batches += 1;
            }
            None => {}
        }
    }
    if acc.batches == 0 {
        return Err(Error::EmptyBatch("every batch of the epoch"));
    }
    Ok(acc)
}

fn check_input_dim(params: &ModelParams, data: &EmbeddingDataset) -> Result<usize> {
    let d = data.dim().ok_or(Error::NoLabeledData)?;
    if params.dims.input != d {
        return Err(Error::DimsMismatch {
            expected: params.dims.input,
            got: d,
        });
    }
    Ok(d)
}

/// Stage 1 with a per-epoch callback.
pub fn pretrain_with(
    data: &EmbeddingDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<ModelParams> {
    cfg.validate()?;
    let layout = data.classes();
    cfg.check_layout(layout)?;
    let train = data.indices(Split::Train);
    let columns = data.columns(&train, layout)?;
    let labeled: Vec<(usize, usize)> = train
        .iter()
        .zip(&columns)
        .filter_map(|(&i, c)| c.map(|c| (i, c)))
        .collect();
    if labeled.is_empty() {
        return Err(Error::NoLabeledData);
    }
    for (k, name) in layout.known.iter().enumerate() {
        if !labeled.iter().any(|&(_, c)| c == k) {
            return Err(Error::ClassCountMismatch(format!(
                "known class {name:?} has no labeled sample"
            )));
        }
    }
    let d = data.dim().expect("labeled rows exist");
    let mut params = model::init_params(&cfg.dims(d), cfg.seed)?;
    let rows: Vec<usize> = labeled.iter().map(|&(i, _)| i).collect();
    let z = data.matrix(&rows)?;
    let mask: Vec<Supervision> = labeled
        .iter()
        .map(|&(_, c)| Supervision::Labeled(c))
        .collect();
    let plan = Plan {
        weights: LossWeights {
            scl: cfg.weights.scl,
            ce: cfg.weights.ce,
            ..LossWeights::zero()
        },
        tau: cfg.tau,
        pool: cfg.scl_pool,
        clcl_columns: Vec::new(),
        clcl_rows: cfg.clcl_rows,
        dropout_p: cfg.dropout_p,
        grad_clip: cfg.grad_clip,
    };
    let mut adam = Adam::new(cfg.pretrain_lr, &params.tensor_sizes());
    for epoch in 0..cfg.epochs_pretrain {
        let acc = run_epoch(
            &mut params,
            &mut adam,
            &z,
            &mask,
            &plan,
            cfg.batch_size,
            cfg.seed,
            stream::PRETRAIN,
            epoch,
        )?;
        on_epoch(&acc.log(epoch + 1, 0));
    }
    Ok(params)
}

/// Supervised pretraining on the labeled known-class training samples.
pub fn pretrain(data: &EmbeddingDataset, cfg: &TrainConfig) -> Result<ModelParams> {
    pretrain_with(data, cfg, |_| {})
}

/// Columns a pseudo-label may choose from.
fn pseudo_candidates(cfg: &TrainConfig) -> Option<Vec<usize>> {
    match (cfg.pseudo_columns, cfg.setting) {
        (PseudoColumns::Setting, Setting::Ood) => Some((cfg.k_ind..cfg.k_total()).collect()),
        _ => None,
    }
}

/// Pseudo-labels for the `unlabeled` rows of `g`, optionally restricted to
/// some columns. Restricted labels report the absolute column.
fn select_pseudo(
    g: &Matrix,
    unlabeled: &[usize],
    sigma: f64,
    columns: Option<&[usize]>,
) -> Result<PseudoLabelSet> {
    match columns {
        None => pseudo_labels::select(g, unlabeled, sigma),
        Some(cols) => {
            let mut set = pseudo_labels::select(&g.select_cols(cols)?, unlabeled, sigma)?;
            for e in &mut set.entries {
                e.class = cols[e.class];
            }
            Ok(set)
        }
    }
}

/// Continues stage 2 from `state` until `cfg.epochs_train` epochs are done.
pub fn train_from(
    data: &EmbeddingDataset,
    mut state: TrainState,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    cfg.validate()?;
    check_input_dim(&state.params, data)?;
    let layout = data.classes();
    cfg.check_layout(layout)?;
    if state.params.dims.clusters != cfg.k_total() {
        return Err(Error::ClassCountMismatch(format!(
            "model has {} cluster columns, config expects {}",
            state.params.dims.clusters,
            cfg.k_total()
        )));
    }
    if state.epoch >= cfg.epochs_train {
        return Ok(state);
    }
    let train = data.indices(Split::Train);
    let truth = data.columns(&train, layout)?;
    let z = data.matrix(&train)?;
    let unlabeled: Vec<usize> = (0..train.len()).filter(|&i| truth[i].is_none()).collect();
    let candidates = pseudo_candidates(cfg);
    let plan = Plan {
        weights: cfg.weights,
        tau: cfg.tau,
        pool: cfg.scl_pool,
        clcl_columns: cfg.clcl_columns(),
        clcl_rows: cfg.clcl_rows,
        dropout_p: cfg.dropout_p,
        grad_clip: cfg.grad_clip,
    };
    state.adam.lr = cfg.train_lr;
    while state.epoch < cfg.epochs_train {
        let epoch = state.epoch;
        let (_, g) = model::forward(&state.params, &z, 0.0, 0)?;
        let pseudo = select_pseudo(&g, &unlabeled, cfg.sigma, candidates.as_deref())?;
        let mask = pseudo_labels::refresh_mask(&truth, &pseudo)?;
        let n_reliable = pseudo.reliable_count();
        let acc = run_epoch(
            &mut state.params,
            &mut state.adam,
            &z,
            &mask,
            &plan,
            cfg.batch_size,
            cfg.seed,
            stream::TRAIN,
            epoch,
        )?;
        state.epoch += 1;
        state.reliable_history.push(n_reliable);
        state.last_pseudo = Some(pseudo);
        on_epoch(&acc.log(epoch + 1, n_reliable));
    }
    Ok(state)
}

/// Stage 2 from pretrained weights.
pub fn train(
    data: &EmbeddingDataset,
    params: ModelParams,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    let state = TrainState::new(params, cfg.train_lr);
    Ok(train_from(data, state, cfg, |_| {})?.params)
}

/// Cluster assignment per row with dropout off.
///
/// The OOD setting only considers the novel-class columns `k_ind..`;
/// assignments are absolute column indices. Ties go to the lower column.
pub fn predict(
    params: &ModelParams,
    z: &Matrix,
    setting: Setting,
    k_ind: usize,
) -> Result<Vec<usize>> {
    let (_, g) = model::forward(params, z, 0.0, 0)?;
    let first = match setting {
        Setting::Ood => k_ind.min(g.cols().saturating_sub(1)),
        Setting::Open => 0,
    };
    Ok(argmax_from(&g, first))
}

/// Row-wise argmax over columns `first..`.
pub fn argmax_from(g: &Matrix, first: usize) -> Vec<usize> {
    g.row_iter()
        .map(|row| first + argmax(&row[first..]).expect("nonempty row"))
        .collect()
}

/// Instance features with dropout off.
pub fn features(params: &ModelParams, z: &Matrix) -> Result<Matrix> {
    Ok(model::forward(params, z, 0.0, 0)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_split, synth_mixture, SplitSpec, SynthSpec};

    fn small(setting: Setting) -> (EmbeddingDataset, TrainConfig) {
        let raw = synth_mixture(&SynthSpec {
            classes: 4,
            dim: 6,
            per_class: 20,
            separation: 6.0,
            noise: 1.0,
            seed: 11,
        })
        .unwrap();
        let data = apply_split(
            &raw,
            &SplitSpec {
                ood_class_ratio: 0.5,
                labeled_ratio: 0.5,
                setting,
                seed: 1,
            },
        )
        .unwrap();
        let mut cfg = TrainConfig::for_layout(setting, data.classes());
        cfg.hidden = 16;
        cfg.feature_dim = 8;
        cfg.batch_size = 16;
        cfg.epochs_pretrain = 2;
        cfg.epochs_train = 2;
        cfg.pretrain_lr = 1e-3;
        cfg.train_lr = 1e-3;
        cfg.sigma = 0.5;
        (data, cfg)
    }

    #[test]
    fn predict_examples() {
        let g = Matrix::from_rows(&[
            [0.4, 0.3, 0.2, 0.1],
            [0.0, 0.0, 0.0, 1.0],
            [0.25, 0.25, 0.25, 0.25],
        ])
        .unwrap();
        assert_eq!(argmax_from(&g, 2), vec![2, 3, 2]);
        assert_eq!(argmax_from(&g, 0), vec![0, 3, 0]);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let dims = ModelDims::new(3, 4, 2, 2);
        let mut p = model::init_params(&dims, 1).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(0.1, &p.tensor_sizes());
        let zeros: Vec<Vec<f64>> = p.tensor_sizes().iter().map(|&s| vec![0.0; s]).collect();
        for _ in 0..5 {
            adam.step(&mut p, &zeros);
        }
        assert_eq!(p, before);
        assert!(adam.m.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_train_epochs_is_identity() {
        let (data, mut cfg) = small(Setting::Open);
        let params = pretrain(&data, &cfg).unwrap();
        cfg.epochs_train = 0;
        assert_eq!(train(&data, params.clone(), &cfg).unwrap(), params);
    }

    #[test]
    fn runs_are_deterministic() {
        for setting in [Setting::Open, Setting::Ood] {
            let (data, cfg) = small(setting);
            let a = train(&data, pretrain(&data, &cfg).unwrap(), &cfg).unwrap();
            let b = train(&data, pretrain(&data, &cfg).unwrap(), &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn zero_weights_leave_params_unchanged() {
        let (data, mut cfg) = small(Setting::Open);
        let params = pretrain(&data, &cfg).unwrap();
        cfg.weights = LossWeights::zero();
        let state = train_from(
            &data,
            TrainState::new(params.clone(), cfg.train_lr),
            &cfg,
            |_| {},
        )
        .unwrap();
        assert_eq!(state.params, params);
        assert!(state
            .adam
            .m
            .iter()
            .chain(&state.adam.v)
            .flatten()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (data, mut cfg) = small(Setting::Open);
        cfg.epochs_train = 3;
        let params = pretrain(&data, &cfg).unwrap();
        let full = train_from(
            &data,
            TrainState::new(params.clone(), cfg.train_lr),
            &cfg,
            |_| {},
        )
        .unwrap();
        let mut first = cfg.clone();
        first.epochs_train = 1;
        let half =
            train_from(&data, TrainState::new(params, cfg.train_lr), &first, |_| {}).unwrap();
        let restored = TrainState::from_json(&half.to_json()).unwrap();
        assert_eq!(restored, half);
        let resumed = train_from(&data, restored, &cfg, |_| {}).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn ablation_paths_contribute_nothing() {
        let (data, mut cfg) = small(Setting::Open);
        cfg.sigma = 1.0;
        cfg.weights.pcl = 0.0;
        let params = pretrain(&data, &cfg).unwrap();
        let mut logs = Vec::new();
        train_from(&data, TrainState::new(params, cfg.train_lr), &cfg, |l| {
            logs.push(l.clone())
        })
        .unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.n_reliable == 0 && l.loss_pcl == 0.0));
    }

    #[test]
    fn errors() {
        let (data, cfg) = small(Setting::Open);
        let unlabeled = crate::data::EmbeddingDataset::from_records(
            data.records()
                .iter()
                .cloned()
                .map(|mut r| {
                    if r.split == Split::Train {
                        r.label = None;
                    }
                    r
                })
                .collect(),
        )
        .unwrap();
        let mut c = cfg.clone();
        c.k_ind = 0;
        c.k_ood = unlabeled.classes().k_ood();
        assert!(pretrain(&unlabeled, &c).is_err());

        let mut wrong = cfg.clone();
        wrong.k_ood += 1;
        assert!(matches!(
            pretrain(&data, &wrong),
            Err(Error::ClassCountMismatch(_))
        ));

        let other = model::init_params(&ModelDims::new(3, 4, 2, cfg.k_total()), 0).unwrap();
        assert!(matches!(
            train(&data, other, &cfg),
            Err(Error::DimsMismatch { .. })
        ));
        let z = Matrix::zeros(2, 3);
        let p = model::init_params(&cfg.dims(6), 0).unwrap();
        assert!(matches!(
            predict(&p, &z, Setting::Open, 2),
            Err(Error::DimsMismatch { .. })
        ));
    }
}
