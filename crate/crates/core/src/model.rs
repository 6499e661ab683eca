//! The trainable network.
//!
//! A one-layer ReLU backbone maps input embeddings to hidden activations.
//! Two independent heads read those activations: the instance head ends in a
//! row L2-normalization, the cluster head in a row softmax. Augmented views
//! come from inverted dropout on the hidden activations.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::math::{Matrix, Tape, Var};
use crate::seed::{self, stream};

/// Instance feature width used when none is configured.
pub const DEFAULT_FEATURE_DIM: usize = 128;
/// Dropout probability for augmented views.
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Input embedding width `d`.
    pub input: usize,
    /// Backbone width `h`.
    pub hidden: usize,
    /// Instance feature width `m_f`.
    pub feature: usize,
    /// Cluster head width, known plus novel classes.
    pub clusters: usize,
    /// Optional hidden widths inside each head; empty means a single linear map.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_hidden: Vec<usize>,
}

impl ModelDims {
    pub fn new(input: usize, hidden: usize, feature: usize, clusters: usize) -> Self {
        Self {
            input,
            hidden,
            feature,
            clusters,
            head_hidden: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let named = [
            ("input", self.input),
            ("hidden", self.hidden),
            ("feature", self.feature),
            ("clusters", self.clusters),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::InvalidDims(format!(
                    "{name} width must be at least 1"
                )));
            }
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::InvalidDims(
                "head hidden widths must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One affine layer, `x · weight + bias` with `weight` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Matrix::new(fan_in, fan_out, data).expect("shape by construction"),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub backbone: Vec<Linear>,
    pub head_f: Vec<Linear>,
    pub head_g: Vec<Linear>,
}

/// Draws weights from `U(−1/√fan_in, 1/√fan_in)` with zero biases.
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = seed::rng_at(seed, &[stream::INIT]);
    let backbone = vec![Linear::init(dims.input, dims.hidden, &mut rng)];
    let mut head = |out: usize| {
        let mut widths = vec![dims.hidden];
        widths.extend(&dims.head_hidden);
        widths.push(out);
        widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], &mut rng))
            .collect::<Vec<_>>()
    };
    let head_f = head(dims.feature);
    let head_g = head(dims.clusters);
    Ok(ModelParams {
        dims: dims.clone(),
        backbone,
        head_f,
        head_g,
    })
}

impl ModelParams {
    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.backbone.iter().chain(&self.head_f).chain(&self.head_g)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.backbone
            .iter_mut()
            .chain(self.head_f.iter_mut())
            .chain(self.head_g.iter_mut())
    }

    /// Flat parameter slices in a fixed order: per layer, weight then bias.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.layers()
            .flat_map(|l| [l.weight.data().len(), l.bias.len()])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_sizes().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let mut reg = |layers: &[Linear]| {
            layers
                .iter()
                .map(|l| LayerVars {
                    weight: tape.leaf(l.weight.clone()),
                    bias: tape.leaf(Matrix::row_vector(&l.bias)),
                })
                .collect()
        };
        ParamVars {
            backbone: reg(&self.backbone),
            head_f: reg(&self.head_f),
            head_g: reg(&self.head_g),
        }
    }

    fn check_input(&self, z: &Matrix) -> Result<()> {
        if z.cols() != self.dims.input {
            return Err(Error::DimsMismatch {
                expected: self.dims.input,
                got: z.cols(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub backbone: Vec<LayerVars>,
    pub head_f: Vec<LayerVars>,
    pub head_g: Vec<LayerVars>,
}

impl ParamVars {
    fn layers(&self) -> impl Iterator<Item = &LayerVars> {
        self.backbone.iter().chain(&self.head_f).chain(&self.head_g)
    }

    /// Collects parameter adjoints in the order of [`ModelParams::tensors_mut`].
    pub fn gradients(&self, grads: &mut crate::math::Gradients) -> Vec<Vec<f64>> {
        self.layers()
            .flat_map(|l| [l.weight, l.bias])
            .map(|v| grads.take(v).into_data())
            .collect()
    }
}

/// Forward outputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ViewVars {
    pub f: Var,
    pub g: Var,
}

fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidDropout(p));
    }
    Ok(())
}

fn dropout_mask(rows: usize, cols: usize, p: f64, seed: u64) -> Matrix {
    let mut rng = seed::rng(seed);
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Matrix::new(rows, cols, data).expect("shape by construction")
}

fn apply_layers(tape: &mut Tape, mut x: Var, layers: &[LayerVars]) -> Result<Var> {
    for (k, layer) in layers.iter().enumerate() {
        let y = tape.matmul(x, layer.weight)?;
        x = tape.add_row(y, layer.bias)?;
        if k + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Records one forward pass of `z` through the network.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    z: Var,
    dropout_p: f64,
    seed: u64,
) -> Result<ViewVars> {
    check_dropout(dropout_p)?;
    params.check_input(tape.value(z))?;
    let mut h = z;
    for layer in &vars.backbone {
        let y = tape.matmul(h, layer.weight)?;
        let y = tape.add_row(y, layer.bias)?;
        h = tape.relu(y);
    }
    if dropout_p > 0.0 {
        let (rows, cols) = tape.value(h).shape();
        h = tape.mul_const(h, dropout_mask(rows, cols, dropout_p, seed))?;
    }
    let f_raw = apply_layers(tape, h, &vars.head_f)?;
    let f = tape.normalize_rows(f_raw)?;
    let g_raw = apply_layers(tape, h, &vars.head_g)?;
    let g = tape.softmax_rows(g_raw);
    Ok(ViewVars { f, g })
}

/// Instance features `F` and cluster probabilities `G` for `z`.
pub fn forward(
    params: &ModelParams,
    z: &Matrix,
    dropout_p: f64,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    check_dropout(dropout_p)?;
    params.check_input(z)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let zv = tape.leaf(z.clone());
    let out = forward_on_tape(&mut tape, params, &vars, zv, dropout_p, seed)?;
    Ok((tape.value(out.f).clone(), tape.value(out.g).clone()))
}

/// Seed of the second (augmented) view for a given first-view seed.
pub fn augmented_seed(seed: u64) -> u64 {
    seed::derive(seed, &[stream::AUG_VIEW])
}

/// Both dropout views of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTensors {
    pub z: Matrix,
    pub f: Matrix,
    pub g: Matrix,
    pub f_aug: Matrix,
    pub g_aug: Matrix,
}

pub fn augmented_views(
    params: &ModelParams,
    z: &Matrix,
    dropout_p: f64,
    seed: u64,
) -> Result<BatchTensors> {
    let (f, g) = forward(params, z, dropout_p, seed)?;
    let (f_aug, g_aug) = forward(params, z, dropout_p, augmented_seed(seed))?;
    Ok(BatchTensors {
        z: z.clone(),
        f,
        g,
        f_aug,
        g_aug,
    })
}

/// Records both views of `z` on one tape, sharing parameters.
pub fn augmented_views_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    z: Var,
    dropout_p: f64,
    seed: u64,
) -> Result<(ViewVars, ViewVars)> {
    let a = forward_on_tape(tape, params, vars, z, dropout_p, seed)?;
    let b = forward_on_tape(tape, params, vars, z, dropout_p, augmented_seed(seed))?;
    Ok((a, b))
}

/// Head columns: known classes first, then novel clusters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLayout {
    pub known: Vec<String>,
    pub unknown: Vec<String>,
}

impl ClassLayout {
    pub fn k_ind(&self) -> usize {
        self.known.len()
    }

    pub fn k_ood(&self) -> usize {
        self.unknown.len()
    }

    pub fn k_total(&self) -> usize {
        self.known.len() + self.unknown.len()
    }

    /// Head column of a known class.
    pub fn column_of(&self, class: &str) -> Option<usize> {
        self.known.iter().position(|c| c == class)
    }
}

/// One step in the history of a set of weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub stage: String,
    pub seed: u64,
    pub epochs: usize,
}

/// Weights plus the metadata needed to evaluate or continue training them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub lineage: Vec<SeedLineage>,
    pub classes: ClassLayout,
}

const CHECKPOINT_FORMAT: &str = "plpcl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes every number with 17 significant digits.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn raw_vector(values: &[f64]) -> Box<RawValue> {
    let body: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
    RawValue::from_string(format!("[{}]", body.join(","))).expect("valid json")
}

fn raw_matrix(m: &Matrix) -> Box<RawValue> {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| raw_vector(r).get().to_owned())
        .collect();
    RawValue::from_string(format!("[{}]", rows.join(","))).expect("valid json")
}

#[derive(Serialize)]
struct LayerOut {
    weight: Box<RawValue>,
    bias: Box<RawValue>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format: &'static str,
    version: u32,
    dims: &'a ModelDims,
    lineage: &'a [SeedLineage],
    classes: &'a ClassLayout,
    backbone: Vec<LayerOut>,
    head_f: Vec<LayerOut>,
    head_g: Vec<LayerOut>,
}

#[derive(Deserialize)]
struct LayerIn {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    format: String,
    version: u32,
    dims: ModelDims,
    lineage: Vec<SeedLineage>,
    classes: ClassLayout,
    backbone: Vec<LayerIn>,
    head_f: Vec<LayerIn>,
    head_g: Vec<LayerIn>,
}

fn layers_out(layers: &[Linear]) -> Vec<LayerOut> {
    layers
        .iter()
        .map(|l| LayerOut {
            weight: raw_matrix(&l.weight),
            bias: raw_vector(&l.bias),
        })
        .collect()
}

fn layers_in(layers: Vec<LayerIn>) -> Result<Vec<Linear>> {
    layers
        .into_iter()
        .map(|l| {
            let weight = Matrix::from_rows(&l.weight)?;
            if weight.cols() != l.bias.len() {
                return Err(Error::Checkpoint(format!(
                    "bias has {} entries for a layer of width {}",
                    l.bias.len(),
                    weight.cols()
                )));
            }
            Ok(Linear {
                weight,
                bias: l.bias,
            })
        })
        .collect()
}

fn check_chain(layers: &[Linear], from: usize, to: usize, what: &str) -> Result<()> {
    let mut width = from;
    for l in layers {
        if l.in_dim() != width {
            return Err(Error::Checkpoint(format!(
                "{what}: layer expects {} inputs, got {width}",
                l.in_dim()
            )));
        }
        width = l.out_dim();
    }
    if width != to || layers.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{what}: ends at width {width}, expected {to}"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let out = CheckpointOut {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            dims: &self.params.dims,
            lineage: &self.lineage,
            classes: &self.classes,
            backbone: layers_out(&self.params.backbone),
            head_f: layers_out(&self.params.head_f),
            head_g: layers_out(&self.params.head_g),
        };
        let mut s = serde_json::to_string_pretty(&out).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CheckpointIn =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if raw.format != CHECKPOINT_FORMAT || raw.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                raw.format, raw.version
            )));
        }
        let dims = raw.dims;
        dims.validate()?;
        let params = ModelParams {
            backbone: layers_in(raw.backbone)?,
            head_f: layers_in(raw.head_f)?,
            head_g: layers_in(raw.head_g)?,
            dims,
        };
        let d = &params.dims;
        check_chain(&params.backbone, d.input, d.hidden, "backbone")?;
        check_chain(&params.head_f, d.hidden, d.feature, "head_f")?;
        check_chain(&params.head_g, d.hidden, d.clusters, "head_g")?;
        if raw.classes.k_total() != 0 && raw.classes.k_total() != d.clusters {
            return Err(Error::Checkpoint(format!(
                "{} classes for a {}-way cluster head",
                raw.classes.k_total(),
                d.clusters
            )));
        }
        Ok(Self {
            params,
            lineage: raw.lineage,
            classes: raw.classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = seed::rng(seed);
        let data = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::new(n, d, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let dims = ModelDims::new(8, 16, 4, 3);
        let a = init_params(&dims, 7).unwrap();
        assert_eq!(a, init_params(&dims, 7).unwrap());
        assert_ne!(a, init_params(&dims, 8).unwrap());
        assert_eq!(a.backbone[0].weight.shape(), (8, 16));
        assert_eq!(a.head_g.last().unwrap().out_dim(), 3);
        assert_eq!(a.head_f.last().unwrap().out_dim(), 4);
        assert!(a.layers().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.backbone[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_rejects_zero_dims() {
        let err = init_params(&ModelDims::new(0, 16, 4, 3), 1).unwrap_err();
        assert!(matches!(err, Error::InvalidDims(_)));
    }

    #[test]
    fn head_depth_is_configurable() {
        let mut dims = ModelDims::new(5, 6, 4, 3);
        dims.head_hidden = vec![7];
        let p = init_params(&dims, 1).unwrap();
        assert_eq!(p.head_f.len(), 2);
        assert_eq!(p.head_f[0].weight.shape(), (6, 7));
        let (f, g) = forward(&p, &random_input(3, 5, 2), 0.1, 3).unwrap();
        assert_eq!((f.shape(), g.shape()), ((3, 4), (3, 3)));
    }

    #[test]
    fn outputs_are_unit_rows_and_distributions() {
        let p = init_params(&ModelDims::new(6, 10, 4, 3), 3).unwrap();
        let z = random_input(5, 6, 11);
        let (f, g) = forward(&p, &z, 0.1, 5).unwrap();
        for i in 0..5 {
            assert!((crate::math::norm(f.row(i)) - 1.0).abs() < 1e-9);
            assert!((g.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_dropout_ignores_seed() {
        let p = init_params(&ModelDims::new(6, 10, 4, 3), 3).unwrap();
        let z = random_input(4, 6, 1);
        assert_eq!(
            forward(&p, &z, 0.0, 1).unwrap(),
            forward(&p, &z, 0.0, 99).unwrap()
        );
        let views = augmented_views(&p, &z, 0.0, 5).unwrap();
        assert_eq!(views.f, views.f_aug);
        assert_eq!(views.g, views.g_aug);
    }

    #[test]
    fn dropout_views_differ_but_repeat() {
        let p = init_params(&ModelDims::new(6, 32, 4, 3), 3).unwrap();
        let z = random_input(4, 6, 1);
        let a = augmented_views(&p, &z, 0.1, 5).unwrap();
        assert_ne!(a.f, a.f_aug);
        assert_eq!(a, augmented_views(&p, &z, 0.1, 5).unwrap());
    }

    #[test]
    fn invalid_dropout_and_dims() {
        let p = init_params(&ModelDims::new(6, 10, 4, 3), 3).unwrap();
        let z = random_input(2, 6, 1);
        assert!(matches!(
            augmented_views(&p, &z, 1.0, 1),
            Err(Error::InvalidDropout(_))
        ));
        assert!(matches!(
            forward(&p, &z, -0.1, 1),
            Err(Error::InvalidDropout(_))
        ));
        let bad = random_input(2, 5, 1);
        assert!(matches!(
            forward(&p, &bad, 0.0, 1),
            Err(Error::DimsMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let p = init_params(&ModelDims::new(3, 4, 2, 2), 9).unwrap();
        let ck = Checkpoint {
            params: p,
            lineage: vec![SeedLineage {
                stage: "init".into(),
                seed: 9,
                epochs: 0,
            }],
            classes: ClassLayout {
                known: vec!["a".into()],
                unknown: vec!["b".into()],
            },
        };
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn checkpoint_rejects_broken_chain() {
        let p = init_params(&ModelDims::new(3, 4, 2, 2), 9).unwrap();
        let ck = Checkpoint {
            params: p,
            lineage: vec![],
            classes: ClassLayout::default(),
        };
        let text = ck.to_json().replace("\"input\": 3", "\"input\": 5");
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(Error::Checkpoint(_))
        ));
    }
}
