//! Keypoint-only depth network: one rectified hidden layer over the
//! concatenated source and target keypoints, trained with Nesterov momentum.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geometry::{
    apply_affine, solve_affine, AffineMap, DepthVector, KeypointSet2D, KeypointSet3D,
    DEFAULT_DAMPING, MIN_POINTS_3D,
};
use crate::lsqgrad::{eq1_loss, structured_loss};
use crate::synth::PairSample;

pub const HIDDEN_UNITS: usize = 256;
/// Standard deviation of the initial depth-output biases.
pub const DEPTH_BIAS_STD: f64 = 0.5;
/// Subtracted from every normalized input coordinate.
pub const INPUT_CENTER: f64 = 0.5;
/// Training aborts once a batch loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// How the affine map is obtained during training and prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The network predicts the map; prediction uses it directly.
    Separate,
    /// Trained like `Separate`; prediction re-solves the map from the depths.
    SecondaryLsq,
    /// The network predicts only depths; the map is always the closed-form fit.
    Pseudoinverse,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Separate,
        Variant::SecondaryLsq,
        Variant::Pseudoinverse,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Separate => "separate",
            Variant::SecondaryLsq => "secondary_lsq",
            Variant::Pseudoinverse => "pseudoinverse",
        }
    }

    /// Whether the network has the 8 extra affine outputs.
    pub fn has_affine_head(&self) -> bool {
        !matches!(self, Variant::Pseudoinverse)
    }

    pub fn output_size(&self, k: usize) -> usize {
        if self.has_affine_head() {
            k + 8
        } else {
            k
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant '{s}'")))
    }
}

/// Two-layer perceptron `4K → 256 → o`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub k: usize,
    pub variant: Variant,
    pub seed: u64,
    /// `HIDDEN_UNITS × 4K`.
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `o × HIDDEN_UNITS`.
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Gradient (or velocity) with the same shapes as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl ParamGrad {
    fn zeros_like(m: &MlpModel) -> Self {
        ParamGrad {
            w1: DMatrix::zeros(m.w1.nrows(), m.w1.ncols()),
            b1: DVector::zeros(m.b1.len()),
            w2: DMatrix::zeros(m.w2.nrows(), m.w2.ncols()),
            b2: DVector::zeros(m.b2.len()),
        }
    }

    /// All entries, in the order w1, b1, w2, b2 (column-major within matrices).
    pub fn flat(&self) -> Vec<f64> {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
        .concat()
    }
}

impl MlpModel {
    pub fn input_size(&self) -> usize {
        4 * self.k
    }

    pub fn output_size(&self) -> usize {
        self.variant.output_size(self.k)
    }

    /// Mutable views of every parameter, matching [`ParamGrad::flat`] order.
    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    pub fn flat_params(&self) -> Vec<f64> {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
        .concat()
    }

    fn check_finite(&self) -> Result<()> {
        if self.flat_params().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters"))
        }
    }
}

/// Glorot-uniform hidden layer with rectifier gain, zero output weights,
/// `N(0, 0.5)` depth biases and identity affine biases.
pub fn init_model(k: usize, variant: Variant, seed: u64) -> Result<MlpModel> {
    if k < MIN_POINTS_3D {
        return Err(Error::TooFewPoints {
            min: MIN_POINTS_3D,
            got: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fan_in, fan_out) = (4 * k, HIDDEN_UNITS);
    let limit = 2f64.sqrt() * (6.0 / (fan_in + fan_out) as f64).sqrt();
    // Row-major draw order so the stream does not depend on storage layout.
    let mut w1 = DMatrix::zeros(fan_out, fan_in);
    for r in 0..fan_out {
        for c in 0..fan_in {
            w1[(r, c)] = rng.random_range(-limit..limit);
        }
    }
    let o = variant.output_size(k);
    let normal = Normal::new(0.0, DEPTH_BIAS_STD).expect("valid normal");
    let mut b2 = DVector::zeros(o);
    for i in 0..k {
        b2[i] = normal.sample(&mut rng);
    }
    if variant.has_affine_head() {
        for (i, v) in AffineMap::identity().row_major().into_iter().enumerate() {
            b2[k + i] = v;
        }
    }
    Ok(MlpModel {
        k,
        variant,
        seed,
        w1,
        b1: DVector::zeros(fan_out),
        w2: DMatrix::zeros(o, fan_out),
        b2,
    })
}

/// Network input: source points then target points, each `x, y` per
/// landmark, shifted so the crop center is the origin.
pub fn encode_input(src: &KeypointSet2D, tgt: &KeypointSet2D) -> Vec<f64> {
    src.points()
        .iter()
        .chain(tgt.points())
        .flat_map(|p| [p[0] - INPUT_CENTER, p[1] - INPUT_CENTER])
        .collect()
}

struct BatchForward {
    input: DMatrix<f64>,
    hidden: DMatrix<f64>,
    output: DMatrix<f64>,
}

fn forward_batch(model: &MlpModel, samples: &[&PairSample]) -> Result<BatchForward> {
    let n = model.input_size();
    let mut input = DMatrix::zeros(samples.len(), n);
    for (r, s) in samples.iter().enumerate() {
        if s.src.len() != model.k || s.tgt.len() != model.k {
            return Err(Error::SizeMismatch {
                what: "sample keypoints vs model",
                expected: model.k,
                got: s.src.len().max(s.tgt.len()),
            });
        }
        for (c, v) in encode_input(&s.src, &s.tgt).into_iter().enumerate() {
            input[(r, c)] = v;
        }
    }
    let mut hidden = &input * model.w1.transpose();
    for mut row in hidden.row_iter_mut() {
        row += model.b1.transpose();
    }
    hidden.apply(|h| *h = h.max(0.0));
    let mut output = &hidden * model.w2.transpose();
    for mut row in output.row_iter_mut() {
        row += model.b2.transpose();
    }
    Ok(BatchForward {
        input,
        hidden,
        output,
    })
}

fn decode(model: &MlpModel, out: &[f64]) -> Result<(DepthVector, Option<AffineMap>)> {
    let z = DepthVector::new(out[..model.k].to_vec())?;
    let map = if model.variant.has_affine_head() {
        let mut v = [0.0; 8];
        v.copy_from_slice(&out[model.k..model.k + 8]);
        Some(AffineMap::from_rows(AffineMap::from_row_major(&v).rows)?)
    } else {
        None
    };
    Ok((z, map))
}

/// Predicted source depths and, for models with an affine head, the map.
pub fn forward(
    model: &MlpModel,
    src: &KeypointSet2D,
    tgt: &KeypointSet2D,
) -> Result<(DepthVector, Option<AffineMap>)> {
    let sample = PairSample {
        src: src.clone(),
        tgt: tgt.clone(),
        gt_depth: None,
        meta: None,
    };
    let fw = forward_batch(model, &[&sample])?;
    let out: Vec<f64> = fw.output.row(0).iter().copied().collect();
    decode(model, &out)
}

/// Per-sample loss and its derivative with respect to the network outputs.
fn head_loss(
    model: &MlpModel,
    out: &[f64],
    sample: &PairSample,
    damping: f64,
) -> Result<(f64, Vec<f64>)> {
    let (z, map) = decode(model, out)?;
    let (loss, d) = match map {
        None => {
            let r = structured_loss(&z, &sample.src, &sample.tgt, damping)?;
            (r.loss, r.grad_z)
        }
        Some(map) => {
            let r = eq1_loss(&map, &z, &sample.src, &sample.tgt)?;
            let mut d = r.grad_z;
            d.extend(r.grad_map.iter().flatten());
            (r.loss, d)
        }
    };
    Ok((loss, d))
}

/// Mean loss over `samples` and the gradient of that mean.
fn batch_loss_and_grad(
    model: &MlpModel,
    samples: &[&PairSample],
    damping: f64,
) -> Result<(Vec<f64>, ParamGrad)> {
    let fw = forward_batch(model, samples)?;
    let rows: Vec<Vec<f64>> = fw
        .output
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    let per_sample: Vec<Result<(f64, Vec<f64>)>> = rows
        .par_iter()
        .zip(samples.par_iter())
        .map(|(out, s)| head_loss(model, out, s, damping))
        .collect();
    let b = samples.len() as f64;
    let mut d_out = DMatrix::zeros(samples.len(), model.output_size());
    let mut losses = Vec::with_capacity(samples.len());
    for (r, res) in per_sample.into_iter().enumerate() {
        let (loss, d) = res?;
        losses.push(loss);
        for (c, v) in d.into_iter().enumerate() {
            d_out[(r, c)] = v / b;
        }
    }
    let grad_w2 = d_out.transpose() * &fw.hidden;
    let grad_b2 = column_sums(&d_out);
    let mut d_hidden = &d_out * &model.w2;
    d_hidden.zip_apply(&fw.hidden, |d, h| {
        if h <= 0.0 {
            *d = 0.0
        }
    });
    let grad_w1 = d_hidden.transpose() * &fw.input;
    let grad_b1 = column_sums(&d_hidden);
    Ok((
        losses,
        ParamGrad {
            w1: grad_w1,
            b1: grad_b1,
            w2: grad_w2,
            b2: grad_b2,
        },
    ))
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.iter().sum()))
}

/// Training loss of one sample under the model's variant, with exact
/// gradients for every parameter.
pub fn training_loss(
    model: &MlpModel,
    sample: &PairSample,
    damping: f64,
) -> Result<(f64, ParamGrad)> {
    let (losses, grad) = batch_loss_and_grad(model, &[sample], damping)?;
    Ok((losses[0], grad))
}

/// Mean per-sample training loss over a dataset, without gradients.
pub fn dataset_loss(model: &MlpModel, samples: &[PairSample], damping: f64) -> Result<f64> {
    let refs: Vec<&PairSample> = samples.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(256) {
        let fw = forward_batch(model, chunk)?;
        let rows: Vec<Vec<f64>> = fw
            .output
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        let losses: Vec<Result<(f64, Vec<f64>)>> = rows
            .par_iter()
            .zip(chunk.par_iter())
            .map(|(out, s)| head_loss(model, out, s, damping))
            .collect();
        for l in losses {
            total += l?.0;
        }
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub damping: f64,
    /// Halve the learning rate whenever an epoch fails to improve on the best
    /// epoch loss so far.
    pub halve_lr_on_plateau: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 500,
            batch_size: 64,
            seed: 0,
            variant: Variant::Pseudoinverse,
            damping: DEFAULT_DAMPING,
            halve_lr_on_plateau: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::InvalidArgument("damping must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean per-sample loss seen during each epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<Option<f64>>,
    pub learning_rate: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    /// CSV with one row per epoch. Timings are left out so reruns are
    /// byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,learning_rate\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            let v = v.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{}\n",
                i + 1,
                t,
                v,
                self.learning_rate[i]
            ));
        }
        s
    }
}

/// Nesterov-momentum mini-batch training. The batch gradient is the mean of
/// per-sample gradients; batches are reshuffled every epoch from `config.seed`.
pub fn train(
    model: MlpModel,
    dataset: &[PairSample],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainLog)> {
    train_with_validation(model, dataset, None, config)
}

pub fn train_with_validation(
    mut model: MlpModel,
    dataset: &[PairSample],
    validation: Option<&[PairSample]>,
    config: &TrainConfig,
) -> Result<(MlpModel, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.variant.has_affine_head() != model.variant.has_affine_head() {
        return Err(Error::InvalidArgument(format!(
            "model variant {} cannot be trained as {}",
            model.variant, config.variant
        )));
    }
    if let Some(bad) = dataset
        .iter()
        .position(|s| s.len() != model.k || s.tgt.len() != model.k)
    {
        return Err(Error::SizeMismatch {
            what: "training sample keypoints",
            expected: model.k,
            got: dataset[bad].len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = ParamGrad::zeros_like(&model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut lr = config.learning_rate;
    let mu = config.momentum;
    let mut best = f64::INFINITY;
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<&PairSample> = batch.iter().map(|&i| &dataset[i]).collect();
            let (losses, grad) = batch_loss_and_grad(&model, &samples, config.damping)?;
            for (j, l) in losses.iter().enumerate() {
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        sample: batch[j],
                    });
                }
            }
            let batch_mean = losses.iter().sum::<f64>() / losses.len() as f64;
            if batch_mean > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_mean,
                });
            }
            epoch_total += losses.iter().sum::<f64>();
            let grads = [
                grad.w1.as_slice(),
                grad.b1.as_slice(),
                grad.w2.as_slice(),
                grad.b2.as_slice(),
            ];
            let vels = [
                velocity.w1.as_mut_slice(),
                velocity.b1.as_mut_slice(),
                velocity.w2.as_mut_slice(),
                velocity.b2.as_mut_slice(),
            ];
            for ((p, v), g) in model.params_mut().into_iter().zip(vels).zip(grads) {
                nesterov_step(p, v, g, lr, mu);
            }
        }
        model.check_finite().map_err(|_| Error::Diverged {
            epoch,
            loss: f64::NAN,
        })?;
        let mean = epoch_total / dataset.len() as f64;
        log.train_loss.push(mean);
        log.learning_rate.push(lr);
        log.val_loss.push(match validation {
            Some(v) if !v.is_empty() => Some(dataset_loss(&model, v, config.damping)?),
            _ => None,
        });
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
        if config.halve_lr_on_plateau && mean >= best {
            lr *= 0.5;
        }
        best = best.min(mean);
    }
    Ok((model, log))
}

/// `v ← μv − ηg;  p ← p + μv − ηg`.
fn nesterov_step(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64) {
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v - lr * g;
        *p += mu * *v - lr * g;
    }
}

/// Projects the source of `sample` into the target view using `variant`'s
/// rule for the map. Returns the projected points and the map used.
pub fn predict_target(
    model: &MlpModel,
    sample: &PairSample,
    variant: Variant,
    damping: f64,
) -> Result<(KeypointSet2D, AffineMap, DepthVector)> {
    let (z, predicted) = forward(model, &sample.src, &sample.tgt)?;
    let pts = KeypointSet3D::from_parts(&sample.src, &z)?;
    let map = match (variant, predicted) {
        (Variant::Separate, Some(map)) => map,
        (Variant::Separate, None) => {
            return Err(Error::InvalidArgument(
                "model has no affine head; use secondary_lsq or pseudoinverse".into(),
            ))
        }
        _ => solve_affine(&pts, &sample.tgt, damping)?,
    };
    Ok((apply_affine(&map, &pts), map, z))
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    k: usize,
    variant: Variant,
    layer1_w: Vec<f64>,
    layer1_b: Vec<f64>,
    layer2_w: Vec<f64>,
    layer2_b: Vec<f64>,
    seed: u64,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Serializes the model as a single JSON document (row-major weights).
pub fn checkpoint_json(model: &MlpModel) -> String {
    let ck = Checkpoint {
        k: model.k,
        variant: model.variant,
        layer1_w: row_major(&model.w1),
        layer1_b: model.b1.as_slice().to_vec(),
        layer2_w: row_major(&model.w2),
        layer2_b: model.b2.as_slice().to_vec(),
        seed: model.seed,
    };
    serde_json::to_string(&ck).expect("checkpoint serializes")
}

pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    write_atomic(path, checkpoint_json(model).as_bytes())
}

pub fn checkpoint_from_json(text: &str) -> Result<MlpModel> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    let o = ck.variant.output_size(ck.k);
    let expect = [
        ("layer1_w", ck.layer1_w.len(), HIDDEN_UNITS * 4 * ck.k),
        ("layer1_b", ck.layer1_b.len(), HIDDEN_UNITS),
        ("layer2_w", ck.layer2_w.len(), o * HIDDEN_UNITS),
        ("layer2_b", ck.layer2_b.len(), o),
    ];
    for (what, got, expected) in expect {
        if got != expected {
            return Err(Error::SizeMismatch {
                what,
                expected,
                got,
            });
        }
    }
    let model = MlpModel {
        k: ck.k,
        variant: ck.variant,
        seed: ck.seed,
        w1: DMatrix::from_row_slice(HIDDEN_UNITS, 4 * ck.k, &ck.layer1_w),
        b1: DVector::from_vec(ck.layer1_b),
        w2: DMatrix::from_row_slice(o, HIDDEN_UNITS, &ck.layer2_w),
        b2: DVector::from_vec(ck.layer2_b),
    };
    model.check_finite()?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    checkpoint_from_json(&std::fs::read_to_string(path)?)
}
