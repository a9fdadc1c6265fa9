//! Minibatch schedule: clamp, initialise, then `u_m` rounds of
//! (predict + errors) followed by a parallel update of activities,
//! precisions and weights from that same error snapshot.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dynamics::{
    activity_gradients, per_datum_energy, precision_gradient, total_free_energy, weight_gradient, EnergyReport,
    SublayerGradient,
};
use crate::error::{Error, Result};
use crate::linalg::frobenius;
use crate::network::{ActivityInit, Orientation, PCNetwork, DEFAULT_INIT_SIGMA};

/// Gradient-norm threshold for the optional early stop of the inner loop.
pub const EARLY_STOP_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Data and labels both clamped.
    #[default]
    Supervised,
    /// Only data clamped; the cause layer is inferred under its prior.
    Unsupervised,
    /// Like `Unsupervised` with the weight learning rate forced to zero.
    InferenceOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Activity learning rate α_m.
    pub alpha_m: f64,
    /// Precision learning rate α_s.
    pub alpha_s: f64,
    /// Weight learning rate α_t.
    pub alpha_t: f64,
    /// Inner updates per minibatch u_m.
    pub u_m: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: Mode,
    pub update_precision: bool,
    pub activity_init: ActivityInit,
    /// Noise level for prior initialisation.
    pub init_sigma: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop the inner loop once the gradient norm drops below 1e-8.
    pub early_stop: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha_m: 1.0,
            alpha_s: 1.0,
            alpha_t: 0.01,
            u_m: 20,
            batch_size: 32,
            epochs: 10,
            mode: Mode::Supervised,
            update_precision: true,
            activity_init: ActivityInit::Prior,
            init_sigma: DEFAULT_INIT_SIGMA,
            seed: 0,
            shuffle: true,
            early_stop: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_m", self.alpha_m),
            ("alpha_s", self.alpha_s),
            ("alpha_t", self.alpha_t),
            ("init_sigma", self.init_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.u_m == 0 {
            return Err(Error::Config("u_m must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Weight learning rate actually applied; zero in inference-only mode.
    pub fn effective_alpha_t(&self) -> f64 {
        match self.mode {
            Mode::InferenceOnly => 0.0,
            _ => self.alpha_t,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GradNorms {
    pub mu: f64,
    pub theta: f64,
    pub pi: f64,
}

impl GradNorms {
    pub fn total(&self) -> f64 {
        (self.mu * self.mu + self.theta * self.theta + self.pi * self.pi).sqrt()
    }
}

/// Energy and gradient norms at the error snapshot of one inner iteration,
/// before its update is applied.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InnerStep {
    pub inner_iter: usize,
    pub total_energy: f64,
    pub per_layer: Vec<f64>,
    pub grad_norms: GradNorms,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step_index: usize,
    pub epoch: usize,
    pub batch: usize,
    pub energy_before: f64,
    pub energy_after: f64,
    pub per_layer_energy: Vec<f64>,
    pub grad_norms: GradNorms,
    pub inner: Vec<InnerStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_energy: f64,
    pub accuracy: Option<f64>,
    pub reconstruction_error: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochSummary>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// Equality of everything except timing and the checkpoint path.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.steps == other.steps && self.epochs == other.epochs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub reconstruction_error: Option<f64>,
}

/// Converged activities of an inference run.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Activities of every layer, data layer included.
    pub activities: Vec<Array2<f64>>,
    pub energy: EnergyReport,
    pub per_datum_energy: Array1<f64>,
    pub iterations: usize,
}

impl Inference {
    /// Activities of the layer that carries labels or causes.
    pub fn readout(&self, orientation: Orientation) -> &Array2<f64> {
        &self.activities[orientation.label_layer(self.activities.len() - 1)]
    }
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words.
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn resolve_init(init: ActivityInit, orientation: Orientation) -> ActivityInit {
    match (init, orientation) {
        (ActivityInit::Feedforward, Orientation::Discriminative) => ActivityInit::TopDown,
        (i, _) => i,
    }
}

fn check_state(net: &PCNetwork) -> Result<()> {
    net.check_finite()?;
    for (l, layer) in net.layers().iter().enumerate() {
        if layer.epsilon.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: l,
                variable: "prediction error".into(),
            });
        }
    }
    Ok(())
}

fn check_energy(report: &EnergyReport) -> Result<()> {
    if let Some(l) = report.per_layer.iter().position(|e| !e.is_finite()) {
        return Err(Error::NonFinite {
            layer: l,
            variable: "energy".into(),
        });
    }
    Ok(())
}

fn all_finite(m: &Array2<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

struct Rates {
    alpha_m: f64,
    alpha_s: f64,
    alpha_t: f64,
    update_precision: bool,
    early_stop: bool,
}

struct Relaxation {
    before: EnergyReport,
    after: EnergyReport,
    inner: Vec<InnerStep>,
}

/// Runs `u_m` inner iterations on an already clamped and initialised network.
fn relax(net: &mut PCNetwork, rates: &Rates, u_m: usize) -> Result<Relaxation> {
    let depth = net.depth();
    net.refresh_errors()?;
    check_state(net)?;
    let before = total_free_energy(net)?;
    check_energy(&before)?;
    let mut inner = Vec::with_capacity(u_m);
    let mut energy = before.clone();
    for i in 0..u_m {
        if i > 0 {
            net.refresh_errors()?;
            check_state(net)?;
            energy = total_free_energy(net)?;
            check_energy(&energy)?;
        }
        let snapshot: &PCNetwork = net;
        let d_mu = activity_gradients(snapshot)?;
        let d_theta: Vec<Vec<SublayerGradient>> = crate::par::map_range(depth, |g| weight_gradient(snapshot, g))
            .into_iter()
            .collect::<Result<_>>()?;
        let d_pi: Vec<Option<Array2<f64>>> = (0..=depth)
            .map(|l| {
                if snapshot.has_own_error(l) {
                    let layer = snapshot.layer(l);
                    precision_gradient(&layer.epsilon, &layer.precision).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;

        for (l, g) in d_mu.iter().enumerate() {
            if !all_finite(g) {
                return Err(Error::NonFinite {
                    layer: l,
                    variable: "activity gradient".into(),
                });
            }
        }
        for (gap, subs) in d_theta.iter().enumerate() {
            if subs
                .iter()
                .any(|s| !all_finite(&s.weights) || s.bias.as_ref().is_some_and(|b| b.iter().any(|v| !v.is_finite())))
            {
                return Err(Error::NonFinite {
                    layer: gap,
                    variable: "weight gradient".into(),
                });
            }
        }
        for (l, g) in d_pi.iter().enumerate() {
            if g.as_ref().is_some_and(|g| !all_finite(g)) {
                return Err(Error::NonFinite {
                    layer: l,
                    variable: "precision gradient".into(),
                });
            }
        }

        let norms = GradNorms {
            mu: d_mu.iter().map(|g| frobenius(g).powi(2)).sum::<f64>().sqrt(),
            theta: d_theta
                .iter()
                .flatten()
                .map(|s| {
                    frobenius(&s.weights).powi(2) + s.bias.as_ref().map_or(0.0, |b| b.iter().map(|v| v * v).sum())
                })
                .sum::<f64>()
                .sqrt(),
            pi: d_pi.iter().flatten().map(|g| frobenius(g).powi(2)).sum::<f64>().sqrt(),
        };
        inner.push(InnerStep {
            inner_iter: i,
            total_energy: energy.total,
            per_layer: energy.per_layer.clone(),
            grad_norms: norms,
        });
        if rates.early_stop && norms.total() <= EARLY_STOP_TOL {
            break;
        }

        if rates.alpha_m > 0.0 {
            for (layer, g) in net.layers_mut().iter_mut().zip(&d_mu) {
                if !layer.clamped {
                    layer.mu.scaled_add(rates.alpha_m, g);
                }
            }
        }
        if rates.update_precision && rates.alpha_s > 0.0 {
            for (layer, g) in net.layers_mut().iter_mut().zip(&d_pi) {
                if let Some(g) = g {
                    layer.precision.apply_step(g, rates.alpha_s);
                }
            }
        }
        if rates.alpha_t > 0.0 {
            for (pred, grads) in net.predictors_mut().iter_mut().zip(&d_theta) {
                for (sub, g) in pred.sublayers.iter_mut().zip(grads) {
                    sub.weights.scaled_add(rates.alpha_t, &g.weights);
                    if let (Some(b), Some(db)) = (sub.bias.as_mut(), g.bias.as_ref()) {
                        b.scaled_add(rates.alpha_t, db);
                    }
                }
            }
        }
    }
    net.refresh_errors()?;
    check_state(net)?;
    let after = total_free_energy(net)?;
    check_energy(&after)?;
    Ok(Relaxation { before, after, inner })
}

fn clamp_batch(net: &mut PCNetwork, data: &Array2<f64>, labels: Option<&Array2<f64>>) -> Result<()> {
    let depth = net.depth();
    let orientation = net.spec().orientation;
    for l in 0..=depth {
        net.clamp_layer(l, None)?;
    }
    net.clamp_layer(orientation.data_layer(depth), Some(data.clone()))?;
    if let Some(labels) = labels {
        net.clamp_layer(orientation.label_layer(depth), Some(labels.clone()))?;
    }
    Ok(())
}

/// One inference-and-learning update on a minibatch.
///
/// `labels` are clamped only in supervised mode. `step_index` seeds the
/// activity-initialisation noise.
pub fn step_minibatch(
    net: &mut PCNetwork,
    data: &Array2<f64>,
    labels: Option<&Array2<f64>>,
    config: &TrainingConfig,
    step_index: usize,
) -> Result<StepReport> {
    config.validate()?;
    let labels = match config.mode {
        Mode::Supervised => Some(labels.ok_or_else(|| Error::Data("supervised step needs labels".into()))?),
        _ => None,
    };
    clamp_batch(net, data, labels)?;
    let init = resolve_init(config.activity_init, net.spec().orientation);
    net.init_activities(init, config.init_sigma, derive_seed(config.seed, step_index as u64, 1))?;
    let rates = Rates {
        alpha_m: config.alpha_m,
        alpha_s: config.alpha_s,
        alpha_t: config.effective_alpha_t(),
        update_precision: config.update_precision,
        early_stop: config.early_stop,
    };
    let r = relax(net, &rates, config.u_m)?;
    let grad_norms = r.inner.last().map(|s| s.grad_norms).unwrap_or_default();
    Ok(StepReport {
        step_index,
        epoch: 0,
        batch: 0,
        energy_before: r.before.total,
        energy_after: r.after.total,
        per_layer_energy: r.after.per_layer,
        grad_norms,
        inner: r.inner,
    })
}

fn check_dataset(net: &PCNetwork, dataset: &Dataset, need_labels: bool) -> Result<()> {
    let depth = net.depth();
    let orientation = net.spec().orientation;
    let data_dim = net.layer(orientation.data_layer(depth)).dim();
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if dataset.features.ncols() != data_dim {
        return Err(Error::Data(format!(
            "dataset has {} feature columns, data layer has width {data_dim}",
            dataset.features.ncols()
        )));
    }
    if need_labels {
        let labels = dataset
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("labels requested but the dataset has none".into()))?;
        let label_dim = net.layer(orientation.label_layer(depth)).dim();
        if labels.ncols() != label_dim {
            return Err(Error::Data(format!(
                "dataset has {} label columns, label layer has width {label_dim}",
                labels.ncols()
            )));
        }
    }
    Ok(())
}

/// Trains for `config.epochs` epochs, reshuffling (seeded) every epoch.
pub fn train(net: &mut PCNetwork, dataset: &Dataset, config: &TrainingConfig) -> Result<TrainReport> {
    config.validate()?;
    check_dataset(net, dataset, config.mode == Mode::Supervised)?;
    let start = Instant::now();
    let n = dataset.len();
    let mut report = TrainReport::default();
    let mut step_index = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, 2));
            order.shuffle(&mut rng);
        }
        let mut energy_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let data = dataset.features.select(Axis(0), chunk);
            let labels = dataset.labels.as_ref().map(|l| l.select(Axis(0), chunk));
            let mut step = step_minibatch(net, &data, labels.as_ref(), config, step_index)?;
            step.epoch = epoch;
            step.batch = b;
            energy_sum += step.energy_after;
            batches += 1;
            report.steps.push(step);
            step_index += 1;
        }
        let metrics = evaluate(net, dataset, config)?;
        report.epochs.push(EpochSummary {
            epoch,
            mean_energy: energy_sum / batches as f64,
            accuracy: metrics.accuracy,
            reconstruction_error: metrics.reconstruction_error,
        });
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Infers activities for `data` with the weights frozen.
///
/// Data is clamped at the data layer, every other layer is free and
/// initialised per `config.activity_init`, and `u_m` activity updates run
/// (plus precision updates when enabled; these only touch the internal
/// copy). The network passed in is never modified.
pub fn infer(net: &PCNetwork, data: &Array2<f64>, config: &TrainingConfig) -> Result<Inference> {
    config.validate()?;
    let mut work = net.clone();
    clamp_batch(&mut work, data, None)?;
    let init = resolve_init(config.activity_init, work.spec().orientation);
    work.init_activities(init, config.init_sigma, derive_seed(config.seed, u64::MAX, 3))?;
    let rates = Rates {
        alpha_m: config.alpha_m,
        alpha_s: config.alpha_s,
        alpha_t: 0.0,
        update_precision: config.update_precision,
        early_stop: config.early_stop,
    };
    let r = relax(&mut work, &rates, config.u_m)?;
    let per_datum = per_datum_energy(&work)?;
    Ok(Inference {
        activities: work.layers().iter().map(|l| l.mu.clone()).collect(),
        energy: r.after,
        per_datum_energy: per_datum,
        iterations: r.inner.len(),
    })
}

/// Index of the first maximum in each row.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Supervised mode: accuracy of the argmax of the inferred label layer.
/// Otherwise: mean squared reconstruction error `Σ‖o − f(θ, μ)‖² / n` of the
/// data layer from the converged layer above it.
pub fn evaluate(net: &PCNetwork, dataset: &Dataset, config: &TrainingConfig) -> Result<Metrics> {
    let supervised = config.mode == Mode::Supervised;
    check_dataset(net, dataset, supervised)?;
    let orientation = net.spec().orientation;
    let inference = infer(net, &dataset.features, config)?;
    let n = dataset.len();
    if supervised {
        let labels = dataset.labels.as_ref().expect("checked above");
        let predicted = argmax_rows(inference.readout(orientation));
        let truth = argmax_rows(labels);
        let correct = predicted.iter().zip(&truth).filter(|(a, b)| a == b).count();
        return Ok(Metrics {
            n,
            accuracy: Some(correct as f64 / n as f64),
            reconstruction_error: None,
        });
    }
    if orientation == Orientation::Discriminative {
        return Err(Error::Data(
            "reconstruction error is undefined when data is clamped at the top layer".into(),
        ));
    }
    let prediction = crate::dynamics::predict(net.predictor(0), &inference.activities[1])?;
    let residual = &dataset.features - &prediction;
    let sq = residual.iter().map(|v| v * v).sum::<f64>();
    Ok(Metrics {
        n,
        accuracy: None,
        reconstruction_error: Some(sq / n as f64),
    })
}

/// CSV header for a network with `depth + 1` layers.
pub fn metrics_header(depth: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "batch".into(), "inner_iter".into(), "total_energy".into()];
    cols.extend((0..=depth).map(|l| format!("energy_layer_{l}")));
    cols.extend(["grad_norm_mu".into(), "grad_norm_theta".into(), "grad_norm_pi".into()]);
    cols.join(",")
}

/// One row per inner iteration of every step.
pub fn write_metrics_csv<W: Write>(report: &TrainReport, depth: usize, mut out: W) -> Result<()> {
    writeln!(out, "{}", metrics_header(depth))?;
    for step in &report.steps {
        for s in &step.inner {
            let mut row = format!("{},{},{},{}", step.epoch, step.batch, s.inner_iter, s.total_energy);
            for e in &s.per_layer {
                row.push_str(&format!(",{e}"));
            }
            row.push_str(&format!(
                ",{},{},{}",
                s.grad_norms.mu, s.grad_norms.theta, s.grad_norms.pi
            ));
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}
