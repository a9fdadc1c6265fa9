//! Independent checks: central finite differences of the free energy, a
//! plain feedforward backprop reference, and an empirical error covariance.
//!
//! The finite-difference and backprop code paths only evaluate energies and
//! forward passes; they never call the analytic gradient routines they are
//! used to check.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dynamics::{activity_gradients, descent_step_bound, precision_gradient, total_free_energy, weight_gradient};
use crate::error::{Error, Result};
use crate::linalg::{frobenius, reconstruct, spd_inverse, sym_eigen, symmetrize};
use crate::network::{
    build_network, Activation, ActivityInit, Coordinate, NetworkSpec, Orientation, PCNetwork, Precision,
    PrecisionMode, PriorSpec, SublayerSpec,
};
use crate::par;
use crate::train::{step_minibatch, Mode, TrainingConfig};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_KINK_RADIUS: f64 = 1e-3;

/// A block of network variables.
#[derive(Clone, Debug, PartialEq)]
pub enum VariableSelector {
    Activity { layer: usize },
    Weight { gap: usize, sublayer: usize },
    Bias { gap: usize, sublayer: usize },
    Precision { layer: usize },
    Coordinates(Vec<Coordinate>),
}

impl VariableSelector {
    /// Every scalar coordinate of the block, row-major.
    pub fn coordinates(&self, net: &PCNetwork) -> Result<Vec<Coordinate>> {
        let layers = net.depth() + 1;
        let layer_ok = |l: usize| {
            if l < layers {
                Ok(())
            } else {
                Err(Error::LayerOutOfRange { index: l, count: layers })
            }
        };
        let sub_ok = |gap: usize, sublayer: usize| {
            if gap >= net.depth() {
                return Err(Error::LayerOutOfRange {
                    index: gap,
                    count: net.depth(),
                });
            }
            let n = net.predictor(gap).sublayers.len();
            if sublayer >= n {
                return Err(Error::Shape(format!("gap {gap} has {n} sublayers, asked for {sublayer}")));
            }
            Ok(())
        };
        Ok(match *self {
            Self::Activity { layer } => {
                layer_ok(layer)?;
                let (rows, cols) = net.layer(layer).mu.dim();
                grid(rows, cols, |row, col| Coordinate::Activity { layer, row, col })
            }
            Self::Weight { gap, sublayer } => {
                sub_ok(gap, sublayer)?;
                let (rows, cols) = net.predictor(gap).sublayers[sublayer].weights.dim();
                grid(rows, cols, |row, col| Coordinate::Weight {
                    gap,
                    sublayer,
                    row,
                    col,
                })
            }
            Self::Bias { gap, sublayer } => {
                sub_ok(gap, sublayer)?;
                let s = &net.predictor(gap).sublayers[sublayer];
                let n = s
                    .bias
                    .as_ref()
                    .ok_or_else(|| Error::Shape(format!("sublayer {sublayer} of gap {gap} has no bias")))?
                    .len();
                (0..n)
                    .map(|index| Coordinate::Bias { gap, sublayer, index })
                    .collect()
            }
            Self::Precision { layer } => {
                layer_ok(layer)?;
                let p = &net.layer(layer).precision;
                let d = p.dim();
                match p.mode() {
                    PrecisionMode::Full => grid(d, d, |row, col| Coordinate::Precision { layer, row, col }),
                    PrecisionMode::Diagonal => (0..d)
                        .map(|i| Coordinate::Precision { layer, row: i, col: i })
                        .collect(),
                }
            }
            Self::Coordinates(ref cs) => {
                for &c in cs {
                    check_coordinate(net, c)?;
                }
                cs.clone()
            }
        })
    }
}

fn grid(rows: usize, cols: usize, f: impl Fn(usize, usize) -> Coordinate) -> Vec<Coordinate> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect()
}

fn check_coordinate(net: &PCNetwork, c: Coordinate) -> Result<()> {
    let bad = || Error::Shape(format!("coordinate {} is out of range", describe(c)));
    let fits = |dim: (usize, usize), r: usize, col: usize| r < dim.0 && col < dim.1;
    let ok = match c {
        Coordinate::Activity { layer, row, col } => {
            layer <= net.depth() && fits(net.layer(layer).mu.dim(), row, col)
        }
        Coordinate::Weight {
            gap,
            sublayer,
            row,
            col,
        } => {
            gap < net.depth()
                && sublayer < net.predictor(gap).sublayers.len()
                && fits(net.predictor(gap).sublayers[sublayer].weights.dim(), row, col)
        }
        Coordinate::Bias { gap, sublayer, index } => {
            gap < net.depth()
                && sublayer < net.predictor(gap).sublayers.len()
                && net.predictor(gap).sublayers[sublayer]
                    .bias
                    .as_ref()
                    .is_some_and(|b| index < b.len())
        }
        Coordinate::Precision { layer, row, col } => {
            layer <= net.depth() && {
                let p = &net.layer(layer).precision;
                row < p.dim() && col < p.dim() && (p.mode() == PrecisionMode::Full || row == col)
            }
        }
    };
    if ok {
        Ok(())
    } else {
        Err(bad())
    }
}

/// Short human-readable name of a coordinate.
pub fn describe(c: Coordinate) -> String {
    match c {
        Coordinate::Activity { layer, row, col } => format!("mu[{layer}][{row},{col}]"),
        Coordinate::Weight {
            gap,
            sublayer,
            row,
            col,
        } => format!("theta[{gap}.{sublayer}][{row},{col}]"),
        Coordinate::Bias { gap, sublayer, index } => format!("bias[{gap}.{sublayer}][{index}]"),
        Coordinate::Precision { layer, row, col } => format!("pi[{layer}][{row},{col}]"),
    }
}

/// Central differences of the total free energy.
#[derive(Clone, Debug)]
pub struct FdGradient {
    pub coordinates: Vec<Coordinate>,
    /// `∂F/∂x` for each coordinate.
    pub values: Vec<f64>,
    /// False for coordinates the update rules never move (clamped activities).
    pub applied: Vec<bool>,
}

fn energy_at(net: &PCNetwork, c: Coordinate, value: f64) -> Result<f64> {
    let mut probe = net.clone();
    probe.set(c, value);
    probe.refresh_errors()?;
    Ok(total_free_energy(&probe)?.total)
}

/// `[F(x + h) − F(x − h)] / 2h` per selected coordinate, computed in parallel.
pub fn fd_gradient(net: &PCNetwork, selector: &VariableSelector, h: f64) -> Result<FdGradient> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let coordinates = selector.coordinates(net)?;
    let values = par::map_collect(&coordinates, |&c| {
        let x = net.get(c);
        Ok((energy_at(net, c, x + h)? - energy_at(net, c, x - h)?) / (2.0 * h))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let applied = coordinates
        .iter()
        .map(|c| match *c {
            Coordinate::Activity { layer, .. } => !net.layer(layer).clamped,
            _ => true,
        })
        .collect();
    Ok(FdGradient {
        coordinates,
        values,
        applied,
    })
}

/// Deliberate corruption of an analytic gradient, for testing the checker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Fault {
    ScaleWeightGradient { gap: usize, sublayer: usize, factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    pub kink_radius: f64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: DEFAULT_FD_STEP,
            tolerance: DEFAULT_TOLERANCE,
            kink_radius: DEFAULT_KINK_RADIUS,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariableCheck {
    /// e.g. `mu[1]`, `theta[0.1]`, `bias[0.0]`, `pi[2]`.
    pub variable: String,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<String>,
    pub checked: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub variables: Vec<VariableCheck>,
    pub excluded: usize,
    pub pass: bool,
    /// Variable with the largest error above tolerance.
    pub culprit: Option<String>,
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn near_kink(net: &PCNetwork, gap: usize, sublayers: std::ops::RangeFrom<usize>, row: Option<usize>, r: f64) -> bool {
    let trace = &net.traces()[gap];
    net.predictor(gap).sublayers[sublayers.clone()]
        .iter()
        .zip(&trace.pre[sublayers])
        .any(|(s, pre)| {
            s.activation.has_kink()
                && match row {
                    Some(b) => pre.row(b).iter().any(|a| a.abs() < r),
                    None => pre.iter().any(|a| a.abs() < r),
                }
        })
}

fn excluded(net: &PCNetwork, c: Coordinate, radius: f64) -> bool {
    match c {
        Coordinate::Activity { layer, row, .. } => layer > 0 && near_kink(net, layer - 1, 0.., Some(row), radius),
        Coordinate::Weight { gap, sublayer, .. } | Coordinate::Bias { gap, sublayer, .. } => {
            near_kink(net, gap, sublayer.., None, radius)
        }
        Coordinate::Precision { .. } => false,
    }
}

/// Compares every analytic update against finite differences.
///
/// Updates are gradients of `−F`; activity updates are per datum (the batch
/// size times `−∂F/∂μ`) and precision updates equal `−2 ∂F/∂Π`. Coordinates
/// whose perturbation could cross a ReLU kink are skipped and counted.
pub fn check_gradients(net: &PCNetwork, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut net = net.clone();
    net.refresh_errors()?;
    let net = &net;
    let depth = net.depth();
    let batch = net.batch_size() as f64;
    let d_mu = activity_gradients(net)?;

    // (name, selector, analytic values row-major, scale fd -> analytic)
    let mut blocks: Vec<(String, VariableSelector, Vec<f64>, f64)> = Vec::new();
    for (l, g) in d_mu.iter().enumerate() {
        if !net.layer(l).clamped {
            blocks.push((format!("mu[{l}]"), VariableSelector::Activity { layer: l }, g.iter().copied().collect(), -batch));
        }
    }
    for gap in 0..depth {
        let grads = weight_gradient(net, gap)?;
        for (s, g) in grads.iter().enumerate() {
            let factor = match config.fault {
                Some(Fault::ScaleWeightGradient {
                    gap: fg,
                    sublayer: fs,
                    factor,
                }) if fg == gap && fs == s => factor,
                _ => 1.0,
            };
            blocks.push((
                format!("theta[{gap}.{s}]"),
                VariableSelector::Weight { gap, sublayer: s },
                g.weights.iter().map(|v| v * factor).collect(),
                -1.0,
            ));
            if let Some(b) = &g.bias {
                blocks.push((
                    format!("bias[{gap}.{s}]"),
                    VariableSelector::Bias { gap, sublayer: s },
                    b.to_vec(),
                    -1.0,
                ));
            }
        }
    }
    for l in 0..=depth {
        if net.has_own_error(l) {
            let layer = net.layer(l);
            let g = precision_gradient(&layer.epsilon, &layer.precision)?;
            let values = match layer.precision.mode() {
                PrecisionMode::Full => g.iter().copied().collect(),
                PrecisionMode::Diagonal => g.diag().to_vec(),
            };
            blocks.push((format!("pi[{l}]"), VariableSelector::Precision { layer: l }, values, -2.0));
        }
    }

    let mut variables = Vec::with_capacity(blocks.len());
    for (name, selector, analytic, scale) in blocks {
        let fd = fd_gradient(net, &selector, config.h)?;
        let mut check = VariableCheck {
            variable: name,
            max_rel_error: 0.0,
            worst_coordinate: None,
            checked: 0,
            excluded: 0,
        };
        for ((&c, &numeric), &a) in fd.coordinates.iter().zip(&fd.values).zip(&analytic) {
            if excluded(net, c, config.kink_radius) {
                check.excluded += 1;
                continue;
            }
            check.checked += 1;
            let err = relative_error(a, scale * numeric);
            if err > check.max_rel_error || check.worst_coordinate.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst_coordinate = Some(describe(c));
            }
        }
        variables.push(check);
    }
    let excluded = variables.iter().map(|v| v.excluded).sum();
    let culprit = variables
        .iter()
        .filter(|v| v.max_rel_error > config.tolerance)
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|v| v.variable.clone());
    Ok(GradCheckReport {
        h: config.h,
        tolerance: config.tolerance,
        pass: culprit.is_none(),
        variables,
        excluded,
        culprit,
    })
}

/// Gradients of the half mean-squared error of the feedforward reading.
#[derive(Clone, Debug, PartialEq)]
pub struct BackpropGradients {
    /// `∂loss/∂W` for each gap.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Option<Array1<f64>>>,
    pub loss: f64,
}

fn require_layerwise(net: &PCNetwork) -> Result<()> {
    if let Some(gap) = net.predictors().iter().position(|p| p.sublayers.len() != 1) {
        return Err(Error::Unsupported(format!(
            "backprop comparison needs one sublayer per gap; gap {gap} has {}",
            net.predictor(gap).sublayers.len()
        )));
    }
    Ok(())
}

/// Forward pass from the top layer down to layer 0; returns the activations
/// `h_L … h_0` (indexed by layer) and pre-activations `a_{L-1} … a_0`.
fn feedforward(net: &PCNetwork, input: &Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let depth = net.depth();
    let mut h = vec![Array2::zeros((0, 0)); depth + 1];
    let mut a = vec![Array2::zeros((0, 0)); depth];
    h[depth] = input.clone();
    for gap in (0..depth).rev() {
        let s = &net.predictor(gap).sublayers[0];
        let mut pre = h[gap + 1].dot(&s.weights.t());
        if let Some(b) = &s.bias {
            pre += b;
        }
        h[gap] = pre.mapv(|v| s.activation.apply(v));
        a[gap] = pre;
    }
    (h, a)
}

/// Backprop through the network read as a feedforward map from the top layer
/// (input) to layer 0 (output), loss `½ mean_b ‖target − h_0‖²`.
pub fn backprop_reference(net: &PCNetwork, input: &Array2<f64>, target: &Array2<f64>) -> Result<BackpropGradients> {
    require_layerwise(net)?;
    let depth = net.depth();
    let top = net.layer(depth).dim();
    let bottom = net.layer(0).dim();
    if input.ncols() != top || target.ncols() != bottom || input.nrows() != target.nrows() || input.nrows() == 0 {
        return Err(Error::Shape(format!(
            "input {:?} and target {:?} do not fit a {top} -> {bottom} network",
            input.dim(),
            target.dim()
        )));
    }
    let batch = input.nrows() as f64;
    let (h, a) = feedforward(net, input);
    let residual = &h[0] - target;
    let loss = 0.5 * residual.iter().map(|v| v * v).sum::<f64>() / batch;
    let mut weights = vec![Array2::zeros((0, 0)); depth];
    let mut biases = vec![None; depth];
    let mut upstream = residual;
    for gap in 0..depth {
        let s = &net.predictor(gap).sublayers[0];
        let delta = &upstream * &a[gap].mapv(|v| s.activation.derivative(v));
        weights[gap] = delta.t().dot(&h[gap + 1]) / batch;
        if s.bias.is_some() {
            biases[gap] = Some(delta.sum_axis(ndarray::Axis(0)) / batch);
        }
        upstream = delta.dot(&s.weights);
    }
    Ok(BackpropGradients { weights, biases, loss })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceConfig {
    /// Stop once the activity-gradient norm falls to this value.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Activity step; `None` uses the conservative descent bound.
    pub alpha_m: Option<f64>,
    /// Π_0 = this · I on the output layer; every other precision is I.
    pub output_precision: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 10_000,
            alpha_m: None,
            output_precision: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapComparison {
    pub gap: usize,
    /// `None` when either update is the zero vector.
    pub cosine: Option<f64>,
    pub exact_match: bool,
    pub predprop_norm: f64,
    pub backprop_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub gaps: Vec<GapComparison>,
    /// Frobenius norm of `target − feedforward output`.
    pub output_error_norm: f64,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
}

impl EquivalenceReport {
    /// Smallest cosine over the gaps; exact matches count as 1.
    pub fn min_cosine(&self) -> f64 {
        self.gaps
            .iter()
            .map(|g| if g.exact_match { 1.0 } else { g.cosine.unwrap_or(0.0) })
            .fold(1.0, f64::min)
    }
}

fn flatten(w: &Array2<f64>, b: Option<&Array1<f64>>) -> Vec<f64> {
    w.iter().chain(b.into_iter().flatten()).copied().collect()
}

/// Clamps `input` at the top layer and `target` at layer 0, sets identity
/// precisions (optionally scaled on the output layer), initialises hidden layers by the top-down sweep, relaxes the
/// activities with weights and precisions frozen, and compares the resulting
/// weight updates to the negated backprop gradients gap by gap.
pub fn compare_with_backprop(
    net: &PCNetwork,
    input: &Array2<f64>,
    target: &Array2<f64>,
    config: &EquivalenceConfig,
) -> Result<EquivalenceReport> {
    let bp = backprop_reference(net, input, target)?;
    let depth = net.depth();
    let mut pc = net.clone();
    for l in 0..=depth {
        pc.clamp_layer(l, None)?;
    }
    for l in 0..=depth {
        let dim = pc.layer(l).dim();
        let mode = pc.layer(l).precision.mode();
        let p = match Precision::identity(dim, mode) {
            Precision::Full(m) if l == 0 => Precision::Full(m * config.output_precision),
            Precision::Diagonal(d) if l == 0 => Precision::Diagonal(d * config.output_precision),
            p => p,
        };
        pc.set_precision(l, p)?;
    }
    pc.clamp_layer(depth, Some(input.clone()))?;
    pc.clamp_layer(0, Some(target.clone()))?;
    pc.init_activities(ActivityInit::TopDown, 0.0, 0)?;

    let (h, _) = feedforward(net, input);
    let output_error_norm = frobenius(&(target - &h[0]));

    let alpha = config.alpha_m.unwrap_or_else(|| descent_step_bound(&pc));
    let mut iterations = 0;
    let mut final_grad_norm;
    loop {
        pc.refresh_errors()?;
        let grads = activity_gradients(&pc)?;
        final_grad_norm = grads.iter().map(|g| frobenius(g).powi(2)).sum::<f64>().sqrt();
        if final_grad_norm <= config.tolerance || iterations == config.max_iterations {
            break;
        }
        for l in 1..depth {
            let mut mu = pc.layer(l).mu.clone();
            mu.scaled_add(alpha, &grads[l]);
            pc.set_activities(l, mu)?;
        }
        iterations += 1;
    }
    pc.check_finite()?;

    let mut gaps = Vec::with_capacity(depth);
    for gap in 0..depth {
        let update = weight_gradient(&pc, gap)?;
        let p = flatten(&update[0].weights, update[0].bias.as_ref());
        let q: Vec<f64> = flatten(&bp.weights[gap], bp.biases[gap].as_ref())
            .into_iter()
            .map(|v| -v)
            .collect();
        let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let cosine = (pn > 0.0 && qn > 0.0)
            .then(|| (p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (pn * qn)).clamp(-1.0, 1.0));
        gaps.push(GapComparison {
            gap,
            cosine,
            exact_match: diff <= 1e-12 * pn.max(qn),
            predprop_norm: pn,
            backprop_norm: qn,
        });
    }
    Ok(EquivalenceReport {
        gaps,
        output_error_norm,
        iterations,
        final_grad_norm,
        converged: final_grad_norm <= config.tolerance,
    })
}

/// `mean_b ε εᵀ`, symmetrised.
pub fn empirical_error_covariance(errors: &Array2<f64>) -> Result<Array2<f64>> {
    if errors.nrows() == 0 {
        return Err(Error::Shape("empirical covariance of an empty batch".into()));
    }
    Ok(symmetrize(&(errors.t().dot(errors) / errors.nrows() as f64)))
}

/// Shape of the random networks used by the oracle suites.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RandomNetConfig {
    pub max_dim: usize,
    pub max_batch: usize,
    pub max_depth: usize,
    pub max_sublayers: usize,
    /// Hidden activations are drawn from this list.
    pub activations: Vec<Activation>,
}

impl Default for RandomNetConfig {
    fn default() -> Self {
        Self {
            max_dim: 4,
            max_batch: 3,
            max_depth: 3,
            max_sublayers: 2,
            activations: vec![Activation::Linear, Activation::Relu],
        }
    }
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let a = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
    symmetrize(&(a.dot(&a.t()) / d as f64 + Array2::<f64>::eye(d) * 0.5))
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// A random network in a random state: activities, precisions and the prior
/// are all drawn from `seed`. Layer 0 is always clamped; the top layer is
/// clamped at random.
pub fn random_network(seed: u64, config: &RandomNetConfig) -> Result<PCNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=config.max_depth);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=config.max_dim)).collect();
    let pick = |rng: &mut ChaCha8Rng| config.activations[rng.random_range(0..config.activations.len())];
    let predictor_specs = (0..depth)
        .map(|_| {
            let n = rng.random_range(1..=config.max_sublayers);
            let mut chain: Vec<SublayerSpec> = (0..n - 1)
                .map(|_| SublayerSpec::new(rng.random_range(1..=config.max_dim), pick(&mut rng)))
                .collect();
            chain.push(SublayerSpec::new(0, pick(&mut rng)));
            chain
        })
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(gap, mut chain)| {
            chain.last_mut().expect("non-empty chain").output_dim = dims[gap];
            chain
        })
        .collect();
    let mode = if rng.random_bool(0.5) {
        PrecisionMode::Full
    } else {
        PrecisionMode::Diagonal
    };
    let top = dims[depth];
    let prior_precision = match mode {
        PrecisionMode::Full => random_spd(&mut rng, top),
        PrecisionMode::Diagonal => Array2::from_diag(&Array1::from_shape_fn(top, |_| rng.random_range(0.5..2.0))),
    };
    let prior = PriorSpec {
        mean: (0..top).map(|_| rng.sample(StandardNormal)).collect(),
        precision: prior_precision.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    let spec = NetworkSpec {
        layer_dims: dims.clone(),
        predictor_specs,
        precision_mode: mode,
        prior,
        seed: rng.random(),
        bias: rng.random_bool(0.5),
        orientation: Orientation::Generative,
    };
    let mut net = build_network(spec)?;
    let batch = rng.random_range(1..=config.max_batch);
    for gap in 0..depth {
        for s in 0..net.predictor(gap).sublayers.len() {
            if let Some(b) = net.predictor(gap).sublayers[s].bias.as_ref() {
                let n = b.len();
                net.set_bias(gap, s, Array1::from_shape_fn(n, |_| 0.3 * rng.sample::<f64, _>(StandardNormal)))?;
            }
        }
    }
    net.clamp_layer(0, Some(gaussian(&mut rng, (batch, dims[0]))))?;
    let clamp_top = rng.random_bool(0.5);
    for l in 1..=depth {
        let values = gaussian(&mut rng, (batch, dims[l]));
        if l == depth && clamp_top {
            net.clamp_layer(l, Some(values))?;
        } else {
            net.set_activities(l, values)?;
        }
    }
    for l in 0..depth {
        let p = match mode {
            PrecisionMode::Full => Precision::Full(random_spd(&mut rng, dims[l])),
            PrecisionMode::Diagonal => {
                Precision::Diagonal(Array1::from_shape_fn(dims[l], |_| rng.random_range(0.5..2.0)))
            }
        };
        net.set_precision(l, p)?;
    }
    net.refresh_errors()?;
    Ok(net)
}

/// Gradient checks over many random networks, in parallel.
pub fn gradient_suite(seeds: &[u64], nets: &RandomNetConfig, check: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    par::map_collect(seeds, |&seed| check_gradients(&random_network(seed, nets)?, check))
        .into_iter()
        .collect()
}

/// Random layerwise network for the backprop comparison: input at the top,
/// output at layer 0, hidden activation `hidden`, linear output.
pub fn random_equivalence_case(
    seed: u64,
    depth: usize,
    hidden: Activation,
    delta_norm: f64,
) -> Result<(PCNetwork, Array2<f64>, Array2<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=4)).collect();
    let spec = NetworkSpec::layered(&dims, hidden, Activation::Linear)
        .with_orientation(Orientation::Discriminative)
        .with_seed(rng.random());
    let net = build_network(spec)?;
    let batch = rng.random_range(1..=3);
    let input = gaussian(&mut rng, (batch, dims[depth]));
    let (h, _) = feedforward(&net, &input);
    let delta = gaussian(&mut rng, (batch, dims[0]));
    let scale = delta_norm / frobenius(&delta).max(f64::MIN_POSITIVE);
    let target = &h[0] + &(delta * scale);
    Ok((net, input, target))
}

/// Outcome of streaming Gaussian errors through the precision update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrecisionConvergence {
    pub relative_error: f64,
    pub samples: usize,
    pub covariance_estimate: Vec<Vec<f64>>,
    pub learned_covariance: Vec<Vec<f64>>,
}

/// Draws `batches × batch_size` zero-mean Gaussian errors with covariance
/// `cov`, feeds them as prediction errors of a frozen network (activities
/// and weights fixed) and runs `updates_per_batch` precision updates per
/// batch. Reports `‖Π⁻¹ − Ĉ‖_F / ‖Ĉ‖_F` with `Ĉ` the empirical covariance of
/// the whole stream.
pub fn precision_convergence(
    cov: &Array2<f64>,
    batches: usize,
    batch_size: usize,
    updates_per_batch: usize,
    alpha_s: f64,
    seed: u64,
) -> Result<PrecisionConvergence> {
    let d = cov.nrows();
    let (values, vectors) = sym_eigen(cov);
    if values.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotSpd("error covariance".into()));
    }
    let root = reconstruct(&values.mapv(f64::sqrt), &vectors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetworkSpec::layered(&[d, 1], Activation::Linear, Activation::Linear).with_seed(seed);
    let mut net = build_network(spec)?;
    net.set_weights(0, 0, Array2::zeros((d, 1)))?;
    let config = TrainingConfig {
        alpha_m: 0.0,
        alpha_s,
        alpha_t: 0.0,
        u_m: updates_per_batch,
        batch_size,
        mode: Mode::Supervised,
        update_precision: true,
        init_sigma: 0.0,
        ..TrainingConfig::default()
    };
    let mut stream = Array2::zeros((batches * batch_size, d));
    for b in 0..batches {
        let z = Array2::from_shape_fn((batch_size, d), |_| StandardNormal.sample(&mut rng));
        let errors = z.dot(&root);
        stream
            .slice_mut(ndarray::s![b * batch_size..(b + 1) * batch_size, ..])
            .assign(&errors);
        step_minibatch(&mut net, &errors, Some(&Array2::zeros((batch_size, 1))), &config, b)?;
    }
    let c_hat = empirical_error_covariance(&stream)?;
    let learned = spd_inverse(&net.layer(0).precision.to_dense())?;
    let relative_error = frobenius(&(&learned - &c_hat)) / frobenius(&c_hat);
    let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok(PrecisionConvergence {
        relative_error,
        samples: batches * batch_size,
        covariance_estimate: rows(&c_hat),
        learned_covariance: rows(&learned),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear(dims: &[usize], seed: u64) -> PCNetwork {
        build_network(NetworkSpec::layered(dims, Activation::Linear, Activation::Linear).with_seed(seed)).unwrap()
    }

    #[test]
    fn fd_on_quadratic_scalar_net() {
        let mut net = linear(&[1, 1], 0);
        net.set_weights(0, 0, array![[2.0]]).unwrap();
        net.clamp_layer(0, Some(array![[7.0]])).unwrap();
        net.set_activities(1, array![[3.0]]).unwrap();
        let fd = fd_gradient(&net, &VariableSelector::Activity { layer: 1 }, 1e-5).unwrap();
        // −∂F/∂μ_1 = −1
        assert!(relative_error(-fd.values[0], -1.0) <= 1e-9);
        assert!(fd.applied[0]);
        let clamped = fd_gradient(&net, &VariableSelector::Activity { layer: 0 }, 1e-5).unwrap();
        assert!(!clamped.applied[0]);
        assert!(fd_gradient(&net, &VariableSelector::Activity { layer: 1 }, 0.0).is_err());
        assert!(fd_gradient(&net, &VariableSelector::Activity { layer: 5 }, 1e-5).is_err());
    }

    #[test]
    fn linear_net_passes_and_fault_is_caught() {
        let mut net = linear(&[2, 3, 2], 11);
        net.reset_batch(2);
        net.clamp_layer(0, Some(array![[0.3, -1.2], [0.8, 0.1]])).unwrap();
        net.set_activities(1, array![[0.5, -0.4, 1.1], [0.2, 0.9, -0.7]]).unwrap();
        net.set_activities(2, array![[1.0, -0.5], [-0.3, 0.6]]).unwrap();
        let report = check_gradients(&net, &GradCheckConfig::default()).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.excluded, 0);
        let bad = GradCheckConfig {
            fault: Some(Fault::ScaleWeightGradient {
                gap: 1,
                sublayer: 0,
                factor: 1.1,
            }),
            ..GradCheckConfig::default()
        };
        let report = check_gradients(&net, &bad).unwrap();
        assert!(!report.pass);
        assert_eq!(report.culprit.as_deref(), Some("theta[1.0]"));
    }

    #[test]
    fn relu_net_passes() {
        let nets = RandomNetConfig {
            activations: vec![Activation::Relu],
            ..RandomNetConfig::default()
        };
        for seed in 0..10 {
            let report = check_gradients(&random_network(seed, &nets).unwrap(), &GradCheckConfig::default()).unwrap();
            assert!(report.pass, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn backprop_scalar_hand_chain_rule() {
        let mut net = linear(&[1, 1], 0);
        net.set_weights(0, 0, array![[1.5]]).unwrap();
        let g = backprop_reference(&net, &array![[2.0]], &array![[1.0]]).unwrap();
        assert_eq!(g.weights[0], array![[(1.5 * 2.0 - 1.0) * 2.0]]);
        let zero = backprop_reference(&net, &array![[2.0]], &array![[3.0]]).unwrap();
        assert_eq!(zero.weights[0], array![[0.0]]);
    }

    #[test]
    fn backprop_matches_fd_of_its_loss() {
        let net = linear(&[2, 3, 2], 4);
        let input = array![[0.4, -0.9], [1.3, 0.2]];
        let target = array![[0.1, 0.5], [-0.7, 0.3]];
        let g = backprop_reference(&net, &input, &target).unwrap();
        let h = 1e-6;
        for gap in 0..2 {
            let (rows, cols) = net.predictor(gap).sublayers[0].weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let coord = Coordinate::Weight {
                        gap,
                        sublayer: 0,
                        row: r,
                        col: c,
                    };
                    let loss = |v: f64| {
                        let mut n = net.clone();
                        n.set(coord, v);
                        backprop_reference(&n, &input, &target).unwrap().loss
                    };
                    let x = net.get(coord);
                    let fd = (loss(x + h) - loss(x - h)) / (2.0 * h);
                    assert!((fd - g.weights[gap][[r, c]]).abs() <= 1e-9, "{fd} vs {}", g.weights[gap][[r, c]]);
                }
            }
        }
    }

    #[test]
    fn multi_sublayer_backprop_unsupported() {
        let spec = NetworkSpec {
            predictor_specs: vec![vec![SublayerSpec::new(3, Activation::Relu), SublayerSpec::new(2, Activation::Linear)]],
            ..NetworkSpec::layered(&[2, 2], Activation::Linear, Activation::Linear)
        };
        let net = build_network(spec).unwrap();
        let err = backprop_reference(&net, &array![[1.0, 0.0]], &array![[0.0, 1.0]]).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn single_gap_is_exact() {
        for (seed, act) in [(1, Activation::Linear), (2, Activation::Relu), (3, Activation::Tanh)] {
            let net = build_network(
                NetworkSpec::layered(&[3, 2], act, act)
                    .with_orientation(Orientation::Discriminative)
                    .with_seed(seed),
            )
            .unwrap();
            let report =
                compare_with_backprop(&net, &array![[0.5, -1.0]], &array![[0.2, 0.1, -0.4]], &EquivalenceConfig::default())
                    .unwrap();
            let gap = &report.gaps[0];
            assert!(gap.exact_match, "{report:?}");
            assert!((gap.cosine.unwrap() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_error_reports_exact_match_without_cosine() {
        let (net, input, target) = random_equivalence_case(5, 2, Activation::Linear, 0.0).unwrap();
        let report = compare_with_backprop(&net, &input, &target, &EquivalenceConfig::default()).unwrap();
        assert!(report.converged);
        for g in &report.gaps {
            assert!(g.exact_match);
            assert!(g.cosine.is_none());
        }
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(empirical_error_covariance(&array![[1.0], [-1.0]]).unwrap(), array![[1.0]]);
        assert_eq!(empirical_error_covariance(&Array2::zeros((3, 2))).unwrap(), Array2::<f64>::zeros((2, 2)));
        assert_eq!(
            empirical_error_covariance(&array![[2.0, -3.0]]).unwrap(),
            array![[4.0, -6.0], [-6.0, 9.0]]
        );
        assert!(empirical_error_covariance(&Array2::zeros((0, 2))).is_err());
    }
}
