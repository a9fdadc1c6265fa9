//! Network data model: layer stack, backward predictors, precisions and the
//! top-layer prior.
//!
//! Layers are numbered `0` (data) to `L` (causes). Predictor `l` maps the
//! activities of layer `l + 1` onto a prediction of layer `l`; its sublayers
//! are stored in application order, so `sublayers[0]` consumes `μ_{l+1}` and
//! the last sublayer emits the prediction.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Lower eigenvalue clamp for every precision matrix.
pub const LAMBDA_MIN: f64 = 1e-6;
/// Upper eigenvalue clamp for every precision matrix.
pub const LAMBDA_MAX: f64 = 1e6;
/// Default standard deviation of the activity noise used by prior initialisation.
pub const DEFAULT_INIT_SIGMA: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x`. ReLU uses subgradient 0 at exactly 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn has_kink(self) -> bool {
        matches!(self, Activation::Relu)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    #[default]
    Full,
    Diagonal,
}

/// Which end of the stack receives the data.
///
/// `Generative` clamps data at layer 0 and reads labels / causes at layer `L`.
/// `Discriminative` swaps the two ends: data is clamped at layer `L` and the
/// top-down predictions form a feedforward map onto labels at layer 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    #[default]
    Generative,
    Discriminative,
}

impl Orientation {
    pub fn data_layer(self, depth: usize) -> usize {
        match self {
            Orientation::Generative => 0,
            Orientation::Discriminative => depth,
        }
    }

    pub fn label_layer(self, depth: usize) -> usize {
        match self {
            Orientation::Generative => depth,
            Orientation::Discriminative => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SublayerSpec {
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Explicit input width; inferred from the previous sublayer when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
}

impl SublayerSpec {
    pub fn new(output_dim: usize, activation: Activation) -> Self {
        Self {
            output_dim,
            activation,
            input_dim: None,
        }
    }
}

/// Gaussian prior over the deepest layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    pub precision: Vec<Vec<f64>>,
}

impl PriorSpec {
    /// Zero mean, identity precision.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            precision: (0..dim)
                .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    pub fn mean_array(&self) -> Array1<f64> {
        Array1::from(self.mean.clone())
    }

    pub fn precision_array(&self) -> Result<Array2<f64>> {
        rows_to_array(&self.precision)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[d_0, …, d_L]`: data width first, cause width last.
    pub layer_dims: Vec<usize>,
    /// One sublayer chain per gap `(l, l + 1)`.
    pub predictor_specs: Vec<Vec<SublayerSpec>>,
    #[serde(default)]
    pub precision_mode: PrecisionMode,
    pub prior: PriorSpec,
    #[serde(default)]
    pub seed: u64,
    /// Adds a trainable bias to every sublayer.
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub orientation: Orientation,
}

impl NetworkSpec {
    /// One dense sublayer per gap; the predictor of layer 0 uses `output`,
    /// every other predictor uses `hidden`.
    pub fn layered(layer_dims: &[usize], hidden: Activation, output: Activation) -> Self {
        let depth = layer_dims.len().saturating_sub(1);
        let predictor_specs = (0..depth)
            .map(|l| {
                let act = if l == 0 { output } else { hidden };
                vec![SublayerSpec::new(layer_dims[l], act)]
            })
            .collect();
        Self {
            layer_dims: layer_dims.to_vec(),
            predictor_specs,
            precision_mode: PrecisionMode::Full,
            prior: PriorSpec::standard(layer_dims.last().copied().unwrap_or(0)),
            seed: 0,
            bias: false,
            orientation: Orientation::Generative,
        }
    }

    /// `[data_dim, 256, 10]` with ReLU hidden predictions and a linear data prediction.
    pub fn default_for(data_dim: usize) -> Self {
        Self::layered(&[data_dim, 256, 10], Activation::Relu, Activation::Linear)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_precision_mode(mut self, mode: PrecisionMode) -> Self {
        self.precision_mode = mode;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn with_prior(mut self, prior: PriorSpec) -> Self {
        self.prior = prior;
        self
    }

    /// Number of gaps `L`.
    pub fn depth(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidSpec("need at least two layers (L >= 1)".into()));
        }
        if let Some(i) = self.layer_dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!("layer {i} has zero width")));
        }
        let depth = self.depth();
        if self.predictor_specs.len() != depth {
            return Err(Error::InvalidSpec(format!(
                "expected {depth} predictor chains, got {}",
                self.predictor_specs.len()
            )));
        }
        for (gap, chain) in self.predictor_specs.iter().enumerate() {
            if chain.is_empty() {
                return Err(Error::SublayerMismatch {
                    gap,
                    detail: "empty sublayer chain".into(),
                });
            }
            let mut width = self.layer_dims[gap + 1];
            for (k, sub) in chain.iter().enumerate() {
                if sub.output_dim == 0 {
                    return Err(Error::SublayerMismatch {
                        gap,
                        detail: format!("sublayer {k} has zero output width"),
                    });
                }
                if let Some(input) = sub.input_dim {
                    if input != width {
                        return Err(Error::SublayerMismatch {
                            gap,
                            detail: format!("sublayer {k} expects input {input}, receives {width}"),
                        });
                    }
                }
                width = sub.output_dim;
            }
            if width != self.layer_dims[gap] {
                return Err(Error::SublayerMismatch {
                    gap,
                    detail: format!(
                        "chain emits {width} values but layer {gap} has width {}",
                        self.layer_dims[gap]
                    ),
                });
            }
        }
        let top = self.layer_dims[depth];
        if self.prior.mean.len() != top {
            return Err(Error::InvalidSpec(format!(
                "prior mean has length {}, cause layer has width {top}",
                self.prior.mean.len()
            )));
        }
        let precision = self.prior.precision_array()?;
        if precision.dim() != (top, top) {
            return Err(Error::InvalidSpec(format!(
                "prior precision is {:?}, expected {top}x{top}",
                precision.dim()
            )));
        }
        if precision != precision.t() {
            return Err(Error::InvalidSpec("prior precision is not symmetric".into()));
        }
        let (values, _) = linalg::sym_eigen(&precision);
        if values.iter().any(|&v| !(LAMBDA_MIN..=LAMBDA_MAX).contains(&v)) {
            return Err(Error::InvalidSpec(format!(
                "prior precision eigenvalues {values} outside [{LAMBDA_MIN:e}, {LAMBDA_MAX:e}]"
            )));
        }
        if self.prior.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("prior mean is not finite".into()));
        }
        Ok(())
    }
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged matrix rows".into()));
    }
    Ok(Array2::from_shape_fn((n, m), |(i, j)| rows[i][j]))
}

pub(crate) fn array_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Per-layer precision Π = Σ⁻¹, shared across the batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Precision {
    Full(Array2<f64>),
    /// Only the diagonal is stored; off-diagonal entries are zero.
    Diagonal(Array1<f64>),
}

impl Precision {
    pub fn identity(dim: usize, mode: PrecisionMode) -> Self {
        match mode {
            PrecisionMode::Full => Precision::Full(Array2::eye(dim)),
            PrecisionMode::Diagonal => Precision::Diagonal(Array1::ones(dim)),
        }
    }

    /// Diagonal mode keeps only the diagonal of `m`.
    pub fn from_dense(m: Array2<f64>, mode: PrecisionMode) -> Self {
        match mode {
            PrecisionMode::Full => Precision::Full(m),
            PrecisionMode::Diagonal => Precision::Diagonal(m.diag().to_owned()),
        }
    }

    pub fn mode(&self) -> PrecisionMode {
        match self {
            Precision::Full(_) => PrecisionMode::Full,
            Precision::Diagonal(_) => PrecisionMode::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Precision::Full(m) => m.nrows(),
            Precision::Diagonal(d) => d.len(),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Precision::Full(m) => m.clone(),
            Precision::Diagonal(d) => Array2::from_diag(d),
        }
    }

    /// Row-wise Π ε for a batch of errors (rows are data points).
    pub fn weight(&self, eps: &Array2<f64>) -> Array2<f64> {
        match self {
            Precision::Full(m) => eps.dot(&m.t()),
            Precision::Diagonal(d) => eps * &d.view().insert_axis(Axis(0)),
        }
    }

    /// εᵀ Π ε per row.
    pub fn quadratic_rows(&self, eps: &Array2<f64>) -> Array1<f64> {
        let weighted = self.weight(eps);
        (&weighted * eps).sum_axis(Axis(1))
    }

    /// ln det Π of the symmetric part; fails when not positive definite.
    pub fn logdet(&self) -> Result<f64> {
        match self {
            Precision::Full(m) => linalg::spd_logdet(m),
            Precision::Diagonal(d) => {
                if d.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::NotSpd(String::new()));
                }
                Ok(d.iter().map(|v| v.ln()).sum())
            }
        }
    }

    /// Σ = Π⁻¹ as a dense matrix.
    pub fn covariance(&self) -> Result<Array2<f64>> {
        match self {
            Precision::Full(m) => linalg::spd_inverse(m),
            Precision::Diagonal(d) => {
                if d.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::NotSpd(String::new()));
                }
                Ok(Array2::from_diag(&d.mapv(|v| 1.0 / v)))
            }
        }
    }

    pub fn max_eigenvalue(&self) -> f64 {
        match self {
            Precision::Full(m) => linalg::max_eigenvalue(m),
            Precision::Diagonal(d) => d.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn eigenvalues(&self) -> Array1<f64> {
        match self {
            Precision::Full(m) => linalg::sym_eigen(m).0,
            Precision::Diagonal(d) => {
                let mut v = d.to_vec();
                v.sort_by(f64::total_cmp);
                Array1::from(v)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Precision::Full(m) => m.iter().all(|v| v.is_finite()),
            Precision::Diagonal(d) => d.iter().all(|v| v.is_finite()),
        }
    }

    /// Symmetrise and clamp the spectrum into `[lo, hi]`.
    pub fn project(&mut self, lo: f64, hi: f64) {
        match self {
            Precision::Full(m) => *m = crate::dynamics::project_spd(m, lo, hi),
            Precision::Diagonal(d) => d.mapv_inplace(|v| v.clamp(lo, hi)),
        }
    }

    /// Π ← project(Π + α·step). For diagonal precisions only the diagonal of
    /// `step` is used.
    pub fn apply_step(&mut self, step: &Array2<f64>, alpha: f64) {
        match self {
            Precision::Full(m) => m.scaled_add(alpha, step),
            Precision::Diagonal(d) => d.scaled_add(alpha, &step.diag()),
        }
        self.project(LAMBDA_MIN, LAMBDA_MAX);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sublayer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub activation: Activation,
}

impl Sublayer {
    pub fn new(weights: Array2<f64>, activation: Activation) -> Self {
        Self {
            weights,
            bias: None,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Row-batched pre-activation `h Wᵀ + b`.
    pub fn pre_activation(&self, input: &Array2<f64>) -> Array2<f64> {
        let mut a = input.dot(&self.weights.t());
        if let Some(b) = &self.bias {
            a += &b.view().insert_axis(Axis(0));
        }
        a
    }
}

/// Backward connection Θ of one gap: a chain of dense sublayers.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub sublayers: Vec<Sublayer>,
}

/// Intermediate values of one predictor evaluation, kept for gradients.
#[derive(Clone, Debug, Default)]
pub(crate) struct PredictorTrace {
    /// Input to each sublayer; `inputs[0]` is μ_{l+1}.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activation of each sublayer.
    pub pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Predictor {
    pub fn new(sublayers: Vec<Sublayer>) -> Self {
        Self { sublayers }
    }

    /// Width of μ_{l+1}.
    pub fn input_dim(&self) -> usize {
        self.sublayers.first().map_or(0, Sublayer::input_dim)
    }

    /// Width of the predicted layer.
    pub fn output_dim(&self) -> usize {
        self.sublayers.last().map_or(0, Sublayer::output_dim)
    }

    pub(crate) fn check_chain(&self, gap: usize) -> Result<()> {
        if self.sublayers.is_empty() {
            return Err(Error::SublayerMismatch {
                gap,
                detail: "empty sublayer chain".into(),
            });
        }
        for (k, pair) in self.sublayers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::SublayerMismatch {
                    gap,
                    detail: format!(
                        "sublayer {k} emits {} values, sublayer {} expects {}",
                        pair[0].output_dim(),
                        k + 1,
                        pair[1].input_dim()
                    ),
                });
            }
        }
        for (k, s) in self.sublayers.iter().enumerate() {
            if let Some(b) = &s.bias {
                if b.len() != s.output_dim() {
                    return Err(Error::SublayerMismatch {
                        gap,
                        detail: format!("bias of sublayer {k} has wrong length"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.sublayers.iter().all(|s| {
            s.weights.iter().all(|v| v.is_finite())
                && s.bias.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite()))
        })
    }

    pub(crate) fn trace(&self, mu_upper: &Array2<f64>) -> Result<PredictorTrace> {
        if mu_upper.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "predictor expects {} input columns, got {}",
                self.input_dim(),
                mu_upper.ncols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.sublayers.len());
        let mut pre = Vec::with_capacity(self.sublayers.len());
        let mut h = mu_upper.clone();
        for s in &self.sublayers {
            let a = s.pre_activation(&h);
            let act = s.activation;
            inputs.push(h);
            h = a.mapv(|x| act.apply(x));
            pre.push(a);
        }
        Ok(PredictorTrace {
            inputs,
            pre,
            output: h,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    /// Activities, `batch × d_l`.
    pub mu: Array2<f64>,
    /// Prediction errors, `batch × d_l`. Derived from `mu` and the predictor above.
    pub epsilon: Array2<f64>,
    pub precision: Precision,
    /// Clamped layers hold their values and receive no activity updates.
    pub clamped: bool,
}

impl LayerState {
    fn zeros(batch: usize, dim: usize, precision: Precision) -> Self {
        Self {
            mu: Array2::zeros((batch, dim)),
            epsilon: Array2::zeros((batch, dim)),
            precision,
            clamped: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityInit {
    /// Prior mean at the cause layer, zero elsewhere, plus Gaussian noise.
    #[default]
    Prior,
    /// Transposed-predictor sweep upward from the clamped data layer.
    Feedforward,
    /// Top-down prediction sweep from a clamped cause layer.
    TopDown,
}

/// A single scalar degree of freedom in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coordinate {
    Activity { layer: usize, row: usize, col: usize },
    Weight { gap: usize, sublayer: usize, row: usize, col: usize },
    Bias { gap: usize, sublayer: usize, index: usize },
    Precision { layer: usize, row: usize, col: usize },
}

/// An ordered stack of activity layers joined by backward predictors.
#[derive(Clone, Debug)]
pub struct PCNetwork {
    spec: NetworkSpec,
    layers: Vec<LayerState>,
    predictors: Vec<Predictor>,
    traces: Vec<PredictorTrace>,
    fresh: bool,
}

impl PartialEq for PCNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.predictors == other.predictors
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.mu == b.mu && a.precision == b.precision && a.clamped == b.clamped
            })
    }
}

/// Builds a network with zero activities, identity precisions (the cause
/// layer takes the prior precision) and weights drawn uniformly from
/// `±1/√fan_in` by a ChaCha8 stream seeded with `spec.seed`.
pub fn build_network(spec: NetworkSpec) -> Result<PCNetwork> {
    PCNetwork::new(spec)
}

impl PCNetwork {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut predictors = Vec::with_capacity(spec.depth());
        for (gap, chain) in spec.predictor_specs.iter().enumerate() {
            let mut fan_in = spec.layer_dims[gap + 1];
            let mut sublayers = Vec::with_capacity(chain.len());
            for sub in chain {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::InvalidSpec(e.to_string()))?;
                let weights =
                    Array2::from_shape_simple_fn((sub.output_dim, fan_in), || dist.sample(&mut rng));
                let bias = spec.bias.then(|| Array1::zeros(sub.output_dim));
                sublayers.push(Sublayer {
                    weights,
                    bias,
                    activation: sub.activation,
                });
                fan_in = sub.output_dim;
            }
            predictors.push(Predictor { sublayers });
        }
        let mode = spec.precision_mode;
        let top = spec.depth();
        let mut precisions: Vec<Precision> = spec.layer_dims[..top]
            .iter()
            .map(|&d| Precision::identity(d, mode))
            .collect();
        precisions.push(Precision::from_dense(spec.prior.precision_array()?, mode));
        Self::from_parts(spec, predictors, precisions)
    }

    pub(crate) fn from_parts(
        spec: NetworkSpec,
        predictors: Vec<Predictor>,
        precisions: Vec<Precision>,
    ) -> Result<Self> {
        spec.validate()?;
        if predictors.len() != spec.depth() || precisions.len() != spec.layer_dims.len() {
            return Err(Error::InvalidSpec("predictor or precision count does not match layers".into()));
        }
        for (gap, p) in predictors.iter().enumerate() {
            p.check_chain(gap)?;
            if p.input_dim() != spec.layer_dims[gap + 1] || p.output_dim() != spec.layer_dims[gap] {
                return Err(Error::SublayerMismatch {
                    gap,
                    detail: format!(
                        "predictor maps {} -> {}, layers need {} -> {}",
                        p.input_dim(),
                        p.output_dim(),
                        spec.layer_dims[gap + 1],
                        spec.layer_dims[gap]
                    ),
                });
            }
            let chain = &spec.predictor_specs[gap];
            if chain.len() != p.sublayers.len()
                || chain.iter().zip(&p.sublayers).any(|(s, sub)| {
                    s.output_dim != sub.output_dim() || s.activation != sub.activation
                })
            {
                return Err(Error::SublayerMismatch {
                    gap,
                    detail: "predictor does not match its sublayer specs".into(),
                });
            }
        }
        for (l, (p, &d)) in precisions.iter().zip(&spec.layer_dims).enumerate() {
            if p.dim() != d || p.mode() != spec.precision_mode {
                return Err(Error::Shape(format!(
                    "precision of layer {l} has dim {} ({:?}), expected {d} ({:?})",
                    p.dim(),
                    p.mode(),
                    spec.precision_mode
                )));
            }
        }
        let layers = spec
            .layer_dims
            .iter()
            .zip(precisions)
            .map(|(&d, p)| LayerState::zeros(1, d, p))
            .collect();
        let net = Self {
            spec,
            layers,
            predictors,
            traces: Vec::new(),
            fresh: false,
        };
        net.check_finite()?;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Number of gaps `L`; layers are `0..=L`.
    pub fn depth(&self) -> usize {
        self.predictors.len()
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].mu.nrows()
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerState {
        &self.layers[l]
    }

    pub fn predictors(&self) -> &[Predictor] {
        &self.predictors
    }

    pub fn predictor(&self, gap: usize) -> &Predictor {
        &self.predictors[gap]
    }

    /// True when every ε reflects the current activities and weights.
    pub fn errors_fresh(&self) -> bool {
        self.fresh
    }

    pub(crate) fn traces(&self) -> &[PredictorTrace] {
        &self.traces
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerState] {
        self.fresh = false;
        &mut self.layers
    }

    pub(crate) fn predictors_mut(&mut self) -> &mut [Predictor] {
        self.fresh = false;
        &mut self.predictors
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::LayerOutOfRange {
                index: layer,
                count: self.layers.len(),
            });
        }
        Ok(())
    }

    /// Resizes every layer to `batch` rows of zeros, keeping clamp flags.
    pub fn reset_batch(&mut self, batch: usize) {
        for layer in &mut self.layers {
            let d = layer.dim();
            layer.mu = Array2::zeros((batch, d));
            layer.epsilon = Array2::zeros((batch, d));
        }
        self.fresh = false;
    }

    /// Clamps `layer` to `values`, or releases it when `values` is `None`.
    ///
    /// A batch size different from the current one resizes all other
    /// unclamped layers to zeros; it is an error if another layer is
    /// clamped at a different batch size.
    pub fn clamp_layer(&mut self, layer: usize, values: Option<Array2<f64>>) -> Result<()> {
        self.check_layer(layer)?;
        let Some(values) = values else {
            self.layers[layer].clamped = false;
            self.fresh = false;
            return Ok(());
        };
        let d = self.layers[layer].dim();
        if values.ncols() != d || values.nrows() == 0 {
            return Err(Error::Shape(format!(
                "clamp values for layer {layer} are {:?}, expected batch x {d}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer,
                variable: "clamp values".into(),
            });
        }
        let batch = values.nrows();
        if batch != self.batch_size() {
            if let Some(other) = self
                .layers
                .iter()
                .enumerate()
                .find(|(i, s)| *i != layer && s.clamped)
            {
                return Err(Error::Shape(format!(
                    "layer {} is clamped with batch {}, cannot clamp layer {layer} with batch {batch}",
                    other.0,
                    other.1.mu.nrows()
                )));
            }
            self.reset_batch(batch);
        }
        let state = &mut self.layers[layer];
        state.mu = values;
        state.clamped = true;
        self.fresh = false;
        Ok(())
    }

    /// Overwrites the activities of a layer without changing its clamp flag.
    pub fn set_activities(&mut self, layer: usize, values: Array2<f64>) -> Result<()> {
        self.check_layer(layer)?;
        if values.dim() != self.layers[layer].mu.dim() {
            return Err(Error::Shape(format!(
                "activities for layer {layer} are {:?}, expected {:?}",
                values.dim(),
                self.layers[layer].mu.dim()
            )));
        }
        self.layers[layer].mu = values;
        self.fresh = false;
        Ok(())
    }

    pub fn set_weights(&mut self, gap: usize, sublayer: usize, weights: Array2<f64>) -> Result<()> {
        let sub = self
            .predictors
            .get_mut(gap)
            .and_then(|p| p.sublayers.get_mut(sublayer))
            .ok_or_else(|| Error::Shape(format!("no sublayer {sublayer} at gap {gap}")))?;
        if sub.weights.dim() != weights.dim() {
            return Err(Error::Shape(format!(
                "weights at gap {gap} sublayer {sublayer} are {:?}, got {:?}",
                sub.weights.dim(),
                weights.dim()
            )));
        }
        sub.weights = weights;
        self.fresh = false;
        Ok(())
    }

    pub fn set_bias(&mut self, gap: usize, sublayer: usize, bias: Array1<f64>) -> Result<()> {
        let sub = self
            .predictors
            .get_mut(gap)
            .and_then(|p| p.sublayers.get_mut(sublayer))
            .ok_or_else(|| Error::Shape(format!("no sublayer {sublayer} at gap {gap}")))?;
        if bias.len() != sub.output_dim() {
            return Err(Error::Shape(format!("bias at gap {gap} sublayer {sublayer} has wrong length")));
        }
        sub.bias = Some(bias);
        self.fresh = false;
        Ok(())
    }

    /// Replaces a layer's precision. The value is projected into the
    /// eigenvalue clamps.
    pub fn set_precision(&mut self, layer: usize, mut precision: Precision) -> Result<()> {
        self.check_layer(layer)?;
        let state = &self.layers[layer];
        if precision.dim() != state.dim() || precision.mode() != self.spec.precision_mode {
            return Err(Error::Shape(format!(
                "precision for layer {layer} must be {:?} of dim {}",
                self.spec.precision_mode,
                state.dim()
            )));
        }
        if !precision.is_finite() {
            return Err(Error::NonFinite {
                layer,
                variable: "precision".into(),
            });
        }
        precision.project(LAMBDA_MIN, LAMBDA_MAX);
        self.layers[layer].precision = precision;
        self.fresh = false;
        Ok(())
    }

    /// Initialises every unclamped layer.
    ///
    /// `Prior` sets the cause layer to the prior mean and the rest to zero,
    /// adding `N(0, sigma²)` noise. `Feedforward` sweeps the transposed
    /// predictors upward from the clamped data layer (biases ignored), each
    /// swept value passed through the activation that produces that layer.
    /// `TopDown` fills unclamped layers with the predictions from above,
    /// starting at a clamped layer `L`.
    pub fn init_activities(&mut self, mode: ActivityInit, sigma: f64, seed: u64) -> Result<()> {
        let depth = self.depth();
        match mode {
            ActivityInit::Prior => {
                if !(sigma >= 0.0) {
                    return Err(Error::Config(format!("init sigma must be >= 0, got {sigma}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE))
                    .map_err(|e| Error::Config(e.to_string()))?;
                let batch = self.batch_size();
                let prior_mean = self.spec.prior.mean_array();
                for (l, layer) in self.layers.iter_mut().enumerate() {
                    if layer.clamped {
                        continue;
                    }
                    let d = layer.dim();
                    let mut mu = if l == depth {
                        prior_mean.broadcast((batch, d)).expect("prior width").to_owned()
                    } else {
                        Array2::zeros((batch, d))
                    };
                    if sigma > 0.0 {
                        mu.mapv_inplace(|v| v + noise.sample(&mut rng));
                    }
                    layer.mu = mu;
                }
            }
            ActivityInit::Feedforward => {
                if !self.layers[0].clamped {
                    return Err(Error::Config(
                        "feedforward initialisation requires a clamped data layer (layer 0)".into(),
                    ));
                }
                for l in 0..depth {
                    if self.layers[l + 1].clamped {
                        continue;
                    }
                    let subs = &self.predictors[l].sublayers;
                    let mut h = self.layers[l].mu.clone();
                    for k in (0..subs.len()).rev() {
                        h = h.dot(&subs[k].weights);
                        let act = if k > 0 {
                            subs[k - 1].activation
                        } else if l + 1 < depth {
                            self.predictors[l + 1]
                                .sublayers
                                .last()
                                .map_or(Activation::Linear, |s| s.activation)
                        } else {
                            Activation::Linear
                        };
                        h.mapv_inplace(|x| act.apply(x));
                    }
                    self.layers[l + 1].mu = h;
                }
            }
            ActivityInit::TopDown => {
                if !self.layers[depth].clamped {
                    return Err(Error::Config(
                        "top-down initialisation requires a clamped top layer".into(),
                    ));
                }
                for l in (0..depth).rev() {
                    if self.layers[l].clamped {
                        continue;
                    }
                    let out = self.predictors[l].trace(&self.layers[l + 1].mu)?.output;
                    self.layers[l].mu = out;
                }
            }
        }
        self.fresh = false;
        Ok(())
    }

    /// Recomputes every prediction and prediction error from the current
    /// activities and weights. The cause layer's error is taken against the
    /// prior mean when unclamped and is zero when clamped.
    pub fn refresh_errors(&mut self) -> Result<()> {
        let depth = self.depth();
        let mut traces = Vec::with_capacity(depth);
        for l in 0..depth {
            let trace = self.predictors[l].trace(&self.layers[l + 1].mu)?;
            self.layers[l].epsilon = &self.layers[l].mu - &trace.output;
            traces.push(trace);
        }
        let top = &mut self.layers[depth];
        if top.clamped {
            top.epsilon = Array2::zeros(top.mu.dim());
        } else {
            let mean = self.spec.prior.mean_array();
            top.epsilon = &top.mu - &mean.view().insert_axis(Axis(0));
        }
        self.traces = traces;
        self.fresh = true;
        Ok(())
    }

    /// Whether layer `l` carries an energy term of its own.
    pub fn has_own_error(&self, l: usize) -> bool {
        l < self.depth() || !self.layers[l].clamped
    }

    /// Fails with the first layer/variable holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: l,
                    variable: "activity".into(),
                });
            }
            if !layer.precision.is_finite() {
                return Err(Error::NonFinite {
                    layer: l,
                    variable: "precision".into(),
                });
            }
        }
        for (gap, p) in self.predictors.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    layer: gap,
                    variable: "predictor weights".into(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, c: Coordinate) -> f64 {
        match c {
            Coordinate::Activity { layer, row, col } => self.layers[layer].mu[[row, col]],
            Coordinate::Weight {
                gap,
                sublayer,
                row,
                col,
            } => self.predictors[gap].sublayers[sublayer].weights[[row, col]],
            Coordinate::Bias {
                gap,
                sublayer,
                index,
            } => self.predictors[gap].sublayers[sublayer]
                .bias
                .as_ref()
                .map_or(0.0, |b| b[index]),
            Coordinate::Precision { layer, row, col } => match &self.layers[layer].precision {
                Precision::Full(m) => m[[row, col]],
                Precision::Diagonal(d) => {
                    if row == col {
                        d[row]
                    } else {
                        0.0
                    }
                }
            },
        }
    }

    /// Writes one coordinate. Full precisions take the entry as-is (the
    /// energy only sees the symmetric part); diagonal precisions ignore
    /// off-diagonal writes.
    pub fn set(&mut self, c: Coordinate, value: f64) {
        match c {
            Coordinate::Activity { layer, row, col } => self.layers[layer].mu[[row, col]] = value,
            Coordinate::Weight {
                gap,
                sublayer,
                row,
                col,
            } => self.predictors[gap].sublayers[sublayer].weights[[row, col]] = value,
            Coordinate::Bias {
                gap,
                sublayer,
                index,
            } => {
                if let Some(b) = self.predictors[gap].sublayers[sublayer].bias.as_mut() {
                    b[index] = value;
                }
            }
            Coordinate::Precision { layer, row, col } => match &mut self.layers[layer].precision {
                Precision::Full(m) => m[[row, col]] = value,
                Precision::Diagonal(d) => {
                    if row == col {
                        d[row] = value;
                    }
                }
            },
        }
        self.fresh = false;
    }
}
