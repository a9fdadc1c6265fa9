//! Per-layer predictions, prediction errors, free energy and the gradients
//! that drive activities, weights and precisions.
//!
//! The energy of one layer is the Gaussian negative log-density of its
//! errors, averaged over the batch:
//!
//! ```text
//! E_l = mean_b ½ [ε_bᵀ Π_l ε_b − ln det Π_l + d_l ln 2π],   ε_l = μ_l − f_l(θ_l, μ_{l+1})
//! ```
//!
//! The cause layer contributes its error against the prior while it is free.
//! All gradients returned here point downhill on this energy (they are
//! gradients of −F) with the ½ factors absorbed:
//!
//! * activities: `Jᵀ Π_l ε_l − Π_{l+1} ε_{l+1}`, per data point (each row owns
//!   its activities, so this is `B · ∂F/∂μ`);
//! * weights: the precision-weighted error `Π_l ε_l` chained back through the
//!   sublayers of the one predictor, batch mean; for a single linear sublayer
//!   this is `mean_b (Π_l ε_l) μ_{l+1}ᵀ`;
//! * precision: `Σ_l − mean_b ε εᵀ`, i.e. `−2 ∂F/∂Π`, whose fixed point is the
//!   error-covariance estimate `Π = (mean ε εᵀ)⁻¹`.

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::network::{PCNetwork, Precision, Predictor, PredictorTrace, LAMBDA_MAX, LAMBDA_MIN};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Total and per-layer free energy in nats.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub total: f64,
    pub per_layer: Vec<f64>,
    pub includes_logdet: bool,
}

/// Gradient of one sublayer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SublayerGradient {
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

/// Everything one gap contributes in a single update.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub d_mu_lower: Array2<f64>,
    pub d_mu_upper: Array2<f64>,
    pub d_weights: Vec<SublayerGradient>,
    pub d_precision: Array2<f64>,
}

/// f_l(θ_{l+1}, μ_{l+1}): the sublayers applied in order to the upper activities.
pub fn predict(predictor: &Predictor, mu_upper: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(predictor.trace(mu_upper)?.output)
}

/// ε = μ − μ̂.
pub fn compute_error(mu: &Array2<f64>, mu_hat: &Array2<f64>) -> Result<Array2<f64>> {
    if mu.dim() != mu_hat.dim() {
        return Err(Error::Shape(format!(
            "activity is {:?} but prediction is {:?}",
            mu.dim(),
            mu_hat.dim()
        )));
    }
    Ok(mu - mu_hat)
}

/// Batch mean of ½[εᵀΠε − ln det Π + d ln 2π].
pub fn layer_energy(epsilon: &Array2<f64>, precision: &Precision) -> Result<f64> {
    let d = precision.dim();
    if epsilon.ncols() != d || epsilon.nrows() == 0 {
        return Err(Error::Shape(format!(
            "errors are {:?}, precision is {d}x{d}",
            epsilon.dim()
        )));
    }
    let logdet = precision.logdet()?;
    let quad = precision.quadratic_rows(epsilon).sum() / epsilon.nrows() as f64;
    Ok(0.5 * (quad - logdet + d as f64 * LN_2PI))
}

fn require_fresh(net: &PCNetwork) -> Result<()> {
    if net.errors_fresh() {
        Ok(())
    } else {
        Err(Error::StaleErrors)
    }
}

/// Sum of the layer energies. Layers without an error term (a clamped cause
/// layer) report 0.
pub fn total_free_energy(net: &PCNetwork) -> Result<EnergyReport> {
    require_fresh(net)?;
    let mut per_layer = Vec::with_capacity(net.layers().len());
    for (l, layer) in net.layers().iter().enumerate() {
        let e = if net.has_own_error(l) {
            layer_energy(&layer.epsilon, &layer.precision).map_err(|e| match e {
                Error::NotSpd(_) => Error::NotSpd(format!(" (layer {l})")),
                other => other,
            })?
        } else {
            0.0
        };
        per_layer.push(e);
    }
    let total = per_layer.iter().fold(0.0, |acc, e| acc + e);
    Ok(EnergyReport {
        total,
        per_layer,
        includes_logdet: true,
    })
}

/// Free energy of each data point; their mean is `total_free_energy().total`.
pub fn per_datum_energy(net: &PCNetwork) -> Result<Array1<f64>> {
    require_fresh(net)?;
    let mut out = Array1::zeros(net.batch_size());
    for (l, layer) in net.layers().iter().enumerate() {
        if !net.has_own_error(l) {
            continue;
        }
        let logdet = layer.precision.logdet()?;
        let d = layer.dim() as f64;
        let quad = layer.precision.quadratic_rows(&layer.epsilon);
        out += &quad.mapv(|q| 0.5 * (q - logdet + d * LN_2PI));
    }
    Ok(out)
}

/// Per data point, ∂f/∂μ_{l+1} of the full sublayer composition (`d_l × d_{l+1}`).
pub fn predictor_jacobian(predictor: &Predictor, mu_upper: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    let trace = predictor.trace(mu_upper)?;
    let batch = mu_upper.nrows();
    let jac = crate::par::map_range(batch, |b| {
        let mut j = Array2::<f64>::eye(predictor.input_dim());
        for (sub, pre) in predictor.sublayers.iter().zip(&trace.pre) {
            let mut next = sub.weights.dot(&j);
            for (mut row, &a) in next.rows_mut().into_iter().zip(pre.row(b)) {
                row *= sub.activation.derivative(a);
            }
            j = next;
        }
        j
    });
    Ok(jac)
}

/// Chains `upstream` (rows: ∂(−F)/∂output per data point) back through the
/// predictor. Returns the batch-mean parameter gradients and the per-row
/// gradient with respect to the predictor input.
pub(crate) fn chain_back(
    predictor: &Predictor,
    trace: &PredictorTrace,
    upstream: &Array2<f64>,
) -> (Vec<SublayerGradient>, Array2<f64>) {
    let batch = upstream.nrows() as f64;
    let mut grads = Vec::with_capacity(predictor.sublayers.len());
    let mut delta = upstream.clone();
    for k in (0..predictor.sublayers.len()).rev() {
        let sub = &predictor.sublayers[k];
        let act = sub.activation;
        let delta_pre = &delta * &trace.pre[k].mapv(|a| act.derivative(a));
        let weights = delta_pre.t().dot(&trace.inputs[k]) / batch;
        let bias = sub.bias.as_ref().map(|_| delta_pre.sum_axis(Axis(0)) / batch);
        delta = delta_pre.dot(&sub.weights);
        grads.push(SublayerGradient { weights, bias });
    }
    grads.reverse();
    (grads, delta)
}

fn weighted_errors(net: &PCNetwork, l: usize) -> Array2<f64> {
    let layer = net.layer(l);
    if net.has_own_error(l) {
        layer.precision.weight(&layer.epsilon)
    } else {
        Array2::zeros(layer.mu.dim())
    }
}

fn check_gap(net: &PCNetwork, gap: usize) -> Result<()> {
    if gap >= net.depth() {
        return Err(Error::LayerOutOfRange {
            index: gap,
            count: net.depth(),
        });
    }
    Ok(())
}

/// Activity updates for the two layers joined by `gap`.
///
/// `d_mu_upper = Jᵀ(Π_l ε_l) − Π_{l+1} ε_{l+1}` and `d_mu_lower = −Π_l ε_l`;
/// clamped layers get zeros. The upper term is the complete update for layer
/// `l + 1`; the lower term is complete only for layer 0.
pub fn activity_gradient(net: &PCNetwork, gap: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    require_fresh(net)?;
    check_gap(net, gap)?;
    let lower = net.layer(gap);
    let upper = net.layer(gap + 1);
    let weighted = weighted_errors(net, gap);
    let d_lower = if lower.clamped {
        Array2::zeros(lower.mu.dim())
    } else {
        -&weighted
    };
    let d_upper = if upper.clamped {
        Array2::zeros(upper.mu.dim())
    } else {
        let (_, back) = chain_back(net.predictor(gap), &net.traces()[gap], &weighted);
        back - weighted_errors(net, gap + 1)
    };
    Ok((d_lower, d_upper))
}

/// Full activity update for every layer (zeros for clamped layers).
pub fn activity_gradients(net: &PCNetwork) -> Result<Vec<Array2<f64>>> {
    require_fresh(net)?;
    let depth = net.depth();
    let weighted: Vec<Array2<f64>> = (0..=depth).map(|l| weighted_errors(net, l)).collect();
    let mut out = Vec::with_capacity(depth + 1);
    for (l, layer) in net.layers().iter().enumerate() {
        if layer.clamped {
            out.push(Array2::zeros(layer.mu.dim()));
            continue;
        }
        let mut g = -&weighted[l];
        if l > 0 {
            let (_, back) = chain_back(net.predictor(l - 1), &net.traces()[l - 1], &weighted[l - 1]);
            g += &back;
        }
        out.push(g);
    }
    Ok(out)
}

/// Weight (and bias) update for the predictor of `gap`, batch mean.
pub fn weight_gradient(net: &PCNetwork, gap: usize) -> Result<Vec<SublayerGradient>> {
    require_fresh(net)?;
    check_gap(net, gap)?;
    let weighted = weighted_errors(net, gap);
    let (grads, _) = chain_back(net.predictor(gap), &net.traces()[gap], &weighted);
    Ok(grads)
}

/// `Σ − mean_b ε εᵀ` with `Σ = Π⁻¹`, symmetrised. Diagonal precisions get a
/// diagonal result.
pub fn precision_gradient(epsilon: &Array2<f64>, precision: &Precision) -> Result<Array2<f64>> {
    let d = precision.dim();
    if epsilon.ncols() != d || epsilon.nrows() == 0 {
        return Err(Error::Shape(format!(
            "errors are {:?}, precision is {d}x{d}",
            epsilon.dim()
        )));
    }
    let batch = epsilon.nrows() as f64;
    let sigma = precision.covariance()?;
    match precision {
        Precision::Full(_) => {
            let scatter = epsilon.t().dot(epsilon) / batch;
            Ok(linalg::symmetrize(&(sigma - scatter)))
        }
        Precision::Diagonal(_) => {
            let sq = epsilon.mapv(|e| e * e).sum_axis(Axis(0)) / batch;
            Ok(Array2::from_diag(&(&sigma.diag() - &sq)))
        }
    }
}

/// Activity, weight and precision updates of one gap from the current errors.
pub fn layer_gradients(net: &PCNetwork, gap: usize) -> Result<LayerGradients> {
    let (d_mu_lower, d_mu_upper) = activity_gradient(net, gap)?;
    let d_weights = weight_gradient(net, gap)?;
    let lower = net.layer(gap);
    let d_precision = precision_gradient(&lower.epsilon, &lower.precision)?;
    Ok(LayerGradients {
        d_mu_lower,
        d_mu_upper,
        d_weights,
        d_precision,
    })
}

/// Symmetrise, then clamp the spectrum to `[lo, hi]`.
pub fn project_spd(m: &Array2<f64>, lo: f64, hi: f64) -> Array2<f64> {
    assert_eq!(m.nrows(), m.ncols(), "project_spd needs a square matrix");
    let sym = linalg::symmetrize(m);
    let (values, vectors) = linalg::sym_eigen(&sym);
    if values.iter().all(|v| (lo..=hi).contains(v)) {
        return sym;
    }
    let clamped = values.mapv(|v| if v.is_nan() { lo } else { v.clamp(lo, hi) });
    linalg::reconstruct(&clamped, &vectors)
}

/// `project_spd` with the network-wide clamps.
pub fn project_precision(m: &Array2<f64>) -> Array2<f64> {
    project_spd(m, LAMBDA_MIN, LAMBDA_MAX)
}

/// Fisher information of F with respect to μ_l: the layer's precision.
pub fn fisher_activity(net: &PCNetwork, l: usize) -> Array2<f64> {
    net.layer(l).precision.to_dense()
}

/// Diagnostic Fisher information of F with respect to the weights of a
/// single linear sublayer: `Π_l ⊗ mean_b μ_{l+1} μ_{l+1}ᵀ`, indexed by the
/// row-major flattening of θ. Not used by any update.
pub fn fisher_weights(net: &PCNetwork, gap: usize) -> Result<Array2<f64>> {
    check_gap(net, gap)?;
    let p = net.predictor(gap);
    if p.sublayers.len() != 1 || p.sublayers[0].activation != crate::network::Activation::Linear {
        return Err(Error::Unsupported(format!(
            "weight Fisher needs a single linear sublayer at gap {gap}"
        )));
    }
    let mu = &net.layer(gap + 1).mu;
    let second_moment = mu.t().dot(mu) / mu.nrows() as f64;
    let pi = net.layer(gap).precision.to_dense();
    let (a, b) = (pi.nrows(), second_moment.nrows());
    Ok(Array2::from_shape_fn((a * b, a * b), |(r, c)| {
        pi[[r / b, c / b]] * second_moment[[r % b, c % b]]
    }))
}

/// Conservative activity step size `1 / max_gap(λ_max(Π_l)(1 + ‖J_l‖²))`,
/// bounding ‖J_l‖ by the product of the sublayer Frobenius norms (every
/// supported activation has slope at most 1). With this step a pure
/// activity update cannot raise the energy of a piecewise-quadratic network.
pub fn descent_step_bound(net: &PCNetwork) -> f64 {
    let depth = net.depth();
    let mut worst = 0.0f64;
    for gap in 0..depth {
        let jac_sq: f64 = net
            .predictor(gap)
            .sublayers
            .iter()
            .map(|s| linalg::frobenius(&s.weights).powi(2))
            .product();
        let c = net.layer(gap).precision.max_eigenvalue() * (1.0 + jac_sq);
        worst = worst.max(c);
    }
    if net.has_own_error(depth) {
        worst = worst.max(net.layer(depth).precision.max_eigenvalue());
    }
    1.0 / worst
}
