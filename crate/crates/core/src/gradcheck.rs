//! Central finite-difference verification of the analytic backward pass.
//!
//! Each perturbation evaluates all four loss terms at once, so one sweep over
//! the parameters serves the combined loss and every isolated term.

use serde::Serialize;

use crate::localizer::{LocalizerConfig, LossBreakdown, LossWeights};
use crate::model::{backward, forward, ModelError, ModelParams, SampleInput};
use crate::params::ParamGroup;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Analytic and numeric gradient at the element with the largest error.
    pub worst_element: (f64, f64),
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub weights: LossWeights,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn terms(input: &SampleInput<f64>, params: &ModelParams<f64>, cfg: &LocalizerConfig) -> Result<[f64; 4], ModelError> {
    let l = forward(input, params, cfg)?.losses;
    Ok([l.spatial, l.temporal, l.regression, l.diversity])
}

/// Central differences of each loss term, `[element][term]`, in registry order.
pub fn finite_differences(
    input: &SampleInput<f64>,
    params: &ModelParams<f64>,
    cfg: &LocalizerConfig,
    step: f64,
) -> Result<Vec<[f64; 4]>, ModelError> {
    let base = params.flat();
    let mut work = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut values = base.clone();
    for i in 0..base.len() {
        values[i] = base[i] + step;
        work.set_flat(&values);
        let plus = terms(input, &work, cfg)?;
        values[i] = base[i] - step;
        work.set_flat(&values);
        let minus = terms(input, &work, cfg)?;
        values[i] = base[i];
        let mut d = [0.0; 4];
        for j in 0..4 {
            d[j] = (plus[j] - minus[j]) / (2.0 * step);
        }
        out.push(d);
    }
    Ok(out)
}

pub fn analytic_gradient(
    input: &SampleInput<f64>,
    params: &ModelParams<f64>,
    cfg: &LocalizerConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ModelParams<f64>), ModelError> {
    let trace = forward(input, params, cfg)?;
    let mut grads = params.zeros_like();
    backward(input, params, &trace, cfg, weights, 1.0, &mut grads);
    Ok((trace.losses, grads))
}

/// Compares an analytic gradient with weighted finite differences.
pub fn compare(analytic: &ModelParams<f64>, numeric: &[[f64; 4]], weights: &LossWeights, tolerance: f64) -> GradCheckReport {
    let w = weights.to_array();
    let mut params = Vec::new();
    let mut offset = 0;
    for (name, t) in analytic.named() {
        let mut worst: f64 = 0.0;
        let mut worst_element = (0.0, 0.0);
        let mut max_abs: f64 = 0.0;
        for (i, &ga) in t.data().iter().enumerate() {
            let d = &numeric[offset + i];
            let gn: f64 = (0..4).map(|j| w[j] * d[j]).sum();
            let e = relative_error(ga, gn);
            if e > worst {
                worst = e;
                worst_element = (ga, gn);
            }
            max_abs = max_abs.max(ga.abs());
        }
        offset += t.len();
        params.push(ParamCheck {
            name,
            max_rel_error: worst,
            worst_element,
            max_abs_grad: max_abs,
            passed: worst <= tolerance,
        });
    }
    GradCheckReport {
        weights: *weights,
        params,
    }
}

/// One report per weight vector, sharing a single finite-difference sweep.
pub fn grad_check(
    input: &SampleInput<f64>,
    params: &ModelParams<f64>,
    cfg: &LocalizerConfig,
    weight_sets: &[LossWeights],
    step: f64,
    tolerance: f64,
) -> Result<Vec<GradCheckReport>, ModelError> {
    let numeric = finite_differences(input, params, cfg, step)?;
    weight_sets
        .iter()
        .map(|w| {
            let (_, g) = analytic_gradient(input, params, cfg, w)?;
            Ok(compare(&g, &numeric, w, tolerance))
        })
        .collect()
}

/// The combined weights followed by each term in isolation.
pub fn standard_weight_sets(combined: &LossWeights) -> Vec<LossWeights> {
    let mut v = vec![*combined];
    v.extend((0..4).map(LossWeights::one_hot));
    v
}
