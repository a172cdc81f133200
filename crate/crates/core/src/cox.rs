//! Cox proportional-hazards regression: Newton-Raphson on the negative log
//! partial likelihood with analytic gradient and Hessian, Efron or Breslow
//! handling of tied event times, and hazard ratios with confidence
//! intervals from the inverse observed information.
//!
//! Times are integer days; ties are expected and never perturbed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pinned normal quantiles so reports do not depend on a quantile
/// implementation.
const Z_TABLE: [(f64, f64); 3] = [(0.90, 1.644854), (0.95, 1.959964), (0.99, 2.575829)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiesMethod {
    Efron,
    Breslow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalSample {
    pub x: Vec<f64>,
    pub time_days: u32,
    pub event: bool,
}

#[derive(Debug, Error)]
pub enum CoxError {
    #[error("no events in the data; partial likelihood undefined")]
    NoEvents,
    #[error("need at least 2 events to fit, got {0}")]
    TooFewEvents(usize),
    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in partial likelihood (likely separation); |x.beta| too large")]
    Overflow,
    #[error("separation detected: coefficient for {feature:?} exceeded bound {bound} during iteration")]
    Separation { feature: String, bound: f64 },
    #[error("observed information is numerically singular (rank-deficient design)")]
    RankDeficient,
    #[error("model did not converge; refusing to report hazard ratios")]
    NotConverged,
    #[error("unsupported confidence level {0}; pinned levels are 0.90, 0.95, 0.99")]
    UnsupportedLevel(f64),
    #[error("zero-time sample without an event at index {0}")]
    ZeroTimeCensored(usize),
    #[error("model io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub ties_method: TiesMethod,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            ties_method: TiesMethod::Efron,
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

/// Coefficient bound beyond which a monotone likelihood is assumed.
pub const SEPARATION_BOUND: f64 = 20.0;
const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Inverse observed information at the optimum, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub n_iterations: usize,
    pub converged: bool,
    pub log_partial_likelihood: f64,
    pub ties_method: TiesMethod,
    /// Count of time-zero event samples (permitted but worth surfacing).
    pub zero_time_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRatio {
    pub feature: String,
    pub hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn validate(samples: &[SurvivalSample]) -> Result<usize, CoxError> {
    let p = samples
        .first()
        .map(|s| s.x.len())
        .ok_or(CoxError::NoEvents)?;
    for (i, s) in samples.iter().enumerate() {
        if s.x.len() != p {
            return Err(CoxError::DimensionMismatch {
                expected: p,
                got: s.x.len(),
            });
        }
        if s.time_days == 0 && !s.event {
            return Err(CoxError::ZeroTimeCensored(i));
        }
    }
    if !samples.iter().any(|s| s.event) {
        return Err(CoxError::NoEvents);
    }
    Ok(p)
}

/// Negative log partial likelihood with analytic gradient and Hessian.
///
/// Samples are processed in decreasing time order so the risk-set
/// accumulators `S0`, `S1`, `S2` grow incrementally; each distinct event
/// time contributes one term (Breslow) or one term per tied event (Efron).
pub fn neg_log_partial_likelihood(
    beta: &DVector<f64>,
    samples: &[SurvivalSample],
    ties_method: TiesMethod,
) -> Result<(f64, DVector<f64>, DMatrix<f64>), CoxError> {
    let p = validate(samples)?;
    if beta.len() != p {
        return Err(CoxError::DimensionMismatch {
            expected: p,
            got: beta.len(),
        });
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(samples[i].time_days));

    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);

    let mut value = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);

    let mut k = 0;
    while k < order.len() {
        let t = samples[order[k]].time_days;

        // absorb everyone whose time equals t into the risk set, collecting
        // the tied-event sums as we go
        let mut d = 0usize;
        let mut sd0 = 0.0;
        let mut sd1 = DVector::zeros(p);
        let mut sd2 = DMatrix::zeros(p, p);
        let mut sum_x = DVector::zeros(p);
        let mut sum_xb = 0.0;
        while k < order.len() && samples[order[k]].time_days == t {
            let s = &samples[order[k]];
            let xv = DVector::from_column_slice(&s.x);
            let xb = beta.dot(&xv);
            let w = xb.exp();
            if !w.is_finite() {
                return Err(CoxError::Overflow);
            }
            s0 += w;
            s1.axpy(w, &xv, 1.0);
            s2.ger(w, &xv, &xv, 1.0);
            if s.event {
                d += 1;
                sd0 += w;
                sd1.axpy(w, &xv, 1.0);
                sd2.ger(w, &xv, &xv, 1.0);
                sum_x += &xv;
                sum_xb += xb;
            }
            k += 1;
        }
        if d == 0 {
            continue;
        }

        match ties_method {
            TiesMethod::Breslow => {
                value -= sum_xb - d as f64 * s0.ln();
                let mean = &s1 / s0;
                grad -= &sum_x - &(d as f64 * &mean);
                let mut h = &s2 / s0;
                h.ger(-1.0, &mean, &mean, 1.0);
                hess += d as f64 * h;
            }
            TiesMethod::Efron => {
                value -= sum_xb;
                grad -= &sum_x;
                for l in 0..d {
                    let frac = l as f64 / d as f64;
                    let phi = s0 - frac * sd0;
                    if phi <= 0.0 || !phi.is_finite() {
                        return Err(CoxError::Overflow);
                    }
                    value += phi.ln();
                    let s1_l = &s1 - &(frac * &sd1);
                    let mean = &s1_l / phi;
                    grad += &mean;
                    let mut h = (&s2 - &(frac * &sd2)) / phi;
                    h.ger(-1.0, &mean, &mean, 1.0);
                    hess += h;
                }
            }
        }
    }

    if !value.is_finite() {
        return Err(CoxError::Overflow);
    }
    Ok((value, grad, hess))
}

/// Newton-Raphson fit from `beta = 0` with step-halving on non-decrease.
pub fn fit_cox(
    samples: &[SurvivalSample],
    feature_names: &[String],
    options: &CoxOptions,
) -> Result<CoxModel, CoxError> {
    let p = validate(samples)?;
    if feature_names.len() != p {
        return Err(CoxError::DimensionMismatch {
            expected: p,
            got: feature_names.len(),
        });
    }
    let n_events = samples.iter().filter(|s| s.event).count();
    if n_events < 2 {
        return Err(CoxError::TooFewEvents(n_events));
    }
    if samples.len() <= p {
        log::warn!(
            "cox fit with n = {} samples and p = {} covariates; estimates will be unstable",
            samples.len(),
            p
        );
    }
    let zero_time_events = samples
        .iter()
        .filter(|s| s.time_days == 0 && s.event)
        .count();
    if zero_time_events > 0 {
        log::warn!("{zero_time_events} event(s) at time zero (death on the index test day)");
    }

    let mut beta = DVector::zeros(p);
    let (mut value, mut grad, mut hess) =
        neg_log_partial_likelihood(&beta, samples, options.ties_method)?;
    let mut n_iterations = 0;
    let mut converged = grad.amax() <= options.tol;

    while !converged && n_iterations < options.max_iter {
        n_iterations += 1;
        let chol = hess
            .clone()
            .cholesky()
            .ok_or(CoxError::RankDeficient)?;
        let step = chol.solve(&grad);

        // step-halving on non-decrease of the objective
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &beta - &(scale * &step);
            match neg_log_partial_likelihood(&candidate, samples, options.ties_method) {
                Ok((v, g, h)) if v <= value => {
                    beta = candidate;
                    value = v;
                    grad = g;
                    hess = h;
                    accepted = true;
                    break;
                }
                _ => scale /= 2.0,
            }
        }

        if let Some(j) = (0..p).find(|&j| beta[j].abs() > SEPARATION_BOUND) {
            return Err(CoxError::Separation {
                feature: feature_names[j].clone(),
                bound: SEPARATION_BOUND,
            });
        }
        if !accepted {
            break;
        }
        converged = grad.amax() <= options.tol;
    }

    let covariance = hess
        .clone()
        .cholesky()
        .ok_or(CoxError::RankDeficient)?
        .inverse();

    Ok(CoxModel {
        feature_names: feature_names.to_vec(),
        beta: beta.iter().copied().collect(),
        covariance: (0..p)
            .map(|i| (0..p).map(|j| covariance[(i, j)]).collect())
            .collect(),
        n_iterations,
        converged,
        log_partial_likelihood: -value,
        ties_method: options.ties_method,
        zero_time_events,
    })
}

fn z_for(level: f64) -> Result<f64, CoxError> {
    Z_TABLE
        .iter()
        .find(|(l, _)| (l - level).abs() < 1e-12)
        .map(|&(_, z)| z)
        .ok_or(CoxError::UnsupportedLevel(level))
}

/// Per-feature `exp(beta)` with `exp(beta +/- z * SE)` confidence bounds.
pub fn hazard_ratios(model: &CoxModel, level: f64) -> Result<Vec<HazardRatio>, CoxError> {
    if !model.converged {
        return Err(CoxError::NotConverged);
    }
    let z = z_for(level)?;
    Ok(model
        .feature_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let beta = model.beta[j];
            let se = model.covariance[j][j].max(0.0).sqrt();
            HazardRatio {
                feature: name.clone(),
                hr: beta.exp(),
                ci_low: (beta - z * se).exp(),
                ci_high: (beta + z * se).exp(),
            }
        })
        .collect())
}

impl CoxModel {
    /// Linear predictor `beta . x`; higher means higher mortality risk.
    pub fn risk_score(&self, x: &[f64]) -> Result<f64, CoxError> {
        if x.len() != self.beta.len() {
            return Err(CoxError::DimensionMismatch {
                expected: self.beta.len(),
                got: x.len(),
            });
        }
        Ok(self.beta.iter().zip(x).map(|(b, v)| b * v).sum())
    }

    pub fn save(&self, writer: impl std::io::Write) -> Result<(), CoxError> {
        serde_json::to_writer(writer, self).map_err(|e| CoxError::Io(e.to_string()))
    }

    pub fn load(reader: impl std::io::Read) -> Result<CoxModel, CoxError> {
        serde_json::from_reader(reader).map_err(|e| CoxError::Io(e.to_string()))
    }

    /// HR report rows ordered by |log HR| descending.
    pub fn hazard_ratio_report(&self, level: f64) -> Result<Vec<HazardRatio>, CoxError> {
        let mut rows = hazard_ratios(self, level)?;
        rows.sort_by(|a, b| {
            b.hr.ln()
                .abs()
                .partial_cmp(&a.hr.ln().abs())
                .unwrap()
                .then_with(|| a.feature.cmp(&b.feature))
        });
        Ok(rows)
    }
}
