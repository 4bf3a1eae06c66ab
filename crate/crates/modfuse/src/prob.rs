//! Probabilistic embeddings: diagonal Gaussians, product-of-experts fusion,
//! reparameterized sampling, and the MLP heads that map encoder features to
//! distribution parameters.
//!
//! Two parallel layers exist on purpose. The value-level types
//! ([`DiagonalGaussian`], [`poe_join`], …) are plain `Vec`-backed math used by
//! evaluation code and as test oracles. The `*_vars` functions build the same
//! computations on the autodiff tape for training, batched as `[B × d]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{row_sum, Mlp, MlpSpec, MlpVars, ParamRegistry};
use crate::scalar::{c, Scalar};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Bounds for predicted log-variances. Keeps every precision `exp(-log_var)`
/// inside `[e^-10, e^10]`, so product-of-experts precision sums cannot
/// overflow or vanish.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

// ── value-level Gaussians ──

/// Diagonal Gaussian over `d` dimensions, parameterized by mean and
/// log-variance. Construction clamps `log_var` into
/// `[LOG_VAR_MIN, LOG_VAR_MAX]`, so the variance is always finite and
/// strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian<S: Scalar> {
    mu: Vec<S>,
    log_var: Vec<S>,
}

impl<S: Scalar> DiagonalGaussian<S> {
    pub fn new(mu: Vec<S>, log_var: Vec<S>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::shape(
                "diagonal_gaussian",
                format!("mu has {} dims, log_var has {}", mu.len(), log_var.len()),
            ));
        }
        if mu.is_empty() {
            return Err(Error::shape("diagonal_gaussian", "zero-dimensional Gaussian"));
        }
        if !mu.iter().chain(log_var.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian parameter".into()));
        }
        let (lo, hi) = (c::<S>(LOG_VAR_MIN), c::<S>(LOG_VAR_MAX));
        let log_var = log_var.into_iter().map(|v| v.max(lo).min(hi)).collect();
        Ok(DiagonalGaussian { mu, log_var })
    }

    /// Standard normal N(0, I) over `d` dimensions.
    pub fn standard(d: usize) -> Self {
        DiagonalGaussian { mu: vec![S::zero(); d], log_var: vec![S::zero(); d] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[S] {
        &self.mu
    }

    pub fn log_var(&self) -> &[S] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<S> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    pub fn precision(&self) -> Vec<S> {
        self.log_var.iter().map(|v| (-*v).exp()).collect()
    }

    pub fn std(&self) -> Vec<S> {
        self.log_var.iter().map(|v| (*v * c(0.5)).exp()).collect()
    }
}

/// Product-of-experts fusion: multiplies the prior density with every expert
/// density and renormalizes. For diagonal Gaussians the result is the
/// diagonal Gaussian whose per-dimension precision is the sum of the input
/// precisions and whose mean is the precision-weighted input mean.
///
/// Expert contributions are accumulated in a canonical (sorted) order so that
/// permuting the experts list leaves the result bit-identical.
pub fn poe_join<S: Scalar>(
    prior: &DiagonalGaussian<S>,
    experts: &[DiagonalGaussian<S>],
) -> Result<DiagonalGaussian<S>> {
    if experts.is_empty() {
        return Err(Error::Contract("poe_join requires at least one expert".into()));
    }
    let d = prior.dim();
    for (i, e) in experts.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::shape(
                "poe_join",
                format!("prior has {d} dims, expert {i} has {}", e.dim()),
            ));
        }
    }
    let mut mu = Vec::with_capacity(d);
    let mut log_var = Vec::with_capacity(d);
    let mut contrib: Vec<(S, S)> = Vec::with_capacity(experts.len());
    for k in 0..d {
        contrib.clear();
        for e in experts {
            let prec = (-e.log_var[k]).exp();
            contrib.push((prec, e.mu[k] * prec));
        }
        contrib.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap())
        });
        let prior_prec = (-prior.log_var[k]).exp();
        let mut prec_sum = prior_prec;
        let mut weighted = prior.mu[k] * prior_prec;
        for &(p, wp) in &contrib {
            prec_sum += p;
            weighted += wp;
        }
        log_var.push(-prec_sum.ln());
        mu.push(weighted / prec_sum);
    }
    DiagonalGaussian::new(mu, log_var)
}

/// Reparameterized draw `s = μ + ε ⊙ exp(0.5·log_var)` for caller-supplied
/// standard-normal noise.
pub fn sample_reparam<S: Scalar>(g: &DiagonalGaussian<S>, epsilon: &[S]) -> Result<Vec<S>> {
    if epsilon.len() != g.dim() {
        return Err(Error::shape(
            "sample_reparam",
            format!("gaussian has {} dims, epsilon has {}", g.dim(), epsilon.len()),
        ));
    }
    Ok(g.mu
        .iter()
        .zip(&g.log_var)
        .zip(epsilon)
        .map(|((&m, &lv), &e)| m + e * (lv * c(0.5)).exp())
        .collect())
}

/// Log density of `x` under `g`:
/// `Σ_i −0.5·(log 2π + log_var_i + (x_i−μ_i)²/exp(log_var_i))`.
pub fn gaussian_log_density<S: Scalar>(g: &DiagonalGaussian<S>, x: &[S]) -> Result<S> {
    if x.len() != g.dim() {
        return Err(Error::shape(
            "gaussian_log_density",
            format!("gaussian has {} dims, x has {}", g.dim(), x.len()),
        ));
    }
    let half = c::<S>(0.5);
    let ln_2pi = c::<S>(LN_2PI);
    Ok(g.mu
        .iter()
        .zip(&g.log_var)
        .zip(x)
        .map(|((&m, &lv), &xi)| {
            let diff = xi - m;
            -half * (ln_2pi + lv + diff * diff * (-lv).exp())
        })
        .sum())
}

/// Closed-form KL(a ‖ b) between diagonal Gaussians:
/// `Σ_i 0.5·(log_var_b − log_var_a + (var_a + (μ_a−μ_b)²)/var_b − 1)`.
pub fn gaussian_kl<S: Scalar>(a: &DiagonalGaussian<S>, b: &DiagonalGaussian<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "gaussian_kl",
            format!("a has {} dims, b has {}", a.dim(), b.dim()),
        ));
    }
    let half = c::<S>(0.5);
    Ok(a.mu
        .iter()
        .zip(&a.log_var)
        .zip(b.mu.iter().zip(&b.log_var))
        .map(|((&ma, &lva), (&mb, &lvb))| {
            let diff = ma - mb;
            half * (lvb - lva + (lva.exp() + diff * diff) * (-lvb).exp() - S::one())
        })
        .sum())
}

// ── tape-level Gaussians ──

/// A batch of diagonal Gaussians on the tape: `mu` and `log_var` are both
/// `[B × d]`, row `i` parameterizing sample `i`'s distribution.
#[derive(Debug, Clone)]
pub struct GaussianVars<S: Scalar> {
    pub mu: Var<S>,
    pub log_var: Var<S>,
}

impl<S: Scalar> GaussianVars<S> {
    pub fn new(mu: Var<S>, log_var: Var<S>) -> Result<Self> {
        let (ms, ls) = (mu.shape(), log_var.shape());
        if ms != ls || ms.len() != 2 {
            return Err(Error::shape(
                "gaussian_vars",
                format!("expected matching 2-D mu/log_var, got {ms:?} and {ls:?}"),
            ));
        }
        Ok(GaussianVars { mu, log_var })
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mu.shape()[1]
    }

    /// Extracts the per-row value-level Gaussians (for evaluation paths).
    pub fn rows(&self) -> Result<Vec<DiagonalGaussian<S>>> {
        let (b, d) = (self.batch(), self.dim());
        let mu = self.mu.value();
        let lv = self.log_var.value();
        (0..b)
            .map(|i| {
                DiagonalGaussian::new(mu[i * d..(i + 1) * d].to_vec(), lv[i * d..(i + 1) * d].to_vec())
            })
            .collect()
    }
}

/// Standard-normal prior N(0, I) as constants on `tape`, batched `[batch × d]`.
pub fn standard_prior_vars<S: Scalar>(
    tape: &crate::tape::Tape<S>,
    batch: usize,
    d: usize,
) -> GaussianVars<S> {
    GaussianVars {
        mu: tape.constant(&Tensor::zeros(&[batch, d])),
        log_var: tape.constant(&Tensor::zeros(&[batch, d])),
    }
}

/// Batched product-of-experts join on the tape. Same math as [`poe_join`],
/// differentiable through means and log-variances.
///
/// The output log-variance is not re-clamped: with inputs inside the
/// construction bounds it stays within `[−(10 + ln(1+n)), 10]` for `n`
/// experts, and re-clamping would zero gradients exactly where the join is
/// most confident.
pub fn poe_join_vars<S: Scalar>(
    prior: &GaussianVars<S>,
    experts: &[GaussianVars<S>],
) -> Result<GaussianVars<S>> {
    if experts.is_empty() {
        return Err(Error::Contract("poe_join requires at least one expert".into()));
    }
    let shape = prior.mu.shape();
    for (i, e) in experts.iter().enumerate() {
        if e.mu.shape() != shape {
            return Err(Error::shape(
                "poe_join",
                format!("prior is {shape:?}, expert {i} is {:?}", e.mu.shape()),
            ));
        }
    }
    let mut prec_sum = prior.log_var.neg().exp();
    let mut weighted = prior.mu.mul(&prec_sum)?;
    for e in experts {
        let prec = e.log_var.neg().exp();
        weighted = weighted.add(&e.mu.mul(&prec)?)?;
        prec_sum = prec_sum.add(&prec)?;
    }
    // precision sum is a sum of exponentials, hence strictly positive
    let log_var = prec_sum.log()?.neg();
    let mu = weighted.div(&prec_sum)?;
    GaussianVars::new(mu, log_var)
}

/// Batched reparameterized draw `s = μ + ε ⊙ exp(0.5·log_var)` on the tape.
/// `epsilon` must be shaped like `mu`; pass it as a tape constant — gradients
/// flow to `mu` and `log_var` only.
pub fn sample_reparam_vars<S: Scalar>(g: &GaussianVars<S>, epsilon: &Var<S>) -> Result<Var<S>> {
    if epsilon.shape() != g.mu.shape() {
        return Err(Error::shape(
            "sample_reparam",
            format!("gaussian is {:?}, epsilon is {:?}", g.mu.shape(), epsilon.shape()),
        ));
    }
    let std = g.log_var.scale(0.5).exp();
    g.mu.add(&epsilon.mul(&std)?)
}

/// Per-row log density `log q(y_i | ·)` of `y [B × d]` under the row-wise
/// Gaussians `g`, returned as `[B × 1]`.
pub fn gaussian_log_density_rows<S: Scalar>(g: &GaussianVars<S>, y: &Var<S>) -> Result<Var<S>> {
    if y.shape() != g.mu.shape() {
        return Err(Error::shape(
            "gaussian_log_density",
            format!("gaussian is {:?}, y is {:?}", g.mu.shape(), y.shape()),
        ));
    }
    let diff = y.sub(&g.mu)?;
    let quad = diff.square().mul(&g.log_var.neg().exp())?;
    let terms = g.log_var.add(&quad)?.add_const(LN_2PI).scale(-0.5);
    row_sum(&terms, &y.tape_handle())
}

// ── distribution predictor ──

/// The pair of MLP heads that turn an encoder feature into a Gaussian:
/// one predicts the mean, the other the log-variance (clamped into the
/// construction bounds). With `spherical` set, each row's log-variance is
/// tied to its across-dimension mean, making the covariance a scalar multiple
/// of the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionPredictor<S: Scalar> {
    pub f_mu: Mlp<S>,
    pub f_logvar: Mlp<S>,
    pub spherical: bool,
}

/// Bound parameter handles for one [`DistributionPredictor`].
#[derive(Debug, Clone)]
pub struct DistributionPredictorVars<S: Scalar> {
    pub mu: MlpVars<S>,
    pub logvar: MlpVars<S>,
}

impl<S: Scalar> DistributionPredictor<S> {
    pub fn new<R: Rng>(
        spec_mu: MlpSpec,
        spec_logvar: MlpSpec,
        spherical: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if spec_mu.in_dim() != spec_logvar.in_dim() || spec_mu.out_dim() != spec_logvar.out_dim()
        {
            return Err(Error::shape(
                "distribution_predictor",
                format!(
                    "head shapes disagree: mu {}→{}, logvar {}→{}",
                    spec_mu.in_dim(),
                    spec_mu.out_dim(),
                    spec_logvar.in_dim(),
                    spec_logvar.out_dim()
                ),
            ));
        }
        let f_mu = Mlp::new(spec_mu, rng);
        let f_logvar = Mlp::new(spec_logvar, rng);
        Ok(DistributionPredictor { f_mu, f_logvar, spherical })
    }

    pub fn in_dim(&self) -> usize {
        self.f_mu.spec.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.f_mu.spec.out_dim()
    }

    pub fn set_mode(&mut self, mode: crate::nn::Mode) {
        self.f_mu.set_mode(mode);
        self.f_logvar.set_mode(mode);
    }

    pub fn bind(
        &self,
        reg: &mut ParamRegistry<S>,
        prefix: &str,
        trainable: bool,
    ) -> DistributionPredictorVars<S> {
        DistributionPredictorVars {
            mu: self.f_mu.bind(reg, &format!("{prefix}.mu"), trainable),
            logvar: self.f_logvar.bind(reg, &format!("{prefix}.logvar"), trainable),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.f_mu.params(&format!("{prefix}.mu"));
        out.extend(self.f_logvar.params(&format!("{prefix}.logvar")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.f_mu.params_mut(&format!("{prefix}.mu"));
        out.extend(self.f_logvar.params_mut(&format!("{prefix}.logvar")));
        out
    }

    /// Rebuilds the var bundle from a flat var sequence in bind order.
    pub fn vars_from<I: Iterator<Item = Var<S>>>(
        &self,
        it: &mut I,
    ) -> Result<DistributionPredictorVars<S>> {
        Ok(DistributionPredictorVars {
            mu: self.f_mu.vars_from(it)?,
            logvar: self.f_logvar.vars_from(it)?,
        })
    }

    pub fn bn_stats(&self, prefix: &str) -> Vec<(String, &Vec<S>)> {
        let mut out = self.f_mu.bn_stats(&format!("{prefix}.mu"));
        out.extend(self.f_logvar.bn_stats(&format!("{prefix}.logvar")));
        out
    }

    pub fn bn_stats_mut(&mut self, prefix: &str) -> Vec<(String, &mut Vec<S>)> {
        let mut out = self.f_mu.bn_stats_mut(&format!("{prefix}.mu"));
        out.extend(self.f_logvar.bn_stats_mut(&format!("{prefix}.logvar")));
        out
    }

    /// Predicts one Gaussian per row of `e [B × d_e]`. `source` names the
    /// feature origin (e.g. a modality) in the non-finite-input diagnostic.
    pub fn predict(
        &mut self,
        vars: &DistributionPredictorVars<S>,
        e: &Var<S>,
        source: &str,
    ) -> Result<GaussianVars<S>> {
        if !e.value().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite encoder feature from `{source}` entering distribution predictor"
            )));
        }
        let mu = self.f_mu.forward(&vars.mu, e)?;
        let mut log_var = self.f_logvar.forward(&vars.logvar, e)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        if self.spherical {
            let shape = log_var.shape();
            let (b, d) = (shape[0], shape[1]);
            let row_mean = row_sum(&log_var, &e.tape_handle())?.scale(1.0 / d as f64);
            log_var = row_mean.broadcast_to(&[b, d])?;
        }
        GaussianVars::new(mu, log_var)
    }
}
