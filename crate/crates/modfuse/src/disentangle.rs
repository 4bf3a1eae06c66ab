//! Disentangled extraction and the mutual-information penalty.
//!
//! The extraction layer splits the fused representation into a
//! modality-shared vector (cross-attention from the sampled fusion over both
//! modalities' tokens) and per-modality specific vectors (self-attention over
//! each modality's own tokens). The CLUB estimator then upper-bounds the
//! mutual information between those parts so training can push them apart.

use rand::Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{attention, mean_rows, Activation, MlpSpec, ParamRegistry};
use crate::opt::Adam;
use crate::prob::{gaussian_log_density_rows, DistributionPredictor, DistributionPredictorVars};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

// ── disentangled extraction ──

/// Query/key/value projection weights, each `[d × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnProjector<S: Scalar> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
}

impl<S: Scalar> AttnProjector<S> {
    fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        AttnProjector {
            w_q: crate::nn::init_weight(&[d, d], d, rng),
            w_k: crate::nn::init_weight(&[d, d], d, rng),
            w_v: crate::nn::init_weight(&[d, d], d, rng),
        }
    }

    fn params(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        vec![
            (format!("{prefix}.wq"), &self.w_q),
            (format!("{prefix}.wk"), &self.w_k),
            (format!("{prefix}.wv"), &self.w_v),
        ]
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            (format!("{prefix}.wq"), &mut self.w_q),
            (format!("{prefix}.wk"), &mut self.w_k),
            (format!("{prefix}.wv"), &mut self.w_v),
        ]
    }

    fn bind(&self, reg: &mut ParamRegistry<S>, prefix: &str, trainable: bool) -> ProjectorVars<S> {
        ProjectorVars {
            w_q: reg.bind(format!("{prefix}.wq"), &self.w_q, trainable),
            w_k: reg.bind(format!("{prefix}.wk"), &self.w_k, trainable),
            w_v: reg.bind(format!("{prefix}.wv"), &self.w_v, trainable),
        }
    }

    fn vars_from<I: Iterator<Item = Var<S>>>(&self, it: &mut I) -> Result<ProjectorVars<S>> {
        Ok(ProjectorVars {
            w_q: crate::nn::next_var(it)?,
            w_k: crate::nn::next_var(it)?,
            w_v: crate::nn::next_var(it)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ProjectorVars<S: Scalar> {
    pub w_q: Var<S>,
    pub w_k: Var<S>,
    pub w_v: Var<S>,
}

/// Extraction layer parameters: one projector shared by the cross-attention
/// (query from the fused vector, keys/values from both modalities' tokens)
/// and one self-attention projector per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct DeLayer<S: Scalar> {
    pub shared: AttnProjector<S>,
    pub self_f: AttnProjector<S>,
    pub self_o: AttnProjector<S>,
    pub token_count: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct DeLayerVars<S: Scalar> {
    pub shared: ProjectorVars<S>,
    pub self_f: ProjectorVars<S>,
    pub self_o: ProjectorVars<S>,
}

impl<S: Scalar> DeLayer<S> {
    pub fn new<R: Rng>(token_count: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if token_count == 0 {
            return Err(Error::Contract("extraction layer needs at least one token".into()));
        }
        if dim == 0 {
            return Err(Error::Contract("extraction layer needs dim >= 1".into()));
        }
        Ok(DeLayer {
            shared: AttnProjector::new(dim, rng),
            self_f: AttnProjector::new(dim, rng),
            self_o: AttnProjector::new(dim, rng),
            token_count,
            dim,
        })
    }

    pub fn bind(&self, reg: &mut ParamRegistry<S>, prefix: &str, trainable: bool) -> DeLayerVars<S> {
        DeLayerVars {
            shared: self.shared.bind(reg, &format!("{prefix}.shared"), trainable),
            self_f: self.self_f.bind(reg, &format!("{prefix}.self_f"), trainable),
            self_o: self.self_o.bind(reg, &format!("{prefix}.self_o"), trainable),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.shared.params(&format!("{prefix}.shared"));
        out.extend(self.self_f.params(&format!("{prefix}.self_f")));
        out.extend(self.self_o.params(&format!("{prefix}.self_o")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.shared.params_mut(&format!("{prefix}.shared"));
        out.extend(self.self_f.params_mut(&format!("{prefix}.self_f")));
        out.extend(self.self_o.params_mut(&format!("{prefix}.self_o")));
        out
    }

    /// Rebuilds the var bundle from a flat var sequence in bind order.
    pub fn vars_from<I: Iterator<Item = Var<S>>>(&self, it: &mut I) -> Result<DeLayerVars<S>> {
        Ok(DeLayerVars {
            shared: self.shared.vars_from(it)?,
            self_f: self.self_f.vars_from(it)?,
            self_o: self.self_o.vars_from(it)?,
        })
    }
}

/// Runs the extraction layer over a batch.
///
/// `s` is `[B × d]` (one fused vector per sample); `e_f` and `e_o` are the
/// modality token grids flattened to `[B·L × d]`, sample-major. Returns
/// `(s_hat, r_f, r_o)`, each `[B × d]`:
///   - `s_hat[i]` = cross-attention: query `s[i]·Wq`, keys/values from the
///     2L stacked tokens of sample `i` (a single query row, so the token
///     mean-pool is the row itself);
///   - `r_m[i]` = self-attention over sample `i`'s own `L` tokens,
///     mean-pooled.
pub fn de_forward<S: Scalar>(
    layer: &DeLayer<S>,
    vars: &DeLayerVars<S>,
    s: &Var<S>,
    e_f: &Var<S>,
    e_o: &Var<S>,
) -> Result<(Var<S>, Var<S>, Var<S>)> {
    let (b, d, l) = (s.shape()[0], layer.dim, layer.token_count);
    if s.shape() != [b, d] {
        return Err(Error::shape("de_forward", format!("s must be [B × {d}], got {:?}", s.shape())));
    }
    for (name, e) in [("fundus", e_f), ("oct", e_o)] {
        if e.shape() != [b * l, d] {
            return Err(Error::shape(
                "de_forward",
                format!("{name} tokens must be [{} × {d}] (B·L sample-major), got {:?}", b * l, e.shape()),
            ));
        }
    }
    let tape = s.tape_handle();

    // Project every sample's tokens in one matmul per map, then attend
    // per sample on row slices.
    let q_all = s.matmul(&vars.shared.w_q)?;
    let k_f = e_f.matmul(&vars.shared.w_k)?;
    let v_f = e_f.matmul(&vars.shared.w_v)?;
    let k_o = e_o.matmul(&vars.shared.w_k)?;
    let v_o = e_o.matmul(&vars.shared.w_v)?;

    let mut s_hat_rows = Vec::with_capacity(b);
    for i in 0..b {
        let q = q_all.slice(0, i, 1)?;
        let k = tape.concat(&[k_f.slice(0, i * l, l)?, k_o.slice(0, i * l, l)?], 0)?;
        let v = tape.concat(&[v_f.slice(0, i * l, l)?, v_o.slice(0, i * l, l)?], 0)?;
        s_hat_rows.push(attention(&q, &k, &v)?);
    }
    let s_hat = tape.concat(&s_hat_rows, 0)?;

    let specific = |e: &Var<S>, proj: &ProjectorVars<S>| -> Result<Var<S>> {
        let q_m = e.matmul(&proj.w_q)?;
        let k_m = e.matmul(&proj.w_k)?;
        let v_m = e.matmul(&proj.w_v)?;
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let q = q_m.slice(0, i * l, l)?;
            let k = k_m.slice(0, i * l, l)?;
            let v = v_m.slice(0, i * l, l)?;
            rows.push(mean_rows(&attention(&q, &k, &v)?, &tape)?);
        }
        tape.concat(&rows, 0)
    };
    let r_f = specific(e_f, &vars.self_f)?;
    let r_o = specific(e_o, &vars.self_o)?;
    Ok((s_hat, r_f, r_o))
}

// ── CLUB mutual-information bound ──

/// Variational estimator `q(y|x)` backing the contrastive log-ratio MI upper
/// bound: a Gaussian whose mean/log-variance come from two MLP heads on `x`.
/// The heads are trained only by [`ClubEstimator::qnet_step`] (maximum
/// likelihood on observed pairs); the bound itself always freezes them.
#[derive(Debug, Clone)]
pub struct ClubEstimator<S: Scalar> {
    pub q: DistributionPredictor<S>,
    pub opt: Adam<S>,
}

impl<S: Scalar> ClubEstimator<S> {
    pub fn new<R: Rng>(x_dim: usize, y_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let spec = || MlpSpec::new(vec![x_dim, hidden, y_dim], false, Activation::Relu);
        let q = DistributionPredictor::new(spec()?, spec()?, false, rng)?;
        Ok(ClubEstimator { q, opt: Adam::new() })
    }

    pub fn x_dim(&self) -> usize {
        self.q.in_dim()
    }

    pub fn y_dim(&self) -> usize {
        self.q.out_dim()
    }

    fn bind_frozen(&self, reg: &mut ParamRegistry<S>) -> DistributionPredictorVars<S> {
        self.q.bind(reg, "club_q", false)
    }

    /// One maximum-likelihood step on the heads: minimizes
    /// `−(1/B)·Σ log q(y_i|x_i)` for the (detached) pairs, returns the
    /// pre-step negative log-likelihood.
    pub fn qnet_step(&mut self, x: &Tensor<S>, y: &Tensor<S>, lr: f64) -> Result<S> {
        check_pair_shapes("club_qnet_step", x.shape(), y.shape(), self.x_dim(), self.y_dim())?;
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = self.q.bind(&mut reg, "club_q", true);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let g = self.q.predict(&vars, &xv, "club_x")?;
        let nll = gaussian_log_density_rows(&g, &yv)?.mean().neg();
        let out = nll.item()?;
        nll.backward()?;
        let grads = reg.grads();
        let mut params = self.q.params_mut("club_q");
        self.opt.step(lr, &mut params, &grads)?;
        Ok(out)
    }
}

fn check_pair_shapes(
    op: &'static str,
    xs: &[usize],
    ys: &[usize],
    x_dim: usize,
    y_dim: usize,
) -> Result<()> {
    if xs.len() != 2 || ys.len() != 2 || xs[0] != ys[0] || xs[1] != x_dim || ys[1] != y_dim {
        return Err(Error::shape(
            op,
            format!("expected x [B × {x_dim}] and y [B × {y_dim}], got {xs:?} and {ys:?}"),
        ));
    }
    if xs[0] < 2 {
        return Err(Error::Contract(format!("{op} needs batch >= 2, got {}", xs[0])));
    }
    Ok(())
}

/// Contrastive log-ratio MI upper bound between paired batches:
/// `(1/B)·Σ_i log q(y_i|x_i) − (1/B²)·Σ_i Σ_j log q(y_j|x_i)`.
///
/// Differentiable w.r.t. `x` and `y`; the q heads are bound frozen, so no
/// gradient reaches them. Can be negative while q is still untrained.
///
/// The all-pairs negative term is collapsed to O(B·d) using per-column
/// moments of `y`: `Σ_j (y_jd − μ_id)² = Σ_j y_jd² − 2·μ_id·Σ_j y_jd + B·μ_id²`.
pub fn club_mi_upper<S: Scalar>(
    est: &mut ClubEstimator<S>,
    x: &Var<S>,
    y: &Var<S>,
) -> Result<Var<S>> {
    check_pair_shapes("club_mi_upper", &x.shape(), &y.shape(), est.x_dim(), est.y_dim())?;
    let (b, d) = (y.shape()[0], y.shape()[1]);
    let tape = x.tape_handle();
    let mut reg = ParamRegistry::new(&tape);
    let vars = est.bind_frozen(&mut reg);
    let g = est.q.predict(&vars, x, "club_x")?;

    let positive = gaussian_log_density_rows(&g, y)?.mean();

    let ones = tape.ones(&[1, b]);
    let col_sum_y = ones.matmul(y)?; // [1 × d]
    let col_sum_y2 = ones.matmul(&y.square())?; // [1 × d]
    let quad = col_sum_y2
        .broadcast_to(&[b, d])?
        .sub(&g.mu.mul(&col_sum_y.broadcast_to(&[b, d])?)?.scale(2.0))?
        .add(&g.mu.square().scale(b as f64))?;
    let inner = quad.mul(&g.log_var.neg().exp())?.add(&g.log_var.add_const(LN_2PI).scale(b as f64))?;
    let negative = inner.sum().scale(-0.5 / (b as f64 * b as f64));

    positive.sub(&negative)
}

/// The disentanglement penalty: MI(shared, both-specifics-concatenated) plus
/// MI(fundus-specific, oct-specific), each via [`club_mi_upper`]. Gradients
/// flow into the extraction layer and encoders; never into the q heads.
pub fn mi_loss<S: Scalar>(
    est_shared: &mut ClubEstimator<S>,
    est_cross: &mut ClubEstimator<S>,
    s_hat: &Var<S>,
    r_f: &Var<S>,
    r_o: &Var<S>,
) -> Result<Var<S>> {
    let tape = s_hat.tape_handle();
    let r_tilde = tape.concat(&[r_f.clone(), r_o.clone()], 1)?;
    let term_shared = club_mi_upper(est_shared, s_hat, &r_tilde)?;
    let term_cross = club_mi_upper(est_cross, r_f, r_o)?;
    term_shared.add(&term_cross)
}

/// Detached tensor pairs for the interleaved q-net updates matching
/// [`mi_loss`]'s two estimators: `(s_hat, [r_f ‖ r_o])` and `(r_f, r_o)`.
pub fn mi_qnet_pairs<S: Scalar>(
    s_hat: &Var<S>,
    r_f: &Var<S>,
    r_o: &Var<S>,
) -> Result<[(Tensor<S>, Tensor<S>); 2]> {
    let sh = s_hat.to_tensor();
    let rf = r_f.to_tensor();
    let ro = r_o.to_tensor();
    let b = sh.shape()[0];
    let (df, do_) = (rf.shape()[1], ro.shape()[1]);
    let mut cat = Vec::with_capacity(b * (df + do_));
    for i in 0..b {
        cat.extend_from_slice(&rf.data()[i * df..(i + 1) * df]);
        cat.extend_from_slice(&ro.data()[i * do_..(i + 1) * do_]);
    }
    let r_tilde = Tensor::new(vec![b, df + do_], cat)?;
    Ok([(sh, r_tilde), (rf, ro)])
}

/// Convenience: `club_mi_upper` on plain tensors (no gradient consumers).
pub fn club_mi_upper_value<S: Scalar>(
    est: &mut ClubEstimator<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
) -> Result<S> {
    let tape = Tape::new();
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    club_mi_upper(est, &xv, &yv)?.item()
}

/// Serializable view of an estimator's optimizer state keyed by name.
pub fn club_opt_slots<S: Scalar>(est: &ClubEstimator<S>) -> BTreeMap<String, (Vec<S>, Vec<S>)> {
    est.opt.slots().map(|(n, s)| (n.clone(), (s.m.clone(), s.v.clone()))).collect()
}
