//! Full model assembly: per-token encoders, per-modality distribution heads,
//! product-of-experts fusion (raw-feature or proxy-guided), the
//! shared/specific extraction layer, CLUB estimators, the proxy bank, learned
//! placeholder token grids for missing modalities, and a linear classifier —
//! plus a self-describing binary checkpoint format with FNV-1a digests.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::fnv1a64;
use crate::disentangle::{de_forward, ClubEstimator, DeLayer, DeLayerVars};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec, MlpVars, Mode, ParamRegistry};
use crate::opt::{Adam, AdamSlot};
use crate::prob::{
    poe_join_vars, sample_reparam_vars, DistributionPredictor, DistributionPredictorVars,
    GaussianVars,
};
use crate::proxy::{proxy_joint, ProxyBank, ProxyBankVars};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ── modalities ──────────────────────────────────────────────────────────────

pub const MODALITY_COUNT: usize = 2;

/// The two imaging modalities the pipeline fuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Fundus,
    Oct,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Fundus => 0,
            Modality::Oct => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Fundus => "fundus",
            Modality::Oct => "oct",
        }
    }

    pub fn all() -> [Modality; MODALITY_COUNT] {
        [Modality::Fundus, Modality::Oct]
    }
}

// ── ablation presets ────────────────────────────────────────────────────────

/// Architectural presets, ordered from the plainest baseline to the full
/// method. Each adds one ingredient:
///
/// | preset       | fused `s`                  | extraction | extra losses  |
/// |--------------|-----------------------------|------------|---------------|
/// | FeatureFusion| mean of pooled features     | no         | —             |
/// | RawJoint     | PoE over feature experts    | no         | —             |
/// | RawJointDe   | PoE over feature experts    | yes        | mutual info   |
/// | ProxyJoint   | PoE over proxy experts      | no         | proxy         |
/// | Full         | PoE over proxy experts      | yes        | both          |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    FeatureFusion,
    RawJoint,
    RawJointDe,
    ProxyJoint,
    Full,
}

impl Ablation {
    pub fn all() -> [Ablation; 5] {
        [
            Ablation::FeatureFusion,
            Ablation::RawJoint,
            Ablation::RawJointDe,
            Ablation::ProxyJoint,
            Ablation::Full,
        ]
    }

    /// Roman-numeral experiment label used in reports.
    pub fn roman(self) -> &'static str {
        match self {
            Ablation::FeatureFusion => "I",
            Ablation::RawJoint => "II",
            Ablation::RawJointDe => "III",
            Ablation::ProxyJoint => "IV",
            Ablation::Full => "V",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::FeatureFusion => "feature-fusion",
            Ablation::RawJoint => "raw-joint",
            Ablation::RawJointDe => "raw-joint-de",
            Ablation::ProxyJoint => "proxy-joint",
            Ablation::Full => "full",
        }
    }

    /// Accepts the kebab-case name or the roman/arabic experiment number.
    pub fn parse(s: &str) -> Result<Ablation> {
        let norm = s.trim().to_ascii_lowercase();
        let found = Ablation::all()
            .into_iter()
            .find(|a| norm == a.name() || norm == a.roman().to_ascii_lowercase());
        let by_number = match norm.as_str() {
            "1" => Some(Ablation::FeatureFusion),
            "2" => Some(Ablation::RawJoint),
            "3" => Some(Ablation::RawJointDe),
            "4" => Some(Ablation::ProxyJoint),
            "5" => Some(Ablation::Full),
            _ => None,
        };
        found.or(by_number).ok_or_else(|| {
            Error::Param(format!(
                "unknown ablation {s:?}; expected one of feature-fusion, raw-joint, \
                 raw-joint-de, proxy-joint, full (or I..V)"
            ))
        })
    }

    /// Whether the fused representation is a reparameterized sample from a
    /// product-of-experts joint (everything except plain feature fusion).
    pub fn uses_sampling(self) -> bool {
        self != Ablation::FeatureFusion
    }

    /// Whether the joint is built from class-proxy experts rather than the
    /// raw per-sample features.
    pub fn uses_proxy_joint(self) -> bool {
        matches!(self, Ablation::ProxyJoint | Ablation::Full)
    }

    /// Whether the shared/specific extraction layer runs.
    pub fn uses_extraction(self) -> bool {
        matches!(self, Ablation::RawJointDe | Ablation::Full)
    }

    /// Whether the mutual-information penalty applies (requires extraction).
    pub fn uses_mi(self) -> bool {
        self.uses_extraction()
    }

    /// Whether the proxy similarity loss applies.
    pub fn uses_proxy_loss(self) -> bool {
        self.uses_proxy_joint()
    }
}

// ── configuration ───────────────────────────────────────────────────────────

/// Architecture hyperparameters. All fields have defaults, so a config file
/// may set any subset; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Tokens per modality (`L`).
    pub token_count: usize,
    /// Per-token input width fed to the encoders.
    pub raw_dim: usize,
    /// Model width `d`: encoder outputs, latents, proxies all live in `R^d`.
    pub dim: usize,
    /// Number of classes `C`.
    pub classes: usize,
    /// Hidden widths of the per-token encoders.
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of the mean/log-variance heads.
    pub predictor_hidden: Vec<usize>,
    /// Hidden width of the CLUB variational networks.
    pub q_hidden: usize,
    /// Proxies per (modality, class) set.
    pub proxies_per_class: usize,
    /// Tie the predicted variance to a single value per row.
    pub spherical_variance: bool,
    /// Batchnorm on encoder and predictor hidden layers.
    pub batchnorm: bool,
    /// Prior mean, broadcast over all `d` dimensions.
    pub prior_mu: f64,
    /// Prior log-variance, broadcast over all `d` dimensions.
    pub prior_log_var: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            token_count: 4,
            raw_dim: 32,
            dim: 32,
            classes: 3,
            encoder_hidden: vec![64],
            predictor_hidden: vec![32],
            q_hidden: 64,
            proxies_per_class: 8,
            spherical_variance: false,
            batchnorm: true,
            prior_mu: 0.0,
            prior_log_var: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_count == 0
            || self.raw_dim == 0
            || self.dim == 0
            || self.q_hidden == 0
            || self.proxies_per_class == 0
        {
            return Err(Error::Config(format!(
                "all architecture sizes must be >= 1: token_count={}, raw_dim={}, dim={}, \
                 q_hidden={}, proxies_per_class={}",
                self.token_count, self.raw_dim, self.dim, self.q_hidden, self.proxies_per_class
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes, got {}",
                self.classes
            )));
        }
        // The distillation loss partitions the fused vector (width 3d) into
        // one segment per class, so 3d must divide evenly.
        if (3 * self.dim) % self.classes != 0 {
            return Err(Error::Config(format!(
                "fused width 3*dim = {} must be divisible by classes = {}",
                3 * self.dim,
                self.classes
            )));
        }
        if !self.prior_mu.is_finite() || !self.prior_log_var.is_finite() {
            return Err(Error::Config("prior parameters must be finite".into()));
        }
        Ok(())
    }

    /// Width of the fused vector `D = [s_hat | r_f | r_o]`.
    pub fn fused_dim(&self) -> usize {
        3 * self.dim
    }
}

// ── model state ─────────────────────────────────────────────────────────────

/// Everything trainable plus optimizer and batchnorm state. Construction is
/// deterministic in (config, seed).
pub struct ModelState<S: Scalar> {
    pub config: ModelConfig,
    pub enc_f: Mlp<S>,
    pub enc_o: Mlp<S>,
    pub pred_f: DistributionPredictor<S>,
    pub pred_o: DistributionPredictor<S>,
    pub de: DeLayer<S>,
    pub club_shared: ClubEstimator<S>,
    pub club_cross: ClubEstimator<S>,
    pub proxies: ProxyBank<S>,
    pub classifier: Mlp<S>,
    pub placeholder_f: Tensor<S>,
    pub placeholder_o: Tensor<S>,
    pub opt: Adam<S>,
    mode: Mode,
}

/// Var handles for one bound forward pass. The CLUB q-nets are absent by
/// design: they are never trained by the main objective and bind themselves
/// inside the mutual-information bound instead.
pub struct ModelVars<S: Scalar> {
    pub enc_f: MlpVars<S>,
    pub enc_o: MlpVars<S>,
    pub pred_f: DistributionPredictorVars<S>,
    pub pred_o: DistributionPredictorVars<S>,
    pub de: DeLayerVars<S>,
    pub proxies: ProxyBankVars<S>,
    pub classifier: MlpVars<S>,
    pub placeholder_f: Var<S>,
    pub placeholder_o: Var<S>,
}

/// One batch of inputs. `x_*` hold `token_count` consecutive rows per sample
/// (`[B*L × raw_dim]`); `None` marks the modality as missing, in which case
/// the learned placeholder grid substitutes for the encoder output. Labels
/// are required for training-mode proxy selection and the supervised losses.
pub struct ForwardBatch<'a, S: Scalar> {
    pub x_f: Option<&'a Tensor<S>>,
    pub x_o: Option<&'a Tensor<S>>,
    pub labels: Option<&'a [usize]>,
    pub batch: usize,
}

/// Per-call forward options. `epsilon` is the reparameterization draw
/// (`[B × dim]`); `None` means zero noise, which evaluation uses so that the
/// fused representation is exactly the joint mean.
pub struct ForwardOpts<'a, S: Scalar> {
    pub preset: Ablation,
    pub epsilon: Option<&'a Tensor<S>>,
}

/// Forward results, all living on the call's tape.
pub struct ForwardOutput<S: Scalar> {
    /// Fused vector `D` `[B × 3d]` — the distillation feature.
    pub fused: Var<S>,
    /// Classifier logits `[B × classes]`.
    pub logits: Var<S>,
    /// Mean-pooled encoder features per modality `[B × dim]`.
    pub pooled_f: Var<S>,
    pub pooled_o: Var<S>,
    /// The fused representation before extraction `[B × dim]`.
    pub s: Var<S>,
    /// The product-of-experts joint `s` was sampled from (absent under plain
    /// feature fusion).
    pub joint: Option<GaussianVars<S>>,
    /// `(s_hat, r_f, r_o)` when the extraction layer ran.
    pub parts: Option<(Var<S>, Var<S>, Var<S>)>,
}

/// Mean-pools each sample's `tokens` consecutive rows: `[B*L × d] -> [B × d]`.
/// Implemented as one matmul with a constant block-structured pooling matrix.
pub fn pool_tokens<S: Scalar>(
    tape: &Tape<S>,
    e: &Var<S>,
    batch: usize,
    tokens: usize,
) -> Result<Var<S>> {
    let shape = e.shape();
    if shape.len() != 2 || shape[0] != batch * tokens {
        return Err(Error::shape(
            "pool_tokens",
            format!("expected [{} × d], got {shape:?}", batch * tokens),
        ));
    }
    let cols = batch * tokens;
    let mut p = Tensor::zeros(&[batch, cols]);
    let w = c::<S>(1.0 / tokens as f64);
    for i in 0..batch {
        for j in 0..tokens {
            p.data_mut()[i * cols + i * tokens + j] = w;
        }
    }
    tape.constant(&p).matmul(e)
}

/// Stacks `times` copies of `v` along axis 0. Gradient accumulates back into
/// the single underlying leaf, which is what placeholder substitution needs.
fn tile_rows<S: Scalar>(v: &Var<S>, times: usize) -> Result<Var<S>> {
    let tape = v.tape_handle();
    tape.concat(&vec![v.clone(); times], 0)
}

impl<S: Scalar> ModelState<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;

        let enc_spec = |cfg: &ModelConfig| -> Result<MlpSpec> {
            let mut widths = vec![cfg.raw_dim];
            widths.extend_from_slice(&cfg.encoder_hidden);
            widths.push(cfg.dim);
            MlpSpec::new(widths, cfg.batchnorm, Activation::Relu)
        };
        let head_spec = |cfg: &ModelConfig| -> Result<MlpSpec> {
            let mut widths = vec![cfg.dim];
            widths.extend_from_slice(&cfg.predictor_hidden);
            widths.push(cfg.dim);
            MlpSpec::new(widths, cfg.batchnorm, Activation::Relu)
        };

        let enc_f = Mlp::new(enc_spec(&config)?, &mut rng);
        let enc_o = Mlp::new(enc_spec(&config)?, &mut rng);
        let pred_f = DistributionPredictor::new(
            head_spec(&config)?,
            head_spec(&config)?,
            config.spherical_variance,
            &mut rng,
        )?;
        let pred_o = DistributionPredictor::new(
            head_spec(&config)?,
            head_spec(&config)?,
            config.spherical_variance,
            &mut rng,
        )?;
        let de = DeLayer::new(config.token_count, d, &mut rng)?;
        let club_shared = ClubEstimator::new(d, 2 * d, config.q_hidden, &mut rng)?;
        let club_cross = ClubEstimator::new(d, d, config.q_hidden, &mut rng)?;
        let proxies = ProxyBank::new(
            MODALITY_COUNT,
            config.classes,
            config.proxies_per_class,
            d,
            &mut rng,
        )?;
        let classifier = Mlp::new(
            MlpSpec::new(vec![config.fused_dim(), config.classes], false, Activation::Identity)?,
            &mut rng,
        );
        // Placeholders stand in for encoder outputs, so they share the same
        // init scale as everything else that lives in R^d.
        let std = 1.0 / (d as f64).sqrt();
        let placeholder_f = Tensor::randn(&[config.token_count, d], std, &mut rng);
        let placeholder_o = Tensor::randn(&[config.token_count, d], std, &mut rng);

        Ok(ModelState {
            config,
            enc_f,
            enc_o,
            pred_f,
            pred_o,
            de,
            club_shared,
            club_cross,
            proxies,
            classifier,
            placeholder_f,
            placeholder_o,
            opt: Adam::new(),
            mode: Mode::Train,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches train/eval for every batchnorm in the model.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.enc_f.set_mode(mode);
        self.enc_o.set_mode(mode);
        self.pred_f.set_mode(mode);
        self.pred_o.set_mode(mode);
        self.classifier.set_mode(mode);
    }

    /// Binds every main-objective parameter onto a fresh registry. Bind names
    /// equal [`ModelState::params`] names, so optimizer slots, gradient maps
    /// and checkpoints all share one namespace.
    pub fn bind(&self, reg: &mut ParamRegistry<S>, trainable: bool) -> ModelVars<S> {
        ModelVars {
            enc_f: self.enc_f.bind(reg, "enc_f", trainable),
            enc_o: self.enc_o.bind(reg, "enc_o", trainable),
            pred_f: self.pred_f.bind(reg, "pred_f", trainable),
            pred_o: self.pred_o.bind(reg, "pred_o", trainable),
            de: self.de.bind(reg, "de", trainable),
            proxies: self.proxies.bind(reg, "proxy", trainable),
            classifier: self.classifier.bind(reg, "classifier", trainable),
            placeholder_f: reg.bind("placeholder.f".into(), &self.placeholder_f, trainable),
            placeholder_o: reg.bind("placeholder.o".into(), &self.placeholder_o, trainable),
        }
    }

    /// Main-objective parameters (everything the teacher/student optimizers
    /// may touch; the CLUB q-nets train separately and are excluded).
    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.enc_f.params("enc_f");
        out.extend(self.enc_o.params("enc_o"));
        out.extend(self.pred_f.params("pred_f"));
        out.extend(self.pred_o.params("pred_o"));
        out.extend(self.de.params("de"));
        out.extend(self.proxies.params("proxy"));
        out.extend(self.classifier.params("classifier"));
        out.push(("placeholder.f".into(), &self.placeholder_f));
        out.push(("placeholder.o".into(), &self.placeholder_o));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.enc_f.params_mut("enc_f");
        out.extend(self.enc_o.params_mut("enc_o"));
        out.extend(self.pred_f.params_mut("pred_f"));
        out.extend(self.pred_o.params_mut("pred_o"));
        out.extend(self.de.params_mut("de"));
        out.extend(self.proxies.params_mut("proxy"));
        out.extend(self.classifier.params_mut("classifier"));
        out.push(("placeholder.f".into(), &mut self.placeholder_f));
        out.push(("placeholder.o".into(), &mut self.placeholder_o));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds a [`ModelVars`] bundle from a flat var sequence laid out in
    /// [`ModelState::params`] order, for gradient-verification drivers that
    /// own the leaves themselves.
    pub fn vars_from<I: Iterator<Item = Var<S>>>(&self, it: &mut I) -> Result<ModelVars<S>> {
        Ok(ModelVars {
            enc_f: self.enc_f.vars_from(it)?,
            enc_o: self.enc_o.vars_from(it)?,
            pred_f: self.pred_f.vars_from(it)?,
            pred_o: self.pred_o.vars_from(it)?,
            de: self.de.vars_from(it)?,
            proxies: self.proxies.vars_from(it)?,
            classifier: self.classifier.vars_from(it)?,
            placeholder_f: crate::nn::next_var(it)?,
            placeholder_o: crate::nn::next_var(it)?,
        })
    }

    /// One optimizer step over the main parameters. Gradients are keyed by
    /// the shared bind/param names; parameters without an entry stay put.
    pub fn main_opt_step(&mut self, lr: f64, grads: &BTreeMap<String, Vec<S>>) -> Result<()> {
        let mut opt = std::mem::replace(&mut self.opt, Adam::new());
        let result = opt.step(lr, &mut self.params_mut(), grads);
        self.opt = opt;
        result
    }

    /// Exact copy of the full state (parameters, batchnorm statistics,
    /// optimizer slots) via the checkpoint codec — how the student starts
    /// co-training as a clone of the trained teacher.
    pub fn clone_state(&self) -> Result<Self> {
        let mut copy = Self::from_bytes(&self.to_bytes()?)?;
        copy.set_mode(self.mode);
        Ok(copy)
    }

    /// Batchnorm running statistics across all submodules, checkpoint-named.
    fn bn_stat_entries(&self) -> Vec<(String, &Vec<S>)> {
        let mut out = self.enc_f.bn_stats("enc_f");
        out.extend(self.enc_o.bn_stats("enc_o"));
        out.extend(self.pred_f.bn_stats("pred_f"));
        out.extend(self.pred_o.bn_stats("pred_o"));
        out
    }

    fn bn_stat_entries_mut(&mut self) -> Vec<(String, &mut Vec<S>)> {
        let mut out = self.enc_f.bn_stats_mut("enc_f");
        out.extend(self.enc_o.bn_stats_mut("enc_o"));
        out.extend(self.pred_f.bn_stats_mut("pred_f"));
        out.extend(self.pred_o.bn_stats_mut("pred_o"));
        out
    }

    /// Per-modality class selection for the proxy path: ground-truth labels
    /// when given (training), otherwise nearest class by mean cosine
    /// similarity against each class's proxy set (inference).
    fn select_classes(
        &self,
        pooled: &Var<S>,
        modality: usize,
        labels: Option<&[usize]>,
    ) -> Result<Vec<usize>> {
        if let Some(labels) = labels {
            for &l in labels {
                if l >= self.config.classes {
                    return Err(Error::Param(format!(
                        "label {l} out of range for {} classes",
                        self.config.classes
                    )));
                }
            }
            return Ok(labels.to_vec());
        }
        let feats = pooled.to_tensor();
        let d = self.config.dim;
        let mut classes = Vec::with_capacity(feats.shape()[0]);
        for i in 0..feats.shape()[0] {
            let row = &feats.data()[i * d..(i + 1) * d];
            classes.push(self.proxies.select_positive(row, modality, None)?.class);
        }
        Ok(classes)
    }

    /// Runs the full pipeline for one batch. Token features come from the
    /// encoders (or the placeholder grids when a modality is missing), the
    /// fused representation `s` follows the preset, the extraction layer
    /// splits it into shared/specific parts where enabled, and the linear
    /// head maps the fused vector to logits. Deterministic given inputs,
    /// parameters and the epsilon draw.
    pub fn forward(
        &mut self,
        tape: &Tape<S>,
        vars: &ModelVars<S>,
        batch: &ForwardBatch<S>,
        opts: &ForwardOpts<S>,
    ) -> Result<ForwardOutput<S>> {
        let b = batch.batch;
        let (l, d) = (self.config.token_count, self.config.dim);
        if b == 0 {
            return Err(Error::Contract("forward needs a non-empty batch".into()));
        }
        if batch.x_f.is_none() && batch.x_o.is_none() {
            return Err(Error::Contract(
                "at least one modality must be available (both are missing)".into(),
            ));
        }
        if let Some(labels) = batch.labels {
            if labels.len() != b {
                return Err(Error::shape(
                    "forward",
                    format!("batch has {b} samples but {} labels", labels.len()),
                ));
            }
        }

        // token features: encoder output, or the placeholder grid tiled over
        // the batch when the modality is missing
        let encode = |mlp: &mut Mlp<S>,
                          mlp_vars: &MlpVars<S>,
                          x: Option<&Tensor<S>>,
                          placeholder: &Var<S>,
                          name: &str|
         -> Result<Var<S>> {
            match x {
                Some(x) => {
                    if x.shape() != [b * l, self.config.raw_dim] {
                        return Err(Error::shape(
                            "forward",
                            format!(
                                "{name} input must be [{} × {}], got {:?}",
                                b * l,
                                self.config.raw_dim,
                                x.shape()
                            ),
                        ));
                    }
                    if !x.is_finite() {
                        return Err(Error::Numeric(format!("non-finite values in {name} input")));
                    }
                    mlp.forward(mlp_vars, &tape.constant(x))
                }
                None => tile_rows(placeholder, b),
            }
        };
        let e_f = encode(&mut self.enc_f, &vars.enc_f, batch.x_f, &vars.placeholder_f, "fundus")?;
        let e_o = encode(&mut self.enc_o, &vars.enc_o, batch.x_o, &vars.placeholder_o, "oct")?;

        let pooled_f = pool_tokens(tape, &e_f, b, l)?;
        let pooled_o = pool_tokens(tape, &e_o, b, l)?;

        // fused representation s
        let (s, joint) = if !opts.preset.uses_sampling() {
            (pooled_f.add(&pooled_o)?.scale(0.5), None)
        } else {
            let prior = GaussianVars::new(
                tape.constant(&Tensor::full(&[b, d], c(self.config.prior_mu))),
                tape.constant(&Tensor::full(&[b, d], c(self.config.prior_log_var))),
            )?;
            let joint = if opts.preset.uses_proxy_joint() {
                let classes_f = self.select_classes(&pooled_f, 0, batch.labels)?;
                let classes_o = self.select_classes(&pooled_o, 1, batch.labels)?;
                proxy_joint(
                    &self.proxies,
                    &vars.proxies,
                    &mut [
                        (0, &mut self.pred_f, &vars.pred_f, &classes_f),
                        (1, &mut self.pred_o, &vars.pred_o, &classes_o),
                    ],
                    &prior,
                )?
            } else {
                let expert_f = self.pred_f.predict(&vars.pred_f, &pooled_f, "fundus")?;
                let expert_o = self.pred_o.predict(&vars.pred_o, &pooled_o, "oct")?;
                poe_join_vars(&prior, &[expert_f, expert_o])?
            };
            let eps = match opts.epsilon {
                Some(t) => {
                    if t.shape() != [b, d] {
                        return Err(Error::shape(
                            "forward",
                            format!("epsilon must be [{b} × {d}], got {:?}", t.shape()),
                        ));
                    }
                    tape.constant(t)
                }
                None => tape.constant(&Tensor::zeros(&[b, d])),
            };
            let s = sample_reparam_vars(&joint, &eps)?;
            (s, Some(joint))
        };

        // fused vector D and logits
        let (fused, parts) = if opts.preset.uses_extraction() {
            let (s_hat, r_f, r_o) = de_forward(&self.de, &vars.de, &s, &e_f, &e_o)?;
            let fused = tape.concat(&[s_hat.clone(), r_f.clone(), r_o.clone()], 1)?;
            (fused, Some((s_hat, r_f, r_o)))
        } else {
            (tape.concat(&[s.clone(), pooled_f.clone(), pooled_o.clone()], 1)?, None)
        };
        let logits = self.classifier.forward(&vars.classifier, &fused)?;

        Ok(ForwardOutput { fused, logits, pooled_f, pooled_o, s, joint, parts })
    }
}

// ── checkpoints ─────────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 8] = b"MFCKPT01";

fn block_bytes(name: &str, shape: &[usize], data: impl Iterator<Item = f64>, out: &mut Vec<u8>) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &dim in shape {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds usize")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// FNV-1a digest of an on-disk checkpoint (or any other emitted file).
pub fn file_digest(path: &Path) -> Result<u64> {
    Ok(fnv1a64(&std::fs::read(path)?))
}

impl<S: Scalar> ModelState<S> {
    /// All named f64 blocks: parameters (q-nets included), batchnorm running
    /// statistics, and optimizer state for the main and q-net optimizers.
    fn collect_blocks(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let push_params = |params: Vec<(String, &Tensor<S>)>,
                               blocks: &mut Vec<(String, Vec<usize>, Vec<f64>)>| {
            for (name, t) in params {
                blocks.push((
                    name,
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_f64_c()).collect(),
                ));
            }
        };
        push_params(self.params(), &mut blocks);
        push_params(self.club_shared.q.params("club_shared.q"), &mut blocks);
        push_params(self.club_cross.q.params("club_cross.q"), &mut blocks);
        for (name, v) in self.bn_stat_entries() {
            blocks.push((name, vec![v.len()], v.iter().map(|x| x.to_f64_c()).collect()));
        }
        let mut push_opt = |prefix: &str, opt: &Adam<S>| {
            blocks.push((format!("{prefix}.t"), vec![1], vec![opt.t() as f64]));
            for (name, slot) in opt.slots() {
                blocks.push((
                    format!("{prefix}.m.{name}"),
                    vec![slot.m.len()],
                    slot.m.iter().map(|v| v.to_f64_c()).collect(),
                ));
                blocks.push((
                    format!("{prefix}.v.{name}"),
                    vec![slot.v.len()],
                    slot.v.iter().map(|v| v.to_f64_c()).collect(),
                ));
            }
        };
        push_opt("opt", &self.opt);
        push_opt("club_shared.opt", &self.club_shared.opt);
        push_opt("club_cross.opt", &self.club_cross.opt);
        blocks
    }

    /// Serializes the complete state: magic, config echo (JSON), then named
    /// f64 little-endian blocks.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_string(&self.config)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
        let blocks = self.collect_blocks();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
        for (name, shape, data) in &blocks {
            block_bytes(name, shape, data.iter().copied(), &mut out);
        }
        Ok(out)
    }

    /// Writes the checkpoint and returns its FNV-1a digest.
    pub fn save(&self, path: &Path) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(fnv1a64(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds a model from checkpoint bytes. Every parameter, batchnorm
    /// buffer and optimizer slot must be present with its exact shape, and no
    /// unknown blocks may remain — a checkpoint either restores the full
    /// state bit-for-bit (in f64) or fails loudly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let config_len = r.usize()?;
        let config_json = std::str::from_utf8(r.take(config_len)?)
            .map_err(|e| Error::Format(format!("config echo is not UTF-8: {e}")))?;
        let config: ModelConfig = serde_json::from_str(config_json)
            .map_err(|e| Error::Format(format!("bad config echo: {e}")))?;

        let n_blocks = r.usize()?;
        let mut map: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..n_blocks {
            let name_len = r.usize()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("block name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.usize()?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.usize()?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(
                || Error::Format(format!("block {name} has an overflowing shape {shape:?}")),
            )?;
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
                .collect();
            if map.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Format(format!("duplicate block {name}")));
            }
        }
        if !r.done() {
            return Err(Error::Format("trailing bytes after the last block".into()));
        }

        let mut model = ModelState::<S>::new(config, 0)?;

        fn fill_tensor<S: Scalar>(
            map: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
            name: &str,
            t: &mut Tensor<S>,
        ) -> Result<()> {
            let (shape, data) = map
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing block {name}")))?;
            if shape != t.shape() {
                return Err(Error::Format(format!(
                    "block {name} has shape {shape:?}, model expects {:?}",
                    t.shape()
                )));
            }
            for (dst, src) in t.data_mut().iter_mut().zip(&data) {
                *dst = S::from_f64_c(*src);
            }
            Ok(())
        }

        for (name, t) in model.params_mut() {
            fill_tensor(&mut map, &name, t)?;
        }
        for (name, t) in model.club_shared.q.params_mut("club_shared.q") {
            fill_tensor(&mut map, &name, t)?;
        }
        for (name, t) in model.club_cross.q.params_mut("club_cross.q") {
            fill_tensor(&mut map, &name, t)?;
        }
        for (name, v) in model.bn_stat_entries_mut() {
            let (shape, data) = map
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing block {name}")))?;
            if shape != [v.len()] {
                return Err(Error::Format(format!(
                    "block {name} has shape {shape:?}, model expects [{}]",
                    v.len()
                )));
            }
            for (dst, src) in v.iter_mut().zip(&data) {
                *dst = S::from_f64_c(*src);
            }
        }

        // optimizer state: slot names must match a parameter of the same size
        fn restore_opt<S: Scalar>(
            map: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
            prefix: &str,
            sizes: &BTreeMap<String, usize>,
        ) -> Result<(u64, BTreeMap<String, AdamSlot<S>>)> {
            let (shape, data) = map
                .remove(&format!("{prefix}.t"))
                .ok_or_else(|| Error::Format(format!("checkpoint is missing block {prefix}.t")))?;
            if shape != [1] {
                return Err(Error::Format(format!("{prefix}.t must be a single value")));
            }
            let t = data[0] as u64;
            let m_prefix = format!("{prefix}.m.");
            let names: Vec<String> = map
                .keys()
                .filter(|k| k.starts_with(&m_prefix))
                .map(|k| k[m_prefix.len()..].to_string())
                .collect();
            let mut slots = BTreeMap::new();
            for name in names {
                let (_, m) = map.remove(&format!("{prefix}.m.{name}")).expect("listed above");
                let (_, v) = map
                    .remove(&format!("{prefix}.v.{name}"))
                    .ok_or_else(|| Error::Format(format!("{prefix}.v.{name} is missing")))?;
                let expected = *sizes.get(&name).ok_or_else(|| {
                    Error::Format(format!("optimizer slot {name} matches no parameter"))
                })?;
                if m.len() != expected || v.len() != expected {
                    return Err(Error::Format(format!(
                        "optimizer slot {name} has {} values, parameter has {expected}",
                        m.len()
                    )));
                }
                slots.insert(
                    name,
                    AdamSlot {
                        m: m.into_iter().map(S::from_f64_c).collect(),
                        v: v.into_iter().map(S::from_f64_c).collect(),
                    },
                );
            }
            Ok((t, slots))
        }

        let main_sizes: BTreeMap<String, usize> =
            model.params().into_iter().map(|(n, t)| (n, t.numel())).collect();
        let (t, slots) = restore_opt::<S>(&mut map, "opt", &main_sizes)?;
        model.opt.restore(t, slots);
        // q-net optimizers key their slots by the internal q-step bind names
        let q_sizes = |est: &ClubEstimator<S>| -> BTreeMap<String, usize> {
            est.q.params("club_q").into_iter().map(|(n, t)| (n, t.numel())).collect()
        };
        let (t, slots) =
            restore_opt::<S>(&mut map, "club_shared.opt", &q_sizes(&model.club_shared))?;
        model.club_shared.opt.restore(t, slots);
        let (t, slots) = restore_opt::<S>(&mut map, "club_cross.opt", &q_sizes(&model.club_cross))?;
        model.club_cross.opt.restore(t, slots);

        if let Some(name) = map.keys().next() {
            return Err(Error::Format(format!("checkpoint has unknown block {name}")));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            token_count: 2,
            raw_dim: 3,
            dim: 4,
            classes: 2,
            encoder_hidden: vec![5],
            predictor_hidden: vec![4],
            q_hidden: 6,
            proxies_per_class: 2,
            spherical_variance: false,
            batchnorm: true,
            prior_mu: 0.0,
            prior_log_var: 0.0,
        }
    }

    fn random_batch(
        cfg: &ModelConfig,
        b: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor<f64>, Tensor<f64>, Vec<usize>) {
        let x_f = Tensor::randn(&[b * cfg.token_count, cfg.raw_dim], 1.0, rng);
        let x_o = Tensor::randn(&[b * cfg.token_count, cfg.raw_dim], 1.0, rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..cfg.classes)).collect();
        (x_f, x_o, labels)
    }

    fn run_forward(
        model: &mut ModelState<f64>,
        x_f: Option<&Tensor<f64>>,
        x_o: Option<&Tensor<f64>>,
        labels: Option<&[usize]>,
        b: usize,
        preset: Ablation,
        epsilon: Option<&Tensor<f64>>,
    ) -> Result<(Tape<f64>, ForwardOutput<f64>)> {
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = model.bind(&mut reg, true);
        let out = model.forward(
            &tape,
            &vars,
            &ForwardBatch { x_f, x_o, labels, batch: b },
            &ForwardOpts { preset, epsilon },
        )?;
        Ok((tape, out))
    }

    #[test]
    fn config_rejects_unpartitionable_fused_width() {
        let cfg = ModelConfig { dim: 4, classes: 5, ..tiny_config() };
        // 3*4 = 12 is not divisible by 5
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(ModelConfig { dim: 5, classes: 5, ..tiny_config() }.validate().is_ok());
    }

    #[test]
    fn ablation_parsing_accepts_names_and_numerals() {
        assert_eq!(Ablation::parse("full").unwrap(), Ablation::Full);
        assert_eq!(Ablation::parse("III").unwrap(), Ablation::RawJointDe);
        assert_eq!(Ablation::parse("4").unwrap(), Ablation::ProxyJoint);
        assert_eq!(Ablation::parse("Feature-Fusion").unwrap(), Ablation::FeatureFusion);
        assert!(Ablation::parse("vi").is_err());
    }

    #[test]
    fn construction_is_deterministic_in_seed() {
        let a = ModelState::<f64>::new(tiny_config(), 7).unwrap();
        let b = ModelState::<f64>::new(tiny_config(), 7).unwrap();
        let c = ModelState::<f64>::new(tiny_config(), 8).unwrap();
        let flat = |m: &ModelState<f64>| -> Vec<f64> {
            m.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn bind_names_match_param_names() {
        let model = ModelState::<f64>::new(tiny_config(), 0).unwrap();
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        model.bind(&mut reg, true);
        let bound: BTreeSet<String> = reg.names().into_iter().collect();
        let listed: BTreeSet<String> = model.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(bound, listed);
    }

    #[test]
    fn forward_shapes_hold_for_every_preset() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = 5;
        let (x_f, x_o, labels) = random_batch(&cfg, b, &mut rng);
        let eps = Tensor::randn(&[b, cfg.dim], 1.0, &mut rng);
        for preset in Ablation::all() {
            let mut model = ModelState::<f64>::new(cfg.clone(), 3).unwrap();
            let (_tape, out) = run_forward(
                &mut model,
                Some(&x_f),
                Some(&x_o),
                Some(&labels),
                b,
                preset,
                Some(&eps),
            )
            .unwrap();
            assert_eq!(out.fused.shape(), [b, cfg.fused_dim()], "{preset:?}");
            assert_eq!(out.logits.shape(), [b, cfg.classes], "{preset:?}");
            assert_eq!(out.s.shape(), [b, cfg.dim], "{preset:?}");
            assert_eq!(out.parts.is_some(), preset.uses_extraction(), "{preset:?}");
            assert_eq!(out.joint.is_some(), preset.uses_sampling(), "{preset:?}");
            assert!(out.logits.to_tensor().is_finite(), "{preset:?}");
        }
    }

    #[test]
    fn zero_epsilon_yields_the_joint_mean() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = 4;
        let (x_f, x_o, labels) = random_batch(&cfg, b, &mut rng);
        let mut model = ModelState::<f64>::new(cfg, 3).unwrap();
        let (_tape, out) = run_forward(
            &mut model,
            Some(&x_f),
            Some(&x_o),
            Some(&labels),
            b,
            Ablation::RawJoint,
            None,
        )
        .unwrap();
        let s = out.s.to_tensor();
        let mu = out.joint.as_ref().unwrap().mu.to_tensor();
        assert_eq!(s.data(), mu.data());
    }

    #[test]
    fn pooling_averages_each_samples_tokens() {
        let tape = Tape::<f64>::new();
        // 2 samples × 2 tokens × 3 dims
        let e = tape.constant(
            &Tensor::from_rows(&[
                vec![1.0, 2.0, 3.0],
                vec![3.0, 4.0, 5.0],
                vec![10.0, 20.0, 30.0],
                vec![30.0, 40.0, 50.0],
            ])
            .unwrap(),
        );
        let pooled = pool_tokens(&tape, &e, 2, 2).unwrap().to_tensor();
        assert_eq!(pooled.data(), &[2.0, 3.0, 4.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn missing_modality_takes_the_placeholder_path() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = 3;
        let (x_f, _, labels) = random_batch(&cfg, b, &mut rng);
        let mut model = ModelState::<f64>::new(cfg.clone(), 5).unwrap();
        let (_tape, out) = run_forward(
            &mut model,
            Some(&x_f),
            None,
            Some(&labels),
            b,
            Ablation::Full,
            None,
        )
        .unwrap();
        // every sample sees the same placeholder grid, so the pooled oct
        // feature is identical across rows and equals the grid's token mean
        let pooled = out.pooled_o.to_tensor();
        let ph = model.placeholder_o.data();
        let d = cfg.dim;
        for j in 0..d {
            let want = (ph[j] + ph[d + j]) / 2.0;
            for i in 0..b {
                assert!((pooled.at2(i, j) - want).abs() < 1e-12);
            }
        }
        assert!(out.logits.to_tensor().is_finite());
    }

    #[test]
    fn gradient_reaches_the_placeholder_when_its_modality_is_missing() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = 3;
        let (x_f, _, labels) = random_batch(&cfg, b, &mut rng);
        let mut model = ModelState::<f64>::new(cfg, 5).unwrap();
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = model.bind(&mut reg, true);
        let out = model
            .forward(
                &tape,
                &vars,
                &ForwardBatch { x_f: Some(&x_f), x_o: None, labels: Some(&labels), batch: b },
                &ForwardOpts { preset: Ablation::Full, epsilon: None },
            )
            .unwrap();
        out.logits.sum().backward().unwrap();
        let grads = reg.grads();
        let g = grads.get("placeholder.o").expect("placeholder gradient present");
        assert!(g.iter().any(|v| v.abs() > 1e-12), "placeholder gradient is all zero");
        // the available modality's encoder is exercised, the missing one is not
        assert!(grads.contains_key("enc_f.w0"));
        assert!(!grads.contains_key("enc_o.w0"));
    }

    #[test]
    fn both_modalities_missing_is_a_contract_error() {
        let cfg = tiny_config();
        let mut model = ModelState::<f64>::new(cfg, 5).unwrap();
        let err =
            run_forward(&mut model, None, None, None, 3, Ablation::Full, None).err().unwrap();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = 2;
        let (x_f, x_o, _) = random_batch(&cfg, b, &mut rng);
        let mut model = ModelState::<f64>::new(cfg, 5).unwrap();
        let labels = vec![0, 2]; // classes = 2
        let err = run_forward(
            &mut model,
            Some(&x_f),
            Some(&x_o),
            Some(&labels),
            b,
            Ablation::Full,
            None,
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Param(_)), "got {err:?}");
    }

    #[test]
    fn inference_selection_runs_without_labels() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = 4;
        let (x_f, x_o, _) = random_batch(&cfg, b, &mut rng);
        let mut model = ModelState::<f64>::new(cfg, 5).unwrap();
        model.set_mode(Mode::Eval);
        let (_tape, out) =
            run_forward(&mut model, Some(&x_f), Some(&x_o), None, b, Ablation::Full, None)
                .unwrap();
        assert!(out.logits.to_tensor().is_finite());
        // repeatable: selection and forward are deterministic
        let (_tape, out2) =
            run_forward(&mut model, Some(&x_f), Some(&x_o), None, b, Ablation::Full, None)
                .unwrap();
        assert_eq!(out.logits.to_tensor().data(), out2.logits.to_tensor().data());
    }

    #[test]
    fn full_forward_gradient_matches_finite_differences() {
        use crate::tape::finite_diff_check;
        // labels pin the proxy selection so the objective is differentiable;
        // batchnorm off keeps pre-activations away from the relu kink
        let cfg = ModelConfig { batchnorm: false, ..tiny_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = 3;
        let (x_f, x_o, labels) = random_batch(&cfg, b, &mut rng);
        let eps = Tensor::randn(&[b, cfg.dim], 1.0, &mut rng);
        let model = ModelState::<f64>::new(cfg.clone(), 5).unwrap();
        let tensors: Vec<Tensor<f64>> =
            model.params().iter().map(|(_, t)| (*t).clone()).collect();
        let max_rel = finite_diff_check(&tensors, 1e-5, |tape, vars| {
            let mut m = ModelState::<f64>::new(cfg.clone(), 5).unwrap();
            let mvars = m.vars_from(&mut vars.iter().cloned())?;
            let out = m.forward(
                tape,
                &mvars,
                &ForwardBatch {
                    x_f: Some(&x_f),
                    x_o: Some(&x_o),
                    labels: Some(&labels),
                    batch: b,
                },
                &ForwardOpts { preset: Ablation::Full, epsilon: Some(&eps) },
            )?;
            Ok(out.logits.square().sum())
        })
        .unwrap();
        // truncation through the deep composition dominates here; this is
        // still two orders tighter than the verification gate
        assert!(max_rel < 1e-5, "max rel err {max_rel}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = 4;
        let (x_f, x_o, labels) = random_batch(&cfg, b, &mut rng);
        let mut model = ModelState::<f64>::new(cfg.clone(), 13).unwrap();

        // dirty every kind of state: batchnorm buffers via a train-mode
        // forward, main optimizer slots via a step, q-net slots via a q step
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = model.bind(&mut reg, true);
        let out = model
            .forward(
                &tape,
                &vars,
                &ForwardBatch { x_f: Some(&x_f), x_o: Some(&x_o), labels: Some(&labels), batch: b },
                &ForwardOpts { preset: Ablation::Full, epsilon: None },
            )
            .unwrap();
        out.logits.square().sum().backward().unwrap();
        let grads = reg.grads();
        model.main_opt_step(1e-3, &grads).unwrap();
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[6, 8], 1.0, &mut rng);
        model.club_shared.qnet_step(&x, &y, 1e-3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let digest = model.save(&path).unwrap();
        assert_eq!(digest, file_digest(&path).unwrap());

        let restored = ModelState::<f64>::load(&path).unwrap();
        assert_eq!(restored.config, model.config);
        assert_eq!(restored.opt.t(), model.opt.t());
        // resaving the restored model must reproduce the bytes exactly
        assert_eq!(restored.to_bytes().unwrap(), model.to_bytes().unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = ModelState::<f64>::new(tiny_config(), 1).unwrap();
        let bytes = model.to_bytes().unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            ModelState::<f64>::from_bytes(&bad_magic).err().unwrap(),
            Error::Format(_)
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            ModelState::<f64>::from_bytes(truncated).err().unwrap(),
            Error::Format(_)
        ));

        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0u8; 4]);
        assert!(matches!(
            ModelState::<f64>::from_bytes(&trailing).err().unwrap(),
            Error::Format(_)
        ));
    }

    #[test]
    fn feature_fusion_averages_pooled_features() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = 3;
        let (x_f, x_o, labels) = random_batch(&cfg, b, &mut rng);
        let mut model = ModelState::<f64>::new(cfg, 5).unwrap();
        let (_tape, out) = run_forward(
            &mut model,
            Some(&x_f),
            Some(&x_o),
            Some(&labels),
            b,
            Ablation::FeatureFusion,
            None,
        )
        .unwrap();
        let s = out.s.to_tensor();
        let pf = out.pooled_f.to_tensor();
        let po = out.pooled_o.to_tensor();
        for i in 0..s.numel() {
            assert!((s.data()[i] - 0.5 * (pf.data()[i] + po.data()[i])).abs() < 1e-12);
        }
    }
}
