//! Experiment orchestration: configuration, the two-phase training protocol
//! (teacher on complete data, student co-trained under missingness), held-out
//! evaluation, parameter sweeps, and deterministic result emission.
//!
//! Everything here pins `f64`. A run is a pure function of its configuration:
//! data, fold membership, batch order, reparameterization draws, and noise
//! all derive from the configured seeds through [`sub_seed`], so rerunning a
//! config reproduces every byte of the metric files and every checkpoint
//! digest.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_inter_missing, apply_intra_missing_sample, dataset_digest, feature_std,
    generate_dataset, kfold_split, labels_of, stack_modality, DataConfig, Dataset, Sample,
};
use crate::digest::fnv1a64;
use crate::distill::{
    student_step, teacher_train_step, LossWeights, DEFAULT_TAU,
};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc_ovr, f1_macro, specificity_macro};
use crate::model::{Ablation, ForwardBatch, ForwardOpts, Modality, ModelConfig, ModelState};
use crate::nn::{Mode, ParamRegistry};
use crate::report::{FoldMetrics, LossCurve, MetricsReport};
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── missingness specification ──

/// Which modality the student loses entirely (inter-modality incompleteness).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingSpec {
    None,
    Fundus,
    Oct,
}

impl MissingSpec {
    pub fn name(self) -> &'static str {
        match self {
            MissingSpec::None => "none",
            MissingSpec::Fundus => "fundus",
            MissingSpec::Oct => "oct",
        }
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            MissingSpec::None => None,
            MissingSpec::Fundus => Some(Modality::Fundus),
            MissingSpec::Oct => Some(Modality::Oct),
        }
    }

    pub fn parse(s: &str) -> Result<MissingSpec> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(MissingSpec::None),
            "fundus" => Ok(MissingSpec::Fundus),
            "oct" => Ok(MissingSpec::Oct),
            other => Err(Error::Param(format!(
                "unknown missing-modality spec {other:?} (expected fundus, oct, or none)"
            ))),
        }
    }
}

/// Which modality receives the intra-modality noise when `alpha > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTarget {
    Fundus,
    Oct,
    Both,
}

impl NoiseTarget {
    pub fn applies_to(self, m: Modality) -> bool {
        match self {
            NoiseTarget::Fundus => m == Modality::Fundus,
            NoiseTarget::Oct => m == Modality::Oct,
            NoiseTarget::Both => true,
        }
    }
}

// ── configuration ──

/// Complete experiment description. Every field has a default; unknown keys
/// in a config file are rejected at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // data
    pub samples: usize,
    pub classes: usize,
    pub token_count: usize,
    pub raw_dim: usize,
    pub latent_dim: usize,
    // architecture
    pub dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub q_hidden: usize,
    pub spherical_variance: bool,
    pub batchnorm: bool,
    pub prior_mu: f64,
    pub prior_log_var: f64,
    /// Proxies per class as a fraction `r` of the per-class training count:
    /// `N_p = max(1, round(r · train_size / classes))`.
    pub proxy_ratio: f64,
    // objective
    pub tau: f64,
    pub omega_mi: f64,
    pub omega_prox: f64,
    // optimization
    pub lr: f64,
    pub q_lr: f64,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub batch_size: usize,
    // protocol
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub preset: Ablation,
    /// Modality the student loses entirely (training and evaluation).
    pub missing: MissingSpec,
    /// Intra-modality noise level applied to the student view.
    pub alpha: f64,
    /// Modality the noise applies to.
    pub noise_target: NoiseTarget,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            samples: 3000,
            classes: 3,
            token_count: 4,
            raw_dim: 32,
            latent_dim: 8,
            dim: 32,
            encoder_hidden: vec![64],
            predictor_hidden: vec![32],
            q_hidden: 64,
            spherical_variance: false,
            batchnorm: true,
            prior_mu: 0.0,
            prior_log_var: 0.0,
            proxy_ratio: 0.05,
            tau: DEFAULT_TAU,
            omega_mi: 1.0,
            omega_prox: 1.0,
            lr: 1e-3,
            q_lr: 1e-3,
            teacher_epochs: 40,
            student_epochs: 40,
            batch_size: 64,
            folds: 5,
            seeds: vec![0, 1, 2, 3, 4],
            preset: Ablation::Full,
            missing: MissingSpec::None,
            alpha: 0.0,
            noise_target: NoiseTarget::Oct,
        }
    }
}

impl ExperimentConfig {
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            samples: self.samples,
            classes: self.classes,
            token_count: self.token_count,
            raw_dim: self.raw_dim,
            latent_dim: self.latent_dim,
        }
    }

    pub fn model_config(&self, proxies_per_class: usize) -> ModelConfig {
        ModelConfig {
            token_count: self.token_count,
            raw_dim: self.raw_dim,
            dim: self.dim,
            classes: self.classes,
            encoder_hidden: self.encoder_hidden.clone(),
            predictor_hidden: self.predictor_hidden.clone(),
            q_hidden: self.q_hidden,
            proxies_per_class,
            spherical_variance: self.spherical_variance,
            batchnorm: self.batchnorm,
            prior_mu: self.prior_mu,
            prior_log_var: self.prior_log_var,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { omega_mi: self.omega_mi, omega_prox: self.omega_prox, tau: self.tau }
    }

    /// Proxy count per (modality, class) for a given training-set size.
    pub fn proxies_for(&self, train_size: usize) -> usize {
        let per_class = train_size as f64 / self.classes as f64;
        ((self.proxy_ratio * per_class).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.data_config().validate()?;
        self.model_config(1).validate()?;
        if self.folds < 2 || self.folds > self.samples {
            return Err(Error::Config(format!(
                "folds must lie in [2, samples], got {} with {} samples",
                self.folds, self.samples
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 (the logit-structure loss \
                 compares samples), got {}",
                self.batch_size
            )));
        }
        if !(self.proxy_ratio.is_finite() && self.proxy_ratio > 0.0 && self.proxy_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "proxy_ratio must lie in (0, 1], got {}",
                self.proxy_ratio
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [("omega_mi", self.omega_mi), ("omega_prox", self.omega_prox)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        for (name, v) in [("lr", self.lr), ("q_lr", self.q_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha.is_finite() && (0.0..=0.5).contains(&self.alpha)) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 0.5], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Parses a TOML document; missing keys fall back to defaults, unknown
    /// keys are rejected. The result is validated.
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config emit: {e}")))
    }

    /// Short identifier used in report labels and file contents.
    pub fn run_label(&self) -> String {
        format!("{}.{}.a{}", self.preset.name(), self.missing.name(), self.alpha)
    }
}

// ── deterministic seed derivation ──

/// Derives an independent stream seed from a run seed, a purpose tag, and a
/// salt. Hashing keeps streams for different purposes decoupled even when
/// their salts collide.
pub fn sub_seed(seed: u64, tag: &str, salt: u64) -> u64 {
    let mut bytes = Vec::with_capacity(16 + tag.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    bytes.extend_from_slice(&salt.to_le_bytes());
    fnv1a64(&bytes)
}

// ── batching helpers ──

fn stacked_pair(
    samples: &[Sample<f64>],
    chunk: &[usize],
) -> Result<(Tensor<f64>, Tensor<f64>, Vec<usize>)> {
    let x_f = stack_modality(samples, chunk, Modality::Fundus)?
        .ok_or_else(|| Error::Contract("the complete view lost its fundus tokens".into()))?;
    let x_o = stack_modality(samples, chunk, Modality::Oct)?
        .ok_or_else(|| Error::Contract("the complete view lost its oct tokens".into()))?;
    let labels = labels_of(samples, chunk)?;
    Ok((x_f, x_o, labels))
}

fn step_context(seed: u64, fold: usize, phase: &str, epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!(
            "seed {seed} fold {fold}: aborting at {phase} epoch {epoch} step {step}: {msg}"
        )),
        other => other,
    }
}

/// Builds the student's view of every sample: intra-modality noise first
/// (σ from the clean training split), then whole-modality removal.
fn student_view(
    cfg: &ExperimentConfig,
    dataset: &Dataset<f64>,
    train: &[usize],
    seed: u64,
    fold: usize,
) -> Result<Vec<Sample<f64>>> {
    let mut samples = dataset.samples.clone();
    if cfg.alpha > 0.0 {
        for m in Modality::all() {
            if !cfg.noise_target.applies_to(m) {
                continue;
            }
            let sigma = feature_std(&dataset.samples, train, m)?;
            for (i, s) in samples.iter_mut().enumerate() {
                let salt = (fold as u64) << 32 | (i as u64) << 1 | m.index() as u64;
                let noise_seed = sub_seed(seed, "intra-noise", salt);
                *s = apply_intra_missing_sample(s, m, cfg.alpha, &sigma, noise_seed)?;
            }
        }
    }
    if let Some(m) = cfg.missing.modality() {
        for s in samples.iter_mut() {
            *s = apply_inter_missing(s, m)?;
        }
    }
    Ok(samples)
}

// ── teacher phase ──

struct PhaseCurves {
    terms: Vec<(&'static str, Vec<f64>)>,
}

impl PhaseCurves {
    fn new(terms: &[&'static str]) -> Self {
        PhaseCurves { terms: terms.iter().map(|t| (*t, Vec::new())).collect() }
    }

    fn push_epoch(&mut self, sums: &[f64], steps: usize) {
        for ((_, curve), &sum) in self.terms.iter_mut().zip(sums.iter()) {
            curve.push(if steps == 0 { 0.0 } else { sum / steps as f64 });
        }
    }

    fn into_curves(self, fold: usize) -> Vec<LossCurve> {
        self.terms
            .into_iter()
            .map(|(term, values)| LossCurve { fold, term: term.into(), values })
            .collect()
    }
}

fn teacher_phase(
    cfg: &ExperimentConfig,
    seed: u64,
    fold: usize,
    dataset: &Dataset<f64>,
    train: &[usize],
) -> Result<(ModelState<f64>, PhaseCurves)> {
    let model_seed = sub_seed(seed, "model-init", fold as u64);
    let mut teacher = ModelState::new(cfg.model_config(cfg.proxies_for(train.len())), model_seed)?;
    let weights = cfg.loss_weights();
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(sub_seed(seed, "teacher-batches", fold as u64));
    let mut eps_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "teacher-eps", fold as u64));
    let mut curves = PhaseCurves::new(&["teacher.total", "teacher.ce", "teacher.mi", "teacher.prox"]);

    // The CLUB density models start cold and fit alongside the encoder via the
    // per-step refresh inside `teacher_train_step`, so the first epoch's
    // mutual-information readings are large and decay as the bound tightens.
    let mut order = train.to_vec();
    for epoch in 0..cfg.teacher_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // too small for batch statistics; trailing remnant
            }
            let (x_f, x_o, labels) = stacked_pair(&dataset.samples, chunk)?;
            let report = teacher_train_step(
                &mut teacher,
                &x_f,
                &x_o,
                &labels,
                chunk.len(),
                cfg.preset,
                &weights,
                cfg.lr,
                cfg.q_lr,
                &mut eps_rng,
            )
            .map_err(|e| step_context(seed, fold, "teacher", epoch, step, e))?;
            sums[0] += report.total;
            sums[1] += report.ce;
            sums[2] += report.mi.unwrap_or(0.0);
            sums[3] += report.prox.unwrap_or(0.0);
            steps += 1;
        }
        curves.push_epoch(&sums, steps);
    }
    teacher.set_mode(Mode::Eval);
    Ok((teacher, curves))
}

// ── student phase ──

fn student_phase(
    cfg: &ExperimentConfig,
    seed: u64,
    fold: usize,
    teacher: &mut ModelState<f64>,
    dataset: &Dataset<f64>,
    student_samples: &[Sample<f64>],
    train: &[usize],
) -> Result<(ModelState<f64>, PhaseCurves)> {
    let mut student = teacher.clone_state()?;
    student.set_mode(Mode::Train);
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(sub_seed(seed, "student-batches", fold as u64));
    let mut eps_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "student-eps", fold as u64));
    let mut curves =
        PhaseCurves::new(&["student.total", "student.ce", "student.feat", "student.logit"]);

    let mut order = train.to_vec();
    for epoch in 0..cfg.student_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (x_f, x_o, labels) = stacked_pair(&dataset.samples, chunk)?;
            let s_f = stack_modality(student_samples, chunk, Modality::Fundus)?;
            let s_o = stack_modality(student_samples, chunk, Modality::Oct)?;
            let eps = if cfg.preset.uses_sampling() {
                Some(Tensor::randn(&[chunk.len(), cfg.dim], 1.0, &mut eps_rng))
            } else {
                None
            };
            let report = student_step(
                &mut student,
                teacher,
                &x_f,
                &x_o,
                s_f.as_ref(),
                s_o.as_ref(),
                &labels,
                chunk.len(),
                cfg.preset,
                cfg.tau,
                cfg.lr,
                eps.as_ref(),
            )
            .map_err(|e| step_context(seed, fold, "student", epoch, step, e))?;
            sums[0] += report.total;
            sums[1] += report.ce;
            sums[2] += report.feat;
            sums[3] += report.logit;
            steps += 1;
        }
        curves.push_epoch(&sums, steps);
    }
    student.set_mode(Mode::Eval);
    Ok((student, curves))
}

// ── evaluation ──

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Runs the model in eval mode (zero reparameterization noise, similarity-
/// based proxy selection) over the given samples and returns hard
/// predictions plus row-softmax class scores `[n × classes]`.
pub fn predict(
    model: &mut ModelState<f64>,
    samples: &[Sample<f64>],
    indices: &[usize],
    preset: Ablation,
    batch_size: usize,
) -> Result<(Vec<usize>, Tensor<f64>)> {
    if model.mode() != Mode::Eval {
        return Err(Error::Contract("predict requires the model in eval mode".into()));
    }
    let mut preds = Vec::with_capacity(indices.len());
    let mut score_rows: Vec<Vec<f64>> = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let x_f = stack_modality(samples, chunk, Modality::Fundus)?;
        let x_o = stack_modality(samples, chunk, Modality::Oct)?;
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = model.bind(&mut reg, false);
        let fb = ForwardBatch {
            x_f: x_f.as_ref(),
            x_o: x_o.as_ref(),
            labels: None,
            batch: chunk.len(),
        };
        let out =
            model.forward(&tape, &vars, &fb, &ForwardOpts { preset, epsilon: None })?;
        let logits = out.logits.to_tensor();
        let classes = logits.shape()[1];
        for r in 0..chunk.len() {
            let row: Vec<f64> = (0..classes).map(|c| logits.at2(r, c)).collect();
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            preds.push(best);
            score_rows.push(softmax_row(&row));
        }
    }
    Ok((preds, Tensor::from_rows(&score_rows)?))
}

// ── per-unit protocol ──

struct UnitResult {
    metrics: FoldMetrics,
    curves: Vec<LossCurve>,
    teacher_bytes: Vec<u8>,
    student_bytes: Vec<u8>,
}

fn train_indices(splits: &[Vec<usize>], fold: usize, n: usize) -> Vec<usize> {
    let mut in_test = vec![false; n];
    for &i in &splits[fold] {
        in_test[i] = true;
    }
    (0..n).filter(|&i| !in_test[i]).collect()
}

fn run_unit(
    cfg: &ExperimentConfig,
    seed: u64,
    fold: usize,
    dataset: &Dataset<f64>,
    splits: &[Vec<usize>],
    unit: usize,
) -> Result<UnitResult> {
    let test = &splits[fold];
    let train = train_indices(splits, fold, dataset.samples.len());

    let (mut teacher, teacher_curves) = teacher_phase(cfg, seed, fold, dataset, &train)?;
    let student_samples = student_view(cfg, dataset, &train, seed, fold)?;
    let (mut student, student_curves) =
        student_phase(cfg, seed, fold, &mut teacher, dataset, &student_samples, &train)?;

    let (preds, scores) = predict(&mut student, &student_samples, test, cfg.preset, cfg.batch_size)?;
    let labels = labels_of(&dataset.samples, test)?;
    let metrics = FoldMetrics {
        acc: accuracy(&preds, &labels)?,
        auc: auc_ovr(&scores, &labels)?,
        f1: f1_macro(&preds, &labels, cfg.classes)?,
        spec: specificity_macro(&preds, &labels, cfg.classes)?,
    };

    let mut curves = teacher_curves.into_curves(unit);
    curves.extend(student_curves.into_curves(unit));
    Ok(UnitResult {
        metrics,
        curves,
        teacher_bytes: teacher.to_bytes()?,
        student_bytes: student.to_bytes()?,
    })
}

// ── public entry points ──

/// Everything produced by teacher-only training on one (seed, fold) cell.
pub struct TeacherRun {
    /// The trained teacher, left in eval mode.
    pub model: ModelState<f64>,
    pub dataset: Dataset<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Per-epoch mean loss terms (`teacher.total`, `.ce`, `.mi`, `.prox`).
    pub curves: Vec<LossCurve>,
}

/// Trains a teacher on one (seed, fold) cell of the protocol.
pub fn train_teacher(cfg: &ExperimentConfig, seed: u64, fold: usize) -> Result<TeacherRun> {
    cfg.validate()?;
    if fold >= cfg.folds {
        return Err(Error::Param(format!("fold {fold} out of range for {} folds", cfg.folds)));
    }
    let dataset = generate_dataset::<f64>(&cfg.data_config(), seed)?;
    let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    let splits = kfold_split(&labels, cfg.folds, sub_seed(seed, "folds", 0))?;
    let train = train_indices(&splits, fold, dataset.samples.len());
    let (model, curves) = teacher_phase(cfg, seed, fold, &dataset, &train)?;
    Ok(TeacherRun {
        model,
        train,
        test: splits[fold].clone(),
        dataset,
        curves: curves.into_curves(0),
    })
}

/// Teacher plus co-trained student on one (seed, fold) cell, with the
/// student's held-out metrics.
pub struct DistillRun {
    pub teacher: ModelState<f64>,
    pub student: ModelState<f64>,
    pub dataset: Dataset<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub metrics: FoldMetrics,
    pub curves: Vec<LossCurve>,
}

/// Runs the full two-phase protocol on one (seed, fold) cell.
pub fn run_distill_fold(cfg: &ExperimentConfig, seed: u64, fold: usize) -> Result<DistillRun> {
    cfg.validate()?;
    if fold >= cfg.folds {
        return Err(Error::Param(format!("fold {fold} out of range for {} folds", cfg.folds)));
    }
    let dataset = generate_dataset::<f64>(&cfg.data_config(), seed)?;
    let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    let splits = kfold_split(&labels, cfg.folds, sub_seed(seed, "folds", 0))?;
    let unit = run_unit(cfg, seed, fold, &dataset, &splits, 0)?;
    let train = train_indices(&splits, fold, dataset.samples.len());
    // Checkpoints restore parameters only; mode is runtime state.
    let mut teacher = ModelState::from_bytes(&unit.teacher_bytes)?;
    teacher.set_mode(Mode::Eval);
    let mut student = ModelState::from_bytes(&unit.student_bytes)?;
    student.set_mode(Mode::Eval);
    Ok(DistillRun {
        teacher,
        student,
        train,
        test: splits[fold].clone(),
        dataset,
        metrics: unit.metrics,
        curves: unit.curves,
    })
}

#[derive(Serialize)]
struct ManifestCheckpoint {
    seed: u64,
    fold: usize,
    teacher: String,
    student: String,
}

#[derive(Serialize)]
struct ManifestData {
    seed: u64,
    digest: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    format: &'static str,
    crate_version: &'static str,
    label: String,
    config: &'a ExperimentConfig,
    datasets: Vec<ManifestData>,
    checkpoints: Vec<ManifestCheckpoint>,
}

/// Runs the full cross-validated protocol: for every configured seed, the
/// dataset is generated and split; every (seed, fold) cell trains a teacher
/// on the complete clean view, co-trains a student under the configured
/// missingness, and evaluates the student on its held-out fold. Cells run in
/// parallel; results are assembled in (seed, fold) order. When `out_dir` is
/// given, emits `metrics.csv` (deterministic), `report.txt` (adds runtime),
/// `manifest.json` (config echo, dataset and checkpoint digests), and all
/// checkpoints.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    let start = Instant::now();

    let data_cfg = cfg.data_config();
    let mut per_seed: Vec<(u64, Dataset<f64>, Vec<Vec<usize>>)> =
        Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dataset = generate_dataset::<f64>(&data_cfg, seed)?;
        let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
        let splits = kfold_split(&labels, cfg.folds, sub_seed(seed, "folds", 0))?;
        per_seed.push((seed, dataset, splits));
    }

    let units: Vec<(usize, usize)> = (0..per_seed.len())
        .flat_map(|si| (0..cfg.folds).map(move |fold| (si, fold)))
        .collect();
    let outcomes: Vec<Result<UnitResult>> = units
        .par_iter()
        .enumerate()
        .map(|(unit, &(si, fold))| {
            let (seed, dataset, splits) = &per_seed[si];
            run_unit(cfg, *seed, fold, dataset, splits, unit)
        })
        .collect();
    let mut results = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        results.push(outcome?);
    }

    let mut folds = Vec::with_capacity(results.len());
    let mut curves = Vec::new();
    for r in &results {
        folds.push(r.metrics);
        curves.extend(r.curves.iter().cloned());
    }
    let report = MetricsReport {
        label: cfg.run_label(),
        folds,
        curves,
        runtime_secs: start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), report.emit_deterministic()?)?;
        std::fs::write(dir.join("report.txt"), report.emit()?)?;
        let mut checkpoints = Vec::with_capacity(results.len());
        for (&(si, fold), r) in units.iter().zip(results.iter()) {
            let seed = per_seed[si].0;
            std::fs::write(dir.join(format!("ckpt-s{seed}-f{fold}-teacher.bin")), &r.teacher_bytes)?;
            std::fs::write(dir.join(format!("ckpt-s{seed}-f{fold}-student.bin")), &r.student_bytes)?;
            checkpoints.push(ManifestCheckpoint {
                seed,
                fold,
                teacher: format!("{:016x}", fnv1a64(&r.teacher_bytes)),
                student: format!("{:016x}", fnv1a64(&r.student_bytes)),
            });
        }
        let manifest = RunManifest {
            format: "run-manifest v1",
            crate_version: env!("CARGO_PKG_VERSION"),
            label: cfg.run_label(),
            config: cfg,
            datasets: per_seed
                .iter()
                .map(|(seed, ds, _)| ManifestData {
                    seed: *seed,
                    digest: format!("{:016x}", dataset_digest(ds)),
                })
                .collect(),
            checkpoints,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest emit: {e}")))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
    }
    Ok(report)
}

// ── sweeps ──

/// The three swept hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Intra-modality noise level.
    Alpha,
    /// Proxy-count ratio.
    R,
    /// Distillation temperature.
    Tau,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::R => "r",
            SweepParam::Tau => "tau",
        }
    }

    pub fn parse(s: &str) -> Result<SweepParam> {
        match s.trim().to_ascii_lowercase().as_str() {
            "alpha" => Ok(SweepParam::Alpha),
            "r" => Ok(SweepParam::R),
            "tau" => Ok(SweepParam::Tau),
            other => Err(Error::Param(format!(
                "unknown sweep parameter {other:?} (expected alpha, r, or tau)"
            ))),
        }
    }

    /// Writes the value into a config copy, enforcing the parameter's range.
    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::Alpha => {
                if !(value.is_finite() && (0.0..=0.5).contains(&value)) {
                    return Err(Error::Param(format!("alpha {value} outside [0, 0.5]")));
                }
                cfg.alpha = value;
            }
            SweepParam::R => {
                if !(value.is_finite() && value > 0.0 && value <= 1.0) {
                    return Err(Error::Param(format!("r {value} outside (0, 1]")));
                }
                cfg.proxy_ratio = value;
            }
            SweepParam::Tau => {
                if !(value.is_finite() && value > 0.0) {
                    return Err(Error::Param(format!("tau {value} must be positive")));
                }
                cfg.tau = value;
            }
        }
        Ok(())
    }
}

/// One sweep cell: the attempted value and either its report or the error
/// that stopped it.
pub struct SweepCell {
    pub value: f64,
    pub outcome: std::result::Result<MetricsReport, String>,
}

pub struct SweepResult {
    pub param: SweepParam,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Combined comma-separated table; failed cells carry their error in the
    /// last column (commas and newlines flattened).
    pub fn emit_table(&self) -> Result<String> {
        let mut out = String::from(
            "param,value,status,acc_mean,acc_std,auc_mean,auc_std,f1_mean,f1_std,\
             spec_mean,spec_std,error\n",
        );
        for cell in &self.cells {
            match &cell.outcome {
                Ok(report) => {
                    let agg = report.aggregate()?;
                    out.push_str(&format!(
                        "{},{},ok,{},{},{},{},{},{},{},{},\n",
                        self.param.name(),
                        cell.value,
                        agg.mean.acc,
                        agg.std.acc,
                        agg.mean.auc,
                        agg.std.auc,
                        agg.mean.f1,
                        agg.std.f1,
                        agg.mean.spec,
                        agg.std.spec,
                    ));
                }
                Err(msg) => {
                    let flat: String = msg
                        .chars()
                        .map(|c| if c == ',' || c == '\n' { ';' } else { c })
                        .collect();
                    out.push_str(&format!(
                        "{},{},error,,,,,,,,,{flat}\n",
                        self.param.name(),
                        cell.value
                    ));
                }
            }
        }
        Ok(out)
    }
}

/// Runs one experiment per value with shared seeds; a failed cell records
/// its error and the remaining cells continue. When `out_dir` is given, each
/// cell writes under `<out_dir>/<param>-<value>/` and the combined table is
/// written to `<out_dir>/sweep.csv`.
pub fn sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Param("sweep needs at least one value".into()));
    }
    // Range errors are caller mistakes, caught before any cell runs.
    for &v in values {
        param.apply(&mut base.clone(), v)?;
    }
    let mut cells = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value)?;
        let cell_dir = out_dir.map(|d| d.join(format!("{}-{}", param.name(), value)));
        let outcome = match run_experiment(&cfg, cell_dir.as_deref()) {
            Ok(report) => Ok(report),
            Err(e) => {
                log::warn!("sweep cell {}={} failed: {e}", param.name(), value);
                Err(e.to_string())
            }
        };
        cells.push(SweepCell { value, outcome });
    }
    let result = SweepResult { param, cells };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), result.emit_table()?)?;
    }
    Ok(result)
}

// ── ablation battery ──

/// Runs the same protocol once per preset, sharing seeds and data. Errors
/// abort the battery (unlike sweep cells, preset rows are not independent
/// robustness probes but one comparison table).
pub fn run_ablation(
    base: &ExperimentConfig,
    presets: &[Ablation],
    out_dir: Option<&Path>,
) -> Result<Vec<(Ablation, MetricsReport)>> {
    if presets.is_empty() {
        return Err(Error::Param("ablation needs at least one preset".into()));
    }
    let mut rows = Vec::with_capacity(presets.len());
    for &preset in presets {
        let mut cfg = base.clone();
        cfg.preset = preset;
        let cell_dir = out_dir.map(|d| d.join(preset.name()));
        let report = run_experiment(&cfg, cell_dir.as_deref())?;
        rows.push((preset, report));
    }
    Ok(rows)
}

// ── representation dump for probes ──

/// Extracted parts of the fused representation for the given samples, in
/// eval mode with zero noise: rows of `s_hat` (shared), `r_f`, and `r_o`
/// (modality-specific). Only extraction presets produce parts.
pub struct ExtractedParts {
    pub s_hat: Vec<Vec<f64>>,
    pub r_f: Vec<Vec<f64>>,
    pub r_o: Vec<Vec<f64>>,
}

pub fn extract_parts(
    model: &mut ModelState<f64>,
    samples: &[Sample<f64>],
    indices: &[usize],
    preset: Ablation,
    batch_size: usize,
) -> Result<ExtractedParts> {
    if !preset.uses_extraction() {
        return Err(Error::Contract(format!(
            "preset {} does not run the extraction layer",
            preset.name()
        )));
    }
    if model.mode() != Mode::Eval {
        return Err(Error::Contract("extract_parts requires the model in eval mode".into()));
    }
    let mut out = ExtractedParts { s_hat: Vec::new(), r_f: Vec::new(), r_o: Vec::new() };
    for chunk in indices.chunks(batch_size.max(1)) {
        let x_f = stack_modality(samples, chunk, Modality::Fundus)?;
        let x_o = stack_modality(samples, chunk, Modality::Oct)?;
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = model.bind(&mut reg, false);
        let fb = ForwardBatch {
            x_f: x_f.as_ref(),
            x_o: x_o.as_ref(),
            labels: None,
            batch: chunk.len(),
        };
        let fwd = model.forward(&tape, &vars, &fb, &ForwardOpts { preset, epsilon: None })?;
        let (s_hat, r_f, r_o) =
            fwd.parts.as_ref().expect("extraction presets produce parts");
        for (target, var) in
            [(&mut out.s_hat, s_hat), (&mut out.r_f, r_f), (&mut out.r_o, r_o)]
        {
            let t = var.to_tensor();
            let d = t.shape()[1];
            for r in 0..chunk.len() {
                target.push((0..d).map(|c| t.at2(r, c)).collect());
            }
        }
    }
    Ok(out)
}

// ── gradient verification battery ──

/// One verified loss term: its name and the worst relative disagreement
/// between the analytic gradient and a central finite difference.
pub struct GradCheckRow {
    pub term: String,
    pub max_rel: f64,
}

/// Checks the analytic gradient of every loss term against central finite
/// differences on a small randomly initialized model, differentiating with
/// respect to all main parameters (the CLUB density models stay frozen, as
/// they do inside the mutual-information bound). Returns one row per term.
///
/// Batchnorm is disabled for the probe: the difference quotient is only
/// meaningful where the loss is smooth, and normalized activations sit too
/// close to the relu kinks.
pub fn gradient_check(batch: usize, fd_eps: f64, seed: u64) -> Result<Vec<GradCheckRow>> {
    use crate::distill::{
        cross_entropy, feature_distill_loss, logit_distill_loss, teacher_loss,
    };
    use crate::tape::finite_diff_check;

    if batch < 2 {
        return Err(Error::Param(format!(
            "gradient check needs a batch of at least 2, got {batch}"
        )));
    }
    let cfg = ModelConfig {
        token_count: 2,
        raw_dim: 3,
        dim: 4,
        classes: 2,
        encoder_hidden: vec![5],
        predictor_hidden: vec![4],
        q_hidden: 6,
        proxies_per_class: 2,
        spherical_variance: false,
        batchnorm: false,
        prior_mu: 0.0,
        prior_log_var: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_f = Tensor::<f64>::randn(&[batch * cfg.token_count, cfg.raw_dim], 1.0, &mut rng);
    let x_o = Tensor::<f64>::randn(&[batch * cfg.token_count, cfg.raw_dim], 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.classes).collect();
    let eps = Tensor::<f64>::randn(&[batch, cfg.dim], 1.0, &mut rng);
    let weights = LossWeights::default();
    let model_seed = rng.gen::<u64>();
    let model = ModelState::<f64>::new(cfg.clone(), model_seed)?;
    let tensors: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| (*t).clone()).collect();

    // Teacher-side terms, all under the full preset so every term is active.
    let teacher_terms: [(&str, fn(crate::distill::TeacherLossParts<f64>) -> crate::tape::Var<f64>);
        4] = [
        ("cross-entropy", |p| p.ce),
        ("mutual-info", |p| p.mi.expect("full preset computes the mi bound")),
        ("proxy", |p| p.prox.expect("full preset computes the proxy loss")),
        ("teacher-total", |p| p.total),
    ];
    let mut rows = Vec::new();
    for (term, pick) in teacher_terms {
        let max_rel = finite_diff_check(&tensors, fd_eps, |tape, vars| {
            let mut m = ModelState::<f64>::new(cfg.clone(), model_seed)?;
            let mvars = m.vars_from(&mut vars.iter().cloned())?;
            let fb = ForwardBatch {
                x_f: Some(&x_f),
                x_o: Some(&x_o),
                labels: Some(&labels),
                batch,
            };
            let (_, parts) =
                teacher_loss(&mut m, tape, &mvars, &fb, Ablation::Full, Some(&eps), &weights)?;
            Ok(pick(parts))
        })?;
        rows.push(GradCheckRow { term: term.into(), max_rel });
    }

    // Student-side terms: the teacher's fused features and logits enter as
    // constants, exactly as in co-training.
    let (t_fused, t_logits) = {
        let mut teacher = ModelState::<f64>::new(cfg.clone(), model_seed)?;
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = teacher.bind(&mut reg, false);
        let fb =
            ForwardBatch { x_f: Some(&x_f), x_o: Some(&x_o), labels: Some(&labels), batch };
        let out = teacher.forward(
            &tape,
            &vars,
            &fb,
            &ForwardOpts { preset: Ablation::Full, epsilon: Some(&eps) },
        )?;
        (out.fused.to_tensor(), out.logits.to_tensor())
    };
    let student_terms: [(&str, usize); 3] =
        [("feature-distill", 0), ("logit-distill", 1), ("distill-total", 2)];
    for (term, which) in student_terms {
        let max_rel = finite_diff_check(&tensors, fd_eps, |tape, vars| {
            let mut m = ModelState::<f64>::new(cfg.clone(), model_seed)?;
            let mvars = m.vars_from(&mut vars.iter().cloned())?;
            let fb = ForwardBatch {
                x_f: Some(&x_f),
                x_o: Some(&x_o),
                labels: Some(&labels),
                batch,
            };
            let out = m.forward(
                tape,
                &mvars,
                &fb,
                &ForwardOpts { preset: Ablation::Full, epsilon: Some(&eps) },
            )?;
            let feat = feature_distill_loss(
                &tape.constant(&t_fused),
                &out.fused,
                cfg.classes,
                DEFAULT_TAU,
            )?;
            let logit =
                logit_distill_loss(&tape.constant(&t_logits), &out.logits, DEFAULT_TAU)?;
            match which {
                0 => Ok(feat),
                1 => Ok(logit),
                _ => cross_entropy(&out.logits, &labels)?.add(&feat)?.add(&logit),
            }
        })?;
        rows.push(GradCheckRow { term: term.into(), max_rel });
    }
    Ok(rows)
}

// ── tests ──
