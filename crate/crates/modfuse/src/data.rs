//! Synthetic two-modality dataset with known latent structure.
//!
//! Each sample is generated from three independent latent vectors — one shared
//! across modalities, one per modality — so downstream probes can measure how
//! well a model separates shared from modality-specific information. Labels
//! depend on all three latents, with the shared block weighted double so the
//! fused signal is necessary but the specific blocks still matter.
//!
//! The module also provides the two incompleteness transforms used in
//! robustness experiments (additive feature-scaled noise within a modality,
//! and whole-modality removal), stratified k-fold splitting, a line-delimited
//! export format with a content digest, and a ridge-regression probe used to
//! audit latent recovery.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::digest::fnv1a64;
use crate::error::{Error, Result};
use crate::model::{Modality, MODALITY_COUNT};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

// ── configuration ──

/// Shape of the generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Number of samples N.
    pub samples: usize,
    /// Number of classes C.
    pub classes: usize,
    /// Tokens per modality L.
    pub token_count: usize,
    /// Features per token.
    pub raw_dim: usize,
    /// Dimension k of each latent block (shared, per-modality).
    pub latent_dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { samples: 3000, classes: 3, token_count: 4, raw_dim: 32, latent_dim: 8 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Param(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.samples < self.classes * 10 {
            return Err(Error::Param(format!(
                "need at least 10 samples per class ({} total), got {}",
                self.classes * 10,
                self.samples
            )));
        }
        if self.token_count == 0 || self.raw_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Param("token_count, raw_dim, latent_dim must be positive".into()));
        }
        Ok(())
    }
}

// ── sample records ──

/// Generating latent factors for one sample. Retained only so evaluation
/// probes can measure latent recovery; never part of any model input or
/// export record.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents<S: Scalar> {
    pub shared: Vec<S>,
    pub fundus: Vec<S>,
    pub oct: Vec<S>,
}

/// One two-modality sample. An absent modality is `None`, not zeros:
/// consumers must branch on `availability`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S: Scalar> {
    /// Token grids `[L × raw_dim]`, indexed by `Modality::index()`.
    pub x: [Option<Tensor<S>>; MODALITY_COUNT],
    pub label: usize,
    pub availability: [bool; MODALITY_COUNT],
    /// Noise level applied by the intra-modality transform (0 for clean data).
    pub alpha: f64,
}

impl<S: Scalar> Sample<S> {
    /// Token grid of a modality; absence is a contract error so callers
    /// cannot silently read a dropped modality.
    pub fn tokens(&self, m: Modality) -> Result<&Tensor<S>> {
        self.x[m.index()]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("modality {} is absent", m.name())))
    }
}

/// A generated dataset plus its (probe-only) latents.
#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    pub config: DataConfig,
    pub seed: u64,
    pub samples: Vec<Sample<S>>,
    pub latents: Vec<Latents<S>>,
}

// ── generation ──

/// Std of the additive observation noise on token features.
const TOKEN_NOISE_STD: f64 = 0.05;
/// Weight multiplier on shared-latent columns of the labeling map.
const SHARED_LABEL_WEIGHT: f64 = 2.0;
/// Labeling-map redraws allowed before giving up on class balance.
const MAX_LABEL_RESAMPLES: usize = 10;

fn randn_vec<S: Scalar, R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            S::from_f64_c(z * std)
        })
        .collect()
}

fn matvec<S: Scalar>(w: &Tensor<S>, v: &[S]) -> Result<Vec<S>> {
    if w.shape().len() != 2 || w.shape()[1] != v.len() {
        return Err(Error::shape(
            "matvec",
            format!("matrix {:?} vs vector of {}", w.shape(), v.len()),
        ));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![S::zero(); rows];
    for r in 0..rows {
        let mut acc = S::zero();
        for (col, &x) in v.iter().enumerate().take(cols) {
            acc += w.at2(r, col) * x;
        }
        out[r] = acc;
    }
    Ok(out)
}

fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn counts_within_tolerance(labels: &[usize], classes: usize) -> bool {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    let ideal = labels.len() as f64 / classes as f64;
    counts
        .iter()
        .all(|&n| n as f64 >= 0.8 * ideal - 1e-9 && n as f64 <= 1.2 * ideal + 1e-9)
}

/// Generates a dataset deterministically from `(config, seed)`.
///
/// Per sample, three independent latent blocks are drawn from N(0, I_k).
/// The label is the argmax of a fixed random linear map of the concatenated
/// latents with shared columns weighted ×2, redrawn up to
/// [`MAX_LABEL_RESAMPLES`] times until every class count lies within ±20% of
/// uniform. Each modality's token grid applies a fixed per-token linear map
/// to `[shared ‖ specific]`, squashes with tanh, and adds 0.05·N(0,1) noise.
pub fn generate_dataset<S: Scalar>(config: &DataConfig, seed: u64) -> Result<Dataset<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, classes, k) = (config.samples, config.classes, config.latent_dim);
    let (tokens, raw_dim) = (config.token_count, config.raw_dim);

    // Latents are drawn before the labeling map so a map redraw cannot
    // disturb them.
    let latents: Vec<Latents<S>> = (0..n)
        .map(|_| Latents {
            shared: randn_vec(k, 1.0, &mut rng),
            fundus: randn_vec(k, 1.0, &mut rng),
            oct: randn_vec(k, 1.0, &mut rng),
        })
        .collect();

    let mut labels = vec![0usize; n];
    let mut balanced = false;
    for _ in 0..=MAX_LABEL_RESAMPLES {
        let mut w = Tensor::<S>::randn(&[classes, 3 * k], 1.0, &mut rng);
        {
            let data = w.data_mut();
            let weight = c::<S>(SHARED_LABEL_WEIGHT);
            for row in 0..classes {
                for col in 0..k {
                    data[row * 3 * k + col] *= weight;
                }
            }
        }
        let bias = randn_vec::<S, _>(classes, 0.1, &mut rng);
        for (i, lat) in latents.iter().enumerate() {
            let zeta: Vec<S> = lat
                .shared
                .iter()
                .chain(lat.fundus.iter())
                .chain(lat.oct.iter())
                .copied()
                .collect();
            let mut logits = matvec(&w, &zeta)?;
            for (l, b) in logits.iter_mut().zip(bias.iter()) {
                *l += *b;
            }
            labels[i] = argmax(&logits);
        }
        if counts_within_tolerance(&labels, classes) {
            balanced = true;
            break;
        }
    }
    if !balanced {
        return Err(Error::Generation(format!(
            "class histogram stayed outside ±20% of uniform after {MAX_LABEL_RESAMPLES} \
             labeling-map redraws"
        )));
    }

    // One fixed linear map per (modality, token); input is [shared ‖ specific]
    // (2k dims of unit variance), so entries scale by 1/sqrt(2k) to keep
    // pre-tanh activations near unit variance.
    let map_std = 1.0 / (2.0 * k as f64).sqrt();
    let token_maps: Vec<Vec<Tensor<S>>> = Modality::all()
        .iter()
        .map(|_| {
            (0..tokens)
                .map(|_| Tensor::<S>::randn(&[raw_dim, 2 * k], map_std, &mut rng))
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(n);
    for (i, lat) in latents.iter().enumerate() {
        let mut grids: [Option<Tensor<S>>; MODALITY_COUNT] = [None, None];
        for m in Modality::all() {
            let specific = match m {
                Modality::Fundus => &lat.fundus,
                Modality::Oct => &lat.oct,
            };
            let zcat: Vec<S> = lat.shared.iter().chain(specific.iter()).copied().collect();
            let mut data = Vec::with_capacity(tokens * raw_dim);
            for map in &token_maps[m.index()] {
                for u in matvec(map, &zcat)? {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(u.tanh() + c::<S>(noise * TOKEN_NOISE_STD));
                }
            }
            grids[m.index()] = Some(Tensor::new(vec![tokens, raw_dim], data)?);
        }
        samples.push(Sample {
            x: grids,
            label: labels[i],
            availability: [true, true],
            alpha: 0.0,
        });
    }

    Ok(Dataset { config: config.clone(), seed, samples, latents: latents.clone() })
}

// ── incompleteness transforms ──

/// Per-position standard deviation of a modality's token grid over the given
/// samples (population std, divisor n). This is the σ_feature reference the
/// noise transform scales by; compute it on the clean training split only.
pub fn feature_std<S: Scalar>(
    samples: &[Sample<S>],
    indices: &[usize],
    m: Modality,
) -> Result<Tensor<S>> {
    if indices.len() < 2 {
        return Err(Error::Contract(format!(
            "feature_std needs at least 2 samples, got {}",
            indices.len()
        )));
    }
    let mut shape: Option<Vec<usize>> = None;
    let mut sum: Vec<S> = Vec::new();
    let mut sum_sq: Vec<S> = Vec::new();
    for &i in indices {
        let sample = samples
            .get(i)
            .ok_or_else(|| Error::Param(format!("sample index {i} out of range")))?;
        let x = sample.tokens(m)?;
        match &shape {
            None => {
                shape = Some(x.shape().to_vec());
                sum = vec![S::zero(); x.numel()];
                sum_sq = vec![S::zero(); x.numel()];
            }
            Some(s) if s != x.shape() => {
                return Err(Error::shape(
                    "feature_std",
                    format!("sample {i} has shape {:?}, expected {s:?}", x.shape()),
                ));
            }
            _ => {}
        }
        for (j, &v) in x.data().iter().enumerate() {
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let n = c::<S>(indices.len() as f64);
    let std: Vec<S> = sum
        .iter()
        .zip(sum_sq.iter())
        .map(|(&s, &sq)| {
            let mean = s / n;
            let var = (sq / n - mean * mean).max(S::zero());
            var.sqrt()
        })
        .collect();
    Tensor::new(shape.expect("indices non-empty"), std)
}

/// Adds seed-deterministic Gaussian noise scaled by `alpha` and the
/// per-feature std: `x + alpha · sigma ⊙ ε`, ε ~ N(0,1) per element.
/// `alpha = 0` returns the input bit-identically.
pub fn apply_intra_missing<S: Scalar>(
    x: &Tensor<S>,
    alpha: f64,
    sigma: &Tensor<S>,
    seed: u64,
) -> Result<Tensor<S>> {
    if !alpha.is_finite() || !(0.0..=0.5).contains(&alpha) {
        return Err(Error::Param(format!("noise level alpha must lie in [0, 0.5], got {alpha}")));
    }
    if sigma.shape() != x.shape() {
        return Err(Error::shape(
            "apply_intra_missing",
            format!("sigma shape {:?} vs input {:?}", sigma.shape(), x.shape()),
        ));
    }
    if sigma.data().iter().any(|v| !v.is_finite() || *v < S::zero()) {
        return Err(Error::Param("sigma entries must be finite and non-negative".into()));
    }
    if alpha == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = c::<S>(alpha);
    let data: Vec<S> = x
        .data()
        .iter()
        .zip(sigma.data().iter())
        .map(|(&v, &s)| {
            let eps: f64 = rng.sample(StandardNormal);
            v + a * s * c::<S>(eps)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Applies the noise transform to one modality of a sample, recording the
/// applied level in the sample's `alpha` field.
pub fn apply_intra_missing_sample<S: Scalar>(
    sample: &Sample<S>,
    m: Modality,
    alpha: f64,
    sigma: &Tensor<S>,
    seed: u64,
) -> Result<Sample<S>> {
    let noisy = apply_intra_missing(sample.tokens(m)?, alpha, sigma, seed)?;
    let mut out = sample.clone();
    out.x[m.index()] = Some(noisy);
    out.alpha = alpha;
    Ok(out)
}

/// Removes a whole modality: clears its availability bit and drops its
/// tokens. All other fields are untouched. Removing the last available
/// modality is a contract error.
pub fn apply_inter_missing<S: Scalar>(sample: &Sample<S>, m: Modality) -> Result<Sample<S>> {
    let remaining = sample
        .availability
        .iter()
        .enumerate()
        .filter(|&(i, &a)| a && i != m.index())
        .count();
    if remaining == 0 {
        return Err(Error::Contract(format!(
            "cannot remove {}: it is the last available modality",
            m.name()
        )));
    }
    let mut out = sample.clone();
    out.availability[m.index()] = false;
    out.x[m.index()] = None;
    Ok(out)
}

// ── splitting and batching ──

/// Stratified k-fold split: returns `k` disjoint index folds covering
/// `0..labels.len()`, sizes differing by at most 1, per-class counts
/// differing by at most 1 across folds, deterministic per seed.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Param(format!("need at least 2 folds, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::Param(format!(
            "need at least {k} samples for {k} folds, got {}",
            labels.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    // A cursor that never resets between classes keeps overall fold sizes
    // within 1 of each other while round-robin keeps each class spread
    // evenly.
    let mut cursor = 0usize;
    for (_, mut idxs) in by_class {
        idxs.shuffle(&mut rng);
        for i in idxs {
            folds[cursor % k].push(i);
            cursor += 1;
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Stacks the token grids of the selected samples into one `[B·L × raw_dim]`
/// matrix (sample-major, then token order). Returns `None` when the modality
/// is absent from every selected sample; mixed availability within one batch
/// is a contract error.
pub fn stack_modality<S: Scalar>(
    samples: &[Sample<S>],
    indices: &[usize],
    m: Modality,
) -> Result<Option<Tensor<S>>> {
    if indices.is_empty() {
        return Err(Error::Contract("cannot stack an empty batch".into()));
    }
    let mut present = 0usize;
    for &i in indices {
        let sample = samples
            .get(i)
            .ok_or_else(|| Error::Param(format!("sample index {i} out of range")))?;
        if sample.availability[m.index()] {
            present += 1;
        }
    }
    if present == 0 {
        return Ok(None);
    }
    if present < indices.len() {
        return Err(Error::Contract(format!(
            "mixed availability for {} within one batch ({present} of {})",
            m.name(),
            indices.len()
        )));
    }
    let first = samples[indices[0]].tokens(m)?;
    let (tokens, raw_dim) = (first.shape()[0], first.shape()[1]);
    let mut data = Vec::with_capacity(indices.len() * tokens * raw_dim);
    for &i in indices {
        let x = samples[i].tokens(m)?;
        if x.shape() != first.shape() {
            return Err(Error::shape(
                "stack_modality",
                format!("sample {i} has shape {:?}, expected {:?}", x.shape(), first.shape()),
            ));
        }
        data.extend_from_slice(x.data());
    }
    Ok(Some(Tensor::new(vec![indices.len() * tokens, raw_dim], data)?))
}

/// Labels of the selected samples, in selection order.
pub fn labels_of<S: Scalar>(samples: &[Sample<S>], indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            samples
                .get(i)
                .map(|s| s.label)
                .ok_or_else(|| Error::Param(format!("sample index {i} out of range")))
        })
        .collect()
}

// ── export ──

fn push_values<S: Scalar>(line: &mut String, x: &Tensor<S>) {
    for (j, v) in x.data().iter().enumerate() {
        if j > 0 {
            line.push(' ');
        }
        // `{}` on f64 prints the shortest digits that round-trip, so the
        // export is byte-stable across runs and platforms.
        line.push_str(&format!("{}", v.to_f64_c()));
    }
}

/// Renders the dataset in its line-delimited text format: a commented header
/// echoing the generation parameters, then one record per sample — id, label,
/// availability (fundus then oct, `1`/`0`), applied noise level, and each
/// modality's row-major token values (`-` when absent). Latents are
/// intentionally not rendered.
pub fn render_dataset<S: Scalar>(dataset: &Dataset<S>) -> String {
    let cfg = &dataset.config;
    let mut out = String::new();
    out.push_str("# two-modality token dataset v1\n");
    out.push_str(&format!(
        "# seed={} samples={} classes={} tokens={} raw_dim={} latent_dim={}\n",
        dataset.seed, cfg.samples, cfg.classes, cfg.token_count, cfg.raw_dim, cfg.latent_dim
    ));
    out.push_str("# record: id|label|avail(fundus,oct)|alpha|fundus=<values>|oct=<values>\n");
    for (i, sample) in dataset.samples.iter().enumerate() {
        let mut line = format!(
            "{i}|{}|{}{}|{}",
            sample.label,
            u8::from(sample.availability[0]),
            u8::from(sample.availability[1]),
            sample.alpha
        );
        for m in Modality::all() {
            line.push('|');
            line.push_str(m.name());
            line.push('=');
            match &sample.x[m.index()] {
                Some(x) => push_values(&mut line, x),
                None => line.push('-'),
            }
        }
        line.push('\n');
        out.push_str(&line);
    }
    out
}

/// 64-bit FNV-1a digest of the rendered dataset bytes.
pub fn dataset_digest<S: Scalar>(dataset: &Dataset<S>) -> u64 {
    fnv1a64(render_dataset(dataset).as_bytes())
}

/// Writes [`render_dataset`] output to `path` plus a `<path>.digest` file
/// holding the hex digest of those bytes; returns the digest.
pub fn export_dataset<S: Scalar>(dataset: &Dataset<S>, path: impl AsRef<Path>) -> Result<u64> {
    let out = render_dataset(dataset);
    let digest = fnv1a64(out.as_bytes());
    std::fs::write(path.as_ref(), out.as_bytes())?;
    let digest_path = {
        let mut p = path.as_ref().as_os_str().to_owned();
        p.push(".digest");
        std::path::PathBuf::from(p)
    };
    std::fs::write(digest_path, format!("{digest:016x}\n"))?;
    Ok(digest)
}

// ── ridge probe ──

/// Solves `A · W = B` for symmetric positive-definite `A` (row-major p×p)
/// via an in-place Cholesky factorization; `b` (row-major p×q) is overwritten
/// with the solution.
fn cholesky_solve<S: Scalar>(a: &mut [S], p: usize, b: &mut [S], q: usize) -> Result<()> {
    // Factor A = L·Lᵀ, storing L in the lower triangle.
    for j in 0..p {
        let mut d = a[j * p + j];
        for t in 0..j {
            d -= a[j * p + t] * a[j * p + t];
        }
        if d <= S::zero() || !d.is_finite() {
            return Err(Error::Numeric(format!(
                "matrix is not positive definite at pivot {j} (d = {d})"
            )));
        }
        let l = d.sqrt();
        a[j * p + j] = l;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for t in 0..j {
                s -= a[i * p + t] * a[j * p + t];
            }
            a[i * p + j] = s / l;
        }
    }
    // Forward-substitute L·Z = B, then back-substitute Lᵀ·W = Z.
    for col in 0..q {
        for i in 0..p {
            let mut s = b[i * q + col];
            for t in 0..i {
                s -= a[i * p + t] * b[t * q + col];
            }
            b[i * q + col] = s / a[i * p + i];
        }
        for i in (0..p).rev() {
            let mut s = b[i * q + col];
            for t in i + 1..p {
                s -= a[t * p + i] * b[t * q + col];
            }
            b[i * q + col] = s / a[i * p + i];
        }
    }
    Ok(())
}

/// Fits ridge regression (with intercept via train-mean centering) from
/// `features` to `targets` on the `train` rows and returns the held-out R²
/// on the `test` rows: `1 − Σ‖y − ŷ‖² / Σ‖y − ȳ_test‖²`, totals pooled over
/// all target dimensions.
pub fn ridge_probe<S: Scalar>(
    features: &[Vec<S>],
    targets: &[Vec<S>],
    train: &[usize],
    test: &[usize],
    lambda: f64,
) -> Result<S> {
    if features.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} feature rows vs {} target rows",
            features.len(),
            targets.len()
        )));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("ridge_probe needs non-empty train and test sets".into()));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Param(format!("ridge lambda must be positive, got {lambda}")));
    }
    let p = features.first().map(Vec::len).unwrap_or(0);
    let q = targets.first().map(Vec::len).unwrap_or(0);
    if p == 0 || q == 0 {
        return Err(Error::Contract("ridge_probe needs non-empty rows".into()));
    }
    for (name, rows, width) in [("feature", features, p), ("target", targets, q)] {
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("ridge_probe", format!("ragged {name} rows")));
        }
    }
    let fetch = |idx: &[usize]| -> Result<()> {
        match idx.iter().find(|&&i| i >= features.len()) {
            Some(&i) => Err(Error::Param(format!("row index {i} out of range"))),
            None => Ok(()),
        }
    };
    fetch(train)?;
    fetch(test)?;

    // Train means for centering (intercept handling).
    let n_train = c::<S>(train.len() as f64);
    let mut mean_x = vec![S::zero(); p];
    let mut mean_y = vec![S::zero(); q];
    for &i in train {
        for (acc, &v) in mean_x.iter_mut().zip(features[i].iter()) {
            *acc += v;
        }
        for (acc, &v) in mean_y.iter_mut().zip(targets[i].iter()) {
            *acc += v;
        }
    }
    for v in mean_x.iter_mut() {
        *v /= n_train;
    }
    for v in mean_y.iter_mut() {
        *v /= n_train;
    }

    // Normal equations on centered data: (XᵀX + λI) W = XᵀY.
    let mut a = vec![S::zero(); p * p];
    let mut b = vec![S::zero(); p * q];
    let mut xc = vec![S::zero(); p];
    for &i in train {
        for (j, (&v, &mu)) in features[i].iter().zip(mean_x.iter()).enumerate() {
            xc[j] = v - mu;
        }
        for r in 0..p {
            let xr = xc[r];
            for (col, &xcol) in xc.iter().enumerate() {
                a[r * p + col] += xr * xcol;
            }
            for (col, (&y, &mu)) in targets[i].iter().zip(mean_y.iter()).enumerate() {
                b[r * q + col] += xr * (y - mu);
            }
        }
    }
    let lam = c::<S>(lambda);
    for j in 0..p {
        a[j * p + j] += lam;
    }
    cholesky_solve(&mut a, p, &mut b, q)?;

    // Held-out R² against the test set's own per-dimension means.
    let n_test = c::<S>(test.len() as f64);
    let mut test_mean = vec![S::zero(); q];
    for &i in test {
        for (acc, &v) in test_mean.iter_mut().zip(targets[i].iter()) {
            *acc += v;
        }
    }
    for v in test_mean.iter_mut() {
        *v /= n_test;
    }
    let mut sse = S::zero();
    let mut sst = S::zero();
    for &i in test {
        for (j, (&v, &mu)) in features[i].iter().zip(mean_x.iter()).enumerate() {
            xc[j] = v - mu;
        }
        for col in 0..q {
            let mut pred = mean_y[col];
            for (r, &x) in xc.iter().enumerate() {
                pred += x * b[r * q + col];
            }
            let err = targets[i][col] - pred;
            sse += err * err;
            let dev = targets[i][col] - test_mean[col];
            sst += dev * dev;
        }
    }
    if sst <= S::zero() {
        return Err(Error::MetricUndefined("test targets are constant; R² is undefined".into()));
    }
    Ok(S::one() - sse / sst)
}

// ── tests ──
