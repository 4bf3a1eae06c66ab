//! Joint proxy learning: per-class learnable proxy sets for each modality,
//! the similarity loss pulling features toward their class proxies, and the
//! proxy-driven joint distribution used as the fusion source.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{mean_rows, row_sum, ParamRegistry};
use crate::prob::{poe_join_vars, DistributionPredictor, DistributionPredictorVars, GaussianVars};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const COSINE_EPS: f64 = 1e-8;

/// Learnable proxies: `per_class` vectors of dimension `dim` for every
/// (modality, class) pair. Sets are stored flat, indexed `m·C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank<S: Scalar> {
    sets: Vec<Tensor<S>>,
    pub modalities: usize,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
}

/// Bound tape handles for every proxy set, aligned with [`ProxyBank`] order.
#[derive(Debug, Clone)]
pub struct ProxyBankVars<S: Scalar> {
    pub sets: Vec<Var<S>>,
}

/// Outcome of positive-set selection for one feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxySelection<S: Scalar> {
    /// Chosen class: the ground-truth label in training, the
    /// highest-mean-similarity class at inference.
    pub class: usize,
    /// Per-class mean cosine similarity between the feature and each set.
    pub mean_sims: Vec<S>,
}

impl<S: Scalar> ProxyBank<S> {
    /// Proxies drawn zero-mean with scale `1/sqrt(dim)`, so each proxy's
    /// expected squared norm is 1.
    pub fn new<R: Rng>(
        modalities: usize,
        classes: usize,
        per_class: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if modalities == 0 || classes == 0 || per_class == 0 || dim == 0 {
            return Err(Error::Param(format!(
                "proxy bank needs all counts >= 1, got M={modalities} C={classes} N_p={per_class} d={dim}"
            )));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let sets = (0..modalities * classes)
            .map(|_| Tensor::randn(&[per_class, dim], std, rng))
            .collect();
        Ok(ProxyBank { sets, modalities, classes, per_class, dim })
    }

    pub fn set(&self, m: usize, class: usize) -> &Tensor<S> {
        &self.sets[m * self.classes + class]
    }

    pub fn set_mut(&mut self, m: usize, class: usize) -> &mut Tensor<S> {
        &mut self.sets[m * self.classes + class]
    }

    pub fn bind(&self, reg: &mut ParamRegistry<S>, prefix: &str, trainable: bool) -> ProxyBankVars<S> {
        let mut sets = Vec::with_capacity(self.sets.len());
        for m in 0..self.modalities {
            for cl in 0..self.classes {
                sets.push(reg.bind(format!("{prefix}.m{m}.c{cl}"), self.set(m, cl), trainable));
            }
        }
        ProxyBankVars { sets }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::with_capacity(self.sets.len());
        for m in 0..self.modalities {
            for cl in 0..self.classes {
                out.push((format!("{prefix}.m{m}.c{cl}"), self.set(m, cl)));
            }
        }
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        let classes = self.classes;
        self.sets
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("{prefix}.m{}.c{}", i / classes, i % classes), t))
            .collect()
    }

    /// Rebuilds the var bundle from a flat var sequence in bind order.
    pub fn vars_from<I: Iterator<Item = Var<S>>>(&self, it: &mut I) -> Result<ProxyBankVars<S>> {
        let mut sets = Vec::with_capacity(self.sets.len());
        for _ in 0..self.sets.len() {
            sets.push(crate::nn::next_var(it)?);
        }
        Ok(ProxyBankVars { sets })
    }

    /// Selects the positive set for `e_m`. With a label (training) the label's
    /// set is selected outright; without one (inference) the class whose
    /// proxies have the highest mean cosine similarity wins, ties going to
    /// the lowest class index.
    pub fn select_positive(
        &self,
        e_m: &[S],
        m: usize,
        label: Option<usize>,
    ) -> Result<ProxySelection<S>> {
        if m >= self.modalities {
            return Err(Error::Param(format!(
                "modality index {m} out of range (bank has {})",
                self.modalities
            )));
        }
        if e_m.len() != self.dim {
            return Err(Error::shape(
                "select_positive",
                format!("feature has {} dims, bank stores {}", e_m.len(), self.dim),
            ));
        }
        if let Some(l) = label {
            if l >= self.classes {
                return Err(Error::Param(format!(
                    "label {l} outside [0, {})",
                    self.classes
                )));
            }
        }
        let mean_sims: Vec<S> = (0..self.classes)
            .map(|cl| {
                let set = self.set(m, cl);
                let mut acc = S::zero();
                for p in 0..self.per_class {
                    acc += cosine_value(&set.data()[p * self.dim..(p + 1) * self.dim], e_m);
                }
                acc / c::<S>(self.per_class as f64)
            })
            .collect();
        let class = match label {
            Some(l) => l,
            // strict > keeps the first (lowest-index) maximum
            None => {
                let mut best = 0;
                for (i, &s) in mean_sims.iter().enumerate() {
                    if s > mean_sims[best] {
                        best = i;
                    }
                }
                best
            }
        };
        Ok(ProxySelection { class, mean_sims })
    }
}

fn cosine_value<S: Scalar>(a: &[S], b: &[S]) -> S {
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: S = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb: S = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    let v = dot / (na * nb + c::<S>(COSINE_EPS));
    v.max(-S::one()).min(S::one())
}

/// Mean-over-proxies cosine similarity between one class set `[N_p × d]` and
/// every feature row `[B × d]`, as `[1 × B]`. Same formula as the vector
/// cosine (epsilon guard, clamp), evaluated blockwise.
fn class_sim_rows<S: Scalar>(set: &Var<S>, feats: &Var<S>, tape: &Tape<S>) -> Result<Var<S>> {
    let (n_p, b) = (set.shape()[0], feats.shape()[0]);
    let dots = set.matmul(&feats.transpose()?)?; // [N_p × B]
    let pnorm = row_sum(&set.square(), tape)?.sqrt()?; // [N_p × 1]
    let fnorm = row_sum(&feats.square(), tape)?.sqrt()?.transpose()?; // [1 × B]
    let denom = pnorm
        .broadcast_to(&[n_p, b])?
        .mul(&fnorm.broadcast_to(&[n_p, b])?)?
        .add_const(COSINE_EPS);
    let cos = dots.div(&denom)?.clamp(-1.0, 1.0);
    crate::nn::col_mean(&cos, tape)
}

/// The proxy alignment loss: per modality and sample,
/// `−Sim(positive set, e) + (1/(C−1))·Σ_neg Sim(negative set, e)`,
/// averaged over the batch and the provided modalities. `features` pairs a
/// modality index with that modality's `[B × d]` feature rows. Sim is the
/// mean cosine similarity to a set's proxies, so the loss lies in [−1, 1].
pub fn proxy_loss<S: Scalar>(
    bank: &ProxyBank<S>,
    vars: &ProxyBankVars<S>,
    features: &[(usize, Var<S>)],
    labels: &[usize],
) -> Result<Var<S>> {
    if bank.classes < 2 {
        return Err(Error::Contract(
            "proxy loss needs at least two classes (negatives undefined)".into(),
        ));
    }
    if features.is_empty() {
        return Err(Error::Contract("proxy loss needs at least one modality".into()));
    }
    let b = labels.len();
    if b == 0 {
        return Err(Error::Contract("proxy loss needs a non-empty batch".into()));
    }
    for &l in labels {
        if l >= bank.classes {
            return Err(Error::Param(format!("label {l} outside [0, {})", bank.classes)));
        }
    }
    let tape = features[0].1.tape_handle();
    // coefficient matrix [C × B]: −1 on the label row, 1/(C−1) elsewhere
    let neg_w = 1.0 / (bank.classes - 1) as f64;
    let mut coeff = vec![c::<S>(neg_w); bank.classes * b];
    for (i, &l) in labels.iter().enumerate() {
        coeff[l * b + i] = -S::one();
    }
    let coeff = tape.constant(&Tensor::new(vec![bank.classes, b], coeff)?);

    let mut total: Option<Var<S>> = None;
    for (m, feats) in features {
        if *m >= bank.modalities {
            return Err(Error::Param(format!(
                "modality index {m} out of range (bank has {})",
                bank.modalities
            )));
        }
        if feats.shape() != [b, bank.dim] {
            return Err(Error::shape(
                "proxy_loss",
                format!("modality {m} features must be [{b} × {}], got {:?}", bank.dim, feats.shape()),
            ));
        }
        let rows: Vec<Var<S>> = (0..bank.classes)
            .map(|cl| class_sim_rows(&vars.sets[m * bank.classes + cl], feats, &tape))
            .collect::<Result<_>>()?;
        let sims = tape.concat(&rows, 0)?; // [C × B]
        let contrib = sims.mul(&coeff)?.sum();
        total = Some(match total {
            Some(t) => t.add(&contrib)?,
            None => contrib,
        });
    }
    Ok(total.unwrap().scale(1.0 / (features.len() * b) as f64))
}

/// Per-sample pooled positives `[B × d]`: each class set is mean-pooled over
/// its proxies and row `i` picks the pool of `classes[i]` (one-hot times the
/// stacked class means, so proxy gradients flow through).
pub fn pooled_positives<S: Scalar>(
    bank: &ProxyBank<S>,
    vars: &ProxyBankVars<S>,
    m: usize,
    classes: &[usize],
) -> Result<Var<S>> {
    if m >= bank.modalities {
        return Err(Error::Param(format!(
            "modality index {m} out of range (bank has {})",
            bank.modalities
        )));
    }
    if classes.is_empty() {
        return Err(Error::Contract("pooled_positives needs a non-empty batch".into()));
    }
    let tape = vars.sets[0].tape_handle();
    let pooled: Vec<Var<S>> = (0..bank.classes)
        .map(|cl| mean_rows(&vars.sets[m * bank.classes + cl], &tape))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&pooled, 0)?; // [C × d]
    let b = classes.len();
    let mut onehot = vec![S::zero(); b * bank.classes];
    for (i, &cl) in classes.iter().enumerate() {
        if cl >= bank.classes {
            return Err(Error::Param(format!("class {cl} outside [0, {})", bank.classes)));
        }
        onehot[i * bank.classes + cl] = S::one();
    }
    let onehot = tape.constant(&Tensor::new(vec![b, bank.classes], onehot)?);
    onehot.matmul(&stacked)
}

/// The proxy-driven joint: each available modality's selected positive set is
/// mean-pooled, pushed through that modality's distribution predictor, and
/// the resulting experts are product-of-experts-joined with the prior.
/// `experts` pairs `(modality, predictor, bound vars, selected class per
/// sample)`.
pub fn proxy_joint<S: Scalar>(
    bank: &ProxyBank<S>,
    bank_vars: &ProxyBankVars<S>,
    experts: &mut [(usize, &mut DistributionPredictor<S>, &DistributionPredictorVars<S>, &[usize])],
    prior: &GaussianVars<S>,
) -> Result<GaussianVars<S>> {
    if experts.is_empty() {
        return Err(Error::Contract("proxy_joint needs at least one available modality".into()));
    }
    let mut joined = Vec::with_capacity(experts.len());
    for (m, pred, pred_vars, classes) in experts.iter_mut() {
        let pooled = pooled_positives(bank, bank_vars, *m, classes)?;
        joined.push(pred.predict(pred_vars, &pooled, &format!("proxy.m{m}"))?);
    }
    poe_join_vars(prior, &joined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpSpec};
    use crate::prob::{poe_join, standard_prior_vars, DiagonalGaussian};
    use crate::tape::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let b1 = ProxyBank::<f64>::new(2, 3, 4, 8, &mut rng(1)).unwrap();
        let b2 = ProxyBank::<f64>::new(2, 3, 4, 8, &mut rng(1)).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.set(1, 2).shape(), &[4, 8]);
        assert_eq!(b1.params("p").len(), 6);
        assert!(ProxyBank::<f64>::new(2, 0, 4, 8, &mut rng(2)).is_err());
    }

    #[test]
    fn proxy_norms_concentrate_near_one() {
        let d = 64;
        let bank = ProxyBank::<f64>::new(2, 3, 4, d, &mut rng(3)).unwrap();
        let mut sq = Vec::new();
        for m in 0..2 {
            for cl in 0..3 {
                let set = bank.set(m, cl);
                for p in 0..4 {
                    let n: f64 = set.data()[p * d..(p + 1) * d].iter().map(|v| v * v).sum();
                    sq.push(n);
                }
            }
        }
        let rms = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 0.2, "rms norm {rms}");
        for n in sq {
            assert!((n.sqrt() - 1.0).abs() < 0.5, "proxy norm {}", n.sqrt());
        }
    }

    #[test]
    fn selection_honors_labels_and_similarity() {
        let mut bank = ProxyBank::<f64>::new(1, 3, 2, 4, &mut rng(4)).unwrap();
        // plant class 2's proxies along the feature direction
        let e = [1.0, 0.0, 0.0, 0.0];
        *bank.set_mut(0, 2) =
            Tensor::from_rows(&[vec![2.0, 0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0, 0.0]]).unwrap();
        *bank.set_mut(0, 0) =
            Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        *bank.set_mut(0, 1) =
            Tensor::from_rows(&[vec![0.0, -1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        let sel = bank.select_positive(&e, 0, None).unwrap();
        assert_eq!(sel.class, 2);
        assert!(sel.mean_sims[2] > 0.99);
        // a label overrides similarity
        assert_eq!(bank.select_positive(&e, 0, Some(1)).unwrap().class, 1);
        assert!(matches!(bank.select_positive(&e, 0, Some(3)).unwrap_err(), Error::Param(_)));
    }

    #[test]
    fn selection_ties_break_to_lowest_class() {
        let mut bank = ProxyBank::<f64>::new(1, 3, 1, 2, &mut rng(5)).unwrap();
        for cl in 0..3 {
            *bank.set_mut(0, cl) = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        }
        let sel = bank.select_positive(&[0.5, 0.5], 0, None).unwrap();
        assert_eq!(sel.class, 0);
    }

    #[test]
    fn planted_features_recover_labels_at_inference() {
        // features = proxy + noise at 10% of the proxy norm
        let (classes, n_p, d) = (3, 2, 16);
        let bank = ProxyBank::<f64>::new(1, classes, n_p, d, &mut rng(6)).unwrap();
        let mut r = rng(7);
        let mut hits = 0;
        let total = 200;
        for i in 0..total {
            let cl = i % classes;
            let p = i % n_p;
            let proxy = &bank.set(0, cl).data()[p * d..(p + 1) * d];
            let norm: f64 = proxy.iter().map(|v| v * v).sum::<f64>().sqrt();
            let e: Vec<f64> = proxy
                .iter()
                .map(|&v| v + 0.1 * norm * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                .collect();
            if bank.select_positive(&e, 0, None).unwrap().class == cl {
                hits += 1;
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc >= 0.95, "recovery accuracy {acc}");
    }

    /// Builds a bank with hand-set proxies and evaluates proxy_loss on fixed
    /// features/labels.
    fn loss_with(
        sets: &[Vec<Vec<f64>>],
        feats: &[Vec<f64>],
        labels: &[usize],
    ) -> f64 {
        let classes = sets.len();
        let d = sets[0][0].len();
        let n_p = sets[0].len();
        let mut bank = ProxyBank::<f64>::new(1, classes, n_p, d, &mut rng(8)).unwrap();
        for (cl, rows) in sets.iter().enumerate() {
            *bank.set_mut(0, cl) = Tensor::from_rows(rows).unwrap();
        }
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = bank.bind(&mut reg, "p", true);
        let f = tape.constant(&Tensor::from_rows(feats).unwrap());
        proxy_loss(&bank, &vars, &[(0, f)], labels).unwrap().item().unwrap()
    }

    #[test]
    fn perfect_alignment_scores_minus_one() {
        // feature = its positive proxy, negatives orthogonal
        let loss = loss_with(
            &[vec![vec![1.0, 0.0, 0.0]], vec![vec![0.0, 1.0, 0.0]]],
            &[vec![1.0, 0.0, 0.0]],
            &[0],
        );
        assert!((loss + 1.0).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn orthogonal_features_score_zero() {
        let loss = loss_with(
            &[vec![vec![1.0, 0.0, 0.0]], vec![vec![0.0, 1.0, 0.0]]],
            &[vec![0.0, 0.0, 1.0]],
            &[0],
        );
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn adversarial_negative_scores_plus_one() {
        // positive orthogonal to the feature, the single negative equals it
        let loss = loss_with(
            &[vec![vec![0.0, 1.0, 0.0]], vec![vec![1.0, 0.0, 0.0]]],
            &[vec![1.0, 0.0, 0.0]],
            &[0],
        );
        assert!((loss - 1.0).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn random_case_stays_in_unit_interval_and_needs_two_classes() {
        let bank = ProxyBank::<f64>::new(2, 3, 2, 5, &mut rng(9)).unwrap();
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = bank.bind(&mut reg, "p", true);
        let f0 = tape.constant(&Tensor::randn(&[4, 5], 1.0, &mut rng(10)));
        let f1 = tape.constant(&Tensor::randn(&[4, 5], 1.0, &mut rng(11)));
        let loss = proxy_loss(&bank, &vars, &[(0, f0), (1, f1)], &[0, 2, 1, 0])
            .unwrap()
            .item()
            .unwrap();
        assert!((-1.0..=1.0).contains(&loss), "loss {loss}");

        let narrow = ProxyBank::<f64>::new(1, 1, 2, 5, &mut rng(12)).unwrap();
        let mut reg2 = ParamRegistry::new(&tape);
        let nvars = narrow.bind(&mut reg2, "n", true);
        let f = tape.constant(&Tensor::randn(&[2, 5], 1.0, &mut rng(13)));
        assert!(matches!(
            proxy_loss(&narrow, &nvars, &[(0, f)], &[0, 0]).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn descent_step_on_positive_proxy_raises_similarity() {
        let mut bank = ProxyBank::<f64>::new(1, 2, 2, 4, &mut rng(14)).unwrap();
        let feat = Tensor::randn(&[1, 4], 1.0, &mut rng(15));
        let sim_to_positive = |bank: &ProxyBank<f64>| {
            bank.select_positive(feat.data(), 0, Some(0)).unwrap().mean_sims[0]
        };
        let before = sim_to_positive(&bank);
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let vars = bank.bind(&mut reg, "p", true);
        let f = tape.constant(&feat);
        proxy_loss(&bank, &vars, &[(0, f)], &[0]).unwrap().backward().unwrap();
        let grads = reg.grads();
        let g = &grads["p.m0.c0"];
        let set = bank.set_mut(0, 0);
        for (w, gk) in set.data_mut().iter_mut().zip(g) {
            *w -= 1e-2 * gk;
        }
        let after = sim_to_positive(&bank);
        assert!(after > before, "sim {before} -> {after}");
    }

    #[test]
    fn proxy_loss_gradients_match_finite_differences() {
        let bank = ProxyBank::<f64>::new(1, 2, 2, 3, &mut rng(16)).unwrap();
        let feat = Tensor::randn(&[3, 3], 1.0, &mut rng(17));
        let labels = [0usize, 1, 0];
        let params: Vec<Tensor<f64>> =
            bank.params("p").into_iter().map(|(_, t)| t.clone()).collect();
        let err = finite_diff_check(&params, 1e-5, move |tape, vs| {
            let bank = ProxyBank::<f64>::new(1, 2, 2, 3, &mut rng(16)).unwrap();
            let vars = ProxyBankVars { sets: vs.to_vec() };
            let f = tape.constant(&feat);
            proxy_loss(&bank, &vars, &[(0, f)], &labels)
        })
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    fn zero_head(d_in: usize, d_out: usize, r: &mut ChaCha8Rng) -> DistributionPredictor<f64> {
        let spec = MlpSpec::new(vec![d_in, d_out], false, Activation::Identity).unwrap();
        let mut p = DistributionPredictor::new(spec.clone(), spec, false, r).unwrap();
        for mlp in [&mut p.f_mu, &mut p.f_logvar] {
            for w in &mut mlp.weights {
                *w = Tensor::zeros(&w.shape().to_vec());
            }
        }
        p
    }

    #[test]
    fn proxy_joint_with_unit_experts_matches_symmetric_form() {
        // zero-weight heads emit N(0, I) for both modalities; with the
        // standard-normal prior the joint is N(0, I/3).
        let d = 3;
        let bank = ProxyBank::<f64>::new(2, 2, 2, d, &mut rng(18)).unwrap();
        let mut p0 = zero_head(d, d, &mut rng(19));
        let mut p1 = zero_head(d, d, &mut rng(20));
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let bvars = bank.bind(&mut reg, "p", true);
        let v0 = p0.bind(&mut reg, "d0", true);
        let v1 = p1.bind(&mut reg, "d1", true);
        let classes = [0usize, 1];
        let prior = standard_prior_vars(&tape, 2, d);
        let joint = proxy_joint(
            &bank,
            &bvars,
            &mut [(0, &mut p0, &v0, &classes), (1, &mut p1, &v1, &classes)],
            &prior,
        )
        .unwrap();
        for v in joint.mu.value() {
            assert!(v.abs() < 1e-12);
        }
        for lv in joint.log_var.value() {
            assert!((lv.exp() - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_modality_joint_is_wider() {
        let d = 2;
        let bank = ProxyBank::<f64>::new(2, 2, 3, d, &mut rng(21)).unwrap();
        let spec = MlpSpec::new(vec![d, 4, d], false, Activation::Relu).unwrap();
        let mut pred =
            DistributionPredictor::<f64>::new(spec.clone(), spec.clone(), false, &mut rng(22)).unwrap();
        let mut pred_b =
            DistributionPredictor::<f64>::new(spec.clone(), spec, false, &mut rng(23)).unwrap();
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let bvars = bank.bind(&mut reg, "p", true);
        let pv = pred.bind(&mut reg, "d", true);
        let pv_b = pred_b.bind(&mut reg, "db", true);
        let classes = [1usize, 0, 1];
        let prior = standard_prior_vars(&tape, 3, d);
        let single =
            proxy_joint(&bank, &bvars, &mut [(0, &mut pred, &pv, &classes)], &prior).unwrap();
        let both = proxy_joint(
            &bank,
            &bvars,
            &mut [(0, &mut pred, &pv, &classes), (1, &mut pred_b, &pv_b, &classes)],
            &prior,
        )
        .unwrap();
        for (s, b) in single.log_var.value().iter().zip(both.log_var.value()) {
            assert!(s > &b, "single {s} vs both {b}");
        }
        assert!(matches!(
            proxy_joint(&bank, &bvars, &mut [], &prior).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn proxy_joint_matches_step_by_step_composition() {
        let d = 3;
        let bank = ProxyBank::<f64>::new(1, 2, 2, d, &mut rng(24)).unwrap();
        let spec = MlpSpec::new(vec![d, 5, d], false, Activation::Relu).unwrap();
        let mut pred =
            DistributionPredictor::<f64>::new(spec.clone(), spec, false, &mut rng(25)).unwrap();
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let bvars = bank.bind(&mut reg, "p", true);
        let pv = pred.bind(&mut reg, "d", true);
        let classes = [0usize, 1];
        let prior = standard_prior_vars(&tape, 2, d);
        let joint =
            proxy_joint(&bank, &bvars, &mut [(0, &mut pred, &pv, &classes)], &prior).unwrap();

        // composition through the public ops
        let pooled = pooled_positives(&bank, &bvars, 0, &classes).unwrap();
        let expert = pred.predict(&pv, &pooled, "m0").unwrap();
        let manual = poe_join_vars(&prior, &[expert.clone()]).unwrap();
        assert_eq!(joint.mu.value(), manual.mu.value());
        assert_eq!(joint.log_var.value(), manual.log_var.value());

        // value-level agreement per row
        let jr = joint.rows().unwrap();
        let pooled_vals = pooled.value();
        for (i, &cl) in classes.iter().enumerate() {
            let row = &pooled_vals[i * d..(i + 1) * d];
            let set = bank.set(0, cl);
            for k in 0..d {
                let want: f64 = (0..2).map(|p| set.at2(p, k)).sum::<f64>() / 2.0;
                assert!((row[k] - want).abs() < 1e-12);
            }
            let prior_row = DiagonalGaussian::standard(d);
            let expert_rows = expert.rows().unwrap();
            let want = poe_join(&prior_row, &[expert_rows[i].clone()]).unwrap();
            for k in 0..d {
                assert!((jr[i].mu()[k] - want.mu()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn proxy_joint_precision_recomposition() {
        let d = 2;
        let bank = ProxyBank::<f64>::new(2, 2, 2, d, &mut rng(26)).unwrap();
        let spec = MlpSpec::new(vec![d, 4, d], false, Activation::Relu).unwrap();
        let mut p0 =
            DistributionPredictor::<f64>::new(spec.clone(), spec.clone(), false, &mut rng(27)).unwrap();
        let mut p1 =
            DistributionPredictor::<f64>::new(spec.clone(), spec, false, &mut rng(28)).unwrap();
        let tape = Tape::new();
        let mut reg = ParamRegistry::new(&tape);
        let bvars = bank.bind(&mut reg, "p", true);
        let v0 = p0.bind(&mut reg, "d0", true);
        let v1 = p1.bind(&mut reg, "d1", true);
        let classes = [0usize, 1, 1];
        let prior = standard_prior_vars(&tape, 3, d);
        let e0 = p0.predict(&v0, &pooled_positives(&bank, &bvars, 0, &classes).unwrap(), "m0").unwrap();
        let e1 = p1.predict(&v1, &pooled_positives(&bank, &bvars, 1, &classes).unwrap(), "m1").unwrap();
        let joint = proxy_joint(
            &bank,
            &bvars,
            &mut [(0, &mut p0, &v0, &classes), (1, &mut p1, &v1, &classes)],
            &prior,
        )
        .unwrap();
        let (l0, l1, lj) = (e0.log_var.value(), e1.log_var.value(), joint.log_var.value());
        for k in 0..lj.len() {
            let want = 1.0 + (-l0[k]).exp() + (-l1[k]).exp();
            let got = (-lj[k]).exp();
            assert!((got - want).abs() / want < 1e-12, "prec {got} vs {want}");
        }
    }

    #[test]
    fn proxy_joint_gradients_match_finite_differences() {
        let d = 2;
        let bank = ProxyBank::<f64>::new(1, 2, 2, d, &mut rng(29)).unwrap();
        let spec = MlpSpec::new(vec![d, 4, d], false, Activation::Sigmoid).unwrap();
        let pred =
            DistributionPredictor::<f64>::new(spec.clone(), spec.clone(), false, &mut rng(30)).unwrap();
        let mut params: Vec<Tensor<f64>> =
            bank.params("p").into_iter().map(|(_, t)| t.clone()).collect();
        let n_bank = params.len();
        params.extend(pred.params("d").into_iter().map(|(_, t)| t.clone()));
        let classes = [0usize, 1];
        let err = finite_diff_check(&params, 1e-5, move |tape, vs| {
            let bank = ProxyBank::<f64>::new(1, 2, 2, d, &mut rng(29)).unwrap();
            let mut pred =
                DistributionPredictor::<f64>::new(spec.clone(), spec.clone(), false, &mut rng(30))
                    .unwrap();
            let bvars = ProxyBankVars { sets: vs[..n_bank].to_vec() };
            // distribute the remaining vars into the two head MLPs,
            // following the interleaved w0, b0, w1, b1, … params order
            let mut it = vs[n_bank..].iter().cloned();
            let mut head = |mlp: &crate::nn::Mlp<f64>| {
                let mut weights = Vec::new();
                let mut biases = Vec::new();
                for l in 0..mlp.weights.len() {
                    weights.push(it.next().unwrap());
                    biases.push(mlp.biases[l].as_ref().map(|_| it.next().unwrap()));
                }
                crate::nn::MlpVars { weights, biases, bn: Vec::new() }
            };
            let pv = DistributionPredictorVars { mu: head(&pred.f_mu), logvar: head(&pred.f_logvar) };
            let prior = standard_prior_vars(tape, 2, d);
            let joint =
                proxy_joint(&bank, &bvars, &mut [(0, &mut pred, &pv, &classes)], &prior)?;
            let eps = tape.constant(&Tensor::randn(&[2, d], 1.0, &mut rng(31)));
            let s = crate::prob::sample_reparam_vars(&joint, &eps)?;
            Ok(s.square().sum())
        })
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }
}
