//! Optimization terms: confidence-gated directional contrastive loss,
//! class-frequency balance loss, construction (squared-error) loss, weight
//! decay, and the multi-stage total.
//!
//! Every term comes in a value form and a `_grad` form returning the value
//! together with analytic gradients for the trainable inputs. The
//! contrastive target embeddings are frozen by contract: alignment flows
//! from the low-confidence side to the high-confidence side only, so no
//! gradient is ever produced for `emb_b`.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-5;

/// Inputs to one directional evaluation of the contrastive loss.
///
/// Row `i` of `emb_a` (anchor, trainable) pairs with row `i` of `emb_b`
/// (target, frozen); `neg_bank` is shared across anchors. `conf_*` are the
/// max-class probabilities used by the confidence gate.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// N_p x D anchor embeddings, unit rows.
    pub emb_a: Array2<f64>,
    /// N_p x D target embeddings, unit rows; no gradient flows into these.
    pub emb_b: Array2<f64>,
    /// Anchor-side max-class probabilities, in [0, 1].
    pub conf_a: Array1<f64>,
    /// Target-side max-class probabilities, in [0, 1].
    pub conf_b: Array1<f64>,
    /// K x D negative embeddings, unit rows.
    pub neg_bank: Array2<f64>,
    /// Softmax temperature, > 0.
    pub tau: f64,
    /// Confidence gate threshold, in [0, 1).
    pub alpha_conf: f64,
    /// Drop the positive term from the denominator (the printed form;
    /// unbounded below, off by default).
    pub exclusive_denominator: bool,
}

/// The gate admitting a positive pair: strictly
/// `alpha_conf < conf_a < conf_b`.
pub fn confidence_indicator(conf_a: f64, conf_b: f64, alpha_conf: f64) -> bool {
    alpha_conf < conf_a && conf_a < conf_b
}

fn check_unit_rows(name: &str, m: &ArrayView2<f64>) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Argument(format!(
                "{name} row {i} has L2 norm {norm}, expected 1 +- {NORM_TOL}"
            )));
        }
    }
    Ok(())
}

fn validate_contrastive(batch: &ContrastiveBatch) -> Result<()> {
    let n = batch.emb_a.nrows();
    if batch.emb_b.nrows() != n || batch.conf_a.len() != n || batch.conf_b.len() != n {
        return Err(Error::Argument(
            "contrastive batch: emb_a/emb_b/conf_a/conf_b lengths differ".into(),
        ));
    }
    let d = batch.emb_a.ncols();
    if batch.emb_b.ncols() != d || batch.neg_bank.ncols() != d {
        return Err(Error::Argument(
            "contrastive batch: embedding dimensions differ".into(),
        ));
    }
    if batch.neg_bank.nrows() == 0 {
        return Err(Error::Argument("contrastive batch: empty negative bank".into()));
    }
    if batch.tau <= 0.0 {
        return Err(Error::Argument(format!("tau must be > 0, got {}", batch.tau)));
    }
    if batch
        .conf_a
        .iter()
        .chain(batch.conf_b.iter())
        .any(|&c| !(0.0..=1.0).contains(&c))
    {
        return Err(Error::Argument("confidences must lie in [0, 1]".into()));
    }
    check_unit_rows("emb_a", &batch.emb_a.view())?;
    check_unit_rows("emb_b", &batch.emb_b.view())?;
    check_unit_rows("neg_bank", &batch.neg_bank.view())
}

/// Confidence-gated InfoNCE over the gated positive pairs; 0 when every
/// pair is gated out. Computed with max-subtraction for stability.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    contrastive_loss_grad(batch).map(|(value, _, _)| value)
}

/// Value plus gradients w.r.t. the anchors and the negative bank.
/// The target side is frozen: its gradient is identically zero.
pub fn contrastive_loss_grad(
    batch: &ContrastiveBatch,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    validate_contrastive(batch)?;
    Ok(contrastive_loss_grad_unchecked(batch))
}

/// The mathematical form without the input-contract checks. Finite-difference
/// verification needs this: probing a coordinate moves a row slightly off the
/// unit sphere, which the validated entry point rejects by design.
pub fn contrastive_loss_grad_unchecked(
    batch: &ContrastiveBatch,
) -> (f64, Array2<f64>, Array2<f64>) {
    let n = batch.emb_a.nrows();
    let k = batch.neg_bank.nrows();
    let tau = batch.tau;

    let mut d_anchor = Array2::<f64>::zeros(batch.emb_a.raw_dim());
    let mut d_neg = Array2::<f64>::zeros(batch.neg_bank.raw_dim());

    let gated: Vec<usize> = (0..n)
        .filter(|&i| confidence_indicator(batch.conf_a[i], batch.conf_b[i], batch.alpha_conf))
        .collect();
    if gated.is_empty() {
        return (0.0, d_anchor, d_neg);
    }
    let n_eff = gated.len() as f64;

    let mut loss = 0.0;
    let mut neg_logits = vec![0.0f64; k];
    for &i in &gated {
        let anchor = batch.emb_a.row(i);
        let target = batch.emb_b.row(i);
        let pos_logit = anchor.dot(&target) / tau;
        let mut max_neg = f64::NEG_INFINITY;
        for (j, neg) in batch.neg_bank.rows().into_iter().enumerate() {
            neg_logits[j] = anchor.dot(&neg) / tau;
            max_neg = max_neg.max(neg_logits[j]);
        }

        if batch.exclusive_denominator {
            // -log( exp(l+) / sum_k exp(l-_k) )
            let z: f64 = neg_logits.iter().map(|l| (l - max_neg).exp()).sum();
            loss += max_neg + z.ln() - pos_logit;
            let scale = 1.0 / (n_eff * tau);
            for (j, neg) in batch.neg_bank.rows().into_iter().enumerate() {
                let q = (neg_logits[j] - max_neg).exp() / z;
                d_anchor
                    .row_mut(i)
                    .iter_mut()
                    .zip(neg.iter())
                    .for_each(|(g, &v)| *g += scale * q * v);
                d_neg
                    .row_mut(j)
                    .iter_mut()
                    .zip(anchor.iter())
                    .for_each(|(g, &v)| *g += scale * q * v);
            }
            d_anchor
                .row_mut(i)
                .iter_mut()
                .zip(target.iter())
                .for_each(|(g, &v)| *g -= scale * v);
        } else {
            // -log( exp(l+) / (exp(l+) + sum_k exp(l-_k)) )
            let m = max_neg.max(pos_logit);
            let z_pos = (pos_logit - m).exp();
            let z: f64 = z_pos + neg_logits.iter().map(|l| (l - m).exp()).sum::<f64>();
            loss += m + z.ln() - pos_logit;
            let scale = 1.0 / (n_eff * tau);
            let p_pos = z_pos / z;
            for (j, neg) in batch.neg_bank.rows().into_iter().enumerate() {
                let p = (neg_logits[j] - m).exp() / z;
                d_anchor
                    .row_mut(i)
                    .iter_mut()
                    .zip(neg.iter())
                    .for_each(|(g, &v)| *g += scale * p * v);
                d_neg
                    .row_mut(j)
                    .iter_mut()
                    .zip(anchor.iter())
                    .for_each(|(g, &v)| *g += scale * p * v);
            }
            d_anchor
                .row_mut(i)
                .iter_mut()
                .zip(target.iter())
                .for_each(|(g, &v)| *g += scale * (p_pos - 1.0) * v);
        }
    }

    (loss / n_eff, d_anchor, d_neg)
}

/// How the class weights of the balance loss are derived from the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassWeighting {
    /// lambda_1 = N_1/N_total, lambda_2 = N_2/N_total (the printed form).
    #[default]
    AsPrinted,
    /// Swapped: lambda_1 = N_2/N_total — upweights the rare foreground.
    InverseFrequency,
    /// lambda_1 = lambda_2 = 1.
    Uniform,
}

#[derive(Debug, Clone, Copy)]
pub struct BalanceOpts {
    /// Focal exponent on the modulating factor (>= 0).
    pub alpha_exp: f64,
    /// Log clamp epsilon.
    pub eps: f64,
    pub weighting: ClassWeighting,
}

impl Default for BalanceOpts {
    fn default() -> Self {
        BalanceOpts {
            alpha_exp: 2.0,
            eps: 1e-7,
            weighting: ClassWeighting::AsPrinted,
        }
    }
}

/// (lambda_1, lambda_2) for a ground-truth mask under the given weighting.
pub fn class_weights(gt: &ArrayView2<u8>, weighting: ClassWeighting) -> (f64, f64) {
    let n_total = gt.len() as f64;
    let n1 = gt.iter().filter(|&&v| v != 0).count() as f64;
    let n2 = n_total - n1;
    match weighting {
        ClassWeighting::AsPrinted => (n1 / n_total, n2 / n_total),
        ClassWeighting::InverseFrequency => (n2 / n_total, n1 / n_total),
        ClassWeighting::Uniform => (1.0, 1.0),
    }
}

/// Class-frequency-weighted focal binary cross-entropy:
///
/// `-(1/N) sum_i [ gt_i * l1 * (1-b_i)^a * ln(b_i+eps)
///               + (1-gt_i) * l2 * b_i^a * ln(1-b_i+eps) ]`
pub fn balance_loss(pred: &ArrayView2<f64>, gt: &ArrayView2<u8>, opts: &BalanceOpts) -> Result<f64> {
    balance_loss_grad(pred, gt, opts).map(|(value, _)| value)
}

/// Value plus gradient w.r.t. the prediction map.
pub fn balance_loss_grad(
    pred: &ArrayView2<f64>,
    gt: &ArrayView2<u8>,
    opts: &BalanceOpts,
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Argument(format!(
            "balance_loss: pred shape {:?} != gt shape {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Argument("balance_loss: empty maps".into()));
    }
    let (l1, l2) = class_weights(gt, opts.weighting);
    let a = opts.alpha_exp;
    let eps = opts.eps;
    let inv_n = 1.0 / pred.len() as f64;

    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(pred.raw_dim());
    for ((&b, &y), g) in pred.iter().zip(gt.iter()).zip(grad.iter_mut()) {
        if y != 0 {
            let log_b = (b + eps).ln();
            if a == 0.0 {
                loss += l1 * log_b;
                *g = -inv_n * l1 / (b + eps);
            } else {
                let f = (1.0 - b).powf(a);
                loss += l1 * f * log_b;
                let df = -a * (1.0 - b).powf(a - 1.0);
                *g = -inv_n * l1 * (df * log_b + f / (b + eps));
            }
        } else {
            let log_nb = (1.0 - b + eps).ln();
            if a == 0.0 {
                loss += l2 * log_nb;
                *g = inv_n * l2 / (1.0 - b + eps);
            } else {
                let f = b.powf(a);
                loss += l2 * f * log_nb;
                let df = a * b.powf(a - 1.0);
                *g = -inv_n * l2 * (df * log_nb - f / (1.0 - b + eps));
            }
        }
    }
    Ok((-inv_n * loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// Squared-error construction loss between prediction and target maps.
pub fn construction_loss(
    pred: &ArrayView2<f64>,
    gt: &ArrayView2<f64>,
    reduction: Reduction,
) -> Result<f64> {
    construction_loss_grad(pred, gt, reduction).map(|(value, _)| value)
}

/// Value plus gradient w.r.t. the prediction map.
pub fn construction_loss_grad(
    pred: &ArrayView2<f64>,
    gt: &ArrayView2<f64>,
    reduction: Reduction,
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Argument(format!(
            "construction_loss: pred shape {:?} != gt shape {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / pred.len().max(1) as f64,
    };
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(pred.raw_dim());
    for ((&p, &y), g) in pred.iter().zip(gt.iter()).zip(grad.iter_mut()) {
        let d = p - y;
        loss += d * d;
        *g = 2.0 * scale * d;
    }
    Ok((scale * loss, grad))
}

/// `(lambda/2) * sum w^2` over every entry of every parameter vector.
/// Callers pass weights only; biases are excluded by convention.
pub fn weight_decay_loss<'a, I>(param_vectors: I, lambda_wd: f64) -> f64
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let sq: f64 = param_vectors
        .into_iter()
        .flat_map(|v| v.iter())
        .map(|&w| w * w)
        .sum();
    0.5 * lambda_wd * sq
}

/// Named scalar terms of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub contrast: f64,
    pub balance: f64,
    pub construction: f64,
    pub weight_decay: f64,
    pub total: f64,
    /// Per-stage (contrast_m, balance_m) pairs.
    pub per_stage: Vec<(f64, f64)>,
}

/// Assemble the multi-stage total:
/// `total = construction + weight_decay + sum_m (contrast_m + balance_m)`.
pub fn total_loss(
    stage_terms: &[(f64, f64)],
    construction: f64,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    if stage_terms.is_empty() {
        return Err(Error::Argument("total_loss: empty stage list".into()));
    }
    let contrast: f64 = stage_terms.iter().map(|(c, _)| c).sum();
    let balance: f64 = stage_terms.iter().map(|(_, b)| b).sum();
    Ok(LossBreakdown {
        contrast,
        balance,
        construction,
        weight_decay,
        total: construction + weight_decay + contrast + balance,
        per_stage: stage_terms.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((n, d));
        for mut row in m.rows_mut() {
            let mut norm = 0.0;
            for v in row.iter_mut() {
                *v = normal(rng);
                norm += *v * *v;
            }
            let norm = norm.sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
        }
        m
    }

    fn random_batch(n: usize, k: usize, d: usize, tau: f64, rng: &mut ChaCha8Rng) -> ContrastiveBatch {
        ContrastiveBatch {
            emb_a: unit_rows(n, d, rng),
            emb_b: unit_rows(n, d, rng),
            conf_a: (0..n).map(|_| rng.random()).collect(),
            conf_b: (0..n).map(|_| rng.random()).collect(),
            neg_bank: unit_rows(k, d, rng),
            tau,
            alpha_conf: 0.25,
            exclusive_denominator: false,
        }
    }

    /// Straight-line double-loop oracle: no stabilization, no shortcuts.
    fn contrastive_oracle(batch: &ContrastiveBatch) -> f64 {
        let mut total = 0.0;
        let mut n_eff = 0usize;
        for i in 0..batch.emb_a.nrows() {
            if !(batch.alpha_conf < batch.conf_a[i] && batch.conf_a[i] < batch.conf_b[i]) {
                continue;
            }
            n_eff += 1;
            let pos = (batch.emb_a.row(i).dot(&batch.emb_b.row(i)) / batch.tau).exp();
            let mut denom = if batch.exclusive_denominator { 0.0 } else { pos };
            for j in 0..batch.neg_bank.nrows() {
                denom += (batch.emb_a.row(i).dot(&batch.neg_bank.row(j)) / batch.tau).exp();
            }
            total += -(pos / denom).ln();
        }
        if n_eff == 0 {
            0.0
        } else {
            total / n_eff as f64
        }
    }

    #[test]
    fn confidence_indicator_matches_strict_inequalities() {
        assert!(confidence_indicator(0.8, 0.9, 0.75));
        assert!(!confidence_indicator(0.9, 0.8, 0.75));
        assert!(!confidence_indicator(0.5, 0.9, 0.75));
        assert!(!confidence_indicator(0.75, 0.9, 0.75)); // boundary is excluded
        assert!(!confidence_indicator(0.8, 0.8, 0.75));
    }

    #[test]
    fn two_term_softmax_gives_ln_two() {
        let e = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let batch = ContrastiveBatch {
            emb_a: e.clone(),
            emb_b: e.clone(),
            conf_a: Array1::from(vec![0.8]),
            conf_b: Array1::from(vec![0.9]),
            neg_bank: e,
            tau: 1.0,
            alpha_conf: 0.75,
            exclusive_denominator: false,
        };
        assert_relative_eq!(
            contrastive_loss(&batch).unwrap(),
            std::f64::consts::LN_2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn fully_gated_batch_has_zero_loss_and_gradients() {
        let mut rng = stream(1, "gated", &[]);
        let mut batch = random_batch(6, 8, 4, 0.1, &mut rng);
        // conf_b <= conf_a everywhere: every pair is gated out
        batch.conf_b = batch.conf_a.clone();
        let (loss, da, dn) = contrastive_loss_grad(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(da.iter().all(|&g| g == 0.0));
        assert!(dn.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn contrastive_matches_oracle_on_random_batches() {
        let mut rng = stream(42, "oracle", &[]);
        for trial in 0..100 {
            let mut batch = random_batch(8, 16, 4, 0.1, &mut rng);
            batch.exclusive_denominator = trial % 4 == 3;
            let expect = contrastive_oracle(&batch);
            let got = contrastive_loss(&batch).unwrap();
            assert_relative_eq!(got, expect, max_relative = 1e-6);
        }
    }

    #[test]
    fn non_normalized_embeddings_are_rejected() {
        let mut rng = stream(2, "norm", &[]);
        let mut batch = random_batch(2, 4, 4, 0.1, &mut rng);
        batch.emb_a[[0, 0]] *= 1.5;
        assert!(matches!(
            contrastive_loss(&batch),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let value_at = |b: &ContrastiveBatch| contrastive_loss_grad_unchecked(b).0;
        let mut rng = stream(3, "gradcheck", &[]);
        let step = 1e-4;
        for _ in 0..50 {
            let batch = random_batch(4, 6, 4, 0.2, &mut rng);
            let (_, da, dn) = contrastive_loss_grad(&batch).unwrap();
            let mut max_rel = 0.0f64;
            for i in 0..batch.emb_a.nrows() {
                for j in 0..batch.emb_a.ncols() {
                    let mut plus = batch.clone();
                    plus.emb_a[[i, j]] += step;
                    let mut minus = batch.clone();
                    minus.emb_a[[i, j]] -= step;
                    let fd = (value_at(&plus) - value_at(&minus)) / (2.0 * step);
                    let denom = fd.abs().max(da[[i, j]].abs()).max(1e-6);
                    max_rel = max_rel.max((fd - da[[i, j]]).abs() / denom);
                }
            }
            for i in 0..batch.neg_bank.nrows() {
                for j in 0..batch.neg_bank.ncols() {
                    let mut plus = batch.clone();
                    plus.neg_bank[[i, j]] += step;
                    let mut minus = batch.clone();
                    minus.neg_bank[[i, j]] -= step;
                    let fd = (value_at(&plus) - value_at(&minus)) / (2.0 * step);
                    let denom = fd.abs().max(dn[[i, j]].abs()).max(1e-6);
                    max_rel = max_rel.max((fd - dn[[i, j]]).abs() / denom);
                }
            }
            assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
        }
    }

    #[test]
    fn frozen_target_receives_exactly_zero_gradient() {
        // perturbing emb_b changes the value, but the analytic gradient
        // w.r.t. emb_b is identically zero by the directionality contract
        let mut rng = stream(4, "frozen", &[]);
        let mut batch = random_batch(4, 6, 4, 0.2, &mut rng);
        batch.conf_a.fill(0.8);
        batch.conf_b.fill(0.9);
        let base = contrastive_loss(&batch).unwrap();
        let mut moved = batch.clone();
        moved.emb_b = unit_rows(4, 4, &mut rng);
        let shifted = contrastive_loss(&moved).unwrap();
        assert_ne!(base, shifted, "value must depend on the target");
        // the grad API only exposes (anchor, negatives): the target slot has
        // no gradient path at all, which is the strongest form of zero.
        let (_, da, dn) = contrastive_loss_grad(&batch).unwrap();
        assert!(da.iter().any(|&g| g != 0.0));
        assert!(dn.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn class_weights_follow_counts() {
        let gt = Array2::from_shape_vec(
            (2, 5),
            vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
        )
        .unwrap();
        let (l1, l2) = class_weights(&gt.view(), ClassWeighting::AsPrinted);
        assert_relative_eq!(l1, 0.3);
        assert_relative_eq!(l2, 0.7);
        let (l1, l2) = class_weights(&gt.view(), ClassWeighting::InverseFrequency);
        assert_relative_eq!(l1, 0.7);
        assert_relative_eq!(l2, 0.3);
    }

    #[test]
    fn alpha_zero_uniform_weights_reduce_to_bce() {
        let mut rng = stream(5, "bce", &[]);
        for _ in 0..20 {
            let pred = Array2::from_shape_fn((8, 8), |_| 0.01 + 0.98 * rng.random::<f64>());
            let gt = Array2::from_shape_fn((8, 8), |_| u8::from(rng.random::<f64>() > 0.5));
            let opts = BalanceOpts {
                alpha_exp: 0.0,
                eps: 1e-7,
                weighting: ClassWeighting::Uniform,
            };
            let got = balance_loss(&pred.view(), &gt.view(), &opts).unwrap();
            // scalar BCE oracle
            let mut expect = 0.0;
            for (&b, &y) in pred.iter().zip(gt.iter()) {
                expect -= if y != 0 {
                    (b + 1e-7).ln()
                } else {
                    (1.0 - b + 1e-7).ln()
                };
            }
            expect /= pred.len() as f64;
            assert_relative_eq!(got, expect, max_relative = 1e-6);
        }
    }

    #[test]
    fn balance_matches_per_pixel_oracle() {
        let mut rng = stream(6, "balance-oracle", &[]);
        for _ in 0..100 {
            let pred = Array2::from_shape_fn((4, 4), |_| 0.01 + 0.98 * rng.random::<f64>());
            let gt = Array2::from_shape_fn((4, 4), |_| u8::from(rng.random::<f64>() > 0.7));
            let opts = BalanceOpts {
                alpha_exp: 2.0,
                eps: 1e-7,
                weighting: ClassWeighting::AsPrinted,
            };
            let got = balance_loss(&pred.view(), &gt.view(), &opts).unwrap();

            let n = 16.0;
            let n1: f64 = gt.iter().map(|&v| v as f64).sum();
            let (l1, l2) = (n1 / n, (n - n1) / n);
            let mut expect = 0.0;
            for (&b, &y) in pred.iter().zip(gt.iter()) {
                if y != 0 {
                    expect += l1 * (1.0 - b) * (1.0 - b) * (b + 1e-7).ln();
                } else {
                    expect += l2 * b * b * (1.0 - b + 1e-7).ln();
                }
            }
            assert_relative_eq!(got, -expect / n, max_relative = 1e-6);
        }
    }

    #[test]
    fn balance_gradient_matches_finite_differences() {
        let mut rng = stream(7, "balance-grad", &[]);
        let step = 1e-4;
        for trial in 0..50 {
            let pred = Array2::from_shape_fn((3, 3), |_| 0.05 + 0.9 * rng.random::<f64>());
            let gt = Array2::from_shape_fn((3, 3), |_| u8::from(rng.random::<f64>() > 0.6));
            let opts = BalanceOpts {
                alpha_exp: [0.0, 1.0, 2.0, 3.0][trial % 4],
                eps: 1e-7,
                weighting: ClassWeighting::AsPrinted,
            };
            let (_, grad) = balance_loss_grad(&pred.view(), &gt.view(), &opts).unwrap();
            for idx in 0..9 {
                let (r, c) = (idx / 3, idx % 3);
                let mut plus = pred.clone();
                plus[[r, c]] += step;
                let mut minus = pred.clone();
                minus[[r, c]] -= step;
                let fd = (balance_loss(&plus.view(), &gt.view(), &opts).unwrap()
                    - balance_loss(&minus.view(), &gt.view(), &opts).unwrap())
                    / (2.0 * step);
                let denom = fd.abs().max(grad[[r, c]].abs()).max(1e-6);
                assert!(
                    (fd - grad[[r, c]]).abs() / denom < 1e-4,
                    "balance grad mismatch: fd {fd} vs {}",
                    grad[[r, c]]
                );
            }
        }
    }

    #[test]
    fn perfect_prediction_drives_balance_to_zero() {
        let gt = Array2::from_shape_vec((2, 2), vec![1u8, 0, 0, 1]).unwrap();
        let pred = gt.mapv(|v| v as f64);
        for alpha in [0.0, 1.0, 2.0] {
            let opts = BalanceOpts {
                alpha_exp: alpha,
                eps: 1e-7,
                weighting: ClassWeighting::AsPrinted,
            };
            let loss = balance_loss(&pred.view(), &gt.view(), &opts).unwrap();
            assert!(loss.abs() < 1e-6, "alpha {alpha}: loss {loss}");
        }
    }

    #[test]
    fn degenerate_all_one_gt_is_defined() {
        let gt = Array2::from_elem((4, 4), 1u8);
        let pred = Array2::from_elem((4, 4), 0.9);
        let loss = balance_loss(&pred.view(), &gt.view(), &BalanceOpts::default()).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn construction_examples() {
        let y = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
        assert_eq!(
            construction_loss(&y.view(), &y.view(), Reduction::Sum).unwrap(),
            0.0
        );
        let p = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        assert_eq!(
            construction_loss(&p.view(), &y.view(), Reduction::Sum).unwrap(),
            1.0
        );

        let mut rng = stream(8, "construction", &[]);
        let a = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let mean = construction_loss(&a.view(), &b.view(), Reduction::Mean).unwrap();
        let sum = construction_loss(&a.view(), &b.view(), Reduction::Sum).unwrap();
        assert_relative_eq!(mean, sum / 256.0, max_relative = 1e-9);
    }

    #[test]
    fn construction_gradient_matches_finite_differences() {
        let mut rng = stream(9, "construction-grad", &[]);
        let step = 1e-4;
        for _ in 0..50 {
            let pred = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>());
            let gt = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>());
            for reduction in [Reduction::Sum, Reduction::Mean] {
                let (_, grad) =
                    construction_loss_grad(&pred.view(), &gt.view(), reduction).unwrap();
                for idx in 0..9 {
                    let (r, c) = (idx / 3, idx % 3);
                    let mut plus = pred.clone();
                    plus[[r, c]] += step;
                    let mut minus = pred.clone();
                    minus[[r, c]] -= step;
                    let fd = (construction_loss(&plus.view(), &gt.view(), reduction).unwrap()
                        - construction_loss(&minus.view(), &gt.view(), reduction).unwrap())
                        / (2.0 * step);
                    let denom = fd.abs().max(grad[[r, c]].abs()).max(1e-6);
                    assert!((fd - grad[[r, c]]).abs() / denom < 1e-4);
                }
            }
        }
    }

    #[test]
    fn weight_decay_examples() {
        assert_eq!(weight_decay_loss([&[0.0, 0.0][..]], 2e-4), 0.0);
        // squared norm 2 at lambda 2e-4 -> 2e-4
        let v = [1.0, 1.0];
        assert_relative_eq!(weight_decay_loss([&v[..]], 2e-4), 2e-4, max_relative = 1e-12);

        let mut rng = stream(10, "wd", &[]);
        let a: Vec<f64> = (0..37).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = (0..11).map(|_| normal(&mut rng)).collect();
        let got = weight_decay_loss([a.as_slice(), b.as_slice()], 0.3);
        let expect: f64 = 0.5 * 0.3 * (a.iter().chain(&b).map(|w| w * w).sum::<f64>());
        assert_relative_eq!(got, expect, max_relative = 1e-9);
    }

    #[test]
    fn total_loss_examples() {
        let zero = total_loss(&[(0.0, 0.0)], 0.0, 0.0).unwrap();
        assert_eq!(zero.total, 0.0);

        let lb = total_loss(&[(0.5, 0.1), (0.25, 0.1)], 0.2, 0.01).unwrap();
        assert_relative_eq!(lb.total, 1.16, max_relative = 1e-12);
        assert_relative_eq!(lb.contrast, 0.75);
        assert_relative_eq!(lb.balance, 0.2);

        assert!(matches!(
            total_loss(&[], 0.0, 0.0),
            Err(Error::Argument(_))
        ));

        let mut rng = stream(11, "total", &[]);
        let terms: Vec<(f64, f64)> = (0..5).map(|_| (rng.random(), rng.random())).collect();
        let (c, w) = (rng.random::<f64>(), rng.random::<f64>());
        let lb = total_loss(&terms, c, w).unwrap();
        let manual: f64 = c + w + terms.iter().map(|(a, b)| a + b).sum::<f64>();
        assert_relative_eq!(lb.total, manual, max_relative = 1e-12);
        // the LossBreakdown consistency invariant
        let recomputed = lb.construction
            + lb.weight_decay
            + lb.per_stage.iter().map(|(a, b)| a + b).sum::<f64>();
        assert_relative_eq!(lb.total, recomputed, max_relative = 1e-6);
    }

    proptest! {
        #[test]
        fn contrastive_loss_is_nonnegative(seed in 0u64..10_000) {
            let mut rng = stream(seed, "nonneg", &[]);
            let batch = random_batch(5, 7, 4, 0.15, &mut rng);
            prop_assert!(contrastive_loss(&batch).unwrap() >= 0.0);
        }
    }

    #[test]
    fn loss_is_monotone_in_positive_similarity() {
        // hold anchor and negatives fixed; move the target toward the anchor
        // (target is frozen, so only the positive logit changes)
        let mut rng = stream(12, "monotone2", &[]);
        for _ in 0..200 {
            let mut batch = random_batch(1, 8, 4, 0.2, &mut rng);
            batch.conf_a[0] = 0.8;
            batch.conf_b[0] = 0.9;
            let before = contrastive_loss(&batch).unwrap();
            let anchor: Vec<f64> = batch.emb_a.row(0).iter().copied().collect();
            let t = 0.5;
            let blend: Vec<f64> = batch
                .emb_b
                .row(0)
                .iter()
                .zip(&anchor)
                .map(|(&b, &a)| b + t * a)
                .collect();
            let norm = blend.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let old_sim: f64 = batch.emb_b.row(0).dot(&batch.emb_a.row(0));
            for (j, v) in blend.iter().enumerate() {
                batch.emb_b[[0, j]] = v / norm;
            }
            let new_sim: f64 = batch.emb_b.row(0).dot(&batch.emb_a.row(0));
            let after = contrastive_loss(&batch).unwrap();
            if new_sim > old_sim {
                assert!(
                    after <= before + 1e-12,
                    "similarity rose {old_sim} -> {new_sim} but loss rose {before} -> {after}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn gate_is_antisymmetric_above_threshold(
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
            alpha in 0.0f64..0.99,
        ) {
            let fwd = confidence_indicator(a, b, alpha);
            let back = confidence_indicator(b, a, alpha);
            prop_assert!(!(fwd && back));
        }
    }
}
