//! Training objectives.
//!
//! The two task losses are token-level cross-entropies. The auxiliary MI term
//! turns each task's logits into a single vocabulary distribution (row
//! softmax, then a columnwise max or mean over positions, then
//! renormalisation) and takes the cross-entropy between the two:
//! `-sum_k fV_k ln fZ_k` with `fV` from the predict branch (target) and `fZ`
//! from the explain branch (input). Every loss here comes with an analytic
//! gradient w.r.t. the logits.

use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, MiVariant, StopTarget};
use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, Matrix};
use crate::types::{TaskKind, TokenId};

/// Floor applied inside `ln` on the input side of CE/KL.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Max,
    Mean,
}

/// Mean over non-PAD gold positions of `-ln softmax(row)[gold]`. Row `t`
/// scores `tgt[t + 1]`.
pub fn sequence_cross_entropy(logits: &Matrix, tgt: &[TokenId], pad_id: TokenId) -> Result<f64> {
    sequence_cross_entropy_grad(logits, tgt, pad_id).map(|(l, _)| l)
}

/// Loss and its gradient w.r.t. `logits`.
pub fn sequence_cross_entropy_grad(
    logits: &Matrix,
    tgt: &[TokenId],
    pad_id: TokenId,
) -> Result<(f64, Matrix)> {
    if tgt.len() != logits.rows() + 1 {
        return Err(Error::shape(format!("{} target tokens", logits.rows() + 1), tgt.len()));
    }
    let d = logits.cols();
    let scored: Vec<usize> = (0..logits.rows()).filter(|&t| tgt[t + 1] != pad_id).collect();
    if scored.is_empty() {
        return Err(Error::invalid("target has no non-PAD positions"));
    }
    let probs = softmax_rows(logits);
    let inv = 1.0 / scored.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), d);
    let mut terms = Vec::with_capacity(scored.len());
    for &t in &scored {
        let gold = tgt[t + 1] as usize;
        if gold >= d {
            return Err(Error::invalid(format!("gold token {gold} outside vocabulary of {d}")));
        }
        terms.push(-log_softmax_at(logits.row(t), gold));
        let g = grad.row_mut(t);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = probs.get(t, k) * inv;
        }
        g[gold] -= inv;
    }
    Ok((compensated_sum(terms) * inv, grad))
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row[k] - lse
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    out
}

/// Pulls `d_probs` back through a row softmax whose output is `probs`.
pub fn softmax_backward(probs: &Matrix, d_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let dp = d_probs.row(i);
        let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (o, (pi, dpi)) in out.row_mut(i).iter_mut().zip(p.iter().zip(dp)) {
            *o = pi * (dpi - inner);
        }
    }
    out
}

/// Output of the MI loss module's softmax + reduction for one task branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedTaskDistribution {
    pub probs: Vec<f64>,
    pub source_task: TaskKind,
}

#[derive(Debug, Clone)]
struct ReduceTrace {
    /// Winning row per column (max only).
    argmax: Vec<usize>,
    /// Sum of the raw reduced vector before renormalisation.
    total: f64,
}

fn reduce_traced(rows: &Matrix, reduction: Reduction) -> Result<(Vec<f64>, ReduceTrace)> {
    let (k, d) = rows.shape();
    if k == 0 {
        return Err(Error::invalid("cannot reduce zero rows"));
    }
    let mut raw = vec![0.0; d];
    let mut argmax = Vec::new();
    match reduction {
        Reduction::Max => {
            argmax = vec![0; d];
            raw.copy_from_slice(rows.row(0));
            for i in 1..k {
                for (j, &x) in rows.row(i).iter().enumerate() {
                    if x > raw[j] {
                        raw[j] = x;
                        argmax[j] = i;
                    }
                }
            }
        }
        Reduction::Mean => {
            for j in 0..d {
                raw[j] = compensated_sum((0..k).map(|i| rows.get(i, j))) / k as f64;
            }
        }
    }
    let total = compensated_sum(raw.iter().copied());
    raw.iter_mut().for_each(|x| *x /= total);
    Ok((raw, ReduceTrace { argmax, total }))
}

/// Columnwise max or mean of row-stochastic `rows`, renormalised to sum 1.
pub fn reduce(rows: &Matrix, reduction: Reduction, source_task: TaskKind) -> Result<ReducedTaskDistribution> {
    let (probs, _) = reduce_traced(rows, reduction)?;
    Ok(ReducedTaskDistribution { probs, source_task })
}

fn reduce_backward(
    rows: &Matrix,
    reduction: Reduction,
    reduced: &[f64],
    trace: &ReduceTrace,
    d_reduced: &[f64],
) -> Matrix {
    let (k, d) = rows.shape();
    let inner: f64 = reduced.iter().zip(d_reduced).map(|(f, g)| f * g).sum();
    let d_raw: Vec<f64> = d_reduced.iter().map(|g| (g - inner) / trace.total).collect();
    let mut out = Matrix::zeros(k, d);
    match reduction {
        Reduction::Max => {
            for j in 0..d {
                out.set(trace.argmax[j], j, d_raw[j]);
            }
        }
        Reduction::Mean => {
            let inv = 1.0 / k as f64;
            for i in 0..k {
                for j in 0..d {
                    out.set(i, j, d_raw[j] * inv);
                }
            }
        }
    }
    out
}

/// Softmax then reduce, keeping what the backward pass needs.
struct Branch {
    probs: Matrix,
    reduced: Vec<f64>,
    trace: ReduceTrace,
}

impl Branch {
    fn new(logits: &Matrix, reduction: Reduction) -> Result<Self> {
        if logits.rows() == 0 {
            return Err(Error::invalid("MI loss needs at least one logit row per task"));
        }
        let probs = softmax_rows(logits);
        let (reduced, trace) = reduce_traced(&probs, reduction)?;
        Ok(Branch { probs, reduced, trace })
    }

    fn backward(&self, reduction: Reduction, d_reduced: &[f64]) -> Matrix {
        let d_probs = reduce_backward(&self.probs, reduction, &self.reduced, &self.trace, d_reduced);
        softmax_backward(&self.probs, &d_probs)
    }
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -compensated_sum(p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()))
}

/// `-sum p_k ln max(q_k, LOG_FLOOR)` and the number of floored entries that
/// carried target mass.
pub fn cross_entropy(target: &[f64], input: &[f64]) -> (f64, usize) {
    let mut floored = 0;
    let terms = target.iter().zip(input).map(|(&p, &q)| {
        if q < LOG_FLOOR && p > 0.0 {
            floored += 1;
        }
        if p == 0.0 {
            0.0
        } else {
            -p * q.max(LOG_FLOOR).ln()
        }
    });
    let v = compensated_sum(terms.collect::<Vec<_>>());
    (v, floored)
}

/// `sum p_k (ln p_k - ln max(q_k, LOG_FLOOR))`, zero-mass terms skipped.
pub fn kl(target: &[f64], input: &[f64]) -> (f64, usize) {
    let mut floored = 0;
    let terms: Vec<f64> = target
        .iter()
        .zip(input)
        .map(|(&p, &q)| {
            if q < LOG_FLOOR && p > 0.0 {
                floored += 1;
            }
            if p == 0.0 {
                0.0
            } else {
                p * (p.ln() - q.max(LOG_FLOOR).ln())
            }
        })
        .collect();
    (compensated_sum(terms), floored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    CrossEntropy,
    Kl,
}

/// Auxiliary loss value and gradients w.r.t. both logit matrices.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub loss: f64,
    /// Input-side entries that hit [`LOG_FLOOR`].
    pub floored: usize,
    pub d_predict: Matrix,
    pub d_explain: Matrix,
}

fn check_pair(predict: &Matrix, explain: &Matrix) -> Result<()> {
    if predict.cols() != explain.cols() {
        return Err(Error::shape(
            format!("{} vocabulary columns", predict.cols()),
            format!("{} columns", explain.cols()),
        ));
    }
    Ok(())
}

fn pair_value(predict: &Matrix, explain: &Matrix, reduction: Reduction, div: Divergence) -> Result<f64> {
    check_pair(predict, explain)?;
    let fv = Branch::new(predict, reduction)?;
    let fz = Branch::new(explain, reduction)?;
    Ok(match div {
        Divergence::CrossEntropy => cross_entropy(&fv.reduced, &fz.reduced).0,
        Divergence::Kl => kl(&fv.reduced, &fz.reduced).0,
    })
}

/// Reduced-distribution divergence between the predict branch (target) and
/// the explain branch (input), with gradients through both unless `stop`
/// detaches one side.
pub fn pair_divergence_grad(
    predict: &Matrix,
    explain: &Matrix,
    reduction: Reduction,
    div: Divergence,
    stop: StopTarget,
) -> Result<PairGrad> {
    check_pair(predict, explain)?;
    let fv = Branch::new(predict, reduction)?;
    let fz = Branch::new(explain, reduction)?;
    let (loss, floored) = match div {
        Divergence::CrossEntropy => cross_entropy(&fv.reduced, &fz.reduced),
        Divergence::Kl => kl(&fv.reduced, &fz.reduced),
    };
    let log_q: Vec<f64> = fz.reduced.iter().map(|&q| q.max(LOG_FLOOR).ln()).collect();

    let d_fv: Vec<f64> = match div {
        Divergence::CrossEntropy => log_q.iter().map(|l| -l).collect(),
        Divergence::Kl => fv
            .reduced
            .iter()
            .zip(&log_q)
            .map(|(&p, &lq)| if p > 0.0 { p.ln() + 1.0 - lq } else { 0.0 })
            .collect(),
    };
    // Both divergences share d/dq = -p/q (zero where the floor is active).
    let d_fz: Vec<f64> = fv
        .reduced
        .iter()
        .zip(&fz.reduced)
        .map(|(&p, &q)| if q >= LOG_FLOOR { -p / q } else { 0.0 })
        .collect();

    let d_predict = match stop {
        StopTarget::Predict => Matrix::zeros(predict.rows(), predict.cols()),
        _ => fv.backward(reduction, &d_fv),
    };
    let d_explain = match stop {
        StopTarget::Explain => Matrix::zeros(explain.rows(), explain.cols()),
        _ => fz.backward(reduction, &d_fz),
    };
    Ok(PairGrad { loss, floored, d_predict, d_explain })
}

/// `CE(f(V), f(Z))` where `f` is softmax + `reduction` + renormalisation.
pub fn mi_loss(predict_logits: &Matrix, explain_logits: &Matrix, reduction: Reduction) -> Result<f64> {
    pair_value(predict_logits, explain_logits, reduction, Divergence::CrossEntropy)
}

pub fn mi_loss_grad(
    predict_logits: &Matrix,
    explain_logits: &Matrix,
    reduction: Reduction,
    stop: StopTarget,
) -> Result<PairGrad> {
    pair_divergence_grad(predict_logits, explain_logits, reduction, Divergence::CrossEntropy, stop)
}

/// `KL(f(V) || f(Z))` over the same pipeline as [`mi_loss`].
pub fn kl_variant_loss(predict_logits: &Matrix, explain_logits: &Matrix, reduction: Reduction) -> Result<f64> {
    pair_value(predict_logits, explain_logits, reduction, Divergence::Kl)
}

pub fn kl_variant_loss_grad(
    predict_logits: &Matrix,
    explain_logits: &Matrix,
    reduction: Reduction,
    stop: StopTarget,
) -> Result<PairGrad> {
    pair_divergence_grad(predict_logits, explain_logits, reduction, Divergence::Kl, stop)
}

/// Reduction and divergence used by each auxiliary-loss setting. The KL
/// ablation keeps the default max reduction.
pub fn auxiliary_for(variant: MiVariant) -> Option<(Reduction, Divergence)> {
    match variant {
        MiVariant::Max => Some((Reduction::Max, Divergence::CrossEntropy)),
        MiVariant::Mean => Some((Reduction::Mean, Divergence::CrossEntropy)),
        MiVariant::Kl => Some((Reduction::Max, Divergence::Kl)),
        MiVariant::None => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prediction_loss: f64,
    pub generation_loss: f64,
    pub mi_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Whether `total` equals the weighted sum as [`combined_loss`] forms it.
    pub fn is_consistent(&self, weights: &LossWeights) -> bool {
        let expect = weights.alpha1 * self.prediction_loss
            + weights.alpha2 * self.generation_loss
            + weights.alpha3 * self.mi_loss;
        expect.to_bits() == self.total.to_bits()
    }
}

/// `alpha1 * prediction + alpha2 * generation + alpha3 * mi`. With
/// `variant = none` the MI term and the recorded MI loss are exactly zero.
pub fn combined_loss(
    prediction: f64,
    generation: f64,
    mi: f64,
    weights: &LossWeights,
    variant: MiVariant,
) -> LossBreakdown {
    let mi_loss = if variant == MiVariant::None { 0.0 } else { mi };
    let w = weights.effective(variant);
    LossBreakdown {
        prediction_loss: prediction,
        generation_loss: generation,
        mi_loss,
        total: w.alpha1 * prediction + w.alpha2 * generation + w.alpha3 * mi_loss,
    }
}

/// Per-example objective on the two branches' logits: both task
/// cross-entropies, the auxiliary term and their weighted total, with the
/// total's gradient w.r.t. each logit matrix.
#[derive(Debug, Clone)]
pub struct ExampleObjective {
    pub breakdown: LossBreakdown,
    pub floored: usize,
    pub d_predict: Matrix,
    pub d_explain: Matrix,
}

#[allow(clippy::too_many_arguments)]
pub fn example_objective(
    predict_logits: &Matrix,
    predict_tgt: &[TokenId],
    explain_logits: &Matrix,
    explain_tgt: &[TokenId],
    pad_id: TokenId,
    weights: &LossWeights,
    variant: MiVariant,
    stop: StopTarget,
) -> Result<ExampleObjective> {
    let w = weights.effective(variant);
    let (lp, gp) = sequence_cross_entropy_grad(predict_logits, predict_tgt, pad_id)?;
    let (lg, gg) = sequence_cross_entropy_grad(explain_logits, explain_tgt, pad_id)?;
    let mut d_predict = gp.scale(w.alpha1);
    let mut d_explain = gg.scale(w.alpha2);
    let mut mi = 0.0;
    let mut floored = 0;
    if let Some((reduction, div)) = auxiliary_for(variant) {
        let aux = pair_divergence_grad(predict_logits, explain_logits, reduction, div, stop)?;
        d_predict.add_scaled(w.alpha3, &aux.d_predict);
        d_explain.add_scaled(w.alpha3, &aux.d_explain);
        mi = aux.loss;
        floored = aux.floored;
    }
    Ok(ExampleObjective {
        breakdown: combined_loss(lp, lg, mi, weights, variant),
        floored,
        d_predict,
        d_explain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error, STEP};
    use crate::rng::seeded_rng;
    use crate::types::{BOS, EOS, PAD};
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
            .unwrap()
    }

    /// Logits whose row softmax equals the given probabilities.
    fn logits_for(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<_>>())
            .unwrap()
    }

    #[test]
    fn ce_peaked_near_zero() {
        let mut l = Matrix::zeros(2, 4);
        l.set(0, 3, 50.0);
        l.set(1, 2, 50.0);
        let v = sequence_cross_entropy(&l, &[BOS, 3, EOS], PAD).unwrap();
        assert!(v < 1e-12, "{v}");
    }

    #[test]
    fn ce_uniform_is_ln_d() {
        let l = Matrix::zeros(3, 7);
        let v = sequence_cross_entropy(&l, &[BOS, 4, 5, EOS], PAD).unwrap();
        assert!(close(v, 7f64.ln(), 1e-14));
    }

    #[test]
    fn ce_hand_case() {
        let l = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let v = sequence_cross_entropy(&l, &[1, 0], 9).unwrap();
        // -ln(e / (e + 1))
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!(close(v, expected, 1e-15));
        assert!(close(v, 0.3133, 5e-5));
    }

    #[test]
    fn ce_masks_pad_and_rejects_all_pad() {
        let l = Matrix::zeros(2, 5);
        let v = sequence_cross_entropy(&l, &[BOS, 4, PAD], PAD).unwrap();
        assert!(close(v, 5f64.ln(), 1e-14));
        assert!(sequence_cross_entropy(&l, &[BOS, PAD, PAD], PAD).is_err());
        assert!(sequence_cross_entropy(&l, &[BOS, 4], PAD).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Matrix::from_rows(&[vec![2.0; 4]]).unwrap());
        assert!(s.row(0).iter().all(|&p| close(p, 0.25, 1e-15)));
        let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        assert!(close(s.get(0, 0), 0.25, 1e-15) && close(s.get(0, 1), 0.75, 1e-15));
        let a = Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let b = a.map(|x| x + 123.0);
        for (x, y) in softmax_rows(&a).as_slice().iter().zip(softmax_rows(&b).as_slice()) {
            assert!(close(*x, *y, 1e-15));
        }
    }

    #[test]
    fn reduce_cases() {
        let one = Matrix::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
        for r in [Reduction::Max, Reduction::Mean] {
            let f = reduce(&one, r, TaskKind::Predict).unwrap();
            for (a, b) in f.probs.iter().zip(one.row(0)) {
                assert!(close(*a, *b, 1e-15));
            }
        }
        let rows = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let f = reduce(&rows, Reduction::Max, TaskKind::Explain).unwrap();
        assert!(close(f.probs[0], 9.0 / 17.0, 1e-15) && close(f.probs[1], 8.0 / 17.0, 1e-15));
        assert_eq!(f.source_task, TaskKind::Explain);
        let f = reduce(&rows, Reduction::Mean, TaskKind::Explain).unwrap();
        assert!(close(f.probs[0], 0.55, 1e-15) && close(f.probs[1], 0.45, 1e-15));
        assert!(reduce(&Matrix::zeros(0, 3), Reduction::Max, TaskKind::Predict).is_err());
    }

    #[test]
    fn mi_loss_cases() {
        // one-hot on both sides
        let mut peaked = Matrix::zeros(1, 3);
        peaked.set(0, 1, 800.0);
        assert!(mi_loss(&peaked, &peaked, Reduction::Max).unwrap().abs() < 1e-12);

        let p = vec![0.2, 0.5, 0.3];
        let lp = logits_for(std::slice::from_ref(&p));
        assert!(close(mi_loss(&lp, &lp, Reduction::Mean).unwrap(), entropy(&p), 1e-12));

        let fv = logits_for(&[vec![0.5, 0.5]]);
        let fz = logits_for(&[vec![0.25, 0.75]]);
        let expected = -0.5 * 0.25f64.ln() - 0.5 * 0.75f64.ln();
        assert!(close(mi_loss(&fv, &fz, Reduction::Max).unwrap(), expected, 1e-12));
        assert!(close(expected, 0.8370, 5e-5));

        let kl_expected = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!(close(kl_variant_loss(&fv, &fz, Reduction::Max).unwrap(), kl_expected, 1e-12));
        assert!(close(kl_expected, 0.1438, 5e-5));
        assert!(kl_variant_loss(&fz, &fz, Reduction::Max).unwrap().abs() < 1e-15);

        assert!(mi_loss(&Matrix::zeros(0, 2), &fz, Reduction::Max).is_err());
        assert!(mi_loss(&Matrix::zeros(1, 3), &fz, Reduction::Max).is_err());
    }

    #[test]
    fn mi_loss_floor_is_recorded() {
        let mut expl = Matrix::zeros(1, 2);
        expl.set(0, 0, 100.0); // q_1 = e^-100 < floor
        let pred = Matrix::zeros(1, 2);
        let g = mi_loss_grad(&pred, &expl, Reduction::Max, StopTarget::None).unwrap();
        assert_eq!(g.floored, 1);
        assert!(g.loss.is_finite());
        assert!(g.d_explain.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn combined_cases() {
        let w = LossWeights { alpha1: 0.5, alpha2: 0.5, alpha3: 0.1 };
        let b = combined_loss(1.0, 2.0, 3.0, &w, MiVariant::Max);
        assert!(close(b.total, 1.8, 1e-15));
        assert!(b.is_consistent(&w));
        let w0 = LossWeights { alpha3: 0.0, ..w };
        let b0 = combined_loss(1.0, 2.0, 3.0, &w0, MiVariant::Max);
        assert!(close(b0.total, 0.5 * 1.0 + 0.5 * 2.0, 1e-12));
        let none = combined_loss(1.0, 2.0, 3.0, &w, MiVariant::None);
        assert_eq!(none.mi_loss, 0.0);
        assert_eq!(none.total, b0.total);
        let zero = combined_loss(1.0, 2.0, 3.0, &LossWeights { alpha1: 0.0, alpha2: 0.0, alpha3: 0.0 }, MiVariant::Max);
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn ce_strictly_minimized_at_target() {
        let mut rng = seeded_rng(21);
        for _ in 0..50 {
            let d = rng.random_range(2..10);
            let raw: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let at_p = cross_entropy(&p, &p).0;
            for _ in 0..20 {
                let raw: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let q: Vec<f64> = raw.iter().map(|x| x / s).collect();
                assert!(cross_entropy(&p, &q).0 > at_p);
            }
        }
    }

    fn check_pair_grad(div: Divergence, reduction: Reduction, seed: u64) -> f64 {
        let mut rng = seeded_rng(seed);
        let m = rng.random_range(1..=5);
        let n = rng.random_range(1..=5);
        let d = rng.random_range(2..=11);
        let pred = random_matrix(&mut rng, m, d, 2.0);
        let expl = random_matrix(&mut rng, n, d, 2.0);
        let g = pair_divergence_grad(&pred, &expl, reduction, div, StopTarget::None).unwrap();
        let np = central_difference(
            |x| pair_value(&Matrix::from_vec(m, d, x.to_vec()).unwrap(), &expl, reduction, div).unwrap(),
            pred.as_slice(),
            STEP,
        );
        let ne = central_difference(
            |x| pair_value(&pred, &Matrix::from_vec(n, d, x.to_vec()).unwrap(), reduction, div).unwrap(),
            expl.as_slice(),
            STEP,
        );
        max_relative_error(g.d_predict.as_slice(), &np)
            .0
            .max(max_relative_error(g.d_explain.as_slice(), &ne).0)
    }

    #[test]
    fn pair_gradients_match_finite_differences() {
        for seed in 0..20 {
            for (div, red) in [
                (Divergence::CrossEntropy, Reduction::Max),
                (Divergence::CrossEntropy, Reduction::Mean),
                (Divergence::Kl, Reduction::Max),
                (Divergence::Kl, Reduction::Mean),
            ] {
                let err = check_pair_grad(div, red, seed);
                assert!(err <= 1e-4, "{div:?}/{red:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn stop_target_detaches_one_side() {
        let mut rng = seeded_rng(3);
        let pred = random_matrix(&mut rng, 3, 5, 1.0);
        let expl = random_matrix(&mut rng, 4, 5, 1.0);
        let full = mi_loss_grad(&pred, &expl, Reduction::Max, StopTarget::None).unwrap();
        let sp = mi_loss_grad(&pred, &expl, Reduction::Max, StopTarget::Predict).unwrap();
        let se = mi_loss_grad(&pred, &expl, Reduction::Max, StopTarget::Explain).unwrap();
        assert!(sp.d_predict.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(sp.d_explain, full.d_explain);
        assert!(se.d_explain.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(se.d_predict, full.d_predict);
    }

    #[test]
    fn example_objective_gradient() {
        let mut rng = seeded_rng(8);
        let w = LossWeights { alpha1: 0.5, alpha2: 0.5, alpha3: 0.1 };
        for variant in MiVariant::ALL.iter().copied() {
            let d = 9;
            let pred = random_matrix(&mut rng, 3, d, 1.5);
            let expl = random_matrix(&mut rng, 5, d, 1.5);
            let pt = [BOS, 5, 6, EOS];
            let et = [BOS, 4, 7, 8, 4, EOS];
            let obj = example_objective(&pred, &pt, &expl, &et, PAD, &w, variant, StopTarget::None).unwrap();
            assert!(obj.breakdown.is_consistent(&w.effective(variant)));
            let total = |p: &Matrix, e: &Matrix| {
                example_objective(p, &pt, e, &et, PAD, &w, variant, StopTarget::None).unwrap().breakdown.total
            };
            let np = central_difference(|x| total(&Matrix::from_vec(3, d, x.to_vec()).unwrap(), &expl), pred.as_slice(), STEP);
            let ne = central_difference(|x| total(&pred, &Matrix::from_vec(5, d, x.to_vec()).unwrap()), expl.as_slice(), STEP);
            assert!(max_relative_error(obj.d_predict.as_slice(), &np).0 <= 1e-4, "{variant}");
            assert!(max_relative_error(obj.d_explain.as_slice(), &ne).0 <= 1e-4, "{variant}");
        }
    }

    fn row_stochastic(k: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = seeded_rng(seed);
        let mut m = random_matrix(&mut rng, k, d, 4.0);
        m = softmax_rows(&m);
        m
    }

    proptest! {
        #[test]
        fn reduce_outputs_distribution(k in 1usize..=16, d in 2usize..=64, seed in any::<u64>(), max in any::<bool>()) {
            let rows = row_stochastic(k, d, seed);
            let r = if max { Reduction::Max } else { Reduction::Mean };
            let f = reduce(&rows, r, TaskKind::Predict).unwrap();
            prop_assert!(f.probs.iter().all(|&p| p >= 0.0));
            prop_assert!((f.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn gibbs_identity(m in 1usize..=5, n in 1usize..=5, d in 2usize..=11, seed in any::<u64>(), max in any::<bool>()) {
            let mut rng = seeded_rng(seed);
            let pred = random_matrix(&mut rng, m, d, 3.0);
            let expl = random_matrix(&mut rng, n, d, 3.0);
            let r = if max { Reduction::Max } else { Reduction::Mean };
            let ce = mi_loss(&pred, &expl, r).unwrap();
            let kl = kl_variant_loss(&pred, &expl, r).unwrap();
            let fv = reduce(&softmax_rows(&pred), r, TaskKind::Predict).unwrap();
            let h = entropy(&fv.probs);
            prop_assert!((ce - kl - h).abs() <= 1e-9);
            prop_assert!(ce >= h - 1e-9);
        }

        #[test]
        fn mi_loss_column_permutation_invariant(m in 1usize..=5, n in 1usize..=5, d in 2usize..=11, seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let pred = random_matrix(&mut rng, m, d, 3.0);
            let expl = random_matrix(&mut rng, n, d, 3.0);
            let mut perm: Vec<usize> = (0..d).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            for r in [Reduction::Max, Reduction::Mean] {
                let a = mi_loss(&pred, &expl, r).unwrap();
                let b = mi_loss(&pred.permute_cols(&perm), &expl.permute_cols(&perm), r).unwrap();
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn equal_branches_sit_at_entropy(k in 1usize..=5, d in 2usize..=11, seed in any::<u64>(), scale in 0.1f64..5.0) {
            let mut rng = seeded_rng(seed);
            let logits = random_matrix(&mut rng, k, d, 2.0).scale(scale);
            let fv = reduce(&softmax_rows(&logits), Reduction::Max, TaskKind::Predict).unwrap();
            let v = mi_loss(&logits, &logits, Reduction::Max).unwrap();
            prop_assert!((v - entropy(&fv.probs)).abs() <= 1e-12);
        }
    }
}
