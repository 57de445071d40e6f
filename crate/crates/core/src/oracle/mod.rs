//! Exact information-theoretic quantities on small discrete distributions.
//!
//! Everything is in nats, float64, with compensated summation. Cells with
//! zero probability contribute nothing (`0 ln 0 = 0`).

pub mod suite;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::compensated_sum;

/// Normalisation tolerance for joints and marginals.
pub const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMarginal {
    probs: Vec<f64>,
}

impl DiscreteMarginal {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty marginal"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("marginal entries must be finite and non-negative"));
        }
        let s = compensated_sum(probs.iter().copied());
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("marginal sums to {s}, not 1")));
        }
        Ok(DiscreteMarginal { probs })
    }

    /// Normalises non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let s = compensated_sum(weights.iter().copied());
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid("weights must have a positive finite sum"));
        }
        Self::new(weights.iter().map(|w| w / s).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Joint table `p(z, v)`, rows indexed by `z`, columns by `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    rows: usize,
    cols: usize,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(rows: usize, cols: usize, table: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || table.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} table"), format!("{} entries", table.len())));
        }
        if table.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("joint entries must be finite and non-negative"));
        }
        let s = compensated_sum(table.iter().copied());
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("joint sums to {s}, not 1")));
        }
        Ok(DiscreteJoint { rows, cols, table })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged joint table"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Normalises a table of non-negative weights.
    pub fn from_weights(rows: usize, cols: usize, weights: &[f64]) -> Result<Self> {
        let s = compensated_sum(weights.iter().copied());
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid("weights must have a positive finite sum"));
        }
        Self::new(rows, cols, weights.iter().map(|w| w / s).collect())
    }

    /// `p(z) p(v)`.
    pub fn product(pz: &DiscreteMarginal, pv: &DiscreteMarginal) -> Result<Self> {
        let table = pz.probs().iter().flat_map(|a| pv.probs().iter().map(move |b| a * b)).collect::<Vec<_>>();
        Self::from_weights(pz.len(), pv.len(), &table)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, z: usize, v: usize) -> f64 {
        self.table[z * self.cols + v]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.table.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|z| compensated_sum((0..self.cols).map(|v| self.get(z, v)))).collect()
    }

    fn col_sums(&self) -> Vec<f64> {
        (0..self.cols).map(|v| compensated_sum((0..self.rows).map(|z| self.get(z, v)))).collect()
    }

    /// `p(z)`.
    pub fn marginal_rows(&self) -> DiscreteMarginal {
        DiscreteMarginal { probs: self.row_sums() }
    }

    /// `p(v)`.
    pub fn marginal_cols(&self) -> DiscreteMarginal {
        DiscreteMarginal { probs: self.col_sums() }
    }

    pub fn transpose(&self) -> DiscreteJoint {
        let table = (0..self.cols).flat_map(|v| (0..self.rows).map(move |z| (v, z))).map(|(v, z)| self.get(z, v)).collect();
        DiscreteJoint { rows: self.cols, cols: self.rows, table }
    }

    /// Merges column `b` into column `a` (a deterministic function of `v`).
    pub fn merge_cols(&self, a: usize, b: usize) -> Result<DiscreteJoint> {
        if a == b || a >= self.cols || b >= self.cols {
            return Err(Error::invalid(format!("cannot merge columns {a} and {b} of {}", self.cols)));
        }
        let keep: Vec<usize> = (0..self.cols).filter(|&v| v != b).collect();
        let mut table = Vec::with_capacity(self.rows * keep.len());
        for z in 0..self.rows {
            for &v in &keep {
                let extra = if v == a { self.get(z, b) } else { 0.0 };
                table.push(self.get(z, v) + extra);
            }
        }
        Ok(DiscreteJoint { rows: self.rows, cols: keep.len(), table })
    }
}

pub fn entropy(p: &DiscreteMarginal) -> f64 {
    let h = -compensated_sum(p.probs().iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()));
    h.max(0.0)
}

/// `sum p(z,v) ln [p(z,v) / (p(z) p(v))]`.
pub fn exact_mi(joint: &DiscreteJoint) -> f64 {
    let pz = joint.row_sums();
    let pv = joint.col_sums();
    let mut terms = Vec::with_capacity(joint.table.len());
    for z in 0..joint.rows {
        for v in 0..joint.cols {
            let p = joint.get(z, v);
            if p > 0.0 {
                terms.push(p * (p.ln() - pz[z].ln() - pv[v].ln()));
            }
        }
    }
    compensated_sum(terms).max(0.0)
}

pub fn kl_divergence(p: &DiscreteMarginal, q: &DiscreteMarginal) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(p.len(), q.len()));
    }
    let mut terms = Vec::with_capacity(p.len());
    for (i, (&pi, &qi)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::invalid(format!("q has no mass at index {i} where p does")));
            }
            terms.push(pi * (pi.ln() - qi.ln()));
        }
    }
    Ok(compensated_sum(terms).max(0.0))
}

/// `E_{p(z,v)}[ln p(v|z) - ln q(v)]`, which equals `I(Z;V) + KL(p(v) || q)`.
pub fn variational_upper_bound(joint: &DiscreteJoint, q: &DiscreteMarginal) -> Result<f64> {
    if q.len() != joint.cols {
        return Err(Error::shape(format!("q over {} values", joint.cols), q.len()));
    }
    let pz = joint.row_sums();
    let mut terms = Vec::with_capacity(joint.table.len());
    for z in 0..joint.rows {
        for v in 0..joint.cols {
            let p = joint.get(z, v);
            if p > 0.0 {
                let qv = q.probs()[v];
                if qv <= 0.0 {
                    return Err(Error::invalid(format!("q(v={v}) = 0 where p(v) > 0; bound undefined")));
                }
                terms.push(p * ((p / pz[z]).ln() - qv.ln()));
            }
        }
    }
    Ok(compensated_sum(terms))
}

/// `KL(p(v) || uniform) = ln |V| - H(V)`: how far the "p(v) is uniform"
/// simplification is from this joint's actual marginal.
pub fn uniform_marginal_gap(joint: &DiscreteJoint) -> f64 {
    let pv = joint.marginal_cols();
    ((joint.cols as f64).ln() - entropy(&pv)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbObjectiveSpec {
    /// Lagrange multiplier.
    pub beta: f64,
    /// Information cap on `I(Z;V)`.
    pub i_c: f64,
}

impl IbObjectiveSpec {
    pub fn new(beta: f64, i_c: f64) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0 && i_c.is_finite() && i_c >= 0.0) {
            return Err(Error::invalid("beta and i_c must be finite and non-negative"));
        }
        Ok(IbObjectiveSpec { beta, i_c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbEvaluation {
    pub objective: f64,
    pub within_cap: bool,
}

/// `I(Z;V) - beta I(Z;Y)` and whether `I(Z;V) <= i_c`.
pub fn ib_objective(i_zv: f64, i_zy: f64, spec: &IbObjectiveSpec) -> IbEvaluation {
    IbEvaluation { objective: i_zv - spec.beta * i_zy, within_cap: i_zv <= spec.i_c }
}

/// Strictly positive entries drawn uniformly, then normalised.
pub fn random_joint<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DiscreteJoint {
    assert!(rows >= 1 && cols >= 1, "joint dimensions must be positive");
    let weights: Vec<f64> = (0..rows * cols).map(|_| 1.0 - rng.random::<f64>()).collect();
    DiscreteJoint::from_weights(rows, cols, &weights).expect("positive weights normalise")
}

pub fn random_marginal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DiscreteMarginal {
    let weights: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
    DiscreteMarginal::from_weights(&weights).expect("positive weights normalise")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use std::f64::consts::LN_2;

    fn m(p: &[f64]) -> DiscreteMarginal {
        DiscreteMarginal::new(p.to_vec()).unwrap()
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&m(&[0.0, 1.0, 0.0])), 0.0);
        assert!((entropy(&m(&[0.5, 0.5])) - LN_2).abs() < 1e-15);
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((entropy(&m(&[0.25, 0.75])) - h).abs() < 1e-15);
        assert!((h - 0.5623).abs() < 5e-5);
    }

    #[test]
    fn mi_cases() {
        let prod = DiscreteJoint::product(&m(&[0.3, 0.7]), &m(&[0.1, 0.6, 0.3])).unwrap();
        assert!(exact_mi(&prod) < 1e-15);
        let diag = DiscreteJoint::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!((exact_mi(&diag) - LN_2).abs() < 1e-15);
        let one = random_joint(&mut seeded_rng(1), 1, 1);
        assert_eq!(one.table(), &[1.0]);
        assert_eq!(exact_mi(&one), 0.0);
    }

    /// Brute-force `H(Z) + H(V) - H(Z,V)` with each term accumulated as a
    /// double-double (two-sum) in its own loop.
    fn mi_via_entropies(j: &DiscreteJoint) -> f64 {
        fn dd_sum(xs: impl Iterator<Item = f64>) -> f64 {
            let (mut hi, mut lo) = (0.0f64, 0.0f64);
            for x in xs {
                let s = hi + x;
                let bb = s - hi;
                let err = (hi - (s - bb)) + (x - bb);
                hi = s;
                lo += err;
            }
            hi + lo
        }
        let (r, c) = (j.rows(), j.cols());
        let pz: Vec<f64> = (0..r).map(|z| dd_sum((0..c).map(|v| j.get(z, v)))).collect();
        let pv: Vec<f64> = (0..c).map(|v| dd_sum((0..r).map(|z| j.get(z, v)))).collect();
        let h = |xs: &[f64]| -dd_sum(xs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()));
        h(&pz) + h(&pv) - h(j.table())
    }

    #[test]
    fn mi_matches_entropy_decomposition() {
        let mut rng = seeded_rng(99);
        for _ in 0..200 {
            let j = random_joint(&mut rng, 3, 3);
            assert!((exact_mi(&j) - mi_via_entropies(&j)).abs() < 1e-12);
        }
    }

    #[test]
    fn bound_cases() {
        let mut rng = seeded_rng(5);
        let j = random_joint(&mut rng, 4, 3);
        let pv = j.marginal_cols();
        let tight = variational_upper_bound(&j, &pv).unwrap();
        assert!((tight - exact_mi(&j)).abs() <= 1e-9);
        for _ in 0..50 {
            let q = random_marginal(&mut rng, 3);
            let b = variational_upper_bound(&j, &q).unwrap();
            assert!(b >= exact_mi(&j) - 1e-9);
            let gap = b - exact_mi(&j) - kl_divergence(&pv, &q).unwrap();
            assert!(gap.abs() <= 1e-9);
        }
        let diag = DiscreteJoint::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let b = variational_upper_bound(&diag, &m(&[0.5, 0.5])).unwrap();
        assert!((b - LN_2).abs() < 1e-15);
        assert!(variational_upper_bound(&diag, &m(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn kl_cases() {
        let p = m(&[0.2, 0.8]);
        let q = m(&[0.6, 0.4]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&m(&[1.0, 0.0]), &m(&[0.5, 0.5])).unwrap() - LN_2).abs() < 1e-15);
        let pq = kl_divergence(&p, &q).unwrap();
        let qp = kl_divergence(&q, &p).unwrap();
        // 0.2 ln(1/3) + 0.8 ln 2 vs 0.6 ln 3 + 0.4 ln 0.5
        assert!((pq - (0.2 * (1.0f64 / 3.0).ln() + 0.8 * 2f64.ln())).abs() < 1e-15);
        assert!((qp - (0.6 * 3f64.ln() + 0.4 * 0.5f64.ln())).abs() < 1e-15);
        assert!((pq - qp).abs() > 0.04);
        assert!(kl_divergence(&p, &m(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn ib_cases() {
        let s = IbObjectiveSpec::new(1.0, 1.0).unwrap();
        assert_eq!(ib_objective(LN_2, LN_2, &s).objective, 0.0);
        let s0 = IbObjectiveSpec::new(0.0, 1.0).unwrap();
        assert_eq!(ib_objective(0.4, 0.9, &s0).objective, 0.4);
        let capped = IbObjectiveSpec::new(1.0, 0.5).unwrap();
        assert!(!ib_objective(0.7, 0.1, &capped).within_cap);
        assert!(ib_objective(0.5, 0.1, &capped).within_cap);
        assert!(IbObjectiveSpec::new(-1.0, 0.5).is_err());
    }

    #[test]
    fn random_joint_valid_and_deterministic() {
        let a = random_joint(&mut seeded_rng(4), 5, 2);
        let b = random_joint(&mut seeded_rng(4), 5, 2);
        assert_eq!(a, b);
        DiscreteJoint::new(5, 2, a.table().to_vec()).unwrap();
    }

    #[test]
    fn uniform_gap() {
        let u = DiscreteJoint::from_rows(&[vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap();
        assert!(uniform_marginal_gap(&u) < 1e-15);
        let skew = DiscreteJoint::from_rows(&[vec![0.7, 0.1], vec![0.1, 0.1]]).unwrap();
        assert!(uniform_marginal_gap(&skew) > 0.0);
    }

    #[test]
    fn validation() {
        assert!(DiscreteJoint::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(DiscreteJoint::new(2, 2, vec![1.5, -0.5, 0.0, 0.0]).is_err());
        assert!(DiscreteMarginal::new(vec![0.3, 0.3]).is_err());
    }
}
