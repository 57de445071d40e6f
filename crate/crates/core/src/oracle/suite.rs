//! Randomised property suite over the oracle.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    entropy, exact_mi, kl_divergence, random_joint, random_marginal, uniform_marginal_gap,
    variational_upper_bound, DiscreteJoint,
};
use crate::par::{map_range, Execution};
use crate::rng::SeedStream;

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const RANGE_TOL: f64 = 1e-10;
pub const BOUND_TOL: f64 = 1e-9;
pub const DPI_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Symmetry,
    NonNegativity,
    EntropyCap,
    UpperBound,
    Tightness,
    BoundIdentity,
    DataProcessing,
}

impl Property {
    pub const ALL: [Property; 7] = [
        Property::Symmetry,
        Property::NonNegativity,
        Property::EntropyCap,
        Property::UpperBound,
        Property::Tightness,
        Property::BoundIdentity,
        Property::DataProcessing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::Symmetry => "symmetry",
            Property::NonNegativity => "non_negativity",
            Property::EntropyCap => "entropy_cap",
            Property::UpperBound => "upper_bound",
            Property::Tightness => "tightness",
            Property::BoundIdentity => "bound_identity",
            Property::DataProcessing => "data_processing",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub trial: usize,
    pub property: Property,
    /// How far outside tolerance, in the property's own units.
    pub excess: f64,
    pub joint: DiscreteJoint,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyCount {
    pub property: Property,
    pub passed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub trials: usize,
    pub seed: u64,
    pub max_dim: usize,
    pub counts: Vec<PropertyCount>,
    pub violations: Vec<Violation>,
    /// Largest `ln|V| - H(V)` seen, i.e. how far sampled `p(v)` strays from
    /// uniform. Reported only.
    pub max_uniform_gap: f64,
    pub mean_mi: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PropertySuite {
    pub trials: usize,
    pub seed: u64,
    /// Each side is drawn from `2..=max_dim`.
    pub max_dim: usize,
}

struct TrialOutcome {
    checks: Vec<(Property, f64)>,
    joint: DiscreteJoint,
    q: Vec<f64>,
    uniform_gap: f64,
    mi: f64,
}

/// Checks every property on one joint with one variational marginal.
/// Returns `(property, excess)` where `excess <= 0` means pass.
pub fn check_joint(joint: &DiscreteJoint, q: &super::DiscreteMarginal) -> Vec<(Property, f64)> {
    let mi = exact_mi(joint);
    let mi_t = exact_mi(&joint.transpose());
    let pz = joint.marginal_rows();
    let pv = joint.marginal_cols();
    let cap = entropy(&pz).min(entropy(&pv));
    let mut out = vec![
        (Property::Symmetry, (mi - mi_t).abs() - SYMMETRY_TOL),
        (Property::NonNegativity, -mi - RANGE_TOL),
        (Property::EntropyCap, mi - cap - RANGE_TOL),
    ];
    match (variational_upper_bound(joint, q), kl_divergence(&pv, q)) {
        (Ok(bound), Ok(kl)) => {
            out.push((Property::UpperBound, mi - bound - BOUND_TOL));
            out.push((Property::BoundIdentity, ((bound - mi) - kl).abs() - BOUND_TOL));
        }
        _ => {
            out.push((Property::UpperBound, f64::INFINITY));
            out.push((Property::BoundIdentity, f64::INFINITY));
        }
    }
    let tight = variational_upper_bound(joint, &pv).map_or(f64::INFINITY, |b| (b - mi).abs());
    out.push((Property::Tightness, tight - BOUND_TOL));
    if joint.cols() >= 2 {
        let merged = joint.merge_cols(0, joint.cols() - 1).expect("distinct columns");
        out.push((Property::DataProcessing, exact_mi(&merged) - mi - DPI_TOL));
    } else {
        out.push((Property::DataProcessing, f64::NEG_INFINITY));
    }
    out
}

impl PropertySuite {
    pub fn new(trials: usize, seed: u64, max_dim: usize) -> Self {
        PropertySuite { trials, seed, max_dim: max_dim.max(2) }
    }

    fn trial(&self, i: usize) -> TrialOutcome {
        let mut rng = SeedStream::new(self.seed).split(&format!("oracle/trial/{i}"));
        let rows = rng.random_range(2..=self.max_dim);
        let cols = rng.random_range(2..=self.max_dim);
        let joint = random_joint(&mut rng, rows, cols);
        let q = random_marginal(&mut rng, cols);
        let checks = check_joint(&joint, &q);
        TrialOutcome {
            checks,
            uniform_gap: uniform_marginal_gap(&joint),
            mi: exact_mi(&joint),
            joint,
            q: q.probs().to_vec(),
        }
    }

    pub fn run(&self, mode: Execution) -> SuiteReport {
        let outcomes = map_range(mode, self.trials, |i| self.trial(i));
        summarize(self.trials, self.seed, self.max_dim, outcomes)
    }

    /// Runs the same checks on caller-supplied joints (with `q = uniform`).
    pub fn run_on(joints: &[DiscreteJoint]) -> SuiteReport {
        let outcomes = joints
            .iter()
            .map(|j| {
                let q = super::DiscreteMarginal::uniform(j.cols()).expect("non-empty");
                TrialOutcome {
                    checks: check_joint(j, &q),
                    uniform_gap: uniform_marginal_gap(j),
                    mi: exact_mi(j),
                    joint: j.clone(),
                    q: q.probs().to_vec(),
                }
            })
            .collect();
        let max_dim = joints.iter().map(|j| j.rows().max(j.cols())).max().unwrap_or(0);
        summarize(joints.len(), 0, max_dim, outcomes)
    }
}

fn summarize(trials: usize, seed: u64, max_dim: usize, outcomes: Vec<TrialOutcome>) -> SuiteReport {
    let mut counts: Vec<PropertyCount> =
        Property::ALL.iter().map(|&property| PropertyCount { property, passed: 0, failed: 0 }).collect();
    let mut violations = Vec::new();
    let mut max_uniform_gap = 0.0f64;
    let mut mi_sum = 0.0;
    for (trial, o) in outcomes.into_iter().enumerate() {
        max_uniform_gap = max_uniform_gap.max(o.uniform_gap);
        mi_sum += o.mi;
        for (property, excess) in &o.checks {
            let c = counts.iter_mut().find(|c| c.property == *property).expect("known property");
            if *excess <= 0.0 {
                c.passed += 1;
            } else {
                c.failed += 1;
                violations.push(Violation {
                    trial,
                    property: *property,
                    excess: *excess,
                    joint: o.joint.clone(),
                    q: o.q.clone(),
                });
            }
        }
    }
    SuiteReport {
        trials,
        seed,
        max_dim,
        counts,
        violations,
        max_uniform_gap,
        mean_mi: if trials > 0 { mi_sum / trials as f64 } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::DiscreteMarginal;

    #[test]
    fn small_suite_passes() {
        let r = PropertySuite::new(200, 1, 6).run(Execution::Parallel);
        assert!(r.all_passed(), "{:?}", r.violations.first());
        assert!(r.counts.iter().all(|c| c.passed == 200));
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let s = PropertySuite::new(64, 9, 8);
        let a = serde_json::to_string(&s.run(Execution::Parallel)).unwrap();
        let b = serde_json::to_string(&s.run(Execution::Sequential)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn product_joint_reports_zero_mi() {
        let pz = DiscreteMarginal::new(vec![0.5, 0.5]).unwrap();
        let pv = DiscreteMarginal::new(vec![0.2, 0.8]).unwrap();
        let j = DiscreteJoint::product(&pz, &pv).unwrap();
        let r = PropertySuite::run_on(&[j]);
        assert!(r.all_passed());
        assert!(r.mean_mi < 1e-15);
    }
}
