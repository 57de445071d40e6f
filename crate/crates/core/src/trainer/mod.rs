//! Multi-task training loop.
//!
//! Each step draws one batch of predict/explain pairs, runs both branches of
//! every pair through the shared student, forms the per-example three-term
//! objective (the auxiliary term always pairs the two branches of the same
//! example), averages over the batch and takes one clipped Adam step.

pub mod checkpoint;

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{batch_encoded, build_vocab, Batch, InstancePair};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, example_objective, LossBreakdown};
use crate::model::{init_params, ModelDims, ModelParams};
use crate::par::{map_ordered, Execution};
use crate::rng::{SeedStream, Stream};
use crate::types::{Example, Vocabulary, PAD};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState { first_moment: vec![0.0; len], second_moment: vec![0.0; len], step: 0 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            let m = ADAM_BETA1 * self.first_moment[i] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Rescales `grad` to global L2 norm `max_norm` if it is larger. Returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// Batch-mean loss breakdown and the gradient of its total w.r.t. the flat
/// parameter vector.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub breakdown: LossBreakdown,
    pub grad: Vec<f64>,
    pub floored: usize,
}

struct PairOutcome {
    breakdown: LossBreakdown,
    grad: Vec<f64>,
    floored: usize,
}

fn pair_outcome(params: &ModelParams, pair: &InstancePair, config: &RunConfig) -> Result<PairOutcome> {
    let p = &pair.predict;
    let e = &pair.explain;
    let pl = params.forward(&p.src, &p.tgt)?;
    let el = params.forward(&e.src, &e.tgt)?;
    let obj = example_objective(
        &pl,
        &p.tgt,
        &el,
        &e.tgt,
        PAD,
        &config.weights,
        config.mi_variant,
        config.mi_stop_target,
    )?;
    let mut grad = vec![0.0; params.len()];
    params.backward_into(&p.src, &p.tgt, &obj.d_predict, &mut grad)?;
    params.backward_into(&e.src, &e.tgt, &obj.d_explain, &mut grad)?;
    Ok(PairOutcome { breakdown: obj.breakdown, grad, floored: obj.floored })
}

/// Evaluates the batch objective. Per-pair work runs under `mode`; the
/// reduction is sequential in pair order, so the result does not depend on
/// the execution mode.
pub fn batch_gradient(
    params: &ModelParams,
    pairs: &[InstancePair],
    config: &RunConfig,
    mode: Execution,
) -> Result<BatchGradient> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let outcomes = map_ordered(mode, pairs, |pair| pair_outcome(params, pair, config));
    let n = pairs.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let (mut lp, mut lg, mut lmi) = (0.0, 0.0, 0.0);
    let mut floored = 0;
    for o in outcomes {
        let o = o?;
        lp += o.breakdown.prediction_loss;
        lg += o.breakdown.generation_loss;
        lmi += o.breakdown.mi_loss;
        floored += o.floored;
        for (g, x) in grad.iter_mut().zip(&o.grad) {
            *g += x;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    let breakdown = combined_loss(lp / n, lg / n, lmi / n, &config.weights, config.mi_variant);
    Ok(BatchGradient { breakdown, grad, floored })
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub config: RunConfig,
    pub config_hash: String,
    /// One entry per step.
    pub trajectory: Vec<LossBreakdown>,
    /// Total input-side log-floor hits of the auxiliary loss.
    pub floored: usize,
    pub wall_clock_secs: f64,
}

pub struct Trainer {
    config: RunConfig,
    vocab: Vocabulary,
    pairs: Vec<InstancePair>,
    params: ModelParams,
    optimizer: OptimizerState,
    data_rng: Stream,
    pending: VecDeque<Batch>,
    step: usize,
    floored: usize,
    execution: Execution,
}

impl Trainer {
    /// Builds the vocabulary from `examples` and initialises parameters.
    pub fn new(config: RunConfig, examples: &[Example]) -> Result<Self> {
        let vocab = build_vocab(examples, config.vocab_size)?;
        Self::with_vocab(config, vocab, examples)
    }

    pub fn with_vocab(config: RunConfig, vocab: Vocabulary, examples: &[Example]) -> Result<Self> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let seeds = SeedStream::new(config.seed);
        let dims = ModelDims::new(vocab.len(), &config);
        let params = init_params(dims, &mut seeds.split("init"));
        let pairs = examples.iter().map(|ex| InstancePair::encode(ex, &vocab, &config)).collect();
        Ok(Trainer {
            optimizer: OptimizerState::new(params.len()),
            params,
            pairs,
            vocab,
            data_rng: seeds.split("data"),
            pending: VecDeque::new(),
            step: 0,
            floored: 0,
            execution: Execution::default(),
            config,
        })
    }

    pub fn with_execution(mut self, mode: Execution) -> Self {
        self.execution = mode;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Next batch in the current shuffled epoch, reshuffling when exhausted.
    pub fn next_batch(&mut self) -> Batch {
        if self.pending.is_empty() {
            self.pending = batch_encoded(&self.pairs, self.config.batch_size, &mut self.data_rng).into();
        }
        self.pending.pop_front().expect("non-empty epoch")
    }

    /// One optimisation step; returns the loss measured before the update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = self.next_batch();
        let mut bg = batch_gradient(&self.params, &batch.pairs, &self.config, self.execution)?;
        if !bg.breakdown.total.is_finite() || bg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step: self.step });
        }
        clip_global_norm(&mut bg.grad, self.config.clip_norm);
        self.optimizer.apply(self.params.as_mut_slice(), &bg.grad, self.config.learning_rate);
        self.step += 1;
        self.floored += bg.floored;
        Ok(bg.breakdown)
    }

    pub fn into_artifacts(self, trajectory: Vec<LossBreakdown>, wall_clock_secs: f64) -> RunArtifacts {
        RunArtifacts {
            config_hash: self.config.hash(),
            params: self.params,
            vocab: self.vocab,
            config: self.config,
            trajectory,
            floored: self.floored,
            wall_clock_secs,
        }
    }
}

/// Runs `config.steps` steps from a fresh initialisation.
pub fn train(config: RunConfig, examples: &[Example]) -> Result<RunArtifacts> {
    train_with(Trainer::new(config, examples)?)
}

pub fn train_with(mut trainer: Trainer) -> Result<RunArtifacts> {
    let start = Instant::now();
    let steps = trainer.config.steps;
    let mut trajectory = Vec::with_capacity(steps);
    for i in 0..steps {
        let b = trainer.step()?;
        if i % 200 == 0 {
            log::debug!("step {i}: total {:.5} (pred {:.5}, gen {:.5}, mi {:.5})", b.total, b.prediction_loss, b.generation_loss, b.mi_loss);
        }
        trajectory.push(b);
    }
    Ok(trainer.into_artifacts(trajectory, start.elapsed().as_secs_f64()))
}

pub const TRAJECTORY_HEADER: &str = "step,prediction_loss,generation_loss,mi_loss,total";

/// CSV with one row per step. Floats use shortest round-trip formatting.
pub fn trajectory_to_csv(trajectory: &[LossBreakdown]) -> String {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for (i, b) in trajectory.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{}", b.prediction_loss, b.generation_loss, b.mi_loss, b.total);
    }
    s
}

pub fn trajectory_from_csv(text: &str) -> Result<Vec<LossBreakdown>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRAJECTORY_HEADER) {
        return Err(Error::invalid("trajectory: unexpected header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::invalid(format!("trajectory row {}: expected 5 fields", i + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::invalid(format!("trajectory row {}: bad number `{s}`", i + 1)))
            };
            Ok(LossBreakdown {
                prediction_loss: num(f[1])?,
                generation_loss: num(f[2])?,
                mi_loss: num(f[3])?,
                total: num(f[4])?,
            })
        })
        .collect()
}

pub fn write_trajectory(path: impl AsRef<Path>, trajectory: &[LossBreakdown]) -> Result<()> {
    std::fs::write(path, trajectory_to_csv(trajectory))?;
    Ok(())
}

/// Serializable summary of a finished run. Holds only reproducible values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub config_hash: String,
    pub initial: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub mean_mi_loss: f64,
    pub floored: usize,
}

impl RunArtifacts {
    pub fn summary(&self) -> RunSummary {
        let n = self.trajectory.len();
        RunSummary {
            steps: n,
            config_hash: self.config_hash.clone(),
            initial: self.trajectory.first().copied(),
            last: self.trajectory.last().copied(),
            mean_mi_loss: if n == 0 { 0.0 } else { self.trajectory.iter().map(|b| b.mi_loss).sum::<f64>() / n as f64 },
            floored: self.floored,
        }
    }
}
