//! Inference and the measurement suite.

pub mod calibration;
pub mod correlation;
pub mod quality;

use serde::{Deserialize, Serialize};

pub use calibration::{confidence, ece, label_accuracy, CalibrationBin, CalibrationReport, DEFAULT_BINS};
pub use correlation::pearson;
pub use quality::{OverlapScorer, QualityScorer, ScoringItem};

use crate::config::{ConfidenceMode, RunConfig};
use crate::data::encode;
use crate::error::{Error, Result};
use crate::losses::softmax_rows;
use crate::linalg::Matrix;
use crate::model::ModelParams;
use crate::par::{map_ordered, Execution};
use crate::trainer::checkpoint::Checkpoint;
use crate::types::{Example, TaskKind, TokenId, Vocabulary, BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub task: TaskKind,
    pub decoded: String,
    /// Gold label (predict) or gold rationale (explain).
    pub gold: String,
    /// Predict records only.
    pub correct: Option<bool>,
    pub confidence: f64,
    /// Explain records only, in `[1, 5]`.
    pub quality_score: Option<f64>,
    pub quality_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated ids after BOS, including the terminating EOS/PAD if one was
    /// produced.
    pub ids: Vec<TokenId>,
    /// Probability of each chosen id.
    pub probs: Vec<f64>,
}

impl Decoded {
    /// Ids and probabilities with a trailing stop token removed, unless it
    /// is the only token.
    pub fn content(&self) -> (&[TokenId], &[f64]) {
        match self.ids.last() {
            Some(&t) if (t == EOS || t == PAD) && self.ids.len() > 1 => {
                let n = self.ids.len() - 1;
                (&self.ids[..n], &self.probs[..n])
            }
            _ => (&self.ids, &self.probs),
        }
    }
}

/// Greedy decoding from BOS. Ties go to the lowest id. Decoding stops after
/// EOS, after PAD (a degenerate output), or after `max_len` tokens.
pub fn greedy_decode(params: &ModelParams, src: &[TokenId], max_len: usize) -> Result<Decoded> {
    let c = params.context(src)?;
    let mut prev = BOS;
    let mut ids = Vec::new();
    let mut probs = Vec::new();
    for _ in 0..max_len {
        let logits = params.step_logits(&c, prev);
        let row = Matrix::from_vec(1, logits.len(), logits).expect("one row");
        let p = softmax_rows(&row);
        let (best, &bp) = p
            .row(0)
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &f64)>, (i, v)| match acc {
                Some((_, b)) if *v <= *b => acc,
                _ => Some((i, v)),
            })
            .expect("non-empty vocabulary");
        let tok = best as TokenId;
        ids.push(tok);
        probs.push(bp);
        if tok == EOS || tok == PAD {
            break;
        }
        prev = tok;
    }
    Ok(Decoded { ids, probs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub scorer: String,
    pub scored: usize,
    pub errors: usize,
    pub mean_quality: Option<f64>,
    /// Correlation between per-example quality and label correctness;
    /// `None` when undefined (zero variance or fewer than two points).
    pub pearson: Option<f64>,
    pub pearson_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: CalibrationReport,
    pub quality: QualitySummary,
    pub records: Vec<PredictionRecord>,
}

/// Scores explain records in place. Failures are recorded per record and do
/// not stop the batch. `items` must align with `records`.
pub fn score_rationales(
    records: &mut [PredictionRecord],
    items: &[ScoringItem<'_>],
    scorer: &dyn QualityScorer,
) {
    assert_eq!(records.len(), items.len());
    let width = scorer.max_in_flight().clamp(1, records.len().max(1));
    let results: Vec<Result<f64>> = if width == 1 {
        items.iter().map(|it| scorer.score(it)).collect()
    } else {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(width) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|it| s.spawn(move || scorer.score(it))).collect();
                out.extend(handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Judge("scorer panicked".into())))));
            });
        }
        out
    };
    for (r, res) in records.iter_mut().zip(results) {
        match res {
            Ok(s) if (1.0..=5.0).contains(&s) => r.quality_score = Some(s),
            Ok(s) => r.quality_error = Some(format!("score {s} outside [1, 5]")),
            Err(e) => r.quality_error = Some(e.to_string()),
        }
    }
}

struct ExampleRecords {
    predict: PredictionRecord,
    explain: PredictionRecord,
}

fn evaluate_example(
    params: &ModelParams,
    vocab: &Vocabulary,
    config: &RunConfig,
    ex: &Example,
) -> Result<ExampleRecords> {
    let max_len = config.max_tgt_len.saturating_sub(1).max(1);
    let run = |task: TaskKind, mode: ConfidenceMode| -> Result<(String, f64)> {
        let inst = encode(ex, task, vocab, config);
        let dec = greedy_decode(params, &inst.src, max_len)?;
        let (ids, probs) = dec.content();
        Ok((vocab.decode(ids), confidence(probs, mode)?))
    };
    let (label, label_conf) = run(TaskKind::Predict, config.confidence)?;
    let (rationale, rationale_conf) = run(TaskKind::Explain, config.confidence)?;
    let correct = calibration::labels_match(&label, &ex.label);
    Ok(ExampleRecords {
        predict: PredictionRecord {
            example_id: ex.id.clone(),
            task: TaskKind::Predict,
            decoded: label,
            gold: ex.label.clone(),
            correct: Some(correct),
            confidence: label_conf,
            quality_score: None,
            quality_error: None,
        },
        explain: PredictionRecord {
            example_id: ex.id.clone(),
            task: TaskKind::Explain,
            decoded: rationale,
            gold: ex.rationale.clone(),
            correct: None,
            confidence: rationale_conf,
            quality_score: None,
            quality_error: None,
        },
    })
}

/// Decodes both tasks for every example, then computes calibration, scores
/// the rationales and correlates quality with correctness.
pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocabulary,
    config: &RunConfig,
    examples: &[Example],
    scorer: &dyn QualityScorer,
    mode: Execution,
) -> Result<Evaluation> {
    let dims = params.dims();
    if dims.vocab != vocab.len() || dims.embed != config.embed_dim || dims.hidden != config.hidden_dim {
        return Err(Error::shape(
            format!("vocab {} / embed {} / hidden {}", vocab.len(), config.embed_dim, config.hidden_dim),
            format!("vocab {} / embed {} / hidden {}", dims.vocab, dims.embed, dims.hidden),
        ));
    }
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let per_example: Vec<Result<ExampleRecords>> =
        map_ordered(mode, examples, |ex| evaluate_example(params, vocab, config, ex));
    let mut predict = Vec::with_capacity(examples.len());
    let mut explain = Vec::with_capacity(examples.len());
    for r in per_example {
        let r = r?;
        predict.push(r.predict);
        explain.push(r.explain);
    }
    let report = ece(&predict, DEFAULT_BINS)?;

    let task_name = "rationale";
    let items: Vec<ScoringItem<'_>> = examples
        .iter()
        .zip(&explain)
        .map(|(ex, rec)| ScoringItem {
            task_name,
            question: &ex.input,
            answer: &ex.label,
            rationale: &rec.decoded,
            gold_rationale: &ex.rationale,
        })
        .collect();
    let mut scored = explain.clone();
    score_rationales(&mut scored, &items, scorer);
    drop(items);
    let explain = scored;

    let (qs, cs): (Vec<f64>, Vec<f64>) = explain
        .iter()
        .zip(&predict)
        .filter_map(|(e, p)| e.quality_score.map(|q| (q, if p.correct == Some(true) { 1.0 } else { 0.0 })))
        .unzip();
    let (pearson_r, pearson_note) = match pearson(&qs, &cs) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let quality = QualitySummary {
        scorer: scorer.name().to_string(),
        scored: qs.len(),
        errors: explain.iter().filter(|e| e.quality_error.is_some()).count(),
        mean_quality: (!qs.is_empty()).then(|| qs.iter().sum::<f64>() / qs.len() as f64),
        pearson: pearson_r,
        pearson_note,
    };
    let mut records = predict;
    records.extend(explain);
    Ok(Evaluation { report, quality, records })
}

/// Evaluates a checkpoint on another dataset using the checkpoint's own
/// vocabulary (unseen tokens become UNK). The report is tagged with both
/// dataset names.
pub fn ood_evaluate(
    checkpoint: &Checkpoint,
    examples: &[Example],
    dataset: &str,
    scorer: &dyn QualityScorer,
    mode: Execution,
) -> Result<Evaluation> {
    let mut ev = evaluate(&checkpoint.params, &checkpoint.vocab, &checkpoint.config, examples, scorer, mode)?;
    ev.report.dataset = Some(dataset.to_string());
    ev.report.train_dataset = Some(checkpoint.dataset.clone());
    ev.report.out_of_domain = true;
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::parity_task;
    use crate::model::{init_params, ModelDims};
    use crate::rng::seeded_rng;
    use crate::types::UNK;

    #[test]
    fn zero_params_decode_pad() {
        let p = ModelParams::zeros(ModelDims { vocab: 9, embed: 3, hidden: 4 });
        let d = greedy_decode(&p, &[4, 5], 10).unwrap();
        assert_eq!(d.ids, vec![PAD]);
        assert!((d.probs[0] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn peaked_output_bias_decodes_target() {
        // decoder ignores everything but the previous token through the output bias and
        // a hand-set path: make output depend on prev via embedding -> hidden -> output.
        let dims = ModelDims { vocab: 8, embed: 8, hidden: 8 };
        let mut p = ModelParams::zeros(dims);
        let e = dims.embed;
        let v = dims.vocab;
        let h = dims.hidden;
        let w_off = v * e;
        let b_off = w_off + h * 2 * e;
        let u_off = b_off + h;
        let data = p.as_mut_slice();
        // one-hot embeddings
        for t in 0..v {
            data[t * e + t] = 1.0;
        }
        // hidden j copies the previous-token one-hot (second half of the input)
        for j in 0..h {
            data[w_off + j * 2 * e + e + j] = 5.0;
        }
        // BOS -> 5 -> 6 -> 7 -> EOS
        let next = [(BOS, 5u32), (5, 6), (6, 7), (7, EOS)];
        for (prev, nxt) in next {
            data[u_off + nxt as usize * h + prev as usize] = 40.0;
        }
        let d = greedy_decode(&p, &[4], 10).unwrap();
        assert_eq!(d.ids, vec![5, 6, 7, EOS]);
        assert!(d.probs.iter().all(|&q| q > 0.99));
        assert_eq!(d.content().0, &[5, 6, 7]);
        assert_eq!(greedy_decode(&p, &[4], 10).unwrap(), d);
    }

    #[test]
    fn content_keeps_lone_stop_token() {
        let d = Decoded { ids: vec![EOS], probs: vec![0.4] };
        assert_eq!(d.content().1, &[0.4]);
    }

    #[test]
    fn evaluate_runs_and_tags_ood() {
        let cfg = RunConfig { embed_dim: 4, hidden_dim: 6, ..RunConfig::default() };
        let exs = parity_task(12, 1);
        let vocab = crate::data::build_vocab(&exs, cfg.vocab_size).unwrap();
        let params = init_params(ModelDims::new(vocab.len(), &cfg), &mut seeded_rng(3));
        let ev = evaluate(&params, &vocab, &cfg, &exs, &OverlapScorer, Execution::Parallel).unwrap();
        assert_eq!(ev.records.len(), 24);
        assert_eq!(ev.report.n, 12);
        let seq = evaluate(&params, &vocab, &cfg, &exs, &OverlapScorer, Execution::Sequential).unwrap();
        assert_eq!(ev, seq);

        let ck = Checkpoint { params, vocab, config: cfg, config_hash: String::new(), dataset: "parity".into() };
        let foreign = vec![Example::new("f1", "completely unseen vocabulary", "maybe", "no idea").unwrap()];
        let ood = ood_evaluate(&ck, &foreign, "foreign", &OverlapScorer, Execution::Parallel).unwrap();
        assert!(ood.report.out_of_domain);
        assert_eq!(ood.report.dataset.as_deref(), Some("foreign"));
        assert_eq!(ood.report.train_dataset.as_deref(), Some("parity"));
        let src = encode(&foreign[0], TaskKind::Predict, &ck.vocab, &ck.config).src;
        assert!(src[1..].iter().all(|&t| t == UNK));
    }

    #[test]
    fn incompatible_dims_rejected() {
        let cfg = RunConfig { embed_dim: 4, hidden_dim: 6, ..RunConfig::default() };
        let exs = parity_task(4, 1);
        let vocab = crate::data::build_vocab(&exs, cfg.vocab_size).unwrap();
        let params = ModelParams::zeros(ModelDims { vocab: vocab.len() + 1, embed: 4, hidden: 6 });
        assert!(evaluate(&params, &vocab, &cfg, &exs, &OverlapScorer, Execution::Sequential).is_err());
    }

    struct Flaky;
    impl QualityScorer for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn score(&self, item: &ScoringItem<'_>) -> Result<f64> {
            if item.rationale.is_empty() {
                Err(Error::Judge("transport failure".into()))
            } else {
                Ok(3.0)
            }
        }
        fn max_in_flight(&self) -> usize {
            2
        }
    }

    #[test]
    fn scorer_failures_recorded_per_record() {
        let mk = |id: &str| PredictionRecord {
            example_id: id.into(),
            task: TaskKind::Explain,
            decoded: String::new(),
            gold: String::new(),
            correct: None,
            confidence: 0.5,
            quality_score: None,
            quality_error: None,
        };
        let mut recs = vec![mk("a"), mk("b"), mk("c")];
        let items = vec![
            ScoringItem { task_name: "t", question: "q", answer: "a", rationale: "ok", gold_rationale: "" },
            ScoringItem { task_name: "t", question: "q", answer: "a", rationale: "", gold_rationale: "" },
            ScoringItem { task_name: "t", question: "q", answer: "a", rationale: "fine", gold_rationale: "" },
        ];
        score_rationales(&mut recs, &items, &Flaky);
        assert_eq!(recs[0].quality_score, Some(3.0));
        assert!(recs[1].quality_error.is_some() && recs[1].quality_score.is_none());
        assert_eq!(recs[2].quality_score, Some(3.0));
    }
}
