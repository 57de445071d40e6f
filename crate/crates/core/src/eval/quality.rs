//! Rationale quality scoring on a 1 to 5 scale.
//!
//! The offline scorer maps token-overlap F1 against the gold rationale
//! affinely onto `[1, 5]`. The judge scorer asks a chat-completions endpoint
//! with a fixed rubric prompt, repeats each request `k` times and averages.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::tokenize;

/// What a scorer sees for one explain record.
#[derive(Debug, Clone)]
pub struct ScoringItem<'a> {
    pub task_name: &'a str,
    pub question: &'a str,
    pub answer: &'a str,
    pub rationale: &'a str,
    pub gold_rationale: &'a str,
}

pub trait QualityScorer: Sync {
    fn name(&self) -> &str;

    /// A score in `[1, 5]`.
    fn score(&self, item: &ScoringItem<'_>) -> Result<f64>;

    /// Upper bound on concurrent `score` calls.
    fn max_in_flight(&self) -> usize {
        usize::MAX
    }
}

/// F1 between token multisets; two empty sequences count as a perfect match.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta = tokenize(a);
    let tb = tokenize(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &ta {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &tb {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / ta.len() as f64;
    let recall = overlap as f64 / tb.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `1 + 4 * F1(decoded, gold)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapScorer;

impl QualityScorer for OverlapScorer {
    fn name(&self) -> &str {
        "overlap-f1"
    }

    fn score(&self, item: &ScoringItem<'_>) -> Result<f64> {
        Ok(1.0 + 4.0 * token_f1(item.rationale, item.gold_rationale))
    }
}

/// Rubric sent to the judge; `{task}`, `{question}`, `{answer}` and
/// `{rationale}` are substituted.
pub const JUDGE_PROMPT_TEMPLATE: &str = "Given an input pair of a question and an answer of a {task} task, how good is the given Chain-of-thought example? From 1-5, where 1 is completely incoherent and irrelevant, 2 is somewhat incoherent and irrelevant, 3 is coherent, relevant but not helpful, 4 is somewhat helpful, and 5 is helpful and it explains the answer well.

Question: {question}
Answer: {answer}
Chain-of-thought: {rationale}";

pub fn judge_prompt(item: &ScoringItem<'_>) -> String {
    JUDGE_PROMPT_TEMPLATE
        .replace("{task}", item.task_name)
        .replace("{question}", item.question)
        .replace("{answer}", item.answer)
        .replace("{rationale}", item.rationale)
}

/// First standalone integer in `1..=5` in the reply.
pub fn parse_judge_score(reply: &str) -> Result<u8> {
    let bytes = reply.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if let Ok(v) = reply[start..i].parse::<u32>() {
                if (1..=5).contains(&v) {
                    return Ok(v as u8);
                }
            }
        } else {
            i += 1;
        }
    }
    Err(Error::Judge(format!("no score in 1..=5 found in reply `{}`", reply.chars().take(80).collect::<String>())))
}

/// Sends one prompt, returns the reply text.
pub trait JudgeTransport: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub const DEFAULT_REPEATS: usize = 4;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const JUDGE_KEY_ENV: &str = "STEP_MI_JUDGE_KEY";

/// Remote judge scorer with self-consistency averaging.
pub struct JudgeScorer<T: JudgeTransport> {
    transport: T,
    pub repeats: usize,
    pub max_in_flight: usize,
}

impl<T: JudgeTransport> JudgeScorer<T> {
    pub fn new(transport: T) -> Self {
        JudgeScorer { transport, repeats: DEFAULT_REPEATS, max_in_flight: DEFAULT_MAX_IN_FLIGHT }
    }
}

impl<T: JudgeTransport> QualityScorer for JudgeScorer<T> {
    fn name(&self) -> &str {
        "judge"
    }

    fn score(&self, item: &ScoringItem<'_>) -> Result<f64> {
        let prompt = judge_prompt(item);
        let k = self.repeats.max(1);
        let mut sum = 0.0;
        for _ in 0..k {
            sum += parse_judge_score(&self.transport.complete(&prompt)?)? as f64;
        }
        Ok(sum / k as f64)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight.max(1)
    }
}

#[cfg(feature = "remote-judge")]
pub use http::HttpTransport;

#[cfg(feature = "remote-judge")]
mod http {
    use super::{JudgeTransport, JUDGE_KEY_ENV};
    use crate::error::{Error, Result};

    /// Chat-completions client. The bearer token is read from
    /// `STEP_MI_JUDGE_KEY`.
    pub struct HttpTransport {
        client: reqwest::blocking::Client,
        url: String,
        model: String,
        key: String,
    }

    impl HttpTransport {
        pub fn from_env(base_url: &str, model: &str) -> Result<Self> {
            let key = std::env::var(JUDGE_KEY_ENV).map_err(|_| Error::Judge(format!("{JUDGE_KEY_ENV} is not set")))?;
            let client = reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(60))
                .build()
                .map_err(|e| Error::Judge(e.to_string()))?;
            Ok(HttpTransport {
                client,
                url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
                model: model.to_string(),
                key,
            })
        }
    }

    impl JudgeTransport for HttpTransport {
        fn complete(&self, prompt: &str) -> Result<String> {
            let body = serde_json::json!({
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
            });
            let resp = self
                .client
                .post(&self.url)
                .bearer_auth(&self.key)
                .json(&body)
                .send()
                .map_err(|e| Error::Judge(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(Error::Judge(format!("HTTP {}", resp.status())));
            }
            let v: serde_json::Value = resp.json().map_err(|e| Error::Judge(e.to_string()))?;
            v.pointer("/choices/0/message/content")
                .and_then(|c| c.as_str())
                .map(str::to_string)
                .ok_or_else(|| Error::Judge("response has no choices[0].message.content".into()))
        }
    }
}
