//! Dataset ingestion, vocabulary construction, task encoding and batching.

pub mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::types::{tokenize, Example, TaskKind, TokenId, Vocabulary, BOS, EOS, PAD, SPECIAL_TOKENS};

/// Reads line-delimited JSON records with string fields `input`, `label`,
/// `rationale` and an optional `id` (defaults to the 1-based line number).
/// Blank lines are skipped.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_records(&text).map_err(|(line, msg)| Error::Record { path: path.to_path_buf(), line, msg })
}

/// Parses records from text; errors carry the 1-based line number.
pub fn parse_records(text: &str) -> std::result::Result<Vec<Example>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(raw).map_err(|e| (line_no, format!("malformed record: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| (line_no, "record is not an object".to_string()))?;
        let field = |name: &str, required: bool| -> std::result::Result<Option<String>, (usize, String)> {
            match obj.get(name) {
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(Value::Number(n)) if name == "id" => Ok(Some(n.to_string())),
                Some(_) => Err((line_no, format!("field `{name}` must be a string"))),
                None if required => Err((line_no, format!("missing required field `{name}`"))),
                None => Ok(None),
            }
        };
        let input = field("input", true)?.unwrap_or_default();
        let label = field("label", true)?.unwrap_or_default();
        let rationale = field("rationale", true)?.unwrap_or_default();
        let id = field("id", false)?.unwrap_or_else(|| line_no.to_string());
        let ex = Example { id, input, label, rationale };
        ex.validate().map_err(|e| (line_no, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

/// Serializes examples in the same line-delimited format.
pub fn records_to_jsonl(examples: &[Example]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex).expect("example serializes"));
        s.push('\n');
    }
    s
}

/// Whitespace vocabulary: the four specials, both prefix tokens, then corpus
/// tokens by descending frequency with lexicographic tie-break, up to
/// `max_size` entries in total.
pub fn build_vocab(examples: &[Example], max_size: usize) -> Result<Vocabulary> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from zero examples"));
    }
    if max_size < 6 {
        return Err(Error::invalid(format!(
            "vocabulary size {max_size} cannot hold the 4 specials and 2 prefixes"
        )));
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(TaskKind::ALL.iter().map(|t| t.prefix_token().to_string()));

    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in examples {
        for text in [&ex.input, &ex.label, &ex.rationale] {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().filter(|(t, _)| !tokens.contains(t)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = max_size - tokens.len();
    tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub example_id: String,
    pub task: TaskKind,
    /// Prefix token + input tokens, no BOS/EOS.
    pub src: Vec<TokenId>,
    /// BOS + target tokens + EOS.
    pub tgt: Vec<TokenId>,
    pub truncated: bool,
}

/// Encodes one example for one task, truncating silently to the configured
/// lengths (recorded in `truncated`).
pub fn encode(example: &Example, task: TaskKind, vocab: &Vocabulary, config: &RunConfig) -> TaskInstance {
    let mut src: Vec<TokenId> = tokenize(&task.prepend(&example.input))
        .iter()
        .map(|t| vocab.id_or_unk(t))
        .collect();
    let mut tgt = Vec::with_capacity(config.max_tgt_len);
    tgt.push(BOS);
    tgt.extend(tokenize(example.target(task)).iter().map(|t| vocab.id_or_unk(t)));
    tgt.push(EOS);

    let mut truncated = false;
    if src.len() > config.max_src_len {
        src.truncate(config.max_src_len);
        truncated = true;
    }
    if tgt.len() > config.max_tgt_len {
        tgt.truncate(config.max_tgt_len);
        truncated = true;
    }
    TaskInstance { example_id: example.id.clone(), task, src, tgt, truncated }
}

/// Predict and explain instances of the same example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstancePair {
    pub predict: TaskInstance,
    pub explain: TaskInstance,
}

impl InstancePair {
    pub fn encode(example: &Example, vocab: &Vocabulary, config: &RunConfig) -> Self {
        InstancePair {
            predict: encode(example, TaskKind::Predict, vocab, config),
            explain: encode(example, TaskKind::Explain, vocab, config),
        }
    }
}

/// Rows of a batch matrix are interleaved: `2i` is the predict instance of
/// pair `i`, `2i + 1` its explain instance. Shorter rows are PAD-filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<InstancePair>,
    pub src: Vec<Vec<TokenId>>,
    pub tgt: Vec<Vec<TokenId>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

fn pad_rows(rows: &[&[TokenId]]) -> (Vec<Vec<TokenId>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let padded = rows
        .iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.resize(width, PAD);
            v
        })
        .collect();
    let mask = rows
        .iter()
        .map(|r| (0..width).map(|j| j < r.len() && r[j] != PAD).collect())
        .collect();
    (padded, mask)
}

impl Batch {
    pub fn new(pairs: Vec<InstancePair>) -> Self {
        let src_rows: Vec<&[TokenId]> =
            pairs.iter().flat_map(|p| [p.predict.src.as_slice(), p.explain.src.as_slice()]).collect();
        let tgt_rows: Vec<&[TokenId]> =
            pairs.iter().flat_map(|p| [p.predict.tgt.as_slice(), p.explain.tgt.as_slice()]).collect();
        let (src, src_mask) = pad_rows(&src_rows);
        let (tgt, tgt_mask) = pad_rows(&tgt_rows);
        Batch { pairs, src, tgt, src_mask, tgt_mask }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Shuffles `examples` with `rng` and groups them into batches of
/// `config.batch_size` pairs; the last partial batch is kept.
pub fn make_batches<R: Rng + ?Sized>(
    examples: &[Example],
    vocab: &Vocabulary,
    config: &RunConfig,
    rng: &mut R,
) -> Vec<Batch> {
    let encoded: Vec<InstancePair> =
        examples.iter().map(|ex| InstancePair::encode(ex, vocab, config)).collect();
    batch_encoded(&encoded, config.batch_size, rng)
}

/// Batches already-encoded pairs (shuffled order).
pub fn batch_encoded<R: Rng + ?Sized>(pairs: &[InstancePair], batch_size: usize, rng: &mut R) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| Batch::new(chunk.iter().map(|&i| pairs[i].clone()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use crate::types::UNK;

    fn ex(id: &str, input: &str, label: &str, rationale: &str) -> Example {
        Example::new(id, input, label, rationale).unwrap()
    }

    #[test]
    fn load_valid_in_order() {
        let text = r#"{"input":"a b","label":"yes","rationale":"because a"}
{"input":"c","label":"no","rationale":"","id":"q7"}
{"input":"d e f","label":"yes","rationale":"r"}
"#;
        let recs = parse_records(text).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].id, "1");
        assert_eq!(recs[1].id, "q7");
        assert_eq!(recs[1].rationale, "");
        assert_eq!(recs[2].input, "d e f");
    }

    #[test]
    fn missing_label_cites_line() {
        let text = "{\"input\":\"a\",\"label\":\"y\",\"rationale\":\"\"}\n{\"input\":\"a\",\"rationale\":\"\"}\n";
        let (line, msg) = parse_records(text).unwrap_err();
        assert_eq!(line, 2);
        assert!(msg.contains("label"), "{msg}");
    }

    #[test]
    fn malformed_line_cites_line() {
        let (line, _) = parse_records("{\"input\":\"a\",\"label\":\"y\",\"rationale\":\"\"}\n\n{oops\n").unwrap_err();
        assert_eq!(line, 3);
    }

    #[test]
    fn load_records_from_file_names_path_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "{\"input\":\"a\",\"rationale\":\"\"}\n").unwrap();
        let err = load_records(&p).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains("label"), "{err}");
    }

    #[test]
    fn vocab_frequency_order() {
        let v = build_vocab(&[ex("1", "a a b", "a", "")], 10).unwrap();
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        assert!(a < b);
        assert!(v.id("[predict]").is_some() && v.id("[explain]").is_some());
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn vocab_lexicographic_tie_break() {
        let v = build_vocab(&[ex("1", "zeta alpha", "beta", "")], 10).unwrap();
        assert!(v.id("alpha").unwrap() < v.id("beta").unwrap());
        assert!(v.id("beta").unwrap() < v.id("zeta").unwrap());
    }

    #[test]
    fn vocab_truncates_to_max_size() {
        let v = build_vocab(&[ex("1", "a a a b b c", "d", "")], 8).unwrap();
        assert_eq!(v.len(), 8);
        assert!(v.id("a").is_some() && v.id("b").is_some());
        assert!(v.id("c").is_none());
        assert!(build_vocab(&[ex("1", "a", "b", "")], 5).is_err());
        assert!(build_vocab(&[], 10).is_err());
    }

    fn tiny_config() -> RunConfig {
        RunConfig { max_src_len: 8, max_tgt_len: 8, batch_size: 4, ..RunConfig::default() }
    }

    #[test]
    fn encode_predict_and_explain() {
        let e = ex("1", "x", "yes", "x means yes");
        let v = build_vocab(std::slice::from_ref(&e), 20).unwrap();
        let cfg = tiny_config();
        let p = encode(&e, TaskKind::Predict, &v, &cfg);
        assert_eq!(p.src, vec![v.id("[predict]").unwrap(), v.id("x").unwrap()]);
        assert_eq!(p.tgt, vec![BOS, v.id("yes").unwrap(), EOS]);
        let x = encode(&e, TaskKind::Explain, &v, &cfg);
        assert_eq!(x.src[0], v.id("[explain]").unwrap());
        assert_eq!(v.decode(&x.tgt), "x means yes");
        assert!(!p.truncated && !x.truncated);
    }

    #[test]
    fn encode_unknown_and_empty_rationale() {
        let e = ex("1", "x", "yes", "");
        let v = build_vocab(std::slice::from_ref(&e), 20).unwrap();
        let cfg = tiny_config();
        let other = ex("2", "zzz x", "yes", "");
        let p = encode(&other, TaskKind::Predict, &v, &cfg);
        assert_eq!(p.src[1], UNK);
        let x = encode(&e, TaskKind::Explain, &v, &cfg);
        assert_eq!(x.tgt, vec![BOS, EOS]);
    }

    #[test]
    fn encode_truncation_flagged() {
        let e = ex("1", "a b c d e f g h i", "yes", "a b c d e f g h");
        let v = build_vocab(std::slice::from_ref(&e), 30).unwrap();
        let cfg = RunConfig { max_src_len: 4, max_tgt_len: 5, ..RunConfig::default() };
        let x = encode(&e, TaskKind::Explain, &v, &cfg);
        assert_eq!(x.src.len(), 4);
        assert_eq!(x.tgt.len(), 5);
        assert_eq!(x.tgt[0], BOS);
        assert!(x.truncated);
    }

    fn corpus(n: usize) -> Vec<Example> {
        (0..n).map(|i| ex(&i.to_string(), &format!("w{i} common"), "yes", "w because")).collect()
    }

    #[test]
    fn batch_sizes_and_pairing() {
        let exs = corpus(10);
        let v = build_vocab(&exs, 40).unwrap();
        let cfg = tiny_config();
        let batches = make_batches(&exs, &v, &cfg, &mut seeded_rng(1));
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        for b in &batches {
            assert_eq!(b.src.len(), 2 * b.len());
            for (i, p) in b.pairs.iter().enumerate() {
                assert_eq!(p.predict.example_id, p.explain.example_id);
                assert_eq!(p.predict.src[1..], p.explain.src[1..]);
                assert_eq!(b.src_mask[2 * i].iter().filter(|&&m| m).count(), p.predict.src.len());
                assert_eq!(b.tgt_mask[2 * i + 1].iter().filter(|&&m| m).count(), p.explain.tgt.len());
            }
        }
    }

    #[test]
    fn batches_deterministic_and_lossless() {
        let exs = corpus(13);
        let v = build_vocab(&exs, 40).unwrap();
        let cfg = RunConfig { batch_size: 1, ..tiny_config() };
        let a = make_batches(&exs, &v, &cfg, &mut seeded_rng(5));
        let b = make_batches(&exs, &v, &cfg, &mut seeded_rng(5));
        assert_eq!(a, b);
        assert!(a.iter().all(|b| b.len() == 1));
        let mut ids: Vec<String> = a.iter().map(|b| b.pairs[0].predict.example_id.clone()).collect();
        ids.sort();
        let mut expected: Vec<String> = exs.iter().map(|e| e.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }
}
