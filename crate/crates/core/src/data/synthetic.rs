//! Small generated tasks for desk-scale training runs.

use rand::Rng;

use crate::config::RunConfig;
use crate::rng::SeedStream;
use crate::types::Example;

const FILLERS: [&str; 12] = [
    "apple", "stone", "river", "cloud", "tiger", "lamp", "glass", "wheel", "paper", "storm", "maple",
    "horse",
];

const COUNT_WORDS: [&str; 6] = ["one", "two", "three", "four", "five", "six"];

/// Parity of the input word count.
///
/// Input: 1 to 6 filler words. Label: `even` / `odd`. Rationale: a templated
/// sentence naming the count, e.g. `the input has three words and three is odd`.
pub fn parity_task(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = SeedStream::new(seed).split("synthetic/parity");
    (0..n)
        .map(|i| {
            let count = rng.random_range(1..=COUNT_WORDS.len());
            let words: Vec<&str> =
                (0..count).map(|_| FILLERS[rng.random_range(0..FILLERS.len())]).collect();
            let parity = if count % 2 == 0 { "even" } else { "odd" };
            let count_word = COUNT_WORDS[count - 1];
            Example {
                id: format!("parity-{seed}-{i}"),
                input: words.join(" "),
                label: parity.to_string(),
                rationale: format!("the input has {count_word} words and {count_word} is {parity}"),
            }
        })
        .collect()
}

/// Model size and step size for the parity task. Mean pooling exposes the
/// word count only through the `1 / (n + 1)` weight of the task prefix, and
/// the default dims and step size leave accuracy near 0.7 within 2000 steps.
pub fn parity_config(seed: u64) -> RunConfig {
    RunConfig { seed, embed_dim: 48, hidden_dim: 96, learning_rate: 1e-2, steps: 2000, ..RunConfig::default() }
}

/// Label is the first input token.
pub fn copy_task(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = SeedStream::new(seed).split("synthetic/copy");
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=4);
            let words: Vec<&str> =
                (0..len).map(|_| FILLERS[rng.random_range(0..FILLERS.len())]).collect();
            Example {
                id: format!("copy-{seed}-{i}"),
                input: words.join(" "),
                label: words[0].to_string(),
                rationale: format!("the first word is {}", words[0]),
            }
        })
        .collect()
}
