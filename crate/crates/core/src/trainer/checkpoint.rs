//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.txt   key = value lines, then one `tensor = name rows cols`
//!                      line per parameter block in storage order
//! <dir>/params.f32     little-endian f32 values, blocks concatenated
//! <dir>/vocab.txt      one token per line, id order
//! <dir>/config.txt     the run configuration
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::types::Vocabulary;

pub const FORMAT: &str = "step-mi-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.f32";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub config: RunConfig,
    pub config_hash: String,
    /// Name of the dataset the parameters were trained on.
    pub dataset: String,
}

impl Checkpoint {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams,
    vocab: &Vocabulary,
    config: &RunConfig,
    dataset: &str,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let dims = params.dims();
    if dims.vocab != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "parameters cover {} tokens but vocabulary has {}",
            dims.vocab,
            vocab.len()
        )));
    }
    let mut manifest = format!(
        "format = {FORMAT}\nseed = {}\nconfig_hash = {}\ndataset = {}\nvocab_size = {}\nembed_dim = {}\nhidden_dim = {}\n",
        config.seed,
        config.hash(),
        dataset.replace('\n', " "),
        dims.vocab,
        dims.embed,
        dims.hidden
    );
    for b in dims.blocks() {
        manifest.push_str(&format!("tensor = {} {} {}\n", b.name, b.rows, b.cols));
    }
    let bytes: Vec<u8> = params.as_slice().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    fs::write(dir.join(VOCAB_FILE), vocab.to_text())?;
    fs::write(dir.join(CONFIG_FILE), config.to_text())?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

#[derive(Debug, Default)]
struct ManifestFields {
    format: Option<String>,
    seed: Option<u64>,
    config_hash: Option<String>,
    dataset: Option<String>,
    vocab_size: Option<usize>,
    embed_dim: Option<usize>,
    hidden_dim: Option<usize>,
    tensors: Vec<(String, usize, usize)>,
}

fn parse_manifest(text: &str) -> Result<ManifestFields> {
    let mut m = ManifestFields::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: expected `key = value`", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let num = |field: &str| -> Result<usize> {
            value.parse().map_err(|_| Error::Checkpoint(format!("manifest field `{field}`: bad value `{value}`")))
        };
        match key {
            "format" => m.format = Some(value.to_string()),
            "seed" => {
                m.seed = Some(
                    value.parse().map_err(|_| Error::Checkpoint(format!("manifest field `seed`: bad value `{value}`")))?,
                )
            }
            "config_hash" => m.config_hash = Some(value.to_string()),
            "dataset" => m.dataset = Some(value.to_string()),
            "vocab_size" => m.vocab_size = Some(num("vocab_size")?),
            "embed_dim" => m.embed_dim = Some(num("embed_dim")?),
            "hidden_dim" => m.hidden_dim = Some(num("hidden_dim")?),
            "tensor" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                let parsed = match parts.as_slice() {
                    [name, r, c] => r.parse().ok().zip(c.parse().ok()).map(|(r, c)| (name.to_string(), r, c)),
                    _ => None,
                };
                m.tensors.push(
                    parsed.ok_or_else(|| Error::Checkpoint(format!("manifest field `tensor`: bad value `{value}`")))?,
                );
            }
            other => return Err(Error::Checkpoint(format!("manifest: unknown field `{other}`"))),
        }
    }
    Ok(m)
}

fn require<T>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::Checkpoint(format!("manifest: missing field `{field}`")))
}

/// Loads a checkpoint. A config-hash mismatch is not an error; see
/// [`load_checkpoint_checked`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    load_checkpoint_checked(dir, None).map(|(c, _)| c)
}

/// Loads a checkpoint and returns warnings: a manifest hash that does not
/// match the stored config, or a hash different from `expected_hash`.
pub fn load_checkpoint_checked(
    dir: impl AsRef<Path>,
    expected_hash: Option<&str>,
) -> Result<(Checkpoint, Vec<String>)> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(name).display())))
    };
    let m = parse_manifest(&read(MANIFEST_FILE)?)?;
    let format = require(m.format, "format")?;
    if format != FORMAT {
        return Err(Error::Checkpoint(format!("manifest field `format`: unsupported `{format}`")));
    }
    let seed = require(m.seed, "seed")?;
    let config_hash = require(m.config_hash, "config_hash")?;
    let dataset = m.dataset.unwrap_or_default();
    let dims = ModelDims {
        vocab: require(m.vocab_size, "vocab_size")?,
        embed: require(m.embed_dim, "embed_dim")?,
        hidden: require(m.hidden_dim, "hidden_dim")?,
    };
    let expected: Vec<(String, usize, usize)> =
        dims.blocks().iter().map(|b| (b.name.to_string(), b.rows, b.cols)).collect();
    if m.tensors != expected {
        return Err(Error::Checkpoint("manifest field `tensor`: blocks do not match model dimensions".into()));
    }

    let config = RunConfig::parse(&read(CONFIG_FILE)?)
        .map_err(|e| Error::Checkpoint(format!("{CONFIG_FILE}: {e}")))?;
    if config.seed != seed {
        return Err(Error::Checkpoint("manifest field `seed`: disagrees with config.txt".into()));
    }
    if config.embed_dim != dims.embed || config.hidden_dim != dims.hidden {
        return Err(Error::Checkpoint("manifest field `embed_dim`/`hidden_dim`: disagrees with config.txt".into()));
    }
    let vocab = Vocabulary::from_text(&read(VOCAB_FILE)?)
        .map_err(|e| Error::Checkpoint(format!("{VOCAB_FILE}: {e}")))?;
    if vocab.len() != dims.vocab {
        return Err(Error::Checkpoint(format!(
            "manifest field `vocab_size`: {} but {VOCAB_FILE} has {} tokens",
            dims.vocab,
            vocab.len()
        )));
    }

    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let want = dims.num_params() * 4;
    if bytes.len() != want {
        return Err(Error::Checkpoint(format!("{PARAMS_FILE}: expected {want} bytes, found {}", bytes.len())));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let params = ModelParams::from_flat(dims, data).map_err(|e| Error::Checkpoint(format!("{PARAMS_FILE}: {e}")))?;

    let mut warnings = Vec::new();
    if config.hash() != config_hash {
        warnings.push(format!("config hash in manifest ({config_hash}) does not match {CONFIG_FILE}"));
    }
    if let Some(h) = expected_hash {
        if h != config_hash {
            warnings.push(format!("checkpoint config hash {config_hash} differs from expected {h}"));
        }
    }
    for w in &warnings {
        log::warn!("{}: {w}", dir.display());
    }
    Ok((Checkpoint { params, vocab, config, config_hash, dataset }, warnings))
}
