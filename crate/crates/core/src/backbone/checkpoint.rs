//! Checkpoint directories: `config.json`, `vocab.json` and `params.bin`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::real::Real;
use super::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 8] = b"MGCRSPAR";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    name: String,
    config: BackboneConfig,
    vocab_digest: String,
    dtype: String,
    param_count: usize,
    param_digest: String,
}

fn param_bytes<F: Real>(params: &[F]) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + params.len() * F::BYTES);
    out.extend_from_slice(MAGIC);
    let dtype = F::DTYPE.as_bytes();
    out.extend_from_slice(&(dtype.len() as u32).to_le_bytes());
    out.extend_from_slice(dtype);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &p in params {
        p.write_le(&mut out);
    }
    out
}

fn parse_params<F: Real>(bytes: &[u8]) -> Result<Vec<F>> {
    let corrupt = |m: &str| Error::Checkpoint(format!("corrupt parameter file: {m}"));
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| corrupt("bad magic"))?;
    let (dl, rest) = rest.split_at_checked(4).ok_or_else(|| corrupt("truncated header"))?;
    let dl = u32::from_le_bytes(dl.try_into().unwrap()) as usize;
    let (dtype, rest) = rest.split_at_checked(dl).ok_or_else(|| corrupt("truncated header"))?;
    if dtype != F::DTYPE.as_bytes() {
        return Err(corrupt(&format!("dtype {} expected {}", String::from_utf8_lossy(dtype), F::DTYPE)));
    }
    let (n, rest) = rest.split_at_checked(8).ok_or_else(|| corrupt("truncated header"))?;
    let n = u64::from_le_bytes(n.try_into().unwrap()) as usize;
    if rest.len() != n * F::BYTES {
        return Err(corrupt("length does not match parameter count"));
    }
    Ok(rest.chunks_exact(F::BYTES).map(F::read_le).collect())
}

impl<F: Real> Backbone<F> {
    /// SHA-256 over the configuration and raw parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(param_bytes(&self.model.params));
        hex::encode(h.finalize())
    }

    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = param_bytes(&self.model.params);
        let meta = CheckpointMeta {
            name: self.name.clone(),
            config: self.config.clone(),
            vocab_digest: self.vocab.digest(),
            dtype: F::DTYPE.into(),
            param_count: self.model.params.len(),
            param_digest: hex::encode(Sha256::digest(&bytes)),
        };
        let cfg = dir.join("config.json");
        fs::write(&cfg, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&cfg, e))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        let p = dir.join("params.bin");
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    /// Restores a checkpoint with the vocabulary stored alongside it.
    pub fn restore(dir: &Path) -> Result<Self> {
        let vocab = Arc::new(Vocabulary::load(&dir.join("vocab.json"))?);
        Self::restore_with_vocab(dir, vocab)
    }

    /// Restores a checkpoint that must have been trained under `vocab`.
    pub fn restore_with_vocab(dir: &Path, vocab: Arc<Vocabulary>) -> Result<Self> {
        let cfg = dir.join("config.json");
        let raw = fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&raw)?;
        let found = vocab.digest();
        if meta.vocab_digest != found {
            return Err(Error::DigestMismatch {
                expected: meta.vocab_digest,
                found,
            });
        }
        let p = dir.join("params.bin");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if hex::encode(Sha256::digest(&bytes)) != meta.param_digest {
            return Err(Error::Checkpoint(format!("{} does not match its recorded digest", p.display())));
        }
        let params = parse_params::<F>(&bytes)?;
        let mut b = Backbone::new(meta.name, meta.config, vocab)?;
        if params.len() != b.model.params.len() || params.len() != meta.param_count {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not fit the configured model ({})",
                params.len(),
                b.model.params.len()
            )));
        }
        b.model.params = params;
        Ok(b)
    }
}
