use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{adapters, Corpus, Dialogue, Item, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    CanonicalJsonl,
    Durecdial,
    Tgredial,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "canonical_jsonl" | "canonical" | "jsonl" => Ok(CorpusFormat::CanonicalJsonl),
            "durecdial" => Ok(CorpusFormat::Durecdial),
            "tgredial" | "tg-redial" => Ok(CorpusFormat::Tgredial),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

/// Label inventories stored next to a canonical JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelSidecar {
    goal_set: Vec<String>,
    topic_set: Vec<String>,
    item_catalog: Vec<(String, String)>,
    split: Split,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("labels.json")
}

/// Loads a corpus. For `CanonicalJsonl`, `path` is the dialogue file and an
/// optional `<stem>.labels.json` sidecar carries the label inventories; without
/// it the inventories are collected from the annotations. Adapter formats take
/// the dataset directory (or one split file).
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    match format {
        CorpusFormat::CanonicalJsonl => load_canonical(path),
        CorpusFormat::Durecdial => adapters::load_durecdial(path),
        CorpusFormat::Tgredial => adapters::load_tgredial(path),
    }
}

fn load_canonical(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dialogues = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        dialogues.push(d);
    }

    let side = sidecar_path(path);
    let mut corpus = Corpus {
        dialogues,
        ..Corpus::default()
    };
    if side.exists() {
        let raw = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let labels: LabelSidecar = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: side.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        corpus.goal_set = labels.goal_set;
        corpus.topic_set = labels.topic_set;
        corpus.item_catalog = labels
            .item_catalog
            .into_iter()
            .map(|(id, name)| Item { id, name })
            .collect();
        corpus.split = labels.split;
        check_label_sets(&corpus)?;
    } else {
        corpus.extend_label_sets();
    }
    Ok(corpus)
}

fn check_label_sets(c: &Corpus) -> Result<()> {
    let goals: HashSet<&str> = c.goal_set.iter().map(String::as_str).collect();
    let items: HashSet<&str> = c.item_catalog.iter().map(|i| i.id.as_str()).collect();
    for d in &c.dialogues {
        for (ti, t) in d.turns.iter().enumerate() {
            if let Some(g) = t.goals.iter().find(|g| !goals.contains(g.as_str())) {
                return Err(Error::LabelSet(format!(
                    "dialogue {} turn {ti}: unknown goal `{g}`",
                    d.dialogue_id
                )));
            }
            if let Some(i) = t.item_ids.iter().find(|i| !items.contains(i.as_str())) {
                return Err(Error::LabelSet(format!(
                    "dialogue {} turn {ti}: unknown item id `{i}`",
                    d.dialogue_id
                )));
            }
        }
    }
    Ok(())
}

fn sidecar_json(c: &Corpus) -> Result<String> {
    let side = LabelSidecar {
        goal_set: c.goal_set.clone(),
        topic_set: c.topic_set.clone(),
        item_catalog: c
            .item_catalog
            .iter()
            .map(|i| (i.id.clone(), i.name.clone()))
            .collect(),
        split: c.split,
    };
    Ok(serde_json::to_string_pretty(&side)?)
}

fn dialogue_lines(c: &Corpus) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for d in &c.dialogues {
        serde_json::to_writer(&mut buf, d)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Writes `path` (one dialogue per line) and its label sidecar.
pub fn save_corpus(c: &Corpus, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&dialogue_lines(c)?).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, sidecar_json(c)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// SHA-256 over the canonical serialization (dialogue lines, then sidecar).
pub fn corpus_digest(c: &Corpus) -> Result<String> {
    let mut h = Sha256::new();
    h.update(dialogue_lines(c)?);
    h.update(sidecar_json(c)?.as_bytes());
    Ok(hex::encode(h.finalize()))
}
