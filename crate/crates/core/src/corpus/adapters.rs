//! Native dataset adapters.
//!
//! Both adapters read JSON records leniently through `serde_json::Value` so
//! that field-name drift between dataset releases only touches the small
//! lookup helpers below.
//!
//! DuRecDial: a directory holding `train`, `dev` and `test` split files
//! (`.txt`, `.json` or `.jsonl`, one dialogue per line). Per dialogue:
//! `conversation: [str]`, optional per-utterance `goal_type_list` /
//! `goal_topic_list`, `knowledge: [[h, r, t]]`, `user_profile: {k: v}`.
//! The first speaker is the system when the leading goal description says
//! `Bot 主动`, otherwise the user. Topics of turns whose goal contains
//! `推荐` (recommendation) are registered as catalog items and attached as
//! `item_ids` on system turns. Goal-completion flags are not carried over.
//!
//! TG-ReDial: a directory holding `train_data.json`, `valid_data.json` and
//! `test_data.json` (a JSON array or JSONL of conversations). Per
//! conversation: `conv_id`, `messages: [{role, text, movie?, topic?,
//! action?}]` and an optional `goal_path: {local_id: [role, action, topic...]}`.
//! The `Recommender` role maps to the system. An optional
//! `movie_id_to_name.json` object, or `movies_with_mentions.csv`
//! (`id,name,...`), supplies the item catalog; otherwise ids double as names.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{Corpus, Dialogue, Item, Speaker, Split, Triple, Turn, UserProfile};
use crate::error::{Error, Result};

fn read_records(path: &Path) -> Result<Vec<Value>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trimmed = raw.trim_start();
    if trimmed.starts_with('[') {
        let v: Value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        return Ok(v.as_array().cloned().unwrap_or_default());
    }
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn find_split_file(dir: &Path, stems: &[&str]) -> Option<PathBuf> {
    for stem in stems {
        for ext in ["", ".txt", ".json", ".jsonl"] {
            let p = dir.join(format!("{stem}{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

fn split_files(path: &Path, layout: &[(Split, &[&str])]) -> Result<Vec<(Split, PathBuf)>> {
    if path.is_file() {
        return Ok(vec![(Split::Train, path.to_path_buf())]);
    }
    if !path.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset path not found"),
        ));
    }
    let files: Vec<_> = layout
        .iter()
        .filter_map(|(s, stems)| find_split_file(path, stems).map(|p| (*s, p)))
        .collect();
    if files.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no split files found".into(),
        });
    }
    Ok(files)
}

fn str_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::String(s)) if !s.trim().is_empty() => vec![s.trim().to_string()],
        Some(Value::Array(a)) => a
            .iter()
            .filter_map(|x| match x {
                Value::String(s) => Some(s.trim().to_string()),
                Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .filter(|s| !s.is_empty())
            .collect(),
        Some(Value::Number(n)) => vec![n.to_string()],
        _ => Vec::new(),
    }
}

/// Like `str_list` but keeps empty slots so per-utterance lists stay aligned.
fn aligned_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::Array(a)) => a
            .iter()
            .map(|x| match x {
                Value::String(s) => s.trim().to_string(),
                Value::Array(_) => str_list(Some(x)).join(" "),
                Value::Number(n) => n.to_string(),
                _ => String::new(),
            })
            .collect(),
        other => str_list(other),
    }
}

fn first_of<'a>(obj: &'a Value, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k))
}

/// Split-wise dialogue counts from the last adapter load, keyed by split.
pub fn split_counts(c: &Corpus) -> HashMap<Split, usize> {
    let mut m = HashMap::new();
    for d in &c.dialogues {
        let s = if d.dialogue_id.starts_with("dev-") {
            Split::Dev
        } else if d.dialogue_id.starts_with("test-") {
            Split::Test
        } else {
            Split::Train
        };
        *m.entry(s).or_insert(0) += 1;
    }
    m
}

fn split_prefix(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

fn strip_index_prefix(s: &str) -> String {
    // DuRecDial utterances may start with an index marker such as "[1] ".
    let t = s.trim();
    if let Some(rest) = t.strip_prefix('[') {
        if let Some(end) = rest.find(']') {
            if rest[..end].chars().all(|c| c.is_ascii_digit()) {
                return rest[end + 1..].trim().to_string();
            }
        }
    }
    t.to_string()
}

pub fn load_durecdial(path: &Path) -> Result<Corpus> {
    let files = split_files(
        path,
        &[
            (Split::Train, &["train"]),
            (Split::Dev, &["dev", "valid"]),
            (Split::Test, &["test", "test_1"]),
        ],
    )?;
    let mut corpus = Corpus::default();
    let mut items_seen = HashSet::new();
    for (split, file) in &files {
        for (li, rec) in read_records(file)?.iter().enumerate() {
            let conv = str_list(rec.get("conversation"));
            let goals = aligned_list(first_of(rec, &["goal_type_list", "goal_list"]));
            let topics = aligned_list(first_of(rec, &["goal_topic_list", "topic_list"]));
            let bot_first = rec
                .get("goal")
                .and_then(Value::as_str)
                .map(|g| g.split("-->").next().unwrap_or("").contains("Bot 主动"))
                .unwrap_or(false);
            let kb = rec
                .get("knowledge")
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(|t| {
                            let t = str_list(Some(t));
                            (t.len() == 3).then(|| Triple::new(&t[0], &t[1], &t[2]))
                        })
                        .collect()
                })
                .unwrap_or_default();
            let profile = match rec.get("user_profile") {
                Some(Value::Object(m)) => m
                    .iter()
                    .map(|(k, v)| format!("{k} {}", str_list(Some(v)).join(" ")))
                    .collect(),
                other => str_list(other),
            };
            let turns = conv
                .iter()
                .enumerate()
                .map(|(i, text)| {
                    let is_system = (i % 2 == 0) == bot_first;
                    let mut t = Turn::new(
                        if is_system { Speaker::System } else { Speaker::User },
                        strip_index_prefix(text),
                    );
                    if let Some(g) = goals.get(i).filter(|g| !g.is_empty() && g.as_str() != "UNK") {
                        t.goals.push(g.clone());
                    }
                    if let Some(k) = topics.get(i).filter(|k| !k.is_empty() && k.as_str() != "UNK") {
                        t.topics.push(k.clone());
                        if is_system && t.goals.iter().any(|g| g.contains("推荐")) {
                            t.item_ids.push(item_id_for(k));
                            if items_seen.insert(k.clone()) {
                                corpus.item_catalog.push(Item::new(item_id_for(k), k.clone()));
                            }
                        }
                    }
                    t
                })
                .collect();
            corpus.dialogues.push(Dialogue {
                dialogue_id: format!("{}-{li}", split_prefix(*split)),
                profile: UserProfile(profile),
                kb,
                turns,
            });
        }
    }
    corpus.extend_label_sets();
    Ok(corpus)
}

/// DuRecDial items are named entities; their ids must be token-safe.
fn item_id_for(name: &str) -> String {
    use sha2::{Digest, Sha256};
    let h = Sha256::digest(name.as_bytes());
    format!("d{}", hex::encode(&h[..6]))
}

fn load_movie_names(dir: &Path) -> Result<Vec<Item>> {
    let json = dir.join("movie_id_to_name.json");
    if json.is_file() {
        let raw = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let v: Value = serde_json::from_str(&raw)?;
        let mut items: Vec<Item> = v
            .as_object()
            .map(|m| {
                m.iter()
                    .map(|(k, v)| Item::new(k.clone(), v.as_str().unwrap_or(k).to_string()))
                    .collect()
            })
            .unwrap_or_default();
        items.sort_by(|a, b| a.id.cmp(&b.id));
        return Ok(items);
    }
    let csv = dir.join("movies_with_mentions.csv");
    if csv.is_file() {
        let raw = fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
        let mut seen = HashSet::new();
        return Ok(raw
            .lines()
            .skip(1)
            .filter_map(|l| {
                let mut cols = l.splitn(3, ',');
                let id = cols.next()?.trim().to_string();
                let name = cols.next()?.trim().trim_matches('"').to_string();
                (!id.is_empty() && seen.insert(id.clone())).then(|| Item::new(id, name))
            })
            .collect());
    }
    Ok(Vec::new())
}

pub fn load_tgredial(path: &Path) -> Result<Corpus> {
    let files = split_files(
        path,
        &[
            (Split::Train, &["train_data", "train"]),
            (Split::Dev, &["valid_data", "dev_data", "valid", "dev"]),
            (Split::Test, &["test_data", "test"]),
        ],
    )?;
    let mut corpus = Corpus {
        item_catalog: if path.is_dir() { load_movie_names(path)? } else { Vec::new() },
        ..Corpus::default()
    };
    for (split, file) in &files {
        for (ci, conv) in read_records(file)?.iter().enumerate() {
            let id = conv
                .get("conv_id")
                .map(|v| v.to_string().trim_matches('"').to_string())
                .unwrap_or_else(|| ci.to_string());
            let goal_path = conv.get("goal_path").and_then(Value::as_object);
            let messages = conv.get("messages").and_then(Value::as_array).cloned().unwrap_or_default();
            let turns = messages
                .iter()
                .enumerate()
                .map(|(mi, m)| {
                    let role = m.get("role").and_then(Value::as_str).unwrap_or("");
                    let speaker = if role.eq_ignore_ascii_case("recommender") || role.eq_ignore_ascii_case("system") {
                        Speaker::System
                    } else {
                        Speaker::User
                    };
                    let text = m
                        .get("text")
                        .map(|t| match t {
                            Value::Array(_) => str_list(Some(t)).join(""),
                            _ => t.as_str().unwrap_or("").to_string(),
                        })
                        .unwrap_or_default();
                    let mut t = Turn::new(speaker, text);
                    let local = m
                        .get("local_id")
                        .map(|v| v.to_string().trim_matches('"').to_string())
                        .unwrap_or_else(|| (mi + 1).to_string());
                    let path_entry = goal_path.and_then(|gp| gp.get(&local)).map(|v| str_list(Some(v)));
                    t.goals = str_list(first_of(m, &["action", "goal"]));
                    if t.goals.is_empty() {
                        if let Some(pe) = &path_entry {
                            t.goals = pe.get(1).cloned().into_iter().collect();
                        }
                    }
                    t.topics = str_list(first_of(m, &["topic", "target_topic"]));
                    if t.topics.is_empty() {
                        if let Some(pe) = &path_entry {
                            t.topics = pe.iter().skip(2).cloned().collect();
                        }
                    }
                    if speaker == Speaker::System {
                        t.item_ids = str_list(first_of(m, &["movie", "movies"]));
                    }
                    t
                })
                .collect();
            corpus.dialogues.push(Dialogue {
                dialogue_id: format!("{}-{id}", split_prefix(*split)),
                profile: UserProfile(str_list(first_of(conv, &["user_profile", "profile"]))),
                kb: Vec::new(),
                turns,
            });
        }
    }
    corpus.extend_label_sets();
    Ok(corpus)
}
