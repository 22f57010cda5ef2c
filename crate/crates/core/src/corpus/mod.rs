//! Canonical data model for multi-goal recommendation dialogues.
//!
//! A [`Corpus`] is a list of annotated [`Dialogue`]s plus the label
//! inventories (goals, topics, item catalog). Native dataset layouts are
//! normalized into this model by the adapters in [`adapters`]; the
//! canonical on-disk form is one dialogue per JSONL line.

pub mod adapters;
mod derive;
mod io;
pub mod synth;
mod validate;

use serde::{Deserialize, Serialize};

pub use derive::{derive_examples, derive_turns, Task, TaskExample, TurnSample};
pub use io::{corpus_digest, load_corpus, save_corpus, CorpusFormat};
pub use synth::{generate_synthetic, SynthConfig};
pub use validate::{validate_corpus, CorpusSummary, ValidationReport, Violation, ViolationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::System => "system",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub goals: Vec<String>,
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default)]
    pub item_ids: Vec<String>,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Turn {
            speaker,
            text: text.into(),
            goals: Vec::new(),
            topics: Vec::new(),
            item_ids: Vec::new(),
        }
    }
}

/// Historical interactions and personal-knowledge statements of the user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserProfile(pub Vec<String>);

impl UserProfile {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A `(head, relation, tail)` knowledge triple; serialized as a 3-array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple(pub String, pub String, pub String);

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Triple(head.into(), relation.into(), tail.into())
    }

    pub fn head(&self) -> &str {
        &self.0
    }

    pub fn relation(&self) -> &str {
        &self.1
    }

    pub fn tail(&self) -> &str {
        &self.2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    #[serde(default)]
    pub profile: UserProfile,
    #[serde(default)]
    pub kb: Vec<Triple>,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub name: String,
}

impl Item {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Item {
            id: id.into(),
            name: name.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub goal_set: Vec<String>,
    pub topic_set: Vec<String>,
    pub item_catalog: Vec<Item>,
    pub split: Split,
}

impl Corpus {
    pub fn item(&self, id: &str) -> Option<&Item> {
        self.item_catalog.iter().find(|it| it.id == id)
    }

    pub fn system_turn_count(&self) -> usize {
        self.dialogues
            .iter()
            .flat_map(|d| &d.turns)
            .filter(|t| t.speaker == Speaker::System)
            .count()
    }

    /// Fills the label inventories from the annotations present in the
    /// dialogues, appending unseen labels in order of first appearance.
    /// Items absent from the catalog get their id as surface name.
    pub fn extend_label_sets(&mut self) {
        let mut goals: Vec<String> = std::mem::take(&mut self.goal_set);
        let mut topics: Vec<String> = std::mem::take(&mut self.topic_set);
        let mut items: Vec<Item> = std::mem::take(&mut self.item_catalog);
        let mut seen_g: std::collections::HashSet<String> = goals.iter().cloned().collect();
        let mut seen_t: std::collections::HashSet<String> = topics.iter().cloned().collect();
        let mut seen_i: std::collections::HashSet<String> = items.iter().map(|i| i.id.clone()).collect();
        for turn in self.dialogues.iter().flat_map(|d| &d.turns) {
            for g in &turn.goals {
                if seen_g.insert(g.clone()) {
                    goals.push(g.clone());
                }
            }
            for t in &turn.topics {
                if seen_t.insert(t.clone()) {
                    topics.push(t.clone());
                }
            }
            for i in &turn.item_ids {
                if seen_i.insert(i.clone()) {
                    items.push(Item::new(i.clone(), i.clone()));
                }
            }
        }
        self.goal_set = goals;
        self.topic_set = topics;
        self.item_catalog = items;
    }

    /// Splits off the last `n_test` dialogues as a held-out corpus sharing the
    /// same label inventories.
    pub fn split_tail(mut self, n_test: usize) -> (Corpus, Corpus) {
        let cut = self.dialogues.len().saturating_sub(n_test);
        let tail = self.dialogues.split_off(cut);
        let test = Corpus {
            dialogues: tail,
            goal_set: self.goal_set.clone(),
            topic_set: self.topic_set.clone(),
            item_catalog: self.item_catalog.clone(),
            split: Split::Test,
        };
        self.split = Split::Train;
        (self, test)
    }
}
