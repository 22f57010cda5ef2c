use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Corpus, Speaker};
use crate::vocab::SPECIAL_TOKENS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateDialogueId,
    UnknownGoal,
    UnknownTopic,
    UnknownItem,
    EmptyTripleSlot,
    ConsecutiveSpeaker,
    SpecialTokenLiteral,
    DuplicateLabel,
    InvalidItemId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub dialogue_id: Option<String>,
    pub turn_index: Option<usize>,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub dialogues: usize,
    pub utterances: usize,
    pub goals: usize,
    pub topics: usize,
    pub items: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub summary: CorpusSummary,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn special_literal(s: &str) -> Option<&'static str> {
    SPECIAL_TOKENS.iter().copied().find(|tok| s.contains(tok))
}

/// Checks every corpus invariant; violations are collected, never raised.
pub fn validate_corpus(c: &Corpus) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |d: Option<&str>, t: Option<usize>, kind, detail: String| {
        out.push(Violation {
            dialogue_id: d.map(str::to_string),
            turn_index: t,
            kind,
            detail,
        })
    };

    for (name, labels) in [("goal", &c.goal_set), ("topic", &c.topic_set)] {
        let mut seen = HashSet::new();
        for l in labels {
            if !seen.insert(l.as_str()) {
                push(None, None, ViolationKind::DuplicateLabel, format!("duplicate {name} label `{l}`"));
            }
        }
    }
    let mut seen_items = HashSet::new();
    for it in &c.item_catalog {
        if !seen_items.insert(it.id.as_str()) {
            push(None, None, ViolationKind::DuplicateLabel, format!("duplicate item id `{}`", it.id));
        }
        if it.id.is_empty() || it.id.contains('_') || it.id.chars().any(char::is_whitespace) {
            push(None, None, ViolationKind::InvalidItemId, format!("item id `{}` is not token-safe", it.id));
        }
        if let Some(tok) = special_literal(&it.name) {
            push(None, None, ViolationKind::SpecialTokenLiteral, format!("item `{}` name contains `{tok}`", it.id));
        }
    }

    let goals: HashSet<&str> = c.goal_set.iter().map(String::as_str).collect();
    let topics: HashSet<&str> = c.topic_set.iter().map(String::as_str).collect();
    let mut ids = HashSet::new();
    let mut utterances = 0;

    for d in &c.dialogues {
        let did = Some(d.dialogue_id.as_str());
        if !ids.insert(d.dialogue_id.as_str()) {
            push(did, None, ViolationKind::DuplicateDialogueId, d.dialogue_id.clone());
        }
        for e in &d.profile.0 {
            if let Some(tok) = special_literal(e) {
                push(did, None, ViolationKind::SpecialTokenLiteral, format!("profile entry contains `{tok}`"));
            }
        }
        for tr in &d.kb {
            if tr.head().trim().is_empty() || tr.tail().trim().is_empty() {
                push(did, None, ViolationKind::EmptyTripleSlot, format!("{tr:?}"));
            }
        }
        let mut prev: Option<Speaker> = None;
        for (ti, t) in d.turns.iter().enumerate() {
            utterances += 1;
            let at = Some(ti);
            if prev == Some(t.speaker) {
                push(did, at, ViolationKind::ConsecutiveSpeaker, format!("two consecutive {} turns", t.speaker.as_str()));
            }
            prev = Some(t.speaker);
            if let Some(tok) = special_literal(&t.text) {
                push(did, at, ViolationKind::SpecialTokenLiteral, format!("text contains `{tok}`"));
            }
            for g in t.goals.iter().filter(|g| !goals.contains(g.as_str())) {
                push(did, at, ViolationKind::UnknownGoal, g.clone());
            }
            for k in t.topics.iter().filter(|k| !topics.contains(k.as_str())) {
                push(did, at, ViolationKind::UnknownTopic, k.clone());
            }
            for i in t.item_ids.iter().filter(|i| !seen_items.contains(i.as_str())) {
                push(did, at, ViolationKind::UnknownItem, i.clone());
            }
        }
    }

    ValidationReport {
        violations: out,
        summary: CorpusSummary {
            dialogues: c.dialogues.len(),
            utterances,
            goals: c.goal_set.len(),
            topics: c.topic_set.len(),
            items: c.item_catalog.len(),
        },
    }
}
