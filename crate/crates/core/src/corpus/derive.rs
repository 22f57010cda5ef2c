use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, Item, Speaker, Triple, Turn, UserProfile};
use crate::error::Error;
use crate::serialize::build_target;

/// The four sub-tasks: goal planning, topic prediction, item recommendation,
/// response generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    G,
    T,
    R,
    D,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::G, Task::T, Task::R, Task::D];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::G => "G",
            Task::T => "T",
            Task::R => "R",
            Task::D => "D",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_uppercase().as_str() {
            "G" | "GOAL" => Ok(Task::G),
            "T" | "TOPIC" => Ok(Task::T),
            "R" | "ITEM" => Ok(Task::R),
            "D" | "RESPONSE" => Ok(Task::D),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Everything known about one system turn: the context before it and the
/// turn's own annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context: Vec<Turn>,
    pub profile: UserProfile,
    pub kb: Vec<Triple>,
    pub oracle_goals: Vec<String>,
    pub oracle_topics: Vec<String>,
    pub oracle_items: Vec<Item>,
    pub reference: String,
}

impl TurnSample {
    fn from_dialogue(d: &Dialogue, t: usize, catalog: &[Item]) -> Self {
        let turn = &d.turns[t];
        let oracle_items = turn
            .item_ids
            .iter()
            .map(|id| {
                catalog
                    .iter()
                    .find(|it| &it.id == id)
                    .cloned()
                    .unwrap_or_else(|| Item::new(id.clone(), id.clone()))
            })
            .collect();
        TurnSample {
            dialogue_id: d.dialogue_id.clone(),
            turn_index: t,
            context: d.turns[..t].to_vec(),
            profile: d.profile.clone(),
            kb: d.kb.clone(),
            oracle_goals: turn.goals.clone(),
            oracle_topics: turn.topics.clone(),
            oracle_items,
            reference: turn.text.clone(),
        }
    }

    /// Goal annotations of the context turns (G_t).
    pub fn goal_history(&self) -> impl Iterator<Item = &[String]> {
        self.context.iter().map(|t| t.goals.as_slice())
    }

    /// Topic annotations of the context turns (K_t).
    pub fn topic_history(&self) -> impl Iterator<Item = &[String]> {
        self.context.iter().map(|t| t.topics.as_slice())
    }

    /// Multi-goal labels joined by the label separator.
    pub fn oracle_goal(&self) -> String {
        crate::serialize::join_labels(&self.oracle_goals)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: Task,
    #[serde(flatten)]
    pub sample: TurnSample,
    pub target_text: String,
}

fn system_turns(d: &Dialogue) -> impl Iterator<Item = usize> + '_ {
    d.turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.speaker == Speaker::System)
        .map(|(i, _)| i)
}

/// One sample per system turn, in corpus order.
pub fn derive_turns(c: &Corpus) -> Vec<TurnSample> {
    c.dialogues
        .iter()
        .flat_map(|d| system_turns(d).map(move |t| TurnSample::from_dialogue(d, t, &c.item_catalog)))
        .collect()
}

/// One example per system turn for `task`. Task R only covers turns that
/// mention an item; G needs a goal annotation and D a non-empty response.
pub fn derive_examples(c: &Corpus, task: Task) -> Vec<TaskExample> {
    let mut out = Vec::new();
    for d in &c.dialogues {
        for t in system_turns(d) {
            let turn = &d.turns[t];
            let applicable = match task {
                Task::G => !turn.goals.is_empty(),
                Task::T => true,
                Task::R => !turn.item_ids.is_empty(),
                Task::D => !turn.text.trim().is_empty(),
            };
            if !applicable {
                continue;
            }
            let sample = TurnSample::from_dialogue(d, t, &c.item_catalog);
            let target_text = build_target(task, &sample).expect("applicability checked above");
            out.push(TaskExample {
                task,
                sample,
                target_text,
            });
        }
    }
    out
}
