//! Input/target construction for the four tasks and parsing of generated
//! label sequences.
//!
//! Segment order per task (segments with empty content are omitted, the
//! prompt always comes last):
//!
//! ```text
//! G: [goal] g_1 [user] c_1 [goal] g_2 [system] c_2 ... Z_G
//! T: [profile] P [topic] k_1 [user] c_1 ... [goal] g_t Z_T
//! R: [profile] P [user] c_1 [system] c_2 ... [goal] g_t [topic] k_t Z_R
//! D: [user] c_1 [system] c_2 ... [goal] g_t [topic] k_t [item] v_t Z_D
//! ```
//!
//! Tokens are separated by single spaces. When the token budget is exceeded,
//! whole context turns are dropped oldest first; the profile, the trailing
//! task segments and the prompt are never cut.

use serde::{Deserialize, Serialize};

use crate::corpus::{Item, Task, Triple, TurnSample};
use crate::error::{Error, Result};
use crate::vocab::{self, item_token, TokenId, Vocabulary};

pub const NATURAL_PROMPTS: [&str; 4] = [
    "Plan the next goal:",
    "Predict the next topic:",
    "Recommend an item:",
    "Generate the response:",
];

const TOKEN_PROMPTS: [&str; 4] = [vocab::GOAL, vocab::TOPIC, vocab::ITEM, vocab::SYSTEM];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    NaturalLanguage,
    #[default]
    SpecialToken,
}

impl PromptStrategy {
    pub fn prompt(self, task: Task) -> &'static str {
        match self {
            PromptStrategy::NaturalLanguage => NATURAL_PROMPTS[task.index()],
            PromptStrategy::SpecialToken => TOKEN_PROMPTS[task.index()],
        }
    }
}

impl std::str::FromStr for PromptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural_language" | "natural" | "n" | "N" => Ok(PromptStrategy::NaturalLanguage),
            "special_token" | "special" | "s" | "S" => Ok(PromptStrategy::SpecialToken),
            other => Err(Error::Config(format!("unknown prompt strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LengthBudget {
    pub max_source: usize,
    pub max_target: usize,
    pub max_topic_context: usize,
}

impl Default for LengthBudget {
    fn default() -> Self {
        LengthBudget {
            max_source: 512,
            max_target: 100,
            max_topic_context: 256,
        }
    }
}

impl LengthBudget {
    pub fn validate(&self) -> Result<()> {
        if self.max_source == 0 || self.max_target == 0 || self.max_topic_context == 0 {
            return Err(Error::Config("length budgets must be positive".into()));
        }
        if self.max_topic_context > self.max_source {
            return Err(Error::Config("max_topic_context exceeds max_source".into()));
        }
        Ok(())
    }
}

/// Counts tokens of a serialized string.
pub trait TokenCount {
    fn count(&self, text: &str) -> usize;
}

impl TokenCount for Vocabulary {
    fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

/// One token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordCount;

impl TokenCount for WordCount {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Upstream labels conditioning tasks T, R and D. Empty fields drop their
/// segment from the input.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageValues {
    pub goals: Vec<String>,
    pub topics: Vec<String>,
    pub item: Option<Item>,
}

impl StageValues {
    /// Ground-truth conditioning used for training inputs.
    pub fn oracle(s: &TurnSample) -> Self {
        StageValues {
            goals: s.oracle_goals.clone(),
            topics: s.oracle_topics.clone(),
            item: s.oracle_items.first().cloned(),
        }
    }
}

pub fn join_labels(labels: &[String]) -> String {
    labels.join(&format!(" {} ", vocab::SEP))
}

pub fn render_item(item: &Item) -> String {
    format!("{} {}", item_token(&item.id), item.name)
}

fn segment(tag: &str, body: &str) -> Option<String> {
    let body = body.split_whitespace().collect::<Vec<_>>().join(" ");
    (!body.is_empty()).then(|| format!("{tag} {body}"))
}

fn speaker_tag(t: &crate::corpus::Turn) -> &'static str {
    match t.speaker {
        crate::corpus::Speaker::User => vocab::USER,
        crate::corpus::Speaker::System => vocab::SYSTEM,
    }
}

/// Knowledge triples whose head or tail equals one of `topics`, rendered as
/// `head relation tail` in kb order and cut at a triple boundary once
/// `max_tokens` would be exceeded.
pub fn expand_topic_context(topics: &[String], kb: &[Triple], max_tokens: usize, counter: &dyn TokenCount) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut used = 0;
    for tr in kb {
        if !topics.iter().any(|k| k == tr.head() || k == tr.tail()) {
            continue;
        }
        let rendered = format!("{} {} {}", tr.head(), tr.relation(), tr.tail());
        let n = counter.count(&rendered);
        if used + n > max_tokens {
            break;
        }
        used += n;
        out.push(rendered);
    }
    out.join(" ")
}

/// Builds `X ⊕ Z` for `task`. `upstream` conditions tasks T/R/D; training
/// passes [`StageValues::oracle`].
pub fn build_input(
    task: Task,
    sample: &TurnSample,
    strategy: PromptStrategy,
    budget: &LengthBudget,
    upstream: &StageValues,
    counter: &dyn TokenCount,
) -> Result<String> {
    let mut leading: Vec<String> = Vec::new();
    if matches!(task, Task::T | Task::R) {
        leading.extend(segment(vocab::PROFILE, &sample.profile.0.join(" ")));
    }

    let turns: Vec<String> = sample
        .context
        .iter()
        .map(|t| {
            let mut parts = Vec::new();
            match task {
                Task::G => parts.extend(segment(vocab::GOAL, &join_labels(&t.goals))),
                Task::T => parts.extend(segment(vocab::TOPIC, &join_labels(&t.topics))),
                Task::R | Task::D => {}
            }
            parts.push(segment(speaker_tag(t), &t.text).unwrap_or_else(|| speaker_tag(t).to_string()));
            parts.join(" ")
        })
        .collect();

    let mut trailing: Vec<String> = Vec::new();
    if task != Task::G {
        trailing.extend(segment(vocab::GOAL, &join_labels(&upstream.goals)));
    }
    if matches!(task, Task::R | Task::D) {
        let mut topic_text = join_labels(&upstream.topics);
        if task == Task::D && !sample.kb.is_empty() && !upstream.topics.is_empty() {
            let expanded = expand_topic_context(&upstream.topics, &sample.kb, budget.max_topic_context, counter);
            if !expanded.is_empty() {
                topic_text = expanded;
            }
        }
        trailing.extend(segment(vocab::TOPIC, &topic_text));
    }
    if task == Task::D {
        if let Some(item) = &upstream.item {
            trailing.extend(segment(vocab::ITEM, &render_item(item)));
        }
    }
    // The prompt reserves the length of the longer strategy's prompt, so both
    // strategies truncate the context identically.
    let prompt_reserve = [PromptStrategy::SpecialToken, PromptStrategy::NaturalLanguage]
        .iter()
        .map(|s| counter.count(s.prompt(task)))
        .max()
        .unwrap_or(0);
    let fixed: usize = leading.iter().chain(&trailing).map(|s| counter.count(s)).sum::<usize>() + prompt_reserve;
    trailing.push(strategy.prompt(task).to_string());
    if fixed > budget.max_source {
        return Err(Error::Budget(format!(
            "{fixed} protected tokens exceed max_source {}",
            budget.max_source
        )));
    }
    let counts: Vec<usize> = turns.iter().map(|s| counter.count(s)).collect();
    let mut first = 0;
    let mut total = fixed + counts.iter().sum::<usize>();
    while total > budget.max_source {
        total -= counts[first];
        first += 1;
    }

    let mut all = leading;
    all.extend(turns.into_iter().skip(first));
    all.extend(trailing);
    Ok(all.join(" "))
}

/// Target sequence `Y` for `task`.
pub fn build_target(task: Task, sample: &TurnSample) -> Result<String> {
    match task {
        Task::G => {
            if sample.oracle_goals.is_empty() {
                return Err(Error::Config("goal target needs at least one goal label".into()));
            }
            Ok(join_labels(&sample.oracle_goals))
        }
        Task::T => Ok(join_labels(&sample.oracle_topics)),
        Task::R => sample
            .oracle_items
            .first()
            .map(render_item)
            .ok_or(Error::MissingItem),
        Task::D => Ok(sample.reference.split_whitespace().collect::<Vec<_>>().join(" ")),
    }
}

/// Splits a generated label sequence on the separator, trimming and
/// deduplicating while keeping first occurrences.
pub fn parse_labels(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for part in text.split(vocab::SEP) {
        let label = part.split_whitespace().collect::<Vec<_>>().join(" ");
        if !label.is_empty() && !out.contains(&label) {
            out.push(label);
        }
    }
    out
}

pub fn parse_goal_output(text: &str) -> Vec<String> {
    parse_labels(text)
}

pub fn parse_topic_output(text: &str) -> Vec<String> {
    parse_labels(text)
}

/// `true` for every label outside `inventory`.
pub fn out_of_inventory(labels: &[String], inventory: &[String]) -> Vec<bool> {
    labels.iter().map(|l| !inventory.contains(l)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedPair {
    pub task: Task,
    pub input_text: String,
    pub target_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_ids: Vec<TokenId>,
}

impl SerializedPair {
    pub fn new(task: Task, input_text: String, target_text: String) -> Self {
        SerializedPair {
            task,
            input_text,
            target_text,
            input_ids: Vec::new(),
            target_ids: Vec::new(),
        }
    }

    /// Fills the id fields, truncating to the budget (the target keeps its
    /// first `max_target` tokens; inputs were already fitted by
    /// [`build_input`]).
    pub fn tokenize(&mut self, v: &Vocabulary, budget: &LengthBudget) {
        let mut inp = v.encode(&self.input_text);
        if inp.len() > budget.max_source {
            inp.drain(..inp.len() - budget.max_source);
        }
        let mut tgt = v.encode(&self.target_text);
        tgt.truncate(budget.max_target);
        self.input_ids = inp;
        self.target_ids = tgt;
    }
}

/// Serializes every example of `examples` under oracle conditioning.
pub fn serialize_examples(
    examples: &[crate::corpus::TaskExample],
    strategy: PromptStrategy,
    budget: &LengthBudget,
    counter: &dyn TokenCount,
) -> Result<Vec<SerializedPair>> {
    examples
        .iter()
        .map(|ex| {
            let input = build_input(ex.task, &ex.sample, strategy, budget, &StageValues::oracle(&ex.sample), counter)?;
            Ok(SerializedPair::new(ex.task, input, ex.target_text.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Turn, UserProfile};

    fn turn(sp: Speaker, text: &str, goal: &str, topic: &str) -> Turn {
        let mut t = Turn::new(sp, text);
        if !goal.is_empty() {
            t.goals.push(goal.into());
        }
        if !topic.is_empty() {
            t.topics.push(topic.into());
        }
        t
    }

    fn sample(context: Vec<Turn>) -> TurnSample {
        TurnSample {
            dialogue_id: "d".into(),
            turn_index: context.len(),
            context,
            profile: UserProfile::default(),
            kb: vec![],
            oracle_goals: vec!["g2".into()],
            oracle_topics: vec!["k2".into()],
            oracle_items: vec![],
            reference: "fine thanks".into(),
        }
    }

    fn input(task: Task, s: &TurnSample, strat: PromptStrategy, up: &StageValues) -> String {
        build_input(task, s, strat, &LengthBudget::default(), up, &WordCount).unwrap()
    }

    #[test]
    fn goal_input_special_token() {
        let s = sample(vec![turn(Speaker::User, "u1", "g1", "")]);
        assert_eq!(
            input(Task::G, &s, PromptStrategy::SpecialToken, &StageValues::oracle(&s)),
            "[goal] g1 [user] u1 [goal]"
        );
    }

    #[test]
    fn response_input_omits_missing_item() {
        let s = sample(vec![turn(Speaker::User, "u1", "g1", "k1")]);
        let x = input(Task::D, &s, PromptStrategy::SpecialToken, &StageValues::oracle(&s));
        assert_eq!(x, "[user] u1 [goal] g2 [topic] k2 [system]");
        assert!(!x.contains("[item]"));
    }

    #[test]
    fn topic_input_with_profile_natural_prompt() {
        let mut s = sample(vec![turn(Speaker::User, "u1", "g1", "k1")]);
        s.profile = UserProfile(vec!["e1".into(), "e2".into()]);
        let x = input(Task::T, &s, PromptStrategy::NaturalLanguage, &StageValues::oracle(&s));
        assert!(x.starts_with("[profile] e1 e2 [topic] "), "{x}");
        assert!(x.ends_with("Predict the next topic:"));
    }

    #[test]
    fn strategies_differ_only_in_prompt() {
        let s = sample(vec![turn(Speaker::User, "u1", "g1", "k1"), turn(Speaker::System, "s1", "g1", "k1")]);
        for task in Task::ALL {
            let up = StageValues::oracle(&s);
            let a = input(task, &s, PromptStrategy::SpecialToken, &up);
            let b = input(task, &s, PromptStrategy::NaturalLanguage, &up);
            let a = a.strip_suffix(PromptStrategy::SpecialToken.prompt(task)).unwrap();
            let b = b.strip_suffix(PromptStrategy::NaturalLanguage.prompt(task)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn targets() {
        let mut s = sample(vec![]);
        s.oracle_topics = vec!["Love".into(), "Starry Sky".into()];
        assert_eq!(build_target(Task::T, &s).unwrap(), "Love </k> Starry Sky");
        s.oracle_topics.clear();
        assert_eq!(build_target(Task::T, &s).unwrap(), "");
        assert!(matches!(build_target(Task::R, &s), Err(Error::MissingItem)));
        s.oracle_items.push(Item::new("100", "The Witness"));
        assert_eq!(build_target(Task::R, &s).unwrap(), "_100_ The Witness");
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_topic_output("Love </k> Starry Sky"), vec!["Love", "Starry Sky"]);
        assert!(parse_topic_output("").is_empty());
        assert_eq!(parse_topic_output("A </k> A </k> B"), vec!["A", "B"]);
        assert_eq!(out_of_inventory(&["A".into(), "Z".into()], &["A".into()]), vec![false, true]);
    }

    #[test]
    fn topic_context_expansion() {
        let kb = vec![Triple::new("T1", "genre", "comedy")];
        assert_eq!(expand_topic_context(&["T1".into()], &kb, 256, &WordCount), "T1 genre comedy");
        assert_eq!(expand_topic_context(&[], &kb, 256, &WordCount), "");
        let many: Vec<Triple> = (0..50).map(|i| Triple::new("T1", "rel", format!("tail {i} x y z w"))).collect();
        let out = expand_topic_context(&["T1".into()], &many, 256, &WordCount);
        // Greedy whole-triple prefix oracle.
        let mut fit = 0;
        let mut used = 0;
        for tr in &many {
            let n = format!("{} {} {}", tr.head(), tr.relation(), tr.tail()).split_whitespace().count();
            if used + n > 256 {
                break;
            }
            used += n;
            fit += 1;
        }
        assert!(fit < many.len());
        assert_eq!(out.split_whitespace().count(), used);
        assert!(out.ends_with(&format!("tail {} x y z w", fit - 1)));
    }

    #[test]
    fn truncation_drops_oldest_turns_only() {
        let ctx: Vec<Turn> = (0..10)
            .map(|i| turn(if i % 2 == 0 { Speaker::User } else { Speaker::System }, &format!("w{i} a b"), "g", "k"))
            .collect();
        let s = sample(ctx);
        let budget = LengthBudget {
            max_source: 20,
            max_target: 5,
            max_topic_context: 5,
        };
        let x = build_input(Task::D, &s, PromptStrategy::SpecialToken, &budget, &StageValues::oracle(&s), &WordCount).unwrap();
        assert!(WordCount.count(&x) <= 20);
        assert!(x.ends_with("[goal] g2 [topic] k2 [system]"));
        assert!(x.contains("w9") && !x.contains("w0"));
        let tiny = LengthBudget {
            max_source: 2,
            ..budget
        };
        assert!(matches!(
            build_input(Task::D, &s, PromptStrategy::SpecialToken, &tiny, &StageValues::oracle(&s), &WordCount),
            Err(Error::Budget(_))
        ));
    }
}
