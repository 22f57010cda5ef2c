//! Deterministic synthetic corpora whose annotations are learnable by
//! construction.
//!
//! Each user turn reacts to the goal it answers, carries one of three intents
//! and mentions a topic. The next system goal is a fixed function of
//! (previous goal, intent), both readable from the user turn; the system
//! topics are a fixed function of (goal, mentioned topic); the recommended
//! item is a fixed function of the topic list; the system utterance is a
//! goal template over (topics, item) that states knowledge facts about the
//! topics. The facts are drawn per dialogue and stored in its knowledge
//! base, so they can only be recovered from the topic-expanded knowledge.
//! The first "previous goal" is drawn from the stationary distribution of
//! the goal chain so every system turn has the stationary goal marginal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use super::{Corpus, Dialogue, Item, Speaker, Split, Triple, Turn, UserProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_dialogues: usize,
    pub n_goals: usize,
    pub n_topics: usize,
    pub n_items: usize,
    pub turns_per_dialogue: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dialogues: 2000,
            n_goals: 6,
            n_topics: 50,
            n_items: 200,
            turns_per_dialogue: 8,
        }
    }
}

const GOAL_NAMES: [&str; 8] = [
    "Greeting",
    "Chit-chat",
    "Question answering",
    "Movie recommendation",
    "Music recommendation",
    "Farewell",
    "Weather talk",
    "Food recommendation",
];

const TOPIC_WORDS: [&str; 50] = [
    "jazz", "comedy", "horror", "travel", "football", "cooking", "poetry", "history", "science",
    "painting", "chess", "hiking", "opera", "anime", "baseball", "fashion", "gardening",
    "photography", "dance", "robotics", "astronomy", "cycling", "swimming", "theater", "romance",
    "mystery", "fantasy", "documentary", "wildlife", "architecture", "sculpture", "tennis",
    "skiing", "coffee", "tea", "wine", "baking", "yoga", "surfing", "camping", "magic", "comics",
    "sailing", "karate", "violin", "piano", "guitar", "drums", "rap", "blues",
];

const DESCRIPTORS: [&str; 10] = [
    "relaxing", "exciting", "classic", "timeless", "fun", "inspiring", "elegant", "thrilling",
    "calm", "bold",
];

const PLACES: [&str; 10] = [
    "paris", "tokyo", "brazil", "egypt", "canada", "india", "norway", "mexico", "kenya", "peru",
];

/// Relations of the per-dialogue knowledge facts.
pub const REL_FEELS: &str = "feels";
pub const REL_ORIGIN: &str = "comes from";

const ITEM_ADJ: [&str; 20] = [
    "Silent", "Golden", "Hidden", "Broken", "Crimson", "Distant", "Electric", "Frozen", "Gentle",
    "Hollow", "Iron", "Lonely", "Midnight", "Northern", "Paper", "Quiet", "Rising", "Scarlet",
    "Wild", "Velvet",
];

const ITEM_NOUN: [&str; 10] = [
    "River", "Empire", "Garden", "Witness", "Horizon", "Station", "Mirror", "Harbor", "Forest",
    "Signal",
];

/// User intents; each one selects a deterministic goal transition.
pub const INTENTS: [&str; 3] = [
    "tell me more about",
    "ok , what comes next ? maybe",
    "let us try something different like",
];

/// Opening words of a user turn answering a turn with goal `i`.
fn reaction(i: usize) -> &'static str {
    match goal_name(i).as_str() {
        "Greeting" => "hi ,",
        "Chit-chat" => "haha ,",
        "Question answering" => "i see ,",
        "Movie recommendation" => "nice film ,",
        "Music recommendation" => "nice song ,",
        "Farewell" => "bye ,",
        "Weather talk" => "so sunny ,",
        "Food recommendation" => "sounds tasty ,",
        _ => "ok ,",
    }
}

pub fn goal_name(i: usize) -> String {
    GOAL_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("Goal {i}"))
}

pub fn topic_name(i: usize) -> String {
    TOPIC_WORDS
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("topic{i}"))
}

pub fn item_name(i: usize) -> String {
    let base = format!("{} {}", ITEM_ADJ[i % 20], ITEM_NOUN[(i / 20) % 10]);
    if i < 200 {
        base
    } else {
        format!("{base} {}", i / 200)
    }
}

pub fn is_recommendation_goal(i: usize) -> bool {
    goal_name(i).to_lowercase().contains("recommendation")
}

fn is_topicless_goal(i: usize) -> bool {
    matches!(goal_name(i).as_str(), "Greeting" | "Farewell")
}

impl SynthConfig {
    /// Next goal given the previous goal and the user intent.
    pub fn goal_transition(&self, prev: usize, intent: usize) -> usize {
        let n = self.n_goals;
        match intent {
            0 => prev,
            1 => (prev + 1) % n,
            _ => (3 * prev + 2) % n,
        }
    }

    /// System topics for `goal` after the user mentioned topic `mention`.
    pub fn topics_for(&self, goal: usize, mention: usize) -> Vec<usize> {
        let nt = self.n_topics;
        if is_topicless_goal(goal) {
            return Vec::new();
        }
        let first = (mention * 7 + 3 + 5 * goal) % nt;
        if !is_recommendation_goal(goal) {
            return vec![first];
        }
        let second = (mention * 11 + 1 + 5 * goal) % nt;
        if second == first {
            vec![first]
        } else {
            vec![first, second]
        }
    }

    pub fn item_for(&self, topics: &[usize]) -> usize {
        let a = topics.first().copied().unwrap_or(0);
        let b = topics.get(1).copied().unwrap_or(a);
        (a * 31 + b * 17) % self.n_items
    }

    /// Stationary distribution of the goal chain under uniform intents,
    /// solved as a dense linear system.
    pub fn stationary_goal_distribution(&self) -> Vec<f64> {
        let n = self.n_goals;
        let mut p = vec![vec![0.0; n]; n];
        for (g, row) in p.iter_mut().enumerate() {
            for intent in 0..INTENTS.len() {
                row[self.goal_transition(g, intent)] += 1.0 / INTENTS.len() as f64;
            }
        }
        // (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1.
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = p[j][i] - if i == j { 1.0 } else { 0.0 };
            }
        }
        for j in 0..n {
            a[n - 1][j] = 1.0;
        }
        a[n - 1][n] = 1.0;
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, piv);
            let d = a[col][col];
            for v in a[col].iter_mut() {
                *v /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    if f != 0.0 {
                        for c in 0..=n {
                            a[r][c] -= f * a[col][c];
                        }
                    }
                }
            }
        }
        a.iter().map(|row| row[n]).collect()
    }
}

/// Per-dialogue knowledge about one topic.
#[derive(Debug, Clone, Copy)]
struct Facts {
    adj: &'static str,
    place: &'static str,
}

fn render_response(goal: usize, topics: &[usize], item: Option<usize>, facts: &dyn Fn(usize) -> Facts) -> String {
    let x = topics.first().map(|&t| topic_name(t)).unwrap_or_default();
    let y = topics.get(1).map(|&t| topic_name(t)).unwrap_or_else(|| x.clone());
    let fx = topics.first().map(|&t| facts(t));
    let fy = topics.get(1).map(|&t| facts(t)).or(fx);
    let adj = |f: Option<Facts>| f.map(|f| f.adj).unwrap_or_default();
    let place = |f: Option<Facts>| f.map(|f| f.place).unwrap_or_default();
    let name = item.map(item_name).unwrap_or_default();
    match goal_name(goal).as_str() {
        "Greeting" => "hello , welcome back ! what would you like to talk about ?".to_string(),
        "Farewell" => "goodbye , have a nice day !".to_string(),
        "Chit-chat" => format!("oh , {x} is so {} , and it comes from {} .", adj(fx), place(fx)),
        "Question answering" => format!("well , {x} comes from {} and people find it {} .", place(fx), adj(fx)),
        "Weather talk" => format!("sunny days feel {} , like {x} from {} .", adj(fx), place(fx)),
        "Movie recommendation" => format!(
            "you like {x} and {y} , so watch {name} , it is {} like {x} from {} .",
            adj(fx),
            place(fy)
        ),
        "Music recommendation" => format!(
            "you like {x} and {y} , so listen to {name} , it is {} like {y} from {} .",
            adj(fy),
            place(fx)
        ),
        "Food recommendation" => format!(
            "you like {x} and {y} , so try {name} , it is {} and from {} .",
            adj(fy),
            place(fy)
        ),
        _ if item.is_some() => format!("you like {x} , so check out {name} , it is {} .", adj(fx)),
        _ => format!("let us talk about {x} , it is {} .", adj(fx)),
    }
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Generates a corpus deterministically from `(seed, cfg)`.
pub fn generate_synthetic(seed: u64, cfg: &SynthConfig) -> Corpus {
    assert!(
        cfg.n_dialogues >= 1 && cfg.n_goals >= 1 && cfg.n_topics >= 1 && cfg.n_items >= 1 && cfg.turns_per_dialogue >= 1,
        "all synthetic counts must be at least 1"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stationary = cfg.stationary_goal_distribution();
    let goal_set: Vec<String> = (0..cfg.n_goals).map(goal_name).collect();
    let topic_set: Vec<String> = (0..cfg.n_topics).map(topic_name).collect();
    let item_catalog: Vec<Item> = (0..cfg.n_items)
        .map(|i| Item::new((100 + i).to_string(), item_name(i)))
        .collect();

    let mut dialogues = Vec::with_capacity(cfg.n_dialogues);
    for di in 0..cfg.n_dialogues {
        let n_profile = rng.gen_range(0..3usize);
        let profile = UserProfile(
            (0..n_profile)
                .map(|_| format!("i like {}", topic_name(rng.gen_range(0..cfg.n_topics))))
                .collect(),
        );
        let mut goal = sample_index(&mut rng, &stationary);
        let mut facts: BTreeMap<usize, Facts> = BTreeMap::new();
        let mut kb = Vec::new();
        let mut turns = Vec::with_capacity(cfg.turns_per_dialogue);
        let mut mention = 0;
        let mut intent = 0;
        for ti in 0..cfg.turns_per_dialogue {
            if ti % 2 == 0 {
                intent = rng.gen_range(0..INTENTS.len());
                mention = rng.gen_range(0..cfg.n_topics);
                let mut t = Turn::new(
                    Speaker::User,
                    format!("{} {} {}", reaction(goal), INTENTS[intent], topic_name(mention)),
                );
                t.goals.push(goal_name(goal));
                t.topics.push(topic_name(mention));
                turns.push(t);
            } else {
                goal = cfg.goal_transition(goal, intent);
                let topics = cfg.topics_for(goal, mention);
                let item = is_recommendation_goal(goal).then(|| cfg.item_for(&topics));
                for &k in &topics {
                    facts.entry(k).or_insert_with(|| {
                        let f = Facts {
                            adj: DESCRIPTORS[rng.gen_range(0..DESCRIPTORS.len())],
                            place: PLACES[rng.gen_range(0..PLACES.len())],
                        };
                        kb.push(Triple::new(topic_name(k), REL_FEELS, f.adj));
                        kb.push(Triple::new(topic_name(k), REL_ORIGIN, f.place));
                        f
                    });
                }
                let text = render_response(goal, &topics, item, &|k| facts[&k]);
                let mut t = Turn::new(Speaker::System, text);
                t.goals.push(goal_name(goal));
                t.topics = topics.iter().map(|&k| topic_name(k)).collect();
                t.item_ids = item.map(|i| (100 + i).to_string()).into_iter().collect();
                turns.push(t);
            }
        }
        dialogues.push(Dialogue {
            dialogue_id: format!("synth-{seed}-{di:05}"),
            profile,
            kb,
            turns,
        });
    }

    Corpus {
        dialogues,
        goal_set,
        topic_set,
        item_catalog,
        split: Split::Train,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_item_catalog_forces_item() {
        let cfg = SynthConfig {
            n_dialogues: 30,
            n_items: 1,
            ..SynthConfig::default()
        };
        let c = generate_synthetic(3, &cfg);
        let ex = crate::corpus::derive_examples(&c, crate::corpus::Task::R);
        assert!(!ex.is_empty());
        assert!(ex.iter().all(|e| e.sample.oracle_items[0].id == "100"));
    }

    #[test]
    fn stationary_is_a_distribution_and_fixed_point() {
        let cfg = SynthConfig::default();
        let pi = cfg.stationary_goal_distribution();
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut next = vec![0.0; cfg.n_goals];
        for (g, &p) in pi.iter().enumerate() {
            for intent in 0..3 {
                next[cfg.goal_transition(g, intent)] += p / 3.0;
            }
        }
        for (a, b) in pi.iter().zip(&next) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn response_facts_come_from_the_dialogue_knowledge() {
        let c = generate_synthetic(3, &SynthConfig { n_dialogues: 30, ..SynthConfig::default() });
        let mut facts_seen = 0;
        for d in &c.dialogues {
            for t in d.turns.iter().filter(|t| t.speaker == Speaker::System) {
                for w in t.text.split_whitespace() {
                    if !DESCRIPTORS.contains(&w) && !PLACES.contains(&w) {
                        continue;
                    }
                    facts_seen += 1;
                    assert!(
                        d.kb.iter().any(|k| k.tail() == w && t.topics.iter().any(|x| x == k.head())),
                        "{w} in {:?}",
                        t.text
                    );
                }
            }
            for k in &d.kb {
                assert_eq!(d.kb.iter().filter(|o| o.head() == k.head()).count(), 2);
            }
        }
        assert!(facts_seen > 0);
    }

    #[test]
    fn item_names_unique() {
        let names: std::collections::HashSet<_> = (0..400).map(item_name).collect();
        assert_eq!(names.len(), 400);
    }
}
