//! Input/target serialization against checked-in goldens for a 50-turn
//! fixture corpus, plus template and truncation properties.
//!
//! Set `MGCRS_BLESS=1` to rewrite the golden files after an intended format
//! change.

#[path = "support/goldens.rs"]
mod goldens;

use std::fs;
use std::time::Instant;

use goldens::{check_goldens, fixture, golden_path, render, BUDGET, STRATEGIES};

use mgcrs_core::corpus::*;
use mgcrs_core::serialize::*;
use mgcrs_core::vocab;
use regex::Regex;

#[test]
fn fixture_is_fifty_clean_turns() {
    let c = fixture();
    assert_eq!(c.dialogues.iter().map(|d| d.turns.len()).sum::<usize>(), 50);
    assert!(validate_corpus(&c).is_clean(), "{:?}", validate_corpus(&c).violations);
}

#[test]
fn outputs_match_goldens() {
    let start = Instant::now();
    if std::env::var_os("MGCRS_BLESS").is_some() {
        let c = fixture();
        for (strategy, name) in STRATEGIES {
            for task in Task::ALL {
                fs::write(golden_path(name, task), render(task, strategy, &c)).unwrap();
            }
        }
        return;
    }
    assert_eq!(check_goldens().unwrap(), 8);
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

/// Segment-token skeleton of an input with its prompt removed: `p` profile,
/// `s` speaker, `g` goal, `t` topic, `i` item.
fn skeleton(input: &str, strategy: PromptStrategy, task: Task) -> String {
    let body = input.strip_suffix(strategy.prompt(task)).expect("prompt is last");
    body.split_whitespace()
        .filter_map(|w| match w {
            vocab::PROFILE => Some('p'),
            vocab::USER | vocab::SYSTEM => Some('s'),
            vocab::GOAL => Some('g'),
            vocab::TOPIC => Some('t'),
            vocab::ITEM => Some('i'),
            _ => None,
        })
        .collect()
}

#[test]
fn segment_order_follows_the_templates() {
    let c = fixture();
    let patterns = [
        (Task::G, r"^(g?s)*$"),
        (Task::T, r"^p?(t?s)*g$"),
        (Task::R, r"^p?s*gt$"),
        (Task::D, r"^s*g(ti?)?$"),
    ];
    for (strategy, _) in STRATEGIES {
        for (task, pattern) in patterns {
            let re = Regex::new(pattern).unwrap();
            for ex in derive_examples(&c, task) {
                let input =
                    build_input(task, &ex.sample, strategy, &BUDGET, &StageValues::oracle(&ex.sample), &WordCount).unwrap();
                let sk = skeleton(&input, strategy, task);
                assert!(re.is_match(&sk), "{task} {sk:?} from {input:?}");
            }
        }
    }
}

#[test]
fn strategies_differ_only_in_the_prompt() {
    let c = fixture();
    for task in Task::ALL {
        for ex in derive_examples(&c, task) {
            let up = StageValues::oracle(&ex.sample);
            let s = build_input(task, &ex.sample, PromptStrategy::SpecialToken, &BUDGET, &up, &WordCount).unwrap();
            let n = build_input(task, &ex.sample, PromptStrategy::NaturalLanguage, &BUDGET, &up, &WordCount).unwrap();
            assert_eq!(
                s.strip_suffix(PromptStrategy::SpecialToken.prompt(task)),
                n.strip_suffix(PromptStrategy::NaturalLanguage.prompt(task))
            );
        }
    }
}

#[test]
fn truncation_keeps_the_budget_and_the_trailing_segments() {
    let c = fixture();
    let mut truncated = 0;
    for task in Task::ALL {
        for ex in derive_examples(&c, task) {
            let up = StageValues::oracle(&ex.sample);
            let wide = LengthBudget {
                max_source: 100_000,
                ..BUDGET
            };
            let full = build_input(task, &ex.sample, PromptStrategy::SpecialToken, &wide, &up, &WordCount).unwrap();
            let cut = build_input(task, &ex.sample, PromptStrategy::SpecialToken, &BUDGET, &up, &WordCount).unwrap();
            assert!(WordCount.count(&cut) <= BUDGET.max_source);
            if cut != full {
                truncated += 1;
                let speaker = |x: &str| x.find(vocab::USER).into_iter().chain(x.find(vocab::SYSTEM)).min().unwrap();
                // Everything after the first kept turn is a suffix of the full input.
                assert!(full.ends_with(&cut[speaker(&cut)..]), "{cut:?}");
            }
        }
    }
    assert!(truncated > 0, "the fixture exercises truncation");
}

#[test]
fn topic_targets_parse_back_to_their_labels() {
    let c = fixture();
    for ex in derive_examples(&c, Task::T) {
        let mut want: Vec<String> = Vec::new();
        for t in &ex.sample.oracle_topics {
            if !want.contains(t) {
                want.push(t.clone());
            }
        }
        assert_eq!(parse_topic_output(&build_target(Task::T, &ex.sample).unwrap()), want);
    }
}

#[test]
fn multi_goal_targets_use_the_separator() {
    let c = fixture();
    let multi = derive_examples(&c, Task::G)
        .into_iter()
        .find(|e| e.sample.oracle_goals.len() > 1)
        .unwrap();
    assert_eq!(multi.target_text, format!("Chit-chat {} Movie recommendation", vocab::SEP));
    assert_eq!(parse_goal_output(&multi.target_text), multi.sample.oracle_goals);
}

#[test]
fn item_targets_name_the_item_token() {
    let c = fixture();
    let ex = &derive_examples(&c, Task::R)[0];
    assert_eq!(ex.target_text, "_201_ Kind of Blue");
}
