//! The 50-turn serialization fixture and its checked-in goldens, shared by
//! the serialization tests and the acceptance runner.
#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use mgcrs_core::corpus::*;
use mgcrs_core::serialize::*;

pub const STRATEGIES: [(PromptStrategy, &str); 2] = [
    (PromptStrategy::SpecialToken, "special_token"),
    (PromptStrategy::NaturalLanguage, "natural_language"),
];

/// Small enough that the long dialogue loses its oldest turns and the piano
/// knowledge triples are cut at a triple boundary.
pub const BUDGET: LengthBudget = LengthBudget {
    max_source: 96,
    max_target: 100,
    max_topic_context: 12,
};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/serialization")
}

pub fn fixture() -> Corpus {
    load_corpus(&fixture_dir().join("corpus.jsonl"), CorpusFormat::CanonicalJsonl).unwrap()
}

pub fn render(task: Task, strategy: PromptStrategy, c: &Corpus) -> String {
    let mut out = String::new();
    for ex in derive_examples(c, task) {
        let input = build_input(task, &ex.sample, strategy, &BUDGET, &StageValues::oracle(&ex.sample), &WordCount).unwrap();
        let target = build_target(task, &ex.sample).unwrap();
        assert_eq!(target, ex.target_text);
        out.push_str(&serde_json::to_string(&SerializedPair::new(task, input, target)).unwrap());
        out.push('\n');
    }
    out
}

pub fn golden_path(strategy_name: &str, task: Task) -> PathBuf {
    fixture_dir().join(format!("{strategy_name}_{}.jsonl", task.as_str().to_lowercase()))
}

/// Compares every (strategy, task) rendering with its golden file and
/// returns the number of files compared.
pub fn check_goldens() -> Result<usize, String> {
    let c = fixture();
    let mut files = 0;
    for (strategy, name) in STRATEGIES {
        for task in Task::ALL {
            let path = golden_path(name, task);
            let got = render(task, strategy, &c);
            let want = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            if let Some((i, (g, w))) = got.lines().zip(want.lines()).enumerate().find(|(_, (g, w))| g != w) {
                return Err(format!("{} line {}:\n  got  {g}\n  want {w}", path.display(), i + 1));
            }
            if got != want {
                return Err(format!("{}: line count differs", path.display()));
            }
            files += 1;
        }
    }
    Ok(files)
}
