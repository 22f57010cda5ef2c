//! The checked-in default configuration lists every default.
//!
//! Set `MGCRS_BLESS=1` to regenerate `config/default.toml`.

use std::collections::BTreeSet;
use std::path::PathBuf;

use mgcrs::config::{AppConfig, DEFAULT_CONFIG};
use mgcrs_core::backbone::DecodeMode;

fn key_paths(v: &toml::Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.insert(path.clone());
            key_paths(child, &path, out);
        }
    }
}

fn keys(raw: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    key_paths(&raw.parse::<toml::Value>().unwrap(), "", &mut out);
    out
}

#[test]
fn checked_in_file_equals_the_defaults() {
    let generated = AppConfig::default().to_toml().unwrap();
    if std::env::var_os("MGCRS_BLESS").is_some() {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("config/default.toml");
        std::fs::write(path, &generated).unwrap();
        return;
    }
    assert_eq!(AppConfig::parse(DEFAULT_CONFIG).unwrap(), AppConfig::default());
    assert_eq!(keys(DEFAULT_CONFIG), keys(&generated));
}

#[test]
fn cited_defaults_are_present() {
    let cfg = AppConfig::parse(DEFAULT_CONFIG).unwrap();
    assert_eq!(cfg.train.e1, 15);
    assert_eq!(cfg.train.e2, 5);
    assert_eq!(cfg.pipeline.budget.max_source, 512);
    assert_eq!(cfg.pipeline.budget.max_target, 100);
    assert_eq!(cfg.pipeline.max_ranked_items, 50);
    assert_eq!(cfg.pipeline.response_decode.mode, DecodeMode::Beam(4));
    assert_eq!(cfg.synth.n_dialogues, 2000);
    assert_eq!(cfg.synth.n_items, 200);
    assert_eq!(cfg.serve.top_items, 5);
    for key in ["serve.session_idle_secs", "backbone.d_model", "pipeline.recommendation_keywords", "report.rank_ks"] {
        assert!(keys(DEFAULT_CONFIG).contains(key), "{key}");
    }
}

#[test]
fn partial_files_fill_in_defaults() {
    let cfg = AppConfig::parse("[train]\ne1 = 3\n[serve]\nport = 9000\n").unwrap();
    assert_eq!(cfg.train.e1, 3);
    assert_eq!(cfg.train.e2, AppConfig::default().train.e2);
    assert_eq!(cfg.serve.port, 9000);
    assert_eq!(cfg.pipeline, AppConfig::default().pipeline);
}

#[test]
fn unknown_values_are_rejected() {
    assert!(AppConfig::parse("[pipeline]\nstrategy = \"telepathy\"\n").is_err());
    assert!(AppConfig::load(Some(std::path::Path::new("/nonexistent/mgcrs.toml"))).is_err());
}

#[test]
fn synthetic_reference_file_matches_the_tiny_backbone() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("config/synthetic.toml");
    let cfg = AppConfig::load(Some(&path)).unwrap();
    assert_eq!(cfg.backbone, mgcrs_core::backbone::BackboneConfig::tiny());
    assert_eq!(cfg.train.seed, 7);
    assert_eq!(cfg.train.optim.lr, 1e-3);
    assert_eq!(cfg.train.segment_dropout, 0.2);
    assert_eq!(cfg.train.e1, AppConfig::default().train.e1);
    assert_eq!(cfg.pipeline, AppConfig::default().pipeline);
}
