//! Replays the checked-in fuzz seeds through the same entry points the fuzz
//! targets use, so seed regressions show up under plain `cargo test`.

use std::path::PathBuf;

use crossret_core::knn::IvfLayout;
use crossret_core::store::{
    decode_matrix, encode_matrix, parse_metadata, read_header, ClassSetFile, EmbeddingSpace,
};
use crossret_core::{EngineConfig, EnsembleState};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            (path, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn xmeb_seeds() {
    let mut decoded = 0;
    for (_, data) in seeds("xmeb_decode") {
        let Ok(header) = read_header(&data) else {
            continue;
        };
        let space =
            EmbeddingSpace::new("fuzz", (header.dim as usize).clamp(1, 4096), true).unwrap();
        if let Ok(m) = decode_matrix(&data, &space) {
            let again = decode_matrix(&encode_matrix(&m), &space).unwrap();
            assert_eq!(again.as_slice(), m.as_slice());
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn xmiv_seeds() {
    let mut decoded = 0;
    for (_, data) in seeds("xmiv_decode") {
        if let Ok(layout) = IvfLayout::decode(&data) {
            assert_eq!(IvfLayout::decode(&layout.encode()).unwrap(), layout);
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn metadata_seeds() {
    let results: Vec<bool> = seeds("metadata_jsonl")
        .iter()
        .map(|(_, d)| parse_metadata(&d[..], false).is_ok())
        .collect();
    assert!(results.contains(&true) && results.contains(&false));
}

#[test]
fn classset_seeds() {
    for (path, data) in seeds("classset_json") {
        let parsed = ClassSetFile::parse(std::str::from_utf8(&data).unwrap());
        assert_eq!(
            parsed.is_ok(),
            !path.ends_with("duplicate_label"),
            "{}",
            path.display()
        );
    }
}

#[test]
fn engine_config_seeds() {
    for (path, data) in seeds("engine_config") {
        let text = std::str::from_utf8(&data).unwrap();
        match EngineConfig::parse(text) {
            Ok(c) => assert_eq!(EngineConfig::parse(&c.render().unwrap()).unwrap(), c),
            Err(_) => assert!(path.ends_with("incomplete.toml"), "{}", path.display()),
        }
    }
}

#[test]
fn ensemble_state_seeds() {
    for (path, data) in seeds("ensemble_state") {
        match EnsembleState::from_json(std::str::from_utf8(&data).unwrap()) {
            Ok(s) => assert_eq!(EnsembleState::from_json(&s.to_json()).unwrap(), s),
            Err(_) => assert!(path.ends_with("inverted"), "{}", path.display()),
        }
    }
}
