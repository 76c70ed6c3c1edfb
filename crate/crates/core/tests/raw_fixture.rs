//! Filtering of the hand-authored corpus in `fixtures/raw_small`.

use std::path::PathBuf;

use scenediff::data::{filter_dataset, load_raw, FilterConfig};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/raw_small")
}

#[test]
fn filter_counts_match_the_fixture() {
    let dir = fixture();
    let expected: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    let cfg: FilterConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("filter.json")).unwrap()).unwrap();
    let raw = load_raw(&dir).unwrap();
    assert_eq!(raw.scenes.len() as u64, expected["raw_scenes"].as_u64().unwrap());
    assert_eq!(raw.dangling as u64, expected["dangling"].as_u64().unwrap());
    let kept = filter_dataset(&raw.scenes, &cfg).unwrap();
    let ids: Vec<&str> = kept.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["s1", "s2"]);
    assert_eq!(kept.len() as u64, expected["scenes"].as_u64().unwrap());
    assert_eq!(
        kept.iter().map(|s| s.objects.len()).sum::<usize>() as u64,
        expected["objects"].as_u64().unwrap()
    );
    assert_eq!(
        kept.iter().map(|s| s.graph.edges.len()).sum::<usize>() as u64,
        expected["relations"].as_u64().unwrap()
    );
}

#[test]
fn truncation_keeps_the_largest_objects() {
    let dir = fixture();
    let cfg: FilterConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("filter.json")).unwrap()).unwrap();
    let kept = filter_dataset(&load_raw(&dir).unwrap().scenes, &cfg).unwrap();
    // s1 keeps bed, the first chair and table; the lamp falls outside the top
    // categories and the second chair is cut by the object cap.
    let labels: Vec<&str> = kept[0].objects.iter().map(|o| o.label.as_str()).collect();
    assert_eq!(labels, ["bed", "chair", "table"]);
    assert_eq!(kept[0].objects[1].centroid, [-2.0, 0.0, 0.25]);
}

#[test]
fn missing_directory_is_an_error() {
    assert!(load_raw(&fixture().join("nope")).is_err());
}
