use std::fs;

use partreid::synthetic_data::{export_splits, import_splits, make_splits, split_checksums, DataConfig, DATASET_FORMAT_VERSION};
use partreid::Error;

fn small() -> DataConfig {
    DataConfig {
        seed: 3,
        n_train_ids: 3,
        n_eval_ids: 2,
        samples_per_id: 4,
        queries_per_id: 1,
        ..DataConfig::default()
    }
}

#[test]
fn export_then_import_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let splits = make_splits(&small()).unwrap();
    let manifest = export_splits(&splits, dir.path()).unwrap();
    assert_eq!(manifest.format_version, DATASET_FORMAT_VERSION);
    let recorded: Vec<String> = manifest.splits.iter().map(|s| s.sha256.clone()).collect();
    assert_eq!(recorded, split_checksums(&splits).unwrap());

    let back = import_splits(dir.path()).unwrap();
    assert_eq!(back, splits);
    assert_eq!(split_checksums(&back).unwrap(), recorded);

    // a second export of the same data writes identical files
    let again = tempfile::tempdir().unwrap();
    export_splits(&back, again.path()).unwrap();
    for s in &manifest.splits {
        assert_eq!(fs::read(dir.path().join(&s.file)).unwrap(), fs::read(again.path().join(&s.file)).unwrap());
    }
}

#[test]
fn a_flipped_byte_is_reported_as_a_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_splits(&make_splits(&small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join(&manifest.splits[1].file);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    match import_splits(dir.path()) {
        Err(Error::Checksum { path: p, expected, found }) => {
            assert_eq!(p, path);
            assert_eq!(expected, manifest.splits[1].sha256);
            assert_ne!(expected, found);
        }
        other => panic!("expected a checksum error, got {other:?}"),
    }
}

#[test]
fn a_newer_manifest_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    export_splits(&make_splits(&small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    manifest["format_version"] = serde_json::json!(DATASET_FORMAT_VERSION + 1);
    fs::write(&path, manifest.to_string()).unwrap();
    assert!(matches!(import_splits(dir.path()), Err(Error::FormatVersion { .. })));
}
