use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use std_engine::tensor_store::{
    read_manifest, read_manifests, write_manifest, write_tensor, ManifestEntry, Tensor,
};
use std_engine::Error;

const LAYERS: [usize; 2] = [11, 12];
const HEADS: usize = 2;
const DIM: usize = 3;

/// Writes a CLS-row attention tensor and a feature tensor for `id` and
/// returns a matching manifest record.
fn utterance(dir: &Path, id: &str, frames: usize) -> ManifestEntry {
    fs::create_dir_all(dir.join("attention")).unwrap();
    fs::create_dir_all(dir.join("features")).unwrap();
    let attn = Tensor::zeros(vec![LAYERS.len(), HEADS, frames + 1]).unwrap();
    let feats = Tensor::zeros(vec![LAYERS.len(), frames + 1, DIM]).unwrap();
    let attention_path = PathBuf::from(format!("attention/{id}.stdt"));
    let feature_path = PathBuf::from(format!("features/{id}.stdt"));
    write_tensor(&attn, dir.join(&attention_path)).unwrap();
    write_tensor(&feats, dir.join(&feature_path)).unwrap();
    ManifestEntry {
        utterance_id: id.to_string(),
        attention_path,
        feature_path,
        num_frames: frames as u64,
        frame_shift_ms: 20.0,
        layers: LAYERS.to_vec(),
        has_cls: true,
        base_dir: PathBuf::new(),
    }
}

fn write(dir: &Path, name: &str, entries: &[ManifestEntry]) -> PathBuf {
    let path = dir.join(name);
    write_manifest(&path, entries).unwrap();
    path
}

#[test]
fn two_well_formed_lines_give_two_records() {
    let dir = tempfile::tempdir().unwrap();
    let entries = [utterance(dir.path(), "a", 5), utterance(dir.path(), "b", 7)];
    let read = read_manifest(write(dir.path(), "m.jsonl", &entries)).unwrap();
    assert_eq!(read.len(), 2);
    assert_eq!(read[1].utterance_id, "b");
    assert_eq!(read[1].num_frames, 7);
    assert_eq!(
        read[0].attention_file(),
        dir.path().join("attention/a.stdt")
    );
}

#[test]
fn duplicate_id_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let a = utterance(dir.path(), "dup", 4);
    let err = read_manifest(write(dir.path(), "m.jsonl", &[a.clone(), a])).unwrap_err();
    assert!(
        matches!(&err, Error::DuplicateId(id) if id == "dup"),
        "{err}"
    );
    assert!(err.to_string().contains("dup"));
}

#[test]
fn duplicate_id_across_shards() {
    let dir = tempfile::tempdir().unwrap();
    let a = utterance(dir.path(), "x", 4);
    let m1 = write(dir.path(), "m1.jsonl", std::slice::from_ref(&a));
    let m2 = write(dir.path(), "m2.jsonl", &[utterance(dir.path(), "y", 3), a]);
    assert!(matches!(read_manifests(&[m1.clone(), m2]), Err(Error::DuplicateId(id)) if id == "x"));
    assert_eq!(read_manifests(&[m1]).unwrap().len(), 1);
}

#[test]
fn missing_referenced_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = utterance(dir.path(), "a", 4);
    a.feature_path = PathBuf::from("features/nowhere.stdt");
    let err = read_manifest(write(dir.path(), "m.jsonl", &[a])).unwrap_err();
    assert!(
        matches!(&err, Error::MissingFile { id, .. } if id == "a"),
        "{err}"
    );
}

#[test]
fn cls_frame_count_mismatch_expects_frames_plus_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = utterance(dir.path(), "a", 101);
    a.num_frames = 100;
    let err = read_manifest(write(dir.path(), "m.jsonl", &[a])).unwrap_err();
    match err {
        Error::FrameMismatch {
            id,
            expected,
            actual,
            ..
        } => {
            assert_eq!(id, "a");
            assert_eq!((expected, actual), (101, 102));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn layer_count_must_match_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = utterance(dir.path(), "a", 4);
    a.layers = vec![12];
    assert!(read_manifest(write(dir.path(), "m.jsonl", &[a])).is_err());
}

#[test]
fn malformed_line_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let a = utterance(dir.path(), "a", 4);
    let path = write(dir.path(), "m.jsonl", &[a]);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"utterance_id\": 3}\n");
    fs::write(&path, text).unwrap();
    match read_manifest(&path).unwrap_err() {
        Error::Json { line, .. } => assert_eq!(line, 2),
        other => panic!("unexpected error {other}"),
    }
}

#[derive(Debug, Clone, Copy)]
enum Defect {
    None,
    ZeroShift,
    NoLayers,
    MissingAttention,
    FrameCount,
}

fn defect() -> impl Strategy<Value = Defect> {
    prop_oneof![
        6 => Just(Defect::None),
        1 => Just(Defect::ZeroShift),
        1 => Just(Defect::NoLayers),
        1 => Just(Defect::MissingAttention),
        1 => Just(Defect::FrameCount),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn rejects_exactly_the_invalid_records(defects in prop::collection::vec((defect(), 1usize..6), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<ManifestEntry> = defects
            .iter()
            .enumerate()
            .map(|(i, &(d, frames))| {
                let mut e = utterance(dir.path(), &format!("u{i}"), frames);
                match d {
                    Defect::None => {}
                    Defect::ZeroShift => e.frame_shift_ms = 0.0,
                    Defect::NoLayers => e.layers.clear(),
                    Defect::MissingAttention => e.attention_path = PathBuf::from("attention/gone.stdt"),
                    Defect::FrameCount => e.num_frames += 1,
                }
                e
            })
            .collect();
        let result = read_manifest(write(dir.path(), "m.jsonl", &entries));
        let any_bad = defects.iter().any(|(d, _)| !matches!(d, Defect::None));
        prop_assert_eq!(result.is_err(), any_bad);
        if let Ok(read) = result {
            prop_assert_eq!(read.len(), entries.len());
        }
    }
}
