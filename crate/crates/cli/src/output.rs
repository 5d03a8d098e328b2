//! On-disk records written and read by the commands.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std_engine::pipeline::UtteranceResult;
use std_engine::segmenter::{
    infer_boundaries, AttentionSegment, Masks, Segmentation, SegmenterConfig,
};
use std_engine::time::frame_to_secs;

use crate::CliError;

pub const SEGMENTS: &str = "segments.jsonl";
pub const BOUNDARIES: &str = "boundaries.jsonl";
pub const ATTENTION_MASKS: &str = "attention_masks.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";
pub const CLASSES: &str = "classes.txt";
pub const CLUSTERS: &str = "clusters.jsonl";
pub const CENTROIDS: &str = "centroids.stdt";
pub const CLUSTER_MODEL: &str = "cluster_model.json";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_TXT: &str = "sweep.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    pub start_frame: usize,
    pub end_frame: usize,
    pub onset_s: f64,
    pub offset_s: f64,
    pub mass: f64,
}

impl SegmentRecord {
    fn new(s: &AttentionSegment, shift_ms: f64, duration_s: f64) -> Self {
        let secs = |f: usize| frame_to_secs(f as f64, shift_ms).min(duration_s);
        SegmentRecord {
            head: s.head,
            start_frame: s.start_frame,
            end_frame: s.end_frame,
            onset_s: secs(s.start_frame),
            offset_s: secs(s.end_frame),
            mass: s.mass,
        }
    }

    fn segment(&self) -> AttentionSegment {
        AttentionSegment {
            head: self.head,
            start_frame: self.start_frame,
            end_frame: self.end_frame,
            mass: self.mass,
        }
    }
}

/// One line of segments.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSegments {
    pub utterance_id: String,
    pub layer: usize,
    pub retain_mass: f64,
    pub frame_shift_ms: f64,
    pub duration_s: f64,
    /// Segments in the configured merge mode.
    pub segments: Vec<SegmentRecord>,
    /// Union segments, from which boundaries are inferred.
    pub merged: Vec<SegmentRecord>,
}

impl UtteranceSegments {
    pub fn from_result(r: &UtteranceResult, cfg: &SegmenterConfig) -> Self {
        let conv = |segs: &[AttentionSegment]| {
            segs.iter()
                .map(|s| SegmentRecord::new(s, r.frame_shift_ms, r.duration_s))
                .collect()
        };
        UtteranceSegments {
            utterance_id: r.utterance_id.clone(),
            layer: cfg.layer,
            retain_mass: cfg.retain_mass,
            frame_shift_ms: r.frame_shift_ms,
            duration_s: r.duration_s,
            segments: conv(&r.seg.segments),
            merged: conv(&r.seg.merged),
        }
    }

    /// Rebuilds a segmentation; masks are not stored and come back empty.
    pub fn into_result(self) -> UtteranceResult {
        let merged: Vec<AttentionSegment> =
            self.merged.iter().map(SegmentRecord::segment).collect();
        let boundaries = infer_boundaries(
            &self.utterance_id,
            &merged,
            self.duration_s,
            self.frame_shift_ms,
        );
        UtteranceResult {
            utterance_id: self.utterance_id,
            frame_shift_ms: self.frame_shift_ms,
            duration_s: self.duration_s,
            seg: Segmentation {
                masks: Masks { heads: Vec::new() },
                segments: self.segments.iter().map(SegmentRecord::segment).collect(),
                merged,
                boundaries,
            },
        }
    }
}

/// One line of attention_masks.jsonl: kept frames per head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRecord {
    pub utterance_id: String,
    pub layer: usize,
    pub retain_mass: f64,
    pub heads: Vec<Vec<u8>>,
}

/// One line of clusters.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub utterance_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub onset_s: f64,
    pub offset_s: f64,
    /// Word the segment mostly lies in, if any.
    pub word: Option<String>,
    pub cluster: Option<usize>,
}

/// A row of a precision/recall golden table with its derived columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub os: f64,
    pub r_value: f64,
}

pub fn write_string(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_string(path, &text)
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    items: impl IntoIterator<Item = T>,
) -> Result<(), CliError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(&item).expect("record serializes"));
        text.push('\n');
    }
    write_string(path, &text)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

/// Segments keyed by utterance id; duplicate ids are a data error.
pub fn read_segments(path: &Path) -> Result<BTreeMap<String, UtteranceSegments>, CliError> {
    let mut out = BTreeMap::new();
    for rec in read_jsonl::<UtteranceSegments>(path)? {
        let id = rec.utterance_id.clone();
        if out.insert(id.clone(), rec).is_some() {
            return Err(CliError::Data(format!(
                "{}: duplicate utterance id {id:?}",
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Parses `label precision recall` rows; `#` starts a comment.
pub fn read_pr_table(path: &Path) -> Result<Vec<(String, f64, f64)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || {
            CliError::Data(format!(
                "{}:{}: expected `label precision recall`",
                path.display(),
                i + 1
            ))
        };
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|f| !f.is_empty())
            .collect();
        let [label, p, r] = fields[..] else {
            return Err(bad());
        };
        let p: f64 = p.parse().map_err(|_| bad())?;
        let r: f64 = r.parse().map_err(|_| bad())?;
        rows.push((label.to_string(), p, r));
    }
    Ok(rows)
}

pub fn pr_table_text(rows: &[PrRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>8} {:>9} {:>9}",
        "label", "P", "R", "F1", "OS", "R-val"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>9.2} {:>9.2}",
            r.label, r.precision, r.recall, r.f1, r.os, r.r_value
        );
    }
    out
}
