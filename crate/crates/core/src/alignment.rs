//! Forced-alignment ingestion and corpus assembly.
//!
//! Alignments are JSON lines, one utterance per line:
//!
//! ```json
//! {"id":"u1","duration_s":2.0,"words":[{"w":"a","on":0.1,"off":0.4}],"phones":[{"p":"ah","on":0.1,"off":0.4}]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{read_tensor, ManifestEntry, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordInterval {
    #[serde(rename = "w")]
    pub word: String,
    #[serde(rename = "on")]
    pub onset_s: f64,
    #[serde(rename = "off")]
    pub offset_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneInterval {
    #[serde(rename = "p")]
    pub phone: String,
    #[serde(rename = "on")]
    pub onset_s: f64,
    #[serde(rename = "off")]
    pub offset_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceAlignment {
    #[serde(rename = "id")]
    pub utterance_id: String,
    pub duration_s: f64,
    #[serde(default)]
    pub words: Vec<WordInterval>,
    #[serde(default)]
    pub phones: Vec<PhoneInterval>,
}

/// Lowercases and trims non-alphanumeric characters from both ends.
/// Returns `None` for tokens with nothing left (pure punctuation).
pub fn normalize_word(raw: &str) -> Option<String> {
    let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_lowercase())
    }
}

trait Interval {
    fn label(&self) -> &str;
    fn bounds(&self) -> (f64, f64);
}

impl Interval for WordInterval {
    fn label(&self) -> &str {
        &self.word
    }
    fn bounds(&self) -> (f64, f64) {
        (self.onset_s, self.offset_s)
    }
}

impl Interval for PhoneInterval {
    fn label(&self) -> &str {
        &self.phone
    }
    fn bounds(&self) -> (f64, f64) {
        (self.onset_s, self.offset_s)
    }
}

fn validate_tier<T: Interval>(id: &str, duration_s: f64, tier: &mut [T]) -> Result<()> {
    for iv in tier.iter() {
        let (on, off) = iv.bounds();
        if !(on.is_finite() && off.is_finite() && on >= 0.0 && on < off) {
            return Err(Error::InvalidInterval {
                id: id.to_string(),
                label: iv.label().to_string(),
                onset_s: on,
                offset_s: off,
            });
        }
        if off > duration_s {
            return Err(Error::BeyondDuration {
                id: id.to_string(),
                label: iv.label().to_string(),
                offset_s: off,
                duration_s,
            });
        }
    }
    tier.sort_by(|a, b| a.bounds().0.total_cmp(&b.bounds().0));
    for pair in tier.windows(2) {
        let (a_on, a_off) = pair[0].bounds();
        let (b_on, b_off) = pair[1].bounds();
        if a_off > b_on {
            return Err(Error::Overlap {
                id: id.to_string(),
                first: (pair[0].label().to_string(), a_on, a_off),
                second: (pair[1].label().to_string(), b_on, b_off),
            });
        }
    }
    Ok(())
}

impl UtteranceAlignment {
    /// Validates ordering and bounds, then normalizes word tokens.
    pub fn validate_and_normalize(mut self) -> Result<Self> {
        let id = self.utterance_id.clone();
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::Manifest {
                id,
                msg: format!("duration_s must be positive, got {}", self.duration_s),
            });
        }
        validate_tier(&id, self.duration_s, &mut self.words)?;
        validate_tier(&id, self.duration_s, &mut self.phones)?;
        self.words = self
            .words
            .into_iter()
            .filter_map(|w| normalize_word(&w.word).map(|word| WordInterval { word, ..w }))
            .collect();
        Ok(self)
    }
}

pub fn parse_alignment_line(
    line: &str,
) -> std::result::Result<UtteranceAlignment, serde_json::Error> {
    serde_json::from_str(line)
}

pub fn read_alignments(path: impl AsRef<Path>) -> Result<Vec<UtteranceAlignment>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let utt = parse_alignment_line(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        let utt = utt.validate_and_normalize()?;
        if !seen.insert(utt.utterance_id.clone()) {
            return Err(Error::DuplicateId(utt.utterance_id));
        }
        out.push(utt);
    }
    Ok(out)
}

pub fn write_alignments(path: impl AsRef<Path>, alignments: &[UtteranceAlignment]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for a in alignments {
        out.push_str(&serde_json::to_string(a).expect("alignments serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Where an utterance's tensor comes from.
#[derive(Debug, Clone)]
pub enum TensorSource {
    File(PathBuf),
    Memory(Arc<Tensor>),
}

impl TensorSource {
    pub fn load(&self) -> Result<Arc<Tensor>> {
        match self {
            TensorSource::File(p) => read_tensor(p).map(Arc::new),
            TensorSource::Memory(t) => Ok(Arc::clone(t)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub entry: ManifestEntry,
    pub alignment: UtteranceAlignment,
    pub attention: TensorSource,
    pub features: TensorSource,
}

impl Utterance {
    pub fn id(&self) -> &str {
        &self.entry.utterance_id
    }

    pub fn duration_s(&self) -> f64 {
        self.alignment.duration_s
    }
}

/// Immutable evaluation corpus, ordered by utterance id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    utterances: Vec<Utterance>,
}

impl Corpus {
    /// Builds a corpus from already-paired utterances (ids must be unique).
    pub fn from_utterances(mut utterances: Vec<Utterance>) -> Result<Self> {
        utterances.sort_by(|a, b| a.id().cmp(b.id()));
        for pair in utterances.windows(2) {
            if pair[0].id() == pair[1].id() {
                return Err(Error::DuplicateId(pair[0].id().to_string()));
            }
        }
        Ok(Corpus { utterances })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances
            .binary_search_by(|u| u.id().cmp(id))
            .ok()
            .map(|i| &self.utterances[i])
    }

    pub fn word_count(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.alignment.words.len())
            .sum()
    }

    /// Layers exported for every utterance.
    pub fn common_layers(&self) -> Vec<usize> {
        let mut iter = self.utterances.iter();
        let Some(first) = iter.next() else {
            return Vec::new();
        };
        let mut layers = first.entry.layers.clone();
        for u in iter {
            layers.retain(|l| u.entry.layers.contains(l));
        }
        layers.sort_unstable();
        layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurationWarning {
    pub utterance_id: String,
    pub alignment_duration_s: f64,
    pub frame_duration_s: f64,
}

/// What the join dropped or flagged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JoinReport {
    pub manifest_only: Vec<String>,
    pub alignment_only: Vec<String>,
    pub duration_warnings: Vec<DurationWarning>,
}

impl JoinReport {
    pub fn orphan_count(&self) -> usize {
        self.manifest_only.len() + self.alignment_only.len()
    }

    pub fn log(&self) {
        if !self.manifest_only.is_empty() {
            log::warn!(
                "{} manifest utterance(s) without alignment: {:?}",
                self.manifest_only.len(),
                self.manifest_only
            );
        }
        if !self.alignment_only.is_empty() {
            log::warn!(
                "{} aligned utterance(s) without manifest entry: {:?}",
                self.alignment_only.len(),
                self.alignment_only
            );
        }
        for w in &self.duration_warnings {
            log::warn!(
                "utterance {}: alignment duration {:.3} s vs {:.3} s of frames",
                w.utterance_id,
                w.alignment_duration_s,
                w.frame_duration_s
            );
        }
    }
}

/// Inner join of manifest records and alignments on utterance id.
pub fn join_corpus(
    manifests: Vec<ManifestEntry>,
    alignments: Vec<UtteranceAlignment>,
) -> Result<(Corpus, JoinReport)> {
    let mut by_id: BTreeMap<String, UtteranceAlignment> = BTreeMap::new();
    for a in alignments {
        let id = a.utterance_id.clone();
        if by_id.insert(id.clone(), a).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    let mut report = JoinReport::default();
    let mut seen_manifest = HashSet::new();
    let mut utterances = Vec::new();
    for entry in manifests {
        if !seen_manifest.insert(entry.utterance_id.clone()) {
            return Err(Error::DuplicateId(entry.utterance_id));
        }
        match by_id.remove(&entry.utterance_id) {
            Some(alignment) => {
                let frame_dur = entry.nominal_duration_s();
                if (alignment.duration_s - frame_dur).abs() > entry.frame_shift_s() {
                    report.duration_warnings.push(DurationWarning {
                        utterance_id: entry.utterance_id.clone(),
                        alignment_duration_s: alignment.duration_s,
                        frame_duration_s: frame_dur,
                    });
                }
                utterances.push(Utterance {
                    attention: TensorSource::File(entry.attention_file()),
                    features: TensorSource::File(entry.feature_file()),
                    entry,
                    alignment,
                });
            }
            None => report.manifest_only.push(entry.utterance_id),
        }
    }
    report.alignment_only = by_id.into_keys().collect();
    report.manifest_only.sort();
    report
        .duration_warnings
        .sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    if utterances.is_empty() {
        return Err(Error::EmptyJoin);
    }
    Ok((Corpus::from_utterances(utterances)?, report))
}
