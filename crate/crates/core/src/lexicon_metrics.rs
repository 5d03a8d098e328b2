//! Cluster-level metrics: purity, word detectors, NED, coverage, and the
//! TDE class-file format.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::UtteranceAlignment;
use crate::error::{Error, Result};
use crate::par;
use crate::stats::{harmonic, ratio};
use crate::time::{secs_to_us, Span};

/// Unit-cost insert/delete/substitute distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein / max(len)`, 0 for two empty sequences.
pub fn normalized_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallDenominator {
    /// Segments labeled with the word anywhere in the corpus.
    #[default]
    SegmentCount,
    /// Ground-truth tokens of the word in the corpus.
    WordTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub cluster: usize,
    pub word: String,
    pub count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub wd: usize,
    pub detectors: Vec<Detector>,
    pub purity: f64,
    pub n_segments: usize,
    pub n_clusters: usize,
}

pub const DETECTOR_F1: f64 = 0.5;

/// Purity and word detectors.
///
/// `words[i]` is the word segment `i` is credited to, `None` for the
/// pseudo-word that never wins a cluster. `word_tokens` is only read with
/// [`RecallDenominator::WordTokens`].
pub fn word_detection(
    labels: &[usize],
    words: &[Option<String>],
    recall_denominator: &RecallDenominator,
    word_tokens: &HashMap<String, usize>,
) -> Result<DetectorReport> {
    if labels.len() != words.len() {
        return Err(Error::InvalidArgument(format!(
            "{} cluster labels for {} segment words",
            labels.len(),
            words.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyCorpus("no segments to score"));
    }
    let mut table: BTreeMap<usize, (usize, BTreeMap<&str, usize>)> = BTreeMap::new();
    let mut word_segments: HashMap<&str, usize> = HashMap::new();
    for (&c, w) in labels.iter().zip(words) {
        let entry = table.entry(c).or_default();
        entry.0 += 1;
        if let Some(w) = w {
            *entry.1.entry(w.as_str()).or_default() += 1;
            *word_segments.entry(w.as_str()).or_default() += 1;
        }
    }

    let mut majority_total = 0;
    let mut detectors = Vec::new();
    for (&cluster, (size, counts)) in &table {
        majority_total += counts.values().copied().max().unwrap_or(0);
        let mut best: Option<Detector> = None;
        for (&word, &count) in counts {
            let denom = match recall_denominator {
                RecallDenominator::SegmentCount => word_segments[word],
                RecallDenominator::WordTokens => word_tokens.get(word).copied().unwrap_or(0),
            };
            let precision = count as f64 / *size as f64;
            let recall = ratio(count as f64, denom as f64).min(1.0);
            let f1 = harmonic(precision, recall);
            // BTreeMap order makes ties fall to the smaller word.
            if best
                .as_ref()
                .is_none_or(|b| f1 > b.f1 || (f1 == b.f1 && count > b.count))
            {
                best = Some(Detector {
                    cluster,
                    word: word.to_string(),
                    count,
                    precision,
                    recall,
                    f1,
                });
            }
        }
        if let Some(b) = best.filter(|b| b.f1 >= DETECTOR_F1) {
            detectors.push(b);
        }
    }
    Ok(DetectorReport {
        wd: detectors.len(),
        detectors,
        purity: 100.0 * majority_total as f64 / labels.len() as f64,
        n_segments: labels.len(),
        n_clusters: table.len(),
    })
}

/// A clustered segment in seconds, as written to class files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub cluster: usize,
    pub utterance_id: String,
    pub onset_s: f64,
    pub offset_s: f64,
}

impl Fragment {
    pub fn span(&self) -> Span {
        Span::from_secs(self.onset_s, self.offset_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NedOptions {
    /// Clusters with more pairs than this are scored on a uniform sample.
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for NedOptions {
    fn default() -> Self {
        NedOptions {
            max_pairs: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub n_words: usize,
    pub n_pairs: u64,
    pub ned: f64,
    pub coverage: f64,
    pub m_score: f64,
}

impl MatchingReport {
    pub fn from_ned_coverage(ned: f64, coverage: f64) -> Self {
        MatchingReport {
            n_words: 0,
            n_pairs: 0,
            ned,
            coverage,
            m_score: m_score(ned, coverage),
        }
    }
}

/// Harmonic mean of `100 - ned` and `coverage` (both percentages).
pub fn m_score(ned: f64, coverage: f64) -> f64 {
    harmonic(100.0 - ned, coverage)
}

/// Phones whose midpoint lies in `[span.start, span.end)`.
pub fn transcribe(alignment: &UtteranceAlignment, span: Span) -> Vec<&str> {
    alignment
        .phones
        .iter()
        .filter(|p| {
            let mid2 = secs_to_us(p.onset_s) + secs_to_us(p.offset_s);
            mid2 >= 2 * span.start && mid2 < 2 * span.end
        })
        .map(|p| p.phone.as_str())
        .collect()
}

/// Sum of pairwise NED over a cluster, and the number of pairs it stands for.
fn cluster_ned(transcripts: &[Vec<&str>], opts: &NedOptions, cluster: usize) -> (f64, u64) {
    let n = transcripts.len();
    if n < 2 {
        return (0.0, 0);
    }
    let pairs = (n as u64) * (n as u64 - 1) / 2;
    if pairs <= opts.max_pairs as u64 {
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += normalized_edit_distance(&transcripts[i], &transcripts[j]);
            }
        }
        return (sum, pairs);
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(opts.seed ^ (cluster as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut sum = 0.0;
    for _ in 0..opts.max_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        sum += normalized_edit_distance(&transcripts[i], &transcripts[j]);
    }
    (sum / opts.max_pairs as f64 * pairs as f64, pairs)
}

/// NED over within-cluster pairs and coverage of word-aligned speech.
///
/// Every alignment in `alignments` counts towards the coverage denominator;
/// fragments must refer to one of them.
pub fn ned_coverage<'a>(
    fragments: &[Fragment],
    alignments: impl IntoIterator<Item = &'a UtteranceAlignment>,
    opts: &NedOptions,
) -> Result<MatchingReport> {
    let by_id: BTreeMap<&str, &UtteranceAlignment> = alignments
        .into_iter()
        .map(|a| (a.utterance_id.as_str(), a))
        .collect();
    let lookup = |id: &str| {
        by_id.get(id).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("fragment refers to unknown utterance {id:?}"))
        })
    };

    let mut clusters: BTreeMap<usize, Vec<Vec<&str>>> = BTreeMap::new();
    let mut per_utt: BTreeMap<&str, Vec<Span>> = BTreeMap::new();
    for f in fragments {
        let ali = lookup(&f.utterance_id)?;
        if ali.phones.is_empty() && !ali.words.is_empty() {
            return Err(Error::MissingPhones {
                id: f.utterance_id.clone(),
            });
        }
        clusters
            .entry(f.cluster)
            .or_default()
            .push(transcribe(ali, f.span()));
        per_utt
            .entry(ali.utterance_id.as_str())
            .or_default()
            .push(f.span());
    }

    let groups: Vec<(usize, Vec<Vec<&str>>)> = clusters.into_iter().collect();
    let scored = par::map(&groups, |(c, t)| cluster_ned(t, opts, *c));
    let (ned_sum, n_pairs) = scored
        .iter()
        .fold((0.0, 0u64), |(s, n), &(cs, cn)| (s + cs, n + cn));

    let mut speech = 0i64;
    let mut covered = 0i64;
    for (id, ali) in &by_id {
        let words: Vec<Span> = ali
            .words
            .iter()
            .map(|w| Span::from_secs(w.onset_s, w.offset_s))
            .collect();
        speech += crate::time::union_len(&mut words.clone());
        if let Some(spans) = per_utt.get(id) {
            covered += crate::time::intersection_len(spans, &words);
        }
    }
    if speech == 0 {
        return Err(Error::EmptyCorpus("no word-aligned speech"));
    }
    let ned = 100.0 * ratio(ned_sum, n_pairs as f64);
    let coverage = 100.0 * covered as f64 / speech as f64;
    Ok(MatchingReport {
        n_words: fragments.len(),
        n_pairs,
        ned,
        coverage,
        m_score: m_score(ned, coverage),
    })
}

/// Writes fragments as a TDE class file: classes in ascending cluster order,
/// entries sorted by utterance and time, a blank line between classes.
pub fn write_classfile(mut out: impl Write, fragments: &[Fragment]) -> std::io::Result<()> {
    out.write_all(classfile_string(fragments).as_bytes())
}

pub fn classfile_string(fragments: &[Fragment]) -> String {
    let mut classes: BTreeMap<usize, Vec<&Fragment>> = BTreeMap::new();
    for f in fragments {
        classes.entry(f.cluster).or_default().push(f);
    }
    let mut s = String::new();
    for (i, (k, mut members)) in classes.into_iter().enumerate() {
        members.sort_by(|a, b| {
            a.utterance_id
                .cmp(&b.utterance_id)
                .then(a.onset_s.total_cmp(&b.onset_s))
                .then(a.offset_s.total_cmp(&b.offset_s))
        });
        if i > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "Class {k}");
        for f in members {
            let _ = writeln!(s, "{} {:.3} {:.3}", f.utterance_id, f.onset_s, f.offset_s);
        }
    }
    s
}

pub fn read_classfile(input: impl BufRead) -> Result<Vec<Fragment>> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::ClassFile {
            line: line_no,
            msg: e.to_string(),
        })?;
        let bad = |msg: &str| Error::ClassFile {
            line: line_no,
            msg: format!("{msg}: {line:?}"),
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            current = None;
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("Class ") {
            current = Some(rest.trim().parse().map_err(|_| bad("bad class index"))?);
            continue;
        }
        let cluster = current.ok_or_else(|| bad("entry outside a class block"))?;
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        let [id, on, off] = parts[..] else {
            return Err(bad("expected '<utterance> <onset> <offset>'"));
        };
        let onset_s: f64 = on.parse().map_err(|_| bad("bad onset"))?;
        let offset_s: f64 = off.parse().map_err(|_| bad("bad offset"))?;
        out.push(Fragment {
            cluster,
            utterance_id: id.to_string(),
            onset_s,
            offset_s,
        });
    }
    Ok(out)
}
