//! Area, boundary and token metrics for attention segments.
//!
//! All metrics aggregate counts over the corpus (micro-average): per-utterance
//! functions return count structs whose `merge` is associative, and the final
//! percentages are computed once from the pooled counts.

use serde::{Deserialize, Serialize};

use crate::alignment::WordInterval;
use crate::error::{Error, Result};
use crate::segmenter::{AttentionSegment, BoundarySet};
use crate::stats::{harmonic, ratio};
use crate::time::{ms_to_us, secs_to_us, Micros, Span};

/// A segment paired with the word it overlaps most.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAssignment {
    pub segment: AttentionSegment,
    pub word_index: Option<usize>,
    /// Fraction of the segment's length inside `word_index`.
    pub overlap_frac: f64,
    /// More than half of the segment lies inside the word.
    pub is_hit: bool,
}

impl SegmentAssignment {
    /// The word the segment is credited to, if it is a hit.
    pub fn hit_word(&self) -> Option<usize> {
        self.word_index.filter(|_| self.is_hit)
    }
}

pub fn assign_segments_to_words(
    segments: &[AttentionSegment],
    words: &[WordInterval],
    frame_shift_ms: f64,
) -> Vec<SegmentAssignment> {
    let word_spans: Vec<Span> = words
        .iter()
        .map(|w| Span::from_secs(w.onset_s, w.offset_s))
        .collect();
    segments
        .iter()
        .map(|seg| {
            let span = Span::from_frames(seg.start_frame, seg.end_frame, frame_shift_ms);
            let mut best: Option<(usize, Micros)> = None;
            for (i, w) in word_spans.iter().enumerate() {
                let ov = span.overlap(w);
                if ov > 0 && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((i, ov));
                }
            }
            let (word_index, overlap) = match best {
                Some((i, ov)) => (Some(i), ov),
                None => (None, 0),
            };
            SegmentAssignment {
                segment: seg.clone(),
                word_index,
                overlap_frac: ratio(overlap as f64, span.len() as f64),
                is_hit: word_index.is_some() && 2 * overlap > span.len(),
            }
        })
        .collect()
}

/// Word span snapped to the frame grid: `[round(on / shift), round(off / shift))`.
pub fn word_frames(word: &WordInterval, frame_shift_ms: f64) -> (usize, usize) {
    let shift_s = frame_shift_ms / 1000.0;
    let on = (word.onset_s / shift_s).round().max(0.0) as usize;
    let off = (word.offset_s / shift_s).round().max(0.0) as usize;
    (on, off.max(on))
}

/// Intersection over union in frames of a segment and a word.
pub fn temporal_iou(seg: &AttentionSegment, word: &WordInterval, frame_shift_ms: f64) -> f64 {
    let (ws, we) = word_frames(word, frame_shift_ms);
    let inter = seg
        .end_frame
        .min(we)
        .saturating_sub(seg.start_frame.max(ws));
    let union = seg.len() + (we - ws) - inter;
    ratio(inter as f64, union as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaCounts {
    pub n_words: usize,
    pub n_hit_words: usize,
    pub n_segments: usize,
    pub tiou_sum: f64,
    pub n_centered: usize,
    pub center_dist_sum_ms: f64,
}

impl AreaCounts {
    pub fn merge(&mut self, other: &AreaCounts) {
        self.n_words += other.n_words;
        self.n_hit_words += other.n_hit_words;
        self.n_segments += other.n_segments;
        self.tiou_sum += other.tiou_sum;
        self.n_centered += other.n_centered;
        self.center_dist_sum_ms += other.center_dist_sum_ms;
    }

    pub fn report(&self) -> Result<AreaReport> {
        if self.n_words == 0 {
            return Err(Error::EmptyCorpus("no ground-truth words"));
        }
        let wc = 100.0 * self.n_hit_words as f64 / self.n_words as f64;
        let tiou = 100.0 * ratio(self.tiou_sum, self.n_segments as f64);
        Ok(AreaReport {
            wc,
            tiou,
            cd_ms: ratio(self.center_dist_sum_ms, self.n_centered as f64),
            a_score: harmonic(wc, tiou),
        })
    }
}

/// Area counts for one utterance.
pub fn area_counts(
    assignments: &[SegmentAssignment],
    words: &[WordInterval],
    frame_shift_ms: f64,
) -> AreaCounts {
    let mut hit = vec![false; words.len()];
    let mut counts = AreaCounts {
        n_words: words.len(),
        n_segments: assignments.len(),
        ..AreaCounts::default()
    };
    for a in assignments {
        if let Some(w) = a.hit_word() {
            hit[w] = true;
        }
        if let Some(w) = a.word_index {
            let word = &words[w];
            counts.tiou_sum += temporal_iou(&a.segment, word, frame_shift_ms);
            let seg = Span::from_frames(a.segment.start_frame, a.segment.end_frame, frame_shift_ms);
            let center2_diff =
                (seg.center2() - Span::from_secs(word.onset_s, word.offset_s).center2()).abs();
            counts.center_dist_sum_ms += center2_diff as f64 / 2000.0;
            counts.n_centered += 1;
        }
    }
    counts.n_hit_words = hit.iter().filter(|&&h| h).count();
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaReport {
    pub wc: f64,
    pub tiou: f64,
    pub cd_ms: f64,
    pub a_score: f64,
}

/// Pools per-utterance area counts into the corpus report.
pub fn area_metrics<'a>(counts: impl IntoIterator<Item = &'a AreaCounts>) -> Result<AreaReport> {
    let mut total = AreaCounts::default();
    for c in counts {
        total.merge(c);
    }
    total.report()
}

/// Greedy in-order one-to-one matching of sorted boundary lists within `tol`.
///
/// For sorted sequences and a symmetric window this greedy scan yields a
/// maximum matching.
pub fn match_boundaries(hyp: &[Micros], reference: &[Micros], tol: Micros) -> usize {
    let (mut i, mut j, mut matches) = (0, 0, 0);
    while i < hyp.len() && j < reference.len() {
        let (h, r) = (hyp[i], reference[j]);
        if (h - r).abs() <= tol {
            matches += 1;
            i += 1;
            j += 1;
        } else if h < r {
            i += 1;
        } else {
            j += 1;
        }
    }
    matches
}

/// Sorted, de-duplicated word onsets and offsets.
pub fn reference_boundaries(words: &[WordInterval]) -> Vec<Micros> {
    let mut out: Vec<Micros> = words
        .iter()
        .flat_map(|w| [secs_to_us(w.onset_s), secs_to_us(w.offset_s)])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryOptions {
    pub tolerance_ms: f64,
    /// Score boundaries at t = 0 and t = duration too.
    pub include_edges: bool,
}

impl BoundaryOptions {
    pub fn new(tolerance_ms: f64) -> Self {
        BoundaryOptions {
            tolerance_ms,
            include_edges: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub n_hyp: usize,
    pub n_ref: usize,
    pub n_match: usize,
}

impl BoundaryCounts {
    pub fn merge(&mut self, other: &BoundaryCounts) {
        self.n_hyp += other.n_hyp;
        self.n_ref += other.n_ref;
        self.n_match += other.n_match;
    }

    pub fn report(&self) -> BoundaryReport {
        let precision = ratio(self.n_match as f64, self.n_hyp as f64);
        let recall = ratio(self.n_match as f64, self.n_ref as f64);
        // recall / precision - 1 == n_hyp / n_ref - 1, which stays defined
        // when nothing matched.
        let os = if self.n_ref == 0 {
            0.0
        } else {
            self.n_hyp as f64 / self.n_ref as f64 - 1.0
        };
        BoundaryReport::from_fractions(precision, recall, os)
    }
}

pub fn boundary_counts(
    hyp: &BoundarySet,
    words: &[WordInterval],
    duration_s: f64,
    opts: &BoundaryOptions,
) -> BoundaryCounts {
    let tol = ms_to_us(opts.tolerance_ms);
    let end = secs_to_us(duration_s);
    let mut reference = reference_boundaries(words);
    let mut hyp: Vec<Micros> = hyp.times_s.iter().map(|&t| secs_to_us(t)).collect();
    hyp.sort_unstable();
    hyp.dedup();
    if !opts.include_edges {
        reference.retain(|&r| r != 0 && r != end);
        hyp.retain(|&h| h.abs() > tol && (end - h).abs() > tol);
    }
    BoundaryCounts {
        n_hyp: hyp.len(),
        n_ref: reference.len(),
        n_match: match_boundaries(&hyp, &reference, tol),
    }
}

/// Boundary scores in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub os: f64,
    pub r_value: f64,
}

impl BoundaryReport {
    /// Scores from precision, recall and over-segmentation given as fractions.
    pub fn from_fractions(precision: f64, recall: f64, os: f64) -> Self {
        BoundaryReport {
            precision: 100.0 * precision,
            recall: 100.0 * recall,
            f1: 100.0 * harmonic(precision, recall),
            os: 100.0 * os,
            r_value: 100.0 * r_value(recall, os),
        }
    }

    /// Scores from precision and recall in percent, with OS = R/P - 1
    /// (taken as -1 when precision is 0).
    pub fn from_precision_recall(precision_pct: f64, recall_pct: f64) -> Self {
        let (p, r) = (precision_pct / 100.0, recall_pct / 100.0);
        let os = if p > 0.0 { r / p - 1.0 } else { -1.0 };
        BoundaryReport::from_fractions(p, r, os)
    }
}

/// R-value from recall and over-segmentation (both fractions).
pub fn r_value(recall: f64, os: f64) -> f64 {
    let r1 = ((1.0 - recall).powi(2) + os.powi(2)).sqrt();
    let r2 = (-os + recall - 1.0) / std::f64::consts::SQRT_2;
    1.0 - (r1.abs() + r2.abs()) / 2.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub n_hyp: usize,
    pub n_ref: usize,
    pub n_match: usize,
}

impl TokenCounts {
    pub fn merge(&mut self, other: &TokenCounts) {
        self.n_hyp += other.n_hyp;
        self.n_ref += other.n_ref;
        self.n_match += other.n_match;
    }

    pub fn report(&self) -> TokenReport {
        let precision = ratio(self.n_match as f64, self.n_hyp as f64);
        let recall = ratio(self.n_match as f64, self.n_ref as f64);
        TokenReport {
            precision: 100.0 * precision,
            recall: 100.0 * recall,
            f1: 100.0 * harmonic(precision, recall),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Hypothesized word tokens are the intervals between consecutive boundaries.
/// A token is correct when a not-yet-matched word has its onset within `tol`
/// of the token start and its offset within `tol` of the token end.
pub fn token_counts(hyp: &BoundarySet, words: &[WordInterval], tolerance_ms: f64) -> TokenCounts {
    let tol = ms_to_us(tolerance_ms);
    let times: Vec<Micros> = hyp.times_s.iter().map(|&t| secs_to_us(t)).collect();
    let refs: Vec<Span> = words
        .iter()
        .map(|w| Span::from_secs(w.onset_s, w.offset_s))
        .collect();
    let mut used = vec![false; refs.len()];
    let mut n_match = 0;
    let mut first = 0;
    for tok in times.windows(2) {
        let (ts, te) = (tok[0], tok[1]);
        while first < refs.len() && refs[first].start < ts - tol {
            first += 1;
        }
        for (j, r) in refs.iter().enumerate().skip(first) {
            if r.start > ts + tol {
                break;
            }
            if !used[j] && (r.start - ts).abs() <= tol && (r.end - te).abs() <= tol {
                used[j] = true;
                n_match += 1;
                break;
            }
        }
    }
    TokenCounts {
        n_hyp: times.len().saturating_sub(1),
        n_ref: refs.len(),
        n_match,
    }
}
