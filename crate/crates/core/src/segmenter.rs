//! Attention maps to attention segments and word boundaries.
//!
//! For each head, the per-frame attention profile is thresholded by keeping
//! the smallest set of frames (heaviest first) that carries a fixed fraction
//! of the head's total mass. Runs of kept frames are attention segments, and
//! word boundaries are placed at the midpoints of the gaps between adjacent
//! segments plus the outer edges of the first and last segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{ManifestEntry, Tensor};
use crate::time::frame_to_secs;

/// Relative slack when testing whether accumulated mass reached its target.
///
/// Profiles come from f32 tensors, so the same mass summed in a different
/// order can differ in the last bits. Both the thresholder and its
/// brute-force oracle use this comparison.
pub const MASS_RTOL: f64 = 1e-6;

/// Whether `acc` reaches the fraction `p` of `total`.
pub fn reaches_target(acc: f64, total: f64, p: f64) -> bool {
    acc >= p * total * (1.0 - MASS_RTOL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    /// The CLS query's attention over the frame keys.
    ClsRow,
    /// Total attention each frame receives from all frame queries.
    FrameSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    Union,
    PerHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    /// Model layer whose attention is used.
    pub layer: usize,
    /// Fraction in (0, 1] of each head's attention mass to retain.
    pub retain_mass: f64,
    pub profile_mode: ProfileMode,
    pub merge_mode: MergeMode,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            layer: 12,
            retain_mass: 0.9,
            profile_mode: ProfileMode::ClsRow,
            merge_mode: MergeMode::Union,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.retain_mass > 0.0 && self.retain_mass <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "retain_mass must be in (0, 1], got {}",
                self.retain_mass
            )));
        }
        Ok(())
    }
}

/// Per-head non-negative weights over the utterance frames (CLS excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    heads: usize,
    frames: usize,
    weights: Vec<f64>,
}

impl Profile {
    pub fn new(heads: usize, frames: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != heads * frames {
            return Err(Error::Shape(format!(
                "{} weights for {heads} heads x {frames} frames",
                weights.len()
            )));
        }
        Ok(Profile {
            heads,
            frames,
            weights,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let heads = rows.len();
        let frames = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != frames) {
            return Err(Error::Shape("profile rows differ in length".into()));
        }
        Profile::new(heads, frames, rows.concat())
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn head(&self, h: usize) -> &[f64] {
        &self.weights[h * self.frames..(h + 1) * self.frames]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks(self.frames.max(1)).take(self.heads)
    }
}

/// Builds the per-head frame profile at tensor layer position `layer_pos`.
pub fn attention_profile(
    attn: &Tensor,
    layer_pos: usize,
    has_cls: bool,
    mode: ProfileMode,
) -> Result<Profile> {
    let shape = attn.shape();
    let cls = has_cls as usize;
    if shape.len() != 3 && shape.len() != 4 {
        return Err(Error::Shape(format!(
            "attention tensor must have 3 or 4 dims, got {shape:?}"
        )));
    }
    if layer_pos >= shape[0] {
        return Err(Error::OutOfRange(format!(
            "layer position {layer_pos} with {} exported layers",
            shape[0]
        )));
    }
    let heads = shape[1];
    let keys = *shape.last().unwrap();
    if keys <= cls {
        return Err(Error::Shape(format!(
            "attention key axis {keys} has no frames"
        )));
    }
    let frames = keys - cls;
    let mut weights = Vec::with_capacity(heads * frames);
    match mode {
        ProfileMode::ClsRow => {
            if !has_cls {
                return Err(Error::InvalidArgument(
                    "cls_row profile needs a CLS position (has_cls = false)".into(),
                ));
            }
            for h in 0..heads {
                let row = if shape.len() == 3 {
                    attn.slice(&[layer_pos, h])?
                } else {
                    attn.slice(&[layer_pos, h, 0])?
                };
                weights.extend(row[cls..].iter().map(|&w| clean(w)));
            }
        }
        ProfileMode::FrameSum => {
            if shape.len() != 4 {
                return Err(Error::InvalidArgument(
                    "frame_sum profile needs a full [layer, head, query, key] map".into(),
                ));
            }
            for h in 0..heads {
                let map = attn.slice(&[layer_pos, h])?;
                let mut col = vec![0.0f64; frames];
                for q in cls..keys {
                    let row = &map[q * keys..(q + 1) * keys];
                    for (acc, &w) in col.iter_mut().zip(&row[cls..]) {
                        *acc += clean(w);
                    }
                }
                weights.extend(col);
            }
        }
    }
    Profile::new(heads, frames, weights)
}

fn clean(w: f32) -> f64 {
    if w.is_finite() && w > 0.0 {
        w as f64
    } else {
        0.0
    }
}

/// Keeps the smallest heaviest-first set of frames reaching `p` of the head's mass.
/// Equal weights are taken in frame order. An all-zero head keeps nothing.
pub fn threshold_head(weights: &[f64], p: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    let mut mask = vec![false; weights.len()];
    if total <= 0.0 {
        return mask;
    }
    let mut acc = 0.0;
    for &i in &order {
        mask[i] = true;
        acc += weights[i];
        if reaches_target(acc, total, p) {
            break;
        }
    }
    mask
}

/// Per-head kept-frame masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    pub heads: Vec<Vec<bool>>,
}

impl Masks {
    pub fn frames(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    /// Frames kept by at least one head.
    pub fn union(&self) -> Vec<bool> {
        let mut out = vec![false; self.frames()];
        for head in &self.heads {
            for (o, &k) in out.iter_mut().zip(head) {
                *o |= k;
            }
        }
        out
    }
}

pub fn threshold_profile(profile: &Profile, p: f64) -> Masks {
    Masks {
        heads: profile.rows().map(|row| threshold_head(row, p)).collect(),
    }
}

/// Maximal run of kept frames. `head` is `None` for segments of the union mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSegment {
    pub head: Option<usize>,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    /// Retained attention mass inside the segment, summed over contributing heads.
    pub mass: f64,
}

impl AttentionSegment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_merged(&self) -> bool {
        self.head.is_none()
    }
}

/// Half-open runs of `true` in `mask`.
pub fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &k) in mask.iter().enumerate() {
        match (k, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len()));
    }
    out
}

pub fn extract_segments(
    profile: &Profile,
    masks: &Masks,
    mode: MergeMode,
) -> Vec<AttentionSegment> {
    let mut segments = Vec::new();
    match mode {
        MergeMode::PerHead => {
            for (h, mask) in masks.heads.iter().enumerate() {
                let row = profile.head(h);
                for (s, e) in runs(mask) {
                    segments.push(AttentionSegment {
                        head: Some(h),
                        start_frame: s,
                        end_frame: e,
                        mass: row[s..e].iter().sum(),
                    });
                }
            }
            segments.sort_by_key(|seg| (seg.start_frame, seg.head));
        }
        MergeMode::Union => {
            for (s, e) in runs(&masks.union()) {
                let mass = masks
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(h, mask)| {
                        let row = profile.head(h);
                        (s..e).filter(|&f| mask[f]).map(|f| row[f]).sum::<f64>()
                    })
                    .sum();
                segments.push(AttentionSegment {
                    head: None,
                    start_frame: s,
                    end_frame: e,
                    mass,
                });
            }
        }
    }
    segments
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub utterance_id: String,
    pub times_s: Vec<f64>,
}

/// Boundaries at the first segment start, each inter-segment gap midpoint and
/// the last segment end. Segments must be disjoint and sorted.
pub fn infer_boundaries(
    utterance_id: &str,
    segments: &[AttentionSegment],
    duration_s: f64,
    frame_shift_ms: f64,
) -> BoundarySet {
    let mut frames: Vec<f64> = Vec::with_capacity(segments.len() + 1);
    if let (Some(first), Some(last)) = (segments.first(), segments.last()) {
        frames.push(first.start_frame as f64);
        for pair in segments.windows(2) {
            frames.push((pair[0].end_frame + pair[1].start_frame) as f64 / 2.0);
        }
        frames.push(last.end_frame as f64);
    }
    let mut times_s: Vec<f64> = Vec::with_capacity(frames.len());
    for f in frames {
        let t = frame_to_secs(f, frame_shift_ms).clamp(0.0, duration_s);
        if times_s.last().is_none_or(|&prev| t > prev) {
            times_s.push(t);
        }
    }
    BoundarySet {
        utterance_id: utterance_id.to_string(),
        times_s,
    }
}

/// Everything the segmenter derives from one utterance.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub masks: Masks,
    /// Segments in the configured merge mode.
    pub segments: Vec<AttentionSegment>,
    /// Union segments; these drive boundaries and all downstream metrics.
    pub merged: Vec<AttentionSegment>,
    pub boundaries: BoundarySet,
}

/// Runs threshold, extraction and boundary inference on a precomputed profile.
pub fn segment_profile(
    utterance_id: &str,
    profile: &Profile,
    retain_mass: f64,
    merge_mode: MergeMode,
    duration_s: f64,
    frame_shift_ms: f64,
) -> Segmentation {
    let masks = threshold_profile(profile, retain_mass);
    let merged = extract_segments(profile, &masks, MergeMode::Union);
    let segments = match merge_mode {
        MergeMode::Union => merged.clone(),
        MergeMode::PerHead => extract_segments(profile, &masks, MergeMode::PerHead),
    };
    let boundaries = infer_boundaries(utterance_id, &merged, duration_s, frame_shift_ms);
    Segmentation {
        masks,
        segments,
        merged,
        boundaries,
    }
}

/// Profile for `cfg.layer` of one manifest entry's attention tensor.
pub fn utterance_profile(
    attn: &Tensor,
    entry: &ManifestEntry,
    cfg: &SegmenterConfig,
) -> Result<Profile> {
    let pos = entry.layer_position(cfg.layer).ok_or_else(|| {
        Error::OutOfRange(format!(
            "utterance {:?}: layer {} not among exported layers {:?}",
            entry.utterance_id, cfg.layer, entry.layers
        ))
    })?;
    let profile = attention_profile(attn, pos, entry.has_cls, cfg.profile_mode)?;
    if profile.frames() as u64 != entry.num_frames {
        return Err(Error::FrameMismatch {
            id: entry.utterance_id.clone(),
            what: "attention profile",
            expected: entry.num_frames,
            actual: profile.frames() as u64,
        });
    }
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kept(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(kept(&threshold_head(&[0.1, 0.6, 0.2, 0.1], 0.6)), [1]);
        assert_eq!(kept(&threshold_head(&[0.25; 4], 0.5)), [0, 1]);
        assert_eq!(kept(&threshold_head(&[0.0, 0.3, 0.0, 0.7], 1.0)), [1, 3]);
        assert!(kept(&threshold_head(&[0.0; 5], 0.5)).is_empty());
    }

    #[test]
    fn threshold_on_f32_weights() {
        let w: Vec<f64> = [0.1f32, 0.6, 0.2, 0.1].iter().map(|&x| x as f64).collect();
        assert_eq!(kept(&threshold_head(&w, 0.6)), [1]);
    }

    #[test]
    fn cls_row_profile_drops_cls_column() {
        // 1 layer, 2 heads, CLS + 3 frames; softmax-like rows.
        let data = vec![0.4, 0.1, 0.3, 0.2, 0.1, 0.2, 0.3, 0.4];
        let t = Tensor::new(vec![1, 2, 4], data).unwrap();
        let p = attention_profile(&t, 0, true, ProfileMode::ClsRow).unwrap();
        assert_eq!(p.heads(), 2);
        assert_eq!(p.frames(), 3);
        let s0: f64 = p.head(0).iter().sum();
        assert!((s0 - (1.0 - 0.4)).abs() < 1e-6);
        let s1: f64 = p.head(1).iter().sum();
        assert!((s1 - 0.9).abs() < 1e-6);
    }

    #[test]
    fn cls_row_requires_cls() {
        let t = Tensor::new(vec![1, 1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(attention_profile(&t, 0, false, ProfileMode::ClsRow).is_err());
    }

    #[test]
    fn frame_sum_uniform_map_is_all_ones() {
        let f = 4;
        let t = Tensor::new(vec![1, 1, f, f], vec![1.0 / f as f32; f * f]).unwrap();
        let p = attention_profile(&t, 0, false, ProfileMode::FrameSum).unwrap();
        for &w in p.head(0) {
            assert!((w - 1.0).abs() < 1e-6);
        }
        let t3 = Tensor::new(vec![1, 1, 4], vec![0.25; 4]).unwrap();
        assert!(attention_profile(&t3, 0, false, ProfileMode::FrameSum).is_err());
    }

    #[test]
    fn frame_sum_excludes_cls_row_and_column() {
        // CLS + 2 frames. Query rows: CLS [.5,.25,.25], f0 [.2,.4,.4], f1 [.0,.5,.5]
        let data = vec![0.5, 0.25, 0.25, 0.2, 0.4, 0.4, 0.0, 0.5, 0.5];
        let t = Tensor::new(vec![1, 1, 3, 3], data).unwrap();
        let p = attention_profile(&t, 0, true, ProfileMode::FrameSum).unwrap();
        assert!((p.head(0)[0] - 0.9).abs() < 1e-6);
        assert!((p.head(0)[1] - 0.9).abs() < 1e-6);
        // cls_row on a full map uses query 0.
        let c = attention_profile(&t, 0, true, ProfileMode::ClsRow).unwrap();
        assert_eq!(c.head(0), &[0.25, 0.25]);
    }

    #[test]
    fn segment_examples() {
        let profile = Profile::from_rows(vec![vec![0.0, 0.3, 0.3, 0.0, 0.4]]).unwrap();
        let masks = Masks {
            heads: vec![vec![false, true, true, false, true]],
        };
        let segs = extract_segments(&profile, &masks, MergeMode::PerHead);
        let spans: Vec<_> = segs.iter().map(|s| (s.start_frame, s.end_frame)).collect();
        assert_eq!(spans, [(1, 3), (4, 5)]);
        assert_eq!(segs[0].head, Some(0));

        let profile =
            Profile::from_rows(vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.5, 0.5, 0.0]]).unwrap();
        let masks = Masks {
            heads: vec![
                vec![true, true, false, false],
                vec![false, true, true, false],
            ],
        };
        let segs = extract_segments(&profile, &masks, MergeMode::Union);
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start_frame, segs[0].end_frame), (0, 3));
        assert!(segs[0].head.is_none());
        assert!((segs[0].mass - 2.0).abs() < 1e-12);

        let masks = Masks {
            heads: vec![vec![false; 4], vec![false; 4]],
        };
        assert!(extract_segments(&profile, &masks, MergeMode::Union).is_empty());
    }

    fn seg(s: usize, e: usize) -> AttentionSegment {
        AttentionSegment {
            head: None,
            start_frame: s,
            end_frame: e,
            mass: 1.0,
        }
    }

    #[test]
    fn boundary_examples() {
        let b = infer_boundaries("u", &[seg(50, 75), seg(100, 130)], 3.0, 20.0);
        assert_eq!(b.times_s.len(), 3);
        for (got, want) in b.times_s.iter().zip([1.00, 1.75, 2.60]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        let b = infer_boundaries("u", &[seg(10, 20)], 1.0, 20.0);
        assert_eq!(b.times_s.len(), 2);
        assert!((b.times_s[0] - 0.2).abs() < 1e-9 && (b.times_s[1] - 0.4).abs() < 1e-9);
        assert!(infer_boundaries("u", &[], 1.0, 20.0).times_s.is_empty());
    }

    #[test]
    fn boundaries_clamped_to_duration() {
        let b = infer_boundaries("u", &[seg(0, 5), seg(8, 10)], 0.19, 20.0);
        assert_eq!(b.times_s.first(), Some(&0.0));
        assert_eq!(b.times_s.last(), Some(&0.19));
    }

    fn arb_profile() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], 1..40)
    }

    proptest! {
        #[test]
        fn threshold_is_monotone_in_p(w in arb_profile(), p1 in 0.01f64..1.0, p2 in 0.01f64..1.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let a = threshold_head(&w, lo);
            let b = threshold_head(&w, hi);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!x || *y);
            }
        }

        #[test]
        fn threshold_is_scale_invariant(w in arb_profile(), p in 0.01f64..=1.0, exp in -8i32..8) {
            let c = 2f64.powi(exp);
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            prop_assert_eq!(threshold_head(&w, p), threshold_head(&scaled, p));
        }

        #[test]
        fn union_segments_cover_union_of_heads(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 30), 1..5), p in 0.1f64..1.0) {
            let profile = Profile::from_rows(rows).unwrap();
            let masks = threshold_profile(&profile, p);
            let segs = extract_segments(&profile, &masks, MergeMode::Union);
            let mut covered = vec![false; profile.frames()];
            for s in &segs {
                for c in covered[s.start_frame..s.end_frame].iter_mut() { *c = true; }
            }
            prop_assert_eq!(covered, masks.union());
            for pair in segs.windows(2) {
                prop_assert!(pair[0].end_frame < pair[1].start_frame);
            }
        }

        #[test]
        fn boundaries_increase_within_duration(
            starts in prop::collection::btree_set(0usize..200, 0..20),
            dur in 0.5f64..5.0,
        ) {
            let v: Vec<usize> = starts.into_iter().collect();
            // Turn sorted points into disjoint segments [v[i], v[i]+1) separated by gaps.
            let segs: Vec<AttentionSegment> = v.iter().step_by(2).map(|&s| seg(s, s + 1)).collect();
            let segs: Vec<AttentionSegment> = segs.into_iter().fold(Vec::new(), |mut acc: Vec<AttentionSegment>, s| {
                if acc.last().is_none_or(|l| l.end_frame < s.start_frame) { acc.push(s); }
                acc
            });
            let b = infer_boundaries("u", &segs, dur, 20.0);
            for pair in b.times_s.windows(2) { prop_assert!(pair[0] < pair[1]); }
            for &t in &b.times_s { prop_assert!((0.0..=dur).contains(&t)); }
        }
    }
}
