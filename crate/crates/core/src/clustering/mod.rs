//! Segment pooling and the K-means lexicon.

mod kmeans;

pub use kmeans::{
    kmeans_assign, kmeans_fit, squared_distance, ClusterModel, KMeansConfig, KMeansFit,
    ModelSidecar, VectorSet,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::AttentionSegment;
use crate::tensor_store::{ManifestEntry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

/// Optional transform applied to pooled vectors before clustering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorTransform {
    #[default]
    None,
    /// Unit L2 length, so squared Euclidean distance ranks like cosine distance.
    L2Normalize,
    /// Per-dimension zero mean / unit variance over the whole set.
    Standardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledSegment {
    pub utterance_id: String,
    pub segment: AttentionSegment,
    pub vector: Vec<f32>,
    pub pooling: Pooling,
}

/// Offset of the first real frame on a feature tensor's frame axis
/// (1 when the CLS row was exported alongside the frames).
pub fn feature_frame_offset(features: &Tensor, entry: &ManifestEntry) -> Result<usize> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "feature tensor must be [layer, frame, dim], got {shape:?}"
        )));
    }
    let frames = shape[1] as u64;
    if frames == entry.num_frames {
        Ok(0)
    } else if entry.has_cls && frames == entry.num_frames + 1 {
        Ok(1)
    } else {
        Err(Error::FrameMismatch {
            id: entry.utterance_id.clone(),
            what: "feature frame axis",
            expected: entry.num_frames,
            actual: frames,
        })
    }
}

/// Pools `features[layer_pos]` over each segment's frames.
pub fn pool_segment_features(
    utterance_id: &str,
    features: &Tensor,
    segments: &[AttentionSegment],
    layer_pos: usize,
    frame_offset: usize,
    pooling: Pooling,
) -> Result<Vec<PooledSegment>> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "feature tensor must be [layer, frame, dim], got {shape:?}"
        )));
    }
    let (frames, dim) = (shape[1] - frame_offset.min(shape[1]), shape[2]);
    let layer = features.slice(&[layer_pos])?;
    let frame = |f: usize| {
        let row = f + frame_offset;
        &layer[row * dim..(row + 1) * dim]
    };
    segments
        .iter()
        .map(|seg| {
            if seg.start_frame >= seg.end_frame || seg.end_frame > frames {
                return Err(Error::OutOfRange(format!(
                    "utterance {utterance_id:?}: segment [{}, {}) outside {frames} feature frames",
                    seg.start_frame, seg.end_frame
                )));
            }
            let vector = match pooling {
                Pooling::Mean => {
                    let mut acc = vec![0.0f64; dim];
                    for f in seg.start_frame..seg.end_frame {
                        for (a, &x) in acc.iter_mut().zip(frame(f)) {
                            *a += x as f64;
                        }
                    }
                    let n = seg.len() as f64;
                    acc.into_iter().map(|a| (a / n) as f32).collect()
                }
                Pooling::Max => {
                    let mut acc = frame(seg.start_frame).to_vec();
                    for f in seg.start_frame + 1..seg.end_frame {
                        for (a, &x) in acc.iter_mut().zip(frame(f)) {
                            *a = a.max(x);
                        }
                    }
                    acc
                }
            };
            Ok(PooledSegment {
                utterance_id: utterance_id.to_string(),
                segment: seg.clone(),
                vector,
                pooling,
            })
        })
        .collect()
}

pub fn apply_transform(vectors: &mut [Vec<f32>], transform: VectorTransform) {
    match transform {
        VectorTransform::None => {}
        VectorTransform::L2Normalize => {
            for v in vectors.iter_mut() {
                let norm = v
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > 0.0 {
                    for x in v.iter_mut() {
                        *x = (*x as f64 / norm) as f32;
                    }
                }
            }
        }
        VectorTransform::Standardize => {
            let Some(dim) = vectors.first().map(Vec::len) else {
                return;
            };
            let n = vectors.len() as f64;
            let mut mean = vec![0.0f64; dim];
            for v in vectors.iter() {
                for (m, &x) in mean.iter_mut().zip(v) {
                    *m += x as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0f64; dim];
            for v in vectors.iter() {
                for ((s, &x), m) in var.iter_mut().zip(v).zip(&mean) {
                    *s += (x as f64 - m).powi(2);
                }
            }
            let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
            for v in vectors.iter_mut() {
                for ((x, m), s) in v.iter_mut().zip(&mean).zip(&std) {
                    let centered = *x as f64 - m;
                    *x = if *s > 0.0 {
                        (centered / s) as f32
                    } else {
                        centered as f32
                    };
                }
            }
        }
    }
}
