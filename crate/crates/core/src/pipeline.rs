//! End-to-end evaluation: segment, pool, cluster and score a corpus.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignment::Corpus;
use crate::clustering::{
    apply_transform, feature_frame_offset, kmeans_fit, pool_segment_features, KMeansConfig,
    KMeansFit, PooledSegment, Pooling, VectorSet, VectorTransform,
};
use crate::error::{Error, Result};
use crate::lexicon_metrics::{
    ned_coverage, word_detection, DetectorReport, Fragment, MatchingReport, NedOptions,
    RecallDenominator,
};
use crate::par;
use crate::seg_metrics::{
    area_counts, assign_segments_to_words, boundary_counts, token_counts, AreaCounts, AreaReport,
    BoundaryCounts, BoundaryOptions, BoundaryReport, TokenCounts, TokenReport,
};
use crate::segmenter::{
    segment_profile, utterance_profile, MergeMode, Profile, Segmentation, SegmenterConfig,
};
use crate::stats::mean_std;
use crate::time::frame_to_secs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub pooling: Pooling,
    pub transform: VectorTransform,
    /// Layer whose features are pooled; the attention layer when unset.
    pub feature_layer: Option<usize>,
    pub n_seeds: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub recall_denominator: RecallDenominator,
    pub ned_max_pairs: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 4096,
            pooling: Pooling::Mean,
            transform: VectorTransform::None,
            feature_layer: None,
            n_seeds: 5,
            seed: 0,
            max_iter: 100,
            tol: 1e-4,
            recall_denominator: RecallDenominator::SegmentCount,
            ned_max_pairs: 10_000,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_seeds == 0 || self.max_iter == 0 {
            return Err(Error::InvalidArgument(
                "k, n_seeds and max_iter must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Seed of clustering run `i`.
    pub fn run_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub segmenter: SegmenterConfig,
    pub tolerance_ms: f64,
    pub include_edges: bool,
    pub clustering: Option<ClusterConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            segmenter: SegmenterConfig::default(),
            tolerance_ms: 20.0,
            include_edges: false,
            clustering: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.segmenter.validate()?;
        if !(self.tolerance_ms > 0.0 && self.tolerance_ms.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tolerance_ms must be positive, got {}",
                self.tolerance_ms
            )));
        }
        if let Some(c) = &self.clustering {
            c.validate()?;
        }
        Ok(())
    }
}

/// Segmentation of one corpus utterance.
#[derive(Debug, Clone)]
pub struct UtteranceResult {
    pub utterance_id: String,
    pub frame_shift_ms: f64,
    pub duration_s: f64,
    pub seg: Segmentation,
}

/// Attention profiles for every utterance, in corpus order.
pub fn corpus_profiles(corpus: &Corpus, cfg: &SegmenterConfig) -> Result<Vec<Profile>> {
    par::map(corpus.utterances(), |u| {
        let attn = u.attention.load()?;
        utterance_profile(&attn, &u.entry, cfg)
    })
    .into_iter()
    .collect()
}

pub fn segment_with_profiles(
    corpus: &Corpus,
    profiles: &[Profile],
    retain_mass: f64,
    merge_mode: MergeMode,
) -> Vec<UtteranceResult> {
    let items: Vec<_> = corpus.utterances().iter().zip(profiles).collect();
    par::map(&items, |(u, profile)| UtteranceResult {
        utterance_id: u.id().to_string(),
        frame_shift_ms: u.entry.frame_shift_ms,
        duration_s: u.duration_s(),
        seg: segment_profile(
            u.id(),
            profile,
            retain_mass,
            merge_mode,
            u.duration_s(),
            u.entry.frame_shift_ms,
        ),
    })
}

pub fn segment_corpus(corpus: &Corpus, cfg: &SegmenterConfig) -> Result<Vec<UtteranceResult>> {
    cfg.validate()?;
    let profiles = corpus_profiles(corpus, cfg)?;
    Ok(segment_with_profiles(
        corpus,
        &profiles,
        cfg.retain_mass,
        cfg.merge_mode,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub area: AreaReport,
    pub boundary: BoundaryReport,
    pub token: TokenReport,
    pub area_counts: AreaCounts,
    pub boundary_counts: BoundaryCounts,
    pub token_counts: TokenCounts,
}

pub fn score_segmentation(
    corpus: &Corpus,
    results: &[UtteranceResult],
    opts: &BoundaryOptions,
) -> Result<SegmentationScores> {
    check_aligned(corpus, results)?;
    let items: Vec<_> = corpus.utterances().iter().zip(results).collect();
    let per_utt = par::map(&items, |(u, r)| {
        let words = &u.alignment.words;
        let assignments = assign_segments_to_words(&r.seg.merged, words, r.frame_shift_ms);
        (
            area_counts(&assignments, words, r.frame_shift_ms),
            boundary_counts(&r.seg.boundaries, words, r.duration_s, opts),
            token_counts(&r.seg.boundaries, words, opts.tolerance_ms),
        )
    });
    let mut area = AreaCounts::default();
    let mut boundary = BoundaryCounts::default();
    let mut token = TokenCounts::default();
    for (a, b, t) in &per_utt {
        area.merge(a);
        boundary.merge(b);
        token.merge(t);
    }
    Ok(SegmentationScores {
        area: area.report()?,
        boundary: boundary.report(),
        token: token.report(),
        area_counts: area,
        boundary_counts: boundary,
        token_counts: token,
    })
}

fn check_aligned(corpus: &Corpus, results: &[UtteranceResult]) -> Result<()> {
    if corpus.len() != results.len()
        || corpus
            .utterances()
            .iter()
            .zip(results)
            .any(|(u, r)| u.id() != r.utterance_id)
    {
        return Err(Error::InvalidArgument(
            "segmentation results do not follow corpus order".into(),
        ));
    }
    Ok(())
}

/// Pooled segment vectors with the word each one is credited to.
#[derive(Debug, Clone, Default)]
pub struct PooledCorpus {
    pub segments: Vec<PooledSegment>,
    pub words: Vec<Option<String>>,
    /// Segment spans in seconds; `cluster` is filled in after clustering.
    pub fragments: Vec<Fragment>,
}

impl PooledCorpus {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn fragments_with(&self, labels: &[usize]) -> Vec<Fragment> {
        self.fragments
            .iter()
            .zip(labels)
            .map(|(f, &c)| Fragment {
                cluster: c,
                ..f.clone()
            })
            .collect()
    }
}

type PooledUtterance = (Vec<PooledSegment>, Vec<Option<String>>, Vec<Fragment>);

pub fn pool_corpus(
    corpus: &Corpus,
    results: &[UtteranceResult],
    feature_layer: usize,
    pooling: Pooling,
) -> Result<PooledCorpus> {
    check_aligned(corpus, results)?;
    let items: Vec<_> = corpus.utterances().iter().zip(results).collect();
    let per_utt: Vec<Result<PooledUtterance>> = par::map(&items, |(u, r)| {
        let segs = &r.seg.merged;
        if segs.is_empty() {
            return Ok(Default::default());
        }
        let pos = u.entry.layer_position(feature_layer).ok_or_else(|| {
            Error::OutOfRange(format!(
                "utterance {:?}: feature layer {feature_layer} not among exported layers {:?}",
                u.id(),
                u.entry.layers
            ))
        })?;
        let feats = u.features.load()?;
        let offset = feature_frame_offset(&feats, &u.entry)?;
        let pooled = pool_segment_features(u.id(), &feats, segs, pos, offset, pooling)?;
        let words = assign_segments_to_words(segs, &u.alignment.words, r.frame_shift_ms)
            .iter()
            .map(|a| a.hit_word().map(|w| u.alignment.words[w].word.clone()))
            .collect();
        let fragments = segs
            .iter()
            .map(|s| Fragment {
                cluster: 0,
                utterance_id: u.id().to_string(),
                onset_s: frame_to_secs(s.start_frame as f64, r.frame_shift_ms).min(r.duration_s),
                offset_s: frame_to_secs(s.end_frame as f64, r.frame_shift_ms).min(r.duration_s),
            })
            .collect();
        Ok((pooled, words, fragments))
    });
    let mut out = PooledCorpus::default();
    for item in per_utt {
        let (s, w, f) = item?;
        out.segments.extend(s);
        out.words.extend(w);
        out.fragments.extend(f);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterRun {
    pub seed: u64,
    pub fit: KMeansFit,
    pub detection: DetectorReport,
    pub matching: Option<MatchingReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordReport {
    /// Clusters requested and clusters actually fitted (fewer when there
    /// are fewer segments than clusters).
    pub k: usize,
    pub k_fitted: usize,
    pub pooling: Pooling,
    pub seeds: Vec<u64>,
    pub n_fragments: usize,
    pub purity: MeanStd,
    pub wd: MeanStd,
    /// Absent when the corpus has no phone tier.
    pub ned: Option<MeanStd>,
    pub coverage: Option<MeanStd>,
    pub m_score: Option<MeanStd>,
}

/// Clusters pooled segments `n_seeds` times and scores every run.
/// Returns the report and the runs in seed order.
pub fn cluster_and_score(
    corpus: &Corpus,
    pooled: &PooledCorpus,
    cfg: &ClusterConfig,
) -> Result<(WordReport, Vec<ClusterRun>)> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.n_seeds).map(|i| cfg.run_seed(i)).collect();
    let n = pooled.len();
    let zero = |k_fitted| WordReport {
        k: cfg.k,
        k_fitted,
        pooling: cfg.pooling,
        seeds: seeds.clone(),
        n_fragments: n,
        purity: MeanStd::default(),
        wd: MeanStd::default(),
        ned: None,
        coverage: None,
        m_score: None,
    };
    if n == 0 {
        log::warn!("no segments to cluster");
        return Ok((zero(0), Vec::new()));
    }
    let k = cfg.k.min(n);
    if k < cfg.k {
        log::warn!("only {n} segments for k = {}; fitting {k} clusters", cfg.k);
    }

    let mut vectors: Vec<Vec<f32>> = pooled.segments.iter().map(|s| s.vector.clone()).collect();
    apply_transform(&mut vectors, cfg.transform);
    let data = VectorSet::from_rows(&vectors)?;
    let mut tokens: HashMap<String, usize> = HashMap::new();
    for u in corpus.utterances() {
        for w in &u.alignment.words {
            *tokens.entry(w.word.clone()).or_default() += 1;
        }
    }
    let has_phones = corpus
        .utterances()
        .iter()
        .all(|u| u.alignment.words.is_empty() || !u.alignment.phones.is_empty());
    if !has_phones {
        log::warn!("phone tier missing; NED and coverage skipped");
    }

    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let kcfg = KMeansConfig {
            k,
            seed,
            max_iter: cfg.max_iter,
            tol: cfg.tol,
        };
        let fit = kmeans_fit(&data, &kcfg)?;
        let detection =
            word_detection(&fit.labels, &pooled.words, &cfg.recall_denominator, &tokens)?;
        let matching = if has_phones {
            let opts = NedOptions {
                max_pairs: cfg.ned_max_pairs,
                seed,
            };
            Some(ned_coverage(
                &pooled.fragments_with(&fit.labels),
                corpus.utterances().iter().map(|u| &u.alignment),
                &opts,
            )?)
        } else {
            None
        };
        runs.push(ClusterRun {
            seed,
            fit,
            detection,
            matching,
        });
    }

    let col = |f: &dyn Fn(&ClusterRun) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    let mut report = zero(k);
    report.purity = col(&|r| r.detection.purity);
    report.wd = col(&|r| r.detection.wd as f64);
    if has_phones {
        let m = |r: &ClusterRun| r.matching.expect("phones present");
        report.ned = Some(col(&|r| m(r).ned));
        report.coverage = Some(col(&|r| m(r).coverage));
        report.m_score = Some(col(&|r| m(r).m_score));
    }
    Ok((report, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub layer: usize,
    pub retain_mass: f64,
    pub tolerance_ms: f64,
    pub include_edges: bool,
    pub n_utterances: usize,
    pub n_words: usize,
    pub n_segments: usize,
    pub area: AreaReport,
    pub boundary: BoundaryReport,
    pub token: TokenReport,
    pub word: Option<WordReport>,
}

impl MetricReport {
    pub fn table_header() -> String {
        format!(
            "{:>5} {:>5} | {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>7} {:>6} | {:>12} {:>14} | {:>6} {:>12} {:>12} {:>12}",
            "layer", "p", "WC", "tIoU", "CD", "A", "P", "R", "F1", "OS", "R-val", "Purity", "WD", "tokF1", "NED", "Cov", "M"
        )
    }

    pub fn table_row(&self) -> String {
        let ms = |m: Option<MeanStd>, prec: usize| match m {
            Some(m) => format!("{:.prec$}±{:.prec$}", m.mean, m.std),
            None => "-".to_string(),
        };
        let w = self.word.as_ref();
        format!(
            "{:>5} {:>5.2} | {:>6.2} {:>6.2} {:>6.2} {:>6.2} | {:>6.2} {:>6.2} {:>6.2} {:>7.2} {:>6.2} | {:>12} {:>14} | {:>6.2} {:>12} {:>12} {:>12}",
            self.layer,
            self.retain_mass,
            self.area.wc,
            self.area.tiou,
            self.area.cd_ms,
            self.area.a_score,
            self.boundary.precision,
            self.boundary.recall,
            self.boundary.f1,
            self.boundary.os,
            self.boundary.r_value,
            ms(w.map(|w| w.purity), 2),
            ms(w.map(|w| w.wd), 1),
            self.token.f1,
            ms(w.and_then(|w| w.ned), 2),
            ms(w.and_then(|w| w.coverage), 2),
            ms(w.and_then(|w| w.m_score), 2),
        )
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::table_header());
        let _ = writeln!(s, "{}", self.table_row());
        s
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub results: Vec<UtteranceResult>,
    pub pooled: Option<PooledCorpus>,
    pub runs: Vec<ClusterRun>,
}

pub fn evaluate_config(corpus: &Corpus, cfg: &EvalConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let profiles = corpus_profiles(corpus, &cfg.segmenter)?;
    evaluate_with_profiles(corpus, &profiles, cfg)
}

/// Like [`evaluate_config`] with the profiles of `cfg.segmenter.layer`
/// already computed.
pub fn evaluate_with_profiles(
    corpus: &Corpus,
    profiles: &[Profile],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("no utterances"));
    }
    let seg = &cfg.segmenter;
    let results = segment_with_profiles(corpus, profiles, seg.retain_mass, seg.merge_mode);
    evaluate_results(corpus, results, cfg)
}

/// Scores (and optionally clusters) an existing segmentation of `corpus`,
/// e.g. one read back from disk. Results must follow corpus order.
pub fn evaluate_results(
    corpus: &Corpus,
    results: Vec<UtteranceResult>,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("no utterances"));
    }
    let seg = &cfg.segmenter;
    let opts = BoundaryOptions {
        tolerance_ms: cfg.tolerance_ms,
        include_edges: cfg.include_edges,
    };
    let scores = score_segmentation(corpus, &results, &opts)?;
    let (word, pooled, runs) = match &cfg.clustering {
        Some(c) => {
            let pooled = pool_corpus(
                corpus,
                &results,
                c.feature_layer.unwrap_or(seg.layer),
                c.pooling,
            )?;
            let (word, runs) = cluster_and_score(corpus, &pooled, c)?;
            (Some(word), Some(pooled), runs)
        }
        None => (None, None, Vec::new()),
    };
    let report = MetricReport {
        layer: seg.layer,
        retain_mass: seg.retain_mass,
        tolerance_ms: cfg.tolerance_ms,
        include_edges: cfg.include_edges,
        n_utterances: corpus.len(),
        n_words: corpus.word_count(),
        n_segments: results.iter().map(|r| r.seg.merged.len()).sum(),
        area: scores.area,
        boundary: scores.boundary,
        token: scores.token,
        word,
    };
    Ok(Evaluation {
        report,
        results,
        pooled,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthSpec};

    fn synth(n: usize, vocab: usize) -> Corpus {
        let spec = SynthSpec {
            n_utterances: n,
            vocab_size: vocab,
            seed: 11,
            ..SynthSpec::default()
        };
        generate_corpus(&spec).unwrap().corpus().unwrap()
    }

    fn cfg(p: f64, k: Option<usize>) -> EvalConfig {
        EvalConfig {
            segmenter: SegmenterConfig {
                retain_mass: p,
                ..SegmenterConfig::default()
            },
            clustering: k.map(|k| ClusterConfig {
                k,
                ..ClusterConfig::default()
            }),
            ..EvalConfig::default()
        }
    }

    #[test]
    fn perfect_synthetic_corpus() {
        let corpus = synth(60, 6);
        let ev = evaluate_config(&corpus, &cfg(1.0, Some(6))).unwrap();
        let r = &ev.report;
        assert_eq!(r.area.wc, 100.0);
        assert_eq!(
            r.area.a_score,
            100.0 * 2.0 * r.area.tiou / (100.0 + r.area.tiou)
        );
        assert_eq!(r.boundary.f1, 100.0);
        let w = r.word.as_ref().unwrap();
        assert_eq!(
            w.purity,
            MeanStd {
                mean: 100.0,
                std: 0.0
            }
        );
        assert_eq!(
            w.wd,
            MeanStd {
                mean: 6.0,
                std: 0.0
            }
        );
        // Segments cover word centres only, so transcripts of one word can
        // still differ and coverage stays below 100.
        assert!(w.ned.is_some() && w.coverage.unwrap().mean < 100.0);
        assert_eq!(ev.runs.len(), 5);
        assert!(r.to_table().lines().count() == 2);
    }

    #[test]
    fn full_word_peaks_with_gaps_give_exact_spans() {
        let spec = SynthSpec {
            n_utterances: 40,
            vocab_size: 6,
            gap_frames: [1, 3],
            plant_full_words: true,
            seed: 4,
            ..SynthSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap().corpus().unwrap();
        let r = evaluate_config(&corpus, &cfg(1.0, Some(6))).unwrap().report;
        assert_eq!(
            (r.area.wc, r.area.tiou, r.area.cd_ms, r.area.a_score),
            (100.0, 100.0, 0.0, 100.0)
        );
        // A gap yields two reference boundaries but one inferred midpoint.
        assert!(r.boundary.recall < 100.0);
        let w = r.word.unwrap();
        assert_eq!((w.purity.mean, w.wd.mean), (100.0, 6.0));
        assert_eq!(w.ned.unwrap().mean, 0.0);
    }

    #[test]
    fn vanishing_segments_do_not_crash() {
        let corpus = synth(5, 4);
        let profiles = corpus_profiles(&corpus, &SegmenterConfig::default()).unwrap();
        let zeroed: Vec<Profile> = profiles
            .iter()
            .map(|p| {
                Profile::new(p.heads(), p.frames(), vec![0.0; p.heads() * p.frames()]).unwrap()
            })
            .collect();
        let ev = evaluate_with_profiles(&corpus, &zeroed, &cfg(0.5, Some(4))).unwrap();
        assert_eq!(ev.report.n_segments, 0);
        assert_eq!(ev.report.area.wc, 0.0);
        assert_eq!(ev.report.boundary.f1, 0.0);
        assert_eq!(ev.report.word.unwrap().wd.mean, 0.0);
    }

    #[test]
    fn wider_tolerance_never_lowers_recall() {
        let spec = SynthSpec {
            n_utterances: 30,
            noise_floor: 0.3,
            peak_mass: 0.7,
            seed: 2,
            ..SynthSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap().corpus().unwrap();
        let mut c = cfg(0.8, None);
        let r20 = evaluate_config(&corpus, &c).unwrap().report.boundary.recall;
        c.tolerance_ms = 30.0;
        let r30 = evaluate_config(&corpus, &c).unwrap().report.boundary.recall;
        assert!(r30 >= r20);
    }

    #[test]
    fn missing_layer_is_an_error() {
        let corpus = synth(2, 3);
        let mut c = cfg(0.9, None);
        c.segmenter.layer = 3;
        assert!(evaluate_config(&corpus, &c).is_err());
    }
}
