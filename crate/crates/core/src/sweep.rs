//! Grid search over layer, retained mass, pooling and cluster count.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignment::Corpus;
use crate::clustering::Pooling;
use crate::error::{Error, Result};
use crate::pipeline::{
    cluster_and_score, corpus_profiles, evaluate_config, pool_corpus, score_segmentation,
    segment_with_profiles, ClusterConfig, EvalConfig, Evaluation, MetricReport,
};
use crate::seg_metrics::BoundaryOptions;
use crate::segmenter::SegmenterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    AScore,
    BoundaryF1,
    Wd,
}

impl Objective {
    pub fn value(&self, report: &MetricReport) -> Option<f64> {
        match self {
            Objective::AScore => Some(report.area.a_score),
            Objective::BoundaryF1 => Some(report.boundary.f1),
            Objective::Wd => report.word.as_ref().map(|w| w.wd.mean),
        }
    }
}

/// `{0.50, 0.55, ..., 0.95, 0.99}` plus `0.10`, ascending.
pub fn default_thresholds() -> Vec<f64> {
    let mut t = vec![0.10];
    t.extend((0..10).map(|i| (50 + 5 * i) as f64 / 100.0));
    t.push(0.99);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    /// Empty means every layer exported for all utterances.
    pub layers: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub poolings: Vec<Pooling>,
    pub ks: Vec<usize>,
    pub objectives: Vec<Objective>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            layers: Vec::new(),
            thresholds: default_thresholds(),
            poolings: vec![Pooling::Mean],
            ks: vec![4096],
            objectives: vec![Objective::AScore, Objective::BoundaryF1],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("sweep grid: {m}")));
        if self.thresholds.is_empty() || self.objectives.is_empty() {
            return bad("thresholds and objectives must be non-empty");
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return bad("thresholds must lie in (0, 1]");
        }
        if self.clusters()
            && (self.poolings.is_empty() || self.ks.is_empty() || self.ks.contains(&0))
        {
            return bad("the wd objective needs non-empty poolings and positive ks");
        }
        Ok(())
    }

    /// Clustering runs only when word detectors are an objective.
    pub fn clusters(&self) -> bool {
        self.objectives.contains(&Objective::Wd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub retain_mass: f64,
    pub pooling: Option<Pooling>,
    pub k: Option<usize>,
}

impl SweepCell {
    /// `base` with this cell's hyperparameters substituted.
    pub fn apply(&self, base: &EvalConfig) -> EvalConfig {
        let mut cfg = base.clone();
        cfg.segmenter.layer = self.layer;
        cfg.segmenter.retain_mass = self.retain_mass;
        cfg.clustering = match (self.pooling, self.k) {
            (Some(pooling), Some(k)) => Some(ClusterConfig {
                pooling,
                k,
                ..base.clustering.clone().unwrap_or_default()
            }),
            _ => None,
        };
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: SweepCell,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub objective: Objective,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
    pub best: Vec<BestCell>,
}

impl SweepResult {
    pub fn best_for(&self, objective: Objective) -> Option<&CellResult> {
        self.best
            .iter()
            .find(|b| b.objective == objective)
            .map(|b| &self.cells[b.index])
    }

    pub fn leaderboard(&self) -> String {
        let mut s = String::new();
        for b in &self.best {
            let c = &self.cells[b.index].cell;
            let _ = writeln!(
                s,
                "best {:?}: {:.2} at layer {} p {:.2}{}",
                b.objective,
                b.value,
                c.layer,
                c.retain_mass,
                match (c.pooling, c.k) {
                    (Some(p), Some(k)) => format!(" pooling {p:?} k {k}"),
                    _ => String::new(),
                }
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{}", MetricReport::table_header());
        for c in &self.cells {
            let _ = writeln!(s, "{}", c.report.table_row());
        }
        s
    }
}

/// Picks the first cell with the largest objective value. Cells are in
/// ascending (layer, threshold) order, so ties go to the lower layer, then
/// the lower threshold.
pub fn select_best(cells: &[CellResult], objective: Objective) -> Option<BestCell> {
    let mut best: Option<BestCell> = None;
    for (index, c) in cells.iter().enumerate() {
        let Some(value) = objective.value(&c.report) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| value > b.value) {
            best = Some(BestCell {
                objective,
                index,
                value,
            });
        }
    }
    best
}

/// Evaluates every grid cell on `corpus`, computing each layer's attention
/// profiles once.
pub fn run_sweep(corpus: &Corpus, grid: &SweepGrid, base: &EvalConfig) -> Result<SweepResult> {
    grid.validate()?;
    base.validate()?;
    let available = corpus.common_layers();
    let mut layers = if grid.layers.is_empty() {
        available.clone()
    } else {
        grid.layers.clone()
    };
    layers.sort_unstable();
    layers.dedup();
    if let Some(l) = layers.iter().find(|l| !available.contains(l)) {
        return Err(Error::OutOfRange(format!(
            "layer {l} not exported for every utterance (common layers {available:?})"
        )));
    }
    let mut thresholds = grid.thresholds.clone();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let opts = BoundaryOptions {
        tolerance_ms: base.tolerance_ms,
        include_edges: base.include_edges,
    };
    let mut cells = Vec::new();
    for &layer in &layers {
        let seg_cfg = SegmenterConfig {
            layer,
            ..base.segmenter.clone()
        };
        let profiles = corpus_profiles(corpus, &seg_cfg)?;
        log::info!("layer {layer}: profiles ready");
        for &p in &thresholds {
            let results = segment_with_profiles(corpus, &profiles, p, seg_cfg.merge_mode);
            let scores = score_segmentation(corpus, &results, &opts)?;
            let report = MetricReport {
                layer,
                retain_mass: p,
                tolerance_ms: base.tolerance_ms,
                include_edges: base.include_edges,
                n_utterances: corpus.len(),
                n_words: corpus.word_count(),
                n_segments: results.iter().map(|r| r.seg.merged.len()).sum(),
                area: scores.area,
                boundary: scores.boundary,
                token: scores.token,
                word: None,
            };
            if !grid.clusters() {
                cells.push(CellResult {
                    cell: SweepCell {
                        layer,
                        retain_mass: p,
                        pooling: None,
                        k: None,
                    },
                    report,
                });
                continue;
            }
            for &pooling in &grid.poolings {
                let cell_base = SweepCell {
                    layer,
                    retain_mass: p,
                    pooling: Some(pooling),
                    k: None,
                };
                let feature_layer = cell_base
                    .apply(base)
                    .clustering
                    .and_then(|c| c.feature_layer)
                    .unwrap_or(layer);
                let pooled = pool_corpus(corpus, &results, feature_layer, pooling)?;
                for &k in &grid.ks {
                    let cell = SweepCell {
                        k: Some(k),
                        ..cell_base.clone()
                    };
                    let ccfg = cell.apply(base).clustering.expect("cell has clustering");
                    let (word, _) = cluster_and_score(corpus, &pooled, &ccfg)?;
                    log::info!(
                        "layer {layer} p {p:.2} {pooling:?} k {k}: wd {:.1}",
                        word.wd.mean
                    );
                    cells.push(CellResult {
                        cell,
                        report: MetricReport {
                            word: Some(word),
                            ..report.clone()
                        },
                    });
                }
            }
        }
    }
    let best = grid
        .objectives
        .iter()
        .filter_map(|&o| select_best(&cells, o))
        .collect();
    Ok(SweepResult { cells, best })
}

/// Re-evaluates the best dev cell for `objective` on a held-out corpus.
pub fn evaluate_best(
    test: &Corpus,
    sweep: &SweepResult,
    objective: Objective,
    base: &EvalConfig,
) -> Result<Evaluation> {
    let best = sweep
        .best_for(objective)
        .ok_or_else(|| Error::InvalidArgument(format!("no best cell for {objective:?}")))?;
    evaluate_config(test, &best.cell.apply(base))
}
