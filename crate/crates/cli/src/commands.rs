use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use std_engine::alignment::{
    join_corpus, read_alignments, Corpus, TensorSource, Utterance, UtteranceAlignment,
};
use std_engine::clustering::{apply_transform, kmeans_fit, KMeansConfig, VectorSet};
use std_engine::lexicon_metrics::{classfile_string, Fragment};
use std_engine::pipeline::{
    corpus_profiles, evaluate_config, evaluate_results, pool_corpus, segment_with_profiles,
    ClusterConfig, Evaluation, MetricReport, PooledCorpus,
};
use std_engine::seg_metrics::BoundaryReport;
use std_engine::sweep::{evaluate_best, run_sweep};
use std_engine::synth::generate_corpus;
use std_engine::tensor_store::read_manifests;

use crate::config::{require_exists, RunConfig};
use crate::output::{self, ClusterRecord, MaskRecord, PrRow, UtteranceSegments};
use crate::CliError;

fn config_err(e: std_engine::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

/// Loads manifests and alignments. Without alignments every utterance gets
/// an empty word tier spanning its frames.
fn load_corpus(
    manifests: &[PathBuf],
    alignments: &[PathBuf],
    need_alignments: bool,
) -> Result<Corpus, CliError> {
    require_exists("manifest", manifests)?;
    if need_alignments || !alignments.is_empty() {
        require_exists("alignments", alignments)?;
    }
    let entries = read_manifests(manifests)?;
    if alignments.is_empty() {
        let utterances = entries
            .into_iter()
            .map(|entry| Utterance {
                alignment: UtteranceAlignment {
                    utterance_id: entry.utterance_id.clone(),
                    duration_s: entry.nominal_duration_s(),
                    words: Vec::new(),
                    phones: Vec::new(),
                },
                attention: TensorSource::File(entry.attention_file()),
                features: TensorSource::File(entry.feature_file()),
                entry,
            })
            .collect();
        return Ok(Corpus::from_utterances(utterances)?);
    }
    let mut aligned = Vec::new();
    for p in alignments {
        aligned.extend(read_alignments(p)?);
    }
    let (corpus, report) = join_corpus(entries, aligned)?;
    report.log();
    log::info!("{} utterances, {} words", corpus.len(), corpus.word_count());
    Ok(corpus)
}

pub fn segment(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.segmenter.validate().map_err(config_err)?;
    let corpus = load_corpus(&cfg.manifest, &cfg.alignments, false)?;
    let profiles = corpus_profiles(&corpus, &cfg.segmenter)?;
    let results = segment_with_profiles(
        &corpus,
        &profiles,
        cfg.segmenter.retain_mass,
        cfg.segmenter.merge_mode,
    );

    output::write_jsonl(
        &out(cfg, output::SEGMENTS),
        results
            .iter()
            .map(|r| UtteranceSegments::from_result(r, &cfg.segmenter)),
    )?;
    output::write_jsonl(
        &out(cfg, output::BOUNDARIES),
        results.iter().map(|r| &r.seg.boundaries),
    )?;
    if cfg.dump_attention {
        let records = results.iter().map(|r| MaskRecord {
            utterance_id: r.utterance_id.clone(),
            layer: cfg.segmenter.layer,
            retain_mass: cfg.segmenter.retain_mass,
            heads: r
                .seg
                .masks
                .heads
                .iter()
                .map(|h| h.iter().map(|&k| u8::from(k)).collect())
                .collect(),
        });
        output::write_jsonl(&out(cfg, output::ATTENTION_MASKS), records)?;
    }
    let n_segments: usize = results.iter().map(|r| r.seg.merged.len()).sum();
    log::info!("{} utterances, {n_segments} segments", results.len());
    cfg.write_effective()?;
    Ok(())
}

fn cluster_records(pooled: &PooledCorpus, labels: Option<&[usize]>) -> Vec<ClusterRecord> {
    pooled
        .segments
        .iter()
        .zip(&pooled.fragments)
        .zip(&pooled.words)
        .enumerate()
        .map(|(i, ((s, f), w))| ClusterRecord {
            utterance_id: f.utterance_id.clone(),
            start_frame: s.segment.start_frame,
            end_frame: s.segment.end_frame,
            onset_s: f.onset_s,
            offset_s: f.offset_s,
            word: w.clone(),
            cluster: labels.map(|l| l[i]),
        })
        .collect()
}

/// Fits one K-means model (the first seed) and writes the lexicon files.
pub fn cluster(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.segmenter.validate().map_err(config_err)?;
    let ccfg = cfg.cluster.clone().unwrap_or_else(|| ClusterConfig {
        seed: cfg.seed,
        ..ClusterConfig::default()
    });
    ccfg.validate().map_err(config_err)?;
    let corpus = load_corpus(&cfg.manifest, &cfg.alignments, false)?;
    let profiles = corpus_profiles(&corpus, &cfg.segmenter)?;
    let results = segment_with_profiles(
        &corpus,
        &profiles,
        cfg.segmenter.retain_mass,
        cfg.segmenter.merge_mode,
    );
    let feature_layer = ccfg.feature_layer.unwrap_or(cfg.segmenter.layer);
    let pooled = pool_corpus(&corpus, &results, feature_layer, ccfg.pooling)?;
    if pooled.is_empty() {
        return Err(CliError::Data("no segments to cluster".into()));
    }

    let mut vectors: Vec<Vec<f32>> = pooled.segments.iter().map(|s| s.vector.clone()).collect();
    apply_transform(&mut vectors, ccfg.transform);
    let data = VectorSet::from_rows(&vectors)?;
    let k = ccfg.k.min(data.len());
    if k < ccfg.k {
        log::warn!(
            "only {} segments for k = {}; fitting {k} clusters",
            data.len(),
            ccfg.k
        );
    }
    let fit = kmeans_fit(
        &data,
        &KMeansConfig {
            k,
            seed: ccfg.run_seed(0),
            max_iter: ccfg.max_iter,
            tol: ccfg.tol,
        },
    )?;
    log::info!(
        "k-means: {} segments, k = {k}, {} iterations, inertia {:.6}",
        data.len(),
        fit.model.n_iter,
        fit.model.inertia
    );

    output::write_jsonl(
        &out(cfg, output::CLUSTERS),
        cluster_records(&pooled, Some(&fit.labels)),
    )?;
    fit.model
        .save(out(cfg, output::CENTROIDS), out(cfg, output::CLUSTER_MODEL))?;
    output::write_string(
        &out(cfg, output::CLASSES),
        &classfile_string(&pooled.fragments_with(&fit.labels)),
    )?;
    let mut effective = cfg.clone();
    effective.cluster = Some(ccfg);
    effective.write_effective()?;
    Ok(())
}

fn write_run_files(cfg: &RunConfig, eval: &Evaluation) -> Result<(), CliError> {
    if let (Some(pooled), Some(run)) = (&eval.pooled, eval.runs.first()) {
        output::write_jsonl(
            &out(cfg, output::CLUSTERS),
            cluster_records(pooled, Some(&run.fit.labels)),
        )?;
        output::write_string(
            &out(cfg, output::CLASSES),
            &classfile_string(&pooled.fragments_with(&run.fit.labels)),
        )?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    if let Some(table) = &cfg.pr_table {
        return eval_pr_table(cfg, table);
    }
    let mut ecfg = cfg.eval_config();
    ecfg.validate().map_err(config_err)?;
    let corpus = load_corpus(&cfg.manifest, &cfg.alignments, true)?;
    let evaluation = match &cfg.segments {
        Some(path) => {
            require_exists("segments file", std::slice::from_ref(path))?;
            let mut by_id = output::read_segments(path)?;
            // Report the settings that produced the segments.
            if let Some(first) = by_id.values().next() {
                let (layer, p) = (first.layer, first.retain_mass);
                if by_id
                    .values()
                    .any(|r| r.layer != layer || r.retain_mass != p)
                {
                    return Err(CliError::Data(format!(
                        "{}: records mix layers or retain masses",
                        path.display()
                    )));
                }
                if (layer, p) != (ecfg.segmenter.layer, ecfg.segmenter.retain_mass) {
                    log::warn!("segments were made with layer {layer}, p = {p}; reporting those");
                }
                ecfg.segmenter.layer = layer;
                ecfg.segmenter.retain_mass = p;
            }
            let mut results = Vec::with_capacity(corpus.len());
            for u in corpus.utterances() {
                let rec = by_id.remove(u.id()).ok_or_else(|| {
                    CliError::Data(format!(
                        "{}: no segments for utterance {:?}",
                        path.display(),
                        u.id()
                    ))
                })?;
                results.push(rec.into_result());
            }
            evaluate_results(&corpus, results, &ecfg)?
        }
        None => evaluate_config(&corpus, &ecfg)?,
    };
    output::write_json(&out(cfg, output::METRICS_JSON), &evaluation.report)?;
    output::write_string(
        &out(cfg, output::METRICS_TXT),
        &evaluation.report.to_table(),
    )?;
    write_run_files(cfg, &evaluation)?;
    print!("{}", evaluation.report.to_table());
    cfg.write_effective()?;
    Ok(())
}

fn eval_pr_table(cfg: &RunConfig, table: &Path) -> Result<(), CliError> {
    require_exists("pr table", &[table.to_path_buf()])?;
    let rows: Vec<PrRow> = output::read_pr_table(table)?
        .into_iter()
        .map(|(label, p, r)| {
            let b = BoundaryReport::from_precision_recall(p, r);
            PrRow {
                label,
                precision: b.precision,
                recall: b.recall,
                f1: b.f1,
                os: b.os,
                r_value: b.r_value,
            }
        })
        .collect();
    let text = output::pr_table_text(&rows);
    output::write_json(&out(cfg, output::METRICS_JSON), &rows)?;
    output::write_string(&out(cfg, output::METRICS_TXT), &text)?;
    print!("{text}");
    cfg.write_effective()?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.sweep.validate().map_err(config_err)?;
    let mut base = cfg.eval_config();
    if cfg.sweep.clusters() && base.clustering.is_none() {
        base.clustering = Some(ClusterConfig {
            seed: cfg.seed,
            ..ClusterConfig::default()
        });
    }
    base.validate().map_err(config_err)?;
    let dev = load_corpus(&cfg.manifest, &cfg.alignments, true)?;
    let result = run_sweep(&dev, &cfg.sweep, &base)?;
    output::write_json(&out(cfg, output::SWEEP_JSON), &result)?;
    output::write_string(&out(cfg, output::SWEEP_TXT), &result.leaderboard())?;
    print!("{}", result.leaderboard());

    if !cfg.test_manifest.is_empty() {
        let test = load_corpus(&cfg.test_manifest, &cfg.test_alignments, true)?;
        let mut reports: BTreeMap<String, MetricReport> = BTreeMap::new();
        let mut text = String::new();
        for best in &result.best {
            let name = serde_json::to_value(best.objective)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_else(|| format!("{:?}", best.objective));
            let report = evaluate_best(&test, &result, best.objective, &base)?.report;
            text.push_str(&format!("# best by {name} on dev\n{}", report.to_table()));
            reports.insert(name, report);
        }
        output::write_json(&out(cfg, output::METRICS_JSON), &reports)?;
        output::write_string(&out(cfg, output::METRICS_TXT), &text)?;
        print!("{text}");
    }
    let mut effective = cfg.clone();
    effective.cluster = base.clustering;
    effective.write_effective()?;
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.synth.validate().map_err(config_err)?;
    let corpus = generate_corpus(&cfg.synth)?;
    let manifest = corpus.write_to_dir(&cfg.out_dir)?;
    log::info!(
        "{} utterances written; manifest {}",
        corpus.utterances.len(),
        manifest.display()
    );
    cfg.write_effective()?;
    Ok(())
}

pub fn export_classfile(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg
        .clusters
        .clone()
        .unwrap_or_else(|| out(cfg, output::CLUSTERS));
    require_exists("clusters file", std::slice::from_ref(&path))?;
    let records: Vec<ClusterRecord> = output::read_jsonl(&path)?;
    let mut fragments = Vec::with_capacity(records.len());
    for r in records {
        let cluster = r.cluster.ok_or_else(|| {
            CliError::Data(format!(
                "{}: segment [{}, {}) of utterance {:?} has no cluster label",
                path.display(),
                r.onset_s,
                r.offset_s,
                r.utterance_id
            ))
        })?;
        fragments.push(Fragment {
            cluster,
            utterance_id: r.utterance_id,
            onset_s: r.onset_s,
            offset_s: r.offset_s,
        });
    }
    output::write_string(&out(cfg, output::CLASSES), &classfile_string(&fragments))?;
    cfg.write_effective()?;
    Ok(())
}
