//! Acceptance checks. Each test prints one PASS/FAIL line; run with
//! `cargo test -p std-engine --test acceptance -- --nocapture --test-threads=1`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std_engine::clustering::{kmeans_fit, KMeansConfig, VectorSet};
use std_engine::lexicon_metrics::{
    classfile_string, levenshtein, m_score, read_classfile, Fragment,
};
use std_engine::pipeline::{evaluate_config, ClusterConfig, EvalConfig};
use std_engine::seg_metrics::{match_boundaries, BoundaryReport};
use std_engine::segmenter::{threshold_profile, Profile, SegmenterConfig};
use std_engine::stats::harmonic;
use std_engine::synth::oracle::{oracle_boundary_match, oracle_levenshtein, oracle_threshold};
use std_engine::synth::{generate_corpus, SynthSpec};
use std_engine::tensor_store::{read_tensor, write_tensor, Tensor};

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

/// Published boundary rows: precision, recall, F1, OS, R-value (percent).
const BOUNDARY_ROWS: [(&str, [f64; 5]); 13] = [
    ("row01", [10.42, 50.96, 17.30, 38.88, -250.77]),
    ("row02", [11.52, 24.33, 15.63, 11.12, -33.34]),
    ("row03", [11.88, 24.79, 16.06, 10.87, -31.10]),
    ("row04", [12.18, 24.97, 16.37, 10.51, -28.26]),
    ("row05", [11.90, 25.81, 16.29, 11.68, -36.72]),
    ("row06", [28.99, 26.17, 27.51, -9.72, 40.10]),
    ("row07", [22.66, 27.86, 24.99, 22.93, 28.54]),
    ("row08", [18.47, 19.78, 19.10, 7.09, 28.86]),
    ("row09", [28.15, 22.90, 25.26, -18.64, 39.67]),
    ("row10", [28.70, 25.45, 26.98, -11.32, 39.94]),
    ("row11", [18.31, 18.90, 18.60, 3.26, 29.60]),
    ("row12", [35.90, 27.03, 30.84, -24.72, 44.42]),
    ("row13", [28.39, 25.64, 26.94, -9.70, 39.64]),
];

/// Rows whose printed OS is a tenth of R/P - 1.
const OS_SCALED_ROWS: [&str; 5] = ["row01", "row02", "row03", "row04", "row05"];

fn boundary_row_errors(rows: &[(&str, [f64; 5])]) -> Vec<String> {
    let mut errors = Vec::new();
    for (name, [p, r, f1, os, rval]) in rows {
        let got = BoundaryReport::from_precision_recall(*p, *r);
        for (col, want, have) in [
            ("F1", f1, got.f1),
            ("OS", os, got.os),
            ("R-val", rval, got.r_value),
        ] {
            if (want - have).abs() > 0.05 {
                errors.push(format!("{name} {col} printed {want:.2} computed {have:.2}"));
            }
        }
    }
    errors
}

#[test]
fn boundary_identities_all_rows() {
    let t = Instant::now();
    let errors = boundary_row_errors(&BOUNDARY_ROWS);
    let secs = t.elapsed().as_secs_f64();
    let detail = if errors.is_empty() {
        format!("13 rows within 0.05 in {secs:.3}s")
    } else {
        format!("{} mismatches: {}", errors.len(), errors.join("; "))
    };
    verdict(
        "boundary F1/OS/R-val identities, all 13 rows, tol 0.05",
        errors.is_empty() && secs < 1.0,
        &detail,
    );
}

#[test]
fn boundary_identities_consistent_rows() {
    let f1_errors: Vec<String> = boundary_row_errors(&BOUNDARY_ROWS)
        .into_iter()
        .filter(|e| e.contains(" F1 "))
        .collect();
    let rows: Vec<_> = BOUNDARY_ROWS
        .iter()
        .copied()
        .filter(|(n, _)| !OS_SCALED_ROWS.contains(n))
        .collect();
    let errors = boundary_row_errors(&rows);
    let ok = f1_errors.is_empty() && errors.is_empty();
    verdict(
        "boundary identities: F1 on 13 rows, F1/OS/R-val on the 8 rows with unscaled OS",
        ok,
        &format!(
            "{} F1 mismatches, {} other mismatches",
            f1_errors.len(),
            errors.len()
        ),
    );
}

#[test]
fn a_score_identity() {
    let a = harmonic(70.94, 61.29);
    verdict(
        "A-score identity 70.94/61.29 -> 65.77 +- 0.02",
        (a - 65.77).abs() <= 0.02,
        &format!("{a:.4}"),
    );
}

#[test]
fn m_score_identity() {
    let m1 = m_score(48.2, 85.4);
    let m2 = m_score(42.5, 95.4);
    let ok = (m1 - 64.5).abs() <= 0.1 && (m2 - 71.8).abs() <= 0.1;
    verdict(
        "M-score identities -> 64.5 and 71.8 +- 0.1",
        ok,
        &format!("{m1:.3}, {m2:.3}"),
    );
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn synthetic_end_to_end() {
    let spec = SynthSpec {
        seed: 7,
        ..SynthSpec::default()
    };
    assert_eq!(
        (spec.n_utterances, spec.vocab_size, spec.noise_floor),
        (500, 50, 0.0)
    );
    let cfg = EvalConfig {
        segmenter: SegmenterConfig {
            layer: spec.planted_layer,
            retain_mass: 1.0,
            ..SegmenterConfig::default()
        },
        tolerance_ms: spec.frame_shift_ms,
        clustering: Some(ClusterConfig {
            k: 50,
            ..ClusterConfig::default()
        }),
        ..EvalConfig::default()
    };

    let t = Instant::now();
    let (clean, noisy, sigma) = single_thread(|| {
        let corpus = generate_corpus(&spec).unwrap().corpus().unwrap();
        let clean = evaluate_config(&corpus, &cfg).unwrap().report;
        let sigma = 0.5 * spec.centroid_spacing().unwrap();
        let spec_noisy = SynthSpec {
            cluster_sigma: sigma,
            ..spec.clone()
        };
        let corpus = generate_corpus(&spec_noisy).unwrap().corpus().unwrap();
        let noisy = evaluate_config(&corpus, &cfg).unwrap().report;
        (clean, noisy, sigma)
    });
    let secs = t.elapsed().as_secs_f64();

    let w = clean.word.as_ref().unwrap();
    let nw = noisy.word.as_ref().unwrap();
    let ok = clean.boundary.f1 >= 99.0
        && clean.area.wc == 100.0
        && w.purity.mean == 100.0
        && w.wd.mean == 50.0
        && nw.purity.mean >= 90.0
        && secs < 60.0;
    verdict(
        "synthetic end-to-end (500 utt, vocab 50, K 50, 1 thread)",
        ok,
        &format!(
            "F1 {:.2}, WC {:.2}, purity {:.2}, WD {:.1}; sigma {sigma:.3}: purity {:.2}+-{:.2}; {secs:.1}s",
            clean.boundary.f1, clean.area.wc, w.purity.mean, w.wd.mean, nw.purity.mean, nw.purity.std
        ),
    );
}

#[test]
fn oracle_boundary_matching() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut draw = || {
            let n = rng.random_range(0..20);
            let mut v: Vec<i64> = (0..n).map(|_| rng.random_range(0..60)).collect();
            v.sort_unstable();
            v
        };
        let hyp = draw();
        let reference = draw();
        let tol = rng.random_range(0..6);
        if match_boundaries(&hyp, &reference, tol) != oracle_boundary_match(&hyp, &reference, tol) {
            mismatches += 1;
        }
    }
    verdict(
        "greedy boundary matching equals maximum matching (1000 instances)",
        mismatches == 0,
        &format!("{mismatches} mismatches"),
    );
}

/// Compares `threshold_profile` with the enumeration oracle on one profile.
fn threshold_agrees(weights: &[f64], ps: &[f64]) -> bool {
    let profile = Profile::from_rows(vec![weights.to_vec()]).unwrap();
    ps.iter()
        .all(|&p| threshold_profile(&profile, p).heads[0] == oracle_threshold(weights, p).unwrap())
}

/// Calls `f` on every vector in `alphabet^n`.
fn for_each_word(alphabet: &[f64], n: usize, f: &mut impl FnMut(&[f64])) {
    let mut idx = vec![0usize; n];
    let mut buf = vec![alphabet[0]; n];
    loop {
        for (b, &i) in buf.iter_mut().zip(&idx) {
            *b = alphabet[i];
        }
        f(&buf);
        let mut pos = 0;
        loop {
            if pos == n {
                return;
            }
            idx[pos] += 1;
            if idx[pos] < alphabet.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

#[test]
fn oracle_threshold_grid() {
    // Weights are counts of 0.05 steps; thresholding is scale invariant, so
    // integer weights stand for the 0.05 grid with exact sums.
    let ps = [0.1, 0.5, 0.55, 0.75, 0.9, 0.99, 1.0];
    let full: Vec<f64> = (0..=20).map(f64::from).collect();
    let mut checked = 0u64;
    let mut bad = 0u64;
    let mut check = |w: &[f64]| {
        checked += 1;
        if !threshold_agrees(w, &ps) {
            bad += 1;
        }
    };
    for n in 1..=4 {
        for_each_word(&full, n, &mut check);
    }
    for n in 5..=7 {
        for_each_word(&[0.0, 1.0, 2.0, 20.0], n, &mut check);
    }
    for n in 8..=12 {
        for_each_word(&[0.0, 1.0], n, &mut check);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 5..=12 {
        for _ in 0..2000 {
            let w: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.random_range(0..=20u32)))
                .collect();
            check(&w);
        }
    }
    verdict(
        "threshold equals subset-enumeration oracle (grid profiles up to 12 frames)",
        bad == 0,
        &format!(
            "{checked} profiles x {} masses, {bad} disagreements",
            ps.len()
        ),
    );
}

#[test]
fn oracle_levenshtein_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..1000 {
        let mut draw = || {
            let n = rng.random_range(0..12);
            (0..n).map(|_| rng.random_range(0..4u8)).collect::<Vec<_>>()
        };
        let (a, b) = (draw(), draw());
        if levenshtein(&a, &b) != oracle_levenshtein(&a, &b) {
            bad += 1;
        }
    }
    verdict(
        "levenshtein equals full-table DP (1000 pairs)",
        bad == 0,
        &format!("{bad} disagreements"),
    );
}

fn random_dataset(rng: &mut ChaCha8Rng) -> (VectorSet, usize) {
    let n = rng.random_range(20..200);
    let dim = rng.random_range(1..8);
    let centers = rng.random_range(1..6);
    let means: Vec<Vec<f32>> = (0..centers)
        .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let m = &means[rng.random_range(0..centers)];
        data.extend(m.iter().map(|&x| x + rng.random_range(-3.0f32..3.0)));
    }
    let k = rng.random_range(1..12).min(n);
    (VectorSet::new(dim, data).unwrap(), k)
}

#[test]
fn kmeans_inertia_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut steps = 0;
    for i in 0..100 {
        let (data, k) = random_dataset(&mut rng);
        let fit = kmeans_fit(&data, &KMeansConfig::new(k, i)).unwrap();
        steps += fit.inertia_trace.len();
        violations += fit.inertia_trace.windows(2).filter(|w| w[1] > w[0]).count();
    }
    verdict(
        "K-means inertia non-increasing (100 datasets)",
        violations == 0,
        &format!("{steps} iterations, {violations} increases"),
    );
}

#[test]
fn kmeans_thread_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut differing = 0;
    for i in 0..10 {
        let (data, k) = random_dataset(&mut rng);
        let cfg = KMeansConfig::new(k, 100 + i);
        let runs: Vec<_> = [1, 4, 8]
            .iter()
            .map(|&t| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .unwrap()
                    .install(|| kmeans_fit(&data, &cfg).unwrap())
            })
            .collect();
        let bits = |c: &[f32]| c.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        for r in &runs[1..] {
            if bits(&r.model.centroids) != bits(&runs[0].model.centroids)
                || r.labels != runs[0].labels
            {
                differing += 1;
            }
        }
    }
    verdict(
        "K-means bit-identical across 1/4/8 threads",
        differing == 0,
        &format!("10 datasets, {differing} differing runs"),
    );
}

#[test]
fn format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    for i in 0..50 {
        let ndim = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..ndim).map(|_| rng.random_range(1..5)).collect();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff))
            .collect();
        let t = Tensor::new(shape, data).unwrap();
        let path = dir.path().join(format!("t{i}.stdt"));
        write_tensor(&t, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        if back.to_bytes() != t.to_bytes() || std::fs::read(&path).unwrap() != t.to_bytes() {
            bad += 1;
        }
    }

    let golden = include_str!("fixtures/golden_classes.txt");
    let fragments = [
        Fragment {
            cluster: 2,
            utterance_id: "utt_b".into(),
            onset_s: 0.5,
            offset_s: 0.75,
        },
        Fragment {
            cluster: 2,
            utterance_id: "utt_a".into(),
            onset_s: 1.23456,
            offset_s: 1.5,
        },
        Fragment {
            cluster: 0,
            utterance_id: "utt_a".into(),
            onset_s: 0.0,
            offset_s: 0.32,
        },
        Fragment {
            cluster: 7,
            utterance_id: "utt_c".into(),
            onset_s: 2.0004,
            offset_s: 2.9996,
        },
    ];
    let written = classfile_string(&fragments);
    let reread = classfile_string(&read_classfile(golden.as_bytes()).unwrap());
    let ok = bad == 0 && written == golden && reread == golden;
    verdict(
        "tensor and class-file round trips, golden class file",
        ok,
        &format!(
            "50 tensors ({bad} bad); golden {}; reread {}",
            if written == golden {
                "matches"
            } else {
                "differs"
            },
            if reread == golden {
                "matches"
            } else {
                "differs"
            }
        ),
    );
}

#[test]
fn corpus_level_results_not_reproducible_here() {
    println!(
        "[SKIP] corpus-level results need a trained checkpoint and full corpora; \
         see the README recipe (export, then `std eval`, then `std export-classfile`)"
    );
}
