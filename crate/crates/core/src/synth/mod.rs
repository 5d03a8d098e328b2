//! Synthetic corpora with planted attention structure and known answers.

pub mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    Corpus, PhoneInterval, TensorSource, Utterance, UtteranceAlignment, WordInterval,
};
use crate::clustering::squared_distance;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor_store::{write_manifest, write_tensor, ManifestEntry, Tensor};
use crate::time::frame_to_secs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub n_utterances: usize,
    /// Inclusive `[min, max]` ranges.
    pub words_per_utterance: [usize; 2],
    pub word_frames: [usize; 2],
    pub gap_frames: [usize; 2],
    /// Silence before the first and after the last word.
    pub edge_frames: [usize; 2],
    pub heads: usize,
    /// Chance that a head other than a word's primary head also covers it.
    pub head_coverage: f64,
    /// Layer numbers exported; attention structure lives in `planted_layer`.
    pub layers: Vec<usize>,
    pub planted_layer: usize,
    /// Upper bound of the per-head mass spread uniformly at random over frames.
    pub noise_floor: f64,
    /// Per-head mass placed on the centres of the head's words.
    pub peak_mass: f64,
    pub feature_dim: usize,
    /// Expected Euclidean norm of the within-word feature noise.
    pub cluster_sigma: f64,
    pub frame_shift_ms: f64,
    /// Write `[layer, head, query, key]` maps instead of the CLS row alone.
    pub full_maps: bool,
    /// Plant peaks on whole words instead of their central frames.
    pub plant_full_words: bool,
    pub phones_per_word: [usize; 2],
    pub phone_inventory: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 50,
            n_utterances: 500,
            words_per_utterance: [2, 6],
            word_frames: [3, 7],
            gap_frames: [0, 0],
            edge_frames: [3, 6],
            heads: 4,
            head_coverage: 0.3,
            layers: vec![9, 10, 11, 12],
            planted_layer: 12,
            noise_floor: 0.0,
            peak_mass: 1.0,
            feature_dim: 16,
            cluster_sigma: 0.0,
            frame_shift_ms: 20.0,
            full_maps: false,
            plant_full_words: false,
            phones_per_word: [2, 4],
            phone_inventory: 20,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidArgument(format!(
                "infeasible synth spec: {msg}"
            )))
        };
        for (name, [lo, hi], min) in [
            ("words_per_utterance", self.words_per_utterance, 1),
            ("word_frames", self.word_frames, 1),
            ("gap_frames", self.gap_frames, 0),
            ("edge_frames", self.edge_frames, 0),
            ("phones_per_word", self.phones_per_word, 1),
        ] {
            if lo < min || lo > hi {
                return bad(format!(
                    "{name} range [{lo}, {hi}] must satisfy {min} <= min <= max"
                ));
            }
        }
        if self.vocab_size == 0
            || self.n_utterances == 0
            || self.heads == 0
            || self.feature_dim == 0
        {
            return bad("vocab_size, n_utterances, heads and feature_dim must be positive".into());
        }
        if self.phone_inventory == 0 {
            return bad("phone_inventory must be positive".into());
        }
        if !self.layers.contains(&self.planted_layer) {
            return bad(format!(
                "planted layer {} not in {:?}",
                self.planted_layer, self.layers
            ));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return bad("duplicate layers".into());
        }
        if !(self.peak_mass > 0.5 && self.peak_mass <= 1.0) {
            return bad(format!("peak_mass {} outside (0.5, 1]", self.peak_mass));
        }
        if !(self.noise_floor >= 0.0 && self.peak_mass + self.noise_floor <= 1.0 + 1e-12) {
            return bad(format!(
                "noise_floor {} with peak_mass {} exceeds unit head mass",
                self.noise_floor, self.peak_mass
            ));
        }
        if !(0.0..=1.0).contains(&self.head_coverage) {
            return bad(format!(
                "head_coverage {} outside [0, 1]",
                self.head_coverage
            ));
        }
        if !(self.cluster_sigma >= 0.0 && self.cluster_sigma.is_finite()) {
            return bad(format!(
                "cluster_sigma {} must be finite and >= 0",
                self.cluster_sigma
            ));
        }
        if !(self.frame_shift_ms > 0.0 && self.frame_shift_ms.is_finite()) {
            return bad(format!(
                "frame_shift_ms {} must be positive",
                self.frame_shift_ms
            ));
        }
        Ok(())
    }

    /// Smallest distance between two word centroids.
    pub fn centroid_spacing(&self) -> Result<f64> {
        self.validate()?;
        let lex = build_lexicon(self);
        let mut best = f64::INFINITY;
        for i in 0..lex.len() {
            for j in i + 1..lex.len() {
                best = best.min(squared_distance(&lex[i].centroid, &lex[j].centroid));
            }
        }
        Ok(if best.is_finite() { best.sqrt() } else { 0.0 })
    }

    fn layer_position(&self) -> usize {
        self.layers
            .iter()
            .position(|&l| l == self.planted_layer)
            .expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    pub phones: Vec<String>,
    pub centroid: Vec<f32>,
}

/// A word as planted in one utterance, in frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWord {
    pub vocab_index: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Frames that carry attention peaks.
    pub core_start: usize,
    pub core_end: usize,
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub entry: ManifestEntry,
    pub alignment: UtteranceAlignment,
    pub attention: Arc<Tensor>,
    pub features: Arc<Tensor>,
    pub planted: Vec<PlantedWord>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub lexicon: Vec<LexiconEntry>,
    pub utterances: Vec<SynthUtterance>,
}

fn corpus_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn build_lexicon(spec: &SynthSpec) -> Vec<LexiconEntry> {
    let mut rng = corpus_rng(spec.seed);
    (0..spec.vocab_size)
        .map(|i| {
            let n = rng.random_range(spec.phones_per_word[0]..=spec.phones_per_word[1]);
            let phones = (0..n)
                .map(|_| format!("p{}", rng.random_range(0..spec.phone_inventory)))
                .collect();
            let centroid = (0..spec.feature_dim)
                .map(|_| normal(&mut rng) as f32)
                .collect();
            LexiconEntry {
                word: format!("w{i:03}"),
                phones,
                centroid,
            }
        })
        .collect()
}

/// Frames trimmed from each side of a word before planting its peak.
pub fn core_trim(len: usize) -> usize {
    ((0.2 * len as f64).round() as usize).min((len - 1) / 2)
}

/// Tent-shaped weights summing to 1.
fn tent(len: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..len).map(|i| (i + 1).min(len - i) as f64).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let lexicon = build_lexicon(spec);
    let filler: Vec<f64> = {
        let mut rng = corpus_rng(spec.seed);
        rng.set_stream(2);
        (0..spec.feature_dim).map(|_| normal(&mut rng)).collect()
    };
    let utterances = par::map_range(spec.n_utterances, |i| {
        generate_utterance(spec, &lexicon, &filler, i)
    });
    Ok(SynthCorpus {
        spec: spec.clone(),
        lexicon,
        utterances,
    })
}

fn generate_utterance(
    spec: &SynthSpec,
    lexicon: &[LexiconEntry],
    filler: &[f64],
    index: usize,
) -> SynthUtterance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let range = |rng: &mut ChaCha8Rng, r: [usize; 2]| rng.random_range(r[0]..=r[1]);
    let shift = spec.frame_shift_ms;

    let n_words = range(&mut rng, spec.words_per_utterance);
    let mut planted = Vec::with_capacity(n_words);
    let mut t = range(&mut rng, spec.edge_frames);
    for k in 0..n_words {
        if k > 0 {
            t += range(&mut rng, spec.gap_frames);
        }
        let vocab_index = rng.random_range(0..spec.vocab_size);
        let len = range(&mut rng, spec.word_frames);
        let trim = if spec.plant_full_words {
            0
        } else {
            core_trim(len)
        };
        let primary = rng.random_range(0..spec.heads);
        let heads = (0..spec.heads)
            .filter(|&h| h == primary || rng.random_bool(spec.head_coverage))
            .collect();
        planted.push(PlantedWord {
            vocab_index,
            start_frame: t,
            end_frame: t + len,
            core_start: t + trim,
            core_end: t + len - trim,
            heads,
        });
        t += len;
    }
    let frames = t + range(&mut rng, spec.edge_frames);
    let id = format!("synth{index:05}");

    // CLS-row attention per layer and head; key 0 is the CLS position.
    let n_layers = spec.layers.len();
    let planted_pos = spec.layer_position();
    let keys = frames + 1;
    let mut rows = vec![0.0f32; n_layers * spec.heads * keys];
    for l in 0..n_layers {
        for h in 0..spec.heads {
            let mut w = vec![0.0f64; frames];
            if l == planted_pos {
                for x in w.iter_mut() {
                    *x = spec.noise_floor * rng.random::<f64>() / frames as f64;
                }
                let mine: Vec<&PlantedWord> =
                    planted.iter().filter(|p| p.heads.contains(&h)).collect();
                for p in &mine {
                    let share = spec.peak_mass / mine.len() as f64;
                    for (f, v) in (p.core_start..p.core_end).zip(tent(p.core_end - p.core_start)) {
                        w[f] += share * v;
                    }
                }
            } else {
                for x in w.iter_mut() {
                    *x = rng.random::<f64>();
                }
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x *= 0.5 / s);
            }
            let row = &mut rows[(l * spec.heads + h) * keys..][..keys];
            row[0] = (1.0 - w.iter().sum::<f64>()).max(0.0) as f32;
            for (r, x) in row[1..].iter_mut().zip(&w) {
                *r = *x as f32;
            }
        }
    }
    let attention = if spec.full_maps {
        let mut full = Vec::with_capacity(rows.len() * keys);
        for row in rows.chunks(keys) {
            for _ in 0..keys {
                full.extend_from_slice(row);
            }
        }
        Tensor::new(vec![n_layers, spec.heads, keys, keys], full)
    } else {
        Tensor::new(vec![n_layers, spec.heads, keys], rows)
    }
    .expect("synth attention shape");

    // Features, with the CLS row kept at position 0.
    let dim = spec.feature_dim;
    let noise_scale = spec.cluster_sigma / (dim as f64).sqrt();
    let mut owner: Vec<Option<usize>> = vec![None; frames];
    for p in &planted {
        owner[p.start_frame..p.end_frame].fill(Some(p.vocab_index));
    }
    let mut feats = Vec::with_capacity(n_layers * keys * dim);
    for l in 0..n_layers {
        for _ in 0..dim {
            feats.push(normal(&mut rng) as f32);
        }
        for o in &owner {
            for (d, &fill) in filler.iter().enumerate() {
                let x = match (l == planted_pos, o) {
                    (true, Some(v)) => {
                        lexicon[*v].centroid[d] as f64 + noise_scale * normal(&mut rng)
                    }
                    (true, None) => fill + normal(&mut rng) / (dim as f64).sqrt(),
                    (false, _) => normal(&mut rng),
                };
                feats.push(x as f32);
            }
        }
    }
    let features = Tensor::new(vec![n_layers, keys, dim], feats).expect("synth feature shape");

    let words = planted
        .iter()
        .map(|p| WordInterval {
            word: lexicon[p.vocab_index].word.clone(),
            onset_s: frame_to_secs(p.start_frame as f64, shift),
            offset_s: frame_to_secs(p.end_frame as f64, shift),
        })
        .collect::<Vec<_>>();
    let mut phones = Vec::new();
    for (p, w) in planted.iter().zip(&words) {
        let seq = &lexicon[p.vocab_index].phones;
        let n = seq.len();
        let edge = |j: usize| {
            if j == n {
                w.offset_s
            } else {
                w.onset_s + (w.offset_s - w.onset_s) * j as f64 / n as f64
            }
        };
        for (j, ph) in seq.iter().enumerate() {
            phones.push(PhoneInterval {
                phone: ph.clone(),
                onset_s: edge(j),
                offset_s: edge(j + 1),
            });
        }
    }

    SynthUtterance {
        entry: ManifestEntry {
            utterance_id: id.clone(),
            attention_path: PathBuf::from(format!("attention/{id}.stdt")),
            feature_path: PathBuf::from(format!("features/{id}.stdt")),
            num_frames: frames as u64,
            frame_shift_ms: shift,
            layers: spec.layers.clone(),
            has_cls: true,
            base_dir: PathBuf::new(),
        },
        alignment: UtteranceAlignment {
            utterance_id: id,
            duration_s: frame_to_secs(frames as f64, shift),
            words,
            phones,
        },
        attention: Arc::new(attention),
        features: Arc::new(features),
        planted,
    }
}

impl SynthCorpus {
    /// In-memory corpus backed by the generated tensors.
    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::from_utterances(
            self.utterances
                .iter()
                .map(|u| Utterance {
                    entry: u.entry.clone(),
                    alignment: u.alignment.clone(),
                    attention: TensorSource::Memory(Arc::clone(&u.attention)),
                    features: TensorSource::Memory(Arc::clone(&u.features)),
                })
                .collect(),
        )
    }

    pub fn alignments(&self) -> Vec<UtteranceAlignment> {
        self.utterances
            .iter()
            .map(|u| u.alignment.clone())
            .collect()
    }

    pub fn manifest_entries(&self) -> Vec<ManifestEntry> {
        self.utterances.iter().map(|u| u.entry.clone()).collect()
    }

    /// Writes `manifest.jsonl`, `alignments.jsonl`, `lexicon.json` and the
    /// tensors under `attention/` and `features/`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for sub in ["attention", "features"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let written: Vec<Result<()>> = par::map(&self.utterances, |u| {
            write_tensor(&u.attention, dir.join(&u.entry.attention_path))?;
            write_tensor(&u.features, dir.join(&u.entry.feature_path))
        });
        written.into_iter().collect::<Result<()>>()?;
        let manifest = dir.join("manifest.jsonl");
        write_manifest(&manifest, &self.manifest_entries())?;
        crate::alignment::write_alignments(dir.join("alignments.jsonl"), &self.alignments())?;
        let lex = dir.join("lexicon.json");
        let body = serde_json::to_string_pretty(&self.lexicon).expect("lexicon serializes");
        fs::write(&lex, body).map_err(|e| Error::io(&lex, e))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{attention_profile, threshold_profile, ProfileMode};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_utterances: 20,
            vocab_size: 8,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_corpus(&small(1)).unwrap();
        let b = generate_corpus(&small(1)).unwrap();
        let c = generate_corpus(&small(2)).unwrap();
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.attention.to_bytes(), y.attention.to_bytes());
            assert_eq!(x.features.to_bytes(), y.features.to_bytes());
        }
        assert_ne!(
            a.utterances[0].attention.to_bytes(),
            c.utterances[0].attention.to_bytes()
        );
    }

    #[test]
    fn alignments_validate_and_entries_match_tensors() {
        let c = generate_corpus(&small(3)).unwrap();
        for u in &c.utterances {
            u.alignment.clone().validate_and_normalize().unwrap();
            u.entry.check_fields().unwrap();
            let dims = |t: &Tensor| t.shape().iter().map(|&d| d as u64).collect::<Vec<_>>();
            u.entry
                .check_shapes(&dims(&u.attention), &dims(&u.features))
                .unwrap();
            assert!(u
                .planted
                .iter()
                .all(|p| !p.heads.is_empty() && p.core_start < p.core_end));
        }
    }

    #[test]
    fn heads_are_distributions() {
        let spec = SynthSpec {
            noise_floor: 0.2,
            peak_mass: 0.7,
            ..small(4)
        };
        let c = generate_corpus(&spec).unwrap();
        let t = &c.utterances[0].attention;
        let keys = t.shape()[2];
        for row in t.data().chunks(keys) {
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-5, "row sums to {s}");
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn noiseless_threshold_keeps_only_planted_frames() {
        let c = generate_corpus(&small(5)).unwrap();
        for u in &c.utterances {
            let pos = u.entry.layer_position(12).unwrap();
            let prof = attention_profile(&u.attention, pos, true, ProfileMode::ClsRow).unwrap();
            let planted: Vec<bool> = (0..prof.frames())
                .map(|f| {
                    u.planted
                        .iter()
                        .any(|p| (p.core_start..p.core_end).contains(&f))
                })
                .collect();
            for p in [0.1, 0.5, 0.9, 1.0] {
                let kept = threshold_profile(&prof, p).union();
                assert!(kept.iter().zip(&planted).all(|(&k, &t)| !k || t));
                if p == 1.0 {
                    assert_eq!(kept, planted);
                }
            }
        }
    }

    #[test]
    fn infeasible_specs() {
        for spec in [
            SynthSpec {
                peak_mass: 0.5,
                ..SynthSpec::default()
            },
            SynthSpec {
                peak_mass: 0.9,
                noise_floor: 0.2,
                ..SynthSpec::default()
            },
            SynthSpec {
                word_frames: [0, 3],
                ..SynthSpec::default()
            },
            SynthSpec {
                planted_layer: 3,
                ..SynthSpec::default()
            },
            SynthSpec {
                gap_frames: [2, 1],
                ..SynthSpec::default()
            },
        ] {
            assert!(generate_corpus(&spec).is_err());
        }
    }

    #[test]
    fn spacing_and_trim() {
        assert!(SynthSpec::default().centroid_spacing().unwrap() > 0.0);
        assert_eq!([1, 2, 3, 7, 8].map(core_trim), [0, 0, 1, 1, 2]);
    }

    #[test]
    fn writes_readable_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&SynthSpec {
            n_utterances: 3,
            ..small(6)
        })
        .unwrap();
        let manifest = c.write_to_dir(dir.path()).unwrap();
        let entries = crate::tensor_store::read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 3);
        let t = crate::tensor_store::read_tensor(entries[0].attention_file()).unwrap();
        assert_eq!(&t, c.utterances[0].attention.as_ref());
        let ali = crate::alignment::read_alignments(dir.path().join("alignments.jsonl")).unwrap();
        assert_eq!(ali.len(), 3);
    }
}
