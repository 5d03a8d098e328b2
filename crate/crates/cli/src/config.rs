//! Run configuration: built-in defaults, then the TOML file, then flag
//! overrides, all merged as TOML values before a single deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use std_engine::pipeline::{ClusterConfig, EvalConfig};
use std_engine::segmenter::SegmenterConfig;
use std_engine::sweep::SweepGrid;
use std_engine::synth::SynthSpec;
use toml::{Table, Value};

use crate::CliError;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

/// Keys holding paths; relative values are resolved against the directory
/// of the file that set them.
const PATH_KEYS: &[&str] = &[
    "out_dir",
    "manifest",
    "alignments",
    "test_manifest",
    "test_alignments",
    "segments",
    "clusters",
    "pr_table",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Top-level seed; copied into the clustering and synth sections.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub manifest: Vec<PathBuf>,
    pub alignments: Vec<PathBuf>,
    /// Held-out split scored with the best dev cell after a sweep.
    pub test_manifest: Vec<PathBuf>,
    pub test_alignments: Vec<PathBuf>,
    /// Existing segments.jsonl to score instead of running the segmenter.
    pub segments: Option<PathBuf>,
    /// clusters.jsonl read by export-classfile.
    pub clusters: Option<PathBuf>,
    /// Whitespace-separated `label precision recall` rows (percent).
    pub pr_table: Option<PathBuf>,
    pub dump_attention: bool,
    pub tolerance_ms: f64,
    pub include_edges: bool,
    pub segmenter: SegmenterConfig,
    /// Word-level metrics are computed only when this section is present.
    pub cluster: Option<ClusterConfig>,
    pub sweep: SweepGrid,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            manifest: Vec::new(),
            alignments: Vec::new(),
            test_manifest: Vec::new(),
            test_alignments: Vec::new(),
            segments: None,
            clusters: None,
            pr_table: None,
            dump_attention: false,
            tolerance_ms: eval.tolerance_ms,
            include_edges: eval.include_edges,
            segmenter: eval.segmenter,
            cluster: None,
            sweep: SweepGrid::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            segmenter: self.segmenter.clone(),
            tolerance_ms: self.tolerance_ms,
            include_edges: self.include_edges,
            clustering: self.cluster.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn write_effective(&self) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(EFFECTIVE_CONFIG);
        crate::output::write_string(&path, &self.to_toml())?;
        Ok(path)
    }
}

/// One `key=value` override; the value is parsed as TOML and falls back to
/// a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {raw:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!(
            "override {raw:?} has an empty key"
        )));
    }
    let value = value.trim();
    let parsed = toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

/// Resolves the run configuration from an optional file and ordered
/// overrides. Flag paths are relative to `cwd`.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[(String, Value)],
    cwd: &Path,
) -> Result<RunConfig, CliError> {
    let defaults = RunConfig {
        cluster: Some(ClusterConfig::default()),
        ..RunConfig::default()
    };
    let mut merged = match Value::try_from(&defaults) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("defaults serialize to a table"),
    };
    let mut cluster_requested = false;

    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut layer: Table = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(|p| cwd.join(p))
            .unwrap_or_else(|| cwd.to_path_buf());
        absolutize_paths(&mut layer, &base);
        cluster_requested |= layer.contains_key("cluster");
        merge(&mut merged, layer);
    }
    for (key, value) in overrides {
        let mut layer = Table::new();
        insert_dotted(&mut layer, key, value.clone())?;
        absolutize_paths(&mut layer, cwd);
        cluster_requested |= layer.contains_key("cluster");
        merge(&mut merged, layer);
    }
    if !cluster_requested {
        merged.remove("cluster");
    }

    let mut cfg: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if cfg.out_dir.is_relative() {
        cfg.out_dir = cwd.join(&cfg.out_dir);
    }
    if let Some(c) = &mut cfg.cluster {
        c.seed = cfg.seed;
    }
    cfg.synth.seed = cfg.seed;
    Ok(cfg)
}

fn insert_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override key {key:?} crosses a non-table value"))
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn absolutize_paths(layer: &mut Table, base: &Path) {
    let fix = |v: &mut Value| {
        if let Value::String(s) = v {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    };
    for key in PATH_KEYS {
        match layer.get_mut(*key) {
            Some(Value::Array(items)) => items.iter_mut().for_each(fix),
            Some(v) => fix(v),
            None => {}
        }
    }
}

/// Fails with a config error when a referenced input is missing.
pub fn require_exists(what: &str, paths: &[PathBuf]) -> Result<(), CliError> {
    if paths.is_empty() {
        return Err(CliError::Config(format!("no {what} given")));
    }
    for p in paths {
        if !p.exists() {
            return Err(CliError::Config(format!(
                "{what} {} does not exist",
                p.display()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cwd() -> PathBuf {
        PathBuf::from("/work")
    }

    #[test]
    fn defaults_without_file() {
        let cfg = resolve(None, &[], &cwd()).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("/work/out"));
        assert!(cfg.cluster.is_none());
        assert_eq!(cfg.segmenter, SegmenterConfig::default());
        assert_eq!(cfg.tolerance_ms, 20.0);
    }

    #[test]
    fn overrides_apply_in_order_and_fill_sections() {
        let ov = vec![
            parse_override("segmenter.layer=9").unwrap(),
            parse_override("cluster.k=50").unwrap(),
            parse_override("seed=7").unwrap(),
            parse_override("segmenter.layer=10").unwrap(),
        ];
        let cfg = resolve(None, &ov, &cwd()).unwrap();
        assert_eq!(cfg.segmenter.layer, 10);
        let c = cfg.cluster.unwrap();
        assert_eq!(c.k, 50);
        assert_eq!(c.n_seeds, ClusterConfig::default().n_seeds);
        assert_eq!(c.seed, 7);
        assert_eq!(cfg.synth.seed, 7);
    }

    #[test]
    fn override_values_are_typed() {
        assert_eq!(parse_override("a=0.5").unwrap().1, Value::Float(0.5));
        assert_eq!(
            parse_override("a=[1, 2]").unwrap().1,
            Value::Array(vec![1.into(), 2.into()])
        );
        assert_eq!(
            parse_override("a=mean").unwrap().1,
            Value::String("mean".into())
        );
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let ov = vec![parse_override("segmenter.layr=9").unwrap()];
        assert!(matches!(
            resolve(None, &ov, &cwd()),
            Err(CliError::Config(_))
        ));
        let ov = vec![parse_override("bogus=1").unwrap()];
        assert!(matches!(
            resolve(None, &ov, &cwd()),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn file_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(
            &file,
            "manifest = [\"data/m.jsonl\"]\nout_dir = \"res\"\n[cluster]\nk = 8\n",
        )
        .unwrap();
        let ov = vec![parse_override("alignments=[\"a.jsonl\"]").unwrap()];
        let cfg = resolve(Some(&file), &ov, &cwd()).unwrap();
        assert_eq!(cfg.manifest, [dir.path().join("data/m.jsonl")]);
        assert_eq!(cfg.out_dir, dir.path().join("res"));
        assert_eq!(cfg.alignments, [PathBuf::from("/work/a.jsonl")]);
        assert_eq!(cfg.cluster.unwrap().k, 8);
    }

    #[test]
    fn effective_config_round_trips() {
        let ov = vec![
            parse_override("cluster.pooling=max").unwrap(),
            parse_override("manifest=[\"/d/m.jsonl\"]").unwrap(),
            parse_override("segmenter.retain_mass=0.75").unwrap(),
        ];
        let cfg = resolve(None, &ov, &cwd()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join(EFFECTIVE_CONFIG);
        std::fs::write(&file, cfg.to_toml()).unwrap();
        let again = resolve(Some(&file), &[], Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }
}
