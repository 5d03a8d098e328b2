//! `std`: spoken term discovery from exported attention maps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl From<std_engine::Error> for CliError {
    fn from(e: std_engine::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "std",
    version,
    about = "Spoken term discovery from transformer attention maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Threshold attention and write segments and boundaries.
    Segment,
    /// Pool segment features and fit one K-means lexicon.
    Cluster,
    /// Score segmentation (and word discovery when a cluster section is set).
    Eval,
    /// Grid search over layers, thresholds, poolings and K on a dev split.
    Sweep,
    /// Write a synthetic corpus with planted word structure.
    Synth,
    /// Convert clusters.jsonl into a TDE class file.
    ExportClassfile,
}

/// Flags mirror config keys; later flags win over the file, `--set` wins
/// over both.
#[derive(Args)]
struct Opts {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "STD_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Vec<PathBuf>,
    #[arg(long, global = true)]
    alignments: Vec<PathBuf>,
    #[arg(long, global = true)]
    test_manifest: Vec<PathBuf>,
    #[arg(long, global = true)]
    test_alignments: Vec<PathBuf>,
    #[arg(long, global = true)]
    segments: Option<PathBuf>,
    #[arg(long, global = true)]
    clusters: Option<PathBuf>,
    /// Golden `label precision recall` rows to expand into F1/OS/R-val.
    #[arg(long, global = true)]
    pr_table: Option<PathBuf>,
    /// Also write per-head kept-frame masks.
    #[arg(long, global = true)]
    dump_attention: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    tolerance_ms: Option<f64>,
    #[arg(long, global = true)]
    include_edges: bool,
    #[arg(long, global = true)]
    layer: Option<usize>,
    #[arg(long, global = true)]
    retain_mass: Option<f64>,
    /// cls_row or frame_sum.
    #[arg(long, global = true)]
    profile_mode: Option<String>,
    /// union or per_head.
    #[arg(long, global = true)]
    merge_mode: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// mean or max.
    #[arg(long, global = true)]
    pooling: Option<String>,
    #[arg(long, global = true)]
    n_seeds: Option<usize>,
    #[arg(long, global = true)]
    feature_layer: Option<usize>,
    /// none, l2_normalize or standardize.
    #[arg(long, global = true)]
    transform: Option<String>,
    /// Sweep objective(s): a_score, boundary_f1, wd.
    #[arg(long, global = true)]
    objective: Vec<String>,
    /// Any config key as dotted.key=value (TOML value syntax).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Opts {
    fn overrides(&self) -> Result<Vec<(String, Value)>, CliError> {
        fn path(p: &Path) -> Value {
            Value::String(p.to_string_lossy().into_owned())
        }
        fn paths(ps: &[PathBuf]) -> Value {
            Value::Array(ps.iter().map(|p| path(p)).collect())
        }
        fn int(n: impl TryInto<i64>) -> Result<Value, CliError> {
            n.try_into()
                .map(Value::Integer)
                .map_err(|_| CliError::Config("integer flag out of range".into()))
        }
        let mut ov: Vec<(&str, Value)> = Vec::new();
        if let Some(p) = &self.out_dir {
            ov.push(("out_dir", path(p)));
        }
        for (key, list) in [
            ("manifest", &self.manifest),
            ("alignments", &self.alignments),
            ("test_manifest", &self.test_manifest),
            ("test_alignments", &self.test_alignments),
        ] {
            if !list.is_empty() {
                ov.push((key, paths(list)));
            }
        }
        for (key, p) in [
            ("segments", &self.segments),
            ("clusters", &self.clusters),
            ("pr_table", &self.pr_table),
        ] {
            if let Some(p) = p {
                ov.push((key, path(p)));
            }
        }
        if self.dump_attention {
            ov.push(("dump_attention", Value::Boolean(true)));
        }
        if self.include_edges {
            ov.push(("include_edges", Value::Boolean(true)));
        }
        if let Some(s) = self.seed {
            ov.push(("seed", int(s)?));
        }
        if let Some(t) = self.tolerance_ms {
            ov.push(("tolerance_ms", Value::Float(t)));
        }
        if let Some(l) = self.layer {
            ov.push(("segmenter.layer", int(l)?));
        }
        if let Some(p) = self.retain_mass {
            ov.push(("segmenter.retain_mass", Value::Float(p)));
        }
        for (key, s) in [
            ("segmenter.profile_mode", &self.profile_mode),
            ("segmenter.merge_mode", &self.merge_mode),
            ("cluster.pooling", &self.pooling),
            ("cluster.transform", &self.transform),
        ] {
            if let Some(s) = s {
                ov.push((key, Value::String(s.clone())));
            }
        }
        if let Some(k) = self.k {
            ov.push(("cluster.k", int(k)?));
        }
        if let Some(n) = self.n_seeds {
            ov.push(("cluster.n_seeds", int(n)?));
        }
        if let Some(l) = self.feature_layer {
            ov.push(("cluster.feature_layer", int(l)?));
        }
        if !self.objective.is_empty() {
            let objs = self.objective.iter().cloned().map(Value::String).collect();
            ov.push(("sweep.objectives", Value::Array(objs)));
        }
        let mut out: Vec<(String, Value)> =
            ov.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for raw in &self.set {
            out.push(config::parse_override(raw)?);
        }
        Ok(out)
    }
}

#[cfg(feature = "parallel")]
fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if threads.is_some_and(|n| n > 1) {
        log::warn!("built without the parallel feature; running on one thread");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cwd =
        std::env::current_dir().map_err(|e| CliError::Config(format!("current directory: {e}")))?;
    let overrides = cli.opts.overrides()?;
    let cfg = config::resolve(cli.opts.config.as_deref(), &overrides, &cwd)?;
    init_threads(cli.opts.threads)?;
    match cli.command {
        Command::Segment => commands::segment(&cfg),
        Command::Cluster => commands::cluster(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Synth => commands::synth(&cfg),
        Command::ExportClassfile => commands::export_classfile(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("std: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
