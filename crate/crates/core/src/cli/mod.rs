//! Command-line front end: argument parsing, config resolution, manifests
//! and machine-readable errors. The `layermoe` binary only forwards to
//! [`dispatch`].
//!
//! Every command resolves its configuration in layers: built-in defaults,
//! then `--config FILE` (a config object or a manifest from an earlier run),
//! then `LAYERMOE_SET_*` environment variables, then flags and `--set`.

mod commands;
mod pipeline;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub use commands::{
    AllocateConfig, CorpusConfig, EvalConfig, ExpandConfig, GenCorpusConfig, LanguageEntry, ProfileConfig,
    ReviewConfig, RouteStatsConfig, TrainBaseConfig,
};
pub use pipeline::{run_pipeline, PipelineConfig};

use crate::error::{Error, Result};

/// Environment variables with this prefix override config keys; `__`
/// separates nested keys, e.g. `LAYERMOE_SET_RECIPE__STEPS=10`.
pub const ENV_PREFIX: &str = "LAYERMOE_SET_";
/// Caps the worker threads used for profiling and evaluation.
pub const THREADS_ENV: &str = "LAYERMOE_THREADS";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "layermoe", version, about = "Layer-wise MoE language expansion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub(crate) struct Common {
    /// JSON config file or manifest of an earlier run.
    #[arg(long)]
    pub(crate) config: Option<PathBuf>,
    /// Override a config key, e.g. `--set recipe.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub(crate) overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a tagged synthetic corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `id:group` pairs.
        #[arg(long)]
        languages: Option<String>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the dense base model.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated groups to train on.
        #[arg(long)]
        groups: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Profile per-layer similarity between old and new groups.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        old: Option<String>,
        #[arg(long)]
        new: Option<String>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a similarity profile into an allocation plan.
    Allocate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        /// Same number of new experts in every layer.
        #[arg(long)]
        uniform: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Upcycle a model with a plan and run stage 1.
    Expand {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Place classifiers and run stage 2 on review data.
    Review {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        old: Option<String>,
        #[arg(long)]
        new: Option<String>,
        /// Number of classifier layers, picked by similarity.
        #[arg(long)]
        classifiers: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perplexity and routing metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        old: Option<String>,
        /// `plain` or `gated`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-language expert histograms for every layer.
    RouteStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus, base model and every expansion from one config.
    RunPipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Record of one command run, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub package_version: String,
    pub rng: String,
    pub checkpoint_version: u32,
    /// Fully resolved configuration; feeding this file back through
    /// `--config` repeats the run.
    pub config: Value,
    /// sha256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every output file.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Files read and written by a command run.
#[derive(Default)]
pub struct Artifacts {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Where the manifest goes.
    pub manifest: PathBuf,
}

fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

fn write_manifest(command: &str, config: Value, artifacts: &Artifacts) -> Result<Manifest> {
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        command: command.to_string(),
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        rng: crate::numerics::RNG_ALGORITHM.to_string(),
        checkpoint_version: crate::model::CHECKPOINT_VERSION,
        config,
        inputs: hashes(&artifacts.inputs)?,
        outputs: hashes(&artifacts.outputs)?,
    };
    std::fs::write(&artifacts.manifest, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Sets `path` (dot-separated) inside `root`, creating objects on the way.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Configuration(format!("bad override key '{path}'")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Configuration(format!("override '{path}' goes through a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Recursively merges `top` into `base`; objects merge key by key, anything
/// else is replaced.
pub(crate) fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn split_override(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Error::Configuration(format!("override '{raw}' is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

fn list(raw: &str) -> Value {
    Value::Array(
        raw.split(',')
            .filter(|s| !s.is_empty())
            .map(|s| Value::String(s.trim().to_string()))
            .collect(),
    )
}

/// Layers defaults, config file, environment and command-line overrides.
pub(crate) fn resolve_value(
    command: &str,
    defaults: Value,
    common: &Common,
    flags: Vec<(String, Value)>,
    env: &[(String, String)],
) -> Result<Value> {
    let mut value = defaults;
    if let Some(path) = &common.config {
        let mut file: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.get("manifest_version").is_some() {
            let manifest: Manifest = serde_json::from_value(file)?;
            if manifest.command != command {
                return Err(Error::Configuration(format!(
                    "manifest is for '{}', not '{command}'",
                    manifest.command
                )));
            }
            file = manifest.config;
        }
        merge(&mut value, file);
    }
    let mut env_overrides: Vec<(String, Value)> = env
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|key| (key.to_lowercase().replace("__", "."), parse_value(v)))
        })
        .collect();
    env_overrides.sort_by(|a, b| a.0.cmp(&b.0));
    for (k, v) in env_overrides {
        set_path(&mut value, &k, v)?;
    }
    for (k, v) in flags {
        set_path(&mut value, &k, v)?;
    }
    for raw in &common.overrides {
        let (k, v) = split_override(raw)?;
        set_path(&mut value, &k, v)?;
    }
    Ok(value)
}

pub(crate) fn resolve<C: Serialize + DeserializeOwned + Default>(
    command: &str,
    common: &Common,
    flags: Vec<(String, Value)>,
    env: &[(String, String)],
) -> Result<(C, Value)> {
    let value = resolve_value(command, serde_json::to_value(C::default())?, common, flags, env)?;
    let config: C = serde_json::from_value(value).map_err(|e| Error::Configuration(e.to_string()))?;
    let resolved = serde_json::to_value(&config)?;
    Ok((config, resolved))
}

fn flag<T: Serialize>(key: &str, v: Option<T>) -> Option<(String, Value)> {
    v.map(|v| (key.to_string(), serde_json::to_value(v).expect("plain value")))
}

fn flags(items: Vec<Option<(String, Value)>>) -> Vec<(String, Value)> {
    items.into_iter().flatten().collect()
}

fn configure_threads(env: &[(String, String)]) -> Result<()> {
    let Some((_, raw)) = env.iter().find(|(k, _)| k == THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Configuration(format!("{THREADS_ENV} must be a positive integer")))?;
    // the global pool can only be built once per process; later calls keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: Cli, env: &[(String, String)]) -> Result<(String, Manifest)> {
    configure_threads(env)?;
    let s = |v: Option<String>| v.map(|v| list(&v));
    let (name, config, artifacts) = match cli.command {
        Command::GenCorpus {
            common,
            languages,
            tokens,
            context,
            seed,
            out,
        } => {
            let languages = languages
                .map(|raw| {
                    raw.split(',')
                        .map(|pair| {
                            let (id, group) = pair.split_once(':').ok_or_else(|| {
                                Error::Configuration(format!("language '{pair}' is not id:group"))
                            })?;
                            Ok(json!({"id": id.trim(), "group": group.trim()}))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?;
            let f = flags(vec![
                flag("corpus.languages", languages),
                flag("corpus.tokens_per_language", tokens),
                flag("corpus.context", context),
                flag("corpus.seed", seed),
                flag("out", out),
            ]);
            let (c, v) = resolve::<GenCorpusConfig>("gen-corpus", &common, f, env)?;
            ("gen-corpus", v, commands::gen_corpus(&c)?)
        }
        Command::TrainBase {
            common,
            corpus,
            groups,
            steps,
            lr,
            seed,
            out,
        } => {
            let f = flags(vec![
                flag("corpus", corpus),
                flag("groups", s(groups)),
                flag("recipe.steps", steps),
                flag("recipe.learning_rate", lr),
                flag("recipe.seed", seed),
                flag("out", out),
            ]);
            let (c, v) = resolve::<TrainBaseConfig>("train-base", &common, f, env)?;
            ("train-base", v, commands::train_base(&c)?)
        }
        Command::Profile {
            common,
            model,
            corpus,
            old,
            new,
            q,
            seed,
            out,
        } => {
            let f = flags(vec![
                flag("model", model),
                flag("corpus", corpus),
                flag("old", s(old)),
                flag("new", s(new)),
                flag("q", q),
                flag("seed", seed),
                flag("out", out),
            ]);
            let (c, v) = resolve::<ProfileConfig>("profile", &common, f, env)?;
            ("profile", v, commands::profile(&c)?)
        }
        Command::Allocate {
            common,
            profile,
            budget,
            uniform,
            out,
        } => {
            let f = flags(vec![
                flag("profile", profile),
                flag("budget", budget),
                flag("allocation", uniform.then_some("uniform")),
                flag("out", out),
            ]);
            let (c, v) = resolve::<AllocateConfig>("allocate", &common, f, env)?;
            ("allocate", v, commands::allocate(&c)?)
        }
        Command::Expand {
            common,
            model,
            plan,
            corpus,
            group,
            steps,
            lr,
            out,
        } => {
            let f = flags(vec![
                flag("model", model),
                flag("plan", plan),
                flag("corpus", corpus),
                flag("group", group),
                flag("recipe.steps", steps),
                flag("recipe.learning_rate", lr),
                flag("out", out),
            ]);
            let (c, v) = resolve::<ExpandConfig>("expand", &common, f, env)?;
            ("expand", v, commands::expand(&c)?)
        }
        Command::Review {
            common,
            model,
            corpus,
            old,
            new,
            classifiers,
            steps,
            lr,
            out,
        } => {
            let f = flags(vec![
                flag("model", model),
                flag("corpus", corpus),
                flag("old", s(old)),
                flag("new", s(new)),
                flag("classifier_count", classifiers),
                flag("recipe.steps", steps),
                flag("recipe.learning_rate", lr),
                flag("out", out),
            ]);
            let (c, v) = resolve::<ReviewConfig>("review", &common, f, env)?;
            ("review", v, commands::review(&c)?)
        }
        Command::Eval {
            common,
            model,
            corpus,
            old,
            mode,
            out,
        } => {
            let f = flags(vec![
                flag("model", model),
                flag("corpus", corpus),
                flag("old", s(old)),
                flag("mode", mode),
                flag("out", out),
            ]);
            let (c, v) = resolve::<EvalConfig>("eval", &common, f, env)?;
            ("eval", v, commands::eval(&c)?)
        }
        Command::RouteStats {
            common,
            model,
            corpus,
            mode,
            out,
        } => {
            let f = flags(vec![
                flag("model", model),
                flag("corpus", corpus),
                flag("mode", mode),
                flag("out", out),
            ]);
            let (c, v) = resolve::<RouteStatsConfig>("route-stats", &common, f, env)?;
            ("route-stats", v, commands::route_stats(&c)?)
        }
        Command::RunPipeline { common, out_dir } => {
            let f = flags(vec![flag("out_dir", out_dir)]);
            let (c, v) = pipeline::resolve_pipeline(&common, f, env)?;
            ("run-pipeline", v, run_pipeline(&c)?)
        }
    };
    let manifest = write_manifest(name, config, &artifacts)?;
    Ok((artifacts.manifest.display().to_string(), manifest))
}

fn error_record(kind: &str, message: &str) -> String {
    json!({"error": kind, "message": message}).to_string()
}

/// Runs one command line. On success a JSON summary goes to `stdout`; on
/// failure a JSON error record goes to `stderr` and the exit code is nonzero
/// (2 for usage errors, 1 otherwise).
pub fn dispatch<I, T>(args: I, env: &[(String, String)], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let _ = writeln!(stderr, "{}", error_record("usage", e.to_string().trim()));
            return 2;
        }
    };
    match run(cli, env) {
        Ok((path, manifest)) => {
            let summary = json!({
                "command": manifest.command,
                "manifest": path,
                "outputs": manifest.outputs,
            });
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_record(e.kind(), &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_and_overrides() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"b": {"c": 5}, "e": [1]}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 5, "d": 3}, "e": [1]}));
        set_path(&mut base, "b.x.y", json!("z")).unwrap();
        assert_eq!(base["b"]["x"]["y"], "z");
        assert!(set_path(&mut base, "a.q", json!(1)).is_err());
        assert_eq!(split_override("k=1.5").unwrap(), ("k".into(), json!(1.5)));
        assert_eq!(split_override("k=abc").unwrap(), ("k".into(), json!("abc")));
        assert!(split_override("k").is_err());
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"x": 1, "y": 1, "z": 1}"#).unwrap();
        let common = Common {
            config: Some(file),
            overrides: vec!["z=3".into()],
        };
        let env = vec![
            ("LAYERMOE_SET_Y".to_string(), "2".to_string()),
            ("LAYERMOE_SET_Z".to_string(), "2".to_string()),
            ("OTHER".to_string(), "9".to_string()),
        ];
        let v = resolve_value("t", json!({"w": 0, "x": 0}), &common, vec![], &env).unwrap();
        assert_eq!(v, json!({"w": 0, "x": 1, "y": 2, "z": 3}));
    }

    #[test]
    fn usage_errors_are_json() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = dispatch(["layermoe", "no-such-command"], &[], &mut out, &mut err);
        assert_eq!(code, 2);
        let record: Value = serde_json::from_slice(&err).unwrap();
        assert_eq!(record["error"], "usage");
    }
}
