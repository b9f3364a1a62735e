//! Per-command options, loadable from a TOML file and overridable by flags.
//!
//! A config file holds one table per subcommand:
//!
//! ```toml
//! [eval]
//! user_vectors = "out/user_vectors.csv"
//! seed = 7
//! repeats = 1000
//! ```
//!
//! Relative paths are resolved against the working directory. Any flag given
//! on the command line replaces the file's value.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::Failure;

/// Output-only options, left out of the config hash.
const NOT_HASHED: &[&str] = &["out", "plot_data"];

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractArgs {
    /// Schema TOML, or `builtin`
    #[arg(long)]
    pub schema: Option<String>,
    /// Embeddings JSONL (image and query records)
    #[arg(long, conflicts_with = "similarities")]
    pub embeddings: Option<PathBuf>,
    /// Precomputed similarity JSONL
    #[arg(long)]
    pub similarities: Option<PathBuf>,
    /// users.csv (user_id,label)
    #[arg(long)]
    pub users: Option<PathBuf>,
    /// images.csv (image_id,user_id)
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Softmax temperature applied to the logits
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Drop users with fewer images: a count or `median`
    #[arg(long)]
    pub min_images: Option<String>,
    /// Average raw image embeddings instead of scoring schema queries
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub dense: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// user_vectors.csv from `extract` or `synth`
    #[arg(long)]
    pub user_vectors: Option<PathBuf>,
    /// Model name written into the report
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Ridge penalty on the coefficients
    #[arg(long)]
    pub lambda: Option<f64>,
    /// z-score columns before fitting
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub standardize: Option<bool>,
    /// Comma-separated subset of feature columns
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<String>>,
    /// Leave the per-run AUCs out of the report
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub omit_aucs: Option<bool>,
    /// Also write ROC points and an AUC histogram as CSV
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub plot_data: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareArgs {
    /// First eval report
    #[arg(long)]
    pub a: Option<PathBuf>,
    /// Second eval report
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// `unpaired` (Welch) or `paired`
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsArgs {
    #[arg(long)]
    pub user_vectors: Option<PathBuf>,
    /// Schema TOML, or `builtin`
    #[arg(long)]
    pub schema: Option<String>,
    /// `pooled` or `welch`
    #[arg(long)]
    pub ttest: Option<String>,
    /// FDR level
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// `table4` or `null`
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// Cohort spec TOML
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_pos: Option<usize>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[arg(long)]
    pub correlation: Option<f64>,
    /// `user-vectors` or `image-logits`
    #[arg(long)]
    pub level: Option<String>,
    #[arg(long)]
    pub min_images: Option<usize>,
    #[arg(long)]
    pub max_images: Option<usize>,
    /// Dirichlet concentration for image-level draws
    #[arg(long)]
    pub concentration: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    extract: Option<Value>,
    eval: Option<Value>,
    compare: Option<Value>,
    stats: Option<Value>,
    synth: Option<Value>,
}

/// Reads the command's table from `config` (if any) and overlays the flags.
pub fn resolve<T>(command: &str, config: Option<&Path>, flags: &T) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned + Clone,
{
    let Some(path) = config else {
        return Ok(flags.clone());
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let file: ConfigFile =
        toml::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let section = match command {
        "extract" => file.extract,
        "eval" => file.eval,
        "compare" => file.compare,
        "stats" => file.stats,
        _ => file.synth,
    };
    let mut merged = match section {
        Some(Value::Object(m)) => m,
        Some(_) => {
            return Err(Failure::input(format!(
                "{}: [{command}] must be a table",
                path.display()
            )))
        }
        None => Map::new(),
    };
    for (k, v) in to_map(flags) {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Failure::input(format!("{}: [{command}]: {e}", path.display())))
}

fn to_map<T: Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}

/// SHA-256 over the command name and its resolved inputs. Output locations
/// and the thread count are excluded.
pub fn config_hash<T: Serialize>(command: &str, args: &T) -> String {
    let mut map = to_map(args);
    for key in NOT_HASHED {
        map.remove(*key);
    }
    let body = Value::Object(map).to_string();
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0u8]);
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}
