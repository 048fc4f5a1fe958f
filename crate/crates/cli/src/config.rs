//! Run configuration: flat `key = value` lines grouped by prefix.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lshnet::{Activation, AutotuneConfig, AutotunePlan, LayerSpec, TrainConfig};

use crate::CliError;

pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(key: &'static str, default: &'static str, help: &'static str) -> KeyDoc {
    KeyDoc { key, default, help }
}

pub const KEYS: &[KeyDoc] = &[
    key("model.layers", "required", "comma-separated layers as dim:activation:sparsity, activation one of relu|softmax|identity"),
    key("model.seed", "0", "weight and hash initialization seed"),
    key("model.c1", "1.0", "autotune safety factor on retrieved neurons"),
    key("model.c2", "0.1", "autotune target sparse/dense cost ratio"),
    key("model.l_max", "256", "autotune upper bound on tables"),
    key("model.k_bits", "unset", "output layer: fixed hash bits (skips autotune, needs model.num_tables)"),
    key("model.num_tables", "unset", "output layer: fixed table count"),
    key("model.bucket_cap", "ceil(2d/2^K)", "output layer: fixed bucket capacity"),
    key("train.batch_size", "256", "samples per optimizer step"),
    key("train.epochs", "5", "passes over the training set"),
    key("train.lr", "0.001", "Adam learning rate"),
    key("train.rebuild_interval", "50", "batches between hash index rebuilds"),
    key("train.aln", "true", "insert missed labels into the selected buckets"),
    key("train.inference_sparsity", "training sparsity", "output sparsity for sparse inference in bench"),
    key("train.seed", "0", "shuffle seed"),
    key("train.deterministic", "true", "fixed gradient reduction order"),
    key("train.workers", "0", "worker threads, 0 for one per core"),
    key("data.train", "unset", "training set in XC text format"),
    key("data.test", "unset", "held-out set in XC text format"),
    key("data.index_base", "0", "first feature/label index used in the data files (0 or 1)"),
    key("data.synth_classes", "unset", "generate a clustered synthetic task with this many classes instead of data.train"),
    key("data.synth_per_class", "3", "synthetic samples per class; the last round is held out for testing"),
    key("data.synth_features", "512", "synthetic feature dimension"),
    key("data.synth_sigma", "0.1", "synthetic noise norm"),
    key("data.synth_seed", "0", "synthetic data seed"),
    key("output.model", "required for train", "model file path"),
    key("output.report", "unset", "JSON-lines training report path"),
    key("output.bench", "stdout", "bench CSV path"),
    key("bench.checkpoints_per_epoch", "2", "p@1 checkpoints per epoch"),
    key("bench.mode", "dense", "inference mode for checkpoints, dense or sparse"),
    key("bench.eval_samples", "1000", "held-out samples scored per checkpoint"),
];

pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (key = value, '#' starts a comment):\n");
    for k in KEYS {
        out.push_str(&format!("  {:width$}  {} [default: {}]\n", k.key, k.help, k.default));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Files { train: PathBuf, test: Option<PathBuf>, index_base: u32 },
    Synthetic { classes: usize, per_class: usize, features: usize, sigma: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: Vec<LayerSpec>,
    pub model_seed: u64,
    pub tune: AutotuneConfig,
    /// `(K, L, R)` for the output layer, `R` defaulting from `K`.
    pub manual_plan: Option<(u32, u32, Option<u32>)>,
    pub train: TrainConfig,
    pub workers: usize,
    pub data: DataSource,
    pub model_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub bench_out: Option<PathBuf>,
    pub checkpoints_per_epoch: usize,
    pub bench_mode: BenchMode,
    pub eval_samples: usize,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, CliError> {
    raw.parse()
        .map_err(|_| config_err(format!("{key}: cannot parse '{raw}'")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool, CliError> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err(format!("{key}: expected true or false, got '{raw}'"))),
    }
}

fn parse_layers(raw: &str) -> Result<Vec<LayerSpec>, CliError> {
    let mut specs = Vec::new();
    for item in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').map(str::trim).collect();
        let [dim, act, s] = parts[..] else {
            return Err(config_err(format!("model.layers: '{item}' is not dim:activation:sparsity")));
        };
        let dim: usize = parse_value("model.layers", dim)?;
        let act: Activation = act
            .parse()
            .map_err(|_| config_err(format!("model.layers: unknown activation '{act}'")))?;
        let s: f64 = parse_value("model.layers", s)?;
        specs.push(LayerSpec::new(dim, act, s));
    }
    if specs.is_empty() {
        return Err(config_err("model.layers: no layers given"));
    }
    Ok(specs)
}

/// Parses `key = value` text. Relative paths resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, CliError> {
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(config_err(format!("line {}: expected key = value", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|d| d.key == k) {
            return Err(config_err(format!("line {}: unknown key '{k}'", n + 1)));
        }
        if map.insert(k, v).is_some() {
            return Err(config_err(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }

    let get = |k: &str| map.get(k).copied();
    let num = |k: &str, default: &str| -> Result<String, CliError> { Ok(get(k).unwrap_or(default).to_string()) };
    let path = |k: &str| get(k).map(|p| base.join(p));

    let layers = parse_layers(get("model.layers").ok_or_else(|| config_err("model.layers is required"))?)?;
    let tune = AutotuneConfig {
        c1: parse_value("model.c1", &num("model.c1", "1.0")?)?,
        c2: parse_value("model.c2", &num("model.c2", "0.1")?)?,
        l_max: parse_value("model.l_max", &num("model.l_max", "256")?)?,
    };
    tune.validate().map_err(|e| config_err(e.to_string()))?;

    let k_bits = get("model.k_bits").map(|v| parse_value::<u32>("model.k_bits", v)).transpose()?;
    let tables = get("model.num_tables").map(|v| parse_value::<u32>("model.num_tables", v)).transpose()?;
    let cap = get("model.bucket_cap").map(|v| parse_value::<u32>("model.bucket_cap", v)).transpose()?;
    let manual_plan = match (k_bits, tables, cap) {
        (None, None, None) => None,
        (Some(k), Some(l), r) => Some((k, l, r)),
        _ => return Err(config_err("model.k_bits and model.num_tables must be set together")),
    };

    let train = TrainConfig {
        batch_size: parse_value("train.batch_size", &num("train.batch_size", "256")?)?,
        epochs: parse_value("train.epochs", &num("train.epochs", "5")?)?,
        lr: parse_value("train.lr", &num("train.lr", "0.001")?)?,
        rebuild_interval: parse_value("train.rebuild_interval", &num("train.rebuild_interval", "50")?)?,
        aln_enabled: parse_bool("train.aln", get("train.aln").unwrap_or("true"))?,
        inference_sparsity: get("train.inference_sparsity")
            .map(|v| parse_value("train.inference_sparsity", v))
            .transpose()?,
        seed: parse_value("train.seed", &num("train.seed", "0")?)?,
        deterministic: parse_bool("train.deterministic", get("train.deterministic").unwrap_or("true"))?,
    };
    train.validate().map_err(|e| config_err(e.to_string()))?;

    let data = match (get("data.train"), get("data.synth_classes")) {
        (Some(_), Some(_)) => return Err(config_err("data.train and data.synth_classes are mutually exclusive")),
        (None, None) => return Err(config_err("one of data.train or data.synth_classes is required")),
        (Some(_), None) => {
            let index_base: u32 = parse_value("data.index_base", &num("data.index_base", "0")?)?;
            if index_base > 1 {
                return Err(config_err("data.index_base must be 0 or 1"));
            }
            DataSource::Files {
                train: path("data.train").expect("present"),
                test: path("data.test"),
                index_base,
            }
        }
        (None, Some(classes)) => {
            if let Some(k) = ["data.test", "data.index_base"].iter().find(|k| map.contains_key(*k)) {
                return Err(config_err(format!("{k} does not apply to synthetic data")));
            }
            let classes: usize = parse_value("data.synth_classes", classes)?;
            let per_class: usize = parse_value("data.synth_per_class", &num("data.synth_per_class", "3")?)?;
            let features: usize = parse_value("data.synth_features", &num("data.synth_features", "512")?)?;
            let sigma: f64 = parse_value("data.synth_sigma", &num("data.synth_sigma", "0.1")?)?;
            if classes == 0 || features == 0 || per_class < 2 || !(sigma >= 0.0) {
                return Err(config_err(
                    "synthetic data needs classes >= 1, features >= 1, per_class >= 2 and sigma >= 0",
                ));
            }
            DataSource::Synthetic {
                classes,
                per_class,
                features,
                sigma,
                seed: parse_value("data.synth_seed", &num("data.synth_seed", "0")?)?,
            }
        }
    };

    let bench_mode = match get("bench.mode").unwrap_or("dense") {
        "dense" => BenchMode::Dense,
        "sparse" => BenchMode::Sparse,
        other => return Err(config_err(format!("bench.mode: expected dense or sparse, got '{other}'"))),
    };
    let checkpoints_per_epoch: usize =
        parse_value("bench.checkpoints_per_epoch", &num("bench.checkpoints_per_epoch", "2")?)?;
    if checkpoints_per_epoch < 2 {
        return Err(config_err("bench.checkpoints_per_epoch must be at least 2"));
    }
    let eval_samples: usize = parse_value("bench.eval_samples", &num("bench.eval_samples", "1000")?)?;
    if eval_samples == 0 {
        return Err(config_err("bench.eval_samples must be at least 1"));
    }

    Ok(RunConfig {
        layers,
        model_seed: parse_value("model.seed", &num("model.seed", "0")?)?,
        tune,
        manual_plan,
        train,
        workers: parse_value("train.workers", &num("train.workers", "0")?)?,
        data,
        model_out: path("output.model"),
        report_out: path("output.report"),
        bench_out: path("output.bench"),
        checkpoints_per_epoch,
        bench_mode,
        eval_samples,
    })
}

impl RunConfig {
    /// Layer specs with the manual output plan applied, given the input width.
    pub fn layer_specs(&self, input_dim: usize) -> Result<Vec<LayerSpec>, CliError> {
        let mut specs = self.layers.clone();
        if let Some((k, l, r)) = self.manual_plan {
            let prev = if specs.len() > 1 { specs[specs.len() - 2].dim } else { input_dim };
            let out = specs.last_mut().expect("nonempty");
            let r = r.unwrap_or_else(|| lshnet::autotune::bucket_cap_for(k, out.dim));
            let plan = AutotunePlan::manual(k, l, r, out.dim, prev, out.sparsity).map_err(|e| config_err(e.to_string()))?;
            out.plan = Some(plan);
        }
        Ok(specs)
    }
}
