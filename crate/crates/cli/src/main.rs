use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use tempfile::NamedTempFile;

use lshnet::{
    autotune, evaluate, parse_xc, plan_cost_ratio, precision_at_k, predict_top_k, synth_clustered, AutotuneConfig,
    InferenceMode, Network, Trainer, XcDataset,
};

mod config;

use config::{keys_help, parse_config, BenchMode, DataSource, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io { path: PathBuf, source: io::Error },
    Core(lshnet::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<lshnet::Error> for CliError {
    fn from(e: lshnet::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use lshnet::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::InfeasibleSparsity { .. } | E::InvalidArgument(_) => 2,
                E::Data(_) | E::Dimension { .. } | E::Format(_) => 3,
                E::Io(_) => 4,
                E::Contract(_) => 1,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser)]
#[command(name = "lshnet", version, about = "Train and serve wide-output networks with hash-sampled sparse layers", after_long_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dense,
    Sparse,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    #[command(after_long_help = keys_help())]
    Train { config: PathBuf },
    /// Report precision@k and mean single-sample latency.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// XC-format dataset.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        data: Option<PathBuf>,
        /// Evaluate on the held-out split described by a run config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_enum, default_value = "dense")]
        mode: Mode,
        /// Output sparsity for sparse mode; defaults to the training sparsity.
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long, default_value_t = 0)]
        index_base: u32,
    },
    /// Print the top-k labels for every example, one line each.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value = "dense")]
        mode: Mode,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long, default_value_t = 0)]
        index_base: u32,
    },
    /// Choose hash parameters for a layer.
    Autotune {
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 128)]
        prev_dim: usize,
        #[arg(long)]
        sparsity: f64,
        #[arg(long, default_value_t = 1.0)]
        c1: f64,
        #[arg(long, default_value_t = 0.1)]
        c2: f64,
        #[arg(long, default_value_t = 256)]
        l_max: u32,
    },
    /// Train from a config and record (seconds, p@1) checkpoints as CSV.
    #[command(after_long_help = keys_help())]
    Bench { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            with_workers(cfg.workers, || cmd_train(&cfg))
        }
        Command::Bench { config } => {
            let cfg = load_config(&config)?;
            with_workers(cfg.workers, || cmd_bench(&cfg))
        }
        Command::Eval {
            model,
            data,
            config,
            k,
            mode,
            sparsity,
            index_base,
        } => {
            if k == 0 {
                return Err(CliError::Config("--k must be at least 1".into()));
            }
            let net = load_model(&model)?;
            let test = match (data, config) {
                (Some(path), _) => load_dataset(&path, index_base)?,
                (None, Some(c)) => {
                    let (train, test) = load_data(&load_config(&c)?.data)?;
                    test.unwrap_or(train)
                }
                (None, None) => unreachable!("clap requires one"),
            };
            let mode = inference_mode(&net, mode, sparsity)?;
            let r = evaluate(&net, &test, k, mode)?;
            println!("p@{k}={:.6} latency_ms={:.6} mode={}", r.precision, r.mean_latency_ms, mode.name());
            Ok(())
        }
        Command::Predict {
            model,
            data,
            k,
            mode,
            sparsity,
            index_base,
        } => {
            let net = load_model(&model)?;
            let ds = load_dataset(&data, index_base)?;
            let mode = inference_mode(&net, mode, sparsity)?;
            let stdout = io::stdout();
            let mut out = BufWriter::new(stdout.lock());
            let mut scratch = net.scratch();
            for ex in &ds.examples {
                let top = predict_top_k(&net, &ex.features, k, mode, &mut scratch)?;
                let line: Vec<String> = top.iter().map(u32::to_string).collect();
                writeln!(out, "{}", line.join(" ")).map_err(io_err(Path::new("<stdout>")))?;
            }
            out.flush().map_err(io_err(Path::new("<stdout>")))
        }
        Command::Autotune {
            dim,
            prev_dim,
            sparsity,
            c1,
            c2,
            l_max,
        } => {
            let plan = autotune(dim, prev_dim, sparsity, &AutotuneConfig { c1, c2, l_max })?;
            println!("K={}", plan.k_bits);
            println!("L={}", plan.num_tables);
            println!("R={}", plan.bucket_cap);
            println!("cost_ratio={:.6}", plan_cost_ratio(&plan));
            Ok(())
        }
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    if workers == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("train.workers: {e}")))?;
    pool.install(f)
}

fn inference_mode(net: &Network, mode: Mode, sparsity: Option<f64>) -> CliResult<InferenceMode> {
    if let Some(s) = sparsity {
        if !(s > 0.0 && s <= 1.0) {
            return Err(CliError::Config(format!("--sparsity must lie in (0, 1], got {s}")));
        }
    }
    Ok(match mode {
        Mode::Dense => InferenceMode::Dense,
        Mode::Sparse => InferenceMode::sparse_for(net, sparsity),
    })
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

fn load_dataset(path: &Path, index_base: u32) -> CliResult<XcDataset> {
    let file = File::open(path).map_err(io_err(path))?;
    match parse_xc(BufReader::new(file), index_base) {
        Err(lshnet::Error::Io(source)) => Err(CliError::Io {
            path: path.to_path_buf(),
            source,
        }),
        other => Ok(other?),
    }
}

/// Training set and optional held-out set.
fn load_data(src: &DataSource) -> CliResult<(XcDataset, Option<XcDataset>)> {
    match src {
        DataSource::Files {
            train,
            test,
            index_base,
        } => {
            let tr = load_dataset(train, *index_base)?;
            let te = test.as_deref().map(|p| load_dataset(p, *index_base)).transpose()?;
            Ok((tr, te))
        }
        &DataSource::Synthetic {
            classes,
            per_class,
            features,
            sigma,
            seed,
        } => {
            let all = synth_clustered(classes, per_class, features, sigma, seed);
            let (tr, te) = all.split_at(classes * (per_class - 1));
            Ok((tr, Some(te)))
        }
    }
}

fn load_model(path: &Path) -> CliResult<Network> {
    let file = File::open(path).map_err(io_err(path))?;
    match Network::read_from(&mut BufReader::new(file)) {
        Err(lshnet::Error::Io(source)) if source.kind() != io::ErrorKind::UnexpectedEof => Err(CliError::Io {
            path: path.to_path_buf(),
            source,
        }),
        Err(lshnet::Error::Io(_)) => Err(CliError::Core(lshnet::Error::Format(format!(
            "{}: truncated model file",
            path.display()
        )))),
        other => Ok(other?),
    }
}

fn build_network(cfg: &RunConfig, train: &XcDataset) -> CliResult<Network> {
    let specs = cfg.layer_specs(train.num_features)?;
    Ok(Network::new(train.num_features, &specs, &cfg.tune, cfg.model_seed)?)
}

/// A temp file next to `target`, renamed over it by [`commit`].
fn staging(target: &Path) -> CliResult<NamedTempFile> {
    let dir = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    NamedTempFile::new_in(dir).map_err(io_err(target))
}

fn commit(tmp: NamedTempFile, target: &Path) -> CliResult<()> {
    tmp.as_file().sync_all().map_err(io_err(target))?;
    tmp.persist(target).map_err(|e| CliError::Io {
        path: target.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn stage_model(net: &Network, target: &Path) -> CliResult<NamedTempFile> {
    let tmp = staging(target)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        match net.write_to(&mut w) {
            Err(lshnet::Error::Io(source)) => return Err(CliError::Io { path: target.to_path_buf(), source }),
            other => other?,
        }
        w.flush().map_err(io_err(target))?;
    }
    Ok(tmp)
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let model_path = cfg
        .model_out
        .as_deref()
        .ok_or_else(|| CliError::Config("output.model is required for train".into()))?;
    let (train, _) = load_data(&cfg.data)?;
    let net = build_network(cfg, &train)?;
    let mut trainer = Trainer::new(net, cfg.train.clone())?;

    let mut report = match &cfg.report_out {
        Some(p) => Some((staging(p)?, p.as_path())),
        None => None,
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = trainer.train_with(&train, |rec, _| {
        let line = rec.to_json_line();
        writeln!(out, "{line}")?;
        if let Some((tmp, _)) = report.as_mut() {
            writeln!(tmp, "{line}")?;
        }
        Ok(())
    });
    let summary = match result {
        Ok(r) => r,
        Err(lshnet::Error::Io(source)) => {
            return Err(CliError::Io {
                path: PathBuf::from("<report>"),
                source,
            })
        }
        Err(e) => return Err(e.into()),
    };
    for e in &summary.epochs {
        eprintln!("epoch {} loss={:.6} p@1={:.4} seconds={:.3}", e.epoch, e.loss, e.p_at_1, e.seconds);
    }

    let model_tmp = stage_model(trainer.network(), model_path)?;
    if let Some((tmp, path)) = report {
        commit(tmp, path)?;
    }
    commit(model_tmp, model_path)
}

fn checkpoint_p_at_1(net: &Network, data: &XcDataset, limit: usize, mode: InferenceMode) -> lshnet::Result<f64> {
    let n = data.len().min(limit);
    let sum: f64 = data.examples[..n]
        .par_iter()
        .map_init(
            || net.scratch(),
            |scratch, ex| predict_top_k(net, &ex.features, 1, mode, scratch).map(|top| precision_at_k(&top, &ex.labels, 1)),
        )
        .collect::<lshnet::Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(sum / n as f64)
}

fn cmd_bench(cfg: &RunConfig) -> CliResult<()> {
    let (train, test) = load_data(&cfg.data)?;
    let test = test.unwrap_or_else(|| train.clone());
    if test.is_empty() {
        return Err(CliError::Config("bench needs a nonempty evaluation set".into()));
    }
    let net = build_network(cfg, &train)?;
    let mode = match cfg.bench_mode {
        BenchMode::Dense => InferenceMode::Dense,
        BenchMode::Sparse => InferenceMode::sparse_for(&net, cfg.train.inference_sparsity),
    };
    let batches = train.len().div_ceil(cfg.train.batch_size);
    let per_epoch = cfg.checkpoints_per_epoch;
    if batches < per_epoch {
        return Err(CliError::Config(format!(
            "{batches} batches per epoch cannot hold {per_epoch} checkpoints; lower train.batch_size"
        )));
    }
    let mut trainer = Trainer::new(net, cfg.train.clone())?;

    let mut rows = vec!["seconds,p_at_1".to_string()];
    let mut eval_time = 0.0;
    trainer.train_with(&train, |rec, t| {
        let b = rec.batch;
        if (b + 1) * per_epoch / batches > b * per_epoch / batches {
            let start = Instant::now();
            let p = checkpoint_p_at_1(t.network(), &test, cfg.eval_samples, mode)?;
            rows.push(format!("{:.6},{:.6}", rec.seconds - eval_time, p));
            eval_time += start.elapsed().as_secs_f64();
        }
        Ok(())
    })?;

    let csv = rows.join("\n") + "\n";
    match &cfg.bench_out {
        Some(path) => {
            let mut tmp = staging(path)?;
            tmp.write_all(csv.as_bytes()).map_err(io_err(path))?;
            commit(tmp, path)
        }
        None => io::stdout().write_all(csv.as_bytes()).map_err(io_err(Path::new("<stdout>"))),
    }
}
