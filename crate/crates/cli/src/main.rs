mod settings;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tmignn::dataio::{parse_sessions, prepare, read_dataset, write_dataset, Dataset, PrepareConfig, SessionRecord};
use tmignn::error::{ConfigError, DataError, ModelError, TrainError};
use tmignn::eval::{evaluate, top_k, MetricsReport, PopularityRanker, REPORT_CUTOFFS};
use tmignn::exec::ExecMode;
use tmignn::model::{load_checkpoint, save_checkpoint, Ablation, Checkpoint, Model, ModelConfig};
use tmignn::synth::{generate, SynthConfig, TargetRule};
use tmignn::train::{train, TrainConfig};

use settings::{parse_ablation, ConfigFile};

// training allocates many small short-lived buffers per example
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(c) => c.into(),
            ModelError::NonFinite(_) | ModelError::Tensor(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Model(m) => m.into(),
            TrainError::EmptyDataset => Failure::Data(e.to_string()),
            TrainError::Diverged { .. } => Failure::Numeric(e.to_string()),
        }
    }
}

type Result<T, E = Failure> = std::result::Result<T, E>;

#[derive(Parser)]
#[command(
    name = "tmignn",
    version,
    about = "Temporal multi-interest GNN for session-based recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a raw click log into a dataset file.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic dataset with planted interests.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score the test split of a dataset.
    Eval(EvalArgs),
    /// Rank items for one session.
    Predict(PredictArgs),
    /// Train and evaluate every ablation variant.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Delimited log with session_id, item_id and timestamp columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 5)]
    min_freq: usize,
    /// Split sessions at gaps longer than this many seconds.
    #[arg(long)]
    gap_split: Option<i64>,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Latest,
    Uniform,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    /// Where to write the per-item interest labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    sessions: usize,
    #[arg(long, default_value_t = 2)]
    pools: usize,
    #[arg(long, default_value_t = 20)]
    pool_size: usize,
    #[arg(long, default_value_t = 3)]
    min_items: usize,
    #[arg(long, default_value_t = 5)]
    max_items: usize,
    /// Alternate the two interests instead of laying them out as blocks.
    #[arg(long)]
    interleaved: bool,
    #[arg(long, value_enum, default_value = "latest")]
    target: TargetArg,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Model and optimizer settings. Flags override values from `--config`.
#[derive(Args, Clone, Default)]
struct Hyper {
    /// Flat key = value file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    interests: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    max_step: Option<usize>,
    /// Seconds per time bucket.
    #[arg(long)]
    bucket_width: Option<u64>,
    /// Only keep forward item transitions.
    #[arg(long)]
    unidirectional: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_step: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many epochs without a better validation H@20.
    #[arg(long)]
    patience: Option<usize>,
    /// Compute per-example gradients on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Hyper {
    fn resolve(&self, item_count: usize) -> Result<(ModelConfig, TrainConfig)> {
        let mut model = ModelConfig::new(item_count);
        let mut train = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let file = ConfigFile::parse(&text).map_err(Failure::Usage)?;
            file.apply(&mut model, &mut train).map_err(Failure::Usage)?;
        }
        macro_rules! flag {
            ($src:ident => $dst:expr) => {
                if let Some(v) = self.$src {
                    $dst = v;
                }
            };
        }
        flag!(dim => model.dim);
        flag!(interests => model.interests);
        flag!(layers => model.layers);
        flag!(max_step => model.max_step);
        flag!(bucket_width => model.bucket_width);
        flag!(lr => train.learning_rate);
        flag!(lr_decay => train.lr_decay);
        flag!(decay_step => train.decay_step);
        flag!(batch_size => train.batch_size);
        flag!(epochs => train.epochs);
        flag!(lambda => train.lambda);
        flag!(seed => train.seed);
        if self.unidirectional {
            model.bidirectional = false;
        }
        if self.patience.is_some() {
            train.patience = self.patience;
        }
        Ok((model, train))
    }

    fn mode(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training log, one JSON record per epoch.
    #[arg(long)]
    log: Option<PathBuf>,
    /// One of full, -V2V, -U2V, -Last, First, -Interest, -Loss.
    #[arg(long, allow_hyphen_values = true)]
    ablation: Option<String>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, required_unless_present = "popularity")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the training-frequency baseline instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    popularity: bool,
    /// Also write the report here.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated item ids, oldest first.
    #[arg(long, requires = "timestamps", conflicts_with = "session_file")]
    items: Option<String>,
    /// Comma-separated unix seconds, one per item.
    #[arg(long)]
    timestamps: Option<String>,
    /// Log file holding exactly one session.
    #[arg(long, required_unless_present = "items")]
    session_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    /// Print the session graph's edge lists.
    #[arg(long)]
    dump_graph: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(read_dataset(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.test_frac) {
        return Err(Failure::Usage("--test-frac must be in [0, 1)".into()));
    }
    let cfg = PrepareConfig {
        min_session_len: a.min_len,
        min_item_freq: a.min_freq,
        gap_split: a.gap_split,
        test_fraction: a.test_frac,
    };
    let ds = prepare(parse_sessions(&a.input)?, &cfg);
    write_dataset(&a.output, &ds)?;
    eprintln!(
        "{} items, {} train and {} test examples",
        ds.item_count(),
        ds.train.len(),
        ds.test.len()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        items_per_interest: (a.min_items, a.max_items),
        chunked: !a.interleaved,
        target_rule: match a.target {
            TargetArg::Latest => TargetRule::LatestInterest,
            TargetArg::Uniform => TargetRule::Uniform,
        },
        test_fraction: a.test_frac,
        ..SynthConfig::with_pools(a.pools, a.pool_size, a.sessions, a.seed)
    };
    let corpus = generate(&cfg, ExecMode::Parallel)?;
    write_dataset(&a.output, &corpus.to_dataset())?;
    if let Some(path) = &a.labels {
        corpus.write_labels(path)?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let (mut model_cfg, train_cfg) = a.hyper.resolve(ds.item_count())?;
    if let Some(label) = &a.ablation {
        model_cfg.ablation = parse_ablation(label).map_err(Failure::Usage)?;
    }
    let mut model = Model::new(model_cfg, train_cfg.seed)?;
    let validation = (!ds.test.is_empty()).then_some(ds.test.as_slice());
    let mut log_text = String::new();
    let result = train(&mut model, &ds.train, validation, &train_cfg, a.hyper.mode(), |r| {
        let line = r.to_json_line();
        eprintln!("{line}");
        log_text.push_str(&line);
        log_text.push('\n');
    });
    if let Some(path) = &a.log {
        write_text(path, &log_text)?;
    }
    let checkpoint = |model: Model| Checkpoint {
        model,
        vocab: Some(ds.vocab.clone()),
    };
    match result {
        Ok(out) => {
            save_checkpoint(&a.checkpoint, &checkpoint(out.model))?;
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            save_checkpoint(&a.checkpoint, &checkpoint(*last_good))?;
            Err(Failure::Numeric(format!(
                "training diverged in epoch {epoch} ({reason}); last good parameters saved"
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let mode = if a.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    let report: MetricsReport = if a.popularity {
        let ranker = PopularityRanker::fit(&ds.train, ds.item_count()).map_err(|e| Failure::Data(e.to_string()))?;
        evaluate(&ranker, &ds.test, &REPORT_CUTOFFS, mode)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap enforces a checkpoint");
        let ck = load_checkpoint(path)?;
        if ck.model.config.item_count != ds.item_count() {
            return Err(Failure::Data(format!(
                "checkpoint has {} items but the dataset has {}",
                ck.model.config.item_count,
                ds.item_count()
            )));
        }
        evaluate(&ck.model, &ds.test, &REPORT_CUTOFFS, mode)?
    };
    let text = report.format();
    print!("{text}");
    if let Some(path) = &a.output {
        write_text(path, &text)?;
    }
    Ok(())
}

fn split_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("cannot parse {what} `{s}`")))
        })
        .collect()
}

fn predict_session(a: &PredictArgs, ck: &Checkpoint) -> Result<(SessionRecord, Vec<String>)> {
    let (raw_items, timestamps): (Vec<String>, Vec<i64>) = match (&a.items, &a.timestamps, &a.session_file) {
        (Some(items), Some(ts), _) => (split_list(items, "item")?, split_list(ts, "timestamp")?),
        (_, _, Some(path)) => {
            let mut sessions = parse_sessions(path)?;
            if sessions.len() != 1 {
                return Err(Failure::Data(format!(
                    "{}: expected exactly one session, found {}",
                    path.display(),
                    sessions.len()
                )));
            }
            let s = sessions.remove(0);
            (s.items, s.timestamps)
        }
        _ => {
            return Err(Failure::Usage(
                "give --items and --timestamps, or --session-file".into(),
            ))
        }
    };
    if raw_items.is_empty() || raw_items.len() != timestamps.len() {
        return Err(Failure::Usage(
            "items and timestamps must be non-empty and of equal length".into(),
        ));
    }
    if timestamps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Failure::Usage("timestamps must be nondecreasing".into()));
    }
    let vocab: Vec<String> = match &ck.vocab {
        Some(v) => v.clone(),
        None => (0..ck.model.config.item_count).map(|i| i.to_string()).collect(),
    };
    let items = raw_items
        .iter()
        .map(|raw| {
            vocab
                .iter()
                .position(|v| v == raw)
                .ok_or_else(|| Failure::Data(format!("item `{raw}` is not in the checkpoint vocabulary")))
        })
        .collect::<Result<_>>()?;
    let session = SessionRecord {
        session_id: "query".into(),
        items,
        timestamps,
    };
    Ok((session, vocab))
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    if a.topk == 0 {
        return Err(Failure::Usage("--topk must be at least 1".into()));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let (session, vocab) = predict_session(&a, &ck)?;
    let (scores, trace, graph) = ck.model.infer(&session)?;
    let mut out = String::new();
    if a.dump_graph {
        out.push_str(&graph.edge_list_dump());
    }
    out.push_str("rank\titem\tscore\n");
    for (r, i) in top_k(scores.data(), a.topk).into_iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{:.6}", r + 1, vocab[i], scores.data()[i]);
    }
    let alpha = &trace.last().expect("at least one layer").assignment;
    if alpha.is_empty() {
        out.push_str("alpha: model has no interest nodes\n");
    } else {
        let n = graph.node_count();
        out.push_str("alpha");
        for &item in &graph.item_nodes {
            let _ = write!(out, "\t{}", vocab[item]);
        }
        out.push('\n');
        for (h, row) in alpha.chunks(n).enumerate() {
            let _ = write!(out, "u{h}");
            for w in row {
                let _ = write!(out, "\t{w:.4}");
            }
            out.push('\n');
        }
    }
    print!("{out}");
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    if ds.test.is_empty() {
        return Err(Failure::Data("dataset has no test split".into()));
    }
    let (base, train_cfg) = a.hyper.resolve(ds.item_count())?;
    let mut table = String::from("variant\tH@10\tN@10\tH@20\tN@20\n");
    for label in Ablation::VARIANTS {
        let ablation = Ablation::from_label(label).expect("known label");
        let cfg = ModelConfig {
            ablation,
            interests: if ablation.single_interest { 1 } else { base.interests },
            ..base.clone()
        };
        let mut model = Model::new(cfg, train_cfg.seed)?;
        train(&mut model, &ds.train, None, &train_cfg, a.hyper.mode(), |_| {})?;
        let r = evaluate(&model, &ds.test, &REPORT_CUTOFFS, a.hyper.mode())?;
        let (m10, m20) = (r.at(10).expect("cutoff"), r.at(20).expect("cutoff"));
        let row = format!(
            "{label}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            m10.hit, m10.ndcg, m20.hit, m20.ndcg
        );
        eprint!("{row}");
        table.push_str(&row);
    }
    print!("{table}");
    if let Some(path) = &a.output {
        write_text(path, &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
