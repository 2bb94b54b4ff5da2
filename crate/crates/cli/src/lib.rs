//! `rally` command-line driver: validate, generate, train, evaluate, predict
//! and explain badminton rally data.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rally_core::blsr::{
    build_instances, parse_dataset, serialize_dataset, validate_dataset, Dataset, Format, Instance, InstanceFilter,
    PlayerId,
};
use rally_core::influence::{self, Attribution};
use rally_core::model::{Checkpoint, CheckpointMeta, ModelConfig, ModelParams};
use rally_core::synth::{self, SynthConfig};
use rally_core::trainer::{self, split_by_match, SplitFractions, SplitRequest, TrainConfig, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const REPEAT_REPORT_FILE: &str = "repeat_report.json";
pub const INFLUENCE_JSON_FILE: &str = "influence.json";
pub const INFLUENCE_CSV_FILE: &str = "influence.csv";

/// Everything a run needs, as read from a `--config` file. Flags override
/// individual fields after loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub split: SplitFractions,
    pub filter: InstanceFilter,
    pub target: PlayerId,
    /// Master seed. When set it replaces the synth and train seeds.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            split: SplitFractions::default(),
            filter: InstanceFilter::default(),
            target: PlayerId::B,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn synth_seed(&self) -> u64 {
        self.seed.unwrap_or(self.synth.seed)
    }
}

#[derive(Debug, Parser)]
#[command(name = "rally", version, about = "Badminton rally win-probability modelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a dataset and report rally invariant violations.
    Validate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Generate a synthetic dataset with a planted winning rule.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Output file format.
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Train a model and write a checkpoint and training report.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        /// Repeat training this many times with derived seeds and report
        /// the mean and standard deviation of the test metrics.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Print AUC and Brier score of a checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Print the win probability of every rally.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Write per-shot influence reports.
    Influence {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Share each pattern's weight over the shots its window covers.
        #[arg(long)]
        spread: bool,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Input format; guessed from the file extension when absent.
    #[arg(long)]
    format: Option<Format>,
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_player)]
    target: Option<PlayerId>,
    /// Admit rallies that fail validation.
    #[arg(long)]
    keep_invalid: bool,
    /// Exclude rallies that ended on a misjudgement.
    #[arg(long)]
    drop_misjudge: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    no_two_cnns: bool,
    #[arg(long)]
    no_cnn: bool,
    #[arg(long)]
    no_bigru: bool,
    #[arg(long)]
    no_temporal_score: bool,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    no_rally_input: bool,
    /// Normalize attention scores by their sum instead of softmax.
    #[arg(long = "literal-normalization", alias = "literal-eq6")]
    literal_normalization: bool,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    /// Defaults to checkpoint.json inside the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_player(s: &str) -> Result<PlayerId, String> {
    s.parse().map_err(|_| format!("unknown player {s:?}, expected A or B"))
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn data(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_DATA, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl From<rally_core::Error> for Failure {
    fn from(e: rally_core::Error) -> Failure {
        match e {
            rally_core::Error::Parse(p) => Failure::data(p.to_string()),
            other => Failure::runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

/// Runs one invocation. `argv[0]` is the program name. Normal output goes
/// to stdout, diagnostics to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<i32> {
    match cmd {
        Command::Validate { data } => validate(&data),
        Command::Synth { common, format } => {
            let cfg = load_config(&common)?;
            let synth_cfg = SynthConfig { seed: cfg.synth_seed(), ..cfg.synth.clone() };
            let d = synth::generate(&synth_cfg).map_err(|e| Failure::usage(e.to_string()))?;
            let ext = match format {
                Format::Csv => "csv",
                Format::Jsonl => "jsonl",
            };
            let path = common.out.join(format!("synth.{ext}"));
            write_file(&path, &serialize_dataset(&d, format))?;
            println!("wrote {} rallies from {} matches to {}", d.rallies.len(), d.matches.len(), path.display());
            Ok(EXIT_OK)
        }
        Command::Train { data, common, model, epochs, patience, runs } => {
            let mut cfg = load_config(&common)?;
            apply_model_flags(&mut cfg.model, &model);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(p) = patience {
                cfg.train.patience = p;
            }
            cfg.model.validate().map_err(|e| Failure::usage(e.to_string()))?;
            let d = load_dataset(&data)?;
            match runs {
                Some(0) => Err(Failure::usage("--runs must be at least 1")),
                Some(n) => {
                    let report = repeat_eval(&cfg, &d, n)?;
                    print!("{}", report.table());
                    write_json(&common.out.join(REPEAT_REPORT_FILE), &report)?;
                    Ok(EXIT_OK)
                }
                None => train_once(&cfg, &d, &common.out),
            }
        }
        Command::Evaluate { data, common, ckpt } => {
            let (instances, params, model_cfg) = scoring_inputs(&data, &common, &ckpt)?;
            let m = trainer::evaluate(&instances, &params, &model_cfg)?;
            match m.auc {
                Some(a) => println!("AUC {a:.4}"),
                None => println!("AUC undefined (single-class labels)"),
            }
            println!("BS {:.4}", m.brier);
            println!("rallies {}", m.count);
            Ok(EXIT_OK)
        }
        Command::Predict { data, common, ckpt } => {
            let (instances, params, model_cfg) = scoring_inputs(&data, &common, &ckpt)?;
            let p = trainer::predict_all(&instances, &params, &model_cfg)?;
            println!("rally_id,p_win");
            for (inst, p) in instances.iter().zip(p) {
                println!("{},{p:.6}", inst.rally_id);
            }
            Ok(EXIT_OK)
        }
        Command::Influence { data, common, ckpt, spread } => {
            let (instances, params, model_cfg) = scoring_inputs(&data, &common, &ckpt)?;
            let attribution = if spread { Attribution::Spread } else { Attribution::Center };
            let reports = instances
                .iter()
                .map(|i| influence::score_shots_with(i, &params, &model_cfg, attribution))
                .collect::<Result<Vec<_>, _>>()?;
            for r in &reports {
                println!("{}", influence::report_text(r));
            }
            write_file(&common.out.join(INFLUENCE_JSON_FILE), &influence::reports_json(&reports)?)?;
            write_file(&common.out.join(INFLUENCE_CSV_FILE), &influence::reports_csv(&reports))?;
            Ok(EXIT_OK)
        }
    }
}

fn validate(args: &DataArgs) -> CliResult<i32> {
    let d = load_dataset(args)?;
    let violations = validate_dataset(&d);
    for (rally, v) in &violations {
        println!("{rally}: {v}");
    }
    println!("{} rallies, {} violations", d.rallies.len(), violations.len());
    Ok(if violations.is_empty() { EXIT_OK } else { EXIT_DATA })
}

fn load_config(common: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_json(&read_file(path)?)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(t) = common.target {
        cfg.target = t;
    }
    cfg.filter.keep_invalid |= common.keep_invalid;
    cfg.filter.drop_misjudge |= common.drop_misjudge;
    Ok(cfg)
}

fn apply_model_flags(m: &mut ModelConfig, f: &ModelArgs) {
    m.use_two_cnns &= !f.no_two_cnns;
    m.use_cnn &= !f.no_cnn;
    m.use_bigru &= !f.no_bigru;
    m.use_temporal_score &= !f.no_temporal_score;
    m.use_attention &= !f.no_attention;
    m.use_rally_input &= !f.no_rally_input;
    m.literal_normalization |= f.literal_normalization;
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::runtime(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    write_file(path, &text)
}

fn load_dataset(args: &DataArgs) -> CliResult<Dataset> {
    let format = args.format.unwrap_or_else(|| Format::from_path(&args.data));
    let text = read_file(&args.data)?;
    parse_dataset(&text, format).map_err(|e| Failure::data(format!("{}: {e}", args.data.display())))
}

fn scoring_inputs(data: &DataArgs, common: &CommonArgs, ckpt: &CheckpointArgs) -> CliResult<(Vec<Instance>, ModelParams, ModelConfig)> {
    let cfg = load_config(common)?;
    let path = ckpt.checkpoint.clone().unwrap_or_else(|| common.out.join(CHECKPOINT_FILE));
    let checkpoint = Checkpoint::from_json(&read_file(&path)?)
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    let params = checkpoint.params()?;
    let target = common.target.or(checkpoint.metadata.target).unwrap_or(cfg.target);
    let d = load_dataset(data)?;
    Ok((build_instances(&d, target, cfg.filter), params, checkpoint.config))
}

/// Splits by match, trains with the configured seed and scores the test
/// matches.
pub fn fit(cfg: &RunConfig, d: &Dataset, seed: u64) -> rally_core::Result<(ModelParams, rally_core::autodiff::AdamState, TrainReport)> {
    let split = split_by_match(d, &SplitRequest::Fractions(cfg.split), seed)?;
    let inst = |part: &Dataset| build_instances(part, cfg.target, cfg.filter);
    let params = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let mut out = trainer::train(&inst(&split.train), &inst(&split.val), params, &cfg.model, &tc)?;
    let test = trainer::evaluate(&inst(&split.test), &out.params, &cfg.model)?;
    out.report.test_auc = test.auc;
    out.report.test_brier = Some(test.brier);
    Ok((out.params, out.adam, out.report))
}

fn train_once(cfg: &RunConfig, d: &Dataset, out: &Path) -> CliResult<i32> {
    let start = Instant::now();
    let seed = cfg.train_seed();
    let (params, adam, mut report) = fit(cfg, d, seed)?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    print!("{}", trainer::history_table(&report.history));
    println!("best epoch {}", report.best_epoch);
    if let Some(a) = report.test_auc {
        println!("test AUC {a:.4}");
    }
    if let Some(b) = report.test_brier {
        println!("test BS {b:.4}");
    }
    let best = report.history.iter().find(|r| r.epoch == report.best_epoch);
    let meta = CheckpointMeta {
        epoch: report.best_epoch,
        seed,
        target: Some(cfg.target),
        val_auc: best.and_then(|r| r.val_auc),
        val_brier: best.map(|r| r.val_brier),
    };
    let ckpt = Checkpoint::new(&cfg.model, &params, Some(&adam), meta);
    write_file(&out.join(CHECKPOINT_FILE), &ckpt.to_json()?)?;
    write_json(&out.join(TRAIN_REPORT_FILE), &report)?;
    println!("wrote {} and {}", out.join(CHECKPOINT_FILE).display(), out.join(TRAIN_REPORT_FILE).display());
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub test_auc: Option<f64>,
    pub test_brier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub runs: Vec<RunResult>,
    /// Over runs with a defined AUC.
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    pub brier_mean: f64,
    pub brier_std: f64,
}

impl RepeatReport {
    pub fn table(&self) -> String {
        let mut out = String::from("run  seed  best_epoch  test_auc  test_bs\n");
        for (i, r) in self.runs.iter().enumerate() {
            let auc = r.test_auc.map_or("-".to_string(), |a| format!("{a:.4}"));
            out.push_str(&format!("{:>3}  {:>4}  {:>10}  {auc:>8}  {:>7.4}\n", i + 1, r.seed, r.best_epoch, r.test_brier));
        }
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        out.push_str(&format!("AUC mean {} std {}\n", fmt(self.auc_mean), fmt(self.auc_std)));
        out.push_str(&format!("BS mean {:.4} std {:.4}\n", self.brier_mean, self.brier_std));
        out
    }
}

/// Mean and sample standard deviation; the deviation of one value is 0.
fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Trains and tests `n_runs` times. Run i uses seed `master + i` for its
/// split, initialization and shuffling, so run 0 reproduces a plain `train`.
pub fn repeat_eval(cfg: &RunConfig, d: &Dataset, n_runs: usize) -> CliResult<RepeatReport> {
    if n_runs == 0 {
        return Err(Failure::usage("n_runs must be at least 1"));
    }
    let master = cfg.train_seed();
    let mut runs = Vec::with_capacity(n_runs);
    for i in 0..n_runs as u64 {
        let seed = master.wrapping_add(i);
        let (_, _, report) = fit(cfg, d, seed)?;
        runs.push(RunResult {
            seed,
            best_epoch: report.best_epoch,
            test_auc: report.test_auc,
            test_brier: report.test_brier.unwrap_or(f64::NAN),
        });
    }
    let aucs: Vec<f64> = runs.iter().filter_map(|r| r.test_auc).collect();
    let briers: Vec<f64> = runs.iter().map(|r| r.test_brier).collect();
    let auc = mean_std(&aucs);
    let (brier_mean, brier_std) = mean_std(&briers).expect("at least one run");
    Ok(RepeatReport {
        runs,
        auc_mean: auc.map(|a| a.0),
        auc_std: auc.map(|a| a.1),
        brier_mean,
        brier_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_edge_cases() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[0.7]), Some((0.7, 0.0)));
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_unknown_keys_and_fills_defaults() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"use_cnn": false, "dropout": 0.5}}"#).is_err());
        let c = RunConfig::from_json(r#"{"model": {"use_cnn": false}, "seed": 4}"#).unwrap();
        assert!(!c.model.use_cnn);
        assert!(c.model.use_bigru);
        assert_eq!(c.train_seed(), 4);
        assert_eq!(c.synth_seed(), 4);
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn model_flags_only_switch_components_off() {
        let mut m = ModelConfig::default();
        let flags = ModelArgs {
            no_two_cnns: false,
            no_cnn: true,
            no_bigru: false,
            no_temporal_score: false,
            no_attention: true,
            no_rally_input: false,
            literal_normalization: false,
        };
        apply_model_flags(&mut m, &flags);
        assert!(!m.use_cnn && !m.use_attention && m.use_bigru && !m.literal_normalization);
    }
}
