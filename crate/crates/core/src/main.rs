use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zselect::cli::{self, Command, RunConfig};
use zselect::Error;

#[derive(Parser)]
#[command(name = "zselect", version = cli::VERSION_LINE, about = "Selective classification by Z-tests over stochastic forward passes")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a stochastic-weight classifier and write a checkpoint.
    Train(Opts),
    /// Sweep thresholds for the Z-test rule and Softmax Response; write AUROC and ROC CSVs.
    Eval(Opts),
    /// Write a distorted copy of a dataset container.
    Distort(Opts),
}

#[derive(Args, Default)]
struct Opts {
    /// key=value file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset container (ZSELDS1).
    #[arg(long)]
    data: Option<String>,
    /// Synthetic blobs: classes=4,channels=1,height=8,width=8,per-class=500,separation=1,noise=0.15
    #[arg(long, num_args = 0..=1, default_missing_value = "default")]
    synthetic: Option<String>,
    /// Comma-separated CIFAR-10 binary batch files.
    #[arg(long)]
    cifar: Option<String>,
    /// Classes held out as out-of-distribution, e.g. 1,9 [default: none]
    #[arg(long)]
    exclude: Option<String>,
    /// Fraction of kept-class samples used for training [default: 2/3]
    #[arg(long)]
    train_fraction: Option<String>,
    /// Stochastic passes per input [default: 30]
    #[arg(long)]
    n_passes: Option<String>,
    /// ztest | sr | both [default: both]
    #[arg(long)]
    method: Option<String>,
    /// Fixed Z critical value to report, or "sweep" [default: sweep]
    #[arg(long)]
    z: Option<String>,
    /// Fixed Softmax Response threshold to report, or "sweep" [default: sweep]
    #[arg(long)]
    sr_threshold: Option<String>,
    /// Scores fed to the Z-tests: softmax | logit [default: softmax]
    #[arg(long)]
    score_space: Option<String>,
    /// Softmax Response input: deterministic (mean weights) | single-pass [default: deterministic]
    #[arg(long)]
    sr_scores: Option<String>,
    /// Accepted misclassified positives: ignore | count-as-tp [default: ignore]
    #[arg(long)]
    misclassified: Option<String>,
    /// Distorted in-distribution samples are: positive | negative [default: positive]
    #[arg(long)]
    distorted: Option<String>,
    /// kind=<motion_blur|frosted_glass|gaussian_blur|gaussian_noise|salt_pepper|gamma|occlusion>,param=value;
    /// repeatable; "all" adds every default severity. Gamma applies out = in^gamma (gamma > 1 darkens).
    #[arg(long = "distort")]
    distort: Vec<String>,
    /// Master seed (required).
    #[arg(long)]
    seed: Option<String>,
    /// Worker threads, 0 = all cores [default: 0]
    #[arg(long)]
    threads: Option<String>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: Option<String>,
    /// Output path: checkpoint (train), report CSV (eval) or container (distort).
    #[arg(long)]
    out: Option<String>,
    /// Curve CSV path for eval [default: <out>.curves.csv]
    #[arg(long)]
    curves: Option<String>,
    /// Hidden layer widths [default: 32,32]
    #[arg(long)]
    hidden: Option<String>,
    /// [default: 20]
    #[arg(long)]
    epochs: Option<String>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<String>,
    /// SGD learning rate [default: 0.05]
    #[arg(long)]
    lr: Option<String>,
    /// KL weight beta [default: 1]
    #[arg(long)]
    kl_weight: Option<String>,
    /// flipout | independent [default: flipout]
    #[arg(long)]
    noise_mode: Option<String>,
}

impl Opts {
    fn to_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: &Option<String>| {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        };
        put("data", &self.data);
        put("synthetic", &self.synthetic);
        put("cifar", &self.cifar);
        put("exclude", &self.exclude);
        put("train-fraction", &self.train_fraction);
        put("n-passes", &self.n_passes);
        put("method", &self.method);
        put("z", &self.z);
        put("sr-threshold", &self.sr_threshold);
        put("score-space", &self.score_space);
        put("sr-scores", &self.sr_scores);
        put("misclassified", &self.misclassified);
        put("distorted", &self.distorted);
        put("seed", &self.seed);
        put("threads", &self.threads);
        put("model", &self.model);
        put("out", &self.out);
        put("curves", &self.curves);
        put("hidden", &self.hidden);
        put("epochs", &self.epochs);
        put("batch-size", &self.batch_size);
        put("lr", &self.lr);
        put("kl-weight", &self.kl_weight);
        put("noise-mode", &self.noise_mode);
        if !self.distort.is_empty() {
            map.insert("distort".into(), self.distort.join(";"));
        }
        map
    }
}

fn resolve(command: Command, opts: &Opts) -> zselect::Result<RunConfig> {
    let file = match &opts.config {
        Some(p) => cli::parse_config_file(&fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    RunConfig::from_map(command, &cli::merge(file, opts.to_map()))
}

fn main() -> ExitCode {
    let parsed = Cli::parse();
    let (command, opts) = match &parsed.command {
        Cmd::Train(o) => (Command::Train, o),
        Cmd::Eval(o) => (Command::Eval, o),
        Cmd::Distort(o) => (Command::Distort, o),
    };
    let result = resolve(command, opts).and_then(|cfg| cli::run(&cfg));
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
