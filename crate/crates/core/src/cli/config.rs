//! Run configuration: CLI flags over a `key=value` config file over defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::datasets::BlobSpec;
use crate::distort::Distortion;
use crate::error::{Error, Result};
use crate::evaluate::MisclassifiedPolicy;
use crate::net::NoiseMode;
use crate::selective::ScoreSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Distort,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(BlobSpec),
    Container(PathBuf),
    Cifar(Vec<PathBuf>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSelection {
    ZTest,
    Sr,
    Both,
}

/// Where Softmax Response takes its probabilities from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrSource {
    /// Mean-weight forward pass.
    Deterministic,
    /// One stochastic forward pass.
    SinglePass,
}

/// How distorted in-distribution samples are labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortedPolicy {
    /// Distorted in-distribution samples stay positives with their labels.
    Positive,
    /// Clean in-distribution samples are the positives; every distorted
    /// sample is a negative.
    Negative,
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub data: Option<DataSource>,
    pub exclude: BTreeSet<u16>,
    pub train_fraction: f64,
    pub passes: usize,
    pub method: MethodSelection,
    /// Fixed operating point; `None` sweeps only.
    pub z_threshold: Option<f64>,
    pub sr_threshold: Option<f64>,
    pub score_space: ScoreSpace,
    pub sr_source: SrSource,
    pub misclassified: MisclassifiedPolicy,
    pub distorted: DistortedPolicy,
    pub distortions: Vec<Distortion>,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub curves: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub noise_mode: NoiseMode,
}

/// Every recognised key with its default (`None` = no default).
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("data", None),
    ("synthetic", None),
    ("cifar", None),
    ("exclude", Some("")),
    ("train-fraction", Some("0.6666666666666666")),
    ("n-passes", Some("30")),
    ("method", Some("both")),
    ("z", Some("sweep")),
    ("sr-threshold", Some("sweep")),
    ("score-space", Some("softmax")),
    ("sr-scores", Some("deterministic")),
    ("misclassified", Some("ignore")),
    ("distorted", Some("positive")),
    ("distort", Some("")),
    ("seed", None),
    ("threads", Some("0")),
    ("model", None),
    ("out", None),
    ("curves", None),
    ("hidden", Some("32,32")),
    ("epochs", Some("20")),
    ("batch-size", Some("32")),
    ("lr", Some("0.05")),
    ("kl-weight", Some("1")),
    ("noise-mode", Some("flipout")),
];

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected key=value", no + 1)))?;
        let key = k.trim().to_string();
        if !KEYS.iter().any(|(name, _)| *name == key) {
            return Err(Error::Usage(format!(
                "config line {}: unknown key {key:?}",
                no + 1
            )));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

/// `cli` entries win over `file` entries, which win over defaults.
pub fn merge(
    file: BTreeMap<String, String>,
    cli: BTreeMap<String, String>,
) -> BTreeMap<String, String> {
    let mut merged: BTreeMap<String, String> = KEYS
        .iter()
        .filter_map(|(k, d)| d.map(|d| (k.to_string(), d.to_string())))
        .collect();
    merged.extend(file);
    merged.extend(cli);
    merged
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Usage(format!("invalid value {v:?} for --{key}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn threshold(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "sweep" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

/// Parses `classes=4,channels=1,...`; `default` or empty keeps defaults.
pub fn parse_blob_spec(text: &str, seed: u64) -> Result<BlobSpec> {
    let mut spec = BlobSpec {
        seed,
        ..BlobSpec::default()
    };
    for part in text
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty() && *p != "default")
    {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            Error::Usage(format!("expected key=value in --synthetic, got {part:?}"))
        })?;
        match k {
            "classes" => spec.num_classes = parse(k, v)?,
            "channels" => spec.channels = parse(k, v)?,
            "height" => spec.height = parse(k, v)?,
            "width" => spec.width = parse(k, v)?,
            "per-class" => spec.samples_per_class = parse(k, v)?,
            "separation" => spec.separation = parse(k, v)?,
            "noise" => spec.noise_sigma = parse(k, v)?,
            "layout" => spec.layout = parse(k, v)?,
            "background" => spec.background = parse(k, v)?,
            other => return Err(Error::Usage(format!("unknown --synthetic key {other:?}"))),
        }
    }
    Ok(spec)
}

pub fn blob_spec_string(spec: &BlobSpec) -> String {
    format!(
        "layout={},background={},classes={},channels={},height={},width={},per-class={},separation={},noise={}",
        spec.layout,
        spec.background,
        spec.num_classes,
        spec.channels,
        spec.height,
        spec.width,
        spec.samples_per_class,
        spec.separation,
        spec.noise_sigma
    )
}

impl RunConfig {
    /// Builds a configuration from a merged key map (see [`merge`]).
    pub fn from_map(command: Command, map: &BTreeMap<String, String>) -> Result<Self> {
        for k in map.keys() {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::Usage(format!("unknown option {k:?}")));
            }
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let req = |k: &str| get(k).ok_or_else(|| Error::Usage(format!("missing value for --{k}")));

        let seed: u64 = parse(
            "seed",
            get("seed").ok_or_else(|| Error::Usage("--seed is required".into()))?,
        )?;

        let sources = [get("data"), get("synthetic"), get("cifar")];
        if sources.iter().filter(|s| s.is_some()).count() > 1 {
            return Err(Error::Usage(
                "give only one of --data, --synthetic, --cifar".into(),
            ));
        }
        let data = match sources {
            [Some(p), _, _] => Some(DataSource::Container(PathBuf::from(p))),
            [_, Some(s), _] => Some(DataSource::Synthetic(parse_blob_spec(
                s,
                crate::rng::derive(seed, "data"),
            )?)),
            [_, _, Some(list)] => Some(DataSource::Cifar(
                list.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect(),
            )),
            _ => None,
        };

        let passes: usize = parse("n-passes", req("n-passes")?)?;
        if passes < 2 {
            return Err(Error::Usage("--n-passes must be at least 2".into()));
        }
        let train_fraction: f64 = parse("train-fraction", req("train-fraction")?)?;
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Usage("--train-fraction must be in (0, 1)".into()));
        }

        let method = match req("method")? {
            "ztest" => MethodSelection::ZTest,
            "sr" => MethodSelection::Sr,
            "both" => MethodSelection::Both,
            other => {
                return Err(Error::Usage(format!(
                    "unknown --method {other:?} (ztest|sr|both)"
                )))
            }
        };
        let sr_source = match req("sr-scores")? {
            "deterministic" => SrSource::Deterministic,
            "single-pass" => SrSource::SinglePass,
            other => return Err(Error::Usage(format!("unknown --sr-scores {other:?}"))),
        };
        let distorted = match req("distorted")? {
            "positive" => DistortedPolicy::Positive,
            "negative" => DistortedPolicy::Negative,
            other => return Err(Error::Usage(format!("unknown --distorted {other:?}"))),
        };
        let noise_mode = match req("noise-mode")? {
            "flipout" => NoiseMode::Flipout,
            "independent" => NoiseMode::Independent,
            other => return Err(Error::Usage(format!("unknown --noise-mode {other:?}"))),
        };

        let mut distortions = Vec::new();
        for spec in req("distort")?
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
        {
            if spec == "all" {
                distortions.extend(Distortion::default_suite());
            } else {
                distortions.push(spec.parse::<Distortion>()?);
            }
        }

        let sr_threshold = threshold("sr-threshold", req("sr-threshold")?)?;
        if let Some(t) = sr_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Usage("--sr-threshold must be in [0, 1]".into()));
            }
        }
        let hidden: Vec<usize> = list("hidden", req("hidden")?)?;
        if hidden.contains(&0) {
            return Err(Error::Usage("--hidden widths must be positive".into()));
        }

        Ok(Self {
            command,
            data,
            exclude: list::<u16>("exclude", req("exclude")?)?
                .into_iter()
                .collect(),
            train_fraction,
            passes,
            method,
            z_threshold: threshold("z", req("z")?)?,
            sr_threshold,
            score_space: req("score-space")?.parse()?,
            sr_source,
            misclassified: req("misclassified")?.parse()?,
            distorted,
            distortions,
            seed,
            threads: parse("threads", req("threads")?)?,
            model: get("model").map(PathBuf::from),
            out: get("out").map(PathBuf::from),
            curves: get("curves").map(PathBuf::from),
            hidden,
            epochs: parse("epochs", req("epochs")?)?,
            batch_size: parse("batch-size", req("batch-size")?)?,
            learning_rate: parse("lr", req("lr")?)?,
            kl_weight: parse("kl-weight", req("kl-weight")?)?,
            noise_mode,
        })
    }

    /// Defaults plus `overrides`, as if given on the command line.
    pub fn with(command: Command, overrides: &[(&str, &str)]) -> Result<Self> {
        let cli = overrides
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self::from_map(command, &merge(BTreeMap::new(), cli))
    }
}

impl fmt::Display for RunConfig {
    /// `key=value` lines describing the resolved configuration.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("sweep".to_string(), |v| v.to_string());
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        match &self.data {
            Some(DataSource::Synthetic(s)) => writeln!(f, "synthetic={}", blob_spec_string(s))?,
            Some(DataSource::Container(p)) => writeln!(f, "data={}", p.display())?,
            Some(DataSource::Cifar(ps)) => writeln!(
                f,
                "cifar={}",
                ps.iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            )?,
            None => {}
        }
        let exclude: Vec<String> = self.exclude.iter().map(u16::to_string).collect();
        writeln!(f, "exclude={}", exclude.join(","))?;
        writeln!(f, "train-fraction={}", self.train_fraction)?;
        writeln!(f, "n-passes={}", self.passes)?;
        writeln!(
            f,
            "method={}",
            match self.method {
                MethodSelection::ZTest => "ztest",
                MethodSelection::Sr => "sr",
                MethodSelection::Both => "both",
            }
        )?;
        writeln!(f, "z={}", opt(self.z_threshold))?;
        writeln!(f, "sr-threshold={}", opt(self.sr_threshold))?;
        writeln!(f, "score-space={}", self.score_space)?;
        writeln!(
            f,
            "sr-scores={}",
            match self.sr_source {
                SrSource::Deterministic => "deterministic",
                SrSource::SinglePass => "single-pass",
            }
        )?;
        writeln!(
            f,
            "misclassified={}",
            match self.misclassified {
                MisclassifiedPolicy::Ignore => "ignore",
                MisclassifiedPolicy::CountAsTruePositive => "count-as-tp",
            }
        )?;
        writeln!(
            f,
            "distorted={}",
            match self.distorted {
                DistortedPolicy::Positive => "positive",
                DistortedPolicy::Negative => "negative",
            }
        )?;
        let d: Vec<String> = self.distortions.iter().map(Distortion::to_string).collect();
        writeln!(f, "distort={}", d.join(";"))?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "model={}", path(&self.model))?;
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        writeln!(f, "hidden={}", hidden.join(","))?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "batch-size={}", self.batch_size)?;
        writeln!(f, "lr={}", self.learning_rate)?;
        writeln!(f, "kl-weight={}", self.kl_weight)?;
        writeln!(
            f,
            "noise-mode={}",
            match self.noise_mode {
                NoiseMode::Flipout => "flipout",
                NoiseMode::Independent => "independent",
            }
        )
    }
}
