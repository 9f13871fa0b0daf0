use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{Command, DataSource, DistortedPolicy, MethodSelection, RunConfig, SrSource};
use crate::datasets::{self, Dataset, Split, SplitSpec};
use crate::distort::{Distortion, Image};
use crate::error::{Error, Result};
use crate::evaluate::{self, EvalSample, LabeledCurve, Method, RocPoint, Summary, Truth};
use crate::net::{self, StochasticModel, TrainConfig, TrainReport};
use crate::rng;
use crate::selective::{self, Decision, DecisionConfig};
use crate::tensor::Tensor;

pub const CLEAN: &str = "clean";

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "dataset file {} not found",
            p.display()
        )))
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        None => Err(Error::Usage(
            "a dataset is required (--data, --synthetic or --cifar)".into(),
        )),
        Some(DataSource::Synthetic(spec)) => datasets::gen_blobs(spec),
        Some(DataSource::Container(p)) => {
            require_file(p)?;
            datasets::read_container(p)
        }
        Some(DataSource::Cifar(paths)) => {
            for p in paths {
                require_file(p)?;
            }
            let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
            datasets::read_cifar10_files(&refs)
        }
    }
}

fn split_data(cfg: &RunConfig, data: &Dataset) -> Result<Split> {
    datasets::split(
        data,
        &SplitSpec {
            excluded_classes: cfg.exclude.clone(),
            train_fraction: cfg.train_fraction,
            seed: rng::derive(cfg.seed, "split"),
        },
    )
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StochasticModel,
    pub report: TrainReport,
}

/// Trains a fresh model on the kept classes and writes the checkpoint to
/// `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out = cfg
        .out
        .as_ref()
        .ok_or_else(|| Error::Usage("train needs --out for the checkpoint".into()))?;
    let data = load_data(cfg)?;
    let split = split_data(cfg, &data)?;
    let model = StochasticModel::mlp(
        split.train.feature_len(),
        &cfg.hidden,
        split.kept.len(),
        cfg.noise_mode,
        rng::derive(cfg.seed, "init"),
    )?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        kl_weight: cfg.kl_weight,
        seed: rng::derive(cfg.seed, "train"),
    };
    let (model, report) = net::train(model, &split.train, &train_cfg)?;
    net::write_checkpoint(&model, out)?;
    Ok(TrainOutcome { model, report })
}

/// A fixed-threshold operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub method: Method,
    pub distortion: String,
    pub point: RocPoint,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub summary: Summary,
    pub curves: Vec<LabeledCurve>,
    pub operating_points: Vec<OperatingPoint>,
}

struct SampleDecisions {
    ztest: Decision,
    sr: Decision,
}

fn decide_one(
    model: &StochasticModel,
    cfg: &RunConfig,
    image: &Image,
    index: u64,
) -> Result<SampleDecisions> {
    let input = Tensor::vector(image.pixels().to_vec())?;
    let pass_seed = rng::derive_index(rng::derive(cfg.seed, "passes"), index);
    let ztest = if cfg.method == MethodSelection::Sr {
        Decision {
            outcome: selective::Outcome::Reject,
            candidate: 0,
            confidence: 0.0,
        }
    } else {
        let runs = net::sample_runs_in(model, &input, cfg.passes, pass_seed, cfg.score_space)?;
        selective::decide_scores(
            &runs,
            &DecisionConfig {
                z_threshold: 0.0,
                delta: 0.0,
            },
        )
    };
    let probs = match cfg.sr_source {
        SrSource::Deterministic => net::forward_deterministic(model, &input)?,
        SrSource::SinglePass => {
            let sr_seed = rng::derive_index(rng::derive(cfg.seed, "sr-pass"), index);
            net::forward_sample(model, &input, &mut rng::stream(sr_seed, 0))?
        }
    };
    let sr = selective::sr_decide(probs.data(), 0.0)?;
    Ok(SampleDecisions { ztest, sr })
}

/// Decisions for every test sample (in-distribution first) under one
/// distortion. Per-sample seeds depend only on the sample index, so the
/// result is independent of the thread count.
fn decide_all(
    model: &StochasticModel,
    cfg: &RunConfig,
    items: &[(&Image, Truth)],
    distortion: Option<(usize, &Distortion)>,
) -> Result<Vec<SampleDecisions>> {
    items
        .par_iter()
        .enumerate()
        .map(|(j, (img, _))| {
            let distorted;
            let img = match distortion {
                None => *img,
                Some((k, d)) => {
                    let seed = rng::derive_index(
                        rng::derive_index(rng::derive(cfg.seed, "distort"), k as u64),
                        j as u64,
                    );
                    distorted = d.apply(img, seed)?;
                    &distorted
                }
            };
            decide_one(model, cfg, img, j as u64)
        })
        .collect()
}

fn methods(sel: MethodSelection) -> &'static [Method] {
    match sel {
        MethodSelection::ZTest => &[Method::ZTest],
        MethodSelection::Sr => &[Method::Sr],
        MethodSelection::Both => &[Method::ZTest, Method::Sr],
    }
}

fn samples_for(
    method: Method,
    decisions: &[&SampleDecisions],
    truth: &[Truth],
) -> Result<Vec<EvalSample>> {
    let picked: Vec<Decision> = decisions
        .iter()
        .map(|d| match method {
            Method::ZTest => d.ztest,
            Method::Sr => d.sr,
        })
        .collect();
    evaluate::label_samples(&picked, truth)
}

fn operating_point(
    samples: &[EvalSample],
    method: Method,
    t: f64,
    policy: evaluate::MisclassifiedPolicy,
) -> RocPoint {
    let pos = samples
        .iter()
        .filter(|s| matches!(s.truth, Truth::InDistribution(_)))
        .count();
    let neg = samples.len() - pos;
    let (mut tp, mut fp) = (0usize, 0usize);
    for s in samples {
        if s.predicted.is_none() || !method.accepts(s.confidence, t) {
            continue;
        }
        match s.truth {
            Truth::OutOfDistribution => fp += 1,
            Truth::InDistribution(l) => {
                if policy == evaluate::MisclassifiedPolicy::CountAsTruePositive
                    || s.predicted == Some(l)
                {
                    tp += 1;
                }
            }
        }
    }
    let ratio = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
    RocPoint {
        threshold: t,
        fpr: ratio(fp, neg),
        tpr: ratio(tp, pos),
    }
}

/// Evaluates a checkpoint on the clean test split and on every configured
/// distortion, then writes the summary and curve CSVs.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    let model_path = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::Usage("eval needs --model".into()))?;
    let out = cfg
        .out
        .as_ref()
        .ok_or_else(|| Error::Usage("eval needs --out for the report".into()))?;
    let curves_path = cfg.curves.clone().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".curves.csv");
        PathBuf::from(p)
    });
    let data = load_data(cfg)?;
    let model = net::read_checkpoint(model_path)?;
    let split = split_data(cfg, &data)?;
    if split.test_in.feature_len() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} model inputs", model.input_dim()),
            got: format!("{} pixels", split.test_in.feature_len()),
        });
    }
    if split.test_in.is_empty() && split.test_out.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let items: Vec<(&Image, Truth)> = split
        .test_in
        .items()
        .iter()
        .map(|i| (&i.image, Truth::InDistribution(usize::from(i.label))))
        .chain(
            split
                .test_out
                .items()
                .iter()
                .map(|i| (&i.image, Truth::OutOfDistribution)),
        )
        .collect();
    let truth: Vec<Truth> = items.iter().map(|(_, t)| *t).collect();
    let n_in = split.test_in.len();

    let pool = thread_pool(cfg.threads)?;
    let (clean, distorted) = pool.install(|| -> Result<_> {
        let clean = decide_all(&model, cfg, &items, None)?;
        let distorted = cfg
            .distortions
            .iter()
            .enumerate()
            .map(|(k, d)| decide_all(&model, cfg, &items, Some((k, d))))
            .collect::<Result<Vec<_>>>()?;
        Ok((clean, distorted))
    })?;

    let mut curves = Vec::new();
    let mut operating_points = Vec::new();
    let mut add =
        |label: String, decisions: Vec<&SampleDecisions>, truth: Vec<Truth>| -> Result<()> {
            for &method in methods(cfg.method) {
                let samples = samples_for(method, &decisions, &truth)?;
                let fixed = match method {
                    Method::ZTest => cfg.z_threshold,
                    Method::Sr => cfg.sr_threshold,
                };
                if let Some(t) = fixed {
                    operating_points.push(OperatingPoint {
                        method,
                        distortion: label.clone(),
                        point: operating_point(&samples, method, t, cfg.misclassified),
                    });
                }
                curves.push(LabeledCurve {
                    distortion: label.clone(),
                    curve: evaluate::sweep_roc_with(&samples, method, cfg.misclassified)?,
                });
            }
            Ok(())
        };

    add(CLEAN.to_string(), clean.iter().collect(), truth.clone())?;
    for (d, decisions) in cfg.distortions.iter().zip(&distorted) {
        match cfg.distorted {
            DistortedPolicy::Positive => add(d.label(), decisions.iter().collect(), truth.clone())?,
            DistortedPolicy::Negative => {
                let mut picked: Vec<&SampleDecisions> = clean[..n_in].iter().collect();
                picked.extend(decisions.iter());
                let mut t: Vec<Truth> = truth[..n_in].to_vec();
                t.extend(std::iter::repeat_n(
                    Truth::OutOfDistribution,
                    decisions.len(),
                ));
                add(d.label(), picked, t)?;
            }
        }
    }

    let summary = evaluate::report(&curves, out, &curves_path)?;
    fs::write(sidecar(out), format!("# zselect eval\n{cfg}"))?;
    Ok(EvalOutcome {
        summary,
        curves,
        operating_points,
    })
}

/// Applies exactly one distortion to every image of the dataset and writes a
/// container to `cfg.out`, with the seed recorded in a `.meta` sidecar.
pub fn cmd_distort(cfg: &RunConfig) -> Result<Dataset> {
    let out = cfg
        .out
        .as_ref()
        .ok_or_else(|| Error::Usage("distort needs --out".into()))?;
    let [distortion] = cfg.distortions[..] else {
        return Err(Error::Usage(
            "distort needs exactly one --distort kind=...".into(),
        ));
    };
    let data = load_data(cfg)?;
    let base = rng::derive(cfg.seed, "distort-file");
    let pool = thread_pool(cfg.threads)?;
    let items = pool.install(|| {
        data.items()
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                Ok(datasets::LabeledImage {
                    image: distortion.apply(&item.image, rng::derive_index(base, i as u64))?,
                    label: item.label,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let result = Dataset::new(items, data.num_classes(), data.shape())?;
    datasets::write_container(&result, out)?;
    fs::write(
        sidecar(out),
        format!(
            "# zselect distort\n# seed={}\n# distortion={distortion}\n",
            cfg.seed
        ),
    )?;
    Ok(result)
}

/// Runs whichever command `cfg` names, returning a human-readable summary.
pub fn run(cfg: &RunConfig) -> Result<String> {
    match cfg.command {
        Command::Train => {
            let outcome = cmd_train(cfg)?;
            let losses: Vec<String> = outcome
                .report
                .epoch_losses
                .iter()
                .map(|l| format!("{l:.4}"))
                .collect();
            Ok(format!(
                "epoch losses: {}\ntrain accuracy (mean weights): {:.4}\n",
                losses.join(" "),
                outcome.report.train_accuracy
            ))
        }
        Command::Eval => {
            let outcome = cmd_eval(cfg)?;
            let mut s = format!("valid-region AUROC\n{}", outcome.summary);
            for op in &outcome.operating_points {
                s.push_str(&format!(
                    "{} {} @ {}: fpr {:.4} tpr {:.4}\n",
                    op.method, op.distortion, op.point.threshold, op.point.fpr, op.point.tpr
                ));
            }
            Ok(s)
        }
        Command::Distort => {
            let d = cmd_distort(cfg)?;
            Ok(format!("wrote {} distorted images\n", d.len()))
        }
    }
}
