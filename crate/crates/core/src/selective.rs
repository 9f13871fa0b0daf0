//! Accept/reject decisions over repeated stochastic passes.
//!
//! For one input the classifier is run `n` times. Per class we take the mean
//! and sample standard deviation of the scores, pick the class with the
//! highest mean, and run a two-sample Z-test between it and every other
//! class. The prediction is accepted only when every Z-score clears the
//! threshold. [`sr_decide`] is the Softmax Response baseline: a plain
//! threshold on the maximum softmax probability.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Whether scores are softmax probabilities or raw logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreSpace {
    #[default]
    Softmax,
    Logit,
}

impl FromStr for ScoreSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ScoreSpace::Softmax),
            "logit" => Ok(ScoreSpace::Logit),
            other => Err(Error::Usage(format!(
                "unknown score space {other:?} (softmax|logit)"
            ))),
        }
    }
}

impl fmt::Display for ScoreSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreSpace::Softmax => "softmax",
            ScoreSpace::Logit => "logit",
        })
    }
}

/// `passes x classes` scores for a single input, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    passes: usize,
    classes: usize,
    values: Vec<f32>,
    space: ScoreSpace,
}

const ROW_SUM_TOLERANCE: f64 = 1e-5;

impl ScoreMatrix {
    pub fn new(passes: usize, classes: usize, values: Vec<f32>, space: ScoreSpace) -> Result<Self> {
        if passes < 2 {
            return Err(Error::TooFewPasses);
        }
        if classes < 2 {
            return Err(Error::InvalidParameter("need at least two classes".into()));
        }
        if values.len() != passes * classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{passes}x{classes} scores"),
                got: format!("{} scores", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite score".into()));
        }
        if space == ScoreSpace::Softmax {
            for (i, row) in values.chunks_exact(classes).enumerate() {
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "row {i} is not a probability vector (sum {sum})"
                    )));
                }
            }
        }
        Ok(Self {
            passes,
            classes,
            values,
            space,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], space: ScoreSpace) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::ShapeMismatch {
                expected: format!("rows of {classes}"),
                got: "ragged rows".into(),
            });
        }
        Self::new(rows.len(), classes, rows.concat(), space)
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn space(&self) -> ScoreSpace {
        self.space
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    /// Interchange CSV: a `n,N` header line, then `n` lines of `N` values.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}\n", self.passes, self.classes);
        for i in 0..self.passes {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, space: ScoreSpace) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty score matrix".into()))?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("bad header {header:?}: {e}")))?;
        let [passes, classes] = dims[..] else {
            return Err(Error::Format(format!("header must be n,N: {header:?}")));
        };
        let mut values = Vec::with_capacity(passes * classes);
        let mut rows = 0;
        for line in lines {
            let row: Vec<f32> = line
                .split(',')
                .map(|t| t.trim().parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("bad row {line:?}: {e}")))?;
            if row.len() != classes {
                return Err(Error::Format(format!(
                    "row has {} values, expected {classes}",
                    row.len()
                )));
            }
            values.extend(row);
            rows += 1;
        }
        if rows != passes {
            return Err(Error::Format(format!(
                "expected {passes} rows, found {rows}"
            )));
        }
        Self::new(passes, classes, values, space)
    }
}

/// Per-class mean and sample standard deviation over the passes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n: usize,
}

/// Column means and `n - 1`-denominator standard deviations.
pub fn class_stats(m: &ScoreMatrix) -> ClassStats {
    let n = m.passes();
    let mut mean = vec![0.0f64; m.classes()];
    for i in 0..n {
        for (acc, &v) in mean.iter_mut().zip(m.row(i)) {
            *acc += f64::from(v);
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut var = vec![0.0f64; m.classes()];
    for i in 0..n {
        for ((acc, &v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
            let d = f64::from(v) - mu;
            *acc += d * d;
        }
    }
    let std = var
        .into_iter()
        .map(|s| (s / (n - 1) as f64).sqrt())
        .collect();
    ClassStats { mean, std, n }
}

/// Two-sample Z statistic `(mu1 - mu2 - delta) / sqrt(sigma1^2/n1 + sigma2^2/n2)`.
///
/// With both standard deviations zero the result is `+inf`, `-inf` or `0`
/// according to the sign of `mu1 - mu2 - delta`.
pub fn z_statistic(
    mu1: f64,
    sigma1: f64,
    mu2: f64,
    sigma2: f64,
    n1: usize,
    n2: usize,
    delta: f64,
) -> f64 {
    let diff = mu1 - mu2 - delta;
    let se = (sigma1 * sigma1 / n1 as f64 + sigma2 * sigma2 / n2 as f64).sqrt();
    if se == 0.0 {
        if diff > 0.0 {
            f64::INFINITY
        } else if diff < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    } else {
        diff / se
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionConfig {
    /// Critical value `z`; accept when every Z-score is at least this.
    pub z_threshold: f64,
    /// Hypothesized mean difference.
    pub delta: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            z_threshold: 1.96,
            delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Accept(usize),
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub outcome: Outcome,
    /// Class that would be emitted if accepted (argmax of the scores).
    pub candidate: usize,
    /// Scalar swept to draw ROC curves: the smallest Z-score for the
    /// Z-test rule, the maximum probability for Softmax Response.
    pub confidence: f64,
}

impl Decision {
    pub fn accepted(&self) -> bool {
        matches!(self.outcome, Outcome::Accept(_))
    }
}

/// Lowest index among the maxima.
fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Z-test decision. Ties in the means go to the lowest class index; the
/// prediction is accepted when `min Z >= z_threshold`.
pub fn decide(stats: &ClassStats, cfg: &DecisionConfig) -> Decision {
    let top = argmax(stats.mean.iter().copied());
    let confidence = (0..stats.mean.len())
        .filter(|&i| i != top)
        .map(|i| {
            z_statistic(
                stats.mean[top],
                stats.std[top],
                stats.mean[i],
                stats.std[i],
                stats.n,
                stats.n,
                cfg.delta,
            )
        })
        .fold(f64::INFINITY, f64::min);
    let outcome = if confidence >= cfg.z_threshold {
        Outcome::Accept(top)
    } else {
        Outcome::Reject
    };
    Decision {
        outcome,
        candidate: top,
        confidence,
    }
}

/// Convenience: statistics and decision straight from a score matrix.
pub fn decide_scores(m: &ScoreMatrix, cfg: &DecisionConfig) -> Decision {
    decide(&class_stats(m), cfg)
}

/// Softmax Response: accept the argmax when its probability reaches
/// `threshold`. A threshold of 1 rejects everything, since no softmax
/// output exceeds 1.
pub fn sr_decide(probs: &[f32], threshold: f64) -> Result<Decision> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::ThresholdOutOfRange(threshold));
    }
    if probs.is_empty() {
        return Err(Error::InvalidParameter("empty probability vector".into()));
    }
    let top = argmax(probs.iter().map(|&p| f64::from(p)));
    let confidence = f64::from(probs[top]);
    let outcome = if threshold < 1.0 && confidence >= threshold {
        Outcome::Accept(top)
    } else {
        Outcome::Reject
    };
    Ok(Decision {
        outcome,
        candidate: top,
        confidence,
    })
}
