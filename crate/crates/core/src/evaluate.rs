//! Threshold sweeps, ROC curves and valid-region AUROC.
//!
//! Convention: out-of-distribution samples are negatives and in-distribution
//! samples are positives. A false positive is an accepted negative; a true
//! positive is an accepted positive whose predicted class matches its label.
//! Accepted but misclassified positives count as neither (they only lower
//! TPR) unless [`MisclassifiedPolicy::CountAsTruePositive`] is selected.
//! Threshold 0 accepts everything, so FPR is 1 there.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::selective::Decision;

/// Softmax Response thresholds at or above this are not valid operating
/// points: no softmax output can exceed 1.
pub const SR_VALID_CAP: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    ZTest,
    Sr,
}

impl Method {
    /// Threshold domain `[low, high]`.
    pub fn domain(self) -> (f64, f64) {
        match self {
            Method::ZTest => (0.0, f64::INFINITY),
            Method::Sr => (0.0, 1.0),
        }
    }

    /// Acceptance at threshold `t`. Softmax Response rejects everything at 1.
    #[inline]
    pub fn accepts(self, confidence: f64, t: f64) -> bool {
        match self {
            Method::Sr if t >= 1.0 => false,
            _ => confidence >= t,
        }
    }

    pub fn is_valid_threshold(self, t: f64) -> bool {
        match self {
            Method::ZTest => t >= 0.0,
            Method::Sr => t < SR_VALID_CAP,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ZTest => "ztest",
            Method::Sr => "sr",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ztest" => Ok(Method::ZTest),
            "sr" => Ok(Method::Sr),
            other => Err(Error::Usage(format!("unknown method {other:?} (ztest|sr)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    InDistribution(usize),
    OutOfDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSample {
    pub confidence: f64,
    /// `None` means the sample is never accepted.
    pub predicted: Option<usize>,
    pub truth: Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MisclassifiedPolicy {
    /// Accepted, misclassified positives are neither TP nor FP.
    #[default]
    Ignore,
    /// Any accepted positive is a TP.
    CountAsTruePositive,
}

impl FromStr for MisclassifiedPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ignore" => Ok(MisclassifiedPolicy::Ignore),
            "count-as-tp" => Ok(MisclassifiedPolicy::CountAsTruePositive),
            other => Err(Error::Usage(format!(
                "unknown misclassified policy {other:?} (ignore|count-as-tp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points ordered by decreasing threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub method: Method,
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn valid_points(&self) -> impl Iterator<Item = &RocPoint> {
        self.points
            .iter()
            .filter(|p| self.method.is_valid_threshold(p.threshold))
    }

    /// Smallest FPR reachable with a valid threshold.
    pub fn min_valid_fpr(&self) -> Option<f64> {
        self.valid_points().map(|p| p.fpr).reduce(f64::min)
    }
}

/// Pairs each decision with its ground truth. The decision's candidate class
/// is kept as the prediction; acceptance is re-derived per threshold.
pub fn label_samples(decisions: &[Decision], truth: &[Truth]) -> Result<Vec<EvalSample>> {
    if decisions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: decisions.len(),
            right: truth.len(),
        });
    }
    Ok(decisions
        .iter()
        .zip(truth)
        .map(|(d, &t)| EvalSample {
            confidence: d.confidence,
            predicted: Some(d.candidate),
            truth: t,
        })
        .collect())
}

pub fn sweep_roc(samples: &[EvalSample], method: Method) -> Result<RocCurve> {
    sweep_roc_with(samples, method, MisclassifiedPolicy::Ignore)
}

/// One ROC point per candidate threshold: every distinct confidence inside
/// the method's domain plus both domain endpoints.
pub fn sweep_roc_with(
    samples: &[EvalSample],
    method: Method,
    policy: MisclassifiedPolicy,
) -> Result<RocCurve> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if samples.iter().any(|s| s.confidence.is_nan()) {
        return Err(Error::InvalidParameter("NaN confidence".into()));
    }
    let positives = samples
        .iter()
        .filter(|s| matches!(s.truth, Truth::InDistribution(_)))
        .count();
    let negatives = samples.len() - positives;
    let ratio = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };

    // (confidence, is_negative, counts_as_tp); never-accepted samples dropped.
    let mut ranked: Vec<(f64, bool, bool)> = samples
        .iter()
        .filter(|s| s.predicted.is_some())
        .map(|s| match s.truth {
            Truth::OutOfDistribution => (s.confidence, true, false),
            Truth::InDistribution(label) => {
                let hit = policy == MisclassifiedPolicy::CountAsTruePositive
                    || s.predicted == Some(label);
                (s.confidence, false, hit)
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (low, high) = method.domain();
    let mut thresholds: Vec<f64> = samples
        .iter()
        .map(|s| s.confidence)
        .filter(|&c| c >= low && c <= high)
        .collect();
    thresholds.push(low);
    thresholds.push(high);
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len());
    let (mut next, mut fp, mut tp) = (0usize, 0usize, 0usize);
    for t in thresholds {
        while next < ranked.len() && ranked[next].0 >= t {
            let (_, negative, hit) = ranked[next];
            fp += usize::from(negative);
            tp += usize::from(hit);
            next += 1;
        }
        let (fpr, tpr) = if method.accepts(f64::INFINITY, t) {
            (ratio(fp, negatives), ratio(tp, positives))
        } else {
            (0.0, 0.0)
        };
        points.push(RocPoint {
            threshold: t,
            fpr,
            tpr,
        });
    }
    Ok(RocCurve { method, points })
}

/// Trapezoidal area under the valid part of the curve. Nothing is
/// extrapolated: the area spans only the FPR range the valid points reach.
pub fn auroc_valid(curve: &RocCurve) -> f64 {
    let valid: Vec<&RocPoint> = curve.valid_points().collect();
    valid
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// A curve tagged with the distortion it was measured under.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCurve {
    pub distortion: String,
    pub curve: RocCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub distortion: String,
    pub auroc_valid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn auroc(&self, method: Method, distortion: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.distortion == distortion)
            .map(|r| r.auroc_valid)
    }

    /// Distortion names in first-seen order.
    pub fn distortions(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.distortion.as_str()) {
                out.push(&r.distortion);
            }
        }
        out
    }

    /// `method,distortion,auroc_valid` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,distortion,auroc_valid\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{}\n",
                r.method, r.distortion, r.auroc_valid
            ));
        }
        s
    }
}

/// Side-by-side comparison table.
impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>9} {:>9} {:>9}",
            "distortion", "ztest", "sr", "diff"
        )?;
        for d in self.distortions() {
            let z = self.auroc(Method::ZTest, d);
            let s = self.auroc(Method::Sr, d);
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            let diff = match (z, s) {
                (Some(z), Some(s)) => format!("{:+.4}", z - s),
                _ => "-".into(),
            };
            writeln!(f, "{:<16} {:>9} {:>9} {:>9}", d, cell(z), cell(s), diff)?;
        }
        Ok(())
    }
}

pub fn summarize(curves: &[LabeledCurve]) -> Summary {
    Summary {
        rows: curves
            .iter()
            .map(|c| SummaryRow {
                method: c.curve.method,
                distortion: c.distortion.clone(),
                auroc_valid: auroc_valid(&c.curve),
            })
            .collect(),
    }
}

/// `method,distortion,threshold,fpr,tpr` CSV of every point.
pub fn curves_csv(curves: &[LabeledCurve]) -> String {
    let mut s = String::from("method,distortion,threshold,fpr,tpr\n");
    for c in curves {
        for p in &c.curve.points {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.curve.method, c.distortion, p.threshold, p.fpr, p.tpr
            ));
        }
    }
    s
}

/// Writes the summary CSV to `summary_path` and the per-threshold curves to
/// `curves_path`.
pub fn report(curves: &[LabeledCurve], summary_path: &Path, curves_path: &Path) -> Result<Summary> {
    let summary = summarize(curves);
    fs::write(summary_path, summary.to_csv())?;
    fs::write(curves_path, curves_csv(curves))?;
    Ok(summary)
}
