//! Evaluation metrics: accuracy, EER, HTER and ROC.
//!
//! Binary conventions: class 1 is the manipulated ("positive") class and its
//! probability is the score. A sample is predicted positive when its score
//! is at least the threshold.
//!
//! - FRR(t): fraction of positives scored below `t`
//! - FAR(t): fraction of negatives scored at or above `t`

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default decision threshold on the positive-class probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Index of the positive class in binary problems.
pub const POSITIVE_CLASS: usize = 1;

/// Square confusion matrix, rows are true classes and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Binary matrix from the four outcome counts.
    pub fn binary(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Confusion {
            classes: 2,
            counts: vec![tn, fp, fn_, tp],
        }
    }

    /// Build from an explicit row-major matrix.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::dim("confusion", "matrix must be square"));
        }
        Ok(Confusion {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::Data(format!(
                "class pair ({truth}, {predicted}) outside 0..{}",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

/// `trace / total`; for two classes this is `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(conf: &Confusion) -> Result<f64> {
    let total = conf.total();
    if total == 0 {
        return Err(Error::Data("accuracy of an empty confusion matrix".into()));
    }
    Ok(conf.trace() as f64 / total as f64)
}

/// Recall of each true class; `None` for classes without samples.
pub fn per_class_accuracy(conf: &Confusion) -> Vec<Option<f64>> {
    (0..conf.classes())
        .map(|i| {
            let row: u64 = (0..conf.classes()).map(|j| conf.get(i, j)).sum();
            (row > 0).then(|| conf.get(i, i) as f64 / row as f64)
        })
        .collect()
}

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data(format!(
            "need scores for both classes, got {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::Numerical("score is NaN".into()));
    }
    Ok(())
}

/// `(FAR, FRR)` at threshold `t`.
pub fn far_frr(pos: &[f64], neg: &[f64], t: f64) -> (f64, f64) {
    let far = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
    let frr = pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64;
    (far, frr)
}

/// Sweep thresholds over every distinct score and `+∞`, ascending,
/// returning `(threshold, FAR, FRR)`.
fn sweep(pos: &[f64], neg: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut ts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(f64::INFINITY);
    let mut p = pos.to_vec();
    let mut n = neg.to_vec();
    p.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let (np, nn) = (p.len() as f64, n.len() as f64);
    let (mut ip, mut in_) = (0usize, 0usize);
    ts.into_iter()
        .map(|t| {
            while ip < p.len() && p[ip] < t {
                ip += 1;
            }
            while in_ < n.len() && n[in_] < t {
                in_ += 1;
            }
            (t, (n.len() - in_) as f64 / nn, ip as f64 / np)
        })
        .collect()
}

/// Equal error rate.
///
/// FAR − FRR falls from 1 at the lowest score to −1 at `+∞`; the rate is
/// read where it first reaches zero, interpolating linearly between the two
/// bracketing sweep points when it changes sign between them.
pub fn eer(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let pts = sweep(pos, neg);
    let mut prev: Option<(f64, f64)> = None;
    for &(_, far, frr) in &pts {
        let d = far - frr;
        if d <= 0.0 {
            return Ok(match prev {
                Some((pfar, pfrr)) if d < 0.0 => {
                    let pd = pfar - pfrr;
                    let a = pd / (pd - d);
                    pfar + a * (far - pfar)
                }
                _ => far,
            });
        }
        prev = Some((far, frr));
    }
    Err(Error::Numerical("threshold sweep did not cross".into()))
}

/// Half total error rate `(FAR + FRR) / 2`.
pub fn hter(far: f64, frr: f64) -> f64 {
    (far + frr) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `None` is the `+∞` threshold that rejects everything.
    pub threshold: Option<f64>,
    pub far: f64,
    /// True positive rate, `1 − FRR`.
    pub tpr: f64,
}

/// ROC points from the full sweep, ordered from `(0,0)` to `(1,1)`.
pub fn roc(pos: &[f64], neg: &[f64]) -> Result<Vec<RocPoint>> {
    check_scores(pos, neg)?;
    Ok(sweep(pos, neg)
        .into_iter()
        .rev()
        .map(|(t, far, frr)| RocPoint {
            threshold: t.is_finite().then_some(t),
            far,
            tpr: 1.0 - frr,
        })
        .collect())
}

/// Probabilities for one scored unit (image, patch, frame or group).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub group_id: String,
    pub label: usize,
    pub probs: Vec<f64>,
}

/// Predicted class: threshold on the positive probability for two
/// classes, argmax (lowest index on ties) otherwise.
pub fn predicted_class(probs: &[f64], threshold: f64) -> usize {
    if probs.len() == 2 {
        return usize::from(probs[POSITIVE_CLASS] >= threshold);
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub roc: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    /// Present for two-class problems with both classes represented.
    pub binary: Option<BinaryMetrics>,
}

/// Metrics over scored units with `classes` classes.
pub fn summarize(samples: &[SampleScore], classes: usize, threshold: f64) -> Result<MetricSummary> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut conf = Confusion::new(classes);
    for s in samples {
        if s.probs.len() != classes {
            return Err(Error::dim(
                "summarize",
                format!("sample {} has {} probabilities, expected {classes}", s.sample_id, s.probs.len()),
            ));
        }
        conf.record(s.label, predicted_class(&s.probs, threshold))?;
    }
    let binary = if classes == 2 {
        let pos: Vec<f64> = samples.iter().filter(|s| s.label == 1).map(|s| s.probs[1]).collect();
        let neg: Vec<f64> = samples.iter().filter(|s| s.label == 0).map(|s| s.probs[1]).collect();
        if pos.is_empty() || neg.is_empty() {
            None
        } else {
            let (far, frr) = far_frr(&pos, &neg, threshold);
            Some(BinaryMetrics {
                eer: eer(&pos, &neg)?,
                threshold,
                far,
                frr,
                hter: hter(far, frr),
                roc: roc(&pos, &neg)?,
            })
        }
    } else {
        None
    };
    Ok(MetricSummary {
        count: samples.len(),
        accuracy: accuracy(&conf)?,
        per_class_accuracy: per_class_accuracy(&conf),
        confusion: conf.rows(),
        binary,
    })
}

/// ROC points as CSV with header `threshold,far,tpr`; `+∞` is written `inf`.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,far,tpr\n");
    for p in points {
        match p.threshold {
            Some(t) => write!(s, "{t}"),
            None => write!(s, "inf"),
        }
        .expect("write to String");
        writeln!(s, ",{},{}", p.far, p.tpr).expect("write to String");
    }
    s
}

/// Plain-text summary table.
pub fn summary_table(title: &str, m: &MetricSummary, class_names: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "  samples   {}", m.count);
    let _ = writeln!(s, "  accuracy  {:.4}", m.accuracy);
    if let Some(b) = &m.binary {
        let _ = writeln!(s, "  eer       {:.4}", b.eer);
        let _ = writeln!(s, "  hter      {:.4}  (threshold {}, far {:.4}, frr {:.4})", b.hter, b.threshold, b.far, b.frr);
    }
    let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
    let width = (0..m.confusion.len()).map(|i| name(i).len()).max().unwrap_or(1).max(6);
    let _ = write!(s, "  {:>width$}", "");
    for j in 0..m.confusion.len() {
        let _ = write!(s, " {:>width$}", name(j));
    }
    let _ = writeln!(s, " {:>width$}", "recall");
    for (i, row) in m.confusion.iter().enumerate() {
        let _ = write!(s, "  {:>width$}", name(i));
        for c in row {
            let _ = write!(s, " {c:>width$}");
        }
        match m.per_class_accuracy[i] {
            Some(a) => {
                let _ = writeln!(s, " {a:>width$.4}");
            }
            None => {
                let _ = writeln!(s, " {:>width$}", "-");
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_accuracy() {
        let c = Confusion::binary(45, 45, 5, 5);
        assert_eq!(accuracy(&c).unwrap(), 0.9);
        assert_eq!(accuracy(&Confusion::binary(3, 4, 0, 0)).unwrap(), 1.0);
        assert!(accuracy(&Confusion::new(2)).is_err());
    }

    #[test]
    fn eer_fixtures() {
        assert_eq!(eer(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]).unwrap(), 1.0 / 3.0);
        assert_eq!(eer(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(eer(&[0.4, 0.6, 0.6], &[0.6, 0.4, 0.6]).unwrap(), 0.5);
        assert_eq!(eer(&[0.5], &[0.5]).unwrap(), 0.5);
        assert!(eer(&[], &[0.1]).is_err());
        assert!(eer(&[0.1], &[f64::NAN]).is_err());
    }

    #[test]
    fn eer_interpolates() {
        // Tied scores at 0.5: t=0.5 gives FAR 1/2, FRR 0; t=0.9 gives FAR 0, FRR 1/2.
        assert_eq!(eer(&[0.5, 0.9], &[0.1, 0.5]).unwrap(), 0.25);
        assert_eq!(eer(&[0.4, 0.9], &[0.1, 0.6]).unwrap(), 0.5);
    }

    #[test]
    fn hter_formula() {
        assert!((hter(0.2, 0.1) - 0.15).abs() < 1e-15);
        assert_eq!(hter(0.0, 0.0), 0.0);
    }

    #[test]
    fn roc_endpoints() {
        let r = roc(&[0.9, 0.3], &[0.5, 0.1]).unwrap();
        assert_eq!((r[0].far, r[0].tpr), (0.0, 0.0));
        let last = r.last().unwrap();
        assert_eq!((last.far, last.tpr), (1.0, 1.0));
        assert!(r.windows(2).all(|w| w[0].far <= w[1].far && w[0].tpr <= w[1].tpr));
        assert!(roc_csv(&r).starts_with("threshold,far,tpr\ninf,0,0\n"));
    }

    #[test]
    fn multi_class_summary() {
        let s = |l: usize, p: Vec<f64>| SampleScore {
            sample_id: format!("{l}"),
            group_id: "g".into(),
            label: l,
            probs: p,
        };
        let samples = vec![
            s(0, vec![0.7, 0.1, 0.1, 0.1]),
            s(1, vec![0.1, 0.7, 0.1, 0.1]),
            s(2, vec![0.1, 0.1, 0.1, 0.7]),
            s(3, vec![0.1, 0.1, 0.1, 0.7]),
        ];
        let m = summarize(&samples, 4, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.confusion[2][3], 1);
        assert!(m.binary.is_none());
        let table = summary_table("t", &m, &[]);
        assert!(table.contains("recall"));
    }

    #[test]
    fn threshold_decision() {
        assert_eq!(predicted_class(&[0.5, 0.5], 0.5), 1);
        assert_eq!(predicted_class(&[0.6, 0.4], 0.5), 0);
        assert_eq!(predicted_class(&[0.3, 0.3, 0.4], 0.5), 2);
        assert_eq!(predicted_class(&[0.4, 0.4, 0.2], 0.5), 0);
    }
}
