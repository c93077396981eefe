//! Response, intention and risk object identification metrics, and the
//! benchmark that runs them over test splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{identify_risk_object, CausalConfig};
use crate::error::{Error, Result};
use crate::graphs::correlation_identify;
use crate::model::{predict, Checkpoint};
use crate::scene::{derive_clip_labels, iou, BoundingBox, Intention, Response};
use crate::simulator::Scenario;

/// Mean negative natural log of the probability given to the true class.
pub fn perplexity(probs: &[[f64; 2]], labels: &[Response]) -> Result<f64> {
    check_counts("perplexity", probs.len(), labels.len())?;
    let total: f64 = probs.iter().zip(labels).map(|(p, l)| -p[l.index()].ln()).sum();
    Ok(total / probs.len() as f64)
}

fn check_counts(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a == 0 || b == 0 {
        return Err(Error::EmptyInput(what));
    }
    if a != b {
        return Err(Error::Dims { op: what, expected: a.to_string(), got: b.to_string() });
    }
    Ok(())
}

/// (macro, micro): mean per-class recall over classes present in `labels`,
/// and overall fraction correct.
pub fn macro_micro_accuracy<T: Ord + Copy>(predictions: &[T], labels: &[T]) -> Result<(f64, f64)> {
    check_counts("accuracy", predictions.len(), labels.len())?;
    let mut per_class: BTreeMap<T, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (p, l) in predictions.iter().zip(labels) {
        let e = per_class.entry(*l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
            correct += 1;
        }
    }
    let macro_acc = per_class.values().map(|(c, n)| *c as f64 / *n as f64).sum::<f64>() / per_class.len() as f64;
    Ok((macro_acc, correct as f64 / labels.len() as f64))
}

/// Non-interpolated average precision: frames sorted by descending score,
/// precision averaged over the rank of every positive. Equal scores are
/// ranked negatives first.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    check_counts("average precision", scores.len(), positive.len())?;
    let total = positive.iter().filter(|p| **p).count();
    if total == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(positive[a].cmp(&positive[b])));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// AP of the Stop class over frames, each sample contributing one frame.
pub fn per_frame_ap(stop_scores: &[f64], labels: &[Response]) -> Result<f64> {
    let positive: Vec<bool> = labels.iter().map(|l| *l == Response::Stop).collect();
    average_precision(stop_scores, &positive)
}

/// Mean of per-class AP over intentions that occur in `labels`.
pub fn intention_map(probs: &[Vec<f64>], labels: &[Intention]) -> Result<f64> {
    check_counts("intention mAP", probs.len(), labels.len())?;
    let mut aps = Vec::new();
    for class in Intention::ALL {
        let positive: Vec<bool> = labels.iter().map(|l| *l == class).collect();
        if !positive.contains(&true) {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[class.index()]).collect();
        aps.push(average_precision(&scores, &positive)?);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroidAccuracy {
    pub acc_50: f64,
    pub acc_75: f64,
    pub macc: f64,
}

/// Fraction of samples whose predicted box reaches each IoU threshold.
pub fn droid_accuracy(predicted: &[BoundingBox], truth: &[BoundingBox]) -> Result<DroidAccuracy> {
    check_counts("droid accuracy", predicted.len(), truth.len())?;
    let ious: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| iou(p, t)).collect();
    let hits = |tau: f64| ious.iter().filter(|v| **v >= tau).count();
    let n = ious.len() as f64;
    let th = iou_thresholds();
    // Counting hits first keeps mAcc <= Acc@0.5 exact.
    let total: usize = th.iter().map(|t| hits(*t)).sum();
    Ok(DroidAccuracy {
        acc_50: hits(th[0]) as f64 / n,
        acc_75: hits(th[5]) as f64 / n,
        macc: total as f64 / (th.len() as f64 * n),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    Causation,
    Correlation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseMetrics {
    pub samples: usize,
    pub perplexity: f64,
    pub macro_accuracy: f64,
    pub micro_accuracy: f64,
    /// Stop-class AP over frames.
    pub per_frame_map: f64,
    /// Per-class AP macro-averaged over the intentions present.
    pub intention_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroidRow {
    /// Scenario class, or "all".
    pub scenario_class: String,
    pub samples: usize,
    #[serde(flatten)]
    pub accuracy: DroidAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: BenchmarkMode,
    pub response: ResponseMetrics,
    /// Per scenario class in name order, then "all".
    pub droid: Vec<DroidRow>,
}

impl MetricsReport {
    pub fn droid_overall(&self) -> &DroidRow {
        self.droid.last().expect("benchmark always adds the overall row")
    }

    pub fn to_csv(&self) -> String {
        let r = &self.response;
        let mut out = String::from("section,mode,scenario_class,samples,perplexity,macro_accuracy,micro_accuracy,per_frame_map,intention_map,acc_50,acc_75,macc\n");
        let mode = serde_json::to_value(self.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(
            out,
            "response,{mode},all,{},{},{},{},{},{},,,",
            r.samples, r.perplexity, r.macro_accuracy, r.micro_accuracy, r.per_frame_map, r.intention_map
        );
        for d in &self.droid {
            let a = &d.accuracy;
            let _ = writeln!(out, "droid,{mode},{},{},,,,,,{},{},{}", d.scenario_class, d.samples, a.acc_50, a.acc_75, a.macc);
        }
        out
    }
}

pub fn response_metrics(ckpt: &Checkpoint, split: &[Scenario]) -> Result<ResponseMetrics> {
    if split.is_empty() {
        return Err(Error::EmptyInput("test1 split"));
    }
    let preds = split.par_iter().map(|s| predict(ckpt, &s.clip, None)).collect::<Result<Vec<_>>>()?;
    let labels = split
        .iter()
        .map(|s| derive_clip_labels(&s.clip.labels, s.clip.frames))
        .collect::<Result<Vec<_>>>()?;
    let responses: Vec<Response> = labels.iter().map(|l| l.1).collect();
    let probs: Vec<[f64; 2]> = preds.iter().map(|p| [p.response.p_go, p.response.p_stop]).collect();
    let predicted: Vec<usize> = probs.iter().map(|p| (p[1] > p[0]) as usize).collect();
    let truth: Vec<usize> = responses.iter().map(|r| r.index()).collect();
    let (macro_accuracy, micro_accuracy) = macro_micro_accuracy(&predicted, &truth)?;
    let stop_scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let intention_probs: Vec<Vec<f64>> = preds.iter().map(|p| p.intention.probs.clone()).collect();
    let intentions: Vec<Intention> = labels.iter().map(|l| l.0).collect();
    Ok(ResponseMetrics {
        samples: split.len(),
        perplexity: perplexity(&probs, &responses)?,
        macro_accuracy,
        micro_accuracy,
        per_frame_map: per_frame_ap(&stop_scores, &responses)?,
        intention_map: intention_map(&intention_probs, &intentions)?,
    })
}

/// Predicted risk object box for one scenario.
pub fn droid_predict(ckpt: &Checkpoint, s: &Scenario, mode: BenchmarkMode) -> Result<BoundingBox> {
    let id = match mode {
        BenchmarkMode::Causation => identify_risk_object(&s.clip, ckpt, &CausalConfig::default())?.0,
        BenchmarkMode::Correlation => {
            let att = predict(ckpt, &s.clip, None)?.ego_attention;
            let (ids, row): (Vec<u32>, Vec<f64>) = att.into_iter().unzip();
            correlation_identify(&row, &ids)?
        }
    };
    seen_box(s, id)
}

fn seen_box(s: &Scenario, id: u32) -> Result<BoundingBox> {
    let tr = s.clip.tracklet(id)?;
    tr.last_seen().map(|(_, b)| *b).ok_or_else(|| Error::invalid("tracklet", format!("{id} has no boxes")))
}

pub fn droid_metrics(ckpt: &Checkpoint, split: &[Scenario], mode: BenchmarkMode) -> Result<Vec<DroidRow>> {
    if split.is_empty() {
        return Err(Error::EmptyInput("test2 split"));
    }
    let predicted = split.par_iter().map(|s| droid_predict(ckpt, s, mode)).collect::<Result<Vec<_>>>()?;
    let truth = split
        .iter()
        .map(|s| {
            let cause = s.truth.cause.ok_or_else(|| Error::invalid("test2 scenario", "has no cause object"))?;
            seen_box(s, cause)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in split.iter().enumerate() {
        groups.entry(s.truth.kind.name()).or_default().push(i);
    }
    let mut rows = Vec::new();
    for (class, idx) in groups {
        let p: Vec<BoundingBox> = idx.iter().map(|&i| predicted[i]).collect();
        let t: Vec<BoundingBox> = idx.iter().map(|&i| truth[i]).collect();
        rows.push(DroidRow { scenario_class: class.into(), samples: idx.len(), accuracy: droid_accuracy(&p, &t)? });
    }
    rows.push(DroidRow {
        scenario_class: "all".into(),
        samples: split.len(),
        accuracy: droid_accuracy(&predicted, &truth)?,
    });
    Ok(rows)
}

/// Response metrics on `test1` and identification metrics on `test2`.
pub fn benchmark(ckpt: &Checkpoint, test1: &[Scenario], test2: &[Scenario], mode: BenchmarkMode) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mode,
        response: response_metrics(ckpt, test1)?,
        droid: droid_metrics(ckpt, test2, mode)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn perplexity_examples() {
        let go = [Response::Go, Response::Stop];
        assert_eq!(perplexity(&[[1.0, 0.0], [0.0, 1.0]], &go).unwrap(), 0.0);
        assert_eq!(perplexity(&[[0.5, 0.5]; 2], &go).unwrap(), std::f64::consts::LN_2);
        let mixed = perplexity(&[[1.0, 0.0], [0.5, 0.5]], &go).unwrap();
        assert!((mixed - 0.3466).abs() < 1e-4);
        assert!(matches!(perplexity(&[], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn accuracy_examples() {
        let mut labels = vec![0; 100];
        labels.extend([1; 10]);
        let mut preds = vec![0; 90];
        preds.extend([1; 10]);
        preds.extend([0; 10]);
        let (ma, mi) = macro_micro_accuracy(&preds, &labels).unwrap();
        assert_eq!(ma, 0.45);
        assert_eq!(mi, 90.0 / 110.0);
        assert_eq!(macro_micro_accuracy(&labels, &labels).unwrap(), (1.0, 1.0));
        let (ma, mi) = macro_micro_accuracy(&[0, 1, 1, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(ma, mi);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap(), 0.25);
        assert!(matches!(average_precision(&[0.3], &[false]), Err(Error::NoPositives)));
    }

    #[test]
    fn droid_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let all = DroidAccuracy { acc_50: 1.0, acc_75: 1.0, macc: 1.0 };
        assert_eq!(droid_accuracy(&[a, a], &[a, a]).unwrap(), all);
        let r = droid_accuracy(&[bx(0.0, 0.0, 8.0, 10.0)], &[a]).unwrap();
        assert_eq!(r, DroidAccuracy { acc_50: 1.0, acc_75: 1.0, macc: 0.7 });
        let third = droid_accuracy(&[bx(5.0, 0.0, 15.0, 10.0)], &[a]).unwrap();
        assert_eq!(third, DroidAccuracy { acc_50: 0.0, acc_75: 0.0, macc: 0.0 });
        assert!(droid_accuracy(&[a], &[a, a]).is_err());
    }

    #[test]
    fn thresholds_are_exact() {
        assert_eq!(iou_thresholds()[6], 0.8);
        assert_eq!(iou_thresholds()[9], 0.95);
    }
}
