use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// Binary confusion counts; class 1 (high risk) is positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn from_predictions(predicted: &[usize], labels: &[usize]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::invalid(
                "confusion matrix",
                format!("{} predictions for {} labels", predicted.len(), labels.len()),
            ));
        }
        let mut cm = Self::default();
        for (&p, &l) in predicted.iter().zip(labels) {
            match (p, l) {
                (1, 1) => cm.tp += 1,
                (0, 0) => cm.tn += 1,
                (1, 0) => cm.fp += 1,
                (0, 1) => cm.fn_ += 1,
                _ => return Err(Error::invalid("confusion matrix", format!("non-binary pair (predicted {p}, label {l})"))),
            }
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// One ROC operating point: predict positive when `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// The nine table metrics as fractions, plus ROC data when scores exist.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub sen: f64,
    pub spf: f64,
    pub prc: f64,
    pub f1: f64,
    pub mcc: f64,
    pub fpr: f64,
    pub npv: f64,
    pub b_acc: f64,
    pub roc_points: Vec<RocPoint>,
    pub auc: Option<f64>,
}

/// Serialized form; `auc` is `null` when unavailable.
#[derive(Serialize)]
struct MetricsJson {
    acc: f64,
    sen: f64,
    spf: f64,
    prc: f64,
    f1: f64,
    mcc: f64,
    fpr: f64,
    npv: f64,
    b_acc: f64,
    auc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from counts. Any ratio with a zero denominator is 0, including
/// MCC and F1.
pub fn compute_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let &ConfusionMatrix { tp, tn, fp, fn_ } = cm;
    let sen = ratio(tp, tp + fn_);
    let spf = ratio(tn, tn + fp);
    let prc = ratio(tp, tp + fp);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    let (tpf, tnf, fpf, fnf) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let den = ((tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf)).sqrt();
    let mcc = if den == 0.0 { 0.0 } else { (tpf * tnf - fpf * fnf) / den };
    MetricsReport {
        acc: ratio(tp + tn, cm.total()),
        sen,
        spf,
        prc,
        f1,
        mcc,
        fpr: ratio(fp, fp + tn),
        npv: ratio(tn, tn + fn_),
        b_acc: (sen + spf) / 2.0,
        roc_points: Vec::new(),
        auc: None,
    }
}

fn check_scores(scores: &[f64], labels: &[usize]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("roc", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::invalid("roc", format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid("roc", format!("label {l} is not binary")));
    }
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc", "both classes must be present"));
    }
    Ok((pos, neg))
}

/// ROC curve over every distinct score (descending, starting at `(0, 0)`
/// with an infinite threshold) and the Mann-Whitney AUC with ties counted
/// one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<(Vec<RocPoint>, f64)> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    // twice the AUC numerator: each (pos, neg) pair above counts 2, a tie 1
    let mut twice: u64 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // positives in this group beat the negatives not yet seen
        twice += gp * 2 * (neg - fp - gn) + gp * gn;
        tp += gp;
        fp += gn;
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok((points, twice as f64 / (2 * pos * neg) as f64))
}

/// Metrics for hard predictions, with ROC data from the class-1 scores
/// when both classes are present.
pub fn evaluate_predictions(predicted: &[usize], scores: &[f64], labels: &[usize]) -> Result<(ConfusionMatrix, MetricsReport)> {
    let cm = ConfusionMatrix::from_predictions(predicted, labels)?;
    let mut report = compute_metrics(&cm);
    if check_scores(scores, labels).is_ok() {
        let (points, auc) = roc_auc(scores, labels)?;
        report.roc_points = points;
        report.auc = Some(auc);
    }
    Ok((cm, report))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let j = MetricsJson {
            acc: self.acc,
            sen: self.sen,
            spf: self.spf,
            prc: self.prc,
            f1: self.f1,
            mcc: self.mcc,
            fpr: self.fpr,
            npv: self.npv,
            b_acc: self.b_acc,
            auc: self.auc,
        };
        serde_json::to_string_pretty(&j).expect("plain struct serializes")
    }

    /// Serializable value for embedding in larger documents.
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::from_str(&self.to_json()).expect("own JSON parses")
    }

    /// Fixed-width table in the usual row order; percentages to two
    /// decimals, MCC as a fraction.
    pub fn to_table(&self) -> String {
        let rows = [
            ("ACC", self.acc),
            ("SEN", self.sen),
            ("SPF", self.spf),
            ("PRC", self.prc),
            ("F1", self.f1),
            ("MCC", self.mcc),
            ("FPR", self.fpr),
            ("NPV", self.npv),
            ("B-ACC", self.b_acc),
        ];
        let mut out = String::new();
        for (name, v) in rows {
            if name == "MCC" {
                writeln!(out, "{name:<6}{v:>8.2}").unwrap();
            } else {
                writeln!(out, "{name:<6}{:>8.2}", v * 100.0).unwrap();
            }
        }
        match self.auc {
            Some(a) => writeln!(out, "{:<6}{:>8.2}", "AUC", a * 100.0).unwrap(),
            None => writeln!(out, "{:<6}{:>8}", "AUC", "n/a").unwrap(),
        }
        out
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.roc_points {
            writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold).unwrap();
        }
        out
    }

    /// Field-wise mean of several reports (ROC points are dropped; the AUC
    /// is averaged only when every report has one).
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let auc = reports.iter().map(|r| r.auc).collect::<Option<Vec<f64>>>();
        Some(MetricsReport {
            acc: avg(|r| r.acc),
            sen: avg(|r| r.sen),
            spf: avg(|r| r.spf),
            prc: avg(|r| r.prc),
            f1: avg(|r| r.f1),
            mcc: avg(|r| r.mcc),
            fpr: avg(|r| r.fpr),
            npv: avg(|r| r.npv),
            b_acc: avg(|r| r.b_acc),
            roc_points: Vec::new(),
            auc: auc.map(|a| a.iter().sum::<f64>() / n),
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pairwise_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut sum = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        sum += 1.0;
                    } else if scores[i] == scores[j] {
                        sum += 0.5;
                    }
                }
            }
        }
        sum / pairs
    }

    #[test]
    fn headline_matrix() {
        let cm = ConfusionMatrix { tp: 1400, tn: 1747, fp: 2, fn_: 4 };
        let r = compute_metrics(&cm);
        assert_eq!(format!("{:.2}", r.acc * 100.0), "99.81");
        assert!((r.acc - 3147.0 / 3153.0).abs() < 1e-15);
        assert!((r.mcc - 0.99615).abs() < 5e-6, "{}", r.mcc);
    }

    #[test]
    fn perfect_and_degenerate() {
        let r = compute_metrics(&ConfusionMatrix { tp: 5, tn: 7, fp: 0, fn_: 0 });
        assert_eq!((r.acc, r.sen, r.spf, r.prc, r.f1, r.mcc, r.fpr), (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0));
        let r = compute_metrics(&ConfusionMatrix { tp: 0, tn: 7, fp: 0, fn_: 0 });
        assert_eq!((r.prc, r.mcc, r.sen, r.f1), (0.0, 0.0, 0.0, 0.0));
        let r = compute_metrics(&ConfusionMatrix::default());
        assert_eq!(r.acc, 0.0);
    }

    #[test]
    fn auc_examples() {
        let (_, a) = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(a, 1.0);
        let (pts, a) = roc_auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(pts.len(), 2);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        let scores = [0.9, 0.8, 0.8, 0.7, 0.6, 0.55, 0.5, 0.3, 0.3, 0.1];
        let labels = [1, 0, 1, 1, 0, 1, 0, 1, 0, 0];
        let (pts, a) = roc_auc(&scores, &labels).unwrap();
        assert_eq!(a, pairwise_auc(&scores, &labels));
        assert_eq!(pts.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert!(pts.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }

    #[test]
    fn auc_matches_pairwise_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(4..200);
            let labels: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.random_range(0..2) }).collect();
            // coarse scores force ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            assert_eq!(roc_auc(&scores, &labels).unwrap().1, pairwise_auc(&scores, &labels));
        }
    }

    #[test]
    fn json_has_exactly_the_report_keys() {
        let (_, r) = evaluate_predictions(&[0, 1, 0, 1], &[0.1, 0.9, 0.4, 0.6], &[0, 1, 1, 0]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["acc", "auc", "b_acc", "f1", "fpr", "mcc", "npv", "prc", "sen", "spf"]);
        assert!(r.to_table().starts_with("ACC"));
        assert!(r.roc_csv().starts_with("fpr,tpr,threshold\n0,0,inf\n"));
    }

    proptest! {
        #[test]
        fn identities_hold(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let cm = ConfusionMatrix { tp, tn, fp, fn_ };
            prop_assume!(cm.total() > 0);
            let r = compute_metrics(&cm);
            let t = cm.total() as f64;
            prop_assert!((r.acc - (tp + tn) as f64 / t).abs() < 1e-12);
            prop_assert!((r.b_acc - (r.sen + r.spf) / 2.0).abs() < 1e-12);
            if tn + fp > 0 {
                prop_assert!((r.fpr + r.spf - 1.0).abs() < 1e-12);
            }
            if r.prc + r.sen > 0.0 {
                prop_assert!((r.f1 - 2.0 * r.prc * r.sen / (r.prc + r.sen)).abs() < 1e-12);
            }
            for v in [r.acc, r.sen, r.spf, r.prc, r.f1, r.fpr, r.npv, r.b_acc] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((-1.0..=1.0).contains(&r.mcc));
        }

        #[test]
        fn auc_is_rank_invariant(raw in proptest::collection::vec((0.0f64..1.0, 0usize..2), 2..60)) {
            let mut scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mut labels: Vec<usize> = raw.iter().map(|r| r.1).collect();
            labels[0] = 0;
            labels[1] = 1;
            scores[0] = scores[0].min(0.99);
            let (_, a) = roc_auc(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let (_, b) = roc_auc(&warped, &labels).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
