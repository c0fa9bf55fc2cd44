//! Binary classification metrics: confusion counts, accuracy/precision/recall/F1
//! and the Mann-Whitney AUC (ties count one half).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("no examples to evaluate")]
    Empty,
    #[error("AUC needs both classes; every label is {0}")]
    SingleClass(u8),
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("value at index {0} is not 0 or 1")]
    NotBinary(usize),
    #[error("report line {line}: {message}")]
    BadReport { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch { preds: a, labels: b });
    }
    if a == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn check_binary(values: &[u8]) -> Result<(), MetricsError> {
    match values.iter().position(|&v| v > 1) {
        Some(i) => Err(MetricsError::NotBinary(i)),
        None => Ok(()),
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionMatrix, MetricsError> {
    check_lengths(preds.len(), labels.len())?;
    check_binary(preds)?;
    check_binary(labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 1) => cm.fn_ += 1,
            _ => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Degenerate denominators. The affected metric is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricWarning {
    NoPredictedPositives,
    NoActualPositives,
    ZeroPrecisionAndRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub warnings: Vec<MetricWarning>,
}

pub fn scalar_metrics(cm: &ConfusionMatrix) -> ScalarMetrics {
    let mut warnings = Vec::new();
    let n = cm.n();
    let accuracy = if n == 0 { 0.0 } else { (cm.tp + cm.tn) as f64 / n as f64 };
    let precision = if cm.tp + cm.fp == 0 {
        warnings.push(MetricWarning::NoPredictedPositives);
        0.0
    } else {
        cm.tp as f64 / (cm.tp + cm.fp) as f64
    };
    let recall = if cm.tp + cm.fn_ == 0 {
        warnings.push(MetricWarning::NoActualPositives);
        0.0
    } else {
        cm.tp as f64 / (cm.tp + cm.fn_) as f64
    };
    // 2PR/(P+R) == 2tp/(2tp+fp+fn); the count form is exact
    let f1 = if cm.tp == 0 {
        if precision + recall == 0.0 {
            warnings.push(MetricWarning::ZeroPrecisionAndRecall);
        }
        0.0
    } else {
        (2 * cm.tp) as f64 / (2 * cm.tp + cm.fp + cm.fn_) as f64
    };
    ScalarMetrics {
        accuracy,
        precision,
        recall,
        f1,
        warnings,
    }
}

/// AUC as the exact fraction `(2 wins + ties) / (2 P N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Auc {
    pub numerator: u128,
    pub denominator: u128,
}

impl Auc {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(u128, u128), MetricsError> {
    check_lengths(scores.len(), labels.len())?;
    check_binary(labels)?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass(labels[0]));
    }
    Ok((pos, neg))
}

/// Sort-based pair counting, `O(n log n)`.
pub fn auc_exact(scores: &[f64], labels: &[u8]) -> Result<Auc, MetricsError> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut numerator: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut group_pos, mut group_neg) = (0u128, 0u128);
        // -0.0 and 0.0 are the same score
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        numerator += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok(Auc {
        numerator,
        denominator: 2 * pos * neg,
    })
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    auc_exact(scores, labels).map(|a| a.value())
}

/// Direct enumeration of every (positive, negative) pair, `O(P N)`.
pub fn auc_brute_force(scores: &[f64], labels: &[u8]) -> Result<Auc, MetricsError> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut numerator = 0u128;
    let of_class = |c: u8| scores.iter().zip(labels).filter(move |&(_, &y)| y == c).map(|(&s, _)| s);
    for sp in of_class(1) {
        for sn in of_class(0) {
            numerator += if sp > sn {
                2
            } else if sp == sn {
                1
            } else {
                0
            };
        }
    }
    Ok(Auc {
        numerator,
        denominator: 2 * pos * neg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the evaluated labels contain a single class.
    pub auc: Option<f64>,
    pub n: usize,
    pub warnings: Vec<MetricWarning>,
}

/// Thresholds probabilities at 0.5 and computes every metric.
pub fn evaluate_scores(probs: &[f64], labels: &[u8]) -> Result<EvalReport, MetricsError> {
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let cm = confusion(&preds, labels)?;
    let m = scalar_metrics(&cm);
    let auc = match auc(probs, labels) {
        Ok(a) => Some(a),
        Err(MetricsError::SingleClass(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        confusion: cm,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        auc,
        n: labels.len(),
        warnings: m.warnings,
    })
}

/// Rounds half away from zero at two decimals, working on the shortest
/// decimal representation so that `82.325` gives `82.33`.
pub fn round_half_up_2(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let repr = format!("{:?}", x.abs());
    let (mantissa, exp) = match repr.split_once('e') {
        Some((m, e)) => (m.to_string(), e.parse::<i32>().expect("float exponent")),
        None => (repr.clone(), 0),
    };
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((&mantissa, ""));
    let mut digits: Vec<u8> = int_part.bytes().chain(frac_part.bytes()).map(|b| b - b'0').collect();
    // decimal point sits after `point` digits
    let mut point = int_part.len() as i32 + exp;
    if point < 0 {
        let pad = (-point) as usize;
        digits.splice(0..0, std::iter::repeat_n(0, pad));
        point = 0;
    }
    let point = point as usize;
    let keep = point + 2;
    if digits.len() < keep + 1 {
        digits.resize(keep + 1, 0);
    }
    let round_up = digits[keep] >= 5;
    digits.truncate(keep);
    let mut point = point;
    if round_up {
        let mut i = keep;
        loop {
            if i == 0 {
                digits.insert(0, 1);
                point += 1;
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let int: String = if point == 0 {
        "0".into()
    } else {
        digits[..point].iter().map(|d| (d + b'0') as char).collect::<String>()
    };
    let int = match int.trim_start_matches('0') {
        "" => "0".to_string(),
        s => s.to_string(),
    };
    let frac: String = digits[point..].iter().map(|d| (d + b'0') as char).collect();
    let negative = x < 0.0 && digits.iter().any(|&d| d != 0);
    format!("{}{int}.{frac}", if negative { "-" } else { "" })
}

/// Percent value of a fraction, rounded for display.
pub fn percent(x: f64) -> String {
    round_half_up_2(x * 100.0)
}

pub fn render_confusion(cm: &ConfusionMatrix) -> String {
    let cells = [cm.tn, cm.fp, cm.fn_, cm.tp].map(|c| c.to_string());
    let w = cells.iter().map(String::len).max().unwrap_or(1).max(6);
    let mut out = String::new();
    let line = format!("+{}+{}+{}+\n", "-".repeat(10), "-".repeat(w + 2), "-".repeat(w + 2));
    out.push_str(&line);
    let _ = writeln!(out, "|{:^10}| {:>w$} | {:>w$} |", "", "pred 0", "pred 1");
    out.push_str(&line);
    let _ = writeln!(out, "|{:^10}| {:>w$} | {:>w$} |", "true 0", cells[0], cells[1]);
    let _ = writeln!(out, "|{:^10}| {:>w$} | {:>w$} |", "true 1", cells[2], cells[3]);
    out.push_str(&line);
    out
}

pub const REPORT_HEADER: &str = "domain,accuracy,precision,recall,f1,auc,n,tp,fp,fn,tn";

/// One line of a report CSV. Metric fields are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub domain: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
}

pub fn report_csv_line(domain: &str, r: &EvalReport) -> String {
    let c = &r.confusion;
    format!(
        "{domain},{},{},{},{},{},{},{},{},{},{}",
        percent(r.accuracy),
        percent(r.precision),
        percent(r.recall),
        percent(r.f1),
        r.auc.map(percent).unwrap_or_default(),
        r.n,
        c.tp,
        c.fp,
        c.fn_,
        c.tn
    )
}

pub fn report_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for (domain, r) in rows {
        out.push_str(&report_csv_line(domain, r));
        out.push('\n');
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, MetricsError> {
    let bad = |line: usize, message: String| MetricsError::BadReport { line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == REPORT_HEADER => {}
        Some((i, h)) => return Err(bad(i + 1, format!("unexpected header {h:?}"))),
        None => return Err(bad(1, "empty report".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(bad(n, format!("expected 11 fields, found {}", f.len())));
        }
        if f[0].is_empty() {
            return Err(bad(n, "empty domain".into()));
        }
        let pct = |s: &str, what: &str| -> Result<f64, MetricsError> {
            let v: f64 = s.parse().map_err(|_| bad(n, format!("{what} {s:?} is not a number")))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(bad(n, format!("{what} {v} outside [0, 100]")));
            }
            Ok(v)
        };
        let count = |s: &str| -> Result<u64, MetricsError> { s.parse().map_err(|_| bad(n, format!("{s:?} is not a count"))) };
        let confusion = ConfusionMatrix {
            tp: count(f[7])?,
            fp: count(f[8])?,
            fn_: count(f[9])?,
            tn: count(f[10])?,
        };
        let total = count(f[6])?;
        if confusion.tp.checked_add(confusion.fp).and_then(|x| x.checked_add(confusion.fn_)).and_then(|x| x.checked_add(confusion.tn)) != Some(total) {
            return Err(bad(n, "confusion counts do not sum to n".into()));
        }
        rows.push(ReportRow {
            domain: f[0].to_string(),
            accuracy: pct(f[1], "accuracy")?,
            precision: pct(f[2], "precision")?,
            recall: pct(f[3], "recall")?,
            f1: pct(f[4], "f1")?,
            auc: if f[5].is_empty() { None } else { Some(pct(f[5], "auc")?) },
            confusion,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_examples() {
        let labels = [1, 1, 1, 0, 0, 0, 0, 1, 0, 1];
        let preds = [1, 1, 0, 1, 0, 0, 0, 1, 0, 1];
        assert_eq!(confusion(&preds, &labels).unwrap(), ConfusionMatrix { tp: 4, fp: 1, fn_: 1, tn: 4 });
        let same = confusion(&labels, &labels).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let opp = confusion(&flipped, &labels).unwrap();
        assert_eq!((opp.tp, opp.tn), (0, 0));
        assert_eq!(confusion(&[1], &[1, 0]).unwrap_err(), MetricsError::LengthMismatch { preds: 1, labels: 2 });
        assert_eq!(confusion(&[], &[]).unwrap_err(), MetricsError::Empty);
        assert_eq!(confusion(&[2], &[1]).unwrap_err(), MetricsError::NotBinary(0));
    }

    #[test]
    fn scalar_examples() {
        let m = scalar_metrics(&ConfusionMatrix { tp: 3, fp: 1, fn_: 1, tn: 5 });
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.8, 0.75, 0.75, 0.75));
        assert!(m.warnings.is_empty());
        let m = scalar_metrics(&ConfusionMatrix { tp: 0, fp: 0, fn_: 4, tn: 6 });
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.warnings.contains(&MetricWarning::NoPredictedPositives));
        let m = scalar_metrics(&ConfusionMatrix { tp: 5, fp: 0, fn_: 0, tn: 5 });
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.3, 0.6], &[1, 1]).unwrap_err(), MetricsError::SingleClass(1));
        assert_eq!(auc(&[f64::NAN, 0.6], &[0, 1]).unwrap_err(), MetricsError::NonFiniteScore(0));
        assert_eq!(auc(&[-0.0, 0.0], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn rank_auc_equals_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.random_range(2..=200);
            let levels = rng.random_range(1..=50);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            assert_eq!(auc_exact(&scores, &labels).unwrap(), auc_brute_force(&scores, &labels).unwrap());
        }
    }

    #[test]
    fn evaluate_scores_and_render() {
        let r = evaluate_scores(&[0.9, 0.8, 0.2, 0.6], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.confusion, ConfusionMatrix { tp: 2, fp: 1, fn_: 0, tn: 1 });
        assert_eq!(r.auc, Some(1.0));
        let single = evaluate_scores(&[0.9, 0.8], &[1, 1]).unwrap();
        assert_eq!(single.auc, None);
        let text = render_confusion(&r.confusion);
        assert!(text.contains("true 1"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn half_up_rounding() {
        let cases = [
            (82.3275, "82.33"),
            (82.325, "82.33"),
            (82.324, "82.32"),
            (46.1, "46.10"),
            (0.0, "0.00"),
            (99.995, "100.00"),
            (0.005, "0.01"),
            (1e-9, "0.00"),
            (-1.005, "-1.01"),
            (-0.001, "0.00"),
            (1234567.891, "1234567.89"),
            (1e21, "1000000000000000000000.00"),
        ];
        for (x, want) in cases {
            assert_eq!(round_half_up_2(x), want, "{x}");
        }
        assert_eq!(percent(0.8), "80.00");
    }

    #[test]
    fn report_csv_round_trip() {
        let r = evaluate_scores(&[0.9, 0.8, 0.2, 0.6, 0.1], &[1, 1, 0, 0, 1]).unwrap();
        let text = report_csv(&[("justice".into(), r.clone())]);
        let rows = parse_report_csv(&text).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].domain, "justice");
        assert_eq!(rows[0].accuracy, 60.0);
        assert_eq!(rows[0].confusion, r.confusion);
        assert!(parse_report_csv("nope\n").is_err());
        assert!(parse_report_csv(&format!("{REPORT_HEADER}\nx,1,2,3\n")).is_err());
        assert!(parse_report_csv(&format!("{REPORT_HEADER}\nx,101,0,0,0,,1,1,0,0,0\n")).is_err());
        assert!(parse_report_csv(&format!("{REPORT_HEADER}\nx,50,0,0,0,,3,1,0,0,0\n")).is_err());
    }

    proptest! {
        #[test]
        fn auc_reverses_without_ties(raw in prop::collection::btree_set(-1000i32..1000, 2..60), seed in 0u64..1000) {
            let scores: Vec<f64> = raw.into_iter().map(f64::from).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<u8> = scores.iter().map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auc_exact(&scores, &labels).unwrap();
            let b = auc_exact(&neg, &labels).unwrap();
            prop_assert_eq!(a.numerator + b.numerator, a.denominator);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            rows in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..80),
        ) {
            let (scores, mut labels): (Vec<f64>, Vec<u8>) = rows.into_iter().unzip();
            labels[0] = 0;
            labels[1] = 1;
            let mapped: Vec<f64> = scores.iter().map(|&s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auc_exact(&scores, &labels).unwrap(), auc_exact(&mapped, &labels).unwrap());
        }

        #[test]
        fn scalar_metrics_match_rational_definitions(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            prop_assume!(tp + fp + fn_ + tn > 0);
            let cm = ConfusionMatrix { tp, fp, fn_, tn };
            let m = scalar_metrics(&cm);
            prop_assert_eq!(m.accuracy, (tp + tn) as f64 / (tp + fp + fn_ + tn) as f64);
            if tp + fp > 0 { prop_assert_eq!(m.precision, tp as f64 / (tp + fp) as f64); }
            if tp + fn_ > 0 { prop_assert_eq!(m.recall, tp as f64 / (tp + fn_) as f64); }
            if tp > 0 {
                let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - harmonic).abs() <= 1e-15);
            }
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
