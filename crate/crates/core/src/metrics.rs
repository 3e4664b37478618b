//! Accuracy and F1 scores from confusion counts.

use serde::Serialize;

use crate::error::{Error, Result};

/// One-vs-rest confusion counts for a class (or a tag).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ClassCounts {
    pub fn f1(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Single-label: fraction of argmax hits. Multilabel: fraction of
    /// correct (instance, tag) decisions.
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub per_class: Vec<ClassCounts>,
    pub instances: usize,
}

impl MetricReport {
    /// Macro and micro F1 from the same per-class counts.
    pub fn from_counts(per_class: Vec<ClassCounts>, accuracy: f64, instances: usize) -> Self {
        let f1_macro = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(ClassCounts::f1).sum::<f64>() / per_class.len() as f64
        };
        let (tp, fp, fn_) = per_class
            .iter()
            .fold((0, 0, 0), |(a, b, c), k| (a + k.tp, b + k.fp, c + k.fn_));
        MetricReport {
            accuracy,
            f1_macro,
            f1_micro: f1(tp, fp, fn_),
            per_class,
            instances,
        }
    }

    /// Plain-text `key: value` rendering.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{{\n  instances: {},\n  accuracy: {:.6},\n  f1_macro: {:.6},\n  f1_micro: {:.6},\n  per_class: [\n",
            self.instances, self.accuracy, self.f1_macro, self.f1_micro
        );
        for (i, c) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "    {{ class: {i}, tp: {}, fp: {}, fn: {}, tn: {} }},\n",
                c.tp, c.fp, c.fn_, c.tn
            ));
        }
        out.push_str("  ]\n}\n");
        out
    }
}

pub fn single_label_report(predictions: &[usize], targets: &[usize], num_classes: usize) -> Result<MetricReport> {
    if predictions.is_empty() {
        return Err(Error::Input("cannot score an empty split".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape {
            op: "single_label_report",
            lhs: vec![predictions.len()],
            rhs: vec![targets.len()],
        });
    }
    let mut per_class = vec![ClassCounts::default(); num_classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        for (c, counts) in per_class.iter_mut().enumerate() {
            match (p == c, t == c) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    let n = predictions.len();
    Ok(MetricReport::from_counts(per_class, hits as f64 / n as f64, n))
}

pub fn multilabel_report(predictions: &[Vec<bool>], targets: &[Vec<bool>]) -> Result<MetricReport> {
    if predictions.is_empty() {
        return Err(Error::Input("cannot score an empty split".into()));
    }
    let tags = targets[0].len();
    let mut per_class = vec![ClassCounts::default(); tags];
    let mut hits = 0;
    for (p, t) in predictions.iter().zip(targets) {
        for m in 0..tags {
            let counts = &mut per_class[m];
            match (p[m], t[m]) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
            hits += usize::from(p[m] == t[m]);
        }
    }
    let n = predictions.len();
    Ok(MetricReport::from_counts(per_class, hits as f64 / (n * tags) as f64, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let r = single_label_report(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap();
        assert_eq!((r.accuracy, r.f1_macro, r.f1_micro), (1.0, 1.0, 1.0));
        let tags = vec![vec![true, false], vec![false, true]];
        let r = multilabel_report(&tags, &tags).unwrap();
        assert_eq!((r.accuracy, r.f1_macro, r.f1_micro), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_classes() {
        let targets: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let r = single_label_report(&[2; 40], &targets, 4).unwrap();
        assert_eq!(r.accuracy, 0.25);
    }

    #[test]
    fn hand_built_micro_f1() {
        let counts = ClassCounts { tp: 1, fp: 1, fn_: 0, tn: 0 };
        let r = MetricReport::from_counts(vec![counts; 2], 0.5, 2);
        assert!((r.f1_micro - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1_macro - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_split_rejected() {
        assert!(matches!(single_label_report(&[], &[], 2), Err(Error::Input(_))));
    }

    #[test]
    fn absent_class_scores_zero_f1() {
        let r = single_label_report(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(r.per_class[1].f1(), 0.0);
        assert_eq!(r.f1_macro, 0.5);
    }

    proptest! {
        #[test]
        fn micro_f1_equals_accuracy_single_label(
            pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)
        ) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = single_label_report(&p, &t, 5).unwrap();
            prop_assert!((r.f1_micro - r.accuracy).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.f1_macro));
        }
    }
}
