//! Multiple-choice accuracy, bag-of-token F1 and the top-t PR curve over
//! scored entity pairs.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy<T: PartialEq>(predictions: &[T], golds: &[T]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::contract("accuracy of an empty prediction set"));
    }
    if predictions.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// `(precision, recall, f1)` under multiset intersection.
pub fn token_f1<T: Eq + Hash>(pred: &[T], gold: &[T]) -> Result<(f64, f64, f64)> {
    if gold.is_empty() {
        return Err(Error::contract("token F1 against an empty gold answer"));
    }
    let mut bag: HashMap<&T, usize> = HashMap::new();
    for t in gold {
        *bag.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = bag.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    let p = if pred.is_empty() { 0.0 } else { common as f64 / pred.len() as f64 };
    let r = common as f64 / gold.len() as f64;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub t: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Ranks pairs by descending score, ties by ascending name.
pub fn rank_pairs(scored: &[(String, f64)]) -> Result<Vec<&(String, f64)>> {
    if let Some((name, _)) = scored.iter().find(|(_, s)| s.is_nan()) {
        return Err(Error::Domain {
            op: "rank_pairs",
            detail: format!("NaN score for pair {name}"),
        });
    }
    let mut ranked: Vec<&(String, f64)> = scored.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(w) = ranked.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::contract(format!("pair {} scored twice", w[0].0)));
    }
    Ok(ranked)
}

/// One point per cut-off `t = 1..=|scored|`:
/// `precision = |R_t ∩ R_test| / t`, `recall = |R_t ∩ R_test| / |R_test|`.
pub fn pr_curve(scored: &[(String, f64)], positives: &BTreeSet<String>) -> Result<Vec<PrPoint>> {
    if positives.is_empty() {
        return Err(Error::contract("PR curve with no positive pairs"));
    }
    let ranked = rank_pairs(scored)?;
    let mut hits = 0usize;
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            hits += positives.contains(name) as usize;
            PrPoint {
                t: i + 1,
                precision: hits as f64 / (i + 1) as f64,
                recall: hits as f64 / positives.len() as f64,
            }
        })
        .collect())
}

/// Area under the step PR curve, `Σ_t (R_t − R_{t−1}) · P_t`.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in points {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    area
}

/// Best precision among cut-offs reaching `recall`.
pub fn precision_at_recall(points: &[PrPoint], recall: f64) -> Option<f64> {
    points
        .iter()
        .filter(|p| p.recall >= recall)
        .map(|p| p.precision)
        .reduce(f64::max)
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("t,precision,recall\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.t, p.precision, p.recall));
    }
    out
}

pub fn parse_pr_csv(text: &str, origin: &Path) -> Result<Vec<PrPoint>> {
    let bad = |line: usize, field: &str, message: String| Error::Parse {
        file: origin.to_path_buf(),
        line,
        field: Some(field.to_string()),
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "t,precision,recall")) => {}
        _ => return Err(bad(1, "header", "expected `t,precision,recall`".into())),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 3 {
                return Err(bad(i + 1, "t", format!("expected 3 columns, found {}", cols.len())));
            }
            let float = |k: usize, f: &str| cols[k].parse::<f64>().map_err(|e| bad(i + 1, f, e.to_string()));
            Ok(PrPoint {
                t: cols[0].parse().map_err(|e: std::num::ParseIntError| bad(i + 1, "t", e.to_string()))?,
                precision: float(1, "precision")?,
                recall: float(2, "recall")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        let gold = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        let pred = [1, 2, 3, 4, 5, 6, 7, 0, 0, 0];
        assert_eq!(accuracy(&pred, &gold).unwrap(), 0.7);
        assert_eq!(accuracy(&gold, &gold).unwrap(), 1.0);
        assert!(matches!(accuracy::<u8>(&[], &[]), Err(Error::Contract(_))));
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn token_f1_examples() {
        assert_eq!(token_f1(&["a", "b"], &["a", "b"]).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(token_f1(&["a"], &["b"]).unwrap(), (0.0, 0.0, 0.0));
        assert_eq!(token_f1(&["a", "b"], &["b", "c"]).unwrap(), (0.5, 0.5, 0.5));
        // bag semantics: one gold `a` matches one predicted `a`
        assert_eq!(token_f1(&["a", "a"], &["a"]).unwrap().0, 0.5);
        assert!(token_f1::<&str>(&["a"], &[]).is_err());
        assert_eq!(token_f1::<&str>(&[], &["a"]).unwrap(), (0.0, 0.0, 0.0));
    }

    fn pairs(scores: &[f64]) -> Vec<(String, f64)> {
        scores.iter().enumerate().map(|(i, &s)| (format!("p{i:02}"), s)).collect()
    }

    #[test]
    fn perfect_scorer() {
        let scored = pairs(&[0.9, 0.8, 0.7, 0.2, 0.1]);
        let pos: BTreeSet<String> = ["p00", "p01", "p02"].iter().map(|s| s.to_string()).collect();
        let c = pr_curve(&scored, &pos).unwrap();
        assert!(c[..3].iter().all(|p| p.precision == 1.0));
        assert_eq!(c[2].recall, 1.0);
        assert_eq!(c[4].precision, 0.6);
        assert_eq!(average_precision(&c), 1.0);
        assert_eq!(precision_at_recall(&c, 0.9), Some(1.0));
        assert!(pr_curve(&scored, &BTreeSet::new()).is_err());
    }

    #[test]
    fn ties_break_by_name() {
        let scored = vec![("b".to_string(), 0.5), ("a".to_string(), 0.5)];
        let pos: BTreeSet<String> = ["a".to_string()].into();
        let c = pr_curve(&scored, &pos).unwrap();
        assert_eq!(c[0].precision, 1.0);
        assert!(rank_pairs(&[("a".into(), 0.1), ("a".into(), 0.2)]).is_err());
        assert!(rank_pairs(&[("a".into(), f64::NAN)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let scored = pairs(&[0.3, 0.1, 0.7, 0.2, 0.9, 0.15]);
        let pos: BTreeSet<String> = ["p01", "p04"].iter().map(|s| s.to_string()).collect();
        let c = pr_curve(&scored, &pos).unwrap();
        let csv = pr_csv(&c);
        assert!(csv.starts_with("t,precision,recall\n"));
        assert_eq!(parse_pr_csv(&csv, Path::new("pr.csv")).unwrap(), c);
        let err = parse_pr_csv("t,precision,recall\n1,x,0\n", Path::new("pr.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, ref field, .. } if field.as_deref() == Some("precision")));
    }

    proptest! {
        #[test]
        fn identity_and_monotone_recall(
            labels in prop::collection::vec((0u8..5, any::<bool>()), 1..40),
        ) {
            let scored: Vec<(String, f64)> =
                labels.iter().enumerate().map(|(i, (s, _))| (format!("q{i}"), *s as f64)).collect();
            let pos: BTreeSet<String> =
                labels.iter().enumerate().filter(|(_, l)| l.1).map(|(i, _)| format!("q{i}")).collect();
            prop_assume!(!pos.is_empty());
            let c = pr_curve(&scored, &pos).unwrap();
            for w in c.windows(2) {
                prop_assert!(w[1].recall >= w[0].recall);
            }
            prop_assert_eq!(c.last().unwrap().recall, 1.0);
            for p in &c {
                let a = p.precision * p.t as f64;
                let b = p.recall * pos.len() as f64;
                prop_assert!((a - a.round()).abs() < 1e-9 && (a - b).abs() < 1e-9);
            }
            // positive monotone transform leaves the curve unchanged
            let warped: Vec<(String, f64)> =
                scored.iter().map(|(n, s)| (n.clone(), (3.0 * s).exp() + 1.0)).collect();
            prop_assert_eq!(pr_curve(&warped, &pos).unwrap(), c);
        }

        #[test]
        fn f1_between_precision_and_recall(
            pred in prop::collection::vec(0u8..6, 0..10),
            gold in prop::collection::vec(0u8..6, 1..10),
        ) {
            let (p, r, f) = token_f1(&pred, &gold).unwrap();
            prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
            prop_assert_eq!(token_f1(&gold, &gold).unwrap().2, 1.0);
        }
    }
}
