//! Binary-relevance precision metrics.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Denominator of average precision at k.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApDenominator {
    /// `min(|relevant|, k)`: a perfect top-k list scores 1.0.
    #[default]
    Min,
    /// `|relevant|`, unbounded by k.
    Total,
}

impl FromStr for ApDenominator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(Self::Min),
            "total" => Ok(Self::Total),
            other => Err(format!("unknown denominator {other:?} (expected min or total)")),
        }
    }
}

impl fmt::Display for ApDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Min => "min",
            Self::Total => "total",
        })
    }
}

fn hits_in_top<S: AsRef<str>>(ranked: &[S], relevant: &HashSet<String>, k: usize) -> usize {
    ranked
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id.as_ref()))
        .count()
}

/// Fraction of the first `k` slots holding a relevant item. Slots past the
/// end of `ranked` count as misses.
pub fn precision_at_k<S: AsRef<str>>(ranked: &[S], relevant: &HashSet<String>, k: usize) -> Result<f64, EvalError> {
    if k < 1 {
        return Err(EvalError::ZeroK);
    }
    Ok(hits_in_top(ranked, relevant, k) as f64 / k as f64)
}

/// Sum of precision@j over the relevant positions j <= k, divided by the
/// chosen denominator.
pub fn average_precision_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &HashSet<String>,
    k: usize,
    denominator: ApDenominator,
) -> Result<f64, EvalError> {
    if k < 1 {
        return Err(EvalError::ZeroK);
    }
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, id) in ranked.iter().take(k).enumerate() {
        if relevant.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    let denom = match denominator {
        ApDenominator::Min => relevant.len().min(k),
        ApDenominator::Total => relevant.len(),
    };
    Ok(sum / denom as f64)
}

/// Arithmetic mean of per-query average precision.
pub fn mean_average_precision(per_query: &[f64]) -> Result<f64, EvalError> {
    if per_query.is_empty() {
        return Err(EvalError::NoQueries);
    }
    Ok(per_query.iter().sum::<f64>() / per_query.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(ids: &[&str]) -> HashSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn precision_examples() {
        let rel = set(&["A", "C"]);
        assert_eq!(precision_at_k(&["A", "B", "C", "D"], &rel, 4).unwrap(), 0.5);
        assert_eq!(precision_at_k(&["X", "Y"], &rel, 2).unwrap(), 0.0);
        assert_eq!(precision_at_k(&["A", "C"], &rel, 2).unwrap(), 1.0);
        // short list keeps denominator k
        assert_eq!(precision_at_k(&["A"], &rel, 4).unwrap(), 0.25);
        assert_eq!(precision_at_k(&["A"], &rel, 0), Err(EvalError::ZeroK));
    }

    #[test]
    fn average_precision_examples() {
        let rel = set(&["A", "C"]);
        let ap = average_precision_at_k(&["A", "B", "C"], &rel, 3, ApDenominator::Min).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.833333).abs() < 1e-6);
        assert_eq!(average_precision_at_k(&["X", "Y"], &rel, 2, ApDenominator::Min).unwrap(), 0.0);
        assert_eq!(average_precision_at_k(&["C", "A", "X"], &rel, 3, ApDenominator::Min).unwrap(), 1.0);
        assert_eq!(
            average_precision_at_k(&["A"], &HashSet::new(), 3, ApDenominator::Min),
            Err(EvalError::EmptyRelevant)
        );
    }

    #[test]
    fn denominator_choice() {
        let rel = set(&["a", "b", "c", "d"]);
        let ranked = ["a", "b"];
        assert_eq!(average_precision_at_k(&ranked, &rel, 2, ApDenominator::Min).unwrap(), 1.0);
        assert_eq!(average_precision_at_k(&ranked, &rel, 2, ApDenominator::Total).unwrap(), 0.5);
        assert_eq!("total".parse::<ApDenominator>().unwrap(), ApDenominator::Total);
    }

    #[test]
    fn map_examples() {
        let m = mean_average_precision(&[0.833333, 1.0]).unwrap();
        assert!((m - 0.9166665).abs() < 1e-12);
        assert_eq!(mean_average_precision(&[0.4]).unwrap(), 0.4);
        assert_eq!(mean_average_precision(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mean_average_precision(&[]), Err(EvalError::NoQueries));
    }

    proptest! {
        #[test]
        fn metrics_are_bounded(
            ranked in prop::collection::btree_set(0u8..30, 0..25)
                .prop_map(|s| s.into_iter().collect::<Vec<_>>())
                .prop_shuffle(),
            relevant in prop::collection::hash_set(0u8..30, 1..15),
            k in 1usize..20,
        ) {
            let ranked: Vec<String> = ranked.iter().map(|x| x.to_string()).collect();
            let relevant: HashSet<String> = relevant.iter().map(|x| x.to_string()).collect();
            let p = precision_at_k(&ranked, &relevant, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let hits = p * k as f64;
            prop_assert!((hits - hits.round()).abs() < 1e-9);
            for d in [ApDenominator::Min, ApDenominator::Total] {
                let ap = average_precision_at_k(&ranked, &relevant, k, d).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            }
        }

        #[test]
        fn map_ignores_query_order(mut aps in prop::collection::vec(0.0f64..1.0, 1..20), rot in 0usize..20) {
            let a = mean_average_precision(&aps).unwrap();
            let r = rot % aps.len();
            aps.rotate_left(r);
            let b = mean_average_precision(&aps).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
